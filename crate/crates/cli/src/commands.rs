use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use odformer_core::checkpoint::{load_model, save_model};
use odformer_core::data::{
    lint_participants, load_manifest, parse_manifest, read_image, standardize, synth_corpus, write_mask, Mask, Split,
};
use odformer_core::gradcheck::{render, run_suite, Options};
use odformer_core::train::{self, argmax_classes, evaluate, predict_logits, prepare, TrainEvent};
use odformer_core::{Error, FundusSample, ModelConfig, OdFormer};

use crate::VerificationFailed;

/// `<out>` with `suffix` appended to the file name.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_split(manifest: &Path) -> Result<Vec<FundusSample>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Io {
        path: manifest.to_path_buf(),
        source: e,
    })?;
    lint_participants(&parse_manifest(&text)?)?;
    Ok(load_manifest(manifest)?)
}

pub fn train(
    manifest: &Path,
    config: &Path,
    out: &Path,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = ModelConfig::load(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(Error::Config {
            field: "steps",
            msg: "must be positive".into(),
        }
        .into());
    }
    if cfg.lr == 0.0 {
        eprintln!("warning: lr is 0, parameters will not change");
    }

    let samples = load_split(manifest)?;
    let (train_raw, val_raw): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);
    if train_raw.is_empty() || val_raw.is_empty() {
        return Err(anyhow!(Error::Manifest {
            line: 0,
            msg: format!(
                "need samples in both splits, found {} train and {} val",
                train_raw.len(),
                val_raw.len()
            ),
        }));
    }
    let train_set = prepare(&train_raw, &cfg)?;
    let val_set = prepare(&val_raw, &cfg)?;

    let (model, mut store) = OdFormer::new(cfg.clone())?;
    println!(
        "training {} parameters on {} train / {} val samples for {} steps",
        store.param_count(),
        train_set.len(),
        val_set.len(),
        cfg.steps
    );
    let outcome = train::train(&model, &mut store, &train_set, &val_set, |e| match e {
        TrainEvent::Step(r) if r.step % 25 == 0 || r.step == 1 => println!("step {:>6}  loss {:.5}", r.step, r.loss),
        TrainEvent::Eval(r) => println!("step {:>6}  val IoU {}", r.step, train::percent(r.eval.onh().iou)),
        TrainEvent::Step(_) => {}
    })?;

    save_model(out, &cfg, &store)?;
    write(&sibling(out, ".loss.csv"), &outcome.log.loss_csv())?;
    write(&sibling(out, ".val.md"), &outcome.best_eval.markdown())?;
    write(&sibling(out, ".val.csv"), &outcome.best_eval.csv())?;
    let onh = outcome.best_eval.onh();
    println!(
        "best checkpoint from step {} written to {}",
        outcome.best_step,
        out.display()
    );
    print!("{}", outcome.best_eval.markdown());
    println!(
        "val IoU {} Fsc {} Acc {}",
        train::percent(onh.iou),
        train::percent(onh.fsc),
        train::percent(onh.acc)
    );
    Ok(())
}

pub fn infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, store) = load_model(ckpt)?;
    let img = read_image(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    model.config.check_input(h, w).context("input image")?;
    let batch = standardize(&img).reshape(&[1, 3, h, w])?;
    let logits = predict_logits(&model, &store, batch)?;
    let classes = argmax_classes(&logits)?;
    let mask = Mask::new(h, w, classes.into_iter().map(|c| u8::from(c == 1)).collect())?;
    write_mask(out, &mask)?;
    println!(
        "{}x{} mask with {} optic nerve head pixels written to {}",
        h,
        w,
        mask.count(1),
        out.display()
    );
    Ok(())
}

pub fn eval(ckpt: &Path, manifest: &Path, split: &str, report: &Path) -> Result<()> {
    let split: Split = split
        .parse()
        .map_err(|msg: String| Error::Config { field: "split", msg })?;
    let (model, store) = load_model(ckpt)?;
    let samples: Vec<_> = load_split(manifest)?.into_iter().filter(|s| s.split == split).collect();
    if samples.is_empty() {
        return Err(anyhow!(Error::Manifest {
            line: 0,
            msg: format!("no samples in split {split}"),
        }));
    }
    let prepared = prepare(&samples, &model.config)?;
    let result = evaluate(&model, &store, &prepared, model.config.batch_size)?;
    let is_csv = report.extension().is_some_and(|e| e == "csv");
    write(report, &if is_csv { result.csv() } else { result.markdown() })?;
    let onh = result.onh();
    print!("{}", result.markdown());
    println!(
        "{split} IoU {} Fsc {} Acc {} over {} samples",
        train::percent(onh.iou),
        train::percent(onh.fsc),
        train::percent(onh.acc),
        samples.len()
    );
    Ok(())
}

pub fn gradcheck(tol: f64, eps: f64, seed: u64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config {
            field: "eps",
            msg: format!("must be positive, got {eps}"),
        }
        .into());
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config {
            field: "tol",
            msg: format!("must be positive, got {tol}"),
        }
        .into());
    }
    let reports = run_suite(Options { eps, seed })?;
    let (text, worst) = render(&reports, tol);
    print!("{text}");
    match worst {
        None => {
            println!("all {} checks passed", reports.len());
            Ok(())
        }
        Some(w) => Err(VerificationFailed(format!(
            "gradient check failed; worst op {} with relative error {:.3e} (tolerance {:.0e})",
            w.name,
            w.max_rel,
            w.tolerance(tol)
        ))
        .into()),
    }
}

pub fn synth(count: usize, size: usize, out: &Path, seed: u64) -> Result<()> {
    let entries = synth_corpus(out, count, size, seed)?;
    let n_train = entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "wrote {} samples ({} train, {} val) to {}",
        entries.len(),
        n_train,
        entries.len() - n_train,
        out.display()
    );
    Ok(())
}
