use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use odformer_core::checkpoint::load_model;
use odformer_core::data::{load_manifest, read_image, read_mask, write_image, Split};
use odformer_core::{ModelConfig, OdFormer, Tensor};
use tempfile::TempDir;

fn odformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, count: usize, size: usize, seed: u64) {
    let o = odformer(
        &[
            "synth",
            "--count",
            &count.to_string(),
            "--size",
            &size.to_string(),
            "--out",
            "corpus",
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--manifest",
        "corpus/manifest.jsonl",
        "--config",
        "desk",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    odformer(&args, dir)
}

#[test]
fn synth_writes_eighty_twenty_manifest() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 10, 64, 7);
    let entries = load_manifest(&dir.path().join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(entries.len(), 10);
    assert_eq!(entries.iter().filter(|s| s.split == Split::Train).count(), 8);
    assert_eq!(entries.iter().filter(|s| s.split == Split::Val).count(), 2);
    for s in &entries {
        assert_eq!((s.height(), s.width()), (64, 64));
        assert!(s.mask.count(1) > 0);
    }
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), 4, 48, 11);
    synth(b.path(), 4, 48, 11);
    let mut names: Vec<_> = fs::read_dir(a.path().join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in names {
        let fa = fs::read(a.path().join("corpus").join(&n)).unwrap();
        let fb = fs::read(b.path().join("corpus").join(&n)).unwrap();
        assert_eq!(fa, fb, "{n:?} differs");
    }
}

#[test]
fn train_then_infer_and_eval() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 2, 64, 0);
    let o = train(dir.path(), "m.ckpt", &["--steps", "300"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("val IoU "), "{out}");
    for f in ["m.ckpt", "m.ckpt.loss.csv", "m.ckpt.val.md", "m.ckpt.val.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(dir.path().join("m.ckpt.loss.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr\n"));
    assert_eq!(log.lines().count(), 301);

    for side in [64usize, 128] {
        let img = Tensor::from_fn(&[3, side, side], |i| ((i * 37) % 255) as f64 / 255.0).unwrap();
        let name = format!("in{side}.ppm");
        write_image(&dir.path().join(&name), &img).unwrap();
        let out = format!("out{side}.pgm");
        let o = odformer(
            &["infer", "--ckpt", "m.ckpt", "--image", &name, "--out", &out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let mask = read_mask(&dir.path().join(&out)).unwrap();
        assert_eq!((mask.height, mask.width), (side, side));
        let raw = fs::read(dir.path().join(&out)).unwrap();
        let payload = &raw[raw.len() - side * side..];
        assert!(payload.iter().all(|&b| b == 0 || b == 255));
    }

    let o = odformer(
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--manifest",
            "corpus/manifest.jsonl",
            "--report",
            "r.md",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("r.md")).unwrap();
    assert!(table.starts_with("| Class | IoU (%) | Fsc (%) | Acc (%) |"));
    assert!(table.contains("| onh |"));
    let o = odformer(
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--manifest",
            "corpus/manifest.jsonl",
            "--report",
            "r.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("class,iou,fsc,acc\n"));
    let best = fs::read_to_string(dir.path().join("m.ckpt.val.csv")).unwrap();
    assert_eq!(
        csv, best,
        "eval of the saved checkpoint reproduces the training-time table"
    );
}

#[test]
fn zero_lr_warns_and_keeps_weights() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 3, 64, 2);
    let o = train(dir.path(), "z.ckpt", &["--steps", "10", "--lr", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: lr is 0"));
    let (_, loaded) = load_model(&dir.path().join("z.ckpt")).unwrap();
    let (_, init) = OdFormer::new(ModelConfig::desk()).unwrap();
    let mut checked = 0;
    for (id, name) in init.named_trainable() {
        let lid = loaded.find(&name).unwrap_or_else(|| panic!("{name} missing"));
        let a = init.value(id).data().iter().map(|&v| v as f32);
        let b = loaded.value(lid).data().iter().map(|&v| v as f32);
        assert!(a.eq(b), "{name} changed");
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn bad_window_is_config_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 3, 64, 0);
    let cfg = ModelConfig::desk().to_toml().replace("window = 4", "window = 0");
    assert!(cfg.contains("window = 0"));
    fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let o = odformer(
        &[
            "train",
            "--manifest",
            "corpus/manifest.jsonl",
            "--config",
            "bad.toml",
            "--out",
            "x.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("window"), "{}", stderr(&o));
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn corrupted_checkpoint_is_format_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 3, 64, 0);
    let o = train(dir.path(), "c.ckpt", &["--steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = dir.path().join("c.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, bytes).unwrap();
    let o = odformer(
        &[
            "infer",
            "--ckpt",
            "c.ckpt",
            "--image",
            "corpus/synth_0000.ppm",
            "--out",
            "o.pgm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_io_error() {
    let dir = TempDir::new().unwrap();
    let o = train(dir.path(), "m.ckpt", &["--steps", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn infer_rejects_indivisible_extent() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 3, 64, 0);
    let o = train(dir.path(), "m.ckpt", &["--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = read_image(&dir.path().join("corpus/synth_0000.ppm")).unwrap();
    let cropped = Tensor::from_fn(&[3, 60, 60], |i| {
        let (c, r, x) = (i / 3600, (i / 60) % 60, i % 60);
        img.at(&[c, r, x])
    })
    .unwrap();
    write_image(&dir.path().join("odd.ppm"), &cropped).unwrap();
    let o = odformer(
        &["infer", "--ckpt", "m.ckpt", "--image", "odd.ppm", "--out", "o.pgm"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_rejects_unknown_split() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 3, 64, 0);
    let o = train(dir.path(), "m.ckpt", &["--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = odformer(
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--manifest",
            "corpus/manifest.jsonl",
            "--split",
            "test",
            "--report",
            "r.md",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown split"));
}

#[test]
fn gradcheck_fails_at_impossible_tolerance() {
    let dir = TempDir::new().unwrap();
    let o = odformer(&["gradcheck", "--tol", "1e-12"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("worst op"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let dir = TempDir::new().unwrap();
    let o = odformer(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("checks passed"));
}

#[test]
fn training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 4, 64, 5);
    for out in ["a.ckpt", "b.ckpt"] {
        let o = train(dir.path(), out, &["--steps", "30", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ckpt.loss.csv"), read("b.ckpt.loss.csv"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    let o = train(dir.path(), "c.ckpt", &["--steps", "30", "--seed", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(read("a.ckpt.loss.csv"), read("c.ckpt.loss.csv"));
}
