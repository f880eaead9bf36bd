use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{checkpoint_from_store, Checkpoint};
use crate::config::ModelConfig;
use crate::data::{crop_and_resize, stack, standardize, AugmentParams, FundusSample};
use crate::error::{Error, Result};
use crate::model::OdFormer;
use crate::nn::Mode;
use crate::params::{ParamStore, Session, Sgd};

use super::eval::{evaluate, Evaluation};
use super::loss::cross_entropy;

/// Crops and resizes raw samples to the model input side.
pub fn prepare(samples: &[FundusSample], cfg: &ModelConfig) -> Result<Vec<FundusSample>> {
    samples
        .iter()
        .map(|s| crop_and_resize(s, cfg.crop, cfg.input_side))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// `step,loss,lr` rows; floats in shortest round-trip form.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.losses {
            let _ = writeln!(out, "{},{:?},{:?}", r.step, r.loss, r.lr);
        }
        out
    }
}

pub enum TrainEvent<'a> {
    Step(&'a LossRecord),
    Eval(&'a EvalRecord),
}

/// Mutable optimisation state of a run.
pub struct TrainState {
    pub step: usize,
    pub seed: u64,
    pub sgd: Sgd,
    /// Step and class-1 IoU of the retained model.
    pub best: Option<(usize, Option<f64>)>,
}

pub struct TrainOutcome {
    /// Highest class-1 validation IoU seen; the first evaluation wins ties.
    pub best: Checkpoint,
    pub best_step: usize,
    pub best_eval: Evaluation,
    pub log: TrainLog,
}

fn improves(candidate: Option<f64>, best: Option<(usize, Option<f64>)>) -> bool {
    match best {
        None => true,
        Some((_, b)) => match (candidate, b) {
            (Some(c), Some(b)) => c > b,
            (Some(_), None) => true,
            (None, _) => false,
        },
    }
}

/// Seeded sample order that reshuffles at every epoch boundary.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Fixed-step momentum SGD on mean pixel cross-entropy. `train_set` and
/// `val_set` must already be at the model input side (see [`prepare`]).
/// On return `store` holds the retained best model.
pub fn train(
    model: &OdFormer,
    store: &mut ParamStore,
    train_set: &[FundusSample],
    val_set: &[FundusSample],
    mut observe: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    let cfg = &model.config;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "train and val splits must be non-empty"));
    }
    if cfg.steps == 0 {
        return Err(Error::Config {
            field: "steps",
            msg: "must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sampler = Sampler::new(train_set.len());
    let mut state = TrainState {
        step: 0,
        seed: cfg.seed,
        sgd: Sgd::new(store, cfg.lr, cfg.momentum),
        best: None,
    };
    let mut log = TrainLog::default();
    let mut best: Option<(ParamStore, Evaluation)> = None;

    while state.step < cfg.steps {
        state.step += 1;
        let batch: Vec<FundusSample> = (0..cfg.batch_size)
            .map(|_| {
                let s = &train_set[sampler.next(&mut rng)];
                if cfg.augment {
                    AugmentParams::sample(&mut rng).apply(s)
                } else {
                    s.clone()
                }
            })
            .collect();
        let (x, targets) = stack(&batch.iter().collect::<Vec<_>>())?;

        let mut s = Session::new(store, Mode::Train);
        let x = s.input(standardize(&x));
        let logits = model.forward(&mut s, x)?;
        let loss_var = cross_entropy(&mut s.tape, logits, &targets)?;
        let loss = s.tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step: state.step, loss });
        }
        s.backward(loss_var)?;
        let out = s.finish();
        store.absorb(out);
        if let Some(c) = cfg.grad_clip {
            store.clip_grad_norm(c);
        }
        state.sgd.step(store)?;
        store.zero_grad();

        let record = LossRecord {
            step: state.step,
            loss,
            lr: state.sgd.lr,
        };
        observe(TrainEvent::Step(&record));
        log.losses.push(record);

        if state.step.is_multiple_of(cfg.eval_every) || state.step == cfg.steps {
            let eval = evaluate(model, store, val_set, cfg.batch_size)?;
            let iou = eval.onh().iou;
            if improves(iou, state.best) {
                state.best = Some((state.step, iou));
                best = Some((store.clone(), eval.clone()));
            }
            let record = EvalRecord { step: state.step, eval };
            observe(TrainEvent::Eval(&record));
            log.evals.push(record);
        }
    }

    let (best_store, best_eval) = best.expect("final step always evaluates");
    *store = best_store;
    Ok(TrainOutcome {
        best: checkpoint_from_store(cfg, store)?,
        best_step: state.best.map_or(0, |b| b.0),
        best_eval,
        log,
    })
}
