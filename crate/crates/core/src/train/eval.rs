use std::fmt::Write as _;

use crate::data::{stack, standardize, FundusSample};
use crate::error::{Error, Result};
use crate::model::OdFormer;
use crate::nn::Mode;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

use super::metrics::{metrics, ClassMetrics, ConfusionCounts};

/// Class reported in headline numbers and used for model selection.
pub const ONH_CLASS: usize = 1;

/// Per-pixel argmax over the class axis of `(N, K, H, W)` logits, laid out
/// `(N, H, W)`. Ties resolve to the lowest class.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::invalid("argmax", format!("expected (N, K, H, W), got {s:?}")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Inference-mode logits for an already standardized `(N, 3, H, W)` batch.
pub fn predict_logits(model: &OdFormer, store: &ParamStore, batch: Tensor) -> Result<Tensor> {
    let mut s = Session::new(store, Mode::Eval);
    let x = s.input(batch);
    let y = model.forward(&mut s, x)?;
    Ok(s.tape.value(y).clone())
}

/// Per-class metrics over an aggregated confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub classes: Vec<ClassMetrics>,
}

impl Evaluation {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        let classes = (0..counts.classes())
            .map(|c| metrics(&counts, c))
            .collect::<Result<_>>()?;
        Ok(Self { counts, classes })
    }

    pub fn onh(&self) -> ClassMetrics {
        self.classes[ONH_CLASS.min(self.classes.len() - 1)]
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("| Class | IoU (%) | Fsc (%) | Acc (%) |\n|---|---:|---:|---:|\n");
        for (c, m) in self.classes.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                class_label(c),
                percent(m.iou),
                percent(m.fsc),
                percent(m.acc)
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("class,iou,fsc,acc\n");
        for (c, m) in self.classes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                class_label(c),
                percent(m.iou),
                percent(m.fsc),
                percent(m.acc)
            );
        }
        out
    }
}

fn class_label(c: usize) -> String {
    match c {
        0 => "background".into(),
        ONH_CLASS => "onh".into(),
        other => format!("class{other}"),
    }
}

/// Percentage at two decimals, or `n/a` when undefined.
pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Runs the model over `samples` (values in `[0, 1]`, extents already
/// model-ready) `batch_size` at a time and aggregates confusion counts.
pub fn evaluate(
    model: &OdFormer,
    store: &ParamStore,
    samples: &[FundusSample],
    batch_size: usize,
) -> Result<Evaluation> {
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch size must be positive"));
    }
    let mut counts = ConfusionCounts::new(model.config.classes);
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&FundusSample> = chunk.iter().collect();
        let (batch, truth) = stack(&refs)?;
        let logits = predict_logits(model, store, standardize(&batch))?;
        counts.update(&argmax_classes(&logits)?, &truth)?;
    }
    Evaluation::from_counts(counts)
}
