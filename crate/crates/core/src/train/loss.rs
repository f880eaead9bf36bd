use crate::error::{Error, Result};
use crate::tensor::{Backward, GradCtx, Tape, Tensor, Var};

struct CrossEntropyOp {
    /// Softmax probabilities, `(N, K, H·W)` layout.
    probs: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
    spatial: usize,
}

impl Backward for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let scale = ctx.grad_out()[0] / self.targets.len() as f64;
        let (k, s) = (self.classes, self.spatial);
        if let Some(gx) = ctx.grad_mut(0) {
            for (i, g) in gx.iter_mut().enumerate() {
                let (n, c, p) = (i / (k * s), (i / s) % k, i % s);
                let onehot = if self.targets[n * s + p] == c { 1.0 } else { 0.0 };
                *g += scale * (self.probs[i] - onehot);
            }
        }
    }
}

/// Mean pixel cross-entropy of logits `(N, K, H, W)` against class ids laid
/// out as `(N, H, W)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("expected (N, K, H, W) logits, got {shape:?}"),
        ));
    }
    let (n, k, s) = (shape[0], shape[1], shape[2] * shape[3]);
    if targets.len() != n * s {
        return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("target class {bad} out of range for {k} classes"),
        ));
    }
    let x = tape.value(logits).data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..s {
            let at = |c: usize| (b * k + c) * s + p;
            let (arg, max) =
                (0..k).map(|c| (c, x[at(c)])).fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            let mut rest = 0.0;
            for c in 0..k {
                let e = (x[at(c)] - max).exp();
                probs[at(c)] = e;
                if c != arg {
                    rest += e;
                }
            }
            let z = 1.0 + rest;
            for c in 0..k {
                probs[at(c)] /= z;
            }
            // log-sum-exp minus the target logit, exact for saturated margins
            total += (max - x[at(targets[b * s + p])]) + rest.ln_1p();
        }
    }
    let loss = total / (n * s) as f64;
    let op = CrossEntropyOp {
        probs,
        targets: targets.to_vec(),
        classes: k,
        spatial: s,
    };
    tape.record(Tensor::scalar(loss), &[logits], op)
}
