use crate::error::{Error, Result};
use crate::tensor::{split_axis, Backward, GradCtx, Tape, Tensor, Var};

/// Momentum used to fold batch statistics into running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Forward statistics shared by layer norm and batch norm backward passes:
/// normalized values and the reciprocal standard deviation per group.
struct Normalized {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

/// Backward of `y = γ·x̂ + β` where `x̂` is standardized over groups of `m`
/// elements. `group_of(i)` and `chan_of(i)` map flat indices to the
/// normalization group and the affine channel.
#[allow(clippy::too_many_arguments)]
fn norm_backward(
    ctx: &mut GradCtx<'_>,
    stats: &Normalized,
    groups: usize,
    m: usize,
    batch_stats: bool,
    group_of: impl Fn(usize) -> usize,
    chan_of: impl Fn(usize) -> usize,
) {
    let g = ctx.grad_out().to_vec();
    let gamma = ctx.input(1).data().to_vec();
    if let Some(gg) = ctx.grad_mut(1) {
        for (i, &gi) in g.iter().enumerate() {
            gg[chan_of(i)] += gi * stats.xhat[i];
        }
    }
    if let Some(gb) = ctx.grad_mut(2) {
        for (i, &gi) in g.iter().enumerate() {
            gb[chan_of(i)] += gi;
        }
    }
    if let Some(gx) = ctx.grad_mut(0) {
        if !batch_stats {
            for (i, &gi) in g.iter().enumerate() {
                gx[i] += gi * gamma[chan_of(i)] * stats.rstd[group_of(i)];
            }
            return;
        }
        let mut sum_d = vec![0.0; groups];
        let mut sum_dx = vec![0.0; groups];
        for (i, &gi) in g.iter().enumerate() {
            let d = gi * gamma[chan_of(i)];
            let grp = group_of(i);
            sum_d[grp] += d;
            sum_dx[grp] += d * stats.xhat[i];
        }
        let mf = m as f64;
        for (i, &gi) in g.iter().enumerate() {
            let d = gi * gamma[chan_of(i)];
            let grp = group_of(i);
            gx[i] += stats.rstd[grp] / mf * (mf * d - sum_d[grp] - stats.xhat[i] * sum_dx[grp]);
        }
    }
}

struct LayerNormOp {
    stats: Normalized,
    outer: usize,
    features: usize,
    inner: usize,
}

impl Backward for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let (c, inner) = (self.features, self.inner);
        norm_backward(
            ctx,
            &self.stats,
            self.outer * inner,
            c,
            true,
            |i| (i / (c * inner)) * inner + i % inner,
            |i| (i / inner) % c,
        );
    }
}

/// Standardizes over `axis` independently at every other index, then applies
/// a per-feature affine `γ, β` of length `shape[axis]`.
///
/// Use `axis = 1` for NCHW maps and the last axis for token matrices.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid("layer_norm", format!("eps must be positive, got {eps}")));
    }
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op: "layer_norm",
            axis,
            rank: shape.len(),
        });
    }
    let (outer, c, inner) = split_axis(&shape, axis);
    for p in [gamma, beta] {
        if tape.shape(p) != [c] {
            return Err(Error::shape("layer_norm", &shape, tape.shape(p)));
        }
    }
    let xd = tape.value(x).data();
    let gd = tape.value(gamma).data();
    let bd = tape.value(beta).data();
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; outer * inner];
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * c + k) * inner + i;
            let mean = (0..c).map(|k| xd[idx(k)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|k| (xd[idx(k)] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for k in 0..c {
                let h = (xd[idx(k)] - mean) * r;
                xhat[idx(k)] = h;
                out[idx(k)] = gd[k] * h + bd[k];
            }
        }
    }
    let value = Tensor::new(&shape, out)?;
    let op = LayerNormOp {
        stats: Normalized { xhat, rstd },
        outer,
        features: c,
        inner,
    };
    tape.record(value, &[x, gamma, beta], op)
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of training batches folded in; zero means uninitialized.
    pub batches: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BatchNormOp {
    stats: Normalized,
    channels: usize,
    spatial: usize,
    batch: usize,
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let (c, s) = (self.channels, self.spatial);
        norm_backward(
            ctx,
            &self.stats,
            c,
            self.batch * s,
            self.batch_stats,
            |i| (i / s) % c,
            |i| (i / s) % c,
        );
    }
}

/// Per-channel batch normalization of an NCHW map.
///
/// In [`Mode::Train`] the batch statistics normalize the input and the
/// updated running statistics are returned; [`Mode::Eval`] normalizes with
/// `running` and returns `None`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<RunningStats>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "batch_norm",
            format!("expected NCHW input, got {shape:?}"),
        ));
    }
    let (n, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
    for p in [gamma, beta] {
        if tape.shape(p) != [c] {
            return Err(Error::shape("batch_norm", &shape, tape.shape(p)));
        }
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::invalid(
            "batch_norm",
            format!("running stats for {} channels, input has {c}", running.mean.len()),
        ));
    }
    if mode == Mode::Eval && running.batches == 0 {
        return Err(Error::invalid(
            "batch_norm",
            "eval mode with uninitialized running statistics",
        ));
    }
    let xd = tape.value(x).data();
    let m = n * s;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, &v) in xd.iter().enumerate() {
                mean[(i / s) % c] += v;
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for (i, &v) in xd.iter().enumerate() {
                let ch = (i / s) % c;
                var[ch] += (v - mean[ch]).powi(2);
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        }
        Mode::Eval => (running.mean.clone(), running.var.clone()),
    };
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gd = tape.value(gamma).data();
    let bd = tape.value(beta).data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for (i, &v) in xd.iter().enumerate() {
        let ch = (i / s) % c;
        let h = (v - mean[ch]) * rstd[ch];
        xhat[i] = h;
        out[i] = gd[ch] * h + bd[ch];
    }
    let updated = (mode == Mode::Train).then(|| {
        let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        RunningStats {
            mean: running
                .mean
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect(),
            var: running
                .var
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias)
                .collect(),
            batches: running.batches + 1,
        }
    });
    let value = Tensor::new(&shape, out)?;
    let op = BatchNormOp {
        stats: Normalized { xhat, rstd },
        channels: c,
        spatial: s,
        batch: n,
        batch_stats: mode == Mode::Train,
    };
    Ok((tape.record(value, &[x, gamma, beta], op)?, updated))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &mut Tape, c: usize) -> (Var, Var) {
        (
            tape.constant(Tensor::ones(&[c]).unwrap()),
            tape.constant(Tensor::zeros(&[c]).unwrap()),
        )
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 7.5).unwrap());
        let (g, b) = affine(&mut tape, 4);
        let y = layer_norm(&mut tape, x, g, b, 2, LN_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let (g, b) = affine(&mut tape, 2);
        let y = layer_norm(&mut tape, x, g, b, 1, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_channel_axis_of_nchw() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 1, 2], |i| [1.0, 5.0, 3.0, 5.0][i]).unwrap());
        let (g, b) = affine(&mut tape, 2);
        let y = layer_norm(&mut tape, x, g, b, 1, 1e-14).unwrap();
        let d = tape.value(y).data();
        // position 0 sees channels (1, 3); position 1 sees (5, 5)
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[2] - 1.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]).unwrap());
        let (g, b) = affine(&mut tape, 2);
        assert!(layer_norm(&mut tape, x, g, b, 1, 0.0).is_err());
        assert!(layer_norm(&mut tape, x, g, b, 1, -1.0).is_err());
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut tape = Tape::new();
        // per-channel values {3, 7, 3, 7}: mean 5, variance 4
        let x = tape.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| [3.0, 7.0, 7.0, 3.0][i]).unwrap());
        let (g, b) = affine(&mut tape, 1);
        let (y, stats) = batch_norm(&mut tape, x, g, b, &RunningStats::new(1), Mode::Train).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / 4.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 4.0 / (4.0 + BN_EPS)).abs() < 1e-12);
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 16.0 / 3.0)).abs() < 1e-12);
        assert_eq!(stats.batches, 1);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let running = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
            batches: 3,
        };
        let mut outs = Vec::new();
        for data in [[0.0, 1.0, 2.0, 3.0], [10.0, 10.0, -4.0, 8.0]] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[1, 1, 2, 2], data.to_vec()).unwrap());
            let (g, b) = affine(&mut tape, 1);
            let (y, upd) = batch_norm(&mut tape, x, g, b, &running, Mode::Eval).unwrap();
            assert!(upd.is_none());
            let r = 1.0 / (4.0 + BN_EPS).sqrt();
            for (o, i) in tape.value(y).data().iter().zip(data) {
                assert!((o - (i - 1.0) * r).abs() < 1e-12);
            }
            outs.push(tape.value(y).clone());
        }
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn batch_norm_eval_requires_initialized_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let (g, b) = affine(&mut tape, 1);
        assert!(batch_norm(&mut tape, x, g, b, &RunningStats::new(1), Mode::Eval).is_err());
    }
}
