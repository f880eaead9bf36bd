use crate::error::{Error, Result};
use crate::tensor::split_axis;
use crate::tensor::{Backward, GradCtx, Tape, Tensor, Var};

struct ChannelBiasOp {
    channels: usize,
    inner: usize,
}

impl Backward for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "channel_bias"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        if let Some(gx) = ctx.grad_mut(0) {
            gx.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
        let (c, inner) = (self.channels, self.inner);
        if let Some(gb) = ctx.grad_mut(1) {
            for (i, v) in g.iter().enumerate() {
                gb[(i / inner) % c] += v;
            }
        }
    }
}

/// Adds `bias[k]` to every element whose index along `axis` is `k`.
pub fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op: "channel_bias",
            axis,
            rank: shape.len(),
        });
    }
    if tape.shape(bias) != [shape[axis]] {
        return Err(Error::shape("channel_bias", &shape, tape.shape(bias)));
    }
    let (_, c, inner) = split_axis(&shape, axis);
    let bd = tape.value(bias).data();
    let data = tape
        .value(x)
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[(i / inner) % c])
        .collect();
    let out = Tensor::new(&shape, data)?;
    tape.record(out, &[x, bias], ChannelBiasOp { channels: c, inner })
}

/// `x · weight (+ bias)` over the last extent; `weight` is `(d_in, d_out)`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => {
            let last = tape.shape(y).len() - 1;
            add_channel_bias(tape, y, b, last)
        }
        None => Ok(y),
    }
}
