use crate::error::{Error, Result};
use crate::tensor::{Backward, GradCtx, Tape, Tensor, Var};

/// Two source taps and the weight of the upper one, for one output index.
#[derive(Clone, Copy, Debug)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre sampling positions (align-corners = false).
fn taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Taps {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

struct BilinearOp {
    planes: usize,
    in_hw: (usize, usize),
    rows: Vec<Taps>,
    cols: Vec<Taps>,
}

impl Backward for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        let (h, w) = self.in_hw;
        let (oh, ow) = (self.rows.len(), self.cols.len());
        if let Some(gx) = ctx.grad_mut(0) {
            for p in 0..self.planes {
                let src = &mut gx[p * h * w..(p + 1) * h * w];
                for (y, ry) in self.rows.iter().enumerate() {
                    for (x, cx) in self.cols.iter().enumerate() {
                        let v = g[(p * oh + y) * ow + x];
                        let (wy1, wx1) = (ry.frac, cx.frac);
                        let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                        src[ry.lo * w + cx.lo] += v * wy0 * wx0;
                        src[ry.lo * w + cx.hi] += v * wy0 * wx1;
                        src[ry.hi * w + cx.lo] += v * wy1 * wx0;
                        src[ry.hi * w + cx.hi] += v * wy1 * wx1;
                    }
                }
            }
        }
    }
}

/// Bilinear resize of the trailing two extents of an NCHW map.
pub fn bilinear_resize(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "bilinear_resize",
            format!("expected NCHW input, got {shape:?}"),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extents must be positive"));
    }
    let (h, w) = (shape[2], shape[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x);
    }
    let planes = shape[0] * shape[1];
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let xd = tape.value(x).data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for ry in &rows {
            for cx in &cols {
                let top = src[ry.lo * w + cx.lo] * (1.0 - cx.frac) + src[ry.lo * w + cx.hi] * cx.frac;
                let bot = src[ry.hi * w + cx.lo] * (1.0 - cx.frac) + src[ry.hi * w + cx.hi] * cx.frac;
                out.push(top * (1.0 - ry.frac) + bot * ry.frac);
            }
        }
    }
    let value = Tensor::new(&[shape[0], shape[1], out_h, out_w], out)?;
    let op = BilinearOp {
        planes,
        in_hw: (h, w),
        rows,
        cols,
    };
    tape.record(value, &[x], op)
}
