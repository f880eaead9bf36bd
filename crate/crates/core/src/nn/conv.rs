use crate::error::{Error, Result};
use crate::tensor::{gemm, Backward, GradCtx, Mat, Tape, Tensor, Var};

/// Stride, dilation and zero padding of a 2-D convolution, as (height, width)
/// pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    /// Stride-1 geometry that preserves spatial extents for an odd kernel.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            stride: (1, 1),
            dilation,
            padding: (dilation.0 * (kernel.0 - 1) / 2, dilation.1 * (kernel.1 - 1) / 2),
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            dilation: (1, 1),
            padding: (padding, padding),
        }
    }

    /// `floor((extent + 2·pad − dilation·(kernel − 1) − 1) / stride) + 1`,
    /// or `None` when the dilated kernel does not fit the padded extent.
    pub fn output_extent(&self, extent: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, d: usize, p: usize| {
            let padded = n + 2 * p;
            let span = d * (k - 1) + 1;
            (padded >= span && s > 0).then(|| (padded - span) / s + 1)
        };
        Some((
            axis(extent.0, kernel.0, self.stride.0, self.dilation.0, self.padding.0)?,
            axis(extent.1, kernel.1, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }
}

#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Layout {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source offset inside one input image for column row `r`, output
    /// position `(oy, ox)`; `None` in the zero padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let g = &self.geom;
        let y = (oy * g.stride.0 + i * g.dilation.0).checked_sub(g.padding.0)?;
        let x = (ox * g.stride.1 + j * g.dilation.1).checked_sub(g.padding.1)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(c, i, j, oy, ox) {
                                Some(s) => image[s],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.source(c, i, j, oy, ox) {
                                image[s] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    layout: Layout,
    /// im2col buffers, one per batch entry.
    cols: Vec<Vec<f64>>,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let l = self.layout;
        let (k, p) = (l.rows(), l.positions());
        let g = ctx.grad_out().to_vec();
        let weight = ctx.input(1).data().to_vec();
        let wmat = Mat::new(&weight, l.c_out, k);

        if let Some(gw) = ctx.grad_mut(1) {
            for (n, cols) in self.cols.iter().enumerate() {
                let gn = Mat::new(&g[n * l.c_out * p..(n + 1) * l.c_out * p], l.c_out, p);
                gemm(gn, Mat::new(cols, k, p).t(), 1.0, gw);
            }
        }
        if self.has_bias {
            if let Some(gb) = ctx.grad_mut(2) {
                for n in 0..l.n {
                    for (co, b) in gb.iter_mut().enumerate() {
                        let base = (n * l.c_out + co) * p;
                        *b += g[base..base + p].iter().sum::<f64>();
                    }
                }
            }
        }
        if let Some(gx) = ctx.grad_mut(0) {
            let mut dcols = vec![0.0; k * p];
            let image = l.c_in * l.h * l.w;
            for n in 0..l.n {
                let gn = Mat::new(&g[n * l.c_out * p..(n + 1) * l.c_out * p], l.c_out, p);
                gemm(wmat.t(), gn, 0.0, &mut dcols);
                l.col2im(&dcols, &mut gx[n * image..(n + 1) * image]);
            }
        }
    }
}

/// 2-D cross-correlation of `x: (N, C_in, H, W)` with
/// `weight: (C_out, C_in, k_h, k_w)` plus an optional per-channel bias.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    if xs[1] != ws[1] {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {} channels, weight {ws:?} expects {}", xs[1], ws[1]),
        ));
    }
    if let Some(b) = bias {
        let bs = tape.shape(b);
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", &ws, bs));
        }
    }
    if geom.stride.0 == 0 || geom.stride.1 == 0 || geom.dilation.0 == 0 || geom.dilation.1 == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
    }
    let (ho, wo) = geom.output_extent((xs[2], xs[3]), (ws[2], ws[3])).ok_or_else(|| {
        Error::invalid(
            "conv2d",
            format!("kernel {:?} with {geom:?} does not fit input {xs:?}", &ws[2..]),
        )
    })?;
    let l = Layout {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
        geom,
    };
    let (k, p) = (l.rows(), l.positions());
    let xd = tape.value(x).data();
    let wd = tape.value(weight).data();
    let bd = bias.map(|b| tape.value(b).data());
    let image = l.c_in * l.h * l.w;
    let mut out = vec![0.0; l.n * l.c_out * p];
    let mut all_cols = Vec::with_capacity(l.n);
    for n in 0..l.n {
        let mut cols = vec![0.0; k * p];
        l.im2col(&xd[n * image..(n + 1) * image], &mut cols);
        let dst = &mut out[n * l.c_out * p..(n + 1) * l.c_out * p];
        if let Some(bd) = bd {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bd[co]);
            }
        }
        gemm(Mat::new(wd, l.c_out, k), Mat::new(&cols, k, p), 1.0, dst);
        all_cols.push(cols);
    }
    let value = Tensor::new(&[l.n, l.c_out, ho, wo], out)?;
    let op = Conv2dOp {
        layout: l,
        cols: all_cols,
        has_bias: bias.is_some(),
    };
    match bias {
        Some(b) => tape.record(value, &[x, weight, b], op),
        None => tape.record(value, &[x, weight], op),
    }
}

/// Horizontal `1×L` pass followed by a vertical `L×1` pass, both with same
/// padding so spatial extents are preserved.
pub fn separable_conv(
    tape: &mut Tape,
    x: Var,
    horizontal: (Var, Option<Var>),
    vertical: (Var, Option<Var>),
) -> Result<Var> {
    let hk = tape.shape(horizontal.0).to_vec();
    let vk = tape.shape(vertical.0).to_vec();
    if hk.len() != 4 || hk[2] != 1 || hk[3].is_multiple_of(2) {
        return Err(Error::invalid(
            "separable_conv",
            format!("horizontal kernel {hk:?} is not 1×L with odd L"),
        ));
    }
    if vk.len() != 4 || vk[3] != 1 || vk[2].is_multiple_of(2) {
        return Err(Error::invalid(
            "separable_conv",
            format!("vertical kernel {vk:?} is not L×1 with odd L"),
        ));
    }
    let u = conv2d(
        tape,
        x,
        horizontal.0,
        horizontal.1,
        ConvGeometry::same((1, hk[3]), (1, 1)),
    )?;
    conv2d(tape, u, vertical.0, vertical.1, ConvGeometry::same((vk[2], 1), (1, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        let g = ConvGeometry {
            stride: (1, 1),
            dilation: (2, 2),
            padding: (2, 2),
        };
        assert_eq!(g.output_extent((7, 7), (3, 3)), Some((7, 7)));
        assert_eq!(
            ConvGeometry::strided(4, 2).output_extent((64, 64), (5, 5)),
            Some((16, 16))
        );
        assert_eq!(
            ConvGeometry::strided(2, 1).output_extent((16, 16), (3, 3)),
            Some((8, 8))
        );
        assert_eq!(ConvGeometry::default().output_extent((2, 2), (3, 3)), None);
    }

    #[test]
    fn identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.3 - 1.0).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = conv2d(&mut tape, x, w, Some(b), ConvGeometry::default()).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dilated_same_padding_keeps_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 7, 7]).unwrap());
        let w = tape.constant(Tensor::ones(&[3, 2, 3, 3]).unwrap());
        let y = conv2d(&mut tape, x, w, None, ConvGeometry::same((3, 3), (2, 2))).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 7, 7]);
        // centre tap sees the full 3×3 dilated footprint inside the image
        assert_eq!(tape.value(y).at(&[0, 0, 3, 3]), 18.0);
        // corner sees only 2×2 taps per channel
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn channel_mismatch_and_bad_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]).unwrap());
        assert!(conv2d(&mut tape, x, w, None, ConvGeometry::default()).is_err());
        let w = tape.constant(Tensor::ones(&[1, 2, 5, 5]).unwrap());
        assert!(conv2d(&mut tape, x, w, None, ConvGeometry::default()).is_err());
    }

    #[test]
    fn separable_impulse_is_box() {
        let mut tape = Tape::new();
        let mut impulse = Tensor::zeros(&[1, 1, 11, 11]).unwrap();
        impulse.data_mut()[5 * 11 + 5] = 1.0;
        let x = tape.constant(impulse);
        let ku = tape.constant(Tensor::ones(&[1, 1, 1, 7]).unwrap());
        let kv = tape.constant(Tensor::ones(&[1, 1, 7, 1]).unwrap());
        let y = separable_conv(&mut tape, x, (ku, None), (kv, None)).unwrap();
        let out = tape.value(y);
        for r in 0..11 {
            for c in 0..11 {
                let inside = (2..=8).contains(&r) && (2..=8).contains(&c);
                assert_eq!(out.at(&[0, 0, r, c]), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn separable_zero_input_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]).unwrap());
        let ku = tape.constant(Tensor::ones(&[2, 2, 1, 7]).unwrap());
        let kv = tape.constant(Tensor::ones(&[2, 2, 7, 1]).unwrap());
        let zb = tape.constant(Tensor::zeros(&[2]).unwrap());
        let y = separable_conv(&mut tape, x, (ku, Some(zb)), (kv, Some(zb))).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[1, 2, 5, 5]).unwrap());
    }
}
