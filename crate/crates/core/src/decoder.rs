//! Pyramid decoder with lightweight bidirectional feature recalibration.
//!
//! Every encoder level is projected to the shared width `C^D` by a 1×1
//! convolution, then recalibrated:
//!
//! ```text
//! Fᴬ = k_v ⊛ (k_u ⊛ F)                              1×7 then 7×1
//! Fᴿ = Conv1×1(ReLU(BN(Conv1×1(Fᴬ)))) + F           C^D → C^D/4 → C^D
//! ```
//!
//! Levels are fused top-down (`Fᴰ_i = Fᴿ_i + Resize(Fᴰ_{i+1})`), resized to
//! `H/4 × W/4`, concatenated and classified by a 3×3 convolution whose
//! logits are finally upsampled to the input size.

use crate::config::ModelConfig;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Builder, Conv2d, SeparablePair};
use crate::nn::{self, ConvGeometry};
use crate::params::{ParamStore, Session};
use crate::tensor::{Tape, Var};

/// Length of the separable kernels; matches one 7×7 kernel's support.
pub const SEPARABLE_LENGTH: usize = 7;
pub const BOTTLENECK_RATIO: usize = 4;

#[derive(Debug, Clone)]
pub struct Lbfr {
    pub sep: SeparablePair,
    pub squeeze: Conv2d,
    pub bn: BatchNorm2d,
    pub expand: Conv2d,
}

impl Lbfr {
    pub fn build(b: &mut Builder<'_>, name: &str, c: usize) -> Result<Self> {
        if !c.is_multiple_of(BOTTLENECK_RATIO) || c == 0 {
            return Err(Error::invalid(
                "lbfr",
                format!("width {c} is not a positive multiple of 4"),
            ));
        }
        let mid = c / BOTTLENECK_RATIO;
        b.scoped(name, |b| {
            Ok(Self {
                sep: b.separable("sep", c, c, SEPARABLE_LENGTH)?,
                squeeze: b.conv2d("squeeze", c, mid, (1, 1), ConvGeometry::default())?,
                bn: b.batch_norm("bn", mid)?,
                expand: b.conv2d("expand", mid, c, (1, 1), ConvGeometry::default())?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, fe: Var) -> Result<Var> {
        let fa = self.sep.forward(s, fe)?;
        let r = self.squeeze.forward(s, fa)?;
        let r = self.bn.forward(s, r)?;
        let r = nn::relu(&mut s.tape, r)?;
        let r = self.expand.forward(s, r)?;
        s.tape.add(r, fe)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.sep.param_count(store)
            + self.squeeze.param_count(store)
            + self.bn.param_count(store)
            + self.expand.param_count(store)
    }
}

/// Convolution stacks with the same 7×7 receptive field, compared by
/// weight count at equal channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recalibration {
    /// `1×7` then `7×1`.
    Separable,
    /// Three stacked 3×3 convolutions.
    ThreeConv3,
    /// 3×3 then 5×5.
    Conv3Conv5,
    /// A single 7×7 convolution.
    Conv7,
}

impl Recalibration {
    pub const ALL: [Recalibration; 4] = [
        Recalibration::Separable,
        Recalibration::ThreeConv3,
        Recalibration::Conv3Conv5,
        Recalibration::Conv7,
    ];

    /// Kernel shapes of the stack, in application order.
    pub fn kernels(self) -> Vec<(usize, usize)> {
        match self {
            Recalibration::Separable => vec![(1, SEPARABLE_LENGTH), (SEPARABLE_LENGTH, 1)],
            Recalibration::ThreeConv3 => vec![(3, 3); 3],
            Recalibration::Conv3Conv5 => vec![(3, 3), (5, 5)],
            Recalibration::Conv7 => vec![(7, 7)],
        }
    }

    /// Weight scalars (biases excluded) at `c → c` channels.
    pub fn weight_count(self, c: usize) -> usize {
        self.kernels().iter().map(|(h, w)| h * w * c * c).sum()
    }

    /// `(height, width)` of the composed receptive field.
    pub fn receptive_field(self) -> (usize, usize) {
        self.kernels()
            .iter()
            .fold((1, 1), |(rh, rw), (h, w)| (rh + h - 1, rw + w - 1))
    }
}

/// Top-down fusion: `Fᴰ_k = Fᴿ_k`, `Fᴰ_i = Fᴿ_i + Resize(Fᴰ_{i+1})`.
/// Level `i` must be exactly twice the extent of level `i+1`.
pub fn pyramid_fuse(tape: &mut Tape, recalibrated: &[Var]) -> Result<Vec<Var>> {
    let k = recalibrated.len();
    if k == 0 {
        return Err(Error::invalid("pyramid_fuse", "empty pyramid"));
    }
    for i in 0..k - 1 {
        let (lo, hi) = (tape.shape(recalibrated[i]), tape.shape(recalibrated[i + 1]));
        if lo.len() != 4 || hi.len() != 4 || lo[2] != 2 * hi[2] || lo[3] != 2 * hi[3] || lo[..2] != hi[..2] {
            return Err(Error::shape("pyramid_fuse", lo, hi));
        }
    }
    let mut fused = vec![recalibrated[k - 1]; k];
    for i in (0..k - 1).rev() {
        let s = tape.shape(recalibrated[i]).to_vec();
        let up = nn::bilinear_resize(tape, fused[i + 1], s[2], s[3])?;
        fused[i] = tape.add(recalibrated[i], up)?;
    }
    Ok(fused)
}

/// Resizes every fused level to `H/4 × W/4`, concatenates, applies the head
/// convolution and upsamples the logits to `H × W`.
pub fn seg_head(s: &mut Session<'_>, fused: &[Var], head: &Conv2d, h: usize, w: usize) -> Result<Var> {
    let classes = head.weight_shape(s.store())[0];
    if classes < 2 {
        return Err(Error::invalid(
            "seg_head",
            format!("need at least 2 classes, got {classes}"),
        ));
    }
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
        return Err(Error::invalid(
            "seg_head",
            format!("output {h}×{w} is not divisible by 4"),
        ));
    }
    let resized = fused
        .iter()
        .map(|&f| nn::bilinear_resize(&mut s.tape, f, h / 4, w / 4))
        .collect::<Result<Vec<_>>>()?;
    let cat = if resized.len() == 1 {
        resized[0]
    } else {
        s.tape.concat(&resized, 1)?
    };
    let logits = head.forward(s, cat)?;
    nn::bilinear_resize(&mut s.tape, logits, h, w)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub lateral: Vec<Conv2d>,
    pub lbfr: Vec<Lbfr>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        b.scoped("decoder", |b| {
            let mut lateral = Vec::with_capacity(cfg.k);
            let mut lbfr = Vec::with_capacity(cfg.k);
            for i in 0..cfg.k {
                lateral.push(b.conv2d(
                    &format!("lateral{}", i + 1),
                    cfg.stage_width(i),
                    cfg.c_d,
                    (1, 1),
                    ConvGeometry::default(),
                )?);
                lbfr.push(Lbfr::build(b, &format!("lbfr{}", i + 1), cfg.c_d)?);
            }
            let head = b.conv2d(
                "head",
                cfg.k * cfg.c_d,
                cfg.classes,
                (3, 3),
                ConvGeometry::same((3, 3), (1, 1)),
            )?;
            Ok(Self { lateral, lbfr, head })
        })
    }

    /// Lateral projection and recalibration of every level.
    pub fn recalibrate(&self, s: &mut Session<'_>, pyramid: &EncoderOutput) -> Result<Vec<Var>> {
        if pyramid.pyramid.len() != self.lateral.len() {
            return Err(Error::invalid(
                "decoder",
                format!(
                    "{} pyramid levels for a {}-level decoder",
                    pyramid.pyramid.len(),
                    self.lateral.len()
                ),
            ));
        }
        pyramid
            .pyramid
            .iter()
            .zip(self.lateral.iter().zip(&self.lbfr))
            .map(|(&f, (lat, lb))| {
                let p = lat.forward(s, f)?;
                lb.forward(s, p)
            })
            .collect()
    }

    /// Logits `(N, K, H, W)`.
    pub fn forward(&self, s: &mut Session<'_>, pyramid: &EncoderOutput, h: usize, w: usize) -> Result<Var> {
        let rec = self.recalibrate(s, pyramid)?;
        let fused = pyramid_fuse(&mut s.tape, &rec)?;
        seg_head(s, &fused, &self.head, h, w)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.lateral.iter().map(|l| l.param_count(store)).sum::<usize>()
            + self.lbfr.iter().map(|l| l.param_count(store)).sum::<usize>()
            + self.head.param_count(store)
    }
}
