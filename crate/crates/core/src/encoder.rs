//! Hierarchical windowed-attention encoder.
//!
//! Each stage partitions its map into non-overlapping `M×M` windows and runs
//! `2n_i` blocks. A block computes
//!
//! ```text
//! Xᴵ  = LN(F)
//! B_r = Sigmoid(Conv3×3(Xᴵ as a d×M×M grid))          one M²×M² map per head
//! H_r = Softmax(Q_r K_rᵀ / sqrt(d/N_h) + B_r) · V_r
//! Fᴹ  = ConCat_r(H_r) + Xᴵ
//! Fˢ  = MLP(LN(Fᴹ)) + Fᴹ
//! ```
//!
//! The bias convolution emits `N_h·M²` channels at every query position;
//! channel `r·M² + k` is head `r`'s bias towards key `k`. Stages after the
//! first open with a 3×3 stride-2 convolution (`c → 2c`) and a layer norm.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv2d, LayerNorm, Linear, LINEAR_INIT_STD};
use crate::nn::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Var;

pub const MLP_RATIO: usize = 4;

/// Probe tag under which attention matrices are recorded.
pub const ATTENTION_PROBE: &str = "attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    /// Number of blocks (`2n_i`).
    pub depth: usize,
    pub heads: usize,
    /// Configured window side `M`.
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub bias_conv: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub window: usize,
    pub dim: usize,
}

impl Block {
    pub fn build(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(
                "block",
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        b.scoped(name, |b| {
            Ok(Self {
                norm1: b.layer_norm("norm1", dim)?,
                norm2: b.layer_norm("norm2", dim)?,
                w_q: b.trunc_normal("w_q", &[dim, dim], LINEAR_INIT_STD)?,
                w_k: b.trunc_normal("w_k", &[dim, dim], LINEAR_INIT_STD)?,
                w_v: b.trunc_normal("w_v", &[dim, dim], LINEAR_INIT_STD)?,
                bias_conv: b.conv2d(
                    "bias_conv",
                    dim,
                    heads * window * window,
                    (3, 3),
                    ConvGeometry::same((3, 3), (1, 1)),
                )?,
                fc1: b.linear("fc1", dim, MLP_RATIO * dim, true)?,
                fc2: b.linear("fc2", MLP_RATIO * dim, dim, true)?,
                heads,
                window,
                dim,
            })
        })
    }

    /// `(N·H·W/M², M², d)` tokens → same shape.
    pub fn forward(&self, s: &mut Session<'_>, tokens: Var) -> Result<Var> {
        let last = s.tape.shape(tokens).len() - 1;
        let xi = self.norm1.forward(s, tokens, last)?;
        let fm = windowed_mhsa(s, xi, self)?;
        let h = self.norm2.forward(s, fm, last)?;
        let h = self.fc1.forward(s, h)?;
        let h = nn::gelu(&mut s.tape, h)?;
        let h = self.fc2.forward(s, h)?;
        s.tape.add(h, fm)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        [self.w_q, self.w_k, self.w_v]
            .iter()
            .map(|&id| store.value(id).len())
            .sum::<usize>()
            + self.norm1.param_count(store)
            + self.norm2.param_count(store)
            + self.bias_conv.param_count(store)
            + self.fc1.param_count(store)
            + self.fc2.param_count(store)
    }
}

fn window_side(tokens: usize) -> Result<usize> {
    let m = (tokens as f64).sqrt().round() as usize;
    if m * m != tokens {
        return Err(Error::invalid(
            "relative_position_bias",
            format!("{tokens} tokens per window is not a perfect square"),
        ));
    }
    Ok(m)
}

/// Per-head `M²×M²` bias maps in `(0, 1)` for windowed tokens
/// `(windows, M², d)`; result is `(windows, N_h, M², M²)` indexed
/// `[window][head][query][key]`.
///
/// When the effective window `M_e` is smaller than the configured `M`
/// (small deep stages), key `(ky, kx)` reads channel `ky·M + kx`.
pub fn relative_position_bias(s: &mut Session<'_>, xw: Var, block: &Block) -> Result<Var> {
    let shape = s.tape.shape(xw).to_vec();
    if shape.len() != 3 || shape[2] != block.dim {
        return Err(Error::shape("relative_position_bias", &shape, &[0, 0, block.dim]));
    }
    let (nw, t, d) = (shape[0], shape[1], shape[2]);
    let me = window_side(t)?;
    if me > block.window {
        return Err(Error::invalid(
            "relative_position_bias",
            format!("window side {me} exceeds configured {}", block.window),
        ));
    }
    let grid = s.tape.transpose(xw, 1, 2)?;
    let grid = s.tape.reshape(grid, &[nw, d, me, me])?;
    let conv = block.bias_conv.forward(s, grid)?;
    let (heads, m) = (block.heads, block.window);
    let channels = heads * m * m;
    let mut index = Vec::with_capacity(nw * heads * t * t);
    for w in 0..nw {
        for r in 0..heads {
            for q in 0..t {
                for k in 0..t {
                    let chan = r * m * m + (k / me) * m + k % me;
                    index.push((w * channels + chan) * t + q);
                }
            }
        }
    }
    let maps = s.tape.gather(conv, &[nw, heads, t, t], index)?;
    nn::sigmoid(&mut s.tape, maps)
}

/// `(windows, T, d)` → `(windows·heads, T, d/heads)`.
fn split_heads(s: &mut Session<'_>, x: Var, heads: usize) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    let (nw, t, d) = (sh[0], sh[1], sh[2]);
    let x = s.tape.reshape(x, &[nw, t, heads, d / heads])?;
    let x = s.tape.permute(x, &[0, 2, 1, 3])?;
    s.tape.reshape(x, &[nw * heads, t, d / heads])
}

fn merge_heads(s: &mut Session<'_>, x: Var, nw: usize, heads: usize) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    let (t, dh) = (sh[1], sh[2]);
    let x = s.tape.reshape(x, &[nw, heads, t, dh])?;
    let x = s.tape.permute(x, &[0, 2, 1, 3])?;
    s.tape.reshape(x, &[nw, t, heads * dh])
}

/// Multi-head attention within each window on already-normalized tokens
/// `Xᴵ`, with the residual added back onto `Xᴵ`.
pub fn windowed_mhsa(s: &mut Session<'_>, xi: Var, block: &Block) -> Result<Var> {
    let shape = s.tape.shape(xi).to_vec();
    if shape.len() != 3 || shape[2] != block.dim {
        return Err(Error::shape("windowed_mhsa", &shape, &[0, 0, block.dim]));
    }
    let (nw, t, d) = (shape[0], shape[1], shape[2]);
    let heads = block.heads;
    if d % heads != 0 {
        return Err(Error::invalid(
            "windowed_mhsa",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let bias = relative_position_bias(s, xi, block)?;
    let bias = s.tape.reshape(bias, &[nw * heads, t, t])?;

    let (wq, wk, wv) = (s.param(block.w_q), s.param(block.w_k), s.param(block.w_v));
    let q = s.tape.matmul(xi, wq)?;
    let k = s.tape.matmul(xi, wk)?;
    let v = s.tape.matmul(xi, wv)?;
    let (q, k, v) = (
        split_heads(s, q, heads)?,
        split_heads(s, k, heads)?,
        split_heads(s, v, heads)?,
    );
    let logits = s.tape.matmul_nt(q, k)?;
    let logits = s.tape.scale(logits, 1.0 / ((d / heads) as f64).sqrt())?;
    let logits = s.tape.add(logits, bias)?;
    let attn = nn::softmax(&mut s.tape, logits, 2)?;
    s.probe(ATTENTION_PROBE, attn);
    let out = s.tape.matmul(attn, v)?;
    let out = merge_heads(s, out, nw, heads)?;
    s.tape.add(out, xi)
}

/// Stride-2 3×3 convolution (`c → 2c`) followed by channel layer norm.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn build(b: &mut Builder<'_>, c: usize) -> Result<Self> {
        b.scoped("downsample", |b| {
            Ok(Self {
                conv: b.conv2d("conv", c, 2 * c, (3, 3), ConvGeometry::strided(2, 1))?,
                norm: b.layer_norm("norm", 2 * c)?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::invalid(
                "downsample",
                format!("needs even spatial extents, got {shape:?}"),
            ));
        }
        let y = self.conv.forward(s, x)?;
        self.norm.forward(s, y, 1)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.conv.param_count(store) + self.norm.param_count(store)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub config: StageConfig,
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

/// Encoder pyramid `F^E_1 … F^E_k`; level `i` (1-based) is
/// `(N, 2^{i−1}·C^I, H/2^{i+1}, W/2^{i+1})`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub pyramid: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn stage_configs(cfg: &ModelConfig) -> Vec<StageConfig> {
        cfg.depths
            .iter()
            .zip(&cfg.heads)
            .map(|(&depth, &heads)| StageConfig {
                depth,
                heads,
                window: cfg.window,
            })
            .collect()
    }

    pub fn build(b: &mut Builder<'_>, c_i: usize, stages: &[StageConfig]) -> Result<Self> {
        b.scoped("encoder", |b| {
            let mut out = Vec::with_capacity(stages.len());
            for (i, sc) in stages.iter().enumerate() {
                if sc.depth == 0 || sc.depth % 2 != 0 {
                    return Err(Error::invalid(
                        "encoder",
                        format!("stage {} depth {} is not even", i + 1, sc.depth),
                    ));
                }
                let dim = c_i << i;
                let stage = b.scoped(&format!("stage{}", i + 1), |b| {
                    let downsample = if i == 0 {
                        None
                    } else {
                        Some(Downsample::build(b, dim / 2)?)
                    };
                    let blocks = (0..sc.depth)
                        .map(|j| Block::build(b, &format!("block{}", j + 1), dim, sc.heads, sc.window))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Stage {
                        config: *sc,
                        downsample,
                        blocks,
                    })
                })?;
                out.push(stage);
            }
            Ok(Self { stages: out })
        })
    }

    /// Runs every stage on the stem output `(N, C^I, H/4, W/4)`.
    pub fn forward(&self, s: &mut Session<'_>, features: Var) -> Result<EncoderOutput> {
        let shape = s.tape.shape(features).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(
                "encoder",
                format!("expected NCHW features, got {shape:?}"),
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let levels = self.stages.len();
        let unit = 1 << (levels - 1);
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::invalid(
                "encoder",
                format!("{h}×{w} features cannot be halved {} times", levels - 1),
            ));
        }
        let mut x = features;
        let mut pyramid = Vec::with_capacity(levels);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(s, x)?;
            }
            let (sh, sw) = (h >> i, w >> i);
            let m = stage.config.window.min(sh).min(sw);
            if sh % m != 0 || sw % m != 0 {
                return Err(Error::invalid(
                    "encoder",
                    format!("stage {}: {sh}×{sw} map not divisible into {m}×{m} windows", i + 1),
                ));
            }
            let mut tokens = nn::window_partition(&mut s.tape, x, m)?;
            for block in &stage.blocks {
                tokens = block.forward(s, tokens)?;
            }
            x = nn::window_merge(&mut s.tape, tokens, n, sh, sw)?;
            pyramid.push(x);
        }
        Ok(EncoderOutput { pyramid })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.stages
            .iter()
            .map(|st| {
                st.downsample.as_ref().map_or(0, |d| d.param_count(store))
                    + st.blocks.iter().map(|b| b.param_count(store)).sum::<usize>()
            })
            .sum()
    }
}
