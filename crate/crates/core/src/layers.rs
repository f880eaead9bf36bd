//! Parameterised layers: each holds [`ParamId`]s into a [`ParamStore`] and
//! records its forward pass on a [`Session`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore, Session, StatsIds};
use crate::tensor::{Tensor, Var};

/// Standard deviation of token-wise linear weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// Registers freshly initialised parameters under a name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(segment);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, value, trainable)
    }

    /// Uniform `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))?;
        self.tensor(leaf, t, true)
    }

    /// Normal with standard deviation `std`, resampled outside `±2·std`.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid("trunc_normal", e.to_string()))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })?;
        self.tensor(leaf, t, true)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(leaf, Tensor::full(shape, value)?, true)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
    ) -> Result<Conv2d> {
        self.scoped(name, |b| {
            let fan_in = c_in * kernel.0 * kernel.1;
            Ok(Conv2d {
                weight: b.fan_in_uniform("weight", &[c_out, c_in, kernel.0, kernel.1], fan_in)?,
                bias: Some(b.constant("bias", &[c_out], 0.0)?),
                geom,
            })
        })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        self.scoped(name, |b| {
            Ok(Linear {
                weight: b.trunc_normal("weight", &[d_in, d_out], LINEAR_INIT_STD)?,
                bias: if bias {
                    Some(b.constant("bias", &[d_out], 0.0)?)
                } else {
                    None
                },
            })
        })
    }

    pub fn layer_norm(&mut self, name: &str, features: usize) -> Result<LayerNorm> {
        self.scoped(name, |b| {
            Ok(LayerNorm {
                gamma: b.constant("weight", &[features], 1.0)?,
                beta: b.constant("bias", &[features], 0.0)?,
            })
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm2d> {
        self.scoped(name, |b| {
            Ok(BatchNorm2d {
                gamma: b.constant("weight", &[channels], 1.0)?,
                beta: b.constant("bias", &[channels], 0.0)?,
                stats: StatsIds {
                    mean: b.tensor("running_mean", Tensor::zeros(&[channels])?, false)?,
                    var: b.tensor("running_var", Tensor::ones(&[channels])?, false)?,
                    batches: b.tensor("num_batches", Tensor::zeros(&[1])?, false)?,
                },
            })
        })
    }

    /// `1×L` then `L×1` pair, both `C_in → C_out` then `C_out → C_out`.
    pub fn separable(&mut self, name: &str, c_in: usize, c_out: usize, length: usize) -> Result<SeparablePair> {
        self.scoped(name, |b| {
            Ok(SeparablePair {
                horizontal: b.conv2d("k_u", c_in, c_out, (1, length), ConvGeometry::same((1, length), (1, 1)))?,
                vertical: b.conv2d(
                    "k_v",
                    c_out,
                    c_out,
                    (length, 1),
                    ConvGeometry::same((length, 1), (1, 1)),
                )?,
            })
        })
    }
}

fn count(store: &ParamStore, ids: impl IntoIterator<Item = ParamId>) -> usize {
    ids.into_iter().map(|id| store.value(id).len()).sum()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        nn::conv2d(&mut s.tape, x, w, b, self.geom)
    }

    /// `(C_out, C_in, k_h, k_w)`.
    pub fn weight_shape(&self, store: &ParamStore) -> [usize; 4] {
        let s = store.value(self.weight).shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        count(store, std::iter::once(self.weight).chain(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        nn::linear(&mut s.tape, x, w, b)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        count(store, std::iter::once(self.weight).chain(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    /// Normalizes over `axis` (1 for NCHW maps, last for tokens).
    pub fn forward(&self, s: &mut Session<'_>, x: Var, axis: usize) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        nn::layer_norm(&mut s.tape, x, g, b, axis, nn::LN_EPS)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        count(store, [self.gamma, self.beta])
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsIds,
}

impl BatchNorm2d {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let running = s.running_stats(self.stats);
        let mode = s.mode();
        let (y, updated) = nn::batch_norm(&mut s.tape, x, g, b, &running, mode)?;
        if let Some(u) = updated {
            s.record_stats(self.stats, u);
        }
        Ok(y)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        count(store, [self.gamma, self.beta])
    }
}

/// Spatially separable convolution pair: horizontal `k_u` then vertical
/// `k_v`.
#[derive(Debug, Clone)]
pub struct SeparablePair {
    pub horizontal: Conv2d,
    pub vertical: Conv2d,
}

impl SeparablePair {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let hw = s.param(self.horizontal.weight);
        let hb = self.horizontal.bias.map(|b| s.param(b));
        let vw = s.param(self.vertical.weight);
        let vb = self.vertical.bias.map(|b| s.param(b));
        nn::separable_conv(&mut s.tape, x, (hw, hb), (vw, vb))
    }

    /// Weight scalars excluding biases: `L·C_in·C_out + L·C_out²`.
    pub fn weight_count(&self, store: &ParamStore) -> usize {
        store.value(self.horizontal.weight).len() + store.value(self.vertical.weight).len()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.horizontal.param_count(store) + self.vertical.param_count(store)
    }
}
