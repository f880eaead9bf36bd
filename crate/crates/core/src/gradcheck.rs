//! Central finite-difference verification of every differentiable op and of
//! the assembled network.
//!
//! Each check projects the op's output onto fixed random weights to get a
//! scalar, then compares the tape gradient of every input element with
//! `(f(x + ε) − f(x − ε)) / 2ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{Decoder, Lbfr};
use crate::encoder::{relative_position_bias, windowed_mhsa, Block, Downsample, Encoder, StageConfig};
use crate::error::Result;
use crate::layers::Builder;
use crate::model::OdFormer;
use crate::msca::Msca;
use crate::nn::{self, ConvGeometry, Mode, RunningStats};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::cross_entropy;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Bound for ops that are linear in each input separately.
pub const LINEAR_TOL: f64 = 1e-6;
/// Gradient magnitude below which errors are measured absolutely.
pub const ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub eps: f64,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            seed: 0,
        }
    }
}

/// Worst discrepancy found for one op.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub linear: bool,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Analytic and numeric values at the worst element.
    pub worst: (f64, f64),
    pub checked: usize,
}

impl GradReport {
    pub fn tolerance(&self, tol: f64) -> f64 {
        if self.linear {
            tol.min(LINEAR_TOL)
        } else {
            tol
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < self.tolerance(tol)
    }
}

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

fn dot(w: &[f64], y: &Tensor) -> f64 {
    w.iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

struct Accumulator {
    report: GradReport,
}

impl Accumulator {
    fn new(name: &str, linear: bool) -> Self {
        Self {
            report: GradReport {
                name: name.to_string(),
                linear,
                max_rel: 0.0,
                max_abs: 0.0,
                worst: (0.0, 0.0),
                checked: 0,
            },
        }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        let r = &mut self.report;
        let rel = relative_error(analytic, numeric);
        // NaN compares false, so record it explicitly
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if rel > r.max_rel || r.checked == 0 {
            r.max_rel = rel;
            r.worst = (analytic, numeric);
        }
        r.max_abs = r.max_abs.max((analytic - numeric).abs());
        r.checked += 1;
    }
}

fn weights(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks a pure tape function of `inputs` with respect to every input.
pub fn check_op(
    name: &str,
    linear: bool,
    inputs: &[Tensor],
    opts: Options,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let run = |vals: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).clone())
    };
    let y0 = run(inputs)?;
    let w = weights(y0.len(), opts.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let y = f(&mut tape, &vars)?;
    let wv = tape.constant(Tensor::new(tape.shape(y), w.clone())?);
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let mut acc = Accumulator::new(name, linear);
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let grad = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &g) in grad.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = dot(&w, &run(&work)?);
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = dot(&w, &run(&work)?);
            work[i].data_mut()[j] = orig;
            acc.push(g, (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(acc.report)
}

/// Checks a session-level function of one input with respect to the input
/// and every trainable entry of `store`.
pub fn check_module(
    name: &str,
    store: &ParamStore,
    input: &Tensor,
    mode: Mode,
    opts: Options,
    f: impl Fn(&mut Session<'_>, Var) -> Result<Var>,
) -> Result<GradReport> {
    let run = |store: &ParamStore, x: &Tensor| -> Result<Tensor> {
        let mut s = Session::new(store, mode);
        let xv = s.input(x.clone());
        let y = f(&mut s, xv)?;
        Ok(s.tape.value(y).clone())
    };
    let y0 = run(store, input)?;
    let w = weights(y0.len(), opts.seed);

    let mut s = Session::new(store, mode);
    let xv = s.tape.leaf(input.clone(), true);
    let y = f(&mut s, xv)?;
    let wv = s.tape.constant(Tensor::new(s.tape.shape(y), w.clone())?);
    let prod = s.tape.mul(y, wv)?;
    let loss = s.tape.sum(prod)?;
    s.backward(loss)?;
    let input_grad = s.tape.grad_tensor(xv);
    let out = s.finish();
    let grad_of = |id: ParamId| {
        out.grads
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.value(id).len()])
    };

    let mut acc = Accumulator::new(name, false);
    let mut x = input.clone();
    for (j, &g) in input_grad.data().iter().enumerate() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + opts.eps;
        let plus = dot(&w, &run(store, &x)?);
        x.data_mut()[j] = orig - opts.eps;
        let minus = dot(&w, &run(store, &x)?);
        x.data_mut()[j] = orig;
        acc.push(g, (plus - minus) / (2.0 * opts.eps));
    }
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for (j, &g) in grad_of(id).iter().enumerate() {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = dot(&w, &run(&work, input)?);
            work.value_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = dot(&w, &run(&work, input)?);
            work.value_mut(id).data_mut()[j] = orig;
            acc.push(g, (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(acc.report)
}

/// Moves every trainable value off its structured initialisation (zero
/// biases, unit gains) so no gradient path is trivially masked.
pub fn jitter(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x717);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

/// Random values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .expect("valid shape")
}

fn tape_ops(opts: Options, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    let a = r(&[2, 3, 4]);
    let b = r(&[2, 3, 4]);
    let b1 = r(&[1, 3, 4]);
    let m1 = r(&[2, 3, 4]);
    let m2 = r(&[2, 4, 5]);
    let shared = r(&[4, 5]);
    let nt = r(&[2, 5, 4]);
    let x4 = r(&[2, 3, 4, 4]);
    let y4 = r(&[2, 2, 4, 4]);
    let bias = r(&[3]);
    let tok = r(&[2, 3, 4]);
    let w_lin = r(&[4, 6]);
    let b_lin = r(&[6]);

    let mut out = vec![
        check_op("add", true, &[a.clone(), b.clone()], opts, |t, v| t.add(v[0], v[1]))?,
        check_op("add_broadcast", true, &[a.clone(), b1], opts, |t, v| t.add(v[0], v[1]))?,
        check_op("sub", true, &[a.clone(), b.clone()], opts, |t, v| t.sub(v[0], v[1]))?,
        check_op("mul", true, &[a.clone(), b.clone()], opts, |t, v| t.mul(v[0], v[1]))?,
        check_op("scale", true, std::slice::from_ref(&a), opts, |t, v| {
            t.scale(v[0], -1.7)
        })?,
        check_op("sum", true, std::slice::from_ref(&a), opts, |t, v| t.sum(v[0]))?,
        check_op("mean", true, std::slice::from_ref(&a), opts, |t, v| t.mean(v[0]))?,
        check_op("matmul", true, &[m1.clone(), m2], opts, |t, v| t.matmul(v[0], v[1]))?,
        check_op("matmul_shared", true, &[m1.clone(), shared], opts, |t, v| {
            t.matmul(v[0], v[1])
        })?,
        check_op("matmul_nt", true, &[m1, nt], opts, |t, v| t.matmul_nt(v[0], v[1]))?,
        check_op("reshape", true, std::slice::from_ref(&a), opts, |t, v| {
            t.reshape(v[0], &[6, 4])
        })?,
        check_op("permute", true, std::slice::from_ref(&x4), opts, |t, v| {
            t.permute(v[0], &[0, 2, 3, 1])
        })?,
        check_op("transpose", true, std::slice::from_ref(&a), opts, |t, v| {
            t.transpose(v[0], 1, 2)
        })?,
        check_op("slice", true, std::slice::from_ref(&a), opts, |t, v| {
            t.slice(v[0], 2, 1, 2)
        })?,
        check_op("concat", true, &[x4.clone(), y4], opts, |t, v| {
            t.concat(&[v[0], v[1]], 1)
        })?,
        check_op("channel_bias", true, &[x4.clone(), bias], opts, |t, v| {
            nn::add_channel_bias(t, v[0], v[1], 1)
        })?,
        check_op("linear", true, &[tok.clone(), w_lin, b_lin], opts, |t, v| {
            nn::linear(t, v[0], v[1], Some(v[2]))
        })?,
        check_op("bilinear_resize", true, std::slice::from_ref(&x4), opts, |t, v| {
            nn::bilinear_resize(t, v[0], 7, 3)
        })?,
        check_op("window_partition", true, std::slice::from_ref(&x4), opts, |t, v| {
            nn::window_partition(t, v[0], 2)
        })?,
        check_op("window_merge", true, &[r(&[8, 4, 3])], opts, |t, v| {
            nn::window_merge(t, v[0], 2, 4, 4)
        })?,
    ];

    let img = r(&[1, 2, 6, 6]);
    let cw = r(&[3, 2, 3, 3]);
    let cb = r(&[3]);
    out.push(check_op(
        "conv2d",
        true,
        &[img.clone(), cw.clone(), cb.clone()],
        opts,
        |t, v| nn::conv2d(t, v[0], v[1], Some(v[2]), ConvGeometry::same((3, 3), (1, 1))),
    )?);
    out.push(check_op(
        "conv2d_dilated",
        true,
        &[img.clone(), cw.clone(), cb.clone()],
        opts,
        |t, v| nn::conv2d(t, v[0], v[1], Some(v[2]), ConvGeometry::same((3, 3), (2, 2))),
    )?);
    out.push(check_op(
        "conv2d_strided",
        true,
        &[img.clone(), cw, cb],
        opts,
        |t, v| nn::conv2d(t, v[0], v[1], Some(v[2]), ConvGeometry::strided(2, 1)),
    )?);
    let hu = r(&[2, 2, 1, 7]);
    let hb = r(&[2]);
    let vw = r(&[2, 2, 7, 1]);
    let vb = r(&[2]);
    out.push(check_op(
        "separable_conv",
        true,
        &[img, hu, hb, vw, vb],
        opts,
        |t, v| nn::separable_conv(t, v[0], (v[1], Some(v[2])), (v[3], Some(v[4]))),
    )?);

    let kinked = away_from_zero(rng, &[2, 3, 4], 0.05);
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    out.push(check_op("relu", false, &[kinked], opts, |t, v| nn::relu(t, v[0]))?);
    let sm = r(&[2, 3, 4]).data().iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let sm = Tensor::new(&[2, 3, 4], sm)?;
    out.push(check_op("sigmoid", false, std::slice::from_ref(&sm), opts, |t, v| {
        nn::sigmoid(t, v[0])
    })?);
    out.push(check_op("gelu", false, std::slice::from_ref(&sm), opts, |t, v| {
        nn::gelu(t, v[0])
    })?);
    out.push(check_op(
        "softmax_last",
        false,
        std::slice::from_ref(&sm),
        opts,
        |t, v| nn::softmax(t, v[0], 2),
    )?);
    out.push(check_op("softmax_mid", false, &[sm], opts, |t, v| {
        nn::softmax(t, v[0], 1)
    })?);

    let g = random(rng, &[3], 0.5, 1.5);
    let be = random(rng, &[3], -0.5, 0.5);
    let g4 = random(rng, &[4], 0.5, 1.5);
    let be4 = random(rng, &[4], -0.5, 0.5);
    out.push(check_op(
        "layer_norm_channels",
        false,
        &[x4.clone(), g.clone(), be.clone()],
        opts,
        |t, v| nn::layer_norm(t, v[0], v[1], v[2], 1, nn::LN_EPS),
    )?);
    out.push(check_op("layer_norm_tokens", false, &[tok, g4, be4], opts, |t, v| {
        nn::layer_norm(t, v[0], v[1], v[2], 2, nn::LN_EPS)
    })?);
    let fresh = RunningStats::new(3);
    out.push(check_op(
        "batch_norm_train",
        false,
        &[x4.clone(), g.clone(), be.clone()],
        opts,
        |t, v| Ok(nn::batch_norm(t, v[0], v[1], v[2], &fresh, Mode::Train)?.0),
    )?);
    let warmed = RunningStats {
        mean: vec![0.1, -0.2, 0.05],
        var: vec![0.8, 1.3, 0.5],
        batches: 3,
    };
    out.push(check_op("batch_norm_eval", false, &[x4, g, be], opts, |t, v| {
        Ok(nn::batch_norm(t, v[0], v[1], v[2], &warmed, Mode::Eval)?.0)
    })?);

    let logits = random(rng, &[1, 2, 2, 2], -2.0, 2.0);
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
    out.push(check_op("cross_entropy", false, &[logits], opts, |t, v| {
        cross_entropy(t, v[0], &targets)
    })?);
    let logits3 = random(rng, &[2, 3, 2, 3], -2.0, 2.0);
    let targets3: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
    out.push(check_op("cross_entropy_k3", false, &[logits3], opts, |t, v| {
        cross_entropy(t, v[0], &targets3)
    })?);
    Ok(out)
}

fn block_store(opts: Options, dim: usize, heads: usize, window: usize) -> Result<(Block, ParamStore)> {
    let mut store = ParamStore::new();
    let block = Block::build(&mut Builder::new(&mut store, opts.seed), "block", dim, heads, window)?;
    jitter(&mut store, opts.seed, 0.1);
    Ok((block, store))
}

/// Attention components: bias path, windowed attention, full block.
fn attention_checks(opts: Options, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let (block, store) = block_store(opts, 4, 2, 2)?;
    let tokens = random(rng, &[3, 4, 4], -1.0, 1.0);
    let mut out = vec![
        check_module("relative_position_bias", &store, &tokens, Mode::Train, opts, |s, x| {
            relative_position_bias(s, x, &block)
        })?,
        check_module("windowed_mhsa", &store, &tokens, Mode::Train, opts, |s, x| {
            windowed_mhsa(s, x, &block)
        })?,
        check_module("block", &store, &tokens, Mode::Train, opts, |s, x| block.forward(s, x))?,
    ];
    // effective window smaller than configured
    let (block3, store3) = block_store(opts, 4, 2, 3)?;
    let small = random(rng, &[2, 4, 4], -1.0, 1.0);
    out.push(check_module(
        "block_reduced_window",
        &store3,
        &small,
        Mode::Train,
        opts,
        |s, x| block3.forward(s, x),
    )?);
    Ok(out)
}

/// Context aggregator with `m` branches on an 8×8 image.
pub fn check_msca(m: usize, opts: Options) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let msca = Msca::build(&mut Builder::new(&mut store, opts.seed), m, 4)?;
    jitter(&mut store, opts.seed, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ m as u64);
    let image = random(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    check_module(&format!("msca_m{m}"), &store, &image, Mode::Train, opts, |s, x| {
        msca.forward(s, x)
    })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        m: 3,
        k: 2,
        depths: vec![2, 2],
        heads: vec![2, 2],
        c_i: 4,
        window: 2,
        c_d: 8,
        classes: 2,
        input_side: 16,
        crop: 16,
        ..ModelConfig::desk()
    }
}

fn module_checks(opts: Options, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let down = Downsample::build(&mut Builder::new(&mut store, opts.seed), 3)?;
    jitter(&mut store, opts.seed, 0.1);
    let x = random(rng, &[1, 3, 4, 4], -1.0, 1.0);
    out.push(check_module("downsample", &store, &x, Mode::Train, opts, |s, x| {
        down.forward(s, x)
    })?);

    let mut store = ParamStore::new();
    let lbfr = Lbfr::build(&mut Builder::new(&mut store, opts.seed), "lbfr", 4)?;
    jitter(&mut store, opts.seed, 0.1);
    let x = random(rng, &[1, 4, 6, 6], -1.0, 1.0);
    out.push(check_module("lbfr", &store, &x, Mode::Train, opts, |s, x| {
        lbfr.forward(s, x)
    })?);

    out.push(check_msca(3, opts)?);

    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let encoder = Encoder::build(
        &mut Builder::new(&mut store, opts.seed),
        cfg.c_i,
        &[
            StageConfig {
                depth: 2,
                heads: 2,
                window: 2,
            },
            StageConfig {
                depth: 2,
                heads: 2,
                window: 2,
            },
        ],
    )?;
    jitter(&mut store, opts.seed, 0.1);
    let x = random(rng, &[1, 4, 8, 8], -1.0, 1.0);
    out.push(check_module("encoder", &store, &x, Mode::Train, opts, |s, x| {
        let pyr = encoder.forward(s, x)?;
        let flat: Vec<Var> = pyr
            .pyramid
            .iter()
            .map(|&p| {
                let n = s.tape.value(p).len();
                s.tape.reshape(p, &[n])
            })
            .collect::<Result<_>>()?;
        s.tape.concat(&flat, 0)
    })?);

    let mut store = ParamStore::new();
    let decoder = Decoder::build(&mut Builder::new(&mut store, opts.seed), &cfg)?;
    jitter(&mut store, opts.seed, 0.1);
    // both levels travel in one input tensor: 4×4×4 then 8×2×2
    let x = random(rng, &[1, 96], -1.0, 1.0);
    out.push(check_module("decoder", &store, &x, Mode::Train, opts, |s, x| {
        let f1 = s.tape.slice(x, 1, 0, 64)?;
        let f1 = s.tape.reshape(f1, &[1, 4, 4, 4])?;
        let f2 = s.tape.slice(x, 1, 64, 32)?;
        let f2 = s.tape.reshape(f2, &[1, 8, 2, 2])?;
        let pyr = crate::encoder::EncoderOutput { pyramid: vec![f1, f2] };
        decoder.forward(s, &pyr, 16, 16)
    })?);

    out.push(check_model(opts)?);
    Ok(out)
}

/// End-to-end network (`k = 2`, `C^I = 4`, `M = 2`) on a 16×16 image.
pub fn check_model(opts: Options) -> Result<GradReport> {
    let cfg = ModelConfig {
        seed: opts.seed,
        ..tiny_config()
    };
    let (model, mut store) = OdFormer::new(cfg)?;
    jitter(&mut store, opts.seed, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xbeef);
    let image = random(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    check_module("model", &store, &image, Mode::Train, opts, |s, x| model.forward(s, x))
}

/// Every op check followed by the module and end-to-end checks.
pub fn run_suite(opts: Options) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = tape_ops(opts, &mut rng)?;
    out.extend(attention_checks(opts, &mut rng)?);
    out.extend(module_checks(opts, &mut rng)?);
    Ok(out)
}

/// One line per report plus a verdict; the worst failing op is named last.
pub fn render(reports: &[GradReport], tol: f64) -> (String, Option<&GradReport>) {
    let mut text = String::new();
    for r in reports {
        text.push_str(&format!(
            "{:<24} {:>10.3e}  (tol {:.0e}, {} elements, worst {:.3e} vs {:.3e}) {}\n",
            r.name,
            r.max_rel,
            r.tolerance(tol),
            r.checked,
            r.worst.0,
            r.worst.1,
            if r.passes(tol) { "ok" } else { "FAIL" }
        ));
    }
    let worst = reports
        .iter()
        .filter(|r| !r.passes(tol))
        .max_by(|a, b| (a.max_rel / a.tolerance(tol)).total_cmp(&(b.max_rel / b.tolerance(tol))));
    (text, worst)
}
