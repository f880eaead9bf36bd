use crate::error::{Error, Result};
use crate::tensor::{split_axis, Backward, GradCtx, Tape, Tensor, Var};

const GELU_C: f64 = 0.7978845608;
const GELU_A: f64 = 0.044715;

#[derive(Clone, Copy)]
enum Kind {
    Relu,
    Sigmoid,
    Gelu,
}

struct Elementwise(Kind);

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Backward for Elementwise {
    fn name(&self) -> &'static str {
        match self.0 {
            Kind::Relu => "relu",
            Kind::Sigmoid => "sigmoid",
            Kind::Gelu => "gelu",
        }
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        let derivative: Vec<f64> = match self.0 {
            Kind::Relu => ctx
                .input(0)
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect(),
            Kind::Sigmoid => ctx.output().data().iter().map(|&y| y * (1.0 - y)).collect(),
            Kind::Gelu => ctx.input(0).data().iter().map(|&x| gelu_grad(x)).collect(),
        };
        if let Some(gx) = ctx.grad_mut(0) {
            for ((a, gi), d) in gx.iter_mut().zip(&g).zip(&derivative) {
                *a += gi * d;
            }
        }
    }
}

fn elementwise(tape: &mut Tape, x: Var, kind: Kind) -> Result<Var> {
    let f: fn(f64) -> f64 = match kind {
        Kind::Relu => |v| v.max(0.0),
        Kind::Sigmoid => sigmoid,
        Kind::Gelu => gelu,
    };
    let xv = tape.value(x);
    let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
    tape.record(out, &[x], Elementwise(kind))
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    elementwise(tape, x, Kind::Relu)
}

pub fn sigmoid_op(tape: &mut Tape, x: Var) -> Result<Var> {
    elementwise(tape, x, Kind::Sigmoid)
}

/// GELU, tanh approximation.
pub fn gelu_op(tape: &mut Tape, x: Var) -> Result<Var> {
    elementwise(tape, x, Kind::Gelu)
}

struct SoftmaxOp {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        let y = ctx.output().data().to_vec();
        let (len, inner) = (self.len, self.inner);
        if let Some(gx) = ctx.grad_mut(0) {
            for o in 0..self.outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
        }
    }
}

/// Max-shifted softmax along `axis`.
pub fn softmax(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op: "softmax",
            axis,
            rank: shape.len(),
        });
    }
    let (outer, len, inner) = split_axis(&shape, axis);
    let xd = tape.value(x).data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (xd[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    let value = Tensor::new(&shape, out)?;
    tape.record(value, &[x], SoftmaxOp { outer, len, inner })
}
