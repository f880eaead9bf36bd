use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// Implementations read the forward inputs and output through [`GradCtx`]
/// and accumulate into the input gradients they are handed.
pub trait Backward: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &mut GradCtx<'_>);
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// View handed to a [`Backward`] rule while the tape is being unwound.
pub struct GradCtx<'a> {
    nodes: &'a [Node],
    inputs: &'a [Var],
    output: &'a Tensor,
    grad_out: &'a [f64],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradCtx<'_> {
    pub fn input(&self, i: usize) -> &Tensor {
        &self.nodes[self.inputs[i].0].value
    }

    pub fn output(&self) -> &Tensor {
        self.output
    }

    pub fn grad_out(&self) -> &[f64] {
        self.grad_out
    }

    pub fn wants(&self, i: usize) -> bool {
        self.nodes[self.inputs[i].0].requires_grad
    }

    /// Gradient buffer of input `i`, or `None` when that input does not
    /// require a gradient.
    pub fn grad_mut(&mut self, i: usize) -> Option<&mut [f64]> {
        let node = self.inputs[i].0;
        if !self.nodes[node].requires_grad {
            return None;
        }
        let len = self.nodes[node].value.len();
        Some(self.grads[node].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so recording order is a valid
/// topological order and [`Tape::backward`] walks it in reverse. Leaf
/// gradients accumulate across `backward` calls until [`Tape::zero_grad`].
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    guard: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            guard: false,
        }
    }

    /// Tape that rejects any op whose output contains NaN or infinity.
    pub fn with_guard() -> Self {
        Self {
            guard: true,
            ..Self::new()
        }
    }

    pub fn set_guard(&mut self, guard: bool) {
        self.guard = guard;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for leaves not reached by any
    /// backward pass or not requiring gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0)?.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("grad length matches value"),
            None => Tensor::zeros(&shape).expect("valid shape"),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Appends an operation result. The backward rule is dropped when no
    /// input requires a gradient.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Result<Var> {
        if self.guard && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(value, inputs.to_vec(), op, requires_grad))
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Option<Box<dyn Backward>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {root_shape:?}"),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for n in (0..=root.0).rev() {
            let Some(grad_out) = grads[n].take() else {
                continue;
            };
            let node = &self.nodes[n];
            match &node.op {
                None => {
                    if node.requires_grad {
                        match &mut self.leaf_grads[n] {
                            Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += g),
                            slot @ None => *slot = Some(grad_out),
                        }
                    }
                }
                Some(op) => {
                    let mut ctx = GradCtx {
                        nodes: &self.nodes,
                        inputs: &node.inputs,
                        output: &node.value,
                        grad_out: &grad_out,
                        grads: &mut grads,
                    };
                    op.backward(&mut ctx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn leaf_without_grad_stays_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]).unwrap(), true);
        let c = tape.constant(Tensor::ones(&[3]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        let unused = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_tensor(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn guard_rejects_non_finite() {
        let mut tape = Tape::with_guard();
        let x = tape.leaf(Tensor::new(&[1], vec![f64::MAX]).unwrap(), true);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
