use super::ops::{self, Activation};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward pass is computed by the caller.
///
/// `backward` receives the input values, the recorded output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` for inputs that do not need one).
pub trait CustomOp<S: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs_grad: &[bool],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>>;
}

pub(crate) enum Op<S: Real> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Gather { table: Var, indices: Vec<usize> },
    Reshape { x: Var },
    Narrow { x: Var, offset: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Sum { x: Var },
    Mse { pred: Var, target: Tensor<S> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, cols: Vec<S> },
    Upsample2x { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

impl<S: Real> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Act { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Upsample2x { x } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols { parts } => parts.clone(),
            Op::Add { a, b } => vec![*a, *b],
            Op::Mse { pred, .. } => vec![*pred],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<S: Real> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) needs_grad: bool,
}

/// Records operations in execution order. Nodes are only ever appended, so
/// every input precedes its consumer.
pub struct Tape<S: Real> {
    pub(crate) nodes: Vec<Node<S>>,
    /// Replayed ReLU on/off patterns, one per ReLU in recording order.
    pub(crate) relu_pattern: Option<Vec<Vec<bool>>>,
    pub(crate) relu_seen: usize,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_pattern: None,
            relu_seen: 0,
        }
    }

    /// A tape whose ReLUs use the given on/off patterns instead of the sign
    /// of their inputs. Finite-difference checks use this to stay on the
    /// linear piece the gradient was taken on. Not meant for backward.
    pub fn with_relu_pattern(pattern: Vec<Vec<bool>>) -> Self {
        Self {
            relu_pattern: Some(pattern),
            ..Self::new()
        }
    }

    /// On/off pattern of every ReLU recorded so far.
    pub fn relu_pattern(&self) -> Vec<Vec<bool>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => Some(self.nodes[x.0].value.data().iter().map(|v| *v > S::zero()).collect()),
                _ => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input. Gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient; nothing upstream of it is
    /// differentiated unless another path requires it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<&Tensor<S>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(v.0))
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, leaf_grad: bool) -> Var {
        let needs_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a caller-computed forward value together with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<S>,
        op: Box<dyn CustomOp<S>>,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        super::check_finite(op.name(), output.data())?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            false,
        ))
    }

    /// Gradients of a scalar loss with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let value = self.check(loss)?;
        if value.len() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape(), S::one());
        self.backward_from(vec![(loss, seed)])
    }

    /// Reverse sweep from arbitrary output gradients (vector-Jacobian product).
    ///
    /// Nodes are visited in exact reverse recording order and contributions
    /// are accumulated in that order, so results are bit-reproducible.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor<S>)>) -> Result<Gradients<S>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            let value = self.check(v)?;
            if value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    expected: value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads[v.0], g)?;
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = ops::backward(self, node, &g)?;
            for (v, dg) in contributions {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], dg)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Real>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient for `v`, or zeros of `shape` if nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}
