use super::conv::Conv3dGeometry;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved forward context plus the parents each backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv3dGeometry,
    },
    DepthwiseConv1d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Gelu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Sum {
        input: Var,
    },
    ScalarLoss {
        input: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv3d {
                input,
                weight,
                bias,
                ..
            }
            | Linear {
                input,
                weight,
                bias,
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias.iter().copied());
                p
            }
            DepthwiseConv1d {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Add { a, b } | Mul { a, b } | BatchMatmul { a, b, .. } => vec![*a, *b],
            Concat { inputs, .. } => inputs.clone(),
            Gelu { input }
            | MulScalar { input, .. }
            | AddScalar { input }
            | MeanAxis { input, .. }
            | Softmax { input, .. }
            | Permute { input, .. }
            | Reshape { input }
            | Sum { input }
            | ScalarLoss { input, .. } => vec![*input],
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in execution order, so every parent index precedes its
/// child and a single reverse sweep visits each node once.
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Every recorded tensor, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.tensor)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub(crate) fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op) -> Result<Var> {
        let requires_grad = op.parents().iter().any(|p| self.tracks(*p));
        let tensor = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, populating the gradient slot of every
    /// node that requires one. Earlier gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].tensor;
        if root.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let tracked = root.requires_grad;
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !tracked {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].tensor.take_grad() else {
                continue;
            };
            let contributions = self.backward_node(i, &grad)?;
            self.nodes[i].tensor.grad = Some(grad);
            for (parent, g) in contributions {
                debug_assert!(parent.0 < i);
                if self.tracks(parent) {
                    self.nodes[parent.0].tensor.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
