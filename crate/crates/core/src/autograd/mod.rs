//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Var`] is an immutable node holding a value and, when any input
//! requires a gradient, the closure that maps the output gradient to input
//! gradients. Graphs are built per forward pass and are thread-local
//! (`Rc`); learnable state lives in [`crate::nn::ParamStore`] as plain
//! tensors, so models themselves are `Send + Sync`.

mod attention;
mod basic;
mod conv;
mod corr;
mod linalg;
mod norm;
mod scan;
mod spatial;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

pub use attention::{window_attention, window_attention_probs, WindowAttentionLayout};
pub use basic::{
    add, add_scalar, concat0, div, exp, gather, gelu, GATHER_NONE, leaky_relu, mean, mul, neg, reshape, scale,
    sigmoid, silu, slice0, slice_cols, softplus, sqrt, square, sub, sum, sum_channels, transpose2d,
};
pub use conv::{conv3d, conv_transpose3d_k2s2, depthwise_causal_conv1d};
pub use corr::{correlation_global, correlation_local};
pub use linalg::{gemm_flops, linear, matmul, reset_gemm_flops};
pub use norm::{instance_norm, layer_norm};
pub use scan::{selective_scan, selective_scan_reference, ScanInputs};
pub use spatial::{box_sum, forward_diff, max_pool2, resample_trilinear, warp};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct GradFn {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            grad_fn: None,
        }))
    }

    /// Build an op output. `backward` receives the output gradient and returns
    /// one optional gradient per parent, in order. It is dropped when no parent
    /// requires a gradient.
    pub(crate) fn from_op<F>(value: Tensor, parents: &[&Var], backward: F) -> Self
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Box::new(backward),
        });
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Backpropagate from this node with a seed of ones.
    pub fn backward(&self) -> Gradients {
        self.backward_with(Tensor::ones(self.shape().to_vec()))
    }

    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }
        let order = topo_order(self);
        grads.insert(self.id(), seed);
        // Reverse topological order: every consumer is processed before its inputs.
        for node in order.iter().rev() {
            let Some(gf) = &node.0.grad_fn else { continue };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let parent_grads = (gf.backward)(&g);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Gradients { map: grads }
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for p in gf.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of leaves after a backward pass.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id())
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.map.remove(&v.id())
    }
}
