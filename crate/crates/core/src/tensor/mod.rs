//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op builds a node holding its inputs and a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into the leaves created with
//! [`Tensor::param`]. Shapes must match exactly; the only broadcast is the
//! bias add in [`Tensor::linear`], [`Tensor::add_row_bias`] and
//! [`Tensor::conv2d`].

mod conv;
mod ops;

pub use ops::cosine_similarity;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Dimension { op, detail: detail.into() }
}

pub(crate) fn contract_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Contract { op, detail: detail.into() }
}

/// Maps the upstream gradient to one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    tracked: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.name);
        }
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor. Extents must be positive and cover `data` exactly.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that collects gradients on backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(dim_err("new", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(dim_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor(Arc::new(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            tracked: requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new(vec![v], &[1]).expect("scalar shape is valid")
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Self::new(data, &[n])
    }

    /// Result of an op. Shapes are produced by the op itself so they are
    /// trusted here.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        name: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{name} produced inconsistent shape");
        let tracked = parents.iter().any(|p| p.0.tracked);
        let grad_fn = tracked.then(|| GradFn { name, parents, backward });
        Tensor(Arc::new(Node {
            data,
            shape,
            requires_grad: false,
            tracked,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when gradients can flow from this tensor back to some leaf.
    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(contract_err("item", format!("expected one element, shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), &self.0.shape).expect("existing shape is valid")
    }

    /// Same values as a fresh leaf with the requested gradient flag.
    pub fn to_leaf(&self, requires_grad: bool) -> Tensor {
        Self::leaf(self.0.data.clone(), &self.0.shape, requires_grad).expect("existing shape is valid")
    }

    fn key(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar. Gradients are added to whatever the
    /// leaves already hold; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(contract_err("backward", format!("loss must be scalar, got shape {:?}", self.shape())));
        }
        if !self.0.tracked {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else { continue };
            match &node.0.grad_fn {
                None => {
                    if node.0.requires_grad {
                        let mut slot = node.0.grad.lock().expect("grad lock");
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(f) => {
                    let parent_grads = (f.backward)(&g, &f.parents);
                    debug_assert_eq!(parent_grads.len(), f.parents.len(), "{}", f.name);
                    for (p, pg) in f.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.0.tracked {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} gradient size", f.name);
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(f) = &node.0.grad_fn {
                for p in &f.parents {
                    if p.0.tracked && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
