//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a per-forward-pass tape. Operations push nodes holding
//! their value and a backward closure; [`Graph::backward`] walks the tape
//! in reverse creation order (which is a valid topological order because
//! parents always precede children) and accumulates gradients. Parameter
//! leaves are registered by name so a training step can read out
//! `name -> gradient` maps directly.
//!
//! Everything is `f64` and single-threaded per graph; batch parallelism
//! happens one graph per sample, with gradient maps reduced in a fixed
//! order so results are bit-reproducible.

mod ops;


pub mod gradcheck;

pub use ops::{concat_channels, conv2d, group_norm, linear, matmul, softmax_rows};

use crate::params::ParameterSet;
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradStore)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    backward: Option<BackwardFn>,
    keep_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<String, usize>,
    grads: Option<Vec<Option<ArrayD<f64>>>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradStore<'a> {
    grads: &'a mut [Option<ArrayD<f64>>],
}

impl GradStore<'_> {
    /// Adds `contribution` to the gradient of node `id`.
    pub fn accumulate(&mut self, id: usize, contribution: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// A tape of operations for one forward pass.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    /// `grad_enabled = false` skips recording backward closures; such a
    /// graph can only be used for inference.
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grad_enabled,
                params: BTreeMap::new(),
                grads: None,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    fn push(&self, value: ArrayD<f64>, backward: Option<BackwardFn>, keep_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout(), "graph values must be standard layout");
        let mut inner = self.inner.borrow_mut();
        let backward = if inner.grad_enabled { backward } else { None };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            backward,
            keep_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub(crate) fn push_op(&self, value: ArrayD<f64>, backward: BackwardFn) -> Var {
        self.push(value, Some(backward), false)
    }

    /// A leaf with no gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None, false)
    }

    fn push_shared(&self, value: Rc<ArrayD<f64>>, keep_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            backward: None,
            keep_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// A trainable leaf registered under `name`. Calling again with the
    /// same name returns the existing leaf (the shapes must agree).
    pub fn param(&self, name: &str, value: &ArrayD<f64>) -> Var {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            let existing = self.inner.borrow().nodes[id].value.clone();
            assert_eq!(
                existing.shape(),
                value.shape(),
                "parameter {name:?} re-registered with a different shape"
            );
            return Var {
                graph: self.clone(),
                id,
            };
        }
        let var = self.push(value.clone(), None, true);
        self.inner.borrow_mut().params.insert(name.to_string(), var.id);
        var
    }

    /// Binds every tensor of `set` (with `prefix` prepended) as a constant
    /// leaf — used for frozen networks.
    pub fn frozen_param(&self, value: &ArrayD<f64>) -> Var {
        self.constant(value.clone())
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: &Var) {
        assert!(Rc::ptr_eq(&self.inner, &loss.graph.inner), "loss from another graph");
        let mut inner = self.inner.borrow_mut();
        assert!(inner.grad_enabled, "backward on a grad-disabled graph");
        assert!(loss.shape_of(&inner).is_empty(), "backward requires a scalar loss");
        let n = inner.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &inner.nodes[id].backward {
                let mut store = GradStore { grads: &mut grads };
                bw(&g, &mut store);
            }
            if inner.nodes[id].keep_grad {
                grads[id] = Some(g);
            }
        }
        inner.grads = Some(grads);
    }

    /// Gradient of the last `backward` call w.r.t. a registered parameter.
    /// Parameters the loss does not reach get an exact zero gradient.
    pub fn param_grad(&self, name: &str) -> ArrayD<f64> {
        let inner = self.inner.borrow();
        let id = *inner.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let grads = inner.grads.as_ref().expect("backward has not run");
        match &grads[id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(inner.nodes[id].value.raw_dim()),
        }
    }

    /// All registered parameter gradients, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, ArrayD<f64>> {
        let inner = self.inner.borrow();
        let grads = inner.grads.as_ref().expect("backward has not run");
        inner
            .params
            .iter()
            .map(|(name, &id)| {
                let g = match &grads[id] {
                    Some(g) => g.clone(),
                    None => ArrayD::zeros(inner.nodes[id].value.raw_dim()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

/// Binds a [`ParameterSet`] into a graph, either as trainable leaves or
/// as frozen constants.
pub struct ParamCtx<'a> {
    graph: &'a Graph,
    set: &'a ParameterSet,
    prefix: String,
    /// Name prefix used for graph registration; usually equals `prefix`
    /// but can differ when two sets share paths (EMA shadows).
    reg_prefix: String,
    trainable: bool,
}

impl<'a> ParamCtx<'a> {
    pub fn trainable(graph: &'a Graph, set: &'a ParameterSet, prefix: &str) -> Self {
        ParamCtx {
            graph,
            set,
            prefix: prefix.to_string(),
            reg_prefix: prefix.to_string(),
            trainable: true,
        }
    }

    /// Trainable binding that registers under `reg_prefix` while looking
    /// tensors up under `prefix`.
    pub fn trainable_as(graph: &'a Graph, set: &'a ParameterSet, prefix: &str, reg_prefix: &str) -> Self {
        ParamCtx {
            graph,
            set,
            prefix: prefix.to_string(),
            reg_prefix: reg_prefix.to_string(),
            trainable: true,
        }
    }

    pub fn frozen(graph: &'a Graph, set: &'a ParameterSet, prefix: &str) -> Self {
        ParamCtx {
            graph,
            set,
            prefix: prefix.to_string(),
            reg_prefix: prefix.to_string(),
            trainable: false,
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Fetches the tensor at `prefix + path` as a graph leaf.
    pub fn var(&self, path: &str) -> Var {
        let full = format!("{}{}", self.prefix, path);
        let tensor = self
            .set
            .get(&full)
            .unwrap_or_else(|_| panic!("parameter {full:?} missing from set"));
        if self.trainable {
            self.graph.param(&format!("{}{}", self.reg_prefix, path), tensor)
        } else {
            self.graph.frozen_param(tensor)
        }
    }
}

/// A value on the tape.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn shape_of(&self, inner: &GraphInner) -> Vec<usize> {
        inner.nodes[self.id].value.shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert!(v.len() == 1, "scalar() on non-scalar value");
        *v.iter().next().unwrap()
    }

    /// Cuts the gradient path: returns a constant leaf sharing this value.
    pub fn detach(&self) -> Var {
        let value = self.value();
        self.graph.push_shared(value, false)
    }

    pub(crate) fn same_graph(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.graph.inner, &other.graph.inner)
    }
}
