//! Tape-free reverse-mode automatic differentiation.
//!
//! Every differentiable value is a [`Var`]: an immutable tensor plus the
//! operation that produced it. Backward rules are themselves written in terms
//! of `Var` operations, so gradients can be differentiated again when
//! `create_graph` is requested (needed by the gradient penalty). Ops whose
//! backward rule is only first-order say so in their docs.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    set_grad_enabled(false)
}

pub(crate) fn set_grad_enabled(on: bool) -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(on));
    NoGradGuard { prev }
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. Entries
    /// for inputs that do not require gradients may be `None`.
    fn backward(&self, inputs: &[Var], output: &Var, grad: &Var) -> Vec<Option<Var>>;

    /// Whether `backward` is built from recorded ops (and is therefore itself
    /// differentiable).
    fn higher_order(&self) -> bool {
        true
    }
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.op.as_ref().map(|o| o.name()).unwrap_or("leaf");
        write!(f, "Var#{}({}, {:?})", self.0.id, op, self.0.value)
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            inputs: Vec::new(),
            op: None,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            inputs: Vec::new(),
            op: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor, inputs: Vec<Var>, op: impl Backward + 'static) -> Self {
        let track = grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if !track {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            inputs,
            op: Some(Box::new(op)),
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

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for inp in &v.0.inputs {
            if inp.requires_grad() && !seen.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves recorded and
/// can be differentiated again. Inputs unreachable from `output` receive
/// zero gradients.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(
        output.value().len(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(
            output.id(),
            Var::constant(Tensor::full(output.shape(), 1.0)),
        );
    }
    let order = topo_order(output);
    for node in order.iter().rev() {
        let Some(op) = node.0.op.as_ref() else {
            continue;
        };
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        if create_graph && !op.higher_order() {
            panic!(
                "op `{}` has a first-order backward rule only; cannot create_graph through it",
                op.name()
            );
        }
        let in_grads = op.backward(&node.0.inputs, node, &g);
        debug_assert_eq!(in_grads.len(), node.0.inputs.len(), "{}", op.name());
        for (inp, ig) in node.0.inputs.iter().zip(in_grads) {
            let Some(ig) = ig else { continue };
            if !inp.requires_grad() {
                continue;
            }
            debug_assert_eq!(ig.shape(), inp.shape(), "grad shape from {}", op.name());
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => crate::ops::add(&prev, &ig),
                None => ig,
            };
            grads.insert(inp.id(), acc);
        }
    }
    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect()
}

/// First-order gradients as plain tensors.
pub fn grad_tensors(output: &Var, wrt: &[Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}
