//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles (`Rc`) onto row-major storage. Every operation
//! that consumes a tracked tensor records itself on the implicit graph by
//! storing its parents and a vector-Jacobian product closure; `backward`
//! replays that record in reverse topological order exactly once per node.
//! Graphs are single-threaded by construction.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod check;
pub mod conv;
pub mod init;
pub mod io;
pub mod ops;

/// Vector-Jacobian product: maps the output gradient to one optional
/// gradient per parent (in parent order).
pub(crate) type Vjp = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

// Runtime-togglable input validation (non-finite detection). Defaults to on
// in debug builds.
static DEBUG_CHECKS: AtomicBool = AtomicBool::new(cfg!(debug_assertions));

/// Enable or disable per-op non-finite input detection.
pub fn set_debug_checks(on: bool) {
    DEBUG_CHECKS.store(on, Ordering::Relaxed);
}

pub fn debug_checks_enabled() -> bool {
    DEBUG_CHECKS.load(Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// Handle to a node in the computation graph. Cloning is O(1).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn alloc(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        vjp: Option<Vjp>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                vjp,
            }),
        }
    }

    /// New leaf tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("from_vec", format!("zero dim in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::invalid(
                "from_vec",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::alloc(data, shape.to_vec(), false, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::alloc(vec![v], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::alloc(vec![0.0; n], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::alloc(vec![v; n], shape.to_vec(), false, Vec::new(), None)
    }

    /// Result of an op. Parents and the VJP are recorded only when some
    /// parent participates in gradient tracking; otherwise the output is a
    /// plain constant and the subgraph can be freed immediately. The builder
    /// receives the freshly computed output values so ops can save them for
    /// the backward pass without an unconditional copy.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        vjp: impl FnOnce(&[f64]) -> Vjp,
    ) -> Tensor {
        if parents.iter().any(Tensor::tracked) {
            let vjp = vjp(&data);
            Tensor::alloc(data, shape, false, parents, Some(vjp))
        } else {
            Tensor::alloc(data, shape, false, Vec::new(), None)
        }
    }

    /// Mark this leaf as trainable. Must not be the output of an op.
    pub fn trainable(self) -> Tensor {
        assert!(
            self.inner.vjp.is_none(),
            "trainable() applies to leaf tensors only"
        );
        Tensor::alloc(
            self.inner.data.borrow().clone(),
            self.inner.shape.clone(),
            true,
            Vec::new(),
            None,
        )
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when gradients flow through (or into) this node.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.vjp.is_some()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values (shape is fixed). Used by optimizers and
    /// finite-difference probes.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub fn set_value(&self, idx: usize, v: f64) {
        self.inner.data.borrow_mut()[idx] = v;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(&g) {
                    *e += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Leaf copy of this tensor's values with gradient flow cut. This is the
    /// stop-gradient marker.
    pub fn detach(&self) -> Tensor {
        Tensor::alloc(self.to_vec(), self.inner.shape.to_vec(), false, Vec::new(), None)
    }

    /// Run reverse-mode differentiation from a scalar loss. Gradients are
    /// summed across fan-out and added into any gradient already stored;
    /// optimizers clear them explicitly.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.get(&node.id()) else {
                continue;
            };
            let Some(vjp) = node.inner.vjp.as_ref() else {
                continue;
            };
            let parent_grads = vjp(g);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.tracked() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.entry(parent.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        // Make computed gradients observable on every tracked node that was
        // reached, not just leaves; tests inspect intermediates (e.g. the
        // straight-through contract).
        for node in &order {
            if let Some(g) = grads.remove(&node.id()) {
                if node.tracked() {
                    node.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

/// Postorder over the reachable graph: every parent precedes its consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.inner.parents {
            if !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Validate op inputs for non-finite values when debug checks are on.
pub(crate) fn check_inputs(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    if !debug_checks_enabled() {
        return Ok(());
    }
    for t in inputs {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip_and_invariants() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
        assert!(!t.tracked());
        assert!(Tensor::from_vec(vec![1.0], &[2]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().trainable();
        let y = t.scale(2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])
            .unwrap()
            .trainable();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(x*x) at x=[1,2] -> grad [2,4]
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().trainable();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates_and_unreachable_stays_absent() {
        let x = Tensor::from_vec(vec![3.0], &[1]).unwrap().trainable();
        let unused = Tensor::from_vec(vec![5.0], &[1]).unwrap().trainable();
        let y = x.add(&x).unwrap(); // dy/dx = 2
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        assert!(unused.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let x = Tensor::from_vec(vec![1.5, -2.0], &[2]).unwrap().trainable();
        let d = x.detach();
        assert!(!d.tracked());
        let y = d.mul(&d).unwrap().sum_all().unwrap();
        // Graph below the marker carries no gradient at all.
        assert!(y.backward().is_ok());
        assert!(x.grad().is_none());
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap().trainable();
        x.sum_all().unwrap().backward().unwrap();
        x.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn debug_checks_flag_non_finite() {
        set_debug_checks(true);
        let x = Tensor::from_vec(vec![f64::NAN], &[1]).unwrap();
        let r = x.scale(1.0);
        set_debug_checks(false);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
