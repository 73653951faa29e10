//! Dense f32 tensors and the reverse-mode differentiation tape.
//!
//! A [`Graph`] records every differentiable operation applied to tensors that
//! require gradients. [`backward_pass`] then walks the recording in reverse
//! and accumulates gradients into each tensor's `grad` buffer. Gradients
//! accumulate across multiple uses of a tensor; callers zero them between
//! optimizer steps.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorData {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f32>,
    pub(crate) grad: Option<Vec<f32>>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<(u64, usize)>,
}

impl TensorData {
    /// Gradient buffer, allocated as zeros on first access.
    pub(crate) fn grad_mut_alloc(&mut self) -> &mut [f32] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }
}

/// N-dimensional f32 tensor with optional gradient, shared by handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
    id: u64,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            values.len()
        );
        Self {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                grad: None,
                requires_grad: false,
                node: None,
            })),
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![1], vec![value])
    }

    /// Trainable tensor (a leaf that accumulates gradient).
    pub fn param(shape: Vec<usize>, values: Vec<f32>) -> Self {
        let t = Self::new(shape, values);
        t.set_requires_grad(true);
        t
    }

    /// Stable identity, unique per tensor allocation.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn values(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().values.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar {:?}", d.shape);
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copies values in from a slice of identical length.
    pub fn copy_from(&self, values: &[f32]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.values.len(), values.len());
        d.values.copy_from_slice(values);
    }

    /// Value copy detached from any graph, without gradient.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::new(d.shape.clone(), d.values.clone())
    }

    pub(crate) fn borrow(&self) -> Ref<'_, TensorData> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_mut(&self) -> RefMut<'_, TensorData> {
        self.inner.borrow_mut()
    }

    pub(crate) fn node(&self) -> Option<(u64, usize)> {
        self.inner.borrow().node
    }

    /// Accumulates `src` into the gradient buffer.
    pub(crate) fn accum_grad(&self, src: &[f32]) {
        let mut d = self.inner.borrow_mut();
        let g = d.grad_mut_alloc();
        debug_assert_eq!(g.len(), src.len());
        for (gi, si) in g.iter_mut().zip(src) {
            *gi += si;
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("id", &self.id)
            .finish()
    }
}

struct Node {
    backward: Box<dyn Fn()>,
}

/// Recording tape for one forward computation.
///
/// Topological order is the recording order; backward traverses it exactly
/// once in reverse. A graph and its tensors belong to one worker at a time.
pub struct Graph {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    tracked: Vec<Tensor>,
    tracked_ids: HashSet<u64>,
    touched: HashSet<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            tracked: Vec::new(),
            tracked_ids: HashSet::new(),
            touched: HashSet::new(),
        }
    }

    /// Forward-only graph: nothing is recorded, no output requires grad.
    /// Input tensors are still registered as touched.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.recording = false;
        g
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Ids of every tensor consumed by an operation on this graph.
    pub fn touched_ids(&self) -> &HashSet<u64> {
        &self.touched
    }

    /// How many of `ids` were consumed by operations on this graph.
    pub fn touch_count(&self, ids: &HashSet<u64>) -> usize {
        self.touched.intersection(ids).count()
    }

    pub(crate) fn touch(&mut self, inputs: &[&Tensor]) {
        for t in inputs {
            self.touched.insert(t.id());
        }
    }

    /// True when the op over `inputs` must be recorded.
    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Records a backward rule; marks `output` as a differentiable result.
    pub(crate) fn register(
        &mut self,
        inputs: &[&Tensor],
        output: &Tensor,
        backward: impl Fn() + 'static,
    ) {
        let idx = self.nodes.len();
        {
            let mut d = output.borrow_mut();
            d.requires_grad = true;
            d.node = Some((self.id, idx));
        }
        for t in inputs {
            if t.requires_grad() && self.tracked_ids.insert(t.id()) {
                self.tracked.push((*t).clone());
            }
        }
        if self.tracked_ids.insert(output.id()) {
            self.tracked.push(output.clone());
        }
        self.nodes.push(Node {
            backward: Box::new(backward),
        });
    }

    /// Fills gradients of every tensor recorded on this graph with
    /// d`loss`/d`tensor`; tensors not reachable from `loss` end up with
    /// zero gradient. A detached constant loss yields all-zero gradients.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let loss_node = match loss.node() {
            Some((gid, _)) if gid != self.id => return Err(Error::LossNotOnGraph),
            other => other.map(|(_, idx)| idx),
        };
        for t in &self.tracked {
            t.borrow_mut().grad_mut_alloc();
        }
        loss.borrow_mut().grad_mut_alloc()[0] += 1.0;
        if let Some(end) = loss_node {
            for node in self.nodes[..=end].iter().rev() {
                (node.backward)();
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Runs reverse-mode differentiation of the scalar `loss` over `graph`.
pub fn backward_pass(graph: &mut Graph, loss: &Tensor) -> Result<()> {
    graph.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn product_rule_with_aliased_input() {
        // loss = x*x at x=3 -> d/dx = 2x = 6
        let mut g = Graph::new();
        let x = Tensor::param(vec![1], vec![3.0]);
        let loss = ops::mul(&mut g, &x, &x).unwrap();
        backward_pass(&mut g, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn detached_constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let x = Tensor::param(vec![1], vec![3.0]);
        let _y = ops::mul(&mut g, &x, &x).unwrap();
        let loss = Tensor::scalar(5.0);
        backward_pass(&mut g, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let y = ops::mul(&mut g, &x, &x).unwrap();
        let err = backward_pass(&mut g, &y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn loss_from_another_graph_is_rejected() {
        let mut g1 = Graph::new();
        let x = Tensor::param(vec![1], vec![2.0]);
        let loss = ops::mul(&mut g1, &x, &x).unwrap();
        let mut g2 = Graph::new();
        let err = backward_pass(&mut g2, &loss).unwrap_err();
        assert!(matches!(err, Error::LossNotOnGraph));
    }

    #[test]
    fn grads_accumulate_until_caller_zeroes() {
        let x = Tensor::param(vec![1], vec![3.0]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let loss = ops::mul(&mut g, &x, &x).unwrap();
            backward_pass(&mut g, &loss).unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn inference_graph_records_nothing_but_tracks_touch() {
        let mut g = Graph::inference();
        let x = Tensor::param(vec![1], vec![3.0]);
        let y = ops::mul(&mut g, &x, &x).unwrap();
        assert!(!y.requires_grad());
        assert_eq!(g.node_count(), 0);
        assert!(g.touched_ids().contains(&x.id()));
    }
}
