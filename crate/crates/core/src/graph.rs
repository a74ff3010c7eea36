//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a backward closure that scatters the incoming gradient to the node's
//! parents. Parameters are owned by a [`crate::nn::Params`] arena outside the
//! graph; [`Graph::param`] creates a leaf tied to a parameter slot so the
//! optimizer can collect gradients after [`Graph::backward`].
//!
//! Everything is deterministic: reductions accumulate in f64 in index order,
//! and any internal parallelism writes disjoint output ranges with a fixed
//! partition, so results are bit-identical across runs and thread counts.

use std::sync::Arc;

/// Dense tensor: a shape and shared storage. Cloning is cheap (Arc).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Build from already-shared storage without copying.
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<f32>>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Interpret as [batch, channels, spatial...] and return (b, c, spatial volume).
    pub fn bcs(&self) -> (usize, usize, usize) {
        assert!(self.shape.len() >= 2, "expected at least [B, C] dims");
        let b = self.shape[0];
        let c = self.shape[1];
        let s = self.shape[2..].iter().product::<usize>().max(1);
        (b, c, s)
    }

    /// Spatial dims of a [B, C, D, H, W] tensor as (depth, height, width).
    pub fn dhw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 5, "expected [B, C, D, H, W]");
        (self.shape[2], self.shape[3], self.shape[4])
    }
}

/// Node handle within a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient buffers for all nodes, allocated lazily during backward.
pub struct GradStore {
    slots: Vec<Option<Vec<f32>>>,
    lens: Vec<usize>,
}

impl GradStore {
    fn new(lens: Vec<usize>) -> Self {
        Self {
            slots: vec![None; lens.len()],
            lens,
        }
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first access.
    pub fn accum(&mut self, v: Var) -> &mut [f32] {
        let slot = &mut self.slots[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.lens[v.0]]);
        }
        slot.as_mut().unwrap()
    }

    /// Gradient of `v` if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.slots[v.0].as_deref()
    }

    fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.slots[v.0].take()
    }
}

type BackFn = Box<dyn Fn(&[f32], &mut GradStore)>;

struct Node {
    value: Tensor,
    /// None for leaves (constants and parameters).
    backward: Option<BackFn>,
    /// Parameter slot when this node is a parameter leaf.
    param: Option<usize>,
}

/// Computation tape. Build forward with the op constructors in [`crate::nn`]
/// and friends, then call [`Graph::backward`] on a scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node that receives no gradient bookkeeping of its own.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, None)
    }

    /// Leaf node tied to parameter slot `slot` (see [`crate::nn::Params`]).
    pub fn param_leaf(&mut self, t: Tensor, slot: usize) -> Var {
        self.push(t, None, Some(slot))
    }

    pub(crate) fn push(&mut self, value: Tensor, backward: Option<BackFn>, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            backward,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor, backward: BackFn) -> Var {
        self.push(value, Some(backward), None)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// reached by the chain rule; parameter gradients can then be collected
    /// with [`Graph::param_grads`].
    pub fn backward(&self, loss: Var) -> GradStore {
        let t = self.value(loss);
        assert_eq!(t.len(), 1, "backward expects a scalar loss node");
        let mut grads = GradStore::new(self.nodes.iter().map(|n| n.value.len()).collect());
        grads.accum(loss)[0] = 1.0;
        for id in (0..=loss.0).rev() {
            let Some(back) = self.nodes[id].backward.as_ref() else {
                continue;
            };
            // Take this node's gradient out so the closure can borrow the
            // store mutably for its parents.
            let Some(g) = grads.take(Var(id)) else {
                continue;
            };
            back(&g, &mut grads);
        }
        grads
    }

    /// (param slot, gradient) pairs for every parameter leaf that received
    /// a gradient, in creation order.
    pub fn param_grads<'a>(&self, grads: &'a GradStore) -> Vec<(usize, &'a [f32])> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(slot) = node.param {
                if let Some(g) = grads.get(Var(id)) {
                    out.push((slot, g));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    #[test]
    fn backward_through_simple_chain() {
        // loss = sum((2x + 1)^2) at x = [1, 2]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = nn::affine_map(&mut g, x, 2.0, 1.0); // [3, 5]
        let z = nn::mul(&mut g, y, y); // [9, 25]
        let loss = nn::sum_all(&mut g, z); // 34
        assert_eq!(g.value(loss).data()[0], 34.0);
        let grads = g.backward(loss);
        // d/dx sum((2x+1)^2) = 2(2x+1)*2 = 4(2x+1) -> [12, 20]
        let gx = grads.get(x).unwrap();
        assert_eq!(gx, &[12.0, 20.0]);
    }

    #[test]
    fn disconnected_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let unused = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = nn::sum_all(&mut g, x);
        let grads = g.backward(loss);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }
}
