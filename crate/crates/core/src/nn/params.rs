//! Parameter arena shared by all network modules, plus Adam.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f32>>,
    /// Adam first/second moment state.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Flat arena of named trainable tensors. Insertion order is the canonical
/// order for serialization and updates.
#[derive(Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter data does not match shape");
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            m: vec![0.0; n],
            v: vec![0.0; n],
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![1.0; n])
    }

    /// Kaiming-normal initialization for a conv/linear weight with the given
    /// fan-in (receptive field size times input channels).
    pub fn kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        let value: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        self.add(name, shape, value)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Create a parameter leaf in `g` (zero-copy: shares the value Arc).
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        let t = Tensor::from_shared(e.shape.clone(), Arc::clone(&e.value));
        g.param_leaf(t, id.0)
    }

    /// Snapshot of all values (used for best-checkpoint bookkeeping).
    pub fn values_snapshot(&self) -> Vec<Vec<f32>> {
        self.entries.iter().map(|e| (*e.value).clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Vec<f32>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.value.len(), v.len());
            e.value = Arc::new(v.clone());
        }
    }
}

/// Adam optimizer (β1=0.9, β2=0.999, ε=1e-8 unless overridden).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// One update step. `grads` pairs parameter slots with gradient slices;
    /// slots without a gradient are left untouched (their moments do not
    /// decay, matching "no gradient, no step").
    pub fn step(&mut self, params: &mut Params, grads: &[(usize, Vec<f32>)]) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (slot, grad) in grads {
            let e = &mut params.entries_mut()[*slot];
            assert_eq!(grad.len(), e.value.len());
            let value = Arc::make_mut(&mut e.value);
            for i in 0..grad.len() {
                let g = grad[i];
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = e.m[i] as f64 / bc1;
                let vhat = e.v[i] as f64 / bc2;
                value[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    #[test]
    fn adam_with_zero_lr_leaves_parameters_unchanged() {
        let mut params = Params::new();
        let id = params.add("w", vec![3], vec![1.0, -2.0, 0.5]);
        let before = params.entry(id).value.to_vec();
        let mut opt = Adam::new(0.0);
        opt.step(&mut params, &[(0, vec![1.0, 1.0, 1.0])]);
        assert_eq!(params.entry(id).value.as_slice(), before.as_slice());
    }

    #[test]
    fn gradient_reaches_parameter_leaf() {
        let mut params = Params::new();
        let id = params.add("w", vec![2], vec![3.0, 4.0]);
        let mut g = Graph::new();
        let w = params.leaf(&mut g, id);
        let y = nn::mul(&mut g, w, w);
        let loss = nn::sum_all(&mut g, y);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, id.0);
        assert_eq!(pg[0].1, &[6.0, 8.0]);
    }
}
