//! Neural-network building blocks as graph operations, plus the parameter
//! arena and Adam optimizer.
//!
//! Layout convention for spatial tensors is `[B, C, D, H, W]` with the
//! x-axis (W) fastest. Ops that reduce accumulate in f64 in index order so
//! results do not depend on thread count.

mod conv;
mod dense;
mod norm;
mod params;
mod resize;

pub use conv::{conv3d, Conv3dCfg};
pub use dense::dense;
pub use norm::instance_norm;
pub use params::{Adam, ParamId, Params};
pub use resize::{global_avg_pool, max_pool2, upsample_trilinear2};

use crate::graph::{Graph, Tensor, Var};

/// Elementwise `a*x + b`.
pub fn affine_map(g: &mut Graph, x: Var, a: f32, b: f32) -> Var {
    let xv = g.value(x).clone();
    let data: Vec<f32> = xv.data().iter().map(|&v| a * v + b).collect();
    let out = Tensor::new(xv.shape().to_vec(), data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            for (gi, &goi) in gx.iter_mut().zip(go) {
                *gi += a * goi;
            }
        }),
    )
}

/// Elementwise sum of two same-shape tensors.
pub fn add(g: &mut Graph, a: Var, b: Var) -> Var {
    let av = g.value(a).clone();
    let bv = g.value(b).clone();
    assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
    let data: Vec<f32> = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::new(av.shape().to_vec(), data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            for (gi, &goi) in grads.accum(a).iter_mut().zip(go) {
                *gi += goi;
            }
            for (gi, &goi) in grads.accum(b).iter_mut().zip(go) {
                *gi += goi;
            }
        }),
    )
}

/// Elementwise product of two same-shape tensors.
pub fn mul(g: &mut Graph, a: Var, b: Var) -> Var {
    let av = g.value(a).clone();
    let bv = g.value(b).clone();
    assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
    let data: Vec<f32> = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::new(av.shape().to_vec(), data);
    let ad = av.data_arc();
    let bd = bv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            {
                let ga = grads.accum(a);
                for i in 0..go.len() {
                    ga[i] += go[i] * bd[i];
                }
            }
            let gb = grads.accum(b);
            for i in 0..go.len() {
                gb[i] += go[i] * ad[i];
            }
        }),
    )
}

/// Sum of all elements, as a scalar node.
pub fn sum_all(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x).clone();
    let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
    g.push_op(
        Tensor::scalar(s as f32),
        Box::new(move |go, grads| {
            let goi = go[0];
            for gi in grads.accum(x).iter_mut() {
                *gi += goi;
            }
        }),
    )
}

/// Leaky ReLU with the given negative slope (slope 0 gives plain ReLU).
pub fn leaky_relu(g: &mut Graph, x: Var, slope: f32) -> Var {
    let xv = g.value(x).clone();
    let data: Vec<f32> = xv
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let out = Tensor::new(xv.shape().to_vec(), data);
    let xd = xv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            for i in 0..go.len() {
                gx[i] += if xd[i] > 0.0 { go[i] } else { slope * go[i] };
            }
        }),
    )
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    leaky_relu(g, x, 0.0)
}

/// Concatenate along the channel axis of `[B, C_i, ...]` tensors.
pub fn concat_channels(g: &mut Graph, xs: &[Var]) -> Var {
    assert!(!xs.is_empty());
    let tensors: Vec<Tensor> = xs.iter().map(|&v| g.value(v).clone()).collect();
    let (b, _, s) = tensors[0].bcs();
    let mut spatial = tensors[0].shape()[2..].to_vec();
    let mut c_total = 0;
    for t in &tensors {
        let (tb, tc, ts) = t.bcs();
        assert_eq!((tb, ts), (b, s), "concat_channels: incompatible shapes");
        c_total += tc;
    }
    let mut data = vec![0.0f32; b * c_total * s];
    for bi in 0..b {
        let mut c_off = 0;
        for t in &tensors {
            let (_, tc, _) = t.bcs();
            let src = &t.data()[bi * tc * s..(bi + 1) * tc * s];
            data[(bi * c_total + c_off) * s..(bi * c_total + c_off + tc) * s].copy_from_slice(src);
            c_off += tc;
        }
    }
    let mut shape = vec![b, c_total];
    shape.append(&mut spatial);
    let out = Tensor::new(shape, data);
    let channel_counts: Vec<usize> = tensors.iter().map(|t| t.bcs().1).collect();
    let inputs = xs.to_vec();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            for bi in 0..b {
                let mut c_off = 0;
                for (&input, &tc) in inputs.iter().zip(&channel_counts) {
                    let gx = grads.accum(input);
                    let dst = &mut gx[bi * tc * s..(bi + 1) * tc * s];
                    let src = &go[(bi * c_total + c_off) * s..(bi * c_total + c_off + tc) * s];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                    c_off += tc;
                }
            }
        }),
    )
}

/// Extract sample `idx` from the batch axis: `[B, ...]` -> `[1, ...]`.
pub fn split_batch(g: &mut Graph, x: Var, idx: usize) -> Var {
    let xv = g.value(x).clone();
    let b = xv.shape()[0];
    assert!(idx < b, "split_batch: index out of range");
    let per = xv.len() / b;
    let data = xv.data()[idx * per..(idx + 1) * per].to_vec();
    let mut shape = xv.shape().to_vec();
    shape[0] = 1;
    let out = Tensor::new(shape, data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            for (d, &v) in gx[idx * per..(idx + 1) * per].iter_mut().zip(go) {
                *d += v;
            }
        }),
    )
}

/// Stack `[1, ...]` samples into a `[N, ...]` batch.
pub fn stack_batch(g: &mut Graph, xs: &[Var]) -> Var {
    assert!(!xs.is_empty());
    let tensors: Vec<Tensor> = xs.iter().map(|&v| g.value(v).clone()).collect();
    let per = tensors[0].len();
    let mut data = Vec::with_capacity(per * tensors.len());
    for t in &tensors {
        assert_eq!(t.shape(), tensors[0].shape(), "stack_batch: shape mismatch");
        assert_eq!(t.shape()[0], 1, "stack_batch: expected singleton batches");
        data.extend_from_slice(t.data());
    }
    let mut shape = tensors[0].shape().to_vec();
    shape[0] = tensors.len();
    let out = Tensor::new(shape, data);
    let inputs = xs.to_vec();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            for (i, &input) in inputs.iter().enumerate() {
                let gx = grads.accum(input);
                for (d, &v) in gx.iter_mut().zip(&go[i * per..(i + 1) * per]) {
                    *d += v;
                }
            }
        }),
    )
}

/// View with a new shape (same element count); backward passes through.
pub fn reshape(g: &mut Graph, x: Var, shape: Vec<usize>) -> Var {
    let xv = g.value(x).clone();
    assert_eq!(
        shape.iter().product::<usize>(),
        xv.len(),
        "reshape: element count mismatch"
    );
    let out = Tensor::from_shared(shape, xv.data_arc());
    g.push_op(
        out,
        Box::new(move |go, grads| {
            for (d, &v) in grads.accum(x).iter_mut().zip(go) {
                *d += v;
            }
        }),
    )
}

/// Softmax over the channel axis of `[B, C, ...]`.
pub fn softmax_channels(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x).clone();
    let (b, c, s) = xv.bcs();
    let xd = xv.data();
    let mut data = vec![0.0f32; xd.len()];
    for bi in 0..b {
        for si in 0..s {
            let at = |ci: usize| xd[(bi * c + ci) * s + si];
            let mut m = f32::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(at(ci));
            }
            let mut denom = 0.0f64;
            for ci in 0..c {
                denom += ((at(ci) - m) as f64).exp();
            }
            for ci in 0..c {
                data[(bi * c + ci) * s + si] = (((at(ci) - m) as f64).exp() / denom) as f32;
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), data);
    let yd = out.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            for bi in 0..b {
                for si in 0..s {
                    let mut dot = 0.0f64;
                    for ci in 0..c {
                        let i = (bi * c + ci) * s + si;
                        dot += (go[i] * yd[i]) as f64;
                    }
                    for ci in 0..c {
                        let i = (bi * c + ci) * s + si;
                        gx[i] += yd[i] * (go[i] - dot as f32);
                    }
                }
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Tensor};

    #[test]
    fn softmax_channels_sums_to_one_and_matches_uniform_on_zeros() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 2]));
        let y = softmax_channels(&mut g, x);
        for si in 0..2 {
            let total: f32 = (0..4).map(|c| g.value(y).data()[c * 2 + si]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn concat_then_split_roundtrips_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::new(vec![1, 2, 3], vec![4.0; 6]));
        let cat = concat_channels(&mut g, &[a, b]);
        assert_eq!(g.value(cat).shape(), &[1, 3, 3]);
        let loss = sum_all(&mut g, cat);
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn stack_and_split_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]));
        let b = g.constant(Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]));
        let s = stack_batch(&mut g, &[a, b]);
        assert_eq!(g.value(s).shape(), &[2, 1, 2]);
        let b1 = split_batch(&mut g, s, 1);
        assert_eq!(g.value(b1).data(), &[3.0, 4.0]);
    }
}
