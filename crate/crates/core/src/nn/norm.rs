//! Instance normalization (per-sample, per-channel statistics).

use rayon::prelude::*;

use crate::graph::{Graph, Tensor, Var};

const EPS: f64 = 1e-5;

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, with statistics taken
/// over the spatial extent of each (sample, channel) slice.
pub fn instance_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let xv = g.value(x).clone();
    let gv = g.value(gamma).clone();
    let bv = g.value(beta).clone();
    let (b, c, s) = xv.bcs();
    assert_eq!(gv.len(), c, "instance_norm: gamma length mismatch");
    assert_eq!(bv.len(), c, "instance_norm: beta length mismatch");
    assert!(s > 0);

    let xd = xv.data();
    let mut stats = vec![(0.0f64, 0.0f64); b * c]; // (mean, inv_std)
    let mut data = vec![0.0f32; xd.len()];
    data.par_chunks_mut(s)
        .zip(stats.par_iter_mut())
        .enumerate()
        .for_each(|(bc, (out, stat))| {
            let xs = &xd[bc * s..(bc + 1) * s];
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for &v in xs {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
            let mean = sum / s as f64;
            let var = (sq / s as f64 - mean * mean).max(0.0);
            let inv = 1.0 / (var + EPS).sqrt();
            *stat = (mean, inv);
            let ci = bc % c;
            let ga = gv.data()[ci] as f64;
            let be = bv.data()[ci] as f64;
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = ((v as f64 - mean) * inv * ga + be) as f32;
            }
        });

    let out = Tensor::new(xv.shape().to_vec(), data);
    let xd = xv.data_arc();
    let gd = gv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            // Per-channel parameter gradients, accumulated in (b, c) order.
            {
                let ggam = grads.accum(gamma);
                for bc in 0..b * c {
                    let (mean, inv) = stats[bc];
                    let mut acc = 0.0f64;
                    for i in 0..s {
                        let xhat = (xd[bc * s + i] as f64 - mean) * inv;
                        acc += go[bc * s + i] as f64 * xhat;
                    }
                    ggam[bc % c] += acc as f32;
                }
            }
            {
                let gbet = grads.accum(beta);
                for bc in 0..b * c {
                    let mut acc = 0.0f64;
                    for i in 0..s {
                        acc += go[bc * s + i] as f64;
                    }
                    gbet[bc % c] += acc as f32;
                }
            }
            let gx = grads.accum(x);
            gx.par_chunks_mut(s).enumerate().for_each(|(bc, gxs)| {
                let (mean, inv) = stats[bc];
                let ga = gd[bc % c] as f64;
                let gos = &go[bc * s..(bc + 1) * s];
                let xs = &xd[bc * s..(bc + 1) * s];
                let mut mean_dy = 0.0f64;
                let mut mean_dy_xhat = 0.0f64;
                for i in 0..s {
                    let xhat = (xs[i] as f64 - mean) * inv;
                    mean_dy += gos[i] as f64;
                    mean_dy_xhat += gos[i] as f64 * xhat;
                }
                mean_dy /= s as f64;
                mean_dy_xhat /= s as f64;
                for i in 0..s {
                    let xhat = (xs[i] as f64 - mean) * inv;
                    gxs[i] +=
                        (ga * inv * (gos[i] as f64 - mean_dy - xhat * mean_dy_xhat)) as f32;
                }
            });
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sum_all;

    #[test]
    fn normalizes_to_zero_mean_unit_variance_per_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0],
        ));
        let ga = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]));
        let be = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]));
        let y = instance_norm(&mut g, x, ga, be);
        let d = g.value(y).data();
        for ch in 0..2 {
            let m: f32 = d[ch * 4..(ch + 1) * 4].iter().sum::<f32>() / 4.0;
            let v: f32 = d[ch * 4..(ch + 1) * 4].iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn gradient_of_sum_is_zero_through_normalization() {
        // sum(IN(x)) is invariant to x up to gamma/beta, so dL/dx ~ 0.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 3.0]));
        let ga = g.constant(Tensor::new(vec![1], vec![1.5]));
        let be = g.constant(Tensor::new(vec![1], vec![0.2]));
        let y = instance_norm(&mut g, x, ga, be);
        let loss = sum_all(&mut g, y);
        let grads = g.backward(loss);
        for &v in grads.get(x).unwrap() {
            assert!(v.abs() < 1e-4, "expected ~0 gradient, got {v}");
        }
        // beta gradient is the voxel count
        assert!((grads.get(be).unwrap()[0] - 4.0).abs() < 1e-5);
    }
}
