//! Spatial resizing ops: 2x max pooling, 2x trilinear upsampling, and
//! global average pooling.

use rayon::prelude::*;

use crate::graph::{Graph, Tensor, Var};

/// 2x2x2 max pooling with stride 2. Spatial dims must be even.
pub fn max_pool2(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x).clone();
    let (b, c, _) = xv.bcs();
    let (d, h, w) = xv.dhw();
    assert!(
        d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
        "max_pool2 requires even spatial dims, got {d}x{h}x{w}"
    );
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let xd = xv.data();
    let mut data = vec![0.0f32; b * c * ovol];
    let mut argmax = vec![0u32; b * c * ovol];
    data.par_chunks_mut(ovol)
        .zip(argmax.par_chunks_mut(ovol))
        .enumerate()
        .for_each(|(bc, (out, arg))| {
            let xs = &xd[bc * ivol..(bc + 1) * ivol];
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut besti = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = (zo * 2 + dz) * h * w + (yo * 2 + dy) * w + xo * 2 + dx;
                                    if xs[i] > best {
                                        best = xs[i];
                                        besti = i;
                                    }
                                }
                            }
                        }
                        let o = (zo * oh + yo) * ow + xo;
                        out[o] = best;
                        arg[o] = besti as u32;
                    }
                }
            }
        });
    let out = Tensor::new(vec![b, c, od, oh, ow], data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            gx.par_chunks_mut(ivol).enumerate().for_each(|(bc, gxs)| {
                let args = &argmax[bc * ovol..(bc + 1) * ovol];
                let gos = &go[bc * ovol..(bc + 1) * ovol];
                for (a, &v) in args.iter().zip(gos) {
                    gxs[*a as usize] += v;
                }
            });
        }),
    )
}

/// Per-axis source indices and weights for 2x trilinear upsampling with the
/// half-voxel-center convention (output center maps to i/2 - 0.25).
fn axis_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..n_out)
        .map(|io| {
            let src = (io as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let t = (src - f) as f32;
            let i0 = f.max(0.0) as usize;
            let i1 = ((f as isize + 1).clamp(0, n_in as isize - 1)) as usize;
            let i0 = i0.min(n_in - 1);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// 2x trilinear upsampling of `[B, C, D, H, W]`.
pub fn upsample_trilinear2(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x).clone();
    let (b, c, _) = xv.bcs();
    let (d, h, w) = xv.dhw();
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let taps_z = axis_taps(od, d);
    let taps_y = axis_taps(oh, h);
    let taps_x = axis_taps(ow, w);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let xd = xv.data();
    let mut data = vec![0.0f32; b * c * ovol];
    {
        let taps_z = &taps_z;
        let taps_y = &taps_y;
        let taps_x = &taps_x;
        data.par_chunks_mut(ovol).enumerate().for_each(|(bc, out)| {
            let xs = &xd[bc * ivol..(bc + 1) * ivol];
            let mut o = 0usize;
            for &(z0, z1, wz0, wz1) in taps_z {
                for &(y0, y1, wy0, wy1) in taps_y {
                    let r00 = &xs[z0 * h * w + y0 * w..z0 * h * w + y0 * w + w];
                    let r01 = &xs[z0 * h * w + y1 * w..z0 * h * w + y1 * w + w];
                    let r10 = &xs[z1 * h * w + y0 * w..z1 * h * w + y0 * w + w];
                    let r11 = &xs[z1 * h * w + y1 * w..z1 * h * w + y1 * w + w];
                    for &(x0, x1, wx0, wx1) in taps_x {
                        let v00 = r00[x0] * wx0 + r00[x1] * wx1;
                        let v01 = r01[x0] * wx0 + r01[x1] * wx1;
                        let v10 = r10[x0] * wx0 + r10[x1] * wx1;
                        let v11 = r11[x0] * wx0 + r11[x1] * wx1;
                        out[o] = (v00 * wy0 + v01 * wy1) * wz0 + (v10 * wy0 + v11 * wy1) * wz1;
                        o += 1;
                    }
                }
            }
        });
    }
    let out = Tensor::new(vec![b, c, od, oh, ow], data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            gx.par_chunks_mut(ivol).enumerate().for_each(|(bc, gxs)| {
                let gos = &go[bc * ovol..(bc + 1) * ovol];
                let mut o = 0usize;
                for &(z0, z1, wz0, wz1) in &taps_z {
                    for &(y0, y1, wy0, wy1) in &taps_y {
                        for &(x0, x1, wx0, wx1) in &taps_x {
                            let v = gos[o];
                            o += 1;
                            gxs[z0 * h * w + y0 * w + x0] += v * wz0 * wy0 * wx0;
                            gxs[z0 * h * w + y0 * w + x1] += v * wz0 * wy0 * wx1;
                            gxs[z0 * h * w + y1 * w + x0] += v * wz0 * wy1 * wx0;
                            gxs[z0 * h * w + y1 * w + x1] += v * wz0 * wy1 * wx1;
                            gxs[z1 * h * w + y0 * w + x0] += v * wz1 * wy0 * wx0;
                            gxs[z1 * h * w + y0 * w + x1] += v * wz1 * wy0 * wx1;
                            gxs[z1 * h * w + y1 * w + x0] += v * wz1 * wy1 * wx0;
                            gxs[z1 * h * w + y1 * w + x1] += v * wz1 * wy1 * wx1;
                        }
                    }
                }
            });
        }),
    )
}

/// Mean over the spatial extent: `[B, C, ...]` -> `[B, C]`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x).clone();
    let (b, c, s) = xv.bcs();
    let xd = xv.data();
    let mut data = vec![0.0f32; b * c];
    for bc in 0..b * c {
        let mut acc = 0.0f64;
        for &v in &xd[bc * s..(bc + 1) * s] {
            acc += v as f64;
        }
        data[bc] = (acc / s as f64) as f32;
    }
    let out = Tensor::new(vec![b, c], data);
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gx = grads.accum(x);
            for bc in 0..b * c {
                let v = go[bc] / s as f32;
                for gi in &mut gx[bc * s..(bc + 1) * s] {
                    *gi += v;
                }
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_maxima_and_routes_gradient() {
        let mut g = Graph::new();
        let mut data = vec![0.0f32; 8];
        data[3] = 5.0; // position (z=0,y=1,x=1)
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2, 2], data));
        let y = max_pool2(&mut g, x);
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 5.0);
        let loss = crate::nn::sum_all(&mut g, y);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[3], 1.0);
        assert_eq!(gx.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2, 2], vec![3.0; 8]));
        let y = upsample_trilinear2(&mut g, x);
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4, 4]);
        for &v in g.value(y).data() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 10.0, 20.0]));
        let y = global_avg_pool(&mut g, x);
        assert_eq!(g.value(y).data(), &[2.0, 15.0]);
    }
}
