//! 3D convolution via im2col + GEMM.
//!
//! Work is split into fixed (batch, z-slab) chunks processed in parallel;
//! every output element is produced by exactly one chunk, and cross-chunk
//! reductions (weight gradients) are combined in chunk order, so results are
//! independent of thread scheduling.


use rayon::prelude::*;

use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Conv3dCfg {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dCfg {
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn k3s2() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

/// Target number of output voxels per GEMM chunk. Fixed so the chunk
/// partition (and therefore the bit pattern of results) never depends on
/// thread count.
const CHUNK_VOXELS: usize = 16384;

fn chunks(dims: Dims) -> Vec<(usize, usize, usize)> {
    let plane = dims.oh * dims.ow;
    let zs = (CHUNK_VOXELS / plane.max(1)).clamp(1, dims.od);
    let mut out = Vec::new();
    for b in 0..dims.b {
        let mut z = 0;
        while z < dims.od {
            let z1 = (z + zs).min(dims.od);
            out.push((b, z, z1));
            z = z1;
        }
    }
    out
}

/// Fill `cols` (row-major `[cin*k^3, n]`) for output voxels of one z-slab.
fn im2col_slab(
    x: &[f32],
    dims: Dims,
    cfg: Conv3dCfg,
    b: usize,
    z0: usize,
    z1: usize,
    cols: &mut [f32],
) {
    let k = cfg.kernel;
    let s = cfg.stride;
    let p = cfg.pad as isize;
    let n = (z1 - z0) * dims.oh * dims.ow;
    let plane_in = dims.h * dims.w;
    let vol_in = dims.d * plane_in;
    for ci in 0..dims.cin {
        let xc = &x[(b * dims.cin + ci) * vol_in..(b * dims.cin + ci + 1) * vol_in];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k + dz) * k + dy) * k + dx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut out_i = 0usize;
                    for zo in z0..z1 {
                        let zi = (zo * s) as isize + dz as isize - p;
                        for yo in 0..dims.oh {
                            let yi = (yo * s) as isize + dy as isize - p;
                            let run = &mut dst[out_i..out_i + dims.ow];
                            out_i += dims.ow;
                            if zi < 0
                                || zi >= dims.d as isize
                                || yi < 0
                                || yi >= dims.h as isize
                            {
                                run.fill(0.0);
                                continue;
                            }
                            let base = zi as usize * plane_in + yi as usize * dims.w;
                            if s == 1 {
                                // xi = xo + dx - p; contiguous run with zero edges.
                                let off = dx as isize - p;
                                let lo = (-off).max(0) as usize; // first valid xo
                                let hi =
                                    ((dims.w as isize - off).min(dims.ow as isize)).max(0) as usize;
                                run[..lo].fill(0.0);
                                if hi > lo {
                                    let src0 = (lo as isize + off) as usize;
                                    run[lo..hi]
                                        .copy_from_slice(&xc[base + src0..base + src0 + hi - lo]);
                                }
                                run[hi..].fill(0.0);
                            } else {
                                for (xo, slot) in run.iter_mut().enumerate() {
                                    let xi = (xo * s) as isize + dx as isize - p;
                                    *slot = if xi < 0 || xi >= dims.w as isize {
                                        0.0
                                    } else {
                                        xc[base + xi as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Plain forward convolution on raw buffers. `w` is `[cout, cin*k^3]`
/// row-major, `bias` is `[cout]` or empty.
fn conv_forward(x: &[f32], w: &[f32], bias: &[f32], dims: Dims, cfg: Conv3dCfg) -> Vec<f32> {
    let kvol = cfg.kernel * cfg.kernel * cfg.kernel;
    let kk = dims.cin * kvol;
    let ovol = dims.od * dims.oh * dims.ow;
    let oplane = dims.oh * dims.ow;
    let mut out = vec![0.0f32; dims.b * dims.cout * ovol];

    let parts: Vec<((usize, usize, usize), Vec<f32>)> = chunks(dims)
        .into_par_iter()
        .map(|(b, z0, z1)| {
            let n = (z1 - z0) * oplane;
            let mut cols = vec![0.0f32; kk * n];
            im2col_slab(x, dims, cfg, b, z0, z1, &mut cols);
            let mut o = vec![0.0f32; dims.cout * n];
            sgemm(
                dims.cout,
                kk,
                n,
                w.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                0.0,
                o.as_mut_ptr(),
                n as isize,
                1,
            );
            ((b, z0, z1), o)
        })
        .collect();

    for ((b, z0, z1), o) in parts {
        let n = (z1 - z0) * oplane;
        for co in 0..dims.cout {
            let add = if bias.is_empty() { 0.0 } else { bias[co] };
            let dst =
                &mut out[(b * dims.cout + co) * ovol + z0 * oplane..][..n];
            let src = &o[co * n..(co + 1) * n];
            if add == 0.0 {
                dst.copy_from_slice(src);
            } else {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + add;
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the weight matrix: sum over chunks of go_chunk · colsᵀ,
/// reduced in fixed chunk order.
fn conv_grad_w(x: &[f32], go: &[f32], dims: Dims, cfg: Conv3dCfg) -> Vec<f32> {
    let kvol = cfg.kernel * cfg.kernel * cfg.kernel;
    let kk = dims.cin * kvol;
    let ovol = dims.od * dims.oh * dims.ow;
    let oplane = dims.oh * dims.ow;
    let mut gw = vec![0.0f32; dims.cout * kk];

    let parts: Vec<Vec<f32>> = chunks(dims)
        .into_par_iter()
        .map(|(b, z0, z1)| {
            let n = (z1 - z0) * oplane;
            let mut cols = vec![0.0f32; kk * n];
            im2col_slab(x, dims, cfg, b, z0, z1, &mut cols);
            let mut part = vec![0.0f32; dims.cout * kk];
            // A = go[b, :, slab] with row stride ovol; B = colsᵀ via strides.
            let a = unsafe { go.as_ptr().add(b * dims.cout * ovol + z0 * oplane) };
            sgemm(
                dims.cout,
                n,
                kk,
                a,
                ovol as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                0.0,
                part.as_mut_ptr(),
                kk as isize,
                1,
            );
            part
        })
        .collect();

    for part in parts {
        for (g, p) in gw.iter_mut().zip(part) {
            *g += p;
        }
    }
    gw
}

fn conv_grad_bias(go: &[f32], dims: Dims) -> Vec<f32> {
    let ovol = dims.od * dims.oh * dims.ow;
    (0..dims.cout)
        .map(|co| {
            let mut acc = 0.0f64;
            for b in 0..dims.b {
                for &v in &go[(b * dims.cout + co) * ovol..(b * dims.cout + co + 1) * ovol] {
                    acc += v as f64;
                }
            }
            acc as f32
        })
        .collect()
}

/// Gradient w.r.t. the input.
///
/// stride 1: expressed as a forward convolution of the output gradient with
/// the spatially flipped, channel-transposed kernel (pad' = k-1-p), which
/// reuses the parallel GEMM path. stride > 1: per-chunk Wᵀ·go followed by a
/// sequential col2im scatter (only used by the small alignment network).
fn conv_grad_x(w: &[f32], go: &[f32], dims: Dims, cfg: Conv3dCfg) -> Vec<f32> {
    let k = cfg.kernel;
    let kvol = k * k * k;
    if cfg.stride == 1 {
        let mut wf = vec![0.0f32; dims.cin * dims.cout * kvol];
        for co in 0..dims.cout {
            for ci in 0..dims.cin {
                for t in 0..kvol {
                    wf[(ci * dims.cout + co) * kvol + (kvol - 1 - t)] =
                        w[(co * dims.cin + ci) * kvol + t];
                }
            }
        }
        let back_dims = Dims {
            b: dims.b,
            cin: dims.cout,
            d: dims.od,
            h: dims.oh,
            w: dims.ow,
            cout: dims.cin,
            od: dims.d,
            oh: dims.h,
            ow: dims.w,
        };
        let back_cfg = Conv3dCfg {
            kernel: k,
            stride: 1,
            pad: k - 1 - cfg.pad,
        };
        return conv_forward(go, &wf, &[], back_dims, back_cfg);
    }

    let kk = dims.cin * kvol;
    let ovol = dims.od * dims.oh * dims.ow;
    let oplane = dims.oh * dims.ow;
    let ivol = dims.d * dims.h * dims.w;
    let iplane = dims.h * dims.w;
    let mut gx = vec![0.0f32; dims.b * dims.cin * ivol];

    let parts: Vec<((usize, usize, usize), Vec<f32>)> = chunks(dims)
        .into_par_iter()
        .map(|(b, z0, z1)| {
            let n = (z1 - z0) * oplane;
            let mut gcols = vec![0.0f32; kk * n];
            let a = unsafe { go.as_ptr().add(b * dims.cout * ovol + z0 * oplane) };
            // gcols = Wᵀ · go_chunk
            sgemm(
                kk,
                dims.cout,
                n,
                w.as_ptr(),
                1,
                kk as isize,
                a,
                ovol as isize,
                1,
                0.0,
                gcols.as_mut_ptr(),
                n as isize,
                1,
            );
            ((b, z0, z1), gcols)
        })
        .collect();

    let s = cfg.stride;
    let p = cfg.pad as isize;
    for ((b, z0, z1), gcols) in parts {
        let n = (z1 - z0) * oplane;
        for ci in 0..dims.cin {
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let row = ((ci * k + dz) * k + dy) * k + dx;
                        let src = &gcols[row * n..(row + 1) * n];
                        let mut i = 0usize;
                        for zo in z0..z1 {
                            let zi = (zo * s) as isize + dz as isize - p;
                            for yo in 0..dims.oh {
                                let yi = (yo * s) as isize + dy as isize - p;
                                if zi < 0
                                    || zi >= dims.d as isize
                                    || yi < 0
                                    || yi >= dims.h as isize
                                {
                                    i += dims.ow;
                                    continue;
                                }
                                let base = (b * dims.cin + ci) * ivol
                                    + zi as usize * iplane
                                    + yi as usize * dims.w;
                                for xo in 0..dims.ow {
                                    let xi = (xo * s) as isize + dx as isize - p;
                                    if xi >= 0 && xi < dims.w as isize {
                                        gx[base + xi as usize] += src[i];
                                    }
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Graph op: 3D convolution of `x` `[B, Cin, D, H, W]` with weights `w`
/// `[Cout, Cin, k, k, k]` and bias `b` `[Cout]`.
pub fn conv3d(g: &mut Graph, x: Var, w: Var, b: Var, cfg: Conv3dCfg) -> Var {
    let xv = g.value(x).clone();
    let wv = g.value(w).clone();
    let bv = g.value(b).clone();
    let xs = xv.shape();
    let ws = wv.shape();
    assert_eq!(xs.len(), 5, "conv3d expects [B, Cin, D, H, W]");
    assert_eq!(ws.len(), 5, "conv3d expects [Cout, Cin, k, k, k] weights");
    assert_eq!(xs[1], ws[1], "conv3d: channel mismatch");
    assert_eq!(ws[2], cfg.kernel);
    let dims = Dims {
        b: xs[0],
        cin: xs[1],
        d: xs[2],
        h: xs[3],
        w: xs[4],
        cout: ws[0],
        od: cfg.out_dim(xs[2]),
        oh: cfg.out_dim(xs[3]),
        ow: cfg.out_dim(xs[4]),
    };
    assert_eq!(bv.len(), dims.cout, "conv3d: bias length mismatch");

    let out = conv_forward(xv.data(), wv.data(), bv.data(), dims, cfg);
    let out = Tensor::new(
        vec![dims.b, dims.cout, dims.od, dims.oh, dims.ow],
        out,
    );
    let xd = xv.data_arc();
    let wd = wv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let gw = conv_grad_w(&xd, go, dims, cfg);
            for (d, v) in grads.accum(w).iter_mut().zip(gw) {
                *d += v;
            }
            let gb = conv_grad_bias(go, dims);
            for (d, v) in grads.accum(b).iter_mut().zip(gb) {
                *d += v;
            }
            let gx = conv_grad_x(&wd, go, dims, cfg);
            for (d, v) in grads.accum(x).iter_mut().zip(gx) {
                *d += v;
            }
        }),
    )
}

/// Reference convolution as plain nested loops, used by unit tests.
#[cfg(test)]
fn conv_naive(x: &[f32], w: &[f32], bias: &[f32], dims: Dims, cfg: Conv3dCfg) -> Vec<f32> {
    let k = cfg.kernel;
    let s = cfg.stride;
    let p = cfg.pad as isize;
    let ivol = dims.d * dims.h * dims.w;
    let ovol = dims.od * dims.oh * dims.ow;
    let mut out = vec![0.0f32; dims.b * dims.cout * ovol];
    for b in 0..dims.b {
        for co in 0..dims.cout {
            for zo in 0..dims.od {
                for yo in 0..dims.oh {
                    for xo in 0..dims.ow {
                        let mut acc = if bias.is_empty() { 0.0 } else { bias[co] as f64 };
                        for ci in 0..dims.cin {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let zi = (zo * s) as isize + dz as isize - p;
                                        let yi = (yo * s) as isize + dy as isize - p;
                                        let xi = (xo * s) as isize + dx as isize - p;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= dims.d as isize
                                            || yi >= dims.h as isize
                                            || xi >= dims.w as isize
                                        {
                                            continue;
                                        }
                                        let xi = (b * dims.cin + ci) * ivol
                                            + zi as usize * dims.h * dims.w
                                            + yi as usize * dims.w
                                            + xi as usize;
                                        let wi = ((co * dims.cin + ci) * k * k * k)
                                            + ((dz * k + dy) * k + dx);
                                        acc += x[xi] as f64 * w[wi] as f64;
                                    }
                                }
                            }
                        }
                        out[(b * dims.cout + co) * ovol
                            + (zo * dims.oh + yo) * dims.ow
                            + xo] = acc as f32;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sum_all;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(
        rng: &mut ChaCha8Rng,
        b: usize,
        cin: usize,
        cout: usize,
        dhw: (usize, usize, usize),
        cfg: Conv3dCfg,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>, Dims) {
        let dims = Dims {
            b,
            cin,
            d: dhw.0,
            h: dhw.1,
            w: dhw.2,
            cout,
            od: cfg.out_dim(dhw.0),
            oh: cfg.out_dim(dhw.1),
            ow: cfg.out_dim(dhw.2),
        };
        let x: Vec<f32> = (0..b * cin * dhw.0 * dhw.1 * dhw.2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w: Vec<f32> = (0..cout * cin * cfg.kernel.pow(3))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        (x, w, bias, dims)
    }

    #[test]
    fn gemm_conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cfg, dhw) in &[
            (Conv3dCfg::k3(), (5, 6, 7)),
            (Conv3dCfg::k3s2(), (7, 6, 5)),
            (Conv3dCfg::k1(), (4, 5, 6)),
        ] {
            let (x, w, bias, dims) = random_case(&mut rng, 2, 3, 4, dhw, cfg);
            let fast = conv_forward(&x, &w, &bias, dims, cfg);
            let slow = conv_naive(&x, &w, &bias, dims, cfg);
            let max_diff = fast
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-4, "conv mismatch {max_diff} for {cfg:?}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for cfg in [Conv3dCfg::k3(), Conv3dCfg::k3s2()] {
            let (x, w, bias, _dims) = random_case(&mut rng, 1, 2, 3, (4, 3, 5), cfg);
            let loss_of = |x: &[f32], w: &[f32], bias: &[f32]| -> f32 {
                let mut g = Graph::new();
                let xv = g.constant(Tensor::new(vec![1, 2, 4, 3, 5], x.to_vec()));
                let wv = g.constant(Tensor::new(vec![3, 2, cfg.kernel, cfg.kernel, cfg.kernel], w.to_vec()));
                let bv = g.constant(Tensor::new(vec![3], bias.to_vec()));
                let y = conv3d(&mut g, xv, wv, bv, cfg);
                // weight the sum so gradients are non-uniform
                let y2 = crate::nn::mul(&mut g, y, y);
                let loss = sum_all(&mut g, y2);
                g.value(loss).data()[0]
            };
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![1, 2, 4, 3, 5], x.clone()));
            let wv = g.constant(Tensor::new(
                vec![3, 2, cfg.kernel, cfg.kernel, cfg.kernel],
                w.clone(),
            ));
            let bv = g.constant(Tensor::new(vec![3], bias.clone()));
            let y = conv3d(&mut g, xv, wv, bv, cfg);
            let y2 = crate::nn::mul(&mut g, y, y);
            let loss = sum_all(&mut g, y2);
            let grads = g.backward(loss);

            let h = 1e-2f32;
            for (buf, var, label) in [
                (x.clone(), xv, "x"),
                (w.clone(), wv, "w"),
                (bias.clone(), bv, "b"),
            ] {
                let ga = grads.get(var).unwrap();
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for i in (0..buf.len()).step_by(buf.len() / 13 + 1) {
                    let mut hi = buf.clone();
                    hi[i] += h;
                    let mut lo = buf.clone();
                    lo[i] -= h;
                    let (lh, ll) = match label {
                        "x" => (loss_of(&hi, &w, &bias), loss_of(&lo, &w, &bias)),
                        "w" => (loss_of(&x, &hi, &bias), loss_of(&x, &lo, &bias)),
                        _ => (loss_of(&x, &w, &hi), loss_of(&x, &w, &lo)),
                    };
                    let fd = ((lh - ll) / (2.0 * h)) as f64;
                    num += (fd - ga[i] as f64).powi(2);
                    den += fd.powi(2).max(ga[i] as f64 * ga[i] as f64);
                }
                let rel = (num / den.max(1e-20)).sqrt();
                assert!(rel < 2e-2, "{label} gradient rel err {rel} for {cfg:?}");
            }
        }
    }
}
