//! Spatial registration: the 3x4 affine transform on normalized
//! coordinates, pull-back warping of feature grids and masks (differentiable
//! in both the field and the transform), and the global affine regressor
//! driven by base-class segmentations.

use rand::Rng;

use crate::config::AlignConfig;
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{self, Conv3dCfg, ParamId, Params};
use crate::resample::{self, Interp, VoxelMap};

/// Affine transform on normalized coordinates (each axis mapped to [-1, 1]):
/// a query-frame point p maps to the support-frame point `m · (p, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    /// Rows x, y, z; columns x, y, z, translation.
    pub m: [[f64; 4]; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    /// Pure translation of `t` voxels on a grid of shape (W, H, D).
    pub fn translation_voxels(t: [f64; 3], shape: [usize; 3]) -> Self {
        let mut out = Self::identity();
        for a in 0..3 {
            let n = shape[a] as f64;
            out.m[a][3] = if n > 1.0 { 2.0 * t[a] / (n - 1.0) } else { 0.0 };
        }
        out
    }

    pub fn from_flat(v: &[f32]) -> Self {
        assert_eq!(v.len(), 12);
        let mut m = [[0.0f64; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                m[r][c] = v[r * 4 + c] as f64;
            }
        }
        Self { m }
    }

    pub fn to_flat(&self) -> [f32; 12] {
        let mut out = [0.0f32; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.m[r][c] as f32;
            }
        }
        out
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] =
                self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3];
        }
        out
    }

    /// `outer ∘ inner`: the transform mapping p to outer(inner(p)), so that
    /// warping by `inner` after warping by... concretely,
    /// warp(warp(x, outer), inner) == warp(x, outer.compose(inner)).
    pub fn compose(&self, inner: &Self) -> Self {
        let mut m = [[0.0f64; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    m[r][c] += self.m[r][k] * inner.m[k][c];
                }
            }
            m[r][3] = self.m[r][0] * inner.m[0][3]
                + self.m[r][1] * inner.m[1][3]
                + self.m[r][2] * inner.m[2][3]
                + self.m[r][3];
        }
        Self { m }
    }

    /// Voxel-space sampling map for a target grid of shape (W, H, D): a
    /// target voxel position maps to the source voxel to read.
    pub fn to_voxel_map(&self, shape: [usize; 3]) -> VoxelMap {
        let norm_scale = |n: usize| {
            if n > 1 {
                2.0 / (n as f64 - 1.0)
            } else {
                0.0
            }
        };
        let denorm_scale = |n: usize| (n as f64 - 1.0) / 2.0;
        let mut m = [[0.0f64; 3]; 3];
        let mut t = [0.0f64; 3];
        for r in 0..3 {
            let p = denorm_scale(shape[r]);
            for c in 0..3 {
                m[r][c] = p * self.m[r][c] * norm_scale(shape[c]);
            }
            // normalized offset of voxel 0 is -1 on every axis
            let nu_const =
                self.m[r][3] - self.m[r][0] - self.m[r][1] - self.m[r][2];
            t[r] = p * (nu_const + 1.0);
        }
        VoxelMap { m, t }
    }
}

/// Warp a plain multi-channel field onto the same grid through `tau`
/// (pull-back, zero outside). Used for evaluation-time hard masks.
pub fn warp_plain(
    data: &[f32],
    channels: usize,
    shape: [usize; 3],
    tau: &AffineTransform,
    interp: Interp,
) -> Vec<f32> {
    let vox = shape[0] * shape[1] * shape[2];
    assert_eq!(data.len(), channels * vox);
    let map = tau.to_voxel_map(shape);
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        out.extend(resample::affine_resample(
            &data[c * vox..(c + 1) * vox],
            shape,
            shape,
            &map,
            interp,
            0.0,
        ));
    }
    out
}

/// Differentiable pull-back warp of `x: [1, C, D, H, W]` by the transform
/// node `tau: [12]`. Trilinear with zero padding; gradients flow into both
/// the field and the 12 transform entries.
pub fn warp_affine(g: &mut Graph, x: Var, tau: Var) -> Var {
    let xv = g.value(x).clone();
    let tv = g.value(tau).clone();
    assert_eq!(tv.len(), 12, "tau must have 12 entries");
    let (b, c, s) = xv.bcs();
    assert_eq!(b, 1, "warp_affine expects a single sample");
    let (d, h, w) = xv.dhw();
    let shape = [w, h, d];
    let transform = AffineTransform::from_flat(tv.data());
    let map = transform.to_voxel_map(shape);

    let xd = xv.data();
    let mut out = vec![0.0f32; xv.len()];
    {
        use rayon::prelude::*;
        out.par_chunks_mut(s).enumerate().for_each(|(ci, plane)| {
            let src = &xd[ci * s..(ci + 1) * s];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let p = map.apply([x as f64, y as f64, z as f64]);
                        plane[(z * h + y) * w + x] =
                            resample::sample(src, shape, p, Interp::Linear, 0.0);
                    }
                }
            }
        });
    }

    let out = Tensor::new(xv.shape().to_vec(), out);
    let xdata = xv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            let fetch = |src: &[f32], xi: isize, yi: isize, zi: isize| -> f64 {
                if xi < 0
                    || yi < 0
                    || zi < 0
                    || xi >= w as isize
                    || yi >= h as isize
                    || zi >= d as isize
                {
                    0.0
                } else {
                    src[((zi as usize * h) + yi as usize) * w + xi as usize] as f64
                }
            };
            // Gradient w.r.t. the field: scatter per channel (disjoint).
            {
                let gx = grads.accum(x);
                use rayon::prelude::*;
                gx.par_chunks_mut(s).enumerate().for_each(|(ci, gplane)| {
                    let gos = &go[ci * s..(ci + 1) * s];
                    for z in 0..d {
                        for y in 0..h {
                            for xq in 0..w {
                                let gov = gos[(z * h + y) * w + xq] as f64;
                                if gov == 0.0 {
                                    continue;
                                }
                                let p = map.apply([xq as f64, y as f64, z as f64]);
                                let x0 = p[0].floor();
                                let y0 = p[1].floor();
                                let z0 = p[2].floor();
                                let tx = p[0] - x0;
                                let ty = p[1] - y0;
                                let tz = p[2] - z0;
                                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                                        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                                            let wgt = wz * wy * wx;
                                            if wgt == 0.0 {
                                                continue;
                                            }
                                            let xi = x0 as isize + dx;
                                            let yi = y0 as isize + dy;
                                            let zi = z0 as isize + dz;
                                            if xi < 0
                                                || yi < 0
                                                || zi < 0
                                                || xi >= w as isize
                                                || yi >= h as isize
                                                || zi >= d as isize
                                            {
                                                continue;
                                            }
                                            gplane[((zi as usize * h) + yi as usize) * w
                                                + xi as usize] += (gov * wgt) as f32;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            // Gradient w.r.t. tau: 12 scalar accumulators, sequential sweep.
            let denorm = |n: usize| {
                if n > 1 {
                    (n as f64 - 1.0) / 2.0
                } else {
                    0.0
                }
            };
            let dscale = [denorm(w), denorm(h), denorm(d)];
            let norm = |v: usize, n: usize| {
                if n > 1 {
                    2.0 * v as f64 / (n as f64 - 1.0) - 1.0
                } else {
                    0.0
                }
            };
            let mut gt = [0.0f64; 12];
            for z in 0..d {
                for y in 0..h {
                    for xq in 0..w {
                        let p = map.apply([xq as f64, y as f64, z as f64]);
                        let x0 = p[0].floor();
                        let y0 = p[1].floor();
                        let z0 = p[2].floor();
                        let tx = p[0] - x0;
                        let ty = p[1] - y0;
                        let tz = p[2] - z0;
                        let (xi, yi, zi) = (x0 as isize, y0 as isize, z0 as isize);
                        let mut dvdf = [0.0f64; 3];
                        let o = (z * h + y) * w + xq;
                        for ci in 0..c {
                            let gov = go[ci * s + o] as f64;
                            if gov == 0.0 {
                                continue;
                            }
                            let src = &xdata[ci * s..(ci + 1) * s];
                            let v = |dx: isize, dy: isize, dz: isize| {
                                fetch(src, xi + dx, yi + dy, zi + dz)
                            };
                            // d value / d continuous source coordinate
                            let dx = (1.0 - tz)
                                * ((1.0 - ty) * (v(1, 0, 0) - v(0, 0, 0))
                                    + ty * (v(1, 1, 0) - v(0, 1, 0)))
                                + tz * ((1.0 - ty) * (v(1, 0, 1) - v(0, 0, 1))
                                    + ty * (v(1, 1, 1) - v(0, 1, 1)));
                            let dy = (1.0 - tz)
                                * ((1.0 - tx) * (v(0, 1, 0) - v(0, 0, 0))
                                    + tx * (v(1, 1, 0) - v(1, 0, 0)))
                                + tz * ((1.0 - tx) * (v(0, 1, 1) - v(0, 0, 1))
                                    + tx * (v(1, 1, 1) - v(1, 0, 1)));
                            let dz = (1.0 - ty)
                                * ((1.0 - tx) * (v(0, 0, 1) - v(0, 0, 0))
                                    + tx * (v(1, 0, 1) - v(1, 0, 0)))
                                + ty * ((1.0 - tx) * (v(0, 1, 1) - v(0, 1, 0))
                                    + tx * (v(1, 1, 1) - v(1, 1, 0)));
                            dvdf[0] += gov * dx;
                            dvdf[1] += gov * dy;
                            dvdf[2] += gov * dz;
                        }
                        if dvdf == [0.0; 3] {
                            continue;
                        }
                        let phat = [
                            norm(xq, w),
                            norm(y, h),
                            norm(z, d),
                            1.0,
                        ];
                        for r in 0..3 {
                            let gr = dvdf[r] * dscale[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (j, &pj) in phat.iter().enumerate() {
                                gt[r * 4 + j] += gr * pj;
                            }
                        }
                    }
                }
            }
            let gtau = grads.accum(tau);
            for i in 0..12 {
                gtau[i] += gt[i] as f32;
            }
        }),
    )
}

#[derive(Clone)]
struct AlignBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Global affine regressor: strided conv blocks, global average pooling and
/// a zero-initialized dense head, so a fresh network emits the identity.
#[derive(Clone)]
pub struct GlobalNet {
    blocks: Vec<AlignBlock>,
    fc_w: ParamId,
    fc_b: ParamId,
    leaky: f32,
    pub in_channels: usize,
}

impl GlobalNet {
    pub fn new<R: Rng>(
        params: &mut Params,
        in_channels: usize,
        cfg: &AlignConfig,
        leaky: f32,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = cin * 27;
            blocks.push(AlignBlock {
                w: params.kaiming(
                    format!("align.block{i}.w"),
                    vec![cout, cin, 3, 3, 3],
                    fan_in,
                    rng,
                ),
                b: params.zeros(format!("align.block{i}.b"), vec![cout]),
                gamma: params.ones(format!("align.block{i}.gamma"), vec![cout]),
                beta: params.zeros(format!("align.block{i}.beta"), vec![cout]),
            });
            cin = cout;
        }
        let fc_w = params.zeros("align.fc.w", vec![12, cin]);
        let fc_b = params.zeros("align.fc.b", vec![12]);
        Self {
            blocks,
            fc_w,
            fc_b,
            leaky,
            in_channels,
        }
    }

    /// Predict tau from paired base-class fields (ground-truth one-hots in
    /// training, softmax predictions in evaluation), both `[1, Cb+1, ...]`.
    pub fn predict(
        &self,
        g: &mut Graph,
        params: &Params,
        query_base: Var,
        support_base: Var,
    ) -> Var {
        let qc = g.value(query_base).bcs().1;
        let sc = g.value(support_base).bcs().1;
        assert_eq!(
            qc + sc,
            self.in_channels,
            "alignment input channel mismatch"
        );
        let mut cur = nn::concat_channels(g, &[query_base, support_base]);
        for blk in &self.blocks {
            let w = params.leaf(g, blk.w);
            let b = params.leaf(g, blk.b);
            let gamma = params.leaf(g, blk.gamma);
            let beta = params.leaf(g, blk.beta);
            cur = nn::conv3d(g, cur, w, b, Conv3dCfg::k3s2());
            cur = nn::instance_norm(g, cur, gamma, beta);
            cur = nn::leaky_relu(g, cur, self.leaky);
        }
        let pooled = nn::global_avg_pool(g, cur);
        let fw = params.leaf(g, self.fc_w);
        let fb = params.leaf(g, self.fc_b);
        let delta = nn::dense(g, pooled, fw, fb);
        let delta = nn::reshape(g, delta, vec![12]);
        let identity = g.constant(Tensor::new(
            vec![12],
            AffineTransform::identity().to_flat().to_vec(),
        ));
        nn::add(g, delta, identity)
    }

    pub fn param_count(&self, params: &Params) -> usize {
        let mut n = 0;
        for blk in &self.blocks {
            n += params.entry(blk.w).value.len()
                + params.entry(blk.b).value.len()
                + params.entry(blk.gamma).value.len()
                + params.entry(blk.beta).value.len();
        }
        n + params.entry(self.fc_w).value.len() + params.entry(self.fc_b).value.len()
    }
}
