//! Local prototypical comparison: overlapping window layout, masked-average
//! prototypes per window (plus the global fallback), max-over-window cosine
//! similarity maps, and the two-way softmax probability map.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn;

/// Mask weight below which a window prototype is considered undefined.
pub const VALIDITY_EPS: f64 = 1e-6;
/// Norm floor for cosine similarity operands.
pub const NORM_FLOOR: f64 = 1e-8;

/// Overlapping axis-aligned windows tiling a (W, H, D) grid. Window centres
/// are spaced by half the window size along each axis; an axis whose window
/// spans the whole grid contributes a single window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub shape: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub counts: [usize; 3],
}

/// Build the window layout for size fractions `alphas` = (a_w, a_h, a_d).
/// Fails when the fractions do not tile the grid exactly.
pub fn build_windows(shape: [usize; 3], alphas: [f64; 3]) -> Result<WindowGrid> {
    let mut window = [0usize; 3];
    let mut stride = [0usize; 3];
    let mut counts = [0usize; 3];
    for a in 0..3 {
        let dim = shape[a];
        if dim == 0 {
            return Err(Error::NonTilingWindows("zero-sized grid axis".into()));
        }
        let wf = alphas[a] * dim as f64;
        let w = wf.round() as usize;
        if (wf - w as f64).abs() > 1e-9 || w == 0 || w > dim {
            return Err(Error::NonTilingWindows(format!(
                "axis {a}: alpha {} times {dim} is not an integral window size",
                alphas[a]
            )));
        }
        if w == dim {
            window[a] = w;
            stride[a] = w; // unused; a single window covers the axis
            counts[a] = 1;
            continue;
        }
        if w % 2 != 0 {
            return Err(Error::NonTilingWindows(format!(
                "axis {a}: window {w} has no half-size stride"
            )));
        }
        let s = w / 2;
        if (dim - w) % s != 0 {
            return Err(Error::NonTilingWindows(format!(
                "axis {a}: ({dim} - {w}) not divisible by stride {s}"
            )));
        }
        window[a] = w;
        stride[a] = s;
        counts[a] = (dim - w) / s + 1;
    }
    Ok(WindowGrid {
        shape,
        window,
        stride,
        counts,
    })
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    /// Start corner (x, y, z) of window `idx`.
    pub fn window_start(&self, idx: usize) -> [usize; 3] {
        let kx = idx % self.counts[0];
        let ky = (idx / self.counts[0]) % self.counts[1];
        let kz = idx / (self.counts[0] * self.counts[1]);
        [
            kx * self.stride[0],
            ky * self.stride[1],
            kz * self.stride[2],
        ]
    }

    /// Inclusive window-index range along `axis` containing coordinate `pos`.
    fn axis_range(&self, axis: usize, pos: usize) -> (usize, usize) {
        if self.counts[axis] == 1 {
            return (0, 0);
        }
        let s = self.stride[axis];
        let w = self.window[axis];
        let hi = (pos / s).min(self.counts[axis] - 1);
        let lo = if pos + 1 > w { (pos + 1 - w).div_ceil(s) } else { 0 };
        (lo, hi)
    }

    /// Indices of all windows containing voxel (x, y, z).
    pub fn memberships(&self, x: usize, y: usize, z: usize) -> Vec<usize> {
        let (x0, x1) = self.axis_range(0, x);
        let (y0, y1) = self.axis_range(1, y);
        let (z0, z1) = self.axis_range(2, z);
        let mut out = Vec::with_capacity(8);
        for kz in z0..=z1 {
            for ky in y0..=y1 {
                for kx in x0..=x1 {
                    out.push((kz * self.counts[1] + ky) * self.counts[0] + kx);
                }
            }
        }
        out
    }
}

/// Per-window foreground/background prototypes (rows 0..G) plus the global
/// prototype (row G), with validity flags for empty windows.
pub struct PrototypeSet {
    /// `[G+1, Cf]` masked averages under the class mask.
    pub fg: Var,
    /// `[G+1, Cf]` masked averages under the complement mask.
    pub bg: Var,
    pub fg_valid: Arc<Vec<bool>>,
    pub bg_valid: Arc<Vec<bool>>,
}

/// Masked average of `features` over each window (and globally, as the last
/// row). Differentiable in both the features and the (possibly soft) mask.
pub fn masked_window_average(
    g: &mut Graph,
    features: Var,
    mask: Var,
    windows: &WindowGrid,
) -> (Var, Arc<Vec<bool>>) {
    let fv = g.value(features).clone();
    let mv = g.value(mask).clone();
    let (b, cf, s) = fv.bcs();
    assert_eq!(b, 1, "prototypes are computed per sample");
    let (d, h, w) = fv.dhw();
    assert_eq!([w, h, d], windows.shape, "feature grid vs window shape");
    assert_eq!(mv.len(), s, "mask must be single channel on the same grid");
    let n_windows = windows.num_windows();
    let rows = n_windows + 1;

    let fd = fv.data();
    let md = mv.data();
    let mut protos = vec![0.0f32; rows * cf];
    let mut sums = vec![0.0f64; rows];
    let mut valid = vec![false; rows];

    let boxes: Vec<([usize; 3], [usize; 3])> = (0..n_windows)
        .map(|i| (windows.window_start(i), windows.window))
        .chain(std::iter::once(([0, 0, 0], windows.shape)))
        .collect();

    let results: Vec<(f64, Vec<f64>)> = boxes
        .par_iter()
        .map(|&(start, size)| {
            let mut msum = 0.0f64;
            let mut acc = vec![0.0f64; cf];
            for z in start[2]..start[2] + size[2] {
                for y in start[1]..start[1] + size[1] {
                    let row = (z * h + y) * w + start[0];
                    for i in row..row + size[0] {
                        let m = md[i] as f64;
                        if m != 0.0 {
                            msum += m;
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += fd[c * s + i] as f64 * m;
                            }
                        }
                    }
                }
            }
            (msum, acc)
        })
        .collect();

    for (r, (msum, acc)) in results.into_iter().enumerate() {
        sums[r] = msum;
        if msum > VALIDITY_EPS {
            valid[r] = true;
            for c in 0..cf {
                protos[r * cf + c] = (acc[c] / msum) as f32;
            }
        }
    }

    let out = Tensor::new(vec![rows, cf], protos);
    let proto_arc = out.data_arc();
    let fdata = fv.data_arc();
    let mdata = mv.data_arc();
    let valid = Arc::new(valid);
    let valid_back = Arc::clone(&valid);
    let windows_back = windows.clone();
    let var = g.push_op(
        out,
        Box::new(move |go, grads| {
            let boxes: Vec<([usize; 3], [usize; 3])> = (0..n_windows)
                .map(|i| (windows_back.window_start(i), windows_back.window))
                .chain(std::iter::once(([0, 0, 0], windows_back.shape)))
                .collect();
            // Window regions overlap, so scatter serially in window order.
            {
                let gf = grads.accum(features);
                for (r, &(start, size)) in boxes.iter().enumerate() {
                    if !valid_back[r] {
                        continue;
                    }
                    let inv = 1.0 / sums[r];
                    for z in start[2]..start[2] + size[2] {
                        for y in start[1]..start[1] + size[1] {
                            let row = (z * h + y) * w + start[0];
                            for i in row..row + size[0] {
                                let m = mdata[i] as f64;
                                if m == 0.0 {
                                    continue;
                                }
                                for c in 0..cf {
                                    gf[c * s + i] +=
                                        (go[r * cf + c] as f64 * m * inv) as f32;
                                }
                            }
                        }
                    }
                }
            }
            let gm = grads.accum(mask);
            for (r, &(start, size)) in boxes.iter().enumerate() {
                if !valid_back[r] {
                    continue;
                }
                let inv = 1.0 / sums[r];
                for z in start[2]..start[2] + size[2] {
                    for y in start[1]..start[1] + size[1] {
                        let row = (z * h + y) * w + start[0];
                        for i in row..row + size[0] {
                            let mut acc = 0.0f64;
                            for c in 0..cf {
                                acc += go[r * cf + c] as f64
                                    * (fdata[c * s + i] as f64 - proto_arc[r * cf + c] as f64);
                            }
                            gm[i] += (acc * inv) as f32;
                        }
                    }
                }
            }
        }),
    );
    (var, valid)
}

/// Foreground and background prototype sets from an aligned support feature
/// grid and its (soft) class mask.
pub fn compute_prototypes(
    g: &mut Graph,
    support_features: Var,
    support_mask: Var,
    windows: &WindowGrid,
) -> PrototypeSet {
    let inv_mask = nn::affine_map(g, support_mask, -1.0, 1.0);
    let (fg, fg_valid) = masked_window_average(g, support_features, support_mask, windows);
    let (bg, bg_valid) = masked_window_average(g, support_features, inv_mask, windows);
    PrototypeSet {
        fg,
        bg,
        fg_valid,
        bg_valid,
    }
}

/// Per-voxel max cosine similarity against the valid member-window
/// prototypes, falling back to the global prototype (last row) when no
/// member window is valid, and to -1 when the global is invalid too.
pub fn window_max_similarity(
    g: &mut Graph,
    query_features: Var,
    protos: Var,
    valid: &Arc<Vec<bool>>,
    windows: &WindowGrid,
) -> Var {
    let fv = g.value(query_features).clone();
    let pv = g.value(protos).clone();
    let (b, cf, s) = fv.bcs();
    assert_eq!(b, 1);
    let (d, h, w) = fv.dhw();
    assert_eq!([w, h, d], windows.shape);
    let rows = pv.shape()[0];
    assert_eq!(rows, windows.num_windows() + 1);
    assert_eq!(pv.shape()[1], cf, "feature channel count mismatch");

    let fd = fv.data();
    let pd = pv.data();
    let valid_fw = Arc::clone(valid);

    let pnorm: Vec<f64> = (0..rows)
        .map(|r| {
            let mut acc = 0.0f64;
            for c in 0..cf {
                acc += (pd[r * cf + c] as f64).powi(2);
            }
            acc.sqrt()
        })
        .collect();

    const NONE: u32 = u32::MAX;
    let mut sim = vec![-1.0f32; s];
    let mut chosen = vec![NONE; s];
    let global = rows - 1;
    {
        let pnorm = &pnorm;
        let valid = &valid_fw;
        sim.par_chunks_mut(w * h)
            .zip(chosen.par_chunks_mut(w * h))
            .enumerate()
            .for_each(|(z, (sim_plane, chosen_plane))| {
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let vox = (z * h + y) * w + x;
                        let mut fnorm = 0.0f64;
                        for c in 0..cf {
                            fnorm += (fd[c * s + vox] as f64).powi(2);
                        }
                        let fnorm = fnorm.sqrt().max(NORM_FLOOR);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_r = NONE;
                        let mut any = false;
                        for r in windows.memberships(x, y, z) {
                            if !valid[r] {
                                continue;
                            }
                            any = true;
                            let mut dot = 0.0f64;
                            for c in 0..cf {
                                dot += fd[c * s + vox] as f64 * pd[r * cf + c] as f64;
                            }
                            let cosv = dot / (fnorm * pnorm[r].max(NORM_FLOOR));
                            if cosv > best {
                                best = cosv;
                                best_r = r as u32;
                            }
                        }
                        if !any {
                            if valid[global] {
                                let mut dot = 0.0f64;
                                for c in 0..cf {
                                    dot += fd[c * s + vox] as f64 * pd[global * cf + c] as f64;
                                }
                                best = dot / (fnorm * pnorm[global].max(NORM_FLOOR));
                                best_r = global as u32;
                            } else {
                                best = -1.0;
                                best_r = NONE;
                            }
                        }
                        sim_plane[i] = best as f32;
                        chosen_plane[i] = best_r;
                    }
                }
            });
    }

    let out = Tensor::new(vec![1, 1, d, h, w], sim);
    let sim_arc = out.data_arc();
    let fdata = fv.data_arc();
    let pdata = pv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            // Prototype rows are shared across voxels; accumulate serially.
            let mut gp = vec![0.0f64; rows * cf];
            {
                let gf = grads.accum(query_features);
                for vox in 0..s {
                    let r = chosen[vox];
                    if r == NONE {
                        continue;
                    }
                    let r = r as usize;
                    let gov = go[vox] as f64;
                    if gov == 0.0 {
                        continue;
                    }
                    let mut fnorm2 = 0.0f64;
                    for c in 0..cf {
                        fnorm2 += (fdata[c * s + vox] as f64).powi(2);
                    }
                    let fnorm_raw = fnorm2.sqrt();
                    let fnorm = fnorm_raw.max(NORM_FLOOR);
                    let pn = pnorm[r].max(NORM_FLOOR);
                    let cosv = sim_arc[vox] as f64;
                    let denom = fnorm * pn;
                    for c in 0..cf {
                        let fc = fdata[c * s + vox] as f64;
                        let pc = pdata[r * cf + c] as f64;
                        // d cos / d f_c; the norm term vanishes when the
                        // floor clamps the norm.
                        let mut dfc = pc / denom;
                        if fnorm_raw > NORM_FLOOR {
                            dfc -= cosv * fc / (fnorm * fnorm);
                        }
                        gf[c * s + vox] += (gov * dfc) as f32;
                        let mut dpc = fc / denom;
                        if pnorm[r] > NORM_FLOOR {
                            dpc -= cosv * pc / (pn * pn);
                        }
                        gp[r * cf + c] += gov * dpc;
                    }
                }
            }
            let gpr = grads.accum(protos);
            for (dst, src) in gpr.iter_mut().zip(&gp) {
                *dst += *src as f32;
            }
        }),
    )
}

/// Two-way softmax of (background, foreground) similarities:
/// channel 1 = exp(sim_c) / (exp(sim_0) + exp(sim_c)), channel 0 complement.
pub fn probability_map(g: &mut Graph, sim_fg: Var, sim_bg: Var) -> Var {
    let pair = nn::concat_channels(g, &[sim_bg, sim_fg]);
    nn::softmax_channels(g, pair)
}
