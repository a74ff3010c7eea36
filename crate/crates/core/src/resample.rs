//! Plain (non-differentiable) affine resampling of volumes and masks,
//! shared by preprocessing, augmentation and hard-mask warping.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Affine map in voxel coordinates: an output voxel (x, y, z) reads the
/// input at `m · (x, y, z) + t`.
#[derive(Clone, Copy, Debug)]
pub struct VoxelMap {
    pub m: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl VoxelMap {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.t[r];
        }
        out
    }
}

#[inline]
fn fetch(data: &[f32], shape: [usize; 3], x: isize, y: isize, z: isize, pad: f32) -> f32 {
    let (w, h, d) = (shape[0] as isize, shape[1] as isize, shape[2] as isize);
    if x < 0 || y < 0 || z < 0 || x >= w || y >= h || z >= d {
        pad
    } else {
        data[((z * h + y) * w + x) as usize]
    }
}

/// Sample one point with zero-padding outside the field of view.
pub fn sample(data: &[f32], shape: [usize; 3], p: [f64; 3], interp: Interp, pad: f32) -> f32 {
    match interp {
        Interp::Nearest => {
            let x = p[0].round() as isize;
            let y = p[1].round() as isize;
            let z = p[2].round() as isize;
            fetch(data, shape, x, y, z, pad)
        }
        Interp::Linear => {
            let x0 = p[0].floor();
            let y0 = p[1].floor();
            let z0 = p[2].floor();
            let tx = (p[0] - x0) as f32;
            let ty = (p[1] - y0) as f32;
            let tz = (p[2] - z0) as f32;
            let (xi, yi, zi) = (x0 as isize, y0 as isize, z0 as isize);
            let mut acc = 0.0f32;
            for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                if wz == 0.0 {
                    continue;
                }
                for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                        if wx == 0.0 {
                            continue;
                        }
                        acc += wz * wy * wx * fetch(data, shape, xi + dx, yi + dy, zi + dz, pad);
                    }
                }
            }
            acc
        }
    }
}

/// Resample a full scalar field onto `out_shape` through `map`.
pub fn affine_resample(
    data: &[f32],
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    map: &VoxelMap,
    interp: Interp,
    pad: f32,
) -> Vec<f32> {
    let (w, h, d) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut out = vec![0.0f32; w * h * d];
    out.par_chunks_mut(w * h).enumerate().for_each(|(z, plane)| {
        for y in 0..h {
            for x in 0..w {
                let p = map.apply([x as f64, y as f64, z as f64]);
                plane[y * w + x] = sample(data, in_shape, p, interp, pad);
            }
        }
    });
    out
}

/// Resample a binary mask with nearest-neighbour interpolation; stays {0,1}.
pub fn affine_resample_mask(
    mask: &[u8],
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    map: &VoxelMap,
) -> Vec<u8> {
    let data: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
    affine_resample(&data, in_shape, out_shape, map, Interp::Nearest, 0.0)
        .into_iter()
        .map(|v| (v >= 0.5) as u8)
        .collect()
}
