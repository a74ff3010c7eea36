//! Evaluation metrics: binary Dice score and the 95th-percentile symmetric
//! surface distance (HD95) in physical millimetres.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// 2|a∩b| / (|a|+|b|). Both masks empty scores 1 (absence predicted
/// correctly); the caller records that convention in reports.
pub fn dice_score(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "dice_score: length mismatch");
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let x = (x != 0) as usize;
        let y = (y != 0) as usize;
        inter += x & y;
        na += x;
        nb += y;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Surface voxels: foreground with at least one 6-neighbour that is
/// background or outside the grid. Returned as (x, y, z) triples.
fn surface_voxels(mask: &[u8], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let (w, h, d) = (shape[0], shape[1], shape[2]);
    let idx = |x: usize, y: usize, z: usize| (z * h + y) * w + x;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[idx(x, y, z)] == 0 {
                    continue;
                }
                let boundary = x == 0
                    || mask[idx(x - 1, y, z)] == 0
                    || x + 1 == w
                    || mask[idx(x + 1, y, z)] == 0
                    || y == 0
                    || mask[idx(x, y - 1, z)] == 0
                    || y + 1 == h
                    || mask[idx(x, y + 1, z)] == 0
                    || z == 0
                    || mask[idx(x, y, z - 1)] == 0
                    || z + 1 == d
                    || mask[idx(x, y, z + 1)] == 0;
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.par_iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in to {
                let dx = (a[0] as f64 - b[0] as f64) * spacing[0];
                let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
                let dz = (a[2] as f64 - b[2] as f64) * spacing[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < values.len() {
        values[lo] * (1.0 - frac) + values[lo + 1] * frac
    } else {
        values[lo]
    }
}

/// 95th percentile of the pooled symmetric surface distances between two
/// binary masks, in millimetres. Errs when either mask is empty; callers
/// report those episodes as missing values.
pub fn hausdorff95(a: &[u8], b: &[u8], shape: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), shape[0] * shape[1] * shape[2]);
    let sa = surface_voxels(a, shape);
    let sb = surface_voxels(b, shape);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::MetricUndefined(
            "hausdorff95 needs two non-empty masks".into(),
        ));
    }
    let mut pooled = directed_distances(&sa, &sb, spacing);
    pooled.extend(directed_distances(&sb, &sa, spacing));
    Ok(percentile(&mut pooled, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_cases() {
        let a = vec![1u8, 1, 0, 0];
        assert_eq!(dice_score(&a, &a), 1.0);
        let b = vec![0u8, 0, 1, 1];
        assert_eq!(dice_score(&a, &b), 0.0);
        // |a|=|b|=2, overlap 1 -> 0.5
        let c = vec![0u8, 1, 1, 0];
        assert_eq!(dice_score(&a, &c), 0.5);
        // both empty -> 1 by convention
        let e = vec![0u8; 4];
        assert_eq!(dice_score(&e, &e), 1.0);
    }

    #[test]
    fn hd95_of_identical_masks_is_zero() {
        let mut a = vec![0u8; 4 * 4 * 4];
        a[21] = 1;
        a[22] = 1;
        let d = hausdorff95(&a, &a, [4, 4, 4], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn hd95_two_voxels_four_apart_at_075mm_is_3mm() {
        let shape = [8, 3, 3];
        let mut a = vec![0u8; 72];
        let mut b = vec![0u8; 72];
        let idx = |x: usize, y: usize, z: usize| (z * 3 + y) * 8 + x;
        a[idx(1, 1, 1)] = 1;
        b[idx(5, 1, 1)] = 1;
        let d = hausdorff95(&a, &b, shape, [0.75, 0.75, 2.5]).unwrap();
        assert!((d - 3.0).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn hd95_is_symmetric() {
        let shape = [6, 6, 3];
        let mut a = vec![0u8; 108];
        let mut b = vec![0u8; 108];
        for i in [10usize, 11, 17, 40] {
            a[i] = 1;
        }
        for i in [50usize, 51, 80] {
            b[i] = 1;
        }
        let d1 = hausdorff95(&a, &b, shape, [1.0, 1.0, 2.0]).unwrap();
        let d2 = hausdorff95(&b, &a, shape, [1.0, 1.0, 2.0]).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn empty_mask_reports_an_error() {
        let a = vec![0u8; 27];
        let mut b = vec![0u8; 27];
        b[13] = 1;
        assert!(hausdorff95(&a, &b, [3, 3, 3], [1.0; 3]).is_err());
    }

    #[test]
    fn dice_score_complements_the_foreground_loss_term() {
        // dice_score equals the foreground term of 1 - dice_loss_binary on
        // binary inputs (up to the epsilon guard).
        use crate::config::LossConvention;
        use crate::graph::{Graph, Tensor};
        use crate::losses::soft_dice_loss;
        let a = vec![1u8, 1, 0, 0, 1, 0];
        let b = vec![1u8, 0, 0, 1, 1, 0];
        let score = dice_score(&a, &b);
        let pred: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let target: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 1, 6], pred));
        let loss = soft_dice_loss(&mut g, p, &target, LossConvention::Mean);
        let fg_term = 1.0 - g.value(loss).data()[0] as f64;
        assert!((score - fg_term).abs() < 1e-4, "{score} vs {fg_term}");
    }
}
