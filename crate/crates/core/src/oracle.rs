//! Reference implementations of the local prototypical pipeline as explicit
//! nested loops. These share no code with the production modules they
//! cross-check and are only meant for small instances.

/// Window boxes (start, size) enumerated from first principles: starts step
/// by half the window size until the far edge is reached.
pub fn oracle_windows(shape: [usize; 3], alphas: [f64; 3]) -> Vec<([usize; 3], [usize; 3])> {
    let mut axis_starts: Vec<Vec<usize>> = Vec::new();
    let mut window = [0usize; 3];
    for a in 0..3 {
        let win = (alphas[a] * shape[a] as f64).round() as usize;
        window[a] = win;
        let mut starts = vec![0usize];
        if win < shape[a] {
            let step = win / 2;
            let mut s = step;
            while s + win <= shape[a] {
                starts.push(s);
                s += step;
            }
            assert_eq!(
                *starts.last().unwrap() + win,
                shape[a],
                "oracle windows do not tile axis {a}"
            );
        }
        axis_starts.push(starts);
    }
    let mut out = Vec::new();
    for &sz in &axis_starts[2] {
        for &sy in &axis_starts[1] {
            for &sx in &axis_starts[0] {
                out.push(([sx, sy, sz], window));
            }
        }
    }
    out
}

pub struct OraclePrototypes {
    /// Per window, then the global prototype last.
    pub fg: Vec<Vec<f64>>,
    pub bg: Vec<Vec<f64>>,
    pub fg_valid: Vec<bool>,
    pub bg_valid: Vec<bool>,
}

fn masked_average(
    features: &[f32],
    cf: usize,
    shape: [usize; 3],
    mask: &[f32],
    start: [usize; 3],
    size: [usize; 3],
    complement: bool,
) -> (Vec<f64>, bool) {
    let (w, h, _) = (shape[0], shape[1], shape[2]);
    let n = shape[0] * shape[1] * shape[2];
    let mut acc = vec![0.0f64; cf];
    let mut msum = 0.0f64;
    for z in start[2]..start[2] + size[2] {
        for y in start[1]..start[1] + size[1] {
            for x in start[0]..start[0] + size[0] {
                let i = (z * h + y) * w + x;
                let m = if complement {
                    1.0 - mask[i] as f64
                } else {
                    mask[i] as f64
                };
                msum += m;
                for c in 0..cf {
                    acc[c] += features[c * n + i] as f64 * m;
                }
            }
        }
    }
    if msum > 1e-6 {
        for a in &mut acc {
            *a /= msum;
        }
        (acc, true)
    } else {
        (vec![0.0; cf], false)
    }
}

pub fn oracle_prototypes(
    features: &[f32],
    cf: usize,
    shape: [usize; 3],
    mask: &[f32],
    alphas: [f64; 3],
) -> OraclePrototypes {
    let mut boxes = oracle_windows(shape, alphas);
    boxes.push(([0, 0, 0], shape)); // global last
    let mut out = OraclePrototypes {
        fg: Vec::new(),
        bg: Vec::new(),
        fg_valid: Vec::new(),
        bg_valid: Vec::new(),
    };
    for &(start, size) in &boxes {
        let (fg, fg_ok) = masked_average(features, cf, shape, mask, start, size, false);
        let (bg, bg_ok) = masked_average(features, cf, shape, mask, start, size, true);
        out.fg.push(fg);
        out.bg.push(bg);
        out.fg_valid.push(fg_ok);
        out.bg_valid.push(bg_ok);
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8))
}

/// Max cosine similarity over containing windows with the stated fallbacks.
pub fn oracle_similarity(
    query_features: &[f32],
    cf: usize,
    shape: [usize; 3],
    protos: &[Vec<f64>],
    valid: &[bool],
    alphas: [f64; 3],
) -> Vec<f32> {
    let boxes = oracle_windows(shape, alphas);
    let (w, h, d) = (shape[0], shape[1], shape[2]);
    let n = w * h * d;
    let global = boxes.len(); // prototypes carry the global entry last
    let mut out = vec![-1.0f32; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let fvec: Vec<f64> = (0..cf).map(|c| query_features[c * n + i] as f64).collect();
                let mut best = f64::NEG_INFINITY;
                let mut any = false;
                for (b, &(start, size)) in boxes.iter().enumerate() {
                    let inside = x >= start[0]
                        && x < start[0] + size[0]
                        && y >= start[1]
                        && y < start[1] + size[1]
                        && z >= start[2]
                        && z < start[2] + size[2];
                    if !inside || !valid[b] {
                        continue;
                    }
                    any = true;
                    best = best.max(cosine(&fvec, &protos[b]));
                }
                if !any {
                    if valid[global] {
                        best = cosine(&fvec, &protos[global]);
                    } else {
                        best = -1.0;
                    }
                }
                out[i] = best as f32;
            }
        }
    }
    out
}

/// exp(sim_fg) / (exp(sim_bg) + exp(sim_fg)) per voxel.
pub fn oracle_probability(sim_fg: &[f32], sim_bg: &[f32]) -> Vec<f32> {
    sim_fg
        .iter()
        .zip(sim_bg)
        .map(|(&f, &b)| {
            let ef = (f as f64).exp();
            let eb = (b as f64).exp();
            (ef / (ef + eb)) as f32
        })
        .collect()
}
