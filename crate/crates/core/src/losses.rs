//! Soft Dice training losses (binary few-shot, multi-class segmentation and
//! alignment) and the per-episode loss report.

use crate::config::LossConvention;
use crate::graph::{Graph, Tensor, Var};

/// Guard added to every Dice denominator (empty classes occur in crops).
pub const DICE_EPS: f64 = 1e-5;

/// Soft Dice loss between a predicted per-class probability field
/// `pred: [1, C, ...]` and a plain target field of the same layout:
/// `1 - agg_c( 2 Σ p·t / (Σ p² + Σ t² + ε) )` with `agg` a mean (default)
/// or plain sum over classes.
pub fn soft_dice_loss(
    g: &mut Graph,
    pred: Var,
    target: &[f32],
    convention: LossConvention,
) -> Var {
    let pv = g.value(pred).clone();
    let (b, c, s) = pv.bcs();
    assert_eq!(b, 1, "soft_dice_loss expects a single sample");
    assert_eq!(
        target.len(),
        c * s,
        "target length {} does not match prediction {}x{}",
        target.len(),
        c,
        s
    );
    let pd = pv.data();
    let mut numer = vec![0.0f64; c];
    let mut denom = vec![0.0f64; c];
    for ci in 0..c {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..s {
            let p = pd[ci * s + i] as f64;
            let t = target[ci * s + i] as f64;
            num += p * t;
            den += p * p + t * t;
        }
        numer[ci] = 2.0 * num;
        denom[ci] = den + DICE_EPS;
    }
    let weight = match convention {
        LossConvention::Mean => 1.0 / c as f64,
        LossConvention::Sum => 1.0,
    };
    let mut loss = 1.0f64;
    for ci in 0..c {
        loss -= weight * numer[ci] / denom[ci];
    }

    let target: Vec<f32> = target.to_vec();
    let pdata = pv.data_arc();
    g.push_op(
        Tensor::scalar(loss as f32),
        Box::new(move |go, grads| {
            let gov = go[0] as f64;
            let gp = grads.accum(pred);
            for ci in 0..c {
                let n = numer[ci];
                let d = denom[ci];
                for i in 0..s {
                    let p = pdata[ci * s + i] as f64;
                    let t = target[ci * s + i] as f64;
                    // d/dp of -w * n/d with n = 2Σpt, d = Σp²+Σt²+ε
                    let grad = -weight * (2.0 * t * d - n * 2.0 * p) / (d * d);
                    gp[ci * s + i] += (gov * grad) as f32;
                }
            }
        }),
    )
}

/// Binary few-shot Dice loss over the (background, foreground) channels of
/// `pred: [1, 2, ...]` against a foreground mask.
pub fn dice_loss_binary(
    g: &mut Graph,
    pred: Var,
    fg_target: &[f32],
    convention: LossConvention,
) -> Var {
    let (b, c, s) = g.value(pred).bcs();
    assert_eq!((b, c), (1, 2), "dice_loss_binary expects [1, 2, ...]");
    assert_eq!(fg_target.len(), s);
    let mut target = vec![0.0f32; 2 * s];
    for i in 0..s {
        target[i] = 1.0 - fg_target[i];
        target[s + i] = fg_target[i];
    }
    soft_dice_loss(g, pred, &target, convention)
}

/// Multi-class Dice loss against a one-hot target with matching channels.
pub fn dice_loss_multiclass(
    g: &mut Graph,
    pred: Var,
    one_hot_target: &[f32],
    convention: LossConvention,
) -> Var {
    soft_dice_loss(g, pred, one_hot_target, convention)
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub fewshot: f64,
    pub base_seg: f64,
    pub align: f64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.fewshot + self.base_seg + self.align
    }

    pub fn is_finite(&self) -> bool {
        self.fewshot.is_finite() && self.base_seg.is_finite() && self.align.is_finite()
    }
}
