//! Support mask conditioning: a two-layer convolutional head consuming the
//! foreground/background similarity maps and the aligned support mask.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{self, Conv3dCfg, ParamId, Params};

#[derive(Clone)]
pub struct ConditioningHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ConditioningHead {
    pub fn new<R: Rng>(params: &mut Params, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: params.kaiming("cond.conv1.w", vec![hidden, 3, 3, 3, 3], 3 * 27, rng),
            b1: params.zeros("cond.conv1.b", vec![hidden]),
            w2: params.kaiming("cond.conv2.w", vec![2, hidden, 3, 3, 3], hidden * 27, rng),
            b2: params.zeros("cond.conv2.b", vec![2]),
        }
    }

    /// Final (background, foreground) probabilities from the stacked
    /// [sim_c, sim_0, aligned support mask] channels.
    pub fn condition(
        &self,
        g: &mut Graph,
        params: &Params,
        sim_fg: Var,
        sim_bg: Var,
        aligned_mask: Var,
    ) -> Var {
        for v in [sim_fg, sim_bg, aligned_mask] {
            assert_eq!(g.value(v).bcs().1, 1, "conditioning inputs are 1-channel");
        }
        let input = nn::concat_channels(g, &[sim_fg, sim_bg, aligned_mask]);
        let w1 = params.leaf(g, self.w1);
        let b1 = params.leaf(g, self.b1);
        let hidden = nn::conv3d(g, input, w1, b1, Conv3dCfg::k3());
        let hidden = nn::relu(g, hidden);
        let w2 = params.leaf(g, self.w2);
        let b2 = params.leaf(g, self.b2);
        let logits = nn::conv3d(g, hidden, w2, b2, Conv3dCfg::k3());
        nn::softmax_channels(g, logits)
    }

    pub fn param_count(&self, params: &Params) -> usize {
        [self.w1, self.b1, self.w2, self.b2]
            .iter()
            .map(|&id| params.entry(id).value.len())
            .sum()
    }
}
