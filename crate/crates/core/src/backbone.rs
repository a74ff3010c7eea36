//! Shared feature extractor (3D encoder-decoder with skip connections) and
//! the base-class segmentation head.

use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Conv3dCfg, ParamId, Params};

#[derive(Clone)]
struct ConvUnit {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvUnit {
    fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.kaiming(format!("{name}.w"), vec![cout, cin, 3, 3, 3], cin * 27, rng),
            b: params.zeros(format!("{name}.b"), vec![cout]),
            gamma: params.ones(format!("{name}.gamma"), vec![cout]),
            beta: params.zeros(format!("{name}.beta"), vec![cout]),
        }
    }

    fn apply(&self, g: &mut Graph, params: &Params, x: Var, slope: f32) -> Var {
        let w = params.leaf(g, self.w);
        let b = params.leaf(g, self.b);
        let gamma = params.leaf(g, self.gamma);
        let beta = params.leaf(g, self.beta);
        let y = nn::conv3d(g, x, w, b, Conv3dCfg::k3());
        let y = nn::instance_norm(g, y, gamma, beta);
        nn::leaky_relu(g, y, slope)
    }
}

#[derive(Clone)]
struct Level {
    conv1: ConvUnit,
    conv2: ConvUnit,
}

/// UNet-style feature extractor: per level two 3x3x3 conv units, 2x max
/// pooling between encoder levels, trilinear upsampling plus skip
/// concatenation on the way up, and a final feature projection to Cf
/// channels at full resolution.
#[derive(Clone)]
pub struct Unet {
    enc: Vec<Level>,
    dec: Vec<Level>,
    feat_w: ParamId,
    feat_b: ParamId,
    cfg: BackboneConfig,
}

impl Unet {
    pub fn new<R: Rng>(params: &mut Params, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let chans = &cfg.channels;
        let mut enc = Vec::new();
        let mut cin = 1usize;
        for (i, &c) in chans.iter().enumerate() {
            enc.push(Level {
                conv1: ConvUnit::new(params, &format!("unet.enc{i}.conv1"), cin, c, rng),
                conv2: ConvUnit::new(params, &format!("unet.enc{i}.conv2"), c, c, rng),
            });
            cin = c;
        }
        let mut dec = Vec::new();
        for i in (0..chans.len().saturating_sub(1)).rev() {
            let cat = chans[i + 1] + chans[i];
            dec.push(Level {
                conv1: ConvUnit::new(params, &format!("unet.dec{i}.conv1"), cat, chans[i], rng),
                conv2: ConvUnit::new(
                    params,
                    &format!("unet.dec{i}.conv2"),
                    chans[i],
                    chans[i],
                    rng,
                ),
            });
        }
        let feat_w = params.kaiming(
            "unet.feat.w",
            vec![cfg.features, chans[0], 3, 3, 3],
            chans[0] * 27,
            rng,
        );
        let feat_b = params.zeros("unet.feat.b", vec![cfg.features]);
        Self {
            enc,
            dec,
            feat_w,
            feat_b,
            cfg: cfg.clone(),
        }
    }

    /// Full-resolution feature grid `[B, Cf, D, H, W]` for a standardized
    /// batch of volumes `[B, 1, D, H, W]`.
    pub fn extract_features(&self, g: &mut Graph, params: &Params, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 5, "expected [B, 1, D, H, W]");
        let f = self.cfg.downsample_factor();
        for &dim in &shape[2..] {
            if dim % f != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "input spatial dim {dim} not divisible by encoder factor {f}"
                )));
            }
        }
        let slope = self.cfg.leaky_slope;
        let mut skips = Vec::new();
        let mut cur = x;
        for (i, level) in self.enc.iter().enumerate() {
            if i > 0 {
                cur = nn::max_pool2(g, cur);
            }
            cur = level.conv1.apply(g, params, cur, slope);
            cur = level.conv2.apply(g, params, cur, slope);
            skips.push(cur);
        }
        for (j, level) in self.dec.iter().enumerate() {
            let skip = skips[self.enc.len() - 2 - j];
            cur = nn::upsample_trilinear2(g, cur);
            cur = nn::concat_channels(g, &[cur, skip]);
            cur = level.conv1.apply(g, params, cur, slope);
            cur = level.conv2.apply(g, params, cur, slope);
        }
        let w = params.leaf(g, self.feat_w);
        let b = params.leaf(g, self.feat_b);
        Ok(nn::conv3d(g, cur, w, b, Conv3dCfg::k3()))
    }

    pub fn feature_channels(&self) -> usize {
        self.cfg.features
    }

    pub fn param_count(&self, params: &Params) -> usize {
        let unit = |u: &ConvUnit| {
            params.entry(u.w).value.len()
                + params.entry(u.b).value.len()
                + params.entry(u.gamma).value.len()
                + params.entry(u.beta).value.len()
        };
        let mut n = 0;
        for l in self.enc.iter().chain(&self.dec) {
            n += unit(&l.conv1) + unit(&l.conv2);
        }
        n + params.entry(self.feat_w).value.len() + params.entry(self.feat_b).value.len()
    }
}

/// Single 1x1x1 convolution from features to |C_base|+1 channel softmax.
#[derive(Clone)]
pub struct SegHead {
    w: ParamId,
    b: ParamId,
    pub classes_with_bg: usize,
}

impl SegHead {
    pub fn new<R: Rng>(
        params: &mut Params,
        features: usize,
        classes_with_bg: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.kaiming(
                "seghead.w",
                vec![classes_with_bg, features, 1, 1, 1],
                features,
                rng,
            ),
            b: params.zeros("seghead.b", vec![classes_with_bg]),
            classes_with_bg,
        }
    }

    /// Per-voxel class probabilities `[B, Cb+1, D, H, W]` (channel 0 = bg).
    pub fn segment(&self, g: &mut Graph, params: &Params, features: Var) -> Var {
        let w = params.leaf(g, self.w);
        let b = params.leaf(g, self.b);
        let logits = nn::conv3d(g, features, w, b, Conv3dCfg::k1());
        nn::softmax_channels(g, logits)
    }

    pub fn param_count(&self, params: &Params) -> usize {
        params.entry(self.w).value.len() + params.entry(self.b).value.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: vec![4, 8],
            features: 6,
            leaky_slope: 0.01,
        }
    }

    #[test]
    fn features_keep_full_resolution_and_channel_count() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Unet::new(&mut params, &tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 1, 4, 8, 8]));
        let f = net.extract_features(&mut g, &params, x).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 6, 4, 8, 8]);
    }

    #[test]
    fn indivisible_shapes_are_rejected() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Unet::new(&mut params, &tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 3, 8, 8]));
        assert!(net.extract_features(&mut g, &params, x).is_err());
    }

    #[test]
    fn zeroed_network_emits_zero_features() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Unet::new(&mut params, &tiny_cfg(), &mut rng);
        for e in params.entries_mut() {
            let v = std::sync::Arc::make_mut(&mut e.value);
            // zero weights and biases; gammas stay zero too for this check
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![1, 1, 4, 4, 4],
            (0..64).map(|i| i as f32).collect(),
        ));
        let f = net.extract_features(&mut g, &params, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_head_is_uniform_over_classes() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = SegHead::new(&mut params, 6, 7, &mut rng);
        for e in params.entries_mut() {
            std::sync::Arc::make_mut(&mut e.value)
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(
            vec![1, 6, 1, 2, 2],
            (0..24).map(|i| i as f32 * 0.1).collect(),
        ));
        let p = head.segment(&mut g, &params, f);
        assert_eq!(g.value(p).shape(), &[1, 7, 1, 2, 2]);
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_probabilities_sum_to_one() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = SegHead::new(&mut params, 3, 4, &mut rng);
        let mut g = Graph::new();
        let data: Vec<f32> = (0..3 * 8).map(|i| ((i * 37) % 11) as f32 * 0.3 - 1.0).collect();
        let f = g.constant(Tensor::new(vec![1, 3, 2, 2, 2], data));
        let p = head.segment(&mut g, &params, f);
        let d = g.value(p).data();
        for v in 0..8 {
            let total: f32 = (0..4).map(|c| d[c * 8 + v]).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn default_configuration_parameter_count_is_near_budget() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Unet::new(&mut params, &BackboneConfig::default(), &mut rng);
        let n = net.param_count(&params);
        assert!(
            (4_275_000..=7_125_000).contains(&n),
            "default backbone has {n} parameters"
        );
    }

    #[test]
    fn every_parameter_receives_gradient_from_a_feature_loss() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Unet::new(&mut params, &tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let data: Vec<f32> = (0..64).map(|i| (i as f32 * 0.17).sin()).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 4, 4], data));
        let f = net.extract_features(&mut g, &params, x).unwrap();
        let f2 = nn::mul(&mut g, f, f);
        let loss = nn::sum_all(&mut g, f2);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), params.len(), "some parameter got no gradient");
        let nonzero = pg
            .iter()
            .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero, params.len(), "some parameter gradient is all-zero");
    }
}
