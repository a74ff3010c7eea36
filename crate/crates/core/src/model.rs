//! Episode-level model: wires the feature extractor, the registration
//! mechanism and the conditioning head according to the configured variant,
//! for both the training loss path and one-shot/K-shot inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{SegHead, Unet};
use crate::conditioning::ConditioningHead;
use crate::config::{RunConfig, Variant};
use crate::error::Result;
use crate::graph::{Graph, Tensor, Var};
use crate::losses::{dice_loss_binary, dice_loss_multiclass, LossReport};
use crate::nn::{self, Params};
use crate::proto::{self, WindowGrid};
use crate::registration::{warp_affine, AffineTransform, GlobalNet};
use crate::volume::{LabelMap, Volume};

/// One episode converted to network-ready fields on the standardized grid.
pub struct EpisodeTensors {
    /// (W, H, D) of the grid.
    pub shape: [usize; 3],
    pub query_image: Vec<f32>,
    pub support_image: Vec<f32>,
    /// Query mask of the episode class (the training/eval target).
    pub query_fg: Vec<f32>,
    /// Support mask of the episode class.
    pub support_fg: Vec<f32>,
    /// `[Cb+1, N]` one-hot of base classes, channel 0 = background.
    pub query_base: Vec<f32>,
    pub support_base: Vec<f32>,
}

pub fn mask_to_field(mask: &[u8]) -> Vec<f32> {
    mask.iter().map(|&v| (v != 0) as u8 as f32).collect()
}

/// One-hot (plus background channel 0) of the base classes in catalog order.
pub fn base_one_hot(labels: &LabelMap, base_classes: &[String]) -> Vec<f32> {
    let n = labels.shape[0] * labels.shape[1] * labels.shape[2];
    let c = base_classes.len() + 1;
    let mut out = vec![0.0f32; c * n];
    for i in 0..n {
        out[i] = 1.0;
    }
    for (k, class) in base_classes.iter().enumerate() {
        if let Some(mask) = labels.mask(class) {
            for i in 0..n {
                if mask[i] != 0 {
                    out[(k + 1) * n + i] = 1.0;
                    out[i] = 0.0;
                }
            }
        }
    }
    out
}

impl EpisodeTensors {
    pub fn new(
        query: &(Volume, LabelMap),
        support: &(Volume, LabelMap),
        class_name: &str,
        base_classes: &[String],
    ) -> Self {
        let shape = query.0.shape;
        Self {
            shape,
            query_image: query.0.data.clone(),
            support_image: support.0.data.clone(),
            query_fg: mask_to_field(query.1.mask(class_name).expect("query class mask")),
            support_fg: mask_to_field(support.1.mask(class_name).expect("support class mask")),
            query_base: base_one_hot(&query.1, base_classes),
            support_base: base_one_hot(&support.1, base_classes),
        }
    }

    fn image_tensor(&self, data: &[f32]) -> Tensor {
        let [w, h, d] = self.shape;
        Tensor::new(vec![1, 1, d, h, w], data.to_vec())
    }

    fn field_tensor(&self, data: &[f32], channels: usize) -> Tensor {
        let [w, h, d] = self.shape;
        Tensor::new(vec![1, channels, d, h, w], data.to_vec())
    }
}

/// Result of one forward pass.
pub struct EpisodeForward {
    /// `[1, 2, D, H, W]` final (background, foreground) probabilities.
    pub prediction: Var,
    /// Transform applied to the support (identity when registration is off).
    pub tau: AffineTransform,
    /// Total loss node (training mode only).
    pub loss: Option<Var>,
    pub report: LossReport,
}

#[derive(Clone)]
pub struct FewShotModel {
    pub params: Params,
    pub unet: Unet,
    pub seg_head: Option<SegHead>,
    pub align: Option<GlobalNet>,
    pub cond: Option<ConditioningHead>,
    pub windows: WindowGrid,
    pub config: RunConfig,
    pub n_base: usize,
}

impl FewShotModel {
    /// Build all trainable modules for the configured variant. `n_base` is
    /// |C_base|; the base head and alignment input widths depend on it.
    pub fn new(config: &RunConfig, n_base: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let [w, h, d] = config.grid.shape;
        let windows = proto::build_windows([w, h, d], config.windows.alphas)?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = Unet::new(&mut params, &config.backbone, &mut rng);
        let variant = config.variant();
        let (seg_head, align) = if variant.use_registration() {
            let head = SegHead::new(&mut params, config.backbone.features, n_base + 1, &mut rng);
            let net = GlobalNet::new(
                &mut params,
                2 * (n_base + 1),
                &config.align,
                config.backbone.leaky_slope,
                &mut rng,
            );
            (Some(head), Some(net))
        } else {
            (None, None)
        };
        let cond = if variant.use_conditioning() {
            Some(ConditioningHead::new(
                &mut params,
                config.conditioning.hidden,
                &mut rng,
            ))
        } else {
            None
        };
        Ok(Self {
            params,
            unet,
            seg_head,
            align,
            cond,
            windows,
            config: config.clone(),
            n_base,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Training forward: ground-truth base one-hots drive the alignment
    /// prediction, and the three-term loss is assembled on the tape.
    pub fn forward_train(&self, g: &mut Graph, ep: &EpisodeTensors) -> Result<EpisodeForward> {
        self.forward(g, ep, true)
    }

    /// Inference forward: predicted base-class probabilities drive the
    /// alignment prediction; no loss nodes are created.
    pub fn forward_infer(&self, g: &mut Graph, ep: &EpisodeTensors) -> Result<EpisodeForward> {
        self.forward(g, ep, false)
    }

    fn forward(&self, g: &mut Graph, ep: &EpisodeTensors, train: bool) -> Result<EpisodeForward> {
        let convention = self.config.loss_convention;
        let xq = g.constant(ep.image_tensor(&ep.query_image));
        let xs = g.constant(ep.image_tensor(&ep.support_image));
        let batch = nn::stack_batch(g, &[xq, xs]);
        let feats = self.unet.extract_features(g, &self.params, batch)?;
        let fq = nn::split_batch(g, feats, 0);
        let fs = nn::split_batch(g, feats, 1);

        let support_mask = g.constant(ep.field_tensor(&ep.support_fg, 1));

        let mut report = LossReport::default();
        let mut loss_terms: Vec<Var> = Vec::new();

        let (fs_aligned, mask_aligned, tau) = if self.variant().use_registration() {
            let head = self.seg_head.as_ref().expect("registration head");
            let align = self.align.as_ref().expect("alignment net");
            let pq = head.segment(g, &self.params, fq);
            let ps = head.segment(g, &self.params, fs);
            let tau_var = if train {
                let qb = g.constant(ep.field_tensor(&ep.query_base, self.n_base + 1));
                let sb = g.constant(ep.field_tensor(&ep.support_base, self.n_base + 1));
                align.predict(g, &self.params, qb, sb)
            } else {
                align.predict(g, &self.params, pq, ps)
            };
            let tau = AffineTransform::from_flat(g.value(tau_var).data());
            let fs_aligned = warp_affine(g, fs, tau_var);
            let mask_aligned = warp_affine(g, support_mask, tau_var);
            if train {
                let l_q = dice_loss_multiclass(g, pq, &ep.query_base, convention);
                let l_s = dice_loss_multiclass(g, ps, &ep.support_base, convention);
                let base_seg = nn::add(g, l_q, l_s);
                report.base_seg = g.value(base_seg).data()[0] as f64;
                loss_terms.push(base_seg);

                let sb = g.constant(ep.field_tensor(&ep.support_base, self.n_base + 1));
                let sb_aligned = warp_affine(g, sb, tau_var);
                let l_align = dice_loss_multiclass(g, sb_aligned, &ep.query_base, convention);
                report.align = g.value(l_align).data()[0] as f64;
                loss_terms.push(l_align);
            }
            (fs_aligned, mask_aligned, tau)
        } else {
            (fs, support_mask, AffineTransform::identity())
        };

        let protos = proto::compute_prototypes(g, fs_aligned, mask_aligned, &self.windows);
        let sim_fg =
            proto::window_max_similarity(g, fq, protos.fg, &protos.fg_valid, &self.windows);
        let sim_bg =
            proto::window_max_similarity(g, fq, protos.bg, &protos.bg_valid, &self.windows);

        let prediction = if let Some(cond) = &self.cond {
            cond.condition(g, &self.params, sim_fg, sim_bg, mask_aligned)
        } else {
            proto::probability_map(g, sim_fg, sim_bg)
        };

        let loss = if train {
            let l_fs = dice_loss_binary(g, prediction, &ep.query_fg, convention);
            report.fewshot = g.value(l_fs).data()[0] as f64;
            loss_terms.push(l_fs);
            let mut total = loss_terms[0];
            for &t in &loss_terms[1..] {
                total = nn::add(g, total, t);
            }
            Some(total)
        } else {
            None
        };

        Ok(EpisodeForward {
            prediction,
            tau,
            loss,
            report,
        })
    }

    /// Base-class probability field of a standardized volume, flattened
    /// `[(Cb+1) * N]`. Only available when the registration head exists.
    pub fn predict_base(&self, image: &[f32], shape: [usize; 3]) -> Result<Option<Vec<f32>>> {
        let Some(head) = &self.seg_head else {
            return Ok(None);
        };
        let [w, h, d] = shape;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, d, h, w], image.to_vec()));
        let f = self.unet.extract_features(&mut g, &self.params, x)?;
        let p = head.segment(&mut g, &self.params, f);
        Ok(Some(g.value(p).data().to_vec()))
    }

    /// Hard foreground mask from the prediction node.
    pub fn harden(&self, g: &Graph, prediction: Var) -> Vec<u8> {
        let t = g.value(prediction);
        let (_, c, s) = t.bcs();
        assert_eq!(c, 2);
        let d = t.data();
        (0..s).map(|i| (d[s + i] > 0.5) as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VariantField;

    fn tiny_config(variant: Variant) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.variant = VariantField(variant);
        cfg.grid.shape = [8, 8, 4];
        cfg.grid.spacing = [1.0, 1.0, 1.0];
        cfg.windows.alphas = [0.5, 0.5, 1.0];
        cfg.backbone.channels = vec![4, 8];
        cfg.backbone.features = 6;
        cfg.align.channels = vec![4, 8];
        cfg.conditioning.hidden = 4;
        cfg
    }

    fn toy_episode(shape: [usize; 3]) -> EpisodeTensors {
        let n = shape[0] * shape[1] * shape[2];
        let blob = |off: usize| -> Vec<f32> {
            let mut v = vec![0.0f32; n];
            for i in 0..n / 4 {
                v[(i + off) % n] = 1.0;
            }
            v
        };
        let image: Vec<f32> = (0..n).map(|i| ((i * 31 % 17) as f32) * 0.1 - 0.8).collect();
        let fg = blob(3);
        let mut base = vec![0.0f32; 3 * n];
        for i in 0..n {
            base[i] = 1.0;
        }
        for i in 0..n / 5 {
            base[n + (i * 2) % n] = 1.0;
            base[(i * 2) % n] = 0.0;
        }
        EpisodeTensors {
            shape,
            query_image: image.clone(),
            support_image: image.iter().map(|v| v * 0.9 + 0.05).collect(),
            query_fg: fg.clone(),
            support_fg: fg,
            query_base: base.clone(),
            support_base: base,
        }
    }

    #[test]
    fn variant_wiring_matches_flags() {
        for (variant, head, cond) in [
            (Variant::Plain, false, false),
            (Variant::Con, false, true),
            (Variant::Align, true, false),
            (Variant::ConAlign, true, true),
        ] {
            let m = FewShotModel::new(&tiny_config(variant), 2, 1).unwrap();
            assert_eq!(m.seg_head.is_some(), head);
            assert_eq!(m.align.is_some(), head);
            assert_eq!(m.cond.is_some(), cond);
        }
    }

    #[test]
    fn plain_variant_output_equals_probability_map_exactly() {
        // With both mechanisms off, forward must be bit-identical to the
        // local prototypical pipeline run by hand on the same features.
        let cfg = tiny_config(Variant::Plain);
        let m = FewShotModel::new(&cfg, 2, 7).unwrap();
        let ep = toy_episode([8, 8, 4]);
        let mut g = Graph::new();
        let out = m.forward_infer(&mut g, &ep).unwrap();
        assert_eq!(out.tau, AffineTransform::identity());

        let mut g2 = Graph::new();
        let xq = g2.constant(ep.image_tensor(&ep.query_image));
        let xs = g2.constant(ep.image_tensor(&ep.support_image));
        let batch = nn::stack_batch(&mut g2, &[xq, xs]);
        let feats = m.unet.extract_features(&mut g2, &m.params, batch).unwrap();
        let fq = nn::split_batch(&mut g2, feats, 0);
        let fs = nn::split_batch(&mut g2, feats, 1);
        let mask = g2.constant(ep.field_tensor(&ep.support_fg, 1));
        let protos = proto::compute_prototypes(&mut g2, fs, mask, &m.windows);
        let sim_fg =
            proto::window_max_similarity(&mut g2, fq, protos.fg, &protos.fg_valid, &m.windows);
        let sim_bg =
            proto::window_max_similarity(&mut g2, fq, protos.bg, &protos.bg_valid, &m.windows);
        let expect = proto::probability_map(&mut g2, sim_fg, sim_bg);
        assert_eq!(g.value(out.prediction).data(), g2.value(expect).data());
    }

    #[test]
    fn training_forward_produces_finite_losses_for_every_variant() {
        for variant in [
            Variant::Plain,
            Variant::Con,
            Variant::Align,
            Variant::ConAlign,
        ] {
            let m = FewShotModel::new(&tiny_config(variant), 2, 3).unwrap();
            let ep = toy_episode([8, 8, 4]);
            let mut g = Graph::new();
            let out = m.forward_train(&mut g, &ep).unwrap();
            let total = g.value(out.loss.unwrap()).data()[0];
            assert!(total.is_finite(), "{variant:?} loss not finite");
            assert!(
                (out.report.total() - total as f64).abs() < 1e-5,
                "{variant:?} report/total mismatch"
            );
            if !variant.use_registration() {
                assert_eq!(out.report.base_seg, 0.0);
                assert_eq!(out.report.align, 0.0);
            }
        }
    }

    #[test]
    fn every_trainable_parameter_gets_a_gradient_in_the_full_variant() {
        let m = FewShotModel::new(&tiny_config(Variant::ConAlign), 2, 5).unwrap();
        let ep = toy_episode([8, 8, 4]);
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, &ep).unwrap();
        let grads = g.backward(out.loss.unwrap());
        let pg = g.param_grads(&grads);
        // every parameter slot appears (possibly multiple leaves per slot)
        let mut seen = vec![false; m.params.len()];
        for (slot, _) in &pg {
            seen[*slot] = true;
        }
        let missing: Vec<_> = m
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, e)| e.name.clone())
            .collect();
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }
}
