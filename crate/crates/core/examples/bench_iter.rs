use std::time::Instant;

use protoseg3d_core::config::{RunConfig, Variant, VariantField};
use protoseg3d_core::engine::{evaluate, train, validation_score};
use protoseg3d_core::sampler::make_split;
use protoseg3d_core::synth::{generate, Primitive, SynthClass, SynthInstitution, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec {
        shape: [48, 48, 24],
        spacing: [1.0; 3],
        seed: 21,
        jitter_vox: 1.0,
        institutions: vec![
            SynthInstitution { name: "a".into(), offset: [0, 0, 0], intensity_bias: 0.0, noise_sd: 0.2, count: 16 },
            SynthInstitution { name: "b".into(), offset: [6, -4, 2], intensity_bias: 0.3, noise_sd: 0.25, count: 16 },
            SynthInstitution { name: "n".into(), offset: [-6, 5, -2], intensity_bias: -0.2, noise_sd: 0.2, count: 16 },
        ],
        classes: vec![
            SynthClass { name: "c_sphere_a".into(), primitive: Primitive::Sphere { center: [15.0, 15.0, 12.0], radius: [4.0, 5.5] }, intensity: 1.0 },
            SynthClass { name: "c_box_a".into(), primitive: Primitive::Cuboid { center: [33.0, 15.0, 12.0], half_extents: [[4.0, 5.0], [4.0, 5.0], [3.0, 4.0]] }, intensity: 1.0 },
            SynthClass { name: "c_sphere_b".into(), primitive: Primitive::Sphere { center: [15.0, 33.0, 12.0], radius: [4.0, 5.5] }, intensity: 1.0 },
            SynthClass { name: "c_box_b".into(), primitive: Primitive::Cuboid { center: [33.0, 33.0, 12.0], half_extents: [[3.0, 4.0], [4.0, 5.5], [3.5, 4.5]] }, intensity: 1.0 },
        ],
    }
}

fn config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.variant = VariantField(variant);
    cfg.grid.shape = [48, 48, 24];
    cfg.grid.spacing = [1.0; 3];
    cfg.windows.alphas = [0.25, 0.25, 1.0];
    cfg.backbone.channels = vec![6, 12, 24];
    cfg.backbone.features = 8;
    cfg.align.channels = vec![8, 16, 32];
    cfg.conditioning.hidden = 8;
    cfg.augment.rotate_deg = [5.0; 3];
    cfg.augment.translate_vox = [8.0, 8.0, 2.0];
    cfg.augment.scale = [0.95, 1.05];
    cfg.train.iterations = 2000;
    cfg.train.val_every = 200;
    cfg.train.learning_rate = 1e-3;
    cfg
}

fn main() {
    let data = generate(&spec()).unwrap();
    let split = make_split(&data, 1, "n", 7, 2).unwrap();
    println!("novel classes: {:?}", split.novel_classes);
    println!("validation: {:?}", split.validation);

    let mut results = Vec::new();
    for variant in [Variant::ConAlign, Variant::Plain, Variant::Con] {
        let cfg = config(variant);
        let t = Instant::now();
        let mut first_losses = Vec::new();
        let mut mid_losses = Vec::new();
        let state = train(&cfg, split.clone(), &data, 7, |it, r| {
            if it <= 50 { first_losses.push(r.total()); }
            if (450..=550).contains(&it) { mid_losses.push(r.total()); }
            if it % 200 == 0 { println!("[{}] it {it}: loss {:.4}", variant.name(), r.total()); }
        }).unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        let vs = validation_score(&state, &data).unwrap();
        let t2 = Instant::now();
        let report = evaluate(&state, &data, 1, 3).unwrap();
        let eval_secs = t2.elapsed().as_secs_f64();
        let f: f64 = first_losses.iter().sum::<f64>() / first_losses.len() as f64;
        let m: f64 = mid_losses.iter().sum::<f64>() / mid_losses.len() as f64;
        println!(
            "[{}] train {:.0}s eval {:.0}s | loss {:.3}->{:.3} | val {:.3} (best it {:?}) | ALL {:.3} NOVEL {:.3} BASE {:.3} delta {:?}",
            variant.name(), train_secs, eval_secs, f, m, vs,
            state.best.as_ref().map(|b| b.iteration),
            report.all.dice_mean, report.novel.dice_mean, report.base.dice_mean, report.delta_percent
        );
        if variant == Variant::ConAlign {
            let t3 = Instant::now();
            let r4 = evaluate(&state, &data, 4, 3).unwrap();
            println!(
                "[{}] K=4 eval {:.0}s | NOVEL {:.3} (K=1 {:.3})",
                variant.name(), t3.elapsed().as_secs_f64(), r4.novel.dice_mean, report.novel.dice_mean
            );
            results.push(("K4_novel", r4.novel.dice_mean));
        }
        results.push((variant.name(), report.novel.dice_mean));
        results.push(("base", report.base.dice_mean));
        results.push(("delta", report.delta_percent.unwrap_or(f64::NAN)));
    }
    println!("summary: {results:?}");
}
