//! Episodic training, checkpointing, K-shot support selection and the full
//! evaluation protocol with ALL/NOVEL/BASE aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::DataSource;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossReport;
use crate::metrics::{dice_score, hausdorff95};
use crate::model::{EpisodeTensors, FewShotModel};
use crate::nn::Adam;
use crate::preprocess::{augment, standardize};
use crate::sampler::{
    enumerate_eval_episodes, materialize_episode, sample_train_episode, SplitSpec,
};
use crate::volume::{LabelMap, Volume};

/// splitmix-style mixing for deriving independent per-iteration streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[derive(Clone)]
pub struct BestSnapshot {
    pub values: Vec<Vec<f32>>,
    pub score: f64,
    pub iteration: usize,
}

/// Whole training run state; checkpoints round-trip bit-exactly.
pub struct TrainState {
    pub model: FewShotModel,
    pub split: SplitSpec,
    pub adam: Adam,
    pub iteration: usize,
    pub seed: u64,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    pub fn new(config: &RunConfig, split: SplitSpec, seed: u64) -> Result<Self> {
        split.validate()?;
        let model = FewShotModel::new(config, split.base_classes.len(), seed)?;
        let adam = Adam::new(config.train.learning_rate as f32);
        Ok(Self {
            model,
            split,
            adam,
            iteration: 0,
            seed,
            best: None,
        })
    }

    /// Parameter set for evaluation: the best validation snapshot when one
    /// exists, else the current parameters.
    pub fn eval_model(&self) -> FewShotModel {
        let mut model = self.model.clone();
        if let Some(best) = &self.best {
            model.params.restore_values(&best.values);
        }
        model
    }
}

fn standardize_pair(
    pair: &(Volume, LabelMap),
    config: &RunConfig,
) -> Result<(Volume, LabelMap)> {
    standardize(&pair.0, &pair.1, &config.grid)
}

/// One optimizer step on one sampled episode. Returns the loss report.
fn train_iteration(
    state: &mut TrainState,
    data: &dyn DataSource,
) -> Result<LossReport> {
    let config = state.model.config.clone();
    let it = state.iteration as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(state.seed, it));
    let episode = sample_train_episode(&state.split, data, &mut rng)?;

    let (q, ql) = standardize_pair(&episode.query, &config)?;
    let (s, sl) = standardize_pair(&episode.supports[0], &config)?;
    let (q, ql, _) = augment(&q, &ql, &config.augment, &mut rng);
    let (s, sl, _) = augment(&s, &sl, &config.augment, &mut rng);

    let tensors = EpisodeTensors::new(
        &(q, ql),
        &(s, sl),
        &episode.class_name,
        &state.split.base_classes,
    );
    let mut g = Graph::new();
    let fwd = state.model.forward_train(&mut g, &tensors)?;
    let report = fwd.report;
    if !report.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss at iteration {}: {report:?}",
            state.iteration
        )));
    }
    let loss = fwd.loss.expect("training forward provides a loss");
    let grads = g.backward(loss);
    let param_grads: Vec<(usize, Vec<f32>)> = g
        .param_grads(&grads)
        .into_iter()
        .map(|(slot, gr)| (slot, gr.to_vec()))
        .collect();
    drop(grads);
    drop(g);
    state.adam.step(&mut state.model.params, &param_grads);
    state.iteration += 1;
    Ok(report)
}

/// Mean novel-class Dice over the validation images with supports drawn
/// from the novel institution. Deterministic in (seed, iteration).
pub fn validation_score(state: &TrainState, data: &dyn DataSource) -> Result<f64> {
    let config = &state.model.config;
    let split = &state.split;
    let novel_u = split
        .novel_institutions
        .first()
        .ok_or_else(|| Error::Split("no novel institution".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        state.seed ^ 0x76616c69_64617465,
        state.iteration as u64,
    ));
    let all_novel = data.ids_of_institution(novel_u);
    let mut scores = Vec::new();
    for val_id in &split.validation {
        let mut pool = split.support_pool(novel_u, &all_novel);
        pool.retain(|id| id != val_id);
        if pool.is_empty() {
            return Err(Error::EmptyPool(format!(
                "no validation supports in '{novel_u}'"
            )));
        }
        let support_id = pool[rng.random_range(0..pool.len())].clone();
        let query = data.load(val_id)?;
        let support = data.load(&support_id)?;
        let (q, ql) = standardize_pair(&query, config)?;
        let (s, sl) = standardize_pair(&support, config)?;
        for class_name in &split.novel_classes {
            let tensors =
                EpisodeTensors::new(&(q.clone(), ql.clone()), &(s.clone(), sl.clone()), class_name, &split.base_classes);
            let mut g = Graph::new();
            let fwd = state.model.forward_infer(&mut g, &tensors)?;
            let pred = state.model.harden(&g, fwd.prediction);
            let gt = ql.mask(class_name).expect("validation class mask");
            scores.push(dice_score(&pred, gt));
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyPool("empty validation set".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Run training up to `target_iteration`, validating and snapshotting on
/// the configured cadence. `progress` is called after every iteration.
pub fn train_steps(
    state: &mut TrainState,
    data: &dyn DataSource,
    target_iteration: usize,
    mut progress: impl FnMut(usize, &LossReport),
) -> Result<()> {
    let val_every = state.model.config.train.val_every.max(1);
    while state.iteration < target_iteration {
        let report = train_iteration(state, data)?;
        progress(state.iteration, &report);
        if state.iteration % val_every == 0 && !state.split.validation.is_empty() {
            let score = validation_score(state, data)?;
            let better = state.best.as_ref().is_none_or(|b| score > b.score);
            if better {
                state.best = Some(BestSnapshot {
                    values: state.model.params.values_snapshot(),
                    score,
                    iteration: state.iteration,
                });
            }
        }
    }
    Ok(())
}

/// Full training run per the configured iteration budget.
pub fn train(
    config: &RunConfig,
    split: SplitSpec,
    data: &dyn DataSource,
    seed: u64,
    progress: impl FnMut(usize, &LossReport),
) -> Result<TrainState> {
    let mut state = TrainState::new(config, split, seed)?;
    let target = config.train.iterations;
    train_steps(&mut state, data, target, progress)?;
    Ok(state)
}

/// Index of the support whose base-class prediction has the highest cosine
/// similarity with the query's, ties broken by the lowest index.
pub fn select_support(query_base: &[f32], supports_base: &[Vec<f32>]) -> usize {
    assert!(!supports_base.is_empty());
    let qnorm = query_base
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let mut best = f64::NEG_INFINITY;
    let mut best_k = 0usize;
    for (k, sb) in supports_base.iter().enumerate() {
        assert_eq!(sb.len(), query_base.len());
        let mut dot = 0.0f64;
        let mut n = 0.0f64;
        for (&a, &b) in sb.iter().zip(query_base) {
            dot += a as f64 * b as f64;
            n += a as f64 * a as f64;
        }
        let cos = dot / (n.sqrt().max(1e-12) * qnorm);
        if cos > best {
            best = cos;
            best_k = k;
        }
    }
    best_k
}

/// One evaluated episode.
#[derive(Clone, Debug)]
pub struct EpisodeRow {
    pub index: usize,
    pub query_id: String,
    pub class_name: String,
    pub support_institution: String,
    pub support_ids: Vec<String>,
    pub chosen_support: String,
    pub novel_support: bool,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub tau: [f32; 12],
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Aggregate {
    pub count: usize,
    pub dice_mean: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_missing: usize,
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a EpisodeRow>) -> Aggregate {
    let mut count = 0usize;
    let mut dice = 0.0f64;
    let mut hd = 0.0f64;
    let mut hd_count = 0usize;
    let mut missing = 0usize;
    for row in rows {
        count += 1;
        dice += row.dice;
        match row.hd95_mm {
            Some(v) => {
                hd += v;
                hd_count += 1;
            }
            None => missing += 1,
        }
    }
    Aggregate {
        count,
        dice_mean: if count > 0 { dice / count as f64 } else { 0.0 },
        hd95_mean: (hd_count > 0).then(|| hd / hd_count as f64),
        hd95_missing: missing,
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub shots: usize,
    pub rows: Vec<EpisodeRow>,
    pub all: Aggregate,
    pub novel: Aggregate,
    pub base: Aggregate,
    /// 100 * (BASE_DICE - NOVEL_DICE) / BASE_DICE; None when BASE_DICE = 0
    /// or one side has no episodes.
    pub delta_percent: Option<f64>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EpisodeRow>, shots: usize) -> Self {
        let all = aggregate(rows.iter());
        let novel = aggregate(rows.iter().filter(|r| r.novel_support));
        let base = aggregate(rows.iter().filter(|r| !r.novel_support));
        let delta_percent = (base.count > 0 && novel.count > 0 && base.dice_mean != 0.0)
            .then(|| 100.0 * (base.dice_mean - novel.dice_mean) / base.dice_mean);
        Self {
            shots,
            rows,
            all,
            novel,
            base,
            delta_percent,
        }
    }

    /// Tab-separated rows with a header; distances in mm, one line per
    /// episode.
    pub fn rows_tsv(&self) -> String {
        let mut out = String::from(
            "index\tquery_id\tclass\tsupport_institution\tsupport_ids\tchosen_support\ttag\tdice\thd95_mm\ttau\n",
        );
        for r in &self.rows {
            let tau = r
                .tau
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\n",
                r.index,
                r.query_id,
                r.class_name,
                r.support_institution,
                r.support_ids.join(","),
                r.chosen_support,
                if r.novel_support { "NOVEL" } else { "BASE" },
                r.dice,
                r.hd95_mm.map_or("NA".to_string(), |v| format!("{v:.6}")),
                tau,
            ));
        }
        out
    }

    pub fn rows_from_tsv(text: &str) -> Result<Vec<EpisodeRow>> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(Error::DataSource(format!(
                    "row {ln}: expected 10 fields, got {}",
                    f.len()
                )));
            }
            let bad = |what: &str| Error::DataSource(format!("row {ln}: bad {what}"));
            let mut tau = [0.0f32; 12];
            for (i, part) in f[9].split(',').enumerate() {
                if i < 12 {
                    tau[i] = part.parse().map_err(|_| bad("tau"))?;
                }
            }
            rows.push(EpisodeRow {
                index: f[0].parse().map_err(|_| bad("index"))?,
                query_id: f[1].to_string(),
                class_name: f[2].to_string(),
                support_institution: f[3].to_string(),
                support_ids: f[4].split(',').map(str::to_string).collect(),
                chosen_support: f[5].to_string(),
                novel_support: f[6] == "NOVEL",
                dice: f[7].parse().map_err(|_| bad("dice"))?,
                hd95_mm: if f[8] == "NA" {
                    None
                } else {
                    Some(f[8].parse().map_err(|_| bad("hd95"))?)
                },
                tau,
            });
        }
        Ok(rows)
    }

    /// Human-readable aggregate block (HD95 in mm).
    pub fn summary(&self) -> String {
        let fmt = |name: &str, a: &Aggregate| {
            format!(
                "{name}: episodes={} dice={:.4} hd95_mm={} (missing {})\n",
                a.count,
                a.dice_mean,
                a.hd95_mean
                    .map_or("NA".to_string(), |v| format!("{v:.3}")),
                a.hd95_missing
            )
        };
        let mut out = format!("shots: {}\n", self.shots);
        out.push_str(&fmt("ALL", &self.all));
        out.push_str(&fmt("NOVEL", &self.novel));
        out.push_str(&fmt("BASE", &self.base));
        out.push_str(&format!(
            "delta_percent (100*(BASE-NOVEL)/BASE): {}\n",
            self.delta_percent
                .map_or("NA".to_string(), |v| format!("{v:.2}"))
        ));
        out
    }
}

/// Strategy producing a hard query mask for one materialized episode; the
/// trained model is the production implementation, tests may inject
/// reference predictors.
pub trait Predictor {
    fn predict(
        &self,
        query: &(Volume, LabelMap),
        supports: &[(Volume, LabelMap)],
        class_name: &str,
        base_classes: &[String],
    ) -> Result<(Vec<u8>, usize, [f32; 12])>;
}

/// Model-backed predictor implementing K-shot support selection.
pub struct ModelPredictor<'a> {
    pub model: &'a FewShotModel,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(
        &self,
        query: &(Volume, LabelMap),
        supports: &[(Volume, LabelMap)],
        class_name: &str,
        base_classes: &[String],
    ) -> Result<(Vec<u8>, usize, [f32; 12])> {
        let shape = query.0.shape;
        let k_hat = if supports.len() > 1 {
            match self.model.predict_base(&query.0.data, shape)? {
                Some(qb) => {
                    let sb: Result<Vec<Vec<f32>>> = supports
                        .iter()
                        .map(|s| {
                            self.model
                                .predict_base(&s.0.data, shape)
                                .map(|p| p.expect("head exists"))
                        })
                        .collect();
                    select_support(&qb, &sb?)
                }
                // no base head in this variant: fall back to the first draw
                None => 0,
            }
        } else {
            0
        };
        let tensors = EpisodeTensors::new(query, &supports[k_hat], class_name, base_classes);
        let mut g = Graph::new();
        let fwd = self.model.forward_infer(&mut g, &tensors)?;
        let mask = self.model.harden(&g, fwd.prediction);
        Ok((mask, k_hat, fwd.tau.to_flat()))
    }
}

/// Run the full evaluation protocol at `shots` supports per episode.
pub fn evaluate_with(
    predictor: &dyn Predictor,
    config: &RunConfig,
    split: &SplitSpec,
    data: &dyn DataSource,
    shots: usize,
    eval_seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0x6576616c));
    let specs = enumerate_eval_episodes(split, data, shots, &mut rng)?;
    let mut rows = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let episode = materialize_episode(data, spec)?;
        let query = standardize_pair(&episode.query, config)?;
        let supports: Result<Vec<_>> = episode
            .supports
            .iter()
            .map(|s| standardize_pair(s, config))
            .collect();
        let supports = supports?;
        let (pred, k_hat, tau) =
            predictor.predict(&query, &supports, &spec.class_name, &split.base_classes)?;
        let gt = query.1.mask(&spec.class_name).ok_or_else(|| {
            Error::DataSource(format!("query lacks mask for '{}'", spec.class_name))
        })?;
        let dice = dice_score(&pred, gt);
        let hd95_mm = hausdorff95(&pred, gt, query.0.shape, query.0.spacing).ok();
        rows.push(EpisodeRow {
            index,
            query_id: spec.query_id.clone(),
            class_name: spec.class_name.clone(),
            support_institution: spec.support_institution.clone(),
            support_ids: spec.support_ids.clone(),
            chosen_support: spec.support_ids[k_hat].clone(),
            novel_support: spec.novel_support,
            dice,
            hd95_mm,
            tau,
        });
    }
    Ok(EvalReport::from_rows(rows, shots))
}

/// Evaluate a trained state (best validation snapshot when available).
pub fn evaluate(
    state: &TrainState,
    data: &dyn DataSource,
    shots: usize,
    eval_seed: u64,
) -> Result<EvalReport> {
    let model = state.eval_model();
    let predictor = ModelPredictor { model: &model };
    evaluate_with(
        &predictor,
        &model.config,
        &state.split,
        data,
        shots,
        eval_seed,
    )
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"PS3DCK01";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl TrainState {
    /// Single-archive checkpoint: config echo, split manifest, optimizer
    /// state, all parameters and the best validation snapshot.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        let config = toml::to_string(&self.model.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        w.bytes(config.as_bytes());
        w.bytes(self.split.to_manifest().as_bytes());
        w.u64(self.seed);
        w.u64(self.iteration as u64);
        w.u64(self.adam.t);
        let entries = self.model.params.entries();
        w.u64(entries.len() as u64);
        for e in entries {
            w.bytes(e.name.as_bytes());
            w.u64(e.shape.len() as u64);
            for &d in &e.shape {
                w.u64(d as u64);
            }
            w.f32s(&e.value);
            w.f32s(&e.m);
            w.f32s(&e.v);
        }
        match &self.best {
            None => w.u8(0),
            Some(best) => {
                w.u8(1);
                w.f64(best.score);
                w.u64(best.iteration as u64);
                w.u64(best.values.len() as u64);
                for v in &best.values {
                    w.f32s(v);
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad checkpoint magic".into()));
        }
        let config: RunConfig = toml::from_str(
            std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::Checkpoint("config not utf8".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        let manifest = std::str::from_utf8(r.bytes()?)
            .map_err(|_| Error::Checkpoint("manifest not utf8".into()))?;
        let split = SplitSpec::from_manifest(manifest)?;
        let seed = r.u64()?;
        let iteration = r.u64()? as usize;
        let adam_t = r.u64()?;
        let mut state = TrainState::new(&config, split, seed)?;
        state.iteration = iteration;
        state.adam.t = adam_t;
        let n = r.u64()? as usize;
        if n != state.model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n} parameters, model expects {}",
                state.model.params.len()
            )));
        }
        for i in 0..n {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::Checkpoint("name not utf8".into()))?
                .to_string();
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let value = r.f32s()?;
            let m = r.f32s()?;
            let v = r.f32s()?;
            let entry = &mut state.model.params.entries_mut()[i];
            if entry.name != name || entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} mismatch: checkpoint '{name}' {shape:?} vs model '{}' {:?}",
                    entry.name, entry.shape
                )));
            }
            entry.value = std::sync::Arc::new(value);
            entry.m = m;
            entry.v = v;
        }
        state.best = match r.u8()? {
            0 => None,
            _ => {
                let score = r.f64()?;
                let it = r.u64()? as usize;
                let count = r.u64()? as usize;
                let mut values = Vec::with_capacity(count);
                for _ in 0..count {
                    values.push(r.f32s()?);
                }
                Some(BestSnapshot {
                    values,
                    score,
                    iteration: it,
                })
            }
        };
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, Variant, VariantField};
    use crate::dataset::MemorySource;
    use crate::sampler::make_split;
    use crate::synth::{generate, Primitive, SynthClass, SynthInstitution, SynthSpec};

    fn tiny_setup(variant: Variant) -> (RunConfig, MemorySource, SplitSpec) {
        let spec = SynthSpec {
            shape: [16, 16, 8],
            spacing: [1.0; 3],
            seed: 3,
            jitter_vox: 1.0,
            institutions: vec![
                SynthInstitution {
                    name: "a".into(),
                    offset: [0, 0, 0],
                    intensity_bias: 0.0,
                    noise_sd: 0.1,
                    count: 6,
                },
                SynthInstitution {
                    name: "b".into(),
                    offset: [2, 0, 0],
                    intensity_bias: 0.2,
                    noise_sd: 0.1,
                    count: 6,
                },
                SynthInstitution {
                    name: "n".into(),
                    offset: [-2, 1, 0],
                    intensity_bias: -0.1,
                    noise_sd: 0.1,
                    count: 5,
                },
            ],
            classes: vec![
                SynthClass {
                    name: "blob".into(),
                    primitive: Primitive::Sphere {
                        center: [5.0, 5.0, 4.0],
                        radius: [1.5, 1.8],
                    },
                    intensity: 1.0,
                },
                SynthClass {
                    name: "slab".into(),
                    primitive: Primitive::Cuboid {
                        center: [10.0, 10.0, 4.0],
                        half_extents: [[1.5, 2.0], [1.5, 2.0], [1.2, 1.2]],
                    },
                    intensity: 1.0,
                },
            ],
        };
        let data = generate(&spec).unwrap();
        let split = make_split(&data, 1, "n", 11, 1).unwrap();
        let mut cfg = RunConfig::default();
        cfg.variant = VariantField(variant);
        cfg.grid.shape = [16, 16, 8];
        cfg.grid.spacing = [1.0; 3];
        cfg.windows.alphas = [0.5, 0.5, 1.0];
        cfg.backbone.channels = vec![3, 6];
        cfg.backbone.features = 4;
        cfg.align.channels = vec![4, 8];
        cfg.conditioning.hidden = 4;
        cfg.augment.rotate_deg = [5.0; 3];
        cfg.augment.translate_vox = [2.0, 2.0, 1.0];
        cfg.augment.scale = [0.95, 1.05];
        cfg.train.iterations = 2;
        cfg.train.val_every = 2;
        cfg.train.learning_rate = 1e-3;
        (cfg, data, split)
    }

    #[test]
    fn two_runs_with_one_seed_are_bit_identical() {
        let (cfg, data, split) = tiny_setup(Variant::ConAlign);
        let s1 = train(&cfg, split.clone(), &data, 99, |_, _| {}).unwrap();
        let s2 = train(&cfg, split, &data, 99, |_, _| {}).unwrap();
        let b1 = s1.to_bytes().unwrap();
        let b2 = s2.to_bytes().unwrap();
        assert_eq!(b1, b2, "checkpoints differ between identical runs");
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let (mut cfg, data, split) = tiny_setup(Variant::Plain);
        cfg.train.learning_rate = 0.0;
        cfg.train.iterations = 3;
        let s0 = TrainState::new(&cfg, split.clone(), 7).unwrap();
        let w0 = s0.model.params.values_snapshot();
        let s = train(&cfg, split, &data, 7, |_, _| {}).unwrap();
        let w1 = s.model.params.values_snapshot();
        assert_eq!(w0, w1);
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly_and_resume_matches() {
        let (mut cfg, data, split) = tiny_setup(Variant::ConAlign);
        cfg.train.iterations = 4;
        // uninterrupted run to 4
        let full = train(&cfg, split.clone(), &data, 5, |_, _| {}).unwrap();
        // run to 2, checkpoint, reload, continue to 4
        let mut half = TrainState::new(&cfg, split, 5).unwrap();
        train_steps(&mut half, &data, 2, |_, _| {}).unwrap();
        let bytes = half.to_bytes().unwrap();
        let mut resumed = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), bytes, "roundtrip not exact");
        train_steps(&mut resumed, &data, 4, |_, _| {}).unwrap();
        assert_eq!(
            full.to_bytes().unwrap(),
            resumed.to_bytes().unwrap(),
            "resumed run diverged from uninterrupted run"
        );
    }

    #[test]
    fn select_support_hand_cases() {
        // K=1 -> index 0
        assert_eq!(select_support(&[1.0, 0.0], &[vec![0.3, 0.3]]), 0);
        // exact match wins (cosine 1 is maximal)
        let q = vec![0.2f32, 0.5, 0.3];
        let others = vec![vec![1.0, 0.0, 0.0], q.clone(), vec![0.0, 1.0, 0.0]];
        assert_eq!(select_support(&q, &others), 1);
        // scale invariance: 2x the query beats an unrelated vector
        let scaled: Vec<f32> = q.iter().map(|v| v * 2.0).collect();
        assert_eq!(select_support(&q, &[vec![1.0, 0.0, 0.0], scaled]), 1);
    }

    struct OraclePredictor;

    impl Predictor for OraclePredictor {
        fn predict(
            &self,
            query: &(Volume, LabelMap),
            _supports: &[(Volume, LabelMap)],
            class_name: &str,
            _base_classes: &[String],
        ) -> Result<(Vec<u8>, usize, [f32; 12])> {
            let gt = query.1.mask(class_name).unwrap().to_vec();
            Ok((gt, 0, [0.0; 12]))
        }
    }

    #[test]
    fn oracle_predictor_reaches_dice_one_and_counts_add_up() {
        let (cfg, data, split) = tiny_setup(Variant::Plain);
        let report =
            evaluate_with(&OraclePredictor, &cfg, &split, &data, 1, 17).unwrap();
        assert!(report.all.count > 0);
        assert_eq!(report.all.count, report.novel.count + report.base.count);
        assert!((report.all.dice_mean - 1.0).abs() < 1e-12);
        assert_eq!(report.delta_percent, Some(0.0));
        // aggregates are exact functions of the rows
        let recomputed = EvalReport::from_rows(report.rows.clone(), 1);
        assert_eq!(recomputed.all.dice_mean, report.all.dice_mean);
    }

    #[test]
    fn rows_tsv_roundtrips() {
        let (cfg, data, split) = tiny_setup(Variant::Plain);
        let report = evaluate_with(&OraclePredictor, &cfg, &split, &data, 1, 3).unwrap();
        let text = report.rows_tsv();
        let rows = EvalReport::rows_from_tsv(&text).unwrap();
        assert_eq!(rows.len(), report.rows.len());
        assert_eq!(rows[0].query_id, report.rows[0].query_id);
        assert_eq!(rows[0].dice, report.rows[0].dice);
    }

    #[test]
    fn evaluation_never_updates_weights() {
        let (cfg, data, split) = tiny_setup(Variant::ConAlign);
        let state = train(&cfg, split, &data, 1, |_, _| {}).unwrap();
        let before = state.model.params.values_snapshot();
        let _ = evaluate(&state, &data, 1, 5).unwrap();
        assert_eq!(before, state.model.params.values_snapshot());
    }
}
