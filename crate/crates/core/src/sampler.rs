//! Base/novel partitioning over classes and institutions, training-episode
//! sampling, and deterministic enumeration of the evaluation protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::DataSource;
use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// The eight pelvic structures and their published fold assignment.
const CANONICAL_CLASSES: [&str; 8] = [
    "bladder",
    "bone",
    "central gland",
    "neurovascular bundle",
    "obturator internus",
    "rectum",
    "seminal vesicle",
    "transition zone",
];

const CANONICAL_FOLDS: [[&str; 2]; 4] = [
    ["bladder", "central gland"],
    ["bone", "rectum"],
    ["obturator internus", "seminal vesicle"],
    ["transition zone", "neurovascular bundle"],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub fold_index: usize,
    pub seed: u64,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub base_institutions: Vec<String>,
    pub novel_institutions: Vec<String>,
    /// Per-institution training ids (we keep them for every institution;
    /// training only draws from base institutions).
    pub train: BTreeMap<String, Vec<String>>,
    pub test: BTreeMap<String, Vec<String>>,
    pub validation: Vec<String>,
}

impl SplitSpec {
    pub fn is_validation(&self, id: &str) -> bool {
        self.validation.iter().any(|v| v == id)
    }

    /// Union of base institutions' training ids, in institution order.
    pub fn train_pool(&self) -> Vec<String> {
        let mut out = Vec::new();
        for u in &self.base_institutions {
            if let Some(ids) = self.train.get(u) {
                out.extend(ids.iter().cloned());
            }
        }
        out
    }

    /// Evaluation-time support pool of one institution: test subset for base
    /// institutions, every image for novel ones; validation ids excluded.
    pub fn support_pool(&self, institution: &str, all_ids: &[String]) -> Vec<String> {
        let novel = self.novel_institutions.iter().any(|u| u == institution);
        let ids: Vec<String> = if novel {
            all_ids.to_vec()
        } else {
            self.test.get(institution).cloned().unwrap_or_default()
        };
        ids.into_iter().filter(|id| !self.is_validation(id)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.novel_classes {
            if self.base_classes.contains(c) {
                return Err(Error::Split(format!("class '{c}' in both partitions")));
            }
        }
        for u in &self.novel_institutions {
            if self.base_institutions.contains(u) {
                return Err(Error::Split(format!(
                    "institution '{u}' in both partitions"
                )));
            }
        }
        for (u, train) in &self.train {
            if let Some(test) = self.test.get(u) {
                for id in train {
                    if test.contains(id) {
                        return Err(Error::Split(format!(
                            "image '{id}' in both train and test of '{u}'"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Plain-text manifest, one tab-separated record per line.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, items: &[String]| {
            out.push_str(key);
            for it in items {
                out.push('\t');
                out.push_str(it);
            }
            out.push('\n');
        };
        line("fold", &[self.fold_index.to_string()]);
        line("seed", &[self.seed.to_string()]);
        line("base_classes", &self.base_classes);
        line("novel_classes", &self.novel_classes);
        line("base_institutions", &self.base_institutions);
        line("novel_institutions", &self.novel_institutions);
        for (u, ids) in &self.train {
            let mut rec = vec![u.clone()];
            rec.extend(ids.iter().cloned());
            line("train", &rec);
        }
        for (u, ids) in &self.test {
            let mut rec = vec![u.clone()];
            rec.extend(ids.iter().cloned());
            line("test", &rec);
        }
        line("validation", &self.validation);
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut spec = SplitSpec {
            fold_index: 0,
            seed: 0,
            base_classes: Vec::new(),
            novel_classes: Vec::new(),
            base_institutions: Vec::new(),
            novel_institutions: Vec::new(),
            train: BTreeMap::new(),
            test: BTreeMap::new(),
            validation: Vec::new(),
        };
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let key = parts.next().unwrap_or_default();
            let items: Vec<String> = parts.map(str::to_string).collect();
            match key {
                "fold" => {
                    spec.fold_index = items
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Split("bad fold record".into()))?;
                }
                "seed" => {
                    spec.seed = items
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Split("bad seed record".into()))?;
                }
                "base_classes" => spec.base_classes = items,
                "novel_classes" => spec.novel_classes = items,
                "base_institutions" => spec.base_institutions = items,
                "novel_institutions" => spec.novel_institutions = items,
                "train" | "test" => {
                    let mut it = items.into_iter();
                    let u = it
                        .next()
                        .ok_or_else(|| Error::Split("institution record missing name".into()))?;
                    let ids: Vec<String> = it.collect();
                    if key == "train" {
                        spec.train.insert(u, ids);
                    } else {
                        spec.test.insert(u, ids);
                    }
                }
                "validation" => spec.validation = items,
                other => {
                    return Err(Error::Split(format!("unknown manifest record '{other}'")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Novel classes of `fold_index` (1..=4). The published assignment is used
/// when the catalog is exactly the eight pelvic structures; otherwise the
/// classes are split into four contiguous folds, earlier folds taking the
/// remainder.
pub fn fold_classes(classes: &[String], fold_index: usize) -> Result<Vec<String>> {
    if !(1..=4).contains(&fold_index) {
        return Err(Error::Split(format!(
            "fold index {fold_index} out of range 1..=4"
        )));
    }
    let mut sorted: Vec<&str> = classes.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let canonical = {
        let mut c = CANONICAL_CLASSES.to_vec();
        c.sort_unstable();
        c
    };
    if sorted == canonical {
        return Ok(CANONICAL_FOLDS[fold_index - 1]
            .iter()
            .map(|s| s.to_string())
            .collect());
    }
    let n = classes.len();
    let base = n / 4;
    let rem = n % 4;
    let size = |k: usize| base + (k < rem) as usize;
    let start: usize = (0..fold_index - 1).map(size).sum();
    let fold: Vec<String> = classes[start..start + size(fold_index - 1)].to_vec();
    if fold.is_empty() {
        return Err(Error::Split(format!(
            "fold {fold_index} is empty for {n} classes"
        )));
    }
    Ok(fold)
}

/// Build base/novel partitions and per-institution train/test/validation
/// image lists. Deterministic in `seed`.
pub fn make_split(
    data: &dyn DataSource,
    fold_index: usize,
    novel_institution: &str,
    seed: u64,
    val_per_institution: usize,
) -> Result<SplitSpec> {
    let institutions = data.institutions().to_vec();
    if !institutions.iter().any(|u| u == novel_institution) {
        return Err(Error::Split(format!(
            "novel institution '{novel_institution}' not in catalog"
        )));
    }
    let novel_classes = fold_classes(data.classes(), fold_index)?;
    let base_classes: Vec<String> = data
        .classes()
        .iter()
        .filter(|c| !novel_classes.contains(c))
        .cloned()
        .collect();
    let novel_institutions = vec![novel_institution.to_string()];
    let base_institutions: Vec<String> = institutions
        .iter()
        .filter(|u| u.as_str() != novel_institution)
        .cloned()
        .collect();

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut validation = Vec::new();
    for u in &institutions {
        let mut ids = data.ids_of_institution(u);
        if ids.is_empty() {
            return Err(Error::Split(format!("institution '{u}' has no images")));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        // 3:1 train:test
        let n_test = ids.len().div_ceil(4);
        let test_ids: Vec<String> = ids[..n_test].to_vec();
        let train_ids: Vec<String> = ids[n_test..].to_vec();

        // validation drawn from the institution's evaluation pool
        let eval_pool: Vec<String> = if u == novel_institution {
            ids.clone()
        } else {
            test_ids.clone()
        };
        let quota = val_per_institution.min(eval_pool.len().saturating_sub(1));
        let mut pool = eval_pool;
        pool.shuffle(&mut rng);
        validation.extend(pool.into_iter().take(quota));

        train.insert(u.clone(), train_ids);
        test.insert(u.clone(), test_ids);
    }

    let spec = SplitSpec {
        fold_index,
        seed,
        base_classes,
        novel_classes,
        base_institutions,
        novel_institutions,
        train,
        test,
        validation,
    };
    spec.validate()?;
    Ok(spec)
}

/// One few-shot task instance with loaded data. Provenance travels on the
/// volumes themselves (id and institution fields).
pub struct Episode {
    pub class_name: String,
    pub query: (Volume, LabelMap),
    pub supports: Vec<(Volume, LabelMap)>,
}

impl Episode {
    pub fn query_id(&self) -> &str {
        &self.query.0.id
    }

    pub fn support_ids(&self) -> Vec<&str> {
        self.supports.iter().map(|s| s.0.id.as_str()).collect()
    }
}

/// Algorithm-2-style training episode: a uniform base class and a distinct
/// query/support pair from the pooled base-institution training images.
pub fn sample_train_episode<R: Rng>(
    split: &SplitSpec,
    data: &dyn DataSource,
    rng: &mut R,
) -> Result<Episode> {
    let pool = split.train_pool();
    if pool.len() < 2 {
        return Err(Error::EmptyPool(format!(
            "training pool has {} image(s); need at least 2",
            pool.len()
        )));
    }
    if split.base_classes.is_empty() {
        return Err(Error::EmptyPool("no base classes to sample".into()));
    }
    let class_name = split.base_classes[rng.random_range(0..split.base_classes.len())].clone();
    let qi = rng.random_range(0..pool.len());
    let mut si = rng.random_range(0..pool.len() - 1);
    if si >= qi {
        si += 1;
    }
    let query = data.load(&pool[qi])?;
    let support = data.load(&pool[si])?;
    Ok(Episode {
        class_name,
        query,
        supports: vec![support],
    })
}

/// Identity of one evaluation episode before materialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalEpisodeSpec {
    pub query_id: String,
    pub support_ids: Vec<String>,
    pub support_institution: String,
    pub class_name: String,
    /// Supports drawn from a novel institution (NOVEL aggregate) vs a base
    /// institution (BASE aggregate).
    pub novel_support: bool,
}

/// Enumerate the full evaluation protocol: every non-validation image of
/// every novel institution is a query; for each query and each institution,
/// `k` distinct supports are drawn from that institution's pool (capped at
/// the pool size) and shared across all novel classes.
pub fn enumerate_eval_episodes<R: Rng>(
    split: &SplitSpec,
    data: &dyn DataSource,
    k: usize,
    rng: &mut R,
) -> Result<Vec<EvalEpisodeSpec>> {
    assert!(k >= 1, "shot count must be at least 1");
    let mut out = Vec::new();
    for qu in &split.novel_institutions {
        let all_q = data.ids_of_institution(qu);
        for query_id in all_q.iter().filter(|id| !split.is_validation(id)) {
            // novel institutions first, then base, each in catalog order
            let support_institutions: Vec<(&String, bool)> = split
                .novel_institutions
                .iter()
                .map(|u| (u, true))
                .chain(split.base_institutions.iter().map(|u| (u, false)))
                .collect();
            for (su, novel_support) in support_institutions {
                let all_ids = data.ids_of_institution(su);
                let mut pool = split.support_pool(su, &all_ids);
                pool.retain(|id| id != query_id);
                if pool.is_empty() {
                    return Err(Error::EmptyPool(format!(
                        "no support candidates in institution '{su}' for query '{query_id}'"
                    )));
                }
                pool.shuffle(rng);
                let take = k.min(pool.len());
                let support_ids: Vec<String> = pool.into_iter().take(take).collect();
                for class_name in &split.novel_classes {
                    out.push(EvalEpisodeSpec {
                        query_id: query_id.clone(),
                        support_ids: support_ids.clone(),
                        support_institution: su.clone(),
                        class_name: class_name.clone(),
                        novel_support,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn materialize_episode(data: &dyn DataSource, spec: &EvalEpisodeSpec) -> Result<Episode> {
    let query = data.load(&spec.query_id)?;
    let supports = spec
        .support_ids
        .iter()
        .map(|id| data.load(id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        class_name: spec.class_name.clone(),
        query,
        supports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MemorySource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_volume(id: &str, institution: &str) -> (Volume, LabelMap) {
        let vol = Volume::new(vec![0.0; 8], [2, 2, 2], [1.0; 3], id, institution).unwrap();
        let mut lm = LabelMap::new([2, 2, 2]);
        for c in ["c0", "c1", "c2", "c3"] {
            lm.insert(c, vec![0; 8]).unwrap();
        }
        (vol, lm)
    }

    fn source(counts: &[(&str, usize)]) -> MemorySource {
        let classes = vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()];
        let institutions: Vec<String> = counts.iter().map(|(u, _)| u.to_string()).collect();
        let mut src = MemorySource::new(classes, institutions);
        for (u, n) in counts {
            for i in 0..*n {
                let (v, l) = tiny_volume(&format!("{u}_{i:02}"), u);
                src.push(v, l).unwrap();
            }
        }
        src
    }

    #[test]
    fn canonical_fold_assignment_matches_published_table() {
        let classes: Vec<String> = [
            "bladder",
            "bone",
            "central gland",
            "neurovascular bundle",
            "obturator internus",
            "rectum",
            "seminal vesicle",
            "transition zone",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(
            fold_classes(&classes, 1).unwrap(),
            vec!["bladder".to_string(), "central gland".to_string()]
        );
        assert_eq!(
            fold_classes(&classes, 3).unwrap(),
            vec![
                "obturator internus".to_string(),
                "seminal vesicle".to_string()
            ]
        );
    }

    #[test]
    fn three_to_one_ratio_on_eight_images() {
        let src = source(&[("a", 8), ("b", 4)]);
        let split = make_split(&src, 1, "b", 7, 0).unwrap();
        assert_eq!(split.train["a"].len(), 6);
        assert_eq!(split.test["a"].len(), 2);
        assert_eq!(split.novel_classes, vec!["c0".to_string()]);
        assert_eq!(
            split.base_classes,
            vec!["c1".to_string(), "c2".to_string(), "c3".to_string()]
        );
    }

    #[test]
    fn split_is_deterministic_in_the_seed() {
        let src = source(&[("a", 10), ("b", 6), ("c", 5)]);
        let s1 = make_split(&src, 2, "c", 42, 2).unwrap();
        let s2 = make_split(&src, 2, "c", 42, 2).unwrap();
        assert_eq!(s1, s2);
        let s3 = make_split(&src, 2, "c", 43, 2).unwrap();
        assert_ne!(s1.train, s3.train);
    }

    #[test]
    fn validation_respects_small_pools_and_is_excluded_from_support() {
        let src = source(&[("a", 5), ("b", 3)]);
        // institution b: 3 images -> test pool ceil(3/4)=1; validation capped
        // at pool-1 = 0
        let split = make_split(&src, 1, "a", 1, 2).unwrap();
        let b_test = &split.test["b"];
        assert_eq!(b_test.len(), 1);
        assert!(split
            .validation
            .iter()
            .all(|v| !b_test.contains(v) || b_test.len() > 1));
        // novel institution a: pool 5 -> 2 validation images
        let v_in_a = split
            .validation
            .iter()
            .filter(|v| v.starts_with("a_"))
            .count();
        assert_eq!(v_in_a, 2);
    }

    #[test]
    fn train_episode_is_reproducible_and_never_self_supports() {
        let src = source(&[("a", 6), ("b", 4)]);
        let split = make_split(&src, 1, "b", 3, 0).unwrap();
        let ep1 =
            sample_train_episode(&split, &src, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ep2 =
            sample_train_episode(&split, &src, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(ep1.query_id(), ep2.query_id());
        assert_eq!(ep1.support_ids(), ep2.support_ids());
        assert_eq!(ep1.class_name, ep2.class_name);
        assert_ne!(ep1.query_id(), ep1.support_ids()[0]);
    }

    #[test]
    fn two_image_pool_forces_the_pair() {
        let src = source(&[("a", 2), ("b", 2)]);
        let mut split = make_split(&src, 1, "b", 3, 0).unwrap();
        // force train pool to exactly the two images of institution a
        split.train.insert("a".into(), src.ids_of_institution("a"));
        split.test.insert("a".into(), Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let ep = sample_train_episode(&split, &src, &mut rng).unwrap();
            let ids = [ep.query_id().to_string(), ep.support_ids()[0].to_string()];
            let mut sorted = ids.clone();
            sorted.sort();
            assert_eq!(sorted, ["a_00".to_string(), "a_01".to_string()]);
        }
    }

    #[test]
    fn many_draws_cover_all_base_classes_without_self_support() {
        let src = source(&[("a", 6), ("b", 4)]);
        let split = make_split(&src, 1, "b", 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..10_000 {
            let pool = split.train_pool();
            let class =
                &split.base_classes[rng.random_range(0..split.base_classes.len())];
            let qi = rng.random_range(0..pool.len());
            let mut si = rng.random_range(0..pool.len() - 1);
            if si >= qi {
                si += 1;
            }
            assert_ne!(qi, si);
            seen.insert(class.clone());
        }
        assert_eq!(seen.len(), split.base_classes.len());
    }

    #[test]
    fn evaluation_enumeration_counts() {
        // 1 novel institution (3 images), 2 base institutions, 2 novel
        // classes, K=1 -> 3 queries x 3 support institutions x 2 classes
        let src = source(&[("a", 8), ("b", 8), ("n", 3)]);
        let split = SplitSpec {
            fold_index: 1,
            seed: 0,
            base_classes: vec!["c2".into(), "c3".into()],
            novel_classes: vec!["c0".into(), "c1".into()],
            base_institutions: vec!["a".into(), "b".into()],
            novel_institutions: vec!["n".into()],
            train: [
                ("a".to_string(), src.ids_of_institution("a")[..6].to_vec()),
                ("b".to_string(), src.ids_of_institution("b")[..6].to_vec()),
                ("n".to_string(), Vec::new()),
            ]
            .into(),
            test: [
                ("a".to_string(), src.ids_of_institution("a")[6..].to_vec()),
                ("b".to_string(), src.ids_of_institution("b")[6..].to_vec()),
                ("n".to_string(), src.ids_of_institution("n")),
            ]
            .into(),
            validation: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = enumerate_eval_episodes(&split, &src, 1, &mut rng).unwrap();
        assert_eq!(eps.len(), 3 * 3 * 2);
        // supports from base institutions count toward BASE only
        let base_eps = eps.iter().filter(|e| !e.novel_support).count();
        let novel_eps = eps.iter().filter(|e| e.novel_support).count();
        assert_eq!(base_eps, 3 * 2 * 2);
        assert_eq!(novel_eps, 3 * 2);
        // a 2-candidate novel pool with the query excluded leaves a forced
        // unique support
        for e in eps.iter().filter(|e| e.novel_support) {
            assert_ne!(e.query_id, e.support_ids[0]);
        }
    }

    #[test]
    fn manifest_roundtrips() {
        let src = source(&[("a", 7), ("b", 5), ("c", 4)]);
        let split = make_split(&src, 2, "b", 9, 1).unwrap();
        let text = split.to_manifest();
        let parsed = SplitSpec::from_manifest(&text).unwrap();
        assert_eq!(split, parsed);
    }

    #[test]
    fn training_pool_never_contains_novel_institution_images() {
        let src = source(&[("a", 6), ("b", 4), ("n", 5)]);
        let split = make_split(&src, 1, "n", 3, 2).unwrap();
        for id in split.train_pool() {
            assert!(!id.starts_with("n_"));
        }
    }
}
