//! Split construction and the on-disk corpus layout.
//!
//! A corpus directory contains `kb.toml`, `generator.toml`, and one
//! subdirectory per split (`train`, `valid`, `test-seen`, `test-unseen`).
//! Each split holds an `index.jsonl` file mapping sample ids to files:
//! the image (`f32` grid), report text, target grid (`N x 2`, presence and
//! location index with `-1` for absent), and one `u8` mask grid per
//! positively present disease.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{generate_sample, GeneratorConfig, SamplingRates};
use super::{CorpusError, MultiLabelTarget, SyntheticSample};
use crate::grid::{read_grid, write_grid, GridDtype};
use crate::kb::KnowledgeBase;
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] =
        [SplitKind::Train, SplitKind::Valid, SplitKind::TestSeen, SplitKind::TestUnseen];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
            SplitKind::TestSeen => "test-seen",
            SplitKind::TestUnseen => "test-unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.dir_name() == s)
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// The four materialized splits.
pub struct Splits {
    pub train: Vec<SyntheticSample>,
    pub valid: Vec<SyntheticSample>,
    pub test_seen: Vec<SyntheticSample>,
    pub test_unseen: Vec<SyntheticSample>,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &[SyntheticSample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::TestSeen => &self.test_seen,
            SplitKind::TestUnseen => &self.test_unseen,
        }
    }
}

/// Per-split sample seeds: disjoint ranges of a counter mixed with the
/// corpus seed, so splits never share a sample.
fn sample_seed(corpus_seed: u64, global_index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(global_index.wrapping_mul(0xA24B_AED4_963E_E407));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn split_plan(cfg: &GeneratorConfig) -> Vec<(SplitKind, usize, SamplingRates)> {
    let seen_rates: SamplingRates = cfg
        .seen_disease_names()
        .into_iter()
        .map(|n| (n, cfg.positive_rate))
        .collect();
    let mut unseen_rates: SamplingRates = cfg
        .holdout
        .iter()
        .map(|n| (n.clone(), cfg.unseen_positive_rate))
        .collect();
    unseen_rates.extend(
        cfg.seen_disease_names().into_iter().map(|n| (n, cfg.distractor_rate)),
    );
    vec![
        (SplitKind::Train, cfg.train, seen_rates.clone()),
        (SplitKind::Valid, cfg.valid, seen_rates.clone()),
        (SplitKind::TestSeen, cfg.test_seen, seen_rates),
        (SplitKind::TestUnseen, cfg.test_unseen, unseen_rates),
    ]
}

/// Generate all four splits in memory. Holdout diseases never appear
/// (positively or otherwise) outside the unseen test split.
pub fn make_split(kb: &KnowledgeBase, cfg: &GeneratorConfig) -> Result<Splits, CorpusError> {
    cfg.validate()?;
    let mut out: BTreeMap<&'static str, Vec<SyntheticSample>> = BTreeMap::new();
    let mut cursor = 0u64;
    for (kind, count, rates) in split_plan(cfg) {
        let seeds: Vec<u64> =
            (0..count).map(|i| sample_seed(cfg.seed, cursor + i as u64)).collect();
        cursor += count as u64;
        let samples: Result<Vec<_>, _> = seeds
            .par_iter()
            .map(|&s| generate_sample(s, kb, cfg, &rates))
            .collect();
        out.insert(kind.dir_name(), samples?);
    }
    Ok(Splits {
        train: out.remove("train").unwrap(),
        valid: out.remove("valid").unwrap(),
        test_seen: out.remove("test-seen").unwrap(),
        test_unseen: out.remove("test-unseen").unwrap(),
    })
}

/// One line of a split's `index.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub seed: u64,
    pub image: String,
    pub report: String,
    pub target: String,
    pub masks: BTreeMap<String, String>,
}

/// Generate the corpus and write it under `dir`. Streaming and parallel by
/// sample; byte-identical for identical `(kb, cfg)`.
pub fn synthesize_corpus(
    dir: &Path,
    kb: &KnowledgeBase,
    cfg: &GeneratorConfig,
) -> Result<(), CorpusError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    kb.save(&dir.join("kb.toml")).map_err(|e| CorpusError::Config(e.to_string()))?;
    std::fs::write(dir.join("generator.toml"), cfg.to_toml_string())?;

    let mut cursor = 0u64;
    for (kind, count, rates) in split_plan(cfg) {
        let split_dir = dir.join(kind.dir_name());
        std::fs::create_dir_all(&split_dir)?;
        let seeds: Vec<(usize, u64)> = (0..count)
            .map(|i| (i, sample_seed(cfg.seed, cursor + i as u64)))
            .collect();
        cursor += count as u64;

        let entries: Result<Vec<IndexEntry>, CorpusError> = seeds
            .par_iter()
            .map(|&(id, seed)| {
                let sample = generate_sample(seed, kb, cfg, &rates)?;
                write_sample(&split_dir, id, &sample, kb)
            })
            .collect();
        let mut index = String::new();
        for entry in entries? {
            index.push_str(&serde_json::to_string(&entry).expect("index entry serializes"));
            index.push('\n');
        }
        std::fs::write(split_dir.join("index.jsonl"), index)?;
    }
    Ok(())
}

fn write_sample(
    split_dir: &Path,
    id: usize,
    sample: &SyntheticSample,
    kb: &KnowledgeBase,
) -> Result<IndexEntry, CorpusError> {
    let image_name = format!("{id:05}.image.grid");
    let report_name = format!("{id:05}.report.txt");
    let target_name = format!("{id:05}.target.grid");

    write_grid(&split_dir.join(&image_name), &sample.image, GridDtype::F32)?;
    std::fs::write(split_dir.join(&report_name), &sample.report)?;
    write_grid(&split_dir.join(&target_name), &target_grid(&sample.target), GridDtype::F32)?;

    let mut masks = BTreeMap::new();
    for (disease, mask) in &sample.masks {
        let mask_name = format!("{id:05}.mask.{disease}.grid");
        let as_f64 = mask.mapv(|v| v as f64);
        write_grid(&split_dir.join(&mask_name), &as_f64, GridDtype::U8)?;
        masks.insert(disease.clone(), mask_name);
    }
    debug_assert_eq!(sample.target.presence.len(), kb.diseases.len());

    Ok(IndexEntry {
        id,
        seed: sample.seed,
        image: image_name,
        report: report_name,
        target: target_name,
        masks,
    })
}

fn target_grid(target: &MultiLabelTarget) -> Array2<f64> {
    let n = target.presence.len();
    let mut g = Array2::<f64>::zeros((n, 2));
    for j in 0..n {
        g[(j, 0)] = target.presence[j] as f64;
        g[(j, 1)] = target.location_index[j].map(|l| l as f64).unwrap_or(-1.0);
    }
    g
}

fn target_from_grid(g: &Array2<f64>) -> Result<MultiLabelTarget, CorpusError> {
    if g.ncols() != 2 {
        return Err(CorpusError::Parse(format!("target grid has {} columns", g.ncols())));
    }
    let mut t = MultiLabelTarget::empty(g.nrows());
    for j in 0..g.nrows() {
        t.presence[j] = if g[(j, 0)] >= 0.5 { 1 } else { 0 };
        t.location_index[j] = if g[(j, 1)] >= 0.0 { Some(g[(j, 1)] as usize) } else { None };
    }
    Ok(t)
}

/// A sample loaded back from a corpus directory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: usize,
    pub seed: u64,
    pub image: Array2<f64>,
    pub report: String,
    pub target: MultiLabelTarget,
    pub masks: BTreeMap<String, Array2<u8>>,
}

/// Load a split's index and samples from a corpus directory.
pub fn load_split(dir: &Path, kind: SplitKind) -> Result<Vec<LoadedSample>, CorpusError> {
    let split_dir = dir.join(kind.dir_name());
    let index = std::fs::read_to_string(split_dir.join("index.jsonl"))?;
    let entries: Result<Vec<IndexEntry>, _> =
        index.lines().map(serde_json::from_str::<IndexEntry>).collect();
    let entries = entries.map_err(|e| CorpusError::Parse(e.to_string()))?;

    entries
        .par_iter()
        .map(|entry| {
            let image = read_grid(&split_dir.join(&entry.image))?;
            let report = std::fs::read_to_string(split_dir.join(&entry.report))?;
            let target = target_from_grid(&read_grid(&split_dir.join(&entry.target))?)?;
            let mut masks = BTreeMap::new();
            for (disease, file) in &entry.masks {
                masks.insert(
                    disease.clone(),
                    read_grid(&split_dir.join(file))?.mapv(|v| v as u8),
                );
            }
            Ok(LoadedSample { id: entry.id, seed: entry.seed, image, report, target, masks })
        })
        .collect()
}

/// Load just the knowledge base stored with a corpus.
pub fn load_corpus_kb(dir: &Path) -> Result<KnowledgeBase, CorpusError> {
    KnowledgeBase::load(&dir.join("kb.toml")).map_err(|e| CorpusError::Config(e.to_string()))
}

pub fn corpus_generator_config(dir: &Path) -> Result<GeneratorConfig, CorpusError> {
    GeneratorConfig::load(&dir.join("generator.toml"))
}

/// Directory helper used by commands writing run artifacts.
pub fn split_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(kind.dir_name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render::{default_generator_config, derive_kb};

    fn small_cfg() -> GeneratorConfig {
        let mut cfg = default_generator_config();
        cfg.train = 60;
        cfg.valid = 20;
        cfg.test_seen = 20;
        cfg.test_unseen = 20;
        cfg
    }

    #[test]
    fn holdout_never_positive_outside_unseen_split() {
        let cfg = small_cfg();
        let kb = derive_kb(&cfg);
        let splits = make_split(&kb, &cfg).unwrap();
        let holdout_idx: Vec<usize> =
            cfg.holdout.iter().map(|h| kb.disease_index(h).unwrap()).collect();
        for kind in [SplitKind::Train, SplitKind::Valid, SplitKind::TestSeen] {
            for s in splits.get(kind) {
                for &j in &holdout_idx {
                    assert_eq!(s.target.presence[j], 0, "{kind} leaked holdout");
                }
            }
        }
        let unseen_hits: usize = splits
            .test_unseen
            .iter()
            .map(|s| holdout_idx.iter().filter(|&&j| s.target.presence[j] == 1).count())
            .sum();
        assert!(unseen_hits > 0, "unseen split contains no holdout positives");
    }

    #[test]
    fn split_seeds_are_pairwise_disjoint() {
        let cfg = small_cfg();
        let kb = derive_kb(&cfg);
        let splits = make_split(&kb, &cfg).unwrap();
        let sets: Vec<std::collections::BTreeSet<u64>> = SplitKind::ALL
            .iter()
            .map(|&k| splits.get(k).iter().map(|s| s.seed).collect())
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]), "splits {i} and {j} share seeds");
            }
        }
    }

    /// Counting oracle: empirical per-disease positive marginals in train
    /// stay within tolerance of the requested rate.
    #[test]
    fn train_class_balance_matches_requested_marginals() {
        let mut cfg = default_generator_config();
        cfg.train = 800;
        cfg.valid = 10;
        cfg.test_seen = 10;
        cfg.test_unseen = 10;
        let kb = derive_kb(&cfg);
        let splits = make_split(&kb, &cfg).unwrap();
        for name in cfg.seen_disease_names() {
            let j = kb.disease_index(&name).unwrap();
            let hits: usize =
                splits.train.iter().map(|s| s.target.presence[j] as usize).sum();
            let empirical = hits as f64 / cfg.train as f64;
            // 800 Bernoulli(0.2) draws: sigma ~ 0.014, allow 4+ sigma
            assert!(
                (empirical - cfg.positive_rate).abs() < 0.06,
                "{name}: empirical {empirical} vs requested {}",
                cfg.positive_rate
            );
        }
    }

    #[test]
    fn holdout_exhausting_diseases_is_config_error() {
        let mut cfg = small_cfg();
        cfg.holdout = cfg.diseases.keys().cloned().collect();
        assert!(matches!(make_split(&derive_kb(&cfg), &cfg), Err(CorpusError::Config(_))));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let mut cfg = small_cfg();
        cfg.train = 12;
        cfg.valid = 4;
        cfg.test_seen = 4;
        cfg.test_unseen = 4;
        let kb = derive_kb(&cfg);
        let dir = tempfile::tempdir().unwrap();
        synthesize_corpus(dir.path(), &kb, &cfg).unwrap();

        let kb_back = load_corpus_kb(dir.path()).unwrap();
        assert_eq!(kb, kb_back);

        let splits = make_split(&kb, &cfg).unwrap();
        for kind in SplitKind::ALL {
            let loaded = load_split(dir.path(), kind).unwrap();
            let generated = splits.get(kind);
            assert_eq!(loaded.len(), generated.len());
            for (l, g) in loaded.iter().zip(generated) {
                assert_eq!(l.seed, g.seed);
                assert_eq!(l.report, g.report);
                assert_eq!(l.target, g.target);
                assert_eq!(l.masks, g.masks);
                // image goes through f32 storage: compare at f32 precision
                for (a, b) in l.image.iter().zip(g.image.iter()) {
                    assert_eq!(*a, *b as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn synthesis_is_byte_identical_across_runs() {
        let mut cfg = small_cfg();
        cfg.train = 6;
        cfg.valid = 2;
        cfg.test_seen = 2;
        cfg.test_unseen = 2;
        let kb = derive_kb(&cfg);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synthesize_corpus(d1.path(), &kb, &cfg).unwrap();
        synthesize_corpus(d2.path(), &kb, &cfg).unwrap();
        for kind in SplitKind::ALL {
            let i1 = std::fs::read(d1.path().join(kind.dir_name()).join("index.jsonl")).unwrap();
            let i2 = std::fs::read(d2.path().join(kind.dir_name()).join("index.jsonl")).unwrap();
            assert_eq!(i1, i2);
            let img1 =
                std::fs::read(d1.path().join(kind.dir_name()).join("00000.image.grid")).unwrap();
            let img2 =
                std::fs::read(d2.path().join(kind.dir_name()).join("00000.image.grid")).unwrap();
            assert_eq!(img1, img2);
        }
    }
}
