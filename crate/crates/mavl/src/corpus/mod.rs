//! Synthetic paired (image, report, mask) corpus.
//!
//! Each disease's visual signature is the composition of the same aspect
//! values its knowledge-base texts describe, so an unseen disease really is
//! a new combination of seen visual ingredients. Reports are generated from
//! the sampled facts through a small template grammar, and the rule-based
//! parser inverts that grammar exactly.

pub mod render;
pub mod report;
pub mod split;

use std::collections::BTreeMap;

use ndarray::Array2;
use thiserror::Error;

use crate::grid::GridError;
use crate::kb::KnowledgeBase;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("bad generator config: {0}")]
    Config(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown location {0:?}")]
    UnknownLocation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("malformed corpus file: {0}")]
    Parse(String),
}

/// One (entity, location, exist) fact extracted from or rendered into a
/// report sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTriplet {
    pub entity: String,
    pub location: Option<String>,
    pub exist: bool,
}

impl EntityTriplet {
    pub fn positive(entity: &str, location: Option<&str>) -> Self {
        Self { entity: entity.into(), location: location.map(Into::into), exist: true }
    }

    pub fn negative(entity: &str) -> Self {
        Self { entity: entity.into(), location: None, exist: false }
    }
}

/// Per-image supervision: presence bit and optional stated-location index
/// for every disease in knowledge-base order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelTarget {
    pub presence: Vec<u8>,
    pub location_index: Vec<Option<usize>>,
}

impl MultiLabelTarget {
    pub fn empty(n: usize) -> Self {
        Self { presence: vec![0; n], location_index: vec![None; n] }
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        self.presence
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| (p == 1).then_some(j))
            .collect()
    }

    /// (disease index, location index) pairs for positively present diseases
    /// with a stated location.
    pub fn located(&self) -> Vec<(usize, usize)> {
        self.location_index
            .iter()
            .enumerate()
            .filter_map(|(j, loc)| loc.map(|l| (j, l)))
            .collect()
    }
}

/// Fold triplets into a multi-label target. Later triplets for the same
/// entity override earlier ones. In lenient mode unknown entities and
/// locations are dropped; in strict mode they are errors.
pub fn build_targets(
    triplets: &[EntityTriplet],
    kb: &KnowledgeBase,
    strict: bool,
) -> Result<MultiLabelTarget, CorpusError> {
    let mut target = MultiLabelTarget::empty(kb.diseases.len());
    for t in triplets {
        let Some(j) = kb.disease_index(&t.entity) else {
            if strict {
                return Err(CorpusError::UnknownEntity(t.entity.clone()));
            }
            continue;
        };
        if t.exist {
            target.presence[j] = 1;
            target.location_index[j] = match &t.location {
                Some(name) => match kb.location_index(name) {
                    Some(l) => Some(l),
                    None if strict => {
                        return Err(CorpusError::UnknownLocation(name.clone()))
                    }
                    None => None,
                },
                None => None,
            };
        } else {
            target.presence[j] = 0;
            target.location_index[j] = None;
        }
    }
    Ok(target)
}

/// One generated corpus sample.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub seed: u64,
    /// `[H, W]` intensities in `[0, 1]`.
    pub image: Array2<f64>,
    pub report: String,
    /// Per-disease binary masks, present only for positively present diseases.
    pub masks: BTreeMap<String, Array2<u8>>,
    pub target: MultiLabelTarget,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::DiseaseEntry;

    pub(crate) fn kb_with(names: &[&str], locations: &[&str]) -> KnowledgeBase {
        let aspects = vec!["texture".to_string()];
        KnowledgeBase {
            version: "1".into(),
            aspects: aspects.clone(),
            locations: locations.iter().map(|s| s.to_string()).collect(),
            diseases: names
                .iter()
                .map(|n| DiseaseEntry {
                    name: n.to_string(),
                    description: format!("{n} def"),
                    seen: true,
                    aspects: aspects.iter().map(|a| (a.clone(), format!("{n} {a}"))).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn targets_place_presence_and_location() {
        let kb = kb_with(&["c1", "c2", "c3"], &["left lung", "right lung"]);
        let t = build_targets(&[EntityTriplet::positive("c2", Some("left lung"))], &kb, true)
            .unwrap();
        assert_eq!(t.presence, vec![0, 1, 0]);
        assert_eq!(t.location_index, vec![None, Some(0), None]);
    }

    #[test]
    fn empty_triplets_are_all_zero() {
        let kb = kb_with(&["c1", "c2"], &["left lung"]);
        let t = build_targets(&[], &kb, true).unwrap();
        assert_eq!(t.presence, vec![0, 0]);
        assert!(t.positive_indices().is_empty());
    }

    #[test]
    fn last_mention_wins() {
        let kb = kb_with(&["c1"], &["left lung"]);
        let t = build_targets(
            &[EntityTriplet::positive("c1", None), EntityTriplet::negative("c1")],
            &kb,
            true,
        )
        .unwrap();
        assert_eq!(t.presence, vec![0]);
        let t = build_targets(
            &[EntityTriplet::negative("c1"), EntityTriplet::positive("c1", Some("left lung"))],
            &kb,
            true,
        )
        .unwrap();
        assert_eq!(t.presence, vec![1]);
        assert_eq!(t.location_index, vec![Some(0)]);
    }

    #[test]
    fn strict_mode_rejects_unknowns() {
        let kb = kb_with(&["c1"], &["left lung"]);
        assert!(matches!(
            build_targets(&[EntityTriplet::positive("mystery", None)], &kb, true),
            Err(CorpusError::UnknownEntity(_))
        ));
        assert!(matches!(
            build_targets(&[EntityTriplet::positive("c1", Some("nowhere"))], &kb, true),
            Err(CorpusError::UnknownLocation(_))
        ));
        // lenient mode drops them instead
        let t = build_targets(&[EntityTriplet::positive("mystery", None)], &kb, false).unwrap();
        assert_eq!(t.presence, vec![0]);
        let t =
            build_targets(&[EntityTriplet::positive("c1", Some("nowhere"))], &kb, false).unwrap();
        assert_eq!(t.presence, vec![1]);
        assert_eq!(t.location_index, vec![None]);
    }
}
