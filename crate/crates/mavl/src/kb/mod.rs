//! Aspect knowledge base: disease entities, their visual-aspect descriptions,
//! and the location vocabulary.
//!
//! The on-disk format is a single TOML document with exactly four top-level
//! keys — `version`, `aspects`, `locations`, `diseases` — where each disease
//! carries `name`, `description`, `seen`, and an `aspects` table holding one
//! non-empty description per aspect name. Unknown keys are rejected. Array
//! order is contract-bearing: disease index and location index come from the
//! file order and stay stable.

pub mod fetch;

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved entry for the non-pathological comparison category used by the
/// contrastive zero-shot path.
pub const HEALTHY_NAME: &str = "healthy";

pub type AspectName = String;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed knowledge base: {0}")]
    Parse(String),
    #[error("invalid knowledge base entry {entity:?}: {detail}")]
    Validation { entity: String, detail: String },
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("entity {0:?} already present")]
    DuplicateEntity(String),
    #[error("expected {expected} description texts, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("request for {entity:?} aspect {aspect:?} failed: {detail}")]
    Network { entity: String, aspect: String, detail: String },
    #[error("cache entry {0} is corrupt")]
    CacheCorrupt(std::path::PathBuf),
}

/// One disease with its clinical definition and per-aspect descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseEntry {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub seen: bool,
    pub aspects: IndexMap<AspectName, String>,
}

/// The full knowledge base. Immutable after load; updates go through
/// value-semantic operations like [`KnowledgeBase::register_novel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeBase {
    pub version: String,
    pub aspects: Vec<AspectName>,
    pub locations: Vec<String>,
    pub diseases: Vec<DiseaseEntry>,
}

impl KnowledgeBase {
    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, KbError> {
        let kb: KnowledgeBase =
            toml::from_str(text).map_err(|e| KbError::Parse(e.to_string()))?;
        kb.validate()?;
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Serialize with aspect maps canonicalized to the `aspects` list order.
    pub fn to_toml_string(&self) -> Result<String, KbError> {
        let mut canon = self.clone();
        for d in &mut canon.diseases {
            let mut ordered = IndexMap::with_capacity(d.aspects.len());
            for a in &self.aspects {
                if let Some(text) = d.aspects.get(a) {
                    ordered.insert(a.clone(), text.clone());
                }
            }
            d.aspects = ordered;
        }
        toml::to_string_pretty(&canon).map_err(|e| KbError::Parse(e.to_string()))
    }

    /// Number of aspects per disease (the KB-wide aspect set size).
    pub fn aspect_count(&self) -> usize {
        self.aspects.len()
    }

    /// Number of query positions per disease: the clinical definition at
    /// position 0 followed by one position per aspect.
    pub fn query_len(&self) -> usize {
        self.aspect_count() + 1
    }

    pub fn validate(&self) -> Result<(), KbError> {
        let top = |detail: String| KbError::Validation { entity: "<kb>".into(), detail };
        if self.aspects.is_empty() {
            return Err(top("aspect list is empty".into()));
        }
        if self.locations.is_empty() {
            return Err(top("location list is empty".into()));
        }
        if self.diseases.is_empty() {
            return Err(top("disease list is empty".into()));
        }
        check_unique(&self.aspects).map_err(|d| top(format!("duplicate aspect {d:?}")))?;
        check_unique(&self.locations).map_err(|d| top(format!("duplicate location {d:?}")))?;
        let names: Vec<String> = self.diseases.iter().map(|d| d.name.clone()).collect();
        check_unique(&names).map_err(|d| KbError::DuplicateEntity(d))?;

        for disease in &self.diseases {
            let fail = |detail: String| KbError::Validation {
                entity: disease.name.clone(),
                detail,
            };
            if disease.name.trim().is_empty() {
                return Err(fail("empty disease name".into()));
            }
            if disease.description.trim().is_empty() {
                return Err(fail("empty description".into()));
            }
            for aspect in &self.aspects {
                match disease.aspects.get(aspect) {
                    None => return Err(fail(format!("missing aspect {aspect:?}"))),
                    Some(text) if text.trim().is_empty() => {
                        return Err(fail(format!("empty description for aspect {aspect:?}")))
                    }
                    Some(_) => {}
                }
            }
            for key in disease.aspects.keys() {
                if !self.aspects.contains(key) {
                    return Err(fail(format!("unknown aspect {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn disease(&self, entity: &str) -> Option<&DiseaseEntry> {
        self.diseases.iter().find(|d| d.name == entity)
    }

    pub fn disease_index(&self, entity: &str) -> Option<usize> {
        self.diseases.iter().position(|d| d.name == entity)
    }

    pub fn location_index(&self, location: &str) -> Option<usize> {
        self.locations.iter().position(|l| l == location)
    }

    /// Diseases in the training vocabulary: `seen` entries, excluding the
    /// reserved healthy category.
    pub fn seen_diseases(&self) -> Vec<&DiseaseEntry> {
        self.diseases
            .iter()
            .filter(|d| d.seen && d.name != HEALTHY_NAME)
            .collect()
    }

    /// Ordered description texts for one disease: position 0 is the clinical
    /// definition, positions 1..=K follow the KB aspect order.
    pub fn query_aspects(&self, entity: &str) -> Result<Vec<String>, KbError> {
        let disease = self
            .disease(entity)
            .ok_or_else(|| KbError::UnknownEntity(entity.to_string()))?;
        let mut texts = Vec::with_capacity(self.query_len());
        texts.push(disease.description.clone());
        for aspect in &self.aspects {
            texts.push(disease.aspects[aspect].clone());
        }
        Ok(texts)
    }

    /// Return a new knowledge base with `entity` appended as an unseen
    /// category. `texts` must hold the clinical definition followed by one
    /// description per aspect, in KB aspect order. `self` is unchanged.
    pub fn register_novel(
        &self,
        entity: &str,
        texts: &[String],
    ) -> Result<KnowledgeBase, KbError> {
        if self.disease(entity).is_some() {
            return Err(KbError::DuplicateEntity(entity.to_string()));
        }
        if texts.len() != self.query_len() {
            return Err(KbError::ArityMismatch { expected: self.query_len(), got: texts.len() });
        }
        if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(KbError::Validation {
                entity: entity.to_string(),
                detail: format!("empty description at query position {pos}"),
            });
        }
        let mut next = self.clone();
        next.diseases.push(DiseaseEntry {
            name: entity.to_string(),
            description: texts[0].clone(),
            seen: false,
            aspects: self
                .aspects
                .iter()
                .cloned()
                .zip(texts[1..].iter().cloned())
                .collect(),
        });
        next.validate()?;
        Ok(next)
    }
}

fn check_unique(items: &[String]) -> Result<(), String> {
    let mut seen = std::collections::BTreeSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(item.clone());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_kb() -> KnowledgeBase {
        let aspects = vec!["texture".to_string(), "shape".to_string()];
        let mk = |name: &str, seen: bool| DiseaseEntry {
            name: name.to_string(),
            description: format!("{name} definition"),
            seen,
            aspects: aspects
                .iter()
                .map(|a| (a.clone(), format!("{name} {a} text")))
                .collect(),
        };
        let diseases = vec![mk("edema", true), mk("pneumothorax", true)];
        KnowledgeBase {
            version: "1".into(),
            aspects,
            locations: vec!["left lung".into(), "right lung".into()],
            diseases,
        }
    }

    #[test]
    fn counts_follow_file_content() {
        let kb = tiny_kb();
        assert_eq!(kb.diseases.len(), 2);
        assert_eq!(kb.aspect_count(), 2);
        assert_eq!(kb.locations.len(), 2);
        kb.validate().unwrap();
    }

    #[test]
    fn missing_aspect_names_entry_and_aspect() {
        let mut kb = tiny_kb();
        kb.diseases[0].aspects.shift_remove("texture");
        let err = kb.validate().unwrap_err();
        match err {
            KbError::Validation { entity, detail } => {
                assert_eq!(entity, "edema");
                assert!(detail.contains("texture"), "{detail}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let mut text = tiny_kb().to_toml_string().unwrap();
        text.insert_str(0, "mystery = true\n");
        assert!(matches!(KnowledgeBase::from_toml_str(&text), Err(KbError::Parse(_))));
    }

    #[test]
    fn unknown_disease_key_rejected() {
        let text = tiny_kb()
            .to_toml_string()
            .unwrap()
            .replace("seen = true", "seen = true\nextra = 1");
        assert!(matches!(KnowledgeBase::from_toml_str(&text), Err(KbError::Parse(_))));
    }

    #[test]
    fn query_aspects_is_definition_then_aspect_order() {
        let kb = tiny_kb();
        let texts = kb.query_aspects("edema").unwrap();
        assert_eq!(texts.len(), kb.query_len());
        assert_eq!(texts[0], "edema definition");
        assert_eq!(texts[1], "edema texture text");
        assert_eq!(texts[2], "edema shape text");
        assert_eq!(texts, kb.query_aspects("edema").unwrap());
    }

    #[test]
    fn query_aspects_unknown_entity() {
        assert!(matches!(
            tiny_kb().query_aspects("notadisease"),
            Err(KbError::UnknownEntity(_))
        ));
    }

    #[test]
    fn register_novel_appends_without_reordering() {
        let kb = tiny_kb();
        let texts: Vec<String> =
            ["covid definition", "covid texture", "covid shape"].map(String::from).to_vec();
        let next = kb.register_novel("covid-19", &texts).unwrap();
        assert_eq!(next.diseases.len(), kb.diseases.len() + 1);
        assert!(!next.diseases.last().unwrap().seen);
        for (i, d) in kb.diseases.iter().enumerate() {
            assert_eq!(next.diseases[i], *d);
        }
        // original untouched
        assert_eq!(kb.diseases.len(), 2);
    }

    #[test]
    fn register_novel_duplicate_and_arity() {
        let kb = tiny_kb();
        let texts: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        assert!(matches!(
            kb.register_novel("edema", &texts),
            Err(KbError::DuplicateEntity(_))
        ));
        assert!(matches!(
            kb.register_novel("covid-19", &texts[..2]),
            Err(KbError::ArityMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn toml_round_trip_preserves_value() {
        let kb = tiny_kb();
        let text = kb.to_toml_string().unwrap();
        let back = KnowledgeBase::from_toml_str(&text).unwrap();
        assert_eq!(kb, back);
    }
}
