//! Report template grammar and the rule-based parser that inverts it.
//!
//! Grammar (one sentence per fact, sentences joined by a space):
//!
//! * positive, located — `"{entity} is present in the {location}."`,
//!   `"{entity} seen in the {location}."`,
//!   `"Findings consistent with {entity} in the {location}."`,
//!   `"{entity} in {location}."`
//! * positive, no location — `"{entity} is present."`, `"There is {entity}."`
//! * negative — `"No {entity}."`, `"No evidence of {entity}."`,
//!   `"Without {entity}."`, `"The image is free of {entity}."`
//! * empty fact list — `"No acute findings."`
//!
//! Parsing is sentence-scoped: a negation cue anywhere in a sentence sets
//! `exist = 0` for every entity mentioned in that sentence, and the first
//! knowledge-base location named in the sentence becomes the stated location
//! of its positive mentions.

use rand::Rng;

use super::EntityTriplet;
use crate::kb::KnowledgeBase;

pub const POSITIVE_LOCATED_TEMPLATES: [&str; 4] = [
    "{entity} is present in the {location}.",
    "{entity} seen in the {location}.",
    "Findings consistent with {entity} in the {location}.",
    "{entity} in {location}.",
];

pub const POSITIVE_UNLOCATED_TEMPLATES: [&str; 2] =
    ["{entity} is present.", "There is {entity}."];

pub const NEGATIVE_TEMPLATES: [&str; 4] = [
    "No {entity}.",
    "No evidence of {entity}.",
    "Without {entity}.",
    "The image is free of {entity}.",
];

pub const NORMAL_STATEMENT: &str = "No acute findings.";

/// Words that negate every mention in their sentence.
const NEGATION_UNIGRAMS: [&str; 4] = ["no", "not", "without", "absent"];
const NEGATION_BIGRAMS: [(&str, &str); 2] = [("free", "of"), ("negative", "for")];

/// Template filler vocabulary; tokens outside this set and outside the
/// knowledge-base vocabulary count as dropped.
const FILLER: [&str; 16] = [
    "there", "is", "are", "seen", "present", "in", "the", "findings", "consistent", "with",
    "evidence", "of", "image", "at", "acute", "and",
];

/// Number of template alternatives for a triplet of this polarity/location.
pub fn template_count(triplet: &EntityTriplet) -> usize {
    if !triplet.exist {
        NEGATIVE_TEMPLATES.len()
    } else if triplet.location.is_some() {
        POSITIVE_LOCATED_TEMPLATES.len()
    } else {
        POSITIVE_UNLOCATED_TEMPLATES.len()
    }
}

/// Render one triplet with a fixed template index (used by the exhaustive
/// round-trip tests).
pub fn render_triplet(triplet: &EntityTriplet, template: usize) -> String {
    let raw = if !triplet.exist {
        NEGATIVE_TEMPLATES[template % NEGATIVE_TEMPLATES.len()].replace("{entity}", &triplet.entity)
    } else if let Some(location) = &triplet.location {
        POSITIVE_LOCATED_TEMPLATES[template % POSITIVE_LOCATED_TEMPLATES.len()]
            .replace("{entity}", &triplet.entity)
            .replace("{location}", location)
    } else {
        POSITIVE_UNLOCATED_TEMPLATES[template % POSITIVE_UNLOCATED_TEMPLATES.len()]
            .replace("{entity}", &triplet.entity)
    };
    capitalize(&raw)
}

/// Render a full report, choosing templates with `rng`. An empty triplet
/// list becomes the normal statement.
pub fn render_report<R: Rng>(triplets: &[EntityTriplet], rng: &mut R) -> String {
    if triplets.is_empty() {
        return NORMAL_STATEMENT.to_string();
    }
    triplets
        .iter()
        .map(|t| {
            let idx = rng.gen_range(0..template_count(t));
            render_triplet(t, idx)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parser output: extracted facts plus a count of tokens that matched
/// neither the knowledge-base vocabulary nor the template grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReport {
    pub triplets: Vec<EntityTriplet>,
    pub dropped_tokens: usize,
}

/// Rule-based stand-in for a report entity tagger: one triplet per
/// recognized disease mention, sentence-scoped negation, first stated
/// location per sentence. Deterministic.
pub fn parse_report(text: &str, kb: &KnowledgeBase) -> ParsedReport {
    let mut triplets = Vec::new();
    let mut dropped = 0usize;

    let disease_tokens: Vec<(Vec<String>, &str)> = kb
        .diseases
        .iter()
        .map(|d| (tokenize(&d.name), d.name.as_str()))
        .collect();
    let location_tokens: Vec<(Vec<String>, &str)> = kb
        .locations
        .iter()
        .map(|l| (tokenize(l), l.as_str()))
        .collect();

    for sentence in text.split(['.', '!', '?']) {
        let tokens = tokenize(sentence);
        if tokens.is_empty() {
            continue;
        }

        let mut consumed = vec![false; tokens.len()];
        let mentions = match_phrases(&tokens, &disease_tokens, &mut consumed);
        let locations = match_phrases(&tokens, &location_tokens, &mut consumed);
        let negated = has_negation(&tokens, &mut consumed);
        let stated = locations.first().map(|(_, name)| name.to_string());

        for (_, entity) in &mentions {
            triplets.push(EntityTriplet {
                entity: entity.to_string(),
                location: if negated { None } else { stated.clone() },
                exist: !negated,
            });
        }

        for (i, token) in tokens.iter().enumerate() {
            if !consumed[i] && !FILLER.contains(&token.as_str()) {
                dropped += 1;
            }
        }
    }

    ParsedReport { triplets, dropped_tokens: dropped }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Find ordered, non-overlapping phrase matches, longest phrase first.
fn match_phrases<'a>(
    tokens: &[String],
    phrases: &[(Vec<String>, &'a str)],
    consumed: &mut [bool],
) -> Vec<(usize, &'a str)> {
    let mut by_len: Vec<&(Vec<String>, &str)> = phrases.iter().collect();
    by_len.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(b.1)));

    let mut hits = Vec::new();
    for (phrase, name) in by_len {
        if phrase.is_empty() || phrase.len() > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - phrase.len() {
            let span = start..start + phrase.len();
            if span.clone().any(|i| consumed[i]) {
                continue;
            }
            if tokens[span.clone()] == phrase[..] {
                for i in span {
                    consumed[i] = true;
                }
                hits.push((start, *name));
            }
        }
    }
    hits.sort_by_key(|(start, _)| *start);
    hits
}

fn has_negation(tokens: &[String], consumed: &mut [bool]) -> bool {
    let mut negated = false;
    for (i, t) in tokens.iter().enumerate() {
        if NEGATION_UNIGRAMS.contains(&t.as_str()) {
            consumed[i] = true;
            negated = true;
        }
    }
    for (a, b) in NEGATION_BIGRAMS {
        for i in 0..tokens.len().saturating_sub(1) {
            if tokens[i] == a && tokens[i + 1] == b {
                consumed[i] = true;
                consumed[i + 1] = true;
                negated = true;
            }
        }
    }
    negated
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::kb_with;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn documented_example() {
        let kb = kb_with(&["pneumothorax", "edema"], &["left lung", "right lung"]);
        let parsed = parse_report("No pneumothorax. Edema in left lung.", &kb);
        assert_eq!(
            parsed.triplets,
            vec![
                EntityTriplet::negative("pneumothorax"),
                EntityTriplet::positive("edema", Some("left lung")),
            ]
        );
        assert_eq!(parsed.dropped_tokens, 0);
    }

    #[test]
    fn empty_input() {
        let kb = kb_with(&["edema"], &["left lung"]);
        let parsed = parse_report("", &kb);
        assert!(parsed.triplets.is_empty());
        assert_eq!(parsed.dropped_tokens, 0);
    }

    #[test]
    fn normal_statement_parses_to_nothing() {
        let kb = kb_with(&["edema"], &["left lung"]);
        assert!(parse_report(NORMAL_STATEMENT, &kb).triplets.is_empty());
    }

    #[test]
    fn unknown_mention_is_dropped_and_counted() {
        let kb = kb_with(&["edema"], &["left lung"]);
        let parsed = parse_report("Glioblastoma seen in the left lung.", &kb);
        assert!(parsed.triplets.is_empty());
        assert_eq!(parsed.dropped_tokens, 1);
    }

    #[test]
    fn exhaustive_template_round_trip() {
        let kb = kb_with(
            &["d1", "d2", "covid-19", "edema"],
            &["left lung", "right lung", "heart", "spine"],
        );
        for disease in &kb.diseases {
            // negatives
            let t = EntityTriplet::negative(&disease.name);
            for idx in 0..template_count(&t) {
                let report = render_triplet(&t, idx);
                let parsed = parse_report(&report, &kb);
                assert_eq!(parsed.triplets, vec![t.clone()], "report {report:?}");
                assert_eq!(parsed.dropped_tokens, 0, "report {report:?}");
            }
            // positive without location
            let t = EntityTriplet::positive(&disease.name, None);
            for idx in 0..template_count(&t) {
                let report = render_triplet(&t, idx);
                let parsed = parse_report(&report, &kb);
                assert_eq!(parsed.triplets, vec![t.clone()], "report {report:?}");
            }
            // positive with every location
            for location in &kb.locations {
                let t = EntityTriplet::positive(&disease.name, Some(location));
                for idx in 0..template_count(&t) {
                    let report = render_triplet(&t, idx);
                    let parsed = parse_report(&report, &kb);
                    assert_eq!(parsed.triplets, vec![t.clone()], "report {report:?}");
                    assert_eq!(parsed.dropped_tokens, 0, "report {report:?}");
                }
            }
        }
    }

    #[test]
    fn multi_sentence_reports_round_trip() {
        let kb = kb_with(&["d1", "d2", "d3"], &["left lung", "heart"]);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut triplets = Vec::new();
            for _ in 0..rng.gen_range(0..4) {
                let name = format!("d{}", rng.gen_range(1..=3));
                triplets.push(if rng.gen_bool(0.5) {
                    let loc = if rng.gen_bool(0.5) {
                        Some(kb.locations[rng.gen_range(0..2)].as_str())
                    } else {
                        None
                    };
                    EntityTriplet::positive(&name, loc)
                } else {
                    EntityTriplet::negative(&name)
                });
            }
            let report = render_report(&triplets, &mut rng);
            assert_eq!(parse_report(&report, &kb).triplets, triplets, "report {report:?}");
        }
    }

    proptest! {
        /// Round trip over the full grammar: arbitrary triplet lists where
        /// negatives carry no location (the grammar never states one).
        #[test]
        fn grammar_round_trip(
            picks in proptest::collection::vec((0usize..4, any::<bool>(), 0usize..3, 0usize..4), 0..6)
        ) {
            let kb = kb_with(&["d1", "d2", "d3", "d4"], &["left lung", "right lung"]);
            let triplets: Vec<EntityTriplet> = picks
                .iter()
                .map(|&(d, exist, loc, _)| {
                    let name = format!("d{}", d + 1);
                    if exist {
                        let location = match loc {
                            0 => None,
                            1 => Some("left lung"),
                            _ => Some("right lung"),
                        };
                        EntityTriplet::positive(&name, location)
                    } else {
                        EntityTriplet::negative(&name)
                    }
                })
                .collect();
            let report: String = triplets
                .iter()
                .zip(picks.iter())
                .map(|(t, &(_, _, _, tmpl))| render_triplet(t, tmpl))
                .collect::<Vec<_>>()
                .join(" ");
            let report = if triplets.is_empty() { NORMAL_STATEMENT.to_string() } else { report };
            prop_assert_eq!(parse_report(&report, &kb).triplets, triplets);
        }
    }
}
