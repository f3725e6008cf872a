//! Triplet probabilities: length-normalized field probabilities, per-set joint
//! probabilities, weighted aggregation across sets and threshold ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_sets::ContextSet;
use crate::corpus::{Corpus, Document, KnowledgeTriplet, RelationType};
use crate::lm_client::{CompletionRequest, CompletionResponse, LmClient, LmError};
use crate::prompt::{self, PromptError};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("span covers no tokens")]
    EmptySpan,
    #[error("{extractions} set extractions but {weights} weights")]
    LengthMismatch { extractions: usize, weights: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// `exp(sum_logprob / token_count)` over the tokens intersecting `span`.
pub fn field_prob(resp: &CompletionResponse, span: (usize, usize)) -> Result<f64, ScoringError> {
    let s = resp.span_logprob(span)?;
    if s.token_count == 0 {
        return Err(ScoringError::EmptySpan);
    }
    Ok((s.sum_logprob / s.token_count as f64).exp())
}

pub fn joint_prob(subject_prob: f64, object_prob: f64) -> f64 {
    subject_prob * object_prob
}

/// Subject-object pairs generated under one context set with their joint probabilities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetExtraction {
    pub set_index: usize,
    pub pairs: BTreeMap<(String, String), f64>,
}

impl SetExtraction {
    pub fn new(set_index: usize) -> Self {
        SetExtraction {
            set_index,
            pairs: BTreeMap::new(),
        }
    }

    /// Inserts a pair, keeping the larger probability on collision.
    pub fn insert_max(&mut self, subject: String, object: String, joint: f64) {
        self.pairs
            .entry((subject, object))
            .and_modify(|p| *p = p.max(joint))
            .or_insert(joint);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetDiagnostics {
    pub malformed_lines: usize,
    /// Parsed lines whose relation name differs from the queried one.
    pub relation_mismatches: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetOutcome {
    pub extraction: SetExtraction,
    pub diagnostics: SetDiagnostics,
}

/// Reads pair probabilities off one completion.
pub fn score_generation(
    set_index: usize,
    resp: &CompletionResponse,
    relation: &RelationType,
) -> Result<SetOutcome, ScoringError> {
    let parsed = prompt::parse_generation_detailed(resp.text());
    let mut extraction = SetExtraction::new(set_index);
    let mut diagnostics = SetDiagnostics {
        malformed_lines: parsed.malformed,
        ..Default::default()
    };
    for line in parsed.lines {
        if line.triplet.relation != relation.name {
            diagnostics.relation_mismatches += 1;
        }
        let p_subject = field_prob(resp, line.subject_span)?;
        let p_object = field_prob(resp, line.object_span)?;
        extraction.insert_max(
            line.triplet.subject,
            line.triplet.object,
            joint_prob(p_subject, p_object),
        );
    }
    Ok(SetOutcome {
        extraction,
        diagnostics,
    })
}

/// Render, complete, parse and score one context set. Backend failures yield an
/// empty extraction with the error recorded.
pub fn extract_from_set(
    set: &ContextSet,
    set_index: usize,
    target: &Document,
    relation: &RelationType,
    corpus: &Corpus,
    client: &LmClient,
    max_tokens: u32,
) -> Result<SetOutcome, PromptError> {
    let prompt = prompt::render(set, target, relation, corpus)?;
    let req = CompletionRequest::new(prompt.text).with_max_tokens(max_tokens);
    let scored = client
        .complete(&req)
        .map_err(ScoringError::from)
        .and_then(|resp| score_generation(set_index, &resp, relation));
    Ok(scored.unwrap_or_else(|e| {
        tracing::warn!(target = %target.doc_id, relation = %relation.id, set_index, error = %e, "set extraction failed");
        SetOutcome {
            extraction: SetExtraction::new(set_index),
            diagnostics: SetDiagnostics {
                error: Some(e.to_string()),
                ..Default::default()
            },
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetContribution {
    pub weight: f64,
    pub joint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub triplet: KnowledgeTriplet,
    pub per_set: Vec<SetContribution>,
    pub aggregate: f64,
}

/// Weighted sum over sets with absent pairs contributing zero.
///
/// Terms are summed in ascending order so the result does not depend on set order.
pub fn aggregate(
    relation: &str,
    extractions: &[SetExtraction],
    weights: &[f64],
) -> Result<Vec<ScoredTriplet>, ScoringError> {
    if extractions.len() != weights.len() {
        return Err(ScoringError::LengthMismatch {
            extractions: extractions.len(),
            weights: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if !weights.is_empty() && (total - 1.0).abs() > 1e-9 {
        return Err(ScoringError::WeightsNotNormalized(total));
    }
    let mut keys: Vec<&(String, String)> =
        extractions.iter().flat_map(|e| e.pairs.keys()).collect();
    keys.sort();
    keys.dedup();

    let mut scored: Vec<ScoredTriplet> = keys
        .into_iter()
        .map(|key| {
            let per_set: Vec<SetContribution> = extractions
                .iter()
                .zip(weights)
                .map(|(e, &weight)| SetContribution {
                    weight,
                    joint: e.pairs.get(key).copied(),
                })
                .collect();
            let mut terms: Vec<f64> = per_set
                .iter()
                .filter_map(|c| c.joint.map(|j| c.weight * j))
                .collect();
            terms.sort_by(f64::total_cmp);
            ScoredTriplet {
                triplet: KnowledgeTriplet::new(relation, key.0.clone(), key.1.clone()),
                per_set,
                aggregate: terms.into_iter().sum(),
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.aggregate
            .partial_cmp(&a.aggregate)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.triplet.subject.cmp(&b.triplet.subject))
            .then_with(|| a.triplet.object.cmp(&b.triplet.object))
    });
    Ok(scored)
}

/// Keeps triplets whose aggregate is strictly greater than `theta`.
pub fn threshold_filter(scored: Vec<ScoredTriplet>, theta: f64) -> Vec<ScoredTriplet> {
    scored.into_iter().filter(|s| s.aggregate > theta).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_client::TokenRecord;

    fn resp(parts: &[(&str, f64)]) -> CompletionResponse {
        let text: String = parts.iter().map(|(t, _)| *t).collect();
        CompletionResponse::new(
            text,
            parts
                .iter()
                .map(|(t, p)| TokenRecord {
                    t: t.to_string(),
                    lp: p.ln(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn ext(idx: usize, pairs: &[(&str, &str, f64)]) -> SetExtraction {
        let mut e = SetExtraction::new(idx);
        for (s, o, p) in pairs {
            e.insert_max(s.to_string(), o.to_string(), *p);
        }
        e
    }

    #[test]
    fn field_prob_is_geometric_mean() {
        let r = resp(&[("ab", 0.5), ("cd", 0.5)]);
        assert!((field_prob(&r, (0, 4)).unwrap() - 0.5).abs() < 1e-12);
        let r = resp(&[("ab", 0.25), ("cd", 1.0)]);
        assert!((field_prob(&r, (0, 4)).unwrap() - 0.5).abs() < 1e-12);
        let r = resp(&[("ab", 0.9)]);
        assert!((field_prob(&r, (0, 2)).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn joint_products() {
        assert_eq!(joint_prob(0.5, 0.5), 0.25);
        assert_eq!(joint_prob(1.0, 0.37), 0.37);
        assert!((joint_prob(0.8, 0.7) - 0.56).abs() < 1e-12);
    }

    #[test]
    fn score_generation_half_probabilities() {
        // subject spans two tokens, object one; every token has p = 0.5
        let r = resp(&[
            ("Relation: (country <==>", 0.5),
            (" Sao", 0.5),
            (" Paulo", 0.5),
            (" <==>", 0.5),
            (" Brazil", 0.5),
            (")\n", 0.5),
        ]);
        let rel = RelationType {
            id: "P17".into(),
            name: "country".into(),
        };
        let out = score_generation(0, &r, &rel).unwrap();
        let p = out.extraction.pairs[&("Sao Paulo".to_string(), "Brazil".to_string())];
        assert!((p - 0.25).abs() < 1e-12);
        assert_eq!(out.diagnostics.relation_mismatches, 0);
    }

    #[test]
    fn score_generation_empty_and_dedupe() {
        let rel = RelationType {
            id: "P17".into(),
            name: "country".into(),
        };
        let out = score_generation(0, &resp(&[]), &rel).unwrap();
        assert!(out.extraction.pairs.is_empty());

        let r = resp(&[
            ("Relation: (c <==> ", 1.0),
            ("a", 0.2),
            (" <==> b)\nRelation: (c <==> ", 1.0),
            ("a", 0.3),
            (" <==> b)\nRelation: (cc <==> x <==> y)", 1.0),
        ]);
        let out = score_generation(
            0,
            &r,
            &RelationType {
                id: "P".into(),
                name: "c".into(),
            },
        )
        .unwrap();
        // object tokens have p = 1, so joint = subject prob; keep the max
        let p = out.extraction.pairs[&("a".to_string(), "b".to_string())];
        assert!((p - 0.3).abs() < 1e-12);
        assert_eq!(out.diagnostics.relation_mismatches, 1);
    }

    #[test]
    fn aggregate_examples() {
        let out = aggregate(
            "P17",
            &[ext(0, &[("s", "o", 0.5)]), ext(1, &[])],
            &[0.6, 0.4],
        )
        .unwrap();
        assert!((out[0].aggregate - 0.30).abs() < 1e-12);
        assert_eq!(out[0].per_set[1].joint, None);

        let all = aggregate(
            "P17",
            &[ext(0, &[("s", "o", 1.0)]), ext(1, &[("s", "o", 1.0)])],
            &[0.3, 0.7],
        )
        .unwrap();
        assert!((all[0].aggregate - 1.0).abs() < 1e-12);

        let single = aggregate(
            "P17",
            &[ext(0, &[("a", "b", 0.4), ("c", "d", 0.9)])],
            &[1.0],
        )
        .unwrap();
        assert_eq!(single[0].aggregate, 0.9);
        assert_eq!(single[1].aggregate, 0.4);
        assert_eq!(single[0].triplet, KnowledgeTriplet::new("P17", "c", "d"));
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(
            aggregate("r", &[ext(0, &[])], &[0.5, 0.5]),
            Err(ScoringError::LengthMismatch { .. })
        ));
        assert!(matches!(
            aggregate("r", &[ext(0, &[])], &[0.5]),
            Err(ScoringError::WeightsNotNormalized(_))
        ));
    }

    #[test]
    fn aggregate_tie_order() {
        let out = aggregate(
            "r",
            &[ext(0, &[("b", "x", 0.5), ("a", "y", 0.5), ("a", "x", 0.5)])],
            &[1.0],
        )
        .unwrap();
        let pairs: Vec<_> = out
            .iter()
            .map(|s| (s.triplet.subject.as_str(), s.triplet.object.as_str()))
            .collect();
        assert_eq!(pairs, vec![("a", "x"), ("a", "y"), ("b", "x")]);
    }

    #[test]
    fn threshold_is_strict() {
        let scored = aggregate(
            "r",
            &[ext(
                0,
                &[("a", "1", 0.25), ("b", "2", 0.2), ("c", "3", 0.1)],
            )],
            &[1.0],
        )
        .unwrap();
        let kept = threshold_filter(scored.clone(), 0.2);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].aggregate, 0.25);
        assert_eq!(threshold_filter(scored.clone(), 0.0).len(), 3);
        assert!(threshold_filter(scored, 1.0).is_empty());
    }
}
