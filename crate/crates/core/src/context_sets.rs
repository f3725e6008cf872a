//! Context-set construction: sampling K-subsets from a retrieved pool and
//! weighting them with a temperature softmax over their mean similarity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_store::{EmbedError, EmbeddingStore};
use crate::seeding;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("empty context pool")]
    EmptyPool,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("no scores to weight")]
    NoScores,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// How context sets are chosen for each target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// L random K-subsets of the top-N pool, softmax weighted.
    Complete,
    /// One random K-subset per relation, shared by every target.
    RandomFixed,
    /// One random K-subset per (relation, target).
    RandomAll,
    /// Top-K by similarity, most similar first.
    BestMinus,
    /// Top-K by similarity, least similar first.
    BestPlus,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Complete,
        Variant::RandomFixed,
        Variant::RandomAll,
        Variant::BestMinus,
        Variant::BestPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Complete => "complete",
            Variant::RandomFixed => "random_fixed",
            Variant::RandomAll => "random_all",
            Variant::BestMinus => "best_minus",
            Variant::BestPlus => "best_plus",
        }
    }

    /// Variants that produce exactly one set regardless of `L`.
    pub fn is_single_set(self) -> bool {
        !matches!(self, Variant::Complete)
    }

    /// Variants whose output depends on the seed.
    pub fn is_random(self) -> bool {
        matches!(
            self,
            Variant::Complete | Variant::RandomFixed | Variant::RandomAll
        )
    }

    /// Random single-set variants draw from every relation document, not the top-N pool.
    pub fn uses_full_pool(self) -> bool {
        matches!(self, Variant::RandomFixed | Variant::RandomAll)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Run parameters. Serialized with the short keys `N`, `K`, `L`, `tau`, `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    #[serde(rename = "N")]
    pub pool_size: usize,
    #[serde(rename = "K")]
    pub set_size: usize,
    #[serde(rename = "L")]
    pub num_sets: usize,
    pub tau: f64,
    pub theta: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            pool_size: 20,
            set_size: 5,
            num_sets: 5,
            tau: 0.1,
            theta: 0.2,
            max_tokens: 200,
            seed: 0,
            variant: Variant::Complete,
        }
    }
}

impl ExtractionConfig {
    /// Defaults for sentence-level corpora, which take more demonstrations.
    pub fn sentence_level() -> Self {
        ExtractionConfig {
            set_size: 11,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |m: String| Err(ContextError::InvalidConfig(m));
        if self.set_size == 0 || self.set_size > self.pool_size {
            return bad(format!(
                "need 1 <= K <= N, got K={} N={}",
                self.set_size, self.pool_size
            ));
        }
        if self.num_sets == 0 {
            return bad("L must be at least 1".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        Ok(())
    }

    /// Number of sets actually built for this variant.
    pub fn effective_num_sets(&self) -> usize {
        if self.variant.is_single_set() {
            1
        } else {
            self.num_sets
        }
    }
}

/// Retrieved candidates for one (relation, target), best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPool {
    pub relation: String,
    pub target: String,
    pub entries: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub members: Vec<(String, f64)>,
    pub score: f64,
    pub weight: f64,
}

impl ContextSet {
    pub fn member_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|(d, _)| d.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltSets {
    pub sets: Vec<ContextSet>,
    /// Set when the pool was smaller than K; holds the K actually used.
    pub clamped_k: Option<usize>,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Builds the context sets for one pool and assigns their weights.
pub fn build_sets(pool: &ContextPool, cfg: &ExtractionConfig) -> Result<BuiltSets, ContextError> {
    if pool.entries.is_empty() {
        return Err(ContextError::EmptyPool);
    }
    let k = cfg.set_size.min(pool.entries.len());
    let clamped_k = (k < cfg.set_size).then_some(k);
    let seed = cfg.seed;

    let member_lists: Vec<Vec<(String, f64)>> = match cfg.variant {
        Variant::BestMinus => vec![pool.entries[..k].to_vec()],
        Variant::BestPlus => {
            let mut m = pool.entries[..k].to_vec();
            m.reverse();
            vec![m]
        }
        Variant::Complete => {
            let mut rng = seeding::rng_for(seed, &["complete", &pool.relation, &pool.target]);
            (0..cfg.num_sets)
                .map(|_| {
                    let mut idx =
                        rand::seq::index::sample(&mut rng, pool.entries.len(), k).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| pool.entries[i].clone()).collect()
                })
                .collect()
        }
        Variant::RandomFixed | Variant::RandomAll => {
            // Sample over doc_id order so the draw does not depend on the target's ranking.
            let mut by_id: Vec<usize> = (0..pool.entries.len()).collect();
            by_id.sort_by(|&a, &b| pool.entries[a].0.cmp(&pool.entries[b].0));
            let mut rng = if cfg.variant == Variant::RandomFixed {
                seeding::rng_for(seed, &["random_fixed", &pool.relation])
            } else {
                seeding::rng_for(seed, &["random_all", &pool.relation, &pool.target])
            };
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, by_id.len(), k)
                .into_iter()
                .map(|i| by_id[i])
                .collect();
            idx.sort_unstable();
            vec![idx.into_iter().map(|i| pool.entries[i].clone()).collect()]
        }
    };

    let scores: Vec<f64> = member_lists
        .iter()
        .map(|m| mean(m.iter().map(|(_, s)| *s)))
        .collect();
    let weights = softmax_weights(&scores, cfg.tau)?;
    let sets = member_lists
        .into_iter()
        .zip(scores)
        .zip(weights)
        .map(|((members, score), weight)| ContextSet {
            members,
            score,
            weight,
        })
        .collect();
    Ok(BuiltSets { sets, clamped_k })
}

/// Mean cosine similarity between the target and the set members, recomputed from the store.
pub fn score_set(
    set: &ContextSet,
    target: &str,
    store: &EmbeddingStore,
) -> Result<f64, ContextError> {
    if set.members.is_empty() {
        return Err(ContextError::EmptyPool);
    }
    let mut total = 0.0;
    for (doc_id, _) in &set.members {
        total += store.similarity(target, doc_id)?;
    }
    Ok(total / set.members.len() as f64)
}

/// `w_i = exp(s_i / tau) / sum_j exp(s_j / tau)`, with max subtraction.
pub fn softmax_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>, ContextError> {
    if !(tau > 0.0) {
        return Err(ContextError::NonPositiveTau(tau));
    }
    if scores.is_empty() {
        return Err(ContextError::NoScores);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::EmbeddingVector;

    fn pool(sims: &[f64]) -> ContextPool {
        ContextPool {
            relation: "P17".into(),
            target: "t".into(),
            entries: sims
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("d{i}"), *s))
                .collect(),
        }
    }

    fn cfg(variant: Variant, k: usize, l: usize) -> ExtractionConfig {
        ExtractionConfig {
            set_size: k,
            num_sets: l,
            variant,
            seed: 42,
            ..ExtractionConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = ExtractionConfig::default();
        assert_eq!((c.pool_size, c.set_size, c.num_sets), (20, 5, 5));
        assert_eq!((c.tau, c.theta, c.max_tokens), (0.1, 0.2, 200));
        assert_eq!(ExtractionConfig::sentence_level().set_size, 11);
        c.validate().unwrap();
    }

    #[test]
    fn config_json_keys() {
        let json = r#"{"N":20,"K":5,"L":5,"tau":0.1,"theta":0.2,"max_tokens":200,"seed":3,"variant":"best_plus"}"#;
        let c: ExtractionConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.variant, Variant::BestPlus);
        assert_eq!(c.seed, 3);
        assert_eq!(serde_json::to_string(&c).unwrap(), json);
    }

    #[test]
    fn config_validation() {
        let mut c = ExtractionConfig::default();
        c.set_size = 21;
        assert!(c.validate().is_err());
        c = ExtractionConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = ExtractionConfig {
            theta: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = ExtractionConfig {
            num_sets: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn forced_subset_when_pool_equals_k() {
        let p = pool(&[0.9, 0.8, 0.7, 0.6, 0.5]);
        let built = build_sets(&p, &cfg(Variant::Complete, 5, 3)).unwrap();
        assert_eq!(built.sets.len(), 3);
        for s in &built.sets {
            assert_eq!(s.members, p.entries);
        }
        assert!(built.clamped_k.is_none());
    }

    #[test]
    fn best_minus_and_plus() {
        let p = pool(&[0.9, 0.8, 0.7]);
        let minus = build_sets(&p, &cfg(Variant::BestMinus, 2, 5)).unwrap();
        assert_eq!(minus.sets.len(), 1);
        let sims: Vec<f64> = minus.sets[0].members.iter().map(|m| m.1).collect();
        assert_eq!(sims, vec![0.9, 0.8]);
        assert_eq!(minus.sets[0].weight, 1.0);
        let plus = build_sets(&p, &cfg(Variant::BestPlus, 2, 5)).unwrap();
        let sims: Vec<f64> = plus.sets[0].members.iter().map(|m| m.1).collect();
        assert_eq!(sims, vec![0.8, 0.9]);
    }

    #[test]
    fn deterministic_and_clamped() {
        let p = pool(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]);
        let a = build_sets(&p, &cfg(Variant::Complete, 3, 4)).unwrap();
        let b = build_sets(&p, &cfg(Variant::Complete, 3, 4)).unwrap();
        assert_eq!(a, b);
        let small = pool(&[0.5, 0.4]);
        let c = build_sets(&small, &cfg(Variant::Complete, 5, 2)).unwrap();
        assert_eq!(c.clamped_k, Some(2));
        assert!(c.sets.iter().all(|s| s.members.len() == 2));
        assert!(matches!(
            build_sets(&pool(&[]), &cfg(Variant::Complete, 1, 1)),
            Err(ContextError::EmptyPool)
        ));
    }

    #[test]
    fn complete_members_sorted_descending() {
        let p = pool(&[0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6]);
        let built = build_sets(&p, &cfg(Variant::Complete, 4, 6)).unwrap();
        for s in &built.sets {
            assert!(s.members.windows(2).all(|w| w[0].1 >= w[1].1));
            let mean = s.members.iter().map(|m| m.1).sum::<f64>() / 4.0;
            assert!((s.score - mean).abs() < 1e-12);
        }
        let total: f64 = built.sets.iter().map(|s| s.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_fixed_ignores_target_and_ranking() {
        let p1 = pool(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4]);
        let mut p2 = p1.clone();
        p2.target = "other".into();
        // same documents, different similarities and order
        p2.entries = p1
            .entries
            .iter()
            .rev()
            .map(|(d, s)| (d.clone(), 1.0 - s))
            .collect();
        let c = cfg(Variant::RandomFixed, 3, 5);
        let ids = |p: &ContextPool| {
            let mut v: Vec<String> = build_sets(p, &c).unwrap().sets[0]
                .member_ids()
                .map(String::from)
                .collect();
            v.sort();
            v
        };
        assert_eq!(ids(&p1), ids(&p2));
    }

    #[test]
    fn score_set_recomputes_mean() {
        let store = EmbeddingStore::new([
            EmbeddingVector {
                doc_id: "t".into(),
                vector: vec![1.0, 0.0],
            },
            EmbeddingVector {
                doc_id: "a".into(),
                vector: vec![0.5, (0.75f64).sqrt()],
            },
            EmbeddingVector {
                doc_id: "b".into(),
                vector: vec![0.7, (0.51f64).sqrt()],
            },
        ])
        .unwrap();
        let set = ContextSet {
            members: vec![("a".into(), 0.5), ("b".into(), 0.7)],
            score: 0.0,
            weight: 1.0,
        };
        assert!((score_set(&set, "t", &store).unwrap() - 0.6).abs() < 1e-12);
        let single = ContextSet {
            members: vec![("a".into(), 0.5)],
            score: 0.0,
            weight: 1.0,
        };
        assert!((score_set(&single, "t", &store).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_weights(&[0.5, 0.5], 3.0).unwrap(), vec![0.5, 0.5]);
        let w = softmax_weights(&[0.9, 0.8], 0.1).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.73106).abs() < 1e-4);
        assert!((w[1] - 0.26894).abs() < 1e-4);
        assert_eq!(softmax_weights(&[0.3], 0.1).unwrap(), vec![1.0]);
        assert!(matches!(
            softmax_weights(&[0.3], 0.0),
            Err(ContextError::NonPositiveTau(_))
        ));
    }
}
