//! Synthetic inputs shared by the criterion benches.

use relex_core::lm_client::TokenRecord;
use relex_core::scoring::SetExtraction;
use relex_core::{CompletionResponse, EmbeddingStore, EmbeddingVector};

/// Small deterministic LCG so benches need no RNG dependency.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(6364136223846793005).wrapping_add(1))
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn random_store(docs: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = Lcg::new(seed);
    EmbeddingStore::new((0..docs).map(|i| EmbeddingVector {
        doc_id: format!("doc{i:06}"),
        vector: (0..dim).map(|_| rng.next_f64() - 0.5 + 1e-6).collect(),
    }))
    .expect("valid vectors")
}

/// A generation with `lines` relation lines, one token per word.
pub fn generation(lines: usize) -> CompletionResponse {
    let mut tokens = Vec::new();
    for i in 0..lines {
        let line = format!("Relation: (country <==> Subject number {i} <==> Object {i})\n");
        for (j, word) in line.split_inclusive(' ').enumerate() {
            tokens.push(TokenRecord {
                t: word.to_string(),
                lp: -0.01 * (j as f64 + 1.0),
            });
        }
    }
    let text: String = tokens.iter().map(|t| t.t.as_str()).collect();
    CompletionResponse::new(text, tokens).expect("tiled")
}

pub fn extractions(sets: usize, pairs: usize, seed: u64) -> Vec<SetExtraction> {
    let mut rng = Lcg::new(seed);
    (0..sets)
        .map(|l| {
            let mut e = SetExtraction::new(l);
            for p in 0..pairs {
                if rng.next_f64() < 0.7 {
                    e.insert_max(format!("s{p}"), format!("o{p}"), rng.next_f64().max(1e-9));
                }
            }
            e
        })
        .collect()
}
