#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use relex_core::corpus::{DocumentRecord, TripletRecord};
use relex_core::lm_client::{sha256_hex, TokenRecord};
use relex_core::pipeline::{self, PlannedPrompt};
use relex_core::seeding::rng_for;
use relex_core::{
    CompletionResponse, Corpus, EmbeddingStore, EmbeddingVector, ExtractionConfig, MockBackend,
    RelationRegistry, RelationType, RunOptions, Split,
};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

pub fn registry() -> RelationRegistry {
    RelationRegistry::new([
        RelationType {
            id: "P17".into(),
            name: "country".into(),
        },
        RelationType {
            id: "P131".into(),
            name: "located in the administrative territorial entity".into(),
        },
    ])
    .unwrap()
}

fn t(rel: &str, s: &str, o: &str) -> TripletRecord {
    TripletRecord {
        relation: rel.into(),
        subject: s.into(),
        object: o.into(),
    }
}

fn doc(id: &str, split: Split, text: &str, triplets: Vec<TripletRecord>) -> DocumentRecord {
    DocumentRecord {
        doc_id: id.into(),
        tokens: None,
        text: Some(text.into()),
        triplets,
        split,
    }
}

/// Ten documents: six distant, four dev; two relations.
pub fn synthetic_corpus() -> Corpus {
    let records = vec![
        doc(
            "d0",
            Split::Distant,
            "Arden is a town in Calder County , Norland .",
            vec![
                t("P17", "Arden", "Norland"),
                t("P131", "Arden", "Calder County"),
            ],
        ),
        doc(
            "d1",
            Split::Distant,
            "Brisk Falls lies in Varo Province of Estmark .",
            vec![
                t("P17", "Brisk Falls", "Estmark"),
                t("P131", "Brisk Falls", "Varo Province"),
            ],
        ),
        doc(
            "d2",
            Split::Distant,
            "The Olen Bridge crosses the Tave in Norland .",
            vec![t("P17", "Olen Bridge", "Norland")],
        ),
        doc(
            "d3",
            Split::Distant,
            "Hale Park is a park in Dunmore , capital of Estmark .",
            vec![
                t("P17", "Hale Park", "Estmark"),
                t("P131", "Hale Park", "Dunmore"),
                t("P17", "Dunmore", "Estmark"),
            ],
        ),
        doc(
            "d4",
            Split::Distant,
            "Miren Abbey stands in Kesh District .",
            vec![t("P131", "Miren Abbey", "Kesh District")],
        ),
        doc(
            "d5",
            Split::Distant,
            "A short note with no annotated facts .",
            vec![],
        ),
        doc(
            "t0",
            Split::Dev,
            "Corvin is a village in Ashby County , Norland .",
            vec![
                t("P17", "Corvin", "Norland"),
                t("P131", "Corvin", "Ashby County"),
            ],
        ),
        doc(
            "t1",
            Split::Dev,
            "The Pell Tower is a landmark of Dunmore in Estmark .",
            vec![
                t("P17", "Pell Tower", "Estmark"),
                t("P131", "Pell Tower", "Dunmore"),
            ],
        ),
        doc(
            "t2",
            Split::Dev,
            "Lake Ivo is shared by Norland and Estmark .",
            vec![
                t("P17", "Lake Ivo", "Norland"),
                t("P17", "Lake Ivo", "Estmark"),
            ],
        ),
        doc(
            "t3",
            Split::Dev,
            "Rowan Hall hosts an annual fair .",
            vec![],
        ),
    ];
    Corpus::ingest_records(records, registry()).unwrap()
}

/// Seeded random unit-free vectors for every document.
pub fn synthetic_store(corpus: &Corpus, dim: usize, seed: u64) -> EmbeddingStore {
    let vectors = corpus.documents().map(|d| {
        let mut rng = rng_for(seed, &["embedding", &d.doc_id]);
        EmbeddingVector {
            doc_id: d.doc_id.clone(),
            vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    });
    EmbeddingStore::new(vectors.collect::<Vec<_>>()).unwrap()
}

/// Word-level tokens with logprobs drawn from the prompt hash.
pub fn scripted_tokens(text: &str, seed: &str) -> Vec<TokenRecord> {
    let digest = sha256_hex(seed).into_bytes();
    text.split_inclusive([' ', '\n'])
        .enumerate()
        .map(|(i, piece)| TokenRecord {
            t: piece.to_string(),
            lp: -(digest[i % digest.len()] as f64 % 16.0) / 20.0,
        })
        .collect()
}

/// The generation the mock returns for one planned prompt: the target's gold
/// triplets of that relation, one dropped on odd sets, plus a spurious line
/// on set 1.
pub fn scripted_generation(corpus: &Corpus, p: &PlannedPrompt) -> String {
    let name = &corpus.relations().get(&p.relation).unwrap().name;
    let target = corpus.get(&p.doc_id).unwrap();
    let mut gold = target.unique_triplets_of(&p.relation);
    if p.set_index % 2 == 1 && gold.len() > 1 {
        gold.pop();
    }
    let mut out = String::new();
    for tr in gold {
        out.push_str(&format!(
            "Relation: ({name} <==> {} <==> {})\n",
            tr.subject, tr.object
        ));
    }
    if p.set_index == 1 {
        out.push_str(&format!("Relation: ({name} <==> Nowhere <==> Norland)\n"));
    }
    out.push_str("\nContext:");
    out
}

pub fn scripted_mock(corpus: &Corpus, prompts: &[PlannedPrompt]) -> MockBackend {
    let mut mock = MockBackend::new("mock:synthetic");
    for p in prompts {
        let text = scripted_generation(corpus, p);
        let tokens = scripted_tokens(&text, &p.prompt_sha256);
        mock.insert(&p.prompt, CompletionResponse::new(text, tokens).unwrap());
    }
    mock
}

/// Configuration of the end-to-end checks: K=2, L=3, tau=0.1, theta=0.2.
pub fn e2e_config() -> ExtractionConfig {
    ExtractionConfig {
        set_size: 2,
        num_sets: 3,
        tau: 0.1,
        theta: 0.2,
        seed: 7,
        ..ExtractionConfig::default()
    }
}

pub fn synthetic_setup(cfg: &ExtractionConfig) -> (Corpus, EmbeddingStore, MockBackend) {
    let corpus = synthetic_corpus();
    let store = synthetic_store(&corpus, 8, 11);
    let prompts = pipeline::plan_prompts(&corpus, &store, cfg, &RunOptions::default()).unwrap();
    let mock = scripted_mock(&corpus, &prompts);
    (corpus, store, mock)
}
