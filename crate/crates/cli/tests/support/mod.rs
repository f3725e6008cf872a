#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relex_core::corpus::{DocumentRecord, TripletRecord};
use relex_core::lm_client::{sha256_hex, MockEntry, TokenRecord};
use relex_core::pipeline::PlannedPrompt;
use relex_core::{Corpus, RelationRegistry, RelationType, Split};

pub fn relex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relex"))
        .args(args)
        .output()
        .expect("spawn relex")
}

/// Runs the binary and returns stdout, panicking with stderr on failure.
pub fn relex_ok(args: &[&str]) -> String {
    let out = relex(args);
    assert!(
        out.status.success(),
        "relex {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
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
        split,
        triplets,
    }
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

pub fn distant_records() -> Vec<DocumentRecord> {
    vec![
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
    ]
}

pub fn dev_records() -> Vec<DocumentRecord> {
    vec![
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
    ]
}

/// Vectors derived from the doc id hash.
pub fn vector_for(doc_id: &str, dim: usize) -> Vec<f64> {
    let digest = sha256_hex(format!("vec:{doc_id}")).into_bytes();
    (0..dim)
        .map(|i| (digest[i % digest.len()] as f64 - 80.0) / 40.0 + i as f64 * 0.01)
        .collect()
}

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

/// Gold triplets of the target (one dropped on odd sets) plus a spurious line on set 1.
pub fn scripted_generation(corpus: &Corpus, p: &PlannedPrompt) -> String {
    let name = &corpus.relations().get(&p.relation).unwrap().name;
    let mut gold = corpus
        .get(&p.doc_id)
        .unwrap()
        .unique_triplets_of(&p.relation);
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

/// Input files for the synthetic ten-document corpus, plus a mock programmed
/// for every prompt of `config.json`.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    pub fn corpus(&self) -> Corpus {
        let mut records = distant_records();
        records.extend(dev_records());
        Corpus::ingest_records(records, registry()).unwrap()
    }

    /// `--corpus ... --relations ... --embeddings ...`
    pub fn input_args(&self) -> Vec<String> {
        vec![
            "--corpus".into(),
            self.path("distant.jsonl"),
            "--corpus".into(),
            self.path("dev.jsonl"),
            "--relations".into(),
            self.path("relations.jsonl"),
            "--embeddings".into(),
            self.path("embeddings.jsonl"),
        ]
    }

    pub fn backend_args(&self) -> Vec<String> {
        vec![
            "--backend".into(),
            format!("mock:{}", self.path("mock.jsonl")),
            "--config".into(),
            self.path("config.json"),
        ]
    }

    pub fn run(&self, cmd: &str, extra: &[&str]) -> String {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.input_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        relex_ok(&refs)
    }

    pub fn run_with_backend(&self, cmd: &str, extra: &[&str]) -> String {
        let mut all = self.backend_args();
        all.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        self.run(cmd, &refs)
    }

    /// Programs the mock file for the prompts of the config passed in `extra`.
    pub fn program_mock(&self, extra: &[&str]) {
        let mut args = vec!["--config".to_string(), self.path("config.json")];
        args.extend(extra.iter().map(|s| s.to_string()));
        args.extend(["--out".to_string(), self.path("prompts.jsonl")]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        self.run("prompts", &refs);
        let corpus = self.corpus();
        let mut existing = std::fs::read_to_string(self.path("mock.jsonl")).unwrap_or_default();
        for line in std::fs::read_to_string(self.path("prompts.jsonl"))
            .unwrap()
            .lines()
        {
            let p: PlannedPrompt = serde_json::from_str(line).unwrap();
            let text = scripted_generation(&corpus, &p);
            let entry = MockEntry {
                tokens: scripted_tokens(&text, &p.prompt_sha256),
                prompt_sha256: p.prompt_sha256,
                text,
            };
            existing.push_str(&serde_json::to_string(&entry).unwrap());
            existing.push('\n');
        }
        std::fs::write(self.path("mock.jsonl"), existing).unwrap();
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) {
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r).unwrap());
        buf.push('\n');
    }
    std::fs::write(path, buf).unwrap();
}

/// K=2, L=3, tau=0.1, theta=0.2 over ten documents and two relations.
pub fn synthetic_workspace() -> Workspace {
    let ws = Workspace {
        dir: tempfile::tempdir().unwrap(),
    };
    let root = ws.dir.path();
    write_jsonl(&root.join("distant.jsonl"), &distant_records());
    write_jsonl(&root.join("dev.jsonl"), &dev_records());
    write_jsonl(
        &root.join("relations.jsonl"),
        &registry().iter().collect::<Vec<_>>(),
    );
    let vectors: Vec<serde_json::Value> = distant_records()
        .iter()
        .chain(dev_records().iter())
        .map(|d| serde_json::json!({ "doc_id": d.doc_id, "vector": vector_for(&d.doc_id, 8) }))
        .collect();
    write_jsonl(&root.join("embeddings.jsonl"), &vectors);
    std::fs::write(
        root.join("config.json"),
        r#"{"N": 20, "K": 2, "L": 3, "tau": 0.1, "theta": 0.2, "max_tokens": 200, "seed": 7, "variant": "complete"}"#,
    )
    .unwrap();
    ws.program_mock(&[]);
    ws
}
