//! Exact-match evaluation, knowledge-base augmented gold, calibration over
//! (tau, theta) grids and retrieval similarity histograms.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, KnowledgeTriplet, Split};
use crate::embed_store::{EmbedError, EmbeddingStore};

/// Bucket for predictions whose relation id is not in the gold registry.
pub const UNREGISTERED: &str = "unregistered";

/// Temperatures of the sensitivity grid.
pub const TAU_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
/// Thresholds of the sensitivity grid.
pub const THETA_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction refers to unknown doc_id `{0}`")]
    UnknownDocId(String),
    #[error("calibration grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Counts {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn gold(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_relation: BTreeMap<String, Counts>,
    pub micro: Counts,
    pub num_predicted: usize,
    pub num_gold: usize,
}

impl EvalReport {
    /// Relation ids by decreasing gold count, ties by id.
    pub fn relations_by_gold_count(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.per_relation.keys().map(String::as_str).collect();
        ids.sort_by(|a, b| {
            self.per_relation[*b]
                .gold()
                .cmp(&self.per_relation[*a].gold())
                .then_with(|| a.cmp(b))
        });
        ids
    }

    /// Plain-text per-relation table followed by the micro row.
    pub fn table(&self, relation_names: impl Fn(&str) -> Option<String>) -> String {
        let mut out = format!(
            "{:<16} {:<32} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
            "relation", "name", "gold", "tp", "fp", "fn", "P", "R", "F1"
        );
        let row = |id: &str, name: &str, c: &Counts| {
            format!(
                "{:<16} {:<32} {:>6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
                id,
                name,
                c.gold(),
                c.tp,
                c.fp,
                c.fn_,
                c.precision,
                c.recall,
                c.f1
            )
        };
        for id in self.relations_by_gold_count() {
            let name = relation_names(id).unwrap_or_default();
            out.push_str(&row(id, &name, &self.per_relation[id]));
        }
        out.push_str(&row("micro", "", &self.micro));
        out
    }
}

type Key<'a> = (&'a str, &'a str, &'a str, &'a str);

fn key<'a>(doc_id: &'a str, t: &'a KnowledgeTriplet) -> Key<'a> {
    (
        doc_id,
        t.relation.as_str(),
        t.subject.trim(),
        t.object.trim(),
    )
}

/// Exact-match scoring of `(doc_id, triplet)` predictions against the corpus annotations.
///
/// Subject and object are compared byte-for-byte after trimming outer whitespace.
pub fn score(
    predictions: &[(String, KnowledgeTriplet)],
    gold: &Corpus,
    relations: Option<&[String]>,
) -> Result<EvalReport, EvalError> {
    let keep = |rel: &str| relations.is_none_or(|rs| rs.iter().any(|r| r == rel));

    let mut gold_set: BTreeSet<Key> = BTreeSet::new();
    for doc in gold.documents() {
        for t in doc.triplets.iter().filter(|t| keep(&t.relation)) {
            gold_set.insert(key(&doc.doc_id, t));
        }
    }
    let mut pred_set: BTreeSet<Key> = BTreeSet::new();
    for (doc_id, t) in predictions {
        if !gold.contains(doc_id) {
            return Err(EvalError::UnknownDocId(doc_id.clone()));
        }
        if keep(&t.relation) {
            pred_set.insert(key(doc_id, t));
        }
    }

    let mut raw: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for k in &pred_set {
        let bucket = if gold.relations().contains(k.1) {
            k.1
        } else {
            UNREGISTERED
        };
        let entry = raw.entry(bucket.to_string()).or_default();
        if gold_set.contains(k) {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    for k in gold_set.difference(&pred_set) {
        raw.entry(k.1.to_string()).or_default().2 += 1;
    }

    let per_relation: BTreeMap<String, Counts> = raw
        .into_iter()
        .map(|(rel, (tp, fp, fn_))| (rel, Counts::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = per_relation.values().fold((0, 0, 0), |acc, c| {
        (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_)
    });
    Ok(EvalReport {
        per_relation,
        micro: Counts::from_counts(tp, fp, fn_),
        num_predicted: pred_set.len(),
        num_gold: gold_set.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbStatus {
    Exists,
    Absent,
    Unknown,
}

/// Answers whether a triplet is known to an external knowledge base.
pub trait KbVerifier {
    fn lookup(&self, triplet: &KnowledgeTriplet) -> KbStatus;
}

/// Knowledge-base snapshot loaded from line-delimited triplets.
#[derive(Debug, Clone, Default)]
pub struct SnapshotKb {
    triplets: HashSet<KnowledgeTriplet>,
}

impl SnapshotKb {
    pub fn new(triplets: impl IntoIterator<Item = KnowledgeTriplet>) -> Self {
        SnapshotKb {
            triplets: triplets.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut triplets = HashSet::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: KnowledgeTriplet =
                serde_json::from_str(&line).map_err(|source| EvalError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            triplets.insert(t);
        }
        Ok(SnapshotKb { triplets })
    }
}

impl KbVerifier for SnapshotKb {
    fn lookup(&self, triplet: &KnowledgeTriplet) -> KbStatus {
        if self.triplets.contains(triplet) {
            KbStatus::Exists
        } else {
            KbStatus::Absent
        }
    }
}

/// Adds every predicted triplet confirmed by the knowledge base to its document's gold.
/// Returns the augmented corpus and the number of triplets added.
pub fn augment_gold_with_kb(
    predictions: &[(String, KnowledgeTriplet)],
    gold: &Corpus,
    verifier: &dyn KbVerifier,
) -> (Corpus, usize) {
    let mut out = gold.clone();
    let mut added = 0;
    for (doc_id, t) in predictions {
        let Some(doc) = gold.get(doc_id) else {
            continue;
        };
        if doc.triplets.contains(t) || !gold.relations().contains(&t.relation) {
            continue;
        }
        if t.validate().is_err() {
            continue;
        }
        if verifier.lookup(t) == KbStatus::Exists {
            added += out.append_triplets(doc_id, [t.clone()]);
        }
    }
    (out, added)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCell {
    pub tau: f64,
    pub theta: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub theta: f64,
    pub cells: Vec<CalibrationCell>,
}

/// Picks the (tau, theta) with the best micro F1; ties go to the smaller tau, then smaller theta.
pub fn calibrate(
    predictions_by_config: &[((f64, f64), Vec<(String, KnowledgeTriplet)>)],
    gold: &Corpus,
) -> Result<Calibration, EvalError> {
    let mut cells = Vec::with_capacity(predictions_by_config.len());
    for ((tau, theta), preds) in predictions_by_config {
        let report = score(preds, gold, None)?;
        cells.push(CalibrationCell {
            tau: *tau,
            theta: *theta,
            micro_f1: report.micro.f1,
        });
    }
    let best = cells
        .iter()
        .min_by(|a, b| {
            b.micro_f1
                .total_cmp(&a.micro_f1)
                .then(a.tau.total_cmp(&b.tau))
                .then(a.theta.total_cmp(&b.theta))
        })
        .ok_or(EvalError::EmptyGrid)?;
    Ok(Calibration {
        tau: best.tau,
        theta: best.theta,
        cells: cells.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub relation: String,
    pub doc_id: String,
    pub avg_sim: f64,
    pub has_gold: bool,
}

/// Mean top-`n` similarity of every dev document to each relation's distant documents.
pub fn similarity_histogram(
    store: &EmbeddingStore,
    corpus: &Corpus,
    n: usize,
) -> Result<Vec<HistogramRecord>, EvalError> {
    let mut out = Vec::new();
    for rel in corpus.relations().iter() {
        let pool = corpus
            .filter_split_by_relation(Split::Distant, &rel.id)
            .expect("relation from registry");
        if pool.is_empty() {
            continue;
        }
        for doc in corpus.split(Split::Dev) {
            let avg_sim = store.avg_topn_similarity(&doc.doc_id, &pool, n)?;
            out.push(HistogramRecord {
                relation: rel.id.clone(),
                doc_id: doc.doc_id.clone(),
                avg_sim,
                has_gold: doc.has_relation(&rel.id),
            });
        }
    }
    Ok(out)
}

/// CSV with header `relation,doc_id,avg_sim,has_gold`.
pub fn write_histogram_csv(
    records: &[HistogramRecord],
    out: impl std::io::Write,
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
