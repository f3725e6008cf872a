//! Documents, triplet annotations, relation registries and corpus perturbations.
//!
//! Corpora are built once through [`Corpus::ingest`] (or the JSONL loaders) and are
//! immutable afterwards; every perturbation returns a fresh corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

/// Reserved by the prompt/output wire protocol.
pub const SEPARATOR: &str = "<==>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("document `{0}` has an empty token list")]
    EmptyTokenList(String),
    #[error("document `{0}` has empty text")]
    EmptyText(String),
    #[error("unknown relation id `{0}`")]
    UnknownRelationId(String),
    #[error("duplicate relation id `{0}`")]
    DuplicateRelationId(String),
    #[error("invalid relation `{0}`: id and name must be non-empty")]
    InvalidRelation(String),
    #[error("invalid triplet in `{doc_id}`: {reason}")]
    InvalidTriplet { doc_id: String, reason: String },
    #[error("record in `{0}` must carry exactly one of `tokens` or `text`")]
    AmbiguousRecord(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: String,
    pub name: String,
}

/// Relation ids mapped to their prompt names, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationRegistry {
    order: Vec<String>,
    by_id: HashMap<String, RelationType>,
}

impl RelationRegistry {
    pub fn new(relations: impl IntoIterator<Item = RelationType>) -> Result<Self, CorpusError> {
        let mut reg = Self::default();
        for rel in relations {
            reg.insert(rel)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, rel: RelationType) -> Result<(), CorpusError> {
        if rel.id.trim().is_empty() || rel.name.trim().is_empty() {
            return Err(CorpusError::InvalidRelation(rel.id));
        }
        if self.by_id.contains_key(&rel.id) {
            return Err(CorpusError::DuplicateRelationId(rel.id));
        }
        self.order.push(rel.id.clone());
        self.by_id.insert(rel.id.clone(), rel);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&RelationType> {
        self.by_id.get(id)
    }

    pub fn resolve(&self, id: &str) -> Result<&RelationType, CorpusError> {
        self.get(id)
            .ok_or_else(|| CorpusError::UnknownRelationId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationType> {
        self.order.iter().map(|id| &self.by_id[id])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reads the line-delimited `{"id", "name"}` registry format.
    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut reg = Self::default();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rel: RelationType =
                serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            reg.insert(rel)?;
        }
        Ok(reg)
    }
}

/// A `(relation, subject, object)` triple of surface strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnowledgeTriplet {
    pub relation: String,
    pub subject: String,
    pub object: String,
}

impl KnowledgeTriplet {
    pub fn new(
        relation: impl Into<String>,
        subject: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            relation: relation.into(),
            subject: subject.into(),
            object: object.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.subject.trim().is_empty() {
            return Err("empty subject".into());
        }
        if self.object.trim().is_empty() {
            return Err("empty object".into());
        }
        for field in [&self.relation, &self.subject, &self.object] {
            if field.contains(SEPARATOR) {
                return Err(format!("field `{field}` contains the reserved separator"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for KnowledgeTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.relation, self.subject, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Distant,
    Train,
    #[serde(alias = "test")]
    Dev,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distant" => Ok(Split::Distant),
            "train" => Ok(Split::Train),
            "dev" | "test" => Ok(Split::Dev),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub triplets: Vec<KnowledgeTriplet>,
    pub split: Split,
}

impl Document {
    pub fn has_relation(&self, relation: &str) -> bool {
        self.triplets.iter().any(|t| t.relation == relation)
    }

    /// Triplets of one relation, first occurrence order, duplicates removed.
    pub fn unique_triplets_of<'a>(&'a self, relation: &'a str) -> Vec<&'a KnowledgeTriplet> {
        let mut seen = BTreeSet::new();
        self.triplets
            .iter()
            .filter(|t| t.relation == relation && seen.insert((&t.subject, &t.object)))
            .collect()
    }
}

/// Raw triplet as it appears in a corpus record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletRecord {
    pub relation: String,
    pub subject: String,
    pub object: String,
}

/// One line of the corpus JSONL format. Exactly one of `tokens` / `text` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub split: Split,
    #[serde(default)]
    pub triplets: Vec<TripletRecord>,
}

impl From<&Document> for DocumentRecord {
    fn from(doc: &Document) -> Self {
        DocumentRecord {
            doc_id: doc.doc_id.clone(),
            tokens: None,
            text: Some(doc.text.clone()),
            split: doc.split,
            triplets: doc
                .triplets
                .iter()
                .map(|t| TripletRecord {
                    relation: t.relation.clone(),
                    subject: t.subject.clone(),
                    object: t.object.clone(),
                })
                .collect(),
        }
    }
}

/// A tokenized input record: token lists for the text and for each triplet field.
#[derive(Debug, Clone)]
pub struct TokenizedRecord {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub split: Split,
    pub triplets: Vec<TokenizedTriplet>,
}

#[derive(Debug, Clone)]
pub struct TokenizedTriplet {
    pub relation: String,
    pub subject: Vec<String>,
    pub object: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    documents: BTreeMap<String, Document>,
    relations: RelationRegistry,
}

impl Corpus {
    pub fn new(relations: RelationRegistry) -> Self {
        Corpus {
            documents: BTreeMap::new(),
            relations,
        }
    }

    pub fn relations(&self) -> &RelationRegistry {
        &self.relations
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.documents.contains_key(doc_id)
    }

    /// Documents in ascending doc_id order.
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.values().filter(move |d| d.split == split)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn triplet_count(&self) -> usize {
        self.documents.values().map(|d| d.triplets.len()).sum()
    }

    /// A new corpus holding only the documents of `split`.
    pub fn restricted_to(&self, split: Split) -> Corpus {
        Corpus {
            documents: self
                .documents
                .iter()
                .filter(|(_, d)| d.split == split)
                .map(|(k, d)| (k.clone(), d.clone()))
                .collect(),
            relations: self.relations.clone(),
        }
    }

    /// Adds a validated document.
    pub fn insert(&mut self, doc: Document) -> Result<(), CorpusError> {
        if self.documents.contains_key(&doc.doc_id) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        if doc.text.is_empty() {
            return Err(CorpusError::EmptyText(doc.doc_id));
        }
        for t in &doc.triplets {
            self.relations.resolve(&t.relation)?;
            t.validate().map_err(|reason| CorpusError::InvalidTriplet {
                doc_id: doc.doc_id.clone(),
                reason,
            })?;
        }
        self.documents.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    /// Space-joins tokens into document text and triplet fields. No normalization.
    pub fn ingest_tokenized(
        records: impl IntoIterator<Item = TokenizedRecord>,
        relations: RelationRegistry,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new(relations);
        for rec in records {
            if rec.tokens.is_empty() {
                return Err(CorpusError::EmptyTokenList(rec.doc_id));
            }
            let triplets = rec
                .triplets
                .into_iter()
                .map(|t| KnowledgeTriplet::new(t.relation, t.subject.join(" "), t.object.join(" ")))
                .collect();
            corpus.insert(Document {
                text: rec.tokens.join(" "),
                doc_id: rec.doc_id,
                triplets,
                split: rec.split,
            })?;
        }
        Ok(corpus)
    }

    pub fn ingest_records(
        records: impl IntoIterator<Item = DocumentRecord>,
        relations: RelationRegistry,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new(relations);
        for rec in records {
            corpus.insert(document_from_record(rec)?)?;
        }
        Ok(corpus)
    }

    /// Loads one or more corpus JSONL files into a single corpus.
    pub fn from_jsonl_paths<P: AsRef<Path>>(
        paths: &[P],
        relations: RelationRegistry,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new(relations);
        for path in paths {
            let path = path.as_ref();
            let file = std::fs::File::open(path)?;
            for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: DocumentRecord =
                    serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        source,
                    })?;
                corpus.insert(document_from_record(rec)?)?;
            }
        }
        Ok(corpus)
    }

    pub fn write_jsonl(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for doc in self.documents.values() {
            serde_json::to_writer(&mut out, &DocumentRecord::from(doc))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Documents carrying at least one triplet of `relation`, ascending doc_id.
    pub fn filter_by_relation(&self, relation: &str) -> Result<Vec<&str>, CorpusError> {
        self.relations.resolve(relation)?;
        Ok(self
            .documents
            .values()
            .filter(|d| d.has_relation(relation))
            .map(|d| d.doc_id.as_str())
            .collect())
    }

    /// Same as [`filter_by_relation`](Self::filter_by_relation) restricted to one split.
    pub fn filter_split_by_relation(
        &self,
        split: Split,
        relation: &str,
    ) -> Result<Vec<&str>, CorpusError> {
        self.relations.resolve(relation)?;
        Ok(self
            .split(split)
            .filter(|d| d.has_relation(relation))
            .map(|d| d.doc_id.as_str())
            .collect())
    }

    /// Appends triplets to an existing document, skipping exact duplicates.
    /// Returns how many were added.
    pub(crate) fn append_triplets(
        &mut self,
        doc_id: &str,
        triplets: impl IntoIterator<Item = KnowledgeTriplet>,
    ) -> usize {
        let Some(doc) = self.documents.get_mut(doc_id) else {
            return 0;
        };
        let mut added = 0;
        for t in triplets {
            if !doc.triplets.contains(&t) {
                doc.triplets.push(t);
                added += 1;
            }
        }
        added
    }

    /// Replaces every distinct subject/object surface string with a synthetic
    /// `Entity<k>` name, corpus-wide, in both triplets and document text.
    ///
    /// Text occurrences are matched on whitespace token boundaries, longest
    /// surface string first.
    pub fn perturb_randomize_entities(&self, seed: u64) -> EntityRandomization {
        let distinct: BTreeSet<&str> = self
            .documents
            .values()
            .flat_map(|d| d.triplets.iter())
            .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
            .collect();
        let mut order: Vec<&str> = distinct.into_iter().collect();
        let mut rng = seeding::rng_for(seed, &["randomize-entities"]);
        order.shuffle(&mut rng);
        let mapping: BTreeMap<String, String> = order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), format!("Entity{}", i + 1)))
            .collect();

        let replacer = TokenReplacer::new(&mapping);
        let mut documents = BTreeMap::new();
        for doc in self.documents.values() {
            let triplets = doc
                .triplets
                .iter()
                .map(|t| {
                    KnowledgeTriplet::new(
                        t.relation.clone(),
                        mapping[&t.subject].clone(),
                        mapping[&t.object].clone(),
                    )
                })
                .collect();
            documents.insert(
                doc.doc_id.clone(),
                Document {
                    doc_id: doc.doc_id.clone(),
                    text: replacer.apply(&doc.text),
                    triplets,
                    split: doc.split,
                },
            );
        }
        EntityRandomization {
            corpus: Corpus {
                documents,
                relations: self.relations.clone(),
            },
            mapping,
        }
    }

    /// Replaces the subject-object pairs of a random `floor(fraction * |distant|)`
    /// subset of distant documents with non-gold pairs of the same document's entities.
    pub fn perturb_adversarial_labels(&self, fraction: f64, seed: u64) -> AdversarialLabels {
        let fraction = fraction.clamp(0.0, 1.0);
        let distant: Vec<&Document> = self.split(Split::Distant).collect();
        let n_select = (fraction * distant.len() as f64).floor() as usize;
        let mut rng = seeding::rng_for(seed, &["adversarial-labels"]);
        let mut picked: Vec<usize> =
            rand::seq::index::sample(&mut rng, distant.len(), n_select).into_vec();
        picked.sort_unstable();

        let mut documents = self.documents.clone();
        let mut report = AdversarialLabels {
            corpus: Corpus::default(),
            selected: Vec::new(),
            altered: Vec::new(),
            skipped: Vec::new(),
        };
        for idx in picked {
            let doc = distant[idx];
            report.selected.push(doc.doc_id.clone());
            match adversarial_triplets(doc, &mut rng) {
                Some(triplets) => {
                    documents
                        .get_mut(&doc.doc_id)
                        .expect("doc present")
                        .triplets = triplets;
                    report.altered.push(doc.doc_id.clone());
                }
                None => report.skipped.push(doc.doc_id.clone()),
            }
        }
        report.corpus = Corpus {
            documents,
            relations: self.relations.clone(),
        };
        report
    }
}

fn document_from_record(rec: DocumentRecord) -> Result<Document, CorpusError> {
    let text = match (rec.tokens, rec.text) {
        (Some(tokens), None) => {
            if tokens.is_empty() {
                return Err(CorpusError::EmptyTokenList(rec.doc_id));
            }
            tokens.join(" ")
        }
        (None, Some(text)) => text,
        _ => return Err(CorpusError::AmbiguousRecord(rec.doc_id)),
    };
    Ok(Document {
        doc_id: rec.doc_id,
        text,
        split: rec.split,
        triplets: rec
            .triplets
            .into_iter()
            .map(|t| KnowledgeTriplet::new(t.relation, t.subject, t.object))
            .collect(),
    })
}

/// Picks a fresh non-gold pair for every triplet, or `None` if the document cannot be altered.
fn adversarial_triplets(doc: &Document, rng: &mut impl rand::Rng) -> Option<Vec<KnowledgeTriplet>> {
    let entities: Vec<&str> = doc
        .triplets
        .iter()
        .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if entities.len() < 2 || doc.triplets.is_empty() {
        return None;
    }
    let gold: BTreeSet<(&str, &str, &str)> = doc
        .triplets
        .iter()
        .map(|t| (t.relation.as_str(), t.subject.as_str(), t.object.as_str()))
        .collect();
    let mut used: BTreeSet<(String, String, String)> = BTreeSet::new();
    let mut out = Vec::with_capacity(doc.triplets.len());
    for t in &doc.triplets {
        let candidates: Vec<(&str, &str)> = entities
            .iter()
            .flat_map(|s| entities.iter().map(move |o| (*s, *o)))
            .filter(|(s, o)| s != o)
            .filter(|(s, o)| !gold.contains(&(t.relation.as_str(), s, o)))
            .filter(|(s, o)| !used.contains(&(t.relation.clone(), s.to_string(), o.to_string())))
            .collect();
        let (s, o) = *candidates.choose(rng)?;
        used.insert((t.relation.clone(), s.to_string(), o.to_string()));
        out.push(KnowledgeTriplet::new(t.relation.clone(), s, o));
    }
    Some(out)
}

/// Output of [`Corpus::perturb_randomize_entities`].
#[derive(Debug, Clone)]
pub struct EntityRandomization {
    pub corpus: Corpus,
    /// Original surface string to synthetic name.
    pub mapping: BTreeMap<String, String>,
}

/// Output of [`Corpus::perturb_adversarial_labels`].
#[derive(Debug, Clone)]
pub struct AdversarialLabels {
    pub corpus: Corpus,
    pub selected: Vec<String>,
    pub altered: Vec<String>,
    pub skipped: Vec<String>,
}

/// Whole-token, longest-first string replacement.
struct TokenReplacer<'a> {
    // first token -> candidates sorted longest first
    by_head: HashMap<&'a str, Vec<(&'a str, &'a str)>>,
}

impl<'a> TokenReplacer<'a> {
    fn new(mapping: &'a BTreeMap<String, String>) -> Self {
        let mut by_head: HashMap<&str, Vec<(&str, &str)>> = HashMap::new();
        for (from, to) in mapping {
            if let Some(head) = from.split_whitespace().next() {
                by_head
                    .entry(head)
                    .or_default()
                    .push((from.as_str(), to.as_str()));
            }
        }
        for list in by_head.values_mut() {
            list.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
        }
        TokenReplacer { by_head }
    }

    fn apply(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let ws = rest.len() - rest.trim_start().len();
            if ws > 0 {
                out.push_str(&rest[..ws]);
                pos += ws;
                continue;
            }
            let token_len = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let head = &rest[..token_len];
            let hit = self.by_head.get(head).and_then(|cands| {
                cands.iter().find(|(from, _)| {
                    rest.starts_with(from)
                        && rest[from.len()..]
                            .chars()
                            .next()
                            .is_none_or(char::is_whitespace)
                })
            });
            match hit {
                Some((from, to)) => {
                    out.push_str(to);
                    pos += from.len();
                }
                None => {
                    out.push_str(head);
                    pos += token_len;
                }
            }
        }
        out
    }
}
