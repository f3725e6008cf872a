//! End-to-end runs: retrieval, set construction, prompting, scoring and
//! aggregation over every (target document, relation), plus the sweep,
//! ablation, evaluation and indexing drivers built on top.
//!
//! Extraction is split into a raw phase (per-set joint probabilities, which
//! needs the backend) and a finalize phase (weights and threshold, which is
//! pure), so re-weighting and re-thresholding never re-query the backend.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_sets::{self, ContextError, ContextPool, ContextSet, ExtractionConfig, Variant};
use crate::corpus::{Corpus, CorpusError, KnowledgeTriplet, Split};
use crate::embed_store::{EmbedError, EmbeddingEndpoint, EmbeddingStore, EmbeddingVector};
use crate::evaluation::{self, Calibration, EvalError, EvalReport, KbVerifier};
use crate::lm_client::{sha256_hex, LmClient};
use crate::prompt::{self, PromptError};
use crate::scoring::{self, ScoringError, SetContribution, SetDiagnostics, SetExtraction};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing embeddings for {} document(s): {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),
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

/// Which documents are extracted from and with what parallelism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub targets: Split,
    /// Restrict to these relation ids; all registered relations otherwise.
    pub relations: Option<Vec<String>>,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            targets: Split::Dev,
            relations: None,
            workers: 4,
        }
    }
}

/// Raw per-set results for one (target, relation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetExtraction {
    pub doc_id: String,
    pub relation: String,
    pub sets: Vec<ContextSet>,
    pub extractions: Vec<SetExtraction>,
    pub diagnostics: Vec<SetDiagnostics>,
    pub clamped_k: Option<usize>,
}

impl TargetExtraction {
    pub fn set_scores(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.score).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    pub doc_id: String,
    pub relation: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// Relations with no distant document to draw examples from.
    pub skipped_relations: Vec<String>,
    pub target_errors: Vec<TargetError>,
    pub failed_sets: usize,
    pub malformed_lines: usize,
    pub relation_mismatches: usize,
    pub clamped_pools: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRun {
    pub config: ExtractionConfig,
    pub targets: Vec<TargetExtraction>,
    pub diagnostics: RunDiagnostics,
}

/// One line of the prediction output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub relation: String,
    pub subject: String,
    pub object: String,
    pub probability: f64,
    pub per_set: Vec<SetContribution>,
}

impl Prediction {
    pub fn triplet(&self) -> KnowledgeTriplet {
        KnowledgeTriplet::new(
            self.relation.clone(),
            self.subject.clone(),
            self.object.clone(),
        )
    }
}

pub fn as_labeled(predictions: &[Prediction]) -> Vec<(String, KnowledgeTriplet)> {
    predictions
        .iter()
        .map(|p| (p.doc_id.clone(), p.triplet()))
        .collect()
}

struct Task<'a> {
    doc_id: &'a str,
    relation: &'a str,
    candidates: &'a [&'a str],
}

fn selected_relations(corpus: &Corpus, opts: &RunOptions) -> Result<Vec<String>, CorpusError> {
    match &opts.relations {
        Some(ids) => {
            for id in ids {
                corpus.relations().resolve(id)?;
            }
            Ok(ids.clone())
        }
        None => Ok(corpus.relations().iter().map(|r| r.id.clone()).collect()),
    }
}

/// Retrieves the pool for one target. Random single-set variants see every
/// relation document; the others see the top-N.
pub fn build_pool(
    store: &EmbeddingStore,
    target: &str,
    relation: &str,
    candidates: &[&str],
    cfg: &ExtractionConfig,
) -> Result<ContextPool, EmbedError> {
    let n = if cfg.variant.uses_full_pool() {
        candidates.len().max(1)
    } else {
        cfg.pool_size
    };
    Ok(ContextPool {
        relation: relation.to_string(),
        target: target.to_string(),
        entries: store.top_n_pool(target, candidates, n)?,
    })
}

/// Context sets for one target, with the effective set count of the variant.
pub fn target_sets(
    store: &EmbeddingStore,
    target: &str,
    relation: &str,
    candidates: &[&str],
    cfg: &ExtractionConfig,
) -> Result<context_sets::BuiltSets, ContextError> {
    let pool = build_pool(store, target, relation, candidates, cfg)?;
    let cfg = ExtractionConfig {
        num_sets: cfg.effective_num_sets(),
        ..cfg.clone()
    };
    context_sets::build_sets(&pool, &cfg)
}

fn distant_candidates<'a>(
    corpus: &'a Corpus,
    relations: &'a [String],
) -> Result<Vec<(&'a str, Vec<&'a str>)>, CorpusError> {
    relations
        .iter()
        .map(|r| {
            Ok((
                r.as_str(),
                corpus.filter_split_by_relation(Split::Distant, r)?,
            ))
        })
        .collect()
}

/// Runs `f` over `tasks` on `workers` threads; results come back in task order.
fn run_parallel<T: Sync, R: Send>(
    tasks: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let r = f(task);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("slot poisoned")
                .expect("task completed")
        })
        .collect()
}

/// Queries the backend for every (target, relation) and records per-set joints.
pub fn extract_raw(
    corpus: &Corpus,
    store: &EmbeddingStore,
    client: &LmClient,
    cfg: &ExtractionConfig,
    opts: &RunOptions,
) -> Result<RawRun, PipelineError> {
    cfg.validate()?;
    let relations = selected_relations(corpus, opts)?;
    let candidates = distant_candidates(corpus, &relations)?;
    let before = client.stats();

    let mut diagnostics = RunDiagnostics::default();
    let targets: Vec<&str> = corpus
        .split(opts.targets)
        .map(|d| d.doc_id.as_str())
        .collect();
    let mut tasks = Vec::new();
    for (relation, cands) in &candidates {
        if cands.is_empty() {
            tracing::info!(relation, "no distant documents; skipping relation");
            diagnostics.skipped_relations.push(relation.to_string());
            continue;
        }
        for doc_id in &targets {
            tasks.push(Task {
                doc_id,
                relation,
                candidates: cands,
            });
        }
    }

    let results = run_parallel(&tasks, opts.workers, |task| {
        extract_target(corpus, store, client, cfg, task)
    });

    let mut out = Vec::with_capacity(results.len());
    for (task, result) in tasks.iter().zip(results) {
        match result {
            Ok(t) => {
                for d in &t.diagnostics {
                    diagnostics.failed_sets += usize::from(d.error.is_some());
                    diagnostics.malformed_lines += d.malformed_lines;
                    diagnostics.relation_mismatches += d.relation_mismatches;
                }
                diagnostics.clamped_pools += usize::from(t.clamped_k.is_some());
                out.push(t);
            }
            Err(e) => diagnostics.target_errors.push(TargetError {
                doc_id: task.doc_id.to_string(),
                relation: task.relation.to_string(),
                error: e.to_string(),
            }),
        }
    }
    let after = client.stats();
    diagnostics.backend_calls = after.backend_calls - before.backend_calls;
    diagnostics.cache_hits = after.cache_hits - before.cache_hits;
    Ok(RawRun {
        config: cfg.clone(),
        targets: out,
        diagnostics,
    })
}

#[derive(Debug, Error)]
enum TargetFailure {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn extract_target(
    corpus: &Corpus,
    store: &EmbeddingStore,
    client: &LmClient,
    cfg: &ExtractionConfig,
    task: &Task<'_>,
) -> Result<TargetExtraction, TargetFailure> {
    let target = corpus.get(task.doc_id).expect("target from corpus");
    let relation = corpus
        .relations()
        .resolve(task.relation)
        .expect("resolved relation");
    let built = target_sets(store, task.doc_id, task.relation, task.candidates, cfg)?;
    let mut extractions = Vec::with_capacity(built.sets.len());
    let mut diagnostics = Vec::with_capacity(built.sets.len());
    for (idx, set) in built.sets.iter().enumerate() {
        let outcome =
            scoring::extract_from_set(set, idx, target, relation, corpus, client, cfg.max_tokens)?;
        extractions.push(outcome.extraction);
        diagnostics.push(outcome.diagnostics);
    }
    Ok(TargetExtraction {
        doc_id: task.doc_id.to_string(),
        relation: task.relation.to_string(),
        sets: built.sets,
        extractions,
        diagnostics,
        clamped_k: built.clamped_k,
    })
}

/// Weights the raw per-set joints with temperature `tau` and keeps aggregates above `theta`.
pub fn finalize(raw: &RawRun, tau: f64, theta: f64) -> Result<Vec<Prediction>, PipelineError> {
    let mut out = Vec::new();
    for t in &raw.targets {
        let weights = context_sets::softmax_weights(&t.set_scores(), tau)?;
        let scored = scoring::aggregate(&t.relation, &t.extractions, &weights)?;
        for s in scoring::threshold_filter(scored, theta) {
            out.push(Prediction {
                doc_id: t.doc_id.clone(),
                relation: s.triplet.relation,
                subject: s.triplet.subject,
                object: s.triplet.object,
                probability: s.aggregate,
                per_set: s.per_set,
            });
        }
    }
    Ok(out)
}

/// Full extraction with the config's own tau and theta.
pub fn extract(
    corpus: &Corpus,
    store: &EmbeddingStore,
    client: &LmClient,
    cfg: &ExtractionConfig,
    opts: &RunOptions,
) -> Result<(Vec<Prediction>, RunDiagnostics), PipelineError> {
    let raw = extract_raw(corpus, store, client, cfg, opts)?;
    let preds = finalize(&raw, cfg.tau, cfg.theta)?;
    Ok((preds, raw.diagnostics))
}

/// A prompt the pipeline would send, without calling any backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPrompt {
    pub doc_id: String,
    pub relation: String,
    pub set_index: usize,
    pub prompt_sha256: String,
    pub prompt: String,
}

/// Every prompt an extraction with `cfg` would issue, in task order.
pub fn plan_prompts(
    corpus: &Corpus,
    store: &EmbeddingStore,
    cfg: &ExtractionConfig,
    opts: &RunOptions,
) -> Result<Vec<PlannedPrompt>, PipelineError> {
    cfg.validate()?;
    let relations = selected_relations(corpus, opts)?;
    let candidates = distant_candidates(corpus, &relations)?;
    let mut out = Vec::new();
    for (relation, cands) in &candidates {
        if cands.is_empty() {
            continue;
        }
        let rel = corpus.relations().resolve(relation)?;
        for target in corpus.split(opts.targets) {
            let built = target_sets(store, &target.doc_id, relation, cands, cfg)?;
            for (idx, set) in built.sets.iter().enumerate() {
                let p = prompt::render(set, target, rel, corpus)
                    .map_err(|e| PipelineError::Scoring(e.into()))?;
                out.push(PlannedPrompt {
                    doc_id: target.doc_id.clone(),
                    relation: relation.to_string(),
                    set_index: idx,
                    prompt_sha256: sha256_hex(&p.text),
                    prompt: p.text,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], mut out: impl Write) -> std::io::Result<()> {
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, PipelineError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| PipelineError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        Ok(InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(std::fs::read(path)?),
        })
    }
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExtractionConfig,
    pub corpora: Vec<InputFile>,
    pub relations: InputFile,
    pub embeddings: InputFile,
    pub backend_id: String,
    pub targets: Split,
    pub relation_filter: Option<Vec<String>>,
    /// Member order inside random context sets.
    pub set_member_order: String,
}

impl RunManifest {
    pub fn new(
        config: ExtractionConfig,
        corpus_paths: &[PathBuf],
        relations_path: &Path,
        embeddings_path: &Path,
        backend_id: impl Into<String>,
        opts: &RunOptions,
    ) -> std::io::Result<Self> {
        Ok(RunManifest {
            config,
            corpora: corpus_paths
                .iter()
                .map(InputFile::hash)
                .collect::<std::io::Result<_>>()?,
            relations: InputFile::hash(relations_path)?,
            embeddings: InputFile::hash(embeddings_path)?,
            backend_id: backend_id.into(),
            targets: opts.targets,
            relation_filter: opts.relations.clone(),
            set_member_order: "descending_similarity".into(),
        })
    }

    /// Hash over content hashes and settings (file paths excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({
            "config": self.config,
            "corpora": self.corpora.iter().map(|c| &c.sha256).collect::<Vec<_>>(),
            "relations": self.relations.sha256,
            "embeddings": self.embeddings.sha256,
            "backend_id": self.backend_id,
            "targets": self.targets,
            "relation_filter": self.relation_filter,
            "set_member_order": self.set_member_order,
        });
        sha256_hex(canonical.to_string())
    }

    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(&self.hash()[..16])
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut buf = serde_json::to_vec_pretty(value).expect("serializable");
    buf.push(b'\n');
    std::fs::write(path, buf)
}

/// Writes `manifest.json`, `predictions.jsonl` and `diagnostics.json` into the run directory.
pub fn write_extract_outputs(
    run_dir: &Path,
    manifest: &RunManifest,
    preds: &[Prediction],
    diagnostics: &RunDiagnostics,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(run_dir)?;
    write_json(&run_dir.join("manifest.json"), manifest)?;
    let pred_path = run_dir.join("predictions.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&pred_path)?);
    write_predictions(preds, &mut f)?;
    f.flush()?;
    write_json(
        &run_dir.join("diagnostics.json"),
        &serde_json::json!({ "manifest_hash": manifest.hash(), "diagnostics": diagnostics }),
    )?;
    Ok(pred_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub report: EvalReport,
    /// Present when a knowledge base was supplied.
    pub kb: Option<KbEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEvaluation {
    pub added_triplets: usize,
    pub gold_before: usize,
    pub gold_after: usize,
    pub report: EvalReport,
}

/// Scores predictions against `gold`, and again against KB-augmented gold if a verifier is given.
pub fn evaluate(
    predictions: &[Prediction],
    gold: &Corpus,
    relations: Option<&[String]>,
    kb: Option<&dyn KbVerifier>,
) -> Result<EvaluationOutput, PipelineError> {
    let labeled = as_labeled(predictions);
    let report = evaluation::score(&labeled, gold, relations)?;
    let kb = match kb {
        Some(verifier) => {
            let (augmented, added) = evaluation::augment_gold_with_kb(&labeled, gold, verifier);
            let after = evaluation::score(&labeled, &augmented, relations)?;
            Some(KbEvaluation {
                added_triplets: added,
                gold_before: report.num_gold,
                gold_after: after.num_gold,
                report: after,
            })
        }
        None => None,
    };
    Ok(EvaluationOutput { report, kb })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau: f64,
    pub theta: f64,
    pub num_predicted: usize,
    pub micro: evaluation::Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub calibration: Calibration,
    /// Micro F1 at the config's own (tau, theta), when that cell is on the grid.
    pub default_f1: Option<f64>,
    pub best_f1: f64,
    pub diagnostics: RunDiagnostics,
    #[serde(skip)]
    pub predictions: BTreeMap<(u64, u64), Vec<Prediction>>,
}

impl SweepResult {
    pub fn predictions_at(&self, tau: f64, theta: f64) -> Option<&[Prediction]> {
        self.predictions
            .get(&(tau.to_bits(), theta.to_bits()))
            .map(Vec::as_slice)
    }
}

/// Parses `"tau=0.1,0.2;theta=0.2"`.
pub fn parse_grid(grid: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut taus = None;
    let mut thetas = None;
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| format!("grid part `{part}` lacks `=`"))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        match name.trim() {
            "tau" => taus = Some(values),
            "theta" => thetas = Some(values),
            other => return Err(format!("unknown grid axis `{other}`")),
        }
    }
    Ok((
        taus.unwrap_or_else(|| evaluation::TAU_GRID.to_vec()),
        thetas.unwrap_or_else(|| evaluation::THETA_GRID.to_vec()),
    ))
}

/// One extraction pass, then every (tau, theta) cell re-scored from the cached per-set joints.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    corpus: &Corpus,
    store: &EmbeddingStore,
    client: &LmClient,
    cfg: &ExtractionConfig,
    opts: &RunOptions,
    taus: &[f64],
    thetas: &[f64],
) -> Result<SweepResult, PipelineError> {
    let raw = extract_raw(corpus, store, client, cfg, opts)?;
    let gold = corpus.restricted_to(opts.targets);
    let rels = opts.relations.as_deref();
    let mut cells = Vec::new();
    let mut by_config = Vec::new();
    let mut predictions = BTreeMap::new();
    for &tau in taus {
        for &theta in thetas {
            let preds = finalize(&raw, tau, theta)?;
            let labeled = as_labeled(&preds);
            let report = evaluation::score(&labeled, &gold, rels)?;
            cells.push(SweepCell {
                tau,
                theta,
                num_predicted: report.num_predicted,
                micro: report.micro,
            });
            by_config.push(((tau, theta), labeled));
            predictions.insert((tau.to_bits(), theta.to_bits()), preds);
        }
    }
    let calibration = evaluation::calibrate(&by_config, &gold)?;
    let f1_at = |tau: f64, theta: f64| {
        cells
            .iter()
            .find(|c| c.tau == tau && c.theta == theta)
            .map(|c| c.micro.f1)
    };
    Ok(SweepResult {
        default_f1: f1_at(cfg.tau, cfg.theta),
        best_f1: f1_at(calibration.tau, calibration.theta).unwrap_or(0.0),
        cells,
        calibration,
        diagnostics: raw.diagnostics,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub micro_f1: Vec<f64>,
    pub mean_f1: f64,
    pub sd_f1: f64,
}

impl AblationRow {
    pub fn display(&self) -> String {
        format!(
            "{:<14} {:>8.2} ± {:.2}  (n={})",
            self.variant.as_str(),
            100.0 * self.mean_f1,
            100.0 * self.sd_f1,
            self.micro_f1.len()
        )
    }
}

/// Sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs each variant (random ones once per seed) and reports micro F1 mean and spread.
pub fn ablate(
    corpus: &Corpus,
    store: &EmbeddingStore,
    client: &LmClient,
    base: &ExtractionConfig,
    opts: &RunOptions,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, PipelineError> {
    let gold = corpus.restricted_to(opts.targets);
    let default_seeds = [base.seed];
    let seeds = if seeds.is_empty() {
        &default_seeds[..]
    } else {
        seeds
    };
    let mut rows = Vec::new();
    for &variant in variants {
        let run_seeds: Vec<u64> = if variant.is_random() {
            seeds.to_vec()
        } else {
            vec![seeds[0]]
        };
        let mut f1s = Vec::with_capacity(run_seeds.len());
        for &seed in &run_seeds {
            let cfg = ExtractionConfig {
                variant,
                seed,
                ..base.clone()
            };
            let (preds, _) = extract(corpus, store, client, &cfg, opts)?;
            let report = evaluation::score(&as_labeled(&preds), &gold, opts.relations.as_deref())?;
            f1s.push(report.micro.f1);
        }
        let (mean_f1, sd_f1) = mean_sd(&f1s);
        rows.push(AblationRow {
            variant,
            seeds: run_seeds,
            micro_f1: f1s,
            mean_f1,
            sd_f1,
        });
    }
    Ok(rows)
}

/// Where index vectors come from.
pub enum EmbeddingSource<'a> {
    File(&'a Path),
    Endpoint(&'a EmbeddingEndpoint),
}

/// Produces a store covering every corpus document, fetching what is missing
/// from the endpoint when one is given (existing vectors in `existing` are reused).
pub fn index(
    corpus: &Corpus,
    source: EmbeddingSource<'_>,
    existing: Option<&Path>,
) -> Result<EmbeddingStore, PipelineError> {
    match source {
        EmbeddingSource::File(path) => {
            let store = EmbeddingStore::from_jsonl_path(path)?;
            let missing: Vec<String> = corpus
                .documents()
                .filter(|d| !store.contains(&d.doc_id))
                .map(|d| d.doc_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(PipelineError::MissingEmbeddings(missing));
            }
            Ok(store)
        }
        EmbeddingSource::Endpoint(endpoint) => {
            let mut vectors: Vec<EmbeddingVector> = Vec::new();
            let cached = match existing.filter(|p| p.exists()) {
                Some(p) => Some(EmbeddingStore::from_jsonl_path(p)?),
                None => None,
            };
            let mut todo = Vec::new();
            for d in corpus.documents() {
                match cached.as_ref().and_then(|s| s.vector(&d.doc_id)) {
                    Some(v) => vectors.push(EmbeddingVector {
                        doc_id: d.doc_id.clone(),
                        vector: v.to_vec(),
                    }),
                    None => todo.push((d.doc_id.clone(), d.text.clone())),
                }
            }
            if !todo.is_empty() {
                tracing::info!(count = todo.len(), "fetching embeddings");
                vectors.extend(endpoint.fetch(&todo)?);
            }
            Ok(EmbeddingStore::new(vectors)?)
        }
    }
}
