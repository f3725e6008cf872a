use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relex_core::embed_store::EmbeddingEndpoint;
use relex_core::evaluation;
use relex_core::lm_client::RetryPolicy;
use relex_core::pipeline::{self, EmbeddingSource};
use relex_core::{
    Corpus, EvalReport, ExtractionConfig, HttpBackend, LmClient, MockBackend, RelationRegistry,
    RunManifest, RunOptions, SnapshotKb, Split, Variant,
};

#[derive(Parser)]
#[command(
    name = "relex",
    version,
    about = "Relation extraction with retrieved in-context examples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or fetch an embedding for every corpus document.
    Index(IndexArgs),
    /// Run extraction and write predictions into a run directory.
    Extract(ExtractArgs),
    /// Score a predictions file against corpus annotations.
    Evaluate(EvaluateArgs),
    /// Re-score one extraction over a grid of tau and theta.
    Sweep(SweepArgs),
    /// Compare set-selection variants.
    Ablate(AblateArgs),
    /// Write the prompts an extraction would send, without a backend.
    Prompts(PromptsArgs),
    /// Per-relation average top-N similarity of dev documents, as CSV.
    Histogram(HistogramArgs),
    /// Write a perturbed copy of a corpus.
    Perturb {
        #[command(subcommand)]
        kind: PerturbKind,
    },
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus JSONL file; repeat for several splits.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    /// Relation registry JSONL ({"id", "name"} per line).
    #[arg(long)]
    relations: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        let registry = RelationRegistry::from_jsonl_path(&self.relations)
            .with_context(|| format!("loading relations {}", self.relations.display()))?;
        Ok(Corpus::from_jsonl_paths(&self.corpora, registry)?)
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with N, K, L, tau, theta, max_tokens, seed, variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Split whose documents are extraction targets.
    #[arg(long, default_value = "dev")]
    targets: Split,
    /// Restrict to these relation ids (repeatable).
    #[arg(long = "relation")]
    relation_filter: Vec<String>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

impl RunArgs {
    fn config(&self) -> Result<ExtractionConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExtractionConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(t) = self.theta {
            cfg.theta = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            targets: self.targets,
            relations: (!self.relation_filter.is_empty()).then(|| self.relation_filter.clone()),
            workers: self.workers,
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    /// Completions endpoint base URL, or `mock:PATH` for a scripted response file.
    #[arg(long)]
    backend: String,
    #[arg(long, default_value = "default")]
    model: String,
    /// Name of the environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Directory for the on-disk completion cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Treat every token as probability 1 when the backend returns no logprobs.
    #[arg(long)]
    allow_missing_logprobs: bool,
}

impl BackendArgs {
    fn client(&self) -> Result<LmClient> {
        let mut client = if let Some(path) = self.backend.strip_prefix("mock:") {
            LmClient::new(MockBackend::from_jsonl_path(path)?)
        } else {
            let key = std::env::var(&self.api_key_env).ok();
            let mut backend = HttpBackend::new(
                &self.backend,
                self.model.clone(),
                key,
                Duration::from_secs(self.timeout_secs),
            )?;
            backend.allow_missing_logprobs = self.allow_missing_logprobs;
            LmClient::new(backend)
        };
        if let Some(dir) = &self.cache {
            client = client.with_cache_dir(dir)?;
        }
        Ok(client
            .with_max_in_flight(self.max_in_flight)
            .with_retry(RetryPolicy::default()))
    }
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Embedding JSONL; read in file mode, written in endpoint mode.
    #[arg(long)]
    embeddings: PathBuf,
    /// Embeddings endpoint; vectors already in the file are reused.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Parent directory of run directories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Split holding the gold annotations.
    #[arg(long, default_value = "dev")]
    targets: Split,
    #[arg(long = "relation")]
    relation_filter: Vec<String>,
    /// KB snapshot JSONL; adds a second report against KB-augmented gold.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// e.g. "tau=0.05,0.1;theta=0.2". Missing axes use the full default grid.
    #[arg(long, default_value = "")]
    grid: String,
    /// Directory for sweep.json and one predictions file per cell.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Variants to compare (comma separated); defaults to all.
    #[arg(long = "variants", value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Seeds for the random variants (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// JSONL output, one planned prompt per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PerturbKind {
    /// Replace every annotated entity string with a synthetic name.
    RandomizeEntities {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file for the original-to-synthetic mapping.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Relabel a fraction of distant documents with wrong entity pairs.
    AdversarialLabels {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Index(a) => cmd_index(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Prompts(a) => cmd_prompts(a),
        Command::Histogram(a) => cmd_histogram(a),
        Command::Perturb { kind } => cmd_perturb(kind),
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_store(corpus: &Corpus, path: &Path) -> Result<relex_core::EmbeddingStore> {
    pipeline::index(corpus, EmbeddingSource::File(path), None)
        .with_context(|| format!("loading embeddings {}", path.display()))
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let corpus = a.corpus.load()?;
    let store = match &a.endpoint {
        Some(url) => {
            let mut endpoint = EmbeddingEndpoint::new(url.clone());
            endpoint.model = a.embed_model.clone();
            endpoint.api_key = std::env::var(&a.api_key_env).ok();
            endpoint.batch_size = a.batch_size;
            let store = pipeline::index(
                &corpus,
                EmbeddingSource::Endpoint(&endpoint),
                Some(&a.embeddings),
            )?;
            let mut w = create(&a.embeddings)?;
            store.write_jsonl(&mut w)?;
            w.flush()?;
            store
        }
        None => load_store(&corpus, &a.embeddings)?,
    };
    println!(
        "indexed {} documents, dimension {}",
        store.len(),
        store.dimension()
    );
    Ok(())
}

fn relation_name(corpus: &Corpus) -> impl Fn(&str) -> Option<String> + '_ {
    |id| corpus.relations().get(id).map(|r| r.name.clone())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let opts = a.run.options();
    let corpus = a.corpus.load()?;
    let store = load_store(&corpus, &a.embeddings)?;
    let client = a.backend.client()?;
    let manifest = RunManifest::new(
        cfg.clone(),
        &a.corpus.corpora,
        &a.corpus.relations,
        &a.embeddings,
        client.backend_id(),
        &opts,
    )?;
    let (preds, diagnostics) = pipeline::extract(&corpus, &store, &client, &cfg, &opts)?;
    let run_dir = manifest.run_dir(&a.out);
    let path = pipeline::write_extract_outputs(&run_dir, &manifest, &preds, &diagnostics)?;
    for rel in &diagnostics.skipped_relations {
        eprintln!("skipped relation {rel}: no distant documents");
    }
    if !diagnostics.target_errors.is_empty() {
        eprintln!(
            "{} targets failed; see diagnostics.json",
            diagnostics.target_errors.len()
        );
    }
    println!(
        "{} predictions ({} backend calls, {} cache hits)",
        preds.len(),
        diagnostics.backend_calls,
        diagnostics.cache_hits
    );
    println!("{}", path.display());
    Ok(())
}

fn print_report(title: &str, report: &EvalReport, corpus: &Corpus) {
    println!("{title}");
    print!("{}", report.table(relation_name(corpus)));
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let preds = pipeline::read_predictions(&a.predictions)?;
    let corpus = a.corpus.load()?;
    let gold = corpus.restricted_to(a.targets);
    let kb = match &a.kb {
        Some(p) => Some(SnapshotKb::from_jsonl_path(p)?),
        None => None,
    };
    let rels = (!a.relation_filter.is_empty()).then_some(a.relation_filter.as_slice());
    let out = pipeline::evaluate(
        &preds,
        &gold,
        rels,
        kb.as_ref().map(|k| k as &dyn relex_core::KbVerifier),
    )?;
    print_report("annotated gold", &out.report, &corpus);
    if let Some(kb) = &out.kb {
        println!();
        println!(
            "kb-augmented gold: {} -> {} triplets ({} added)",
            kb.gold_before, kb.gold_after, kb.added_triplets
        );
        print!("{}", kb.report.table(relation_name(&corpus)));
    }
    if let Some(path) = &a.out {
        let manifest = a
            .predictions
            .parent()
            .map(|d| d.join("manifest.json"))
            .filter(|p| p.exists())
            .map(|p| -> Result<serde_json::Value> {
                Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
            })
            .transpose()?;
        let manifest_hash = manifest
            .as_ref()
            .and_then(|m| serde_json::from_value::<RunManifest>(m.clone()).ok())
            .map(|m| m.hash());
        write_json(
            path,
            &serde_json::json!({
                "predictions": pipeline::InputFile::hash(&a.predictions)?,
                "manifest_hash": manifest_hash,
                "manifest": manifest,
                "report": out.report,
                "kb": out.kb,
            }),
        )?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let opts = a.run.options();
    let (taus, thetas) = pipeline::parse_grid(&a.grid).map_err(anyhow::Error::msg)?;
    if taus.is_empty() || thetas.is_empty() {
        bail!("empty grid");
    }
    let corpus = a.corpus.load()?;
    let store = load_store(&corpus, &a.embeddings)?;
    let client = a.backend.client()?;
    let result = pipeline::sweep(&corpus, &store, &client, &cfg, &opts, &taus, &thetas)?;

    print!("{:>8}", "tau\\theta");
    for t in &thetas {
        print!(" {t:>8}");
    }
    println!();
    for tau in &taus {
        print!("{tau:>9}");
        for theta in &thetas {
            let cell = result
                .cells
                .iter()
                .find(|c| c.tau == *tau && c.theta == *theta)
                .expect("cell on grid");
            print!(" {:>8.2}", 100.0 * cell.micro.f1);
        }
        println!();
    }
    if let Some(f1) = result.default_f1 {
        println!(
            "default (tau={}, theta={}): {:.2}",
            cfg.tau,
            cfg.theta,
            100.0 * f1
        );
    }
    println!(
        "best (tau={}, theta={}): {:.2}",
        result.calibration.tau,
        result.calibration.theta,
        100.0 * result.best_f1
    );
    if let Some(dir) = &a.out {
        write_json(&dir.join("sweep.json"), &result)?;
        for cell in &result.cells {
            let preds = result
                .predictions_at(cell.tau, cell.theta)
                .expect("cell predictions");
            let mut w = create(&dir.join(format!("tau={}_theta={}.jsonl", cell.tau, cell.theta)))?;
            pipeline::write_predictions(preds, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let opts = a.run.options();
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let corpus = a.corpus.load()?;
    let store = load_store(&corpus, &a.embeddings)?;
    let client = a.backend.client()?;
    let rows = pipeline::ablate(&corpus, &store, &client, &cfg, &opts, &variants, &a.seeds)?;
    println!("{:<14} {:>17}", "variant", "micro F1");
    for row in &rows {
        println!("{}", row.display());
    }
    if let Some(path) = &a.out {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn cmd_prompts(a: PromptsArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let opts = a.run.options();
    let corpus = a.corpus.load()?;
    let store = load_store(&corpus, &a.embeddings)?;
    let prompts = pipeline::plan_prompts(&corpus, &store, &cfg, &opts)?;
    let mut w = create(&a.out)?;
    for p in &prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{} prompts", prompts.len());
    Ok(())
}

fn cmd_histogram(a: HistogramArgs) -> Result<()> {
    let corpus = a.corpus.load()?;
    let store = load_store(&corpus, &a.embeddings)?;
    let records = evaluation::similarity_histogram(&store, &corpus, a.n)?;
    let mut w = create(&a.out)?;
    evaluation::write_histogram_csv(&records, &mut w)?;
    w.flush()?;
    println!("{} records", records.len());
    Ok(())
}

fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    corpus.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_perturb(kind: PerturbKind) -> Result<()> {
    match kind {
        PerturbKind::RandomizeEntities {
            corpus,
            seed,
            out,
            mapping,
        } => {
            let c = corpus.load()?;
            let r = c.perturb_randomize_entities(seed);
            write_corpus(&r.corpus, &out)?;
            if let Some(path) = mapping {
                write_json(&path, &r.mapping)?;
            }
            println!("{} entities renamed", r.mapping.len());
        }
        PerturbKind::AdversarialLabels {
            corpus,
            fraction,
            seed,
            out,
        } => {
            if !(0.0..=1.0).contains(&fraction) {
                bail!("fraction must lie in [0, 1]");
            }
            let c = corpus.load()?;
            let r = c.perturb_adversarial_labels(fraction, seed);
            write_corpus(&r.corpus, &out)?;
            println!(
                "{} selected, {} altered, {} skipped",
                r.selected.len(),
                r.altered.len(),
                r.skipped.len()
            );
        }
    }
    Ok(())
}
