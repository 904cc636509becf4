//! Subcommand definitions and their handlers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use curate_core::audit::{stratified_sample, AuditCandidate, AuditConfig, AuditStore, StrataSpec, SystemClock};
use curate_core::benchreport::{facet_table, join_predictions, overall_table, score_breakdown, Facet, GoldRecord, ModelScores, PredictionRecord};
use curate_core::dedup::{find_duplicates, DedupParams};
use curate_core::export::{dataset_stats, export_items, to_export_jsonl, SplitConfig};
use curate_core::jsonl::{read_jsonl, write_atomic, write_jsonl};
use curate_core::ledger::{partition_trainable, reclassify, CatalogEntry};
use curate_core::lexicon::Lexicons;
use curate_core::normalize::{NormalizeOptions, Normalizer, Passage, RawPage};
use curate_core::ocrqa::{page_quality, route_page, QualityRecord, RouteThresholds};
use curate_core::pipeline::{JudgeSpec, Pipeline, PipelineConfig, RunOptions, Stage};
use curate_core::validate::{
    run_validation, AdjudicationConfig, CoverageThresholds, DecisionRecord, JudgeClient, QaItem, RouteDecision, RuleConfig, StubJudge,
    Validator,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::judge::HttpJudge;

const JUDGE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Parser)]
#[command(name = "curate", version, about = "Curate OCR'd classical texts into a dialogue dataset")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// License ledger operations.
    #[command(subcommand)]
    Ledger(LedgerCmd),
    /// Near-duplicate page detection.
    #[command(subcommand)]
    Dedup(RunOnly<DedupArgs>),
    /// OCR text normalization and passage segmentation.
    #[command(subcommand)]
    Normalize(RunOnly<NormalizeArgs>),
    /// Page quality scoring and routing.
    #[command(subcommand)]
    Ocrqa(RunOnly<OcrqaArgs>),
    /// Rule checks, evidence anchoring and judge adjudication.
    #[command(subcommand)]
    Validate(RunOnly<ValidateArgs>),
    /// Human audit sampling and the review service.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Dialogue-format dataset export.
    #[command(subcommand)]
    Export(RunOnly<ExportArgs>),
    /// Benchmark accuracy tables.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run every stage from one config file.
    #[command(subcommand)]
    Pipeline(RunOnly<PipelineArgs>),
}

#[derive(Debug, Subcommand)]
pub enum RunOnly<A: Args> {
    Run(A),
}

impl<A: Args> RunOnly<A> {
    fn into_args(self) -> A {
        match self {
            RunOnly::Run(a) => a,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum LedgerCmd {
    /// Classify catalog entries and split trainable from shadow.
    Partition {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_trainable: PathBuf,
        #[arg(long)]
        out_shadow: PathBuf,
        #[arg(long)]
        lexicons: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Directory of page JSONL files.
    #[arg(long)]
    pub pages: PathBuf,
    /// TOML file with shingle and LSH parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Directory of page JSONL files.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
    /// Also apply the aggressive cleanup rules.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct OcrqaArgs {
    /// Page JSONL file or directory of them.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// TOML file with `sample_rate`, `seed` and a `[thresholds]` table.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub passages: PathBuf,
    /// TOML file with `[rules]`, `[thresholds]` and `[adjudication]` tables.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// `stub` or `endpoint:<url>`.
    #[arg(long, default_value = "stub")]
    pub judge: String,
    /// Decision log output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Serve the audit HTTP API over a state directory.
    Serve {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Task JSONL to load before serving; tasks already present are kept.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        required_verdicts: usize,
        #[arg(long, default_value_t = 30)]
        lease_minutes: i64,
    },
    /// Draw a stratified audit sample from candidate items.
    Sample {
        /// Candidate JSONL: item, route, ocr_confidence, passage.
        #[arg(long)]
        items: PathBuf,
        /// Strata TOML; defaults to the bundled taxonomy's risk classes.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lexicons: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub decisions: PathBuf,
    #[arg(long)]
    pub passages: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub system_prompt: Option<String>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Accuracy breakdown of predictions against an answer key.
    Report {
        #[arg(long)]
        gold: PathBuf,
        /// Prediction JSONL; repeat for several models.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// overall, language, difficulty or qtype.
        #[arg(long, default_value = "overall")]
        facet: String,
        /// Write breakdown rows as JSONL here as well.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Rerun this stage and every later one.
    #[arg(long)]
    pub from: Option<Stage>,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ledger(LedgerCmd::Partition {
            input,
            out_trainable,
            out_shadow,
            lexicons,
        }) => ledger_partition(&input, &out_trainable, &out_shadow, lexicons.as_deref()),
        Command::Dedup(c) => dedup_run(c.into_args()),
        Command::Normalize(c) => normalize_run(c.into_args()),
        Command::Ocrqa(c) => ocrqa_run(c.into_args()),
        Command::Validate(c) => validate_run(c.into_args()),
        Command::Audit(AuditCmd::Serve {
            state,
            port,
            host,
            tasks,
            required_verdicts,
            lease_minutes,
        }) => {
            let cfg = AuditConfig {
                required_verdicts,
                lease_minutes,
            };
            audit_serve(&state, &host, port, tasks.as_deref(), cfg)
        }
        Command::Audit(AuditCmd::Sample {
            items,
            spec,
            n,
            seed,
            out,
            lexicons,
        }) => audit_sample(&items, spec.as_deref(), n, seed, &out, lexicons.as_deref()),
        Command::Export(c) => export_run(c.into_args()),
        Command::Bench(BenchCmd::Report { gold, pred, facet, json }) => bench_report(&gold, &pred, &facet, json.as_deref()),
        Command::Pipeline(c) => pipeline_run(c.into_args()),
    }
}

fn lexicons(dir: Option<&Path>) -> Result<Lexicons> {
    Ok(match dir {
        Some(d) => Lexicons::load_dir(d)?,
        None => Lexicons::builtin(),
    })
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            toml::from_str(&text).with_context(|| p.display().to_string())
        }
        None => Ok(T::default()),
    }
}

fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl(path)?)
}

/// Page records from one file or every `.jsonl` file in a directory, in
/// page order.
fn read_pages(path: &Path) -> Result<Vec<RawPage>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for e in fs::read_dir(path).with_context(|| path.display().to_string())? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut pages = Vec::new();
    for f in files {
        let batch: Vec<RawPage> = read(&f)?;
        for p in &batch {
            p.validate().map_err(anyhow::Error::msg)?;
        }
        pages.extend(batch);
    }
    pages.sort_by(|a, b| (&a.entry_id, a.page_no).cmp(&(&b.entry_id, b.page_no)));
    if let Some(w) = pages.windows(2).find(|w| w[0].page_ref() == w[1].page_ref()) {
        bail!("page {} appears twice", w[0].page_ref());
    }
    Ok(pages)
}

fn by_entry(pages: Vec<RawPage>) -> BTreeMap<String, Vec<RawPage>> {
    let mut docs: BTreeMap<String, Vec<RawPage>> = BTreeMap::new();
    for p in pages {
        docs.entry(p.entry_id.clone()).or_default().push(p);
    }
    docs
}

fn ledger_partition(input: &Path, trainable: &Path, shadow: &Path, lex: Option<&Path>) -> Result<()> {
    let lex = lexicons(lex)?;
    let entries: Vec<CatalogEntry> = read(input)?;
    let part = partition_trainable(&reclassify(entries, &lex.license))?;
    write_jsonl(trainable, &part.trainable)?;
    write_jsonl(shadow, &part.shadow)?;
    eprintln!("{} trainable, {} shadow", part.trainable.len(), part.shadow.len());
    Ok(())
}

fn dedup_run(a: DedupArgs) -> Result<()> {
    let lex = lexicons(a.lexicons.as_deref())?;
    let params: DedupParams = read_toml(a.params.as_deref())?;
    let n = Normalizer::new(&lex, NormalizeOptions::default());
    let texts: Vec<_> = read_pages(&a.pages)?
        .iter()
        .map(|p| (p.page_ref(), n.page_text(p)))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    let clusters: Vec<_> = find_duplicates(&texts, &params)?
        .into_iter()
        .filter(|c| !c.is_singleton())
        .collect();
    write_jsonl(&a.out, &clusters)?;
    eprintln!("{} pages, {} duplicate clusters", texts.len(), clusters.len());
    Ok(())
}

fn normalize_run(a: NormalizeArgs) -> Result<()> {
    let lex = lexicons(a.lexicons.as_deref())?;
    let opts = if a.strict { NormalizeOptions::strict() } else { NormalizeOptions::default() };
    let n = Normalizer::new(&lex, opts);
    let passages: Vec<Passage> = by_entry(read_pages(&a.input)?)
        .values()
        .flat_map(|pages| n.process_document(pages))
        .collect();
    write_jsonl(&a.out, &passages)?;
    eprintln!("{} passages", passages.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OcrqaFile {
    sample_rate: f64,
    seed: u64,
    thresholds: RouteThresholds,
}

impl Default for OcrqaFile {
    fn default() -> Self {
        Self {
            sample_rate: 1.0,
            seed: 42,
            thresholds: RouteThresholds::default(),
        }
    }
}

fn ocrqa_run(a: OcrqaArgs) -> Result<()> {
    let lex = lexicons(a.lexicons.as_deref())?;
    let cfg: OcrqaFile = read_toml(a.thresholds.as_deref())?;
    let mut report = Vec::new();
    for p in read_pages(&a.input)?.iter().filter(|p| !p.lines.is_empty()) {
        let q = page_quality(p, cfg.sample_rate, cfg.seed, &lex.stopwords)?;
        let route = route_page(&q, &cfg.thresholds)?;
        report.push(QualityRecord { quality: q, route });
    }
    write_jsonl(&a.out, &report)?;
    eprintln!("{} pages scored", report.len());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ValidateFile {
    rules: RuleConfig,
    thresholds: CoverageThresholds,
    adjudication: AdjudicationConfig,
}

/// Judge client for a `stub` / `endpoint:<url>` spec. The environment
/// override applies here as it does for pipeline runs.
pub fn judge_client(spec: &str, lex: &Lexicons) -> Result<Arc<dyn JudgeClient>> {
    let spec: JudgeSpec = match std::env::var(curate_core::pipeline::JUDGE_ENDPOINT_ENV) {
        Ok(url) if !url.trim().is_empty() => JudgeSpec::Endpoint(url.trim().to_string()),
        _ => spec.parse().map_err(anyhow::Error::msg)?,
    };
    Ok(match spec {
        JudgeSpec::Stub => Arc::new(StubJudge::new(lex.stopwords.clone())),
        JudgeSpec::Endpoint(url) => Arc::new(HttpJudge::new(url, JUDGE_TIMEOUT)),
    })
}

fn validate_run(a: ValidateArgs) -> Result<()> {
    let lex = lexicons(a.lexicons.as_deref())?;
    let cfg: ValidateFile = read_toml(a.rules.as_deref())?;
    cfg.thresholds.validate()?;
    let items: Vec<QaItem> = read(&a.items)?;
    let passages: Vec<Passage> = read(&a.passages)?;
    let passages: HashMap<String, Passage> = passages.into_iter().map(|p| (p.passage_id.clone(), p)).collect();
    let judge = judge_client(&a.judge, &lex)?;
    let validator = Validator {
        rules: &cfg.rules,
        banned: &lex.banned,
        stopwords: &lex.stopwords,
        thresholds: cfg.thresholds,
    };
    let decisions = run_validation(&items, &passages, &validator, judge.as_ref(), &cfg.adjudication)?;
    write_jsonl(&a.out, &decisions)?;
    let accepted = decisions.iter().filter(|d| d.route == RouteDecision::Accept).count();
    eprintln!("{} items, {accepted} accepted", decisions.len());
    Ok(())
}

fn audit_serve(state: &Path, host: &str, port: u16, tasks: Option<&Path>, cfg: AuditConfig) -> Result<()> {
    let store = AuditStore::open(state, cfg, Arc::new(SystemClock))?;
    if let Some(t) = tasks {
        let added = store.add_tasks(&read(t)?)?;
        eprintln!("loaded {added} new tasks");
    }
    let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(Arc::new(store), addr))?;
    Ok(())
}

fn audit_sample(items: &Path, spec: Option<&Path>, n: usize, seed: u64, out: &Path, lex: Option<&Path>) -> Result<()> {
    let spec: StrataSpec = match spec {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => StrataSpec::from_taxonomy(&lexicons(lex)?.taxonomy),
    };
    let candidates: Vec<AuditCandidate> = read(items)?;
    let sample = stratified_sample(&candidates, &spec, n, seed)?;
    write_jsonl(out, &sample.tasks)?;
    for (s, gap) in &sample.shortfalls {
        eprintln!("stratum {s}: {gap} short of {n}");
    }
    eprintln!("{} tasks over {} strata", sample.tasks.len(), sample.strata.len());
    Ok(())
}

fn export_run(a: ExportArgs) -> Result<()> {
    let items: Vec<QaItem> = read(&a.items)?;
    let decisions: Vec<DecisionRecord> = read(&a.decisions)?;
    let passages: Vec<Passage> = read(&a.passages)?;
    let routes: HashMap<String, _> = decisions.into_iter().map(|d| (d.item_id, d.route)).collect();
    let pairs = items
        .into_iter()
        .map(|i| {
            let r = routes
                .get(&i.item_id)
                .cloned()
                .with_context(|| format!("no decision for item `{}`", i.item_id))?;
            Ok((i, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let texts: HashMap<String, String> = passages.into_iter().map(|p| (p.passage_id, p.text)).collect();
    let split = SplitConfig {
        seed: a.seed,
        val_fraction: a.val_fraction,
    };
    let (records, rejections) = export_items(&pairs, &texts, a.system_prompt.as_deref(), &split);
    for r in &rejections {
        eprintln!("rejected {}: {}", r.item_id, r.reason);
    }
    write_atomic(&a.out, to_export_jsonl(&records).as_bytes())?;
    let stats = serde_json::to_vec_pretty(&dataset_stats(&records))?;
    write_atomic(&a.stats, &stats)?;
    eprintln!("{} records exported", records.len());
    Ok(())
}

fn bench_report(gold: &Path, preds: &[PathBuf], facet: &str, json: Option<&Path>) -> Result<()> {
    let facet: Facet = facet.parse().map_err(anyhow::Error::msg)?;
    let gold: Vec<GoldRecord> = read(gold)?;
    let mut models = Vec::new();
    for p in preds {
        let predictions: Vec<PredictionRecord> = read(p)?;
        let model = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        models.push(ModelScores {
            model,
            records: join_predictions(&gold, &predictions)?,
        });
    }
    let table = match facet {
        Facet::Overall => overall_table(&models)?,
        f => facet_table(&models, f)?,
    };
    print!("{table}");
    if let Some(out) = json {
        let mut rows = Vec::new();
        for m in &models {
            for row in score_breakdown(&m.records, facet)?.rows {
                rows.push(serde_json::json!({ "model": m.model, "facet": facet, "row": row }));
            }
        }
        write_jsonl(out, &rows)?;
    }
    Ok(())
}

fn pipeline_run(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let lex = cfg.lexicons()?;
    let judge = match cfg.judge_spec()? {
        JudgeSpec::Stub => None,
        JudgeSpec::Endpoint(url) => Some(judge_client(&format!("endpoint:{url}"), &lex)?),
    };
    let pipeline = Pipeline::new(cfg, judge)?;
    let outcomes = pipeline.run(&RunOptions {
        from: a.from,
        dry_run: a.dry_run,
        jobs: a.jobs,
    })?;
    for o in outcomes {
        println!("{:<13} {:?}", o.stage.as_str(), o.status);
    }
    Ok(())
}
