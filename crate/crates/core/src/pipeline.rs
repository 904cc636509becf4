//! Stage orchestration with per-stage manifests.
//!
//! Stages run in a fixed order, each reading the previous stages' files
//! under the output directory. A stage whose input, config and output
//! digests all match its last manifest is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{stratified_sample, AuditCandidate, StrataSpec};
use crate::dedup::{find_duplicates, redundant_pages, DedupParams, DupCluster};
use crate::export::{dataset_stats, export_items, to_export_jsonl, SplitConfig};
use crate::jsonl::{parse_jsonl, to_jsonl, write_atomic};
use crate::ledger::{link_editions, partition_trainable, reclassify, CatalogEntry, DEFAULT_LINK_THRESHOLD};
use crate::lexicon::{builtin_text, Lexicons};
use crate::normalize::{strip_boilerplate, BoilerplateConfig, NormalizeOptions, Normalizer, Passage, RawLine, RawPage};
use crate::ocrqa::{page_quality, route_page, QualityRecord, Route, RouteThresholds};
use crate::taxonomy::{assign_domain, distribution_report, enforce_quotas, QuotaConfig, TaggedPassage};
use crate::types::{PageRef, QaType};
use crate::validate::{
    build_generation_request, parse_candidates, run_validation, AdjudicationConfig, CoverageThresholds,
    DecisionRecord, GenerationRequest, GeneratorClient, JudgeClient, QaItem, RecordedGenerator, RecordedResponse,
    RuleConfig, StubGenerator, StubJudge, Validator,
};

pub const JUDGE_ENDPOINT_ENV: &str = "CURATE_JUDGE_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailure { stage: Stage, cause: String },
}

fn fail(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |cause| PipelineError::StageFailure { stage, cause }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ledger,
    Normalize,
    Ocrqa,
    Dedup,
    Taxonomy,
    Validate,
    AuditSample,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ledger,
        Stage::Normalize,
        Stage::Ocrqa,
        Stage::Dedup,
        Stage::Taxonomy,
        Stage::Validate,
        Stage::AuditSample,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ledger => "ledger",
            Stage::Normalize => "normalize",
            Stage::Ocrqa => "ocrqa",
            Stage::Dedup => "dedup",
            Stage::Taxonomy => "taxonomy",
            Stage::Validate => "validate",
            Stage::AuditSample => "audit_sample",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerStage {
    pub link_threshold: f64,
}

impl Default for LedgerStage {
    fn default() -> Self {
        Self {
            link_threshold: DEFAULT_LINK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeStage {
    pub repair_devanagari: bool,
    pub boilerplate: BoilerplateConfig,
}

impl Default for NormalizeStage {
    fn default() -> Self {
        Self {
            repair_devanagari: true,
            boilerplate: BoilerplateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcrQaStage {
    pub sample_rate: f64,
    pub thresholds: RouteThresholds,
}

impl Default for OcrQaStage {
    fn default() -> Self {
        Self {
            sample_rate: 1.0,
            thresholds: RouteThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomyStage {
    pub quotas: QuotaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateStage {
    pub policy_version: String,
    pub qa_types: Vec<QaType>,
    /// `stub` or `recorded:<path>` (JSONL of request id and raw response).
    pub generator: String,
    /// `stub` or `endpoint:<url>`.
    pub judge: String,
    pub rules: RuleConfig,
    pub thresholds: CoverageThresholds,
    pub adjudication: AdjudicationConfig,
}

impl Default for ValidateStage {
    fn default() -> Self {
        Self {
            policy_version: "v1".into(),
            qa_types: QaType::ALL.to_vec(),
            generator: "stub".into(),
            judge: "stub".into(),
            rules: RuleConfig::default(),
            thresholds: CoverageThresholds::default(),
            adjudication: AdjudicationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditStage {
    pub per_stratum_n: usize,
    pub ocr_high: f64,
    pub ocr_low: f64,
}

impl Default for AuditStage {
    fn default() -> Self {
        Self {
            per_stratum_n: 5,
            ocr_high: 0.80,
            ocr_low: 0.55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportStage {
    pub system_prompt: Option<String>,
    pub val_fraction: f64,
}

impl Default for ExportStage {
    fn default() -> Self {
        Self {
            system_prompt: None,
            val_fraction: 0.05,
        }
    }
}

/// Where the judge lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeSpec {
    Stub,
    Endpoint(String),
}

impl FromStr for JudgeSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            _ if s == "stub" => Ok(JudgeSpec::Stub),
            Some(("endpoint", url)) if !url.is_empty() => Ok(JudgeSpec::Endpoint(url.to_string())),
            _ => Err(format!("judge must be `stub` or `endpoint:<url>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorSpec {
    Stub,
    Recorded(PathBuf),
}

/// The whole run in one file. Relative paths resolve against the config
/// file's directory. Stage seeds all derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_catalog")]
    pub catalog: PathBuf,
    #[serde(default)]
    pub lexicon_dir: Option<PathBuf>,
    #[serde(default)]
    pub ledger: LedgerStage,
    #[serde(default)]
    pub normalize: NormalizeStage,
    #[serde(default)]
    pub ocrqa: OcrQaStage,
    #[serde(default)]
    pub dedup: DedupParams,
    #[serde(default)]
    pub taxonomy: TaxonomyStage,
    #[serde(default)]
    pub validate: ValidateStage,
    #[serde(default)]
    pub audit: AuditStage,
    #[serde(default)]
    pub export: ExportStage,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    42
}

fn default_catalog() -> PathBuf {
    PathBuf::from("catalog.jsonl")
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn input_dir(&self) -> PathBuf {
        self.resolve(&self.input_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.input_dir().join(&self.catalog)
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec, PipelineError> {
        match self.validate.generator.split_once(':') {
            _ if self.validate.generator == "stub" => Ok(GeneratorSpec::Stub),
            Some(("recorded", p)) if !p.is_empty() => Ok(GeneratorSpec::Recorded(self.resolve(Path::new(p)))),
            _ => Err(PipelineError::Config(format!(
                "generator must be `stub` or `recorded:<path>`, got `{}`",
                self.validate.generator
            ))),
        }
    }

    /// Judge from the config, overridden by the environment variable.
    pub fn judge_spec(&self) -> Result<JudgeSpec, PipelineError> {
        match std::env::var(JUDGE_ENDPOINT_ENV) {
            Ok(url) if !url.trim().is_empty() => Ok(JudgeSpec::Endpoint(url.trim().to_string())),
            _ => self.validate.judge.parse().map_err(PipelineError::Config),
        }
    }

    pub fn lexicons(&self) -> Result<Lexicons, PipelineError> {
        match &self.lexicon_dir {
            Some(d) => Lexicons::load_dir(&self.resolve(d)).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(Lexicons::builtin()),
        }
    }

    fn lexicon_digest(&self) -> String {
        let mut h = Sha256::new();
        for file in crate::lexicon::ALL_FILES {
            let text = self
                .lexicon_dir
                .as_ref()
                .map(|d| self.resolve(d).join(file))
                .filter(|p| p.exists())
                .and_then(|p| fs::read(p).ok())
                .unwrap_or_else(|| builtin_text(file).unwrap_or_default().as_bytes().to_vec());
            h.update(file.as_bytes());
            h.update(sha256_hex(&text).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        if !self.catalog_path().is_file() {
            return Err(cfg(format!("catalog {} not found", self.catalog_path().display())));
        }
        if let Some(d) = &self.lexicon_dir {
            if !self.resolve(d).is_dir() {
                return Err(cfg(format!("lexicon dir {} not found", self.resolve(d).display())));
            }
        }
        self.lexicons()?;
        if !(self.ledger.link_threshold > 0.0 && self.ledger.link_threshold <= 1.0) {
            return Err(cfg(format!("ledger.link_threshold {} outside (0, 1]", self.ledger.link_threshold)));
        }
        let bp = &self.normalize.boilerplate;
        if !(bp.min_page_fraction > 0.0 && bp.min_page_fraction <= 1.0) {
            return Err(cfg("normalize.boilerplate.min_page_fraction outside (0, 1]".into()));
        }
        if !(self.ocrqa.sample_rate > 0.0 && self.ocrqa.sample_rate <= 1.0) {
            return Err(cfg(format!("ocrqa.sample_rate {} outside (0, 1]", self.ocrqa.sample_rate)));
        }
        self.ocrqa.thresholds.validate().map_err(|e| cfg(e.to_string()))?;
        self.dedup_params().validate().map_err(|e| cfg(e.to_string()))?;
        self.taxonomy.quotas.validate().map_err(|e| cfg(e.to_string()))?;
        self.validate.thresholds.validate().map_err(|e| cfg(e.to_string()))?;
        if self.validate.rules.min_len > self.validate.rules.max_len {
            return Err(cfg("validate.rules.min_len exceeds max_len".into()));
        }
        if self.validate.qa_types.is_empty() {
            return Err(cfg("validate.qa_types is empty".into()));
        }
        if let GeneratorSpec::Recorded(p) = self.generator_spec()? {
            if !p.is_file() {
                return Err(cfg(format!("recorded responses {} not found", p.display())));
            }
        }
        self.judge_spec()?;
        if !(self.audit.ocr_low <= self.audit.ocr_high) {
            return Err(cfg("audit.ocr_low exceeds audit.ocr_high".into()));
        }
        if !(0.0..=1.0).contains(&self.export.val_fraction) {
            return Err(cfg("export.val_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dedup_params(&self) -> DedupParams {
        DedupParams {
            seed: self.seed,
            ..self.dedup
        }
    }

    fn stage_config_json(&self, stage: Stage) -> serde_json::Value {
        let block = match stage {
            Stage::Ledger => serde_json::to_value(&self.ledger),
            Stage::Normalize => serde_json::to_value(&self.normalize),
            Stage::Ocrqa => serde_json::to_value((&self.normalize, &self.ocrqa)),
            Stage::Dedup => serde_json::to_value((&self.normalize, self.dedup_params(), &self.ledger)),
            Stage::Taxonomy => serde_json::to_value(&self.taxonomy),
            Stage::Validate => serde_json::to_value(&self.validate),
            Stage::AuditSample => serde_json::to_value(&self.audit),
            Stage::Export => serde_json::to_value(&self.export),
        }
        .expect("config serializes");
        serde_json::json!({ "seed": self.seed, "stage": block })
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub input_digest: String,
    pub output_digest: String,
    pub config_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub manifest: Option<StageManifest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn files_digest(files: &[(String, Vec<u8>)]) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(sha256_hex(bytes).as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

const MANIFEST_DIR: &str = "manifests";

fn stage_outputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Ledger => &["ledger/trainable.jsonl", "ledger/shadow.jsonl"],
        Stage::Normalize => &["normalize/pages.jsonl", "normalize/passages.jsonl"],
        Stage::Ocrqa => &["ocrqa/quality.jsonl", "ocrqa/pages.jsonl", "ocrqa/passages.jsonl"],
        Stage::Dedup => &["dedup/clusters.jsonl", "dedup/lineage.jsonl", "dedup/passages.jsonl"],
        Stage::Taxonomy => &[
            "taxonomy/passages.jsonl",
            "taxonomy/skew.json",
            "taxonomy/distribution.jsonl",
            "taxonomy/distribution.txt",
        ],
        Stage::Validate => &[
            "validate/requests.jsonl",
            "validate/items.jsonl",
            "validate/decisions.jsonl",
            "validate/generation_errors.jsonl",
        ],
        Stage::AuditSample => &["audit/tasks.jsonl", "audit/sample.json"],
        Stage::Export => &["export/dataset.jsonl", "export/stats.json", "export/rejections.jsonl"],
    }
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub from: Option<Stage>,
    pub dry_run: bool,
    pub jobs: Option<usize>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    lexicons: Lexicons,
    judge: Arc<dyn JudgeClient>,
}

/// Input files of a stage: (display name, path).
type Inputs = Vec<(String, PathBuf)>;

impl Pipeline {
    /// Validates the config. `judge` replaces the configured judge; without
    /// it an endpoint judge is a config error, since the core has no HTTP
    /// client.
    pub fn new(config: PipelineConfig, judge: Option<Arc<dyn JudgeClient>>) -> Result<Self, PipelineError> {
        config.validate()?;
        let lexicons = config.lexicons()?;
        let judge = match (judge, config.judge_spec()?) {
            (Some(j), _) => j,
            (None, JudgeSpec::Stub) => Arc::new(StubJudge::new(lexicons.stopwords.clone())),
            (None, JudgeSpec::Endpoint(url)) => {
                return Err(PipelineError::Config(format!("no client supplied for judge endpoint {url}")))
            }
        };
        Ok(Self {
            config,
            lexicons,
            judge,
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.config.output_dir().join(rel)
    }

    fn read_out(&self, stage: Stage, rel: &str) -> Result<String, PipelineError> {
        fs::read_to_string(self.out(rel)).map_err(|e| fail(stage)(format!("{rel}: {e}")))
    }

    fn read_out_jsonl<T: serde::de::DeserializeOwned>(&self, stage: Stage, rel: &str) -> Result<Vec<T>, PipelineError> {
        let text = self.read_out(stage, rel)?;
        parse_jsonl(&text, Path::new(rel)).map_err(|e| fail(stage)(e.to_string()))
    }

    fn trainable(&self, stage: Stage) -> Result<Vec<CatalogEntry>, PipelineError> {
        self.read_out_jsonl(stage, "ledger/trainable.jsonl")
    }

    fn text_path(&self, entry: &CatalogEntry) -> Option<PathBuf> {
        entry.text_ref.as_ref().map(|r| self.config.input_dir().join(r))
    }

    fn inputs(&self, stage: Stage) -> Result<Option<Inputs>, PipelineError> {
        let out = |rel: &str| (rel.to_string(), self.out(rel));
        let text_refs = |list: &mut Inputs| -> Result<bool, PipelineError> {
            if !self.out("ledger/trainable.jsonl").exists() {
                return Ok(false);
            }
            for e in self.trainable(stage)? {
                if let (Some(r), Some(p)) = (&e.text_ref, self.text_path(&e)) {
                    list.push((format!("input:{r}"), p));
                }
            }
            Ok(true)
        };
        let mut list: Inputs = Vec::new();
        match stage {
            Stage::Ledger => list.push(("input:catalog".into(), self.config.catalog_path())),
            Stage::Normalize => {
                list.push(out("ledger/trainable.jsonl"));
                if !text_refs(&mut list)? {
                    return Ok(None);
                }
            }
            Stage::Ocrqa => {
                list.push(out("ledger/trainable.jsonl"));
                list.push(out("normalize/pages.jsonl"));
                if !text_refs(&mut list)? {
                    return Ok(None);
                }
            }
            Stage::Dedup => {
                list.push(out("ledger/trainable.jsonl"));
                list.push(out("ocrqa/pages.jsonl"));
                list.push(out("ocrqa/passages.jsonl"));
            }
            Stage::Taxonomy => list.push(out("dedup/passages.jsonl")),
            Stage::Validate => {
                list.push(out("taxonomy/passages.jsonl"));
                if let GeneratorSpec::Recorded(p) = self.config.generator_spec()? {
                    list.push(("input:recorded".into(), p));
                }
            }
            Stage::AuditSample => {
                list.push(out("validate/items.jsonl"));
                list.push(out("validate/decisions.jsonl"));
                list.push(out("taxonomy/passages.jsonl"));
                list.push(out("ocrqa/quality.jsonl"));
            }
            Stage::Export => {
                list.push(out("validate/items.jsonl"));
                list.push(out("validate/decisions.jsonl"));
                list.push(out("taxonomy/passages.jsonl"));
            }
        }
        Ok(Some(list))
    }

    fn digest_inputs(&self, stage: Stage, inputs: &Inputs) -> Result<Option<String>, PipelineError> {
        let mut files = Vec::new();
        for (name, path) in inputs {
            match fs::read(path) {
                Ok(b) => files.push((name.clone(), b)),
                Err(_) if !path.exists() => return Ok(None),
                Err(e) => return Err(fail(stage)(format!("{}: {e}", path.display()))),
            }
        }
        Ok(Some(files_digest(&files)))
    }

    fn config_digest(&self, stage: Stage) -> String {
        let mut v = self.config.stage_config_json(stage);
        v["lexicons"] = serde_json::Value::String(self.config.lexicon_digest());
        sha256_hex(v.to_string().as_bytes())
    }

    fn current_output_digest(&self, stage: Stage) -> Option<String> {
        let files: Option<Vec<(String, Vec<u8>)>> = stage_outputs(stage)
            .iter()
            .map(|rel| fs::read(self.out(rel)).ok().map(|b| (rel.to_string(), b)))
            .collect();
        files.map(|f| files_digest(&f))
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out(&format!("{MANIFEST_DIR}/{stage}.json"))
    }

    pub fn read_manifest(&self, stage: Stage) -> Option<StageManifest> {
        let text = fs::read_to_string(self.manifest_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn up_to_date(&self, stage: Stage) -> Result<Option<StageManifest>, PipelineError> {
        let Some(m) = self.read_manifest(stage) else { return Ok(None) };
        let Some(inputs) = self.inputs(stage)? else { return Ok(None) };
        let Some(input_digest) = self.digest_inputs(stage, &inputs)? else { return Ok(None) };
        let fresh = m.input_digest == input_digest
            && m.config_digest == self.config_digest(stage)
            && self.current_output_digest(stage).as_deref() == Some(m.output_digest.as_str());
        Ok(fresh.then_some(m))
    }

    /// Run the stages in order. With `from`, that stage and every later one
    /// run unconditionally.
    pub fn run(&self, opts: &RunOptions) -> Result<Vec<StageOutcome>, PipelineError> {
        if opts.dry_run {
            return Ok(Stage::ALL
                .iter()
                .map(|&stage| StageOutcome {
                    stage,
                    status: StageStatus::Planned,
                    manifest: None,
                })
                .collect());
        }
        match opts.jobs {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
                pool.install(|| self.run_all(opts.from))
            }
            None => self.run_all(opts.from),
        }
    }

    fn run_all(&self, from: Option<Stage>) -> Result<Vec<StageOutcome>, PipelineError> {
        let mut outcomes = Vec::new();
        for stage in Stage::ALL {
            let forced = from.is_some_and(|f| stage >= f);
            if !forced {
                if let Some(m) = self.up_to_date(stage)? {
                    log::info!("{stage}: up to date, skipped");
                    outcomes.push(StageOutcome {
                        stage,
                        status: StageStatus::Skipped,
                        manifest: Some(m),
                    });
                    continue;
                }
            }
            let m = self.run_stage(stage)?;
            outcomes.push(StageOutcome {
                stage,
                status: StageStatus::Ran,
                manifest: Some(m),
            });
        }
        Ok(outcomes)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageManifest, PipelineError> {
        let started_at = Utc::now();
        log::info!("{stage}: running");
        let outputs = match stage {
            Stage::Ledger => self.stage_ledger(),
            Stage::Normalize => self.stage_normalize(),
            Stage::Ocrqa => self.stage_ocrqa(),
            Stage::Dedup => self.stage_dedup(),
            Stage::Taxonomy => self.stage_taxonomy(),
            Stage::Validate => self.stage_validate(),
            Stage::AuditSample => self.stage_audit(),
            Stage::Export => self.stage_export(),
        }?;
        debug_assert_eq!(
            outputs.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            stage_outputs(stage).to_vec()
        );
        let inputs = self
            .inputs(stage)?
            .ok_or_else(|| fail(stage)("inputs vanished during the stage".into()))?;
        let input_digest = self
            .digest_inputs(stage, &inputs)?
            .ok_or_else(|| fail(stage)("inputs vanished during the stage".into()))?;
        for (rel, bytes) in &outputs {
            write_atomic(&self.out(rel), bytes).map_err(|e| fail(stage)(e.to_string()))?;
        }
        let manifest = StageManifest {
            stage,
            input_digest,
            output_digest: files_digest(&outputs),
            config_digest: self.config_digest(stage),
            inputs: inputs.into_iter().map(|(n, _)| n).collect(),
            outputs: outputs.into_iter().map(|(n, _)| n).collect(),
            started_at,
            finished_at: Utc::now(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.manifest_path(stage), &json).map_err(|e| fail(stage)(e.to_string()))?;
        Ok(manifest)
    }

    fn jsonl<T: Serialize>(stage: Stage, rel: &str, records: &[T]) -> Result<(String, Vec<u8>), PipelineError> {
        let text = to_jsonl(records).map_err(|e| fail(stage)(e.to_string()))?;
        Ok((rel.to_string(), text.into_bytes()))
    }

    fn json<T: Serialize>(rel: &str, value: &T) -> (String, Vec<u8>) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
        bytes.push(b'\n');
        (rel.to_string(), bytes)
    }

    fn stage_ledger(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Ledger;
        let path = self.config.catalog_path();
        let text = fs::read_to_string(&path).map_err(|e| fail(st)(format!("{}: {e}", path.display())))?;
        let entries: Vec<CatalogEntry> = parse_jsonl(&text, &path).map_err(|e| fail(st)(e.to_string()))?;
        let entries = reclassify(entries, &self.lexicons.license);
        let part = partition_trainable(&entries).map_err(|e| fail(st)(e.to_string()))?;
        Ok(vec![
            Self::jsonl(st, "ledger/trainable.jsonl", &part.trainable)?,
            Self::jsonl(st, "ledger/shadow.jsonl", &part.shadow)?,
        ])
    }

    /// Raw pages of trainable entries, sorted by page. Shadow entries are
    /// never touched: they are not in the trainable list and carry no
    /// text reference.
    fn raw_pages(&self, stage: Stage) -> Result<Vec<(CatalogEntry, Vec<RawPage>)>, PipelineError> {
        let entries = self.trainable(stage)?;
        entries
            .into_par_iter()
            .map(|e| {
                let Some(path) = self.text_path(&e) else {
                    return Ok((e, Vec::new()));
                };
                let text = fs::read_to_string(&path).map_err(|err| fail(stage)(format!("{}: {err}", path.display())))?;
                let mut pages: Vec<RawPage> = parse_jsonl(&text, &path).map_err(|err| fail(stage)(err.to_string()))?;
                let mut seen = BTreeSet::new();
                for p in &pages {
                    p.validate().map_err(fail(stage))?;
                    if p.entry_id != e.entry_id {
                        return Err(fail(stage)(format!(
                            "{}: page belongs to `{}`, not `{}`",
                            path.display(),
                            p.entry_id,
                            e.entry_id
                        )));
                    }
                    if !seen.insert(p.page_no) {
                        return Err(fail(stage)(format!("{}: page {} repeated", path.display(), p.page_no)));
                    }
                }
                pages.sort_by_key(|p| p.page_no);
                Ok((e, pages))
            })
            .collect()
    }

    fn normalizer(&self, opts: NormalizeOptions) -> Normalizer<'_> {
        let mut n = Normalizer::new(&self.lexicons, opts);
        n.boilerplate = self.config.normalize.boilerplate;
        n
    }

    fn base_opts(&self) -> NormalizeOptions {
        NormalizeOptions {
            repair_devanagari: self.config.normalize.repair_devanagari,
            aggressive: false,
        }
    }

    fn normalize_lines(n: &Normalizer<'_>, page: &RawPage) -> RawPage {
        RawPage {
            entry_id: page.entry_id.clone(),
            page_no: page.page_no,
            lines: page
                .lines
                .iter()
                .map(|l| RawLine {
                    text: n.normalize_text(&l.text),
                    confidence: l.confidence,
                })
                .collect(),
        }
    }

    fn stage_normalize(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Normalize;
        let docs = self.raw_pages(st)?;
        let n = self.normalizer(self.base_opts());
        let per_doc: Vec<(Vec<RawPage>, Vec<Passage>)> = docs
            .par_iter()
            .map(|(_, pages)| {
                let stripped = strip_boilerplate(pages, &n.boilerplate);
                let normalized: Vec<RawPage> = stripped.iter().map(|p| Self::normalize_lines(&n, p)).collect();
                let passages = n.segment_and_tag(&normalized);
                (normalized, passages)
            })
            .collect();
        let pages: Vec<RawPage> = per_doc.iter().flat_map(|(p, _)| p.clone()).collect();
        let passages: Vec<Passage> = per_doc.into_iter().flat_map(|(_, p)| p).collect();
        Ok(vec![
            Self::jsonl(st, "normalize/pages.jsonl", &pages)?,
            Self::jsonl(st, "normalize/passages.jsonl", &passages)?,
        ])
    }

    fn stage_ocrqa(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Ocrqa;
        let docs = self.raw_pages(st)?;
        let normalized: Vec<RawPage> = self.read_out_jsonl(st, "normalize/pages.jsonl")?;
        let by_ref: HashMap<PageRef, &RawPage> = normalized.iter().map(|p| (p.page_ref(), p)).collect();
        let cfg = &self.config.ocrqa;
        let strict = self.normalizer(NormalizeOptions {
            aggressive: true,
            ..self.base_opts()
        });
        let base = self.normalizer(self.base_opts());

        let per_doc = docs
            .par_iter()
            .map(|(_, pages)| -> Result<(Vec<QualityRecord>, Vec<RawPage>, Vec<Passage>), PipelineError> {
                let mut quality = Vec::new();
                let mut kept = Vec::new();
                for raw in pages.iter().filter(|p| !p.lines.is_empty()) {
                    let q = page_quality(raw, cfg.sample_rate, self.config.seed, &self.lexicons.stopwords)
                        .map_err(|e| fail(st)(e.to_string()))?;
                    let route = route_page(&q, &cfg.thresholds).map_err(|e| fail(st)(e.to_string()))?;
                    let norm = by_ref.get(&raw.page_ref()).copied();
                    match (route, norm) {
                        (Route::Accept, Some(p)) => kept.push(p.clone()),
                        (Route::StrictClean, Some(p)) => kept.push(Self::normalize_lines(&strict, p)),
                        _ => {}
                    }
                    quality.push(QualityRecord { quality: q, route });
                }
                let passages = base.segment_and_tag(&kept);
                Ok((quality, kept, passages))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut quality = Vec::new();
        let mut pages = Vec::new();
        let mut passages = Vec::new();
        for (q, k, p) in per_doc {
            quality.extend(q);
            pages.extend(k);
            passages.extend(p);
        }
        Ok(vec![
            Self::jsonl(st, "ocrqa/quality.jsonl", &quality)?,
            Self::jsonl(st, "ocrqa/pages.jsonl", &pages)?,
            Self::jsonl(st, "ocrqa/passages.jsonl", &passages)?,
        ])
    }

    fn stage_dedup(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Dedup;
        let entries = self.trainable(st)?;
        let pages: Vec<RawPage> = self.read_out_jsonl(st, "ocrqa/pages.jsonl")?;
        let passages: Vec<Passage> = self.read_out_jsonl(st, "ocrqa/passages.jsonl")?;
        let n = self.normalizer(self.base_opts());
        let texts: Vec<(PageRef, String)> = pages
            .par_iter()
            .map(|p| (p.page_ref(), n.page_text(p)))
            .collect::<Vec<_>>()
            .into_iter()
            .filter(|(_, t)| !t.is_empty())
            .collect();
        let clusters: Vec<DupCluster> =
            find_duplicates(&texts, &self.config.dedup_params()).map_err(|e| fail(st)(e.to_string()))?;
        let lineage = link_editions(&entries, &clusters, self.config.ledger.link_threshold)
            .map_err(|e| fail(st)(e.to_string()))?;
        let redundant = redundant_pages(&clusters);
        let present: BTreeSet<PageRef> = texts.iter().map(|(r, _)| r.clone()).collect();
        let kept: Vec<&Passage> = passages
            .iter()
            .filter(|p| {
                let span: Vec<PageRef> = (p.page_span.0..=p.page_span.1)
                    .map(|no| PageRef::new(p.entry_id.clone(), no))
                    .filter(|r| present.contains(r))
                    .collect();
                span.is_empty() || !span.iter().all(|r| redundant.contains(r))
            })
            .collect();
        let dup_clusters: Vec<&DupCluster> = clusters.iter().filter(|c| !c.is_singleton()).collect();
        Ok(vec![
            Self::jsonl(st, "dedup/clusters.jsonl", &dup_clusters)?,
            Self::jsonl(st, "dedup/lineage.jsonl", &lineage)?,
            Self::jsonl(st, "dedup/passages.jsonl", &kept)?,
        ])
    }

    fn stage_taxonomy(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Taxonomy;
        let passages: Vec<Passage> = self.read_out_jsonl(st, "dedup/passages.jsonl")?;
        let tax = &self.lexicons.taxonomy;
        let tagged: Vec<TaggedPassage> = passages
            .into_par_iter()
            .map(|p| TaggedPassage {
                domain: assign_domain(&p, tax),
                passage: p,
            })
            .collect();
        let (selected, skew) = enforce_quotas(&tagged, &self.config.taxonomy.quotas, self.config.seed);
        let dist = distribution_report(&tagged);
        Ok(vec![
            Self::jsonl(st, "taxonomy/passages.jsonl", &selected)?,
            Self::json("taxonomy/skew.json", &skew),
            Self::jsonl(st, "taxonomy/distribution.jsonl", &dist.rows())?,
            ("taxonomy/distribution.txt".into(), dist.to_table().into_bytes()),
        ])
    }

    fn generator(&self) -> Result<Box<dyn GeneratorClient>, PipelineError> {
        Ok(match self.config.generator_spec()? {
            GeneratorSpec::Stub => Box::new(StubGenerator),
            GeneratorSpec::Recorded(p) => {
                let text = fs::read_to_string(&p).map_err(|e| fail(Stage::Validate)(format!("{}: {e}", p.display())))?;
                let records: Vec<RecordedResponse> =
                    parse_jsonl(&text, &p).map_err(|e| fail(Stage::Validate)(e.to_string()))?;
                Box::new(RecordedGenerator::new(records))
            }
        })
    }

    fn stage_validate(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Validate;
        let passages: Vec<TaggedPassage> = self.read_out_jsonl(st, "taxonomy/passages.jsonl")?;
        let vcfg = &self.config.validate;
        let generator = self.generator()?;
        let mut requests: Vec<GenerationRequest> = Vec::new();
        let mut gen_errors: Vec<serde_json::Value> = Vec::new();
        for p in &passages {
            for &t in &vcfg.qa_types {
                match build_generation_request(p, t, &vcfg.policy_version) {
                    Ok(r) => requests.push(r),
                    Err(e) => gen_errors.push(serde_json::json!({
                        "request_id": format!("{}#{t}", p.passage.passage_id),
                        "error": e.to_string(),
                    })),
                }
            }
        }
        let results: Vec<Result<Vec<QaItem>, (String, String)>> = requests
            .par_iter()
            .map(|r| {
                generator
                    .generate(r)
                    .and_then(|raw| parse_candidates(&raw, r))
                    .map_err(|e| (r.request_id.clone(), e.to_string()))
            })
            .collect();
        let mut items = Vec::new();
        for r in results {
            match r {
                Ok(v) => items.extend(v),
                Err((id, e)) => gen_errors.push(serde_json::json!({"request_id": id, "error": e})),
            }
        }
        items.sort_by(|a: &QaItem, b| a.item_id.cmp(&b.item_id));
        let by_id: HashMap<String, Passage> = passages
            .iter()
            .map(|p| (p.passage.passage_id.clone(), p.passage.clone()))
            .collect();
        let validator = Validator {
            rules: &vcfg.rules,
            banned: &self.lexicons.banned,
            stopwords: &self.lexicons.stopwords,
            thresholds: vcfg.thresholds,
        };
        let decisions = run_validation(&items, &by_id, &validator, self.judge.as_ref(), &vcfg.adjudication)
            .map_err(|e| fail(st)(e.to_string()))?;
        Ok(vec![
            Self::jsonl(st, "validate/requests.jsonl", &requests)?,
            Self::jsonl(st, "validate/items.jsonl", &items)?,
            Self::jsonl(st, "validate/decisions.jsonl", &decisions)?,
            Self::jsonl(st, "validate/generation_errors.jsonl", &gen_errors)?,
        ])
    }

    fn decided_items(&self, stage: Stage) -> Result<Vec<(QaItem, DecisionRecord)>, PipelineError> {
        let items: Vec<QaItem> = self.read_out_jsonl(stage, "validate/items.jsonl")?;
        let decisions: Vec<DecisionRecord> = self.read_out_jsonl(stage, "validate/decisions.jsonl")?;
        let mut by_id: HashMap<String, DecisionRecord> = decisions.into_iter().map(|d| (d.item_id.clone(), d)).collect();
        items
            .into_iter()
            .map(|i| {
                let d = by_id
                    .remove(&i.item_id)
                    .ok_or_else(|| fail(stage)(format!("no decision for item `{}`", i.item_id)))?;
                Ok((i, d))
            })
            .collect()
    }

    fn stage_audit(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::AuditSample;
        let decided = self.decided_items(st)?;
        let passages: Vec<TaggedPassage> = self.read_out_jsonl(st, "taxonomy/passages.jsonl")?;
        let by_id: HashMap<&str, &Passage> = passages.iter().map(|p| (p.passage.passage_id.as_str(), &p.passage)).collect();
        let quality: Vec<QualityRecord> = self.read_out_jsonl(st, "ocrqa/quality.jsonl")?;
        let conf: HashMap<PageRef, f64> = quality
            .iter()
            .map(|q| (q.quality.page_ref.clone(), q.quality.mean_conf))
            .collect();
        let candidates = decided
            .into_iter()
            .map(|(item, d)| {
                let p = by_id
                    .get(item.source.as_str())
                    .ok_or_else(|| fail(st)(format!("unknown passage `{}`", item.source)))?;
                let ocr_confidence = (p.page_span.0..=p.page_span.1)
                    .filter_map(|no| conf.get(&PageRef::new(p.entry_id.clone(), no)).copied())
                    .fold(1.0f64, f64::min);
                Ok(AuditCandidate {
                    passage: p.text.clone(),
                    route: d.route,
                    ocr_confidence,
                    item,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut spec = StrataSpec::from_taxonomy(&self.lexicons.taxonomy);
        spec.ocr_high = self.config.audit.ocr_high;
        spec.ocr_low = self.config.audit.ocr_low;
        let sample = stratified_sample(&candidates, &spec, self.config.audit.per_stratum_n, self.config.seed)
            .map_err(|e| fail(st)(e.to_string()))?;
        let summary = serde_json::json!({
            "per_stratum_n": self.config.audit.per_stratum_n,
            "strata": sample.strata,
            "shortfalls": sample.shortfalls,
            "tasks": sample.tasks.len(),
        });
        Ok(vec![
            Self::jsonl(st, "audit/tasks.jsonl", &sample.tasks)?,
            Self::json("audit/sample.json", &summary),
        ])
    }

    fn stage_export(&self) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let st = Stage::Export;
        let decided = self.decided_items(st)?;
        let passages: Vec<TaggedPassage> = self.read_out_jsonl(st, "taxonomy/passages.jsonl")?;
        let texts: HashMap<String, String> = passages
            .into_iter()
            .map(|p| (p.passage.passage_id, p.passage.text))
            .collect();
        let pairs: Vec<_> = decided.into_iter().map(|(i, d)| (i, d.route)).collect();
        let split = SplitConfig {
            seed: self.config.seed,
            val_fraction: self.config.export.val_fraction,
        };
        let (records, rejections) = export_items(&pairs, &texts, self.config.export.system_prompt.as_deref(), &split);
        let stats = dataset_stats(&records);
        Ok(vec![
            ("export/dataset.jsonl".into(), to_export_jsonl(&records).into_bytes()),
            Self::json("export/stats.json", &stats),
            Self::jsonl(st, "export/rejections.jsonl", &rejections)?,
        ])
    }
}

/// Count of exported records per qa type, read back from an export file.
pub fn exported_type_counts(dataset: &Path) -> Result<BTreeMap<QaType, usize>, String> {
    let text = fs::read_to_string(dataset).map_err(|e| e.to_string())?;
    let (_, records) = crate::export::parse_export_jsonl(&text)?;
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.qa_type).or_default() += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn judge_spec_parsing() {
        assert_eq!("stub".parse::<JudgeSpec>().unwrap(), JudgeSpec::Stub);
        assert_eq!(
            "endpoint:http://localhost:9/judge".parse::<JudgeSpec>().unwrap(),
            JudgeSpec::Endpoint("http://localhost:9/judge".into())
        );
        assert!("endpoint:".parse::<JudgeSpec>().is_err());
        assert!("gpt".parse::<JudgeSpec>().is_err());
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let c = PipelineConfig::from_toml("input_dir = \"in\"\noutput_dir = \"out\"\n", Path::new("/base")).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.catalog_path(), PathBuf::from("/base/in/catalog.jsonl"));
        assert_eq!(c.validate.qa_types.len(), 4);
        assert!(PipelineConfig::from_toml("input_dir = \"in\"\noutput_dir = \"o\"\nbogus = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn missing_catalog_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = PipelineConfig::from_toml("input_dir = \"in\"\noutput_dir = \"out\"\n", dir.path()).unwrap();
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn files_digest_depends_on_names_and_bytes() {
        let a = files_digest(&[("a".into(), b"x".to_vec())]);
        assert_ne!(a, files_digest(&[("b".into(), b"x".to_vec())]));
        assert_ne!(a, files_digest(&[("a".into(), b"y".to_vec())]));
        assert_eq!(a, files_digest(&[("a".into(), b"x".to_vec())]));
    }
}
