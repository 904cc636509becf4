//! Practitioner audit: stratified sampling, task leasing and verdicts over an
//! append-only event log, and inter-annotator agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dedup::hash_bytes;
use crate::taxonomy::Taxonomy;
use crate::types::{DomainId, UNASSIGNED};
use crate::validate::{QaItem, RouteDecision, SupportSpan};

pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("no stratum for item `{item_id}`: {reason}")]
    UnknownStratumKey { item_id: String, reason: String },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid label `{0}`")]
    InvalidLabel(String),
    #[error("annotator `{annotator}` holds no active lease on task `{task_id}`")]
    LeaseExpired { task_id: String, annotator: String },
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty label sequence")]
    EmptyInput,
    #[error("item `{0}` sampled twice")]
    DuplicateItem(String),
    #[error("event log {path}: line {line}: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("audit state I/O: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Labels and kappa

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Grounded,
    OverGeneralization,
    ImplicitAssumption,
    UnsupportedReasoning,
    Unsafe,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Grounded,
        Label::OverGeneralization,
        Label::ImplicitAssumption,
        Label::UnsupportedReasoning,
        Label::Unsafe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Grounded => "Grounded",
            Label::OverGeneralization => "OverGeneralization",
            Label::ImplicitAssumption => "ImplicitAssumption",
            Label::UnsupportedReasoning => "UnsupportedReasoning",
            Label::Unsafe => "Unsafe",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| AuditError::InvalidLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    Defined(f64),
    /// Chance agreement is 1, so kappa has no value.
    Undefined,
}

impl Kappa {
    pub fn value(self) -> Option<f64> {
        match self {
            Kappa::Defined(k) => Some(k),
            Kappa::Undefined => None,
        }
    }
}

/// Cohen's kappa for two aligned label sequences.
pub fn cohen_kappa<L: Ord>(a: &[L], b: &[L]) -> Result<Kappa, AuditError> {
    if a.len() != b.len() {
        return Err(AuditError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AuditError::EmptyInput);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ma: BTreeMap<&L, usize> = BTreeMap::new();
    let mut mb: BTreeMap<&L, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let p_o = agree / n;
    let p_e: f64 = ma
        .iter()
        .map(|(l, &ca)| ca as f64 * mb.get(l).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(Kappa::Undefined);
    }
    Ok(Kappa::Defined(((p_o - p_e) / (1.0 - p_e)).clamp(-1.0, 1.0)))
}

// ---------------------------------------------------------------------------
// Strata

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteClass {
    Accept,
    Escalate,
    Reject,
}

impl From<&RouteDecision> for RouteClass {
    fn from(r: &RouteDecision) -> Self {
        match r {
            RouteDecision::Accept => RouteClass::Accept,
            RouteDecision::Escalate => RouteClass::Escalate,
            RouteDecision::Reject(_) => RouteClass::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcrBand {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskClass {
    Standard,
    HighStakes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub route: RouteClass,
    pub ocr: OcrBand,
    pub risk: RiskClass,
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let route = match self.route {
            RouteClass::Accept => "accept",
            RouteClass::Escalate => "escalate",
            RouteClass::Reject => "reject",
        };
        let ocr = match self.ocr {
            OcrBand::Low => "low",
            OcrBand::Mid => "mid",
            OcrBand::High => "high",
        };
        let risk = match self.risk {
            RiskClass::Standard => "standard",
            RiskClass::HighStakes => "high_stakes",
        };
        write!(f, "{route}/{ocr}/{risk}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataSpec {
    /// Mean OCR confidence at or above this is the high band.
    pub ocr_high: f64,
    /// Below this is the low band.
    pub ocr_low: f64,
    pub domain_risk: BTreeMap<DomainId, RiskClass>,
}

impl StrataSpec {
    pub fn from_taxonomy(t: &Taxonomy) -> Self {
        let mut domain_risk: BTreeMap<DomainId, RiskClass> = t
            .domains
            .iter()
            .map(|d| {
                let r = if d.high_stakes {
                    RiskClass::HighStakes
                } else {
                    RiskClass::Standard
                };
                (d.id.clone(), r)
            })
            .collect();
        domain_risk.insert(UNASSIGNED.into(), RiskClass::Standard);
        Self {
            ocr_high: 0.80,
            ocr_low: 0.55,
            domain_risk,
        }
    }

    pub fn key(&self, c: &AuditCandidate) -> Result<StratumKey, AuditError> {
        let risk = *self
            .domain_risk
            .get(&c.item.domain)
            .ok_or_else(|| AuditError::UnknownStratumKey {
                item_id: c.item.item_id.clone(),
                reason: format!("domain `{}` has no risk class", c.item.domain),
            })?;
        if !(0.0..=1.0).contains(&c.ocr_confidence) {
            return Err(AuditError::UnknownStratumKey {
                item_id: c.item.item_id.clone(),
                reason: format!("OCR confidence {} outside [0, 1]", c.ocr_confidence),
            });
        }
        let ocr = if c.ocr_confidence >= self.ocr_high {
            OcrBand::High
        } else if c.ocr_confidence < self.ocr_low {
            OcrBand::Low
        } else {
            OcrBand::Mid
        };
        Ok(StratumKey {
            route: RouteClass::from(&c.route),
            ocr,
            risk,
        })
    }
}

/// An item eligible for audit with what the stratifier needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCandidate {
    pub item: QaItem,
    pub route: RouteDecision,
    /// Lowest mean line confidence over the item's source pages.
    pub ocr_confidence: f64,
    pub passage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub question: String,
    pub answer: String,
    pub passage: String,
    pub spans: Vec<SupportSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTask {
    pub task_id: String,
    pub item_id: String,
    pub stratum: StratumKey,
    pub payload: TaskPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub tasks: Vec<AuditTask>,
    /// Stratum population sizes.
    pub strata: BTreeMap<String, usize>,
    /// Strata smaller than the requested sample size, with the gap.
    pub shortfalls: BTreeMap<String, usize>,
}

/// Up to `per_stratum_n` items per stratum, chosen with a generator seeded
/// from `seed` and the stratum key. Task ids number the tasks in stratum
/// then item order.
pub fn stratified_sample(
    items: &[AuditCandidate],
    spec: &StrataSpec,
    per_stratum_n: usize,
    seed: u64,
) -> Result<SampleResult, AuditError> {
    let mut strata: BTreeMap<StratumKey, Vec<&AuditCandidate>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for c in items {
        if !seen.insert(c.item.item_id.as_str()) {
            return Err(AuditError::DuplicateItem(c.item.item_id.clone()));
        }
        strata.entry(spec.key(c)?).or_default().push(c);
    }
    let mut result = SampleResult {
        tasks: Vec::new(),
        strata: BTreeMap::new(),
        shortfalls: BTreeMap::new(),
    };
    for (key, mut members) in strata {
        let name = key.to_string();
        members.sort_by(|a, b| a.item.item_id.cmp(&b.item.item_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_bytes(name.as_bytes()));
        members.shuffle(&mut rng);
        let take = per_stratum_n.min(members.len());
        let mut chosen: Vec<&AuditCandidate> = members[..take].to_vec();
        chosen.sort_by(|a, b| a.item.item_id.cmp(&b.item.item_id));
        result.strata.insert(name.clone(), members.len());
        if per_stratum_n > members.len() {
            result.shortfalls.insert(name, per_stratum_n - members.len());
        }
        for c in chosen {
            result.tasks.push(AuditTask {
                task_id: format!("task-{:05}", result.tasks.len() + 1),
                item_id: c.item.item_id.clone(),
                stratum: key,
                payload: TaskPayload {
                    question: c.item.user_text(),
                    answer: c.item.answer_final.clone(),
                    passage: c.passage.clone(),
                    spans: c.item.support_spans.clone(),
                },
            });
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Agreement

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorVerdict {
    pub task_id: String,
    pub annotator_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub annotator_a: String,
    pub annotator_b: String,
    pub shared_tasks: usize,
    pub kappa: Option<f64>,
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAgreement {
    pub verdicts: usize,
    pub label_counts: BTreeMap<Label, usize>,
    pub pairs: Vec<PairKappa>,
    /// Mean of the defined pairwise kappas.
    pub mean_pairwise_kappa: Option<f64>,
    /// No annotator pair shares a task.
    pub not_applicable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub strata: BTreeMap<String, StratumAgreement>,
    pub label_counts: BTreeMap<Label, usize>,
    pub total_verdicts: usize,
}

/// Pairwise kappas per stratum over the tasks both annotators labelled.
/// `stratum_of` maps task ids to stratum names; verdicts on unmapped tasks
/// land in an `unknown` stratum.
pub fn agreement_report(verdicts: &[AnnotatorVerdict], stratum_of: &HashMap<String, String>) -> AgreementReport {
    // stratum -> annotator -> task -> label
    let mut grid: BTreeMap<String, BTreeMap<&str, BTreeMap<&str, Label>>> = BTreeMap::new();
    let mut counts: BTreeMap<String, BTreeMap<Label, usize>> = BTreeMap::new();
    let mut label_counts: BTreeMap<Label, usize> = BTreeMap::new();
    for v in verdicts {
        let s = stratum_of.get(&v.task_id).cloned().unwrap_or_else(|| "unknown".into());
        grid.entry(s.clone())
            .or_default()
            .entry(&v.annotator_id)
            .or_default()
            .insert(&v.task_id, v.label);
        *counts.entry(s).or_default().entry(v.label).or_default() += 1;
        *label_counts.entry(v.label).or_default() += 1;
    }
    let mut strata = BTreeMap::new();
    for (s, by_annotator) in grid {
        let annotators: Vec<_> = by_annotator.iter().collect();
        let mut pairs = Vec::new();
        for i in 0..annotators.len() {
            for j in i + 1..annotators.len() {
                let (a, la) = annotators[i];
                let (b, lb) = annotators[j];
                let (xs, ys): (Vec<Label>, Vec<Label>) = la
                    .iter()
                    .filter_map(|(t, x)| lb.get(t).map(|y| (*x, *y)))
                    .unzip();
                if xs.is_empty() {
                    continue;
                }
                let k = cohen_kappa(&xs, &ys).expect("aligned non-empty sequences");
                pairs.push(PairKappa {
                    annotator_a: a.to_string(),
                    annotator_b: b.to_string(),
                    shared_tasks: xs.len(),
                    kappa: k.value(),
                    undefined: k == Kappa::Undefined,
                });
            }
        }
        let defined: Vec<f64> = pairs.iter().filter_map(|p| p.kappa).collect();
        let label_counts = counts.remove(&s).unwrap_or_default();
        strata.insert(
            s,
            StratumAgreement {
                verdicts: label_counts.values().sum(),
                label_counts,
                not_applicable: pairs.is_empty(),
                mean_pairwise_kappa: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                pairs,
            },
        );
    }
    AgreementReport {
        strata,
        label_counts,
        total_verdicts: verdicts.len(),
    }
}

// ---------------------------------------------------------------------------
// Task store

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Settable clock for tests.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }
    pub fn advance(&self, by: Duration) {
        *self.0.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub required_verdicts: usize,
    pub lease_minutes: i64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            required_verdicts: 2,
            lease_minutes: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    TaskCreated {
        task: AuditTask,
    },
    Leased {
        task_id: String,
        annotator: String,
        at: DateTime<Utc>,
        expires: DateTime<Utc>,
    },
    Verdict {
        verdict: AnnotatorVerdict,
        replaced: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator: String,
    pub expires: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Leased,
    Done,
}

#[derive(Debug, Clone)]
struct TaskEntry {
    task: AuditTask,
    lease: Option<Lease>,
    verdicts: BTreeMap<String, AnnotatorVerdict>,
    done: bool,
}

impl TaskEntry {
    fn active_lease(&self, now: DateTime<Utc>) -> Option<&Lease> {
        self.lease.as_ref().filter(|l| l.expires > now)
    }

    fn state(&self, now: DateTime<Utc>) -> TaskState {
        if self.done {
            TaskState::Done
        } else if self.active_lease(now).is_some() {
            TaskState::Leased
        } else {
            TaskState::Open
        }
    }
}

#[derive(Debug, Default)]
struct State {
    tasks: BTreeMap<String, TaskEntry>,
    replacements: usize,
}

impl State {
    fn apply(&mut self, e: &Event, required: usize) {
        match e {
            Event::TaskCreated { task } => {
                self.tasks.entry(task.task_id.clone()).or_insert_with(|| TaskEntry {
                    task: task.clone(),
                    lease: None,
                    verdicts: BTreeMap::new(),
                    done: false,
                });
            }
            Event::Leased {
                task_id,
                annotator,
                expires,
                ..
            } => {
                if let Some(t) = self.tasks.get_mut(task_id) {
                    t.lease = Some(Lease {
                        annotator: annotator.clone(),
                        expires: *expires,
                    });
                }
            }
            Event::Verdict { verdict, replaced } => {
                if let Some(t) = self.tasks.get_mut(&verdict.task_id) {
                    if t.lease.as_ref().is_some_and(|l| l.annotator == verdict.annotator_id) {
                        t.lease = None;
                    }
                    t.verdicts.insert(verdict.annotator_id.clone(), verdict.clone());
                    if t.verdicts.len() >= required {
                        t.done = true;
                    }
                    if *replaced {
                        self.replacements += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeasedTask {
    pub task: AuditTask,
    pub lease: Lease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub task_id: String,
    pub annotator_id: String,
    pub replaced: bool,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumStatus {
    pub open: usize,
    pub leased: usize,
    pub done: usize,
}

/// Audit state kept in memory and persisted as an append-only event log.
/// Every mutation is written to the log before it is applied.
pub struct AuditStore {
    state: RwLock<State>,
    log: Mutex<File>,
    path: PathBuf,
    clock: Arc<dyn Clock>,
    config: AuditConfig,
}

impl AuditStore {
    /// Open the store in `dir`, replaying any existing log. A torn final line
    /// from an interrupted write is ignored.
    pub fn open(dir: &Path, config: AuditConfig, clock: Arc<dyn Clock>) -> Result<Self, AuditError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(EVENTS_FILE);
        let mut state = State::default();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let complete = text.ends_with('\n');
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Event>(line) {
                    Ok(e) => state.apply(&e, config.required_verdicts),
                    Err(_) if i + 1 == lines.len() && !complete => {}
                    Err(e) => {
                        return Err(AuditError::CorruptLog {
                            path,
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            if !complete && !text.is_empty() {
                // drop the torn tail so new events start on a fresh line
                let keep = text.rfind('\n').map_or(0, |p| p + 1);
                fs::write(&path, &text[..keep])?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            state: RwLock::new(state),
            log: Mutex::new(log),
            path,
            clock,
            config,
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> AuditConfig {
        self.config
    }

    fn append(&self, e: &Event) -> Result<(), AuditError> {
        let mut line = serde_json::to_string(e).expect("events serialize");
        line.push('\n');
        let mut f = self.log.lock();
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Add tasks not already present. Returns how many were new.
    pub fn add_tasks(&self, tasks: &[AuditTask]) -> Result<usize, AuditError> {
        let mut st = self.state.write();
        let mut added = 0;
        for t in tasks {
            if st.tasks.contains_key(&t.task_id) {
                continue;
            }
            let e = Event::TaskCreated { task: t.clone() };
            self.append(&e)?;
            st.apply(&e, self.config.required_verdicts);
            added += 1;
        }
        Ok(added)
    }

    /// Lease the first open task this annotator has not judged yet. An
    /// annotator asking again while holding a lease gets the same task back.
    pub fn lease_next(&self, annotator: &str) -> Result<Option<LeasedTask>, AuditError> {
        let now = self.clock.now();
        let mut st = self.state.write();
        if let Some(t) = st.tasks.values().find(|t| {
            !t.done && t.active_lease(now).is_some_and(|l| l.annotator == annotator)
        }) {
            return Ok(Some(LeasedTask {
                task: t.task.clone(),
                lease: t.lease.clone().expect("active lease"),
            }));
        }
        let Some(task_id) = st
            .tasks
            .values()
            .find(|t| !t.done && t.active_lease(now).is_none() && !t.verdicts.contains_key(annotator))
            .map(|t| t.task.task_id.clone())
        else {
            return Ok(None);
        };
        let expires = now + Duration::minutes(self.config.lease_minutes);
        let e = Event::Leased {
            task_id: task_id.clone(),
            annotator: annotator.to_string(),
            at: now,
            expires,
        };
        self.append(&e)?;
        st.apply(&e, self.config.required_verdicts);
        let t = &st.tasks[&task_id];
        Ok(Some(LeasedTask {
            task: t.task.clone(),
            lease: t.lease.clone().expect("just leased"),
        }))
    }

    /// Record a verdict. The annotator must hold the task's lease, unless
    /// they are replacing their own earlier verdict.
    pub fn submit_verdict(
        &self,
        task_id: &str,
        annotator: &str,
        label: Label,
        note: Option<String>,
    ) -> Result<VerdictAck, AuditError> {
        let now = self.clock.now();
        let mut st = self.state.write();
        let t = st
            .tasks
            .get(task_id)
            .ok_or_else(|| AuditError::UnknownTask(task_id.to_string()))?;
        let replaced = t.verdicts.contains_key(annotator);
        let holds = t.active_lease(now).is_some_and(|l| l.annotator == annotator);
        if !replaced && !holds {
            return Err(AuditError::LeaseExpired {
                task_id: task_id.to_string(),
                annotator: annotator.to_string(),
            });
        }
        let e = Event::Verdict {
            verdict: AnnotatorVerdict {
                task_id: task_id.to_string(),
                annotator_id: annotator.to_string(),
                label,
                note,
                timestamp: now,
            },
            replaced,
        };
        self.append(&e)?;
        st.apply(&e, self.config.required_verdicts);
        Ok(VerdictAck {
            task_id: task_id.to_string(),
            annotator_id: annotator.to_string(),
            replaced,
            state: st.tasks[task_id].state(now),
        })
    }

    pub fn task_state(&self, task_id: &str) -> Option<TaskState> {
        let now = self.clock.now();
        self.state.read().tasks.get(task_id).map(|t| t.state(now))
    }

    pub fn verdicts(&self) -> Vec<AnnotatorVerdict> {
        let st = self.state.read();
        st.tasks.values().flat_map(|t| t.verdicts.values().cloned()).collect()
    }

    pub fn replacements(&self) -> usize {
        self.state.read().replacements
    }

    pub fn task_count(&self) -> usize {
        self.state.read().tasks.len()
    }

    pub fn agreement(&self) -> AgreementReport {
        let st = self.state.read();
        let stratum_of: HashMap<String, String> = st
            .tasks
            .values()
            .map(|t| (t.task.task_id.clone(), t.task.stratum.to_string()))
            .collect();
        let verdicts: Vec<AnnotatorVerdict> = st.tasks.values().flat_map(|t| t.verdicts.values().cloned()).collect();
        drop(st);
        agreement_report(&verdicts, &stratum_of)
    }

    pub fn strata(&self) -> BTreeMap<String, StratumStatus> {
        let now = self.clock.now();
        let st = self.state.read();
        let mut out: BTreeMap<String, StratumStatus> = BTreeMap::new();
        for t in st.tasks.values() {
            let s = out.entry(t.task.stratum.to_string()).or_insert(StratumStatus {
                open: 0,
                leased: 0,
                done: 0,
            });
            match t.state(now) {
                TaskState::Open => s.open += 1,
                TaskState::Leased => s.leased += 1,
                TaskState::Done => s.done += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LangTag, QaType};
    use crate::validate::{RejectReason, Role, Turn};
    use Label::*;

    #[test]
    fn kappa_fixtures() {
        assert_eq!(cohen_kappa(&[Grounded, Unsafe], &[Grounded, Unsafe]).unwrap(), Kappa::Defined(1.0));
        let a = ["A", "A", "B", "B"];
        let b = ["A", "B", "A", "B"];
        assert_eq!(cohen_kappa(&a, &b).unwrap(), Kappa::Defined(0.0));
        let a = ["A", "A", "A", "B"];
        let b = ["A", "A", "B", "B"];
        assert_eq!(cohen_kappa(&a, &b).unwrap(), Kappa::Defined(0.5));
        assert_eq!(cohen_kappa(&["A", "A"], &["A", "A"]).unwrap(), Kappa::Undefined);
        assert!(matches!(cohen_kappa(&["A"], &["A", "B"]), Err(AuditError::LengthMismatch(1, 2))));
        assert!(matches!(cohen_kappa::<&str>(&[], &[]), Err(AuditError::EmptyInput)));
    }

    fn cand(id: &str, domain: &str, route: RouteDecision, conf: f64) -> AuditCandidate {
        AuditCandidate {
            item: QaItem {
                item_id: id.into(),
                qa_type: QaType::QaPair,
                language: LangTag::EnLatn,
                domain: domain.into(),
                turns: vec![
                    Turn {
                        role: Role::User,
                        text: "q".into(),
                    },
                    Turn {
                        role: Role::Assistant,
                        text: "a".into(),
                    },
                ],
                support_spans: vec![],
                source: "p".into(),
                answer_final: "a".into(),
                options: None,
                gold_option: None,
            },
            route,
            ocr_confidence: conf,
            passage: "passage".into(),
        }
    }

    fn spec() -> StrataSpec {
        StrataSpec {
            ocr_high: 0.8,
            ocr_low: 0.55,
            domain_risk: [
                ("A".to_string(), RiskClass::Standard),
                ("S".to_string(), RiskClass::HighStakes),
            ]
            .into(),
        }
    }

    #[test]
    fn sample_sizes_and_shortfall() {
        let mut items = Vec::new();
        for i in 0..10 {
            items.push(cand(&format!("a{i:02}"), "A", RouteDecision::Accept, 0.9));
            items.push(cand(&format!("s{i:02}"), "S", RouteDecision::Escalate, 0.6));
        }
        for i in 0..3 {
            items.push(cand(&format!("r{i}"), "A", RouteDecision::Reject(RejectReason::Unsupported), 0.3));
        }
        let r = stratified_sample(&items, &spec(), 5, 1).unwrap();
        assert_eq!(r.tasks.len(), 13);
        assert_eq!(r.shortfalls, BTreeMap::from([("reject/low/standard".to_string(), 2)]));
        assert_eq!(r.strata["escalate/mid/high_stakes"], 10);
        let again = stratified_sample(&items, &spec(), 5, 1).unwrap();
        assert_eq!(r, again);
        let items_distinct: BTreeSet<_> = r.tasks.iter().map(|t| &t.item_id).collect();
        assert_eq!(items_distinct.len(), r.tasks.len());
    }

    #[test]
    fn unknown_domain_has_no_stratum() {
        let items = vec![cand("x", "Mystery", RouteDecision::Accept, 0.9)];
        assert!(matches!(
            stratified_sample(&items, &spec(), 5, 1),
            Err(AuditError::UnknownStratumKey { .. })
        ));
    }

    fn task(id: &str) -> AuditTask {
        AuditTask {
            task_id: id.into(),
            item_id: format!("item-{id}"),
            stratum: StratumKey {
                route: RouteClass::Escalate,
                ocr: OcrBand::Mid,
                risk: RiskClass::Standard,
            },
            payload: TaskPayload {
                question: "q".into(),
                answer: "a".into(),
                passage: "p".into(),
                spans: vec![],
            },
        }
    }

    fn store(dir: &Path, clock: Arc<ManualClock>) -> AuditStore {
        AuditStore::open(dir, AuditConfig::default(), clock).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap().with_timezone(&Utc)
    }

    #[test]
    fn lease_verdict_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(t0()));
        let s = store(dir.path(), clock.clone());
        s.add_tasks(&[task("t1"), task("t2")]).unwrap();

        let a = s.lease_next("ann1").unwrap().unwrap();
        assert_eq!(a.task.task_id, "t1");
        // same annotator asking again keeps the lease
        assert_eq!(s.lease_next("ann1").unwrap().unwrap().task.task_id, "t1");
        // another annotator cannot take a leased task
        assert_eq!(s.lease_next("ann2").unwrap().unwrap().task.task_id, "t2");

        let ack = s.submit_verdict("t1", "ann1", Grounded, None).unwrap();
        assert!(!ack.replaced);
        assert_eq!(ack.state, TaskState::Open);
        let ack = s.submit_verdict("t1", "ann1", Unsafe, Some("dose".into())).unwrap();
        assert!(ack.replaced);
        assert_eq!(s.replacements(), 1);

        assert!(matches!(
            s.submit_verdict("nope", "ann1", Grounded, None),
            Err(AuditError::UnknownTask(_))
        ));
        // ann3 never leased t1
        assert!(matches!(
            s.submit_verdict("t1", "ann3", Grounded, None),
            Err(AuditError::LeaseExpired { .. })
        ));

        s.submit_verdict("t2", "ann2", Grounded, None).unwrap();
        let b = s.lease_next("ann2").unwrap().unwrap();
        assert_eq!(b.task.task_id, "t1");
        let ack = s.submit_verdict("t1", "ann2", Unsafe, None).unwrap();
        assert_eq!(ack.state, TaskState::Done);
        assert_eq!(s.task_state("t1"), Some(TaskState::Done));
    }

    #[test]
    fn expired_lease_returns_task() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(t0()));
        let s = store(dir.path(), clock.clone());
        s.add_tasks(&[task("t1")]).unwrap();
        s.lease_next("ann1").unwrap().unwrap();
        assert!(s.lease_next("ann2").unwrap().is_none());
        clock.advance(Duration::minutes(31));
        assert_eq!(s.task_state("t1"), Some(TaskState::Open));
        assert!(matches!(
            s.submit_verdict("t1", "ann1", Grounded, None),
            Err(AuditError::LeaseExpired { .. })
        ));
        assert_eq!(s.lease_next("ann2").unwrap().unwrap().task.task_id, "t1");
    }

    #[test]
    fn replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(t0()));
        {
            let s = store(dir.path(), clock.clone());
            s.add_tasks(&[task("t1"), task("t2")]).unwrap();
            s.lease_next("a").unwrap();
            s.submit_verdict("t1", "a", Grounded, None).unwrap();
            s.lease_next("b").unwrap();
            s.submit_verdict("t1", "b", Grounded, None).unwrap();
        }
        // simulate a torn write
        let mut f = OpenOptions::new().append(true).open(dir.path().join(EVENTS_FILE)).unwrap();
        f.write_all(b"{\"event\":\"verd").unwrap();
        drop(f);
        let s = store(dir.path(), clock.clone());
        assert_eq!(s.task_count(), 2);
        assert_eq!(s.task_state("t1"), Some(TaskState::Done));
        assert_eq!(s.verdicts().len(), 2);
        assert_eq!(s.add_tasks(&[task("t1")]).unwrap(), 0);
        // the store keeps working after the repair
        assert_eq!(s.lease_next("a").unwrap().unwrap().task.task_id, "t2");
        drop(s);
        assert_eq!(store(dir.path(), clock).task_state("t2"), Some(TaskState::Leased));
    }

    fn v(task: &str, ann: &str, label: Label) -> AnnotatorVerdict {
        AnnotatorVerdict {
            task_id: task.into(),
            annotator_id: ann.into(),
            label,
            note: None,
            timestamp: t0(),
        }
    }

    #[test]
    fn agreement_full_overlap_and_na() {
        // x: G G G O, y: G G O O -> kappa 0.5
        let vs = vec![
            v("1", "x", Grounded),
            v("2", "x", Grounded),
            v("3", "x", Grounded),
            v("4", "x", OverGeneralization),
            v("1", "y", Grounded),
            v("2", "y", Grounded),
            v("3", "y", OverGeneralization),
            v("4", "y", OverGeneralization),
            v("5", "x", Unsafe),
        ];
        let strata: HashMap<String, String> = [
            ("1", "s1"),
            ("2", "s1"),
            ("3", "s1"),
            ("4", "s1"),
            ("5", "s2"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let r = agreement_report(&vs, &strata);
        let s1 = &r.strata["s1"];
        assert_eq!(s1.pairs.len(), 1);
        assert_eq!(s1.pairs[0].kappa, Some(0.5));
        assert_eq!(s1.mean_pairwise_kappa, Some(0.5));
        assert!(r.strata["s2"].not_applicable);
        assert_eq!(r.label_counts.values().sum::<usize>(), vs.len());
        assert_eq!(r, agreement_report(&vs, &strata));
    }

    #[test]
    fn label_parsing() {
        assert_eq!("Unsafe".parse::<Label>().unwrap(), Unsafe);
        assert!(matches!("Bogus".parse::<Label>(), Err(AuditError::InvalidLabel(_))));
    }
}
