//! Staged validation of generated QA items: generation requests, strict
//! candidate parsing, rule filters, evidence anchoring, routing and judge
//! adjudication of the uncertain middle band.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dedup::hash_bytes;
use crate::normalize::{Passage, Stopwords};
use crate::script::{nfc, tokenize};
use crate::taxonomy::TaggedPassage;
use crate::types::{DomainId, LangTag, QaType};

pub const OBJECTIVE_OPTIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidateError {
    #[error("passage `{0}` is empty")]
    EmptyPassage(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("span {start}..{end} outside passage of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("item `{item_id}`: span {start}..{end} does not match the passage")]
    SpanNotFound { item_id: String, start: usize, end: usize },
    #[error("accept_cov {accept_cov} must exceed escalate_cov {escalate_cov}")]
    InvalidThresholds { accept_cov: f64, escalate_cov: f64 },
    #[error("unknown source passage `{0}`")]
    UnknownPassage(String),
    #[error("generator: {0}")]
    Generator(String),
}

// ---------------------------------------------------------------------------
// Items

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Character offsets into the source passage plus the quoted text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub item_id: String,
    pub qa_type: QaType,
    pub language: LangTag,
    pub domain: DomainId,
    pub turns: Vec<Turn>,
    pub support_spans: Vec<SupportSpan>,
    pub source: String,
    pub answer_final: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_option: Option<usize>,
}

impl QaItem {
    pub fn check_shape(&self) -> Result<(), ValidateError> {
        let users = self.turns.iter().filter(|t| t.role == Role::User).count();
        let assistants = self.turns.len() - users;
        let err = |m: String| Err(ValidateError::SchemaError(format!("{}: {m}", self.item_id)));
        if users == 0 || assistants == 0 {
            return err("needs a user and an assistant turn".into());
        }
        if self.turns.first().map(|t| t.role) != Some(Role::User) {
            return err("first turn must be the user".into());
        }
        if self.turns.windows(2).any(|w| w[0].role == w[1].role) {
            return err("turns must alternate".into());
        }
        if self.qa_type == QaType::MultiTurn && users < 2 {
            return err("multi-turn item needs two user turns".into());
        }
        if self.support_spans.is_empty() {
            return err("no support spans".into());
        }
        match (&self.options, self.gold_option, self.qa_type) {
            (Some(opts), Some(g), QaType::Objective) => {
                if opts.len() < 2 {
                    return err("objective item needs at least two options".into());
                }
                if g >= opts.len() {
                    return err(format!("gold option {g} out of range"));
                }
                let distinct: HashSet<&String> = opts.iter().collect();
                if distinct.len() != opts.len() {
                    return err("duplicate options".into());
                }
            }
            (_, _, QaType::Objective) => return err("objective item needs options and gold_option".into()),
            (None, None, _) => {}
            _ => return err("options are only allowed on objective items".into()),
        }
        Ok(())
    }

    pub fn user_text(&self) -> String {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Assistant)
    }
}

// ---------------------------------------------------------------------------
// Generation contract

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub passage_id: String,
    pub qa_type: QaType,
    pub language: LangTag,
    pub domain: DomainId,
    pub policy_version: String,
    pub passage: String,
    pub schema: serde_json::Value,
    pub constraints: Vec<String>,
}

const CONSTRAINTS: [&str; 4] = [
    "Every question and answer must be derivable from the passage alone.",
    "Do not add facts, names or numbers that are not in the passage.",
    "Do not give prescriptive treatment advice, dosages or schedules.",
    "Cite each supporting span by character offsets into the passage and quote its text.",
];

fn output_schema(qa_type: QaType) -> serde_json::Value {
    let span = json!({
        "type": "object",
        "required": ["start", "end", "text"],
        "properties": {
            "start": {"type": "integer", "minimum": 0},
            "end": {"type": "integer", "minimum": 0},
            "text": {"type": "string"}
        },
        "additionalProperties": false
    });
    let turn = json!({
        "type": "object",
        "required": ["role", "text"],
        "properties": {"role": {"enum": ["user", "assistant"]}, "text": {"type": "string"}},
        "additionalProperties": false
    });
    let min_user_turns = if qa_type == QaType::MultiTurn { 2 } else { 1 };
    let mut item = json!({
        "type": "object",
        "required": ["turns", "answer_final", "support_spans"],
        "properties": {
            "turns": {"type": "array", "items": turn, "minItems": 2 * min_user_turns},
            "answer_final": {"type": "string"},
            "support_spans": {"type": "array", "items": span, "minItems": 1}
        },
        "additionalProperties": false
    });
    if qa_type == QaType::Objective {
        item["required"] = json!(["turns", "answer_final", "support_spans", "options", "gold_option"]);
        item["properties"]["options"] = json!({
            "type": "array", "items": {"type": "string"},
            "minItems": OBJECTIVE_OPTIONS, "maxItems": OBJECTIVE_OPTIONS
        });
        item["properties"]["gold_option"] =
            json!({"type": "integer", "minimum": 0, "maximum": OBJECTIVE_OPTIONS - 1});
    }
    json!({
        "type": "object",
        "required": ["items"],
        "properties": {"items": {"type": "array", "items": item, "minItems": 1}},
        "additionalProperties": false
    })
}

pub fn build_generation_request(
    p: &TaggedPassage,
    qa_type: QaType,
    policy_version: &str,
) -> Result<GenerationRequest, ValidateError> {
    let passage = &p.passage;
    if passage.text.trim().is_empty() {
        return Err(ValidateError::EmptyPassage(passage.passage_id.clone()));
    }
    let mut constraints: Vec<String> = CONSTRAINTS.iter().map(|s| s.to_string()).collect();
    match qa_type {
        QaType::Objective => constraints.push(format!(
            "Give exactly {OBJECTIVE_OPTIONS} distinct options with one correct option."
        )),
        QaType::MultiTurn => constraints.push("Use at least two user turns.".into()),
        QaType::Contextual => {
            constraints.push("The question must be answerable from a specific span of the context.".into())
        }
        QaType::QaPair => {}
    }
    Ok(GenerationRequest {
        request_id: format!("{}#{}", passage.passage_id, qa_type),
        passage_id: passage.passage_id.clone(),
        qa_type,
        language: passage.lang,
        domain: p.domain.clone(),
        policy_version: policy_version.to_string(),
        passage: passage.text.clone(),
        schema: output_schema(qa_type),
        constraints,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateSet {
    items: Vec<Candidate>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Candidate {
    turns: Vec<Turn>,
    answer_final: String,
    support_spans: Vec<SupportSpan>,
    #[serde(default)]
    options: Option<Vec<String>>,
    #[serde(default)]
    gold_option: Option<usize>,
}

/// Strictly parse a generator response for `req`. Items get ids
/// `{request_id}/{index}`.
pub fn parse_candidates(raw: &str, req: &GenerationRequest) -> Result<Vec<QaItem>, ValidateError> {
    let set: CandidateSet =
        serde_json::from_str(raw).map_err(|e| ValidateError::SchemaError(e.to_string()))?;
    if set.items.is_empty() {
        return Err(ValidateError::SchemaError("no items".into()));
    }
    let len = req.passage.chars().count();
    let mut out = Vec::with_capacity(set.items.len());
    for (i, c) in set.items.into_iter().enumerate() {
        for s in &c.support_spans {
            if s.start >= s.end || s.end > len {
                return Err(ValidateError::SpanOutOfBounds {
                    start: s.start,
                    end: s.end,
                    len,
                });
            }
        }
        if req.qa_type == QaType::Objective {
            if c.options.as_ref().map(Vec::len) != Some(OBJECTIVE_OPTIONS) {
                return Err(ValidateError::SchemaError(format!(
                    "objective item needs {OBJECTIVE_OPTIONS} options"
                )));
            }
        }
        let item = QaItem {
            item_id: format!("{}/{i}", req.request_id),
            qa_type: req.qa_type,
            language: req.language,
            domain: req.domain.clone(),
            turns: c.turns,
            support_spans: c.support_spans,
            source: req.passage_id.clone(),
            answer_final: c.answer_final,
            options: c.options,
            gold_option: c.gold_option,
        };
        item.check_shape()?;
        out.push(item);
    }
    Ok(out)
}

pub trait GeneratorClient: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ValidateError>;
}

/// Deterministic extractive generator: answers are copied sentences of the
/// passage, so everything it emits is grounded by construction.
#[derive(Debug, Clone, Default)]
pub struct StubGenerator;

fn sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let boundary = matches!(c, '।' | '॥' | '?' | '!')
            || (c == '.' && chars.get(i + 1).is_none_or(|n| n.is_whitespace()));
        if boundary || i + 1 == chars.len() {
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '।' | '॥') {
                end += 1;
            }
            let mut s = start;
            while s < end && chars[s].is_whitespace() {
                s += 1;
            }
            let mut e = end;
            while e > s && chars[e - 1].is_whitespace() {
                e -= 1;
            }
            if e > s {
                out.push((s, e));
            }
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

fn slice_chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

fn prompts(lang: LangTag) -> [&'static str; 4] {
    if lang.is_devanagari() {
        [
            "इस अंश में क्या कहा गया है?",
            "अंश के अनुसार कौन सा कथन सही है?",
            "इसके बाद क्या बताया गया है?",
            "दिए गए संदर्भ के अनुसार मुख्य कथन क्या है?",
        ]
    } else {
        [
            "What does the passage state?",
            "Which statement is made in the passage?",
            "What does it say next?",
            "According to the context, what is the main statement?",
        ]
    }
}

const DISTRACTORS_EN: [&str; 3] = [
    "The passage does not address this topic.",
    "The passage states the opposite of this.",
    "None of the listed statements.",
];
const DISTRACTORS_HI: [&str; 3] = [
    "अंश में इस विषय की चर्चा नहीं है।",
    "अंश में इसका विपरीत कहा गया है।",
    "इनमें से कोई कथन नहीं।",
];

impl GeneratorClient for StubGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ValidateError> {
        let text = &req.passage;
        let sents = sentences(text);
        let Some(&first) = sents.iter().find(|(s, e)| e - s >= 20).or(sents.first()) else {
            return Err(ValidateError::EmptyPassage(req.passage_id.clone()));
        };
        let second = sents.iter().copied().find(|s| *s != first).unwrap_or(first);
        let span = |(s, e): (usize, usize)| json!({"start": s, "end": e, "text": slice_chars(text, s, e)});
        let quote = |r: (usize, usize)| slice_chars(text, r.0, r.1);
        let q = prompts(req.language);
        let item = match req.qa_type {
            QaType::QaPair | QaType::Contextual => {
                let prompt = if req.qa_type == QaType::QaPair { q[0] } else { q[3] };
                json!({
                    "turns": [{"role": "user", "text": prompt}, {"role": "assistant", "text": quote(first)}],
                    "answer_final": quote(first),
                    "support_spans": [span(first)]
                })
            }
            QaType::MultiTurn => json!({
                "turns": [
                    {"role": "user", "text": q[0]},
                    {"role": "assistant", "text": quote(first)},
                    {"role": "user", "text": q[2]},
                    {"role": "assistant", "text": quote(second)}
                ],
                "answer_final": quote(second),
                "support_spans": [span(first), span(second)]
            }),
            QaType::Objective => {
                let distractors = if req.language.is_devanagari() {
                    DISTRACTORS_HI
                } else {
                    DISTRACTORS_EN
                };
                let gold = (hash_bytes(req.request_id.as_bytes()) % OBJECTIVE_OPTIONS as u64) as usize;
                let mut options: Vec<String> = distractors.iter().map(|s| s.to_string()).collect();
                options.insert(gold, quote(first));
                json!({
                    "turns": [
                        {"role": "user", "text": format!("{} {}", q[1], options.join(" | "))},
                        {"role": "assistant", "text": quote(first)}
                    ],
                    "answer_final": quote(first),
                    "support_spans": [span(first)],
                    "options": options,
                    "gold_option": gold
                })
            }
        };
        Ok(json!({ "items": [item] }).to_string())
    }
}

/// Replays recorded generator responses keyed by request id.
#[derive(Debug, Clone, Default)]
pub struct RecordedGenerator {
    pub responses: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedResponse {
    pub request_id: String,
    pub response: String,
}

impl RecordedGenerator {
    pub fn new(records: Vec<RecordedResponse>) -> Self {
        Self {
            responses: records.into_iter().map(|r| (r.request_id, r.response)).collect(),
        }
    }
}

impl GeneratorClient for RecordedGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ValidateError> {
        self.responses
            .get(&req.request_id)
            .cloned()
            .ok_or_else(|| ValidateError::Generator(format!("no recorded response for {}", req.request_id)))
    }
}

// ---------------------------------------------------------------------------
// Rules

#[derive(Debug, Clone)]
pub struct BannedLexicon {
    pub phrases: Vec<String>,
    pub patterns: Vec<Regex>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BannedFile {
    #[serde(default)]
    phrases: Vec<String>,
    #[serde(default)]
    patterns: Vec<String>,
}

impl BannedLexicon {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: BannedFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.phrases, &file.patterns)
    }

    pub fn new(phrases: Vec<String>, patterns: &[String]) -> Result<Self, String> {
        let patterns = patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| format!("pattern `{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            phrases: phrases.iter().map(|p| nfc(p).to_lowercase()).collect(),
            patterns,
        })
    }

    /// First banned phrase or pattern found in `text`.
    pub fn find(&self, text: &str) -> Option<String> {
        let lowered = nfc(text).to_lowercase();
        if let Some(p) = self.phrases.iter().find(|p| lowered.contains(p.as_str())) {
            return Some(p.clone());
        }
        self.patterns
            .iter()
            .find_map(|re| re.find(&lowered).map(|m| m.as_str().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Per-type minimum answer length overriding `min_len`.
    pub min_len_by_type: BTreeMap<QaType, usize>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            min_len: 20,
            max_len: 2000,
            // objective answers are a single option
            min_len_by_type: BTreeMap::from([(QaType::Objective, 1)]),
        }
    }
}

impl RuleConfig {
    pub fn min_len_for(&self, t: QaType) -> usize {
        self.min_len_by_type.get(&t).copied().unwrap_or(self.min_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleKind {
    Length,
    BannedPhrase,
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: RuleKind,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl RuleResult {
    fn pass(rule: RuleKind) -> Self {
        Self {
            rule,
            passed: true,
            reason: None,
        }
    }
    fn fail(rule: RuleKind, reason: String) -> Self {
        Self {
            rule,
            passed: false,
            reason: Some(reason),
        }
    }
}

/// Bracket and quote balance plus verse-number pairing (`॥ 12 ॥`).
pub fn check_symbols(text: &str) -> Result<(), String> {
    let mut stack = Vec::new();
    let mut straight_quotes = 0usize;
    for c in text.chars() {
        match c {
            '(' | '[' | '{' | '“' => stack.push(c),
            ')' | ']' | '}' | '”' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    '}' => '{',
                    _ => '“',
                };
                if stack.pop() != Some(want) {
                    return Err(format!("unbalanced `{c}`"));
                }
            }
            '"' => straight_quotes += 1,
            _ => {}
        }
    }
    if let Some(open) = stack.pop() {
        return Err(format!("unclosed `{open}`"));
    }
    if straight_quotes % 2 == 1 {
        return Err("odd number of `\"`".into());
    }
    let chars: Vec<char> = text.chars().collect();
    let is_digit = |c: char| c.is_ascii_digit() || ('०'..='९').contains(&c);
    let mut i = 0;
    while i < chars.len() {
        if !is_digit(chars[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && is_digit(chars[i]) {
            i += 1;
        }
        let before = chars[..start].iter().rev().find(|c| **c != ' ').copied();
        let after = chars[i..].iter().find(|c| **c != ' ').copied();
        let open = before == Some('॥');
        let close = after == Some('॥');
        if open != close {
            let n: String = chars[start..i].iter().collect();
            return Err(format!("verse number {n} not enclosed by `॥`"));
        }
    }
    Ok(())
}

pub fn validate_item(item: &QaItem, rules: &RuleConfig, banned: &BannedLexicon) -> Vec<RuleResult> {
    let len = item.answer_final.trim().chars().count();
    let min = rules.min_len_for(item.qa_type);
    let length = if len < min {
        RuleResult::fail(RuleKind::Length, format!("answer has {len} chars, minimum {min}"))
    } else if len > rules.max_len {
        RuleResult::fail(
            RuleKind::Length,
            format!("answer has {len} chars, maximum {}", rules.max_len),
        )
    } else {
        RuleResult::pass(RuleKind::Length)
    };

    let mut assistant: Vec<&str> = item.assistant_turns().map(|t| t.text.as_str()).collect();
    assistant.push(&item.answer_final);
    let banned_hit = assistant.iter().find_map(|t| banned.find(t));
    let banned = match banned_hit {
        Some(hit) => RuleResult::fail(RuleKind::BannedPhrase, format!("banned: {hit}")),
        None => RuleResult::pass(RuleKind::BannedPhrase),
    };

    let symbol = match assistant.iter().find_map(|t| check_symbols(t).err()) {
        Some(reason) => RuleResult::fail(RuleKind::Symbol, reason),
        None => RuleResult::pass(RuleKind::Symbol),
    };
    vec![length, banned, symbol]
}

// ---------------------------------------------------------------------------
// Anchoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchoring {
    pub overlap: f64,
    pub coverage: f64,
    /// Coverage of each assistant turn, for information only.
    pub per_turn_coverage: Vec<f64>,
}

fn verify_spans<'a>(item: &'a QaItem, p: &Passage) -> Result<Vec<&'a str>, ValidateError> {
    let chars: Vec<char> = p.text.chars().collect();
    item.support_spans
        .iter()
        .map(|s| {
            let not_found = || ValidateError::SpanNotFound {
                item_id: item.item_id.clone(),
                start: s.start,
                end: s.end,
            };
            if s.start >= s.end || s.end > chars.len() {
                return Err(not_found());
            }
            let at: String = chars[s.start..s.end].iter().collect();
            if nfc(&at) == nfc(&s.text) {
                Ok(s.text.as_str())
            } else {
                Err(not_found())
            }
        })
        .collect()
}

/// Share of `text`'s content tokens (with multiplicity) found in `evidence`.
pub fn content_coverage(text: &str, evidence: &HashSet<String>, lang: LangTag, stopwords: &Stopwords) -> f64 {
    let content: Vec<String> = tokenize(text)
        .into_iter()
        .filter(|t| !stopwords.is_stopword(lang, t))
        .collect();
    if content.is_empty() {
        return 0.0;
    }
    content.iter().filter(|t| evidence.contains(*t)).count() as f64 / content.len() as f64
}

pub fn anchor_evidence(item: &QaItem, p: &Passage, stopwords: &Stopwords) -> Result<Anchoring, ValidateError> {
    let spans = verify_spans(item, p)?;
    let evidence: HashSet<String> = spans.iter().flat_map(|s| tokenize(s)).collect();
    let answer: HashSet<String> = tokenize(&item.answer_final).into_iter().collect();
    let union = answer.union(&evidence).count();
    let overlap = if union == 0 {
        0.0
    } else {
        answer.intersection(&evidence).count() as f64 / union as f64
    };
    Ok(Anchoring {
        overlap,
        coverage: content_coverage(&item.answer_final, &evidence, item.language, stopwords),
        per_turn_coverage: item
            .assistant_turns()
            .map(|t| content_coverage(&t.text, &evidence, item.language, stopwords))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Routing

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Rule(RuleKind),
    Unsupported,
    Contradiction,
    SpanNotFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteDecision {
    Accept,
    Escalate,
    Reject(RejectReason),
}

impl RouteDecision {
    /// Reject < Escalate < Accept.
    pub fn rank(&self) -> u8 {
        match self {
            RouteDecision::Reject(_) => 0,
            RouteDecision::Escalate => 1,
            RouteDecision::Accept => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageThresholds {
    pub accept_cov: f64,
    pub escalate_cov: f64,
}

impl Default for CoverageThresholds {
    fn default() -> Self {
        Self {
            accept_cov: 0.7,
            escalate_cov: 0.4,
        }
    }
}

impl CoverageThresholds {
    pub fn validate(&self) -> Result<(), ValidateError> {
        if self.accept_cov > self.escalate_cov {
            Ok(())
        } else {
            Err(ValidateError::InvalidThresholds {
                accept_cov: self.accept_cov,
                escalate_cov: self.escalate_cov,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub item_id: String,
    pub rule_results: Vec<RuleResult>,
    pub overlap: f64,
    pub coverage: f64,
    pub per_turn_coverage: Vec<f64>,
    pub span_error: Option<String>,
    pub route: RouteDecision,
    pub thresholds: CoverageThresholds,
}

pub fn route_item(
    rule_results: &[RuleResult],
    coverage: f64,
    thresholds: &CoverageThresholds,
) -> Result<RouteDecision, ValidateError> {
    thresholds.validate()?;
    if let Some(failed) = rule_results.iter().find(|r| !r.passed) {
        return Ok(RouteDecision::Reject(RejectReason::Rule(failed.rule)));
    }
    Ok(if coverage >= thresholds.accept_cov {
        RouteDecision::Accept
    } else if coverage >= thresholds.escalate_cov {
        RouteDecision::Escalate
    } else {
        RouteDecision::Reject(RejectReason::Unsupported)
    })
}

pub struct Validator<'a> {
    pub rules: &'a RuleConfig,
    pub banned: &'a BannedLexicon,
    pub stopwords: &'a Stopwords,
    pub thresholds: CoverageThresholds,
}

impl Validator<'_> {
    pub fn report(&self, item: &QaItem, p: &Passage) -> Result<ValidationReport, ValidateError> {
        let rule_results = validate_item(item, self.rules, self.banned);
        let (anchoring, span_error) = match anchor_evidence(item, p, self.stopwords) {
            Ok(a) => (a, None),
            Err(e @ ValidateError::SpanNotFound { .. }) => (
                Anchoring {
                    overlap: 0.0,
                    coverage: 0.0,
                    per_turn_coverage: Vec::new(),
                },
                Some(e.to_string()),
            ),
            Err(e) => return Err(e),
        };
        let route = if span_error.is_some() {
            self.thresholds.validate()?;
            RouteDecision::Reject(RejectReason::SpanNotFound)
        } else {
            route_item(&rule_results, anchoring.coverage, &self.thresholds)?
        };
        Ok(ValidationReport {
            item_id: item.item_id.clone(),
            rule_results,
            overlap: anchoring.overlap,
            coverage: anchoring.coverage,
            per_turn_coverage: anchoring.per_turn_coverage,
            span_error,
            route,
            thresholds: self.thresholds,
        })
    }

    /// Reports for all items, in parallel, sorted by item id.
    pub fn report_all(
        &self,
        items: &[QaItem],
        passages: &HashMap<String, Passage>,
    ) -> Result<Vec<ValidationReport>, ValidateError> {
        let mut out = items
            .par_iter()
            .map(|it| {
                let p = passages
                    .get(&it.source)
                    .ok_or_else(|| ValidateError::UnknownPassage(it.source.clone()))?;
                self.report(it, p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Judge

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub item_id: String,
    pub language: LangTag,
    pub question: String,
    pub answer: String,
    pub evidence: Vec<String>,
}

impl JudgeRequest {
    pub fn for_item(item: &QaItem) -> Self {
        Self {
            item_id: item.item_id.clone(),
            language: item.language,
            question: item.user_text(),
            answer: item.answer_final.clone(),
            evidence: item.support_spans.iter().map(|s| s.text.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub item_id: String,
    pub grounded: bool,
    pub contradiction: bool,
    pub rationale: String,
    pub judge_id: String,
}

impl JudgeVerdict {
    /// A contradicting verdict is never grounded.
    pub fn normalized(mut self) -> Self {
        if self.contradiction {
            self.grounded = false;
        }
        self
    }

    pub fn route(&self) -> RouteDecision {
        if self.contradiction {
            RouteDecision::Reject(RejectReason::Contradiction)
        } else if self.grounded {
            RouteDecision::Accept
        } else {
            RouteDecision::Reject(RejectReason::Unsupported)
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("judge transport error: {0}")]
    Transport(String),
    #[error("judge timed out")]
    Timeout,
    #[error("judge returned an invalid verdict: {0}")]
    InvalidVerdict(String),
}

pub trait JudgeClient: Send + Sync {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError>;
}

const NEGATIONS: [&str; 6] = ["not", "no", "never", "नहीं", "न", "नाही"];

/// Rule-based judge: grounded when the answer's tokens are mostly in the
/// evidence, contradiction when the answer negates and the evidence does
/// not.
#[derive(Debug, Clone)]
pub struct StubJudge {
    pub min_coverage: f64,
    pub stopwords: Stopwords,
}

impl StubJudge {
    pub fn new(stopwords: Stopwords) -> Self {
        Self {
            min_coverage: 0.7,
            stopwords,
        }
    }
}

impl JudgeClient for StubJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let evidence: HashSet<String> = req.evidence.iter().flat_map(|s| tokenize(s)).collect();
        let answer = tokenize(&req.answer);
        let negated = answer
            .iter()
            .find(|t| NEGATIONS.contains(&t.as_str()) && !evidence.contains(*t));
        let cov = content_coverage(&req.answer, &evidence, req.language, &self.stopwords);
        let contradiction = negated.is_some();
        let rationale = match negated {
            Some(n) => format!("answer negates with `{n}`, evidence does not"),
            None => format!("content coverage {cov:.3}"),
        };
        Ok(JudgeVerdict {
            item_id: req.item_id.clone(),
            grounded: cov >= self.min_coverage,
            contradiction,
            rationale,
            judge_id: "stub-v1".into(),
        }
        .normalized())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjudicationConfig {
    pub max_retries: u32,
    pub concurrency: usize,
}

impl Default for AdjudicationConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AdjudicationOutcome {
    Decided { verdict: JudgeVerdict },
    /// The judge failed `attempts` times; the item stays escalated.
    JudgeUnavailable { attempts: u32, last_error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub item_id: String,
    pub route: RouteDecision,
    pub attempts: u32,
    pub outcome: AdjudicationOutcome,
}

fn adjudicate_one(item: &QaItem, judge: &dyn JudgeClient, max_retries: u32) -> Adjudication {
    let req = JudgeRequest::for_item(item);
    let mut attempts = 0;
    let mut last_error = String::new();
    while attempts < max_retries.max(1) {
        attempts += 1;
        match judge.judge(&req) {
            Ok(v) if v.item_id == req.item_id => {
                let verdict = v.normalized();
                return Adjudication {
                    item_id: item.item_id.clone(),
                    route: verdict.route(),
                    attempts,
                    outcome: AdjudicationOutcome::Decided { verdict },
                };
            }
            Ok(v) => last_error = JudgeError::InvalidVerdict(format!("verdict for `{}`", v.item_id)).to_string(),
            Err(e) => last_error = e.to_string(),
        }
    }
    Adjudication {
        item_id: item.item_id.clone(),
        route: RouteDecision::Escalate,
        attempts,
        outcome: AdjudicationOutcome::JudgeUnavailable { attempts, last_error },
    }
}

/// Send escalated items to the judge with at most `concurrency` requests in
/// flight. Results are sorted by item id.
pub fn adjudicate(escalated: &[QaItem], judge: &dyn JudgeClient, cfg: &AdjudicationConfig) -> Vec<Adjudication> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(escalated.len()));
    let workers = cfg.concurrency.clamp(1, escalated.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = escalated.get(i) else { break };
                let a = adjudicate_one(item, judge, cfg.max_retries);
                results.lock().expect("results lock").push(a);
            });
        }
    });
    let mut out = results.into_inner().expect("results lock");
    out.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    out
}

// ---------------------------------------------------------------------------
// Decision log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub item_id: String,
    pub qa_type: QaType,
    pub language: LangTag,
    pub domain: DomainId,
    pub route: RouteDecision,
    pub report: ValidationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudication: Option<Adjudication>,
}

/// Validate, route and adjudicate in one pass. Records come back sorted by
/// item id.
pub fn run_validation(
    items: &[QaItem],
    passages: &HashMap<String, Passage>,
    validator: &Validator<'_>,
    judge: &dyn JudgeClient,
    cfg: &AdjudicationConfig,
) -> Result<Vec<DecisionRecord>, ValidateError> {
    let reports = validator.report_all(items, passages)?;
    let by_id: HashMap<&str, &QaItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let escalated: Vec<QaItem> = reports
        .iter()
        .filter(|r| r.route == RouteDecision::Escalate)
        .map(|r| by_id[r.item_id.as_str()].clone())
        .collect();
    let mut adjudications: HashMap<String, Adjudication> = adjudicate(&escalated, judge, cfg)
        .into_iter()
        .map(|a| (a.item_id.clone(), a))
        .collect();
    Ok(reports
        .into_iter()
        .map(|report| {
            let item = by_id[report.item_id.as_str()];
            let adjudication = adjudications.remove(&report.item_id);
            DecisionRecord {
                item_id: report.item_id.clone(),
                qa_type: item.qa_type,
                language: item.language,
                domain: item.domain.clone(),
                route: adjudication.as_ref().map_or(report.route.clone(), |a| a.route.clone()),
                report,
                adjudication,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicons;

    fn passage(text: &str, lang: LangTag) -> TaggedPassage {
        TaggedPassage {
            passage: Passage {
                passage_id: "ed1/0001".into(),
                entry_id: "ed1".into(),
                page_span: (1, 1),
                text: text.into(),
                lang,
                division: None,
            },
            domain: "Dravyaguna".into(),
        }
    }

    const EN: &str = "Vata is dry, light and cold in nature. Pitta is hot and sharp. Kapha is heavy.";

    fn item_with(answer: &str, spans: Vec<SupportSpan>) -> QaItem {
        QaItem {
            item_id: "i1".into(),
            qa_type: QaType::QaPair,
            language: LangTag::EnLatn,
            domain: "Dravyaguna".into(),
            turns: vec![
                Turn {
                    role: Role::User,
                    text: "What is vata like?".into(),
                },
                Turn {
                    role: Role::Assistant,
                    text: answer.into(),
                },
            ],
            support_spans: spans,
            source: "ed1/0001".into(),
            answer_final: answer.into(),
            options: None,
            gold_option: None,
        }
    }

    fn span(text: &str, quote: &str) -> SupportSpan {
        let byte = text.find(quote).unwrap();
        let start = text[..byte].chars().count();
        SupportSpan {
            start,
            end: start + quote.chars().count(),
            text: quote.into(),
        }
    }

    #[test]
    fn request_embeds_passage_and_schema() {
        let p = passage(EN, LangTag::EnLatn);
        let r = build_generation_request(&p, QaType::Objective, "v1").unwrap();
        assert_eq!(r.passage, EN);
        assert_eq!(r.schema["properties"]["items"]["items"]["properties"]["options"]["minItems"], 4);
        let c = build_generation_request(&p, QaType::Contextual, "v1").unwrap();
        assert!(c.constraints.iter().any(|s| s.contains("offsets")));
        assert!(c.schema["properties"]["items"]["items"]["required"]
            .as_array()
            .unwrap()
            .contains(&json!("support_spans")));
        assert_eq!(r, build_generation_request(&p, QaType::Objective, "v1").unwrap());
        assert!(matches!(
            build_generation_request(&passage("  ", LangTag::EnLatn), QaType::QaPair, "v1"),
            Err(ValidateError::EmptyPassage(_))
        ));
    }

    #[test]
    fn stub_generator_round_trips_every_type() {
        let lex = Lexicons::builtin();
        let p = passage(EN, LangTag::EnLatn);
        for t in QaType::ALL {
            let req = build_generation_request(&p, t, "v1").unwrap();
            let raw = StubGenerator.generate(&req).unwrap();
            let items = parse_candidates(&raw, &req).unwrap();
            assert_eq!(items.len(), 1);
            let a = anchor_evidence(&items[0], &p.passage, &lex.stopwords).unwrap();
            assert_eq!(a.coverage, 1.0, "{t}");
            assert!(validate_item(&items[0], &RuleConfig::default(), &lex.banned)
                .iter()
                .all(|r| r.passed));
        }
    }

    #[test]
    fn parse_errors() {
        let p = passage(EN, LangTag::EnLatn);
        let req = build_generation_request(&p, QaType::QaPair, "v1").unwrap();
        let raw = StubGenerator.generate(&req).unwrap();
        assert!(matches!(
            parse_candidates(&raw[..raw.len() / 2], &req),
            Err(ValidateError::SchemaError(_))
        ));
        let extra = raw.replacen("\"answer_final\"", "\"bogus\":1,\"answer_final\"", 1);
        assert!(matches!(parse_candidates(&extra, &req), Err(ValidateError::SchemaError(_))));
        let far = r#"{"items":[{"turns":[{"role":"user","text":"q"},{"role":"assistant","text":"a"}],
            "answer_final":"a","support_spans":[{"start":0,"end":999,"text":"x"}]}]}"#;
        assert!(matches!(
            parse_candidates(far, &req),
            Err(ValidateError::SpanOutOfBounds { end: 999, .. })
        ));
    }

    #[test]
    fn rule_examples() {
        let lex = Lexicons::builtin();
        let rules = RuleConfig::default();
        let short = item_with("Yes.", vec![span(EN, "Vata")]);
        let r = validate_item(&short, &rules, &lex.banned);
        assert!(!r[0].passed && r[0].rule == RuleKind::Length);

        let advice = item_with("Vata herbs: take twice daily with warm water.", vec![span(EN, "Vata")]);
        let r = validate_item(&advice, &rules, &lex.banned);
        assert!(!r[1].passed && r[1].rule == RuleKind::BannedPhrase);

        let open = item_with("(वात is dry, light and cold in nature", vec![span(EN, "Vata")]);
        let r = validate_item(&open, &rules, &lex.banned);
        assert!(!r[2].passed && r[2].rule == RuleKind::Symbol);

        let clean = item_with("Vata is dry, light and cold in nature.", vec![span(EN, "Vata")]);
        assert!(validate_item(&clean, &rules, &lex.banned).iter().all(|r| r.passed));
    }

    #[test]
    fn symbol_rules() {
        assert!(check_symbols("धर्मार्थ ॥ १५ ॥").is_ok());
        assert!(check_symbols("धर्मार्थ ॥ १५").is_err());
        assert!(check_symbols("verse 15 ॥").is_err());
        assert!(check_symbols("in 1920 the text").is_ok());
        assert!(check_symbols("[a (b) c]").is_ok());
        assert!(check_symbols("[a (b] c)").is_err());
        assert!(check_symbols("say \"x\"").is_ok());
        assert!(check_symbols("say \"x").is_err());
    }

    #[test]
    fn coverage_examples() {
        let lex = Lexicons::builtin();
        let p = passage(EN, LangTag::EnLatn).passage;
        let verbatim = item_with("Vata is dry, light and cold in nature.", vec![span(EN, "Vata is dry, light and cold in nature.")]);
        assert_eq!(anchor_evidence(&verbatim, &p, &lex.stopwords).unwrap().coverage, 1.0);

        let none = item_with("Kapha heavy", vec![span(EN, "Pitta is hot and sharp.")]);
        assert_eq!(anchor_evidence(&none, &p, &lex.stopwords).unwrap().coverage, 0.0);

        // content tokens: vata, dry, moist, oily; span has vata and dry
        let half = item_with("Vata is dry, moist, oily", vec![span(EN, "Vata is dry")]);
        let a = anchor_evidence(&half, &p, &lex.stopwords).unwrap();
        assert_eq!(a.coverage, 0.5);
        // tokens {vata, is, dry, moist, oily} vs {vata, is, dry}
        assert!((a.overlap - 0.6).abs() < 1e-12);
    }

    #[test]
    fn span_text_must_match_offsets() {
        let lex = Lexicons::builtin();
        let p = passage(EN, LangTag::EnLatn).passage;
        let mut s = span(EN, "Pitta is hot");
        s.text = "Kapha is hot".into();
        let it = item_with("Pitta is hot and sharp", vec![s]);
        assert!(matches!(
            anchor_evidence(&it, &p, &lex.stopwords),
            Err(ValidateError::SpanNotFound { .. })
        ));
    }

    fn pass_all() -> Vec<RuleResult> {
        [RuleKind::Length, RuleKind::BannedPhrase, RuleKind::Symbol]
            .into_iter()
            .map(RuleResult::pass)
            .collect()
    }

    #[test]
    fn routing_examples() {
        let t = CoverageThresholds::default();
        assert_eq!(route_item(&pass_all(), 0.9, &t).unwrap(), RouteDecision::Accept);
        assert_eq!(route_item(&pass_all(), 0.5, &t).unwrap(), RouteDecision::Escalate);
        assert_eq!(
            route_item(&pass_all(), 0.1, &t).unwrap(),
            RouteDecision::Reject(RejectReason::Unsupported)
        );
        let mut banned = pass_all();
        banned[1] = RuleResult::fail(RuleKind::BannedPhrase, "x".into());
        assert_eq!(
            route_item(&banned, 1.0, &t).unwrap(),
            RouteDecision::Reject(RejectReason::Rule(RuleKind::BannedPhrase))
        );
        let bad = CoverageThresholds {
            accept_cov: 0.4,
            escalate_cov: 0.7,
        };
        assert!(matches!(
            route_item(&pass_all(), 0.5, &bad),
            Err(ValidateError::InvalidThresholds { .. })
        ));
    }

    struct Fixed(Result<JudgeVerdict, JudgeError>, AtomicUsize);

    impl JudgeClient for Fixed {
        fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            self.0.clone().map(|mut v| {
                v.item_id = req.item_id.clone();
                v
            })
        }
    }

    fn verdict(grounded: bool, contradiction: bool) -> JudgeVerdict {
        JudgeVerdict {
            item_id: String::new(),
            grounded,
            contradiction,
            rationale: String::new(),
            judge_id: "fixed".into(),
        }
    }

    #[test]
    fn adjudication_outcomes() {
        let it = item_with("Vata is dry and cold", vec![span(EN, "Vata is dry")]);
        let cfg = AdjudicationConfig::default();
        let ok = Fixed(Ok(verdict(true, false)), AtomicUsize::new(0));
        assert_eq!(adjudicate(&[it.clone()], &ok, &cfg)[0].route, RouteDecision::Accept);

        let contra = Fixed(Ok(verdict(true, true)), AtomicUsize::new(0));
        let a = adjudicate(&[it.clone()], &contra, &cfg);
        assert_eq!(a[0].route, RouteDecision::Reject(RejectReason::Contradiction));
        match &a[0].outcome {
            AdjudicationOutcome::Decided { verdict } => assert!(!verdict.grounded),
            o => panic!("{o:?}"),
        }

        let down = Fixed(Err(JudgeError::Timeout), AtomicUsize::new(0));
        let a = adjudicate(&[it.clone()], &down, &cfg);
        assert_eq!(a[0].route, RouteDecision::Escalate);
        assert_eq!(a[0].attempts, 3);
        assert_eq!(down.1.load(Ordering::SeqCst), 3);
        assert!(matches!(a[0].outcome, AdjudicationOutcome::JudgeUnavailable { attempts: 3, .. }));
    }

    #[test]
    fn stub_judge_flags_negation() {
        let judge = StubJudge::new(Lexicons::builtin().stopwords);
        let req = JudgeRequest {
            item_id: "x".into(),
            language: LangTag::EnLatn,
            question: "q".into(),
            answer: "Vata is not dry".into(),
            evidence: vec!["Vata is dry".into()],
        };
        let v = judge.judge(&req).unwrap();
        assert!(v.contradiction && !v.grounded);
        let req = JudgeRequest {
            answer: "Vata is dry".into(),
            ..req
        };
        let v = judge.judge(&req).unwrap();
        assert!(v.grounded && !v.contradiction);
    }
}
