//! Dialogue rendering with special tokens, the strict inverse parser, and
//! dataset composition stats.
//!
//! Record grammar (no separators between blocks):
//!
//! ```text
//! [<system_prompt>S] [<context>P] (<user>Q <assistant><actual_response>A</actual_response>)+
//! ```
//!
//! Only `<actual_response>` has a closing token, so every other block runs
//! to the next marker or the end of the record.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dedup::hash_bytes;
use crate::script::nfc;
use crate::taxonomy::FacetCount;
use crate::types::{DomainId, LangTag, QaType};
use crate::validate::{QaItem, Role, RouteDecision, Turn};

pub const USER: &str = "<user>";
pub const ASSISTANT: &str = "<assistant>";
pub const CONTEXT: &str = "<context>";
pub const SYSTEM_PROMPT: &str = "<system_prompt>";
pub const RESPONSE_OPEN: &str = "<actual_response>";
pub const RESPONSE_CLOSE: &str = "</actual_response>";

pub const SPECIAL_TOKENS: [&str; 6] = [USER, ASSISTANT, CONTEXT, SYSTEM_PROMPT, RESPONSE_OPEN, RESPONSE_CLOSE];

pub const FORMAT_VERSION: &str = "dialogue-v1";
pub const GRAMMAR: &str =
    "[<system_prompt>S][<context>P](<user>Q<assistant><actual_response>A</actual_response>)+";

/// Anything shaped like a marker, known or not.
static MARKER_LIKE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?[a-z_]+>").expect("valid regex"));

/// Composition of the reference dataset, in millions of items.
pub const TARGET_COUNTS_M: [(QaType, f64); 4] = [
    (QaType::QaPair, 1.27),
    (QaType::Objective, 0.9),
    (QaType::MultiTurn, 1.51),
    (QaType::Contextual, 1.07),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExportError {
    #[error("item `{0}` was not accepted")]
    UnacceptedItem(String),
    #[error("item `{0}` has no assistant answer")]
    MissingAnswer(String),
    #[error("contextual item `{0}` has no source passage")]
    MissingContext(String),
    #[error("item `{item_id}`: payload contains marker-like token `{marker}`")]
    MarkerCollision { item_id: String, marker: String },
    #[error("marker imbalance: {0}")]
    MarkerImbalance(String),
    #[error("unknown marker `{0}`")]
    UnknownMarker(String),
    #[error("marker out of order: {0}")]
    OutOfOrder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub item_id: String,
    pub rendered: String,
    pub qa_type: QaType,
    pub language: LangTag,
    pub domain: DomainId,
    pub split: Split,
}

/// First line of an export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format: String,
    pub grammar: String,
    pub special_tokens: Vec<String>,
    pub records: usize,
}

impl ExportHeader {
    pub fn new(records: usize) -> Self {
        Self {
            format: FORMAT_VERSION.into(),
            grammar: GRAMMAR.into(),
            special_tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            records,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Share of records flagged `val`.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            val_fraction: 0.05,
        }
    }
}

impl SplitConfig {
    pub fn split_of(&self, item_id: &str) -> Split {
        let h = hash_bytes(item_id.as_bytes()) ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.val_fraction {
            Split::Val
        } else {
            Split::Train
        }
    }
}

fn check_payload(item_id: &str, text: &str) -> Result<(), ExportError> {
    match MARKER_LIKE.find(text) {
        Some(m) => Err(ExportError::MarkerCollision {
            item_id: item_id.to_string(),
            marker: m.as_str().to_string(),
        }),
        None => Ok(()),
    }
}

/// Render an accepted item. `passage` is embedded as context for
/// contextual items and ignored otherwise.
pub fn render_dialogue(
    item: &QaItem,
    route: &RouteDecision,
    passage: Option<&str>,
    system_prompt: Option<&str>,
    split: &SplitConfig,
) -> Result<DialogueRecord, ExportError> {
    if *route != RouteDecision::Accept {
        return Err(ExportError::UnacceptedItem(item.item_id.clone()));
    }
    if item.answer_final.trim().is_empty()
        || !item.turns.iter().any(|t| t.role == Role::Assistant && !t.text.trim().is_empty())
    {
        return Err(ExportError::MissingAnswer(item.item_id.clone()));
    }
    let mut out = String::new();
    if let Some(s) = system_prompt {
        check_payload(&item.item_id, s)?;
        out.push_str(SYSTEM_PROMPT);
        out.push_str(&nfc(s));
    }
    if item.qa_type == QaType::Contextual {
        let p = passage.ok_or_else(|| ExportError::MissingContext(item.item_id.clone()))?;
        check_payload(&item.item_id, p)?;
        out.push_str(CONTEXT);
        out.push_str(&nfc(p));
    }
    let mut expect = Role::User;
    for t in &item.turns {
        if t.role != expect {
            return Err(ExportError::OutOfOrder(format!(
                "{}: turns must alternate starting with the user",
                item.item_id
            )));
        }
        check_payload(&item.item_id, &t.text)?;
        match t.role {
            Role::User => {
                out.push_str(USER);
                out.push_str(&nfc(&t.text));
                expect = Role::Assistant;
            }
            Role::Assistant => {
                out.push_str(ASSISTANT);
                out.push_str(RESPONSE_OPEN);
                out.push_str(&nfc(&t.text));
                out.push_str(RESPONSE_CLOSE);
                expect = Role::User;
            }
        }
    }
    if expect != Role::User {
        return Err(ExportError::MissingAnswer(item.item_id.clone()));
    }
    Ok(DialogueRecord {
        item_id: item.item_id.clone(),
        rendered: out,
        qa_type: item.qa_type,
        language: item.language,
        domain: item.domain.clone(),
        split: split.split_of(&item.item_id),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDialogue {
    pub system_prompt: Option<String>,
    pub context: Option<String>,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    User,
    Assistant,
    Context,
    System,
    Open,
    Close,
}

fn lex(rendered: &str) -> Result<Vec<(Tok, &str)>, ExportError> {
    // each marker with the payload text that follows it
    let mut out: Vec<(Tok, &str)> = Vec::new();
    let mut last_end = 0;
    let mut pending: Option<Tok> = None;
    for m in MARKER_LIKE.find_iter(rendered) {
        let tok = match m.as_str() {
            USER => Tok::User,
            ASSISTANT => Tok::Assistant,
            CONTEXT => Tok::Context,
            SYSTEM_PROMPT => Tok::System,
            RESPONSE_OPEN => Tok::Open,
            RESPONSE_CLOSE => Tok::Close,
            other => return Err(ExportError::UnknownMarker(other.to_string())),
        };
        let text = &rendered[last_end..m.start()];
        match pending {
            Some(p) => out.push((p, text)),
            None if !text.is_empty() => {
                return Err(ExportError::OutOfOrder("text before the first marker".into()));
            }
            None => {}
        }
        pending = Some(tok);
        last_end = m.end();
    }
    match pending {
        Some(p) => out.push((p, &rendered[last_end..])),
        None => return Err(ExportError::OutOfOrder("no markers".into())),
    }
    Ok(out)
}

/// Strict inverse of [`render_dialogue`].
pub fn parse_dialogue(rendered: &str) -> Result<ParsedDialogue, ExportError> {
    let toks = lex(rendered)?;
    // the closer must pair with an opener before anything else is checked
    let mut open = false;
    for (t, _) in &toks {
        match t {
            Tok::Open if open => return Err(ExportError::MarkerImbalance("nested <actual_response>".into())),
            Tok::Open => open = true,
            Tok::Close if !open => {
                return Err(ExportError::MarkerImbalance("</actual_response> without opener".into()))
            }
            Tok::Close => open = false,
            _ if open => {
                return Err(ExportError::MarkerImbalance(
                    "<actual_response> not closed before next marker".into(),
                ))
            }
            _ => {}
        }
    }
    if open {
        return Err(ExportError::MarkerImbalance("<actual_response> never closed".into()));
    }

    let mut parsed = ParsedDialogue {
        system_prompt: None,
        context: None,
        turns: Vec::new(),
    };
    let mut i = 0;
    if let Some((Tok::System, s)) = toks.get(i) {
        parsed.system_prompt = Some(s.to_string());
        i += 1;
    }
    if let Some((Tok::Context, s)) = toks.get(i) {
        parsed.context = Some(s.to_string());
        i += 1;
    }
    while i < toks.len() {
        let (Tok::User, q) = toks[i] else {
            return Err(ExportError::OutOfOrder(format!("expected <user>, got {:?}", toks[i].0)));
        };
        let ok = matches!(
            (toks.get(i + 1), toks.get(i + 2), toks.get(i + 3)),
            (Some((Tok::Assistant, "")), Some((Tok::Open, _)), Some((Tok::Close, "")))
        );
        if !ok {
            return Err(ExportError::OutOfOrder(
                "<user> must be followed by <assistant><actual_response>...</actual_response>".into(),
            ));
        }
        parsed.turns.push(Turn {
            role: Role::User,
            text: q.to_string(),
        });
        parsed.turns.push(Turn {
            role: Role::Assistant,
            text: toks[i + 2].1.to_string(),
        });
        i += 4;
    }
    if parsed.turns.is_empty() {
        return Err(ExportError::OutOfOrder("no user turn".into()));
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRejection {
    pub item_id: String,
    pub reason: String,
}

/// Render every accepted item in parallel. Records and rejections come back
/// sorted by item id; items not accepted are skipped silently.
pub fn export_items(
    items: &[(QaItem, RouteDecision)],
    passages: &HashMap<String, String>,
    system_prompt: Option<&str>,
    split: &SplitConfig,
) -> (Vec<DialogueRecord>, Vec<ExportRejection>) {
    let results: Vec<Result<DialogueRecord, ExportRejection>> = items
        .par_iter()
        .filter(|(_, r)| *r == RouteDecision::Accept)
        .map(|(item, route)| {
            render_dialogue(
                item,
                route,
                passages.get(&item.source).map(String::as_str),
                system_prompt,
                split,
            )
            .map_err(|e| ExportRejection {
                item_id: item.item_id.clone(),
                reason: e.to_string(),
            })
        })
        .collect();
    let (mut ok, mut bad) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(d) => ok.push(d),
            Err(e) => bad.push(e),
        }
    }
    ok.sort_by(|a: &DialogueRecord, b| a.item_id.cmp(&b.item_id));
    bad.sort_by(|a: &ExportRejection, b| a.item_id.cmp(&b.item_id));
    (ok, bad)
}

pub fn target_shares() -> BTreeMap<QaType, f64> {
    let total: f64 = TARGET_COUNTS_M.iter().map(|(_, c)| c).sum();
    TARGET_COUNTS_M.iter().map(|(t, c)| (*t, c / total)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub empty: bool,
    pub by_qa_type: BTreeMap<QaType, FacetCount>,
    pub by_language: BTreeMap<LangTag, FacetCount>,
    pub by_domain: BTreeMap<DomainId, FacetCount>,
    pub target_shares: BTreeMap<QaType, f64>,
    /// Observed fraction minus target share.
    pub deviation: BTreeMap<QaType, Option<f64>>,
}

pub fn dataset_stats(records: &[DialogueRecord]) -> DatasetStats {
    let total = records.len();
    let facet = |count: usize| FacetCount {
        count,
        fraction: (total > 0).then(|| count as f64 / total as f64),
    };
    let mut types: BTreeMap<QaType, usize> = QaType::ALL.iter().map(|t| (*t, 0)).collect();
    let mut langs: BTreeMap<LangTag, usize> = BTreeMap::new();
    let mut domains: BTreeMap<DomainId, usize> = BTreeMap::new();
    for r in records {
        *types.entry(r.qa_type).or_default() += 1;
        *langs.entry(r.language).or_default() += 1;
        *domains.entry(r.domain.clone()).or_default() += 1;
    }
    let targets = target_shares();
    let by_qa_type: BTreeMap<QaType, FacetCount> = types.into_iter().map(|(k, v)| (k, facet(v))).collect();
    let deviation = by_qa_type
        .iter()
        .map(|(t, f)| (*t, f.fraction.map(|x| x - targets[t])))
        .collect();
    DatasetStats {
        total,
        empty: total == 0,
        by_qa_type,
        by_language: langs.into_iter().map(|(k, v)| (k, facet(v))).collect(),
        by_domain: domains.into_iter().map(|(k, v)| (k, facet(v))).collect(),
        target_shares: targets,
        deviation,
    }
}

/// Header line followed by one record per line.
pub fn to_export_jsonl(records: &[DialogueRecord]) -> String {
    let mut out = serde_json::to_string(&ExportHeader::new(records.len())).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_export_jsonl(text: &str) -> Result<(ExportHeader, Vec<DialogueRecord>), String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or("empty export file")?;
    let header: ExportHeader = serde_json::from_str(first).map_err(|e| format!("line 1: {e}"))?;
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect::<Result<Vec<DialogueRecord>, String>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validate::{RejectReason, SupportSpan};

    fn item(t: QaType, turns: &[(&str, &str)]) -> QaItem {
        QaItem {
            item_id: "x/1".into(),
            qa_type: t,
            language: LangTag::EnLatn,
            domain: "Dravyaguna".into(),
            turns: turns
                .iter()
                .flat_map(|(q, a)| {
                    [
                        Turn {
                            role: Role::User,
                            text: q.to_string(),
                        },
                        Turn {
                            role: Role::Assistant,
                            text: a.to_string(),
                        },
                    ]
                })
                .collect(),
            support_spans: vec![SupportSpan {
                start: 0,
                end: 1,
                text: "P".into(),
            }],
            source: "p1".into(),
            answer_final: turns.last().unwrap().1.to_string(),
            options: None,
            gold_option: None,
        }
    }

    fn render(i: &QaItem, passage: Option<&str>, sys: Option<&str>) -> Result<DialogueRecord, ExportError> {
        render_dialogue(i, &RouteDecision::Accept, passage, sys, &SplitConfig::default())
    }

    #[test]
    fn single_turn_layout() {
        let r = render(&item(QaType::QaPair, &[("Q", "A")]), Some("P"), None).unwrap();
        assert_eq!(r.rendered, "<user>Q<assistant><actual_response>A</actual_response>");
    }

    #[test]
    fn contextual_embeds_passage_and_system_prompt_leads() {
        let i = item(QaType::Contextual, &[("Q", "A")]);
        let r = render(&i, Some("The passage."), Some("Be brief.")).unwrap();
        assert_eq!(
            r.rendered,
            "<system_prompt>Be brief.<context>The passage.<user>Q<assistant><actual_response>A</actual_response>"
        );
        let p = parse_dialogue(&r.rendered).unwrap();
        assert_eq!(p.context.as_deref(), Some("The passage."));
        assert_eq!(p.system_prompt.as_deref(), Some("Be brief."));
        assert_eq!(p.turns, i.turns);
        assert_eq!(render(&i, None, None), Err(ExportError::MissingContext("x/1".into())));
    }

    #[test]
    fn multi_turn_round_trip() {
        let i = item(QaType::MultiTurn, &[("Q1", "A1"), ("Q2 a < b", "A2 <x")]);
        let r = render(&i, None, None).unwrap();
        assert_eq!(parse_dialogue(&r.rendered).unwrap().turns, i.turns);
    }

    #[test]
    fn render_rejections() {
        let i = item(QaType::QaPair, &[("Q", "A")]);
        assert_eq!(
            render_dialogue(
                &i,
                &RouteDecision::Reject(RejectReason::Unsupported),
                None,
                None,
                &SplitConfig::default()
            ),
            Err(ExportError::UnacceptedItem("x/1".into()))
        );
        let collide = item(QaType::QaPair, &[("Q <assistant> trick", "A")]);
        assert!(matches!(render(&collide, None, None), Err(ExportError::MarkerCollision { .. })));
        let html = item(QaType::QaPair, &[("Q", "bold <b>x</b>")]);
        assert!(matches!(render(&html, None, None), Err(ExportError::MarkerCollision { .. })));
        let empty = item(QaType::QaPair, &[("Q", " ")]);
        assert_eq!(render(&empty, None, None), Err(ExportError::MissingAnswer("x/1".into())));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_dialogue("<user>Q<assistant><actual_response>A"),
            Err(ExportError::MarkerImbalance(_))
        ));
        assert!(matches!(
            parse_dialogue("<assistant><actual_response>A</actual_response>"),
            Err(ExportError::OutOfOrder(_))
        ));
        assert!(matches!(
            parse_dialogue("<user>Q<bot><actual_response>A</actual_response>"),
            Err(ExportError::UnknownMarker(_))
        ));
        assert!(matches!(
            parse_dialogue("<user>Q<assistant>A"),
            Err(ExportError::OutOfOrder(_))
        ));
        assert!(matches!(
            parse_dialogue("<user>Q<assistant><actual_response>A</actual_response>tail"),
            Err(ExportError::OutOfOrder(_))
        ));
        assert!(matches!(parse_dialogue("plain"), Err(ExportError::OutOfOrder(_))));
        assert!(matches!(
            parse_dialogue("<user>Q<assistant><actual_response>A<user></actual_response>"),
            Err(ExportError::MarkerImbalance(_))
        ));
    }

    #[test]
    fn target_share_values() {
        let s = target_shares();
        assert!((s[&QaType::QaPair] - 0.267).abs() < 0.001);
        assert!((s[&QaType::Objective] - 0.189).abs() < 0.001);
        assert!((s[&QaType::MultiTurn] - 0.318).abs() < 0.001);
        assert!((s[&QaType::Contextual] - 0.225).abs() < 0.001);
        assert!((s.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_and_jsonl() {
        let a = render(&item(QaType::QaPair, &[("Q", "A")]), None, None).unwrap();
        let mut b = a.clone();
        b.item_id = "x/2".into();
        b.qa_type = QaType::Objective;
        let s = dataset_stats(&[a.clone(), b.clone()]);
        assert_eq!(s.by_qa_type[&QaType::QaPair].count, 1);
        assert_eq!(s.by_qa_type[&QaType::MultiTurn].fraction, Some(0.0));
        let sum: f64 = s.by_qa_type.values().filter_map(|f| f.fraction).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let empty = dataset_stats(&[]);
        assert!(empty.empty && empty.deviation.values().all(Option::is_none));

        let text = to_export_jsonl(&[a.clone(), b.clone()]);
        let (h, recs) = parse_export_jsonl(&text).unwrap();
        assert_eq!(h.records, 2);
        assert_eq!(h.grammar, GRAMMAR);
        assert_eq!(recs, vec![a, b]);
    }

    #[test]
    fn split_is_seeded_and_roughly_proportional() {
        let cfg = SplitConfig {
            seed: 1,
            val_fraction: 0.2,
        };
        let val = (0..5000).filter(|i| cfg.split_of(&format!("i{i}")) == Split::Val).count();
        assert!((800..1200).contains(&val), "{val}");
        assert_eq!(cfg.split_of("abc"), cfg.split_of("abc"));
    }
}
