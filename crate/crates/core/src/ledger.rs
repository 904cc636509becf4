//! License ledger: edition-level catalogue records, declared-rights
//! classification, the trainable/shadow split and edition lineage.
//!
//! A shadow entry keeps its bibliographic metadata but loses every reference
//! to its text, so nothing downstream can open its pages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dedup::DupCluster;
use crate::jsonl::{self, JsonlError};
use crate::script::{nfc, tokenize};
use crate::types::LangTag;

pub const DEFAULT_LINK_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("duplicate entry id `{0}`")]
    DuplicateEntryId(String),
    #[error("duplicate cluster references unknown entry `{0}`")]
    UnknownEntryReference(String),
    #[error("link threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("license lexicon: {0}")]
    Lexicon(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpenKind {
    Cc0,
    CcBy,
    PublicDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LicenseClass {
    Open(OpenKind),
    Restricted,
    Ambiguous,
}

impl Default for LicenseClass {
    fn default() -> Self {
        LicenseClass::Ambiguous
    }
}

impl LicenseClass {
    pub fn is_open(self) -> bool {
        matches!(self, LicenseClass::Open(_))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LicenseClass::Open(OpenKind::Cc0) => "open:cc0",
            LicenseClass::Open(OpenKind::CcBy) => "open:cc-by",
            LicenseClass::Open(OpenKind::PublicDomain) => "open:public-domain",
            LicenseClass::Restricted => "restricted",
            LicenseClass::Ambiguous => "ambiguous",
        }
    }
}

impl fmt::Display for LicenseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LicenseClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "open:cc0" => LicenseClass::Open(OpenKind::Cc0),
            "open:cc-by" => LicenseClass::Open(OpenKind::CcBy),
            "open:public-domain" => LicenseClass::Open(OpenKind::PublicDomain),
            "restricted" => LicenseClass::Restricted,
            "ambiguous" => LicenseClass::Ambiguous,
            other => return Err(format!("unknown license class `{other}`")),
        })
    }
}

impl From<LicenseClass> for String {
    fn from(value: LicenseClass) -> Self {
        value.as_str().to_owned()
    }
}

impl TryFrom<String> for LicenseClass {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

/// One row of the license ledger. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub entry_id: String,
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub translators: Vec<String>,
    pub publication_year: Option<i32>,
    #[serde(default)]
    pub source_url: String,
    #[serde(default)]
    pub language_tags: Vec<LangTag>,
    #[serde(default)]
    pub declared_rights: String,
    /// Recomputed from `declared_rights` when the ledger is built.
    #[serde(default)]
    pub license_class: LicenseClass,
    #[serde(default)]
    pub shadow: bool,
    /// Location of the edition's OCR page records, relative to the corpus root.
    #[serde(default)]
    pub text_ref: Option<String>,
}

impl CatalogEntry {
    fn into_nfc(mut self) -> Self {
        self.entry_id = nfc(&self.entry_id);
        self.title = nfc(&self.title);
        self.authors = self.authors.iter().map(|a| nfc(a)).collect();
        self.translators = self.translators.iter().map(|t| nfc(t)).collect();
        self.source_url = nfc(&self.source_url);
        self.declared_rights = nfc(&self.declared_rights);
        self.text_ref = self.text_ref.as_deref().map(nfc);
        self
    }

    fn into_shadow(mut self) -> Self {
        self.shadow = true;
        self.text_ref = None;
        self
    }
}

/// Token patterns for each license class.
#[derive(Debug, Clone, Deserialize)]
pub struct LicenseLexicon {
    pub cc0: Vec<String>,
    pub cc_by: Vec<String>,
    pub public_domain: Vec<String>,
    pub restricted: Vec<String>,
}

impl LicenseLexicon {
    pub fn from_toml(text: &str) -> Result<Self, LedgerError> {
        toml::from_str(text).map_err(|e| LedgerError::Lexicon(e.to_string()))
    }
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn any_pattern(tokens: &[String], patterns: &[String]) -> bool {
    patterns
        .iter()
        .any(|p| contains_run(tokens, &tokenize(p)))
}

/// Classify a free-text rights declaration. Unknown or conflicting
/// declarations are `Ambiguous`. Open kinds are preferred in the order
/// CC0, CC-BY, public domain when several match.
pub fn classify_license(declared_rights: &str, lexicon: &LicenseLexicon) -> LicenseClass {
    let tokens = tokenize(declared_rights);
    let open = [
        (OpenKind::Cc0, &lexicon.cc0),
        (OpenKind::CcBy, &lexicon.cc_by),
        (OpenKind::PublicDomain, &lexicon.public_domain),
    ]
    .into_iter()
    .find(|(_, patterns)| any_pattern(&tokens, patterns))
    .map(|(kind, _)| kind);
    let restricted = any_pattern(&tokens, &lexicon.restricted);
    match (open, restricted) {
        (Some(_), true) | (None, false) => LicenseClass::Ambiguous,
        (None, true) => LicenseClass::Restricted,
        (Some(kind), false) => LicenseClass::Open(kind),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Partition {
    pub trainable: Vec<CatalogEntry>,
    pub shadow: Vec<CatalogEntry>,
}

/// Split entries into trainable (open) and shadow (everything else).
/// Both halves come back sorted by `entry_id`.
pub fn partition_trainable(entries: &[CatalogEntry]) -> Result<Partition, LedgerError> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(e.entry_id.as_str()) {
            return Err(LedgerError::DuplicateEntryId(e.entry_id.clone()));
        }
    }
    let mut partition = Partition::default();
    for e in entries {
        if e.license_class.is_open() {
            let mut e = e.clone();
            e.shadow = false;
            partition.trainable.push(e);
        } else {
            partition.shadow.push(e.clone().into_shadow());
        }
    }
    partition.trainable.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    partition.shadow.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    Ok(partition)
}

/// Re-derive `license_class` and `shadow` from `declared_rights`.
pub fn reclassify(entries: Vec<CatalogEntry>, lexicon: &LicenseLexicon) -> Vec<CatalogEntry> {
    entries
        .into_iter()
        .map(|mut e| {
            e.license_class = classify_license(&e.declared_rights, lexicon);
            e.shadow = !e.license_class.is_open();
            if e.shadow {
                e.text_ref = None;
            }
            e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub entry_a: String,
    pub entry_b: String,
    pub shared_page_fraction: f64,
}

/// Link editions that share duplicate pages. For a pair (a, b) the shared
/// fraction of a is the share of a's pages sitting in a cluster that also
/// holds a page of b; the edge fraction is the larger of the two sides.
/// Edges come back with `entry_a < entry_b`, sorted.
pub fn link_editions(
    entries: &[CatalogEntry],
    clusters: &[DupCluster],
    link_threshold: f64,
) -> Result<Vec<LineageEdge>, LedgerError> {
    if !(link_threshold > 0.0 && link_threshold <= 1.0) {
        return Err(LedgerError::InvalidThreshold(link_threshold));
    }
    let known: BTreeSet<&str> = entries.iter().map(|e| e.entry_id.as_str()).collect();
    let mut pages_per_entry: BTreeMap<&str, usize> = BTreeMap::new();
    let mut shared: BTreeMap<(&str, &str), usize> = BTreeMap::new();

    for cluster in clusters {
        let mut per_entry: BTreeMap<&str, usize> = BTreeMap::new();
        for member in &cluster.members {
            let id = member.entry_id.as_str();
            if !known.contains(id) {
                return Err(LedgerError::UnknownEntryReference(member.entry_id.clone()));
            }
            *per_entry.entry(id).or_default() += 1;
        }
        for (&id, &n) in &per_entry {
            *pages_per_entry.entry(id).or_default() += n;
        }
        for (&a, &na) in &per_entry {
            for &b in per_entry.keys() {
                if a != b {
                    *shared.entry((a, b)).or_default() += na;
                }
            }
        }
    }

    let mut edges = Vec::new();
    for (&(a, b), &shared_a) in &shared {
        if a >= b {
            continue;
        }
        let shared_b = shared.get(&(b, a)).copied().unwrap_or(0);
        let frac_a = shared_a as f64 / pages_per_entry[a] as f64;
        let frac_b = shared_b as f64 / pages_per_entry[b] as f64;
        let fraction = frac_a.max(frac_b);
        if fraction >= link_threshold {
            edges.push(LineageEdge {
                entry_a: a.to_owned(),
                entry_b: b.to_owned(),
                shared_page_fraction: fraction,
            });
        }
    }
    Ok(edges)
}

/// Read a ledger file; strings are brought to NFC.
pub fn read_ledger(path: &Path) -> Result<Vec<CatalogEntry>, LedgerError> {
    let entries: Vec<CatalogEntry> = jsonl::read_jsonl(path)?;
    Ok(entries.into_iter().map(CatalogEntry::into_nfc).collect())
}

pub fn write_ledger(path: &Path, entries: &[CatalogEntry]) -> Result<(), LedgerError> {
    let entries: Vec<CatalogEntry> = entries.iter().cloned().map(CatalogEntry::into_nfc).collect();
    jsonl::write_jsonl(path, &entries)?;
    Ok(())
}
