//! Post-OCR text conditioning.
//!
//! The per-document flow is: drop repeated edge lines (running headers,
//! footers, page numbers), cut the remaining lines into paragraphs at blank
//! lines, normalize and de-hyphenate each paragraph, tag its language, and
//! carry the current canonical division forward from the last heading seen.
//!
//! `normalize_text` keeps line structure: horizontal whitespace runs become
//! one space, a run holding one newline becomes `\n`, and a run holding two
//! or more becomes a blank line. Passages are flattened to one line at the
//! very end.

use std::collections::{BTreeMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::lexicon::Lexicons;
use crate::script::{self, nfc, tokenize, ScriptCounts};
use crate::types::LangTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLine {
    pub text: String,
    pub confidence: f64,
}

/// One OCR page as exported by the recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPage {
    pub entry_id: String,
    pub page_no: u32,
    pub lines: Vec<RawLine>,
}

impl RawPage {
    pub fn page_ref(&self) -> crate::types::PageRef {
        crate::types::PageRef::new(self.entry_id.clone(), self.page_no)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.page_no == 0 {
            return Err(format!("{}: page numbers start at 1", self.entry_id));
        }
        for line in &self.lines {
            if !(0.0..=1.0).contains(&line.confidence) {
                return Err(format!(
                    "{}: confidence {} outside [0, 1]",
                    self.page_ref(),
                    line.confidence
                ));
            }
        }
        Ok(())
    }

    pub fn joined_text(&self) -> String {
        self.lines
            .iter()
            .map(|l| l.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub entry_id: String,
    pub page_span: (u32, u32),
    pub text: String,
    pub lang: LangTag,
    #[serde(default)]
    pub division: Option<String>,
}

// ---------------------------------------------------------------------------
// Lexicons

#[derive(Debug, Clone, Default)]
pub struct Stopwords {
    pub hi: HashSet<String>,
    pub mr: HashSet<String>,
    pub san: HashSet<String>,
    pub en: HashSet<String>,
}

#[derive(Deserialize)]
struct WordList {
    words: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StopwordsFile {
    hi: WordList,
    mr: WordList,
    san: WordList,
    en: WordList,
}

impl Stopwords {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: StopwordsFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let set = |w: WordList| w.words.iter().map(|s| nfc(s).to_lowercase()).collect();
        Ok(Stopwords {
            hi: set(file.hi),
            mr: set(file.mr),
            san: set(file.san),
            en: set(file.en),
        })
    }

    /// Stopwords for a tag; `und` gets the union of all lists.
    pub fn is_stopword(&self, lang: LangTag, token: &str) -> bool {
        match lang {
            LangTag::HiDeva => self.hi.contains(token),
            LangTag::MrDeva => self.mr.contains(token),
            LangTag::SanDeva => self.san.contains(token),
            LangTag::EnLatn => self.en.contains(token),
            LangTag::Und => {
                self.hi.contains(token)
                    || self.mr.contains(token)
                    || self.san.contains(token)
                    || self.en.contains(token)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct DivisionEntry {
    pub name: String,
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DivisionLexicon {
    pub entries: Vec<DivisionEntry>,
    keys: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DivisionFile {
    division: Vec<DivisionEntry>,
}

fn heading_key(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .filter(|t| !t.chars().all(char::is_numeric))
        .collect::<Vec<_>>()
        .join(" ")
}

impl DivisionLexicon {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: DivisionFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.division)
    }

    pub fn new(entries: Vec<DivisionEntry>) -> Result<Self, String> {
        let mut keys = BTreeMap::new();
        for (idx, entry) in entries.iter().enumerate() {
            for variant in entry.variants.iter().chain(std::iter::once(&entry.name)) {
                let key = heading_key(variant);
                if key.is_empty() {
                    continue;
                }
                if let Some(prev) = keys.insert(key.clone(), idx) {
                    if prev != idx {
                        return Err(format!("variant `{variant}` maps to two divisions"));
                    }
                }
            }
        }
        Ok(Self { entries, keys })
    }

    /// The division a heading line names, if any.
    pub fn match_heading(&self, line: &str) -> Option<&str> {
        self.keys
            .get(&heading_key(line))
            .map(|&i| self.entries[i].name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairMode {
    #[default]
    Standard,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairScope {
    #[default]
    Any,
    DevanagariLine,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RepairRule {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub mode: RepairMode,
    #[serde(default)]
    pub scope: RepairScope,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepairTable {
    pub rules: Vec<RepairRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RepairFile {
    rule: Vec<RepairRule>,
}

impl RepairTable {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: RepairFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.rule)
    }

    pub fn new(rules: Vec<RepairRule>) -> Result<Self, String> {
        for rule in &rules {
            if rule.from.is_empty() {
                return Err("repair rule with empty `from`".into());
            }
            if rule.to.contains(&rule.from) {
                return Err(format!("repair rule `{}` re-creates its own input", rule.note));
            }
        }
        Ok(Self { rules })
    }
}

// ---------------------------------------------------------------------------
// Text normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeOptions {
    pub repair_devanagari: bool,
    /// Also apply `aggressive` repair rules (pages routed to strict cleaning).
    pub aggressive: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            repair_devanagari: true,
            aggressive: false,
        }
    }
}

impl NormalizeOptions {
    pub fn strict() -> Self {
        Self {
            repair_devanagari: true,
            aggressive: true,
        }
    }
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if !c.is_whitespace() {
            out.push(c);
            continue;
        }
        let mut newlines = usize::from(c == '\n');
        while let Some(&next) = chars.peek() {
            if !next.is_whitespace() {
                break;
            }
            newlines += usize::from(next == '\n');
            chars.next();
        }
        out.push_str(match newlines {
            0 => " ",
            1 => "\n",
            _ => "\n\n",
        });
    }
    out.trim_matches(char::is_whitespace).to_owned()
}

fn harmonize_digits(line: &str) -> String {
    line.chars()
        .map(|c| match c {
            '0'..='9' => char::from_u32(0x0966 + (c as u32 - '0' as u32)).unwrap_or(c),
            other => other,
        })
        .collect()
}

fn repair_line(line: &str, table: &RepairTable, opts: &NormalizeOptions) -> String {
    let counts = ScriptCounts::of(line);
    // a letterless line counts as Devanagari if it already uses Devanagari digits
    let deva_line = counts.devanagari_majority()
        || (counts.total() == 0 && line.chars().any(script::is_devanagari_digit));
    let mut out = line.to_owned();
    for rule in &table.rules {
        if rule.mode == RepairMode::Aggressive && !opts.aggressive {
            continue;
        }
        if rule.scope == RepairScope::DevanagariLine && !deva_line {
            continue;
        }
        if out.contains(&rule.from) {
            out = out.replace(&rule.from, &rule.to);
        }
    }
    if deva_line {
        out = harmonize_digits(&out);
    }
    out
}

fn normalize_pass(text: &str, opts: &NormalizeOptions, table: &RepairTable) -> String {
    let text = nfc(&text.replace("\r\n", "\n").replace('\r', "\n"));
    let text = if opts.repair_devanagari {
        let repaired: Vec<String> = text
            .split('\n')
            .map(|line| repair_line(line, table, opts))
            .collect();
        nfc(&repaired.join("\n"))
    } else {
        text
    };
    collapse_whitespace(&text)
}

const MAX_PASSES: usize = 8;

/// NFC, repair table, digit harmonization on Devanagari-majority lines, and
/// whitespace collapse, repeated until the text stops changing.
pub fn normalize_text(text: &str, opts: &NormalizeOptions, table: &RepairTable) -> String {
    let mut current = normalize_pass(text, opts, table);
    for _ in 1..MAX_PASSES {
        let next = normalize_pass(&current, opts, table);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn hyphen_break() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\S)[-\x{00AD}\x{2010}][ \t]*\n[ \t]*(\S)").unwrap())
}

/// Join words split by a hyphen at a line break. The hyphen is always
/// dropped, so genuine hyphenated compounds split across lines lose it.
pub fn dehyphenate(text: &str) -> String {
    let mut current = text.to_owned();
    loop {
        let next = hyphen_break().replace_all(&current, "$1$2").into_owned();
        if next == current {
            return current;
        }
        current = next;
    }
}

// ---------------------------------------------------------------------------
// Boilerplate

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoilerplateConfig {
    pub min_page_fraction: f64,
    pub edge_window: usize,
}

impl Default for BoilerplateConfig {
    fn default() -> Self {
        Self {
            min_page_fraction: 0.6,
            edge_window: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Edge {
    Top(usize),
    Bottom(usize),
}

/// Case-folded, whitespace-collapsed line with every digit run masked to `#`.
pub fn boilerplate_key(line: &str) -> String {
    let folded = nfc(line).to_lowercase();
    let mut out = String::new();
    let mut in_digits = false;
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            if c.is_numeric() {
                if !in_digits {
                    out.push('#');
                }
                in_digits = true;
            } else {
                out.push(c);
                in_digits = false;
            }
        }
        in_digits = false;
    }
    out
}

fn edge_lines(page: &RawPage, window: usize) -> Vec<(Edge, usize)> {
    let non_blank: Vec<usize> = page
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.text.trim().is_empty())
        .map(|(i, _)| i)
        .collect();
    let w = window.min(non_blank.len());
    let mut out = Vec::with_capacity(2 * w);
    for j in 0..w {
        out.push((Edge::Top(j), non_blank[j]));
        out.push((Edge::Bottom(j), non_blank[non_blank.len() - 1 - j]));
    }
    out
}

/// Remove lines that repeat at the same edge position on enough pages.
pub fn strip_boilerplate(pages: &[RawPage], config: &BoilerplateConfig) -> Vec<RawPage> {
    if pages.len() < 2 {
        return pages.to_vec();
    }
    let mut counts: BTreeMap<(Edge, String), usize> = BTreeMap::new();
    for page in pages {
        let mut seen = HashSet::new();
        for (edge, idx) in edge_lines(page, config.edge_window) {
            let key = boilerplate_key(&page.lines[idx].text);
            if seen.insert((edge, key.clone())) {
                *counts.entry((edge, key)).or_default() += 1;
            }
        }
    }
    let needed = config.min_page_fraction * pages.len() as f64;
    let is_boilerplate =
        |edge: Edge, key: &str| counts.get(&(edge, key.to_owned())).is_some_and(|&n| n as f64 >= needed - 1e-9);

    pages
        .iter()
        .map(|page| {
            let drop: HashSet<usize> = edge_lines(page, config.edge_window)
                .into_iter()
                .filter(|&(edge, idx)| is_boilerplate(edge, &boilerplate_key(&page.lines[idx].text)))
                .map(|(_, idx)| idx)
                .collect();
            RawPage {
                entry_id: page.entry_id.clone(),
                page_no: page.page_no,
                lines: page
                    .lines
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !drop.contains(i))
                    .map(|(_, l)| l.clone())
                    .collect(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Language tagging

/// Script by letter majority (80%), then stopword and danda density within
/// Devanagari: Hindi at one Hindi stopword per 50 tokens, Marathi when its
/// stopwords reach that density and outnumber Sanskrit ones, Sanskrit on one
/// danda per 100 characters or any Sanskrit stopword, otherwise Hindi.
pub fn tag_language(text: &str, stopwords: &Stopwords) -> LangTag {
    let counts = ScriptCounts::of(text);
    let total = counts.total();
    if total == 0 {
        return LangTag::Und;
    }
    if counts.latin * 5 >= total * 4 {
        return LangTag::EnLatn;
    }
    if counts.devanagari * 5 < total * 4 {
        return LangTag::Und;
    }
    let tokens = tokenize(text);
    let n = tokens.len();
    let hits = |set: &HashSet<String>| tokens.iter().filter(|t| set.contains(*t)).count();
    let (hi, mr, san) = (hits(&stopwords.hi), hits(&stopwords.mr), hits(&stopwords.san));
    if hi > 0 && hi * 50 >= n {
        return LangTag::HiDeva;
    }
    if mr > 0 && mr * 50 >= n && mr > san {
        return LangTag::MrDeva;
    }
    let dandas = text.chars().filter(|&c| script::is_danda(c)).count();
    let chars = text.chars().count();
    if (dandas > 0 && dandas * 100 >= chars) || san > 0 {
        return LangTag::SanDeva;
    }
    LangTag::HiDeva
}

// ---------------------------------------------------------------------------
// Segmentation

/// Normalization bound to a set of lexicons.
#[derive(Debug, Clone, Copy)]
pub struct Normalizer<'a> {
    pub repair: &'a RepairTable,
    pub stopwords: &'a Stopwords,
    pub divisions: &'a DivisionLexicon,
    pub opts: NormalizeOptions,
    pub boilerplate: BoilerplateConfig,
}

impl<'a> Normalizer<'a> {
    pub fn new(lexicons: &'a Lexicons, opts: NormalizeOptions) -> Self {
        Self {
            repair: &lexicons.repair,
            stopwords: &lexicons.stopwords,
            divisions: &lexicons.divisions,
            opts,
            boilerplate: BoilerplateConfig::default(),
        }
    }

    pub fn normalize_text(&self, text: &str) -> String {
        normalize_text(text, &self.opts, self.repair)
    }

    /// One-line passage text: normalize, de-hyphenate, flatten line breaks.
    pub fn flatten(&self, text: &str) -> String {
        let text = dehyphenate(&self.normalize_text(text));
        self.normalize_text(&text.replace('\n', " "))
    }

    /// Normalized single-line text of a page, used for page-level dedup.
    pub fn page_text(&self, page: &RawPage) -> String {
        self.flatten(&page.joined_text())
    }

    pub fn tag_language(&self, text: &str) -> LangTag {
        tag_language(text, self.stopwords)
    }

    /// Split pages of one edition into tagged passages. Pages are taken in
    /// page order; paragraphs may run across page breaks.
    pub fn segment_and_tag(&self, pages: &[RawPage]) -> Vec<Passage> {
        let mut pages: Vec<&RawPage> = pages.iter().collect();
        pages.sort_by(|a, b| (&a.entry_id, a.page_no).cmp(&(&b.entry_id, b.page_no)));

        let mut paragraphs: Vec<(String, Vec<(u32, &str)>)> = Vec::new();
        let mut current: Vec<(u32, &str)> = Vec::new();
        let mut current_entry: Option<&str> = None;
        for page in &pages {
            if current_entry.is_some_and(|e| e != page.entry_id) && !current.is_empty() {
                paragraphs.push((current_entry.unwrap_or_default().to_owned(), std::mem::take(&mut current)));
            }
            current_entry = Some(&page.entry_id);
            for line in &page.lines {
                if line.text.trim().is_empty() {
                    if !current.is_empty() {
                        paragraphs.push((page.entry_id.clone(), std::mem::take(&mut current)));
                    }
                } else {
                    current.push((page.page_no, &line.text));
                }
            }
        }
        if !current.is_empty() {
            paragraphs.push((current_entry.unwrap_or_default().to_owned(), current));
        }

        let mut passages = Vec::new();
        let mut division: Option<(String, String)> = None;
        let mut seq: BTreeMap<String, usize> = BTreeMap::new();
        for (entry_id, lines) in paragraphs {
            if division.as_ref().is_some_and(|(e, _)| *e != entry_id) {
                division = None;
            }
            // a heading on the first line opens its own paragraph
            let heading = self.divisions.match_heading(&self.normalize_text(lines[0].1));
            let chunks: Vec<(&[(u32, &str)], bool)> = match heading {
                Some(_) if lines.len() > 1 => vec![(&lines[..1], true), (&lines[1..], false)],
                Some(_) => vec![(&lines[..], true)],
                None => vec![(&lines[..], false)],
            };
            for (chunk, is_heading) in chunks {
                if is_heading {
                    division = heading.map(|name| (entry_id.clone(), name.to_owned()));
                }
                let raw = chunk.iter().map(|(_, t)| *t).collect::<Vec<_>>().join("\n");
                let text = self.flatten(&raw);
                if text.is_empty() {
                    continue;
                }
                let n = seq.entry(entry_id.clone()).or_default();
                passages.push(Passage {
                    passage_id: format!("{entry_id}/{:04}", *n),
                    entry_id: entry_id.clone(),
                    page_span: (chunk[0].0, chunk[chunk.len() - 1].0),
                    lang: self.tag_language(&text),
                    division: division.as_ref().map(|(_, d)| d.clone()),
                    text,
                });
                *n += 1;
            }
        }
        passages
    }

    /// Boilerplate stripping followed by segmentation.
    pub fn process_document(&self, pages: &[RawPage]) -> Vec<Passage> {
        self.segment_and_tag(&strip_boilerplate(pages, &self.boilerplate))
    }
}
