//! Domain taxonomy, keyword tagging, per-domain quotas and distribution
//! reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dedup::hash_bytes;
use crate::normalize::Passage;
use crate::script::{is_devanagari, nfc, tokenize};
use crate::types::{DomainId, LangTag, UNASSIGNED};

/// Groups the taxonomy must cover.
pub const REQUIRED_GROUPS: [&str; 7] = [
    "Foundations",
    "Anatomy and Physiology",
    "Classical Compendia",
    "Clinical Disciplines",
    "Pharmacology and Formulations",
    "Pathology and Toxicology",
    "Specialties",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("duplicate domain id `{0}`")]
    DuplicateDomain(String),
    #[error("domain `{domain}` names unknown group `{group}`")]
    UnknownGroup { domain: String, group: String },
    #[error("group `{0}` has no domains")]
    EmptyGroup(String),
    #[error("required group `{0}` missing")]
    MissingGroup(String),
    #[error("domain id `{0}` is reserved")]
    ReservedId(String),
    #[error("quota for `{domain}`: minimum {min} exceeds maximum {max}")]
    QuotaBounds { domain: String, min: usize, max: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordLexicon {
    #[serde(default)]
    pub deva: Vec<String>,
    #[serde(default)]
    pub iast: Vec<String>,
    #[serde(default)]
    pub latin: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainNode {
    pub id: DomainId,
    pub display_name: String,
    pub group: String,
    #[serde(default)]
    pub high_stakes: bool,
    #[serde(flatten)]
    pub keywords: KeywordLexicon,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    groups: Vec<String>,
    #[serde(rename = "domain")]
    domains: Vec<DomainNode>,
}

#[derive(Debug, Clone)]
struct Matcher {
    substrings: Vec<String>,
    token_runs: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub groups: Vec<String>,
    pub domains: Vec<DomainNode>,
    matchers: Vec<Matcher>,
}

impl Taxonomy {
    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::new(file.groups, file.domains)
    }

    pub fn new(groups: Vec<String>, domains: Vec<DomainNode>) -> Result<Self, TaxonomyError> {
        for g in REQUIRED_GROUPS {
            if !groups.iter().any(|x| x == g) {
                return Err(TaxonomyError::MissingGroup(g.into()));
            }
        }
        let mut seen = BTreeSet::new();
        for d in &domains {
            if d.id == UNASSIGNED {
                return Err(TaxonomyError::ReservedId(d.id.clone()));
            }
            if !seen.insert(d.id.as_str()) {
                return Err(TaxonomyError::DuplicateDomain(d.id.clone()));
            }
            if !groups.contains(&d.group) {
                return Err(TaxonomyError::UnknownGroup {
                    domain: d.id.clone(),
                    group: d.group.clone(),
                });
            }
        }
        for g in &groups {
            if !domains.iter().any(|d| &d.group == g) {
                return Err(TaxonomyError::EmptyGroup(g.clone()));
            }
        }
        let matchers = domains.iter().map(|d| build_matcher(&d.keywords)).collect();
        Ok(Self {
            groups,
            domains,
            matchers,
        })
    }

    pub fn domain(&self, id: &str) -> Option<&DomainNode> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn is_high_stakes(&self, id: &str) -> Option<bool> {
        if id == UNASSIGNED {
            return Some(false);
        }
        self.domain(id).map(|d| d.high_stakes)
    }

    /// Keyword hits per domain, only for domains with at least one hit.
    pub fn keyword_hits(&self, text: &str) -> BTreeMap<DomainId, usize> {
        let text = nfc(text);
        let lowered = text.to_lowercase();
        let tokens = tokenize(&text);
        let mut hits = BTreeMap::new();
        for (d, m) in self.domains.iter().zip(&self.matchers) {
            let n: usize = m
                .substrings
                .iter()
                .map(|k| lowered.matches(k.as_str()).count())
                .sum::<usize>()
                + m.token_runs.iter().map(|run| count_runs(&tokens, run)).sum::<usize>();
            if n > 0 {
                hits.insert(d.id.clone(), n);
            }
        }
        hits
    }

    pub fn assign_text(&self, text: &str) -> DomainId {
        pick_domain(&self.keyword_hits(text))
    }
}

fn build_matcher(k: &KeywordLexicon) -> Matcher {
    let mut substrings = BTreeSet::new();
    let mut token_runs = BTreeSet::new();
    for kw in k.deva.iter().chain(&k.iast).chain(&k.latin) {
        let kw = nfc(kw.trim());
        if kw.is_empty() {
            continue;
        }
        if kw.chars().any(is_devanagari) {
            substrings.insert(kw.to_lowercase());
        } else {
            let run = tokenize(&kw);
            if !run.is_empty() {
                token_runs.insert(run);
            }
        }
    }
    Matcher {
        substrings: substrings.into_iter().collect(),
        token_runs: token_runs.into_iter().collect(),
    }
}

fn count_runs(tokens: &[String], run: &[String]) -> usize {
    if run.len() > tokens.len() {
        return 0;
    }
    tokens.windows(run.len()).filter(|w| *w == run).count()
}

/// Most hits wins; equal counts go to the lexicographically smallest id.
pub fn pick_domain(hits: &BTreeMap<DomainId, usize>) -> DomainId {
    hits.iter()
        .filter(|(_, &n)| n > 0)
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(id, _)| id.clone())
        .unwrap_or_else(|| UNASSIGNED.to_string())
}

pub fn assign_domain(p: &Passage, taxonomy: &Taxonomy) -> DomainId {
    taxonomy.assign_text(&p.text)
}

/// Anything that can go through quota selection and distribution reports.
pub trait Tagged {
    fn domain(&self) -> &str;
    fn lang(&self) -> LangTag;
    /// Sort key that fixes the order items are sampled from.
    fn stable_key(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedPassage {
    #[serde(flatten)]
    pub passage: Passage,
    pub domain: DomainId,
}

impl Tagged for TaggedPassage {
    fn domain(&self) -> &str {
        &self.domain
    }
    fn lang(&self) -> LangTag {
        self.passage.lang
    }
    fn stable_key(&self) -> String {
        self.passage.passage_id.clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotaConfig {
    pub max: BTreeMap<DomainId, usize>,
    pub min: BTreeMap<DomainId, usize>,
    /// Cap for domains absent from `max`; `None` means uncapped.
    pub default_max: Option<usize>,
}

impl QuotaConfig {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        for (d, &min) in &self.min {
            if let Some(max) = self.cap(d) {
                if min > max {
                    return Err(TaxonomyError::QuotaBounds {
                        domain: d.clone(),
                        min,
                        max,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn cap(&self, domain: &str) -> Option<usize> {
        self.max.get(domain).copied().or(self.default_max)
    }

    /// Caps proportional to supply that add up to `total` (largest
    /// remainder, ties to the smaller id).
    pub fn proportional(supply: &BTreeMap<DomainId, usize>, total: usize) -> Self {
        let all: usize = supply.values().sum();
        let mut max = BTreeMap::new();
        if all == 0 {
            return Self {
                max: supply.keys().map(|d| (d.clone(), 0)).collect(),
                ..Self::default()
            };
        }
        let total = total.min(all);
        let mut rema = Vec::new();
        let mut given = 0;
        for (d, &s) in supply {
            let exact = s as u128 * total as u128;
            let floor = (exact / all as u128) as usize;
            rema.push((exact % all as u128, d.clone()));
            given += floor;
            max.insert(d.clone(), floor);
        }
        rema.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (_, d) in rema.into_iter().take(total - given) {
            *max.get_mut(&d).unwrap() += 1;
        }
        Self {
            max,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSkew {
    pub supply: usize,
    pub quota: Option<usize>,
    pub selected: usize,
    pub deficit: usize,
    pub below_min: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkewReport {
    pub domains: BTreeMap<DomainId, DomainSkew>,
}

impl SkewReport {
    pub fn deficits(&self) -> BTreeMap<DomainId, usize> {
        self.domains
            .iter()
            .filter(|(_, s)| s.deficit > 0)
            .map(|(d, s)| (d.clone(), s.deficit))
            .collect()
    }
}

/// Per domain, keep a seeded sample of `min(supply, quota)` items. Output is
/// ordered by stable key. Domains listed in the config but with no supply
/// still appear in the report.
pub fn enforce_quotas<T: Tagged + Clone>(
    items: &[T],
    quotas: &QuotaConfig,
    seed: u64,
) -> (Vec<T>, SkewReport) {
    let mut by_domain: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for d in quotas.max.keys().chain(quotas.min.keys()) {
        by_domain.entry(d.as_str()).or_default();
    }
    for it in items {
        by_domain.entry(it.domain()).or_default().push(it);
    }
    let mut selected: Vec<(String, T)> = Vec::new();
    let mut report = SkewReport::default();
    for (domain, mut group) in by_domain {
        group.sort_by_key(|it| it.stable_key());
        let supply = group.len();
        let quota = quotas.cap(domain);
        let take = quota.map_or(supply, |q| q.min(supply));
        if take < supply {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_bytes(domain.as_bytes()));
            group.shuffle(&mut rng);
        }
        for it in group.into_iter().take(take) {
            selected.push((it.stable_key(), it.clone()));
        }
        let min = quotas.min.get(domain).copied().unwrap_or(0);
        report.domains.insert(
            domain.to_string(),
            DomainSkew {
                supply,
                quota,
                selected: take,
                deficit: quota.map_or(0, |q| q.saturating_sub(supply)),
                below_min: min.saturating_sub(take),
            },
        );
    }
    selected.sort_by(|a, b| a.0.cmp(&b.0));
    (selected.into_iter().map(|(_, t)| t).collect(), report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetCount {
    pub count: usize,
    /// `None` when the report is empty.
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub total: usize,
    pub empty: bool,
    pub by_domain: BTreeMap<DomainId, FacetCount>,
    pub by_lang: BTreeMap<LangTag, FacetCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub facet: String,
    pub key: String,
    pub count: usize,
    pub fraction: Option<f64>,
}

pub fn distribution_report<T: Tagged>(items: &[T]) -> DistributionReport {
    let total = items.len();
    let mut domains: BTreeMap<DomainId, usize> = BTreeMap::new();
    let mut langs: BTreeMap<LangTag, usize> = LangTag::ALL.iter().map(|l| (*l, 0)).collect();
    for it in items {
        *domains.entry(it.domain().to_string()).or_default() += 1;
        *langs.entry(it.lang()).or_default() += 1;
    }
    let facet = |count: usize| FacetCount {
        count,
        fraction: (total > 0).then(|| count as f64 / total as f64),
    };
    DistributionReport {
        total,
        empty: total == 0,
        by_domain: domains.into_iter().map(|(k, v)| (k, facet(v))).collect(),
        by_lang: langs.into_iter().map(|(k, v)| (k, facet(v))).collect(),
    }
}

impl DistributionReport {
    pub fn rows(&self) -> Vec<DistributionRow> {
        let domain = self.by_domain.iter().map(|(k, f)| ("domain", k.clone(), f));
        let lang = self.by_lang.iter().map(|(k, f)| ("lang", k.as_str().to_string(), f));
        domain
            .chain(lang)
            .map(|(facet, key, f)| DistributionRow {
                facet: facet.into(),
                key,
                count: f.count,
                fraction: f.fraction,
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [
            (
                "Domain",
                self.by_domain.iter().map(|(k, f)| (k.clone(), f)).collect::<Vec<_>>(),
            ),
            (
                "Language",
                self.by_lang
                    .iter()
                    .map(|(k, f)| (k.as_str().to_string(), f))
                    .collect(),
            ),
        ] {
            let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0).max(title.len());
            out.push_str(&format!("{title:<width$}  {:>7}  {:>8}\n", "Count", "Share"));
            for (k, f) in rows {
                let share = f.fraction.map_or("n/a".to_string(), |x| format!("{:.2}%", x * 100.0));
                let pad = width - k.chars().count();
                out.push_str(&format!("{k}{}  {:>7}  {:>8}\n", " ".repeat(pad), f.count, share));
            }
            out.push_str(&format!("{:<width$}  {:>7}\n\n", "Total", self.total));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicons;

    #[derive(Debug, Clone, PartialEq)]
    struct It(&'static str, LangTag, u32);

    impl Tagged for It {
        fn domain(&self) -> &str {
            self.0
        }
        fn lang(&self) -> LangTag {
            self.1
        }
        fn stable_key(&self) -> String {
            format!("{:06}", self.2)
        }
    }

    fn tax() -> Taxonomy {
        Lexicons::builtin().taxonomy
    }

    #[test]
    fn builtin_covers_required_groups() {
        let t = tax();
        for g in REQUIRED_GROUPS {
            assert!(t.domains.iter().any(|d| d.group == g), "{g}");
        }
        assert!(t.is_high_stakes("ShalyaTantra").unwrap());
        assert!(t.is_high_stakes("ShalakyaTantra").unwrap());
        assert!(!t.is_high_stakes("Dravyaguna").unwrap());
        assert_eq!(t.is_high_stakes("Nope"), None);
    }

    #[test]
    fn panchakarma_keyword() {
        assert_eq!(tax().assign_text("यह पञ्चकर्म का वर्णन है"), "Panchakarma");
        assert_eq!(tax().assign_text("The sky is blue today."), UNASSIGNED);
    }

    #[test]
    fn token_runs_respect_word_boundaries() {
        let t = tax();
        // "basti" inside another word must not hit
        assert_eq!(t.assign_text("bastion walls"), UNASSIGNED);
        assert_eq!(t.assign_text("The Basti procedure"), "Panchakarma");
    }

    #[test]
    fn most_hits_then_smallest_id() {
        let hits: BTreeMap<String, usize> =
            [("Dravyaguna".to_string(), 3), ("RogNidan".to_string(), 2)].into();
        assert_eq!(pick_domain(&hits), "Dravyaguna");
        let tie: BTreeMap<String, usize> = [("B".to_string(), 2), ("A".to_string(), 2)].into();
        assert_eq!(pick_domain(&tie), "A");
        assert_eq!(pick_domain(&BTreeMap::new()), UNASSIGNED);
    }

    #[test]
    fn validation_errors() {
        let groups: Vec<String> = REQUIRED_GROUPS.iter().map(|s| s.to_string()).collect();
        let node = |id: &str, group: &str| DomainNode {
            id: id.into(),
            display_name: id.into(),
            group: group.into(),
            high_stakes: false,
            keywords: KeywordLexicon::default(),
        };
        let full: Vec<DomainNode> = REQUIRED_GROUPS
            .iter()
            .enumerate()
            .map(|(i, g)| node(&format!("D{i}"), g))
            .collect();
        assert!(Taxonomy::new(groups.clone(), full.clone()).is_ok());

        let mut dup = full.clone();
        dup.push(node("D0", "Foundations"));
        assert_eq!(
            Taxonomy::new(groups.clone(), dup).unwrap_err(),
            TaxonomyError::DuplicateDomain("D0".into())
        );
        let mut bad = full.clone();
        bad.push(node("X", "Nowhere"));
        assert!(matches!(
            Taxonomy::new(groups.clone(), bad),
            Err(TaxonomyError::UnknownGroup { .. })
        ));
        assert!(matches!(
            Taxonomy::new(groups.clone(), full[1..].to_vec()),
            Err(TaxonomyError::EmptyGroup(_))
        ));
        assert!(matches!(
            Taxonomy::new(groups[1..].to_vec(), full[1..].to_vec()),
            Err(TaxonomyError::MissingGroup(_))
        ));
    }

    #[test]
    fn quotas_cap_and_report_deficit() {
        let items = vec![
            It("A", LangTag::EnLatn, 1),
            It("A", LangTag::EnLatn, 2),
            It("A", LangTag::EnLatn, 3),
            It("B", LangTag::EnLatn, 4),
        ];
        let q = QuotaConfig {
            max: [("A".to_string(), 2), ("B".to_string(), 2)].into(),
            ..Default::default()
        };
        let (sel, rep) = enforce_quotas(&items, &q, 7);
        assert_eq!(sel.iter().filter(|i| i.0 == "A").count(), 2);
        assert_eq!(sel.iter().filter(|i| i.0 == "B").count(), 1);
        assert_eq!(rep.deficits(), BTreeMap::from([("B".to_string(), 1)]));
        let (again, _) = enforce_quotas(&items, &q, 7);
        assert_eq!(sel, again);
    }

    #[test]
    fn quotas_exact_supply_has_no_deficit() {
        let items = vec![It("A", LangTag::EnLatn, 1), It("B", LangTag::EnLatn, 2)];
        let q = QuotaConfig {
            max: [("A".to_string(), 1), ("B".to_string(), 1)].into(),
            ..Default::default()
        };
        let (sel, rep) = enforce_quotas(&items, &q, 0);
        assert_eq!(sel, items);
        assert!(rep.deficits().is_empty());
    }

    #[test]
    fn quota_min_above_max_rejected() {
        let q = QuotaConfig {
            max: [("A".to_string(), 1)].into(),
            min: [("A".to_string(), 2)].into(),
            default_max: None,
        };
        assert!(matches!(q.validate(), Err(TaxonomyError::QuotaBounds { .. })));
    }

    #[test]
    fn proportional_caps_sum_to_total() {
        let supply: BTreeMap<String, usize> =
            [("A".to_string(), 5), ("B".to_string(), 3), ("C".to_string(), 2)].into();
        let q = QuotaConfig::proportional(&supply, 5);
        assert_eq!(q.max.values().sum::<usize>(), 5);
        assert_eq!(q.max["A"], 3);
        assert_eq!(q.max["B"], 1);
        assert_eq!(q.max["C"], 1);
    }

    #[test]
    fn distribution_fractions() {
        let items = vec![
            It("A", LangTag::EnLatn, 1),
            It("A", LangTag::EnLatn, 2),
            It("B", LangTag::HiDeva, 3),
        ];
        let r = distribution_report(&items);
        assert_eq!(r.by_lang[&LangTag::EnLatn].count, 2);
        assert!((r.by_lang[&LangTag::EnLatn].fraction.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.by_lang[&LangTag::HiDeva].fraction.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let sum: f64 = r.by_domain.values().map(|f| f.fraction.unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(r.to_table().contains("Total"));

        let empty = distribution_report::<It>(&[]);
        assert!(empty.empty);
        assert!(empty.by_lang.values().all(|f| f.count == 0 && f.fraction.is_none()));
    }
}
