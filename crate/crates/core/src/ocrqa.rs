//! Page quality signals and accept / strict-clean / exclude routing.
//!
//! Three signals per page: line-confidence statistics, a lexicon-free
//! character error estimate (share of sampled grapheme clusters that break
//! Devanagari combining rules), and Indic anomaly counts.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::dedup::hash_bytes;
use crate::normalize::{tag_language, RawPage, Stopwords};
use crate::script::{
    is_consonant, is_danda, is_dependent_mark, is_devanagari_letter, is_independent_vowel, is_matra,
    is_vowel_modifier, ScriptCounts, NUKTA, VIRAMA,
};
use crate::types::{LangTag, PageRef};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OcrQaError {
    #[error("page {0} has no lines")]
    EmptyPage(PageRef),
    #[error("sample rate {0} outside (0, 1]")]
    InvalidSampleRate(f64),
    #[error("accept_min {accept_min} must exceed exclude_max {exclude_max}")]
    InvalidThresholds { accept_min: f64, exclude_max: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyCounts {
    pub matra_anomalies: usize,
    pub danda_deficit: usize,
    pub akshara_merge_suspects: usize,
}

impl AnomalyCounts {
    pub fn total(&self) -> usize {
        self.matra_anomalies + self.danda_deficit + self.akshara_merge_suspects
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageQuality {
    pub page_ref: PageRef,
    pub mean_conf: f64,
    pub median_conf: f64,
    pub cer_estimate: f64,
    pub sampled_clusters: usize,
    pub invalid_clusters: usize,
    pub lang: LangTag,
    pub anomalies: AnomalyCounts,
}

/// Ordered worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Route {
    Exclude,
    StrictClean,
    Accept,
}

impl Route {
    pub fn downgrade(self) -> Route {
        match self {
            Route::Accept => Route::StrictClean,
            Route::StrictClean | Route::Exclude => Route::Exclude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteThresholds {
    pub accept_min: f64,
    pub exclude_max: f64,
    /// CER above this downgrades the route by one level.
    pub cer_max: f64,
}

impl Default for RouteThresholds {
    fn default() -> Self {
        Self {
            accept_min: 0.80,
            exclude_max: 0.55,
            cer_max: 0.15,
        }
    }
}

impl RouteThresholds {
    pub fn validate(&self) -> Result<(), OcrQaError> {
        if self.accept_min > self.exclude_max {
            Ok(())
        } else {
            Err(OcrQaError::InvalidThresholds {
                accept_min: self.accept_min,
                exclude_max: self.exclude_max,
            })
        }
    }
}

/// True when a grapheme cluster breaks Devanagari combining rules: it starts
/// with a dependent mark, stacks two vowel signs, or attaches a sign to
/// something that cannot carry it.
pub fn is_invalid_cluster(cluster: &str) -> bool {
    let mut prev: Option<char> = None;
    for c in cluster.chars() {
        if is_dependent_mark(c) && !valid_after(prev, c) {
            return true;
        }
        prev = Some(c);
    }
    false
}

fn valid_after(prev: Option<char>, mark: char) -> bool {
    let Some(p) = prev else { return false };
    if is_matra(mark) || mark == VIRAMA {
        is_consonant(p) || p == NUKTA
    } else if mark == NUKTA {
        is_consonant(p)
    } else if is_vowel_modifier(mark) {
        is_consonant(p) || p == NUKTA || is_matra(p) || is_independent_vowel(p)
    } else {
        true
    }
}

/// Anomaly counts for a block of text. The danda check only runs for
/// Sanskrit (`lang == san-Deva`): every Devanagari line is a verse line and
/// should end in a danda, ignoring trailing verse numbers.
pub fn detect_indic_anomalies(text: &str, lang: LangTag) -> AnomalyCounts {
    let mut counts = AnomalyCounts::default();

    let mut prev: Option<char> = None;
    for c in text.chars() {
        if is_dependent_mark(c) && !valid_after(prev, c) {
            counts.matra_anomalies += 1;
        }
        prev = Some(c);
    }

    // runs of consonants joined by virama
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !is_consonant(chars[i]) {
            i += 1;
            continue;
        }
        let mut consonants = 1;
        let mut j = i + 1;
        loop {
            if j < chars.len() && chars[j] == NUKTA {
                j += 1;
            }
            if j + 1 < chars.len() && chars[j] == VIRAMA && is_consonant(chars[j + 1]) {
                consonants += 1;
                j += 2;
            } else {
                break;
            }
        }
        if consonants >= 4 {
            counts.akshara_merge_suspects += 1;
        }
        i = j.max(i + 1);
    }

    if lang == LangTag::SanDeva {
        counts.danda_deficit = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && ScriptCounts::of(l).devanagari_majority())
            .filter(|l| {
                let tail = l.trim_end_matches(|c: char| c.is_numeric() || c.is_whitespace() || is_danda(c));
                // a line that ends in a danda has stripped something off
                let ended = l[tail.len()..].chars().any(is_danda);
                !ended
            })
            .count();
    }
    counts
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Measure one page. Clusters are sampled without replacement with a
/// generator seeded from `seed` and the page reference; `sample_rate = 1`
/// inspects every non-whitespace cluster.
pub fn page_quality(
    page: &RawPage,
    sample_rate: f64,
    seed: u64,
    stopwords: &Stopwords,
) -> Result<PageQuality, OcrQaError> {
    let page_ref = page.page_ref();
    if page.lines.is_empty() {
        return Err(OcrQaError::EmptyPage(page_ref));
    }
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(OcrQaError::InvalidSampleRate(sample_rate));
    }
    let mut confs: Vec<f64> = page.lines.iter().map(|l| l.confidence.clamp(0.0, 1.0)).collect();
    confs.sort_by(f64::total_cmp);
    let mean_conf = confs.iter().sum::<f64>() / confs.len() as f64;
    let median_conf = median(&confs);

    let text = page.joined_text();
    let clusters: Vec<&str> = text
        .graphemes(true)
        .filter(|g| !g.chars().all(char::is_whitespace))
        .collect();
    let sampled: Vec<&str> = if sample_rate >= 1.0 || clusters.is_empty() {
        clusters.clone()
    } else {
        let m = ((clusters.len() as f64 * sample_rate).ceil() as usize).clamp(1, clusters.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_bytes(page_ref.to_string().as_bytes()));
        let mut picked = index::sample(&mut rng, clusters.len(), m).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| clusters[i]).collect()
    };
    let invalid = sampled.iter().filter(|g| is_invalid_cluster(g)).count();
    let cer_estimate = if sampled.is_empty() {
        0.0
    } else {
        invalid as f64 / sampled.len() as f64
    };
    let lang = tag_language(&text, stopwords);
    Ok(PageQuality {
        page_ref,
        mean_conf,
        median_conf,
        cer_estimate,
        sampled_clusters: sampled.len(),
        invalid_clusters: invalid,
        lang,
        anomalies: detect_indic_anomalies(&text, lang),
    })
}

pub fn route_page(q: &PageQuality, thresholds: &RouteThresholds) -> Result<Route, OcrQaError> {
    thresholds.validate()?;
    let route = if q.mean_conf >= thresholds.accept_min {
        Route::Accept
    } else if q.mean_conf < thresholds.exclude_max {
        Route::Exclude
    } else {
        Route::StrictClean
    };
    Ok(if q.cer_estimate > thresholds.cer_max {
        route.downgrade()
    } else {
        route
    })
}

/// One row of the quality report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    #[serde(flatten)]
    pub quality: PageQuality,
    pub route: Route,
}

pub fn devanagari_share(text: &str) -> f64 {
    let total = text.chars().filter(|c| c.is_alphabetic() || is_devanagari_letter(*c)).count();
    if total == 0 {
        0.0
    } else {
        ScriptCounts::of(text).devanagari as f64 / total as f64
    }
}
