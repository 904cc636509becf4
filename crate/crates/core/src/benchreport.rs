//! Accuracy breakdowns for multiple-choice benchmark predictions.
//!
//! Counting is exact; percentages are rounded half-up to two decimals with
//! integer arithmetic so the printed tables never drift from the counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("no records for facet {0}")]
    EmptyFacet(Facet),
    #[error("group {0} has count 0")]
    ZeroCount(usize),
    #[error("no groups to combine")]
    EmptyInput,
    #[error("no prediction for question `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("question `{0}` appears twice")]
    DuplicateQuestion(String),
    #[error("question `{question_id}`: label `{label}` is not one of its options")]
    LabelOutsideOptions { question_id: String, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchLang {
    En,
    Hi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// Declaration order is the table row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    AssertionReasoning,
    FillBlanks,
    #[serde(rename = "MCQ")]
    Mcq,
    MatchColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Overall,
    Language,
    Difficulty,
    Qtype,
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Facet::Overall => "overall",
            Facet::Language => "language",
            Facet::Difficulty => "difficulty",
            Facet::Qtype => "qtype",
        })
    }
}

impl FromStr for Facet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overall" => Ok(Facet::Overall),
            "language" => Ok(Facet::Language),
            "difficulty" => Ok(Facet::Difficulty),
            "qtype" => Ok(Facet::Qtype),
            _ => Err(format!("unknown facet `{s}` (overall|language|difficulty|qtype)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRecord {
    pub question_id: String,
    pub language: BenchLang,
    pub difficulty: Difficulty,
    pub qtype: QuestionType,
    pub options: Vec<String>,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub question_id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub question_id: String,
    pub language: BenchLang,
    pub difficulty: Difficulty,
    pub qtype: QuestionType,
    pub gold: String,
    pub prediction: String,
}

impl BenchRecord {
    pub fn correct(&self) -> bool {
        self.gold == self.prediction
    }
}

/// Join answer key and predictions on question id.
pub fn join_predictions(gold: &[GoldRecord], preds: &[PredictionRecord]) -> Result<Vec<BenchRecord>, BenchError> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if by_id.insert(&p.question_id, p).is_some() {
            return Err(BenchError::DuplicateQuestion(p.question_id.clone()));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        if !seen.insert(g.question_id.as_str()) {
            return Err(BenchError::DuplicateQuestion(g.question_id.clone()));
        }
        if !g.options.contains(&g.gold) {
            return Err(BenchError::LabelOutsideOptions {
                question_id: g.question_id.clone(),
                label: g.gold.clone(),
            });
        }
        let p = by_id
            .remove(g.question_id.as_str())
            .ok_or_else(|| BenchError::MissingPrediction(g.question_id.clone()))?;
        if !g.options.contains(&p.prediction) {
            return Err(BenchError::LabelOutsideOptions {
                question_id: g.question_id.clone(),
                label: p.prediction.clone(),
            });
        }
        out.push(BenchRecord {
            question_id: g.question_id.clone(),
            language: g.language,
            difficulty: g.difficulty,
            qtype: g.qtype,
            gold: g.gold.clone(),
            prediction: p.prediction.clone(),
        });
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(BenchError::UnknownQuestion(extra.to_string()));
    }
    Ok(out)
}

/// Accuracy as an integer number of hundredths of a percent, rounded half
/// up. `correct <= count`, `count > 0`.
pub fn accuracy_hundredths(correct: u64, count: u64) -> u64 {
    (20_000 * correct + count) / (2 * count)
}

pub fn format_hundredths(h: u64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub key: String,
    pub correct: u64,
    pub count: u64,
    /// Percent, two decimals.
    pub accuracy: f64,
    pub accuracy_text: String,
}

impl BreakdownRow {
    fn new(key: String, correct: u64, count: u64) -> Self {
        let h = accuracy_hundredths(correct, count);
        Self {
            key,
            correct,
            count,
            accuracy: h as f64 / 100.0,
            accuracy_text: format_hundredths(h),
        }
    }

    pub fn exact_accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub facet: Facet,
    pub rows: Vec<BreakdownRow>,
}

fn facet_key(r: &BenchRecord, facet: Facet) -> (u8, &'static str) {
    match facet {
        Facet::Overall => (0, "Overall"),
        Facet::Language => match r.language {
            BenchLang::En => (0, "English"),
            BenchLang::Hi => (1, "Hindi"),
        },
        Facet::Difficulty => match r.difficulty {
            Difficulty::Easy => (0, "Easy"),
            Difficulty::Medium => (1, "Medium"),
            Difficulty::Hard => (2, "Hard"),
        },
        Facet::Qtype => match r.qtype {
            QuestionType::AssertionReasoning => (0, "Assert./Reason."),
            QuestionType::FillBlanks => (1, "Fill blanks"),
            QuestionType::Mcq => (2, "MCQ"),
            QuestionType::MatchColumn => (3, "Match col."),
        },
    }
}

/// Rows in the fixed facet order; values with no records are omitted.
pub fn score_breakdown(records: &[BenchRecord], facet: Facet) -> Result<BreakdownTable, BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyFacet(facet));
    }
    let mut groups: BTreeMap<(u8, &'static str), (u64, u64)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(facet_key(r, facet)).or_default();
        g.0 += u64::from(r.correct());
        g.1 += 1;
    }
    Ok(BreakdownTable {
        facet,
        rows: groups
            .into_iter()
            .map(|((_, k), (c, n))| BreakdownRow::new(k.to_string(), c, n))
            .collect(),
    })
}

/// Count-weighted mean of group accuracies.
pub fn weighted_combine(groups: &[(f64, u64)]) -> Result<f64, BenchError> {
    if groups.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    if let Some(i) = groups.iter().position(|(_, n)| *n == 0) {
        return Err(BenchError::ZeroCount(i));
    }
    let total: u64 = groups.iter().map(|(_, n)| n).sum();
    Ok(groups.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / total as f64)
}

/// One model's scores, for multi-model tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub records: Vec<BenchRecord>,
}

fn lookup(t: &BreakdownTable, key: &str) -> String {
    t.rows
        .iter()
        .find(|r| r.key == key)
        .map_or_else(|| "-".to_string(), |r| r.accuracy_text.clone())
}

fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pad = " ".repeat(width[i] - c.chars().count());
                if i == 0 {
                    format!("{c}{pad}")
                } else {
                    format!("{pad}{c}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let rule = "-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1));
    let mut out = format!("{}\n{rule}\n", line(header));
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Models as rows, overall then per-language accuracy as columns.
pub fn overall_table(models: &[ModelScores]) -> Result<String, BenchError> {
    let header: Vec<String> = ["Model", "Overall", "English", "Hindi"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for m in models {
        let overall = score_breakdown(&m.records, Facet::Overall)?;
        let lang = score_breakdown(&m.records, Facet::Language)?;
        rows.push(vec![
            m.model.clone(),
            overall.rows[0].accuracy_text.clone(),
            lookup(&lang, "English"),
            lookup(&lang, "Hindi"),
        ]);
    }
    Ok(render_grid(&header, &rows))
}

/// Facet values as rows, one column per model.
pub fn facet_table(models: &[ModelScores], facet: Facet) -> Result<String, BenchError> {
    let keys: &[&str] = match facet {
        Facet::Overall => &["Overall"],
        Facet::Language => &["English", "Hindi"],
        Facet::Difficulty => &["Easy", "Medium", "Hard"],
        Facet::Qtype => &["Assert./Reason.", "Fill blanks", "MCQ", "Match col."],
    };
    let first = match facet {
        Facet::Difficulty => "Difficulty",
        Facet::Qtype => "Type",
        Facet::Language => "Language",
        Facet::Overall => "",
    };
    let tables = models
        .iter()
        .map(|m| score_breakdown(&m.records, facet))
        .collect::<Result<Vec<_>, _>>()?;
    let mut header = vec![first.to_string()];
    header.extend(models.iter().map(|m| m.model.clone()));
    let rows: Vec<Vec<String>> = keys
        .iter()
        .map(|k| {
            let mut row = vec![k.to_string()];
            row.extend(tables.iter().map(|t| lookup(t, k)));
            row
        })
        .collect();
    Ok(render_grid(&header, &rows))
}
