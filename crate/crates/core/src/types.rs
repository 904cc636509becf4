//! Identifiers and tags shared across pipeline stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Language/script tag attached to passages and items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LangTag {
    #[serde(rename = "san-Deva")]
    SanDeva,
    #[serde(rename = "hi-Deva")]
    HiDeva,
    #[serde(rename = "mr-Deva")]
    MrDeva,
    #[serde(rename = "en-Latn")]
    EnLatn,
    #[serde(rename = "und")]
    Und,
}

impl LangTag {
    pub const ALL: [LangTag; 5] = [
        LangTag::SanDeva,
        LangTag::HiDeva,
        LangTag::MrDeva,
        LangTag::EnLatn,
        LangTag::Und,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LangTag::SanDeva => "san-Deva",
            LangTag::HiDeva => "hi-Deva",
            LangTag::MrDeva => "mr-Deva",
            LangTag::EnLatn => "en-Latn",
            LangTag::Und => "und",
        }
    }

    pub fn is_devanagari(self) -> bool {
        matches!(self, LangTag::SanDeva | LangTag::HiDeva | LangTag::MrDeva)
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LangTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LangTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown language tag `{s}`"))
    }
}

/// A page of one catalogued edition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageRef {
    pub entry_id: String,
    pub page_no: u32,
}

impl PageRef {
    pub fn new(entry_id: impl Into<String>, page_no: u32) -> Self {
        Self {
            entry_id: entry_id.into(),
            page_no,
        }
    }
}

impl fmt::Display for PageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entry_id, self.page_no)
    }
}

/// Which kind of supervised example an item is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QaType {
    QaPair,
    Objective,
    MultiTurn,
    Contextual,
}

impl QaType {
    pub const ALL: [QaType; 4] = [
        QaType::QaPair,
        QaType::Objective,
        QaType::MultiTurn,
        QaType::Contextual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QaType::QaPair => "QaPair",
            QaType::Objective => "Objective",
            QaType::MultiTurn => "MultiTurn",
            QaType::Contextual => "Contextual",
        }
    }
}

impl fmt::Display for QaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QaType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QaType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown qa type `{s}`"))
    }
}

/// Domain identifier from the taxonomy. `Unassigned` is a regular value.
pub type DomainId = String;

pub const UNASSIGNED: &str = "Unassigned";
