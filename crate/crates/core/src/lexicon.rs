//! Editable lexicons and tables, loaded from a directory of TOML files.
//!
//! Every file is optional; a missing file falls back to the copy built into
//! the library from `crates/core/lexicons/`.

use std::fs;
use std::path::Path;

use crate::ledger::LicenseLexicon;
use crate::normalize::{DivisionLexicon, RepairTable, Stopwords};
use crate::taxonomy::Taxonomy;
use crate::validate::BannedLexicon;

pub const LICENSE_FILE: &str = "license.toml";
pub const STOPWORDS_FILE: &str = "stopwords.toml";
pub const DIVISIONS_FILE: &str = "divisions.toml";
pub const REPAIR_FILE: &str = "repair.toml";
pub const BANNED_FILE: &str = "banned.toml";
pub const TAXONOMY_FILE: &str = "taxonomy.toml";

pub const ALL_FILES: [&str; 6] = [
    LICENSE_FILE,
    STOPWORDS_FILE,
    DIVISIONS_FILE,
    REPAIR_FILE,
    BANNED_FILE,
    TAXONOMY_FILE,
];

const BUILTIN: &[(&str, &str)] = &[
    (LICENSE_FILE, include_str!("../lexicons/license.toml")),
    (STOPWORDS_FILE, include_str!("../lexicons/stopwords.toml")),
    (DIVISIONS_FILE, include_str!("../lexicons/divisions.toml")),
    (REPAIR_FILE, include_str!("../lexicons/repair.toml")),
    (BANNED_FILE, include_str!("../lexicons/banned.toml")),
    (TAXONOMY_FILE, include_str!("../lexicons/taxonomy.toml")),
];

#[derive(Debug, thiserror::Error)]
#[error("lexicon `{file}`: {message}")]
pub struct LexiconError {
    pub file: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Lexicons {
    pub license: LicenseLexicon,
    pub stopwords: Stopwords,
    pub divisions: DivisionLexicon,
    pub repair: RepairTable,
    pub banned: BannedLexicon,
    pub taxonomy: Taxonomy,
}

pub fn builtin_text(file: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(name, _)| *name == file).map(|(_, t)| *t)
}

impl Lexicons {
    /// The lexicons bundled with the library.
    pub fn builtin() -> Self {
        Self::from_source(|file| Ok(builtin_text(file).map(str::to_owned)))
            .expect("bundled lexicons are valid")
    }

    /// Load from `dir`, falling back to the bundled copy per missing file.
    pub fn load_dir(dir: &Path) -> Result<Self, LexiconError> {
        Self::from_source(|file| {
            let path = dir.join(file);
            if path.exists() {
                fs::read_to_string(&path)
                    .map(Some)
                    .map_err(|e| LexiconError {
                        file: path.display().to_string(),
                        message: e.to_string(),
                    })
            } else {
                Ok(builtin_text(file).map(str::to_owned))
            }
        })
    }

    fn from_source<F>(mut read: F) -> Result<Self, LexiconError>
    where
        F: FnMut(&str) -> Result<Option<String>, LexiconError>,
    {
        let mut text = |file: &str| -> Result<String, LexiconError> {
            read(file)?.ok_or_else(|| LexiconError {
                file: file.into(),
                message: "missing".into(),
            })
        };
        let wrap = |file: &str| {
            let file = file.to_owned();
            move |e: String| LexiconError { file, message: e }
        };
        Ok(Lexicons {
            license: LicenseLexicon::from_toml(&text(LICENSE_FILE)?)
                .map_err(|e| wrap(LICENSE_FILE)(e.to_string()))?,
            stopwords: Stopwords::from_toml(&text(STOPWORDS_FILE)?).map_err(wrap(STOPWORDS_FILE))?,
            divisions: DivisionLexicon::from_toml(&text(DIVISIONS_FILE)?)
                .map_err(wrap(DIVISIONS_FILE))?,
            repair: RepairTable::from_toml(&text(REPAIR_FILE)?).map_err(wrap(REPAIR_FILE))?,
            banned: BannedLexicon::from_toml(&text(BANNED_FILE)?).map_err(wrap(BANNED_FILE))?,
            taxonomy: Taxonomy::from_toml(&text(TAXONOMY_FILE)?)
                .map_err(|e| wrap(TAXONOMY_FILE)(e.to_string()))?,
        })
    }
}
