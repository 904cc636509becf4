//! Corpus-to-dataset curation: license ledger, page dedup, OCR
//! normalization and quality routing, domain tagging, QA validation, human
//! audit, dialogue export and benchmark reporting.

pub mod audit;
pub mod benchreport;
pub mod dedup;
pub mod export;
pub mod jsonl;
pub mod ledger;
pub mod lexicon;
pub mod normalize;
pub mod ocrqa;
pub mod pipeline;
pub mod script;
pub mod taxonomy;
pub mod types;
pub mod validate;
