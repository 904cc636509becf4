//! Devanagari/Latin character classes and script-aware tokenization.

use unicode_normalization::{is_nfc, UnicodeNormalization};

pub const VIRAMA: char = '\u{094D}';
pub const NUKTA: char = '\u{093C}';
pub const DANDA: char = '\u{0964}';
pub const DOUBLE_DANDA: char = '\u{0965}';

pub fn is_devanagari(c: char) -> bool {
    ('\u{0900}'..='\u{097F}').contains(&c)
}

pub fn is_consonant(c: char) -> bool {
    matches!(c, '\u{0915}'..='\u{0939}' | '\u{0958}'..='\u{095F}' | '\u{0978}'..='\u{097F}')
}

pub fn is_independent_vowel(c: char) -> bool {
    matches!(c, '\u{0904}'..='\u{0914}' | '\u{0960}' | '\u{0961}' | '\u{0972}'..='\u{0977}')
}

/// Dependent vowel sign (matra).
pub fn is_matra(c: char) -> bool {
    matches!(
        c,
        '\u{093A}'
            | '\u{093B}'
            | '\u{093E}'..='\u{094C}'
            | '\u{094E}'
            | '\u{094F}'
            | '\u{0955}'..='\u{0957}'
            | '\u{0962}'
            | '\u{0963}'
    )
}

/// Candrabindu, anusvara, visarga.
pub fn is_vowel_modifier(c: char) -> bool {
    matches!(c, '\u{0900}'..='\u{0903}')
}

/// Any mark that must attach to a preceding base.
pub fn is_dependent_mark(c: char) -> bool {
    is_matra(c) || is_vowel_modifier(c) || c == VIRAMA || c == NUKTA
}

pub fn is_danda(c: char) -> bool {
    c == DANDA || c == DOUBLE_DANDA
}

pub fn is_devanagari_digit(c: char) -> bool {
    ('\u{0966}'..='\u{096F}').contains(&c)
}

pub fn is_latin_letter(c: char) -> bool {
    c.is_alphabetic()
        && (c.is_ascii_alphabetic()
            || ('\u{00C0}'..='\u{024F}').contains(&c)
            || ('\u{1E00}'..='\u{1EFF}').contains(&c))
}

/// Letters and marks of the Devanagari block, excluding dandas, digits and the abbreviation sign.
pub fn is_devanagari_letter(c: char) -> bool {
    is_devanagari(c) && !is_danda(c) && !is_devanagari_digit(c) && c != '\u{0970}'
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScriptCounts {
    pub devanagari: usize,
    pub latin: usize,
    pub other: usize,
}

impl ScriptCounts {
    pub fn of(text: &str) -> Self {
        let mut counts = ScriptCounts::default();
        for c in text.chars() {
            if is_devanagari_letter(c) {
                counts.devanagari += 1;
            } else if is_latin_letter(c) {
                counts.latin += 1;
            } else if c.is_alphabetic() {
                counts.other += 1;
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.devanagari + self.latin + self.other
    }

    /// More Devanagari letters than Latin ones, and at least one.
    pub fn devanagari_majority(&self) -> bool {
        self.devanagari > 0 && self.devanagari > self.latin
    }
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric()
        || is_devanagari_letter(c)
        || ('\u{0300}'..='\u{036F}').contains(&c)
        || c == '\u{200C}'
        || c == '\u{200D}'
}

/// Split on whitespace, dandas and punctuation; tokens are lowercased NFC.
pub fn tokenize(text: &str) -> Vec<String> {
    let text: String = if is_nfc(text) {
        text.to_owned()
    } else {
        text.nfc().collect()
    };
    text.split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}
