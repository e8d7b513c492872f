//! Character-level vocabulary and numeric span detection.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

const DIGITS: [char; 10] = ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9'];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("symbol {0:?} appears more than once")]
    Duplicate(String),
    #[error("required symbol {0:?} is missing")]
    Missing(String),
    #[error("symbol {0:?} is neither a single character nor a marker")]
    BadSymbol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered symbol table. Every symbol is one character except the
/// begin/end/pad markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    char_ids: HashMap<char, usize>,
    digit_ids: [usize; 10],
    point_id: usize,
    bos_id: usize,
    eos_id: usize,
    pad_id: usize,
}

impl Default for Vocabulary {
    /// Markers, digits, the decimal point, arithmetic and clock punctuation,
    /// space, and lowercase letters.
    fn default() -> Self {
        let mut symbols: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        symbols.extend(DIGITS.iter().map(|c| c.to_string()));
        symbols.extend(".+-*/=_, ".chars().map(String::from));
        symbols.extend(('a'..='z').map(String::from));
        Self::from_symbols(symbols).expect("default vocabulary is well formed")
    }
}

impl Vocabulary {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, VocabError> {
        let mut char_ids = HashMap::new();
        let mut markers = HashMap::new();
        for (id, sym) in symbols.iter().enumerate() {
            let mut chars = sym.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    if char_ids.insert(c, id).is_some() {
                        return Err(VocabError::Duplicate(sym.clone()));
                    }
                }
                _ if [BOS, EOS, PAD].contains(&sym.as_str()) => {
                    if markers.insert(sym.as_str(), id).is_some() {
                        return Err(VocabError::Duplicate(sym.clone()));
                    }
                }
                _ => return Err(VocabError::BadSymbol(sym.clone())),
            }
        }
        let char_id = |c: char| char_ids.get(&c).copied().ok_or_else(|| VocabError::Missing(c.to_string()));
        let mut digit_ids = [0; 10];
        for (slot, d) in digit_ids.iter_mut().zip(DIGITS) {
            *slot = char_id(d)?;
        }
        let point_id = char_id('.')?;
        let marker = |m: &str| markers.get(m).copied().ok_or_else(|| VocabError::Missing(m.to_string()));
        Ok(Self {
            digit_ids,
            point_id,
            bos_id: marker(BOS)?,
            eos_id: marker(EOS)?,
            pad_id: marker(PAD)?,
            symbols,
            char_ids,
        })
    }

    /// Reads a vocabulary file: one symbol per line, in id order.
    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        let symbols = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect::<Vec<_>>();
        // a trailing newline leaves one empty entry behind
        let symbols = match symbols.split_last() {
            Some((last, rest)) if last.is_empty() => rest.to_vec(),
            _ => symbols,
        };
        Self::from_symbols(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Vocabulary ids of the digits '0'..='9', indexed by digit value.
    pub fn digit_token_ids(&self) -> &[usize; 10] {
        &self.digit_ids
    }

    /// Numeric value of a digit token, `None` for every other token.
    pub fn digit_value(&self, id: usize) -> Option<usize> {
        self.digit_ids.iter().position(|&d| d == id)
    }

    pub fn is_digit(&self, id: usize) -> bool {
        self.digit_value(id).is_some()
    }

    pub fn point_id(&self) -> usize {
        self.point_id
    }

    pub fn bos_id(&self) -> usize {
        self.bos_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.char_indices()
            .map(|(offset, ch)| {
                self.char_ids
                    .get(&ch)
                    .copied()
                    .ok_or(VocabError::UnknownChar { ch, offset })
            })
            .collect()
    }

    /// Markers decode to their literal names (`<eos>` etc.).
    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        ids.iter()
            .map(|&id| self.symbols.get(id).map(String::as_str).ok_or(VocabError::UnknownId(id)))
            .collect()
    }

    /// Numeric value of the text covered by `span`.
    pub fn span_value(&self, ids: &[usize], span: &DigitSpan) -> Result<f64, VocabError> {
        let text = self.decode(&ids[span.start..span.end])?;
        Ok(text.parse().expect("digit spans always parse as numbers"))
    }

    /// Maximal numeric runs: one or more digits, optionally a '.' and one or
    /// more further digits. A '.' without a digit on both sides never joins a
    /// span.
    pub fn find_digit_spans(&self, ids: &[usize]) -> Vec<DigitSpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            if !self.is_digit(ids[i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i < ids.len() && self.is_digit(ids[i]) {
                i += 1;
            }
            let integer_len = i - start;
            let mut decimal_pos = None;
            let mut frac_len = 0;
            if i + 1 < ids.len() && ids[i] == self.point_id && self.is_digit(ids[i + 1]) {
                decimal_pos = Some(i - start);
                i += 1;
                while i < ids.len() && self.is_digit(ids[i]) {
                    i += 1;
                    frac_len += 1;
                }
            }
            spans.push(DigitSpan {
                start,
                end: i,
                decimal_pos,
                integer_len,
                frac_len,
            });
        }
        spans
    }
}

/// A contiguous numeric run within a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DigitSpan {
    /// First token position (inclusive).
    pub start: usize,
    /// One past the last token position.
    pub end: usize,
    /// Offset of the '.' within the span.
    pub decimal_pos: Option<usize>,
    pub integer_len: usize,
    pub frac_len: usize,
}

impl DigitSpan {
    /// Integer literal without a decimal point.
    pub fn integer(start: usize, len: usize) -> Self {
        Self {
            start,
            end: start + len,
            decimal_pos: None,
            integer_len: len,
            frac_len: 0,
        }
    }

    /// Number of digit tokens (the '.' excluded).
    pub fn digit_count(&self) -> usize {
        self.integer_len + self.frac_len
    }

    /// Absolute positions of the digit tokens, left to right.
    pub fn digit_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let point = self.decimal_pos.map(|p| self.start + p);
        (self.start..self.end).filter(move |&p| Some(p) != point)
    }

    /// Power of ten carried by each digit, left to right.
    pub fn place_exponents(&self) -> impl Iterator<Item = i32> {
        let top = self.integer_len as i32 - 1;
        (0..self.digit_count() as i32).map(move |i| top - i)
    }

    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            start: self.start + offset,
            end: self.end + offset,
            ..*self
        }
    }

    /// Checks the structural invariants against a token sequence.
    pub fn is_valid_in(&self, vocab: &Vocabulary, ids: &[usize]) -> bool {
        if self.end > ids.len() || self.start >= self.end || self.integer_len == 0 {
            return false;
        }
        let point = usize::from(self.decimal_pos.is_some());
        if self.integer_len + self.frac_len + point != self.end - self.start {
            return false;
        }
        (self.start..self.end).all(|p| match self.decimal_pos {
            Some(d) if p == self.start + d => ids[p] == vocab.point_id() && d > 0 && p + 1 < self.end,
            _ => vocab.is_digit(ids[p]),
        })
    }
}
