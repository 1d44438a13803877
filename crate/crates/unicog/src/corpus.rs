//! Corpus ingestion: sentence segmentation, byte-level tokenization, JSONL loading.
//!
//! Reasoning samples are segmented into sentence units and tokenized with a
//! byte-level vocabulary (ids 0..=255 are raw bytes, plus BOS/EOS/PAD), so no
//! tokenizer training is needed and round-trips are exact.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Sentences whose byte encoding would exceed this many tokens (including
/// BOS/EOS) are hard-split; bounds the decoder context.
pub const DEFAULT_MAX_SENTENCE_TOKENS: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// Number of prediction targets (everything after BOS).
    pub fn target_len(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Byte-level encoding with BOS/EOS wrapping.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Inverse of [`tokenize`]: drops BOS/EOS/PAD, decodes the remaining bytes.
pub fn detokenize(seq: &TokenSequence) -> Result<String> {
    let mut bytes = Vec::with_capacity(seq.ids.len());
    for &id in &seq.ids {
        if id as usize >= VOCAB_SIZE {
            return Err(Error::data(format!(
                "token id {id} out of range (vocab size {VOCAB_SIZE})"
            )));
        }
        if id < 256 {
            bytes.push(id as u8);
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::data(format!("malformed byte sequence: {e}")))
}

/// Abbreviations whose trailing period is not a sentence boundary. Entries
/// keep their dots so multi-dot forms like "e.g." are matched as a whole.
const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "vs.", "etc.", "e.g.", "i.e.",
    "cf.", "al.", "fig.", "eq.", "no.", "vol.", "approx.", "dept.", "inc.", "est.",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '\n')
}

/// True when the period at byte offset `idx` sits between two digits ("3.14").
fn inside_decimal(bytes: &[u8], idx: usize) -> bool {
    idx > 0
        && idx + 1 < bytes.len()
        && bytes[idx - 1].is_ascii_digit()
        && bytes[idx + 1].is_ascii_digit()
}

/// True when the period at byte offset `idx` lies within an abbreviation that
/// starts at a word boundary.
fn inside_abbreviation(text: &str, idx: usize) -> bool {
    let bytes = text.as_bytes();
    for abbr in ABBREVIATIONS {
        let ab = abbr.as_bytes();
        for (dot_pos, &b) in ab.iter().enumerate() {
            if b != b'.' {
                continue;
            }
            if idx < dot_pos {
                continue;
            }
            let start = idx - dot_pos;
            let end = start + ab.len();
            if end > bytes.len() {
                continue;
            }
            let starts_at_word_boundary =
                start == 0 || bytes[start - 1].is_ascii_whitespace() || bytes[start - 1] == b'(';
            if starts_at_word_boundary && text[start..end].eq_ignore_ascii_case(abbr) {
                return true;
            }
        }
    }
    false
}

/// Splits text into sentence spans at `.`, `!`, `?`, or newline, keeping the
/// trailing terminator run with its span. Periods inside decimal numbers and
/// after known abbreviations do not split. Empty spans are dropped.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let push_span = |s: usize, e: usize, spans: &mut Vec<String>| {
        let span = text[s..e].trim();
        if !span.is_empty() {
            spans.push(span.to_string());
        }
    };
    for (idx, c) in text.char_indices() {
        if !is_terminator(c) {
            continue;
        }
        if c == '.' && (inside_decimal(bytes, idx) || inside_abbreviation(text, idx)) {
            continue;
        }
        // Boundary goes after the last terminator of a run ("?!", "...").
        let next = idx + c.len_utf8();
        if next < bytes.len() {
            let next_char = text[next..].chars().next().unwrap();
            if is_terminator(next_char)
                && !(next_char == '.'
                    && (inside_decimal(bytes, next) || inside_abbreviation(text, next)))
            {
                continue;
            }
        }
        push_span(start, next, &mut spans);
        start = next;
    }
    if start < bytes.len() {
        push_span(start, bytes.len(), &mut spans);
    }
    spans
}

/// Removes all whitespace; segmentation round-trips are compared modulo this.
pub fn strip_whitespace(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Splits a string into chunks of at most `max_bytes` bytes on char boundaries.
fn hard_split(text: &str, max_bytes: usize) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < text.len() {
        let mut end = (start + max_bytes).min(text.len());
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        assert!(end > start, "max_bytes too small for a single char");
        out.push(&text[start..end]);
        start = end;
    }
    out
}

/// Segments and tokenizes, hard-splitting any sentence whose token count
/// (including BOS/EOS) would exceed `max_sentence_tokens`.
pub fn segment_and_tokenize(text: &str, max_sentence_tokens: usize) -> Vec<TokenSequence> {
    assert!(max_sentence_tokens > 2, "max_sentence_tokens must exceed 2");
    let max_bytes = max_sentence_tokens - 2;
    let mut out = Vec::new();
    for sentence in segment_sentences(text) {
        if sentence.len() <= max_bytes {
            out.push(tokenize(&sentence));
        } else {
            for chunk in hard_split(&sentence, max_bytes) {
                out.push(tokenize(chunk));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub id: String,
    pub problem: String,
    pub solution: String,
    pub sentences: Vec<TokenSequence>,
    /// 0 = root problem, 1-9 = cognitive variant index.
    pub variant_tag: Option<u8>,
    pub correct: Option<bool>,
    pub source_model: Option<String>,
}

impl ReasoningSample {
    pub fn build(
        id: String,
        problem: String,
        solution: String,
        variant_tag: Option<u8>,
        correct: Option<bool>,
        source_model: Option<String>,
        max_sentence_tokens: usize,
    ) -> Result<Self> {
        if let Some(tag) = variant_tag {
            if tag > 9 {
                return Err(Error::data(format!(
                    "variant_tag {tag} out of range 0..=9 (sample {id})"
                )));
            }
        }
        let sentences = segment_and_tokenize(&solution, max_sentence_tokens);
        Ok(ReasoningSample {
            id,
            problem,
            solution,
            sentences,
            variant_tag,
            correct,
            source_model,
        })
    }

    /// Total token count across sentence units (BOS/EOS included).
    pub fn token_length(&self) -> usize {
        self.sentences.iter().map(|s| s.ids.len()).sum()
    }
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    problem: String,
    solution: String,
    #[serde(default)]
    variant_tag: Option<i64>,
    #[serde(default)]
    correct: Option<bool>,
    #[serde(default)]
    source_model: Option<String>,
}

/// Loads a JSONL reasoning dataset; one object per line with required fields
/// `id`, `problem`, `solution`. Order is preserved; unknown fields ignored.
pub fn load_jsonl(path: &Path, max_sentence_tokens: usize) -> Result<Vec<ReasoningSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| {
            Error::data(format!("{}: read error at line {lineno}: {e}", path.display()))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}: line {lineno}: {e}", path.display()))
        })?;
        let tag = match raw.variant_tag {
            None => None,
            Some(t) if (0..=9).contains(&t) => Some(t as u8),
            Some(t) => {
                return Err(Error::data(format!(
                    "{}: line {lineno}: variant_tag {t} out of range 0..=9",
                    path.display()
                )))
            }
        };
        samples.push(ReasoningSample::build(
            raw.id,
            raw.problem,
            raw.solution,
            tag,
            raw.correct,
            raw.source_model,
            max_sentence_tokens,
        )?);
    }
    Ok(samples)
}

/// The bundled 200-sample toy corpus (one short sentence per sample).
pub const TOY_CORPUS_JSONL: &str = include_str!("../data/toy_corpus.jsonl");

/// Path sentinel understood by the CLI for [`TOY_CORPUS_JSONL`].
pub const TOY_CORPUS_PATH: &str = "builtin:toy";

pub fn builtin_toy(max_sentence_tokens: usize) -> Result<Vec<ReasoningSample>> {
    let mut samples = Vec::new();
    for (lineno, line) in TOY_CORPUS_JSONL.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("toy corpus line {}: {e}", lineno + 1)))?;
        samples.push(ReasoningSample::build(
            raw.id,
            raw.problem,
            raw.solution,
            raw.variant_tag.map(|t| t as u8),
            raw.correct,
            raw.source_model,
            max_sentence_tokens,
        )?);
    }
    Ok(samples)
}

/// Loads either a filesystem path or the builtin toy corpus sentinel.
pub fn load_dataset(path: &str, max_sentence_tokens: usize) -> Result<Vec<ReasoningSample>> {
    if path == TOY_CORPUS_PATH {
        builtin_toy(max_sentence_tokens)
    } else {
        load_jsonl(Path::new(path), max_sentence_tokens)
    }
}
