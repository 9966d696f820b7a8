//! Corpus formats, character-level tokenization, label construction and
//! negative sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncodedInput;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tagger::{RelationSchema, Span, Triple};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Longest span (in tokens) considered as a negative conditioning subject.
pub const MAX_NEGATIVE_SPAN: usize = 10;

/// Tokens with character offsets into the source text. Position 0 is
/// `[CLS]` and the last position is `[SEP]`; both carry empty ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<String>,
    /// Half-open `(start, end)` character ranges.
    pub offsets: Vec<(usize, usize)>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of text tokens, excluding `[CLS]` and `[SEP]`.
    pub fn text_len(&self) -> usize {
        self.tokens.len().saturating_sub(2)
    }

    /// Source characters covered by `span`, including interior whitespace.
    pub fn surface(&self, text: &str, span: Span) -> String {
        let from = self.offsets[span.start].0;
        let to = self.offsets[span.end].1;
        text.chars().skip(from).take(to - from).collect()
    }

    /// Keeps at most `max_len` positions (`[CLS]` and `[SEP]` included).
    /// Returns whether anything was cut.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        if self.tokens.len() <= max_len {
            return false;
        }
        let keep = max_len.saturating_sub(1).max(1);
        let sep_offset = self.offsets.last().copied().unwrap_or((0, 0));
        self.tokens.truncate(keep);
        self.offsets.truncate(keep);
        self.tokens.push(SEP.to_string());
        self.offsets.push(sep_offset);
        true
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x3040..=0x30FF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

/// Character-level tokenization: one token per CJK character, one per
/// maximal run of other letters/digits, one per remaining symbol; whitespace
/// separates and is dropped.
pub fn tokenize(text: &str) -> Tokenized {
    let mut tokens = vec![CLS.to_string()];
    let mut offsets = vec![(0, 0)];
    let mut run: Option<(usize, String)> = None;
    let mut count = 0;
    let flush = |run: &mut Option<(usize, String)>,
                 tokens: &mut Vec<String>,
                 offsets: &mut Vec<(usize, usize)>,
                 at: usize| {
        if let Some((start, s)) = run.take() {
            tokens.push(s);
            offsets.push((start, at));
        }
    };
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        if c.is_alphanumeric() && !is_cjk(c) {
            match &mut run {
                Some((_, s)) => s.push(c),
                None => run = Some((i, c.to_string())),
            }
            continue;
        }
        flush(&mut run, &mut tokens, &mut offsets, i);
        if !c.is_whitespace() {
            tokens.push(c.to_string());
            offsets.push((i, i + 1));
        }
    }
    flush(&mut run, &mut tokens, &mut offsets, count);
    tokens.push(SEP.to_string());
    offsets.push((count, count));
    Tokenized { tokens, offsets }
}

/// Token vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Every token observed in `texts`, ordered by frequency (descending)
    /// then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            let tok = tokenize(text);
            for t in &tok.tokens[1..tok.tokens.len() - 1] {
                *counts.entry(t.clone()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t)).expect("ranked tokens are unique")
    }

    /// Vocabulary from non-reserved tokens in id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One non-reserved token per line; line `k` holds id `k + 4`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in self.entries() {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// One annotated (subject, predicate, object) record of a corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoRecord {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Character offset of the subject in the text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_start: Option<usize>,
}

impl SpoRecord {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        SpoRecord {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
            subject_start: None,
            object_start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub text: String,
    #[serde(rename = "spo_list")]
    pub triples: Vec<SpoRecord>,
}

impl RawExample {
    /// Checks predicates against the schema and entity strings against the text.
    pub fn validate(&self, schema: &RelationSchema) -> Result<()> {
        let chars: Vec<char> = self.text.chars().collect();
        for t in &self.triples {
            if schema.index_of(&t.predicate).is_none() {
                return Err(Error::Schema(t.predicate.clone()));
            }
            for (s, at) in [(&t.subject, t.subject_start), (&t.object, t.object_start)] {
                let needle: Vec<char> = s.chars().collect();
                let ok = match at {
                    Some(p) => chars.get(p..p + needle.len()) == Some(&needle[..]),
                    None => !needle.is_empty() && self.text.contains(s.as_str()),
                };
                if !ok {
                    return Err(Error::Alignment(s.clone()));
                }
            }
        }
        Ok(())
    }

    /// Gold (subject, predicate, object) strings as a set.
    pub fn triple_keys(&self) -> BTreeSet<(String, String, String)> {
        self.triples
            .iter()
            .map(|t| (t.subject.clone(), t.predicate.clone(), t.object.clone()))
            .collect()
    }

    /// True when some entity string takes part in more than one triple
    /// (single-entity overlap, shared objects, entity-pair overlap).
    pub fn is_overlapping(&self) -> bool {
        let keys = self.triple_keys();
        let mut uses: HashMap<&str, usize> = HashMap::new();
        for (s, _, o) in &keys {
            *uses.entry(s.as_str()).or_default() += 1;
            *uses.entry(o.as_str()).or_default() += 1;
        }
        uses.values().any(|&c| c > 1)
    }
}

/// Pointer labels for Model 2 under one conditioning subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectTarget {
    pub span: Span,
    /// Row-major `[n×R]`.
    pub object_start: Vec<u8>,
    pub object_end: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub text: String,
    pub tokens: Tokenized,
    pub input: EncodedInput,
    pub subject_start: Vec<u8>,
    pub subject_end: Vec<u8>,
    pub subjects: Vec<SubjectTarget>,
    /// Negative conditioning spans; their object labels are all zero.
    pub negatives: Vec<Span>,
    /// Aligned gold triples that survived truncation.
    pub gold: Vec<Triple>,
    pub dropped_triples: usize,
    pub truncated: bool,
}

impl EncodedExample {
    pub(crate) fn check(&self, num_relations: usize) -> Result<()> {
        let n = self.input.len();
        self.input.validate()?;
        let bad = |what: &str, got: usize, want: usize| {
            Error::Contract(format!("{what} has {got} entries, expected {want}"))
        };
        if self.subject_start.len() != n || self.subject_end.len() != n {
            return Err(bad("subject label vector", self.subject_start.len(), n));
        }
        for s in &self.subjects {
            if s.object_start.len() != n * num_relations || s.object_end.len() != n * num_relations {
                return Err(bad(
                    "object label matrix",
                    s.object_start.len(),
                    n * num_relations,
                ));
            }
            if s.span.end >= n {
                return Err(Error::Span {
                    start: s.span.start,
                    end: s.span.end,
                    len: n,
                });
            }
        }
        Ok(())
    }
}

/// Tokenized, truncated model input for free text.
pub struct PreparedInput {
    pub tokens: Tokenized,
    pub input: EncodedInput,
    pub truncated: bool,
}

pub fn prepare_input(text: &str, vocab: &Vocab, max_seq_len: usize) -> PreparedInput {
    let mut tokens = tokenize(text);
    let truncated = tokens.truncate(max_seq_len);
    let ids = tokens
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == 0 {
                CLS_ID
            } else if i + 1 == tokens.len() {
                SEP_ID
            } else {
                vocab.id(t)
            }
        })
        .collect();
    PreparedInput {
        tokens,
        input: EncodedInput::new(ids),
        truncated,
    }
}

/// Token span covering exactly `needle`, at character `at` when given,
/// otherwise at the first occurrence that falls on token boundaries.
fn align(tokens: &Tokenized, chars: &[char], needle: &str, at: Option<usize>) -> Result<Span> {
    let needle: Vec<char> = needle.chars().collect();
    if needle.is_empty() {
        return Err(Error::Alignment(String::new()));
    }
    let text_positions = 1..tokens.len() - 1;
    let span_at = |pos: usize| -> Option<Span> {
        if chars.get(pos..pos + needle.len()) != Some(&needle[..]) {
            return None;
        }
        let end_char = pos + needle.len();
        let start = text_positions.clone().find(|&i| tokens.offsets[i].0 == pos)?;
        let end = text_positions
            .clone()
            .find(|&i| tokens.offsets[i].1 == end_char)?;
        (start <= end).then(|| Span::new(start, end))
    };
    let found = match at {
        Some(pos) => span_at(pos),
        None => (0..chars.len()).find_map(span_at),
    };
    found.ok_or_else(|| Error::Alignment(needle.iter().collect()))
}

/// Builds pointer labels for every gold triple. Triples whose spans fall
/// beyond the `max_seq_len` window are dropped and counted.
pub fn encode_example(
    raw: &RawExample,
    vocab: &Vocab,
    schema: &RelationSchema,
    max_seq_len: usize,
) -> Result<EncodedExample> {
    let full = tokenize(&raw.text);
    let chars: Vec<char> = raw.text.chars().collect();
    let prepared = prepare_input(&raw.text, vocab, max_seq_len);
    let n = prepared.tokens.len();
    let last_text = n - 2;
    let r = schema.len();

    let mut subject_start = vec![0u8; n];
    let mut subject_end = vec![0u8; n];
    let mut by_subject: BTreeMap<Span, SubjectTarget> = BTreeMap::new();
    let mut gold = Vec::new();
    let mut dropped = 0;

    for t in &raw.triples {
        let rel = schema
            .index_of(&t.predicate)
            .ok_or_else(|| Error::Schema(t.predicate.clone()))?;
        let subj = align(&full, &chars, &t.subject, t.subject_start)?;
        let obj = align(&full, &chars, &t.object, t.object_start)?;
        if subj.end > last_text || obj.end > last_text {
            dropped += 1;
            continue;
        }
        subject_start[subj.start] = 1;
        subject_end[subj.end] = 1;
        let target = by_subject.entry(subj).or_insert_with(|| SubjectTarget {
            span: subj,
            object_start: vec![0; n * r],
            object_end: vec![0; n * r],
        });
        target.object_start[obj.start * r + rel] = 1;
        target.object_end[obj.end * r + rel] = 1;
        gold.push(Triple {
            subject: t.subject.clone(),
            predicate: t.predicate.clone(),
            object: t.object.clone(),
            subject_span: subj,
            object_span: obj,
        });
    }

    Ok(EncodedExample {
        text: raw.text.clone(),
        tokens: prepared.tokens,
        input: prepared.input,
        subject_start,
        subject_end,
        subjects: by_subject.into_values().collect(),
        negatives: Vec::new(),
        gold,
        dropped_triples: dropped,
        truncated: prepared.truncated,
    })
}

/// Attaches up to `k` negative conditioning spans drawn without replacement
/// from all spans of 1..=[`MAX_NEGATIVE_SPAN`] text tokens that are neither
/// gold subjects nor touching a gold object. Previously attached negatives
/// are replaced.
///
/// Object-touching spans are excluded because additive conditioning makes the
/// relation logit symmetric in token and condition: labelling "object
/// conditioned on object" negative contradicts the gold cell.
pub fn sample_negatives(ex: &EncodedExample, k: usize, rng: &mut Rng) -> EncodedExample {
    let mut out = ex.clone();
    out.negatives.clear();
    if k == 0 {
        return out;
    }
    let gold: BTreeSet<Span> = ex.subjects.iter().map(|s| s.span).collect();
    let objects: Vec<Span> = ex.gold.iter().map(|t| t.object_span).collect();
    let mask = ex.input.span_mask();
    let mut pool = Vec::new();
    for start in 0..mask.len() {
        for end in start..mask.len().min(start + MAX_NEGATIVE_SPAN) {
            if !mask[end] {
                break;
            }
            let span = Span::new(start, end);
            if mask[start] && !gold.contains(&span) && !objects.iter().any(|o| o.intersects(&span)) {
                pool.push(span);
            }
        }
    }
    out.negatives = rng
        .sample_indices(pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out
}

/// Result of reading a corpus file.
#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub examples: Vec<RawExample>,
    /// `(line number, message)` of skipped lines in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

pub fn parse_corpus(text: &str, schema: &RelationSchema, strict: bool) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawExample>(line)
            .map_err(|e| e.to_string())
            .and_then(|ex| ex.validate(schema).map(|_| ex).map_err(|e| e.to_string()));
        match parsed {
            Ok(ex) => out.examples.push(ex),
            Err(message) if strict => {
                return Err(Error::Parse {
                    line: line_no,
                    message,
                })
            }
            Err(message) => out.skipped.push((line_no, message)),
        }
    }
    Ok(out)
}

/// Reads a corpus file: one JSON object per line with `text` and `spo_list`.
pub fn load_corpus(path: &Path, schema: &RelationSchema, strict: bool) -> Result<LoadedCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, schema, strict)
}

pub fn corpus_to_string(examples: &[RawExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, examples: &[RawExample]) -> Result<()> {
    let body = corpus_to_string(examples)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
