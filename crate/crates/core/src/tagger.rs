//! Cascaded pointer tagging on top of the shared encoder.
//!
//! The subject head marks start/end pointers per token. For each subject, the
//! mean of its hidden rows is added to every position and the relation head
//! marks object start/end pointers per relation. Both heads use
//! dropout → linear → sigmoid → square, and their losses are summed.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backend::{Backend, Eager, Recorder};
use crate::data::{prepare_input, EncodedExample, Tokenized, Vocab};
use crate::encoder::{self, EncodedInput};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamLayout};
use crate::tensor::{Float, Tensor};

/// Default decision threshold on the squared-sigmoid scores.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Ordered predicate names; a predicate's index is its column in the relation head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RelationSchema {
    predicates: Vec<String>,
}

impl TryFrom<Vec<String>> for RelationSchema {
    type Error = Error;
    fn try_from(predicates: Vec<String>) -> Result<Self> {
        RelationSchema::new(predicates)
    }
}

impl From<RelationSchema> for Vec<String> {
    fn from(s: RelationSchema) -> Self {
        s.predicates
    }
}

impl RelationSchema {
    pub fn new(predicates: Vec<String>) -> Result<Self> {
        if predicates.is_empty() {
            return Err(Error::Config("relation schema is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &predicates {
            if p.trim().is_empty() {
                return Err(Error::Config("empty predicate name in schema".into()));
            }
            if !seen.insert(p.as_str()) {
                return Err(Error::Config(format!("duplicate predicate {p:?} in schema")));
            }
        }
        Ok(RelationSchema { predicates })
    }

    /// The sixteen predicates used by the synthetic medicine corpus.
    pub fn medicine() -> Self {
        let names = [
            "composition",
            "preparation",
            "storage",
            "efficacy",
            "contraindication",
            "dosage",
            "origin",
            "part_used",
            "nature",
            "taste",
            "processing",
            "harvest_time",
            "toxicity",
            "alias",
            "administration",
            "compatibility",
        ];
        RelationSchema {
            predicates: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn index_of(&self, predicate: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p == predicate)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.predicates[index]
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    /// Reads a JSON array of names, or one name per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            let names: Vec<String> = serde_json::from_str(trimmed)?;
            return Self::new(names);
        }
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.predicates)?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Inclusive token span over sequence positions (position 0 is `[CLS]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub subject_span: Span,
    pub object_span: Span,
}

impl Triple {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.subject, &self.predicate, &self.object)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScores {
    pub start: Vec<f32>,
    pub end: Vec<f32>,
}

impl SubjectScores {
    /// Splits an `[n×2]` score tensor into start and end columns.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Self {
        let start = t.data().iter().step_by(2).map(|v| v.as_f32()).collect();
        let end = t.data().iter().skip(1).step_by(2).map(|v| v.as_f32()).collect();
        SubjectScores { start, end }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

/// Per-token, per-relation object pointers; row-major `[n×R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationObjectScores {
    pub num_relations: usize,
    pub start: Vec<f32>,
    pub end: Vec<f32>,
}

impl RelationObjectScores {
    /// Splits an `[n×2R]` tensor whose first R columns are starts and last R are ends.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, num_relations: usize) -> Self {
        let mut start = Vec::with_capacity(t.len() / 2);
        let mut end = Vec::with_capacity(t.len() / 2);
        for row in t.data().chunks(2 * num_relations) {
            start.extend(row[..num_relations].iter().map(|v| v.as_f32()));
            end.extend(row[num_relations..].iter().map(|v| v.as_f32()));
        }
        RelationObjectScores {
            num_relations,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.start.len() / self.num_relations.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    fn column(&self, r: usize) -> SubjectScores {
        let take = |v: &[f32]| v.iter().skip(r).step_by(self.num_relations).copied().collect();
        SubjectScores {
            start: take(&self.start),
            end: take(&self.end),
        }
    }
}

/// Subject head pre-activations `[n×2]`: dropout then linear.
pub fn subject_logits<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    hidden: &B::Value,
) -> Result<B::Value> {
    let x = b.dropout(hidden, config.head_dropout)?;
    encoder::linear(b, &x, layout.subject_head)
}

fn squared_sigmoid<T: Float, B: Backend<T>>(b: &mut B, logits: &B::Value) -> B::Value {
    let p = b.sigmoid(logits);
    b.square(&p)
}

/// Squared-sigmoid subject pointers `[n×2]` (column 0 start, column 1 end).
pub fn subject_scores<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    hidden: &B::Value,
) -> Result<B::Value> {
    let logits = subject_logits(b, config, layout, hidden)?;
    Ok(squared_sigmoid(b, &logits))
}

/// Adds the mean of the subject's hidden rows to every position.
pub fn condition_on_subject<T: Float, B: Backend<T>>(
    b: &mut B,
    hidden: &B::Value,
    subject: Span,
) -> Result<B::Value> {
    let rows = b.get(hidden).shape()[0];
    if subject.start > subject.end || subject.end >= rows {
        return Err(Error::Span {
            start: subject.start,
            end: subject.end,
            len: rows,
        });
    }
    let v = b.mean_rows(hidden, subject.start, subject.end)?;
    b.add(hidden, &v)
}

/// Relation head pre-activations `[n×2R]`: dropout then linear.
pub fn relation_object_logits<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    conditioned: &B::Value,
) -> Result<B::Value> {
    let x = b.dropout(conditioned, config.head_dropout)?;
    encoder::linear(b, &x, layout.relation_head)
}

/// Squared-sigmoid object pointers `[n×2R]` (starts, then ends).
pub fn relation_object_scores<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    conditioned: &B::Value,
) -> Result<B::Value> {
    let logits = relation_object_logits(b, config, layout, conditioned)?;
    Ok(squared_sigmoid(b, &logits))
}

/// Pointer decoding: every start at or above `threshold` pairs with the
/// nearest end at or after it (also at or above `threshold`) inside the
/// contiguous allowed region. Unpaired starts are dropped.
pub fn decode_subject_spans(scores: &SubjectScores, mask: &[bool], threshold: f32) -> Vec<Span> {
    let n = scores.len().min(mask.len());
    let mut spans = Vec::new();
    for i in 0..n {
        if !mask[i] || scores.start[i] < threshold {
            continue;
        }
        if let Some(j) = (i..n)
            .take_while(|&j| mask[j])
            .find(|&j| scores.end[j] >= threshold)
        {
            spans.push(Span::new(i, j));
        }
    }
    spans
}

/// Pointer decoding per relation column, ordered by relation then start.
pub fn decode_objects(scores: &RelationObjectScores, mask: &[bool], threshold: f32) -> Vec<(usize, Span)> {
    (0..scores.num_relations)
        .flat_map(|r| {
            decode_subject_spans(&scores.column(r), mask, threshold)
                .into_iter()
                .map(move |s| (r, s))
        })
        .collect()
}

/// Graph handles of the joint objective and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub subject: Var,
    pub relation: Var,
}

/// Summed binary cross-entropy of both heads over a batch. Model 2 is
/// conditioned on every gold subject (teacher forcing) and every negative
/// span attached to the examples. The subject term averages over all unmasked
/// positions of the batch. The relation term averages over positions and
/// relations within each conditioning copy, sums over an example's copies and
/// averages over examples, so adding negatives never dilutes the gold copies.
pub fn joint_loss<T: Float>(
    rec: &mut Recorder<'_, '_, T>,
    config: &ModelConfig,
    layout: &ParamLayout,
    batch: &[EncodedExample],
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("joint_loss on an empty batch".into()));
    }
    let r = config.num_relations;
    let mut sub_logits = Vec::with_capacity(batch.len());
    let mut sub_target = Vec::new();
    let mut sub_weight = Vec::new();
    let mut conditioned = Vec::new();
    let mut rel_target = Vec::new();
    let mut rel_weight = Vec::new();

    for ex in batch {
        ex.check(r)?;
        let n = ex.input.len();
        let hidden = encoder::encode(rec, &config.encoder, layout, &ex.input)?;
        sub_logits.push(subject_logits(rec, config, layout, &hidden)?);
        for i in 0..n {
            let w = T::lit(ex.input.input_mask[i] as f64);
            sub_target.push(T::lit(ex.subject_start[i] as f64));
            sub_target.push(T::lit(ex.subject_end[i] as f64));
            sub_weight.extend([w, w]);
        }
        let zeros = vec![0u8; n * r];
        let targets = ex
            .subjects
            .iter()
            .map(|s| (s.span, &s.object_start[..], &s.object_end[..]))
            .chain(ex.negatives.iter().map(|&s| (s, &zeros[..], &zeros[..])));
        let valid = ex.input.input_mask.iter().filter(|&&m| m == 1).count();
        let cell = 1.0 / (2 * r * valid) as f64;
        for (span, starts, ends) in targets {
            conditioned.push(condition_on_subject(rec, &hidden, span)?);
            for i in 0..n {
                let w = T::lit(ex.input.input_mask[i] as f64 * cell);
                let row = i * r..(i + 1) * r;
                rel_target.extend(starts[row.clone()].iter().map(|&v| T::lit(v as f64)));
                rel_target.extend(ends[row].iter().map(|&v| T::lit(v as f64)));
                rel_weight.extend(std::iter::repeat_n(w, 2 * r));
            }
        }
    }

    let sub_all = concat(rec, &sub_logits)?;
    let subject = rec.graph.squared_sigmoid_bce(sub_all, sub_target, sub_weight)?;
    let relation = if conditioned.is_empty() {
        rec.graph.constant(Tensor::scalar(T::zero()))
    } else {
        let cond_all = concat(rec, &conditioned)?;
        let logits = relation_object_logits(rec, config, layout, &cond_all)?;
        // Weights make each copy's cells sum to 1, so the kernel yields the mean
        // over copies; rescaling gives the per-example sum over copies.
        let per_copy = rec.graph.squared_sigmoid_bce(logits, rel_target, rel_weight)?;
        rec.graph
            .scale(per_copy, conditioned.len() as f64 / batch.len() as f64)
    };
    let total = rec.graph.add(subject, relation)?;
    Ok(JointLoss {
        total,
        subject,
        relation,
    })
}

fn concat<T: Float>(rec: &mut Recorder<'_, '_, T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        rec.graph.concat_rows(parts)
    }
}

/// A subject together with its decoded (relation, object) pointers.
pub type SubjectObjects = (Span, Vec<(usize, Span)>);

/// Runs the cascade on one encoded sequence with any backend.
pub fn predict_spans<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    input: &EncodedInput,
    threshold: f32,
) -> Result<Vec<SubjectObjects>> {
    let hidden = encoder::encode(b, &config.encoder, layout, input)?;
    let sub = subject_scores(b, config, layout, &hidden)?;
    let sub = SubjectScores::from_tensor(b.get(&sub));
    let mask = input.span_mask();
    let subjects = decode_subject_spans(&sub, &mask, threshold);
    let mut out = Vec::with_capacity(subjects.len());
    for span in subjects {
        let cond = condition_on_subject(b, &hidden, span)?;
        let ros = relation_object_scores(b, config, layout, &cond)?;
        let ros = RelationObjectScores::from_tensor(b.get(&ros), config.num_relations);
        out.push((span, decode_objects(&ros, &mask, threshold)));
    }
    Ok(out)
}

/// Turns decoded pointers into surface triples: duplicates removed, ordered by
/// subject start, relation index, object start.
pub fn assemble_triples(
    text: &str,
    tokens: &Tokenized,
    decoded: &[SubjectObjects],
    schema: &RelationSchema,
) -> Vec<Triple> {
    type SortKey = (usize, usize, usize, usize, usize);
    let mut keyed: Vec<(SortKey, Triple)> = Vec::new();
    for (subject, objects) in decoded {
        for &(rel, object) in objects {
            if rel >= schema.len() {
                continue;
            }
            let triple = Triple {
                subject: tokens.surface(text, *subject),
                predicate: schema.name(rel).to_string(),
                object: tokens.surface(text, object),
                subject_span: *subject,
                object_span: object,
            };
            let key = (subject.start, rel, object.start, subject.end, object.end);
            keyed.push((key, triple));
        }
    }
    keyed.sort_by_key(|a| a.0);
    let mut seen = BTreeSet::new();
    keyed
        .into_iter()
        .filter(|(_, t)| seen.insert((t.subject.clone(), t.predicate.clone(), t.object.clone())))
        .map(|(_, t)| t)
        .collect()
}

/// Extraction through an arbitrary backend; with a [`Recorder`] and no rng
/// this is the training-path forward with dropout disabled.
pub fn extract_with<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    layout: &ParamLayout,
    vocab: &Vocab,
    schema: &RelationSchema,
    text: &str,
    threshold: f32,
) -> Result<Vec<Triple>> {
    let prepared = prepare_input(text, vocab, config.encoder.max_seq_len);
    if prepared.tokens.text_len() == 0 {
        return Ok(Vec::new());
    }
    let decoded = predict_spans(b, config, layout, &prepared.input, threshold)?;
    Ok(assemble_triples(text, &prepared.tokens, &decoded, schema))
}

/// End-to-end extraction on the forward-only path (no graph, no dropout).
pub fn extract_triples<T: Float>(
    model: &Model<T>,
    vocab: &Vocab,
    schema: &RelationSchema,
    text: &str,
    threshold: f32,
) -> Result<Vec<Triple>> {
    let mut eager = Eager::new(model.params.tensors());
    extract_with(
        &mut eager,
        &model.config,
        &model.layout,
        vocab,
        schema,
        text,
        threshold,
    )
}
