//! Frozen inference artifact, the extraction request handler and latency
//! benchmarking.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointHeader};
use crate::data::{prepare_input, Vocab};
use crate::error::{Error, Result};
use crate::eval::LatencyStats;
use crate::model::Model;
use crate::tagger::{extract_triples, RelationSchema, Triple};

/// Read-only model bundle used for serving.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    model: Model<f32>,
    vocab: Vocab,
    schema: RelationSchema,
    threshold: f32,
    model_version: String,
}

/// Content hash of the config and parameters, `coex-` plus 16 hex digits.
pub fn model_version(model: &Model<f32>) -> Result<String> {
    let bytes = encode_checkpoint(&CheckpointHeader::new(model.config.clone()), &model.params)?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("coex-{hex}"))
}

impl InferenceModel {
    pub fn new(model: Model<f32>, vocab: Vocab, schema: RelationSchema, threshold: f32) -> Result<Self> {
        if vocab.len() != model.config.encoder.vocab_size {
            return Err(Error::Integrity(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                model.config.encoder.vocab_size
            )));
        }
        if schema.len() != model.config.num_relations {
            return Err(Error::Integrity(format!(
                "schema has {} predicates, model expects {}",
                schema.len(),
                model.config.num_relations
            )));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {threshold}"
            )));
        }
        let model_version = model_version(&model)?;
        Ok(InferenceModel {
            model,
            vocab,
            schema,
            threshold,
            model_version,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn max_seq_len(&self) -> usize {
        self.model.config.encoder.max_seq_len
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    /// Forward-only extraction; no graph is built and dropout is absent.
    pub fn infer(&self, text: &str) -> Result<Vec<Triple>> {
        extract_triples(&self.model, &self.vocab, &self.schema, text, self.threshold)
    }

    /// Whether `text` exceeds the window and is cut to its prefix.
    pub fn would_truncate(&self, text: &str) -> bool {
        prepare_input(text, &self.vocab, self.max_seq_len()).truncated
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = CheckpointHeader::new(self.model.config.clone());
        header.vocab = Some(self.vocab.entries().to_vec());
        header.schema = Some(self.schema.predicates().to_vec());
        header.threshold = Some(self.threshold);
        header.model_version = Some(self.model_version.clone());
        encode_checkpoint(&header, &self.model.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, model) = decode_checkpoint(bytes)?;
        let vocab = header
            .vocab
            .ok_or_else(|| Error::Format("inference artifact has no vocab section".into()))?;
        let schema = header
            .schema
            .ok_or_else(|| Error::Format("inference artifact has no schema section".into()))?;
        let threshold = header
            .threshold
            .ok_or_else(|| Error::Format("inference artifact has no threshold".into()))?;
        let loaded = InferenceModel::new(
            model,
            Vocab::from_tokens(vocab)?,
            RelationSchema::new(schema)?,
            threshold,
        )?;
        if let Some(v) = header.model_version {
            if v != loaded.model_version {
                return Err(Error::Integrity(format!(
                    "artifact claims version {v}, parameters hash to {}",
                    loaded.model_version
                )));
            }
        }
        Ok(loaded)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Writes a self-contained inference artifact: checkpoint records plus
/// vocabulary, schema and threshold in the header.
pub fn export_model(
    model: &Model<f32>,
    vocab: &Vocab,
    schema: &RelationSchema,
    threshold: f32,
    path: &Path,
) -> Result<()> {
    InferenceModel::new(model.clone(), vocab.clone(), schema.clone(), threshold)?.save(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleOut {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Inclusive token positions.
    pub subject_span: [usize; 2],
    pub object_span: [usize; 2],
}

impl From<&Triple> for TripleOut {
    fn from(t: &Triple) -> Self {
        TripleOut {
            subject: t.subject.clone(),
            predicate: t.predicate.clone(),
            object: t.object.clone(),
            subject_span: [t.subject_span.start, t.subject_span.end],
            object_span: [t.object_span.start, t.object_span.end],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub triples: Vec<TripleOut>,
    pub latency_ms: f64,
    pub request_bytes: usize,
    /// Byte length of the serialized response body that carries it.
    pub response_bytes: usize,
    pub truncated: bool,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    pub model_version: String,
}

/// Status code and JSON body of one handled request.
#[derive(Clone, Debug, PartialEq)]
pub struct HandlerOutcome {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Serializes `resp` so that its `response_bytes` equals the body length.
fn serialize_self_sized(resp: &mut ExtractResponse) -> Result<Vec<u8>> {
    let mut body = serde_json::to_vec(resp)?;
    for _ in 0..8 {
        if resp.response_bytes == body.len() {
            return Ok(body);
        }
        resp.response_bytes = body.len();
        body = serde_json::to_vec(resp)?;
    }
    Err(Error::Contract("response size did not converge".into()))
}

fn error_outcome(status: u16, message: String) -> HandlerOutcome {
    let body = serde_json::to_vec(&ErrorBody { error: message })
        .unwrap_or_else(|_| b"{\"error\":\"unserializable error\"}".to_vec());
    HandlerOutcome { status, body }
}

/// Handles a POST /extract body. `latency_ms` spans parsing, inference and
/// the first serialization pass.
pub fn handle_extract(model: &InferenceModel, body: &[u8]) -> HandlerOutcome {
    let started = Instant::now();
    let req: ExtractRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error_outcome(400, format!("malformed request body: {e}")),
    };
    let triples = match model.infer(&req.text) {
        Ok(t) => t,
        Err(e) => return error_outcome(500, e.to_string()),
    };
    let mut resp = ExtractResponse {
        triples: triples.iter().map(TripleOut::from).collect(),
        latency_ms: 0.0,
        request_bytes: body.len(),
        response_bytes: 0,
        truncated: model.would_truncate(&req.text),
        model_version: model.model_version().to_string(),
    };
    let first = serde_json::to_vec(&resp);
    resp.latency_ms = started.elapsed().as_secs_f64() * 1e3;
    if let Err(e) = first {
        return error_outcome(500, e.to_string());
    }
    match serialize_self_sized(&mut resp) {
        Ok(body) => HandlerOutcome { status: 200, body },
        Err(e) => error_outcome(500, e.to_string()),
    }
}

pub fn health_body(model: &InferenceModel) -> Vec<u8> {
    serde_json::to_vec(&HealthBody {
        status: "ok".into(),
        model_version: model.model_version().to_string(),
    })
    .expect("health body serializes")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub input_index: usize,
    pub latency_ms: f64,
    pub request_bytes: usize,
    /// Length of the body returned by the handler.
    pub response_bytes: usize,
    /// `response_bytes` as reported inside that body.
    pub reported_response_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub stats: LatencyStats,
    pub total_request_bytes: usize,
    pub total_response_bytes: usize,
    pub samples: Vec<BenchSample>,
}

/// Times `iterations` extractions through the request handler, cycling over
/// `inputs`, on one dedicated thread. Warmup runs are not recorded.
pub fn benchmark_latency(
    model: &InferenceModel,
    inputs: &[String],
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Config("benchmark needs at least one input".into()));
    }
    let requests = inputs
        .iter()
        .map(|text| serde_json::to_vec(&ExtractRequest { text: text.clone() }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    std::thread::scope(|scope| {
        scope
            .spawn(|| run_bench(model, &requests, iterations, warmup))
            .join()
            .map_err(|_| Error::Contract("benchmark thread panicked".into()))?
    })
}

fn run_bench(
    model: &InferenceModel,
    requests: &[Vec<u8>],
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    for i in 0..warmup {
        handle_extract(model, &requests[i % requests.len()]);
    }
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let input_index = i % requests.len();
        let request = &requests[input_index];
        let started = Instant::now();
        let outcome = handle_extract(model, request);
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        if outcome.status != 200 {
            return Err(Error::Contract(format!(
                "benchmark request failed with status {}: {}",
                outcome.status,
                String::from_utf8_lossy(&outcome.body)
            )));
        }
        let resp: ExtractResponse = serde_json::from_slice(&outcome.body)?;
        samples.push(BenchSample {
            input_index,
            latency_ms,
            request_bytes: request.len(),
            response_bytes: outcome.body.len(),
            reported_response_bytes: resp.response_bytes,
        });
    }
    let latencies: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();
    Ok(BenchReport {
        warmup,
        stats: LatencyStats::from_samples(&latencies)?,
        total_request_bytes: samples.iter().map(|s| s.request_bytes).sum(),
        total_response_bytes: samples.iter().map(|s| s.response_bytes).sum(),
        samples,
    })
}
