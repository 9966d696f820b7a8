//! Joint entity and relation extraction with a cascade binary pointer tagger
//! over a from-scratch transformer encoder.

pub mod autograd;
pub mod backend;
pub mod checkpoint;
pub mod data;
pub mod edge;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tagger;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use backend::{Backend, Eager, Recorder};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use data::{
    encode_example, load_corpus, prepare_input, sample_negatives, save_corpus, tokenize, EncodedExample,
    RawExample, SpoRecord, Vocab,
};
pub use edge::{
    benchmark_latency, export_model, handle_extract, BenchReport, ExtractRequest, ExtractResponse,
    InferenceModel,
};
pub use encoder::{EncodedInput, EncoderConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, f1, score_triples, t_test, EvalReport, LatencyStats, TTestResult};
pub use model::{Model, ModelConfig, ModelParams, ParamLayout};
pub use rng::Rng;
pub use synth::{generate_synthetic_corpus, SynthConfig};
pub use tagger::{extract_triples, joint_loss, RelationSchema, Span, Triple};
pub use tensor::{Float, Tensor};
pub use train::{
    adagrad_step, decoupled_decay, train, DecayMode, MetricsLog, OptimizerState, TrainConfig, TrainData,
};
