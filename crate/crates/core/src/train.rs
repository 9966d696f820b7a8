//! Adagrad training loop over the joint loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backend::Recorder;
use crate::data::{encode_example, sample_negatives, RawExample, Vocab};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tagger::{joint_loss, RelationSchema, DEFAULT_THRESHOLD};

/// How `weight_decay` enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// L2 term added to the gradient before Adagrad scaling.
    #[default]
    Coupled,
    /// `w -= lr·wd·w` applied next to an undecayed Adagrad step.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Negative conditioning spans sampled per sentence each epoch.
    pub negatives_per_positive: usize,
    pub threshold: f32,
    pub adagrad_eps: f64,
    pub head_dropout: f64,
    /// `vocab_size` is overwritten by the vocabulary actually used.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            decay_mode: DecayMode::Coupled,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            negatives_per_positive: 128,
            threshold: DEFAULT_THRESHOLD,
            adagrad_eps: 1e-10,
            head_dropout: 0.2,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.decay_mode == DecayMode::Decoupled && self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config(format!(
                "decoupled decay needs lr * weight_decay < 1, got {}",
                self.lr * self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.adagrad_eps.is_nan() || self.adagrad_eps <= 0.0 {
            return Err(Error::Config("adagrad_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize, num_relations: usize) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.vocab_size = vocab_size;
        ModelConfig {
            encoder,
            num_relations,
            head_dropout: self.head_dropout,
        }
    }
}

/// Per-parameter squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub accum: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        OptimizerState {
            accum: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

fn flush_subnormal(x: f32) -> f32 {
    if x.is_subnormal() {
        0.0
    } else {
        x
    }
}

/// Shrinks every weight by `lr·wd·w`, independent of the gradient history.
pub fn decoupled_decay(params: &mut ModelParams<f32>, lr: f64, weight_decay: f64) {
    let factor = 1.0 - (lr * weight_decay) as f32;
    for t in params.tensors_mut() {
        for w in t.data_mut() {
            *w = flush_subnormal(*w * factor);
        }
    }
}

/// One Adagrad update with coupled L2 decay:
/// `g' = g + wd·w; s += g'²; w -= lr·g'/(√s + eps)`.
pub fn adagrad_step(
    params: &mut ModelParams<f32>,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() || state.accum.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adagrad_step: {} parameters, {} gradients, {} accumulators",
            params.tensors().len(),
            grads.len(),
            state.accum.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let name = &params.names()[i];
        if g.len() != params.tensors()[i].len() || state.accum[i].len() != g.len() {
            return Err(Error::Contract(format!(
                "adagrad_step: shape mismatch for {name}"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let (lr, wd, eps) = (lr as f32, weight_decay as f32, eps as f32);
    for ((w, g), s) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.accum.iter_mut())
    {
        for ((wi, &gi), si) in w.data_mut().iter_mut().zip(g).zip(s.iter_mut()) {
            let gd = gi + wd * *wi;
            *si += gd * gd;
            *wi -= lr * gd / (si.sqrt() + eps);
            // Decay drives idle weights toward zero; subnormals there stall the CPU.
            *wi = flush_subnormal(*wi);
            *si = flush_subnormal(*si);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub subject_loss: f64,
    pub relation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_subject_loss: f64,
    pub mean_relation_loss: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    /// Line-delimited JSON, steps of each epoch followed by its summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                out.push_str(&serde_json::to_string(&LogLine::Step(s.clone()))?);
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut log = MetricsLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: LogLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &MetricsLog) -> bool {
        let strip = |log: &MetricsLog| {
            log.epochs
                .iter()
                .map(|e| EpochRecord {
                    wall_time_s: 0.0,
                    ..e.clone()
                })
                .collect::<Vec<_>>()
        };
        self.steps == other.steps && strip(self) == strip(other)
    }
}

pub struct TrainOutput {
    pub model: Model<f32>,
    /// Epoch (1-based) and parameters of the best held-out F1, if evaluated.
    pub best: Option<(usize, Model<f32>)>,
    pub metrics: MetricsLog,
    pub vocab: Vocab,
}

/// Inputs to [`train`]; `vocab` defaults to one built from the corpus.
pub struct TrainData<'a> {
    pub corpus: &'a [RawExample],
    pub schema: &'a RelationSchema,
    pub vocab: Option<Vocab>,
    pub eval: Option<&'a [RawExample]>,
}

pub fn train(config: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutput> {
    train_with(config, data, |_| {})
}

/// Like [`train`], calling `on_epoch` after each completed epoch.
pub fn train_with(
    config: &TrainConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if data.corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let vocab = data
        .vocab
        .unwrap_or_else(|| Vocab::build(data.corpus.iter().map(|e| e.text.as_str())));
    let model_config = config.model_config(vocab.len(), data.schema.len());
    let root = Rng::new(config.seed);
    let mut model = Model::<f32>::init(model_config, &mut root.fork(0))?;
    let mut rng = root.fork(1);
    let encoded = data
        .corpus
        .iter()
        .map(|ex| encode_example(ex, &vocab, data.schema, model.config.encoder.max_seq_len))
        .collect::<Result<Vec<_>>>()?;

    let mut state = OptimizerState::new(&model.params);
    let mut metrics = MetricsLog::default();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let (mut sum, mut sum_sub, mut sum_rel, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| sample_negatives(&encoded[i], config.negatives_per_positive, &mut rng))
                .collect();
            let mut graph = Graph::<f32>::new();
            let vars: Vec<Var> = model
                .params
                .tensors()
                .iter()
                .map(|t| graph.param(t.clone()))
                .collect();
            let loss = {
                let mut rec = Recorder::new(&mut graph, &vars, Some(&mut rng));
                joint_loss(&mut rec, &model.config, &model.layout, &batch)?
            };
            let record = StepRecord {
                epoch,
                step,
                loss: graph.value(loss.total).item() as f64,
                subject_loss: graph.value(loss.subject).item() as f64,
                relation_loss: graph.value(loss.relation).item() as f64,
            };
            if !record.loss.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss at step {step}")));
            }
            graph.backward(loss.total)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, t)| graph.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
                .collect();
            drop(graph);
            let coupled = match config.decay_mode {
                DecayMode::Coupled => config.weight_decay,
                DecayMode::Decoupled => 0.0,
            };
            adagrad_step(
                &mut model.params,
                &grads,
                &mut state,
                config.lr,
                coupled,
                config.adagrad_eps,
            )?;
            if config.decay_mode == DecayMode::Decoupled {
                decoupled_decay(&mut model.params, config.lr, config.weight_decay);
            }
            sum += record.loss;
            sum_sub += record.subject_loss;
            sum_rel += record.relation_loss;
            batches += 1;
            step += 1;
            metrics.steps.push(record);
        }
        let eval = match data.eval {
            Some(split) => Some(evaluate(&model, &vocab, data.schema, split, config.threshold)?),
            None => None,
        };
        if let Some(report) = &eval {
            if best.as_ref().is_none_or(|(_, f, _)| report.f1 > *f) {
                best = Some((epoch, report.f1, model.clone()));
            }
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: sum / n,
            mean_subject_loss: sum_sub / n,
            mean_relation_loss: sum_rel / n,
            wall_time_s: started.elapsed().as_secs_f64(),
            eval,
        };
        on_epoch(&record);
        metrics.epochs.push(record);
    }

    Ok(TrainOutput {
        model,
        best: best.map(|(e, _, m)| (e, m)),
        metrics,
        vocab,
    })
}
