//! Parameter inventory of the joint model: shared encoder plus the subject
//! and relation-object heads.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Initial tagging-head bias: `logit(√0.002)`, so every pointer score starts
/// at 0.002 (about the positive rate of relation cells) instead of 0.25.
pub const HEAD_BIAS_INIT: f64 = -3.061_551_838_257_786;

/// Index of a tensor in [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_relations: usize,
    /// Dropout in front of both tagging heads.
    pub head_dropout: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, num_relations: usize) -> Self {
        ModelConfig {
            encoder,
            num_relations,
            head_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_relations == 0 {
            return Err(Error::Config("num_relations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!(
                "head_dropout must be in [0, 1), got {}",
                self.head_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform,
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Where every named parameter lives, derived deterministically from a config.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub token_emb: ParamId,
    pub segment_emb: ParamId,
    pub position_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub subject_head: Linear,
    pub relation_head: Linear,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let enc = &config.encoder;
        let d = enc.model_dim;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            ParamId(specs.len() - 1)
        };
        let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId,
                      prefix: &str,
                      fan_in: usize,
                      fan_out: usize| Linear {
            weight: add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Uniform),
            bias: add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        };

        let token_emb = add("embeddings.token".into(), vec![enc.vocab_size, d], Init::Uniform);
        let segment_emb = add("embeddings.segment".into(), vec![2, d], Init::Uniform);
        let position_emb = add(
            "embeddings.position".into(),
            vec![enc.max_seq_len, d],
            Init::Uniform,
        );
        let mut layers = Vec::with_capacity(enc.num_layers);
        for l in 0..enc.num_layers {
            let p = format!("encoder.layer{l}");
            let query = linear(&mut add, &format!("{p}.attention.query"), d, d);
            let key = linear(&mut add, &format!("{p}.attention.key"), d, d);
            let value = linear(&mut add, &format!("{p}.attention.value"), d, d);
            let output = linear(&mut add, &format!("{p}.attention.output"), d, d);
            let ln1_gamma = add(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
            let ln1_beta = add(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
            let ffn_in = linear(&mut add, &format!("{p}.ffn.in"), d, enc.ffn_dim);
            let ffn_out = linear(&mut add, &format!("{p}.ffn.out"), enc.ffn_dim, d);
            let ln2_gamma = add(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
            let ln2_beta = add(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
            layers.push(LayerParams {
                query,
                key,
                value,
                output,
                ln1_gamma,
                ln1_beta,
                ffn_in,
                ffn_out,
                ln2_gamma,
                ln2_beta,
            });
        }
        let head =
            |add: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId, prefix: &str, fan_out: usize| Linear {
                weight: add(format!("{prefix}.weight"), vec![d, fan_out], Init::Uniform),
                bias: add(
                    format!("{prefix}.bias"),
                    vec![fan_out],
                    Init::Constant(HEAD_BIAS_INIT),
                ),
            };
        let subject_head = head(&mut add, "subject_head", 2);
        let relation_head = head(&mut add, "relation_head", 2 * config.num_relations);
        ParamLayout {
            specs,
            token_emb,
            segment_emb,
            position_emb,
            layers,
            subject_head,
            relation_head,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Ids of every parameter belonging to the shared encoder.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.name.starts_with("embeddings.") || s.name.starts_with("encoder."))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// All trainable tensors, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Half-width of the uniform initializer.
pub const INIT_RANGE: f64 = 0.02;

impl<T: Float> ModelParams<T> {
    /// Fresh parameters: weights ~ U(−0.02, 0.02), encoder biases 0, head
    /// biases [`HEAD_BIAS_INIT`], LN γ=1, β=0.
    pub fn init(layout: &ParamLayout, rng: &mut Rng) -> Self {
        Self::init_with_range(layout, rng, INIT_RANGE)
    }

    pub fn init_with_range(layout: &ParamLayout, rng: &mut Rng, range: f64) -> Self {
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let numel: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![T::zero(); numel],
                    Init::Ones => vec![T::one(); numel],
                    Init::Constant(c) => vec![T::lit(c); numel],
                    Init::Uniform => (0..numel).map(|_| T::lit(rng.uniform(-range, range))).collect(),
                };
                Tensor::new(s.shape.clone(), data).expect("shape from spec")
            })
            .collect();
        ModelParams {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Assembles parameters from named tensors, checking them against the layout.
    pub fn from_named(layout: &ParamLayout, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if named.len() != layout.len() {
            return Err(Error::Integrity(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name {
                return Err(Error::Integrity(format!(
                    "expected tensor {:?}, found {:?}",
                    spec.name, name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {name}: layout shape {:?} but stored {:?}",
                    spec.shape,
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(ModelParams {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A configured model: its config, layout and parameters travel together.
#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: ModelParams<T>,
}

impl<T: Float> Model<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = ModelParams::init(&layout, rng);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let named = params.names.into_iter().zip(params.tensors).collect();
        let params = ModelParams::from_named(&layout, named)?;
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }
}
