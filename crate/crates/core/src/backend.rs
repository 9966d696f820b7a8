//! One model definition, two executors: [`Recorder`] builds a differentiable
//! [`Graph`] for training, [`Eager`] runs forward-only on borrowed weights for
//! inference. Both dispatch to the same kernels.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::kernels;
use crate::model::ParamId;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub trait Backend<T: Float> {
    type Value: Clone;

    fn param(&mut self, id: ParamId) -> Self::Value;
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    fn get<'s>(&'s self, v: &'s Self::Value) -> &'s Tensor<T>;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Self::Value;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn square(&mut self, x: &Self::Value) -> Self::Value;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    /// Inverted dropout when training, identity otherwise.
    fn dropout(&mut self, x: &Self::Value, p: f64) -> Result<Self::Value>;
    fn embedding(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value>;
    fn slice_cols(&mut self, x: &Self::Value, start: usize, width: usize) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn mean_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
}

/// Records onto a [`Graph`]; `params[id]` is the leaf registered for each parameter.
pub struct Recorder<'g, 'r, T: Float> {
    pub graph: &'g mut Graph<T>,
    params: &'g [Var],
    rng: Option<&'r mut Rng>,
}

impl<'g, 'r, T: Float> Recorder<'g, 'r, T> {
    /// `rng: None` disables dropout (evaluation or gradient checking).
    pub fn new(graph: &'g mut Graph<T>, params: &'g [Var], rng: Option<&'r mut Rng>) -> Self {
        Recorder { graph, params, rng }
    }
}

impl<T: Float> Backend<T> for Recorder<'_, '_, T> {
    type Value = Var;

    fn param(&mut self, id: ParamId) -> Var {
        self.params[id.0]
    }
    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }
    fn get<'s>(&'s self, v: &'s Var) -> &'s Tensor<T> {
        self.graph.value(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.matmul(*a, *b)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }
    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        self.graph.scale(*a, factor)
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        self.graph.transpose(*a)
    }
    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        self.graph.softmax(*x, axis)
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        self.graph.sigmoid(*x)
    }
    fn relu(&mut self, x: &Var) -> Var {
        self.graph.relu(*x)
    }
    fn square(&mut self, x: &Var) -> Var {
        self.graph.square(*x)
    }
    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.graph.layer_norm(*x, *gamma, *beta, eps)
    }
    fn dropout(&mut self, x: &Var, p: f64) -> Result<Var> {
        self.graph.dropout(*x, p, self.rng.as_deref_mut())
    }
    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        self.graph.embedding(*table, ids)
    }
    fn slice_cols(&mut self, x: &Var, start: usize, width: usize) -> Result<Var> {
        self.graph.slice_cols(*x, start, width)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_cols(parts)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_rows(parts)
    }
    fn mean_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        self.graph.mean_rows(*x, start, end)
    }
}

/// Value of the forward-only executor: borrowed weights or computed activations.
#[derive(Debug)]
pub enum EagerValue<'a, T> {
    Param(&'a Tensor<T>),
    Owned(Rc<Tensor<T>>),
}

impl<T> Clone for EagerValue<'_, T> {
    fn clone(&self) -> Self {
        match self {
            EagerValue::Param(t) => EagerValue::Param(t),
            EagerValue::Owned(t) => EagerValue::Owned(Rc::clone(t)),
        }
    }
}

impl<T> std::ops::Deref for EagerValue<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            EagerValue::Param(t) => t,
            EagerValue::Owned(t) => t,
        }
    }
}

/// Forward-only execution over frozen weights. Never records a graph and
/// never applies dropout.
pub struct Eager<'a, T: Float> {
    params: &'a [Tensor<T>],
}

impl<'a, T: Float> Eager<'a, T> {
    pub fn new(params: &'a [Tensor<T>]) -> Self {
        Eager { params }
    }
}

fn owned<'a, T>(t: Tensor<T>) -> EagerValue<'a, T> {
    EagerValue::Owned(Rc::new(t))
}

impl<'a, T: Float> Backend<T> for Eager<'a, T> {
    type Value = EagerValue<'a, T>;

    fn param(&mut self, id: ParamId) -> Self::Value {
        EagerValue::Param(&self.params[id.0])
    }
    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        owned(t)
    }
    fn get<'s>(&'s self, v: &'s Self::Value) -> &'s Tensor<T> {
        v
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        kernels::matmul(a, b).map(owned)
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        kernels::add(a, b).map(owned)
    }
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Self::Value {
        owned(kernels::scale(a, T::lit(factor)))
    }
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        kernels::transpose(a).map(owned)
    }
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value> {
        kernels::softmax(x, axis).map(owned)
    }
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value {
        owned(kernels::sigmoid(x))
    }
    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        owned(kernels::relu(x))
    }
    fn square(&mut self, x: &Self::Value) -> Self::Value {
        owned(kernels::square(x))
    }
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value> {
        kernels::layer_norm(x, gamma, beta, eps).map(owned)
    }
    fn dropout(&mut self, x: &Self::Value, p: f64) -> Result<Self::Value> {
        kernels::check_dropout_p(p)?;
        Ok(x.clone())
    }
    fn embedding(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value> {
        kernels::embedding(table, ids).map(owned)
    }
    fn slice_cols(&mut self, x: &Self::Value, start: usize, width: usize) -> Result<Self::Value> {
        kernels::slice_cols(x, start, width).map(owned)
    }
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        kernels::concat_cols(&refs).map(owned)
    }
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        kernels::concat_rows(&refs).map(owned)
    }
    fn mean_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value> {
        kernels::mean_rows(x, start, end).map(owned)
    }
}
