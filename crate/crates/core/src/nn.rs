//! Parameter registry, layers and attention built on the tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    /// Model component owning this parameter (used for cost attribution).
    pub module: String,
    pub value: Tensor<S>,
}

/// Registry of every trainable tensor; each name is registered exactly once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: &str, module: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("parameter {name:?} registered twice")));
        }
        self.params.push(Param { name: name.to_string(), module: module.to_string(), value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn values(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.module.clone()).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Loads every parameter onto `tape` as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `y = x · W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        module: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = uniform_tensor(rng, vec![d_in, d_out], glorot_bound(d_in, d_out));
        let weight = store.register(&format!("{name}.weight"), module, w)?;
        let bias = store.register(&format!("{name}.bias"), module, Tensor::zeros(vec![d_out]))?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, params[self.weight.0])?;
        tape.add_row(y, params[self.bias.0])
    }

    /// Overwrites the weight with the (rectangular) identity and zeroes the bias.
    pub fn set_identity<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let w = store.get_mut(self.weight);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let (r, c) = (i / self.d_out, i % self.d_out);
            *v = if r == c { S::one() } else { S::zero() };
        }
        store.get_mut(self.bias).data_mut().iter_mut().for_each(|v| *v = S::zero());
    }
}

/// Single-head scaled dot-product attention composed from primitive tape ops.
///
/// Returns `(softmax(q·kᵀ/√d)·v, weights)` where `d` is the query feature width.
pub fn scaled_dot_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if tape.shape(k).last() != Some(&d) {
        return Err(Error::Shape(format!(
            "attention: query {:?} and key {:?} feature dims differ",
            tape.shape(q),
            tape.shape(k)
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, S::from_f64(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax(logits)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with learned query/key/value/output maps of size D×D.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        module: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), module, dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.key"), module, dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.value"), module, dim, dim)?,
            output: Linear::new(store, rng, &format!("{name}.output"), module, dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.query.num_params()
    }

    fn scale<S: Scalar>(&self) -> S {
        S::from_f64(1.0 / ((self.dim / self.heads) as f64).sqrt())
    }

    /// Attention with `groups` independent (query, key/value) blocks stacked along rows.
    ///
    /// Returns the output `[G·n_q × D]` and head-averaged weights `[G·n_q × n_k]`.
    pub fn forward_grouped<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        query: Var,
        key: Var,
        value: Var,
        groups: usize,
    ) -> Result<(Var, Tensor<S>)> {
        let q = self.query.forward(tape, params, query)?;
        let k = self.key.forward(tape, params, key)?;
        let v = self.value.forward(tape, params, value)?;
        let (att, weights) = tape.attention(q, k, v, groups, self.heads, self.scale())?;
        Ok((self.output.forward(tape, params, att)?, weights))
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<(Var, Tensor<S>)> {
        self.forward_grouped(tape, params, query, key, value, 1)
    }

    /// One `[1 × D]` query shared by all `groups` key/value blocks.
    ///
    /// The query is repeated before projection so each block's cost is independent.
    pub fn forward_shared_query<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        query: Var,
        kv: Var,
        groups: usize,
    ) -> Result<(Var, Tensor<S>)> {
        let q = tape.gather_rows(query, &vec![0; groups])?;
        let q = self.query.forward(tape, params, q)?;
        let k = self.key.forward(tape, params, kv)?;
        let v = self.value.forward(tape, params, kv)?;
        let (att, weights) = tape.attention(q, k, v, groups, self.heads, self.scale())?;
        Ok((self.output.forward(tape, params, att)?, weights))
    }

    /// Sets all four maps to identity with zero bias.
    pub fn set_identity<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for l in [self.query, self.key, self.value, self.output] {
            l.set_identity(store);
        }
    }
}

/// Mean over `axis`, keeping it with extent 1.
pub fn mean_pool<S: Scalar>(tape: &mut Tape<S>, x: Var, axis: usize) -> Result<Var> {
    tape.mean(x, axis)
}
