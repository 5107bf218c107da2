//! Parameter storage and the small set of layers shared by the encoders,
//! fusion modules and the set-prediction decoder.

use std::collections::BTreeMap;

use rand::Rng;

use crate::numerics::{DiffArray, Graph, NodeId, NumericsError};

/// Named, ordered parameter arrays of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, DiffArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DiffArray) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&DiffArray, NumericsError> {
        self.arrays
            .get(name)
            .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffArray)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(DiffArray::len).sum()
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` plus zero bias `[fan_out]`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(
            format!("{name}.weight"),
            DiffArray::matrix(fan_in, fan_out, w).expect("sized above"),
        );
        self.insert(format!("{name}.bias"), DiffArray::zeros(vec![fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gain"), DiffArray::full(vec![dim], 1.0));
        self.insert(format!("{name}.shift"), DiffArray::zeros(vec![dim]));
    }

    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        // Box-Muller keeps this independent of a distribution crate.
        let values = (0..n)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.insert(name, DiffArray::new(shape, values).expect("sized above"));
    }
}

/// Read view of a [`ParamStore`] that binds its arrays into a graph under a
/// name prefix, so two models can share one graph.
#[derive(Clone, Copy, Debug)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: &'a str,
    trainable: bool,
}

impl<'a> Params<'a> {
    pub fn new(store: &'a ParamStore, prefix: &'a str, trainable: bool) -> Self {
        Self {
            store,
            prefix,
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn prefix(&self) -> &'a str {
        self.prefix
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Graph input name of a parameter.
    pub fn key(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Result<NodeId, NumericsError> {
        let value = self.store.get(name)?;
        Ok(g.param(&self.key(name), value, self.trainable))
    }

    /// Gradients of every stored parameter after `g.backward`, in store order.
    /// Parameters that took no part in the graph get zeros.
    pub fn collect_grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.store
            .iter()
            .map(|(name, arr)| {
                let grad = g
                    .input_grad(&self.key(name))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; arr.len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

pub fn linear(g: &mut Graph, p: Params, name: &str, x: NodeId) -> Result<NodeId, NumericsError> {
    let w = p.get(g, &format!("{name}.weight"))?;
    let b = p.get(g, &format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm(g: &mut Graph, p: Params, name: &str, x: NodeId) -> Result<NodeId, NumericsError> {
    let gain = p.get(g, &format!("{name}.gain"))?;
    let shift = p.get(g, &format!("{name}.shift"))?;
    let n = g.layer_norm(x)?;
    let y = g.mul(n, gain)?;
    g.add(y, shift)
}

/// Two-layer GELU MLP.
pub fn mlp(g: &mut Graph, p: Params, name: &str, x: NodeId) -> Result<NodeId, NumericsError> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{name}.fc2"), h)
}

pub fn init_mlp(ps: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) {
    ps.init_linear(&format!("{name}.fc1"), d_in, d_hidden, rng);
    ps.init_linear(&format!("{name}.fc2"), d_hidden, d_out, rng);
}

pub fn init_attention(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) {
    for proj in ["q", "k", "v", "o"] {
        ps.init_linear(&format!("{name}.{proj}"), d, d, rng);
    }
}

/// Error returned when every key of an attention call is masked.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Multi-head scaled dot-product attention.
///
/// `key_mask[k] == true` marks key `k` as attendable; masked keys receive
/// exactly zero weight. `None` attends to every key.
pub fn attention(
    g: &mut Graph,
    p: Params,
    name: &str,
    queries: NodeId,
    keys: NodeId,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<NodeId, AttentionError> {
    let d = *g.shape(queries).last().unwrap_or(&0);
    let lk = g.shape(keys)[0];
    if d % heads != 0 {
        return Err(NumericsError::ShapeMismatch {
            node: g.len(),
            op: "attention",
            detail: format!("width {d} not divisible by {heads} heads"),
        }
        .into());
    }
    // Masked keys are dropped rather than biased, so the result does not
    // depend on how many masked keys there are.
    let keys = match key_mask {
        Some(mask) => {
            if mask.len() != lk {
                return Err(NumericsError::ShapeMismatch {
                    node: g.len(),
                    op: "attention",
                    detail: format!("mask of {} for {lk} keys", mask.len()),
                }
                .into());
            }
            let kept: Vec<usize> = (0..lk).filter(|&k| mask[k]).collect();
            if kept.is_empty() {
                return Err(AttentionError::EmptyKeys);
            }
            if kept.len() == lk {
                keys
            } else {
                g.gather(keys, &kept)?
            }
        }
        None => keys,
    };
    let q = linear(g, p, &format!("{name}.q"), queries)?;
    let k = linear(g, p, &format!("{name}.k"), keys)?;
    let v = linear(g, p, &format!("{name}.v"), keys)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let w = g.softmax(scores)?;
        outs.push(g.matmul(w, vh)?);
    }
    let o = g.concat(&outs, 1)?;
    Ok(linear(g, p, &format!("{name}.o"), o)?)
}

/// Pre-norm self-attention + MLP block.
pub fn encoder_layer(
    g: &mut Graph,
    p: Params,
    name: &str,
    x: NodeId,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<NodeId, AttentionError> {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let a = attention(g, p, &format!("{name}.attn"), h, h, mask, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{name}.ln2"), x)?;
    let m = mlp(g, p, &format!("{name}.mlp"), h)?;
    Ok(g.add(x, m)?)
}

pub fn init_encoder_layer(ps: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) {
    ps.init_layer_norm(&format!("{name}.ln1"), d);
    init_attention(ps, &format!("{name}.attn"), d, rng);
    ps.init_layer_norm(&format!("{name}.ln2"), d);
    init_mlp(ps, &format!("{name}.mlp"), d, d_ff, d, rng);
}

/// 1-D sinusoidal position table `[len, d]`.
pub fn sinusoid_1d(len: usize, d: usize) -> DiffArray {
    let mut v = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            v[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    DiffArray::matrix(len, d, v).expect("sized above")
}

/// 2-D sinusoidal table `[rows·cols, d]`: first half of the channels encodes
/// the row, second half the column.
pub fn sinusoid_2d(rows: usize, cols: usize, d: usize) -> DiffArray {
    let half = d / 2;
    let mut v = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * d;
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                let (ar, ac) = (r as f64 * freq, c as f64 * freq);
                v[base + i] = if i % 2 == 0 { ar.sin() } else { ar.cos() };
                v[base + half + i] = if i % 2 == 0 { ac.sin() } else { ac.cos() };
            }
        }
    }
    DiffArray::matrix(rows * cols, d, v).expect("sized above")
}
