//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Result, Tensor, TensorError};
use crate::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Per-forward state: the parameter values and, in training mode, the RNG
/// that drives adapter dropout.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Ctx {
            store,
            dropout_rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            store,
            dropout_rng: Some(rng),
        }
    }

    pub fn p(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param(self.store, id)
    }
}

/// Inverted dropout with drop probability `p`; identity outside training.
pub fn dropout(g: &mut Graph, ctx: &mut Ctx, x: NodeId, p: f64) -> Result<NodeId> {
    let Some(rng) = ctx.dropout_rng.as_deref_mut() else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

/// Low-rank adapter `x·A·B` scaled by `alpha / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[d_out], d_in, rng);
        Linear {
            w,
            b,
            d_in,
            d_out,
            adapter: None,
        }
    }

    /// Attaches a rank-`rank` adapter: `A` random, `B` zero, so the initial
    /// output is unchanged.
    pub fn attach_adapter(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let base = store.get(self.w).name.trim_end_matches(".w").to_string();
        let a = store.add_uniform(format!("{base}.lora_a"), &[self.d_in, rank], self.d_in, rng);
        let b = store.add(format!("{base}.lora_b"), Tensor::zeros(&[rank, self.d_out]), true);
        self.adapter = Some(Adapter {
            a,
            b,
            scale: alpha / rank as f64,
            dropout,
        });
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(g, self.w);
        let b = ctx.p(g, self.b);
        let xw = g.matmul(x, w)?;
        let y = g.add_row(xw, b)?;
        let Some(ad) = &self.adapter else {
            return Ok(y);
        };
        let input = dropout(g, ctx, x, ad.dropout)?;
        let a = ctx.p(g, ad.a);
        let bb = ctx.p(g, ad.b);
        let xa = g.matmul(input, a)?;
        let delta = g.matmul(xa, bb)?;
        let delta = g.scale(delta, ad.scale);
        g.add(y, delta)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w, self.b];
        if let Some(ad) = &self.adapter {
            ids.extend([ad.a, ad.b]);
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let gain = ctx.p(g, self.gain);
        let bias = ctx.p(g, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, ctx, x)?;
        let h = g.relu(h);
        self.down.forward(g, ctx, h)
    }
}

/// Scaled dot-product attention with `n_heads` heads over width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "width {d} not divisible by {n_heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            n_heads,
        }
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }

    /// `mask`, when given, is an additive `[T_q, T_k]` score mask holding 0
    /// or `-inf`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let (wq, wk, wv) = (
            g.value(query).cols(),
            g.value(key).cols(),
            g.value(value).cols(),
        );
        if wq != self.q.d_in || wk != self.k.d_in || wv != self.v.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "mha",
                left: g.value(query).shape().to_vec(),
                right: g.value(key).shape().to_vec(),
            });
        }
        if g.value(key).rows() != g.value(value).rows() {
            return Err(TensorError::ShapeMismatch {
                op: "mha",
                left: g.value(key).shape().to_vec(),
                right: g.value(value).shape().to_vec(),
            });
        }
        let q = self.q.forward(g, ctx, query)?;
        let k = self.k.forward(g, ctx, key)?;
        let v = self.v.forward(g, ctx, value)?;
        let d = self.q.d_out;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.o.forward(g, ctx, cat)
    }
}

/// Additive mask that hides the keys flagged in `hidden_keys` (and, when
/// `causal`, keys after the query position).
pub fn attention_mask(t_q: usize, hidden_keys: &[bool], causal: bool) -> Option<Tensor> {
    let t_k = hidden_keys.len();
    if !causal && !hidden_keys.iter().any(|&h| h) {
        return None;
    }
    let mut data = vec![0.0; t_q * t_k];
    for i in 0..t_q {
        for j in 0..t_k {
            if hidden_keys[j] || (causal && j > i) {
                data[i * t_k + j] = f64::NEG_INFINITY;
            }
        }
    }
    Some(Tensor::new(vec![t_q, t_k], data).expect("mask shape"))
}
