//! Pre-norm transformer encoder-decoder with tied input/output embeddings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, PAD};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{attention_mask, dropout, Ctx, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};

/// Name prefix of every generator tensor.
pub const GEN_PREFIX: &str = "gen.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Residual dropout, active only while training.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for PlmConfig {
    fn default() -> Self {
        PlmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 0,
            max_seq_len: 512,
            dropout: 0.0,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocabulary has no room for reserved tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub enabled: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            enabled: false,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.alpha <= 0.0 {
            return Err(Error::Config("LoRA rank and alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} not in [0, 1)", self.dropout)));
        }
        if self.rank >= d_model {
            return Err(Error::Config(format!(
                "LoRA rank {} must be smaller than d_model {d_model}",
                self.rank
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Parameter layout of the generator. Values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: PlmConfig,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    lora: Option<LoraConfig>,
}

impl Generator {
    pub fn new(cfg: PlmConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.add_uniform(format!("{GEN_PREFIX}embed"), &[cfg.vocab_size, d], d, rng);
        let encoder = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{GEN_PREFIX}enc.{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.n_heads, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.d_ff, rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, &format!("{GEN_PREFIX}enc.norm"), d);
        let decoder = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{GEN_PREFIX}dec.{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.n_heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, cfg.n_heads, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.d_ff, rng),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, &format!("{GEN_PREFIX}dec.norm"), d);
        Ok(Generator {
            cfg,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            lora: None,
        })
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    fn attention_blocks_mut(&mut self) -> Vec<&mut MultiHeadAttention> {
        let mut out: Vec<&mut MultiHeadAttention> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.attn);
        }
        for l in &mut self.decoder {
            out.push(&mut l.self_attn);
            out.push(&mut l.cross_attn);
        }
        out
    }

    /// Number of weight matrices that receive adapters.
    pub fn adapted_matrix_count(&self) -> usize {
        4 * (self.encoder.len() + 2 * self.decoder.len())
    }

    /// Freezes every generator tensor and attaches a trainable low-rank
    /// adapter to each attention projection.
    pub fn apply_lora(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        if !cfg.enabled {
            return Err(Error::Config("apply_lora called with LoRA disabled".into()));
        }
        if self.lora.is_some() {
            return Err(Error::Config("LoRA already applied".into()));
        }
        cfg.validate(self.cfg.d_model)?;
        for id in self.param_ids() {
            store.set_trainable(id, false);
        }
        for block in self.attention_blocks_mut() {
            for lin in block.projections_mut() {
                lin.attach_adapter(store, cfg.rank, cfg.alpha, cfg.dropout, rng);
            }
        }
        self.lora = Some(cfg);
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed];
        let ln = |l: &LayerNorm| [l.gain, l.bias];
        for l in &self.encoder {
            ids.extend(ln(&l.ln_attn));
            ids.extend(l.attn.param_ids());
            ids.extend(ln(&l.ln_ff));
            ids.extend(l.ff.up.param_ids());
            ids.extend(l.ff.down.param_ids());
        }
        ids.extend(ln(&self.enc_norm));
        for l in &self.decoder {
            ids.extend(ln(&l.ln_self));
            ids.extend(l.self_attn.param_ids());
            ids.extend(ln(&l.ln_cross));
            ids.extend(l.cross_attn.param_ids());
            ids.extend(ln(&l.ln_ff));
            ids.extend(l.ff.up.param_ids());
            ids.extend(l.ff.down.param_ids());
        }
        ids.extend(ln(&self.dec_norm));
        ids
    }

    fn embed_tokens(&self, g: &mut Graph, ctx: &mut Ctx, ids: &[usize]) -> Result<NodeId> {
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::TooLong {
                len: ids.len(),
                limit: self.cfg.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let table = ctx.p(g, self.embed);
        let e = g.gather(table, ids)?;
        let e = g.scale(e, (self.cfg.d_model as f64).sqrt());
        let pe = g.constant(sinusoidal_positions(ids.len(), self.cfg.d_model));
        let x = g.add(e, pe)?;
        Ok(dropout(g, ctx, x, self.cfg.dropout)?)
    }

    /// Encoder hidden states `[T, d_model]`; row i is the state of token i.
    /// PAD tokens are masked out as attention keys.
    pub fn encode(&self, g: &mut Graph, ctx: &mut Ctx, ids: &[usize]) -> Result<NodeId> {
        let mut x = self.embed_tokens(g, ctx, ids)?;
        let pads: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        let mask = attention_mask(ids.len(), &pads, false);
        for layer in &self.encoder {
            let h = layer.ln_attn.forward(g, ctx, x)?;
            let a = layer.attn.forward(g, ctx, h, h, h, mask.as_ref())?;
            let a = dropout(g, ctx, a, self.cfg.dropout)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, ctx, x)?;
            let f = layer.ff.forward(g, ctx, h)?;
            let f = dropout(g, ctx, f, self.cfg.dropout)?;
            x = g.add(x, f)?;
        }
        Ok(self.enc_norm.forward(g, ctx, x)?)
    }

    /// Next-token logits `[T_dec, vocab]` for every decoder position.
    pub fn decode(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        encoder_out: NodeId,
        encoder_ids: &[usize],
        decoder_ids: &[usize],
    ) -> Result<NodeId> {
        if decoder_ids.first() != Some(&BOS) {
            return Err(Error::Input("decoder prefix must start with BOS".into()));
        }
        let mut y = self.embed_tokens(g, ctx, decoder_ids)?;
        let t = decoder_ids.len();
        let causal = attention_mask(t, &vec![false; t], true);
        let enc_pads: Vec<bool> = encoder_ids.iter().map(|&i| i == PAD).collect();
        let cross = attention_mask(t, &enc_pads, false);
        for layer in &self.decoder {
            let h = layer.ln_self.forward(g, ctx, y)?;
            let a = layer.self_attn.forward(g, ctx, h, h, h, causal.as_ref())?;
            let a = dropout(g, ctx, a, self.cfg.dropout)?;
            y = g.add(y, a)?;
            let h = layer.ln_cross.forward(g, ctx, y)?;
            let c = layer.cross_attn.forward(g, ctx, h, encoder_out, encoder_out, cross.as_ref())?;
            let c = dropout(g, ctx, c, self.cfg.dropout)?;
            y = g.add(y, c)?;
            let h = layer.ln_ff.forward(g, ctx, y)?;
            let f = layer.ff.forward(g, ctx, h)?;
            let f = dropout(g, ctx, f, self.cfg.dropout)?;
            y = g.add(y, f)?;
        }
        let y = self.dec_norm.forward(g, ctx, y)?;
        let table = ctx.p(g, self.embed);
        let tt = g.transpose(table)?;
        Ok(g.matmul(y, tt)?)
    }

    /// Logits for the token following `prefix`.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        encoder_out: NodeId,
        encoder_ids: &[usize],
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        let logits = self.decode(g, ctx, encoder_out, encoder_ids, prefix)?;
        let v = g.value(logits);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Greedy decoding until EOS or `max_new` tokens. Returns generated ids
    /// without BOS/EOS.
    pub fn greedy(&self, store: &ParamStore, encoder_ids: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(store);
        let enc = self.encode(&mut g, &mut ctx, encoder_ids)?;
        let enc_value = g.value(enc).clone();
        let mut prefix = vec![BOS];
        for _ in 0..max_new {
            if prefix.len() >= self.cfg.max_seq_len {
                break;
            }
            let mut step = Graph::new();
            let enc_node = step.constant(enc_value.clone());
            let logits = self.decode_step(&mut step, &mut ctx, enc_node, encoder_ids, &prefix)?;
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("position table shape")
}
