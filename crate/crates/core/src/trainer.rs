//! Joint fine-tuning of the generator and a span-tagging head, generation
//! only inference, the β sweep, and parameter accounting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::codec::{spans_to_tags, TagSequence};
use crate::data::{synthetic_lexicon, MrcExample};
use crate::error::{Error, Result};
use crate::head::{count_params, predict_tags, tagging_loss, Head, HeadInput, HeadKind, HeadSpec};
use crate::layers::Ctx;
use crate::metrics::{evaluate, format_answer_list, parse_answer_list, DatasetKind, MetricsReport, Prediction};
use crate::params::{ParamId, ParamStore};
use crate::plm::{
    Checkpoint, EncodedPrompt, Generator, LoraConfig, PlmConfig, PromptOrdering, PromptTemplate, Vocab, BOS, EOS,
    GEN_PREFIX,
};
use crate::text::{char_len, detokenize};

const INIT_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Epoch-mean total loss must improve by at least this much...
pub const EARLY_STOP_DELTA: f64 = 1e-4;
/// ...within this many consecutive epochs, or training stops.
pub const EARLY_STOP_PATIENCE: usize = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadKind,
    pub ordering: PromptOrdering,
    pub lora: LoraConfig,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Residual dropout inside the generator.
    pub dropout: f64,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
    /// Projection width of the head; `None` means `d_model`.
    pub head_width: Option<usize>,
    pub head_heads: usize,
    pub max_answer_len: usize,
    pub early_stop: bool,
    /// Adds the list-format sentence to the prompt; `None` enables it when
    /// the training corpus contains any multi-span example.
    pub multi_span_prompt: Option<bool>,
    /// Vocabulary size for parameter accounting when no corpus is given.
    pub vocab_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            learning_rate: 1e-4,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            head: HeadKind::Qase,
            ordering: PromptOrdering::ContextFirst,
            lora: LoraConfig::default(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 512,
            dropout: 0.0,
            weight_decay: 0.0,
            head_width: None,
            head_heads: 4,
            max_answer_len: 32,
            early_stop: true,
            multi_span_prompt: None,
            vocab_size: None,
        }
    }
}

impl TrainConfig {
    /// Settings for training the toy model from scratch on a small
    /// synthetic corpus.
    pub fn toy() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            epochs: 300,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a non-negative number, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_answer_len == 0 {
            return Err(Error::Config("epochs, batch_size and max_answer_len must be at least 1".into()));
        }
        if self.head != HeadKind::None {
            count_params(self.head, self.d_model, self.head_width(), self.head_heads)?;
        }
        if self.lora.enabled {
            self.lora.validate(self.d_model)?;
        }
        self.plm_config(EOS + 1).validate()
    }

    pub fn head_width(&self) -> usize {
        self.head_width.unwrap_or(self.d_model)
    }

    pub fn head_spec(&self) -> Option<HeadSpec> {
        (self.head != HeadKind::None).then(|| HeadSpec {
            kind: self.head,
            width: self.head_width(),
            n_heads: self.head_heads,
        })
    }

    pub fn plm_config(&self, vocab_size: usize) -> PlmConfig {
        PlmConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }

    pub fn template_for(&self, corpus: &[MrcExample]) -> PromptTemplate {
        PromptTemplate::new(
            self.ordering,
            self.multi_span_prompt.unwrap_or_else(|| corpus.iter().any(|e| e.multi_span)),
        )
    }
}

/// The three loss terms of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lml: f64,
    pub qase: f64,
    pub total: f64,
}

/// `total = lml + beta · qase`.
pub fn combined_loss(lml: f64, qase: f64, beta: f64) -> Result<LossBreakdown> {
    if !lml.is_finite() || !qase.is_finite() || !beta.is_finite() {
        return Err(Error::Input(format!("non-finite loss input lml={lml} qase={qase} beta={beta}")));
    }
    Ok(LossBreakdown {
        lml,
        qase,
        total: lml + beta * qase,
    })
}

/// Mean token cross-entropy of `targets` under `logits` (one row per
/// target). Only answer tokens are scored.
pub fn lm_loss(g: &mut Graph, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::Input("empty LM target".into()));
    }
    let probs = g.softmax(logits);
    Ok(g.cross_entropy(probs, targets)?)
}

/// Generator, optional head, and their parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub vocab: Vocab,
    pub template: PromptTemplate,
    pub generator: Generator,
    pub head: Option<Head>,
    pub head_spec: Option<HeadSpec>,
    pub store: ParamStore,
    pub max_answer_len: usize,
}

/// Text the decoder is trained to produce for an example.
pub fn answer_target(ex: &MrcExample, template: &PromptTemplate) -> String {
    let spans: Vec<String> = ex.supervision_spans().iter().map(|s| s.text.clone()).collect();
    if template.multi_span {
        format_answer_list(&spans)
    } else {
        spans.first().cloned().unwrap_or_default()
    }
}

/// An example turned into model inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub prompt: EncodedPrompt,
    pub decoder_input: Vec<usize>,
    pub decoder_target: Vec<usize>,
    pub tags: TagSequence,
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab: Vocab, template: PromptTemplate) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = rng_for(cfg.seed, INIT_STREAM);
        let mut generator = Generator::new(cfg.plm_config(vocab.len()), &mut store, &mut init)?;
        if cfg.lora.enabled {
            generator.apply_lora(&mut store, cfg.lora, &mut init)?;
        }
        let head_spec = cfg.head_spec();
        let head = match head_spec {
            Some(spec) => Head::new(spec, cfg.d_model, &mut store, &mut rng_for(cfg.seed, HEAD_STREAM))?,
            None => None,
        };
        Ok(Model {
            vocab,
            template,
            generator,
            head,
            head_spec,
            store,
            max_answer_len: cfg.max_answer_len,
        })
    }

    /// Builds the vocabulary from the corpus, the prompt template and the
    /// synthetic lexicon, which is part of every vocabulary.
    pub fn for_corpus(cfg: &TrainConfig, corpus: &[MrcExample]) -> Result<Self> {
        let template = cfg.template_for(corpus);
        let scaffold = template.build("x", "x")?;
        let targets: Vec<String> = corpus.iter().map(|e| answer_target(e, &template)).collect();
        let vocab = Vocab::build(
            std::iter::once(scaffold.as_str())
                .chain(synthetic_lexicon())
                .chain(corpus.iter().flat_map(|e| [e.context.as_str(), e.question.as_str()]))
                .chain(targets.iter().map(String::as_str)),
        );
        Model::new(cfg, vocab, template)
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(GEN_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn prepare(&self, ex: &MrcExample) -> Result<Prepared> {
        if ex.answers.is_empty() {
            return Err(Error::Validation {
                id: ex.id.clone(),
                message: "training example without answers".into(),
            });
        }
        let prompt = self
            .template
            .encode(&self.vocab, &ex.context, &ex.question, self.generator.cfg.max_seq_len)?;
        let answer = self.vocab.encode_text(&answer_target(ex, &self.template));
        let tags = spans_to_tags(&prompt.context_offsets, ex.supervision_spans(), char_len(&ex.context))?;
        let mut decoder_input = vec![BOS];
        decoder_input.extend(&answer);
        let mut decoder_target = answer;
        decoder_target.push(EOS);
        Ok(Prepared {
            prompt,
            decoder_input,
            decoder_target,
            tags,
        })
    }

    /// Records the forward pass of one example. With `beta` and a head the
    /// total is `lml + beta · qase`; without a head it is `lml`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        p: &Prepared,
        beta: f64,
        use_head: bool,
    ) -> Result<ExampleForward> {
        let ids = &p.prompt.ids;
        let enc = self.generator.encode(g, ctx, ids)?;
        let logits = self.generator.decode(g, ctx, enc, ids, &p.decoder_input)?;
        let lml = lm_loss(g, logits, &p.decoder_target)?;
        let (head_loss, tag_probs, total) = match (&self.head, use_head) {
            (Some(head), true) => {
                let input = HeadInput {
                    context: p.prompt.context_range.clone(),
                    question: p.prompt.question_range.clone(),
                    context_pads: None,
                };
                let probs = head.forward(g, ctx, enc, &input)?;
                let q = tagging_loss(g, probs, &p.tags)?;
                let weighted = g.scale(q, beta);
                let total = g.add(lml, weighted)?;
                (Some(q), Some(probs), total)
            }
            _ => (None, None, lml),
        };
        let lml_v = g.value(lml).item();
        let qase_v = head_loss.map(|q| g.value(q).item()).unwrap_or(0.0);
        Ok(ExampleForward {
            total,
            tag_probs,
            losses: LossBreakdown {
                lml: lml_v,
                qase: qase_v,
                total: g.value(total).item(),
            },
        })
    }

    /// Loss and per-parameter gradients for one example, indexed by
    /// parameter id (empty for frozen parameters).
    pub fn example_gradients(
        &self,
        p: &Prepared,
        beta: f64,
        use_head: bool,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>, Option<(usize, usize)>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx {
            store: &self.store,
            dropout_rng: dropout,
        };
        let fwd = self.forward(&mut g, &mut ctx, p, beta, use_head)?;
        let grads = g.backward(fwd.total)?;
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.store.len()];
        for (pid, grad) in grads.params() {
            out[pid.index()] = grad.to_vec();
        }
        let tags = fwd.tag_probs.map(|probs| {
            let pred = predict_tags(g.value(probs));
            let correct = pred.0.iter().zip(&p.tags.0).filter(|(a, b)| a == b).count();
            (correct, p.tags.len())
        });
        Ok((fwd.losses, out, tags))
    }

    /// Fraction of context tokens whose argmax tag equals the gold tag.
    pub fn tag_accuracy(&self, examples: &[MrcExample]) -> Result<Option<f64>> {
        let Some(head) = &self.head else {
            return Ok(None);
        };
        let (mut correct, mut total) = (0, 0);
        for ex in examples {
            let p = self.prepare(ex)?;
            let mut g = Graph::new();
            let mut ctx = Ctx::eval(&self.store);
            let enc = self.generator.encode(&mut g, &mut ctx, &p.prompt.ids)?;
            let input = HeadInput {
                context: p.prompt.context_range.clone(),
                question: p.prompt.question_range.clone(),
                context_pads: None,
            };
            let probs = head.forward(&mut g, &mut ctx, enc, &input)?;
            let pred = predict_tags(g.value(probs));
            correct += pred.0.iter().zip(&p.tags.0).filter(|(a, b)| a == b).count();
            total += p.tags.len();
        }
        Ok(Some(correct as f64 / total.max(1) as f64))
    }

    /// Predictions from the in-memory generator (values not rounded).
    pub fn predict(&self, examples: &[MrcExample]) -> Result<Vec<Prediction>> {
        examples
            .iter()
            .map(|ex| {
                Ok(Prediction {
                    id: ex.id.clone(),
                    answers: generate_answers(
                        &self.generator,
                        &self.store,
                        &self.vocab,
                        &self.template,
                        self.max_answer_len,
                        ex,
                    )?,
                })
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            self.generator.cfg,
            self.generator.lora().copied(),
            self.head_spec,
            self.template,
            self.max_answer_len,
            self.vocab.tokens().to_vec(),
        )
    }
}

pub struct ExampleForward {
    pub total: NodeId,
    pub tag_probs: Option<NodeId>,
    pub losses: LossBreakdown,
}

/// Adam moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: OptimizerState {
                first: zeros.clone(),
                second: zeros,
                step: 0,
            },
        }
    }

    /// Applies one update; `grads[i]` is empty for parameters without a
    /// gradient this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            if !param.trainable || grads[i].is_empty() {
                continue;
            }
            let (m, v) = (&mut self.state.first[i], &mut self.state.second[i]);
            for (((w, g), m), v) in param.value.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lml: f64,
    pub qase: f64,
    pub total: f64,
    pub tag_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint()
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
            .collect()
    }
}

/// Trains a fresh model on `corpus`.
pub fn train(corpus: &[MrcExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(corpus: &[MrcExample], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, cfg)?;
    while !trainer.finished() {
        let entry = trainer.run_epoch()?;
        on_epoch(&entry);
    }
    Ok(trainer.into_outcome())
}

/// Epoch-at-a-time training state.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    prepared: Vec<Prepared>,
    adam: Adam,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    order: Vec<usize>,
    log: Vec<EpochLog>,
    stalled: usize,
    step: usize,
}

impl Trainer {
    pub fn new(corpus: &[MrcExample], cfg: &TrainConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("empty training corpus".into()));
        }
        let model = Model::for_corpus(cfg, corpus)?;
        let prepared: Vec<Prepared> = corpus.iter().map(|ex| model.prepare(ex)).collect::<Result<_>>()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            adam: Adam::new(&model.store, cfg.learning_rate, cfg.weight_decay),
            shuffle: rng_for(cfg.seed, SHUFFLE_STREAM),
            dropout: rng_for(cfg.seed, DROPOUT_STREAM),
            order: (0..prepared.len()).collect(),
            model,
            prepared,
            log: Vec::new(),
            stalled: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// True once every epoch has run or early stopping has triggered.
    pub fn finished(&self) -> bool {
        self.log.len() >= self.cfg.epochs || (self.cfg.early_stop && self.stalled >= EARLY_STOP_PATIENCE)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = &self.cfg;
        let model = &mut self.model;
        self.order.shuffle(&mut self.shuffle);
        let mut sums = LossBreakdown {
            lml: 0.0,
            qase: 0.0,
            total: 0.0,
        };
        let (mut correct, mut tagged) = (0, 0);
        for batch in self.order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = vec![Vec::new(); model.store.len()];
            for &i in batch {
                let (losses, grads, tags) =
                    model.example_gradients(&self.prepared[i], cfg.beta, true, Some(&mut self.dropout))?;
                if !losses.total.is_finite() {
                    return Err(Error::NonFiniteLoss { step: self.step });
                }
                sums.lml += losses.lml;
                sums.qase += losses.qase;
                sums.total += losses.total;
                if let Some((c, t)) = tags {
                    correct += c;
                    tagged += t;
                }
                for (a, g) in acc.iter_mut().zip(grads) {
                    if g.is_empty() {
                        continue;
                    }
                    if a.is_empty() {
                        *a = g;
                    } else {
                        for (x, y) in a.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for x in a.iter_mut() {
                    *x *= scale;
                }
            }
            self.adam.step(&mut model.store, &acc);
            self.step += 1;
        }
        let n = self.prepared.len() as f64;
        let entry = EpochLog {
            epoch: self.log.len() + 1,
            lml: sums.lml / n,
            qase: sums.qase / n,
            total: sums.total / n,
            tag_accuracy: model.head.is_some().then(|| correct as f64 / tagged.max(1) as f64),
        };
        let improved = self
            .log
            .last()
            .map_or(true, |prev| prev.total - entry.total >= EARLY_STOP_DELTA);
        self.stalled = if improved { 0 } else { self.stalled + 1 };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            log: self.log,
        }
    }
}

/// Rebuilds the generator from a checkpoint. Head tensors are never read.
pub fn load_generator(ckpt: &Checkpoint) -> Result<(Generator, ParamStore, Vocab)> {
    let m = &ckpt.manifest;
    let vocab = Vocab::from_tokens(m.vocab.clone()).ok_or_else(|| Error::Checkpoint("invalid vocabulary".into()))?;
    if vocab.len() != m.plm.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary of {} tokens but config says {}",
            vocab.len(),
            m.plm.vocab_size
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::new(m.plm, &mut store, &mut rng)?;
    if let Some(lora) = m.lora {
        generator.apply_lora(&mut store, lora, &mut rng)?;
    }
    ckpt.restore_into(&mut store, |name| name.starts_with(GEN_PREFIX))?;
    Ok((generator, store, vocab))
}

/// Checks that a checkpoint's model shape matches `cfg`.
pub fn check_compatible(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    let m = &ckpt.manifest.plm;
    let expect = cfg.plm_config(m.vocab_size);
    if *m != expect {
        return Err(Error::Checkpoint(format!("checkpoint model {m:?} does not match config {expect:?}")));
    }
    if ckpt.manifest.lora.is_some() != cfg.lora.enabled {
        return Err(Error::Checkpoint("checkpoint and config disagree on LoRA".into()));
    }
    Ok(())
}

/// Greedy answer generation for one example.
pub fn generate_answers(
    generator: &Generator,
    store: &ParamStore,
    vocab: &Vocab,
    template: &PromptTemplate,
    max_answer_len: usize,
    ex: &MrcExample,
) -> Result<Vec<String>> {
    let prompt = template.encode(vocab, &ex.context, &ex.question, generator.cfg.max_seq_len)?;
    let ids = generator.greedy(store, &prompt.ids, max_answer_len)?;
    let words: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
    let text = detokenize(&words);
    Ok(if template.multi_span {
        parse_answer_list(&text)
    } else if text.trim().is_empty() {
        vec![]
    } else {
        vec![text]
    })
}

/// Greedy generation with the generator only.
pub fn infer(ckpt: &Checkpoint, examples: &[MrcExample], ordering: PromptOrdering) -> Result<Vec<Prediction>> {
    let (generator, store, vocab) = load_generator(ckpt)?;
    let template = PromptTemplate::new(ordering, ckpt.manifest.template.multi_span);
    examples
        .iter()
        .map(|ex| {
            Ok(Prediction {
                id: ex.id.clone(),
                answers: generate_answers(&generator, &store, &vocab, &template, ckpt.manifest.max_answer_len, ex)?,
            })
        })
        .collect()
}

/// Parses `lo:hi:step` (inclusive) or a comma-separated list of values.
pub fn parse_beta_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid beta grid {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let values: Vec<f64> = if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (lo, hi, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((lo + i as f64 * step) * 1e10).round() / 1e10)
            .collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|b| !(*b >= 0.0)) {
        return Err(bad());
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub head: HeadKind,
    pub ordering: PromptOrdering,
    pub report: MetricsReport,
}

/// Trains and evaluates once per (beta, head) pair. Rows are sorted by
/// beta, then by the order of `heads`.
pub fn sweep_beta(
    train_set: &[MrcExample],
    dev_set: &[MrcExample],
    cfg: &TrainConfig,
    grid: &[f64],
    heads: &[HeadKind],
    kind: DatasetKind,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || heads.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut betas = grid.to_vec();
    betas.sort_by(|a, b| a.total_cmp(b));
    let mut rows = Vec::new();
    for &beta in &betas {
        for &head in heads {
            let run_cfg = TrainConfig { beta, head, ..cfg.clone() };
            let outcome = train(train_set, &run_cfg)
                .map_err(|e| Error::Config(format!("beta={beta} head={head}: {e}")))?;
            let preds = infer(&outcome.checkpoint(), dev_set, cfg.ordering)?;
            rows.push(SweepRow {
                beta,
                head,
                ordering: cfg.ordering,
                report: evaluate(&preds, dev_set, kind)?,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated sweep table with a header line.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("beta\thead\tordering\tn_examples\tem\tf1\tem_f1\toverlap_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.beta,
            r.head,
            r.ordering,
            r.report.n_examples,
            fmt(r.report.em),
            fmt(r.report.f1),
            fmt(r.report.em_f1),
            fmt(r.report.overlap_f1)
        ));
    }
    out
}

/// Trainable parameters without and with the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub base: usize,
    pub with_head: usize,
    pub delta: usize,
}

/// Counts trainable tensors of the configured model. Frozen base weights
/// (under LoRA) are excluded.
pub fn report_params(cfg: &TrainConfig, vocab_size: usize) -> Result<ParamReport> {
    let tokens: Vec<String> = Vocab::build(std::iter::empty())
        .tokens()
        .iter()
        .cloned()
        .chain((0..vocab_size.saturating_sub(5)).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocab::from_tokens(tokens).ok_or_else(|| Error::Config("bad vocabulary size".into()))?;
    let model = Model::new(cfg, vocab, PromptTemplate::default())?;
    let base: usize = model
        .generator_params()
        .iter()
        .map(|&id| model.store.get(id))
        .filter(|p| p.trainable)
        .map(|p| p.value.numel())
        .sum();
    let with_head = model.store.trainable_count();
    Ok(ParamReport {
        base,
        with_head,
        delta: with_head - base,
    })
}
