//! Span-tagging heads trained alongside the generator.
//!
//! The question-attended head projects hidden states, averages the question
//! rows into a single query that is replicated over the context length, and
//! lets it attend over the projected context before a two-class (O/I)
//! classifier. The baseline head replaces attention with a concatenation of
//! each context row and the mean question row.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor, TensorError};
use crate::codec::TagSequence;
use crate::error::{Error, Result};
use crate::layers::{attention_mask, Ctx, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};

/// Name prefix of every head tensor in a checkpoint.
pub const HEAD_PREFIX: &str = "head.";

/// Number of tag classes (O, I).
pub const TAG_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Qase,
    Baseline,
    None,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qase" => Ok(HeadKind::Qase),
            "baseline" => Ok(HeadKind::Baseline),
            "none" => Ok(HeadKind::None),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Qase => "qase",
            HeadKind::Baseline => "baseline",
            HeadKind::None => "none",
        })
    }
}

/// Shape of a head: kind, projection width `h`, and attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub width: usize,
    pub n_heads: usize,
}

/// Exact trainable-parameter count of a head over hidden size `d_model`.
pub fn count_params(kind: HeadKind, d_model: usize, h: usize, n_heads: usize) -> Result<usize> {
    if d_model == 0 || h == 0 || n_heads == 0 {
        return Err(Error::Config("head sizes must be positive".into()));
    }
    if h % n_heads != 0 {
        return Err(Error::Config(format!("head width {h} not divisible by {n_heads} heads")));
    }
    let projection = d_model * h + h;
    let classifier = TAG_CLASSES * h + TAG_CLASSES;
    Ok(match kind {
        HeadKind::Qase => projection + 4 * (h * h + h) + classifier,
        HeadKind::Baseline => projection + (2 * h * h + h) + classifier,
        HeadKind::None => 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaseHead {
    pub proj: Linear,
    pub mha: MultiHeadAttention,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHead {
    pub proj: Linear,
    pub fuse: Linear,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Qase(QaseHead),
    Baseline(BaselineHead),
}

/// Validated token ranges of one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadInput<'a> {
    pub context: Range<usize>,
    pub question: Range<usize>,
    /// Context positions that hold PAD and must not be attended to.
    pub context_pads: Option<&'a [bool]>,
}

impl Head {
    pub fn new(spec: HeadSpec, d_model: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Option<Head>> {
        count_params(spec.kind, d_model, spec.width, spec.n_heads)?;
        let h = spec.width;
        let p = |s: &str| format!("{HEAD_PREFIX}{s}");
        Ok(match spec.kind {
            HeadKind::None => None,
            HeadKind::Qase => Some(Head::Qase(QaseHead {
                proj: Linear::new(store, &p("proj"), d_model, h, rng),
                mha: MultiHeadAttention::new(store, &p("mha"), h, spec.n_heads, rng),
                classifier: Linear::new(store, &p("lin"), h, TAG_CLASSES, rng),
            })),
            HeadKind::Baseline => Some(Head::Baseline(BaselineHead {
                proj: Linear::new(store, &p("proj"), d_model, h, rng),
                fuse: Linear::new(store, &p("fuse"), 2 * h, h, rng),
                classifier: Linear::new(store, &p("lin"), h, TAG_CLASSES, rng),
            })),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Head::Qase(q) => [q.proj.param_ids(), q.mha.param_ids(), q.classifier.param_ids()].concat(),
            Head::Baseline(b) => [b.proj.param_ids(), b.fuse.param_ids(), b.classifier.param_ids()].concat(),
        }
    }

    /// Tag probabilities `[T_c, 2]` for the context rows of `hidden`.
    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, hidden: NodeId, input: &HeadInput) -> Result<NodeId> {
        match self {
            Head::Qase(q) => qase_forward(g, ctx, q, hidden, input),
            Head::Baseline(b) => baseline_forward(g, ctx, b, hidden, input),
        }
    }
}

fn check_ranges(g: &Graph, hidden: NodeId, input: &HeadInput) -> Result<()> {
    let t = g.value(hidden).rows();
    let (c, q) = (&input.context, &input.question);
    if c.is_empty() {
        return Err(Error::Input("empty context range".into()));
    }
    if q.is_empty() {
        return Err(Error::Input("empty question range".into()));
    }
    if c.end > t || q.end > t {
        return Err(Error::Input(format!("ranges {c:?}/{q:?} exceed {t} hidden rows")));
    }
    if c.start < q.end && q.start < c.end {
        return Err(Error::Input(format!("context {c:?} and question {q:?} overlap")));
    }
    if let Some(p) = input.context_pads {
        if p.len() != c.len() {
            return Err(Error::Input("context PAD mask length mismatch".into()));
        }
    }
    Ok(())
}

/// `ReLU(hidden · W_proj + b_proj)`, row-wise.
pub fn project(g: &mut Graph, ctx: &mut Ctx, proj: &Linear, hidden: NodeId) -> Result<NodeId> {
    let width = g.value(hidden).cols();
    if width != proj.d_in {
        return Err(TensorError::ShapeMismatch {
            op: "project",
            left: g.value(hidden).shape().to_vec(),
            right: vec![proj.d_in, proj.d_out],
        }
        .into());
    }
    let z = proj.forward(g, ctx, hidden)?;
    Ok(g.relu(z))
}

/// Column mean of the question rows, replicated `context_len` times.
pub fn mean_expand_question(g: &mut Graph, z_q: NodeId, context_len: usize) -> Result<NodeId> {
    let mean = g.mean_rows(z_q)?;
    Ok(g.repeat_rows(mean, context_len)?)
}

fn slice_parts(g: &mut Graph, z: NodeId, input: &HeadInput) -> Result<(NodeId, NodeId)> {
    let z_c = g.slice_rows(z, input.context.start, input.context.end)?;
    let z_q = g.slice_rows(z, input.question.start, input.question.end)?;
    Ok((z_c, z_q))
}

pub fn qase_forward(g: &mut Graph, ctx: &mut Ctx, head: &QaseHead, hidden: NodeId, input: &HeadInput) -> Result<NodeId> {
    check_ranges(g, hidden, input)?;
    let z = project(g, ctx, &head.proj, hidden)?;
    let (z_c, z_q) = slice_parts(g, z, input)?;
    let t_c = input.context.len();
    let z_q_star = mean_expand_question(g, z_q, t_c)?;
    let mask = input.context_pads.and_then(|p| attention_mask(t_c, p, false));
    let attended = head.mha.forward(g, ctx, z_q_star, z_c, z_c, mask.as_ref())?;
    // Every query row is the same, so the attention output is one vector per
    // example; the skip connection keeps per-token information.
    let attended = g.add(z_c, attended)?;
    let logits = head.classifier.forward(g, ctx, attended)?;
    Ok(g.softmax(logits))
}

pub fn baseline_forward(
    g: &mut Graph,
    ctx: &mut Ctx,
    head: &BaselineHead,
    hidden: NodeId,
    input: &HeadInput,
) -> Result<NodeId> {
    check_ranges(g, hidden, input)?;
    let z = project(g, ctx, &head.proj, hidden)?;
    let (z_c, z_q) = slice_parts(g, z, input)?;
    let z_q_star = mean_expand_question(g, z_q, input.context.len())?;
    let joined = g.concat_cols(&[z_c, z_q_star])?;
    let fused = head.fuse.forward(g, ctx, joined)?;
    let fused = g.relu(fused);
    let logits = head.classifier.forward(g, ctx, fused)?;
    Ok(g.softmax(logits))
}

/// Mean negative log-likelihood of the gold tags under `probs`. PAD
/// positions (when flagged) are excluded.
pub fn tagging_loss(g: &mut Graph, probs: NodeId, tags: &TagSequence) -> Result<NodeId> {
    let rows = g.value(probs).rows();
    if rows != tags.len() {
        return Err(Error::Input(format!(
            "tag sequence of length {} for {rows} context tokens",
            tags.len()
        )));
    }
    Ok(g.cross_entropy(probs, &tags.classes())?)
}

/// Row-wise argmax of tag probabilities.
pub fn predict_tags(probs: &Tensor) -> TagSequence {
    let classes: Vec<usize> = (0..probs.rows())
        .map(|i| {
            let r = probs.row(i);
            usize::from(r[1] > r[0])
        })
        .collect();
    TagSequence::from_classes(&classes)
}
