//! Answer-level evaluation metrics.
//!
//! Single-span datasets use leaderboard-style exact match and token-bag F1
//! (maximum over alternative golds). Multi-span datasets use a set-level
//! exact-match F1 and a partial-match overlap F1.
//!
//! Overlap F1 contract: each predicted span earns the best token overlap
//! with any gold span divided by its own token count; precision is the mean
//! of those credits. Recall is the same computation from the gold side.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MrcExample;
use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, and
/// collapse whitespace. Non-ASCII punctuation is kept.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text).split_whitespace().map(str::to_string).collect()
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let bb = bag(b);
    bag(a)
        .iter()
        .map(|(t, n)| (*n).min(*bb.get(t).unwrap_or(&0)))
        .sum()
}

fn require_golds(golds: &[String]) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::Input("empty gold answer list".into()));
    }
    Ok(())
}

/// 1 iff the normalized prediction equals some normalized gold.
pub fn squad_em(pred: &str, golds: &[String]) -> Result<f64> {
    require_golds(golds)?;
    let p = normalize_answer(pred);
    Ok(if golds.iter().any(|g| normalize_answer(g) == p) { 1.0 } else { 0.0 })
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let common = overlap(pred, gold);
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Token-bag F1 against the best-matching gold.
pub fn squad_f1(pred: &str, golds: &[String]) -> Result<f64> {
    require_golds(golds)?;
    let p = tokens(pred);
    Ok(golds.iter().map(|g| token_f1(&p, &tokens(g))).fold(0.0, f64::max))
}

/// Precision, recall and F1 of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }

    const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Set-level exact match with one-to-one matching of normalized strings.
pub fn multispan_em_f1(preds: &[String], golds: &[String]) -> Prf {
    match (preds.is_empty(), golds.is_empty()) {
        (true, true) => return Prf::PERFECT,
        (true, false) | (false, true) => return Prf::ZERO,
        _ => {}
    }
    let p: Vec<String> = preds.iter().map(|s| normalize_answer(s)).collect();
    let g: Vec<String> = golds.iter().map(|s| normalize_answer(s)).collect();
    let matched = overlap(&p, &g) as f64;
    Prf::new(matched / p.len() as f64, matched / g.len() as f64)
}

fn best_credit(span: &[String], others: &[Vec<String>]) -> f64 {
    if span.is_empty() {
        return if others.iter().any(|o| o.is_empty()) { 1.0 } else { 0.0 };
    }
    others
        .iter()
        .map(|o| overlap(span, o) as f64 / span.len() as f64)
        .fold(0.0, f64::max)
}

/// Partial-match F1: per-span best token-overlap credit, averaged.
pub fn multispan_overlap_f1(preds: &[String], golds: &[String]) -> Prf {
    match (preds.is_empty(), golds.is_empty()) {
        (true, true) => return Prf::PERFECT,
        (true, false) | (false, true) => return Prf::ZERO,
        _ => {}
    }
    let p: Vec<Vec<String>> = preds.iter().map(|s| tokens(s)).collect();
    let g: Vec<Vec<String>> = golds.iter().map(|s| tokens(s)).collect();
    let precision = p.iter().map(|s| best_credit(s, &g)).sum::<f64>() / p.len() as f64;
    let recall = g.iter().map(|s| best_credit(s, &p)).sum::<f64>() / g.len() as f64;
    Prf::new(precision, recall)
}

/// Splits generated text in the `["a", "b"]` list format into spans. Text
/// without brackets is one span.
pub fn parse_answer_list(text: &str) -> Vec<String> {
    let t = text.trim();
    let Some(inner) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return if t.is_empty() { vec![] } else { vec![t.to_string()] };
    };
    let quoted: Vec<String> = inner
        .split('"')
        .skip(1)
        .step_by(2)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if !quoted.is_empty() || inner.contains('"') {
        return quoted;
    }
    inner
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Renders spans in the list format the multi-span prompt asks for.
pub fn format_answer_list(spans: &[String]) -> String {
    let items: Vec<String> = spans.iter().map(|s| format!("\"{s}\"")).collect();
    format!("[{}]", items.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answers: Vec<String>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).expect("prediction serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Squad,
    Quoref,
    Multispan,
    /// The synthetic corpus; reports every metric.
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squad" => Ok(DatasetKind::Squad),
            "quoref" => Ok(DatasetKind::Quoref),
            "multispan" => Ok(DatasetKind::Multispan),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Squad => "squad",
            DatasetKind::Quoref => "quoref",
            DatasetKind::Multispan => "multispan",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl DatasetKind {
    fn reports_em(self) -> bool {
        !matches!(self, DatasetKind::Multispan)
    }

    fn reports_spans(self) -> bool {
        matches!(self, DatasetKind::Multispan | DatasetKind::Synthetic)
    }
}

/// Dataset-level scores in percent. Metrics that do not apply to the
/// dataset kind are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub kind: DatasetKind,
    pub n_examples: usize,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub em_f1: Option<f64>,
    pub overlap_f1: Option<f64>,
}

impl MetricsReport {
    /// Flat `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "kind={}", self.kind).unwrap();
        writeln!(s, "n_examples={}", self.n_examples).unwrap();
        for (key, v) in [
            ("em", self.em),
            ("f1", self.f1),
            ("em_f1", self.em_f1),
            ("overlap_f1", self.overlap_f1),
        ] {
            if let Some(v) = v {
                writeln!(s, "{key}={v}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("report line without '=': {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).cloned();
        let num = |k: &str| -> Result<Option<f64>> {
            get(k)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Input(format!("report key {k}: {e}"))))
                .transpose()
        };
        Ok(MetricsReport {
            kind: get("kind").ok_or_else(|| Error::Input("report without kind".into()))?.parse()?,
            n_examples: get("n_examples")
                .ok_or_else(|| Error::Input("report without n_examples".into()))?
                .parse()
                .map_err(|e| Error::Input(format!("n_examples: {e}")))?,
            em: num("em")?,
            f1: num("f1")?,
            em_f1: num("em_f1")?,
            overlap_f1: num("overlap_f1")?,
        })
    }
}

/// Per-example scores in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleScores {
    pub em: f64,
    pub f1: f64,
    pub em_f1: f64,
    pub overlap_f1: f64,
}

fn multiset_equal(a: &[String], b: &[String]) -> bool {
    let mut x: Vec<String> = a.iter().map(|s| normalize_answer(s)).collect();
    let mut y: Vec<String> = b.iter().map(|s| normalize_answer(s)).collect();
    x.sort();
    y.sort();
    x == y
}

/// Scores one prediction. Joint multi-span golds compare span sets; golds
/// of single-span examples are alternatives.
pub fn score_example(pred: &[String], ex: &MrcExample) -> Result<ExampleScores> {
    let golds = ex.answer_texts();
    let joined = pred.join(" ");
    let (em, f1) = if ex.multi_span || golds.is_empty() {
        let em = if multiset_equal(pred, &golds) { 1.0 } else { 0.0 };
        let f1 = token_f1(&tokens(&joined), &tokens(&golds.join(" ")));
        (em, f1)
    } else {
        (squad_em(&joined, &golds)?, squad_f1(&joined, &golds)?)
    };
    let span_golds: Vec<String> = ex.supervision_spans().iter().map(|s| s.text.clone()).collect();
    Ok(ExampleScores {
        em,
        f1,
        em_f1: multispan_em_f1(pred, &span_golds).f1,
        overlap_f1: multispan_overlap_f1(pred, &span_golds).f1,
    })
}

/// Macro-averages per-example scores (×100). Prediction ids must cover the
/// example ids exactly once.
pub fn evaluate(preds: &[Prediction], examples: &[MrcExample], kind: DatasetKind) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::PredictionIds(format!("duplicate prediction for {}", p.id)));
        }
    }
    let example_ids: HashSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    if let Some(extra) = preds.iter().find(|p| !example_ids.contains(p.id.as_str())) {
        return Err(Error::PredictionIds(format!("prediction for unknown example {}", extra.id)));
    }
    let mut sums = [0.0; 4];
    for ex in examples {
        let p = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::PredictionIds(format!("missing prediction for {}", ex.id)))?;
        if matches!(kind, DatasetKind::Squad) && ex.answers.is_empty() {
            return Err(Error::Validation {
                id: ex.id.clone(),
                message: "no gold answers".into(),
            });
        }
        let s = score_example(&p.answers, ex)?;
        for (acc, v) in sums.iter_mut().zip([s.em, s.f1, s.em_f1, s.overlap_f1]) {
            *acc += v;
        }
    }
    let n = examples.len();
    let pct = |v: f64| if n == 0 { 0.0 } else { 100.0 * v / n as f64 };
    Ok(MetricsReport {
        kind,
        n_examples: n,
        em: kind.reports_em().then(|| pct(sums[0])),
        f1: kind.reports_em().then(|| pct(sums[1])),
        em_f1: kind.reports_spans().then(|| pct(sums[2])),
        overlap_f1: kind.reports_spans().then(|| pct(sums[3])),
    })
}
