#![allow(dead_code)]

use qase::autodiff::{Graph, Tensor};
use qase::codec::{Tag, TagSequence};
use qase::head::{tagging_loss, Head, HeadInput, HeadKind, HeadSpec};
use qase::layers::Ctx;
use qase::metrics::{multispan_em_f1, multispan_overlap_f1, squad_em, squad_f1};
use qase::params::{ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// A head with random parameters, random hidden states and random gold tags.
pub struct HeadCase {
    pub head: Head,
    pub store: ParamStore,
    pub hidden: Tensor,
    pub context: std::ops::Range<usize>,
    pub question: std::ops::Range<usize>,
    pub tags: TagSequence,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn head_case(kind: HeadKind, seed: u64) -> HeadCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_model = rng.gen_range(3..7);
    let n_heads = rng.gen_range(1..3);
    let width = n_heads * rng.gen_range(2..4);
    let mut store = ParamStore::new();
    let spec = HeadSpec { kind, width, n_heads };
    let head = Head::new(spec, d_model, &mut store, &mut rng).unwrap().unwrap();
    let t_q = rng.gen_range(1..4);
    let t_c = rng.gen_range(2..6);
    let hidden = random_tensor(&mut rng, 1 + t_c + 1 + t_q, d_model);
    let tags = TagSequence((0..t_c).map(|_| if rng.gen_bool(0.4) { Tag::I } else { Tag::O }).collect());
    HeadCase {
        head,
        store,
        hidden,
        context: 1..1 + t_c,
        question: 2 + t_c..2 + t_c + t_q,
        tags,
    }
}

impl HeadCase {
    pub fn input(&self) -> HeadInput<'static> {
        HeadInput {
            context: self.context.clone(),
            question: self.question.clone(),
            context_pads: None,
        }
    }

    pub fn loss(&self, store: &ParamStore) -> f64 {
        let mut g = Graph::new();
        let h = g.constant(self.hidden.clone());
        let probs = self.head.forward(&mut g, &mut Ctx::eval(store), h, &self.input()).unwrap();
        let l = tagging_loss(&mut g, probs, &self.tags).unwrap();
        g.value(l).item()
    }

    pub fn analytic(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut g = Graph::new();
        let h = g.constant(self.hidden.clone());
        let probs = self.head.forward(&mut g, &mut Ctx::eval(&self.store), h, &self.input()).unwrap();
        let l = tagging_loss(&mut g, probs, &self.tags).unwrap();
        let grads = g.backward(l).unwrap();
        self.head
            .param_ids()
            .into_iter()
            .map(|pid| (pid, grads.param(pid).map(|g| g.to_vec()).unwrap_or_default()))
            .collect()
    }
}

/// Central-difference gradient of `loss` with respect to parameter `pid`.
pub fn numeric_grad(store: &ParamStore, pid: ParamId, h: f64, loss: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut work = store.clone();
    let n = store.get(pid).value.numel();
    (0..n)
        .map(|i| {
            let orig = store.get(pid).value.data()[i];
            work.get_mut(pid).value.data_mut()[i] = orig + h;
            let up = loss(&work);
            work.get_mut(pid).value.data_mut()[i] = orig - h;
            let down = loss(&work);
            work.get_mut(pid).value.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over a whole tensor; 0 when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst per-tensor relative error over every head parameter.
pub fn head_gradcheck(case: &HeadCase, h: f64) -> f64 {
    case.analytic()
        .into_iter()
        .map(|(pid, a)| {
            let n = numeric_grad(&case.store, pid, h, |s| case.loss(s));
            relative_error(&a, &n)
        })
        .fold(0.0, f64::max)
}

/// One hand-computed metric case; `expected` is a fraction.
#[derive(Deserialize)]
pub struct Case {
    pub name: String,
    pub metric: String,
    pub pred: Vec<String>,
    pub gold: Vec<String>,
    pub expected: (u32, u32),
}

pub fn load_cases() -> Vec<Case> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metric_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn score(case: &Case) -> f64 {
    match case.metric.as_str() {
        "squad_em" => squad_em(&case.pred[0], &case.gold).unwrap(),
        "squad_f1" => squad_f1(&case.pred[0], &case.gold).unwrap(),
        "em_f1" => multispan_em_f1(&case.pred, &case.gold).f1,
        "overlap_f1" => multispan_overlap_f1(&case.pred, &case.gold).f1,
        other => panic!("unknown metric {other}"),
    }
}

