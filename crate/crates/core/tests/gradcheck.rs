mod common;

use common::{head_case, head_gradcheck, numeric_grad, random_tensor, relative_error};
use qase::autodiff::{Graph, Tensor};
use qase::head::HeadKind;
use qase::layers::Ctx;
use qase::params::ParamStore;
use qase::plm::{Generator, LoraConfig, PlmConfig, BOS};
use qase::trainer::lm_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn qase_head_matches_finite_differences() {
    for seed in 0..10 {
        let err = head_gradcheck(&head_case(HeadKind::Qase, seed), H);
        assert!(err <= TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn baseline_head_matches_finite_differences() {
    for seed in 0..5 {
        let err = head_gradcheck(&head_case(HeadKind::Baseline, seed), H);
        assert!(err <= TOL, "seed {seed}: relative error {err}");
    }
}

/// Checks d(sum(w ⊙ f(x)))/dx for one unary graph op.
fn check_unary(build: impl Fn(&mut Graph, qase::autodiff::NodeId) -> qase::autodiff::NodeId, x: Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probe = {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = build(&mut g, xn);
        let shape = g.value(y).shape().to_vec();
        let n = g.value(y).numel();
        Tensor::new(shape, random_tensor(&mut rng, 1, n).into_data()).unwrap()
    };
    let eval = |x: &Tensor| {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = build(&mut g, xn);
        let w = g.constant(probe.clone());
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), true);
    let y = build(&mut g, xn);
    let w = g.constant(probe.clone());
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(xn).unwrap().to_vec();
    let numeric: Vec<f64> = (0..x.numel())
        .map(|i| {
            let mut up = x.clone();
            up.data_mut()[i] += H;
            let mut down = x.clone();
            down.data_mut()[i] -= H;
            (eval(&up) - eval(&down)) / (2.0 * H)
        })
        .collect();
    let err = relative_error(&analytic, &numeric);
    assert!(err <= TOL, "relative error {err}");
}

#[test]
fn primitive_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, 3, 4);
    let other = random_tensor(&mut rng, 4, 2);
    check_unary(|g, x| g.softmax(x), x.clone());
    check_unary(|g, x| g.relu(x), x.clone());
    check_unary(|g, x| g.transpose(x).unwrap(), x.clone());
    check_unary(|g, x| g.mean_rows(x).unwrap(), x.clone());
    check_unary(
        |g, x| {
            let m = g.mean_rows(x).unwrap();
            g.repeat_rows(m, 5).unwrap()
        },
        x.clone(),
    );
    check_unary(
        |g, x| {
            let o = g.constant(other.clone());
            g.matmul(x, o).unwrap()
        },
        x.clone(),
    );
    check_unary(
        |g, x| {
            let a = g.slice_cols(x, 1, 3).unwrap();
            let b = g.slice_rows(x, 0, 3).unwrap();
            let b = g.slice_cols(b, 0, 2).unwrap();
            g.concat_cols(&[a, b]).unwrap()
        },
        x.clone(),
    );
    check_unary(
        |g, x| {
            let gain = g.constant(Tensor::new(vec![4], vec![1.0, 0.5, -2.0, 1.5]).unwrap());
            let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.0, 0.2, -0.3]).unwrap());
            g.layer_norm(x, gain, bias, 1e-5).unwrap()
        },
        x.clone(),
    );
    check_unary(|g, table| g.gather(table, &[2, 0, 2, 1]).unwrap(), x.clone());
    let probs = {
        let mut p = random_tensor(&mut rng, 3, 4);
        for i in 0..3 {
            qase::autodiff::softmax_in_place(&mut p.data_mut()[i * 4..(i + 1) * 4]);
        }
        p
    };
    check_unary(|g, p| g.cross_entropy(p, &[1, 3, 0]).unwrap(), probs);
}

#[test]
fn generator_with_lora_matches_finite_differences() {
    let cfg = PlmConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        vocab_size: 9,
        max_seq_len: 16,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let mut gen = Generator::new(cfg, &mut store, &mut rng).unwrap();
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
        enabled: true,
    };
    gen.apply_lora(&mut store, lora, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    // Zero-initialized adapter halves would hide the adapter path.
    for id in ids {
        if store.get(id).name.ends_with("lora_b") {
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let enc_ids = [5, 6, 3, 7, 8];
    let dec_in = [BOS, 6, 8];
    let targets = [6, 8, 2];
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(s);
        let enc = gen.encode(&mut g, &mut ctx, &enc_ids).unwrap();
        let logits = gen.decode(&mut g, &mut ctx, enc, &enc_ids, &dec_in).unwrap();
        let l = lm_loss(&mut g, logits, &targets).unwrap();
        (g, l)
    };
    let (mut g, l) = loss(&store);
    let grads = g.backward(l).unwrap();
    let mut checked = 0;
    for (pid, param) in store.iter() {
        if !param.trainable {
            assert!(grads.param(pid).is_none(), "{} is frozen", param.name);
            continue;
        }
        let analytic = grads.param(pid).expect("trainable parameter has a gradient").to_vec();
        let numeric = numeric_grad(&store, pid, H, |s| {
            let (g, l) = loss(s);
            g.value(l).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "{}: relative error {err}", param.name);
        checked += 1;
    }
    assert_eq!(checked, 2 * gen.adapted_matrix_count());
}
