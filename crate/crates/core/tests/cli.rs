use std::path::Path;

use qase::cli::run;

fn qase(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qase").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn tag_prints_io_sequence() {
    let (code, out, _) = qase(&["tag", "--context", "a b c", "--spans", "2:3"]);
    assert_eq!(code, 0);
    assert_eq!(out, "O I O\n");
    let (code, out, _) = qase(&["tag", "--context", "a b c", "--spans", "0:3"]);
    assert_eq!(code, 0);
    assert_eq!(out, "I I O\n");
}

#[test]
fn invalid_input_exits_with_one() {
    assert_eq!(qase(&["tag", "--context", "a b c", "--spans", "2:9"]).0, 1);
    assert_eq!(qase(&["tag", "--context", "a b c", "--spans", "x"]).0, 1);
    assert_eq!(qase(&["train", "--bogus-flag"]).0, 1);
    assert_eq!(qase(&["frobnicate"]).0, 1);
    assert_eq!(qase(&["params", "--head", "weird", "--vocab-size", "50"]).0, 1);
}

#[test]
fn missing_file_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = qase(&["infer", "--ckpt", &p(dir.path(), "nope.ckpt"), "--data", &p(dir.path(), "nope.jsonl")]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("nope"));
}

#[test]
fn help_lists_flags() {
    let (code, out, _) = qase(&["train", "--help"]);
    assert_eq!(code, 0);
    for flag in ["--config", "--data", "--out", "--seed", "--beta", "--head", "--ordering", "--learning-rate", "--lora"] {
        assert!(out.contains(flag), "missing {flag}");
    }
    let (_, out, _) = qase(&["sweep", "--help"]);
    assert!(out.contains("--beta-grid") && out.contains("--dev") && out.contains("--heads"));
}

#[test]
fn params_matches_report_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = p(dir.path(), "c.toml");
    std::fs::write(&cfg_path, "d_model = 16\nn_heads = 2\nd_ff = 32\nhead_width = 8\nhead_heads = 2\nvocab_size = 40\n").unwrap();
    let (code, out, err) = qase(&["params", "--config", &cfg_path]);
    assert_eq!(code, 0, "{err}");
    let cfg = qase::trainer::TrainConfig::from_toml_file(&cfg_path).unwrap();
    let r = qase::trainer::report_params(&cfg, 40).unwrap();
    assert_eq!(out, format!("base={}\nwith_head={}\ndelta={}\n", r.base, r.with_head, r.delta));
    assert_eq!(r.delta, qase::head::count_params(qase::head::HeadKind::Qase, 16, 8, 2).unwrap());
    // Flags override the file.
    let (_, out, _) = qase(&["params", "--config", &cfg_path, "--head", "none"]);
    assert!(out.ends_with("delta=0\n"));
}

#[test]
fn train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "train.jsonl");
    let ckpt = p(dir.path(), "m.ckpt");
    let report = p(dir.path(), "r.txt");
    let log = p(dir.path(), "log.jsonl");
    let (code, _, err) = qase(&["gen-data", "--out", &data, "--n-examples", "6", "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    let small = ["--d-model", "16", "--n-heads", "2", "--d-ff", "16", "--n-layers", "1", "--epochs", "2"];
    let mut args = vec!["train", "--data", &data, "--out", &ckpt, "--log", &log];
    args.extend(small);
    let (code, _, err) = qase(&args);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "lml", "qase", "total", "tag_accuracy"] {
        assert!(lines[0].get(key).is_some(), "log lacks {key}");
    }

    let (code, _, err) = qase(&["eval", "--ckpt", &ckpt, "--data", &data, "--report", &report]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("em=") && text.contains("f1="), "{text}");

    let (code, preds, _) = qase(&["infer", "--ckpt", &ckpt, "--data", &data]);
    assert_eq!(code, 0);
    assert_eq!(preds.lines().count(), 6);
    let preds_path = p(dir.path(), "preds.jsonl");
    std::fs::write(&preds_path, &preds).unwrap();
    let (code, from_preds, _) = qase(&["eval", "--preds", &preds_path, "--data", &data]);
    assert_eq!(code, 0);
    assert_eq!(from_preds, text);

    // A config that disagrees with the checkpoint is rejected.
    let cfg_path = p(dir.path(), "other.toml");
    std::fs::write(&cfg_path, "d_model = 32\nn_heads = 2\n").unwrap();
    let (code, _, err) = qase(&["eval", "--ckpt", &ckpt, "--data", &data, "--config", &cfg_path]);
    assert_eq!(code, 1, "{err}");
}
