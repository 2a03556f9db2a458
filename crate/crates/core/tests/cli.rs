use std::fs;
use std::path::Path;

use lm_infinite::cli::parse_and_dispatch_to;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("lm-infinite").chain(args.iter().copied());
    let code = parse_and_dispatch_to(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn mask_ranges_example() {
    let (code, out) = run(&[
        "mask",
        "--seq-len",
        "5",
        "--n-global",
        "1",
        "--n-local",
        "2",
        "--format",
        "ranges",
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        out,
        "0: [0,1) [0,1)\n1: [0,1) [0,2)\n2: [0,1) [1,3)\n3: [0,1) [2,4)\n4: [0,1) [3,5)\n"
    );
}

#[test]
fn mask_dense_format() {
    let (code, out) = run(&[
        "mask",
        "--seq-len",
        "5",
        "--n-global",
        "0",
        "--n-local",
        "2",
        "--format",
        "dense",
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().last(), Some("00011"));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["eval", "--help"]).0, 0);
    assert_eq!(run(&["mask", "--no-such-flag"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["eval", "--mode", "sideways"]).0, 2);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.lmtm");
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "1 2 3\n").unwrap();
    let (code, _) = run(&[
        "eval",
        "--model",
        p(&missing),
        "--corpus",
        p(&corpus),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code, 1);
    // n_local larger than l_pretrain is rejected.
    assert_eq!(
        run(&[
            "mask",
            "--seq-len",
            "4",
            "--n-global",
            "1",
            "--n-local",
            "3",
            "--l-pretrain",
            "2"
        ])
        .0,
        1
    );
}

#[test]
fn train_eval_diag_generate_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train_out = dir.path().join("train");
    let corpus = dir.path().join("eval.txt");
    let (code, _) = run(&[
        "synth",
        "--corpus",
        p(&corpus),
        "--sequences",
        "3",
        "--seq-len",
        "80",
        "--vocab-size",
        "16",
        "--seed",
        "4",
    ]);
    assert_eq!(code, 0);

    let (code, out) = run(&[
        "train",
        "--out",
        p(&train_out),
        "--steps",
        "3",
        "--batch-size",
        "2",
        "--vocab-size",
        "16",
        "--d-model",
        "8",
        "--n-layers",
        "1",
        "--n-heads",
        "2",
        "--train-len",
        "8",
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0, "{out}");
    let model = train_out.join("model.lmtm");
    assert!(model.exists());
    assert_eq!(
        fs::read_to_string(train_out.join("loss.csv"))
            .unwrap()
            .lines()
            .next(),
        Some("step,loss")
    );
    let effective = fs::read_to_string(train_out.join("effective_config.txt")).unwrap();
    assert!(effective.contains("steps=3\n") && effective.contains("seed=1\n"));

    let eval_out = dir.path().join("eval");
    let (code, out) = run(&[
        "eval",
        "--model",
        p(&model),
        "--corpus",
        p(&corpus),
        "--mode",
        "lambda",
        "--milestones",
        "1x,2x,4x,8x",
        "--gen-len",
        "5",
        "--out",
        p(&eval_out),
        "--seed",
        "0",
        "--n-global",
        "2",
        "--n-local",
        "8",
        "--l-pretrain",
        "8",
    ]);
    assert_eq!(code, 0, "{out}");
    let csv = fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(4).unwrap().starts_with("lambda,64,"));
    assert!(eval_out.join("nll.csv").exists() && eval_out.join("continuation.csv").exists());

    // A milestone no sequence reaches fails the run.
    let (code, _) = run(&[
        "eval",
        "--model",
        p(&model),
        "--corpus",
        p(&corpus),
        "--milestones",
        "1x,16x",
        "--out",
        p(&eval_out),
    ]);
    assert_eq!(code, 1);

    let diag_out = dir.path().join("diag");
    let (code, out) = run(&[
        "diag",
        "--model",
        p(&model),
        "--corpus",
        p(&corpus),
        "--out",
        p(&diag_out),
    ]);
    assert_eq!(code, 0, "{out}");
    for f in [
        "entropy.csv",
        "logits.csv",
        "pca.csv",
        "effective_config.txt",
    ] {
        assert!(diag_out.join(f).exists(), "{f}");
    }

    let (code, out) = run(&[
        "generate",
        "--model",
        p(&model),
        "--prompt",
        "1 2 3",
        "--n-new",
        "4",
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.split_whitespace().count(), 4);

    let (code, out) = run(&[
        "bench",
        "--model",
        p(&model),
        "--seq-lens",
        "16,32",
        "--repeats",
        "3",
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# mask run\nn_global=3\nn_local=4\nformat=dense\n").unwrap();
    let out_dir = dir.path().join("out");
    let (code, out) = run(&[
        "mask",
        "--config",
        p(&cfg),
        "--seq-len",
        "6",
        "--n-local",
        "2",
        "--format",
        "ranges",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().last(), Some("5: [0,3) [4,6)"));
    let effective = fs::read_to_string(out_dir.join("effective_config.txt")).unwrap();
    assert!(effective.contains("n_global=3\n"));
    assert!(effective.contains("n_local=2\n"));
    assert!(effective.contains("format=ranges\n"));
    assert!(effective.contains("seq_len=6\n"));
}

#[test]
fn corpus_parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.txt");
    fs::write(&corpus, "1 2\n3 x\n").unwrap();
    let err = lm_infinite::corpus::load_corpus(&corpus)
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 2"), "{err}");
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert!(lm_infinite::corpus::load_corpus(&empty).unwrap().is_empty());
}
