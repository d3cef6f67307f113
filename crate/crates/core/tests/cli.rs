use std::path::Path;

use slens::cli::run_with_args;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["slens"];
    argv.extend_from_slice(args);
    run_with_args(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy(dir: &Path, seed: &str) -> std::path::PathBuf {
    let out = dir.join(format!("toy{seed}"));
    assert_eq!(run(&["toy-gen", "--d", "32", "--layers", "6", "--explosion", "2", "--decay", "5", "--seed", seed, "--corpus-rows", "16", "--out", p(&out)]), 0);
    out
}

#[test]
fn toy_then_classify_finds_the_planted_layers() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), "1");
    let before = std::fs::read(m.join("model.safetensors")).unwrap();
    let out = dir.path().join("cls");
    let corpus = m.join("corpus.ids");
    assert_eq!(run(&["classify", "--model", p(&m), "--corpus", p(&corpus), "--out", p(&out)]), 0);
    let cls: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("classification.json")).unwrap()).unwrap();
    assert_eq!(cls["explosion_layers"], serde_json::json!([2]));
    assert_eq!(cls["decay_layers"], serde_json::json!([5]));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "classify");
    assert!(manifest["outputs"].as_array().unwrap().len() >= 3);
    // Inputs are untouched.
    assert_eq!(std::fs::read(m.join("model.safetensors")).unwrap(), before);
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), "2");
    let corpus = m.join("corpus.ids");
    for cmd in ["defect-profile", "signature", "empirical-dir"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        for out in [&a, &b] {
            assert_eq!(run(&[cmd, "--model", p(&m), "--corpus", p(&corpus), "--threads", "1", "--out", p(out)]), 0);
        }
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            if name == "manifest.json" {
                continue;
            }
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{cmd}: {name:?}");
        }
    }
}

#[test]
fn compare_with_itself_is_a_zero_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), "3");
    let sig = dir.path().join("sig");
    assert_eq!(run(&["signature", "--model", p(&m), "--id", "a", "--out", p(&sig)]), 0);
    let cmp = dir.path().join("cmp");
    let s = sig.join("signature.json");
    assert_eq!(run(&["compare", p(&s), "--out", p(&cmp)]), 0);
    assert_eq!(std::fs::read_to_string(cmp.join("distance.csv")).unwrap(), "model,a\na,0.0000\n");
}

#[test]
fn every_analysis_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), "4");
    let corpus = m.join("corpus.ids");
    let cases: &[&[&str]] = &[
        &["trace-norms", "--ids", "0,3,1,4", "--capture", "3:0"],
        &["decay-eigen", "--layer", "5"],
        &["explosion-scan", "--random", "5"],
        &["ablate-attn", "--layer", "2"],
        &["vocab-scan", "--layer", "2", "--random", "5"],
        &["trim", "--generate", "2"],
        &["quant-report", "--exempt-defects"],
    ];
    for (i, c) in cases.iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let mut args: Vec<&str> = c.to_vec();
        args.extend(["--model", p(&m), "--corpus", p(&corpus), "--out", p(&out)]);
        assert_eq!(run(&args), 0, "{c:?}");
        assert!(out.join("manifest.json").is_file());
    }
    let lin = dir.path().join("lin");
    assert_eq!(run(&["linear-toy-gen", "--d", "8", "--out", p(&lin)]), 0);
    assert!(lin.join("model.safetensors").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["classify", "--bogus-flag"]), 2);
    assert_eq!(run(&["--help"]), 0);
    let missing = dir.path().join("missing.safetensors");
    let out = dir.path().join("o");
    assert_eq!(run(&["defect-profile", "--model", p(&missing), "--spec", "pythia-160m", "--out", p(&out)]), 2);
    let m = toy(dir.path(), "5");
    assert_eq!(run(&["classify", "--model", p(&m), "--out", p(&out)]), 2);
    // One iteration cannot converge.
    assert_eq!(run(&["defect-profile", "--model", p(&m), "--max-iter", "1", "--out", p(&out)]), 3);
}
