use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ela(args: &[&str]) -> Output {
    ela_env(args, &[])
}

fn ela_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ela"));
    cmd.args(args).env_remove("ELA_PRECISION");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn kernel_validation_passes_for_all_kernels() {
    let o = ela(&["kernels", "validate", "--all", "--samples", "1000", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for id in ["sum-sq", "sub-sq", "hadamard-exp", "mag-dir", "asym-example"] {
        assert!(out.contains(id), "{out}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&ela(&["kernels", "validate", "--kernel", "no-such-kernel"])), 2);
    assert_eq!(code(&ela(&["kernels", "validate", "--all", "--samples", "0"])), 2);
    assert_eq!(code(&ela(&["bench", "scaling", "--reps", "3"])), 2);
    assert_eq!(code(&ela(&["frobnicate"])), 2);
    let o = ela_env(&["kernels", "validate", "--all", "--samples", "10"], &[("ELA_PRECISION", "f16")]);
    assert_eq!(code(&o), 0, "validation does not depend on precision");
    let o = ela_env(&["attn", "check", "--lengths", "2", "--dims", "4", "--seeds", "1"], &[("ELA_PRECISION", "f16")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn attention_check_passes_and_catches_injected_fault() {
    let args = ["attn", "check", "--lengths", "1,5", "--dims", "4", "--seeds", "3", "--precision", "both"];
    let o = ela(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    let rows: Vec<&str> = csv.lines().collect();
    let header: Vec<&str> = rows[0].split(',').collect();
    let len_col = header.iter().position(|h| *h == "L").expect("L column");
    assert!(rows[1..].iter().any(|r| r.split(',').nth(len_col) == Some("1")));
    assert!(csv.contains("f32") && csv.contains("f64"));

    let mut faulty = args.to_vec();
    faulty.extend(["--inject-bug", "psi-sign"]);
    assert_eq!(code(&ela(&faulty)), 1);
}

#[test]
fn precision_comes_from_the_environment() {
    let args = ["attn", "check", "--lengths", "2", "--dims", "4", "--heads", "1", "--seeds", "1", "--kernel", "sum-sq"];
    let f32_run = stdout(&ela_env(&args, &[("ELA_PRECISION", "f32")]));
    assert!(f32_run.contains(",f32,") && !f32_run.contains(",f64,"), "{f32_run}");
    let default_run = stdout(&ela(&args));
    assert!(default_run.contains(",f64,") && !default_run.contains(",f32,"));
}

#[test]
fn bench_writes_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = ela(&["bench", "scaling", "--lengths", "32,64", "--dim", "8", "--out-dir", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let svg = fs::read_to_string(out.join("scaling.svg")).unwrap();
    roxmltree::Document::parse(&svg).expect("well-formed svg");

    // One length gives no slope to fit.
    let single = dir.path().join("single");
    let o = ela(&["bench", "scaling", "--lengths", "64", "--dim", "8", "--out-dir", path(&single)]);
    assert_eq!(code(&o), 0);
    let mut reader = csv::Reader::from_path(single.join("slopes.csv")).unwrap();
    for row in reader.records() {
        assert_eq!(&row.unwrap()[1], "");
    }
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = ela(&["train", "--set", "steps=3", "--set", "batch_size=2", "--out", path(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.echo", "loss.csv", "model.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let ckpt = run.join("model.ckpt");
    let args = ["sample", "--ckpt", path(&ckpt), "--prompt", "the ", "--n", "16", "--temp", "0"];
    let a = ela(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, ela(&args).stdout);
    assert!(a.stdout.len() >= 16);

    assert_eq!(code(&ela(&["sample", "--ckpt", path(&ckpt), "--temp", "-1"])), 2);
    assert_eq!(code(&ela(&["sample", "--ckpt", path(&dir.path().join("missing.ckpt"))])), 1);
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ela(&["train", "--set", "no_such_key=1", "--out", path(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn figure_preset_writes_every_chart() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("figs");
    let o = ela(&[
        "ablate",
        "--preset",
        "paper-figures",
        "--set",
        "steps=2",
        "--set",
        "batch_size=1",
        "--set",
        "context_len=16",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for stem in ["bias", "hyper_link", "memory", "kernels"] {
        assert!(out.join(format!("{stem}.csv")).is_file(), "missing {stem}.csv");
        let svg = fs::read_to_string(out.join(format!("{stem}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).expect("well-formed svg");
    }
    for f in ["loss_comparison.svg", "summary.csv", "curves.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}
