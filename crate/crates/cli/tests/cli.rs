use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn navrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navrl")).args(args).env("NAVRL_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = navrl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--episodes", "200", "--out", p(dir)]);
    }
    for f in ["train.jsonl", "test.jsonl", "config.toml", "seed"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 201);
    assert_eq!(fs::read_to_string(a.join("seed")).unwrap(), "7\n");
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"train.jsonl\"") && manifest.contains("config_sha256"));

    ok(&["gen-data", "--seed", "8", "--episodes", "200", "--out", p(&tmp.path().join("c"))]);
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(tmp.path().join("c/train.jsonl")).unwrap());
}

#[test]
fn scripted_oracle_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--seed", "3", "--family", "fill-and-submit", "--out", p(&data)]);
    let stdout = ok(&["eval", "--data", p(&data), "--policy", "scripted-oracle", "--out", p(&tmp.path().join("eval"))]);
    assert!(stdout.contains("Step SR"));
    let mut rdr = csv::Reader::from_path(tmp.path().join("eval/report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "Step SR").unwrap();
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[col].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[data]\ntrain_episodes = 6\ntest_episodes = 4\n[sft]\nepochs = 2\n[grpo]\niterations = 4\ngroup_size = 4\n[toy]\ndense_rows = 1024\npointer_slots = 256\n").unwrap();
    let run = |tag: &str| {
        let d = tmp.path().join(tag);
        let c = p(&cfg);
        ok(&["gen-data", "--config", c, "--out", p(&d.join("data"))]);
        ok(&["label", "--config", c, "--data", p(&d.join("data")), "--out", p(&d.join("labels"))]);
        ok(&["sft", "--config", c, "--data", p(&d.join("data")), "--labels", p(&d.join("labels")), "--out", p(&d.join("sft"))]);
        ok(&[
            "grpo", "--config", c, "--data", p(&d.join("data")), "--labels", p(&d.join("labels")),
            "--init", p(&d.join("sft/params.bin")), "--workers", "2", "--out", p(&d.join("grpo")),
        ]);
        ok(&["eval", "--config", c, "--data", p(&d.join("data")), "--params", p(&d.join("grpo/params.bin")), "--out", p(&d.join("eval"))]);
        ok(&["curves", "--run", p(&d.join("grpo")), "--out", p(&d.join("curves"))]);
        d
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "data/train.jsonl", "labels/labels.jsonl", "sft/params.bin", "sft/sft_loss.csv", "grpo/params.bin",
        "grpo/iterations.csv", "grpo/rewards.csv", "eval/rows.csv", "eval/report.csv", "curves/curves.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let header = fs::read_to_string(a.join("grpo/rewards.csv")).unwrap();
    assert!(header.starts_with("iter,episode_id,t,i,r_f,r_af,r_type,r_pos,r_a,r_h,total\n"));
    let header = fs::read_to_string(a.join("grpo/iterations.csv")).unwrap();
    assert!(header.starts_with("iter,mean_reward,mean_r_f,mean_r_a,mean_r_h,objective,kl\n"));
}

#[test]
fn config_errors_exit_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[grpo]\ngroup_size = \"eight\"\n").unwrap();
    let out = navrl(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    fs::write(&cfg, "[grpo]\ngroup_size = 1\n").unwrap();
    let out = navrl(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_size"));

    let out = navrl(&["eval", "--data", "x", "--policy", "gpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = navrl(&["sft", "--data", p(&tmp.path().join("missing")), "--labels", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let data = tmp.path().join("data");
    ok(&["gen-data", "--episodes", "2", "--test-episodes", "2", "--out", p(&data)]);
    let out = navrl(&["eval", "--data", p(&data), "--policy", "remote:http://127.0.0.1:9", "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
}
