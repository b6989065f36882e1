use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tokvox::formats::read_grid;
use tokvox::journal::read_journal;

fn tokvox(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokvox"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = tokvox(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Corpus, a 4-step codec and a 4-step LM in one temp dir.
struct Pipeline {
    dir: tempfile::TempDir,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ok(d, &["make-data", "--out", "data", "--count", "4", "--words", "2", "--word-len", "128"]);
        ok(d, &["codec-train", "--data", "data/manifest.jsonl", "--out", "codec.s3ck", "--steps", "4"]);
        ok(d, &["lm-train", "--codec", "codec.s3ck", "--data", "data/manifest.jsonl", "--out", "lm.s3ck", "--steps", "4"]);
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn synth(&self, tag: &str, extra: &[&str]) -> (Vec<u8>, PathBuf) {
        let wav = format!("{tag}.wav");
        let journal = format!("{tag}.ndjson");
        let mut args = vec![
            "synth", "--codec", "codec.s3ck", "--lm", "lm.s3ck", "--text", "w1 w2", "--prompt-text", "w3",
            "--prompt-wav", "data/utt0000.wav", "--output", &wav, "--max-frames", "6", "--journal", &journal,
            "--no-wall-time",
        ];
        args.extend_from_slice(extra);
        ok(self.path(), &args);
        (fs::read(self.path().join(&wav)).unwrap(), self.path().join(journal))
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tokvox(dir.path(), &["gradcheck", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tokvox(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = tokvox(dir.path(), &["eval", "--codec", "missing.s3ck", "--data", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.s3ck"));
    let o = tokvox(dir.path(), &["--preset", "huge", "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert_eq!(out.lines().count(), tokvox_core::gradsuite::SUITES.len());
    assert!(out.lines().all(|l| l.contains("max_rel_error") && l.ends_with("ok")), "{out}");
    let j = read_journal(&dir.path().join("journal.ndjson")).unwrap();
    assert_eq!(j.iter().filter(|r| r["event"] == "gradcheck").count(), tokvox_core::gradsuite::SUITES.len());
}

#[test]
fn encode_decode_preserves_length() {
    let p = Pipeline::new();
    let d = p.path();
    ok(d, &["codec-encode", "--codec", "codec.s3ck", "--input", "data/utt0001.wav", "--output", "a.s3cg"]);
    let g = read_grid(&d.join("a.s3cg")).unwrap();
    assert_eq!(g.grid.levels(), 4);
    ok(d, &["codec-decode", "--codec", "codec.s3ck", "--input", "a.s3cg", "--output", "a.wav"]);
    let n = |f: &str| hound::WavReader::open(d.join(f)).unwrap().len();
    assert_eq!(n("a.wav"), n("data/utt0001.wav"));

    // an unaligned input is padded on encode and trimmed on decode
    let short: Vec<f32> = (0..1001).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    tokvox::wav::write_wav(&d.join("odd.wav"), &short, 16000).unwrap();
    ok(d, &["codec-encode", "--codec", "codec.s3ck", "--input", "odd.wav", "--output", "odd.s3cg"]);
    assert_eq!(read_grid(&d.join("odd.s3cg")).unwrap().pad, 7);
    ok(d, &["codec-decode", "--codec", "codec.s3ck", "--input", "odd.s3cg", "--output", "odd2.wav"]);
    assert_eq!(n("odd2.wav"), 1001);

    let o = tokvox(d, &["--journal", "e.ndjson", "eval", "--codec", "codec.s3ck", "--data", "data/manifest.jsonl"]);
    assert!(o.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["mel_distance"].as_f64().unwrap() >= 0.0);
    assert!(metrics["stft_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn single_stream_synthesis_matches_plain_decoding() {
    let p = Pipeline::new();
    let (plain, _) = p.synth("plain", &["--greedy"]);
    let (one, j1) = p.synth("one", &["--greedy", "--parallel-streams", "1", "--mask-prob", "0.5"]);
    assert_eq!(plain, one);
    let (sampled_a, _) = p.synth("sa", &["--seed", "5"]);
    let (sampled_b, _) = p.synth("sb", &["--seed", "5"]);
    assert_eq!(sampled_a, sampled_b);

    let (_, j3) = p.synth("three", &["--greedy", "--parallel-streams", "3", "--mapi-seed", "11"]);
    let weights: Vec<Vec<f64>> = read_journal(&j3)
        .unwrap()
        .into_iter()
        .filter(|r| r["event"] == "mapi-weights")
        .map(|r| serde_json::from_value(r["weights"].clone()).unwrap())
        .collect();
    assert!(!weights.is_empty());
    for w in &weights {
        assert_eq!(w.len(), 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let ones = read_journal(&j1).unwrap();
    assert!(ones.iter().filter(|r| r["event"] == "mapi-weights").all(|r| r["weights"] == serde_json::json!([1.0])));
}

#[test]
fn same_seed_reproduces_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-data", "--out", "data", "--count", "2", "--words", "2", "--word-len", "128"]);
    let run = |tag: &str| {
        let j = format!("{tag}.ndjson");
        let out = format!("{tag}.s3ck");
        ok(d, &["codec-train", "--data", "data/manifest.jsonl", "--out", &out, "--steps", "3", "--journal", &j, "--no-wall-time", "--seed", "9"]);
        (fs::read(d.join(j)).unwrap(), fs::read(d.join(out)).unwrap())
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let j = String::from_utf8(a.0).unwrap();
    assert!(j.lines().any(|l| l.contains("\"codec-step\"")));
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-data", "--out", "data", "--count", "2", "--words", "2", "--word-len", "128"]);
    let mut cfg = tokvox::RunConfig::tiny();
    cfg.data.manifest = Some("data/manifest.jsonl".into());
    cfg.schedule.codec_steps = 2;
    cfg.seed = 3;
    cfg.save(&d.join("run.toml")).unwrap();
    ok(d, &["--config", "run.toml", "codec-train", "--out", "c.s3ck"]);
    let saved = tokvox::RunConfig::load(&d.join("c.toml")).unwrap();
    assert_eq!(saved.seed, 3);
    assert_eq!(saved.schedule.codec_steps, 2);
    let j = read_journal(&d.join("journal.ndjson")).unwrap();
    assert_eq!(j[0]["seed"], 3);
    assert_eq!(j.iter().filter(|r| r["event"] == "codec-step").count(), 2);
}
