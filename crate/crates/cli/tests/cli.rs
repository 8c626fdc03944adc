use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gsegan::audio_io::write_wav;
use gsegan::metrics::MetricsReport;
use gsegan::{rng, Waveform};
use gsegan_cli::{exit, HistogramReport, MANIFEST_FILE};

fn gsegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsegan"))
        .args(args)
        .env_remove(gsegan_cli::SEED_ENV)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gsegan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(d: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_corpus_is_byte_identical_per_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth-corpus", "--n", "1", "--seed", "3", "--out", s(&a)]);
    ok(&["synth-corpus", "--n", "1", "--seed", "3", "--out", s(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    // The environment variable supplies the default seed.
    let c = t.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_gsegan"))
        .args(["synth-corpus", "--n", "1", "--out", s(&c)])
        .env(gsegan_cli::SEED_ENV, "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn distort_identity_replay_and_histogram() {
    let t = tempfile::tempdir().unwrap();
    let clean = t.path().join("clean");
    ok(&["synth-corpus", "--n", "4", "--seed", "1", "--out", s(&clean)]);

    let same = t.path().join("p0");
    ok(&["distort", "--input", s(&clean), "--output", s(&same), "--p", "0", "--seed", "2"]);
    for (name, bytes) in dir_bytes(&clean) {
        assert_eq!(fs::read(same.join(&name)).unwrap(), bytes, "{name}");
    }

    let hot = t.path().join("hot");
    ok(&["distort", "--input", s(&clean), "--output", s(&hot), "--p", "1", "--seed", "2"]);
    let manifest = gsegan_cli::read_manifest(&hot.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.iter().all(|m| m.applied.len() == 4));
    let again = t.path().join("replayed");
    let m = hot.join(MANIFEST_FILE);
    ok(&["distort", "--input", s(&clean), "--output", s(&again), "--replay", s(&m)]);
    for (name, _) in dir_bytes(&clean) {
        assert_eq!(fs::read(again.join(&name)).unwrap(), fs::read(hot.join(&name)).unwrap());
    }
}

#[test]
fn distort_histogram_over_ten_thousand_chunks() {
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("tiny");
    fs::create_dir_all(&input).unwrap();
    let mut r = rng::from_seed(1);
    for i in 0..10_000 {
        let w = Waveform::new((0..320).map(|_| rand::Rng::random_range(&mut r, -0.5f32..0.5)).collect(), 16000);
        write_wav(input.join(format!("c{i:05}.wav")), &w).unwrap();
    }
    let out = t.path().join("out");
    ok(&["distort", "--input", s(&input), "--output", s(&out), "--seed", "4"]);
    let h: HistogramReport = serde_json::from_str(&fs::read_to_string(out.join("histogram.json")).unwrap()).unwrap();
    assert_eq!(h.n_utterances, 10_000);
    // Binomial(4, 0.4); 0.02 is about four standard errors at 10k draws.
    let binomial = [0.1296, 0.3456, 0.3456, 0.1536, 0.0256];
    for ((e, o), b) in h.expected.iter().zip(&h.observed).zip(binomial) {
        assert!((e - b).abs() < 1e-12);
        assert!((o - b).abs() <= 0.02, "{:?}", h.observed);
    }
}

#[test]
fn evaluate_reports_and_pairing_errors() {
    let t = tempfile::tempdir().unwrap();
    let clean = t.path().join("clean");
    ok(&["synth-corpus", "--n", "2", "--seed", "1", "--out", s(&clean)]);
    let report = t.path().join("r.json");
    ok(&["evaluate", "--reference", s(&clean), "--degraded", s(&clean), "--report", s(&report)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["mcd_db", "f0_rmse_hz", "uv_error_pct"] {
        assert_eq!(json[key]["mean"], 0.0, "{key}");
        assert_eq!(json[key]["std"], 0.0, "{key}");
    }
    assert_eq!(json["n_utterances"], 2);
    let parsed: MetricsReport = serde_json::from_value(json).unwrap();
    assert_eq!(parsed.utterances.len(), 2);

    let partial = t.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(clean.join("utt_00000.wav"), partial.join("utt_00000.wav")).unwrap();
    let out = gsegan(&["evaluate", "--reference", s(&clean), "--degraded", s(&partial)]);
    assert_eq!(out.status.code(), Some(exit::DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("utt_00001.wav"));
}

#[test]
fn train_enhance_and_failure_codes() {
    let t = tempfile::tempdir().unwrap();
    let clean = t.path().join("clean");
    ok(&["synth-corpus", "--n", "4", "--seed", "1", "--out", s(&clean)]);
    let config = t.path().join("exp.toml");
    fs::write(
        &config,
        r#"
preset = "SEGAN-PTAco"
scale = "smoke"
corpus = "clean"
output_dir = "run"
width_scale = 0.0625
seed = 3
keep_checkpoints = 2

[schedule]
stage1_epochs = 1
stage2_epochs = 1
batch_size = 2

[distortion]
activation_p = 0.5
"#,
    )
    .unwrap();
    ok(&["train", "--config", s(&config)]);
    let ckpt = t.path().join("run").join("epoch_0002");
    assert!(ckpt.join("manifest.json").is_file());
    assert_eq!(fs::read_to_string(t.path().join("run/train_log.jsonl")).unwrap().lines().count(), 4);

    let enhanced = t.path().join("enhanced");
    ok(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&clean), "--output", s(&enhanced), "--seed", "1"]);
    assert_eq!(dir_bytes(&enhanced).len(), 4);
    let single = t.path().join("one.wav");
    let src = clean.join("utt_00000.wav");
    ok(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&src), "--output", s(&single), "--seed", "1"]);
    assert_eq!(fs::read(&single).unwrap(), fs::read(enhanced.join("utt_00000.wav")).unwrap());

    let bad = t.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&config).unwrap() + "\nlearning_rate = 1\n").unwrap();
    assert_eq!(gsegan(&["train", "--config", s(&bad)]).status.code(), Some(exit::CONFIG));
    let bad_p = t.path().join("bad_p.toml");
    fs::write(&bad_p, fs::read_to_string(&config).unwrap().replace("0.5", "1.5")).unwrap();
    assert_eq!(gsegan(&["train", "--config", s(&bad_p)]).status.code(), Some(exit::CONFIG));

    let blob = ckpt.join("tensors.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let out = gsegan(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&src), "--output", s(&single)]);
    assert_eq!(out.status.code(), Some(exit::INTEGRITY));

    assert_eq!(gsegan(&["train"]).status.code(), Some(exit::USAGE));
    let empty = t.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = gsegan(&["distort", "--input", s(&empty), "--output", s(&t.path().join("x"))]);
    assert_eq!(out.status.code(), Some(exit::DATA));
}

#[test]
fn gradcheck_command_passes_one_seed() {
    let t = tempfile::tempdir().unwrap();
    let report = t.path().join("g.json");
    let out = ok(&["gradcheck", "--seeds", "1", "--coords", "4", "--report", s(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
    let cases: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert!(cases.iter().any(|c| c["name"] == "generator"));
    assert!(cases.iter().all(|c| c["passed"] == true));
}
