use std::path::Path;
use std::process::{Command, Output};

fn promptvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptvc")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn corpus_train_convert_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = ok(&promptvc(&["synth-corpus", "--out", s(&corpus), "--clips-per-speaker", "3", "--dev-per-speaker", "1"]));
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());

    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "total_steps = 2\nbatch_size = 2\nmax_frames = 20\nlog_every = 1\n\n[model.dit]\nlayers = 1\nhidden = 16\nmlp = 32\nheads = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = ok(&promptvc(&["train", "--manifest", manifest, "--config", s(&config), "--out", s(&run)]));
    assert!(out.contains("step 2"), "{out}");
    let ck = run.join("checkpoint.pvck");
    assert!(ck.exists());
    assert!(run.join("train_log.tsv").exists());

    let mel = dir.path().join("conv.mel");
    let wav = dir.path().join("conv.wav");
    for (target, steps) in [(&mel, "1"), (&wav, "2")] {
        ok(&promptvc(&[
            "convert",
            "--source",
            s(&corpus.join("spk0_000.wav")),
            "--target",
            s(&corpus.join("spk1_001.wav")),
            "--steps",
            steps,
            "--checkpoint",
            s(&ck),
            "--out",
            s(target),
        ]));
        assert!(std::fs::metadata(target).unwrap().len() > 0);
    }
    let converted = promptvc_core::melfile::load_mel(&mel).unwrap();
    assert!(converted.values.iter().all(|v| v.is_finite()));

    let report = dir.path().join("report.json");
    let out = ok(&promptvc(&["evaluate", "--manifest", manifest, "--checkpoint", s(&ck), "--steps", "1,6", "--out", s(&report), "--sources-per-pair", "1"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("steps")).count(), 2, "{out}");
    let report = promptvc_core::eval::EvalReport::load(&report).unwrap();
    assert_eq!(report.rows.len(), 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = promptvc(&["train", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));

    let out = promptvc(&["convert", "--source", "a.wav", "--target", "b.wav", "--checkpoint", s(&missing), "--out", "x.mel"]);
    assert!(!out.status.success());

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "learning_rate = 1\n").unwrap();
    std::fs::write(dir.path().join("m.tsv"), "").unwrap();
    let out = promptvc(&["train", "--manifest", s(&dir.path().join("m.tsv")), "--config", s(&config), "--out", s(dir.path())]);
    assert!(!out.status.success());
}
