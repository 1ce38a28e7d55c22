use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ont(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ont"))
        .args(args)
        .output()
        .expect("spawn ont")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "# smoke configuration\n\
         train.epochs = 1\n\
         stft.window_ms = 16\n\
         stft.hop_ms = 4\n\
         data.clips = 4\n\
         data.duration_s = 0.6\n\
         data.manifest = data/manifest.csv\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_and_usage_errors_exit_two() {
    let o = ont(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "train", "denoise", "eval", "ablate", "subsample", "spectrogram", "gradcheck"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(code(&ont(&["no-such-command"])), 2);
    assert_eq!(code(&ont(&["denoise", "--model", "m.ontm"])), 2);
}

#[test]
fn bad_configuration_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.unknown_key = 1\n").unwrap();
    let o = ont(&["--config", cfg.to_str().unwrap(), "synth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));

    let o = ont(&["--preset", "huge", "synth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = ont(&["ablate", "--sweep", "depth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.wav");
    let o = ont(&[
        "spectrogram",
        "--input",
        missing.to_str().unwrap(),
        "--output",
        dir.path().join("x.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_train_denoise_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let data = root.join("data");
    let run = root.join("run");

    let o = ont(&["--config", &cfg, "synth", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.csv").exists());

    let o = ont(&["--config", &cfg, "--seed", "3", "train", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = run.join("model.ontm");
    assert!(model.exists());
    let echo = fs::read_to_string(run.join("run_config.txt")).unwrap();
    assert!(echo.contains("train.seed = 3"), "{echo}");
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let noisy = data.join("noisy/clip_0000.wav");
    let den = root.join("den.wav");
    let o = ont(&[
        "--config",
        &cfg,
        "denoise",
        "--model",
        model.to_str().unwrap(),
        "--input",
        noisy.to_str().unwrap(),
        "--output",
        den.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(den.exists());

    let csv = root.join("metrics.csv");
    let o = ont(&[
        "--config",
        &cfg,
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--label",
        "ont",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() > 1);
    assert!(text.contains("ont"));
}

#[test]
fn train_without_required_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.cfg");
    fs::write(
        &cfg,
        "train.epochs = 1\nstft.window_ms = 16\nstft.hop_ms = 4\n\
         data.clips = 4\ndata.duration_s = 0.6\ndata.noisy2 = false\n\
         data.manifest = data/manifest.csv\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = ont(&["--config", cfg, "synth", "--out", root.join("data").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = ont(&[
        "--config",
        cfg,
        "train",
        "--out",
        root.join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "ONT needs only noisy clips");
    let nnt = root.join("nnt.cfg");
    fs::write(&nnt, fs::read_to_string(cfg).unwrap() + "train.strategy = nnt\n").unwrap();
    let o = ont(&[
        "--config",
        nnt.to_str().unwrap(),
        "train",
        "--out",
        root.join("nnt2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("noisy2"));
}

#[test]
fn subsample_and_spectrogram_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    ont(&["--config", &cfg, "synth", "--out", root.join("data").to_str().unwrap()]);
    let wav = root.join("data/noisy/clip_0001.wav");

    let prefix = root.join("pair");
    let o = ont(&[
        "--seed",
        "5",
        "subsample",
        "--input",
        wav.to_str().unwrap(),
        "--k",
        "4",
        "--prefix",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in ["_s1.wav", "_s2.wav", "_map.txt"] {
        assert!(root.join(format!("pair{suffix}")).exists(), "{suffix}");
    }

    let pgm = root.join("spec.pgm");
    let o = ont(&[
        "--config",
        &cfg,
        "spectrogram",
        "--input",
        wav.to_str().unwrap(),
        "--output",
        pgm.to_str().unwrap(),
        "--csv",
        root.join("spec.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&pgm).unwrap().starts_with("P2"));
    let csv = fs::read_to_string(root.join("spec.csv")).unwrap();
    assert!(csv.starts_with("frame,bin0,"));
}

#[test]
fn gradcheck_passes() {
    let o = ont(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
