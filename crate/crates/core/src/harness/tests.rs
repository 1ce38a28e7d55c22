use super::*;
use crate::metrics::snr_db;
use crate::network::save_model;
use crate::subsampler::SamplerMode;
use crate::training::Strategy;

fn small(clips: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.clips = clips;
    c.data.duration_s = 0.6;
    c.train.stft = gradcheck_stft();
    c.train.epochs = 1;
    c
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(20);
    cfg.data.seed = 11;
    let m = cmd_synth(&cfg, &dir.path().join("a")).unwrap();
    cmd_synth(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(read_dir_bytes(&dir.path().join("a")), read_dir_bytes(&dir.path().join("b")));
    assert_eq!(m.items.len(), 20);
    assert_eq!(m.split(Split::Test).len(), 5);
    for s in Strategy::ALL {
        DatasetManifest::validate_for(&m.items, s).unwrap();
    }
    let loaded = DatasetManifest::load(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(loaded, m);
    assert!(dir.path().join("a/run_config.txt").exists());
}

#[test]
fn synth_hits_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(6);
    cfg.data.snr_db = vec![5.0, -2.5, 12.0];
    let m = cmd_synth(&cfg, dir.path()).unwrap();
    for (i, item) in m.items.iter().enumerate() {
        let clean = read_wav(item.clean.as_ref().unwrap()).unwrap();
        let noisy = read_wav(&item.noisy).unwrap();
        let got = snr_db(&clean, &noisy).unwrap();
        let want = cfg.data.snr_db[i % 3];
        assert!((got - want).abs() <= 1e-6, "{}: {got} vs {want}", item.id);
    }
}

#[test]
fn synth_optional_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(2);
    cfg.data.noisy2 = false;
    cfg.data.extra_noise = false;
    let m = cmd_synth(&cfg, dir.path()).unwrap();
    assert!(m.items.iter().all(|i| i.noisy2.is_none() && i.extra_noise.is_none()));
    assert!(DatasetManifest::validate_for(&m.items, Strategy::Nnt).is_err());
}

#[test]
fn train_command_smoke_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(4);
    cfg.data.noisy2 = false;
    let corpus = dir.path().join("corpus");
    cmd_synth(&cfg, &corpus).unwrap();
    cfg.data.manifest = Some(corpus.join("manifest.csv"));
    let out = cmd_train(&cfg, &dir.path().join("run")).unwrap();
    assert!(out.model_path.exists());
    assert!(dir.path().join("run/run_config.txt").exists());
    assert_eq!(out.log.len(), 3);

    cfg.train.strategy = Strategy::Nnt;
    let err = cmd_train(&cfg, &dir.path().join("nnt")).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("noisy2"), "{err}");

    cfg.data.manifest = None;
    assert!(cmd_train(&cfg, &dir.path().join("x")).unwrap_err().is_validation());
}

#[test]
fn denoise_with_zero_model_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let model = zero_model("tiny").unwrap();
    let mp = dir.path().join("zero.ontm");
    save_model(&model, &mp).unwrap();
    let x = synth_white_noise(3001, 8000, 4).unwrap();
    let inp = dir.path().join("in.wav");
    write_wav(&x, &inp, WavEncoding::Pcm16).unwrap();
    let outp = dir.path().join("out.wav");
    cmd_denoise(&mp, &StftConfig::new(8000), &inp, &outp).unwrap();
    let y = read_wav(&outp).unwrap();
    assert_eq!(y.len(), 3001);
    assert_eq!(y.sample_rate_hz(), 8000);
    assert!(y.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(4);
    cmd_synth(&cfg, dir.path()).unwrap();
    let mp = dir.path().join("zero.ontm");
    save_model(&zero_model("tiny").unwrap(), &mp).unwrap();
    let csv = dir.path().join("eval/metrics.csv");
    let r = cmd_eval(&mp, &dir.path().join("manifest.csv"), &cfg.train.stft, "zero", &csv).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.rows[0].strategy, "zero");
    assert!(r.rows[0].snr_db.abs() < 1e-12);
    assert!(csv.exists() && csv.with_extension("json").exists());
}

#[test]
fn subsample_fixed_ramp_splits_parity() {
    let dir = tempfile::tempdir().unwrap();
    let ramp = Waveform::new((0..64).map(|i| i as f64 / 64.0).collect(), 8000).unwrap();
    let inp = dir.path().join("ramp.wav");
    write_wav(&ramp, &inp, WavEncoding::Float32).unwrap();
    let cfg = SubsampleConfig {
        k: 2,
        mode: SamplerMode::Fixed,
        seed: 0,
    };
    let prefix = dir.path().join("out/ramp");
    let (s1, s2) = cmd_subsample(&inp, &cfg, &prefix).unwrap();
    let even: Vec<f64> = (0..32).map(|i| (2 * i) as f64 / 64.0).collect();
    let odd: Vec<f64> = (0..32).map(|i| (2 * i + 1) as f64 / 64.0).collect();
    assert_eq!(s1.samples(), even.as_slice());
    assert_eq!(s2.samples(), odd.as_slice());
    assert_eq!(read_wav(dir.path().join("out/ramp_s1.wav")).unwrap().samples(), even.as_slice());
}

#[test]
fn subsample_map_dump_is_adjacent_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let x = synth_white_noise(999, 8000, 2).unwrap();
    let inp = dir.path().join("x.wav");
    write_wav(&x, &inp, WavEncoding::Float32).unwrap();
    let cfg = SubsampleConfig {
        k: 5,
        mode: SamplerMode::Random,
        seed: 17,
    };
    cmd_subsample(&inp, &cfg, &dir.path().join("a")).unwrap();
    cmd_subsample(&inp, &cfg, &dir.path().join("b")).unwrap();
    let text = fs::read_to_string(dir.path().join("a_map.txt")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("window,a,b"));
    let mut n = 0;
    for l in lines {
        let v: Vec<i64> = l.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!((v[1] - v[2]).abs(), 1, "{l}");
        assert!(v[1] < 5 && v[2] < 5);
        n += 1;
    }
    assert_eq!(n, 999 / 5);
    for f in ["_s1.wav", "_s2.wav", "_map.txt"] {
        assert_eq!(
            fs::read(dir.path().join(format!("a{f}"))).unwrap(),
            fs::read(dir.path().join(format!("b{f}"))).unwrap()
        );
    }
}

fn parse_pgm(text: &str) -> (usize, usize, Vec<u32>) {
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("P2"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    assert_eq!(it.next(), Some("255"));
    let px: Vec<u32> = it.map(|s| s.parse().unwrap()).collect();
    assert_eq!(px.len(), w * h);
    (w, h, px)
}

#[test]
fn spectrogram_geometry_and_silence() {
    let cfg = StftConfig::new(8000);
    let x = Waveform::new(vec![0.0; 8000], 8000).unwrap();
    let (w, h, px) = parse_pgm(&spectrogram_pgm(&x, &cfg).unwrap());
    assert_eq!(h, cfg.n_bins());
    assert_eq!(w, cfg.n_frames(8000));
    assert!(px.iter().all(|&p| p == 0));
}

#[test]
fn spectrogram_tone_is_one_bright_row() {
    let cfg = StftConfig::new(8000);
    // Bin 40 of a 512-point FFT at 8 kHz.
    let f0 = 40.0 * 8000.0 / 512.0;
    let x = Waveform::new(
        (0..8000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 8000.0).sin())
            .collect(),
        8000,
    )
    .unwrap();
    let (w, h, px) = parse_pgm(&spectrogram_pgm(&x, &cfg).unwrap());
    let row_mean = |r: usize| px[r * w..(r + 1) * w].iter().sum::<u32>() as f64 / w as f64;
    let brightest = (0..h).max_by(|&a, &b| row_mean(a).total_cmp(&row_mean(b))).unwrap();
    assert_eq!(brightest, h - 1 - 40);
    assert!(row_mean(brightest) > 250.0);
    // Rows well away from the tone sit far below it.
    assert!(row_mean(h - 1 - 120) < 128.0);
}

#[test]
fn sweep_cells_enumerate() {
    let cfg = RunConfig::default();
    let labels = |s| sweep_cells(&cfg, s).into_iter().map(|c| c.0).collect::<Vec<_>>();
    assert_eq!(labels(Sweep::SamplerMode), vec!["fixed", "random"]);
    assert_eq!(labels(Sweep::K), vec!["k=2", "k=4", "k=6"]);
    assert_eq!(labels(Sweep::Gamma).len(), 7);
    assert_eq!(
        labels(Sweep::Tstb),
        vec!["1rTSTB", "2rTSTB", "3rTSTB", "1cTSTB", "2cTSTB", "3cTSTB"]
    );
    assert!("bogus".parse::<Sweep>().is_err());
}

#[test]
fn ablate_mode_sweep_and_gamma_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(4);
    cfg.ablate.seeds = 1;
    let t = cmd_ablate(&cfg, Sweep::SamplerMode, &dir.path().join("mode")).unwrap();
    assert_eq!(t.columns, vec!["fixed", "random"]);
    assert_eq!(t.rows.len(), 1);
    assert!(t.rows[0].1.iter().all(|v| v.is_some_and(f64::is_finite)));
    let csv = fs::read_to_string(dir.path().join("mode/ablation_sampler-mode.csv")).unwrap();
    assert!(csv.starts_with("condition,fixed,random\nwhite_5dB,"));

    cfg.ablate.gamma = vec![0.0];
    let g = cmd_ablate(&cfg, Sweep::Gamma, &dir.path().join("gamma")).unwrap();
    // Same seed, gamma 0, trained directly.
    let manifest = DatasetManifest::load(dir.path().join("gamma/corpus/white_5dB/manifest.csv")).unwrap();
    let mut plain = cfg.train.clone();
    plain.weights.gamma = 0.0;
    plain.save_index_maps = false;
    let r = train_and_eval(&manifest, &plain, &dir.path().join("plain")).unwrap();
    let direct = r.aggregate("ont").unwrap().snr_db.mean;
    assert_eq!(g.rows[0].1[0], Some(direct));
}

#[test]
fn gradcheck_suite_runs() {
    let reports = cmd_gradcheck(3).unwrap();
    assert!(reports.len() > 10);
    assert!(reports.iter().all(|r| r.max_rel_err <= 1e-4), "{reports:?}");
}
