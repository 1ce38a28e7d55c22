//! Command implementations behind the `ont` binary: corpus synthesis,
//! training, inference, evaluation, ablation sweeps and debug emitters.
//! Every command takes its parameters from a [`RunConfig`] plus explicit
//! paths and echoes the effective configuration into its output directory.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::Serialize;

pub use config::{AblateConfig, DataConfig, RunConfig, KEYS};

use crate::engine::gradcheck::{self, fd_step, rel_err, CheckReport, REL_FLOOR};
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fmt_value, MetricsReport};
use crate::network::{denoise_waveform, load_model, DenoiserModel, ModelConfig, TstmKind};
use crate::rng::{derive_seed, rng_from};
use crate::signal_io::{
    overlay_noise, read_wav, synth_clean, synth_white_noise, write_wav, SynthKind, SynthSpec, WavEncoding,
    Waveform,
};
use crate::spectral::{stft, StftConfig, StftKernel};
use crate::subsampler::{self, SubsampleConfig};
use crate::training::{self, step, DatasetManifest, ManifestItem, Split, TrainConfig, TrainOutcome};

const F0_KEY: u64 = 1;
const CLEAN_KEY: u64 = 2;
const NOISE_KEY: u64 = 3;
const NOISE2_KEY: u64 = 4;
const EXTRA_KEY: u64 = 5;

const KINDS: [SynthKind; 3] = [SynthKind::HarmonicStack, SynthKind::Chirp, SynthKind::AmTone];

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `clean/`, `noisy/`, optionally `noisy2/` and `extra_noise/`, and
/// `manifest.csv` under `out_dir`. The last `test_fraction` of the clips
/// form the test split.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut subdirs = vec!["clean", "noisy"];
    if d.noisy2 {
        subdirs.push("noisy2");
    }
    if d.extra_noise {
        subdirs.push("extra_noise");
    }
    for s in &subdirs {
        mkdir(&out_dir.join(s))?;
    }
    let n_test = (d.clips as f64 * d.test_fraction).round() as usize;
    let mut items = Vec::with_capacity(d.clips);
    for i in 0..d.clips {
        let key = |tag: u64| derive_seed(d.seed, &[i as u64, tag]);
        let spec = SynthSpec {
            kind: KINDS[i % KINDS.len()],
            duration_s: d.duration_s,
            fundamental_hz: rng_from(key(F0_KEY)).gen_range(100.0..250.0),
            seed: key(CLEAN_KEY),
        };
        // Store what the WAV will hold so re-measured SNRs match exactly.
        let clean = synth_clean(&spec, d.sample_rate_hz)?.quantized_f32();
        let snr = d.snr_db[i % d.snr_db.len()];
        let noise = synth_white_noise(clean.len(), d.sample_rate_hz, key(NOISE_KEY))?;
        let noisy = overlay_noise(&clean, &noise, snr)?;
        let id = format!("clip_{i:04}");
        let file = format!("{id}.wav");
        let put = |sub: &str, w: &Waveform| -> Result<PathBuf> {
            let p = out_dir.join(sub).join(&file);
            write_wav(w, &p, WavEncoding::Float32)?;
            Ok(p)
        };
        let item = ManifestItem {
            split: if i >= d.clips - n_test { Split::Test } else { Split::Train },
            clean: Some(put("clean", &clean)?),
            noisy: put("noisy", &noisy)?,
            noisy2: if d.noisy2 {
                let n2 = synth_white_noise(clean.len(), d.sample_rate_hz, key(NOISE2_KEY))?;
                Some(put("noisy2", &overlay_noise(&clean, &n2, snr)?)?)
            } else {
                None
            },
            extra_noise: if d.extra_noise {
                let e = synth_white_noise(clean.len(), d.sample_rate_hz, key(EXTRA_KEY))?;
                Some(put("extra_noise", &e)?)
            } else {
                None
            },
            id,
        };
        items.push(item);
    }
    let manifest = DatasetManifest { items };
    manifest.save(out_dir.join("manifest.csv"))?;
    cfg.echo(out_dir)?;
    Ok(manifest)
}

fn manifest_of(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    DatasetManifest::load(path)
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = manifest_of(cfg)?;
    mkdir(out_dir)?;
    cfg.echo(out_dir)?;
    training::train(&manifest, &cfg.train, out_dir)
}

/// Denoises one file; the output keeps the input's length and rate.
pub fn cmd_denoise(model_path: &Path, stft: &StftConfig, input: &Path, output: &Path) -> Result<Waveform> {
    let model = load_model(model_path)?;
    let x = read_wav(input)?;
    let y = denoise_waveform(&model, &x, stft)?;
    write_wav(&y, output, WavEncoding::Float32)?;
    Ok(y)
}

/// Evaluates the test split of a manifest; writes `out_csv` and a JSON
/// mirror with the same stem.
pub fn cmd_eval(
    model_path: &Path,
    manifest_path: &Path,
    stft: &StftConfig,
    label: &str,
    out_csv: &Path,
) -> Result<MetricsReport> {
    let model = load_model(model_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let report = eval_split(&model, &manifest, stft, label)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    report.write_csv(out_csv)?;
    report.write_json(out_csv.with_extension("json"))?;
    Ok(report)
}

fn eval_split(model: &DenoiserModel, manifest: &DatasetManifest, stft: &StftConfig, label: &str) -> Result<MetricsReport> {
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Manifest("manifest has no test items".into()));
    }
    evaluate(model, &test, stft, label)
}

/// Trains on the manifest's training split and evaluates on its test split.
pub fn train_and_eval(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<MetricsReport> {
    let out = training::train(manifest, cfg, out_dir)?;
    let report = eval_split(&out.model, manifest, &cfg.stft, &cfg.strategy.to_string())?;
    report.write_csv(out_dir.join("metrics.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    K,
    Gamma,
    Tstb,
    SamplerMode,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "gamma" => Ok(Self::Gamma),
            "tstb" => Ok(Self::Tstb),
            "sampler-mode" | "mode" => Ok(Self::SamplerMode),
            other => Err(Error::Config(format!(
                "unknown sweep '{other}' (expected k, gamma, tstb or sampler-mode)"
            ))),
        }
    }
}

impl std::fmt::Display for Sweep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "k",
            Self::Gamma => "gamma",
            Self::Tstb => "tstb",
            Self::SamplerMode => "sampler-mode",
        })
    }
}

/// Column label and training configuration of every cell in a sweep.
pub fn sweep_cells(cfg: &RunConfig, sweep: Sweep) -> Vec<(String, TrainConfig)> {
    let base = &cfg.train;
    let a = &cfg.ablate;
    match sweep {
        Sweep::K => a
            .k
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.subsample.k = k;
                (format!("k={k}"), c)
            })
            .collect(),
        Sweep::Gamma => a
            .gamma
            .iter()
            .map(|&g| {
                let mut c = base.clone();
                c.weights.gamma = g;
                (format!("gamma={g}"), c)
            })
            .collect(),
        Sweep::Tstb => {
            let counts = a.tstb_counts(&base.model);
            [TstmKind::Real, TstmKind::Complex]
                .into_iter()
                .flat_map(|kind| {
                    counts.iter().map(move |&n| {
                        let mut c = base.clone();
                        c.model.n_tstb = n;
                        c.model.tstm = kind;
                        let tag = if kind == TstmKind::Real { 'r' } else { 'c' };
                        (format!("{n}{tag}TSTB"), c)
                    })
                })
                .collect()
        }
        Sweep::SamplerMode => a
            .modes
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.subsample.mode = m;
                (m.to_string(), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub condition: String,
    pub cell: String,
    pub seed: u64,
    pub snr_db: f64,
    pub ssnr_db: f64,
    pub stoi: f64,
}

/// Mean output SNR per (noise condition, cell), averaged over repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub sweep: Sweep,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("condition,{}\n", self.columns.join(","));
        for (cond, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map(fmt_value).unwrap_or_default()).collect();
            let _ = writeln!(s, "{cond},{}", cells.join(","));
        }
        s
    }

    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.runs {
            w.write_record([
                r.condition.clone(),
                r.cell.clone(),
                r.seed.to_string(),
                fmt_value(r.snr_db),
                fmt_value(r.ssnr_db),
                fmt_value(r.stoi),
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(format!(
            "condition,cell,seed,snr_db,ssnr_db,stoi\n{}",
            String::from_utf8_lossy(&body)
        ))
    }

    fn flush(&self, out_dir: &Path) -> Result<()> {
        let p = out_dir.join(format!("ablation_{}.csv", self.sweep));
        fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))?;
        let p = out_dir.join(format!("ablation_{}_runs.csv", self.sweep));
        fs::write(&p, self.runs_csv()?).map_err(|e| Error::io(&p, e))
    }
}

/// One training and evaluation per cell, condition and repetition seed.
/// Conditions are the configured manifest, or one synthetic corpus per
/// `data.snr_db` entry. Tables are rewritten after every cell.
pub fn cmd_ablate(cfg: &RunConfig, sweep: Sweep, out_dir: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    mkdir(out_dir)?;
    cfg.echo(out_dir)?;
    let conditions: Vec<(String, DatasetManifest)> = match &cfg.data.manifest {
        Some(_) => vec![("manifest".to_string(), manifest_of(cfg)?)],
        None => cfg
            .data
            .snr_db
            .iter()
            .map(|&snr| {
                let label = format!("white_{snr}dB");
                let mut c = cfg.clone();
                c.data.snr_db = vec![snr];
                let m = cmd_synth(&c, &out_dir.join("corpus").join(&label))?;
                Ok((label, m))
            })
            .collect::<Result<_>>()?,
    };
    let cells = sweep_cells(cfg, sweep);
    for (_, c) in &cells {
        c.validate()?;
    }
    let mut table = AblationTable {
        sweep,
        columns: cells.iter().map(|(l, _)| l.clone()).collect(),
        rows: conditions
            .iter()
            .map(|(l, _)| (l.clone(), vec![None; cells.len()]))
            .collect(),
        runs: Vec::new(),
    };
    for (ci, (cond, manifest)) in conditions.iter().enumerate() {
        for (j, (label, cell)) in cells.iter().enumerate() {
            let mut snrs = Vec::new();
            for rep in 0..cfg.ablate.seeds as u64 {
                let mut c = cell.clone();
                c.seed = cfg.train.seed + rep;
                c.save_index_maps = false;
                let dir = out_dir.join("runs").join(cond).join(label).join(format!("seed_{rep}"));
                let report = train_and_eval(manifest, &c, &dir)?;
                let agg = report
                    .aggregate(&c.strategy.to_string())
                    .expect("evaluation emits model rows");
                snrs.push(agg.snr_db.mean);
                table.runs.push(AblationRun {
                    condition: cond.clone(),
                    cell: label.clone(),
                    seed: c.seed,
                    snr_db: agg.snr_db.mean,
                    ssnr_db: agg.ssnr_db.mean,
                    stoi: agg.stoi.mean,
                });
            }
            table.rows[ci].1[j] = Some(snrs.iter().sum::<f64>() / snrs.len() as f64);
            table.flush(out_dir)?;
        }
    }
    Ok(table)
}

/// Writes `{prefix}_s1.wav`, `{prefix}_s2.wav` and `{prefix}_map.txt`.
pub fn cmd_subsample(input: &Path, config: &SubsampleConfig, prefix: &Path) -> Result<(Waveform, Waveform)> {
    let x = read_wav(input)?;
    let (s1, s2, map) = subsampler::pair(&x, config)?;
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let with = |suffix: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    };
    write_wav(&s1, with("_s1.wav"), WavEncoding::Float32)?;
    write_wav(&s2, with("_s2.wav"), WavEncoding::Float32)?;
    let map_path = with("_map.txt");
    fs::write(&map_path, map.to_text()).map_err(|e| Error::io(&map_path, e))?;
    Ok((s1, s2))
}

/// Floor of the absolute dB scale.
pub const SPECTROGRAM_FLOOR_DB: f64 = -120.0;
/// Displayed range below the loudest bin.
pub const SPECTROGRAM_RANGE_DB: f64 = 80.0;

/// Log-magnitude image, one row per bin with the highest frequency on top,
/// one column per frame; 0 is the floor, 255 the loudest bin.
pub fn spectrogram_pgm(x: &Waveform, cfg: &StftConfig) -> Result<String> {
    let s = stft(x, cfg)?;
    let db = s.log_magnitude_db(SPECTROGRAM_FLOOR_DB);
    let top = db.iter().copied().fold(SPECTROGRAM_FLOOR_DB, f64::max);
    let lo = (top - SPECTROGRAM_RANGE_DB).max(SPECTROGRAM_FLOOR_DB);
    let mut out = format!("P2\n{} {}\n255\n", s.frames, s.bins);
    for row in 0..s.bins {
        let f = s.bins - 1 - row;
        let line: Vec<String> = (0..s.frames)
            .map(|t| {
                let v = db[f * s.frames + t];
                let p = if top > lo { (255.0 * (v - lo) / (top - lo)).clamp(0.0, 255.0) } else { 0.0 };
                (p.round() as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Log-magnitude values in dB, one line per frame and one column per bin.
pub fn spectrogram_csv(x: &Waveform, cfg: &StftConfig) -> Result<String> {
    let s = stft(x, cfg)?;
    let db = s.log_magnitude_db(SPECTROGRAM_FLOOR_DB);
    let mut out = String::from("frame");
    for f in 0..s.bins {
        out.push_str(&format!(",bin{f}"));
    }
    out.push('\n');
    for t in 0..s.frames {
        out.push_str(&t.to_string());
        for f in 0..s.bins {
            out.push_str(&format!(",{:.3}", db[f * s.frames + t]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_spectrogram(input: &Path, cfg: &StftConfig, output: &Path, csv: Option<&Path>) -> Result<()> {
    let x = read_wav(input)?;
    let img = spectrogram_pgm(&x, cfg)?;
    fs::write(output, img).map_err(|e| Error::io(output, e))?;
    if let Some(path) = csv {
        fs::write(path, spectrogram_csv(&x, cfg)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Finite-difference check of the full ONT objective.
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub params: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Coordinates whose step had to shrink to avoid a kink.
    pub shrunk: usize,
}

/// STFT used by [`check_model_gradients`]: 16 ms window, 4 ms hop at 8 kHz.
pub fn gradcheck_stft() -> StftConfig {
    StftConfig {
        window_ms: 16.0,
        hop_ms: 4.0,
        fft_len: None,
        sample_rate_hz: 8000,
    }
}

/// Compares the analytic gradient of the total ONT loss against central
/// differences for every parameter of `config`, on a short seeded clip.
/// The detached full-signal pass is evaluated once at the base point and
/// held fixed while perturbing, matching what the gradient sees.
/// `progress` is called after each tensor.
pub fn check_model_gradients(
    config: &ModelConfig,
    seed: u64,
    mut progress: impl FnMut(&str, f64),
) -> Result<ModelCheck> {
    let stft_cfg = gradcheck_stft();
    let kernel = StftKernel::new(&stft_cfg)?;
    let spec = SynthSpec {
        kind: SynthKind::HarmonicStack,
        duration_s: 0.09,
        fundamental_hz: 180.0,
        seed,
    };
    let clean = synth_clean(&spec, 8000)?;
    let noise = synth_white_noise(clean.len(), 8000, derive_seed(seed, &[NOISE_KEY]))?;
    let noisy = overlay_noise(&clean, &noise, 5.0)?;
    let noisy = noisy.with_samples(noisy.samples().iter().map(|v| 0.3 * v).collect())?;
    let clip = step::Clip {
        id: "check".into(),
        noisy,
        clean: None,
        noisy2: None,
        extra_noise: None,
    };
    let cfg = TrainConfig {
        stft: stft_cfg,
        model: config.clone(),
        seed,
        ..TrainConfig::default()
    };
    let batch = step::prepare_batch(&[&clip], &cfg, 0)?;
    let mut model = DenoiserModel::new(config.clone(), seed)?;
    let frozen = step::frozen_targets(&model, &kernel, batch.reg.as_ref().expect("gamma is 1"))?;

    let eval = |m: &DenoiserModel, grads: bool| -> Result<(f64, Vec<bool>, Option<Vec<Vec<f64>>>)> {
        let mut t = Tape::new();
        let bound = m.bind(&mut t, grads);
        let obj = step::build_objective(&mut t, m, &bound, &kernel, &batch, Some(&frozen), &cfg.weights)?;
        let value = t.scalar(obj.total);
        let g = if grads {
            let gr = t.backward(obj.total)?;
            Some(
                bound
                    .vars()
                    .iter()
                    .zip(m.params())
                    .map(|(&v, p)| gr.wrt(v, p.numel()))
                    .collect(),
            )
        } else {
            None
        };
        Ok((value, t.kink_pattern(), g))
    };
    let (_, base_kinks, grads) = eval(&model, true)?;
    let grads = grads.expect("requested");
    let mut check = ModelCheck {
        params: model.params().len(),
        coords: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        shrunk: 0,
    };
    for pi in 0..model.params().len() {
        let name = model.names()[pi].clone();
        let mut tensor_worst: f64 = 0.0;
        for j in 0..model.params()[pi].numel() {
            let theta = model.params()[pi].data()[j];
            let mut h = fd_step(theta);
            let mut numeric = None;
            for attempt in 0..4 {
                model.params_mut()[pi].data_mut()[j] = theta + h;
                let (fp, kp, _) = eval(&model, false)?;
                model.params_mut()[pi].data_mut()[j] = theta - h;
                let (fm, km, _) = eval(&model, false)?;
                model.params_mut()[pi].data_mut()[j] = theta;
                numeric = Some((fp - fm) / (2.0 * h));
                if kp == base_kinks && km == base_kinks {
                    break;
                }
                if attempt == 0 {
                    check.shrunk += 1;
                }
                h /= 10.0;
            }
            let e = rel_err(grads[pi][j], numeric.expect("evaluated"), REL_FLOOR);
            tensor_worst = tensor_worst.max(e);
            check.coords += 1;
        }
        if tensor_worst >= check.max_rel_err {
            check.max_rel_err = tensor_worst;
            check.worst = name.clone();
        }
        progress(&name, tensor_worst);
    }
    Ok(check)
}

/// Primitive-level finite-difference suite.
pub fn cmd_gradcheck(seed: u64) -> Result<Vec<CheckReport>> {
    gradcheck::run_suite(seed)
}

/// Zero-parameter model of a preset: every output is silent.
pub fn zero_model(preset: &str) -> Result<DenoiserModel> {
    DenoiserModel::zeros(ModelConfig::preset(preset)?)
}

#[cfg(test)]
mod tests;
