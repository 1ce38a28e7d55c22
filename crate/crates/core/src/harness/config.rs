//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! `model.preset` is applied before any other `model.*` override regardless
//! of where it appears.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{MaskMode, ModelConfig, TstmKind};
use crate::subsampler::SamplerMode;
use crate::training::{Strategy, TrainConfig};

/// Synthetic corpus parameters and dataset location.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub clips: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Input SNRs, assigned to clips round-robin.
    pub snr_db: Vec<f64>,
    pub test_fraction: f64,
    pub noisy2: bool,
    pub extra_noise: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            clips: 48,
            duration_s: 1.0,
            sample_rate_hz: 8000,
            snr_db: vec![5.0],
            test_fraction: 0.25,
            noisy2: true,
            extra_noise: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub seeds: usize,
    pub k: Vec<usize>,
    pub gamma: Vec<f64>,
    /// `None` selects the preset's default ladder.
    pub tstb: Option<Vec<usize>>,
    pub modes: Vec<SamplerMode>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            k: vec![2, 4, 6],
            gamma: vec![0.0, 1.0, 2.0, 4.0, 10.0, 20.0, 40.0],
            tstb: None,
            modes: vec![SamplerMode::Fixed, SamplerMode::Random],
        }
    }
}

impl AblateConfig {
    pub fn tstb_counts(&self, model: &ModelConfig) -> Vec<usize> {
        match &self.tstb {
            Some(v) => v.clone(),
            None if model.preset == "paper" => vec![4, 6, 8],
            None => vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("train.strategy", "ont", "ont | nct | nnt | nernt"),
    ("train.epochs", "3", "passes over the training split"),
    ("train.batch_size", "1", "clips per step (equal lengths only)"),
    ("train.learning_rate", "0.001", "Adam step size"),
    ("train.lr_decay_factor", "0.1", "step decay multiplier, in (0, 1]"),
    ("train.lr_decay_interval_epochs", "1", "epochs between decays"),
    ("train.alpha", "0.8", "frequency vs time weight in the basic loss"),
    ("train.beta", "0.005", "scale of the time/frequency bracket"),
    ("train.gamma", "1", "regularizer weight (ONT only)"),
    ("train.reg_normalized", "true", "mean instead of sum in the regularizer"),
    ("train.nernt_snr_min_db", "0", "lower bound of the NerNT mixing SNR"),
    ("train.nernt_snr_max_db", "10", "upper bound of the NerNT mixing SNR"),
    ("train.seed", "0", "run seed"),
    ("train.save_index_maps", "true", "write per-epoch sub-sampler maps"),
    ("train.verify", "false", "verification mode flag (recorded only)"),
    ("stft.window_ms", "64", "Hamming window length"),
    ("stft.hop_ms", "16", "hop length"),
    ("stft.fft_len", "0", "FFT size; 0 picks the next power of two"),
    ("subsample.k", "2", "sampling interval"),
    ("subsample.mode", "random", "random | fixed"),
    ("model.preset", "tiny", "tiny | paper"),
    ("model.mask", "bounded", "bounded | unbounded"),
    ("model.tstm", "complex", "complex | real"),
    ("model.n_tstb", "preset", "number of two-stage transformer blocks"),
    ("data.manifest", "", "dataset manifest CSV"),
    ("data.clips", "48", "synthetic clip count"),
    ("data.duration_s", "1", "synthetic clip duration"),
    ("data.sample_rate_hz", "8000", "synthetic sample rate"),
    ("data.snr_db", "5", "comma-separated input SNRs"),
    ("data.test_fraction", "0.25", "share of clips held out for testing"),
    ("data.noisy2", "true", "also write a second noisy realisation"),
    ("data.extra_noise", "true", "also write an extra-noise clip"),
    ("data.seed", "0", "synthesis seed"),
    ("ablate.seeds", "5", "repetitions per cell"),
    ("ablate.k", "2,4,6", "sampling intervals for the k sweep"),
    ("ablate.gamma", "0,1,2,4,10,20,40", "weights for the gamma sweep"),
    ("ablate.tstb", "preset", "block counts for the tstb sweep"),
    ("ablate.mode", "fixed,random", "sampler modes for the mode sweep"),
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{raw}'")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let v: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(v)
}

fn bool_value(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{raw}'"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        // The preset replaces the whole model config; apply it first.
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            cfg.train.model = ModelConfig::preset(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    /// Applies one key. `model.preset` resets every model field.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        let a = &mut self.ablate;
        match key {
            "train.strategy" => t.strategy = value::<Strategy>(key, raw)?,
            "train.epochs" => t.epochs = value(key, raw)?,
            "train.batch_size" => t.batch_size = value(key, raw)?,
            "train.learning_rate" => t.learning_rate = value(key, raw)?,
            "train.lr_decay_factor" => t.lr_decay_factor = value(key, raw)?,
            "train.lr_decay_interval_epochs" => t.lr_decay_interval_epochs = value(key, raw)?,
            "train.alpha" => t.weights.alpha = value(key, raw)?,
            "train.beta" => t.weights.beta = value(key, raw)?,
            "train.gamma" => t.weights.gamma = value(key, raw)?,
            "train.reg_normalized" => t.weights.reg_normalized = bool_value(key, raw)?,
            "train.nernt_snr_min_db" => t.nernt_snr_range_db.0 = value(key, raw)?,
            "train.nernt_snr_max_db" => t.nernt_snr_range_db.1 = value(key, raw)?,
            "train.seed" => t.seed = value(key, raw)?,
            "train.save_index_maps" => t.save_index_maps = bool_value(key, raw)?,
            "train.verify" => t.verify = bool_value(key, raw)?,
            "stft.window_ms" => t.stft.window_ms = value(key, raw)?,
            "stft.hop_ms" => t.stft.hop_ms = value(key, raw)?,
            "stft.fft_len" => {
                let n: usize = value(key, raw)?;
                t.stft.fft_len = (n > 0).then_some(n);
            }
            "subsample.k" => t.subsample.k = value(key, raw)?,
            "subsample.mode" => t.subsample.mode = value::<SamplerMode>(key, raw)?,
            "model.preset" => {
                t.model = ModelConfig::preset(raw).map_err(|e| Error::Config(e.to_string()))?;
            }
            "model.mask" => t.model.mask = value::<MaskMode>(key, raw)?,
            "model.tstm" => t.model.tstm = value::<TstmKind>(key, raw)?,
            "model.n_tstb" => t.model.n_tstb = value(key, raw)?,
            "data.manifest" => d.manifest = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            "data.clips" => d.clips = value(key, raw)?,
            "data.duration_s" => d.duration_s = value(key, raw)?,
            "data.sample_rate_hz" => d.sample_rate_hz = value(key, raw)?,
            "data.snr_db" => d.snr_db = list(key, raw)?,
            "data.test_fraction" => d.test_fraction = value(key, raw)?,
            "data.noisy2" => d.noisy2 = bool_value(key, raw)?,
            "data.extra_noise" => d.extra_noise = bool_value(key, raw)?,
            "data.seed" => d.seed = value(key, raw)?,
            "ablate.seeds" => a.seeds = value(key, raw)?,
            "ablate.k" => a.k = list(key, raw)?,
            "ablate.gamma" => a.gamma = list(key, raw)?,
            "ablate.tstb" => a.tstb = Some(list(key, raw)?),
            "ablate.mode" => a.modes = list(key, raw)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if d.clips == 0 {
            return Err(Error::Config("data.clips must be positive".into()));
        }
        if !(d.duration_s > 0.0 && d.duration_s.is_finite()) {
            return Err(Error::Config("data.duration_s must be positive".into()));
        }
        if d.sample_rate_hz == 0 {
            return Err(Error::Config("data.sample_rate_hz must be positive".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if d.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("data.snr_db values must be finite".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be positive".into()));
        }
        Ok(())
    }

    /// Complete key = value listing of the effective configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let a = &self.ablate;
        let m = &t.model;
        let tstb = a.tstb.as_ref().map_or_else(|| "preset".to_string(), |v| join(v));
        let entries: Vec<(&str, String)> = vec![
            ("train.strategy", t.strategy.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_interval_epochs", t.lr_decay_interval_epochs.to_string()),
            ("train.alpha", t.weights.alpha.to_string()),
            ("train.beta", t.weights.beta.to_string()),
            ("train.gamma", t.weights.gamma.to_string()),
            ("train.reg_normalized", t.weights.reg_normalized.to_string()),
            ("train.nernt_snr_min_db", t.nernt_snr_range_db.0.to_string()),
            ("train.nernt_snr_max_db", t.nernt_snr_range_db.1.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.save_index_maps", t.save_index_maps.to_string()),
            ("train.verify", t.verify.to_string()),
            ("stft.window_ms", t.stft.window_ms.to_string()),
            ("stft.hop_ms", t.stft.hop_ms.to_string()),
            ("stft.fft_len", t.stft.fft_len.unwrap_or(0).to_string()),
            ("subsample.k", t.subsample.k.to_string()),
            ("subsample.mode", t.subsample.mode.to_string()),
            ("model.preset", m.preset.clone()),
            ("model.mask", m.mask.to_string()),
            ("model.tstm", m.tstm.to_string()),
            ("model.n_tstb", m.n_tstb.to_string()),
            (
                "data.manifest",
                d.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("data.clips", d.clips.to_string()),
            ("data.duration_s", d.duration_s.to_string()),
            ("data.sample_rate_hz", d.sample_rate_hz.to_string()),
            ("data.snr_db", join(&d.snr_db)),
            ("data.test_fraction", d.test_fraction.to_string()),
            ("data.noisy2", d.noisy2.to_string()),
            ("data.extra_noise", d.extra_noise.to_string()),
            ("data.seed", d.seed.to_string()),
            ("ablate.seeds", a.seeds.to_string()),
            ("ablate.k", join(&a.k)),
            ("ablate.gamma", join(&a.gamma)),
            ("ablate.tstb", tstb),
            ("ablate.mode", join(&a.modes)),
        ];
        debug_assert_eq!(entries.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in entries {
            // "preset" placeholders are not parseable values.
            if v == "preset" && k == "ablate.tstb" {
                continue;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Writes the effective configuration to `dir/run_config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::parse(
            "# comment\ntrain.epochs = 2\ntrain.strategy=nct\nsubsample.mode = fixed # trailing\n\
             data.snr_db = 0, 5,10\nstft.fft_len = 1024\nablate.mode = random\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.strategy, Strategy::Nct);
        assert_eq!(c.train.subsample.mode, SamplerMode::Fixed);
        assert_eq!(c.data.snr_db, vec![0.0, 5.0, 10.0]);
        assert_eq!(c.train.stft.fft_len, Some(1024));
        assert_eq!(c.ablate.modes, vec![SamplerMode::Random]);
    }

    #[test]
    fn preset_applies_before_overrides() {
        let c = RunConfig::parse("model.n_tstb = 2\nmodel.preset = paper\n").unwrap();
        assert_eq!(c.train.model.channels, ModelConfig::paper().channels);
        assert_eq!(c.train.model.n_tstb, 2);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("train.epoch = 3\n").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("train.epoch"));
        assert!(RunConfig::parse("train.epochs 3\n").is_err());
        assert!(RunConfig::parse("train.epochs = three\n").is_err());
        assert!(RunConfig::parse("train.verify = maybe\n").is_err());
        assert!(RunConfig::parse("model.preset = huge\n").unwrap_err().is_validation());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::parse("train.gamma = 4\nmodel.mask = unbounded\nablate.tstb = 1,2\n").unwrap();
        c.data.manifest = Some(PathBuf::from("/x/manifest.csv"));
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let echoed = RunConfig::default().to_text();
        for (key, _, _) in KEYS {
            if *key == "ablate.tstb" {
                continue;
            }
            assert!(echoed.contains(&format!("{key} = ")), "{key} not echoed");
        }
        let mut c = RunConfig::default();
        assert!(c.set("ablate.tstb", "2,4").is_ok());
    }

    #[test]
    fn tstb_ladder_scales_with_preset() {
        let a = AblateConfig::default();
        assert_eq!(a.tstb_counts(&ModelConfig::paper()), vec![4, 6, 8]);
        assert_eq!(a.tstb_counts(&ModelConfig::tiny()), vec![1, 2, 3]);
    }
}
