//! Strategy-dispatched training: ONT on sub-sampled pairs, and the NCT,
//! NNT and NerNT baselines, all sharing one model, loss and optimizer path.
//!
//! Output directory layout:
//!
//! ```text
//! train_log.jsonl                one JSON object per optimizer step
//! checkpoints/epoch_NNN.ontm     model after epoch NNN (1-based)
//! checkpoints/epoch_NNN.adam     optimizer state sidecar
//! index_maps/epoch_NNN.maps      sub-sampler maps used in that epoch (ONT)
//! model.ontm                     final model
//! ```

pub mod manifest;
pub mod optim;
pub mod step;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{round_f32, save_model, DenoiserModel, ModelConfig};
use crate::rng::{derive_seed, rng_from};
use crate::signal_io::read_wav;
use crate::spectral::{StftConfig, StftKernel};
use crate::subsampler::{plan, SubsampleConfig};

pub use manifest::{DatasetManifest, ManifestItem, Split};
pub use optim::{adam_update, lr_schedule, AdamState};
pub use step::{Batch, Clip, StepLosses};

const INIT_KEY: u64 = 0x696e_6974;
const SHUFFLE_KEY: u64 = 0x7368_7566;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Input and target sub-sampled from the same noisy clip.
    Ont,
    /// Noisy input, clean target.
    Nct,
    /// Noisy input, second independent noisy realisation as target.
    Nnt,
    /// Noisy clip plus extra noise as input, the noisy clip as target.
    Nernt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Ont, Self::Nct, Self::Nnt, Self::Nernt];
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ont" => Ok(Self::Ont),
            "nct" => Ok(Self::Nct),
            "nnt" => Ok(Self::Nnt),
            "nernt" => Ok(Self::Nernt),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ont => "ont",
            Self::Nct => "nct",
            Self::Nnt => "nnt",
            Self::Nernt => "nernt",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval_epochs: usize,
    /// `seed` is ignored; pair seeds derive from the run seed per clip and epoch.
    pub subsample: SubsampleConfig,
    pub weights: LossWeights,
    pub nernt_snr_range_db: (f64, f64),
    pub seed: u64,
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub save_index_maps: bool,
    /// Recorded for provenance; arithmetic is always double precision.
    pub verify: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ont,
            epochs: 3,
            batch_size: 1,
            learning_rate: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_interval_epochs: 1,
            subsample: SubsampleConfig::default(),
            weights: LossWeights::default(),
            nernt_snr_range_db: (0.0, 10.0),
            seed: 0,
            model: ModelConfig::tiny(),
            stft: StftConfig::new(8000),
            save_index_maps: true,
            verify: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_interval_epochs == 0 {
            return Err(Error::Config("train.lr_decay_interval_epochs must be positive".into()));
        }
        if self.subsample.k < 2 {
            return Err(Error::Config(format!("subsample.k must be >= 2, got {}", self.subsample.k)));
        }
        let (lo, hi) = self.nernt_snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("train.nernt_snr_range_db [{lo}, {hi}] is not a range")));
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.stft.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(
            self.learning_rate,
            self.lr_decay_factor,
            self.lr_decay_interval_epochs,
            epoch,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub clip: String,
    pub l_time: f64,
    pub l_freq: f64,
    pub l_wsdr: f64,
    pub l_basic: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub log: Vec<LogRecord>,
    pub model_path: PathBuf,
}

pub fn load_clips(items: &[ManifestItem]) -> Result<Vec<Clip>> {
    let opt = |p: &Option<PathBuf>| p.as_ref().map(read_wav).transpose();
    items
        .iter()
        .map(|i| {
            Ok(Clip {
                id: i.id.clone(),
                noisy: read_wav(&i.noisy)?,
                clean: opt(&i.clean)?,
                noisy2: opt(&i.noisy2)?,
                extra_noise: opt(&i.extra_noise)?,
            })
        })
        .collect()
}

/// Shuffled order cut into batches of equal-length clips. Leftover partial
/// groups follow in order of first appearance.
pub fn plan_batches(order: &[usize], lens: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut open: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in order {
        let pos = match open.iter().position(|(l, _)| *l == lens[i]) {
            Some(p) => p,
            None => {
                open.push((lens[i], Vec::new()));
                open.len() - 1
            }
        };
        open[pos].1.push(i);
        if open[pos].1.len() == batch_size {
            out.push(std::mem::take(&mut open[pos].1));
        }
    }
    out.extend(open.into_iter().map(|(_, g)| g).filter(|g| !g.is_empty()));
    out
}

fn epoch_stem(dir: &Path, sub: &str, epoch: usize) -> PathBuf {
    dir.join(sub).join(format!("epoch_{epoch:03}"))
}

/// Model plus optimizer state after `epochs_done` epochs.
#[derive(Debug)]
pub struct Checkpoint {
    pub epochs_done: usize,
    pub model: DenoiserModel,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let stem = epoch_stem(out_dir, "checkpoints", self.epochs_done);
        let dir = stem.parent().expect("stem has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model_path = stem.with_extension("ontm");
        save_model(&self.model, &model_path)?;
        let side = stem.with_extension("adam");
        let mut w = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
        w.write_all(&(self.epochs_done as u64).to_le_bytes())
            .and_then(|_| self.adam.write_to(&mut w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&side, e))?;
        Ok(model_path)
    }

    /// Loads `epoch_NNN.ontm` and its `.adam` sidecar.
    pub fn load(model_path: &Path) -> Result<Self> {
        let model = crate::network::load_model(model_path)?;
        let side = model_path.with_extension("adam");
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let mut r = bytes.as_slice();
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| Error::Format("optimizer sidecar truncated".into()))?;
        let adam = AdamState::read_from(&mut r)?;
        if adam.m.len() != model.params().len()
            || adam.m.iter().zip(model.params()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Self {
            epochs_done: u64::from_le_bytes(b8) as usize,
            model,
            adam,
        })
    }
}

/// Trains from a fresh seeded initialization.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = DenoiserModel::new(cfg.model.clone(), derive_seed(cfg.seed, &[INIT_KEY]))?;
    let adam = AdamState::new(model.params());
    let start = Checkpoint {
        epochs_done: 0,
        model,
        adam,
    };
    run(manifest, cfg, out_dir, start, true)
}

/// Continues a run from a checkpoint written by [`train`] with the same
/// manifest and configuration.
pub fn resume(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Checkpoint::load(checkpoint)?;
    if start.model.config() != &cfg.model {
        return Err(Error::Config("checkpoint model configuration differs from the run's".into()));
    }
    run(manifest, cfg, out_dir, start, false)
}

fn run(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    start: Checkpoint,
    fresh_log: bool,
) -> Result<TrainOutcome> {
    let items = manifest.split(Split::Train);
    DatasetManifest::validate_for(&items, cfg.strategy)?;
    let clips = load_clips(&items)?;
    let rate = clips[0].noisy.sample_rate_hz();
    if let Some(c) = clips.iter().find(|c| c.noisy.sample_rate_hz() != rate) {
        return Err(Error::invalid(format!(
            "clip '{}' is at {} Hz, others at {rate} Hz",
            c.id,
            c.noisy.sample_rate_hz()
        )));
    }
    let stft = cfg.stft.with_sample_rate(rate);
    let kernel = StftKernel::new(&stft)?;
    let row_len = |c: &Clip| match cfg.strategy {
        Strategy::Ont => c.noisy.len() / cfg.subsample.k,
        _ => c.noisy.len(),
    };
    if let Some(c) = clips.iter().find(|c| row_len(c) < kernel.window_len()) {
        return Err(Error::invalid(format!(
            "clip '{}' gives {}-sample training rows, shorter than one {}-sample window",
            c.id,
            row_len(c),
            kernel.window_len()
        )));
    }
    let lens: Vec<usize> = clips.iter().map(|c| c.noisy.len()).collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log_out = BufWriter::new(log_file);

    let Checkpoint {
        epochs_done,
        mut model,
        mut adam,
    } = start;
    let mut log = Vec::new();
    for epoch in epochs_done..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[SHUFFLE_KEY, epoch as u64])));
        for group in plan_batches(&order, &lens, cfg.batch_size) {
            let refs: Vec<&Clip> = group.iter().map(|&i| &clips[i]).collect();
            let batch = step::prepare_batch(&refs, cfg, epoch)?;
            let step_no = adam.step + 1;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step: step_no as usize,
                detail: format!("{detail} (batch {})", batch.ids.join("+")),
            };
            let (losses, grads) =
                step::loss_and_grads(&model, &kernel, &batch, &cfg.weights).map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(e.to_string()),
                    other => other,
                })?;
            if !losses.total.is_finite() {
                return Err(diverged(format!("loss is {}", losses.total)));
            }
            if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(diverged(format!("gradient of '{}' is not finite", model.names()[i])));
            }
            adam_update(model.params_mut(), &grads, &mut adam, lr)?;
            for p in model.params_mut() {
                round_f32(p.data_mut());
            }
            let rec = LogRecord {
                epoch,
                step: adam.step,
                clip: batch.ids.join("+"),
                l_time: losses.l_time,
                l_freq: losses.l_freq,
                l_wsdr: losses.l_wsdr,
                l_basic: losses.l_basic,
                l_reg: losses.l_reg,
                total: losses.total,
                lr,
            };
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(log_out, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log.push(rec);
        }
        log_out.flush().map_err(|e| Error::io(&log_path, e))?;
        if cfg.save_index_maps && cfg.strategy == Strategy::Ont {
            write_index_maps(out_dir, &clips, cfg, epoch)?;
        }
        let ck = Checkpoint {
            epochs_done: epoch + 1,
            model,
            adam,
        };
        ck.save(out_dir)?;
        (model, adam) = (ck.model, ck.adam);
    }
    let model_path = out_dir.join("model.ontm");
    save_model(&model, &model_path)?;
    Ok(TrainOutcome {
        model,
        log,
        model_path,
    })
}

/// Per epoch: for every clip, `u32` id length, id, then the map.
fn write_index_maps(out_dir: &Path, clips: &[Clip], cfg: &TrainConfig, epoch: usize) -> Result<()> {
    let path = epoch_stem(out_dir, "index_maps", epoch + 1).with_extension("maps");
    let dir = path.parent().expect("path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for c in clips {
        let map = plan(c.noisy.len(), &step::pair_config(&cfg.subsample, cfg.seed, &c.id, epoch))?;
        w.write_all(&(c.id.len() as u32).to_le_bytes())
            .and_then(|_| w.write_all(c.id.as_bytes()))
            .and_then(|_| map.write_to(&mut w))
            .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads an index-map sidecar back into `(clip id, map)` pairs.
pub fn read_index_maps(path: &Path) -> Result<Vec<(String, crate::subsampler::SubsampleIndexMap)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut out = Vec::new();
    while !r.is_empty() {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| Error::Format("index map file truncated".into()))?;
        let n = u32::from_le_bytes(b4) as usize;
        if r.len() < n {
            return Err(Error::Format("index map file truncated".into()));
        }
        let id = String::from_utf8(r[..n].to_vec())
            .map_err(|_| Error::Format("index map id is not UTF-8".into()))?;
        r = &r[n..];
        out.push((id, crate::subsampler::SubsampleIndexMap::read_from(&mut r)?));
    }
    Ok(out)
}

/// Kernel for a training configuration at a given sample rate.
pub fn kernel_for(cfg: &TrainConfig, rate: u32) -> Result<Arc<StftKernel>> {
    StftKernel::new(&cfg.stft.with_sample_rate(rate))
}
