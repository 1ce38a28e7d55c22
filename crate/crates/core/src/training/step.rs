//! Batch construction per strategy and the shared objective.

use std::sync::Arc;

use rand::Rng as _;

use super::{Strategy, TrainConfig};
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{basic_loss, reg_loss, total_loss, BasicTerms, LossWeights};
use crate::network::DenoiserModel;
use crate::rng::{derive_seed, key_of, rng_from};
use crate::signal_io::{overlay_noise, Waveform};
use crate::spectral::StftKernel;
use crate::subsampler::{self, apply_slice, SubsampleConfig, SubsampleIndexMap};

const PAIR_KEY: u64 = 0x7061_6972;
const NERNT_KEY: u64 = 0x6e65_726e;

/// A clip with whichever companion signals the manifest provides.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Option<Waveform>,
    pub noisy2: Option<Waveform>,
    pub extra_noise: Option<Waveform>,
}

/// Full noisy signals and the maps that produced each row's pair.
#[derive(Debug, Clone)]
pub struct RegSource {
    pub full: Vec<Vec<f64>>,
    pub maps: Vec<SubsampleIndexMap>,
}

/// Equal-length rows ready for one optimizer step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub reg: Option<RegSource>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.input.first().map_or(0, Vec::len)
    }
}

/// Scalar loss values of one step (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub l_time: f64,
    pub l_freq: f64,
    pub l_wsdr: f64,
    pub l_basic: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub terms: BasicTerms,
    pub reg: Option<Var>,
    pub total: Var,
}

impl Objective {
    pub fn values(&self, t: &Tape) -> StepLosses {
        StepLosses {
            l_time: t.scalar(self.terms.time),
            l_freq: t.scalar(self.terms.freq),
            l_wsdr: t.scalar(self.terms.wsdr),
            l_basic: t.scalar(self.terms.basic),
            l_reg: self.reg.map_or(0.0, |r| t.scalar(r)),
            total: t.scalar(self.total),
        }
    }
}

/// Sub-sampler configuration for one clip in one epoch.
pub fn pair_config(base: &SubsampleConfig, run_seed: u64, clip: &str, epoch: usize) -> SubsampleConfig {
    SubsampleConfig {
        seed: derive_seed(run_seed, &[PAIR_KEY, key_of(clip), epoch as u64]),
        ..*base
    }
}

/// The noisier NerNT input for one clip in one epoch, and the SNR drawn.
pub fn nernt_input(clip: &Clip, cfg: &TrainConfig, epoch: usize) -> Result<(Waveform, f64)> {
    let extra = clip.extra_noise.as_ref().ok_or_else(|| {
        Error::Manifest(format!("item '{}' lacks field 'extra_noise'", clip.id))
    })?;
    let (lo, hi) = cfg.nernt_snr_range_db;
    let seed = derive_seed(cfg.seed, &[NERNT_KEY, key_of(&clip.id), epoch as u64]);
    let snr = if hi > lo { rng_from(seed).gen_range(lo..=hi) } else { lo };
    Ok((overlay_noise(&clip.noisy, extra, snr)?, snr))
}

fn need<'a>(clip: &'a Clip, w: &'a Option<Waveform>, field: &str) -> Result<&'a Waveform> {
    w.as_ref()
        .ok_or_else(|| Error::Manifest(format!("item '{}' lacks field '{field}'", clip.id)))
}

/// Builds the input/target rows of `clips` for `cfg.strategy`.
pub fn prepare_batch(clips: &[&Clip], cfg: &TrainConfig, epoch: usize) -> Result<Batch> {
    let mut batch = Batch {
        ids: Vec::with_capacity(clips.len()),
        input: Vec::with_capacity(clips.len()),
        target: Vec::with_capacity(clips.len()),
        reg: None,
    };
    let mut reg = RegSource {
        full: Vec::new(),
        maps: Vec::new(),
    };
    for clip in clips {
        batch.ids.push(clip.id.clone());
        let (input, target) = match cfg.strategy {
            Strategy::Ont => {
                let sc = pair_config(&cfg.subsample, cfg.seed, &clip.id, epoch);
                let (s1, s2, map) = subsampler::pair(&clip.noisy, &sc)?;
                if cfg.weights.gamma != 0.0 {
                    reg.full.push(clip.noisy.samples().to_vec());
                    reg.maps.push(map);
                }
                (s1.into_samples(), s2.into_samples())
            }
            Strategy::Nct => {
                let clean = need(clip, &clip.clean, "clean")?;
                (clip.noisy.samples().to_vec(), clean.samples().to_vec())
            }
            Strategy::Nnt => {
                let n2 = need(clip, &clip.noisy2, "noisy2")?;
                (clip.noisy.samples().to_vec(), n2.samples().to_vec())
            }
            Strategy::Nernt => {
                let (x, _) = nernt_input(clip, cfg, epoch)?;
                (x.into_samples(), clip.noisy.samples().to_vec())
            }
        };
        if input.len() != target.len() {
            return Err(Error::invalid(format!(
                "clip '{}': input has {} samples, target {}",
                clip.id,
                input.len(),
                target.len()
            )));
        }
        if let Some(first) = batch.input.first() {
            if first.len() != input.len() {
                return Err(Error::invalid("batch rows differ in length"));
            }
        }
        batch.input.push(input);
        batch.target.push(target);
    }
    if !reg.maps.is_empty() {
        batch.reg = Some(reg);
    }
    Ok(batch)
}

fn rows_var(t: &mut Tape, rows: &[Vec<f64>]) -> Result<Var> {
    let n = rows.first().map_or(0, Vec::len);
    Ok(t.constant(Tensor::new(vec![rows.len(), n], rows.concat())?))
}

/// Denoises the full signals without gradients and gathers `(g_s1, g_s2)`
/// with each row's map.
pub fn frozen_targets(
    model: &DenoiserModel,
    kernel: &Arc<StftKernel>,
    reg: &RegSource,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let x = rows_var(&mut t, &reg.full)?;
    let g = model.denoise(&mut t, &bound, kernel, x)?;
    let n = t.shape(g)[1];
    let data = t.data(g);
    reg.maps
        .iter()
        .enumerate()
        .map(|(i, map)| apply_slice(map, &data[i * n..(i + 1) * n]))
        .collect()
}

/// Loss graph for one batch. `frozen` carries the detached sub-sampled
/// full-signal outputs; without it the regularizer is left out.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    t: &mut Tape,
    model: &DenoiserModel,
    bound: &crate::network::BoundParams,
    kernel: &Arc<StftKernel>,
    batch: &Batch,
    frozen: Option<&[(Vec<f64>, Vec<f64>)]>,
    w: &LossWeights,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.row_len() < kernel.window_len() {
        return Err(Error::invalid(format!(
            "training rows of {} samples are shorter than one {}-sample window",
            batch.row_len(),
            kernel.window_len()
        )));
    }
    let x = rows_var(t, &batch.input)?;
    let y = rows_var(t, &batch.target)?;
    let est = model.denoise(t, bound, kernel, x)?;
    let y_spec = t.stft(y, kernel)?;
    let est_spec = t.stft(est, kernel)?;
    let terms = basic_loss(t, x, y, est, y_spec, est_spec, w)?;
    let (reg, total) = match frozen {
        Some(g) if w.gamma != 0.0 => {
            let g_s1: Vec<Vec<f64>> = g.iter().map(|p| p.0.clone()).collect();
            let g_s2: Vec<Vec<f64>> = g.iter().map(|p| p.1.clone()).collect();
            let g_s1 = rows_var(t, &g_s1)?;
            let g_s2 = rows_var(t, &g_s2)?;
            let r = reg_loss(t, est, y, g_s1, g_s2, w.reg_normalized)?;
            // Batch mean, matching the basic terms.
            let r = t.scale(r, 1.0 / batch.len() as f64)?;
            (Some(r), total_loss(t, terms.basic, r, w.gamma)?)
        }
        _ => (None, terms.basic),
    };
    Ok(Objective { terms, reg, total })
}

/// Loss values and per-parameter gradients for one batch.
pub fn loss_and_grads(
    model: &DenoiserModel,
    kernel: &Arc<StftKernel>,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    let frozen = match &batch.reg {
        Some(reg) if w.gamma != 0.0 => Some(frozen_targets(model, kernel, reg)?),
        _ => None,
    };
    let mut t = Tape::new();
    let bound = model.bind(&mut t, true);
    let obj = build_objective(&mut t, model, &bound, kernel, batch, frozen.as_deref(), w)?;
    let losses = obj.values(&t);
    let grads = t.backward(obj.total)?;
    let g = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.wrt(v, p.numel()))
        .collect();
    Ok((losses, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::signal_io::{synth_clean, synth_white_noise, SynthKind, SynthSpec};
    use crate::spectral::StftConfig;

    fn clip(id: &str, seed: u64) -> Clip {
        let spec = SynthSpec {
            kind: SynthKind::HarmonicStack,
            duration_s: 0.256,
            fundamental_hz: 150.0 + seed as f64,
            seed,
        };
        let clean = synth_clean(&spec, 8000).unwrap();
        let noise = synth_white_noise(clean.len(), 8000, seed + 100).unwrap();
        let noisy = overlay_noise(&clean, &noise, 5.0).unwrap();
        let noise2 = synth_white_noise(clean.len(), 8000, seed + 200).unwrap();
        Clip {
            id: id.into(),
            noisy2: Some(overlay_noise(&clean, &noise2, 5.0).unwrap()),
            extra_noise: Some(synth_white_noise(clean.len(), 8000, seed + 300).unwrap()),
            clean: Some(clean),
            noisy,
        }
    }

    fn pass_through() -> DenoiserModel {
        let config = ModelConfig {
            mask: crate::network::MaskMode::Unbounded,
            ..ModelConfig::tiny()
        };
        DenoiserModel::zeros(config).unwrap()
    }

    fn cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            stft: StftConfig {
                window_ms: 16.0,
                hop_ms: 4.0,
                fft_len: None,
                sample_rate_hz: 8000,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ont_batch_rows_are_pairs() {
        let c = clip("a", 1);
        let b = prepare_batch(&[&c], &cfg(Strategy::Ont), 0).unwrap();
        assert_eq!(b.row_len(), c.noisy.len() / 2);
        let reg = b.reg.as_ref().unwrap();
        let (s1, s2) = apply_slice(&reg.maps[0], c.noisy.samples()).unwrap();
        assert_eq!(s1, b.input[0]);
        assert_eq!(s2, b.target[0]);
        let other = prepare_batch(&[&c], &cfg(Strategy::Ont), 1).unwrap();
        assert_ne!(other.input[0], b.input[0]);
    }

    #[test]
    fn gamma_zero_has_no_reg_source() {
        let c = clip("a", 1);
        let mut k = cfg(Strategy::Ont);
        k.weights.gamma = 0.0;
        assert!(prepare_batch(&[&c], &k, 0).unwrap().reg.is_none());
    }

    #[test]
    fn baseline_targets() {
        let c = clip("a", 2);
        let b = prepare_batch(&[&c], &cfg(Strategy::Nct), 0).unwrap();
        assert_eq!(b.target[0], c.clean.as_ref().unwrap().samples());
        let b = prepare_batch(&[&c], &cfg(Strategy::Nnt), 0).unwrap();
        assert_eq!(b.target[0], c.noisy2.as_ref().unwrap().samples());
        let b = prepare_batch(&[&c], &cfg(Strategy::Nernt), 0).unwrap();
        assert_eq!(b.target[0], c.noisy.samples());
        assert!(b.reg.is_none());
    }

    #[test]
    fn nernt_draw_is_seeded() {
        let c = clip("a", 3);
        let k = cfg(Strategy::Nernt);
        let (a, u) = nernt_input(&c, &k, 0).unwrap();
        let (b, v) = nernt_input(&c, &k, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(u, v);
        assert!((0.0..=10.0).contains(&u));
        let (_, w) = nernt_input(&c, &k, 1).unwrap();
        assert_ne!(u, w);
    }

    #[test]
    fn missing_field_is_named() {
        let mut c = clip("q", 4);
        c.clean = None;
        let err = prepare_batch(&[&c], &cfg(Strategy::Nct), 0).unwrap_err();
        assert!(err.to_string().contains("'clean'"), "{err}");
    }

    #[test]
    fn nct_perfect_estimate_scores_wsdr_floor() {
        let c = clip("a", 5);
        let k = cfg(Strategy::Nct);
        let mut b = prepare_batch(&[&c], &k, 0).unwrap();
        // Estimate = target: a pass-through model fed the clean signal.
        b.input = b.target.clone();
        let mut model = pass_through();
        model.param_mut("proj.bias_re").unwrap().data_mut()[0] = 1.0;
        let kernel = StftKernel::new(&k.stft).unwrap();
        let (l, _) = loss_and_grads(&model, &kernel, &b, &k.weights).unwrap();
        assert!(l.l_time < 1e-20 && l.l_freq < 1e-6, "{l:?}");
        assert!((l.l_wsdr + 1.0).abs() < 1e-9, "{l:?}");
    }

    #[test]
    fn identity_model_has_zero_reg() {
        let c = clip("a", 6);
        let k = cfg(Strategy::Ont);
        let b = prepare_batch(&[&c], &k, 0).unwrap();
        let mut model = pass_through();
        model.param_mut("proj.bias_re").unwrap().data_mut()[0] = 1.0;
        let kernel = StftKernel::new(&k.stft).unwrap();
        let (l, _) = loss_and_grads(&model, &kernel, &b, &k.weights).unwrap();
        assert!(l.l_reg < 1e-20, "{l:?}");
    }

    #[test]
    fn gamma_zero_matches_basic_only() {
        let c = clip("a", 7);
        let k = cfg(Strategy::Ont);
        let b = prepare_batch(&[&c], &k, 0).unwrap();
        let model = DenoiserModel::new(ModelConfig::tiny(), 3).unwrap();
        let kernel = StftKernel::new(&k.stft).unwrap();
        let mut w0 = k.weights;
        w0.gamma = 0.0;
        let (l0, g0) = loss_and_grads(&model, &kernel, &b, &w0).unwrap();
        let mut nb = b.clone();
        nb.reg = None;
        let (l1, g1) = loss_and_grads(&model, &kernel, &nb, &k.weights).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
        assert_eq!(l0.total, l0.l_basic);
    }
}
