//! Objective quality measures: SNR, segmental SNR and STOI, plus per-clip
//! reports with mean and standard deviation aggregates.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::network::{denoise_waveform, DenoiserModel};
use crate::signal_io::{read_wav, Waveform};
use crate::spectral::StftConfig;
use crate::training::manifest::ManifestItem;

fn check_pair(op: &str, a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{op}: length mismatch ({} vs {})", a.len(), b.len())));
    }
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(Error::invalid(format!(
            "{op}: sample rate mismatch ({} vs {} Hz)",
            a.sample_rate_hz(),
            b.sample_rate_hz()
        )));
    }
    Ok(())
}

/// `10 log10(||ref||^2 / ||test - ref||^2)`; `+inf` when the residual is zero.
pub fn snr_db(reference: &Waveform, test: &Waveform) -> Result<f64> {
    check_pair("snr_db", reference, test)?;
    let signal = reference.energy();
    if signal <= 0.0 {
        return Err(Error::invalid("snr_db: reference is silent"));
    }
    let residual: f64 = reference
        .samples()
        .iter()
        .zip(test.samples())
        .map(|(r, t)| (t - r) * (t - r))
        .sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / residual).log10())
}

pub const SSNR_FRAME_MS: f64 = 32.0;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;

/// Mean of per-frame SNRs over non-overlapping 32 ms frames, each clamped to
/// `[-10, 35]` dB. Frames whose reference is silent are skipped; a partial
/// trailing frame is ignored.
pub fn ssnr_db(reference: &Waveform, test: &Waveform) -> Result<f64> {
    check_pair("ssnr_db", reference, test)?;
    let frame = (SSNR_FRAME_MS * f64::from(reference.sample_rate_hz()) / 1000.0).round() as usize;
    if frame == 0 || reference.len() < frame {
        return Err(Error::invalid(format!(
            "ssnr_db: {} samples is shorter than one {frame}-sample frame",
            reference.len()
        )));
    }
    let (r, t) = (reference.samples(), test.samples());
    let mut sum = 0.0;
    let mut count = 0usize;
    for start in (0..=r.len() - frame).step_by(frame) {
        let sig: f64 = r[start..start + frame].iter().map(|v| v * v).sum();
        if sig == 0.0 {
            continue;
        }
        let err: f64 = r[start..start + frame]
            .iter()
            .zip(&t[start..start + frame])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let db = if err == 0.0 {
            SSNR_MAX_DB
        } else {
            10.0 * (sig / err).log10()
        };
        sum += db.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("ssnr_db: reference is silent in every frame"));
    }
    Ok(sum / count as f64)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Windowed-sinc polyphase rate conversion. The kernel is a Blackman-windowed
/// sinc whose cutoff is the lower of the two Nyquist rates.
pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz {
        return x.to_vec();
    }
    let g = gcd(u64::from(from_hz), u64::from(to_hz));
    let (up, down) = ((u64::from(to_hz) / g) as usize, (u64::from(from_hz) / g) as usize);
    let fc = (to_hz as f64 / from_hz as f64).min(1.0);
    let half = (16.0 / fc).ceil() as isize;
    let kernel = |d: f64| {
        if d.abs() >= half as f64 {
            return 0.0;
        }
        let s = if d == 0.0 { 1.0 } else { (PI * fc * d).sin() / (PI * fc * d) };
        let u = (d + half as f64) / (2 * half) as f64;
        let w = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
        fc * s * w
    };
    // phases[r][j] weights x[q + j - half] for outputs at q + r/up.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|r| {
            (0..=2 * half)
                .map(|j| kernel(r as f64 / up as f64 - (j - half) as f64))
                .collect()
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|n| {
            let pos = n * down;
            let (q, r) = ((pos / up) as isize, pos % up);
            phases[r]
                .iter()
                .enumerate()
                .filter_map(|(j, h)| {
                    let k = q + j as isize - half;
                    (k >= 0 && (k as usize) < x.len()).then(|| h * x[k as usize])
                })
                .sum()
        })
        .collect()
}

const STOI_FS: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Hann window of `n` points without the zero end points.
fn hann_interior(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Drops frames of both signals where the reference is more than
/// `dyn_range` dB below its loudest frame, then overlap-adds what remains.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hann_interior(STOI_FRAME);
    if x.len() < STOI_FRAME {
        return (Vec::new(), Vec::new());
    }
    let starts: Vec<usize> = (0..=x.len() - STOI_FRAME).step_by(hop).collect();
    let frame = |s: &[f64], i: usize| -> Vec<f64> {
        s[i..i + STOI_FRAME].iter().zip(&w).map(|(a, b)| a * b).collect()
    };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| 20.0 * (norm(&frame(x, i)) + f64::EPSILON).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, e)| **e > max - STOI_DYN_RANGE_DB)
        .map(|(s, _)| *s)
        .collect();
    if keep.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (keep.len() - 1) * hop + STOI_FRAME;
    let mut xs = vec![0.0; len];
    let mut ys = vec![0.0; len];
    for (k, &s) in keep.iter().enumerate() {
        let fx = frame(x, s);
        let fy = frame(y, s);
        for j in 0..STOI_FRAME {
            xs[k * hop + j] += fx[j];
            ys[k * hop + j] += fy[j];
        }
    }
    (xs, ys)
}

/// Magnitude-squared one-sided spectra, `[frame][bin]`.
fn power_frames(x: &[f64]) -> Vec<Vec<f64>> {
    let hop = STOI_FRAME / 2;
    let w = hann_interior(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_NFFT);
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_NFFT];
    let mut out = Vec::new();
    let mut i = 0;
    while i + STOI_FRAME < x.len() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for j in 0..STOI_FRAME {
            buf[j].re = x[i + j] * w[j];
        }
        fft.process(&mut buf);
        out.push(buf[..STOI_NFFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
        i += hop;
    }
    out
}

/// `[band] -> (first_bin, end_bin)` of the one-third octave bands.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = STOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|i| i as f64 * f64::from(STOI_FS) / STOI_NFFT as f64)
        .collect();
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| {
                (freqs[a] - f)
                    .powi(2)
                    .partial_cmp(&(freqs[b] - f).powi(2))
                    .expect("finite")
            })
            .expect("non-empty")
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Short-time objective intelligibility of `test` against `reference`.
pub fn stoi(reference: &Waveform, test: &Waveform) -> Result<f64> {
    check_pair("stoi", reference, test)?;
    let fs = reference.sample_rate_hz();
    let x = resample(reference.samples(), fs, STOI_FS);
    let y = resample(test.samples(), fs, STOI_FS);
    let (x, y) = remove_silent_frames(&x, &y);
    let (px, py) = (power_frames(&x), power_frames(&y));
    if px.len() < STOI_SEGMENT {
        return Err(Error::invalid(format!(
            "stoi: {} active frames, at least {STOI_SEGMENT} are needed",
            px.len()
        )));
    }
    let bands = third_octave_bands();
    let tob = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
        bands
            .iter()
            .map(|&(lo, hi)| p.iter().map(|f| f[lo..hi].iter().sum::<f64>().sqrt()).collect())
            .collect()
    };
    let (xb, yb) = (tob(&px), tob(&py));
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let n_frames = px.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=n_frames {
        for (xband, yband) in xb.iter().zip(&yb) {
            let xs = &xband[m - STOI_SEGMENT..m];
            let ys = &yband[m - STOI_SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + eps);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(yv, xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter_mut().for_each(|a| *a -= mean);
                let n = norm(v) + eps;
                v.iter_mut().for_each(|a| *a /= n);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&fmt_value(*v))
    }
}

/// Numbers as text, with `inf`, `-inf` and `nan` spelled out.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub strategy: String,
    pub preset: String,
    #[serde(serialize_with = "ser_db")]
    pub snr_db: f64,
    #[serde(serialize_with = "ser_db")]
    pub ssnr_db: f64,
    #[serde(serialize_with = "ser_db")]
    pub stoi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    #[serde(serialize_with = "ser_db")]
    pub mean: f64,
    #[serde(serialize_with = "ser_db")]
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample (n - 1) standard deviation; zero spread for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub strategy: String,
    pub preset: String,
    pub clips: usize,
    pub snr_db: MeanStd,
    pub ssnr_db: MeanStd,
    pub stoi: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ClipMetrics>,
}

impl MetricsReport {
    /// One aggregate per `(strategy, preset)` in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&ClipMetrics>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.strategy.clone(), r.preset.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let col = |f: fn(&ClipMetrics) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                Aggregate {
                    clips: rows.len(),
                    snr_db: col(|r| r.snr_db),
                    ssnr_db: col(|r| r.ssnr_db),
                    stoi: col(|r| r.stoi),
                    strategy: key.0,
                    preset: key.1,
                }
            })
            .collect()
    }

    pub fn aggregate(&self, strategy: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.strategy == strategy)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        w.write_record(["clip", "strategy", "preset", "snr_db", "ssnr_db", "stoi"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.clip.clone(),
                r.strategy.clone(),
                r.preset.clone(),
                fmt_value(r.snr_db),
                fmt_value(r.ssnr_db),
                fmt_value(r.stoi),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            rows: &'a [ClipMetrics],
            aggregates: Vec<Aggregate>,
        }
        serde_json::to_string_pretty(&Doc {
            rows: &self.rows,
            aggregates: self.aggregates(),
        })
        .expect("report serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// All three metrics of `test` against `reference`.
pub fn clip_metrics(
    clip: &str,
    strategy: &str,
    preset: &str,
    reference: &Waveform,
    test: &Waveform,
) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        clip: clip.to_string(),
        strategy: strategy.to_string(),
        preset: preset.to_string(),
        snr_db: snr_db(reference, test)?,
        ssnr_db: ssnr_db(reference, test)?,
        stoi: stoi(reference, test)?,
    })
}

/// Rows for the denoised output of every item, labelled `strategy`, plus a
/// `noisy` baseline row per item for the unprocessed input.
pub fn evaluate(
    model: &DenoiserModel,
    items: &[ManifestItem],
    stft: &StftConfig,
    strategy: &str,
) -> Result<MetricsReport> {
    let preset = model.config().preset.clone();
    let mut rows = Vec::with_capacity(items.len());
    let mut baseline = Vec::with_capacity(items.len());
    for item in items {
        let clean_path = item.clean.as_ref().ok_or_else(|| {
            Error::Manifest(format!("item '{}' lacks the 'clean' field needed for evaluation", item.id))
        })?;
        let clean = read_wav(clean_path)?;
        let noisy = read_wav(&item.noisy)?;
        let out = denoise_waveform(model, &noisy, stft)?;
        rows.push(clip_metrics(&item.id, strategy, &preset, &clean, &out)?);
        baseline.push(clip_metrics(&item.id, "noisy", "-", &clean, &noisy)?);
    }
    rows.extend(baseline);
    Ok(MetricsReport { rows })
}
