//! Hamming-window STFT analysis and weighted overlap-add synthesis.
//!
//! Frame `t` covers samples `[t*hop, t*hop + window)`; the windowed frame is
//! zero-padded to `fft_len` and transformed one-sided, giving
//! `fft_len/2 + 1` bins. Synthesis windows each inverse frame again and
//! divides the overlap-added sum by the overlap-added squared window, which
//! inverts the analysis exactly wherever that sum is non-zero.
//!
//! [`StftKernel`] also provides the adjoints of both linear maps so the
//! autodiff engine can differentiate through them.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal_io::Waveform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    /// `None` selects the next power of two at or above the window length.
    pub fft_len: Option<usize>,
    pub sample_rate_hz: u32,
}

impl StftConfig {
    /// 64 ms Hamming window, 16 ms hop.
    pub fn new(sample_rate_hz: u32) -> Self {
        Self {
            window_ms: 64.0,
            hop_ms: 16.0,
            fft_len: None,
            sample_rate_hz,
        }
    }

    pub fn with_sample_rate(mut self, sample_rate_hz: u32) -> Self {
        self.sample_rate_hz = sample_rate_hz;
        self
    }

    pub fn window_len(&self) -> usize {
        (self.window_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
            .unwrap_or_else(|| self.window_len().next_power_of_two())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len() / 2 + 1
    }

    /// `1 + floor((len - window) / hop)`, or zero if `len < window`.
    pub fn n_frames(&self, len: usize) -> usize {
        let win = self.window_len();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_len()
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.window_len() + (frames - 1) * self.hop_len()
        }
    }

    /// Smallest length `>= len` that ends exactly on a frame boundary.
    pub fn padded_len(&self, len: usize) -> usize {
        let win = self.window_len();
        if len <= win {
            return win;
        }
        let hop = self.hop_len();
        win + (len - win).div_ceil(hop) * hop
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop, n) = (self.window_len(), self.hop_len(), self.fft_len());
        if self.sample_rate_hz == 0 || win < 2 || hop == 0 {
            return Err(Error::invalid(format!(
                "degenerate STFT geometry: window {win}, hop {hop}"
            )));
        }
        if hop >= win {
            return Err(Error::invalid(format!("hop {hop} must be shorter than window {win}")));
        }
        if n < win {
            return Err(Error::invalid(format!("fft length {n} is shorter than window {win}")));
        }
        Ok(())
    }
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Precomputed window, FFT plans and overlap-add normaliser for one geometry.
pub struct StftKernel {
    config: StftConfig,
    window: Vec<f64>,
    hop: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftKernel")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl StftKernel {
    pub fn new(config: &StftConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let fft_len = config.fft_len();
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            config: *config,
            window: hamming(config.window_len()),
            hop: config.hop_len(),
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }))
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn n_frames(&self, len: usize) -> usize {
        self.config.n_frames(len)
    }

    /// Writes the bins-by-frames spectrum of `x` (row-major, `[f][t]`).
    pub fn analyze(&self, x: &[f64], re: &mut [f64], im: &mut [f64]) {
        let frames = self.n_frames(x.len());
        let bins = self.n_bins();
        debug_assert_eq!(re.len(), bins * frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for t in 0..frames {
            let start = t * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (j, w) in self.window.iter().enumerate() {
                buf[j].re = x[start + j] * w;
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                re[f * frames + t] = buf[f].re;
                im[f * frames + t] = buf[f].im;
            }
        }
    }

    /// Adjoint of [`analyze`](Self::analyze): accumulates into `gx`.
    pub fn analyze_adjoint(&self, g_re: &[f64], g_im: &[f64], frames: usize, gx: &mut [f64]) {
        let bins = self.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for f in 0..bins {
                buf[f] = Complex::new(g_re[f * frames + t], g_im[f * frames + t]);
            }
            // Unnormalised inverse transform: sum_k G_k e^{+i 2 pi j k / n}.
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for (j, w) in self.window.iter().enumerate() {
                gx[start + j] += w * buf[j].re;
            }
        }
    }

    fn ola_norm(&self, frames: usize) -> Vec<f64> {
        let mut denom = vec![0.0; self.config.covered_len(frames)];
        for t in 0..frames {
            let start = t * self.hop;
            for (j, w) in self.window.iter().enumerate() {
                denom[start + j] += w * w;
            }
        }
        denom
    }

    /// Weighted overlap-add synthesis of `frames` frames into `out`
    /// (length [`StftConfig::covered_len`]).
    pub fn synthesize(&self, re: &[f64], im: &[f64], frames: usize, out: &mut [f64]) {
        let bins = self.n_bins();
        let n = self.fft_len;
        let denom = self.ola_norm(frames);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = Complex::new(re[f * frames + t], im[f * frames + t]);
            }
            // The real inverse ignores imaginary parts at DC and Nyquist.
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            for f in 1..n - bins + 1 {
                buf[n - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            let scale = 1.0 / n as f64;
            for (j, w) in self.window.iter().enumerate() {
                out[start + j] += w * buf[j].re * scale;
            }
        }
        for (o, d) in out.iter_mut().zip(&denom) {
            *o = if *d > 1e-12 { *o / d } else { 0.0 };
        }
    }

    /// Adjoint of [`synthesize`](Self::synthesize): accumulates into `g_re`, `g_im`.
    pub fn synthesize_adjoint(&self, gy: &[f64], frames: usize, g_re: &mut [f64], g_im: &mut [f64]) {
        let bins = self.n_bins();
        let n = self.fft_len;
        let denom = self.ola_norm(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let start = t * self.hop;
            for (j, w) in self.window.iter().enumerate() {
                let d = denom[start + j];
                if d > 1e-12 {
                    buf[j].re = w * gy[start + j] / d;
                }
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                let edge = f == 0 || (n % 2 == 0 && f == n / 2);
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                g_re[f * frames + t] += c * buf[f].re;
                if !edge {
                    g_im[f * frames + t] += c * buf[f].im;
                }
            }
        }
    }
}

/// One-sided complex spectrogram, `[bin][frame]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub original_length: usize,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros_like(&self) -> Self {
        Self {
            re: vec![0.0; self.re.len()],
            im: vec![0.0; self.im.len()],
            ..self.clone()
        }
    }

    pub fn magnitude(&self, f: usize, t: usize) -> f64 {
        let i = f * self.frames + t;
        self.re[i].hypot(self.im[i])
    }

    /// `20 log10 |S|`, floored at `floor_db`.
    pub fn log_magnitude_db(&self, floor_db: f64) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| {
                let m = r.hypot(*i);
                if m > 0.0 {
                    (20.0 * m.log10()).max(floor_db)
                } else {
                    floor_db
                }
            })
            .collect()
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let cfg = cfg.with_sample_rate(w.sample_rate_hz());
    let kernel = StftKernel::new(&cfg)?;
    if w.len() < kernel.window_len() {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than the {}-sample window",
            w.len(),
            kernel.window_len()
        )));
    }
    let frames = kernel.n_frames(w.len());
    let bins = kernel.n_bins();
    let mut re = vec![0.0; bins * frames];
    let mut im = vec![0.0; bins * frames];
    kernel.analyze(w.samples(), &mut re, &mut im);
    Ok(ComplexSpectrogram {
        re,
        im,
        bins,
        frames,
        original_length: w.len(),
        config: cfg,
    })
}

/// Inverse of [`stft`], truncated (or zero-extended) to `original_length`.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    let cfg = cfg.with_sample_rate(spec.config.sample_rate_hz);
    let kernel = StftKernel::new(&cfg)?;
    if spec.bins != kernel.n_bins()
        || spec.re.len() != spec.bins * spec.frames
        || spec.im.len() != spec.re.len()
        || spec.frames == 0
    {
        return Err(Error::invalid(format!(
            "spectrogram geometry {}x{} does not match STFT config ({} bins)",
            spec.bins,
            spec.frames,
            kernel.n_bins()
        )));
    }
    let mut out = vec![0.0; cfg.covered_len(spec.frames)];
    kernel.synthesize(&spec.re, &spec.im, spec.frames, &mut out);
    out.resize(spec.original_length.max(1), 0.0);
    Waveform::new(out, cfg.sample_rate_hz)
}
