//! Mono waveforms, RIFF/WAVE I/O, synthetic clean signals and noise overlay.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::spectral::StftConfig;

/// A finite, non-empty, single-channel sample sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Same sample rate, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate_hz)
    }

    /// Rounds every sample to the nearest `f32`, the precision of float WAV files.
    pub fn quantized_f32(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| f64::from(s as f32)).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |detail: String| Error::Wav {
        path: path.to_path_buf(),
        detail,
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!(
            "expected a mono file, found {} channels",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (fmt, bits) => {
            return Err(wav_err(format!(
                "unsupported encoding {fmt:?} with {bits} bits per sample"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(e.to_string()))
}

pub fn write_wav(w: &Waveform, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    match encoding {
        WavEncoding::Pcm16 => {
            let hi = 1.0 - 1.0 / PCM16_SCALE;
            for &s in &w.samples {
                let q = (s.clamp(-1.0, hi) * PCM16_SCALE).round() as i16;
                writer.write_sample(q).map_err(wav_err)?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32).map_err(wav_err)?;
            }
        }
    }
    writer.finalize().map_err(wav_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Voiced-like tone: harmonics with 1/h roll-off, light vibrato and a
    /// syllable-rate envelope.
    HarmonicStack,
    /// Linear frequency sweep from the fundamental up to four times it.
    Chirp,
    /// Carrier at the fundamental with deep 4 Hz amplitude modulation.
    AmTone,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmonic" | "harmonic-stack" => Ok(Self::HarmonicStack),
            "chirp" => Ok(Self::Chirp),
            "am" | "am-tone" | "amplitude-modulated-tone" => Ok(Self::AmTone),
            other => Err(Error::Config(format!("unknown synth kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub duration_s: f64,
    pub fundamental_hz: f64,
    pub seed: u64,
}

const SYNTH_PEAK: f64 = 0.9;

/// Deterministic clean stand-in signal, peak-normalised to 0.9.
pub fn synth_clean(spec: &SynthSpec, sample_rate_hz: u32) -> Result<Waveform> {
    let fs = f64::from(sample_rate_hz);
    if sample_rate_hz == 0 || !(spec.duration_s > 0.0) {
        return Err(Error::invalid("duration and sample rate must be positive"));
    }
    if !(spec.fundamental_hz > 0.0) || spec.fundamental_hz >= fs / 2.0 {
        return Err(Error::invalid(format!(
            "fundamental {} Hz must lie in (0, {}) Hz",
            spec.fundamental_hz,
            fs / 2.0
        )));
    }
    let n = (spec.duration_s * fs).round() as usize;
    let min_len = StftConfig::new(sample_rate_hz).window_len();
    if n < min_len {
        return Err(Error::invalid(format!(
            "{n} samples is shorter than one analysis window ({min_len})"
        )));
    }
    let mut rng = rng_from(spec.seed);
    let f0 = spec.fundamental_hz;
    let nyq_guard = 0.45 * fs;
    let mut out = vec![0.0; n];
    match spec.kind {
        SynthKind::HarmonicStack => {
            let n_harm = ((nyq_guard / f0).floor() as usize).max(1);
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let vib_phase = rng.gen_range(0.0..2.0 * PI);
            let env_phase = rng.gen_range(0.0..2.0 * PI);
            let env_rate = rng.gen_range(2.5..4.5);
            let mut inst_phase = 0.0;
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let f_inst = f0 * (1.0 + 0.02 * (2.0 * PI * 5.0 * t + vib_phase).sin());
                inst_phase += 2.0 * PI * f_inst / fs;
                let env = 0.55 + 0.45 * (2.0 * PI * env_rate * t + env_phase).sin();
                let mut v = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let order = (h + 1) as f64;
                    if order * f_inst >= nyq_guard {
                        break;
                    }
                    v += (order * inst_phase + ph).sin() / order;
                }
                *o = env * v;
            }
        }
        SynthKind::Chirp => {
            let f1 = (4.0 * f0).min(nyq_guard);
            let phase0 = rng.gen_range(0.0..2.0 * PI);
            let dur = n as f64 / fs;
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
                *o = (phase + phase0).sin();
            }
        }
        SynthKind::AmTone => {
            let carrier_phase = rng.gen_range(0.0..2.0 * PI);
            let mod_phase = rng.gen_range(0.0..2.0 * PI);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let env = 1.0 + 0.9 * (2.0 * PI * 4.0 * t + mod_phase).sin();
                *o = env * (2.0 * PI * f0 * t + carrier_phase).sin();
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SYNTH_PEAK / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(out, sample_rate_hz)
}

/// Zero-mean, unit-variance gaussian noise.
pub fn synth_white_noise(length: usize, sample_rate_hz: u32, seed: u64) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::invalid("noise length must be at least 1"));
    }
    let mut rng = rng_from(seed);
    let samples = (0..length).map(|_| rng.sample(StandardNormal)).collect();
    Waveform::new(samples, sample_rate_hz)
}

/// Where a tiled noise clip starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseOffset {
    #[default]
    Start,
    /// Seeded uniform offset into the noise clip.
    Random(u64),
}

pub fn overlay_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    overlay_noise_with(clean, noise, snr_db, NoiseOffset::Start)
}

/// Tiles or truncates `noise` to the length of `clean`, scales it so the
/// mixture has the requested SNR with respect to `clean`, and adds it.
pub fn overlay_noise_with(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    offset: NoiseOffset,
) -> Result<Waveform> {
    if clean.sample_rate_hz != noise.sample_rate_hz {
        return Err(Error::invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate_hz, noise.sample_rate_hz
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("target SNR must be finite"));
    }
    let start = match offset {
        NoiseOffset::Start => 0,
        NoiseOffset::Random(seed) => rng_from(seed).gen_range(0..noise.len()),
    };
    let tiled: Vec<f64> = (0..clean.len())
        .map(|i| noise.samples[(start + i) % noise.len()])
        .collect();
    let clean_energy = clean.energy();
    let noise_energy: f64 = tiled.iter().map(|v| v * v).sum();
    if clean_energy <= 0.0 {
        return Err(Error::invalid("clean signal is silent"));
    }
    if noise_energy <= 0.0 {
        return Err(Error::invalid("noise signal is silent"));
    }
    let gain = (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean
        .samples
        .iter()
        .zip(&tiled)
        .map(|(c, n)| c + gain * n)
        .collect();
    clean.with_samples(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn pcm16_values_scale_by_32768() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [0i16, 16384, -32768] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples(), &[0.0, 0.5, -1.0]);
    }

    #[test]
    fn pcm16_write_quantizes_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.wav");
        write_wav(&wf(&[0.5, 2.0, -3.0, 0.0]), &path, WavEncoding::Pcm16).unwrap();
        let raw: Vec<i16> = hound::WavReader::open(&path)
            .unwrap()
            .samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(raw, vec![16384, 32767, -32768, 0]);
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        let z = wf(&[0.0; 64]);
        write_wav(&z, &path, WavEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&path).unwrap(), z);
    }

    #[test]
    fn stereo_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(1i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn unsupported_encoding_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path).unwrap_err().to_string().contains("unsupported"));
        assert!(matches!(
            read_wav(dir.path().join("nope.wav")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unwritable_path_errors() {
        let r = write_wav(&wf(&[0.0]), "/nonexistent-dir/x.wav", WavEncoding::Float32);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn synth_is_seeded_and_bounded() {
        let spec = SynthSpec {
            kind: SynthKind::HarmonicStack,
            duration_s: 1.0,
            fundamental_hz: 220.0,
            seed: 7,
        };
        let a = synth_clean(&spec, 16_000).unwrap();
        let b = synth_clean(&spec, 16_000).unwrap();
        assert_eq!(a, b);
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 0.9 + 1e-12);
    }

    #[test]
    fn am_tone_has_envelope_variation() {
        let spec = SynthSpec {
            kind: SynthKind::AmTone,
            duration_s: 1.0,
            fundamental_hz: 300.0,
            seed: 3,
        };
        let w = synth_clean(&spec, 16_000).unwrap();
        let frame = 320;
        let rms: Vec<f64> = w
            .samples()
            .chunks_exact(frame)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt())
            .collect();
        let max = rms.iter().cloned().fold(f64::MIN, f64::max);
        let min = rms.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min > 2.0, "ratio {}", max / min);
    }

    #[test]
    fn synth_rejects_short_and_aliased() {
        let mut spec = SynthSpec {
            kind: SynthKind::Chirp,
            duration_s: 0.01,
            fundamental_hz: 220.0,
            seed: 1,
        };
        assert!(synth_clean(&spec, 16_000).is_err());
        spec.duration_s = 1.0;
        spec.fundamental_hz = 9000.0;
        assert!(synth_clean(&spec, 16_000).is_err());
    }

    #[test]
    fn white_noise_is_seeded_and_centred() {
        assert_eq!(
            synth_white_noise(100, 8000, 5).unwrap(),
            synth_white_noise(100, 8000, 5).unwrap()
        );
        assert!(synth_white_noise(0, 8000, 5).is_err());
        let n = 1_000_000;
        let w = synth_white_noise(n, 8000, 42).unwrap();
        let mean = w.samples().iter().sum::<f64>() / n as f64;
        let var = w.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = var.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() <= 5.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn overlay_equal_energy_at_zero_db() {
        let out = overlay_noise(&wf(&[1.0; 4]), &wf(&[1.0, -1.0, 1.0, -1.0]), 0.0).unwrap();
        for (a, b) in out.samples().iter().zip([2.0, 0.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overlay_tiles_short_noise_from_start() {
        let clean = wf(&[0.5, -0.2, 0.1, 0.7, 0.3, -0.4, 0.2]);
        let noise = wf(&[1.0, -2.0, 0.5]);
        let out = overlay_noise(&clean, &noise, 3.0).unwrap();
        assert_eq!(out.len(), clean.len());
        let diff: Vec<f64> = out
            .samples()
            .iter()
            .zip(clean.samples())
            .map(|(a, b)| a - b)
            .collect();
        for i in 3..diff.len() {
            assert!((diff[i] - diff[i - 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlay_random_offset_is_seeded() {
        let clean = wf(&[0.5; 16]);
        let noise = synth_white_noise(5, 16_000, 1).unwrap();
        let a = overlay_noise_with(&clean, &noise, 0.0, NoiseOffset::Random(9)).unwrap();
        let b = overlay_noise_with(&clean, &noise, 0.0, NoiseOffset::Random(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlay_errors() {
        let a = wf(&[1.0, 1.0]);
        let silent = wf(&[0.0, 0.0]);
        let other_rate = Waveform::new(vec![1.0], 8000).unwrap();
        assert!(overlay_noise(&a, &other_rate, 0.0).is_err());
        assert!(overlay_noise(&silent, &a, 0.0).is_err());
        assert!(overlay_noise(&a, &silent, 0.0).is_err());
    }
}
