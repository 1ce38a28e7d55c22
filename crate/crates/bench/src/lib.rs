//! Fixtures shared by the criterion benches.

use ont_core::signal_io::{overlay_noise, synth_clean, synth_white_noise};
use ont_core::training::Clip;
use ont_core::{SynthKind, SynthSpec, Waveform};

/// A harmonic clip mixed with white noise at 5 dB.
pub fn noisy_clip(duration_s: f64, sample_rate_hz: u32, seed: u64) -> Waveform {
    let spec = SynthSpec {
        kind: SynthKind::HarmonicStack,
        duration_s,
        fundamental_hz: 150.0,
        seed,
    };
    let clean = synth_clean(&spec, sample_rate_hz).expect("synth clean");
    let noise = synth_white_noise(clean.len(), sample_rate_hz, seed + 1).expect("synth noise");
    overlay_noise(&clean, &noise, 5.0).expect("mix")
}

/// A training clip that carries only the noisy signal.
pub fn noisy_only(id: &str, duration_s: f64, sample_rate_hz: u32) -> Clip {
    Clip {
        id: id.to_string(),
        noisy: noisy_clip(duration_s, sample_rate_hz, 7),
        clean: None,
        noisy2: None,
        extra_noise: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_length() {
        assert_eq!(noisy_clip(0.5, 8000, 1).len(), 4000);
        assert_eq!(noisy_only("a", 0.25, 8000).noisy.len(), 2000);
    }
}
