//! Adjacent-sample sub-sampling of a single noisy waveform into an
//! input/target training pair.
//!
//! The waveform is cut into consecutive windows of `k` samples (any trailing
//! remainder is dropped). In every window two neighbouring samples are picked;
//! one goes to `s1`, the other to `s2`. The choices are recorded in a
//! [`SubsampleIndexMap`] so the exact same selection can later be applied to
//! the network's output on the full waveform.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::signal_io::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Adjacent pair position and side assignment drawn per window.
    Random,
    /// `(0, 1)` in every window.
    Fixed,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown sampler mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsampleConfig {
    pub k: usize,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            k: 2,
            mode: SamplerMode::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleIndexMap {
    k: usize,
    offsets: Vec<(u32, u32)>,
}

impl SubsampleIndexMap {
    /// Builds a map from explicit offsets, checking range and adjacency.
    pub fn from_offsets(k: usize, offsets: Vec<(u32, u32)>) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("sampling interval k={k} must be >= 2")));
        }
        if offsets.is_empty() {
            return Err(Error::invalid("index map needs at least one window"));
        }
        for (w, &(a, b)) in offsets.iter().enumerate() {
            if a as usize >= k || b as usize >= k || a.abs_diff(b) != 1 {
                return Err(Error::invalid(format!(
                    "window {w}: offsets ({a}, {b}) are not adjacent within k={k}"
                )));
            }
        }
        Ok(Self { k, offsets })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_windows(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(u32, u32)] {
        &self.offsets
    }

    /// Source indices of `s1[w]` and `s2[w]`.
    pub fn source_indices(&self, w: usize) -> (usize, usize) {
        let (a, b) = self.offsets[w];
        (w * self.k + a as usize, w * self.k + b as usize)
    }

    /// Debug dump: a `window,a,b` header followed by one line per window.
    pub fn to_text(&self) -> String {
        let mut s = String::from("window,a,b\n");
        for (w, (a, b)) in self.offsets.iter().enumerate() {
            let _ = writeln!(s, "{w},{a},{b}");
        }
        s
    }

    /// Compact little-endian encoding: k, window count, then `u16` offset pairs.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&(self.k as u32).to_le_bytes())?;
        out.write_all(&(self.offsets.len() as u32).to_le_bytes())?;
        for &(a, b) in &self.offsets {
            out.write_all(&(a as u16).to_le_bytes())?;
            out.write_all(&(b as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        let mut u16buf = [0u8; 2];
        let bad = |e: std::io::Error| Error::Format(format!("index map: {e}"));
        input.read_exact(&mut u32buf).map_err(bad)?;
        let k = u32::from_le_bytes(u32buf) as usize;
        input.read_exact(&mut u32buf).map_err(bad)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        let mut offsets = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut u16buf).map_err(bad)?;
            let a = u16::from_le_bytes(u16buf) as u32;
            input.read_exact(&mut u16buf).map_err(bad)?;
            let b = u16::from_le_bytes(u16buf) as u32;
            offsets.push((a, b));
        }
        Self::from_offsets(k, offsets)
    }
}

pub fn plan(length: usize, config: &SubsampleConfig) -> Result<SubsampleIndexMap> {
    let k = config.k;
    if k < 2 {
        return Err(Error::invalid(format!("sampling interval k={k} must be >= 2")));
    }
    if k > usize::from(u16::MAX) {
        return Err(Error::invalid(format!("sampling interval k={k} is too large")));
    }
    if length < k {
        return Err(Error::invalid(format!(
            "signal of {length} samples is shorter than the sampling interval {k}"
        )));
    }
    let n_windows = length / k;
    let offsets = match config.mode {
        SamplerMode::Fixed => vec![(0, 1); n_windows],
        SamplerMode::Random => {
            let mut rng = rng_from(config.seed);
            (0..n_windows)
                .map(|_| {
                    let left = rng.gen_range(0..k - 1) as u32;
                    if rng.gen_bool(0.5) {
                        (left, left + 1)
                    } else {
                        (left + 1, left)
                    }
                })
                .collect()
        }
    };
    Ok(SubsampleIndexMap { k, offsets })
}

/// Gathers `(s1, s2)` from `w` with the recorded window offsets.
pub fn apply(map: &SubsampleIndexMap, w: &Waveform) -> Result<(Waveform, Waveform)> {
    let (s1, s2) = apply_slice(map, w.samples())?;
    Ok((w.with_samples(s1)?, w.with_samples(s2)?))
}

pub(crate) fn apply_slice(map: &SubsampleIndexMap, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let need = map.n_windows() * map.k;
    if x.len() < need {
        return Err(Error::invalid(format!(
            "signal of {} samples does not cover {} windows of {}",
            x.len(),
            map.n_windows(),
            map.k
        )));
    }
    let mut s1 = Vec::with_capacity(map.n_windows());
    let mut s2 = Vec::with_capacity(map.n_windows());
    for w in 0..map.n_windows() {
        let (i, j) = map.source_indices(w);
        s1.push(x[i]);
        s2.push(x[j]);
    }
    Ok((s1, s2))
}

pub fn pair(
    x: &Waveform,
    config: &SubsampleConfig,
) -> Result<(Waveform, Waveform, SubsampleIndexMap)> {
    let map = plan(x.len(), config)?;
    let (s1, s2) = apply(&map, x)?;
    Ok((s1, s2, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(k: usize, mode: SamplerMode, seed: u64) -> SubsampleConfig {
        SubsampleConfig { k, mode, seed }
    }

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| i as f64).collect(), 8000).unwrap()
    }

    #[test]
    fn fixed_plan() {
        let m = plan(8, &cfg(2, SamplerMode::Fixed, 0)).unwrap();
        assert_eq!(m.n_windows(), 4);
        assert_eq!(m.offsets(), &[(0, 1); 4]);
        assert_eq!(plan(9, &cfg(2, SamplerMode::Fixed, 0)).unwrap().n_windows(), 4);
    }

    #[test]
    fn fixed_apply_splits_even_and_odd() {
        let (s1, s2, _) = pair(&ramp(6), &cfg(2, SamplerMode::Fixed, 0)).unwrap();
        assert_eq!(s1.samples(), &[0.0, 2.0, 4.0]);
        assert_eq!(s2.samples(), &[1.0, 3.0, 5.0]);
        let (s1, _, _) = pair(&ramp(4), &cfg(2, SamplerMode::Fixed, 0)).unwrap();
        assert_eq!(s1.len(), 2);
    }

    #[test]
    fn random_plan_k3_enumeration() {
        // Every window of k=3 has exactly four admissible (a, b) choices.
        let allowed = [(0, 1), (1, 0), (1, 2), (2, 1)];
        let m = plan(6, &cfg(3, SamplerMode::Random, 1234)).unwrap();
        assert_eq!(m.n_windows(), 2);
        for o in m.offsets() {
            assert!(allowed.contains(o), "{o:?}");
        }
        assert_eq!(m, plan(6, &cfg(3, SamplerMode::Random, 1234)).unwrap());
    }

    #[test]
    fn constant_signal_gives_constant_pair() {
        let x = Waveform::new(vec![0.25; 33], 8000).unwrap();
        let (s1, s2, _) = pair(&x, &cfg(4, SamplerMode::Random, 9)).unwrap();
        assert!(s1.samples().iter().chain(s2.samples()).all(|&v| v == 0.25));
    }

    #[test]
    fn errors() {
        assert!(plan(1, &cfg(2, SamplerMode::Fixed, 0)).is_err());
        assert!(plan(10, &cfg(1, SamplerMode::Fixed, 0)).is_err());
        let m = plan(10, &cfg(2, SamplerMode::Fixed, 0)).unwrap();
        assert!(apply(&m, &ramp(9)).is_err());
        assert!(SubsampleIndexMap::from_offsets(3, vec![(0, 2)]).is_err());
    }

    #[test]
    fn side_assignment_is_fair() {
        let trials = 4000;
        let left_first = (0..trials)
            .filter(|&s| {
                let m = plan(4, &cfg(4, SamplerMode::Random, s)).unwrap();
                m.offsets()[0].0 < m.offsets()[0].1
            })
            .count();
        let p = left_first as f64 / trials as f64;
        // 5 standard errors of a fair coin over 4000 draws.
        assert!((p - 0.5).abs() < 5.0 * (0.25f64 / trials as f64).sqrt(), "p = {p}");
    }

    #[test]
    fn binary_and_text_dump() {
        let m = plan(20, &cfg(3, SamplerMode::Random, 5)).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(SubsampleIndexMap::read_from(&mut buf.as_slice()).unwrap(), m);
        let text = m.to_text();
        assert_eq!(text.lines().count(), m.n_windows() + 1);
    }

    #[test]
    fn band_limited_pairs_stay_close() {
        // |x[n+1] - x[n]| <= 2*pi*f/fs * max|x| for a sinusoid at f.
        let fs = 16_000.0;
        for f in [50.0, 300.0, 1200.0] {
            let x: Vec<f64> = (0..4000)
                .map(|n| 0.7 * (2.0 * std::f64::consts::PI * f * n as f64 / fs + 0.3).sin())
                .collect();
            let w = Waveform::new(x, 16_000).unwrap();
            let (s1, s2, _) = pair(&w, &cfg(2, SamplerMode::Random, 3)).unwrap();
            let max_gap = s1
                .samples()
                .iter()
                .zip(s2.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_gap <= 2.0 * std::f64::consts::PI * f / fs * 0.7 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn structural_invariants(len in 2usize..400, k in 2usize..9, seed in any::<u64>(), fixed in any::<bool>()) {
            prop_assume!(len >= k);
            let mode = if fixed { SamplerMode::Fixed } else { SamplerMode::Random };
            let x = ramp(len);
            let (s1, s2, m) = pair(&x, &cfg(k, mode, seed)).unwrap();
            prop_assert_eq!(s1.len(), len / k);
            prop_assert_eq!(s2.len(), len / k);
            for w in 0..m.n_windows() {
                let (i, j) = m.source_indices(w);
                prop_assert_eq!(i / k, w);
                prop_assert_eq!(j / k, w);
                prop_assert_eq!(i.abs_diff(j), 1);
                prop_assert_eq!(s1.samples()[w], i as f64);
                prop_assert_eq!(s2.samples()[w], j as f64);
            }
            if k == 2 {
                for w in 0..m.n_windows() {
                    let mut pair = [s1.samples()[w], s2.samples()[w]];
                    pair.sort_by(f64::total_cmp);
                    prop_assert_eq!(pair, [(2 * w) as f64, (2 * w + 1) as f64]);
                }
            }
        }
    }
}
