//! Training objectives.
//!
//! Every loss is built on a [`Tape`] so the same code path serves training
//! and plain evaluation; the `loss_*` functions over [`Waveform`] and
//! [`ComplexSpectrogram`] wrap a throwaway tape.
//!
//! Waveform batches are `[B, N]`; spectrogram batches are `[B, 2, F, T]`.

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor, Var, EPS};
use crate::error::{Error, Result};
use crate::signal_io::Waveform;
use crate::spectral::ComplexSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the frequency term inside the scaled bracket.
    pub alpha: f64,
    /// Scale of the bracket.
    pub beta: f64,
    /// Weight of the regularisation term.
    pub gamma: f64,
    /// Divide the regularisation sum of squares by the signal length.
    pub reg_normalized: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 1.0 / 200.0,
            gamma: 1.0,
            reg_normalized: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be non-negative", self.gamma)));
        }
        Ok(())
    }
}

fn same(t: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", t.shape(a), t.shape(b))));
    }
    Ok(())
}

/// Mean squared error.
pub fn time_loss(t: &mut Tape, target: Var, estimate: Var) -> Result<Var> {
    same(t, "time_loss", target, estimate)?;
    let d = t.sub(target, estimate)?;
    let sq = t.square(d)?;
    t.mean(sq)
}

/// Mean over bins and frames of `|(|S_r| + |S_i|) - (|Ŝ_r| + |Ŝ_i|)|`, every
/// absolute value smoothed as `sqrt(v^2 + EPS^2)`.
pub fn freq_loss(t: &mut Tape, target: Var, estimate: Var) -> Result<Var> {
    same(t, "freq_loss", target, estimate)?;
    let s = t.shape(target).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape("freq_loss", format!("{s:?}: expected [B, 2, F, T]")));
    }
    let l1 = |t: &mut Tape, v: Var| -> Result<Var> {
        let a = t.abs(v, EPS)?;
        let re = t.slice(a, 1, 0, 1)?;
        let im = t.slice(a, 1, 1, 1)?;
        t.add(re, im)
    };
    let a = l1(t, target)?;
    let b = l1(t, estimate)?;
    let d = t.sub(a, b)?;
    let d = t.abs(d, EPS)?;
    t.mean(d)
}

/// Weighted SDR for single rows `x`, `y`, `ŷ` of shape `[N]`.
fn wsdr_row(t: &mut Tape, x: Var, y: Var, yhat: Var) -> Result<Var> {
    let noise = t.sub(x, y)?;
    let noise_hat = t.sub(x, yhat)?;
    let yy = t.dot(y, y)?;
    let nn = t.dot(noise, noise)?;
    let den = t.add(yy, nn)?;
    let den = t.add_scalar(den, EPS * EPS)?;
    let alpha = t.div(yy, den)?;

    let cos = |t: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let num = t.dot(a, b)?;
        let na = t.norm(a)?;
        let nb = t.norm(b)?;
        let d = t.mul(na, nb)?;
        t.div(num, d)
    };
    let c1 = cos(t, y, yhat)?;
    let c2 = cos(t, noise, noise_hat)?;
    let a1 = t.mul(alpha, c1)?;
    let one_minus = t.scale(alpha, -1.0)?;
    let one_minus = t.add_scalar(one_minus, 1.0)?;
    let a2 = t.mul(one_minus, c2)?;
    let s = t.add(a1, a2)?;
    t.scale(s, -1.0)
}

/// Weighted SDR averaged over the batch; `x` is the network input, `y` the
/// target and `yhat` the estimate.
pub fn wsdr_loss(t: &mut Tape, x: Var, y: Var, yhat: Var) -> Result<Var> {
    same(t, "wsdr_loss", x, y)?;
    same(t, "wsdr_loss", y, yhat)?;
    let s = t.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("wsdr_loss", format!("{s:?}: expected [B, N]")));
    }
    let (b, n) = (s[0], s[1]);
    let mut acc = None;
    for i in 0..b {
        let row = |t: &mut Tape, v: Var| -> Result<Var> {
            let r = t.slice(v, 0, i, 1)?;
            t.reshape(r, &[n])
        };
        let (xi, yi, hi) = (row(t, x)?, row(t, y)?, row(t, yhat)?);
        let l = wsdr_row(t, xi, yi, hi)?;
        acc = Some(match acc {
            None => l,
            Some(a) => t.add(a, l)?,
        });
    }
    let total = acc.expect("batch is non-empty");
    t.scale(total, 1.0 / b as f64)
}

/// Component handles of the basic loss.
#[derive(Debug, Clone, Copy)]
pub struct BasicTerms {
    pub time: Var,
    pub freq: Var,
    pub wsdr: Var,
    pub basic: Var,
}

/// `(alpha * L_F + (1 - alpha) * L_T) * beta + L_wSDR`.
pub fn basic_loss(
    t: &mut Tape,
    x: Var,
    target: Var,
    estimate: Var,
    target_spec: Var,
    estimate_spec: Var,
    w: &LossWeights,
) -> Result<BasicTerms> {
    let time = time_loss(t, target, estimate)?;
    let freq = freq_loss(t, target_spec, estimate_spec)?;
    let wsdr = wsdr_loss(t, x, target, estimate)?;
    let f = t.scale(freq, w.alpha)?;
    let tl = t.scale(time, 1.0 - w.alpha)?;
    let bracket = t.add(f, tl)?;
    let bracket = t.scale(bracket, w.beta)?;
    let basic = t.add(bracket, wsdr)?;
    Ok(BasicTerms {
        time,
        freq,
        wsdr,
        basic,
    })
}

/// `|| f_s1 - s2 - (g_s1 - g_s2) ||^2`, optionally divided by the element count.
pub fn reg_loss(
    t: &mut Tape,
    f_s1: Var,
    s2: Var,
    g_s1: Var,
    g_s2: Var,
    normalized: bool,
) -> Result<Var> {
    same(t, "reg_loss", f_s1, s2)?;
    same(t, "reg_loss", s2, g_s1)?;
    same(t, "reg_loss", g_s1, g_s2)?;
    let a = t.sub(f_s1, s2)?;
    let b = t.sub(g_s1, g_s2)?;
    let d = t.sub(a, b)?;
    let sq = t.square(d)?;
    if normalized {
        t.mean(sq)
    } else {
        t.sum(sq)
    }
}

/// `basic + gamma * reg`.
pub fn total_loss(t: &mut Tape, basic: Var, reg: Var, gamma: f64) -> Result<Var> {
    let r = t.scale(reg, gamma)?;
    t.add(basic, r)
}

fn row(t: &mut Tape, w: &Waveform) -> Result<Var> {
    Ok(t.constant(Tensor::new(vec![1, w.len()], w.samples().to_vec())?))
}

fn spec_var(t: &mut Tape, s: &ComplexSpectrogram) -> Result<Var> {
    let data = [s.re.as_slice(), s.im.as_slice()].concat();
    Ok(t.constant(Tensor::new(vec![1, 2, s.bins, s.frames], data)?))
}

fn check_len(op: &str, a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{op}: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn loss_time(target: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_len("loss_time", target, estimate)?;
    let mut t = Tape::new();
    let (a, b) = (row(&mut t, target)?, row(&mut t, estimate)?);
    let l = time_loss(&mut t, a, b)?;
    Ok(t.scalar(l))
}

pub fn loss_freq(target: &ComplexSpectrogram, estimate: &ComplexSpectrogram) -> Result<f64> {
    if (target.bins, target.frames) != (estimate.bins, estimate.frames) {
        return Err(Error::invalid(format!(
            "loss_freq: {}x{} vs {}x{} spectrograms",
            target.bins, target.frames, estimate.bins, estimate.frames
        )));
    }
    let mut t = Tape::new();
    let (a, b) = (spec_var(&mut t, target)?, spec_var(&mut t, estimate)?);
    let l = freq_loss(&mut t, a, b)?;
    Ok(t.scalar(l))
}

pub fn loss_wsdr(x: &Waveform, y: &Waveform, yhat: &Waveform) -> Result<f64> {
    check_len("loss_wsdr", x, y)?;
    check_len("loss_wsdr", y, yhat)?;
    let mut t = Tape::new();
    let (a, b, c) = (row(&mut t, x)?, row(&mut t, y)?, row(&mut t, yhat)?);
    let l = wsdr_loss(&mut t, a, b, c)?;
    Ok(t.scalar(l))
}

pub fn loss_basic(
    x: &Waveform,
    target: &Waveform,
    estimate: &Waveform,
    target_spec: &ComplexSpectrogram,
    estimate_spec: &ComplexSpectrogram,
    w: &LossWeights,
) -> Result<f64> {
    check_len("loss_basic", x, target)?;
    check_len("loss_basic", target, estimate)?;
    let mut t = Tape::new();
    let (a, b, c) = (row(&mut t, x)?, row(&mut t, target)?, row(&mut t, estimate)?);
    let (s, e) = (spec_var(&mut t, target_spec)?, spec_var(&mut t, estimate_spec)?);
    let terms = basic_loss(&mut t, a, b, c, s, e, w)?;
    Ok(t.scalar(terms.basic))
}

pub fn loss_reg(
    f_s1: &Waveform,
    s2: &Waveform,
    g_s1: &Waveform,
    g_s2: &Waveform,
    normalized: bool,
) -> Result<f64> {
    check_len("loss_reg", f_s1, s2)?;
    check_len("loss_reg", s2, g_s1)?;
    check_len("loss_reg", g_s1, g_s2)?;
    let mut t = Tape::new();
    let v = [f_s1, s2, g_s1, g_s2].map(|w| row(&mut t, w));
    let [a, b, c, d] = v;
    let l = reg_loss(&mut t, a?, b?, c?, d?, normalized)?;
    Ok(t.scalar(l))
}

pub fn loss_total(basic: f64, reg: f64, w: &LossWeights) -> Result<f64> {
    if !basic.is_finite() || !reg.is_finite() {
        return Err(Error::invalid(format!(
            "loss_total: non-finite input (basic {basic}, reg {reg})"
        )));
    }
    Ok(basic + w.gamma * reg)
}
