//! Adam with bias correction and a step learning-rate schedule.

use std::io::{Read, Write};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }

    const MAGIC: &'static [u8; 4] = b"ONTA";

    /// Moments in full double precision, little-endian.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&self.step.to_le_bytes())?;
        for v in [self.beta1, self.beta2, self.eps] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            out.write_all(&(m.len() as u64).to_le_bytes())?;
            for x in m.iter().chain(v) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Format(format!("optimizer state: {e}"));
        let mut b8 = [0u8; 8];
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("optimizer state: bad magic".into()));
        }
        let mut u64_ = |input: &mut dyn Read| -> Result<u64> {
            input.read_exact(&mut b8).map_err(bad)?;
            Ok(u64::from_le_bytes(b8))
        };
        let step = u64_(input)?;
        let beta1 = f64::from_bits(u64_(input)?);
        let beta2 = f64::from_bits(u64_(input)?);
        let eps = f64::from_bits(u64_(input)?);
        let count = u64_(input)? as usize;
        let mut m = Vec::with_capacity(count.min(1 << 16));
        let mut v = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u64_(input)? as usize;
            let mut read_vec = |input: &mut dyn Read| -> Result<Vec<f64>> {
                (0..n).map(|_| u64_(input).map(f64::from_bits)).collect()
            };
            m.push(read_vec(input)?);
            v.push(read_vec(input)?);
        }
        Ok(Self {
            m,
            v,
            step,
            beta1,
            beta2,
            eps,
        })
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_update",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::shape(
                "adam_update",
                format!("tensor {i}: {} values, gradient of {}", p.numel(), g.len()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `lr * factor^floor(epoch / interval)`.
pub fn lr_schedule(base_lr: f64, factor: f64, interval: usize, epoch: usize) -> f64 {
    base_lr * factor.powi((epoch / interval.max(1)) as i32)
}
