//! Two-stage transformer blocks and their complex coupling.
//!
//! A block runs a post-norm transformer encoder layer across frequency for
//! every frame, then another across time for every bin. Sequence tensors
//! are laid out `[batch, freq, time, channel]` throughout.

use super::layers::{ComplexVar, LEAKY_SLOPE};
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TstbSpec {
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TstbSpec {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Parameter suffixes and shapes of one encoder layer.
    pub fn layer_params(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, f) = (self.model_dim, self.ff_dim);
        vec![
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ln1_g", vec![d]),
            ("ln1_b", vec![d]),
            ("w1", vec![d, f]),
            ("w2", vec![f, d]),
            ("ln2_g", vec![d]),
            ("ln2_b", vec![d]),
        ]
    }
}

/// Parameter lookup by full name.
pub type ParamFn<'a> = dyn Fn(&str) -> Var + 'a;

fn affine_norm(t: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = t.layer_norm(x, 2, LN_EPS)?;
    let n = t.mul_channel(n, g, 2)?;
    t.add_bias(n, b, 2)
}

fn split_heads(t: &mut Tape, x: Var, n: usize, l: usize, h: usize, dh: usize, key: bool) -> Result<Var> {
    let x = t.reshape(x, &[n, l, h, dh])?;
    if key {
        let x = t.permute(x, &[0, 2, 3, 1])?;
        t.reshape(x, &[n * h, dh, l])
    } else {
        let x = t.permute(x, &[0, 2, 1, 3])?;
        t.reshape(x, &[n * h, l, dh])
    }
}

/// Post-norm encoder layer over `x: [N, L, D]`.
pub fn encoder_layer(
    t: &mut Tape,
    x: Var,
    spec: &TstbSpec,
    p: &ParamFn<'_>,
    prefix: &str,
) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != spec.model_dim {
        return Err(Error::shape(
            "encoder_layer",
            format!("{shape:?}: expected [N, L, {}]", spec.model_dim),
        ));
    }
    let (n, l, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (spec.heads, d / spec.heads);
    let w = |s: &str| p(&format!("{prefix}.{s}"));

    let q = t.matmul(x, w("wq"))?;
    let k = t.matmul(x, w("wk"))?;
    let v = t.matmul(x, w("wv"))?;
    let q = split_heads(t, q, n, l, h, dh, false)?;
    let kt = split_heads(t, k, n, l, h, dh, true)?;
    let v = split_heads(t, v, n, l, h, dh, false)?;
    let scores = t.matmul(q, kt)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = t.softmax(scores, 2)?;
    let ctx = t.matmul(attn, v)?;
    let ctx = t.reshape(ctx, &[n, h, l, dh])?;
    let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = t.reshape(ctx, &[n, l, d])?;
    let o = t.matmul(ctx, w("wo"))?;
    let r = t.add(x, o)?;
    let x1 = affine_norm(t, r, w("ln1_g"), w("ln1_b"))?;

    let f = t.matmul(x1, w("w1"))?;
    let f = t.leaky_relu(f, LEAKY_SLOPE)?;
    let f = t.matmul(f, w("w2"))?;
    let r = t.add(x1, f)?;
    affine_norm(t, r, w("ln2_g"), w("ln2_b"))
}

/// Frequency stage then time stage on `x: [B, F, T, C]`.
pub fn tstb_forward(
    t: &mut Tape,
    x: Var,
    spec: &TstbSpec,
    p: &ParamFn<'_>,
    prefix: &str,
) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 4 || s[3] != spec.model_dim {
        return Err(Error::shape(
            "tstb",
            format!("{s:?}: expected [B, F, T, {}]", spec.model_dim),
        ));
    }
    let (b, f, tt, c) = (s[0], s[1], s[2], s[3]);
    let y = t.permute(x, &[0, 2, 1, 3])?;
    let y = t.reshape(y, &[b * tt, f, c])?;
    let y = encoder_layer(t, y, spec, p, &format!("{prefix}.freq"))?;
    let y = t.reshape(y, &[b, tt, f, c])?;
    let y = t.permute(y, &[0, 2, 1, 3])?;
    let y = t.reshape(y, &[b * f, tt, c])?;
    let y = encoder_layer(t, y, spec, p, &format!("{prefix}.time"))?;
    t.reshape(y, &[b, f, tt, c])
}

/// A stack of `n_blocks` blocks named `{prefix}.b{i}`.
pub fn tstm_forward(
    t: &mut Tape,
    x: Var,
    n_blocks: usize,
    spec: &TstbSpec,
    p: &ParamFn<'_>,
    prefix: &str,
) -> Result<Var> {
    (0..n_blocks).try_fold(x, |h, i| tstb_forward(t, h, spec, p, &format!("{prefix}.b{i}")))
}

/// `(F_rr - F_ii) + j (F_ri + F_ir)` with `F_ab = M_b(X_a)`, for two real
/// maps `m_r`, `m_i` acting on `[B, ...]` tensors without mixing the batch.
pub fn ctstm<R, I>(t: &mut Tape, x: ComplexVar, mut m_r: R, mut m_i: I) -> Result<ComplexVar>
where
    R: FnMut(&mut Tape, Var) -> Result<Var>,
    I: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let b = t.shape(x.re)[0];
    let both = t.concat(&[x.re, x.im], 0)?;
    let through_r = m_r(t, both)?;
    let through_i = m_i(t, both)?;
    let f_rr = t.slice(through_r, 0, 0, b)?;
    let f_ir = t.slice(through_r, 0, b, b)?;
    let f_ri = t.slice(through_i, 0, 0, b)?;
    let f_ii = t.slice(through_i, 0, b, b)?;
    Ok(ComplexVar {
        re: t.sub(f_rr, f_ii)?,
        im: t.add(f_ri, f_ir)?,
    })
}
