//! Complex-valued building blocks expressed on the tape.

use crate::engine::{Tape, Var, EPS};
use crate::error::{Error, Result};

/// Real and imaginary planes of a `[batch, channel, freq, time]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

fn check_pair(t: &Tape, op: &'static str, x: ComplexVar) -> Result<()> {
    if t.shape(x.re) != t.shape(x.im) {
        return Err(Error::shape(
            op,
            format!("re {:?} vs im {:?}", t.shape(x.re), t.shape(x.im)),
        ));
    }
    Ok(())
}

/// `(x_re * w_re - x_im * w_im) + j (x_re * w_im + x_im * w_re)` with `*` a
/// real 2-D convolution.
pub fn complex_conv2d(
    t: &mut Tape,
    x: ComplexVar,
    w: ComplexVar,
    spec: ComplexConvSpec,
) -> Result<ComplexVar> {
    check_pair(t, "complex_conv2d", x)?;
    check_pair(t, "complex_conv2d", w)?;
    let rr = t.conv2d(x.re, w.re, spec.stride, spec.padding)?;
    let ii = t.conv2d(x.im, w.im, spec.stride, spec.padding)?;
    let ri = t.conv2d(x.re, w.im, spec.stride, spec.padding)?;
    let ir = t.conv2d(x.im, w.re, spec.stride, spec.padding)?;
    Ok(ComplexVar {
        re: t.sub(rr, ii)?,
        im: t.add(ri, ir)?,
    })
}

/// Transposed counterpart of [`complex_conv2d`] with the same combination
/// rule; `w` is `[c_in, c_out, kh, kw]`.
pub fn complex_conv_transpose2d(
    t: &mut Tape,
    x: ComplexVar,
    w: ComplexVar,
    spec: ComplexConvSpec,
    out_size: (usize, usize),
) -> Result<ComplexVar> {
    check_pair(t, "complex_conv_transpose2d", x)?;
    check_pair(t, "complex_conv_transpose2d", w)?;
    let (s, p) = (spec.stride, spec.padding);
    let rr = t.conv_transpose2d(x.re, w.re, s, p, out_size)?;
    let ii = t.conv_transpose2d(x.im, w.im, s, p, out_size)?;
    let ri = t.conv_transpose2d(x.re, w.im, s, p, out_size)?;
    let ir = t.conv_transpose2d(x.im, w.re, s, p, out_size)?;
    Ok(ComplexVar {
        re: t.sub(rr, ii)?,
        im: t.add(ri, ir)?,
    })
}

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

pub fn complex_leaky_relu(t: &mut Tape, x: ComplexVar) -> Result<ComplexVar> {
    Ok(ComplexVar {
        re: t.leaky_relu(x.re, LEAKY_SLOPE)?,
        im: t.leaky_relu(x.im, LEAKY_SLOPE)?,
    })
}

/// Per-channel normalisation over `(freq, time)` with learned scale/offset.
pub fn channel_norm(t: &mut Tape, x: Var, scale: Var, offset: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("channel_norm", format!("{shape:?}: expected rank 4")));
    }
    let flat = t.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
    let n = t.layer_norm(flat, 2, NORM_EPS)?;
    let n = t.reshape(n, &shape)?;
    let n = t.mul_channel(n, scale, 1)?;
    t.add_bias(n, offset, 1)
}

/// Normalisation applied separately to the real and imaginary planes.
pub fn complex_norm(
    t: &mut Tape,
    x: ComplexVar,
    scale: ComplexVar,
    offset: ComplexVar,
) -> Result<ComplexVar> {
    Ok(ComplexVar {
        re: channel_norm(t, x.re, scale.re, offset.re)?,
        im: channel_norm(t, x.im, scale.im, offset.im)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// `tanh(|o|) * o / |o|`: magnitude below one, phase of `o`.
    Bounded,
    /// The raw network output.
    Unbounded,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bounded" => Ok(Self::Bounded),
            "unbounded" => Ok(Self::Unbounded),
            _ => Err(Error::Config(format!("unknown mask mode '{s}' (bounded|unbounded)"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bounded => "bounded",
            Self::Unbounded => "unbounded",
        })
    }
}

/// Builds the mask from the raw output `o` and multiplies it into `input`.
pub fn apply_mask(
    t: &mut Tape,
    input: ComplexVar,
    o: ComplexVar,
    mode: MaskMode,
) -> Result<ComplexVar> {
    check_pair(t, "apply_mask", input)?;
    check_pair(t, "apply_mask", o)?;
    if t.shape(input.re) != t.shape(o.re) {
        return Err(Error::shape(
            "apply_mask",
            format!("input {:?} vs mask {:?}", t.shape(input.re), t.shape(o.re)),
        ));
    }
    let m = match mode {
        MaskMode::Unbounded => o,
        MaskMode::Bounded => {
            let r2 = t.square(o.re)?;
            let i2 = t.square(o.im)?;
            let mag2 = t.add(r2, i2)?;
            let mag = t.sqrt(mag2, EPS)?;
            let th = t.tanh(mag)?;
            let factor = t.div(th, mag)?;
            ComplexVar {
                re: t.mul(o.re, factor)?,
                im: t.mul(o.im, factor)?,
            }
        }
    };
    complex_mul(t, m, input)
}

pub fn complex_mul(t: &mut Tape, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
    let rr = t.mul(a.re, b.re)?;
    let ii = t.mul(a.im, b.im)?;
    let ri = t.mul(a.re, b.im)?;
    let ir = t.mul(a.im, b.re)?;
    Ok(ComplexVar {
        re: t.sub(rr, ii)?,
        im: t.add(ri, ir)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;
    use rand::Rng;

    fn cv(t: &mut Tape, shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> ComplexVar {
        ComplexVar {
            re: t.constant(Tensor::new(shape.to_vec(), re).unwrap()),
            im: t.constant(Tensor::new(shape.to_vec(), im).unwrap()),
        }
    }

    const ONE: ComplexConvSpec = ComplexConvSpec {
        stride: (1, 1),
        padding: (0, 0),
    };

    #[test]
    fn one_by_one_is_complex_product() {
        let mut t = Tape::new();
        let x = cv(&mut t, &[1, 1, 1, 1], vec![1.0], vec![2.0]);
        let w = cv(&mut t, &[1, 1, 1, 1], vec![3.0], vec![4.0]);
        let y = complex_conv2d(&mut t, x, w, ONE).unwrap();
        assert_eq!((t.data(y.re)[0], t.data(y.im)[0]), (-5.0, 10.0));
        let y = complex_conv_transpose2d(&mut t, x, w, ONE, (1, 1)).unwrap();
        assert_eq!((t.data(y.re)[0], t.data(y.im)[0]), (-5.0, 10.0));
    }

    #[test]
    fn real_specialisation() {
        let mut rng = crate::rng::rng_from(3);
        let xr: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wr: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let x = cv(&mut t, &[1, 2, 4, 5], xr.clone(), vec![0.0; 40]);
        let w = cv(&mut t, &[3, 2, 3, 3], wr.clone(), vec![0.0; 54]);
        let spec = ComplexConvSpec {
            stride: (2, 1),
            padding: (1, 1),
        };
        let y = complex_conv2d(&mut t, x, w, spec).unwrap();
        let real = t.conv2d(x.re, w.re, (2, 1), (1, 1)).unwrap();
        assert_eq!(t.data(y.re), t.data(real));
        assert!(t.data(y.im).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let mut t = Tape::new();
        let x = cv(&mut t, &[1, 2, 2, 3], vec![0.0; 12], vec![0.0; 12]);
        let w = cv(&mut t, &[2, 1, 3, 3], vec![0.5; 18], vec![-0.25; 18]);
        let spec = ComplexConvSpec {
            stride: (2, 1),
            padding: (1, 1),
        };
        let y = complex_conv_transpose2d(&mut t, x, w, spec, (4, 3)).unwrap();
        assert_eq!(t.shape(y.re), &[1, 1, 4, 3]);
        assert!(t.data(y.re).iter().chain(t.data(y.im)).all(|&v| v == 0.0));
    }

    #[test]
    fn activation_rule() {
        let mut t = Tape::new();
        let x = cv(&mut t, &[1, 1, 1, 2], vec![-1.0, 3.0], vec![2.0, 0.0]);
        let y = complex_leaky_relu(&mut t, x).unwrap();
        assert_eq!(t.data(y.re), &[-0.01, 3.0]);
        assert_eq!(t.data(y.im), &[2.0, 0.0]);
    }

    #[test]
    fn flat_channel_normalises_to_offset() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2, 2], vec![3.0; 8]).unwrap());
        let s = t.constant(Tensor::vector(vec![2.0, 2.0]));
        let o = t.constant(Tensor::vector(vec![0.5, -1.0]));
        let y = channel_norm(&mut t, x, s, o).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn bounded_mask_limits_and_zero() {
        let mut t = Tape::new();
        let input = cv(&mut t, &[1, 1, 1, 3], vec![1.0, 0.3, -2.0], vec![0.5, -1.0, 0.1]);
        let o = cv(&mut t, &[1, 1, 1, 3], vec![0.0, 1e6, 3.0], vec![0.0, 1e6, -4.0]);
        let y = apply_mask(&mut t, input, o, MaskMode::Bounded).unwrap();
        assert_eq!((t.data(y.re)[0], t.data(y.im)[0]), (0.0, 0.0));
        // Huge mask along 1+j: unit magnitude, phase pi/4.
        let (yr, yi) = (t.data(y.re)[1], t.data(y.im)[1]);
        let (xr, xi) = (0.3f64, -1.0f64);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((yr - (s * xr - s * xi)).abs() < 1e-12);
        assert!((yi - (s * xi + s * xr)).abs() < 1e-12);
        for i in 0..3 {
            let out = t.data(y.re)[i].hypot(t.data(y.im)[i]);
            let inp = t.data(input.re)[i].hypot(t.data(input.im)[i]);
            assert!(out <= inp + 1e-15);
        }
    }
}
