//! Dense loops behind the tape primitives. Everything here is sequential with
//! a fixed accumulation order, so results are bit-reproducible.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (len + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*sw + kx - pw` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize, isize) {
        let off = kx as isize - self.pw as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(self.sw)
        };
        let hi_in = self.w as isize - 1 - off;
        let hi = if hi_in < 0 {
            0
        } else {
            ((hi_in as usize) / self.sw + 1).min(self.ow)
        };
        (lo, hi.max(lo), off)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// `out[b,co,oy,ox] += sum w[co,ci,ky,kx] * x[b,ci,oy*sh+ky-ph,ox*sw+kx-pw]`.
pub fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = (b * g.c_out + co) * out_plane;
            for ci in 0..g.c_in {
                let x_base = (b * g.c_in + ci) * in_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi, off) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let xr = &x[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                            let or = &mut out[o_base + oy * g.ow..o_base + (oy + 1) * g.ow];
                            if g.sw == 1 {
                                let s = (lo as isize + off) as usize;
                                for (o, xv) in or[lo..hi].iter_mut().zip(&xr[s..s + (hi - lo)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    or[ox] += wv * xr[(ox as isize * g.sw as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`] with respect to `x`.
pub fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64], gx: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let x_base = (b * g.c_in + ci) * in_plane;
            for co in 0..g.c_out {
                let o_base = (b * g.c_out + co) * out_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi, off) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let gr = &gout[o_base + oy * g.ow..o_base + (oy + 1) * g.ow];
                            let xr = &mut gx[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                            if g.sw == 1 {
                                let s = (lo as isize + off) as usize;
                                for (xv, o) in xr[s..s + (hi - lo)].iter_mut().zip(&gr[lo..hi]) {
                                    *xv += wv * o;
                                }
                            } else {
                                for ox in lo..hi {
                                    xr[(ox as isize * g.sw as isize + off) as usize] += wv * gr[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`] with respect to `w`.
pub fn conv_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64], gw: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi, off) = g.col_range(kx);
                    let mut acc = 0.0;
                    for b in 0..g.batch {
                        let x_base = (b * g.c_in + ci) * in_plane;
                        let o_base = (b * g.c_out + co) * out_plane;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let xr = &x[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                            let gr = &gout[o_base + oy * g.ow..o_base + (oy + 1) * g.ow];
                            if g.sw == 1 {
                                let s = (lo as isize + off) as usize;
                                acc += gr[lo..hi]
                                    .iter()
                                    .zip(&xr[s..s + (hi - lo)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in lo..hi {
                                    acc += gr[ox] * xr[(ox as isize * g.sw as isize + off) as usize];
                                }
                            }
                        }
                    }
                    gw[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`.
pub fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut gb[p * n..(p + 1) * n];
            for (r, gv) in row.iter_mut().zip(gr) {
                *r += av * gv;
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of the permuted view,
/// where output axis `i` is input axis `perm[i]`.
pub fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut out_i = 0;
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(out_i + j, base + j * inner_stride);
        }
        out_i += inner;
        if out_i >= total {
            break;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
