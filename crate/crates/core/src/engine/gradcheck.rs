//! Central finite-difference checks of tape gradients.

use rand::Rng as _;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::{derive_seed, rng_from, Rng};
use crate::spectral::{StftConfig, StftKernel};

/// Denominator floor for the per-coordinate relative error, so that
/// coordinates with a vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference step for a coordinate currently at `theta`.
pub fn fd_step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

fn scalarize(t: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    if t.value(out).numel() == 1 {
        return t.sum(out);
    }
    let n = t.value(out).numel();
    let w = t.constant(Tensor::new(t.shape(out).to_vec(), weights[..n].to_vec())?);
    t.dot(out, w)
}

/// Compares the tape gradient of `build` against central differences over
/// every coordinate of every input. Non-scalar outputs are reduced with a
/// fixed random weighting.
pub fn check_graph<F>(name: &str, inputs: &[Tensor], seed: u64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = rng_from(seed);
    let weights: Vec<f64> = (0..1 << 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = build(&mut t, &vars)?;
        let loss = scalarize(&mut t, out, &weights)?;
        Ok((t, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v, inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let theta = inputs[i].data()[j];
            let h = fd_step(theta);
            work[i].data_mut()[j] = theta + h;
            let (tp, _, lp) = eval(&work)?;
            work[i].data_mut()[j] = theta - h;
            let (tm, _, lm) = eval(&work)?;
            work[i].data_mut()[j] = theta;
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            worst = worst.max(rel_err(g[j], numeric, REL_FLOOR));
            coords += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        coords,
        max_rel_err: worst,
    })
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape product matches")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}

/// Runs the randomized per-primitive suite plus random composite graphs.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = rng_from(seed);
    let mut out = Vec::new();
    let s = |tag: u64| derive_seed(seed, &[tag]);
    let dims = |rng: &mut Rng| (rng.gen_range(1..4usize), rng.gen_range(2..5usize));

    let (a, b) = dims(&mut rng);
    let x = rand_tensor(&mut rng, &[a, b]);
    let y = rand_tensor(&mut rng, &[a, b]);
    out.push(check_graph("add", &[x.clone(), y.clone()], s(1), |t, v| t.add(v[0], v[1]))?);
    out.push(check_graph("sub", &[x.clone(), y.clone()], s(2), |t, v| t.sub(v[0], v[1]))?);
    out.push(check_graph("mul", &[x.clone(), y.clone()], s(3), |t, v| t.mul(v[0], v[1]))?);
    let den = positive(&mut rng, &[a, b]);
    out.push(check_graph("div", &[x.clone(), den], s(4), |t, v| t.div(v[0], v[1]))?);
    out.push(check_graph("scale", &[x.clone()], s(5), |t, v| t.scale(v[0], -1.7))?);
    out.push(check_graph("tanh", &[x.clone()], s(6), |t, v| t.tanh(v[0]))?);
    let xk = rand_away_from_zero(&mut rng, &[a, b]);
    out.push(check_graph("leaky_relu", &[xk.clone()], s(7), |t, v| t.leaky_relu(v[0], 0.01))?);
    out.push(check_graph("square", &[x.clone()], s(8), |t, v| t.square(v[0]))?);
    let p = positive(&mut rng, &[a, b]);
    out.push(check_graph("sqrt", &[p], s(9), |t, v| t.sqrt(v[0], super::EPS))?);
    out.push(check_graph("abs", &[xk], s(10), |t, v| t.abs(v[0], super::EPS))?);
    out.push(check_graph("sum", &[x.clone()], s(11), |t, v| t.sum(v[0]))?);
    out.push(check_graph("mean", &[x.clone()], s(12), |t, v| t.mean(v[0]))?);
    out.push(check_graph("dot", &[x.clone(), y.clone()], s(13), |t, v| t.dot(v[0], v[1]))?);
    out.push(check_graph("norm", &[x.clone()], s(14), |t, v| t.norm(v[0]))?);
    out.push(check_graph("softmax", &[x.clone()], s(15), |t, v| t.softmax(v[0], 1))?);
    out.push(check_graph("layer_norm", &[x.clone()], s(16), |t, v| t.layer_norm(v[0], 1, 1e-5))?);
    out.push(check_graph("concat", &[x.clone(), y.clone()], s(17), |t, v| t.concat(&[v[0], v[1]], 1))?);
    out.push(check_graph("slice", &[x.clone()], s(18), |t, v| t.slice(v[0], 1, 1, 1))?);
    out.push(check_graph("transpose", &[x.clone()], s(19), |t, v| t.permute(v[0], &[1, 0]))?);
    let row = rand_tensor(&mut rng, &[1, b]);
    out.push(check_graph("broadcast", &[row], s(20), move |t, v| t.broadcast(v[0], &[a, b]))?);

    let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let ma = rand_tensor(&mut rng, &[2, m, k]);
    let mb = rand_tensor(&mut rng, &[2, k, n]);
    let mw = rand_tensor(&mut rng, &[k, n]);
    out.push(check_graph("matmul", &[ma.clone(), mb], s(21), |t, v| t.matmul(v[0], v[1]))?);
    out.push(check_graph("matmul_shared", &[ma, mw], s(22), |t, v| t.matmul(v[0], v[1]))?);

    let cx = rand_tensor(&mut rng, &[2, 2, 5, 4]);
    let cw = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    out.push(check_graph("conv2d", &[cx, cw], s(23), |t, v| t.conv2d(v[0], v[1], (2, 1), (1, 1)))?);
    let tx = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let tw = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    out.push(check_graph("conv_transpose2d", &[tx, tw], s(24), |t, v| {
        t.conv_transpose2d(v[0], v[1], (2, 1), (1, 1), (5, 4))
    })?);

    let cfg = StftConfig {
        window_ms: 4.0,
        hop_ms: 1.0,
        fft_len: None,
        sample_rate_hz: 2000,
    };
    let kernel = StftKernel::new(&cfg)?;
    let sig = rand_tensor(&mut rng, &[2, 20]);
    let kk = kernel.clone();
    out.push(check_graph("stft", &[sig], s(25), move |t, v| t.stft(v[0], &kk))?);
    let frames = 4;
    let spec = rand_tensor(&mut rng, &[1, 2, kernel.n_bins(), frames]);
    let kk = kernel.clone();
    out.push(check_graph("istft", &[spec], s(26), move |t, v| t.istft(v[0], &kk))?);

    for trial in 0..4u64 {
        let len = rng.gen_range(2..12);
        let inputs = vec![rand_tensor(&mut rng, &[len]), rand_tensor(&mut rng, &[len])];
        let depth = rng.gen_range(1..=6);
        let ops: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..7)).collect();
        out.push(check_graph(
            &format!("composite#{trial}"),
            &inputs,
            s(100 + trial),
            move |t, v| {
                let (mut h, other) = (v[0], v[1]);
                for op in &ops {
                    h = match op {
                        0 => t.tanh(h)?,
                        1 => t.mul(h, other)?,
                        2 => t.add(h, other)?,
                        3 => t.softmax(h, 0)?,
                        4 => {
                            let sq = t.square(h)?;
                            t.sqrt(sq, 1.0)?
                        }
                        5 => t.layer_norm(h, 0, 1e-3)?,
                        _ => t.scale(h, 0.5)?,
                    };
                }
                Ok(h)
            },
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_within_tolerance() {
        for r in run_suite(5).unwrap() {
            assert!(r.max_rel_err <= 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 1e-9, REL_FLOOR), 1e-3);
        assert_eq!(rel_err(2.0, 1.0, REL_FLOOR), 0.5);
    }
}
