use super::*;
use crate::engine::gradcheck::{fd_step, rel_err, REL_FLOOR};
use crate::rng::Rng;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn spec_var(t: &mut Tape, rng: &mut Rng, f: usize, frames: usize) -> Var {
    t.constant(Tensor::new(vec![1, 2, f, frames], rand_vec(rng, 2 * f * frames)).unwrap())
}

fn no_tstb() -> ModelConfig {
    ModelConfig {
        n_tstb: 0,
        ..ModelConfig::tiny()
    }
}

#[test]
fn forward_preserves_shape_tiny() {
    let mut rng = rng_from(1);
    let m = DenoiserModel::new(ModelConfig::tiny(), 1).unwrap();
    for (f, frames) in [(17, 6), (33, 9), (5, 2)] {
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let x = spec_var(&mut t, &mut rng, f, frames);
        let y = m.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.shape(y), &[1, 2, f, frames]);
    }
}

#[test]
fn forward_preserves_shape_large_preset() {
    let mut rng = rng_from(2);
    let m = DenoiserModel::new(ModelConfig::paper(), 2).unwrap();
    let mut t = Tape::new();
    let b = m.bind(&mut t, false);
    let x = spec_var(&mut t, &mut rng, 33, 17);
    let y = m.forward(&mut t, &b, x).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 33, 17]);
}

#[test]
fn too_small_for_pyramid() {
    let mut rng = rng_from(3);
    let m = DenoiserModel::new(ModelConfig::tiny(), 1).unwrap();
    let mut t = Tape::new();
    let b = m.bind(&mut t, false);
    let x = spec_var(&mut t, &mut rng, 3, 1);
    assert!(m.forward(&mut t, &b, x).is_err());
}

#[test]
fn zero_model_gives_zero() {
    let mut rng = rng_from(4);
    let m = DenoiserModel::zeros(ModelConfig::tiny()).unwrap();
    let mut t = Tape::new();
    let b = m.bind(&mut t, false);
    let x = spec_var(&mut t, &mut rng, 17, 8);
    let y = m.forward(&mut t, &b, x).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));

    let w = Waveform::new(rand_vec(&mut rng, 3000), 8000).unwrap();
    let out = denoise_waveform(&m, &w, &StftConfig::new(8000)).unwrap();
    assert_eq!(out.len(), w.len());
    assert!(out.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn pass_through_mask_reconstructs_input() {
    let cfg = ModelConfig {
        mask: MaskMode::Unbounded,
        ..ModelConfig::tiny()
    };
    let mut m = DenoiserModel::zeros(cfg).unwrap();
    m.param_mut("proj.bias_re").unwrap().data_mut()[0] = 1.0;
    let mut rng = rng_from(5);
    let w = Waveform::new(rand_vec(&mut rng, 2100), 8000).unwrap();
    let out = denoise_waveform(&m, &w, &StftConfig::new(8000)).unwrap();
    assert_eq!(out.len(), w.len());
    for (a, b) in out.samples().iter().zip(w.samples()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn time_invariant_input_has_shift_free_interior() {
    let m = DenoiserModel::new(no_tstb(), 6).unwrap();
    let f = 9;
    let column: Vec<f64> = (0..2 * f).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let run = |frames: usize| {
        let mut data = vec![0.0; 2 * f * frames];
        for (c, v) in column.iter().enumerate() {
            for t in 0..frames {
                data[c * frames + t] = *v;
            }
        }
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let x = t.constant(Tensor::new(vec![1, 2, f, frames], data).unwrap());
        let y = m.forward(&mut t, &b, x).unwrap();
        (t.data(y).to_vec(), frames)
    };
    // Normalization statistics are global per channel, so the edge frames
    // shift every output by a length-dependent constant; within one run the
    // interior repeats with the total time stride (2 for this config).
    for frames in [16, 32] {
        let (out, ts) = run(frames);
        for c in 0..2 * f {
            for t in 6..ts - 8 {
                let a = out[c * ts + t];
                let b = out[c * ts + t + 2];
                assert!((a - b).abs() < 1e-12, "channel-bin {c}, frame {t}: {a} vs {b}");
            }
        }
    }
    // With the transformer bottleneck both lengths still run.
    let full = DenoiserModel::new(ModelConfig::tiny(), 6).unwrap();
    for frames in [16, 32] {
        let mut t = Tape::new();
        let b = full.bind(&mut t, false);
        let x = t.constant(Tensor::zeros(&[1, 2, f, frames]));
        full.forward(&mut t, &b, x).unwrap();
    }
}

/// Direct complex multiply-accumulate over every kernel tap.
fn brute_complex_conv(
    x: (&[f64], &[f64]),
    w: (&[f64], &[f64]),
    xs: [usize; 4],
    ws: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let [b, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut re = vec![0.0; b * co * oh * ow];
    let mut im = re.clone();
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (xo * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let xi = ((n * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                sr += x.0[xi] * w.0[wi] - x.1[xi] * w.1[wi];
                                si += x.0[xi] * w.1[wi] + x.1[xi] * w.0[wi];
                            }
                        }
                    }
                    let oi = ((n * co + o) * oh + y) * ow + xo;
                    re[oi] = sr;
                    im[oi] = si;
                }
            }
        }
    }
    (re, im)
}

#[test]
fn complex_conv_matches_brute_force() {
    let mut rng = rng_from(7);
    for _ in 0..10 {
        let xs = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(3..8), rng.gen_range(3..8)];
        let ws = [rng.gen_range(1..4), xs[1], 3, 3];
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let n: usize = xs.iter().product();
        let k: usize = ws.iter().product();
        let (xr, xi) = (rand_vec(&mut rng, n), rand_vec(&mut rng, n));
        let (wr, wi) = (rand_vec(&mut rng, k), rand_vec(&mut rng, k));
        let mut t = Tape::new();
        let x = ComplexVar {
            re: t.constant(Tensor::new(xs.to_vec(), xr.clone()).unwrap()),
            im: t.constant(Tensor::new(xs.to_vec(), xi.clone()).unwrap()),
        };
        let w = ComplexVar {
            re: t.constant(Tensor::new(ws.to_vec(), wr.clone()).unwrap()),
            im: t.constant(Tensor::new(ws.to_vec(), wi.clone()).unwrap()),
        };
        let spec = ComplexConvSpec {
            stride,
            padding: (1, 1),
        };
        let y = layers::complex_conv2d(&mut t, x, w, spec).unwrap();
        let (er, ei) = brute_complex_conv((&xr, &xi), (&wr, &wi), xs, ws, stride, (1, 1));
        for (a, b) in t.data(y.re).iter().zip(&er).chain(t.data(y.im).iter().zip(&ei)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn transposed_conv_is_adjoint() {
    let mut rng = rng_from(8);
    for _ in 0..5 {
        let xs = [1, rng.gen_range(1..3), rng.gen_range(4..9), rng.gen_range(4..9)];
        let co = rng.gen_range(1..3);
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let mut t = Tape::new();
        let n: usize = xs.iter().product();
        let x = t.constant(Tensor::new(xs.to_vec(), rand_vec(&mut rng, n)).unwrap());
        let w = t.constant(Tensor::new(vec![co, xs[1], 3, 3], rand_vec(&mut rng, co * xs[1] * 9)).unwrap());
        let y = t.conv2d(x, w, stride, (1, 1)).unwrap();
        let ys = t.shape(y).to_vec();
        let m: usize = ys.iter().product();
        let g = t.constant(Tensor::new(ys, rand_vec(&mut rng, m)).unwrap());
        let back = t.conv_transpose2d(g, w, stride, (1, 1), (xs[2], xs[3])).unwrap();
        let lhs: f64 = t.data(y).iter().zip(t.data(g)).map(|(a, b)| a * b).sum();
        let rhs: f64 = t.data(x).iter().zip(t.data(back)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn ctstm_weight_gradient_matches_differences() {
    let cfg = ModelConfig {
        n_tstb: 2,
        ..ModelConfig::tiny()
    };
    let m = DenoiserModel::new(cfg.clone(), 9).unwrap();
    let mut rng = rng_from(9);
    let x_re = rand_vec(&mut rng, 16 * 3 * 4);
    let x_im = rand_vec(&mut rng, 16 * 3 * 4);
    let target = "tstm_i.b1.time.wv";
    let eval = |model: &DenoiserModel| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let b = model.bind(&mut t, true);
        let x = ComplexVar {
            re: t.constant(Tensor::new(vec![1, 16, 3, 4], x_re.clone()).unwrap()),
            im: t.constant(Tensor::new(vec![1, 16, 3, 4], x_im.clone()).unwrap()),
        };
        let y = model.bottleneck(&mut t, &b, x).unwrap();
        let r2 = t.square(y.re).unwrap();
        let i2 = t.square(y.im).unwrap();
        let s = t.add(r2, i2).unwrap();
        let loss = t.mean(s).unwrap();
        let v = b.vars()[model.index[target]];
        let g = t.backward(loss).unwrap().wrt(v, t.value(v).numel());
        (t.scalar(loss), g)
    };
    let (_, g) = eval(&m);
    let mut worst: f64 = 0.0;
    for j in 0..g.len() {
        let mut p = m.clone();
        let theta = p.param(target).unwrap().data()[j];
        let h = fd_step(theta);
        p.param_mut(target).unwrap().data_mut()[j] = theta + h;
        let (lp, _) = eval(&p);
        p.param_mut(target).unwrap().data_mut()[j] = theta - h;
        let (lm, _) = eval(&p);
        worst = worst.max(rel_err(g[j], (lp - lm) / (2.0 * h), REL_FLOOR));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = DenoiserModel::new(ModelConfig::tiny(), 10).unwrap();
    let a = dir.path().join("a.ontm");
    let b = dir.path().join("b.ontm");
    save_model(&m, &a).unwrap();
    let back = load_model(&a).unwrap();
    assert_eq!(back, m);
    save_model(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn tampered_shape_names_tensor() {
    let m = DenoiserModel::new(ModelConfig::tiny(), 11).unwrap();
    let mut bytes = io::to_bytes(&m);
    // First tensor record follows the header; bump its first extent.
    let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rec = 12 + text_len + 4;
    let name_len = u32::from_le_bytes(bytes[rec..rec + 4].try_into().unwrap()) as usize;
    let ext = rec + 4 + name_len + 4;
    bytes[ext] = bytes[ext].wrapping_add(1);
    let err = io::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("enc0.w_re"), "{err}");

    let mut bad = io::to_bytes(&m);
    bad[4] = 9;
    assert!(io::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    let full = io::to_bytes(&m);
    assert!(io::from_bytes(&full[..full.len() - 3]).is_err());
}

#[test]
fn parameters_are_single_precision() {
    let m = DenoiserModel::new(ModelConfig::tiny(), 12).unwrap();
    for p in m.params() {
        assert!(p.data().iter().all(|&v| f64::from(v as f32) == v));
    }
}

#[test]
fn config_text_round_trip() {
    for cfg in [ModelConfig::tiny(), ModelConfig::paper()] {
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
    let bad = ModelConfig {
        tstb: TstbSpec {
            model_dim: 16,
            heads: 3,
            ff_dim: 8,
        },
        ..ModelConfig::tiny()
    };
    assert!(bad.validate().is_err());
}
