//! Complex U-Net with a two-stage transformer bottleneck that estimates a
//! complex ratio mask on a one-sided spectrogram.
//!
//! Encoder layer `i` is complex conv (stride `strides[i]`) → per-channel
//! norm → leaky ReLU. The bottleneck runs the complex transformer module.
//! Decoder layer `j` concatenates its input with the mirrored encoder
//! output and upsamples with a transposed complex conv back to that
//! encoder's input size. The last decoder layer emits the raw mask unless
//! its width differs from one, in which case a 1×1 complex projection
//! follows.

mod io;
pub mod layers;
pub mod tstm;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

pub use io::{load_model, save_model};
pub use layers::{ComplexConvSpec, ComplexVar, MaskMode};
pub use tstm::TstbSpec;

use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::signal_io::Waveform;
use crate::spectral::{StftConfig, StftKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TstmKind {
    /// Two real stacks coupled as a complex multiplication.
    Complex,
    /// One real stack applied to the real and imaginary parts independently.
    Real,
}

impl std::str::FromStr for TstmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complex" => Ok(Self::Complex),
            "real" => Ok(Self::Real),
            _ => Err(Error::Config(format!("unknown tstm kind '{s}' (complex|real)"))),
        }
    }
}

impl std::fmt::Display for TstmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Complex => "complex",
            Self::Real => "real",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    /// Encoder widths followed by decoder widths.
    pub channels: Vec<usize>,
    /// Encoder strides as `(freq, time)`; the decoder mirrors them.
    pub strides: Vec<(usize, usize)>,
    pub kernel: (usize, usize),
    pub n_tstb: usize,
    pub tstb: TstbSpec,
    pub mask: MaskMode,
    pub tstm: TstmKind,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            channels: vec![8, 16, 16, 8],
            strides: vec![(2, 2), (2, 1)],
            kernel: (3, 3),
            n_tstb: 1,
            tstb: TstbSpec {
                model_dim: 16,
                heads: 2,
                ff_dim: 32,
            },
            mask: MaskMode::Bounded,
            tstm: TstmKind::Complex,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            channels: vec![45, 90, 90, 90, 90, 90, 90, 90, 45, 1],
            strides: vec![(2, 2), (2, 2), (2, 2), (2, 2), (2, 1)],
            kernel: (3, 3),
            n_tstb: 6,
            tstb: TstbSpec {
                model_dim: 90,
                heads: 6,
                ff_dim: 180,
            },
            mask: MaskMode::Bounded,
            tstm: TstmKind::Complex,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (tiny|paper)"))),
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.len() % 2 != 0 {
            return bad(format!("channel list {:?} must have even, non-zero length", self.channels));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.strides.len() != self.depth() {
            return bad(format!(
                "{} strides given for {} encoder layers",
                self.strides.len(),
                self.depth()
            ));
        }
        if self.strides.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("strides must be positive".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return bad(format!("kernel {:?} must have odd positive extents", self.kernel));
        }
        self.tstb.validate()?;
        if self.n_tstb > 0 && self.tstb.model_dim != self.channels[self.depth() - 1] {
            return bad(format!(
                "model_dim {} must equal the bottleneck width {}",
                self.tstb.model_dim,
                self.channels[self.depth() - 1]
            ));
        }
        Ok(())
    }

    fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    /// Minimum `(bins, frames)` accepted by the stride pyramid.
    pub fn min_input(&self) -> (usize, usize) {
        self.strides
            .iter()
            .fold((1, 1), |(f, t), &(sf, st)| (f * sf, t * st))
    }

    /// Whether a 1×1 projection maps the last decoder output to one channel.
    fn needs_projection(&self) -> bool {
        *self.channels.last().expect("validated") != 1
    }

    /// Every parameter in canonical order with its shape and initial bound.
    fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let l = self.depth();
        let (kh, kw) = self.kernel;
        let conv = |out: &mut Vec<ParamSpec>, name: String, shape: [usize; 4], fan: (usize, usize)| {
            let bound = (3.0 / (fan.0 + fan.1) as f64).sqrt();
            for part in ["re", "im"] {
                out.push(ParamSpec::uniform(format!("{name}.w_{part}"), shape.to_vec(), bound));
            }
        };
        let norm = |out: &mut Vec<ParamSpec>, name: String, c: usize| {
            for part in ["re", "im"] {
                out.push(ParamSpec::fill(format!("{name}.scale_{part}"), vec![c], 1.0));
                out.push(ParamSpec::fill(format!("{name}.offset_{part}"), vec![c], 0.0));
            }
        };
        let mut c_in = 1;
        for i in 0..l {
            let c = self.channels[i];
            conv(&mut out, format!("enc{i}"), [c, c_in, kh, kw], (c_in * kh * kw, c * kh * kw));
            norm(&mut out, format!("enc{i}"), c);
            c_in = c;
        }
        let stacks: &[&str] = match self.tstm {
            TstmKind::Complex => &["tstm_r", "tstm_i"],
            TstmKind::Real => &["tstm_r"],
        };
        for s in stacks {
            for b in 0..self.n_tstb {
                for stage in ["freq", "time"] {
                    for (name, shape) in self.tstb.layer_params() {
                        let full = format!("{s}.b{b}.{stage}.{name}");
                        let spec = match name {
                            "ln1_g" | "ln2_g" => ParamSpec::fill(full, shape, 1.0),
                            "ln1_b" | "ln2_b" => ParamSpec::fill(full, shape, 0.0),
                            _ => {
                                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                                ParamSpec::uniform(full, shape, bound)
                            }
                        };
                        out.push(spec);
                    }
                }
            }
        }
        let mut prev = self.channels[l - 1];
        for j in 0..l {
            let skip = self.channels[l - 1 - j];
            let c = self.channels[l + j];
            let ci = prev + skip;
            conv(&mut out, format!("dec{j}"), [ci, c, kh, kw], (ci * kh * kw, c * kh * kw));
            let last = j == l - 1;
            if !last || self.needs_projection() {
                norm(&mut out, format!("dec{j}"), c);
            } else {
                out.push(ParamSpec::fill(format!("dec{j}.bias_re"), vec![1], 0.0));
                out.push(ParamSpec::fill(format!("dec{j}.bias_im"), vec![1], 0.0));
            }
            prev = c;
        }
        if self.needs_projection() {
            conv(&mut out, "proj".into(), [1, prev, 1, 1], (prev, 1));
            out.push(ParamSpec::fill("proj.bias_re".into(), vec![1], 0.0));
            out.push(ParamSpec::fill("proj.bias_im".into(), vec![1], 0.0));
        }
        out
    }

    /// Canonical `key=value` text used in model files and config echoes.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let strides = self
            .strides
            .iter()
            .map(|(a, b)| format!("{a}x{b}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "preset={}\nchannels={}\nstrides={}\nkernel={}x{}\nn_tstb={}\nmodel_dim={}\nheads={}\nff_dim={}\nmask={}\ntstm={}\n",
            self.preset,
            list(&self.channels),
            strides,
            self.kernel.0,
            self.kernel.1,
            self.n_tstb,
            self.tstb.model_dim,
            self.tstb.heads,
            self.tstb.ff_dim,
            self.mask,
            self.tstm
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed config line '{line}'")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("config block lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("'{k}' is not an integer")))
        };
        let pair = |s: &str| -> Result<(usize, usize)> {
            let (a, b) = s
                .split_once('x')
                .ok_or_else(|| Error::Format(format!("'{s}' is not of the form AxB")))?;
            let p = |v: &str| v.parse().map_err(|_| Error::Format(format!("bad extent in '{s}'")));
            Ok((p(a)?, p(b)?))
        };
        let channels = get("channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad channel width '{v}'"))))
            .collect::<Result<Vec<usize>>>()?;
        let strides = get("strides")?.split(',').map(pair).collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            preset: get("preset")?.to_string(),
            channels,
            strides,
            kernel: pair(get("kernel")?)?,
            n_tstb: num("n_tstb")?,
            tstb: TstbSpec {
                model_dim: num("model_dim")?,
                heads: num("heads")?,
                ff_dim: num("ff_dim")?,
            },
            mask: get("mask")?.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
            tstm: get("tstm")?.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Fill(f64),
}

impl ParamSpec {
    fn uniform(name: String, shape: Vec<usize>, bound: f64) -> Self {
        Self {
            name,
            shape,
            init: Init::Uniform(bound),
        }
    }

    fn fill(name: String, shape: Vec<usize>, v: f64) -> Self {
        Self {
            name,
            shape,
            init: Init::Fill(v),
        }
    }
}

/// Rounds to the nearest `f32`, the storage precision of parameters.
pub fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = f64::from(*x as f32);
    }
}

/// Architecture plus every parameter tensor, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl DenoiserModel {
    /// Randomly initialised model; values are rounded to `f32`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for spec in layout {
            let n: usize = spec.shape.iter().product();
            let mut data: Vec<f64> = match spec.init {
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
                Init::Fill(v) => vec![v; n],
            };
            round_f32(&mut data);
            names.push(spec.name);
            params.push(Tensor::new(spec.shape, data)?);
        }
        Ok(Self::assemble(config, names, params))
    }

    /// Every parameter zero, including normalisation scales.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    fn assemble(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            index,
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.layout();
        if named.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (spec, (name, t)) in expected.into_iter().zip(named) {
            if spec.name != name {
                return Err(Error::Format(format!(
                    "tensor '{name}' found where '{}' was expected",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, config requires {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self::assemble(config, names, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Places the parameters on `tape`, trainable or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundParams { vars }
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn cvar(&self, bound: &BoundParams, prefix: &str, what: &str) -> ComplexVar {
        ComplexVar {
            re: self.var(bound, &format!("{prefix}.{what}_re")),
            im: self.var(bound, &format!("{prefix}.{what}_im")),
        }
    }

    fn norm_act(&self, t: &mut Tape, bound: &BoundParams, x: ComplexVar, prefix: &str) -> Result<ComplexVar> {
        let n = layers::complex_norm(
            t,
            x,
            self.cvar(bound, prefix, "scale"),
            self.cvar(bound, prefix, "offset"),
        )?;
        layers::complex_leaky_relu(t, n)
    }

    fn add_cbias(&self, t: &mut Tape, bound: &BoundParams, x: ComplexVar, prefix: &str) -> Result<ComplexVar> {
        let b = self.cvar(bound, prefix, "bias");
        Ok(ComplexVar {
            re: t.add_bias(x.re, b.re, 1)?,
            im: t.add_bias(x.im, b.im, 1)?,
        })
    }

    fn bottleneck(&self, t: &mut Tape, bound: &BoundParams, x: ComplexVar) -> Result<ComplexVar> {
        let cfg = &self.config;
        if cfg.n_tstb == 0 {
            return Ok(x);
        }
        let to_seq = |t: &mut Tape, v: Var| t.permute(v, &[0, 2, 3, 1]);
        let x = ComplexVar {
            re: to_seq(t, x.re)?,
            im: to_seq(t, x.im)?,
        };
        let p = |n: &str| self.var(bound, n);
        let stack = |name: &'static str| {
            let p = &p;
            move |t: &mut Tape, v: Var| tstm::tstm_forward(t, v, cfg.n_tstb, &cfg.tstb, p, name)
        };
        let y = match cfg.tstm {
            TstmKind::Complex => tstm::ctstm(t, x, stack("tstm_r"), stack("tstm_i"))?,
            TstmKind::Real => {
                let m = stack("tstm_r");
                let both = t.concat(&[x.re, x.im], 0)?;
                let out = m(t, both)?;
                let b = t.shape(x.re)[0];
                ComplexVar {
                    re: t.slice(out, 0, 0, b)?,
                    im: t.slice(out, 0, b, b)?,
                }
            }
        };
        let back = |t: &mut Tape, v: Var| t.permute(v, &[0, 3, 1, 2]);
        Ok(ComplexVar {
            re: back(t, y.re)?,
            im: back(t, y.im)?,
        })
    }

    /// Masked estimate for a spectrogram batch `[B, 2, F, T]` (real, imaginary).
    pub fn forward(&self, t: &mut Tape, bound: &BoundParams, spec: Var) -> Result<Var> {
        let shape = t.shape(spec).to_vec();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::shape("forward", format!("{shape:?}: expected [B, 2, F, T]")));
        }
        let (min_f, min_t) = self.config.min_input();
        if shape[2] < min_f || shape[3] < min_t {
            return Err(Error::invalid(format!(
                "spectrogram of {}x{} is smaller than the stride pyramid needs ({min_f}x{min_t})",
                shape[2], shape[3]
            )));
        }
        let input = ComplexVar {
            re: t.slice(spec, 1, 0, 1)?,
            im: t.slice(spec, 1, 1, 1)?,
        };
        let cfg = &self.config;
        let l = cfg.depth();
        let pad = cfg.padding();
        let mut skips = Vec::with_capacity(l);
        let mut sizes = Vec::with_capacity(l);
        let mut h = input;
        for i in 0..l {
            let s = t.shape(h.re);
            sizes.push((s[2], s[3]));
            let name = format!("enc{i}");
            let conv_spec = ComplexConvSpec {
                stride: cfg.strides[i],
                padding: pad,
            };
            let y = layers::complex_conv2d(t, h, self.cvar(bound, &name, "w"), conv_spec)?;
            h = self.norm_act(t, bound, y, &name)?;
            skips.push(h);
        }
        h = self.bottleneck(t, bound, h)?;
        for j in 0..l {
            let enc = l - 1 - j;
            let skip = skips[enc];
            let cat = ComplexVar {
                re: t.concat(&[h.re, skip.re], 1)?,
                im: t.concat(&[h.im, skip.im], 1)?,
            };
            let name = format!("dec{j}");
            let conv_spec = ComplexConvSpec {
                stride: cfg.strides[enc],
                padding: pad,
            };
            let y = layers::complex_conv_transpose2d(
                t,
                cat,
                self.cvar(bound, &name, "w"),
                conv_spec,
                sizes[enc],
            )?;
            h = if j + 1 < l || cfg.needs_projection() {
                self.norm_act(t, bound, y, &name)?
            } else {
                self.add_cbias(t, bound, y, &name)?
            };
        }
        if cfg.needs_projection() {
            let one = ComplexConvSpec {
                stride: (1, 1),
                padding: (0, 0),
            };
            let y = layers::complex_conv2d(t, h, self.cvar(bound, "proj", "w"), one)?;
            h = self.add_cbias(t, bound, y, "proj")?;
        }
        let out = layers::apply_mask(t, input, h, cfg.mask)?;
        t.concat(&[out.re, out.im], 1)
    }

    /// Waveform batch `[B, N]` in, denoised batch `[B, N]` out: the input is
    /// zero-padded to whole frames, transformed, masked, inverted and trimmed.
    pub fn denoise(
        &self,
        t: &mut Tape,
        bound: &BoundParams,
        kernel: &Arc<StftKernel>,
        x: Var,
    ) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("denoise", format!("{shape:?}: expected [B, N]")));
        }
        let (b, n) = (shape[0], shape[1]);
        let padded = kernel.config().padded_len(n);
        let xp = if padded > n {
            let z = t.constant(Tensor::zeros(&[b, padded - n]));
            t.concat(&[x, z], 1)?
        } else {
            x
        };
        let spec = t.stft(xp, kernel)?;
        let est = self.forward(t, bound, spec)?;
        let y = t.istft(est, kernel)?;
        t.slice(y, 1, 0, n)
    }
}

/// Inference on a single waveform; the output has the input's length.
pub fn denoise_waveform(model: &DenoiserModel, x: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
    let cfg = cfg.with_sample_rate(x.sample_rate_hz());
    let kernel = StftKernel::new(&cfg)?;
    if x.len() < kernel.window_len() {
        return Err(Error::invalid(format!(
            "clip of {} samples is shorter than one {}-sample window",
            x.len(),
            kernel.window_len()
        )));
    }
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let xv = t.constant(Tensor::new(vec![1, x.len()], x.samples().to_vec())?);
    let y = model.denoise(&mut t, &bound, &kernel, xv)?;
    x.with_samples(t.data(y).to_vec())
}

#[cfg(test)]
mod tests;
