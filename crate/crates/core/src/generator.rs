//! A small style-based synthesis network.
//!
//! Resolution `R` has `log2(R) − 1` levels (4×4 up to R×R). Level 0 is the
//! constant input followed by one styled 3×3 convolution and a toRGB layer;
//! every further level upsamples, applies two styled convolutions and a toRGB
//! layer whose output is added to the upsampled RGB skip. Style indices
//! follow the usual sharing: level 0 uses codes 0 (conv) and 1 (toRGB);
//! level `k ≥ 1` uses `2k − 1` (upsampling conv), `2k` (conv) and `2k + 1`
//! (toRGB). That yields `2·log2(R) − 2` codes.
//!
//! Styled convolutions modulate input channels by `s = A(w)` and demodulate
//! output channels by `1 / sqrt(Σ W² s² + 1e-8)`. Noise inputs are omitted.
//! The RGB sum passes through `tanh`, so pixels stay in `(−1, 1)`.
//!
//! The constant input has `D` channels so an externally predicted `(4, 4, D)`
//! tensor can replace it.

use std::path::Path;
use std::sync::Arc;

use latentswap_autograd::{Conv2dSpec, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::latent::{code_count, merge_codes, CONSTANT_SIDE, LOW_CODE_COUNT};
use crate::params::{Bound, Initializer, ParamSet, Scope};
use crate::{Error, FaceImage, Result};

const DEMOD_EPS: f64 = 1e-8;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub code_dim: usize,
    /// Feature channels per level, 4×4 first. `channels[0]` must equal
    /// `code_dim`.
    pub channels: Vec<usize>,
    pub mapping_layers: usize,
}

impl GeneratorConfig {
    /// Desk-scale defaults: channels shrink by half every other level, never
    /// below 8.
    pub fn toy(resolution: usize, code_dim: usize) -> Result<Self> {
        let levels = level_count(resolution)?;
        let channels = (0..levels)
            .map(|k| if k == 0 { code_dim } else { (code_dim >> (k / 2)).max(8) })
            .collect();
        Ok(Self {
            resolution,
            code_dim,
            channels,
            mapping_layers: 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let levels = level_count(self.resolution)?;
        if self.channels.len() != levels {
            return Err(Error::dim(format!(
                "{} channel entries for {levels} levels at {}px",
                self.channels.len(),
                self.resolution
            )));
        }
        if self.channels[0] != self.code_dim {
            return Err(Error::dim(format!(
                "constant input has {} channels but codes are {}-wide",
                self.channels[0], self.code_dim
            )));
        }
        if self.channels.contains(&0) || self.code_dim == 0 {
            return Err(Error::dim("zero-width layer"));
        }
        Ok(())
    }

    pub fn code_count(&self) -> usize {
        2 * level_count(self.resolution).unwrap_or(1)
    }
}

fn level_count(resolution: usize) -> Result<usize> {
    code_count(resolution)?;
    Ok(resolution.trailing_zeros() as usize - 1)
}

/// Frozen generator weights plus their capability flag.
#[derive(Clone, Debug)]
pub struct GeneratorHandle {
    config: GeneratorConfig,
    params: Arc<ParamSet>,
    accepts_external_constant: bool,
}

impl GeneratorHandle {
    /// Seeded random weights.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self {
            config,
            params: Arc::new(params),
            accepts_external_constant: true,
        })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamSet, accepts_external_constant: bool) -> Result<Self> {
        config.validate()?;
        init_params(&config, 0)
            .check_layout(&params)
            .map_err(Error::Dimension)?;
        params.check_finite()?;
        Ok(Self {
            config,
            params: Arc::new(params),
            accepts_external_constant,
        })
    }

    /// Same weights, different capability flag.
    pub fn with_external_constant(mut self, accepts: bool) -> Self {
        self.accepts_external_constant = accepts;
        self
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim
    }

    pub fn code_count(&self) -> usize {
        self.config.code_count()
    }

    pub fn accepts_external_constant(&self) -> bool {
        self.accepts_external_constant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Learned `(4, 4, D)` constant input.
    pub fn learned_constant(&self) -> Tensor {
        let c = self.params.expect("const");
        let d = self.config.code_dim;
        let mut out = vec![0.0; c.len()];
        for ch in 0..d {
            for p in 0..CONSTANT_SIDE * CONSTANT_SIDE {
                out[p * d + ch] = c.data()[ch * CONSTANT_SIDE * CONSTANT_SIDE + p];
            }
        }
        Tensor::new([CONSTANT_SIDE, CONSTANT_SIDE, d], out)
    }

    /// Mapping network `z -> w`.
    pub fn map_graph<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Var<'t> {
        let inv = z.square().mean().add_scalar(1e-8).sqrt().recip();
        let mut w = z.mul_scalar_var(&inv);
        for i in 0..self.config.mapping_layers {
            w = bound.scope(&format!("mapping.fc{i}")).linear(w).leaky_relu(LEAK);
        }
        w
    }

    /// Synthesis from `(N_total, D)` codes and an optional `(4, 4, D)` constant.
    pub fn synthesis_graph<'t>(
        &self,
        bound: &Bound<'t>,
        constant: Option<Var<'t>>,
        codes: Var<'t>,
    ) -> Var<'t> {
        let x0 = match constant {
            Some(c) => c.permute(&[2, 0, 1]),
            None => bound.get("const"),
        };
        let levels = self.config.channels.len();
        let mut x = styled_conv(&bound.scope("level0.conv"), x0, codes.row(0), true);
        let mut rgb = to_rgb(&bound.scope("level0.torgb"), x, codes.row(1));
        for k in 1..levels {
            let s = bound.scope(&format!("level{k}"));
            x = styled_conv(&s.sub("up"), x.upsample2x(), codes.row(2 * k - 1), true);
            x = styled_conv(&s.sub("conv"), x, codes.row(2 * k), true);
            rgb = rgb.upsample2x().add(&to_rgb(&s.sub("torgb"), x, codes.row(2 * k + 1)));
        }
        rgb.tanh()
    }

    fn check_codes(&self, low: &Tensor, high: &Tensor) -> Result<Tensor> {
        let d = self.config.code_dim;
        let n_high = self.code_count() - LOW_CODE_COUNT;
        if low.shape() != [LOW_CODE_COUNT, d] {
            return Err(Error::dim(format!(
                "low codes {:?}, generator expects [{LOW_CODE_COUNT}, {d}]",
                low.shape()
            )));
        }
        if high.shape() != [n_high, d] {
            return Err(Error::dim(format!(
                "high codes {:?}, generator at {}px expects [{n_high}, {d}]",
                high.shape(),
                self.config.resolution
            )));
        }
        merge_codes(low, high)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let channels: Vec<String> = self.config.channels.iter().map(ToString::to_string).collect();
        Checkpoint::new("generator", (*self.params).clone())
            .with("resolution", self.config.resolution)
            .with("code_dim", self.config.code_dim)
            .with("channels", channels.join(","))
            .with("mapping_layers", self.config.mapping_layers)
            .with("accepts_external_constant", self.accepts_external_constant)
            .save(dir)
    }
}

fn init_params(cfg: &GeneratorConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let mut init = Initializer::new(&mut p, seed);
    let d = cfg.code_dim;
    for i in 0..cfg.mapping_layers {
        init.linear(&format!("mapping.fc{i}"), d, d, (2.0 / d as f64).sqrt(), 0.0);
    }
    init.normal("const", &[d, CONSTANT_SIDE, CONSTANT_SIDE], 1.0);
    let styled = |init: &mut Initializer, name: &str, inp: usize, out: usize| {
        init.linear(&format!("{name}.affine"), inp, d, 1.0 / (d as f64).sqrt(), 1.0);
        init.normal(&format!("{name}.weight"), &[out, inp, 3, 3], 1.0);
        init.constant(&format!("{name}.bias"), &[out], 0.0);
    };
    let rgb = |init: &mut Initializer, name: &str, inp: usize| {
        init.linear(&format!("{name}.affine"), inp, d, 1.0 / (d as f64).sqrt(), 1.0);
        init.normal(&format!("{name}.weight"), &[3, inp, 1, 1], 0.5 / (inp as f64).sqrt());
        init.constant(&format!("{name}.bias"), &[3], 0.0);
    };
    styled(&mut init, "level0.conv", d, cfg.channels[0]);
    rgb(&mut init, "level0.torgb", cfg.channels[0]);
    for k in 1..cfg.channels.len() {
        let (cin, cout) = (cfg.channels[k - 1], cfg.channels[k]);
        styled(&mut init, &format!("level{k}.up"), cin, cout);
        styled(&mut init, &format!("level{k}.conv"), cout, cout);
        rgb(&mut init, &format!("level{k}.torgb"), cout);
    }
    p
}

fn styled_conv<'t>(s: &Scope<'_, 't>, x: Var<'t>, w: Var<'t>, demodulate: bool) -> Var<'t> {
    let style = s.sub("affine").linear(w);
    let weight = s.get("weight");
    let ws = weight.shape();
    let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
    let mut y = x
        .mul_channels(&style)
        .conv2d(&weight, Conv2dSpec::new(1, k / 2));
    if demodulate {
        let w2 = weight.square().reshape(&[out_ch, in_ch, k * k]).sum_last_axis();
        let s2 = style.square().reshape(&[in_ch, 1]);
        let demod = w2.matmul(&s2).reshape(&[out_ch]).add_scalar(DEMOD_EPS).sqrt().recip();
        y = y.mul_channels(&demod);
    }
    y.add_channels(&s.get("bias")).leaky_relu(LEAK)
}

fn to_rgb<'t>(s: &Scope<'_, 't>, x: Var<'t>, w: Var<'t>) -> Var<'t> {
    let style = s.sub("affine").linear(w);
    x.mul_channels(&style)
        .conv2d(&s.get("weight"), Conv2dSpec::new(1, 0))
        .add_channels(&s.get("bias"))
}

fn to_face(t: Tensor) -> Result<FaceImage> {
    if !t.is_finite() {
        return Err(Error::Numeric("generator produced non-finite pixels".into()));
    }
    FaceImage::new(t)
}

/// Renders a face from an optional external constant `(4, 4, D)`, four low
/// codes and the high codes.
pub fn synthesize(
    constant: Option<&Tensor>,
    low: &Tensor,
    high: &Tensor,
    gen: &GeneratorHandle,
) -> Result<FaceImage> {
    let codes = gen.check_codes(low, high)?;
    if let Some(c) = constant {
        if !gen.accepts_external_constant {
            return Err(Error::Capability(
                "generator does not accept an external constant input".into(),
            ));
        }
        let d = gen.code_dim();
        if c.shape() != [CONSTANT_SIDE, CONSTANT_SIDE, d] {
            return Err(Error::dim(format!(
                "constant input {:?}, expected [4, 4, {d}]",
                c.shape()
            )));
        }
    }
    let tape = Tape::new();
    let bound = gen.params.bind(&tape, false);
    let c = constant.map(|c| tape.constant(c.clone()));
    let img = gen.synthesis_graph(&bound, c, tape.constant(codes));
    to_face((*img.value()).clone())
}

/// One auxiliary training face and the codes that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliarySample {
    pub image: FaceImage,
    pub codes: Tensor,
}

impl AuxiliarySample {
    pub fn regenerate(&self, gen: &GeneratorHandle) -> Result<FaceImage> {
        let low = self.codes.narrow(0, LOW_CODE_COUNT);
        let high = self.codes.narrow(LOW_CODE_COUNT, self.codes.shape()[0] - LOW_CODE_COUNT);
        synthesize(None, &low, &high, gen)
    }
}

/// Draws `n` faces from the generator's own prior: `z ~ N(0, I)`, mapped to
/// `w` and broadcast to every style input.
pub fn sample_auxiliary(gen: &GeneratorHandle, n: usize, seed: u64) -> Result<Vec<AuxiliarySample>> {
    if n == 0 {
        return Err(Error::Argument("auxiliary sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = gen.code_dim();
    let n_codes = gen.code_count();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let tape = Tape::new();
            let bound = gen.params.bind(&tape, false);
            let w = gen.map_graph(&bound, tape.constant(Tensor::new([d], z)));
            let wv = w.value();
            let mut codes = Vec::with_capacity(n_codes * d);
            for _ in 0..n_codes {
                codes.extend_from_slice(wv.data());
            }
            let codes = Tensor::new([n_codes, d], codes);
            let img = gen.synthesis_graph(&bound, None, tape.constant(codes.clone()));
            Ok(AuxiliarySample {
                image: to_face((*img.value()).clone())?,
                codes,
            })
        })
        .collect()
}

/// Loads a generator checkpoint, requiring `expected_resolution`.
pub fn load_generator(dir: &Path, expected_resolution: usize) -> Result<GeneratorHandle> {
    let ck = Checkpoint::load(dir, "generator")?;
    let resolution: usize = ck.config_value(dir, "resolution")?;
    if resolution != expected_resolution {
        return Err(Error::Capability(format!(
            "generator in {} is {resolution}px, expected {expected_resolution}px",
            dir.display()
        )));
    }
    let channels_raw: String = ck.config_value(dir, "channels")?;
    let channels = channels_raw
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::checkpoint(dir, format!("malformed channel list '{channels_raw}'")))?;
    let config = GeneratorConfig {
        resolution,
        code_dim: ck.config_value(dir, "code_dim")?,
        channels,
        mapping_layers: ck.config_value(dir, "mapping_layers")?,
    };
    let accepts = ck.config_value(dir, "accepts_external_constant")?;
    GeneratorHandle::from_params(config, ck.params, accepts)
        .map_err(|e| Error::checkpoint(dir, e.to_string()))
}
