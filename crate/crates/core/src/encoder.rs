//! Hierarchical face encoder.
//!
//! ```text
//! image ─ stem ─ stage1 ─ stage2 ─ stage3 ─ stage4          (residual backbone)
//!                  │        │                 │
//!               lateral  lateral           lateral           (1×1 convs)
//!                  │        │                 │
//!               P_large ← P_mid  ←───────── P_small          (top-down, ×2 upsampling)
//!                  │        │                 │
//!              codes for  codes for      codes 0–3 and C
//!              the rest   half the rest
//! ```
//!
//! Stage strides are `[2, 2, 2, 1]` with widths `[w, 2w, 4w, 8w]`, so the
//! pyramid levels sit at `R/2`, `R/4` and `R/8`. Each code has its own
//! mapping network: `log2(h)` rounds of stride-2 3×3 convolution, per-channel
//! affine normalization and leaky ReLU, then global pooling and a
//! zero-initialised linear output to `D`.
//!
//! The constant head (W++ only) halves `P_small` with stride-2 convolutions
//! down to 4×4, projects to `D` channels with a zero-initialised 1×1
//! convolution and adds a learned `[D, 4, 4]` base, which
//! [`EncoderState::warm_start_constant`] can set to a generator's own
//! constant.
//!
//! Normalization layers are per-channel affine maps (batch statistics frozen
//! into the scale and shift), so encoding one image is deterministic and
//! independent of any batch.

use std::ops::Range;
use std::path::Path;

use latentswap_autograd::{Conv2dSpec, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::generator::GeneratorHandle;
use crate::latent::{
    code_count, Encoded, HierLatent, LatentCode, LatentSpace, WPlusLatent, CONSTANT_SIDE, LOW_CODE_COUNT,
};
use crate::params::{Bound, Initializer, ParamSet, Scope};
use crate::{Error, FaceImage, Result};

const LEAK: f64 = 0.2;

/// Smallest supported working resolution (the small pyramid map is 4×4).
pub const MIN_RESOLUTION: usize = 32;

/// Feature-pyramid level a code is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PyramidLevel {
    Small,
    Mid,
    Large,
}

impl PyramidLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PyramidLevel::Small => "small",
            PyramidLevel::Mid => "mid",
            PyramidLevel::Large => "large",
        }
    }

    /// Side of this level's map at `resolution`.
    pub fn side(&self, resolution: usize) -> usize {
        match self {
            PyramidLevel::Small => resolution / 8,
            PyramidLevel::Mid => resolution / 4,
            PyramidLevel::Large => resolution / 2,
        }
    }
}

impl std::str::FromStr for PyramidLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "mid" => Ok(Self::Mid),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown pyramid level '{other}'"))),
        }
    }
}

/// Code indices `range` read from `level`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRoute {
    pub level: PyramidLevel,
    pub codes: Range<usize>,
}

/// Default routing of the high codes: the first half (rounded down) from the
/// mid map, the rest from the large map.
pub fn default_code_split(n_total: usize) -> Vec<CodeRoute> {
    let n_high = n_total - LOW_CODE_COUNT;
    let mid_end = LOW_CODE_COUNT + n_high / 2;
    vec![
        CodeRoute {
            level: PyramidLevel::Mid,
            codes: LOW_CODE_COUNT..mid_end,
        },
        CodeRoute {
            level: PyramidLevel::Large,
            codes: mid_end..n_total,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub code_dim: usize,
    pub latent_space: LatentSpace,
    /// Channels of the first backbone stage; later stages double it.
    pub backbone_width: usize,
    /// Residual blocks per stage.
    pub stage_blocks: Vec<usize>,
    pub pyramid_width: usize,
    /// Channels inside each code's mapping network.
    pub mapping_width: usize,
    /// Routing of codes `4..N_total`; codes `0..4` always come from the
    /// small map.
    pub code_split: Vec<CodeRoute>,
}

impl EncoderConfig {
    /// Full-size layout: 50-layer block pattern, 512-wide pyramid and
    /// mapping networks.
    pub fn standard(resolution: usize, latent_space: LatentSpace) -> Result<Self> {
        Ok(Self {
            resolution,
            code_dim: 512,
            latent_space,
            backbone_width: 64,
            stage_blocks: vec![3, 4, 6, 3],
            pyramid_width: 512,
            mapping_width: 512,
            code_split: default_code_split(code_count(resolution)?),
        })
    }

    /// One block per stage and narrow layers.
    pub fn toy(resolution: usize, code_dim: usize, latent_space: LatentSpace) -> Result<Self> {
        Ok(Self {
            resolution,
            code_dim,
            latent_space,
            backbone_width: 4,
            stage_blocks: vec![1, 1, 1, 1],
            pyramid_width: 8,
            mapping_width: 8,
            code_split: default_code_split(code_count(resolution)?),
        })
    }

    pub fn code_count(&self) -> Result<usize> {
        code_count(self.resolution)
    }

    pub fn high_code_count(&self) -> Result<usize> {
        Ok(self.code_count()? - LOW_CODE_COUNT)
    }

    pub fn validate(&self) -> Result<()> {
        let n_total = self.code_count()?;
        if self.resolution < MIN_RESOLUTION {
            return Err(Error::dim(format!(
                "encoder needs at least {MIN_RESOLUTION}px, got {}",
                self.resolution
            )));
        }
        if self.stage_blocks.len() != 4 || self.stage_blocks.contains(&0) {
            return Err(Error::Config("stage_blocks needs four positive entries".into()));
        }
        if [self.code_dim, self.backbone_width, self.pyramid_width, self.mapping_width].contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut seen = vec![false; n_total];
        for route in &self.code_split {
            for i in route.codes.clone() {
                if i < LOW_CODE_COUNT || i >= n_total || seen[i] {
                    return Err(Error::Config(format!(
                        "code_split assigns code {i} outside 4..{n_total} or twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = (LOW_CODE_COUNT..n_total).find(|&i| !seen[i]) {
            return Err(Error::Config(format!("code_split leaves code {i} unassigned")));
        }
        Ok(())
    }

    /// Pyramid level feeding each code, in code order.
    pub fn code_levels(&self) -> Result<Vec<PyramidLevel>> {
        let n = self.code_count()?;
        let mut levels = vec![PyramidLevel::Small; n];
        for route in &self.code_split {
            for i in route.codes.clone() {
                levels[i] = route.level;
            }
        }
        Ok(levels)
    }
}

fn stage_width(cfg: &EncoderConfig, s: usize) -> usize {
    cfg.backbone_width << s
}

const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];

fn stages_for(side: usize) -> Result<usize> {
    if side == 0 || !side.is_power_of_two() {
        return Err(Error::dim(format!("feature map side {side} is not a power of two")));
    }
    Ok(side.trailing_zeros() as usize)
}

fn init_mapping(init: &mut Initializer, prefix: &str, in_ch: usize, width: usize, code_dim: usize, stages: usize) {
    let mut c = in_ch;
    for j in 0..stages {
        init.conv(&format!("{prefix}.stage{j}.conv"), width, c, 3, false);
        init.channel_affine(&format!("{prefix}.stage{j}.norm"), width);
        c = width;
    }
    init.zero_linear(&format!("{prefix}.out"), code_dim, c);
}

fn mapping_graph<'t>(s: &Scope<'_, 't>, mut x: Var<'t>, stages: usize) -> Var<'t> {
    for j in 0..stages {
        let st = s.sub(&format!("stage{j}"));
        x = st.sub("conv").conv(x, Conv2dSpec::new(2, 1), false);
        x = st.sub("norm").channel_affine(x).leaky_relu(LEAK);
    }
    s.sub("out").linear(x.global_avg_pool())
}

/// A standalone lateral mapping network from an `h × h × c` map to a code.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNet {
    params: ParamSet,
    side: usize,
    in_channels: usize,
    code_dim: usize,
}

impl MappingNet {
    pub fn init(side: usize, in_channels: usize, width: usize, code_dim: usize, seed: u64) -> Result<Self> {
        let stages = stages_for(side)?;
        let mut params = ParamSet::new();
        init_mapping(&mut Initializer::new(&mut params, seed), "map", in_channels, width, code_dim, stages);
        Ok(Self {
            params,
            side,
            in_channels,
            code_dim,
        })
    }

    /// Number of stride-2 stages, `log2(side)`.
    pub fn stage_count(&self) -> usize {
        self.side.trailing_zeros() as usize
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Maps an `(h, w, c)` feature map to a code of width `D`.
pub fn map_feature_to_code(feature_map: &Tensor, net: &MappingNet) -> Result<LatentCode> {
    let (h, w, c) = match feature_map.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::dim(format!("feature map must be (h, w, c), got {s:?}"))),
    };
    if h != w {
        return Err(Error::dim(format!("feature map is {h}×{w}, not square")));
    }
    stages_for(h)?;
    if h != net.side || c != net.in_channels {
        return Err(Error::dim(format!(
            "feature map {h}×{w}×{c} does not fit a mapping network for {}×{}×{}",
            net.side, net.side, net.in_channels
        )));
    }
    let tape = Tape::new();
    let bound = net.params.bind(&tape, false);
    let x = tape.constant(feature_map.clone()).permute(&[2, 0, 1]);
    let code = mapping_graph(&bound.scope("map"), x, net.stage_count());
    LatentCode::new(code.value().data().to_vec())
        .map_err(|_| Error::Numeric("mapping network produced a non-finite code".into()))
}

/// Graph-level encoder output.
pub struct EncodedVars<'t> {
    /// `(4, 4, D)` in W++ mode.
    pub constant: Option<Var<'t>>,
    /// `(N_total, D)`.
    pub codes: Var<'t>,
}

impl<'t> EncodedVars<'t> {
    pub fn low_codes(&self) -> Var<'t> {
        self.codes.narrow(0, LOW_CODE_COUNT)
    }

    pub fn high_codes(&self) -> Var<'t> {
        let n = self.codes.shape()[0];
        self.codes.narrow(LOW_CODE_COUNT, n - LOW_CODE_COUNT)
    }
}

/// Encoder weights and their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    config: EncoderConfig,
    params: ParamSet,
}

impl EncoderState {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        init_params(&config, 0)?
            .check_layout(&params)
            .map_err(Error::Dimension)?;
        params.check_finite()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Number of per-code mapping networks.
    pub fn mapping_network_count(&self) -> usize {
        self.params
            .names()
            .filter(|n| n.starts_with("map") && n.ends_with(".out.weight"))
            .count()
    }

    /// Sets the constant head's base to `gen`'s learned constant, so an
    /// untrained encoder reproduces the generator's default input.
    pub fn warm_start_constant(&mut self, gen: &GeneratorHandle) -> Result<()> {
        if self.config.latent_space != LatentSpace::WPlusPlus {
            return Ok(());
        }
        if gen.code_dim() != self.config.code_dim {
            return Err(Error::dim(format!(
                "generator codes are {}-wide, encoder {}",
                gen.code_dim(),
                self.config.code_dim
            )));
        }
        let c = gen.params().expect("const").clone();
        *self.params.get_mut("const_head.base").expect("W++ encoder has a base") = c;
        Ok(())
    }

    pub fn graph<'t>(&self, bound: &Bound<'t>, image: Var<'t>) -> EncodedVars<'t> {
        let cfg = &self.config;
        let bb = bound.scope("backbone");
        let stem = bb.sub("stem");
        let mut x = stem.sub("conv").conv(image, Conv2dSpec::new(1, 1), false);
        x = stem.sub("norm").channel_affine(x).leaky_relu(LEAK);

        let mut outs = Vec::with_capacity(4);
        for s in 0..4 {
            for b in 0..cfg.stage_blocks[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                x = residual_block(&bb.sub(&format!("stage{s}.block{b}")), x, stride);
            }
            outs.push(x);
        }

        let fpn = bound.scope("fpn");
        let lat = |name: &str, v: Var<'t>| fpn.sub(name).conv(v, Conv2dSpec::new(1, 0), true);
        let p_small = lat("lateral_small", outs[3]);
        let p_mid = lat("lateral_mid", outs[1]).add(&p_small.upsample2x());
        let p_large = lat("lateral_large", outs[0]).add(&p_mid.upsample2x());
        let refine = |name: &str, v: Var<'t>| fpn.sub(name).conv(v, Conv2dSpec::new(1, 1), true);
        let p_small = refine("refine_small", p_small);
        let p_mid = refine("refine_mid", p_mid);
        let p_large = refine("refine_large", p_large);

        let levels = cfg.code_levels().expect("validated config");
        let codes: Vec<Var<'t>> = levels
            .iter()
            .enumerate()
            .map(|(i, level)| {
                let (map, side) = match level {
                    PyramidLevel::Small => (p_small, PyramidLevel::Small.side(cfg.resolution)),
                    PyramidLevel::Mid => (p_mid, PyramidLevel::Mid.side(cfg.resolution)),
                    PyramidLevel::Large => (p_large, PyramidLevel::Large.side(cfg.resolution)),
                };
                mapping_graph(&bound.scope(&format!("map{i}")), map, side.trailing_zeros() as usize)
            })
            .collect();
        let codes = Var::stack(&codes);

        let constant = (cfg.latent_space == LatentSpace::WPlusPlus).then(|| {
            let head = bound.scope("const_head");
            let mut c = p_small;
            for j in 0..constant_head_downsamples(cfg) {
                c = head
                    .sub(&format!("down{j}"))
                    .conv(c, Conv2dSpec::new(2, 1), true)
                    .leaky_relu(LEAK);
            }
            head.sub("proj")
                .conv(c, Conv2dSpec::new(1, 0), true)
                .add(&head.get("base"))
                .permute(&[1, 2, 0])
        });
        EncodedVars { constant, codes }
    }

    /// Encodes one image.
    pub fn encode(&self, image: &FaceImage) -> Result<Encoded> {
        if image.resolution() != self.config.resolution {
            return Err(Error::dim(format!(
                "encoder works at {}px, image is {}px",
                self.config.resolution,
                image.resolution()
            )));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.graph(&bound, tape.constant(image.pixels().clone()));
        let codes = (*out.codes.value()).clone();
        if !codes.is_finite() || out.constant.is_some_and(|c| !c.value().is_finite()) {
            return Err(Error::Numeric("encoder produced non-finite activations".into()));
        }
        let r = self.config.resolution;
        Ok(match out.constant {
            Some(c) => {
                let n = codes.shape()[0];
                Encoded::WPlusPlus(HierLatent::new(
                    (*c.value()).clone(),
                    codes.narrow(0, LOW_CODE_COUNT),
                    codes.narrow(LOW_CODE_COUNT, n - LOW_CODE_COUNT),
                    r,
                )?)
            }
            None => Encoded::WPlus(WPlusLatent::new(codes, r)?),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = &self.config;
        let blocks: Vec<String> = cfg.stage_blocks.iter().map(ToString::to_string).collect();
        let split: Vec<String> = cfg
            .code_split
            .iter()
            .map(|r| format!("{}:{}-{}", r.level.as_str(), r.codes.start, r.codes.end))
            .collect();
        Checkpoint::new("encoder", self.params.clone())
            .with("resolution", cfg.resolution)
            .with("code_dim", cfg.code_dim)
            .with("latent_space", cfg.latent_space.as_str())
            .with("backbone_width", cfg.backbone_width)
            .with("stage_blocks", blocks.join(","))
            .with("pyramid_width", cfg.pyramid_width)
            .with("mapping_width", cfg.mapping_width)
            .with("code_split", split.join(","))
            .save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir, "encoder")?;
        let bad = |what: &str| Error::checkpoint(dir.join(crate::checkpoint::MANIFEST), format!("malformed {what}"));
        let blocks: String = ck.config_value(dir, "stage_blocks")?;
        let stage_blocks = blocks
            .split(',')
            .map(|b| b.trim().parse())
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad("stage_blocks"))?;
        let split: String = ck.config_value(dir, "code_split")?;
        let code_split = split
            .split(',')
            .map(|item| {
                let (level, range) = item.split_once(':')?;
                let (a, b) = range.split_once('-')?;
                Some(CodeRoute {
                    level: level.trim().parse().ok()?,
                    codes: a.trim().parse().ok()?..b.trim().parse().ok()?,
                })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("code_split"))?;
        let space: String = ck.config_value(dir, "latent_space")?;
        let config = EncoderConfig {
            resolution: ck.config_value(dir, "resolution")?,
            code_dim: ck.config_value(dir, "code_dim")?,
            latent_space: space.parse().map_err(|_| bad("latent_space"))?,
            backbone_width: ck.config_value(dir, "backbone_width")?,
            stage_blocks,
            pyramid_width: ck.config_value(dir, "pyramid_width")?,
            mapping_width: ck.config_value(dir, "mapping_width")?,
            code_split,
        };
        Self::from_params(config, ck.params).map_err(|e| Error::checkpoint(dir, e.to_string()))
    }
}

/// Encodes `image` with `state`.
pub fn encode(image: &FaceImage, state: &EncoderState) -> Result<Encoded> {
    state.encode(image)
}

fn constant_head_downsamples(cfg: &EncoderConfig) -> usize {
    (PyramidLevel::Small.side(cfg.resolution) / CONSTANT_SIDE).trailing_zeros() as usize
}

fn residual_block<'t>(s: &Scope<'_, 't>, x: Var<'t>, stride: usize) -> Var<'t> {
    let mut y = s.sub("conv1").conv(x, Conv2dSpec::new(stride, 1), false);
    y = s.sub("norm1").channel_affine(y).leaky_relu(LEAK);
    y = s.sub("conv2").conv(y, Conv2dSpec::new(1, 1), false);
    y = s.sub("norm2").channel_affine(y);
    let shortcut = if x.shape()[0] != y.shape()[0] || stride != 1 {
        let down = s.sub("down");
        let d = down.sub("conv").conv(x, Conv2dSpec::new(stride, 0), false);
        down.sub("norm").channel_affine(d)
    } else {
        x
    };
    y.add(&shortcut).leaky_relu(LEAK)
}

fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let mut init = Initializer::new(&mut p, seed);
    let w0 = cfg.backbone_width;
    init.conv("backbone.stem.conv", w0, 3, 3, false);
    init.channel_affine("backbone.stem.norm", w0);
    let mut c_in = w0;
    for s in 0..4 {
        let c_out = stage_width(cfg, s);
        for b in 0..cfg.stage_blocks[s] {
            let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
            let pre = format!("backbone.stage{s}.block{b}");
            init.conv(&format!("{pre}.conv1"), c_out, c_in, 3, false);
            init.channel_affine(&format!("{pre}.norm1"), c_out);
            init.conv(&format!("{pre}.conv2"), c_out, c_out, 3, false);
            // Residual branch starts damped so deep stacks stay stable.
            init.constant(&format!("{pre}.norm2.scale"), &[c_out], 0.5);
            init.constant(&format!("{pre}.norm2.shift"), &[c_out], 0.0);
            if c_in != c_out || stride != 1 {
                init.conv(&format!("{pre}.down.conv"), c_out, c_in, 1, false);
                init.channel_affine(&format!("{pre}.down.norm"), c_out);
            }
            c_in = c_out;
        }
    }
    let pw = cfg.pyramid_width;
    init.conv("fpn.lateral_small", pw, stage_width(cfg, 3), 1, true);
    init.conv("fpn.lateral_mid", pw, stage_width(cfg, 1), 1, true);
    init.conv("fpn.lateral_large", pw, stage_width(cfg, 0), 1, true);
    for level in ["small", "mid", "large"] {
        init.conv(&format!("fpn.refine_{level}"), pw, pw, 3, true);
    }
    for (i, level) in cfg.code_levels()?.iter().enumerate() {
        let stages = stages_for(level.side(cfg.resolution))?;
        init_mapping(&mut init, &format!("map{i}"), pw, cfg.mapping_width, cfg.code_dim, stages);
    }
    if cfg.latent_space == LatentSpace::WPlusPlus {
        for j in 0..constant_head_downsamples(cfg) {
            init.conv(&format!("const_head.down{j}"), pw, pw, 3, true);
        }
        init.constant("const_head.proj.weight", &[cfg.code_dim, pw, 1, 1], 0.0);
        init.constant("const_head.proj.bias", &[cfg.code_dim], 0.0);
        init.constant("const_head.base", &[cfg.code_dim, CONSTANT_SIDE, CONSTANT_SIDE], 0.0);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face(r: usize) -> FaceImage {
        let n = 3 * r * r;
        FaceImage::new(Tensor::new([3, r, r], (0..n).map(|i| (i as f64 * 0.013).sin() * 0.9).collect())).unwrap()
    }

    fn perturbed(state: &mut EncoderState) {
        // Break the zero-initialised outputs so codes carry signal.
        for (name, t) in state.params_mut().iter_mut() {
            if name.ends_with("out.weight") || name.starts_with("const_head.proj") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = ((i * 7 % 13) as f64 - 6.0) * 0.05;
                }
            }
        }
    }

    #[test]
    fn default_split_halves_high_codes() {
        let s = default_code_split(18);
        assert_eq!(s[0].codes, 4..11);
        assert_eq!(s[1].codes, 11..18);
        let s = default_code_split(8);
        assert_eq!((s[0].codes.clone(), s[1].codes.clone()), (4..6, 6..8));
    }

    #[test]
    fn bad_split_rejected() {
        let mut cfg = EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap();
        cfg.code_split[1].codes = 6..7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn standard_1024_declares_eighteen_codes() {
        let cfg = EncoderConfig::standard(1024, LatentSpace::WPlusPlus).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.code_count().unwrap(), 18);
        assert_eq!(cfg.high_code_count().unwrap(), 14);
        assert_eq!(cfg.stage_blocks, [3, 4, 6, 3]);
    }

    #[test]
    fn w_plus_plus_shapes_at_32_and_deterministic() {
        let mut st = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap(), 3).unwrap();
        perturbed(&mut st);
        assert_eq!(st.mapping_network_count(), 8);
        let a = st.encode(&face(32)).unwrap();
        assert_eq!(a.constant_input().unwrap().shape(), &[4, 4, 8]);
        assert_eq!(a.low_codes().shape(), &[4, 8]);
        assert_eq!(a.high_codes().shape(), &[4, 8]);
        assert_eq!(a, st.encode(&face(32)).unwrap());
    }

    #[test]
    fn w_plus_has_no_constant() {
        let st = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlus).unwrap(), 3).unwrap();
        let a = st.encode(&face(32)).unwrap();
        assert!(a.constant_input().is_none());
        assert_eq!(a.high_codes().shape(), &[4, 8]);
        assert!(!st.params().names().any(|n| n.starts_with("const_head")));
    }

    #[test]
    fn resolution_mismatch() {
        let st = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlus).unwrap(), 3).unwrap();
        assert!(matches!(st.encode(&face(64)), Err(Error::Dimension(_))));
    }

    #[test]
    fn mapping_net_stage_counts() {
        let net = MappingNet::init(16, 4, 4, 6, 1).unwrap();
        assert_eq!(net.stage_count(), 4);
        let code = map_feature_to_code(&Tensor::full([16, 16, 4], 0.3), &net).unwrap();
        assert_eq!(code.dim(), 6);
        let unit = MappingNet::init(1, 4, 4, 6, 1).unwrap();
        assert_eq!(unit.stage_count(), 0);
        assert_eq!(map_feature_to_code(&Tensor::zeros([1, 1, 4]), &unit).unwrap().values(), &[0.0; 6]);
    }

    #[test]
    fn mapping_net_rejects_non_square() {
        let net = MappingNet::init(4, 2, 2, 2, 1).unwrap();
        assert!(matches!(
            map_feature_to_code(&Tensor::zeros([4, 2, 2]), &net),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap(), 3).unwrap();
        crate::checkpoint::quantize(st.params_mut());
        st.save(dir.path()).unwrap();
        assert_eq!(EncoderState::load(dir.path()).unwrap(), st);
    }
}
