//! End-to-end swapping, batch generation, configuration and PNG I/O.
//!
//! A swap encodes both faces, keeps only the source's high codes, moves
//! identity into the target's high codes with the configured manipulator,
//! and renders from the target's constant input and low codes.
//!
//! Configuration is TOML:
//!
//! ```toml
//! resolution = 32
//! latent_space = "w++"        # or "w+"
//! manipulator = "ftm"         # "lcr", "id_injection"
//! seed = 0
//! workers = 4
//!
//! [checkpoints]               # relative to the config file
//! encoder = "ckpt/encoder"
//! generator = "ckpt/generator"
//! ftm = "ckpt/ftm"
//!
//! [oracles]
//! features = "toy"
//! recognizer = "toy"
//! landmarks = "toy"
//! sizes = { features = 32, recognizer = 32, landmarks = 32 }
//!
//! [train]                     # see train::TrainConfig
//! steps = 500
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{ColorType, ImageFormat, ImageReader, RgbImage};
use latentswap_autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderState;
use crate::eval::{self, IdentityGallery, MetricReport, ToyExpressionEstimator, ToyPoseEstimator};
use crate::generator::{load_generator, synthesize, GeneratorHandle};
use crate::latent::high_code_count;
use crate::oracles::{OracleSet, OracleSizes};
use crate::params::hex;
use crate::train::TrainConfig;
use crate::transfer::{FtmParams, IdInjectionParams, Manipulator, ManipulatorKind};
use crate::{Encoded, Error, FaceImage, LatentSpace, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub encoder: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub ftm: Option<PathBuf>,
    pub id_injection: Option<PathBuf>,
}

impl CheckpointPaths {
    fn all(&self) -> impl Iterator<Item = (&'static str, &PathBuf)> {
        [
            ("encoder", &self.encoder),
            ("generator", &self.generator),
            ("ftm", &self.ftm),
            ("id_injection", &self.id_injection),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub features: String,
    pub recognizer: String,
    pub landmarks: String,
    pub sizes: OracleSizes,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            features: "toy".into(),
            recognizer: "toy".into(),
            landmarks: "toy".into(),
            sizes: OracleSizes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub resolution: usize,
    pub latent_space: LatentSpace,
    pub manipulator: ManipulatorKind,
    pub seed: u64,
    /// Threads for batch jobs.
    pub workers: usize,
    /// `"toy"` or `"standard"` encoder architecture for training.
    pub encoder_preset: String,
    /// Hidden width of the ID injection layers; defaults to the code width.
    pub id_hidden: Option<usize>,
    pub checkpoints: CheckpointPaths,
    pub oracles: OracleConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_space: LatentSpace::WPlusPlus,
            manipulator: ManipulatorKind::Ftm,
            seed: 0,
            workers: 1,
            encoder_preset: "toy".into(),
            id_hidden: None,
            checkpoints: CheckpointPaths::default(),
            oracles: OracleConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML and resolves relative checkpoint paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for p in [
            &mut cfg.checkpoints.encoder,
            &mut cfg.checkpoints.generator,
            &mut cfg.checkpoints.ftm,
            &mut cfg.checkpoints.id_injection,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = cfg.train.checkpoint_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; every referenced checkpoint must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml(&text, base)?;
        for (_, p) in cfg.checkpoints.all() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        high_code_count(self.resolution).map_err(|e| Error::Config(e.to_string()))?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !["toy", "standard"].contains(&self.encoder_preset.as_str()) {
            return Err(Error::Config(format!("unknown encoder preset '{}'", self.encoder_preset)));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn oracle_set(&self) -> Result<OracleSet> {
        let o = &self.oracles;
        OracleSet::from_names(&o.features, &o.recognizer, &o.landmarks, o.sizes, self.seed)
    }

    fn required(&self, which: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("checkpoints.{which} is not set")))
    }

    pub fn load_generator(&self) -> Result<GeneratorHandle> {
        load_generator(&self.required("generator", &self.checkpoints.generator)?, self.resolution)
    }

    pub fn load_encoder(&self) -> Result<EncoderState> {
        let dir = self.required("encoder", &self.checkpoints.encoder)?;
        let enc = EncoderState::load(&dir)?;
        let c = enc.config();
        if c.resolution != self.resolution || c.latent_space != self.latent_space {
            return Err(Error::Capability(format!(
                "encoder in {} is {}px {}, config asks for {}px {}",
                dir.display(),
                c.resolution,
                c.latent_space.as_str(),
                self.resolution,
                self.latent_space.as_str()
            )));
        }
        Ok(enc)
    }

    pub fn load_manipulator(&self) -> Result<Manipulator> {
        Ok(match self.manipulator {
            ManipulatorKind::Lcr => Manipulator::Lcr,
            ManipulatorKind::Ftm => Manipulator::Ftm(FtmParams::load(&self.required("ftm", &self.checkpoints.ftm)?)?),
            ManipulatorKind::IdInjection => Manipulator::IdInjection(IdInjectionParams::load(
                &self.required("id_injection", &self.checkpoints.id_injection)?,
            )?),
        })
    }
}

/// Anything that turns a face into latent codes. The pipeline only talks to
/// the encoder through this seam.
pub trait FaceEncoder: Send + Sync {
    fn encode(&self, image: &FaceImage) -> Result<Encoded>;
    fn resolution(&self) -> usize;
    fn code_dim(&self) -> usize;
    fn latent_space(&self) -> LatentSpace;
}

impl FaceEncoder for EncoderState {
    fn encode(&self, image: &FaceImage) -> Result<Encoded> {
        EncoderState::encode(self, image)
    }

    fn resolution(&self) -> usize {
        self.config().resolution
    }

    fn code_dim(&self) -> usize {
        self.config().code_dim
    }

    fn latent_space(&self) -> LatentSpace {
        self.config().latent_space
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub encode: Duration,
    pub manipulate: Duration,
    pub generate: Duration,
    pub total: Duration,
}

impl StageTimings {
    pub fn stage_sum(&self) -> Duration {
        self.encode + self.manipulate + self.generate
    }
}

#[derive(Clone, Debug)]
pub struct SwapResult {
    pub image: FaceImage,
    pub source_latent: Encoded,
    pub target_latent: Encoded,
    /// Transferred high codes, `(N_high, D)`.
    pub transferred_codes: Tensor,
    pub timings: StageTimings,
}

/// Equality ignores timings.
impl PartialEq for SwapResult {
    fn eq(&self, other: &Self) -> bool {
        self.image == other.image
            && self.source_latent == other.source_latent
            && self.target_latent == other.target_latent
            && self.transferred_codes == other.transferred_codes
    }
}

/// Loaded models ready to swap.
#[derive(Clone)]
pub struct Pipeline {
    encoder: Arc<dyn FaceEncoder>,
    generator: GeneratorHandle,
    manipulator: Manipulator,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("resolution", &self.resolution())
            .field("latent_space", &self.encoder.latent_space())
            .field("manipulator", &self.manipulator.kind())
            .finish()
    }
}

impl Pipeline {
    /// Checks that the three parts agree on resolution, code width and
    /// constant-input support.
    pub fn new(encoder: Arc<dyn FaceEncoder>, generator: GeneratorHandle, manipulator: Manipulator) -> Result<Self> {
        if encoder.resolution() != generator.resolution() || encoder.code_dim() != generator.code_dim() {
            return Err(Error::Capability(format!(
                "encoder ({}px, D={}) does not match generator ({}px, D={})",
                encoder.resolution(),
                encoder.code_dim(),
                generator.resolution(),
                generator.code_dim()
            )));
        }
        if encoder.latent_space() == LatentSpace::WPlusPlus && !generator.accepts_external_constant() {
            return Err(Error::Capability(
                "W++ encoder needs a generator that accepts an external constant".into(),
            ));
        }
        manipulator.check_compatible(high_code_count(encoder.resolution())?, encoder.code_dim())?;
        Ok(Self {
            encoder,
            generator,
            manipulator,
        })
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let generator = cfg.load_generator()?;
        let encoder = cfg.load_encoder()?;
        Self::new(Arc::new(encoder), generator, cfg.load_manipulator()?)
    }

    pub fn resolution(&self) -> usize {
        self.encoder.resolution()
    }

    pub fn generator(&self) -> &GeneratorHandle {
        &self.generator
    }

    pub fn manipulator(&self) -> &Manipulator {
        &self.manipulator
    }

    fn check_input(&self, what: &str, image: &FaceImage) -> Result<()> {
        if image.resolution() != self.resolution() {
            return Err(Error::dim(format!(
                "{what} image is {}px, pipeline runs at {}px",
                image.resolution(),
                self.resolution()
            )));
        }
        Ok(())
    }

    fn render(&self, latent: &Encoded) -> Result<FaceImage> {
        synthesize(latent.constant_input(), &latent.low_codes(), &latent.high_codes(), &self.generator)
    }

    /// Puts the identity of `source` onto `target`.
    pub fn swap(&self, source: &FaceImage, target: &FaceImage) -> Result<SwapResult> {
        self.check_input("source", source)?;
        self.check_input("target", target)?;
        let start = Instant::now();
        let source_latent = self.encoder.encode(source)?;
        let target_latent = self.encoder.encode(target)?;
        let encode = start.elapsed();

        let t = Instant::now();
        // Only the source's high codes go any further.
        let transferred_codes = self
            .manipulator
            .apply(&source_latent.high_codes(), &target_latent.high_codes())?;
        let output_latent = target_latent.with_high_codes(transferred_codes.clone())?;
        let manipulate = t.elapsed();

        let t = Instant::now();
        let image = self.render(&output_latent)?;
        let generate = t.elapsed();
        Ok(SwapResult {
            image,
            source_latent,
            target_latent,
            transferred_codes,
            timings: StageTimings {
                encode,
                manipulate,
                generate,
                total: start.elapsed(),
            },
        })
    }

    /// Encodes and re-renders `image` without manipulation.
    pub fn invert(&self, image: &FaceImage) -> Result<FaceImage> {
        self.check_input("input", image)?;
        self.render(&self.encoder.encode(image)?)
    }
}

/// Reads an 8-bit RGB PNG into `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    let unsupported = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(unsupported("not a PNG file".into()));
    }
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => unsupported(other.to_string()),
    })?;
    if img.color() != ColorType::Rgb8 {
        return Err(unsupported(format!("{:?} pixels, 8-bit RGB required", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    if w != h {
        return Err(unsupported(format!("{w}x{h} is not square")));
    }
    let data: Vec<f64> = rgb.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    FaceImage::from_hwc(w as usize, &data).map_err(|e| unsupported(e.to_string()))
}

/// Writes `image` as an 8-bit RGB PNG.
pub fn save_image(image: &FaceImage, path: &Path) -> Result<()> {
    let side = image.resolution() as u32;
    let bytes: Vec<u8> = image
        .to_hwc()
        .iter()
        .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = RgbImage::from_raw(side, side, bytes).expect("buffer matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// One line of a pair list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Parses `source,target` lines (a tab also separates). Blank lines and
/// `#` comments are skipped; relative paths resolve against `base`.
pub fn parse_pairs(text: &str, base: &Path) -> Result<Vec<PairSpec>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split([',', '\t']).map(str::trim).collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Argument(format!(
                "pair list line {}: expected 'source,target', got '{line}'",
                i + 1
            )));
        }
        let abs = |f: &str| {
            let p = PathBuf::from(f);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        out.push(PairSpec {
            source: abs(fields[0]),
            target: abs(fields[1]),
        });
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Output file names, `<source>_to_<target>.png`, with a row suffix on
/// repeats so parallel rows never share a file.
fn output_names(pairs: &[PairSpec]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = format!("{}_to_{}", stem(&p.source), stem(&p.target));
            if seen.insert(base.clone()) {
                format!("{base}.png")
            } else {
                format!("{base}-{i}.png")
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowStatus {
    Ok { output: PathBuf, sha256: String },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub source: PathBuf,
    pub target: PathBuf,
    pub status: RowStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchManifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl BatchManifest {
    pub fn ok_count(&self) -> usize {
        self.rows.iter().filter(|r| matches!(r.status, RowStatus::Ok { .. })).count()
    }

    pub fn failed_count(&self) -> usize {
        self.rows.len() - self.ok_count()
    }

    /// Tab-separated: source, target, status, output, sha256 or reason.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("source\ttarget\tstatus\toutput\tsha256_or_reason\n");
        for r in &self.rows {
            let (status, output, last) = match &r.status {
                RowStatus::Ok { output, sha256 } => ("ok", output.display().to_string(), sha256.clone()),
                RowStatus::Failed { reason } => ("failed", String::new(), reason.replace(['\t', '\n'], " ")),
            };
            s.push_str(&format!(
                "{}\t{}\t{status}\t{output}\t{last}\n",
                r.source.display(),
                r.target.display()
            ));
        }
        s
    }

    /// Re-hashes every written output; returns the rows whose file no
    /// longer matches.
    pub fn verify(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for r in &self.rows {
            if let RowStatus::Ok { output, sha256 } = &r.status {
                let path = out_dir.join(output);
                if &sha256_file(&path)? != sha256 {
                    bad.push(path);
                }
            }
        }
        Ok(bad)
    }
}

/// Swaps every pair in `pairs_file`, writing one PNG per pair plus
/// `manifest.tsv` into `out_dir`. Failed rows are recorded and skipped; the
/// call fails only when no row succeeds.
pub fn batch_generate(pairs_file: &Path, pipeline: &Pipeline, out_dir: &Path, workers: usize) -> Result<BatchManifest> {
    let text = fs::read_to_string(pairs_file).map_err(|e| Error::io(pairs_file, e))?;
    let pairs = parse_pairs(&text, pairs_file.parent().unwrap_or(Path::new(".")))?;
    batch_generate_pairs(&pairs, pipeline, out_dir, workers)
}

pub fn batch_generate_pairs(
    pairs: &[PairSpec],
    pipeline: &Pipeline,
    out_dir: &Path,
    workers: usize,
) -> Result<BatchManifest> {
    if pairs.is_empty() {
        return Err(Error::Argument("pair list is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = output_names(pairs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(PathBuf, String)>> = pool.install(|| {
        pairs
            .par_iter()
            .zip(&names)
            .map(|(p, name)| {
                let out = pipeline.swap(&load_image(&p.source)?, &load_image(&p.target)?)?;
                let path = out_dir.join(name);
                save_image(&out.image, &path)?;
                Ok((PathBuf::from(name), sha256_file(&path)?))
            })
            .collect()
    });
    let mut first_error = None;
    let rows = pairs
        .iter()
        .zip(results)
        .map(|(p, r)| ManifestRow {
            source: p.source.clone(),
            target: p.target.clone(),
            status: match r {
                Ok((output, sha256)) => RowStatus::Ok { output, sha256 },
                Err(e) => {
                    let reason = e.to_string();
                    first_error.get_or_insert(e);
                    RowStatus::Failed { reason }
                }
            },
        })
        .collect();
    let manifest = BatchManifest { rows };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    match first_error {
        Some(e) if manifest.ok_count() == 0 => Err(e),
        _ => Ok(manifest),
    }
}

/// PNGs in `dir` by stem, sorted.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, FaceImage)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok((stem(p), load_image(p)?))).collect()
}

/// Splits `<source>_to_<target>` at the first `_to_` whose halves are both
/// known stems.
fn split_swap_name(name: &str, is_source: impl Fn(&str) -> bool, is_target: impl Fn(&str) -> bool) -> Option<(&str, &str)> {
    name.match_indices("_to_")
        .map(|(i, _)| (&name[..i], &name[i + 4..]))
        .find(|(s, t)| is_source(s) && is_target(t))
}

/// Swap metrics over directories laid out by [`batch_generate`]: each
/// swapped `<s>_to_<t>.png` is matched with `sources/<s>.png` and
/// `targets/<t>.png`.
pub fn evaluate_dirs(swapped: &Path, sources: &Path, targets: &Path, oracles: &OracleSet) -> Result<MetricReport> {
    let sources = load_image_dir(sources)?;
    let targets = load_image_dir(targets)?;
    let swapped = load_image_dir(swapped)?;
    let find = |set: &[(String, FaceImage)], s: &str| set.iter().position(|(n, _)| n == s);
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    let mut xt = Vec::new();
    let mut labels = Vec::new();
    for (name, img) in &swapped {
        let (s, t) = split_swap_name(name, |s| find(&sources, s).is_some(), |t| find(&targets, t).is_some())
            .ok_or_else(|| Error::Argument(format!("cannot match swapped image '{name}' to a source and target")))?;
        ys.push(img.clone());
        xs.push(sources[find(&sources, s).expect("matched")].1.clone());
        xt.push(targets[find(&targets, t).expect("matched")].1.clone());
        labels.push(s.to_string());
    }
    if ys.is_empty() {
        return Err(Error::Argument("no swapped PNG images to evaluate".into()));
    }
    let gallery = IdentityGallery::new(
        sources
            .iter()
            .map(|(n, img)| (n.clone(), eval::unit(oracles.embed(img).data())))
            .collect(),
    )?;
    let probes: Vec<(String, Vec<f64>)> = labels
        .into_iter()
        .zip(&ys)
        .map(|(l, y)| (l, eval::unit(oracles.embed(y).data())))
        .collect();
    let fid = if ys.len() >= 2 {
        Some(eval::fid(&eval::fid_features(&ys, oracles), &eval::fid_features(&xt, oracles))?)
    } else {
        None
    };
    let report = MetricReport {
        id_retrieval: Some(eval::id_retrieval(&probes, &gallery)?),
        id_similarity: Some(eval::id_similarity(&ys, &xs, oracles)?),
        pose_error: Some(eval::pose_error(&ys, &xt, &ToyPoseEstimator)?),
        expression_error: Some(eval::expression_error(&ys, &xt, &ToyExpressionEstimator)?),
        fid,
        inversion: None,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::generator::GeneratorConfig;

    fn pipeline(kind: ManipulatorKind) -> Pipeline {
        let gen = GeneratorHandle::init(GeneratorConfig::toy(32, 8).unwrap(), 1).unwrap();
        let enc = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap(), 2).unwrap();
        let m = match kind {
            ManipulatorKind::Lcr => Manipulator::Lcr,
            ManipulatorKind::Ftm => Manipulator::Ftm(FtmParams::init(4, 8, 3)),
            ManipulatorKind::IdInjection => Manipulator::IdInjection(IdInjectionParams::init(4, 8, 8, 3)),
        };
        Pipeline::new(Arc::new(enc), gen, m).unwrap()
    }

    fn face(seed: u64) -> FaceImage {
        crate::train::SyntheticFaces::new(32, 4, seed).render(seed, 0)
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = face(3);
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let worst = img.pixels().max_abs_diff(back.pixels());
        assert!(worst <= 1.0 / 255.0 + 1e-12, "{worst}");
    }

    #[test]
    fn grayscale_and_sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&gray).unwrap();
        let deep = dir.path().join("d.png");
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(4, 4).save(&deep).unwrap();
        for p in [gray, deep] {
            let e = load_image(&p).unwrap_err();
            assert!(matches!(e, Error::Image { .. }), "{e}");
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains(p.to_str().unwrap()));
        }
    }

    #[test]
    fn missing_image_is_io_error() {
        let e = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }

    #[test]
    fn swap_shapes_and_resolution_check() {
        let p = pipeline(ManipulatorKind::Ftm);
        let r = p.swap(&face(1), &face(2)).unwrap();
        assert_eq!(r.transferred_codes.shape(), &[4, 8]);
        assert_eq!(r.image.resolution(), 32);
        assert!(r.timings.stage_sum() <= r.timings.total);
        let small = FaceImage::filled(16, [0.0; 3]).unwrap();
        assert!(matches!(p.swap(&small, &face(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn lcr_self_swap_equals_inversion() {
        let p = pipeline(ManipulatorKind::Lcr);
        let x = face(5);
        assert_eq!(p.swap(&x, &x).unwrap().image, p.invert(&x).unwrap());
    }

    #[test]
    fn incompatible_manipulator_is_capability_error() {
        let gen = GeneratorHandle::init(GeneratorConfig::toy(32, 8).unwrap(), 1).unwrap();
        let enc = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap(), 2).unwrap();
        let e = Pipeline::new(Arc::new(enc), gen, Manipulator::Ftm(FtmParams::init(6, 8, 0))).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn pair_parsing() {
        let pairs = parse_pairs("# header\na.png,b.png\n\n/x/c.png\td.png\n", Path::new("/data")).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].source, PathBuf::from("/data/a.png"));
        assert_eq!(pairs[1].source, PathBuf::from("/x/c.png"));
        assert!(parse_pairs("only-one\n", Path::new(".")).is_err());
    }

    #[test]
    fn repeated_pairs_get_distinct_outputs() {
        let p = |s: &str, t: &str| PairSpec {
            source: s.into(),
            target: t.into(),
        };
        let names = output_names(&[p("a.png", "b.png"), p("x/a.png", "b.png"), p("b.png", "a.png")]);
        assert_eq!(names, ["a_to_b.png", "a_to_b-1.png", "b_to_a.png"]);
    }

    #[test]
    fn swap_name_split_uses_known_stems() {
        let s = |n: &str| ["my_to_face", "a"].contains(&n);
        let t = |n: &str| ["b", "c_to_d"].contains(&n);
        assert_eq!(split_swap_name("my_to_face_to_b", s, t), Some(("my_to_face", "b")));
        assert_eq!(split_swap_name("a_to_c_to_d", s, t), Some(("a", "c_to_d")));
        assert_eq!(split_swap_name("q_to_b", s, t), None);
    }

    #[test]
    fn config_round_trip_and_relative_paths() {
        let text = "resolution = 64\nmanipulator = \"lcr\"\n[checkpoints]\nencoder = \"enc\"\n[train]\nsteps = 7\n";
        let cfg = PipelineConfig::from_toml(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.checkpoints.encoder, Some(PathBuf::from("/cfg/enc")));
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.manipulator, ManipulatorKind::Lcr);
        let again = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_config_values() {
        for text in ["resolution = 48\n", "manipulator = \"blend\"\n", "workers = 0\n", "colour = 1\n"] {
            let e = PipelineConfig::from_toml(text, Path::new(".")).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}: {e}");
        }
    }

    #[test]
    fn missing_checkpoint_path_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[checkpoints]\ngenerator = \"nope\"\n").unwrap();
        let e = PipelineConfig::load(&path).unwrap_err();
        assert!(matches!(e, Error::Io { .. }), "{e}");
    }
}
