//! Two-stage training.
//!
//! Stage 1 fits the encoder so that `synthesize(encode(x))` reconstructs `x`
//! under the inversion objective. Stage 2 freezes encoder and generator and
//! fits a manipulator under the swap objective. In stage 2 the
//! reconstructions `x̂_s`, `x̂_t` are self-swaps routed through the
//! manipulator, so the reconstruction term constrains it as well.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latentswap_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::generator::{AuxiliarySample, GeneratorHandle};
use crate::latent::{Encoded, LatentSpace};
use crate::losses::{l_inv, l_swap, LossReport, LossWeightsInv, LossWeightsSwap, SwapTerms};
use crate::oracles::OracleSet;
use crate::params::{Bound, ParamSet};
use crate::transfer::Manipulator;
use crate::{Error, FaceImage, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub inv_weights: LossWeightsInv,
    pub swap_weights: LossWeightsSwap,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Share of stage-2 pairs that use one image as source and target.
    pub same_pair_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch: 1,
            steps: 100,
            seed: 0,
            inv_weights: LossWeightsInv::default(),
            swap_weights: LossWeightsSwap::default(),
            checkpoint_interval: 0,
            checkpoint_dir: None,
            same_pair_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, reason: &str| Error::Validation {
            field: field.into(),
            reason: reason.into(),
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be finite and non-negative"));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta", "moment decays must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.same_pair_fraction) {
            return Err(invalid("same_pair_fraction", "must lie in [0, 1]"));
        }
        self.inv_weights.validate()?;
        self.swap_weights.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()));
        }
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.expect(name);
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *p -= update;
                }
            }
        }
    }
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
}

/// Per-step history of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub wall_clock_s: f64,
}

impl TrainLog {
    /// Totals per step.
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }

    /// Values of one term per step.
    pub fn term(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.loss.term(name).unwrap_or(f64::NAN))
            .collect()
    }

    /// Mean of the first `window` totals.
    pub fn smoothed_initial(&self, window: usize) -> f64 {
        window_mean(&self.totals(), window, false)
    }

    /// Mean of the last `window` totals.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        window_mean(&self.totals(), window, true)
    }

    /// One JSON object per line, one line per step.
    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mean of the first (or last) `window` entries.
pub fn window_mean(values: &[f64], window: usize, tail: bool) -> f64 {
    let w = window.min(values.len()).max(1);
    let slice = if tail { &values[values.len().saturating_sub(w)..] } else { &values[..w.min(values.len())] };
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}

/// Procedurally drawn face-like images: each identity fixes face shape,
/// skin, hair and eye spacing; each variant jitters pose, expression and
/// lighting.
#[derive(Clone, Debug)]
pub struct SyntheticFaces {
    pub resolution: usize,
    pub identities: u64,
    pub seed: u64,
}

struct Look {
    skin: [f64; 3],
    hair: [f64; 3],
    background: [f64; 3],
    face_w: f64,
    face_h: f64,
    eye_gap: f64,
    eye_size: f64,
    hair_line: f64,
}

fn smooth(edge: f64, x: f64) -> f64 {
    // 1 inside (x < edge), 0 outside, soft over a short band.
    (((edge - x) / 0.04) + 0.5).clamp(0.0, 1.0)
}

impl SyntheticFaces {
    pub fn new(resolution: usize, identities: u64, seed: u64) -> Self {
        Self {
            resolution,
            identities: identities.max(1),
            seed,
        }
    }

    fn look(&self, identity: u64) -> Look {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ identity.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut c = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Look {
            skin: [c(0.2, 0.8), c(0.0, 0.5), c(-0.3, 0.3)],
            hair: [c(-0.9, 0.3), c(-0.9, 0.1), c(-0.9, 0.0)],
            background: [c(-0.8, 0.8), c(-0.8, 0.8), c(-0.8, 0.8)],
            face_w: c(0.26, 0.36),
            face_h: c(0.34, 0.44),
            eye_gap: c(0.10, 0.17),
            eye_size: c(0.035, 0.06),
            hair_line: c(0.18, 0.32),
        }
    }

    /// Variant `variant` of `identity`.
    pub fn render(&self, identity: u64, variant: u64) -> FaceImage {
        let look = self.look(identity % self.identities);
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed.wrapping_add(1) ^ identity.rotate_left(17) ^ variant.wrapping_mul(0xbf58_476d_1ce4_e5b9),
        );
        let dx: f64 = rng.random_range(-0.04..0.04);
        let dy: f64 = rng.random_range(-0.04..0.04);
        let mouth_open: f64 = rng.random_range(0.01..0.05);
        let light: f64 = rng.random_range(-0.15..0.15);
        let r = self.resolution;
        let mut data = vec![0.0; 3 * r * r];
        for y in 0..r {
            for x in 0..r {
                let u = (x as f64 + 0.5) / r as f64 - 0.5 - dx;
                let v = (y as f64 + 0.5) / r as f64 - 0.52 - dy;
                let face = smooth(1.0, (u / look.face_w).powi(2) + (v / look.face_h).powi(2));
                let hair = face * smooth(-look.hair_line, v) + (1.0 - face) * smooth(0.0, v) * smooth(1.3, (u / (look.face_w * 1.2)).powi(2) + ((v + 0.05) / (look.face_h * 1.15)).powi(2));
                let eye = |cx: f64| smooth(1.0, ((u - cx) / (look.eye_size * 1.4)).powi(2) + ((v + 0.06) / look.eye_size).powi(2));
                let eyes = (eye(-look.eye_gap) + eye(look.eye_gap)).min(1.0) * face;
                let mouth = smooth(1.0, (u / 0.1).powi(2) + ((v - 0.2) / mouth_open).powi(2)) * face;
                let shade = light * u * 2.0;
                for c in 0..3 {
                    let mut val = look.background[c] * (1.0 - face) + (look.skin[c] + shade) * face;
                    val = val * (1.0 - hair) + look.hair[c] * hair;
                    val = val * (1.0 - eyes) - 0.9 * eyes;
                    val = val * (1.0 - mouth) + [0.6, -0.5, -0.5][c] * mouth;
                    data[(c * r + y) * r + x] = val.clamp(-1.0, 1.0);
                }
            }
        }
        FaceImage::new(Tensor::new([3, r, r], data)).expect("rendered faces stay in range")
    }
}

/// A weighted mix of image sources.
pub enum FaceSource {
    Synthetic(SyntheticFaces),
    Images(Vec<FaceImage>),
    Auxiliary(Vec<AuxiliarySample>),
}

impl FaceSource {
    fn draw(&self, rng: &mut ChaCha8Rng) -> FaceImage {
        match self {
            FaceSource::Synthetic(s) => {
                let id = rng.random_range(0..s.identities);
                s.render(id, rng.random())
            }
            FaceSource::Images(v) => v[rng.random_range(0..v.len())].clone(),
            FaceSource::Auxiliary(v) => v[rng.random_range(0..v.len())].image.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            FaceSource::Synthetic(_) => false,
            FaceSource::Images(v) => v.is_empty(),
            FaceSource::Auxiliary(v) => v.is_empty(),
        }
    }
}

/// Seeded stream of training faces and face pairs.
pub struct FaceStream {
    sources: Vec<(FaceSource, f64)>,
    rng: ChaCha8Rng,
}

impl FaceStream {
    pub fn new(sources: Vec<(FaceSource, f64)>, seed: u64) -> Result<Self> {
        let sources: Vec<_> = sources.into_iter().filter(|(s, w)| *w > 0.0 && !s.is_empty()).collect();
        if sources.is_empty() {
            return Err(Error::Argument("training data stream has no non-empty source".into()));
        }
        Ok(Self {
            sources,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_face(&mut self) -> FaceImage {
        let total: f64 = self.sources.iter().map(|(_, w)| w).sum();
        let mut pick = self.rng.random_range(0.0..total);
        for (s, w) in &self.sources {
            if pick < *w {
                return s.draw(&mut self.rng);
            }
            pick -= w;
        }
        self.sources.last().expect("non-empty").0.draw(&mut self.rng)
    }

    /// A `(source, target)` pair; identical with probability `same_fraction`.
    pub fn next_pair(&mut self, same_fraction: f64) -> (FaceImage, FaceImage) {
        let same = self.rng.random_bool(same_fraction);
        let s = self.next_face();
        if same {
            (s.clone(), s)
        } else {
            (s, self.next_face())
        }
    }
}

fn check_report(step: usize, report: &LossReport) -> Result<()> {
    match report.non_finite_term() {
        None => Ok(()),
        Some(term) => Err(Error::Numeric(format!(
            "step {step}: loss term '{term}' is not finite"
        ))),
    }
}

fn average_reports(reports: &[LossReport]) -> LossReport {
    let mut out = reports[0].clone();
    let n = reports.len() as f64;
    for (k, v) in out.terms.iter_mut() {
        *v = reports.iter().map(|r| r.terms[k]).sum::<f64>() / n;
    }
    out.total = reports.iter().map(|r| r.total).sum::<f64>() / n;
    out
}

fn average_grads(grads: Vec<ParamSet>) -> ParamSet {
    let n = grads.len() as f64;
    let mut iter = grads.into_iter();
    let mut acc = iter.next().expect("at least one sample");
    for g in iter {
        for (name, t) in acc.iter_mut() {
            t.add_assign(g.expect(name));
        }
    }
    if n > 1.0 {
        for (_, t) in acc.iter_mut() {
            *t = t.scale(1.0 / n);
        }
    }
    acc
}

/// Runs the optimisation loop shared by both stages.
fn run<F, S>(
    params: &mut ParamSet,
    cfg: &TrainConfig,
    mut draw: impl FnMut() -> S,
    sample_step: F,
    mut save: impl FnMut(&ParamSet, &Path) -> Result<()>,
) -> Result<TrainLog>
where
    S: Send + Sync,
    F: Fn(&ParamSet, &S) -> Result<(LossReport, ParamSet)> + Sync,
{
    cfg.validate()?;
    let mut adam = Adam::new(params, cfg);
    let started = Instant::now();
    let mut log = TrainLog {
        seed: cfg.seed,
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch: Vec<S> = (0..cfg.batch).map(|_| draw()).collect();
        let snapshot: &ParamSet = params;
        let results: Vec<Result<(LossReport, ParamSet)>> =
            batch.par_iter().map(|s| sample_step(snapshot, s)).collect();
        let mut reports = Vec::with_capacity(cfg.batch);
        let mut grads = Vec::with_capacity(cfg.batch);
        for r in results {
            let (report, g) = r?;
            check_report(step, &report)?;
            reports.push(report);
            grads.push(g);
        }
        let grads = average_grads(grads);
        let grad_norm = grads.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {step}: gradient is not finite")));
        }
        adam.step(params, &grads);
        log.records.push(StepRecord {
            step,
            loss: average_reports(&reports),
            grad_norm,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save(params, &dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }
    log.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Stage 1: fits `encoder` to invert `gen` on faces from `data`.
pub fn train_hierfe(
    data: &mut FaceStream,
    gen: &GeneratorHandle,
    oracles: &OracleSet,
    encoder: EncoderState,
    cfg: &TrainConfig,
) -> Result<(EncoderState, TrainLog)> {
    let ecfg = encoder.config().clone();
    if ecfg.resolution != gen.resolution() || ecfg.code_dim != gen.code_dim() {
        return Err(Error::Capability(format!(
            "encoder ({}px, D={}) does not match generator ({}px, D={})",
            ecfg.resolution,
            ecfg.code_dim,
            gen.resolution(),
            gen.code_dim()
        )));
    }
    if ecfg.latent_space == LatentSpace::WPlusPlus && !gen.accepts_external_constant() {
        return Err(Error::Capability(
            "W++ training needs a generator that accepts an external constant".into(),
        ));
    }
    let mut params = encoder.params().clone();
    let template = encoder.clone();
    let w = cfg.inv_weights;
    let log = run(
        &mut params,
        cfg,
        || data.next_face(),
        |p, x: &FaceImage| {
            let tape = Tape::new();
            let enc_bound = p.bind(&tape, true);
            let gen_bound = gen.params().bind(&tape, false);
            let xv = tape.constant(x.pixels().clone());
            let out = template.graph(&enc_bound, xv);
            let x_hat = gen.synthesis_graph(&gen_bound, out.constant, out.codes);
            let obj = l_inv(xv, x_hat, oracles, &w)?;
            let grads = tape.backward(obj.total);
            Ok((obj.report, enc_bound.gradients(&grads)))
        },
        |p, dir| EncoderState::from_params(ecfg.clone(), p.clone())?.save(dir),
    )?;
    Ok((EncoderState::from_params(ecfg, params)?, log))
}

struct EncodedPair {
    x_s: FaceImage,
    x_t: FaceImage,
    e_s: Encoded,
    e_t: Encoded,
}

/// Stage 2: fits `manipulator` with the encoder and generator frozen.
pub fn train_ftm(
    pairs: &mut FaceStream,
    encoder: &EncoderState,
    gen: &GeneratorHandle,
    oracles: &OracleSet,
    manipulator: Manipulator,
    cfg: &TrainConfig,
) -> Result<(Manipulator, TrainLog)> {
    let mut params = manipulator
        .params()
        .cloned()
        .ok_or_else(|| Error::Argument("latent code replacement has nothing to train".into()))?;
    let n_high = encoder.config().high_code_count()?;
    manipulator.check_compatible(n_high, encoder.config().code_dim)?;
    if encoder.config().latent_space == LatentSpace::WPlusPlus && !gen.accepts_external_constant() {
        return Err(Error::Capability(
            "W++ swapping needs a generator that accepts an external constant".into(),
        ));
    }
    let w = cfg.swap_weights;
    let same = cfg.same_pair_fraction;
    let mut draw_err = None;
    let log = run(
        &mut params,
        cfg,
        || {
            let (x_s, x_t) = pairs.next_pair(same);
            let enc = |x: &FaceImage| encoder.encode(x);
            match (enc(&x_s), enc(&x_t)) {
                (Ok(e_s), Ok(e_t)) => Some(EncodedPair { x_s, x_t, e_s, e_t }),
                (Err(e), _) | (_, Err(e)) => {
                    draw_err.get_or_insert(e);
                    None
                }
            }
        },
        |p, pair: &Option<EncodedPair>| {
            let pair = pair
                .as_ref()
                .ok_or_else(|| Error::Numeric("encoding a training pair failed".into()))?;
            let tape = Tape::new();
            let m_bound = p.bind(&tape, true);
            let gen_bound = gen.params().bind(&tape, false);
            let c = |t: Tensor| tape.constant(t);
            let (hs, ht) = (c(pair.e_s.high_codes()), c(pair.e_t.high_codes()));
            let (ls, lt) = (c(pair.e_s.low_codes()), c(pair.e_t.low_codes()));
            let cs = pair.e_s.constant_input().cloned().map(c);
            let ct = pair.e_t.constant_input().cloned().map(c);
            let render = |constant, low, high| render_codes(gen, &gen_bound, constant, low, high);
            let l_s2t = manipulator.graph(Some(&m_bound), hs, ht);
            let terms = SwapTerms {
                x_s: c(pair.x_s.pixels().clone()),
                x_t: c(pair.x_t.pixels().clone()),
                x_hat_s: render(cs, ls, manipulator.graph(Some(&m_bound), hs, hs)),
                x_hat_t: render(ct, lt, manipulator.graph(Some(&m_bound), ht, ht)),
                y_s2t: render(ct, lt, l_s2t),
                l_s_high: hs,
                l_s2t,
            };
            let obj = l_swap(&terms, oracles, &w)?;
            let grads = tape.backward(obj.total);
            Ok((obj.report, m_bound.gradients(&grads)))
        },
        |p, dir| {
            let mut m = manipulator.clone();
            *m.params_mut().expect("trainable") = p.clone();
            save_manipulator(&m, dir)
        },
    );
    if let Some(e) = draw_err {
        return Err(e);
    }
    let log = log?;
    let mut trained = manipulator;
    *trained.params_mut().expect("trainable manipulator") = params;
    Ok((trained, log))
}

/// Writes a trainable manipulator's checkpoint.
pub fn save_manipulator(m: &Manipulator, dir: &Path) -> Result<()> {
    match m {
        Manipulator::Ftm(p) => p.save(dir),
        Manipulator::IdInjection(p) => p.save(dir),
        Manipulator::Lcr => Err(Error::Argument("latent code replacement has no checkpoint".into())),
    }
}

fn render_codes<'t>(
    gen: &GeneratorHandle,
    bound: &Bound<'t>,
    constant: Option<Var<'t>>,
    low: Var<'t>,
    high: Var<'t>,
) -> Var<'t> {
    gen.synthesis_graph(bound, constant, Var::concat(&[low, high]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new([2], vec![0.5, -3.0]));
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&p, &cfg);
        adam.step(&mut p, &g);
        let w = p.expect("w").data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([3], vec![0.0, -0.0, 2.5]));
        let before = p.checksum();
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.0]));
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        Adam::new(&p, &cfg).step(&mut p, &g);
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn synthetic_faces_are_seeded() {
        let s = SyntheticFaces::new(32, 10, 3);
        assert_eq!(s.render(2, 5), s.render(2, 5));
        assert_ne!(s.render(2, 5), s.render(3, 5));
        assert_ne!(s.render(2, 5), s.render(2, 6));
    }

    #[test]
    fn pair_stream_mixes_same_pairs() {
        let mut st = FaceStream::new(vec![(FaceSource::Synthetic(SyntheticFaces::new(16, 50, 1)), 1.0)], 9).unwrap();
        let same = (0..200).filter(|_| {
            let (a, b) = st.next_pair(0.2);
            a == b
        });
        let n = same.count();
        assert!((20..=60).contains(&n), "{n} same pairs out of 200");
    }

    #[test]
    fn window_means() {
        let v = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(window_mean(&v, 2, false), 3.0);
        assert_eq!(window_mean(&v, 2, true), 1.0);
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainConfig {
            batch: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Validation { .. })));
    }
}

