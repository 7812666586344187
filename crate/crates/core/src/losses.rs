//! Loss terms and the two training objectives.
//!
//! Distances:
//!
//! | term    | definition                                        |
//! |---------|---------------------------------------------------|
//! | `rec`   | `sqrt(mean((x − x̂)²))` over pixels                |
//! | `lpips` | `sqrt(mean((F(x) − F(x̂))²))` over all feature maps |
//! | `id`    | `1 − cos(R(x), R(x̂))`                             |
//! | `ldm`   | `sqrt(Σ (P(x) − P(x̂))²)` over landmark coordinates |
//! | `norm`  | `sqrt(Σ (L_s^high − L_s2t)²)`                      |
//!
//! Every model input is resized through [`OracleSet::resize_var`].

use indexmap::IndexMap;
use latentswap_autograd::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::oracles::{OracleKind, OracleSet};
use crate::{Error, FaceImage, Result};

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pixel reconstruction distance.
pub fn rec_loss<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_shape(&x, &y, "rec")?;
    Ok(x.sub(&y).square().mean().sqrt())
}

/// Perceptual distance between feature stacks.
pub fn lpips_loss<'t>(x: Var<'t>, y: Var<'t>, oracles: &OracleSet) -> Result<Var<'t>> {
    same_shape(&x, &y, "lpips")?;
    let fx = oracles.features.features(oracles.resize_var(OracleKind::Features, x));
    let fy = oracles.features.features(oracles.resize_var(OracleKind::Features, y));
    let mut count = 0usize;
    let mut acc: Option<Var<'t>> = None;
    for (a, b) in fx.iter().zip(&fy) {
        count += a.len();
        let s = a.sub(b).square().sum();
        acc = Some(match acc {
            None => s,
            Some(prev) => prev.add(&s),
        });
    }
    let acc = acc.ok_or_else(|| Error::Config("feature extractor returned no features".into()))?;
    Ok(acc.scale(1.0 / count as f64).sqrt())
}

/// `1 − cos` of two embedding vectors. Fails on a zero-norm embedding.
pub fn cosine_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "id")?;
    let na = a.square().sum().sqrt();
    let nb = b.square().sum().sqrt();
    if na.item() < 1e-12 || nb.item() < 1e-12 {
        return Err(Error::Numeric("identity embedding has zero norm".into()));
    }
    let cos = a.mul(&b).sum().div(&na.mul(&nb));
    Ok(cos.neg().add_scalar(1.0))
}

/// Identity distance through the recognizer.
pub fn id_loss<'t>(x: Var<'t>, y: Var<'t>, oracles: &OracleSet) -> Result<Var<'t>> {
    same_shape(&x, &y, "id")?;
    let ex = oracles.recognizer.embed(oracles.resize_var(OracleKind::Recognizer, x));
    let ey = oracles.recognizer.embed(oracles.resize_var(OracleKind::Recognizer, y));
    cosine_distance(ex, ey)
}

/// Unnormalized ℓ2 between two landmark sets.
pub fn landmark_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "ldm")?;
    Ok(a.sub(&b).square().sum().sqrt())
}

/// Landmark distance through the predictor.
pub fn ldm_loss<'t>(x: Var<'t>, y: Var<'t>, oracles: &OracleSet) -> Result<Var<'t>> {
    same_shape(&x, &y, "ldm")?;
    let px = oracles.landmarks.landmarks(oracles.resize_var(OracleKind::Landmarks, x));
    let py = oracles.landmarks.landmarks(oracles.resize_var(OracleKind::Landmarks, y));
    landmark_distance(px, py)
}

/// Unnormalized ℓ2 between source high codes and transferred codes.
pub fn norm_loss<'t>(l_s_high: Var<'t>, l_s2t: Var<'t>) -> Result<Var<'t>> {
    same_shape(&l_s_high, &l_s2t, "norm")?;
    Ok(l_s_high.sub(&l_s2t).square().sum().sqrt())
}

fn check_weights(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, w) in pairs {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::Validation {
                field: format!("weight {name}"),
                reason: format!("{w} is not a finite non-negative number"),
            });
        }
    }
    Ok(())
}

/// Weights of the inversion objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeightsInv {
    pub rec: f64,
    pub lpips: f64,
    pub id: f64,
    pub ldm: f64,
}

impl Default for LossWeightsInv {
    fn default() -> Self {
        Self {
            rec: 1.0,
            lpips: 0.8,
            id: 1.0,
            ldm: 1000.0,
        }
    }
}

impl LossWeightsInv {
    pub fn validate(&self) -> Result<()> {
        check_weights(&self.pairs())
    }

    fn pairs(&self) -> [(&'static str, f64); 4] {
        [("rec", self.rec), ("lpips", self.lpips), ("id", self.id), ("ldm", self.ldm)]
    }

    /// Report for already computed term values.
    pub fn report(&self, rec: f64, lpips: f64, id: f64, ldm: f64) -> LossReport {
        LossReport::combine(&self.pairs(), &[rec, lpips, id, ldm])
    }
}

/// Weights of the swap objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeightsSwap {
    pub rec: f64,
    pub lpips: f64,
    pub id: f64,
    pub ldm: f64,
    pub norm: f64,
}

impl Default for LossWeightsSwap {
    fn default() -> Self {
        Self {
            rec: 8.0,
            lpips: 32.0,
            id: 24.0,
            ldm: 100_000.0,
            norm: 32.0,
        }
    }
}

impl LossWeightsSwap {
    pub fn validate(&self) -> Result<()> {
        check_weights(&self.pairs())
    }

    fn pairs(&self) -> [(&'static str, f64); 5] {
        [
            ("rec", self.rec),
            ("lpips", self.lpips),
            ("id", self.id),
            ("ldm", self.ldm),
            ("norm", self.norm),
        ]
    }

    pub fn report(&self, rec: f64, lpips: f64, id: f64, ldm: f64, norm: f64) -> LossReport {
        LossReport::combine(&self.pairs(), &[rec, lpips, id, ldm, norm])
    }
}

/// Named term values, their weights and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: IndexMap<String, f64>,
    pub weights: IndexMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    fn combine(weights: &[(&str, f64)], values: &[f64]) -> Self {
        let mut terms = IndexMap::new();
        let mut ws = IndexMap::new();
        let mut total = 0.0;
        for (&(name, w), &v) in weights.iter().zip(values) {
            terms.insert(name.to_string(), v);
            ws.insert(name.to_string(), w);
            total += w * v;
        }
        Self {
            terms,
            weights: ws,
            total,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// `w · term` for one term.
    pub fn contribution(&self, name: &str) -> Option<f64> {
        Some(self.terms.get(name)? * self.weights.get(name)?)
    }

    /// Relative gap between `total` and the weighted sum of the terms.
    pub fn weighted_sum_error(&self) -> f64 {
        let sum: f64 = self.terms.keys().filter_map(|k| self.contribution(k)).sum();
        (sum - self.total).abs() / sum.abs().max(1e-300)
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&str> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
            .or((!self.total.is_finite()).then_some("total"))
    }

    /// One `name=value` line per term, then `total=value`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.terms {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("total={}\n", self.total));
        s
    }
}

/// A differentiable total plus its report.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
}

fn weighted_total<'t>(terms: &[(Var<'t>, f64)]) -> Var<'t> {
    let mut total = terms[0].0.scale(terms[0].1);
    for (v, w) in &terms[1..] {
        total = total.add(&v.scale(*w));
    }
    total
}

/// Inversion objective `λ1·rec + λ2·lpips + λ3·id + λ4·ldm`.
pub fn l_inv<'t>(x: Var<'t>, x_hat: Var<'t>, oracles: &OracleSet, w: &LossWeightsInv) -> Result<Objective<'t>> {
    w.validate()?;
    let rec = rec_loss(x, x_hat)?;
    let lpips = lpips_loss(x, x_hat, oracles)?;
    let id = id_loss(x, x_hat, oracles)?;
    let ldm = ldm_loss(x, x_hat, oracles)?;
    let report = w.report(rec.item(), lpips.item(), id.item(), ldm.item());
    let total = weighted_total(&[(rec, w.rec), (lpips, w.lpips), (id, w.id), (ldm, w.ldm)]);
    Ok(Objective { total, report })
}

/// Inputs of the swap objective.
pub struct SwapTerms<'t> {
    pub x_s: Var<'t>,
    pub x_t: Var<'t>,
    pub x_hat_s: Var<'t>,
    pub x_hat_t: Var<'t>,
    pub y_s2t: Var<'t>,
    pub l_s_high: Var<'t>,
    pub l_s2t: Var<'t>,
}

/// Swap objective
/// `φ1·(rec_s + rec_t) + φ2·lpips(x_t, y) + φ3·id(x_s, y) + φ4·ldm(x_t, y) + φ5·norm`.
pub fn l_swap<'t>(t: &SwapTerms<'t>, oracles: &OracleSet, w: &LossWeightsSwap) -> Result<Objective<'t>> {
    w.validate()?;
    let rec = rec_loss(t.x_s, t.x_hat_s)?.add(&rec_loss(t.x_t, t.x_hat_t)?);
    let lpips = lpips_loss(t.x_t, t.y_s2t, oracles)?;
    let id = id_loss(t.x_s, t.y_s2t, oracles)?;
    let ldm = ldm_loss(t.x_t, t.y_s2t, oracles)?;
    let norm = norm_loss(t.l_s_high, t.l_s2t)?;
    let report = w.report(rec.item(), lpips.item(), id.item(), ldm.item(), norm.item());
    let total = weighted_total(&[
        (rec, w.rec),
        (lpips, w.lpips),
        (id, w.id),
        (ldm, w.ldm),
        (norm, w.norm),
    ]);
    Ok(Objective { total, report })
}

/// [`l_inv`] on plain images.
pub fn l_inv_images(x: &FaceImage, x_hat: &FaceImage, oracles: &OracleSet, w: &LossWeightsInv) -> Result<LossReport> {
    let tape = Tape::new();
    let o = l_inv(
        tape.constant(x.pixels().clone()),
        tape.constant(x_hat.pixels().clone()),
        oracles,
        w,
    )?;
    Ok(o.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::OracleSizes;
    use latentswap_autograd::Tensor;

    fn oracles() -> OracleSet {
        OracleSet::toy(OracleSizes::uniform(16), 5)
    }

    fn image(k: f64) -> Tensor {
        Tensor::new([3, 16, 16], (0..768).map(|i| (i as f64 * k).sin() * 0.8).collect())
    }

    #[test]
    fn rec_constant_offset() {
        let tape = Tape::new();
        let x = tape.constant(image(0.3));
        let y = x.add_scalar(0.1);
        assert!((rec_loss(x, y).unwrap().item() - 0.1).abs() < 1e-12);
        assert_eq!(rec_loss(x, x).unwrap().item(), 0.0);
        assert_eq!(rec_loss(x, y).unwrap().item(), rec_loss(y, x).unwrap().item());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([3]));
        let b = tape.constant(Tensor::zeros([4]));
        assert!(matches!(rec_loss(a, b), Err(Error::Dimension(_))));
        assert!(matches!(norm_loss(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_cases() {
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(Tensor::from_slice([d.len()], d));
        let e = |a: &[f64], b: &[f64]| cosine_distance(v(a), v(b)).unwrap().item();
        assert!(e(&[1.0, 0.0], &[1.0, 0.0]).abs() < 1e-15);
        assert!((e(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((e(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(v(&[0.0, 0.0]), v(&[1.0, 0.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn landmark_pythagoras() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new([3, 2], vec![1.0, 1.0, 5.0, 5.0, 9.0, 2.0]));
        let b = tape.constant(Tensor::new([3, 2], vec![1.0, 1.0, 8.0, 9.0, 9.0, 2.0]));
        assert!((landmark_distance(a, b).unwrap().item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn norm_homogeneity() {
        let tape = Tape::new();
        let a = tape.constant(image(0.2).reshape([48, 16]));
        let b = tape.constant(image(0.9).reshape([48, 16]));
        let base = norm_loss(a, b).unwrap().item();
        let scaled = norm_loss(a.scale(-3.0), b.scale(-3.0)).unwrap().item();
        assert!((scaled - 3.0 * base).abs() < 1e-10 * base);
    }

    #[test]
    fn identical_images_give_zero_objectives() {
        let o = oracles();
        let tape = Tape::new();
        let x = tape.constant(image(0.41));
        let inv = l_inv(x, x, &o, &LossWeightsInv::default()).unwrap();
        assert!(inv.report.total.abs() < 1e-12);
        let codes = tape.constant(Tensor::full([4, 8], 0.3));
        let t = SwapTerms {
            x_s: x,
            x_t: x,
            x_hat_s: x,
            x_hat_t: x,
            y_s2t: x,
            l_s_high: codes,
            l_s2t: codes,
        };
        assert!(l_swap(&t, &o, &LossWeightsSwap::default()).unwrap().report.total.abs() < 1e-12);
    }

    #[test]
    fn default_weight_arithmetic() {
        let inv = LossWeightsInv::default().report(0.1, 0.2, 0.3, 0.001);
        assert!((inv.total - 1.56).abs() < 1e-12);
        let swap = LossWeightsSwap::default().report(0.1, 0.1, 0.1, 1e-5, 0.1);
        assert!((swap.total - 10.6).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_drops_term() {
        let w = LossWeightsInv {
            ldm: 0.0,
            ..Default::default()
        };
        let r = w.report(0.1, 0.2, 0.3, 123.0);
        assert!((r.total - (0.1 + 0.16 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeightsSwap {
            id: -1.0,
            ..Default::default()
        };
        assert!(matches!(w.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn report_text() {
        let r = LossWeightsInv::default().report(0.5, 0.0, 0.25, 0.0);
        assert_eq!(r.to_text(), "rec=0.5\nlpips=0\nid=0.25\nldm=0\ntotal=0.75\n");
    }
}
