//! Swap and inversion metrics.

use latentswap_autograd::Tape;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::losses::lpips_loss;
use crate::oracles::{OracleKind, OracleSet};
use crate::{Error, FaceImage, Result};

/// Default identity-similarity threshold below which a reconstruction
/// counts as failed.
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.3;

/// Relative size of a negative eigenvalue tolerated (and clamped) in the
/// FID square root.
pub const FID_EIGEN_TOLERANCE: f64 = 1e-6;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn compensated_mean(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    (compensated_sum(v) / n.max(1) as f64, n)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = compensated_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let na = compensated_sum(a.iter().map(|x| x * x)).sqrt();
    let nb = compensated_sum(b.iter().map(|x| x * x)).sqrt();
    dot / (na * nb)
}

/// Labelled unit-norm embeddings; labels may repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityGallery {
    items: Vec<(String, Vec<f64>)>,
}

impl IdentityGallery {
    pub fn new(items: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Argument("identity gallery is empty".into()));
        }
        let dim = items[0].1.len();
        for (i, (label, e)) in items.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::dim(format!("gallery item {i} ({label}) has width {}", e.len())));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation {
                    field: format!("gallery item {i} ({label})"),
                    reason: format!("embedding norm {norm} is not 1"),
                });
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Index of the most similar item; ties go to the lowest index.
    pub fn nearest(&self, probe: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (_, e)) in self.items.iter().enumerate() {
            let c = cosine(probe, e);
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }

    pub fn label(&self, i: usize) -> &str {
        &self.items[i].0
    }
}

/// Top-1 retrieval rate in percent: a probe hits when its nearest gallery
/// item carries the probe's true source label.
pub fn id_retrieval(probes: &[(String, Vec<f64>)], gallery: &IdentityGallery) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Argument("no probes to retrieve".into()));
    }
    let hits = probes
        .iter()
        .filter(|(label, e)| gallery.label(gallery.nearest(e)) == label)
        .count();
    Ok(100.0 * hits as f64 / probes.len() as f64)
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("{what}: {a} vs {b} images")));
    }
    if a == 0 {
        return Err(Error::Argument(format!("{what}: no images")));
    }
    Ok(())
}

/// Mean cosine similarity between recognizer embeddings of swapped faces and
/// their sources.
pub fn id_similarity(swapped: &[FaceImage], sources: &[FaceImage], oracles: &OracleSet) -> Result<f64> {
    check_lengths(swapped.len(), sources.len(), "id similarity")?;
    let sims = swapped.iter().zip(sources).map(|(y, x)| {
        cosine(oracles.embed(y).data(), oracles.embed(x).data())
    });
    Ok(compensated_mean(sims).0)
}

/// Pose or expression vector estimator.
pub trait VectorEstimator: Send + Sync {
    fn estimate(&self, image: &FaceImage) -> Result<Vec<f64>>;
}

/// Mean ℓ2 distance between estimator vectors of swapped and target faces.
pub fn vector_error(swapped: &[FaceImage], targets: &[FaceImage], est: &dyn VectorEstimator) -> Result<f64> {
    check_lengths(swapped.len(), targets.len(), "vector error")?;
    let mut dists = Vec::with_capacity(swapped.len());
    for (i, (y, t)) in swapped.iter().zip(targets).enumerate() {
        let wrap = |e: Error| Error::Numeric(format!("estimator failed on image {i}: {e}"));
        let a = est.estimate(y).map_err(wrap)?;
        let b = est.estimate(t).map_err(wrap)?;
        if a.len() != b.len() {
            return Err(Error::dim(format!("estimator vectors differ in width at image {i}")));
        }
        dists.push(compensated_sum(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q))).sqrt());
    }
    Ok(compensated_mean(dists).0)
}

pub fn pose_error(swapped: &[FaceImage], targets: &[FaceImage], est: &dyn VectorEstimator) -> Result<f64> {
    vector_error(swapped, targets, est)
}

pub fn expression_error(swapped: &[FaceImage], targets: &[FaceImage], est: &dyn VectorEstimator) -> Result<f64> {
    vector_error(swapped, targets, est)
}

/// Toy head-pose stand-in: intensity centroid and left/right, top/bottom
/// balance of the luminance.
pub struct ToyPoseEstimator;

impl VectorEstimator for ToyPoseEstimator {
    fn estimate(&self, image: &FaceImage) -> Result<Vec<f64>> {
        let r = image.resolution();
        let lum = |y: usize, x: usize| (image.get(y, x, 0) + image.get(y, x, 1) + image.get(y, x, 2)) / 3.0 + 1.0;
        let (mut m, mut mx, mut my, mut lr, mut tb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..r {
            for x in 0..r {
                let l = lum(y, x);
                m += l;
                mx += l * x as f64;
                my += l * y as f64;
                lr += if x < r / 2 { l } else { -l };
                tb += if y < r / 2 { l } else { -l };
            }
        }
        let m = m.max(1e-12);
        Ok(vec![mx / m, my / m, lr / m * r as f64, tb / m * r as f64])
    }
}

/// Toy expression stand-in: mean colour of a 4×4 grid over the lower half.
pub struct ToyExpressionEstimator;

impl VectorEstimator for ToyExpressionEstimator {
    fn estimate(&self, image: &FaceImage) -> Result<Vec<f64>> {
        let r = image.resolution();
        let cell = (r / 8).max(1);
        let mut out = Vec::with_capacity(16);
        for gy in 0..4 {
            for gx in 0..4 {
                let mut acc = 0.0;
                for y in r / 2 + gy * cell..(r / 2 + (gy + 1) * cell).min(r) {
                    for x in gx * 2 * cell..((gx * 2 + 2) * cell).min(r) {
                        acc += image.get(y, x, 0) - image.get(y, x, 2);
                    }
                }
                out.push(acc / (2 * cell * cell) as f64);
            }
        }
        Ok(out)
    }
}

fn mean_and_cov(rows: &[Vec<f64>], what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Argument(format!("{what}: FID needs at least 2 feature rows, got {}", rows.len())));
    }
    let d = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::dim(format!("{what}: row {i} has width {}, expected {d}", rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite feature")));
    }
    let n = rows.len() as f64;
    let mu = DVector::from_iterator(d, (0..d).map(|j| compensated_sum(rows.iter().map(|r| r[j])) / n));
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let s = compensated_sum(rows.iter().map(|r| (r[a] - mu[a]) * (r[b] - mu[b]))) / (n - 1.0);
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok((mu, cov))
}

fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let scale = sym.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let mut eig = sym.symmetric_eigen();
    for l in eig.eigenvalues.iter_mut() {
        if *l < -FID_EIGEN_TOLERANCE * scale {
            return Err(Error::Numeric(format!("{what} has eigenvalue {l}, not positive semi-definite")));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples).
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_and_cov(features_a, "first set")?;
    let (mu_b, cov_b) = mean_and_cov(features_b, "second set")?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::dim(format!("feature widths {} and {}", mu_a.len(), mu_b.len())));
    }
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), the latter symmetric PSD.
    let ea = psd_eigen(cov_a.clone(), "first covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = psd_eigen(&sqrt_a * &cov_b * &sqrt_a, "covariance product")?;
    let tr_sqrt = compensated_sum(inner.eigenvalues.iter().map(|l| l.sqrt()));
    let diff = &mu_a - &mu_b;
    let mean_term = compensated_sum(diff.iter().map(|v| v * v));
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Pooled feature-extractor activations used as FID features.
pub fn fid_features(images: &[FaceImage], oracles: &OracleSet) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|img| {
            let tape = Tape::new();
            let x = oracles.resize_var(OracleKind::Features, tape.constant(img.pixels().clone()));
            oracles
                .features
                .features(x)
                .into_iter()
                .flat_map(|f| f.global_avg_pool().value().data().to_vec())
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionMetrics {
    pub lpips: f64,
    pub mse: f64,
    /// Percent of pairs whose identity similarity is below the threshold.
    pub failure_rate: f64,
}

pub fn inversion_metrics(
    originals: &[FaceImage],
    reconstructions: &[FaceImage],
    oracles: &OracleSet,
    failure_threshold: f64,
) -> Result<InversionMetrics> {
    check_lengths(originals.len(), reconstructions.len(), "inversion metrics")?;
    let mut lp = Vec::new();
    let mut mse = Vec::new();
    let mut failures = 0usize;
    for (x, y) in originals.iter().zip(reconstructions) {
        let tape = Tape::new();
        let d = lpips_loss(tape.constant(x.pixels().clone()), tape.constant(y.pixels().clone()), oracles)?;
        lp.push(d.item());
        mse.push(x.mean_squared_error(y)?);
        if cosine(oracles.embed(x).data(), oracles.embed(y).data()) < failure_threshold {
            failures += 1;
        }
    }
    Ok(InversionMetrics {
        lpips: compensated_mean(lp).0,
        mse: compensated_mean(mse).0,
        failure_rate: 100.0 * failures as f64 / originals.len() as f64,
    })
}

/// Collected metrics; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id_retrieval: Option<f64>,
    pub id_similarity: Option<f64>,
    pub pose_error: Option<f64>,
    pub expression_error: Option<f64>,
    pub fid: Option<f64>,
    pub inversion: Option<InversionMetrics>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let pct = |name: &str, v: f64| {
            if (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Validation {
                    field: name.into(),
                    reason: format!("{v} is not a percentage"),
                })
            }
        };
        if let Some(v) = self.id_retrieval {
            pct("id_retrieval", v)?;
        }
        if let Some(inv) = self.inversion {
            pct("failure_rate", inv.failure_rate)?;
        }
        for (name, v) in self.entries() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is {v}")));
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let mut push = |k, v: Option<f64>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("id_retrieval", self.id_retrieval);
        push("id_similarity", self.id_similarity);
        push("pose", self.pose_error);
        push("expression", self.expression_error);
        push("fid", self.fid);
        push("lpips", self.inversion.map(|i| i.lpips));
        push("mse", self.inversion.map(|i| i.mse));
        push("failure_rate", self.inversion.map(|i| i.failure_rate));
        out
    }

    /// `name = value` lines in table order.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v:.6}\n"))
            .collect()
    }
}

/// Embeds each image through the recognizer.
pub fn embeddings(images: &[FaceImage], oracles: &OracleSet) -> Vec<Vec<f64>> {
    images.iter().map(|i| oracles.embed(i).into_data()).collect()
}

/// Unit-normalizes `v`.
pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::OracleSizes;
    use latentswap_autograd::Tensor;

    fn e(v: &[f64]) -> Vec<f64> {
        unit(v)
    }

    #[test]
    fn retrieval_self_gallery_is_perfect() {
        let items: Vec<_> = (0..5)
            .map(|i| (format!("id{i}"), e(&[(i as f64).cos(), (i as f64).sin(), 0.3])))
            .collect();
        let g = IdentityGallery::new(items.clone()).unwrap();
        assert_eq!(id_retrieval(&items, &g).unwrap(), 100.0);
    }

    #[test]
    fn retrieval_one_wrong_of_three() {
        let g = IdentityGallery::new(vec![
            ("a".into(), e(&[1.0, 0.0])),
            ("b".into(), e(&[0.0, 1.0])),
            ("c".into(), e(&[-1.0, 0.0])),
        ])
        .unwrap();
        let probes = vec![
            ("a".to_string(), e(&[0.9, 0.1])),
            ("b".to_string(), e(&[0.1, 0.9])),
            ("c".to_string(), e(&[0.2, 0.9])),
        ];
        assert!((id_retrieval(&probes, &g).unwrap() - 66.6667).abs() < 0.01);
    }

    #[test]
    fn retrieval_ties_go_to_lowest_index() {
        let g = IdentityGallery::new(vec![("x".into(), e(&[1.0, 0.0])), ("y".into(), e(&[1.0, 0.0]))]).unwrap();
        assert_eq!(g.nearest(&[1.0, 0.0]), 0);
    }

    #[test]
    fn empty_gallery() {
        assert!(matches!(IdentityGallery::new(vec![]), Err(Error::Argument(_))));
    }

    struct Fixed(Vec<f64>);
    impl VectorEstimator for Fixed {
        fn estimate(&self, image: &FaceImage) -> Result<Vec<f64>> {
            let shift = if image.get(0, 0, 0) > 0.0 { 1.0 } else { 0.0 };
            Ok(self.0.iter().map(|v| v + shift).collect())
        }
    }

    #[test]
    fn vector_error_root_three() {
        let a = FaceImage::filled(4, [0.5, 0.0, 0.0]).unwrap();
        let b = FaceImage::filled(4, [-0.5, 0.0, 0.0]).unwrap();
        let est = Fixed(vec![1.0, 2.0, 3.0]);
        let err = pose_error(&[a.clone(), a.clone()], &[b.clone(), b], &est).unwrap();
        assert!((err - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(expression_error(&[a.clone()], &[a], &est).unwrap(), 0.0);
    }

    #[test]
    fn fid_identical_and_symmetric() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.01]).collect();
        let b: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.5).cos(), (i as f64 * 0.9).sin() + 0.2, 0.1]).collect();
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
        assert!(matches!(fid(&a[..1], &b), Err(Error::Argument(_))));
    }

    #[test]
    fn inversion_identical_lists() {
        let o = OracleSet::toy(OracleSizes::uniform(16), 1);
        let imgs: Vec<FaceImage> = (0..3)
            .map(|k| {
                FaceImage::new(Tensor::new([3, 16, 16], (0..768).map(|i| ((i * (k + 1)) as f64 * 0.01).sin()).collect()))
                    .unwrap()
            })
            .collect();
        let m = inversion_metrics(&imgs, &imgs, &o, DEFAULT_FAILURE_THRESHOLD).unwrap();
        assert_eq!((m.lpips, m.mse, m.failure_rate), (0.0, 0.0, 0.0));
        assert!((id_similarity(&imgs, &imgs, &o).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_text_names() {
        let r = MetricReport {
            id_retrieval: Some(50.0),
            fid: Some(1.5),
            ..Default::default()
        };
        r.validate().unwrap();
        assert_eq!(r.to_text(), "id_retrieval = 50.000000\nfid = 1.500000\n");
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
