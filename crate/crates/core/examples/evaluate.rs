//! Swap metrics on procedural faces: retrieval, identity similarity,
//! pose and expression error, FID and inversion quality.
//!
//! `cargo run --release --example evaluate`

use latentswap::eval::{
    embeddings, expression_error, fid, fid_features, id_retrieval, id_similarity, inversion_metrics, pose_error,
    unit, IdentityGallery, MetricReport, ToyExpressionEstimator, ToyPoseEstimator, DEFAULT_FAILURE_THRESHOLD,
};
use latentswap::oracles::{OracleSet, OracleSizes};
use latentswap::train::SyntheticFaces;
use latentswap::FaceImage;

fn main() -> latentswap::Result<()> {
    let faces = SyntheticFaces::new(32, 6, 1);
    let oracles = OracleSet::toy(OracleSizes::uniform(32), 1);
    let sources: Vec<FaceImage> = (0..6).map(|i| faces.render(i, 0)).collect();
    let targets: Vec<FaceImage> = (0..6).map(|i| faces.render((i + 1) % 6, 1)).collect();
    // Stand-in "swaps": the source identity re-rendered in another variant.
    let swapped: Vec<FaceImage> = (0..6).map(|i| faces.render(i, 7)).collect();

    let gallery = IdentityGallery::new(
        embeddings(&sources, &oracles)
            .into_iter()
            .enumerate()
            .map(|(i, e)| (format!("id{i}"), unit(&e)))
            .collect(),
    )?;
    let probes: Vec<(String, Vec<f64>)> = embeddings(&swapped, &oracles)
        .into_iter()
        .enumerate()
        .map(|(i, e)| (format!("id{i}"), unit(&e)))
        .collect();

    let report = MetricReport {
        id_retrieval: Some(id_retrieval(&probes, &gallery)?),
        id_similarity: Some(id_similarity(&swapped, &sources, &oracles)?),
        pose_error: Some(pose_error(&swapped, &targets, &ToyPoseEstimator)?),
        expression_error: Some(expression_error(&swapped, &targets, &ToyExpressionEstimator)?),
        fid: Some(fid(&fid_features(&swapped, &oracles), &fid_features(&targets, &oracles))?),
        inversion: Some(inversion_metrics(&sources, &swapped, &oracles, DEFAULT_FAILURE_THRESHOLD)?),
    };
    report.validate()?;
    print!("{}", report.to_text());
    Ok(())
}
