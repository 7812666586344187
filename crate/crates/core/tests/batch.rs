use std::fs;
use std::path::Path;
use std::sync::Arc;

use latentswap::encoder::{EncoderConfig, EncoderState};
use latentswap::generator::{GeneratorConfig, GeneratorHandle};
use latentswap::pipeline::{batch_generate, save_image, Pipeline, RowStatus, MANIFEST_FILE};
use latentswap::train::SyntheticFaces;
use latentswap::transfer::{FtmParams, Manipulator};
use latentswap::{Error, LatentSpace};

fn pipeline() -> Pipeline {
    let gen = GeneratorHandle::init(GeneratorConfig::toy(32, 8).unwrap(), 1).unwrap();
    let enc = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus).unwrap(), 2).unwrap();
    Pipeline::new(Arc::new(enc), gen, Manipulator::Ftm(FtmParams::init(4, 8, 3))).unwrap()
}

fn faces(dir: &Path, n: u64) {
    fs::create_dir_all(dir).unwrap();
    let f = SyntheticFaces::new(32, n, 0);
    for i in 0..n {
        save_image(&f.render(i, 0), &dir.join(format!("f{i}.png"))).unwrap();
    }
}

#[test]
fn every_valid_row_is_written_and_checksummed() {
    let dir = tempfile::tempdir().unwrap();
    faces(&dir.path().join("in"), 3);
    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "# source,target\nin/f0.png,in/f1.png\nin/f1.png\tin/f2.png\nin/f2.png,in/f0.png\n").unwrap();
    let out = dir.path().join("out");
    let m = batch_generate(&pairs, &pipeline(), &out, 2).unwrap();
    assert_eq!((m.ok_count(), m.failed_count()), (3, 0));
    for name in ["f0_to_f1.png", "f1_to_f2.png", "f2_to_f0.png"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert!(m.verify(&out).unwrap().is_empty());
    assert_eq!(fs::read_to_string(out.join(MANIFEST_FILE)).unwrap(), m.to_tsv());
}

#[test]
fn a_missing_file_fails_its_row_only() {
    let dir = tempfile::tempdir().unwrap();
    faces(&dir.path().join("in"), 2);
    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "in/f0.png,in/f1.png\nin/nope.png,in/f1.png\nin/f1.png,in/f0.png\n").unwrap();
    let out = dir.path().join("out");
    let m = batch_generate(&pairs, &pipeline(), &out, 3).unwrap();
    assert_eq!((m.ok_count(), m.failed_count()), (2, 1));
    match &m.rows[1].status {
        RowStatus::Failed { reason } => assert!(reason.contains("nope.png"), "{reason}"),
        other => panic!("expected a failed row, got {other:?}"),
    }
    let pngs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);
}

#[test]
fn all_rows_failing_is_an_error_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "a.png,b.png\n").unwrap();
    let out = dir.path().join("out");
    let err = batch_generate(&pairs, &pipeline(), &out, 1).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(fs::read_to_string(out.join(MANIFEST_FILE)).unwrap().contains("failed"));
}

#[test]
fn tampered_outputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    faces(&dir.path().join("in"), 2);
    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "in/f0.png,in/f1.png\nin/f0.png,in/f1.png\n").unwrap();
    let out = dir.path().join("out");
    let m = batch_generate(&pairs, &pipeline(), &out, 1).unwrap();
    // Repeated pairs get distinct names.
    assert!(out.join("f0_to_f1.png").is_file());
    assert_eq!(m.ok_count(), 2);
    fs::write(out.join("f0_to_f1.png"), b"not a png").unwrap();
    assert_eq!(m.verify(&out).unwrap(), vec![out.join("f0_to_f1.png")]);
}

#[test]
fn batch_output_matches_single_swaps() {
    let dir = tempfile::tempdir().unwrap();
    faces(&dir.path().join("in"), 2);
    let pairs = dir.path().join("pairs.csv");
    fs::write(&pairs, "in/f0.png,in/f1.png\n").unwrap();
    let p = pipeline();
    let out = dir.path().join("out");
    batch_generate(&pairs, &p, &out, 4).unwrap();
    let load = |n: &str| latentswap::pipeline::load_image(&dir.path().join(n)).unwrap();
    let single = p.swap(&load("in/f0.png"), &load("in/f1.png")).unwrap().image;
    save_image(&single, &dir.path().join("single.png")).unwrap();
    assert_eq!(fs::read(out.join("f0_to_f1.png")).unwrap(), fs::read(dir.path().join("single.png")).unwrap());
}
