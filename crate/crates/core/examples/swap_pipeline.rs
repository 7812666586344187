//! End to end: briefly fit an encoder, write toy checkpoints and a config, swap one pair, then run a
//! batch job with one broken row and print its manifest.
//!
//! `cargo run --release --example swap_pipeline -- [work-dir]`

use std::fs;
use std::path::PathBuf;

use latentswap::encoder::{EncoderConfig, EncoderState};
use latentswap::generator::{GeneratorConfig, GeneratorHandle};
use latentswap::pipeline::{batch_generate, save_image, Pipeline, PipelineConfig};
use latentswap::oracles::{OracleSet, OracleSizes};
use latentswap::train::{train_hierfe, FaceSource, FaceStream, SyntheticFaces, TrainConfig};
use latentswap::transfer::FtmParams;
use latentswap::{Error, LatentSpace};

fn main() -> latentswap::Result<()> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("latentswap_pipeline_example"));
    let io = |e: std::io::Error| Error::Argument(e.to_string());
    fs::create_dir_all(work.join("faces")).map_err(io)?;

    let gen = GeneratorHandle::init(GeneratorConfig::toy(32, 8)?, 1)?;
    let mut enc = EncoderState::init(EncoderConfig::toy(32, 8, LatentSpace::WPlusPlus)?, 2)?;
    enc.warm_start_constant(&gen)?;
    // An untrained encoder maps every face to the same codes, so fit it a
    // little first.
    let faces = SyntheticFaces::new(32, 4, 0);
    let oracles = OracleSet::toy(OracleSizes::uniform(32), 7);
    let mut stream = FaceStream::new(vec![(FaceSource::Synthetic(faces.clone()), 1.0)], 11)?;
    let stage1 = TrainConfig {
        learning_rate: 0.003,
        batch: 4,
        steps: 60,
        ..TrainConfig::default()
    };
    let (enc, _) = train_hierfe(&mut stream, &gen, &oracles, enc, &stage1)?;
    gen.save(&work.join("generator"))?;
    enc.save(&work.join("encoder"))?;
    FtmParams::init(4, 8, 3).save(&work.join("ftm"))?;
    let config = work.join("pipeline.toml");
    let text = "resolution = 32\nmanipulator = \"ftm\"\nworkers = 2\n\n[checkpoints]\n\
                encoder = \"encoder\"\ngenerator = \"generator\"\nftm = \"ftm\"\n";
    fs::write(&config, text).map_err(io)?;

    for i in 0..4 {
        save_image(&faces.render(i, 0), &work.join(format!("faces/p{i}.png")))?;
    }

    let cfg = PipelineConfig::load(&config)?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let r = pipeline.swap(&faces.render(0, 0), &faces.render(1, 0))?;
    save_image(&r.image, &work.join("p0_to_p1.png"))?;
    println!(
        "single swap: transferred codes {:?}, encode {:?}, manipulate {:?}, generate {:?}",
        r.transferred_codes.shape(),
        r.timings.encode,
        r.timings.manipulate,
        r.timings.generate
    );

    let pairs = work.join("pairs.csv");
    fs::write(&pairs, "faces/p0.png,faces/p1.png\nfaces/p2.png,faces/p3.png\nfaces/missing.png,faces/p0.png\n")
        .map_err(io)?;
    let manifest = batch_generate(&pairs, &pipeline, &work.join("out"), cfg.workers)?;
    print!("{}", manifest.to_tsv());
    println!("{} ok, {} failed; files in {}", manifest.ok_count(), manifest.failed_count(), work.display());
    Ok(())
}
