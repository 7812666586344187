//! Two-stage training at 32px on procedural faces with toy oracles.
//!
//! `cargo run --release --example train_two_stage -- [steps] [out-dir]`
//!
//! With an output directory the encoder, generator and manipulator
//! checkpoints plus both step logs are written there.

use std::path::PathBuf;

use latentswap::encoder::{EncoderConfig, EncoderState};
use latentswap::generator::{GeneratorConfig, GeneratorHandle};
use latentswap::oracles::{OracleSet, OracleSizes};
use latentswap::train::{
    save_manipulator, train_ftm, train_hierfe, FaceSource, FaceStream, SyntheticFaces, TrainConfig,
};
use latentswap::transfer::{FtmParams, Manipulator};
use latentswap::LatentSpace;

fn main() -> latentswap::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from);
    let (r, d) = (32, 8);

    let gen = GeneratorHandle::init(GeneratorConfig::toy(r, d)?, 1)?;
    let oracles = OracleSet::toy(OracleSizes::uniform(r), 7);
    let faces = |seed| FaceStream::new(vec![(FaceSource::Synthetic(SyntheticFaces::new(r, 8, 3)), 1.0)], seed);

    let mut encoder = EncoderState::init(EncoderConfig::toy(r, d, LatentSpace::WPlusPlus)?, 2)?;
    encoder.warm_start_constant(&gen)?;
    let stage1 = TrainConfig {
        steps,
        batch: 4,
        learning_rate: 0.003,
        ..TrainConfig::default()
    };
    let (encoder, log1) = train_hierfe(&mut faces(11)?, &gen, &oracles, encoder, &stage1)?;
    println!(
        "stage 1: L_inv {:.1} -> {:.1} over {steps} steps ({:.1}s)",
        log1.smoothed_initial(20),
        log1.smoothed_final(20),
        log1.wall_clock_s
    );

    let stage2 = TrainConfig {
        learning_rate: 0.001,
        seed: 1,
        ..stage1
    };
    let n_high = encoder.config().high_code_count()?;
    let ftm = Manipulator::Ftm(FtmParams::init(n_high, d, 5));
    let (ftm, log2) = train_ftm(&mut faces(1)?, &encoder, &gen, &oracles, ftm, &stage2)?;
    println!(
        "stage 2: L_swap {:.1} -> {:.1} over {steps} steps ({:.1}s)",
        log2.smoothed_initial(20),
        log2.smoothed_final(20),
        log2.wall_clock_s
    );
    let last = log2.records.last().expect("at least one step");
    print!("final swap terms:\n{}", last.loss.to_text());

    if let Some(dir) = out {
        gen.save(&dir.join("generator"))?;
        encoder.save(&dir.join("encoder"))?;
        save_manipulator(&ftm, &dir.join("ftm"))?;
        log1.write_ndjson(&dir.join("stage1.ndjson"))?;
        log2.write_ndjson(&dir.join("stage2.ndjson"))?;
        println!("checkpoints in {}", dir.display());
    }
    Ok(())
}
