//! Renders faces from random codes, with the learned and an external
//! constant input, and writes them as PNGs.
//!
//! `cargo run --release --example synthesize -- [out-dir]`

use std::path::PathBuf;

use latentswap::generator::{sample_auxiliary, synthesize, GeneratorConfig, GeneratorHandle};
use latentswap::latent::split_codes;
use latentswap::pipeline::save_image;

fn main() -> latentswap::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out).map_err(|e| latentswap::Error::Argument(e.to_string()))?;
    let gen = GeneratorHandle::init(GeneratorConfig::toy(64, 8)?, 3)?;
    println!("generator: {}px, {} codes of width {}", gen.resolution(), gen.code_count(), gen.code_dim());

    for (i, sample) in sample_auxiliary(&gen, 3, 42)?.iter().enumerate() {
        let path = out.join(format!("sample{i}.png"));
        save_image(&sample.image, &path)?;

        // Same codes, constant input scaled: the coarse layout shifts.
        let (low, high) = split_codes(&sample.codes)?;
        let c = gen.learned_constant().map(|v| v * 1.5);
        let alt = synthesize(Some(&c), &low, &high, &gen)?;
        save_image(&alt, &out.join(format!("sample{i}_constant.png")))?;
        println!("{} (mse vs scaled constant {:.4})", path.display(), sample.image.mean_squared_error(&alt)?);
    }
    Ok(())
}
