//! Code counts per resolution and the binary latent format.
//!
//! `cargo run --example latent_codes`

use latentswap::autograd::Tensor;
use latentswap::latent::{code_count, high_code_count, merge_codes, split_codes};
use latentswap::HierLatent;

fn main() -> latentswap::Result<()> {
    println!("resolution  codes  high");
    for r in [32, 64, 128, 256, 512, 1024] {
        println!("{r:>10}  {:>5}  {:>4}", code_count(r)?, high_code_count(r)?);
    }

    let (r, d) = (64, 6);
    let n = code_count(r)?;
    let codes = Tensor::new([n, d], (0..n * d).map(|i| (i as f64 * 0.1).sin()).collect());
    let (low, high) = split_codes(&codes)?;
    assert_eq!(merge_codes(&low, &high)?, codes);

    let constant = Tensor::new([4, 4, d], (0..16 * d).map(|i| i as f64 / 100.0).collect());
    let latent = HierLatent::new(constant, low, high, r)?;
    let path = std::env::temp_dir().join("latent_codes_example.bin");
    latent.save(&path)?;
    let back = HierLatent::load(&path)?;
    // Blocks are stored as little-endian f32.
    let drift = back
        .codes()?
        .data()
        .iter()
        .zip(latent.codes()?.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "W++ latent at {r}px: constant {:?}, low {:?}, high {:?}, round-trip drift {drift:.1e}",
        back.constant_input().shape(),
        back.low_codes().shape(),
        back.high_codes().shape(),
    );
    assert!(drift < 1e-6);
    let _ = std::fs::remove_file(path);
    Ok(())
}
