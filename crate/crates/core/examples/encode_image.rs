//! Encodes a face into W++ and W+ and shows where each code comes from.
//!
//! `cargo run --release --example encode_image -- [face.png]`
//!
//! Without an argument a procedural 64px face is used.

use latentswap::encoder::{EncoderConfig, EncoderState};
use latentswap::pipeline::load_image;
use latentswap::train::SyntheticFaces;
use latentswap::LatentSpace;

fn main() -> latentswap::Result<()> {
    let image = match std::env::args().nth(1) {
        Some(p) => load_image(p.as_ref())?,
        None => SyntheticFaces::new(64, 4, 0).render(1, 0),
    };
    let r = image.resolution();
    for space in [LatentSpace::WPlusPlus, LatentSpace::WPlus] {
        let cfg = EncoderConfig::toy(r, 8, space)?;
        let routes = cfg.code_levels()?;
        let encoder = EncoderState::init(cfg, 0)?;
        let encoded = encoder.encode(&image)?;
        println!(
            "{}: {} mapping networks, low {:?}, high {:?}, constant {:?}",
            space.as_str(),
            encoder.mapping_network_count(),
            encoded.low_codes().shape(),
            encoded.high_codes().shape(),
            encoded.constant_input().map(|c| c.shape().to_vec())
        );
        let levels: Vec<&str> = routes.iter().map(|l| l.as_str()).collect();
        println!("  code sources: {}", levels.join(" "));
    }
    Ok(())
}
