//! Inversion and swap objectives on procedural faces with toy oracles.
//!
//! `cargo run --release --example losses`

use latentswap::autograd::{Tape, Tensor};
use latentswap::losses::{l_inv, l_swap, LossWeightsInv, LossWeightsSwap, SwapTerms};
use latentswap::oracles::{OracleSet, OracleSizes};
use latentswap::train::SyntheticFaces;

fn main() -> latentswap::Result<()> {
    let faces = SyntheticFaces::new(32, 4, 0);
    let oracles = OracleSet::toy(OracleSizes::uniform(32), 0);
    let tape = Tape::new();
    let img = |id, v| tape.constant(faces.render(id, v).into_pixels());

    let same = l_inv(img(0, 0), img(0, 0), &oracles, &LossWeightsInv::default())?;
    let other = l_inv(img(0, 0), img(1, 0), &oracles, &LossWeightsInv::default())?;
    println!("L_inv identical images: {:.6}", same.total.item().abs());
    print!("L_inv different identities:\n{}", other.report.to_text());

    let codes = |k: f64| Tensor::new([4, 8], (0..32).map(|i| (i as f64 * k).sin()).collect());
    let terms = SwapTerms {
        x_s: img(0, 0),
        x_t: img(1, 0),
        x_hat_s: img(0, 1),
        x_hat_t: img(1, 1),
        y_s2t: img(1, 2),
        l_s_high: tape.constant(codes(0.3)),
        l_s2t: tape.leaf(codes(0.31)),
    };
    let swap = l_swap(&terms, &oracles, &LossWeightsSwap::default())?;
    print!("L_swap:\n{}", swap.report.to_text());

    let grads = tape.backward(swap.total);
    println!("d L_swap / d L_s2t norm: {:.4}", grads.get_or_zeros(terms.l_s2t).norm());
    Ok(())
}
