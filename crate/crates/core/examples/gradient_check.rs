//! Finite-difference check of the face transfer module and a loss term.
//!
//! `cargo run --release --example gradient_check`

use latentswap::autograd::{check_gradients, GradCheckOptions, Tensor};
use latentswap::losses::id_loss;
use latentswap::oracles::{OracleSet, OracleSizes};
use latentswap::train::SyntheticFaces;
use latentswap::transfer::FtmParams;

fn main() {
    let ftm = FtmParams::init(4, 8, 0);
    let src = Tensor::new([4, 8], (0..32).map(|i| (i as f64 * 0.9).sin()).collect());
    let tgt = Tensor::new([4, 8], (0..32).map(|i| (i as f64 * 0.4).cos()).collect());
    let omega = ftm.params().expect("block2.omega").clone();
    let cmp = check_gradients(
        &[src, tgt, omega],
        |t, v| {
            let bound = ftm.params().bind_replacing(t, &[("block2.omega", v[2])]);
            ftm.graph(&bound, v[0], v[1]).square().sum()
        },
        GradCheckOptions::default(),
    );
    for (name, c) in ["source codes", "target codes", "block2.omega"].iter().zip(&cmp) {
        println!("ftm wrt {name:<13} relative error {:.2e}", c.relative_error(1e-12));
    }

    let faces = SyntheticFaces::new(16, 2, 0);
    let oracles = OracleSet::toy(OracleSizes::uniform(16), 0);
    let (x, y) = (faces.render(0, 0).into_pixels(), faces.render(1, 0).into_pixels());
    let cmp = check_gradients(
        &[x, y],
        |_, v| id_loss(v[0], v[1], &oracles).expect("same shapes"),
        GradCheckOptions {
            eps: 1e-6,
            max_probes: 64,
        },
    );
    println!("id loss wrt reconstruction   relative error {:.2e}", cmp[1].relative_error(1e-12));
}
