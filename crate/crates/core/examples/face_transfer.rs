//! The three manipulators on the same pair of high-code matrices.
//!
//! `cargo run --example face_transfer`

use latentswap::autograd::Tensor;
use latentswap::transfer::{identity_code, FtmParams, IdInjectionParams, Manipulator};

fn rows(t: &Tensor) -> String {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n    ")
}

fn main() -> latentswap::Result<()> {
    let (n, d) = (4, 6);
    let src = Tensor::new([n, d], (0..n * d).map(|i| (i as f64 * 0.7).sin()).collect());
    let tgt = Tensor::new([n, d], (0..n * d).map(|i| (i as f64 * 0.3).cos()).collect());
    println!("source\n    {}\ntarget\n    {}", rows(&src), rows(&tgt));

    // LCR hands back the source codes unchanged; a fresh ID injection
    // module starts out as the identity on the target.
    let manipulators = [
        ("ftm (fresh)", Manipulator::Ftm(FtmParams::init(n, d, 1))),
        ("lcr", Manipulator::Lcr),
        ("id injection (fresh)", Manipulator::IdInjection(IdInjectionParams::init(n, d, 8, 1))),
    ];
    for (name, m) in &manipulators {
        println!("{name}\n    {}", rows(&m.apply(&src, &tgt)?));
    }
    println!("identity code used by ID injection: {:?}", identity_code(&src)?.values());
    Ok(())
}
