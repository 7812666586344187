use latentswap_autograd::{check_gradients, Conv2dSpec, GradCheckOptions, Tape, Tensor, Var};
use proptest::prelude::*;

/// Deterministic values in (-1, 1) without pulling an RNG crate into the tape.
fn values(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn assert_grads<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let cmp = check_gradients(inputs, f, GradCheckOptions::default());
    for (i, c) in cmp.iter().enumerate() {
        let err = c.relative_error(1e-10);
        assert!(err < 1e-6, "{name}: input {i} relative error {err:e}");
    }
}

/// Weighted sum so every output element carries a distinct sensitivity.
fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let w = tape.constant(values(&y.shape(), seed));
    y.mul(&w).sum()
}

#[test]
fn elementwise_ops() {
    let a = values(&[3, 4], 1);
    let b = values(&[3, 4], 2).map(|v| v + 2.5);
    assert_grads("add/sub/mul/div", &[a.clone(), b.clone()], |t, v| {
        let y = v[0].add(&v[1]).mul(&v[0]).sub(&v[1]).div(&v[1]);
        probe(t, y, 3)
    });
    assert_grads("activations", std::slice::from_ref(&a), |t, v| {
        let y = v[0]
            .sigmoid()
            .add(&v[0].tanh())
            .add(&v[0].leaky_relu(0.2))
            .add(&v[0].exp())
            .add(&v[0].scale(3.0).add_scalar(5.0).sqrt())
            .add(&v[0].add_scalar(4.0).recip())
            .add(&v[0].square().neg());
        probe(t, y, 4)
    });
}

#[test]
fn scalar_broadcasts_and_reductions() {
    let x = values(&[2, 5], 5);
    let s = Tensor::scalar(0.7);
    assert_grads("scalar broadcast", &[x.clone(), s.clone()], |t, v| {
        let y = v[0].mul_scalar_var(&v[1]).add_scalar_var(&v[1].square());
        probe(t, y, 6)
    });
    assert_grads("reductions", &[x], |t, v| {
        let y = v[0].sum_last_axis();
        probe(t, y, 7).add(&v[0].mean().square())
    });
}

#[test]
fn shape_ops() {
    let x = values(&[4, 3], 8);
    let y = values(&[2, 3], 9);
    assert_grads("narrow/concat/stack/row", &[x.clone(), y.clone()], |t, v| {
        let c = Var::concat(&[v[0].narrow(1, 2), v[1]]);
        let s = Var::stack(&[v[0].row(0), v[1].row(1)]);
        probe(t, c, 10).add(&probe(t, s, 11))
    });
    let z = values(&[2, 3, 4], 12);
    assert_grads("permute/reshape", &[z], |t, v| {
        let p = v[0].permute(&[2, 0, 1]).reshape(&[4, 6]);
        probe(t, p, 13)
    });
}

#[test]
fn linear_algebra() {
    let a = values(&[3, 4], 14);
    let b = values(&[4, 2], 15);
    assert_grads("matmul", &[a, b], |t, v| probe(t, v[0].matmul(&v[1]), 16));
    let x = values(&[3, 5], 17);
    let w = values(&[4, 5], 18);
    let bias = values(&[4], 19);
    assert_grads("linear matrix", &[x, w.clone(), bias.clone()], |t, v| {
        probe(t, v[0].linear(&v[1], &v[2]), 20)
    });
    let xv = values(&[5], 21);
    assert_grads("linear vector", &[xv, w, bias], |t, v| {
        probe(t, v[0].linear(&v[1], &v[2]), 22)
    });
    let logits = values(&[2, 6], 23).scale(3.0);
    assert_grads("softmax", &[logits], |t, v| probe(t, v[0].softmax_rows(), 24));
}

#[test]
fn convolution() {
    let x = values(&[3, 6, 6], 25);
    let w = values(&[4, 3, 3, 3], 26);
    for spec in [Conv2dSpec::new(1, 1), Conv2dSpec::new(2, 1), Conv2dSpec::new(1, 0)] {
        assert_grads("conv2d", &[x.clone(), w.clone()], move |t, v| {
            probe(t, v[0].conv2d(&v[1], spec), 27)
        });
    }
    let w1 = values(&[2, 3, 1, 1], 28);
    assert_grads("conv1x1", &[x, w1], |t, v| {
        probe(t, v[0].conv2d(&v[1], Conv2dSpec::new(1, 0)), 29)
    });
}

#[test]
fn channel_and_resampling_ops() {
    let x = values(&[3, 4, 4], 30);
    let s = values(&[3], 31);
    assert_grads("channels", &[x.clone(), s], |t, v| {
        let y = v[0].mul_channels(&v[1]).add_channels(&v[1].square());
        probe(t, y, 32)
    });
    assert_grads("up/pool", std::slice::from_ref(&x), |t, v| {
        let y = v[0].upsample2x().avg_pool(4);
        probe(t, y, 33).add(&probe(t, v[0].global_avg_pool(), 34))
    });
    assert_grads("resize up", std::slice::from_ref(&x), |t, v| {
        probe(t, v[0].resize_bilinear(7, 9), 35)
    });
    assert_grads("resize down", &[values(&[2, 9, 9], 36)], |t, v| {
        probe(t, v[0].resize_bilinear(4, 3), 37)
    });
}

#[test]
fn sqrt_at_zero_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([3]));
    let y = x.square().sum().sqrt();
    let g = tape.backward(y);
    assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(raw in prop::collection::vec(-20.0f64..20.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([3, 4], raw));
        let y = x.softmax_rows().value();
        for row in y.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn resize_preserves_constant_images(v in -1.0f64..1.0, oh in 1usize..12, ow in 1usize..12) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 5, 5], v));
        let y = x.resize_bilinear(oh, ow).value();
        prop_assert!(y.data().iter().all(|p| (p - v).abs() < 1e-12));
    }
}
