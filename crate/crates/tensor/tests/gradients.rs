use bridgekit_tensor::gradcheck::check_gradients;
use bridgekit_tensor::{attention, Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, &mut rng)
}

/// Projects an arbitrary-shaped output onto a fixed random direction so that
/// every output element contributes to the checked scalar.
fn probe(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let w = randn(y.shape(), seed ^ 0x9e37);
    y.mul(&w).map(|t| t.sum())
}

fn assert_grad<F>(name: &str, f: F, inputs: &[Tensor<f64>])
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let r = check_gradients(f, inputs, H).unwrap();
    assert!(r.max_rel_err < TOL, "{name}: max rel err {} ({:?})", r.max_rel_err, r);
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    assert_grad("add", |x| probe(&x[0].add(&x[1])?, 3), &[a.clone(), b.clone()]);
    assert_grad("sub", |x| probe(&x[0].sub(&x[1])?, 3), &[a.clone(), b.clone()]);
    assert_grad("mul", |x| probe(&x[0].mul(&x[1])?, 3), &[a.clone(), b.clone()]);
    assert_grad("scale", |x| probe(&x[0].scale(-1.7).add_scalar(0.3), 3), &[a.clone()]);
    assert_grad("silu", |x| probe(&x[0].silu(), 4), &[a.clone()]);
    assert_grad("sigmoid", |x| probe(&x[0].sigmoid(), 5), &[a.clone()]);
    assert_grad("square", |x| probe(&x[0].square(), 6), &[a.clone()]);
    assert_grad("mean", |x| Ok(x[0].square().mean()), &[a.clone()]);
    assert_grad("mse", |x| x[0].mse(&x[1]), &[a, b]);
}

#[test]
fn matmul_linear_and_layout_ops() {
    assert_grad(
        "matmul2d",
        |x| probe(&x[0].matmul(&x[1])?, 7),
        &[randn(&[3, 5], 10), randn(&[5, 2], 11)],
    );
    assert_grad(
        "matmul3d",
        |x| probe(&x[0].matmul(&x[1])?, 8),
        &[randn(&[2, 3, 4], 12), randn(&[2, 4, 3], 13)],
    );
    assert_grad(
        "linear",
        |x| probe(&x[0].linear(&x[1], Some(&x[2]))?, 9),
        &[randn(&[2, 3, 4], 14), randn(&[5, 4], 15), randn(&[5], 16)],
    );
    assert_grad(
        "permute",
        |x| probe(&x[0].permute(&[2, 0, 1])?, 10),
        &[randn(&[2, 3, 4], 17)],
    );
    assert_grad(
        "reshape",
        |x| probe(&x[0].reshape(&[6, 4])?.square(), 11),
        &[randn(&[2, 3, 4], 18)],
    );
    assert_grad(
        "concat",
        |x| probe(&Tensor::concat(&[&x[0], &x[1]], 1)?.square(), 12),
        &[randn(&[2, 1, 3], 19), randn(&[2, 2, 3], 20)],
    );
    assert_grad("softmax", |x| probe(&x[0].softmax()?, 13), &[randn(&[3, 5], 21)]);
    assert_grad(
        "gather_rows",
        |x| probe(&x[0].gather_rows(&[2, 0, 2, 1])?, 14),
        &[randn(&[3, 2], 22)],
    );
    assert_grad(
        "mul_per_sample",
        |x| probe(&x[0].mul_per_sample(&[0.5, -2.0])?, 15),
        &[randn(&[2, 3, 2], 23)],
    );
    assert_grad(
        "add_channel_bias",
        |x| probe(&x[0].add_channel_bias(&x[1])?.square(), 16),
        &[randn(&[2, 3, 2, 2, 2], 24), randn(&[2, 3], 25)],
    );
}

#[test]
fn volumetric_ops() {
    assert_grad(
        "conv3d stride 1",
        |x| probe(&x[0].conv3d(&x[1], Some(&x[2]), 1, 1)?, 17),
        &[
            randn(&[2, 2, 4, 4, 4], 26),
            randn(&[3, 2, 3, 3, 3], 27),
            randn(&[3], 28),
        ],
    );
    assert_grad(
        "conv3d stride 2",
        |x| probe(&x[0].conv3d(&x[1], None, 2, 1)?, 18),
        &[randn(&[1, 2, 5, 4, 6], 29), randn(&[2, 2, 3, 3, 3], 30)],
    );
    assert_grad(
        "upsample",
        |x| probe(&x[0].upsample_nearest2x()?, 19),
        &[randn(&[1, 2, 2, 3, 2], 31)],
    );
    assert_grad(
        "group_norm",
        |x| probe(&x[0].group_norm(2, &x[1], &x[2], 1e-5)?, 20),
        &[randn(&[2, 4, 2, 2, 2], 32), randn(&[4], 33), randn(&[4], 34)],
    );
}

#[test]
fn attention_gradients_and_limit() {
    assert_grad(
        "attention",
        |x| probe(&attention(&x[0], &x[1], &x[2])?, 21),
        &[randn(&[3, 4], 35), randn(&[5, 4], 36), randn(&[5, 2], 37)],
    );

    // Orthogonal keys, query aligned with key 1 and scaled up: softmax
    // saturates, output approaches V row 1. Oracle: explicit softmax at the
    // same scale factor.
    let scale = 40.0;
    let q = Tensor::<f64>::from_vec(vec![0.0, scale, 0.0], &[1, 3]).unwrap();
    let k = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
    let v = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
    let out = attention(&q, &k, &v).unwrap().to_vec();
    let logits = [0.0, scale / 3f64.sqrt(), 0.0];
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let expect = [
        p[0] * 1.0 + p[1] * 3.0 + p[2] * 5.0,
        p[0] * 2.0 + p[1] * 4.0 + p[2] * 6.0,
    ];
    assert!((out[0] - expect[0]).abs() < 1e-12 && (out[1] - expect[1]).abs() < 1e-12);
    assert!((out[0] - 3.0).abs() < 1e-8 && (out[1] - 4.0).abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::from_vec(vals, &[3, 4]).unwrap();
        let y = x.softmax().unwrap();
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_standardizes(vals in prop::collection::vec(-5.0f64..5.0, 2 * 4 * 8).prop_filter("spread", |v| v.chunks(16).all(|g| g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min) > 0.5)), shift in -3.0f64..3.0) {
        let x = Tensor::from_vec(vals, &[2, 4, 2, 2, 2]).unwrap().add_scalar(shift);
        let y = x.group_norm(2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        for grp in y.data().chunks(16) {
            let mean = grp.iter().sum::<f64>() / 16.0;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-4, "variance {}", var);
        }
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let x = randn(&[1, 2, 4, 4, 4], seed);
        let w = randn(&[3, 2, 3, 3, 3], seed + 1);
        let a = x.conv3d(&w, None, 2, 1).unwrap().silu().to_vec();
        let b = x.conv3d(&w, None, 2, 1).unwrap().silu().to_vec();
        prop_assert_eq!(a, b);
    }
}
