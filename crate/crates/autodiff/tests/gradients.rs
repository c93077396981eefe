//! Autodiff gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskid_autodiff::{finite_diff_check, Result, Tape, Tensor, Var, LAYER_NORM_EPS};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const POINTS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random values kept at least `margin` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(margin..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn weighted_sum(tape: &Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn check_op<G, F>(name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&Tape, &[Var]) -> Result<Var> + Copy,
{
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = gen(&mut rng);
        let err = finite_diff_check(
            |tape: &Tape, vars: &[Var]| {
                let out = f(tape, vars)?;
                weighted_sum(tape, out, seed)
            },
            &point,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_transpose_add_sub_mul() {
    check_op("matmul", |r| vec![random(r, 3, 4), random(r, 4, 2)], |t, v| t.matmul(v[0], v[1]));
    check_op("transpose", |r| vec![random(r, 3, 2)], |t, v| t.transpose(v[0]));
    check_op("add", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.add(v[0], v[1]));
    check_op("sub", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.sub(v[0], v[1]));
    check_op("mul", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.mul(v[0], v[1]));
    check_op("add_row", |r| vec![random(r, 3, 4), random(r, 1, 4)], |t, v| t.add_row(v[0], v[1]));
    check_op("add_n", |r| vec![random(r, 2, 2), random(r, 2, 2), random(r, 2, 2)], |t, v| {
        t.add_n(v)
    });
    check_op("scale", |r| vec![random(r, 2, 2)], |t, v| Ok(t.scale(v[0], -2.5)));
}

#[test]
fn elementwise_nonlinearities() {
    check_op("exp", |r| vec![random(r, 2, 3)], |t, v| Ok(t.exp(v[0])));
    check_op("sigmoid", |r| vec![random(r, 2, 3)], |t, v| Ok(t.sigmoid(v[0])));
    check_op("tanh", |r| vec![random(r, 2, 3)], |t, v| Ok(t.tanh(v[0])));
    check_op("relu", |r| vec![away_from_zero(r, 2, 3, 0.1)], |t, v| Ok(t.relu(v[0])));
}

#[test]
fn normalizations() {
    check_op("softmax", |r| vec![random(r, 3, 4)], |t, v| Ok(t.softmax(v[0])));
    check_op("masked_softmax", |r| vec![random(r, 2, 3)], |t, v| {
        t.masked_softmax(v[0], &[true, false, true, true, true, false])
    });
    check_op(
        "layer_norm",
        |r| vec![random(r, 3, 5), random(r, 1, 5), random(r, 1, 5)],
        |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
    );
}

#[test]
fn reshaping_and_reductions() {
    check_op("concat_cols", |r| vec![random(r, 2, 2), random(r, 2, 3)], |t, v| t.concat_cols(v));
    check_op("concat_rows", |r| vec![random(r, 1, 3), random(r, 2, 3)], |t, v| t.concat_rows(v));
    check_op("slice_rows", |r| vec![random(r, 4, 3)], |t, v| t.slice_rows(v[0], 1, 2));
    check_op("slice_cols", |r| vec![random(r, 3, 5)], |t, v| t.slice_cols(v[0], 1, 3));
    check_op("select_rows", |r| vec![random(r, 4, 2)], |t, v| t.select_rows(v[0], &[3, 0, 3]));
    check_op(
        "max_row_groups",
        |r| {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|i| (0..3).map(|_| r.gen_range(-1.0..1.0) + (i % 2) as f64 * if r.gen_bool(0.5) { 3.0 } else { -3.0 }).collect())
                .collect();
            vec![Tensor::from_rows(&rows).unwrap()]
        },
        |t, v| t.max_row_groups(v[0], 2),
    );
    check_op("mean", |r| vec![random(r, 3, 3)], |t, v| Ok(t.mean(v[0])));
    check_op("mean_rows", |r| vec![random(r, 3, 2)], |t, v| Ok(t.mean_rows(v[0])));
    check_op("sum", |r| vec![random(r, 3, 2)], |t, v| Ok(t.sum(v[0])));
    // Rows separated by a margin so the argmax is stable under the probe.
    check_op(
        "max_rows",
        |r| {
            let base = random(r, 1, 3);
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| base.data().iter().map(|b| b + i as f64 * 0.5 * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
                .collect();
            vec![Tensor::from_rows(&rows).unwrap()]
        },
        |t, v| Ok(t.max_rows(v[0])),
    );
    check_op(
        "sparse_combine",
        |r| vec![random(r, 5, 3)],
        |t, v| {
            let rows = vec![vec![(0, 0.5), (3, 1.5)], vec![(4, -1.0)], vec![(1, 0.25), (1, 0.25), (2, 2.0)]];
            t.sparse_combine(v[0], std::sync::Arc::new(rows))
        },
    );
}

#[test]
fn softmax_cross_entropy_at_random_logits() {
    check_op(
        "softmax_cross_entropy",
        |r| vec![random(r, 3, 4)],
        |t, v| {
            let p = t.softmax(v[0]);
            t.cross_entropy(p, &[0, 3, 1])
        },
    );
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let point = vec![random(&mut rng, 1, 4)];
    let coeffs = random(&mut rng, 4, 1);
    let err = finite_diff_check(
        |t: &Tape, v: &[Var]| {
            let c = t.constant(coeffs.clone());
            let y = t.matmul(v[0], c)?;
            Ok(t.sum(y))
        },
        &point,
        H,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err:e}");
}

fn two_layer(t: &Tape, v: &[Var]) -> Result<Var> {
    // v = [x, w1, b1, w2, b2]
    let h = t.matmul(v[0], v[1])?;
    let h = t.add_row(h, v[2])?;
    let h = t.tanh(h);
    let o = t.matmul(h, v[3])?;
    let o = t.add_row(o, v[4])?;
    let p = t.softmax(o);
    t.cross_entropy(p, &[1, 0])
}

#[test]
fn random_two_layer_network() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let point = vec![
            random(&mut rng, 2, 5),
            random(&mut rng, 5, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 6, 3),
            random(&mut rng, 1, 3),
        ];
        worst = worst.max(finite_diff_check(two_layer, &point, H).unwrap());
    }
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let vars: Vec<Var> = [
        random(&mut rng, 2, 5),
        random(&mut rng, 5, 6),
        random(&mut rng, 1, 6),
        random(&mut rng, 6, 3),
        random(&mut rng, 1, 3),
    ]
    .into_iter()
    .map(|x| tape.leaf(x, true))
    .collect();
    let loss = two_layer(&tape, &vars).unwrap();
    let a = tape.backward(loss).unwrap();
    let b = tape.backward(loss).unwrap();
    for v in &vars {
        assert_eq!(a.get(*v).unwrap(), b.get(*v).unwrap());
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(3, 4, vals).unwrap());
            let y = tape.value(tape.softmax(x));
            for r in 0..3 {
                let row = y.row_slice(r);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
