use medusa::numerics::{
    self, entropy, grad_check, kernels, softmax, AttnMask, Result, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any node to a scalar with fixed, non-uniform weights so that
/// gradients are not trivially symmetric.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let w = tape.constant(shape, (0..n).map(|i| 0.3 + (i % 7) as f64 * 0.17).collect())?;
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn check<'a, F>(x: &Tensor, f: F)
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let report = grad_check(f, x, 1e-5, 1e-6).unwrap();
    assert!(
        report.passed,
        "max relative error {} ({:?} vs {:?})",
        report.max_rel_error, report.analytic, report.numeric
    );
}

#[test]
fn matmul_both_sides() {
    let b = random(vec![4, 3], 1);
    check(&random(vec![2, 4], 2), |t, x| {
        let bv = t.leaf(&b);
        let y = t.matmul(x, bv)?;
        weighted_sum(t, y)
    });
    let a = random(vec![2, 4], 3);
    check(&random(vec![4, 3], 4), |t, x| {
        let av = t.leaf(&a);
        let y = t.matmul(av, x)?;
        weighted_sum(t, y)
    });
}

#[test]
fn elementwise_ops() {
    let other = random(vec![3, 4], 5);
    check(&random(vec![3, 4], 6), |t, x| {
        let o = t.leaf(&other);
        let a = t.add(x, o)?;
        let m = t.mul(a, x)?;
        let s = t.scale(m, -1.7);
        let g = t.gelu(s);
        weighted_sum(t, g)
    });
    check(&random(vec![5], 7), |t, x| Ok(t.mean(x)));
}

#[test]
fn add_row_bias() {
    let x = random(vec![3, 4], 8);
    check(&random(vec![4], 9), |t, b| {
        let xv = t.leaf(&x);
        let y = t.add_row(xv, b)?;
        weighted_sum(t, y)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let gain = random(vec![6], 10);
    let bias = random(vec![6], 11);
    let x = random(vec![3, 6], 12);
    check(&x, |t, xv| {
        let (g, b) = (t.leaf(&gain), t.leaf(&bias));
        let y = t.layer_norm(xv, g, b)?;
        weighted_sum(t, y)
    });
    check(&gain, |t, g| {
        let (xv, b) = (t.leaf(&x), t.leaf(&bias));
        let y = t.layer_norm(xv, g, b)?;
        weighted_sum(t, y)
    });
    check(&bias, |t, b| {
        let (xv, g) = (t.leaf(&x), t.leaf(&gain));
        let y = t.layer_norm(xv, g, b)?;
        weighted_sum(t, y)
    });
}

#[test]
fn embedding_with_repeated_ids() {
    check(&random(vec![5, 3], 13), |t, table| {
        let y = t.embedding(table, &[4, 0, 4, 2])?;
        weighted_sum(t, y)
    });
}

fn attention_case(which: usize, mask: AttnMask, n: usize, m: usize) {
    let parts = [
        random(vec![n, 8], 20),
        random(vec![m, 8], 21),
        random(vec![m, 8], 22),
    ];
    check(&parts[which].clone(), |t, x| {
        let mut vars = [x; 3];
        for (i, p) in parts.iter().enumerate() {
            if i != which {
                vars[i] = t.leaf(p);
            }
        }
        let y = t.attention(vars[0], vars[1], vars[2], 2, mask)?;
        weighted_sum(t, y)
    });
}

#[test]
fn attention_full_and_causal() {
    for which in 0..3 {
        attention_case(which, AttnMask::Full, 3, 5);
        attention_case(which, AttnMask::Causal { offset: 0 }, 4, 4);
        attention_case(which, AttnMask::Causal { offset: 2 }, 3, 5);
        attention_case(which, AttnMask::SelfOnly, 3, 3);
    }
}

#[test]
fn row_plumbing() {
    let other = random(vec![2, 3], 30);
    check(&random(vec![4, 3], 31), |t, x| {
        let s = t.slice_rows(x, 1, 2)?;
        let o = t.leaf(&other);
        let c = t.concat_rows(&[s, o, x])?;
        weighted_sum(t, c)
    });
}

#[test]
fn softmax_and_log_softmax() {
    check(&random(vec![2, 5], 32), |t, x| {
        let y = t.softmax(x);
        weighted_sum(t, y)
    });
    check(&random(vec![2, 5], 33), |t, x| {
        let y = t.log_softmax(x);
        weighted_sum(t, y)
    });
}

#[test]
fn cross_entropy_and_kl() {
    check(&random(vec![3, 5], 34), |t, x| {
        t.cross_entropy(x, &[0, 4, 2])
    });
    let teacher = softmax(&random(vec![3, 5], 35));
    check(&random(vec![3, 5], 36), |t, x| {
        let tv = t.leaf(&teacher);
        t.kl_divergence(x, tv)
    });
}

#[test]
fn tape_losses_match_plain_functions() {
    let logits = random(vec![2, 4], 40);
    let mut tape = Tape::no_grad();
    let v = tape.leaf(&logits);
    let ce = tape.cross_entropy(v, &[1, 3]).unwrap();
    let expected = (numerics::cross_entropy(&Tensor::vector(logits.row(0).to_vec()).unwrap(), 1)
        .unwrap()
        + numerics::cross_entropy(&Tensor::vector(logits.row(1).to_vec()).unwrap(), 3).unwrap())
        / 2.0;
    assert!((tape.value(ce)[0] - expected).abs() < 1e-12);
}

#[test]
fn grad_check_flags_a_wrong_gradient() {
    // Routing the value through a constant hides it from the tape, so the
    // analytic gradient is zero while the numeric one is not.
    let x = random(vec![3], 41);
    let report = grad_check(
        |t, v| {
            let copy = t.constant(vec![3], t.value(v).to_vec())?;
            let sq = t.mul(copy, copy)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(!report.passed);
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..24)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(row in row_strategy()) {
        let p = softmax(&Tensor::vector(row).unwrap());
        prop_assert!(numerics::check_distribution(p.data(), 1e-9).is_ok());
    }

    #[test]
    fn softmax_is_shift_invariant(row in row_strategy(), shift in -100.0f64..100.0) {
        let a = kernels::softmax(&row);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = kernels::softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_is_bounded(row in row_strategy()) {
        let p = kernels::softmax(&row);
        let h = entropy(&p).unwrap();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn kl_is_nonnegative(a in row_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let teacher = Tensor::vector(kernels::softmax(&other)).unwrap();
        let kl = numerics::kl_divergence(&Tensor::vector(a).unwrap(), &teacher).unwrap();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative(row in row_strategy(), pick in 0usize..24) {
        let t = pick % row.len();
        prop_assert!(numerics::cross_entropy(&Tensor::vector(row).unwrap(), t).unwrap() >= -1e-12);
    }

    #[test]
    fn matmul_associates(seed in 0u64..500) {
        let a = random(vec![2, 3], seed);
        let b = random(vec![3, 4], seed + 1);
        let c = random(vec![4, 2], seed + 2);
        let left = numerics::matmul(&numerics::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = numerics::matmul(&a, &numerics::matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
