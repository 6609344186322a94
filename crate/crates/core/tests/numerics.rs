use forgery_peft::numerics::{finite_difference_gradient, numeric_gradient, Graph, ParamSet, Tensor};
use forgery_peft::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn grad_of(params: &ParamSet, name: &str, build: impl Fn(&mut Graph, &ParamSet) -> forgery_peft::Result<forgery_peft::numerics::Var>) -> Vec<f64> {
    let mut g = Graph::new();
    let root = build(&mut g, params).unwrap();
    let grads = g.backward(root).unwrap();
    let var = g.bindings().iter().find(|(n, _)| n == name).unwrap().1;
    grads.get(var).unwrap().to_vec()
}

#[test]
fn sum_has_unit_gradient() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.5, 0.0, 7.0]).unwrap(), true).unwrap();
    let grad = grad_of(&p, "x", |g, p| {
        let x = g.param(p, "x")?;
        g.sum(x)
    });
    assert_eq!(grad, vec![1.0; 6]);
}

#[test]
fn half_square_has_identity_gradient() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true).unwrap();
    let grad = grad_of(&p, "x", |g, p| {
        let x = g.param(p, "x")?;
        let sq = g.mul(x, x)?;
        let s = g.sum(sq)?;
        g.scale(s, 0.5)
    });
    assert_eq!(grad, vec![3.0, -2.0]);
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.insert("x", random_tensor(&[4, 5], &mut rng), false).unwrap();
    p.insert("w1", random_tensor(&[5, 6], &mut rng), true).unwrap();
    p.insert("b1", random_tensor(&[6], &mut rng), true).unwrap();
    p.insert("w2", random_tensor(&[6, 1], &mut rng), true).unwrap();
    let labels = [1.0, 0.0, 0.0, 1.0];
    let report = finite_difference_gradient(
        |g, p| {
            let x = g.param(p, "x")?;
            let w1 = g.param(p, "w1")?;
            let b1 = g.param(p, "b1")?;
            let w2 = g.param(p, "w2")?;
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.gelu(h)?;
            let z = g.matmul(h, w2)?;
            let z = g.reshape(z, &[4])?;
            g.bce_with_logits(z, &labels)
        },
        &p,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "max rel {}", report.max_rel_error);
}

#[test]
fn finite_difference_of_quadratic() {
    let mut p = ParamSet::new();
    p.insert("t", Tensor::new(vec![1], vec![1.0]).unwrap(), true).unwrap();
    let f = |p: &ParamSet| -> forgery_peft::Result<f64> {
        let t = p.get("t").unwrap().data()[0];
        Ok(t * t)
    };
    let est = numeric_gradient(&f, &p, "t", 1e-5).unwrap();
    assert!((est[0] - 2.0).abs() <= 1e-9);
}

#[test]
fn finite_difference_of_constant_is_zero() {
    let mut p = ParamSet::new();
    p.insert("t", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
    let est = numeric_gradient(&|_: &ParamSet| Ok(4.0), &p, "t", 1e-5).unwrap();
    assert_eq!(est, vec![0.0; 3]);
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite { .. })));
    assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(), true).unwrap();
    let grad = grad_of(&p, "x", |g, p| {
        let x = g.param(p, "x")?;
        let y = g.add(x, x)?;
        let y = g.add(y, x)?;
        g.sum(y)
    });
    assert_eq!(grad, vec![3.0, 3.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn broadcast_add_follows_row_major(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[rows, cols], &mut rng);
        let b = random_tensor(&[cols], &mut rng);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let out = g.add(av, bv).unwrap();
        prop_assert_eq!(g.shape(out), &[rows, cols][..]);
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(g.value(out).data()[r * cols + c], a.data()[r * cols + c] + b.data()[c]);
            }
        }
    }

    #[test]
    fn sum_axis_reduces_one_dimension(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, axis in 0usize..3, keep in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [d0, d1, d2];
        let x = random_tensor(&shape, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = g.sum_axis(xv, axis, keep).unwrap();
        let mut expected_shape = shape.to_vec();
        if keep { expected_shape[axis] = 1 } else { expected_shape.remove(axis); }
        prop_assert_eq!(g.shape(out), &expected_shape[..]);
        let total: f64 = x.data().iter().sum();
        let reduced: f64 = g.value(out).data().iter().sum();
        prop_assert!((total - reduced).abs() < 1e-12);
    }

    #[test]
    fn elementwise_ops_match_finite_differences(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("a", random_tensor(&[n, 3], &mut rng), true).unwrap();
        let b = Tensor::from_fn(&[n, 3], |_| rng.random_range(0.5..2.0)).unwrap();
        p.insert("b", b, true).unwrap();
        let report = finite_difference_gradient(
            |g, p| {
                let a = g.param(p, "a")?;
                let b = g.param(p, "b")?;
                let q = g.div(a, b)?;
                let s = g.softmax(q)?;
                let t = g.sqrt(b)?;
                let u = g.mul(s, t)?;
                let v = g.sub(u, a)?;
                let w = g.square(v)?;
                g.mean(w)
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        prop_assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn graph_evaluation_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[3, 4], &mut rng);
        let w = random_tensor(&[4, 2], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.matmul(xv, wv).unwrap();
            let y = g.softmax(y).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
