use super::*;
use crate::rng::seeded;
use rand::Rng;

const FD_STEP: f64 = 1e-5;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

fn fd_gradient(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    grad
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let den = a.data().iter().chain(b.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / den.max(1e-8)
}

/// Relative error between the tape gradient of `⟨w, f(x)⟩` for a fixed
/// random `w` and its central finite-difference estimate.
fn grad_check(x: &Tensor, f: &dyn Fn(&mut Tape, NodeId) -> NodeId, seed: u64) -> f64 {
    let w = {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let out = f(&mut tape, xi);
        random_tensor(&mut seeded(seed, 77), tape.value(&out).shape())
    };
    let loss = |tape: &mut Tape, xi: NodeId| {
        let out = f(tape, xi);
        let wi = tape.constant(w.clone());
        let prod = tape.mul(&out, &wi).unwrap();
        tape.sum(&prod).unwrap()
    };
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let l = loss(&mut tape, xi);
    let analytic = tape.backward(l).unwrap().get(xi);
    let numeric = fd_gradient(x, &|xp| {
        let mut t = Tape::new();
        let xi = t.leaf(xp.clone());
        let l = loss(&mut t, xi);
        t.value(&l).item()
    });
    rel_err(&analytic, &numeric)
}

/// Random tensor whose entries stay at least `gap` away from every kink in
/// `kinks` (so a finite-difference step never crosses one).
fn away_from(rng: &mut impl Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let c: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (c.abs() - k).abs() > gap && (c - k).abs() > gap) {
                break c;
            }
        };
    }
    t
}

#[test]
fn matmul_examples() {
    let mut g = Eager;
    let i2 = g.constant(Tensor::identity(2));
    let v = g.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(g.matmul(&i2, &v).unwrap().data(), &[3.0, 4.0]);

    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = g.constant(Tensor::vector(vec![1.0, 1.0]));
    assert_eq!(g.matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);

    let bad = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    assert!(matches!(g.matmul(&a, &bad), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_wrt_matrix_matches_fd() {
    let mut rng = seeded(1, 0);
    let a = random_tensor(&mut rng, &[4, 4]);
    let x = random_tensor(&mut rng, &[4]);
    let err = grad_check(
        &a,
        &|t, ai| {
            let xi = t.constant(x.clone());
            let p = t.matmul(&ai, &xi).unwrap();
            t.sum(&p).unwrap()
        },
        1,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn matmul_transposed_variants_match_fd() {
    let mut rng = seeded(2, 0);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = random_tensor(&mut rng, &[3, 5]);
        let b_shape = match (ta, tb) {
            (false, false) => [5, 2],
            (false, true) => [2, 5],
            (true, false) => [3, 2],
            (true, true) => [2, 3],
        };
        let b = random_tensor(&mut rng, &b_shape);
        let ea = grad_check(
            &a,
            &|t, ai| {
                let bi = t.constant(b.clone());
                t.matmul_t(&ai, ta, &bi, tb).unwrap()
            },
            3,
        );
        let eb = grad_check(
            &b,
            &|t, bi| {
                let ai = t.constant(a.clone());
                t.matmul_t(&ai, ta, &bi, tb).unwrap()
            },
            4,
        );
        assert!(ea <= 1e-6 && eb <= 1e-6, "ta={ta} tb={tb}: {ea} {eb}");
    }
}

#[test]
fn soft_threshold_examples() {
    let mut g = Eager;
    let v = g.constant(Tensor::vector(vec![3.0, -0.5, 0.0]));
    assert_eq!(g.soft_threshold(&v, 1.0).unwrap().data(), &[2.0, 0.0, 0.0]);
    let z = g.constant(Tensor::vector(vec![0.0]));
    assert_eq!(g.soft_threshold(&z, 0.0).unwrap().data(), &[0.0]);
    assert!(matches!(g.soft_threshold(&v, -0.1), Err(Error::Parameter { .. })));
}

#[test]
fn soft_threshold_kink_passes_zero() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![1.0, -1.0, 2.0]));
    let out = tape.soft_threshold(&v, 1.0).unwrap();
    let s = tape.sum(&out).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(v).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn hard_threshold_examples() {
    let mut g = Eager;
    let v = g.constant(Tensor::vector(vec![3.0, -1.0, 0.5, 2.0]));
    assert_eq!(g.hard_threshold(&v, 2).unwrap().data(), &[3.0, 0.0, 0.0, 2.0]);
    let v = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    assert_eq!(g.hard_threshold(&v, 3).unwrap().data(), &[1.0, 1.0, 1.0]);
    let v = g.constant(Tensor::vector(vec![2.0, 2.0, 0.0]));
    assert_eq!(g.hard_threshold(&v, 1).unwrap().data(), &[2.0, 0.0, 0.0]);
    assert!(g.hard_threshold(&v, 0).is_err());
    assert!(g.hard_threshold(&v, 4).is_err());
}

#[test]
fn hard_threshold_is_rowwise_and_passes_support() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -5.0, 2.0, 0.1, 0.3, -0.2]).unwrap());
    let out = tape.hard_threshold(&v, 1).unwrap();
    assert_eq!(tape.value(&out).data(), &[0.0, -5.0, 0.0, 0.0, 0.3, 0.0]);
    let s = tape.sum(&out).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(v).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Eager;
    let v = g.constant(Tensor::vector(vec![1.7; 4]));
    let p = g.softmax_tau(&v, 1.0).unwrap();
    assert!(p.data().iter().all(|x| (x - 0.25).abs() < 1e-15));
    let v = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let p = g.softmax_tau(&v, 1.0).unwrap();
    assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15 && (p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!(g.softmax_tau(&v, 0.0).is_err());
}

#[test]
fn softmax_jacobian_matches_fd() {
    let mut rng = seeded(5, 0);
    for tau in [0.5, 1.0, 2.0] {
        let v = random_tensor(&mut rng, &[8]);
        let err = grad_check(&v, &|t, vi| t.softmax_tau(&vi, tau).unwrap(), 6);
        assert!(err <= 1e-6, "tau={tau}: {err}");
    }
}

#[test]
fn median_examples() {
    let mut g = Eager;
    let y = g.constant(Tensor::vector(vec![1.0, 5.0, 2.0]));
    let groups = Arc::new(vec![vec![0, 1, 2], vec![1]]);
    assert_eq!(g.median_select(&y, &groups).unwrap().data(), &[2.0, 5.0]);
    let empty = Arc::new(vec![vec![]]);
    assert!(matches!(g.median_select(&y, &empty), Err(Error::Structure(_))));
}

#[test]
fn median_even_size_uses_lower_middle_and_routes_gradient() {
    let mut tape = Tape::new();
    let y = tape.leaf(Tensor::vector(vec![4.0, 1.0, 3.0, 2.0]));
    let groups = Arc::new(vec![vec![0, 1, 2, 3]]);
    let out = tape.median_select(&y, &groups).unwrap();
    assert_eq!(tape.value(&out).data(), &[2.0]);
    let s = tape.sum(&out).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(y).data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn median_ties_select_lowest_index() {
    let mut tape = Tape::new();
    let y = tape.leaf(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let groups = Arc::new(vec![vec![2, 1, 0]]);
    let out = tape.median_select(&y, &groups).unwrap();
    let s = tape.sum(&out).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(y).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn median_matches_sort_oracle() {
    let mut rng = seeded(8, 0);
    for _ in 0..50 {
        let y = random_tensor(&mut rng, &[3, 20]);
        let groups: Vec<Vec<usize>> = (0..10)
            .map(|_| rand::seq::index::sample(&mut rng, 20, 7).into_vec())
            .collect();
        let out = Eager.median_select(&Rc::new(y.clone()), &Arc::new(groups.clone())).unwrap();
        for r in 0..3 {
            for (j, g) in groups.iter().enumerate() {
                let mut vals: Vec<f64> = g.iter().map(|&i| y.row(r)[i]).collect();
                vals.sort_by(f64::total_cmp);
                assert_eq!(out.row(r)[j], vals[(vals.len() - 1) / 2]);
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Eager;
    let v = g.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(g.sq_sum(&v).unwrap().item(), 25.0);
    let v = g.constant(Tensor::vector(vec![-1.0, 2.0]));
    assert_eq!(g.abs_sum(&v).unwrap().item(), 3.0);
    let v = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(g.relu_nonneg(&v).unwrap().data(), &[0.0, 0.0, 2.0]);
    let w = g.constant(Tensor::vector(vec![1.0, 1.0]));
    assert!(matches!(g.add(&v, &w), Err(Error::Dimension { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Eager;
    let v = g.constant(Tensor::vector(vec![800.0]));
    assert!(matches!(g.exp(&v), Err(Error::NonFinite { .. })));
}

#[test]
fn unreached_nodes_have_zero_adjoint() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    let s = tape.sq_sum(&a).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(a).data(), &[2.0, 4.0]);
}

#[test]
fn composite_soft_threshold_of_product_matches_fd() {
    let mut rng = seeded(9, 0);
    let a = random_tensor(&mut rng, &[6, 5]);
    let x = away_from(&mut rng, &[5], &[], 0.0);
    let lambda = 0.05;
    // keep A·x away from the kink so the check is well defined
    let ax = crate::diffgraph::kernels::matmul(&a, false, &x, false).unwrap();
    if ax.data().iter().any(|v| (v.abs() - lambda).abs() < 1e-3) {
        return;
    }
    let err = grad_check(
        &x,
        &|t, xi| {
            let ai = t.constant(a.clone());
            let p = t.matmul(&ai, &xi).unwrap();
            t.soft_threshold(&p, lambda).unwrap()
        },
        10,
    );
    assert!(err <= 1e-5, "{err}");
}

/// 100 random instances per differentiable op, size ≤ 32, rel. err ≤ 1e-5.
#[test]
fn every_differentiable_op_matches_fd() {
    let mut rng = seeded(12, 0);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for trial in 0..100u64 {
        let n = rng.random_range(2..=8);
        let b = rng.random_range(1..=4);
        let mut record = |name: &'static str, e: f64| {
            match worst.iter_mut().find(|(k, _)| *k == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        };
        let x = away_from(&mut rng, &[b, n], &[0.0, 0.3, 1.0, -1.0], 1e-3);
        let y = random_tensor(&mut rng, &[b, n]);
        let s = trial + 100;

        record("add", grad_check(&x, &|t, xi| { let yi = t.constant(y.clone()); t.add(&xi, &yi).unwrap() }, s));
        record("sub", grad_check(&x, &|t, xi| { let yi = t.constant(y.clone()); t.sub(&yi, &xi).unwrap() }, s));
        record("mul", grad_check(&x, &|t, xi| { let yi = t.constant(y.clone()); t.mul(&xi, &yi).unwrap() }, s));
        record("scalar_mul", grad_check(&x, &|t, xi| t.scalar_mul(&xi, -1.7).unwrap(), s));
        record("exp", grad_check(&x, &|t, xi| t.exp(&xi).unwrap(), s));
        record("abs_sum", grad_check(&x, &|t, xi| t.abs_sum(&xi).unwrap(), s));
        record("sq_sum", grad_check(&x, &|t, xi| t.sq_sum(&xi).unwrap(), s));
        record("relu_nonneg", grad_check(&x, &|t, xi| t.relu_nonneg(&xi).unwrap(), s));
        record("clamp", grad_check(&x, &|t, xi| t.clamp(&xi, -1.0, 1.0).unwrap(), s));
        record("min_one", grad_check(&x, &|t, xi| t.min_one(&xi).unwrap(), s));
        record("soft_threshold", grad_check(&x, &|t, xi| t.soft_threshold(&xi, 0.3).unwrap(), s));
        record("softmax_tau", grad_check(&x, &|t, xi| t.softmax_tau(&xi, 0.7).unwrap(), s));
        record(
            "hard_threshold",
            grad_check(&x, &|t, xi| t.hard_threshold(&xi, (n / 2).max(1)).unwrap(), s),
        );
        let groups = Arc::new((0..n).map(|j| vec![j, (j + 1) % n, (j + 2) % n]).collect::<Vec<_>>());
        record("median_select", grad_check(&x, &|t, xi| t.median_select(&xi, &groups).unwrap(), s));
        let r = random_tensor(&mut rng, &[n]);
        record("mul_rows", grad_check(&x, &|t, xi| { let ri = t.constant(r.clone()); t.mul_rows(&xi, &ri).unwrap() }, s));
        record(
            "mul_rows/weights",
            grad_check(&r, &|t, ri| { let xi = t.constant(x.clone()); t.mul_rows(&xi, &ri).unwrap() }, s),
        );
        let sc = Tensor::scalar(rng.random_range(0.5..1.5));
        record("mul_scalar", grad_check(&sc, &|t, si| { let xi = t.constant(x.clone()); t.mul_scalar(&si, &xi).unwrap() }, s));
        let lam = Tensor::scalar(0.2);
        record(
            "soft_threshold/lambda",
            grad_check(&lam, &|t, li| { let xi = t.constant(x.clone()); t.soft_threshold_learned(&xi, &li).unwrap() }, s),
        );
        let c = random_tensor(&mut rng, &[n]);
        for correlate in [false, true] {
            record("circ_conv/x", grad_check(&x, &|t, xi| { let ci = t.constant(c.clone()); t.circ_conv(&ci, &xi, correlate).unwrap() }, s));
            record("circ_conv/c", grad_check(&c, &|t, ci| { let xi = t.constant(x.clone()); t.circ_conv(&ci, &xi, correlate).unwrap() }, s));
        }
        record("select_row", grad_check(&x, &|t, xi| t.select_row(&xi, b - 1).unwrap(), s));
        let partition = Arc::new(crate::gumbel::Partition::rows(b, n, 1).unwrap());
        record(
            "topk/relaxed",
            grad_check(&x, &|t, xi| t.topk_straight_through(&xi, &partition, 1.3, true).unwrap(), s),
        );
    }
    for (name, e) in &worst {
        assert!(*e <= 1e-5, "{name}: rel. err {e}");
    }
}

#[test]
fn straight_through_gradient_is_the_softmax_surrogate() {
    let mut rng = seeded(13, 0);
    let logits = random_tensor(&mut rng, &[6]);
    let partition = Arc::new(crate::gumbel::Partition::rows(1, 6, 2).unwrap());
    let mut tape = Tape::new();
    let li = tape.leaf(logits.clone().reshape(vec![1, 6]).unwrap());
    let out = tape.topk_straight_through(&li, &partition, 1.0, false).unwrap();
    let s = tape.sum(&out).unwrap();
    let analytic = tape.backward(s).unwrap().get(li).reshape(vec![6]).unwrap();
    let numeric = fd_gradient(&logits, &|l| {
        let mut g = Eager;
        let v = g.constant(l.clone());
        g.softmax_tau(&v, 1.0).unwrap().sum()
    });
    assert!(rel_err(&analytic, &numeric) <= 1e-5 || analytic.max_abs_diff(&numeric) < 1e-9);

    // a weighted upstream adjoint exercises the full Jacobian
    let w = random_tensor(&mut rng, &[6]);
    let mut tape = Tape::new();
    let li = tape.leaf(logits.clone().reshape(vec![1, 6]).unwrap());
    let out = tape.topk_straight_through(&li, &partition, 1.0, false).unwrap();
    let wi = tape.constant(w.clone().reshape(vec![1, 6]).unwrap());
    let p = tape.mul(&out, &wi).unwrap();
    let s = tape.sum(&p).unwrap();
    let analytic = tape.backward(s).unwrap().get(li).reshape(vec![6]).unwrap();
    let numeric = fd_gradient(&logits, &|l| {
        let mut g = Eager;
        let v = g.constant(l.clone());
        g.softmax_tau(&v, 1.0).unwrap().dot(&w)
    });
    assert!(rel_err(&analytic, &numeric) <= 1e-5);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hard_threshold_sparsity(v in proptest::collection::vec(-5.0f64..5.0, 1..32), frac in 0.0f64..1.0) {
            let n = v.len();
            let s = 1 + ((n - 1) as f64 * frac) as usize;
            let nonzero = v.iter().filter(|x| **x != 0.0).count();
            let out = Eager.hard_threshold(&Rc::new(Tensor::vector(v)), s).unwrap();
            let kept = out.data().iter().filter(|x| **x != 0.0).count();
            prop_assert!(kept <= s);
            if nonzero >= s {
                prop_assert_eq!(kept, s);
            }
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-30.0f64..30.0, 1..32), tau in 0.1f64..5.0) {
            let p = Eager.softmax_tau(&Rc::new(Tensor::vector(v)), tau).unwrap();
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
