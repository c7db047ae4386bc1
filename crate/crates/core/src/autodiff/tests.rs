use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::error::ReidError;
use crate::gradsuite::{self, Group, OP_TOL};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec())
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let y = g.softmax(x, -1).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let a = t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 4.0, 7.0]);
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn backward_of_identity_is_one() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(1.7));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);
}

#[test]
fn backward_of_square_at_three() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.variable(t(&[4], &[0.3, -1.2, 2.0, 0.0]));
    let y = g.softmax(x, -1).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    for &v in g.grad(x).unwrap().data() {
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 8.0);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn broadcast_gradient_sums_over_expanded_axes() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::zeros(&[2, 3]));
    let b = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.add(a, b).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.grad(a).unwrap().data(), &[1.0; 6]);
}

#[test]
fn gradcheck_sum_of_squares() {
    let x = t(&[5], &[0.1, -0.7, 1.3, 2.0, -3.1]);
    let r = grad_check(
        |g, x| {
            let y = g.square(x)?;
            g.sum_all(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let x = t(&[2, 4], &[0.2, -0.4, 1.1, 0.0, -2.0, 0.5, 0.3, 0.9]);
    let targets = [2usize, 3];
    let r = grad_check(
        |g, x| {
            let lp = g.log_softmax(x, -1)?;
            let flat = g.reshape(lp, &[8])?;
            let picked = g.take(flat, &[targets[0], 4 + targets[1]])?;
            let m = g.mean_all(picked)?;
            g.neg(m)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_of_constant_function_is_zero() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let r = grad_check(
        |g, x| {
            let z = g.scale(x, 0.0)?;
            let s = g.sum_all(z)?;
            g.add_scalar(s, 4.0)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(
        g.add(a, b),
        Err(ReidError::Shape { op: "add", .. })
    ));
    let c = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, c), Err(ReidError::Shape { .. })));
}

#[test]
fn domain_errors() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(g.log(x), Err(ReidError::Domain { .. })));
    assert!(matches!(g.sqrt(x), Err(ReidError::Domain { .. })));
    let z = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(
        g.div(x, z),
        Err(ReidError::Domain { op: "div", .. })
    ));
    assert!(matches!(g.reciprocal(z), Err(ReidError::Domain { .. })));
    assert!(g.reciprocal(x).is_ok());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(ReidError::Contract(_))));
    assert!(grad_check(|_, x| Ok(x), &Tensor::zeros(&[2]), 1e-5).is_err());
    assert!(grad_check(|g, x| g.sum_all(x), &Tensor::zeros(&[2]), 0.0).is_err());
}

#[test]
fn unfold_matches_direct_indexing() {
    // (1, 3, 3, 2) input, 2×2 windows, stride 1, padding 1.
    let x = Tensor::from_fn(&[1, 3, 3, 2], |i| i as f64 + 1.0);
    let spec = UnfoldSpec::square(2, 1, 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let u = g.unfold(xv, spec).unwrap();
    let u = g.value(u);
    assert_eq!(u.shape(), &[1, 4, 4, 8]);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut k = 0;
            for ky in 0..2 {
                for kx in 0..2 {
                    for c in 0..2 {
                        let (iy, ix) = (oy + ky, ox + kx);
                        let want = if (1..=3).contains(&iy) && (1..=3).contains(&ix) {
                            x.at(&[0, iy - 1, ix - 1, c])
                        } else {
                            0.0
                        };
                        assert_eq!(u.at(&[0, oy, ox, k]), want);
                        k += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn every_op_passes_at_twenty_random_points() {
    let ops: Vec<_> = gradsuite::cases()
        .into_iter()
        .filter(|c| c.group == Group::Op)
        .collect();
    assert!(ops.len() >= 25);
    for c in &ops {
        for seed in 0..20 {
            let r = c.check(seed).unwrap();
            assert!(
                r.max_rel_error < OP_TOL,
                "{} seed {seed}: {}",
                c.name,
                r.max_rel_error
            );
        }
    }
}

fn grad_of(f: impl Fn(&mut Graph, Var) -> crate::error::Result<Var>, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let y = f(&mut g, v).unwrap();
    g.backward(y).unwrap();
    g.grad(v).unwrap().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Spreads beyond ~36 round the largest probability to exactly 1.0 in f64.
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-15.0f64..15.0, 2..12)) {
        let n = v.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, n], v));
        let y = g.softmax(x, -1).unwrap();
        let p = g.value(y).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn gradient_is_linear(
        v in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::from_vec(&[2, 3], v);
        let f = |g: &mut Graph, x: Var| {
            let y = g.tanh(x)?;
            g.sum_all(y)
        };
        let h = |g: &mut Graph, x: Var| {
            let s = g.softmax(x, -1)?;
            let w = g.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
            let p = g.mul(s, w)?;
            g.sum_all(p)
        };
        let combined = grad_of(|g, x| {
            let fa = f(g, x)?;
            let fa = g.scale(fa, a)?;
            let hb = h(g, x)?;
            let hb = g.scale(hb, b)?;
            g.add(fa, hb)
        }, &x);
        let (gf, gh) = (grad_of(f, &x), grad_of(h, &x));
        for i in 0..6 {
            let want = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combined.data()[i] - want).abs() < 1e-12);
        }
    }
}
