use std::sync::Arc;

use super::*;
use crate::error::Error;
use crate::seed;

#[test]
fn every_kernel_matches_central_differences() {
    for case in kernel_cases() {
        let mut rng = seed::rng(11, &[seed::hash_str(case.name)]);
        for trial in 0..10 {
            let point = (case.sample)(&mut rng);
            let report = finite_diff_check(&case.build, &point, 1e-5).unwrap();
            assert!(
                report.max_rel_error < 1e-6,
                "{} trial {trial}: {report:?}",
                case.name
            );
        }
    }
}

#[test]
fn rms_norm_of_constant_vector_is_its_sign() {
    for c in [2.5, -0.75] {
        let mut g = Graph::new();
        let x = g.constant(Array::full(&[1, 6], c));
        let gain = g.constant(Array::full(&[6], 1.0));
        let y = g.rms_norm(x, gain).unwrap();
        for v in g.value(y).data() {
            assert!((v - c.signum()).abs() < 1e-8);
        }
    }
}

#[test]
fn masked_softmax_zeroes_masked_position() {
    let mut g = Graph::new();
    let x = g.param(Array::matrix(1, 3, vec![0.2, 5.0, -0.4]).unwrap());
    let mask = Array::vector(vec![0.0, f64::NEG_INFINITY, 0.0]);
    let y = g.softmax_masked(x, Some(&mask)).unwrap();
    let p = g.value(y).data().to_vec();
    assert_eq!(p[1], 0.0);
    let e = [0.2f64.exp(), (-0.4f64).exp()];
    assert!((p[0] - e[0] / (e[0] + e[1])).abs() < 1e-15);
    assert!((p[0] + p[2] - 1.0).abs() < 1e-15);

    let w = g.constant(Array::matrix(1, 3, vec![0.3, -2.0, 1.1]).unwrap());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data()[1], 0.0);
}

#[test]
fn mask_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(Array::zeros(&[2, 3]));
    let bad = Array::vector(vec![0.0; 4]);
    assert!(matches!(g.softmax_masked(x, Some(&bad)), Err(Error::Shape(_))));
    let all = Array::vector(vec![f64::NEG_INFINITY; 3]);
    assert!(matches!(g.softmax_masked(x, Some(&all)), Err(Error::Numeric(_))));
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut g = Graph::new();
    let a = Array::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
    let mut eye = Array::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let x = g.constant(a.clone());
    let i = g.constant(eye);
    let y = g.matmul(x, i).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.param(Array::zeros(&[2, 3]));
    let b = g.param(Array::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
    assert!(g.matmul(a, b).is_ok());
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0, -1.0]));
    assert!(matches!(g.ln(x), Err(Error::Numeric(_))));
    let big = g.param(Array::vector(vec![1000.0]));
    assert!(matches!(g.exp(big), Err(Error::Numeric(_))));
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Array::matrix(2, 2, vec![3.0, -1.0, 0.5, 2.0]).unwrap());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn half_square_gradient_is_x() {
    let mut g = Graph::new();
    let data = vec![3.0, -1.0, 0.5, 2.0];
    let x = g.param(Array::vector(data.clone()));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), data.as_slice());
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(Array::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

#[test]
fn square_at_three() {
    let r = finite_diff_check(
        |g, v| g.mul(v[0], v[0]),
        &[Array::scalar(3.0)],
        1e-5,
    )
    .unwrap();
    assert!((r.analytic - 6.0).abs() < 1e-12);
    assert!((r.numeric - 6.0).abs() < 1e-9);
}

#[test]
fn constant_function_has_zero_gradients() {
    let r = finite_diff_check(
        |g, _| Ok(g.constant(Array::scalar(4.0))),
        &[Array::vector(vec![1.0, 2.0])],
        1e-5,
    )
    .unwrap();
    assert_eq!(r.analytic, 0.0);
    assert_eq!(r.numeric, 0.0);
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn random_five_node_graph() {
    let mut rng = seed::rng(5, &[]);
    use rand::Rng as _;
    for _ in 0..10 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let point = [
            Array::matrix(2, 3, a).unwrap(),
            Array::matrix(3, 2, b).unwrap(),
        ];
        let r = finite_diff_check(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let e = g.exp(m)?;
                let t = g.transpose(e)?;
                let s = g.gelu(t)?;
                g.mean(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

#[test]
fn gmm_nll_matches_mixture_nll() {
    use crate::gmm::SphericalGmm;
    let means = vec![vec![0.0, 1.0], vec![2.0, -1.0]];
    let sigmas = vec![vec![0.5, 1.0], vec![1.5, 0.7]];
    let gmm = SphericalGmm::new(means.clone(), sigmas.clone()).unwrap();
    let pts = vec![vec![0.3, 0.2], vec![1.9, -0.5], vec![-1.0, 2.0]];
    let mut g = Graph::new();
    let m = g.param(Array::from_rows(&means).unwrap());
    let s = g.param(Array::from_rows(&sigmas).unwrap());
    let data = Arc::new(Array::from_rows(&pts).unwrap());
    let y = g.gmm_nll(m, s, data, gmm.weights()).unwrap();
    let want = gmm.nll(&pts).unwrap() / 3.0;
    assert!((g.value(y).data()[0] - want).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = seed::rng(3, &[]);
        kernel_cases()
            .iter()
            .map(|c| {
                let p = (c.sample)(&mut rng);
                let mut g = Graph::new();
                let vars: Vec<Var> = p.into_iter().map(|a| g.param(a)).collect();
                let y = (c.build)(&mut g, &vars).unwrap();
                g.value(y).data()[0].to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
