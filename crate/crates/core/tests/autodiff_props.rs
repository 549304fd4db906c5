use proptest::prelude::*;

use sscse::autodiff::{grad_check, Graph, SeqLayout, Var};
use sscse::{Result, Tensor64};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor64 {
    Tensor64::matrix(rows, cols, data).unwrap()
}

/// Contracts `out` with fixed random weights so every output element
/// carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor64) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn assert_passes(
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
    params: Vec<(&str, Tensor64)>,
    tol: f64,
) -> std::result::Result<(), TestCaseError> {
    let params: Vec<(String, Tensor64)> = params
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    let report = grad_check(build, &params, 1e-5, tol).unwrap();
    prop_assert!(report.passed(), "{:?}", report.worst());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_gradients(a in values(12), b in values(8), w in values(6)) {
        let w = mat(3, 2, w);
        assert_passes(
            |g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y, &w) },
            vec![("a", mat(3, 4, a)), ("b", mat(4, 2, b))],
            1e-6,
        )?;
    }

    #[test]
    fn transpose_and_broadcast_gradients(a in values(6), bias in values(2), w in values(6)) {
        let w = mat(3, 2, w);
        assert_passes(
            |g, v| {
                let t = g.transpose(v[0])?;
                let y = g.add(t, v[1])?;
                let y = g.sub(y, v[1])?;
                let y = g.add(y, v[1])?;
                weighted_sum(g, y, &w)
            },
            vec![("a", mat(2, 3, a)), ("bias", Tensor64::from_vec(bias))],
            1e-6,
        )?;
    }

    #[test]
    fn elementwise_product_gradients(a in values(8), b in values(8), w in values(8)) {
        let w = mat(2, 4, w);
        assert_passes(
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                let y = g.scale(y, 0.7);
                weighted_sum(g, y, &w)
            },
            vec![("a", mat(2, 4, a)), ("b", mat(2, 4, b))],
            1e-6,
        )?;
    }

    #[test]
    fn gelu_gradients(x in values(8), w in values(8)) {
        let w = mat(1, 8, w);
        assert_passes(
            |g, v| { let y = g.gelu(v[0]); weighted_sum(g, y, &w) },
            vec![("x", mat(1, 8, x))],
            1e-6,
        )?;
    }

    #[test]
    fn log_gradients(x in prop::collection::vec(0.2f64..3.0, 6), w in values(6)) {
        let w = mat(2, 3, w);
        assert_passes(
            |g, v| { let y = g.log(v[0])?; weighted_sum(g, y, &w) },
            vec![("x", mat(2, 3, x))],
            1e-6,
        )?;
    }

    #[test]
    fn layer_norm_gradients(x in values(32), gain in values(8), bias in values(8), w in values(32)) {
        let w = mat(4, 8, w);
        assert_passes(
            |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(g, y, &w) },
            vec![("x", mat(4, 8, x)), ("gain", Tensor64::from_vec(gain)), ("bias", Tensor64::from_vec(bias))],
            1e-5,
        )?;
    }

    #[test]
    fn softmax_and_logsumexp_gradients(x in values(12), w in values(12), u in values(3)) {
        let w = mat(3, 4, w);
        let u = Tensor64::from_vec(u);
        assert_passes(
            |g, v| {
                let s = g.softmax_rows(v[0])?;
                let a = weighted_sum(g, s, &w)?;
                let l = g.logsumexp_rows(v[0])?;
                let b = weighted_sum(g, l, &u)?;
                g.add(a, b)
            },
            vec![("x", mat(3, 4, x))],
            1e-6,
        )?;
    }

    #[test]
    fn normalize_and_row_dot_gradients(a in values(12), b in values(12)) {
        prop_assume!(a.chunks(4).chain(b.chunks(4)).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.1));
        assert_passes(
            |g, v| {
                let an = g.l2_normalize_rows(v[0])?;
                let d = g.row_dot(an, v[1])?;
                Ok(g.mean(d))
            },
            vec![("a", mat(3, 4, a)), ("b", mat(3, 4, b))],
            1e-6,
        )?;
    }

    #[test]
    fn attention_and_pooling_gradients(q in values(24), k in values(24), x in values(24), w in values(8)) {
        let layout = SeqLayout { sentences: 2, max_len: 3, lengths: vec![3, 2] };
        let w = mat(2, 4, w);
        assert_passes(
            |g, v| {
                let a = g.attention(v[0], v[1], v[2], &layout, 2)?;
                let m = g.mean_pool(a, &layout)?;
                let f = g.first_token(v[2], &layout)?;
                let y = g.add(m, f)?;
                weighted_sum(g, y, &w)
            },
            vec![("q", mat(6, 4, q)), ("k", mat(6, 4, k)), ("v", mat(6, 4, x))],
            // gradients through two softmax-weighted layers get close to the
            // round-off floor of central differences
            1e-4,
        )?;
    }

    #[test]
    fn gather_and_reshape_gradients(table in values(10), w in values(8)) {
        let w = mat(2, 4, w);
        assert_passes(
            |g, v| {
                let r = g.gather_rows(v[0], &[4, 1, 1, 0])?;
                let y = g.reshape(r, vec![2, 4])?;
                weighted_sum(g, y, &w)
            },
            vec![("table", mat(5, 2, table))],
            1e-6,
        )?;
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in values(15), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let a = g.constant(mat(3, 5, x.clone()));
        let b = g.constant(mat(3, 5, x.iter().map(|v| v + shift).collect()));
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        let (pa, pb) = (g.value(sa), g.value(sb));
        for r in 0..3 {
            prop_assert!((pa.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (u, v) in pa.row(r).iter().zip(pb.row(r)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_backward_stay_finite(x in prop::collection::vec(-30.0f64..30.0, 16), g0 in values(4)) {
        let mut g = Graph::new();
        let xv = g.param(mat(4, 4, x));
        let gain = g.param(Tensor64::from_vec(g0));
        let bias = g.constant(Tensor64::zeros(&[4]));
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        let y = g.gelu(y);
        let s = g.softmax_rows(y).unwrap();
        let l = g.logsumexp_rows(s).unwrap();
        let loss = g.mean(l);
        g.backward(loss).unwrap();
        prop_assert!(g.value(loss).is_finite());
        prop_assert!(g.grad(xv).unwrap().is_finite());
        prop_assert!(g.grad(gain).unwrap().is_finite());
    }
}
