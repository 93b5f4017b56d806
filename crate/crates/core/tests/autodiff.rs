use dualview_core::numerics::gradcheck::{check_inputs, GradCheckOptions};
use dualview_core::{Error, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(g: &mut Graph<'static>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = randn(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check_op<S, F>(name: &str, shapes: S, f: F)
where
    S: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var> + Copy,
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs = shapes(&mut rng);
        let report = check_inputs(
            &inputs,
            |g, v| {
                let out = f(g, v)?;
                project(g, out, trial)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "{name} trial {trial}: rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

fn rt(rng: &mut ChaCha8Rng, ranges: &[(usize, usize)]) -> Tensor {
    let shape: Vec<usize> = ranges.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
    randn(rng, &shape)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8]);
}

#[test]
fn l2_normalize_zero_row_is_flagged() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(), true);
    let y = g.l2_normalize(x, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    assert_eq!(g.degenerate_rows(y), vec![0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn cross_entropy_gradient_at_zero_logits() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
    let loss = g.cross_entropy(logits, &[0]).unwrap();
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(logits).unwrap(), &[-0.5, 0.5]);

    // The same value by finite differences.
    let report = check_inputs(
        &[Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()],
        |g, v| g.cross_entropy(v[0], &[0]),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        Error::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap(), true);
    let y = g.max_pool2d(x, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn conv2d_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, c, h, w, o, k) = (2, 3, 5, 6, 4, 3);
    let x = randn(&mut rng, &[b, c, h, w]);
    let wt = randn(&mut rng, &[o, c, k, k]);
    let bias = randn(&mut rng, &[o]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let ys = g.shape(y).to_vec();
        let (ho, wo) = (ys[2], ys[3]);
        assert_eq!(ho, (h + 2 * pad - k) / stride + 1);
        for n in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((n * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        let got = g.value(y).data()[((n * o + oc) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

// ----- finite-difference suite, one block per op --------------------------

#[test]
fn gradcheck_add_and_mul_with_broadcast() {
    check_op(
        "add",
        |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
            vec![randn(r, &[m, n]), randn(r, &[n])]
        },
        |g, v| g.add(v[0], v[1]),
    );
    check_op(
        "mul",
        |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
            vec![randn(r, &[m, n]), randn(r, &[n])]
        },
        |g, v| g.mul(v[0], v[1]),
    );
    check_op(
        "mul_same",
        |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            vec![randn(r, &s), randn(r, &s)]
        },
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            g.scale(y, -1.7)
        },
    );
}

#[test]
fn gradcheck_matmul() {
    check_op(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![randn(r, &[m, k]), randn(r, &[k, n])]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
    check_op(
        "bmm",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![randn(r, &[b, m, k]), randn(r, &[b, k, n])]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn gradcheck_conv2d() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check_op(
            "conv2d",
            |r| {
                let (b, c, o) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                let (h, w) = (dim(r, 3, 6), dim(r, 3, 6));
                vec![randn(r, &[b, c, h, w]), randn(r, &[o, c, 3, 3]), randn(r, &[o])]
            },
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
}

#[test]
fn gradcheck_pooling() {
    check_op(
        "max_pool2d",
        |r| {
            let (b, c) = (dim(r, 1, 2), dim(r, 1, 3));
            let (h, w) = (2 * dim(r, 1, 3), 2 * dim(r, 1, 3));
            vec![randn(r, &[b, c, h, w])]
        },
        |g, v| g.max_pool2d(v[0], 2, 2),
    );
    check_op(
        "global_avg_pool",
        |r| vec![rt(r, &[(1, 2), (1, 3), (1, 4), (1, 4)])],
        |g, v| g.global_avg_pool(v[0]),
    );
}

#[test]
fn gradcheck_pointwise() {
    check_op("relu", |r| vec![rt(r, &[(1, 5), (1, 5)])], |g, v| g.relu(v[0]));
    check_op("exp", |r| vec![rt(r, &[(1, 5), (1, 5)])], |g, v| g.exp(v[0]));
    check_op(
        "log",
        |r| {
            let t = rt(r, &[(1, 5), (1, 5)]);
            let shape = t.shape().to_vec();
            vec![Tensor::new(shape, t.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap()]
        },
        |g, v| g.log(v[0]),
    );
}

#[test]
fn gradcheck_softmax_and_normalize() {
    for axis in [0isize, 1, -1] {
        check_op(
            "softmax",
            |r| vec![rt(r, &[(1, 4), (1, 4), (1, 4)])],
            move |g, v| g.softmax(v[0], axis),
        );
        check_op(
            "l2_normalize",
            |r| vec![rt(r, &[(1, 4), (2, 4), (1, 4)])],
            move |g, v| g.l2_normalize(v[0], axis),
        );
    }
}

#[test]
fn gradcheck_shape_ops() {
    check_op(
        "concat",
        |r| {
            let (a, b1, b2, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            vec![randn(r, &[a, b1, c]), randn(r, &[a, b2, c])]
        },
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
    check_op(
        "narrow",
        |r| vec![rt(r, &[(1, 3), (5, 5), (1, 3)])],
        |g, v| g.narrow(v[0], 1, 1, 3),
    );
    check_op(
        "permute",
        |r| vec![rt(r, &[(1, 3), (1, 3), (1, 3), (1, 3)])],
        |g, v| g.permute(v[0], &[2, 0, 3, 1]),
    );
    check_op(
        "reshape",
        |r| vec![rt(r, &[(2, 2), (1, 3), (3, 3)])],
        |g, v| {
            let n = g.value(v[0]).len();
            g.reshape(v[0], &[n / 2, 2])
        },
    );
    check_op("transpose", |r| vec![rt(r, &[(1, 4), (1, 4)])], |g, v| g.transpose(v[0]));
}

#[test]
fn gradcheck_reductions() {
    check_op("sum", |r| vec![rt(r, &[(1, 4), (1, 4)])], |g, v| g.sum(v[0]));
    check_op("mean", |r| vec![rt(r, &[(1, 4), (1, 4)])], |g, v| g.mean(v[0]));
    for axis in [0isize, 1, 2] {
        check_op(
            "sum_axis",
            |r| vec![rt(r, &[(1, 3), (1, 3), (1, 3)])],
            move |g, v| g.sum_axis(v[0], axis),
        );
    }
    check_op(
        "logsumexp_masked",
        |r| vec![randn(r, &[3, 5])],
        |g, v| {
            let mask: Vec<bool> = (0..15).map(|i| i % 5 != 2 && i != 7).collect();
            let scaled = g.scale(v[0], 30.0)?;
            g.logsumexp_masked(scaled, &mask)
        },
    );
    check_op(
        "cross_entropy",
        |r| vec![rt(r, &[(1, 5), (3, 3)])],
        |g, v| {
            let b = g.shape(v[0])[0];
            let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
            g.cross_entropy(v[0], &labels)
        },
    );
}

#[test]
fn gradcheck_attention() {
    check_op(
        "attention",
        |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5)];
            vec![randn(r, &s), randn(r, &s), randn(r, &s)]
        },
        |g, v| g.attention(v[0], v[1], v[2]),
    );
}

#[test]
fn gradcheck_composite() {
    // conv → relu → pool → gap → linear → normalize → softmax
    check_op(
        "composite",
        |r| {
            vec![
                randn(r, &[2, 2, 4, 4]),
                randn(r, &[3, 2, 3, 3]),
                randn(r, &[3, 4]),
                randn(r, &[4]),
            ]
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.relu(y)?;
            let y = g.max_pool2d(y, 2, 2)?;
            let y = g.global_avg_pool(y)?;
            let y = g.linear(y, v[2], v[3])?;
            let y = g.l2_normalize(y, 1)?;
            g.softmax(y, 1)
        },
    );
}

proptest! {
    #[test]
    fn softmax_rows_are_on_the_simplex(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(data in proptest::collection::vec(-10.0f64..10.0, 8)) {
        prop_assume!(data.chunks(4).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], data).unwrap());
        let y = g.l2_normalize(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn concat_then_split_is_exact(
        a in proptest::collection::vec(-5.0f64..5.0, 6),
        b in proptest::collection::vec(-5.0f64..5.0, 4),
    ) {
        let mut g = Graph::new();
        let ta = Tensor::new(vec![2, 3], a).unwrap();
        let tb = Tensor::new(vec![2, 2], b).unwrap();
        let (va, vb) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let c = g.concat(&[va, vb], 1).unwrap();
        let parts = g.split(c, 1, &[3, 2]).unwrap();
        prop_assert_eq!(g.value(parts[0]), &ta);
        prop_assert_eq!(g.value(parts[1]), &tb);
    }
}
