use clift_tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use clift_tensor::{FeedForward, Graph, MultiHeadAttention, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let p = g.matmul(eye, eye).unwrap();
    assert_eq!(g.value(p), &t2(&[&[1.0, 0.0], &[0.0, 1.0]]));

    let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let b = g.constant(t2(&[&[1.0], &[1.0]])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &t2(&[&[3.0], &[7.0]]));
}

#[test]
fn matmul_rejects_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[5, 7]);
    let b = rand_t(&mut rng, &[7, 3]);
    let r = check_gradients(&[a, b], DEFAULT_STEP, |g, l| g.matmul(l[0], l[1])).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g
        .constant(t2(&[&[2.5, 2.5, 2.5], &[1.0, 3.0, 2.0]]))
        .unwrap();
    let gamma = g.constant(Tensor::filled(&[3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

    let x = g.constant(t2(&[&[1.0, 3.0]])).unwrap();
    let gamma = g.constant(Tensor::filled(&[2], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = rand_t(&mut rng, &[4, 6]);
        let gamma = rand_t(&mut rng, &[6]);
        let beta = rand_t(&mut rng, &[6]);
        let r = check_gradients(&[x, gamma, beta], DEFAULT_STEP, |g, l| {
            g.layer_norm(l[0], l[1], l[2], 1e-5)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}

/// Straightforward per-head attention, written with explicit loops.
fn naive_mha(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<Vec<f64>> {
    let d = q.shape()[1];
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.shape()[0]];
    for h in 0..heads {
        for i in 0..q.shape()[0] {
            let scores: Vec<f64> = (0..k.shape()[0])
                .map(|j| {
                    (0..dh)
                        .map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.shape()[0] {
                for c in 0..dh {
                    out[i][h * dh + c] += e[j] / z * v.row(j)[h * dh + c];
                }
            }
        }
    }
    out
}

fn project(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    clift_tensor::matmul_plain(x, w).unwrap()
}

#[test]
fn mha_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 2, &mut rng).unwrap();
    let x = rand_t(&mut rng, &[3, 8]);
    let mut g = Graph::<f64>::inference();
    let xn = g.constant(x.clone()).unwrap();
    let y = mha.forward(&mut g, &ps, xn, xn, None).unwrap();

    let w = |id| ps.value(id).cast::<f64>();
    let q = project(&x, &w(mha.wq.weight));
    let k = project(&x, &w(mha.wk.weight));
    let v = project(&x, &w(mha.wv.weight));
    let a = Tensor::from_rows(&naive_mha(&q, &k, &v, 2)).unwrap();
    let expect = project(&a, &w(mha.wo.weight));
    assert!(g.value(y).max_abs_diff(&expect) < 1e-6);
}

#[test]
fn mha_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 4, 2, &mut rng).unwrap();
    let kv = rand_t(&mut rng, &[1, 4]);
    let w = |id| ps.value(id).cast::<f64>();
    let expect = project(&project(&kv, &w(mha.wv.weight)), &w(mha.wo.weight));
    for _ in 0..3 {
        let q = rand_t(&mut rng, &[2, 4]);
        let mut g = Graph::<f64>::inference();
        let qn = g.constant(q).unwrap();
        let kvn = g.constant(kv.clone()).unwrap();
        let y = mha.forward(&mut g, &ps, qn, kvn, None).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((g.value(y).row(r)[c] - expect.data()[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mha_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamStore::new();
    assert!(MultiHeadAttention::new(&mut ps, "mha", 6, 4, &mut rng).is_err());
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 6])).unwrap();
    assert!(g.attention(x, x, x, 4, None).is_err());
}

#[test]
fn attention_is_invariant_to_key_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_t(&mut rng, &[3, 4]);
    let k = rand_t(&mut rng, &[5, 4]);
    let v = rand_t(&mut rng, &[5, 4]);
    let perm = [3, 0, 4, 1, 2];
    let mut g = Graph::<f64>::inference();
    let (qn, kn, vn) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let a = g.attention(qn, kn, vn, 1, None).unwrap();
    let kp = g.constant(k.select_rows(&perm)).unwrap();
    let vp = g.constant(v.select_rows(&perm)).unwrap();
    let b = g.attention(qn, kp, vp, 1, None).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn span_attention_matches_full_attention_per_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_t(&mut rng, &[2, 4]);
    let k = rand_t(&mut rng, &[5, 4]);
    let v = rand_t(&mut rng, &[5, 4]);
    let mut g = Graph::<f64>::inference();
    let (qn, kn, vn) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let spans = g.attention(qn, kn, vn, 2, Some(vec![0..2, 2..5])).unwrap();
    for (i, range) in [(0usize, 0..2usize), (1, 2..5)] {
        let idx: Vec<usize> = range.collect();
        let expect = naive_mha(
            &q.select_rows(&[i]),
            &k.select_rows(&idx),
            &v.select_rows(&idx),
            2,
        );
        for c in 0..4 {
            assert!((g.value(spans).row(i)[c] - expect[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let q = rand_t(&mut rng, &[3, 8]);
        let k = rand_t(&mut rng, &[4, 8]);
        let v = rand_t(&mut rng, &[4, 8]);
        let full = check_gradients(&[q.clone(), k.clone(), v.clone()], DEFAULT_STEP, |g, l| {
            g.attention(l[0], l[1], l[2], 2, None)
        })
        .unwrap();
        assert!(full.max_rel_err < 1e-4, "{full:?}");
        let spans = check_gradients(&[q, k, v], DEFAULT_STEP, |g, l| {
            g.attention(l[0], l[1], l[2], 2, Some(vec![0..1, 1..4, 0..4]))
        })
        .unwrap();
        assert!(spans.max_rel_err < 1e-4, "{spans:?}");
    }
}

#[test]
fn ffn_zero_weights_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 4, 16, &mut rng);
    for (id, _) in ps.clone().iter() {
        ps.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::filled(&[3, 4], 0.7)).unwrap();
    let y = ffn.forward(&mut g, &ps, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ffn_hand_oracle() {
    // 1×2 input, hidden 2, hand-set weights.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 2, 2, &mut rng);
    *ps.value_mut(ffn.fc1.weight) = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    *ps.value_mut(ffn.fc1.bias.unwrap()) = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
    *ps.value_mut(ffn.fc2.weight) = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    *ps.value_mut(ffn.fc2.bias.unwrap()) = Tensor::new(vec![2], vec![0.125, -0.125]).unwrap();
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    // h = [1, -(-1) + 0.5] = [1.0, 1.5]
    let (h0, h1) = (gelu(1.0), gelu(1.5));
    let expect = [h0 + 3.0 * h1 + 0.125, 2.0 * h0 + 4.0 * h1 - 0.125];
    let mut g = Graph::<f64>::inference();
    let x = g
        .constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap())
        .unwrap();
    let y = ffn.forward(&mut g, &ps, x).unwrap();
    for c in 0..2 {
        assert!((g.value(y).data()[c] - expect[c]).abs() < 1e-9);
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[3, 4]);
        let row = rand_t(&mut rng, &[4]);
        let checks: Vec<(&str, f64)> = vec![
            (
                "add",
                check_gradients(&[a.clone(), b.clone()], DEFAULT_STEP, |g, l| {
                    g.add(l[0], l[1])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "sub",
                check_gradients(&[a.clone(), b.clone()], DEFAULT_STEP, |g, l| {
                    g.sub(l[0], l[1])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "mul",
                check_gradients(&[a.clone(), b.clone()], DEFAULT_STEP, |g, l| {
                    g.mul(l[0], l[1])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "add_row",
                check_gradients(&[a.clone(), row.clone()], DEFAULT_STEP, |g, l| {
                    g.add_row(l[0], l[1])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "scale",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| {
                    g.scale(l[0], -1.7)
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "gelu",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| g.gelu(l[0]))
                    .unwrap()
                    .max_rel_err,
            ),
            (
                "relu",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| g.relu(l[0]))
                    .unwrap()
                    .max_rel_err,
            ),
            (
                "sigmoid",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| {
                    g.sigmoid(l[0])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "softmax",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| {
                    g.softmax(l[0])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "mean",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| g.mean(l[0]))
                    .unwrap()
                    .max_rel_err,
            ),
            (
                "gather_rows",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| {
                    g.gather_rows(l[0], vec![2, 0, 2])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "gather",
                check_gradients(std::slice::from_ref(&a), DEFAULT_STEP, |g, l| {
                    g.gather(l[0], vec![Some(3), None, Some(3), Some(11)], vec![2, 2])
                })
                .unwrap()
                .max_rel_err,
            ),
            (
                "concat_rows",
                check_gradients(&[a.clone(), b.clone()], DEFAULT_STEP, |g, l| {
                    g.concat_rows(&[l[0], l[1], l[0]])
                })
                .unwrap()
                .max_rel_err,
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn ffn_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 4, 16, &mut rng);
    for _ in 0..5 {
        let x = rand_t(&mut rng, &[3, 4]);
        let r = check_gradients(&[x], DEFAULT_STEP, |g, l| ffn.forward(g, &ps, l[0])).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::filled(&[2], 1e30)).unwrap();
    assert!(g.mul(a, a).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, "mha", 16, 4, &mut rng).unwrap();
        let x = Tensor::<f32>::from_fn(&[33, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
        let mut g = Graph::<f32>::new();
        let xn = g.leaf(x, true).unwrap();
        let y = mha.forward(&mut g, &ps, xn, xn, None).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(xn).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_accumulates_shared_param_uses() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
    let mut g = Graph::<f32>::new();
    let x = g
        .constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap())
        .unwrap();
    let w1 = g.param(&ps, w).unwrap();
    let y = g.matmul(x, w1).unwrap();
    let w2 = g.param(&ps, w).unwrap();
    let z = g.matmul(y, w2).unwrap(); // 2 w²
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1.data(), &[12.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
    ps.set_trainable("w", false);
    let mut g = Graph::<f32>::new();
    let x = g
        .leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), true)
        .unwrap();
    let wn = g.param(&ps, w).unwrap();
    let y = g.matmul(x, wn).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.param_grads().is_empty());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut ps = ParamStore::new();
        let n = vals.len();
        ps.add("p", Tensor::new(vec![n], vals).unwrap(), true);
        let ck = clift_tensor::Checkpoint::from_store(&ps);
        let back = clift_tensor::Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
