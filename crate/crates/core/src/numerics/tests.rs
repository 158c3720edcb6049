use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::check_gradients;
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(1);
    let a = Tensor::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let p = g.matmul(va, vb).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
            }
            assert!((g.value(p).data()[i * 3 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let ninf = f64::NEG_INFINITY;
    let x = g.constant(t(&[4], &[2.0, 1.0, ninf, ninf]));
    let s = g.softmax(x, 0).unwrap();
    let e2 = 2f64.exp();
    let e1 = 1f64.exp();
    let expect = [e2 / (e2 + e1), e1 / (e2 + e1), 0.0, 0.0];
    for (a, b) in g.value(s).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((expect[0] - 0.7311).abs() < 1e-4 && (expect[1] - 0.2689).abs() < 1e-4);
    assert_eq!(g.value(s).data()[2], 0.0);
}

#[test]
fn softmax_all_masked_is_degenerate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3], f64::NEG_INFINITY));
    assert!(matches!(g.softmax(x, 0), Err(Error::Degenerate(_))));
}

#[test]
fn softmax_along_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
    for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((a - b).abs() < 1e-12);
    }

    let row = Tensor::randn(&[1, 16], 3.0, &mut rng(2));
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let x = g.constant(row);
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 16.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 4]));
    let ce = g.cross_entropy(l, &[2]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

    let l = g.constant(t(&[1, 3], &[60.0, 0.0, 0.0]));
    let ce = g.cross_entropy(l, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-25);

    let logits = Tensor::randn(&[3, 5], 2.0, &mut rng(3));
    let targets = [4, 0, 2];
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, &targets).unwrap();
    let mut manual = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        manual += -(row[tgt].exp() / z).ln();
    }
    assert!((g.value(ce).item() - manual / 3.0).abs() < 1e-10);

    assert!(matches!(g.cross_entropy(l, &[5, 0, 0]), Err(Error::Index(_))));
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

#[test]
fn backward_twice_doubles_leaf_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.5, -0.5]), true);
    let y = g.silu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    for (a, b) in g.grad(x).unwrap().iter().zip(&once) {
        assert_eq!(*a, 2.0 * b);
    }
    g.zero_grad();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let unused = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut r = rng(11);
    let inputs = vec![
        Tensor::randn(&[4, 6], 1.0, &mut r),
        Tensor::randn(&[6, 5], 0.5, &mut r),
        Tensor::randn(&[5], 1.0, &mut r),
        Tensor::randn(&[5], 0.3, &mut r),
    ];
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
        let a = g.silu(h);
        let b = g.sigmoid(h);
        let c = g.mul(a, b)?;
        let c = g.relu(c);
        let s = g.softmax(c, 1)?;
        let n = g.row_normalize(s);
        let p = g.pick(n, &[0, 3, 7, 11, 19])?;
        let lse = g.cross_entropy(c, &[0, 4, 2, 1])?;
        let ps = g.mean(p);
        let t = g.scale(ps, 0.7);
        let t = g.add_scalar(t, 1.0);
        g.add(t, lse)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn indexing_gradients_match_finite_differences() {
    let mut r = rng(12);
    let inputs = vec![
        Tensor::randn(&[5, 4], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let rows = g.gather_rows(v[0], &[4, 1, 1])?;
        let scaled = g.scale_rows(rows, v[1])?;
        let back = g.scatter_add_rows(scaled, &[0, 2, 0], 3)?;
        let pooled = g.segment_mean(back, &[(0, 2), (1, 2)])?;
        let nt = g.matmul_nt(pooled, v[0])?;
        let sq = g.mul(nt, nt)?;
        let d = g.sub(sq, nt)?;
        Ok(g.sum(d))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn attention_and_rotary_gradients_match_finite_differences() {
    let mut r = rng(13);
    let (rows, d, heads) = (7, 8, 2);
    let inputs = vec![
        Tensor::randn(&[rows, d], 1.0, &mut r),
        Tensor::randn(&[rows, d], 1.0, &mut r),
        Tensor::randn(&[rows, d], 1.0, &mut r),
        Tensor::randn(&[3, d], 1.0, &mut r),
    ];
    let table = Arc::new(RotaryTable::new(d / heads, 16, 10_000.0));
    let positions = Arc::new(vec![0, 1, 2, 3, 0, 1, 2]);
    let causal = Arc::new(AttnLayout::self_attention(&[4, 3], heads, true));
    let cross = Arc::new(AttnLayout::cross_attention(&[4, 3], &[1, 2], heads));
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let q = g.rotary(v[0], heads, table.clone(), positions.clone())?;
        let k = g.rotary(v[1], heads, table.clone(), positions.clone())?;
        let a = g.attention(q, k, v[2], causal.clone())?;
        let c = g.attention(a, v[3], v[3], cross.clone())?;
        let w = g.constant(Tensor::randn(&[rows, d], 1.0, &mut rng(99)));
        let prod = g.mul(c, w)?;
        Ok(g.sum(prod))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut r = rng(14);
    let x = Tensor::randn(&[4, 4], 1.0, &mut r);
    let mut y = x.clone();
    y.data_mut()[12..16].copy_from_slice(&[9.0, -9.0, 3.0, 1.0]);
    let layout = Arc::new(AttnLayout::self_attention(&[4], 2, true));
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let o = g.attention(v, v, v, layout.clone()).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    assert_eq!(&a.data()[..12], &b.data()[..12]);
    assert_ne!(&a.data()[12..], &b.data()[12..]);
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::default();
    let mut p = vec![1.0, -2.0];
    let mut st = AdamState::new(2);
    st.m = vec![0.5, 0.5];
    st.v = vec![0.25, 0.25];
    adam_step("w", &mut p, &[0.0, 0.0], &mut st, 0.1, &cfg).unwrap();
    assert!((st.m[0] - 0.45).abs() < 1e-15);
    assert!((st.v[0] - 0.25 * 0.999).abs() < 1e-15);

    let mut p = vec![1.0, 1.0];
    let mut st = AdamState::new(2);
    adam_step("w", &mut p, &[0.0, 0.0], &mut st, 0.1, &cfg).unwrap();
    assert_eq!(p, vec![1.0, 1.0]);

    let mut p = vec![0.0, 0.0];
    let mut st = AdamState::new(2);
    adam_step("w", &mut p, &[3.0, -0.2], &mut st, 0.01, &cfg).unwrap();
    assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-8);

    let mut w = vec![1.0];
    let mut st = AdamState::new(1);
    for _ in 0..100 {
        let grad = [2.0 * w[0]];
        adam_step("w", &mut w, &grad, &mut st, 0.1, &cfg).unwrap();
    }
    assert!(w[0].abs() < 0.5);

    let err = adam_step("layer.w", &mut w, &[f64::NAN], &mut st, 0.1, &cfg).unwrap_err();
    assert!(err.to_string().contains("layer.w"));
}

#[test]
fn param_store_binding_accumulates_across_uses() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, 2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let s1 = g.sum(a);
    let s2 = g.sum(b);
    let s = g.add(s1, s2).unwrap();
    g.backward(s).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.grad(w), &[2.0, 2.0]);

    store.set_frozen(w, true);
    let mut g = Graph::new();
    let a = g.param(&store, w);
    assert!(!g.requires_grad(a));
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut r = rng(21);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[6, 8], 1.0, &mut r), true);
        let w = g.leaf(Tensor::randn(&[8, 8], 1.0, &mut r), true);
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 2, 3, 4, 5]).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in proptest::collection::vec(-30.0f64..30.0, 1..9),
        c in -50.0f64..50.0,
    ) {
        let n = xs.len();
        let a = softmax_values(&Tensor::new(vec![n], xs.clone()).unwrap(), 0).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = softmax_values(&Tensor::new(vec![n], shifted).unwrap(), 0).unwrap();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0));
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn random_small_ops_pass_gradient_check(
        seed in 0u64..1000,
        m in 1usize..5,
        k in 1usize..6,
        n in 2usize..6,
    ) {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[m, k], 1.0, &mut r),
            Tensor::randn(&[k, n], 1.0, &mut r),
            Tensor::randn(&[n], 1.0, &mut r),
            Tensor::randn(&[n], 1.0, &mut r),
        ];
        let targets: Vec<usize> = (0..m).map(|i| (i + seed as usize) % n).collect();
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
            let h = g.silu(h);
            g.cross_entropy(h, &targets)
        }).unwrap();
        prop_assert!(report.passes(1e-4), "{:?}", report);
    }
}
