use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

#[test]
fn matmul_identity_and_annihilation() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(a.matmul(&eye).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

    let p = Tensor::new(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
    let q = Tensor::new(vec![0.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(p.matmul(&q).unwrap().to_vec(), vec![0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = random(&mut rng, &[3, 4]);
    let b0 = random(&mut rng, &[4, 2]);
    let w = random(&mut rng, &[3, 2]);
    let err_a = finite_diff_check(|a| a.matmul(&b0).unwrap().mul(&w).unwrap().sum(), &a0, 1e-5);
    let err_b = finite_diff_check(|b| a0.matmul(b).unwrap().mul(&w).unwrap().sum(), &b0, 1e-5);
    assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
}

#[test]
fn linear_matches_matmul_with_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 5]);
    let w = random(&mut rng, &[2, 5]);
    let mut wt = vec![0.0; 10];
    for o in 0..2 {
        for i in 0..5 {
            wt[i * 2 + o] = w.data()[o * 5 + i];
        }
    }
    let wt = Tensor::new(wt, &[5, 2]).unwrap();
    let a = x.linear(&w).unwrap().to_vec();
    let b = x.matmul(&wt).unwrap().to_vec();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
    let mask = random(&mut rng, &[3, 2]);
    assert!(finite_diff_check(|x| x.linear(&w).unwrap().mul(&mask).unwrap().sum(), &x, 1e-5) < 1e-6);
    assert!(finite_diff_check(|w| x.linear(w).unwrap().mul(&mask).unwrap().sum(), &w, 1e-5) < 1e-6);
}

#[test]
fn softmax_values() {
    let z = Tensor::new(vec![0.0; 4], &[4]).unwrap();
    assert_eq!(softmax(&z).unwrap().to_vec(), vec![0.25; 4]);

    let y: Vec<f64> = softmax(&Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap())
        .unwrap()
        .to_vec();
    let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
    for (a, b) in y.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }

    let shifted = softmax(&Tensor::new(vec![101.0, 102.0, 103.0], &[3]).unwrap())
        .unwrap()
        .to_vec();
    for (a, b) in y.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_empty_axis() {
    let z = Tensor::<f64>::zeros(&[2, 0]);
    assert!(softmax(&z).is_err());
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 5]);
    let w = random(&mut rng, &[3, 5]);
    assert!(finite_diff_check(|x| softmax(x).unwrap().mul(&w).unwrap().sum(), &x, 1e-5) < 1e-6);
}

#[test]
fn silu_values_and_gradient() {
    let y: Vec<f64> = silu(&Tensor::new(vec![0.0, -50.0, 50.0, 1.0], &[4]).unwrap()).to_vec();
    assert_eq!(y[0], 0.0);
    assert!(y[1].abs() < 1e-18);
    assert!((y[2] - 50.0).abs() < 1e-15);
    assert!((y[3] - 0.7310585786300049).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[7]).scale(3.0).detach();
    assert!(finite_diff_check(|x| silu(x).sum(), &x, 1e-5) < 1e-6);
}

#[test]
fn rmsnorm_cases() {
    let w = Tensor::new(vec![1.0; 4], &[4]).unwrap();
    let z = Tensor::<f64>::zeros(&[2, 4]);
    assert_eq!(rmsnorm(&z, &w, 1e-5).unwrap().to_vec(), vec![0.0; 8]);

    let x = Tensor::new(vec![1.0, -1.0, 1.0, -1.0], &[1, 4]).unwrap();
    let y = rmsnorm(&x, &w, 1e-12).unwrap().to_vec();
    for (a, b) in y.iter().zip(x.data().iter()) {
        assert!((a - b).abs() < 1e-9);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 6]);
    let w = random(&mut rng, &[6]);
    let m = random(&mut rng, &[3, 6]);
    assert!(finite_diff_check(|x| rmsnorm(x, &w, 1e-5).unwrap().mul(&m).unwrap().sum(), &x, 1e-5) < 1e-5);
    assert!(finite_diff_check(|w| rmsnorm(&x, w, 1e-5).unwrap().mul(&m).unwrap().sum(), &w, 1e-5) < 1e-5);
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::new(vec![0.3; 2 * 7], &[2, 7]).unwrap();
    let l = cross_entropy(&uniform, &[0, 6]).unwrap().item();
    assert!((l - 7f64.ln()).abs() < 1e-12);

    let mut losses = vec![];
    for margin in [1.0, 10.0, 100.0] {
        let z = Tensor::new(vec![margin, 0.0, 0.0], &[1, 3]).unwrap();
        losses.push(cross_entropy(&z, &[0]).unwrap().item());
    }
    assert!(losses[0] > losses[1] && losses[1] > losses[2] && losses[2] < 1e-40);

    assert!(matches!(
        cross_entropy(&uniform, &[0, 7]),
        Err(crate::Error::Index { index: 7, .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[4, 7]).scale(3.0).detach();
    assert!(finite_diff_check(|z| cross_entropy(z, &[1, 0, 6, 3]).unwrap(), &logits, 1e-5) < 1e-5);
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let x = Tensor::param(vec![1.0, -2.0, 5.0], &[3]).unwrap();
    let c = Tensor::new(vec![1.0, 1.0, 1.0], &[3]).unwrap();
    let loss = x.add(&c).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    assert!(c.grad().is_none());
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(crate::Error::Contract(_))));
}

#[test]
fn shared_subexpression_gradients_add_up() {
    // f = sum(x * x) + sum(x): shared use of x through two paths.
    let x0 = Tensor::new(vec![0.5, -1.5, 2.0], &[3]).unwrap();
    let err = finite_diff_check(
        |x| {
            let sq = x.mul(x).unwrap();
            sq.add(x).unwrap().sum()
        },
        &x0,
        1e-5,
    );
    assert!(err < 1e-8);
}

#[test]
fn row_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 3]);
    let col = Tensor::new(vec![0.3, 0.9, 0.2, 0.7], &[4]).unwrap();
    let m = random(&mut rng, &[5, 3]);
    let f = |x: &Tensor<f64>| {
        x.scale_rows(&col)
            .unwrap()
            .index_rows(&[0, 2, 2, 3])
            .unwrap()
            .scatter_rows(&[4, 0, 1, 1], 5)
            .unwrap()
            .mul(&m)
            .unwrap()
            .sum()
    };
    assert!(finite_diff_check(f, &x, 1e-5) < 1e-6);
    let g = |c: &Tensor<f64>| {
        x.scale_rows(c)
            .unwrap()
            .mul(&m.index_rows(&[0, 1, 2, 3]).unwrap())
            .unwrap()
            .sum()
    };
    assert!(finite_diff_check(g, &col, 1e-5) < 1e-6);

    let p = Tensor::new(vec![0.2, 0.5, 0.1, 0.9, 0.4, 0.3], &[2, 3]).unwrap();
    let w = random(&mut rng, &[2, 2]);
    let h = |p: &Tensor<f64>| {
        p.gather(&[0, 2, 4, 5], &[2, 2])
            .unwrap()
            .row_normalize()
            .mul(&w)
            .unwrap()
            .sum()
    };
    assert!(finite_diff_check(h, &p, 1e-5) < 1e-6);
}

#[test]
fn rope_is_norm_preserving_and_position_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[5, 8]);
    let y = rope(&x, 2, 10000.0).unwrap();
    let (xd, yd) = (x.to_vec(), y.to_vec());
    assert_eq!(&xd[..8], &yd[..8]);
    for t in 0..5 {
        let nx: f64 = xd[t * 8..t * 8 + 8].iter().map(|v| v * v).sum();
        let ny: f64 = yd[t * 8..t * 8 + 8].iter().map(|v| v * v).sum();
        assert!((nx - ny).abs() < 1e-12);
    }
    let m = random(&mut rng, &[5, 8]);
    assert!(finite_diff_check(|x| rope(x, 2, 10000.0).unwrap().mul(&m).unwrap().sum(), &x, 1e-5) < 1e-6);
}

#[test]
fn rope_scores_depend_on_relative_offset_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random(&mut rng, &[1, 4]).to_vec();
    let u = random(&mut rng, &[1, 4]).to_vec();
    let seq = |n: usize, first: &[f64], last: &[f64]| {
        let mut d = vec![0.0; n * 4];
        d[..4].copy_from_slice(first);
        d[(n - 1) * 4..].copy_from_slice(last);
        rope(&Tensor::new(d, &[n, 4]).unwrap(), 1, 100.0).unwrap().to_vec()
    };
    // score(q at pos 3, k at pos 0) vs score(q at pos 4, k at pos 1)
    let a = seq(4, &u, &v);
    let qa = &a[12..16];
    let ka = &a[0..4];
    let mut d = vec![0.0; 5 * 4];
    d[4..8].copy_from_slice(&u);
    d[16..20].copy_from_slice(&v);
    let b = rope(&Tensor::new(d, &[5, 4]).unwrap(), 1, 100.0).unwrap().to_vec();
    let (kb, qb) = (&b[4..8], &b[16..20]);
    let sa: f64 = qa.iter().zip(ka).map(|(p, q)| p * q).sum();
    let sb: f64 = qb.iter().zip(kb).map(|(p, q)| p * q).sum();
    assert!((sa - sb).abs() < 1e-12);
}

#[test]
fn attention_single_token_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = random(&mut rng, &[1, 6]);
    let k = random(&mut rng, &[1, 6]);
    let v = random(&mut rng, &[1, 6]);
    assert_eq!(causal_attention(&q, &k, &v, 3).unwrap().to_vec(), v.to_vec());
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = random(&mut rng, &[4, 6]);
    let k = random(&mut rng, &[4, 6]);
    let v = random(&mut rng, &[4, 6]);
    let m = random(&mut rng, &[4, 6]);
    assert!(
        finite_diff_check(
            |q| causal_attention(q, &k, &v, 2).unwrap().mul(&m).unwrap().sum(),
            &q,
            1e-5
        ) < 1e-5
    );
    assert!(
        finite_diff_check(
            |k| causal_attention(&q, k, &v, 2).unwrap().mul(&m).unwrap().sum(),
            &k,
            1e-5
        ) < 1e-5
    );
    assert!(
        finite_diff_check(
            |v| causal_attention(&q, &k, v, 2).unwrap().mul(&m).unwrap().sum(),
            &v,
            1e-5
        ) < 1e-6
    );
}

#[test]
fn frozen_leaf_never_gets_grad() {
    let w = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let x = Tensor::param(vec![0.5, 0.5], &[1, 2]).unwrap();
    x.linear(&w).unwrap().sum().backward().unwrap();
    assert!(w.grad().is_none());
    assert_eq!(x.grad().unwrap(), vec![4.0, 6.0]);
}

#[test]
fn constant_graph_records_nothing() {
    let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = a.scale(2.0);
    assert!(b.is_leaf() && !b.requires_grad());
}

#[test]
fn no_grad_skips_recording() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = no_grad(|| x.scale(2.0).sum());
    assert!(!y.requires_grad());
    assert!(x.scale(2.0).requires_grad());
}

#[test]
fn new_checks_shape_product() {
    assert!(Tensor::new(vec![1.0f32; 5], &[2, 3]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = v.len();
        let y = softmax(&Tensor::new(v, &[n]).unwrap()).unwrap().to_vec();
        prop_assert!(y.iter().all(|p| *p >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let c = random(&mut rng, &[n, p]);
        let l = a.matmul(&b).unwrap().matmul(&c).unwrap().to_vec();
        let r = a.matmul(&b.matmul(&c).unwrap()).unwrap().to_vec();
        for (x, y) in l.iter().zip(&r) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
