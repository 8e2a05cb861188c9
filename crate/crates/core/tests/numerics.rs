mod common;

use common::{naive_attend, rng, uniform_vec};
use rand::Rng;
use reattention::numerics::{attend, attend_with_entropy, rope_rotate, stable_softmax, DenseMatrix, RotaryTable};

#[test]
fn softmax_is_probability_vector_under_fuzz() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let n = r.gen_range(1..64);
        let scale = [1.0f32, 100.0, 1e4][r.gen_range(0..3)];
        let logits = uniform_vec(&mut r, n, scale);
        let p = stable_softmax(&logits).unwrap();
        let sum: f64 = p.iter().map(|&x| x as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        // Monotone: larger logit never gets a smaller probability.
        let (imax, _) = logits
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |a, (i, &x)| if x > a.1 { (i, x) } else { a });
        assert!(p.iter().all(|&x| x <= p[imax]));
    }
}

/// Inverse rotation computed directly from the angle definition.
fn unrotate(row: &mut [f32], pos: usize, base: f64) {
    let d = row.len();
    for i in 0..d / 2 {
        let angle = -(pos as f64) * base.powf(-((2 * i) as f64) / d as f64);
        let (c, s) = (angle.cos(), angle.sin());
        let (x0, x1) = (row[2 * i] as f64, row[2 * i + 1] as f64);
        row[2 * i] = (x0 * c - x1 * s) as f32;
        row[2 * i + 1] = (x0 * s + x1 * c) as f32;
    }
}

#[test]
fn rope_inverse_rotation_recovers_input() {
    let table = RotaryTable::new(64, 10000.0, 4096).unwrap();
    let mut r = rng(2);
    let data = uniform_vec(&mut r, 8 * 64, 1.0);
    let m = DenseMatrix::from_vec(8, 64, data).unwrap();
    let positions: Vec<usize> = (0..8).map(|_| r.gen_range(0..4096)).collect();
    let mut rotated = rope_rotate(m.view(), &positions, &table).unwrap();
    for (i, &p) in positions.iter().enumerate() {
        unrotate(rotated.row_mut(i), p, 10000.0);
    }
    for (a, b) in rotated.as_slice().iter().zip(m.as_slice()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn rope_preserves_row_norms() {
    let mut r = rng(3);
    for &(d, base) in &[(2usize, 10000.0), (32, 10000.0), (64, 500000.0), (128, 10000.0)] {
        let table = RotaryTable::new(d, base, 8192).unwrap();
        for _ in 0..200 {
            let row = uniform_vec(&mut r, d, 10.0);
            let m = DenseMatrix::from_vec(1, d, row.clone()).unwrap();
            let p = r.gen_range(0..8192);
            let out = rope_rotate(m.view(), &[p], &table).unwrap();
            let n0: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let n1: f64 = out.row(0).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() <= 1e-5 * n0.max(1.0), "{n0} vs {n1}");
        }
    }
}

#[test]
fn streaming_attend_matches_naive_oracle() {
    check_attend_against_oracle(4, 1000, 1.0, 1e-6);
}

#[test]
fn streaming_attend_matches_naive_oracle_on_peaked_scores() {
    check_attend_against_oracle(6, 200, 8.0, 1e-5);
}

fn check_attend_against_oracle(seed: u64, cases: usize, scale: f32, tol: f32) {
    let mut r = rng(seed);
    for case in 0..cases {
        let n_q = r.gen_range(1..=8);
        let len = r.gen_range(1..=512);
        let d = [4usize, 8, 16, 32, 64][r.gen_range(0..5)];
        let q = uniform_vec(&mut r, n_q * d, scale);
        let k = uniform_vec(&mut r, len * d, scale);
        let v = uniform_vec(&mut r, len * d, 1.0);
        let boundary = if r.gen_bool(0.5) {
            Some(len.saturating_sub(n_q))
        } else {
            None
        };
        let qm = DenseMatrix::from_vec(n_q, d, q.clone()).unwrap();
        let km = DenseMatrix::from_vec(len, d, k.clone()).unwrap();
        let vm = DenseMatrix::from_vec(len, d, v.clone()).unwrap();
        let (got, entropy) = attend_with_entropy(qm.view(), km.view(), vm.view(), boundary).unwrap();
        let want = naive_attend(&q, &k, &v, n_q, len, d, boundary);
        let err = got
            .as_slice()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= tol, "case {case}: max abs err {err}");
        for (i, h) in entropy.iter().enumerate() {
            let visible = boundary.map_or(len, |b| (b + i + 1).min(len));
            assert!(*h <= (visible as f64).ln() + 1e-9 && *h >= 0.0);
        }
    }
}

#[test]
fn entropy_matches_explicit_weights() {
    let mut r = rng(5);
    let (len, d) = (100, 16);
    let q = uniform_vec(&mut r, d, 3.0);
    let k = uniform_vec(&mut r, len * d, 3.0);
    let qm = DenseMatrix::from_vec(1, d, q.clone()).unwrap();
    let km = DenseMatrix::from_vec(len, d, k.clone()).unwrap();
    let (_, h) = attend_with_entropy(qm.view(), km.view(), km.view(), None).unwrap();
    let scores: Vec<f32> = (0..len)
        .map(|j| reattention::numerics::dot(&q, &k[j * d..(j + 1) * d]) / (d as f32).sqrt())
        .collect();
    let p: Vec<f64> = stable_softmax(&scores).unwrap().into_iter().map(f64::from).collect();
    let want = reattention::numerics::attention_entropy(&p);
    assert!((h[0] - want).abs() < 1e-5, "{} vs {want}", h[0]);
    let _ = attend(qm.view(), km.view(), km.view(), None).unwrap();
}
