use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lqer_core::linalg::{frobenius_norm, matmul, svd, truncate, DenseMatrix};

fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-10.0..10.0))
}

/// Singular values as square roots of the eigenvalues of `MᵀM` (or `MMᵀ`),
/// descending, from nalgebra's symmetric eigensolver.
fn gram_sigma(m: &DenseMatrix) -> Vec<f64> {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let gram = if m.rows() >= m.cols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let mut ev: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

#[test]
fn svd_matches_gram_eigen_oracle() {
    for seed in 0..20 {
        let m = random(5, 4, seed);
        let got = svd(&m).unwrap().sigma;
        let want = gram_sigma(&m);
        for (g, w) in got.iter().zip(&want) {
            assert!(
                (g - w).abs() <= 1e-8 * w,
                "seed {seed}: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn svd_matches_gram_eigen_oracle_other_shapes() {
    for (seed, (r, c)) in [(3, 7), (9, 2), (6, 6), (12, 10), (1, 5)]
        .into_iter()
        .enumerate()
    {
        let m = random(r, c, 100 + seed as u64);
        let got = svd(&m).unwrap().sigma;
        let want = gram_sigma(&m);
        assert_eq!(got.len(), r.min(c));
        for (g, w) in got.iter().zip(&want) {
            assert!(
                (g - w).abs() <= 1e-8 * want[0],
                "{r}x{c}: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(7, 5, 1);
    let b = random(5, 3, 2);
    let c = matmul(&a, &b).unwrap();
    for i in 0..7 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..5 {
                s += a.get(i, p) * b.get(p, j);
            }
            assert!((c.get(i, j) - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn frobenius_matches_element_sum() {
    let m = random(6, 6, 3);
    let oracle = m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((frobenius_norm(&m) - oracle).abs() <= 1e-14 * oracle);
}

fn max_offset_from_identity(q: &DenseMatrix) -> f64 {
    let g = matmul(&q.transpose(), q).unwrap();
    let n = g.rows();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (g.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn matrix_strategy() -> impl Strategy<Value = DenseMatrix> {
    (1usize..=10, 1usize..=10).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn svd_result_invariants(m in matrix_strategy()) {
        let s = svd(&m).unwrap();
        prop_assert_eq!(s.sigma.len(), m.rows().min(m.cols()));
        prop_assert!(s.sigma.iter().all(|&v| v >= 0.0));
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(max_offset_from_identity(&s.u) <= 1e-10);
        prop_assert!(max_offset_from_identity(&s.v) <= 1e-10);
        let full = truncate(&s, s.sigma.len()).unwrap().reconstruct();
        let resid = frobenius_norm(&full.sub(&m).unwrap());
        prop_assert!(resid <= 1e-8 * frobenius_norm(&m).max(1.0));
    }

    #[test]
    fn svd_is_deterministic(m in matrix_strategy()) {
        let a: Vec<u64> = svd(&m).unwrap().sigma.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = svd(&m).unwrap().sigma.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncation_residual_is_discarded_spectrum(m in matrix_strategy()) {
        let s = svd(&m).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=s.sigma.len() {
            let resid = frobenius_norm(&m.sub(&truncate(&s, k).unwrap().reconstruct()).unwrap());
            let tail: f64 = s.sigma[k..].iter().map(|v| v * v).sum();
            prop_assert!((resid * resid - tail).abs() <= 1e-8 * tail.max(1e-8 * frobenius_norm(&m).powi(2)));
            prop_assert!(resid <= prev * (1.0 + 1e-12) + 1e-12);
            prev = resid;
        }
    }
}
