use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use subtune_core::linalg::{numerical_rank, pinv, svd};
use subtune_core::Matrix;

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn matrix() -> impl Strategy<Value = Matrix> {
    (1usize..12, 1usize..12).prop_flat_map(|(n, m)| {
        prop::collection::vec(-10.0f64..10.0, n * m).prop_map(move |data| Matrix::new(n, m, data).unwrap())
    })
}

proptest! {
    #[test]
    fn singular_values_match_reference(w in matrix()) {
        let f = svd(&w).unwrap();
        let mut reference: Vec<f64> = to_nalgebra(&w).singular_values().iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let scale = reference[0].max(1.0);
        for (a, b) in f.sigma().iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-11 * scale, "{a} vs {b}");
        }
        prop_assert!(f.sigma().windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn products_match_reference(a in matrix(), seed in 0u64..1000) {
        let b = Matrix::from_fn(a.cols(), 5, |i, j| ((i * 7 + j * 3) as f64 + seed as f64).sin());
        let ours = a.matmul(&b).unwrap();
        let theirs = to_nalgebra(&a) * to_nalgebra(&b);
        prop_assert!(to_nalgebra(&ours).relative_eq(&theirs, 1e-12, 1e-12));
        let at = a.transpose();
        prop_assert_eq!(at.t_matmul(&b.transpose().transpose()).unwrap(), ours.clone());
        prop_assert!(ours.max_abs_diff(&a.matmul_t(&b.transpose()).unwrap()) <= 1e-12);
    }

    #[test]
    fn pinv_matches_reference_on_full_rank(w in matrix()) {
        prop_assume!(numerical_rank(&w).unwrap() == w.rows().min(w.cols()));
        let f = svd(&w).unwrap();
        let cond = f.sigma()[0] / f.sigma()[f.k() - 1];
        prop_assume!(cond < 1e6);
        let ours = to_nalgebra(&pinv(&w).unwrap());
        let theirs = to_nalgebra(&w).pseudo_inverse(1e-12).unwrap();
        prop_assert!(ours.relative_eq(&theirs, 1e-8, 1e-8));
    }
}

#[test]
fn rank_deficient_outer_product() {
    let u = Matrix::from_fn(6, 1, |i, _| i as f64 + 1.0);
    let v = Matrix::from_fn(1, 4, |_, j| 2.0 - j as f64);
    let w = u.matmul(&v).unwrap();
    assert_eq!(numerical_rank(&w).unwrap(), 1);
    let f = svd(&w).unwrap();
    assert_relative_eq!(f.sigma()[0], u.frobenius_norm() * v.frobenius_norm(), max_relative = 1e-12);
    let p = pinv(&w).unwrap();
    assert!(w.matmul(&p).unwrap().matmul(&w).unwrap().max_abs_diff(&w) < 1e-12);
}
