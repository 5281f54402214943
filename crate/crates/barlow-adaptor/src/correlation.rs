//! Cross-domain correlation and feature covariance, with their exact input
//! gradients.
//!
//! The correlation matrix between two projection batches is
//!
//! ```text
//! C[i][j] = sum_b ps[b][i] * pt[b][j] / (||ps[:,i]|| * ||pt[:,j]||)
//! ```
//!
//! with an epsilon guard on the column norms (`max(norm, 1e-12)`) so
//! degenerate columns yield zeros instead of NaN. The covariance of a feature
//! batch follows the Deep CORAL convention with the whole expression over
//! B-1, which keeps it translation invariant and positive semi-definite:
//!
//! ```text
//! cov(f) = (f^T f - (1/B) (1^T f)^T (1^T f)) / (B - 1)
//! ```

use crate::error::{Error, Result};
use crate::matrix::{matmul_tn, Matrix, Scalar};

/// Floor applied to column L2 norms in the correlation denominator.
pub const NORM_GUARD: f64 = 1e-12;

/// Cross-domain correlation matrix plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix<T: Scalar> {
    values: Matrix<T>,
    /// Guarded column norms of the two inputs.
    norms_s: Vec<T>,
    norms_t: Vec<T>,
    /// True where the guard replaced a smaller true norm; the norm is treated
    /// as a constant there in the backward pass.
    clamped_s: Vec<bool>,
    clamped_t: Vec<bool>,
    p_s: Matrix<T>,
    p_t: Matrix<T>,
}

impl<T: Scalar> CorrelationMatrix<T> {
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.get(i, j)
    }
}

fn guarded_col_norms<T: Scalar>(m: &Matrix<T>) -> (Vec<T>, Vec<bool>) {
    let guard = T::from_f64(NORM_GUARD);
    let mut norms = Vec::with_capacity(m.cols());
    let mut clamped = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let mut sq = T::zero();
        for i in 0..m.rows() {
            let v = m.get(i, j);
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm < guard {
            norms.push(guard);
            clamped.push(true);
        } else {
            norms.push(norm);
            clamped.push(false);
        }
    }
    (norms, clamped)
}

/// Correlation between the columns of two equally-shaped projection batches.
pub fn cross_correlation<T: Scalar>(
    p_s: &Matrix<T>,
    p_t: &Matrix<T>,
) -> Result<CorrelationMatrix<T>> {
    if p_s.shape() != p_t.shape() {
        return Err(Error::DimensionMismatch {
            op: "cross_correlation",
            left_rows: p_s.rows(),
            left_cols: p_s.cols(),
            right_rows: p_t.rows(),
            right_cols: p_t.cols(),
        });
    }
    let (norms_s, clamped_s) = guarded_col_norms(p_s);
    let (norms_t, clamped_t) = guarded_col_norms(p_t);

    let numerator = matmul_tn(p_s, p_t)?;
    let p = p_s.cols();
    let values = Matrix::from_fn(p, p, |i, j| numerator.get(i, j) / (norms_s[i] * norms_t[j]));

    Ok(CorrelationMatrix {
        values,
        norms_s,
        norms_t,
        clamped_s,
        clamped_t,
        p_s: p_s.clone(),
        p_t: p_t.clone(),
    })
}

/// Gradients of a scalar loss w.r.t. both correlation inputs, given the
/// upstream gradient on the correlation matrix itself.
///
/// The column norms in the denominator are differentiated through (full
/// quotient rule), except where the guard clamped them.
pub fn cross_correlation_backward<T: Scalar>(
    corr: &CorrelationMatrix<T>,
    grad_c: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let p = corr.dim();
    if grad_c.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            op: "cross_correlation_backward",
            left_rows: grad_c.rows(),
            left_cols: grad_c.cols(),
            right_rows: p,
            right_cols: p,
        });
    }
    let b = corr.p_s.rows();

    // Row/column contractions of G with C, used by the norm-derivative term.
    let mut gc_rows = vec![T::zero(); p]; // sum_j G[i][j] C[i][j]
    let mut gc_cols = vec![T::zero(); p]; // sum_i G[i][j] C[i][j]
    for i in 0..p {
        for j in 0..p {
            let gv = grad_c.get(i, j);
            let cv = corr.values.get(i, j);
            gc_rows[i] += gv * cv;
            gc_cols[j] += gv * cv;
        }
    }

    let mut grad_ps = Matrix::zeros(b, p);
    let mut grad_pt = Matrix::zeros(b, p);
    for bi in 0..b {
        for i in 0..p {
            // d/dps[b][i]: sum_j G[i][j] * (pt[b][j]/(ns_i*nt_j)) - ps[b][i]/ns_i^2 * sum_j G[i][j] C[i][j]
            let mut acc = T::zero();
            for j in 0..p {
                acc += grad_c.get(i, j) * corr.p_t.get(bi, j) / corr.norms_t[j];
            }
            let mut g = acc / corr.norms_s[i];
            if !corr.clamped_s[i] {
                g -= corr.p_s.get(bi, i) / (corr.norms_s[i] * corr.norms_s[i]) * gc_rows[i];
            }
            grad_ps.set(bi, i, g);
        }
        for j in 0..p {
            let mut acc = T::zero();
            for i in 0..p {
                acc += grad_c.get(i, j) * corr.p_s.get(bi, i) / corr.norms_s[i];
            }
            let mut g = acc / corr.norms_t[j];
            if !corr.clamped_t[j] {
                g -= corr.p_t.get(bi, j) / (corr.norms_t[j] * corr.norms_t[j]) * gc_cols[j];
            }
            grad_pt.set(bi, j, g);
        }
    }
    Ok((grad_ps, grad_pt))
}

/// Unbiased covariance of a feature batch, Deep CORAL parenthesization.
pub fn covariance<T: Scalar>(f: &Matrix<T>) -> Result<Matrix<T>> {
    let (b, _d) = f.shape();
    if b < 2 {
        return Err(Error::BatchTooSmall {
            what: "covariance",
            got: b,
        });
    }
    let n = T::from_f64(b as f64);
    let gram = matmul_tn(f, f)?;
    let sums = f.col_sums();
    let denom = n - T::one();
    let cov = Matrix::from_fn(f.cols(), f.cols(), |i, j| {
        (gram.get(i, j) - sums[i] * sums[j] / n) / denom
    });
    Ok(cov)
}

/// Gradient of a scalar loss w.r.t. the covariance input: for upstream G,
/// `grad_f = (f - 1*mean) (G + G^T) / (B - 1)`.
pub fn covariance_backward<T: Scalar>(f: &Matrix<T>, grad_cov: &Matrix<T>) -> Result<Matrix<T>> {
    let (b, d) = f.shape();
    if grad_cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            op: "covariance_backward",
            left_rows: grad_cov.rows(),
            left_cols: grad_cov.cols(),
            right_rows: d,
            right_cols: d,
        });
    }
    if b < 2 {
        return Err(Error::BatchTooSmall {
            what: "covariance_backward",
            got: b,
        });
    }
    let means = f.col_means();
    let centered = f.sub_row_broadcast(&means);
    let sym = grad_cov.add(&grad_cov.transpose())?;
    let denom = T::from_f64((b - 1) as f64);
    let grad = crate::matrix::matmul(&centered, &sym)?;
    Ok(grad.scale(denom.recip()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_self_correlation() {
        let p = Matrix::column(&[1.0, -1.0]);
        let c = cross_correlation(&p, &p).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_correlation() {
        let p = Matrix::column(&[1.0, -1.0]);
        let neg = p.scale(-1.0);
        let c = cross_correlation(&p, &neg).unwrap();
        assert!((c.get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_case_two_columns() {
        // p_s columns (1,1) and (0,2); p_t columns (1,-1) and (2,0).
        let p_s = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 2.0]);
        let p_t = Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.0]);
        let c = cross_correlation(&p_s, &p_t).unwrap();
        assert!((c.get(0, 0) - 0.0).abs() < 1e-5);
        assert!((c.get(0, 1) - 0.70711).abs() < 1e-5);
        assert!((c.get(1, 0) + 0.70711).abs() < 1e-5);
        assert!((c.get(1, 1) - 0.0).abs() < 1e-5);
    }

    #[test]
    fn zero_column_is_guarded_to_zero() {
        let p_s = Matrix::from_vec(2, 1, vec![0.0, 0.0]);
        let p_t = Matrix::column(&[1.0, -1.0]);
        let c = cross_correlation(&p_s, &p_t).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert!(c.values().is_finite());
    }

    #[test]
    fn covariance_of_identical_rows_is_zero() {
        let f = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let c = covariance(&f).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn covariance_hand_case() {
        // Single feature (0, 2): ((0-1)^2 + (2-1)^2) / 1 = 2.
        let f = Matrix::column(&[0.0, 2.0]);
        let c = covariance(&f).unwrap();
        assert!((c.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_translation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-2.0..2.0f64));
        let offset: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let shifted = Matrix::from_fn(5, 3, |i, j| f.get(i, j) + offset[j]);
        let c0 = covariance(&f).unwrap();
        let c1 = covariance(&shifted).unwrap();
        let diff = c0.sub(&c1).unwrap();
        assert!(diff.max_abs() < 1e-9);
    }

    #[test]
    fn covariance_rejects_single_row() {
        let f = Matrix::<f64>::zeros(1, 4);
        assert!(matches!(
            covariance(&f),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn correlation_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let p_s = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0f64));
        let p_t = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0f64));
        let cot = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let loss = |ps: &Matrix<f64>, pt: &Matrix<f64>| {
            let c = cross_correlation(ps, pt).unwrap();
            c.values()
                .as_slice()
                .iter()
                .zip(cot.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let corr = cross_correlation(&p_s, &p_t).unwrap();
        let (grad_ps, grad_pt) = cross_correlation_backward(&corr, &cot).unwrap();

        let h = 1e-5;
        for bi in 0..4 {
            for j in 0..3 {
                let mut plus = p_s.clone();
                plus.set(bi, j, p_s.get(bi, j) + h);
                let mut minus = p_s.clone();
                minus.set(bi, j, p_s.get(bi, j) - h);
                let numeric = (loss(&plus, &p_t) - loss(&minus, &p_t)) / (2.0 * h);
                let analytic = grad_ps.get(bi, j);
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(rel < 1e-5, "grad_ps[{bi}][{j}] rel err {rel}");

                let mut plus = p_t.clone();
                plus.set(bi, j, p_t.get(bi, j) + h);
                let mut minus = p_t.clone();
                minus.set(bi, j, p_t.get(bi, j) - h);
                let numeric = (loss(&p_s, &plus) - loss(&p_s, &minus)) / (2.0 * h);
                let analytic = grad_pt.get(bi, j);
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(rel < 1e-5, "grad_pt[{bi}][{j}] rel err {rel}");
            }
        }
    }

    fn arb_batch(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0..5.0f64, rows * cols)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn self_correlation_diagonal_is_one(data in arb_batch(6, 4)) {
            let p = Matrix::from_vec(6, 4, data);
            // Skip degenerate all-zero columns; the guard handles those separately.
            prop_assume!((0..4).all(|j| (0..6).any(|i| p.get(i, j).abs() > 1e-6)));
            let c = cross_correlation(&p, &p).unwrap();
            for i in 0..4 {
                prop_assert!((c.get(i, i) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn correlation_transposes_under_argument_swap(a in arb_batch(5, 3), b in arb_batch(5, 3)) {
            let p_s = Matrix::from_vec(5, 3, a);
            let p_t = Matrix::from_vec(5, 3, b);
            let c = cross_correlation(&p_s, &p_t).unwrap();
            let ct = cross_correlation(&p_t, &p_s).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((c.get(i, j) - ct.get(j, i)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn correlation_invariant_under_positive_column_scaling(
            data in arb_batch(5, 3),
            scales in proptest::collection::vec(0.1..10.0f64, 3),
        ) {
            let p_s = Matrix::from_vec(5, 3, data.clone());
            let p_t = Matrix::from_vec(5, 3, data);
            prop_assume!((0..3).all(|j| (0..5).any(|i| p_s.get(i, j).abs() > 1e-3)));
            let scaled = Matrix::from_fn(5, 3, |i, j| p_s.get(i, j) * scales[j]);
            let c0 = cross_correlation(&p_s, &p_t).unwrap();
            let c1 = cross_correlation(&scaled, &p_t).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((c0.get(i, j) - c1.get(i, j)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn correlation_entries_bounded(a in arb_batch(4, 3), b in arb_batch(4, 3)) {
            let c = cross_correlation(
                &Matrix::from_vec(4, 3, a),
                &Matrix::from_vec(4, 3, b),
            ).unwrap();
            for v in c.values().as_slice() {
                prop_assert!(v.abs() <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn covariance_is_symmetric_psd(data in arb_batch(6, 3), probe in arb_batch(3, 1)) {
            let f = Matrix::from_vec(6, 3, data);
            let c = covariance(&f).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-9);
                }
            }
            // PSD probe: z^T C z >= -1e-9 for arbitrary z.
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += probe[i] * c.get(i, j) * probe[j];
                }
            }
            prop_assert!(quad >= -1e-9);
        }
    }
}
