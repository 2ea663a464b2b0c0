//! Damped least-squares polynomial fits in a centered and scaled basis.
//!
//! Route positions reach several kilometres, so raw monomials `s^2`, `s^3`
//! give hopeless normal equations. Fits are computed in `z = (s - center) / scale`
//! and mapped back to the raw monomial basis afterwards.

use nalgebra::{DMatrix, DVector};

/// Result of a polynomial least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Coefficients of `1, s, s^2, ...` in raw position units, padded with
    /// zeros up to the requested degree.
    pub raw: Vec<f64>,
    /// Coefficients in the scaled basis.
    pub scaled: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    /// Degree actually fitted (lower than requested with too few distinct points).
    pub degree: usize,
    /// Largest absolute residual over the data.
    pub max_residual: f64,
    /// Mean squared residual over the data.
    pub mean_sq_residual: f64,
    /// Infinity norm of the damped normal-equation gradient in the scaled basis.
    pub optimality: f64,
}

impl PolyFit {
    pub fn eval(&self, s: f64) -> f64 {
        eval_poly(&self.raw, s)
    }

    /// Evaluation through the scaled basis, which is better conditioned far
    /// from the origin.
    pub fn eval_scaled(&self, s: f64) -> f64 {
        eval_poly(&self.scaled, (s - self.center) / self.scale)
    }
}

/// Horner evaluation of `sum c_i x^i`.
pub fn eval_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Derivative of `sum c_i x^i`.
pub fn eval_poly_derivative(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, c)| acc * x + i as f64 * c)
}

fn distinct_count(xs: &[f64], tol: f64) -> usize {
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut count = 0;
    let mut last = f64::NEG_INFINITY;
    for x in sorted {
        if x - last > tol {
            count += 1;
            last = x;
        }
    }
    count
}

/// Fits a polynomial of (at most) `degree` to `(xs, ys)`.
///
/// With fewer than `degree + 1` distinct abscissae the degree drops so the
/// fit stays determined. Returns `None` for empty data.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize, center: f64, scale: f64, damping: f64) -> Option<PolyFit> {
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return None;
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let requested = degree + 1;
    let distinct = distinct_count(xs, 1e-9 * scale);
    let degree = degree.min(distinct - 1);
    let cols = degree + 1;
    let zs: Vec<f64> = xs.iter().map(|x| (x - center) / scale).collect();
    let basis = DMatrix::from_fn(xs.len(), cols, |r, c| zs[r].powi(c as i32));
    let y = DVector::from_column_slice(ys);
    let mut normal = basis.transpose() * &basis;
    for i in 0..cols {
        normal[(i, i)] += damping;
    }
    let rhs = basis.transpose() * &y;
    let coeffs = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => normal.lu().solve(&rhs)?,
    };
    let residual = &basis * &coeffs - &y;
    let mut gradient = basis.transpose() * &residual;
    gradient += &coeffs * damping;
    let max_residual = residual.amax();
    let mean_sq_residual = residual.norm_squared() / xs.len() as f64;

    let mut scaled = coeffs.as_slice().to_vec();
    let mut raw = to_raw_basis(&scaled, center, scale);
    raw.resize(requested, 0.0);
    scaled.resize(requested, 0.0);
    Some(PolyFit {
        raw,
        scaled,
        center,
        scale,
        degree,
        max_residual,
        mean_sq_residual,
        optimality: gradient.amax(),
    })
}

/// Expands `sum c_j ((s - center)/scale)^j` into raw monomials of `s`.
fn to_raw_basis(scaled: &[f64], center: f64, scale: f64) -> Vec<f64> {
    let n = scaled.len();
    let mut raw = vec![0.0; n];
    for (j, c) in scaled.iter().enumerate() {
        let factor = c / scale.powi(j as i32);
        let mut binom = 1.0;
        for i in 0..=j {
            // C(j, i) s^i (-center)^(j - i)
            raw[i] += factor * binom * (-center).powi((j - i) as i32);
            binom = binom * (j - i) as f64 / (i + 1) as f64;
        }
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_quadratic_far_from_origin() {
        let truth = [0.7, -3e-3, 2e-6];
        let xs: Vec<f64> = (0..40).map(|i| 3000.0 + 4.0 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| eval_poly(&truth, x)).collect();
        let fit = fit_polynomial(&xs, &ys, 2, 3000.0, 150.0, 0.0).unwrap();
        for x in &xs {
            assert!((fit.eval(*x) - eval_poly(&truth, *x)).abs() < 1e-9);
            assert!((fit.eval_scaled(*x) - eval_poly(&truth, *x)).abs() < 1e-12);
        }
        assert!(fit.optimality < 1e-10);
    }

    #[test]
    fn degrades_with_few_points() {
        let fit = fit_polynomial(&[1.0, 3.0], &[2.0, 6.0], 2, 1.0, 10.0, 0.0).unwrap();
        assert_eq!(fit.degree, 1);
        assert_eq!(fit.raw.len(), 3);
        assert_eq!(fit.raw[2], 0.0);
        assert!((fit.eval(2.0) - 4.0).abs() < 1e-12);

        let one = fit_polynomial(&[5.0, 5.0], &[1.0, 3.0], 3, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(one.degree, 0);
        assert!((one.eval(100.0) - 2.0).abs() < 1e-12);
        assert!(fit_polynomial(&[], &[], 2, 0.0, 1.0, 0.0).is_none());
    }

    #[test]
    fn derivative() {
        let c = [1.0, 2.0, 3.0, 4.0];
        let x = 0.7;
        let d = 2.0 + 6.0 * x + 12.0 * x * x;
        assert!((eval_poly_derivative(&c, x) - d).abs() < 1e-14);
    }
}
