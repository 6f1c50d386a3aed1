use nalgebra::{DMatrix, DVector};

/// Least-squares polynomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Coefficients from the constant term upwards.
    pub coeffs: Vec<f64>,
    pub r_squared: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fits `y = c0 + c1 x + ... + c_deg x^deg`. Needs more points than
/// coefficients.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Option<PolyFit> {
    let n = xs.len();
    if n != ys.len() || n <= degree {
        return None;
    }
    let a = DMatrix::from_fn(n, degree + 1, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let c = a.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let fitted = &a * &c;
    let mean = ys.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(fitted.iter()).map(|(y, f)| (y - f).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(PolyFit {
        coeffs: c.iter().copied().collect(),
        r_squared,
    })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// `count` points from `lo` to `hi` evenly spaced on a log scale, rounded
/// to integers.
pub fn geometric_steps(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    assert!(lo >= 1 && hi >= lo && count >= 1, "invalid sweep");
    if count == 1 {
        return vec![lo];
    }
    let (l, h) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<u64> = (0..count)
        .map(|i| (l + (h - l) * i as f64 / (count - 1) as f64).exp().round() as u64)
        .collect();
    out.dedup();
    out
}
