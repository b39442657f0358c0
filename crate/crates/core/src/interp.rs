//! Natural cubic spline through strictly increasing knots.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(t: &[f64], y: &[f64]) -> Result<Self> {
        let n = t.len();
        if n != y.len() {
            return Err(Error::Shape("spline knots and values differ in length".into()));
        }
        if n < 2 {
            return Err(Error::DemoTooShort { len: n, min: 2 });
        }
        if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotoneTime { row: i + 1 });
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut upper = vec![0.0; k];
            for i in 0..k {
                let h0 = t[i + 1] - t[i];
                let h1 = t[i + 2] - t[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = t[i + 1] - t[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Evaluates the spline, clamping `x` to the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.t.len();
        let x = x.clamp(self.t[0], self.t[n - 1]);
        let i = match self.t.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => return self.y[i],
            Err(i) => i - 1,
        };
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_knots_and_lines() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = t.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = CubicSpline::natural(&t, &y).unwrap();
        for (a, b) in t.iter().zip(&y) {
            assert_eq!(s.eval(*a), *b);
        }
        assert!((s.eval(1.05) - 1.1).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_increasing_knots() {
        assert!(CubicSpline::natural(&[0.0, 1.0, 1.0], &[0.0; 3]).is_err());
    }
}
