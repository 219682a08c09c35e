use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub n: usize,
    pub value: f64,
    pub defect: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Extrapolation {
    pub method: String,
    pub estimate: f64,
    pub uncertainty: f64,
}

/// A finite-volume sequence indexed by chain length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThermoSeries {
    pub label: String,
    pub points: Vec<SeriesPoint>,
    pub extrapolation: Option<Extrapolation>,
}

impl ThermoSeries {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            points: Vec::new(),
            extrapolation: None,
        }
    }

    pub fn push(&mut self, n: usize, value: f64, defect: Option<f64>) -> Result<()> {
        if let Some(last) = self.points.last() {
            if n <= last.n {
                return Err(Error::Domain(format!("series {}: n={n} after n={}", self.label, last.n)));
            }
        }
        if !value.is_finite() {
            return Err(Error::Domain(format!("series {}: non-finite value at n={n}", self.label)));
        }
        self.points.push(SeriesPoint { n, value, defect });
        Ok(())
    }

    pub fn from_points(label: impl Into<String>, pts: impl IntoIterator<Item = (usize, f64, Option<f64>)>) -> Result<Self> {
        let mut s = Self::new(label);
        for (n, v, d) in pts {
            s.push(n, v, d)?;
        }
        s.extrapolate();
        Ok(s)
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn last(&self) -> Option<&SeriesPoint> {
        self.points.last()
    }

    pub fn value_at(&self, n: usize) -> Option<f64> {
        self.points.iter().find(|p| p.n == n).map(|p| p.value)
    }

    pub fn max_defect(&self) -> f64 {
        self.points
            .iter()
            .filter_map(|p| p.defect)
            .fold(0.0, |a, d| a.max(d.abs()))
    }

    /// Fits `a + b/n + c/n²` through the last three points; the spread against
    /// the two-point `a + b/n` fit is the uncertainty.
    pub fn extrapolate(&mut self) {
        let k = self.points.len();
        if k < 2 {
            self.extrapolation = None;
            return;
        }
        let linear = {
            let (p, q) = (&self.points[k - 2], &self.points[k - 1]);
            let (x1, x2) = (1.0 / p.n as f64, 1.0 / q.n as f64);
            let b = (q.value - p.value) / (x2 - x1);
            q.value - b * x2
        };
        if k < 3 {
            self.extrapolation = Some(Extrapolation {
                method: "linear_1_over_n".into(),
                estimate: linear,
                uncertainty: (linear - self.points[k - 1].value).abs(),
            });
            return;
        }
        let pts = &self.points[k - 3..];
        let xs: Vec<f64> = pts.iter().map(|p| 1.0 / p.n as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.value).collect();
        // Lagrange interpolation evaluated at x = 0
        let mut estimate = 0.0;
        for i in 0..3 {
            let mut w = 1.0;
            for j in 0..3 {
                if i != j {
                    w *= xs[j] / (xs[j] - xs[i]);
                }
            }
            estimate += w * ys[i];
        }
        self.extrapolation = Some(Extrapolation {
            method: "richardson_quadratic_1_over_n".into(),
            estimate,
            uncertainty: (estimate - linear).abs(),
        });
    }
}
