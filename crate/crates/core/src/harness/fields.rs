//! Ground-truth fields sampled by the experiments.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    /// `2 + sin(2 pi x)`
    Sine1d,
    /// `sin(2 pi x) cos(2 pi y)`
    SineCos2d,
    /// `cos(2 pi x) sin(2 pi y)`, the previous field with its axes swapped.
    CosSine2d,
}

impl Field {
    pub fn dim(self) -> usize {
        match self {
            Field::Sine1d => 1,
            Field::SineCos2d | Field::CosSine2d => 2,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Field::Sine1d => 2.0 + (2.0 * PI * x[0]).sin(),
            Field::SineCos2d => (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos(),
            Field::CosSine2d => (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin(),
        }
    }

    /// Field value at every row of `x`.
    pub fn sample(self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.nrows(),
            x.row_iter().map(|r| self.eval(&r.iter().copied().collect::<Vec<_>>())),
        )
    }
}

/// `count` evenly spaced values from 0 to 1 inclusive.
pub fn linspace(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

/// Regular grid on the unit cube in `dim` dimensions, first coordinate
/// varying slowest.
pub fn unit_grid(per_axis: usize, dim: usize) -> DMatrix<f64> {
    let axis = linspace(per_axis);
    let total = per_axis.pow(dim as u32);
    DMatrix::from_fn(total, dim, |row, col| {
        let stride = per_axis.pow((dim - 1 - col) as u32);
        axis[(row / stride) % per_axis]
    })
}
