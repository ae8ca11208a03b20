use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Errors over a target set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Running sums for [`Metrics`]; merging in a fixed order keeps results reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub sq: f64,
    pub abs: f64,
    pub count: usize,
}

impl MetricSums {
    pub fn push(&mut self, residual: f64) {
        self.sq += residual * residual;
        self.abs += residual.abs();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.sq += other.sq;
        self.abs += other.abs;
        self.count += other.count;
    }

    pub fn finish(&self) -> Option<Metrics> {
        (self.count > 0).then(|| Metrics {
            mse: self.sq / self.count as f64,
            mae: self.abs / self.count as f64,
            count: self.count,
        })
    }
}

/// MSE and MAE over exactly the entries with `target_mask = 1`.
pub fn metrics(x_hat: &Tensor, y: &Tensor, target_mask: &Tensor) -> Result<Metrics> {
    if x_hat.shape() != y.shape() || x_hat.shape() != target_mask.shape() {
        return Err(Error::shape(
            "metrics",
            format!("x_hat {:?}, y {:?}, mask {:?}", x_hat.shape(), y.shape(), target_mask.shape()),
        ));
    }
    let mut sums = MetricSums::default();
    for ((&p, &t), &m) in x_hat.data().iter().zip(y.data()).zip(target_mask.data()) {
        if m == 1.0 {
            sums.push(p - t);
        }
    }
    sums.finish()
        .ok_or_else(|| Error::EmptyTargetSet("no entries to score".into()))
}
