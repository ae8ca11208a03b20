use serde::{Deserialize, Serialize};

use crate::data::SeriesBatch;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Per-variable mean of the visible entries.
    Mean,
    /// Linear interpolation between the nearest visible neighbours, constant at the edges.
    LinearInterp,
    Zero,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub x_hat: Tensor,
    /// `(sample, variable)` series with no visible entry; filled with 0.
    pub fallback: Vec<(usize, usize)>,
}

/// Fills one series where `mask = 1` marks visible entries; `None` when nothing is visible.
pub fn fill_series(x: &[f64], mask: &[f64], kind: BaselineKind) -> Option<Vec<f64>> {
    let visible: Vec<usize> = (0..x.len()).filter(|&i| mask[i] == 1.0).collect();
    if kind == BaselineKind::Zero {
        return Some(vec![0.0; x.len()]);
    }
    if visible.is_empty() {
        return None;
    }
    let mut out = vec![0.0; x.len()];
    match kind {
        BaselineKind::Mean => {
            let mu = visible.iter().map(|&i| x[i]).sum::<f64>() / visible.len() as f64;
            out.fill(mu);
        }
        BaselineKind::LinearInterp => {
            let (first, last) = (visible[0], visible[visible.len() - 1]);
            out[..=first].fill(x[first]);
            out[last..].fill(x[last]);
            for pair in visible.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let span = (b - a) as f64;
                for (i, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
                    let w = (i - a) as f64 / span;
                    *o = x[a] * (1.0 - w) + x[b] * w;
                }
            }
        }
        BaselineKind::Zero => unreachable!(),
    }
    Some(out)
}

/// Imputes every entry of the batch from the entries visible under `omega AND psi`.
pub fn baseline_imputers(batch: &SeriesBatch, kind: BaselineKind) -> Result<BaselineOutput> {
    let eff = batch.effective_mask();
    let t = batch.seq_len();
    let m = batch.num_vars();
    let mut out = Vec::with_capacity(batch.x.len());
    let mut fallback = Vec::new();
    for (row, (xs, ms)) in batch.x.data().chunks(t).zip(eff.data().chunks(t)).enumerate() {
        match fill_series(xs, ms, kind) {
            Some(filled) => out.extend(filled),
            None => {
                fallback.push((row / m, row % m));
                out.extend(std::iter::repeat_n(0.0, t));
            }
        }
    }
    Ok(BaselineOutput {
        x_hat: Tensor::new(batch.x.shape().to_vec(), out)?,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fills() {
        let lin = BaselineKind::LinearInterp;
        assert_eq!(fill_series(&[1.0, 0.0, 3.0], &[1.0, 0.0, 1.0], lin).unwrap(), [1.0, 2.0, 3.0]);
        assert_eq!(fill_series(&[0.0, 5.0], &[0.0, 1.0], lin).unwrap(), [5.0, 5.0]);
        assert_eq!(fill_series(&[2.0, 9.0, 4.0], &[1.0, 0.0, 1.0], BaselineKind::Mean).unwrap(), [3.0; 3]);
        assert!(fill_series(&[1.0], &[0.0], BaselineKind::Mean).is_none());
    }

    #[test]
    fn fully_missing_series_is_flagged() {
        let x = Tensor::ones([1, 2, 3]);
        let omega = Tensor::new([1, 2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = SeriesBatch::new(x, omega, None, vec![]).unwrap();
        let out = baseline_imputers(&b, BaselineKind::LinearInterp).unwrap();
        assert_eq!(out.fallback, [(0, 1)]);
        assert_eq!(out.x_hat.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
