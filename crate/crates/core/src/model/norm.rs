use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for the per-series standard deviation.
pub const NORM_EPS: f64 = 1e-5;

/// Per-series statistics over observed entries, `[B, M]` each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormStats {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// 1 where the series has at least one observed entry.
    pub valid: Tensor,
}

/// Statistics of one series: `(mu, sigma, valid)`.
pub(crate) fn series_stats(x: &[f64], mask: &[f64]) -> (f64, f64, bool) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for (&v, &m) in x.iter().zip(mask) {
        if m == 1.0 {
            n += 1;
            sum += v;
        }
    }
    if n == 0 {
        return (0.0, 1.0, false);
    }
    let mu = sum / n as f64;
    let mut ss = 0.0;
    for (&v, &m) in x.iter().zip(mask) {
        if m == 1.0 {
            ss += (v - mu) * (v - mu);
        }
    }
    let sigma = (ss / n as f64).sqrt().max(NORM_EPS);
    (mu, sigma, true)
}

/// Normalises one `[M, T]` sample in place of a copy; unobserved entries become 0
/// and are never read.
pub(crate) fn normalize_sample(x: &[f64], mask: &[f64], t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>) {
    let m = x.len() / t.max(1);
    let mut out = vec![0.0; x.len()];
    let mut mus = Vec::with_capacity(m);
    let mut sigmas = Vec::with_capacity(m);
    let mut valid = Vec::with_capacity(m);
    for v in 0..m {
        let span = v * t..(v + 1) * t;
        let (mu, sigma, ok) = series_stats(&x[span.clone()], &mask[span.clone()]);
        for ((o, &xv), &mv) in out[span.clone()].iter_mut().zip(&x[span.clone()]).zip(&mask[span]) {
            if mv == 1.0 {
                *o = (xv - mu) / sigma;
            }
        }
        mus.push(mu);
        sigmas.push(sigma);
        valid.push(ok);
    }
    (out, mus, sigmas, valid)
}

/// Instance normalisation whose statistics use only entries with `omega_eff = 1`.
///
/// Returns `x_norm` (0 at unobserved entries) and the statistics needed to
/// undo it. Series with no observed entry get `mu = 0, sigma = 1, valid = 0`.
pub fn masked_instance_norm(x: &Tensor, omega_eff: &Tensor) -> Result<(Tensor, NormStats)> {
    if x.rank() != 3 || x.shape() != omega_eff.shape() {
        return Err(Error::shape(
            "masked_instance_norm",
            format!("x {:?} vs mask {:?}", x.shape(), omega_eff.shape()),
        ));
    }
    let (b, m, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.len());
    let mut mu = Vec::with_capacity(b * m);
    let mut sigma = Vec::with_capacity(b * m);
    let mut valid = Vec::with_capacity(b * m);
    for bi in 0..b {
        let span = bi * m * t..(bi + 1) * m * t;
        let (xn, mus, sigmas, ok) = normalize_sample(&x.data()[span.clone()], &omega_eff.data()[span], t);
        out.extend(xn);
        mu.extend(mus);
        sigma.extend(sigmas);
        valid.extend(ok.into_iter().map(|v| if v { 1.0 } else { 0.0 }));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormStats {
            mu: Tensor::new([b, m], mu)?,
            sigma: Tensor::new([b, m], sigma)?,
            valid: Tensor::new([b, m], valid)?,
        },
    ))
}

/// `x_hat = x_norm * sigma + mu` per series.
pub fn denormalize(x_norm: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if x_norm.rank() != 3 || x_norm.shape()[..2] != *stats.mu.shape() {
        return Err(Error::shape(
            "denormalize",
            format!("x {:?} vs stats {:?}", x_norm.shape(), stats.mu.shape()),
        ));
    }
    let t = x_norm.shape()[2];
    let mut out = x_norm.clone();
    for (i, row) in out.data_mut().chunks_mut(t.max(1)).enumerate() {
        let (mu, s) = (stats.mu.data()[i], stats.sigma.data()[i]);
        row.iter_mut().for_each(|v| *v = *v * s + mu);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new([1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_series() {
        let (xn, s) = masked_instance_norm(&row(&[5.0; 4]), &Tensor::ones([1, 1, 4])).unwrap();
        assert!(xn.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.mu.data(), &[5.0]);
        assert_eq!(s.sigma.data(), &[NORM_EPS]);
    }

    #[test]
    fn hand_computed_stats() {
        let (xn, s) = masked_instance_norm(&row(&[1.0, 2.0, 3.0]), &Tensor::ones([1, 1, 3])).unwrap();
        assert_abs_diff_eq!(s.mu.data()[0], 2.0);
        assert_abs_diff_eq!(s.sigma.data()[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(xn.data()[0], -1.224_744_871_391_589, epsilon = 1e-12);
        assert_eq!(xn.data()[1], 0.0);
        assert_abs_diff_eq!(xn.data()[2], 1.224_744_871_391_589, epsilon = 1e-12);
    }

    #[test]
    fn unobserved_values_are_ignored() {
        let mask = row(&[1.0, 0.0, 1.0]);
        let (xn, s) = masked_instance_norm(&row(&[1.0, 99.0, 3.0]), &mask).unwrap();
        assert_eq!(s.mu.data(), &[2.0]);
        assert_eq!(s.sigma.data(), &[1.0]);
        assert_eq!(xn.data(), &[-1.0, 0.0, 1.0]);
        let (xn2, _) = masked_instance_norm(&row(&[1.0, f64::NAN, 3.0]), &mask).unwrap();
        assert_eq!(xn, xn2);
    }

    #[test]
    fn empty_series_is_flagged() {
        let (xn, s) = masked_instance_norm(&row(&[4.0, 4.0]), &Tensor::zeros([1, 1, 2])).unwrap();
        assert_eq!(xn.data(), &[0.0, 0.0]);
        assert_eq!((s.mu.data()[0], s.sigma.data()[0], s.valid.data()[0]), (0.0, 1.0, 0.0));
    }

    #[test]
    fn denormalize_affine() {
        let stats = NormStats {
            mu: Tensor::new([1, 1], vec![3.0]).unwrap(),
            sigma: Tensor::new([1, 1], vec![2.0]).unwrap(),
            valid: Tensor::ones([1, 1]),
        };
        assert_eq!(denormalize(&row(&[0.0, 1.0]), &stats).unwrap().data(), &[3.0, 5.0]);
    }
}
