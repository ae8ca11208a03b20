use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::params::ParamStore;
use super::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance for the pass/fail verdict.
    pub tolerance: f64,
    /// Tensors larger than this are checked on a random subset of this many elements.
    pub max_elements_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements_per_tensor: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_error >= self.tolerance)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` records the function on a fresh tape and returns its scalar output node.
/// Gradients are computed from `params` as given; the numeric side perturbs a
/// private copy, so `params` is left unchanged.
pub fn grad_check<F>(params: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.gradients(loss, params.len())?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let out = f(&mut t, store)?;
        Ok(t.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.entry(id).value.len();
        let indices: Vec<usize> = if n > opts.max_elements_per_tensor {
            let mut v = sample(&mut rng, n, opts.max_elements_per_tensor).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut worst = (0.0f64, 0usize);
        for &i in &indices {
            let orig = params.entry(id).value.data()[i];
            work.entry_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.entry_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.entry_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        tensors.push(TensorCheck {
            name: params.name(id).to_string(),
            checked: indices.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_params_is_exact() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_fn([4], |i| i as f64 - 1.5)).unwrap();
        store.insert("b", Tensor::from_fn([2, 3], |i| 0.1 * i as f64)).unwrap();
        let report = grad_check(
            &store,
            |tape, p| {
                let a = tape.param(p, "a")?;
                let b = tape.param(p, "b")?;
                let sa = tape.sum(a);
                let sb = tape.sum(b);
                tape.add(sa, sb)
            },
            GradCheckOptions {
                tolerance: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dead_branch_passes() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::ones([3])).unwrap();
        store.insert("dead", Tensor::ones([3])).unwrap();
        let report = grad_check(
            &store,
            |tape, p| {
                let u = tape.param(p, "used")?;
                let sq = tape.mul(u, u)?;
                Ok(tape.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.tensors[1].max_rel_error, 0.0);
    }

    #[test]
    fn sampling_limits_checked_elements() {
        let mut store = ParamStore::new();
        store.insert("big", Tensor::from_fn([500], |i| (i as f64).sin())).unwrap();
        let report = grad_check(
            &store,
            |tape, p| {
                let b = tape.param(p, "big")?;
                let sq = tape.mul(b, b)?;
                Ok(tape.sum(sq))
            },
            GradCheckOptions {
                max_elements_per_tensor: 64,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.tensors[0].checked, 64);
        assert!(report.passed());
    }
}
