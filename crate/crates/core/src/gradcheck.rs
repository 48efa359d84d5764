//! Finite-difference gradient checking.
//!
//! The loss is rebuilt from scratch for every probe, so the closure must be
//! a pure function of the store's current values. Central differences with
//! h = 1e-5; error is |analytic - numeric| / max(1, |analytic|, |numeric|),
//! i.e. absolute near zero and relative at scale.

use crate::tensor::{ParamId, ParamStore, TensorError};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckStats {
    pub checks: usize,
    pub max_rel_err: f64,
}

impl CheckStats {
    pub fn merge(&mut self, other: CheckStats) {
        self.checks += other.checks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Check analytic gradients of `loss` against central differences.
///
/// `fetch` names the parameters to probe; at most `per_param` elements of
/// each are checked, spread over the buffer with a fixed stride so big
/// matrices get corner and interior coverage without 10^5 evaluations.
/// `loss` must return the scalar loss AND the analytic gradient of every
/// probed parameter (absent gradient is treated as all zeros, which the FD
/// probe then verifies).
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_param: usize,
    mut loss: F,
) -> Result<CheckStats, TensorError>
where
    F: FnMut(&ParamStore) -> Result<(f64, crate::tensor::Gradients), TensorError>,
{
    let (_, grads) = loss(store)?;
    let mut stats = CheckStats::default();
    for &id in ids {
        let n = store.get(id).data.len();
        let probes = probe_indices(n, per_param);
        for i in probes {
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + FD_STEP;
            let (lp, _) = loss(store)?;
            store.get_mut(id).data[i] = orig - FD_STEP;
            let (lm, _) = loss(store)?;
            store.get_mut(id).data[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let e = rel_err(analytic, numeric);
            stats.checks += 1;
            if e > stats.max_rel_err {
                stats.max_rel_err = e;
            }
        }
    }
    Ok(stats)
}

/// Deterministic probe set: all indices when the buffer is small, otherwise
/// `count` strided indices that always include both endpoints.
pub fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        out.push(j * (len - 1) / (count - 1));
    }
    out.dedup();
    out
}
