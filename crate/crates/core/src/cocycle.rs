//! Cocycle traces over the time-one shift and the index lemmas used by the
//! escape-rate and pressure estimators.
//!
//! A trace records finite-horizon values v_n of a cocycle along one orbit.
//! Additive cocycles satisfy v_{n+m} = v_n + v_m(shifted); subadditive ones
//! satisfy the same with <= and a declared slack.  The checks here take an
//! evaluator for shifted values, since a single orbit's trace cannot verify
//! the law by itself.

use crate::error::{Error, Result};

/// Law a cocycle trace is declared to satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CocycleKind {
    /// v_{n+m} = v_n + v_m(shift n) within the tolerance.
    Additive { tol: f64 },
    /// v_{n+m} <= v_n + v_m(shift n) + slack.
    Subadditive { slack: f64 },
}

/// Provenance of a trace, carried into reports and CSV output.
#[derive(Debug, Clone, Default)]
pub struct TraceMeta {
    pub cocycle: String,
    pub control: String,
    pub base_point: String,
}

/// Finite-horizon cocycle values v_n along one orbit, n ascending.
#[derive(Debug, Clone)]
pub struct CocycleTrace {
    horizons: Vec<usize>,
    values: Vec<f64>,
    pub kind: CocycleKind,
    pub meta: TraceMeta,
}

impl CocycleTrace {
    /// Horizons must be positive and strictly increasing; values finite.
    pub fn new(
        kind: CocycleKind,
        meta: TraceMeta,
        horizons: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if horizons.len() != values.len() {
            return Err(Error::ConfigInvalid(format!(
                "trace has {} horizons but {} values",
                horizons.len(),
                values.len()
            )));
        }
        if horizons.first().is_some_and(|&n| n == 0) || !horizons.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::ConfigInvalid(
                "trace horizons must be positive and strictly increasing".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "trace value {v} is not finite"
            )));
        }
        Ok(CocycleTrace {
            horizons,
            values,
            kind,
            meta,
        })
    }

    pub fn horizons(&self) -> &[usize] {
        &self.horizons
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.horizons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons.is_empty()
    }

    /// Value at horizon n, if recorded.
    pub fn value(&self, n: usize) -> Option<f64> {
        self.horizons
            .binary_search(&n)
            .ok()
            .map(|i| self.values[i])
    }

    /// Time averages v_n / n, aligned with `horizons`.
    pub fn rates(&self) -> Vec<f64> {
        self.horizons
            .iter()
            .zip(&self.values)
            .map(|(&n, &v)| v / n as f64)
            .collect()
    }

    /// Checks the declared law on the given (n, m) pairs.
    ///
    /// `eval(shift, k)` must return the cocycle value over k steps starting
    /// after `shift` steps; `eval(0, k)` is the trace itself.
    pub fn verify<F: Fn(usize, usize) -> f64>(&self, eval: F, pairs: &[(usize, usize)]) -> Result<()> {
        for &(n, m) in pairs {
            let whole = eval(0, n + m);
            let split = eval(0, n) + eval(n, m);
            let bad = match self.kind {
                CocycleKind::Additive { tol } => (whole - split).abs() > tol,
                CocycleKind::Subadditive { slack } => whole > split + slack,
            };
            if bad {
                return Err(Error::StageFailed {
                    stage: "cocycle-law".into(),
                    message: format!(
                        "{} at (n, m) = ({n}, {m}): v_(n+m) = {whole:.6e}, v_n + shifted v_m = {split:.6e}",
                        match self.kind {
                            CocycleKind::Additive { .. } => "additivity violated",
                            CocycleKind::Subadditive { .. } => "subadditivity violated",
                        }
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Restart index for a subadditive cocycle: the smallest n1 < n such that
/// every average over the remaining window beats the full average minus eps,
///
///   (1/k) v_k(shift n1)  >  v_n / n - eps   for all 0 < k <= n - n1,
///
/// with the window length guaranteed: n - n1 >= eps * n / (2 * omega), where
/// omega = sup |v_k(shift j)| / k over the evaluations in range.
///
/// `eval(shift, k)` as in [`CocycleTrace::verify`].  Requires 0 < eps and a
/// genuinely subadditive evaluator with finite omega; such an index always
/// exists then, and the exhaustive search panics only if the caller broke
/// those preconditions.
pub fn subadditive_restart<F: Fn(usize, usize) -> f64>(eval: F, n: usize, eps: f64) -> usize {
    assert!(n >= 1, "restart horizon must be positive");
    assert!(eps > 0.0, "restart slack must be positive");
    let mut omega: f64 = 0.0;
    for j in 0..n {
        for k in 1..=(n - j) {
            omega = omega.max(eval(j, k).abs() / k as f64);
        }
    }
    let full = eval(0, n) / n as f64;
    let min_window = if omega == 0.0 {
        0.0
    } else {
        eps * n as f64 / (2.0 * omega)
    };
    for n1 in 0..n {
        let window = n - n1;
        if (window as f64) < min_window {
            break;
        }
        let ok = (1..=window).all(|k| eval(n1, k) / k as f64 > full - eps);
        if ok {
            return n1;
        }
    }
    panic!(
        "no restart index exists; the evaluator is not subadditive or eps {eps} is out of range (omega = {omega})"
    );
}

/// Index pairs (i, j), 0 <= i < m, 0 <= j < q_i, such that the start times
/// i + j*m cover each of 0..=(n-m) exactly once.
///
/// q_i counts the windows of length m with start residue i that fit before n,
/// i.e. q_i = floor((n - m - i)/m) + 1 when i <= n - m and 0 otherwise, and
/// then n = i + q_i*m + r_i with 0 <= r_i < m.
pub fn partition_indices(n: usize, m: usize) -> Vec<(usize, usize)> {
    assert!(m >= 1 && n > m, "need n > m >= 1, got n = {n}, m = {m}");
    let mut pairs = Vec::new();
    for i in 0..m {
        if i > n - m {
            continue;
        }
        let q = (n - m - i) / m + 1;
        for j in 0..q {
            pairs.push((i, j));
        }
    }
    pairs
}
