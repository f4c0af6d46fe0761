//! Escape-rate estimation: volume decay of the set of points whose sampled
//! trajectory stays near a sequence of fibers.
//!
//! The n-th survivor set consists of the points within `radius` of the j-th
//! fiber's cell centers at times j*h for j = 0..n-1.  Its volume is tracked
//! by the subdivision engine, so the sequence is exactly nonincreasing, and
//! -log(volume)/(n*h) estimates the escape rate in nats per unit time.

use crate::cocycle::{CocycleKind, CocycleTrace, TraceMeta};
use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::grid::{CellSet, ProjectiveGrid};
use crate::projective::ProjectivePoint;
use crate::survivor::{SurvivorEngine, SurvivorParams};
use crate::system::BilinearSystem;

/// Log-volumes v_n of the survivor sets, with escape rates -v_n/(n*h).
#[derive(Debug, Clone)]
pub struct EscapeRateTrace {
    /// v_n = log vol(survivors through n condition times); finite prefix.
    pub trace: CocycleTrace,
    /// Sample spacing of the condition times.
    pub h: f64,
    /// Horizon at which the survivor set became empty, if it did; the
    /// volume is -infinity from there on and no further values are listed.
    pub empty_from: Option<usize>,
}

impl EscapeRateTrace {
    /// Escape rates -v_n/(n*h) in nats per unit time, aligned with the
    /// trace horizons.
    pub fn rates(&self) -> Vec<f64> {
        self.trace
            .horizons()
            .iter()
            .zip(self.trace.values())
            .map(|(&n, &v)| -v / (n as f64 * self.h))
            .collect()
    }
}

/// Volume decay of the points staying within `radius` of the fiber sequence.
///
/// `fibers[j]` is the fiber of the control shifted by j*h; with a constant
/// control all entries coincide.  Needs `fibers.len() >= n_max`.  The
/// initial candidate set is the fattening of `fibers[0]`; the time-zero
/// condition then filters it exactly.
pub fn escape_rate_trace(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    fibers: &[CellSet],
    u: &PiecewiseConstantControl,
    radius: f64,
    n_max: usize,
    h: f64,
    params: &SurvivorParams,
) -> Result<EscapeRateTrace> {
    let cell_radius = 0.5 * grid.max_cell_diameter();
    if radius < cell_radius {
        return Err(Error::ConfigInvalid(format!(
            "escape radius {radius} is below one cell radius {cell_radius}"
        )));
    }
    if n_max == 0 || fibers.len() < n_max {
        return Err(Error::ConfigInvalid(format!(
            "need fibers for all {n_max} horizons, got {}",
            fibers.len()
        )));
    }
    if fibers[0].is_empty() {
        return Err(Error::EmptySurvivorSet { step: 0 });
    }
    let universe = fibers[0].fatten(grid, radius + grid.max_cell_diameter());
    let mut engine = SurvivorEngine::new(sys, grid, &universe, u.clone(), h, *params)?;

    let mut horizons = Vec::with_capacity(n_max);
    let mut values = Vec::with_capacity(n_max);
    let mut empty_from = None;
    for n in 1..=n_max {
        let anchors: Vec<ProjectivePoint> = fibers[n - 1]
            .cells()
            .iter()
            .map(|&c| grid.cell_center(c))
            .collect();
        let vol = engine.filter(|p| {
            anchors.iter().any(|q| p.distance(q) <= radius)
        });
        if engine.is_empty() || vol <= 0.0 {
            empty_from = Some(n);
            break;
        }
        horizons.push(n);
        values.push(vol.ln());
        if n < n_max {
            engine.refine()?;
            engine.advance()?;
        }
    }
    let trace = CocycleTrace::new(
        CocycleKind::Subadditive { slack: 0.1 },
        TraceMeta {
            cocycle: "log-survivor-volume".into(),
            control: format!("{} pieces", u.values().len()),
            base_point: format!("{} fiber cells", fibers[0].len()),
        },
        horizons,
        values,
    )?;
    Ok(EscapeRateTrace {
        trace,
        h,
        empty_from,
    })
}
