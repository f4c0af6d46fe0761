//! Finite-horizon fibers of chain control sets and neighborhood probes.
//!
//! A chain control set is detected as a set of grid cells; under a fixed
//! control its fiber is the part of that set actually visited by two-sided
//! trajectories.  The estimates here are sampled surrogates: a cell belongs
//! to the fiber when its center stays near the set at every sampled time in
//! a bounded window.  Two probes build on this: a lower-semicontinuity probe
//! comparing fibers along a sequence of controls, and an isolatedness check
//! that looks for trajectories lingering near the set without being on it.

use rayon::prelude::*;

use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::grid::{CellSet, ProjectiveGrid};
use crate::projective::{projective_flow, ProjectivePoint, DEFAULT_CHUNK_DT};
use crate::system::BilinearSystem;

/// Trajectory sampling for fiber estimation.
#[derive(Debug, Clone, Copy)]
pub struct FiberParams {
    /// Spacing of sample times inside the two-sided window.
    pub sample_dt: f64,
    /// Chunk length for the underlying flow propagation.
    pub chunk_dt: f64,
}

impl Default for FiberParams {
    fn default() -> Self {
        FiberParams {
            sample_dt: 0.5,
            chunk_dt: DEFAULT_CHUNK_DT,
        }
    }
}

/// True when the trajectory of `x0` stays within `radius` of some center in
/// `anchors` at every sample time `k * sample_dt`, `|k| <= horizon/sample_dt`.
///
/// Both legs step sequentially from the previous sample, so a larger horizon
/// reuses the identical prefix of states: the predicate is exactly monotone
/// in the horizon.
fn stays_near(
    sys: &BilinearSystem,
    anchors: &[ProjectivePoint],
    x0: &ProjectivePoint,
    u: &PiecewiseConstantControl,
    horizon: f64,
    radius: f64,
    params: &FiberParams,
) -> Result<bool> {
    let near = |p: &ProjectivePoint| anchors.iter().any(|q| p.distance(q) <= radius);
    if !near(x0) {
        return Ok(false);
    }
    let steps = (horizon / params.sample_dt).floor() as usize;
    for dir in [1.0, -1.0] {
        let mut x = x0.clone();
        for k in 0..steps {
            let t0 = dir * params.sample_dt * k as f64;
            let shifted = u.shift(t0);
            x = projective_flow(sys, &x, &shifted, dir * params.sample_dt, params.chunk_dt)?;
            if !near(&x) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Cells near `set` whose center trajectories under `u` stay within `radius`
/// of `set` at every sample time in `[-horizon, horizon]`.
///
/// Nearness is measured to cell centers of `set`.  The candidates are the
/// `radius`-fattening of `set`, so the result is always a subset of that
/// fattening, and a larger horizon yields an exact subset of a smaller one.
/// With `horizon = 0` the result is the set of cells whose centers lie
/// within `radius` of `set`.
pub fn fiber_estimate(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    set: &CellSet,
    u: &PiecewiseConstantControl,
    horizon: f64,
    radius: f64,
    params: &FiberParams,
) -> Result<CellSet> {
    let cell_radius = 0.5 * grid.max_cell_diameter();
    if radius < cell_radius {
        return Err(Error::ConfigInvalid(format!(
            "fiber radius {radius} is below one cell radius {cell_radius}"
        )));
    }
    if !(horizon >= 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "fiber horizon {horizon} must be nonnegative"
        )));
    }
    let anchors: Vec<ProjectivePoint> = set.cells().iter().map(|&c| grid.cell_center(c)).collect();
    let candidates = set.fatten(grid, radius);
    let kept: Result<Vec<Option<usize>>> = candidates
        .cells()
        .par_iter()
        .map(|&cell| {
            let x0 = grid.cell_center(cell);
            Ok(stays_near(sys, &anchors, &x0, u, horizon, radius, params)?.then_some(cell))
        })
        .collect();
    Ok(CellSet::new(kept?.into_iter().flatten().collect()))
}

/// Grid-Hausdorff distances between the fiber under `u` and the fibers under
/// each control in `controls`, in order.
///
/// For a sequence of controls approaching `u`, small tail distances support
/// lower semicontinuity of the fiber map; they do not certify it.
pub fn lsc_probe(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    set: &CellSet,
    u: &PiecewiseConstantControl,
    controls: &[PiecewiseConstantControl],
    horizon: f64,
    radius: f64,
    params: &FiberParams,
) -> Result<Vec<f64>> {
    if controls.is_empty() {
        return Err(Error::ConfigInvalid(
            "lower semicontinuity probe needs at least one comparison control".into(),
        ));
    }
    let base = fiber_estimate(sys, grid, set, u, horizon, radius, params)?;
    controls
        .iter()
        .map(|uk| {
            let fk = fiber_estimate(sys, grid, set, uk, horizon, radius, params)?;
            Ok(base.hausdorff(grid, &fk))
        })
        .collect()
}

/// A sampled point that lingered near the set without being near its fiber.
#[derive(Debug, Clone)]
pub struct IsolatednessWitness {
    pub cell: usize,
    pub control: usize,
    /// Distance from the cell center to the nearest fiber cell center.
    pub fiber_distance: f64,
}

#[derive(Debug, Clone)]
pub struct IsolatednessReport {
    pub pass: bool,
    /// Number of band cells whose centers were tested.
    pub sampled: usize,
    /// (cell, control) pairs whose trajectory stayed in the neighborhood.
    pub premise_hits: usize,
    pub witnesses: Vec<IsolatednessWitness>,
}

/// Probes whether trajectories that remain near `set` are actually on it.
///
/// Samples up to `sample_count` cell centers from the band between the
/// one-cell fattening and the `neighborhood_radius` fattening of `set`.  For
/// each sampled center and each constant control, the premise holds when the
/// center's trajectory stays within `neighborhood_radius` of `set` over the
/// sampled window.  Every premise hit must lie within one cell diameter of
/// the fiber estimate for that control; the ones that do not are returned as
/// witnesses and fail the check.
#[allow(clippy::too_many_arguments)]
pub fn isolatedness_check(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    set: &CellSet,
    controls: &[Vec<f64>],
    neighborhood_radius: f64,
    horizon: f64,
    sample_count: usize,
    params: &FiberParams,
) -> Result<IsolatednessReport> {
    let diam = grid.max_cell_diameter();
    if neighborhood_radius < diam {
        return Err(Error::ConfigInvalid(format!(
            "neighborhood radius {neighborhood_radius} is below two cell radii {diam}"
        )));
    }
    if controls.is_empty() {
        return Err(Error::ConfigInvalid(
            "isolatedness check needs at least one control".into(),
        ));
    }
    let band = set
        .fatten(grid, neighborhood_radius)
        .difference(&set.fatten(grid, diam));
    let mut samples: Vec<usize> = if band.len() <= sample_count {
        band.cells().to_vec()
    } else {
        (0..sample_count)
            .map(|i| band.cells()[i * band.len() / sample_count])
            .collect()
    };
    samples.dedup();

    let anchors: Vec<ProjectivePoint> = set.cells().iter().map(|&c| grid.cell_center(c)).collect();
    let fibers: Vec<Vec<ProjectivePoint>> = controls
        .iter()
        .map(|value| {
            let u = PiecewiseConstantControl::constant(value.clone());
            let fiber = fiber_estimate(sys, grid, set, &u, horizon, diam, params)?;
            Ok(fiber.cells().iter().map(|&c| grid.cell_center(c)).collect())
        })
        .collect::<Result<_>>()?;

    let mut premise_hits = 0;
    let mut witnesses = Vec::new();
    for &cell in &samples {
        let x = grid.cell_center(cell);
        for (ci, value) in controls.iter().enumerate() {
            let u = PiecewiseConstantControl::constant(value.clone());
            if !stays_near(sys, &anchors, &x, &u, horizon, neighborhood_radius, params)? {
                continue;
            }
            premise_hits += 1;
            let fiber_distance = fibers[ci]
                .iter()
                .map(|q| x.distance(q))
                .fold(f64::INFINITY, f64::min);
            if fiber_distance > diam {
                witnesses.push(IsolatednessWitness {
                    cell,
                    control: ci,
                    fiber_distance,
                });
            }
        }
    }
    Ok(IsolatednessReport {
        pass: witnesses.is_empty(),
        sampled: samples.len(),
        premise_hits,
        witnesses,
    })
}
