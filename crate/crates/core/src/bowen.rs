//! Bowen-ball volumes, separated sets, pressure sums, and fiber entropy.
//!
//! Orbits are sampled at the times `0, h, 2h, …` that also define the Bowen
//! metric; propagation reuses the cached chunked exponentials, so thousands
//! of points advance through the same matrices that `projective_flow` uses.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cocycle::{CocycleKind, CocycleTrace, TraceMeta};
use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::graph::{cell_samples, growth_weight, WeightParams};
use crate::grid::{CellSet, ProjectiveGrid};
use crate::projective::{
    log_unstable_determinant, ChunkedPropagator, ProjectivePoint, TangentFrame, DEFAULT_CHUNK_DT,
};
use crate::system::BilinearSystem;

/// Ambient transition matrices per step, entry `j` covering `[j h, (j+1) h]`
/// split at chunk and control-piece boundaries.
fn step_chunk_maps(
    sys: &BilinearSystem,
    u: &PiecewiseConstantControl,
    steps: usize,
    h: f64,
    chunk_dt: f64,
) -> Vec<Vec<DMatrix<f64>>> {
    let mut prop = ChunkedPropagator::new(sys, u, chunk_dt);
    (0..steps)
        .map(|j| {
            let ts = prop.boundaries(j as f64 * h, (j + 1) as f64 * h);
            ts.windows(2)
                .filter(|w| w[0] != w[1])
                .map(|w| prop.transition(w[0], w[1]))
                .collect()
        })
        .collect()
}

/// One sampling step: apply the chunk matrices with renormalisation.
fn apply_step(p: &ProjectivePoint, maps: &[DMatrix<f64>]) -> Result<ProjectivePoint> {
    let mut q = p.clone();
    for m in maps {
        q = ProjectivePoint::new(&(m * q.rep()))?;
    }
    Ok(q)
}

/// Orbit samples at times `0, h, …, (n-1) h` for each candidate.
pub fn bowen_orbits(
    sys: &BilinearSystem,
    candidates: &[ProjectivePoint],
    u: &PiecewiseConstantControl,
    n: usize,
    h: f64,
    chunk_dt: f64,
) -> Result<Vec<Vec<ProjectivePoint>>> {
    if n == 0 {
        return Err(Error::ConfigInvalid(
            "orbit order must be at least 1".into(),
        ));
    }
    if h <= 0.0 {
        return Err(Error::ConfigInvalid(
            "sampling step must be positive".into(),
        ));
    }
    let steps = step_chunk_maps(sys, u, n - 1, h, chunk_dt);
    candidates
        .par_iter()
        .map(|x| {
            let mut orbit = Vec::with_capacity(n);
            orbit.push(x.clone());
            for maps in &steps {
                let next = apply_step(orbit.last().expect("nonempty orbit"), maps)?;
                orbit.push(next);
            }
            Ok(orbit)
        })
        .collect()
}

/// Bowen distance: max over matching orbit samples of the projective metric.
pub fn bowen_distance(a: &[ProjectivePoint], b: &[ProjectivePoint]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(p, q)| p.distance(q))
        .fold(0.0, f64::max)
}

/// Greedy maximal separated subset in candidate order: kept orbits are
/// pairwise more than `delta` apart, and maximality makes the kept set span
/// the candidates within `delta`.
pub fn separated_indices(orbits: &[Vec<ProjectivePoint>], delta: f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for (i, orbit) in orbits.iter().enumerate() {
        if chosen
            .iter()
            .all(|&k| bowen_distance(orbit, &orbits[k]) > delta)
        {
            chosen.push(i);
        }
    }
    chosen
}

/// Greedy maximal `(n, u, delta)`-separated subset of `candidates`,
/// returned as indices into the candidate list.
pub fn separated_set(
    sys: &BilinearSystem,
    candidates: &[ProjectivePoint],
    u: &PiecewiseConstantControl,
    n: usize,
    delta: f64,
    h: f64,
    chunk_dt: f64,
) -> Result<Vec<usize>> {
    if delta <= 0.0 {
        return Err(Error::ConfigInvalid(
            "separation delta must be positive".into(),
        ));
    }
    let orbits = bowen_orbits(sys, candidates, u, n, h, chunk_dt)?;
    Ok(separated_indices(&orbits, delta))
}

/// Entropy surrogate for the dynamics inside a fiber: log cardinality of a
/// maximal separated set of fiber cell centers, per unit time.
pub fn fiber_entropy_estimate(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    fiber: &CellSet,
    u: &PiecewiseConstantControl,
    n: usize,
    delta: f64,
    h: f64,
    chunk_dt: f64,
) -> Result<f64> {
    if fiber.is_empty() {
        return Err(Error::ConfigInvalid(
            "fiber entropy needs a nonempty fiber".into(),
        ));
    }
    let candidates: Vec<ProjectivePoint> =
        fiber.cells().iter().map(|&c| grid.cell_center(c)).collect();
    let chosen = separated_set(sys, &candidates, u, n, delta, h, chunk_dt)?;
    Ok((chosen.len() as f64).ln() / (n as f64 * h))
}

/// One pressure-cocycle value.
#[derive(Debug, Clone, Copy)]
pub struct PressureSample {
    /// log of the sum of inverse unstable determinants over the separated set.
    pub value: f64,
    /// Candidate points whose orbits stay near the fibers through the window.
    pub surviving: usize,
    /// Cardinality of the separated set the sum ranges over.
    pub separated: usize,
}

/// Pressure-type sum over a maximal separated subset of the surviving region.
///
/// Candidates are corner and center samples of the first fiber's cells
/// (corners hit equilibria of the sampled dynamics exactly); a candidate
/// survives when its orbit stays within `eps` of the fiber cell centers at
/// every sampled time.  The value is `log sum of exp(-log J)` over the
/// separated survivors, with `J` the unstable determinant over the window.
pub fn pressure_sum(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    fibers: &[CellSet],
    u: &PiecewiseConstantControl,
    n: usize,
    delta: f64,
    eps: f64,
    h: f64,
    wp: &WeightParams,
) -> Result<PressureSample> {
    if n == 0 {
        return Err(Error::ConfigInvalid(
            "pressure order must be at least 1".into(),
        ));
    }
    if fibers.len() < n {
        return Err(Error::ConfigInvalid(format!(
            "pressure of order {n} needs {n} fiber sets, got {}",
            fibers.len()
        )));
    }
    if eps < 0.5 * grid.max_cell_diameter() {
        return Err(Error::ConfigInvalid(format!(
            "tracking tolerance {eps} below the cell radius {}",
            0.5 * grid.max_cell_diameter()
        )));
    }
    if delta <= 0.0 {
        return Err(Error::ConfigInvalid(
            "separation delta must be positive".into(),
        ));
    }

    let candidates: Vec<ProjectivePoint> = fibers[0]
        .cells()
        .iter()
        .flat_map(|&c| cell_samples(grid, c, 1))
        .collect();
    let anchors: Vec<Vec<ProjectivePoint>> = fibers[..n]
        .iter()
        .map(|f| f.cells().iter().map(|&c| grid.cell_center(c)).collect())
        .collect();
    let orbits = bowen_orbits(sys, &candidates, u, n, h, DEFAULT_CHUNK_DT)?;
    let surviving: Vec<(usize, Vec<ProjectivePoint>)> = orbits
        .into_iter()
        .enumerate()
        .filter(|(_, orbit)| {
            orbit.iter().zip(&anchors).all(|(p, frame_anchors)| {
                frame_anchors
                    .iter()
                    .any(|a| p.distance(a) <= eps)
            })
        })
        .collect();
    if surviving.is_empty() {
        return Err(Error::EmptySurvivorSet { step: n });
    }
    let surviving_orbits: Vec<Vec<ProjectivePoint>> =
        surviving.iter().map(|(_, o)| o.clone()).collect();
    let chosen = separated_indices(&surviving_orbits, delta);

    let horizon = n as f64 * h;
    let logs: Result<Vec<f64>> = chosen
        .par_iter()
        .map(|&k| {
            let start = &surviving_orbits[k][0];
            match growth_weight(sys, start, u, horizon, wp)? {
                Some(w) => Ok(w),
                None => Err(Error::StageFailed {
                    stage: "pressure".into(),
                    message: "no cleanly separated expanding rank at a separated point".into(),
                }),
            }
        })
        .collect();
    let logs = logs?;
    let m = logs.iter().fold(f64::NEG_INFINITY, |a, &w| a.max(-w));
    let value = m + logs.iter().map(|&w| (-w - m).exp()).sum::<f64>().ln();
    Ok(PressureSample {
        value,
        surviving: surviving.len(),
        separated: chosen.len(),
    })
}

/// Pressure values for orders `1..=n_max`, declared subadditive with the
/// slack that covers the separated-set surrogate.
#[allow(clippy::too_many_arguments)]
pub fn pressure_trace(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    fibers: &[CellSet],
    u: &PiecewiseConstantControl,
    n_max: usize,
    delta: f64,
    eps: f64,
    h: f64,
    wp: &WeightParams,
) -> Result<CocycleTrace> {
    let mut horizons = Vec::with_capacity(n_max);
    let mut values = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let s = pressure_sum(sys, grid, fibers, u, n, delta, eps, h, wp)?;
        horizons.push(n);
        values.push(s.value);
    }
    CocycleTrace::new(
        CocycleKind::Subadditive { slack: 0.1 },
        TraceMeta {
            cocycle: "pressure".into(),
            control: format!("{} piece(s)", u.values().len()),
            base_point: format!("{} fiber cells", fibers[0].len()),
        },
        horizons,
        values,
    )
}

/// Monte Carlo parameters for Bowen-ball volume estimation.
#[derive(Debug, Clone, Copy)]
pub struct BowenBallParams {
    /// Time between Bowen-metric sample points.
    pub h: f64,
    pub chunk_dt: f64,
    pub seed: u64,
    /// Normal quantile for the binomial confidence interval.
    pub z: f64,
}

impl BowenBallParams {
    pub fn new(h: f64, seed: u64) -> Self {
        BowenBallParams {
            h,
            chunk_dt: DEFAULT_CHUNK_DT,
            seed,
            z: 1.96,
        }
    }
}

/// Nested Monte Carlo estimates of Bowen-ball volumes for all orders up to
/// `n_max`; one shared sample set makes the estimates exactly monotone.
#[derive(Debug, Clone)]
pub struct BowenBallEstimate {
    /// Volume of the metric `delta`-ball the samples are drawn from.
    pub ball_volume: f64,
    pub samples: usize,
    /// `survivors[k]`: samples satisfying the distance condition through
    /// order `k + 1`.
    pub survivors: Vec<usize>,
    pub volumes: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

/// Single-order Bowen-ball volume with a binomial confidence interval.
#[derive(Debug, Clone, Copy)]
pub struct BowenBallVolume {
    pub volume: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub survivors: usize,
    pub samples: usize,
}

fn metric_ball_volume(proj_dim: usize, delta: f64) -> Result<f64> {
    match proj_dim {
        1 => Ok(2.0 * delta),
        2 => Ok(TAU * (1.0 - delta.cos())),
        d => Err(Error::UnsupportedDimension(d + 1)),
    }
}

fn sample_in_ball(
    x: &ProjectivePoint,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ProjectivePoint> {
    match x.ambient_dim() - 1 {
        1 => {
            let theta = x.angle() + rng.random_range(-delta..delta);
            Ok(ProjectivePoint::from_angle(theta))
        }
        2 => {
            // uniform on the metric cap: height uniform, azimuth uniform
            let frame = x.canonical_frame();
            let basis = frame.basis().clone_owned();
            let c: f64 = 1.0 - rng.random::<f64>() * (1.0 - delta.cos());
            let s = (1.0 - c * c).max(0.0).sqrt();
            let phi = rng.random::<f64>() * TAU;
            let v = x.rep() * c + (basis.column(0) * phi.cos() + basis.column(1) * phi.sin()) * s;
            ProjectivePoint::new(&v)
        }
        d => Err(Error::UnsupportedDimension(d + 1)),
    }
}

/// Wilson score interval for a binomial proportion.
fn wilson(k: usize, samples: usize, z: f64) -> (f64, f64) {
    let n = samples as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // the interval contains the point estimate; enforce it under rounding
    (
        (center - half).max(0.0).min(p),
        (center + half).min(1.0).max(p),
    )
}

/// Estimate the volumes of the Bowen balls of orders `1..=n_max` at `x`.
///
/// Samples are drawn uniformly from the metric `delta`-ball at `x` and
/// propagated alongside the center; a sample survives order `n` when it
/// stays within `delta` of the center orbit at the first `n` sample times.
/// Per-sample RNG substreams keep the result independent of thread order.
pub fn bowen_ball_volumes(
    sys: &BilinearSystem,
    x: &ProjectivePoint,
    u: &PiecewiseConstantControl,
    n_max: usize,
    delta: f64,
    mc_samples: usize,
    params: &BowenBallParams,
) -> Result<BowenBallEstimate> {
    if n_max == 0 {
        return Err(Error::ConfigInvalid(
            "ball order must be at least 1".into(),
        ));
    }
    if !(delta > 0.0 && delta < FRAC_PI_2) {
        return Err(Error::ConfigInvalid(format!(
            "ball radius {delta} outside (0, pi/2)"
        )));
    }
    if mc_samples == 0 {
        return Err(Error::ConfigInvalid("need at least one sample".into()));
    }
    if params.h <= 0.0 {
        return Err(Error::ConfigInvalid(
            "sampling step must be positive".into(),
        ));
    }
    let ball_volume = metric_ball_volume(sys.projective_dim(), delta)?;
    let steps = step_chunk_maps(sys, u, n_max - 1, params.h, params.chunk_dt);
    let mut center = Vec::with_capacity(n_max);
    center.push(x.clone());
    for maps in &steps {
        center.push(apply_step(center.last().expect("nonempty orbit"), maps)?);
    }

    let exits: Result<Vec<usize>> = (0..mc_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64 + 1);
            let mut y = sample_in_ball(x, delta, &mut rng)?;
            let mut exit = n_max;
            for (j, maps) in steps.iter().enumerate() {
                y = apply_step(&y, maps)?;
                if y.distance(&center[j + 1]) > delta {
                    exit = j + 1;
                    break;
                }
            }
            Ok(exit)
        })
        .collect();
    let exits = exits?;

    let mut hist = vec![0usize; n_max + 1];
    for e in exits {
        hist[e] += 1;
    }
    let mut survivors = vec![0usize; n_max];
    let mut acc = 0usize;
    for n in (1..=n_max).rev() {
        acc += hist[n];
        survivors[n - 1] = acc;
    }

    let mut volumes = Vec::with_capacity(n_max);
    let mut ci_low = Vec::with_capacity(n_max);
    let mut ci_high = Vec::with_capacity(n_max);
    for &k in &survivors {
        volumes.push(ball_volume * k as f64 / mc_samples as f64);
        let (lo, hi) = wilson(k, mc_samples, params.z);
        ci_low.push(ball_volume * lo);
        ci_high.push(ball_volume * hi);
    }
    Ok(BowenBallEstimate {
        ball_volume,
        samples: mc_samples,
        survivors,
        volumes,
        ci_low,
        ci_high,
    })
}

/// Bowen-ball volume of a single order; errs when every sample escapes
/// (the nested estimator still reports a confidence upper bound).
pub fn bowen_ball_volume(
    sys: &BilinearSystem,
    x: &ProjectivePoint,
    u: &PiecewiseConstantControl,
    n: usize,
    delta: f64,
    mc_samples: usize,
    params: &BowenBallParams,
) -> Result<BowenBallVolume> {
    let est = bowen_ball_volumes(sys, x, u, n, delta, mc_samples, params)?;
    let survivors = est.survivors[n - 1];
    if survivors == 0 {
        return Err(Error::DegenerateSample { step: n });
    }
    Ok(BowenBallVolume {
        volume: est.volumes[n - 1],
        ci_low: est.ci_low[n - 1],
        ci_high: est.ci_high[n - 1],
        survivors,
        samples: est.samples,
    })
}

/// Regression of the Bowen-ball volume decay against unstable determinants.
#[derive(Debug, Clone)]
pub struct VolumeLemmaFit {
    /// `(log J over [0, n h], -log volume estimate at order n)` per order.
    pub points: Vec<(f64, f64)>,
    pub orders: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Regress `-log vol(Bowen ball of order n)` against the unstable
/// log-determinant over the same windows, `n = n_lo..=n_hi`.  The volume
/// scaling law predicts slope 1, with the radius-dependent constant in the
/// intercept.  The determinants accumulate step by step through transported
/// frames, so successive x-values share their common prefix exactly.
#[allow(clippy::too_many_arguments)]
pub fn volume_lemma_fit(
    sys: &BilinearSystem,
    frame: &TangentFrame,
    u: &PiecewiseConstantControl,
    n_lo: usize,
    n_hi: usize,
    delta: f64,
    mc_samples: usize,
    params: &BowenBallParams,
) -> Result<VolumeLemmaFit> {
    if n_lo == 0 || n_hi < n_lo + 1 {
        return Err(Error::ConfigInvalid(format!(
            "regression needs at least two orders, got {n_lo}..={n_hi}"
        )));
    }
    let x = frame.base().clone();
    let est = bowen_ball_volumes(sys, &x, u, n_hi, delta, mc_samples, params)?;

    let mut logs = Vec::with_capacity(n_hi + 1);
    logs.push(0.0);
    let mut f = frame.clone();
    for j in 0..n_hi {
        let det = log_unstable_determinant(
            sys,
            &f,
            &u.shift(j as f64 * params.h),
            params.h,
            params.chunk_dt,
        )?;
        logs.push(logs[j] + det.log);
        f = det.transported;
    }

    let mut points = Vec::new();
    let mut orders = Vec::new();
    for n in n_lo..=n_hi {
        if est.survivors[n - 1] == 0 {
            return Err(Error::DegenerateSample { step: n });
        }
        points.push((logs[n], -(est.volumes[n - 1]).ln()));
        orders.push(n);
    }
    let (slope, intercept) = least_squares(&points);
    Ok(VolumeLemmaFit {
        points,
        orders,
        slope,
        intercept,
    })
}
