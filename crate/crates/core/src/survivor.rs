//! Set-oriented survivor tracking with nested chart subdivision.
//!
//! The engine maintains a collection of chart-aligned boxes covering the
//! points that have survived a sequence of pointwise conditions along a
//! controlled trajectory.  Surviving sets shrink exponentially, so boxes are
//! refined adaptively; refinement conserves bookkept volume exactly and the
//! reported total only ever decreases, by subtracting the volumes of removed
//! boxes from a running value.

use rayon::prelude::*;

use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::grid::{AnchorIndex, CellSet, ProjectiveGrid};
use crate::projective::{projective_flow, ProjectivePoint, DEFAULT_CHUNK_DT};
use crate::system::BilinearSystem;

/// Subdivision and propagation tuning.
#[derive(Debug, Clone, Copy)]
pub struct SurvivorParams {
    /// Chunk length for flow propagation.
    pub chunk_dt: f64,
    /// Split a box side when it exceeds this fraction of vol^(1/d).
    pub width_fraction: f64,
    /// Never split sides below this chart width (rounding guard).
    pub min_width: f64,
    /// Refinement stops when the box count would exceed this budget,
    /// leaving coarse boxes in place (volumes are then overestimates).
    pub max_boxes: usize,
}

impl Default for SurvivorParams {
    fn default() -> Self {
        SurvivorParams {
            chunk_dt: DEFAULT_CHUNK_DT,
            width_fraction: 0.25,
            min_width: 1e-13,
            max_boxes: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurvivorBox {
    /// Grid cell this box descends from.
    pub cell: usize,
    pub chart: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Bookkept volume; children of a split sum to the parent exactly.
    pub volume: f64,
    /// Current positions of the box sample points (center and corners).
    points: Vec<ProjectivePoint>,
}

/// Survivor set under a fixed control, advanced in steps of length `h`.
pub struct SurvivorEngine<'a> {
    sys: &'a BilinearSystem,
    grid: &'a ProjectiveGrid,
    u: PiecewiseConstantControl,
    h: f64,
    params: SurvivorParams,
    boxes: Vec<SurvivorBox>,
    total: f64,
    steps: usize,
}

/// Sample coordinates of a chart rectangle: center plus corners.
fn sample_coords(dims: usize, lo: [f64; 2], hi: [f64; 2]) -> Vec<(f64, f64)> {
    let mid = [lo[0] + 0.5 * (hi[0] - lo[0]), lo[1] + 0.5 * (hi[1] - lo[1])];
    if dims == 1 {
        vec![(mid[0], 0.0), (lo[0], 0.0), (hi[0], 0.0)]
    } else {
        vec![
            (mid[0], mid[1]),
            (lo[0], lo[1]),
            (lo[0], hi[1]),
            (hi[0], lo[1]),
            (hi[0], hi[1]),
        ]
    }
}

impl<'a> SurvivorEngine<'a> {
    /// One box per cell of `cells`, sample points at time zero.
    pub fn new(
        sys: &'a BilinearSystem,
        grid: &'a ProjectiveGrid,
        cells: &CellSet,
        u: PiecewiseConstantControl,
        h: f64,
        params: SurvivorParams,
    ) -> Result<Self> {
        if h <= 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "survivor step {h} must be positive"
            )));
        }
        if cells.is_empty() {
            return Err(Error::EmptySurvivorSet { step: 0 });
        }
        u.validate_in(sys.range())?;
        let dims = grid.chart_dims();
        let boxes: Vec<SurvivorBox> = cells
            .cells()
            .iter()
            .map(|&idx| {
                let (chart, lo, hi) = grid.cell_chart(idx);
                let points = sample_coords(dims, lo, hi)
                    .into_iter()
                    .map(|(a, b)| grid.chart_point(chart, a, b))
                    .collect();
                SurvivorBox {
                    cell: idx,
                    chart,
                    lo,
                    hi,
                    volume: grid.cell_volume(idx),
                    points,
                }
            })
            .collect();
        let total = boxes.iter().map(|b| b.volume).sum();
        Ok(SurvivorEngine {
            sys,
            grid,
            u,
            h,
            params,
            boxes,
            total,
            steps: 0,
        })
    }

    /// Volume of the current survivor set (monotone under `filter`).
    pub fn total_volume(&self) -> f64 {
        self.total
    }

    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn boxes(&self) -> &[SurvivorBox] {
        &self.boxes
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Number of `h`-advances applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Widest chart side over all boxes.
    pub fn max_width(&self) -> f64 {
        let dims = self.grid.chart_dims();
        self.boxes
            .iter()
            .flat_map(|b| (0..dims).map(|k| b.hi[k] - b.lo[k]))
            .fold(0.0, f64::max)
    }

    /// Drops every box with a sample point failing `keep`; returns the new
    /// total volume.  The total decreases by exactly the sum of removed
    /// volumes, so it is nonincreasing bitwise.
    pub fn filter<F: Fn(&ProjectivePoint) -> bool + Sync>(&mut self, keep: F) -> f64 {
        let flags: Vec<bool> = self
            .boxes
            .par_iter()
            .map(|b| b.points.iter().all(&keep))
            .collect();
        let mut removed = 0.0;
        let mut i = 0;
        self.boxes.retain(|b| {
            let k = flags[i];
            i += 1;
            if !k {
                removed += b.volume;
            }
            k
        });
        self.total -= removed;
        self.total
    }

    /// Surviving volume per originating grid cell, sorted by cell index.
    pub fn volume_by_cell(&self) -> Vec<(usize, f64)> {
        let mut acc: Vec<(usize, f64)> = Vec::new();
        let mut sorted: Vec<(usize, f64)> =
            self.boxes.iter().map(|b| (b.cell, b.volume)).collect();
        sorted.sort_by_key(|&(c, _)| c);
        for (c, v) in sorted {
            match acc.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => acc.push((c, v)),
            }
        }
        acc
    }

    /// Ball-condition filter with fate-guided splitting.
    ///
    /// A box whose sample points all pass is kept; all-fail boxes are
    /// removed.  Mixed boxes are split along the axes across which the
    /// point fates disagree, children are re-tested at the current time,
    /// and whatever is still mixed after `rounds` (or past the budget or
    /// the width floor) is removed, so the kept volume is conservative for
    /// the all-samples-pass semantics.  Returns the new total volume.
    pub fn filter_adaptive(
        &mut self,
        anchors: &[ProjectivePoint],
        radius: f64,
        rounds: usize,
    ) -> Result<f64> {
        let index = AnchorIndex::new(self.grid, anchors);
        let pass = |p: &ProjectivePoint| index.any_within(p, radius);
        let fates_of = |b: &SurvivorBox| -> Vec<bool> { b.points.iter().map(&pass).collect() };
        let dims = self.grid.chart_dims();
        let min_w = self.params.min_width;

        let mut kept: Vec<SurvivorBox> = Vec::with_capacity(self.boxes.len());
        let mut removed = 0.0;
        let mut work: Vec<(SurvivorBox, Vec<bool>)> = {
            let boxes = std::mem::take(&mut self.boxes);
            let fates: Vec<Vec<bool>> = boxes.par_iter().map(fates_of).collect();
            boxes.into_iter().zip(fates).collect()
        };
        for round in 0..=rounds {
            let mut next: Vec<(SurvivorBox, Vec<bool>)> = Vec::new();
            let mut to_split: Vec<(SurvivorBox, bool, bool)> = Vec::new();
            for (b, fates) in work {
                if fates.iter().all(|&f| f) {
                    kept.push(b);
                    continue;
                }
                if fates.iter().all(|&f| !f) {
                    removed += b.volume;
                    continue;
                }
                // disagreement across an axis picks it for splitting; a
                // center-only disagreement gives no direction, split wide axes
                let (mut ax0, mut ax1) = if dims == 1 {
                    (true, false)
                } else {
                    (
                        fates[1] != fates[3] || fates[2] != fates[4],
                        fates[1] != fates[2] || fates[3] != fates[4],
                    )
                };
                if !ax0 && !ax1 {
                    ax0 = true;
                    ax1 = dims == 2;
                }
                ax0 = ax0 && b.hi[0] - b.lo[0] > 2.0 * min_w;
                ax1 = ax1 && b.hi[1] - b.lo[1] > 2.0 * min_w;
                let budget_left = self
                    .params
                    .max_boxes
                    .saturating_sub(kept.len() + next.len() + 4 * (to_split.len() + 1));
                if round == rounds || (!ax0 && !ax1) || budget_left == 0 {
                    removed += b.volume;
                    continue;
                }
                to_split.push((b, ax0, ax1));
            }
            let children: Vec<SurvivorBox> = to_split
                .into_iter()
                .map(|(b, ax0, ax1)| self.split_box(b, ax0, ax1))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let fates: Vec<Vec<bool>> = children.par_iter().map(fates_of).collect();
            next.extend(children.into_iter().zip(fates));
            if next.is_empty() {
                break;
            }
            work = next;
        }
        self.boxes = kept;
        self.total -= removed;
        Ok(self.total)
    }

    /// Flows every sample point forward by `h` under the stored control.
    pub fn advance(&mut self) -> Result<()> {
        let t0 = self.steps as f64 * self.h;
        let shifted = self.u.shift(t0);
        let sys = self.sys;
        let h = self.h;
        let chunk = self.params.chunk_dt;
        self.boxes
            .par_iter_mut()
            .try_for_each(|b| -> Result<()> {
                for p in &mut b.points {
                    *p = projective_flow(sys, p, &shifted, h, chunk)?;
                }
                Ok(())
            })?;
        self.steps += 1;
        Ok(())
    }

    /// Splits boxes whose sides exceed the adaptive target width until all
    /// sides are below it or the box budget is reached.  Children partition
    /// the parent volume exactly; fresh sample points are flowed from time
    /// zero to the current step.
    pub fn refine(&mut self) -> Result<()> {
        let dims = self.grid.chart_dims();
        let target = self
            .total
            .max(0.0)
            .powf(1.0 / dims as f64)
            .max(self.params.min_width / self.params.width_fraction)
            * self.params.width_fraction;
        loop {
            let too_wide = |b: &SurvivorBox| (0..dims).any(|k| b.hi[k] - b.lo[k] > target);
            if !self.boxes.iter().any(too_wide) {
                return Ok(());
            }
            let mut allowed = self.params.max_boxes.saturating_sub(self.boxes.len());
            let mut budget_hit = false;
            let mut out: Vec<SurvivorBox> = Vec::with_capacity(self.boxes.len() * 2);
            for b in std::mem::take(&mut self.boxes) {
                let split0 = b.hi[0] - b.lo[0] > target;
                let split1 = dims == 2 && b.hi[1] - b.lo[1] > target;
                let children = (1 + split0 as usize) * (1 + split1 as usize);
                if children == 1 || allowed < children - 1 {
                    budget_hit = budget_hit || children > 1;
                    out.push(b);
                    continue;
                }
                allowed -= children - 1;
                out.extend(self.split_box(b, split0, split1)?);
            }
            self.boxes = out;
            if budget_hit {
                return Ok(());
            }
        }
    }

    /// Splits one box along the requested axes (2 or 4 children), conserving
    /// its volume exactly: shares follow the exact chart rectangle volumes
    /// and the last child takes the remainder.
    fn split_box(
        &self,
        b: SurvivorBox,
        split0: bool,
        split1: bool,
    ) -> Result<Vec<SurvivorBox>> {
        let dims = self.grid.chart_dims();
        let mid = [
            b.lo[0] + 0.5 * (b.hi[0] - b.lo[0]),
            b.lo[1] + 0.5 * (b.hi[1] - b.lo[1]),
        ];
        let mut rects: Vec<([f64; 2], [f64; 2])> = Vec::with_capacity(4);
        let xs: &[(f64, f64)] = if split0 {
            &[(b.lo[0], mid[0]), (mid[0], b.hi[0])]
        } else {
            &[(b.lo[0], b.hi[0])]
        };
        let ys: &[(f64, f64)] = if split1 {
            &[(b.lo[1], mid[1]), (mid[1], b.hi[1])]
        } else {
            &[(b.lo[1], b.hi[1])]
        };
        for &(x0, x1) in xs {
            for &(y0, y1) in ys {
                rects.push(([x0, y0], [x1, y1]));
            }
        }
        let exact: Vec<f64> = rects
            .iter()
            .map(|&(lo, hi)| self.grid.chart_volume(b.chart, lo, hi).max(0.0))
            .collect();
        let exact_sum: f64 = exact.iter().sum();
        let mut shares: Vec<f64> = exact
            .iter()
            .map(|&v| {
                if exact_sum > 0.0 {
                    b.volume * (v / exact_sum)
                } else {
                    b.volume / rects.len() as f64
                }
            })
            .collect();
        let head: f64 = shares[..shares.len() - 1].iter().sum();
        *shares.last_mut().unwrap() = (b.volume - head).max(0.0);

        let t_now = self.steps as f64 * self.h;
        rects
            .into_iter()
            .zip(shares)
            .map(|((lo, hi), volume)| {
                let points = sample_coords(dims, lo, hi)
                    .into_iter()
                    .map(|(a, bb)| {
                        let p0 = self.grid.chart_point(b.chart, a, bb);
                        if t_now == 0.0 {
                            Ok(p0)
                        } else {
                            projective_flow(self.sys, &p0, &self.u, t_now, self.params.chunk_dt)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SurvivorBox {
                    cell: b.cell,
                    chart: b.chart,
                    lo,
                    hi,
                    volume,
                    points,
                })
            })
            .collect()
    }
}
