//! Admissible control ranges and piecewise-constant open-loop controls.
//!
//! Shifts are stored as an additive time offset instead of rewriting
//! breakpoints, so composing shifts is exact: `u.shift(s1).shift(s2)`
//! evaluates bitwise-identically to `u.shift(s1 + s2)`.

use crate::error::{Error, Result};

/// Compact box of admissible control values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRange {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ControlRange {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::ConfigInvalid(format!(
                "control range bounds must be non-empty and of equal length (got {} and {})",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (a, b)) in lo.iter().zip(hi.iter()).enumerate() {
            if !a.is_finite() || !b.is_finite() || a >= b {
                return Err(Error::ConfigInvalid(format!(
                    "control axis {i} needs finite lo < hi (got [{a}, {b}])"
                )));
            }
        }
        Ok(ControlRange { lo, hi })
    }

    /// Single-point range; useful for exercising uncontrolled systems in
    /// tests, hence the explicit opt-in constructor.
    pub fn degenerate(value: Vec<f64>) -> Self {
        ControlRange {
            lo: value.clone(),
            hi: value,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.lo.len()
            && u.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Uniform lattice of constant control values, `per_axis` points per
    /// axis including both endpoints, enumerated in lexicographic axis order.
    /// This ordering is the canonical control indexing used everywhere a
    /// control id appears in output files.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        assert!(per_axis >= 1);
        let m = self.dim();
        let axis_values: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                if per_axis == 1 {
                    vec![0.5 * (self.lo[i] + self.hi[i])]
                } else {
                    (0..per_axis)
                        .map(|k| {
                            let t = k as f64 / (per_axis - 1) as f64;
                            self.lo[i] + t * (self.hi[i] - self.lo[i])
                        })
                        .collect()
                }
            })
            .collect();
        let mut out = vec![Vec::with_capacity(m)];
        for axis in axis_values {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for prefix in &out {
                for v in &axis {
                    let mut item = prefix.clone();
                    item.push(*v);
                    next.push(item);
                }
            }
            out = next;
        }
        out
    }
}

/// Piecewise-constant control: value `values[j]` holds on
/// `[breakpoints[j-1], breakpoints[j])` (with open ends at both infinities),
/// i.e. the control is right-continuous at switching times.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantControl {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    offset: f64,
}

impl PiecewiseConstantControl {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values.len() != breakpoints.len() + 1 {
            return Err(Error::ConfigInvalid(format!(
                "need one more value than breakpoints (got {} values, {} breakpoints)",
                values.len(),
                breakpoints.len()
            )));
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(Error::ConfigInvalid(
                "control values must share a positive dimension".into(),
            ));
        }
        for w in breakpoints.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::ConfigInvalid(format!(
                    "breakpoints must be strictly increasing (got {} then {})",
                    w[0], w[1]
                )));
            }
        }
        if breakpoints.iter().any(|b| !b.is_finite())
            || values.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::ConfigInvalid(
                "control breakpoints and values must be finite".into(),
            ));
        }
        Ok(PiecewiseConstantControl {
            breakpoints,
            values,
            offset: 0.0,
        })
    }

    pub fn constant(value: Vec<f64>) -> Self {
        PiecewiseConstantControl {
            breakpoints: Vec::new(),
            values: vec![value],
            offset: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// u(t): the value of the active piece at time t.
    pub fn evaluate(&self, t: f64) -> &[f64] {
        &self.values[self.piece_index(t)]
    }

    /// Index of the piece active at time t (pieces are right-continuous).
    pub fn piece_index(&self, t: f64) -> usize {
        let tau = t + self.offset;
        self.breakpoints.partition_point(|b| *b <= tau)
    }

    /// Time shift: the returned control is t -> u(t + s).
    pub fn shift(&self, s: f64) -> Self {
        PiecewiseConstantControl {
            breakpoints: self.breakpoints.clone(),
            values: self.values.clone(),
            offset: self.offset + s,
        }
    }

    /// Switching times expressed in the shifted frame, ascending.
    pub fn switching_times(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b - self.offset).collect()
    }

    /// Switching times strictly inside the open interval between a and b
    /// (either order), sorted in traversal direction from a to b.
    pub fn switching_times_between(&self, a: f64, b: f64) -> Vec<f64> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut inside: Vec<f64> = self
            .switching_times()
            .into_iter()
            .filter(|t| *t > lo && *t < hi)
            .collect();
        if a > b {
            inside.reverse();
        }
        inside
    }

    pub fn validate_in(&self, range: &ControlRange) -> Result<()> {
        if self.dim() != range.dim() {
            return Err(Error::ConfigInvalid(format!(
                "control dimension {} does not match range dimension {}",
                self.dim(),
                range.dim()
            )));
        }
        for (j, v) in self.values.iter().enumerate() {
            if !range.contains(v) {
                return Err(Error::ConfigInvalid(format!(
                    "control piece {j} value {v:?} is outside the admissible range"
                )));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Piecewise-constant control family on a switching grid of spacing `h`
/// with `pieces` pieces and values on the per-axis lattice of `range`.
///
/// The full family has lattice^pieces members; it is truncated at `budget`
/// in a documented order: all constant controls first (lattice order),
/// then the remaining piece-value sequences lexicographically.  The
/// constants carry the family's reach on autonomous-near targets, so they
/// are never the ones truncated away.
pub fn piecewise_family(
    range: &ControlRange,
    per_axis: usize,
    h: f64,
    pieces: usize,
    budget: usize,
) -> Result<Vec<PiecewiseConstantControl>> {
    if !(h > 0.0) || pieces == 0 || budget == 0 {
        return Err(Error::ConfigInvalid(
            "control family needs h > 0, pieces >= 1, budget >= 1".into(),
        ));
    }
    let lattice = range.lattice(per_axis);
    let breakpoints: Vec<f64> = (1..pieces).map(|j| j as f64 * h).collect();
    let mut family = Vec::new();
    for v in &lattice {
        if family.len() == budget {
            return Ok(family);
        }
        family.push(PiecewiseConstantControl::constant(v.clone()));
    }
    if pieces == 1 {
        return Ok(family);
    }
    let mut index = vec![0usize; pieces];
    loop {
        if index.windows(2).any(|w| w[0] != w[1]) {
            if family.len() == budget {
                return Ok(family);
            }
            let values: Vec<Vec<f64>> = index.iter().map(|&i| lattice[i].clone()).collect();
            family.push(PiecewiseConstantControl::new(breakpoints.clone(), values)?);
        }
        // next sequence in lexicographic order
        let mut k = pieces;
        loop {
            if k == 0 {
                return Ok(family);
            }
            k -= 1;
            index[k] += 1;
            if index[k] < lattice.len() {
                break;
            }
            index[k] = 0;
        }
    }
}
