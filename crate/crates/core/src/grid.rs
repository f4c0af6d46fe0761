//! Cell partitions of low-dimensional projective spaces.
//!
//! RP^1 is covered by uniform angular cells on `[0, pi)`.  RP^2 uses a
//! gnomonic cube map: directions are classified by their largest coordinate
//! onto one of three canonical faces (antipodal identification makes the
//! opposite faces redundant), and each face carries an `m x m` grid.  Cell
//! volumes are exact: arc length on RP^1, and the closed-form solid angle of
//! a gnomonic rectangle on RP^2, so grid totals telescope to `pi` and `2 pi`
//! up to rounding.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::projective::ProjectivePoint;

/// Uniform angular partition of RP^1.
#[derive(Debug, Clone)]
pub struct CircleGrid {
    n: usize,
}

/// Gnomonic cube-map partition of RP^2 with three canonical faces.
#[derive(Debug, Clone)]
pub struct CubeMapGrid {
    m: usize,
    max_diameter: f64,
}

/// A cell partition of RP^1 or RP^2 with exact volumes.
#[derive(Debug, Clone)]
pub enum ProjectiveGrid {
    Circle(CircleGrid),
    CubeMap(CubeMapGrid),
}

impl ProjectiveGrid {
    /// Grid for the projective space of R^ambient_dim.
    ///
    /// `resolution` is the number of angular cells on RP^1, or the number of
    /// cells per cube-face side on RP^2.
    pub fn new(ambient_dim: usize, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::ResolutionTooSmall(resolution));
        }
        match ambient_dim {
            2 => Ok(ProjectiveGrid::Circle(CircleGrid { n: resolution })),
            3 => {
                let mut grid = CubeMapGrid {
                    m: resolution,
                    max_diameter: 0.0,
                };
                grid.max_diameter = (0..grid.n_cells())
                    .map(|i| grid.cell_diameter(i))
                    .fold(0.0, f64::max);
                Ok(ProjectiveGrid::CubeMap(grid))
            }
            d => Err(Error::UnsupportedDimension(d)),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ProjectiveGrid::Circle(_) => 2,
            ProjectiveGrid::CubeMap(_) => 3,
        }
    }

    pub fn n_cells(&self) -> usize {
        match self {
            ProjectiveGrid::Circle(g) => g.n,
            ProjectiveGrid::CubeMap(g) => g.n_cells(),
        }
    }

    /// Total volume of the space: `pi` for RP^1, `2 pi` for RP^2.
    pub fn total_volume(&self) -> f64 {
        match self {
            ProjectiveGrid::Circle(_) => PI,
            ProjectiveGrid::CubeMap(_) => 2.0 * PI,
        }
    }

    /// Index of the cell containing a point.
    pub fn cell_of(&self, x: &ProjectivePoint) -> usize {
        match self {
            ProjectiveGrid::Circle(g) => g.cell_of(x),
            ProjectiveGrid::CubeMap(g) => g.cell_of(x),
        }
    }

    /// Representative center point of a cell.
    pub fn cell_center(&self, idx: usize) -> ProjectivePoint {
        match self {
            ProjectiveGrid::Circle(g) => g.cell_center(idx),
            ProjectiveGrid::CubeMap(g) => g.cell_center(idx),
        }
    }

    /// Exact volume of a cell.
    pub fn cell_volume(&self, idx: usize) -> f64 {
        match self {
            ProjectiveGrid::Circle(g) => PI / g.n as f64,
            ProjectiveGrid::CubeMap(g) => g.cell_volume(idx),
        }
    }

    /// Diameter of a cell in the projective angle metric.
    pub fn cell_diameter(&self, idx: usize) -> f64 {
        match self {
            ProjectiveGrid::Circle(g) => PI / g.n as f64,
            ProjectiveGrid::CubeMap(g) => g.cell_diameter(idx),
        }
    }

    /// Largest cell diameter over the whole grid.
    pub fn max_cell_diameter(&self) -> f64 {
        match self {
            ProjectiveGrid::Circle(g) => PI / g.n as f64,
            ProjectiveGrid::CubeMap(g) => g.max_diameter,
        }
    }

    /// Cells meeting a metric ball around a point, sorted and deduplicated.
    ///
    /// Exact on RP^1 (interval arithmetic on angles).  On RP^2 a cell is
    /// kept when its center lies within the radius plus the cell's own
    /// corner reach: every cell the ball meets is kept, plus at most a one
    /// cell fringe, and the result grows monotonically with the radius.
    pub fn cells_within(&self, x: &ProjectivePoint, radius: f64) -> Vec<usize> {
        match self {
            ProjectiveGrid::Circle(g) => g.cells_within(x, radius),
            ProjectiveGrid::CubeMap(g) => g.cells_within(x, radius),
        }
    }

    /// Number of chart coordinates: 1 on RP^1, 2 on RP^2.
    pub fn chart_dims(&self) -> usize {
        self.ambient_dim() - 1
    }

    /// Chart rectangle of a cell: (chart id, lower corner, upper corner).
    ///
    /// RP^1 has one global angle chart; RP^2 uses the gnomonic face charts
    /// with the face axis as chart id.  The second coordinate is a dummy
    /// unit interval on RP^1 so rectangles subdivide uniformly.
    pub fn cell_chart(&self, idx: usize) -> (usize, [f64; 2], [f64; 2]) {
        match self {
            ProjectiveGrid::Circle(g) => {
                let w = PI / g.n as f64;
                (0, [idx as f64 * w, 0.0], [(idx + 1) as f64 * w, 1.0])
            }
            ProjectiveGrid::CubeMap(g) => {
                let (face, ai, bi) = g.split_index(idx);
                let (a0, a1) = g.coord_interval(ai);
                let (b0, b1) = g.coord_interval(bi);
                (face, [a0, b0], [a1, b1])
            }
        }
    }

    /// Point at chart coordinates (RP^1 ignores the second coordinate).
    pub fn chart_point(&self, chart: usize, a: f64, b: f64) -> ProjectivePoint {
        match self {
            ProjectiveGrid::Circle(_) => ProjectivePoint::from_angle(a),
            ProjectiveGrid::CubeMap(g) => g.face_point(chart, a, b),
        }
    }

    /// Exact volume of a chart rectangle (arc length or solid angle).
    pub fn chart_volume(&self, _chart: usize, lo: [f64; 2], hi: [f64; 2]) -> f64 {
        match self {
            ProjectiveGrid::Circle(_) => hi[0] - lo[0],
            ProjectiveGrid::CubeMap(_) => {
                gnomonic_corner_angle(hi[0], hi[1]) - gnomonic_corner_angle(lo[0], hi[1])
                    - gnomonic_corner_angle(hi[0], lo[1])
                    + gnomonic_corner_angle(lo[0], lo[1])
            }
        }
    }

    /// Corner points of a cell (interval endpoints on RP^1, the four
    /// gnomonic corners on RP^2).  Corners on shared boundaries are exact,
    /// so equilibria sitting on a cell boundary are sampled exactly.
    pub fn cell_corners(&self, idx: usize) -> Vec<ProjectivePoint> {
        match self {
            ProjectiveGrid::Circle(g) => {
                let w = PI / g.n as f64;
                vec![
                    ProjectivePoint::from_angle(idx as f64 * w),
                    ProjectivePoint::from_angle((idx + 1) as f64 * w),
                ]
            }
            ProjectiveGrid::CubeMap(g) => {
                let (face, ai, bi) = g.split_index(idx);
                let (a0, a1) = g.coord_interval(ai);
                let (b0, b1) = g.coord_interval(bi);
                vec![
                    g.face_point(face, a0, b0),
                    g.face_point(face, a0, b1),
                    g.face_point(face, a1, b0),
                    g.face_point(face, a1, b1),
                ]
            }
        }
    }
}

/// A sorted, duplicate-free set of cell indices over a fixed grid.
///
/// All set algebra is exact on indices; only `fatten` involves the metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSet {
    cells: Vec<usize>,
}

impl CellSet {
    pub fn new(mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        CellSet { cells }
    }

    pub fn empty() -> Self {
        CellSet { cells: Vec::new() }
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.cells.binary_search(&idx).is_ok()
    }

    pub fn min_cell(&self) -> Option<usize> {
        self.cells.first().copied()
    }

    pub fn union(&self, other: &CellSet) -> CellSet {
        let mut cells = self.cells.clone();
        cells.extend_from_slice(&other.cells);
        CellSet::new(cells)
    }

    pub fn intersect(&self, other: &CellSet) -> CellSet {
        CellSet {
            cells: self
                .cells
                .iter()
                .copied()
                .filter(|c| other.contains(*c))
                .collect(),
        }
    }

    pub fn difference(&self, other: &CellSet) -> CellSet {
        CellSet {
            cells: self
                .cells
                .iter()
                .copied()
                .filter(|c| !other.contains(*c))
                .collect(),
        }
    }

    /// Metric-ball fattening: all cells meeting a ball of the given radius
    /// around any member cell's center (always a superset).
    pub fn fatten(&self, grid: &ProjectiveGrid, radius: f64) -> CellSet {
        let mut cells = self.cells.clone();
        for &c in &self.cells {
            cells.extend(grid.cells_within(&grid.cell_center(c), radius));
        }
        CellSet::new(cells)
    }

    /// Total exact volume of the member cells.
    pub fn volume(&self, grid: &ProjectiveGrid) -> f64 {
        self.cells.iter().map(|&c| grid.cell_volume(c)).sum()
    }

    /// Grid Hausdorff distance between two cell sets (on cell centers).
    /// Infinite when exactly one side is empty, zero when both are.
    pub fn hausdorff(&self, grid: &ProjectiveGrid, other: &CellSet) -> f64 {
        match (self.is_empty(), other.is_empty()) {
            (true, true) => return 0.0,
            (true, false) | (false, true) => return f64::INFINITY,
            _ => {}
        }
        let one_sided = |a: &CellSet, b: &CellSet| -> f64 {
            a.cells
                .iter()
                .map(|&ca| {
                    let pa = grid.cell_center(ca);
                    b.cells
                        .iter()
                        .map(|&cb| grid.cell_center(cb).distance(&pa))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        one_sided(self, other).max(one_sided(other, self))
    }
}

/// Anchor points bucketed by containing cell for fast radius queries.
///
/// `any_within` scans only the anchors bucketed in cells the query ball can
/// meet (via [`ProjectiveGrid::cells_within`]), so it answers exactly the
/// same question as a linear scan over all anchors.
pub struct AnchorIndex<'g> {
    grid: &'g ProjectiveGrid,
    by_cell: HashMap<usize, Vec<ProjectivePoint>>,
}

impl<'g> AnchorIndex<'g> {
    pub fn new(grid: &'g ProjectiveGrid, anchors: &[ProjectivePoint]) -> Self {
        let mut by_cell: HashMap<usize, Vec<ProjectivePoint>> = HashMap::new();
        for a in anchors {
            by_cell.entry(grid.cell_of(a)).or_default().push(a.clone());
        }
        AnchorIndex { grid, by_cell }
    }

    /// True when some anchor lies within `radius` of `x`.
    pub fn any_within(&self, x: &ProjectivePoint, radius: f64) -> bool {
        self.grid.cells_within(x, radius).iter().any(|c| {
            self.by_cell
                .get(c)
                .is_some_and(|v| v.iter().any(|a| a.distance(x) <= radius))
        })
    }
}

impl CircleGrid {
    fn width(&self) -> f64 {
        PI / self.n as f64
    }

    fn cell_of(&self, x: &ProjectivePoint) -> usize {
        let theta = x.angle();
        let idx = (theta / self.width()) as usize;
        idx.min(self.n - 1)
    }

    fn cell_center(&self, idx: usize) -> ProjectivePoint {
        assert!(idx < self.n, "cell index out of range");
        ProjectivePoint::from_angle((idx as f64 + 0.5) * self.width())
    }

    fn cells_within(&self, x: &ProjectivePoint, radius: f64) -> Vec<usize> {
        if radius >= PI / 2.0 {
            return (0..self.n).collect();
        }
        let theta = x.angle();
        let w = self.width();
        let lo = ((theta - radius) / w).floor() as i64;
        let hi = ((theta + radius) / w).floor() as i64;
        let n = self.n as i64;
        let mut cells: Vec<usize> = (lo..=hi).map(|i| i.rem_euclid(n) as usize).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

/// Solid angle subtended at the origin by `[0, x] x [0, y]` on the plane
/// `z = 1` (signed, consistent under inclusion-exclusion).
fn gnomonic_corner_angle(x: f64, y: f64) -> f64 {
    (x * y / (1.0 + x * x + y * y).sqrt()).atan()
}

impl CubeMapGrid {
    fn n_cells(&self) -> usize {
        3 * self.m * self.m
    }

    /// Face axis and in-face grid offsets of a cell index.
    fn split_index(&self, idx: usize) -> (usize, usize, usize) {
        let per_face = self.m * self.m;
        assert!(idx < 3 * per_face, "cell index out of range");
        let face = idx / per_face;
        let rest = idx % per_face;
        (face, rest % self.m, rest / self.m)
    }

    /// Gnomonic coordinate interval of grid offset `i`.
    fn coord_interval(&self, i: usize) -> (f64, f64) {
        let m = self.m as f64;
        (-1.0 + 2.0 * i as f64 / m, -1.0 + 2.0 * (i + 1) as f64 / m)
    }

    fn cell_of(&self, x: &ProjectivePoint) -> usize {
        let v = x.rep();
        let mut face = 0;
        let mut best = -1.0;
        for k in 0..3 {
            if v[k].abs() > best {
                best = v[k].abs();
                face = k;
            }
        }
        let s = if v[face] < 0.0 { -1.0 } else { 1.0 };
        let a = s * v[(face + 1) % 3] / best;
        let b = s * v[(face + 2) % 3] / best;
        let m = self.m as f64;
        let ai = (((a + 1.0) / 2.0 * m) as usize).min(self.m - 1);
        let bi = (((b + 1.0) / 2.0 * m) as usize).min(self.m - 1);
        face * self.m * self.m + bi * self.m + ai
    }

    fn cell_center(&self, idx: usize) -> ProjectivePoint {
        let (face, ai, bi) = self.split_index(idx);
        let (a0, a1) = self.coord_interval(ai);
        let (b0, b1) = self.coord_interval(bi);
        self.face_point(face, 0.5 * (a0 + a1), 0.5 * (b0 + b1))
    }

    fn face_point(&self, face: usize, a: f64, b: f64) -> ProjectivePoint {
        let mut v = DVector::zeros(3);
        v[face] = 1.0;
        v[(face + 1) % 3] = a;
        v[(face + 2) % 3] = b;
        ProjectivePoint::new(&v).expect("face point is nonzero")
    }

    fn cell_volume(&self, idx: usize) -> f64 {
        let (_, ai, bi) = self.split_index(idx);
        let (a0, a1) = self.coord_interval(ai);
        let (b0, b1) = self.coord_interval(bi);
        gnomonic_corner_angle(a1, b1) - gnomonic_corner_angle(a0, b1)
            - gnomonic_corner_angle(a1, b0)
            + gnomonic_corner_angle(a0, b0)
    }

    fn cell_diameter(&self, idx: usize) -> f64 {
        let (face, ai, bi) = self.split_index(idx);
        let (a0, a1) = self.coord_interval(ai);
        let (b0, b1) = self.coord_interval(bi);
        let corners = [
            self.face_point(face, a0, b0),
            self.face_point(face, a0, b1),
            self.face_point(face, a1, b0),
            self.face_point(face, a1, b1),
        ];
        let mut diam: f64 = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                diam = diam.max(corners[i].distance(&corners[j]));
            }
        }
        diam
    }

    /// Greatest distance from the cell center to one of its corners.
    fn corner_reach(&self, idx: usize) -> f64 {
        let (face, ai, bi) = self.split_index(idx);
        let (a0, a1) = self.coord_interval(ai);
        let (b0, b1) = self.coord_interval(bi);
        let center = self.cell_center(idx);
        let mut reach: f64 = 0.0;
        for a in [a0, a1] {
            for b in [b0, b1] {
                reach = reach.max(self.face_point(face, a, b).distance(&center));
            }
        }
        reach
    }

    /// Cells sharing an edge with `idx`, probed half a cell beyond each edge
    /// midpoint; `cell_of` carries the probe across face boundaries.
    fn edge_neighbors(&self, idx: usize) -> [usize; 4] {
        let (face, ai, bi) = self.split_index(idx);
        let (a0, a1) = self.coord_interval(ai);
        let (b0, b1) = self.coord_interval(bi);
        let (am, bm) = (0.5 * (a0 + a1), 0.5 * (b0 + b1));
        let h = 0.5 * (a1 - a0);
        [
            self.cell_of(&self.face_point(face, a0 - h, bm)),
            self.cell_of(&self.face_point(face, a1 + h, bm)),
            self.cell_of(&self.face_point(face, am, b0 - h)),
            self.cell_of(&self.face_point(face, am, b1 + h)),
        ]
    }

    fn cells_within(&self, x: &ProjectivePoint, radius: f64) -> Vec<usize> {
        // Flood fill over edge neighbors.  A cell is kept when its center
        // lies within the radius plus its own corner reach: a superset of
        // the cells the ball meets that, unlike the exact test, is trivially
        // monotone in the radius, so fattening by a larger radius always
        // yields a superset.  The walk continues two diameters past the keep
        // range so an unkept gap can never cut off kept cells.
        let slack = 2.0 * self.max_diameter;
        let seed = self.cell_of(x);
        let mut seen = vec![false; self.n_cells()];
        seen[seed] = true;
        let mut queue = VecDeque::from([seed]);
        let mut cells = Vec::new();
        while let Some(c) = queue.pop_front() {
            let d = self.cell_center(c).distance(x);
            let keep = radius + self.corner_reach(c);
            if d > keep + slack {
                continue;
            }
            if d <= keep {
                cells.push(c);
            }
            for nb in self.edge_neighbors(c) {
                if !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        cells.sort_unstable();
        cells
    }
}
