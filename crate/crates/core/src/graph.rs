//! Transition graphs over projective grids and chain control sets.
//!
//! Each cell is probed at deterministic sample points (interior points plus
//! the exact cell corners, so boundary equilibria are sampled exactly); each
//! sample is flowed for one step under each constant control, and the
//! landing point is fattened by a chain-jump radius before cell lookup.
//! Chain control sets are the nontrivial strongly connected components of
//! the resulting graph.  Edge weights (one-step unstable log-determinants)
//! are assigned lazily on component cells only, where trajectories are
//! recurrent and finite-window frame estimates are reliable.

use rayon::prelude::*;

use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::grid::{CellSet, ProjectiveGrid};
use crate::projective::{
    finite_time_exponents, log_unstable_determinant, plus_frame_via_push, projective_flow,
    ProjectivePoint,
};
use crate::system::BilinearSystem;

/// Construction parameters for the transition graph.
#[derive(Debug, Clone, Copy)]
pub struct GraphParams {
    /// Flow time per edge, seconds.
    pub step: f64,
    /// Interior sample points per cell (corners are always added).
    pub samples_per_cell: usize,
    /// Chain-jump fattening radius in multiples of the max cell diameter.
    pub chain_jump: f64,
    /// Chunk length for the underlying flow.
    pub chunk_dt: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            step: 1.0,
            samples_per_cell: 3,
            chain_jump: 1.0,
            chunk_dt: 0.5,
        }
    }
}

/// Parameters for edge-weight estimation on component cells.
#[derive(Debug, Clone, Copy)]
pub struct WeightParams {
    /// Forward window for detecting the number of expanding directions;
    /// kept short so trajectories stay near the component.
    pub exponent_window: f64,
    /// Past-push window for the expanding frame.
    pub frame_window: f64,
    /// Rate above which a finite-time exponent counts as expanding.
    pub expansion_threshold: f64,
    /// Minimum admissible gap between exponents `p` and `p+1`.
    pub separation_threshold: f64,
    pub chunk_dt: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            exponent_window: 1.0,
            frame_window: 8.0,
            expansion_threshold: 0.25,
            separation_threshold: 0.05,
            chunk_dt: 0.5,
        }
    }
}

/// A directed edge: flowing `step` seconds from a sample of `from` under
/// constant control `controls[control]` lands in (the chain-jump fattening
/// of) `to`.  `strict` records that some sample landed in `to` without any
/// fattening; singleton components are only trusted when their self-loop is
/// strict, which filters the marginal one-way loops the chain-jump slack
/// creates next to equilibria.  `weight` is the one-step unstable
/// log-determinant, `None` until assigned or when the local splitting is
/// not estimable.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub control: usize,
    pub strict: bool,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TransitionGraph {
    pub n_cells: usize,
    pub step: f64,
    pub controls: Vec<Vec<f64>>,
    /// Sorted by (from, control, to), duplicate-free.
    pub edges: Vec<Edge>,
}

impl TransitionGraph {
    /// Successor cells of a node, over all controls, deduplicated.
    pub fn successors(&self, from: usize) -> Vec<usize> {
        let lo = self.edges.partition_point(|e| e.from < from);
        let hi = self.edges.partition_point(|e| e.from <= from);
        let mut out: Vec<usize> = self.edges[lo..hi].iter().map(|e| e.to).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_self_loop(&self, node: usize) -> bool {
        self.successors(node).contains(&node)
    }

    /// Edges whose endpoints both lie in the given cell set.
    pub fn edges_within<'a>(&'a self, set: &'a CellSet) -> impl Iterator<Item = &'a Edge> {
        self.edges
            .iter()
            .filter(move |e| set.contains(e.from) && set.contains(e.to))
    }
}

/// Deterministic sample points of a cell: `n_interior` points spread inside
/// plus the exact corners.
pub fn cell_samples(grid: &ProjectiveGrid, idx: usize, n_interior: usize) -> Vec<ProjectivePoint> {
    let mut samples = Vec::with_capacity(n_interior + 4);
    match grid {
        ProjectiveGrid::Circle(_) => {
            let w = grid.cell_volume(idx);
            let lo = idx as f64 * w;
            for k in 0..n_interior {
                samples.push(ProjectivePoint::from_angle(
                    lo + w * (k as f64 + 0.5) / n_interior as f64,
                ));
            }
        }
        ProjectiveGrid::CubeMap(_) => {
            let center = grid.cell_center(idx);
            samples.push(center.clone());
            if n_interior > 1 {
                let frame = center.canonical_frame();
                let e1 = frame.basis().column(0).clone_owned();
                let e2 = frame.basis().column(1).clone_owned();
                let r = grid.cell_diameter(idx) / 4.0;
                for k in 0..(n_interior - 1) {
                    let phi = 2.0 * std::f64::consts::PI * k as f64 / (n_interior - 1) as f64;
                    let dir = &e1 * phi.cos() + &e2 * phi.sin();
                    samples.push(center.geodesic_step(&dir, r));
                }
            }
        }
    }
    samples.extend(grid.cell_corners(idx));
    samples
}

/// Build the transition graph: one flow step per (cell, sample, control),
/// edges to every cell meeting the chain-jump ball at the landing point.
///
/// Parallel over cells with a deterministic ordered merge.
pub fn build_transition_graph(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    controls: &[Vec<f64>],
    params: &GraphParams,
) -> Result<TransitionGraph> {
    if controls.is_empty() {
        return Err(Error::ConfigInvalid(
            "transition graph needs at least one control sample".into(),
        ));
    }
    if params.step <= 0.0 {
        return Err(Error::ConfigInvalid(format!(
            "graph step must be positive (got {})",
            params.step
        )));
    }
    let jump = params.chain_jump * grid.max_cell_diameter();
    let per_cell: Result<Vec<Vec<Edge>>> = (0..grid.n_cells())
        .into_par_iter()
        .map(|cell| {
            let samples = cell_samples(grid, cell, params.samples_per_cell);
            let mut edges = Vec::new();
            for (ci, cval) in controls.iter().enumerate() {
                let u = PiecewiseConstantControl::constant(cval.clone());
                let mut fattened = Vec::new();
                let mut raw = Vec::new();
                for s in &samples {
                    let y = projective_flow(sys, s, &u, params.step, params.chunk_dt)?;
                    raw.push(grid.cell_of(&y));
                    fattened.extend(grid.cells_within(&y, jump));
                }
                fattened.sort_unstable();
                fattened.dedup();
                raw.sort_unstable();
                raw.dedup();
                edges.extend(fattened.into_iter().map(|to| Edge {
                    from: cell,
                    to,
                    control: ci,
                    strict: raw.binary_search(&to).is_ok(),
                    weight: None,
                }));
            }
            Ok(edges)
        })
        .collect();
    let edges: Vec<Edge> = per_cell?.into_iter().flatten().collect();
    Ok(TransitionGraph {
        n_cells: grid.n_cells(),
        step: params.step,
        controls: controls.to_vec(),
        edges,
    })
}

/// Strongly connected components by iterative Tarjan, deterministic: nodes
/// visited in ascending order, adjacency lists sorted.
fn strongly_connected_components(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; n];
    let mut lowlink = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut components = Vec::new();
    // explicit DFS frames: (node, next child position)
    let mut frames: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        frames.push((root, 0));
        while let Some(&mut (v, ref mut child)) = frames.last_mut() {
            if *child == 0 {
                index[v] = next_index;
                lowlink[v] = next_index;
                next_index += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == UNSEEN {
                    frames.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                frames.pop();
                if let Some(&mut (parent, _)) = frames.last_mut() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack invariant");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    components.push(comp);
                }
            }
        }
    }
    components
}

/// Nontrivial strongly connected components of the graph, as candidate
/// chain control sets: size > 1, or a singleton with a strict self-loop.
/// Sorted by lowest contained cell index.
pub fn chain_control_sets(graph: &TransitionGraph) -> Vec<CellSet> {
    let mut adj = vec![Vec::new(); graph.n_cells];
    let mut strict_loop = vec![false; graph.n_cells];
    for e in &graph.edges {
        adj[e.from].push(e.to);
        if e.strict && e.from == e.to {
            strict_loop[e.from] = true;
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut comps: Vec<CellSet> = strongly_connected_components(graph.n_cells, &adj)
        .into_iter()
        .filter(|c| c.len() > 1 || strict_loop[c[0]])
        .map(CellSet::new)
        .collect();
    comps.sort_by_key(|c| c.min_cell().unwrap_or(usize::MAX));
    comps
}

/// Outcome counts of a weight-assignment pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightSummary {
    pub weighted: usize,
    pub weightless: usize,
}

/// Unstable log-determinant over `horizon` at a point, with the expanding
/// rank detected over the short exponent window; `Ok(None)` marks the point
/// weightless (rank positive but not cleanly separated).
pub fn growth_weight(
    sys: &BilinearSystem,
    x: &ProjectivePoint,
    u: &PiecewiseConstantControl,
    horizon: f64,
    wp: &WeightParams,
) -> Result<Option<f64>> {
    let d = sys.projective_dim();
    let nu = finite_time_exponents(sys, x, u, wp.exponent_window, wp.chunk_dt)?;
    let p = nu.iter().filter(|v| **v > wp.expansion_threshold).count();
    if p == 0 {
        return Ok(Some(0.0));
    }
    if p < d && nu[p - 1] - nu[p] < wp.separation_threshold {
        return Ok(None);
    }
    let frame = match plus_frame_via_push(sys, x, u, p, wp.frame_window, wp.chunk_dt) {
        Ok(f) => f,
        Err(Error::NoSeparation { .. })
        | Err(Error::FrameDegenerate { .. })
        | Err(Error::StageFailed { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let det = log_unstable_determinant(sys, &frame, u, horizon, wp.chunk_dt)?;
    Ok(Some(det.log))
}

/// One-step unstable log-determinant at a cell center under a constant
/// control; `Ok(None)` marks the cell weightless for that control (no
/// estimable splitting), which keeps it in the graph for reachability but
/// excludes it from cycle optimization.
pub fn local_weight(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    cell: usize,
    control: &[f64],
    step: f64,
    wp: &WeightParams,
) -> Result<Option<f64>> {
    let x = grid.cell_center(cell);
    let u = PiecewiseConstantControl::constant(control.to_vec());
    growth_weight(sys, &x, &u, step, wp)
}

/// Assign weights to all edges whose source lies in one of the given
/// components, one weight per (cell, control) computed at the cell center.
///
/// Parallel over (cell, control) pairs with a deterministic merge.
pub fn assign_component_weights(
    graph: &mut TransitionGraph,
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    components: &[CellSet],
    wp: &WeightParams,
) -> Result<WeightSummary> {
    let mut member = vec![false; graph.n_cells];
    for comp in components {
        for &c in comp.cells() {
            member[c] = true;
        }
    }
    let cells: Vec<usize> = (0..graph.n_cells).filter(|&c| member[c]).collect();
    let controls = graph.controls.clone();
    let step = graph.step;
    let pairs: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|&c| (0..controls.len()).map(move |k| (c, k)))
        .collect();
    let computed: Result<Vec<Option<f64>>> = pairs
        .par_iter()
        .map(|&(cell, k)| local_weight(sys, grid, cell, &controls[k], step, wp))
        .collect();
    let computed = computed?;
    let mut table = vec![None; graph.n_cells * controls.len()];
    for (&(cell, k), w) in pairs.iter().zip(computed.into_iter()) {
        table[cell * controls.len() + k] = w;
    }
    let mut summary = WeightSummary {
        weighted: 0,
        weightless: 0,
    };
    for e in &mut graph.edges {
        if member[e.from] {
            e.weight = table[e.from * controls.len() + e.control];
            match e.weight {
                Some(_) => summary.weighted += 1,
                None => summary.weightless += 1,
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    use crate::control::ControlRange;

    fn diag2d() -> BilinearSystem {
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let a1 = a0.clone();
        BilinearSystem::new(vec![a0, a1], ControlRange::new(vec![-0.5], vec![0.5]).unwrap())
            .unwrap()
    }

    fn rot3d() -> BilinearSystem {
        let a0 = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 2.0],
        );
        let a1 = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        );
        BilinearSystem::new(vec![a0, a1], ControlRange::new(vec![-0.5], vec![0.5]).unwrap())
            .unwrap()
    }

    fn control_lattice(sys: &BilinearSystem, per_axis: usize) -> Vec<Vec<f64>> {
        sys.range().lattice(per_axis)
    }

    #[test]
    fn diag2d_has_exactly_two_chain_components() {
        let sys = diag2d();
        let grid = ProjectiveGrid::new(2, 256).unwrap();
        let graph = build_transition_graph(
            &sys,
            &grid,
            &control_lattice(&sys, 3),
            &GraphParams::default(),
        )
        .unwrap();
        let comps = chain_control_sets(&graph);
        assert_eq!(comps.len(), 2, "components: {comps:?}");
        let pe1 = ProjectivePoint::axis(2, 0);
        let pe2 = ProjectivePoint::axis(2, 1);
        let near = |comp: &CellSet, p: &ProjectivePoint| {
            comp.cells()
                .iter()
                .map(|&c| grid.cell_center(c).distance(p))
                .fold(f64::INFINITY, f64::min)
        };
        let width = grid.max_cell_diameter();
        // one component hugs each eigendirection, and they are far apart
        let d1: Vec<f64> = comps.iter().map(|c| near(c, &pe1)).collect();
        let d2: Vec<f64> = comps.iter().map(|c| near(c, &pe2)).collect();
        assert!(d1.iter().cloned().fold(f64::INFINITY, f64::min) < width);
        assert!(d2.iter().cloned().fold(f64::INFINITY, f64::min) < width);
        for comp in &comps {
            let all_near_pe1 = comp
                .cells()
                .iter()
                .all(|&c| grid.cell_center(c).distance(&pe1) < 3.0 * width);
            let all_near_pe2 = comp
                .cells()
                .iter()
                .all(|&c| grid.cell_center(c).distance(&pe2) < 3.0 * width);
            assert!(
                all_near_pe1 || all_near_pe2,
                "component not localized: {:?}",
                comp.cells()
            );
        }
    }

    #[test]
    fn diag2d_flow_edges_point_away_from_repeller() {
        // between the eigendirections the projective flow is monotone, so
        // non-loop edges move cells away from pi/2 for u = 0
        let sys = diag2d();
        let grid = ProjectiveGrid::new(2, 64).unwrap();
        let graph =
            build_transition_graph(&sys, &grid, &[vec![0.0]], &GraphParams::default()).unwrap();
        let pe2_angle = std::f64::consts::FRAC_PI_2;
        for e in &graph.edges {
            let from_d = (grid.cell_center(e.from).angle() - pe2_angle).abs();
            let to_d = (grid.cell_center(e.to).angle() - pe2_angle).abs();
            // allow the chain-jump slack of one cell on each side
            let slack = 2.0 * grid.max_cell_diameter();
            if from_d > 3.0 * grid.max_cell_diameter() && from_d < 1.2 {
                assert!(
                    to_d + slack >= from_d,
                    "edge moved toward the repeller: {} -> {}",
                    e.from,
                    e.to
                );
            }
        }
    }

    #[test]
    fn equilibrium_cells_have_self_loops() {
        let sys = diag2d();
        let grid = ProjectiveGrid::new(2, 256).unwrap();
        let graph = build_transition_graph(
            &sys,
            &grid,
            &control_lattice(&sys, 3),
            &GraphParams::default(),
        )
        .unwrap();
        // attracting axis: angle 0 is the corner of cell 0
        assert!(graph.has_self_loop(0), "no self-loop at the attractor");
        // repelling axis: pi/2 is a shared corner of cells 127 and 128; the
        // corner sample is exactly fixed, so one of them must self-loop
        assert!(
            graph.has_self_loop(127) || graph.has_self_loop(128),
            "no self-loop near the repeller"
        );
    }

    #[test]
    fn graph_is_deterministic() {
        let sys = rot3d();
        let grid = ProjectiveGrid::new(3, 8).unwrap();
        let controls = control_lattice(&sys, 3);
        let params = GraphParams::default();
        let g1 = build_transition_graph(&sys, &grid, &controls, &params).unwrap();
        let g2 = build_transition_graph(&sys, &grid, &controls, &params).unwrap();
        assert_eq!(g1.edges, g2.edges);
    }

    #[test]
    fn rot3d_components_are_circle_band_and_vertical_axis() {
        let sys = rot3d();
        let grid = ProjectiveGrid::new(3, 16).unwrap();
        let graph = build_transition_graph(
            &sys,
            &grid,
            &control_lattice(&sys, 3),
            &GraphParams::default(),
        )
        .unwrap();
        let comps = chain_control_sets(&graph);
        assert_eq!(comps.len(), 2, "got {} components", comps.len());
        // classify by distance to the invariant circle {z = 0} and to e3
        let pe3 = ProjectivePoint::axis(3, 2);
        let circle_dist = |c: usize| {
            let v = grid.cell_center(c).rep().clone_owned();
            // angle between v and its projection onto the z = 0 plane
            (v[2].abs() / v.norm()).asin()
        };
        let width = grid.max_cell_diameter();
        let mut found_circle = false;
        let mut found_axis = false;
        for comp in &comps {
            let max_circle = comp
                .cells()
                .iter()
                .map(|&c| circle_dist(c))
                .fold(0.0, f64::max);
            let min_pe3 = comp
                .cells()
                .iter()
                .map(|&c| grid.cell_center(c).distance(&pe3))
                .fold(f64::INFINITY, f64::min);
            if max_circle <= width {
                found_circle = true;
                // the band should wrap all the way around: many cells
                assert!(comp.len() >= 16, "circle band too small: {}", comp.len());
            } else if min_pe3 <= width {
                found_axis = true;
                // chain recurrence at grid scale spreads over a small blob
                // around the attractor; every cell must stay near e3
                let max_pe3 = comp
                    .cells()
                    .iter()
                    .map(|&c| grid.cell_center(c).distance(&pe3))
                    .fold(0.0, f64::max);
                assert!(max_pe3 <= 3.0 * width, "axis blob too wide: {max_pe3}");
            }
        }
        assert!(found_circle, "no component within one cell of the circle");
        assert!(found_axis, "no component at the vertical axis");
    }

    #[test]
    fn empty_graph_yields_no_components() {
        let graph = TransitionGraph {
            n_cells: 5,
            step: 1.0,
            controls: vec![vec![0.0]],
            edges: Vec::new(),
        };
        assert!(chain_control_sets(&graph).is_empty());
    }

    #[test]
    fn scc_matches_hand_example() {
        // 0 <-> 1, 2 -> 0, 2 -> 3, 3 self-loop: components {0,1} and {3}
        let graph = TransitionGraph {
            n_cells: 4,
            step: 1.0,
            controls: vec![vec![0.0]],
            edges: [(0, 1), (1, 0), (2, 0), (2, 3), (3, 3)]
                .iter()
                .map(|&(f, t)| Edge {
                    from: f,
                    to: t,
                    control: 0,
                    strict: true,
                    weight: None,
                })
                .collect(),
        };
        let comps = chain_control_sets(&graph);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].cells(), &[0, 1]);
        assert_eq!(comps[1].cells(), &[3]);
    }

    #[test]
    fn weights_match_transverse_rate_on_repeller_component() {
        let sys = diag2d();
        let grid = ProjectiveGrid::new(2, 2048).unwrap();
        let wp = WeightParams::default();
        // the repeller cell pair at resolution 2048
        for cell in [1023usize, 1024] {
            for uval in [-0.5, 0.0, 0.5] {
                let w = local_weight(&sys, &grid, cell, &[uval], 1.0, &wp)
                    .unwrap()
                    .expect("weight must be estimable at the repeller");
                assert_relative_eq!(w, 2.0 * (1.0 + uval), epsilon = 2e-2);
            }
        }
        // attractor cell: no expanding directions, weight exactly zero
        let w0 = local_weight(&sys, &grid, 0, &[0.0], 1.0, &wp).unwrap();
        assert_eq!(w0, Some(0.0));
    }

    #[test]
    fn weights_match_transverse_rate_on_circle_component() {
        let sys = rot3d();
        let grid = ProjectiveGrid::new(3, 96).unwrap();
        let wp = WeightParams::default();
        // a cell straddling the invariant circle near (1, 0, 0)
        let x = ProjectivePoint::axis(3, 0);
        let cell = grid.cell_of(&x);
        for uval in [-0.5, 0.0, 0.5] {
            let w = local_weight(&sys, &grid, cell, &[uval], 1.0, &wp)
                .unwrap()
                .expect("weight must be estimable on the circle");
            assert_relative_eq!(w, 2.0 + uval, epsilon = 5e-2);
        }
    }

    #[test]
    fn assign_weights_marks_component_edges() {
        let sys = diag2d();
        let grid = ProjectiveGrid::new(2, 256).unwrap();
        let controls = control_lattice(&sys, 3);
        let mut graph =
            build_transition_graph(&sys, &grid, &controls, &GraphParams::default()).unwrap();
        let comps = chain_control_sets(&graph);
        let summary =
            assign_component_weights(&mut graph, &sys, &grid, &comps, &WeightParams::default())
                .unwrap();
        assert!(summary.weighted > 0);
        // every within-component edge has a weight on this example
        for comp in &comps {
            for e in graph.edges_within(comp) {
                assert!(e.weight.is_some(), "weightless edge {e:?}");
            }
        }
        // edges from cells outside all components remain unweighted
        let member: Vec<bool> = (0..graph.n_cells)
            .map(|c| comps.iter().any(|s| s.contains(c)))
            .collect();
        for e in &graph.edges {
            if !member[e.from] {
                assert!(e.weight.is_none());
            }
        }
    }
}
