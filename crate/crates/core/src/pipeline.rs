//! Staged experiment runner.
//!
//! Executes a validated configuration's pipeline in order, shares results
//! between stages (the transition graph and its chain components feed every
//! later analysis), writes one CSV per result table, and finishes with a
//! TOML manifest recording a content hash per file plus the effective
//! configuration.
//!
//! Numeric CSV fields carry 17 significant digits and all parallel merges
//! are order-preserving, so identical configurations and seeds reproduce
//! the files byte for byte regardless of thread count.  Stochastic stages
//! derive their seed as `config.seed + stage index`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bounds::{
    invariance_entropy_upper, lower_bound_report, BoundReport, ReportParams, UpperEstimate,
    UpperParams,
};
use crate::bowen::{bowen_ball_volumes, pressure_trace, volume_lemma_fit, BowenBallParams};
use crate::config::{
    AnalysisConfig, BowenVolumeConfig, ChainSetsConfig, EscapeRateConfig, ExperimentConfig,
    LowerBoundConfig, PressureConfig, SimulateConfig, SplittingConfig, UpperBoundConfig,
};
use crate::control::PiecewiseConstantControl;
use crate::error::{Error, Result};
use crate::escape::escape_rate_trace;
use crate::graph::{
    assign_component_weights, build_transition_graph, chain_control_sets, growth_weight,
    GraphParams, TransitionGraph, WeightParams,
};
use crate::grid::{CellSet, ProjectiveGrid};
use crate::projective::{
    finite_time_exponents, plus_frame_via_push, ProjectivePoint, DEFAULT_CHUNK_DT,
};
use crate::survivor::SurvivorParams;
use crate::system::{integrate_trajectory, BilinearSystem};

/// One file written by a stage, as recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// One executed stage, as recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub index: usize,
    pub name: String,
    pub millis: u64,
    pub files: Vec<FileRecord>,
}

/// What a finished run produced and where.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub stages: Vec<StageRecord>,
}

impl RunSummary {
    pub fn file_count(&self) -> usize {
        self.stages.iter().map(|s| s.files.len()).sum()
    }
}

#[derive(Serialize)]
struct ManifestDoc<'a> {
    generator: String,
    seed: Option<u64>,
    total_millis: u64,
    stages: &'a [StageRecord],
    config: &'a ExperimentConfig,
}

/// Results shared between stages over one run.
#[derive(Default)]
struct Artifacts {
    graph: Option<TransitionGraph>,
    components: Vec<CellSet>,
    /// Per component: edge weights already assigned.
    weighted: Vec<bool>,
    /// Lower-bound reports keyed by component index, in execution order.
    reports: Vec<(usize, BoundReport)>,
    /// Spanning estimates keyed by component index, with their horizon.
    uppers: Vec<(usize, f64, UpperEstimate)>,
}

impl Artifacts {
    fn graph_and_components(&self) -> Result<(&TransitionGraph, &[CellSet])> {
        match &self.graph {
            Some(g) => Ok((g, &self.components)),
            None => Err(Error::ConfigInvalid(
                "needs the transition graph: run a chain-sets stage first".into(),
            )),
        }
    }

    fn component(&self, idx: usize) -> Result<&CellSet> {
        self.components.get(idx).ok_or_else(|| {
            Error::ConfigInvalid(format!(
                "component {idx} out of range: chain-sets found {}",
                self.components.len()
            ))
        })
    }
}

/// 17 significant digits; round-trips every f64 exactly.
fn sig(v: f64) -> String {
    format!("{v:.16e}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Wrap a stage error so the failure names the stage that raised it.
fn stage_error(stage: &str, e: Error) -> Error {
    let message = match e {
        Error::StageFailed {
            stage: inner,
            message,
        } if inner == stage => message,
        other => other.to_string(),
    };
    Error::StageFailed {
        stage: stage.into(),
        message,
    }
}

/// Run a validated configuration's pipeline and write its outputs.
///
/// Validation and setup problems surface as [`Error::ConfigInvalid`];
/// anything that goes wrong while a stage executes comes back as
/// [`Error::StageFailed`] naming that stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let sys = config.build_system()?;
    let grid = config.build_grid()?;
    let out_dir = config.output.directory.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| {
        Error::ConfigInvalid(format!(
            "cannot create output directory {}: {e}",
            out_dir.display()
        ))
    })?;

    let run_started = Instant::now();
    let mut artifacts = Artifacts::default();
    let mut stages: Vec<StageRecord> = Vec::with_capacity(config.pipeline.len());
    for (index, stage) in config.pipeline.iter().enumerate() {
        let name = stage.name();
        let started = Instant::now();
        let files = execute_stage(config, &sys, &grid, index, stage, &mut artifacts)
            .map_err(|e| stage_error(name, e))?;
        let mut records = Vec::with_capacity(files.len());
        for (file_name, content) in files {
            let path = out_dir.join(&file_name);
            std::fs::write(&path, content.as_bytes())
                .map_err(|e| stage_error(name, e.into()))?;
            records.push(FileRecord {
                name: file_name,
                bytes: content.len(),
                sha256: sha256_hex(content.as_bytes()),
            });
        }
        stages.push(StageRecord {
            index,
            name: name.into(),
            millis: started.elapsed().as_millis() as u64,
            files: records,
        });
    }

    let manifest = ManifestDoc {
        generator: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        seed: config.seed,
        total_millis: run_started.elapsed().as_millis() as u64,
        stages: &stages,
        config,
    };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| stage_error("manifest", Error::ConfigInvalid(e.to_string())))?;
    let manifest_path = out_dir.join("manifest.toml");
    std::fs::write(&manifest_path, manifest_text)
        .map_err(|e| stage_error("manifest", e.into()))?;

    Ok(RunSummary {
        output_dir: out_dir,
        manifest_path,
        stages,
    })
}

type StageFiles = Vec<(String, String)>;

fn execute_stage(
    config: &ExperimentConfig,
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    index: usize,
    stage: &AnalysisConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    match stage {
        AnalysisConfig::Simulate(c) => run_simulate(sys, c),
        AnalysisConfig::ChainSets(c) => run_chain_sets(sys, grid, c, artifacts),
        AnalysisConfig::Splitting(c) => run_splitting(sys, grid, c, artifacts),
        AnalysisConfig::EscapeRate(c) => run_escape_rate(sys, grid, c, artifacts),
        AnalysisConfig::BowenVolume(c) => {
            let seed = config.seed.unwrap_or(0) + index as u64;
            run_bowen_volume(sys, c, seed)
        }
        AnalysisConfig::Pressure(c) => run_pressure(sys, grid, c, artifacts),
        AnalysisConfig::LowerBound(c) => run_lower_bound(sys, grid, c, artifacts),
        AnalysisConfig::UpperBound(c) => run_upper_bound(sys, grid, c, artifacts),
        AnalysisConfig::Report => run_report(artifacts),
    }
}

fn run_simulate(sys: &BilinearSystem, c: &SimulateConfig) -> Result<StageFiles> {
    let affine = sys.to_control_affine();
    let u = PiecewiseConstantControl::constant(c.control.clone());
    let samples = ((c.t_final / c.sample_dt) + 1e-9).floor() as usize;
    let rk_step = (c.sample_dt / 4.0).min(0.01);
    let dim = sys.ambient_dim();

    let mut csv = String::from("point,time");
    for a in 0..dim {
        let _ = write!(csv, ",x{a}");
    }
    csv.push('\n');
    for (pi, p) in c.points.iter().enumerate() {
        let mut x = DVector::from_column_slice(p);
        let row = |k: usize, x: &DVector<f64>, csv: &mut String| {
            let _ = write!(csv, "{pi},{}", sig(k as f64 * c.sample_dt));
            for a in 0..dim {
                let _ = write!(csv, ",{}", sig(x[a]));
            }
            csv.push('\n');
        };
        row(0, &x, &mut csv);
        for k in 1..=samples {
            let shifted = u.shift((k - 1) as f64 * c.sample_dt);
            x = integrate_trajectory(&affine, &x, &shifted, c.sample_dt, rk_step)?;
            row(k, &x, &mut csv);
        }
    }
    Ok(vec![("trajectories.csv".into(), csv)])
}

fn run_chain_sets(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &ChainSetsConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    let controls = sys.range().lattice(c.controls_per_axis);
    let params = GraphParams {
        step: c.step,
        samples_per_cell: c.samples_per_cell,
        chain_jump: c.chain_jump,
        chunk_dt: DEFAULT_CHUNK_DT,
    };
    let graph = build_transition_graph(sys, grid, &controls, &params)?;
    let components = chain_control_sets(&graph);

    let mut summary = String::from("component,cells,volume,min_cell\n");
    for (ci, comp) in components.iter().enumerate() {
        let _ = writeln!(
            summary,
            "{ci},{},{},{}",
            comp.len(),
            sig(comp.volume(grid)),
            comp.min_cell().expect("components are nonempty")
        );
    }

    let dim = sys.ambient_dim();
    let mut cells = String::from("component,cell");
    for a in 0..dim {
        let _ = write!(cells, ",x{a}");
    }
    cells.push_str(",volume\n");
    for (ci, comp) in components.iter().enumerate() {
        for &cell in comp.cells() {
            let center = grid.cell_center(cell);
            let _ = write!(cells, "{ci},{cell}");
            for a in 0..dim {
                let _ = write!(cells, ",{}", sig(center.rep()[a]));
            }
            let _ = writeln!(cells, ",{}", sig(grid.cell_volume(cell)));
        }
    }

    let mut files: StageFiles = vec![
        ("components.csv".into(), summary),
        ("chain_cells.csv".into(), cells),
    ];
    if c.write_edges {
        let mut edges = String::from("from,control,to,strict\n");
        for e in &graph.edges {
            let _ = writeln!(edges, "{},{},{},{}", e.from, e.control, e.to, e.strict);
        }
        files.push(("graph_edges.csv".into(), edges));
    }

    artifacts.weighted = vec![false; components.len()];
    artifacts.components = components;
    artifacts.graph = Some(graph);
    Ok(files)
}

fn run_splitting(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &SplittingConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    artifacts.graph_and_components()?;
    let comp = artifacts.component(c.component)?;
    let controls = sys.range().lattice(c.controls_per_axis);
    let wp = WeightParams::default();
    let cells: Vec<usize> = comp.cells().iter().copied().take(c.max_cells).collect();
    let pairs: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|&cell| (0..controls.len()).map(move |k| (cell, k)))
        .collect();

    let rows: Result<Vec<(Vec<f64>, usize, Option<f64>)>> = pairs
        .par_iter()
        .map(|&(cell, k)| {
            let x = grid.cell_center(cell);
            let u = PiecewiseConstantControl::constant(controls[k].clone());
            let nu = finite_time_exponents(sys, &x, &u, wp.exponent_window, wp.chunk_dt)?;
            let rank = nu.iter().filter(|v| **v > wp.expansion_threshold).count();
            let log_det = growth_weight(sys, &x, &u, c.horizon, &wp)?;
            Ok((nu, rank, log_det))
        })
        .collect();
    let rows = rows?;

    let axes = sys.range().dim();
    let pd = sys.projective_dim();
    let mut csv = String::from("cell,control");
    for a in 0..axes {
        let _ = write!(csv, ",u{a}");
    }
    for j in 0..pd {
        let _ = write!(csv, ",exponent{j}");
    }
    csv.push_str(",rank,log_det\n");
    for (&(cell, k), (nu, rank, log_det)) in pairs.iter().zip(&rows) {
        let _ = write!(csv, "{cell},{k}");
        for a in 0..axes {
            let _ = write!(csv, ",{}", sig(controls[k][a]));
        }
        for v in nu {
            let _ = write!(csv, ",{}", sig(*v));
        }
        let _ = write!(csv, ",{rank},");
        if let Some(w) = log_det {
            csv.push_str(&sig(*w));
        }
        csv.push('\n');
    }
    Ok(vec![("splitting.csv".into(), csv)])
}

fn run_escape_rate(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &EscapeRateConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    artifacts.graph_and_components()?;
    let comp = artifacts.component(c.component)?;
    let u = PiecewiseConstantControl::constant(c.control.clone());
    let fibers = vec![comp.clone(); c.n_max];
    let est = escape_rate_trace(
        sys,
        grid,
        &fibers,
        &u,
        c.radius,
        c.n_max,
        c.h,
        &SurvivorParams::default(),
    )?;

    let rates = est.rates();
    let mut csv = String::from("n,time,log_volume,rate\n");
    for ((&n, &v), r) in est
        .trace
        .horizons()
        .iter()
        .zip(est.trace.values())
        .zip(rates)
    {
        let _ = writeln!(csv, "{n},{},{},{}", sig(n as f64 * est.h), sig(v), sig(r));
    }
    Ok(vec![("escape_rate.csv".into(), csv)])
}

fn run_bowen_volume(sys: &BilinearSystem, c: &BowenVolumeConfig, seed: u64) -> Result<StageFiles> {
    let x = ProjectivePoint::new(&DVector::from_column_slice(&c.point))?;
    let u = PiecewiseConstantControl::constant(c.control.clone());
    let params = BowenBallParams {
        h: c.h,
        chunk_dt: DEFAULT_CHUNK_DT,
        seed,
        z: 1.96,
    };
    let wp = WeightParams::default();
    let nu = finite_time_exponents(sys, &x, &u, wp.exponent_window, params.chunk_dt)?;
    let rank = nu.iter().filter(|v| **v > wp.expansion_threshold).count();
    if rank == 0 {
        return Err(Error::ConfigInvalid(format!(
            "no expanding direction at the base point (exponents {nu:?}); \
             the volume regression needs a positive unstable rank"
        )));
    }
    let frame = plus_frame_via_push(sys, &x, &u, rank, wp.frame_window, params.chunk_dt)?;

    let est = bowen_ball_volumes(sys, &x, &u, c.n_hi, c.delta, c.samples, &params)?;
    let fit = volume_lemma_fit(sys, &frame, &u, c.n_lo, c.n_hi, c.delta, c.samples, &params)?;

    let mut volumes = String::from("n,survivors,volume,ci_low,ci_high\n");
    for i in 0..est.volumes.len() {
        let _ = writeln!(
            volumes,
            "{},{},{},{},{}",
            i + 1,
            est.survivors[i],
            sig(est.volumes[i]),
            sig(est.ci_low[i]),
            sig(est.ci_high[i])
        );
    }

    let mut fit_csv = String::from("n,log_jacobian,neg_log_volume\n");
    for (n, (xj, y)) in fit.orders.iter().zip(&fit.points) {
        let _ = writeln!(fit_csv, "{n},{},{}", sig(*xj), sig(*y));
    }

    let mut summary = String::from("slope,intercept,rank,ball_volume,samples\n");
    let _ = writeln!(
        summary,
        "{},{},{rank},{},{}",
        sig(fit.slope),
        sig(fit.intercept),
        sig(est.ball_volume),
        est.samples
    );

    Ok(vec![
        ("bowen_volumes.csv".into(), volumes),
        ("volume_fit.csv".into(), fit_csv),
        ("volume_fit_summary.csv".into(), summary),
    ])
}

fn run_pressure(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &PressureConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    artifacts.graph_and_components()?;
    let comp = artifacts.component(c.component)?;
    let u = PiecewiseConstantControl::constant(c.control.clone());
    let eps = c.eps_factor * grid.max_cell_diameter();
    let fibers = vec![comp.clone(); c.n];
    let trace = pressure_trace(
        sys,
        grid,
        &fibers,
        &u,
        c.n,
        c.delta,
        eps,
        c.h,
        &WeightParams::default(),
    )?;

    let mut csv = String::from("n,time,value,rate\n");
    for (&n, &v) in trace.horizons().iter().zip(trace.values()) {
        let t = n as f64 * c.h;
        let _ = writeln!(csv, "{n},{},{},{}", sig(t), sig(v), sig(v / t));
    }
    Ok(vec![("pressure.csv".into(), csv)])
}

fn run_lower_bound(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &LowerBoundConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    artifacts.graph_and_components()?;
    let selected: Vec<usize> = match c.component {
        Some(i) => {
            artifacts.component(i)?;
            vec![i]
        }
        None => (0..artifacts.components.len()).collect(),
    };

    let to_weight: Vec<CellSet> = selected
        .iter()
        .filter(|&&i| !artifacts.weighted[i])
        .map(|&i| artifacts.components[i].clone())
        .collect();
    if !to_weight.is_empty() {
        let graph = artifacts.graph.as_mut().expect("checked above");
        assign_component_weights(graph, sys, grid, &to_weight, &WeightParams::default())?;
        for &i in &selected {
            artifacts.weighted[i] = true;
        }
    }

    let params = ReportParams {
        fiber_horizon: c.fiber_horizon,
        fiber_radius: None,
        entropy_order: c.entropy_order,
        entropy_delta: c.entropy_delta,
        entropy_step: c.entropy_step,
        ..ReportParams::default()
    };

    let graph = artifacts.graph.as_ref().expect("checked above");
    let mut bounds = String::from(
        "component,cells,cycle_rate,fiber_entropy,entropy_control,lower_bound\n",
    );
    let mut certs = String::from("component,position,cell,control,weight\n");
    let mut reports: Vec<(usize, BoundReport)> = Vec::new();
    for &i in &selected {
        let comp = &artifacts.components[i];
        match lower_bound_report(sys, grid, graph, comp, &params) {
            Ok(report) => {
                let control_field = report
                    .entropy_control
                    .map(|k| k.to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    bounds,
                    "{i},{},{},{},{control_field},{}",
                    comp.len(),
                    sig(report.cycle_rate),
                    sig(report.fiber_entropy),
                    sig(report.lower_bound)
                );
                let cycle = &report.cycle;
                for (pos, (&cell, &control)) in
                    cycle.cells.iter().zip(&cycle.controls).enumerate()
                {
                    let to = cycle.cells[(pos + 1) % cycle.cells.len()];
                    let weight = graph
                        .edges
                        .iter()
                        .find(|e| e.from == cell && e.control == control && e.to == to)
                        .and_then(|e| e.weight);
                    let _ = write!(certs, "{i},{pos},{cell},{control},");
                    if let Some(w) = weight {
                        certs.push_str(&sig(w));
                    }
                    certs.push('\n');
                }
                reports.push((i, report));
            }
            // A component whose weighted subgraph has no cycle gets a blank
            // row; the remaining components still report.
            Err(Error::NoCycle) => {
                let _ = writeln!(bounds, "{i},{},,,,", comp.len());
            }
            Err(e) => return Err(e),
        }
    }
    artifacts.reports.extend(reports);

    Ok(vec![
        ("lower_bounds.csv".into(), bounds),
        ("cycle_certificates.csv".into(), certs),
    ])
}

fn run_upper_bound(
    sys: &BilinearSystem,
    grid: &ProjectiveGrid,
    c: &UpperBoundConfig,
    artifacts: &mut Artifacts,
) -> Result<StageFiles> {
    artifacts.graph_and_components()?;
    let comp = artifacts.component(c.component)?;
    let k = comp.fatten(grid, c.k_radius);
    let q = comp.fatten(grid, c.q_radius);
    let pieces = ((c.tau / c.h) + 1e-9).floor().max(1.0) as usize;
    let family = crate::control::piecewise_family(
        sys.range(),
        c.controls_per_axis,
        c.h,
        pieces,
        c.family_budget,
    )?;
    let params = UpperParams {
        radius: None,
        rounds: c.split_rounds,
        survivor: SurvivorParams::default(),
    };
    let est = invariance_entropy_upper(sys, grid, &k, &q, c.tau, &family, c.h, &params)?;

    let mut csv = String::from(
        "component,tau,controls,k_cells,q_cells,cover_controls,covered_cells,\
         quota,best_kept_volume,remainder_volume,rate\n",
    );
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{},{},{}",
        c.component,
        sig(c.tau),
        family.len(),
        k.len(),
        q.len(),
        est.cover_controls,
        est.covered_cells,
        est.quota,
        sig(est.best_kept_volume),
        sig(est.remainder_volume),
        sig(est.rate)
    );
    artifacts.uppers.push((c.component, c.tau, est));
    Ok(vec![("upper_bound.csv".into(), csv)])
}

fn run_report(artifacts: &mut Artifacts) -> Result<StageFiles> {
    if artifacts.reports.is_empty() && artifacts.uppers.is_empty() {
        return Err(Error::ConfigInvalid(
            "nothing to report: run lower-bound or upper-bound first".into(),
        ));
    }
    type Merged<'a> = (Option<&'a BoundReport>, Option<(f64, &'a UpperEstimate)>);
    let mut merged: BTreeMap<usize, Merged> = BTreeMap::new();
    for (i, r) in &artifacts.reports {
        merged.entry(*i).or_default().0 = Some(r);
    }
    for (i, tau, u) in &artifacts.uppers {
        merged.entry(*i).or_default().1 = Some((*tau, u));
    }

    let mut csv = String::from(
        "component,lower_bound,cycle_rate,fiber_entropy,upper_rate,gap,consistent\n",
    );
    for (i, (lower, upper)) in &merged {
        let _ = write!(csv, "{i},");
        if let Some(r) = lower {
            let _ = write!(
                csv,
                "{},{},{}",
                sig(r.lower_bound),
                sig(r.cycle_rate),
                sig(r.fiber_entropy)
            );
        } else {
            csv.push_str(",,");
        }
        csv.push(',');
        if let Some((_, u)) = upper {
            csv.push_str(&sig(u.rate));
        }
        csv.push(',');
        if let (Some(r), Some((tau, u))) = (lower, upper) {
            // The spanning side counts whole controls over one horizon, so
            // its rate can sit up to one bit per horizon below the limit;
            // consistency allows exactly that much.
            let slack = std::f64::consts::LN_2 / tau;
            let _ = write!(
                csv,
                "{},{}",
                sig(u.rate - r.lower_bound),
                u.rate + slack + 1e-9 >= r.lower_bound
            );
        } else {
            csv.push(',');
        }
        csv.push('\n');
    }
    Ok(vec![("report.csv".into(), csv)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn base_toml(dir: &Path, resolution: usize) -> String {
        format!(
            r#"
            seed = 11

            [system]
            dimension = 2
            matrices = [[1.0, 0.0, 0.0, -1.0], [1.0, 0.0, 0.0, -1.0]]
            control_lo = [-0.5]
            control_hi = [0.5]

            [grid]
            resolution = {resolution}

            [output]
            directory = "{}"
        "#,
            dir.display()
        )
    }

    fn run_from_toml(text: &str) -> Result<RunSummary> {
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        run_experiment(&config)
    }

    #[test]
    fn full_pipeline_runs_and_manifests_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_toml(dir.path(), 32)
            + r#"
            [[pipeline]]
            analysis = "simulate"
            points = [[1.0, 0.3]]
            control = [-0.5]
            t_final = 1.0
            sample_dt = 0.5

            [[pipeline]]
            analysis = "chain-sets"
            controls_per_axis = 3

            [[pipeline]]
            analysis = "splitting"
            component = 1
            horizon = 2.0
            max_cells = 4

            [[pipeline]]
            analysis = "escape-rate"
            component = 1
            control = [-0.5]
            radius = 0.12
            n_max = 6

            [[pipeline]]
            analysis = "bowen-volume"
            point = [0.0, 1.0]
            control = [-0.3]
            n_lo = 2
            n_hi = 5
            samples = 400

            [[pipeline]]
            analysis = "pressure"
            component = 1
            control = [-0.5]
            n = 4
            delta = 0.05

            [[pipeline]]
            analysis = "lower-bound"
            component = 1
            entropy_order = 8
            fiber_horizon = 2.0

            [[pipeline]]
            analysis = "upper-bound"
            component = 1
            k_radius = 0.15
            q_radius = 0.25
            tau = 2.0
            h = 1.0
            controls_per_axis = 3
            family_budget = 4
            split_rounds = 4

            [[pipeline]]
            analysis = "report"
        "#;
        let summary = run_from_toml(&text).unwrap();
        assert_eq!(summary.stages.len(), 9);
        assert!(summary.manifest_path.exists());

        // every manifest entry matches the bytes on disk
        for stage in &summary.stages {
            for file in &stage.files {
                let bytes = std::fs::read(summary.output_dir.join(&file.name)).unwrap();
                assert_eq!(bytes.len(), file.bytes, "{}", file.name);
                assert_eq!(sha256_hex(&bytes), file.sha256, "{}", file.name);
            }
        }
        let names: Vec<&str> = summary
            .stages
            .iter()
            .flat_map(|s| s.files.iter().map(|f| f.name.as_str()))
            .collect();
        for expected in [
            "trajectories.csv",
            "components.csv",
            "chain_cells.csv",
            "splitting.csv",
            "escape_rate.csv",
            "bowen_volumes.csv",
            "volume_fit.csv",
            "volume_fit_summary.csv",
            "pressure.csv",
            "lower_bounds.csv",
            "cycle_certificates.csv",
            "upper_bound.csv",
            "report.csv",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }

        // trajectories: header plus three samples of the single point
        let traj =
            std::fs::read_to_string(summary.output_dir.join("trajectories.csv")).unwrap();
        assert_eq!(traj.lines().count(), 4);

        // the manifest parses back and echoes the config
        let manifest =
            std::fs::read_to_string(&summary.manifest_path).unwrap();
        let doc: toml::Value = toml::from_str(&manifest).unwrap();
        assert_eq!(doc["seed"].as_integer(), Some(11));
        assert_eq!(doc["stages"].as_array().unwrap().len(), 9);
        assert_eq!(doc["config"]["grid"]["resolution"].as_integer(), Some(32));

        // the merged report has a fully populated row for the component
        let report = std::fs::read_to_string(summary.output_dir.join("report.csv")).unwrap();
        let row = report.lines().nth(1).unwrap();
        assert!(row.starts_with("1,"), "{row}");
        assert_eq!(row.split(',').count(), 7, "{row}");
        assert!(row.split(',').all(|f| !f.is_empty()), "{row}");
    }

    #[test]
    fn same_seed_reruns_write_identical_bytes() {
        let stages = r#"
            [[pipeline]]
            analysis = "bowen-volume"
            point = [0.0, 1.0]
            control = [-0.3]
            n_lo = 2
            n_hi = 5
            samples = 300
        "#;
        let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let text = base_toml(dir.path(), 16) + stages;
            let summary = run_from_toml(&text).unwrap();
            let mut files: Vec<(String, Vec<u8>)> = summary
                .stages
                .iter()
                .flat_map(|s| s.files.iter().map(|f| f.name.clone()))
                .map(|name| {
                    let bytes = std::fs::read(summary.output_dir.join(&name)).unwrap();
                    (name, bytes)
                })
                .collect();
            files.sort();
            outputs.push(files);
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn stages_needing_the_graph_fail_without_it() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_toml(dir.path(), 16)
            + r#"
            [[pipeline]]
            analysis = "escape-rate"
            control = [-0.5]
        "#;
        let err = run_from_toml(&text).unwrap_err();
        match err {
            Error::StageFailed { stage, message } => {
                assert_eq!(stage, "escape-rate");
                assert!(message.contains("chain-sets"), "{message}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn missing_component_names_the_failing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_toml(dir.path(), 16)
            + r#"
            [[pipeline]]
            analysis = "chain-sets"
            controls_per_axis = 3

            [[pipeline]]
            analysis = "splitting"
            component = 99
        "#;
        let err = run_from_toml(&text).unwrap_err();
        match err {
            Error::StageFailed { stage, message } => {
                assert_eq!(stage, "splitting");
                assert!(message.contains("component 99"), "{message}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected_before_any_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        let text = base_toml(&out, 2);
        let err = run_from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(_)), "{err:?}");
        assert!(!out.exists());
    }
}
