//! Experiment configuration: a sectioned TOML schema for a bilinear system,
//! a projective grid, and an ordered pipeline of analyses.
//!
//! Parsing and validation are separate so a runner can apply command-line
//! overrides (seed, output directory) between them.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::ControlRange;
use crate::error::{Error, Result};
use crate::grid::ProjectiveGrid;
use crate::system::BilinearSystem;

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// RNG seed; required whenever the pipeline holds a stochastic stage.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub pipeline: Vec<AnalysisConfig>,
}

/// Ambient bilinear system block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Ambient state dimension.
    pub dimension: usize,
    /// Row-major square matrices: the drift first, then one per control axis.
    pub matrices: Vec<Vec<f64>>,
    /// Control box, one entry per control axis.
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
}

/// Projective grid block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: usize,
}

/// Output location block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("out"),
        }
    }
}

/// One pipeline entry; `analysis` selects the stage, the remaining keys are
/// its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "analysis", rename_all = "kebab-case")]
pub enum AnalysisConfig {
    Simulate(SimulateConfig),
    ChainSets(ChainSetsConfig),
    Splitting(SplittingConfig),
    EscapeRate(EscapeRateConfig),
    BowenVolume(BowenVolumeConfig),
    Pressure(PressureConfig),
    LowerBound(LowerBoundConfig),
    UpperBound(UpperBoundConfig),
    Report,
}

impl AnalysisConfig {
    /// Stage name as spelled in config files and file names.
    pub fn name(&self) -> &'static str {
        match self {
            AnalysisConfig::Simulate(_) => "simulate",
            AnalysisConfig::ChainSets(_) => "chain-sets",
            AnalysisConfig::Splitting(_) => "splitting",
            AnalysisConfig::EscapeRate(_) => "escape-rate",
            AnalysisConfig::BowenVolume(_) => "bowen-volume",
            AnalysisConfig::Pressure(_) => "pressure",
            AnalysisConfig::LowerBound(_) => "lower-bound",
            AnalysisConfig::UpperBound(_) => "upper-bound",
            AnalysisConfig::Report => "report",
        }
    }

    /// True when the stage draws random samples and therefore needs a seed.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, AnalysisConfig::BowenVolume(_))
    }

    /// All stage names, in canonical pipeline order.
    pub fn known_names() -> &'static [&'static str] {
        &[
            "simulate",
            "chain-sets",
            "splitting",
            "escape-rate",
            "bowen-volume",
            "pressure",
            "lower-bound",
            "upper-bound",
            "report",
        ]
    }
}

fn d_t_final() -> f64 {
    4.0
}
fn d_sample_dt() -> f64 {
    0.25
}
fn d_controls_per_axis() -> usize {
    5
}
fn d_graph_step() -> f64 {
    1.0
}
fn d_samples_per_cell() -> usize {
    3
}
fn d_chain_jump() -> f64 {
    1.0
}
fn d_horizon() -> f64 {
    8.0
}
fn d_max_cells() -> usize {
    64
}
fn d_probe_controls() -> usize {
    3
}
fn d_escape_radius() -> f64 {
    0.1
}
fn d_n_max() -> usize {
    40
}
fn d_step_h() -> f64 {
    0.5
}
fn d_n_lo() -> usize {
    5
}
fn d_n_hi() -> usize {
    25
}
fn d_ball_delta() -> f64 {
    0.2
}
fn d_mc_samples() -> usize {
    100_000
}
fn d_pressure_n() -> usize {
    24
}
fn d_pressure_delta() -> f64 {
    0.01
}
fn d_eps_factor() -> f64 {
    4.0
}
fn d_entropy_order() -> usize {
    60
}
fn d_entropy_delta() -> f64 {
    0.1
}
fn d_entropy_step() -> f64 {
    1.0
}
fn d_fiber_horizon() -> f64 {
    6.0
}
fn d_tau() -> f64 {
    4.0
}
fn d_k_radius() -> f64 {
    0.15
}
fn d_q_radius() -> f64 {
    0.2
}
fn d_family_budget() -> usize {
    16
}
fn d_split_rounds() -> usize {
    12
}

/// Flow a few ambient states and record trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    /// Initial ambient states, one row vector each.
    pub points: Vec<Vec<f64>>,
    /// Constant control value.
    pub control: Vec<f64>,
    #[serde(default = "d_t_final")]
    pub t_final: f64,
    #[serde(default = "d_sample_dt")]
    pub sample_dt: f64,
}

/// Build the transition graph and its chain components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSetsConfig {
    #[serde(default = "d_controls_per_axis")]
    pub controls_per_axis: usize,
    #[serde(default = "d_graph_step")]
    pub step: f64,
    #[serde(default = "d_samples_per_cell")]
    pub samples_per_cell: usize,
    #[serde(default = "d_chain_jump")]
    pub chain_jump: f64,
    /// Also dump the full edge list (large at fine resolutions).
    #[serde(default)]
    pub write_edges: bool,
}

/// Exponent, rank, and unstable-determinant diagnostics on component cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplittingConfig {
    /// Chain component to probe (components sorted by smallest cell).
    #[serde(default)]
    pub component: usize,
    /// Determinant horizon.
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    /// At most this many cells of the component are probed.
    #[serde(default = "d_max_cells")]
    pub max_cells: usize,
    #[serde(default = "d_probe_controls")]
    pub controls_per_axis: usize,
}

/// Survivor-volume decay around one chain component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscapeRateConfig {
    #[serde(default)]
    pub component: usize,
    pub control: Vec<f64>,
    #[serde(default = "d_escape_radius")]
    pub radius: f64,
    #[serde(default = "d_n_max")]
    pub n_max: usize,
    #[serde(default = "d_step_h")]
    pub h: f64,
}

/// Monte Carlo Bowen-ball volumes and the volume-lemma regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowenVolumeConfig {
    /// Ambient base point of the balls.
    pub point: Vec<f64>,
    pub control: Vec<f64>,
    #[serde(default = "d_n_lo")]
    pub n_lo: usize,
    #[serde(default = "d_n_hi")]
    pub n_hi: usize,
    #[serde(default = "d_ball_delta")]
    pub delta: f64,
    #[serde(default = "d_mc_samples")]
    pub samples: usize,
    #[serde(default = "d_step_h")]
    pub h: f64,
}

/// Weighted separated-orbit sums over a chain component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureConfig {
    #[serde(default)]
    pub component: usize,
    pub control: Vec<f64>,
    #[serde(default = "d_pressure_n")]
    pub n: usize,
    #[serde(default = "d_pressure_delta")]
    pub delta: f64,
    /// Keep-near radius in multiples of the max cell diameter.
    #[serde(default = "d_eps_factor")]
    pub eps_factor: f64,
    #[serde(default = "d_step_h")]
    pub h: f64,
}

/// Cycle-rate-minus-fiber-entropy lower bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerBoundConfig {
    /// Restrict to one component; all components when absent.
    #[serde(default)]
    pub component: Option<usize>,
    #[serde(default = "d_entropy_order")]
    pub entropy_order: usize,
    #[serde(default = "d_entropy_delta")]
    pub entropy_delta: f64,
    #[serde(default = "d_entropy_step")]
    pub entropy_step: f64,
    #[serde(default = "d_fiber_horizon")]
    pub fiber_horizon: f64,
}

/// Cover-and-quota spanning estimate around a chain component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpperBoundConfig {
    #[serde(default)]
    pub component: usize,
    /// K is the component fattened by this radius.
    #[serde(default = "d_k_radius")]
    pub k_radius: f64,
    /// Q is the component fattened by this radius; needs q >= k.
    #[serde(default = "d_q_radius")]
    pub q_radius: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_step_h")]
    pub h: f64,
    #[serde(default = "d_controls_per_axis")]
    pub controls_per_axis: usize,
    /// Cap on the piecewise-constant control family size.
    #[serde(default = "d_family_budget")]
    pub family_budget: usize,
    /// Adaptive split rounds per filter pass in the volume stage.
    #[serde(default = "d_split_rounds")]
    pub split_rounds: usize,
}

impl ExperimentConfig {
    /// Parse without validating.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Read and parse a config file without validating.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML (manifests echo the effective config).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Full structural validation; messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        let d = self.system.dimension;
        if !(2..=3).contains(&d) {
            return Err(Error::ConfigInvalid(format!(
                "system.dimension must be 2 or 3 (got {d}); projective grids \
                 cover RP^1 and RP^2"
            )));
        }
        if self.system.matrices.is_empty() {
            return Err(Error::ConfigInvalid(
                "system.matrices must hold the drift matrix".into(),
            ));
        }
        for (i, m) in self.system.matrices.iter().enumerate() {
            if m.len() != d * d {
                return Err(Error::ConfigInvalid(format!(
                    "matrix {i} has {} entries, expected {} ({d} x {d} row-major)",
                    m.len(),
                    d * d
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::ConfigInvalid(format!(
                    "matrix {i} holds a non-finite entry"
                )));
            }
        }
        let axes = self.system.matrices.len() - 1;
        if self.system.control_lo.len() != axes || self.system.control_hi.len() != axes {
            return Err(Error::ConfigInvalid(format!(
                "control box needs {axes} axes to match {} matrices (got lo: {}, hi: {})",
                self.system.matrices.len(),
                self.system.control_lo.len(),
                self.system.control_hi.len()
            )));
        }
        for a in 0..axes {
            if !(self.system.control_lo[a] <= self.system.control_hi[a]) {
                return Err(Error::ConfigInvalid(format!(
                    "control axis {a} has lo > hi"
                )));
            }
        }
        if self.grid.resolution < 4 {
            return Err(Error::ConfigInvalid(format!(
                "grid.resolution must be at least 4 (got {})",
                self.grid.resolution
            )));
        }
        if self.pipeline.iter().any(|s| s.is_stochastic()) && self.seed.is_none() {
            return Err(Error::ConfigInvalid(
                "pipeline holds a stochastic stage (bowen-volume): set a seed".into(),
            ));
        }
        for (i, stage) in self.pipeline.iter().enumerate() {
            self.validate_stage(stage)
                .map_err(|e| Error::ConfigInvalid(format!("pipeline stage {i}: {e}")))?;
        }
        Ok(())
    }

    fn validate_stage(&self, stage: &AnalysisConfig) -> Result<()> {
        let d = self.system.dimension;
        let axes = self.system.matrices.len().saturating_sub(1);
        let check_control = |u: &[f64], what: &str| -> Result<()> {
            if u.len() != axes {
                return Err(Error::ConfigInvalid(format!(
                    "{what} has {} entries, expected {axes}",
                    u.len()
                )));
            }
            for (a, v) in u.iter().enumerate() {
                if *v < self.system.control_lo[a] || *v > self.system.control_hi[a] {
                    return Err(Error::ConfigInvalid(format!(
                        "{what} leaves the control box on axis {a} (value {v})"
                    )));
                }
            }
            Ok(())
        };
        let positive = |v: f64, what: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::ConfigInvalid(format!("{what} must be positive")))
            }
        };
        match stage {
            AnalysisConfig::Simulate(c) => {
                if c.points.is_empty() {
                    return Err(Error::ConfigInvalid("simulate needs points".into()));
                }
                for (i, p) in c.points.iter().enumerate() {
                    if p.len() != d {
                        return Err(Error::ConfigInvalid(format!(
                            "point {i} has {} entries, expected {d}",
                            p.len()
                        )));
                    }
                }
                check_control(&c.control, "control")?;
                positive(c.t_final, "t_final")?;
                positive(c.sample_dt, "sample_dt")?;
                if c.sample_dt > c.t_final {
                    return Err(Error::ConfigInvalid("sample_dt exceeds t_final".into()));
                }
            }
            AnalysisConfig::ChainSets(c) => {
                if c.controls_per_axis == 0 {
                    return Err(Error::ConfigInvalid("controls_per_axis must be >= 1".into()));
                }
                positive(c.step, "step")?;
            }
            AnalysisConfig::Splitting(c) => {
                positive(c.horizon, "horizon")?;
                if c.max_cells == 0 || c.controls_per_axis == 0 {
                    return Err(Error::ConfigInvalid(
                        "max_cells and controls_per_axis must be >= 1".into(),
                    ));
                }
            }
            AnalysisConfig::EscapeRate(c) => {
                check_control(&c.control, "control")?;
                positive(c.radius, "radius")?;
                positive(c.h, "h")?;
                if c.n_max == 0 {
                    return Err(Error::ConfigInvalid("n_max must be >= 1".into()));
                }
            }
            AnalysisConfig::BowenVolume(c) => {
                if c.point.len() != d {
                    return Err(Error::ConfigInvalid(format!(
                        "point has {} entries, expected {d}",
                        c.point.len()
                    )));
                }
                check_control(&c.control, "control")?;
                positive(c.h, "h")?;
                if !(c.delta > 0.0 && c.delta < std::f64::consts::FRAC_PI_2) {
                    return Err(Error::ConfigInvalid(
                        "delta must lie in (0, pi/2)".into(),
                    ));
                }
                if c.n_lo == 0 || c.n_hi <= c.n_lo {
                    return Err(Error::ConfigInvalid("need 1 <= n_lo < n_hi".into()));
                }
                if c.samples == 0 {
                    return Err(Error::ConfigInvalid("samples must be >= 1".into()));
                }
            }
            AnalysisConfig::Pressure(c) => {
                check_control(&c.control, "control")?;
                positive(c.h, "h")?;
                positive(c.delta, "delta")?;
                positive(c.eps_factor, "eps_factor")?;
                if c.n == 0 {
                    return Err(Error::ConfigInvalid("n must be >= 1".into()));
                }
            }
            AnalysisConfig::LowerBound(c) => {
                positive(c.entropy_step, "entropy_step")?;
                positive(c.entropy_delta, "entropy_delta")?;
                positive(c.fiber_horizon, "fiber_horizon")?;
                if c.entropy_order == 0 {
                    return Err(Error::ConfigInvalid("entropy_order must be >= 1".into()));
                }
            }
            AnalysisConfig::UpperBound(c) => {
                positive(c.tau, "tau")?;
                positive(c.h, "h")?;
                if c.h > c.tau {
                    return Err(Error::ConfigInvalid("h exceeds tau".into()));
                }
                positive(c.k_radius, "k_radius")?;
                if c.k_radius > c.q_radius {
                    return Err(Error::ConfigInvalid("k_radius exceeds q_radius".into()));
                }
                if c.controls_per_axis == 0 || c.family_budget == 0 {
                    return Err(Error::ConfigInvalid(
                        "controls_per_axis and family_budget must be >= 1".into(),
                    ));
                }
            }
            AnalysisConfig::Report => {}
        }
        Ok(())
    }

    /// Build the ambient system from the system block.
    pub fn build_system(&self) -> Result<BilinearSystem> {
        let d = self.system.dimension;
        let mats: Vec<DMatrix<f64>> = self
            .system
            .matrices
            .iter()
            .map(|m| DMatrix::from_row_slice(d, d, m))
            .collect();
        let range = if self.system.control_lo.is_empty() {
            ControlRange::degenerate(Vec::new())
        } else {
            ControlRange::new(
                self.system.control_lo.clone(),
                self.system.control_hi.clone(),
            )?
        };
        BilinearSystem::new(mats, range)
    }

    /// Build the projective grid from the grid block.
    pub fn build_grid(&self) -> Result<ProjectiveGrid> {
        ProjectiveGrid::new(self.system.dimension, self.grid.resolution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
            seed = 7

            [system]
            dimension = 2
            matrices = [[1.0, 0.0, 0.0, -1.0], [1.0, 0.0, 0.0, -1.0]]
            control_lo = [-0.5]
            control_hi = [0.5]

            [grid]
            resolution = 256

            [output]
            directory = "out/test"
        "#
        .to_string()
    }

    #[test]
    fn round_trip_parses_validates_and_builds() {
        let text = base_toml()
            + r#"
            [[pipeline]]
            analysis = "chain-sets"

            [[pipeline]]
            analysis = "escape-rate"
            component = 1
            control = [-0.5]

            [[pipeline]]
            analysis = "report"
        "#;
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid.resolution, 256);
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.pipeline.len(), 3);
        assert_eq!(cfg.pipeline[0].name(), "chain-sets");
        assert_eq!(cfg.pipeline[1].name(), "escape-rate");
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.ambient_dim(), 2);
        let grid = cfg.build_grid().unwrap();
        assert_eq!(grid.n_cells(), 256);
        // the echo parses back to the same shape
        let echo = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&echo).unwrap();
        again.validate().unwrap();
        assert_eq!(again.pipeline.len(), 3);
    }

    #[test]
    fn mismatched_matrix_size_names_the_matrix() {
        let text = base_toml().replace(
            "[[1.0, 0.0, 0.0, -1.0], [1.0, 0.0, 0.0, -1.0]]",
            "[[1.0, 0.0, 0.0, -1.0], [1.0, 0.0, -1.0]]",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("matrix 1"), "{err}");
    }

    #[test]
    fn control_box_must_match_the_matrix_count() {
        let text = base_toml().replace("control_lo = [-0.5]", "control_lo = [-0.5, -0.5]");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("control box"), "{err}");
    }

    #[test]
    fn unknown_analysis_is_rejected_at_parse_time() {
        let text = base_toml()
            + r#"
            [[pipeline]]
            analysis = "frobnicate"
        "#;
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
    }

    #[test]
    fn stochastic_stage_requires_a_seed() {
        let text = base_toml().replace("seed = 7", "")
            + r#"
            [[pipeline]]
            analysis = "bowen-volume"
            point = [0.0, 1.0]
            control = [-0.3]
        "#;
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn defaults_fill_stage_parameters() {
        let text = base_toml()
            + r#"
            [[pipeline]]
            analysis = "chain-sets"

            [[pipeline]]
            analysis = "upper-bound"
        "#;
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        cfg.validate().unwrap();
        match &cfg.pipeline[0] {
            AnalysisConfig::ChainSets(c) => {
                assert_eq!(c.controls_per_axis, 5);
                assert_eq!(c.step, 1.0);
                assert!(!c.write_edges);
            }
            other => panic!("wrong variant {other:?}"),
        }
        match &cfg.pipeline[1] {
            AnalysisConfig::UpperBound(c) => {
                assert_eq!(c.tau, 4.0);
                assert_eq!(c.h, 0.5);
                assert_eq!(c.family_budget, 16);
            }
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn out_of_box_controls_are_rejected() {
        let text = base_toml()
            + r#"
            [[pipeline]]
            analysis = "escape-rate"
            control = [0.9]
        "#;
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("control box"), "{err}");
        assert!(err.contains("stage 0"), "{err}");
    }
}
