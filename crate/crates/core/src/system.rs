//! Control-affine systems x' = f_0(x) + sum_i u_i(t) f_i(x), their joint
//! variational flow, and the bilinear specialisation f_i(x) = A_i x whose
//! piecewise-constant solutions are exact matrix-exponential products.
//!
//! Integration is fixed-step RK4, split exactly at control switching times so
//! a step never straddles a discontinuity of u.

use crate::control::{ControlRange, PiecewiseConstantControl};
use crate::error::{Error, Result};
use crate::linalg::expm;
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// f(x) = A x.
pub struct LinearField {
    a: DMatrix<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        LinearField { a }
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
}

pub struct ControlAffineSystem {
    drift: Box<dyn VectorField>,
    controls: Vec<Box<dyn VectorField>>,
    range: ControlRange,
    blowup_bound: f64,
}

impl ControlAffineSystem {
    pub fn new(
        drift: Box<dyn VectorField>,
        controls: Vec<Box<dyn VectorField>>,
        range: ControlRange,
    ) -> Result<Self> {
        let dim = drift.dim();
        if controls.iter().any(|f| f.dim() != dim) {
            return Err(Error::ConfigInvalid(
                "control vector fields must share the drift dimension".into(),
            ));
        }
        if controls.len() != range.dim() {
            return Err(Error::ConfigInvalid(format!(
                "{} control fields but control range has dimension {}",
                controls.len(),
                range.dim()
            )));
        }
        Ok(ControlAffineSystem {
            drift,
            controls,
            range,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        })
    }

    pub fn with_blowup_bound(mut self, bound: f64) -> Self {
        self.blowup_bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn range(&self) -> &ControlRange {
        &self.range
    }

    pub fn field(&self, x: &DVector<f64>, u: &[f64]) -> DVector<f64> {
        let mut f = self.drift.eval(x);
        for (ui, fi) in u.iter().zip(self.controls.iter()) {
            f += fi.eval(x) * *ui;
        }
        f
    }

    pub fn field_jacobian(&self, x: &DVector<f64>, u: &[f64]) -> DMatrix<f64> {
        let mut j = self.drift.jacobian(x);
        for (ui, fi) in u.iter().zip(self.controls.iter()) {
            j += fi.jacobian(x) * *ui;
        }
        j
    }
}

/// State and space-derivative of the flow: D = d phi(t, x0, u) / d x0.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub x: DVector<f64>,
    pub d: DMatrix<f64>,
    pub time: f64,
}

fn check_state(x: &DVector<f64>, t: f64, bound: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { time: t });
    }
    let norm = x.norm();
    if norm > bound {
        return Err(Error::Blowup {
            time: t,
            norm,
            bound,
        });
    }
    Ok(())
}

/// Splits [0, t] (either sign) at control switching times, yielding segments
/// over which the control value is constant.
fn constant_segments(u: &PiecewiseConstantControl, t: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0];
    cuts.extend(u.switching_times_between(0.0, t));
    cuts.push(t);
    cuts.windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[0], w[1]))
        .collect()
}

fn rk4_step(
    sys: &ControlAffineSystem,
    x: &DVector<f64>,
    u: &[f64],
    h: f64,
) -> DVector<f64> {
    let k1 = sys.field(x, u);
    let k2 = sys.field(&(x + &k1 * (h / 2.0)), u);
    let k3 = sys.field(&(x + &k2 * (h / 2.0)), u);
    let k4 = sys.field(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// phi(t, x0, u) by fixed-step RK4 with steps of magnitude at most h.
pub fn integrate_trajectory(
    sys: &ControlAffineSystem,
    x0: &DVector<f64>,
    u: &PiecewiseConstantControl,
    t: f64,
    h: f64,
) -> Result<DVector<f64>> {
    assert!(h > 0.0, "step size must be positive");
    assert_eq!(x0.len(), sys.dim());
    let mut x = x0.clone();
    check_state(&x, 0.0, sys.blowup_bound)?;
    if t == 0.0 {
        return Ok(x);
    }
    for (a, b) in constant_segments(u, t) {
        let uval = u.evaluate(0.5 * (a + b)).to_vec();
        let span = b - a;
        let n = (span.abs() / h).ceil().max(1.0) as usize;
        let dt = span / n as f64;
        let mut tcur = a;
        for _ in 0..n {
            x = rk4_step(sys, &x, &uval, dt);
            tcur += dt;
            check_state(&x, tcur, sys.blowup_bound)?;
        }
    }
    Ok(x)
}

/// Joint RK4 on (x, D): x' = f(x, u), D' = Df(x, u) D, D(0) = I.
pub fn integrate_variational(
    sys: &ControlAffineSystem,
    x0: &DVector<f64>,
    u: &PiecewiseConstantControl,
    t: f64,
    h: f64,
) -> Result<VariationalState> {
    assert!(h > 0.0, "step size must be positive");
    assert_eq!(x0.len(), sys.dim());
    let n = sys.dim();
    let mut x = x0.clone();
    let mut d = DMatrix::<f64>::identity(n, n);
    check_state(&x, 0.0, sys.blowup_bound)?;
    if t == 0.0 {
        return Ok(VariationalState { x, d, time: 0.0 });
    }
    for (a, b) in constant_segments(u, t) {
        let uval = u.evaluate(0.5 * (a + b)).to_vec();
        let span = b - a;
        let steps = (span.abs() / h).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let mut tcur = a;
        for _ in 0..steps {
            let k1x = sys.field(&x, &uval);
            let k1d = sys.field_jacobian(&x, &uval) * &d;

            let x2 = &x + &k1x * (dt / 2.0);
            let d2 = &d + &k1d * (dt / 2.0);
            let k2x = sys.field(&x2, &uval);
            let k2d = sys.field_jacobian(&x2, &uval) * &d2;

            let x3 = &x + &k2x * (dt / 2.0);
            let d3 = &d + &k2d * (dt / 2.0);
            let k3x = sys.field(&x3, &uval);
            let k3d = sys.field_jacobian(&x3, &uval) * &d3;

            let x4 = &x + &k3x * dt;
            let d4 = &d + &k3d * dt;
            let k4x = sys.field(&x4, &uval);
            let k4d = sys.field_jacobian(&x4, &uval) * &d4;

            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
            d += (k1d + k2d * 2.0 + k3d * 2.0 + k4d) * (dt / 6.0);
            tcur += dt;
            check_state(&x, tcur, sys.blowup_bound)?;
        }
    }
    Ok(VariationalState { x, d, time: t })
}

/// Bilinear system x' = (A_0 + sum_i u_i A_i) x on R^(d+1).
#[derive(Debug, Clone)]
pub struct BilinearSystem {
    matrices: Vec<DMatrix<f64>>,
    range: ControlRange,
}

impl BilinearSystem {
    /// `matrices[0]` is the drift A_0; the rest pair with control axes.
    pub fn new(matrices: Vec<DMatrix<f64>>, range: ControlRange) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::ConfigInvalid("need at least a drift matrix".into()));
        }
        let n = matrices[0].nrows();
        if n < 2 {
            return Err(Error::ConfigInvalid(
                "bilinear systems need ambient dimension at least 2".into(),
            ));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::ConfigInvalid(format!(
                    "matrix A_{i} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if matrices.len() - 1 != range.dim() {
            return Err(Error::ConfigInvalid(format!(
                "{} control matrices but control range has dimension {}",
                matrices.len() - 1,
                range.dim()
            )));
        }
        Ok(BilinearSystem { matrices, range })
    }

    pub fn ambient_dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// Dimension d of the induced projective space RP^d.
    pub fn projective_dim(&self) -> usize {
        self.ambient_dim() - 1
    }

    pub fn range(&self) -> &ControlRange {
        &self.range
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    /// A(u) = A_0 + sum u_i A_i.
    pub fn matrix_at(&self, u: &[f64]) -> DMatrix<f64> {
        let mut a = self.matrices[0].clone();
        for (ui, ai) in u.iter().zip(self.matrices[1..].iter()) {
            a += ai * *ui;
        }
        a
    }

    /// Fundamental matrix Phi with x(t1) = Phi x(t0): the exact product of
    /// per-piece matrix exponentials, traversed from t0 towards t1.
    pub fn fundamental_matrix(
        &self,
        u: &PiecewiseConstantControl,
        t0: f64,
        t1: f64,
    ) -> DMatrix<f64> {
        let n = self.ambient_dim();
        let mut phi = DMatrix::<f64>::identity(n, n);
        if t0 == t1 {
            return phi;
        }
        let mut cuts = vec![t0];
        cuts.extend(u.switching_times_between(t0, t1));
        cuts.push(t1);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == b {
                continue;
            }
            let uval = u.evaluate(0.5 * (a + b));
            let piece = expm(&(self.matrix_at(uval) * (b - a)));
            phi = piece * phi;
        }
        phi
    }

    /// Wraps the system as generic control-affine fields so the RK4 paths can
    /// be cross-checked against the exact exponential propagation.
    pub fn to_control_affine(&self) -> ControlAffineSystem {
        let drift: Box<dyn VectorField> = Box::new(LinearField::new(self.matrices[0].clone()));
        let controls: Vec<Box<dyn VectorField>> = self.matrices[1..]
            .iter()
            .map(|a| Box::new(LinearField::new(a.clone())) as Box<dyn VectorField>)
            .collect();
        ControlAffineSystem::new(drift, controls, self.range.clone())
            .expect("bilinear dimensions are validated on construction")
    }
}
