//! Dense helpers shared by the integrators and the projective cocycle code:
//! a scaling-and-squaring matrix exponential, deterministic orthonormal
//! complement frames, and QR-factored accumulation of long matrix products
//! (orthogonal factor plus log-diagonal, so exponents never overflow).

use nalgebra::{DMatrix, DVector};

/// Pade approximant orders and the 1-norm thresholds under which each order
/// keeps the backward error of exp below f64 unit roundoff (Higham 2005).
const THETA: [(usize, f64); 5] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_230e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068e0),
    (13, 5.371_920_351_148_152e0),
];

fn pade_coefficients(m: usize) -> &'static [f64] {
    match m {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[
            17_297_280.0,
            8_648_640.0,
            1_995_840.0,
            277_200.0,
            25_200.0,
            1_512.0,
            56.0,
            1.0,
        ],
        9 => &[
            17_643_225_600.0,
            8_821_612_800.0,
            2_075_673_600.0,
            302_702_400.0,
            30_270_240.0,
            2_162_160.0,
            110_880.0,
            3_960.0,
            90.0,
            1.0,
        ],
        13 => &[
            64_764_752_532_480_000.0,
            32_382_376_266_240_000.0,
            7_771_770_303_897_600.0,
            1_187_353_796_428_800.0,
            129_060_195_264_000.0,
            10_559_470_521_600.0,
            670_442_572_800.0,
            33_522_128_640.0,
            1_323_241_920.0,
            40_840_800.0,
            960_960.0,
            16_380.0,
            182.0,
            1.0,
        ],
        _ => unreachable!("unsupported Pade order"),
    }
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_uv(a: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = pade_coefficients(m);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    if m <= 9 {
        let mut even = vec![id.clone(), a2.clone()];
        while even.len() <= m / 2 {
            let next = even.last().unwrap() * &a2;
            even.push(next);
        }
        let mut u_inner = DMatrix::<f64>::zeros(n, n);
        let mut v = DMatrix::<f64>::zeros(n, n);
        for (k, pow) in even.iter().enumerate() {
            if 2 * k + 1 <= m {
                u_inner += pow * b[2 * k + 1];
            }
            v += pow * b[2 * k];
        }
        (a * u_inner, v)
    } else {
        let a4 = &a2 * &a2;
        let a6 = &a2 * &a4;
        let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
        let u_lo = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
        let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
        let v_lo = &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
        (a * (u_hi + u_lo), v_hi + v_lo)
    }
}

/// Matrix exponential by scaling and squaring with Pade approximants.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "expm needs a square matrix");
    let norm = one_norm(a);
    for &(m, theta) in &THETA[..4] {
        if norm <= theta {
            let (u, v) = pade_uv(a, m);
            return solve_pade(u, v);
        }
    }
    let theta13 = THETA[4].1;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s as i32);
    let (u, v) = pade_uv(&scaled, 13);
    let mut r = solve_pade(u, v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let p = &v + &u;
    let q = &v - &u;
    q.lu().solve(&p).expect("Pade denominator is singular")
}

/// Deterministic orthonormal basis of the hyperplane orthogonal to a unit
/// vector, via the Householder reflector sending `x` to a signed axis vector.
/// The reflector's remaining columns are returned, so the frame depends only
/// on `x` (flipping the sign of `x` changes the frame, which is why callers
/// canonicalise projective representatives first).
pub fn orthonormal_complement(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    assert!(n >= 2);
    let pivot = x.iter().enumerate().fold(0, |best, (i, v)| {
        if v.abs() > x[best].abs() {
            i
        } else {
            best
        }
    });
    let sign = if x[pivot] >= 0.0 { 1.0 } else { -1.0 };
    // w = x + sign*|x| e_pivot, H = I - 2 w w^T / |w|^2 maps e_pivot to -sign*x.
    let mut w = x.clone();
    w[pivot] += sign * x.norm();
    let scale = 2.0 / w.norm_squared();
    let mut frame = DMatrix::<f64>::zeros(n, n - 1);
    let mut col = 0;
    for j in 0..n {
        if j == pivot {
            continue;
        }
        for i in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            frame[(i, col)] = e - scale * w[i] * w[j];
        }
        col += 1;
    }
    frame
}

/// Running QR factorisation of a product `M_k ... M_1 Q_0`.
///
/// Only the orthogonal factor and the accumulated log of `R`'s diagonal are
/// kept; mixing terms are discarded, which is exactly what Lyapunov-exponent
/// and dominant-subspace estimation need while staying finite for products
/// whose entries would overflow f64 after a few hundred steps.
#[derive(Debug, Clone)]
pub struct QrAccumulator {
    q: DMatrix<f64>,
    log_diag: Vec<f64>,
}

impl QrAccumulator {
    /// Starts from an orthonormal frame (columns). The caller is responsible
    /// for orthonormality; a QR pass enforces it defensively.
    pub fn new(frame: DMatrix<f64>) -> Self {
        let cols = frame.ncols();
        let (q, _) = thin_qr_positive(frame);
        QrAccumulator {
            q,
            log_diag: vec![0.0; cols],
        }
    }

    /// Applies one factor to the running product. Returns the log of
    /// |det R| for this step (the volume growth of the frame span).
    pub fn push(&mut self, m: &DMatrix<f64>) -> f64 {
        let b = m * &self.q;
        let (q, log_r) = thin_qr_positive(b);
        self.q = q;
        let mut step = 0.0;
        for (acc, lr) in self.log_diag.iter_mut().zip(log_r.iter()) {
            *acc += *lr;
            step += *lr;
        }
        step
    }

    /// Same as `push` for a map given as a closure on the frame columns.
    pub fn push_with<F: FnMut(&DVector<f64>) -> DVector<f64>>(&mut self, mut map: F) -> f64 {
        let rows = self.q.nrows();
        let cols = self.q.ncols();
        let mut b = DMatrix::<f64>::zeros(rows, cols);
        for j in 0..cols {
            let img = map(&self.q.column(j).into_owned());
            b.set_column(j, &img);
        }
        let (q, log_r) = thin_qr_positive(b);
        self.q = q;
        let mut step = 0.0;
        for (acc, lr) in self.log_diag.iter_mut().zip(log_r.iter()) {
            *acc += *lr;
            step += *lr;
        }
        step
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Accumulated log |R_ii|, in column order.
    pub fn log_diagonal(&self) -> &[f64] {
        &self.log_diag
    }
}

/// Thin QR with the sign convention R_ii >= 0; returns (Q, ln|R_ii|).
/// Columns that collapse numerically get ln|R_ii| = -inf, surfaced to the
/// caller instead of panicking.
pub fn thin_qr_positive(b: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let cols = b.ncols();
    let qr = b.qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut log_r = Vec::with_capacity(cols);
    for i in 0..cols {
        let d = r[(i, i)];
        if d < 0.0 {
            for k in 0..q.nrows() {
                q[(k, i)] = -q[(k, i)];
            }
        }
        log_r.push(d.abs().ln());
    }
    (q, log_r)
}

/// Principal angle (radians) between the spans of two orthonormal frames of
/// equal column count: arccos of the smallest singular value of Qa^T Qb.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.ncols(), b.ncols());
    let m = a.transpose() * b;
    let sv = m.svd(false, false).singular_values;
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    smin.clamp(-1.0, 1.0).acos()
}

/// Smallest singular value of a (tall or square) matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| (rng.random::<f64>() - 0.5) * 2.0 * scale)
    }

    #[test]
    fn expm_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let e = expm(&z);
        assert_eq!(e, DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn expm_diagonal_matches_scalar_exp() {
        for &t in &[1e-3, 0.5, 1.0, 7.3, -4.0] {
            let a = DMatrix::from_diagonal(&DVector::from_vec(vec![t, -t, 0.25 * t]));
            let e = expm(&a);
            for (i, &lam) in [t, -t, 0.25 * t].iter().enumerate() {
                assert_abs_diff_eq!(e[(i, i)], lam.exp(), epsilon = 1e-12 * lam.exp().abs());
            }
            assert!(e[(0, 1)].abs() < 1e-14 && e[(1, 2)].abs() < 1e-14);
        }
    }

    #[test]
    fn expm_rotation_block() {
        for &t in &[0.1, 1.0, 3.9] {
            let a = DMatrix::from_row_slice(2, 2, &[0.0, t, -t, 0.0]);
            let e = expm(&a);
            assert_abs_diff_eq!(e[(0, 0)], t.cos(), epsilon = 1e-13);
            assert_abs_diff_eq!(e[(0, 1)], t.sin(), epsilon = 1e-13);
            assert_abs_diff_eq!(e[(1, 0)], -t.sin(), epsilon = 1e-13);
            assert_abs_diff_eq!(e[(1, 1)], t.cos(), epsilon = 1e-13);
        }
    }

    #[test]
    fn expm_nilpotent_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&a);
        assert_abs_diff_eq!(e[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[(1, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn expm_matches_taylor_series_small_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 0.3);
            let mut series = DMatrix::<f64>::identity(4, 4);
            let mut term = DMatrix::<f64>::identity(4, 4);
            for k in 1..30 {
                term = &term * &a / k as f64;
                series += &term;
            }
            let e = expm(&a);
            assert!((e - series).norm() < 1e-12);
        }
    }

    #[test]
    fn expm_inverse_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 3, 2.5);
            let prod = expm(&a) * expm(&(-&a));
            assert!((prod - DMatrix::<f64>::identity(3, 3)).norm() < 1e-10);
        }
    }

    #[test]
    fn complement_frame_is_orthonormal_and_orthogonal_to_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=5 {
            for _ in 0..20 {
                let mut x = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
                x /= x.norm();
                let f = orthonormal_complement(&x);
                assert_eq!(f.ncols(), n - 1);
                let gram = f.transpose() * &f;
                assert!((gram - DMatrix::<f64>::identity(n - 1, n - 1)).norm() < 1e-12);
                let overlap = f.transpose() * &x;
                assert!(overlap.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn complement_frame_is_deterministic() {
        let x = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let a = orthonormal_complement(&x);
        let b = orthonormal_complement(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn qr_accumulator_tracks_log_det_short_product() {
        // Short product: the direct determinant is still well conditioned.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut acc = QrAccumulator::new(DMatrix::identity(3, 3));
        let mut direct = DMatrix::<f64>::identity(3, 3);
        let mut total = 0.0;
        for _ in 0..6 {
            let m = random_matrix(&mut rng, 3, 1.2);
            total += acc.push(&m);
            direct = &m * &direct;
        }
        let det = direct.determinant().abs().ln();
        assert_abs_diff_eq!(total, det, epsilon = 1e-10 * det.abs().max(1.0));
    }

    #[test]
    fn qr_accumulator_tracks_log_det_long_product() {
        // Long products make a direct determinant numerically meaningless
        // (condition ~ e^70 here), so factor each step as Q1 D Q2 with known
        // |det| = prod(D) and compare against the analytic total.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut acc = QrAccumulator::new(DMatrix::identity(3, 3));
        let mut total = 0.0;
        let mut expected = 0.0;
        for _ in 0..200 {
            let (q1, _) = thin_qr_positive(random_matrix(&mut rng, 3, 1.0));
            let (q2, _) = thin_qr_positive(random_matrix(&mut rng, 3, 1.0));
            let d: Vec<f64> = (0..3).map(|_| 0.2 + 2.8 * rng.random::<f64>()).collect();
            let m = q1 * DMatrix::from_diagonal(&DVector::from_vec(d.clone())) * q2;
            total += acc.push(&m);
            expected += d.iter().map(|v| v.ln()).sum::<f64>();
        }
        assert_abs_diff_eq!(total, expected, epsilon = 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn qr_accumulator_finds_dominant_subspace() {
        // Repeated pushes of a fixed diagonal matrix align the first column
        // with the dominant eigendirection.
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.2]));
        let start = DMatrix::from_row_slice(
            3,
            3,
            &[0.577, 0.577, 0.577, 0.577, -0.789, 0.211, 0.577, 0.211, -0.789],
        );
        let mut acc = QrAccumulator::new(start);
        for _ in 0..60 {
            acc.push(&m);
        }
        let q = acc.frame();
        assert!(q[(0, 0)].abs() > 1.0 - 1e-9);
        // Finite-window rates carry an O(log(alignment)/n) transient from the
        // generic start frame, about 0.0095 here.
        let rates: Vec<f64> = acc.log_diagonal().iter().map(|v| v / 60.0).collect();
        assert_abs_diff_eq!(rates[0], 3f64.ln(), epsilon = 2e-2);
        assert_abs_diff_eq!(rates[1], 0.0, epsilon = 2e-2);
        assert_abs_diff_eq!(rates[2], 0.2f64.ln(), epsilon = 2e-2);
    }

    #[test]
    fn principal_angle_of_rotated_plane() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let t: f64 = 0.3;
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, t.cos(), 0.0, t.sin()]);
        assert_abs_diff_eq!(principal_angle(&a, &b), t, epsilon = 1e-12);
    }
}
