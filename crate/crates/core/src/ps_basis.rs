//! Legendre–Gauss–Lobatto grids, differentiation and anchored integration matrices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BasisError {
    #[error("node iteration did not converge for N = {0}")]
    ConvergenceFailure(usize),
    #[error("grid degree must be at least 2, got {0}")]
    TooSmall(usize),
}

/// Nodes and positive quadrature weights on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub tau: Vec<f64>,
    pub weights: Vec<f64>,
    bary: Vec<f64>,
}

impl Grid {
    /// Polynomial degree N (there are N + 1 nodes).
    pub fn degree(&self) -> usize {
        self.tau.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn barycentric_weights(&self) -> &[f64] {
        &self.bary
    }

    pub fn quadrature(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Legendre polynomials P_{N-1}(x) and P_N(x) by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    (p0, p1)
}

pub fn lgl_grid(n: usize) -> Result<Grid, BasisError> {
    if n < 2 {
        return Err(BasisError::TooSmall(n));
    }
    let nf = n as f64;
    let mut tau = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut x = -(std::f64::consts::PI * i as f64 / nf).cos();
        if i == 0 || i == n {
            tau.push(x);
            continue;
        }
        let mut steps = 0;
        loop {
            let (pm, p) = legendre_pair(n, x);
            // Newton on (1 - x^2) P_N'(x), written through P_{N-1} and P_N.
            let dx = (x * p - pm) / ((nf + 1.0) * p);
            x -= dx;
            steps += 1;
            if dx.abs() < 1e-16 {
                break;
            }
            if steps > 100 {
                return Err(BasisError::ConvergenceFailure(n));
            }
        }
        tau.push(x);
    }
    // Symmetrize to remove round-off asymmetry.
    for i in 0..=n / 2 {
        let m = 0.5 * (tau[n - i] - tau[i]);
        tau[i] = -m;
        tau[n - i] = m;
    }
    if n.is_multiple_of(2) {
        tau[n / 2] = 0.0;
    }
    let weights = tau
        .iter()
        .map(|&x| {
            let (_, p) = legendre_pair(n, x);
            2.0 / (nf * (nf + 1.0) * p * p)
        })
        .collect();
    let bary = barycentric_weights(&tau);
    Ok(Grid { tau, weights, bary })
}

/// Gauss–Legendre nodes and weights with `m` points.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mf = m as f64;
    let mut x = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    for i in 0..m {
        let mut z = -(std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (pm, p) = legendre_pair(m, z);
            dp = mf * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x.push(z);
        w.push(2.0 / ((1.0 - z * z) * dp * dp));
    }
    (x, w)
}

/// Barycentric weights computed in log space, normalized to unit max magnitude.
fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut logs = vec![0.0; n];
    let mut signs = vec![1.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                let d = x[j] - x[k];
                logs[j] -= d.abs().ln();
                if d < 0.0 {
                    signs[j] = -signs[j];
                }
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().zip(&signs).map(|(l, s)| s * (l - top).exp()).collect()
}

/// Values of every Lagrange cardinal function at `s`.
pub fn cardinal_row(grid: &Grid, s: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    if let Some(k) = grid.tau.iter().position(|&t| t == s) {
        out[k] = 1.0;
        return out;
    }
    let mut total = 0.0;
    for (j, (t, b)) in grid.tau.iter().zip(&grid.bary).enumerate() {
        out[j] = b / (s - t);
        total += out[j];
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Interpolation matrix from grid values to values at arbitrary query points.
pub fn interpolation_matrix(grid: &Grid, query: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(query.len(), grid.len());
    for (i, &s) in query.iter().enumerate() {
        for (j, v) in cardinal_row(grid, s).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

pub fn barycentric_interpolate(grid: &Grid, values: &[f64], tau_query: f64) -> f64 {
    cardinal_row(grid, tau_query).iter().zip(values).map(|(c, v)| c * v).sum()
}

pub fn lagrange_diff_matrix(grid: &Grid) -> DMatrix<f64> {
    let n = grid.len();
    let (x, c) = (&grid.tau, &grid.bary);
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            if i != j {
                d[(i, j)] = c[j] / c[i] / (x[i] - x[j]);
                row += d[(i, j)];
            }
        }
        d[(i, i)] = -row;
    }
    d
}

/// Left-anchored integration matrix: `(B v)_i = ∫_{-1}^{τ_i} p_v`.
pub fn birkhoff_matrix(grid: &Grid) -> DMatrix<f64> {
    let n = grid.len();
    let (gx, gw) = gauss_legendre(n + 1);
    let mut b = DMatrix::zeros(n, n);
    for i in 1..n {
        let (lo, hi) = (-1.0, grid.tau[i]);
        let half = 0.5 * (hi - lo);
        for (s, w) in gx.iter().zip(&gw) {
            let row = cardinal_row(grid, half * s + 0.5 * (hi + lo));
            for (j, v) in row.into_iter().enumerate() {
                b[(i, j)] += half * w * v;
            }
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    LagrangeD,
    BirkhoffLeft,
}

/// Primal and dual discretizations of `x' = v` and `λ' = -ω`.
#[derive(Debug, Clone)]
pub struct DiscretizationPair {
    pub kind: PairKind,
    pub a_x: DMatrix<f64>,
    pub a_v: DMatrix<f64>,
    pub a_lambda: DMatrix<f64>,
    pub a_omega: DMatrix<f64>,
    pub q: DVector<f64>,
}

/// Elementwise deviations from the three commutation conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunnelCheck {
    pub a_x_minus_identity: f64,
    pub a_lambda_minus_identity: f64,
    pub a_omega_minus_adjoint: f64,
}

impl TunnelCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.a_x_minus_identity <= tol && self.a_lambda_minus_identity <= tol && self.a_omega_minus_adjoint <= tol
    }
}

/// `Q⁻¹ Aᵀ Q`.
pub fn weighted_adjoint(a: &DMatrix<f64>, q: &DVector<f64>) -> DMatrix<f64> {
    let mut t = a.transpose();
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            t[(i, j)] *= q[j] / q[i];
        }
    }
    t
}

pub fn assemble_pair(grid: &Grid, kind: PairKind) -> DiscretizationPair {
    let n = grid.len();
    let q = DVector::from_column_slice(&grid.weights);
    let eye = DMatrix::<f64>::identity(n, n);
    match kind {
        PairKind::BirkhoffLeft => {
            let b = birkhoff_matrix(grid);
            let a_omega = weighted_adjoint(&b, &q);
            DiscretizationPair { kind, a_x: -&eye, a_v: b, a_lambda: -eye, a_omega, q }
        }
        PairKind::LagrangeD => {
            let d = lagrange_diff_matrix(grid);
            DiscretizationPair { kind, a_x: -&d, a_v: eye.clone(), a_lambda: d, a_omega: eye, q }
        }
    }
}

pub fn tunnel_check(pair: &DiscretizationPair) -> TunnelCheck {
    let n = pair.q.len();
    let eye = DMatrix::<f64>::identity(n, n);
    TunnelCheck {
        a_x_minus_identity: (&pair.a_x + &eye).abs().max(),
        a_lambda_minus_identity: (&pair.a_lambda + &eye).abs().max(),
        a_omega_minus_adjoint: (&pair.a_omega - weighted_adjoint(&pair.a_v, &pair.q)).abs().max(),
    }
}

/// 2-norm condition number from singular values.
pub fn matrix_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Condition number of the anchored linear block `[A_x | A_v]` with the
/// anchor row replaced by `x_0 = x_a`.
///
/// The block is square: the unknowns are (X, V) and the rows are the
/// discretized dynamics plus the identity `V = v` that fixes the rates.
pub fn condition_number(pair: &DiscretizationPair) -> f64 {
    let n = pair.q.len();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&pair.a_x);
    m.view_mut((0, n), (n, n)).copy_from(&pair.a_v);
    match pair.kind {
        PairKind::BirkhoffLeft => {
            // Row 0 of B is empty: anchor x_0 there.
            m[(0, 0)] = 1.0;
        }
        PairKind::LagrangeD => {
            // D is singular: replace the first collocation row by the anchor.
            for j in 0..2 * n {
                m[(0, j)] = 0.0;
            }
            m[(0, 0)] = 1.0;
        }
    }
    for i in 0..n {
        m[(n + i, n + i)] = 1.0;
    }
    matrix_condition(&m)
}

pub fn cond_growth_study(ns: &[usize], kind: PairKind) -> Result<Vec<(usize, f64)>, BasisError> {
    ns.iter().map(|&n| Ok((n, condition_number(&assemble_pair(&lgl_grid(n)?, kind))))).collect()
}

/// Row-major CSV with 17 significant digits.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{:.16e}", m[(i, j)]);
        }
        s.push('\n');
    }
    s
}

/// Storage in f64 words for the dense linear blocks of a problem with `n_x` states on N + 1 nodes.
pub fn linear_system_storage(n_x: usize, n: usize) -> usize {
    2 * n_x * (n + 1) * (n + 1)
}
