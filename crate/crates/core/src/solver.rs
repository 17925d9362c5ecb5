//! Guess-free solve of the generalized equation.
//!
//! Three stages run in order. Stabilize builds internal starting points,
//! restores feasibility by elastic least squares and walks a smoothing
//! homotopy with damped Newton, falling back to backtracking and smooth
//! perturbations when that fails. Accelerate carries the iterate over a
//! growing mesh while tightening the stage tolerance. Refine polishes on the
//! final mesh until the control-stationarity rows meet the user tolerance.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ocp_model::{
    doctor_check, jacobian_of, IterationRecord, OcpDefinition, Severity, SolutionBundle, SolveDiagnostics,
    SolveStatus, StageSummary,
};
use crate::problem_file::SolverOverrides;
use crate::ps_basis::{interpolation_matrix, lgl_grid, BasisError};
use crate::transcription::{
    bound_violation, build_generalized_equation, Decision, GeneralizedEquation, NlpForm, TranscriptionError,
};

/// No tolerance below this is meaningful in double precision.
pub const TOLERANCE_FLOOR: f64 = 1e-8;
/// Levenberg parameter beyond which a step is declared hopeless.
pub const RHO_MAX: f64 = 1e6;
/// First smoothing level of the homotopy on the initial mesh.
pub const SIGMA_WARMUP: f64 = 1e-1;
/// Largest interpolated path violation a starting point may carry.
pub const DENSE_ACCEPT: f64 = 0.1;
/// Primal violation below which an unconverged point is still reported as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Refinement aims this far below the requested tolerance.
pub const POLISH: f64 = 1e-2;
/// Number of jittered midpoint candidates.
pub const JITTER_CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("problem is not solvable as declared: {0}")]
    Doctor(String),
    #[error("Newton system is singular: regularization reached {rho:e} without progress")]
    SingularSystem { rho: f64 },
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub n0: usize,
    pub n_max: usize,
    pub mesh_growth: usize,
    pub delta0: f64,
    pub delta_final: f64,
    pub sigma_schedule: Vec<f64>,
    pub max_inner_iters: usize,
    pub backtrack_depth: usize,
    pub moore_smith_max: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n0: 16,
            n_max: 128,
            mesh_growth: 2,
            delta0: 1e-2,
            delta_final: 1e-8,
            sigma_schedule: vec![1e-2, 1e-4, 1e-6],
            max_inner_iters: 200,
            backtrack_depth: 3,
            moore_smith_max: 5,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn apply_overrides(&mut self, o: &SolverOverrides) {
        if let Some(v) = o.n0 {
            self.n0 = v;
        }
        if let Some(v) = o.n_max {
            self.n_max = v;
        }
        if let Some(v) = o.tol {
            self.delta_final = v;
        }
        if let Some(v) = o.delta0 {
            self.delta0 = v;
        }
        if let Some(v) = &o.sigma_schedule {
            self.sigma_schedule = v.clone();
        }
        if let Some(v) = o.max_inner_iters {
            self.max_inner_iters = v;
        }
        if let Some(v) = o.moore_smith_max {
            self.moore_smith_max = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
    }

    /// Checks consistency and clamps `delta_final` to the floor.
    pub fn validated(&self) -> Result<SolverConfig, SolverError> {
        let bad = |m: &str| Err(SolverError::Config(m.to_string()));
        if self.n0 < 2 {
            return bad("n0 must be at least 2");
        }
        if self.n_max < self.n0 {
            return bad("n_max must not be below n0");
        }
        if self.mesh_growth < 2 {
            return bad("mesh_growth must be at least 2");
        }
        if !(self.delta0.is_finite() && self.delta0 > 0.0) {
            return bad("delta0 must be positive");
        }
        if !(self.delta_final > 0.0) || self.delta_final.is_nan() {
            return bad("tolerance must be positive");
        }
        if self.sigma_schedule.is_empty() {
            return bad("sigma_schedule is empty");
        }
        if self.sigma_schedule.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("sigma_schedule entries must be positive");
        }
        if self.sigma_schedule.windows(2).any(|w| w[1] > w[0]) {
            return bad("sigma_schedule must be non-increasing");
        }
        if self.max_inner_iters == 0 || self.backtrack_depth == 0 {
            return bad("max_inner_iters and backtrack_depth must be positive");
        }
        let mut c = self.clone();
        if c.delta_final < TOLERANCE_FLOOR {
            log::warn!("tolerance {:e} is below the round-off floor; using {:e}", c.delta_final, TOLERANCE_FLOOR);
            c.delta_final = TOLERANCE_FLOOR;
        }
        if c.delta0 < c.delta_final {
            c.delta0 = c.delta_final;
        }
        Ok(c)
    }

    /// `N0, g N0, g² N0, …` up to `n_max`.
    pub fn mesh_sizes(&self) -> Vec<usize> {
        let mut out = vec![self.n0];
        while let Some(next) = out.last().map(|n| n * self.mesh_growth).filter(|n| *n <= self.n_max) {
            out.push(next);
        }
        out
    }

    fn sigma_at(&self, mesh: usize) -> f64 {
        self.sigma_schedule[mesh.min(self.sigma_schedule.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Stabilize,
    Accelerate,
    Refine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stabilize => "stabilize",
            Stage::Accelerate => "accelerate",
            Stage::Refine => "refine",
        })
    }
}

/// A square nonlinear system `r(z) = 0`.
pub trait RootSystem {
    fn residual(&self, z: &[f64]) -> Result<DVector<f64>, TranscriptionError>;
    fn residual_and_jacobian(&self, z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>), TranscriptionError>;
}

impl RootSystem for GeneralizedEquation {
    fn residual(&self, z: &[f64]) -> Result<DVector<f64>, TranscriptionError> {
        GeneralizedEquation::residual(self, z)
    }
    fn residual_and_jacobian(&self, z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>), TranscriptionError> {
        GeneralizedEquation::residual_and_jacobian(self, z)
    }
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn lu_solve(a: &faer::Mat<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    use faer::linalg::solvers::Solve;
    let rhs = faer::Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = a.partial_piv_lu().solve(&rhs);
    let out = DVector::from_fn(b.len(), |i, _| x[(i, 0)]);
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn merit(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

fn inf_norm(r: &DVector<f64>) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn axpy(z: &[f64], alpha: f64, d: &DVector<f64>) -> Vec<f64> {
    z.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub z: Vec<f64>,
    pub merit: f64,
    pub step_norm: f64,
    /// Levenberg parameter to use on the next step.
    pub rho: f64,
}

/// Armijo search along `d`; returns the accepted point and its merit.
fn armijo<S: RootSystem + ?Sized>(sys: &S, z: &[f64], d: &DVector<f64>, phi0: f64) -> Option<(Vec<f64>, f64, f64)> {
    let mut alpha = 1.0;
    while alpha >= 1e-4 {
        let zn = axpy(z, alpha, d);
        if let Ok(rn) = sys.residual(&zn) {
            let phi = merit(&rn);
            if phi.is_finite() && phi <= phi0 * (1.0 - 1e-4 * alpha) {
                return Some((zn, phi, alpha));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// One regularized Newton step `(J + ρI)Δ = -r` with Armijo backtracking on `½‖r‖²`.
///
/// When the regularized Newton direction cannot decrease the merit, the
/// Levenberg–Marquardt direction `(JᵀJ + ρI)Δ = -Jᵀr`, which always descends,
/// is tried before `ρ` is raised.
pub fn damped_newton_step<S: RootSystem + ?Sized>(sys: &S, z: &[f64], rho: f64) -> Result<StepOutcome, SolverError> {
    let (r, j) = sys.residual_and_jacobian(z)?;
    let phi0 = merit(&r);
    if phi0 == 0.0 {
        return Ok(StepOutcome { z: z.to_vec(), merit: 0.0, step_norm: 0.0, rho });
    }
    let jf = to_faer(&j);
    let n = j.ncols();
    let neg_r = -&r;
    let mut normal: Option<(faer::Mat<f64>, DVector<f64>)> = None;
    let mut rho = rho.max(1e-12);
    while rho <= RHO_MAX {
        let mut a = jf.clone();
        for i in 0..n.min(j.nrows()) {
            a[(i, i)] += rho;
        }
        let mut found = if j.nrows() == n { lu_solve(&a, &neg_r).and_then(|d| armijo(sys, z, &d, phi0).map(|s| (s, d))) } else { None };
        if found.is_none() {
            let (jtj, g) = normal.get_or_insert_with(|| (jf.transpose() * &jf, j.tr_mul(&neg_r)));
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += rho;
            }
            found = lu_solve(&a, g).and_then(|d| armijo(sys, z, &d, phi0).map(|s| (s, d)));
        }
        if let Some(((zn, phi, alpha), d)) = found {
            return Ok(StepOutcome { z: zn, merit: phi, step_norm: alpha * d.amax(), rho: (rho / 10.0).max(1e-12) });
        }
        rho *= 10.0;
    }
    Err(SolverError::SingularSystem { rho })
}

/// Plain Newton step `JΔ = -r`, accepted without a merit test.
pub fn full_newton_step<S: RootSystem + ?Sized>(sys: &S, z: &[f64]) -> Result<StepOutcome, SolverError> {
    let (r, j) = sys.residual_and_jacobian(z)?;
    let d = lu_solve(&to_faer(&j), &(-&r)).ok_or(SolverError::SingularSystem { rho: 0.0 })?;
    let zn = axpy(z, 1.0, &d);
    let phi = sys.residual(&zn).map(|r| merit(&r)).unwrap_or(f64::INFINITY);
    Ok(StepOutcome { z: zn, merit: phi, step_norm: d.amax(), rho: 0.0 })
}

/// True when the last five merit values each increased.
pub fn divergence_detected(merits: &[f64]) -> bool {
    merits.len() >= 6 && merits[merits.len() - 6..].windows(2).all(|w| w[1] > w[0])
}

#[derive(Debug, Clone)]
pub struct IterationState {
    pub z: Vec<f64>,
    pub stage: Stage,
    pub n: usize,
    pub merit: f64,
    /// The last `backtrack_depth` accepted iterates with their merit.
    pub history: VecDeque<(f64, Vec<f64>)>,
    pub depth: usize,
    pub merit_trace: Vec<f64>,
    pub steps: usize,
    pub restarts: usize,
}

impl IterationState {
    pub fn new(z: Vec<f64>, stage: Stage, n: usize, merit: f64, depth: usize) -> IterationState {
        let mut s = IterationState {
            z: Vec::new(),
            stage,
            n,
            merit: f64::INFINITY,
            history: VecDeque::new(),
            depth: depth.max(1),
            merit_trace: Vec::new(),
            steps: 0,
            restarts: 0,
        };
        s.accept(z, merit);
        s
    }

    pub fn accept(&mut self, z: Vec<f64>, merit: f64) {
        if self.history.len() == self.depth {
            self.history.pop_front();
        }
        if merit.is_finite() {
            self.history.push_back((merit, z.clone()));
        }
        self.z = z;
        self.merit = merit;
        self.merit_trace.push(merit);
    }

    pub fn best(&self) -> Option<&(f64, Vec<f64>)> {
        self.history.iter().min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Restores the best retained iterate and re-enters stabilization.
pub fn backtrack_restart(state: &IterationState) -> IterationState {
    let (m, z) = state.best().cloned().unwrap_or((state.merit, state.z.clone()));
    let mut s = IterationState::new(z, Stage::Stabilize, state.n, m, state.depth);
    s.restarts = state.restarts + 1;
    s.steps = state.steps;
    s
}

/// Amplitude, as a fraction of the search-box span, of perturbation round `k`.
pub fn moore_smith_amplitude(k: usize) -> f64 {
    0.01 * f64::powi(2.0, k as i32)
}

/// The `attempt`-th member of the perturbation net around `base`: rounds of
/// doubling amplitude, each perturbing one state component up then down by
/// the bubble mode `1 - τ²`, clipped to the search box. `None` once exhausted.
pub fn moore_smith_perturb(ge: &GeneralizedEquation, base: &[f64], attempt: usize, max_rounds: usize) -> Option<Vec<f64>> {
    let l = ge.layout;
    let per_round = 2 * l.nx;
    if per_round == 0 || attempt >= max_rounds * per_round {
        return None;
    }
    let k = attempt / per_round;
    let comp = (attempt % per_round) / 2;
    let sign = if attempt.is_multiple_of(2) { 1.0 } else { -1.0 };
    let s = &ge.def.search;
    let span = s.x_hi[comp] - s.x_lo[comp];
    let mut d = Decision::unpack(&l, base);
    for (i, t) in ge.grid.tau.iter().enumerate() {
        let v = d.x[(comp, i)] + sign * moore_smith_amplitude(k) * span * (1.0 - t * t);
        d.x[(comp, i)] = v.clamp(s.x_lo[comp], s.x_hi[comp]);
    }
    refresh_virtual(ge, &mut d);
    Some(d.pack())
}

/// Sets `V = a f(X, U)` node by node.
fn refresh_virtual(ge: &GeneralizedEquation, d: &mut Decision) {
    let def = &ge.def;
    let a = 0.5 * (d.tf - d.t0);
    for i in 0..ge.layout.n {
        let x: Vec<f64> = d.x.column(i).iter().cloned().collect();
        let u: Vec<f64> = d.u.column(i).iter().cloned().collect();
        let out = def.running.eval(&def.running_arg(&x, &u, ge.node_time(d.t0, d.tf, i), &d.p));
        for k in 0..ge.layout.nx {
            let f = out[1 + k];
            d.v[(k, i)] = if f.is_finite() { a * f } else { 0.0 };
        }
    }
}

fn halton(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut c = 2u64;
    while out.len() < count {
        if out.iter().take_while(|p| *p * *p <= c).all(|p| !c.is_multiple_of(*p)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn legendre(m: usize, t: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, t);
    if m == 0 {
        return p0;
    }
    for k in 1..m {
        let p2 = ((2 * k + 1) as f64 * t * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Endpoint states implied by the event bounds, found by least squares from the box midpoint.
fn implied_endpoints(def: &OcpDefinition, t0: f64, tf: f64, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nx = def.n_x;
    let mid = def.search.x_mid();
    let mut y: Vec<f64> = mid.iter().chain(mid.iter()).cloned().collect();
    let resid = |y: &[f64]| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let arg = def.endpoint_arg(&y[..nx], &y[nx..], t0, tf, p);
        let out = def.endpoint.eval(&arg);
        let jac = jacobian_of(def.endpoint.as_ref(), &arg);
        let mut r = DVector::zeros(def.n_e);
        let mut j = DMatrix::zeros(def.n_e, 2 * nx);
        for e in 0..def.n_e {
            let v = out[1 + e];
            r[e] = v - v.clamp(def.event_lo[e], def.event_hi[e]);
            if r[e] != 0.0 {
                for c in 0..2 * nx {
                    j[(e, c)] = jac[(1 + e, c)];
                }
            }
        }
        (r.iter().all(|v| v.is_finite()) && j.iter().all(|v| v.is_finite())).then_some((r, j))
    };
    let mut rho = 1e-3;
    for _ in 0..100 {
        let Some((r, j)) = resid(&y) else { break };
        if inf_norm(&r) < 1e-12 {
            break;
        }
        let a = j.tr_mul(&j) + DMatrix::identity(2 * nx, 2 * nx) * rho;
        let Some(d) = a.lu().solve(&(-j.tr_mul(&r))) else { break };
        let yn: Vec<f64> = y.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
        match resid(&yn) {
            Some((rn, _)) if rn.norm() < r.norm() => {
                y = yn;
                rho = (rho / 3.0).max(1e-12);
            }
            _ => rho *= 4.0,
        }
    }
    let s = &def.search;
    let clip = |v: &[f64]| v.iter().enumerate().map(|(k, x)| x.clamp(s.x_lo[k], s.x_hi[k])).collect::<Vec<_>>();
    (clip(&y[..nx]), clip(&y[nx..]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub label: String,
    pub z: Vec<f64>,
}

/// Prioritized internal starting points: the straight line between the
/// event-implied endpoint states, the search-box midpoint, and midpoints with
/// seeded low-discrepancy jitter. Multipliers start at zero.
pub fn guess_free_candidates(ge: &GeneralizedEquation, seed: u64) -> Vec<Candidate> {
    let def = &ge.def;
    let l = ge.layout;
    let (t0, tf) = def.time.representative();
    let p = def.search.p_mid();
    let xm = def.search.x_mid();
    let um = def.search.u_mid();
    let base = || {
        let mut d = Decision::zeros(&l);
        d.t0 = t0;
        d.tf = tf;
        d.p = p.clone();
        for i in 0..l.n {
            for (k, v) in xm.iter().enumerate() {
                d.x[(k, i)] = *v;
            }
            for (j, v) in um.iter().enumerate() {
                d.u[(j, i)] = *v;
            }
        }
        d
    };
    let mut out = Vec::new();

    let (x0, xf) = implied_endpoints(def, t0, tf, &p);
    let mut d = base();
    for (i, t) in ge.grid.tau.iter().enumerate() {
        let s = 0.5 * (t + 1.0);
        for k in 0..l.nx {
            d.x[(k, i)] = x0[k] * (1.0 - s) + xf[k] * s;
        }
    }
    refresh_virtual(ge, &mut d);
    out.push(Candidate { label: "straight line".into(), z: d.pack() });

    let mut d = base();
    refresh_virtual(ge, &mut d);
    out.push(Candidate { label: "box midpoint".into(), z: d.pack() });

    let pr = primes(3 * l.nx + 1);
    let s = &def.search;
    for j in 0..JITTER_CANDIDATES {
        let mut d = base();
        for k in 0..l.nx {
            let span = s.x_hi[k] - s.x_lo[k];
            for m in 0..3 {
                let amp = (2.0 * halton(seed + j as u64 + 1, pr[1 + 3 * k + m]) - 1.0) * 0.25 * span;
                for (i, t) in ge.grid.tau.iter().enumerate() {
                    d.x[(k, i)] += amp * (1.0 - t * t) * legendre(m, *t);
                }
            }
            for i in 0..l.n {
                d.x[(k, i)] = d.x[(k, i)].clamp(s.x_lo[k], s.x_hi[k]);
            }
        }
        refresh_virtual(ge, &mut d);
        out.push(Candidate { label: format!("jittered midpoint {}", j + 1), z: d.pack() });
    }
    out
}

/// Feasibility residual over the primal unknowns `[X, U, V, t0, tf, p]`.
struct Elastic<'a> {
    ge: &'a GeneralizedEquation,
    nlp: NlpForm<'a>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    tq: Vec<f64>,
    interp: DMatrix<f64>,
}

impl<'a> Elastic<'a> {
    fn new(ge: &'a GeneralizedEquation) -> Elastic<'a> {
        let nlp = NlpForm { ge };
        let (lo, hi) = nlp.constraint_bounds();
        let m = 4 * (ge.layout.n - 1) + 1;
        let tq: Vec<f64> = (0..m).map(|q| -1.0 + 2.0 * q as f64 / (m - 1) as f64).collect();
        let interp = if ge.layout.nh > 0 { interpolation_matrix(&ge.grid, &tq) } else { DMatrix::zeros(0, 0) };
        Elastic { ge, nlp, lo, hi, tq, interp }
    }

    fn eval(&self, zp: &[f64], want_jac: bool) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let ge = self.ge;
        let l = ge.layout;
        let def = &ge.def;
        let np = zp.len();
        let head = (2 * l.nx + l.nu) * l.n;
        let c = self.nlp.constraints(zp);
        let cj = want_jac.then(|| self.nlp.constraint_jacobian(zp));
        let dense_rows = if l.nh > 0 { l.nh * self.tq.len() } else { 0 };
        let rows = c.len() + dense_rows + 2;
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(if want_jac { rows } else { 0 }, np);
        for (i, v) in c.iter().enumerate() {
            r[i] = v - v.clamp(self.lo[i], self.hi[i]);
            if let Some(cj) = &cj {
                if r[i] != 0.0 || self.lo[i] == self.hi[i] {
                    j.row_mut(i).copy_from(&cj.row(i));
                }
            }
        }
        let mut row = c.len();
        if l.nh > 0 {
            let x = DMatrix::from_row_slice(l.nx, l.n, &zp[..l.nx * l.n]);
            let u = DMatrix::from_row_slice(l.nu, l.n, &zp[l.nx * l.n..(l.nx + l.nu) * l.n]);
            let (t0, tf) = (zp[head], zp[head + 1]);
            let p = &zp[head + 2..];
            let xq = &x * self.interp.transpose();
            let uq = &u * self.interp.transpose();
            for (q, tau) in self.tq.iter().enumerate() {
                let (al, be) = (0.5 * (1.0 - tau), 0.5 * (1.0 + tau));
                let xv: Vec<f64> = xq.column(q).iter().cloned().collect();
                let uv: Vec<f64> = uq.column(q).iter().cloned().collect();
                let arg = def.running_arg(&xv, &uv, t0 * al + tf * be, p);
                let out = def.running.eval(&arg);
                let jr = want_jac.then(|| jacobian_of(def.running.as_ref(), &arg));
                for h in 0..l.nh {
                    let rr = row + h * self.tq.len() + q;
                    let v = out[1 + l.nx + h];
                    r[rr] = v - v.clamp(def.path_lo[h], def.path_hi[h]);
                    let Some(jr) = &jr else { continue };
                    if r[rr] == 0.0 {
                        continue;
                    }
                    let g = |c: usize| jr[(1 + l.nx + h, c)];
                    for i in 0..l.n {
                        let w = self.interp[(q, i)];
                        for k in 0..l.nx {
                            j[(rr, k * l.n + i)] += g(k) * w;
                        }
                        for m in 0..l.nu {
                            j[(rr, (l.nx + m) * l.n + i)] += g(l.nx + m) * w;
                        }
                    }
                    j[(rr, head)] += g(l.nx + l.nu) * al;
                    j[(rr, head + 1)] += g(l.nx + l.nu) * be;
                    for m in 0..l.np {
                        j[(rr, head + 2 + m)] += g(l.nx + l.nu + 1 + m);
                    }
                }
            }
            row += dense_rows;
        }
        let tb = def.time;
        for (k, (v, lo, hi)) in [(zp[head], tb.t0_lo, tb.t0_hi), (zp[head + 1], tb.tf_lo, tb.tf_hi)].into_iter().enumerate() {
            r[row + k] = v - v.clamp(lo, hi);
            if want_jac && r[row + k] != 0.0 {
                j[(row + k, head + k)] = 1.0;
            }
        }
        r.iter().all(|v| v.is_finite()).then_some((r, j))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticOutcome {
    pub z: Vec<f64>,
    pub feasible: bool,
    pub iterations: usize,
    /// Largest remaining slack.
    pub violation: f64,
}

/// Restores primal feasibility by minimizing the squared slacks of the
/// relaxed event, path and time constraints (path rows are enforced on a
/// dense uniform grid as well as on the nodes) subject to the dynamics, by
/// Levenberg–Marquardt over the primal unknowns. Multipliers are untouched.
/// Feasible when every slack is at most `delta`.
pub fn elastic_solve(ge: &GeneralizedEquation, z0: &[f64], delta: f64) -> ElasticOutcome {
    let el = Elastic::new(ge);
    let nlp = NlpForm { ge };
    let mut zp = nlp.project(z0);
    let finish = |zp: &[f64], it: usize, v: f64| {
        let mut z = z0.to_vec();
        let full = nlp.embed(zp);
        let head = (2 * ge.layout.nx + ge.layout.nu) * ge.layout.n;
        z[..head].copy_from_slice(&full[..head]);
        z[ge.layout.t0()] = full[ge.layout.t0()];
        z[ge.layout.tf()] = full[ge.layout.tf()];
        for k in 0..ge.layout.np {
            z[ge.layout.p(k)] = full[ge.layout.p(k)];
        }
        ElasticOutcome { z, feasible: v <= delta, iterations: it, violation: v }
    };
    let Some((mut r, _)) = el.eval(&zp, false) else {
        return finish(&zp, 0, f64::INFINITY);
    };
    let mut rho = 1e-3;
    for it in 0..200 {
        let viol = inf_norm(&r);
        if viol < 1e-8 {
            return finish(&zp, it, viol);
        }
        let Some((_, j)) = el.eval(&zp, true) else {
            return finish(&zp, it, viol);
        };
        let jf = to_faer(&j);
        let a = jf.transpose() * &jf;
        let g = -j.tr_mul(&r);
        let f0 = merit(&r);
        let mut accepted = None;
        for _ in 0..30 {
            let mut m = a.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += rho * (a[(i, i)] + 1e-6);
            }
            if let Some(d) = lu_solve(&m, &g) {
                let zn = axpy(&zp, 1.0, &d);
                if let Some((rn, _)) = el.eval(&zn, false) {
                    if merit(&rn) < f0 {
                        accepted = Some((zn, rn));
                        break;
                    }
                }
            }
            rho *= 4.0;
        }
        match accepted {
            Some((zn, rn)) => {
                zp = zn;
                r = rn;
                rho = (rho / 3.0).max(1e-9);
            }
            None => return finish(&zp, it, viol),
        }
    }
    let v = inf_norm(&r);
    finish(&zp, 200, v)
}

/// Largest path-bound violation of the interpolated trajectory on `points` uniform instants.
pub fn dense_path_violation(ge: &GeneralizedEquation, z: &[f64], points: usize) -> f64 {
    let l = ge.layout;
    if l.nh == 0 || points < 2 {
        return 0.0;
    }
    let def = &ge.def;
    let d = Decision::unpack(&l, z);
    let tq: Vec<f64> = (0..points).map(|q| -1.0 + 2.0 * q as f64 / (points - 1) as f64).collect();
    let p = interpolation_matrix(&ge.grid, &tq).transpose();
    let xq = &d.x * &p;
    let uq = &d.u * &p;
    let mut worst: f64 = 0.0;
    for (q, tau) in tq.iter().enumerate() {
        let x: Vec<f64> = xq.column(q).iter().cloned().collect();
        let u: Vec<f64> = uq.column(q).iter().cloned().collect();
        let t = d.t0 * 0.5 * (1.0 - tau) + d.tf * 0.5 * (1.0 + tau);
        let out = def.running.eval(&def.running_arg(&x, &u, t, &d.p));
        for h in 0..l.nh {
            let v = bound_violation(out[1 + l.nx + h], def.path_lo[h], def.path_hi[h]);
            worst = worst.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    worst
}

/// Decades from `from` down to `to`, excluding `from` itself.
fn sigma_ladder(from: f64, to: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = from;
    while s * 0.1 > to * (1.0 + 1e-9) {
        s *= 0.1;
        out.push(s);
    }
    out.push(to);
    out
}

/// Next stage tolerance: `max(delta_final, δ θ)` where `θ` is the observed
/// residual ratio when it lies in `(0, 1)` and 0.1 otherwise.
pub fn next_delta(delta: f64, delta_final: f64, ratio: Option<f64>) -> f64 {
    let theta = ratio.filter(|r| *r > 0.0 && *r < 1.0).unwrap_or(0.1);
    (delta * theta).max(delta_final)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStep {
    pub n: usize,
    pub delta: f64,
    pub sigma: f64,
}

/// Next mesh, tolerance and smoothing level; `None` once the mesh would exceed `n_max`.
pub fn mesh_sequence(config: &SolverConfig, mesh_index: usize, n: usize, delta: f64, ratio: Option<f64>) -> Option<MeshStep> {
    let next = n * config.mesh_growth;
    (next <= config.n_max).then(|| MeshStep {
        n: next,
        delta: next_delta(delta, config.delta_final, ratio),
        sigma: config.sigma_at(mesh_index + 1),
    })
}

/// Bookkeeping shared by the stages.
struct Run<'a> {
    config: &'a SolverConfig,
    diag: SolveDiagnostics,
}

struct InnerResult {
    state: IterationState,
    residual: f64,
    converged: bool,
}

impl Run<'_> {
    /// Damped Newton on one system until `‖r‖∞ ≤ tol`. Inside the capture zone
    /// full Newton steps are taken; divergence there backtracks and resumes damping.
    fn newton(&mut self, ge: &GeneralizedEquation, mut state: IterationState, tol: f64, delta: f64, capture: Option<f64>) -> Result<InnerResult, SolverError> {
        let mut rho = 1e-3;
        let mut capture = capture;
        let mut iters = 0;
        let r = ge.residual(&state.z)?;
        state.merit = merit(&r);
        state.merit_trace.clear();
        state.merit_trace.push(state.merit);
        let mut res = inf_norm(&r);
        while res > tol && iters < self.config.max_inner_iters {
            iters += 1;
            let undamped = capture.is_some_and(|c| res <= c);
            let step = if undamped { full_newton_step(ge, &state.z) } else { damped_newton_step(ge, &state.z, rho) };
            let step = match step {
                Ok(s) => s,
                Err(SolverError::SingularSystem { .. }) if undamped => {
                    capture = None;
                    continue;
                }
                Err(SolverError::SingularSystem { rho }) => {
                    log::debug!("{} N={} singular at rho {rho:e}", state.stage, state.n);
                    return Ok(InnerResult { residual: res, converged: false, state });
                }
                Err(e) => return Err(e),
            };
            rho = if undamped { rho } else { step.rho };
            state.accept(step.z, step.merit);
            state.steps += 1;
            if !step.merit.is_finite() || divergence_detected(&state.merit_trace) {
                log::debug!("{} N={} divergence, backtracking", state.stage, state.n);
                let stage = state.stage;
                state = backtrack_restart(&state);
                state.stage = stage;
                capture = None;
            }
            res = (2.0 * state.merit).sqrt();
            res = ge.residual(&state.z).map(|r| inf_norm(&r)).unwrap_or(res);
            let rec = IterationRecord {
                stage: state.stage.to_string(),
                n: state.n,
                merit: state.merit,
                delta,
                sigma: ge.sigma,
                step_norm: step.step_norm,
            };
            log::trace!("{rec:?}");
            self.diag.log.push(rec);
        }
        Ok(InnerResult { converged: res <= tol, residual: res, state })
    }

    /// Runs Newton along a smoothing ladder; stops at the first level that fails.
    fn homotopy(&mut self, ge: &GeneralizedEquation, state: IterationState, ladder: &[f64], tol: f64, delta: f64) -> Result<(InnerResult, f64), SolverError> {
        let mut state = state;
        let mut sigma = ge.sigma;
        let mut last = None;
        for &s in ladder {
            sigma = s;
            let g = ge.with_sigma(s);
            let out = self.newton(&g, state, tol, delta, None)?;
            let ok = out.converged;
            state = out.state.clone();
            last = Some(out);
            if !ok {
                break;
            }
        }
        let out = last.expect("ladder is never empty");
        Ok((out, sigma))
    }

    fn summary(&mut self, stage: Stage, n: usize, delta: f64, sigma: f64, out: &InnerResult, iterations: usize) {
        log::info!("{stage} N={n} sigma={sigma:e} residual={:.3e} converged={}", out.residual, out.converged);
        self.diag.stages.push(StageSummary {
            stage: stage.to_string(),
            n,
            delta,
            sigma,
            residual: out.residual,
            iterations,
            converged: out.converged,
        });
    }

    /// Tries one starting point: elastic phase, then the warm-up homotopy on the first mesh.
    fn attempt(&mut self, ge: &GeneralizedEquation, z: &[f64], ladder: &[f64]) -> Result<Option<(IterationState, f64, f64)>, SolverError> {
        let cfg = self.config;
        let el = elastic_solve(ge, z, cfg.delta0);
        let dense = dense_path_violation(ge, &el.z, 8 * (ge.layout.n - 1) + 1);
        log::debug!("elastic: feasible={} violation={:.3e} iterations={} dense={dense:.3e}", el.feasible, el.violation, el.iterations);
        if !(el.feasible && dense < DENSE_ACCEPT) {
            return Ok(None);
        }
        let n = ge.layout.n - 1;
        let mut state = IterationState::new(el.z, Stage::Stabilize, n, f64::INFINITY, cfg.backtrack_depth);
        for retry in 0..2 {
            let before = self.diag.log.len();
            let (out, sigma) = self.homotopy(ge, state, ladder, cfg.delta0, cfg.delta0)?;
            let iters = self.diag.log.len() - before;
            log::debug!("homotopy: converged={} residual={:.3e} sigma={sigma:e}", out.converged, out.residual);
            if out.converged {
                self.summary(Stage::Stabilize, n, cfg.delta0, sigma, &out, iters);
                return Ok(Some((out.state, sigma, out.residual)));
            }
            if retry == 1 {
                break;
            }
            let back = backtrack_restart(&out.state);
            let el = elastic_solve(ge, &back.z, cfg.delta0);
            if !el.feasible {
                break;
            }
            state = IterationState::new(el.z, Stage::Stabilize, n, f64::INFINITY, cfg.backtrack_depth);
            state.restarts = back.restarts;
        }
        Ok(None)
    }
}

fn bundle(ge: &GeneralizedEquation, z: &[f64], status: SolveStatus, diagnostics: SolveDiagnostics) -> SolutionBundle {
    let d = Decision::unpack(&ge.layout, z);
    SolutionBundle {
        tau: ge.grid.tau.clone(),
        time: (0..ge.layout.n).map(|i| ge.node_time(d.t0, d.tf, i)).collect(),
        states: d.x,
        controls: d.u,
        parameters: d.p,
        costates: d.lam,
        path_covectors: d.mu,
        event_covectors: d.nu,
        hamiltonian: ge.hamiltonian_trace(z),
        cost: ge.cost(z),
        status,
        diagnostics,
    }
}

/// Solves `def` without any user-supplied trajectory.
///
/// An unconverged run still returns a bundle: `FeasibleOnly` when the last
/// iterate is primal feasible, `Infeasible` otherwise.
pub fn solve(def: &OcpDefinition, config: &SolverConfig) -> Result<SolutionBundle, SolverError> {
    let cfg = config.validated()?;
    let errors: Vec<String> =
        doctor_check(def).into_iter().filter(|d| d.severity == Severity::Error).map(|d| d.message).collect();
    if !errors.is_empty() {
        return Err(SolverError::Doctor(errors.join("; ")));
    }
    let mut run = Run { config: &cfg, diag: SolveDiagnostics { tolerance: cfg.delta_final, ..SolveDiagnostics::default() } };

    // Stabilize.
    let n0 = cfg.n0;
    let grid = lgl_grid(n0)?;
    let mut ge = build_generalized_equation(def, &grid, SIGMA_WARMUP);
    let mut ladder = vec![SIGMA_WARMUP];
    if cfg.sigma_at(0) < SIGMA_WARMUP {
        ladder.extend(sigma_ladder(SIGMA_WARMUP, cfg.sigma_at(0)));
    }
    let candidates = guess_free_candidates(&ge, cfg.seed);
    let mut start = None;
    'candidates: for c in &candidates {
        if let Some(s) = run.attempt(&ge, &c.z, &ladder)? {
            start = Some((c.label.clone(), s));
            break;
        }
        log::debug!("candidate '{}' failed; perturbing it", c.label);
        let per = 2 * ge.layout.nx;
        let mut attempt = 0;
        while let Some(z) = moore_smith_perturb(&ge, &c.z, attempt, cfg.moore_smith_max) {
            if let Some(s) = run.attempt(&ge, &z, &ladder)? {
                let sign = if attempt % 2 == 0 { "+" } else { "-" };
                let label = format!("{} perturbed (round {}, state {}, {sign})", c.label, attempt / per, (attempt % per) / 2);
                start = Some((label, s));
                break 'candidates;
            }
            attempt += 1;
        }
    }
    let Some((label, (mut state, mut sigma, mut last_res))) = start else {
        // Exhausted: report the least infeasible elastic point.
        let mut best: Option<(f64, Vec<f64>)> = None;
        for c in &candidates {
            let el = elastic_solve(&ge, &c.z, cfg.delta0);
            let v = el.violation.max(dense_path_violation(&ge, &el.z, 8 * n0 + 1));
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, el.z));
            }
        }
        let (_, z) = best.expect("at least one candidate");
        ge = ge.with_sigma(cfg.sigma_at(0));
        run.diag.start = "none (stabilization exhausted)".into();
        run.diag.messages.push("no starting point reached feasibility; returning the least infeasible point".into());
        run.diag.residual_norm = ge.residual(&z).map(|r| inf_norm(&r)).unwrap_or(f64::INFINITY);
        run.diag.primal_infeasibility = ge.primal_infeasibility(&z);
        return Ok(bundle(&ge, &z, SolveStatus::Infeasible, run.diag));
    };
    run.diag.start = label;
    ge = ge.with_sigma(sigma);

    // Accelerate.
    let mut delta = cfg.delta0;
    let mut prev_res: Option<f64> = None;
    let mut n = n0;
    let mut mesh = 0;
    while let Some(step) = mesh_sequence(&cfg, mesh, n, delta, prev_res.map(|p| last_res / p)) {
        let grid = lgl_grid(step.n)?;
        let d = Decision::unpack(&ge.layout, &state.z).interpolate(&ge.grid, &grid);
        let ge_next = build_generalized_equation(def, &grid, sigma);
        let mut st = IterationState::new(d.pack(), Stage::Accelerate, step.n, f64::INFINITY, cfg.backtrack_depth);
        st.steps = state.steps;
        let ladder = if step.sigma < sigma { sigma_ladder(sigma, step.sigma) } else { vec![sigma] };
        let before = run.diag.log.len();
        let (out, s) = run.homotopy(&ge_next, st, &ladder, step.delta, step.delta)?;
        let iters = run.diag.log.len() - before;
        run.summary(Stage::Accelerate, step.n, step.delta, s, &out, iters);
        if !out.converged {
            run.diag.messages.push(format!("mesh N={} did not reach {:.1e}; refining on N={}", step.n, step.delta, n));
            break;
        }
        prev_res = Some(last_res);
        last_res = out.residual.max(f64::MIN_POSITIVE);
        state = out.state;
        sigma = s;
        ge = ge_next.with_sigma(s);
        delta = step.delta;
        n = step.n;
        mesh += 1;
    }

    // Refine.
    let sigma_min = *cfg.sigma_schedule.last().expect("validated");
    let ladder = if sigma_min < sigma { sigma_ladder(sigma, sigma_min) } else { vec![sigma] };
    state.stage = Stage::Refine;
    let tol = cfg.delta_final;
    let before = run.diag.log.len();
    let mut out = None;
    for (k, &s) in ladder.iter().enumerate() {
        // Intermediate levels hand their iterate down even when they stall.
        let last = k + 1 == ladder.len();
        // Aim below the tolerance: in the capture zone extra steps are nearly free.
        let r = run.newton(&ge.with_sigma(s), state.clone(), POLISH * tol, tol, last.then_some(10.0 * tol))?;
        state = r.state.clone();
        sigma = s;
        out = Some(r);
    }
    let mut out = out.expect("refine ran");
    out.converged = out.residual <= tol;
    ge = ge.with_sigma(sigma);
    let iters = run.diag.log.len() - before;
    run.summary(Stage::Refine, n, tol, sigma, &out, iters);

    let z = out.state.z.clone();
    let r = ge.residual(&z)?;
    let res = inf_norm(&r);
    let hmc = ge.hmc_norm(&r);
    let infeas = ge.primal_infeasibility(&z);
    run.diag.residual_norm = res;
    run.diag.primal_infeasibility = infeas;
    let status = if res <= tol && hmc <= tol {
        SolveStatus::Converged
    } else if infeas <= FEASIBILITY_TOL.max(tol) {
        run.diag.messages.push(format!("tolerance {tol:.1e} not met (residual {res:.3e})"));
        SolveStatus::FeasibleOnly
    } else {
        run.diag.messages.push(format!("primal infeasibility {infeas:.3e} remains"));
        SolveStatus::Infeasible
    };
    Ok(bundle(&ge, &z, status, run.diag))
}
