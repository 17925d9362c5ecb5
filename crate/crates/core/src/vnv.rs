//! Independent verification of a solution: re-propagation of the controls
//! through an adaptive integrator and a battery of necessary-condition checks.
//!
//! Nothing here touches the solver. Propagation needs only the problem
//! definition, the control samples and the initial state.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::hamvet::{endpoint_lagrangian, lagrangian_of_hamiltonian};
use crate::ocp_model::{jacobian_of, OcpDefinition, OcpError, SolutionBundle};
use crate::ps_basis::{barycentric_interpolate, lagrange_diff_matrix, lgl_grid, BasisError, Grid};

/// Accuracy below which a double-precision root cannot be trusted.
pub const ERROR_FLOOR: f64 = 1e-8;
/// Control accuracy that is already beyond practical need.
pub const CONTROL_ADVISORY: f64 = 1e-6;

pub const RTOL: f64 = 1e-8;
pub const ATOL: f64 = 1e-10;
const MAX_STEPS: usize = 1_000_000;

/// Distance to a bound that counts as "at the bound".
pub const BANG_TOL: f64 = 1e-3;
/// Band on the divided differences of costates expected to be flat.
pub const FLAT_BAND: f64 = 1e-3;
/// Multiplier size that counts as zero.
pub const MU_ZERO: f64 = 1e-6;
const ACTIVE_TOL: f64 = 1e-5;
/// Relative band on the Hamiltonian average.
pub const HAMILTONIAN_BAND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VnvError {
    #[error("integrator step underflow at t = {t} (step {step:e})")]
    IntegratorFailure { t: f64, step: f64 },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorFloor {
    pub requested: f64,
    pub effective: f64,
    pub explanation: String,
}

pub fn error_floor(requested: f64) -> ErrorFloor {
    let effective = if requested.is_nan() { ERROR_FLOOR } else { requested.max(ERROR_FLOOR) };
    let mut explanation = String::from(
        "a root of a perfectly conditioned system in double precision is accurate to about sqrt(eps) ~ 1e-8",
    );
    if effective > requested || requested.is_nan() {
        let _ = write!(explanation, "; requested {requested:e} raised to {effective:e}");
    }
    let _ = write!(explanation, "; control errors near {CONTROL_ADVISORY:e} are already very accurate in practice");
    ErrorFloor { requested, effective, explanation }
}

// ---------------------------------------------------------------------------
// Adaptive Runge-Kutta 4(5), Dormand-Prince coefficients.

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t1` with error control.
pub fn rk45<F>(mut rhs: F, t0: f64, t1: f64, y0: &[f64], stats: &mut IntegratorStats) -> Result<Vec<f64>, VnvError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, VnvError>,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut h = span.abs().min(0.1 * span.abs().max(1e-3));
    let hmin = 1e-14 * t0.abs().max(t1.abs()).max(1.0);
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    for _ in 0..MAX_STEPS {
        let remaining = (t1 - t) * dir;
        if remaining <= hmin {
            return Ok(y);
        }
        h = h.min(remaining);
        k[0] = rhs(t, &y)?;
        for s in 1..7 {
            for i in 0..n {
                ytmp[i] = y[i] + dir * h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            k[s] = rhs(t + dir * C[s] * h, &ytmp)?;
        }
        let mut err = 0.0f64;
        let mut ynew = vec![0.0; n];
        for i in 0..n {
            ynew[i] = y[i] + dir * h * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>();
            let e = dir * h * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
            let sc = ATOL + RTOL * y[i].abs().max(ynew[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            err = 1e10;
        }
        if err <= 1.0 {
            t += dir * h;
            y = ynew;
            stats.accepted += 1;
        } else {
            stats.rejected += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h < hmin && (t1 - t) * dir > hmin {
            return Err(VnvError::IntegratorFailure { t, step: h });
        }
    }
    Err(VnvError::IntegratorFailure { t, step: h })
}

// ---------------------------------------------------------------------------
// Control reconstruction.

/// A path row that is exactly one control, i.e. a simple control bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlBound {
    pub row: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Finds path rows whose gradient is the unit vector of a control at a few nodes.
pub fn control_bounds(def: &OcpDefinition, b: &SolutionBundle) -> Vec<Option<ControlBound>> {
    let (nx, nu) = (def.n_x, def.n_u);
    let n = b.tau.len();
    let probes: Vec<usize> = if n > 2 { vec![0, n / 2, n - 1] } else { (0..n).collect() };
    let jacs: Vec<DMatrix<f64>> = probes
        .iter()
        .map(|&i| jacobian_of(def.running.as_ref(), &def.running_arg(&b.state_at(i), &b.control_at(i), b.time[i], &b.parameters)))
        .collect();
    (0..nu)
        .map(|j| {
            (0..def.n_h).find_map(|l| {
                let unit = jacs.iter().all(|jac| {
                    let row = jac.row(1 + nx + l);
                    row.iter().enumerate().all(|(c, &v)| if c == nx + j { (v - 1.0).abs() <= 1e-8 } else { v.abs() <= 1e-8 })
                });
                unit.then(|| ControlBound { row: l, lo: def.path_lo[l], hi: def.path_hi[l] })
            })
        })
        .collect()
}

struct Reconstruction {
    grid: Grid,
    /// Per control: nodal samples.
    samples: Vec<Vec<f64>>,
    /// `(τ_s, half width, left node, right node)` per detected switch.
    windows: Vec<Vec<(f64, f64, usize, usize)>>,
}

impl Reconstruction {
    fn new(def: &OcpDefinition, b: &SolutionBundle) -> Result<Reconstruction, VnvError> {
        let n = b.degree();
        let grid = lgl_grid(n)?;
        if grid.tau.iter().zip(&b.tau).any(|(a, c)| (a - c).abs() > 1e-12) {
            return Err(VnvError::Shape("bundle nodes are not Legendre-Gauss-Lobatto nodes".into()));
        }
        let bounds = control_bounds(def, b);
        let dmin = grid.tau.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let mut samples = Vec::new();
        let mut windows = Vec::new();
        for j in 0..def.n_u {
            let u: Vec<f64> = b.controls.row(j).iter().cloned().collect();
            let (lo, hi) = match bounds[j] {
                Some(cb) if cb.lo.is_finite() && cb.hi.is_finite() => (cb.lo, cb.hi),
                _ => (def.search.u_lo[j], def.search.u_hi[j]),
            };
            let mid = 0.5 * (lo + hi);
            let mut w = Vec::new();
            for i in 0..n {
                let (a, c) = (u[i] - mid, u[i + 1] - mid);
                if a * c < 0.0 {
                    let s = grid.tau[i] + (grid.tau[i + 1] - grid.tau[i]) * a / (a - c);
                    w.push((s, 0.5 * dmin, i, i + 1));
                }
            }
            samples.push(u);
            windows.push(w);
        }
        Ok(Reconstruction { grid, samples, windows })
    }

    fn control(&self, tau: f64) -> Vec<f64> {
        (0..self.samples.len())
            .map(|j| {
                let u = &self.samples[j];
                for &(s, hw, il, ir) in &self.windows[j] {
                    if (tau - s).abs() <= hw {
                        return if tau < s { u[il] } else { u[ir] };
                    }
                }
                barycentric_interpolate(&self.grid, u, tau)
            })
            .collect()
    }

    /// Points where the reconstruction is not smooth; the integrator restarts there.
    fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.grid.tau.clone();
        for w in self.windows.iter().flatten() {
            v.extend([w.0 - w.1, w.0, w.0 + w.1]);
        }
        v.retain(|s| (-1.0..=1.0).contains(s));
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        v
    }

    fn switch_taus(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| w.iter().map(|s| s.0).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Propagation {
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    /// Nearest point to the propagated terminal state that satisfies the events.
    pub target: Vec<f64>,
    /// Propagated terminal state minus its target.
    pub terminal_truth_errors: Vec<f64>,
    /// Optimized terminal state minus its own target.
    pub optimization_errors: Vec<f64>,
    /// Propagated minus optimized terminal state.
    pub drift: Vec<f64>,
    /// Propagated states at the bundle's node times, `n_x × (N+1)`.
    #[serde(skip)]
    pub node_states: DMatrix<f64>,
    /// Detected switch times per control.
    pub switch_times: Vec<Vec<f64>>,
    pub stats: IntegratorStats,
}

/// Closest state to `xf` that satisfies the event bounds, with `x0`, times and
/// parameters held fixed. Minimum-norm Gauss-Newton on the violated part.
fn terminal_target(def: &OcpDefinition, x0: &[f64], xf: &[f64], t0: f64, tf: f64, p: &[f64]) -> Vec<f64> {
    let nx = def.n_x;
    let mut y = xf.to_vec();
    for _ in 0..50 {
        let q = def.endpoint_arg(x0, &y, t0, tf, p);
        let out = def.endpoint.eval(&q);
        let r: Vec<f64> = (0..def.n_e)
            .map(|k| {
                let e = out[1 + k];
                e - e.clamp(def.event_lo[k], def.event_hi[k])
            })
            .collect();
        if r.iter().all(|v| v.abs() < 1e-15) {
            break;
        }
        let jac = jacobian_of(def.endpoint.as_ref(), &q);
        let jx = DMatrix::from_fn(def.n_e, nx, |k, c| jac[(1 + k, nx + c)]);
        let Ok(step) = jx.svd(true, true).solve(&DVector::from_vec(r), 1e-12) else { break };
        for c in 0..nx {
            y[c] -= step[c];
        }
        if step.amax() < 1e-15 * (1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
    }
    y
}

/// Integrates the dynamics from the bundle's initial state under the
/// reconstructed control and compares the terminal state with the events.
pub fn propagate_feasibility(def: &OcpDefinition, b: &SolutionBundle) -> Result<Propagation, VnvError> {
    let (nx, n) = (def.n_x, b.tau.len());
    if b.states.nrows() != nx || b.controls.nrows() != def.n_u || n < 3 || b.time.len() != n {
        return Err(VnvError::Shape("bundle does not match the problem dimensions".into()));
    }
    let rec = Reconstruction::new(def, b)?;
    let (t0, tf) = (b.t0(), b.tf());
    if !(tf > t0) {
        return Err(VnvError::Shape(format!("empty horizon [{t0}, {tf}]")));
    }
    let half = 0.5 * (tf - t0);
    let p = b.parameters.clone();
    // Integrate in τ so breakpoints line up with the grid exactly.
    let rhs = |tau: f64, x: &[f64]| -> Result<Vec<f64>, VnvError> {
        let u = rec.control(tau);
        let t = t0 + half * (tau + 1.0);
        let w = def.running_arg(x, &u, t, &p);
        let out = def.running.eval(&w);
        let f: Vec<f64> = out[1..=nx].iter().map(|v| half * v).collect();
        if f.iter().any(|v| !v.is_finite()) {
            return Err(OcpError::NonFiniteEvaluation { function: "dynamics".into(), args: w }.into());
        }
        Ok(f)
    };
    let initial = b.state_at(0);
    let mut x = initial.clone();
    let mut stats = IntegratorStats::default();
    let mut node_states = DMatrix::zeros(nx, n);
    node_states.set_column(0, &DVector::from_vec(x.clone()));
    let bps = rec.breakpoints();
    let mut next_node = 1;
    for w in bps.windows(2) {
        x = rk45(rhs, w[0], w[1], &x, &mut stats)?;
        while next_node < n && (rec.grid.tau[next_node] - w[1]).abs() < 1e-15 {
            node_states.set_column(next_node, &DVector::from_vec(x.clone()));
            next_node += 1;
        }
    }
    let xf_opt = b.state_at(n - 1);
    let target = terminal_target(def, &initial, &x, t0, tf, &p);
    let target_opt = terminal_target(def, &initial, &xf_opt, t0, tf, &p);
    Ok(Propagation {
        terminal_truth_errors: x.iter().zip(&target).map(|(a, c)| a - c).collect(),
        optimization_errors: xf_opt.iter().zip(&target_opt).map(|(a, c)| a - c).collect(),
        drift: x.iter().zip(&xf_opt).map(|(a, c)| a - c).collect(),
        switch_times: rec.switch_taus().iter().map(|v| v.iter().map(|s| t0 + half * (s + 1.0)).collect()).collect(),
        initial,
        terminal: x,
        target,
        node_states,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Necessary-condition battery.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianCheck {
    pub values: Vec<f64>,
    /// Quadrature average over the horizon.
    pub mean: f64,
    /// Largest deviation from the mean at a node.
    pub dev: f64,
    pub autonomous: bool,
    /// `-∂Ē/∂tf` when the final time is free.
    pub target: Option<f64>,
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingCheck {
    pub control: usize,
    pub bound: Option<ControlBound>,
    /// Fraction of nodes within [`BANG_TOL`] of a bound.
    pub bang_fraction: Option<f64>,
    /// Nodes whose control position contradicts the sign of `∂H/∂u`.
    pub inconsistent_nodes: Vec<usize>,
    /// Largest `|∂H/∂u|` at nodes where the control is strictly inside its bounds.
    pub interior_gradient: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostateSegment {
    pub costate: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Largest `|dλ/dτ| / max(1, |λ|)` inside the segment, from `-a ∂H̄/∂x`.
    pub slope: f64,
    /// The same measure from the spectral derivative of the nodal samples.
    /// Informational: it picks up the ringing left by a jump.
    pub nodal_slope: f64,
    pub flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpCheck {
    pub path_row: usize,
    pub time: f64,
    pub costate: usize,
    pub observed: f64,
    pub predicted: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplementarityRow {
    pub path_row: usize,
    pub touched: bool,
    pub max_abs_mu: f64,
    /// Nodes where the multiplier sign or size contradicts the constraint state.
    pub violations: Vec<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Battery {
    pub hamiltonian: HamiltonianCheck,
    pub switching: Vec<SwitchingCheck>,
    /// Costates whose adjoint equation has no state-dependent term away from contacts.
    pub flat_costates: Vec<usize>,
    pub spike_times: Vec<f64>,
    pub segments: Vec<CostateSegment>,
    pub jump_times: Vec<f64>,
    pub jumps: Vec<JumpCheck>,
    /// Every node with a costate derivative outside the band lies within one
    /// grid spacing of a spike.
    pub jumps_colocated: bool,
    pub complementarity: Vec<ComplementarityRow>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs the pointwise checks on a solved bundle.
pub fn optimality_battery(def: &OcpDefinition, b: &SolutionBundle) -> Result<Battery, VnvError> {
    let (nx, nu, nh) = (def.n_x, def.n_u, def.n_h);
    let n = b.tau.len();
    let grid = lgl_grid(b.degree())?;
    let (t0, tf) = (b.t0(), b.tf());
    let half = 0.5 * (tf - t0);
    let p = &b.parameters;
    let zero_mu = vec![0.0; nh];

    let mut evals = Vec::with_capacity(n);
    let mut jacs = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let (x, u, lam) = (b.state_at(i), b.control_at(i), b.costate_at(i));
        evals.push(lagrangian_of_hamiltonian(def, &zero_mu, &lam, &x, &u, b.time[i], p)?);
        let w = def.running_arg(&x, &u, b.time[i], p);
        outs.push(def.running.eval(&w));
        jacs.push(jacobian_of(def.running.as_ref(), &w));
    }

    // Hamiltonian.
    let values: Vec<f64> = evals.iter().map(|e| e.h).collect();
    let mean = grid.quadrature(&values) / 2.0;
    let dev = values.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    let autonomous = jacs.iter().all(|j| (0..j.nrows()).all(|r| j[(r, nx + nu)] == 0.0));
    let target = (def.time.tf_hi > def.time.tf_lo)
        .then(|| {
            endpoint_lagrangian(def, &b.event_covectors, &b.state_at(0), &b.state_at(n - 1), t0, tf, p)
                .map(|e| e.hamiltonian_tf())
        })
        .transpose()?;
    let passed = match target {
        Some(c) => Some((mean - c).abs() <= HAMILTONIAN_BAND * c.abs().max(1.0)),
        None if autonomous => Some(dev <= HAMILTONIAN_BAND * mean.abs().max(1.0)),
        None => None,
    };
    let hamiltonian = HamiltonianCheck { values, mean, dev, autonomous, target, passed };

    // Switching law: ∂H/∂u > 0 pushes a minimizing control to its lower bound.
    let bounds = control_bounds(def, b);
    let grad_scale = evals.iter().flat_map(|e| e.dh_du.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let band = 1e-6 * grad_scale;
    let switching = (0..nu)
        .map(|j| {
            let u: Vec<f64> = b.controls.row(j).iter().cloned().collect();
            let s: Vec<f64> = evals.iter().map(|e| e.dh_du[j]).collect();
            let mut bad = Vec::new();
            let mut interior = 0.0f64;
            let mut at_bound = 0;
            for i in 0..n {
                let (lo_hit, hi_hit) = match bounds[j] {
                    Some(cb) => ((u[i] - cb.lo).abs() <= BANG_TOL, (u[i] - cb.hi).abs() <= BANG_TOL),
                    None => (false, false),
                };
                if lo_hit || hi_hit {
                    at_bound += 1;
                }
                let ok = if hi_hit {
                    s[i] <= band
                } else if lo_hit {
                    s[i] >= -band
                } else {
                    interior = interior.max(s[i].abs());
                    // A control between its bounds is either singular or in transit
                    // across a switch; the latter sits next to a sign change of u - mid.
                    let transit = bounds[j].is_some_and(|cb| {
                        let mid = 0.5 * (cb.lo + cb.hi);
                        let side = |k: usize| (u[k] - mid).signum();
                        (i > 0 && side(i - 1) != side(i)) || (i + 1 < n && side(i + 1) != side(i))
                    });
                    transit || s[i].abs() <= band
                };
                if !ok {
                    bad.push(i);
                }
            }
            SwitchingCheck {
                control: j,
                bound: bounds[j],
                bang_fraction: bounds[j].map(|_| at_bound as f64 / n as f64),
                passed: bad.is_empty(),
                inconsistent_nodes: bad,
                interior_gradient: interior,
            }
        })
        .collect();

    // Path multiplier spikes, on rows that are not simple control bounds.
    let sigma = b.diagnostics.stages.last().map(|s| s.sigma).filter(|s| *s > 0.0).unwrap_or(MU_ZERO);
    let control_rows: Vec<usize> = bounds.iter().flatten().map(|cb| cb.row).collect();
    let state_rows: Vec<usize> = (0..nh).filter(|l| !control_rows.contains(l)).collect();
    let mut spike = vec![false; n];
    let mut clusters: Vec<(usize, usize, usize)> = Vec::new();
    for &l in &state_rows {
        let mu: Vec<f64> = b.path_covectors.row(l).iter().cloned().collect();
        let thr = 10.0 * median(&mut mu.iter().map(|v| v.abs()).collect::<Vec<_>>()) + sigma;
        let mut i = 0;
        while i < n {
            if mu[i].abs() > thr {
                let a = i;
                while i + 1 < n && mu[i + 1].abs() > thr {
                    i += 1;
                }
                clusters.push((l, a, i));
                spike[a..=i].iter_mut().for_each(|s| *s = true);
            }
            i += 1;
        }
    }
    let node_time = |i: usize| b.time[i];
    let mut spike_times: Vec<f64> = clusters
        .iter()
        .map(|&(l, a, c)| {
            let peak = (a..=c).max_by(|&x, &y| b.path_covectors[(l, x)].abs().total_cmp(&b.path_covectors[(l, y)].abs())).unwrap();
            node_time(peak)
        })
        .collect();
    spike_times.sort_by(f64::total_cmp);

    // Costates that should be piecewise constant: ∂H/∂x_k vanishes everywhere.
    let hx_scale = evals.iter().flat_map(|e| e.dh_dx.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let flat_costates: Vec<usize> =
        (0..nx).filter(|&k| evals.iter().all(|e| e.dh_dx[k].abs() <= 1e-9 * hx_scale)).collect();
    // In the Birkhoff form the costate derivative is its own unknown, equal to
    // -a ∂H̄/∂x at every node; nodal samples of λ ring around a jump, so the
    // band is applied to the derivative samples and the spectral slope of the
    // samples is reported alongside.
    let dmat = lagrange_diff_matrix(&grid);
    let mut segments = Vec::new();
    let mut jump_nodes: Vec<usize> = Vec::new();
    for &k in &flat_costates {
        let lam = DVector::from_iterator(n, b.costates.row(k).iter().cloned());
        let spectral = &dmat * &lam;
        let rel = |i: usize, v: f64| v.abs() / lam[i].abs().max(1.0);
        let mut slope = Vec::with_capacity(n);
        for i in 0..n {
            let e = lagrangian_of_hamiltonian(def, &b.path_covector_at(i), &b.costate_at(i), &b.state_at(i), &b.control_at(i), b.time[i], p)?;
            slope.push(rel(i, half * e.dh_dx[k]));
        }
        let mut start: Option<usize> = None;
        let (mut worst, mut ringing) = (0.0f64, 0.0f64);
        for i in 0..n {
            if slope[i] > FLAT_BAND && !jump_nodes.contains(&i) {
                jump_nodes.push(i);
            }
            if !spike[i] {
                start.get_or_insert(i);
                worst = worst.max(slope[i]);
                ringing = ringing.max(rel(i, spectral[i]));
            }
            if (spike[i] || i == n - 1) && start.is_some() {
                let a = start.take().unwrap();
                let end = if spike[i] { i - 1 } else { i };
                segments.push(CostateSegment {
                    costate: k,
                    t_start: node_time(a),
                    t_end: node_time(end),
                    slope: worst,
                    nodal_slope: ringing,
                    flat: worst <= FLAT_BAND,
                });
                worst = 0.0;
                ringing = 0.0;
            }
        }
    }
    jump_nodes.sort_unstable();
    let jump_times: Vec<f64> = jump_nodes.iter().map(|&i| node_time(i)).collect();
    let jumps_colocated = jump_nodes.iter().all(|&i| (i.saturating_sub(1)..=(i + 1).min(n - 1)).any(|c| spike[c]));

    // Jump directions: Δλ = -∫ μ ∂h/∂x dt across each spike cluster.
    let mut jumps = Vec::new();
    for &(l, a, c) in &clusters {
        if a == 0 || c + 1 >= n {
            continue;
        }
        let (before, after) = (a - 1, c + 1);
        let peak_t = {
            let peak = (a..=c).max_by(|&x, &y| b.path_covectors[(l, x)].abs().total_cmp(&b.path_covectors[(l, y)].abs())).unwrap();
            node_time(peak)
        };
        let predicted: Vec<f64> = flat_costates
            .iter()
            .map(|&k| -(before..=after).map(|i| grid.weights[i] * half * b.path_covectors[(l, i)] * jacs[i][(1 + nx + l, k)]).sum::<f64>())
            .collect();
        let scale = predicted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (q, &k) in flat_costates.iter().enumerate() {
            if predicted[q].abs() <= 1e-3 * scale {
                continue;
            }
            let observed = b.costates[(k, after)] - b.costates[(k, before)];
            jumps.push(JumpCheck {
                path_row: l,
                time: peak_t,
                costate: k,
                observed,
                predicted: predicted[q],
                agrees: observed.signum() == predicted[q].signum(),
            });
        }
    }

    // Complementarity: μ ≤ 0 at a lower bound, μ ≥ 0 at an upper bound, 0 when inactive.
    let mut complementarity = Vec::new();
    for l in 0..nh {
        let (lo, hi) = (def.path_lo[l], def.path_hi[l]);
        let mu: Vec<f64> = b.path_covectors.row(l).iter().cloned().collect();
        let max_abs_mu = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol_mu = MU_ZERO * max_abs_mu.max(1.0);
        let mut touched = false;
        let mut violations = Vec::new();
        for i in 0..n {
            let hv = outs[i][1 + nx + l];
            let act_lo = lo.is_finite() && hv - lo <= ACTIVE_TOL * lo.abs().max(1.0);
            let act_hi = hi.is_finite() && hi - hv <= ACTIVE_TOL * hi.abs().max(1.0);
            touched |= act_lo || act_hi;
            let ok = match (act_lo, act_hi) {
                (true, true) => true,
                (true, false) => mu[i] <= tol_mu,
                (false, true) => mu[i] >= -tol_mu,
                (false, false) => {
                    let transit = control_rows.contains(&l);
                    mu[i].abs() <= tol_mu || transit && is_transit(&mu, i)
                }
            };
            if !ok {
                violations.push(i);
            }
        }
        let passed = violations.is_empty() && (touched || max_abs_mu <= MU_ZERO);
        complementarity.push(ComplementarityRow { path_row: l, touched, max_abs_mu, violations, passed });
    }

    Ok(Battery {
        hamiltonian,
        switching,
        flat_costates,
        spike_times,
        segments,
        jump_times,
        jumps,
        jumps_colocated,
        complementarity,
    })
}

/// A control-bound multiplier passing through zero between neighbours.
fn is_transit(mu: &[f64], i: usize) -> bool {
    let side = |k: usize| mu[k].signum();
    (i > 0 && side(i - 1) != side(i)) || (i + 1 < mu.len() && side(i + 1) != side(i))
}

impl Battery {
    pub fn switching_verdicts(&self) -> Vec<bool> {
        self.switching.iter().map(|s| s.passed).collect()
    }

    pub fn complementarity_verdict(&self) -> bool {
        self.complementarity.iter().all(|c| c.passed)
    }

    pub fn costates_flat(&self) -> bool {
        self.segments.iter().all(|s| s.flat)
    }

    pub fn jump_directions_agree(&self) -> bool {
        self.jumps.iter().all(|j| j.agrees)
    }

    /// Path rows that are never active, whose multipliers must vanish identically.
    pub fn untouched_rows(&self) -> Vec<usize> {
        self.complementarity.iter().filter(|c| !c.touched).map(|c| c.path_row).collect()
    }

    pub fn passed(&self) -> bool {
        self.hamiltonian.passed != Some(false)
            && self.switching.iter().all(|s| s.passed)
            && self.costates_flat()
            && self.jump_directions_agree()
            && self.jumps_colocated
            && self.complementarity_verdict()
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VnvReport {
    /// Fingerprint of the bundle this report verified.
    pub bundle_fingerprint: u64,
    pub terminal_truth_errors: Vec<f64>,
    pub optimization_errors: Vec<f64>,
    pub hamiltonian_mean: f64,
    pub hamiltonian_dev: f64,
    pub switching_verdicts: Vec<bool>,
    pub costate_flat_segments: Vec<CostateSegment>,
    pub jump_times: Vec<f64>,
    pub complementarity_verdict: bool,
    pub error_floor_note: ErrorFloor,
    pub propagation: Propagation,
    pub battery: Battery,
}

/// Propagation, battery and error-floor context for one bundle.
pub fn verify(def: &OcpDefinition, b: &SolutionBundle, requested_tol: f64) -> Result<VnvReport, VnvError> {
    let propagation = propagate_feasibility(def, b)?;
    let battery = optimality_battery(def, b)?;
    Ok(VnvReport {
        bundle_fingerprint: b.fingerprint(),
        terminal_truth_errors: propagation.terminal_truth_errors.clone(),
        optimization_errors: propagation.optimization_errors.clone(),
        hamiltonian_mean: battery.hamiltonian.mean,
        hamiltonian_dev: battery.hamiltonian.dev,
        switching_verdicts: battery.switching_verdicts(),
        costate_flat_segments: battery.segments.clone(),
        jump_times: battery.jump_times.clone(),
        complementarity_verdict: battery.complementarity_verdict(),
        error_floor_note: error_floor(requested_tol),
        propagation,
        battery,
    })
}

fn vec_str(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

impl VnvReport {
    pub fn passed(&self) -> bool {
        self.battery.passed()
    }

    /// Per-node traces: time, Hamiltonian, costates, path multipliers,
    /// switch flags and propagated states.
    pub fn traces_csv(&self, b: &SolutionBundle) -> String {
        let (nx, nh, nu) = (b.costates.nrows(), b.path_covectors.nrows(), self.propagation.switch_times.len());
        let mut s = String::from("t,H");
        (0..nx).for_each(|k| write!(s, ",lambda_{k}").unwrap());
        (0..nh).for_each(|l| write!(s, ",mu_{l}").unwrap());
        (0..nu).for_each(|j| write!(s, ",switch_{j}").unwrap());
        (0..nx).for_each(|k| write!(s, ",xprop_{k}").unwrap());
        s.push('\n');
        let n = b.tau.len();
        for i in 0..n {
            let ti = b.time[i];
            let (lo, hi) = (if i > 0 { b.time[i - 1] } else { ti }, if i + 1 < n { b.time[i + 1] } else { ti });
            write!(s, "{:.16e},{:.16e}", ti, self.battery.hamiltonian.values[i]).unwrap();
            (0..nx).for_each(|k| write!(s, ",{:.16e}", b.costates[(k, i)]).unwrap());
            (0..nh).for_each(|l| write!(s, ",{:.16e}", b.path_covectors[(l, i)]).unwrap());
            for j in 0..nu {
                let near = self.propagation.switch_times[j].iter().any(|&ts| ts > 0.5 * (lo + ti) && ts <= 0.5 * (ti + hi));
                write!(s, ",{}", u8::from(near)).unwrap();
            }
            (0..nx).for_each(|k| write!(s, ",{:.16e}", self.propagation.node_states[(k, i)]).unwrap());
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for VnvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.propagation;
        let bat = &self.battery;
        writeln!(f, "verification report for bundle {:016x}", self.bundle_fingerprint)?;
        writeln!(f)?;
        writeln!(f, "propagation ({} accepted steps, {} rejected)", p.stats.accepted, p.stats.rejected)?;
        writeln!(f, "  target terminal state      {}", vec_str(&p.target))?;
        writeln!(f, "  propagated terminal state  {}", vec_str(&p.terminal))?;
        writeln!(f, "  truth errors               {}", vec_str(&self.terminal_truth_errors))?;
        writeln!(f, "  optimization errors        {}", vec_str(&self.optimization_errors))?;
        writeln!(f, "  propagated - optimized     {}", vec_str(&p.drift))?;
        for (j, ts) in p.switch_times.iter().enumerate() {
            writeln!(f, "  control {j} switches at     {}", vec_str(ts))?;
        }
        writeln!(f)?;
        let h = &bat.hamiltonian;
        let hv = h.passed.map_or("n/a", verdict);
        write!(f, "hamiltonian: mean {:.6e}, max deviation {:.3e}", h.mean, h.dev)?;
        if let Some(c) = h.target {
            write!(f, ", expected {c:.6e}")?;
        }
        writeln!(f, " [{hv}]")?;
        for s in &bat.switching {
            write!(f, "switching, control {}: {} inconsistent nodes", s.control, s.inconsistent_nodes.len())?;
            if let Some(fr) = s.bang_fraction {
                write!(f, ", at a bound on {:.1}% of nodes", 100.0 * fr)?;
            } else {
                write!(f, ", max |dH/du| {:.3e}", s.interior_gradient)?;
            }
            writeln!(f, " [{}]", verdict(s.passed))?;
        }
        writeln!(f, "path multiplier spikes at t = {}", vec_str(&bat.spike_times))?;
        for s in &bat.segments {
            writeln!(
                f,
                "costate {} on [{:.6}, {:.6}]: max relative slope {:.3e} (nodal ringing {:.3e}) [{}]",
                s.costate,
                s.t_start,
                s.t_end,
                s.slope,
                s.nodal_slope,
                verdict(s.flat)
            )?;
        }
        writeln!(f, "costate jumps at t = {} [{}]", vec_str(&bat.jump_times), if bat.jumps_colocated { "at spikes" } else { "FAIL: away from spikes" })?;
        for j in &bat.jumps {
            writeln!(
                f,
                "jump of costate {} at t = {:.6} (path row {}): observed {:+.4e}, predicted {:+.4e} [{}]",
                j.costate,
                j.time,
                j.path_row,
                j.observed,
                j.predicted,
                verdict(j.agrees)
            )?;
        }
        for c in &bat.complementarity {
            writeln!(
                f,
                "complementarity, path row {}: {}, max |mu| {:.3e}, {} violations [{}]",
                c.path_row,
                if c.touched { "active somewhere" } else { "never active" },
                c.max_abs_mu,
                c.violations.len(),
                verdict(c.passed)
            )?;
        }
        writeln!(f)?;
        writeln!(f, "tolerance: requested {:e}, effective {:e}", self.error_floor_note.requested, self.error_floor_note.effective)?;
        writeln!(f, "  {}", self.error_floor_note.explanation)?;
        writeln!(f, "overall: {}", verdict(self.passed()))
    }
}
