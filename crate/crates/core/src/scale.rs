//! Variable scaling to the unit search box and equation balancing.
//!
//! Variables are mapped affinely, `x̃ = g x + s`, so the search box becomes
//! `[-1, 1]`. Equations are multiplied by positive row gains chosen at the
//! first guess-free candidate. A scaled problem is an ordinary
//! [`OcpDefinition`] whose functions wrap the originals, so derivatives stay
//! analytic when the originals are.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::ocp_model::{OcpDefinition, SearchBox, SolutionBundle, TimeBounds, VectorFunction};
use crate::ps_basis::lgl_grid;
use crate::solver::guess_free_candidates;
use crate::transcription::{build_generalized_equation, Decision};

/// Thresholds outside which costate or Hamiltonian magnitudes suggest poor balancing.
pub const IMBALANCE_BAND: (f64, f64) = (1e-9, 1e9);

/// Componentwise `ṽ = gain v + shift`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineMap {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl AffineMap {
    pub fn identity(n: usize) -> AffineMap {
        AffineMap { gain: vec![1.0; n], shift: vec![0.0; n] }
    }

    /// Maps `[lo, hi]` onto `[-1, 1]`; unbounded or empty intervals map by identity.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> AffineMap {
        let mut m = AffineMap::identity(lo.len());
        for k in 0..lo.len() {
            let span = hi[k] - lo[k];
            if span.is_finite() && span > 0.0 {
                m.gain[k] = 2.0 / span;
                m.shift[k] = -(hi[k] + lo[k]) / span;
            }
        }
        m
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(k, x)| self.gain[k] * x + self.shift[k]).collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(k, x)| (x - self.shift[k]) / self.gain[k]).collect()
    }

    fn apply_bound(&self, k: usize, v: f64) -> f64 {
        self.gain[k] * v + self.shift[k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingMap {
    pub x: AffineMap,
    pub u: AffineMap,
    /// One-component map for time.
    pub t: AffineMap,
    pub p: AffineMap,
    pub cost_gain: f64,
    pub dynamics_gain: Vec<f64>,
    pub event_gain: Vec<f64>,
    pub path_gain: Vec<f64>,
}

impl ScalingMap {
    pub fn identity(def: &OcpDefinition) -> ScalingMap {
        ScalingMap {
            x: AffineMap::identity(def.n_x),
            u: AffineMap::identity(def.n_u),
            t: AffineMap::identity(1),
            p: AffineMap::identity(def.n_p),
            cost_gain: 1.0,
            dynamics_gain: vec![1.0; def.n_x],
            event_gain: vec![1.0; def.n_e],
            path_gain: vec![1.0; def.n_h],
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: &[f64]| v.iter().all(|g| g.is_finite() && *g > 0.0);
        [&self.x.gain, &self.u.gain, &self.t.gain, &self.p.gain, &self.dynamics_gain, &self.event_gain, &self.path_gain]
            .iter()
            .all(|g| ok(g))
            && ok(&[self.cost_gain])
    }
}

/// Wraps a vector function: inputs unscaled by `(w̃ - shift) / gain`, outputs multiplied by `out_gain`.
struct Scaled {
    inner: Arc<dyn VectorFunction>,
    gain: Vec<f64>,
    shift: Vec<f64>,
    out_gain: Vec<f64>,
}

impl Scaled {
    fn original(&self, w: &[f64]) -> Vec<f64> {
        w.iter().enumerate().map(|(k, v)| (v - self.shift[k]) / self.gain[k]).collect()
    }
}

impl VectorFunction for Scaled {
    fn dim_in(&self) -> usize {
        self.inner.dim_in()
    }

    fn dim_out(&self) -> usize {
        self.inner.dim_out()
    }

    fn eval(&self, w: &[f64]) -> Vec<f64> {
        let mut out = self.inner.eval(&self.original(w));
        for (v, g) in out.iter_mut().zip(&self.out_gain) {
            *v *= g;
        }
        out
    }

    fn jacobian(&self, w: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = self.inner.jacobian(&self.original(w))?;
        for r in 0..j.nrows() {
            for c in 0..j.ncols() {
                j[(r, c)] *= self.out_gain[r] / self.gain[c];
            }
        }
        Some(j)
    }

    fn weighted_hessian(&self, w: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let yy: Vec<f64> = y.iter().zip(&self.out_gain).map(|(a, b)| a * b).collect();
        let mut h = self.inner.weighted_hessian(&self.original(w), &yy)?;
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                h[(r, c)] /= self.gain[r] * self.gain[c];
            }
        }
        Some(h)
    }

    fn segments(&self, w: &[f64]) -> Vec<(&'static str, usize)> {
        self.inner.segments(&self.original(w))
    }

    fn has_analytic_derivatives(&self) -> bool {
        self.inner.has_analytic_derivatives()
    }
}

/// The problem in scaled variables and equations.
pub fn apply_scaling(def: &OcpDefinition, map: &ScalingMap) -> OcpDefinition {
    let (gt, st) = (map.t.gain[0], map.t.shift[0]);
    let mut run_gain = map.x.gain.clone();
    run_gain.extend_from_slice(&map.u.gain);
    run_gain.push(gt);
    run_gain.extend_from_slice(&map.p.gain);
    let mut run_shift = map.x.shift.clone();
    run_shift.extend_from_slice(&map.u.shift);
    run_shift.push(st);
    run_shift.extend_from_slice(&map.p.shift);
    let mut run_out = vec![map.cost_gain / gt];
    run_out.extend(map.x.gain.iter().map(|g| g / gt));
    run_out.extend_from_slice(&map.path_gain);

    let mut end_gain = map.x.gain.clone();
    end_gain.extend_from_slice(&map.x.gain);
    end_gain.extend([gt, gt]);
    end_gain.extend_from_slice(&map.p.gain);
    let mut end_shift = map.x.shift.clone();
    end_shift.extend_from_slice(&map.x.shift);
    end_shift.extend([st, st]);
    end_shift.extend_from_slice(&map.p.shift);
    let mut end_out = vec![map.cost_gain];
    end_out.extend_from_slice(&map.event_gain);

    let scale_bounds = |v: &[f64], g: &[f64]| v.iter().zip(g).map(|(a, b)| a * b).collect::<Vec<_>>();
    let map_box = |m: &AffineMap, v: &[f64]| (0..v.len()).map(|k| m.apply_bound(k, v[k])).collect::<Vec<_>>();
    let tb = def.time;
    OcpDefinition {
        name: def.name.clone(),
        running: Arc::new(Scaled { inner: def.running.clone(), gain: run_gain, shift: run_shift, out_gain: run_out }),
        endpoint: Arc::new(Scaled { inner: def.endpoint.clone(), gain: end_gain, shift: end_shift, out_gain: end_out }),
        event_lo: scale_bounds(&def.event_lo, &map.event_gain),
        event_hi: scale_bounds(&def.event_hi, &map.event_gain),
        path_lo: scale_bounds(&def.path_lo, &map.path_gain),
        path_hi: scale_bounds(&def.path_hi, &map.path_gain),
        time: TimeBounds {
            t0_lo: gt * tb.t0_lo + st,
            t0_hi: gt * tb.t0_hi + st,
            tf_lo: gt * tb.tf_lo + st,
            tf_hi: gt * tb.tf_hi + st,
        },
        search: SearchBox {
            x_lo: map_box(&map.x, &def.search.x_lo),
            x_hi: map_box(&map.x, &def.search.x_hi),
            u_lo: map_box(&map.u, &def.search.u_lo),
            u_hi: map_box(&map.u, &def.search.u_hi),
            p_lo: map_box(&map.p, &def.search.p_lo),
            p_hi: map_box(&map.p, &def.search.p_hi),
        },
        dynamics_row_gain: def.dynamics_row_gain.iter().zip(&map.dynamics_gain).map(|(a, b)| a * b).collect(),
        ..def.clone()
    }
}

/// Reference magnitudes up to this size are left alone by the row balancing.
pub const BALANCE_ONSET: f64 = 1e2;

/// Row gain `1/|v|` for a reference magnitude beyond [`BALANCE_ONSET`], else 1.
///
/// Moderate magnitudes do not hurt conditioning, while rescaling them changes
/// the multiplier scale that the smoothing homotopy is tuned against.
pub fn balance(v: f64) -> f64 {
    if v.is_finite() && v.abs() > BALANCE_ONSET {
        1.0 / v.abs()
    } else {
        1.0
    }
}

/// Maps the search box to the unit box, then balances cost, dynamics, event
/// and path rows at the first guess-free candidate with gains from [`balance`].
pub fn auto_scale(def: &OcpDefinition) -> (OcpDefinition, ScalingMap) {
    let mut map = ScalingMap::identity(def);
    map.x = AffineMap::from_box(&def.search.x_lo, &def.search.x_hi);
    map.u = AffineMap::from_box(&def.search.u_lo, &def.search.u_hi);
    map.p = AffineMap::from_box(&def.search.p_lo, &def.search.p_hi);
    map.t = AffineMap::from_box(&[def.time.t0_lo], &[def.time.tf_hi]);
    let unbalanced = apply_scaling(def, &map);

    let grid = lgl_grid(16).expect("16 nodes is a valid grid");
    let ge = build_generalized_equation(&unbalanced, &grid, 1e-2);
    let z = guess_free_candidates(&ge, 0).swap_remove(0);
    let d = Decision::unpack(&ge.layout, &z.z);
    let a = 0.5 * (d.tf - d.t0);
    let (nx, nh) = (def.n_x, def.n_h);
    let mut fmax = vec![0.0_f64; nx];
    let mut hmax = vec![0.0_f64; nh];
    for i in 0..ge.layout.n {
        let x: Vec<f64> = d.x.column(i).iter().cloned().collect();
        let u: Vec<f64> = d.u.column(i).iter().cloned().collect();
        let out = unbalanced.running.eval(&unbalanced.running_arg(&x, &u, ge.node_time(d.t0, d.tf, i), &d.p));
        for k in 0..nx {
            fmax[k] = fmax[k].max((a * out[1 + k]).abs());
        }
        for l in 0..nh {
            hmax[l] = hmax[l].max(out[1 + nx + l].abs());
        }
    }
    let xf = d.x.column(ge.layout.n - 1).iter().cloned().collect::<Vec<_>>();
    let x0 = d.x.column(0).iter().cloned().collect::<Vec<_>>();
    let end = unbalanced.endpoint.eval(&unbalanced.endpoint_arg(&x0, &xf, d.t0, d.tf, &d.p));
    map.cost_gain = balance(ge.cost(&z.z));
    map.dynamics_gain = fmax.into_iter().map(balance).collect();
    map.path_gain = hmax.into_iter().map(balance).collect();
    map.event_gain = end[1..].iter().map(|v| balance(*v)).collect();
    (apply_scaling(def, &map), map)
}

fn map_rows(m: &DMatrix<f64>, f: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| f(r, m[(r, c)]))
}

/// Brings a bundle solved under `map` back to original units. Costates,
/// covectors and the Hamiltonian follow the multiplier chain rule:
/// `λ = λ̃ g_x / g_J`, `μ = μ̃ g_h g_t / g_J`, `ν = ν̃ g_e / g_J`, `H = H̃ g_t / g_J`.
pub fn unscale_solution(b: &SolutionBundle, map: &ScalingMap) -> SolutionBundle {
    let (gt, st, gj) = (map.t.gain[0], map.t.shift[0], map.cost_gain);
    SolutionBundle {
        time: b.time.iter().map(|t| (t - st) / gt).collect(),
        states: map_rows(&b.states, |k, v| (v - map.x.shift[k]) / map.x.gain[k]),
        controls: map_rows(&b.controls, |j, v| (v - map.u.shift[j]) / map.u.gain[j]),
        parameters: map.p.invert(&b.parameters),
        costates: map_rows(&b.costates, |k, v| v * map.x.gain[k] / gj),
        path_covectors: map_rows(&b.path_covectors, |l, v| v * map.path_gain[l] * gt / gj),
        event_covectors: b.event_covectors.iter().zip(&map.event_gain).map(|(v, g)| v * g / gj).collect(),
        hamiltonian: b.hamiltonian.iter().map(|h| h * gt / gj).collect(),
        cost: b.cost / gj,
        ..b.clone()
    }
}

/// Inverse of [`unscale_solution`].
pub fn scale_solution(b: &SolutionBundle, map: &ScalingMap) -> SolutionBundle {
    let (gt, st, gj) = (map.t.gain[0], map.t.shift[0], map.cost_gain);
    SolutionBundle {
        time: b.time.iter().map(|t| gt * t + st).collect(),
        states: map_rows(&b.states, |k, v| map.x.gain[k] * v + map.x.shift[k]),
        controls: map_rows(&b.controls, |j, v| map.u.gain[j] * v + map.u.shift[j]),
        parameters: map.p.apply(&b.parameters),
        costates: map_rows(&b.costates, |k, v| v * gj / map.x.gain[k]),
        path_covectors: map_rows(&b.path_covectors, |l, v| v * gj / (map.path_gain[l] * gt)),
        event_covectors: b.event_covectors.iter().zip(&map.event_gain).map(|(v, g)| v * gj / g).collect(),
        hamiltonian: b.hamiltonian.iter().map(|h| h * gj / gt).collect(),
        cost: b.cost * gj,
        ..b.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalanceWarning {
    /// `"costate[k]"` or `"hamiltonian"`.
    pub channel: String,
    pub magnitude: f64,
}

impl std::fmt::Display for ImbalanceWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} magnitude {:.3e} is outside [{:.0e}, {:.0e}]; the equations are probably poorly balanced",
            self.channel, self.magnitude, IMBALANCE_BAND.0, IMBALANCE_BAND.1
        )
    }
}

/// Flags a bundle whose largest costate or Hamiltonian magnitude lies outside [`IMBALANCE_BAND`].
pub fn imbalance_report(b: &SolutionBundle) -> Vec<ImbalanceWarning> {
    let (lo, hi) = IMBALANCE_BAND;
    let outside = |v: f64| !(lo..=hi).contains(&v);
    let mut out = Vec::new();
    if b.costates.nrows() > 0 {
        let (mut k_max, mut lam_max) = (0, 0.0_f64);
        for k in 0..b.costates.nrows() {
            let m = b.costates.row(k).amax();
            if m > lam_max || m.is_nan() {
                k_max = k;
                lam_max = m;
            }
        }
        if outside(lam_max) {
            out.push(ImbalanceWarning { channel: format!("costate[{k_max}]"), magnitude: lam_max });
        }
    }
    let h_max = b.hamiltonian.iter().fold(0.0_f64, |m, h| m.max(h.abs()));
    if !b.hamiltonian.is_empty() && outside(h_max) {
        out.push(ImbalanceWarning { channel: "hamiltonian".into(), magnitude: h_max });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::catalog;
    use crate::ocp_model::{fd_jacobian, fd_weighted_hessian, SolveDiagnostics, SolveStatus};
    use crate::solver::{solve, SolverConfig};

    fn bundle(lam: f64, h: f64) -> SolutionBundle {
        SolutionBundle {
            tau: vec![-1.0, 1.0],
            time: vec![0.0, 1.0],
            states: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            controls: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            parameters: vec![],
            costates: DMatrix::from_element(1, 2, lam),
            path_covectors: DMatrix::zeros(0, 2),
            event_covectors: vec![1.0, -1.0],
            hamiltonian: vec![h, h],
            cost: 0.5,
            status: SolveStatus::Converged,
            diagnostics: SolveDiagnostics::default(),
        }
    }

    #[test]
    fn box_maps() {
        let m = AffineMap::from_box(&[0.0], &[10.0]);
        assert_eq!((m.gain[0], m.shift[0]), (0.2, -1.0));
        assert_eq!(m.apply(&[0.0, 10.0][..1]), vec![-1.0]);
        assert_eq!(m.apply(&[10.0]), vec![1.0]);
        let unit = AffineMap::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
        assert_eq!(unit, AffineMap::identity(2));
        let v = [3.7];
        assert!((m.invert(&m.apply(&v))[0] - v[0]).abs() < 1e-15);
    }

    #[test]
    fn dynamics_row_gain_follows_magnitude() {
        assert_eq!(balance(1e4), 1e-4);
        assert_eq!(balance(0.3), 1.0);
        assert_eq!(balance(-2e3), 5e-4);
        assert_eq!(balance(f64::NAN), 1.0);
    }

    #[test]
    fn scaled_functions_keep_consistent_derivatives() {
        let def = catalog("robot").unwrap();
        let (sd, map) = auto_scale(&def);
        assert!(map.is_valid());
        let w = [0.1, -0.3, 0.2, 0.4, -0.5, -0.2];
        let ja = sd.running.jacobian(&w).unwrap();
        assert!((ja - fd_jacobian(sd.running.as_ref(), &w)).abs().max() < 1e-7);
        let y = [1.0, 0.3, -0.2, 0.5, 0.7, -0.1, 0.2, 0.4];
        let ha = sd.running.weighted_hessian(&w, &y).unwrap();
        assert!((ha - fd_weighted_hessian(sd.running.as_ref(), &w, &y)).abs().max() < 1e-5);
        assert!(sd.search.x_lo.iter().chain(&sd.search.u_lo).all(|v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_identity() {
        let b = bundle(-1.0, -0.5);
        let def = catalog("lq").unwrap();
        assert_eq!(unscale_solution(&b, &ScalingMap::identity(&def)), b);
        let (_, map) = auto_scale(&def);
        let back = unscale_solution(&scale_solution(&b, &map), &map);
        assert!((back.costates[(0, 0)] + 1.0).abs() < 1e-12 && (back.time[1] - 1.0).abs() < 1e-12);
        assert!((back.hamiltonian[0] + 0.5).abs() < 1e-12 && (back.cost - 0.5).abs() < 1e-12);
    }

    #[test]
    fn imbalance_band() {
        assert_eq!(imbalance_report(&bundle(1e10, -1.0)).len(), 1);
        assert_eq!(imbalance_report(&bundle(1e10, -1.0))[0].channel, "costate[0]");
        assert!(imbalance_report(&bundle(1.0, -0.5)).is_empty());
        assert!(imbalance_report(&bundle(0.7, -1.0)).is_empty());
        assert_eq!(imbalance_report(&bundle(1.0, 1e-12))[0].channel, "hamiltonian");
    }

    #[test]
    fn lq_state_gain_two_recovers_costate() {
        let def = catalog("lq").unwrap();
        let mut map = ScalingMap::identity(&def);
        map.x.gain = vec![2.0];
        let cfg = SolverConfig { n_max: 16, ..SolverConfig::default() };
        let b = unscale_solution(&solve(&apply_scaling(&def, &map), &cfg).unwrap(), &map);
        assert!(b.costates.iter().all(|l| (l + 1.0).abs() < 1e-6), "{}", b.costates);
        assert!((b.cost - 0.5).abs() < 1e-8);
    }

    #[test]
    fn auto_scaled_lq_matches_unscaled() {
        let def = catalog("lq").unwrap();
        let cfg = SolverConfig { n_max: 16, ..SolverConfig::default() };
        let plain = solve(&def, &cfg).unwrap();
        let (sd, map) = auto_scale(&def);
        let scaled = unscale_solution(&solve(&sd, &cfg).unwrap(), &map);
        assert_eq!(scaled.status, SolveStatus::Converged);
        for i in 0..plain.tau.len() {
            assert!((plain.controls[(0, i)] - scaled.controls[(0, i)]).abs() < 1e-7);
            assert!((plain.costates[(0, i)] - scaled.costates[(0, i)]).abs() < 1e-7);
            assert!((plain.time[i] - scaled.time[i]).abs() < 1e-12);
        }
        assert!((plain.cost - scaled.cost).abs() <= 1e-8 * plain.cost.abs());
    }
}
