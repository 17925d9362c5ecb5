//! Problem definition: the five problem functions, bounds, search box and doctor checks.
//!
//! Running functions take the argument vector `w = [x, u, t, p]` and return
//! `[F, f, h]`. Endpoint functions take `q = [x0, xf, t0, tf, p]` and return `[E, e]`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

pub type Constants = BTreeMap<String, f64>;

/// A vector-valued function of a flat argument with optional analytic derivatives.
pub trait VectorFunction: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, w: &[f64]) -> Vec<f64>;

    /// Analytic Jacobian (`dim_out × dim_in`), if available.
    fn jacobian(&self, _w: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic `Σ_k y_k ∇² out_k`, if available.
    fn weighted_hessian(&self, _w: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Named output segments and their actual lengths at `w`, used for shape checks.
    fn segments(&self, w: &[f64]) -> Vec<(&'static str, usize)> {
        vec![("output", self.eval(w).len())]
    }

    fn has_analytic_derivatives(&self) -> bool {
        false
    }
}

/// Finite-difference step used for first derivatives.
pub fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

/// Central-difference Jacobian.
pub fn fd_jacobian(f: &dyn VectorFunction, w: &[f64]) -> DMatrix<f64> {
    let m = f.dim_out();
    let mut jac = DMatrix::zeros(m, w.len());
    let mut wp = w.to_vec();
    for j in 0..w.len() {
        let h = fd_step(w[j]);
        wp[j] = w[j] + h;
        let fp = f.eval(&wp);
        wp[j] = w[j] - h;
        let fm = f.eval(&wp);
        wp[j] = w[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central-difference Hessian of `y · f(w)`.
pub fn fd_weighted_hessian(f: &dyn VectorFunction, w: &[f64], y: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    let mut hess = DMatrix::zeros(n, n);
    let phi = |v: &[f64]| -> f64 { f.eval(v).iter().zip(y).map(|(a, b)| a * b).sum() };
    let step = |v: f64| (1e-4 * v.abs()).max(1e-4);
    let mut wp = w.to_vec();
    for j in 0..n {
        let hj = step(w[j]);
        for k in 0..=j {
            let hk = step(w[k]);
            let mut corner = |sj: f64, sk: f64| {
                wp.copy_from_slice(w);
                wp[j] += sj * hj;
                wp[k] += sk * hk;
                phi(&wp)
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * hj * hk);
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    hess
}

/// Jacobian from the analytic path when available, else central differences.
pub fn jacobian_of(f: &dyn VectorFunction, w: &[f64]) -> DMatrix<f64> {
    f.jacobian(w).unwrap_or_else(|| fd_jacobian(f, w))
}

pub fn weighted_hessian_of(f: &dyn VectorFunction, w: &[f64], y: &[f64]) -> DMatrix<f64> {
    f.weighted_hessian(w, y).unwrap_or_else(|| fd_weighted_hessian(f, w, y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchBox {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    /// Parameter box; empty when there are no parameters.
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
}

impl SearchBox {
    pub fn x_mid(&self) -> Vec<f64> {
        mid(&self.x_lo, &self.x_hi)
    }
    pub fn u_mid(&self) -> Vec<f64> {
        mid(&self.u_lo, &self.u_hi)
    }
    pub fn p_mid(&self) -> Vec<f64> {
        mid(&self.p_lo, &self.p_hi)
    }
}

fn mid(lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeBounds {
    pub t0_lo: f64,
    pub t0_hi: f64,
    pub tf_lo: f64,
    pub tf_hi: f64,
}

impl TimeBounds {
    /// A finite representative pair (t0, tf) inside the bounds.
    pub fn representative(&self) -> (f64, f64) {
        let pick = |lo: f64, hi: f64, fallback: f64| match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => fallback,
        };
        let t0 = pick(self.t0_lo, self.t0_hi, 0.0);
        let tf = pick(self.tf_lo, self.tf_hi, t0 + 1.0);
        (t0, tf)
    }
}

/// A user-supplied trajectory. The solver is guess-free and never reads it;
/// reads are counted so tests can prove that.
#[derive(Debug)]
pub struct UserGuess {
    time: Vec<f64>,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    reads: AtomicUsize,
}

impl UserGuess {
    pub fn new(time: Vec<f64>, states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> UserGuess {
        UserGuess { time, states, controls, reads: AtomicUsize::new(0) }
    }

    #[allow(clippy::type_complexity)]
    pub fn trajectory(&self) -> (&[f64], &[Vec<f64>], &[Vec<f64>]) {
        self.reads.fetch_add(1, Ordering::SeqCst);
        (&self.time, &self.states, &self.controls)
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

#[derive(Clone)]
pub struct OcpDefinition {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_p: usize,
    pub n_e: usize,
    pub n_h: usize,
    /// `[x, u, t, p] -> [F, f, h]`
    pub running: Arc<dyn VectorFunction>,
    /// `[x0, xf, t0, tf, p] -> [E, e]`
    pub endpoint: Arc<dyn VectorFunction>,
    pub event_lo: Vec<f64>,
    pub event_hi: Vec<f64>,
    pub path_lo: Vec<f64>,
    pub path_hi: Vec<f64>,
    pub time: TimeBounds,
    pub search: SearchBox,
    pub constants: Constants,
    /// Residual weights on the dynamics rows (one per state); ones unless balanced by `scale`.
    pub dynamics_row_gain: Vec<f64>,
    /// Names of declared functional constraints; these are not supported.
    pub functional_constraints: Vec<String>,
    pub user_guess: Option<Arc<UserGuess>>,
}

impl fmt::Debug for OcpDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpDefinition")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_p", &self.n_p)
            .field("n_e", &self.n_e)
            .field("n_h", &self.n_h)
            .field("time", &self.time)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningValues {
    pub cost: f64,
    pub dynamics: Vec<f64>,
    pub path: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointValues {
    pub cost: f64,
    pub events: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OcpError {
    #[error("non-finite value from {function} at arguments {args:?}")]
    NonFiniteEvaluation { function: String, args: Vec<f64> },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl OcpDefinition {
    pub fn running_dim(&self) -> usize {
        self.n_x + self.n_u + 1 + self.n_p
    }

    pub fn endpoint_dim(&self) -> usize {
        2 * self.n_x + 2 + self.n_p
    }

    pub fn running_arg(&self, x: &[f64], u: &[f64], t: f64, p: &[f64]) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.running_dim());
        w.extend_from_slice(x);
        w.extend_from_slice(u);
        w.push(t);
        w.extend_from_slice(p);
        w
    }

    pub fn endpoint_arg(&self, x0: &[f64], xf: &[f64], t0: f64, tf: f64, p: &[f64]) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.endpoint_dim());
        q.extend_from_slice(x0);
        q.extend_from_slice(xf);
        q.push(t0);
        q.push(tf);
        q.extend_from_slice(p);
        q
    }

    pub fn with_guess(mut self, guess: UserGuess) -> Self {
        self.user_guess = Some(Arc::new(guess));
        self
    }
}

/// Evaluates `F`, `f` and `h` at one point.
pub fn eval_functions(def: &OcpDefinition, x: &[f64], u: &[f64], t: f64, p: &[f64]) -> Result<RunningValues, OcpError> {
    let w = def.running_arg(x, u, t, p);
    let out = def.running.eval(&w);
    if out.len() != 1 + def.n_x + def.n_h {
        return Err(OcpError::Shape(format!("running output has {} entries, expected {}", out.len(), 1 + def.n_x + def.n_h)));
    }
    for (i, v) in out.iter().enumerate() {
        if !v.is_finite() {
            let function = if i == 0 {
                "cost_running"
            } else if i <= def.n_x {
                "dynamics"
            } else {
                "path"
            };
            return Err(OcpError::NonFiniteEvaluation { function: function.into(), args: w });
        }
    }
    Ok(RunningValues { cost: out[0], dynamics: out[1..=def.n_x].to_vec(), path: out[1 + def.n_x..].to_vec() })
}

/// Evaluates `E` and `e` at one endpoint tuple.
pub fn eval_endpoint(
    def: &OcpDefinition,
    x0: &[f64],
    xf: &[f64],
    t0: f64,
    tf: f64,
    p: &[f64],
) -> Result<EndpointValues, OcpError> {
    let q = def.endpoint_arg(x0, xf, t0, tf, p);
    let out = def.endpoint.eval(&q);
    if out.len() != 1 + def.n_e {
        return Err(OcpError::Shape(format!("endpoint output has {} entries, expected {}", out.len(), 1 + def.n_e)));
    }
    for (i, v) in out.iter().enumerate() {
        if !v.is_finite() {
            let function = if i == 0 { "cost_endpoint" } else { "events" };
            return Err(OcpError::NonFiniteEvaluation { function: function.into(), args: q });
        }
    }
    Ok(EndpointValues { cost: out[0], events: out[1..].to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagnosticKind {
    DegenerateHorizon,
    ShapeMismatch,
    NonFinite,
    InvertedBounds,
    SearchBox,
    NotSupported,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}] {}", self.kind, self.message)
    }
}

fn diag(kind: DiagnosticKind, severity: Severity, message: impl Into<String>) -> Diagnostic {
    Diagnostic { kind, severity, message: message.into() }
}

/// Reports problems with the definition. Nothing is repaired.
pub fn doctor_check(def: &OcpDefinition) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    use Severity::*;
    let mut out = Vec::new();

    let tb = &def.time;
    if tb.t0_lo > tb.t0_hi || tb.tf_lo > tb.tf_hi {
        out.push(diag(InvertedBounds, Error, "time bounds are inverted"));
    }
    if tb.tf_hi <= tb.t0_lo {
        out.push(diag(DegenerateHorizon, Error, "horizon is empty: tf upper bound does not exceed t0 lower bound"));
    } else if tb.tf_lo - tb.t0_hi <= 0.0 {
        out.push(diag(DegenerateHorizon, Warning, "horizon may collapse: tf - t0 can be 0"));
    }

    let lens = [
        ("event lower bounds", def.event_lo.len(), def.n_e),
        ("event upper bounds", def.event_hi.len(), def.n_e),
        ("path lower bounds", def.path_lo.len(), def.n_h),
        ("path upper bounds", def.path_hi.len(), def.n_h),
        ("search box x_lo", def.search.x_lo.len(), def.n_x),
        ("search box x_hi", def.search.x_hi.len(), def.n_x),
        ("search box u_lo", def.search.u_lo.len(), def.n_u),
        ("search box u_hi", def.search.u_hi.len(), def.n_u),
        ("search box p_lo", def.search.p_lo.len(), def.n_p),
        ("search box p_hi", def.search.p_hi.len(), def.n_p),
        ("dynamics row gains", def.dynamics_row_gain.len(), def.n_x),
    ];
    let mut shapes_ok = true;
    for (what, got, want) in lens {
        if got != want {
            shapes_ok = false;
            out.push(diag(ShapeMismatch, Error, format!("{what}: {got} entries, expected {want}")));
        }
    }
    if def.running.dim_in() != def.running_dim() || def.endpoint.dim_in() != def.endpoint_dim() {
        shapes_ok = false;
        out.push(diag(ShapeMismatch, Error, "function argument dimensions do not match the declared sizes"));
    }
    if !shapes_ok {
        return out;
    }

    for (k, (lo, hi)) in def.event_lo.iter().zip(&def.event_hi).enumerate() {
        if lo > hi {
            out.push(diag(InvertedBounds, Error, format!("event {k}: lower bound {lo} exceeds upper bound {hi}")));
        }
    }
    for (k, (lo, hi)) in def.path_lo.iter().zip(&def.path_hi).enumerate() {
        if lo > hi {
            out.push(diag(InvertedBounds, Error, format!("path {k}: lower bound {lo} exceeds upper bound {hi}")));
        }
    }
    let sb = &def.search;
    for (name, lo, hi) in [("x", &sb.x_lo, &sb.x_hi), ("u", &sb.u_lo, &sb.u_hi), ("p", &sb.p_lo, &sb.p_hi)] {
        for (k, (a, b)) in lo.iter().zip(hi.iter()).enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                out.push(diag(SearchBox, Error, format!("search box {name}[{k}] must satisfy finite lo < hi (got {a}, {b})")));
            }
        }
    }
    for (k, g) in def.dynamics_row_gain.iter().enumerate() {
        if !(*g > 0.0 && g.is_finite()) {
            out.push(diag(ShapeMismatch, Error, format!("dynamics row gain {k} must be positive and finite")));
        }
    }
    if !def.functional_constraints.is_empty() {
        out.push(diag(
            NotSupported,
            Error,
            format!("functional constraints are not supported: {}", def.functional_constraints.join(", ")),
        ));
    }

    let (t0, tf) = def.time.representative();
    let (xm, um, pm) = (sb.x_mid(), sb.u_mid(), sb.p_mid());
    let w = def.running_arg(&xm, &um, 0.5 * (t0 + tf), &pm);
    let expected_run = [("cost_running", 1), ("dynamics", def.n_x), ("path", def.n_h)];
    check_segments(&mut out, def.running.segments(&w), &expected_run);
    let q = def.endpoint_arg(&xm, &xm, t0, tf, &pm);
    let expected_end = [("cost_endpoint", 1), ("events", def.n_e)];
    check_segments(&mut out, def.endpoint.segments(&q), &expected_end);
    if out.iter().any(|d| d.kind == ShapeMismatch) {
        return out;
    }
    if let Err(e) = eval_functions(def, &xm, &um, 0.5 * (t0 + tf), &pm) {
        out.push(diag(NonFinite, Error, format!("at the search-box midpoint: {e}")));
    }
    if let Err(e) = eval_endpoint(def, &xm, &xm, t0, tf, &pm) {
        out.push(diag(NonFinite, Error, format!("at the search-box midpoint: {e}")));
    }
    out
}

fn check_segments(out: &mut Vec<Diagnostic>, got: Vec<(&'static str, usize)>, expected: &[(&str, usize)]) {
    let total: usize = expected.iter().map(|e| e.1).sum();
    if got.len() == 1 && got[0].0 == "output" {
        if got[0].1 != total {
            out.push(diag(
                DiagnosticKind::ShapeMismatch,
                Severity::Error,
                format!("function returned {} entries, expected {total}", got[0].1),
            ));
        }
        return;
    }
    for (name, want) in expected {
        if let Some((_, have)) = got.iter().find(|(n, _)| n == name) {
            if have != want {
                out.push(diag(
                    DiagnosticKind::ShapeMismatch,
                    Severity::Error,
                    format!("{name} returned {have} entries, expected {want}"),
                ));
            }
        }
    }
}

/// True when the diagnostics contain an error (warnings do not block a solve).
pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

type RunVec = dyn Fn(&[f64], &[f64], f64, &[f64], &Constants) -> Vec<f64> + Send + Sync;
type RunScalar = dyn Fn(&[f64], &[f64], f64, &[f64], &Constants) -> f64 + Send + Sync;
type EndVec = dyn Fn(&[f64], &[f64], f64, f64, &[f64], &Constants) -> Vec<f64> + Send + Sync;
type EndScalar = dyn Fn(&[f64], &[f64], f64, f64, &[f64], &Constants) -> f64 + Send + Sync;

struct ClosureRunning {
    nx: usize,
    nu: usize,
    np: usize,
    nh: usize,
    constants: Constants,
    cost: Option<Box<RunScalar>>,
    dynamics: Box<RunVec>,
    path: Option<Box<RunVec>>,
}

impl ClosureRunning {
    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64], f64, &'a [f64]) {
        let (nx, nu) = (self.nx, self.nu);
        (&w[..nx], &w[nx..nx + nu], w[nx + nu], &w[nx + nu + 1..nx + nu + 1 + self.np])
    }
}

impl VectorFunction for ClosureRunning {
    fn dim_in(&self) -> usize {
        self.nx + self.nu + 1 + self.np
    }
    fn dim_out(&self) -> usize {
        1 + self.nx + self.nh
    }
    fn eval(&self, w: &[f64]) -> Vec<f64> {
        let (x, u, t, p) = self.split(w);
        let mut out = Vec::with_capacity(self.dim_out());
        out.push(self.cost.as_ref().map_or(0.0, |c| c(x, u, t, p, &self.constants)));
        out.extend((self.dynamics)(x, u, t, p, &self.constants));
        if let Some(h) = &self.path {
            out.extend(h(x, u, t, p, &self.constants));
        }
        out
    }
    fn segments(&self, w: &[f64]) -> Vec<(&'static str, usize)> {
        let (x, u, t, p) = self.split(w);
        let nf = (self.dynamics)(x, u, t, p, &self.constants).len();
        let nh = self.path.as_ref().map_or(0, |h| h(x, u, t, p, &self.constants).len());
        vec![("cost_running", 1), ("dynamics", nf), ("path", nh)]
    }
}

struct ClosureEndpoint {
    nx: usize,
    np: usize,
    ne: usize,
    constants: Constants,
    cost: Option<Box<EndScalar>>,
    events: Option<Box<EndVec>>,
}

impl ClosureEndpoint {
    fn split<'a>(&self, q: &'a [f64]) -> (&'a [f64], &'a [f64], f64, f64, &'a [f64]) {
        let nx = self.nx;
        (&q[..nx], &q[nx..2 * nx], q[2 * nx], q[2 * nx + 1], &q[2 * nx + 2..2 * nx + 2 + self.np])
    }
}

impl VectorFunction for ClosureEndpoint {
    fn dim_in(&self) -> usize {
        2 * self.nx + 2 + self.np
    }
    fn dim_out(&self) -> usize {
        1 + self.ne
    }
    fn eval(&self, q: &[f64]) -> Vec<f64> {
        let (x0, xf, t0, tf, p) = self.split(q);
        let mut out = Vec::with_capacity(self.dim_out());
        out.push(self.cost.as_ref().map_or(0.0, |c| c(x0, xf, t0, tf, p, &self.constants)));
        if let Some(e) = &self.events {
            out.extend(e(x0, xf, t0, tf, p, &self.constants));
        }
        out
    }
    fn segments(&self, q: &[f64]) -> Vec<(&'static str, usize)> {
        let (x0, xf, t0, tf, p) = self.split(q);
        let ne = self.events.as_ref().map_or(0, |e| e(x0, xf, t0, tf, p, &self.constants).len());
        vec![("cost_endpoint", 1), ("events", ne)]
    }
}

/// Builds an [`OcpDefinition`] from plain closures. Derivatives are taken by finite differences.
pub struct OcpBuilder {
    name: String,
    nx: usize,
    nu: usize,
    np: usize,
    constants: Constants,
    cost_endpoint: Option<Box<EndScalar>>,
    cost_running: Option<Box<RunScalar>>,
    dynamics: Option<Box<RunVec>>,
    events: Option<(Box<EndVec>, Vec<f64>, Vec<f64>)>,
    path: Option<(Box<RunVec>, Vec<f64>, Vec<f64>)>,
    time: Option<TimeBounds>,
    search: Option<SearchBox>,
    functional: Vec<String>,
}

impl OcpBuilder {
    pub fn new(name: &str, n_x: usize, n_u: usize) -> OcpBuilder {
        OcpBuilder {
            name: name.to_string(),
            nx: n_x,
            nu: n_u,
            np: 0,
            constants: Constants::new(),
            cost_endpoint: None,
            cost_running: None,
            dynamics: None,
            events: None,
            path: None,
            time: None,
            search: None,
            functional: Vec::new(),
        }
    }

    pub fn parameters(mut self, n_p: usize) -> Self {
        self.np = n_p;
        self
    }

    pub fn constant(mut self, name: &str, value: f64) -> Self {
        self.constants.insert(name.to_string(), value);
        self
    }

    pub fn cost_endpoint(mut self, f: impl Fn(&[f64], &[f64], f64, f64, &[f64], &Constants) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_endpoint = Some(Box::new(f));
        self
    }

    pub fn cost_running(mut self, f: impl Fn(&[f64], &[f64], f64, &[f64], &Constants) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_running = Some(Box::new(f));
        self
    }

    pub fn dynamics(mut self, f: impl Fn(&[f64], &[f64], f64, &[f64], &Constants) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.dynamics = Some(Box::new(f));
        self
    }

    pub fn events(
        mut self,
        f: impl Fn(&[f64], &[f64], f64, f64, &[f64], &Constants) -> Vec<f64> + Send + Sync + 'static,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Self {
        self.events = Some((Box::new(f), lo, hi));
        self
    }

    pub fn path(
        mut self,
        f: impl Fn(&[f64], &[f64], f64, &[f64], &Constants) -> Vec<f64> + Send + Sync + 'static,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Self {
        self.path = Some((Box::new(f), lo, hi));
        self
    }

    pub fn time_bounds(mut self, t0: (f64, f64), tf: (f64, f64)) -> Self {
        self.time = Some(TimeBounds { t0_lo: t0.0, t0_hi: t0.1, tf_lo: tf.0, tf_hi: tf.1 });
        self
    }

    pub fn search_box(mut self, x: (Vec<f64>, Vec<f64>), u: (Vec<f64>, Vec<f64>)) -> Self {
        self.search = Some(SearchBox { x_lo: x.0, x_hi: x.1, u_lo: u.0, u_hi: u.1, p_lo: vec![], p_hi: vec![] });
        self
    }

    pub fn param_box(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        if let Some(sb) = self.search.as_mut() {
            sb.p_lo = lo;
            sb.p_hi = hi;
        }
        self
    }

    pub fn functional_constraint(mut self, name: &str) -> Self {
        self.functional.push(name.to_string());
        self
    }

    pub fn build(self) -> Result<OcpDefinition, OcpError> {
        let dynamics = self.dynamics.ok_or_else(|| OcpError::Shape("dynamics function is required".into()))?;
        let time = self.time.ok_or_else(|| OcpError::Shape("time bounds are required".into()))?;
        let search = self.search.ok_or_else(|| OcpError::Shape("search box is required".into()))?;
        let (path_fn, path_lo, path_hi) = match self.path {
            Some((f, lo, hi)) => (Some(f), lo, hi),
            None => (None, vec![], vec![]),
        };
        let (ev_fn, ev_lo, ev_hi) = match self.events {
            Some((f, lo, hi)) => (Some(f), lo, hi),
            None => (None, vec![], vec![]),
        };
        let (nh, ne) = (path_lo.len(), ev_lo.len());
        let running = ClosureRunning {
            nx: self.nx,
            nu: self.nu,
            np: self.np,
            nh,
            constants: self.constants.clone(),
            cost: self.cost_running,
            dynamics,
            path: path_fn,
        };
        let endpoint = ClosureEndpoint {
            nx: self.nx,
            np: self.np,
            ne,
            constants: self.constants.clone(),
            cost: self.cost_endpoint,
            events: ev_fn,
        };
        Ok(OcpDefinition {
            name: self.name,
            n_x: self.nx,
            n_u: self.nu,
            n_p: self.np,
            n_e: ne,
            n_h: nh,
            running: Arc::new(running),
            endpoint: Arc::new(endpoint),
            event_lo: ev_lo,
            event_hi: ev_hi,
            path_lo,
            path_hi,
            time,
            search,
            constants: self.constants,
            dynamics_row_gain: vec![1.0; self.nx],
            functional_constraints: self.functional,
            user_guess: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    FeasibleOnly,
    Infeasible,
}

/// One accepted Newton step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub stage: String,
    pub n: usize,
    pub merit: f64,
    pub delta: f64,
    pub sigma: f64,
    pub step_norm: f64,
}

/// Exit summary of one solver stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub n: usize,
    pub delta: f64,
    pub sigma: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    /// Final ‖r‖∞ of the optimality system.
    pub residual_norm: f64,
    /// Largest primal infeasibility (dynamics, events, path, time).
    pub primal_infeasibility: f64,
    pub tolerance: f64,
    /// Which guess-free candidate and perturbation produced the start.
    pub start: String,
    pub stages: Vec<StageSummary>,
    pub log: Vec<IterationRecord>,
    pub messages: Vec<String>,
}

/// Primal and dual trajectories on the final grid. Virtual variables are not kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionBundle {
    pub tau: Vec<f64>,
    pub time: Vec<f64>,
    /// `n_x × (N+1)`
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub parameters: Vec<f64>,
    pub costates: DMatrix<f64>,
    pub path_covectors: DMatrix<f64>,
    pub event_covectors: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub cost: f64,
    pub status: SolveStatus,
    pub diagnostics: SolveDiagnostics,
}

impl SolutionBundle {
    pub fn degree(&self) -> usize {
        self.tau.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.time[0]
    }

    pub fn tf(&self) -> f64 {
        self.time[self.time.len() - 1]
    }

    pub fn state_at(&self, i: usize) -> Vec<f64> {
        self.states.column(i).iter().cloned().collect()
    }

    pub fn control_at(&self, i: usize) -> Vec<f64> {
        self.controls.column(i).iter().cloned().collect()
    }

    pub fn costate_at(&self, i: usize) -> Vec<f64> {
        self.costates.column(i).iter().cloned().collect()
    }

    pub fn path_covector_at(&self, i: usize) -> Vec<f64> {
        self.path_covectors.column(i).iter().cloned().collect()
    }

    /// A stable fingerprint of the numerical content, used to tie reports to bundles.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self
            .time
            .iter()
            .chain(self.states.iter())
            .chain(self.controls.iter())
            .chain(self.costates.iter())
            .chain(self.path_covectors.iter())
            .chain(self.event_covectors.iter())
            .chain(self.parameters.iter())
        {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn lq() -> OcpBuilder {
        OcpBuilder::new("lq", 1, 1)
            .cost_running(|_, u, _, _, _| 0.5 * u[0] * u[0])
            .dynamics(|_, u, _, _, _| vec![u[0]])
            .events(|x0, xf, _, _, _, _| vec![x0[0], xf[0]], vec![0.0, 1.0], vec![0.0, 1.0])
            .time_bounds((0.0, 0.0), (1.0, 1.0))
            .search_box((vec![-2.0], vec![2.0]), (vec![-5.0], vec![5.0]))
    }

    #[test]
    fn lq_evaluation() {
        let def = lq().build().unwrap();
        let v = eval_functions(&def, &[0.0], &[1.0], 0.0, &[]).unwrap();
        assert_eq!(v.cost, 0.5);
        assert_eq!(v.dynamics, vec![1.0]);
        assert!(doctor_check(&def).is_empty());
    }

    #[test]
    fn collapsing_horizon() {
        let def = lq().time_bounds((0.0, 1.0), (0.0, 1.0)).build().unwrap();
        let d = doctor_check(&def);
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::DegenerateHorizon && d.message.contains("tf - t0 can be 0")));
    }

    #[test]
    fn dynamics_shape_mismatch() {
        let def = lq().dynamics(|_, u, _, _, _| vec![u[0], 0.0]).build().unwrap();
        let d = doctor_check(&def);
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::ShapeMismatch && d.message.contains("dynamics")));
    }

    #[test]
    fn non_finite_and_inverted() {
        let def = lq()
            .dynamics(|_, u, _, _, _| vec![u[0] / 0.0 * 0.0])
            .events(|x0, xf, _, _, _, _| vec![x0[0], xf[0]], vec![0.0, 2.0], vec![0.0, 1.0])
            .build()
            .unwrap();
        let d = doctor_check(&def);
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::NonFinite && d.message.contains("dynamics")));
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::InvertedBounds));
    }

    #[test]
    fn functional_constraints_rejected() {
        let def = lq().functional_constraint("K").build().unwrap();
        assert!(doctor_check(&def).iter().any(|d| d.kind == DiagnosticKind::NotSupported));
    }

    #[test]
    fn doctor_is_idempotent() {
        let def = lq().time_bounds((0.0, 1.0), (0.0, 1.0)).build().unwrap();
        assert_eq!(doctor_check(&def), doctor_check(&def));
    }

    #[test]
    fn fd_hessian_of_quadratic() {
        let def = lq().build().unwrap();
        let h = fd_weighted_hessian(def.running.as_ref(), &[0.3, 0.7, 0.0], &[1.0, 0.0]);
        assert!((h[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(h[(0, 0)].abs() < 1e-6);
    }
}
