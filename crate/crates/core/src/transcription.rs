//! Transcription of an [`OcpDefinition`] into the Birkhoff root-finding system.
//!
//! Unknowns are packed as `[X, U, V, Λ, Ω, M, ν, t0, tf, p]`, each node array
//! stored state-major. `V` and `Ω` are the virtual rates `dx/dτ` and `-dλ/dτ`;
//! all differentiation lives in the two linear blocks, and every nonlinear
//! block couples a node only with itself and with (t0, tf, p).

use nalgebra::{DMatrix, DVector};

use crate::ocp_model::{jacobian_of, weighted_hessian_of, OcpDefinition};
use crate::ps_basis::{assemble_pair, interpolation_matrix, BasisError, DiscretizationPair, Grid, PairKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TranscriptionError {
    #[error("degenerate horizon: tf ({tf}) must exceed t0 ({t0})")]
    DegenerateHorizon { t0: f64, tf: f64 },
    #[error("non-finite residual in block {block} at node {node:?}")]
    NonFiniteResidual { block: &'static str, node: Option<usize> },
    #[error("non-finite Jacobian in block {block} at node {node:?}")]
    NonFiniteJacobian { block: &'static str, node: Option<usize> },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// `t = t0 + (tf - t0)(τ + 1)/2`.
pub fn domain_transform(t0: f64, tf: f64, tau: f64) -> Result<f64, TranscriptionError> {
    if tf <= t0 {
        return Err(TranscriptionError::DegenerateHorizon { t0, tf });
    }
    Ok(t0 + 0.5 * (tf - t0) * (tau + 1.0))
}

pub fn inverse_domain_transform(t0: f64, tf: f64, t: f64) -> Result<f64, TranscriptionError> {
    if tf <= t0 {
        return Err(TranscriptionError::DegenerateHorizon { t0, tf });
    }
    Ok(2.0 * (t - t0) / (tf - t0) - 1.0)
}

/// Index arithmetic for the packed decision vector and the residual rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub nh: usize,
    pub ne: usize,
    pub np: usize,
    /// Number of nodes, N + 1.
    pub n: usize,
}

impl Layout {
    pub fn new(def: &OcpDefinition, n_nodes: usize) -> Layout {
        Layout { nx: def.n_x, nu: def.n_u, nh: def.n_h, ne: def.n_e, np: def.n_p, n: n_nodes }
    }

    pub fn x(&self, k: usize, i: usize) -> usize {
        k * self.n + i
    }
    pub fn u(&self, j: usize, i: usize) -> usize {
        self.nx * self.n + j * self.n + i
    }
    pub fn v(&self, k: usize, i: usize) -> usize {
        (self.nx + self.nu) * self.n + k * self.n + i
    }
    pub fn lam(&self, k: usize, i: usize) -> usize {
        (2 * self.nx + self.nu) * self.n + k * self.n + i
    }
    pub fn om(&self, k: usize, i: usize) -> usize {
        (3 * self.nx + self.nu) * self.n + k * self.n + i
    }
    pub fn mu(&self, l: usize, i: usize) -> usize {
        (4 * self.nx + self.nu) * self.n + l * self.n + i
    }
    pub fn nu_(&self, r: usize) -> usize {
        (4 * self.nx + self.nu + self.nh) * self.n + r
    }
    pub fn t0(&self) -> usize {
        self.nu_(self.ne)
    }
    pub fn tf(&self) -> usize {
        self.t0() + 1
    }
    pub fn p(&self, j: usize) -> usize {
        self.t0() + 2 + j
    }
    pub fn len(&self) -> usize {
        self.t0() + 2 + self.np
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // Residual rows.
    pub fn row_lin_x(&self, k: usize, i: usize) -> usize {
        k * (self.n - 1) + (i - 1)
    }
    pub fn row_lin_lam(&self, k: usize, i: usize) -> usize {
        self.nx * (self.n - 1) + k * self.n + i
    }
    pub fn row_alg_v(&self, k: usize, i: usize) -> usize {
        self.nx * (2 * self.n - 1) + k * self.n + i
    }
    pub fn row_alg_om(&self, k: usize, i: usize) -> usize {
        self.nx * (3 * self.n - 1) + k * self.n + i
    }
    pub fn row_alg_u(&self, j: usize, i: usize) -> usize {
        self.nx * (4 * self.n - 1) + j * self.n + i
    }
    pub fn row_comp(&self, l: usize, i: usize) -> usize {
        self.nx * (4 * self.n - 1) + self.nu * self.n + l * self.n + i
    }
    pub fn row_event(&self, r: usize) -> usize {
        self.nx * (4 * self.n - 1) + (self.nu + self.nh) * self.n + r
    }
    pub fn row_trans(&self, k: usize) -> usize {
        self.row_event(self.ne) + k
    }
    pub fn row_t0(&self) -> usize {
        self.row_trans(self.nx)
    }
    pub fn row_tf(&self) -> usize {
        self.row_t0() + 1
    }
    pub fn row_param(&self, j: usize) -> usize {
        self.row_t0() + 2 + j
    }
    pub fn rows(&self) -> usize {
        self.row_param(self.np)
    }

    /// Block name and node index of a residual row.
    pub fn row_block(&self, row: usize) -> (&'static str, Option<usize>) {
        let n = self.n;
        let bounds = [
            ("lin_x", self.row_lin_lam(0, 0), n - 1),
            ("lin_lambda", self.row_alg_v(0, 0), n),
            ("alg_v", self.row_alg_om(0, 0), n),
            ("alg_omega", self.row_alg_u(0, 0), n),
            ("alg_u", self.row_comp(0, 0), n),
            ("comp", self.row_event(0), n),
        ];
        let mut start = 0;
        for (name, end, per) in bounds {
            if row < end {
                return (name, Some((row - start) % per + usize::from(name == "lin_x")));
            }
            start = end;
        }
        if row < self.row_trans(0) {
            ("events", None)
        } else if row < self.row_t0() {
            ("transversality", None)
        } else if row < self.row_param(0) {
            ("hamiltonian_value", None)
        } else {
            ("param", None)
        }
    }

    /// Length of the packed vector: `(4 n_x + n_u + n_h)(N+1) + n_e + n_p + 2`.
    pub fn expected_len(nx: usize, nu: usize, nh: usize, ne: usize, np: usize, n: usize) -> usize {
        (4 * nx + nu + nh) * n + ne + np + 2
    }
}

/// Unpacked decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub lam: DMatrix<f64>,
    pub om: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub nu: Vec<f64>,
    pub t0: f64,
    pub tf: f64,
    pub p: Vec<f64>,
}

fn block(z: &[f64], off: usize, rows: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, n, &z[off..off + rows * n])
}

fn put(z: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        z.extend(m.row(r).iter());
    }
}

impl Decision {
    pub fn zeros(l: &Layout) -> Decision {
        Decision {
            x: DMatrix::zeros(l.nx, l.n),
            u: DMatrix::zeros(l.nu, l.n),
            v: DMatrix::zeros(l.nx, l.n),
            lam: DMatrix::zeros(l.nx, l.n),
            om: DMatrix::zeros(l.nx, l.n),
            mu: DMatrix::zeros(l.nh, l.n),
            nu: vec![0.0; l.ne],
            t0: 0.0,
            tf: 1.0,
            p: vec![0.0; l.np],
        }
    }

    pub fn unpack(l: &Layout, z: &[f64]) -> Decision {
        Decision {
            x: block(z, l.x(0, 0), l.nx, l.n),
            u: block(z, l.u(0, 0), l.nu, l.n),
            v: block(z, l.v(0, 0), l.nx, l.n),
            lam: block(z, l.lam(0, 0), l.nx, l.n),
            om: block(z, l.om(0, 0), l.nx, l.n),
            mu: block(z, l.mu(0, 0), l.nh, l.n),
            nu: z[l.nu_(0)..l.nu_(0) + l.ne].to_vec(),
            t0: z[l.t0()],
            tf: z[l.tf()],
            p: z[l.p(0)..l.p(0) + l.np].to_vec(),
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut z = Vec::new();
        for m in [&self.x, &self.u, &self.v, &self.lam, &self.om, &self.mu] {
            put(&mut z, m);
        }
        z.extend_from_slice(&self.nu);
        z.push(self.t0);
        z.push(self.tf);
        z.extend_from_slice(&self.p);
        z
    }

    /// Carries every node array onto a new grid by barycentric interpolation.
    pub fn interpolate(&self, from: &Grid, to: &Grid) -> Decision {
        let p = interpolation_matrix(from, &to.tau).transpose();
        Decision {
            x: &self.x * &p,
            u: &self.u * &p,
            v: &self.v * &p,
            lam: &self.lam * &p,
            om: &self.om * &p,
            mu: &self.mu * &p,
            nu: self.nu.clone(),
            t0: self.t0,
            tf: self.tf,
            p: self.p.clone(),
        }
    }
}

/// Smoothed Fischer–Burmeister function `a + b - sqrt(a² + b² + 2σ²)` with partials.
pub fn fischer_burmeister(a: f64, b: f64, sigma: f64) -> (f64, f64, f64) {
    let r = (a * a + b * b + 2.0 * sigma * sigma).sqrt();
    if r == 0.0 {
        return (0.0, 1.0, 1.0);
    }
    (a + b - r, 1.0 - a / r, 1.0 - b / r)
}

/// Complementarity residual for `lo ≤ h ≤ hi` with multiplier `μ` (`μ ≤ 0` at the lower
/// bound, `μ ≥ 0` at the upper), returning the value and its partials in `h` and `μ`.
pub fn complementarity(h: f64, mu: f64, lo: f64, hi: f64, sigma: f64) -> (f64, f64, f64) {
    if lo == hi {
        (h - lo, 1.0, 0.0)
    } else if lo.is_infinite() && hi.is_infinite() {
        (mu, 0.0, 1.0)
    } else if hi.is_infinite() {
        let (v, da, db) = fischer_burmeister(h - lo, -mu, sigma);
        (v, da, -db)
    } else if lo.is_infinite() {
        let (v, da, db) = fischer_burmeister(hi - h, mu, sigma);
        (v, -da, db)
    } else {
        let (inner, ia, ib) = fischer_burmeister(hi - h, mu, sigma);
        let (v, oa, ob) = fischer_burmeister(h - lo, -inner, sigma);
        (v, oa + ob * ia, -ob * ib)
    }
}

/// How far `v` lies outside `[lo, hi]`.
pub fn bound_violation(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

struct NodeEval {
    out: Vec<f64>,
    jac: DMatrix<f64>,
    /// `∇H̄` over `[x, u, t, p]`.
    g: Vec<f64>,
}

struct EndEval {
    out: Vec<f64>,
    jac: DMatrix<f64>,
    /// `∇Ē` over `[x0, xf, t0, tf, p]`.
    g: Vec<f64>,
}

/// The Birkhoff root-finding system for one grid and smoothing level.
#[derive(Debug, Clone)]
pub struct GeneralizedEquation {
    pub def: OcpDefinition,
    pub grid: Grid,
    pub pair: DiscretizationPair,
    pub layout: Layout,
    pub sigma: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

pub fn build_generalized_equation(def: &OcpDefinition, grid: &Grid, sigma: f64) -> GeneralizedEquation {
    let pair = assemble_pair(grid, PairKind::BirkhoffLeft);
    GeneralizedEquation {
        def: def.clone(),
        grid: grid.clone(),
        layout: Layout::new(def, grid.len()),
        sigma,
        alpha: grid.tau.iter().map(|t| 0.5 * (1.0 - t)).collect(),
        beta: grid.tau.iter().map(|t| 0.5 * (1.0 + t)).collect(),
        pair,
    }
}

impl GeneralizedEquation {
    pub fn with_sigma(&self, sigma: f64) -> GeneralizedEquation {
        GeneralizedEquation { sigma, ..self.clone() }
    }

    pub fn n_nodes(&self) -> usize {
        self.layout.n
    }

    pub fn node_time(&self, t0: f64, tf: f64, i: usize) -> f64 {
        t0 * self.alpha[i] + tf * self.beta[i]
    }

    fn running_arg(&self, d: &Decision, i: usize) -> Vec<f64> {
        let l = &self.layout;
        let mut w = Vec::with_capacity(l.nx + l.nu + 1 + l.np);
        w.extend(d.x.column(i).iter());
        w.extend(d.u.column(i).iter());
        w.push(self.node_time(d.t0, d.tf, i));
        w.extend_from_slice(&d.p);
        w
    }

    fn endpoint_arg(&self, d: &Decision) -> Vec<f64> {
        let n = self.layout.n;
        let mut q = Vec::new();
        q.extend(d.x.column(0).iter());
        q.extend(d.x.column(n - 1).iter());
        q.push(d.t0);
        q.push(d.tf);
        q.extend_from_slice(&d.p);
        q
    }

    fn node_y(&self, d: &Decision, i: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(1 + self.layout.nx + self.layout.nh);
        y.push(1.0);
        y.extend(d.lam.column(i).iter());
        y.extend(d.mu.column(i).iter());
        y
    }

    fn eval_node(&self, d: &Decision, i: usize) -> NodeEval {
        let w = self.running_arg(d, i);
        let out = self.def.running.eval(&w);
        let jac = jacobian_of(self.def.running.as_ref(), &w);
        let y = DVector::from_vec(self.node_y(d, i));
        let g = jac.tr_mul(&y).iter().cloned().collect();
        NodeEval { out, jac, g }
    }

    fn endpoint_y(&self, d: &Decision) -> Vec<f64> {
        let mut y = vec![1.0];
        y.extend_from_slice(&d.nu);
        y
    }

    fn eval_end(&self, d: &Decision) -> EndEval {
        let q = self.endpoint_arg(d);
        let out = self.def.endpoint.eval(&q);
        let jac = jacobian_of(self.def.endpoint.as_ref(), &q);
        let g = jac.tr_mul(&DVector::from_vec(self.endpoint_y(d))).iter().cloned().collect();
        EndEval { out, jac, g }
    }

    /// Column of the packed vector for local running-argument index `c` at node `i`;
    /// `None` for the time slot, which maps onto (t0, tf).
    fn node_col(&self, i: usize, c: usize) -> Option<usize> {
        let l = &self.layout;
        if c < l.nx {
            Some(l.x(c, i))
        } else if c < l.nx + l.nu {
            Some(l.u(c - l.nx, i))
        } else if c == l.nx + l.nu {
            None
        } else {
            Some(l.p(c - l.nx - l.nu - 1))
        }
    }

    fn end_col(&self, c: usize) -> usize {
        let l = &self.layout;
        if c < l.nx {
            l.x(c, 0)
        } else if c < 2 * l.nx {
            l.x(c - l.nx, l.n - 1)
        } else if c == 2 * l.nx {
            l.t0()
        } else if c == 2 * l.nx + 1 {
            l.tf()
        } else {
            l.p(c - 2 * l.nx - 2)
        }
    }

    fn add_node(&self, row: &mut [f64], i: usize, c: usize, v: f64) {
        match self.node_col(i, c) {
            Some(col) => row[col] += v,
            None => {
                row[self.layout.t0()] += v * self.alpha[i];
                row[self.layout.tf()] += v * self.beta[i];
            }
        }
    }

    pub fn residual(&self, z: &[f64]) -> Result<DVector<f64>, TranscriptionError> {
        Ok(self.assemble(z, false)?.0)
    }

    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>, TranscriptionError> {
        Ok(self.assemble(z, true)?.1.expect("jacobian requested"))
    }

    pub fn residual_and_jacobian(&self, z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>), TranscriptionError> {
        let (r, j) = self.assemble(z, true)?;
        Ok((r, j.expect("jacobian requested")))
    }

    fn assemble(&self, z: &[f64], want_jac: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>), TranscriptionError> {
        let l = self.layout;
        let (nx, nu, nh, ne, np, n) = (l.nx, l.nu, l.nh, l.ne, l.np, l.n);
        let d = Decision::unpack(&l, z);
        let a = 0.5 * (d.tf - d.t0);
        let w = &self.grid.weights;
        let b = &self.pair.a_v;
        let bd = &self.pair.a_omega;
        let gain = &self.def.dynamics_row_gain;
        let ti = nx + nu;
        let cols = l.len();
        let mut r = DVector::zeros(l.rows());
        let mut jac = if want_jac { Some(DMatrix::zeros(l.rows(), cols)) } else { None };

        let end = self.eval_end(&d);
        let hq = if want_jac {
            Some(weighted_hessian_of(self.def.endpoint.as_ref(), &self.endpoint_arg(&d), &self.endpoint_y(&d)))
        } else {
            None
        };

        // Linear blocks.
        for k in 0..nx {
            for i in 1..n {
                let row = l.row_lin_x(k, i);
                let mut s = -d.x[(k, i)] + d.x[(k, 0)];
                for j in 0..n {
                    s += b[(i, j)] * d.v[(k, j)];
                }
                r[row] = s;
                if let Some(jm) = jac.as_mut() {
                    jm[(row, l.x(k, i))] -= 1.0;
                    jm[(row, l.x(k, 0))] += 1.0;
                    for j in 0..n {
                        jm[(row, l.v(k, j))] += b[(i, j)];
                    }
                }
            }
            for i in 0..n {
                let row = l.row_lin_lam(k, i);
                let mut s = -d.lam[(k, i)] + end.g[nx + k];
                for j in 0..n {
                    s += bd[(i, j)] * d.om[(k, j)];
                }
                r[row] = s;
                if let Some(jm) = jac.as_mut() {
                    let hq = hq.as_ref().unwrap();
                    jm[(row, l.lam(k, i))] -= 1.0;
                    for j in 0..n {
                        jm[(row, l.om(k, j))] += bd[(i, j)];
                    }
                    for c in 0..hq.ncols() {
                        jm[(row, self.end_col(c))] += hq[(nx + k, c)];
                    }
                    for e in 0..ne {
                        jm[(row, l.nu_(e))] += end.jac[(1 + e, nx + k)];
                    }
                }
            }
        }

        // Node-wise nonlinear blocks and the sums feeding the endpoint rows.
        let mut sum_h = 0.0;
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        let mut sum_p = vec![0.0; np];
        let mut ds0 = vec![0.0; if want_jac { cols } else { 0 }];
        let mut dsf = ds0.clone();
        let mut dpar = vec![ds0.clone(); np];
        let mut rowbuf = vec![0.0; cols];
        for i in 0..n {
            let ne_ = self.eval_node(&d, i);
            let (out, nj, g) = (&ne_.out, &ne_.jac, &ne_.g);
            let lam_i: Vec<f64> = d.lam.column(i).iter().cloned().collect();
            let h_i = out[0] + (0..nx).map(|k| lam_i[k] * out[1 + k]).sum::<f64>();
            sum_h += w[i] * h_i;
            sum_a += w[i] * self.alpha[i] * g[ti];
            sum_b += w[i] * self.beta[i] * g[ti];
            for j in 0..np {
                sum_p[j] += w[i] * g[ti + 1 + j];
            }
            for k in 0..nx {
                r[l.row_alg_v(k, i)] = gain[k] * (a * out[1 + k] - d.v[(k, i)]);
                r[l.row_alg_om(k, i)] = a * g[k] - d.om[(k, i)];
            }
            for j in 0..nu {
                r[l.row_alg_u(j, i)] = g[nx + j];
            }
            for c in 0..nh {
                r[l.row_comp(c, i)] =
                    complementarity(out[1 + nx + c], d.mu[(c, i)], self.def.path_lo[c], self.def.path_hi[c], self.sigma).0;
            }
            if !out.iter().chain(g.iter()).all(|v| v.is_finite()) {
                return Err(TranscriptionError::NonFiniteResidual { block: "node", node: Some(i) });
            }

            let Some(jm) = jac.as_mut() else { continue };
            let m = nj.ncols();
            let wh = weighted_hessian_of(self.def.running.as_ref(), &self.running_arg(&d, i), &self.node_y(&d, i));
            // ∇H over the running argument (no path term).
            let mut gh = vec![0.0; m];
            for c in 0..m {
                gh[c] = nj[(0, c)] + (0..nx).map(|k| lam_i[k] * nj[(1 + k, c)]).sum::<f64>();
            }
            let emit = |jm: &mut DMatrix<f64>, row: usize, buf: &mut Vec<f64>| {
                for (c, v) in buf.iter_mut().enumerate() {
                    if *v != 0.0 {
                        jm[(row, c)] += *v;
                        *v = 0.0;
                    }
                }
            };
            for k in 0..nx {
                let row = l.row_alg_v(k, i);
                for c in 0..m {
                    self.add_node(&mut rowbuf, i, c, gain[k] * a * nj[(1 + k, c)]);
                }
                rowbuf[l.v(k, i)] -= gain[k];
                rowbuf[l.t0()] -= gain[k] * 0.5 * out[1 + k];
                rowbuf[l.tf()] += gain[k] * 0.5 * out[1 + k];
                emit(jm, row, &mut rowbuf);

                let row = l.row_alg_om(k, i);
                for c in 0..m {
                    self.add_node(&mut rowbuf, i, c, a * wh[(k, c)]);
                }
                for kk in 0..nx {
                    rowbuf[l.lam(kk, i)] += a * nj[(1 + kk, k)];
                }
                for c in 0..nh {
                    rowbuf[l.mu(c, i)] += a * nj[(1 + nx + c, k)];
                }
                rowbuf[l.om(k, i)] -= 1.0;
                rowbuf[l.t0()] -= 0.5 * g[k];
                rowbuf[l.tf()] += 0.5 * g[k];
                emit(jm, row, &mut rowbuf);
            }
            for j in 0..nu {
                let row = l.row_alg_u(j, i);
                for c in 0..m {
                    self.add_node(&mut rowbuf, i, c, wh[(nx + j, c)]);
                }
                for kk in 0..nx {
                    rowbuf[l.lam(kk, i)] += nj[(1 + kk, nx + j)];
                }
                for c in 0..nh {
                    rowbuf[l.mu(c, i)] += nj[(1 + nx + c, nx + j)];
                }
                emit(jm, row, &mut rowbuf);
            }
            for c in 0..nh {
                let row = l.row_comp(c, i);
                let (_, dh, dmu) =
                    complementarity(out[1 + nx + c], d.mu[(c, i)], self.def.path_lo[c], self.def.path_hi[c], self.sigma);
                for cc in 0..m {
                    self.add_node(&mut rowbuf, i, cc, dh * nj[(1 + nx + c, cc)]);
                }
                rowbuf[l.mu(c, i)] += dmu;
                emit(jm, row, &mut rowbuf);
            }
            // Hamiltonian value and parameter sums.
            let (wa, wb) = (w[i] * self.alpha[i], w[i] * self.beta[i]);
            for c in 0..m {
                self.add_node(&mut ds0, i, c, -0.5 * w[i] * gh[c] + a * wa * wh[(ti, c)]);
                self.add_node(&mut dsf, i, c, 0.5 * w[i] * gh[c] + a * wb * wh[(ti, c)]);
                for j in 0..np {
                    self.add_node(&mut dpar[j], i, c, a * w[i] * wh[(ti + 1 + j, c)]);
                }
            }
            for kk in 0..nx {
                ds0[l.lam(kk, i)] += -0.5 * w[i] * out[1 + kk] + a * wa * nj[(1 + kk, ti)];
                dsf[l.lam(kk, i)] += 0.5 * w[i] * out[1 + kk] + a * wb * nj[(1 + kk, ti)];
                for j in 0..np {
                    dpar[j][l.lam(kk, i)] += a * w[i] * nj[(1 + kk, ti + 1 + j)];
                }
            }
            for c in 0..nh {
                ds0[l.mu(c, i)] += a * wa * nj[(1 + nx + c, ti)];
                dsf[l.mu(c, i)] += a * wb * nj[(1 + nx + c, ti)];
                for j in 0..np {
                    dpar[j][l.mu(c, i)] += a * w[i] * nj[(1 + nx + c, ti + 1 + j)];
                }
            }
        }

        // Events.
        for e in 0..ne {
            let row = l.row_event(e);
            let (v, dh, dmu) = complementarity(end.out[1 + e], d.nu[e], self.def.event_lo[e], self.def.event_hi[e], self.sigma);
            r[row] = v;
            if let Some(jm) = jac.as_mut() {
                for c in 0..end.jac.ncols() {
                    jm[(row, self.end_col(c))] += dh * end.jac[(1 + e, c)];
                }
                jm[(row, l.nu_(e))] += dmu;
            }
        }
        // Transversality.
        for k in 0..nx {
            let row = l.row_trans(k);
            r[row] = end.g[k] + end.g[nx + k] + (0..n).map(|i| w[i] * d.om[(k, i)]).sum::<f64>();
            if let Some(jm) = jac.as_mut() {
                let hq = hq.as_ref().unwrap();
                for c in 0..hq.ncols() {
                    jm[(row, self.end_col(c))] += hq[(k, c)] + hq[(nx + k, c)];
                }
                for e in 0..ne {
                    jm[(row, l.nu_(e))] += end.jac[(1 + e, k)] + end.jac[(1 + e, nx + k)];
                }
                for i in 0..n {
                    jm[(row, l.om(k, i))] += w[i];
                }
            }
        }
        // Hamiltonian value conditions, applied as complementarity against the time bounds.
        let s0 = end.g[2 * nx] - 0.5 * sum_h + a * sum_a;
        let sf = end.g[2 * nx + 1] + 0.5 * sum_h + a * sum_b;
        let tb = self.def.time;
        let (v0, dh0, dm0) = complementarity(d.t0, -s0, tb.t0_lo, tb.t0_hi, self.sigma);
        let (vf, dhf, dmf) = complementarity(d.tf, -sf, tb.tf_lo, tb.tf_hi, self.sigma);
        r[l.row_t0()] = v0;
        r[l.row_tf()] = vf;
        for j in 0..np {
            r[l.row_param(j)] = end.g[2 * nx + 2 + j] + a * sum_p[j];
        }
        if let Some(jm) = jac.as_mut() {
            let hq = hq.as_ref().unwrap();
            for c in 0..hq.ncols() {
                let col = self.end_col(c);
                ds0[col] += hq[(2 * nx, c)];
                dsf[col] += hq[(2 * nx + 1, c)];
                for j in 0..np {
                    dpar[j][col] += hq[(2 * nx + 2 + j, c)];
                }
            }
            for e in 0..ne {
                ds0[l.nu_(e)] += end.jac[(1 + e, 2 * nx)];
                dsf[l.nu_(e)] += end.jac[(1 + e, 2 * nx + 1)];
                for j in 0..np {
                    dpar[j][l.nu_(e)] += end.jac[(1 + e, 2 * nx + 2 + j)];
                }
            }
            ds0[l.t0()] -= 0.5 * sum_a;
            ds0[l.tf()] += 0.5 * sum_a;
            dsf[l.t0()] -= 0.5 * sum_b;
            dsf[l.tf()] += 0.5 * sum_b;
            for j in 0..np {
                dpar[j][l.t0()] -= 0.5 * sum_p[j];
                dpar[j][l.tf()] += 0.5 * sum_p[j];
            }
            let (r0, rf) = (l.row_t0(), l.row_tf());
            jm[(r0, l.t0())] += dh0;
            jm[(rf, l.tf())] += dhf;
            for c in 0..cols {
                jm[(r0, c)] -= dm0 * ds0[c];
                jm[(rf, c)] -= dmf * dsf[c];
                for j in 0..np {
                    jm[(l.row_param(j), c)] += dpar[j][c];
                }
            }
        }

        if let Some(bad) = r.iter().position(|v| !v.is_finite()) {
            let (block, node) = l.row_block(bad);
            return Err(TranscriptionError::NonFiniteResidual { block, node });
        }
        if let Some(jm) = jac.as_ref() {
            for row in 0..jm.nrows() {
                if !jm.row(row).iter().all(|v| v.is_finite()) {
                    let (block, node) = l.row_block(row);
                    return Err(TranscriptionError::NonFiniteJacobian { block, node });
                }
            }
        }
        Ok((r, jac))
    }

    /// Largest primal violation: integration, dynamics, events, path and time bounds.
    pub fn primal_infeasibility(&self, z: &[f64]) -> f64 {
        let l = self.layout;
        let d = Decision::unpack(&l, z);
        let a = 0.5 * (d.tf - d.t0);
        let mut worst: f64 = 0.0;
        for k in 0..l.nx {
            for i in 1..l.n {
                let s: f64 = (0..l.n).map(|j| self.pair.a_v[(i, j)] * d.v[(k, j)]).sum();
                worst = worst.max((-d.x[(k, i)] + d.x[(k, 0)] + s).abs());
            }
        }
        for i in 0..l.n {
            let out = self.def.running.eval(&self.running_arg(&d, i));
            for k in 0..l.nx {
                worst = worst.max((a * out[1 + k] - d.v[(k, i)]).abs());
            }
            for c in 0..l.nh {
                worst = worst.max(bound_violation(out[1 + l.nx + c], self.def.path_lo[c], self.def.path_hi[c]));
            }
        }
        let end = self.def.endpoint.eval(&self.endpoint_arg(&d));
        for e in 0..l.ne {
            worst = worst.max(bound_violation(end[1 + e], self.def.event_lo[e], self.def.event_hi[e]));
        }
        let tb = self.def.time;
        worst = worst.max(bound_violation(d.t0, tb.t0_lo, tb.t0_hi));
        worst = worst.max(bound_violation(d.tf, tb.tf_lo, tb.tf_hi));
        if d.tf <= d.t0 {
            worst = worst.max(d.t0 - d.tf + 1e-12);
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }

    /// Objective `E + a Σ w_i F_i`.
    pub fn cost(&self, z: &[f64]) -> f64 {
        let d = Decision::unpack(&self.layout, z);
        let a = 0.5 * (d.tf - d.t0);
        let run: f64 = (0..self.layout.n).map(|i| self.grid.weights[i] * self.def.running.eval(&self.running_arg(&d, i))[0]).sum();
        self.def.endpoint.eval(&self.endpoint_arg(&d))[0] + a * run
    }

    /// `H = F + λ·f` at every node.
    pub fn hamiltonian_trace(&self, z: &[f64]) -> Vec<f64> {
        let d = Decision::unpack(&self.layout, z);
        (0..self.layout.n)
            .map(|i| {
                let out = self.def.running.eval(&self.running_arg(&d, i));
                out[0] + (0..self.layout.nx).map(|k| d.lam[(k, i)] * out[1 + k]).sum::<f64>()
            })
            .collect()
    }

    /// Infinity norm of the control-stationarity rows.
    pub fn hmc_norm(&self, r: &DVector<f64>) -> f64 {
        let l = self.layout;
        (0..l.nu * l.n).map(|k| r[l.row_alg_u(0, 0) + k].abs()).fold(0.0, f64::max)
    }
}

/// Maps discrete multipliers onto covector samples: `Λ = Q⁻¹Ψ_d`, `Ω = Q⁻¹Ψ_A`, node by node.
pub fn covector_map(psi_d: &DMatrix<f64>, psi_a: &DMatrix<f64>, q: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let scale = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for (i, w) in q.iter().enumerate() {
            out.column_mut(i).iter_mut().for_each(|v| *v /= w);
        }
        out
    };
    (scale(psi_d), scale(psi_a))
}

/// The direct transcription: minimize `E + a Σ w_i F_i` over `[X, U, V, t0, tf, p]`
/// subject to the integration rows, `a f_i - V_i = 0`, path and event bounds.
pub struct NlpForm<'a> {
    pub ge: &'a GeneralizedEquation,
}

impl NlpForm<'_> {
    pub fn primal_len(&self) -> usize {
        let l = self.ge.layout;
        (2 * l.nx + l.nu) * l.n + 2 + l.np
    }

    /// Embeds a primal vector into a full decision vector with zero multipliers.
    pub fn embed(&self, zp: &[f64]) -> Vec<f64> {
        let l = self.ge.layout;
        let mut z = vec![0.0; l.len()];
        let head = (2 * l.nx + l.nu) * l.n;
        z[..head].copy_from_slice(&zp[..head]);
        z[l.t0()] = zp[head];
        z[l.tf()] = zp[head + 1];
        z[l.p(0)..l.p(0) + l.np].copy_from_slice(&zp[head + 2..]);
        z
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let l = self.ge.layout;
        let head = (2 * l.nx + l.nu) * l.n;
        let mut zp = z[..head].to_vec();
        zp.push(z[l.t0()]);
        zp.push(z[l.tf()]);
        zp.extend_from_slice(&z[l.p(0)..l.p(0) + l.np]);
        zp
    }

    pub fn objective(&self, zp: &[f64]) -> f64 {
        self.ge.cost(&self.embed(zp))
    }

    /// Constraint rows: integration (`n_x N`), dynamics (`n_x (N+1)`), path (`n_h (N+1)`), events (`n_e`).
    pub fn constraints(&self, zp: &[f64]) -> Vec<f64> {
        let ge = self.ge;
        let l = ge.layout;
        let d = Decision::unpack(&l, &self.embed(zp));
        let a = 0.5 * (d.tf - d.t0);
        let mut c = Vec::new();
        for k in 0..l.nx {
            for i in 1..l.n {
                let s: f64 = (0..l.n).map(|j| ge.pair.a_v[(i, j)] * d.v[(k, j)]).sum();
                c.push(-d.x[(k, i)] + d.x[(k, 0)] + s);
            }
        }
        let outs: Vec<Vec<f64>> = (0..l.n).map(|i| ge.def.running.eval(&ge.running_arg(&d, i))).collect();
        for k in 0..l.nx {
            for i in 0..l.n {
                c.push(a * outs[i][1 + k] - d.v[(k, i)]);
            }
        }
        for h in 0..l.nh {
            for out in &outs {
                c.push(out[1 + l.nx + h]);
            }
        }
        c.extend_from_slice(&ge.def.endpoint.eval(&ge.endpoint_arg(&d))[1..]);
        c
    }

    pub fn constraint_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.ge.layout;
        let eq = l.nx * (l.n - 1) + l.nx * l.n;
        let mut lo = vec![0.0; eq];
        let mut hi = vec![0.0; eq];
        for h in 0..l.nh {
            lo.extend(std::iter::repeat_n(self.ge.def.path_lo[h], l.n));
            hi.extend(std::iter::repeat_n(self.ge.def.path_hi[h], l.n));
        }
        lo.extend_from_slice(&self.ge.def.event_lo);
        hi.extend_from_slice(&self.ge.def.event_hi);
        (lo, hi)
    }

    /// Objective gradient, assembled analytically from the user-function Jacobians.
    pub fn objective_gradient(&self, zp: &[f64]) -> Vec<f64> {
        let ge = self.ge;
        let l = ge.layout;
        let d = Decision::unpack(&l, &self.embed(zp));
        let a = 0.5 * (d.tf - d.t0);
        let mut g = vec![0.0; l.len()];
        let mut sum_f = 0.0;
        for i in 0..l.n {
            let wv = ge.running_arg(&d, i);
            let out = ge.def.running.eval(&wv);
            let jr = jacobian_of(ge.def.running.as_ref(), &wv);
            sum_f += ge.grid.weights[i] * out[0];
            for c in 0..jr.ncols() {
                ge.add_node(&mut g, i, c, a * ge.grid.weights[i] * jr[(0, c)]);
            }
        }
        g[l.t0()] -= 0.5 * sum_f;
        g[l.tf()] += 0.5 * sum_f;
        let je = jacobian_of(ge.def.endpoint.as_ref(), &ge.endpoint_arg(&d));
        for c in 0..je.ncols() {
            g[ge.end_col(c)] += je[(0, c)];
        }
        self.project(&g)
    }

    /// Dense constraint Jacobian over the primal vector.
    pub fn constraint_jacobian(&self, zp: &[f64]) -> DMatrix<f64> {
        let ge = self.ge;
        let l = ge.layout;
        let d = Decision::unpack(&l, &self.embed(zp));
        let a = 0.5 * (d.tf - d.t0);
        let ncons = l.nx * (l.n - 1) + l.nx * l.n + l.nh * l.n + l.ne;
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; l.len()]; ncons];
        let mut r = 0;
        for k in 0..l.nx {
            for i in 1..l.n {
                rows[r][l.x(k, i)] -= 1.0;
                rows[r][l.x(k, 0)] += 1.0;
                for j in 0..l.n {
                    rows[r][l.v(k, j)] += ge.pair.a_v[(i, j)];
                }
                r += 1;
            }
        }
        let evals: Vec<(Vec<f64>, DMatrix<f64>)> = (0..l.n)
            .map(|i| {
                let wv = ge.running_arg(&d, i);
                (ge.def.running.eval(&wv), jacobian_of(ge.def.running.as_ref(), &wv))
            })
            .collect();
        for k in 0..l.nx {
            for (i, (out, jr)) in evals.iter().enumerate() {
                for c in 0..jr.ncols() {
                    ge.add_node(&mut rows[r], i, c, a * jr[(1 + k, c)]);
                }
                rows[r][l.v(k, i)] -= 1.0;
                rows[r][l.t0()] -= 0.5 * out[1 + k];
                rows[r][l.tf()] += 0.5 * out[1 + k];
                r += 1;
            }
        }
        for h in 0..l.nh {
            for (i, (_, jr)) in evals.iter().enumerate() {
                for c in 0..jr.ncols() {
                    ge.add_node(&mut rows[r], i, c, jr[(1 + l.nx + h, c)]);
                }
                r += 1;
            }
        }
        let je = jacobian_of(ge.def.endpoint.as_ref(), &ge.endpoint_arg(&d));
        for e in 0..l.ne {
            for c in 0..je.ncols() {
                rows[r][ge.end_col(c)] += je[(1 + e, c)];
            }
            r += 1;
        }
        let np = self.primal_len();
        let mut m = DMatrix::zeros(ncons, np);
        for (ri, row) in rows.iter().enumerate() {
            for (c, v) in self.project(row).into_iter().enumerate() {
                m[(ri, c)] = v;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp_model::OcpBuilder;
    use crate::ps_basis::lgl_grid;
    use proptest::prelude::*;

    fn lq() -> OcpDefinition {
        OcpBuilder::new("lq", 1, 1)
            .cost_running(|_, u, _, _, _| 0.5 * u[0] * u[0])
            .dynamics(|_, u, _, _, _| vec![u[0]])
            .events(|x0, xf, _, _, _, _| vec![x0[0], xf[0]], vec![0.0, 1.0], vec![0.0, 1.0])
            .time_bounds((0.0, 0.0), (1.0, 1.0))
            .search_box((vec![-2.0], vec![2.0]), (vec![-5.0], vec![5.0]))
            .build()
            .unwrap()
    }

    const RICH: &str = r#"
name = "rich"
[dimensions]
states = 2
controls = 1
params = 1
[cost]
endpoint = "tf^2 + 0.3*x0[1]*xf[0] + p[0]*t0"
running = "0.5*u[0]^2 + 0.1*x[0]*x[1]*t + p[0]*x[1]"
[dynamics]
f = ["x[1]*(1 + 0.1*t)", "u[0] - 0.2*sin(x[0]) + p[0]"]
[path]
h = ["x[0] + u[0]", "x[1]^2", "u[0] - x[0]", "x[0]*x[1]", "sin(x[1])"]
lower = [-1.0, -inf, 0.5, -inf, -0.5]
upper = [inf, 2.0, 0.5, inf, 0.5]
[events]
e = ["x0[0]", "xf[0] + xf[1]*tf", "t0*xf[1]"]
lower = [0.0, 1.0, -1.0]
upper = [0.0, 3.0, inf]
[time]
t0 = [-1.0, 1.0]
tf = [2.0, 5.0]
[search]
x_lower = [-3.0, -3.0]
x_upper = [3.0, 3.0]
u_lower = [-2.0]
u_upper = [2.0]
p_lower = [-1.0]
p_upper = [1.0]
"#;

    /// Exercises every block: path bounds of each kind, time-dependent running terms, a parameter.
    fn rich() -> OcpDefinition {
        crate::problem_file::load_definition(RICH).unwrap().0
    }

    fn random_z(l: &Layout, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut z: Vec<f64> = (0..l.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        z[l.t0()] = 0.3 * z[l.t0()];
        z[l.tf()] = 3.0 + z[l.tf()];
        z
    }

    #[test]
    fn domain_map() {
        assert_eq!(domain_transform(0.0, 2.0, -1.0).unwrap(), 0.0);
        assert_eq!(domain_transform(0.0, 2.0, 1.0).unwrap(), 2.0);
        assert_eq!(domain_transform(1.0, 3.0, 0.0).unwrap(), 2.0);
        assert!(domain_transform(1.0, 1.0, 0.0).is_err());
        assert_eq!(inverse_domain_transform(1.0, 3.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn layout_sizes() {
        let def = rich();
        let l = Layout::new(&def, 9);
        assert_eq!(l.len(), Layout::expected_len(2, 1, 5, 3, 1, 9));
        assert_eq!(l.rows(), l.len());
        assert_eq!(l.row_block(l.row_lin_x(1, 3)), ("lin_x", Some(3)));
        assert_eq!(l.row_block(l.row_comp(2, 5)), ("comp", Some(5)));
        assert_eq!(l.row_block(l.row_tf()).0, "hamiltonian_value");
    }

    #[test]
    fn lq_analytic_point_is_a_root() {
        let def = lq();
        let grid = lgl_grid(8).unwrap();
        let ge = build_generalized_equation(&def, &grid, 1e-8);
        let l = ge.layout;
        let mut d = Decision::zeros(&l);
        for i in 0..l.n {
            let t = 0.5 * (grid.tau[i] + 1.0);
            d.x[(0, i)] = t;
            d.u[(0, i)] = 1.0;
            d.v[(0, i)] = 0.5;
            d.lam[(0, i)] = -1.0;
        }
        d.nu = vec![1.0, -1.0];
        d.t0 = 0.0;
        d.tf = 1.0;
        let r = ge.residual(&d.pack()).unwrap();
        assert!(r.amax() <= 1e-10, "{r}");
    }

    #[test]
    fn zero_dynamics_gives_zero_rate_rows() {
        let def = OcpBuilder::new("still", 1, 1)
            .dynamics(|_, _, _, _, _| vec![0.0])
            .time_bounds((0.0, 0.0), (1.0, 1.0))
            .search_box((vec![-1.0], vec![1.0]), (vec![-1.0], vec![1.0]))
            .build()
            .unwrap();
        let ge = build_generalized_equation(&def, &lgl_grid(6).unwrap(), 1e-4);
        let mut d = Decision::zeros(&ge.layout);
        d.x.fill(0.25);
        let r = ge.residual(&d.pack()).unwrap();
        for i in 0..7 {
            assert_eq!(r[ge.layout.row_alg_v(0, i)], 0.0);
        }
    }

    #[test]
    fn jacobian_matches_directional_difference() {
        let def = rich();
        let ge = build_generalized_equation(&def, &lgl_grid(6).unwrap(), 1e-2);
        for seed in 0..4 {
            let z = random_z(&ge.layout, seed);
            let (r, j) = ge.residual_and_jacobian(&z).unwrap();
            let dir = DVector::from_fn(z.len(), |i, _| ((i * 37 + seed as usize * 11) % 17) as f64 - 8.0).normalize();
            let eps = 1e-7;
            let zp: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, b)| a + eps * b).collect();
            let rp = ge.residual(&zp).unwrap();
            let err = ((rp - &r) / eps - &j * &dir).norm();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn jacobian_matches_columnwise_differences() {
        let def = rich();
        let ge = build_generalized_equation(&def, &lgl_grid(4).unwrap(), 1e-2);
        let z = random_z(&ge.layout, 9);
        let j = ge.jacobian(&z).unwrap();
        for c in 0..z.len() {
            let h = 1e-6;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[c] += h;
            zm[c] -= h;
            let col = (ge.residual(&zp).unwrap() - ge.residual(&zm).unwrap()) / (2.0 * h);
            let dv = col - j.column(c);
            let row = dv.iamax();
            assert!(dv.amax() < 1e-6, "column {c}, row {:?}: {}", ge.layout.row_block(row), dv.amax());
        }
    }

    #[test]
    fn separability_and_affinity() {
        let def = rich();
        let ge = build_generalized_equation(&def, &lgl_grid(5).unwrap(), 1e-2);
        let l = ge.layout;
        let z = random_z(&l, 3);
        let j = ge.jacobian(&z).unwrap();
        for i in 0..l.n {
            for jn in 0..l.n {
                if i != jn {
                    assert_eq!(j[(l.row_alg_v(1, i), l.u(0, jn))], 0.0);
                }
            }
        }
        let mut z2 = random_z(&l, 4);
        z2[l.t0()] = z[l.t0()];
        z2[l.tf()] = z[l.tf()];
        let j2 = ge.jacobian(&z2).unwrap();
        for k in 0..l.nx {
            for i in 1..l.n {
                let row = l.row_lin_x(k, i);
                assert_eq!(j.row(row), j2.row(row));
            }
        }
    }

    #[test]
    fn covector_map_examples() {
        let q = [0.5, 1.0, 0.5];
        let psi = DMatrix::from_row_slice(1, 3, &q);
        let (lam, om) = covector_map(&psi, &DMatrix::zeros(1, 3), &q);
        assert_eq!(lam, DMatrix::from_element(1, 3, 1.0));
        assert_eq!(om, DMatrix::zeros(1, 3));
    }

    /// Dualizing the direct transcription reproduces the root-finding rows once
    /// multipliers are mapped with Q⁻¹.
    #[test]
    fn tunnel_commutation() {
        let def = rich();
        for n in [4, 8] {
            let grid = lgl_grid(n).unwrap();
            let ge = build_generalized_equation(&def, &grid, 1e-3);
            let l = ge.layout;
            let nlp = NlpForm { ge: &ge };
            for seed in 0..3 {
                let z = random_z(&l, 100 + seed);
                let d = Decision::unpack(&l, &z);
                let r = ge.residual(&z).unwrap();
                let a = 0.5 * (d.tf - d.t0);
                let w = &grid.weights;
                let end = ge.eval_end(&d);
                // NLP multipliers from covectors.
                let mut mult = Vec::new();
                for k in 0..l.nx {
                    for i in 1..l.n {
                        let extra = if i == l.n - 1 { end.g[l.nx + k] } else { 0.0 };
                        mult.push(w[i] * d.om[(k, i)] + extra);
                    }
                }
                for k in 0..l.nx {
                    for i in 0..l.n {
                        mult.push(w[i] * d.lam[(k, i)]);
                    }
                }
                for h in 0..l.nh {
                    for i in 0..l.n {
                        mult.push(a * w[i] * d.mu[(h, i)]);
                    }
                }
                mult.extend_from_slice(&d.nu);
                let zp = nlp.project(&z);
                let jc = nlp.constraint_jacobian(&zp);
                let grad = DVector::from_vec(nlp.objective_gradient(&zp)) + jc.tr_mul(&DVector::from_vec(mult));
                let full = nlp.embed(grad.as_slice());
                let mut worst: f64 = 0.0;
                for k in 0..l.nx {
                    for i in 0..l.n {
                        let mut expect = w[i] * r[l.row_alg_om(k, i)];
                        if i == 0 {
                            expect += r[l.row_trans(k)];
                        }
                        worst = worst.max((full[l.x(k, i)] - expect).abs());
                        worst = worst.max((full[l.v(k, i)] - w[i] * r[l.row_lin_lam(k, i)]).abs());
                    }
                }
                for j in 0..l.nu {
                    for i in 0..l.n {
                        worst = worst.max((full[l.u(j, i)] - a * w[i] * r[l.row_alg_u(j, i)]).abs());
                    }
                }
                for j in 0..l.np {
                    worst = worst.max((full[l.p(j)] - r[l.row_param(j)]).abs());
                }
                // Time rows are compared through the stationarity values themselves.
                let s0 = full[l.t0()];
                let sf = full[l.tf()];
                let tb = def.time;
                let (v0, ..) = complementarity(d.t0, -s0, tb.t0_lo, tb.t0_hi, ge.sigma);
                let (vf, ..) = complementarity(d.tf, -sf, tb.tf_lo, tb.tf_hi, ge.sigma);
                worst = worst.max((v0 - r[l.row_t0()]).abs()).max((vf - r[l.row_tf()]).abs());
                assert!(worst <= 1e-10, "N={n} seed={seed}: {worst}");
            }
        }
    }

    #[test]
    fn complementarity_signs() {
        let s = 1e-9;
        // Lower-active with μ ≤ 0 is a root; μ > 0 is not.
        assert!(complementarity(0.0, -2.0, 0.0, f64::INFINITY, s).0.abs() < 1e-8);
        assert!(complementarity(0.0, 2.0, 0.0, f64::INFINITY, s).0.abs() > 1.0);
        // Upper-active with μ ≥ 0.
        assert!(complementarity(1.0, 3.0, f64::NEG_INFINITY, 1.0, s).0.abs() < 1e-8);
        // Interior of a box forces μ = 0.
        assert!(complementarity(0.3, 0.0, -1.0, 1.0, s).0.abs() < 1e-8);
        assert!(complementarity(0.3, 0.5, -1.0, 1.0, s).0.abs() > 0.1);
        assert!(complementarity(-1.0, -0.5, -1.0, 1.0, s).0.abs() < 1e-8);
        assert!(complementarity(1.0, 0.5, -1.0, 1.0, s).0.abs() < 1e-8);
    }

    #[test]
    fn smoothing_decreases_residual_at_fixed_point() {
        let mut last = f64::INFINITY;
        for s in [1e-2, 1e-4, 1e-6] {
            let v = complementarity(0.0, -1.0, 0.0, f64::INFINITY, s).0.abs();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn interpolation_preserves_polynomials() {
        let def = lq();
        let g8 = lgl_grid(8).unwrap();
        let g16 = lgl_grid(16).unwrap();
        let l = Layout::new(&def, 9);
        let mut d = Decision::zeros(&l);
        for i in 0..9 {
            d.x[(0, i)] = g8.tau[i].powi(3);
        }
        let e = d.interpolate(&g8, &g16);
        for i in 0..17 {
            assert!((e.x[(0, i)] - g16.tau[i].powi(3)).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(n in 2usize..10, seed in 0u64..500) {
            let l = Layout::new(&rich(), n + 1);
            let z = random_z(&l, seed);
            let d = Decision::unpack(&l, &z);
            prop_assert_eq!(d.pack(), z);
        }
    }
}
