//! Hamiltonian, Lagrangian of the Hamiltonian, endpoint Lagrangian and the
//! pointwise necessary-condition residuals built from them.

use crate::ocp_model::{jacobian_of, OcpDefinition, OcpError, SolutionBundle};
use crate::ps_basis::{lagrange_diff_matrix, Grid};

/// `H̄ = F + λ·f + μ·h` and its partial derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    /// `H = F + λ·f`
    pub h: f64,
    /// `H̄ = H + μ·h`
    pub hbar: f64,
    pub dh_dx: Vec<f64>,
    pub dh_du: Vec<f64>,
    /// Equal to `f` by construction.
    pub dh_dlambda: Vec<f64>,
    pub dh_dp: Vec<f64>,
    pub dh_dt: f64,
}

/// `Ē = E + ν·e` and its gradients, with the boundary targets they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointEval {
    pub ebar: f64,
    pub d_x0: Vec<f64>,
    pub d_xf: Vec<f64>,
    pub d_t0: f64,
    pub d_tf: f64,
    pub d_p: Vec<f64>,
}

impl EndpointEval {
    /// Transversality: `λ(t0) = -∂Ē/∂x0`.
    pub fn lambda_t0(&self) -> Vec<f64> {
        self.d_x0.iter().map(|v| -v).collect()
    }

    /// Transversality: `λ(tf) = ∂Ē/∂xf`.
    pub fn lambda_tf(&self) -> Vec<f64> {
        self.d_xf.clone()
    }

    /// Value condition: `H[@t0] = ∂Ē/∂t0`.
    pub fn hamiltonian_t0(&self) -> f64 {
        self.d_t0
    }

    /// Value condition: `H[@tf] = -∂Ē/∂tf`.
    pub fn hamiltonian_tf(&self) -> f64 {
        -self.d_tf
    }
}

fn finite(name: &str, args: Vec<f64>, vals: &[f64]) -> Result<(), OcpError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OcpError::NonFiniteEvaluation { function: name.into(), args })
    }
}

pub fn hamiltonian(def: &OcpDefinition, lambda: &[f64], x: &[f64], u: &[f64], t: f64, p: &[f64]) -> Result<f64, OcpError> {
    let w = def.running_arg(x, u, t, p);
    let out = def.running.eval(&w);
    let h = out[0] + lambda.iter().zip(&out[1..=def.n_x]).map(|(l, f)| l * f).sum::<f64>();
    finite("hamiltonian", w, &[h])?;
    Ok(h)
}

#[allow(clippy::too_many_arguments)]
pub fn lagrangian_of_hamiltonian(
    def: &OcpDefinition,
    mu: &[f64],
    lambda: &[f64],
    x: &[f64],
    u: &[f64],
    t: f64,
    p: &[f64],
) -> Result<HamiltonianEval, OcpError> {
    let (nx, nu) = (def.n_x, def.n_u);
    let w = def.running_arg(x, u, t, p);
    let out = def.running.eval(&w);
    let jac = jacobian_of(def.running.as_ref(), &w);
    let mut y = Vec::with_capacity(out.len());
    y.push(1.0);
    y.extend_from_slice(lambda);
    y.extend_from_slice(mu);
    let g = jac.tr_mul(&nalgebra::DVector::from_vec(y));
    let h = out[0] + lambda.iter().zip(&out[1..=nx]).map(|(l, f)| l * f).sum::<f64>();
    let hbar = h + mu.iter().zip(&out[1 + nx..]).map(|(m, c)| m * c).sum::<f64>();
    let ev = HamiltonianEval {
        h,
        hbar,
        dh_dx: g.rows(0, nx).iter().cloned().collect(),
        dh_du: g.rows(nx, nu).iter().cloned().collect(),
        dh_dlambda: out[1..=nx].to_vec(),
        dh_dt: g[nx + nu],
        dh_dp: g.rows(nx + nu + 1, def.n_p).iter().cloned().collect(),
    };
    finite("hamiltonian", w.clone(), &[ev.h, ev.hbar, ev.dh_dt])?;
    finite("hamiltonian", w, &ev.dh_dx)?;
    Ok(ev)
}

pub fn endpoint_lagrangian(
    def: &OcpDefinition,
    nu: &[f64],
    x0: &[f64],
    xf: &[f64],
    t0: f64,
    tf: f64,
    p: &[f64],
) -> Result<EndpointEval, OcpError> {
    let nx = def.n_x;
    let q = def.endpoint_arg(x0, xf, t0, tf, p);
    let out = def.endpoint.eval(&q);
    let jac = jacobian_of(def.endpoint.as_ref(), &q);
    let mut y = Vec::with_capacity(out.len());
    y.push(1.0);
    y.extend_from_slice(nu);
    let g = jac.tr_mul(&nalgebra::DVector::from_vec(y));
    let ebar = out[0] + nu.iter().zip(&out[1..]).map(|(a, b)| a * b).sum::<f64>();
    let ev = EndpointEval {
        ebar,
        d_x0: g.rows(0, nx).iter().cloned().collect(),
        d_xf: g.rows(nx, nx).iter().cloned().collect(),
        d_t0: g[2 * nx],
        d_tf: g[2 * nx + 1],
        d_p: g.rows(2 * nx + 2, def.n_p).iter().cloned().collect(),
    };
    finite("endpoint_lagrangian", q, g.as_slice())?;
    Ok(ev)
}

/// `∂H̄/∂u`, which vanishes at a KKT point of the pointwise minimization.
#[allow(clippy::too_many_arguments)]
pub fn hmc_residual(
    def: &OcpDefinition,
    lambda: &[f64],
    mu: &[f64],
    x: &[f64],
    u: &[f64],
    t: f64,
    p: &[f64],
) -> Result<Vec<f64>, OcpError> {
    Ok(lagrangian_of_hamiltonian(def, mu, lambda, x, u, t, p)?.dh_du)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcVerdict {
    pub lattice_argmin: Vec<f64>,
    pub lattice_min: f64,
    pub reported_value: f64,
    pub spacing: Vec<f64>,
    pub ok: bool,
}

/// Samples admissible controls on a uniform lattice (at most two controls) and checks that the
/// reported control attains the lattice minimum of `H` within `tol`.
///
/// Admissibility is taken from the path constraints that depend on `u` alone and from `u_lo`/`u_hi`.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_hmc_check(
    def: &OcpDefinition,
    lambda: &[f64],
    x: &[f64],
    u_reported: &[f64],
    t: f64,
    p: &[f64],
    u_lo: &[f64],
    u_hi: &[f64],
    points: usize,
    tol: f64,
) -> Result<HmcVerdict, OcpError> {
    assert!(def.n_u <= 2, "lattice check supports at most two controls");
    let m = points.max(2);
    let spacing: Vec<f64> = u_lo.iter().zip(u_hi).map(|(a, b)| (b - a) / (m - 1) as f64).collect();
    let admissible = |u: &[f64]| -> bool {
        let out = def.running.eval(&def.running_arg(x, u, t, p));
        out[1 + def.n_x..]
            .iter()
            .enumerate()
            .all(|(k, h)| *h >= def.path_lo[k] - 1e-12 && *h <= def.path_hi[k] + 1e-12)
    };
    let mut best = (f64::INFINITY, u_reported.to_vec());
    let count = if def.n_u == 2 { m * m } else { m };
    for idx in 0..count {
        let u: Vec<f64> = (0..def.n_u)
            .map(|k| {
                let i = if k == 0 { idx % m } else { idx / m };
                u_lo[k] + spacing[k] * i as f64
            })
            .collect();
        if !admissible(&u) {
            continue;
        }
        let h = hamiltonian(def, lambda, x, &u, t, p)?;
        if h < best.0 {
            best = (h, u);
        }
    }
    let reported = hamiltonian(def, lambda, x, u_reported, t, p)?;
    Ok(HmcVerdict {
        ok: reported <= best.0 + tol,
        lattice_argmin: best.1,
        lattice_min: best.0,
        reported_value: reported,
        spacing,
    })
}

/// `dH/dt − ∂H̄/∂t` at every node, with the time derivative taken spectrally.
pub fn hamiltonian_evolution_residual(def: &OcpDefinition, grid: &Grid, bundle: &SolutionBundle) -> Result<Vec<f64>, OcpError> {
    let n = grid.len();
    let d = lagrange_diff_matrix(grid);
    let scale = 2.0 / (bundle.tf() - bundle.t0());
    let hv = nalgebra::DVector::from_column_slice(&bundle.hamiltonian);
    let dh = d * hv * scale;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ev = lagrangian_of_hamiltonian(
            def,
            &bundle.path_covector_at(i),
            &bundle.costate_at(i),
            &bundle.state_at(i),
            &bundle.control_at(i),
            bundle.time[i],
            &bundle.parameters,
        )?;
        out.push(dh[i] - ev.dh_dt);
    }
    Ok(out)
}
