use nalgebra::DMatrix;

use super::{differentiate, simplify, BindError, Compiled, Expr, SlotMap, Var};
use crate::ocp_model::{Constants, VectorFunction};

/// A list of expressions over a fixed argument ordering, with symbolic first
/// and second derivatives compiled up front.
pub struct ExprSystem {
    inputs: Vec<Var>,
    outputs: Vec<Expr>,
    segments: Vec<(&'static str, usize)>,
    values: Vec<Compiled>,
    jac: Vec<(usize, usize, Compiled)>,
    /// Per output: lower-triangular second-derivative entries.
    hess: Vec<Vec<(usize, usize, Compiled)>>,
}

impl ExprSystem {
    pub fn new(
        inputs: Vec<Var>,
        outputs: Vec<Expr>,
        segments: Vec<(&'static str, usize)>,
        constants: &Constants,
    ) -> Result<ExprSystem, BindError> {
        let mut map = SlotMap { constants: constants.clone(), ..SlotMap::default() };
        for (i, v) in inputs.iter().enumerate() {
            map.slots.insert(*v, i);
        }
        let mut values = Vec::with_capacity(outputs.len());
        let mut jac = Vec::new();
        let mut hess = Vec::with_capacity(outputs.len());
        for (r, e) in outputs.iter().enumerate() {
            let e = simplify(e);
            values.push(Compiled::new(&e, &map)?);
            let used = e.vars();
            let mut second = Vec::new();
            for (j, vj) in inputs.iter().enumerate() {
                if !used.contains(vj) {
                    continue;
                }
                let dj = differentiate(&e, *vj);
                if dj.is_zero() {
                    continue;
                }
                jac.push((r, j, Compiled::new(&dj, &map)?));
                let used_j = dj.vars();
                for (k, vk) in inputs.iter().enumerate().take(j + 1) {
                    if !used_j.contains(vk) {
                        continue;
                    }
                    let djk = differentiate(&dj, *vk);
                    if !djk.is_zero() {
                        second.push((j, k, Compiled::new(&djk, &map)?));
                    }
                }
            }
            hess.push(second);
        }
        Ok(ExprSystem { inputs, outputs, segments, values, jac, hess })
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Expr] {
        &self.outputs
    }
}

impl VectorFunction for ExprSystem {
    fn dim_in(&self) -> usize {
        self.inputs.len()
    }

    fn dim_out(&self) -> usize {
        self.values.len()
    }

    fn eval(&self, w: &[f64]) -> Vec<f64> {
        self.values.iter().map(|c| c.eval(w)).collect()
    }

    fn jacobian(&self, w: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.values.len(), self.inputs.len());
        for (r, c, e) in &self.jac {
            j[(*r, *c)] = e.eval(w);
        }
        Some(j)
    }

    fn weighted_hessian(&self, w: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.inputs.len();
        let mut h = DMatrix::zeros(n, n);
        for (r, entries) in self.hess.iter().enumerate() {
            if y[r] == 0.0 {
                continue;
            }
            for (j, k, e) in entries {
                let v = y[r] * e.eval(w);
                h[(*j, *k)] += v;
                if j != k {
                    h[(*k, *j)] += v;
                }
            }
        }
        Some(h)
    }

    fn segments(&self, _w: &[f64]) -> Vec<(&'static str, usize)> {
        self.segments.clone()
    }

    fn has_analytic_derivatives(&self) -> bool {
        true
    }
}
