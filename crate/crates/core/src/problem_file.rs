//! TOML problem files whose functions are written in the expression language.
//!
//! ```toml
//! name = "lq"
//! [dimensions]
//! states = 1
//! controls = 1
//! [cost]
//! running = "0.5*u[0]^2"
//! [dynamics]
//! f = ["u[0]"]
//! [events]
//! e = ["x0[0]", "xf[0]"]
//! lower = [0.0, 1.0]
//! upper = [0.0, 1.0]
//! [time]
//! t0 = [0.0, 0.0]
//! tf = [1.0, 1.0]
//! [search]
//! x_lower = [-2.0]
//! x_upper = [2.0]
//! u_lower = [-5.0]
//! u_upper = [5.0]
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exprlang::{parse_with, BindError, Expr, ExprError, ExprSystem, Var};
use crate::ocp_model::{Constants, OcpDefinition, SearchBox, TimeBounds};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProblemError {
    #[error("problem file is not valid TOML: {0}")]
    Toml(String),
    #[error("in {field}: {source}")]
    Expr { field: String, source: ExprError },
    #[error("in {field}: {source}")]
    Bind { field: String, source: BindError },
    #[error("in {field}: {var} is out of range")]
    Index { field: String, var: String },
    #[error("in {field}: {var} is not allowed here")]
    Context { field: String, var: String },
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub states: usize,
    pub controls: usize,
    #[serde(default)]
    pub params: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub running: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub f: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundedSection {
    #[serde(default, alias = "e", alias = "h")]
    pub expressions: Vec<String>,
    #[serde(default)]
    pub lower: Vec<f64>,
    #[serde(default)]
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t0: [f64; 2],
    pub tf: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    #[serde(default)]
    pub p_lower: Vec<f64>,
    #[serde(default)]
    pub p_upper: Vec<f64>,
}

/// Optional solver settings carried by a problem file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub n0: Option<usize>,
    pub n_max: Option<usize>,
    pub tol: Option<f64>,
    pub delta0: Option<f64>,
    pub sigma_schedule: Option<Vec<f64>>,
    pub max_inner_iters: Option<usize>,
    pub moore_smith_max: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default)]
    pub name: String,
    pub dimensions: Dimensions,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    #[serde(default)]
    pub cost: CostSection,
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub events: BoundedSection,
    #[serde(default)]
    pub path: BoundedSection,
    pub time: TimeSection,
    pub search: SearchSection,
    #[serde(default)]
    pub solver: SolverOverrides,
    /// Accepted for compatibility and never used: the solver is guess-free.
    #[serde(default, skip_serializing)]
    pub guess: Option<toml::Value>,
}

pub fn parse_problem(text: &str) -> Result<ProblemFile, ProblemError> {
    toml::from_str(text).map_err(|e| ProblemError::Toml(e.to_string()))
}

impl ProblemFile {
    pub fn to_definition(&self) -> Result<OcpDefinition, ProblemError> {
        let d = &self.dimensions;
        let names: Vec<&str> = self.constants.keys().map(String::as_str).collect();
        let parse_field = |field: String, src: &str, running: bool| -> Result<Expr, ProblemError> {
            let out = parse_with(src, &names).map_err(|source| ProblemError::Expr { field: field.clone(), source })?;
            for w in &out.warnings {
                log::warn!("{field}: {w}");
            }
            for v in out.expr.vars() {
                let (ok_ctx, idx, bound) = match v {
                    Var::X(i) => (running, i, d.states),
                    Var::U(i) => (running, i, d.controls),
                    Var::T => (running, 0, 1),
                    Var::X0(i) | Var::Xf(i) => (!running, i, d.states),
                    Var::T0 | Var::Tf => (!running, 0, 1),
                    Var::P(i) => (true, i, d.params),
                };
                if !ok_ctx {
                    return Err(ProblemError::Context { field, var: v.to_string() });
                }
                if idx >= bound {
                    return Err(ProblemError::Index { field, var: v.to_string() });
                }
            }
            Ok(out.expr)
        };

        let zero = || Expr::Num(0.0);
        let running_cost = match &self.cost.running {
            Some(s) => parse_field("cost.running".into(), s, true)?,
            None => zero(),
        };
        let endpoint_cost = match &self.cost.endpoint {
            Some(s) => parse_field("cost.endpoint".into(), s, false)?,
            None => zero(),
        };
        let mut run_out = vec![running_cost];
        for (k, s) in self.dynamics.f.iter().enumerate() {
            run_out.push(parse_field(format!("dynamics.f[{k}]"), s, true)?);
        }
        for (k, s) in self.path.expressions.iter().enumerate() {
            run_out.push(parse_field(format!("path.h[{k}]"), s, true)?);
        }
        let mut end_out = vec![endpoint_cost];
        for (k, s) in self.events.expressions.iter().enumerate() {
            end_out.push(parse_field(format!("events.e[{k}]"), s, false)?);
        }

        let mut run_in: Vec<Var> = (0..d.states).map(Var::X).collect();
        run_in.extend((0..d.controls).map(Var::U));
        run_in.push(Var::T);
        run_in.extend((0..d.params).map(Var::P));
        let mut end_in: Vec<Var> = (0..d.states).map(Var::X0).collect();
        end_in.extend((0..d.states).map(Var::Xf));
        end_in.push(Var::T0);
        end_in.push(Var::Tf);
        end_in.extend((0..d.params).map(Var::P));

        let constants: Constants = self.constants.clone();
        let run_seg = vec![("cost_running", 1), ("dynamics", self.dynamics.f.len()), ("path", self.path.expressions.len())];
        let end_seg = vec![("cost_endpoint", 1), ("events", self.events.expressions.len())];
        let running = ExprSystem::new(run_in, run_out, run_seg, &constants)
            .map_err(|source| ProblemError::Bind { field: "running functions".into(), source })?;
        let endpoint = ExprSystem::new(end_in, end_out, end_seg, &constants)
            .map_err(|source| ProblemError::Bind { field: "endpoint functions".into(), source })?;

        Ok(OcpDefinition {
            name: self.name.clone(),
            n_x: d.states,
            n_u: d.controls,
            n_p: d.params,
            n_e: self.events.expressions.len(),
            n_h: self.path.expressions.len(),
            running: Arc::new(running),
            endpoint: Arc::new(endpoint),
            event_lo: self.events.lower.clone(),
            event_hi: self.events.upper.clone(),
            path_lo: self.path.lower.clone(),
            path_hi: self.path.upper.clone(),
            time: TimeBounds { t0_lo: self.time.t0[0], t0_hi: self.time.t0[1], tf_lo: self.time.tf[0], tf_hi: self.time.tf[1] },
            search: SearchBox {
                x_lo: self.search.x_lower.clone(),
                x_hi: self.search.x_upper.clone(),
                u_lo: self.search.u_lower.clone(),
                u_hi: self.search.u_upper.clone(),
                p_lo: self.search.p_lower.clone(),
                p_hi: self.search.p_upper.clone(),
            },
            constants,
            dynamics_row_gain: vec![1.0; d.states],
            functional_constraints: Vec::new(),
            user_guess: None,
        })
    }
}

/// Parses and converts in one step.
pub fn load_definition(text: &str) -> Result<(OcpDefinition, SolverOverrides), ProblemError> {
    let file = parse_problem(text)?;
    Ok((file.to_definition()?, file.solver.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp_model::{doctor_check, eval_functions, DiagnosticKind};

    const LQ: &str = r#"
name = "lq"
[dimensions]
states = 1
controls = 1
[cost]
running = "0.5*u[0]^2"
[dynamics]
f = ["u[0]"]
[events]
e = ["x0[0]", "xf[0]"]
lower = [0.0, 1.0]
upper = [0.0, 1.0]
[time]
t0 = [0.0, 0.0]
tf = [1.0, 1.0]
[search]
x_lower = [-2.0]
x_upper = [2.0]
u_lower = [-5.0]
u_upper = [5.0]
[guess]
time = [0.0, 1.0]
"#;

    #[test]
    fn loads_lq() {
        let (def, _) = load_definition(LQ).unwrap();
        assert!(doctor_check(&def).is_empty());
        let v = eval_functions(&def, &[0.0], &[1.0], 0.0, &[]).unwrap();
        assert_eq!((v.cost, v.dynamics[0]), (0.5, 1.0));
        assert!(def.running.has_analytic_derivatives());
    }

    #[test]
    fn infinite_bounds_and_constants() {
        let text = LQ.replace("[dynamics]", "[constants]\nk = 2.0\n[path]\nh = [\"k*u[0]\"]\nlower = [-inf]\nupper = [inf]\n[dynamics]");
        let (def, _) = load_definition(&text).unwrap();
        assert_eq!(def.path_lo[0], f64::NEG_INFINITY);
        assert_eq!(eval_functions(&def, &[0.0], &[1.5], 0.0, &[]).unwrap().path[0], 3.0);
    }

    #[test]
    fn rejects_bad_references() {
        let e = load_definition(&LQ.replace("\"u[0]\"]", "\"u[3]\"]")).unwrap_err();
        assert!(matches!(e, ProblemError::Index { .. }), "{e}");
        let e = load_definition(&LQ.replace("\"u[0]\"]", "\"tf*u[0]\"]")).unwrap_err();
        assert!(matches!(e, ProblemError::Context { .. }), "{e}");
        let e = load_definition(&LQ.replace("\"u[0]\"]", "\"gain*u[0]\"]")).unwrap_err();
        assert!(matches!(e, ProblemError::Expr { source: ExprError::UnknownIdentifier { .. }, .. }), "{e}");
        assert!(matches!(load_definition("not toml ["), Err(ProblemError::Toml(_))));
    }

    #[test]
    fn extra_dynamics_entry_is_diagnosed() {
        let (def, _) = load_definition(&LQ.replace("f = [\"u[0]\"]", "f = [\"u[0]\", \"0\"]")).unwrap();
        assert!(doctor_check(&def).iter().any(|d| d.kind == DiagnosticKind::ShapeMismatch));
    }
}
