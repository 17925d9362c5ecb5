//! Built-in problems.

use crate::ocp_model::OcpDefinition;
use crate::problem_file::{parse_problem, ProblemError, ProblemFile};

const LQ: &str = include_str!("../catalog/lq.toml");
const LQ_PERTURBED: &str = include_str!("../catalog/lq_perturbed.toml");
const ROBOT: &str = include_str!("../catalog/robot.toml");

/// Names accepted by the command line.
pub const PUBLIC_ENTRIES: &[&str] = &["lq", "robot"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown catalog entry `{0}` (available: lq, robot)")]
    UnknownCatalogEntry(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub fn catalog_source(name: &str) -> Result<&'static str, CatalogError> {
    match name {
        "lq" => Ok(LQ),
        "lq_perturbed" => Ok(LQ_PERTURBED),
        "robot" => Ok(ROBOT),
        _ => Err(CatalogError::UnknownCatalogEntry(name.to_string())),
    }
}

pub fn catalog_file(name: &str) -> Result<ProblemFile, CatalogError> {
    Ok(parse_problem(catalog_source(name)?)?)
}

pub fn catalog(name: &str) -> Result<OcpDefinition, CatalogError> {
    Ok(catalog_file(name)?.to_definition()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp_model::{doctor_check, eval_endpoint, eval_functions};

    #[test]
    fn entries_are_clean() {
        for name in ["lq", "lq_perturbed", "robot"] {
            let def = catalog(name).unwrap();
            assert!(doctor_check(&def).is_empty(), "{name}: {:?}", doctor_check(&def));
        }
        assert!(matches!(catalog("nope"), Err(CatalogError::UnknownCatalogEntry(_))));
    }

    #[test]
    fn robot_values() {
        let def = catalog("robot").unwrap();
        let v = eval_functions(&def, &[0.0, 0.0, 0.0], &[1.0, 1.0], 0.0, &[]).unwrap();
        assert_eq!(v.dynamics, vec![1.0, 0.0, 0.0]);
        let v = eval_functions(&def, &[5.0, 0.5, 0.0], &[0.0, 0.0], 0.0, &[]).unwrap();
        assert!((v.path[0] + 0.81).abs() < 1e-15);
        let e = eval_endpoint(&def, &[0.0; 3], &[10.0, 0.0, 0.0], 0.0, 12.0, &[]).unwrap();
        assert_eq!(&e.events[3..], &[10.0, 0.0, 0.0]);
        assert_eq!(e.cost, 12.0);
        // Obstacles touch: centre distance equals the sum of physical radii.
        let k = &def.constants;
        let dist = ((k["x1"] - k["x2"]).powi(2) + (k["y1"] - k["y2"]).powi(2)).sqrt();
        assert!((dist - 2.0 * k["radius"]).abs() < 1e-15);
    }
}
