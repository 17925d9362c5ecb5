use std::collections::BTreeMap;

use super::{Expr, Func, Var};

pub(crate) fn apply(f: Func, a: &[f64]) -> f64 {
    let x = a[0];
    match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tan => x.tan(),
        Func::Exp => x.exp(),
        Func::Log => x.ln(),
        Func::Sqrt => x.sqrt(),
        Func::Abs => x.abs(),
        Func::Sign => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Func::Atan2 => x.atan2(a[1]),
    }
}

/// Binds variables to argument slots and constant names to values.
#[derive(Debug, Clone, Default)]
pub struct SlotMap {
    pub slots: BTreeMap<Var, usize>,
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    Slot(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    PowI(Box<Node>, i32),
    Call(Func, Vec<Node>),
}

/// An expression with variables resolved to slots, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Compiled {
    root: Node,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BindError {
    #[error("variable {0} is not available in this context")]
    Variable(String),
    #[error("constant `{0}` is not defined")]
    Constant(String),
}

impl Compiled {
    pub fn new(e: &Expr, map: &SlotMap) -> Result<Compiled, BindError> {
        Ok(Compiled { root: lower(e, map)? })
    }

    pub fn is_const_zero(&self) -> bool {
        matches!(self.root, Node::Num(v) if v == 0.0)
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        run(&self.root, args)
    }
}

fn lower(e: &Expr, map: &SlotMap) -> Result<Node, BindError> {
    Ok(match e {
        Expr::Num(v) => Node::Num(*v),
        Expr::Var(v) => Node::Slot(*map.slots.get(v).ok_or_else(|| BindError::Variable(v.to_string()))?),
        Expr::Const(c) => Node::Num(*map.constants.get(c).ok_or_else(|| BindError::Constant(c.clone()))?),
        Expr::Neg(a) => Node::Neg(Box::new(lower(a, map)?)),
        Expr::Add(a, b) => Node::Bin(Op::Add, Box::new(lower(a, map)?), Box::new(lower(b, map)?)),
        Expr::Sub(a, b) => Node::Bin(Op::Sub, Box::new(lower(a, map)?), Box::new(lower(b, map)?)),
        Expr::Mul(a, b) => Node::Bin(Op::Mul, Box::new(lower(a, map)?), Box::new(lower(b, map)?)),
        Expr::Div(a, b) => Node::Bin(Op::Div, Box::new(lower(a, map)?), Box::new(lower(b, map)?)),
        Expr::Pow(a, b) => {
            let base = lower(a, map)?;
            match **b {
                Expr::Num(k) if k.fract() == 0.0 && k.abs() <= 64.0 => Node::PowI(Box::new(base), k as i32),
                _ => Node::Bin(Op::Pow, Box::new(base), Box::new(lower(b, map)?)),
            }
        }
        Expr::Call(f, args) => Node::Call(*f, args.iter().map(|a| lower(a, map)).collect::<Result<_, _>>()?),
    })
}

fn run(n: &Node, args: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Slot(i) => args[*i],
        Node::Neg(a) => -run(a, args),
        Node::Bin(op, a, b) => {
            let (x, y) = (run(a, args), run(b, args));
            match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                Op::Div => x / y,
                Op::Pow => x.powf(y),
            }
        }
        Node::PowI(a, k) => run(a, args).powi(*k),
        Node::Call(f, a) => {
            if a.len() == 1 {
                apply(*f, &[run(&a[0], args)])
            } else {
                apply(*f, &[run(&a[0], args), run(&a[1], args)])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;

    fn robot_slots() -> SlotMap {
        let mut m = SlotMap::default();
        for (i, v) in [Var::X(0), Var::X(1), Var::X(2), Var::U(0), Var::U(1), Var::T].iter().enumerate() {
            m.slots.insert(*v, i);
        }
        m
    }

    #[test]
    fn robot_rate() {
        let e = parse("0.5*(cos(x[2]))*(u[0]+u[1])").unwrap();
        let c = Compiled::new(&e, &robot_slots()).unwrap();
        assert_eq!(c.eval(&[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn time_variable() {
        let c = Compiled::new(&parse("t").unwrap(), &robot_slots()).unwrap();
        assert_eq!(c.eval(&[0.0, 0.0, 0.0, 0.0, 0.0, 3.0]), 3.0);
    }

    #[test]
    fn binding_errors() {
        let map = robot_slots();
        assert!(matches!(Compiled::new(&parse("p[0]").unwrap(), &map), Err(BindError::Variable(_))));
        assert!(matches!(Compiled::new(&parse("k").unwrap(), &map), Err(BindError::Constant(_))));
    }

    #[test]
    fn integer_powers_of_negative_bases() {
        let c = Compiled::new(&parse("x[0]^2").unwrap(), &robot_slots()).unwrap();
        assert_eq!(c.eval(&[-3.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 9.0);
    }
}
