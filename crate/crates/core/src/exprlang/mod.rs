//! A small arithmetic expression language used by problem files.
//!
//! Expressions are parsed into an [`Expr`] tree, printed back in a canonical
//! form, differentiated symbolically, and compiled for fast evaluation.

mod diff;
mod eval;
mod parse;
mod system;

use std::fmt;

pub use diff::{differentiate, simplify};
pub use eval::{BindError, Compiled, SlotMap};
pub use system::ExprSystem;
pub use parse::{parse, parse_with, ParseOutput};

/// Independent variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X(usize),
    U(usize),
    P(usize),
    T,
    T0,
    Tf,
    X0(usize),
    Xf(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x[{i}]"),
            Var::U(i) => write!(f, "u[{i}]"),
            Var::P(i) => write!(f, "p[{i}]"),
            Var::T => write!(f, "t"),
            Var::T0 => write!(f, "t0"),
            Var::Tf => write!(f, "tf"),
            Var::X0(i) => write!(f, "x0[{i}]"),
            Var::Xf(i) => write!(f, "xf[{i}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Derivative of `abs`; kept in the language so derivatives print and reparse.
    Sign,
    Atan2,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
            Func::Atan2 => "atan2",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            "atan2" => Func::Atan2,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        if self == Func::Atan2 {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Const(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 1.0)
    }

    /// Every variable referenced, sorted and deduplicated.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                out.push(*v);
            }
        });
        out.sort();
        out.dedup();
        out
    }

    /// Every named constant referenced, sorted and deduplicated.
    pub fn constants(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(c.clone());
            }
        });
        out.sort();
        out.dedup();
        out
    }

    fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Const(_) => {}
            Expr::Neg(a) => a.visit(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(v) if v.is_sign_negative() => 3,
            _ => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.prec() < min {
            write!(f, "(")?;
            self.write_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.write_at(f, 3)
            }
            Expr::Add(a, b) => bin(f, a, " + ", b, 1),
            Expr::Sub(a, b) => bin(f, a, " - ", b, 1),
            Expr::Mul(a, b) => bin(f, a, "*", b, 2),
            Expr::Div(a, b) => bin(f, a, "/", b, 2),
            Expr::Pow(a, b) => {
                a.write_at(f, 5)?;
                write!(f, "^")?;
                b.write_at(f, 3)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.write_at(f, 0)?;
                }
                write!(f, ")")
            }
        }
    }
}

fn bin(f: &mut fmt::Formatter<'_>, a: &Expr, op: &str, b: &Expr, p: u8) -> fmt::Result {
    a.write_at(f, p)?;
    write!(f, "{op}")?;
    b.write_at(f, p + 1)
}

/// Canonical printing: `parse(&e.to_string())` reproduces `e`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {col}: found {found}, expected one of {expected:?}")]
    Syntax {
        line: usize,
        col: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("unknown identifier `{name}` at line {line}, column {col}")]
    UnknownIdentifier { name: String, line: usize, col: usize },
}
