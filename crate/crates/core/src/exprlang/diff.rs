use super::{Expr, Func, Var};

fn num(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        _ => None,
    }
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (num(&a), num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x + y),
        (Some(0.0), _) => b,
        (_, Some(0.0)) => a,
        _ => match b {
            Expr::Neg(inner) => sub(a, *inner),
            b => Expr::Add(Box::new(a), Box::new(b)),
        },
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (num(&a), num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x - y),
        (_, Some(0.0)) => a,
        (Some(0.0), _) => neg(b),
        _ if a == b => Expr::Num(0.0),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (num(&a), num(&b)) {
        (Some(x), Some(y)) => return Expr::Num(x * y),
        (Some(x), _) | (_, Some(x)) if x == 0.0 => return Expr::Num(0.0),
        (Some(1.0), _) => return b,
        (_, Some(1.0)) => return a,
        (Some(-1.0), _) => return neg(b),
        (_, Some(-1.0)) => return neg(a),
        (None, Some(_)) => return mul(b, a),
        _ => {}
    }
    if let (Some(c), Expr::Mul(l, r)) = (num(&a), &b) {
        if let Some(d) = num(l) {
            return mul(Expr::Num(c * d), (**r).clone());
        }
    }
    Expr::Mul(Box::new(a), Box::new(b))
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    match (num(&a), num(&b)) {
        (Some(x), Some(y)) if y != 0.0 => return Expr::Num(x / y),
        (Some(0.0), _) => return Expr::Num(0.0),
        (_, Some(1.0)) => return a,
        _ => {}
    }
    if let (Expr::Mul(l, r), Some(c)) = (&a, num(&b)) {
        if let Some(k) = num(l) {
            if c != 0.0 {
                return mul(Expr::Num(k / c), (**r).clone());
            }
        }
    }
    Expr::Div(Box::new(a), Box::new(b))
}

pub(crate) fn pow(a: Expr, b: Expr) -> Expr {
    match (num(&a), num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x.powf(y)),
        (_, Some(0.0)) => Expr::Num(1.0),
        (_, Some(1.0)) => a,
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn call(f: Func, args: Vec<Expr>) -> Expr {
    if args.iter().all(|a| num(a).is_some()) {
        let v: Vec<f64> = args.iter().filter_map(num).collect();
        return Expr::Num(super::eval::apply(f, &v));
    }
    Expr::Call(f, args)
}

/// Rebuilds the tree with constant folding and identity elimination.
pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Num(_) | Expr::Var(_) | Expr::Const(_) => e.clone(),
        Expr::Neg(a) => neg(simplify(a)),
        Expr::Add(a, b) => add(simplify(a), simplify(b)),
        Expr::Sub(a, b) => sub(simplify(a), simplify(b)),
        Expr::Mul(a, b) => mul(simplify(a), simplify(b)),
        Expr::Div(a, b) => div(simplify(a), simplify(b)),
        Expr::Pow(a, b) => pow(simplify(a), simplify(b)),
        Expr::Call(f, args) => call(*f, args.iter().map(simplify).collect()),
    }
}

/// Exact symbolic derivative of `e` with respect to `var`, constant-folded.
pub fn differentiate(e: &Expr, var: Var) -> Expr {
    match e {
        Expr::Num(_) | Expr::Const(_) => Expr::Num(0.0),
        Expr::Var(v) => Expr::Num(if *v == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(differentiate(a, var)),
        Expr::Add(a, b) => add(differentiate(a, var), differentiate(b, var)),
        Expr::Sub(a, b) => sub(differentiate(a, var), differentiate(b, var)),
        Expr::Mul(a, b) => {
            let (da, db) = (differentiate(a, var), differentiate(b, var));
            add(mul(da, simplify(b)), mul(simplify(a), db))
        }
        Expr::Div(a, b) => {
            let (da, db) = (differentiate(a, var), differentiate(b, var));
            let (sa, sb) = (simplify(a), simplify(b));
            if db.is_zero() {
                div(da, sb)
            } else {
                div(sub(mul(da, sb.clone()), mul(sa, db)), pow(sb, Expr::Num(2.0)))
            }
        }
        Expr::Pow(a, b) => {
            let (da, db) = (differentiate(a, var), differentiate(b, var));
            let (sa, sb) = (simplify(a), simplify(b));
            if db.is_zero() {
                let lowered = pow(sa, sub(sb.clone(), Expr::Num(1.0)));
                mul(mul(sb, lowered), da)
            } else {
                let whole = pow(sa.clone(), sb.clone());
                let inner = add(
                    mul(db, call(Func::Log, vec![sa.clone()])),
                    div(mul(sb, da), sa),
                );
                mul(whole, inner)
            }
        }
        Expr::Call(f, args) => {
            let a = simplify(&args[0]);
            let da = differentiate(&args[0], var);
            match f {
                Func::Sin => mul(call(Func::Cos, vec![a]), da),
                Func::Cos => mul(neg(call(Func::Sin, vec![a])), da),
                Func::Tan => div(da, pow(call(Func::Cos, vec![a]), Expr::Num(2.0))),
                Func::Exp => mul(call(Func::Exp, vec![a]), da),
                Func::Log => div(da, a),
                Func::Sqrt => div(da, mul(Expr::Num(2.0), call(Func::Sqrt, vec![a]))),
                Func::Abs => mul(call(Func::Sign, vec![a]), da),
                Func::Sign => Expr::Num(0.0),
                Func::Atan2 => {
                    // atan2(y, x): (x dy - y dx) / (x^2 + y^2)
                    let y = a;
                    let x = simplify(&args[1]);
                    let dy = da;
                    let dx = differentiate(&args[1], var);
                    let den = add(pow(x.clone(), Expr::Num(2.0)), pow(y.clone(), Expr::Num(2.0)));
                    div(sub(mul(x, dy), mul(y, dx)), den)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;

    fn d(src: &str, v: Var) -> String {
        differentiate(&parse(src).unwrap(), v).to_string()
    }

    #[test]
    fn table_rules() {
        assert_eq!(d("cos(x[2])", Var::X(2)), "-sin(x[2])");
        assert_eq!(d("u[0]^2/2", Var::U(0)), "u[0]");
        assert_eq!(d("(x[0]-x1)^2 + (x[1]-y1)^2 - r1^2", Var::X(0)), "2.0*(x[0] - x1)");
        assert_eq!(d("abs(x[0])", Var::X(0)), "sign(x[0])");
        assert_eq!(d("c*(u[0]-u[1])", Var::U(1)), "-c");
        assert_eq!(d("tf - t0", Var::T0), "-1.0");
    }

    #[test]
    fn folding() {
        assert_eq!(simplify(&parse("0*x[0] + 1*x[1] + 2*3").unwrap()).to_string(), "x[1] + 6.0");
        assert_eq!(simplify(&parse("x[0]^1 - x[0]").unwrap()), Expr::Num(0.0));
    }
}
