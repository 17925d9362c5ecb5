use super::{Expr, ExprError, Func, Var};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (l0, c0) = (line, col);
        let simple = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push(Spanned { tok, line: l0, col: c0 });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                line: l0,
                col: c0,
                found: format!("malformed number `{text}`"),
                expected: vec!["number".into()],
            })?;
            col += i - start;
            out.push(Spanned { tok: Tok::Num(v), line: l0, col: c0 });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Spanned { tok: Tok::Ident(text), line: l0, col: c0 });
            continue;
        }
        return Err(ExprError::Syntax {
            line: l0,
            col: c0,
            found: format!("character `{c}`"),
            expected: vec!["expression".into()],
        });
    }
    out.push(Spanned { tok: Tok::End, line, col });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    known: Option<&'a [&'a str]>,
    warnings: Vec<String>,
}

/// Parse result together with domain-guard warnings.
#[derive(Debug, Clone)]
pub struct ParseOutput {
    pub expr: Expr,
    pub warnings: Vec<String>,
}

/// Parses an expression; bare identifiers are treated as named constants.
pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let out = parse_inner(src, None)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out.expr)
}

/// Parses an expression, rejecting constant names not listed in `constants`.
pub fn parse_with(src: &str, constants: &[&str]) -> Result<ParseOutput, ExprError> {
    parse_inner(src, Some(constants))
}

fn parse_inner(src: &str, known: Option<&[&str]>) -> Result<ParseOutput, ExprError> {
    let mut p = Parser { toks: lex(src)?, pos: 0, known, warnings: Vec::new() };
    let expr = p.expr()?;
    p.expect(Tok::End, &["operator", "end of input"])?;
    Ok(ParseOutput { expr, warnings: p.warnings })
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ExprError {
        let s = &self.toks[self.pos];
        ExprError::Syntax {
            line: s.line,
            col: s.col,
            found: s.tok.describe(),
            expected: expected.iter().map(|e| e.to_string()).collect(),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &[&str]) -> Result<(), ExprError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.unary()?;
                    if rhs.is_zero() {
                        self.warnings.push(format!("division by literal zero in `{lhs}/{rhs}`"));
                    }
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.pow()
    }

    fn pow(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn index(&mut self) -> Result<usize, ExprError> {
        self.expect(Tok::LBracket, &["`[`"])?;
        let v = match self.peek().clone() {
            Tok::Num(v) if v >= 0.0 && v.fract() == 0.0 => {
                self.bump();
                v as usize
            }
            _ => return Err(self.error(&["non-negative integer index"])),
        };
        self.expect(Tok::RBracket, &["`]`"])?;
        Ok(v)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let start = self.toks[self.pos].clone();
        match start.tok.clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, &["`)`", "operator"])?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                let var = match name.as_str() {
                    "x" => Some(Var::X(self.index()?)),
                    "u" => Some(Var::U(self.index()?)),
                    "p" => Some(Var::P(self.index()?)),
                    "x0" => Some(Var::X0(self.index()?)),
                    "xf" => Some(Var::Xf(self.index()?)),
                    "t" => Some(Var::T),
                    "t0" => Some(Var::T0),
                    "tf" => Some(Var::Tf),
                    _ => None,
                };
                if let Some(v) = var {
                    return Ok(Expr::Var(v));
                }
                if *self.peek() == Tok::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| ExprError::UnknownIdentifier {
                        name: name.clone(),
                        line: start.line,
                        col: start.col,
                    })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, &["`)`", "`,`"])?;
                    if args.len() != func.arity() {
                        return Err(ExprError::Syntax {
                            line: start.line,
                            col: start.col,
                            found: format!("{} argument(s) to {}", args.len(), func.name()),
                            expected: vec![format!("{} argument(s)", func.arity())],
                        });
                    }
                    self.guard(func, &args);
                    return Ok(Expr::Call(func, args));
                }
                if Func::from_name(&name).is_some() {
                    return Err(self.error(&["`(`"]));
                }
                if let Some(known) = self.known {
                    if !known.contains(&name.as_str()) {
                        return Err(ExprError::UnknownIdentifier { name, line: start.line, col: start.col });
                    }
                }
                Ok(Expr::Const(name))
            }
            _ => Err(self.error(&["number", "identifier", "`(`", "`-`"])),
        }
    }

    fn guard(&mut self, func: Func, args: &[Expr]) {
        let negative_literal = |e: &Expr| match e {
            Expr::Num(v) => *v < 0.0,
            Expr::Neg(a) => matches!(**a, Expr::Num(v) if v > 0.0),
            _ => false,
        };
        match func {
            Func::Sqrt | Func::Log if negative_literal(&args[0]) => {
                self.warnings.push(format!("{} of a negative literal `{}`", func.name(), args[0]));
            }
            Func::Log if args[0].is_zero() => {
                self.warnings.push("log of literal zero".to_string());
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_matrix() {
        let cases = [
            ("1+2*3", "1.0 + 2.0*3.0"),
            ("-x[0]^2", "-x[0]^2.0"),
            ("2^3^2", "2.0^3.0^2.0"),
            ("(2^3)^2", "(2.0^3.0)^2.0"),
            ("a-b-c", "a - b - c"),
            ("a-(b-c)", "a - (b - c)"),
            ("a/b*c", "a/b*c"),
            ("a/(b*c)", "a/(b*c)"),
            ("-a*b", "-a*b"),
            ("-(a*b)", "-(a*b)"),
            ("2^-1", "2.0^-1.0"),
        ];
        for (src, printed) in cases {
            let e = parse(src).unwrap();
            assert_eq!(e.to_string(), printed, "{src}");
            assert_eq!(parse(printed).unwrap(), e);
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse("x[") {
            Err(ExprError::Syntax { line, col, expected, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(col, 3);
                assert!(!expected.is_empty());
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("1 +\n  * 2"), Err(ExprError::Syntax { line: 2, col: 3, .. })));
        assert!(parse("sin x").is_err());
        assert!(parse("atan2(1)").is_err());
    }

    #[test]
    fn unknown_identifiers() {
        assert!(matches!(parse("foo(1)"), Err(ExprError::UnknownIdentifier { .. })));
        let r = parse_with("c*x[0] + k", &["c"]);
        assert!(matches!(r, Err(ExprError::UnknownIdentifier { ref name, .. }) if name == "k"));
        assert!(parse_with("c*x[0]", &["c"]).is_ok());
    }

    #[test]
    fn domain_guards() {
        assert_eq!(parse_with("x[0]/0", &[]).unwrap().warnings.len(), 1);
        assert_eq!(parse_with("sqrt(-2)", &[]).unwrap().warnings.len(), 1);
        assert!(parse_with("sqrt(x[0])", &[]).unwrap().warnings.is_empty());
    }

    #[test]
    fn numbers_and_whitespace() {
        assert_eq!(parse(" 1.5e-3 ").unwrap(), Expr::Num(1.5e-3));
        assert_eq!(parse("x0[1]*xf[2]").unwrap().vars(), vec![Var::X0(1), Var::Xf(2)]);
    }
}
