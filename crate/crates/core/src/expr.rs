//! A small arithmetic expression language for coefficient and data functions
//! of `(x, t)`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?          right-associative
//! atom    := number | ident | func '(' sum (',' sum)* ')' | '(' sum ')'
//! ```
//!
//! Identifiers are `x` (alias of `x1`), `x1`, `x2` and `t`. The constant `pi`
//! is folded into a literal at parse time.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown function '{name}' at position {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("function '{name}' takes {expected} argument(s), got {got} (position {pos})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unbound identifier '{0}'")]
    Unbound(Var),
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite result in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X1,
    X2,
    T,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::T => "t",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Tanh,
    Abs,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for [`Expr::eval`]. Unset variables are unbound.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    pub x1: Option<f64>,
    pub x2: Option<f64>,
    pub t: Option<f64>,
}

impl Env {
    /// Binds `x1[, x2]` from a point and `t`.
    pub fn at(x: &[f64], t: f64) -> Self {
        Env {
            x1: x.first().copied(),
            x2: x.get(1).copied(),
            t: Some(t),
        }
    }

    /// Binds `x1[, x2]` only.
    pub fn space(x: &[f64]) -> Self {
        Env {
            x1: x.first().copied(),
            x2: x.get(1).copied(),
            t: None,
        }
    }

    fn get(&self, v: Var) -> Result<f64, EvalError> {
        match v {
            Var::X1 => self.x1,
            Var::X2 => self.x2,
            Var::T => self.t,
        }
        .ok_or(EvalError::Unbound(v))
    }
}

fn finite(v: f64, what: &str) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(what.to_string()))
    }
}

/// `base ^ exp` with the domain checks of the language.
pub fn checked_pow(base: f64, exp: f64) -> Result<f64, EvalError> {
    if base < 0.0 && exp.fract() != 0.0 {
        return Err(EvalError::Domain(format!("negative base {base} with non-integer exponent {exp}")));
    }
    if base == 0.0 && exp < 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    finite(base.powf(exp), "^")
}

/// Applies `func` with the domain checks of the language.
pub fn call_func(func: Func, args: &[f64]) -> Result<f64, EvalError> {
    let a = args[0];
    let v = match func {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Exp => a.exp(),
        Func::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::Domain(format!("sqrt of negative value {a}")));
            }
            a.sqrt()
        }
        Func::Tanh => a.tanh(),
        Func::Abs => a.abs(),
        Func::Min => a.min(args[1]),
        Func::Max => a.max(args[1]),
    };
    finite(v, func.name())
}

/// Applies a binary operator with the domain checks of the language.
pub fn apply_bin(op: BinOp, a: f64, b: f64) -> Result<f64, EvalError> {
    match op {
        BinOp::Add => finite(a + b, "+"),
        BinOp::Sub => finite(a - b, "-"),
        BinOp::Mul => finite(a * b, "*"),
        BinOp::Div => {
            if b == 0.0 {
                Err(EvalError::DivisionByZero)
            } else {
                finite(a / b, "/")
            }
        }
        BinOp::Pow => checked_pow(a, b),
    }
}

impl Expr {
    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(v) => env.get(*v),
            Expr::Neg(e) => Ok(-e.eval(env)?),
            Expr::Bin(op, a, b) => apply_bin(*op, a.eval(env)?, b.eval(env)?),
            Expr::Call(f, args) => {
                let mut vals = [0.0; 2];
                for (slot, a) in vals.iter_mut().zip(args) {
                    *slot = a.eval(env)?;
                }
                call_func(*f, &vals[..args.len()])
            }
        }
    }

    /// True if the expression reads variable `v`.
    pub fn uses(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(e) => e.uses(v),
            Expr::Bin(_, a, b) => a.uses(v) || b.uses(v),
            Expr::Call(_, args) => args.iter().any(|a| a.uses(v)),
        }
    }

    /// Value of a variable-free expression.
    pub fn constant_value(&self) -> Option<f64> {
        if self.uses(Var::X1) || self.uses(Var::X2) || self.uses(Var::T) {
            None
        } else {
            self.eval(&Env::default()).ok()
        }
    }
}

/// Fully parenthesised canonical printing; re-parses to an equal tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if v.is_sign_negative() => write!(f, "({v:?})"),
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let v: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("malformed number '{lit}'"),
            })?;
            out.push((Tok::Num(v), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), start));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => {
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("unexpected character '{c}'"),
                })
            }
        };
        out.push((tok, start));
        i += c.len_utf8();
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            pos: self.here(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let start = self.here();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    let func = Func::from_name(&name).ok_or_else(|| ParseError::UnknownFunction {
                        name: name.clone(),
                        pos: start,
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.sum()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.sum()?);
                    }
                    self.expect(Tok::RParen, "')' or ','")?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                            pos: start,
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                match name.as_str() {
                    "x" | "x1" => Ok(Expr::Var(Var::X1)),
                    "x2" => Ok(Expr::Var(Var::X2)),
                    "t" => Ok(Expr::Var(Var::T)),
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    _ if Func::from_name(&name).is_some() => self.err(format!("function '{name}' needs arguments")),
                    _ => Err(ParseError::UnknownIdentifier { name, pos: start }),
                }
            }
            Some(_) => self.err("expected a number, identifier or '('"),
            None => self.err("unexpected end of input"),
        }
    }
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let e = p.sum()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

pub fn eval(e: &Expr, env: &Env) -> Result<f64, EvalError> {
    e.eval(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(v: f64) -> Box<Expr> {
        Box::new(Expr::Num(v))
    }

    fn var(v: Var) -> Box<Expr> {
        Box::new(Expr::Var(v))
    }

    #[test]
    fn parses_sum_of_product_and_call() {
        let e = parse("2*x + sin(t)").unwrap();
        let want = Expr::Bin(
            BinOp::Add,
            Box::new(Expr::Bin(BinOp::Mul, num(2.0), var(Var::X1))),
            Box::new(Expr::Call(Func::Sin, vec![Expr::Var(Var::T)])),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn power_is_right_associative() {
        let e = parse("x^2^3").unwrap();
        let want = Expr::Bin(BinOp::Pow, var(Var::X1), Box::new(Expr::Bin(BinOp::Pow, num(2.0), num(3.0))));
        assert_eq!(e, want);
    }

    #[test]
    fn power_binds_tighter_than_negation() {
        let e = parse("-x^2").unwrap();
        assert_eq!(e, Expr::Neg(Box::new(Expr::Bin(BinOp::Pow, var(Var::X1), num(2.0)))));
        assert_eq!(e.eval(&Env::at(&[3.0], 0.0)).unwrap(), -9.0);
        assert_eq!(parse("2^-1").unwrap().eval(&Env::default()).unwrap(), 0.5);
    }

    #[test]
    fn subtraction_is_left_associative() {
        assert_eq!(parse("8 - 3 - 2").unwrap().eval(&Env::default()).unwrap(), 3.0);
        assert_eq!(parse("8 / 4 / 2").unwrap().eval(&Env::default()).unwrap(), 1.0);
    }

    #[test]
    fn arity_and_name_errors() {
        assert!(matches!(parse("sin(x,t)"), Err(ParseError::Arity { expected: 1, got: 2, .. })));
        assert!(matches!(parse("min(x)"), Err(ParseError::Arity { expected: 2, got: 1, .. })));
        assert!(matches!(parse("foo(x)"), Err(ParseError::UnknownFunction { .. })));
        assert!(matches!(parse("y + 1"), Err(ParseError::UnknownIdentifier { .. })));
        match parse("2 * (x + 1") {
            Err(ParseError::Syntax { pos, .. }) => assert_eq!(pos, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("2 $ 3"), Err(ParseError::Syntax { pos: 2, .. })));
        assert!(matches!(parse(""), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("1 2"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn whitespace_is_insignificant() {
        assert_eq!(parse(" 2 *x+ sin( t ) ").unwrap(), parse("2*x+sin(t)").unwrap());
    }

    #[test]
    fn evaluation_examples() {
        let e = parse("2*x + sin(t)").unwrap();
        assert_eq!(e.eval(&Env::at(&[1.0], 0.0)).unwrap(), 2.0);
        assert_eq!(parse("exp(0)").unwrap().eval(&Env::default()).unwrap(), 1.0);
        assert_eq!(parse("x^2 - 3").unwrap().eval(&Env::at(&[2.0], 0.0)).unwrap(), 1.0);
        assert_eq!(parse("max(x1, x2)").unwrap().eval(&Env::at(&[1.0, 4.0], 0.0)).unwrap(), 4.0);
        assert_eq!(parse("1.5e-1*2").unwrap().eval(&Env::default()).unwrap(), 0.3);
    }

    #[test]
    fn evaluation_errors_are_reported() {
        let env = Env::at(&[0.0], 0.0);
        assert_eq!(parse("1/x").unwrap().eval(&env), Err(EvalError::DivisionByZero));
        assert!(matches!(parse("sqrt(x-1)").unwrap().eval(&env), Err(EvalError::Domain(_))));
        assert!(matches!(parse("(x-1)^0.5").unwrap().eval(&env), Err(EvalError::Domain(_))));
        assert_eq!(parse("(x-2)^2").unwrap().eval(&env).unwrap(), 4.0);
        assert!(matches!(parse("exp(1000)").unwrap().eval(&env), Err(EvalError::NonFinite(_))));
        assert_eq!(parse("x2").unwrap().eval(&env), Err(EvalError::Unbound(Var::X2)));
        assert_eq!(parse("t").unwrap().eval(&Env::default()), Err(EvalError::Unbound(Var::T)));
    }

    #[test]
    fn canonical_print_reparses() {
        for s in ["2*x + sin(t)", "-x^2^-3", "min(x1, x2)/(1 + t)", "pi*x", "1e-10 - 3"] {
            let e = parse(s).unwrap();
            assert_eq!(parse(&e.to_string()).unwrap(), e, "{s}");
        }
    }

    #[test]
    fn dependency_queries() {
        let e = parse("0.1 + 0*x").unwrap();
        assert!(e.uses(Var::X1));
        assert!(!e.uses(Var::T));
        assert_eq!(parse("2*pi").unwrap().constant_value(), Some(2.0 * std::f64::consts::PI));
        assert_eq!(parse("t").unwrap().constant_value(), None);
    }
}
