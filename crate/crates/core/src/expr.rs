//! Forcing expressions: `+ - * /`, `^` with a numeric exponent, `sin`,
//! `cos`, `exp`, `pi`, and the variables `x1 x2 y1 y2`.
//!
//! ```
//! use twoscale::expr::{Expr, Var};
//! let e = Expr::parse("sin(2*pi*y1)*cos(2*pi*y2)").unwrap();
//! let d = e.derivative(Var::Y1);
//! let v = d.eval(&[0.0, 0.0, 0.0, 0.0]);
//! assert!((v - 2.0 * std::f64::consts::PI).abs() < 1e-12);
//! ```

use crate::error::{Error, Result};
use crate::forcing::TwoScaleForcing;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X1,
    X2,
    Y1,
    Y2,
}

impl Var {
    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::Y1 => "y1",
            Var::Y2 => "y2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    column: usize,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, column: self.column + self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let neg = self.eat(b'-');
            let at = self.pos;
            match self.atom()? {
                Expr::Num(p) => return Ok(Expr::Pow(Box::new(base), if neg { -p } else { p })),
                _ => {
                    self.pos = at;
                    return Err(self.err("exponent must be a number"));
                }
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.err("unexpected end of expression")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let func = match word {
                    "pi" => return Ok(Expr::Pi),
                    "x1" => return Ok(Expr::Var(Var::X1)),
                    "x2" => return Ok(Expr::Var(Var::X2)),
                    "y1" => return Ok(Expr::Var(Var::Y1)),
                    "y2" => return Ok(Expr::Var(Var::Y2)),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    _ => {
                        self.pos = start;
                        return Err(self.err(format!("unknown name `{word}`")));
                    }
                };
                if !self.eat(b'(') {
                    return Err(self.err(format!("expected `(` after `{word}`")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(Expr::Call(func, Box::new(arg)))
            }
            Some(c) => Err(self.err(format!("unexpected character `{}`", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut p = self.pos + 1;
            if p < s.len() && (s[p] == b'+' || s[p] == b'-') {
                p += 1;
            }
            if p < s.len() && s[p].is_ascii_digit() {
                while p < s.len() && s[p].is_ascii_digit() {
                    p += 1;
                }
                self.pos = p;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap();
        text.parse::<f64>().map(Expr::Num).map_err(|_| {
            let mut e = self.err(format!("bad number `{text}`"));
            if let Error::Parse { column, .. } = &mut e {
                *column = self.column + start;
            }
            e
        })
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

// Constructors with the obvious simplifications, so derivatives stay
// readable.
fn add(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        b
    } else if is_num(&b, 0.0) {
        a
    } else {
        Expr::Add(Box::new(a), Box::new(b))
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    if is_num(&b, 0.0) {
        a
    } else if is_num(&a, 0.0) {
        neg(b)
    } else {
        Expr::Sub(Box::new(a), Box::new(b))
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) || is_num(&b, 0.0) {
        num(0.0)
    } else if is_num(&a, 1.0) {
        b
    } else if is_num(&b, 1.0) {
        a
    } else {
        Expr::Mul(Box::new(a), Box::new(b))
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        num(0.0)
    } else if is_num(&b, 1.0) {
        a
    } else {
        Expr::Div(Box::new(a), Box::new(b))
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        Self::parse_at(src, 1, 1)
    }

    /// Parses `src`, reporting errors at `line` and columns offset by
    /// `column`.
    pub fn parse_at(src: &str, line: usize, column: usize) -> Result<Expr> {
        let mut p = Parser { src: src.as_bytes(), pos: 0, line, column };
        let e = p.expr()?;
        if p.peek().is_some() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }

    /// Value at `[x1, x2, y1, y2]`.
    pub fn eval(&self, v: &[f64; 4]) -> f64 {
        match self {
            Expr::Num(x) => *x,
            Expr::Pi => std::f64::consts::PI,
            Expr::Var(var) => v[var.index()],
            Expr::Neg(a) => -a.eval(v),
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Div(a, b) => a.eval(v) / b.eval(v),
            Expr::Pow(a, p) => a.eval(v).powf(*p),
            Expr::Call(f, a) => {
                let x = a.eval(v);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                }
            }
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) | Expr::Pi => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
        }
    }

    /// Symbolic partial derivative.
    pub fn derivative(&self, var: Var) -> Expr {
        if !self.depends_on(var) {
            return num(0.0);
        }
        match self {
            Expr::Num(_) | Expr::Pi => num(0.0),
            Expr::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(mul(a.derivative(var), (**b).clone()), mul((**a).clone(), b.derivative(var))),
            Expr::Div(a, b) => div(
                sub(mul(a.derivative(var), (**b).clone()), mul((**a).clone(), b.derivative(var))),
                Expr::Pow(b.clone(), 2.0),
            ),
            Expr::Pow(a, p) => mul(mul(num(*p), Expr::Pow(a.clone(), p - 1.0)), a.derivative(var)),
            Expr::Call(f, a) => {
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => neg(Expr::Call(Func::Sin, a.clone())),
                    Func::Exp => self.clone(),
                };
                mul(outer, a.derivative(var))
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Pi => f.write_str("pi"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => {
                f.write_str("-")?;
                wrap(f, a, 4)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                f.write_str(" + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                f.write_str(" - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                f.write_str("*")?;
                wrap(f, b, 3)
            }
            Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                f.write_str("/")?;
                wrap(f, b, 3)
            }
            Expr::Pow(a, p) => {
                wrap(f, a, 5)?;
                if *p < 0.0 {
                    write!(f, "^-{:?}", -p)
                } else {
                    write!(f, "^{p:?}")
                }
            }
            Expr::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}

/// Body force `f(x, y) = f0 + grad_y f1 + frot`, every part optional.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForcingSpec {
    pub f0: Option<[Expr; 2]>,
    pub f1: Option<Expr>,
    pub frot: Option<[Expr; 2]>,
}

impl ForcingSpec {
    /// Parses `(expr, expr)`.
    pub fn parse_pair(src: &str, line: usize, column: usize) -> Result<[Expr; 2]> {
        let t = src.trim();
        let lead = src.len() - src.trim_start().len();
        let bad = |msg: &str| Error::Parse { line, column: column + lead, msg: msg.into() };
        let inner = t.strip_prefix('(').and_then(|s| s.strip_suffix(')')).ok_or_else(|| bad("expected `(expr, expr)`"))?;
        // split at the top-level comma
        let mut depth = 0i32;
        let mut split = None;
        for (i, c) in inner.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    if split.is_some() {
                        return Err(bad("expected exactly two components"));
                    }
                    split = Some(i);
                }
                _ => {}
            }
        }
        let i = split.ok_or_else(|| bad("expected two components separated by `,`"))?;
        let c0 = column + lead + 1;
        Ok([Expr::parse_at(&inner[..i], line, c0)?, Expr::parse_at(&inner[i + 1..], line, c0 + i + 1)?])
    }

    pub fn is_macroscopic(&self) -> bool {
        let micro = |e: &Expr| e.depends_on(Var::Y1) || e.depends_on(Var::Y2);
        self.f0.as_ref().is_none_or(|p| !p.iter().any(micro))
            && self.f1.as_ref().is_none_or(|e| {
                is_num(&e.derivative(Var::Y1), 0.0) && is_num(&e.derivative(Var::Y2), 0.0)
            })
            && self.frot.as_ref().is_none_or(|p| !p.iter().any(micro))
    }

    pub fn to_forcing(&self) -> TwoScaleForcing {
        let f0 = self.f0.clone();
        let grad = self.f1.as_ref().map(|e| [e.derivative(Var::Y1), e.derivative(Var::Y2)]);
        let frot = self.frot.clone();
        let eval = Arc::new(move |x: [f64; 2], y: [f64; 2]| {
            let v = [x[0], x[1], y[0], y[1]];
            let mut out = [0.0; 2];
            for part in [&f0, &grad, &frot].into_iter().flatten() {
                out[0] += part[0].eval(&v);
                out[1] += part[1].eval(&v);
            }
            out
        });
        if self.is_macroscopic() {
            let e = eval.clone();
            TwoScaleForcing::macroscopic(move |x| e(x, [0.5, 0.5]))
        } else {
            TwoScaleForcing::new(move |x, y| eval(x, y))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(s: &str, v: [f64; 4]) -> f64 {
        Expr::parse(s).unwrap().eval(&v)
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(at("1 + 2*3", [0.0; 4]), 7.0);
        assert_eq!(at("-2^2", [0.0; 4]), -4.0);
        assert_eq!(at("(1+2)*3 - 4/2", [0.0; 4]), 7.0);
        assert_eq!(at("x1*y2 - x2", [2.0, 3.0, 0.0, 5.0]), 7.0);
        assert!((at("exp(1)", [0.0; 4]) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(at("1.5e2", [0.0; 4]), 150.0);
    }

    #[test]
    fn errors_carry_positions() {
        match Expr::parse_at("1 + foo(2)", 3, 10) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, 14);
            }
            other => panic!("{other:?}"),
        }
        assert!(Expr::parse("sin 2").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    #[test]
    fn pairs_split_at_top_level() {
        let [a, b] = ForcingSpec::parse_pair("(sin(x1), cos(y1*x2))", 1, 1).unwrap();
        assert_eq!(a, Expr::parse("sin(x1)").unwrap());
        assert_eq!(b, Expr::parse("cos(y1*x2)").unwrap());
        assert!(ForcingSpec::parse_pair("(1, 2, 3)", 1, 1).is_err());
    }

    #[test]
    fn gradient_forcing_is_not_macroscopic() {
        let s = ForcingSpec { f1: Some(Expr::parse("sin(2*pi*y1)*cos(2*pi*y2)").unwrap()), ..Default::default() };
        assert!(!s.is_macroscopic());
        let s = ForcingSpec { f1: Some(Expr::parse("x1*x2").unwrap()), ..Default::default() };
        assert!(s.is_macroscopic());
    }

    fn arb_expr() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (0.1f64..5.0).prop_map(|v| format!("{v:?}")),
            Just("x1".to_string()),
            Just("x2".to_string()),
            Just("y1".to_string()),
            Just("y2".to_string()),
            Just("pi".to_string()),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) + ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) - ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) * ({b})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("cos({a})")),
                inner.clone().prop_map(|a| format!("-({a})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_round_trips(src in arb_expr()) {
            let e = Expr::parse(&src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            prop_assert_eq!(e, again);
        }

        #[test]
        fn derivative_matches_finite_difference(src in arb_expr(), p in prop::array::uniform4(-1.0f64..1.0)) {
            let e = Expr::parse(&src).unwrap();
            let d = e.derivative(Var::Y1);
            let h = 1e-6;
            let mut a = p;
            let mut b = p;
            a[2] += h;
            b[2] -= h;
            let fd = (e.eval(&a) - e.eval(&b)) / (2.0 * h);
            let ex = d.eval(&p);
            prop_assert!((fd - ex).abs() <= 1e-5 * (1.0 + ex.abs()), "{} vs {}", fd, ex);
        }
    }
}
