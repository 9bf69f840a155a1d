//! A small arithmetic-expression language for user-defined drift, diffusion,
//! observation and noise-covariance functions.
//!
//! Supported: numbers, named variables, `+ - * / ^`, parentheses, the
//! constants `pi` and `e`, and the functions `sin cos tan tanh exp log sqrt
//! abs min max ind`. `ind(v, lo, hi)` is 1 when `lo <= v <= hi` and 0 otherwise.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    Ind,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "tanh" => (Func::Tanh, 1),
            "exp" => (Func::Exp, 1),
            "log" | "ln" => (Func::Log, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            "ind" => (Func::Ind, 3),
            _ => return None,
        })
    }
}

/// A parsed expression over a fixed list of variable names.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "ExprSource", into = "ExprSource")]
pub struct Expr {
    source: String,
    vars: Vec<String>,
    root: Node,
}

#[derive(Serialize, Deserialize)]
struct ExprSource {
    source: String,
    vars: Vec<String>,
}

impl TryFrom<ExprSource> for Expr {
    type Error = Error;
    fn try_from(s: ExprSource) -> Result<Self> {
        let vars: Vec<&str> = s.vars.iter().map(String::as_str).collect();
        Expr::parse(&s.source, &vars)
    }
}

impl From<Expr> for ExprSource {
    fn from(e: Expr) -> Self {
        ExprSource { source: e.source, vars: e.vars }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source && self.vars == other.vars
    }
}

impl Expr {
    pub fn parse(source: &str, vars: &[&str]) -> Result<Expr> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0, vars, end: source.len() };
        let root = p.expr()?;
        if let Some((col, tok)) = p.tokens.get(p.pos) {
            return Err(Error::Expression {
                column: col + 1,
                message: format!("unexpected token {tok:?}"),
            });
        }
        Ok(Expr { source: source.to_string(), vars: vars.iter().map(|s| s.to_string()).collect(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        debug_assert_eq!(args.len(), self.vars.len());
        eval(&self.root, args)
    }

    /// Convenience for single-variable expressions.
    pub fn eval1(&self, x: f64) -> f64 {
        eval(&self.root, std::slice::from_ref(&x))
    }
}

fn eval(node: &Node, args: &[f64]) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(i) => args[*i],
        Node::Neg(a) => -eval(a, args),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, args), eval(b, args));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => {
                    if b.fract() == 0.0 && b.abs() <= 64.0 {
                        a.powi(b as i32)
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
        Node::Call(f, xs) => {
            let a = eval(&xs[0], args);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Min => a.min(eval(&xs[1], args)),
                Func::Max => a.max(eval(&xs[1], args)),
                Func::Ind => {
                    let lo = eval(&xs[1], args);
                    let hi = eval(&xs[2], args);
                    if a >= lo && a <= hi {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let v: f64 = s[start..i].parse().map_err(|_| Error::Expression {
                column: start + 1,
                message: format!("bad number {:?}", &s[start..i]),
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(s[start..i].to_string())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(Error::Expression { column: i + 1, message: format!("unexpected character {c:?}") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    vars: &'a [&'a str],
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map(|(c, _)| *c).unwrap_or(self.end) + 1
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Expression { column: self.column(), message: message.into() })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("unexpected end of expression");
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(')') {
                    return self.err("expected ')'");
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if self.eat('(') {
                    let Some((func, arity)) = Func::lookup(&name) else {
                        self.pos -= 2;
                        return self.err(format!("unknown function {name:?}"));
                    };
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(')') {
                        return self.err("expected ')'");
                    }
                    if args.len() != arity {
                        return self.err(format!("{name} takes {arity} argument(s), got {}", args.len()));
                    }
                    return Ok(Node::Call(func, args));
                }
                if let Some(i) = self.vars.iter().position(|v| *v == name) {
                    return Ok(Node::Var(i));
                }
                match name.as_str() {
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => {
                        self.pos -= 1;
                        self.err(format!("unknown variable {name:?}"))
                    }
                }
            }
            Tok::Sym(c) => self.err(format!("unexpected {c:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64) -> f64 {
        Expr::parse(s, &["x"]).unwrap().eval1(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("(1 - x) / 2", 3.0), -1.0);
        assert_eq!(ev("x - x^3", 2.0), -6.0);
        assert_eq!(ev("1e-2 * 100", 0.0), 1.0);
    }

    #[test]
    fn functions_and_indicator() {
        assert!((ev("2*sin(x) + cos(6*x)", 0.3) - (2.0 * 0.3f64.sin() + 1.8f64.cos())).abs() < 1e-15);
        let arch = "(-2*(1-x)^3 + 1.5*(1-x) + 0.5) * ind(x, 0, 1)";
        assert_eq!(ev(arch, 0.5), 1.0);
        assert_eq!(ev(arch, 1.5), 0.0);
        assert_eq!(ev("max(x, 1)", 0.0), 1.0);
        assert!((ev("pi", 0.0) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        match Expr::parse("1 + y", &["x"]) {
            Err(Error::Expression { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        assert!(Expr::parse("sin(x", &["x"]).is_err());
        assert!(Expr::parse("foo(x)", &["x"]).is_err());
        assert!(Expr::parse("ind(x, 1)", &["x"]).is_err());
        assert!(Expr::parse("x $ 2", &["x"]).is_err());
    }

    #[test]
    fn multi_variable() {
        let c = Expr::parse("0.25 * ind(t - s, 0, 0)", &["s", "t"]).unwrap();
        assert_eq!(c.eval(&[1.0, 1.0]), 0.25);
        assert_eq!(c.eval(&[1.0, 1.5]), 0.0);
    }

    #[test]
    fn serde_roundtrip() {
        let e = Expr::parse("x^2 + 1", &["x"]).unwrap();
        let s = serde_json::to_string(&e).unwrap();
        let back: Expr = serde_json::from_str(&s).unwrap();
        assert_eq!(back.eval1(2.0), 5.0);
    }
}
