//! Arithmetic expressions over chart coordinates.
//!
//! Grammar:
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := number | ident | '(' expr ')' | func '(' expr ')' | '-' factor
//! func   := sin | cos | exp | sqrt
//! ```
//! Identifiers are the declared variables (`x1..xn`, or `t` for curves) plus
//! the constant `pi`. Every node carries its source span so runtime errors
//! (division by zero) point back at the offending text. Analytic derivatives
//! are defined for every node.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at byte {at}: {message} in `{src}`")]
    Parse {
        at: usize,
        message: String,
        src: String,
    },
    #[error("unknown identifier `{name}` at bytes {span_start}..{span_end} (allowed: {allowed})")]
    UnknownIdent {
        name: String,
        span_start: usize,
        span_end: usize,
        allowed: String,
    },
    #[error("division by zero at bytes {span_start}..{span_end} of `{src}`")]
    DivisionByZero {
        span_start: usize,
        span_end: usize,
        src: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Num(f64),
    /// Index into the variable table the expression was parsed with.
    Var(usize),
    Pi,
    Neg(Box<Ast>),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Call(Func, Box<Ast>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ast {
    pub node: Node,
    pub span: Span,
}

impl Ast {
    fn new(node: Node, span: Span) -> Self {
        Ast { node, span }
    }

    /// Structural equality, ignoring spans.
    pub fn structural_eq(&self, other: &Ast) -> bool {
        match (&self.node, &other.node) {
            (Node::Num(a), Node::Num(b)) => a == b,
            (Node::Var(a), Node::Var(b)) => a == b,
            (Node::Pi, Node::Pi) => true,
            (Node::Neg(a), Node::Neg(b)) => a.structural_eq(b),
            (Node::Add(a1, a2), Node::Add(b1, b2))
            | (Node::Sub(a1, a2), Node::Sub(b1, b2))
            | (Node::Mul(a1, a2), Node::Mul(b1, b2))
            | (Node::Div(a1, a2), Node::Div(b1, b2)) => {
                a1.structural_eq(b1) && a2.structural_eq(b2)
            }
            (Node::Call(f, a), Node::Call(g, b)) => f == g && a.structural_eq(b),
            _ => false,
        }
    }
}

/// A parsed expression bound to a fixed variable table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expression {
    ast: Ast,
    vars: Vec<String>,
    src: String,
}

impl Expression {
    /// Parse `src` with the given variable names (e.g. `["x1", "x2"]`).
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expression, ExprError> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            vars,
        };
        p.skip_ws();
        let ast = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Expression {
            ast,
            vars: vars.iter().map(|s| s.to_string()).collect(),
            src: src.to_string(),
        })
    }

    /// A constant expression.
    pub fn constant(value: f64, vars: &[&str]) -> Expression {
        Expression {
            ast: Ast::new(Node::Num(value), Span { start: 0, end: 0 }),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            src: format!("{value:?}"),
        }
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    /// Evaluate at the given variable values.
    pub fn eval(&self, vals: &[f64]) -> Result<f64, ExprError> {
        debug_assert_eq!(vals.len(), self.vars.len());
        eval_ast(&self.ast, vals, &self.src)
    }

    /// Analytic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Expression {
        let d = simplify(diff(&self.ast, var));
        let src = format!("{}", DisplayAst(&d, &self.vars));
        Expression {
            ast: d,
            vars: self.vars.clone(),
            src,
        }
    }

    /// True if the expression references no variables.
    pub fn is_constant(&self) -> bool {
        fn walk(a: &Ast) -> bool {
            match &a.node {
                Node::Num(_) | Node::Pi => true,
                Node::Var(_) => false,
                Node::Neg(x) | Node::Call(_, x) => walk(x),
                Node::Add(x, y) | Node::Sub(x, y) | Node::Mul(x, y) | Node::Div(x, y) => {
                    walk(x) && walk(y)
                }
            }
        }
        walk(&self.ast)
    }

    pub fn structural_eq(&self, other: &Expression) -> bool {
        self.ast.structural_eq(&other.ast)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", DisplayAst(&self.ast, &self.vars))
    }
}

fn eval_ast(a: &Ast, vals: &[f64], src: &str) -> Result<f64, ExprError> {
    Ok(match &a.node {
        Node::Num(v) => *v,
        Node::Var(i) => vals[*i],
        Node::Pi => std::f64::consts::PI,
        Node::Neg(x) => -eval_ast(x, vals, src)?,
        Node::Add(x, y) => eval_ast(x, vals, src)? + eval_ast(y, vals, src)?,
        Node::Sub(x, y) => eval_ast(x, vals, src)? - eval_ast(y, vals, src)?,
        Node::Mul(x, y) => eval_ast(x, vals, src)? * eval_ast(y, vals, src)?,
        Node::Div(x, y) => {
            let den = eval_ast(y, vals, src)?;
            if den == 0.0 {
                return Err(ExprError::DivisionByZero {
                    span_start: a.span.start,
                    span_end: a.span.end,
                    src: src.to_string(),
                });
            }
            eval_ast(x, vals, src)? / den
        }
        Node::Call(f, x) => f.apply(eval_ast(x, vals, src)?),
    })
}

fn dspan() -> Span {
    Span { start: 0, end: 0 }
}

fn num(v: f64) -> Ast {
    Ast::new(Node::Num(v), dspan())
}

fn diff(a: &Ast, var: usize) -> Ast {
    let node = match &a.node {
        Node::Num(_) | Node::Pi => Node::Num(0.0),
        Node::Var(i) => Node::Num(if *i == var { 1.0 } else { 0.0 }),
        Node::Neg(x) => Node::Neg(Box::new(diff(x, var))),
        Node::Add(x, y) => Node::Add(Box::new(diff(x, var)), Box::new(diff(y, var))),
        Node::Sub(x, y) => Node::Sub(Box::new(diff(x, var)), Box::new(diff(y, var))),
        Node::Mul(x, y) => Node::Add(
            Box::new(Ast::new(
                Node::Mul(Box::new(diff(x, var)), y.clone()),
                dspan(),
            )),
            Box::new(Ast::new(
                Node::Mul(x.clone(), Box::new(diff(y, var))),
                dspan(),
            )),
        ),
        // (x/y)' = x'/y - x y'/y^2
        Node::Div(x, y) => Node::Sub(
            Box::new(Ast::new(
                Node::Div(Box::new(diff(x, var)), y.clone()),
                dspan(),
            )),
            Box::new(Ast::new(
                Node::Div(
                    Box::new(Ast::new(
                        Node::Mul(x.clone(), Box::new(diff(y, var))),
                        dspan(),
                    )),
                    Box::new(Ast::new(Node::Mul(y.clone(), y.clone()), dspan())),
                ),
                dspan(),
            )),
        ),
        Node::Call(f, x) => {
            let dx = diff(x, var);
            let outer = match f {
                Func::Sin => Ast::new(Node::Call(Func::Cos, x.clone()), dspan()),
                Func::Cos => Ast::new(
                    Node::Neg(Box::new(Ast::new(Node::Call(Func::Sin, x.clone()), dspan()))),
                    dspan(),
                ),
                Func::Exp => Ast::new(Node::Call(Func::Exp, x.clone()), dspan()),
                Func::Sqrt => Ast::new(
                    Node::Div(
                        Box::new(num(1.0)),
                        Box::new(Ast::new(
                            Node::Mul(
                                Box::new(num(2.0)),
                                Box::new(Ast::new(Node::Call(Func::Sqrt, x.clone()), dspan())),
                            ),
                            dspan(),
                        )),
                    ),
                    dspan(),
                ),
            };
            Node::Mul(Box::new(outer), Box::new(dx))
        }
    };
    Ast::new(node, dspan())
}

fn as_num(a: &Ast) -> Option<f64> {
    match a.node {
        Node::Num(v) => Some(v),
        Node::Pi => Some(std::f64::consts::PI),
        _ => None,
    }
}

fn simplify(a: Ast) -> Ast {
    let span = a.span;
    let node = match a.node {
        Node::Neg(x) => {
            let x = simplify(*x);
            match as_num(&x) {
                Some(v) => Node::Num(-v),
                None => Node::Neg(Box::new(x)),
            }
        }
        Node::Add(x, y) => {
            let (x, y) = (simplify(*x), simplify(*y));
            match (as_num(&x), as_num(&y)) {
                (Some(a), Some(b)) => Node::Num(a + b),
                (Some(0.0), _) => return y,
                (_, Some(0.0)) => return x,
                _ => Node::Add(Box::new(x), Box::new(y)),
            }
        }
        Node::Sub(x, y) => {
            let (x, y) = (simplify(*x), simplify(*y));
            match (as_num(&x), as_num(&y)) {
                (Some(a), Some(b)) => Node::Num(a - b),
                (_, Some(0.0)) => return x,
                (Some(0.0), _) => Node::Neg(Box::new(y)),
                _ => Node::Sub(Box::new(x), Box::new(y)),
            }
        }
        Node::Mul(x, y) => {
            let (x, y) = (simplify(*x), simplify(*y));
            match (as_num(&x), as_num(&y)) {
                (Some(a), Some(b)) => Node::Num(a * b),
                (Some(0.0), _) | (_, Some(0.0)) => Node::Num(0.0),
                (Some(1.0), _) => return y,
                (_, Some(1.0)) => return x,
                _ => Node::Mul(Box::new(x), Box::new(y)),
            }
        }
        Node::Div(x, y) => {
            let (x, y) = (simplify(*x), simplify(*y));
            match (as_num(&x), as_num(&y)) {
                (Some(0.0), _) => Node::Num(0.0),
                (_, Some(1.0)) => return x,
                _ => Node::Div(Box::new(x), Box::new(y)),
            }
        }
        Node::Call(f, x) => Node::Call(f, Box::new(simplify(*x))),
        other => other,
    };
    Ast::new(node, span)
}

struct DisplayAst<'a>(&'a Ast, &'a [String]);

impl fmt::Display for DisplayAst<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn prec(n: &Node) -> u8 {
            match n {
                Node::Add(..) | Node::Sub(..) => 1,
                Node::Mul(..) | Node::Div(..) => 2,
                Node::Neg(..) => 3,
                _ => 4,
            }
        }
        fn go(a: &Ast, vars: &[String], f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
            let p = prec(&a.node);
            let need = p < parent;
            if need {
                write!(f, "(")?;
            }
            match &a.node {
                Node::Num(v) => write!(f, "{v:?}")?,
                Node::Var(i) => write!(f, "{}", vars[*i])?,
                Node::Pi => write!(f, "pi")?,
                Node::Neg(x) => {
                    write!(f, "-")?;
                    go(x, vars, f, 4)?;
                }
                Node::Add(x, y) => {
                    go(x, vars, f, 1)?;
                    write!(f, " + ")?;
                    go(y, vars, f, 2)?;
                }
                Node::Sub(x, y) => {
                    go(x, vars, f, 1)?;
                    write!(f, " - ")?;
                    go(y, vars, f, 2)?;
                }
                Node::Mul(x, y) => {
                    go(x, vars, f, 2)?;
                    write!(f, "*")?;
                    go(y, vars, f, 3)?;
                }
                Node::Div(x, y) => {
                    go(x, vars, f, 2)?;
                    write!(f, "/")?;
                    go(y, vars, f, 3)?;
                }
                Node::Call(func, x) => {
                    write!(f, "{}(", func.name())?;
                    go(x, vars, f, 0)?;
                    write!(f, ")")?;
                }
            }
            if need {
                write!(f, ")")?;
            }
            Ok(())
        }
        go(self.0, self.1, f, 0)
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ExprError {
        ExprError::Parse {
            at: self.pos,
            message: message.to_string(),
            src: self.src.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Ast, ExprError> {
        let start = self.pos;
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    self.skip_ws();
                    let rhs = self.term()?;
                    let span = Span {
                        start,
                        end: rhs.span.end,
                    };
                    lhs = Ast::new(Node::Add(Box::new(lhs), Box::new(rhs)), span);
                }
                Some(b'-') => {
                    self.pos += 1;
                    self.skip_ws();
                    let rhs = self.term()?;
                    let span = Span {
                        start,
                        end: rhs.span.end,
                    };
                    lhs = Ast::new(Node::Sub(Box::new(lhs), Box::new(rhs)), span);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Ast, ExprError> {
        let start = self.pos;
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    self.skip_ws();
                    let rhs = self.factor()?;
                    let span = Span {
                        start,
                        end: rhs.span.end,
                    };
                    lhs = Ast::new(Node::Mul(Box::new(lhs), Box::new(rhs)), span);
                }
                Some(b'/') => {
                    self.pos += 1;
                    self.skip_ws();
                    let rhs = self.factor()?;
                    let span = Span {
                        start,
                        end: rhs.span.end,
                    };
                    lhs = Ast::new(Node::Div(Box::new(lhs), Box::new(rhs)), span);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Ast, ExprError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                let inner = self.factor()?;
                let span = Span {
                    start,
                    end: inner.span.end,
                };
                Ok(Ast::new(Node::Neg(Box::new(inner)), span))
            }
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(Ast::new(
                    inner.node,
                    Span {
                        start,
                        end: self.pos,
                    },
                ))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            _ => Err(self.err("expected number, identifier, `(` or `-`")),
        }
    }

    fn number(&mut self) -> Result<Ast, ExprError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E') && self.pos > start {
                self.pos += 1;
                if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        let text = &self.src[start..self.pos];
        let value: f64 = text
            .parse()
            .map_err(|_| self.err(&format!("invalid number literal `{text}`")))?;
        Ok(Ast::new(
            Node::Num(value),
            Span {
                start,
                end: self.pos,
            },
        ))
    }

    fn ident(&mut self) -> Result<Ast, ExprError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        let name = &self.src[start..self.pos];
        let span = Span {
            start,
            end: self.pos,
        };
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let func = match name {
                "sin" => Func::Sin,
                "cos" => Func::Cos,
                "exp" => Func::Exp,
                "sqrt" => Func::Sqrt,
                _ => {
                    return Err(ExprError::Parse {
                        at: start,
                        message: format!("unknown function `{name}` (allowed: sin, cos, exp, sqrt)"),
                        src: self.src.to_string(),
                    })
                }
            };
            self.pos += 1;
            let arg = self.expr()?;
            self.skip_ws();
            if self.peek() != Some(b')') {
                return Err(self.err("expected `)` closing function call"));
            }
            self.pos += 1;
            return Ok(Ast::new(
                Node::Call(func, Box::new(arg)),
                Span {
                    start,
                    end: self.pos,
                },
            ));
        }
        if name == "pi" {
            return Ok(Ast::new(Node::Pi, span));
        }
        match self.vars.iter().position(|v| *v == name) {
            Some(i) => Ok(Ast::new(Node::Var(i), span)),
            None => Err(ExprError::UnknownIdent {
                name: name.to_string(),
                span_start: span.start,
                span_end: span.end,
                allowed: {
                    let mut all: Vec<&str> = self.vars.to_vec();
                    all.push("pi");
                    all.join(", ")
                },
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p2(src: &str) -> Expression {
        Expression::parse(src, &["x1", "x2"]).unwrap()
    }

    #[test]
    fn evaluates_basic_arithmetic() {
        let e = p2("2*x1 + x2/4 - 1");
        assert_eq!(e.eval(&[3.0, 8.0]).unwrap(), 7.0);
    }

    #[test]
    fn precedence_and_unary_minus() {
        let e = p2("-x1*x2 + 2");
        assert_eq!(e.eval(&[3.0, 4.0]).unwrap(), -10.0);
        let e = p2("2 - -3");
        assert_eq!(e.eval(&[0.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn functions_and_pi() {
        let e = p2("sin(pi/2) + cos(0) + sqrt(4) + exp(0)");
        assert!((e.eval(&[0.0, 0.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn division_by_zero_reports_span() {
        let e = p2("1/(x1 - 1)");
        match e.eval(&[1.0, 0.0]) {
            Err(ExprError::DivisionByZero { span_start, .. }) => assert_eq!(span_start, 0),
            other => panic!("expected division-by-zero, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_rejected() {
        let err = Expression::parse("x3 + 1", &["x1", "x2"]).unwrap_err();
        assert!(matches!(err, ExprError::UnknownIdent { .. }));
    }

    #[test]
    fn derivative_of_modulated_sine() {
        // d/dx1 [0.3*sin(2*pi*x1)] = 0.6*pi*cos(2*pi*x1)
        let e = p2("0.3*sin(2*pi*x1)");
        let d = e.derivative(0);
        for &x in &[0.0, 0.17, 0.5, 0.93] {
            let expect = 0.6 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
            assert!((d.eval(&[x, 0.0]).unwrap() - expect).abs() < 1e-14);
        }
        // the non-varying direction differentiates to zero
        let dz = e.derivative(1);
        assert_eq!(dz.eval(&[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn derivative_of_quotient_and_sqrt() {
        let e = p2("sqrt(x1)/x2");
        let d = e.derivative(0);
        let x: [f64; 2] = [2.25, 3.0];
        let expect = 1.0 / (2.0 * x[0].sqrt() * x[1]);
        assert!((d.eval(&x).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn pretty_print_round_trips() {
        for src in [
            "0.3*sin(2*pi*x1)",
            "-x1*(x2 + 1)/(x2 - 2)",
            "sqrt(x1*x1 + x2*x2)",
            "1 - 2 - 3",
            "2*(x1 + 1)*3",
            "exp(-x1)",
        ] {
            let e = p2(src);
            let printed = format!("{e}");
            let e2 = Expression::parse(&printed, &["x1", "x2"]).unwrap();
            assert!(
                e.structural_eq(&e2),
                "round trip failed: `{src}` -> `{printed}`"
            );
            // and evaluation agrees
            let v1 = e.eval(&[0.37, 1.4]).unwrap();
            let v2 = e2.eval(&[0.37, 1.4]).unwrap();
            assert_eq!(v1.to_bits(), v2.to_bits());
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(Expression::parse("1 + 2 )", &["x1"]).is_err());
        assert!(Expression::parse("sin(x1", &["x1"]).is_err());
        assert!(Expression::parse("", &["x1"]).is_err());
    }
}
