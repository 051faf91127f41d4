//! Arithmetic expressions over `t, x, y, z1.., w` for coefficient functions.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus and associates to the right, so
//! `-2^2 = -4` and `2^3^2 = 512`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: expected {expected}")]
    Syntax { pos: usize, expected: &'static str },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("`{name}` at byte {pos} takes {expected} argument(s), got {found}")]
    Arity { name: &'static str, pos: usize, expected: usize, found: usize },
    #[error("domain error at byte {pos}: {what} is not finite")]
    Domain { pos: usize, what: &'static str },
}

impl ExprError {
    pub fn position(&self) -> usize {
        match self {
            Self::Syntax { pos, .. }
            | Self::UnknownIdentifier { pos, .. }
            | Self::Arity { pos, .. }
            | Self::Domain { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    Y,
    /// `z1` is index 0.
    Z(usize),
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "exp" => Self::Exp,
            "tanh" => Self::Tanh,
            "abs" => Self::Abs,
            "min" => Self::Min,
            "max" => Self::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Tanh => "tanh",
            Self::Abs => "abs",
            Self::Min => "min",
            Self::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Self::Min | Self::Max => 2,
            _ => 1,
        }
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

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Call(Func, Vec<Ast>),
}

/// A syntax node with the byte offset it starts at (operators: the offset of
/// the operator token).
#[derive(Debug, Clone, PartialEq)]
pub struct Ast {
    pub pos: usize,
    pub node: Node,
}

/// Values of the free variables. Missing `z` components read as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: &'a [f64],
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    root: Ast,
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expression {
    pub fn constant(v: f64) -> Self {
        Self { source: v.to_string(), root: Ast { pos: 0, node: Node::Num(v) } }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Ast {
        &self.root
    }

    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        eval(&self.root, env)
    }

    /// Evaluates and maps domain errors to NaN, for use inside solver callbacks.
    pub fn eval_or_nan(&self, env: &Env<'_>) -> f64 {
        self.eval(env).unwrap_or(f64::NAN)
    }

    /// Rejects variables outside `allowed`; `z` indices must be below `z_count`.
    pub fn restrict(&self, allowed: &[Var], z_count: usize) -> Result<(), ExprError> {
        fn walk(ast: &Ast, src: &str, allowed: &[Var], z_count: usize) -> Result<(), ExprError> {
            match &ast.node {
                Node::Num(_) => Ok(()),
                Node::Var(v) => {
                    let ok = match v {
                        Var::Z(k) => allowed.contains(&Var::Z(0)) && *k < z_count,
                        other => allowed.contains(other),
                    };
                    if ok {
                        Ok(())
                    } else {
                        let name = identifier_at(src, ast.pos);
                        Err(ExprError::UnknownIdentifier { name, pos: ast.pos })
                    }
                }
                Node::Neg(a) => walk(a, src, allowed, z_count),
                Node::Bin(_, a, b) => {
                    walk(a, src, allowed, z_count)?;
                    walk(b, src, allowed, z_count)
                }
                Node::Call(_, args) => args.iter().try_for_each(|a| walk(a, src, allowed, z_count)),
            }
        }
        walk(&self.root, &self.source, allowed, z_count)
    }
}

fn identifier_at(src: &str, pos: usize) -> String {
    src[pos..].chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect()
}

fn finite(v: f64, pos: usize, what: &'static str) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::Domain { pos, what })
    }
}

fn eval(ast: &Ast, env: &Env<'_>) -> Result<f64, ExprError> {
    let pos = ast.pos;
    match &ast.node {
        Node::Num(v) => Ok(*v),
        Node::Var(v) => Ok(match v {
            Var::T => env.t,
            Var::X => env.x,
            Var::Y => env.y,
            Var::Z(k) => env.z.get(*k).copied().unwrap_or(0.0),
            Var::W => env.w,
        }),
        Node::Neg(a) => Ok(-eval(a, env)?),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, env)?, eval(b, env)?);
            match op {
                BinOp::Add => finite(a + b, pos, "sum"),
                BinOp::Sub => finite(a - b, pos, "difference"),
                BinOp::Mul => finite(a * b, pos, "product"),
                BinOp::Div => finite(a / b, pos, "quotient"),
                BinOp::Pow => finite(a.powf(b), pos, "power"),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], env)?;
            match f {
                Func::Sin => Ok(a.sin()),
                Func::Cos => Ok(a.cos()),
                Func::Exp => finite(a.exp(), pos, "exp"),
                Func::Tanh => Ok(a.tanh()),
                Func::Abs => Ok(a.abs()),
                Func::Min => Ok(a.min(eval(&args[1], env)?)),
                Func::Max => Ok(a.max(eval(&args[1], env)?)),
            }
        }
    }
}

pub fn parse_expression(source: &str) -> Result<Expression, ExprError> {
    let mut p = Parser { src: source, bytes: source.as_bytes(), pos: 0 };
    let root = p.expr()?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        return Err(ExprError::Syntax { pos: p.pos, expected: "operator or end of input" });
    }
    Ok(Expression { source: source.to_string(), root })
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let pos = self.pos;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Ast { pos, node: Node::Bin(op, Box::new(lhs), Box::new(rhs)) };
        }
    }

    fn term(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            let pos = self.pos;
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Ast { pos, node: Node::Bin(op, Box::new(lhs), Box::new(rhs)) };
        }
    }

    fn unary(&mut self) -> Result<Ast, ExprError> {
        if self.peek() == Some(b'-') {
            let pos = self.pos;
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Ast { pos, node: Node::Neg(Box::new(inner)) });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast, ExprError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            let pos = self.pos;
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Ast { pos, node: Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)) });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Ast, ExprError> {
        let start = match self.peek() {
            None => return Err(ExprError::Syntax { pos: self.pos, expected: "expression" }),
            Some(_) => self.pos,
        };
        let c = self.bytes[start];
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            if !self.eat(b')') {
                return Err(ExprError::Syntax { pos: self.pos, expected: "`)`" });
            }
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            return self.name(start);
        }
        Err(ExprError::Syntax { pos: start, expected: "expression" })
    }

    fn number(&mut self, start: usize) -> Result<Ast, ExprError> {
        let digits = |p: &mut Self| {
            let from = p.pos;
            while p.pos < p.bytes.len() && p.bytes[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - from
        };
        let mut count = digits(self);
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            count += digits(self);
        }
        if count == 0 {
            return Err(ExprError::Syntax { pos: start, expected: "digit" });
        }
        if matches!(self.bytes.get(self.pos), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.bytes.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                return Err(ExprError::Syntax { pos: self.pos, expected: "exponent digits" });
            }
        }
        let text = &self.src[start..self.pos];
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax { pos: start, expected: "number" })?;
        if !value.is_finite() {
            return Err(ExprError::Domain { pos: start, what: "literal" });
        }
        Ok(Ast { pos: start, node: Node::Num(value) })
    }

    fn name(&mut self, start: usize) -> Result<Ast, ExprError> {
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if self.peek() == Some(b'(') {
            let func = Func::lookup(name)
                .ok_or_else(|| ExprError::UnknownIdentifier { name: name.to_string(), pos: start })?;
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(ExprError::Syntax { pos: self.pos, expected: "`,` or `)`" });
            }
            if args.len() != func.arity() {
                return Err(ExprError::Arity { name: func.name(), pos: start, expected: func.arity(), found: args.len() });
            }
            return Ok(Ast { pos: start, node: Node::Call(func, args) });
        }
        let var = match name {
            "t" => Var::T,
            "x" => Var::X,
            "y" => Var::Y,
            "w" => Var::W,
            _ => match name.strip_prefix('z').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 && !name[1..].starts_with('0') => Var::Z(k - 1),
                _ => return Err(ExprError::UnknownIdentifier { name: name.to_string(), pos: start }),
            },
        };
        Ok(Ast { pos: start, node: Node::Var(var) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(src: &str, x: f64, y: f64) -> f64 {
        parse_expression(src).unwrap().eval(&Env { x, y, ..Env::default() }).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(at("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(at("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(at("1 - 2 - 3", 0.0, 0.0), -4.0);
        assert_eq!(at("8 / 4 / 2", 0.0, 0.0), 1.0);
        assert_eq!(at("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(at("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(at("1.5e1 + .5", 0.0, 0.0), 15.5);
    }

    #[test]
    fn monotone_drift_example() {
        assert_eq!(at("-y + 0.1*tanh(x)", 1.0, 2.0), -2.0 + 0.1 * 1f64.tanh());
    }

    #[test]
    fn positioned_errors() {
        assert_eq!(parse_expression("min(x, "), Err(ExprError::Syntax { pos: 7, expected: "expression" }));
        assert_eq!(
            parse_expression("2 * q + 1"),
            Err(ExprError::UnknownIdentifier { name: "q".into(), pos: 4 })
        );
        assert_eq!(
            parse_expression("x + max(x)"),
            Err(ExprError::Arity { name: "max", pos: 4, expected: 2, found: 1 })
        );
        assert!(matches!(parse_expression("(x"), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(parse_expression("x y"), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(parse_expression("z0"), Err(ExprError::UnknownIdentifier { pos: 0, .. })));
    }

    #[test]
    fn domain_errors_carry_the_operator_position() {
        let e = parse_expression("x / y").unwrap();
        assert_eq!(e.eval(&Env { x: 1.0, ..Env::default() }), Err(ExprError::Domain { pos: 2, what: "quotient" }));
        let e = parse_expression("exp(1000)").unwrap();
        assert!(matches!(e.eval(&Env::default()), Err(ExprError::Domain { pos: 0, .. })));
    }

    #[test]
    fn variable_restriction() {
        let e = parse_expression("z1 + z3").unwrap();
        assert!(e.restrict(&[Var::Z(0)], 3).is_ok());
        assert_eq!(e.restrict(&[Var::Z(0)], 2), Err(ExprError::UnknownIdentifier { name: "z3".into(), pos: 5 }));
        let e = parse_expression("t * x").unwrap();
        assert_eq!(e.restrict(&[Var::T], 0), Err(ExprError::UnknownIdentifier { name: "x".into(), pos: 4 }));
    }
}
