//! Arithmetic expression trees: recursive-descent parser, evaluator and a
//! canonical printer.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary (('^' | '**') unary)?
//! primary := number | func '(' expr ')' | ident | '(' expr ')'
//! ```
//!
//! Power is right-associative and binds tighter than a leading minus, so
//! `-x**2` is `-(x**2)`. Juxtaposition is not multiplication.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "**",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        match name {
            "exp" => Some(Func::Exp),
            "log" | "ln" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Variable(String),
    Neg(Box<Expr>),
    BinOp(BinOp, Box<Expr>, Box<Expr>),
    Func(Func, Box<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Number(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Variable(name.to_string())
    }

    pub fn negate(e: Expr) -> Expr {
        Expr::Neg(Box::new(e))
    }

    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::BinOp(op, Box::new(l), Box::new(r))
    }

    pub fn func(f: Func, arg: Expr) -> Expr {
        Expr::Func(f, Box::new(arg))
    }

    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Number(_) => {}
            Expr::Variable(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(e) | Expr::Func(_, e) => e.collect_vars(out),
            Expr::BinOp(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }

    /// Binding strength used by the printer; atoms are highest.
    fn precedence(&self) -> u8 {
        match self {
            Expr::BinOp(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::BinOp(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::BinOp(BinOp::Pow, ..) => 4,
            Expr::Number(_) | Expr::Variable(_) | Expr::Func(..) => 5,
        }
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, wrap: bool) -> fmt::Result {
    if wrap {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Canonical form: `**` for powers, minimal parentheses that preserve the
/// exact tree shape on re-parse.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) => write!(f, "{v}"),
            Expr::Variable(name) => f.write_str(name),
            Expr::Func(func, arg) => write!(f, "{}({arg})", func.name()),
            Expr::Neg(child) => {
                f.write_str("-")?;
                write_wrapped(f, child, child.precedence() < 3)
            }
            Expr::BinOp(BinOp::Pow, base, exponent) => {
                write_wrapped(f, base, base.precedence() < 5)?;
                f.write_str("**")?;
                write_wrapped(f, exponent, exponent.precedence() < 4)
            }
            Expr::BinOp(op, l, r) => {
                let p = self.precedence();
                write_wrapped(f, l, l.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                write_wrapped(f, r, r.precedence() <= p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unexpected character {ch:?} at position {pos}")]
    Lexical { pos: usize, ch: char },
    #[error("malformed number {text:?} at position {pos}")]
    BadNumber { pos: usize, text: String },
    #[error("unbalanced parentheses at position {pos}")]
    Unbalanced { pos: usize },
    #[error("unknown function {name:?} at position {pos}")]
    UnknownFunction { pos: usize, name: String },
    #[error("unexpected trailing input at position {pos}")]
    Trailing { pos: usize },
    #[error("unexpected end of input at position {pos}")]
    UnexpectedEnd { pos: usize },
    #[error("unexpected token at position {pos}")]
    UnexpectedToken { pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Pow,
    LParen,
    RParen,
}

fn lex(input: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let chars: Vec<(usize, char)> = input.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                if i < chars.len() && matches!(chars[i].1, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && matches!(chars[j].1, '+' | '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].1.is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].1.is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let end = chars.get(i).map_or(input.len(), |&(p, _)| p);
                let text = &input[pos..end];
                let value: f64 = text.parse().map_err(|_| ParseError::BadNumber {
                    pos,
                    text: text.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(ParseError::BadNumber {
                        pos,
                        text: text.to_string(),
                    });
                }
                debug_assert!(i > start);
                out.push((pos, Tok::Num(value)));
            }
            c if c.is_ascii_alphabetic() => {
                let end_idx = chars[i..]
                    .iter()
                    .position(|&(_, ch)| !(ch.is_ascii_alphanumeric() || ch == '_'))
                    .map_or(chars.len(), |n| i + n);
                let end = chars.get(end_idx).map_or(input.len(), |&(p, _)| p);
                out.push((pos, Tok::Ident(input[pos..end].to_string())));
                i = end_idx;
            }
            '+' => {
                out.push((pos, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((pos, Tok::Minus));
                i += 1;
            }
            '*' => {
                if chars.get(i + 1).map(|&(_, c)| c) == Some('*') {
                    out.push((pos, Tok::Pow));
                    i += 2;
                } else {
                    out.push((pos, Tok::Star));
                    i += 1;
                }
            }
            '/' => {
                out.push((pos, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((pos, Tok::Pow));
                i += 1;
            }
            '(' => {
                out.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((pos, Tok::RParen));
                i += 1;
            }
            other => return Err(ParseError::Lexical { pos, ch: other }),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map_or(self.end, |(p, _)| *p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(_, t)| t.clone());
        self.idx += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(Expr::negate(self.unary()?))
            }
            Some(Tok::Plus) => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Pow) {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::bin(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Number(v)),
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::LParen) {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                        pos,
                        name: name.clone(),
                    })?;
                    let open = self.pos();
                    self.bump();
                    let arg = self.expr()?;
                    self.close(open)?;
                    Ok(Expr::func(func, arg))
                } else {
                    Ok(Expr::Variable(name))
                }
            }
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.close(pos)?;
                Ok(inner)
            }
            Some(Tok::RParen) => Err(ParseError::Unbalanced { pos }),
            Some(_) => Err(ParseError::UnexpectedToken { pos }),
            None => Err(ParseError::UnexpectedEnd { pos }),
        }
    }

    fn close(&mut self, open: usize) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.bump();
                Ok(())
            }
            None => Err(ParseError::Unbalanced { pos: open }),
            Some(_) => Err(ParseError::UnexpectedToken { pos: self.pos() }),
        }
    }
}

pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut parser = Parser {
        toks,
        idx: 0,
        end: text.len(),
    };
    let expr = parser.expr()?;
    match parser.peek() {
        None => Ok(expr),
        Some(Tok::RParen) => Err(ParseError::Unbalanced { pos: parser.pos() }),
        Some(_) => Err(ParseError::Trailing { pos: parser.pos() }),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no binding for variable {0:?}")]
    Unbound(String),
    #[error("domain error: {0}")]
    Domain(&'static str),
}

/// Real-valued evaluation. Any non-finite intermediate is a domain error.
pub fn eval_expression(expr: &Expr, assignment: &HashMap<String, f64>) -> Result<f64, EvalError> {
    let v = match expr {
        Expr::Number(v) => *v,
        Expr::Variable(name) => *assignment
            .get(name)
            .ok_or_else(|| EvalError::Unbound(name.clone()))?,
        Expr::Neg(e) => -eval_expression(e, assignment)?,
        Expr::Func(func, arg) => {
            let a = eval_expression(arg, assignment)?;
            match func {
                Func::Exp => a.exp(),
                Func::Log if a <= 0.0 => {
                    return Err(EvalError::Domain("log of non-positive value"))
                }
                Func::Log => a.ln(),
                Func::Sqrt if a < 0.0 => return Err(EvalError::Domain("sqrt of negative value")),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
            }
        }
        Expr::BinOp(op, l, r) => {
            let a = eval_expression(l, assignment)?;
            let b = eval_expression(r, assignment)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div if b == 0.0 => return Err(EvalError::Domain("division by zero")),
                BinOp::Div => a / b,
                BinOp::Pow if a == 0.0 && b < 0.0 => {
                    return Err(EvalError::Domain("zero raised to a negative power"))
                }
                BinOp::Pow => a.powf(b),
            }
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::Domain("non-finite result"))
    }
}
