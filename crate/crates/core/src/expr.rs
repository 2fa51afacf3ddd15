//! Boolean condition language used on Condition branches.
//!
//! Grammar, lowest to highest precedence:
//!
//! ```text
//! expr       := and_expr ("or" and_expr)*
//! and_expr   := not_expr ("and" not_expr)*
//! not_expr   := "not" not_expr | comparison
//! comparison := primary (("==" | "!=" | "<" | "<=" | ">" | ">=") primary)?
//! primary    := number | string | "true" | "false" | identifier
//!             | "exists" "(" identifier ")" | "(" expr ")"
//! ```
//!
//! Comparisons do not chain: `a < b < c` is rejected.

use std::collections::BTreeMap;
use std::fmt;

use crate::value::{Number, Value, VarType, VariableStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Or(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Compare {
        op: CmpOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Exists(String),
    Literal(Value),
    Var(String),
}

impl Expr {
    pub fn or(a: Expr, b: Expr) -> Expr {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(a: Expr) -> Expr {
        Expr::Not(Box::new(a))
    }

    pub fn cmp(op: CmpOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Compare {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn num(n: i64) -> Expr {
        Expr::Literal(Value::Number(Number::from_int(n).expect("small literal")))
    }

    /// Variables whose values the expression reads. `exists(v)` only tests
    /// presence and is not counted.
    pub fn reads(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_reads(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_reads<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Or(a, b) | Expr::And(a, b) => {
                a.collect_reads(out);
                b.collect_reads(out);
            }
            Expr::Not(a) => a.collect_reads(out),
            Expr::Compare { lhs, rhs, .. } => {
                lhs.collect_reads(out);
                rhs.collect_reads(out);
            }
            Expr::Var(name) => out.push(name),
            Expr::Exists(_) | Expr::Literal(_) => {}
        }
    }
}

/// Fully parenthesized rendering; reparses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Or(a, b) => write!(f, "({a} or {b})"),
            Expr::And(a, b) => write!(f, "({a} and {b})"),
            Expr::Not(a) => write!(f, "(not {a})"),
            Expr::Compare { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Exists(name) => write!(f, "exists({name})"),
            Expr::Var(name) => f.write_str(name),
            Expr::Literal(Value::Number(n)) => write!(f, "{n}"),
            Expr::Literal(Value::Bool(b)) => write!(f, "{b}"),
            Expr::Literal(Value::Text(s)) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("at offset {offset}: expected {expected}, found {found}")]
    Unexpected {
        offset: usize,
        expected: &'static str,
        found: String,
    },
    #[error("at offset {offset}: unterminated string literal")]
    UnterminatedString { offset: usize },
    #[error("at offset {offset}: invalid number: {reason}")]
    BadNumber { offset: usize, reason: String },
}

impl ParseError {
    /// Byte offset in the source where parsing failed.
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Empty => 0,
            ParseError::Unexpected { offset, .. }
            | ParseError::UnterminatedString { offset }
            | ParseError::BadNumber { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(Number),
    Text(String),
    Op(CmpOp),
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Text(_) => "string".to_string(),
            Tok::Op(op) => format!("'{}'", op.symbol()),
            Tok::LParen => "'('".to_string(),
            Tok::RParen => "')'".to_string(),
            Tok::End => "end of input".to_string(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = src[i..].chars().next().expect("in bounds");
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let start = i;
        let two = bytes.get(i + 1).copied();
        let tok = match c {
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '=' if two == Some(b'=') => {
                i += 2;
                Tok::Op(CmpOp::Eq)
            }
            '!' if two == Some(b'=') => {
                i += 2;
                Tok::Op(CmpOp::Ne)
            }
            '<' | '>' => {
                let or_equal = two == Some(b'=');
                i += if or_equal { 2 } else { 1 };
                Tok::Op(match (c, or_equal) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                })
            }
            '"' => {
                i += 1;
                let mut text = String::new();
                loop {
                    let Some(ch) = src[i..].chars().next() else {
                        return Err(ParseError::UnterminatedString { offset: start });
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = src[i..].chars().next() else {
                                return Err(ParseError::UnterminatedString { offset: start });
                            };
                            i += esc.len_utf8();
                            text.push(esc);
                        }
                        ch => text.push(ch),
                    }
                }
                Tok::Text(text)
            }
            c if c.is_ascii_digit() || (c == '-' && two.is_some_and(|b| b.is_ascii_digit())) => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let lexeme = &src[start..i];
                let n = lexeme.parse::<Number>().map_err(|e| ParseError::BadNumber {
                    offset: start,
                    reason: e.to_string(),
                })?;
                Tok::Number(n)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                Tok::Ident(src[start..i].to_string())
            }
            other => {
                return Err(ParseError::Unexpected {
                    offset: start,
                    expected: "expression",
                    found: format!("character {other:?}"),
                })
            }
        };
        toks.push((tok, start));
    }
    toks.push((Tok::End, src.len()));
    Ok(toks)
}

const KEYWORDS: [&str; 6] = ["and", "or", "not", "true", "false", "exists"];

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let tok = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        tok
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        ParseError::Unexpected {
            offset: self.offset(),
            expected,
            found: self.peek().describe(),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &'static str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.at_keyword("or") {
            self.bump();
            let rhs = self.and_expr()?;
            lhs = Expr::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.not_expr()?;
        while self.at_keyword("and") {
            self.bump();
            let rhs = self.not_expr()?;
            lhs = Expr::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.at_keyword("not") {
            self.bump();
            return Ok(Expr::not(self.not_expr()?));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.primary()?;
        let Tok::Op(op) = *self.peek() else {
            return Ok(lhs);
        };
        self.bump();
        let rhs = self.primary()?;
        if matches!(self.peek(), Tok::Op(_)) {
            return Err(self.unexpected("'and', 'or', ')' or end of input (comparisons do not chain)"));
        }
        Ok(Expr::cmp(op, lhs, rhs))
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Number(n) => {
                self.bump();
                Ok(Expr::Literal(Value::Number(n)))
            }
            Tok::Text(s) => {
                self.bump();
                Ok(Expr::Literal(Value::Text(s)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or_expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "true" | "false" => {
                    self.bump();
                    Ok(Expr::Literal(Value::Bool(name == "true")))
                }
                "exists" => {
                    self.bump();
                    self.expect(Tok::LParen, "'(' after exists")?;
                    let var = match self.peek().clone() {
                        Tok::Ident(v) if !KEYWORDS.contains(&v.as_str()) => {
                            self.bump();
                            v
                        }
                        _ => return Err(self.unexpected("variable name")),
                    };
                    self.expect(Tok::RParen, "')'")?;
                    Ok(Expr::Exists(var))
                }
                kw if KEYWORDS.contains(&kw) => Err(self.unexpected("operand")),
                _ => {
                    self.bump();
                    Ok(Expr::Var(name))
                }
            },
            _ => Err(self.unexpected("operand")),
        }
    }
}

/// Parses condition source text.
pub fn parse_expr(source: &str) -> Result<Expr, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let toks = lex(source)?;
    let mut parser = Parser { toks, pos: 0 };
    let expr = parser.or_expr()?;
    if *parser.peek() != Tok::End {
        return Err(parser.unexpected("'and', 'or' or end of input"));
    }
    Ok(expr)
}

/// Declared variable types visible to a condition.
#[derive(Debug, Clone, Default)]
pub struct TypeEnv {
    vars: BTreeMap<String, VarType>,
}

impl TypeEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, ty: VarType) {
        self.vars.insert(name.into(), ty);
    }

    pub fn get(&self, name: &str) -> Option<VarType> {
        self.vars.get(name).copied()
    }
}

impl<S: Into<String>> FromIterator<(S, VarType)> for TypeEnv {
    fn from_iter<I: IntoIterator<Item = (S, VarType)>>(iter: I) -> Self {
        TypeEnv {
            vars: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct TypeError {
    pub message: String,
}

fn type_error(message: String) -> TypeError {
    TypeError { message }
}

/// Checks that `expr` is a well-typed boolean condition under `env`.
pub fn typecheck_expr(expr: &Expr, env: &TypeEnv) -> Result<(), Vec<TypeError>> {
    let mut errors = Vec::new();
    if let Some(ty) = infer(expr, env, &mut errors) {
        if ty != VarType::Boolean {
            errors.push(type_error(format!("condition is {ty}, expected boolean")));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn infer(expr: &Expr, env: &TypeEnv, errors: &mut Vec<TypeError>) -> Option<VarType> {
    match expr {
        Expr::Or(a, b) | Expr::And(a, b) => {
            let word = if matches!(expr, Expr::Or(..)) { "or" } else { "and" };
            for side in [a, b] {
                if let Some(ty) = infer(side, env, errors) {
                    if ty != VarType::Boolean {
                        errors.push(type_error(format!(
                            "connective '{word}' on non-boolean operand {side} ({ty})"
                        )));
                    }
                }
            }
            Some(VarType::Boolean)
        }
        Expr::Not(a) => {
            if let Some(ty) = infer(a, env, errors) {
                if ty != VarType::Boolean {
                    errors.push(type_error(format!(
                        "connective 'not' on non-boolean operand {a} ({ty})"
                    )));
                }
            }
            Some(VarType::Boolean)
        }
        Expr::Compare { op, lhs, rhs } => {
            let l = infer(lhs, env, errors);
            let r = infer(rhs, env, errors);
            if let (Some(l), Some(r)) = (l, r) {
                if op.is_ordering() {
                    if l != VarType::Number || r != VarType::Number {
                        errors.push(type_error(format!(
                            "ordering '{}' on mixed {l}/{r}; both sides must be number",
                            op.symbol()
                        )));
                    }
                } else if l != r {
                    errors.push(type_error(format!(
                        "'{}' compares {l} with {r}",
                        op.symbol()
                    )));
                }
            }
            Some(VarType::Boolean)
        }
        Expr::Exists(_) => Some(VarType::Boolean),
        Expr::Literal(v) => Some(v.var_type()),
        Expr::Var(name) => match env.get(name) {
            Some(ty) => Some(ty),
            None => {
                errors.push(type_error(format!("undeclared variable '{name}'")));
                None
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("variable '{0}' is not set")]
    MissingVariable(String),
    #[error("store value does not match declared type: {0}")]
    TypeMismatch(String),
}

/// Evaluates a typechecked condition against a store.
pub fn eval_expr(expr: &Expr, store: &VariableStore) -> Result<bool, EvalError> {
    match eval_value(expr, store)? {
        Value::Bool(b) => Ok(b),
        other => Err(EvalError::TypeMismatch(format!("{expr} evaluated to {other}"))),
    }
}

fn eval_value(expr: &Expr, store: &VariableStore) -> Result<Value, EvalError> {
    Ok(match expr {
        Expr::Or(a, b) => Value::Bool(eval_expr(a, store)? || eval_expr(b, store)?),
        Expr::And(a, b) => Value::Bool(eval_expr(a, store)? && eval_expr(b, store)?),
        Expr::Not(a) => Value::Bool(!eval_expr(a, store)?),
        Expr::Exists(name) => Value::Bool(store.contains(name)),
        Expr::Literal(v) => v.clone(),
        Expr::Var(name) => store
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::MissingVariable(name.clone()))?,
        Expr::Compare { op, lhs, rhs } => {
            let l = eval_value(lhs, store)?;
            let r = eval_value(rhs, store)?;
            let result = match (op, &l, &r) {
                (CmpOp::Eq, _, _) if l.var_type() == r.var_type() => l == r,
                (CmpOp::Ne, _, _) if l.var_type() == r.var_type() => l != r,
                (_, Value::Number(a), Value::Number(b)) => match op {
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                    CmpOp::Eq | CmpOp::Ne => unreachable!("handled above"),
                },
                _ => {
                    return Err(EvalError::TypeMismatch(format!(
                        "cannot apply '{}' to {l:?} and {r:?}",
                        op.symbol()
                    )))
                }
            };
            Value::Bool(result)
        }
    })
}
