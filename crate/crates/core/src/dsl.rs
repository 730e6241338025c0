//! Text model definitions.
//!
//! ```text
//! # two mutually repressive genes
//! [species]
//! x1, x2
//! [subnetwork]
//! x1
//! [params]
//! a = 4
//! n = 2
//! [derived]
//! h = a / 2
//! [equations]
//! x1 = a/(1 + x2^n) - x1
//! x2 = a/(1 + x1^n) - x2
//! [box]
//! x1 = 0:5
//! x2 = 0:5
//! ```
//!
//! Species not listed under `[subnetwork]` form the bulk. `[derived]` entries may use
//! params and earlier derived names; equations may use species, params and derived names.
//! Expressions support `+ - * / ^`, unary minus, parentheses and `exp`, `log`, `pow`.
//! `^` is right-associative and binds tighter than unary minus. Species without a `[box]`
//! line default to `0:10`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::system::{Model, Partition, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Pow,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Self> {
        match name {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "pow" => Some(Func::Pow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

const NEG_PRECEDENCE: u8 = 3;

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(op, _, _) => op.precedence(),
            Expr::Neg(_) => NEG_PRECEDENCE,
            _ => 5,
        }
    }

    /// Identifiers used by the expression, in first-use order.
    pub fn identifiers(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_identifiers(&mut out);
        out
    }

    fn collect_identifiers<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                if !out.contains(&v.as_str()) {
                    out.push(v);
                }
            }
            Expr::Neg(e) => e.collect_identifiers(out),
            Expr::Bin(_, a, b) => {
                a.collect_identifiers(out);
                b.collect_identifiers(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_identifiers(out)),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool| {
            if parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Neg(e) => {
                f.write_str("-")?;
                wrap(f, e, e.precedence() < NEG_PRECEDENCE)
            }
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                let (left, right) = if *op == BinOp::Pow {
                    (a.precedence() <= p, b.precedence() < p)
                } else {
                    (a.precedence() < p, b.precedence() <= p)
                };
                wrap(f, a, left)?;
                write!(f, " {} ", op.symbol())?;
                wrap(f, b, right)
            }
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

/// Evaluate with named bindings.
pub fn eval_expr(expr: &Expr, bindings: &HashMap<String, f64>) -> Result<f64> {
    let v = match expr {
        Expr::Num(v) => *v,
        Expr::Var(name) => *bindings
            .get(name)
            .ok_or_else(|| Error::Eval(format!("unbound identifier `{name}`")))?,
        Expr::Neg(e) => -eval_expr(e, bindings)?,
        Expr::Bin(op, a, b) => {
            let (x, y) = (eval_expr(a, bindings)?, eval_expr(b, bindings)?);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Eval("division by zero".into()));
                    }
                    x / y
                }
                BinOp::Pow => x.powf(y),
            }
        }
        Expr::Call(func, args) => {
            let x = eval_expr(&args[0], bindings)?;
            match func {
                Func::Exp => x.exp(),
                Func::Log => {
                    if x <= 0.0 {
                        return Err(Error::Eval(format!("log of non-positive value {x}")));
                    }
                    x.ln()
                }
                Func::Pow => x.powf(eval_expr(&args[1], bindings)?),
            }
        }
    };
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col0: usize,
    _src: &'a str,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize, col0: usize) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            line,
            col0,
            _src: src,
        }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>> {
        let mut out = Vec::new();
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let col = self.col0 + self.pos;
            if c.is_whitespace() {
                self.pos += 1;
            } else if c.is_ascii_digit() || (c == '.' && self.peek_digit(1)) {
                out.push((Tok::Num(self.number(col)?), col));
            } else if c.is_alphabetic() || c == '_' {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_alphanumeric()
                        || matches!(self.chars[self.pos], '_' | '.'))
                {
                    self.pos += 1;
                }
                out.push((
                    Tok::Ident(self.chars[start..self.pos].iter().collect()),
                    col,
                ));
            } else if "+-*/^(),".contains(c) {
                out.push((Tok::Sym(c), col));
                self.pos += 1;
            } else {
                return Err(parse_err(
                    self.line,
                    col,
                    format!("unexpected character `{c}`"),
                ));
            }
        }
        Ok(out)
    }

    fn peek_digit(&self, ahead: usize) -> bool {
        self.chars
            .get(self.pos + ahead)
            .is_some_and(|c| c.is_ascii_digit())
    }

    fn number(&mut self, col: usize) -> Result<f64> {
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.')
        {
            self.pos += 1;
        }
        if self.pos < self.chars.len() && matches!(self.chars[self.pos], 'e' | 'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.chars.len() && matches!(self.chars[self.pos], '+' | '-') {
                self.pos += 1;
            }
            if self.peek_digit(0) {
                while self.peek_digit(0) {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(parse_err(
                self.line,
                col,
                format!("invalid number `{text}`"),
            )),
        }
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |t| t.1)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        parse_err(self.line, self.col(), msg)
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr> {
        let mut lhs = self.prefix()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym('+')) => BinOp::Add,
                Some(Tok::Sym('-')) => BinOp::Sub,
                Some(Tok::Sym('*')) => BinOp::Mul,
                Some(Tok::Sym('/')) => BinOp::Div,
                Some(Tok::Sym('^')) => BinOp::Pow,
                _ => break,
            };
            let (lbp, rbp) = match op {
                BinOp::Add | BinOp::Sub => (1, 2),
                BinOp::Mul | BinOp::Div => (3, 4),
                BinOp::Pow => (7, 6),
            };
            if lbp < min_bp {
                break;
            }
            self.pos += 1;
            let rhs = self.expr(rbp)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr> {
        let col = self.col();
        match self.toks.get(self.pos).map(|t| t.0.clone()) {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Sym('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.expr(5)?)))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr(0)?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() != Some(&Tok::Sym('(')) {
                    return Ok(Expr::Var(name));
                }
                let func = Func::lookup(&name).ok_or_else(|| {
                    parse_err(self.line, col, format!("unknown function `{name}`"))
                })?;
                self.pos += 1;
                let mut args = vec![self.expr(0)?];
                while self.peek() == Some(&Tok::Sym(',')) {
                    self.pos += 1;
                    args.push(self.expr(0)?);
                }
                self.expect(')')?;
                if args.len() != func.arity() {
                    return Err(parse_err(
                        self.line,
                        col,
                        format!(
                            "`{name}` takes {} argument(s), got {}",
                            func.arity(),
                            args.len()
                        ),
                    ));
                }
                Ok(Expr::Call(func, args))
            }
            Some(Tok::Sym(c)) => Err(self.err(format!("unexpected `{c}`"))),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

/// Parse one expression; `line` and `col0` place error locations (1-based).
fn parse_expr_at(src: &str, line: usize, col0: usize) -> Result<Expr> {
    let toks = Lexer::new(src, line, col0).tokens()?;
    let mut p = Parser {
        toks,
        pos: 0,
        line,
        end_col: col0 + src.chars().count(),
    };
    let e = p.expr(0)?;
    if p.pos != p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

/// Parse a standalone expression (errors report line 1).
pub fn parse_expr(src: &str) -> Result<Expr> {
    parse_expr_at(src, 1, 1)
}

/// Validated model definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub species: Vec<String>,
    pub subnetwork: Vec<String>,
    pub params: Vec<(String, f64)>,
    pub derived: Vec<(String, Expr)>,
    /// One equation per species, in species order.
    pub equations: Vec<(String, Expr)>,
    pub phys_box: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Section {
    Species,
    Subnetwork,
    Params,
    Derived,
    Equations,
    Box,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && Func::lookup(s).is_none()
}

/// Parse and validate a model definition.
pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let mut section: Option<Section> = None;
    let mut species: Vec<(String, usize, usize)> = Vec::new();
    let mut subnetwork: Vec<(String, usize, usize)> = Vec::new();
    let mut params: Vec<(String, f64)> = Vec::new();
    let mut derived: Vec<(String, Expr, usize, usize)> = Vec::new();
    let mut equations: Vec<(String, Expr, usize, usize)> = Vec::new();
    let mut boxes: Vec<(String, (f64, f64), usize, usize)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("");
        let lead = content.chars().take_while(|c| c.is_whitespace()).count();
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = lead + 1;
        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') {
                return Err(parse_err(line, col, "unterminated section header"));
            }
            section = Some(match trimmed[1..trimmed.len() - 1].trim() {
                "species" => Section::Species,
                "subnetwork" => Section::Subnetwork,
                "params" => Section::Params,
                "derived" => Section::Derived,
                "equations" => Section::Equations,
                "box" => Section::Box,
                other => return Err(parse_err(line, col, format!("unknown section `{other}`"))),
            });
            continue;
        }
        let sec =
            section.ok_or_else(|| parse_err(line, col, "content before the first section"))?;
        match sec {
            Section::Species | Section::Subnetwork => {
                let list = if sec == Section::Species {
                    &mut species
                } else {
                    &mut subnetwork
                };
                let mut offset = 0;
                for piece in content.split(',') {
                    let name = piece.trim();
                    let at = offset + piece.chars().take_while(|c| c.is_whitespace()).count() + 1;
                    offset += piece.chars().count() + 1;
                    for (k, word) in name.split_whitespace().enumerate() {
                        let c = at
                            + if k == 0 {
                                0
                            } else {
                                name.find(word).unwrap_or(0)
                            };
                        if !is_ident(word) {
                            return Err(parse_err(
                                line,
                                c,
                                format!("invalid species name `{word}`"),
                            ));
                        }
                        list.push((word.to_string(), line, c));
                    }
                }
            }
            _ => {
                let eq = content
                    .find('=')
                    .ok_or_else(|| parse_err(line, col, "expected `name = value`"))?;
                let name = content[..eq].trim();
                if !is_ident(name) {
                    return Err(parse_err(line, col, format!("invalid name `{name}`")));
                }
                let rhs = &content[eq + 1..];
                let rhs_col = content[..eq + 1].chars().count() + 1;
                match sec {
                    Section::Params => {
                        let e = parse_expr_at(rhs, line, rhs_col)?;
                        let bound: HashMap<String, f64> = params.iter().cloned().collect();
                        let v = eval_expr(&e, &bound)
                            .map_err(|err| parse_err(line, rhs_col, err.to_string()))?;
                        if params.iter().any(|(n, _)| n == name) {
                            return Err(parse_err(
                                line,
                                col,
                                format!("duplicate parameter `{name}`"),
                            ));
                        }
                        params.push((name.to_string(), v));
                    }
                    Section::Derived => {
                        derived.push((
                            name.to_string(),
                            parse_expr_at(rhs, line, rhs_col)?,
                            line,
                            col,
                        ));
                    }
                    Section::Equations => {
                        equations.push((
                            name.to_string(),
                            parse_expr_at(rhs, line, rhs_col)?,
                            line,
                            col,
                        ));
                    }
                    Section::Box => {
                        let (lo, hi) = rhs
                            .split_once(':')
                            .ok_or_else(|| parse_err(line, rhs_col, "expected `lo:hi`"))?;
                        let num = |s: &str| -> Result<f64> {
                            let e = parse_expr_at(s, line, rhs_col)?;
                            eval_expr(&e, &HashMap::new())
                                .map_err(|err| parse_err(line, rhs_col, err.to_string()))
                        };
                        let (lo, hi) = (num(lo)?, num(hi)?);
                        if !(lo < hi) {
                            return Err(parse_err(line, rhs_col, "box needs lo < hi"));
                        }
                        boxes.push((name.to_string(), (lo, hi), line, col));
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    validate(species, subnetwork, params, derived, equations, boxes)
}

fn validate(
    species: Vec<(String, usize, usize)>,
    subnetwork: Vec<(String, usize, usize)>,
    params: Vec<(String, f64)>,
    derived: Vec<(String, Expr, usize, usize)>,
    equations: Vec<(String, Expr, usize, usize)>,
    boxes: Vec<(String, (f64, f64), usize, usize)>,
) -> Result<ModelConfig> {
    if species.is_empty() {
        return Err(parse_err(1, 1, "no species declared"));
    }
    let mut names: Vec<&str> = Vec::new();
    for (n, l, c) in &species {
        if names.contains(&n.as_str()) {
            return Err(parse_err(*l, *c, format!("duplicate species `{n}`")));
        }
        names.push(n);
    }
    for (n, l, c) in &subnetwork {
        if !names.contains(&n.as_str()) {
            return Err(parse_err(
                *l,
                *c,
                format!("subnetwork species `{n}` is not declared"),
            ));
        }
    }
    if subnetwork.is_empty() {
        return Err(parse_err(1, 1, "no subnetwork species"));
    }
    let mut scope: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for (n, e, l, c) in &derived {
        if let Some(bad) = e
            .identifiers()
            .into_iter()
            .find(|id| !scope.iter().any(|s| s == id))
        {
            return Err(parse_err(
                *l,
                *c,
                format!("undeclared identifier `{bad}` in `{n}`"),
            ));
        }
        if scope.contains(n) || names.contains(&n.as_str()) {
            return Err(parse_err(*l, *c, format!("`{n}` is already defined")));
        }
        scope.push(n.clone());
    }
    for (n, e, l, c) in &equations {
        if !names.contains(&n.as_str()) {
            return Err(parse_err(
                *l,
                *c,
                format!("equation for undeclared species `{n}`"),
            ));
        }
        if let Some(bad) = e
            .identifiers()
            .into_iter()
            .find(|id| !scope.iter().any(|s| s == id) && !names.contains(id))
        {
            return Err(parse_err(
                *l,
                *c,
                format!("undeclared identifier `{bad}` in equation for `{n}`"),
            ));
        }
    }
    let mut ordered = Vec::with_capacity(species.len());
    for (s, l, c) in &species {
        let mut found = equations.iter().filter(|(n, ..)| n == s);
        let first = found
            .next()
            .ok_or_else(|| parse_err(*l, *c, format!("no equation for species `{s}`")))?;
        if let Some((_, _, l2, c2)) = found.next() {
            return Err(parse_err(*l2, *c2, format!("duplicate equation for `{s}`")));
        }
        ordered.push((s.clone(), first.1.clone()));
    }
    let mut phys_box = vec![(0.0, 10.0); species.len()];
    for (n, b, l, c) in &boxes {
        let k = names
            .iter()
            .position(|s| s == n)
            .ok_or_else(|| parse_err(*l, *c, format!("box for undeclared species `{n}`")))?;
        phys_box[k] = *b;
    }
    Ok(ModelConfig {
        species: species.into_iter().map(|s| s.0).collect(),
        subnetwork: subnetwork.into_iter().map(|s| s.0).collect(),
        params,
        derived: derived.into_iter().map(|d| (d.0, d.1)).collect(),
        equations: ordered,
        phys_box,
    })
}

impl ModelConfig {
    /// Canonical text; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[species]\n");
        out.push_str(&self.species.join(", "));
        out.push_str("\n[subnetwork]\n");
        out.push_str(&self.subnetwork.join(", "));
        out.push_str("\n[params]\n");
        for (n, v) in &self.params {
            out.push_str(&format!("{n} = {v:?}\n"));
        }
        if !self.derived.is_empty() {
            out.push_str("[derived]\n");
            for (n, e) in &self.derived {
                out.push_str(&format!("{n} = {e}\n"));
            }
        }
        out.push_str("[equations]\n");
        for (n, e) in &self.equations {
            out.push_str(&format!("{n} = {e}\n"));
        }
        out.push_str("[box]\n");
        for (n, (lo, hi)) in self.species.iter().zip(&self.phys_box) {
            out.push_str(&format!("{n} = {lo:?}:{hi:?}\n"));
        }
        out
    }

    /// Build a system with parameter overrides and an optional partition
    /// (subnetwork names; the rest form the bulk).
    pub fn build(
        &self,
        id: &str,
        sub: Option<&[&str]>,
        overrides: &[(&str, f64)],
    ) -> Result<SystemSpec> {
        let mut params = self.params.clone();
        for (k, v) in overrides {
            let slot =
                params
                    .iter_mut()
                    .find(|(n, _)| n == k)
                    .ok_or_else(|| Error::UnknownParameter {
                        model: id.to_string(),
                        name: k.to_string(),
                    })?;
            slot.1 = *v;
        }
        let mut consts: HashMap<String, f64> = params.iter().cloned().collect();
        for (n, e) in &self.derived {
            let v = eval_expr(e, &consts)?;
            consts.insert(n.clone(), v);
        }
        let index = |name: &str| {
            self.species
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Error::UnknownSpecies(name.to_string()))
        };
        let sub_idx: Vec<usize> = match sub {
            Some(names) => names.iter().map(|n| index(n)).collect::<Result<_>>()?,
            None => self
                .subnetwork
                .iter()
                .map(|n| index(n))
                .collect::<Result<_>>()?,
        };
        let bulk_idx: Vec<usize> = (0..self.species.len())
            .filter(|k| !sub_idx.contains(k))
            .collect();
        let partition = Partition::new(self.species.len(), sub_idx, bulk_idx)?;
        let model = DslModel::compile(&self.species, &self.equations, &consts);
        let default_point = self
            .phys_box
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect();
        SystemSpec::builder(id, self.species.clone(), partition, Arc::new(model))
            .params(params)
            .phys_box(self.phys_box.clone())
            .default_point(default_point)
            .build()
    }
}

/// Expression with identifiers resolved to species slots or folded constants.
#[derive(Debug, Clone)]
enum Compiled {
    Num(f64),
    Slot(usize),
    Neg(Box<Compiled>),
    Bin(BinOp, Box<Compiled>, Box<Compiled>),
    Call(Func, Vec<Compiled>),
}

impl Compiled {
    fn new(e: &Expr, species: &[String], consts: &HashMap<String, f64>) -> Self {
        match e {
            Expr::Num(v) => Compiled::Num(*v),
            Expr::Var(n) => match species.iter().position(|s| s == n) {
                Some(k) => Compiled::Slot(k),
                None => Compiled::Num(consts[n]),
            },
            Expr::Neg(a) => Compiled::Neg(Box::new(Self::new(a, species, consts))),
            Expr::Bin(op, a, b) => Compiled::Bin(
                *op,
                Box::new(Self::new(a, species, consts)),
                Box::new(Self::new(b, species, consts)),
            ),
            Expr::Call(f, args) => Compiled::Call(
                *f,
                args.iter().map(|a| Self::new(a, species, consts)).collect(),
            ),
        }
    }

    /// Domain errors evaluate to NaN and surface as non-finite drift.
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Compiled::Num(v) => *v,
            Compiled::Slot(k) => x[*k],
            Compiled::Neg(a) => -a.eval(x),
            Compiled::Bin(op, a, b) => {
                let (p, q) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => p + q,
                    BinOp::Sub => p - q,
                    BinOp::Mul => p * q,
                    BinOp::Div if q == 0.0 => f64::NAN,
                    BinOp::Div => p / q,
                    BinOp::Pow => p.powf(q),
                }
            }
            Compiled::Call(f, args) => {
                let p = args[0].eval(x);
                match f {
                    Func::Exp => p.exp(),
                    Func::Log if p <= 0.0 => f64::NAN,
                    Func::Log => p.ln(),
                    Func::Pow => p.powf(args[1].eval(x)),
                }
            }
        }
    }
}

struct DslModel {
    equations: Vec<Compiled>,
}

impl DslModel {
    fn compile(
        species: &[String],
        equations: &[(String, Expr)],
        consts: &HashMap<String, f64>,
    ) -> Self {
        Self {
            equations: equations
                .iter()
                .map(|(_, e)| Compiled::new(e, species, consts))
                .collect(),
        }
    }
}

impl Model for DslModel {
    fn dim(&self) -> usize {
        self.equations.len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.equations) {
            *o = e.eval(x);
        }
    }
}

/// A zoo id or a parsed text model.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Zoo(String),
    Dsl { id: String, config: ModelConfig },
}

impl ModelSource {
    /// A zoo id, or else a path to a model file.
    pub fn resolve(name: &str) -> Result<Self> {
        if crate::zoo::ZOO_IDS.contains(&name) {
            return Ok(ModelSource::Zoo(name.to_string()));
        }
        let path = std::path::Path::new(name);
        if !path.is_file() {
            return Err(Error::UnknownModel(name.to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read model file `{name}`: {e}")))?;
        let id = path
            .file_stem()
            .map_or(name.to_string(), |s| s.to_string_lossy().into_owned());
        Ok(ModelSource::Dsl {
            id,
            config: parse_model(&text)?,
        })
    }

    pub fn id(&self) -> &str {
        match self {
            ModelSource::Zoo(id) => id,
            ModelSource::Dsl { id, .. } => id,
        }
    }

    pub fn build(&self, sub: Option<&[&str]>, overrides: &[(&str, f64)]) -> Result<SystemSpec> {
        match self {
            ModelSource::Zoo(id) => match sub {
                None => crate::zoo::zoo(id, overrides),
                Some(names) => {
                    let e = crate::zoo::entry(id)?;
                    let bulk: Vec<&str> = e
                        .species
                        .iter()
                        .copied()
                        .filter(|s| !names.contains(s))
                        .collect();
                    crate::zoo::zoo_with_partition(id, names, &bulk, overrides)
                }
            },
            ModelSource::Dsl { id, config } => config.build(id, sub, overrides),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(src: &str, vars: &[(&str, f64)]) -> f64 {
        let b = vars.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        eval_expr(&parse_expr(src).unwrap(), &b).unwrap()
    }

    #[test]
    fn arithmetic() {
        assert_eq!(eval("exp(0)", &[]), 1.0);
        assert_eq!(eval("4/(1+2^2)", &[]), 0.8);
        assert_eq!(eval("x^y", &[("x", 2.0), ("y", 10.0)]), 1024.0);
        assert_eq!(eval("2^3^2", &[]), 512.0);
        assert_eq!(eval("-2^2", &[]), -4.0);
        assert_eq!(eval("8/4/2", &[]), 1.0);
        assert_eq!(eval("1 - 2 - 3", &[]), -4.0);
        assert_eq!(eval("pow(3, 2) + log(exp(1.5))", &[]), 10.5);
        assert_eq!(eval("1.5e1 + .5", &[]), 15.5);
    }

    #[test]
    fn precedence_shape() {
        let e = parse_expr("a/(1+x2^n) - x1").unwrap();
        let Expr::Bin(BinOp::Sub, lhs, rhs) = e else {
            panic!("top must be subtraction")
        };
        assert_eq!(*rhs, Expr::Var("x1".into()));
        let Expr::Bin(BinOp::Div, _, den) = *lhs else {
            panic!("left must be division")
        };
        let Expr::Bin(BinOp::Add, _, pow) = *den else {
            panic!("denominator must be a sum")
        };
        assert!(matches!(*pow, Expr::Bin(BinOp::Pow, _, _)));
    }

    #[test]
    fn evaluation_errors() {
        let b = HashMap::new();
        assert!(matches!(
            eval_expr(&parse_expr("1/0").unwrap(), &b),
            Err(Error::Eval(_))
        ));
        assert!(matches!(
            eval_expr(&parse_expr("log(0)").unwrap(), &b),
            Err(Error::Eval(_))
        ));
        assert!(matches!(
            eval_expr(&parse_expr("q").unwrap(), &b),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_location() {
        match parse_expr("1 + * 2") {
            Err(Error::Parse {
                line: 1, column: 5, ..
            }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_expr("foo(1)").is_err());
        assert!(parse_expr("pow(1)").is_err());
        assert!(parse_expr("(1 + 2").is_err());
        assert!(parse_expr("1e999").is_err());
    }

    const BISTABLE: &str = "\
# bistable switch
[species]
x1, x2
[subnetwork]
x1
[params]
a = 4
n = 2
[equations]
x1 = a/(1 + x2^n) - x1
x2 = a/(1 + x1^n) - x2
";

    #[test]
    fn undeclared_identifier_is_named() {
        let text = BISTABLE.replace("x2 = a/(1 + x1^n) - x2", "x2 = a/(1 + x9^n) - x2");
        match parse_model(&text) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 11);
                assert!(message.contains("x9"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let dup = format!("{BISTABLE}x1 = 0\n");
        assert!(matches!(
            parse_model(&dup),
            Err(Error::Parse { line: 12, .. })
        ));
        let missing = BISTABLE.replace("x2 = a/(1 + x1^n) - x2\n", "");
        assert!(parse_model(&missing).is_err());
        let bad_sub = BISTABLE.replace("[subnetwork]\nx1", "[subnetwork]\nx3");
        assert!(matches!(
            parse_model(&bad_sub),
            Err(Error::Parse { line: 5, .. })
        ));
        assert!(parse_model("x = 1").is_err());
        assert!(parse_model("[wat]").is_err());
    }

    #[test]
    fn bistable_twin_matches_zoo() {
        let cfg = parse_model(BISTABLE).unwrap();
        let dsl = cfg.build("bistable-dsl", None, &[]).unwrap();
        let zoo = crate::zoo::zoo("bistable", &[]).unwrap();
        let mut rng = 0x1234_5678_u64;
        for _ in 0..20 {
            let x: Vec<f64> = (0..2)
                .map(|_| {
                    rng = rng
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (rng >> 11) as f64 / (1u64 << 53) as f64 * 5.0
                })
                .collect();
            let a = dsl.drift_full(&x).unwrap();
            let b = zoo.drift_full(&x).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let over = cfg.build("b", None, &[("a", 6.0)]).unwrap();
        assert_eq!(over.drift_full(&[0.0, 0.0]).unwrap(), vec![6.0, 6.0]);
        assert!(cfg.build("b", None, &[("zz", 1.0)]).is_err());
    }

    #[test]
    fn derived_inputs_and_dotted_names() {
        let text = "\
[species]
Nkx2.2 Olig2
[subnetwork]
Nkx2.2
[params]
p = 0.15
[derived]
x_in = exp(-p/0.15)
[equations]
Nkx2.2 = x_in - Nkx2.2
Olig2 = -Olig2
[box]
Nkx2.2 = 0:1
";
        let cfg = parse_model(text).unwrap();
        let s = cfg.build("t", None, &[]).unwrap();
        let d = s.drift_full(&[0.0, 0.0]).unwrap();
        assert!((d[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(s.phys_box()[0], (0.0, 1.0));
        assert_eq!(s.phys_box()[1], (0.0, 10.0));
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = parse_model(BISTABLE).unwrap();
        assert_eq!(parse_model(&cfg.to_text()).unwrap(), cfg);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0..1e6f64).prop_map(Expr::Num),
            prop::sample::select(vec!["x", "y", "k_1", "Nkx2.2"])
                .prop_map(|s| Expr::Var(s.to_string())),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop::sample::select(vec![
                        BinOp::Add,
                        BinOp::Sub,
                        BinOp::Mul,
                        BinOp::Div,
                        BinOp::Pow
                    ]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                inner.clone().prop_map(|e| Expr::Call(Func::Exp, vec![e])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Pow, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn printed_expressions_reparse_identically(e in arb_expr()) {
            let text = e.to_string();
            prop_assert_eq!(parse_expr(&text).unwrap(), e);
        }

        #[test]
        fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_model(&text);
            let _ = parse_expr(&text);
        }

        #[test]
        fn structured_noise_never_panics(
            lines in prop::collection::vec(
                prop::sample::select(vec![
                    "[species]", "[subnetwork]", "[params]", "[derived]", "[equations]", "[box]",
                    "x1, x2", "x1", "a = 4", "a = ", "= 3", "x1 = a/(1+x2^n) - x1", "x2 = -x2",
                    "x1 = 0:5", "x1 = 5:0", "n = 2 # c", "y = exp(", "((", "x2 = pow(x1)", "[",
                ]),
                0..14,
            )
        ) {
            let _ = parse_model(&lines.join("\n"));
        }
    }
}
