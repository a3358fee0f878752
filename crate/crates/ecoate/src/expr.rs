//! A tiny expression language for tilt-basis functions `xi(y, a, x)`.
//!
//! Source sites describe the sufficient statistics of their outcome tilt as
//! textual expressions over the observation variables, e.g. `x1*log(y)` or
//! `a*log(y)`. Expressions travel inside protocol messages, so the formatter
//! is canonical: `parse(format(t))` reproduces `t` structurally for every
//! tree the parser can produce, and constants are printed with full
//! round-trip precision so a formatted expression evaluates bit-for-bit the
//! same after transport.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := factor ('*' factor)*
//! factor  := '-' factor | power
//! power   := atom ('^' ['-'] number)*
//! atom    := number | ident | ('log' | 'exp') '(' expr ')' | '(' expr ')'
//! ident   := 'a' | 'y' | 'x' digits      (x1 .. xd, 1-based)
//! ```
//!
//! `a - b` is represented as `Add(a, Neg(b))`; exponents are numeric
//! literals, not subtrees.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A variable reference inside an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Covariate `x{j}`, 1-based.
    X(usize),
    /// Treatment indicator `a`.
    A,
    /// Outcome `y`.
    Y,
}

/// Unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Log,
    Exp,
}

/// Expression tree. Binary subtraction is `Add` + `Neg`; exponents of `Pow`
/// are literal constants so powers stay analytically simple.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    Var(Var),
    Neg(Box<ExprAst>),
    Add(Box<ExprAst>, Box<ExprAst>),
    Mul(Box<ExprAst>, Box<ExprAst>),
    Pow(Box<ExprAst>, f64),
    Call(Func, Box<ExprAst>),
}

impl ExprAst {
    pub fn constant(c: f64) -> Self {
        ExprAst::Const(c)
    }

    pub fn var(v: Var) -> Self {
        ExprAst::Var(v)
    }

    /// Product of a list of factors, left-associated. Panics on empty input.
    pub fn product(factors: Vec<ExprAst>) -> Self {
        let mut it = factors.into_iter();
        let first = it.next().expect("product of no factors");
        it.fold(first, |acc, f| ExprAst::Mul(Box::new(acc), Box::new(f)))
    }

    /// Evaluate at an observation. `x` is the covariate vector, `a` the
    /// treatment, `y` the outcome. Any non-finite intermediate aborts with
    /// an error rather than leaking NaN into downstream algebra.
    pub fn evaluate(&self, x: &[f64], a: f64, y: f64) -> Result<f64> {
        let v = self.eval_inner(x, a, y)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("expression `{self}`")))
        }
    }

    fn eval_inner(&self, x: &[f64], a: f64, y: f64) -> Result<f64> {
        let v = match self {
            ExprAst::Const(c) => *c,
            ExprAst::Var(Var::X(j)) => *x.get(j - 1).ok_or_else(|| Error::UnknownVariable {
                name: format!("x{j}"),
                dim: x.len(),
            })?,
            ExprAst::Var(Var::A) => a,
            ExprAst::Var(Var::Y) => y,
            ExprAst::Neg(e) => -e.eval_inner(x, a, y)?,
            ExprAst::Add(l, r) => l.eval_inner(x, a, y)? + r.eval_inner(x, a, y)?,
            ExprAst::Mul(l, r) => l.eval_inner(x, a, y)? * r.eval_inner(x, a, y)?,
            ExprAst::Pow(b, e) => b.eval_inner(x, a, y)?.powf(*e),
            ExprAst::Call(Func::Log, e) => {
                let v = e.eval_inner(x, a, y)?;
                if v <= 0.0 {
                    return Err(Error::Domain {
                        context: format!("{self}"),
                        message: format!("log of non-positive value {v}"),
                    });
                }
                v.ln()
            }
            ExprAst::Call(Func::Exp, e) => e.eval_inner(x, a, y)?.exp(),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("expression `{self}`")))
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            ExprAst::Add(..) => 1,
            ExprAst::Neg(..) => 2,
            ExprAst::Mul(..) => 3,
            ExprAst::Pow(..) => 4,
            _ => 5,
        }
    }

    fn write(&self, out: &mut String) {
        match self {
            ExprAst::Const(c) => {
                // Shortest decimal that parses back to the same f64; for a
                // negative constant fall back to the unary-minus rendering.
                if *c < 0.0 {
                    ExprAst::Neg(Box::new(ExprAst::Const(-c))).write(out);
                } else {
                    let _ = write!(out, "{c}");
                }
            }
            ExprAst::Var(Var::X(j)) => {
                let _ = write!(out, "x{j}");
            }
            ExprAst::Var(Var::A) => out.push('a'),
            ExprAst::Var(Var::Y) => out.push('y'),
            ExprAst::Neg(inner) => {
                out.push('-');
                // `-a*b` would re-parse as `(-a)*b`, so negated sums and
                // products keep their parentheses.
                let parens = matches!(**inner, ExprAst::Add(..) | ExprAst::Mul(..));
                self.write_child(inner, parens, out);
            }
            ExprAst::Add(l, r) => {
                self.write_child(l, false, out);
                if let ExprAst::Neg(inner) = &**r {
                    out.push('-');
                    let parens = matches!(**inner, ExprAst::Add(..) | ExprAst::Mul(..));
                    self.write_child(inner, parens, out);
                } else {
                    out.push('+');
                    self.write_child(r, r.precedence() <= 1, out);
                }
            }
            ExprAst::Mul(l, r) => {
                // Left-associated chains print bare; a nested right factor or
                // a sum needs parentheses to re-parse identically.
                let lp = l.precedence() < 3 && !matches!(**l, ExprAst::Neg(..));
                self.write_child(l, lp, out);
                out.push('*');
                let rp = matches!(**r, ExprAst::Add(..) | ExprAst::Mul(..));
                self.write_child(r, rp, out);
            }
            ExprAst::Pow(b, e) => {
                self.write_child(b, b.precedence() < 4, out);
                out.push('^');
                if *e < 0.0 {
                    let _ = write!(out, "-{}", -e);
                } else {
                    let _ = write!(out, "{e}");
                }
            }
            ExprAst::Call(f, arg) => {
                out.push_str(match f {
                    Func::Log => "log",
                    Func::Exp => "exp",
                });
                out.push('(');
                arg.write(out);
                out.push(')');
            }
        }
    }

    fn write_child(&self, child: &ExprAst, parens: bool, out: &mut String) {
        if parens {
            out.push('(');
            child.write(out);
            out.push(')');
        } else {
            child.write(out);
        }
    }
}

impl std::fmt::Display for ExprAst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        self.write(&mut s);
        f.write_str(&s)
    }
}

/// Canonical textual form of an expression.
pub fn format_expr(e: &ExprAst) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Parser: hand-written recursive descent over a token stream.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn error(&self, pos: usize, message: impl Into<String>) -> Error {
        Error::Syntax {
            position: pos,
            message: message.into(),
        }
    }

    fn next_tok(&mut self) -> Result<Option<(usize, Tok)>> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len() && (self.src[end].is_ascii_digit() || self.src[end] == b'.') {
                    end += 1;
                }
                // exponent part: e/E [+-] digits
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        while e < self.src.len() && self.src[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text
                    .parse()
                    .map_err(|_| self.error(start, format!("invalid number `{text}`")))?;
                if !v.is_finite() {
                    return Err(self.error(start, format!("number `{text}` overflows f64")));
                }
                self.pos = end;
                Tok::Num(v)
            }
            b'a'..=b'z' | b'A'..=b'Z' => {
                let mut end = self.pos;
                while end < self.src.len() && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_') {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap().to_string();
                self.pos = end;
                Tok::Ident(text)
            }
            _ => {
                return Err(self.error(start, format!("unexpected character `{}`", c as char)));
            }
        };
        Ok(Some((start, tok)))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
    dim: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map(|(p, _)| *p).unwrap_or(self.len)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(_, t)| t.clone());
        self.idx += 1;
        t
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            position: self.pos(),
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<ExprAst> {
        let mut node = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    node = ExprAst::Add(Box::new(node), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    node = ExprAst::Add(Box::new(node), Box::new(ExprAst::Neg(Box::new(rhs))));
                }
                _ => break,
            }
        }
        Ok(node)
    }

    fn term(&mut self) -> Result<ExprAst> {
        let mut node = self.factor()?;
        while matches!(self.peek(), Some(Tok::Star)) {
            self.bump();
            let rhs = self.factor()?;
            node = ExprAst::Mul(Box::new(node), Box::new(rhs));
        }
        Ok(node)
    }

    fn factor(&mut self) -> Result<ExprAst> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            let inner = self.factor()?;
            return Ok(ExprAst::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprAst> {
        let mut node = self.atom()?;
        while matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let neg = if matches!(self.peek(), Some(Tok::Minus)) {
                self.bump();
                true
            } else {
                false
            };
            match self.bump() {
                Some(Tok::Num(e)) => {
                    let e = if neg { -e } else { e };
                    node = ExprAst::Pow(Box::new(node), e);
                }
                _ => {
                    self.idx -= 1;
                    return Err(self.err("exponent must be a numeric literal"));
                }
            }
        }
        Ok(node)
    }

    fn atom(&mut self) -> Result<ExprAst> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(ExprAst::Const(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "a" => Ok(ExprAst::Var(Var::A)),
                "y" => Ok(ExprAst::Var(Var::Y)),
                "log" | "exp" => {
                    let f = if name == "log" { Func::Log } else { Func::Exp };
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            self.idx -= 1;
                            return Err(self.err(format!("expected `(` after `{name}`")));
                        }
                    }
                    let arg = self.expr()?;
                    match self.bump() {
                        Some(Tok::RParen) => {}
                        _ => {
                            self.idx -= 1;
                            return Err(self.err("expected `)` to close function call"));
                        }
                    }
                    Ok(ExprAst::Call(f, Box::new(arg)))
                }
                _ => {
                    if let Some(rest) = name.strip_prefix('x') {
                        if let Ok(j) = rest.parse::<usize>() {
                            if j >= 1 && j <= self.dim {
                                return Ok(ExprAst::Var(Var::X(j)));
                            }
                        }
                    }
                    Err(Error::UnknownVariable {
                        name,
                        dim: self.dim,
                    })
                }
            },
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => {
                        self.idx -= 1;
                        Err(self.err("expected `)`"))
                    }
                }
            }
            Some(_) => Err(Error::Syntax {
                position: pos,
                message: "expected a number, variable, function call, or `(`".into(),
            }),
            None => Err(Error::Syntax {
                position: pos,
                message: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Parse an expression over covariates `x1..x{dim}`, `a`, and `y`.
pub fn parse(src: &str, dim: usize) -> Result<ExprAst> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next_tok()? {
        toks.push(t);
    }
    if toks.is_empty() {
        return Err(Error::Syntax {
            position: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        toks,
        idx: 0,
        dim,
        len: src.len(),
    };
    let ast = p.expr()?;
    if p.idx != p.toks.len() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(ast)
}

// ---------------------------------------------------------------------------
// Basis vectors
// ---------------------------------------------------------------------------

/// A non-empty list of pairwise-distinct expressions: the sufficient
/// statistic `xi(y, a, x)` of one source's outcome tilt.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisVector {
    exprs: Vec<ExprAst>,
}

impl BasisVector {
    pub fn new(exprs: Vec<ExprAst>) -> Result<Self> {
        if exprs.is_empty() {
            return Err(Error::InvalidData("basis vector must be non-empty".into()));
        }
        for i in 0..exprs.len() {
            for j in (i + 1)..exprs.len() {
                if exprs[i] == exprs[j] {
                    return Err(Error::InvalidData(format!(
                        "basis entries {i} and {j} are structurally identical (`{}`)",
                        exprs[i]
                    )));
                }
            }
        }
        Ok(BasisVector { exprs })
    }

    /// Parse a comma-separated list of expressions.
    pub fn parse_list(src: &str, dim: usize) -> Result<Self> {
        let exprs = src
            .split(',')
            .map(|s| parse(s.trim(), dim))
            .collect::<Result<Vec<_>>>()?;
        BasisVector::new(exprs)
    }

    /// Rebuild from canonical textual forms (e.g. out of a protocol message).
    pub fn from_strings(forms: &[String], dim: usize) -> Result<Self> {
        let exprs = forms.iter().map(|s| parse(s, dim)).collect::<Result<Vec<_>>>()?;
        BasisVector::new(exprs)
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn exprs(&self) -> &[ExprAst] {
        &self.exprs
    }

    /// Canonical textual forms, suitable for transport.
    pub fn to_strings(&self) -> Vec<String> {
        self.exprs.iter().map(format_expr).collect()
    }

    /// Evaluate every entry at an observation, writing into `out`.
    pub fn evaluate_into(&self, x: &[f64], a: f64, y: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.exprs.len());
        for (slot, e) in out.iter_mut().zip(&self.exprs) {
            *slot = e.evaluate(x, a, y)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64], a: f64, y: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.exprs.len()];
        self.evaluate_into(x, a, y, &mut out)?;
        Ok(out)
    }
}

impl Serialize for BasisVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BasisVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Transported forms never reference covariates beyond what the
        // expression itself names, so parse with a generous dimension and let
        // dataset-level validation catch genuine mismatches at evaluation.
        let forms = Vec::<String>::deserialize(d)?;
        BasisVector::from_strings(&forms, usize::MAX).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn p(src: &str) -> ExprAst {
        parse(src, 3).unwrap()
    }

    #[test]
    fn parses_product_with_log() {
        let ast = p("x1*log(y)");
        let expect = ExprAst::Mul(
            Box::new(ExprAst::Var(Var::X(1))),
            Box::new(ExprAst::Call(Func::Log, Box::new(ExprAst::Var(Var::Y)))),
        );
        assert_eq!(ast, expect);
    }

    #[test]
    fn evaluates_at_observation() {
        let ast = p("x1*log(y)");
        let v = ast.evaluate(&[2.0, 0.0, 0.0], 1.0, std::f64::consts::E).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn formats_unit_constant_bare() {
        assert_eq!(format_expr(&ExprAst::Const(1.0)), "1");
        assert_eq!(format_expr(&ExprAst::Const(0.5)), "0.5");
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse("log(y", 1).unwrap_err() {
            Error::Syntax { position, .. } => assert_eq!(position, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_variable_out_of_dimension() {
        match parse("x9", 2).unwrap_err() {
            Error::UnknownVariable { name, dim } => {
                assert_eq!(name, "x9");
                assert_eq!(dim, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(parse("x0", 2), Err(Error::UnknownVariable { .. })));
    }

    #[test]
    fn log_domain_error() {
        let ast = p("log(y)");
        assert!(matches!(
            ast.evaluate(&[0.0; 3], 0.0, 0.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let ast = p("exp(y)");
        assert!(matches!(
            ast.evaluate(&[0.0; 3], 0.0, 1e9),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn whitespace_insensitive() {
        assert_eq!(p(" x1 * log( y ) "), p("x1*log(y)"));
    }

    #[test]
    fn subtraction_and_unary_minus() {
        let ast = p("y-2");
        assert_eq!(
            ast,
            ExprAst::Add(
                Box::new(ExprAst::Var(Var::Y)),
                Box::new(ExprAst::Neg(Box::new(ExprAst::Const(2.0))))
            )
        );
        let neg = p("-y^2");
        assert_eq!(
            neg,
            ExprAst::Neg(Box::new(ExprAst::Pow(Box::new(ExprAst::Var(Var::Y)), 2.0)))
        );
    }

    #[test]
    fn basis_rejects_duplicates_and_empty() {
        assert!(BasisVector::new(vec![]).is_err());
        assert!(BasisVector::new(vec![p("y"), p("y")]).is_err());
        assert!(BasisVector::parse_list("log(y), a*log(y)", 1).is_ok());
    }

    /// Random parser-reachable tree: non-negative finite constants, variables
    /// within dimension, and every operator the grammar can produce.
    fn random_ast(rng: &mut StdRng, depth: usize, dim: usize) -> ExprAst {
        let leaf = depth == 0 || rng.gen_bool(0.3);
        if leaf {
            if rng.gen_bool(0.5) {
                // constants with a spread of magnitudes, always non-negative
                let mag = rng.gen_range(-3i32..4) as f64;
                let c = rng.gen_range(0.0..10.0f64) * 10f64.powf(mag);
                ExprAst::Const(c)
            } else {
                match rng.gen_range(0..3) {
                    0 => ExprAst::Var(Var::A),
                    1 => ExprAst::Var(Var::Y),
                    _ => ExprAst::Var(Var::X(rng.gen_range(1..=dim))),
                }
            }
        } else {
            let l = Box::new(random_ast(rng, depth - 1, dim));
            match rng.gen_range(0..6) {
                0 => ExprAst::Add(l, Box::new(random_ast(rng, depth - 1, dim))),
                1 => ExprAst::Mul(l, Box::new(random_ast(rng, depth - 1, dim))),
                2 => ExprAst::Neg(l),
                3 => {
                    let e = [2.0, 3.0, 0.5, 1.5, -2.0][rng.gen_range(0..5)];
                    ExprAst::Pow(l, e)
                }
                4 => ExprAst::Call(Func::Log, l),
                _ => ExprAst::Call(Func::Exp, l),
            }
        }
    }

    #[test]
    fn format_parse_roundtrip_on_random_trees() {
        let mut rng = StdRng::seed_from_u64(0x5eed_cafe);
        for i in 0..100 {
            let t = random_ast(&mut rng, 4, 3);
            let s = format_expr(&t);
            let back = parse(&s, 3).unwrap_or_else(|e| panic!("tree {i}: `{s}` failed: {e}"));
            assert_eq!(back, t, "tree {i}: `{s}` re-parsed differently");
        }
    }

    #[test]
    fn formatted_constants_roundtrip_exactly() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let c: f64 = rng.gen::<f64>() * 10f64.powi(rng.gen_range(-8..9));
            let t = ExprAst::Const(c);
            let s = format_expr(&t);
            match parse(&s, 1).unwrap() {
                ExprAst::Const(back) => assert_eq!(back.to_bits(), c.to_bits(), "`{s}`"),
                other => panic!("expected constant, got {other:?}"),
            }
        }
    }

    #[test]
    fn basis_strings_roundtrip() {
        let b = BasisVector::parse_list("x1*log(y), x1*a*log(y)", 1).unwrap();
        let forms = b.to_strings();
        assert_eq!(forms, vec!["x1*log(y)", "x1*a*log(y)"]);
        let back = BasisVector::from_strings(&forms, 1).unwrap();
        assert_eq!(b, back);
    }
}
