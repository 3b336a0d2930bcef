//! Hand-rolled lexer and recursive-descent parser for `.tdl` sources.

use super::*;
use crate::error::TdlError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(Rat),
    LParen,
    RParen,
    LBrack,
    RBrack,
    Comma,
    Semi,
    Colon,
    Arrow,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Num(n) => write!(f, "{}", fmt_rat(*n)),
            Tok::LParen => write!(f, "("),
            Tok::RParen => write!(f, ")"),
            Tok::LBrack => write!(f, "["),
            Tok::RBrack => write!(f, "]"),
            Tok::Comma => write!(f, ","),
            Tok::Semi => write!(f, ";"),
            Tok::Colon => write!(f, ":"),
            Tok::Arrow => write!(f, "->"),
            Tok::Plus => write!(f, "+"),
            Tok::Minus => write!(f, "-"),
            Tok::Star => write!(f, "*"),
            Tok::Slash => write!(f, "/"),
            Tok::Eof => write!(f, "<eof>"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

type Spanned = (Tok, usize, usize);

fn lex(src: &str) -> Result<Vec<Spanned>, TdlError> {
    let mut lx = Lexer {
        src: src.as_bytes(),
        pos: 0,
        line: 1,
        col: 1,
    };
    let mut out = Vec::new();
    loop {
        let (tok, line, col) = lx.next_token()?;
        let eof = tok == Tok::Eof;
        out.push((tok, line, col));
        if eof {
            return Ok(out);
        }
    }
}

impl<'a> Lexer<'a> {
    fn bump(&mut self) -> u8 {
        let b = self.src[self.pos];
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        b
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn next_token(&mut self) -> Result<Spanned, TdlError> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        if b == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
        let (line, col) = (self.line, self.col);
        let Some(b) = self.peek() else {
            return Ok((Tok::Eof, line, col));
        };
        let tok = match b {
            b'(' => {
                self.bump();
                Tok::LParen
            }
            b')' => {
                self.bump();
                Tok::RParen
            }
            b'[' => {
                self.bump();
                Tok::LBrack
            }
            b']' => {
                self.bump();
                Tok::RBrack
            }
            b',' => {
                self.bump();
                Tok::Comma
            }
            b';' => {
                self.bump();
                Tok::Semi
            }
            b':' => {
                self.bump();
                Tok::Colon
            }
            b'+' => {
                self.bump();
                Tok::Plus
            }
            b'*' => {
                self.bump();
                Tok::Star
            }
            b'/' => {
                self.bump();
                Tok::Slash
            }
            b'-' => {
                self.bump();
                if self.peek() == Some(b'>') {
                    self.bump();
                    Tok::Arrow
                } else {
                    Tok::Minus
                }
            }
            b'0'..=b'9' => {
                let mut int = 0i64;
                while let Some(d @ b'0'..=b'9') = self.peek() {
                    self.bump();
                    int = int * 10 + i64::from(d - b'0');
                }
                if self.peek() == Some(b'.') {
                    self.bump();
                    let mut frac = 0i64;
                    let mut scale = 1i64;
                    while let Some(d @ b'0'..=b'9') = self.peek() {
                        self.bump();
                        frac = frac * 10 + i64::from(d - b'0');
                        scale *= 10;
                    }
                    Tok::Num(Rat::new(int * scale + frac, scale))
                } else {
                    Tok::Num(Rat::from_integer(int))
                }
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                let start = self.pos;
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || c == b'_' {
                        self.bump();
                    } else {
                        break;
                    }
                }
                Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
            }
            other => {
                return Err(TdlError::Syntax {
                    line,
                    col,
                    expected: "a token".into(),
                    found: (other as char).to_string(),
                })
            }
        };
        Ok((tok, line, col))
    }
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    current_op: String,
}

/// Parse a `.tdl` source into a validated program.
pub fn parse_tdl(src: &str) -> Result<Program, TdlError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        current_op: String::new(),
    };
    let mut defs = Vec::new();
    while p.peek() != &Tok::Eof {
        defs.push(p.def()?);
    }
    let program = Program::new(defs)?;
    for d in &program.defs {
        super::validate(d)?;
    }
    Ok(program)
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> TdlError {
        let (tok, line, col) = &self.toks[self.pos];
        TdlError::Syntax {
            line: *line,
            col: *col,
            expected: expected.to_string(),
            found: tok.to_string(),
        }
    }

    fn expect(&mut self, t: Tok) -> Result<(), TdlError> {
        if self.peek() == &t {
            self.next();
            Ok(())
        } else {
            Err(self.err(&format!("`{t}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, TdlError> {
        match self.peek() {
            Tok::Ident(_) => match self.next() {
                Tok::Ident(s) => Ok(s),
                _ => unreachable!(),
            },
            _ => Err(self.err(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), TdlError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.next();
                Ok(())
            }
            _ => Err(self.err(&format!("`{kw}`"))),
        }
    }

    fn def(&mut self) -> Result<OperatorDef, TdlError> {
        self.keyword("def")?;
        let name = self.ident("operator name")?;
        self.current_op = name.clone();
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if self.peek() != &Tok::RParen {
            loop {
                let pname = self.ident("parameter name")?;
                self.expect(Tok::LParen)?;
                let rank = match self.next() {
                    Tok::Num(n) if n.is_integer() && *n.numer() >= 0 => *n.numer() as usize,
                    _ => return Err(self.err("tensor rank")),
                };
                self.expect(Tok::RParen)?;
                params.push(Param { name: pname, rank });
                if self.peek() == &Tok::Comma {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::Arrow)?;
        self.keyword("lambda")?;
        let output_vars = self.var_list(Tok::Colon)?;
        self.expect(Tok::Colon)?;
        let body = self.expr()?;
        let (reducer, reduce_vars) = match &body {
            Expr::Reduce(r, vars, _) => (Some(*r), vars.clone()),
            _ => (None, Vec::new()),
        };
        Ok(OperatorDef {
            name,
            params,
            output_vars,
            reduce_vars,
            reducer,
            body,
        })
    }

    /// Comma-separated identifiers, stopping (possibly empty) before `end`.
    fn var_list(&mut self, end: Tok) -> Result<Vec<String>, TdlError> {
        let mut vars = Vec::new();
        if self.peek() == &end {
            return Ok(vars);
        }
        loop {
            vars.push(self.ident("index variable")?);
            if self.peek() == &Tok::Comma {
                self.next();
            } else {
                break;
            }
        }
        Ok(vars)
    }

    fn expr(&mut self) -> Result<Expr, TdlError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ArithOp::Add,
                Tok::Minus => ArithOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Arith(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, TdlError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => ArithOp::Mul,
                Tok::Slash => ArithOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.factor()?;
            lhs = fold(op, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, TdlError> {
        if self.peek() == &Tok::Minus {
            self.next();
            let inner = self.factor()?;
            return Ok(match inner {
                Expr::Const(c) => Expr::Const(-c),
                e => Expr::Arith(ArithOp::Sub, Box::new(Expr::Const(Rat::from_integer(0))), Box::new(e)),
            });
        }
        match self.peek().clone() {
            Tok::Num(n) => {
                self.next();
                Ok(Expr::Const(n))
            }
            Tok::LParen => {
                self.next();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(id) if id == "reduce" => {
                self.next();
                self.expect(Tok::LParen)?;
                let r = match self.ident("reducer")?.as_str() {
                    "Sum" => Reducer::Sum,
                    "Max" => Reducer::Max,
                    "Min" => Reducer::Min,
                    "Prod" => Reducer::Prod,
                    _ => return Err(self.err("one of Sum, Max, Min, Prod")),
                };
                self.expect(Tok::Semi)?;
                let vars = self.var_list(Tok::Semi)?;
                if vars.is_empty() {
                    return Err(self.err("reduction variables"));
                }
                self.expect(Tok::Semi)?;
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(Expr::Reduce(r, vars, Box::new(inner)))
            }
            Tok::Ident(id) if id == "opaque" => {
                self.next();
                self.expect(Tok::LParen)?;
                let func = self.ident("opaque function name")?;
                self.expect(Tok::Semi)?;
                let tensor = self.ident("tensor name")?;
                self.expect(Tok::LBrack)?;
                let mut args = Vec::new();
                loop {
                    if self.peek() == &Tok::Colon {
                        self.next();
                        args.push(OpaqueArg::Slice);
                    } else {
                        let e = self.expr()?;
                        args.push(OpaqueArg::Index(self.affine(e)?));
                    }
                    if self.peek() == &Tok::Comma {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBrack)?;
                self.expect(Tok::RParen)?;
                let mut result_vars = Vec::new();
                if self.peek() == &Tok::LBrack {
                    self.next();
                    result_vars = self.var_list(Tok::RBrack)?;
                    self.expect(Tok::RBrack)?;
                }
                Ok(Expr::Opaque(OpaqueCall {
                    func,
                    tensor,
                    args,
                    result_vars,
                }))
            }
            Tok::Ident(_) => {
                let name = self.ident("identifier")?;
                if self.peek() == &Tok::LBrack {
                    self.next();
                    let mut indices = Vec::new();
                    loop {
                        let e = self.expr()?;
                        indices.push(self.affine(e)?);
                        if self.peek() == &Tok::Comma {
                            self.next();
                        } else {
                            break;
                        }
                    }
                    self.expect(Tok::RBrack)?;
                    Ok(Expr::Access {
                        tensor: name,
                        indices,
                    })
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.err("an expression")),
        }
    }

    /// Normalize an expression used in index position to an affine form with
    /// integer coefficients.
    fn affine(&self, e: Expr) -> Result<IndexExpr, TdlError> {
        let lin = linearize(&e).ok_or_else(|| TdlError::NonAffineIndex {
            op: self.current_op.clone(),
            detail: e.to_string(),
        })?;
        let mut terms = Vec::new();
        for (v, c) in lin.terms {
            if c == Rat::from_integer(0) {
                continue;
            }
            if !c.is_integer() {
                return Err(TdlError::NonAffineIndex {
                    op: self.current_op.clone(),
                    detail: format!("non-integral coefficient in {e}"),
                });
            }
            terms.push((v, *c.numer()));
        }
        if !lin.offset.is_integer() {
            return Err(TdlError::NonAffineIndex {
                op: self.current_op.clone(),
                detail: format!("non-integral offset in {e}"),
            });
        }
        Ok(IndexExpr {
            terms,
            offset: *lin.offset.numer(),
        })
    }
}

/// Fold constant division so that rationals printed as `a/b` re-parse to the
/// same constant.
fn fold(op: ArithOp, lhs: Expr, rhs: Expr) -> Result<Expr, TdlError> {
    if op == ArithOp::Div {
        if let (Expr::Const(a), Expr::Const(b)) = (&lhs, &rhs) {
            if *b.numer() == 0 {
                return Err(TdlError::DivByZero);
            }
            return Ok(Expr::Const(a / b));
        }
    }
    Ok(Expr::Arith(op, Box::new(lhs), Box::new(rhs)))
}

struct Linear {
    terms: Vec<(String, Rat)>,
    offset: Rat,
}

impl Linear {
    fn constant(c: Rat) -> Self {
        Linear {
            terms: Vec::new(),
            offset: c,
        }
    }

    fn add_term(&mut self, v: &str, c: Rat) {
        if let Some((_, e)) = self.terms.iter_mut().find(|(n, _)| n == v) {
            *e += c;
        } else {
            self.terms.push((v.to_string(), c));
        }
    }

    fn scale(mut self, c: Rat) -> Self {
        for (_, e) in &mut self.terms {
            *e *= c;
        }
        self.offset *= c;
        self
    }

    fn is_const(&self) -> bool {
        self.terms.iter().all(|(_, c)| *c == Rat::from_integer(0))
    }
}

fn linearize(e: &Expr) -> Option<Linear> {
    match e {
        Expr::Const(c) => Some(Linear::constant(*c)),
        Expr::Var(v) => {
            let mut l = Linear::constant(Rat::from_integer(0));
            l.add_term(v, Rat::from_integer(1));
            Some(l)
        }
        Expr::Arith(ArithOp::Add, a, b) => {
            let mut la = linearize(a)?;
            let lb = linearize(b)?;
            for (v, c) in lb.terms {
                la.add_term(&v, c);
            }
            la.offset += lb.offset;
            Some(la)
        }
        Expr::Arith(ArithOp::Sub, a, b) => {
            let mut la = linearize(a)?;
            let lb = linearize(b)?;
            for (v, c) in lb.terms {
                la.add_term(&v, -c);
            }
            la.offset -= lb.offset;
            Some(la)
        }
        Expr::Arith(ArithOp::Mul, a, b) => {
            let la = linearize(a)?;
            let lb = linearize(b)?;
            if la.is_const() {
                Some(lb.scale(la.offset))
            } else if lb.is_const() {
                Some(la.scale(lb.offset))
            } else {
                None
            }
        }
        Expr::Arith(ArithOp::Div, a, b) => {
            let la = linearize(a)?;
            let lb = linearize(b)?;
            if lb.is_const() && lb.offset != Rat::from_integer(0) {
                Some(la.scale(Rat::from_integer(1) / lb.offset))
            } else {
                None
            }
        }
        _ => None,
    }
}
