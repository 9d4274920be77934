//! Concrete syntax.
//!
//! ```text
//! program   ::= classdecl* (decl ";")* expr
//! classdecl ::= "class" CNAME "{" (type FNAME ";")* method* "}"
//! method    ::= type MNAME "(" params ")" "{" expr "}"
//! expr      ::= prim ("." IDENT "(" args ")" | "." IDENT)* ["=" expr]
//! prim      ::= IDENT | INT | #N | "new" CNAME "(" args ")" | block | "(" expr ")"
//! block     ::= "{" (decl ";" | expr ";")* expr "}" ["^" "[" idlist "]"]
//! decl      ::= ["a"] type IDENT "=" expr
//! ```
//!
//! `e; e'` abbreviates a block with an unused plain declaration `T _=e`,
//! where `T` is the statically apparent type of `e`. A top-level sequence of
//! declarations without surrounding braces is read as a block. Identifiers may
//! carry an explicit unique id as `x#3`; `#3` alone is an object identifier.

use std::fmt;

use thiserror::Error;

use crate::ast::{
    block_annotation, name, AnnotPolicy, Block, ClassDef, ClassTable, Decl, DeclType, Expr, Ident,
    MethodSig, Name, ObjId, Param, Qualifier, INT,
};

/// Display name of the binder introduced by sequencing sugar.
pub const SEQ_VAR: &str = "_";

const UNKNOWN_TYPE: &str = "?";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub ct: ClassTable,
    pub main: Expr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{pos}: {msg}")]
pub struct ParseError {
    pub pos: Pos,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String, u32),
    Int(i64),
    Oid(u64),
    Sym(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s, 0) => write!(f, "`{s}`"),
            Tok::Ident(s, id) => write!(f, "`{s}#{id}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Oid(n) => write!(f, "`#{n}`"),
            Tok::Sym(c) => write!(f, "`{c}`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let advance = |i: &mut usize, line: &mut usize, col: &mut usize, c: char| {
        *i += 1;
        if c == '\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
    };
    let digits = |chars: &[char], mut j: usize| {
        let start = j;
        while j < chars.len() && chars[j].is_ascii_digit() {
            j += 1;
        }
        (chars[start..j].iter().collect::<String>(), j)
    };
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col, c);
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
                col += 1;
            }
            continue;
        }
        let err = |msg: String| ParseError { pos, msg };
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let mut id = 0;
            if chars.get(i) == Some(&'#') && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) {
                let (ds, j) = digits(&chars, i + 1);
                id = ds
                    .parse()
                    .map_err(|_| err(format!("identifier id `{ds}` out of range")))?;
                i = j;
            }
            col += i - start;
            out.push((Tok::Ident(word, id), pos));
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let neg = c == '-';
            let (ds, j) = digits(&chars, if neg { i + 1 } else { i });
            let text = if neg { format!("-{ds}") } else { ds };
            let n = text
                .parse()
                .map_err(|_| err(format!("integer literal `{text}` out of range")))?;
            col += j - i;
            i = j;
            out.push((Tok::Int(n), pos));
        } else if c == '#' {
            let (ds, j) = digits(&chars, i + 1);
            if ds.is_empty() {
                return Err(err("expected digits after `#`".into()));
            }
            let n = ds
                .parse()
                .map_err(|_| err(format!("object identifier `#{ds}` out of range")))?;
            col += j - i;
            i = j;
            out.push((Tok::Oid(n), pos));
        } else if "{}()[];,.=^".contains(c) {
            out.push((Tok::Sym(c), pos));
            advance(&mut i, &mut line, &mut col, c);
        } else {
            return Err(err(format!("unexpected character `{c}`")));
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    policy: AnnotPolicy,
    seq_ids: u32,
}

impl Parser {
    fn peek(&self, k: usize) -> &Tok {
        let i = (self.at + k).min(self.toks.len() - 1);
        &self.toks[i].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at.min(self.toks.len() - 1)].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.peek(0).clone();
        if self.at < self.toks.len() - 1 {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn is_sym(&self, k: usize, c: char) -> bool {
        *self.peek(k) == Tok::Sym(c)
    }

    fn expect_sym(&mut self, c: char) -> Result<(), ParseError> {
        if self.is_sym(0, c) {
            self.bump();
            Ok(())
        } else {
            self.fail(format!("expected `{c}`, found {}", self.peek(0)))
        }
    }

    fn ident(&mut self, what: &str) -> Result<Ident, ParseError> {
        match self.peek(0).clone() {
            Tok::Ident(s, id) if !is_keyword(&s) => {
                self.bump();
                Ok(Ident::with_id(&s, id))
            }
            t => self.fail(format!("expected {what}, found {t}")),
        }
    }

    fn plain_name(&mut self, what: &str) -> Result<Name, ParseError> {
        match self.peek(0).clone() {
            Tok::Ident(s, 0) if !is_keyword(&s) || s == INT => {
                self.bump();
                Ok(name(&s))
            }
            t => self.fail(format!("expected {what}, found {t}")),
        }
    }

    fn is_word(&self, k: usize, w: &str) -> bool {
        matches!(self.peek(k), Tok::Ident(s, 0) if s == w)
    }

    fn is_ident(&self, k: usize) -> bool {
        matches!(self.peek(k), Tok::Ident(s, _) if !is_keyword(s) || s == INT)
    }

    /// Declaration lookahead: `T x =` or `a T x =`.
    fn at_decl(&self) -> bool {
        (self.is_ident(0) && self.is_ident(1) && self.is_sym(2, '='))
            || (self.is_word(0, "a") && self.is_ident(1) && self.is_ident(2) && self.is_sym(3, '='))
    }

    fn decl_type(&mut self) -> Result<DeclType, ParseError> {
        let qual = if self.is_word(0, "a") && self.is_ident(1) && self.is_ident(2) {
            self.bump();
            Qualifier::Affine
        } else {
            Qualifier::Plain
        };
        Ok(DeclType {
            qual,
            class: self.plain_name("a type")?,
        })
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut ct = ClassTable::default();
        while self.is_word(0, "class") {
            self.bump();
            let cname = self.plain_name("a class name")?;
            if ct.class(&cname).is_some() {
                return self.fail(format!("class {cname} declared twice"));
            }
            let def = self.class_body()?;
            ct.classes.push((cname, def));
        }
        let main = self.sequence(true)?;
        if *self.peek(0) != Tok::Eof {
            return self.fail(format!("expected end of input, found {}", self.peek(0)));
        }
        Ok(Program { ct, main })
    }

    fn class_body(&mut self) -> Result<ClassDef, ParseError> {
        self.expect_sym('{')?;
        let mut def = ClassDef::default();
        while !self.is_sym(0, '}') {
            let ty = self.plain_name("a type")?;
            let member = self.plain_name("a member name")?;
            if self.is_sym(0, ';') {
                self.bump();
                if def.field_index(&member).is_some() {
                    return self.fail(format!("field {member} declared twice"));
                }
                def.fields.push((ty, member));
                continue;
            }
            self.expect_sym('(')?;
            let mut params = Vec::new();
            while !self.is_sym(0, ')') {
                if !params.is_empty() {
                    self.expect_sym(',')?;
                }
                let pty = self.decl_type()?;
                let var = self.ident("a parameter name")?;
                params.push(Param { ty: pty, var });
            }
            self.bump();
            self.expect_sym('{')?;
            let body = self.sequence(false)?;
            self.expect_sym('}')?;
            if def.methods.contains_key(&member) {
                return self.fail(format!("method {member} declared twice"));
            }
            def.methods.insert(
                member,
                MethodSig {
                    ret: ty,
                    params,
                    body,
                },
            );
        }
        self.bump();
        Ok(def)
    }

    /// Declarations and statements followed by a final expression. When
    /// `top` is false the caller consumes the closing brace.
    fn sequence(&mut self, top: bool) -> Result<Expr, ParseError> {
        let mut decls = Vec::new();
        loop {
            if self.at_decl() {
                let ty = self.decl_type()?;
                let var = self.ident("a variable")?;
                self.expect_sym('=')?;
                let init = self.expr()?;
                self.expect_sym(';')?;
                decls.push(Decl::new(ty, var, init));
                continue;
            }
            let e = self.expr()?;
            if self.is_sym(0, ';') {
                self.bump();
                self.seq_ids += 1;
                let var = Ident::with_id(SEQ_VAR, self.seq_ids);
                decls.push(Decl::new(DeclType::plain(UNKNOWN_TYPE), var, e));
                continue;
            }
            let end_ok = if top {
                *self.peek(0) == Tok::Eof
            } else {
                self.is_sym(0, '}')
            };
            if !end_ok {
                return self.fail(format!(
                    "expected `;` or end of block, found {}",
                    self.peek(0)
                ));
            }
            if decls.is_empty() && top {
                return Ok(e);
            }
            let mut b = Block::new(decls, e, Default::default());
            b.annot = block_annotation(&b, self.policy);
            return Ok(Expr::Block(b));
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.prim()?;
        let mut last_field = false;
        while self.is_sym(0, '.') {
            self.bump();
            let m = self.plain_name("a field or method name")?;
            if self.is_sym(0, '(') {
                let args = self.args()?;
                e = Expr::Invoke(Box::new(e), m, args);
                last_field = false;
            } else {
                e = Expr::FieldAccess(Box::new(e), m);
                last_field = true;
            }
        }
        if self.is_sym(0, '=') {
            if !last_field {
                return self.fail("assignment target must be a field access");
            }
            self.bump();
            let rhs = self.expr()?;
            let Expr::FieldAccess(recv, f) = e else {
                unreachable!()
            };
            e = Expr::FieldAssign(recv, f, Box::new(rhs));
        }
        Ok(e)
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect_sym('(')?;
        let mut args = Vec::new();
        while !self.is_sym(0, ')') {
            if !args.is_empty() {
                self.expect_sym(',')?;
            }
            args.push(self.expr()?);
        }
        self.bump();
        Ok(args)
    }

    fn prim(&mut self) -> Result<Expr, ParseError> {
        match self.peek(0).clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(Expr::Int(n))
            }
            Tok::Oid(n) => {
                self.bump();
                Ok(Expr::Oid(ObjId(n)))
            }
            Tok::Ident(s, 0) if s == "new" => {
                self.bump();
                let c = self.plain_name("a class name")?;
                let args = self.args()?;
                Ok(Expr::New(c, args))
            }
            Tok::Ident(..) => Ok(Expr::Var(self.ident("an expression")?)),
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(')')?;
                Ok(e)
            }
            Tok::Sym('{') => {
                self.bump();
                let e = self.sequence(false)?;
                self.expect_sym('}')?;
                let mut b = match e {
                    Expr::Block(b) => b,
                    body => Block::new(Vec::new(), body, Default::default()),
                };
                if self.is_sym(0, '^') {
                    self.bump();
                    self.expect_sym('[')?;
                    let mut annot = std::collections::BTreeSet::new();
                    while !self.is_sym(0, ']') {
                        if !annot.is_empty() {
                            self.expect_sym(',')?;
                        }
                        annot.insert(self.ident("a variable")?);
                    }
                    self.bump();
                    b.annot = annot;
                }
                Ok(Expr::Block(b))
            }
            t => self.fail(format!("expected an expression, found {t}")),
        }
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(s, "new" | "class" | "int")
}

/// Parses a program, filling missing block annotations with `policy`.
pub fn parse_program(src: &str, policy: AnnotPolicy) -> Result<Program, ParseError> {
    let mut p = Parser {
        toks: lex(src)?,
        at: 0,
        policy,
        seq_ids: 0,
    };
    let mut prog = p.program()?;
    resolve_seq_types(&mut prog);
    Ok(prog)
}

/// Parses a bare expression (no class declarations) with the reach policy.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let prog = parse_program(src, AnnotPolicy::Reach)?;
    if !prog.ct.classes.is_empty() {
        return Err(ParseError {
            pos: Pos { line: 1, col: 1 },
            msg: "unexpected class declaration".into(),
        });
    }
    Ok(prog.main)
}

// ---------------------------------------------------------------------------
// Apparent types for sequencing sugar

fn resolve_seq_types(prog: &mut Program) {
    let ct = prog.ct.clone();
    for (cname, def) in prog.ct.classes.iter_mut() {
        for sig in def.methods.values_mut() {
            let mut env: Vec<(Ident, Name)> = vec![(Ident::this(), cname.clone())];
            env.extend(
                sig.params
                    .iter()
                    .map(|p| (p.var.clone(), p.ty.class.clone())),
            );
            fix_expr(&mut sig.body, &ct, &mut env);
        }
    }
    fix_expr(&mut prog.main, &ct, &mut Vec::new());
}

fn fix_expr(e: &mut Expr, ct: &ClassTable, env: &mut Vec<(Ident, Name)>) {
    match e {
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => {}
        Expr::FieldAccess(r, _) => fix_expr(r, ct, env),
        Expr::FieldAssign(r, _, v) => {
            fix_expr(r, ct, env);
            fix_expr(v, ct, env);
        }
        Expr::New(_, args) => args.iter_mut().for_each(|a| fix_expr(a, ct, env)),
        Expr::Invoke(r, _, args) => {
            fix_expr(r, ct, env);
            args.iter_mut().for_each(|a| fix_expr(a, ct, env));
        }
        Expr::Block(b) => {
            let mark = env.len();
            for d in &b.decls {
                env.push((d.var.clone(), d.ty.class.clone()));
            }
            for i in 0..b.decls.len() {
                fix_expr(&mut b.decls[i].init, ct, env);
                if &*b.decls[i].ty.class == UNKNOWN_TYPE {
                    let t = apparent_type(&b.decls[i].init, ct, env);
                    b.decls[i].ty.class = t.clone();
                    if let Some(slot) = env[mark..].iter_mut().find(|(x, _)| *x == b.decls[i].var) {
                        slot.1 = t;
                    }
                }
            }
            fix_expr(&mut b.body, ct, env);
            env.truncate(mark);
        }
    }
}

/// Best-effort static type of an expression; `int` when nothing is known.
pub fn apparent_type(e: &Expr, ct: &ClassTable, env: &[(Ident, Name)]) -> Name {
    apparent(e, ct, env).unwrap_or_else(|| name(INT))
}

fn apparent(e: &Expr, ct: &ClassTable, env: &[(Ident, Name)]) -> Option<Name> {
    let field_ty = |recv: &Expr, f: &str| -> Option<Name> {
        let owner = apparent(recv, ct, env);
        let lookup = |c: &str| {
            ct.fields(c)
                .and_then(|fs| fs.iter().find(|(_, n)| &**n == f).map(|(t, _)| t.clone()))
        };
        owner
            .as_deref()
            .and_then(lookup)
            .or_else(|| ct.classes.iter().find_map(|(c, _)| lookup(c)))
    };
    match e {
        Expr::Var(x) => env
            .iter()
            .rev()
            .find(|(y, _)| y == x)
            .map(|(_, t)| t.clone()),
        Expr::Int(_) => Some(name(INT)),
        Expr::Oid(_) => None,
        Expr::New(c, _) => Some(c.clone()),
        Expr::FieldAccess(r, f) => field_ty(r, f),
        Expr::FieldAssign(r, f, _) => field_ty(r, f),
        Expr::Invoke(r, m, _) => {
            let owner = apparent(r, ct, env);
            owner
                .as_deref()
                .and_then(|c| ct.method(c, m))
                .or_else(|| ct.classes.iter().find_map(|(_, d)| d.methods.get(m)))
                .map(|sig| sig.ret.clone())
        }
        Expr::Block(b) => {
            let mut env2: Vec<(Ident, Name)> = env.to_vec();
            env2.extend(b.decls.iter().map(|d| (d.var.clone(), d.ty.class.clone())));
            apparent(&b.body, ct, &env2)
        }
    }
}
