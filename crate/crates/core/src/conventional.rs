//! Reduction with a global heap: object identifiers are values, `new`
//! allocates, and declarations are elaborated left to right by substitution.

use std::collections::BTreeMap;
use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{collapse_empty_blocks, ClassTable, Decl, DeclType, Expr, Ident, Name, ObjId};
use crate::print::{render_with, Namer, Style};

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ObjState {
    pub class: Name,
    /// Each slot is an [`Expr::Oid`] or an [`Expr::Int`].
    pub slots: Vec<Expr>,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Memory {
    pub objs: BTreeMap<ObjId, ObjState>,
    pub next: u64,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    /// Allocates the next serial.
    pub fn alloc(&mut self, class: Name, slots: Vec<Expr>) -> ObjId {
        let id = ObjId(self.next);
        self.next += 1;
        self.objs.insert(id, ObjState { class, slots });
        id
    }

    /// Reserves a serial whose state is filled in later with [`Memory::set`].
    pub fn reserve(&mut self, class: Name) -> ObjId {
        self.alloc(class, Vec::new())
    }

    pub fn set(&mut self, id: ObjId, slots: Vec<Expr>) {
        if let Some(o) = self.objs.get_mut(&id) {
            o.slots = slots;
        }
    }

    pub fn get(&self, id: ObjId) -> Option<&ObjState> {
        self.objs.get(&id)
    }

    pub fn contains(&self, id: ObjId) -> bool {
        self.objs.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.objs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objs.is_empty()
    }

    /// Every identifier stored in a slot is allocated.
    pub fn is_closed(&self) -> bool {
        self.objs
            .values()
            .flat_map(|o| &o.slots)
            .all(|s| !matches!(s, Expr::Oid(i) if !self.contains(*i)))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Config {
    pub expr: Expr,
    pub mem: Memory,
}

impl Config {
    pub fn new(expr: Expr) -> Config {
        Config {
            expr,
            mem: Memory::new(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CRule {
    New,
    FieldAccess,
    FieldAssign,
    Invk,
    Dec,
}

impl CRule {
    pub fn as_str(self) -> &'static str {
        match self {
            CRule::New => "new",
            CRule::FieldAccess => "field-access",
            CRule::FieldAssign => "field-assign",
            CRule::Invk => "invk",
            CRule::Dec => "dec",
        }
    }
}

impl fmt::Display for CRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum CStuck {
    #[error("free variable {0} at the redex")]
    FreeVariable(Ident),
    #[error("dangling object identifier {0}")]
    Dangling(ObjId),
    #[error("{0} is not an object")]
    NotAnObject(String),
    #[error("class {class} has no field {field}")]
    UnknownField { class: Name, field: Name },
    #[error("class {class} has no method {method} with {arity} parameters")]
    UnknownMethod {
        class: Name,
        method: Name,
        arity: usize,
    },
    #[error("new {class} expects {expected} arguments, found {found}")]
    Arity {
        class: Name,
        expected: usize,
        found: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(Name),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum CStepOutcome {
    Done(Expr),
    Step { cfg: Config, rule: CRule },
    Stuck(CStuck),
}

pub fn is_cvalue(e: &Expr) -> bool {
    matches!(e, Expr::Oid(_) | Expr::Int(_))
}

/// One step. Memory is copied; the input is left untouched.
pub fn cstep(cfg: &Config, ct: &ClassTable) -> CStepOutcome {
    let expr = collapse_empty_blocks(cfg.expr.clone());
    if is_cvalue(&expr) {
        return CStepOutcome::Done(expr);
    }
    let mut mem = cfg.mem.clone();
    match reduce(&expr, &mut mem, ct) {
        Ok(Some((e, rule))) => CStepOutcome::Step {
            cfg: Config {
                expr: collapse_empty_blocks(e),
                mem,
            },
            rule,
        },
        Ok(None) => CStepOutcome::Done(expr),
        Err(s) => CStepOutcome::Stuck(s),
    }
}

type Red = Result<Option<(Expr, CRule)>, CStuck>;

/// Reduces the leftmost-innermost redex; `None` for values.
fn reduce(e: &Expr, mem: &mut Memory, ct: &ClassTable) -> Red {
    match e {
        Expr::Oid(_) | Expr::Int(_) => Ok(None),
        Expr::Var(x) => Err(CStuck::FreeVariable(x.clone())),
        Expr::FieldAccess(r, f) => {
            if let Some((r2, rule)) = reduce(r, mem, ct)? {
                return Ok(Some((Expr::FieldAccess(Box::new(r2), f.clone()), rule)));
            }
            let (id, i) = slot_of(r, f, mem, ct)?;
            Ok(Some((mem.objs[&id].slots[i].clone(), CRule::FieldAccess)))
        }
        Expr::FieldAssign(r, f, v) => {
            if let Some((r2, rule)) = reduce(r, mem, ct)? {
                return Ok(Some((
                    Expr::FieldAssign(Box::new(r2), f.clone(), v.clone()),
                    rule,
                )));
            }
            if let Some((v2, rule)) = reduce(v, mem, ct)? {
                return Ok(Some((
                    Expr::FieldAssign(r.clone(), f.clone(), Box::new(v2)),
                    rule,
                )));
            }
            let (id, i) = slot_of(r, f, mem, ct)?;
            mem.objs.get_mut(&id).unwrap().slots[i] = (**v).clone();
            Ok(Some(((**v).clone(), CRule::FieldAssign)))
        }
        Expr::New(c, args) => {
            if let Some((args2, rule)) = reduce_args(args, mem, ct)? {
                return Ok(Some((Expr::New(c.clone(), args2), rule)));
            }
            let fields = ct
                .fields(c)
                .ok_or_else(|| CStuck::UnknownClass(c.clone()))?;
            if fields.len() != args.len() {
                return Err(CStuck::Arity {
                    class: c.clone(),
                    expected: fields.len(),
                    found: args.len(),
                });
            }
            for a in args {
                check_live(a, mem)?;
            }
            let id = mem.alloc(c.clone(), args.clone());
            Ok(Some((Expr::Oid(id), CRule::New)))
        }
        Expr::Invoke(r, m, args) => {
            if let Some((r2, rule)) = reduce(r, mem, ct)? {
                return Ok(Some((
                    Expr::Invoke(Box::new(r2), m.clone(), args.clone()),
                    rule,
                )));
            }
            if let Some((args2, rule)) = reduce_args(args, mem, ct)? {
                return Ok(Some((Expr::Invoke(r.clone(), m.clone(), args2), rule)));
            }
            Ok(Some((invk_block(r, m, args, mem, ct)?, CRule::Invk)))
        }
        Expr::Block(b) => {
            let Some(first) = b.decls.first() else {
                return reduce(&b.body, mem, ct);
            };
            if let Some((init, rule)) = reduce(&first.init, mem, ct)? {
                let mut b2 = b.clone();
                b2.decls[0].init = init;
                return Ok(Some((Expr::Block(b2), rule)));
            }
            let x = &first.var;
            let v = &first.init;
            let decls = b.decls[1..]
                .iter()
                .map(|d| Decl::new(d.ty.clone(), d.var.clone(), subst_atom(&d.init, x, v)))
                .collect();
            let body = subst_atom(&b.body, x, v);
            let mut annot = b.annot.clone();
            annot.remove(x);
            Ok(Some((
                Expr::Block(crate::ast::Block::new(decls, body, annot)),
                CRule::Dec,
            )))
        }
    }
}

fn reduce_args(
    args: &[Expr],
    mem: &mut Memory,
    ct: &ClassTable,
) -> Result<Option<(Vec<Expr>, CRule)>, CStuck> {
    for (i, a) in args.iter().enumerate() {
        if let Some((a2, rule)) = reduce(a, mem, ct)? {
            let mut out = args.to_vec();
            out[i] = a2;
            return Ok(Some((out, rule)));
        }
    }
    Ok(None)
}

fn check_live(v: &Expr, mem: &Memory) -> Result<(), CStuck> {
    match v {
        Expr::Oid(i) if !mem.contains(*i) => Err(CStuck::Dangling(*i)),
        _ => Ok(()),
    }
}

fn object(r: &Expr, mem: &Memory) -> Result<ObjId, CStuck> {
    match r {
        Expr::Oid(i) if mem.contains(*i) => Ok(*i),
        Expr::Oid(i) => Err(CStuck::Dangling(*i)),
        other => Err(CStuck::NotAnObject(crate::print::render(other))),
    }
}

fn slot_of(r: &Expr, f: &Name, mem: &Memory, ct: &ClassTable) -> Result<(ObjId, usize), CStuck> {
    let id = object(r, mem)?;
    let class = &mem.objs[&id].class;
    let i = ct
        .class(class)
        .and_then(|d| d.field_index(f))
        .ok_or_else(|| CStuck::UnknownField {
            class: class.clone(),
            field: f.clone(),
        })?;
    Ok((id, i))
}

/// `{C this=ι; C1 x1=v1 … Cn xn=vn; e}` for a call on `ι`.
fn invk_block(
    r: &Expr,
    m: &Name,
    args: &[Expr],
    mem: &Memory,
    ct: &ClassTable,
) -> Result<Expr, CStuck> {
    let id = object(r, mem)?;
    let class = mem.objs[&id].class.clone();
    let sig = ct
        .method(&class, m)
        .filter(|s| s.params.len() == args.len())
        .ok_or_else(|| CStuck::UnknownMethod {
            class: class.clone(),
            method: m.clone(),
            arity: args.len(),
        })?;
    let mut decls = vec![Decl::new(
        DeclType::plain(&class),
        Ident::this(),
        Expr::Oid(id),
    )];
    for (p, a) in sig.params.iter().zip(args) {
        decls.push(Decl::new(
            DeclType::plain(&p.ty.class),
            p.var.clone(),
            a.clone(),
        ));
    }
    Ok(Expr::block(decls, sig.body.clone()))
}

/// `e[v/x]` for a closed atomic `v`; stops at blocks that rebind `x`.
pub fn subst_atom(e: &Expr, x: &Ident, v: &Expr) -> Expr {
    match e {
        Expr::Var(y) if y == x => v.clone(),
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(subst_atom(r, x, v)), f.clone()),
        Expr::FieldAssign(r, f, w) => Expr::FieldAssign(
            Box::new(subst_atom(r, x, v)),
            f.clone(),
            Box::new(subst_atom(w, x, v)),
        ),
        Expr::New(c, args) => Expr::New(
            c.clone(),
            args.iter().map(|a| subst_atom(a, x, v)).collect(),
        ),
        Expr::Invoke(r, m, args) => Expr::Invoke(
            Box::new(subst_atom(r, x, v)),
            m.clone(),
            args.iter().map(|a| subst_atom(a, x, v)).collect(),
        ),
        Expr::Block(b) if b.decls.iter().any(|d| &d.var == x) => e.clone(),
        Expr::Block(b) => {
            let decls = b
                .decls
                .iter()
                .map(|d| Decl::new(d.ty.clone(), d.var.clone(), subst_atom(&d.init, x, v)))
                .collect();
            Expr::Block(crate::ast::Block::new(
                decls,
                subst_atom(&b.body, x, v),
                b.annot.clone(),
            ))
        }
    }
}

/// The single-step substitution rule for a call `ι.m(vs)`:
/// `e[ι/this][v1/x1]…[vn/xn]`.
pub fn fj_invoke(
    recv: ObjId,
    m: &str,
    args: &[Expr],
    mem: &Memory,
    ct: &ClassTable,
) -> Option<Expr> {
    let class = &mem.get(recv)?.class;
    let sig = ct
        .method(class, m)
        .filter(|s| s.params.len() == args.len())?;
    let mut body = subst_atom(&sig.body, &Ident::this(), &Expr::Oid(recv));
    for (p, a) in sig.params.iter().zip(args) {
        body = subst_atom(&body, &p.var, a);
    }
    Some(collapse_empty_blocks(body))
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CTraceStep {
    pub rule: CRule,
    pub cfg: Config,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum CHalt {
    Value(Expr),
    Stuck(CStuck),
    FuelExhausted,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CTrace {
    pub start: Config,
    pub steps: Vec<CTraceStep>,
    pub halt: CHalt,
}

impl CTrace {
    pub fn last(&self) -> &Config {
        self.steps.last().map_or(&self.start, |s| &s.cfg)
    }

    pub fn rules(&self) -> Vec<CRule> {
        self.steps.iter().map(|s| s.rule).collect()
    }
}

pub fn crun(cfg: &Config, ct: &ClassTable, fuel: usize) -> CTrace {
    let mut steps: Vec<CTraceStep> = Vec::new();
    let halt = loop {
        let cur = steps.last().map_or(cfg, |s| &s.cfg);
        match cstep(cur, ct) {
            CStepOutcome::Done(v) => break CHalt::Value(v),
            CStepOutcome::Stuck(s) => break CHalt::Stuck(s),
            CStepOutcome::Step { cfg, rule } => {
                if steps.len() == fuel {
                    break CHalt::FuelExhausted;
                }
                steps.push(CTraceStep { rule, cfg });
            }
        }
    };
    CTrace {
        start: cfg.clone(),
        steps,
        halt,
    }
}

/// `#0↦C(#1, 0), #1↦D(#1)` or `∅`.
pub fn render_memory(mem: &Memory) -> String {
    if mem.is_empty() {
        return "∅".to_string();
    }
    let mut out = String::new();
    for (i, (id, o)) in mem.objs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, "{id}↦{}(", o.class).unwrap();
        for (j, s) in o.slots.iter().enumerate() {
            if j > 0 {
                out.push_str(", ");
            }
            write!(out, "{}", crate::print::render(s)).unwrap();
        }
        out.push(')');
    }
    out
}

/// `⟨e | μ⟩`.
pub fn render_config(cfg: &Config) -> String {
    let e = render_with(&cfg.expr, &Namer::for_exprs([&cfg.expr]), Style::default());
    format!("⟨{e} | {}⟩", render_memory(&cfg.mem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{name, AnnotPolicy};
    use crate::congruence::alpha_eq;
    use crate::parse::{parse_expr, parse_program};

    fn ct() -> ClassTable {
        parse_program(
            "class C { int f; C m(int k) { {C y=this; y.f=k; y} } } 0",
            AnnotPolicy::Reach,
        )
        .unwrap()
        .ct
    }

    fn cfg(src: &str, mem: Memory) -> Config {
        Config {
            expr: parse_expr(src).unwrap(),
            mem,
        }
    }

    fn one_c(v: i64) -> Memory {
        let mut m = Memory::new();
        m.alloc(name("C"), vec![Expr::Int(v)]);
        m
    }

    #[test]
    fn single_rules() {
        let ct = ct();
        match cstep(&cfg("new C(0)", Memory::new()), &ct) {
            CStepOutcome::Step { cfg, rule } => {
                assert_eq!(rule, CRule::New);
                assert_eq!(render_config(&cfg), "⟨#0 | #0↦C(0)⟩");
            }
            o => panic!("{o:?}"),
        }
        match cstep(&cfg("#0.f=3", one_c(0)), &ct) {
            CStepOutcome::Step { cfg, rule } => {
                assert_eq!(rule, CRule::FieldAssign);
                assert_eq!(render_config(&cfg), "⟨3 | #0↦C(3)⟩");
            }
            o => panic!("{o:?}"),
        }
        match cstep(&cfg("{C x=#0; x.f}", one_c(0)), &ct) {
            CStepOutcome::Step { cfg, rule } => {
                assert_eq!(rule, CRule::Dec);
                assert_eq!(render_config(&cfg), "⟨#0.f | #0↦C(0)⟩");
            }
            o => panic!("{o:?}"),
        }
        assert_eq!(
            cstep(&cfg("#0", one_c(0)), &ct),
            CStepOutcome::Done(Expr::Oid(ObjId(0)))
        );
    }

    #[test]
    fn affine_program_trace() {
        let t = crun(&cfg("{a C x=new C(0); x.f}", Memory::new()), &ct(), 100);
        assert_eq!(t.rules(), vec![CRule::New, CRule::Dec, CRule::FieldAccess]);
        assert_eq!(render_config(t.last()), "⟨0 | #0↦C(0)⟩");
        assert_eq!(t.halt, CHalt::Value(Expr::Int(0)));
    }

    #[test]
    fn duplication_program_reads_the_write() {
        let t = crun(&cfg("{C x=#0; x.f=3; x.f}", one_c(0)), &ct(), 100);
        assert_eq!(render_config(t.last()), "⟨3 | #0↦C(3)⟩");
        assert_eq!(
            t.rules(),
            vec![
                CRule::Dec,
                CRule::FieldAssign,
                CRule::Dec,
                CRule::FieldAccess
            ]
        );
    }

    #[test]
    fn invk_then_decs_equals_substitution() {
        let ct = ct();
        let t = crun(&cfg("#0.m(7)", one_c(0)), &ct, 3);
        assert_eq!(t.rules(), vec![CRule::Invk, CRule::Dec, CRule::Dec]);
        let direct = fj_invoke(ObjId(0), "m", &[Expr::Int(7)], &one_c(0), &ct).unwrap();
        assert!(alpha_eq(&t.last().expr, &direct));
        let done = crun(&cfg("#0.m(7)", one_c(0)), &ct, 100);
        assert_eq!(render_config(done.last()), "⟨#0 | #0↦C(7)⟩");
    }

    #[test]
    fn stuck_and_fuel() {
        let ct = ct();
        assert!(matches!(
            crun(&cfg("x.f", Memory::new()), &ct, 10).halt,
            CHalt::Stuck(CStuck::FreeVariable(_))
        ));
        assert!(matches!(
            crun(&cfg("#0.g", one_c(0)), &ct, 10).halt,
            CHalt::Stuck(CStuck::UnknownField { .. })
        ));
        assert_eq!(
            crun(&cfg("{a C x=new C(0); x.f}", Memory::new()), &ct, 1).halt,
            CHalt::FuelExhausted
        );
        assert_eq!(crun(&cfg("5", Memory::new()), &ct, 0).steps.len(), 0);
    }

    #[test]
    fn substitution_respects_rebinding() {
        let e = parse_expr("{C y=x; {C x=new C(0); x}}").unwrap();
        let x = Ident::new("x");
        let got = subst_atom(&e, &x, &Expr::Oid(ObjId(4)));
        assert_eq!(crate::print::render(&got), "{C y=#4; {C x=new C(0); x}}");
    }
}
