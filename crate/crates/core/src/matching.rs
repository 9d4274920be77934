//! Correspondence between syntactic terms and heap configurations, and a
//! harness that co-runs both reducers and checks every syntactic step is
//! simulated by a bounded number of conventional steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ast::{
    binders_unique, collapse_empty_blocks, unshadow, Block, ClassTable, Decl, Expr, Ident, Name,
    ObjId,
};
use crate::conventional::{crun, cstep, render_config, CHalt, CRule, CStepOutcome, Config, Memory};
use crate::print::render;
use crate::syntactic::{session_fresh, step_with, Frame, RuleName, StepOutcome, Stuck};

/// Injective map from object identifiers to variables.
#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct RhoMap {
    fwd: BTreeMap<ObjId, Ident>,
    inv: BTreeMap<Ident, ObjId>,
}

impl RhoMap {
    pub fn new() -> RhoMap {
        RhoMap::default()
    }

    pub fn get(&self, o: ObjId) -> Option<&Ident> {
        self.fwd.get(&o)
    }

    pub fn oid_of(&self, x: &Ident) -> Option<ObjId> {
        self.inv.get(x).copied()
    }

    /// Adds `o ↦ x`; false if either side is already bound elsewhere.
    pub fn insert(&mut self, o: ObjId, x: Ident) -> bool {
        match (self.fwd.get(&o), self.inv.get(&x)) {
            (Some(y), Some(p)) => *y == x && *p == o,
            (None, None) => {
                self.inv.insert(x.clone(), o);
                self.fwd.insert(o, x);
                true
            }
            _ => false,
        }
    }

    pub fn remove(&mut self, o: ObjId) -> Option<Ident> {
        let x = self.fwd.remove(&o)?;
        self.inv.remove(&x);
        Some(x)
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjId, &Ident)> {
        self.fwd.iter().map(|(o, x)| (*o, x))
    }

    pub fn is_injective(&self) -> bool {
        self.fwd.len() == self.inv.len() && self.fwd.iter().all(|(o, x)| self.inv.get(x) == Some(o))
    }

    pub fn extends(&self, base: &RhoMap) -> bool {
        base.iter().all(|(o, x)| self.get(o) == Some(x))
    }

    /// Entries of `self` that are not in `base`.
    pub fn additions(&self, base: &RhoMap) -> Vec<(ObjId, Ident)> {
        self.iter()
            .filter(|(o, _)| base.get(*o).is_none())
            .map(|(o, x)| (o, x.clone()))
            .collect()
    }
}

impl fmt::Display for RhoMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (o, x)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{o}↦{x}")?;
        }
        f.write_str("}")
    }
}

fn render_pairs(pairs: &[(ObjId, Ident)]) -> Vec<String> {
    pairs.iter().map(|(o, x)| format!("{o}↦{x}")).collect()
}

/// Object state recorded by an evaluated declaration.
type DvTable = BTreeMap<Ident, (Name, Vec<Expr>)>;

fn dv_table(e: &Expr) -> DvTable {
    let mut t = DvTable::new();
    e.visit(&mut |s| {
        if let Expr::Block(b) = s {
            for d in b.dvs() {
                if let Expr::New(c, args) = &d.init {
                    t.insert(d.var.clone(), (c.clone(), args.clone()));
                }
            }
        }
    });
    t
}

// ---------------------------------------------------------------------------
// Erasure

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum EraseError {
    #[error("binders are not unique")]
    DuplicateBinders,
    #[error("evaluated declaration {var} refers to {arg}, which is not an evaluated declaration")]
    ArgNotEvaluated { var: Ident, arg: Ident },
    #[error("object identifier {0} in a syntactic term")]
    ObjIdPresent(ObjId),
}

/// Moves every evaluated declaration into a fresh heap, replacing its
/// variable by the allocated identifier.
pub fn erase(e: &Expr) -> Result<(Config, RhoMap), EraseError> {
    if !binders_unique(e) {
        return Err(EraseError::DuplicateBinders);
    }
    let mut found = None;
    e.visit(&mut |s| {
        if let Expr::Oid(o) = s {
            found.get_or_insert(*o);
        }
    });
    if let Some(o) = found {
        return Err(EraseError::ObjIdPresent(o));
    }
    let mut order: Vec<(Ident, Name, Vec<Expr>)> = Vec::new();
    e.visit(&mut |s| {
        if let Expr::Block(b) = s {
            for d in b.dvs() {
                if let Expr::New(c, args) = &d.init {
                    order.push((d.var.clone(), c.clone(), args.clone()));
                }
            }
        }
    });
    let mut mem = Memory::new();
    let mut rho = RhoMap::new();
    for (x, c, _) in &order {
        let o = mem.reserve(c.clone());
        rho.insert(o, x.clone());
    }
    for (x, _, args) in &order {
        let mut slots = Vec::with_capacity(args.len());
        for a in args {
            slots.push(match a {
                Expr::Var(y) => match rho.oid_of(y) {
                    Some(o) => Expr::Oid(o),
                    None => {
                        return Err(EraseError::ArgNotEvaluated {
                            var: x.clone(),
                            arg: y.clone(),
                        })
                    }
                },
                other => other.clone(),
            });
        }
        mem.set(rho.oid_of(x).unwrap(), slots);
    }
    let expr = collapse_empty_blocks(strip(e, &rho));
    Ok((Config { expr, mem }, rho))
}

fn strip(e: &Expr, rho: &RhoMap) -> Expr {
    match e {
        Expr::Var(x) => rho.oid_of(x).map_or_else(|| e.clone(), Expr::Oid),
        Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(strip(r, rho)), f.clone()),
        Expr::FieldAssign(r, f, v) => {
            Expr::FieldAssign(Box::new(strip(r, rho)), f.clone(), Box::new(strip(v, rho)))
        }
        Expr::New(c, args) => Expr::New(c.clone(), args.iter().map(|a| strip(a, rho)).collect()),
        Expr::Invoke(r, m, args) => Expr::Invoke(
            Box::new(strip(r, rho)),
            m.clone(),
            args.iter().map(|a| strip(a, rho)).collect(),
        ),
        Expr::Block(b) => {
            let decls = b
                .decls
                .iter()
                .filter(|d| !d.is_dv())
                .map(|d| Decl::new(d.ty.clone(), d.var.clone(), strip(&d.init, rho)))
                .collect();
            Expr::Block(Block::new(decls, strip(&b.body, rho), BTreeSet::new()))
        }
    }
}

// ---------------------------------------------------------------------------
// The matching relation

#[derive(Clone, PartialEq, Eq, Debug, Error)]
#[error("{0}")]
pub struct Mismatch(pub String);

type Res = Result<(), Mismatch>;

fn fail(msg: impl Into<String>) -> Res {
    Err(Mismatch(msg.into()))
}

/// Backtracking budget for evaluated declarations that nothing in the
/// conventional term points to.
const SEARCH_BUDGET: usize = 100_000;

struct Matcher<'a> {
    mem: &'a Memory,
    dvs: &'a DvTable,
    rho: RhoMap,
    frozen: bool,
    /// Pairs of (syntactic, conventional) binders in scope, innermost last.
    env: Vec<(Ident, Ident)>,
    checked: BTreeSet<Ident>,
    budget: usize,
}

impl<'a> Matcher<'a> {
    fn new(mem: &'a Memory, dvs: &'a DvTable, rho: RhoMap, frozen: bool) -> Self {
        Matcher {
            mem,
            dvs,
            rho,
            frozen,
            env: Vec::new(),
            checked: BTreeSet::new(),
            budget: SEARCH_BUDGET,
        }
    }

    fn bind(&mut self, o: ObjId, x: &Ident) -> Res {
        if self.rho.get(o) == Some(x) {
            return Ok(());
        }
        if self.frozen {
            return fail(format!("{x} would need {o}, which ρ does not give"));
        }
        if !self.rho.insert(o, x.clone()) {
            return fail(format!("cannot map {o} to {x}: ρ would not be injective"));
        }
        Ok(())
    }

    fn expr(&mut self, e: &Expr, c: &Expr) -> Res {
        match (e, c) {
            (Expr::Var(x), _) => self.var(x, c),
            (Expr::Int(n), Expr::Int(m)) if n == m => Ok(()),
            (Expr::Oid(o), _) => fail(format!("object identifier {o} in a syntactic term")),
            (Expr::FieldAccess(r, f), Expr::FieldAccess(r2, f2)) if f == f2 => self.expr(r, r2),
            (Expr::FieldAssign(r, f, v), Expr::FieldAssign(r2, f2, v2)) if f == f2 => {
                self.expr(r, r2)?;
                self.expr(v, v2)
            }
            (Expr::New(k, args), Expr::New(k2, args2)) if k == k2 && args.len() == args2.len() => {
                self.exprs(args, args2)
            }
            (Expr::Invoke(r, m, args), Expr::Invoke(r2, m2, args2))
                if m == m2 && args.len() == args2.len() =>
            {
                self.expr(r, r2)?;
                self.exprs(args, args2)
            }
            (Expr::Block(b), _) => self.block(b, c),
            _ => fail(format!("{} does not match {}", render(e), render(c))),
        }
    }

    fn exprs(&mut self, es: &[Expr], cs: &[Expr]) -> Res {
        es.iter().zip(cs).try_for_each(|(e, c)| self.expr(e, c))
    }

    fn var(&mut self, x: &Ident, c: &Expr) -> Res {
        if let Some(o) = self.rho.oid_of(x) {
            return match c {
                Expr::Oid(o2) if *o2 == o => Ok(()),
                _ => fail(format!("{x} is mapped from {o} but meets {}", render(c))),
            };
        }
        if self.dvs.contains_key(x) {
            return match c {
                Expr::Oid(o) => self.bind(*o, x),
                _ => fail(format!("evaluated {x} meets {}", render(c))),
            };
        }
        let Expr::Var(y) = c else {
            return fail(format!("variable {x} meets {}", render(c)));
        };
        let i = self.env.iter().rposition(|(s, _)| s == x);
        let j = self.env.iter().rposition(|(_, t)| t == y);
        match (i, j) {
            (Some(i), Some(j)) if i == j => Ok(()),
            (None, None) if x == y => Ok(()),
            _ => fail(format!("variable {x} meets differently bound {y}")),
        }
    }

    /// Pairs the unevaluated declarations of a block with a conventional
    /// block, or matches the body directly when there are none.
    fn block(&mut self, b: &Block, c: &Expr) -> Res {
        let ds: Vec<&Decl> = b.decls.iter().filter(|d| !d.is_dv()).collect();
        if ds.is_empty() {
            return self.expr(&b.body, c);
        }
        let cds = self.open(&ds, c)?;
        let mark = self.env.len() - ds.len();
        for (d, cd) in ds.iter().zip(&cds) {
            self.expr(&d.init, &cd.init)?;
        }
        let Expr::Block(cb) = c else { unreachable!() };
        self.expr(&b.body, &cb.body)?;
        self.env.truncate(mark);
        Ok(())
    }

    /// Checks declaration shapes and brings both sides' binders into scope.
    fn open(&mut self, ds: &[&Decl], c: &Expr) -> Result<Vec<Decl>, Mismatch> {
        let Expr::Block(cb) = c else {
            return Err(Mismatch(format!(
                "block with pending declarations meets {}",
                render(c)
            )));
        };
        if cb.decls.len() != ds.len() {
            return Err(Mismatch(format!(
                "{} pending declarations meet {} conventional ones",
                ds.len(),
                cb.decls.len()
            )));
        }
        for (d, cd) in ds.iter().zip(&cb.decls) {
            if d.ty.class != cd.ty.class {
                return Err(Mismatch(format!("declaration {} meets {}", d.var, cd.var)));
            }
            if self.rho.oid_of(&d.var).is_some() {
                return Err(Mismatch(format!(
                    "declaration {} is evaluated on one side only",
                    d.var
                )));
            }
        }
        for (d, cd) in ds.iter().zip(&cb.decls) {
            self.env.push((d.var.clone(), cd.var.clone()));
        }
        Ok(cb.decls.clone())
    }

    /// Evaluation-context rules: walks `path` on the syntactic side and the
    /// corresponding shape on the conventional side, then matches the hole.
    fn ctx(&mut self, path: &[Frame], hole: &Expr, c: &Expr) -> Res {
        let Some((f, rest)) = path.split_first() else {
            return self.expr(hole, c);
        };
        match (f, c) {
            (Frame::FieldAccessRecv(fl), Expr::FieldAccess(r, f2)) if fl == f2 => {
                self.ctx(rest, hole, r)
            }
            (Frame::FieldAssignRecv(fl, rhs), Expr::FieldAssign(r, f2, v)) if fl == f2 => {
                self.expr(rhs, v)?;
                self.ctx(rest, hole, r)
            }
            (Frame::FieldAssignRhs(recv, fl), Expr::FieldAssign(r, f2, v)) if fl == f2 => {
                self.expr(recv, r)?;
                self.ctx(rest, hole, v)
            }
            (
                Frame::NewArg {
                    class,
                    done,
                    pending,
                },
                Expr::New(k, args),
            ) if class == k && args.len() == done.len() + 1 + pending.len() => {
                self.exprs(done, &args[..done.len()])?;
                self.exprs(pending, &args[done.len() + 1..])?;
                self.ctx(rest, hole, &args[done.len()])
            }
            (Frame::InvokeRecv { method, args }, Expr::Invoke(r, m, args2))
                if method == m && args.len() == args2.len() =>
            {
                self.exprs(args, args2)?;
                self.ctx(rest, hole, r)
            }
            (
                Frame::InvokeArg {
                    recv,
                    method,
                    done,
                    pending,
                },
                Expr::Invoke(r, m, args),
            ) if method == m && args.len() == done.len() + 1 + pending.len() => {
                self.expr(recv, r)?;
                self.exprs(done, &args[..done.len()])?;
                self.exprs(pending, &args[done.len() + 1..])?;
                self.ctx(rest, hole, &args[done.len()])
            }
            (
                Frame::BlockDecl {
                    before,
                    ty,
                    var,
                    after,
                    body,
                    ..
                },
                _,
            ) => {
                let hole_decl = Decl::new(ty.clone(), var.clone(), Expr::Int(0));
                let pre: Vec<&Decl> = before.iter().filter(|d| !d.is_dv()).collect();
                let post: Vec<&Decl> = after.iter().filter(|d| !d.is_dv()).collect();
                let mut ds = pre.clone();
                ds.push(&hole_decl);
                ds.extend(&post);
                let cds = self.open(&ds, c)?;
                let mark = self.env.len() - ds.len();
                for (d, cd) in pre.iter().zip(&cds) {
                    self.expr(&d.init, &cd.init)?;
                }
                for (d, cd) in post.iter().zip(&cds[pre.len() + 1..]) {
                    self.expr(&d.init, &cd.init)?;
                }
                let Expr::Block(cb) = c else { unreachable!() };
                self.expr(body, &cb.body)?;
                self.ctx(rest, hole, &cds[pre.len()].init)?;
                self.env.truncate(mark);
                Ok(())
            }
            (Frame::BlockBody { decls, .. }, _) => {
                let ds: Vec<&Decl> = decls.iter().filter(|d| !d.is_dv()).collect();
                if ds.is_empty() {
                    return self.ctx(rest, hole, c);
                }
                let cds = self.open(&ds, c)?;
                let mark = self.env.len() - ds.len();
                for (d, cd) in ds.iter().zip(&cds) {
                    self.expr(&d.init, &cd.init)?;
                }
                let Expr::Block(cb) = c else { unreachable!() };
                self.ctx(rest, hole, &cb.body)?;
                self.env.truncate(mark);
                Ok(())
            }
            _ => fail(format!("context frame does not match {}", render(c))),
        }
    }

    /// Checks every bound evaluated declaration against the heap, binding
    /// the identifiers its fields point to.
    fn close(&mut self) -> Res {
        loop {
            let todo: Vec<(Ident, ObjId)> = self
                .dvs
                .keys()
                .filter(|x| !self.checked.contains(*x))
                .filter_map(|x| self.rho.oid_of(x).map(|o| (x.clone(), o)))
                .collect();
            if todo.is_empty() {
                return Ok(());
            }
            for (x, o) in todo {
                self.checked.insert(x.clone());
                self.ev_dec(&x, o)?;
            }
        }
    }

    fn ev_dec(&mut self, x: &Ident, o: ObjId) -> Res {
        let (class, args) = &self.dvs[x];
        let Some(state) = self.mem.get(o) else {
            return fail(format!("{x} is mapped from unallocated {o}"));
        };
        if &state.class != class || state.slots.len() != args.len() {
            return fail(format!("{x} is a {class} but {o} holds a {}", state.class));
        }
        let slots = state.slots.clone();
        for (a, s) in args.iter().zip(&slots) {
            match (a, s) {
                (Expr::Int(n), Expr::Int(m)) if n == m => {}
                (Expr::Var(y), Expr::Oid(p))
                    if self.rho.oid_of(y).is_some() || self.dvs.contains_key(y) =>
                {
                    match self.rho.oid_of(y) {
                        Some(q) if q == *p => {}
                        Some(q) => {
                            return fail(format!("field of {x} is {y} ({q}) but {o} holds {p}"))
                        }
                        None => self.bind(*p, y)?,
                    }
                }
                _ => return fail(format!("{x} does not match the state of {o}")),
            }
        }
        Ok(())
    }

    /// Finds identifiers for evaluated declarations nothing points to.
    fn search(&mut self) -> Res {
        self.close()?;
        let Some(x) = self
            .dvs
            .keys()
            .find(|x| self.rho.oid_of(x).is_none())
            .cloned()
        else {
            return Ok(());
        };
        if self.frozen {
            return fail(format!("evaluated {x} is not in the image of ρ"));
        }
        let class = self.dvs[&x].0.clone();
        let candidates: Vec<ObjId> = self
            .mem
            .objs
            .iter()
            .filter(|(o, s)| s.class == class && self.rho.get(**o).is_none())
            .map(|(o, _)| *o)
            .collect();
        for o in candidates {
            if self.budget == 0 {
                return fail("search budget exhausted");
            }
            self.budget -= 1;
            let (rho, checked) = (self.rho.clone(), self.checked.clone());
            self.rho.insert(o, x.clone());
            if self.search().is_ok() {
                return Ok(());
            }
            self.rho = rho;
            self.checked = checked;
        }
        fail(format!("no object can stand for evaluated {x}"))
    }
}

/// Whether `e` matches `cfg` under exactly `rho`.
pub fn match_check(e: &Expr, cfg: &Config, rho: &RhoMap) -> bool {
    let dvs = dv_table(e);
    let mut m = Matcher::new(&cfg.mem, &dvs, rho.clone(), true);
    m.expr(e, &collapse_empty_blocks(cfg.expr.clone()))
        .and_then(|_| m.search())
        .is_ok()
}

/// Least extension of `base` under which `e` matches `cfg`.
pub fn match_infer(e: &Expr, cfg: &Config, base: &RhoMap) -> Result<RhoMap, Mismatch> {
    let dvs = dv_table(e);
    let mut m = Matcher::new(&cfg.mem, &dvs, base.clone(), false);
    m.expr(e, &collapse_empty_blocks(cfg.expr.clone()))?;
    m.search()?;
    Ok(m.rho)
}

/// Matching through an explicit decomposition: the context frames are
/// matched frame by frame and the hole against the corresponding subterm.
pub fn match_context(path: &[Frame], hole: &Expr, cfg: &Config, rho: &RhoMap) -> bool {
    let whole = crate::syntactic::plug(path.to_vec(), hole.clone());
    let dvs = dv_table(&whole);
    let mut m = Matcher::new(&cfg.mem, &dvs, rho.clone(), true);
    m.ctx(path, hole, &collapse_empty_blocks(cfg.expr.clone()))
        .and_then(|_| m.search())
        .is_ok()
}

/// Shape of a conventional expression matched by a syntactic value: a
/// variable meets an identifier mapped to it or itself, a block value meets
/// the identifier of its result variable.
pub fn value_matches(v: &Expr, c: &Expr, rho: &RhoMap) -> bool {
    match (crate::ast::classify_value(v), c) {
        (crate::ast::ValueKind::VarValue(x), Expr::Oid(o)) => rho.get(*o) == Some(&x),
        (crate::ast::ValueKind::VarValue(x), Expr::Var(y)) => x == *y && rho.oid_of(&x).is_none(),
        (crate::ast::ValueKind::BlockValue { var, .. }, Expr::Oid(o)) => rho.get(*o) == Some(&var),
        (crate::ast::ValueKind::IntValue(n), Expr::Int(m)) => n == *m,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct Attempt {
    pub conv_steps: usize,
    pub config: String,
    pub reason: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
#[error("no conventional configuration within {} steps matches", attempts.len().saturating_sub(1))]
pub struct Violation {
    pub attempts: Vec<Attempt>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SimStep {
    pub cfg: Config,
    pub rho: RhoMap,
    pub conv_rules: Vec<CRule>,
}

/// Searches `cfg` and its first `k` successors for one that `next` matches
/// under an extension of `rho`.
pub fn simulate_step(
    next: &Expr,
    cfg: &Config,
    rho: &RhoMap,
    ct: &ClassTable,
    k: usize,
) -> Result<SimStep, Violation> {
    let mut cur = cfg.clone();
    let mut rules = Vec::new();
    let mut attempts = Vec::new();
    loop {
        match match_infer(next, &cur, rho) {
            Ok(r2) => {
                let grows = r2.extends(rho) && r2.is_injective();
                let mono = cfg.mem.objs.keys().all(|o| cur.mem.contains(*o));
                if grows && mono {
                    return Ok(SimStep {
                        cfg: cur,
                        rho: r2,
                        conv_rules: rules,
                    });
                }
                attempts.push(Attempt {
                    conv_steps: rules.len(),
                    config: render_config(&cur),
                    reason: "ρ or the heap domain shrank".into(),
                });
            }
            Err(Mismatch(reason)) => attempts.push(Attempt {
                conv_steps: rules.len(),
                config: render_config(&cur),
                reason,
            }),
        }
        if rules.len() == k {
            return Err(Violation { attempts });
        }
        match cstep(&cur, ct) {
            CStepOutcome::Step { cfg, rule } => {
                cur = cfg;
                rules.push(rule);
            }
            _ => return Err(Violation { attempts }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimOptions {
    pub fuel: usize,
    pub max_conv_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            fuel: 500,
            max_conv_steps: 8,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct SimRecord {
    pub index: usize,
    pub rule: RuleName,
    pub conv_steps: usize,
    pub conv_rules: Vec<CRule>,
    pub rho_additions: Vec<String>,
    pub term: String,
    pub config: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Verdict {
    /// Both sides reached corresponding values.
    Matched {
        value: String,
        config: String,
    },
    /// The capsule check stopped the syntactic side; `conventional` tells
    /// how the heap side fares from the last matched configuration.
    CapsuleStuck {
        message: String,
        conventional: String,
    },
    Stuck {
        message: String,
    },
    FuelExhausted,
    /// A final value whose conventional counterpart has the wrong shape.
    ValueMismatch {
        value: String,
        config: String,
    },
    Violation {
        index: usize,
        rule: RuleName,
        term: String,
        attempts: Vec<Attempt>,
    },
    NotErasable {
        message: String,
    },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct SimReport {
    pub start: String,
    pub initial_config: String,
    pub initial_rho: String,
    pub records: Vec<SimRecord>,
    pub verdict: Verdict,
}

impl SimReport {
    pub fn is_violation(&self) -> bool {
        matches!(
            self.verdict,
            Verdict::Violation { .. } | Verdict::ValueMismatch { .. }
        )
    }

    pub fn conv_counts(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.conv_steps).collect()
    }
}

/// Co-runs both reducers from `e` and its erasure.
pub fn simulate_run(e: &Expr, ct: &ClassTable, opts: SimOptions) -> SimReport {
    let mut fresh = session_fresh(e, ct);
    let mut records = Vec::new();
    let mut cur = e.clone();
    if !binders_unique(&cur) {
        cur = unshadow(&cur, &mut fresh);
    }
    let (mut cfg, mut rho) = match erase(&cur) {
        Ok(p) => p,
        Err(err) => {
            return SimReport {
                start: render(e),
                initial_config: String::new(),
                initial_rho: String::new(),
                records,
                verdict: Verdict::NotErasable {
                    message: err.to_string(),
                },
            }
        }
    };
    let initial_config = render_config(&cfg);
    let initial_rho = rho.to_string();
    if cur != *e {
        records.push(SimRecord {
            index: 0,
            rule: RuleName::CongAlpha,
            conv_steps: 0,
            conv_rules: Vec::new(),
            rho_additions: Vec::new(),
            term: render(&cur),
            config: initial_config.clone(),
        });
    }
    let verdict = loop {
        if records.len() >= opts.fuel {
            break Verdict::FuelExhausted;
        }
        match step_with(&cur, ct, &mut fresh) {
            StepOutcome::Done(v) => {
                let c = collapse_empty_blocks(cfg.expr.clone());
                let (value, config) = (render(&v), render_config(&cfg));
                break if value_matches(&v, &c, &rho) {
                    Verdict::Matched { value, config }
                } else {
                    Verdict::ValueMismatch { value, config }
                };
            }
            StepOutcome::Stuck(s @ Stuck::CapsuleCheckFailed { .. }) => {
                let t = crun(&cfg, ct, opts.fuel);
                let conventional = match &t.halt {
                    CHalt::Value(_) => format!("reduces to {}", render_config(t.last())),
                    CHalt::Stuck(err) => format!("stuck: {err}"),
                    CHalt::FuelExhausted => "still running when fuel ran out".to_string(),
                };
                break Verdict::CapsuleStuck {
                    message: s.to_string(),
                    conventional,
                };
            }
            StepOutcome::Stuck(s) => {
                break Verdict::Stuck {
                    message: s.to_string(),
                }
            }
            StepOutcome::Step { term, rule } => {
                let index = records.len();
                match simulate_step(&term, &cfg, &rho, ct, opts.max_conv_steps) {
                    Ok(SimStep {
                        cfg: c2,
                        rho: r2,
                        conv_rules,
                    }) => {
                        records.push(SimRecord {
                            index,
                            rule,
                            conv_steps: conv_rules.len(),
                            conv_rules,
                            rho_additions: render_pairs(&r2.additions(&rho)),
                            term: render(&term),
                            config: render_config(&c2),
                        });
                        cfg = c2;
                        rho = r2;
                        cur = term;
                    }
                    Err(Violation { attempts }) => {
                        break Verdict::Violation {
                            index,
                            rule,
                            term: render(&term),
                            attempts,
                        };
                    }
                }
            }
        }
    };
    SimReport {
        start: render(e),
        initial_config,
        initial_rho,
        records,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::AnnotPolicy;
    use crate::parse::{parse_expr, parse_program};

    fn ct() -> ClassTable {
        parse_program("class D { D f; } class C { int f; } 0", AnnotPolicy::Reach)
            .unwrap()
            .ct
    }

    fn rho(pairs: &[(u64, &str)]) -> RhoMap {
        let mut r = RhoMap::new();
        for (o, x) in pairs {
            assert!(r.insert(ObjId(*o), Ident::new(x)));
        }
        r
    }

    fn cfg(src: &str, mem: &[(&str, Vec<Expr>)]) -> Config {
        let mut m = Memory::new();
        for (c, slots) in mem {
            m.alloc(crate::ast::name(c), slots.clone());
        }
        Config {
            expr: parse_expr(src).unwrap(),
            mem: m,
        }
    }

    #[test]
    fn check_examples() {
        let e = parse_expr("{D z=new D(z); z}").unwrap();
        let c = cfg("#0", &[("D", vec![Expr::Oid(ObjId(0))])]);
        assert!(match_check(&e, &c, &rho(&[(0, "z")])));
        assert!(!match_check(&e, &c, &RhoMap::new()));
        assert!(match_check(
            &parse_expr("x").unwrap(),
            &cfg("x", &[]),
            &RhoMap::new()
        ));
        assert!(!match_check(
            &parse_expr("x").unwrap(),
            &cfg("x", &[]),
            &rho(&[(0, "x")])
        ));
    }

    #[test]
    fn infer_binds_fresh_pair() {
        let e = parse_expr("{D y=new D(y); {D x=new D(y); x}}").unwrap();
        let c = cfg(
            "#1",
            &[
                ("D", vec![Expr::Oid(ObjId(0))]),
                ("D", vec![Expr::Oid(ObjId(0))]),
            ],
        );
        let c = Config {
            mem: {
                let mut m = c.mem;
                m.set(ObjId(0), vec![Expr::Oid(ObjId(0))]);
                m
            },
            ..c
        };
        let got = match_infer(&e, &c, &rho(&[(0, "y")])).unwrap();
        assert_eq!(got, rho(&[(0, "y"), (1, "x")]));
        assert!(match_check(&e, &c, &got));
    }

    #[test]
    fn injectivity_conflict_fails() {
        let e = parse_expr("{D y=new D(y); {D x=new D(x); x}}").unwrap();
        let c = cfg("#0", &[("D", vec![Expr::Oid(ObjId(0))])]);
        assert!(match_infer(&e, &c, &rho(&[(0, "y")])).is_err());
    }

    #[test]
    fn erase_intro_store() {
        let p = parse_program(
            "class D { D f; } class C { D f1; D f2; }
             D x=new D(y); D y=new D(x); C w={D z=new D(z); x.f=x; new C(z,z)}; w.f1",
            AnnotPolicy::Reach,
        )
        .unwrap();
        let (c, r) = erase(&p.main).unwrap();
        assert_eq!(r.to_string(), "{#0↦x, #1↦y, #2↦z}");
        assert_eq!(
            render_config(&c),
            "⟨{C w={#0.f=#0; new C(#2, #2)}; w.f1} | #0↦D(#1), #1↦D(#0), #2↦D(#2)⟩"
        );
        assert!(match_check(&p.main, &c, &r));
        let (c0, r0) = erase(&parse_expr("{int k=3; k}").unwrap()).unwrap();
        assert!(c0.mem.is_empty() && r0.is_empty());
    }

    #[test]
    fn erase_rejects_unevaluated_argument() {
        let e = parse_expr("{C p={D d=new D(d); d}; D q=new D(p); q}").unwrap();
        assert!(matches!(erase(&e), Err(EraseError::ArgNotEvaluated { .. })));
    }

    #[test]
    fn affine_program_simulates() {
        let e = parse_expr("{a C x=new C(0); x.f}").unwrap();
        let r = simulate_run(&e, &ct(), SimOptions::default());
        assert_eq!(
            r.verdict,
            Verdict::Matched {
                value: "0".into(),
                config: "⟨0 | #0↦C(0)⟩".into()
            }
        );
        let rules: Vec<RuleName> = r.records.iter().map(|x| x.rule).collect();
        assert_eq!(
            rules,
            vec![
                RuleName::New,
                RuleName::AffineElim,
                RuleName::MoveSubterm,
                RuleName::FieldAccess,
                RuleName::Garbage
            ]
        );
        assert_eq!(r.conv_counts(), vec![1, 1, 0, 1, 0]);
        assert_eq!(r.records[0].rho_additions.len(), 1);
    }

    #[test]
    fn duplication_breaks_matching() {
        let e = parse_expr("{a C x={C y=new C(0); y}; x.f=3; x.f}").unwrap();
        let r = simulate_run(&e, &ct(), SimOptions::default());
        match &r.verdict {
            Verdict::Violation {
                index,
                rule,
                attempts,
                ..
            } => {
                assert_eq!((*index, *rule), (0, RuleName::AffineElim));
                // the heap side finishes after four steps, every one tried
                assert_eq!(attempts.len(), 5);
                assert_eq!(attempts.last().unwrap().config, "⟨3 | #0↦C(3)⟩");
            }
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn capsule_stuck_is_not_a_violation() {
        let p = parse_program(
            "class D { D f; } class C { D f1; D f2; }
             D x=new D(y); D y=new D(x); a C w={D z=new D(y); new C(z,z)}; x.f=x",
            AnnotPolicy::Reach,
        )
        .unwrap();
        let r = simulate_run(&p.main, &p.ct, SimOptions::default());
        assert!(
            matches!(&r.verdict, Verdict::CapsuleStuck { conventional, .. } if conventional.starts_with("reduces"))
        );
        assert!(!r.is_violation());
    }
}
