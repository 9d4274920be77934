//! Small-step reduction where memory is a set of evaluated declarations.
//!
//! The relation is nondeterministic; [`step`] fixes one strategy. A term is
//! split into a maximal evaluation context and a hole. If some block on the
//! context admits move-dec or move-body, the outermost such move fires first.
//! Otherwise the rule is chosen by the shape of the hole.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ast::{
    binders_unique, block_annotation, collapse_empty_blocks, free_vars, has_empty_block,
    is_block_value, is_block_value_expr, is_capsule, reduct, rename_fresh, subst_value,
    subst_value_block, subst_var_with, unshadow, AnnotPolicy, Block, ClassTable, Decl, DeclType,
    Expr, Fresh, Ident, Name,
};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    New,
    FieldAccess,
    FieldAssign,
    Invk,
    AliasElim,
    AffineElim,
    Garbage,
    MoveDec,
    MoveBody,
    MoveSubterm,
    CongBlockElim,
    CongAlpha,
}

impl RuleName {
    pub const ALL: [RuleName; 12] = [
        RuleName::New,
        RuleName::FieldAccess,
        RuleName::FieldAssign,
        RuleName::Invk,
        RuleName::AliasElim,
        RuleName::AffineElim,
        RuleName::Garbage,
        RuleName::MoveDec,
        RuleName::MoveBody,
        RuleName::MoveSubterm,
        RuleName::CongBlockElim,
        RuleName::CongAlpha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleName::New => "new",
            RuleName::FieldAccess => "field-access",
            RuleName::FieldAssign => "field-assign",
            RuleName::Invk => "invk",
            RuleName::AliasElim => "alias-elim",
            RuleName::AffineElim => "affine-elim",
            RuleName::Garbage => "garbage",
            RuleName::MoveDec => "move-dec",
            RuleName::MoveBody => "move-body",
            RuleName::MoveSubterm => "move-subterm",
            RuleName::CongBlockElim => "cong-block-elim",
            RuleName::CongAlpha => "cong-alpha",
        }
    }

    pub fn is_congruence(self) -> bool {
        matches!(self, RuleName::CongBlockElim | RuleName::CongAlpha)
    }
}

impl fmt::Display for RuleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RuleName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        RuleName::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown rule `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// Evaluation contexts

/// One layer of an evaluation context, holding everything but the subterm
/// on the path to the hole.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Frame {
    FieldAccessRecv(Name),
    FieldAssignRecv(Name, Expr),
    FieldAssignRhs(Expr, Name),
    NewArg {
        class: Name,
        done: Vec<Expr>,
        pending: Vec<Expr>,
    },
    InvokeRecv {
        method: Name,
        args: Vec<Expr>,
    },
    InvokeArg {
        recv: Expr,
        method: Name,
        done: Vec<Expr>,
        pending: Vec<Expr>,
    },
    BlockDecl {
        before: Vec<Decl>,
        ty: DeclType,
        var: Ident,
        after: Vec<Decl>,
        body: Expr,
        annot: BTreeSet<Ident>,
    },
    BlockBody {
        decls: Vec<Decl>,
        annot: BTreeSet<Ident>,
    },
}

impl Frame {
    pub fn wrap(self, inner: Expr) -> Expr {
        match self {
            Frame::FieldAccessRecv(f) => Expr::FieldAccess(Box::new(inner), f),
            Frame::FieldAssignRecv(f, rhs) => Expr::FieldAssign(Box::new(inner), f, Box::new(rhs)),
            Frame::FieldAssignRhs(recv, f) => Expr::FieldAssign(Box::new(recv), f, Box::new(inner)),
            Frame::NewArg {
                class,
                mut done,
                pending,
            } => {
                done.push(inner);
                done.extend(pending);
                Expr::New(class, done)
            }
            Frame::InvokeRecv { method, args } => Expr::Invoke(Box::new(inner), method, args),
            Frame::InvokeArg {
                recv,
                method,
                mut done,
                pending,
            } => {
                done.push(inner);
                done.extend(pending);
                Expr::Invoke(Box::new(recv), method, done)
            }
            Frame::BlockDecl {
                mut before,
                ty,
                var,
                after,
                body,
                annot,
            } => {
                before.push(Decl::new(ty, var, inner));
                before.extend(after);
                Expr::Block(Block::new(before, body, annot))
            }
            Frame::BlockBody { decls, annot } => Expr::Block(Block::new(decls, inner, annot)),
        }
    }

    /// Variables this frame binds over the hole.
    pub fn binders(&self) -> BTreeSet<Ident> {
        match self {
            Frame::BlockDecl {
                before, var, after, ..
            } => before
                .iter()
                .chain(after)
                .map(|d| d.var.clone())
                .chain([var.clone()])
                .collect(),
            Frame::BlockBody { decls, .. } => decls.iter().map(|d| d.var.clone()).collect(),
            _ => BTreeSet::new(),
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, Frame::BlockDecl { .. } | Frame::BlockBody { .. })
    }

    /// Evaluated declarations visible in a block frame: the prefix plus,
    /// by reordering, any evaluated declaration after the hole.
    fn dvs(&self) -> Vec<&Decl> {
        match self {
            Frame::BlockDecl { before, after, .. } => before
                .iter()
                .chain(after.iter().filter(|d| d.is_dv()))
                .collect(),
            Frame::BlockBody { decls, .. } => decls.iter().collect(),
            _ => Vec::new(),
        }
    }

    fn annot(&self) -> Option<&BTreeSet<Ident>> {
        match self {
            Frame::BlockDecl { annot, .. } | Frame::BlockBody { annot, .. } => Some(annot),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Decomposition {
    /// Outermost frame first.
    pub path: Vec<Frame>,
    pub hole: Expr,
}

fn is_stop_value(e: &Expr) -> bool {
    matches!(e, Expr::Var(_) | Expr::Int(_) | Expr::Oid(_)) || is_block_value_expr(e)
}

/// Unique maximal decomposition following the evaluation-context grammar.
/// A hole that is a value is returned as is.
pub fn decompose(e: Expr) -> Decomposition {
    let mut path = Vec::new();
    let mut cur = e;
    loop {
        cur = match cur {
            Expr::Block(b) if !b.decls.is_empty() && !is_block_value(&b) => {
                let Block {
                    mut decls,
                    body,
                    annot,
                } = b;
                match decls.iter().position(|d| !d.is_dv()) {
                    Some(k) => {
                        let after = decls.split_off(k + 1);
                        let d = decls.pop().expect("declaration k");
                        path.push(Frame::BlockDecl {
                            before: decls,
                            ty: d.ty,
                            var: d.var,
                            after,
                            body: *body,
                            annot,
                        });
                        d.init
                    }
                    None if body.is_atomic() => {
                        return Decomposition {
                            path,
                            hole: Expr::Block(Block { decls, body, annot }),
                        }
                    }
                    None => {
                        path.push(Frame::BlockBody { decls, annot });
                        *body
                    }
                }
            }
            Expr::FieldAccess(r, f) if !is_stop_value(&r) => {
                path.push(Frame::FieldAccessRecv(f));
                *r
            }
            Expr::FieldAssign(r, f, v) if !is_stop_value(&r) => {
                path.push(Frame::FieldAssignRecv(f, *v));
                *r
            }
            Expr::FieldAssign(r, f, v) if matches!(*r, Expr::Var(_)) && !is_stop_value(&v) => {
                path.push(Frame::FieldAssignRhs(*r, f));
                *v
            }
            Expr::New(c, mut args) => match args.iter().position(|a| !a.is_atomic()) {
                Some(i) if !is_block_value_expr(&args[i]) => {
                    let pending = args.split_off(i + 1);
                    let a = args.pop().expect("argument i");
                    path.push(Frame::NewArg {
                        class: c,
                        done: args,
                        pending,
                    });
                    a
                }
                _ => {
                    return Decomposition {
                        path,
                        hole: Expr::New(c, args),
                    }
                }
            },
            Expr::Invoke(r, m, args) if !is_stop_value(&r) => {
                path.push(Frame::InvokeRecv { method: m, args });
                *r
            }
            Expr::Invoke(r, m, mut args) if matches!(*r, Expr::Var(_)) => {
                match args.iter().position(|a| !is_stop_value(a)) {
                    Some(i) => {
                        let pending = args.split_off(i + 1);
                        let a = args.pop().expect("argument i");
                        path.push(Frame::InvokeArg {
                            recv: *r,
                            method: m,
                            done: args,
                            pending,
                        });
                        a
                    }
                    None => {
                        return Decomposition {
                            path,
                            hole: Expr::Invoke(r, m, args),
                        }
                    }
                }
            }
            other => return Decomposition { path, hole: other },
        };
    }
}

/// Rebuilds the term; `plug(decompose(e)) == e`.
pub fn plug(path: Vec<Frame>, hole: Expr) -> Expr {
    path.into_iter().rev().fold(hole, |acc, f| f.wrap(acc))
}

pub fn hole_binders(path: &[Frame]) -> BTreeSet<Ident> {
    path.iter().flat_map(Frame::binders).collect()
}

/// Where an evaluated declaration sits inside its frame.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DvSlot {
    Before(usize),
    After(usize),
    Body(usize),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Enclosing {
    pub frame: usize,
    pub slot: DvSlot,
    pub class: Name,
    pub args: Vec<Expr>,
    /// Hole binders of the context below the enclosing block.
    pub inner: BTreeSet<Ident>,
}

/// Innermost block frame declaring `x`, provided that declaration is
/// evaluated.
pub fn lookup_enclosing(path: &[Frame], x: &Ident) -> Option<Enclosing> {
    for (i, f) in path.iter().enumerate().rev() {
        let found = match f {
            Frame::BlockDecl {
                before, var, after, ..
            } => {
                if let Some(j) = before.iter().position(|d| &d.var == x) {
                    Some((DvSlot::Before(j), &before[j]))
                } else if var == x {
                    return None;
                } else if let Some(j) = after.iter().position(|d| &d.var == x) {
                    if !after[j].is_dv() {
                        return None;
                    }
                    Some((DvSlot::After(j), &after[j]))
                } else {
                    None
                }
            }
            Frame::BlockBody { decls, .. } => decls
                .iter()
                .position(|d| &d.var == x)
                .map(|j| (DvSlot::Body(j), &decls[j])),
            _ => None,
        };
        if let Some((slot, d)) = found {
            let Expr::New(class, args) = &d.init else {
                unreachable!("dv")
            };
            return Some(Enclosing {
                frame: i,
                slot,
                class: class.clone(),
                args: args.clone(),
                inner: hole_binders(&path[i + 1..]),
            });
        }
    }
    None
}

fn dv_mut(path: &mut [Frame], frame: usize, slot: DvSlot) -> &mut Vec<Expr> {
    let d = match (&mut path[frame], slot) {
        (Frame::BlockDecl { before, .. }, DvSlot::Before(j)) => &mut before[j],
        (Frame::BlockDecl { after, .. }, DvSlot::After(j)) => &mut after[j],
        (Frame::BlockBody { decls, .. }, DvSlot::Body(j)) => &mut decls[j],
        _ => unreachable!("slot matches frame"),
    };
    match &mut d.init {
        Expr::New(_, args) => args,
        _ => unreachable!("dv"),
    }
}

// ---------------------------------------------------------------------------
// Outcomes

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Stuck {
    /// An affine declaration is initialized with a value that is not a
    /// capsule and cannot be made one by moving declarations out.
    CapsuleCheckFailed {
        var: Ident,
        value: Expr,
        free: Vec<Ident>,
    },
    NoApplicableRule(String),
}

impl fmt::Display for Stuck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stuck::CapsuleCheckFailed { var, free, .. } => {
                let names: Vec<&str> = free.iter().map(|x| &*x.name).collect();
                write!(
                    f,
                    "capsule check failed: affine {} is initialized with a value that is not a capsule (free variables: {})",
                    var.name,
                    names.join(", ")
                )
            }
            Stuck::NoApplicableRule(d) => write!(f, "no applicable rule: {d}"),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum StepOutcome {
    Done(Expr),
    Step { term: Expr, rule: RuleName },
    Stuck(Stuck),
}

fn stuck(msg: impl Into<String>) -> StepOutcome {
    StepOutcome::Stuck(Stuck::NoApplicableRule(msg.into()))
}

/// Fresh-id supply above every id in the term and in the method bodies.
pub fn session_fresh(e: &Expr, ct: &ClassTable) -> Fresh {
    let mut fresh = Fresh::above(e);
    for (_, def) in &ct.classes {
        for sig in def.methods.values() {
            fresh.bump_above(&sig.body);
            for p in &sig.params {
                fresh.bump_above(&Expr::Var(p.var.clone()));
            }
        }
    }
    fresh
}

/// One step with a throwaway fresh-name supply.
pub fn step(e: &Expr, ct: &ClassTable) -> StepOutcome {
    step_with(e, ct, &mut session_fresh(e, ct))
}

/// One step of the fixed strategy. `fresh` must stay above every id used so
/// far in the session.
pub fn step_with(e: &Expr, ct: &ClassTable, fresh: &mut Fresh) -> StepOutcome {
    if has_empty_block(e) {
        return StepOutcome::Step {
            term: collapse_empty_blocks(e.clone()),
            rule: RuleName::CongBlockElim,
        };
    }
    if !binders_unique(e) {
        return StepOutcome::Step {
            term: unshadow(e, fresh),
            rule: RuleName::CongAlpha,
        };
    }
    let Decomposition { path, hole } = decompose(e.clone());
    if path.is_empty() && is_stop_value(&hole) && !matches!(hole, Expr::Oid(_)) {
        return StepOutcome::Done(hole);
    }
    if let Some((i, kind, moved)) = find_move(&path, &hole) {
        return apply_move(path, hole, i, kind, &moved);
    }
    dispatch(path, hole, ct, fresh)
}

fn done(path: Vec<Frame>, hole: Expr, rule: RuleName) -> StepOutcome {
    StepOutcome::Step {
        term: collapse_empty_blocks(plug(path, hole)),
        rule,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum MoveKind {
    Dec,
    Body,
}

/// Block-shaped view of the level just below frame `i`: its evaluated
/// declarations, declared variables and annotation.
struct Level<'a> {
    dvs: Vec<&'a Decl>,
    dom: BTreeSet<Ident>,
    annot: &'a BTreeSet<Ident>,
}

fn level_below<'a>(path: &'a [Frame], hole: &'a Expr, i: usize) -> Option<Level<'a>> {
    match path.get(i + 1) {
        Some(f) if f.is_block() => Some(Level {
            dvs: f.dvs(),
            dom: f.binders(),
            annot: f.annot().unwrap(),
        }),
        Some(_) => None,
        None => match hole {
            Expr::Block(b) => Some(Level {
                dvs: b.decls.iter().filter(|d| d.is_dv()).collect(),
                dom: b.declared(),
                annot: &b.annot,
            }),
            _ => None,
        },
    }
}

/// Largest set of evaluated declarations that can leave a block without
/// taking a variable out of scope.
pub fn movable(
    dvs: &[&Decl],
    dom: &BTreeSet<Ident>,
    excluded: &BTreeSet<Ident>,
) -> BTreeSet<Ident> {
    let mut m: BTreeSet<Ident> = dvs
        .iter()
        .map(|d| d.var.clone())
        .filter(|x| !excluded.contains(x))
        .collect();
    loop {
        let stay: BTreeSet<&Ident> = dom.iter().filter(|x| !m.contains(*x)).collect();
        let keep: BTreeSet<Ident> = dvs
            .iter()
            .filter(|d| m.contains(&d.var))
            .filter(|d| free_vars(&d.init).iter().all(|y| !stay.contains(y)))
            .map(|d| d.var.clone())
            .collect();
        if keep.len() == m.len() {
            return m;
        }
        m = keep;
    }
}

fn find_move(path: &[Frame], hole: &Expr) -> Option<(usize, MoveKind, BTreeSet<Ident>)> {
    for (i, f) in path.iter().enumerate() {
        let kind = match f {
            Frame::BlockDecl { .. } => MoveKind::Dec,
            Frame::BlockBody { .. } => MoveKind::Body,
            _ => continue,
        };
        let Some(level) = level_below(path, hole, i) else {
            continue;
        };
        let excluded = match f {
            Frame::BlockDecl { ty, .. } if ty.is_affine() => {
                if i + 1 == path.len() && is_capsule(hole) {
                    continue;
                }
                level.annot.clone()
            }
            _ => BTreeSet::new(),
        };
        let m = movable(&level.dvs, &level.dom, &excluded);
        if !m.is_empty() {
            return Some((i, kind, m));
        }
    }
    None
}

fn apply_move(
    mut path: Vec<Frame>,
    hole: Expr,
    i: usize,
    kind: MoveKind,
    moved: &BTreeSet<Ident>,
) -> StepOutcome {
    let lower = path.split_off(i);
    let k = match &lower[0] {
        Frame::BlockDecl { before, .. } => before.len(),
        _ => 0,
    };
    let Expr::Block(mut outer) = plug(lower, hole) else {
        unreachable!("block frame")
    };
    let inner_slot: &mut Expr = match kind {
        MoveKind::Dec => &mut outer.decls[k].init,
        MoveKind::Body => &mut outer.body,
    };
    let Expr::Block(inner) = inner_slot else {
        unreachable!("block below")
    };
    let (out, stay): (Vec<Decl>, Vec<Decl>) = std::mem::take(&mut inner.decls)
        .into_iter()
        .partition(|d| moved.contains(&d.var));
    inner.decls = stay;
    let inner_dom = inner.declared();
    let promoted: Vec<Ident> = inner
        .annot
        .iter()
        .filter(|x| moved.contains(*x))
        .cloned()
        .collect();
    inner.annot.retain(|x| inner_dom.contains(x));
    outer.annot.extend(promoted);
    let at = match kind {
        MoveKind::Dec => k,
        MoveKind::Body => outer.decls.len(),
    };
    outer.decls.splice(at..at, out);
    let rule = match kind {
        MoveKind::Dec => RuleName::MoveDec,
        MoveKind::Body => RuleName::MoveBody,
    };
    done(path, Expr::Block(outer), rule)
}

fn var_name_for(class: &str) -> String {
    class
        .chars()
        .next()
        .map(|c| c.to_ascii_lowercase().to_string())
        .unwrap_or_else(|| "o".into())
}

fn field_index(ct: &ClassTable, class: &str, f: &str) -> Result<usize, StepOutcome> {
    ct.class(class)
        .and_then(|d| d.field_index(f))
        .ok_or_else(|| stuck(format!("class {class} has no field {f}")))
}

fn dispatch(mut path: Vec<Frame>, hole: Expr, ct: &ClassTable, fresh: &mut Fresh) -> StepOutcome {
    match hole {
        Expr::New(c, args) if args.iter().all(Expr::is_atomic) => {
            let x = fresh.ident(&var_name_for(&c));
            let b = Block::new(
                vec![Decl::new(
                    DeclType::plain(&c),
                    x.clone(),
                    Expr::New(c, args),
                )],
                Expr::Var(x.clone()),
                [x.clone()].into(),
            );
            done(path, Expr::Block(b), RuleName::New)
        }
        Expr::FieldAccess(r, f) if matches!(*r, Expr::Var(_)) => {
            let Expr::Var(x) = *r else { unreachable!() };
            let Some(enc) = lookup_enclosing(&path, &x) else {
                return stuck(format!("no evaluated declaration encloses {}.{f}", x.name));
            };
            let i = match field_index(ct, &enc.class, &f) {
                Ok(i) => i,
                Err(s) => return s,
            };
            let v = enc.args[i].clone();
            if matches!(&v, Expr::Var(y) if enc.inner.contains(y)) {
                return stuck("field value would be captured by an inner declaration");
            }
            done(path, v, RuleName::FieldAccess)
        }
        Expr::FieldAssign(r, f, v) if matches!(*r, Expr::Var(_)) && v.is_atomic() => {
            let Expr::Var(x) = *r else { unreachable!() };
            let Some(enc) = lookup_enclosing(&path, &x) else {
                return stuck(format!(
                    "no evaluated declaration encloses {}.{f}=...",
                    x.name
                ));
            };
            let i = match field_index(ct, &enc.class, &f) {
                Ok(i) => i,
                Err(s) => return s,
            };
            if matches!(&*v, Expr::Var(y) if enc.inner.contains(y)) {
                return stuck("assignment would extrude the scope of its right-hand side");
            }
            dv_mut(&mut path, enc.frame, enc.slot)[i] = (*v).clone();
            done(path, *v, RuleName::FieldAssign)
        }
        Expr::Invoke(r, m, vs) if matches!(*r, Expr::Var(_)) && vs.iter().all(is_stop_value) => {
            let Expr::Var(x) = *r else { unreachable!() };
            let Some(enc) = lookup_enclosing(&path, &x) else {
                return stuck(format!(
                    "no evaluated declaration encloses {}.{m}(...)",
                    x.name
                ));
            };
            let Some(sig) = ct.method(&enc.class, &m) else {
                return stuck(format!("class {} has no method {m}", enc.class));
            };
            if sig.params.len() != vs.len() {
                return stuck(format!(
                    "{}.{m} expects {} arguments",
                    enc.class,
                    sig.params.len()
                ));
            }
            let this = fresh.ident("this");
            let mut map = std::collections::BTreeMap::new();
            map.insert(Ident::this(), this.clone());
            let mut decls = vec![Decl::new(DeclType::plain(&enc.class), this, Expr::Var(x))];
            for (p, v) in sig.params.iter().zip(vs) {
                let y = fresh.rename(&p.var);
                map.insert(p.var.clone(), y.clone());
                decls.push(Decl::new(p.ty.clone(), y, v));
            }
            let body = rename_fresh(&sig.body, &map, fresh);
            let mut b = Block::new(decls, body, BTreeSet::new());
            b.annot = block_annotation(&b, AnnotPolicy::Reach);
            done(path, Expr::Block(b), RuleName::Invk)
        }
        Expr::Block(b)
            if !is_block_value(&b) && b.decls.iter().all(Decl::is_dv) && b.body.is_atomic() =>
        {
            let keep = reduct(&b.decls, &b.body);
            if keep.len() == b.decls.len() {
                return stuck("block has no garbage");
            }
            let dom: BTreeSet<Ident> = keep.iter().map(|d| d.var.clone()).collect();
            let annot = b.annot.into_iter().filter(|x| dom.contains(x)).collect();
            done(
                path,
                Expr::Block(Block::new(keep, *b.body, annot)),
                RuleName::Garbage,
            )
        }
        hole if is_value_context_redex(&hole) => move_subterm(path, hole),
        hole if is_stop_value(&hole) && matches!(path.last(), Some(Frame::BlockDecl { .. })) => {
            elim(path, hole, fresh)
        }
        hole => stuck(format!(
            "no rule applies to {}",
            crate::print::render(&hole)
        )),
    }
}

fn is_value_context_redex(e: &Expr) -> bool {
    match e {
        Expr::FieldAccess(r, _) | Expr::Invoke(r, _, _) => is_block_value_expr(r),
        Expr::FieldAssign(r, _, v) => {
            is_block_value_expr(r) || (matches!(**r, Expr::Var(_)) && is_block_value_expr(v))
        }
        Expr::New(_, args) => args
            .iter()
            .find(|a| !a.is_atomic())
            .is_some_and(is_block_value_expr),
        _ => false,
    }
}

/// `E_v[{dvs; x}^X] -> {dvs; E_v[x]}^X`, hoisting every declaration.
fn move_subterm(path: Vec<Frame>, hole: Expr) -> StepOutcome {
    fn open(v: Expr) -> (Vec<Decl>, Expr, BTreeSet<Ident>) {
        let Expr::Block(b) = v else {
            unreachable!("block value")
        };
        (b.decls, *b.body, b.annot)
    }
    let fv_all = |es: &[Expr]| es.iter().flat_map(free_vars).collect::<BTreeSet<Ident>>();
    let (dvs, plugged, annot, ctx_fv) = match hole {
        Expr::FieldAccess(r, f) => {
            let (d, x, a) = open(*r);
            (d, Expr::FieldAccess(Box::new(x), f), a, BTreeSet::new())
        }
        Expr::Invoke(r, m, args) => {
            let (d, x, a) = open(*r);
            let fv = fv_all(&args);
            (d, Expr::Invoke(Box::new(x), m, args), a, fv)
        }
        Expr::FieldAssign(r, f, v) if is_block_value_expr(&r) => {
            let (d, x, a) = open(*r);
            let fv = free_vars(&v);
            (d, Expr::FieldAssign(Box::new(x), f, v), a, fv)
        }
        Expr::FieldAssign(r, f, v) => {
            let (d, x, a) = open(*v);
            let fv = free_vars(&r);
            (d, Expr::FieldAssign(r, f, Box::new(x)), a, fv)
        }
        Expr::New(c, mut args) => {
            let i = args
                .iter()
                .position(|a| !a.is_atomic())
                .expect("block value argument");
            let (d, x, a) = open(std::mem::replace(&mut args[i], Expr::Int(0)));
            let fv = fv_all(&args);
            args[i] = x;
            (d, Expr::New(c, args), a, fv)
        }
        _ => unreachable!("value context"),
    };
    if dvs.iter().any(|d| ctx_fv.contains(&d.var)) {
        return stuck("move-subterm would capture a variable of the context");
    }
    done(
        path,
        Expr::Block(Block::new(dvs, plugged, annot)),
        RuleName::MoveSubterm,
    )
}

/// Eliminates the declaration whose initializer is the value `v`.
fn elim(mut path: Vec<Frame>, v: Expr, fresh: &mut Fresh) -> StepOutcome {
    let Some(Frame::BlockDecl {
        before,
        ty,
        var,
        after,
        body,
        mut annot,
    }) = path.pop()
    else {
        unreachable!("declaration frame")
    };
    annot.remove(&var);
    let affine = ty.is_affine();
    let rule = match (&v, affine) {
        (Expr::Var(y), true) => {
            return StepOutcome::Stuck(Stuck::CapsuleCheckFailed {
                var,
                value: v.clone(),
                free: vec![y.clone()],
            })
        }
        (Expr::Var(y), false) => {
            if *y == var {
                return stuck(format!("{} is initialized with itself", var.name));
            }
            let sub = |d: &Decl, fresh: &mut Fresh| {
                Decl::new(
                    d.ty.clone(),
                    d.var.clone(),
                    subst_var_with(&d.init, y, &var, fresh),
                )
            };
            let mut decls: Vec<Decl> = before.iter().map(|d| sub(d, fresh)).collect();
            decls.extend(after.iter().map(|d| sub(d, fresh)));
            let body = subst_var_with(&body, y, &var, fresh);
            return done(
                path,
                Expr::Block(Block::new(decls, body, annot)),
                RuleName::AliasElim,
            );
        }
        (Expr::Int(_), false) => RuleName::AliasElim,
        (Expr::Int(_), true) => RuleName::AffineElim,
        (_, true) if is_capsule(&v) => RuleName::AffineElim,
        (_, true) => {
            let free = free_vars(&v).into_iter().collect();
            return StepOutcome::Stuck(Stuck::CapsuleCheckFailed {
                var,
                value: v,
                free,
            });
        }
        (_, false) => {
            return stuck("plain declaration initialized with an unflattened block value")
        }
    };
    let mut all = before;
    let split = all.len();
    all.extend(after);
    let (mut decls, body) = subst_value_block(&all, &body, &v, &var, fresh);
    // dvs before the eliminated declaration never mention an affine variable
    // in a well-formed term, but substitute anyway to stay closed
    for d in decls.iter_mut().take(split) {
        d.init = subst_value(&d.init, &v, &var, fresh);
    }
    done(path, Expr::Block(Block::new(decls, body, annot)), rule)
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceStep {
    pub rule: RuleName,
    pub term: Expr,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Halt {
    Value(Expr),
    Stuck(Stuck),
    FuelExhausted,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Trace {
    pub start: Expr,
    pub steps: Vec<TraceStep>,
    pub halt: Halt,
}

impl Trace {
    pub fn last(&self) -> &Expr {
        self.steps.last().map_or(&self.start, |s| &s.term)
    }

    pub fn rules(&self) -> Vec<RuleName> {
        self.steps.iter().map(|s| s.rule).collect()
    }
}

/// Reduces for at most `fuel` steps (congruence steps included).
pub fn run(e: &Expr, ct: &ClassTable, fuel: usize) -> Trace {
    run_with(e, ct, fuel, &mut session_fresh(e, ct))
}

pub fn run_with(e: &Expr, ct: &ClassTable, fuel: usize, fresh: &mut Fresh) -> Trace {
    let mut steps: Vec<TraceStep> = Vec::new();
    loop {
        let cur = steps.last().map_or(e, |s| &s.term);
        let out = step_with(cur, ct, fresh);
        let halt = match out {
            StepOutcome::Done(v) => Halt::Value(v),
            StepOutcome::Stuck(s) => Halt::Stuck(s),
            StepOutcome::Step { term, rule } => {
                if steps.len() == fuel {
                    Halt::FuelExhausted
                } else {
                    steps.push(TraceStep { rule, term });
                    continue;
                }
            }
        };
        return Trace {
            start: e.clone(),
            steps,
            halt,
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::AnnotPolicy;
    use crate::congruence::congruent;
    use crate::parse::{parse_expr, parse_program, Program};
    use crate::print::render;

    fn prog(src: &str) -> Program {
        parse_program(src, AnnotPolicy::Reach).unwrap()
    }

    const DC: &str = "class D { D f; } class C { D f1; D f2; } ";

    #[test]
    fn decompose_plug_identity() {
        for src in [
            "{D x=new D(y); D y=new D(x); C w={D z=new D(z); new C(z, z)}; w.f1}",
            "new C(new D(q), x)",
            "{C x=new C(0); x.m(1, {D d=new D(d); d}, x.f)}",
            "{D z=new D(z); z}",
            "x.f=y.g",
        ] {
            let e = parse_expr(src).unwrap();
            let d = decompose(e.clone());
            assert_eq!(plug(d.path, d.hole), e, "{src}");
        }
    }

    #[test]
    fn decompose_examples() {
        let e = parse_expr("{D x=new D(y); D y=new D(x); C w={D z=new D(z); new C(z, z)}; w.f1}")
            .unwrap();
        let d = decompose(e);
        assert_eq!(render(&d.hole), "new C(z, z)");
        assert!(matches!(&d.path[0], Frame::BlockDecl { var, .. } if &*var.name == "w"));
        assert!(matches!(&d.path[1], Frame::BlockBody { .. }));

        let d = decompose(parse_expr("new C(new D(), x)").unwrap());
        assert_eq!(render(&d.hole), "new D()");

        let v = parse_expr("{D z=new D(z); z}").unwrap();
        let d = decompose(v.clone());
        assert!(d.path.is_empty());
        assert_eq!(d.hole, v);
    }

    #[test]
    fn hole_binders_and_lookup() {
        let e = parse_expr("{A a=new A(0); B b=new B(a); {A a1=new A(1); b.f=a1}}").unwrap();
        let d = decompose(e);
        assert_eq!(
            hole_binders(&d.path[1..])
                .into_iter()
                .map(|x| x.name.to_string())
                .collect::<Vec<_>>(),
            ["a1"]
        );
        let enc = lookup_enclosing(&d.path, &Ident::new("b")).unwrap();
        assert_eq!(&*enc.class, "B");
        assert_eq!(enc.args, vec![Expr::var("a")]);
        assert_eq!(enc.inner, [Ident::new("a1")].into());
        assert!(lookup_enclosing(&d.path, &Ident::new("nope")).is_none());
        let inner = lookup_enclosing(&d.path, &Ident::new("a1")).unwrap();
        assert!(inner.inner.is_empty());
        assert!(hole_binders(&[]).is_empty());
    }

    #[test]
    fn intro_program_reduces_to_cyclic_object() {
        let p = prog(&format!(
            "{DC} D x=new D(y); D y=new D(x); C w={{D z=new D(z); x.f=x; new C(z,z)}}; w.f1"
        ));
        let t = run(&p.main, &p.ct, 100);
        let Halt::Value(v) = &t.halt else {
            panic!("{:?}", t.halt)
        };
        assert!(
            congruent(v, &parse_expr("{D z=new D(z); z}").unwrap()),
            "{}",
            render(v)
        );
        assert_eq!(t.rules().last(), Some(&RuleName::Garbage));
    }

    #[test]
    fn affine_capsule_trace() {
        let p = prog("class C { int f; } {a C x=new C(0); x.f}");
        let t = run(&p.main, &p.ct, 100);
        assert_eq!(t.halt, Halt::Value(Expr::Int(0)));
        use RuleName::*;
        assert_eq!(
            t.rules(),
            vec![New, AffineElim, MoveSubterm, FieldAccess, Garbage]
        );
    }

    #[test]
    fn ex2_capsule_check_fails_on_y() {
        let p = prog(&format!(
            "{DC} D x=new D(x); D y=new D(x); a C w={{D z=new D(z); new C(z,y)}}; x.f=x"
        ));
        let t = run(&p.main, &p.ct, 100);
        let Halt::Stuck(Stuck::CapsuleCheckFailed { var, free, .. }) = &t.halt else {
            panic!("{:?}", t.halt)
        };
        assert_eq!(&*var.name, "w");
        assert_eq!(
            free.iter().map(|x| x.name.to_string()).collect::<Vec<_>>(),
            ["y"]
        );
    }

    #[test]
    fn ex1_affine_succeeds() {
        let p = prog(&format!(
            "{DC} D x=new D(x); D y=new D(x); a C w={{D z=new D(z); new C(z,z)}}; x.f=x"
        ));
        let t = run(&p.main, &p.ct, 100);
        let Halt::Value(v) = &t.halt else {
            panic!("{:?}", t.halt)
        };
        assert!(
            congruent(v, &parse_expr("{D x=new D(x); x}").unwrap()),
            "{}",
            render(v)
        );
    }

    #[test]
    fn assignment_example_moves_before_assigning() {
        let p = prog("class A { int f; } class B { A f; } A a=new A(0); B b=new B(a); {A a1=new A(1); b.f=a1}");
        let t = run(&p.main, &p.ct, 100);
        let rules = t.rules();
        let mb = rules
            .iter()
            .position(|r| *r == RuleName::MoveBody)
            .expect("move-body");
        let fa = rules
            .iter()
            .position(|r| *r == RuleName::FieldAssign)
            .expect("field-assign");
        assert!(mb < fa);
        let after_assign = &t.steps[fa].term;
        assert!(congruent(
            after_assign,
            &parse_expr("{A a=new A(0); B b=new B(a1); A a1=new A(1); a1}").unwrap()
        ));
    }

    #[test]
    fn non_termination_guard() {
        let p = prog("class C { C f; } {C x=new C(x); x}");
        let t = run(&p.main, &p.ct, 10);
        assert!(matches!(t.halt, Halt::Value(_)));
        assert!(!t.rules().contains(&RuleName::New));

        let p = prog("class C { C f; } {a C x=new C(x); x}");
        let t = run(&p.main, &p.ct, 10);
        assert_eq!(t.rules(), vec![RuleName::New]);
        assert!(matches!(
            t.halt,
            Halt::Stuck(Stuck::CapsuleCheckFailed { .. })
        ));
    }

    #[test]
    fn shadowing_is_freshened_first() {
        let p = prog(
            "class A { int f; } class B { A f; } A a=new A(0); B b=new B(a); {A a=new A(1); b.f}",
        );
        let t = run(&p.main, &p.ct, 100);
        assert_eq!(t.rules()[0], RuleName::CongAlpha);
        let Halt::Value(v) = &t.halt else { panic!() };
        assert!(
            congruent(v, &parse_expr("{A a=new A(0); a}").unwrap()),
            "{}",
            render(v)
        );
    }

    #[test]
    fn invocation_and_fuel() {
        let p = prog("class D { D f; D get() { this.f } D set(D p) { this.f = p } } {D x=new D(x); D y=new D(x); y.set(y); x.get()}");
        let t = run(&p.main, &p.ct, 200);
        let Halt::Value(v) = &t.halt else {
            panic!("{:?}", t.halt)
        };
        assert!(
            congruent(v, &parse_expr("{D x=new D(x); x}").unwrap()),
            "{}",
            render(v)
        );
        assert!(t.rules().contains(&RuleName::Invk));

        let t0 = run(&p.main, &p.ct, 0);
        assert_eq!(t0.halt, Halt::FuelExhausted);
        assert!(t0.steps.is_empty());
    }

    #[test]
    fn field_access_on_int_is_stuck() {
        let p = prog("class C { int f; } {C x=new C(0); x.f.f}");
        let t = run(&p.main, &p.ct, 10);
        assert!(matches!(t.halt, Halt::Stuck(Stuck::NoApplicableRule(_))));
    }
}
