//! Rule-instance checker for syntactic steps.
//!
//! Given a step `before -> after` labelled with a rule, searches every
//! evaluation position of `before` and every admissible choice the rule
//! leaves open (which declarations move, which are collected) for an
//! instance whose result is congruent to `after`. Shares only the term
//! utilities with the stepper, not its strategy.

use std::collections::BTreeSet;
use std::fmt;

use crate::ast::{
    collapse_empty_blocks, free_vars, free_vars_decls, is_block_value_expr, rename_fresh,
    subst_value_block, subst_var_with, Block, ClassTable, Decl, DeclType, Expr, Fresh, Ident,
};
use crate::congruence::{canonicalize, congruent};
use crate::syntactic::{plug, session_fresh, Frame, RuleName, Trace};

/// Subsets are enumerated exhaustively up to this many candidates; larger
/// sets only try the full set and singletons.
const SUBSET_LIMIT: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckError {
    pub rule: RuleName,
    pub positions: usize,
    pub candidates: usize,
}

impl fmt::Display for CheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no instance of {} matches the step ({} positions, {} candidate results)",
            self.rule, self.positions, self.candidates
        )
    }
}

impl std::error::Error for CheckError {}

/// Checks a single step.
pub fn check_step(
    before: &Expr,
    after: &Expr,
    rule: RuleName,
    ct: &ClassTable,
) -> Result<(), CheckError> {
    if rule.is_congruence() {
        return if congruent(before, after) {
            Ok(())
        } else {
            Err(CheckError {
                rule,
                positions: 0,
                candidates: 1,
            })
        };
    }
    let target = canonicalize(after);
    let size = collapse_empty_blocks(after.clone()).size();
    let mut fresh = session_fresh(before, ct);
    fresh.bump_above(after);
    let positions = positions(before);
    let mut candidates = 0;
    for (path, hole) in &positions {
        for c in instances(rule, path, hole, ct, &mut fresh) {
            candidates += 1;
            let c = collapse_empty_blocks(c);
            if c.size() == size && canonicalize(&c) == target {
                return Ok(());
            }
        }
    }
    Err(CheckError {
        rule,
        positions: positions.len(),
        candidates,
    })
}

/// Checks every step of a trace, returning the index of the first failure.
pub fn check_trace(t: &Trace, ct: &ClassTable) -> Result<(), (usize, CheckError)> {
    let mut prev = &t.start;
    for (i, s) in t.steps.iter().enumerate() {
        check_step(prev, &s.term, s.rule, ct).map_err(|e| (i, e))?;
        prev = &s.term;
    }
    Ok(())
}

fn is_value(e: &Expr) -> bool {
    matches!(e, Expr::Var(_) | Expr::Int(_)) || is_block_value_expr(e)
}

/// Every prefix of the evaluation path: `E` ranges over
/// `[ ] | E.f | E.f=e | x.f=E | new C(xs,E,es) | E.m(es) | x.m(vs,E,es)
///  | {dvs C x=E ds; e} | {dvs; E}`.
fn positions(e: &Expr) -> Vec<(Vec<Frame>, Expr)> {
    let mut out = Vec::new();
    let mut path = Vec::new();
    let mut cur = e.clone();
    loop {
        out.push((path.clone(), cur.clone()));
        let (frame, next) = match cur {
            Expr::Block(b) => {
                let Block {
                    mut decls,
                    body,
                    annot,
                } = b;
                match decls.iter().position(|d| !d.is_dv()) {
                    Some(k) => {
                        let after = decls.split_off(k + 1);
                        let d = decls.pop().expect("declaration");
                        (
                            Frame::BlockDecl {
                                before: decls,
                                ty: d.ty,
                                var: d.var,
                                after,
                                body: *body,
                                annot,
                            },
                            d.init,
                        )
                    }
                    None => (Frame::BlockBody { decls, annot }, *body),
                }
            }
            Expr::FieldAccess(r, f) => (Frame::FieldAccessRecv(f), *r),
            Expr::FieldAssign(r, f, v) => match *r {
                Expr::Var(_) => (Frame::FieldAssignRhs(*r, f), *v),
                r => (Frame::FieldAssignRecv(f, *v), r),
            },
            Expr::New(c, mut args) => match args.iter().position(|a| !a.is_atomic()) {
                Some(i) => {
                    let pending = args.split_off(i + 1);
                    let a = args.pop().expect("argument");
                    (
                        Frame::NewArg {
                            class: c,
                            done: args,
                            pending,
                        },
                        a,
                    )
                }
                None => return out,
            },
            Expr::Invoke(r, m, mut args) => match *r {
                Expr::Var(_) => match args.iter().position(|a| !is_value(a)) {
                    Some(i) => {
                        let pending = args.split_off(i + 1);
                        let a = args.pop().expect("argument");
                        (
                            Frame::InvokeArg {
                                recv: *r,
                                method: m,
                                done: args,
                                pending,
                            },
                            a,
                        )
                    }
                    None => return out,
                },
                r => (Frame::InvokeRecv { method: m, args }, r),
            },
            Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => return out,
        };
        path.push(frame);
        cur = next;
    }
}

fn frame_decls(f: &Frame) -> Vec<&Decl> {
    match f {
        Frame::BlockDecl { before, after, .. } => before.iter().chain(after).collect(),
        Frame::BlockBody { decls, .. } => decls.iter().collect(),
        _ => Vec::new(),
    }
}

fn frame_binders(f: &Frame) -> BTreeSet<Ident> {
    let mut s: BTreeSet<Ident> = frame_decls(f).into_iter().map(|d| d.var.clone()).collect();
    if let Frame::BlockDecl { var, .. } = f {
        s.insert(var.clone());
    }
    s
}

/// `dec(E_b, x)`: frame index and the evaluated declaration of the
/// innermost block binding `x`, with the binders strictly below it.
fn dec<'a>(path: &'a [Frame], x: &Ident) -> Option<(usize, &'a Decl, BTreeSet<Ident>)> {
    let i = path.iter().rposition(|f| frame_binders(f).contains(x))?;
    let d = frame_decls(&path[i]).into_iter().find(|d| &d.var == x)?;
    if !d.is_dv() {
        return None;
    }
    let inner = path[i + 1..].iter().flat_map(frame_binders).collect();
    Some((i, d, inner))
}

fn set_dv_arg(path: &mut [Frame], i: usize, x: &Ident, k: usize, v: Expr) {
    let decls: Vec<&mut Decl> = match &mut path[i] {
        Frame::BlockDecl { before, after, .. } => {
            before.iter_mut().chain(after.iter_mut()).collect()
        }
        Frame::BlockBody { decls, .. } => decls.iter_mut().collect(),
        _ => unreachable!("block frame"),
    };
    for d in decls {
        if &d.var == x {
            if let Expr::New(_, args) = &mut d.init {
                args[k] = v;
                return;
            }
        }
    }
}

fn field_of(ct: &ClassTable, d: &Decl, f: &str) -> Option<(usize, Vec<Expr>)> {
    let Expr::New(c, args) = &d.init else {
        return None;
    };
    let k = ct.class(c)?.field_index(f)?;
    (k < args.len()).then(|| (k, args.clone()))
}

/// Nonempty subsets of `items` (or a bounded family of them).
fn subsets<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    if n > SUBSET_LIMIT {
        let mut out = vec![items.to_vec()];
        out.extend(items.iter().map(|x| vec![x.clone()]));
        return out;
    }
    (1u32..(1 << n))
        .map(|mask| {
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| items[i].clone())
                .collect()
        })
        .collect()
}

fn instances(
    rule: RuleName,
    path: &[Frame],
    hole: &Expr,
    ct: &ClassTable,
    fresh: &mut Fresh,
) -> Vec<Expr> {
    let rebuild = |path: &[Frame], hole: Expr| plug(path.to_vec(), hole);
    match (rule, hole) {
        (RuleName::New, Expr::New(c, args)) if args.iter().all(Expr::is_atomic) => {
            if matches!(path.last(), Some(Frame::BlockDecl { ty, .. }) if !ty.is_affine()) {
                return Vec::new();
            }
            let x = fresh.ident("n");
            let b = Block::new(
                vec![Decl::new(DeclType::plain(c), x.clone(), hole.clone())],
                Expr::Var(x.clone()),
                [x].into(),
            );
            vec![rebuild(path, Expr::Block(b))]
        }
        (RuleName::FieldAccess, Expr::FieldAccess(r, f)) => {
            let Expr::Var(x) = &**r else {
                return Vec::new();
            };
            let Some((_, d, inner)) = dec(path, x) else {
                return Vec::new();
            };
            let Some((k, args)) = field_of(ct, d, f) else {
                return Vec::new();
            };
            if matches!(&args[k], Expr::Var(y) if inner.contains(y)) {
                return Vec::new();
            }
            vec![rebuild(path, args[k].clone())]
        }
        (RuleName::FieldAssign, Expr::FieldAssign(r, f, v)) if v.is_atomic() => {
            let Expr::Var(x) = &**r else {
                return Vec::new();
            };
            let Some((i, d, inner)) = dec(path, x) else {
                return Vec::new();
            };
            let Some((k, _)) = field_of(ct, d, f) else {
                return Vec::new();
            };
            if matches!(&**v, Expr::Var(y) if inner.contains(y)) {
                return Vec::new();
            }
            let mut p = path.to_vec();
            set_dv_arg(&mut p, i, x, k, (**v).clone());
            vec![plug(p, (**v).clone())]
        }
        (RuleName::Invk, Expr::Invoke(r, m, vs)) if vs.iter().all(is_value) => {
            let Expr::Var(x) = &**r else {
                return Vec::new();
            };
            let Some((_, d, _)) = dec(path, x) else {
                return Vec::new();
            };
            let Expr::New(c, _) = &d.init else {
                return Vec::new();
            };
            let Some(sig) = ct.method(c, m) else {
                return Vec::new();
            };
            if sig.params.len() != vs.len() {
                return Vec::new();
            }
            let this = fresh.ident("this");
            let mut map = std::collections::BTreeMap::new();
            map.insert(Ident::this(), this.clone());
            let mut decls = vec![Decl::new(DeclType::plain(c), this, Expr::Var(x.clone()))];
            for (p, v) in sig.params.iter().zip(vs) {
                let y = fresh.rename(&p.var);
                map.insert(p.var.clone(), y.clone());
                decls.push(Decl::new(p.ty.clone(), y, v.clone()));
            }
            let body = rename_fresh(&sig.body, &map, fresh);
            vec![rebuild(
                path,
                Expr::Block(Block::new(decls, body, BTreeSet::new())),
            )]
        }
        (RuleName::AliasElim | RuleName::AffineElim, v) => {
            elim(rule, path, v, fresh).into_iter().collect()
        }
        (RuleName::Garbage, Expr::Block(b)) => {
            garbage(b).into_iter().map(|h| rebuild(path, h)).collect()
        }
        (RuleName::MoveDec, Expr::Block(b)) => {
            move_dec(b).into_iter().map(|h| rebuild(path, h)).collect()
        }
        (RuleName::MoveBody, Expr::Block(b)) => {
            move_body(b).into_iter().map(|h| rebuild(path, h)).collect()
        }
        (RuleName::MoveSubterm, h) => move_subterm(h)
            .into_iter()
            .map(|h| rebuild(path, h))
            .collect(),
        _ => Vec::new(),
    }
}

/// alias-elim `{dvs C x=y ds; e} -> {dvs ds; e}[y/x]` and affine-elim
/// `{dvs a C x=v ds; e} -> {dvs ds; e}[v/x]` for a capsule `v`.
fn elim(rule: RuleName, path: &[Frame], v: &Expr, fresh: &mut Fresh) -> Option<Expr> {
    let (
        Frame::BlockDecl {
            before,
            ty,
            var,
            after,
            body,
            annot,
        },
        rest,
    ) = path.split_last()?
    else {
        return None;
    };
    let ok = match (rule, v) {
        (RuleName::AliasElim, Expr::Var(y)) => !ty.is_affine() && y != var,
        (RuleName::AliasElim, Expr::Int(_)) => !ty.is_affine(),
        (RuleName::AffineElim, Expr::Int(_)) => ty.is_affine(),
        (RuleName::AffineElim, v) => {
            ty.is_affine() && is_block_value_expr(v) && free_vars(v).is_empty()
        }
        _ => false,
    };
    if !ok {
        return None;
    }
    let all: Vec<Decl> = before.iter().chain(after).cloned().collect();
    let (decls, body) = match v {
        Expr::Var(y) => (
            all.iter()
                .map(|d| {
                    Decl::new(
                        d.ty.clone(),
                        d.var.clone(),
                        subst_var_with(&d.init, y, var, fresh),
                    )
                })
                .collect(),
            subst_var_with(body, y, var, fresh),
        ),
        v => subst_value_block(&all, body, v, var, fresh),
    };
    let annot = annot.iter().filter(|x| *x != var).cloned().collect();
    Some(plug(
        rest.to_vec(),
        Expr::Block(Block::new(decls, body, annot)),
    ))
}

/// `{dvs ds; e} -> {ds; e}` when nothing left mentions `dom(dvs)`.
fn garbage(b: &Block) -> Vec<Expr> {
    let dvs: Vec<Ident> = b.dvs().map(|d| d.var.clone()).collect();
    let mut live: BTreeSet<Ident> = free_vars(&b.body);
    for d in b.decls.iter().filter(|d| !d.is_dv()) {
        live.extend(free_vars(&d.init));
    }
    loop {
        let more: BTreeSet<Ident> = b
            .dvs()
            .filter(|d| live.contains(&d.var))
            .flat_map(|d| free_vars(&d.init))
            .filter(|x| !live.contains(x))
            .collect();
        if more.is_empty() {
            break;
        }
        live.extend(more);
    }
    let dead: Vec<Ident> = dvs.into_iter().filter(|x| !live.contains(x)).collect();
    subsets(&dead)
        .into_iter()
        .filter_map(|s| {
            let s: BTreeSet<Ident> = s.into_iter().collect();
            let decls: Vec<Decl> = b
                .decls
                .iter()
                .filter(|d| !s.contains(&d.var))
                .cloned()
                .collect();
            let mentioned: BTreeSet<Ident> = free_vars_decls(&decls)
                .into_iter()
                .chain(free_vars(&b.body))
                .collect();
            if mentioned.iter().any(|x| s.contains(x)) {
                return None;
            }
            let annot = b
                .annot
                .iter()
                .filter(|x| !s.contains(*x))
                .cloned()
                .collect();
            Some(Expr::Block(Block::new(decls, (*b.body).clone(), annot)))
        })
        .collect()
}

/// Ways to split `inner` into moved evaluated declarations and the rest,
/// keeping the moved ones clear of the rest's binders.
fn splits(inner: &Block, excluded: &BTreeSet<Ident>) -> Vec<(Vec<Decl>, Block)> {
    let cands: Vec<Ident> = inner
        .dvs()
        .map(|d| d.var.clone())
        .filter(|x| !excluded.contains(x))
        .collect();
    subsets(&cands)
        .into_iter()
        .filter_map(|s| {
            let s: BTreeSet<Ident> = s.into_iter().collect();
            let (out, stay): (Vec<Decl>, Vec<Decl>) = inner
                .decls
                .iter()
                .cloned()
                .partition(|d| s.contains(&d.var));
            let stay_dom: BTreeSet<Ident> = stay.iter().map(|d| d.var.clone()).collect();
            if free_vars_decls(&out).iter().any(|x| stay_dom.contains(x)) {
                return None;
            }
            let annot = inner
                .annot
                .iter()
                .filter(|x| stay_dom.contains(*x))
                .cloned()
                .collect();
            Some((out, Block::new(stay, (*inner.body).clone(), annot)))
        })
        .collect()
}

fn clear_of(moved: &[Decl], fv: &BTreeSet<Ident>) -> bool {
    moved.iter().all(|d| !fv.contains(&d.var))
}

/// `{dvs C x={dvs' ds; e} ds'; e'} -> {dvs dvs' C x={ds; e} ds'; e'}`.
fn move_dec(outer: &Block) -> Vec<Expr> {
    let Some(k) = outer.decls.iter().position(|d| !d.is_dv()) else {
        return Vec::new();
    };
    let d = &outer.decls[k];
    let Expr::Block(inner) = &d.init else {
        return Vec::new();
    };
    let excluded = if d.ty.is_affine() {
        inner.annot.clone()
    } else {
        BTreeSet::new()
    };
    let others: Vec<Decl> = outer
        .decls
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, d)| d.clone())
        .collect();
    let fv_outer: BTreeSet<Ident> = free_vars_decls(&others)
        .into_iter()
        .chain(free_vars(&outer.body))
        .collect();
    splits(inner, &excluded)
        .into_iter()
        .filter(|(out, _)| clear_of(out, &fv_outer))
        .map(|(out, rest)| {
            let mut decls = outer.decls[..k].to_vec();
            decls.extend(out);
            decls.push(Decl::new(d.ty.clone(), d.var.clone(), Expr::Block(rest)));
            decls.extend(outer.decls[k + 1..].iter().cloned());
            Expr::Block(Block::new(
                decls,
                (*outer.body).clone(),
                outer.annot.clone(),
            ))
        })
        .collect()
}

/// `{dvs; {dvs' ds; e}} -> {dvs dvs'; {ds; e}}`.
fn move_body(outer: &Block) -> Vec<Expr> {
    if !outer.decls.iter().all(Decl::is_dv) {
        return Vec::new();
    }
    let Expr::Block(inner) = &*outer.body else {
        return Vec::new();
    };
    let fv_outer = free_vars_decls(&outer.decls);
    splits(inner, &BTreeSet::new())
        .into_iter()
        .filter(|(out, _)| clear_of(out, &fv_outer))
        .map(|(out, rest)| {
            let mut decls = outer.decls.clone();
            decls.extend(out);
            Expr::Block(Block::new(decls, Expr::Block(rest), outer.annot.clone()))
        })
        .collect()
}

/// `E_v[{dvs dvs'; x}] -> {dvs; E_v[{dvs'; x}]}` for the one-frame value
/// contexts `[ ].f`, `[ ].f=e`, `x.f=[ ]`, `new C(xs,[ ],es)`, `[ ].m(es)`.
fn move_subterm(h: &Expr) -> Vec<Expr> {
    let (bv, rebuild): (&Expr, Box<dyn Fn(Expr) -> Expr>) = match h {
        Expr::FieldAccess(r, f) => (
            r,
            Box::new(move |x| Expr::FieldAccess(Box::new(x), f.clone())),
        ),
        Expr::FieldAssign(r, f, v) if is_block_value_expr(r) => (
            r,
            Box::new(move |x| Expr::FieldAssign(Box::new(x), f.clone(), v.clone())),
        ),
        Expr::FieldAssign(r, f, v) if matches!(**r, Expr::Var(_)) => (
            v,
            Box::new(move |x| Expr::FieldAssign(r.clone(), f.clone(), Box::new(x))),
        ),
        Expr::Invoke(r, m, args) => (
            r,
            Box::new(move |x| Expr::Invoke(Box::new(x), m.clone(), args.clone())),
        ),
        Expr::New(c, args) => {
            let Some(i) = args.iter().position(|a| !a.is_atomic()) else {
                return Vec::new();
            };
            (
                &args[i],
                Box::new(move |x| {
                    let mut a = args.clone();
                    a[i] = x;
                    Expr::New(c.clone(), a)
                }),
            )
        }
        _ => return Vec::new(),
    };
    let Expr::Block(inner) = bv else {
        return Vec::new();
    };
    if !is_block_value_expr(bv) {
        return Vec::new();
    }
    let marker = Ident::new("%hole");
    let mut ctx_fv = free_vars(&rebuild(Expr::Var(marker.clone())));
    ctx_fv.remove(&marker);
    splits(inner, &BTreeSet::new())
        .into_iter()
        .filter(|(out, _)| clear_of(out, &ctx_fv))
        .map(|(out, rest)| {
            let annot = inner
                .annot
                .iter()
                .filter(|x| out.iter().any(|d| &d.var == *x))
                .cloned()
                .collect();
            Expr::Block(Block::new(out, rebuild(Expr::Block(rest)), annot))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::AnnotPolicy;
    use crate::parse::{parse_expr, parse_program};
    use crate::syntactic::run;

    fn ct() -> ClassTable {
        parse_program(
            "class C { C f; } class D { D f; } class A { int v; } class B { A f; } 0",
            AnnotPolicy::Reach,
        )
        .unwrap()
        .ct
    }

    fn check(before: &str, after: &str, rule: RuleName) -> Result<(), CheckError> {
        check_step(
            &parse_expr(before).unwrap(),
            &parse_expr(after).unwrap(),
            rule,
            &ct(),
        )
    }

    #[test]
    fn accepts_hand_written_instances() {
        use RuleName::*;
        check("{C x=new C(x); x.f}", "{C x=new C(x); x}", FieldAccess).unwrap();
        check("new C(0)", "{C z=new C(0); z}", New).unwrap();
        check(
            "{C x=new C(0); C y=x; y.f}",
            "{C x=new C(0); x.f}",
            AliasElim,
        )
        .unwrap();
        check(
            "{a C y={C x=new C(x); x}; y}",
            "{C x=new C(x); x}",
            AffineElim,
        )
        .unwrap();
        check(
            "{D d=new D(d); C x=new C(0); x}",
            "{C x=new C(0); x}",
            Garbage,
        )
        .unwrap();
        check(
            "{A a=new A(0); B b=new B(a); {A a1=new A(1); b.f=a1}}",
            "{A a=new A(0); B b=new B(a); A a1=new A(1); b.f=a1}",
            MoveBody,
        )
        .unwrap();
        check(
            "{A a=new A(0); B b=new B(a); A a1=new A(1); b.f=a1}",
            "{A a=new A(0); B b=new B(a1); A a1=new A(1); a1}",
            FieldAssign,
        )
        .unwrap();
        check(
            "{C x={D d=new D(d); new C(0)}; x}",
            "{D d=new D(d); C x=new C(0); x}",
            MoveDec,
        )
        .unwrap();
        check("{C z=new C(z); z}.f", "{C z=new C(z); z.f}", MoveSubterm).unwrap();
    }

    #[test]
    fn rejects_wrong_rules_and_results() {
        use RuleName::*;
        assert!(check("{C x=new C(x); x.f}", "{C x=new C(x); x}", Garbage).is_err());
        assert!(check("{C x=new C(x); x.f}", "{C x=new C(x); 0}", FieldAccess).is_err());
        // `new` never fires directly under a plain declaration
        assert!(check("{C x=new C(x); x}", "{C x={C z=new C(z); z}; x}", New).is_err());
        // affine move-dec may not take an annotated declaration
        assert!(check(
            "{a C x={C y=new C(0); y}^[y]; x.f}",
            "{C y=new C(0); a C x={y}; x.f}",
            MoveDec
        )
        .is_err());
        // move-dec may not extrude
        assert!(check(
            "{C x={D d=new D(e); D e=new D(d); new C(0)}; x}",
            "{D d=new D(e); C x={D e=new D(d); new C(0)}; x}",
            MoveDec
        )
        .is_err());
    }

    #[test]
    fn whole_traces_check() {
        let ct = ct();
        for src in [
            "{A a=new A(0); B b=new B(a); {A a1=new A(1); b.f=a1}}",
            "{C x=new C(x); x}",
            "{a C x=new C(x); x}",
            "{C x=new C(x); C y=new C(x); y.f=x.f}",
        ] {
            let t = run(&parse_expr(src).unwrap(), &ct, 100);
            check_trace(&t, &ct).unwrap_or_else(|(i, e)| panic!("{src}: step {i}: {e}"));
        }
    }
}
