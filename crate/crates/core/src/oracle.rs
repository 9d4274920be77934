//! Brute-force congruence for cross-checking [`crate::congruence`].
//!
//! Closes a term under single applications of alpha (renaming a binder to
//! a name from a finite pool), reorder (moving an evaluated declaration to
//! the front of its block) and block-elim, at any position, up to a depth
//! bound. Two terms are related when their closures meet. Also samples
//! small term pairs over a two-class table: congruent variants built with
//! random axiom steps in either direction, and near misses.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{map_blocks, Block, Decl, DeclType, Expr, Ident};

pub const ORACLE_CLASSES: &str = "class C { C f; } class D { C c; D d; } 0";

pub const MAX_BLOCKS: usize = 3;
pub const MAX_DECLS: usize = 3;

fn strip_annots(e: &Expr) -> Expr {
    map_blocks(e, &mut |b| b.annot.clear())
}

/// Every identifier in `e`, bound or free.
pub fn names(e: &Expr) -> BTreeSet<Ident> {
    let mut out = BTreeSet::new();
    e.visit(&mut |s| match s {
        Expr::Var(x) => {
            out.insert(x.clone());
        }
        Expr::Block(b) => out.extend(b.decls.iter().map(|d| d.var.clone())),
        _ => {}
    });
    out
}

/// Renames free occurrences of `x` to `y`; `y` must not occur in `e`.
fn rename(e: &Expr, x: &Ident, y: &Ident) -> Expr {
    let go = |e: &Expr| rename(e, x, y);
    match e {
        Expr::Var(v) if v == x => Expr::Var(y.clone()),
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(go(r)), f.clone()),
        Expr::FieldAssign(r, f, v) => {
            Expr::FieldAssign(Box::new(go(r)), f.clone(), Box::new(go(v)))
        }
        Expr::New(c, a) => Expr::New(c.clone(), a.iter().map(go).collect()),
        Expr::Invoke(r, m, a) => {
            Expr::Invoke(Box::new(go(r)), m.clone(), a.iter().map(go).collect())
        }
        Expr::Block(b) if b.decls.iter().any(|d| &d.var == x) => e.clone(),
        Expr::Block(b) => Expr::Block(Block::new(
            b.decls
                .iter()
                .map(|d| Decl::new(d.ty.clone(), d.var.clone(), go(&d.init)))
                .collect(),
            go(&b.body),
            b.annot.clone(),
        )),
    }
}

/// Applies `f` at every subterm and returns each resulting whole term.
fn everywhere(e: &Expr, f: &dyn Fn(&Expr) -> Vec<Expr>) -> Vec<Expr> {
    let mut out = f(e);
    match e {
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => {}
        Expr::FieldAccess(r, fl) => {
            out.extend(
                everywhere(r, f)
                    .into_iter()
                    .map(|r| Expr::FieldAccess(Box::new(r), fl.clone())),
            );
        }
        Expr::FieldAssign(r, fl, v) => {
            out.extend(
                everywhere(r, f)
                    .into_iter()
                    .map(|r| Expr::FieldAssign(Box::new(r), fl.clone(), v.clone())),
            );
            out.extend(
                everywhere(v, f)
                    .into_iter()
                    .map(|v| Expr::FieldAssign(r.clone(), fl.clone(), Box::new(v))),
            );
        }
        Expr::New(c, args) | Expr::Invoke(_, c, args) => {
            for (i, a) in args.iter().enumerate() {
                for a2 in everywhere(a, f) {
                    let mut args2 = args.clone();
                    args2[i] = a2;
                    out.push(match e {
                        Expr::Invoke(r, _, _) => Expr::Invoke(r.clone(), c.clone(), args2),
                        _ => Expr::New(c.clone(), args2),
                    });
                }
            }
            if let Expr::Invoke(r, m, args) = e {
                out.extend(
                    everywhere(r, f)
                        .into_iter()
                        .map(|r| Expr::Invoke(Box::new(r), m.clone(), args.clone())),
                );
            }
        }
        Expr::Block(b) => {
            for (i, d) in b.decls.iter().enumerate() {
                for init in everywhere(&d.init, f) {
                    let mut b2 = b.clone();
                    b2.decls[i].init = init;
                    out.push(Expr::Block(b2));
                }
            }
            for body in everywhere(&b.body, f) {
                let mut b2 = b.clone();
                b2.body = Box::new(body);
                out.push(Expr::Block(b2));
            }
        }
    }
    out
}

/// One axiom step in the simplifying direction, at any position.
pub fn neighbours(e: &Expr, pool: &BTreeSet<Ident>) -> Vec<Expr> {
    let used = names(e);
    let targets: Vec<&Ident> = pool.iter().filter(|y| !used.contains(*y)).collect();
    everywhere(e, &|s| {
        let Expr::Block(b) = s else { return Vec::new() };
        let mut out = Vec::new();
        if b.decls.is_empty() {
            out.push((*b.body).clone());
        }
        for i in 1..b.decls.len() {
            if b.decls[i].is_dv() {
                let mut b2 = b.clone();
                let d = b2.decls.remove(i);
                b2.decls.insert(0, d);
                out.push(Expr::Block(b2));
            }
        }
        for d in &b.decls {
            for y in &targets {
                out.push(alpha(b, &d.var, y));
            }
        }
        out
    })
}

fn alpha(b: &Block, x: &Ident, y: &Ident) -> Expr {
    let decls = b
        .decls
        .iter()
        .map(|d| {
            let var = if &d.var == x {
                y.clone()
            } else {
                d.var.clone()
            };
            Decl::new(d.ty.clone(), var, rename(&d.init, x, y))
        })
        .collect();
    Expr::Block(Block::new(decls, rename(&b.body, x, y), BTreeSet::new()))
}

/// Terms reachable from `e` in at most `depth` steps.
pub fn closure(e: &Expr, depth: usize, pool: &BTreeSet<Ident>) -> HashSet<Expr> {
    let start = strip_annots(e);
    let mut seen: HashSet<Expr> = HashSet::from([start.clone()]);
    let mut frontier = vec![start];
    for _ in 0..depth {
        let mut next = Vec::new();
        for t in &frontier {
            for n in neighbours(t, pool) {
                if seen.insert(n.clone()) {
                    next.push(n);
                }
            }
        }
        frontier = next;
    }
    seen
}

/// Whether the closures of `a` and `b` meet within `depth` steps in total.
pub fn brute_congruent(a: &Expr, b: &Expr, depth: usize) -> bool {
    let mut pool: BTreeSet<Ident> = names(a).union(&names(b)).cloned().collect();
    // one spare name lets two binders swap names
    pool.insert(Ident::new("%spare"));
    let ca = closure(a, depth - depth / 2, &pool);
    let cb = closure(b, depth / 2, &pool);
    cb.iter().any(|t| ca.contains(t))
}

// ---------------------------------------------------------------------------
// Sampling

struct Sampler {
    rng: ChaCha8Rng,
    next: usize,
    blocks: usize,
}

impl Sampler {
    fn ident(&mut self) -> Ident {
        self.next += 1;
        Ident::new(&format!("x{}", self.next))
    }

    fn pick(&mut self, scope: &[Ident]) -> Expr {
        match scope.choose(&mut self.rng) {
            Some(x) if self.rng.gen_bool(0.9) => Expr::Var(x.clone()),
            _ => Expr::var("o"),
        }
    }

    fn block(&mut self, outer: &[Ident]) -> Expr {
        self.blocks += 1;
        let n = self.rng.gen_range(0..=MAX_DECLS);
        let vars: Vec<Ident> = (0..n).map(|_| self.ident()).collect();
        let scope: Vec<Ident> = outer.iter().chain(&vars).cloned().collect();
        let decls = vars
            .into_iter()
            .map(|x| {
                let class = if self.rng.gen_bool(0.5) { "C" } else { "D" };
                let init = match self.rng.gen_range(0..10) {
                    0..=4 => {
                        let arity = if class == "C" { 1 } else { 2 };
                        Expr::New(
                            class.into(),
                            (0..arity).map(|_| self.pick(&scope)).collect(),
                        )
                    }
                    5..=6 => Expr::field(self.pick(&scope), "f"),
                    7 => self.pick(&scope),
                    _ if self.blocks < MAX_BLOCKS => self.block(&scope),
                    _ => Expr::field(self.pick(&scope), "f"),
                };
                Decl::new(DeclType::plain(class), x, init)
            })
            .collect();
        let body = if self.blocks < MAX_BLOCKS && self.rng.gen_bool(0.2) {
            self.block(&scope)
        } else if self.rng.gen_bool(0.3) {
            Expr::field(self.pick(&scope), "f")
        } else {
            self.pick(&scope)
        };
        Expr::Block(Block::new(decls, body, BTreeSet::new()))
    }

    fn term(&mut self) -> Expr {
        self.blocks = 0;
        self.block(&[])
    }

    /// A random axiom step in either direction.
    fn perturb(&mut self, e: &Expr) -> Expr {
        let fresh = self.ident();
        let rng = &mut self.rng;
        let mut moves: Vec<Expr> = everywhere(e, &|s| {
            let Expr::Block(b) = s else { return Vec::new() };
            let mut out = Vec::new();
            for (i, d) in b.decls.iter().enumerate() {
                out.push(alpha(b, &d.var, &fresh));
                if d.is_dv() {
                    for j in 0..b.decls.len() {
                        if j != i {
                            let mut b2 = b.clone();
                            let d = b2.decls.remove(i);
                            b2.decls.insert(j, d);
                            out.push(Expr::Block(b2));
                        }
                    }
                }
                if !matches!(d.init, Expr::Block(_)) {
                    let mut b2 = b.clone();
                    b2.decls[i].init =
                        Expr::Block(Block::new(Vec::new(), d.init.clone(), BTreeSet::new()));
                    out.push(Expr::Block(b2));
                }
            }
            if b.decls.is_empty() {
                out.push((*b.body).clone());
            }
            out
        });
        moves.shuffle(rng);
        moves.pop().unwrap_or_else(|| e.clone())
    }

    /// A small change that usually breaks congruence.
    fn mutate(&mut self, e: &Expr) -> Expr {
        let vars: Vec<Ident> = names(e).into_iter().collect();
        let rng = &mut self.rng;
        let mut moves: Vec<Expr> = everywhere(e, &|s| match s {
            Expr::Var(x) => vars
                .iter()
                .filter(|y| *y != x)
                .map(|y| Expr::Var(y.clone()))
                .collect(),
            Expr::New(c, args) => {
                let c2 = if &**c == "C" { "D" } else { "C" };
                let mut a = args.clone();
                a.resize(if c2 == "C" { 1 } else { 2 }, Expr::var("o"));
                vec![Expr::New(c2.into(), a)]
            }
            Expr::Block(b) => (1..b.decls.len())
                .filter(|&i| !b.decls[i].is_dv() && !b.decls[i - 1].is_dv())
                .map(|i| {
                    let mut b2 = b.clone();
                    b2.decls.swap(i - 1, i);
                    Expr::Block(b2)
                })
                .collect(),
            _ => Vec::new(),
        });
        moves.shuffle(rng);
        moves.pop().unwrap_or_else(|| e.clone())
    }
}

/// Term pairs for the equivalence check: per base term, variants at one to
/// three random axiom steps and mutated near misses.
pub fn sample_pairs(seed: u64, bases: usize) -> Vec<(Expr, Expr)> {
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        next: 0,
        blocks: 0,
    };
    let mut out = Vec::new();
    for _ in 0..bases {
        let e = s.term();
        for k in 1..=3 {
            let mut v = e.clone();
            for _ in 0..k {
                v = s.perturb(&v);
            }
            out.push((e.clone(), v));
        }
        let m = s.mutate(&e);
        let m = s.perturb(&m);
        out.push((e.clone(), m));
        let other = s.term();
        out.push((e, other));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_expr;

    fn brute(a: &str, b: &str) -> bool {
        brute_congruent(&parse_expr(a).unwrap(), &parse_expr(b).unwrap(), 6)
    }

    #[test]
    fn axioms_close_small_examples() {
        assert!(brute("{C x=new C(x); x}", "{C y=new C(y); y}"));
        assert!(brute(
            "{C x=y.f; C z=new C(x); z}",
            "{C z=new C(x); C x=y.f; z}"
        ));
        assert!(brute("{C x={y}; x}", "{C x=y; x}"));
        assert!(!brute("{C x=y.f; C z=z.f; z}", "{C z=z.f; C x=y.f; z}"));
        assert!(!brute("{C x=new C(x); x}", "{C x=new C(o); x}"));
    }

    #[test]
    fn samples_respect_bounds() {
        for (a, b) in sample_pairs(3, 50) {
            for t in [a, b] {
                let mut blocks = 0;
                t.visit(&mut |s| {
                    if let Expr::Block(b) = s {
                        assert!(b.decls.len() <= MAX_DECLS);
                        if !b.decls.is_empty() {
                            blocks += 1;
                        }
                    }
                });
                assert!(blocks <= MAX_BLOCKS);
            }
        }
    }
}
