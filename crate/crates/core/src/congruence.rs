//! Congruence of terms: α-conversion, empty-block elimination and, for the
//! syntactic calculus, free reordering of evaluated declarations.
//!
//! Decided by normalization. Binders are renamed by position, empty blocks
//! are removed and evaluated declarations are placed first, ordered by a
//! name-independent colouring; remaining ties are broken by trying every
//! order and keeping the least result.

use std::collections::BTreeMap;

use crate::ast::{collapse_empty_blocks, Block, Decl, Expr, Ident};

/// Above this many tied orderings a block keeps its sorted order without
/// searching; such blocks may then be distinguished spuriously.
pub const TIE_LIMIT: usize = 5040;

#[derive(Clone, Copy, Debug)]
struct Opts {
    reorder: bool,
    collapse: bool,
    annots: bool,
}

/// Canonical representative of the congruence class of `e`, with empty
/// annotations.
pub fn canonicalize(e: &Expr) -> Expr {
    let e = collapse_empty_blocks(e.clone());
    normalize(
        &e,
        &BTreeMap::new(),
        0,
        Opts {
            reorder: true,
            collapse: true,
            annots: false,
        },
    )
}

/// Syntactic-calculus congruence.
pub fn congruent(a: &Expr, b: &Expr) -> bool {
    canonicalize(a) == canonicalize(b)
}

/// Canonical form under α-conversion and block elimination only.
pub fn canonicalize_conventional(e: &Expr) -> Expr {
    let e = collapse_empty_blocks(e.clone());
    normalize(
        &e,
        &BTreeMap::new(),
        0,
        Opts {
            reorder: false,
            collapse: true,
            annots: false,
        },
    )
}

/// Conventional-calculus congruence (no reordering).
pub fn congruent_conventional(a: &Expr, b: &Expr) -> bool {
    canonicalize_conventional(a) == canonicalize_conventional(b)
}

/// α-normal form: binders renamed by position, nothing else changed.
pub fn alpha_normalize(e: &Expr) -> Expr {
    normalize(
        e,
        &BTreeMap::new(),
        0,
        Opts {
            reorder: false,
            collapse: false,
            annots: true,
        },
    )
}

/// Equality up to renaming of bound variables, annotations included.
pub fn alpha_eq(a: &Expr, b: &Expr) -> bool {
    alpha_normalize(a) == alpha_normalize(b)
}

fn canon_ident(depth: usize, pos: usize) -> Ident {
    Ident {
        name: format!("%{depth}").into(),
        id: pos as u32,
    }
}

fn normalize(e: &Expr, env: &BTreeMap<Ident, Ident>, depth: usize, o: Opts) -> Expr {
    let go = |e: &Expr| normalize(e, env, depth, o);
    match e {
        Expr::Var(x) => Expr::Var(env.get(x).cloned().unwrap_or_else(|| x.clone())),
        Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(go(r)), f.clone()),
        Expr::FieldAssign(r, f, v) => {
            Expr::FieldAssign(Box::new(go(r)), f.clone(), Box::new(go(v)))
        }
        Expr::New(c, args) => Expr::New(c.clone(), args.iter().map(go).collect()),
        Expr::Invoke(r, m, args) => {
            Expr::Invoke(Box::new(go(r)), m.clone(), args.iter().map(go).collect())
        }
        Expr::Block(b) => {
            if o.collapse && b.decls.is_empty() {
                return normalize(&b.body, env, depth, o);
            }
            if !o.reorder {
                let order: Vec<usize> = (0..b.decls.len()).collect();
                return build(b, &order, env, depth, o);
            }
            let dv_idx: Vec<usize> = (0..b.decls.len()).filter(|&i| b.decls[i].is_dv()).collect();
            let rest: Vec<usize> = (0..b.decls.len())
                .filter(|&i| !b.decls[i].is_dv())
                .collect();
            let groups = tie_groups(b, &dv_idx, &rest, env);
            let product = groups
                .iter()
                .map(|g| factorial(g.len()))
                .try_fold(1usize, |acc, n| {
                    acc.checked_mul(n).filter(|&p| p <= TIE_LIMIT)
                });
            let mut best: Option<Expr> = None;
            let mut consider = |order: Vec<usize>| {
                let cand = build(b, &order, env, depth, o);
                if best.as_ref().is_none_or(|bst| cand < *bst) {
                    best = Some(cand);
                }
            };
            if product.is_none() {
                let mut order: Vec<usize> = groups.concat();
                order.extend(&rest);
                consider(order);
            } else {
                for_each_arrangement(&groups, &mut |dvs: &[usize]| {
                    let mut order = dvs.to_vec();
                    order.extend(&rest);
                    consider(order);
                });
            }
            best.expect("at least one arrangement")
        }
    }
}

fn build(b: &Block, order: &[usize], env: &BTreeMap<Ident, Ident>, depth: usize, o: Opts) -> Expr {
    let mut env2 = env.clone();
    for (pos, &i) in order.iter().enumerate() {
        env2.insert(b.decls[i].var.clone(), canon_ident(depth, pos));
    }
    let decls = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let d = &b.decls[i];
            Decl::new(
                d.ty.clone(),
                canon_ident(depth, pos),
                normalize(&d.init, &env2, depth + 1, o),
            )
        })
        .collect();
    let body = normalize(&b.body, &env2, depth + 1, o);
    let annot = if o.annots {
        b.annot
            .iter()
            .map(|x| env2.get(x).cloned().unwrap_or_else(|| x.clone()))
            .collect()
    } else {
        Default::default()
    };
    Expr::Block(Block::new(decls, body, annot))
}

/// Colour of one constructor argument before refinement.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum ArgColor {
    Int(i64),
    Outer(Ident),
    Rest(usize),
    Local(usize),
}

/// Partitions the evaluated declarations into ordered groups of equal
/// colour. Colours depend only on classes, integer arguments, variables free
/// in the block, positions of the other declarations and, iteratively, the
/// colours of referenced evaluated declarations.
fn tie_groups(
    b: &Block,
    dv_idx: &[usize],
    rest: &[usize],
    env: &BTreeMap<Ident, Ident>,
) -> Vec<Vec<usize>> {
    let local: BTreeMap<&Ident, usize> = dv_idx
        .iter()
        .enumerate()
        .map(|(k, &i)| (&b.decls[i].var, k))
        .collect();
    let rest_pos: BTreeMap<&Ident, usize> = rest
        .iter()
        .enumerate()
        .map(|(k, &i)| (&b.decls[i].var, k))
        .collect();
    let args: Vec<(String, Vec<ArgColor>)> = dv_idx
        .iter()
        .map(|&i| {
            let Expr::New(c, xs) = &b.decls[i].init else {
                unreachable!("dv")
            };
            let cols = xs
                .iter()
                .map(|a| match a {
                    Expr::Int(n) => ArgColor::Int(*n),
                    Expr::Var(x) => {
                        if let Some(&k) = local.get(x) {
                            ArgColor::Local(k)
                        } else if let Some(&k) = rest_pos.get(x) {
                            ArgColor::Rest(k)
                        } else {
                            ArgColor::Outer(env.get(x).cloned().unwrap_or_else(|| x.clone()))
                        }
                    }
                    _ => unreachable!("dv argument"),
                })
                .collect();
            (c.to_string(), cols)
        })
        .collect();
    // initial colour: local references erased
    let mut color: Vec<usize> = rank(
        &args
            .iter()
            .map(|(c, xs)| {
                let xs: Vec<ArgColor> = xs
                    .iter()
                    .map(|a| match a {
                        ArgColor::Local(_) => ArgColor::Local(0),
                        other => other.clone(),
                    })
                    .collect();
                (c.clone(), xs, Vec::<usize>::new())
            })
            .collect::<Vec<_>>(),
    );
    // who refers to me, by colour and argument slot
    loop {
        let keyed: Vec<_> = args
            .iter()
            .enumerate()
            .map(|(k, (c, xs))| {
                let xs: Vec<ArgColor> = xs
                    .iter()
                    .map(|a| match a {
                        ArgColor::Local(j) => ArgColor::Local(color[*j]),
                        other => other.clone(),
                    })
                    .collect();
                let mut users: Vec<usize> = Vec::new();
                for (j, (_, ys)) in args.iter().enumerate() {
                    for (slot, y) in ys.iter().enumerate() {
                        if *y == ArgColor::Local(k) {
                            users.push(color[j] * 64 + slot);
                        }
                    }
                }
                users.sort_unstable();
                users.insert(0, color[k]);
                (c.clone(), xs, users)
            })
            .collect();
        let next = rank(&keyed);
        let classes = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len();
        let done = classes(&next) == classes(&color);
        color = next;
        if done {
            break;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &i) in dv_idx.iter().enumerate() {
        groups.entry(color[k]).or_default().push(i);
    }
    groups.into_values().collect()
}

fn rank<T: Ord>(keys: &[T]) -> Vec<usize> {
    let mut sorted: Vec<&T> = keys.iter().collect();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(&k).unwrap())
        .collect()
}

fn factorial(n: usize) -> usize {
    (1..=n)
        .try_fold(1usize, |a, k| a.checked_mul(k))
        .unwrap_or(usize::MAX)
}

fn for_each_arrangement(groups: &[Vec<usize>], f: &mut impl FnMut(&[usize])) {
    fn rec(groups: &[Vec<usize>], acc: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        match groups.split_first() {
            None => f(acc),
            Some((g, tail)) => {
                let mut g = g.clone();
                permute(&mut g, 0, &mut |p: &[usize]| {
                    let mark = acc.len();
                    acc.extend_from_slice(p);
                    rec(tail, acc, f);
                    acc.truncate(mark);
                });
            }
        }
    }
    rec(groups, &mut Vec::new(), f)
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_expr;

    fn p(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    #[test]
    fn alpha_and_reorder() {
        assert!(congruent(&p("{D z=new D(z); z}"), &p("{D x=new D(x); x}")));
        assert!(congruent(
            &p("{D x=new D(y); D y=new D(x); x}"),
            &p("{D b=new D(a); D a=new D(b); a}")
        ));
        assert!(!congruent(
            &p("{D x=new D(y); D y=new D(x); x}"),
            &p("{D x=new D(x); D y=new D(x); x}")
        ));
        assert!(congruent(
            &p("{C w={new C(z, z)}; w.f1}"),
            &p("{C w=new C(z, z); w.f1}")
        ));
    }

    #[test]
    fn non_evaluated_order_matters() {
        let a = p("{C x=new C(0); int u=x.f=1; int v=x.f=2; v}");
        let b = p("{C x=new C(0); int v=x.f=2; int u=x.f=1; v}");
        assert!(!congruent(&a, &b));
        let c = p("{int u=x.f=1; C x=new C(0); int v=x.f=2; v}");
        assert!(congruent(&a, &c));
    }

    #[test]
    fn symmetric_ties_resolved() {
        let a = p("{D x=new D(y); D y=new D(x); D z=new D(z); C w=new C(x, z); w}");
        let b = p("{D q=new D(q); D r=new D(s); C w=new C(s, q); D s=new D(r); w}");
        assert!(congruent(&a, &b));
        let c = p("{D q=new D(q); D r=new D(s); C w=new C(r, q); D s=new D(r); w}");
        assert!(congruent(&a, &c));
        let d = p("{D q=new D(q); D r=new D(s); C w=new C(q, r); D s=new D(r); w}");
        assert!(!congruent(&a, &d));
    }

    #[test]
    fn conventional_variant_keeps_order() {
        let a = p("{C x=new C(0); C y=new C(1); y}");
        let b = p("{C y=new C(1); C x=new C(0); y}");
        assert!(congruent(&a, &b));
        assert!(!congruent_conventional(&a, &b));
        assert!(congruent_conventional(
            &p("{ {C x=#0; x} }"),
            &p("{C y=#0; y}")
        ));
    }

    #[test]
    fn alpha_eq_checks_annotations() {
        assert!(alpha_eq(
            &p("{C x=new C(); x}^[x]"),
            &p("{C y=new C(); y}^[y]")
        ));
        assert!(!alpha_eq(
            &p("{C x=new C(); x}^[x]"),
            &p("{C y=new C(); y}^[]")
        ));
        assert!(!alpha_eq(
            &p("{C x=new C(); C y=new C(); x}"),
            &p("{C y=new C(); C x=new C(); x}")
        ));
    }
}
