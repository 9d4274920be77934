//! Term representation shared by both calculi, plus the binding machinery:
//! free variables, capture-avoiding substitution, freshening, well-formedness,
//! value classification, the capsule predicate, transitively-used declarations
//! and block annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Interned-ish name for classes, fields and methods.
pub type Name = Arc<str>;

pub fn name(s: &str) -> Name {
    Arc::from(s)
}

/// The primitive integer type name.
pub const INT: &str = "int";

/// A variable. Two identifiers are the same variable iff both the display
/// name and the unique id agree; freshening changes only the id.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Ident {
    pub name: Name,
    pub id: u32,
}

impl Ident {
    pub fn new(name: &str) -> Ident {
        Ident {
            name: Arc::from(name),
            id: 0,
        }
    }

    pub fn with_id(name: &str, id: u32) -> Ident {
        Ident {
            name: Arc::from(name),
            id,
        }
    }

    pub fn this() -> Ident {
        Ident::new("this")
    }
}

impl fmt::Display for Ident {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.id == 0 {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}#{}", self.name, self.id)
        }
    }
}

/// Object identifier of the conventional heap.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct ObjId(pub u64);

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Qualifier {
    Plain,
    Affine,
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DeclType {
    pub qual: Qualifier,
    pub class: Name,
}

impl DeclType {
    pub fn plain(class: &str) -> DeclType {
        DeclType {
            qual: Qualifier::Plain,
            class: name(class),
        }
    }

    pub fn affine(class: &str) -> DeclType {
        DeclType {
            qual: Qualifier::Affine,
            class: name(class),
        }
    }

    pub fn is_affine(&self) -> bool {
        self.qual == Qualifier::Affine
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Decl {
    pub ty: DeclType,
    pub var: Ident,
    pub init: Expr,
}

impl Decl {
    pub fn new(ty: DeclType, var: Ident, init: Expr) -> Decl {
        Decl { ty, var, init }
    }

    /// An evaluated declaration: plain, initialized by a constructor call
    /// whose arguments are all variables or integer literals.
    pub fn is_dv(&self) -> bool {
        self.ty.qual == Qualifier::Plain
            && matches!(&self.init, Expr::New(_, args) if args.iter().all(Expr::is_atomic))
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Block {
    pub decls: Vec<Decl>,
    pub body: Box<Expr>,
    pub annot: BTreeSet<Ident>,
}

impl Block {
    pub fn new(decls: Vec<Decl>, body: Expr, annot: BTreeSet<Ident>) -> Block {
        Block {
            decls,
            body: Box::new(body),
            annot,
        }
    }

    pub fn declared(&self) -> BTreeSet<Ident> {
        self.decls.iter().map(|d| d.var.clone()).collect()
    }

    pub fn dvs(&self) -> impl Iterator<Item = &Decl> {
        self.decls.iter().filter(|d| d.is_dv())
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Expr {
    Var(Ident),
    Oid(ObjId),
    Int(i64),
    FieldAccess(Box<Expr>, Name),
    FieldAssign(Box<Expr>, Name, Box<Expr>),
    New(Name, Vec<Expr>),
    Invoke(Box<Expr>, Name, Vec<Expr>),
    Block(Block),
}

impl Expr {
    pub fn var(s: &str) -> Expr {
        Expr::Var(Ident::new(s))
    }

    pub fn block(decls: Vec<Decl>, body: Expr) -> Expr {
        Expr::Block(Block::new(decls, body, BTreeSet::new()))
    }

    pub fn field(recv: Expr, f: &str) -> Expr {
        Expr::FieldAccess(Box::new(recv), name(f))
    }

    pub fn assign(recv: Expr, f: &str, rhs: Expr) -> Expr {
        Expr::FieldAssign(Box::new(recv), name(f), Box::new(rhs))
    }

    pub fn new_obj(class: &str, args: Vec<Expr>) -> Expr {
        Expr::New(name(class), args)
    }

    pub fn invoke(recv: Expr, m: &str, args: Vec<Expr>) -> Expr {
        Expr::Invoke(Box::new(recv), name(m), args)
    }

    /// Variable or integer literal: the argument shape allowed in a dv.
    pub fn is_atomic(&self) -> bool {
        matches!(self, Expr::Var(_) | Expr::Int(_))
    }

    pub fn as_var(&self) -> Option<&Ident> {
        match self {
            Expr::Var(x) => Some(x),
            _ => None,
        }
    }

    /// A term is pure when it mentions no object identifier.
    pub fn is_pure(&self) -> bool {
        let mut pure = true;
        self.visit(&mut |e| {
            if matches!(e, Expr::Oid(_)) {
                pure = false;
            }
        });
        pure
    }

    /// Pre-order traversal over every subterm (declaration initializers
    /// before the block body).
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => {}
            Expr::FieldAccess(r, _) => r.visit(f),
            Expr::FieldAssign(r, _, v) => {
                r.visit(f);
                v.visit(f);
            }
            Expr::New(_, args) => args.iter().for_each(|a| a.visit(f)),
            Expr::Invoke(r, _, args) => {
                r.visit(f);
                args.iter().for_each(|a| a.visit(f));
            }
            Expr::Block(b) => {
                b.decls.iter().for_each(|d| d.init.visit(f));
                b.body.visit(f);
            }
        }
    }

    /// Largest unique id occurring anywhere (binders, occurrences, annotations).
    pub fn max_id(&self) -> u32 {
        let mut m = 0;
        self.visit(&mut |e| match e {
            Expr::Var(x) => m = m.max(x.id),
            Expr::Block(b) => {
                for d in &b.decls {
                    m = m.max(d.var.id);
                }
                for x in &b.annot {
                    m = m.max(x.id);
                }
            }
            _ => {}
        });
        m
    }

    /// Number of nodes; used by the generator and by tests as a size bound.
    pub fn size(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }
}

// ---------------------------------------------------------------------------
// Class table

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Param {
    pub ty: DeclType,
    pub var: Ident,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MethodSig {
    pub ret: Name,
    pub params: Vec<Param>,
    pub body: Expr,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ClassDef {
    pub fields: Vec<(Name, Name)>,
    pub methods: BTreeMap<Name, MethodSig>,
}

impl ClassDef {
    pub fn field_index(&self, f: &str) -> Option<usize> {
        self.fields.iter().position(|(_, n)| &**n == f)
    }
}

/// Classes in declaration order; order matters only for rendering.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ClassTable {
    pub classes: Vec<(Name, ClassDef)>,
}

impl ClassTable {
    pub fn class(&self, c: &str) -> Option<&ClassDef> {
        self.classes.iter().find(|(n, _)| &**n == c).map(|(_, d)| d)
    }

    pub fn fields(&self, c: &str) -> Option<&[(Name, Name)]> {
        self.class(c).map(|d| d.fields.as_slice())
    }

    pub fn method(&self, c: &str, m: &str) -> Option<&MethodSig> {
        self.class(c).and_then(|d| d.methods.get(m))
    }

    pub fn has_class(&self, c: &str) -> bool {
        c == INT || self.class(c).is_some()
    }
}

// ---------------------------------------------------------------------------
// Free variables

pub fn free_vars(e: &Expr) -> BTreeSet<Ident> {
    let mut out = BTreeSet::new();
    collect_fv(e, &mut Vec::new(), &mut out);
    out
}

/// Free variables of a declaration sequence (the sequence binds nothing of
/// its own here; callers decide the scope).
pub fn free_vars_decls(ds: &[Decl]) -> BTreeSet<Ident> {
    let mut out = BTreeSet::new();
    for d in ds {
        collect_fv(&d.init, &mut Vec::new(), &mut out);
    }
    out
}

fn collect_fv<'a>(e: &'a Expr, bound: &mut Vec<&'a Ident>, out: &mut BTreeSet<Ident>) {
    match e {
        Expr::Var(x) => {
            if !bound.contains(&x) {
                out.insert(x.clone());
            }
        }
        Expr::Oid(_) | Expr::Int(_) => {}
        Expr::FieldAccess(r, _) => collect_fv(r, bound, out),
        Expr::FieldAssign(r, _, v) => {
            collect_fv(r, bound, out);
            collect_fv(v, bound, out);
        }
        Expr::New(_, args) => args.iter().for_each(|a| collect_fv(a, bound, out)),
        Expr::Invoke(r, _, args) => {
            collect_fv(r, bound, out);
            args.iter().for_each(|a| collect_fv(a, bound, out));
        }
        Expr::Block(b) => {
            let mark = bound.len();
            bound.extend(b.decls.iter().map(|d| &d.var));
            for d in &b.decls {
                collect_fv(&d.init, bound, out);
            }
            collect_fv(&b.body, bound, out);
            bound.truncate(mark);
        }
    }
}

/// Number of free occurrences of `x` in `e`.
pub fn occurrences(e: &Expr, x: &Ident) -> usize {
    match e {
        Expr::Var(y) => usize::from(y == x),
        Expr::Oid(_) | Expr::Int(_) => 0,
        Expr::FieldAccess(r, _) => occurrences(r, x),
        Expr::FieldAssign(r, _, v) => occurrences(r, x) + occurrences(v, x),
        Expr::New(_, args) => args.iter().map(|a| occurrences(a, x)).sum(),
        Expr::Invoke(r, _, args) => {
            occurrences(r, x) + args.iter().map(|a| occurrences(a, x)).sum::<usize>()
        }
        Expr::Block(b) => {
            if b.decls.iter().any(|d| &d.var == x) {
                0
            } else {
                b.decls
                    .iter()
                    .map(|d| occurrences(&d.init, x))
                    .sum::<usize>()
                    + occurrences(&b.body, x)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fresh names

/// Supply of unique ids for one reduction session.
#[derive(Clone, Debug)]
pub struct Fresh {
    next: u32,
}

impl Fresh {
    pub fn starting_at(next: u32) -> Fresh {
        Fresh { next: next.max(1) }
    }

    /// A supply whose ids are all larger than any id in `e`.
    pub fn above(e: &Expr) -> Fresh {
        Fresh::starting_at(e.max_id() + 1)
    }

    pub fn bump_above(&mut self, e: &Expr) {
        self.next = self.next.max(e.max_id() + 1);
    }

    pub fn ident(&mut self, name: &str) -> Ident {
        let id = self.next;
        self.next += 1;
        Ident {
            name: Arc::from(name),
            id,
        }
    }

    pub fn rename(&mut self, x: &Ident) -> Ident {
        let id = self.next;
        self.next += 1;
        Ident {
            name: x.name.clone(),
            id,
        }
    }
}

// ---------------------------------------------------------------------------
// Substitution

/// Renames free variables according to `map` and gives every binder inside
/// `e` a fresh id. With an empty map this is plain freshening.
pub fn rename_fresh(e: &Expr, map: &BTreeMap<Ident, Ident>, fresh: &mut Fresh) -> Expr {
    match e {
        Expr::Var(x) => Expr::Var(map.get(x).cloned().unwrap_or_else(|| x.clone())),
        Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, f) => {
            Expr::FieldAccess(Box::new(rename_fresh(r, map, fresh)), f.clone())
        }
        Expr::FieldAssign(r, f, v) => Expr::FieldAssign(
            Box::new(rename_fresh(r, map, fresh)),
            f.clone(),
            Box::new(rename_fresh(v, map, fresh)),
        ),
        Expr::New(c, args) => Expr::New(
            c.clone(),
            args.iter().map(|a| rename_fresh(a, map, fresh)).collect(),
        ),
        Expr::Invoke(r, m, args) => Expr::Invoke(
            Box::new(rename_fresh(r, map, fresh)),
            m.clone(),
            args.iter().map(|a| rename_fresh(a, map, fresh)).collect(),
        ),
        Expr::Block(b) => {
            let mut inner = map.clone();
            let vars: Vec<Ident> = b
                .decls
                .iter()
                .map(|d| {
                    let y = fresh.rename(&d.var);
                    inner.insert(d.var.clone(), y.clone());
                    y
                })
                .collect();
            let decls = b
                .decls
                .iter()
                .zip(vars)
                .map(|(d, y)| Decl::new(d.ty.clone(), y, rename_fresh(&d.init, &inner, fresh)))
                .collect();
            let annot = b
                .annot
                .iter()
                .map(|x| inner.get(x).cloned().unwrap_or_else(|| x.clone()))
                .collect();
            Expr::Block(Block::new(
                decls,
                rename_fresh(&b.body, &inner, fresh),
                annot,
            ))
        }
    }
}

/// α-equivalent copy where every binder carries a new unique id.
pub fn freshen(e: &Expr, fresh: &mut Fresh) -> Expr {
    rename_fresh(e, &BTreeMap::new(), fresh)
}

/// Renames only binders that repeat an earlier binder (pre-order), so the
/// first declaration of every identifier keeps its name.
pub fn unshadow(e: &Expr, fresh: &mut Fresh) -> Expr {
    fn go(e: &Expr, seen: &mut BTreeSet<Ident>, fresh: &mut Fresh) -> Expr {
        match e {
            Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e.clone(),
            Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(go(r, seen, fresh)), f.clone()),
            Expr::FieldAssign(r, f, v) => {
                let r = go(r, seen, fresh);
                Expr::FieldAssign(Box::new(r), f.clone(), Box::new(go(v, seen, fresh)))
            }
            Expr::New(c, args) => {
                Expr::New(c.clone(), args.iter().map(|a| go(a, seen, fresh)).collect())
            }
            Expr::Invoke(r, m, args) => {
                let r = go(r, seen, fresh);
                Expr::Invoke(
                    Box::new(r),
                    m.clone(),
                    args.iter().map(|a| go(a, seen, fresh)).collect(),
                )
            }
            Expr::Block(b) => {
                let mut b = b.clone();
                for i in 0..b.decls.len() {
                    let z = b.decls[i].var.clone();
                    if seen.contains(&z) {
                        let z2 = fresh.rename(&z);
                        b = rename_binder(&b, &z, &z2, fresh);
                    }
                    seen.insert(b.decls[i].var.clone());
                }
                let decls = b
                    .decls
                    .iter()
                    .map(|d| Decl::new(d.ty.clone(), d.var.clone(), go(&d.init, seen, fresh)))
                    .collect();
                let body = go(&b.body, seen, fresh);
                Expr::Block(Block::new(decls, body, b.annot))
            }
        }
    }
    go(e, &mut BTreeSet::new(), fresh)
}

/// Freshens with a supply derived from the term itself.
pub fn freshen_term(e: &Expr) -> Expr {
    freshen(e, &mut Fresh::above(e))
}

/// Capture-avoiding `e[y/x]`.
pub fn subst_var(e: &Expr, y: &Ident, x: &Ident) -> Expr {
    let mut fresh = Fresh::above(e);
    fresh.next = fresh.next.max(y.id + 1).max(x.id + 1);
    subst_var_with(e, y, x, &mut fresh)
}

pub fn subst_var_with(e: &Expr, y: &Ident, x: &Ident, fresh: &mut Fresh) -> Expr {
    subst_value_with(e, &Expr::Var(y.clone()), x, fresh, false)
}

/// `ds[y/x]`: substitution in a declaration list that does not itself bind `x`.
pub fn subst_var_decls(ds: &[Decl], y: &Ident, x: &Ident, fresh: &mut Fresh) -> Vec<Decl> {
    ds.iter()
        .map(|d| {
            Decl::new(
                d.ty.clone(),
                d.var.clone(),
                subst_var_with(&d.init, y, x, fresh),
            )
        })
        .collect()
}

/// `X[y/x]`.
pub fn subst_annot(annot: &BTreeSet<Ident>, y: &Ident, x: &Ident) -> BTreeSet<Ident> {
    annot
        .iter()
        .map(|z| if z == x { y.clone() } else { z.clone() })
        .collect()
}

/// `e[v/x]` where `v` is a value. The first inserted copy of `v` keeps its
/// binders; every further copy is freshened so binders stay globally unique.
pub fn subst_value(e: &Expr, v: &Expr, x: &Ident, fresh: &mut Fresh) -> Expr {
    subst_value_with(e, v, x, fresh, true)
}

fn subst_value_with(
    e: &Expr,
    v: &Expr,
    x: &Ident,
    fresh: &mut Fresh,
    refresh_copies: bool,
) -> Expr {
    let fv = free_vars(v);
    let mut used = false;
    let mut s = Subst {
        v,
        x,
        fv: &fv,
        fresh,
        used: &mut used,
        refresh_copies,
    };
    s.go(e)
}

/// Substitution over a declaration list and body sharing one copy counter.
pub fn subst_value_block(
    ds: &[Decl],
    body: &Expr,
    v: &Expr,
    x: &Ident,
    fresh: &mut Fresh,
) -> (Vec<Decl>, Expr) {
    let fv = free_vars(v);
    let mut used = false;
    let mut s = Subst {
        v,
        x,
        fv: &fv,
        fresh,
        used: &mut used,
        refresh_copies: true,
    };
    let ds = ds
        .iter()
        .map(|d| Decl::new(d.ty.clone(), d.var.clone(), s.go(&d.init)))
        .collect();
    let body = s.go(body);
    (ds, body)
}

struct Subst<'a> {
    v: &'a Expr,
    x: &'a Ident,
    fv: &'a BTreeSet<Ident>,
    fresh: &'a mut Fresh,
    used: &'a mut bool,
    refresh_copies: bool,
}

impl Subst<'_> {
    fn go(&mut self, e: &Expr) -> Expr {
        match e {
            Expr::Var(y) if y == self.x => {
                if *self.used && self.refresh_copies {
                    freshen(self.v, self.fresh)
                } else {
                    *self.used = true;
                    self.v.clone()
                }
            }
            Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e.clone(),
            Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(self.go(r)), f.clone()),
            Expr::FieldAssign(r, f, w) => {
                let r = self.go(r);
                Expr::FieldAssign(Box::new(r), f.clone(), Box::new(self.go(w)))
            }
            Expr::New(c, args) => Expr::New(c.clone(), args.iter().map(|a| self.go(a)).collect()),
            Expr::Invoke(r, m, args) => {
                let r = self.go(r);
                Expr::Invoke(
                    Box::new(r),
                    m.clone(),
                    args.iter().map(|a| self.go(a)).collect(),
                )
            }
            Expr::Block(b) => {
                if b.decls.iter().any(|d| &d.var == self.x) || occurrences(e, self.x) == 0 {
                    return e.clone();
                }
                // rename binders that would capture free variables of v
                let mut b = b.clone();
                for i in 0..b.decls.len() {
                    let z = b.decls[i].var.clone();
                    if self.fv.contains(&z) {
                        let z2 = self.fresh.rename(&z);
                        b = rename_binder(&b, &z, &z2, self.fresh);
                    }
                }
                let decls = b
                    .decls
                    .iter()
                    .map(|d| Decl::new(d.ty.clone(), d.var.clone(), self.go(&d.init)))
                    .collect();
                let body = self.go(&b.body);
                Expr::Block(Block::new(decls, body, b.annot.clone()))
            }
        }
    }
}

/// Renames binder `z` of block `b` to `z2` (α-conversion of one binder).
pub fn rename_binder(b: &Block, z: &Ident, z2: &Ident, fresh: &mut Fresh) -> Block {
    let decls = b
        .decls
        .iter()
        .map(|d| {
            let var = if &d.var == z {
                z2.clone()
            } else {
                d.var.clone()
            };
            Decl::new(d.ty.clone(), var, subst_var_with(&d.init, z2, z, fresh))
        })
        .collect();
    Block::new(
        decls,
        subst_var_with(&b.body, z2, z, fresh),
        subst_annot(&b.annot, z2, z),
    )
}

// ---------------------------------------------------------------------------
// Values, capsules, reachability

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ValueKind {
    NotValue,
    VarValue(Ident),
    IntValue(i64),
    BlockValue {
        dvs: Vec<Decl>,
        var: Ident,
        annot: BTreeSet<Ident>,
    },
}

pub fn classify_value(e: &Expr) -> ValueKind {
    match e {
        Expr::Var(x) => ValueKind::VarValue(x.clone()),
        Expr::Int(n) => ValueKind::IntValue(*n),
        Expr::Block(b) if is_block_value(b) => ValueKind::BlockValue {
            dvs: b.decls.clone(),
            var: b.body.as_var().cloned().expect("block value body"),
            annot: b.annot.clone(),
        },
        _ => ValueKind::NotValue,
    }
}

pub fn is_block_value(b: &Block) -> bool {
    !b.decls.is_empty()
        && b.decls.iter().all(Decl::is_dv)
        && matches!(*b.body, Expr::Var(_))
        && reduct(&b.decls, &b.body).len() == b.decls.len()
}

pub fn is_value(e: &Expr) -> bool {
    classify_value(e) != ValueKind::NotValue
}

pub fn is_block_value_expr(e: &Expr) -> bool {
    matches!(e, Expr::Block(b) if is_block_value(b))
}

/// A closed block value.
pub fn is_capsule(v: &Expr) -> bool {
    is_block_value_expr(v) && free_vars(v).is_empty()
}

/// Declarations (transitively) used by `e`, in their original order.
pub fn reduct(ds: &[Decl], e: &Expr) -> Vec<Decl> {
    let used = reduct_vars(ds, e);
    ds.iter()
        .filter(|d| used.contains(&d.var))
        .cloned()
        .collect()
}

pub fn reduct_vars(ds: &[Decl], e: &Expr) -> BTreeSet<Ident> {
    let dom: BTreeSet<&Ident> = ds.iter().map(|d| &d.var).collect();
    let mut used: BTreeSet<Ident> = free_vars(e)
        .into_iter()
        .filter(|x| dom.contains(x))
        .collect();
    let mut work: Vec<Ident> = used.iter().cloned().collect();
    while let Some(x) = work.pop() {
        if let Some(d) = ds.iter().find(|d| d.var == x) {
            for y in free_vars(&d.init) {
                if dom.contains(&y) && used.insert(y.clone()) {
                    work.push(y);
                }
            }
        }
    }
    used
}

// ---------------------------------------------------------------------------
// Annotations

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AnnotPolicy {
    /// every declared variable
    All,
    /// declared variables with a free occurrence in the block
    Used,
    /// variables transitively used by the body
    Reach,
}

impl std::str::FromStr for AnnotPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(AnnotPolicy::All),
            "used" => Ok(AnnotPolicy::Used),
            "reach" => Ok(AnnotPolicy::Reach),
            other => Err(format!("unknown annotation policy `{other}`")),
        }
    }
}

pub fn annotate(e: &Expr, policy: AnnotPolicy) -> Expr {
    map_blocks(e, &mut |b| {
        b.annot = block_annotation(b, policy);
    })
}

pub fn block_annotation(b: &Block, policy: AnnotPolicy) -> BTreeSet<Ident> {
    match policy {
        AnnotPolicy::All => b.declared(),
        AnnotPolicy::Used => {
            let mut fv = free_vars(&b.body);
            for d in &b.decls {
                fv.extend(free_vars(&d.init));
            }
            b.declared()
                .into_iter()
                .filter(|x| fv.contains(x))
                .collect()
        }
        AnnotPolicy::Reach => reduct_vars(&b.decls, &b.body),
    }
}

/// Bottom-up rewrite of every block.
pub fn map_blocks(e: &Expr, f: &mut impl FnMut(&mut Block)) -> Expr {
    match e {
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e.clone(),
        Expr::FieldAccess(r, fl) => Expr::FieldAccess(Box::new(map_blocks(r, f)), fl.clone()),
        Expr::FieldAssign(r, fl, v) => {
            let r = map_blocks(r, f);
            Expr::FieldAssign(Box::new(r), fl.clone(), Box::new(map_blocks(v, f)))
        }
        Expr::New(c, args) => Expr::New(c.clone(), args.iter().map(|a| map_blocks(a, f)).collect()),
        Expr::Invoke(r, m, args) => {
            let r = map_blocks(r, f);
            Expr::Invoke(
                Box::new(r),
                m.clone(),
                args.iter().map(|a| map_blocks(a, f)).collect(),
            )
        }
        Expr::Block(b) => {
            let decls = b
                .decls
                .iter()
                .map(|d| Decl::new(d.ty.clone(), d.var.clone(), map_blocks(&d.init, f)))
                .collect();
            let mut nb = Block::new(decls, map_blocks(&b.body, f), b.annot.clone());
            f(&mut nb);
            Expr::Block(nb)
        }
    }
}

/// Replaces every declaration-free block by its body (block-elim, applied
/// exhaustively).
pub fn collapse_empty_blocks(e: Expr) -> Expr {
    match e {
        Expr::Var(_) | Expr::Oid(_) | Expr::Int(_) => e,
        Expr::FieldAccess(r, f) => Expr::FieldAccess(Box::new(collapse_empty_blocks(*r)), f),
        Expr::FieldAssign(r, f, v) => Expr::FieldAssign(
            Box::new(collapse_empty_blocks(*r)),
            f,
            Box::new(collapse_empty_blocks(*v)),
        ),
        Expr::New(c, args) => Expr::New(c, args.into_iter().map(collapse_empty_blocks).collect()),
        Expr::Invoke(r, m, args) => Expr::Invoke(
            Box::new(collapse_empty_blocks(*r)),
            m,
            args.into_iter().map(collapse_empty_blocks).collect(),
        ),
        Expr::Block(b) => {
            if b.decls.is_empty() {
                collapse_empty_blocks(*b.body)
            } else {
                let decls = b
                    .decls
                    .into_iter()
                    .map(|d| Decl::new(d.ty, d.var, collapse_empty_blocks(d.init)))
                    .collect();
                Expr::Block(Block::new(decls, collapse_empty_blocks(*b.body), b.annot))
            }
        }
    }
}

pub fn has_empty_block(e: &Expr) -> bool {
    let mut found = false;
    e.visit(&mut |s| {
        if let Expr::Block(b) = s {
            if b.decls.is_empty() {
                found = true;
            }
        }
    });
    found
}

/// No binder occurs twice anywhere in the term.
pub fn binders_unique(e: &Expr) -> bool {
    let mut seen = BTreeSet::new();
    let mut ok = true;
    e.visit(&mut |s| {
        if let Expr::Block(b) = s {
            for d in &b.decls {
                if !seen.insert(d.var.clone()) {
                    ok = false;
                }
            }
        }
    });
    ok
}

// ---------------------------------------------------------------------------
// Well-formedness

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Diagnostic {
    DuplicateDecl(Ident),
    AnnotNotDeclared(Ident),
    UnknownClass(Name),
    ConstructorArity {
        class: Name,
        expected: usize,
        found: usize,
    },
    UnknownField(Name),
    UnknownMethod {
        method: Name,
        arity: usize,
    },
    AffineOveruse {
        var: Ident,
        count: usize,
    },
    ObjIdInSource(ObjId),
    MethodParams {
        class: Name,
        method: Name,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicateDecl(x) => write!(f, "duplicate declaration {x}"),
            Diagnostic::AnnotNotDeclared(x) => write!(f, "annotation mentions undeclared {x}"),
            Diagnostic::UnknownClass(c) => write!(f, "unknown class {c}"),
            Diagnostic::ConstructorArity {
                class,
                expected,
                found,
            } => {
                write!(f, "new {class} expects {expected} arguments, found {found}")
            }
            Diagnostic::UnknownField(fl) => write!(f, "no class declares field {fl}"),
            Diagnostic::UnknownMethod { method, arity } => {
                write!(
                    f,
                    "no class declares method {method} with {arity} parameters"
                )
            }
            Diagnostic::AffineOveruse { var, count } => {
                let times = match count {
                    2 => "twice".to_string(),
                    n => format!("{n} times"),
                };
                write!(f, "affine {var} occurs {times}")
            }
            Diagnostic::ObjIdInSource(o) => write!(f, "object identifier {o} in a source term"),
            Diagnostic::MethodParams { class, method } => {
                write!(
                    f,
                    "parameters of {class}.{method} are not distinct or shadow this"
                )
            }
        }
    }
}

/// Checks a term against the class table. With `strict_affine`, each affine
/// variable may occur at most once in its scope.
pub fn well_formed(e: &Expr, ct: &ClassTable, strict_affine: bool) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    check_expr(e, ct, strict_affine, &mut out);
    out
}

/// Checks every method of the class table.
pub fn well_formed_table(ct: &ClassTable, strict_affine: bool) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (cname, def) in &ct.classes {
        for (fty, _) in &def.fields {
            if !ct.has_class(fty) {
                out.push(Diagnostic::UnknownClass(fty.clone()));
            }
        }
        for (mname, sig) in &def.methods {
            let names: BTreeSet<&Ident> = sig.params.iter().map(|p| &p.var).collect();
            if names.len() != sig.params.len() || names.contains(&Ident::this()) {
                out.push(Diagnostic::MethodParams {
                    class: cname.clone(),
                    method: mname.clone(),
                });
            }
            for p in &sig.params {
                if !ct.has_class(&p.ty.class) {
                    out.push(Diagnostic::UnknownClass(p.ty.class.clone()));
                }
                if strict_affine && p.ty.is_affine() {
                    let n = occurrences(&sig.body, &p.var);
                    if n > 1 {
                        out.push(Diagnostic::AffineOveruse {
                            var: p.var.clone(),
                            count: n,
                        });
                    }
                }
            }
            check_expr(&sig.body, ct, strict_affine, &mut out);
        }
    }
    out
}

fn check_expr(e: &Expr, ct: &ClassTable, strict: bool, out: &mut Vec<Diagnostic>) {
    e.visit(&mut |s| match s {
        Expr::Oid(o) => out.push(Diagnostic::ObjIdInSource(*o)),
        Expr::FieldAccess(_, f) | Expr::FieldAssign(_, f, _) => {
            if !ct.classes.iter().any(|(_, d)| d.field_index(f).is_some()) {
                out.push(Diagnostic::UnknownField(f.clone()));
            }
        }
        Expr::New(c, args) => match ct.fields(c) {
            None => out.push(Diagnostic::UnknownClass(c.clone())),
            Some(fs) if fs.len() != args.len() => out.push(Diagnostic::ConstructorArity {
                class: c.clone(),
                expected: fs.len(),
                found: args.len(),
            }),
            _ => {}
        },
        Expr::Invoke(_, m, args) => {
            let ok = ct.classes.iter().any(|(_, d)| {
                d.methods
                    .get(m)
                    .is_some_and(|sig| sig.params.len() == args.len())
            });
            if !ok {
                out.push(Diagnostic::UnknownMethod {
                    method: m.clone(),
                    arity: args.len(),
                });
            }
        }
        Expr::Block(b) => {
            let mut seen = BTreeSet::new();
            for d in &b.decls {
                if !seen.insert(&d.var) {
                    out.push(Diagnostic::DuplicateDecl(d.var.clone()));
                }
                if !ct.has_class(&d.ty.class) {
                    out.push(Diagnostic::UnknownClass(d.ty.class.clone()));
                }
            }
            for x in &b.annot {
                if !seen.contains(x) {
                    out.push(Diagnostic::AnnotNotDeclared(x.clone()));
                }
            }
            if strict {
                for d in b.decls.iter().filter(|d| d.ty.is_affine()) {
                    // the variable's own initializer is not counted: a
                    // self-referencing initializer can never be a capsule
                    let n = b
                        .decls
                        .iter()
                        .filter(|d2| d2.var != d.var)
                        .map(|d2| occurrences(&d2.init, &d.var))
                        .sum::<usize>()
                        + occurrences(&b.body, &d.var);
                    if n > 1 {
                        out.push(Diagnostic::AffineOveruse {
                            var: d.var.clone(),
                            count: n,
                        });
                    }
                }
            }
        }
        _ => {}
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Expr {
        Expr::var(s)
    }

    fn dv(c: &str, x: &str, args: Vec<Expr>) -> Decl {
        Decl::new(DeclType::plain(c), Ident::new(x), Expr::new_obj(c, args))
    }

    fn ids(xs: &[&str]) -> BTreeSet<Ident> {
        xs.iter().map(|s| Ident::new(s)).collect()
    }

    #[test]
    fn free_vars_examples() {
        let e = Expr::block(
            vec![
                dv("D", "z", vec![v("z")]),
                dv("C", "u", vec![v("z"), v("y")]),
            ],
            v("u"),
        );
        assert_eq!(free_vars(&e), ids(&["y"]));
        assert_eq!(free_vars(&v("x")), ids(&["x"]));
        assert!(free_vars(&Expr::block(vec![dv("C", "x", vec![])], v("x"))).is_empty());
    }

    #[test]
    fn subst_var_renames_capturing_binder() {
        // {C x=new C(y); x}[x/y]
        let e = Expr::block(vec![dv("C", "x", vec![v("y")])], v("x"));
        let r = subst_var(&e, &Ident::new("x"), &Ident::new("y"));
        let Expr::Block(b) = &r else { panic!() };
        let bound = b.decls[0].var.clone();
        assert_ne!(bound, Ident::new("x"));
        assert_eq!(&*bound.name, "x");
        assert_eq!(b.decls[0].init, Expr::new_obj("C", vec![v("x")]));
        assert_eq!(*b.body, Expr::Var(bound));
        assert_eq!(free_vars(&r), ids(&["x"]));

        assert_eq!(
            subst_var(
                &Expr::field(v("w"), "f1"),
                &Ident::new("z"),
                &Ident::new("w")
            ),
            Expr::field(v("z"), "f1")
        );
        assert_eq!(
            subst_var(&v("y"), &Ident::new("y"), &Ident::new("x")),
            v("y")
        );
    }

    #[test]
    fn subst_value_duplicates_with_fresh_binders() {
        let val = Expr::block(vec![dv("C", "y", vec![Expr::Int(0)])], v("y"));
        let body = Expr::block(
            vec![Decl::new(
                DeclType::plain("int"),
                Ident::new("_"),
                Expr::assign(v("x"), "f", Expr::Int(3)),
            )],
            Expr::field(v("x"), "f"),
        );
        let mut fresh = Fresh::above(&body);
        fresh.bump_above(&val);
        let out = subst_value(&body, &val, &Ident::new("x"), &mut fresh);
        let mut binders = Vec::new();
        out.visit(&mut |s| {
            if let Expr::Block(b) = s {
                binders.extend(b.decls.iter().map(|d| d.var.clone()));
            }
        });
        let ys: Vec<_> = binders.iter().filter(|b| &*b.name == "y").collect();
        assert_eq!(ys.len(), 2);
        assert_ne!(ys[0], ys[1]);
        assert!(binders_unique(&out));
        // first copy keeps its names
        assert!(ys.contains(&&Ident::new("y")));
    }

    #[test]
    fn subst_value_affine_trace_shape() {
        let capsule = Expr::block(
            vec![
                dv("D", "z", vec![v("z")]),
                dv("C", "u", vec![v("z"), v("z")]),
            ],
            v("u"),
        );
        let e = Expr::field(v("w"), "f1");
        let mut fresh = Fresh::above(&capsule);
        assert_eq!(
            subst_value(&e, &capsule, &Ident::new("w"), &mut fresh),
            Expr::field(capsule.clone(), "f1")
        );
        assert_eq!(
            subst_value(&v("y"), &capsule, &Ident::new("x"), &mut fresh),
            v("y")
        );
    }

    #[test]
    fn classify_and_capsule() {
        let zz = Expr::block(vec![dv("D", "z", vec![v("z")])], v("z"));
        assert!(matches!(classify_value(&zz), ValueKind::BlockValue { .. }));
        let unused = Expr::block(
            vec![dv("C", "x", vec![]), dv("D", "y", vec![v("z")])],
            v("x"),
        );
        assert_eq!(classify_value(&unused), ValueKind::NotValue);
        assert_eq!(
            classify_value(&v("x")),
            ValueKind::VarValue(Ident::new("x"))
        );

        let closed = Expr::block(
            vec![
                dv("D", "z", vec![v("z")]),
                dv("C", "u", vec![v("z"), v("z")]),
            ],
            v("u"),
        );
        assert!(is_capsule(&closed));
        let open = Expr::block(
            vec![
                dv("D", "z", vec![v("z")]),
                dv("C", "u", vec![v("z"), v("y")]),
            ],
            v("u"),
        );
        assert!(!is_capsule(&open));
        assert!(!is_capsule(&v("y")));
    }

    #[test]
    fn reduct_examples() {
        let ds = vec![dv("C", "x", vec![]), dv("D", "y", vec![v("z")])];
        assert_eq!(reduct(&ds, &v("x")), vec![ds[0].clone()]);
        let cyc = vec![dv("D", "x", vec![v("y")]), dv("D", "y", vec![v("x")])];
        assert_eq!(reduct(&cyc, &v("x")), cyc);
        assert!(reduct(&[], &v("x")).is_empty());
    }

    #[test]
    fn annotate_policies() {
        let e = Expr::block(
            vec![
                dv("D", "z", vec![v("z")]),
                dv("C", "u", vec![v("z"), v("z")]),
            ],
            v("u"),
        );
        let Expr::Block(b) = annotate(&e, AnnotPolicy::Reach) else {
            panic!()
        };
        assert_eq!(b.annot, ids(&["z", "u"]));
        let e2 = Expr::block(
            vec![dv("C", "x", vec![]), dv("D", "y", vec![v("z")])],
            v("x"),
        );
        let Expr::Block(b) = annotate(&e2, AnnotPolicy::All) else {
            panic!()
        };
        assert_eq!(b.annot, ids(&["x", "y"]));
        let Expr::Block(b) = annotate(&e2, AnnotPolicy::Reach) else {
            panic!()
        };
        assert_eq!(b.annot, ids(&["x"]));
    }

    #[test]
    fn freshen_is_alpha_and_unique() {
        let e = Expr::block(
            vec![dv("A", "a", vec![Expr::Int(0)])],
            Expr::block(
                vec![dv("A", "a", vec![Expr::Int(1)])],
                Expr::field(v("b"), "f"),
            ),
        );
        let f = freshen_term(&e);
        assert!(binders_unique(&f));
        assert!(!binders_unique(&e));
        assert_eq!(free_vars(&f), free_vars(&e));
    }

    fn tiny_ct() -> ClassTable {
        let mut c = ClassDef::default();
        c.fields.push((name("C"), name("f")));
        ClassTable {
            classes: vec![(name("C"), c)],
        }
    }

    #[test]
    fn well_formed_diagnostics() {
        let ct = tiny_ct();
        let cap = Expr::block(vec![dv("C", "y", vec![Expr::Int(0)])], v("y"));
        let e = Expr::block(
            vec![
                Decl::new(DeclType::affine("C"), Ident::new("x"), cap),
                Decl::new(
                    DeclType::plain("int"),
                    Ident::new("_"),
                    Expr::assign(v("x"), "f", Expr::Int(3)),
                ),
            ],
            Expr::field(v("x"), "f"),
        );
        let d = well_formed(&e, &ct, true);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "affine x occurs twice");
        assert!(well_formed(&e, &ct, false).is_empty());

        let dup = Expr::block(
            vec![
                dv("C", "x", vec![Expr::Int(0)]),
                dv("C", "x", vec![Expr::Int(0)]),
            ],
            v("x"),
        );
        let d = well_formed(&dup, &ct, true);
        assert_eq!(d[0].to_string(), "duplicate declaration x");
    }
}
