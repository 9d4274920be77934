//! Concrete-syntax rendering. Output reparses with [`crate::parse`].
//!
//! Variables are shown by display name; the `#id` suffix appears only for
//! names shared by distinct identifiers in the rendered text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::ast::{occurrences, Block, ClassTable, Decl, Expr, Ident};
use crate::parse::SEQ_VAR;

/// Chooses how identifiers are written for one piece of output.
#[derive(Clone, Debug, Default)]
pub struct Namer {
    ambiguous: BTreeSet<Ident>,
}

impl Namer {
    pub fn for_exprs<'a>(es: impl IntoIterator<Item = &'a Expr>) -> Namer {
        let mut by_name: BTreeMap<String, BTreeSet<Ident>> = BTreeMap::new();
        for e in es {
            collect_idents(e, &mut |x: &Ident| {
                by_name
                    .entry(x.name.to_string())
                    .or_default()
                    .insert(x.clone());
            });
        }
        let ambiguous = by_name
            .into_values()
            .filter(|s| s.len() > 1)
            .flatten()
            .collect();
        Namer { ambiguous }
    }

    pub fn ident(&self, x: &Ident) -> String {
        if self.ambiguous.contains(x) {
            format!("{}#{}", x.name, x.id)
        } else {
            x.name.to_string()
        }
    }
}

fn collect_idents(e: &Expr, f: &mut impl FnMut(&Ident)) {
    e.visit(&mut |s| match s {
        Expr::Var(x) => f(x),
        Expr::Block(b) => {
            b.decls
                .iter()
                .filter(|d| !is_seq_decl(b, d))
                .for_each(|d| f(&d.var));
            b.annot.iter().for_each(&mut *f);
        }
        _ => {}
    });
}

/// A sequencing declaration that can be printed as `e;`.
fn is_seq_decl(b: &Block, d: &Decl) -> bool {
    &*d.var.name == SEQ_VAR
        && !d.ty.is_affine()
        && !b.annot.contains(&d.var)
        && b.decls.iter().all(|d2| occurrences(&d2.init, &d.var) == 0)
        && occurrences(&b.body, &d.var) == 0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Style {
    pub annotations: bool,
}

pub fn render(e: &Expr) -> String {
    render_with(e, &Namer::for_exprs([e]), Style::default())
}

/// Rendering that also shows block annotations as `^[x, y]`.
pub fn render_annotated(e: &Expr) -> String {
    render_with(e, &Namer::for_exprs([e]), Style { annotations: true })
}

pub fn render_with(e: &Expr, namer: &Namer, style: Style) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, namer, style);
    out
}

fn write_expr(out: &mut String, e: &Expr, n: &Namer, st: Style) {
    match e {
        Expr::Var(x) => out.push_str(&n.ident(x)),
        Expr::Oid(o) => write!(out, "{o}").unwrap(),
        Expr::Int(i) => write!(out, "{i}").unwrap(),
        Expr::FieldAccess(r, f) => {
            write_recv(out, r, n, st);
            write!(out, ".{f}").unwrap();
        }
        Expr::FieldAssign(r, f, v) => {
            write_recv(out, r, n, st);
            write!(out, ".{f}=").unwrap();
            write_expr(out, v, n, st);
        }
        Expr::New(c, args) => {
            write!(out, "new {c}(").unwrap();
            write_args(out, args, n, st);
            out.push(')');
        }
        Expr::Invoke(r, m, args) => {
            write_recv(out, r, n, st);
            write!(out, ".{m}(").unwrap();
            write_args(out, args, n, st);
            out.push(')');
        }
        Expr::Block(b) => {
            out.push('{');
            for d in &b.decls {
                if is_seq_decl(b, d) {
                    write_expr(out, &d.init, n, st);
                } else {
                    if d.ty.is_affine() {
                        out.push_str("a ");
                    }
                    write!(out, "{} {}=", d.ty.class, n.ident(&d.var)).unwrap();
                    write_expr(out, &d.init, n, st);
                }
                out.push_str("; ");
            }
            write_expr(out, &b.body, n, st);
            out.push('}');
            if st.annotations {
                out.push_str("^[");
                for (i, x) in b.annot.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    out.push_str(&n.ident(x));
                }
                out.push(']');
            }
        }
    }
}

fn write_recv(out: &mut String, r: &Expr, n: &Namer, st: Style) {
    if matches!(r, Expr::FieldAssign(..)) {
        out.push('(');
        write_expr(out, r, n, st);
        out.push(')');
    } else {
        write_expr(out, r, n, st);
    }
}

fn write_args(out: &mut String, args: &[Expr], n: &Namer, st: Style) {
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_expr(out, a, n, st);
    }
}

/// Class declarations in source form.
pub fn render_class_table(ct: &ClassTable) -> String {
    let mut out = String::new();
    for (c, def) in &ct.classes {
        write!(out, "class {c} {{").unwrap();
        for (t, f) in &def.fields {
            write!(out, " {t} {f};").unwrap();
        }
        for (m, sig) in &def.methods {
            let namer = Namer::for_exprs([&sig.body]);
            write!(out, " {} {m}(", sig.ret).unwrap();
            for (i, p) in sig.params.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                if p.ty.is_affine() {
                    out.push_str("a ");
                }
                write!(out, "{} {}", p.ty.class, namer.ident(&p.var)).unwrap();
            }
            out.push_str(") { ");
            write_expr(&mut out, &sig.body, &namer, Style::default());
            out.push_str(" }");
        }
        out.push_str(" }\n");
    }
    out
}
