//! Seeded generator of closed, well-formed programs for fuzzing.
//!
//! Evaluated declarations only mention other evaluated declarations, so
//! every program can be erased to a heap configuration. Method bodies of
//! [`fuzz_class_table`] declare no evaluated declarations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{name, AnnotPolicy, ClassTable, Decl, DeclType, Expr, Ident, Name, ObjId, INT};
use crate::congruence::alpha_eq;
use crate::conventional::{crun, fj_invoke, CRule, Config, Memory};
use crate::print::render;

pub const FUZZ_CLASSES: &str = "
class D {
  D f; int n;
  D get() { this.f }
  D set(D d) { this.f = d }
  int count(int k) { {int t = this.n = k; t} }
  D fresh() { new D(this, 0) }
}
class C {
  D f1; D f2;
  D first() { this.f1 }
  C swap() { {D t = this.f1; D u = this.f1 = this.f2; D w = this.f2 = t; this} }
  D take(a C c) { c.f1 }
  C fill(D d) { {D u = this.f1 = d; this} }
}
0";

pub fn fuzz_class_table() -> ClassTable {
    crate::parse::parse_program(FUZZ_CLASSES, AnnotPolicy::Reach)
        .expect("fuzz classes parse")
        .ct
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub max_depth: usize,
    pub max_decls: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 5,
            max_decls: 6,
        }
    }
}

#[derive(Clone, Debug)]
struct Var {
    id: Ident,
    class: Name,
    dv: bool,
    affine: bool,
    spent: bool,
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    ct: &'a ClassTable,
    cfg: GenConfig,
    counter: u32,
}

/// A program whose type is picked at random among the classes and `int`.
pub fn gen_program(seed: u64, ct: &ClassTable, cfg: GenConfig) -> Expr {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        ct,
        cfg,
        counter: 0,
    };
    let mut types: Vec<Name> = ct.classes.iter().map(|(c, _)| c.clone()).collect();
    types.push(name(INT));
    let ty = types.choose(&mut g.rng).unwrap().clone();
    let depth = g.rng.gen_range(1..=cfg.max_depth.max(1));
    let e = g.block(&ty, depth, &mut Vec::new());
    crate::ast::annotate(&e, AnnotPolicy::Reach)
}

impl Gen<'_> {
    fn fresh(&mut self, class: &str) -> Ident {
        self.counter += 1;
        let base = if class == INT {
            "i".to_string()
        } else {
            class.to_lowercase()
        };
        Ident::new(&format!("{base}{}", self.counter))
    }

    fn field_types(&self, c: &str) -> Vec<(Name, Name)> {
        self.ct.fields(c).map(|fs| fs.to_vec()).unwrap_or_default()
    }

    fn classes(&self) -> Vec<Name> {
        self.ct.classes.iter().map(|(c, _)| c.clone()).collect()
    }

    fn pick_var(&mut self, scope: &mut [Var], ty: &str, dv_only: bool) -> Option<Expr> {
        let idx: Vec<usize> = (0..scope.len())
            .filter(|&i| !scope[i].spent && &*scope[i].class == ty && (!dv_only || scope[i].dv))
            .collect();
        let &i = idx.choose(&mut self.rng)?;
        Some(self.use_var(scope, i))
    }

    /// An affine variable leaves the scope after its single use.
    fn use_var(&mut self, scope: &mut [Var], i: usize) -> Expr {
        let v = scope[i].clone();
        if v.affine {
            scope[i].spent = true;
        }
        Expr::Var(v.id)
    }

    /// `{C c=new C(d, d); D d=new D(d, 0); c}`: a closed block value of class `ty`.
    fn fallback(&mut self, ty: &str) -> Expr {
        if ty == INT {
            return Expr::Int(self.rng.gen_range(0..10));
        }
        let mut need = vec![name(ty)];
        let mut vars: Vec<(Name, Ident)> = Vec::new();
        while let Some(c) = need.pop() {
            if vars.iter().any(|(k, _)| *k == c) {
                continue;
            }
            vars.push((c.clone(), self.fresh(&c)));
            for (t, _) in self.field_types(&c) {
                if &*t != INT {
                    need.push(t);
                }
            }
        }
        let decls = vars
            .iter()
            .map(|(c, x)| {
                let args = self
                    .field_types(c)
                    .iter()
                    .map(|(t, _)| match vars.iter().find(|(k, _)| k == t) {
                        Some((_, y)) => Expr::Var(y.clone()),
                        None => Expr::Int(0),
                    })
                    .collect();
                Decl::new(DeclType::plain(c), x.clone(), Expr::New(c.clone(), args))
            })
            .collect();
        Expr::block(decls, Expr::Var(vars[0].1.clone()))
    }

    fn expr(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        let choice = self.rng.gen_range(0..10);
        if depth == 0 || choice < 3 {
            if let Some(v) = self.pick_var(scope, ty, false) {
                return v;
            }
            return self.fallback(ty);
        }
        match choice {
            3 | 4 => self.field_read(ty, depth, scope),
            5 | 6 => self.new_expr(ty, depth, scope),
            7 => self.call(ty, depth, scope),
            _ => self.block(ty, depth, scope),
        }
    }

    fn field_read(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        let owners: Vec<(Name, Name)> = self
            .classes()
            .into_iter()
            .flat_map(|c| {
                self.field_types(&c)
                    .into_iter()
                    .filter(|(t, _)| &**t == ty)
                    .map(move |(_, f)| (c.clone(), f))
            })
            .collect();
        let Some((c, f)) = owners.choose(&mut self.rng).cloned() else {
            return self.fallback(ty);
        };
        let recv = self.expr(&c, depth - 1, scope);
        Expr::FieldAccess(Box::new(recv), f)
    }

    fn new_expr(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        if ty == INT {
            return Expr::Int(self.rng.gen_range(0..10));
        }
        let args = self
            .field_types(ty)
            .iter()
            .map(|(t, _)| self.expr(t, depth - 1, scope))
            .collect();
        Expr::New(name(ty), args)
    }

    fn call(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        let mut cands = Vec::new();
        for (c, def) in &self.ct.classes {
            for (m, sig) in &def.methods {
                if &*sig.ret == ty {
                    cands.push((c.clone(), m.clone(), sig.params.clone()));
                }
            }
        }
        let Some((c, m, params)) = cands.choose(&mut self.rng).cloned() else {
            return self.fallback(ty);
        };
        let recv = match self.pick_var(scope, &c, false) {
            Some(v) => v,
            None => self.expr(&c, depth - 1, scope),
        };
        let args = params
            .iter()
            .map(|p| {
                if p.ty.is_affine() {
                    self.capsule_candidate(&p.ty.class, depth - 1, scope)
                } else {
                    self.expr(&p.ty.class, depth - 1, scope)
                }
            })
            .collect();
        Expr::Invoke(Box::new(recv), m, args)
    }

    /// Mostly a closed block; sometimes one that sees the enclosing scope
    /// and so may fail the capsule check.
    fn capsule_candidate(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        if self.rng.gen_bool(0.7) {
            self.block(ty, depth, &mut Vec::new())
        } else {
            self.block(ty, depth, scope)
        }
    }

    fn block(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        let depth = depth.max(1);
        let mark = scope.len();
        let n = self.rng.gen_range(1..=self.cfg.max_decls.max(1));
        let mut decls = Vec::with_capacity(n);
        for _ in 0..n {
            let d = match self.rng.gen_range(0..20) {
                0..=6 => self.dv_decl(scope),
                7..=14 => self.plain_decl(depth, scope),
                15 | 16 => self.affine_decl(depth, scope),
                _ => self.statement(depth, scope),
            };
            decls.push(d);
        }
        let body = self.expr(ty, depth - 1, scope);
        scope.truncate(mark);
        Expr::block(decls, body)
    }

    fn dv_decl(&mut self, scope: &mut Vec<Var>) -> Decl {
        let classes = self.classes();
        let c = classes.choose(&mut self.rng).unwrap().clone();
        let x = self.fresh(&c);
        scope.push(Var {
            id: x.clone(),
            class: c.clone(),
            dv: true,
            affine: false,
            spent: false,
        });
        let args = self
            .field_types(&c)
            .iter()
            .map(|(t, _)| {
                if &**t == INT {
                    Expr::Int(self.rng.gen_range(0..10))
                } else {
                    self.pick_var(scope, t, true)
                        .unwrap_or_else(|| self.fallback(t))
                }
            })
            .collect();
        Decl::new(DeclType::plain(&c), x, Expr::New(c, args))
    }

    fn any_type(&mut self) -> Name {
        let mut types = self.classes();
        types.push(name(INT));
        types.choose(&mut self.rng).unwrap().clone()
    }

    fn plain_decl(&mut self, depth: usize, scope: &mut Vec<Var>) -> Decl {
        let ty = self.any_type();
        let mut init = self.expr(&ty, depth - 1, scope);
        if !self.erasable(&ty, &init, scope) {
            init = self.fallback(&ty);
        }
        let x = self.fresh(&ty);
        scope.push(Var {
            id: x.clone(),
            class: ty.clone(),
            dv: false,
            affine: false,
            spent: false,
        });
        Decl::new(DeclType::plain(&ty), x, init)
    }

    /// A `new` with atomic arguments at a declaration is evaluated at once,
    /// so its variables must be evaluated declarations too.
    fn erasable(&self, ty: &str, init: &Expr, scope: &[Var]) -> bool {
        let d = Decl::new(DeclType::plain(ty), Ident::new("_"), init.clone());
        if !d.is_dv() {
            return true;
        }
        let Expr::New(_, args) = init else {
            return true;
        };
        args.iter().all(|a| match a {
            Expr::Var(y) => scope.iter().any(|v| &v.id == y && v.dv),
            _ => true,
        })
    }

    fn affine_decl(&mut self, depth: usize, scope: &mut Vec<Var>) -> Decl {
        let classes = self.classes();
        let c = classes.choose(&mut self.rng).unwrap().clone();
        let init = self.capsule_candidate(&c, depth - 1, scope);
        let x = self.fresh(&c);
        scope.push(Var {
            id: x.clone(),
            class: c.clone(),
            dv: false,
            affine: true,
            spent: false,
        });
        Decl::new(DeclType::affine(&c), x, init)
    }

    /// An unused declaration whose initializer is an assignment or a call.
    fn statement(&mut self, depth: usize, scope: &mut Vec<Var>) -> Decl {
        let ty = self.any_type();
        let init = if self.rng.gen_bool(0.5) {
            self.assignment(&ty, depth, scope)
        } else {
            self.call(&ty, depth, scope)
        };
        let x = self.fresh(&ty);
        Decl::new(DeclType::plain(&ty), x, init)
    }

    fn assignment(&mut self, ty: &str, depth: usize, scope: &mut Vec<Var>) -> Expr {
        let targets: Vec<(usize, Name)> = (0..scope.len())
            .filter(|&i| !scope[i].spent)
            .flat_map(|i| {
                self.field_types(&scope[i].class)
                    .into_iter()
                    .filter(|(t, _)| &**t == ty)
                    .map(move |(_, f)| (i, f))
            })
            .collect();
        let Some((i, f)) = targets.choose(&mut self.rng).cloned() else {
            return self.fallback(ty);
        };
        let recv = self.use_var(scope, i);
        let rhs = self.expr(ty, depth - 1, scope);
        Expr::FieldAssign(Box::new(recv), f, Box::new(rhs))
    }
}

// ---------------------------------------------------------------------------
// Method calls

/// A conventional configuration `⟨ι.m(vs) | μ⟩`.
#[derive(Clone, Debug)]
pub struct CallSample {
    pub cfg: Config,
    pub recv: ObjId,
    pub method: Name,
    pub args: Vec<Expr>,
}

/// Calls on random small heaps, with arguments of the declared types.
pub fn sample_calls(seed: u64, count: usize, ct: &ClassTable) -> Vec<CallSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<Name> = ct.classes.iter().map(|(c, _)| c.clone()).collect();
    let mut out = Vec::new();
    while out.len() < count {
        let mut mem = Memory::new();
        let n = rng.gen_range(1..=4);
        let ids: Vec<ObjId> = (0..n)
            .map(|_| mem.reserve(classes.choose(&mut rng).unwrap().clone()))
            .collect();
        let of_class = |mem: &Memory, c: &str| -> Vec<ObjId> {
            ids.iter()
                .copied()
                .filter(|o| &*mem.get(*o).unwrap().class == c)
                .collect()
        };
        let arg = |rng: &mut ChaCha8Rng, mem: &Memory, ty: &str| -> Option<Expr> {
            if ty == INT {
                Some(Expr::Int(rng.gen_range(0..10)))
            } else {
                of_class(mem, ty).choose(rng).map(|o| Expr::Oid(*o))
            }
        };
        let mut filled = true;
        for &o in &ids {
            let class = mem.get(o).unwrap().class.clone();
            let slots: Option<Vec<Expr>> = ct
                .fields(&class)
                .unwrap()
                .iter()
                .map(|(ty, _)| arg(&mut rng, &mem, ty))
                .collect();
            match slots {
                Some(s) => mem.set(o, s),
                None => filled = false,
            }
        }
        if !filled {
            continue;
        }
        let recv = *ids.choose(&mut rng).unwrap();
        let def = ct.class(&mem.get(recv).unwrap().class).unwrap();
        let methods: Vec<&Name> = def.methods.keys().collect();
        let Some(&m) = methods.choose(&mut rng) else {
            continue;
        };
        let sig = &def.methods[m];
        let Some(args) = sig
            .params
            .iter()
            .map(|p| arg(&mut rng, &mem, &p.ty.class))
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let call = Expr::Invoke(Box::new(Expr::Oid(recv)), m.clone(), args.clone());
        out.push(CallSample {
            cfg: Config { expr: call, mem },
            recv,
            method: m.clone(),
            args,
        });
    }
    out
}

/// Runs `invk` and the declaration steps it introduces, then compares the
/// result with direct substitution into the method body.
pub fn check_call(s: &CallSample, ct: &ClassTable) -> Result<(), String> {
    let steps = s.args.len() + 2;
    let t = crun(&s.cfg, ct, steps);
    let mut expected = vec![CRule::Invk];
    expected.extend(std::iter::repeat_n(CRule::Dec, steps - 1));
    if t.rules() != expected {
        return Err(format!("rules {:?}", t.rules()));
    }
    let direct = fj_invoke(s.recv, &s.method, &s.args, &s.cfg.mem, ct).ok_or("no method")?;
    if !alpha_eq(&t.last().expr, &direct) {
        return Err(format!("{} vs {}", render(&t.last().expr), render(&direct)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{binders_unique, free_vars, well_formed, well_formed_table};

    #[test]
    fn class_table_is_well_formed() {
        let ct = fuzz_class_table();
        assert_eq!(well_formed_table(&ct, true), vec![]);
    }

    #[test]
    fn deterministic_closed_and_well_formed() {
        let ct = fuzz_class_table();
        for seed in 0..200 {
            let e = gen_program(seed, &ct, GenConfig::default());
            assert_eq!(e, gen_program(seed, &ct, GenConfig::default()));
            assert!(free_vars(&e).is_empty(), "seed {seed}");
            assert!(binders_unique(&e));
            assert_eq!(
                well_formed(&e, &ct, true),
                vec![],
                "seed {seed}: {}",
                crate::print::render(&e)
            );
            assert!(crate::matching::erase(&e).is_ok(), "seed {seed}");
        }
    }
}
