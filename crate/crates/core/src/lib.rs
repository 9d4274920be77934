//! A small object calculus with two operational semantics: one where memory
//! lives inside the term as blocks of evaluated declarations, and one with a
//! conventional global heap. The `matching` module checks that every step of
//! the former is simulated by steps of the latter.

pub mod ast;
pub mod check;
pub mod congruence;
pub mod conventional;
pub mod corpus;
pub mod gen;
pub mod matching;
pub mod oracle;
pub mod parse;
pub mod print;
pub mod syntactic;
