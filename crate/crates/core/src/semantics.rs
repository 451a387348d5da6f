//! Concept semantics as functional programs.
//!
//! Programs are De Bruijn lambda terms over the primitives
//! `{0, inc, dec, if, Y}` plus `LibRef` nodes that call previously learned
//! concepts. Evaluation is call-by-value with a lazy `if` and a fixed-point
//! `Y`; recursion is what lets induced operators extrapolate to numbers far
//! beyond the training range.
//!
//! Induction searches for the program maximizing `prior + likelihood`, where
//! the prior is a description-length prior (each node is a uniform draw over
//! the productions available at its type) and the likelihood tolerates a
//! small fraction of corrupted examples. The search enumerates non-recursive
//! bodies bottom-up with observational-equivalence pruning and recursive
//! bodies through a single-recursive-call template; both spaces are bounded
//! by the node budget.

use crate::expr::{SymbolId, Value};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum SemError {
    #[error("step limit exceeded")]
    StepLimitExceeded,
    #[error("value overflow")]
    ValueOverflow,
    #[error("ill-typed term: {0}")]
    IllTyped(String),
    #[error("no term beats the trivial constant-0 program")]
    SearchExhausted,
    #[error("arity mismatch for concept {concept}: expected {expected}, got {got}")]
    ArityMismatch { concept: String, expected: usize, got: usize },
    #[error("concept {0} has no program")]
    NoProgram(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(SymbolId),
    #[error("parse error in program text: {0}")]
    BadProgramText(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prim {
    Zero,
    Inc,
    Dec,
    If,
    Y,
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Zero => "Z",
            Prim::Inc => "inc",
            Prim::Dec => "dec",
            Prim::If => "if",
            Prim::Y => "Y",
        }
    }
}

/// A De Bruijn lambda term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Prim(Prim),
    Var(usize),
    Abs(Box<Term>),
    App(Box<Term>, Box<Term>),
    /// Call to a previously learned concept program, by concept symbol id.
    LibRef(SymbolId),
}

impl Term {
    pub fn app(f: Term, a: Term) -> Term {
        Term::App(Box::new(f), Box::new(a))
    }

    pub fn apps(head: Term, args: Vec<Term>) -> Term {
        args.into_iter().fold(head, Term::app)
    }

    pub fn lam(body: Term) -> Term {
        Term::Abs(Box::new(body))
    }

    /// Constant `inc^k(0)`.
    pub fn constant(k: Value) -> Term {
        let mut t = Term::Prim(Prim::Zero);
        for _ in 0..k {
            t = Term::app(Term::Prim(Prim::Inc), t);
        }
        t
    }

    /// Number of atoms: leaves (prims, vars, lib refs) plus abstractions.
    /// Applications are free, so a program's atom count tracks the number of
    /// grammar choices made to produce it.
    pub fn atoms(&self) -> usize {
        match self {
            Term::Prim(_) | Term::Var(_) | Term::LibRef(_) => 1,
            Term::Abs(b) => 1 + b.atoms(),
            Term::App(f, a) => f.atoms() + a.atoms(),
        }
    }
}

/// Simple types over Nat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Type {
    Nat,
    Arrow(Box<Type>, Box<Type>),
}

impl Type {
    pub fn func(args: usize) -> Type {
        let mut t = Type::Nat;
        for _ in 0..args {
            t = Type::Arrow(Box::new(Type::Nat), Box::new(t));
        }
        t
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Nat => write!(f, "Nat"),
            Type::Arrow(a, b) => write!(f, "({a} -> {b})"),
        }
    }
}

/// Evaluation limits. `max_steps` bounds total reduction work, `max_value`
/// bounds any natural produced, `max_depth` bounds interpreter recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_steps: u64,
    pub max_value: Value,
    pub max_depth: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_steps: 100_000, max_value: 1_000_000_000, max_depth: 100_000 }
    }
}

/// A learned concept program available as a `LibRef` production.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibEntry {
    pub concept: SymbolId,
    pub name: String,
    pub arity: usize,
    pub term: Term,
}

/// The library of callable concept programs (base primitives are implicit).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub entries: Vec<LibEntry>,
}

impl Library {
    pub fn empty() -> Self {
        Library { entries: Vec::new() }
    }

    pub fn get(&self, concept: SymbolId) -> Option<&LibEntry> {
        self.entries.iter().find(|e| e.concept == concept)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone)]
enum Env<'t> {
    Nil,
    Cons(Rc<(Val<'t>, Env<'t>)>),
}

impl<'t> Env<'t> {
    fn push(&self, v: Val<'t>) -> Env<'t> {
        Env::Cons(Rc::new((v, self.clone())))
    }

    fn get(&self, idx: usize) -> Option<&Val<'t>> {
        let mut cur = self;
        let mut i = idx;
        loop {
            match cur {
                Env::Nil => return None,
                Env::Cons(cell) => {
                    if i == 0 {
                        return Some(&cell.0);
                    }
                    i -= 1;
                    cur = &cell.1;
                }
            }
        }
    }
}

#[derive(Clone)]
enum Val<'t> {
    Nat(Value),
    Closure(&'t Term, Env<'t>),
    /// Partially applied primitive.
    Prim(Prim, Vec<Val<'t>>),
    /// Fixpoint of a function value: applying it unfolds one recursion step.
    Fix(Rc<Val<'t>>),
    /// Partially applied library call (arguments must be naturals).
    Lib(SymbolId, Vec<Value>),
}

/// Shared evaluation context: the library, limits, and a memo table for
/// library calls. The memo makes repeated concept applications (ubiquitous
/// in abduction and induction) cheap.
pub struct EvalCtx<'l> {
    pub library: &'l Library,
    pub limits: Limits,
    memo: RefCell<HashMap<(SymbolId, Vec<Value>), Result<Value, SemError>>>,
}

impl<'l> EvalCtx<'l> {
    pub fn new(library: &'l Library, limits: Limits) -> Self {
        EvalCtx { library, limits, memo: RefCell::new(HashMap::new()) }
    }

    /// Evaluate `term` applied to `args`.
    pub fn eval(&self, term: &Term, args: &[Value]) -> Result<Value, SemError> {
        let mut steps = 0u64;
        self.eval_counted(term, args, &mut steps)
    }

    fn eval_counted(&self, term: &Term, args: &[Value], steps: &mut u64) -> Result<Value, SemError> {
        let mut v = self.eval_term(term, &Env::Nil, steps, 0)?;
        for &a in args {
            v = self.apply(v, Val::Nat(a), steps, 0)?;
        }
        match v {
            Val::Nat(n) => Ok(n),
            _ => Err(SemError::IllTyped("program did not reduce to a natural".into())),
        }
    }

    fn tick(&self, steps: &mut u64, depth: u32) -> Result<(), SemError> {
        *steps += 1;
        if *steps > self.limits.max_steps {
            return Err(SemError::StepLimitExceeded);
        }
        if depth > self.limits.max_depth {
            return Err(SemError::StepLimitExceeded);
        }
        Ok(())
    }

    fn eval_term<'t>(
        &self,
        term: &'t Term,
        env: &Env<'t>,
        steps: &mut u64,
        depth: u32,
    ) -> Result<Val<'t>, SemError> {
        self.tick(steps, depth)?;
        match term {
            Term::Prim(Prim::Zero) => Ok(Val::Nat(0)),
            Term::Prim(p) => Ok(Val::Prim(*p, Vec::new())),
            Term::Var(i) => env
                .get(*i)
                .cloned()
                .ok_or_else(|| SemError::IllTyped(format!("unbound variable {i}"))),
            Term::Abs(body) => Ok(Val::Closure(body, env.clone())),
            Term::LibRef(c) => Ok(Val::Lib(*c, Vec::new())),
            Term::App(_, _) => {
                // Flatten the application spine so `if` can stay lazy in its
                // branches.
                let mut spine = Vec::new();
                let mut head = term;
                while let Term::App(f, a) = head {
                    spine.push(a.as_ref());
                    head = f;
                }
                spine.reverse();
                if matches!(head, Term::Prim(Prim::If)) && spine.len() >= 3 {
                    let c = self.eval_term(spine[0], env, steps, depth + 1)?;
                    let Val::Nat(cv) = c else {
                        return Err(SemError::IllTyped("if condition must be a natural".into()));
                    };
                    let branch = if cv == 0 { spine[1] } else { spine[2] };
                    let mut v = self.eval_term(branch, env, steps, depth + 1)?;
                    for arg in &spine[3..] {
                        let av = self.eval_term(arg, env, steps, depth + 1)?;
                        v = self.apply(v, av, steps, depth + 1)?;
                    }
                    return Ok(v);
                }
                let mut v = self.eval_term(head, env, steps, depth + 1)?;
                for arg in spine {
                    let av = self.eval_term(arg, env, steps, depth + 1)?;
                    v = self.apply(v, av, steps, depth + 1)?;
                }
                Ok(v)
            }
        }
    }

    fn apply<'t>(
        &self,
        f: Val<'t>,
        arg: Val<'t>,
        steps: &mut u64,
        depth: u32,
    ) -> Result<Val<'t>, SemError> {
        self.tick(steps, depth)?;
        match f {
            Val::Closure(body, env) => self.eval_term(body, &env.push(arg), steps, depth + 1),
            Val::Fix(g) => {
                // (Y g) v  =>  (g (Y g)) v
                let inner = self.apply((*g).clone(), Val::Fix(g.clone()), steps, depth + 1)?;
                self.apply(inner, arg, steps, depth + 1)
            }
            Val::Prim(p, mut partial) => match p {
                Prim::Inc => {
                    let Val::Nat(n) = arg else {
                        return Err(SemError::IllTyped("inc expects a natural".into()));
                    };
                    let v = n + 1;
                    if v > self.limits.max_value {
                        return Err(SemError::ValueOverflow);
                    }
                    Ok(Val::Nat(v))
                }
                Prim::Dec => {
                    let Val::Nat(n) = arg else {
                        return Err(SemError::IllTyped("dec expects a natural".into()));
                    };
                    Ok(Val::Nat(n.saturating_sub(1)))
                }
                Prim::Y => Ok(Val::Fix(Rc::new(arg))),
                Prim::If => {
                    // Strict fallback for `if` applied through a variable.
                    partial.push(arg);
                    if partial.len() == 3 {
                        let Val::Nat(c) = partial[0] else {
                            return Err(SemError::IllTyped("if condition must be a natural".into()));
                        };
                        Ok(if c == 0 { partial[1].clone() } else { partial[2].clone() })
                    } else {
                        Ok(Val::Prim(Prim::If, partial))
                    }
                }
                Prim::Zero => Err(SemError::IllTyped("0 is not a function".into())),
            },
            Val::Lib(c, mut got) => {
                let Val::Nat(n) = arg else {
                    return Err(SemError::IllTyped("library calls take naturals".into()));
                };
                got.push(n);
                let entry = self.library.get(c).ok_or(SemError::UnknownConcept(c))?;
                if got.len() == entry.arity {
                    let v = self.call_library(c, &got, steps, depth + 1)?;
                    Ok(Val::Nat(v))
                } else {
                    Ok(Val::Lib(c, got))
                }
            }
            Val::Nat(_) => Err(SemError::IllTyped("applied a natural as a function".into())),
        }
    }

    /// Memoized library concept application.
    pub fn call_library(
        &self,
        concept: SymbolId,
        args: &[Value],
        steps: &mut u64,
        depth: u32,
    ) -> Result<Value, SemError> {
        let key = (concept, args.to_vec());
        if let Some(hit) = self.memo.borrow().get(&key) {
            return hit.clone();
        }
        let entry = self.library.get(concept).ok_or(SemError::UnknownConcept(concept))?;
        let mut v = self.eval_term(&entry.term, &Env::Nil, steps, depth)?;
        for &a in args {
            v = self.apply(v, Val::Nat(a), steps, depth)?;
        }
        let out = match v {
            Val::Nat(n) => Ok(n),
            _ => Err(SemError::IllTyped("library program did not yield a natural".into())),
        };
        self.memo.borrow_mut().insert(key, out.clone());
        out
    }
}

/// Evaluate a program on `args` under `limits` with library support.
pub fn eval_program(
    library: &Library,
    term: &Term,
    args: &[Value],
    limits: Limits,
) -> Result<Value, SemError> {
    EvalCtx::new(library, limits).eval(term, args)
}

// ---------------------------------------------------------------------------
// Typing
// ---------------------------------------------------------------------------

/// Check `term` against the simple type system over Nat; returns its type.
/// `Y` is typed at fixpoints of `Nat^k -> Nat` for k in {1, 2}.
pub fn type_of(library: &Library, term: &Term) -> Result<Type, SemError> {
    type_of_in(library, term, &mut Vec::new())
}

fn type_of_in(library: &Library, term: &Term, env: &mut Vec<Type>) -> Result<Type, SemError> {
    match term {
        Term::Prim(Prim::Zero) => Ok(Type::Nat),
        Term::Prim(Prim::Inc) | Term::Prim(Prim::Dec) => Ok(Type::func(1)),
        Term::Prim(Prim::If) => Ok(Type::func(3)),
        Term::Prim(Prim::Y) => Err(SemError::IllTyped("Y must be applied directly".into())),
        Term::Var(i) => env
            .iter()
            .rev()
            .nth(*i)
            .cloned()
            .ok_or_else(|| SemError::IllTyped(format!("unbound variable {i}"))),
        Term::LibRef(c) => {
            let e = library.get(*c).ok_or(SemError::UnknownConcept(*c))?;
            Ok(Type::func(e.arity))
        }
        Term::Abs(_) => Err(SemError::IllTyped(
            "bare abstraction needs a requested type; type_of infers Nat-argument lambdas only"
                .into(),
        ))
        .or_else(|_: SemError| {
            // All lambdas in this calculus bind Nat except the Y-recursion
            // binder, which is handled in the App case below.
            if let Term::Abs(body) = term {
                env.push(Type::Nat);
                let out = type_of_in(library, body, env)?;
                env.pop();
                Ok(Type::Arrow(Box::new(Type::Nat), Box::new(out)))
            } else {
                unreachable!()
            }
        }),
        Term::App(f, a) => {
            // Special-case (Y g): g must type as t -> t with t = Nat^k -> Nat.
            if matches!(f.as_ref(), Term::Prim(Prim::Y)) {
                let Term::Abs(body) = a.as_ref() else {
                    return Err(SemError::IllTyped("Y expects a lambda".into()));
                };
                for k in [1usize, 2] {
                    let t = Type::func(k);
                    env.push(t.clone());
                    let got = type_of_in(library, body, env);
                    env.pop();
                    if got.as_ref() == Ok(&t) {
                        return Ok(t);
                    }
                }
                return Err(SemError::IllTyped("Y argument is not a fixpoint of Nat^k -> Nat".into()));
            }
            let tf = type_of_in(library, f, env)?;
            let ta = type_of_in(library, a, env)?;
            match tf {
                Type::Arrow(dom, cod) if *dom == ta => Ok(*cod),
                Type::Arrow(dom, _) => {
                    Err(SemError::IllTyped(format!("argument type {ta} does not match {dom}")))
                }
                Type::Nat => Err(SemError::IllTyped("applied a Nat as a function".into())),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prior and likelihood
// ---------------------------------------------------------------------------

/// Description-length log-prior of a program under the library: each spine
/// head is a uniform draw over the productions available at type Nat in its
/// environment (`0`, `inc`, `dec`, `if`, in-scope variables, library calls),
/// and an arity-k program additionally chooses between its plain-lambda and
/// Y-recursive wrapper.
pub fn program_prior(library: &Library, term: &Term) -> Result<f64, SemError> {
    type_of(library, term)?;
    let (wrapper_choices, body, nvars) = split_wrapper(term)?;
    let mut logp = -(wrapper_choices as f64) * std::f64::consts::LN_2;
    let productions = (4 + nvars + library.len()) as f64;
    logp -= body_atoms(body)? as f64 * productions.ln();
    Ok(logp)
}

/// Strip the `lam^k` or `Y(lam(lam^k))` wrapper. Returns (number of binary
/// wrapper choices, body, number of variables in scope inside the body).
fn split_wrapper(term: &Term) -> Result<(usize, &Term, usize), SemError> {
    match term {
        Term::App(f, a) if matches!(f.as_ref(), Term::Prim(Prim::Y)) => {
            let Term::Abs(inner) = a.as_ref() else {
                return Err(SemError::IllTyped("Y expects a lambda".into()));
            };
            let mut body: &Term = inner;
            let mut k = 0;
            while let Term::Abs(b) = body {
                body = b;
                k += 1;
            }
            Ok((1, body, k + 1))
        }
        Term::Abs(_) => {
            let mut body = term;
            let mut k = 0;
            while let Term::Abs(b) = body {
                body = b;
                k += 1;
            }
            Ok((1, body, k))
        }
        _ => Ok((0, term, 0)),
    }
}

fn body_atoms(body: &Term) -> Result<usize, SemError> {
    match body {
        Term::Prim(_) | Term::Var(_) | Term::LibRef(_) => Ok(1),
        Term::App(f, a) => Ok(body_atoms(f)? + body_atoms(a)?),
        Term::Abs(_) => Err(SemError::IllTyped("nested abstraction outside the wrapper".into())),
    }
}

/// One concept's input-output example buffer, aggregated with counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub pairs: BTreeMap<(Vec<Value>, Value), u64>,
}

impl ExampleSet {
    pub fn add(&mut self, inputs: Vec<Value>, output: Value, count: u64) {
        *self.pairs.entry((inputs, output)).or_insert(0) += count;
    }

    pub fn total(&self) -> u64 {
        self.pairs.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct input tuples in deterministic order.
    pub fn inputs(&self) -> Vec<Vec<Value>> {
        let mut v: Vec<Vec<Value>> = self.pairs.keys().map(|(i, _)| i.clone()).collect();
        v.dedup();
        v
    }
}

pub const DEFAULT_EPSILON: f64 = 0.02;

/// Noise-tolerant log-likelihood of the examples under a program: each
/// example contributes `log(1 - eps)` on a match and `log(eps)` otherwise
/// (divergence counts as a mismatch), times its multiplicity.
pub fn data_likelihood(library: &Library, term: &Term, examples: &ExampleSet, epsilon: f64) -> f64 {
    let ctx = EvalCtx::new(library, Limits::default());
    let mut logp = 0.0;
    let mut outputs: HashMap<&[Value], Result<Value, SemError>> = HashMap::new();
    for ((inputs, output), count) in &examples.pairs {
        let got = outputs
            .entry(inputs.as_slice())
            .or_insert_with(|| ctx.eval(term, inputs))
            .clone();
        let matched = got.map(|v| v == *output).unwrap_or(false);
        logp += *count as f64 * if matched { (1.0 - epsilon).ln() } else { epsilon.ln() };
    }
    logp
}

/// Weighted fraction of examples the program reproduces.
pub fn io_consistency(library: &Library, term: &Term, examples: &ExampleSet) -> f64 {
    let total = examples.total();
    if total == 0 {
        return 0.0;
    }
    let ctx = EvalCtx::new(library, Limits::default());
    let mut matched = 0u64;
    for ((inputs, output), count) in &examples.pairs {
        if ctx.eval(term, inputs) == Ok(*output) {
            matched += count;
        }
    }
    matched as f64 / total as f64
}

// ---------------------------------------------------------------------------
// Induction
// ---------------------------------------------------------------------------

/// Search budget for [`induce`]. `max_nodes` is the hard atom budget; the
/// component caps bound the bottom-up enumeration (they are part of the
/// budget, chosen so the intended operator programs stay reachable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InduceBudget {
    pub max_nodes: usize,
    /// Cap on non-recursive body atoms.
    pub ff_body_cap: usize,
    /// Cap on atoms of each argument to the recursive call.
    pub rec_arg_cap: usize,
    /// Cap on atoms of the companion argument in an arithmetic wrap.
    pub rec_wrap_arg_cap: usize,
    /// Cap on atoms of an `if` condition.
    pub if_cond_cap: usize,
    /// Cap on atoms of the non-recursive branch of a wrapping `if`.
    pub if_branch_cap: usize,
    /// Max distinct example inputs used for search signatures.
    pub max_sig_inputs: usize,
    /// Recursion unroll allowance per evaluation during search.
    pub rec_fuel: u32,
    pub epsilon: f64,
}

impl Default for InduceBudget {
    fn default() -> Self {
        InduceBudget {
            max_nodes: 14,
            ff_body_cap: 8,
            rec_arg_cap: 3,
            rec_wrap_arg_cap: 2,
            if_cond_cap: 3,
            if_branch_cap: 2,
            max_sig_inputs: 64,
            rec_fuel: 500,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Compiled body form used during search: evaluates without touching the
/// general interpreter. `Rec` is the single recursive self-call.
#[derive(Debug, Clone)]
enum Compiled {
    Zero,
    Var(usize),
    Inc(Box<Compiled>),
    Dec(Box<Compiled>),
    If(Box<Compiled>, Box<Compiled>, Box<Compiled>),
    Lib(SymbolId, Vec<Compiled>),
    Rec(Vec<Compiled>),
}

struct SearchCtx<'l> {
    ctx: EvalCtx<'l>,
    max_value: Value,
}

impl<'l> SearchCtx<'l> {
    fn eval(&self, c: &Compiled, args: &[Value], body: Option<&Compiled>, fuel: &mut u32) -> Option<Value> {
        match c {
            Compiled::Zero => Some(0),
            Compiled::Var(i) => args.get(*i).copied(),
            Compiled::Inc(x) => {
                let v = self.eval(x, args, body, fuel)? + 1;
                (v <= self.max_value).then_some(v)
            }
            Compiled::Dec(x) => Some(self.eval(x, args, body, fuel)?.saturating_sub(1)),
            Compiled::If(cond, t, e) => {
                let cv = self.eval(cond, args, body, fuel)?;
                if cv == 0 {
                    self.eval(t, args, body, fuel)
                } else {
                    self.eval(e, args, body, fuel)
                }
            }
            Compiled::Lib(id, cargs) => {
                let mut vals = Vec::with_capacity(cargs.len());
                for a in cargs {
                    vals.push(self.eval(a, args, body, fuel)?);
                }
                let mut steps = 0u64;
                self.ctx.call_library(*id, &vals, &mut steps, 0).ok()
            }
            Compiled::Rec(cargs) => {
                let tpl = body?;
                if *fuel == 0 {
                    return None;
                }
                *fuel -= 1;
                let mut vals = Vec::with_capacity(cargs.len());
                for a in cargs {
                    vals.push(self.eval(a, args, body, fuel)?);
                }
                self.eval(tpl, &vals, body, fuel)
            }
        }
    }

    /// Evaluate a candidate body (recursive if it contains `Rec`) on args.
    fn run(&self, body: &Compiled, args: &[Value], fuel: u32) -> Option<Value> {
        let mut fuel = fuel;
        self.eval(body, args, Some(body), &mut fuel)
    }
}

/// An observational-equivalence class from the non-recursive enumeration.
#[derive(Clone)]
struct FfClass {
    term: Term,
    compiled: Compiled,
    size: usize,
    sig: Vec<Option<Value>>,
}

/// Induce the best-scoring program for a concept of `arity` from examples.
///
/// Digits (arity 0) resolve to constants; operators are searched over
/// non-recursive bodies and a single-recursive-call template wrapped in
/// `Y`. Deterministic for fixed inputs; ties break toward smaller, then
/// lexicographically earlier, programs.
pub fn induce(
    library: &Library,
    arity: usize,
    examples: &ExampleSet,
    budget: &InduceBudget,
) -> Result<Term, SemError> {
    if examples.is_empty() {
        return Err(SemError::SearchExhausted);
    }
    // Signature inputs: the most frequent distinct inputs, deterministically.
    let mut by_count: BTreeMap<Vec<Value>, u64> = BTreeMap::new();
    for ((inputs, _), count) in &examples.pairs {
        *by_count.entry(inputs.clone()).or_insert(0) += count;
    }
    let mut input_order: Vec<(Vec<Value>, u64)> = by_count.into_iter().collect();
    input_order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    input_order.truncate(budget.max_sig_inputs);
    let sig_inputs: Vec<Vec<Value>> = input_order.into_iter().map(|(i, _)| i).collect();
    // Restrict scoring to examples over the signature inputs so that
    // observational-equivalence pruning is exact for the scored set.
    let mut scored = ExampleSet::default();
    for ((inputs, output), count) in &examples.pairs {
        if sig_inputs.contains(inputs) {
            scored.add(inputs.clone(), *output, *count);
        }
    }

    let max_out = scored.pairs.keys().map(|(_, o)| *o).max().unwrap_or(0);
    let sctx = SearchCtx {
        ctx: EvalCtx::new(library, Limits::default()),
        max_value: (max_out + 2).max(64).saturating_mul(4),
    };

    let per_match = (1.0 - budget.epsilon).ln();
    let per_miss = budget.epsilon.ln();
    let score_sig = |sig: &[Option<Value>], prior: f64, best: f64| -> Option<f64> {
        // Optimistic bound first.
        let total = scored.total() as f64;
        if prior + total * per_match <= best {
            return None;
        }
        let mut logp = 0.0;
        for ((inputs, output), count) in &scored.pairs {
            let idx = sig_inputs.iter().position(|i| i == inputs).expect("scored input in sigs");
            let matched = sig[idx] == Some(*output);
            logp += *count as f64 * if matched { per_match } else { per_miss };
        }
        Some(prior + logp)
    };

    let nonrec_productions = (4 + arity + library.len()) as f64;
    let rec_productions = (4 + arity + 1 + library.len()) as f64;
    let wrapper_cost = if arity == 0 { 0.0 } else { std::f64::consts::LN_2 };
    let nonrec_prior = |atoms: usize| -> f64 { -wrapper_cost - atoms as f64 * nonrec_productions.ln() };
    let rec_prior = |atoms: usize| -> f64 { -std::f64::consts::LN_2 - atoms as f64 * rec_productions.ln() };

    let mut best: Option<(f64, usize, String, Term)> = None;
    fn consider(best: &mut Option<(f64, usize, String, Term)>, score: f64, term: Term) {
        let size = term.atoms();
        let key = print_program(&term);
        let better = match best {
            None => true,
            Some((bs, bsize, bkey, _)) => {
                score > *bs
                    || (score == *bs && (size < *bsize || (size == *bsize && key < *bkey)))
            }
        };
        if better {
            *best = Some((score, size, key, term));
        }
    }

    // Arity 0: the grammar at Nat with no variables is, up to observational
    // equivalence, the constants. Enumerate them directly.
    if arity == 0 {
        for k in 0..=max_out + 1 {
            let term = Term::constant(k);
            let atoms = term.atoms();
            if atoms > budget.max_nodes {
                break;
            }
            let prior = nonrec_prior(atoms);
            let sig: Vec<Option<Value>> = sig_inputs.iter().map(|_| Some(k)).collect();
            let cur_best = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            if let Some(score) = score_sig(&sig, prior, cur_best) {
                consider(&mut best, score, term);
            }
        }
        return finish_induce(library, best, &scored, budget);
    }

    // Stage A: non-recursive bodies, bottom-up with observational dedup.
    let ff_cap = budget.ff_body_cap.min(budget.max_nodes.saturating_sub(arity)).max(1);
    let classes = enumerate_ff_classes(&sctx, library, arity, &sig_inputs, ff_cap, budget);
    for class in &classes {
        let term = wrap_plain(arity, class.term.clone());
        let prior = nonrec_prior(class.size + arity);
        let cur_best = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        if let Some(score) = score_sig(&class.sig, prior, cur_best) {
            consider(&mut best, score, term);
        }
    }

    // Stage B: recursive bodies with a single self-call, enumerated through
    // the template  [if-wrap] ( [arith-wrap] ( f(args...) ) ).
    let rec_body_cap = budget.max_nodes.saturating_sub(arity + 2);
    if rec_body_cap >= 1 + arity {
        let small: Vec<&FfClass> =
            classes.iter().filter(|c| c.size <= budget.rec_arg_cap).collect();
        let wrap_args: Vec<&FfClass> =
            classes.iter().filter(|c| c.size <= budget.rec_wrap_arg_cap).collect();
        let branches: Vec<&FfClass> =
            classes.iter().filter(|c| c.size <= budget.if_branch_cap).collect();
        // Conditions must separate the signature inputs.
        let conds: Vec<&FfClass> = {
            let mut seen = HashMap::new();
            let mut out = Vec::new();
            for c in classes.iter().filter(|c| c.size <= budget.if_cond_cap) {
                let pattern: Vec<Option<bool>> =
                    c.sig.iter().map(|v| v.map(|x| x == 0)).collect();
                if pattern.iter().all(|p| *p == Some(true)) || pattern.iter().all(|p| *p == Some(false)) {
                    continue;
                }
                if seen.insert(pattern, ()).is_none() {
                    out.push(c);
                }
            }
            out
        };

        let mut rec_seeds: Vec<(Compiled, Term, usize)> = Vec::new();
        let identity: Vec<usize> = (0..arity).rev().collect();
        let mut arg_sets: Vec<Vec<&FfClass>> = vec![Vec::new()];
        for _ in 0..arity {
            let mut next = Vec::new();
            for partial in &arg_sets {
                for c in &small {
                    let mut p = partial.clone();
                    p.push(*c);
                    next.push(p);
                }
            }
            arg_sets = next;
        }
        for args in &arg_sets {
            let total: usize = args.iter().map(|c| c.size).sum();
            if 1 + total > rec_body_cap {
                continue;
            }
            // f applied to the identity argument list diverges trivially.
            let is_identity = args
                .iter()
                .enumerate()
                .all(|(i, c)| matches!(c.compiled, Compiled::Var(v) if v == identity[i]));
            if is_identity {
                continue;
            }
            let compiled = Compiled::Rec(args.iter().map(|c| c.compiled.clone()).collect());
            // Term: f is the outermost binder: Var index = arity (inside body
            // scope with arity lambdas after the f-binder).
            let term = Term::apps(
                Term::Var(arity),
                args.iter().map(|c| c.term.clone()).collect(),
            );
            rec_seeds.push((compiled, term, 1 + total));
        }

        // Arithmetic wraps around the seed.
        let mut wrapped: Vec<(Compiled, Term, usize)> = Vec::new();
        for (c, t, s) in &rec_seeds {
            wrapped.push((c.clone(), t.clone(), *s));
            if s + 1 <= rec_body_cap {
                wrapped.push((
                    Compiled::Inc(Box::new(c.clone())),
                    Term::app(Term::Prim(Prim::Inc), t.clone()),
                    s + 1,
                ));
                wrapped.push((
                    Compiled::Dec(Box::new(c.clone())),
                    Term::app(Term::Prim(Prim::Dec), t.clone()),
                    s + 1,
                ));
            }
            for lib in &library.entries {
                if lib.arity != 2 {
                    continue;
                }
                for other in &wrap_args {
                    if s + 1 + other.size > rec_body_cap {
                        continue;
                    }
                    wrapped.push((
                        Compiled::Lib(lib.concept, vec![other.compiled.clone(), c.clone()]),
                        Term::apps(Term::LibRef(lib.concept), vec![other.term.clone(), t.clone()]),
                        s + 1 + other.size,
                    ));
                    wrapped.push((
                        Compiled::Lib(lib.concept, vec![c.clone(), other.compiled.clone()]),
                        Term::apps(Term::LibRef(lib.concept), vec![t.clone(), other.term.clone()]),
                        s + 1 + other.size,
                    ));
                }
            }
        }

        // Optional if-wrap, then score every complete body.
        let mut candidates: Vec<(Compiled, Term, usize)> = Vec::new();
        for (c, t, s) in &wrapped {
            candidates.push((c.clone(), t.clone(), *s));
            for cond in &conds {
                for br in &branches {
                    let total = s + 1 + cond.size + br.size;
                    if total > rec_body_cap {
                        continue;
                    }
                    candidates.push((
                        Compiled::If(
                            Box::new(cond.compiled.clone()),
                            Box::new(br.compiled.clone()),
                            Box::new(c.clone()),
                        ),
                        Term::apps(
                            Term::Prim(Prim::If),
                            vec![cond.term.clone(), br.term.clone(), t.clone()],
                        ),
                        total,
                    ));
                    candidates.push((
                        Compiled::If(
                            Box::new(cond.compiled.clone()),
                            Box::new(c.clone()),
                            Box::new(br.compiled.clone()),
                        ),
                        Term::apps(
                            Term::Prim(Prim::If),
                            vec![cond.term.clone(), t.clone(), br.term.clone()],
                        ),
                        total,
                    ));
                }
            }
        }
        candidates.sort_by(|a, b| a.2.cmp(&b.2));

        let total_count = scored.total() as f64;
        for (compiled, term, size) in &candidates {
            let prior = rec_prior(*size);
            let cur_best = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            if prior + total_count * per_match <= cur_best {
                // Sorted by size: nothing later can win either, except via
                // tie-breaking which requires strictly equal score; keep
                // scanning same-size candidates only.
                if candidates
                    .iter()
                    .find(|c| c.2 == *size)
                    .map(|c| rec_prior(c.2) + total_count * per_match < cur_best)
                    .unwrap_or(false)
                {
                    break;
                }
            }
            // Evaluate on the signature inputs with recursion fuel.
            let mut logp = prior;
            let mut dead = false;
            let mut sig_cache: HashMap<&[Value], Option<Value>> = HashMap::new();
            for ((inputs, output), count) in &scored.pairs {
                let got = *sig_cache
                    .entry(inputs.as_slice())
                    .or_insert_with(|| sctx.run(compiled, inputs, budget.rec_fuel));
                let matched = got == Some(*output);
                logp += *count as f64 * if matched { per_match } else { per_miss };
                if logp + total_count * per_match < cur_best {
                    dead = true;
                    break;
                }
            }
            if !dead {
                consider(&mut best, logp, wrap_recursive(arity, term.clone()));
            }
        }
    }

    finish_induce(library, best, &scored, budget)
}

fn wrap_plain(arity: usize, body: Term) -> Term {
    let mut t = body;
    for _ in 0..arity {
        t = Term::lam(t);
    }
    t
}

fn wrap_recursive(arity: usize, body: Term) -> Term {
    let mut t = body;
    for _ in 0..arity {
        t = Term::lam(t);
    }
    Term::app(Term::Prim(Prim::Y), Term::lam(t))
}

fn finish_induce(
    library: &Library,
    best: Option<(f64, usize, String, Term)>,
    scored: &ExampleSet,
    budget: &InduceBudget,
) -> Result<Term, SemError> {
    let Some((_, _, _, term)) = best else {
        return Err(SemError::SearchExhausted);
    };
    // A result that explains nothing is no better than the trivial constant-0
    // program; report exhaustion unless constant-0 itself fits the data.
    let matches = io_consistency(library, &term, scored);
    if matches == 0.0 {
        return Err(SemError::SearchExhausted);
    }
    let _ = budget;
    Ok(term)
}

/// Bottom-up enumeration of non-recursive bodies with observational
/// equivalence on the signature inputs. Signatures compose structurally, so
/// no term is ever interpreted here.
fn enumerate_ff_classes(
    sctx: &SearchCtx<'_>,
    library: &Library,
    arity: usize,
    sig_inputs: &[Vec<Value>],
    cap: usize,
    budget: &InduceBudget,
) -> Vec<FfClass> {
    let mut classes: Vec<FfClass> = Vec::new();
    let mut seen: HashMap<Vec<Option<Value>>, ()> = HashMap::new();
    let mut by_size: Vec<Vec<usize>> = vec![Vec::new(); cap + 1];

    let push = |classes: &mut Vec<FfClass>,
                    seen: &mut HashMap<Vec<Option<Value>>, ()>,
                    by_size: &mut Vec<Vec<usize>>,
                    term: Term,
                    compiled: Compiled,
                    size: usize,
                    sig: Vec<Option<Value>>| {
        if seen.insert(sig.clone(), ()).is_none() {
            by_size[size].push(classes.len());
            classes.push(FfClass { term, compiled, size, sig });
        }
    };

    // Size 1: zero and variables. Var(i) inside the body refers to the
    // (arity - 1 - i)-th argument; argument j (0-based, outermost first) is
    // Var(arity - 1 - j).
    let zero_sig: Vec<Option<Value>> = sig_inputs.iter().map(|_| Some(0)).collect();
    push(
        &mut classes,
        &mut seen,
        &mut by_size,
        Term::Prim(Prim::Zero),
        Compiled::Zero,
        1,
        zero_sig,
    );
    for j in 0..arity {
        let idx = arity - 1 - j;
        let sig: Vec<Option<Value>> = sig_inputs.iter().map(|i| i.get(j).copied()).collect();
        push(
            &mut classes,
            &mut seen,
            &mut by_size,
            Term::Var(idx),
            Compiled::Var(j),
            1,
            sig,
        );
    }

    for size in 2..=cap {
        // Unary: inc, dec.
        for &ci in by_size[size - 1].clone().iter() {
            let c = classes[ci].clone();
            let inc_sig: Vec<Option<Value>> = c
                .sig
                .iter()
                .map(|v| v.and_then(|x| (x + 1 <= sctx.max_value).then_some(x + 1)))
                .collect();
            push(
                &mut classes,
                &mut seen,
                &mut by_size,
                Term::app(Term::Prim(Prim::Inc), c.term.clone()),
                Compiled::Inc(Box::new(c.compiled.clone())),
                size,
                inc_sig,
            );
            let dec_sig: Vec<Option<Value>> =
                c.sig.iter().map(|v| v.map(|x| x.saturating_sub(1))).collect();
            push(
                &mut classes,
                &mut seen,
                &mut by_size,
                Term::app(Term::Prim(Prim::Dec), c.term.clone()),
                Compiled::Dec(Box::new(c.compiled.clone())),
                size,
                dec_sig,
            );
        }
        // Binary library calls.
        for lib in &library.entries {
            if lib.arity != 2 {
                continue;
            }
            for asize in 1..size.saturating_sub(1) {
                let bsize = size - 1 - asize;
                if bsize < 1 || bsize > cap {
                    continue;
                }
                for &ai in by_size[asize].clone().iter() {
                    for &bi in by_size[bsize].clone().iter() {
                        let (a, b) = (classes[ai].clone(), classes[bi].clone());
                        let mut sig = Vec::with_capacity(sig_inputs.len());
                        for k in 0..sig_inputs.len() {
                            let v = match (a.sig[k], b.sig[k]) {
                                (Some(x), Some(y)) => {
                                    let mut steps = 0u64;
                                    sctx.ctx.call_library(lib.concept, &[x, y], &mut steps, 0).ok()
                                }
                                _ => None,
                            };
                            sig.push(v);
                        }
                        push(
                            &mut classes,
                            &mut seen,
                            &mut by_size,
                            Term::apps(Term::LibRef(lib.concept), vec![a.term.clone(), b.term.clone()]),
                            Compiled::Lib(lib.concept, vec![a.compiled.clone(), b.compiled.clone()]),
                            size,
                            sig,
                        );
                    }
                }
            }
        }
        // if(c, t, e) with bounded condition size.
        if size >= 4 {
            for csize in 1..=budget.if_cond_cap.min(size - 3) {
                for tsize in 1..=(size - 1 - csize).saturating_sub(1) {
                    let esize = size - 1 - csize - tsize;
                    if esize < 1 {
                        continue;
                    }
                    for &ci in by_size[csize].clone().iter() {
                        let cond = classes[ci].clone();
                        let zeros = cond.sig.iter().filter(|v| **v == Some(0)).count();
                        let known = cond.sig.iter().filter(|v| v.is_some()).count();
                        if zeros == 0 || zeros == known {
                            continue;
                        }
                        for &ti in by_size[tsize].clone().iter() {
                            for &ei in by_size[esize].clone().iter() {
                                let (t, e) = (classes[ti].clone(), classes[ei].clone());
                                let sig: Vec<Option<Value>> = (0..sig_inputs.len())
                                    .map(|k| match cond.sig[k] {
                                        Some(0) => t.sig[k],
                                        Some(_) => e.sig[k],
                                        None => None,
                                    })
                                    .collect();
                                push(
                                    &mut classes,
                                    &mut seen,
                                    &mut by_size,
                                    Term::apps(
                                        Term::Prim(Prim::If),
                                        vec![cond.term.clone(), t.term.clone(), e.term.clone()],
                                    ),
                                    Compiled::If(
                                        Box::new(cond.compiled.clone()),
                                        Box::new(t.compiled.clone()),
                                        Box::new(e.compiled.clone()),
                                    ),
                                    size,
                                    sig,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    classes
}

// ---------------------------------------------------------------------------
// Concept registry
// ---------------------------------------------------------------------------

/// Per-concept programs and example buffers; the semantic model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSemantics {
    pub programs: BTreeMap<SymbolId, ConceptProgram>,
    pub examples: BTreeMap<SymbolId, ExampleSet>,
    pub library: Library,
    /// Admission threshold for the library (IO-consistency on the concept's
    /// own buffer).
    pub library_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProgram {
    pub arity: usize,
    pub term: Option<Term>,
    pub io_consistency: f64,
}

impl ConceptSemantics {
    /// Registry for a symbol table: parentheses get the fixed identity
    /// program, everything else starts without a program.
    pub fn new(sigma: &crate::expr::Sigma) -> Self {
        let mut programs = BTreeMap::new();
        let mut examples = BTreeMap::new();
        for id in sigma.ids() {
            let kind = sigma.kind(id);
            let arity = kind.arity();
            let term = if kind.is_paren() { Some(Term::lam(Term::Var(0))) } else { None };
            programs.insert(
                id,
                ConceptProgram { arity, term, io_consistency: if kind.is_paren() { 1.0 } else { 0.0 } },
            );
            examples.insert(id, ExampleSet::default());
        }
        ConceptSemantics {
            programs,
            examples,
            library: Library::empty(),
            library_threshold: 0.95,
        }
    }

    /// Register a newly added extension symbol.
    pub fn register_extension(&mut self, sigma: &crate::expr::Sigma, id: SymbolId) {
        self.programs.insert(
            id,
            ConceptProgram { arity: sigma.kind(id).arity(), term: None, io_consistency: 0.0 },
        );
        self.examples.insert(id, ExampleSet::default());
    }

    pub fn arity(&self, concept: SymbolId) -> Result<usize, SemError> {
        self.programs.get(&concept).map(|p| p.arity).ok_or(SemError::UnknownConcept(concept))
    }

    /// Record an abduced example if its input arity matches the concept.
    pub fn record_example(&mut self, concept: SymbolId, inputs: Vec<Value>, output: Value) -> bool {
        let Some(prog) = self.programs.get(&concept) else { return false };
        if prog.arity != inputs.len() {
            return false;
        }
        self.examples.get_mut(&concept).expect("examples entry").add(inputs, output, 1);
        true
    }

    /// Apply a concept program to child values.
    pub fn apply_concept(
        &self,
        concept: SymbolId,
        child_values: &[Value],
        limits: Limits,
    ) -> Result<Value, SemError> {
        let prog = self.programs.get(&concept).ok_or(SemError::UnknownConcept(concept))?;
        if child_values.len() != prog.arity {
            return Err(SemError::ArityMismatch {
                concept: format!("#{concept}"),
                expected: prog.arity,
                got: child_values.len(),
            });
        }
        let term = prog.term.as_ref().ok_or_else(|| SemError::NoProgram(format!("#{concept}")))?;
        eval_program(&self.library, term, child_values, limits)
    }

    /// Re-run induction for every concept whose buffer changed, then refresh
    /// the library (operator concepts whose program is consistent enough).
    ///
    /// `dirty` lists concepts with new examples; returns the concepts whose
    /// program changed.
    pub fn reinduce(&mut self, sigma: &crate::expr::Sigma, dirty: &[SymbolId], budget: &InduceBudget) -> Vec<SymbolId> {
        let mut changed = Vec::new();
        let mut order: Vec<SymbolId> = dirty.to_vec();
        order.sort_unstable();
        order.dedup();
        for &concept in &order {
            if sigma.kind(concept).is_paren() {
                continue;
            }
            let Some(prog) = self.programs.get(&concept) else { continue };
            let arity = prog.arity;
            let examples = self.examples.get(&concept).cloned().unwrap_or_default();
            if examples.is_empty() {
                continue;
            }
            // Keep a program that still explains the buffer.
            if let Some(term) = &prog.term {
                let cons = io_consistency(&self.library, term, &examples);
                if cons >= 0.99 {
                    self.programs.get_mut(&concept).expect("program entry").io_consistency = cons;
                    continue;
                }
            }
            match induce(&self.library, arity, &examples, budget) {
                Ok(term) => {
                    let cons = io_consistency(&self.library, &term, &examples);
                    let entry = self.programs.get_mut(&concept).expect("program entry");
                    if entry.term.as_ref() != Some(&term) {
                        changed.push(concept);
                    }
                    entry.term = Some(term);
                    entry.io_consistency = cons;
                }
                Err(_) => {
                    // Leave any existing program in place; refresh its score.
                    let lib = &self.library;
                    let entry = self.programs.get_mut(&concept).expect("program entry");
                    if let Some(term) = &entry.term {
                        entry.io_consistency = io_consistency(lib, term, &examples);
                    }
                }
            }
        }
        self.refresh_library(sigma);
        changed
    }

    /// Rebuild the library from operator concepts whose programs pass the
    /// admission threshold. Digits stay out: constants as extra productions
    /// mostly blow up the search space.
    pub fn refresh_library(&mut self, sigma: &crate::expr::Sigma) {
        let mut entries = Vec::new();
        for (&id, prog) in &self.programs {
            if !sigma.kind(id).is_operator() {
                continue;
            }
            if let Some(term) = &prog.term {
                if prog.io_consistency > self.library_threshold {
                    entries.push(LibEntry {
                        concept: id,
                        name: sigma.name(id).to_string(),
                        arity: prog.arity,
                        term: term.clone(),
                    });
                }
            }
        }
        self.library = Library { entries };
    }

    /// Measure io-consistency of every concept against its buffer.
    pub fn consistency_report(&self) -> BTreeMap<SymbolId, f64> {
        let mut out = BTreeMap::new();
        for (&id, prog) in &self.programs {
            let score = match (&prog.term, self.examples.get(&id)) {
                (Some(term), Some(ex)) if !ex.is_empty() => io_consistency(&self.library, term, ex),
                _ => 0.0,
            };
            out.insert(id, score);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Canonical S-expression form
// ---------------------------------------------------------------------------

/// Print a program in canonical S-expression form, e.g. the recursive add:
/// `(Y (lam (lam (lam (if 1 0 (inc ((2 (dec 1)) 0)))))))`. Bare integers are
/// De Bruijn variables; the zero primitive prints as `Z`; library calls print
/// by concept name.
pub fn print_program(term: &Term) -> String {
    print_program_named(term, &|id| format!("lib{id}"))
}

/// As [`print_program`], resolving library names through `name_of`.
pub fn print_program_named(term: &Term, name_of: &dyn Fn(SymbolId) -> String) -> String {
    match term {
        Term::Prim(p) => p.name().to_string(),
        Term::Var(i) => i.to_string(),
        Term::LibRef(c) => name_of(*c),
        Term::Abs(b) => format!("(lam {})", print_program_named(b, name_of)),
        Term::App(_, _) => {
            let mut spine = Vec::new();
            let mut head = term;
            while let Term::App(f, a) = head {
                spine.push(a.as_ref());
                head = f;
            }
            spine.reverse();
            match head {
                Term::Prim(_) | Term::LibRef(_) => {
                    let mut s = format!("({}", print_program_named(head, name_of));
                    for a in spine {
                        s.push(' ');
                        s.push_str(&print_program_named(a, name_of));
                    }
                    s.push(')');
                    s
                }
                _ => {
                    // Variable-headed spines print curried.
                    let mut s = print_program_named(head, name_of);
                    for a in spine {
                        s = format!("({s} {})", print_program_named(a, name_of));
                    }
                    s
                }
            }
        }
    }
}

/// Parse the canonical S-expression form. `resolve` maps library-call names
/// back to concept ids.
pub fn parse_program(
    text: &str,
    resolve: &dyn Fn(&str) -> Option<SymbolId>,
) -> Result<Term, SemError> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    let mut pos = 0;
    let term = parse_sexpr(&tokens, &mut pos, resolve)?;
    if pos != tokens.len() {
        return Err(SemError::BadProgramText(format!("trailing tokens at {pos}")));
    }
    Ok(term)
}

fn parse_sexpr(
    tokens: &[String],
    pos: &mut usize,
    resolve: &dyn Fn(&str) -> Option<SymbolId>,
) -> Result<Term, SemError> {
    let Some(tok) = tokens.get(*pos) else {
        return Err(SemError::BadProgramText("unexpected end".into()));
    };
    *pos += 1;
    match tok.as_str() {
        "(" => {
            let mut items = Vec::new();
            // `lam` heads bind the rest of the list as a single body.
            if tokens.get(*pos).map(String::as_str) == Some("lam") {
                *pos += 1;
                let body = parse_sexpr(tokens, pos, resolve)?;
                expect(tokens, pos, ")")?;
                return Ok(Term::lam(body));
            }
            while tokens.get(*pos).map(String::as_str) != Some(")") {
                items.push(parse_sexpr(tokens, pos, resolve)?);
            }
            expect(tokens, pos, ")")?;
            let mut it = items.into_iter();
            let head = it.next().ok_or_else(|| SemError::BadProgramText("empty list".into()))?;
            Ok(it.fold(head, Term::app))
        }
        ")" => Err(SemError::BadProgramText("unexpected )".into())),
        "Z" => Ok(Term::Prim(Prim::Zero)),
        "inc" => Ok(Term::Prim(Prim::Inc)),
        "dec" => Ok(Term::Prim(Prim::Dec)),
        "if" => Ok(Term::Prim(Prim::If)),
        "Y" => Ok(Term::Prim(Prim::Y)),
        other => {
            if let Ok(i) = other.parse::<usize>() {
                Ok(Term::Var(i))
            } else if let Some(id) = resolve(other) {
                Ok(Term::LibRef(id))
            } else {
                Err(SemError::BadProgramText(format!("unknown token {other}")))
            }
        }
    }
}

fn expect(tokens: &[String], pos: &mut usize, what: &str) -> Result<(), SemError> {
    if tokens.get(*pos).map(String::as_str) == Some(what) {
        *pos += 1;
        Ok(())
    } else {
        Err(SemError::BadProgramText(format!("expected {what} at {pos}")))
    }
}

// ---------------------------------------------------------------------------
// Reference programs (used by tests and ground-truth injection)
// ---------------------------------------------------------------------------

/// The recursive addition program
/// `(Y (lam (lam (lam (if 1 0 (inc ((2 (dec 1)) 0)))))))`.
pub fn add_program() -> Term {
    parse_program("(Y (lam (lam (lam (if 1 0 (inc ((2 (dec 1)) 0)))))))", &|_| None).expect("add")
}

/// Recursive monus: count both arguments down until the second hits zero.
pub fn sub_program() -> Term {
    parse_program("(Y (lam (lam (lam (if 0 1 ((2 (dec 1)) (dec 0)))))))", &|_| None).expect("sub")
}

/// Repeated addition; requires `add` in the library under the node budget.
pub fn mul_program(add: SymbolId) -> Term {
    Term::app(
        Term::Prim(Prim::Y),
        Term::lam(Term::lam(Term::lam(Term::apps(
            Term::Prim(Prim::If),
            vec![
                Term::Var(1),
                Term::Prim(Prim::Zero),
                Term::apps(
                    Term::LibRef(add),
                    vec![
                        Term::Var(0),
                        Term::apps(
                            Term::Var(2),
                            vec![Term::app(Term::Prim(Prim::Dec), Term::Var(1)), Term::Var(0)],
                        ),
                    ],
                ),
            ],
        )))),
    )
}

/// Repeated subtraction; requires `sub` in the library.
pub fn div_program(sub: SymbolId) -> Term {
    Term::app(
        Term::Prim(Prim::Y),
        Term::lam(Term::lam(Term::lam(Term::apps(
            Term::Prim(Prim::If),
            vec![
                Term::apps(Term::LibRef(sub), vec![Term::Var(0), Term::Var(1)]),
                Term::app(
                    Term::Prim(Prim::Inc),
                    Term::apps(
                        Term::Var(2),
                        vec![
                            Term::apps(Term::LibRef(sub), vec![Term::Var(1), Term::Var(0)]),
                            Term::Var(0),
                        ],
                    ),
                ),
                Term::Prim(Prim::Zero),
            ],
        )))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Sigma;

    fn lib_with_add_sub() -> (Library, SymbolId, SymbolId) {
        let sigma = Sigma::base();
        let add = sigma.by_name("+").unwrap();
        let sub = sigma.by_name("-").unwrap();
        let lib = Library {
            entries: vec![
                LibEntry { concept: add, name: "+".into(), arity: 2, term: add_program() },
                LibEntry { concept: sub, name: "-".into(), arity: 2, term: sub_program() },
            ],
        };
        (lib, add, sub)
    }

    #[test]
    fn eval_primitive_composition() {
        let lib = Library::empty();
        let two = Term::constant(2);
        assert_eq!(eval_program(&lib, &two, &[], Limits::default()).unwrap(), 2);
    }

    /// Independent reduction oracle: substitution-based normal-order
    /// beta/delta reduction, no environments, no closures.
    mod reduction_oracle {
        use super::super::{Prim, Term};

        fn shift(t: &Term, by: isize, cutoff: usize) -> Term {
            match t {
                Term::Var(i) if *i >= cutoff => Term::Var((*i as isize + by) as usize),
                Term::Var(i) => Term::Var(*i),
                Term::Prim(p) => Term::Prim(*p),
                Term::LibRef(c) => Term::LibRef(*c),
                Term::Abs(b) => Term::Abs(Box::new(shift(b, by, cutoff + 1))),
                Term::App(f, a) => {
                    Term::App(Box::new(shift(f, by, cutoff)), Box::new(shift(a, by, cutoff)))
                }
            }
        }

        fn subst(t: &Term, idx: usize, v: &Term) -> Term {
            match t {
                Term::Var(i) if *i == idx => v.clone(),
                Term::Var(i) if *i > idx => Term::Var(i - 1),
                Term::Var(i) => Term::Var(*i),
                Term::Prim(p) => Term::Prim(*p),
                Term::LibRef(c) => Term::LibRef(*c),
                Term::Abs(b) => Term::Abs(Box::new(subst(b, idx + 1, &shift(v, 1, 0)))),
                Term::App(f, a) => {
                    Term::App(Box::new(subst(f, idx, v)), Box::new(subst(a, idx, v)))
                }
            }
        }

        fn as_nat(t: &Term) -> Option<u64> {
            match t {
                Term::Prim(Prim::Zero) => Some(0),
                Term::App(f, a) if matches!(f.as_ref(), Term::Prim(Prim::Inc)) => {
                    as_nat(a).map(|n| n + 1)
                }
                _ => None,
            }
        }

        /// One leftmost-outermost reduction step; None if normal.
        fn step(t: &Term) -> Option<Term> {
            if let Term::App(f, a) = t {
                // Y g -> g (Y g)
                if matches!(f.as_ref(), Term::Prim(Prim::Y)) {
                    return Some(Term::App(a.clone(), Box::new(t.clone())));
                }
                // beta
                if let Term::Abs(body) = f.as_ref() {
                    return Some(subst(body, 0, a));
                }
                // delta: spine of prims on nat arguments
                let mut spine = vec![a.as_ref().clone()];
                let mut head = f.as_ref();
                while let Term::App(g, b) = head {
                    spine.push(b.as_ref().clone());
                    head = g;
                }
                spine.reverse();
                if let Term::Prim(p) = head {
                    match p {
                        Prim::Dec if spine.len() == 1 => {
                            if let Some(n) = as_nat(&spine[0]) {
                                return Some(Term::constant(n.saturating_sub(1)));
                            }
                        }
                        Prim::If if spine.len() >= 3 => {
                            if let Some(c) = as_nat(&spine[0]) {
                                let picked =
                                    if c == 0 { spine[1].clone() } else { spine[2].clone() };
                                let rest = spine[3..].to_vec();
                                return Some(Term::apps(picked, rest));
                            }
                        }
                        _ => {}
                    }
                }
                // otherwise reduce inside, left to right
                if let Some(f2) = step(f) {
                    return Some(Term::App(Box::new(f2), a.clone()));
                }
                if let Some(a2) = step(a) {
                    return Some(Term::App(f.clone(), Box::new(a2)));
                }
                return None;
            }
            None
        }

        pub fn normalize(mut t: Term, fuel: usize) -> Option<u64> {
            for _ in 0..fuel {
                if let Some(n) = as_nat(&t) {
                    return Some(n);
                }
                t = step(&t)?;
            }
            as_nat(&t)
        }
    }

    #[test]
    fn add_program_matches_reduction_oracle() {
        let lib = Library::empty();
        let add = add_program();
        // Hand-simulated reduction oracle on (ADD 3 4).
        let applied = Term::apps(add.clone(), vec![Term::constant(3), Term::constant(4)]);
        assert_eq!(reduction_oracle::normalize(applied, 100_000), Some(7));
        assert_eq!(eval_program(&lib, &add, &[3, 4], Limits::default()).unwrap(), 7);
        // Cross-check a grid against the oracle.
        for a in 0..6u64 {
            for b in 0..6u64 {
                let applied =
                    Term::apps(add.clone(), vec![Term::constant(a), Term::constant(b)]);
                assert_eq!(
                    reduction_oracle::normalize(applied, 200_000),
                    Some(a + b),
                    "oracle add {a}+{b}"
                );
                assert_eq!(
                    eval_program(&lib, &add, &[a, b], Limits::default()).unwrap(),
                    a + b
                );
            }
        }
    }

    #[test]
    fn divergence_hits_step_limit() {
        let lib = Library::empty();
        // Y (lam (lam (1 0))) applied to 1: f a = f a forever.
        let t = Term::app(
            Term::Prim(Prim::Y),
            Term::lam(Term::lam(Term::app(Term::Var(1), Term::Var(0)))),
        );
        let limits = Limits { max_steps: 10_000, ..Limits::default() };
        assert_eq!(
            eval_program(&lib, &t, &[1], limits).unwrap_err(),
            SemError::StepLimitExceeded
        );
    }

    #[test]
    fn reference_programs_extrapolate() {
        let (lib, add, sub) = lib_with_add_sub();
        let mul = mul_program(add);
        let div = div_program(sub);
        let limits = Limits { max_steps: 10_000_000, ..Limits::default() };
        for a in [0u64, 1, 7, 23, 150] {
            for b in [0u64, 1, 4, 19, 150] {
                assert_eq!(eval_program(&lib, &add_program(), &[a, b], limits).unwrap(), a + b);
                assert_eq!(
                    eval_program(&lib, &sub_program(), &[a, b], limits).unwrap(),
                    a.saturating_sub(b)
                );
                assert_eq!(eval_program(&lib, &mul, &[a, b], limits).unwrap(), a * b);
                if b > 0 {
                    assert_eq!(eval_program(&lib, &div, &[a, b], limits).unwrap(), a / b);
                }
            }
        }
    }

    #[test]
    fn typing_accepts_reference_programs() {
        let (lib, add, sub) = lib_with_add_sub();
        assert_eq!(type_of(&lib, &add_program()).unwrap(), Type::func(2));
        assert_eq!(type_of(&lib, &sub_program()).unwrap(), Type::func(2));
        assert_eq!(type_of(&lib, &mul_program(add)).unwrap(), Type::func(2));
        assert_eq!(type_of(&lib, &div_program(sub)).unwrap(), Type::func(2));
        assert_eq!(type_of(&lib, &Term::constant(5)).unwrap(), Type::Nat);
        // Ill-typed: applying a natural.
        let bad = Term::app(Term::Prim(Prim::Zero), Term::Prim(Prim::Zero));
        assert!(type_of(&lib, &bad).is_err());
    }

    #[test]
    fn prior_counts_productions() {
        let lib = Library::empty();
        // At type Nat with no variables the fixed grammar offers exactly
        // four productions: 0, inc, dec, if.
        let base_productions = 4.0f64;
        let p0 = program_prior(&lib, &Term::Prim(Prim::Zero)).unwrap();
        assert!((p0 - (-(base_productions.ln()))).abs() < 1e-12);

        let p_inc0 = program_prior(&lib, &Term::constant(1)).unwrap();
        assert!(p_inc0 < p0, "longer program has strictly lower prior");

        // Same term under a larger library: lower log-prior.
        let (lib2, _, _) = lib_with_add_sub();
        let p0_big = program_prior(&lib2, &Term::Prim(Prim::Zero)).unwrap();
        assert!(p0_big < p0);
    }

    #[test]
    fn likelihood_formulas() {
        let lib = Library::empty();
        let three = Term::constant(3);
        let mut ex = ExampleSet::default();
        ex.add(vec![], 3, 10);
        let l = data_likelihood(&lib, &three, &ex, DEFAULT_EPSILON);
        assert!((l - 10.0 * 0.98f64.ln()).abs() < 1e-9);

        let mut ex2 = ExampleSet::default();
        ex2.add(vec![], 3, 9);
        ex2.add(vec![], 4, 1);
        let l2 = data_likelihood(&lib, &three, &ex2, DEFAULT_EPSILON);
        assert!((l2 - (9.0 * 0.98f64.ln() + 0.02f64.ln())).abs() < 1e-9);

        // A corrupted example stays finite.
        let add = add_program();
        let mut ex3 = ExampleSet::default();
        ex3.add(vec![2, 3], 6, 1);
        let l3 = data_likelihood(&lib, &add, &ex3, DEFAULT_EPSILON);
        assert!((l3 - 0.02f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn monotone_scoring() {
        // Adding a consistent example never shrinks the likelihood gap
        // between a program that fits it and one that does not.
        let lib = Library::empty();
        let good = add_program();
        let bad = Term::lam(Term::lam(Term::Var(1))); // returns first arg
        let mut ex = ExampleSet::default();
        ex.add(vec![1, 2], 3, 5);
        let gap_before = data_likelihood(&lib, &good, &ex, DEFAULT_EPSILON)
            - data_likelihood(&lib, &bad, &ex, DEFAULT_EPSILON);
        ex.add(vec![4, 4], 8, 1);
        let gap_after = data_likelihood(&lib, &good, &ex, DEFAULT_EPSILON)
            - data_likelihood(&lib, &bad, &ex, DEFAULT_EPSILON);
        assert!(gap_after >= gap_before);
    }

    #[test]
    fn induce_digit_constant() {
        let lib = Library::empty();
        let mut ex = ExampleSet::default();
        ex.add(vec![], 3, 20);
        let term = induce(&lib, 0, &ex, &InduceBudget::default()).unwrap();
        assert_eq!(term, Term::constant(3));
    }

    #[test]
    fn induce_add_from_clean_pairs() {
        let lib = Library::empty();
        let mut ex = ExampleSet::default();
        // 50 deterministic pseudo-random pairs with operands <= 10.
        let mut state = 0x2545F4914F6CDD1Du64;
        for _ in 0..50 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (state >> 33) % 11;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (state >> 33) % 11;
            ex.add(vec![a, b], a + b, 1);
        }
        let term = induce(&lib, 2, &ex, &InduceBudget::default()).unwrap();
        for a in 0..=20u64 {
            for b in 0..=20u64 {
                assert_eq!(
                    eval_program(&lib, &term, &[a, b], Limits::default()).unwrap(),
                    a + b,
                    "induced + wrong at ({a},{b}): {}",
                    print_program(&term)
                );
            }
        }
    }

    #[test]
    fn mul_needs_add_in_library() {
        let empty = Library::empty();
        let mut ex = ExampleSet::default();
        let mut state = 99u64;
        for _ in 0..50 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (state >> 33) % 11;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (state >> 33) % 11;
            ex.add(vec![a, b], a * b, 1);
        }
        // Without + in the library the budget cannot express multiplication.
        let without = induce(&empty, 2, &ex, &InduceBudget::default());
        let fits_without = without
            .map(|t| io_consistency(&empty, &t, &ex) >= 0.99)
            .unwrap_or(false);
        assert!(!fits_without, "multiplication should be out of reach without +");

        let (lib, _add, _sub) = lib_with_add_sub();
        let term = induce(&lib, 2, &ex, &InduceBudget::default()).unwrap();
        for a in 0..=15u64 {
            for b in 0..=15u64 {
                assert_eq!(
                    eval_program(&lib, &term, &[a, b], Limits::default()).unwrap(),
                    a * b,
                    "induced * wrong at ({a},{b}): {}",
                    print_program(&term)
                );
            }
        }
    }

    #[test]
    fn apply_concept_dispatch() {
        let sigma = Sigma::base();
        let mut sem = ConceptSemantics::new(&sigma);
        // Parenthesis identity.
        assert_eq!(sem.apply_concept(sigma.open_paren(), &[9], Limits::default()).unwrap(), 9);
        // Digit constant.
        let five = sigma.digit(5);
        sem.programs.get_mut(&five).unwrap().term = Some(Term::constant(5));
        assert_eq!(sem.apply_concept(five, &[], Limits::default()).unwrap(), 5);
        // Converged +.
        let plus = sigma.by_name("+").unwrap();
        sem.programs.get_mut(&plus).unwrap().term = Some(add_program());
        assert_eq!(sem.apply_concept(plus, &[7, 8], Limits::default()).unwrap(), 15);
        // Missing program.
        let times = sigma.by_name("*").unwrap();
        assert!(matches!(
            sem.apply_concept(times, &[2, 2], Limits::default()),
            Err(SemError::NoProgram(_))
        ));
        // Arity mismatch.
        assert!(matches!(
            sem.apply_concept(plus, &[1], Limits::default()),
            Err(SemError::ArityMismatch { .. })
        ));
    }

    #[test]
    fn sexpr_round_trip_and_spec_form() {
        let add = add_program();
        assert_eq!(
            print_program(&add),
            "(Y (lam (lam (lam (if 1 0 (inc ((2 (dec 1)) 0)))))))"
        );
        let sigma = Sigma::base();
        let names = |id: SymbolId| sigma.name(id).to_string();
        let resolve = |name: &str| sigma.by_name(name);
        for term in [
            add_program(),
            sub_program(),
            mul_program(sigma.by_name("+").unwrap()),
            div_program(sigma.by_name("-").unwrap()),
            Term::constant(7),
        ] {
            let text = print_program_named(&term, &names);
            let parsed = parse_program(&text, &resolve).unwrap();
            assert_eq!(parsed, term, "round trip failed for {text}");
        }
    }

    #[test]
    fn record_example_checks_arity() {
        let sigma = Sigma::base();
        let mut sem = ConceptSemantics::new(&sigma);
        let plus = sigma.by_name("+").unwrap();
        assert!(sem.record_example(plus, vec![2, 3], 5));
        assert!(!sem.record_example(plus, vec![2], 5), "wrong arity dropped");
        assert!(!sem.record_example(sigma.digit(4), vec![1], 4));
        assert!(sem.record_example(sigma.digit(4), vec![], 4));
    }
}
