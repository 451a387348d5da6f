//! Deduction-abduction learning.
//!
//! Each epoch greedily deduces a compound tree (symbols, parse, values) for
//! every sample, abduces a one-edit revision whose root value explains the
//! observed result when the deduction is wrong, buffers the accepted
//! solutions, and uses them as pseudo supervision: (glyph, symbol) pairs for
//! perception, oracle transitions for the parser, and per-concept
//! input-output examples for program induction.
//!
//! Abduction searches the tree's neighborhood top-down with a priority
//! queue. From a popped node it proposes perception swaps, syntax rotations,
//! a semantic example recording, and descends into children with expected
//! values from a bounded forward `Solve`. Every returned tree differs from
//! the deduction by at most one edit and its root evaluates exactly to the
//! observed result.

use crate::dataset::{HintDataset, HintSample};
use crate::expr::{
    gt_op_semantics, oracle_eval, ParseTree, Sigma, SymbolId, SymbolKind, Value,
};
use crate::parser::{
    greedy_parse, oracle_states, parser_update, tree_log_prob, ParserModel, TransitionExample,
};
use crate::perception::{perception_update, PerceptionModel};
use crate::semantics::{ConceptSemantics, EvalCtx, InduceBudget, Limits};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::sync::RwLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LearnError {
    #[error("parse failure during deduction")]
    ParseFailure,
    #[error("invalid rotation: {0}")]
    RotationInvalid(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Ground-truth injection flags (ablation settings). An injected level is
/// replaced by its oracle both during training and at inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtInjection {
    pub perception: bool,
    pub syntax: bool,
    pub semantics: bool,
}

impl GtInjection {
    pub const NONE: GtInjection =
        GtInjection { perception: false, syntax: false, semantics: false };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.perception {
            parts.push("per");
        }
        if self.syntax {
            parts.push("syn");
        }
        if self.semantics {
            parts.push("sem");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// The three models plus injection flags and evaluation limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Models {
    pub sigma: Sigma,
    pub perception: PerceptionModel,
    pub parser: ParserModel,
    pub semantics: ConceptSemantics,
    pub gt: GtInjection,
    pub limits: Limits,
}

impl Models {
    pub fn new(sigma: &Sigma, feature_dim: usize, seed: u64) -> Self {
        Models {
            sigma: sigma.clone(),
            perception: PerceptionModel::new(feature_dim, 2 * feature_dim, sigma.len(), seed),
            parser: ParserModel::new(sigma.len(), seed.wrapping_add(1)),
            semantics: ConceptSemantics::new(sigma),
            gt: GtInjection::NONE,
            limits: Limits::default(),
        }
    }
}

/// One node of a compound tree: (glyph index, symbol, value) plus the arc to
/// its head. Nodes are indexed by token position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtNode {
    pub pos: usize,
    pub symbol: SymbolId,
    pub value: Option<Value>,
    pub head: Option<usize>,
}

/// A pending semantic example recorded by abduction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemEdit {
    pub node: usize,
    pub concept: SymbolId,
    pub inputs: Vec<Value>,
    pub output: Value,
}

/// The joint latent solution: per-node (glyph, symbol, value) triplets plus
/// dependency arcs, with cached perception and parse log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundTree {
    pub nodes: Vec<CtNode>,
    pub root: usize,
    /// Log-probability of the parse under the syntax model.
    pub parse_logp: f64,
    /// Per-node log p(symbol | glyph) under the perception model.
    pub percept_logp: Vec<f64>,
    pub sem_edits: Vec<SemEdit>,
}

impl CompoundTree {
    pub fn symbols(&self) -> Vec<SymbolId> {
        self.nodes.iter().map(|n| n.symbol).collect()
    }

    pub fn tree(&self) -> ParseTree {
        ParseTree { heads: self.nodes.iter().map(|n| n.head).collect(), root: self.root }
    }

    pub fn children(&self, pos: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&d| self.nodes[d].head == Some(pos)).collect()
    }

    pub fn root_value(&self) -> Option<Value> {
        self.nodes[self.root].value
    }
}

/// Concept-application memo shared across samples within one epoch (the
/// models are frozen there, so values are pure).
pub type SharedApplyMemo = std::sync::Arc<std::sync::Mutex<HashMap<(SymbolId, Vec<Value>), Option<Value>>>>;

/// Shared per-sample evaluation machinery: concept-application memo plus the
/// semantics context.
struct ValueCtx<'m> {
    models: &'m Models,
    ctx: EvalCtx<'m>,
    memo: RefCell<HashMap<(SymbolId, Vec<Value>), Option<Value>>>,
    shared: Option<SharedApplyMemo>,
}

impl<'m> ValueCtx<'m> {
    fn new(models: &'m Models) -> Self {
        Self::with_shared(models, None)
    }

    fn with_shared(models: &'m Models, shared: Option<SharedApplyMemo>) -> Self {
        ValueCtx {
            models,
            ctx: EvalCtx::new(&models.semantics.library, models.limits),
            memo: RefCell::new(HashMap::new()),
            shared,
        }
    }

    /// Apply a concept to operand values under the current semantic model
    /// (or ground truth when injected). `None` means no value.
    fn apply(&self, symbol: SymbolId, child_values: &[Value]) -> Option<Value> {
        let kind = self.models.sigma.kind(symbol);
        if kind.arity() != child_values.len() {
            return None;
        }
        if kind.is_paren() {
            return Some(child_values[0]);
        }
        if self.models.gt.semantics {
            return match kind {
                SymbolKind::Digit(d) => Some(d as Value),
                SymbolKind::Operator { .. } => {
                    gt_op_semantics(&self.models.sigma, symbol, child_values[0], child_values[1])
                        .ok()
                }
                _ => None,
            };
        }
        let key = (symbol, child_values.to_vec());
        if let Some(hit) = self.memo.borrow().get(&key) {
            return *hit;
        }
        if let Some(shared) = &self.shared {
            if let Some(hit) = shared.lock().expect("apply memo").get(&key).copied() {
                self.memo.borrow_mut().insert(key, hit);
                return hit;
            }
        }
        let prog = self.models.semantics.programs.get(&symbol)?;
        let out = prog.term.as_ref().and_then(|term| self.ctx.eval(term, child_values).ok());
        self.memo.borrow_mut().insert(key.clone(), out);
        if let Some(shared) = &self.shared {
            shared.lock().expect("apply memo").insert(key, out);
        }
        out
    }
}

/// Recompute all values bottom-up with the semantic model; `overrides`
/// forces values at semantically edited nodes. Parentheses copy their
/// head's value; structurally invalid nodes (wrong operand arity, parens
/// with dependents) get no value.
fn eval_values(ct: &mut CompoundTree, vctx: &ValueCtx<'_>, overrides: &BTreeMap<usize, Value>) {
    let n = ct.nodes.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for d in 0..n {
        if let Some(h) = ct.nodes[d].head {
            children[h].push(d);
        }
    }
    for node in &mut ct.nodes {
        node.value = None;
    }
    // Post-order from the root.
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(ct.root, false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
        } else {
            stack.push((v, true));
            for &c in children[v].iter().rev() {
                stack.push((c, false));
            }
        }
    }
    let sigma = &vctx.models.sigma;
    for &v in &order {
        let operand_values: Option<Vec<Value>> = {
            let mut vals = Vec::new();
            let mut ok = true;
            for &c in &children[v] {
                if sigma.kind(ct.nodes[c].symbol).is_paren() {
                    continue;
                }
                match ct.nodes[c].value {
                    Some(x) => vals.push(x),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            ok.then_some(vals)
        };
        let value = if let Some(&forced) = overrides.get(&v) {
            Some(forced)
        } else if sigma.kind(ct.nodes[v].symbol).is_paren() {
            // Parens are dependents; they never compute from children.
            if children[v].is_empty() {
                None // filled from the head below
            } else {
                None
            }
        } else {
            operand_values.and_then(|vals| vctx.apply(ct.nodes[v].symbol, &vals))
        };
        ct.nodes[v].value = value;
    }
    // Copy-through values for parenthesis dependents (top-down).
    for &v in order.iter().rev() {
        if let Some(h) = ct.nodes[v].head {
            if sigma.kind(ct.nodes[v].symbol).is_paren() && children[v].is_empty() {
                ct.nodes[v].value = ct.nodes[h].value;
            }
        }
    }
}

/// A cache of greedy parses keyed by symbol sequence, invalidated whenever
/// the parser weights change.
pub struct ParseCache {
    version: u64,
    map: RwLock<HashMap<Vec<SymbolId>, Option<(ParseTree, f64)>>>,
}

impl ParseCache {
    pub fn new() -> Self {
        ParseCache { version: u64::MAX, map: RwLock::new(HashMap::new()) }
    }

    pub fn parse(&self, parser: &ParserModel, tokens: &[SymbolId]) -> Option<(ParseTree, f64)> {
        {
            let map = self.map.read().expect("parse cache poisoned");
            if let Some(hit) = map.get(tokens) {
                return hit.clone();
            }
        }
        let computed = greedy_parse(parser, tokens).ok();
        self.map
            .write()
            .expect("parse cache poisoned")
            .insert(tokens.to_vec(), computed.clone());
        computed
    }

    pub fn sync_version(&mut self, parser: &ParserModel) {
        if self.version != parser.version {
            self.map.write().expect("parse cache poisoned").clear();
            self.version = parser.version;
        }
    }
}

impl Default for ParseCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-token perception log-probability matrix for a sample; `None` under
/// ground-truth perception injection.
pub fn percept_log_matrix(models: &Models, sample: &HintSample) -> Option<Vec<Vec<f64>>> {
    if models.gt.perception {
        return None;
    }
    let mut rows = Vec::with_capacity(sample.glyphs.len());
    for g in &sample.glyphs {
        rows.push(models.perception.perceive_log(&g.features).ok()?);
    }
    Some(rows)
}

/// Greedy deduction: argmax symbols from perception (or hidden labels under
/// ground-truth injection), greedy parse, bottom-up values.
///
/// `sampling_seed` switches per-token symbol sampling on (used by the
/// optional sampling mode).
pub fn deduce(
    models: &Models,
    sample: &HintSample,
    cache: Option<&ParseCache>,
    sampling_seed: Option<u64>,
) -> Result<CompoundTree, LearnError> {
    let percept = percept_log_matrix(models, sample);
    deduce_with(models, sample, percept.as_deref(), cache, sampling_seed)
}

/// As [`deduce`], reusing a precomputed perception matrix.
pub fn deduce_with(
    models: &Models,
    sample: &HintSample,
    percept: Option<&[Vec<f64>]>,
    cache: Option<&ParseCache>,
    sampling_seed: Option<u64>,
) -> Result<CompoundTree, LearnError> {
    deduce_shared(models, sample, percept, cache, sampling_seed, None)
}

fn deduce_shared(
    models: &Models,
    sample: &HintSample,
    percept: Option<&[Vec<f64>]>,
    cache: Option<&ParseCache>,
    sampling_seed: Option<u64>,
    shared: Option<SharedApplyMemo>,
) -> Result<CompoundTree, LearnError> {
    if sample.glyphs.is_empty() {
        return Err(LearnError::ParseFailure);
    }
    let n = sample.glyphs.len();
    let sigma = &models.sigma;
    let mut symbols = Vec::with_capacity(n);
    let mut percept_logp = Vec::with_capacity(n);
    if models.gt.perception {
        for &tok in &sample.symbols.tokens {
            symbols.push(tok);
            percept_logp.push(0.0);
        }
    } else {
        let percept = percept.ok_or(LearnError::ParseFailure)?;
        let mut rng = sampling_seed.map(ChaCha8Rng::seed_from_u64);
        for logp in percept.iter().take(n) {
            let pick = match &mut rng {
                None => argmax(logp),
                Some(r) => {
                    let u: f64 = r.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut pick = logp.len() - 1;
                    for (i, &lp) in logp.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            symbols.push(pick);
            percept_logp.push(logp[pick]);
        }
    }

    let (tree, parse_logp) = if models.gt.syntax {
        // Ground-truth syntax: the gold tree of the true expression (token
        // positions align with the perceived sequence).
        let rec = oracle_eval(sigma, &sample.symbols).map_err(|_| LearnError::ParseFailure)?;
        (rec.gold_tree, 0.0)
    } else {
        let parsed = match cache {
            Some(c) => c.parse(&models.parser, &symbols),
            None => greedy_parse(&models.parser, &symbols).ok(),
        };
        parsed.ok_or(LearnError::ParseFailure)?
    };

    let mut ct = CompoundTree {
        nodes: (0..n)
            .map(|i| CtNode { pos: i, symbol: symbols[i], value: None, head: tree.heads[i] })
            .collect(),
        root: tree.root,
        parse_logp,
        percept_logp,
        sem_edits: Vec::new(),
    };
    let vctx = ValueCtx::with_shared(models, shared);
    eval_values(&mut ct, &vctx, &BTreeMap::new());
    Ok(ct)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Configuration of the abduction search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbduceConfig {
    pub queue_capacity: usize,
    pub max_pops: usize,
    /// Bound of the forward value search in `Solve`.
    pub v_max: Value,
    /// Prior penalty per semantic edit in the solution priority.
    pub epsilon_sem: f64,
    pub allow_semantic_edits: bool,
    /// Enumerate every valid child expectation instead of the least-change
    /// one (needed for neighborhood-completeness checks).
    pub exhaustive_solve: bool,
}

impl Default for AbduceConfig {
    fn default() -> Self {
        AbduceConfig {
            queue_capacity: 5_000,
            max_pops: 20_000,
            v_max: 400,
            epsilon_sem: 0.01,
            allow_semantic_edits: true,
            exhaustive_solve: false,
        }
    }
}

/// Log-priority of a candidate solution: perception plus parse
/// log-likelihood plus `num_semantic_edits * ln(epsilon_sem)`.
pub fn solution_priority(ct: &CompoundTree, epsilon_sem: f64) -> f64 {
    let percept: f64 = ct.percept_logp.iter().sum();
    percept + ct.parse_logp + ct.sem_edits.len() as f64 * epsilon_sem.ln()
}

/// Find operand values for child `B` of `parent` that make the parent
/// produce `target`, holding siblings fixed. Scans `0..=v_max` forward and
/// returns the candidate minimizing `|v' - current|` (all candidates in
/// ascending order in exhaustive mode).
fn solve_child(
    vctx: &ValueCtx<'_>,
    ct: &CompoundTree,
    parent: usize,
    child: usize,
    target: Value,
    cfg: &AbduceConfig,
) -> Vec<Value> {
    let sigma = &vctx.models.sigma;
    // A parenthesis with dependents is structurally invalid and never
    // evaluates, even though the identity program would accept one operand.
    if sigma.kind(ct.nodes[parent].symbol).is_paren() {
        return Vec::new();
    }
    let operands: Vec<usize> = ct
        .children(parent)
        .into_iter()
        .filter(|&c| !sigma.kind(ct.nodes[c].symbol).is_paren())
        .collect();
    let Some(slot) = operands.iter().position(|&c| c == child) else {
        return Vec::new();
    };
    let mut vals: Vec<Option<Value>> = operands.iter().map(|&c| ct.nodes[c].value).collect();
    // Siblings must be valued.
    if vals.iter().enumerate().any(|(i, v)| i != slot && v.is_none()) {
        return Vec::new();
    }
    let try_value = |vals: &mut Vec<Option<Value>>, v: Value| -> bool {
        vals[slot] = Some(v);
        let args: Vec<Value> = vals.iter().map(|x| x.expect("filled")).collect();
        vctx.apply(ct.nodes[parent].symbol, &args) == Some(target)
    };
    if cfg.exhaustive_solve {
        let mut matches = Vec::new();
        for v in 0..=cfg.v_max {
            if try_value(&mut vals, v) {
                matches.push(v);
            }
        }
        return matches;
    }
    // Least-change mode: scan outward from the child's current value so the
    // first hit is the closest one (ties resolve toward the smaller value).
    let center = ct.nodes[child].value.unwrap_or(0).min(cfg.v_max);
    for d in 0..=cfg.v_max {
        if center >= d && try_value(&mut vals, center - d) {
            return vec![center - d];
        }
        if d > 0 && center + d <= cfg.v_max && try_value(&mut vals, center + d) {
            return vec![center + d];
        }
    }
    Vec::new()
}

/// Single-value `Solve` (the training-mode contract): least-change candidate
/// or `None`.
pub fn solve_child_value(
    models: &Models,
    ct: &CompoundTree,
    parent: usize,
    child: usize,
    target: Value,
    cfg: &AbduceConfig,
) -> Option<Value> {
    let vctx = ValueCtx::new(models);
    let mut one = cfg.clone();
    one.exhaustive_solve = false;
    solve_child(&vctx, ct, parent, child, target, &one).into_iter().next()
}

/// Expression-tree rotation promoting operator child `b` above its parent
/// `a`. Token order is untouched; parenthesis dependents follow their heads;
/// values are recomputed. Fails if either node lacks proper operator
/// structure or the result is non-projective.
pub fn rotate(
    models: &Models,
    ct: &CompoundTree,
    a: usize,
    b: usize,
) -> Result<CompoundTree, LearnError> {
    let sigma = &models.sigma;
    if ct.nodes[b].head != Some(a) {
        return Err(LearnError::RotationInvalid("not an arc"));
    }
    if !sigma.kind(ct.nodes[b].symbol).is_operator() {
        return Err(LearnError::RotationInvalid("child is not an operator"));
    }
    if !sigma.kind(ct.nodes[a].symbol).is_operator() {
        return Err(LearnError::RotationInvalid("parent is not an operator"));
    }
    let operands = |node: usize| -> Vec<usize> {
        ct.children(node)
            .into_iter()
            .filter(|&c| !sigma.kind(ct.nodes[c].symbol).is_paren())
            .collect()
    };
    let b_ops = operands(b);
    if b_ops.len() != 2 {
        return Err(LearnError::RotationInvalid("child lacks two operands"));
    }
    let mut out = ct.clone();
    // Inner subtree: the operand of b lying between b and a in token order.
    let inner = if b < a { b_ops[1] } else { b_ops[0] };
    out.nodes[b].head = ct.nodes[a].head;
    out.nodes[a].head = Some(b);
    out.nodes[inner].head = Some(a);
    if ct.root == a {
        out.root = b;
    }
    let tree = out.tree();
    if !tree.is_well_formed() || !tree.is_projective() {
        return Err(LearnError::RotationInvalid("result non-projective"));
    }
    let vctx = ValueCtx::new(models);
    let overrides = BTreeMap::new();
    out.sem_edits.clear();
    eval_values(&mut out, &vctx, &overrides);
    // Rotation restructures the parse: rescore it.
    out.parse_logp = if models.gt.syntax {
        0.0
    } else {
        tree_log_prob(&models.parser, &out.symbols(), &tree)
            .map_err(|_| LearnError::RotationInvalid("rescore failed"))?
    };
    Ok(out)
}

struct QEntry {
    priority: f64,
    seq: u64,
    tree: CompoundTree,
    focus: usize,
    expected: Value,
    edited: bool,
}

impl PartialEq for QEntry {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority && self.seq == other.seq
    }
}
impl Eq for QEntry {}
impl PartialOrd for QEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Priority-queue abduction. Returns the highest-priority one-edit revision
/// of `ct` whose root value equals `y`, or `None` when the budget is
/// exhausted. `percept` is the per-token perception log matrix (swap
/// priorities read it; pass `None` under ground-truth perception).
pub fn abduce(
    models: &Models,
    ct: &CompoundTree,
    y: Value,
    percept: Option<&[Vec<f64>]>,
    cfg: &AbduceConfig,
) -> Option<CompoundTree> {
    abduce_impl(models, ct, y, percept, cfg, false, None).into_iter().next()
}

/// Abduction in collect mode: exhausts the queue and returns every distinct
/// consistent revision it reaches (used by the neighborhood-completeness
/// oracle).
pub fn abduce_all(
    models: &Models,
    ct: &CompoundTree,
    y: Value,
    percept: Option<&[Vec<f64>]>,
    cfg: &AbduceConfig,
) -> Vec<CompoundTree> {
    abduce_impl(models, ct, y, percept, cfg, true, None)
}

fn abduce_impl(
    models: &Models,
    ct: &CompoundTree,
    y: Value,
    percept: Option<&[Vec<f64>]>,
    cfg: &AbduceConfig,
    collect_all: bool,
    shared: Option<SharedApplyMemo>,
) -> Vec<CompoundTree> {
    let vctx = ValueCtx::with_shared(models, shared);
    let sigma = &models.sigma;
    let mut heap: BinaryHeap<QEntry> = BinaryHeap::new();
    let mut seq = 0u64;
    let push = |heap: &mut BinaryHeap<QEntry>,
                    seq: &mut u64,
                    tree: CompoundTree,
                    focus: usize,
                    expected: Value,
                    edited: bool,
                    priority: f64| {
        heap.push(QEntry { priority, seq: *seq, tree, focus, expected, edited });
        *seq += 1;
        if heap.len() > 2 * cfg.queue_capacity {
            let mut entries: Vec<QEntry> = std::mem::take(heap).into_vec();
            entries.sort_by(|a, b| b.cmp(a));
            entries.truncate(cfg.queue_capacity);
            *heap = BinaryHeap::from(entries);
        }
    };

    let base_priority = solution_priority(ct, cfg.epsilon_sem);
    push(&mut heap, &mut seq, ct.clone(), ct.root, y, false, base_priority);

    let mut visited: HashSet<(usize, Value)> = HashSet::new();
    let mut solutions: Vec<CompoundTree> = Vec::new();
    let mut seen_solutions: HashSet<String> = HashSet::new();
    let mut pops = 0usize;

    while let Some(entry) = heap.pop() {
        pops += 1;
        if pops > cfg.max_pops {
            break;
        }
        let QEntry { tree, focus, expected, edited, .. } = entry;
        if tree.nodes[focus].value == Some(expected) {
            debug_assert_eq!(tree.root_value(), Some(y), "solve chain must reach y");
            if tree.root_value() != Some(y) {
                continue;
            }
            let key = solution_key(&tree);
            if seen_solutions.insert(key) {
                solutions.push(tree);
                if !collect_all {
                    return solutions;
                }
            }
            continue;
        }
        if edited {
            continue; // one-step abduction: edited candidates never expand
        }
        if !visited.insert((focus, expected)) {
            continue;
        }

        let focus_kind = sigma.kind(tree.nodes[focus].symbol);
        let operand_children: Vec<usize> = tree
            .children(focus)
            .into_iter()
            .filter(|&c| !sigma.kind(tree.nodes[c].symbol).is_paren())
            .collect();
        let child_vals: Option<Vec<Value>> =
            operand_children.iter().map(|&c| tree.nodes[c].value).collect();

        // Abduce perception: symbol swaps whose recomputed value matches.
        // Ground-truth symbols are not revisable.
        if !models.gt.perception {
            for w in sigma.ids() {
                if w == tree.nodes[focus].symbol {
                    continue;
                }
                // Swaps keep the tree shape, so only the focus application
                // changes; a swap to a mismatched arity (digit over operands,
                // paren anywhere structural) yields no value and is skipped.
                let new_value = child_vals.as_ref().and_then(|vals| vctx.apply(w, vals));
                if new_value != Some(expected) {
                    continue;
                }
                let mut revised = tree.clone();
                revised.nodes[focus].symbol = w;
                eval_values(&mut revised, &vctx, &BTreeMap::new());
                if revised.nodes[focus].value != Some(expected) || revised.root_value() != Some(y)
                {
                    continue;
                }
                let new_logp = percept.map_or(0.0, |m| m[focus][w]);
                let priority = base_priority - tree.percept_logp[focus] + new_logp;
                revised.percept_logp[focus] = new_logp;
                push(&mut heap, &mut seq, revised, focus, expected, true, priority);
            }
        }

        // Abduce syntax: rotations of child arcs whose recomputed value
        // matches the expectation at the promoted node.
        if !models.gt.syntax {
            for &b in &operand_children {
                if !sigma.kind(tree.nodes[b].symbol).is_operator() {
                    continue;
                }
                if let Ok(revised) = rotate(models, &tree, focus, b) {
                    if revised.nodes[b].value == Some(expected)
                        && revised.root_value() == Some(y)
                    {
                        let priority = solution_priority(&revised, cfg.epsilon_sem);
                        push(&mut heap, &mut seq, revised, b, expected, true, priority);
                    }
                }
            }
        }

        // Abduce semantics: record (children values -> expected) as a pending
        // example for the focus concept and force its value.
        if cfg.allow_semantic_edits
            && !models.gt.semantics
            && !focus_kind.is_paren()
            && focus_kind.arity() == operand_children.len()
        {
            if let Some(vals) = &child_vals {
                let mut revised = tree.clone();
                revised.sem_edits.push(SemEdit {
                    node: focus,
                    concept: tree.nodes[focus].symbol,
                    inputs: vals.clone(),
                    output: expected,
                });
                let mut overrides = BTreeMap::new();
                overrides.insert(focus, expected);
                eval_values(&mut revised, &vctx, &overrides);
                if revised.root_value() == Some(y) {
                    let priority = solution_priority(&revised, cfg.epsilon_sem);
                    push(&mut heap, &mut seq, revised, focus, expected, true, priority);
                }
            }
        }

        // Top-down search: propagate expectations to children via Solve.
        for &b in &operand_children {
            for y_b in solve_child(&vctx, &tree, focus, b, expected, cfg) {
                push(&mut heap, &mut seq, tree.clone(), b, y_b, false, base_priority);
            }
        }
    }
    solutions
}

fn solution_key(ct: &CompoundTree) -> String {
    let mut s = String::new();
    for n in &ct.nodes {
        s.push_str(&format!("{}:{} ", n.symbol, n.head.map(|h| h as i64).unwrap_or(-1)));
    }
    for e in &ct.sem_edits {
        s.push_str(&format!("|{}@{}->{}", e.concept, e.node, e.output));
    }
    s
}

// ---------------------------------------------------------------------------
// Epoch learning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub samples: usize,
    pub deduce_correct: usize,
    pub abduce_success: usize,
    pub parse_failures: usize,
    pub skipped: usize,
    pub sem_edits: usize,
    pub perception_loss: Option<f64>,
    pub parser_loss: Option<f64>,
    /// IO-consistency per concept name.
    pub concept_consistency: BTreeMap<String, f64>,
}

impl EpochStats {
    pub fn abduction_success_rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            (self.deduce_correct + self.abduce_success) as f64 / self.samples as f64
        }
    }

    pub fn train_accuracy(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.deduce_correct as f64 / self.samples as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurriculumUnit {
    Tokens,
    Ops,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// `(first_epoch, max_len)` stages; `None` lifts the cap.
    pub curriculum: Vec<(usize, Option<usize>)>,
    pub curriculum_unit: CurriculumUnit,
    pub gt: GtInjection,
    pub lr_perception: f64,
    pub lr_parser: f64,
    pub batch_size: usize,
    pub abduce: AbduceConfig,
    pub induce: InduceBudget,
    /// Skip perception/parser updates once they are effectively converged
    /// on the buffer (pure speed optimization; the skipped step is a no-op
    /// to working precision).
    pub skip_converged: bool,
    /// Cap on parser training states consumed per epoch.
    pub max_parser_states: usize,
    /// Optional per-token sampling in deduction instead of argmax.
    pub deduce_sampling: bool,
    /// When greedy deduction plus abduction cannot explain a sample, retry
    /// this many times with parses sampled from the syntax model (the
    /// posterior-sampling decode); 0 disables exploration.
    pub exploration_attempts: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            seed,
            curriculum: vec![(0, Some(3)), (20, Some(7)), (40, Some(11)), (60, Some(15)), (80, None)],
            curriculum_unit: CurriculumUnit::Tokens,
            gt: GtInjection::NONE,
            lr_perception: 1e-4,
            lr_parser: 1e-4,
            batch_size: 512,
            abduce: AbduceConfig::default(),
            induce: InduceBudget::default(),
            skip_converged: true,
            max_parser_states: 60_000,
            deduce_sampling: false,
            exploration_attempts: 4,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.epochs == 0 {
            return Err(LearnError::Config("epochs must be positive".into()));
        }
        if self.curriculum.is_empty() || self.curriculum[0].0 != 0 {
            return Err(LearnError::Config("curriculum must start at epoch 0".into()));
        }
        if self.batch_size == 0 {
            return Err(LearnError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_max_len(&self, epoch: usize) -> Option<usize> {
        let mut cur = self.curriculum[0].1;
        for &(start, cap) in &self.curriculum {
            if epoch >= start {
                cur = cap;
            }
        }
        cur
    }
}

/// Set up the global worker pool with stacks deep enough for recursive
/// program evaluation. Safe to call repeatedly.
pub fn init_parallelism() {
    let _ = rayon::ThreadPoolBuilder::new()
        .stack_size(64 * 1024 * 1024)
        .build_global();
}

/// One pass of deduce-abduce over `samples`, then per-module updates from
/// the buffered solutions. Returns updated stats; models are updated in
/// place.
pub fn learn_epoch(
    models: &mut Models,
    samples: &[&HintSample],
    cache: &mut ParseCache,
    cfg: &TrainConfig,
) -> EpochStats {
    use rayon::prelude::*;
    init_parallelism();
    cache.sync_version(&models.parser);
    let mut stats = EpochStats { samples: samples.len(), ..EpochStats::default() };
    if samples.is_empty() {
        stats.concept_consistency = consistency_by_name(models);
        return stats;
    }

    // Deduce + abduce against frozen models, in parallel, order-preserving.
    // Concept applications are pure while the models are frozen, so one
    // memo serves the whole epoch.
    let apply_memo: SharedApplyMemo = std::sync::Arc::new(std::sync::Mutex::new(HashMap::new()));
    let results: Vec<SampleOutcome> = {
        let frozen = &*models;
        let shared_cache = &*cache;
        let salt = frozen
            .parser
            .version
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(frozen.perception.version);
        samples
            .par_iter()
            .enumerate()
            .map(|(idx, sample)| {
                let memo = apply_memo.clone();
                let sampling_seed = cfg
                    .deduce_sampling
                    .then(|| cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(idx as u64));
                let percept = percept_log_matrix(frozen, sample);
                let greedy = deduce_shared(
                    frozen,
                    sample,
                    percept.as_deref(),
                    Some(shared_cache),
                    sampling_seed,
                    Some(memo.clone()),
                );
                let mut parse_failed = false;
                match &greedy {
                    Err(_) => parse_failed = true,
                    Ok(ct) => {
                        if ct.root_value() == Some(sample.result) {
                            return SampleOutcome::Correct(Box::new(ct.clone()));
                        }
                        if let Some(fixed) = abduce_impl(
                            frozen,
                            ct,
                            sample.result,
                            percept.as_deref(),
                            &cfg.abduce,
                            false,
                            Some(memo.clone()),
                        )
                        .into_iter()
                        .next()
                        {
                            return SampleOutcome::Fixed(Box::new(fixed));
                        }
                    }
                }
                // Exploration: resample the parse and retry the revision
                // search. Greedy decoding with a cold syntax model is
                // deterministic per input, so without this no operator-rooted
                // tree may ever be proposed.
                if cfg.exploration_attempts > 0 && !frozen.gt.syntax {
                    if let Some(outcome) = explore_sample(
                        frozen,
                        sample,
                        percept.as_deref(),
                        cfg,
                        salt.wrapping_add(idx as u64),
                        memo,
                    ) {
                        return SampleOutcome::Fixed(Box::new(outcome));
                    }
                }
                if parse_failed {
                    SampleOutcome::ParseFailure
                } else {
                    SampleOutcome::Failed
                }
            })
            .collect()
    };

    let mut buffer: Vec<(usize, CompoundTree)> = Vec::new();
    for (idx, outcome) in results.into_iter().enumerate() {
        match outcome {
            SampleOutcome::ParseFailure => {
                stats.parse_failures += 1;
                stats.skipped += 1;
            }
            SampleOutcome::Failed => stats.skipped += 1,
            SampleOutcome::Correct(ct) => {
                stats.deduce_correct += 1;
                buffer.push((idx, *ct));
            }
            SampleOutcome::Fixed(ct) => {
                stats.abduce_success += 1;
                stats.sem_edits += ct.sem_edits.len();
                buffer.push((idx, *ct));
            }
        }
    }

    if buffer.is_empty() {
        stats.concept_consistency = consistency_by_name(models);
        return stats;
    }

    // (i) perception update on all (glyph, symbol) pairs from the buffer.
    if !models.gt.perception {
        let pairs: Vec<(&[f64], usize)> = buffer
            .iter()
            .flat_map(|(idx, ct)| {
                let sample = samples[*idx];
                sample
                    .glyphs
                    .iter()
                    .zip(ct.nodes.iter())
                    .map(|(g, n)| (g.features.as_slice(), n.symbol))
            })
            .collect();
        let already_converged = cfg.skip_converged && {
            let stride = (pairs.len() / 2048).max(1);
            let mut correct = 0usize;
            let mut probed = 0usize;
            for (g, s) in pairs.iter().step_by(stride) {
                probed += 1;
                if models.perception.perceive_log(g).map(|lp| argmax(&lp) == *s).unwrap_or(false) {
                    correct += 1;
                }
            }
            probed > 0 && correct as f64 / probed as f64 >= 0.9995
        };
        if !already_converged {
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in pairs.chunks(cfg.batch_size) {
                if let Ok(loss) = perception_update(&mut models.perception, chunk, cfg.lr_perception)
                {
                    total += loss;
                    batches += 1;
                }
            }
            if batches > 0 {
                stats.perception_loss = Some(total / batches as f64);
            }
        }
    }

    // (ii) parser update on oracle transitions of the buffered trees.
    if !models.gt.syntax {
        let mut states: Vec<TransitionExample> = Vec::new();
        for (_, ct) in &buffer {
            if let Ok(mut s) = oracle_states(&ct.symbols(), &ct.tree(), models.sigma.len()) {
                states.append(&mut s);
            }
        }
        if states.len() > cfg.max_parser_states {
            let stride = states.len().div_ceil(cfg.max_parser_states);
            states = states.into_iter().step_by(stride).collect();
        }
        if !states.is_empty() {
            let already_converged = cfg.skip_converged && {
                let stride = (states.len() / 2048).max(1);
                let mut correct = 0usize;
                let mut probed = 0usize;
                for ex in states.iter().step_by(stride) {
                    probed += 1;
                    let logits = models.parser.score(&ex.features);
                    let lsm = crate::nn::masked_log_softmax(&logits, &ex.legal);
                    if argmax(&lsm) == ex.gold.index() {
                        correct += 1;
                    }
                }
                probed > 0 && correct as f64 / probed as f64 >= 0.9995
            };
            if !already_converged {
                let mut total = 0.0;
                let mut batches = 0;
                for chunk in states.chunks(cfg.batch_size) {
                    total += parser_update(&mut models.parser, chunk, cfg.lr_parser);
                    batches += 1;
                }
                stats.parser_loss = Some(total / batches as f64);
                cache.sync_version(&models.parser);
            }
        }
    }

    // (iii) merge pending semantic examples and re-run induction.
    if !models.gt.semantics {
        let mut dirty: Vec<SymbolId> = Vec::new();
        for (_, ct) in &buffer {
            for e in &ct.sem_edits {
                if models.semantics.record_example(e.concept, e.inputs.clone(), e.output) {
                    dirty.push(e.concept);
                }
            }
        }
        let sigma = models.sigma.clone();
        models.semantics.reinduce(&sigma, &dirty, &cfg.induce);
    }

    stats.concept_consistency = consistency_by_name(models);
    stats
}

enum SampleOutcome {
    ParseFailure,
    Failed,
    Correct(Box<CompoundTree>),
    Fixed(Box<CompoundTree>),
}

/// Retry a failed sample with parses sampled from the syntax model; accept
/// the first sampled tree that explains the result directly or after one
/// abduced edit.
fn explore_sample(
    models: &Models,
    sample: &HintSample,
    percept: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    seed_base: u64,
    memo: SharedApplyMemo,
) -> Option<CompoundTree> {
    let (symbols, percept_logp): (Vec<SymbolId>, Vec<f64>) = if models.gt.perception {
        (sample.symbols.tokens.clone(), vec![0.0; sample.symbols.len()])
    } else {
        let m = percept?;
        let picks: Vec<usize> = m.iter().map(|row| argmax(row)).collect();
        let logps = picks.iter().zip(m).map(|(&p, row)| row[p]).collect();
        (picks, logps)
    };
    let vctx = ValueCtx::with_shared(models, Some(memo.clone()));
    for attempt in 0..cfg.exploration_attempts {
        let seed = cfg
            .seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(seed_base)
            .wrapping_add((attempt as u64) << 48);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Ok((tree, parse_logp)) = crate::parser::sample_parse(&models.parser, &symbols, &mut rng)
        else {
            continue;
        };
        let mut ct = CompoundTree {
            nodes: (0..symbols.len())
                .map(|i| CtNode { pos: i, symbol: symbols[i], value: None, head: tree.heads[i] })
                .collect(),
            root: tree.root,
            parse_logp,
            percept_logp: percept_logp.clone(),
            sem_edits: Vec::new(),
        };
        eval_values(&mut ct, &vctx, &BTreeMap::new());
        if ct.root_value() == Some(sample.result) {
            return Some(ct);
        }
        if let Some(fixed) =
            abduce_impl(models, &ct, sample.result, percept, &cfg.abduce, false, Some(memo.clone()))
                .into_iter()
                .next()
        {
            return Some(fixed);
        }
    }
    None
}

fn consistency_by_name(models: &Models) -> BTreeMap<String, f64> {
    if models.gt.semantics {
        return models
            .sigma
            .ids()
            .map(|id| (models.sigma.name(id).to_string(), 1.0))
            .collect();
    }
    models
        .semantics
        .consistency_report()
        .into_iter()
        .map(|(id, v)| (models.sigma.name(id).to_string(), v))
        .collect()
}

/// Permute the perception output classes so that cluster ids land on symbol
/// ids of the right syntactic role, using only unlabeled glyph sequences.
///
/// Which concrete digit or operator a cluster stands for stays arbitrary
/// (abduction resolves that), but cross-kind mistakes are unrecoverable by
/// one-edit abduction: a digit-id node over two operands admits no valid
/// revision, so operator clusters stuck on digit ids would never collect
/// examples. Position statistics separate the kinds cleanly: operators never
/// start or end an expression, an open paren never ends one, a close paren
/// never starts one, and digits do both.
pub fn align_perception_roles(models: &mut Models, samples: &[HintSample]) {
    let k = models.perception.n_classes;
    if k != models.sigma.len() || samples.is_empty() {
        return;
    }
    let mut first = vec![0u64; k];
    let mut last = vec![0u64; k];
    let mut total = vec![0u64; k];
    for s in samples {
        let mut clusters = Vec::with_capacity(s.glyphs.len());
        for g in &s.glyphs {
            let Ok(logp) = models.perception.perceive_log(&g.features) else { return };
            clusters.push(argmax(&logp));
        }
        if let Some(&c) = clusters.first() {
            first[c] += 1;
        }
        if let Some(&c) = clusters.last() {
            last[c] += 1;
        }
        for &c in &clusters {
            total[c] += 1;
        }
    }
    let rate = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let f: Vec<f64> = (0..k).map(|c| rate(first[c], total[c])).collect();
    let l: Vec<f64> = (0..k).map(|c| rate(last[c], total[c])).collect();

    let sigma = &models.sigma;
    let digit_ids: Vec<SymbolId> =
        sigma.ids().filter(|&id| matches!(sigma.kind(id), SymbolKind::Digit(_))).collect();
    let op_ids: Vec<SymbolId> = sigma.ids().filter(|&id| sigma.kind(id).is_operator()).collect();
    let open = sigma.open_paren();
    let close = sigma.close_paren();

    let mut unassigned: Vec<usize> = (0..k).collect();
    let take_max = |unassigned: &mut Vec<usize>, score: &dyn Fn(usize) -> f64| -> usize {
        let mut best = unassigned[0];
        for &c in unassigned.iter() {
            if score(c) > score(best) {
                best = c;
            }
        }
        unassigned.retain(|&c| c != best);
        best
    };
    let open_cluster = take_max(&mut unassigned, &|c| f[c] - l[c]);
    let close_cluster = take_max(&mut unassigned, &|c| l[c] - f[c]);
    // Operators: the clusters least likely to touch either end.
    let mut op_clusters = Vec::with_capacity(op_ids.len());
    for _ in 0..op_ids.len() {
        op_clusters.push(take_max(&mut unassigned, &|c| -(f[c] + l[c])));
    }
    op_clusters.sort_unstable();
    let digit_clusters = unassigned;

    let mut perm = vec![0usize; k]; // class id -> source cluster row
    perm[open] = open_cluster;
    perm[close] = close_cluster;
    for (id, c) in op_ids.iter().zip(&op_clusters) {
        perm[*id] = *c;
    }
    for (id, c) in digit_ids.iter().zip(&digit_clusters) {
        perm[*id] = *c;
    }
    let old_w2 = models.perception.mlp.w2.clone();
    let old_b2 = models.perception.mlp.b2.clone();
    for (class, &cluster) in perm.iter().enumerate() {
        let row = old_w2.row(cluster).to_vec();
        models.perception.mlp.w2.row_mut(class).copy_from_slice(&row);
        models.perception.mlp.b2[class] = old_b2[cluster];
    }
    models.perception.version += 1;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub max_len: Option<usize>,
    pub stats: EpochStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub models: Models,
    pub metrics: Vec<EpochMetrics>,
    pub final_train_accuracy: f64,
}

/// Full training: curriculum-filtered epochs of [`learn_epoch`], one seed.
pub fn train(dataset: &HintDataset, cfg: &TrainConfig) -> Result<TrainRun, LearnError> {
    cfg.validate()?;
    init_parallelism();
    let mut models = Models::new(&dataset.sigma, dataset.bank.feature_dim, cfg.seed);
    models.gt = cfg.gt;
    models.limits = Limits {
        max_steps: 100_000,
        max_value: (dataset.config.value_cap.max(100)).saturating_mul(16).max(1_000_000),
        max_depth: 100_000,
    };
    // Unsupervised perception pretraining on the unlabeled train pool, then
    // a role alignment from unlabeled sequence statistics.
    if !cfg.gt.perception {
        let (features, _) = dataset.bank.labeled_train_pool();
        if let Ok(pretrained) =
            crate::perception::pretrain_clusters(&features, dataset.sigma.len(), cfg.seed)
        {
            models.perception = pretrained;
            align_perception_roles(&mut models, &dataset.train);
        }
    }
    // Abduction value bound: four times the largest training target.
    let mut abduce_cfg = cfg.abduce;
    let max_target = dataset.train.iter().map(|s| s.result).max().unwrap_or(100);
    abduce_cfg.v_max = abduce_cfg.v_max.max(4 * max_target);
    let mut cfg = cfg.clone();
    cfg.abduce = abduce_cfg;

    let mut cache = ParseCache::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let max_len = cfg.stage_max_len(epoch);
        let slice: Vec<&HintSample> = dataset
            .train
            .iter()
            .filter(|s| match (max_len, cfg.curriculum_unit) {
                (None, _) => true,
                (Some(cap), CurriculumUnit::Tokens) => s.symbols.len() <= cap,
                (Some(cap), CurriculumUnit::Ops) => s.num_ops <= cap,
            })
            .collect();
        let stats = learn_epoch(&mut models, &slice, &mut cache, &cfg);
        metrics.push(EpochMetrics { epoch, max_len, stats });
    }
    let final_train_accuracy = metrics.last().map(|m| m.stats.train_accuracy()).unwrap_or(0.0);
    Ok(TrainRun { seed: cfg.seed, models, metrics, final_train_accuracy })
}

/// Train several seeds and return all runs (callers select by final train
/// accuracy, mirroring the published protocol).
pub fn train_seeds(dataset: &HintDataset, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<TrainRun>, LearnError> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        runs.push(train(dataset, &cfg)?);
    }
    Ok(runs)
}

pub fn select_best_by_train_accuracy(runs: &[TrainRun]) -> Option<&TrainRun> {
    runs.iter().max_by(|a, b| {
        a.final_train_accuracy
            .total_cmp(&b.final_train_accuracy)
            .then_with(|| b.seed.cmp(&a.seed))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Glyph, Subset};
    use crate::expr::{Notation, SymbolSequence};
    use crate::semantics::{add_program, div_program, mul_program, sub_program, Term};

    /// Models with ground-truth-equivalent induced programs and gt
    /// perception/syntax injection toggles for controlled tests.
    fn converged_models(sigma: &Sigma) -> Models {
        let mut m = Models::new(sigma, 4, 0);
        let plus = sigma.by_name("+").unwrap();
        let minus = sigma.by_name("-").unwrap();
        let times = sigma.by_name("*").unwrap();
        let div = sigma.by_name("/").unwrap();
        for d in 0..10u8 {
            m.semantics.programs.get_mut(&(d as usize)).unwrap().term = Some(Term::constant(d as u64));
            m.semantics.programs.get_mut(&(d as usize)).unwrap().io_consistency = 1.0;
        }
        m.semantics.programs.get_mut(&plus).unwrap().term = Some(add_program());
        m.semantics.programs.get_mut(&minus).unwrap().term = Some(sub_program());
        m.semantics.programs.get_mut(&times).unwrap().term = Some(mul_program(plus));
        m.semantics.programs.get_mut(&div).unwrap().term = Some(div_program(minus));
        for op in [plus, minus, times, div] {
            m.semantics.programs.get_mut(&op).unwrap().io_consistency = 1.0;
        }
        m.semantics.refresh_library(sigma);
        m
    }

    fn sample_for(sigma: &Sigma, text: &str) -> HintSample {
        let tokens: Vec<SymbolId> =
            text.split_whitespace().map(|w| sigma.by_name(w).unwrap()).collect();
        let seq = SymbolSequence { tokens: tokens.clone(), notation: Notation::Infix };
        let rec = oracle_eval(sigma, &seq).unwrap();
        HintSample {
            glyphs: tokens
                .iter()
                .map(|&t| Glyph { features: vec![t as f64; 4], writer_id: t as u64 })
                .collect(),
            symbols: seq,
            result: rec.result,
            num_ops: 0,
            max_value: rec.max_intermediate,
            subset_tag: Subset::Train,
        }
    }

    /// Compound tree from explicit symbols and heads, evaluated under the
    /// given models. The parse term is scored like a deduced tree so that
    /// abduction priorities are comparable.
    fn ct_from(models: &Models, symbols: &[SymbolId], heads: Vec<Option<usize>>) -> CompoundTree {
        let root = heads.iter().position(|h| h.is_none()).unwrap();
        let tree = ParseTree { heads: heads.clone(), root };
        let parse_logp = tree_log_prob(&models.parser, symbols, &tree).unwrap_or(0.0);
        let mut ct = CompoundTree {
            nodes: (0..symbols.len())
                .map(|i| CtNode { pos: i, symbol: symbols[i], value: None, head: heads[i] })
                .collect(),
            root,
            parse_logp,
            percept_logp: vec![0.0; symbols.len()],
            sem_edits: Vec::new(),
        };
        let vctx = ValueCtx::new(models);
        eval_values(&mut ct, &vctx, &BTreeMap::new());
        ct
    }

    #[test]
    fn deduce_with_gt_everything_matches_oracle() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        models.gt = GtInjection { perception: true, syntax: true, semantics: true };
        for text in ["7", "2 + 3", "( 2 + 3 ) * 4", "1 - 5", "8 / 3"] {
            let s = sample_for(&sigma, text);
            let ct = deduce(&models, &s, None, None).unwrap();
            assert_eq!(ct.root_value(), Some(s.result), "{text}");
        }
    }

    #[test]
    fn deduce_with_learned_semantics_matches_oracle() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        models.gt = GtInjection { perception: true, syntax: true, semantics: false };
        for text in ["7", "2 + 3", "( 2 + 3 ) * 4", "9 / 2", "2 * 3 - 4 / 2"] {
            let s = sample_for(&sigma, text);
            let ct = deduce(&models, &s, None, None).unwrap();
            assert_eq!(ct.root_value(), Some(s.result), "{text}");
        }
    }

    #[test]
    fn misperceived_operator_feeds_abduction() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        models.gt = GtInjection { perception: true, syntax: true, semantics: false };
        let s = sample_for(&sigma, "2 + 3");
        let ct = deduce(&models, &s, None, None).unwrap();
        // Corrupt: read + as *.
        let mut bad = ct.clone();
        bad.nodes[1].symbol = sigma.by_name("*").unwrap();
        let vctx = ValueCtx::new(&models);
        eval_values(&mut bad, &vctx, &BTreeMap::new());
        assert_eq!(bad.root_value(), Some(6));

        // Abduction with y = 5 must swap the symbol back.
        models.gt = GtInjection::NONE;
        let fixed = abduce(&models, &bad, 5, None, &AbduceConfig::default()).unwrap();
        assert_eq!(fixed.nodes[1].symbol, sigma.by_name("+").unwrap());
        assert_eq!(fixed.root_value(), Some(5));
        assert!(fixed.sem_edits.is_empty());
    }

    #[test]
    fn misparse_fixed_by_rotation() {
        let sigma = Sigma::base();
        let models = converged_models(&sigma);
        // 2 + 3 * 4 parsed wrongly as (2+3)*4: heads: * is root, + under *.
        let symbols: Vec<SymbolId> = ["2", "+", "3", "*", "4"]
            .iter()
            .map(|w| sigma.by_name(w).unwrap())
            .collect();
        let heads = vec![Some(1), Some(3), Some(1), None, Some(3)];
        let bad = ct_from(&models, &symbols, heads);
        assert_eq!(bad.root_value(), Some(20));
        let fixed = abduce(&models, &bad, 14, None, &AbduceConfig::default()).unwrap();
        assert_eq!(fixed.root_value(), Some(14));
        // The + node is now the root with * as its right child.
        assert_eq!(fixed.root, 1);
        assert_eq!(fixed.nodes[3].head, Some(1));
        assert_eq!(fixed.nodes[2].head, Some(3), "3 reattaches under *");
        assert!(fixed.sem_edits.is_empty());
    }

    #[test]
    fn immature_semantics_fixed_by_example_recording() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        // Remove *'s program: deduction can't value the root.
        let times = sigma.by_name("*").unwrap();
        models.semantics.programs.get_mut(&times).unwrap().term = None;
        models.semantics.refresh_library(&sigma);
        let symbols: Vec<SymbolId> =
            ["3", "*", "4"].iter().map(|w| sigma.by_name(w).unwrap()).collect();
        let heads = vec![Some(1), None, Some(1)];
        let ct = ct_from(&models, &symbols, heads);
        assert_eq!(ct.root_value(), None);
        let fixed = abduce(&models, &ct, 12, None, &AbduceConfig::default()).unwrap();
        assert_eq!(fixed.root_value(), Some(12));
        assert_eq!(fixed.sem_edits.len(), 1);
        let e = &fixed.sem_edits[0];
        assert_eq!(e.concept, times);
        assert_eq!(e.inputs, vec![3, 4]);
        assert_eq!(e.output, 12);
    }

    #[test]
    fn solve_child_examples() {
        let sigma = Sigma::base();
        let models = converged_models(&sigma);
        let symbols: Vec<SymbolId> =
            ["2", "+", "3"].iter().map(|w| sigma.by_name(w).unwrap()).collect();
        let ct = ct_from(&models, &symbols, vec![Some(1), None, Some(1)]);
        let cfg = AbduceConfig::default();
        // A = +, sibling 3, target 5 -> child must be 2.
        assert_eq!(solve_child_value(&models, &ct, 1, 0, 5, &cfg), Some(2));

        let symbols: Vec<SymbolId> =
            ["5", "*", "4"].iter().map(|w| sigma.by_name(w).unwrap()).collect();
        let ct = ct_from(&models, &symbols, vec![Some(1), None, Some(1)]);
        assert_eq!(solve_child_value(&models, &ct, 1, 0, 20, &cfg), Some(5));
        assert_eq!(solve_child_value(&models, &ct, 1, 0, 21, &cfg), None);
    }

    #[test]
    fn rotation_involution() {
        let sigma = Sigma::base();
        let models = converged_models(&sigma);
        let symbols: Vec<SymbolId> = ["2", "+", "3", "*", "4"]
            .iter()
            .map(|w| sigma.by_name(w).unwrap())
            .collect();
        let bad = ct_from(&models, &symbols, vec![Some(1), Some(3), Some(1), None, Some(3)]);
        // Rotate (* -> +): promotes + to root.
        let rotated = rotate(&models, &bad, 3, 1).unwrap();
        assert_eq!(rotated.root, 1);
        assert_eq!(rotated.root_value(), Some(14));
        // Inverse rotation on the (+ -> *) arc restores the original.
        let back = rotate(&models, &rotated, 1, 3).unwrap();
        assert_eq!(back.nodes, bad.nodes);

        // Rotating a digit child is invalid.
        assert!(matches!(rotate(&models, &bad, 1, 0), Err(LearnError::RotationInvalid(_))));
    }

    #[test]
    fn priority_formula() {
        let sigma = Sigma::base();
        let models = converged_models(&sigma);
        let symbols: Vec<SymbolId> =
            ["2", "+", "3"].iter().map(|w| sigma.by_name(w).unwrap()).collect();
        let mut ct = ct_from(&models, &symbols, vec![Some(1), None, Some(1)]);
        ct.percept_logp = vec![-0.1, -0.2, -0.3];
        ct.parse_logp = -0.5;
        let eps: f64 = 0.01;
        let p0 = solution_priority(&ct, eps);
        assert!((p0 - (-1.1)).abs() < 1e-12, "zero edits: deduction likelihood");
        ct.sem_edits.push(SemEdit { node: 1, concept: symbols[1], inputs: vec![2, 3], output: 9 });
        let p1 = solution_priority(&ct, eps);
        assert!((p1 - (p0 + eps.ln())).abs() < 1e-12, "one edit costs exactly ln(eps)");
    }

    #[test]
    fn empty_buffer_is_noop() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        let before_perception = models.perception.clone();
        let before_parser = models.parser.clone();
        let mut cache = ParseCache::new();
        let cfg = TrainConfig::new(0);
        let stats = learn_epoch(&mut models, &[], &mut cache, &cfg);
        assert_eq!(stats.samples, 0);
        assert_eq!(models.perception, before_perception);
        assert_eq!(models.parser, before_parser);
    }

    #[test]
    fn curriculum_stage_boundaries() {
        let cfg = TrainConfig::new(0);
        assert_eq!(cfg.stage_max_len(0), Some(3));
        assert_eq!(cfg.stage_max_len(10), Some(3));
        assert_eq!(cfg.stage_max_len(20), Some(7));
        assert_eq!(cfg.stage_max_len(45), Some(11));
        assert_eq!(cfg.stage_max_len(79), Some(15));
        assert_eq!(cfg.stage_max_len(80), None);
        assert_eq!(cfg.stage_max_len(99), None);
    }

    /// Value consistency: after abduction, recomputing values bottom-up
    /// changes nothing except along a recorded semantic-edit path.
    #[test]
    fn value_consistency_after_abduce() {
        let sigma = Sigma::base();
        let mut models = converged_models(&sigma);
        let times = sigma.by_name("*").unwrap();
        models.semantics.programs.get_mut(&times).unwrap().term = None;
        models.semantics.refresh_library(&sigma);
        let symbols: Vec<SymbolId> = ["(", "2", "+", "3", ")", "*", "4"]
            .iter()
            .map(|w| sigma.by_name(w).unwrap())
            .collect();
        let heads =
            vec![Some(2), Some(2), Some(5), Some(2), Some(2), None, Some(5)];
        let ct = ct_from(&models, &symbols, heads);
        let fixed = abduce(&models, &ct, 20, None, &AbduceConfig::default()).unwrap();
        assert_eq!(fixed.sem_edits.len(), 1);
        let edit_node = fixed.sem_edits[0].node;
        let mut recomputed = fixed.clone();
        let vctx = ValueCtx::new(&models);
        eval_values(&mut recomputed, &vctx, &BTreeMap::new());
        // Collect the root-to-edit path.
        let mut path = HashSet::new();
        let mut cur = Some(edit_node);
        while let Some(c) = cur {
            path.insert(c);
            cur = fixed.nodes[c].head;
        }
        for i in 0..fixed.nodes.len() {
            let on_path = path.contains(&i)
                || fixed.nodes[i].head.map(|h| path.contains(&h)).unwrap_or(false)
                    && sigma.kind(fixed.nodes[i].symbol).is_paren();
            if !on_path {
                assert_eq!(
                    recomputed.nodes[i].value, fixed.nodes[i].value,
                    "node {i} off the edit path changed"
                );
            }
        }
    }
}
