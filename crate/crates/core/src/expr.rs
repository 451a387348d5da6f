//! Concept space, expression grammar, prefix sampling, infix conversion, and
//! a ground-truth arithmetic oracle.
//!
//! The base vocabulary has 16 symbols: digits 0-9, the precedence-1 operators
//! `+` and `-`, the precedence-2 operators `*` and `/`, and parentheses.
//! Extension symbols for few-shot concepts carry a declared precedence and a
//! reference semantics.
//!
//! Arithmetic is closed over the naturals: subtraction is monus
//! (`max(0, a-b)`) and division is floor division.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Sigma`] symbol table.
pub type SymbolId = usize;

/// Natural-number value domain of the arithmetic.
pub type Value = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("value overflow during evaluation")]
    Overflow,
    #[error("malformed prefix expression at token {0}")]
    MalformedPrefix(usize),
    #[error("malformed infix expression at token {0}")]
    MalformedInfix(usize),
    #[error("symbol id {0} out of range")]
    UnknownSymbol(SymbolId),
    #[error("unsupported operand arity for symbol {0}")]
    BadArity(String),
}

/// Reference semantics of a few-shot extension operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtSemantics {
    /// `max(x, y)`
    Max,
    /// `min(x, y)`
    Min,
    /// `floor((x + y) / 2)`
    AvgFloor,
    /// `max(0, x*y - (x + y))`
    MulMinusSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymbolKind {
    Digit(u8),
    /// Binary operator with precedence 1 (`+`, `-`) or 2 (`*`, `/`).
    Operator {
        precedence: u8,
    },
    OpenParen,
    CloseParen,
}

impl SymbolKind {
    /// Number of operand values the concept consumes: 0 for digits, 1 for
    /// parentheses (copy-through), 2 for operators.
    pub fn arity(&self) -> usize {
        match self {
            SymbolKind::Digit(_) => 0,
            SymbolKind::Operator { .. } => 2,
            SymbolKind::OpenParen | SymbolKind::CloseParen => 1,
        }
    }

    pub fn is_operator(&self) -> bool {
        matches!(self, SymbolKind::Operator { .. })
    }

    pub fn is_paren(&self) -> bool {
        matches!(self, SymbolKind::OpenParen | SymbolKind::CloseParen)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolInfo {
    pub name: String,
    pub kind: SymbolKind,
    /// Ground-truth semantics for extension operators; `None` for the base
    /// operators, whose reference semantics are fixed.
    pub ext: Option<ExtSemantics>,
}

/// The concept space Σ: the base 16 symbols plus any registered extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma {
    symbols: Vec<SymbolInfo>,
}

pub const NUM_BASE_SYMBOLS: usize = 16;

impl Sigma {
    pub(crate) fn from_infos_impl(symbols: Vec<SymbolInfo>) -> Self {
        Sigma { symbols }
    }

    /// The base vocabulary: digits 0-9, `+`, `-` (precedence 1), `*`, `/`
    /// (precedence 2), `(`, `)`.
    pub fn base() -> Self {
        let mut symbols = Vec::with_capacity(NUM_BASE_SYMBOLS);
        for d in 0..10u8 {
            symbols.push(SymbolInfo {
                name: d.to_string(),
                kind: SymbolKind::Digit(d),
                ext: None,
            });
        }
        for (name, precedence) in [("+", 1), ("-", 1), ("*", 2), ("/", 2)] {
            symbols.push(SymbolInfo {
                name: name.to_string(),
                kind: SymbolKind::Operator { precedence },
                ext: None,
            });
        }
        symbols.push(SymbolInfo {
            name: "(".to_string(),
            kind: SymbolKind::OpenParen,
            ext: None,
        });
        symbols.push(SymbolInfo {
            name: ")".to_string(),
            kind: SymbolKind::CloseParen,
            ext: None,
        });
        Sigma { symbols }
    }

    /// Register a few-shot extension operator. Returns its new id.
    pub fn add_extension(
        &mut self,
        name: &str,
        precedence: u8,
        ext: ExtSemantics,
    ) -> Result<SymbolId, ExprError> {
        assert!(precedence == 1 || precedence == 2, "precedence must be 1 or 2");
        if self.symbols.iter().any(|s| s.name == name) {
            return Err(ExprError::BadArity(format!("symbol name {name:?} already present")));
        }
        self.symbols.push(SymbolInfo {
            name: name.to_string(),
            kind: SymbolKind::Operator { precedence },
            ext: Some(ext),
        });
        Ok(self.symbols.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn info(&self, id: SymbolId) -> &SymbolInfo {
        &self.symbols[id]
    }

    pub fn kind(&self, id: SymbolId) -> SymbolKind {
        self.symbols[id].kind
    }

    pub fn name(&self, id: SymbolId) -> &str {
        &self.symbols[id].name
    }

    pub fn ids(&self) -> impl Iterator<Item = SymbolId> {
        0..self.symbols.len()
    }

    pub fn digit(&self, d: u8) -> SymbolId {
        d as SymbolId
    }

    pub fn by_name(&self, name: &str) -> Option<SymbolId> {
        self.symbols.iter().position(|s| s.name == name)
    }

    pub fn open_paren(&self) -> SymbolId {
        14
    }

    pub fn close_paren(&self) -> SymbolId {
        15
    }

    /// All operator ids, base and extension.
    pub fn operators(&self) -> Vec<SymbolId> {
        self.ids().filter(|&id| self.kind(id).is_operator()).collect()
    }

    /// Render a token sequence as a spaced string, e.g. `( 2 + 3 ) * 4`.
    pub fn render(&self, tokens: &[SymbolId]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Notation {
    Prefix,
    Infix,
}

/// An ordered token sequence together with its notation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub tokens: Vec<SymbolId>,
    pub notation: Notation,
}

impl SymbolSequence {
    pub fn prefix(tokens: Vec<SymbolId>) -> Self {
        SymbolSequence { tokens, notation: Notation::Prefix }
    }

    pub fn infix(tokens: Vec<SymbolId>) -> Self {
        SymbolSequence { tokens, notation: Notation::Infix }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of operator tokens.
    pub fn num_ops(&self, sigma: &Sigma) -> usize {
        self.tokens.iter().filter(|&&t| sigma.kind(t).is_operator()).count()
    }
}

/// Projective dependency tree over token positions. `heads[i]` is the head of
/// token `i`; the root has head `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    pub heads: Vec<Option<usize>>,
    pub root: usize,
}

impl ParseTree {
    pub fn new(heads: Vec<Option<usize>>) -> Self {
        let root = heads.iter().position(|h| h.is_none()).expect("tree must have a root");
        ParseTree { heads, root }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head→dependent arcs, excluding the implicit Root arc.
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        self.heads
            .iter()
            .enumerate()
            .filter_map(|(d, h)| h.map(|h| (h, d)))
            .collect()
    }

    /// Children of `node` in token order.
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.heads.len()).filter(|&d| self.heads[d] == Some(node)).collect()
    }

    /// A tree is projective when every subtree covers a contiguous token span.
    pub fn is_projective(&self) -> bool {
        let n = self.heads.len();
        let mut lo = (0..n).collect::<Vec<_>>();
        let mut hi = (0..n).collect::<Vec<_>>();
        // Propagate spans upward; iterate to a fixed point (n is tiny).
        for _ in 0..n {
            let mut changed = false;
            for d in 0..n {
                if let Some(h) = self.heads[d] {
                    if lo[d] < lo[h] {
                        lo[h] = lo[d];
                        changed = true;
                    }
                    if hi[d] > hi[h] {
                        hi[h] = hi[d];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        // Every node's descendants must fill its span exactly.
        for v in 0..n {
            let mut inside = vec![false; n];
            let mut stack = vec![v];
            while let Some(x) = stack.pop() {
                inside[x] = true;
                for c in self.children(x) {
                    stack.push(c);
                }
            }
            for (t, &is_in) in inside.iter().enumerate() {
                if (lo[v]..=hi[v]).contains(&t) && !is_in {
                    return false;
                }
            }
        }
        true
    }

    /// Structural sanity: single root, acyclic, all heads in range.
    pub fn is_well_formed(&self) -> bool {
        let n = self.heads.len();
        if n == 0 {
            return false;
        }
        if self.heads.iter().filter(|h| h.is_none()).count() != 1 {
            return false;
        }
        if self.heads[self.root].is_some() {
            return false;
        }
        // Walk up from every node; must reach the root within n steps.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.heads[cur] {
                if h >= n {
                    return false;
                }
                cur = h;
                steps += 1;
                if steps > n {
                    return false;
                }
            }
            if cur != self.root {
                return false;
            }
        }
        true
    }
}

/// One evaluation step: node position, operand values, output value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub node: usize,
    pub inputs: Vec<Value>,
    pub output: Value,
}

/// Result of evaluating an infix expression with the ground-truth oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub result: Value,
    /// Max over all trace outputs and inputs.
    pub max_intermediate: Value,
    pub gold_tree: ParseTree,
    /// Post-order evaluation trace.
    pub trace: Vec<TraceStep>,
}

/// Reference semantics table for operators (base and extension).
///
/// `-` is monus and `/` is floor division; extension semantics follow their
/// declared definitions with the same natural-number closure conventions.
pub fn gt_op_semantics(sigma: &Sigma, op: SymbolId, a: Value, b: Value) -> Result<Value, ExprError> {
    let info = sigma.info(op);
    if let Some(ext) = info.ext {
        return Ok(match ext {
            ExtSemantics::Max => a.max(b),
            ExtSemantics::Min => a.min(b),
            ExtSemantics::AvgFloor => (a.checked_add(b).ok_or(ExprError::Overflow)?) / 2,
            ExtSemantics::MulMinusSum => {
                let prod = a.checked_mul(b).ok_or(ExprError::Overflow)?;
                let sum = a.checked_add(b).ok_or(ExprError::Overflow)?;
                prod.saturating_sub(sum)
            }
        });
    }
    match info.name.as_str() {
        "+" => a.checked_add(b).ok_or(ExprError::Overflow),
        "-" => Ok(a.saturating_sub(b)),
        "*" => a.checked_mul(b).ok_or(ExprError::Overflow),
        "/" => {
            if b == 0 {
                Err(ExprError::DivisionByZero)
            } else {
                Ok(a / b)
            }
        }
        _ => Err(ExprError::BadArity(info.name.clone())),
    }
}

/// Sample a well-formed prefix expression with exactly `num_ops` operators
/// and `num_ops + 1` digits, drawn uniformly. Deterministic per seed.
///
/// Extension operators participate when `include` lists them; by default only
/// the base operators are used.
pub fn sample_prefix(sigma: &Sigma, rng_seed: u64, num_ops: usize) -> SymbolSequence {
    let ops = sigma.operators();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tokens = Vec::with_capacity(2 * num_ops + 1);
    sample_prefix_into(&ops, &mut rng, num_ops, &mut tokens);
    SymbolSequence::prefix(tokens)
}

/// As [`sample_prefix`], but drawing operators from an explicit pool and
/// reusing a caller-owned RNG.
pub fn sample_prefix_with(
    ops: &[SymbolId],
    rng: &mut ChaCha8Rng,
    num_ops: usize,
) -> SymbolSequence {
    let mut tokens = Vec::with_capacity(2 * num_ops + 1);
    sample_prefix_into(ops, rng, num_ops, &mut tokens);
    SymbolSequence::prefix(tokens)
}

fn sample_prefix_into(
    ops: &[SymbolId],
    rng: &mut ChaCha8Rng,
    num_ops: usize,
    out: &mut Vec<SymbolId>,
) {
    if num_ops == 0 {
        let d: u8 = rng.gen_range(0..10);
        out.push(d as SymbolId);
        return;
    }
    let op = ops[rng.gen_range(0..ops.len())];
    out.push(op);
    let left = rng.gen_range(0..num_ops);
    sample_prefix_into(ops, rng, left, out);
    sample_prefix_into(ops, rng, num_ops - 1 - left, out);
}

/// Binary expression tree used internally for conversion and the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprNode {
    Digit(u8),
    Op(SymbolId, Box<ExprNode>, Box<ExprNode>),
}

impl ExprNode {
    pub fn eval(&self, sigma: &Sigma) -> Result<Value, ExprError> {
        match self {
            ExprNode::Digit(d) => Ok(*d as Value),
            ExprNode::Op(op, l, r) => {
                let a = l.eval(sigma)?;
                let b = r.eval(sigma)?;
                gt_op_semantics(sigma, *op, a, b)
            }
        }
    }
}

/// Read a prefix token sequence into an expression tree.
pub fn read_prefix(sigma: &Sigma, seq: &SymbolSequence) -> Result<ExprNode, ExprError> {
    let mut pos = 0;
    let node = read_prefix_at(sigma, &seq.tokens, &mut pos)?;
    if pos != seq.tokens.len() {
        return Err(ExprError::MalformedPrefix(pos));
    }
    Ok(node)
}

fn read_prefix_at(sigma: &Sigma, tokens: &[SymbolId], pos: &mut usize) -> Result<ExprNode, ExprError> {
    let Some(&tok) = tokens.get(*pos) else {
        return Err(ExprError::MalformedPrefix(*pos));
    };
    *pos += 1;
    match sigma.kind(tok) {
        SymbolKind::Digit(d) => Ok(ExprNode::Digit(d)),
        SymbolKind::Operator { .. } => {
            let l = read_prefix_at(sigma, tokens, pos)?;
            let r = read_prefix_at(sigma, tokens, pos)?;
            Ok(ExprNode::Op(tok, Box::new(l), Box::new(r)))
        }
        _ => Err(ExprError::MalformedPrefix(*pos - 1)),
    }
}

fn node_precedence(sigma: &Sigma, node: &ExprNode) -> Option<u8> {
    match node {
        ExprNode::Digit(_) => None,
        ExprNode::Op(op, _, _) => match sigma.kind(*op) {
            SymbolKind::Operator { precedence } => Some(precedence),
            _ => None,
        },
    }
}

/// Convert a prefix expression to infix, inserting parentheses only where the
/// tree structure requires them under precedence and left-associativity.
pub fn prefix_to_infix(sigma: &Sigma, prefix: &SymbolSequence) -> Result<SymbolSequence, ExprError> {
    let tree = read_prefix(sigma, prefix)?;
    let mut tokens = Vec::new();
    render_infix(sigma, &tree, &mut tokens);
    Ok(SymbolSequence::infix(tokens))
}

/// Render an expression tree as minimal-parenthesis infix tokens.
pub fn render_infix_tokens(sigma: &Sigma, tree: &ExprNode) -> SymbolSequence {
    let mut tokens = Vec::new();
    render_infix(sigma, tree, &mut tokens);
    SymbolSequence::infix(tokens)
}

fn render_infix(sigma: &Sigma, node: &ExprNode, out: &mut Vec<SymbolId>) {
    match node {
        ExprNode::Digit(d) => out.push(*d as SymbolId),
        ExprNode::Op(op, l, r) => {
            let prec = match sigma.kind(*op) {
                SymbolKind::Operator { precedence } => precedence,
                _ => unreachable!("operator node with non-operator symbol"),
            };
            // Left child needs parens when strictly lower precedence; right
            // child also at equal precedence (left-associative grammar).
            let lp = node_precedence(sigma, l).is_some_and(|p| p < prec);
            let rp = node_precedence(sigma, r).is_some_and(|p| p <= prec);
            if lp {
                out.push(sigma.open_paren());
            }
            render_infix(sigma, l, out);
            if lp {
                out.push(sigma.close_paren());
            }
            out.push(*op);
            if rp {
                out.push(sigma.open_paren());
            }
            render_infix(sigma, r, out);
            if rp {
                out.push(sigma.close_paren());
            }
        }
    }
}

/// Shunting-yard evaluation of a grammar-valid infix expression.
///
/// Besides the result it produces the gold dependency tree (parentheses
/// attach as dependents of the head of the expression they enclose), the
/// post-order trace, and the max intermediate value.
pub fn oracle_eval(sigma: &Sigma, infix: &SymbolSequence) -> Result<EvalRecord, ExprError> {
    let tokens = &infix.tokens;
    let n = tokens.len();
    if n == 0 {
        return Err(ExprError::MalformedInfix(0));
    }

    // Shunting-yard over token positions. Operand stack holds sub-tree heads;
    // operator stack holds operator/open-paren positions. `pending_parens`
    // maps a reduced span to the paren positions that must attach to its head.
    let mut heads: Vec<Option<usize>> = vec![None; n];
    let mut operands: Vec<usize> = Vec::new(); // head position of each operand
    let mut operators: Vec<usize> = Vec::new(); // token positions
    let mut paren_attach: Vec<(usize, usize)> = Vec::new(); // (paren pos, head pos)

    let prec_of = |pos: usize| -> u8 {
        match sigma.kind(tokens[pos]) {
            SymbolKind::Operator { precedence } => precedence,
            _ => 0,
        }
    };

    let reduce = |operands: &mut Vec<usize>,
                  operators: &mut Vec<usize>,
                  heads: &mut Vec<Option<usize>>|
     -> Result<(), ExprError> {
        let op = operators.pop().expect("reduce with empty operator stack");
        let r = operands.pop().ok_or(ExprError::MalformedInfix(op))?;
        let l = operands.pop().ok_or(ExprError::MalformedInfix(op))?;
        heads[l] = Some(op);
        heads[r] = Some(op);
        operands.push(op);
        Ok(())
    };

    let mut prev_was_operand = false;
    for (pos, &tok) in tokens.iter().enumerate() {
        match sigma.kind(tok) {
            SymbolKind::Digit(_) => {
                if prev_was_operand {
                    return Err(ExprError::MalformedInfix(pos));
                }
                operands.push(pos);
                prev_was_operand = true;
            }
            SymbolKind::Operator { precedence } => {
                if !prev_was_operand {
                    return Err(ExprError::MalformedInfix(pos));
                }
                while let Some(&top) = operators.last() {
                    if sigma.kind(tokens[top]).is_operator() && prec_of(top) >= precedence {
                        reduce(&mut operands, &mut operators, &mut heads)?;
                    } else {
                        break;
                    }
                }
                operators.push(pos);
                prev_was_operand = false;
            }
            SymbolKind::OpenParen => {
                if prev_was_operand {
                    return Err(ExprError::MalformedInfix(pos));
                }
                operators.push(pos);
            }
            SymbolKind::CloseParen => {
                if !prev_was_operand {
                    return Err(ExprError::MalformedInfix(pos));
                }
                loop {
                    match operators.last() {
                        Some(&top) if sigma.kind(tokens[top]).is_operator() => {
                            reduce(&mut operands, &mut operators, &mut heads)?;
                        }
                        Some(&top) if sigma.kind(tokens[top]) == SymbolKind::OpenParen => {
                            operators.pop();
                            let head = *operands.last().ok_or(ExprError::MalformedInfix(pos))?;
                            paren_attach.push((top, head));
                            paren_attach.push((pos, head));
                            break;
                        }
                        _ => return Err(ExprError::MalformedInfix(pos)),
                    }
                }
                prev_was_operand = true;
            }
        }
    }
    if !prev_was_operand {
        return Err(ExprError::MalformedInfix(n));
    }
    while let Some(&top) = operators.last() {
        if sigma.kind(tokens[top]) == SymbolKind::OpenParen {
            return Err(ExprError::MalformedInfix(top));
        }
        reduce(&mut operands, &mut operators, &mut heads)?;
    }
    if operands.len() != 1 {
        return Err(ExprError::MalformedInfix(n));
    }
    let root = operands[0];
    for (paren, head) in paren_attach {
        heads[paren] = Some(head);
    }
    let tree = ParseTree { heads, root };

    // Evaluate bottom-up along the gold tree using the reference semantics.
    let mut values: Vec<Option<Value>> = vec![None; n];
    let mut trace = Vec::new();
    let mut max_v: Value = 0;
    eval_tree_node(sigma, tokens, &tree, root, &mut values, &mut trace, &mut max_v)?;
    // Parentheses copy their head's value; record them in the trace too.
    for pos in 0..n {
        if sigma.kind(tokens[pos]).is_paren() {
            let head = tree.heads[pos].expect("paren must have a head");
            let v = values[head].expect("head evaluated");
            values[pos] = Some(v);
            trace.push(TraceStep { node: pos, inputs: vec![v], output: v });
        }
    }
    let result = values[root].expect("root evaluated");
    Ok(EvalRecord { result, max_intermediate: max_v, gold_tree: tree, trace })
}

fn eval_tree_node(
    sigma: &Sigma,
    tokens: &[SymbolId],
    tree: &ParseTree,
    node: usize,
    values: &mut Vec<Option<Value>>,
    trace: &mut Vec<TraceStep>,
    max_v: &mut Value,
) -> Result<Value, ExprError> {
    let kids: Vec<usize> = tree
        .children(node)
        .into_iter()
        .filter(|&c| !sigma.kind(tokens[c]).is_paren())
        .collect();
    let v = match sigma.kind(tokens[node]) {
        SymbolKind::Digit(d) => {
            if !kids.is_empty() {
                return Err(ExprError::BadArity(sigma.name(tokens[node]).to_string()));
            }
            let v = d as Value;
            trace.push(TraceStep { node, inputs: vec![], output: v });
            v
        }
        SymbolKind::Operator { .. } => {
            if kids.len() != 2 {
                return Err(ExprError::BadArity(sigma.name(tokens[node]).to_string()));
            }
            let a = eval_tree_node(sigma, tokens, tree, kids[0], values, trace, max_v)?;
            let b = eval_tree_node(sigma, tokens, tree, kids[1], values, trace, max_v)?;
            let v = gt_op_semantics(sigma, tokens[node], a, b)?;
            trace.push(TraceStep { node, inputs: vec![a, b], output: v });
            v
        }
        _ => return Err(ExprError::BadArity(sigma.name(tokens[node]).to_string())),
    };
    *max_v = (*max_v).max(v);
    values[node] = Some(v);
    Ok(v)
}

/// Recursive-descent acceptor for the infix context-free grammar:
///
/// ```text
/// Expression -> Term | Expression + Term | Expression - Term
/// Term       -> Factor | Term * Factor | Term / Factor
/// Factor     -> ( Expression ) | Number
/// ```
///
/// Extension operators join the production of their declared precedence.
pub fn grammar_accepts(sigma: &Sigma, tokens: &[SymbolId]) -> bool {
    let mut pos = 0;
    parse_expression(sigma, tokens, &mut pos) && pos == tokens.len()
}

fn parse_expression(sigma: &Sigma, tokens: &[SymbolId], pos: &mut usize) -> bool {
    if !parse_term(sigma, tokens, pos) {
        return false;
    }
    while let Some(&tok) = tokens.get(*pos) {
        if sigma.kind(tok) == (SymbolKind::Operator { precedence: 1 }) {
            *pos += 1;
            if !parse_term(sigma, tokens, pos) {
                return false;
            }
        } else {
            break;
        }
    }
    true
}

fn parse_term(sigma: &Sigma, tokens: &[SymbolId], pos: &mut usize) -> bool {
    if !parse_factor(sigma, tokens, pos) {
        return false;
    }
    while let Some(&tok) = tokens.get(*pos) {
        if sigma.kind(tok) == (SymbolKind::Operator { precedence: 2 }) {
            *pos += 1;
            if !parse_factor(sigma, tokens, pos) {
                return false;
            }
        } else {
            break;
        }
    }
    true
}

fn parse_factor(sigma: &Sigma, tokens: &[SymbolId], pos: &mut usize) -> bool {
    match tokens.get(*pos).map(|&t| sigma.kind(t)) {
        Some(SymbolKind::OpenParen) => {
            *pos += 1;
            if !parse_expression(sigma, tokens, pos) {
                return false;
            }
            match tokens.get(*pos).map(|&t| sigma.kind(t)) {
                Some(SymbolKind::CloseParen) => {
                    *pos += 1;
                    true
                }
                _ => false,
            }
        }
        Some(SymbolKind::Digit(_)) => {
            *pos += 1;
            true
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(sigma: &Sigma, text: &str) -> SymbolSequence {
        let tokens = text
            .split_whitespace()
            .map(|w| sigma.by_name(w).unwrap_or_else(|| panic!("unknown token {w}")))
            .collect();
        SymbolSequence::infix(tokens)
    }

    fn pseq(sigma: &Sigma, text: &str) -> SymbolSequence {
        let mut s = seq(sigma, text);
        s.notation = Notation::Prefix;
        s
    }

    #[test]
    fn base_sigma_has_16_members() {
        let sigma = Sigma::base();
        assert_eq!(sigma.len(), 16);
        assert_eq!(sigma.kind(sigma.by_name("+").unwrap()), SymbolKind::Operator { precedence: 1 });
        assert_eq!(sigma.kind(sigma.by_name("/").unwrap()), SymbolKind::Operator { precedence: 2 });
        assert_eq!(sigma.kind(sigma.open_paren()), SymbolKind::OpenParen);
        assert_eq!(sigma.kind(sigma.close_paren()), SymbolKind::CloseParen);
    }

    #[test]
    fn sample_prefix_base_cases() {
        let sigma = Sigma::base();
        let s0 = sample_prefix(&sigma, 7, 0);
        assert_eq!(s0.len(), 1);
        assert!(matches!(sigma.kind(s0.tokens[0]), SymbolKind::Digit(_)));

        let s1 = sample_prefix(&sigma, 7, 1);
        assert_eq!(s1.len(), 3);
        assert!(sigma.kind(s1.tokens[0]).is_operator());
        assert!(matches!(sigma.kind(s1.tokens[1]), SymbolKind::Digit(_)));
        assert!(matches!(sigma.kind(s1.tokens[2]), SymbolKind::Digit(_)));
    }

    /// Exhaustive shape enumerator over length-5 prefix strings: the only
    /// well-formed shapes with two operators are `op op d d d` and
    /// `op d op d d`.
    #[test]
    fn sample_prefix_two_op_shapes() {
        let sigma = Sigma::base();
        let is_op = |id: SymbolId| sigma.kind(id).is_operator();
        // Enumerate all kind-patterns of length 5 and keep the well-formed ones.
        let mut valid_shapes = Vec::new();
        for mask in 0..32u32 {
            let shape: Vec<bool> = (0..5).map(|i| mask & (1 << i) != 0).collect();
            // bool = operator at this position. Check well-formedness by
            // simulating required-operand count.
            let tokens: Vec<SymbolId> = shape
                .iter()
                .map(|&op| if op { sigma.by_name("+").unwrap() } else { 3 })
                .collect();
            let s = SymbolSequence::prefix(tokens);
            if read_prefix(&sigma, &s).is_ok() && s.num_ops(&sigma) == 2 {
                valid_shapes.push(shape);
            }
        }
        assert_eq!(
            valid_shapes,
            vec![
                vec![true, true, false, false, false],
                vec![true, false, true, false, false],
            ]
        );
        // Sampling hits both shapes and nothing else.
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let s = sample_prefix(&sigma, seed, 2);
            assert_eq!(s.len(), 5);
            let shape: Vec<bool> = s.tokens.iter().map(|&t| is_op(t)).collect();
            assert!(valid_shapes.contains(&shape));
            seen.insert(shape);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn prefix_to_infix_simple() {
        let sigma = Sigma::base();
        let p = pseq(&sigma, "+ 2 3");
        let i = prefix_to_infix(&sigma, &p).unwrap();
        assert_eq!(sigma.render(&i.tokens), "2 + 3");

        let p = pseq(&sigma, "* + 2 3 4");
        let i = prefix_to_infix(&sigma, &p).unwrap();
        assert_eq!(sigma.render(&i.tokens), "( 2 + 3 ) * 4");
    }

    #[test]
    fn prefix_to_infix_right_assoc_parens() {
        let sigma = Sigma::base();
        // - 5 + 2 1 => 5 - ( 2 + 1 ): equal precedence on the right needs parens.
        let p = pseq(&sigma, "- 5 + 2 1");
        let i = prefix_to_infix(&sigma, &p).unwrap();
        assert_eq!(sigma.render(&i.tokens), "5 - ( 2 + 1 )");
    }

    #[test]
    fn malformed_prefix_rejected() {
        let sigma = Sigma::base();
        let p = pseq(&sigma, "+ 2");
        assert!(matches!(prefix_to_infix(&sigma, &p), Err(ExprError::MalformedPrefix(_))));
        let p = pseq(&sigma, "2 3");
        assert!(prefix_to_infix(&sigma, &p).is_err());
    }

    /// Round-trip property: the gold tree of the rendered infix matches the
    /// tree read directly from the prefix string, checked by value and by
    /// re-rendering. 10,000 random prefix expressions.
    #[test]
    fn prefix_infix_round_trip() {
        let sigma = Sigma::base();
        let mut checked = 0;
        for seed in 0..10_000u64 {
            let num_ops = (seed % 7) as usize;
            let p = sample_prefix(&sigma, seed, num_ops);
            let direct = read_prefix(&sigma, &p).unwrap();
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            assert!(grammar_accepts(&sigma, &infix.tokens), "grammar rejects {}", sigma.render(&infix.tokens));
            match (direct.eval(&sigma), oracle_eval(&sigma, &infix)) {
                (Ok(v), Ok(rec)) => {
                    assert_eq!(v, rec.result, "expr {}", sigma.render(&infix.tokens));
                    // Tree equivalence: re-render the gold tree's structure.
                    let rebuilt = tree_to_expr(&sigma, &infix, &rec.gold_tree, rec.gold_tree.root);
                    assert_eq!(rebuilt, direct, "expr {}", sigma.render(&infix.tokens));
                    checked += 1;
                }
                (Err(ExprError::DivisionByZero), Err(ExprError::DivisionByZero)) => {}
                (a, b) => panic!("divergent eval: {a:?} vs {b:?}"),
            }
        }
        assert!(checked > 5_000);
    }

    fn tree_to_expr(sigma: &Sigma, s: &SymbolSequence, t: &ParseTree, node: usize) -> ExprNode {
        let kids: Vec<usize> = t
            .children(node)
            .into_iter()
            .filter(|&c| !sigma.kind(s.tokens[c]).is_paren())
            .collect();
        match sigma.kind(s.tokens[node]) {
            SymbolKind::Digit(d) => ExprNode::Digit(d),
            SymbolKind::Operator { .. } => ExprNode::Op(
                s.tokens[node],
                Box::new(tree_to_expr(sigma, s, t, kids[0])),
                Box::new(tree_to_expr(sigma, s, t, kids[1])),
            ),
            _ => panic!("paren node in expression position"),
        }
    }

    #[test]
    fn oracle_eval_examples() {
        let sigma = Sigma::base();
        let rec = oracle_eval(&sigma, &seq(&sigma, "2 + 3")).unwrap();
        assert_eq!(rec.result, 5);
        assert_eq!(rec.max_intermediate, 5);

        let rec = oracle_eval(&sigma, &seq(&sigma, "( 2 + 3 ) * 4")).unwrap();
        assert_eq!(rec.result, 20);

        let rec = oracle_eval(&sigma, &seq(&sigma, "1 - 5")).unwrap();
        assert_eq!(rec.result, 0, "monus clamps at zero");

        assert_eq!(
            oracle_eval(&sigma, &seq(&sigma, "3 / 0")).unwrap_err(),
            ExprError::DivisionByZero
        );
    }

    #[test]
    fn oracle_eval_gold_tree_structure() {
        let sigma = Sigma::base();
        let s = seq(&sigma, "( 2 + 3 ) * 4");
        let rec = oracle_eval(&sigma, &s).unwrap();
        let t = &rec.gold_tree;
        // * at position 5 is root; + at 2 heads 1, 3 and both parens.
        assert_eq!(t.root, 5);
        assert_eq!(t.heads[2], Some(5));
        assert_eq!(t.heads[6], Some(5));
        assert_eq!(t.heads[1], Some(2));
        assert_eq!(t.heads[3], Some(2));
        assert_eq!(t.heads[0], Some(2), "open paren attaches to enclosed head");
        assert_eq!(t.heads[4], Some(2), "close paren attaches to enclosed head");
        assert!(t.is_projective());
        assert!(t.is_well_formed());
    }

    #[test]
    fn gt_op_semantics_examples() {
        let mut sigma = Sigma::base();
        let div = sigma.by_name("/").unwrap();
        assert_eq!(gt_op_semantics(&sigma, div, 7, 2).unwrap(), 3);
        assert_eq!(
            gt_op_semantics(&sigma, div, 7, 0).unwrap_err(),
            ExprError::DivisionByZero
        );

        let alpha = sigma.add_extension("alpha", 1, ExtSemantics::Max).unwrap();
        assert_eq!(gt_op_semantics(&sigma, alpha, 4, 9).unwrap(), 9);
        let beta = sigma.add_extension("beta", 1, ExtSemantics::Min).unwrap();
        assert_eq!(gt_op_semantics(&sigma, beta, 4, 9).unwrap(), 4);
        let gamma = sigma.add_extension("gamma", 2, ExtSemantics::AvgFloor).unwrap();
        assert_eq!(gt_op_semantics(&sigma, gamma, 4, 9).unwrap(), 6);
        let phi = sigma.add_extension("phi", 2, ExtSemantics::MulMinusSum).unwrap();
        // Brute-force formula evaluation: 3*4 - (3+4) = 5.
        assert_eq!(gt_op_semantics(&sigma, phi, 3, 4).unwrap(), 5);
        // Clamped at zero.
        assert_eq!(gt_op_semantics(&sigma, phi, 1, 4).unwrap(), 0);
    }

    /// Tree/trace consistency: re-evaluating the gold tree bottom-up with
    /// gt_op_semantics reproduces the recorded result and trace outputs.
    #[test]
    fn trace_consistency() {
        let sigma = Sigma::base();
        for seed in 0..500u64 {
            let p = sample_prefix(&sigma, seed, (seed % 5) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            let expr = tree_to_expr(&sigma, &infix, &rec.gold_tree, rec.gold_tree.root);
            assert_eq!(expr.eval(&sigma).unwrap(), rec.result);
            let root_out = rec
                .trace
                .iter()
                .find(|t| t.node == rec.gold_tree.root)
                .expect("root in trace")
                .output;
            assert_eq!(root_out, rec.result);
            let max_all = rec
                .trace
                .iter()
                .flat_map(|t| t.inputs.iter().copied().chain(std::iter::once(t.output)))
                .max()
                .unwrap();
            assert_eq!(max_all, rec.max_intermediate);
        }
    }

    /// Parenthesis minimality: deleting any inserted parenthesis pair changes
    /// the evaluation tree (or breaks the grammar). Exhaustive pair deletion
    /// on sampled expressions with <= 4 operators.
    #[test]
    fn parenthesis_minimality() {
        let sigma = Sigma::base();
        let mut tested_pairs = 0;
        for seed in 2_000..4_000u64 {
            let p = sample_prefix(&sigma, seed, (seed % 5) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            let direct = read_prefix(&sigma, &p).unwrap();
            // Locate matching pairs.
            let mut stack = Vec::new();
            let mut pairs = Vec::new();
            for (i, &t) in infix.tokens.iter().enumerate() {
                if sigma.kind(t) == SymbolKind::OpenParen {
                    stack.push(i);
                } else if sigma.kind(t) == SymbolKind::CloseParen {
                    pairs.push((stack.pop().unwrap(), i));
                }
            }
            for &(open, close) in &pairs {
                let reduced: Vec<SymbolId> = infix
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != open && i != close)
                    .map(|(_, &t)| t)
                    .collect();
                let reduced = SymbolSequence::infix(reduced);
                let changed = match oracle_eval(&sigma, &reduced) {
                    Ok(r2) => {
                        let e2 = tree_to_expr(&sigma, &reduced, &r2.gold_tree, r2.gold_tree.root);
                        e2 != direct
                    }
                    Err(_) => true,
                };
                assert!(
                    changed,
                    "removable parens in {} (pair {},{})",
                    sigma.render(&infix.tokens),
                    open,
                    close
                );
                tested_pairs += 1;
            }
            let _ = rec;
        }
        assert!(tested_pairs > 100, "too few paren pairs exercised: {tested_pairs}");
    }

    /// Grammar soundness: every generated infix sequence is accepted by the
    /// recursive-descent CFG parser.
    #[test]
    fn grammar_soundness() {
        let sigma = Sigma::base();
        for seed in 0..2_000u64 {
            let p = sample_prefix(&sigma, seed, (seed % 8) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            assert!(grammar_accepts(&sigma, &infix.tokens));
        }
        // Some rejections.
        assert!(!grammar_accepts(&sigma, &seq(&sigma, "2 +").tokens));
        assert!(!grammar_accepts(&sigma, &seq(&sigma, "( 2 + 3").tokens));
        assert!(!grammar_accepts(&sigma, &seq(&sigma, "2 3").tokens));
        assert!(!grammar_accepts(&sigma, &[]));
    }

    #[test]
    fn determinism_per_seed() {
        let sigma = Sigma::base();
        for seed in [0u64, 1, 99] {
            assert_eq!(sample_prefix(&sigma, seed, 4), sample_prefix(&sigma, seed, 4));
        }
    }
}
