//! Greedy transition-based dependency parser.
//!
//! Arc-standard system over a stack, a buffer, and an arc set. A state is
//! terminal when the buffer is empty and the stack holds only the Root
//! sentinel. The scorer embeds an 18-token feature template (stack/buffer
//! tops plus child and grandchild slots, `Null` for absent elements) and
//! predicts one of the three transitions with a two-layer feed-forward
//! network; decoding applies the masked argmax until terminal.
//!
//! For arithmetic this parser is essentially approximating the Shunting-yard
//! algorithm, and a converged model keeps producing oracle trees on
//! expressions far longer than any it was trained on.

use crate::expr::{ParseTree, SymbolId};
use crate::nn::{cross_entropy_batch, masked_log_softmax, Adam, Matrix, Mlp};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParserError {
    #[error("precondition violated for {0:?}")]
    PreconditionViolation(Transition),
    #[error("parse failure: {0}")]
    ParseFailure(&'static str),
    #[error("gold tree is not projective")]
    NonProjective,
}

/// Stack/arc element standing for the Root sentinel.
pub const ROOT: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    Shift,
    LeftArc,
    RightArc,
}

/// Fixed tie-break and classifier order: Shift < LeftArc < RightArc.
pub const TRANSITIONS: [Transition; 3] = [Transition::Shift, Transition::LeftArc, Transition::RightArc];

impl Transition {
    pub fn index(&self) -> usize {
        match self {
            Transition::Shift => 0,
            Transition::LeftArc => 1,
            Transition::RightArc => 2,
        }
    }
}

/// Parser state `c = (stack, buffer, arcs)` over a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParserState {
    pub stack: Vec<usize>,
    /// Next unshifted token position; the buffer is `next..len`.
    pub next: usize,
    pub len: usize,
    pub arcs: Vec<(usize, usize)>,
    /// Children (token positions, ascending) per head; index `len` is Root.
    children: Vec<Vec<usize>>,
}

impl ParserState {
    /// Initial state: stack `[Root]`, buffer all tokens, no arcs.
    pub fn initial(len: usize) -> Self {
        ParserState {
            stack: vec![ROOT],
            next: 0,
            len,
            arcs: Vec::new(),
            children: vec![Vec::new(); len + 1],
        }
    }

    pub fn buffer_len(&self) -> usize {
        self.len - self.next
    }

    pub fn is_terminal(&self) -> bool {
        self.next == self.len && self.stack.as_slice() == [ROOT]
    }

    /// Raw transition preconditions: arcs need two stack elements, Shift a
    /// non-empty buffer.
    pub fn is_legal(&self, t: Transition) -> bool {
        match t {
            Transition::Shift => self.buffer_len() >= 1,
            Transition::LeftArc | Transition::RightArc => self.stack.len() >= 2,
        }
    }

    /// Decoder legality: the preconditions plus the structural rule that the
    /// Root sentinel never becomes a dependent (a Left-Arc with Root second
    /// on the stack would strand the parse).
    pub fn legal_mask(&self) -> [bool; 3] {
        let la = self.is_legal(Transition::LeftArc) && self.stack[self.stack.len() - 2] != ROOT;
        [self.is_legal(Transition::Shift), la, self.is_legal(Transition::RightArc)]
    }

    fn child_slot(&self, head: usize) -> usize {
        if head == ROOT {
            self.len
        } else {
            head
        }
    }

    fn add_arc(&mut self, head: usize, dep: usize) {
        self.arcs.push((head, dep));
        if dep != ROOT {
            let slot = self.child_slot(head);
            let pos = self.children[slot].partition_point(|&c| c < dep);
            self.children[slot].insert(pos, dep);
        }
    }

    pub fn children_of(&self, node: usize) -> &[usize] {
        &self.children[self.child_slot(node)]
    }

    /// Apply one transition; the precondition must hold.
    pub fn apply(&mut self, t: Transition) -> Result<(), ParserError> {
        if !self.is_legal(t) {
            return Err(ParserError::PreconditionViolation(t));
        }
        match t {
            Transition::Shift => {
                self.stack.push(self.next);
                self.next += 1;
            }
            Transition::LeftArc => {
                // arc a1 -> a2; remove a2 (the second-top element).
                let a1 = self.stack[self.stack.len() - 1];
                let a2 = self.stack.remove(self.stack.len() - 2);
                self.add_arc(a1, a2);
            }
            Transition::RightArc => {
                // arc a2 -> a1; remove a1 (the top element).
                let a1 = self.stack.pop().expect("checked len");
                let a2 = *self.stack.last().expect("checked len");
                self.add_arc(a2, a1);
            }
        }
        Ok(())
    }

    /// Extract the dependency tree from a terminal state. Fails when the arc
    /// set is not a single-rooted tree (an untrained decoder can attach
    /// several tokens directly under Root).
    pub fn to_tree(&self) -> Result<ParseTree, ParserError> {
        if !self.is_terminal() {
            return Err(ParserError::ParseFailure("state not terminal"));
        }
        let mut heads = vec![None; self.len];
        let mut root = None;
        for &(h, d) in &self.arcs {
            if d == ROOT {
                return Err(ParserError::ParseFailure("root became a dependent"));
            }
            if h == ROOT {
                if root.is_some() {
                    return Err(ParserError::ParseFailure("multiple root attachments"));
                }
                root = Some(d);
                heads[d] = None;
            } else {
                heads[d] = Some(h);
            }
        }
        let root = root.ok_or(ParserError::ParseFailure("no root arc"))?;
        let tree = ParseTree { heads, root };
        if !tree.is_well_formed() {
            return Err(ParserError::ParseFailure("arc set is not a tree"));
        }
        Ok(tree)
    }
}

/// Number of feature tokens: stack/buffer tops (6), children of the top two
/// stack items (8), grandchildren (4).
pub const NUM_FEATURES: usize = 18;

/// Extract the 18-token feature template for a state, in fixed order:
/// `a1 a2 a3 b1 b2 b3`, then `lc1 rc1 lc2 rc2` of `a1` and `a2`, then
/// `lc1(lc1(ai))`, `rc1(rc1(ai))` for `i = 1, 2`. Absent elements map to the
/// `Null` id and the Root sentinel to the `Root` id.
pub fn extract_features(
    state: &ParserState,
    tokens: &[SymbolId],
    sigma_len: usize,
) -> [usize; NUM_FEATURES] {
    let root_id = sigma_len;
    let null_id = sigma_len + 1;
    let tok_id = |pos: Option<usize>| -> usize {
        match pos {
            None => null_id,
            Some(ROOT) => root_id,
            Some(p) => tokens[p],
        }
    };
    let stack_at = |i: usize| -> Option<usize> {
        let n = state.stack.len();
        (i < n).then(|| state.stack[n - 1 - i])
    };
    let buffer_at = |i: usize| -> Option<usize> {
        let p = state.next + i;
        (p < state.len).then_some(p)
    };
    // Child accessors: positions within a node's ordered children.
    let lc = |node: Option<usize>, k: usize| -> Option<usize> {
        node.and_then(|n| state.children_of(n).get(k).copied())
    };
    let rc = |node: Option<usize>, k: usize| -> Option<usize> {
        node.and_then(|n| {
            let ch = state.children_of(n);
            (ch.len() > k).then(|| ch[ch.len() - 1 - k])
        })
    };

    let a1 = stack_at(0);
    let a2 = stack_at(1);
    let mut feats = [null_id; NUM_FEATURES];
    feats[0] = tok_id(a1);
    feats[1] = tok_id(a2);
    feats[2] = tok_id(stack_at(2));
    feats[3] = tok_id(buffer_at(0));
    feats[4] = tok_id(buffer_at(1));
    feats[5] = tok_id(buffer_at(2));
    feats[6] = tok_id(lc(a1, 0));
    feats[7] = tok_id(rc(a1, 0));
    feats[8] = tok_id(lc(a1, 1));
    feats[9] = tok_id(rc(a1, 1));
    feats[10] = tok_id(lc(a2, 0));
    feats[11] = tok_id(rc(a2, 0));
    feats[12] = tok_id(lc(a2, 1));
    feats[13] = tok_id(rc(a2, 1));
    feats[14] = tok_id(lc(lc(a1, 0), 0));
    feats[15] = tok_id(rc(rc(a1, 0), 0));
    feats[16] = tok_id(lc(lc(a2, 0), 0));
    feats[17] = tok_id(rc(rc(a2, 0), 0));
    feats
}

pub const EMBED_DIM: usize = 50;
pub const HIDDEN_DIM: usize = 200;

/// Transition scorer: embedding matrix over `Sigma + {Root, Null}` and a
/// two-layer feed-forward network `18*d -> 200 -> 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserModel {
    pub sigma_len: usize,
    pub embed: Matrix,
    pub mlp: Mlp,
    pub embed_adam: Adam,
    pub w1_adam: Adam,
    pub b1_adam: Adam,
    pub w2_adam: Adam,
    pub b2_adam: Adam,
    /// Bumped on every weight update; lets callers cache parses.
    pub version: u64,
}

impl ParserModel {
    pub fn new(sigma_len: usize, seed: u64) -> Self {
        Self::with_dims(sigma_len, EMBED_DIM, HIDDEN_DIM, seed)
    }

    pub fn with_dims(sigma_len: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = sigma_len + 2;
        let embed = Matrix::uniform(vocab, embed_dim, 0.1, &mut rng);
        let mlp = Mlp::new(NUM_FEATURES * embed_dim, hidden, 3, &mut rng);
        ParserModel {
            sigma_len,
            embed_adam: Adam::new(embed.data.len()),
            w1_adam: Adam::new(mlp.w1.data.len()),
            b1_adam: Adam::new(mlp.b1.len()),
            w2_adam: Adam::new(mlp.w2.data.len()),
            b2_adam: Adam::new(mlp.b2.len()),
            embed,
            mlp,
            version: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols
    }

    /// Add embedding rows for newly registered symbols (few-shot extension).
    pub fn extend_sigma(&mut self, new_sigma_len: usize, seed: u64) {
        assert!(new_sigma_len >= self.sigma_len);
        let added = new_sigma_len - self.sigma_len;
        if added == 0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.embed_dim();
        // New rows go before the Root/Null rows so symbol ids stay aligned.
        let mut rows: Vec<Vec<f64>> = (0..self.embed.rows).map(|r| self.embed.row(r).to_vec()).collect();
        let tail = rows.split_off(self.sigma_len);
        for _ in 0..added {
            rows.push((0..d).map(|_| rand::Rng::gen_range(&mut rng, -0.1..0.1)).collect());
        }
        rows.extend(tail);
        self.embed = Matrix::from_rows(rows);
        self.embed_adam = Adam::new(self.embed.data.len());
        self.sigma_len = new_sigma_len;
        self.version += 1;
    }

    fn gather(&self, feats: &[usize; NUM_FEATURES]) -> Vec<f64> {
        let d = self.embed_dim();
        let mut x = Vec::with_capacity(NUM_FEATURES * d);
        for &f in feats {
            x.extend_from_slice(self.embed.row(f));
        }
        x
    }

    /// Transition logits for one state.
    pub fn score(&self, feats: &[usize; NUM_FEATURES]) -> [f64; 3] {
        let logits = self.mlp.forward_one(&self.gather(feats));
        [logits[0], logits[1], logits[2]]
    }
}

/// Training example for one parser state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionExample {
    pub features: [usize; NUM_FEATURES],
    pub legal: [bool; 3],
    pub gold: Transition,
}

/// Greedy parse: apply the masked-argmax transition until terminal. Returns
/// the tree and the decode log-probability (sum of chosen masked-softmax
/// log-probs), which defines `p(pt | s)`.
pub fn greedy_parse(model: &ParserModel, tokens: &[SymbolId]) -> Result<(ParseTree, f64), ParserError> {
    if tokens.is_empty() {
        return Err(ParserError::ParseFailure("empty sequence"));
    }
    let mut state = ParserState::initial(tokens.len());
    let mut logp = 0.0;
    let guard = 4 * tokens.len() + 8;
    for _ in 0..guard {
        if state.is_terminal() {
            let tree = state.to_tree()?;
            return Ok((tree, logp));
        }
        let mask = state.legal_mask();
        if !mask.iter().any(|&m| m) {
            return Err(ParserError::ParseFailure("no legal transition"));
        }
        let feats = extract_features(&state, tokens, model.sigma_len);
        let logits = model.score(&feats);
        let lsm = masked_log_softmax(&logits, &mask);
        let mut best = None;
        for t in TRANSITIONS {
            let i = t.index();
            if !mask[i] {
                continue;
            }
            match best {
                None => best = Some((t, lsm[i])),
                Some((_, b)) if lsm[i] > b => best = Some((t, lsm[i])),
                _ => {}
            }
        }
        let (t, lp) = best.expect("some transition legal");
        logp += lp;
        state.apply(t).expect("legality checked");
    }
    Err(ParserError::ParseFailure("transition guard exceeded"))
}

/// Sampled parse: draw each transition from the masked softmax instead of
/// taking the argmax. This is the posterior-sampling decode used to explore
/// parse space when the greedy tree cannot explain an observation.
pub fn sample_parse(
    model: &ParserModel,
    tokens: &[SymbolId],
    rng: &mut ChaCha8Rng,
) -> Result<(ParseTree, f64), ParserError> {
    use rand::Rng;
    if tokens.is_empty() {
        return Err(ParserError::ParseFailure("empty sequence"));
    }
    let mut state = ParserState::initial(tokens.len());
    let mut logp = 0.0;
    let guard = 4 * tokens.len() + 8;
    for _ in 0..guard {
        if state.is_terminal() {
            let tree = state.to_tree()?;
            return Ok((tree, logp));
        }
        let mask = state.legal_mask();
        if !mask.iter().any(|&m| m) {
            return Err(ParserError::ParseFailure("no legal transition"));
        }
        let feats = extract_features(&state, tokens, model.sigma_len);
        let logits = model.score(&feats);
        let lsm = masked_log_softmax(&logits, &mask);
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = None;
        for t in TRANSITIONS {
            let i = t.index();
            if !mask[i] {
                continue;
            }
            acc += lsm[i].exp();
            chosen = Some(t);
            if u < acc {
                break;
            }
        }
        let t = chosen.expect("some transition legal");
        logp += lsm[t.index()];
        state.apply(t).expect("legality checked");
    }
    Err(ParserError::ParseFailure("transition guard exceeded"))
}

/// Score an externally supplied tree: the log-probability the greedy decoder
/// assigns to the oracle transition sequence reconstructing it.
pub fn tree_log_prob(
    model: &ParserModel,
    tokens: &[SymbolId],
    tree: &ParseTree,
) -> Result<f64, ParserError> {
    let transitions = oracle_transition_sequence(tokens, tree)?;
    let mut state = ParserState::initial(tokens.len());
    let mut logp = 0.0;
    for t in transitions {
        let feats = extract_features(&state, tokens, model.sigma_len);
        let logits = model.score(&feats);
        let lsm = masked_log_softmax(&logits, &state.legal_mask());
        logp += lsm[t.index()];
        state.apply(t)?;
    }
    Ok(logp)
}

/// Static arc-standard oracle: the transition sequence that reconstructs
/// `gold` exactly. Left-Arc fires when the top of stack is the gold head of
/// the second element and that element's dependents are all attached;
/// Right-Arc symmetrically; otherwise Shift.
pub fn oracle_transition_sequence(
    tokens: &[SymbolId],
    gold: &ParseTree,
) -> Result<Vec<Transition>, ParserError> {
    if gold.heads.len() != tokens.len() || !gold.is_well_formed() || !gold.is_projective() {
        return Err(ParserError::NonProjective);
    }
    let n = tokens.len();
    let gold_head = |d: usize| -> usize { gold.heads[d].unwrap_or(ROOT) };
    let mut num_deps = vec![0usize; n + 1];
    for d in 0..n {
        let h = gold_head(d);
        let slot = if h == ROOT { n } else { h };
        num_deps[slot] += 1;
    }
    let mut state = ParserState::initial(n);
    let mut out = Vec::with_capacity(2 * n);
    let mut attached = vec![0usize; n + 1];
    while !state.is_terminal() {
        let sn = state.stack.len();
        let mut chosen = None;
        if sn >= 2 {
            let a1 = state.stack[sn - 1];
            let a2 = state.stack[sn - 2];
            if a2 != ROOT && gold_head(a2) == a1 && attached[a2] == num_deps[a2] {
                chosen = Some(Transition::LeftArc);
            } else if gold_head(a1) == a2 && attached[a1] == num_deps[a1] {
                chosen = Some(Transition::RightArc);
            } else if gold_head(a1) == ROOT && a2 == ROOT && attached[a1] == num_deps[a1] {
                chosen = Some(Transition::RightArc);
            }
        }
        let t = match chosen {
            Some(t) => t,
            None => {
                if state.buffer_len() == 0 {
                    return Err(ParserError::NonProjective);
                }
                Transition::Shift
            }
        };
        if let Transition::LeftArc | Transition::RightArc = t {
            let (h, d) = match t {
                Transition::LeftArc => (state.stack[sn - 1], state.stack[sn - 2]),
                Transition::RightArc => (state.stack[sn - 2], state.stack[sn - 1]),
                Transition::Shift => unreachable!(),
            };
            let slot = if h == ROOT { n } else { h };
            attached[slot] += 1;
            let _ = d;
        }
        state.apply(t)?;
        out.push(t);
        if out.len() > 4 * n + 8 {
            return Err(ParserError::NonProjective);
        }
    }
    Ok(out)
}

/// Oracle training states for a (sequence, gold tree) pair.
pub fn oracle_states(
    tokens: &[SymbolId],
    gold: &ParseTree,
    sigma_len: usize,
) -> Result<Vec<TransitionExample>, ParserError> {
    let transitions = oracle_transition_sequence(tokens, gold)?;
    let mut state = ParserState::initial(tokens.len());
    let mut out = Vec::with_capacity(transitions.len());
    for t in transitions {
        out.push(TransitionExample {
            features: extract_features(&state, tokens, sigma_len),
            legal: state.legal_mask(),
            gold: t,
        });
        state.apply(t)?;
    }
    Ok(out)
}

/// Loss and raw gradients for a batch, without stepping. The gradient layout
/// mirrors the model parameters; `embed_rows` lists rows that received
/// gradient.
pub struct ParserGrads {
    pub loss: f64,
    pub embed: Matrix,
    pub embed_rows: Vec<usize>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub fn parser_loss_and_grads(model: &ParserModel, batch: &[TransitionExample]) -> ParserGrads {
    assert!(!batch.is_empty());
    let d = model.embed_dim();
    let mut x = Matrix::zeros(batch.len(), NUM_FEATURES * d);
    for (r, ex) in batch.iter().enumerate() {
        let row = x.row_mut(r);
        for (k, &f) in ex.features.iter().enumerate() {
            row[k * d..(k + 1) * d].copy_from_slice(model.embed.row(f));
        }
    }
    let (h, logits) = model.mlp.forward(&x);
    let gold: Vec<usize> = batch.iter().map(|ex| ex.gold.index()).collect();
    let masks: Vec<Vec<bool>> = batch.iter().map(|ex| ex.legal.to_vec()).collect();
    let (loss, dlogits) = cross_entropy_batch(&logits, &gold, Some(&masks));
    let grads = model.mlp.backward(&x, &h, &dlogits);

    let mut embed_grad = Matrix::zeros(model.embed.rows, d);
    let mut touched = vec![false; model.embed.rows];
    for (r, ex) in batch.iter().enumerate() {
        let gi = grads.input.row(r);
        for (k, &f) in ex.features.iter().enumerate() {
            touched[f] = true;
            let dst = embed_grad.row_mut(f);
            for j in 0..d {
                dst[j] += gi[k * d + j];
            }
        }
    }
    let embed_rows: Vec<usize> = (0..model.embed.rows).filter(|&r| touched[r]).collect();
    ParserGrads {
        loss,
        embed: embed_grad,
        embed_rows,
        w1: grads.w1,
        b1: grads.b1,
        w2: grads.w2,
        b2: grads.b2,
    }
}

/// One Adam step on mean cross-entropy over the batch; returns the pre-step
/// loss.
pub fn parser_update(model: &mut ParserModel, batch: &[TransitionExample], lr: f64) -> f64 {
    let grads = parser_loss_and_grads(model, batch);
    let d = model.embed_dim();
    let touched_indices: Vec<usize> = grads
        .embed_rows
        .iter()
        .flat_map(|&r| r * d..(r + 1) * d)
        .collect();
    model
        .embed_adam
        .step_sparse(&mut model.embed.data, &grads.embed.data, &touched_indices, lr);
    model.w1_adam.step(&mut model.mlp.w1.data, &grads.w1.data, lr);
    model.b1_adam.step(&mut model.mlp.b1, &grads.b1, lr);
    model.w2_adam.step(&mut model.mlp.w2.data, &grads.w2.data, lr);
    model.b2_adam.step(&mut model.mlp.b2, &grads.b2, lr);
    model.version += 1;
    grads.loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{oracle_eval, prefix_to_infix, sample_prefix, Sigma, SymbolSequence};

    fn toks(sigma: &Sigma, text: &str) -> Vec<SymbolId> {
        text.split_whitespace().map(|w| sigma.by_name(w).unwrap()).collect()
    }

    #[test]
    fn apply_transition_traces() {
        let sigma = Sigma::base();
        let tokens = toks(&sigma, "2 + 3");
        let mut st = ParserState::initial(tokens.len());
        // Shift 2 and +, then LeftArc: top (+) takes the second (2).
        st.apply(Transition::Shift).unwrap();
        st.apply(Transition::Shift).unwrap();
        st.apply(Transition::LeftArc).unwrap();
        // Arc (+ -> 2): head position 1, dependent position 0.
        assert_eq!(st.arcs, vec![(1, 0)]);
        assert_eq!(st.stack, vec![ROOT, 1]);
        // Shift 3, RightArc (+ -> 3), RightArc (Root -> +): terminal.
        st.apply(Transition::Shift).unwrap();
        st.apply(Transition::RightArc).unwrap();
        st.apply(Transition::RightArc).unwrap();
        assert!(st.is_terminal(), "exactly 2n transitions reach terminal");
        assert_eq!(st.arcs, vec![(1, 0), (1, 2), (ROOT, 1)]);
    }

    #[test]
    fn precondition_violations() {
        let mut st = ParserState::initial(3);
        assert_eq!(
            st.apply(Transition::LeftArc).unwrap_err(),
            ParserError::PreconditionViolation(Transition::LeftArc)
        );
        st.apply(Transition::Shift).unwrap();
        st.apply(Transition::Shift).unwrap();
        st.apply(Transition::Shift).unwrap();
        assert_eq!(
            st.apply(Transition::Shift).unwrap_err(),
            ParserError::PreconditionViolation(Transition::Shift)
        );
    }

    /// Exhaustive over all expressions with <= 3 operators: the oracle takes
    /// exactly 2 * len transitions (each token is shifted once and attached
    /// once, Root arc included).
    #[test]
    fn transition_count_is_twice_length() {
        let sigma = Sigma::base();
        for seed in 0..600u64 {
            let p = sample_prefix(&sigma, seed, (seed % 4) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            let seq = oracle_transition_sequence(&infix.tokens, &rec.gold_tree).unwrap();
            assert_eq!(seq.len(), 2 * infix.tokens.len());
            let shifts = seq.iter().filter(|t| **t == Transition::Shift).count();
            assert_eq!(shifts, infix.tokens.len());
        }
    }

    #[test]
    fn features_initial_and_terminal() {
        let sigma = Sigma::base();
        let tokens = toks(&sigma, "2 + 3");
        let n = sigma.len();
        let (root_id, null_id) = (n, n + 1);
        let st = ParserState::initial(3);
        let feats = extract_features(&st, &tokens, n);
        let expected: Vec<usize> = vec![
            root_id, null_id, null_id, // a1..a3
            tokens[0], tokens[1], tokens[2], // b1..b3
            null_id, null_id, null_id, null_id, // children of a1
            null_id, null_id, null_id, null_id, // children of a2
            null_id, null_id, null_id, null_id, // grandchildren
        ];
        assert_eq!(feats.to_vec(), expected);

        // Drive to terminal along the oracle sequence: S S LA S RA RA.
        let mut st = ParserState::initial(3);
        for t in [
            Transition::Shift,
            Transition::Shift,
            Transition::LeftArc,
            Transition::Shift,
            Transition::RightArc,
            Transition::RightArc,
        ] {
            st.apply(t).unwrap();
        }
        assert!(st.is_terminal());
        let feats = extract_features(&st, &tokens, n);
        assert_eq!(feats[0], root_id);
        assert_eq!(&feats[1..6], &[null_id; 5], "stack tail and buffer empty");
        // Root's only child is "+" at position 1.
        assert_eq!(feats[6], tokens[1]);
        assert_eq!(feats[7], tokens[1]);
        // Grandchild via lc1(lc1(a1)) = leftmost child of "+" = "2".
        assert_eq!(feats[14], tokens[0]);
        assert_eq!(feats[15], tokens[2]);
    }

    /// A mid-parse state feature trace for ( 2 + 3 ) * 4, checked against an
    /// independent step-by-step simulation of the definitions.
    #[test]
    fn features_mid_parse() {
        let sigma = Sigma::base();
        let tokens = toks(&sigma, "( 2 + 3 ) * 4");
        let n = sigma.len();
        let null_id = n + 1;
        let mut st = ParserState::initial(tokens.len());
        // Shift '(' '2' '+', then LA twice: + collects 2 then '('.
        for t in [
            Transition::Shift,
            Transition::Shift,
            Transition::Shift,
            Transition::LeftArc,
            Transition::LeftArc,
        ] {
            st.apply(t).unwrap();
        }
        // Stack: [Root, +]; buffer: 3 ) * 4; + has children {(, 2}.
        let feats = extract_features(&st, &tokens, n);
        assert_eq!(feats[0], tokens[2]); // a1 = +
        assert_eq!(feats[1], n); // a2 = Root
        assert_eq!(feats[2], null_id);
        assert_eq!(feats[3], tokens[3]); // b1 = 3
        assert_eq!(feats[4], tokens[4]); // b2 = )
        assert_eq!(feats[5], tokens[5]); // b3 = *
        assert_eq!(feats[6], tokens[0]); // lc1(+) = (
        assert_eq!(feats[7], tokens[1]); // rc1(+) = 2
        assert_eq!(feats[8], tokens[1]); // lc2(+) = 2
        assert_eq!(feats[9], tokens[0]); // rc2(+) = (
    }

    #[test]
    fn greedy_parse_single_digit() {
        let sigma = Sigma::base();
        let model = ParserModel::with_dims(sigma.len(), 8, 16, 0);
        let tokens = toks(&sigma, "7");
        let (tree, logp) = greedy_parse(&model, &tokens).unwrap();
        assert_eq!(tree.root, 0);
        assert_eq!(tree.heads, vec![None]);
        assert!(logp <= 0.0);
    }

    #[test]
    fn greedy_parse_never_loops() {
        let sigma = Sigma::base();
        for seed in 0..30u64 {
            let model = ParserModel::with_dims(sigma.len(), 8, 16, seed);
            for s in 0..40u64 {
                let p = sample_prefix(&sigma, s, (s % 6) as usize);
                let infix = prefix_to_infix(&sigma, &p).unwrap();
                // Either terminates with a tree or fails cleanly.
                match greedy_parse(&model, &infix.tokens) {
                    Ok((tree, _)) => {
                        assert_eq!(tree.heads.len(), infix.tokens.len());
                        assert!(tree.is_well_formed());
                    }
                    Err(ParserError::ParseFailure(_)) => {}
                    Err(e) => panic!("unexpected error {e:?}"),
                }
            }
        }
    }

    #[test]
    fn oracle_replays_to_gold() {
        let sigma = Sigma::base();
        let mut replayed = 0;
        for seed in 0..1_500u64 {
            let p = sample_prefix(&sigma, seed, (seed % 8) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            let seq = oracle_transition_sequence(&infix.tokens, &rec.gold_tree).unwrap();
            let mut st = ParserState::initial(infix.tokens.len());
            for t in seq {
                st.apply(t).unwrap();
            }
            let tree = st.to_tree().unwrap();
            assert_eq!(tree, rec.gold_tree);
            replayed += 1;
            if replayed >= 1_000 {
                break;
            }
        }
        assert!(replayed >= 1_000);
    }

    #[test]
    fn oracle_example_sequence() {
        let sigma = Sigma::base();
        let tokens = toks(&sigma, "2 + 3");
        let s = SymbolSequence::infix(tokens.clone());
        let rec = oracle_eval(&sigma, &s).unwrap();
        let seq = oracle_transition_sequence(&tokens, &rec.gold_tree).unwrap();
        use Transition::*;
        assert_eq!(seq, vec![Shift, Shift, LeftArc, Shift, RightArc, RightArc]);
    }

    #[test]
    fn non_projective_rejected() {
        let sigma = Sigma::base();
        let tokens = toks(&sigma, "2 + 3 + 4");
        // Crossing arcs: 0 -> 2 and 1 -> 3 cross.
        let tree = ParseTree {
            heads: vec![None, Some(3), Some(0), Some(1), Some(0)],
            root: 0,
        };
        assert_eq!(
            oracle_transition_sequence(&tokens, &tree).unwrap_err(),
            ParserError::NonProjective
        );
    }

    #[test]
    fn update_with_zero_lr_keeps_weights() {
        let sigma = Sigma::base();
        let mut model = ParserModel::with_dims(sigma.len(), 8, 16, 1);
        let tokens = toks(&sigma, "2 + 3");
        let rec = oracle_eval(&sigma, &SymbolSequence::infix(tokens.clone())).unwrap();
        let batch = oracle_states(&tokens, &rec.gold_tree, sigma.len()).unwrap();
        let before = model.clone();
        let loss = parser_update(&mut model, &batch, 0.0);
        assert!(loss > 0.0);
        assert_eq!(model.embed, before.embed);
        assert_eq!(model.mlp, before.mlp);
    }

    /// Analytic parser gradients (including embeddings) against central
    /// finite differences.
    #[test]
    fn parser_gradient_check() {
        let sigma = Sigma::base();
        let model = ParserModel::with_dims(sigma.len(), 6, 10, 5);
        let tokens = toks(&sigma, "( 2 + 3 ) * 4");
        let rec = oracle_eval(&sigma, &SymbolSequence::infix(tokens.clone())).unwrap();
        let batch = oracle_states(&tokens, &rec.gold_tree, sigma.len()).unwrap();
        let grads = parser_loss_and_grads(&model, &batch);

        let loss_of = |m: &ParserModel| parser_loss_and_grads(m, &batch).loss;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        {
            let mut check = |analytic: f64, write: &dyn Fn(&mut ParserModel, f64), read: &dyn Fn(&ParserModel) -> f64| {
                let mut m = model.clone();
                let base = read(&m);
                write(&mut m, base + h);
                let up = loss_of(&m);
                write(&mut m, base - h);
                let down = loss_of(&m);
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((analytic - numeric).abs() / denom);
            };
            for idx in [0usize, 33, 107] {
                check(grads.w1.data[idx], &move |m, v| m.mlp.w1.data[idx] = v, &move |m| m.mlp.w1.data[idx]);
            }
            for idx in [1usize, 17] {
                check(grads.w2.data[idx], &move |m, v| m.mlp.w2.data[idx] = v, &move |m| m.mlp.w2.data[idx]);
            }
            // Embedding rows that actually fired.
            let row = grads.embed_rows[0];
            for col in [0usize, 3] {
                let idx = row * model.embed_dim() + col;
                check(grads.embed.data[idx], &move |m, v| m.embed.data[idx] = v, &move |m| m.embed.data[idx]);
            }
            check(grads.b1[4], &|m, v| m.b1_stub(4, v), &|m| m.mlp.b1[4]);
        }
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    impl ParserModel {
        fn b1_stub(&mut self, i: usize, v: f64) {
            self.mlp.b1[i] = v;
        }
    }

    /// Supervised convergence on a small corpus, then exact-tree accuracy on
    /// held-out expressions (a desk-scale preview of the extrapolation gate).
    #[test]
    fn supervised_convergence_smoke() {
        let sigma = Sigma::base();
        let mut model = ParserModel::with_dims(sigma.len(), 16, 48, 7);
        let mut states = Vec::new();
        for seed in 0..400u64 {
            let p = sample_prefix(&sigma, seed, (seed % 4) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            states.extend(oracle_states(&infix.tokens, &rec.gold_tree, sigma.len()).unwrap());
        }
        for _ in 0..60 {
            for chunk in states.chunks(512) {
                parser_update(&mut model, chunk, 1e-2);
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for seed in 10_000..10_200u64 {
            let p = sample_prefix(&sigma, seed, 1 + (seed % 5) as usize);
            let infix = prefix_to_infix(&sigma, &p).unwrap();
            let Ok(rec) = oracle_eval(&sigma, &infix) else { continue };
            total += 1;
            if let Ok((tree, _)) = greedy_parse(&model, &infix.tokens) {
                if tree == rec.gold_tree {
                    correct += 1;
                }
            }
        }
        assert!(total > 150);
        assert!(
            correct as f64 / total as f64 > 0.9,
            "smoke accuracy {correct}/{total}"
        );
    }
}
