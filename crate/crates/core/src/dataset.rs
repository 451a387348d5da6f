//! Benchmark dataset generation: glyph banks, the train split, and the five
//! test subsets, with line-delimited JSON persistence.
//!
//! Glyphs are synthetic Gaussian-cluster feature vectors standing in for
//! handwritten images: each symbol owns a few prototype vectors
//! (handwriting styles) and every glyph is a prototype plus isotropic noise.
//! Train and test draw from disjoint instance pools, so test glyphs are
//! never seen in training.
//!
//! The test set splits by expression membership, operator count `|x|`, and
//! max intermediate value `max(v)`:
//!
//! - T1: train expressions with fresh glyphs,
//! - T2: unseen expressions inside the training regime,
//! - T3: `|x| <= 10`, `max(v) > 100` (value extrapolation),
//! - T4: `|x| > 10`, `max(v) <= 100` (length extrapolation),
//! - T5: both extrapolations at once.

use crate::expr::{
    oracle_eval, prefix_to_infix, sample_prefix_with, ExprError, Notation, Sigma, SymbolId,
    SymbolInfo, SymbolSequence, Value,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("glyph bank infeasible: {0}")]
    Feasibility(String),
    #[error("expression space exhausted for {subset}: needed {needed}, found {found}")]
    Exhaustion { subset: String, needed: usize, found: usize },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Round to 9 significant digits, the file-format precision. Features are
/// quantized at creation so save/load is the identity.
pub fn quantize9(x: f64) -> f64 {
    fmt9(x).parse().expect("formatted float parses")
}

pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// A glyph: one synthetic handwritten-symbol instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub features: Vec<f64>,
    /// Identifies the sampled pool instance; instances never repeat across
    /// the train and test pools.
    pub writer_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankParams {
    pub feature_dim: usize,
    pub prototypes_per_symbol: usize,
    pub noise_sigma: f64,
    pub pool_size_train: usize,
    pub pool_size_test: usize,
    pub num_symbols: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams {
            feature_dim: 16,
            prototypes_per_symbol: 3,
            noise_sigma: 0.15,
            pool_size_train: 1000,
            pool_size_test: 1000,
            num_symbols: 16,
        }
    }
}

/// Per-symbol prototypes plus disjoint train/test glyph pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphBank {
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// `prototypes[symbol][style]` is a feature vector.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// Pools are generation-time state; persisted files keep prototypes only.
    pub train_pool: Vec<Vec<Glyph>>,
    pub test_pool: Vec<Vec<Glyph>>,
}

impl GlyphBank {
    pub fn num_symbols(&self) -> usize {
        self.prototypes.len()
    }

    /// Minimum prototype distance between distinct symbols.
    pub fn min_cross_symbol_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.prototypes.len() {
            for b in (a + 1)..self.prototypes.len() {
                for pa in &self.prototypes[a] {
                    for pb in &self.prototypes[b] {
                        let d = dist(pa, pb);
                        if d < best {
                            best = d;
                        }
                    }
                }
            }
        }
        best
    }

    /// All train-pool features with their hidden symbol labels (for oracles
    /// and purity measurements; training never sees the labels).
    pub fn labeled_train_pool(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (sym, pool) in self.train_pool.iter().enumerate() {
            for g in pool {
                feats.push(g.features.clone());
                labels.push(sym);
            }
        }
        (feats, labels)
    }

    pub fn labeled_test_pool(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (sym, pool) in self.test_pool.iter().enumerate() {
            for g in pool {
                feats.push(g.features.clone());
                labels.push(sym);
            }
        }
        (feats, labels)
    }

    /// Nearest-prototype classification of a feature vector.
    pub fn nearest_prototype(&self, features: &[f64]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (sym, protos) in self.prototypes.iter().enumerate() {
            for p in protos {
                let d = dist(p, features);
                if d < bd {
                    bd = d;
                    best = sym;
                }
            }
        }
        best
    }

    fn draw(&self, pool_is_train: bool, symbol: SymbolId, rng: &mut ChaCha8Rng) -> Glyph {
        let pool = if pool_is_train { &self.train_pool[symbol] } else { &self.test_pool[symbol] };
        pool[rng.gen_range(0..pool.len())].clone()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const BANK_ATTEMPTS: usize = 50;

/// Build a glyph bank: prototypes by rejection sampling until every pair of
/// prototypes from distinct symbols is at least `4 * noise_sigma` apart,
/// then disjoint train/test pools of `prototype + N(0, sigma^2 I)` glyphs.
/// Deterministic per seed.
pub fn build_glyph_bank(rng_seed: u64, params: &BankParams) -> Result<GlyphBank, DatasetError> {
    assert!(params.noise_sigma >= 0.0, "noise_sigma must be non-negative");
    assert!(params.pool_size_train >= 1 && params.pool_size_test >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let f = params.feature_dim;
    let spread = 1.5 * params.noise_sigma;
    let min_dist = 4.0 * params.noise_sigma;

    let mut prototypes = None;
    for _ in 0..BANK_ATTEMPTS {
        let mut cand: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.num_symbols);
        for _ in 0..params.num_symbols {
            let center: Vec<f64> = (0..f).map(|_| gaussian(&mut rng)).collect();
            let protos: Vec<Vec<f64>> = (0..params.prototypes_per_symbol)
                .map(|_| {
                    (0..f)
                        .map(|i| quantize9(center[i] + spread * gaussian(&mut rng)))
                        .collect()
                })
                .collect();
            cand.push(protos);
        }
        let ok = {
            let bank = GlyphBank {
                feature_dim: f,
                noise_sigma: params.noise_sigma,
                prototypes: cand.clone(),
                train_pool: vec![],
                test_pool: vec![],
            };
            bank.min_cross_symbol_distance() >= min_dist
        };
        if ok {
            prototypes = Some(cand);
            break;
        }
    }
    let prototypes = prototypes.ok_or_else(|| {
        DatasetError::Feasibility(format!(
            "could not satisfy min prototype distance {min_dist} in {BANK_ATTEMPTS} attempts"
        ))
    })?;

    let mut writer_id = 0u64;
    let mut make_pool = |protos: &Vec<Vec<f64>>, size: usize, rng: &mut ChaCha8Rng| -> Vec<Glyph> {
        (0..size)
            .map(|_| {
                let p = &protos[rng.gen_range(0..protos.len())];
                let features = p
                    .iter()
                    .map(|&v| quantize9(v + params.noise_sigma * gaussian(rng)))
                    .collect();
                let g = Glyph { features, writer_id };
                writer_id += 1;
                g
            })
            .collect()
    };
    let train_pool: Vec<Vec<Glyph>> =
        prototypes.iter().map(|p| make_pool(p, params.pool_size_train, &mut rng)).collect();
    let test_pool: Vec<Vec<Glyph>> =
        prototypes.iter().map(|p| make_pool(p, params.pool_size_test, &mut rng)).collect();

    Ok(GlyphBank {
        feature_dim: f,
        noise_sigma: params.noise_sigma,
        prototypes,
        train_pool,
        test_pool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Train,
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl Subset {
    pub const TEST: [Subset; 5] = [Subset::T1, Subset::T2, Subset::T3, Subset::T4, Subset::T5];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::T1 => "T1",
            Subset::T2 => "T2",
            Subset::T3 => "T3",
            Subset::T4 => "T4",
            Subset::T5 => "T5",
        }
    }

    pub fn from_str(s: &str) -> Option<Subset> {
        Some(match s {
            "train" => Subset::Train,
            "T1" => Subset::T1,
            "T2" => Subset::T2,
            "T3" => Subset::T3,
            "T4" => Subset::T4,
            "T5" => Subset::T5,
            _ => return None,
        })
    }
}

/// One weakly-supervised sample: glyphs in, final result out. The symbol
/// sequence is carried for validation, evaluation, and ground-truth
/// injection, but is hidden from ordinary training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintSample {
    pub glyphs: Vec<Glyph>,
    pub symbols: SymbolSequence,
    pub result: Value,
    pub num_ops: usize,
    pub max_value: Value,
    pub subset_tag: Subset,
}

/// How a train bin is filled once its distinct-expression space is smaller
/// than the requested sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepeatPolicy {
    /// Repeat every distinct expression `ceil(target / distinct)` times with
    /// fresh glyphs; bins may exceed their target (this is what produces the
    /// 11,170-sample full-scale train split).
    CeilRepeat,
    /// Cycle distinct expressions until the target is met exactly.
    ExactTrim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintConfig {
    pub rng_seed: u64,
    pub bank: BankParams,
    pub max_train_ops: usize,
    pub max_train_value: Value,
    /// Requested sample count per operator-count bin (index = #operators).
    pub train_bin_targets: Vec<usize>,
    /// Cap on distinct expressions per bin.
    pub distinct_cap: usize,
    pub repeat_policy: RepeatPolicy,
    /// Requested sizes for T1..T5.
    pub test_counts: [usize; 5],
    /// Operator-count range for the length-extrapolation subsets.
    pub extrapolation_ops: (usize, usize),
    /// Values above this are rejected everywhere (keeps every sample
    /// evaluable by recursively induced programs within step limits).
    pub value_cap: Value,
}

impl HintConfig {
    /// Desk-scale preset: 5,000 train samples, 500 per test subset.
    pub fn desk(rng_seed: u64) -> Self {
        HintConfig {
            rng_seed,
            bank: BankParams {
                pool_size_train: 600,
                pool_size_test: 600,
                ..BankParams::default()
            },
            max_train_ops: 10,
            max_train_value: 100,
            train_bin_targets: distribute_total(5_000, 11),
            distinct_cap: 1_000,
            repeat_policy: RepeatPolicy::ExactTrim,
            test_counts: [500; 5],
            extrapolation_ops: (11, 20),
            value_cap: 2_000,
        }
    }

    /// Full-scale preset: reproduces the published split sizes
    /// (train 11,170; test 48,910 at shares 22.8/23.0/22.0/16.0/16.2).
    pub fn full(rng_seed: u64) -> Self {
        HintConfig {
            rng_seed,
            bank: BankParams {
                pool_size_train: 2_000,
                pool_size_test: 2_000,
                ..BankParams::default()
            },
            max_train_ops: 10,
            max_train_value: 100,
            train_bin_targets: vec![1_000; 11],
            distinct_cap: 1_000,
            repeat_policy: RepeatPolicy::CeilRepeat,
            test_counts: [11_170, 11_249, 10_760, 7_826, 7_905],
            extrapolation_ops: (11, 20),
            value_cap: 5_000,
        }
    }
}

/// Split `total` into `bins` near-equal parts (earlier bins take the
/// remainder).
pub fn distribute_total(total: usize, bins: usize) -> Vec<usize> {
    let base = total / bins;
    let extra = total % bins;
    (0..bins).map(|i| base + usize::from(i < extra)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintDataset {
    pub sigma: Sigma,
    pub bank: GlyphBank,
    pub train: Vec<HintSample>,
    pub test: Vec<(Subset, Vec<HintSample>)>,
    pub config: HintConfig,
}

impl HintDataset {
    pub fn subset(&self, s: Subset) -> &[HintSample] {
        if s == Subset::Train {
            return &self.train;
        }
        self.test
            .iter()
            .find(|(tag, _)| *tag == s)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn test_len(&self) -> usize {
        self.test.iter().map(|(_, v)| v.len()).sum()
    }
}

struct ExprPool {
    rng: ChaCha8Rng,
    seen: HashSet<Vec<SymbolId>>,
}

struct Accepted {
    tokens: Vec<SymbolId>,
    result: Value,
    num_ops: usize,
    max_value: Value,
}

impl ExprPool {
    /// Try one draw with `num_ops` operators; `predicate` filters on
    /// (num_ops, max_value).
    fn try_draw(
        &mut self,
        sigma: &Sigma,
        ops: &[SymbolId],
        num_ops: usize,
        value_cap: Value,
        predicate: impl Fn(usize, Value) -> bool,
        require_unseen: bool,
    ) -> Option<Accepted> {
        let prefix = sample_prefix_with(ops, &mut self.rng, num_ops);
        let infix = prefix_to_infix(sigma, &prefix).ok()?;
        if require_unseen && self.seen.contains(&infix.tokens) {
            return None;
        }
        let rec = match oracle_eval(sigma, &infix) {
            Ok(rec) => rec,
            Err(ExprError::DivisionByZero) | Err(ExprError::Overflow) => return None,
            Err(_) => return None,
        };
        if rec.max_intermediate > value_cap {
            return None;
        }
        if !predicate(num_ops, rec.max_intermediate) {
            return None;
        }
        Some(Accepted {
            tokens: infix.tokens,
            result: rec.result,
            num_ops,
            max_value: rec.max_intermediate,
        })
    }
}

/// Enumerate every valid expression with 0 or 1 operators (the only bins
/// whose distinct space is small enough to exhaust).
fn enumerate_small(sigma: &Sigma, ops: &[SymbolId], num_ops: usize) -> Vec<Accepted> {
    let mut out = Vec::new();
    if num_ops == 0 {
        for d in 0..10u8 {
            out.push(Accepted {
                tokens: vec![d as SymbolId],
                result: d as Value,
                num_ops: 0,
                max_value: d as Value,
            });
        }
        return out;
    }
    assert_eq!(num_ops, 1);
    for &op in ops {
        for a in 0..10u8 {
            for b in 0..10u8 {
                let tokens = vec![a as SymbolId, op, b as SymbolId];
                let seq = SymbolSequence { tokens: tokens.clone(), notation: Notation::Infix };
                if let Ok(rec) = oracle_eval(sigma, &seq) {
                    out.push(Accepted {
                        tokens,
                        result: rec.result,
                        num_ops: 1,
                        max_value: rec.max_intermediate,
                    });
                }
            }
        }
    }
    out
}

/// Generate the dataset: sample prefix expressions, convert to infix,
/// evaluate with the oracle, reject division by zero, deduplicate by symbol
/// string, assign subsets by the `(|x|, max(v))` rules, and attach fresh
/// glyphs from the correct pool.
pub fn generate_hint(sigma: &Sigma, config: &HintConfig) -> Result<HintDataset, DatasetError> {
    assert_eq!(config.train_bin_targets.len(), config.max_train_ops + 1);
    let mut bank_params = config.bank.clone();
    bank_params.num_symbols = sigma.len();
    let bank = build_glyph_bank(config.rng_seed.wrapping_add(0x9E37), &bank_params)?;
    let base_ops: Vec<SymbolId> =
        ["+", "-", "*", "/"].iter().map(|n| sigma.by_name(n).expect("base op")).collect();

    let mut pool = ExprPool {
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        seen: HashSet::new(),
    };
    let mut glyph_rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(0xA5A5));

    // ---- train ----
    let mut train: Vec<HintSample> = Vec::new();
    for (k, &target) in config.train_bin_targets.iter().enumerate() {
        if target == 0 {
            continue;
        }
        let distinct_goal = config.distinct_cap.min(target).max(1);
        let mut found: Vec<Accepted> = Vec::new();
        if k <= 1 {
            let mut all = enumerate_small(sigma, &base_ops, k);
            all.retain(|a| a.max_value <= config.max_train_value && a.max_value <= config.value_cap);
            all.truncate(distinct_goal);
            found = all;
        } else {
            let max_attempts = 300 * distinct_goal + 10_000;
            let mut attempts = 0;
            while found.len() < distinct_goal && attempts < max_attempts {
                attempts += 1;
                if let Some(acc) = pool.try_draw(
                    sigma,
                    &base_ops,
                    k,
                    config.value_cap,
                    |_, maxv| maxv <= config.max_train_value,
                    true,
                ) {
                    pool.seen.insert(acc.tokens.clone());
                    found.push(acc);
                }
            }
        }
        if found.is_empty() {
            return Err(DatasetError::Exhaustion {
                subset: format!("train[{k} ops]"),
                needed: distinct_goal,
                found: 0,
            });
        }
        for acc in &found {
            pool.seen.insert(acc.tokens.clone());
        }
        let count = match config.repeat_policy {
            RepeatPolicy::CeilRepeat => found.len() * target.div_ceil(found.len()),
            RepeatPolicy::ExactTrim => target,
        };
        for i in 0..count {
            let acc = &found[i % found.len()];
            train.push(materialize(sigma, &bank, acc, Subset::Train, true, &mut glyph_rng));
        }
    }
    let train_strings: HashSet<Vec<SymbolId>> =
        train.iter().map(|s| s.symbols.tokens.clone()).collect();

    // ---- test ----
    let (xlo, xhi) = config.extrapolation_ops;
    let mut test: Vec<(Subset, Vec<HintSample>)> = Vec::new();
    for (i, &subset) in Subset::TEST.iter().enumerate() {
        let count = config.test_counts[i];
        let mut samples = Vec::with_capacity(count);
        if subset == Subset::T1 {
            // Uniform resample of train expressions with unseen glyphs.
            for _ in 0..count {
                let idx = glyph_rng.gen_range(0..train.len());
                let acc = Accepted {
                    tokens: train[idx].symbols.tokens.clone(),
                    result: train[idx].result,
                    num_ops: train[idx].num_ops,
                    max_value: train[idx].max_value,
                };
                samples.push(materialize(sigma, &bank, &acc, Subset::T1, false, &mut glyph_rng));
            }
        } else {
            let (ops_range, pred): (Vec<usize>, Box<dyn Fn(usize, Value) -> bool>) = match subset {
                Subset::T2 => (
                    (2..=config.max_train_ops).collect(),
                    Box::new(|x, v| x <= config.max_train_ops && v <= config.max_train_value),
                ),
                Subset::T3 => (
                    (2..=config.max_train_ops).collect(),
                    Box::new(|x, v| x <= config.max_train_ops && v > config.max_train_value),
                ),
                Subset::T4 => (
                    (xlo..=xhi).collect(),
                    Box::new(|x, v| x > config.max_train_ops && v <= config.max_train_value),
                ),
                Subset::T5 => (
                    (xlo..=xhi).collect(),
                    Box::new(|x, v| x > config.max_train_ops && v > config.max_train_value),
                ),
                _ => unreachable!(),
            };
            let per_bin = distribute_total(count, ops_range.len());
            let mut carry = 0usize;
            for (bi, &k) in ops_range.iter().enumerate() {
                let mut want = per_bin[bi] + carry;
                let max_attempts = 400 * want + 10_000;
                let mut attempts = 0;
                while want > 0 && attempts < max_attempts {
                    attempts += 1;
                    if let Some(acc) =
                        pool.try_draw(sigma, &base_ops, k, config.value_cap, &pred, true)
                    {
                        pool.seen.insert(acc.tokens.clone());
                        samples.push(materialize(
                            sigma,
                            &bank,
                            &acc,
                            subset,
                            false,
                            &mut glyph_rng,
                        ));
                        want -= 1;
                    }
                }
                carry = want;
            }
            if carry > 0 {
                return Err(DatasetError::Exhaustion {
                    subset: subset.as_str().to_string(),
                    needed: count,
                    found: count - carry,
                });
            }
        }
        test.push((subset, samples));
    }
    let _ = train_strings;

    Ok(HintDataset {
        sigma: sigma.clone(),
        bank,
        train,
        test,
        config: config.clone(),
    })
}

fn materialize(
    _sigma: &Sigma,
    bank: &GlyphBank,
    acc: &Accepted,
    tag: Subset,
    from_train_pool: bool,
    rng: &mut ChaCha8Rng,
) -> HintSample {
    let glyphs: Vec<Glyph> =
        acc.tokens.iter().map(|&t| bank.draw(from_train_pool, t, rng)).collect();
    HintSample {
        glyphs,
        symbols: SymbolSequence { tokens: acc.tokens.clone(), notation: Notation::Infix },
        result: acc.result,
        num_ops: acc.num_ops,
        max_value: acc.max_value,
        subset_tag: tag,
    }
}

/// Independent split-constraint validator. Recomputes every sample's result,
/// operator count, and max value with the oracle and re-derives its subset
/// tag; checks dedup rules, per-bin distinct caps, pool disjointness, and
/// the bank's separation invariant. Returns the list of violations.
pub fn validate_dataset(ds: &HintDataset) -> Vec<String> {
    let mut issues = Vec::new();
    let sigma = &ds.sigma;
    let cfg = &ds.config;

    let min_d = ds.bank.min_cross_symbol_distance();
    if min_d < 4.0 * ds.bank.noise_sigma {
        issues.push(format!(
            "bank separation {min_d:.4} below 4*sigma = {:.4}",
            4.0 * ds.bank.noise_sigma
        ));
    }

    let train_strings: HashSet<&[SymbolId]> =
        ds.train.iter().map(|s| s.symbols.tokens.as_slice()).collect();
    let train_writers: HashSet<u64> =
        ds.train.iter().flat_map(|s| s.glyphs.iter().map(|g| g.writer_id)).collect();

    let check_sample = |s: &HintSample, where_: String, issues: &mut Vec<String>| {
        if s.glyphs.len() != s.symbols.tokens.len() {
            issues.push(format!("{where_}: glyph/token length mismatch"));
            return;
        }
        for g in &s.glyphs {
            if g.features.len() != ds.bank.feature_dim
                || g.features.iter().any(|v| !v.is_finite())
            {
                issues.push(format!("{where_}: bad glyph features"));
                return;
            }
        }
        match oracle_eval(sigma, &s.symbols) {
            Ok(rec) => {
                if rec.result != s.result
                    || rec.max_intermediate != s.max_value
                    || s.symbols.num_ops(sigma) != s.num_ops
                {
                    issues.push(format!("{where_}: recorded result/ops/max mismatch oracle"));
                }
            }
            Err(e) => issues.push(format!("{where_}: oracle rejects expression ({e})")),
        }
        let expected_tag = if s.subset_tag == Subset::Train || s.subset_tag == Subset::T1 {
            // Membership-based tags.
            if train_strings.contains(s.symbols.tokens.as_slice()) {
                s.subset_tag
            } else {
                Subset::T2 // wrong; will mismatch below
            }
        } else {
            match (s.num_ops <= cfg.max_train_ops, s.max_value <= cfg.max_train_value) {
                (true, true) => Subset::T2,
                (true, false) => Subset::T3,
                (false, true) => Subset::T4,
                (false, false) => Subset::T5,
            }
        };
        if expected_tag != s.subset_tag {
            issues.push(format!(
                "{where_}: subset tag {:?} but constraints recompute to {:?}",
                s.subset_tag, expected_tag
            ));
        }
    };

    for (i, s) in ds.train.iter().enumerate() {
        if s.num_ops > cfg.max_train_ops || s.max_value > cfg.max_train_value {
            issues.push(format!("train[{i}]: outside training regime"));
        }
        check_sample(s, format!("train[{i}]"), &mut issues);
    }

    // Per-op-count distinct cap.
    for k in 0..=cfg.max_train_ops {
        let distinct: HashSet<&[SymbolId]> = ds
            .train
            .iter()
            .filter(|s| s.num_ops == k)
            .map(|s| s.symbols.tokens.as_slice())
            .collect();
        if distinct.len() > cfg.distinct_cap {
            issues.push(format!(
                "train bin {k}: {} distinct expressions exceed cap {}",
                distinct.len(),
                cfg.distinct_cap
            ));
        }
    }

    let mut unseen_strings: HashSet<&[SymbolId]> = HashSet::new();
    for (tag, samples) in &ds.test {
        for (i, s) in samples.iter().enumerate() {
            let where_ = format!("{}[{i}]", tag.as_str());
            if s.subset_tag != *tag {
                issues.push(format!("{where_}: stored under wrong subset"));
            }
            check_sample(s, where_.clone(), &mut issues);
            let in_train = train_strings.contains(s.symbols.tokens.as_slice());
            match tag {
                Subset::T1 => {
                    if !in_train {
                        issues.push(format!("{where_}: T1 expression not in train"));
                    }
                    for g in &s.glyphs {
                        if train_writers.contains(&g.writer_id) {
                            issues.push(format!("{where_}: T1 reuses a train glyph instance"));
                        }
                    }
                }
                Subset::T2 | Subset::T3 | Subset::T4 | Subset::T5 => {
                    if in_train {
                        issues.push(format!("{where_}: expression leaked from train"));
                    }
                    if !unseen_strings.insert(s.symbols.tokens.as_slice()) {
                        issues.push(format!("{where_}: duplicate across test subsets"));
                    }
                    for g in &s.glyphs {
                        if train_writers.contains(&g.writer_id) {
                            issues.push(format!("{where_}: test glyph seen in training"));
                        }
                    }
                }
                Subset::Train => issues.push(format!("{where_}: train tag inside test")),
            }
        }
    }
    issues
}

// ---------------------------------------------------------------------------
// Persistence: line-delimited JSON
// ---------------------------------------------------------------------------

/// Extend a bank with prototypes and pools for newly registered symbols,
/// keeping the cross-symbol separation invariant against existing
/// prototypes. Existing glyphs are untouched.
pub fn extend_bank(
    bank: &mut GlyphBank,
    num_new_symbols: usize,
    rng_seed: u64,
    pool_size_train: usize,
    pool_size_test: usize,
    prototypes_per_symbol: usize,
) -> Result<(), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let f = bank.feature_dim;
    let sigma_noise = bank.noise_sigma;
    let spread = 1.5 * sigma_noise;
    let min_dist = 4.0 * sigma_noise;
    let mut next_writer = bank
        .train_pool
        .iter()
        .chain(bank.test_pool.iter())
        .flatten()
        .map(|g| g.writer_id + 1)
        .max()
        .unwrap_or(0);
    for _ in 0..num_new_symbols {
        let mut accepted = None;
        for _ in 0..BANK_ATTEMPTS {
            let center: Vec<f64> = (0..f).map(|_| gaussian(&mut rng)).collect();
            let protos: Vec<Vec<f64>> = (0..prototypes_per_symbol)
                .map(|_| {
                    (0..f).map(|i| quantize9(center[i] + spread * gaussian(&mut rng))).collect()
                })
                .collect();
            let far_enough = bank.prototypes.iter().all(|others| {
                others.iter().all(|p| protos.iter().all(|q| dist(p, q) >= min_dist))
            });
            if far_enough {
                accepted = Some(protos);
                break;
            }
        }
        let protos = accepted.ok_or_else(|| {
            DatasetError::Feasibility("no room for a new symbol prototype".into())
        })?;
        let mut make_pool = |size: usize, rng: &mut ChaCha8Rng| -> Vec<Glyph> {
            (0..size)
                .map(|_| {
                    let p = &protos[rng.gen_range(0..protos.len())];
                    let features =
                        p.iter().map(|&v| quantize9(v + sigma_noise * gaussian(rng))).collect();
                    let g = Glyph { features, writer_id: next_writer };
                    next_writer += 1;
                    g
                })
                .collect()
        };
        let train = make_pool(pool_size_train, &mut rng);
        let test = make_pool(pool_size_test, &mut rng);
        bank.prototypes.push(protos);
        bank.train_pool.push(train);
        bank.test_pool.push(test);
    }
    Ok(())
}

/// Configuration for a few-shot concept dataset: expressions that contain a
/// designated new symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDataConfig {
    pub rng_seed: u64,
    pub train_count: usize,
    /// Training expressions range from 1 to this many operators.
    pub train_max_ops: usize,
    pub test_per_subset: usize,
    pub max_train_ops: usize,
    pub max_train_value: Value,
    pub extrapolation_ops: (usize, usize),
    pub value_cap: Value,
}

impl Default for ConceptDataConfig {
    fn default() -> Self {
        ConceptDataConfig {
            rng_seed: 0,
            train_count: 100,
            train_max_ops: 5,
            test_per_subset: 100,
            max_train_ops: 10,
            max_train_value: 100,
            extrapolation_ops: (11, 14),
            value_cap: 2_000,
        }
    }
}

/// Generate train and five-subset test samples for expressions containing
/// `concept` (mixed with the base operators). Train glyphs come from the
/// train pool, test glyphs from the test pool.
pub fn generate_concept_samples(
    sigma: &Sigma,
    bank: &GlyphBank,
    concept: SymbolId,
    cfg: &ConceptDataConfig,
) -> Result<(Vec<HintSample>, Vec<(Subset, Vec<HintSample>)>), DatasetError> {
    let mut ops: Vec<SymbolId> =
        ["+", "-", "*", "/"].iter().map(|n| sigma.by_name(n).expect("base op")).collect();
    ops.push(concept);
    let mut pool =
        ExprPool { rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed), seen: HashSet::new() };
    let mut glyph_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0xC0DE));

    let contains_concept =
        |acc: &Accepted| -> bool { acc.tokens.iter().any(|&t| t == concept) };

    // Train: short to long expressions, training regime.
    let mut train = Vec::with_capacity(cfg.train_count);
    let per_len = distribute_total(cfg.train_count, cfg.train_max_ops);
    for (i, &want) in per_len.iter().enumerate() {
        let k = i + 1;
        let mut got = 0;
        let mut attempts = 0;
        while got < want && attempts < 600 * want + 10_000 {
            attempts += 1;
            if let Some(acc) = pool.try_draw(
                sigma,
                &ops,
                k,
                cfg.value_cap,
                |_, v| v <= cfg.max_train_value,
                true,
            ) {
                if !contains_concept(&acc) {
                    continue;
                }
                pool.seen.insert(acc.tokens.clone());
                train.push(materialize(sigma, bank, &acc, Subset::Train, true, &mut glyph_rng));
                got += 1;
            }
        }
        if got < want {
            return Err(DatasetError::Exhaustion {
                subset: format!("fewshot-train[{k} ops]"),
                needed: want,
                found: got,
            });
        }
    }

    // Test subsets, mirroring the base split rules.
    let (xlo, xhi) = cfg.extrapolation_ops;
    let mut test: Vec<(Subset, Vec<HintSample>)> = Vec::new();
    for &subset in &Subset::TEST {
        let mut samples = Vec::with_capacity(cfg.test_per_subset);
        if subset == Subset::T1 {
            for _ in 0..cfg.test_per_subset {
                let idx = glyph_rng.gen_range(0..train.len());
                let acc = Accepted {
                    tokens: train[idx].symbols.tokens.clone(),
                    result: train[idx].result,
                    num_ops: train[idx].num_ops,
                    max_value: train[idx].max_value,
                };
                samples.push(materialize(sigma, bank, &acc, Subset::T1, false, &mut glyph_rng));
            }
        } else {
            let (ops_range, pred): (Vec<usize>, Box<dyn Fn(usize, Value) -> bool>) = match subset
            {
                Subset::T2 => (
                    (2..=cfg.max_train_ops).collect(),
                    Box::new(|x, v| x <= cfg.max_train_ops && v <= cfg.max_train_value),
                ),
                Subset::T3 => (
                    (2..=cfg.max_train_ops).collect(),
                    Box::new(|x, v| x <= cfg.max_train_ops && v > cfg.max_train_value),
                ),
                Subset::T4 => (
                    (xlo..=xhi).collect(),
                    Box::new(|x, v| x > cfg.max_train_ops && v <= cfg.max_train_value),
                ),
                Subset::T5 => (
                    (xlo..=xhi).collect(),
                    Box::new(|x, v| x > cfg.max_train_ops && v > cfg.max_train_value),
                ),
                _ => unreachable!(),
            };
            let per_bin = distribute_total(cfg.test_per_subset, ops_range.len());
            let mut carry = 0usize;
            for (bi, &k) in ops_range.iter().enumerate() {
                let mut want = per_bin[bi] + carry;
                let mut attempts = 0;
                while want > 0 && attempts < 800 * want + 10_000 {
                    attempts += 1;
                    if let Some(acc) =
                        pool.try_draw(sigma, &ops, k, cfg.value_cap, &pred, true)
                    {
                        if !contains_concept(&acc) {
                            continue;
                        }
                        pool.seen.insert(acc.tokens.clone());
                        samples.push(materialize(sigma, bank, &acc, subset, false, &mut glyph_rng));
                        want -= 1;
                    }
                }
                carry = want;
            }
            if carry > 0 {
                return Err(DatasetError::Exhaustion {
                    subset: format!("fewshot-{}", subset.as_str()),
                    needed: cfg.test_per_subset,
                    found: cfg.test_per_subset - carry,
                });
            }
        }
        test.push((subset, samples));
    }
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderDoc {
    version: u32,
    kind: String,
    config: HintConfig,
    sigma: Vec<SymbolInfo>,
    feature_dim: usize,
    noise_sigma: f64,
    prototypes: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct GlyphDoc {
    writer: u64,
    features: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct SampleDoc {
    split: String,
    symbols: Vec<String>,
    result: Value,
    num_ops: usize,
    max_value: Value,
    glyphs: Vec<GlyphDoc>,
}

/// Save as line-delimited JSON: one header line (config, bank prototypes),
/// then one line per sample. Floats are written with 9 significant digits;
/// since glyph features are quantized at creation, save/load round-trips
/// exactly.
pub fn save_dataset(ds: &HintDataset, path: &Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let sigma_infos: Vec<SymbolInfo> = ds.sigma.ids().map(|i| ds.sigma.info(i).clone()).collect();
    let header = HeaderDoc {
        version: 1,
        kind: "arith-dataset".to_string(),
        config: ds.config.clone(),
        sigma: sigma_infos,
        feature_dim: ds.bank.feature_dim,
        noise_sigma: ds.bank.noise_sigma,
        prototypes: ds.bank.prototypes.clone(),
    };
    let mut header_json = serde_json::to_value(&header).expect("header serializes");
    // Re-render prototype floats at fixed precision.
    header_json["prototypes"] = proto_json(&ds.bank.prototypes);
    writeln!(w, "{header_json}")?;
    for s in &ds.train {
        writeln!(w, "{}", sample_line(&ds.sigma, s))?;
    }
    for (_, samples) in &ds.test {
        for s in samples {
            writeln!(w, "{}", sample_line(&ds.sigma, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn proto_json(protos: &[Vec<Vec<f64>>]) -> serde_json::Value {
    // Floats via fmt9, parsed back into JSON numbers so the document stays
    // valid JSON while the text form carries 9 significant digits.
    let text = format!(
        "[{}]",
        protos
            .iter()
            .map(|per_sym| {
                format!(
                    "[{}]",
                    per_sym
                        .iter()
                        .map(|p| format!("[{}]", p.iter().map(|&v| fmt9(v)).collect::<Vec<_>>().join(",")))
                        .collect::<Vec<_>>()
                        .join(",")
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    );
    serde_json::from_str(&text).expect("prototype json parses")
}

fn sample_line(sigma: &Sigma, s: &HintSample) -> String {
    let symbols: Vec<String> =
        s.symbols.tokens.iter().map(|&t| format!("{:?}", sigma.name(t))).collect();
    let glyphs: Vec<String> = s
        .glyphs
        .iter()
        .map(|g| {
            format!(
                "{{\"writer\":{},\"features\":[{}]}}",
                g.writer_id,
                g.features.iter().map(|&v| fmt9(v)).collect::<Vec<_>>().join(",")
            )
        })
        .collect();
    format!(
        "{{\"split\":\"{}\",\"symbols\":[{}],\"result\":{},\"num_ops\":{},\"max_value\":{},\"glyphs\":[{}]}}",
        s.subset_tag.as_str(),
        symbols.join(","),
        s.result,
        s.num_ops,
        s.max_value,
        glyphs.join(",")
    )
}

/// Load a dataset saved by [`save_dataset`]. Schema violations report the
/// offending line number. The loaded bank carries prototypes but empty
/// pools (pools are generation-time state).
pub fn load_dataset(path: &Path) -> Result<HintDataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(DatasetError::Schema { line: 1, msg: "missing header".into() })??;
    let header: HeaderDoc = serde_json::from_str(&header_line)
        .map_err(|e| DatasetError::Schema { line: 1, msg: e.to_string() })?;
    if header.kind != "arith-dataset" {
        return Err(DatasetError::Schema { line: 1, msg: format!("unexpected kind {}", header.kind) });
    }
    let sigma = Sigma::from_infos(header.sigma);
    let bank = GlyphBank {
        feature_dim: header.feature_dim,
        noise_sigma: header.noise_sigma,
        prototypes: header.prototypes,
        train_pool: vec![Vec::new(); sigma.len()],
        test_pool: vec![Vec::new(); sigma.len()],
    };
    let mut train = Vec::new();
    let mut test: Vec<(Subset, Vec<HintSample>)> =
        Subset::TEST.iter().map(|&s| (s, Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SampleDoc = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Schema { line: line_no, msg: e.to_string() })?;
        let subset = Subset::from_str(&doc.split)
            .ok_or(DatasetError::Schema { line: line_no, msg: format!("bad split {}", doc.split) })?;
        let mut tokens = Vec::with_capacity(doc.symbols.len());
        for name in &doc.symbols {
            tokens.push(sigma.by_name(name).ok_or(DatasetError::Schema {
                line: line_no,
                msg: format!("unknown symbol {name}"),
            })?);
        }
        if doc.glyphs.len() != tokens.len() {
            return Err(DatasetError::Schema {
                line: line_no,
                msg: format!("{} glyphs for {} tokens", doc.glyphs.len(), tokens.len()),
            });
        }
        for g in &doc.glyphs {
            if g.features.len() != bank.feature_dim {
                return Err(DatasetError::Schema {
                    line: line_no,
                    msg: format!("feature dim {} != {}", g.features.len(), bank.feature_dim),
                });
            }
        }
        let sample = HintSample {
            glyphs: doc
                .glyphs
                .into_iter()
                .map(|g| Glyph { features: g.features, writer_id: g.writer })
                .collect(),
            symbols: SymbolSequence { tokens, notation: Notation::Infix },
            result: doc.result,
            num_ops: doc.num_ops,
            max_value: doc.max_value,
            subset_tag: subset,
        };
        if subset == Subset::Train {
            train.push(sample);
        } else {
            test.iter_mut().find(|(t, _)| *t == subset).expect("subset slot").1.push(sample);
        }
    }
    Ok(HintDataset { sigma, bank, train, test, config: header.config })
}

impl Sigma {
    pub fn from_infos(infos: Vec<SymbolInfo>) -> Sigma {
        Sigma::from_infos_impl(infos)
    }
}
