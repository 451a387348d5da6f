//! Evaluation, ablation, few-shot concept learning, checkpoints, and report
//! writing.
//!
//! Evaluation is pure inference: deduce every test sample, take the root
//! value as the prediction (no value counts as wrong), and score exact
//! matches per subset.

use crate::dataset::{
    extend_bank, generate_concept_samples, ConceptDataConfig, DatasetError, HintDataset,
    HintSample, Subset,
};
use crate::expr::{ExtSemantics, Sigma, SymbolInfo, Value};
use crate::learner::{
    deduce, init_parallelism, learn_epoch, train_seeds, select_best_by_train_accuracy,
    CompoundTree, EpochMetrics, GtInjection, LearnError, Models, ParseCache, TrainConfig,
    TrainRun,
};
use crate::semantics::{parse_program, print_program_named, ExampleSet, Limits, Term};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: Subset,
    pub correct: usize,
    pub total: usize,
}

impl SubsetResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Per-subset exact-match accuracies plus per-concept IO-consistency and the
/// per-epoch training statistics of the run that produced the models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: String,
    pub seed: u64,
    pub config_hash: String,
    pub subsets: Vec<SubsetResult>,
    pub concept_consistency: BTreeMap<String, f64>,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsReport {
    pub fn overall(&self) -> f64 {
        let total: usize = self.subsets.iter().map(|s| s.total).sum();
        let correct: usize = self.subsets.iter().map(|s| s.correct).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    pub fn accuracy(&self, subset: Subset) -> f64 {
        self.subsets
            .iter()
            .find(|s| s.subset == subset)
            .map(SubsetResult::accuracy)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> usize {
        self.subsets.iter().map(|s| s.total).sum()
    }
}

/// Short stable hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Pure-inference evaluation over the dataset's five test subsets.
pub fn evaluate(models: &Models, dataset: &HintDataset) -> MetricsReport {
    init_parallelism();
    let cache = ParseCache::new();
    let mut subsets = Vec::new();
    for (tag, samples) in &dataset.test {
        let correct = samples
            .par_iter()
            .map(|s| usize::from(predict(models, s, &cache) == Some(s.result)))
            .sum();
        subsets.push(SubsetResult { subset: *tag, correct, total: samples.len() });
    }
    MetricsReport {
        setting: models.gt.label(),
        seed: 0,
        config_hash: config_hash(&dataset.config),
        subsets,
        concept_consistency: concept_report(models),
        epochs: Vec::new(),
    }
}

/// Prediction for one sample: the deduced root value.
pub fn predict(models: &Models, sample: &HintSample, cache: &ParseCache) -> Option<Value> {
    deduce(models, sample, Some(cache), None).ok().and_then(|ct| ct.root_value())
}

fn concept_report(models: &Models) -> BTreeMap<String, f64> {
    if models.gt.semantics {
        return models.sigma.ids().map(|id| (models.sigma.name(id).to_string(), 1.0)).collect();
    }
    models
        .semantics
        .consistency_report()
        .into_iter()
        .map(|(id, v)| (models.sigma.name(id).to_string(), v))
        .collect()
}

/// The seven published ablation settings.
pub fn ablation_grid() -> Vec<GtInjection> {
    vec![
        GtInjection { perception: false, syntax: false, semantics: false },
        GtInjection { perception: false, syntax: false, semantics: true },
        GtInjection { perception: false, syntax: true, semantics: false },
        GtInjection { perception: true, syntax: false, semantics: false },
        GtInjection { perception: true, syntax: true, semantics: false },
        GtInjection { perception: true, syntax: false, semantics: true },
        GtInjection { perception: false, syntax: true, semantics: true },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub runs: Vec<MetricsReport>,
    /// Index of the seed with the highest final training accuracy.
    pub best: usize,
}

impl AblationRow {
    pub fn best_report(&self) -> &MetricsReport {
        &self.runs[self.best]
    }
}

/// Train and evaluate one injection setting across seeds; the returned row
/// carries every seed's report plus the best-by-train-accuracy selection.
pub fn run_setting(
    dataset: &HintDataset,
    base_cfg: &TrainConfig,
    gt: GtInjection,
    seeds: &[u64],
) -> Result<AblationRow, EvalError> {
    let mut cfg = base_cfg.clone();
    cfg.gt = gt;
    let runs: Vec<TrainRun> = train_seeds(dataset, &cfg, seeds)?;
    let best_run =
        select_best_by_train_accuracy(&runs).ok_or_else(|| EvalError::Config("no runs".into()))?;
    let best_seed = best_run.seed;
    let mut reports = Vec::with_capacity(runs.len());
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        let mut report = evaluate(&run.models, dataset);
        report.seed = run.seed;
        report.setting = gt.label();
        report.epochs = run.metrics.clone();
        if run.seed == best_seed {
            best = i;
        }
        reports.push(report);
    }
    Ok(AblationRow { setting: gt.label(), runs: reports, best })
}

/// The full ablation: every grid setting, `seeds` runs each.
pub fn run_ablation(
    dataset: &HintDataset,
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, EvalError> {
    ablation_grid()
        .into_iter()
        .map(|gt| run_setting(dataset, base_cfg, gt, seeds))
        .collect()
}

// ---------------------------------------------------------------------------
// Few-shot concept learning
// ---------------------------------------------------------------------------

/// A new concept to acquire from a handful of examples: fresh glyph
/// prototypes, a declared precedence, and hidden reference semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub name: String,
    pub precedence: u8,
    pub semantics: ExtSemantics,
    pub data: ConceptDataConfig,
    pub fine_tune_epochs: usize,
    /// Fraction of the new training set's size replayed from base training
    /// samples to protect the parser embeddings.
    pub replay_fraction: f64,
}

impl FewShotSpec {
    pub fn new(name: &str, precedence: u8, semantics: ExtSemantics) -> Self {
        FewShotSpec {
            name: name.to_string(),
            precedence,
            semantics,
            data: ConceptDataConfig::default(),
            fine_tune_epochs: 15,
            replay_fraction: 0.1,
        }
    }
}

/// Extend the vocabulary with a new concept, fine-tune on `train_count`
/// weakly-supervised examples (plus a small base replay), and evaluate on a
/// five-subset test set of expressions containing the concept.
pub fn run_fewshot(
    models: &Models,
    base: &HintDataset,
    spec: &FewShotSpec,
    rng_seed: u64,
) -> Result<(Models, MetricsReport), EvalError> {
    if models.sigma.by_name(&spec.name).is_some() {
        return Err(EvalError::Config(format!("symbol {:?} already registered", spec.name)));
    }
    init_parallelism();
    let mut models = models.clone();
    let mut sigma = models.sigma.clone();
    let new_id = sigma
        .add_extension(&spec.name, spec.precedence, spec.semantics)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let mut bank = base.bank.clone();
    extend_bank(
        &mut bank,
        1,
        rng_seed.wrapping_add(0xF5),
        base.config.bank.pool_size_train.max(100),
        base.config.bank.pool_size_test.max(100),
        base.config.bank.prototypes_per_symbol,
    )?;
    models.sigma = sigma.clone();
    models.perception.extend_classes(sigma.len(), rng_seed.wrapping_add(1));
    models.parser.extend_sigma(sigma.len(), rng_seed.wrapping_add(2));
    models.semantics.register_extension(&sigma, new_id);

    let mut data_cfg = spec.data.clone();
    data_cfg.rng_seed = rng_seed;
    let (mut train, test) = generate_concept_samples(&sigma, &bank, new_id, &data_cfg)?;

    // Replay a slice of base training data to prevent forgetting.
    let replay = ((train.len() as f64 * spec.replay_fraction).round() as usize).max(1);
    for (i, s) in base.train.iter().enumerate() {
        if train.len() >= data_cfg.train_count + replay {
            break;
        }
        if i % (base.train.len() / replay).max(1) == 0 {
            train.push(s.clone());
        }
    }

    let mut cfg = TrainConfig::new(rng_seed);
    cfg.gt = models.gt;
    cfg.epochs = spec.fine_tune_epochs;
    cfg.curriculum = vec![(0, None)];
    let mut cache = ParseCache::new();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let refs: Vec<&HintSample> = train.iter().collect();
        let stats = learn_epoch(&mut models, &refs, &mut cache, &cfg);
        metrics.push(EpochMetrics { epoch, max_len: None, stats });
    }

    let eval_ds = HintDataset {
        sigma: sigma.clone(),
        bank,
        train: train.clone(),
        test,
        config: base.config.clone(),
    };
    let mut report = evaluate(&models, &eval_ds);
    report.seed = rng_seed;
    report.setting = format!("fewshot-{}", spec.name);
    report.epochs = metrics;
    Ok((models, report))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    kind: String,
    sigma: Vec<SymbolInfo>,
    gt: GtInjection,
    limits: Limits,
    perception: crate::perception::PerceptionModel,
    parser: crate::parser::ParserModel,
    /// Programs in canonical S-expression form, keyed by concept name.
    programs: BTreeMap<String, ProgramDoc>,
    /// Example buffers keyed by concept name.
    examples: BTreeMap<String, Vec<(Vec<Value>, Value, u64)>>,
    library_threshold: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgramDoc {
    arity: usize,
    term: Option<String>,
    io_consistency: f64,
}

/// Save the model bundle. Programs are stored in their canonical
/// S-expression text form.
pub fn save_checkpoint(models: &Models, path: &Path) -> Result<(), EvalError> {
    let sigma = &models.sigma;
    let name_of = |id: crate::expr::SymbolId| sigma.name(id).to_string();
    let mut programs = BTreeMap::new();
    let mut examples = BTreeMap::new();
    for (&id, prog) in &models.semantics.programs {
        programs.insert(
            sigma.name(id).to_string(),
            ProgramDoc {
                arity: prog.arity,
                term: prog.term.as_ref().map(|t| print_program_named(t, &name_of)),
                io_consistency: prog.io_consistency,
            },
        );
    }
    for (&id, ex) in &models.semantics.examples {
        let rows: Vec<(Vec<Value>, Value, u64)> =
            ex.pairs.iter().map(|((i, o), c)| (i.clone(), *o, *c)).collect();
        examples.insert(sigma.name(id).to_string(), rows);
    }
    let doc = CheckpointDoc {
        version: 1,
        kind: "arith-checkpoint".to_string(),
        sigma: sigma.ids().map(|i| sigma.info(i).clone()).collect(),
        gt: models.gt,
        limits: models.limits,
        perception: models.perception.clone(),
        parser: models.parser.clone(),
        programs,
        examples,
        library_threshold: models.semantics.library_threshold,
    };
    let text = serde_json::to_string(&doc).expect("checkpoint serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Models, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc =
        serde_json::from_str(&text).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
    if doc.kind != "arith-checkpoint" {
        return Err(EvalError::Checkpoint(format!("unexpected kind {}", doc.kind)));
    }
    let sigma = Sigma::from_infos(doc.sigma);
    let mut semantics = crate::semantics::ConceptSemantics::new(&sigma);
    semantics.library_threshold = doc.library_threshold;
    let resolve = |name: &str| sigma.by_name(name);
    for (name, prog) in &doc.programs {
        let id = sigma
            .by_name(name)
            .ok_or_else(|| EvalError::Checkpoint(format!("unknown concept {name}")))?;
        let term: Option<Term> = match &prog.term {
            None => None,
            Some(text) => Some(
                parse_program(text, &resolve)
                    .map_err(|e| EvalError::Checkpoint(format!("program {name}: {e}")))?,
            ),
        };
        semantics.programs.insert(
            id,
            crate::semantics::ConceptProgram {
                arity: prog.arity,
                term,
                io_consistency: prog.io_consistency,
            },
        );
    }
    for (name, rows) in &doc.examples {
        let id = sigma
            .by_name(name)
            .ok_or_else(|| EvalError::Checkpoint(format!("unknown concept {name}")))?;
        let mut ex = ExampleSet::default();
        for (inputs, output, count) in rows {
            ex.add(inputs.clone(), *output, *count);
        }
        semantics.examples.insert(id, ex);
    }
    semantics.refresh_library(&sigma);
    Ok(Models {
        sigma,
        perception: doc.perception,
        parser: doc.parser,
        semantics,
        gt: doc.gt,
        limits: doc.limits,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// CSV summary header: one row per (setting, seed), fixed formatting so
/// identical inputs produce byte-identical files.
pub const CSV_HEADER: &str = "setting,seed,overall,t1,t2,t3,t4,t5";

pub fn csv_row(report: &MetricsReport) -> String {
    format!(
        "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
        report.setting,
        report.seed,
        report.overall(),
        report.accuracy(Subset::T1),
        report.accuracy(Subset::T2),
        report.accuracy(Subset::T3),
        report.accuracy(Subset::T4),
        report.accuracy(Subset::T5),
    )
}

pub fn write_csv(reports: &[&MetricsReport], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Line-delimited JSON: one report per line (epoch logs included).
pub fn write_reports_jsonl(reports: &[&MetricsReport], path: &Path) -> Result<(), EvalError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in reports {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Render a compound tree with per-node (symbol, value) pairs, for sample
/// inspection.
pub fn render_compound_tree(sigma: &Sigma, ct: &CompoundTree) -> String {
    let mut out = String::new();
    render_node(sigma, ct, ct.root, 0, &mut out);
    out
}

fn render_node(sigma: &Sigma, ct: &CompoundTree, node: usize, depth: usize, out: &mut String) {
    let n = &ct.nodes[node];
    let value = n.value.map(|v| v.to_string()).unwrap_or_else(|| "?".to_string());
    out.push_str(&"  ".repeat(depth));
    out.push_str(&format!("[{}] {} = {}\n", n.pos, sigma.name(n.symbol), value));
    for c in ct.children(node) {
        render_node(sigma, ct, c, depth + 1, out);
    }
}
