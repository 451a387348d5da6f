//! Experiment driver.
//!
//! Subcommands: `generate` (dataset files), `train` (checkpoints + metrics),
//! `eval` (checkpoint + dataset -> report), `ablate` (ground-truth injection
//! grid), `fewshot` (new-concept learning), `inspect` (pretty-print one
//! sample's solution tree and abduction trace).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use trisym::dataset::{
    distribute_total, generate_hint, load_dataset, save_dataset, validate_dataset, HintConfig,
    RepeatPolicy, Subset,
};
use trisym::eval::{
    ablation_grid, config_hash, evaluate, load_checkpoint, render_compound_tree, run_fewshot,
    run_setting, save_checkpoint, write_csv, write_reports_jsonl, FewShotSpec, MetricsReport,
};
use trisym::expr::{ExtSemantics, Sigma};
use trisym::learner::{
    abduce, deduce, percept_log_matrix, select_best_by_train_accuracy, train_seeds, AbduceConfig,
    CurriculumUnit, GtInjection, TrainConfig,
};

#[derive(Parser)]
#[command(name = "trisym", about = "Weakly-supervised neural-symbolic arithmetic learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as line-delimited JSON.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train models on a dataset; writes checkpoints and per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `generate`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's five test subsets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the ground-truth-injection ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Few-shot learning of a new concept on top of a trained checkpoint.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: alpha (max), beta (min), gamma (floor mean), phi (xy-x-y).
        #[arg(long, default_value = "alpha")]
        concept: String,
    },
    /// Pretty-print one sample's deduction and its abduced revision.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subset to inspect (train, T1..T5).
        #[arg(long, default_value = "T1")]
        subset: String,
        /// Sample index within the subset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Plain `key = value` config file.
#[derive(Default, Clone)]
struct KvConfig(BTreeMap<String, String>);

impl KvConfig {
    fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(KvConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("config line {}: expected `key = value`", i + 1));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("config key {key}: bad value {v:?}")),
        }
    }

    fn get_str(&self, key: &str, default: &str) -> String {
        self.0.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Recursive program evaluation wants room; run the driver on a thread
    // with a deep stack.
    let handle = std::thread::Builder::new()
        .stack_size(256 * 1024 * 1024)
        .spawn(move || run(cli))
        .expect("spawn driver thread");
    match handle.join() {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("error: driver thread panicked");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Generate { common } => generate_cmd(&common),
        Command::Train { common, dataset } => train_cmd(&common, &dataset),
        Command::Eval { common, dataset, checkpoint } => eval_cmd(&common, &dataset, &checkpoint),
        Command::Ablate { common, dataset } => ablate_cmd(&common, &dataset),
        Command::Fewshot { common, dataset, checkpoint, concept } => {
            fewshot_cmd(&common, &dataset, &checkpoint, &concept)
        }
        Command::Inspect { common, dataset, checkpoint, subset, index } => {
            inspect_cmd(&common, &dataset, &checkpoint, &subset, index)
        }
    }
}

fn ensure_out(common: &Common) -> Result<(), String> {
    std::fs::create_dir_all(&common.out_dir)
        .map_err(|e| format!("cannot create {}: {e}", common.out_dir.display()))
}

fn hint_config(kv: &KvConfig, seed: u64) -> Result<HintConfig, String> {
    let preset = kv.get_str("preset", "desk");
    let mut cfg = match preset.as_str() {
        "desk" => HintConfig::desk(seed),
        "full" => HintConfig::full(seed),
        other => return Err(format!("unknown preset {other:?} (expected desk or full)")),
    };
    cfg.rng_seed = seed;
    if let Some(total) = kv.0.get("train_total") {
        let total: usize = total.parse().map_err(|_| "bad train_total".to_string())?;
        cfg.train_bin_targets = distribute_total(total, cfg.max_train_ops + 1);
        cfg.repeat_policy = RepeatPolicy::ExactTrim;
    }
    if let Some(per) = kv.0.get("test_per_subset") {
        let per: usize = per.parse().map_err(|_| "bad test_per_subset".to_string())?;
        cfg.test_counts = [per; 5];
    }
    cfg.value_cap = kv.get("value_cap", cfg.value_cap)?;
    cfg.bank.noise_sigma = kv.get("noise_sigma", cfg.bank.noise_sigma)?;
    cfg.bank.feature_dim = kv.get("feature_dim", cfg.bank.feature_dim)?;
    Ok(cfg)
}

fn train_config(kv: &KvConfig, seed: u64) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::new(seed);
    cfg.epochs = kv.get("epochs", cfg.epochs)?;
    cfg.lr_perception = kv.get("lr_perception", cfg.lr_perception)?;
    cfg.lr_parser = kv.get("lr_parser", cfg.lr_parser)?;
    cfg.batch_size = kv.get("batch_size", cfg.batch_size)?;
    cfg.gt = GtInjection {
        perception: kv.get("gt_perception", false)?,
        syntax: kv.get("gt_syntax", false)?,
        semantics: kv.get("gt_semantics", false)?,
    };
    cfg.curriculum_unit = match kv.get_str("curriculum_unit", "tokens").as_str() {
        "tokens" => CurriculumUnit::Tokens,
        "ops" => CurriculumUnit::Ops,
        other => return Err(format!("unknown curriculum_unit {other:?}")),
    };
    cfg.deduce_sampling = kv.get("deduce_sampling", false)?;
    cfg.abduce = AbduceConfig {
        max_pops: kv.get("abduce_max_pops", cfg.abduce.max_pops)?,
        queue_capacity: kv.get("abduce_queue_capacity", cfg.abduce.queue_capacity)?,
        ..cfg.abduce
    };
    Ok(cfg)
}

fn seeds_from(kv: &KvConfig, seed: u64) -> Result<Vec<u64>, String> {
    let n: usize = kv.get("num_seeds", 1usize)?;
    Ok((0..n as u64).map(|i| seed + i).collect())
}

fn generate_cmd(common: &Common) -> Result<(), String> {
    ensure_out(common)?;
    let kv = KvConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(kv.get("seed", 0u64)?);
    let cfg = hint_config(&kv, seed)?;
    let sigma = Sigma::base();
    let ds = generate_hint(&sigma, &cfg).map_err(|e| e.to_string())?;
    let issues = validate_dataset(&ds);
    if !issues.is_empty() {
        return Err(format!("generated dataset failed validation: {issues:?}"));
    }
    let path = common.out_dir.join("dataset.jsonl");
    save_dataset(&ds, &path).map_err(|e| e.to_string())?;
    println!(
        "dataset: {} train, {} test ({}), validator pass",
        ds.train.len(),
        ds.test_len(),
        ds.test
            .iter()
            .map(|(t, v)| format!("{} {}", t.as_str(), v.len()))
            .collect::<Vec<_>>()
            .join(", "),
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn train_cmd(common: &Common, dataset: &Path) -> Result<(), String> {
    ensure_out(common)?;
    let kv = KvConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(kv.get("seed", 0u64)?);
    let ds = load_dataset(dataset).map_err(|e| e.to_string())?;
    let cfg = train_config(&kv, seed)?;
    let seeds = seeds_from(&kv, seed)?;
    let runs = train_seeds(&ds, &cfg, &seeds).map_err(|e| e.to_string())?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for run in &runs {
        let ckpt = common.out_dir.join(format!("checkpoint-seed{}.json", run.seed));
        save_checkpoint(&run.models, &ckpt).map_err(|e| e.to_string())?;
        let mut report = evaluate(&run.models, &ds);
        report.seed = run.seed;
        report.epochs = run.metrics.clone();
        println!(
            "seed {}: train accuracy {:.4}, overall {:.4}",
            run.seed,
            run.final_train_accuracy,
            report.overall()
        );
        reports.push(report);
    }
    if let Some(best) = select_best_by_train_accuracy(&runs) {
        println!("best by train accuracy: seed {}", best.seed);
        let ckpt = common.out_dir.join("checkpoint-best.json");
        save_checkpoint(&best.models, &ckpt).map_err(|e| e.to_string())?;
    }
    let refs: Vec<&MetricsReport> = reports.iter().collect();
    write_reports_jsonl(&refs, &common.out_dir.join("train-reports.jsonl"))
        .map_err(|e| e.to_string())?;
    write_csv(&refs, &common.out_dir.join("train-summary.csv")).map_err(|e| e.to_string())?;
    Ok(())
}

fn eval_cmd(common: &Common, dataset: &Path, checkpoint: &Path) -> Result<(), String> {
    ensure_out(common)?;
    let ds = load_dataset(dataset).map_err(|e| e.to_string())?;
    let models = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    if models.sigma != ds.sigma {
        return Err(format!(
            "checkpoint vocabulary ({} symbols) does not match dataset ({} symbols)",
            models.sigma.len(),
            ds.sigma.len()
        ));
    }
    let report = evaluate(&models, &ds);
    println!("config {}", config_hash(&ds.config));
    println!(
        "overall {:.4} | T1 {:.4} T2 {:.4} T3 {:.4} T4 {:.4} T5 {:.4}",
        report.overall(),
        report.accuracy(Subset::T1),
        report.accuracy(Subset::T2),
        report.accuracy(Subset::T3),
        report.accuracy(Subset::T4),
        report.accuracy(Subset::T5),
    );
    let refs = [&report];
    write_reports_jsonl(&refs, &common.out_dir.join("eval-report.jsonl"))
        .map_err(|e| e.to_string())?;
    write_csv(&refs, &common.out_dir.join("eval-summary.csv")).map_err(|e| e.to_string())?;
    Ok(())
}

fn ablate_cmd(common: &Common, dataset: &Path) -> Result<(), String> {
    ensure_out(common)?;
    let kv = KvConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(kv.get("seed", 0u64)?);
    let ds = load_dataset(dataset).map_err(|e| e.to_string())?;
    let cfg = train_config(&kv, seed)?;
    let seeds = seeds_from(&kv, seed)?;
    let mut all_reports: Vec<MetricsReport> = Vec::new();
    let mut best_rows: Vec<MetricsReport> = Vec::new();
    for gt in ablation_grid() {
        let row = run_setting(&ds, &cfg, gt, &seeds).map_err(|e| e.to_string())?;
        println!(
            "{}: best overall {:.4} (seed {})",
            row.setting,
            row.best_report().overall(),
            row.best_report().seed
        );
        best_rows.push(row.best_report().clone());
        all_reports.extend(row.runs);
    }
    let refs: Vec<&MetricsReport> = all_reports.iter().collect();
    write_reports_jsonl(&refs, &common.out_dir.join("ablation-reports.jsonl"))
        .map_err(|e| e.to_string())?;
    // The summary mirrors the published table layout: one row per setting
    // (best-by-train-accuracy seed).
    let best_refs: Vec<&MetricsReport> = best_rows.iter().collect();
    write_csv(&best_refs, &common.out_dir.join("ablation-summary.csv"))
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn fewshot_cmd(
    common: &Common,
    dataset: &Path,
    checkpoint: &Path,
    concept: &str,
) -> Result<(), String> {
    ensure_out(common)?;
    let kv = KvConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(kv.get("seed", 0u64)?);
    let ds = load_dataset(dataset).map_err(|e| e.to_string())?;
    let models = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    let spec = match concept {
        "alpha" => FewShotSpec::new("alpha", 1, ExtSemantics::Max),
        "beta" => FewShotSpec::new("beta", 1, ExtSemantics::Min),
        "gamma" => FewShotSpec::new("gamma", 2, ExtSemantics::AvgFloor),
        "phi" => FewShotSpec::new("phi", 2, ExtSemantics::MulMinusSum),
        other => return Err(format!("unknown concept {other:?}")),
    };
    let (models, report) = run_fewshot(&models, &ds, &spec, seed).map_err(|e| e.to_string())?;
    println!(
        "{}: overall {:.4} | T1 {:.4} T2 {:.4} T3 {:.4} T4 {:.4} T5 {:.4}",
        report.setting,
        report.overall(),
        report.accuracy(Subset::T1),
        report.accuracy(Subset::T2),
        report.accuracy(Subset::T3),
        report.accuracy(Subset::T4),
        report.accuracy(Subset::T5),
    );
    save_checkpoint(&models, &common.out_dir.join(format!("checkpoint-{concept}.json")))
        .map_err(|e| e.to_string())?;
    let refs = [&report];
    write_reports_jsonl(&refs, &common.out_dir.join(format!("fewshot-{concept}.jsonl")))
        .map_err(|e| e.to_string())?;
    write_csv(&refs, &common.out_dir.join(format!("fewshot-{concept}.csv")))
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn inspect_cmd(
    _common: &Common,
    dataset: &Path,
    checkpoint: &Path,
    subset: &str,
    index: usize,
) -> Result<(), String> {
    let ds = load_dataset(dataset).map_err(|e| e.to_string())?;
    let models = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    let subset = Subset::from_str(subset).ok_or_else(|| format!("unknown subset {subset:?}"))?;
    let samples = ds.subset(subset);
    let sample = samples
        .get(index)
        .ok_or_else(|| format!("index {index} out of range ({} samples)", samples.len()))?;
    println!("expression (hidden): {}", ds.sigma.render(&sample.symbols.tokens));
    println!("ground-truth result: {}", sample.result);
    let ct = deduce(&models, sample, None, None).map_err(|e| e.to_string())?;
    println!("-- greedy deduction (predicted {:?}) --", ct.root_value());
    print!("{}", render_compound_tree(&ds.sigma, &ct));
    if ct.root_value() != Some(sample.result) {
        let percept = percept_log_matrix(&models, sample);
        match abduce(&models, &ct, sample.result, percept.as_deref(), &AbduceConfig::default()) {
            Some(fixed) => {
                println!("-- abduced revision --");
                print!("{}", render_compound_tree(&ds.sigma, &fixed));
                for (i, (a, b)) in ct.nodes.iter().zip(fixed.nodes.iter()).enumerate() {
                    if a.symbol != b.symbol {
                        println!(
                            "perception fix at {}: {} -> {}",
                            i,
                            ds.sigma.name(a.symbol),
                            ds.sigma.name(b.symbol)
                        );
                    }
                    if a.head != b.head {
                        println!("arc fix at {}: head {:?} -> {:?}", i, a.head, b.head);
                    }
                }
                for e in &fixed.sem_edits {
                    println!(
                        "semantics example: {}({:?}) -> {}",
                        ds.sigma.name(e.concept),
                        e.inputs,
                        e.output
                    );
                }
            }
            None => println!("abduction failed within budget"),
        }
    }
    Ok(())
}
