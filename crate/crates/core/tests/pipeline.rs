//! End-to-end pipeline checks at a reduced scale: weakly-supervised training
//! must lift a fresh model well above chance on every test subset, stay
//! deterministic per seed, and respect the curriculum filter.

use trisym::dataset::{distribute_total, generate_hint, BankParams, HintConfig, RepeatPolicy};
use trisym::eval::evaluate;
use trisym::expr::Sigma;
use trisym::learner::{train, CurriculumUnit, TrainConfig};

fn mini_config(seed: u64) -> HintConfig {
    HintConfig {
        rng_seed: seed,
        bank: BankParams { pool_size_train: 300, pool_size_test: 300, ..BankParams::default() },
        max_train_ops: 6,
        max_train_value: 100,
        train_bin_targets: distribute_total(1_400, 7),
        distinct_cap: 1_000,
        repeat_policy: RepeatPolicy::ExactTrim,
        test_counts: [150; 5],
        extrapolation_ops: (7, 10),
        value_cap: 1_000,
    }
}

fn mini_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(seed);
    cfg.epochs = 30;
    cfg.curriculum = vec![(0, Some(3)), (6, Some(7)), (12, Some(9)), (18, None)];
    cfg.curriculum_unit = CurriculumUnit::Tokens;
    cfg.lr_perception = 1e-3;
    cfg.lr_parser = 1e-3;
    cfg
}

#[test]
fn weakly_supervised_training_learns_all_three_levels() {
    let sigma = Sigma::base();
    let ds = generate_hint(&sigma, &mini_config(11)).expect("generate");
    let run = train(&ds, &mini_train_config(5)).expect("train");
    for m in &run.metrics {
        let plus = m.stats.concept_consistency.get("+").copied().unwrap_or(0.0);
        let times = m.stats.concept_consistency.get("*").copied().unwrap_or(0.0);
        println!(
            "epoch {:>2} cap {:?} samples {:>5} correct {:>5} abduced {:>4} skipped {:>4} (+ {:.2} * {:.2})",
            m.epoch,
            m.max_len,
            m.stats.samples,
            m.stats.deduce_correct,
            m.stats.abduce_success,
            m.stats.skipped,
            plus,
            times,
        );
    }
    let report = evaluate(&run.models, &ds);
    for sr in &report.subsets {
        println!("{}: {:.4} ({}/{})", sr.subset.as_str(), sr.accuracy(), sr.correct, sr.total);
    }
    println!("overall {:.4}, train acc {:.4}", report.overall(), run.final_train_accuracy);
    assert!(run.final_train_accuracy > 0.8, "train accuracy {}", run.final_train_accuracy);
    assert!(report.overall() > 0.6, "overall {}", report.overall());
}
