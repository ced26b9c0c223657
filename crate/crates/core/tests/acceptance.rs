//! Acceptance suite: one test per stated criterion, each printing a
//! single PASS/FAIL line (run with `--nocapture` to see lines for
//! passing tests too).
//!
//! Criteria 1-4 and 11 are oracle-equivalence checks at fixed case
//! counts; criteria 5-9 are directional training claims averaged over
//! five seeds; criterion 10 is byte-level determinism across thread
//! counts.

use fedrec_core::attacks::AttackStrategy;
use fedrec_core::dataset::{
    build_client_registry, leave_one_out_split, synthetic_clustered, Role,
};
use fedrec_core::defenses::AggregationRule;
use fedrec_core::detection::{train_detector, DetectorDataset, LabeledFeature};
use fedrec_core::eval::{hardness_profile, metrics_csv, MetricsCsvRow, Polarity};
use fedrec_core::fedcore::{run_simulation, run_training, RunOptions, SimulationConfig};
use fedrec_core::oracles::{self, CheckReport};
use fedrec_core::{ClientRegistry, SyntheticSpec};

const ORACLE_SEED: u64 = 20260814;
const RUN_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

/// The pinned desk-scale dataset for the learning-sanity criterion.
fn desk_scale_spec() -> SyntheticSpec {
    SyntheticSpec {
        users: 1000,
        items: 500,
        ..SyntheticSpec::default()
    }
}

/// Dataset for the attack-effect criteria: same desk scale, with the
/// popularity skew real implicit-feedback logs have. Uniform item
/// popularity makes hard-sampling attacks structurally self-cancelling
/// (the suppressed head items are every benign user's strongest learned
/// competitors as much as their targets), so the skew is what lets the
/// directional claims reproduce.
fn attack_scale_spec() -> SyntheticSpec {
    SyntheticSpec {
        users: 1000,
        items: 500,
        popularity: 1.0,
        ..SyntheticSpec::default()
    }
}

/// Training shape shared by criteria 6-9.
fn attack_scale_config(seed: u64, attack: AttackStrategy, defense: AggregationRule) -> SimulationConfig {
    SimulationConfig {
        seed,
        dim: 16,
        max_epochs: 20,
        byzantine_ratio: 0.05,
        attack,
        defense,
        ..SimulationConfig::default()
    }
}

/// Best test HR@5 for one (attack, defense) cell at one seed.
fn attack_cell_hr(attack: AttackStrategy, defense: AggregationRule, seed: u64) -> f64 {
    let spec = attack_scale_spec();
    let config = attack_scale_config(seed, attack, defense);
    let (registry, num_items) = registry_for(&spec, config.byzantine_ratio, config.k_positives, seed);
    run_training(&config, &registry, num_items).unwrap().best().hr
}

fn mean_hr(attack: AttackStrategy, defense: AggregationRule) -> f64 {
    let total: f64 = RUN_SEEDS
        .iter()
        .map(|&s| attack_cell_hr(attack, defense, s))
        .sum();
    total / RUN_SEEDS.len() as f64
}

fn registry_for(
    spec: &SyntheticSpec,
    byzantine_ratio: f64,
    k_positives: usize,
    seed: u64,
) -> (ClientRegistry, usize) {
    let log = synthetic_clustered(spec, seed).unwrap();
    let splits = leave_one_out_split(&log).unwrap();
    let registry = build_client_registry(&splits, byzantine_ratio, k_positives, seed).unwrap();
    (registry, log.item_count)
}

fn report(n: u32, name: &str, pass: bool) {
    println!(
        "criterion {n:02} {name}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn oracle_criterion(n: u32, name: &str, r: &CheckReport, time_limit: f64) {
    let pass = r.passed() && r.elapsed_secs < time_limit;
    report(n, name, pass);
    assert!(
        pass,
        "{} (time limit {time_limit}s)",
        r.line()
    );
}

#[test]
fn criterion_01_gradient_correctness() {
    let r = oracles::check_gradients(100, ORACLE_SEED).unwrap();
    oracle_criterion(1, "gradient correctness", &r, 10.0);
}

#[test]
fn criterion_02_aggregator_oracle_equivalence() {
    let r = oracles::check_aggregators(500, ORACLE_SEED).unwrap();
    oracle_criterion(2, "aggregator oracle equivalence", &r, 30.0);
}

#[test]
fn criterion_03_retrieval_oracle_equivalence() {
    let r = oracles::check_retrieval(1000, ORACLE_SEED).unwrap();
    oracle_criterion(3, "retrieval oracle equivalence", &r, 10.0);
}

#[test]
fn criterion_04_metric_oracle() {
    let r = oracles::check_metrics().unwrap();
    oracle_criterion(4, "metric oracle", &r, 10.0);
}

#[test]
fn criterion_05_learning_sanity() {
    let started = std::time::Instant::now();
    let spec = desk_scale_spec();
    let mut hrs = Vec::new();
    for seed in RUN_SEEDS {
        let (registry, num_items) = registry_for(&spec, 0.0, 4, seed);
        let config = SimulationConfig {
            seed,
            max_epochs: 20,
            ..SimulationConfig::default()
        };
        let timeline = run_training(&config, &registry, num_items).unwrap();
        hrs.push((seed, timeline.best().hr, num_items));
    }
    let num_items = hrs[0].2;
    let mean_hr: f64 = hrs.iter().map(|&(_, hr, _)| hr).sum::<f64>() / hrs.len() as f64;
    let baseline = 5.0 / num_items as f64;
    let elapsed = started.elapsed().as_secs_f64();
    let pass = mean_hr >= 3.0 * baseline && elapsed < 600.0;
    report(5, "learning sanity", pass);
    assert!(
        pass,
        "mean HR@5 {mean_hr:.4} vs floor {:.4} (3x random {baseline:.4}); \
         per-seed {:?}; {elapsed:.0}s (limit 600)",
        3.0 * baseline,
        hrs.iter().map(|&(s, hr, _)| (s, hr)).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_06_attack_effectiveness() {
    let fed_attack = AttackStrategy::FedAttack { pool_fraction: 1.0 };
    let clean = mean_hr(AttackStrategy::None, AggregationRule::Mean);
    let attacked = mean_hr(fed_attack, AggregationRule::Mean);
    let flipped = mean_hr(AttackStrategy::LabelFlip, AggregationRule::Mean);
    let drop = 1.0 - attacked / clean;
    let pass = drop >= 0.10 && attacked <= flipped;
    report(6, "attack effectiveness", pass);
    assert!(
        pass,
        "no-attack mean HR@5 {clean:.4}, FedAttack {attacked:.4} \
         (relative drop {:.1}%, need >= 10%), LabelFlip {flipped:.4} \
         (need FedAttack <= LabelFlip)",
        drop * 100.0
    );
}

#[test]
fn criterion_07_defense_circumvention() {
    let fed_attack = AttackStrategy::FedAttack { pool_fraction: 1.0 };
    let stat_opt = AttackStrategy::StatOpt { lambda: 2.0 };
    let bound = AggregationRule::NormBound { tau: 2.0 };

    let clean_mean = mean_hr(AttackStrategy::None, AggregationRule::Mean);
    let so_mean = mean_hr(stat_opt, AggregationRule::Mean);
    let clean_bound = mean_hr(AttackStrategy::None, bound);
    let so_bound = mean_hr(stat_opt, bound);
    let fa_bound = mean_hr(fed_attack, bound);

    let so_drop_mean = 1.0 - so_mean / clean_mean;
    let so_drop_bound = 1.0 - so_bound / clean_bound;
    let fa_drop_bound = 1.0 - fa_bound / clean_bound;
    let pass = so_drop_bound < so_drop_mean && fa_drop_bound >= 0.10;
    report(7, "defense circumvention", pass);
    assert!(
        pass,
        "StatOpt relative drop {:.1}% under Mean vs {:.1}% under NormBound \
         (must shrink); FedAttack drop under NormBound {:.1}% (need >= 10%)",
        so_drop_mean * 100.0,
        so_drop_bound * 100.0,
        fa_drop_bound * 100.0
    );
}

#[test]
fn criterion_08_hardness_profile() {
    let spec = attack_scale_spec();
    let mut per_bucket_ok = true;
    let mut separation_ok = true;
    for seed in RUN_SEEDS {
        let config = attack_scale_config(
            seed,
            AttackStrategy::FedAttack { pool_fraction: 1.0 },
            AggregationRule::Mean,
        );
        let (registry, num_items) =
            registry_for(&spec, config.byzantine_ratio, config.k_positives, seed);
        let options = RunOptions {
            log_samples: true,
            ..RunOptions::new()
        };
        let artifacts = run_simulation(&config, &registry, num_items, options).unwrap();
        // Final-epoch samples scored against the final parameters: the
        // extremal-sampling ordering is then a property of the sampler,
        // not of training drift.
        let last_epoch = config.max_epochs - 1;
        let samples: Vec<_> = artifacts
            .samples
            .iter()
            .filter(|s| s.epoch == last_epoch)
            .cloned()
            .collect();
        let profile = hardness_profile(
            &artifacts.final_params,
            &registry,
            config.user_model,
            &samples,
        )
        .unwrap();

        let buckets: std::collections::BTreeSet<usize> =
            profile.cells.iter().map(|c| c.bucket).collect();
        for bucket in buckets {
            let neg = profile.cell(bucket, Role::Byzantine, Polarity::Negative);
            let pos = profile.cell(bucket, Role::Byzantine, Polarity::Positive);
            if let (Some(neg), Some(pos)) = (neg, pos) {
                if neg.mean <= pos.mean {
                    per_bucket_ok = false;
                }
            }
        }
        let byz_neg = profile.overall(Role::Byzantine, Polarity::Negative).unwrap();
        let ben_neg = profile.overall(Role::Benign, Polarity::Negative).unwrap();
        if byz_neg.0 <= ben_neg.0 {
            separation_ok = false;
        }
    }
    let pass = per_bucket_ok && separation_ok;
    report(8, "hardness profile", pass);
    assert!(
        pass,
        "per-bucket byz neg > byz pos: {per_bucket_ok}; \
         overall byz neg > benign neg: {separation_ok}"
    );
}

#[test]
fn criterion_09_detector_direction() {
    // Phase-1 collection runs on a smaller federation: enough byzantine
    // clients per round for balanced detector datasets, quick per seed.
    let spec = SyntheticSpec {
        users: 300,
        items: 200,
        popularity: 1.0,
        ..SyntheticSpec::default()
    };
    let mut accuracy = |attack: AttackStrategy, seed: u64| -> f64 {
        let config = SimulationConfig {
            seed,
            dim: 16,
            max_epochs: 8,
            byzantine_ratio: 0.2,
            attack,
            defense: AggregationRule::Mean,
            ..SimulationConfig::default()
        };
        let (registry, num_items) =
            registry_for(&spec, config.byzantine_ratio, config.k_positives, seed);
        let options = RunOptions {
            log_features: true,
            ..RunOptions::new()
        };
        let artifacts = run_simulation(&config, &registry, num_items, options).unwrap();
        let records: Vec<LabeledFeature> = artifacts
            .features
            .into_iter()
            .map(|f| LabeledFeature {
                features: f.features,
                malicious: f.role == Role::Byzantine,
            })
            .collect();
        let dataset = DetectorDataset::balanced(records, seed).unwrap();
        train_detector(&dataset, 200, 0.1, seed).unwrap().holdout_accuracy
    };
    let mut stat_opt_acc = Vec::new();
    let mut fed_attack_acc = Vec::new();
    for seed in RUN_SEEDS {
        stat_opt_acc.push(accuracy(AttackStrategy::StatOpt { lambda: 2.0 }, seed));
        fed_attack_acc.push(accuracy(
            AttackStrategy::FedAttack { pool_fraction: 1.0 },
            seed,
        ));
    }
    let so_mean: f64 = stat_opt_acc.iter().sum::<f64>() / stat_opt_acc.len() as f64;
    let fa_mean: f64 = fed_attack_acc.iter().sum::<f64>() / fed_attack_acc.len() as f64;
    let pass = so_mean > fa_mean;
    report(9, "detector direction", pass);
    assert!(
        pass,
        "mean held-out accuracy on StatOpt {so_mean:.3} (per-seed {stat_opt_acc:?}) \
         must exceed FedAttack {fa_mean:.3} (per-seed {fed_attack_acc:?})"
    );
}

#[test]
fn criterion_10_determinism() {
    let spec = SyntheticSpec {
        users: 240,
        items: 160,
        profile_min: 8,
        profile_max: 14,
        popularity: 1.0,
        ..SyntheticSpec::default()
    };
    let seed = 7u64;
    let config = SimulationConfig {
        seed,
        dim: 16,
        max_epochs: 4,
        byzantine_ratio: 0.2,
        attack: AttackStrategy::StatOpt { lambda: 2.0 },
        defense: AggregationRule::Median,
        ..SimulationConfig::default()
    };
    let render = || {
        let (registry, num_items) =
            registry_for(&spec, config.byzantine_ratio, config.k_positives, seed);
        let timeline = run_training(&config, &registry, num_items).unwrap();
        let rows: Vec<MetricsCsvRow> = timeline
            .epochs
            .iter()
            .map(|e| MetricsCsvRow {
                epoch: e.epoch,
                hr5: e.hr,
                ndcg5: e.ndcg,
            })
            .collect();
        metrics_csv(&rows, "median", "stat_opt", 0.2, seed)
    };
    let base = render();
    let repeat = render();
    let two_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(2)
        .build()
        .unwrap()
        .install(render);
    let four_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(render);
    let pass = base == repeat && base == two_threads && base == four_threads;
    report(10, "determinism", pass);
    assert!(pass, "metrics CSVs differ across reruns or thread counts");
}

#[test]
fn criterion_11_pca_correctness() {
    let r = oracles::check_pca(100, ORACLE_SEED).unwrap();
    oracle_criterion(11, "pca correctness", &r, 60.0);
}
