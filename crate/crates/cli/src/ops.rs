//! Command implementations: single runs, sweep grids, the two-phase
//! detection protocol, hardness/PCA analysis and oracle self-checks.
//!
//! Every output file is written atomically (temp file + rename) and every
//! invocation writes a `manifest.json` tying each output to the config
//! hash, seeds and build that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use fedrec_core::dataset::{
    build_client_registry, leave_one_out_split, load_interactions, synthetic_clustered, Role,
};
use fedrec_core::detection::{DetectorDataset, LabeledFeature};
use fedrec_core::eval::{
    detector_accuracy_csv, hardness_csv, hardness_profile, metrics_csv, pca_csv, pca_project,
    MetricsCsvRow, PcaCsvRow,
};
use fedrec_core::fedcore::{run_simulation, EpochMetrics, RunOptions};
use fedrec_core::oracles::run_all_checks;
use fedrec_core::{save_detector, save_model, train_detector, ClientRegistry};

use crate::config::{Cell, DataSpec, ExperimentSpec};

// -----------------------------------------------------------------------
// Output plumbing
// -----------------------------------------------------------------------

/// Writes text through a sibling temp file and a rename, so the target
/// path never holds a partial file.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("invalid output path {}", path.display()))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, text)
        .with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", tmp.display()))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OutputRecord {
    file: String,
    seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cell: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    status: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    config_hash: String,
    build: String,
    command: String,
    wall_time_secs: f64,
    outputs: Vec<OutputRecord>,
}

struct Reporter {
    out_dir: PathBuf,
    manifest: Manifest,
    started: Instant,
}

impl Reporter {
    fn new(out_dir: &Path, spec_hash: &str, build: &str, command: &str) -> Result<Reporter> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create {}", out_dir.display()))?;
        Ok(Reporter {
            out_dir: out_dir.to_path_buf(),
            manifest: Manifest {
                config_hash: spec_hash.to_string(),
                build: build.to_string(),
                command: command.to_string(),
                wall_time_secs: 0.0,
                outputs: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    /// Writes one result file and records it in the manifest.
    fn emit(
        &mut self,
        rel: &str,
        text: &str,
        seeds: Vec<u64>,
        cell: Option<String>,
        best_epoch: Option<usize>,
    ) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_atomic(&path, text)?;
        self.manifest.outputs.push(OutputRecord {
            file: rel.to_string(),
            seeds,
            cell,
            best_epoch,
            status: "ok".to_string(),
        });
        Ok(())
    }

    fn record_failure(&mut self, cell: String, seeds: Vec<u64>, message: &str) {
        self.manifest.outputs.push(OutputRecord {
            file: String::new(),
            seeds,
            cell: Some(cell),
            best_epoch: None,
            status: format!("failed: {message}"),
        });
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.out_dir.join("manifest.json"), &text)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

// -----------------------------------------------------------------------
// Shared run helpers
// -----------------------------------------------------------------------

/// Materializes the dataset and client registry for one (ratio, seed).
pub fn build_registry_for(
    data: &DataSpec,
    ratio: f64,
    k_positives: usize,
    seed: u64,
) -> Result<(ClientRegistry, usize)> {
    let log = match data {
        DataSpec::Synthetic(spec) => synthetic_clustered(spec, seed)?,
        DataSpec::File { path, format } => load_interactions(path, *format)
            .with_context(|| format!("cannot load interactions from {}", path.display()))?,
    };
    let splits = leave_one_out_split(&log)?;
    let registry = build_client_registry(&splits, ratio, k_positives, seed)?;
    Ok((registry, log.item_count))
}

fn metrics_rows(epochs: &[EpochMetrics]) -> Vec<MetricsCsvRow> {
    epochs
        .iter()
        .map(|e| MetricsCsvRow {
            epoch: e.epoch,
            hr5: e.hr,
            ndcg5: e.ndcg,
        })
        .collect()
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// -----------------------------------------------------------------------
// Commands
// -----------------------------------------------------------------------

/// One training run at the base configuration; writes the per-epoch
/// metrics CSV and the best-validation model checkpoint.
pub fn cmd_train(spec: &ExperimentSpec, out_dir: &Path, build: &str) -> Result<()> {
    let mut reporter = Reporter::new(out_dir, &spec.config_hash, build, "train")?;
    let cell = Cell {
        attack: spec.base.attack,
        defense: spec.base.defense,
        byz_ratio: spec.base.byzantine_ratio,
    };
    let seed = spec.base.seed;
    let (registry, num_items) =
        build_registry_for(&spec.data, cell.byz_ratio, spec.base.k_positives, seed)?;
    let artifacts = run_simulation(&spec.base, &registry, num_items, RunOptions::new())?;
    let timeline = &artifacts.timeline;
    let best = timeline.best();
    log::info!(
        "best epoch {} of {}: HR@{} {:.4}, nDCG@{} {:.4} (validation HR {:.4})",
        best.epoch,
        timeline.epochs.len(),
        spec.base.k_eval,
        best.hr,
        spec.base.k_eval,
        best.ndcg,
        best.val_hr,
    );
    let csv = metrics_csv(
        &metrics_rows(&timeline.epochs),
        spec.base.defense.label(),
        &cell.attack_label(),
        cell.byz_ratio,
        seed,
    );
    reporter.emit(
        "metrics.csv",
        &csv,
        vec![seed],
        Some(cell.attack_label()),
        Some(best.epoch),
    )?;
    save_model(&artifacts.best_params, &out_dir.join("model.bin"))?;
    reporter.manifest.outputs.push(OutputRecord {
        file: "model.bin".to_string(),
        seeds: vec![seed],
        cell: Some(cell.attack_label()),
        best_epoch: Some(best.epoch),
        status: "ok".to_string(),
    });
    reporter.finish()
}

/// The full sweep grid; cell failures are recorded and skipped. Returns
/// the process exit code (0 only when every cell succeeded).
pub fn cmd_sweep(spec: &ExperimentSpec, out_dir: &Path, build: &str) -> Result<i32> {
    let mut reporter = Reporter::new(out_dir, &spec.config_hash, build, "sweep")?;
    let cells = spec.cells();
    log::info!(
        "sweep: {} cells x {} seeds",
        cells.len(),
        spec.seeds.len()
    );
    let mut table = String::from(
        "attack,defense,byz_ratio,hr5_mean,hr5_std,ndcg5_mean,ndcg5_std\n",
    );
    let mut failures = 0usize;
    for cell in &cells {
        let label = format!(
            "{}/{}/{}",
            cell.attack_label(),
            cell.defense.label(),
            cell.byz_ratio
        );
        let mut hrs = Vec::new();
        let mut ndcgs = Vec::new();
        for &seed in &spec.seeds {
            let outcome = (|| -> Result<(Vec<EpochMetrics>, usize)> {
                let (registry, num_items) = build_registry_for(
                    &spec.data,
                    cell.byz_ratio,
                    spec.base.k_positives,
                    seed,
                )?;
                let config = spec.config_for(cell, seed);
                let artifacts =
                    run_simulation(&config, &registry, num_items, RunOptions::new())?;
                Ok((
                    artifacts.timeline.epochs.clone(),
                    artifacts.timeline.best_epoch,
                ))
            })();
            match outcome {
                Ok((epochs, best_epoch)) => {
                    let best = &epochs[best_epoch];
                    hrs.push(best.hr);
                    ndcgs.push(best.ndcg);
                    let rel = format!(
                        "runs/{}__s{}.csv",
                        sanitize(&format!(
                            "{}__{}__r{}",
                            cell.attack_label(),
                            cell.defense.label(),
                            cell.byz_ratio
                        )),
                        seed
                    );
                    let csv = metrics_csv(
                        &metrics_rows(&epochs),
                        cell.defense.label(),
                        &cell.attack_label(),
                        cell.byz_ratio,
                        seed,
                    );
                    reporter.emit(&rel, &csv, vec![seed], Some(label.clone()), Some(best_epoch))?;
                }
                Err(e) => {
                    failures += 1;
                    log::error!("cell {label} seed {seed} failed: {e:#}");
                    reporter.record_failure(label.clone(), vec![seed], &format!("{e:#}"));
                }
            }
        }
        if !hrs.is_empty() {
            let (hr_mean, hr_std) = mean_and_std(&hrs);
            let (ndcg_mean, ndcg_std) = mean_and_std(&ndcgs);
            let _ = writeln!(
                table,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                cell.attack_label(),
                cell.defense.label(),
                cell.byz_ratio,
                hr_mean,
                hr_std,
                ndcg_mean,
                ndcg_std
            );
        }
    }
    reporter.emit("sweep.csv", &table, spec.seeds.clone(), None, None)?;
    reporter.finish()?;
    if failures > 0 {
        log::error!("{failures} sweep runs failed");
        Ok(1)
    } else {
        Ok(0)
    }
}

/// Two-phase detection protocol: phase 1 collects labeled gradient
/// features and trains the detector; phase 2 re-runs the same
/// configuration with the frozen detector filtering before aggregation.
pub fn cmd_detect(spec: &ExperimentSpec, out_dir: &Path, build: &str) -> Result<()> {
    use fedrec_core::attacks::AttackStrategy;
    if spec.base.attack == AttackStrategy::None {
        bail!(
            "the detection protocol needs an attack: with attack = \"none\" phase 1 \
             collects a single class and no detector can be trained"
        );
    }
    if spec.base.byzantine_ratio <= 0.0 {
        bail!(
            "the detection protocol needs byzantine clients: attack.byz_ratio is {}",
            spec.base.byzantine_ratio
        );
    }
    let mut reporter = Reporter::new(out_dir, &spec.config_hash, build, "detect")?;
    let seed = spec.base.seed;
    let cell = Cell {
        attack: spec.base.attack,
        defense: spec.base.defense,
        byz_ratio: spec.base.byzantine_ratio,
    };
    let (registry, num_items) =
        build_registry_for(&spec.data, cell.byz_ratio, spec.base.k_positives, seed)?;

    // Phase 1: collect labeled features from an unfiltered run.
    let phase1 = run_simulation(
        &spec.base,
        &registry,
        num_items,
        RunOptions {
            log_features: true,
            feature_mode: spec.detector.mode,
            ..RunOptions::new()
        },
    )?;
    let labeled: Vec<LabeledFeature> = phase1
        .features
        .iter()
        .map(|f| LabeledFeature {
            features: f.features.clone(),
            malicious: f.role == Role::Byzantine,
        })
        .collect();
    let dataset = DetectorDataset::balanced(labeled, seed)?;
    let report = train_detector(&dataset, spec.detector.epochs, spec.detector.lr, seed)?;
    log::info!(
        "phase 1: {} balanced examples, held-out accuracy {:.3}",
        report.train_size + report.holdout_size,
        report.holdout_accuracy
    );
    let mut model = report.model.clone();
    model.threshold = spec.detector.threshold;
    save_detector(&model, &out_dir.join("detector.bin"))?;
    reporter.manifest.outputs.push(OutputRecord {
        file: "detector.bin".to_string(),
        seeds: vec![seed],
        cell: Some(cell.attack_label()),
        best_epoch: None,
        status: "ok".to_string(),
    });
    let acc_csv = detector_accuracy_csv(&[(cell.attack_label(), report.holdout_accuracy)]);
    reporter.emit(
        "detector_accuracy.csv",
        &acc_csv,
        vec![seed],
        Some(cell.attack_label()),
        None,
    )?;

    // Phase 2: identical run with the frozen detector in the loop.
    let phase2 = run_simulation(
        &spec.base,
        &registry,
        num_items,
        RunOptions {
            log_rounds: true,
            detector: Some(&model),
            feature_mode: spec.detector.mode,
            ..RunOptions::new()
        },
    )?;
    let flagged: usize = phase2.rounds.iter().map(|r| r.flagged.len()).sum();
    let fallbacks = phase2
        .rounds
        .iter()
        .filter(|r| r.kept_all_fallback)
        .count();
    let best = phase2.timeline.best();
    log::info!(
        "phase 2: flagged {flagged} uploads over {} rounds ({fallbacks} keep-all fallbacks); \
         best HR@{} {:.4}",
        phase2.rounds.len(),
        spec.base.k_eval,
        best.hr,
    );
    let csv = metrics_csv(
        &metrics_rows(&phase2.timeline.epochs),
        spec.base.defense.label(),
        &cell.attack_label(),
        cell.byz_ratio,
        seed,
    );
    reporter.emit(
        "metrics_filtered.csv",
        &csv,
        vec![seed],
        Some(cell.attack_label()),
        Some(best.epoch),
    )?;
    reporter.finish()
}

/// Hardness-profile and PCA emitters from a fully logged run.
pub fn cmd_analyze(spec: &ExperimentSpec, out_dir: &Path, build: &str) -> Result<()> {
    let mut reporter = Reporter::new(out_dir, &spec.config_hash, build, "analyze")?;
    let seed = spec.base.seed;
    let cell = Cell {
        attack: spec.base.attack,
        defense: spec.base.defense,
        byz_ratio: spec.base.byzantine_ratio,
    };
    let (registry, num_items) =
        build_registry_for(&spec.data, cell.byz_ratio, spec.base.k_positives, seed)?;
    let artifacts = run_simulation(
        &spec.base,
        &registry,
        num_items,
        RunOptions {
            log_samples: true,
            log_features: true,
            feature_mode: spec.detector.mode,
            ..RunOptions::new()
        },
    )?;

    let profile = hardness_profile(
        &artifacts.final_params,
        &registry,
        spec.base.user_model,
        &artifacts.samples,
    )?;
    reporter.emit(
        "hardness.csv",
        &hardness_csv(&profile),
        vec![seed],
        Some(cell.attack_label()),
        None,
    )?;

    // Mean feature vector per client across every round it joined,
    // projected to 2 components.
    let mut by_client: std::collections::BTreeMap<usize, (Vec<f64>, usize)> =
        std::collections::BTreeMap::new();
    for f in &artifacts.features {
        let entry = by_client
            .entry(f.client_id)
            .or_insert_with(|| (vec![0.0; f.features.len()], 0));
        for (a, x) in entry.0.iter_mut().zip(&f.features) {
            *a += x;
        }
        entry.1 += 1;
    }
    let clients: Vec<usize> = by_client.keys().copied().collect();
    let rows: Vec<Vec<f64>> = by_client
        .values()
        .map(|(sum, n)| sum.iter().map(|x| x / *n as f64).collect())
        .collect();
    let projection = pca_project(&rows, 2)?;
    let pca_rows: Vec<PcaCsvRow> = clients
        .iter()
        .zip(&projection.coords)
        .map(|(&client, xy)| PcaCsvRow {
            client,
            role: registry.clients[client].role,
            x: xy[0],
            y: xy[1],
        })
        .collect();
    reporter.emit(
        "pca.csv",
        &pca_csv(&pca_rows),
        vec![seed],
        Some(cell.attack_label()),
        None,
    )?;
    log::info!(
        "analyzed {} sampled item lists and {} client feature vectors \
         (explained variance {:.2}/{:.2})",
        artifacts.samples.len(),
        rows.len(),
        projection.explained[0],
        projection.explained[1],
    );
    reporter.finish()
}

/// Runs the brute-force oracle checks and prints one line per check.
/// Returns the process exit code.
pub fn cmd_oracle(seed: u64) -> Result<i32> {
    let reports = run_all_checks(seed)?;
    let mut ok = true;
    for r in &reports {
        println!("{}", r.line());
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 1 })
}
