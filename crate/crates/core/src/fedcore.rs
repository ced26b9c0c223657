//! Federated round protocol.
//!
//! An epoch is one seeded permutation of all clients consumed in chunks
//! of `clients_per_round` (remainder kept). Within a round every client
//! computes a gradient against the same parameter snapshot: benign
//! clients sample their own history, Byzantine clients run the active
//! attack. The server optionally filters with a frozen detector,
//! aggregates under the configured rule and takes one Adam step.
//!
//! Every random choice draws from a stream derived from
//! (seed, purpose, epoch, client), and all floating-point reductions run
//! in client-id order, so a run is a pure function of its configuration
//! and dataset at any thread count.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::attacks::{
    build_candidate_pool, estimate_benign_stats, fedattack_update, gaussian_update,
    label_flip_update, lie_update, stat_opt_update, AttackStrategy, CandidatePool, LocalUpdate,
};
use crate::dataset::{ClientProfile, ClientRegistry, Role};
use crate::defenses::{apply_rule, AggregationRule};
use crate::detection::{detect_and_filter, featurize, DetectorModel, FeatureMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_epoch, RankTarget, SampleRecord};
use crate::model::{
    adam_apply, bpr_mean_gradient, init_params, AdamState, ModelParams, PredictorKind,
    SparseGradient, UserModelKind, UserRepr,
};
use crate::rng::{stream, StreamTag};

/// Everything a run depends on besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub seed: u64,
    /// Embedding dimension.
    pub dim: usize,
    /// Server-side Adam learning rate.
    pub lr: f64,
    pub max_epochs: usize,
    pub clients_per_round: usize,
    /// Positives per benign update; also the Byzantine K.
    pub k_positives: usize,
    /// Metric cutoff (HR@k, nDCG@k).
    pub k_eval: usize,
    /// Exclude train/other-held-out items from ranking candidates.
    pub exclude_seen: bool,
    pub user_model: UserModelKind,
    pub predictor: PredictorKind,
    pub byzantine_ratio: f64,
    pub attack: AttackStrategy,
    pub defense: AggregationRule,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 0,
            dim: 64,
            lr: 1e-3,
            max_epochs: 50,
            clients_per_round: 16,
            k_positives: 4,
            k_eval: 5,
            exclude_seen: true,
            user_model: UserModelKind::SeqMean,
            predictor: PredictorKind::DotProduct,
            byzantine_ratio: 0.0,
            attack: AttackStrategy::None,
            defense: AggregationRule::Mean,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(Error::Config("clients_per_round must be at least 1".into()));
        }
        if self.k_positives == 0 {
            return Err(Error::Config("k_positives must be at least 1".into()));
        }
        if self.k_eval == 0 {
            return Err(Error::Config("k_eval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.byzantine_ratio) {
            return Err(Error::Config(format!(
                "byzantine_ratio must lie in [0, 1], got {}",
                self.byzantine_ratio
            )));
        }
        self.attack.validate()
    }
}

/// Per-epoch benign-client metrics on both held-out targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub val_hr: f64,
    pub val_ndcg: f64,
}

/// The whole run's metric history plus the checkpoint pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTimeline {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch with the best validation HR (earliest on ties); test metrics
    /// are reported from this checkpoint.
    pub best_epoch: usize,
}

impl MetricsTimeline {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch]
    }
}

/// What happened in one aggregation round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub epoch: usize,
    pub round: usize,
    /// Participant client ids, ascending.
    pub participants: Vec<usize>,
    /// Client ids the detector dropped before aggregation.
    pub flagged: Vec<usize>,
    /// True when the detector flagged everyone and the keep-all fallback
    /// fired.
    pub kept_all_fallback: bool,
    /// Euclidean norm of the aggregated update.
    pub update_norm: f64,
}

/// One client's uploaded gradient with its ground-truth role. The role is
/// simulator-side truth for detector training; the live aggregation path
/// never reads it.
#[derive(Debug, Clone)]
pub struct GradientLogEntry {
    pub epoch: usize,
    pub round: usize,
    pub client_id: usize,
    pub role: Role,
    pub grad: SparseGradient,
}

/// Featurized gradient with ground-truth role, for detector training.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub epoch: usize,
    pub round: usize,
    pub client_id: usize,
    pub role: Role,
    pub features: Vec<f64>,
}

/// Optional logging sinks and the round-time detector.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub log_rounds: bool,
    /// Record per-client sampled item lists for hardness analysis.
    pub log_samples: bool,
    /// Record labeled gradient features.
    pub log_features: bool,
    /// Retain raw gradients with role labels.
    pub log_gradients: bool,
    /// Frozen detector filtering gradients before aggregation.
    pub detector: Option<&'a DetectorModel>,
    pub feature_mode: FeatureMode,
}

impl<'a> RunOptions<'a> {
    pub fn new() -> Self {
        RunOptions {
            log_rounds: false,
            log_samples: false,
            log_features: false,
            log_gradients: false,
            detector: None,
            feature_mode: FeatureMode::Pooled,
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub timeline: MetricsTimeline,
    /// Parameters after the last epoch.
    pub final_params: ModelParams,
    /// Parameters at the best-validation epoch.
    pub best_params: ModelParams,
    pub rounds: Vec<RoundRecord>,
    pub samples: Vec<SampleRecord>,
    pub features: Vec<FeatureRecord>,
    pub gradients: Vec<GradientLogEntry>,
}

/// Draws `k_positives` positives without replacement from the client's
/// history and one uniform negative per positive from the item universe
/// minus that history.
pub fn sample_benign_pairs(
    client: &ClientProfile,
    num_items: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let k = client.k_positives.min(client.train_items.len());
    if k == 0 {
        return Err(Error::Sampling(format!(
            "client {} has no training items",
            client.user_id
        )));
    }
    let train: HashSet<usize> = client.train_items.iter().copied().collect();
    if train.len() >= num_items {
        return Err(Error::Sampling(format!(
            "client {} interacted with the whole item set; no negatives remain",
            client.user_id
        )));
    }
    let positives: Vec<usize> = rand::seq::index::sample(rng, client.train_items.len(), k)
        .into_iter()
        .map(|i| client.train_items[i])
        .collect();
    let pairs = positives
        .into_iter()
        .map(|pos| {
            let neg = loop {
                let cand = rng.random_range(0..num_items);
                if !train.contains(&cand) {
                    break cand;
                }
            };
            (pos, neg)
        })
        .collect();
    Ok(pairs)
}

/// One benign local update: mean BPR gradient over the sampled pairs.
pub fn benign_update(
    params: &ModelParams,
    client: &ClientProfile,
    user_model: UserModelKind,
    num_items: usize,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let pairs = sample_benign_pairs(client, num_items, rng)?;
    let grad = bpr_mean_gradient(params, &UserRepr::for_client(user_model, client), &pairs)?;
    Ok(LocalUpdate {
        grad,
        positives: pairs.iter().map(|&(p, _)| p).collect(),
        negatives: pairs.iter().map(|&(_, n)| n).collect(),
    })
}

/// Runs the full training loop and returns only the metric timeline.
pub fn run_training(
    config: &SimulationConfig,
    registry: &ClientRegistry,
    num_items: usize,
) -> Result<MetricsTimeline> {
    Ok(run_simulation(config, registry, num_items, RunOptions::new())?.timeline)
}

/// Runs the full training loop with optional logging and detector
/// filtering.
pub fn run_simulation(
    config: &SimulationConfig,
    registry: &ClientRegistry,
    num_items: usize,
    options: RunOptions<'_>,
) -> Result<RunArtifacts> {
    config.validate()?;
    validate_registry(config, registry, num_items)?;

    let n_clients = registry.len();
    let mut params = init_params(
        n_clients,
        num_items,
        config.dim,
        config.predictor,
        config.seed,
    )?;
    let meta = params.meta();
    let mut adam = AdamState::new(meta.dense_len(), config.lr);
    let pool = match config.attack {
        AttackStrategy::FedAttack { pool_fraction } => Some(build_candidate_pool(
            num_items,
            pool_fraction,
            config.seed,
        )?),
        _ => None,
    };

    let mut artifacts = RunArtifacts {
        timeline: MetricsTimeline {
            epochs: Vec::with_capacity(config.max_epochs),
            best_epoch: 0,
        },
        final_params: params.clone(),
        best_params: params.clone(),
        rounds: Vec::new(),
        samples: Vec::new(),
        features: Vec::new(),
        gradients: Vec::new(),
    };
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n_clients).collect();
        order.shuffle(&mut stream(
            config.seed,
            StreamTag::EpochPermutation,
            &[epoch as u64],
        ));
        for (round, chunk) in order.chunks(config.clients_per_round).enumerate() {
            let mut ids = chunk.to_vec();
            ids.sort_unstable();
            execute_round(
                config,
                registry,
                num_items,
                pool.as_ref(),
                &mut params,
                &mut adam,
                &options,
                &mut artifacts,
                epoch,
                round,
                &ids,
            )
            .map_err(|e| e.in_round(epoch, round))?;
        }

        let test = evaluate_epoch(
            &params,
            registry,
            config.user_model,
            config.k_eval,
            config.exclude_seen,
            RankTarget::Test,
        )?;
        let val = evaluate_epoch(
            &params,
            registry,
            config.user_model,
            config.k_eval,
            config.exclude_seen,
            RankTarget::Validation,
        )?;
        artifacts.timeline.epochs.push(EpochMetrics {
            epoch,
            hr: test.hr,
            ndcg: test.ndcg,
            val_hr: val.hr,
            val_ndcg: val.ndcg,
        });
        if val.hr > best_val {
            best_val = val.hr;
            artifacts.timeline.best_epoch = epoch;
            artifacts.best_params = params.clone();
        }
    }

    artifacts.final_params = params;
    Ok(artifacts)
}

fn validate_registry(
    config: &SimulationConfig,
    registry: &ClientRegistry,
    num_items: usize,
) -> Result<()> {
    if registry.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if (registry.byzantine_ratio - config.byzantine_ratio).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "registry was built for byzantine_ratio {}, config says {}",
            registry.byzantine_ratio, config.byzantine_ratio
        )));
    }
    for (i, c) in registry.clients.iter().enumerate() {
        if c.user_id != i {
            return Err(Error::Config(format!(
                "client ids must be contiguous: position {i} holds user {}",
                c.user_id
            )));
        }
        for &item in c
            .train_items
            .iter()
            .chain([&c.val_item, &c.test_item])
        {
            if item >= num_items {
                return Err(Error::ShapeMismatch {
                    expected: num_items,
                    actual: item,
                });
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn execute_round(
    config: &SimulationConfig,
    registry: &ClientRegistry,
    num_items: usize,
    pool: Option<&CandidatePool>,
    params: &mut ModelParams,
    adam: &mut AdamState,
    options: &RunOptions<'_>,
    artifacts: &mut RunArtifacts,
    epoch: usize,
    round: usize,
    ids: &[usize],
) -> Result<()> {
    let meta = params.meta();
    let byz: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&id| registry.clients[id].role == Role::Byzantine)
        .collect();

    // Serial pre-step: Byzantine clients estimate benign statistics from
    // benign-style gradients on their own profiles, then shared-dense
    // attacks build the round's common update.
    let mut stats = None;
    let mut shared: Option<Vec<f64>> = None;
    if config.attack.needs_stats() && !byz.is_empty() {
        let style: Vec<Result<LocalUpdate>> = byz
            .par_iter()
            .map(|&cid| {
                let mut rng = stream(
                    config.seed,
                    StreamTag::BenignStats,
                    &[epoch as u64, cid as u64],
                );
                benign_update(params, &registry.clients[cid], config.user_model, num_items, &mut rng)
            })
            .collect();
        let mut dense = Vec::with_capacity(byz.len());
        for update in style {
            dense.push(update?.grad.densify(&meta)?);
        }
        let est = estimate_benign_stats(&dense)?;
        shared = match config.attack {
            AttackStrategy::Lie { z_override } => {
                Some(lie_update(&est, ids.len(), byz.len(), z_override)?)
            }
            AttackStrategy::StatOpt { lambda } => Some(stat_opt_update(&est, lambda)?),
            AttackStrategy::DynOpt {
                gamma_init,
                gamma_step,
            } => Some(crate::attacks::dyn_opt_update(
                &est, &dense, byz.len(), gamma_init, gamma_step,
            )?),
            _ => None,
        };
        stats = Some(est);
    }

    let updates: Vec<Result<LocalUpdate>> = ids
        .par_iter()
        .map(|&cid| {
            let client = &registry.clients[cid];
            let mut rng = stream(
                config.seed,
                StreamTag::ClientUpdate,
                &[epoch as u64, cid as u64],
            );
            if client.role == Role::Benign {
                return benign_update(params, client, config.user_model, num_items, &mut rng);
            }
            match config.attack {
                AttackStrategy::None => {
                    benign_update(params, client, config.user_model, num_items, &mut rng)
                }
                AttackStrategy::FedAttack { .. } => fedattack_update(
                    params,
                    client,
                    config.user_model,
                    pool.expect("pool built for fedattack"),
                    &mut rng,
                ),
                AttackStrategy::LabelFlip => {
                    let pairs = sample_benign_pairs(client, num_items, &mut rng)?;
                    let grad = label_flip_update(
                        params,
                        &UserRepr::for_client(config.user_model, client),
                        &pairs,
                    )?;
                    // Roles are swapped: the sampled negatives are what
                    // this client now claims as positives.
                    Ok(LocalUpdate {
                        grad,
                        positives: pairs.iter().map(|&(_, n)| n).collect(),
                        negatives: pairs.iter().map(|&(p, _)| p).collect(),
                    })
                }
                AttackStrategy::Gaussian => {
                    let pattern =
                        benign_update(params, client, config.user_model, num_items, &mut rng)?;
                    let grad = gaussian_update(
                        &pattern.grad,
                        stats.as_ref().expect("stats estimated for gaussian"),
                        &meta,
                        &mut rng,
                    )?;
                    Ok(LocalUpdate {
                        grad,
                        positives: pattern.positives,
                        negatives: pattern.negatives,
                    })
                }
                AttackStrategy::Lie { .. }
                | AttackStrategy::StatOpt { .. }
                | AttackStrategy::DynOpt { .. } => {
                    let dense = shared.as_ref().expect("shared update precomputed");
                    Ok(LocalUpdate {
                        grad: SparseGradient::from_dense(dense, &meta)?,
                        positives: Vec::new(),
                        negatives: Vec::new(),
                    })
                }
            }
        })
        .collect();

    let mut grads = Vec::with_capacity(ids.len());
    for (update, &cid) in updates.into_iter().zip(ids) {
        let update = update?;
        if options.log_samples && !update.positives.is_empty() {
            artifacts.samples.push(SampleRecord {
                epoch,
                round,
                client_id: cid,
                positives: update.positives.clone(),
                negatives: update.negatives.clone(),
            });
        }
        grads.push(update.grad);
    }

    let dense: Vec<Vec<f64>> = {
        let densified: Vec<Result<Vec<f64>>> =
            grads.par_iter().map(|g| g.densify(&meta)).collect();
        densified.into_iter().collect::<Result<_>>()?
    };
    let mut round_avg = vec![0.0; meta.dense_len()];
    for d in &dense {
        for (a, x) in round_avg.iter_mut().zip(d) {
            *a += x;
        }
    }
    for a in &mut round_avg {
        *a /= dense.len() as f64;
    }

    if options.log_features {
        let feats: Vec<Result<Vec<f64>>> = grads
            .par_iter()
            .map(|g| featurize(g, &round_avg, &meta, options.feature_mode))
            .collect();
        for (features, &cid) in feats.into_iter().zip(ids) {
            artifacts.features.push(FeatureRecord {
                epoch,
                round,
                client_id: cid,
                role: registry.clients[cid].role,
                features: features?,
            });
        }
    }
    if options.log_gradients {
        for (grad, &cid) in grads.iter().zip(ids) {
            artifacts.gradients.push(GradientLogEntry {
                epoch,
                round,
                client_id: cid,
                role: registry.clients[cid].role,
                grad: grad.clone(),
            });
        }
    }

    let (kept, flagged, fallback) = match options.detector {
        Some(model) => {
            let outcome =
                detect_and_filter(model, &grads, &round_avg, &meta, options.feature_mode)?;
            (outcome.kept, outcome.flagged, outcome.kept_all_fallback)
        }
        None => ((0..grads.len()).collect(), Vec::new(), false),
    };
    let kept_dense: Vec<Vec<f64>> = kept.iter().map(|&i| dense[i].clone()).collect();
    let update = apply_rule(&config.defense, &kept_dense, config.byzantine_ratio)?;
    if options.log_rounds {
        artifacts.rounds.push(RoundRecord {
            epoch,
            round,
            participants: ids.to_vec(),
            flagged: flagged.iter().map(|&i| ids[i]).collect(),
            kept_all_fallback: fallback,
            update_norm: update.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    adam_apply(adam, params, &update)?;
    Ok(())
}
