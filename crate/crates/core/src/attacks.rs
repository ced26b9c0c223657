//! Byzantine client behaviors.
//!
//! The hard-sampling attack retrieves, from a candidate item pool, the
//! items most similar to the client's own user embedding and uploads them
//! as negatives, and the least similar items relabeled as positives; the
//! gradient itself comes from the unmodified BPR backward pass, so the
//! uploaded update has exactly the sparsity shape of a benign one. The
//! five baselines either perturb honest sampling (label flipping) or
//! fabricate updates from self-estimated benign statistics (Gaussian,
//! LIE, StatOpt, DynOpt). The statistics come only from benign-style
//! gradients the Byzantine clients compute on their own profiles: the
//! threat model gives attackers no access to benign clients' data.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::ClientProfile;
use crate::defenses::krum_select;
use crate::error::{Error, Result};
use crate::model::{
    bpr_mean_gradient, user_embed, ModelParams, ParamsMeta, SparseGradient, UserModelKind,
    UserRepr,
};
use crate::rng::{stream, StreamTag};

/// Which update Byzantine clients upload. Exactly one strategy is active
/// per simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackStrategy {
    None,
    FedAttack { pool_fraction: f64 },
    LabelFlip,
    Gaussian,
    Lie { z_override: Option<f64> },
    StatOpt { lambda: f64 },
    DynOpt { gamma_init: f64, gamma_step: f64 },
}

impl AttackStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            AttackStrategy::None => "none",
            AttackStrategy::FedAttack { .. } => "fed_attack",
            AttackStrategy::LabelFlip => "label_flip",
            AttackStrategy::Gaussian => "gaussian",
            AttackStrategy::Lie { .. } => "lie",
            AttackStrategy::StatOpt { .. } => "stat_opt",
            AttackStrategy::DynOpt { .. } => "dyn_opt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackStrategy::FedAttack { pool_fraction } => {
                if !(pool_fraction > 0.0 && pool_fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "pool_fraction must lie in (0, 1], got {pool_fraction}"
                    )));
                }
            }
            AttackStrategy::StatOpt { lambda } => {
                if !(lambda > 0.0) {
                    return Err(Error::Config(format!(
                        "stat_opt lambda must be positive, got {lambda}"
                    )));
                }
            }
            AttackStrategy::DynOpt {
                gamma_init,
                gamma_step,
            } => validate_gammas(gamma_init, gamma_step)?,
            _ => {}
        }
        Ok(())
    }

    /// True for attacks whose Byzantine clients all upload one shared
    /// dense vector per round (LIE, StatOpt, DynOpt).
    pub fn is_shared_dense(&self) -> bool {
        matches!(
            self,
            AttackStrategy::Lie { .. }
                | AttackStrategy::StatOpt { .. }
                | AttackStrategy::DynOpt { .. }
        )
    }

    /// True for attacks that need the benign-statistics pre-step.
    pub fn needs_stats(&self) -> bool {
        matches!(
            self,
            AttackStrategy::Gaussian
                | AttackStrategy::Lie { .. }
                | AttackStrategy::StatOpt { .. }
                | AttackStrategy::DynOpt { .. }
        )
    }
}

fn validate_gammas(gamma_init: f64, gamma_step: f64) -> Result<()> {
    if !(gamma_init > 0.0) || !(gamma_step > 0.0) || gamma_step > gamma_init {
        return Err(Error::Config(format!(
            "dyn_opt needs 0 < gamma_step <= gamma_init, got init = {gamma_init}, step = {gamma_step}"
        )));
    }
    Ok(())
}

/// The item subset known to the attacker, fixed for a whole run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePool {
    /// Sorted, deduplicated item ids.
    pub items: Vec<usize>,
}

/// Draws a seeded random subset of `round(pool_fraction * num_items)`
/// items (at least 1); fraction 1.0 keeps the full item set.
pub fn build_candidate_pool(
    num_items: usize,
    pool_fraction: f64,
    seed: u64,
) -> Result<CandidatePool> {
    if num_items == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(pool_fraction > 0.0 && pool_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "pool_fraction must lie in (0, 1], got {pool_fraction}"
        )));
    }
    let size = ((pool_fraction * num_items as f64).round() as usize).clamp(1, num_items);
    let items = if size == num_items {
        (0..num_items).collect()
    } else {
        let mut rng = stream(seed, StreamTag::CandidatePool, &[]);
        let mut picked = rand::seq::index::sample(&mut rng, num_items, size).into_vec();
        picked.sort_unstable();
        picked
    };
    Ok(CandidatePool { items })
}

/// The `k` non-excluded pool items with the largest inner product
/// against `u`, most similar first, ties broken by smaller item id.
pub fn hardest_negatives(
    item_table: &Array2<f64>,
    u: &[f64],
    k: usize,
    pool: &CandidatePool,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    ranked_extreme(item_table, u, k, pool, exclude, true)
}

/// The `k` non-excluded pool items with the smallest inner product
/// against `u` (to be relabeled as positives), least similar first, ties
/// broken by smaller item id.
pub fn hardest_pseudo_positives(
    item_table: &Array2<f64>,
    u: &[f64],
    k: usize,
    pool: &CandidatePool,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    ranked_extreme(item_table, u, k, pool, exclude, false)
}

fn ranked_extreme(
    item_table: &Array2<f64>,
    u: &[f64],
    k: usize,
    pool: &CandidatePool,
    exclude: &HashSet<usize>,
    largest: bool,
) -> Result<Vec<usize>> {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(pool.items.len());
    for &item in &pool.items {
        if item >= item_table.nrows() {
            return Err(Error::ShapeMismatch {
                expected: item_table.nrows(),
                actual: item,
            });
        }
        if exclude.contains(&item) {
            continue;
        }
        let row = item_table.row(item);
        let row = row.as_slice().expect("contiguous row");
        let score: f64 = u.iter().zip(row).map(|(a, b)| a * b).sum();
        scored.push((item, score));
    }
    if scored.len() < k {
        return Err(Error::AttackSetup(format!(
            "retrieval needs {k} candidates but only {} pool items remain after exclusion",
            scored.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        let by_score = if largest {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then(a.0.cmp(&b.0))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// A client's uploaded gradient plus the items it claims to have used,
/// retained for hardness logging.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub grad: SparseGradient,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Retrieves the hard samples for one Byzantine client and randomly pairs
/// them: `positives[i]` is trained against `negatives[i]`.
///
/// The exclusion set is the client's own train/val/test items. Requires
/// `2 * k_positives` pool items to survive exclusion so the two sets are
/// drawn from a large enough pool.
pub fn fedattack_samples(
    params: &ModelParams,
    client: &ClientProfile,
    kind: UserModelKind,
    pool: &CandidatePool,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = client.k_positives;
    let u = user_embed(params, &UserRepr::for_client(kind, client))?;
    let mut exclude: HashSet<usize> = client.train_items.iter().copied().collect();
    exclude.insert(client.val_item);
    exclude.insert(client.test_item);
    let available = pool.items.iter().filter(|i| !exclude.contains(*i)).count();
    if 2 * k > available {
        return Err(Error::AttackSetup(format!(
            "hard sampling needs 2K = {} candidates, pool has {available} after exclusion",
            2 * k
        )));
    }
    let negatives = hardest_negatives(&params.item_table, &u, k, pool, &exclude)?;
    let positives = hardest_pseudo_positives(&params.item_table, &u, k, pool, &exclude)?;
    let mut negatives = negatives;
    negatives.shuffle(rng);
    Ok((positives, negatives))
}

/// Hard-sampling poisoning update: mean BPR gradient over the randomly
/// paired hardest pseudo-positives and hardest negatives, computed by the
/// unmodified backward pass.
pub fn fedattack_update(
    params: &ModelParams,
    client: &ClientProfile,
    kind: UserModelKind,
    pool: &CandidatePool,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let (positives, negatives) = fedattack_samples(params, client, kind, pool, rng)?;
    let pairs: Vec<(usize, usize)> = positives
        .iter()
        .copied()
        .zip(negatives.iter().copied())
        .collect();
    let grad = bpr_mean_gradient(params, &UserRepr::for_client(kind, client), &pairs)?;
    Ok(LocalUpdate {
        grad,
        positives,
        negatives,
    })
}

/// Label-flipping update: the benign sample pairs with positive and
/// negative roles exchanged before the BPR backward pass.
pub fn label_flip_update(
    params: &ModelParams,
    user: &UserRepr,
    pairs: &[(usize, usize)],
) -> Result<SparseGradient> {
    let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(p, n)| (n, p)).collect();
    bpr_mean_gradient(params, user, &swapped)
}

/// Coordinate-wise mean/std the attacker estimates from gradients it can
/// produce itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BenignStatEstimate {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// How many self-computed gradients went into the estimate.
    pub n_visible: usize,
}

/// Two-pass coordinate-wise mean and population standard deviation over
/// densified benign-style gradients. A single gradient yields std = 0
/// (with a warning): the estimate is then a point mass.
pub fn estimate_benign_stats(gradients: &[Vec<f64>]) -> Result<BenignStatEstimate> {
    let n = gradients.len();
    if n == 0 {
        return Err(Error::AttackSetup(
            "benign statistics need at least one self-computed gradient".into(),
        ));
    }
    let len = gradients[0].len();
    for g in gradients {
        if g.len() != len {
            return Err(Error::ShapeMismatch {
                expected: len,
                actual: g.len(),
            });
        }
    }
    if n < 2 {
        log::warn!("benign statistics from a single gradient: std falls back to 0");
    }
    let mut mean = vec![0.0; len];
    for g in gradients {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; len];
    for g in gradients {
        for ((v, x), m) in var.iter_mut().zip(g).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(BenignStatEstimate {
        mean,
        std,
        n_visible: n,
    })
}

/// Gaussian attack: keeps the benign-style gradient's sparsity pattern
/// but replaces every touched coordinate with a draw from
/// `Normal(mean_c, std_c^2)` at that coordinate's dense offset.
///
/// Draws happen in a fixed order (user rows ascending, item rows
/// ascending, then predictor), so the update is a pure function of the
/// RNG state.
pub fn gaussian_update(
    pattern: &SparseGradient,
    stats: &BenignStatEstimate,
    meta: &ParamsMeta,
    rng: &mut impl Rng,
) -> Result<SparseGradient> {
    if stats.mean.len() != meta.dense_len() || stats.std.len() != meta.dense_len() {
        return Err(Error::ShapeMismatch {
            expected: meta.dense_len(),
            actual: stats.mean.len(),
        });
    }
    if pattern.predictor.len() != meta.predictor_len {
        return Err(Error::ShapeMismatch {
            expected: meta.predictor_len,
            actual: pattern.predictor.len(),
        });
    }
    let mut draw = |offset: usize| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        stats.mean[offset] + stats.std[offset] * z
    };
    let mut out = SparseGradient::empty(meta.predictor_len);
    for &row in pattern.user_rows.keys() {
        let off = meta.user_offset(row);
        out.user_rows
            .insert(row, (0..meta.dim).map(|c| draw(off + c)).collect());
    }
    for &row in pattern.item_rows.keys() {
        let off = meta.item_offset(row);
        out.item_rows
            .insert(row, (0..meta.dim).map(|c| draw(off + c)).collect());
    }
    let off = meta.predictor_offset();
    out.predictor = (0..meta.predictor_len).map(|c| draw(off + c)).collect();
    out.sample_count = pattern.sample_count;
    Ok(out)
}

/// LIE's noise multiplier: `z = quantile((n - m - s) / (n - m))` of the
/// standard normal with `s = floor(n/2 + 1) - m`, clamped to `z >= 0`.
pub fn lie_z(n: usize, m: usize) -> Result<f64> {
    if m < 1 || n <= m {
        return Err(Error::Config(format!(
            "lie needs 1 <= m < n, got n = {n}, m = {m}"
        )));
    }
    let s = (n / 2 + 1) as i64 - m as i64;
    let num = n as i64 - m as i64 - s;
    let den = (n - m) as i64;
    if num <= 0 || num >= den {
        return Err(Error::Config(format!(
            "lie quantile argument {num}/{den} lies outside (0, 1); set z_override"
        )));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(num as f64 / den as f64);
    Ok(z.max(0.0))
}

/// LIE update shared by all round Byzantines:
/// `mean + z * std` coordinate-wise.
pub fn lie_update(
    stats: &BenignStatEstimate,
    n: usize,
    m: usize,
    z_override: Option<f64>,
) -> Result<Vec<f64>> {
    if m < 1 || n <= m {
        return Err(Error::Config(format!(
            "lie needs 1 <= m < n, got n = {n}, m = {m}"
        )));
    }
    let z = match z_override {
        Some(z) => z,
        None => lie_z(n, m)?,
    };
    Ok(stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(mu, sd)| mu + z * sd)
        .collect())
}

/// Sign with `sign(0) = 0` (f64::signum maps +0.0 to 1.0, which would
/// inject noise on exactly-zero coordinates).
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// StatOpt update: constant noise against the estimated mean's direction,
/// `mean_c - lambda * sign(mean_c)` per coordinate.
pub fn stat_opt_update(stats: &BenignStatEstimate, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "stat_opt lambda must be positive, got {lambda}"
        )));
    }
    Ok(stats
        .mean
        .iter()
        .map(|&mu| mu - lambda * sign0(mu))
        .collect())
}

/// DynOpt update: `mean + gamma * p` with `p = -mean / ||mean||`, where
/// `gamma` is the largest value of the halving grid
/// `{gamma_init, gamma_init/2, ...}` (down to `gamma_step`) whose update
/// survives a local Krum probe with `f = m` over the attacker's own
/// benign-style gradients plus `m` copies of the candidate. A probe that
/// cannot be evaluated counts as not surviving; if nothing survives the
/// update uses `gamma_step`. A zero-norm mean falls back to StatOpt with
/// `lambda = gamma_init`.
pub fn dyn_opt_update(
    stats: &BenignStatEstimate,
    probe_grads: &[Vec<f64>],
    m: usize,
    gamma_init: f64,
    gamma_step: f64,
) -> Result<Vec<f64>> {
    validate_gammas(gamma_init, gamma_step)?;
    if m < 1 {
        return Err(Error::Config(
            "dyn_opt needs at least one Byzantine sender".into(),
        ));
    }
    let norm = stats.mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return stat_opt_update(stats, gamma_init);
    }
    let direction: Vec<f64> = stats.mean.iter().map(|x| -x / norm).collect();
    let candidate = |gamma: f64| -> Vec<f64> {
        stats
            .mean
            .iter()
            .zip(&direction)
            .map(|(mu, d)| mu + gamma * d)
            .collect()
    };
    let survives = |gamma: f64| -> bool {
        let cand = candidate(gamma);
        let mut probe: Vec<Vec<f64>> = probe_grads.to_vec();
        probe.extend(std::iter::repeat_n(cand, m));
        match krum_select(&probe, m) {
            Ok(idx) => idx >= probe_grads.len(),
            Err(_) => false,
        }
    };
    let gamma = halving_search(gamma_init, gamma_step, survives);
    Ok(candidate(gamma))
}

/// Largest value of `{gamma_init, gamma_init/2, ...}` not below
/// `gamma_step` for which the predicate holds, else `gamma_step`.
fn halving_search(gamma_init: f64, gamma_step: f64, mut survives: impl FnMut(f64) -> bool) -> f64 {
    let mut gamma = gamma_init;
    while gamma >= gamma_step {
        if survives(gamma) {
            return gamma;
        }
        gamma /= 2.0;
    }
    gamma_step
}
