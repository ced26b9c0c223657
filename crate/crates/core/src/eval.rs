//! Ranking evaluation, hardness analysis, gradient PCA and CSV emitters.
//!
//! Ranking is exact: every candidate item is scored, ties around the target
//! count half each (rounded down). Epoch metrics average over benign
//! clients only, in client-id order, so results do not depend on thread
//! scheduling.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::{ClientProfile, ClientRegistry, Role};
use crate::error::{Error, Result};
use crate::model::{score, user_embed, ModelParams, UserModelKind, UserRepr};
use crate::rng::{stream, StreamTag};

/// Which held-out item an evaluation ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankTarget {
    Test,
    Validation,
}

/// Exact rank of one client's held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankingResult {
    pub client: usize,
    pub rank: usize,
    /// Number of items the target competed against, itself included.
    pub candidates: usize,
}

/// Rank from a target score and the scores of all other candidates:
/// 1 + strictly-higher count + half the ties, rounded down.
pub fn rank_from_scores<I: IntoIterator<Item = f64>>(target_score: f64, others: I) -> usize {
    let mut higher = 0usize;
    let mut ties = 0usize;
    for s in others {
        if s > target_score {
            higher += 1;
        } else if s == target_score {
            ties += 1;
        }
    }
    1 + higher + ties / 2
}

/// Ranks a client's held-out item over the full item universe minus the
/// exclusion set (train plus the other held-out item when `exclude_seen`).
/// The target itself always stays in the candidate set.
pub fn rank_for_client(
    params: &ModelParams,
    client: &ClientProfile,
    kind: UserModelKind,
    exclude_seen: bool,
    target: RankTarget,
) -> Result<RankingResult> {
    let num_items = params.num_items();
    let target_item = match target {
        RankTarget::Test => client.test_item,
        RankTarget::Validation => client.val_item,
    };
    if target_item >= num_items {
        return Err(Error::ShapeMismatch {
            expected: num_items,
            actual: target_item,
        });
    }
    let mut excluded = vec![false; num_items];
    if exclude_seen {
        for &it in &client.train_items {
            excluded[it] = true;
        }
        match target {
            RankTarget::Test => excluded[client.val_item] = true,
            RankTarget::Validation => excluded[client.test_item] = true,
        }
    }
    excluded[target_item] = false;
    let u = user_embed(params, &UserRepr::for_client(kind, client))?;
    let target_score = score(params, &u, target_item);
    if target_score.is_nan() {
        return Err(Error::Numeric(format!(
            "NaN score for client {} target item {target_item}",
            client.user_id
        )));
    }
    let mut higher = 0usize;
    let mut ties = 0usize;
    let mut candidates = 1usize;
    for item in 0..num_items {
        if item == target_item || excluded[item] {
            continue;
        }
        candidates += 1;
        let s = score(params, &u, item);
        if s > target_score {
            higher += 1;
        } else if s == target_score {
            ties += 1;
        }
    }
    Ok(RankingResult {
        client: client.user_id,
        rank: 1 + higher + ties / 2,
        candidates,
    })
}

/// Hit rate at `k`: 1 if the rank is within the cutoff.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item nDCG at `k`: `1 / log2(rank + 1)` within the
/// cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mean HR@k and nDCG@k over benign clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEval {
    pub hr: f64,
    pub ndcg: f64,
}

/// Evaluates the current parameters over every benign client in parallel;
/// the reduction runs in client-id order.
pub fn evaluate_epoch(
    params: &ModelParams,
    registry: &ClientRegistry,
    kind: UserModelKind,
    k: usize,
    exclude_seen: bool,
    target: RankTarget,
) -> Result<EpochEval> {
    let benign: Vec<&ClientProfile> = registry
        .clients
        .iter()
        .filter(|c| c.role == Role::Benign)
        .collect();
    if benign.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one benign client".into(),
        ));
    }
    let per_client: Vec<Result<RankingResult>> = benign
        .par_iter()
        .map(|c| rank_for_client(params, c, kind, exclude_seen, target))
        .collect();
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    for res in per_client {
        let r = res?;
        hr += hr_at_k(r.rank, k);
        ndcg += ndcg_at_k(r.rank, k);
    }
    let n = benign.len() as f64;
    Ok(EpochEval {
        hr: hr / n,
        ndcg: ndcg / n,
    })
}

/// Lower bucket edges for profile-length hardness analysis.
pub const HARDNESS_EDGES: [usize; 7] = [1, 5, 10, 20, 50, 100, 200];

/// Bucket index of a profile length: largest edge not exceeding it.
pub fn hardness_bucket(profile_len: usize) -> usize {
    let mut bucket = 0;
    for (i, &edge) in HARDNESS_EDGES.iter().enumerate() {
        if profile_len >= edge {
            bucket = i;
        }
    }
    bucket
}

/// Human-readable bucket labels for CSV output.
pub fn bucket_label(bucket: usize) -> &'static str {
    const LABELS: [&str; 7] = ["1-4", "5-9", "10-19", "20-49", "50-99", "100-199", "200+"];
    LABELS[bucket]
}

/// Sampled item polarity within a local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn label(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// The items one client sampled (or fabricated) in one round.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub epoch: usize,
    pub round: usize,
    pub client_id: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Mean/std of user-item inner products for one
/// (bucket, role, polarity) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessCell {
    pub bucket: usize,
    pub role: Role,
    pub polarity: Polarity,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// All non-empty hardness cells, sorted by (bucket, role, polarity).
#[derive(Debug, Clone, Default)]
pub struct HardnessProfile {
    pub cells: Vec<HardnessCell>,
}

impl HardnessProfile {
    pub fn cell(&self, bucket: usize, role: Role, polarity: Polarity) -> Option<&HardnessCell> {
        self.cells
            .iter()
            .find(|c| c.bucket == bucket && c.role == role && c.polarity == polarity)
    }

    /// Sample-weighted mean over all buckets of one (role, polarity) pair,
    /// with the pooled sample count.
    pub fn overall(&self, role: Role, polarity: Polarity) -> Option<(f64, usize)> {
        let mut total = 0usize;
        let mut acc = 0.0;
        for c in &self.cells {
            if c.role == role && c.polarity == polarity {
                total += c.n;
                acc += c.mean * c.n as f64;
            }
        }
        if total == 0 {
            None
        } else {
            Some((acc / total as f64, total))
        }
    }
}

/// Buckets logged sampler outputs by client profile length and summarizes
/// `<u, item>` inner products per (bucket, role, polarity) under the
/// given parameters.
pub fn hardness_profile(
    params: &ModelParams,
    registry: &ClientRegistry,
    kind: UserModelKind,
    samples: &[SampleRecord],
) -> Result<HardnessProfile> {
    let mut embeds: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut pools: HashMap<(usize, Role, Polarity), Vec<f64>> = HashMap::new();
    for rec in samples {
        let client = registry
            .clients
            .get(rec.client_id)
            .ok_or_else(|| Error::Config(format!("unknown client {}", rec.client_id)))?;
        let bucket = hardness_bucket(client.train_items.len());
        let u = match embeds.entry(rec.client_id) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(user_embed(params, &UserRepr::for_client(kind, client))?)
            }
        };
        for (polarity, items) in [
            (Polarity::Positive, &rec.positives),
            (Polarity::Negative, &rec.negatives),
        ] {
            if items.is_empty() {
                continue;
            }
            let pool = pools.entry((bucket, client.role, polarity)).or_default();
            for &item in items {
                if item >= params.num_items() {
                    return Err(Error::ShapeMismatch {
                        expected: params.num_items(),
                        actual: item,
                    });
                }
                let row = params.item_table.row(item);
                let sim: f64 = u.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                pool.push(sim);
            }
        }
    }
    let mut keys: Vec<(usize, Role, Polarity)> = pools.keys().copied().collect();
    keys.sort_by_key(|&(bucket, role, polarity)| {
        (
            bucket,
            role == Role::Byzantine,
            polarity == Polarity::Negative,
        )
    });
    let cells = keys
        .into_iter()
        .map(|key| {
            let values = &pools[&key];
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            HardnessCell {
                bucket: key.0,
                role: key.1,
                polarity: key.2,
                mean,
                std: var.sqrt(),
                n,
            }
        })
        .collect();
    Ok(HardnessProfile { cells })
}

/// Projection of feature rows onto leading principal components.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One row per input row, `out_dim` coordinates each.
    pub coords: Vec<Vec<f64>>,
    /// Leading eigenvalues of the sample covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue fractions of total variance.
    pub explained: Vec<f64>,
    /// Unit-norm principal directions, one per eigenvalue.
    pub components: Vec<Vec<f64>>,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 10_000;

/// PCA by power iteration with deflation on the sample covariance
/// (divisor n - 1). The start vector comes from a fixed stream, so the
/// decomposition is deterministic. Requires at least 3 rows of dimension
/// at least 2.
pub fn pca_project(rows: &[Vec<f64>], out_dim: usize) -> Result<PcaProjection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::Config(format!("pca needs at least 3 rows, got {n}")));
    }
    let f = rows[0].len();
    if f < 2 {
        return Err(Error::Config(format!(
            "pca needs at least 2 feature dimensions, got {f}"
        )));
    }
    if out_dim == 0 || out_dim > f {
        return Err(Error::Config(format!(
            "pca out_dim must lie in [1, {f}], got {out_dim}"
        )));
    }
    for r in rows {
        if r.len() != f {
            return Err(Error::ShapeMismatch {
                expected: f,
                actual: r.len(),
            });
        }
    }
    let mut mean = vec![0.0; f];
    for r in rows {
        for k in 0..f {
            mean[k] += r[k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; f]; f];
    for r in &centered {
        for i in 0..f {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..f {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for row in &mut cov {
        for x in row.iter_mut() {
            *x /= denom;
        }
    }
    let trace: f64 = (0..f).map(|i| cov[i][i]).sum();

    let mut eigenvalues = Vec::with_capacity(out_dim);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    for comp in 0..out_dim {
        use rand::Rng;
        let mut rng = stream(0, StreamTag::PcaStart, &[comp as u64]);
        let mut v: Vec<f64> = (0..f).map(|_| rng.random::<f64>() - 0.5).collect();
        normalize(&mut v);
        let mut rank_deficient = false;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = mat_vec(&cov, &v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                rank_deficient = true;
                break;
            }
            for x in &mut w {
                *x /= norm;
            }
            if dot(&w, &v) < 0.0 {
                for x in &mut w {
                    *x = -*x;
                }
            }
            let delta = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        let lambda = if rank_deficient {
            0.0
        } else {
            dot(&v, &mat_vec(&cov, &v))
        };
        // Canonical sign: the largest-magnitude coefficient is positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        for i in 0..f {
            for j in 0..f {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }
    let coords = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    let explained = eigenvalues
        .iter()
        .map(|&l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(PcaProjection {
        coords,
        eigenvalues,
        explained,
        components,
    })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsCsvRow {
    pub epoch: usize,
    pub hr5: f64,
    pub ndcg5: f64,
}

/// Renders the per-epoch metrics CSV
/// (`epoch,hr5,ndcg5,defense,attack,byz_ratio,seed`).
pub fn metrics_csv(
    rows: &[MetricsCsvRow],
    defense: &str,
    attack: &str,
    byz_ratio: f64,
    seed: u64,
) -> String {
    let mut out = String::from("epoch,hr5,ndcg5,defense,attack,byz_ratio,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{}",
            r.epoch, r.hr5, r.ndcg5, defense, attack, byz_ratio, seed
        );
    }
    out
}

/// Renders the hardness CSV (`bucket,role,polarity,mean,std,n`).
pub fn hardness_csv(profile: &HardnessProfile) -> String {
    let mut out = String::from("bucket,role,polarity,mean,std,n\n");
    for c in &profile.cells {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            bucket_label(c.bucket),
            c.role.label(),
            c.polarity.label(),
            c.mean,
            c.std,
            c.n
        );
    }
    out
}

/// One point of the gradient-PCA scatter.
#[derive(Debug, Clone, Copy)]
pub struct PcaCsvRow {
    pub client: usize,
    pub role: Role,
    pub x: f64,
    pub y: f64,
}

/// Renders the PCA scatter CSV (`client,role,x,y`).
pub fn pca_csv(rows: &[PcaCsvRow]) -> String {
    let mut out = String::from("client,role,x,y\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.client,
            r.role.label(),
            r.x,
            r.y
        );
    }
    out
}

/// Renders the per-attack detector accuracy CSV (`attack,accuracy`),
/// accuracy to three decimals.
pub fn detector_accuracy_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("attack,accuracy\n");
    for (attack, acc) in rows {
        let _ = writeln!(out, "{},{:.3}", attack, acc);
    }
    out
}
