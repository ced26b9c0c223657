//! Brute-force reference implementations.
//!
//! Everything here favors obviousness over speed and stays independent of
//! the production code paths it is used to check: sort-based order
//! statistics, full pairwise distance matrices, argsort retrieval, Jacobi
//! eigendecomposition, quadrature-based normal quantiles and central finite
//! differences. The randomized check drivers at the bottom power both the
//! acceptance suite and the `oracle` CLI subcommand.

use ndarray::Array2;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        grad[k] = (up - down) / (2.0 * h);
    }
    grad
}

fn sorted_column(updates: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut col: Vec<f64> = updates.iter().map(|u| u[k]).collect();
    col.sort_by(f64::total_cmp);
    col
}

/// Coordinate-wise median via full sort; even counts average the middles.
pub fn median_oracle(updates: &[Vec<f64>]) -> Vec<f64> {
    let n = updates.len();
    let dim = updates[0].len();
    (0..dim)
        .map(|k| {
            let col = sorted_column(updates, k);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Coordinate-wise beta-trimmed mean via full sort.
pub fn trimmed_mean_oracle(updates: &[Vec<f64>], beta: usize) -> Vec<f64> {
    let n = updates.len();
    let dim = updates[0].len();
    (0..dim)
        .map(|k| {
            let col = sorted_column(updates, k);
            let kept = &col[beta..n - beta];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores from the full O(n^2 d) pairwise distance matrix. The score
/// of update `i` sums its `neighbors` smallest squared distances (ascending)
/// to the other updates.
pub fn krum_scores_oracle(updates: &[Vec<f64>], neighbors: usize) -> Vec<f64> {
    let n = updates.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(&updates[i], &updates[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others.iter().take(neighbors).sum()
        })
        .collect()
}

/// Krum winner with `n - f - 2` neighbors; ties pick the lowest index.
pub fn krum_oracle(updates: &[Vec<f64>], f: usize) -> (usize, Vec<f64>) {
    let neighbors = updates.len() - f - 2;
    let scores = krum_scores_oracle(updates, neighbors);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    (best, updates[best].clone())
}

/// Iterative Multi-Krum by repeated re-scoring of the shrinking set. The
/// neighbor count degrades as the set shrinks (`max(0, s - f - 2)`); the
/// result is the mean of the selected updates in ascending input order.
pub fn multi_krum_oracle(updates: &[Vec<f64>], f: usize, m_select: usize) -> Vec<f64> {
    let mut remaining: Vec<usize> = (0..updates.len()).collect();
    let mut selected = Vec::with_capacity(m_select);
    for _ in 0..m_select {
        let s = remaining.len();
        let neighbors = s.saturating_sub(f + 2);
        let set: Vec<Vec<f64>> = remaining.iter().map(|&i| updates[i].clone()).collect();
        let scores = krum_scores_oracle(&set, neighbors);
        let mut best = 0;
        for (p, &sc) in scores.iter().enumerate() {
            if sc < scores[best] {
                best = p;
            }
        }
        selected.push(remaining.remove(best));
    }
    selected.sort_unstable();
    let dim = updates[0].len();
    let mut mean = vec![0.0; dim];
    for &i in &selected {
        for k in 0..dim {
            mean[k] += updates[i][k];
        }
    }
    for x in &mut mean {
        *x /= selected.len() as f64;
    }
    mean
}

/// Argsort retrieval: ids of the `k` best scores. `largest` selects the
/// top end; ties always break toward the smaller id.
pub fn select_k_oracle(scored: &[(usize, f64)], k: usize, largest: bool) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scored.to_vec();
    order.sort_by(|a, b| {
        let by_score = if largest {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then(a.0.cmp(&b.0))
    });
    order.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Definitional rank: 1 + strictly-higher count + half the ties, rounded
/// down. `others` excludes the target itself.
pub fn rank_oracle(target_score: f64, others: &[f64]) -> usize {
    let higher = others.iter().filter(|&&s| s > target_score).count();
    let ties = others.iter().filter(|&&s| s == target_score).count();
    1 + higher + ties / 2
}

/// Two-pass coordinate-wise mean and population standard deviation.
pub fn mean_std_oracle(vectors: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = vectors.len();
    let dim = vectors[0].len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for k in 0..dim {
            mean[k] += v[k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for v in vectors {
        for k in 0..dim {
            let d = v[k] - mean[k];
            var[k] += d * d;
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF by Simpson quadrature over [0, |z|] plus symmetry.
pub fn normal_cdf_quadrature(z: f64) -> f64 {
    let steps = 4000usize;
    let b = z.abs().min(40.0);
    let h = b / steps as f64;
    let mut acc = normal_pdf(0.0) + normal_pdf(b);
    for i in 1..steps {
        let x = i as f64 * h;
        acc += normal_pdf(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = acc * h / 3.0;
    if z >= 0.0 {
        0.5 + integral
    } else {
        0.5 - integral
    }
}

/// Standard normal quantile by bisection over the quadrature CDF.
/// `p` must lie strictly inside (0, 1).
pub fn normal_quantile_oracle(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1)");
    let (mut lo, mut hi) = (-12.0_f64, 12.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_quadrature(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// sorted descending.
pub fn jacobi_eigenvalues(sym: &Array2<f64>) -> Vec<f64> {
    let n = sym.nrows();
    assert_eq!(n, sym.ncols(), "matrix must be square");
    let mut a = sym.clone();
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    off += a[[p, q]] * a[[p, q]];
                }
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    let sign = if theta > 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

// -----------------------------------------------------------------------
// Randomized check drivers
// -----------------------------------------------------------------------

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{hardest_negatives, hardest_pseudo_positives, CandidatePool};
use crate::defenses::{apply_rule, AggregationRule};
use crate::error::Result;
use crate::eval::{hr_at_k, ndcg_at_k, pca_project};
use crate::model::{
    bpr_loss, bpr_mean_gradient, init_params, score, user_embed, PredictorKind, UserModelKind,
    UserRepr,
};

/// Outcome of one randomized oracle check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    /// Individual comparisons performed.
    pub cases: usize,
    pub failures: usize,
    /// Largest relative error observed (0 for exact-match checks).
    pub worst_error: f64,
    /// Error bound the check enforces; 0 means exact equality.
    pub tolerance: f64,
    /// Wall time of the whole check.
    pub elapsed_secs: f64,
    /// Description of the first failing case, when any.
    pub detail: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// One status line suitable for console output.
    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let bound = if self.tolerance > 0.0 {
            format!("worst rel {:.2e}, tol {:.0e}", self.worst_error, self.tolerance)
        } else {
            "exact".to_string()
        };
        let mut line = format!(
            "{}: {status} ({} of {} cases failed; {bound}; {:.2}s)",
            self.name, self.failures, self.cases, self.elapsed_secs
        );
        if let Some(d) = &self.detail {
            line.push_str(&format!("\n  first failure: {d}"));
        }
        line
    }
}

struct CheckState {
    cases: usize,
    failures: usize,
    worst: f64,
    detail: Option<String>,
}

impl CheckState {
    fn new() -> Self {
        CheckState {
            cases: 0,
            failures: 0,
            worst: 0.0,
            detail: None,
        }
    }

    fn record_exact<T: PartialEq + std::fmt::Debug>(&mut self, got: &T, want: &T, what: impl Fn() -> String) {
        self.cases += 1;
        if got != want {
            self.failures += 1;
            if self.detail.is_none() {
                self.detail = Some(format!("{}: got {:?}, oracle {:?}", what(), got, want));
            }
        }
    }

    fn record_rel(&mut self, err: f64, tol: f64, what: impl Fn() -> String) {
        self.cases += 1;
        if err > self.worst {
            self.worst = err;
        }
        if !(err < tol) {
            self.failures += 1;
            if self.detail.is_none() {
                self.detail = Some(format!("{}: relative error {err:.3e}", what()));
            }
        }
    }

    fn finish(self, name: &'static str, tolerance: f64, started: Instant) -> CheckReport {
        CheckReport {
            name,
            cases: self.cases,
            failures: self.failures,
            worst_error: self.worst,
            tolerance,
            elapsed_secs: started.elapsed().as_secs_f64(),
            detail: self.detail,
        }
    }
}

fn rel_vec_error(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Analytic BPR gradients vs central finite differences for every
/// (user model, predictor) combination on random d=4 instances.
pub fn check_gradients(instances: usize, seed: u64) -> Result<CheckReport> {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CheckState::new();
    for inst in 0..instances {
        let num_users = rng.random_range(2..=5);
        let num_items = rng.random_range(4..=10);
        let n_pairs = rng.random_range(1..=3);
        let profile_len = rng.random_range(1..=4);
        let pairs: Vec<(usize, usize)> = (0..n_pairs)
            .map(|_| {
                let pos = rng.random_range(0..num_items);
                let neg = loop {
                    let c = rng.random_range(0..num_items);
                    if c != pos {
                        break c;
                    }
                };
                (pos, neg)
            })
            .collect();
        let user_id = rng.random_range(0..num_users);
        let profile: Vec<usize> = (0..profile_len)
            .map(|_| rng.random_range(0..num_items))
            .collect();
        for predictor in [PredictorKind::DotProduct, PredictorKind::Mlp] {
            let mut params = init_params(num_users, num_items, 4, predictor, rng.random())?;
            let dense0: Vec<f64> = (0..params.meta().dense_len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            params.assign_dense(&dense0)?;
            for user_model in [UserModelKind::IdEmbedding, UserModelKind::SeqMean] {
                let user = match user_model {
                    UserModelKind::IdEmbedding => UserRepr::Id(user_id),
                    UserModelKind::SeqMean => UserRepr::Seq(&profile),
                };
                let analytic = bpr_mean_gradient(&params, &user, &pairs)?
                    .densify(&params.meta())?;
                let base = params.clone();
                let loss = |x: &[f64]| {
                    let mut p = base.clone();
                    p.assign_dense(x).expect("matching length");
                    let u = user_embed(&p, &user).expect("valid user");
                    let total: f64 = pairs
                        .iter()
                        .map(|&(pos, neg)| {
                            bpr_loss(score(&p, &u, pos), score(&p, &u, neg))
                                .expect("finite scores")
                        })
                        .sum();
                    total / pairs.len() as f64
                };
                let numeric = finite_difference(&loss, &dense0, H);
                state.record_rel(rel_vec_error(&analytic, &numeric), TOL, || {
                    format!(
                        "instance {inst}, {} + {}",
                        user_model.label(),
                        predictor.label()
                    )
                });
            }
        }
    }
    Ok(state.finish("gradient check", TOL, started))
}

/// Median/TrimmedMean vs sort-based oracles and Krum/Multi-Krum vs the
/// brute-force scorer, exact equality, on random small instances.
pub fn check_aggregators(instances: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CheckState::new();
    for inst in 0..instances {
        let n = rng.random_range(3..=8);
        let d = rng.random_range(1..=16);
        let updates: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let beta = rng.random_range(0..=(n - 1) / 2);
        let f = rng.random_range(0..=n - 3);
        let m_select = rng.random_range(1..=n);

        let got = apply_rule(&AggregationRule::Median, &updates, 0.0)?;
        state.record_exact(&got, &median_oracle(&updates), || {
            format!("instance {inst}: median n={n} d={d}")
        });

        let got = apply_rule(
            &AggregationRule::TrimmedMean { beta: Some(beta) },
            &updates,
            0.0,
        )?;
        state.record_exact(&got, &trimmed_mean_oracle(&updates, beta), || {
            format!("instance {inst}: trimmed mean n={n} d={d} beta={beta}")
        });

        let got = apply_rule(&AggregationRule::Krum { f: Some(f) }, &updates, 0.0)?;
        state.record_exact(&got, &krum_oracle(&updates, f).1, || {
            format!("instance {inst}: krum n={n} d={d} f={f}")
        });

        let got = apply_rule(
            &AggregationRule::MultiKrum {
                f: Some(f),
                m_select: Some(m_select),
            },
            &updates,
            0.0,
        )?;
        state.record_exact(&got, &multi_krum_oracle(&updates, f, m_select), || {
            format!("instance {inst}: multi-krum n={n} d={d} f={f} m={m_select}")
        });
    }
    Ok(state.finish("aggregator check", 0.0, started))
}

/// Hardest-negative / hardest-pseudo-positive retrieval vs the argsort
/// oracle, exact id sequences, on random pools.
pub fn check_retrieval(pools: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CheckState::new();
    for inst in 0..pools {
        let num_items = rng.random_range(5..=500);
        let dim = rng.random_range(2..=8);
        let mut table = Array2::zeros((num_items, dim));
        for v in table.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool_items: Vec<usize> = if rng.random_range(0..2) == 0 {
            (0..num_items).collect()
        } else {
            let size = rng.random_range(2..=num_items);
            let mut picked = rand::seq::index::sample(&mut rng, num_items, size).into_vec();
            picked.sort_unstable();
            picked
        };
        let exclude: HashSet<usize> = pool_items
            .iter()
            .copied()
            .filter(|_| rng.random_range(0.0..1.0) < 0.2)
            .collect();
        let available: Vec<usize> = pool_items
            .iter()
            .copied()
            .filter(|i| !exclude.contains(i))
            .collect();
        if available.is_empty() {
            continue;
        }
        let k = rng.random_range(1..=available.len());
        let pool = CandidatePool { items: pool_items };
        let scored: Vec<(usize, f64)> = available
            .iter()
            .map(|&i| {
                let row = table.row(i);
                (i, u.iter().zip(row.iter()).map(|(a, b)| a * b).sum())
            })
            .collect();

        let got = hardest_negatives(&table, &u, k, &pool, &exclude)?;
        state.record_exact(&got, &select_k_oracle(&scored, k, true), || {
            format!("pool {inst}: negatives |pool|={} k={k}", pool.items.len())
        });
        let got = hardest_pseudo_positives(&table, &u, k, &pool, &exclude)?;
        state.record_exact(&got, &select_k_oracle(&scored, k, false), || {
            format!("pool {inst}: pseudo-positives |pool|={} k={k}", pool.items.len())
        });
    }
    Ok(state.finish("retrieval check", 0.0, started))
}

/// HR@5 / nDCG@5 against definitional values on every rank 1..=20.
pub fn check_metrics() -> Result<CheckReport> {
    let started = Instant::now();
    let mut state = CheckState::new();
    // Anchors where the discount log is an exact integer.
    let anchors = [(1, 1.0), (3, 0.5), (7, 1.0 / 3.0), (15, 0.25)];
    for rank in 1..=20usize {
        let want_hr = if rank <= 5 { 1.0 } else { 0.0 };
        state.record_exact(&hr_at_k(rank, 5), &want_hr, || format!("hr rank {rank}"));
        let want_ndcg = if rank <= 5 {
            1.0 / ((rank + 1) as f64).log2()
        } else {
            0.0
        };
        state.record_exact(&ndcg_at_k(rank, 5), &want_ndcg, || {
            format!("ndcg rank {rank}")
        });
    }
    for (rank, want) in anchors {
        state.record_exact(&ndcg_at_k(rank, 20), &want, || {
            format!("ndcg anchor rank {rank}")
        });
    }
    Ok(state.finish("metric check", 0.0, started))
}

/// Power-iteration PCA eigenvalues vs the Jacobi eigensolver on random
/// feature matrices.
pub fn check_pca(instances: usize, seed: u64) -> Result<CheckReport> {
    const TOL: f64 = 1e-6;
    const ROWS: usize = 50;
    const COLS: usize = 8;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CheckState::new();
    for inst in 0..instances {
        let rows: Vec<Vec<f64>> = (0..ROWS)
            .map(|_| (0..COLS).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let projection = pca_project(&rows, 2)?;
        // Independent covariance + full eigendecomposition.
        let mut mean = vec![0.0; COLS];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= ROWS as f64;
        }
        let mut cov = Array2::zeros((COLS, COLS));
        for r in &rows {
            for a in 0..COLS {
                for b in 0..COLS {
                    cov[[a, b]] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        cov /= (ROWS - 1) as f64;
        let reference = jacobi_eigenvalues(&cov);
        for (c, (&got, &want)) in projection
            .eigenvalues
            .iter()
            .zip(reference.iter())
            .enumerate()
        {
            let err = (got - want).abs() / want.abs().max(1e-12);
            state.record_rel(err, TOL, || {
                format!("matrix {inst}: eigenvalue {c} got {got:.9} want {want:.9}")
            });
        }
    }
    Ok(state.finish("pca check", TOL, started))
}

/// Runs every oracle check at the acceptance-criteria case counts.
pub fn run_all_checks(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_gradients(100, seed)?,
        check_aggregators(500, seed)?,
        check_retrieval(1000, seed)?,
        check_metrics()?,
        check_pca(100, seed)?,
    ])
}
