//! Robust aggregation rules applied server-side to densified client updates.
//!
//! All rules take the round's updates in a fixed order (the caller sorts by
//! client id) and return one dense update. Preconditions are validated here
//! and reported as config errors so a bad sweep cell fails loudly instead of
//! silently degrading.

use crate::error::{Error, Result};

/// Server aggregation rule. `None` option fields fall back to derived
/// defaults at dispatch time: `f = max(1, round(ratio * n))`, `beta = f`,
/// `m_select = n - f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationRule {
    Mean,
    Median,
    TrimmedMean { beta: Option<usize> },
    Krum { f: Option<usize> },
    MultiKrum { f: Option<usize>, m_select: Option<usize> },
    NormBound { tau: f64 },
}

impl AggregationRule {
    pub fn label(&self) -> &'static str {
        match self {
            AggregationRule::Mean => "mean",
            AggregationRule::Median => "median",
            AggregationRule::TrimmedMean { .. } => "trimmed_mean",
            AggregationRule::Krum { .. } => "krum",
            AggregationRule::MultiKrum { .. } => "multi_krum",
            AggregationRule::NormBound { .. } => "norm_bound",
        }
    }
}

/// Default expected-Byzantine count for a round of `n` updates.
pub fn default_f(byzantine_ratio: f64, n: usize) -> usize {
    ((byzantine_ratio * n as f64).round() as usize).max(1)
}

fn validate(updates: &[Vec<f64>]) -> Result<usize> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Config("aggregation received no updates".into()));
    }
    let dim = updates[0].len();
    for u in updates {
        if u.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: u.len(),
            });
        }
    }
    Ok(dim)
}

/// Equal-weight coordinate-wise mean in input order.
pub fn agg_mean(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = validate(updates)?;
    let mut out = vec![0.0; dim];
    for u in updates {
        for k in 0..dim {
            out[k] += u[k];
        }
    }
    let n = updates.len() as f64;
    for x in &mut out {
        *x /= n;
    }
    Ok(out)
}

/// Coordinate-wise median; even counts take the midpoint of the two
/// middle values.
pub fn agg_median(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = validate(updates)?;
    let n = updates.len();
    let mut out = vec![0.0; dim];
    let mut col = vec![0.0; n];
    for k in 0..dim {
        for (i, u) in updates.iter().enumerate() {
            col[i] = u[k];
        }
        let mid = n / 2;
        if n % 2 == 1 {
            let (_, m, _) = col.select_nth_unstable_by(mid, f64::total_cmp);
            out[k] = *m;
        } else {
            let (lower, m, _) = col.select_nth_unstable_by(mid, f64::total_cmp);
            let below = lower
                .iter()
                .copied()
                .max_by(f64::total_cmp)
                .expect("n >= 2");
            out[k] = (below + *m) / 2.0;
        }
    }
    Ok(out)
}

/// Coordinate-wise trimmed mean dropping the `beta` smallest and `beta`
/// largest values. Requires `n > 2 * beta`.
pub fn agg_trimmed_mean(updates: &[Vec<f64>], beta: usize) -> Result<Vec<f64>> {
    let dim = validate(updates)?;
    let n = updates.len();
    if n <= 2 * beta {
        return Err(Error::Config(format!(
            "trimmed mean needs n > 2*beta, got n = {n}, beta = {beta}"
        )));
    }
    let mut out = vec![0.0; dim];
    let mut col = vec![0.0; n];
    for k in 0..dim {
        for (i, u) in updates.iter().enumerate() {
            col[i] = u[k];
        }
        col.sort_unstable_by(f64::total_cmp);
        let kept = &col[beta..n - beta];
        out[k] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(out)
}

/// Krum scores with an explicit neighbor count; exposed for the Multi-Krum
/// iteration and the DynOpt probe. Distances are summed ascending.
fn krum_scores(updates: &[Vec<f64>], neighbors: usize) -> Vec<f64> {
    let n = updates.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = updates[i]
                .iter()
                .zip(&updates[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut scores = vec![0.0; n];
    let mut row = vec![0.0; n.saturating_sub(1)];
    for i in 0..n {
        let mut at = 0;
        for j in 0..n {
            if j != i {
                row[at] = dist[i * n + j];
                at += 1;
            }
        }
        row.sort_unstable_by(f64::total_cmp);
        scores[i] = row.iter().take(neighbors).sum();
    }
    scores
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Index selected by Krum with `n - f - 2` nearest neighbors; score ties
/// resolve to the lowest index. Requires `n - f - 2 >= 1`.
pub fn krum_select(updates: &[Vec<f64>], f: usize) -> Result<usize> {
    let n = updates.len();
    validate(updates)?;
    if n < f + 3 {
        return Err(Error::Config(format!(
            "krum needs n - f - 2 >= 1, got n = {n}, f = {f}"
        )));
    }
    Ok(argmin(&krum_scores(updates, n - f - 2)))
}

/// Krum: returns the single selected update.
pub fn agg_krum(updates: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    let idx = krum_select(updates, f)?;
    Ok(updates[idx].clone())
}

/// Multi-Krum: repeats Krum selection `m_select` times, removing each
/// winner, then averages the selected updates in ascending input order.
///
/// The neighbor count degrades to `max(0, s - f - 2)` as the remaining set
/// shrinks; once it reaches zero all scores tie at zero and the lowest
/// index wins, so `m_select = n` reproduces the plain mean.
pub fn agg_multi_krum(updates: &[Vec<f64>], f: usize, m_select: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    validate(updates)?;
    if m_select == 0 || m_select > n {
        return Err(Error::Config(format!(
            "multi-krum needs 1 <= m_select <= n, got m_select = {m_select}, n = {n}"
        )));
    }
    if n < f + 3 {
        return Err(Error::Config(format!(
            "multi-krum needs n - f - 2 >= 1 on the initial set, got n = {n}, f = {f}"
        )));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::with_capacity(m_select);
    for _ in 0..m_select {
        let set: Vec<Vec<f64>> = remaining.iter().map(|&i| updates[i].clone()).collect();
        let neighbors = set.len().saturating_sub(f + 2);
        let winner = argmin(&krum_scores(&set, neighbors));
        selected.push(remaining.remove(winner));
    }
    selected.sort_unstable();
    let chosen: Vec<Vec<f64>> = selected.iter().map(|&i| updates[i].clone()).collect();
    agg_mean(&chosen)
}

/// Norm bounding: scales each update to L2 norm at most `tau`, then
/// averages. Zero-norm updates pass through unscaled.
pub fn agg_norm_bound(updates: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    validate(updates)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "norm bound needs tau > 0, got {tau}"
        )));
    }
    let scaled: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let factor = if norm > 0.0 { (tau / norm).min(1.0) } else { 1.0 };
            u.iter().map(|x| x * factor).collect()
        })
        .collect();
    agg_mean(&scaled)
}

/// Dispatches a rule with derived defaults for its free parameters.
pub fn apply_rule(
    rule: &AggregationRule,
    updates: &[Vec<f64>],
    byzantine_ratio: f64,
) -> Result<Vec<f64>> {
    let n = updates.len();
    let f_default = default_f(byzantine_ratio, n);
    match rule {
        AggregationRule::Mean => agg_mean(updates),
        AggregationRule::Median => agg_median(updates),
        AggregationRule::TrimmedMean { beta } => {
            agg_trimmed_mean(updates, beta.unwrap_or(f_default))
        }
        AggregationRule::Krum { f } => agg_krum(updates, f.unwrap_or(f_default)),
        AggregationRule::MultiKrum { f, m_select } => {
            let f = f.unwrap_or(f_default);
            let m = m_select.unwrap_or_else(|| n.saturating_sub(f).max(1));
            agg_multi_krum(updates, f, m)
        }
        AggregationRule::NormBound { tau } => agg_norm_bound(updates, *tau),
    }
}
