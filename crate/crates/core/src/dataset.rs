//! Interaction logs, chronological splits and the federated client registry.
//!
//! All ratings are treated as positive implicit feedback. Users with fewer
//! than three interactions are dropped so that every client keeps at least
//! one training item after the leave-one-out split. Raw ids are remapped to
//! contiguous 0-based integers; the mapping can be persisted as two-column
//! TSV for traceability.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};

/// Supported interaction-log file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// `user::item::rating::timestamp` records.
    MovieLensDat,
    /// `user<TAB>item<TAB>timestamp` records.
    Tsv,
}

/// One user-item interaction after id remapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// A loaded, filtered and remapped interaction log.
///
/// `records` is sorted by user, then by timestamp ascending with ties kept
/// in original file order.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub user_count: usize,
    pub item_count: usize,
    /// Remapped user id -> original id.
    pub user_ids: Vec<u64>,
    /// Remapped item id -> original id.
    pub item_ids: Vec<u64>,
}

/// Minimum interactions a user must have to become a client.
pub const MIN_INTERACTIONS: usize = 3;

fn parse_line(line: &str, lineno: usize, format: LogFormat) -> Result<(u64, u64, i64)> {
    let err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = match format {
        LogFormat::MovieLensDat => line.split("::").collect(),
        LogFormat::Tsv => line.split('\t').collect(),
    };
    let expected = match format {
        LogFormat::MovieLensDat => 4,
        LogFormat::Tsv => 3,
    };
    if fields.len() != expected {
        return Err(err(format!(
            "expected {expected} fields, found {}",
            fields.len()
        )));
    }
    let user: u64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad user id {:?}", fields[0])))?;
    let item: u64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad item id {:?}", fields[1])))?;
    if format == LogFormat::MovieLensDat {
        let _rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad rating {:?}", fields[2])))?;
    }
    let ts_field = fields[expected - 1];
    let timestamp: i64 = ts_field
        .trim()
        .parse()
        .map_err(|_| err(format!("bad timestamp {:?}", ts_field)))?;
    Ok((user, item, timestamp))
}

/// Parses an interaction log from a reader.
pub fn parse_interactions<R: Read>(reader: R, format: LogFormat) -> Result<InteractionLog> {
    let mut raw = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty line".into(),
            });
        }
        raw.push(parse_line(&line, idx + 1, format)?);
    }
    InteractionLog::from_raw(&raw)
}

/// Loads an interaction log from a file.
pub fn load_interactions(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)?;
    parse_interactions(file, format)
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` rows in file order:
    /// drops sparse users, remaps ids by first appearance among retained
    /// rows, and sorts per user by timestamp (stable in file order).
    pub fn from_raw(rows: &[(u64, u64, i64)]) -> Result<InteractionLog> {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for &(user, _, _) in rows {
            *counts.entry(user).or_insert(0) += 1;
        }
        let mut user_map: HashMap<u64, usize> = HashMap::new();
        let mut item_map: HashMap<u64, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut kept: Vec<(usize, usize, i64, usize)> = Vec::new();
        for (order, &(user, item, ts)) in rows.iter().enumerate() {
            if counts[&user] < MIN_INTERACTIONS {
                continue;
            }
            let next_user = user_map.len();
            let u = *user_map.entry(user).or_insert_with(|| {
                user_ids.push(user);
                next_user
            });
            let next_item = item_map.len();
            let i = *item_map.entry(item).or_insert_with(|| {
                item_ids.push(item);
                next_item
            });
            kept.push((u, i, ts, order));
        }
        if kept.is_empty() {
            return Err(Error::EmptyDataset);
        }
        kept.sort_by(|a, b| (a.0, a.2, a.3).cmp(&(b.0, b.2, b.3)));
        let records = kept
            .into_iter()
            .map(|(user, item, timestamp, _)| Interaction {
                user,
                item,
                timestamp,
            })
            .collect();
        Ok(InteractionLog {
            records,
            user_count: user_ids.len(),
            item_count: item_ids.len(),
            user_ids,
            item_ids,
        })
    }

    /// Two-column TSV (`original<TAB>remapped`) for the user id mapping.
    pub fn user_map_tsv(&self) -> String {
        id_map_tsv(&self.user_ids)
    }

    /// Two-column TSV (`original<TAB>remapped`) for the item id mapping.
    pub fn item_map_tsv(&self) -> String {
        id_map_tsv(&self.item_ids)
    }
}

fn id_map_tsv(ids: &[u64]) -> String {
    let mut out = String::new();
    for (remapped, original) in ids.iter().enumerate() {
        let _ = writeln!(out, "{original}\t{remapped}");
    }
    out
}

/// Chronological leave-one-out split for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub user: usize,
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

/// Splits each user's chronologically sorted interactions: last item to
/// test, second-to-last to validation, the rest to train.
pub fn leave_one_out_split(log: &InteractionLog) -> Result<Vec<Split>> {
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); log.user_count];
    for rec in &log.records {
        per_user[rec.user].push(rec.item);
    }
    let mut splits = Vec::with_capacity(log.user_count);
    for (user, mut items) in per_user.into_iter().enumerate() {
        if items.len() < MIN_INTERACTIONS {
            return Err(Error::Config(format!(
                "user {user} has {} interactions, need at least {MIN_INTERACTIONS}",
                items.len()
            )));
        }
        let test = items.pop().expect("len >= 3");
        let val = items.pop().expect("len >= 2");
        splits.push(Split {
            user,
            train: items,
            val,
            test,
        });
    }
    Ok(splits)
}

/// Whether a client behaves honestly or runs the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Benign,
    Byzantine,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Benign => "benign",
            Role::Byzantine => "byzantine",
        }
    }
}

/// Per-client training data and role assignment. `user_id` doubles as the
/// client id: the federation has one client per retained user.
#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub user_id: usize,
    pub train_items: Vec<usize>,
    pub val_item: usize,
    pub test_item: usize,
    pub role: Role,
    /// Positives drawn per local update, clamped to `train_items.len()`.
    pub k_positives: usize,
}

/// All clients of a simulated federation.
#[derive(Debug, Clone)]
pub struct ClientRegistry {
    pub clients: Vec<ClientProfile>,
    pub byzantine_ratio: f64,
    pub seed: u64,
}

impl ClientRegistry {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn byzantine_count(&self) -> usize {
        self.clients
            .iter()
            .filter(|c| c.role == Role::Byzantine)
            .count()
    }
}

/// Assigns roles and per-client sampling budgets.
///
/// Exactly `round(byzantine_ratio * N)` clients are marked Byzantine,
/// chosen by seeded uniform sampling without replacement.
pub fn build_client_registry(
    splits: &[Split],
    byzantine_ratio: f64,
    k_positives: usize,
    seed: u64,
) -> Result<ClientRegistry> {
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&byzantine_ratio) {
        return Err(Error::Config(format!(
            "byzantine_ratio must lie in [0, 1], got {byzantine_ratio}"
        )));
    }
    if k_positives == 0 {
        return Err(Error::Config("k_positives must be at least 1".into()));
    }
    let n = splits.len();
    let byz = (byzantine_ratio * n as f64).round() as usize;
    let mut rng = stream(seed, StreamTag::ByzantineAssignment, &[]);
    let mut byz_flags = vec![false; n];
    for idx in sample(&mut rng, n, byz) {
        byz_flags[idx] = true;
    }
    let clients = splits
        .iter()
        .map(|s| ClientProfile {
            user_id: s.user,
            train_items: s.train.clone(),
            val_item: s.val,
            test_item: s.test,
            role: if byz_flags[s.user] {
                Role::Byzantine
            } else {
                Role::Benign
            },
            k_positives: k_positives.min(s.train.len()),
        })
        .collect();
    Ok(ClientRegistry {
        clients,
        byzantine_ratio,
        seed,
    })
}

/// Shape of a synthetic clustered dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Inclusive bounds on per-user profile length.
    pub profile_min: usize,
    pub profile_max: usize,
    /// Probability that an interaction ignores the user's home cluster.
    pub noise: f64,
    /// Within-cluster popularity skew: item weights fall off as
    /// `rank^-popularity` inside each cluster block. 0 keeps every item
    /// equally likely, as in unweighted sampling; implicit-feedback logs
    /// are typically closer to 1.
    pub popularity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 1000,
            items: 500,
            clusters: 10,
            profile_min: 8,
            profile_max: 40,
            noise: 0.1,
            popularity: 0.0,
        }
    }
}

/// Generates an implicit-feedback log with planted item clusters.
///
/// Items are partitioned into contiguous blocks; each user draws most
/// interactions from one home cluster, so collaborative structure exists
/// for the model to recover.
pub fn synthetic_clustered(spec: &SyntheticSpec, seed: u64) -> Result<InteractionLog> {
    if spec.users == 0 || spec.items == 0 {
        return Err(Error::Config("synthetic users/items must be nonzero".into()));
    }
    if spec.clusters == 0 || spec.clusters > spec.items {
        return Err(Error::Config(format!(
            "clusters must lie in [1, items], got {}",
            spec.clusters
        )));
    }
    if spec.profile_min < MIN_INTERACTIONS || spec.profile_min > spec.profile_max {
        return Err(Error::Config(format!(
            "profile bounds must satisfy {MIN_INTERACTIONS} <= min <= max, got [{}, {}]",
            spec.profile_min, spec.profile_max
        )));
    }
    if spec.profile_max > spec.items {
        return Err(Error::Config(
            "profile_max cannot exceed the item count".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Config("noise must lie in [0, 1]".into()));
    }
    if !(spec.popularity >= 0.0 && spec.popularity.is_finite()) {
        return Err(Error::Config(format!(
            "popularity must be finite and >= 0, got {}",
            spec.popularity
        )));
    }
    let block = spec.items.div_ceil(spec.clusters);
    let weights = PopularityWeights::new(spec, block);
    let mut rows = Vec::new();
    for user in 0..spec.users {
        let mut rng = stream(seed, StreamTag::DatasetSynthesis, &[user as u64]);
        let home = user % spec.clusters;
        let lo = home * block;
        let hi = ((home + 1) * block).min(spec.items);
        let len = rng.random_range(spec.profile_min..=spec.profile_max);
        let mut used = vec![false; spec.items];
        let mut drawn = 0usize;
        let mut guard = 0usize;
        while drawn < len {
            guard += 1;
            if guard > 100 * spec.items {
                break; // all reachable items exhausted
            }
            let item = if rng.random::<f64>() < spec.noise || lo >= hi {
                match &weights {
                    Some(w) => w.pick_global(&mut rng),
                    None => rng.random_range(0..spec.items),
                }
            } else {
                match &weights {
                    Some(w) => lo + w.pick_in_cluster(home, &mut rng),
                    None => rng.random_range(lo..hi),
                }
            };
            if used[item] {
                continue;
            }
            used[item] = true;
            // Timestamps follow draw order, so under a popularity skew each
            // user's history drifts head-to-tail: hits are consumed early,
            // deep cuts late. The leave-one-out targets are therefore
            // tail-side items, which keeps the full-ranking task hard the
            // way real-log evaluations are (an easy, everyone-trained head
            // item would be held out almost never).
            rows.push((user as u64, item as u64, drawn as i64));
            drawn += 1;
        }
    }
    InteractionLog::from_raw(&rows)
}

/// Cumulative `rank^-s` weights for skewed item sampling: one table per
/// cluster block plus a global table where each item keeps its
/// within-block weight. `None` when the skew exponent is 0 (uniform).
struct PopularityWeights {
    per_cluster: Vec<Vec<f64>>,
    global: Vec<f64>,
}

impl PopularityWeights {
    fn new(spec: &SyntheticSpec, block: usize) -> Option<PopularityWeights> {
        if spec.popularity == 0.0 {
            return None;
        }
        let per_cluster: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|c| {
                let lo = c * block;
                let hi = ((c + 1) * block).min(spec.items);
                cumulative(
                    (0..hi.saturating_sub(lo)).map(|r| ((r + 1) as f64).powf(-spec.popularity)),
                )
            })
            .collect();
        let global = cumulative(
            (0..spec.items)
                .map(|i| (((i % block) + 1) as f64).powf(-spec.popularity)),
        );
        Some(PopularityWeights { per_cluster, global })
    }

    fn pick_in_cluster(&self, cluster: usize, rng: &mut impl Rng) -> usize {
        pick(&self.per_cluster[cluster], rng)
    }

    fn pick_global(&self, rng: &mut impl Rng) -> usize {
        pick(&self.global, rng)
    }
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut total = 0.0;
    weights
        .map(|w| {
            total += w;
            total
        })
        .collect()
}

/// Inverse-CDF draw over a strictly increasing cumulative weight table.
fn pick(cum: &[f64], rng: &mut impl Rng) -> usize {
    let x = rng.random::<f64>() * cum.last().copied().unwrap_or(0.0);
    cum.partition_point(|&c| c <= x).min(cum.len() - 1)
}
