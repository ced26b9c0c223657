//! Recommendation model: embedding tables, scoring predictors, BPR pairwise
//! loss with hand-written backward, sparse client gradients and the
//! server-side Adam optimizer.
//!
//! Dense parameter order is fixed everywhere (checkpoints, aggregation,
//! Adam): user table row-major, item table row-major, then predictor
//! parameters (`w1` row-major, `b1`, `w2`, `b2` for the MLP).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_distr::{Distribution, Normal, Uniform};

use crate::dataset::ClientProfile;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};

/// Scoring head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    /// `score = <u, item>` with no extra parameters.
    DotProduct,
    /// Two-layer perceptron over `concat(u, item)` with one hidden layer of
    /// width `d` and ReLU activation.
    Mlp,
}

impl PredictorKind {
    pub fn label(self) -> &'static str {
        match self {
            PredictorKind::DotProduct => "dot_product",
            PredictorKind::Mlp => "mlp",
        }
    }
}

/// How a user embedding is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserModelKind {
    /// Dedicated row in the user table.
    IdEmbedding,
    /// Mean of the user's training item embeddings; the user table is
    /// carried but never read or updated.
    SeqMean,
}

impl UserModelKind {
    pub fn label(self) -> &'static str {
        match self {
            UserModelKind::IdEmbedding => "id_embedding",
            UserModelKind::SeqMean => "seq_mean",
        }
    }
}

/// MLP predictor parameters. `w1` is `d x 2d`, `b1` and `w2` are length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Predictor parameters for either scoring head.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorParams {
    DotProduct,
    Mlp(MlpParams),
}

impl PredictorParams {
    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorParams::DotProduct => PredictorKind::DotProduct,
            PredictorParams::Mlp(_) => PredictorKind::Mlp,
        }
    }

    /// Number of dense predictor parameters.
    pub fn len(&self) -> usize {
        match self {
            PredictorParams::DotProduct => 0,
            PredictorParams::Mlp(m) => m.w1.len() + m.b1.len() + m.w2.len() + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Static shape of a model, enough to densify gradients without the tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub predictor_kind: PredictorKind,
    pub predictor_len: usize,
}

impl ParamsMeta {
    pub fn user_offset(&self, user: usize) -> usize {
        user * self.dim
    }

    pub fn item_offset(&self, item: usize) -> usize {
        (self.num_users + item) * self.dim
    }

    pub fn predictor_offset(&self) -> usize {
        (self.num_users + self.num_items) * self.dim
    }

    pub fn dense_len(&self) -> usize {
        self.predictor_offset() + self.predictor_len
    }

    /// Total embedding rows across both tables.
    pub fn total_rows(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Length of the embedding region of the dense vector.
    pub fn embedding_len(&self) -> usize {
        self.total_rows() * self.dim
    }

    /// Expected predictor length for a kind at dimension `dim`.
    pub fn predictor_len_for(kind: PredictorKind, dim: usize) -> usize {
        match kind {
            PredictorKind::DotProduct => 0,
            PredictorKind::Mlp => dim * 2 * dim + dim + dim + 1,
        }
    }
}

/// Full model state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_table: Array2<f64>,
    pub item_table: Array2<f64>,
    pub predictor: PredictorParams,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.item_table.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.user_table.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.nrows()
    }

    pub fn meta(&self) -> ParamsMeta {
        ParamsMeta {
            num_users: self.num_users(),
            num_items: self.num_items(),
            dim: self.dim(),
            predictor_kind: self.predictor.kind(),
            predictor_len: self.predictor.len(),
        }
    }

    /// Flattens all parameters in the fixed dense order.
    pub fn to_dense(&self) -> Vec<f64> {
        let meta = self.meta();
        let mut out = Vec::with_capacity(meta.dense_len());
        out.extend_from_slice(self.user_table.as_slice().expect("standard layout"));
        out.extend_from_slice(self.item_table.as_slice().expect("standard layout"));
        if let PredictorParams::Mlp(m) = &self.predictor {
            out.extend_from_slice(m.w1.as_slice().expect("standard layout"));
            out.extend_from_slice(&m.b1);
            out.extend_from_slice(&m.w2);
            out.push(m.b2);
        }
        out
    }

    /// Writes a dense vector (same order as [`ModelParams::to_dense`]) back
    /// into the tables.
    pub fn assign_dense(&mut self, dense: &[f64]) -> Result<()> {
        let meta = self.meta();
        if dense.len() != meta.dense_len() {
            return Err(Error::ShapeMismatch {
                expected: meta.dense_len(),
                actual: dense.len(),
            });
        }
        let users = meta.num_users * meta.dim;
        let items = meta.num_items * meta.dim;
        self.user_table
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&dense[..users]);
        self.item_table
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&dense[users..users + items]);
        if let PredictorParams::Mlp(m) = &mut self.predictor {
            let mut at = users + items;
            let w1 = m.w1.len();
            m.w1.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&dense[at..at + w1]);
            at += w1;
            let d = m.b1.len();
            m.b1.copy_from_slice(&dense[at..at + d]);
            at += d;
            m.w2.copy_from_slice(&dense[at..at + d]);
            at += d;
            m.b2 = dense[at];
        }
        Ok(())
    }
}

/// Seeded parameter initialization: embeddings from Normal(0, 0.01^2), MLP
/// weights Xavier-uniform, biases zero. Fill order is fixed (user table,
/// item table, `w1`, `w2`) so initialization is reproducible.
pub fn init_params(
    num_users: usize,
    num_items: usize,
    dim: usize,
    predictor: PredictorKind,
    seed: u64,
) -> Result<ModelParams> {
    if num_users == 0 || num_items == 0 || dim == 0 {
        return Err(Error::Config(
            "num_users, num_items and dim must be nonzero".into(),
        ));
    }
    let mut rng = stream(seed, StreamTag::ParamInit, &[]);
    let emb = Normal::new(0.0, 0.01).expect("valid std");
    let mut draw_table = |rows: usize| -> Array2<f64> {
        let data: Vec<f64> = (0..rows * dim).map(|_| emb.sample(&mut rng)).collect();
        Array2::from_shape_vec((rows, dim), data).expect("shape matches data")
    };
    let user_table = draw_table(num_users);
    let item_table = draw_table(num_items);
    let predictor = match predictor {
        PredictorKind::DotProduct => PredictorParams::DotProduct,
        PredictorKind::Mlp => {
            let limit1 = (6.0 / (2 * dim + dim) as f64).sqrt();
            let limit2 = (6.0 / (dim + 1) as f64).sqrt();
            let u1 = Uniform::new_inclusive(-limit1, limit1).expect("valid range");
            let u2 = Uniform::new_inclusive(-limit2, limit2).expect("valid range");
            let w1_data: Vec<f64> = (0..dim * 2 * dim).map(|_| u1.sample(&mut rng)).collect();
            MlpParams {
                w1: Array2::from_shape_vec((dim, 2 * dim), w1_data).expect("shape matches"),
                b1: vec![0.0; dim],
                w2: (0..dim).map(|_| u2.sample(&mut rng)).collect(),
                b2: 0.0,
            }
            .into()
        }
    };
    Ok(ModelParams {
        user_table,
        item_table,
        predictor,
    })
}

impl From<MlpParams> for PredictorParams {
    fn from(value: MlpParams) -> Self {
        PredictorParams::Mlp(value)
    }
}

/// Source of a user embedding for one client.
#[derive(Debug, Clone, Copy)]
pub enum UserRepr<'a> {
    /// Row `user_id` of the user table.
    Id(usize),
    /// Mean of the listed training item embeddings. Duplicates count twice,
    /// matching the 1/len gradient share each list entry receives.
    Seq(&'a [usize]),
}

impl<'a> UserRepr<'a> {
    /// Binds a client profile to the configured user model.
    pub fn for_client(kind: UserModelKind, client: &'a ClientProfile) -> UserRepr<'a> {
        match kind {
            UserModelKind::IdEmbedding => UserRepr::Id(client.user_id),
            UserModelKind::SeqMean => UserRepr::Seq(&client.train_items),
        }
    }
}

/// Computes a user embedding.
pub fn user_embed(params: &ModelParams, user: &UserRepr) -> Result<Vec<f64>> {
    let dim = params.dim();
    match user {
        UserRepr::Id(id) => {
            if *id >= params.num_users() {
                return Err(Error::ShapeMismatch {
                    expected: params.num_users(),
                    actual: *id,
                });
            }
            Ok(params.user_table.row(*id).to_vec())
        }
        UserRepr::Seq(profile) => {
            if profile.is_empty() {
                return Err(Error::Sampling(
                    "SeqMean user embedding needs a nonempty profile".into(),
                ));
            }
            let mut u = vec![0.0; dim];
            for &item in *profile {
                if item >= params.num_items() {
                    return Err(Error::ShapeMismatch {
                        expected: params.num_items(),
                        actual: item,
                    });
                }
                let row = params.item_table.row(item);
                for (acc, &x) in u.iter_mut().zip(row.iter()) {
                    *acc += x;
                }
            }
            let inv = 1.0 / profile.len() as f64;
            for x in &mut u {
                *x *= inv;
            }
            Ok(u)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct MlpForward {
    z: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
    y: f64,
}

fn mlp_forward(m: &MlpParams, u: &[f64], item_row: &[f64]) -> MlpForward {
    let d = m.b1.len();
    let mut z = Vec::with_capacity(2 * d);
    z.extend_from_slice(u);
    z.extend_from_slice(item_row);
    let mut pre = vec![0.0; d];
    for j in 0..d {
        let row = m.w1.row(j);
        pre[j] = dot(row.as_slice().expect("contiguous row"), &z) + m.b1[j];
    }
    let h: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let y = dot(&m.w2, &h) + m.b2;
    MlpForward { z, pre, h, y }
}

/// Scores one item for a user embedding under the model's predictor.
///
/// Panics if `item` is out of range; callers validate ids upstream.
pub fn score(params: &ModelParams, u: &[f64], item: usize) -> f64 {
    let row = params.item_table.row(item);
    let row = row.as_slice().expect("contiguous row");
    match &params.predictor {
        PredictorParams::DotProduct => dot(u, row),
        PredictorParams::Mlp(m) => mlp_forward(m, u, row).y,
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Pairwise BPR loss `-ln sigma(pos_score - neg_score)`.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> Result<f64> {
    if pos_score.is_nan() || neg_score.is_nan() {
        return Err(Error::Numeric("bpr_loss received NaN score".into()));
    }
    Ok(softplus(neg_score - pos_score))
}

/// Sparse gradient of one local update.
///
/// Maps are keyed by row id; untouched rows are absent. `predictor` is the
/// dense predictor gradient (empty for the dot-product head).
/// `sample_count` records how many BPR pairs were averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub user_rows: BTreeMap<usize, Vec<f64>>,
    pub item_rows: BTreeMap<usize, Vec<f64>>,
    pub predictor: Vec<f64>,
    pub sample_count: usize,
}

impl SparseGradient {
    pub fn empty(predictor_len: usize) -> Self {
        SparseGradient {
            user_rows: BTreeMap::new(),
            item_rows: BTreeMap::new(),
            predictor: vec![0.0; predictor_len],
            sample_count: 0,
        }
    }

    fn add_row(rows: &mut BTreeMap<usize, Vec<f64>>, id: usize, dim: usize, delta: &[f64]) {
        let row = rows.entry(id).or_insert_with(|| vec![0.0; dim]);
        for (acc, &x) in row.iter_mut().zip(delta) {
            *acc += x;
        }
    }

    pub fn add_user_row(&mut self, id: usize, dim: usize, delta: &[f64]) {
        Self::add_row(&mut self.user_rows, id, dim, delta);
    }

    pub fn add_item_row(&mut self, id: usize, dim: usize, delta: &[f64]) {
        Self::add_row(&mut self.item_rows, id, dim, delta);
    }

    /// Multiplies every stored coordinate by `s`.
    pub fn scale(&mut self, s: f64) {
        for row in self.user_rows.values_mut() {
            for x in row {
                *x *= s;
            }
        }
        for row in self.item_rows.values_mut() {
            for x in row {
                *x *= s;
            }
        }
        for x in &mut self.predictor {
            *x *= s;
        }
    }

    /// Expands to the fixed dense layout.
    pub fn densify(&self, meta: &ParamsMeta) -> Result<Vec<f64>> {
        let mut out = vec![0.0; meta.dense_len()];
        self.add_into(meta, &mut out, 1.0)?;
        Ok(out)
    }

    /// Adds `scale * self` into a dense accumulator.
    pub fn add_into(&self, meta: &ParamsMeta, dense: &mut [f64], scale: f64) -> Result<()> {
        if dense.len() != meta.dense_len() {
            return Err(Error::ShapeMismatch {
                expected: meta.dense_len(),
                actual: dense.len(),
            });
        }
        if self.predictor.len() != meta.predictor_len {
            return Err(Error::ShapeMismatch {
                expected: meta.predictor_len,
                actual: self.predictor.len(),
            });
        }
        for (&id, row) in &self.user_rows {
            if id >= meta.num_users || row.len() != meta.dim {
                return Err(Error::Config(format!(
                    "user row {id} does not fit a model with {} users",
                    meta.num_users
                )));
            }
            let off = meta.user_offset(id);
            for (k, &x) in row.iter().enumerate() {
                dense[off + k] += scale * x;
            }
        }
        for (&id, row) in &self.item_rows {
            if id >= meta.num_items || row.len() != meta.dim {
                return Err(Error::Config(format!(
                    "item row {id} does not fit a model with {} items",
                    meta.num_items
                )));
            }
            let off = meta.item_offset(id);
            for (k, &x) in row.iter().enumerate() {
                dense[off + k] += scale * x;
            }
        }
        let off = meta.predictor_offset();
        for (k, &x) in self.predictor.iter().enumerate() {
            dense[off + k] += scale * x;
        }
        Ok(())
    }

    /// Wraps a dense vector as a gradient touching every row. Used by
    /// attacks that fabricate full-vector updates.
    pub fn from_dense(dense: &[f64], meta: &ParamsMeta) -> Result<Self> {
        if dense.len() != meta.dense_len() {
            return Err(Error::ShapeMismatch {
                expected: meta.dense_len(),
                actual: dense.len(),
            });
        }
        let mut grad = SparseGradient::empty(meta.predictor_len);
        for id in 0..meta.num_users {
            let off = meta.user_offset(id);
            grad.user_rows
                .insert(id, dense[off..off + meta.dim].to_vec());
        }
        for id in 0..meta.num_items {
            let off = meta.item_offset(id);
            grad.item_rows
                .insert(id, dense[off..off + meta.dim].to_vec());
        }
        let off = meta.predictor_offset();
        grad.predictor.copy_from_slice(&dense[off..]);
        Ok(grad)
    }

    /// Number of touched embedding rows across both tables.
    pub fn touched_rows(&self) -> usize {
        self.user_rows.len() + self.item_rows.len()
    }

    /// Euclidean norm over all stored coordinates.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for row in self.user_rows.values().chain(self.item_rows.values()) {
            for &x in row {
                acc += x * x;
            }
        }
        for &x in &self.predictor {
            acc += x * x;
        }
        acc.sqrt()
    }
}

/// Accumulates the gradient of one BPR pair, given the precomputed user
/// embedding, into `acc` with weight 1.
fn accumulate_pair(
    params: &ModelParams,
    user: &UserRepr,
    u: &[f64],
    pos: usize,
    neg: usize,
    acc: &mut SparseGradient,
) -> Result<()> {
    let dim = params.dim();
    if pos >= params.num_items() || neg >= params.num_items() {
        return Err(Error::ShapeMismatch {
            expected: params.num_items(),
            actual: pos.max(neg),
        });
    }
    let pos_row = params.item_table.row(pos);
    let pos_row = pos_row.as_slice().expect("contiguous row");
    let neg_row = params.item_table.row(neg);
    let neg_row = neg_row.as_slice().expect("contiguous row");

    let mut du = vec![0.0; dim];
    match &params.predictor {
        PredictorParams::DotProduct => {
            let y_pos = dot(u, pos_row);
            let y_neg = dot(u, neg_row);
            let w = sigmoid(y_neg - y_pos);
            // d loss / d score_pos = -w, d loss / d score_neg = +w
            let mut d_pos = vec![0.0; dim];
            let mut d_neg = vec![0.0; dim];
            for k in 0..dim {
                d_pos[k] = -w * u[k];
                d_neg[k] = w * u[k];
                du[k] = -w * pos_row[k] + w * neg_row[k];
            }
            acc.add_item_row(pos, dim, &d_pos);
            acc.add_item_row(neg, dim, &d_neg);
        }
        PredictorParams::Mlp(m) => {
            let fwd_pos = mlp_forward(m, u, pos_row);
            let fwd_neg = mlp_forward(m, u, neg_row);
            let w = sigmoid(fwd_neg.y - fwd_pos.y);
            for (fwd, coeff, item) in [(&fwd_pos, -w, pos), (&fwd_neg, w, neg)] {
                let d = dim;
                let w1_len = d * 2 * d;
                let dpre: Vec<f64> = (0..d)
                    .map(|j| {
                        if fwd.pre[j] > 0.0 {
                            coeff * m.w2[j]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mut d_item = vec![0.0; d];
                for j in 0..d {
                    if dpre[j] != 0.0 {
                        let row_off = j * 2 * d;
                        for k in 0..2 * d {
                            acc.predictor[row_off + k] += dpre[j] * fwd.z[k];
                        }
                        // dz = w1^T dpre, split into user and item halves
                        let row = m.w1.row(j);
                        let row = row.as_slice().expect("contiguous row");
                        for k in 0..d {
                            du[k] += dpre[j] * row[k];
                            d_item[k] += dpre[j] * row[d + k];
                        }
                    }
                    acc.predictor[w1_len + j] += dpre[j]; // b1
                    acc.predictor[w1_len + d + j] += coeff * fwd.h[j]; // w2
                }
                acc.predictor[w1_len + 2 * d] += coeff; // b2
                acc.add_item_row(item, dim, &d_item);
            }
        }
    }

    match user {
        UserRepr::Id(id) => acc.add_user_row(*id, dim, &du),
        UserRepr::Seq(profile) => {
            let share = 1.0 / profile.len() as f64;
            let shared: Vec<f64> = du.iter().map(|&x| x * share).collect();
            for &item in *profile {
                acc.add_item_row(item, dim, &shared);
            }
        }
    }
    Ok(())
}

/// Gradient of the BPR loss for a single (positive, negative) pair.
pub fn bpr_gradients(
    params: &ModelParams,
    user: &UserRepr,
    pos: usize,
    neg: usize,
) -> Result<SparseGradient> {
    bpr_mean_gradient(params, user, &[(pos, neg)])
}

/// Mean BPR gradient over a batch of pairs (the local-update gradient).
pub fn bpr_mean_gradient(
    params: &ModelParams,
    user: &UserRepr,
    pairs: &[(usize, usize)],
) -> Result<SparseGradient> {
    if pairs.is_empty() {
        return Err(Error::Sampling("local update needs at least one pair".into()));
    }
    let u = user_embed(params, user)?;
    let mut acc = SparseGradient::empty(params.predictor.len());
    for &(pos, neg) in pairs {
        accumulate_pair(params, user, &u, pos, neg, &mut acc)?;
    }
    acc.scale(1.0 / pairs.len() as f64);
    acc.sample_count = pairs.len();
    Ok(acc)
}

/// Server-side Adam state over the dense parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the standard hyperparameters
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam step on the dense view of `params` using the
/// aggregated gradient `update`.
pub fn adam_apply(state: &mut AdamState, params: &mut ModelParams, update: &[f64]) -> Result<()> {
    let mut dense = params.to_dense();
    if update.len() != dense.len() || state.m.len() != dense.len() {
        return Err(Error::ShapeMismatch {
            expected: dense.len(),
            actual: if update.len() != dense.len() {
                update.len()
            } else {
                state.m.len()
            },
        });
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for k in 0..dense.len() {
        let g = update[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / b1t;
        let v_hat = state.v[k] / b2t;
        dense[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    params.assign_dense(&dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_difference;
    use approx::assert_abs_diff_eq;

    fn tiny_params(predictor: PredictorKind, seed: u64) -> ModelParams {
        init_params(3, 6, 4, predictor, seed).unwrap()
    }

    #[test]
    fn bpr_loss_of_equal_scores_is_ln2() {
        for &x in &[-3.0, 0.0, 0.5, 1e6] {
            let l = bpr_loss(x, x).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn bpr_loss_frozen_values() {
        // Gap of 20: ln(1 + e^-20), equal to e^-20 up to a ~1e-9 relative
        // second-order correction.
        let tiny = bpr_loss(20.0, 0.0).unwrap();
        let expected_tiny = 2.0611536224385578e-9;
        assert!((tiny - expected_tiny).abs() / expected_tiny < 1e-6);
        // Negative gap of 2: ln(1 + e^2) computed the direct way.
        let big = bpr_loss(0.0, 2.0).unwrap();
        let expected_big = (1.0 + 2.0_f64.exp()).ln();
        assert!((big - expected_big).abs() < 1e-12);
    }

    #[test]
    fn bpr_loss_is_stable_at_extremes() {
        assert_eq!(bpr_loss(1000.0, 0.0).unwrap(), 0.0);
        let l = bpr_loss(0.0, 1000.0).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
        assert!(bpr_loss(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_in_bounds() {
        let a = tiny_params(PredictorKind::Mlp, 9);
        let b = tiny_params(PredictorKind::Mlp, 9);
        assert_eq!(a, b);
        let c = tiny_params(PredictorKind::Mlp, 10);
        assert_ne!(a, c);
        if let PredictorParams::Mlp(m) = &a.predictor {
            let limit1 = (6.0 / 12.0_f64).sqrt();
            assert!(m.w1.iter().all(|w| w.abs() <= limit1));
            assert!(m.b1.iter().all(|&b| b == 0.0));
            assert_eq!(m.b2, 0.0);
        } else {
            panic!("expected MLP predictor");
        }
    }

    #[test]
    fn embedding_scale_matches_init_std() {
        let p = init_params(50, 200, 16, PredictorKind::DotProduct, 3).unwrap();
        let flat: Vec<f64> = p.item_table.iter().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 2e-3, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 2e-3, "std {}", var.sqrt());
    }

    #[test]
    fn dense_roundtrip_is_exact() {
        for kind in [PredictorKind::DotProduct, PredictorKind::Mlp] {
            let p = tiny_params(kind, 4);
            let dense = p.to_dense();
            assert_eq!(dense.len(), p.meta().dense_len());
            let mut q = tiny_params(kind, 99);
            q.assign_dense(&dense).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn densify_places_rows_at_fixed_offsets() {
        let p = tiny_params(PredictorKind::DotProduct, 4);
        let meta = p.meta();
        let mut g = SparseGradient::empty(0);
        g.add_user_row(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        g.add_item_row(5, 4, &[9.0, 8.0, 7.0, 6.0]);
        let dense = g.densify(&meta).unwrap();
        assert_eq!(dense[meta.user_offset(1)], 1.0);
        assert_eq!(dense[meta.user_offset(1) + 3], 4.0);
        assert_eq!(dense[meta.item_offset(5)], 9.0);
        assert_eq!(dense.iter().filter(|&&x| x != 0.0).count(), 8);
    }

    #[test]
    fn from_dense_touches_every_row() {
        let p = tiny_params(PredictorKind::DotProduct, 4);
        let meta = p.meta();
        let dense: Vec<f64> = (0..meta.dense_len()).map(|k| k as f64).collect();
        let g = SparseGradient::from_dense(&dense, &meta).unwrap();
        assert_eq!(g.touched_rows(), meta.total_rows());
        assert_eq!(g.densify(&meta).unwrap(), dense);
    }

    #[test]
    fn seq_mean_distributes_user_gradient_to_profile_rows() {
        let params = tiny_params(PredictorKind::DotProduct, 7);
        let profile = vec![0usize, 1];
        let user = UserRepr::Seq(&profile);
        let g = bpr_gradients(&params, &user, 2, 3).unwrap();
        assert!(g.user_rows.is_empty());
        // pos, neg and the two profile rows
        assert_eq!(g.item_rows.len(), 4);
        let u = user_embed(&params, &user).unwrap();
        let y_pos = score(&params, &u, 2);
        let y_neg = score(&params, &u, 3);
        let w = sigmoid(y_neg - y_pos);
        let du: Vec<f64> = (0..4)
            .map(|k| w * (params.item_table[[3, k]] - params.item_table[[2, k]]))
            .collect();
        for k in 0..4 {
            assert_abs_diff_eq!(g.item_rows[&0][k], du[k] / 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(g.item_rows[&1][k], du[k] / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn id_embedding_touches_only_the_user_row_and_pair_items() {
        let params = tiny_params(PredictorKind::DotProduct, 7);
        let g = bpr_gradients(&params, &UserRepr::Id(2), 0, 5).unwrap();
        assert_eq!(g.user_rows.len(), 1);
        assert!(g.user_rows.contains_key(&2));
        let keys: Vec<usize> = g.item_rows.keys().copied().collect();
        assert_eq!(keys, vec![0, 5]);
    }

    #[test]
    fn batch_gradient_is_the_mean_of_pair_gradients() {
        let params = tiny_params(PredictorKind::Mlp, 11);
        let profile = vec![0usize, 3];
        let user = UserRepr::Seq(&profile);
        let pairs = [(1usize, 4usize), (2usize, 5usize)];
        let batch = bpr_mean_gradient(&params, &user, &pairs).unwrap();
        let g1 = bpr_gradients(&params, &user, 1, 4).unwrap();
        let g2 = bpr_gradients(&params, &user, 2, 5).unwrap();
        let meta = params.meta();
        let dense_batch = batch.densify(&meta).unwrap();
        let d1 = g1.densify(&meta).unwrap();
        let d2 = g2.densify(&meta).unwrap();
        for k in 0..dense_batch.len() {
            assert_abs_diff_eq!(dense_batch[k], (d1[k] + d2[k]) / 2.0, epsilon = 1e-12);
        }
        assert_eq!(batch.sample_count, 2);
    }

    #[test]
    fn touched_item_rows_are_bounded_by_pairs_plus_profile() {
        let params = tiny_params(PredictorKind::DotProduct, 13);
        let profile = vec![0usize, 1, 2];
        let pairs = [(3usize, 4usize), (3usize, 5usize)];
        let g = bpr_mean_gradient(&params, &UserRepr::Seq(&profile), &pairs).unwrap();
        assert!(g.item_rows.len() <= 2 * pairs.len() + profile.len());
        let g = bpr_mean_gradient(&params, &UserRepr::Id(0), &pairs).unwrap();
        assert!(g.item_rows.len() <= 2 * pairs.len());
    }

    fn check_against_finite_difference(kind: PredictorKind, seq: bool, seed: u64) {
        let params = tiny_params(kind, seed);
        let meta = params.meta();
        let profile = vec![0usize, 2, 2];
        let user = if seq {
            UserRepr::Seq(&profile)
        } else {
            UserRepr::Id(1)
        };
        let (pos, neg) = (3usize, 5usize);
        let analytic = bpr_gradients(&params, &user, pos, neg)
            .unwrap()
            .densify(&meta)
            .unwrap();
        let base = params.to_dense();
        let loss = |dense: &[f64]| -> f64 {
            let mut p = params.clone();
            p.assign_dense(dense).unwrap();
            let u = user_embed(&p, &user).unwrap();
            bpr_loss(score(&p, &u, pos), score(&p, &u, neg)).unwrap()
        };
        let fd = finite_difference(&loss, &base, 1e-5);
        for k in 0..base.len() {
            let err = (analytic[k] - fd[k]).abs() / analytic[k].abs().max(fd[k].abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "coord {k}: analytic {} vs fd {}",
                analytic[k],
                fd[k]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_difference_dot_id() {
        check_against_finite_difference(PredictorKind::DotProduct, false, 21);
    }

    #[test]
    fn gradient_matches_finite_difference_dot_seq() {
        check_against_finite_difference(PredictorKind::DotProduct, true, 22);
    }

    #[test]
    fn gradient_matches_finite_difference_mlp_id() {
        check_against_finite_difference(PredictorKind::Mlp, false, 23);
    }

    #[test]
    fn gradient_matches_finite_difference_mlp_seq() {
        check_against_finite_difference(PredictorKind::Mlp, true, 24);
    }

    #[test]
    fn empty_profile_errors_under_seq_mean() {
        let params = tiny_params(PredictorKind::DotProduct, 3);
        let profile: Vec<usize> = Vec::new();
        assert!(user_embed(&params, &UserRepr::Seq(&profile)).is_err());
    }

    #[test]
    fn mlp_forward_matches_hand_computation() {
        // d = 1: w1 is 1x2, score = w2 * relu(w1 . [u, i] + b1) + b2
        let mlp = MlpParams {
            w1: Array2::from_shape_vec((1, 2), vec![2.0, -1.0]).unwrap(),
            b1: vec![0.5],
            w2: vec![3.0],
            b2: -0.25,
        };
        let params = ModelParams {
            user_table: Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
            item_table: Array2::from_shape_vec((2, 1), vec![0.75, 4.0]).unwrap(),
            predictor: mlp.into(),
        };
        // item 0: pre = 2*1 - 1*0.75 + 0.5 = 1.75, score = 3*1.75 - 0.25 = 5.0
        assert_abs_diff_eq!(score(&params, &[1.0], 0), 5.0, epsilon = 1e-12);
        // item 1: pre = 2 - 4 + 0.5 = -1.5 -> relu 0 -> score = -0.25
        assert_abs_diff_eq!(score(&params, &[1.0], 1), -0.25, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        let mut params = ModelParams {
            user_table: Array2::zeros((1, 1)),
            item_table: Array2::zeros((1, 1)),
            predictor: PredictorParams::DotProduct,
        };
        let mut state = AdamState::new(2, 1e-3);
        adam_apply(&mut state, &mut params, &[1.0, 1.0]).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1, so the step is -lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert_abs_diff_eq!(params.user_table[[0, 0]], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(params.item_table[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn adam_step_sizes_stay_stable_for_constant_gradient() {
        let mut params = ModelParams {
            user_table: Array2::zeros((1, 1)),
            item_table: Array2::zeros((1, 1)),
            predictor: PredictorParams::DotProduct,
        };
        let mut state = AdamState::new(2, 1e-3);
        adam_apply(&mut state, &mut params, &[0.5, 0.5]).unwrap();
        let after_one = params.user_table[[0, 0]];
        adam_apply(&mut state, &mut params, &[0.5, 0.5]).unwrap();
        let delta_two = params.user_table[[0, 0]] - after_one;
        assert!((delta_two.abs() - after_one.abs()).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_update_from_fresh_state_is_a_noop() {
        let mut params = tiny_params(PredictorKind::DotProduct, 5);
        let before = params.to_dense();
        let mut state = AdamState::new(before.len(), 1e-3);
        adam_apply(&mut state, &mut params, &vec![0.0; before.len()]).unwrap();
        assert_eq!(params.to_dense(), before);
    }

    #[test]
    fn adam_rejects_mismatched_lengths() {
        let mut params = tiny_params(PredictorKind::DotProduct, 5);
        let mut state = AdamState::new(3, 1e-3);
        let err = adam_apply(&mut state, &mut params, &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
