//! Supervised malicious-gradient detector.
//!
//! Raw gradient concatenation would be dimensionally infeasible for
//! embedding tables, so each (client gradient, round average) pair is
//! reduced to a fixed feature vector: the dense predictor gradient plus
//! six pooled embedding statistics per half. A two-layer feedforward net
//! trained with full-batch gradient descent on class-balanced, labeled
//! gradients scores clients; at round time, flagged gradients are dropped
//! before aggregation. Labels come from simulator ground truth during the
//! collection phase and are never visible on the live serving path.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::model::{sigmoid, ParamsMeta, SparseGradient};
use crate::rng::{stream, StreamTag};

/// How a (client, average) gradient pair becomes a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Predictor gradient + 6 pooled embedding statistics per half.
    #[default]
    Pooled,
    /// Full dense concatenation of both halves; only viable for small
    /// models.
    RawDense,
}

/// Pooled statistics slots appended to each half's predictor gradient.
const POOLED_STATS: usize = 6;

/// Feature dimension for a model shape under a mode.
pub fn feature_len(meta: &ParamsMeta, mode: FeatureMode) -> usize {
    match mode {
        FeatureMode::Pooled => 2 * (meta.predictor_len + POOLED_STATS),
        FeatureMode::RawDense => 2 * meta.dense_len(),
    }
}

struct EmbeddingSummary {
    l2: f64,
    mean: f64,
    std: f64,
    max_abs: f64,
    touched_fraction: f64,
}

fn summarize(entries: &[f64], touched_rows: usize, total_rows: usize) -> EmbeddingSummary {
    if entries.is_empty() {
        return EmbeddingSummary {
            l2: 0.0,
            mean: 0.0,
            std: 0.0,
            max_abs: 0.0,
            touched_fraction: 0.0,
        };
    }
    let n = entries.len() as f64;
    let mean = entries.iter().sum::<f64>() / n;
    let var = entries.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    EmbeddingSummary {
        l2: entries.iter().map(|x| x * x).sum::<f64>().sqrt(),
        mean,
        std: var.sqrt(),
        max_abs: entries.iter().fold(0.0, |m, x| x.abs().max(m)),
        touched_fraction: touched_rows as f64 / total_rows as f64,
    }
}

fn push_half(out: &mut Vec<f64>, predictor: &[f64], summary: &EmbeddingSummary, cosine: f64) {
    out.extend_from_slice(predictor);
    out.extend_from_slice(&[
        summary.l2,
        summary.mean,
        summary.std,
        summary.max_abs,
        summary.touched_fraction,
        cosine,
    ]);
}

/// Builds the detector input for one client gradient against the round
/// average. The cosine slot (client embedding-gradient vs. average
/// embedding-gradient, 0 for zero vectors) is filled only in the client
/// half.
pub fn featurize(
    grad: &SparseGradient,
    round_avg: &[f64],
    meta: &ParamsMeta,
    mode: FeatureMode,
) -> Result<Vec<f64>> {
    if round_avg.len() != meta.dense_len() {
        return Err(Error::ShapeMismatch {
            expected: meta.dense_len(),
            actual: round_avg.len(),
        });
    }
    if grad.predictor.len() != meta.predictor_len {
        return Err(Error::ShapeMismatch {
            expected: meta.predictor_len,
            actual: grad.predictor.len(),
        });
    }
    if mode == FeatureMode::RawDense {
        let mut out = grad.densify(meta)?;
        out.extend_from_slice(round_avg);
        return Ok(out);
    }

    let client_entries: Vec<f64> = grad
        .user_rows
        .values()
        .chain(grad.item_rows.values())
        .flatten()
        .copied()
        .collect();
    let client_summary = summarize(&client_entries, grad.touched_rows(), meta.total_rows());

    // The dense average's touched rows are those with any nonzero entry.
    let mut avg_entries = Vec::new();
    let mut avg_touched = 0usize;
    for row in 0..meta.total_rows() {
        let off = row * meta.dim;
        let slice = &round_avg[off..off + meta.dim];
        if slice.iter().any(|&x| x != 0.0) {
            avg_touched += 1;
            avg_entries.extend_from_slice(slice);
        }
    }
    let avg_summary = summarize(&avg_entries, avg_touched, meta.total_rows());

    // Cosine over the embedding region; the client side is sparse, so the
    // dot product only needs its touched rows.
    let mut dot = 0.0;
    for (&row, vals) in &grad.user_rows {
        let off = meta.user_offset(row);
        for (c, v) in vals.iter().enumerate() {
            dot += v * round_avg[off + c];
        }
    }
    for (&row, vals) in &grad.item_rows {
        let off = meta.item_offset(row);
        for (c, v) in vals.iter().enumerate() {
            dot += v * round_avg[off + c];
        }
    }
    let avg_emb_l2 = round_avg[..meta.embedding_len()]
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let cosine = if client_summary.l2 > 0.0 && avg_emb_l2 > 0.0 {
        dot / (client_summary.l2 * avg_emb_l2)
    } else {
        0.0
    };

    let mut out = Vec::with_capacity(feature_len(meta, mode));
    push_half(&mut out, &grad.predictor, &client_summary, cosine);
    let avg_predictor = &round_avg[meta.predictor_offset()..];
    push_half(&mut out, avg_predictor, &avg_summary, 0.0);
    Ok(out)
}

/// One labeled detector example.
#[derive(Debug, Clone)]
pub struct LabeledFeature {
    pub features: Vec<f64>,
    pub malicious: bool,
}

/// Class-balanced feature records.
#[derive(Debug, Clone)]
pub struct DetectorDataset {
    pub records: Vec<LabeledFeature>,
}

impl DetectorDataset {
    /// Balances classes by seeded downsampling of the majority (normal)
    /// class to an exact 1:1 ratio, keeping record order otherwise.
    pub fn balanced(records: Vec<LabeledFeature>, seed: u64) -> Result<DetectorDataset> {
        let malicious = records.iter().filter(|r| r.malicious).count();
        let normal = records.len() - malicious;
        if malicious == 0 || normal == 0 {
            return Err(Error::SingleClass);
        }
        let keep = malicious.min(normal);
        let majority_label = normal > malicious;
        let majority: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.malicious != majority_label)
            .map(|(i, _)| i)
            .collect();
        debug_assert_eq!(majority.len(), malicious.max(normal));
        let mut rng = stream(seed, StreamTag::ClassBalance, &[]);
        let mut kept: Vec<usize> =
            rand::seq::index::sample(&mut rng, majority.len(), keep)
                .into_iter()
                .map(|i| majority[i])
                .collect();
        kept.sort_unstable();
        let mut kept = kept.into_iter().peekable();
        let records = records
            .into_iter()
            .enumerate()
            .filter_map(|(i, r)| {
                if r.malicious == majority_label {
                    Some(r)
                } else if kept.peek() == Some(&i) {
                    kept.next();
                    Some(r)
                } else {
                    None
                }
            })
            .collect();
        Ok(DetectorDataset { records })
    }
}

/// Hidden width of the detector net.
pub const DETECTOR_HIDDEN: usize = 32;

/// Two-layer feedforward classifier: F -> 32 (ReLU) -> 1 (sigmoid).
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub threshold: f64,
}

impl DetectorModel {
    /// Fresh Xavier-uniform weights for a given feature dimension.
    pub fn init(feature_len: usize, seed: u64) -> Result<DetectorModel> {
        if feature_len == 0 {
            return Err(Error::Config("detector needs a nonzero feature length".into()));
        }
        let mut rng = stream(seed, StreamTag::DetectorInit, &[]);
        let h = DETECTOR_HIDDEN;
        let limit1 = (6.0 / (feature_len + h) as f64).sqrt();
        let limit2 = (6.0 / (h + 1) as f64).sqrt();
        let u1 = Uniform::new_inclusive(-limit1, limit1).expect("valid range");
        let u2 = Uniform::new_inclusive(-limit2, limit2).expect("valid range");
        let w1_data: Vec<f64> = (0..h * feature_len).map(|_| u1.sample(&mut rng)).collect();
        Ok(DetectorModel {
            w1: Array2::from_shape_vec((h, feature_len), w1_data).expect("shape matches"),
            b1: vec![0.0; h],
            w2: (0..h).map(|_| u2.sample(&mut rng)).collect(),
            b2: 0.0,
            threshold: 0.5,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.w1.ncols()
    }

    /// Sigmoid score in (0, 1); higher means more likely malicious.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(features)?))
    }

    fn logit(&self, features: &[f64]) -> Result<f64> {
        let (act, _) = self.hidden(features)?;
        let mut out = self.b2;
        for (w, a) in self.w2.iter().zip(&act) {
            out += w * a;
        }
        Ok(out)
    }

    /// ReLU activations and their pre-activations.
    fn hidden(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if features.len() != self.feature_len() {
            return Err(Error::ShapeMismatch {
                expected: self.feature_len(),
                actual: features.len(),
            });
        }
        let h = self.w1.nrows();
        let mut pre = vec![0.0; h];
        for j in 0..h {
            let row = self.w1.row(j);
            let row = row.as_slice().expect("contiguous row");
            pre[j] = self.b1[j]
                + row
                    .iter()
                    .zip(features)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
        }
        let act = pre.iter().map(|&p| p.max(0.0)).collect();
        Ok((act, pre))
    }
}

/// Mean binary cross-entropy of the model on a batch, computed through
/// the numerically stable softplus form. Training only needs gradients;
/// the loss value exists for the finite-difference check.
#[cfg(test)]
fn batch_loss(model: &DetectorModel, records: &[LabeledFeature]) -> Result<f64> {
    use crate::model::softplus;
    let mut acc = 0.0;
    for r in records {
        let z = model.logit(&r.features)?;
        let t = if r.malicious { 1.0 } else { 0.0 };
        acc += t * softplus(-z) + (1.0 - t) * softplus(z);
    }
    Ok(acc / records.len() as f64)
}

struct DetectorGradients {
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

/// Full-batch BCE gradients by manual backpropagation.
fn batch_gradients(model: &DetectorModel, records: &[LabeledFeature]) -> Result<DetectorGradients> {
    let h = model.w1.nrows();
    let f = model.feature_len();
    let mut g = DetectorGradients {
        w1: Array2::zeros((h, f)),
        b1: vec![0.0; h],
        w2: vec![0.0; h],
        b2: 0.0,
    };
    let scale = 1.0 / records.len() as f64;
    for r in records {
        let (act, pre) = model.hidden(&r.features)?;
        let mut z = model.b2;
        for (w, a) in model.w2.iter().zip(&act) {
            z += w * a;
        }
        let t = if r.malicious { 1.0 } else { 0.0 };
        let dz = (sigmoid(z) - t) * scale;
        g.b2 += dz;
        for j in 0..h {
            g.w2[j] += dz * act[j];
            if pre[j] > 0.0 {
                let dpre = dz * model.w2[j];
                g.b1[j] += dpre;
                for (k, x) in r.features.iter().enumerate() {
                    g.w1[[j, k]] += dpre * x;
                }
            }
        }
    }
    Ok(g)
}

/// A trained detector plus its held-out evaluation.
#[derive(Debug, Clone)]
pub struct DetectorReport {
    pub model: DetectorModel,
    pub holdout_accuracy: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

/// Trains the detector with full-batch gradient descent on 80% of the
/// dataset and reports accuracy on the held-out 20% (at threshold 0.5).
/// Deterministic per seed.
pub fn train_detector(
    dataset: &DetectorDataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<DetectorReport> {
    let n = dataset.records.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "detector training needs at least 2 records, got {n}"
        )));
    }
    let malicious = dataset.records.iter().filter(|r| r.malicious).count();
    if malicious == 0 || malicious == n {
        return Err(Error::SingleClass);
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "detector learning rate must be positive, got {lr}"
        )));
    }
    let feature_len = dataset.records[0].features.len();
    for r in &dataset.records {
        if r.features.len() != feature_len {
            return Err(Error::ShapeMismatch {
                expected: feature_len,
                actual: r.features.len(),
            });
        }
        if r.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite detector feature".into()));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, StreamTag::DetectorSplit, &[]));
    let holdout_size = (n / 5).max(1);
    let (holdout_idx, train_idx) = order.split_at(holdout_size);
    let train: Vec<LabeledFeature> = train_idx
        .iter()
        .map(|&i| dataset.records[i].clone())
        .collect();

    let mut model = DetectorModel::init(feature_len, seed)?;
    for _ in 0..epochs {
        let g = batch_gradients(&model, &train)?;
        model.w1.zip_mut_with(&g.w1, |w, d| *w -= lr * d);
        for (b, d) in model.b1.iter_mut().zip(&g.b1) {
            *b -= lr * d;
        }
        for (w, d) in model.w2.iter_mut().zip(&g.w2) {
            *w -= lr * d;
        }
        model.b2 -= lr * g.b2;
    }

    let mut correct = 0usize;
    for &i in holdout_idx {
        let r = &dataset.records[i];
        let flagged = model.predict(&r.features)? >= model.threshold;
        if flagged == r.malicious {
            correct += 1;
        }
    }
    Ok(DetectorReport {
        holdout_accuracy: correct as f64 / holdout_size as f64,
        model,
        train_size: train_idx.len(),
        holdout_size,
    })
}

/// Which gradients survive detector filtering.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Indices (into the input slice) of gradients to aggregate.
    pub kept: Vec<usize>,
    /// Indices flagged as malicious.
    pub flagged: Vec<usize>,
    /// True when everything was flagged and the filter kept all inputs
    /// so aggregation does not starve.
    pub kept_all_fallback: bool,
}

/// Scores every gradient against the round average and drops those at or
/// above the threshold. Never returns an empty kept set.
pub fn detect_and_filter(
    model: &DetectorModel,
    grads: &[SparseGradient],
    round_avg: &[f64],
    meta: &ParamsMeta,
    mode: FeatureMode,
) -> Result<FilterOutcome> {
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    for (i, grad) in grads.iter().enumerate() {
        let features = featurize(grad, round_avg, meta, mode)?;
        if model.predict(&features)? >= model.threshold {
            flagged.push(i);
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() && !grads.is_empty() {
        log::warn!(
            "detector flagged all {} gradients; keeping all to avoid starving aggregation",
            grads.len()
        );
        return Ok(FilterOutcome {
            kept: (0..grads.len()).collect(),
            flagged,
            kept_all_fallback: true,
        });
    }
    Ok(FilterOutcome {
        kept,
        flagged,
        kept_all_fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bpr_mean_gradient, init_params, PredictorKind, UserRepr};
    use crate::oracles;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta_of(users: usize, items: usize, dim: usize, kind: PredictorKind) -> ParamsMeta {
        init_params(users, items, dim, kind, 0).unwrap().meta()
    }

    #[test]
    fn feature_length_follows_the_mode() {
        let meta = meta_of(4, 6, 3, PredictorKind::DotProduct);
        assert_eq!(feature_len(&meta, FeatureMode::Pooled), 12);
        assert_eq!(feature_len(&meta, FeatureMode::RawDense), 2 * 10 * 3);
        let meta = meta_of(4, 6, 3, PredictorKind::Mlp);
        // p = 3*6 + 3 + 3 + 1 = 25 for d = 3.
        assert_eq!(meta.predictor_len, 25);
        assert_eq!(feature_len(&meta, FeatureMode::Pooled), 2 * (25 + 6));
    }

    #[test]
    fn zero_gradient_and_zero_average_featurize_to_zeros() {
        let meta = meta_of(3, 5, 2, PredictorKind::DotProduct);
        let grad = SparseGradient::empty(meta.predictor_len);
        let avg = vec![0.0; meta.dense_len()];
        let features = featurize(&grad, &avg, &meta, FeatureMode::Pooled).unwrap();
        assert_eq!(features, vec![0.0; 12]);
    }

    #[test]
    fn identical_gradient_and_average_have_unit_cosine() {
        let params = init_params(3, 8, 4, PredictorKind::DotProduct, 5).unwrap();
        let meta = params.meta();
        let grad = bpr_mean_gradient(&params, &UserRepr::Id(1), &[(2, 6)]).unwrap();
        let avg = grad.densify(&meta).unwrap();
        let features = featurize(&grad, &avg, &meta, FeatureMode::Pooled).unwrap();
        let cosine = features[meta.predictor_len + 5];
        assert_abs_diff_eq!(cosine, 1.0, epsilon = 1e-12);
        // The average half's cosine slot stays zero by definition.
        assert_eq!(features[2 * meta.predictor_len + 11], 0.0);
    }

    #[test]
    fn pooled_statistics_match_an_independent_recomputation() {
        let params = init_params(4, 10, 3, PredictorKind::DotProduct, 9).unwrap();
        let meta = params.meta();
        let grad = bpr_mean_gradient(&params, &UserRepr::Id(2), &[(1, 7), (3, 9)]).unwrap();
        let other = bpr_mean_gradient(&params, &UserRepr::Id(0), &[(4, 8)]).unwrap();
        let mut avg = grad.densify(&meta).unwrap();
        for (a, b) in avg.iter_mut().zip(other.densify(&meta).unwrap()) {
            *a = (*a + b) / 2.0;
        }
        let features = featurize(&grad, &avg, &meta, FeatureMode::Pooled).unwrap();

        let entries: Vec<f64> = grad
            .user_rows
            .values()
            .chain(grad.item_rows.values())
            .flatten()
            .copied()
            .collect();
        let l2 = entries.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n = entries.len() as f64;
        let mean = entries.iter().sum::<f64>() / n;
        let var = entries.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert_abs_diff_eq!(features[0], l2, epsilon = 1e-12);
        assert_abs_diff_eq!(features[1], mean, epsilon = 1e-12);
        assert_abs_diff_eq!(features[2], var.sqrt(), epsilon = 1e-12);
        let max_abs = entries.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_abs_diff_eq!(features[3], max_abs, epsilon = 1e-12);
        assert_abs_diff_eq!(
            features[4],
            grad.touched_rows() as f64 / meta.total_rows() as f64,
            epsilon = 1e-12
        );
        // Direct cosine recomputation over densified vectors.
        let dense = grad.densify(&meta).unwrap();
        let emb = meta.embedding_len();
        let dot: f64 = dense[..emb].iter().zip(&avg[..emb]).map(|(a, b)| a * b).sum();
        let na: f64 = dense[..emb].iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = avg[..emb].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(features[5], dot / (na * nb), epsilon = 1e-12);
    }

    #[test]
    fn raw_dense_mode_concatenates_both_halves() {
        let params = init_params(2, 4, 2, PredictorKind::DotProduct, 1).unwrap();
        let meta = params.meta();
        let grad = bpr_mean_gradient(&params, &UserRepr::Id(0), &[(1, 3)]).unwrap();
        let avg = vec![0.25; meta.dense_len()];
        let features = featurize(&grad, &avg, &meta, FeatureMode::RawDense).unwrap();
        let dense = grad.densify(&meta).unwrap();
        assert_eq!(features.len(), 2 * meta.dense_len());
        assert_eq!(&features[..meta.dense_len()], dense.as_slice());
        assert_eq!(&features[meta.dense_len()..], avg.as_slice());
    }

    #[test]
    fn balancing_downsamples_the_majority_class_exactly() {
        let mut records = Vec::new();
        for i in 0..30 {
            records.push(LabeledFeature {
                features: vec![i as f64],
                malicious: false,
            });
        }
        for i in 0..10 {
            records.push(LabeledFeature {
                features: vec![100.0 + i as f64],
                malicious: true,
            });
        }
        let ds = DetectorDataset::balanced(records, 7).unwrap();
        assert_eq!(ds.records.len(), 20);
        assert_eq!(ds.records.iter().filter(|r| r.malicious).count(), 10);
        // Deterministic per seed.
        let again: Vec<f64> = {
            let mut records = Vec::new();
            for i in 0..30 {
                records.push(LabeledFeature {
                    features: vec![i as f64],
                    malicious: false,
                });
            }
            for i in 0..10 {
                records.push(LabeledFeature {
                    features: vec![100.0 + i as f64],
                    malicious: true,
                });
            }
            DetectorDataset::balanced(records, 7)
                .unwrap()
                .records
                .iter()
                .map(|r| r.features[0])
                .collect()
        };
        let first: Vec<f64> = ds.records.iter().map(|r| r.features[0]).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn balancing_rejects_single_class_inputs() {
        let records = vec![
            LabeledFeature {
                features: vec![0.0],
                malicious: false,
            };
            5
        ];
        assert!(matches!(
            DetectorDataset::balanced(records, 0),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn detector_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = 5;
        let records: Vec<LabeledFeature> = (0..8)
            .map(|i| LabeledFeature {
                features: (0..f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                malicious: i % 2 == 0,
            })
            .collect();
        let model = DetectorModel::init(f, 3).unwrap();
        let analytic = batch_gradients(&model, &records).unwrap();

        // Flatten parameters, rebuild the model inside the closure.
        let h = DETECTOR_HIDDEN;
        let mut x0: Vec<f64> = model.w1.iter().copied().collect();
        x0.extend_from_slice(&model.b1);
        x0.extend_from_slice(&model.w2);
        x0.push(model.b2);
        let loss = |x: &[f64]| -> f64 {
            let m = DetectorModel {
                w1: Array2::from_shape_vec((h, f), x[..h * f].to_vec()).unwrap(),
                b1: x[h * f..h * f + h].to_vec(),
                w2: x[h * f + h..h * f + 2 * h].to_vec(),
                b2: x[h * f + 2 * h],
                threshold: 0.5,
            };
            batch_loss(&m, &records).unwrap()
        };
        let numeric = oracles::finite_difference(&loss, &x0, 1e-6);
        let mut flat: Vec<f64> = analytic.w1.iter().copied().collect();
        flat.extend_from_slice(&analytic.b1);
        flat.extend_from_slice(&analytic.w2);
        flat.push(analytic.b2);
        for (a, n) in flat.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn separable_dataset(n_per_class: usize, seed: u64) -> DetectorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for _ in 0..n_per_class {
            records.push(LabeledFeature {
                features: vec![1.0 + rng.random::<f64>(), rng.random::<f64>() - 0.5],
                malicious: true,
            });
            records.push(LabeledFeature {
                features: vec![-1.0 - rng.random::<f64>(), rng.random::<f64>() - 0.5],
                malicious: false,
            });
        }
        DetectorDataset { records }
    }

    #[test]
    fn linearly_separable_features_reach_perfect_holdout_accuracy() {
        let ds = separable_dataset(40, 5);
        let report = train_detector(&ds, 200, 0.5, 11).unwrap();
        assert_eq!(report.holdout_accuracy, 1.0);
        assert_eq!(report.holdout_size, 16);
        assert_eq!(report.train_size, 64);
    }

    #[test]
    fn random_labels_hover_near_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let records: Vec<LabeledFeature> = (0..400)
            .map(|_| LabeledFeature {
                features: (0..4).map(|_| rng.random::<f64>() - 0.5).collect(),
                malicious: rng.random::<bool>(),
            })
            .collect();
        let ds = DetectorDataset { records };
        let report = train_detector(&ds, 100, 0.2, 3).unwrap();
        assert!(
            (report.holdout_accuracy - 0.5).abs() <= 0.1,
            "accuracy {} strays from chance",
            report.holdout_accuracy
        );
    }

    #[test]
    fn zero_epochs_is_deterministic_per_seed() {
        let ds = separable_dataset(10, 2);
        let a = train_detector(&ds, 0, 0.1, 9).unwrap();
        let b = train_detector(&ds, 0, 0.1, 9).unwrap();
        assert_eq!(a.holdout_accuracy, b.holdout_accuracy);
        assert_eq!(a.model.w1, b.model.w1);
        assert_eq!(a.model.w2, b.model.w2);
        let c = train_detector(&ds, 0, 0.1, 10).unwrap();
        assert_ne!(a.model.w1, c.model.w1);
    }

    #[test]
    fn training_rejects_single_class_and_bad_rates() {
        let mut ds = separable_dataset(5, 1);
        assert!(train_detector(&ds, 10, 0.0, 0).is_err());
        ds.records.retain(|r| r.malicious);
        assert!(matches!(
            train_detector(&ds, 10, 0.1, 0),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn filtering_flags_scores_at_or_above_threshold() {
        let params = init_params(4, 8, 3, PredictorKind::DotProduct, 2).unwrap();
        let meta = params.meta();
        let grads: Vec<SparseGradient> = (0..3)
            .map(|i| bpr_mean_gradient(&params, &UserRepr::Id(i), &[(1, 5)]).unwrap())
            .collect();
        let mut avg = vec![0.0; meta.dense_len()];
        for g in &grads {
            g.add_into(&meta, &mut avg, 1.0 / 3.0).unwrap();
        }
        let mut model = DetectorModel::init(feature_len(&meta, FeatureMode::Pooled), 0).unwrap();
        // Threshold above every possible score: nothing flagged.
        model.threshold = 1.1;
        let out =
            detect_and_filter(&model, &grads, &avg, &meta, FeatureMode::Pooled).unwrap();
        assert_eq!(out.kept, vec![0, 1, 2]);
        assert!(out.flagged.is_empty());
        assert!(!out.kept_all_fallback);
        // Threshold zero: everything flagged, keep-all fallback.
        model.threshold = 0.0;
        let out =
            detect_and_filter(&model, &grads, &avg, &meta, FeatureMode::Pooled).unwrap();
        assert_eq!(out.kept, vec![0, 1, 2]);
        assert_eq!(out.flagged, vec![0, 1, 2]);
        assert!(out.kept_all_fallback);
    }

    #[test]
    fn hand_built_model_scores_follow_the_forward_definition() {
        // Scores on feature 0 alone: w1 row 0 passes it through, w2
        // reads it out with a large gain.
        let f = 2;
        let mut model = DetectorModel {
            w1: Array2::zeros((DETECTOR_HIDDEN, f)),
            b1: vec![0.0; DETECTOR_HIDDEN],
            w2: vec![0.0; DETECTOR_HIDDEN],
            b2: 0.0,
            threshold: 0.5,
        };
        model.w1[[0, 0]] = 1.0;
        model.w2[0] = 10.0;
        assert!(model.predict(&[1.0, 0.0]).unwrap() > 0.99);
        // ReLU kills the negative pre-activation: score sits at sigmoid(0).
        assert_abs_diff_eq!(model.predict(&[-1.0, 0.0]).unwrap(), 0.5, epsilon = 1e-12);
        // Shape mismatches are rejected rather than silently truncated.
        assert!(model.predict(&[1.0]).is_err());
    }
}
