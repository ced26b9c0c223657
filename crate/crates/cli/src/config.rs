//! TOML experiment configuration.
//!
//! Parsing is fail-closed: unknown keys are errors, every value is
//! validated before anything runs, and the resolved [`ExperimentSpec`]
//! carries a content hash of the config file so every output row can be
//! traced back to the exact configuration that produced it.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fedrec_core::attacks::AttackStrategy;
use fedrec_core::dataset::LogFormat;
use fedrec_core::defenses::AggregationRule;
use fedrec_core::detection::FeatureMode;
use fedrec_core::fedcore::SimulationConfig;
use fedrec_core::model::{PredictorKind, UserModelKind};
use fedrec_core::SyntheticSpec;

// -----------------------------------------------------------------------
// Raw TOML schema (everything optional except [data].source)
// -----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    pub data: DataSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic` or `file`.
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// `movielens` or `tsv` (file source only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Within-cluster popularity skew exponent (synthetic source only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub popularity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// `dot_product` or `mlp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictor: Option<String>,
    /// `seq_mean` or `id_embedding`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_model: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Clients per round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_positives: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// `none`, `fed_attack`, `label_flip`, `gaussian`, `lie`, `stat_opt`
    /// or `dyn_opt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub byz_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// LIE z override.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_step: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    /// `mean`, `median`, `trimmed_mean`, `krum`, `multi_krum` or
    /// `norm_bound`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_select: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// `pooled` or `raw_dense`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclude_seen: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacks: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defenses: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub byz_ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_fractions: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

// -----------------------------------------------------------------------
// Resolved spec
// -----------------------------------------------------------------------

/// Where the interaction log comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    File { path: PathBuf, format: LogFormat },
}

/// Detector hyperparameters for the two-phase protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSettings {
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
    pub mode: FeatureMode,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            epochs: 200,
            lr: 0.05,
            threshold: 0.5,
            mode: FeatureMode::Pooled,
        }
    }
}

/// One sweep grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub attack: AttackStrategy,
    pub defense: AggregationRule,
    pub byz_ratio: f64,
}

impl Cell {
    /// Attack label with the pool fraction appended for partial-pool
    /// ablation cells.
    pub fn attack_label(&self) -> String {
        match self.attack {
            AttackStrategy::FedAttack { pool_fraction } if pool_fraction != 1.0 => {
                format!("fed_attack(pool={pool_fraction})")
            }
            other => other.label().to_string(),
        }
    }
}

/// Fully validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// Base configuration; sweeps override attack/defense/ratio/seed.
    pub base: SimulationConfig,
    pub data: DataSpec,
    pub detector: DetectorSettings,
    pub attacks: Vec<AttackStrategy>,
    pub defenses: Vec<AggregationRule>,
    pub byz_ratios: Vec<f64>,
    pub pool_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// SHA-256 of the config file bytes, hex-encoded.
    pub config_hash: String,
}

impl ExperimentSpec {
    /// The sweep grid: attacks x defenses x ratios, with one cell per
    /// pool fraction for pool-aware attacks only.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &attack in &self.attacks {
            let variants: Vec<AttackStrategy> = match attack {
                AttackStrategy::FedAttack { .. } => self
                    .pool_fractions
                    .iter()
                    .map(|&pool_fraction| AttackStrategy::FedAttack { pool_fraction })
                    .collect(),
                other => vec![other],
            };
            for attack in variants {
                for &defense in &self.defenses {
                    for &byz_ratio in &self.byz_ratios {
                        out.push(Cell {
                            attack,
                            defense,
                            byz_ratio,
                        });
                    }
                }
            }
        }
        out
    }

    /// The base simulation config with one cell and seed substituted in.
    pub fn config_for(&self, cell: &Cell, seed: u64) -> SimulationConfig {
        SimulationConfig {
            seed,
            byzantine_ratio: cell.byz_ratio,
            attack: cell.attack,
            defense: cell.defense,
            ..self.base.clone()
        }
    }
}

// -----------------------------------------------------------------------
// Parsing
// -----------------------------------------------------------------------

/// Reads, parses and validates a TOML config file.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config file is not valid UTF-8")?;
    let raw: RawConfig = toml::from_str(text)
        .with_context(|| format!("invalid config {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let config_hash = hex_string(&hasher.finalize());
    resolve(&raw, config_hash)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Validates a parsed raw config into an [`ExperimentSpec`].
pub fn resolve(raw: &RawConfig, config_hash: String) -> Result<ExperimentSpec> {
    let seed = raw.run.as_ref().and_then(|r| r.seed).unwrap_or(0);
    let data = resolve_data(&raw.data)?;

    let model = raw.model.clone().unwrap_or_default();
    let dim = model.dim.unwrap_or(64);
    let predictor = match model.predictor.as_deref().unwrap_or("dot_product") {
        "dot_product" => PredictorKind::DotProduct,
        "mlp" => PredictorKind::Mlp,
        other => bail!("unknown model.predictor `{other}` (expected `dot_product` or `mlp`)"),
    };
    let user_model = match model.user_model.as_deref().unwrap_or("seq_mean") {
        "seq_mean" => UserModelKind::SeqMean,
        "id_embedding" => UserModelKind::IdEmbedding,
        other => {
            bail!("unknown model.user_model `{other}` (expected `seq_mean` or `id_embedding`)")
        }
    };

    let train = raw.train.clone().unwrap_or_default();
    let attack_section = raw.attack.clone().unwrap_or_default();
    let defense_section = raw.defense.clone().unwrap_or_default();
    let eval = raw.eval.clone().unwrap_or_default();

    let base_attack = attack_from(
        attack_section.kind.as_deref().unwrap_or("none"),
        &attack_section,
    )?;
    let base_defense = defense_from(
        defense_section.kind.as_deref().unwrap_or("mean"),
        &defense_section,
    )?;

    let base = SimulationConfig {
        seed,
        dim,
        lr: train.lr.unwrap_or(1e-3),
        max_epochs: train.epochs.unwrap_or(50),
        clients_per_round: train.batch.unwrap_or(16),
        k_positives: train.k_positives.unwrap_or(4),
        k_eval: eval.k.unwrap_or(5),
        exclude_seen: eval.exclude_seen.unwrap_or(true),
        user_model,
        predictor,
        byzantine_ratio: attack_section.byz_ratio.unwrap_or(0.0),
        attack: base_attack,
        defense: base_defense,
    };
    base.validate()
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;

    let det = raw.detector.clone().unwrap_or_default();
    let defaults = DetectorSettings::default();
    let detector = DetectorSettings {
        epochs: det.epochs.unwrap_or(defaults.epochs),
        lr: det.lr.unwrap_or(defaults.lr),
        threshold: det.threshold.unwrap_or(defaults.threshold),
        mode: match det.features.as_deref().unwrap_or("pooled") {
            "pooled" => FeatureMode::Pooled,
            "raw_dense" => FeatureMode::RawDense,
            other => {
                bail!("unknown detector.features `{other}` (expected `pooled` or `raw_dense`)")
            }
        },
    };
    if detector.epochs == 0 {
        bail!("detector.epochs must be at least 1");
    }
    if !(detector.lr > 0.0) {
        bail!("detector.lr must be positive, got {}", detector.lr);
    }
    if !(0.0..=1.0).contains(&detector.threshold) {
        bail!(
            "detector.threshold must lie in [0, 1], got {}",
            detector.threshold
        );
    }

    let sweep = raw.sweep.clone().unwrap_or_default();
    let attacks = match &sweep.attacks {
        None => vec![base.attack],
        Some(kinds) => kinds
            .iter()
            .map(|k| attack_from(k, &attack_section))
            .collect::<Result<_>>()?,
    };
    let defenses = match &sweep.defenses {
        None => vec![base.defense],
        Some(kinds) => kinds
            .iter()
            .map(|k| defense_from(k, &defense_section))
            .collect::<Result<_>>()?,
    };
    let byz_ratios = sweep
        .byz_ratios
        .clone()
        .unwrap_or_else(|| vec![base.byzantine_ratio]);
    for &r in &byz_ratios {
        if !(0.0..=1.0).contains(&r) {
            bail!("sweep.byz_ratios entries must lie in [0, 1], got {r}");
        }
    }
    let pool_fractions = sweep.pool_fractions.clone().unwrap_or_else(|| {
        vec![match base.attack {
            AttackStrategy::FedAttack { pool_fraction } => pool_fraction,
            _ => attack_section.pool_fraction.unwrap_or(1.0),
        }]
    });
    for &p in &pool_fractions {
        if !(p > 0.0 && p <= 1.0) {
            bail!("sweep.pool_fractions entries must lie in (0, 1], got {p}");
        }
    }
    let seeds = sweep.seeds.clone().unwrap_or_else(|| vec![seed]);
    if seeds.is_empty()
        || attacks.is_empty()
        || defenses.is_empty()
        || byz_ratios.is_empty()
        || pool_fractions.is_empty()
    {
        bail!("sweep axes must be non-empty");
    }
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        bail!("sweep.seeds must be distinct, got {seeds:?}");
    }

    Ok(ExperimentSpec {
        base,
        data,
        detector,
        attacks,
        defenses,
        byz_ratios,
        pool_fractions,
        seeds,
        config_hash,
    })
}

fn resolve_data(data: &DataSection) -> Result<DataSpec> {
    match data.source.as_str() {
        "synthetic" => {
            if data.path.is_some() || data.format.is_some() {
                bail!("data.path/data.format only apply to source = \"file\"");
            }
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                users: data.users.unwrap_or(d.users),
                items: data.items.unwrap_or(d.items),
                clusters: data.clusters.unwrap_or(d.clusters),
                profile_min: data.profile_min.unwrap_or(d.profile_min),
                profile_max: data.profile_max.unwrap_or(d.profile_max),
                noise: data.noise.unwrap_or(d.noise),
                popularity: data.popularity.unwrap_or(d.popularity),
            };
            Ok(DataSpec::Synthetic(spec))
        }
        "file" => {
            if data.users.is_some()
                || data.items.is_some()
                || data.clusters.is_some()
                || data.profile_min.is_some()
                || data.profile_max.is_some()
                || data.noise.is_some()
                || data.popularity.is_some()
            {
                bail!("synthetic shape keys only apply to source = \"synthetic\"");
            }
            let path = data
                .path
                .clone()
                .ok_or_else(|| anyhow!("missing key data.path (required for source = \"file\")"))?;
            let format = match data
                .format
                .as_deref()
                .ok_or_else(|| anyhow!("missing key data.format (required for source = \"file\")"))?
            {
                "movielens" => LogFormat::MovieLensDat,
                "tsv" => LogFormat::Tsv,
                other => bail!("unknown data.format `{other}` (expected `movielens` or `tsv`)"),
            };
            Ok(DataSpec::File { path, format })
        }
        other => bail!("unknown data.source `{other}` (expected `synthetic` or `file`)"),
    }
}

fn attack_from(kind: &str, s: &AttackSection) -> Result<AttackStrategy> {
    let attack = match kind {
        "none" => AttackStrategy::None,
        "fed_attack" => AttackStrategy::FedAttack {
            pool_fraction: s.pool_fraction.unwrap_or(1.0),
        },
        "label_flip" => AttackStrategy::LabelFlip,
        "gaussian" => AttackStrategy::Gaussian,
        "lie" => AttackStrategy::Lie { z_override: s.z },
        "stat_opt" => AttackStrategy::StatOpt {
            lambda: s.lambda.unwrap_or(1.0),
        },
        "dyn_opt" => AttackStrategy::DynOpt {
            gamma_init: s.gamma_init.unwrap_or(10.0),
            gamma_step: s.gamma_step.unwrap_or(1e-4),
        },
        other => bail!(
            "unknown attack kind `{other}` (expected one of `none`, `fed_attack`, \
             `label_flip`, `gaussian`, `lie`, `stat_opt`, `dyn_opt`)"
        ),
    };
    attack
        .validate()
        .map_err(|e| anyhow!("invalid attack parameters: {e}"))?;
    Ok(attack)
}

fn defense_from(kind: &str, s: &DefenseSection) -> Result<AggregationRule> {
    let rule = match kind {
        "mean" => AggregationRule::Mean,
        "median" => AggregationRule::Median,
        "trimmed_mean" => AggregationRule::TrimmedMean { beta: s.beta },
        "krum" => AggregationRule::Krum { f: s.f },
        "multi_krum" => AggregationRule::MultiKrum {
            f: s.f,
            m_select: s.m_select,
        },
        "norm_bound" => AggregationRule::NormBound {
            tau: s.tau.unwrap_or(2.0),
        },
        other => bail!(
            "unknown defense kind `{other}` (expected one of `mean`, `median`, \
             `trimmed_mean`, `krum`, `multi_krum`, `norm_bound`)"
        ),
    };
    if let AggregationRule::NormBound { tau } = rule {
        if !(tau > 0.0) {
            bail!("defense.tau must be positive, got {tau}");
        }
    }
    Ok(rule)
}
