//! Deterministic desk-scale simulator for poisoning attacks and robust
//! aggregation in federated implicit-feedback recommendation.
//!
//! The crate is organized around a federated BPR training loop: clients
//! hold leave-one-out split interaction histories, compute sparse pairwise
//! gradients locally, and a simulated server aggregates them under a
//! configurable robust rule before taking a server-side Adam step.
//! Byzantine clients may replace their gradient with one of several
//! poisoning strategies, the strongest of which fabricates hardest
//! negative and pseudo-positive samples from the shared embedding tables.
//! A supervised detector, ranking metrics, hardness-bucket analysis and a
//! power-iteration PCA support the evaluation side.
//!
//! Every run is a pure function of its configuration and dataset: RNG
//! streams are derived per purpose and per client, and aggregation always
//! happens in client-id order, so results are bit-identical at any thread
//! count.

pub mod attacks;
pub mod checkpoint;
pub mod dataset;
pub mod defenses;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fedcore;
pub mod model;
pub mod oracles;
pub mod rng;

pub use attacks::{build_candidate_pool, AttackStrategy, CandidatePool};
pub use checkpoint::{
    load_detector, load_gradient_log, load_model, save_detector, save_gradient_log, save_model,
};
pub use dataset::{
    build_client_registry, leave_one_out_split, load_interactions, synthetic_clustered,
    ClientProfile, ClientRegistry, InteractionLog, LogFormat, Role, Split, SyntheticSpec,
};
pub use defenses::AggregationRule;
pub use detection::{train_detector, DetectorModel, DetectorReport, FeatureMode};
pub use error::{Error, Result};
pub use eval::{evaluate_epoch, pca_project, EpochEval, HardnessProfile, RankTarget, SampleRecord};
pub use fedcore::{
    run_simulation, run_training, MetricsTimeline, RunArtifacts, RunOptions, SimulationConfig,
};
pub use model::{
    bpr_loss, init_params, AdamState, ModelParams, ParamsMeta, PredictorKind, SparseGradient,
    UserModelKind,
};
