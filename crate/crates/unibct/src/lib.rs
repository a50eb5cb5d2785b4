//! Desk-scale laboratory for backward-compatible embedding training.
//!
//! The crate trains a small "old" embedding model and a larger "new" one on
//! a synthetic retrieval task, attaches a compatibility loss so that new
//! query features can be matched directly against an old gallery, and checks
//! the empirical compatibility criterion: the cross-model test must beat the
//! old model's self-test.
//!
//! The pipeline is organised as:
//!
//! 1. [`synthetic`] generates labeled point clouds and carves them into the
//!    five old/new split scenarios (extended/open data, extended/open class,
//!    identical data).
//! 2. [`model`] is a plain MLP encoder with unit-norm outputs and manual
//!    backprop; [`arcface`] puts an additive angular margin head on top.
//! 3. [`prototype`] turns old-model features into per-class pseudo
//!    prototypes, optionally refined by similarity-graph propagation.
//! 4. [`losses`] implements the compatibility losses (pseudo-prototype
//!    angular loss, classifier-anchored BCT, L2 regression, contrastive).
//! 5. [`trainer`] runs the warmup + regeneration schedule and writes JSONL
//!    train logs.
//! 6. [`eval`] computes TAR@FAR and top-k identification for the cross and
//!    self tests and renders the compatibility verdicts.
//! 7. [`experiment`] wires the above into one reproducible run directory.
//!
//! Everything is seeded; a run with the same config and seed reproduces its
//! `report.json` byte for byte.

pub mod arcface;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod prototype;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use arcface::{arcface_loss, ArcFaceParams, PrototypeMatrix};
pub use error::{Error, Result};
pub use eval::{evaluate_pair, genuine_impostor_scores, metrics_from_features, pairwise_scores, tar_at_far, topk_identification};
pub use eval::{CompatReport, EvalConfig, EvalSet, FarPoint, ModeMetrics, TopKPoint};
pub use experiment::{
    report_json, run_experiment, write_run_outputs, ExperimentConfig, RunArtifacts, RunReport,
};
pub use io::{export_features, export_scores, import_features, load_model, save_model};
pub use losses::{
    bct_loss, contrastive_loss, regress_loss, unibct_loss, CompatLossKind, CompatLossSpec,
};
pub use model::{Activation, EmbeddingModel, FeatureMatrix, ModelConfig};
pub use prototype::{
    build_edges, build_pseudo_classifier, pool_prototype, propagate_closed_form,
    propagate_iterative, ClassGraph, PoolVariant, PropagationMode, RefinementConfig,
};
pub use synthetic::{
    allocate_split, generate_dataset, make_eval_set, DataSplit, DatasetSpec, LabeledDataset,
    Scenario,
};
pub use trainer::{train_new_model, train_old_model, EpochRecord, TrainConfig, TrainLog};
