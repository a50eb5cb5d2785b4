//! One reproducible end-to-end run.
//!
//! A run generates the synthetic dataset, carves it into the scenario's
//! old/new split, trains the old model, trains the new model with the
//! configured compatibility loss against the frozen old one, evaluates the
//! cross and self tests on held-out queries, and renders everything into a
//! [`RunReport`]. Identical configs produce byte-identical `report.json`
//! files; wall-clock timings only ever appear in the JSONL train logs.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, CompatReport, EvalConfig};
use crate::losses::{CompatLossKind, CompatLossSpec};
use crate::model::{Activation, EmbeddingModel, ModelConfig};
use crate::prototype::RefinementConfig;
use crate::synthetic::{allocate_split, generate_dataset, make_eval_set, DatasetSpec, Scenario};
use crate::trainer::{train_new_model, train_old_model, TrainConfig, TrainLog};

/// Offsets mixed into the master seed so each stage draws from its own
/// stream. Values are arbitrary but frozen; changing them changes every
/// reproduced run.
pub const OLD_MODEL_INIT_OFFSET: u64 = 101;
pub const NEW_MODEL_INIT_OFFSET: u64 = 202;
pub const OLD_TRAIN_OFFSET: u64 = 11;
pub const NEW_TRAIN_OFFSET: u64 = 22;
pub const EVAL_DRAW_OFFSET: u64 = 33;

/// Complete description of a run. Serializing this back out reproduces the
/// run exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub scenario: Scenario,
    /// Share of rows (data scenarios) or classes (class scenarios) the old
    /// model trains on.
    pub old_fraction: f64,
    pub loss: CompatLossSpec,
    pub refinement: RefinementConfig,
    /// Hidden widths of the old encoder.
    pub old_hidden: Vec<usize>,
    /// Hidden widths of the new encoder.
    pub new_hidden: Vec<usize>,
    /// Shared embedding dimension; cross-model scoring needs one space.
    pub embed_dim: usize,
    pub activation: Activation,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Master seed; stage seeds are derived from it by fixed offsets.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            scenario: Scenario::ExtendedData,
            old_fraction: 0.3,
            loss: CompatLossSpec::new(CompatLossKind::UniBct),
            refinement: RefinementConfig::default(),
            old_hidden: vec![32],
            new_hidden: vec![64, 64],
            embed_dim: 32,
            activation: Activation::Tanh,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 666,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if !(self.old_fraction > 0.0 && self.old_fraction < 1.0) {
            return Err(Error::config("old_fraction", "must be inside (0, 1)"));
        }
        self.loss.validate()?;
        self.refinement.validate()?;
        self.old_model_config().validate()?;
        self.new_model_config().validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.loss.kind == CompatLossKind::Bct && !self.scenario.same_class_set() {
            return Err(Error::Inapplicable(format!(
                "bct needs the old classifier to cover every new-training class, \
                 but scenario {} gives the new model classes the old model never saw",
                self.scenario
            )));
        }
        Ok(())
    }

    pub fn old_model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.input_dim,
            hidden_dims: self.old_hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
            init_seed: self.seed.wrapping_add(OLD_MODEL_INIT_OFFSET),
        }
    }

    pub fn new_model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.input_dim,
            hidden_dims: self.new_hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
            init_seed: self.seed.wrapping_add(NEW_MODEL_INIT_OFFSET),
        }
    }
}

/// Row and class counts of the materialized split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSummary {
    pub old_rows: usize,
    pub new_rows: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    pub shared_classes: usize,
    pub eval_classes: usize,
}

/// Everything a run writes into `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub loss_kind: CompatLossKind,
    pub eta: f64,
    pub split: SplitSummary,
    pub old_diverged_at: Option<usize>,
    pub new_diverged_at: Option<usize>,
    /// Mean total loss of the last completed epoch, if any completed.
    pub old_final_loss: Option<f64>,
    pub new_final_loss: Option<f64>,
    pub old_model_hash: u64,
    pub new_model_hash: u64,
    pub metrics: CompatReport,
    pub config: ExperimentConfig,
}

/// Report plus the in-memory models and logs behind it.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub old_model: EmbeddingModel,
    pub new_model: EmbeddingModel,
    pub old_log: TrainLog,
    pub new_log: TrainLog,
}

/// Runs the full pipeline for one config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let data = generate_dataset(&config.dataset)?;
    let split = allocate_split(&data, config.scenario, config.old_fraction, config.seed)?;

    let (old_model, old_classifier, old_log) = train_old_model(
        &split.old_set,
        &config.old_model_config(),
        &config.train,
        config.seed.wrapping_add(OLD_TRAIN_OFFSET),
    )?;

    let frozen_classifier = old_classifier.frozen_clone();
    let (new_model, _, new_log) = train_new_model(
        &split.new_set,
        &config.new_model_config(),
        &config.train,
        &config.loss,
        &config.refinement,
        &old_model,
        Some(&frozen_classifier),
        config.seed.wrapping_add(NEW_TRAIN_OFFSET),
    )?;

    let old_classes: BTreeSet<usize> = split.old_set.class_ids().into_iter().collect();
    let new_classes: BTreeSet<usize> = split.new_set.class_ids().into_iter().collect();
    let eval_classes: Vec<usize> = old_classes.union(&new_classes).copied().collect();
    let eval_set = make_eval_set(
        &data,
        &eval_classes,
        Some(&split.shifted_centers),
        config.eval.queries_per_class,
        config.eval.gallery_per_class,
        config.seed.wrapping_add(EVAL_DRAW_OFFSET),
    )?;
    let metrics = evaluate_pair(&old_model, &new_model, &eval_set, &config.eval)?;

    let split_summary = SplitSummary {
        old_rows: split.old_set.len(),
        new_rows: split.new_set.len(),
        old_classes: old_classes.len(),
        new_classes: new_classes.len(),
        shared_classes: old_classes.intersection(&new_classes).count(),
        eval_classes: eval_classes.len(),
    };

    let report = RunReport {
        scenario: config.scenario,
        loss_kind: config.loss.kind,
        eta: config.loss.eta,
        split: split_summary,
        old_diverged_at: old_log.diverged_at,
        new_diverged_at: new_log.diverged_at,
        old_final_loss: old_log.epochs.last().map(|r| r.total_loss),
        new_final_loss: new_log.epochs.last().map(|r| r.total_loss),
        old_model_hash: old_model.param_hash(),
        new_model_hash: new_model.param_hash(),
        metrics,
        config: config.clone(),
    };

    Ok(RunArtifacts {
        report,
        old_model,
        new_model,
        old_log,
        new_log,
    })
}

/// Serializes `report.json` exactly as a run directory stores it.
pub fn report_json(report: &RunReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes a run directory: `report.json`, `config.json`, the two JSONL
/// train logs, and (optionally) both model checkpoints. Returns the paths
/// written.
pub fn write_run_outputs(
    artifacts: &RunArtifacts,
    dir: &Path,
    save_models: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let report_path = dir.join("report.json");
    fs::File::create(&report_path)?.write_all(&report_json(&artifacts.report)?)?;
    written.push(report_path);

    let config_path = dir.join("config.json");
    let mut config_bytes = serde_json::to_vec_pretty(&artifacts.report.config)?;
    config_bytes.push(b'\n');
    fs::File::create(&config_path)?.write_all(&config_bytes)?;
    written.push(config_path);

    let new_log_path = dir.join("trainlog.jsonl");
    artifacts.new_log.save_jsonl(&new_log_path)?;
    written.push(new_log_path);

    let old_log_path = dir.join("trainlog_old.jsonl");
    artifacts.old_log.save_jsonl(&old_log_path)?;
    written.push(old_log_path);

    if save_models {
        let old_path = dir.join("old_model.bin");
        crate::io::save_model(&artifacts.old_model, &old_path)?;
        written.push(old_path);
        let new_path = dir.join("new_model.bin");
        crate::io::save_model(&artifacts.new_model, &new_path)?;
        written.push(new_path);
    }

    Ok(written)
}
