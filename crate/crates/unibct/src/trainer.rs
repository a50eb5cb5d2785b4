//! SGD training loops for the old and new embedding models.
//!
//! Both models train the same way: an ArcFace classification head over the
//! training classes, plus (for the new model, after warmup) a weighted
//! compatibility term. With `eta == 0` the compatibility machinery is
//! dropped entirely, so such a run is bit-identical to plain
//! classification training.
//!
//! Pseudo prototypes are rebuilt from the current new model at the
//! configured regeneration epochs (and on first activation), before any
//! gradient step of that epoch. A non-finite value anywhere in an epoch is
//! treated as divergence: the model is rolled back to the last epoch-end
//! snapshot and the log records where training stopped.

use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arcface::{arcface_loss, ArcFaceParams, LossOutput, PrototypeMatrix};
use crate::error::{Error, Result};
use crate::losses::{bct_loss, contrastive_loss, regress_loss, unibct_loss, CompatLossKind, CompatLossSpec};
use crate::model::{EmbeddingModel, ModelConfig};
use crate::optim::Sgd;
use crate::prototype::{build_pseudo_classifier, PoolVariant, PseudoClassifier, RefinementConfig};
use crate::rng::{seeded, stream};
use crate::synthetic::LabeledDataset;

/// Optimization schedule. The default fits a desk-scale run; see
/// [`TrainConfig::full_scale`] for the longer schedule.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs at the start that train the classification term only.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at whose start the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at whose start the pseudo prototypes are rebuilt from the
    /// current new model. Only takes effect once the compat term is active.
    pub regen_epochs: Vec<usize>,
    /// Margin head used by the classification term.
    pub arcface: ArcFaceParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 8,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![18, 24],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            regen_epochs: vec![8, 16, 24],
            arcface: ArcFaceParams::default(),
        }
    }
}

impl TrainConfig {
    /// Longer schedule for full-scale runs.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 35,
            warmup_epochs: 10,
            batch_size: 256,
            lr: 0.1,
            lr_decay_epochs: vec![20, 26, 32],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            regen_epochs: vec![10, 20],
            arcface: ArcFaceParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!(
                    "{} leaves no compat epochs before {}",
                    self.warmup_epochs, self.epochs
                ),
            ));
        }
        for &e in &self.regen_epochs {
            if e < self.warmup_epochs || e >= self.epochs {
                return Err(Error::config(
                    "regen_epochs",
                    format!(
                        "epoch {e} outside the compat window [{}, {})",
                        self.warmup_epochs, self.epochs
                    ),
                ));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be finite and positive"));
        }
        if !(self.lr_decay_factor.is_finite()
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor <= 1.0)
        {
            return Err(Error::config("lr_decay_factor", "must be in (0, 1]"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        self.arcface.validate()
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(steps as i32)
    }
}

/// Loss and audit trail of one epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean classification loss over the epoch's batches.
    pub cls_loss: f64,
    /// Mean compatibility loss; 0 while the term is inactive.
    pub compat_loss: f64,
    /// Mean of `cls + eta * compat` over the epoch's batches.
    pub total_loss: f64,
    /// Parameter hash of the trained model at epoch end.
    pub model_hash: u64,
    /// Content hash of the compat target (pseudo prototypes or old
    /// classifier) the epoch trained against, when one was active.
    pub compat_target_hash: Option<u64>,
    /// True when this epoch rebuilt the pseudo prototypes before training.
    pub prototype_regen: bool,
    /// Parameter hash of the frozen old model, when one is attached.
    /// Constant across epochs by construction; logged so a run can prove it.
    pub frozen_old_hash: Option<u64>,
    /// Wall time of the epoch. Excluded from determinism fingerprints.
    pub wall_time_ms: f64,
}

/// Per-epoch records plus where training stopped, if it diverged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch that produced a non-finite value; the returned model is the
    /// snapshot from the end of the previous epoch.
    pub diverged_at: Option<usize>,
    pub final_model_hash: u64,
}

impl TrainLog {
    /// Hash over everything reproducible: losses, rates, and parameter
    /// hashes, but not wall time.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.epochs.len().hash(&mut h);
        for r in &self.epochs {
            r.epoch.hash(&mut h);
            r.lr.to_bits().hash(&mut h);
            r.cls_loss.to_bits().hash(&mut h);
            r.compat_loss.to_bits().hash(&mut h);
            r.total_loss.to_bits().hash(&mut h);
            r.model_hash.hash(&mut h);
            r.compat_target_hash.hash(&mut h);
            r.prototype_regen.hash(&mut h);
            r.frozen_old_hash.hash(&mut h);
        }
        self.diverged_at.hash(&mut h);
        self.final_model_hash.hash(&mut h);
        h.finish()
    }

    /// One JSON object per epoch.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for record in &self.epochs {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Everything the compatibility term needs during new-model training.
struct CompatDriver<'a> {
    old_model: &'a EmbeddingModel,
    old_classifier: Option<&'a PrototypeMatrix>,
    spec: CompatLossSpec,
    refinement: RefinementConfig,
    seed: u64,
    pseudo: Option<PseudoClassifier>,
}

impl CompatDriver<'_> {
    fn needs_pseudo(&self) -> bool {
        self.spec.kind.uses_pseudo_prototypes()
    }

    /// Rebuilds the pseudo prototypes from the current model when the
    /// schedule asks for it (or none exist yet). Runs before the epoch's
    /// gradient steps; nothing here feeds back into the graph. Returns
    /// whether a rebuild happened.
    fn maybe_regen(
        &mut self,
        model: &EmbeddingModel,
        data: &LabeledDataset,
        epoch: usize,
        regen_epochs: &[usize],
    ) -> Result<bool> {
        if !self.needs_pseudo() {
            return Ok(false);
        }
        if self.pseudo.is_some() && !regen_epochs.contains(&epoch) {
            return Ok(false);
        }
        let seed = self.seed.wrapping_add(stream::REGEN_BASE + epoch as u64);
        self.pseudo = Some(build_pseudo_classifier(
            self.old_model,
            model,
            data,
            &self.refinement,
            seed,
        )?);
        Ok(true)
    }

    fn batch_loss(
        &self,
        new_features: &DMatrix<f64>,
        labels: &[usize],
        batch_inputs: &DMatrix<f64>,
    ) -> Result<LossOutput> {
        match self.spec.kind {
            CompatLossKind::UniBct | CompatLossKind::UniBctVanilla => {
                let pseudo = self.pseudo.as_ref().ok_or_else(|| {
                    Error::numerical("compat", "pseudo prototypes not built before use")
                })?;
                unibct_loss(new_features, labels, &pseudo.prototypes, &self.spec.arcface)
            }
            CompatLossKind::Bct => {
                let classifier = self.old_classifier.ok_or_else(|| {
                    Error::config("old_classifier", "required by the bct loss")
                })?;
                bct_loss(new_features, labels, classifier, &self.spec.arcface)
            }
            CompatLossKind::Regress => {
                let old = self.old_model.forward(batch_inputs)?;
                regress_loss(new_features, &old)
            }
            CompatLossKind::Contrastive => {
                let old = self.old_model.forward(batch_inputs)?;
                contrastive_loss(new_features, &old, labels, self.spec.tau_contrastive)
            }
        }
    }

    fn target_hash(&self) -> Option<u64> {
        match self.spec.kind {
            CompatLossKind::UniBct | CompatLossKind::UniBctVanilla => {
                self.pseudo.as_ref().map(|p| p.prototypes.content_hash())
            }
            CompatLossKind::Bct => self.old_classifier.map(|c| c.content_hash()),
            CompatLossKind::Regress | CompatLossKind::Contrastive => None,
        }
    }
}

/// Trains a model with classification loss only. Returns the model, its
/// trained (still trainable) classifier, and the log.
pub fn train_old_model(
    data: &LabeledDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EmbeddingModel, PrototypeMatrix, TrainLog)> {
    train_model(data, model_cfg, cfg, None, seed)
}

/// Trains a new model against a frozen old one.
///
/// The classification head always trains on `data`'s classes; the compat
/// term in `loss` activates after warmup. `old_classifier` is only needed
/// by the bct loss, which also requires it to cover every class in `data`
/// (otherwise the split is open-set and the run is rejected up front).
#[allow(clippy::too_many_arguments)]
pub fn train_new_model(
    data: &LabeledDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss: &CompatLossSpec,
    refinement: &RefinementConfig,
    old_model: &EmbeddingModel,
    old_classifier: Option<&PrototypeMatrix>,
    seed: u64,
) -> Result<(EmbeddingModel, PrototypeMatrix, TrainLog)> {
    loss.validate()?;
    refinement.validate()?;
    if old_model.embed_dim() != model_cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            context: "train_new_model".into(),
            expected: format!("embed_dim {} to match the old model", old_model.embed_dim()),
            got: format!("{}", model_cfg.embed_dim),
        });
    }
    if old_model.config().input_dim != model_cfg.input_dim {
        return Err(Error::ShapeMismatch {
            context: "train_new_model".into(),
            expected: format!(
                "input_dim {} to match the old model",
                old_model.config().input_dim
            ),
            got: format!("{}", model_cfg.input_dim),
        });
    }

    if loss.kind == CompatLossKind::Bct {
        let classifier = old_classifier
            .ok_or_else(|| Error::config("old_classifier", "required by the bct loss"))?;
        for class in data.class_ids() {
            if classifier.row_of(class).is_none() {
                return Err(Error::Inapplicable(format!(
                    "bct cannot train: class {class} is not covered by the old classifier \
                     (open-set split)"
                )));
            }
        }
    }

    // eta == 0 means no compat influence at all; dropping the driver keeps
    // the run on the exact same code path as plain classification.
    let driver = if loss.eta == 0.0 {
        None
    } else {
        let mut refinement = refinement.clone();
        if loss.kind == CompatLossKind::UniBctVanilla {
            refinement.variant = PoolVariant::VanillaAvg;
        }
        Some(CompatDriver {
            old_model,
            old_classifier,
            spec: *loss,
            refinement,
            seed,
            pseudo: None,
        })
    };
    train_model(data, model_cfg, cfg, driver, seed)
}

fn train_model(
    data: &LabeledDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut driver: Option<CompatDriver<'_>>,
    seed: u64,
) -> Result<(EmbeddingModel, PrototypeMatrix, TrainLog)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.input_dim() != model_cfg.input_dim {
        return Err(Error::ShapeMismatch {
            context: "train_model".into(),
            expected: format!("input_dim {}", model_cfg.input_dim),
            got: format!("{}", data.input_dim()),
        });
    }
    if data.num_classes() < 2 {
        return Err(Error::config(
            "dataset",
            "training needs at least two classes",
        ));
    }

    let mut model = EmbeddingModel::new(model_cfg)?;
    let mut classifier =
        PrototypeMatrix::random(data.class_ids(), model_cfg.embed_dim, seed, true)?;
    let mut sgd = Sgd::new(&model, Some(&classifier), cfg.momentum, cfg.weight_decay);

    let mut snapshot = (model.clone(), classifier.clone());
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut diverged_at = None;

    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let compat_active = driver.is_some() && epoch >= cfg.warmup_epochs;

        let mut regenerated = false;
        if compat_active {
            let d = driver.as_mut().expect("checked above");
            match d.maybe_regen(&model, data, epoch, &cfg.regen_epochs) {
                Ok(done) => regenerated = done,
                Err(Error::Numerical { .. }) => {
                    let (m, c) = snapshot;
                    model = m;
                    classifier = c;
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e.in_epoch(epoch)),
            }
        }

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(seed, stream::SHUFFLE_BASE + epoch as u64));

        let mut cls_sum = 0.0;
        let mut compat_sum = 0.0;
        let mut total_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = DMatrix::zeros(chunk.len(), data.input_dim());
            let mut labels = Vec::with_capacity(chunk.len());
            for (i, &row) in chunk.iter().enumerate() {
                inputs.row_mut(i).copy_from(&data.inputs.row(row));
                labels.push(data.labels[row]);
            }

            let outcome = (|| -> Result<(f64, f64)> {
                let cache = model.forward_cached(&inputs)?;
                let cls = arcface_loss(cache.features(), &labels, &classifier, &cfg.arcface)?;
                let mut grad_features = cls.grad_features;
                let mut compat_val = 0.0;
                if compat_active {
                    let d = driver.as_ref().expect("checked above");
                    let out = d.batch_loss(cache.features(), &labels, &inputs)?;
                    compat_val = out.loss;
                    grad_features += out.grad_features * d.spec.eta;
                }
                if !cls.loss.is_finite() || !compat_val.is_finite() {
                    return Err(Error::numerical("train_batch", "non-finite loss"));
                }
                let grads = model.backward(&cache, &grad_features);
                sgd.step_model(&mut model, &grads, lr)?;
                let proto_grad = cls
                    .grad_prototypes
                    .ok_or_else(|| Error::numerical("train_batch", "classifier grad missing"))?;
                sgd.step_prototypes(&mut classifier, &proto_grad, lr)?;
                Ok((cls.loss, compat_val))
            })();

            match outcome {
                Ok((cls_val, compat_val)) => {
                    let eta = driver.as_ref().map_or(0.0, |d| d.spec.eta);
                    cls_sum += cls_val;
                    compat_sum += compat_val;
                    total_sum += cls_val + if compat_active { eta * compat_val } else { 0.0 };
                    batches += 1;
                }
                Err(Error::Numerical { .. }) => {
                    let (m, c) = snapshot;
                    model = m;
                    classifier = c;
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e.in_epoch(epoch)),
            }
        }

        let inv = 1.0 / batches as f64;
        records.push(EpochRecord {
            epoch,
            lr,
            cls_loss: cls_sum * inv,
            compat_loss: compat_sum * inv,
            total_loss: total_sum * inv,
            model_hash: model.param_hash(),
            compat_target_hash: if compat_active {
                driver.as_ref().and_then(|d| d.target_hash())
            } else {
                None
            },
            prototype_regen: regenerated,
            frozen_old_hash: driver.as_ref().map(|d| d.old_model.param_hash()),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        snapshot = (model.clone(), classifier.clone());
    }

    let final_model_hash = model.param_hash();
    Ok((
        model,
        classifier,
        TrainLog {
            epochs: records,
            diverged_at,
            final_model_hash,
        },
    ))
}
