//! Additive angular margin (ArcFace) classification head.
//!
//! Logits are scaled cosines between unit features and unit class
//! prototypes; the target class gets its angle pushed by a fixed margin:
//! `z_y = s * cos(theta_y + m)`, `z_j = s * cos(theta_j)` for the rest,
//! followed by softmax cross-entropy. The margin rotation is computed as
//! `cos(theta)cos(m) - sin(theta)sin(m)` with the target cosine clamped to
//! `[-1 + 1e-7, 1 - 1e-7]` so `sin(theta)` stays real and finite.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{matrix_hash, normalize_rows, FeatureMatrix};
use crate::rng::{seeded, stream};

/// Cosine clamp that keeps the margin rotation differentiable.
pub const COS_EPS: f64 = 1e-7;

/// Scale and additive angular margin of the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceParams {
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive angular margin `m`, radians.
    pub margin: f64,
}

impl Default for ArcFaceParams {
    fn default() -> Self {
        ArcFaceParams {
            scale: 64.0,
            margin: 0.5,
        }
    }
}

impl ArcFaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config("scale", "must be finite and positive"));
        }
        if !(self.margin.is_finite() && (0.0..std::f64::consts::PI).contains(&self.margin)) {
            return Err(Error::config("margin", "must lie in [0, pi)"));
        }
        Ok(())
    }
}

/// One unit-norm row per class, tagged with the class ids it covers and
/// whether the optimizer may touch it.
#[derive(Clone, Debug)]
pub struct PrototypeMatrix {
    rows: DMatrix<f64>,
    class_ids: Vec<usize>,
    trainable: bool,
}

impl PrototypeMatrix {
    /// Random unit rows for `class_ids` (which must be strictly ascending).
    pub fn random(class_ids: Vec<usize>, dim: usize, seed: u64, trainable: bool) -> Result<Self> {
        let mut rng = seeded(seed, stream::CLASSIFIER_INIT);
        let mut rows = DMatrix::from_fn(class_ids.len(), dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        normalize_rows(&mut rows, "PrototypeMatrix::random")?;
        Self::from_rows(rows, class_ids, trainable)
    }

    /// Wraps explicit rows; checks ordering, shape and unit norms.
    pub fn from_rows(rows: DMatrix<f64>, class_ids: Vec<usize>, trainable: bool) -> Result<Self> {
        if rows.nrows() != class_ids.len() {
            return Err(Error::ShapeMismatch {
                context: "PrototypeMatrix::from_rows".into(),
                expected: format!("{} rows", class_ids.len()),
                got: format!("{}", rows.nrows()),
            });
        }
        if rows.nrows() == 0 {
            return Err(Error::config("class_ids", "prototype matrix must not be empty"));
        }
        if !class_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(
                "class_ids",
                "class ids must be strictly ascending",
            ));
        }
        for (i, row) in rows.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::numerical(
                    "PrototypeMatrix::from_rows",
                    format!("row {i} has norm {norm:.9}, expected 1"),
                ));
            }
        }
        Ok(PrototypeMatrix {
            rows,
            class_ids,
            trainable,
        })
    }

    /// `num_classes x embed_dim`, unit rows.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.rows
    }

    /// Class ids covered, ascending, parallel to the rows.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Row index of `class`, if covered.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.class_ids.binary_search(&class).ok()
    }

    /// Re-projects every row onto the unit sphere (after an SGD update).
    pub(crate) fn renormalize(&mut self) -> Result<()> {
        normalize_rows(&mut self.rows, "PrototypeMatrix::renormalize")
    }

    /// Copy with updates disabled, for reuse as a fixed compat target.
    pub fn frozen_clone(&self) -> PrototypeMatrix {
        PrototypeMatrix {
            rows: self.rows.clone(),
            class_ids: self.class_ids.clone(),
            trainable: false,
        }
    }

    /// Content hash over rows and class ids; stable across runs.
    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        matrix_hash(&self.rows).hash(&mut hasher);
        self.class_ids.hash(&mut hasher);
        hasher.finish()
    }
}

/// Loss value plus gradients. `grad_prototypes` is `None` when the
/// prototype matrix is frozen.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_features: FeatureMatrix,
    pub grad_prototypes: Option<DMatrix<f64>>,
}

/// Mean additive-angular-margin cross-entropy of a batch.
///
/// `features` rows must be unit-norm embeddings, `labels[i]` the class id of
/// row i; every label must be covered by `prototypes`. Gradients are taken
/// with respect to the raw feature rows (cosines are plain dot products),
/// and with respect to the prototype rows when the matrix is trainable.
pub fn arcface_loss(
    features: &FeatureMatrix,
    labels: &[usize],
    prototypes: &PrototypeMatrix,
    params: &ArcFaceParams,
) -> Result<LossOutput> {
    params.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::BatchComposition("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "arcface_loss".into(),
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if features.ncols() != prototypes.embed_dim() {
        return Err(Error::ShapeMismatch {
            context: "arcface_loss".into(),
            expected: format!("{} feature columns", prototypes.embed_dim()),
            got: format!("{}", features.ncols()),
        });
    }
    let c = prototypes.num_classes();
    if c < 2 {
        return Err(Error::config(
            "prototypes",
            format!("need at least 2 classes, got {c}"),
        ));
    }
    let target_rows: Vec<usize> = labels
        .iter()
        .map(|&label| {
            prototypes.row_of(label).ok_or(Error::LabelCoverage {
                label,
                covered: c,
            })
        })
        .collect::<Result<_>>()?;

    let (sin_m, cos_m) = params.margin.sin_cos();
    let w = prototypes.matrix();
    // cosines[i][j] = <feature_i, prototype_j>
    let mut logits = features * w.transpose();
    // d z_y / d cos_y per sample; zero when the clamp was active.
    let mut dz_dcos_target = vec![0.0; n];

    for i in 0..n {
        let y = target_rows[i];
        let cos_y = logits[(i, y)];
        let t = cos_y.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS);
        let sin_y = (1.0 - t * t).sqrt();
        logits[(i, y)] = t * cos_m - sin_y * sin_m;
        if cos_y == t {
            dz_dcos_target[i] = cos_m + (t / sin_y) * sin_m;
        }
        // Scale every logit of the row.
        for j in 0..c {
            logits[(i, j)] *= params.scale;
        }
    }

    // Softmax cross-entropy, max-subtracted; grad_cos reuses the logits
    // buffer as p - onehot scaled back through d z / d cos.
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = target_rows[i];
        let z_y = logits[(i, y)];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            max = max.max(logits[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..c {
            sum += (logits[(i, j)] - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - z_y;

        for j in 0..c {
            let p = (logits[(i, j)] - max).exp() / sum;
            let dl_dz = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            let dz_dcos = if j == y {
                params.scale * dz_dcos_target[i]
            } else {
                params.scale
            };
            logits[(i, j)] = dl_dz * dz_dcos;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::numerical("arcface_loss", "loss is not finite"));
    }

    let grad_features = &logits * w;
    let grad_prototypes = prototypes
        .trainable
        .then(|| logits.transpose() * features);

    Ok(LossOutput {
        loss,
        grad_features,
        grad_prototypes,
    })
}
