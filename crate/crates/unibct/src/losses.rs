//! Compatibility losses tying new-model features to old-model space.
//!
//! All of them produce gradients with respect to the *new* features only;
//! old features, pseudo prototypes and the old classifier are read-only
//! inputs (and stay frozen over a whole training run, which the trainer
//! audits by hash).

use serde::{Deserialize, Serialize};

use crate::arcface::{arcface_loss, ArcFaceParams, LossOutput, PrototypeMatrix};
use crate::error::{Error, Result};
use crate::model::FeatureMatrix;

/// Which compatibility loss the new model trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompatLossKind {
    /// Angular margin against graph-refined pseudo prototypes.
    #[serde(rename = "unibct")]
    UniBct,
    /// Same, but with plain per-class mean prototypes.
    #[serde(rename = "unibct-vanilla")]
    UniBctVanilla,
    /// Angular margin against the trained old classifier (close-set only).
    #[serde(rename = "bct")]
    Bct,
    /// Mean squared L2 between new and old features of the same sample.
    #[serde(rename = "regress")]
    Regress,
    /// InfoNCE between new anchors and old positives/negatives.
    #[serde(rename = "contrastive")]
    Contrastive,
}

impl CompatLossKind {
    /// Name used in configs, presets and report files.
    pub fn name(&self) -> &'static str {
        match self {
            CompatLossKind::UniBct => "unibct",
            CompatLossKind::UniBctVanilla => "unibct-vanilla",
            CompatLossKind::Bct => "bct",
            CompatLossKind::Regress => "regress",
            CompatLossKind::Contrastive => "contrastive",
        }
    }

    /// True for the kinds that train against a pseudo prototype classifier.
    pub fn uses_pseudo_prototypes(&self) -> bool {
        matches!(self, CompatLossKind::UniBct | CompatLossKind::UniBctVanilla)
    }
}

impl std::str::FromStr for CompatLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unibct" => Ok(CompatLossKind::UniBct),
            "unibct-vanilla" => Ok(CompatLossKind::UniBctVanilla),
            "bct" => Ok(CompatLossKind::Bct),
            "regress" => Ok(CompatLossKind::Regress),
            "contrastive" => Ok(CompatLossKind::Contrastive),
            other => Err(Error::config("loss", format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for CompatLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full specification of the compatibility term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompatLossSpec {
    pub kind: CompatLossKind,
    /// Weight of the compatibility term in the total loss.
    pub eta: f64,
    /// Temperature of the contrastive loss.
    pub tau_contrastive: f64,
    /// Margin head shared by the classification and angular compat losses.
    pub arcface: ArcFaceParams,
}

impl Default for CompatLossSpec {
    fn default() -> Self {
        CompatLossSpec::new(CompatLossKind::UniBct)
    }
}

impl CompatLossSpec {
    pub fn new(kind: CompatLossKind) -> Self {
        CompatLossSpec {
            kind,
            eta: 1.0,
            tau_contrastive: 0.05,
            arcface: ArcFaceParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("eta", "must be finite and non-negative"));
        }
        if !(self.tau_contrastive.is_finite() && self.tau_contrastive > 0.0) {
            return Err(Error::config(
                "tau_contrastive",
                "must be finite and positive",
            ));
        }
        self.arcface.validate()
    }
}

/// Angular margin loss of new features against frozen pseudo prototypes.
pub fn unibct_loss(
    new_features: &FeatureMatrix,
    labels: &[usize],
    pseudo_prototypes: &PrototypeMatrix,
    params: &ArcFaceParams,
) -> Result<LossOutput> {
    if pseudo_prototypes.trainable() {
        return Err(Error::config(
            "pseudo_prototypes",
            "pseudo prototypes must be frozen",
        ));
    }
    arcface_loss(new_features, labels, pseudo_prototypes, params)
}

/// Angular margin loss of new features against the trained old classifier.
///
/// Every batch label must be covered by the old classifier; an uncovered
/// label means the split is open-set and BCT does not apply.
pub fn bct_loss(
    new_features: &FeatureMatrix,
    labels: &[usize],
    old_classifier: &PrototypeMatrix,
    params: &ArcFaceParams,
) -> Result<LossOutput> {
    if old_classifier.trainable() {
        return Err(Error::config(
            "old_classifier",
            "old classifier must be frozen during new-model training",
        ));
    }
    for &label in labels {
        if old_classifier.row_of(label).is_none() {
            return Err(Error::Inapplicable(format!(
                "BCT needs the old classifier to cover class {label}; \
                 it covers only {} classes (open-set split)",
                old_classifier.num_classes()
            )));
        }
    }
    arcface_loss(new_features, labels, old_classifier, params)
}

/// Mean squared distance between paired new and old features.
pub fn regress_loss(
    new_features: &FeatureMatrix,
    old_features: &FeatureMatrix,
) -> Result<LossOutput> {
    let n = new_features.nrows();
    if n == 0 {
        return Err(Error::BatchComposition("empty batch".into()));
    }
    if new_features.shape() != old_features.shape() {
        return Err(Error::ShapeMismatch {
            context: "regress_loss".into(),
            expected: format!("{:?}", new_features.shape()),
            got: format!("{:?}", old_features.shape()),
        });
    }
    let diff = new_features - old_features;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let grad_features = diff.scale(2.0 / n as f64);
    Ok(LossOutput {
        loss,
        grad_features,
        grad_prototypes: None,
    })
}

/// InfoNCE: each new feature is pulled toward the old feature of the same
/// sample and pushed from old features of *different-class* samples in the
/// batch. Needs at least two distinct classes.
pub fn contrastive_loss(
    new_features: &FeatureMatrix,
    old_features: &FeatureMatrix,
    labels: &[usize],
    tau: f64,
) -> Result<LossOutput> {
    let n = new_features.nrows();
    if n == 0 {
        return Err(Error::BatchComposition("empty batch".into()));
    }
    if new_features.shape() != old_features.shape() {
        return Err(Error::ShapeMismatch {
            context: "contrastive_loss".into(),
            expected: format!("{:?}", new_features.shape()),
            got: format!("{:?}", old_features.shape()),
        });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "contrastive_loss".into(),
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("tau_contrastive", "must be finite and positive"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::BatchComposition(
            "contrastive batch has a single class; no negatives exist".into(),
        ));
    }

    // sims[(i, j)] = <new_i, old_j> / tau
    let sims = (new_features * old_features.transpose()).scale(1.0 / tau);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = FeatureMatrix::zeros(n, new_features.ncols());

    for i in 0..n {
        // Candidate set: the positive (j = i) plus different-class columns.
        let mut max = sims[(i, i)];
        for j in 0..n {
            if labels[j] != labels[i] {
                max = max.max(sims[(i, j)]);
            }
        }
        let mut sum = (sims[(i, i)] - max).exp();
        for j in 0..n {
            if labels[j] != labels[i] {
                sum += (sims[(i, j)] - max).exp();
            }
        }
        let lse = max + sum.ln();
        loss += lse - sims[(i, i)];

        // d loss_i / d new_i = (sum_j p_j old_j - old_i) / tau, j over the
        // candidate set.
        let scale = inv_n / tau;
        let p_pos = (sims[(i, i)] - max).exp() / sum;
        let coeff = (p_pos - 1.0) * scale;
        grad.row_mut(i)
            .zip_apply(&old_features.row(i), |g, o| *g += coeff * o);
        for j in 0..n {
            if labels[j] != labels[i] {
                let p = (sims[(i, j)] - max).exp() / sum;
                let coeff = p * scale;
                grad.row_mut(i)
                    .zip_apply(&old_features.row(j), |g, o| *g += coeff * o);
            }
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::numerical("contrastive_loss", "loss is not finite"));
    }
    Ok(LossOutput {
        loss,
        grad_features: grad,
        grad_prototypes: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::normalize_rows;
    use crate::rng::seeded;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed, 70);
        let mut m = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalize_rows(&mut m, "test").unwrap();
        m
    }

    #[test]
    fn unibct_requires_frozen_prototypes() {
        let trainable = PrototypeMatrix::random(vec![0, 1], 4, 1, true).unwrap();
        let features = unit_rows(2, 4, 2);
        let err = unibct_loss(&features, &[0, 1], &trainable, &ArcFaceParams::default())
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }), "got {err:?}");
    }

    #[test]
    fn unibct_equals_arcface_against_the_same_prototypes() {
        let protos = PrototypeMatrix::random(vec![0, 1, 2], 6, 3, false).unwrap();
        let features = unit_rows(5, 6, 4);
        let labels = [0usize, 1, 2, 0, 1];
        let params = ArcFaceParams::default();
        let a = unibct_loss(&features, &labels, &protos, &params).unwrap();
        let b = arcface_loss(&features, &labels, &protos, &params).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad_features, b.grad_features);
        assert!(a.grad_prototypes.is_none());
    }

    #[test]
    fn bct_uncovered_label_is_inapplicable() {
        let classifier = PrototypeMatrix::random(vec![0, 1, 2], 4, 5, false).unwrap();
        let features = unit_rows(2, 4, 6);
        let err = bct_loss(&features, &[0, 7], &classifier, &ArcFaceParams::default())
            .unwrap_err();
        assert!(matches!(err, Error::Inapplicable(_)), "got {err:?}");
    }

    #[test]
    fn bct_runs_when_all_labels_covered() {
        let classifier = PrototypeMatrix::random(vec![0, 1, 2], 4, 7, false).unwrap();
        let features = unit_rows(3, 4, 8);
        let out = bct_loss(&features, &[0, 1, 2], &classifier, &ArcFaceParams::default())
            .unwrap();
        assert!(out.loss.is_finite());
        assert!(out.grad_prototypes.is_none());
    }

    #[test]
    fn regress_of_identical_features_is_zero() {
        let f = unit_rows(4, 5, 9);
        let out = regress_loss(&f, &f).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_features.amax(), 0.0);
    }

    /// Elementwise oracle on one hand-set pair: vn = e1, vo = e2 gives
    /// loss 2 and gradient 2 (vn - vo).
    #[test]
    fn regress_matches_hand_computed_pair() {
        let vn = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let vo = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let out = regress_loss(&vn, &vo).unwrap();
        assert!((out.loss - 2.0).abs() <= 1e-15);
        assert!((out.grad_features[(0, 0)] - 2.0).abs() <= 1e-15);
        assert!((out.grad_features[(0, 1)] + 2.0).abs() <= 1e-15);
    }

    #[test]
    fn regress_gradient_matches_finite_differences() {
        let mut vn = unit_rows(3, 4, 10);
        let vo = unit_rows(3, 4, 11);
        let out = regress_loss(&vn, &vo).unwrap();
        let h = 1e-5;
        for r in 0..3 {
            for c in 0..4 {
                let orig = vn[(r, c)];
                vn[(r, c)] = orig + h;
                let up = regress_loss(&vn, &vo).unwrap().loss;
                vn[(r, c)] = orig - h;
                let down = regress_loss(&vn, &vo).unwrap().loss;
                vn[(r, c)] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((out.grad_features[(r, c)] - fd).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn contrastive_single_class_batch_is_rejected() {
        let vn = unit_rows(3, 4, 12);
        let vo = unit_rows(3, 4, 13);
        let err = contrastive_loss(&vn, &vo, &[2, 2, 2], 0.05).unwrap_err();
        assert!(matches!(err, Error::BatchComposition(_)), "got {err:?}");
    }

    /// Scalar recomputation of a two-anchor fixture with one negative each.
    #[test]
    fn contrastive_matches_scalar_recomputation() {
        let vn = unit_rows(2, 4, 14);
        let vo = unit_rows(2, 4, 15);
        let labels = [0usize, 1];
        let tau = 0.07;
        let out = contrastive_loss(&vn, &vo, &labels, tau).unwrap();

        let dot = |a: usize, b: usize| vn.row(a).transpose().dot(&vo.row(b).transpose());
        let mut expected = 0.0;
        for i in 0..2 {
            let j = 1 - i;
            let pos = (dot(i, i) / tau).exp();
            let neg = (dot(i, j) / tau).exp();
            expected += -(pos / (pos + neg)).ln();
        }
        expected /= 2.0;
        assert!(
            (out.loss - expected).abs() <= 1e-12,
            "loss {} vs oracle {}",
            out.loss,
            expected
        );
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut vn = unit_rows(6, 5, 16);
        let vo = unit_rows(6, 5, 17);
        let labels = [0usize, 1, 2, 0, 1, 2];
        let tau = 0.05;
        let out = contrastive_loss(&vn, &vo, &labels, tau).unwrap();
        let h = 1e-5;
        let scale = out.grad_features.amax().max(1e-12);
        let mut worst: f64 = 0.0;
        for r in 0..6 {
            for c in 0..5 {
                let orig = vn[(r, c)];
                vn[(r, c)] = orig + h;
                let up = contrastive_loss(&vn, &vo, &labels, tau).unwrap().loss;
                vn[(r, c)] = orig - h;
                let down = contrastive_loss(&vn, &vo, &labels, tau).unwrap().loss;
                vn[(r, c)] = orig;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((out.grad_features[(r, c)] - fd).abs() / scale);
            }
        }
        assert!(worst <= 1e-4, "rel err {worst:.3e}");
    }

    #[test]
    fn gradients_touch_only_new_features() {
        // The API makes this structural: every loss returns gradients for
        // the new features and nothing for old features or prototypes.
        let vn = unit_rows(4, 4, 18);
        let vo = unit_rows(4, 4, 19);
        let labels = [0usize, 0, 1, 1];
        let out = contrastive_loss(&vn, &vo, &labels, 0.05).unwrap();
        assert!(out.grad_prototypes.is_none());
        let out = regress_loss(&vn, &vo).unwrap();
        assert!(out.grad_prototypes.is_none());
    }

    #[test]
    fn spec_validation_names_fields() {
        let mut spec = CompatLossSpec::new(CompatLossKind::UniBct);
        spec.eta = -1.0;
        assert!(matches!(
            spec.validate(),
            Err(Error::InvalidConfig { field: "eta", .. })
        ));
        let mut spec = CompatLossSpec::new(CompatLossKind::Contrastive);
        spec.tau_contrastive = 0.0;
        assert!(matches!(
            spec.validate(),
            Err(Error::InvalidConfig { field: "tau_contrastive", .. })
        ));
    }

    /// Antipodal unit vectors differ by a vector of squared norm 4, so the
    /// mean squared error is exactly 4 regardless of batch size.
    #[test]
    fn regress_on_antipodal_unit_vectors_is_four() {
        let vn = unit_rows(6, 8, 20);
        let vo = -vn.clone();
        let out = regress_loss(&vn, &vo).unwrap();
        assert!((out.loss - 4.0).abs() < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn contrastive_saturates_to_zero_when_fully_separated() {
        // Positives aligned (sim 1), the only negatives antipodal (sim -1).
        // At tau = 0.05 the logit gap is 40, so the loss is ~e^-40.
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let out = contrastive_loss(&rows, &rows, &[0, 1], 0.05).unwrap();
        assert!(out.loss < 1e-15, "loss {}", out.loss);
    }

    #[test]
    fn contrastive_loss_falls_as_the_positive_aligns() {
        // Rotate new_0 toward its positive old_0 = (1, 0) while the
        // negative old_1 = (-1, 0) stays fixed; the loss must fall.
        let old = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let mut last = f64::INFINITY;
        for angle_deg in [120.0_f64, 90.0, 60.0, 30.0, 10.0] {
            let a = angle_deg.to_radians();
            let new = DMatrix::from_row_slice(2, 2, &[a.cos(), a.sin(), -1.0, 0.0]);
            let out = contrastive_loss(&new, &old, &[0, 1], 0.5).unwrap();
            assert!(
                out.loss < last,
                "loss {} did not fall below {last} at {angle_deg} degrees",
                out.loss
            );
            last = out.loss;
        }
    }
}
