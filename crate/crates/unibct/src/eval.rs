//! Retrieval metrics and the empirical compatibility criterion.
//!
//! Verification: all query x gallery cosine pairs are split into genuine
//! (same class) and impostor scores; TAR@FAR picks the smallest observed
//! score `t` whose impostor acceptance rate (counted with `>=`) stays
//! within the FAR budget and reports the genuine acceptance rate there.
//! Identification: per query, gallery entries are ranked by score with ties
//! broken toward the lower gallery index; top-k accuracy counts queries
//! whose class appears in the first k rows.
//!
//! The compatibility verdicts compare the cross test (new queries against
//! an old gallery) with the old model's self test: the new model is
//! backward compatible when cross beats old-self on the reference metric.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, FeatureMatrix};

/// Query and gallery inputs with labels, in input (pre-embedding) space.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub query_inputs: DMatrix<f64>,
    pub query_labels: Vec<usize>,
    pub gallery_inputs: DMatrix<f64>,
    pub gallery_labels: Vec<usize>,
}

impl EvalSet {
    /// Validates shapes and that the gallery covers every query class.
    pub fn new(
        query_inputs: DMatrix<f64>,
        query_labels: Vec<usize>,
        gallery_inputs: DMatrix<f64>,
        gallery_labels: Vec<usize>,
    ) -> Result<Self> {
        if query_inputs.nrows() == 0 || gallery_inputs.nrows() == 0 {
            return Err(Error::config("eval_set", "query and gallery must be non-empty"));
        }
        if query_inputs.nrows() != query_labels.len()
            || gallery_inputs.nrows() != gallery_labels.len()
        {
            return Err(Error::ShapeMismatch {
                context: "EvalSet::new".into(),
                expected: "one label per row".into(),
                got: format!(
                    "{} query rows / {} labels, {} gallery rows / {} labels",
                    query_inputs.nrows(),
                    query_labels.len(),
                    gallery_inputs.nrows(),
                    gallery_labels.len()
                ),
            });
        }
        if query_inputs.ncols() != gallery_inputs.ncols() {
            return Err(Error::ShapeMismatch {
                context: "EvalSet::new".into(),
                expected: format!("{} input columns", query_inputs.ncols()),
                got: format!("{}", gallery_inputs.ncols()),
            });
        }
        for &label in &query_labels {
            if !gallery_labels.contains(&label) {
                return Err(Error::config(
                    "eval_set",
                    format!("query class {label} has no gallery sample"),
                ));
            }
        }
        Ok(EvalSet {
            query_inputs,
            query_labels,
            gallery_inputs,
            gallery_labels,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_inputs.nrows()
    }

    pub fn num_gallery(&self) -> usize {
        self.gallery_inputs.nrows()
    }
}

/// Metric knobs of one evaluation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out query samples drawn per class.
    pub queries_per_class: usize,
    /// Held-out gallery samples drawn per class.
    pub gallery_per_class: usize,
    /// FAR operating points to report.
    pub far_list: Vec<f64>,
    /// FAR the verification verdict is decided at; must be in `far_list`.
    pub reference_far: f64,
    /// Identification cutoffs to report; must contain 1.
    pub top_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            queries_per_class: 10,
            gallery_per_class: 10,
            far_list: vec![1e-2, 1e-3],
            reference_far: 1e-3,
            top_ks: vec![1, 5],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries_per_class == 0 || self.gallery_per_class == 0 {
            return Err(Error::config(
                "queries_per_class",
                "per-class eval counts must be positive",
            ));
        }
        if self.far_list.is_empty() {
            return Err(Error::config("far_list", "must not be empty"));
        }
        for &far in &self.far_list {
            if !(far.is_finite() && far > 0.0 && far <= 1.0) {
                return Err(Error::config("far_list", format!("far {far} outside (0, 1]")));
            }
        }
        if !self.far_list.contains(&self.reference_far) {
            return Err(Error::config(
                "reference_far",
                "must be one of the entries in far_list",
            ));
        }
        if !self.top_ks.contains(&1) {
            return Err(Error::config("top_ks", "must contain 1 for the verdict"));
        }
        if self.top_ks.iter().any(|&k| k == 0) {
            return Err(Error::config("top_ks", "cutoffs must be positive"));
        }
        Ok(())
    }
}

/// TAR and threshold at one FAR operating point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FarPoint {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
    /// True when no observed score satisfied the FAR budget and the top-1
    /// impostor score was used instead (over-admitting).
    pub clamped: bool,
}

/// Identification accuracy at one cutoff.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TopKPoint {
    pub k: usize,
    pub accuracy: f64,
    /// True when k exceeded the gallery size and was clamped to it.
    pub clamped: bool,
}

/// All metrics of one (query-model, gallery-model) pairing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModeMetrics {
    pub tar: Vec<FarPoint>,
    pub topk: Vec<TopKPoint>,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

impl ModeMetrics {
    /// TAR at the given FAR, if reported.
    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar.iter().find(|p| p.far == far).map(|p| p.tar)
    }

    /// Top-k accuracy at the given k, if reported.
    pub fn topk_at(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|p| p.k == k).map(|p| p.accuracy)
    }
}

/// Cross/self metrics and the two compatibility verdicts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CompatReport {
    pub reference_far: f64,
    /// New-model queries against an old-model gallery.
    pub cross: ModeMetrics,
    /// New-model queries against a new-model gallery.
    pub self_new: ModeMetrics,
    /// Old-model queries against an old-model gallery.
    pub self_old: ModeMetrics,
    /// cross TAR@reference_far strictly beats old self TAR@reference_far.
    pub verification_compatible: bool,
    /// cross top-1 strictly beats old self top-1.
    pub identification_compatible: bool,
}

/// Cosine score matrix between unit-norm feature rows.
pub fn pairwise_scores(query: &FeatureMatrix, gallery: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::ShapeMismatch {
            context: "pairwise_scores".into(),
            expected: format!("{} columns", query.ncols()),
            got: format!("{}", gallery.ncols()),
        });
    }
    Ok(query * gallery.transpose())
}

/// TAR at a FAR budget over explicit genuine/impostor score lists.
///
/// The threshold is the smallest *observed* score `t` (over both lists)
/// keeping at most `floor(far * #impostor)` impostors at or above it.
/// When every observed score breaks the budget (the top scores are all
/// impostors), the top-1 impostor score is used and the point is flagged
/// `clamped` (over-admitting).
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<FarPoint> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::BatchComposition(
            "tar_at_far needs non-empty genuine and impostor scores".into(),
        ));
    }
    if !(far.is_finite() && far > 0.0 && far <= 1.0) {
        return Err(Error::config("far", format!("far {far} outside (0, 1]")));
    }
    if genuine.iter().chain(impostor.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("tar_at_far", "non-finite score"));
    }

    let mut gen_sorted: Vec<f64> = genuine.to_vec();
    gen_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mut imp_desc: Vec<f64> = impostor.to_vec();
    imp_desc.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));

    let n_imp = imp_desc.len();
    let k_max = ((far * n_imp as f64) + 1e-9).floor() as usize;

    let (threshold, clamped) = if k_max >= n_imp {
        // Any threshold satisfies the budget; the smallest observed score
        // maximizes TAR.
        let min_all = gen_sorted[0].min(imp_desc[n_imp - 1]);
        (min_all, false)
    } else {
        // Smallest observed score strictly above the (k_max+1)-th largest
        // impostor keeps at most k_max impostors at or above it.
        let d = imp_desc[k_max];
        let next_above = |sorted_asc: &[f64]| -> Option<f64> {
            let idx = sorted_asc.partition_point(|&s| s <= d);
            sorted_asc.get(idx).copied()
        };
        let mut imp_asc = imp_desc.clone();
        imp_asc.reverse();
        match (next_above(&gen_sorted), next_above(&imp_asc)) {
            (Some(g), Some(i)) => (g.min(i), false),
            (Some(g), None) => (g, false),
            (None, Some(i)) => (i, false),
            (None, None) => (imp_desc[0], true),
        }
    };

    let tar = {
        let below = gen_sorted.partition_point(|&s| s < threshold);
        (gen_sorted.len() - below) as f64 / gen_sorted.len() as f64
    };
    Ok(FarPoint {
        far,
        tar,
        threshold,
        clamped,
    })
}

/// Top-k identification accuracies over a score matrix.
///
/// Per query, gallery indices are ranked by descending score with ties
/// broken toward the lower index. A cutoff larger than the gallery is
/// clamped and flagged.
pub fn topk_identification(
    scores: &DMatrix<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<TopKPoint>> {
    let (nq, ng) = scores.shape();
    if nq != query_labels.len() || ng != gallery_labels.len() {
        return Err(Error::ShapeMismatch {
            context: "topk_identification".into(),
            expected: format!("{nq} query labels, {ng} gallery labels"),
            got: format!("{}, {}", query_labels.len(), gallery_labels.len()),
        });
    }
    if ks.is_empty() {
        return Err(Error::config("top_ks", "must not be empty"));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::config("top_ks", "cutoffs must be positive"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("topk_identification", "non-finite score"));
    }

    let k_cap = *ks.iter().max().expect("non-empty").min(&ng);
    // Ranked gallery indices per query, only the first k_cap are needed.
    let mut hits_at = vec![0usize; k_cap + 1];
    let mut order: Vec<usize> = (0..ng).collect();
    for qi in 0..nq {
        let row = scores.row(qi);
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        for (rank, &gi) in order.iter().take(k_cap).enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits_at[rank + 1] += 1;
                break;
            }
        }
    }
    // hits_at[r] counts first-hit-at-rank-r; accumulate to hits within k.
    for r in 1..=k_cap {
        hits_at[r] += hits_at[r - 1];
    }

    Ok(ks
        .iter()
        .map(|&k| {
            let clamped = k > ng;
            let kk = k.min(ng).min(k_cap);
            TopKPoint {
                k,
                accuracy: hits_at[kk] as f64 / nq as f64,
                clamped,
            }
        })
        .collect())
}

/// Metrics of one query/gallery feature pairing. Features are renormalized
/// row-wise first, so any positive rescaling of the inputs is a no-op.
/// Splits a score matrix into genuine (same-label) and impostor
/// (different-label) score lists, row-major order.
pub fn genuine_impostor_scores(
    scores: &DMatrix<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for qi in 0..scores.nrows() {
        for gi in 0..scores.ncols() {
            if query_labels[qi] == gallery_labels[gi] {
                genuine.push(scores[(qi, gi)]);
            } else {
                impostor.push(scores[(qi, gi)]);
            }
        }
    }
    (genuine, impostor)
}

pub fn metrics_from_features(
    query_features: &FeatureMatrix,
    query_labels: &[usize],
    gallery_features: &FeatureMatrix,
    gallery_labels: &[usize],
    config: &EvalConfig,
) -> Result<ModeMetrics> {
    config.validate()?;
    let mut q = query_features.clone();
    let mut g = gallery_features.clone();
    crate::model::normalize_rows(&mut q, "metrics_from_features query")?;
    crate::model::normalize_rows(&mut g, "metrics_from_features gallery")?;
    let scores = pairwise_scores(&q, &g)?;
    let (genuine, impostor) = genuine_impostor_scores(&scores, query_labels, gallery_labels);

    let tar = config
        .far_list
        .iter()
        .map(|&far| tar_at_far(&genuine, &impostor, far))
        .collect::<Result<Vec<_>>>()?;
    let topk = topk_identification(&scores, query_labels, gallery_labels, &config.top_ks)?;
    Ok(ModeMetrics {
        tar,
        topk,
        genuine_pairs: genuine.len(),
        impostor_pairs: impostor.len(),
    })
}

/// Embeds the eval set with both models and renders the full report.
///
/// The models must share an embedding dimension; the cross test scores
/// new-model query features directly against old-model gallery features.
pub fn evaluate_pair(
    old_model: &EmbeddingModel,
    new_model: &EmbeddingModel,
    eval_set: &EvalSet,
    config: &EvalConfig,
) -> Result<CompatReport> {
    config.validate()?;
    if old_model.embed_dim() != new_model.embed_dim() {
        return Err(Error::ShapeMismatch {
            context: "evaluate_pair".into(),
            expected: format!("shared embed_dim {}", old_model.embed_dim()),
            got: format!("{}", new_model.embed_dim()),
        });
    }

    let q_old = old_model.forward(&eval_set.query_inputs)?;
    let q_new = new_model.forward(&eval_set.query_inputs)?;
    let g_old = old_model.forward(&eval_set.gallery_inputs)?;
    let g_new = new_model.forward(&eval_set.gallery_inputs)?;

    let cross = metrics_from_features(
        &q_new,
        &eval_set.query_labels,
        &g_old,
        &eval_set.gallery_labels,
        config,
    )?;
    let self_new = metrics_from_features(
        &q_new,
        &eval_set.query_labels,
        &g_new,
        &eval_set.gallery_labels,
        config,
    )?;
    let self_old = metrics_from_features(
        &q_old,
        &eval_set.query_labels,
        &g_old,
        &eval_set.gallery_labels,
        config,
    )?;

    let tar_ref = |m: &ModeMetrics| m.tar_at(config.reference_far).unwrap_or(0.0);
    let top1 = |m: &ModeMetrics| m.topk_at(1).unwrap_or(0.0);
    let verification_compatible = tar_ref(&cross) > tar_ref(&self_old);
    let identification_compatible = top1(&cross) > top1(&self_old);

    Ok(CompatReport {
        reference_far: config.reference_far,
        cross,
        self_new,
        self_old,
        verification_compatible,
        identification_compatible,
    })
}
