//! Pseudo prototypes for old-model feature space, with structural
//! graph refinement.
//!
//! For every class, the old model's features of that class's samples form
//! vertices `V0`. A fully connected similarity graph is built from the *new*
//! model's features of the same samples: off-diagonal edge weights are a
//! row-wise temperature softmax of pairwise inner products, the diagonal is
//! zero. Vertex features are then aggregated along the edges,
//!
//! ```text
//! V(t) = lambda * E * V(t-1) + (1 - lambda) * V0,
//! ```
//!
//! whose fixed point has the closed form
//! `V(inf) = (1 - lambda) * (I - lambda * E)^-1 * V0` (geometric series of
//! the row-stochastic `E` scaled by `lambda < 1`). The class prototype is
//! the row mean of the aggregated vertices, L2-normalized.
//!
//! Pooling variants: `VanillaAvg` (plain mean of `V0`), `DropAvg` (mean
//! after dropping the rows farthest by cosine from the raw mean) and
//! `RefinedAvg` (mean of the propagated vertices).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arcface::PrototypeMatrix;
use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, FeatureMatrix};
use crate::rng::{seeded, stream};
use crate::synthetic::LabeledDataset;

/// Condition-number estimates above this abort the closed-form solve.
pub const CONDITION_LIMIT: f64 = 1e12;

/// How the aggregation recurrence is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationMode {
    /// Solve `(I - lambda E) X = (1 - lambda) V0` directly.
    ClosedForm,
    /// Unroll the recurrence for a fixed number of steps.
    Iterative(usize),
}

/// How per-class vertices are pooled into one prototype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolVariant {
    /// Mean of the raw old-model vertices.
    VanillaAvg,
    /// Mean after dropping `ceil(drop_fraction * m)` rows farthest by
    /// cosine from the raw mean.
    DropAvg { drop_fraction: f64 },
    /// Mean of the graph-aggregated vertices.
    RefinedAvg,
}

impl PoolVariant {
    /// Default outlier fraction for [`PoolVariant::DropAvg`].
    pub fn drop_avg_default() -> Self {
        PoolVariant::DropAvg {
            drop_fraction: 0.10,
        }
    }

    /// Short name used in reports and file names.
    pub fn name(&self) -> &'static str {
        match self {
            PoolVariant::VanillaAvg => "vanilla-avg",
            PoolVariant::DropAvg { .. } => "drop-avg",
            PoolVariant::RefinedAvg => "refined-avg",
        }
    }
}

/// Knobs of the prototype engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Softmax temperature for edge weights.
    pub tau: f64,
    /// Aggregation strength, `0 <= lambda < 1`.
    pub lambda: f64,
    pub mode: PropagationMode,
    /// At most this many vertices per class (seeded subsample beyond it).
    pub per_class_cap: usize,
    pub variant: PoolVariant,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau: 0.05,
            lambda: 0.9,
            mode: PropagationMode::ClosedForm,
            per_class_cap: 64,
            variant: PoolVariant::RefinedAvg,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau", "must be finite and positive"));
        }
        if !(self.lambda.is_finite() && (0.0..1.0).contains(&self.lambda)) {
            return Err(Error::config("lambda", "must lie in [0, 1)"));
        }
        if self.per_class_cap == 0 {
            return Err(Error::config("per_class_cap", "must be positive"));
        }
        if let PoolVariant::DropAvg { drop_fraction } = self.variant {
            if !(drop_fraction.is_finite() && (0.0..1.0).contains(&drop_fraction)) {
                return Err(Error::config("drop_fraction", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One class's vertices and its similarity graph.
#[derive(Clone, Debug)]
pub struct ClassGraph {
    pub class_id: usize,
    /// Old-model features, `m x d_old`; the propagated quantity.
    pub old_vertices: DMatrix<f64>,
    /// New-model features, `m x d_new`; the edge source.
    pub new_vertices: DMatrix<f64>,
    /// Row-stochastic, zero-diagonal, non-negative, `m x m`.
    pub edges: DMatrix<f64>,
    pub tau: f64,
    pub lambda: f64,
}

impl ClassGraph {
    /// Builds the graph, deriving edges from the new vertices.
    pub fn build(
        class_id: usize,
        old_vertices: DMatrix<f64>,
        new_vertices: DMatrix<f64>,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        if old_vertices.nrows() != new_vertices.nrows() {
            return Err(Error::ShapeMismatch {
                context: format!("ClassGraph::build class {class_id}"),
                expected: format!("{} new vertex rows", old_vertices.nrows()),
                got: format!("{}", new_vertices.nrows()),
            });
        }
        if !(lambda.is_finite() && (0.0..1.0).contains(&lambda)) {
            return Err(Error::config("lambda", "must lie in [0, 1)"));
        }
        let edges = build_edges(&new_vertices, tau)?;
        Ok(ClassGraph {
            class_id,
            old_vertices,
            new_vertices,
            edges,
            tau,
            lambda,
        })
    }

    /// Number of vertices.
    pub fn len(&self) -> usize {
        self.old_vertices.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.old_vertices.nrows() == 0
    }
}

/// Old/new feature pair of one class, rows aligned sample by sample.
#[derive(Clone, Debug)]
pub struct ClassFeatures {
    pub old: FeatureMatrix,
    pub new: FeatureMatrix,
}

/// Per-class degradation notice from [`build_pseudo_classifier`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassWarning {
    pub class_id: usize,
    pub message: String,
}

/// Pseudo classifier plus the warnings its construction produced.
#[derive(Clone, Debug)]
pub struct PseudoClassifier {
    pub prototypes: PrototypeMatrix,
    pub warnings: Vec<ClassWarning>,
}

/// Embeds every class's samples with both models, subsampling classes
/// larger than `cap` with the seeded generator. Keys iterate in ascending
/// class order. Classes with no rows are skipped with a warning.
pub fn extract_class_features(
    old_model: &EmbeddingModel,
    new_model: &EmbeddingModel,
    dataset: &LabeledDataset,
    cap: usize,
    seed: u64,
) -> Result<(BTreeMap<usize, ClassFeatures>, Vec<ClassWarning>)> {
    if cap == 0 {
        return Err(Error::config("per_class_cap", "must be positive"));
    }
    let mut rng = seeded(seed, stream::SUBSAMPLE);
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for (&class, rows) in dataset.class_index() {
        if rows.is_empty() {
            warnings.push(ClassWarning {
                class_id: class,
                message: "class has no rows; excluded from pseudo classifier".into(),
            });
            continue;
        }
        let chosen: Vec<usize> = if rows.len() > cap {
            let mut pool = rows.clone();
            pool.shuffle(&mut rng);
            let mut kept = pool[..cap].to_vec();
            kept.sort_unstable();
            kept
        } else {
            rows.clone()
        };
        let mut batch = DMatrix::zeros(chosen.len(), dataset.input_dim());
        for (i, &row) in chosen.iter().enumerate() {
            batch.row_mut(i).copy_from(&dataset.inputs.row(row));
        }
        let old = old_model.forward(&batch)?;
        let new = new_model.forward(&batch)?;
        out.insert(class, ClassFeatures { old, new });
    }
    Ok((out, warnings))
}

/// Temperature-softmax edge matrix over pairwise inner products of
/// `vertices`, diagonal masked to zero. Needs at least two vertices.
pub fn build_edges(vertices: &FeatureMatrix, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("tau", "must be finite and positive"));
    }
    let m = vertices.nrows();
    if m < 2 {
        return Err(Error::BatchComposition(format!(
            "similarity graph needs at least 2 vertices, got {m}"
        )));
    }
    let sims = vertices * vertices.transpose();
    let mut edges = DMatrix::zeros(m, m);
    for i in 0..m {
        // Max-subtracted softmax over j != i.
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if j != i {
                max = max.max(sims[(i, j)] / tau);
            }
        }
        let mut sum = 0.0;
        for j in 0..m {
            if j != i {
                let e = (sims[(i, j)] / tau - max).exp();
                edges[(i, j)] = e;
                sum += e;
            }
        }
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::numerical(
                "build_edges",
                format!("softmax row {i} degenerate (sum {sum})"),
            ));
        }
        for j in 0..m {
            if j != i {
                edges[(i, j)] /= sum;
            }
        }
    }
    Ok(edges)
}

/// Unrolls `V(t) = lambda E V(t-1) + (1-lambda) V0` for `steps` iterations.
pub fn propagate_iterative(graph: &ClassGraph, steps: usize) -> DMatrix<f64> {
    let v0 = &graph.old_vertices;
    let mut v = v0.clone();
    let mut next = DMatrix::zeros(v0.nrows(), v0.ncols());
    for _ in 0..steps {
        next.copy_from(v0);
        next *= 1.0 - graph.lambda;
        next.gemm(graph.lambda, &graph.edges, &v, 1.0);
        std::mem::swap(&mut v, &mut next);
    }
    v
}

/// Fixed point of the recurrence via one linear solve:
/// `(I - lambda E) X = (1 - lambda) V0`.
pub fn propagate_closed_form(graph: &ClassGraph) -> Result<DMatrix<f64>> {
    let m = graph.len();
    let mut a = DMatrix::identity(m, m);
    let lambda = graph.lambda;
    a.zip_apply(&graph.edges, |v, e| *v -= lambda * e);

    let norm_a = inf_norm(&a);
    let lu = a.lu();
    let rhs = graph.old_vertices.scale(1.0 - graph.lambda);
    let solved = lu.solve(&rhs).ok_or_else(|| {
        Error::numerical(
            "propagate_closed_form",
            format!("singular system for class {}", graph.class_id),
        )
    })?;

    // Cheap lower-bound condition estimate from two probe solves.
    let mut inv_norm_est: f64 = 0.0;
    for probe in [
        DVector::from_element(m, 1.0),
        DVector::from_fn(m, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 }),
    ] {
        if let Some(x) = lu.solve(&probe) {
            inv_norm_est = inv_norm_est.max(x.amax());
        }
    }
    let cond = norm_a * inv_norm_est;
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::numerical(
            "propagate_closed_form",
            format!(
                "system for class {} ill-conditioned (estimate {cond:.3e})",
                graph.class_id
            ),
        ));
    }
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "propagate_closed_form",
            format!("non-finite solution for class {}", graph.class_id),
        ));
    }
    Ok(solved)
}

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Result of pooling one class's vertices.
#[derive(Clone, Debug)]
pub struct PoolOutcome {
    /// Unit-norm prototype.
    pub prototype: DVector<f64>,
    /// True when DropAvg would have dropped every row and fell back to the
    /// full mean.
    pub drop_fallback: bool,
}

/// Pools vertex rows into one unit-norm prototype.
///
/// For `VanillaAvg` and `RefinedAvg` this is the row mean (the variants
/// differ in *which* vertices the caller passes). `DropAvg` first removes
/// the `ceil(drop_fraction * m)` rows farthest by cosine from the raw mean;
/// if that would remove every row it falls back to the full mean and flags
/// the outcome.
pub fn pool_prototype(vertices: &FeatureMatrix, variant: &PoolVariant) -> Result<PoolOutcome> {
    let m = vertices.nrows();
    if m == 0 {
        return Err(Error::BatchComposition("cannot pool zero vertices".into()));
    }
    let mean = row_mean(vertices);

    let (pooled, drop_fallback) = match variant {
        PoolVariant::VanillaAvg | PoolVariant::RefinedAvg => (mean, false),
        PoolVariant::DropAvg { drop_fraction } => {
            if !(drop_fraction.is_finite() && (0.0..1.0).contains(drop_fraction)) {
                return Err(Error::config("drop_fraction", "must lie in [0, 1)"));
            }
            let mean_norm = mean.norm();
            if mean_norm < 1e-8 {
                return Err(Error::NearZeroVector {
                    context: "pool_prototype drop-avg reference mean".into(),
                    norm: mean_norm,
                });
            }
            let drop = (drop_fraction * m as f64).ceil() as usize;
            if drop >= m {
                (mean, true)
            } else {
                // Cosine distance to the raw mean; drop the `drop` largest,
                // ties broken toward keeping the lower row index.
                let mut scored: Vec<(usize, f64)> = (0..m)
                    .map(|i| {
                        let row = vertices.row(i);
                        let denom = row.norm() * mean_norm;
                        let cos = if denom < 1e-12 {
                            0.0
                        } else {
                            row.transpose().dot(&mean) / denom
                        };
                        (i, 1.0 - cos)
                    })
                    .collect();
                scored.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.0.cmp(&b.0))
                });
                let mut kept: Vec<usize> = scored[drop..].iter().map(|&(i, _)| i).collect();
                kept.sort_unstable();
                let mut sub = DMatrix::zeros(kept.len(), vertices.ncols());
                for (dst, &src) in kept.iter().enumerate() {
                    sub.row_mut(dst).copy_from(&vertices.row(src));
                }
                (row_mean(&sub), false)
            }
        }
    };

    let norm = pooled.norm();
    if norm < 1e-8 {
        return Err(Error::NearZeroVector {
            context: "pool_prototype".into(),
            norm,
        });
    }
    Ok(PoolOutcome {
        prototype: pooled / norm,
        drop_fallback,
    })
}

fn row_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let mut mean = DVector::zeros(m.ncols());
    for row in m.row_iter() {
        mean += row.transpose();
    }
    mean / m.nrows() as f64
}

/// Builds the frozen pseudo classifier for every class in `dataset`.
///
/// Per class: extract old/new features (capped), then per `config.variant`
/// either pool the raw old vertices (`VanillaAvg`, `DropAvg`) or build the
/// similarity graph, propagate, and pool the refined vertices
/// (`RefinedAvg`). Single-vertex classes skip refinement and emit the lone
/// normalized old feature. A class whose refinement fails degrades to
/// `VanillaAvg` with a warning; only a failure of the vanilla path itself is
/// an error.
pub fn build_pseudo_classifier(
    old_model: &EmbeddingModel,
    new_model: &EmbeddingModel,
    dataset: &LabeledDataset,
    config: &RefinementConfig,
    seed: u64,
) -> Result<PseudoClassifier> {
    config.validate()?;
    let (features, mut warnings) =
        extract_class_features(old_model, new_model, dataset, config.per_class_cap, seed)?;
    if features.is_empty() {
        return Err(Error::Allocation(
            "no classes with samples to build a pseudo classifier from".into(),
        ));
    }

    let dim = old_model.embed_dim();
    let mut rows = DMatrix::zeros(features.len(), dim);
    let mut class_ids = Vec::with_capacity(features.len());

    for (idx, (&class, feats)) in features.iter().enumerate() {
        let prototype = prototype_for_class(class, feats, config, &mut warnings)?;
        rows.row_mut(idx).copy_from(&prototype.transpose());
        class_ids.push(class);
    }

    let prototypes = PrototypeMatrix::from_rows(rows, class_ids, false)?;
    Ok(PseudoClassifier {
        prototypes,
        warnings,
    })
}

fn prototype_for_class(
    class: usize,
    feats: &ClassFeatures,
    config: &RefinementConfig,
    warnings: &mut Vec<ClassWarning>,
) -> Result<DVector<f64>> {
    let m = feats.old.nrows();
    if m == 1 {
        // No graph to build; the lone feature is the prototype.
        let row = feats.old.row(0).transpose();
        let norm = row.norm();
        if norm < 1e-8 {
            return Err(Error::NearZeroVector {
                context: format!("singleton class {class}"),
                norm,
            });
        }
        return Ok(row / norm);
    }

    let attempt = || -> Result<PoolOutcome> {
        match config.variant {
            PoolVariant::VanillaAvg => pool_prototype(&feats.old, &PoolVariant::VanillaAvg),
            PoolVariant::DropAvg { drop_fraction } => {
                pool_prototype(&feats.old, &PoolVariant::DropAvg { drop_fraction })
            }
            PoolVariant::RefinedAvg => {
                let graph = ClassGraph::build(
                    class,
                    feats.old.clone(),
                    feats.new.clone(),
                    config.tau,
                    config.lambda,
                )?;
                let refined = match config.mode {
                    PropagationMode::ClosedForm => propagate_closed_form(&graph)?,
                    PropagationMode::Iterative(steps) => propagate_iterative(&graph, steps),
                };
                pool_prototype(&refined, &PoolVariant::RefinedAvg)
            }
        }
    };

    match attempt() {
        Ok(outcome) => {
            if outcome.drop_fallback {
                warnings.push(ClassWarning {
                    class_id: class,
                    message: "drop-avg would drop every row; used full mean".into(),
                });
            }
            Ok(outcome.prototype)
        }
        Err(err) if !matches!(config.variant, PoolVariant::VanillaAvg) => {
            log::warn!("class {class}: refinement failed ({err}); degrading to vanilla mean");
            warnings.push(ClassWarning {
                class_id: class,
                message: format!("refinement failed ({err}); degraded to vanilla mean"),
            });
            Ok(pool_prototype(&feats.old, &PoolVariant::VanillaAvg)?.prototype)
        }
        Err(err) => Err(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{normalize_rows, Activation, ModelConfig};
    use crate::synthetic::{generate_dataset, DatasetSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed, 60);
        let mut m = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalize_rows(&mut m, "test").unwrap();
        m
    }

    fn graph_from(old: DMatrix<f64>, new: DMatrix<f64>, lambda: f64) -> ClassGraph {
        ClassGraph::build(0, old, new, 0.05, lambda).unwrap()
    }

    #[test]
    fn two_vertices_give_the_swap_matrix() {
        let edges = build_edges(&unit_rows(2, 4, 1), 0.05).unwrap();
        assert_eq!(edges[(0, 0)], 0.0);
        assert_eq!(edges[(1, 1)], 0.0);
        assert_eq!(edges[(0, 1)], 1.0);
        assert_eq!(edges[(1, 0)], 1.0);
    }

    #[test]
    fn three_vertex_edges_match_scalar_softmax() {
        // Hand-set geometry: dots are s01 = 0, s02 = s12 = 1/sqrt(2).
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let vertices =
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, r, r]);
        let tau = 0.05;
        let edges = build_edges(&vertices, tau).unwrap();

        let expect = |a: f64, b: f64| {
            let (ea, eb) = ((a / tau).exp(), (b / tau).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (e01, e02) = expect(0.0, r);
        assert!((edges[(0, 1)] - e01).abs() <= 1e-12);
        assert!((edges[(0, 2)] - e02).abs() <= 1e-12);
        let (e10, e12) = expect(0.0, r);
        assert!((edges[(1, 0)] - e10).abs() <= 1e-12);
        assert!((edges[(1, 2)] - e12).abs() <= 1e-12);
        let (e20, e21) = expect(r, r);
        assert!((edges[(2, 0)] - e20).abs() <= 1e-12);
        assert!((edges[(2, 1)] - e21).abs() <= 1e-12);
    }

    #[test]
    fn edges_are_row_stochastic_nonneg_zero_diag() {
        for seed in 0..20 {
            let m = 2 + (seed as usize % 17);
            let edges = build_edges(&unit_rows(m, 8, seed), 0.05).unwrap();
            for i in 0..m {
                assert_eq!(edges[(i, i)], 0.0);
                let sum: f64 = edges.row(i).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "row {i} sums to {sum}");
                assert!(edges.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn tiny_temperature_approaches_argmax_rows() {
        let vertices = unit_rows(6, 8, 3);
        let sims = &vertices * vertices.transpose();
        let edges = build_edges(&vertices, 1e-3).unwrap();
        for i in 0..6 {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for j in 0..6 {
                if j != i && sims[(i, j)] > best.1 {
                    best = (j, sims[(i, j)]);
                }
            }
            assert!(
                edges[(i, best.0)] > 0.999,
                "row {i}: weight {} at argmax",
                edges[(i, best.0)]
            );
        }
    }

    #[test]
    fn single_vertex_graph_is_rejected() {
        let err = build_edges(&unit_rows(1, 4, 4), 0.05).unwrap_err();
        assert!(matches!(err, Error::BatchComposition(_)), "got {err:?}");
    }

    #[test]
    fn lambda_zero_propagation_returns_v0() {
        let old = unit_rows(5, 6, 5);
        let graph = graph_from(old.clone(), unit_rows(5, 6, 6), 0.0);
        let iter = propagate_iterative(&graph, 17);
        let closed = propagate_closed_form(&graph).unwrap();
        assert_eq!(iter, old);
        assert_eq!(closed, old);
    }

    #[test]
    fn closed_form_matches_long_iteration() {
        let graph = graph_from(unit_rows(9, 7, 7), unit_rows(9, 7, 8), 0.9);
        let iter = propagate_iterative(&graph, 2000);
        let closed = propagate_closed_form(&graph).unwrap();
        let diff = (&iter - &closed).amax();
        assert!(diff <= 1e-8, "max abs diff {diff:.3e}");
    }

    /// Independent series oracle: V(inf) = (1-lambda) sum_t lambda^t E^t V0.
    #[test]
    fn closed_form_matches_geometric_series() {
        let graph = graph_from(unit_rows(6, 5, 9), unit_rows(6, 5, 10), 0.9);
        let mut series = DMatrix::zeros(6, 5);
        let mut term = graph.old_vertices.clone();
        let mut coef = 1.0 - graph.lambda;
        for _ in 0..800 {
            series += term.scale(coef);
            term = &graph.edges * term;
            coef *= graph.lambda;
        }
        let closed = propagate_closed_form(&graph).unwrap();
        let diff = (&series - &closed).amax();
        assert!(diff <= 1e-9, "max abs diff {diff:.3e}");
    }

    #[test]
    fn singular_poisoned_system_is_a_numerical_error() {
        // Bypass build() to poison the edges: det(I - lambda E) = 0 when
        // the off-diagonal product a*b equals 1/lambda^2.
        let lambda: f64 = 0.9;
        let edges = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0 / (lambda * lambda * 2.0), 0.0]);
        let graph = ClassGraph {
            class_id: 3,
            old_vertices: unit_rows(2, 4, 11),
            new_vertices: unit_rows(2, 4, 12),
            edges,
            tau: 0.05,
            lambda,
        };
        let err = propagate_closed_form(&graph).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "got {err:?}");
    }

    #[test]
    fn vanilla_pool_is_the_normalized_mean() {
        let vertices = unit_rows(4, 5, 13);
        let out = pool_prototype(&vertices, &PoolVariant::VanillaAvg).unwrap();
        let mut mean = DVector::zeros(5);
        for row in vertices.row_iter() {
            mean += row.transpose();
        }
        mean /= 4.0;
        mean /= mean.norm();
        assert!((out.prototype - mean).amax() <= 1e-12);
        assert!(!out.drop_fallback);
    }

    #[test]
    fn antipodal_mean_is_a_near_zero_error() {
        let vertices = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let err = pool_prototype(&vertices, &PoolVariant::VanillaAvg).unwrap_err();
        assert!(matches!(err, Error::NearZeroVector { .. }), "got {err:?}");
    }

    /// Sort-and-drop oracle: with nine clustered vertices and one outlier,
    /// DropAvg at 10% must drop exactly the outlier.
    #[test]
    fn drop_avg_removes_the_farthest_vertex() {
        let mut vertices = DMatrix::zeros(10, 4);
        let mut rng = seeded(14, 61);
        for i in 0..9 {
            let mut v = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
            for d in 0..4 {
                v[d] += 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
            v /= v.norm();
            vertices.row_mut(i).copy_from(&v.transpose());
        }
        vertices
            .row_mut(9)
            .copy_from(&DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0]).transpose());

        let out =
            pool_prototype(&vertices, &PoolVariant::DropAvg { drop_fraction: 0.10 }).unwrap();
        assert!(!out.drop_fallback);

        // Oracle: mean of rows 0..9 (outlier excluded), normalized.
        let kept = vertices.rows(0, 9).clone_owned();
        let mut mean = DVector::zeros(4);
        for row in kept.row_iter() {
            mean += row.transpose();
        }
        mean /= 9.0;
        mean /= mean.norm();
        assert!((out.prototype - mean).amax() <= 1e-12);
    }

    #[test]
    fn drop_avg_dropping_everything_falls_back_to_full_mean() {
        let vertices = unit_rows(1, 4, 15);
        let out =
            pool_prototype(&vertices, &PoolVariant::DropAvg { drop_fraction: 0.5 }).unwrap();
        assert!(out.drop_fallback);
        let mut expected = vertices.row(0).transpose();
        expected /= expected.norm();
        assert!((out.prototype - expected).amax() <= 1e-12);
    }

    /// Permuting vertex order permutes graph rows but leaves the pooled
    /// prototype unchanged up to float roundoff.
    #[test]
    fn refined_prototype_is_permutation_invariant() {
        let old = unit_rows(8, 6, 16);
        let new = unit_rows(8, 6, 17);
        let graph = graph_from(old.clone(), new.clone(), 0.9);
        let base = pool_prototype(&propagate_closed_form(&graph).unwrap(), &PoolVariant::RefinedAvg)
            .unwrap()
            .prototype;

        let perm = [3usize, 7, 1, 0, 6, 2, 5, 4];
        let mut pold = DMatrix::zeros(8, 6);
        let mut pnew = DMatrix::zeros(8, 6);
        for (dst, &src) in perm.iter().enumerate() {
            pold.row_mut(dst).copy_from(&old.row(src));
            pnew.row_mut(dst).copy_from(&new.row(src));
        }
        let pgraph = graph_from(pold, pnew, 0.9);
        let permuted =
            pool_prototype(&propagate_closed_form(&pgraph).unwrap(), &PoolVariant::RefinedAvg)
                .unwrap()
                .prototype;
        assert!((base - permuted).amax() <= 1e-10);
    }

    fn tiny_models_and_data() -> (EmbeddingModel, EmbeddingModel, LabeledDataset) {
        let spec = DatasetSpec {
            num_classes: 5,
            samples_per_class: 12,
            input_dim: 10,
            latent_dim: 4,
            intra_class_noise: 0.2,
            domain_shift: 0.0,
            seed: 21,
        };
        let data = generate_dataset(&spec).unwrap();
        let old = EmbeddingModel::new(&ModelConfig {
            input_dim: 10,
            hidden_dims: vec![8],
            embed_dim: 6,
            activation: Activation::Relu,
            init_seed: 1,
        })
        .unwrap();
        let new = EmbeddingModel::new(&ModelConfig {
            input_dim: 10,
            hidden_dims: vec![12, 12],
            embed_dim: 6,
            activation: Activation::Relu,
            init_seed: 2,
        })
        .unwrap();
        (old, new, data)
    }

    /// Row-stochastic edges average the neighbours, so identical old
    /// vertices are a fixed point of the propagation in both modes.
    #[test]
    fn identical_vertices_are_a_propagation_fixed_point() {
        let row = unit_rows(1, 6, 30);
        let mut old = DMatrix::zeros(5, 6);
        for i in 0..5 {
            old.row_mut(i).copy_from(&row.row(0));
        }
        let graph = graph_from(old.clone(), unit_rows(5, 8, 31), 0.9);
        let closed = propagate_closed_form(&graph).unwrap();
        let iterated = propagate_iterative(&graph, 50);
        assert!((&closed - &old).abs().max() <= 1e-10);
        assert!((&iterated - &old).abs().max() <= 1e-10);
    }

    #[test]
    fn zero_step_iteration_returns_the_input_vertices() {
        let old = unit_rows(4, 6, 32);
        let graph = graph_from(old.clone(), unit_rows(4, 8, 33), 0.9);
        assert_eq!(propagate_iterative(&graph, 0), old);
    }

    /// Mutually orthogonal vertices are equidistant, so each row's softmax
    /// splits evenly over the two neighbours.
    #[test]
    fn equidistant_vertices_get_uniform_edges() {
        let vertices = DMatrix::<f64>::identity(3, 3);
        let edges = build_edges(&vertices, 0.05).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((edges[(i, j)] - expected).abs() <= 1e-12);
            }
        }
    }

    /// With the cap above the class size there is no subsampling, so each
    /// group must equal the label-filtered rows of a whole-dataset forward.
    #[test]
    fn extracted_groups_match_a_flat_forward_filter() {
        let (old, new, data) = tiny_models_and_data();
        let (features, warnings) = extract_class_features(&old, &new, &data, 64, 5).unwrap();
        assert!(warnings.is_empty());
        let old_all = old.forward(&data.inputs).unwrap();
        let new_all = new.forward(&data.inputs).unwrap();
        for (&class, feats) in &features {
            let rows: Vec<usize> = (0..data.len())
                .filter(|&i| data.labels[i] == class)
                .collect();
            assert_eq!(feats.old.nrows(), rows.len());
            for (out_row, &src_row) in rows.iter().enumerate() {
                assert_eq!(feats.old.row(out_row), old_all.row(src_row));
                assert_eq!(feats.new.row(out_row), new_all.row(src_row));
            }
        }
    }

    /// Each classifier row must equal an explicit standalone rerun of the
    /// per-class pipeline: extract, graph, closed-form propagate, pool.
    #[test]
    fn classifier_rows_match_per_class_recomputation() {
        let (old, new, data) = tiny_models_and_data();
        let cfg = RefinementConfig::default();
        let built = build_pseudo_classifier(&old, &new, &data, &cfg, 9).unwrap();
        let (features, _) = extract_class_features(&old, &new, &data, cfg.per_class_cap, 9).unwrap();
        for (&class, feats) in &features {
            let graph = ClassGraph::build(
                class,
                feats.old.clone(),
                feats.new.clone(),
                cfg.tau,
                cfg.lambda,
            )
            .unwrap();
            let refined = propagate_closed_form(&graph).unwrap();
            let pooled = pool_prototype(&refined, &PoolVariant::RefinedAvg).unwrap();
            let row = built.prototypes.row_of(class).unwrap();
            let stored = built.prototypes.matrix().row(row).transpose();
            assert!(
                (&stored - &pooled.prototype).abs().max() <= 1e-15,
                "class {class} prototype differs from the standalone pipeline"
            );
        }
    }

    #[test]
    fn per_class_cap_limits_vertex_count() {
        let (old, new, data) = tiny_models_and_data();
        let (features, warnings) = extract_class_features(&old, &new, &data, 7, 5).unwrap();
        assert!(warnings.is_empty());
        for feats in features.values() {
            assert_eq!(feats.old.nrows(), 7);
            assert_eq!(feats.new.nrows(), 7);
        }
        let (again, _) = extract_class_features(&old, &new, &data, 7, 5).unwrap();
        assert_eq!(features[&0].old, again[&0].old);
    }

    #[test]
    fn pseudo_classifier_is_frozen_unit_and_deterministic() {
        let (old, new, data) = tiny_models_and_data();
        let cfg = RefinementConfig::default();
        let a = build_pseudo_classifier(&old, &new, &data, &cfg, 9).unwrap();
        let b = build_pseudo_classifier(&old, &new, &data, &cfg, 9).unwrap();
        assert!(!a.prototypes.trainable());
        assert_eq!(a.prototypes.class_ids(), &[0, 1, 2, 3, 4]);
        assert_eq!(a.prototypes.content_hash(), b.prototypes.content_hash());
        for row in a.prototypes.matrix().row_iter() {
            assert!((row.norm() - 1.0).abs() <= 1e-9);
        }
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn lambda_zero_refined_equals_vanilla_exactly() {
        let (old, new, data) = tiny_models_and_data();
        let refined = build_pseudo_classifier(
            &old,
            &new,
            &data,
            &RefinementConfig {
                lambda: 0.0,
                ..RefinementConfig::default()
            },
            9,
        )
        .unwrap();
        let vanilla = build_pseudo_classifier(
            &old,
            &new,
            &data,
            &RefinementConfig {
                variant: PoolVariant::VanillaAvg,
                ..RefinementConfig::default()
            },
            9,
        )
        .unwrap();
        assert_eq!(refined.prototypes.matrix(), vanilla.prototypes.matrix());
    }

    #[test]
    fn invalid_refinement_configs_are_rejected() {
        let bad = [
            RefinementConfig {
                tau: 0.0,
                ..RefinementConfig::default()
            },
            RefinementConfig {
                lambda: 1.0,
                ..RefinementConfig::default()
            },
            RefinementConfig {
                lambda: -0.1,
                ..RefinementConfig::default()
            },
            RefinementConfig {
                per_class_cap: 0,
                ..RefinementConfig::default()
            },
            RefinementConfig {
                variant: PoolVariant::DropAvg { drop_fraction: 1.0 },
                ..RefinementConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })));
        }
    }
}
