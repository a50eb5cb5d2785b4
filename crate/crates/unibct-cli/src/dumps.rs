//! CSV feature/score dumps for a finished run.
//!
//! The dumps regenerate the dataset and evaluation draw from the echoed
//! config (both are seeded), embed them with the trained models, and write
//! plain `label,f0,...` CSVs next to the report. `train_*.csv` holds the new
//! training set through each model, which is exactly the input
//! `refine-demo` expects.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use unibct::experiment::EVAL_DRAW_OFFSET;
use unibct::{
    allocate_split, export_features, export_scores, generate_dataset, genuine_impostor_scores,
    make_eval_set, pairwise_scores, EmbeddingModel, FeatureMatrix, RunArtifacts,
};

fn dump(
    model: &EmbeddingModel,
    inputs: &FeatureMatrix,
    labels: &[usize],
    path: PathBuf,
) -> Result<(PathBuf, FeatureMatrix)> {
    let features = model
        .forward(inputs)
        .with_context(|| format!("embedding rows for {}", path.display()))?;
    export_features(&features, labels, &path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok((path, features))
}

/// Writes the evaluation and training feature CSVs plus the cross-test score
/// list into `dir`. Returns the written paths.
pub fn write_feature_dumps(artifacts: &RunArtifacts, dir: &Path) -> Result<Vec<PathBuf>> {
    let config = &artifacts.report.config;
    let data = generate_dataset(&config.dataset).context("regenerating the dataset")?;
    let split = allocate_split(&data, config.scenario, config.old_fraction, config.seed)
        .context("regenerating the split")?;

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
    )
    .context("regenerating the evaluation draw")?;

    let old = &artifacts.old_model;
    let new = &artifacts.new_model;
    let mut written = Vec::new();

    let (path, _) = dump(
        old,
        &eval_set.query_inputs,
        &eval_set.query_labels,
        dir.join("eval_query_old.csv"),
    )?;
    written.push(path);
    let (path, query_new) = dump(
        new,
        &eval_set.query_inputs,
        &eval_set.query_labels,
        dir.join("eval_query_new.csv"),
    )?;
    written.push(path);
    let (path, gallery_old) = dump(
        old,
        &eval_set.gallery_inputs,
        &eval_set.gallery_labels,
        dir.join("eval_gallery_old.csv"),
    )?;
    written.push(path);
    let (path, _) = dump(
        new,
        &eval_set.gallery_inputs,
        &eval_set.gallery_labels,
        dir.join("eval_gallery_new.csv"),
    )?;
    written.push(path);

    let (path, _) = dump(
        old,
        &split.new_set.inputs,
        &split.new_set.labels,
        dir.join("train_old.csv"),
    )?;
    written.push(path);
    let (path, _) = dump(
        new,
        &split.new_set.inputs,
        &split.new_set.labels,
        dir.join("train_new.csv"),
    )?;
    written.push(path);

    let scores = pairwise_scores(&query_new, &gallery_old).context("scoring the cross test")?;
    let (genuine, impostor) =
        genuine_impostor_scores(&scores, &eval_set.query_labels, &eval_set.gallery_labels);
    let path = dir.join("scores_cross.csv");
    export_scores(&genuine, &impostor, &path)
        .with_context(|| format!("writing {}", path.display()))?;
    written.push(path);

    Ok(written)
}
