//! Synthetic labeled datasets and the five old/new split scenarios.
//!
//! Classes are unit-norm centers on a latent sphere; samples add Gaussian
//! noise around their center and are pushed through a fixed seeded affine +
//! tanh "world transform" into input space. Splits are carved out of one
//! generated dataset by row/class set operations, so every scenario relation
//! (subset, disjoint, identical) holds exactly by construction.
//!
//! Open-world scenarios (`OpenData`, `OpenClass`) additionally displace the
//! class centers of the new-only portion by a seeded latent offset of norm
//! `domain_shift`, emulating the distribution gap between the data the old
//! model saw and the data the new model is trained on. The displacement is
//! a property of the affected classes' current population: evaluation sets
//! probe a shifted class at its shifted center (see [`make_eval_set`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSet;
use crate::rng::{seeded, stream};

// ============================================================================
// Spec and dataset types
// ============================================================================

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of classes, at least 2.
    pub num_classes: usize,
    /// Samples drawn per class, at least 2.
    pub samples_per_class: usize,
    /// Dimension of the observed inputs, at least `latent_dim`.
    pub input_dim: usize,
    /// Dimension of the latent sphere the class centers live on.
    pub latent_dim: usize,
    /// Std-dev of the isotropic Gaussian noise around each center.
    pub intra_class_noise: f64,
    /// Latent offset norm applied to new-only centers in Open* scenarios.
    pub domain_shift: f64,
    /// Seed for centers, noise and the world transform.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 50,
            samples_per_class: 80,
            input_dim: 64,
            latent_dim: 8,
            intra_class_noise: 0.25,
            domain_shift: 0.2,
            seed: 666,
        }
    }
}

impl DatasetSpec {
    /// Checks every field against its documented bound.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("samples_per_class", "must be at least 2"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.input_dim < self.latent_dim {
            return Err(Error::config(
                "input_dim",
                format!(
                    "must be >= latent_dim ({} < {})",
                    self.input_dim, self.latent_dim
                ),
            ));
        }
        if !self.intra_class_noise.is_finite() || self.intra_class_noise < 0.0 {
            return Err(Error::config(
                "intra_class_noise",
                "must be finite and non-negative",
            ));
        }
        if !self.domain_shift.is_finite() || self.domain_shift < 0.0 {
            return Err(Error::config(
                "domain_shift",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Fixed random affine + tanh map from latent space to input space.
#[derive(Clone, Debug)]
pub(crate) struct WorldTransform {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl WorldTransform {
    fn sample(input_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, stream::TRANSFORM);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let weight = DMatrix::from_fn(input_dim, latent_dim, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        let bias = DVector::from_fn(input_dim, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * 0.1
        });
        WorldTransform { weight, bias }
    }

    /// Maps one latent row to an input row.
    pub(crate) fn apply(&self, latent: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.weight * latent + &self.bias;
        out.apply(|v| *v = v.tanh());
        out
    }
}

/// How a generated dataset came to be; lets splits re-materialize shifted
/// rows and lets evaluation draw fresh held-out samples.
#[derive(Clone, Debug)]
pub(crate) struct Provenance {
    pub(crate) spec: DatasetSpec,
    /// `num_classes x latent_dim`, unit rows.
    pub(crate) centers: DMatrix<f64>,
    pub(crate) transform: WorldTransform,
    /// Per-row latent sample, parallel to `inputs`.
    pub(crate) latents: DMatrix<f64>,
}

/// A labeled point cloud: `inputs` rows with integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// `n x input_dim`.
    pub inputs: DMatrix<f64>,
    /// One label per input row.
    pub labels: Vec<usize>,
    /// Class id -> sorted row indices; partitions `0..n` exactly.
    class_index: BTreeMap<usize, Vec<usize>>,
    pub(crate) provenance: Option<Box<Provenance>>,
}

impl LabeledDataset {
    /// Builds a dataset from raw parts, checking the label/row contract.
    pub fn from_parts(inputs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::config("inputs", "dataset must not be empty"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "LabeledDataset::from_parts".into(),
                expected: format!("{} labels", inputs.nrows()),
                got: format!("{}", labels.len()),
            });
        }
        let class_index = build_class_index(&labels);
        Ok(LabeledDataset {
            inputs,
            labels,
            class_index,
            provenance: None,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    /// True when the dataset holds no rows (unreachable via constructors).
    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Input dimensionality.
    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Class ids present, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    /// Number of distinct classes present.
    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Sorted row indices of one class, empty if the class is absent.
    pub fn rows_of_class(&self, class: usize) -> &[usize] {
        self.class_index
            .get(&class)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Class id -> sorted row indices.
    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }
}

fn build_class_index(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in labels.iter().enumerate() {
        index.entry(label).or_default().push(row);
    }
    index
}

// ============================================================================
// Generation
// ============================================================================

/// Generates a dataset per `spec`. Same spec, same bytes.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let c = spec.num_classes;
    let m = spec.samples_per_class;
    let n = c * m;

    let mut center_rng = seeded(spec.seed, stream::CENTERS);
    let mut centers = DMatrix::from_fn(c, spec.latent_dim, |_, _| {
        center_rng.sample::<f64, _>(StandardNormal)
    });
    for mut row in centers.row_iter_mut() {
        let norm = row.norm();
        if norm < 1e-12 {
            // A zero draw is essentially impossible; nudge deterministically.
            row[0] = 1.0;
        } else {
            row /= norm;
        }
    }

    let mut noise_rng = seeded(spec.seed, stream::NOISE);
    let mut latents = DMatrix::zeros(n, spec.latent_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        for s in 0..m {
            let row = class * m + s;
            for d in 0..spec.latent_dim {
                let z: f64 = noise_rng.sample(StandardNormal);
                latents[(row, d)] = centers[(class, d)] + spec.intra_class_noise * z;
            }
            labels.push(class);
        }
    }

    let transform = WorldTransform::sample(spec.input_dim, spec.latent_dim, spec.seed);
    let mut inputs = DMatrix::zeros(n, spec.input_dim);
    for row in 0..n {
        let latent = DVector::from_iterator(spec.latent_dim, latents.row(row).iter().copied());
        let x = transform.apply(&latent);
        inputs.row_mut(row).copy_from(&x.transpose());
    }

    let class_index = build_class_index(&labels);
    Ok(LabeledDataset {
        inputs,
        labels,
        class_index,
        provenance: Some(Box::new(Provenance {
            spec: spec.clone(),
            centers,
            transform,
            latents,
        })),
    })
}

// ============================================================================
// Splits
// ============================================================================

/// The five old/new training-set relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Old samples are a per-class subset of the new samples.
    ExtendedData,
    /// Old and new samples are disjoint; class sets are identical.
    OpenData,
    /// Old classes are a subset of the new classes; new sees all samples.
    ExtendedClass,
    /// Old and new class sets are disjoint.
    OpenClass,
    /// Old and new training sets are exactly the same rows.
    IdenticalData,
}

impl Scenario {
    /// All scenarios in presentation order.
    pub const ALL: [Scenario; 5] = [
        Scenario::ExtendedData,
        Scenario::OpenData,
        Scenario::ExtendedClass,
        Scenario::OpenClass,
        Scenario::IdenticalData,
    ];

    /// Kebab-case name used in configs and report files.
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::ExtendedData => "extended-data",
            Scenario::OpenData => "open-data",
            Scenario::ExtendedClass => "extended-class",
            Scenario::OpenClass => "open-class",
            Scenario::IdenticalData => "identical-data",
        }
    }

    /// True when the old and new class sets are guaranteed equal.
    pub fn same_class_set(&self) -> bool {
        matches!(
            self,
            Scenario::ExtendedData | Scenario::OpenData | Scenario::IdenticalData
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extended-data" => Ok(Scenario::ExtendedData),
            "open-data" => Ok(Scenario::OpenData),
            "extended-class" => Ok(Scenario::ExtendedClass),
            "open-class" => Ok(Scenario::OpenClass),
            "identical-data" => Ok(Scenario::IdenticalData),
            other => Err(Error::config(
                "scenario",
                format!("unknown scenario `{other}`"),
            )),
        }
    }
}

/// An old/new pair carved out of one source dataset.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub scenario: Scenario,
    pub old_set: LabeledDataset,
    pub new_set: LabeledDataset,
    /// Source row indices behind `old_set`, ascending.
    pub old_rows: Vec<usize>,
    /// Source row indices behind `new_set`, ascending.
    pub new_rows: Vec<usize>,
    /// Latent center offsets applied to the new-only portion, keyed by
    /// class. Empty outside the Open* scenarios or when `domain_shift` is 0.
    pub shifted_centers: BTreeMap<usize, DVector<f64>>,
}

/// Splits `data` into the old/new pair demanded by `scenario`.
///
/// `old_fraction` controls how many rows (data scenarios) or classes (class
/// scenarios) the old side keeps, and must leave at least one class with at
/// least two samples. The shuffle that picks the retained rows/classes is
/// keyed by `seed` alone, so the same dataset splits identically across runs.
pub fn allocate_split(
    data: &LabeledDataset,
    scenario: Scenario,
    old_fraction: f64,
    seed: u64,
) -> Result<DataSplit> {
    if !(old_fraction > 0.0 && old_fraction < 1.0) {
        return Err(Error::config(
            "old_fraction",
            format!("must lie strictly between 0 and 1, got {old_fraction}"),
        ));
    }
    if data.is_empty() {
        return Err(Error::Allocation("source dataset is empty".into()));
    }

    let mut rng = seeded(seed, stream::ALLOC);
    let class_ids = data.class_ids();

    let (old_rows, new_rows, shifted_classes): (Vec<usize>, Vec<usize>, Vec<usize>) =
        match scenario {
            Scenario::ExtendedData | Scenario::OpenData | Scenario::IdenticalData => {
                let mut old_rows = Vec::new();
                let mut rest_rows = Vec::new();
                for &class in &class_ids {
                    let rows = data.rows_of_class(class);
                    let keep = ((old_fraction * rows.len() as f64) + 1e-9).floor() as usize;
                    if keep < 2 {
                        return Err(Error::Allocation(format!(
                            "old_fraction {} keeps {} sample(s) of class {}, need at least 2",
                            old_fraction, keep, class
                        )));
                    }
                    let mut pool: Vec<usize> = rows.to_vec();
                    pool.shuffle(&mut rng);
                    old_rows.extend_from_slice(&pool[..keep]);
                    rest_rows.extend_from_slice(&pool[keep..]);
                }
                old_rows.sort_unstable();
                rest_rows.sort_unstable();
                match scenario {
                    Scenario::ExtendedData => (old_rows, (0..data.len()).collect(), Vec::new()),
                    Scenario::OpenData => (old_rows, rest_rows, class_ids.clone()),
                    Scenario::IdenticalData => {
                        let new_rows = old_rows.clone();
                        (old_rows, new_rows, Vec::new())
                    }
                    _ => unreachable!(),
                }
            }
            Scenario::ExtendedClass | Scenario::OpenClass => {
                let keep = ((old_fraction * class_ids.len() as f64) + 1e-9).floor() as usize;
                if keep < 1 {
                    return Err(Error::Allocation(format!(
                        "old_fraction {} keeps {} class(es), need at least 1",
                        old_fraction, keep
                    )));
                }
                let mut pool = class_ids.clone();
                pool.shuffle(&mut rng);
                let mut old_classes: Vec<usize> = pool[..keep].to_vec();
                let mut rest_classes: Vec<usize> = pool[keep..].to_vec();
                old_classes.sort_unstable();
                rest_classes.sort_unstable();

                let rows_of = |classes: &[usize]| -> Vec<usize> {
                    let mut rows: Vec<usize> = classes
                        .iter()
                        .flat_map(|c| data.rows_of_class(*c).iter().copied())
                        .collect();
                    rows.sort_unstable();
                    rows
                };
                let old_rows = rows_of(&old_classes);
                match scenario {
                    Scenario::ExtendedClass => {
                        (old_rows, (0..data.len()).collect(), Vec::new())
                    }
                    Scenario::OpenClass => {
                        if rest_classes.is_empty() {
                            return Err(Error::Allocation(
                                "old_fraction leaves no classes for the new side".into(),
                            ));
                        }
                        let new_rows = rows_of(&rest_classes);
                        (old_rows, new_rows, rest_classes)
                    }
                    _ => unreachable!(),
                }
            }
        };

    let shifts = latent_shifts(data, &shifted_classes, seed);
    let old_set = materialize(data, &old_rows, None);
    let new_set = materialize(data, &new_rows, shifts.as_ref());

    Ok(DataSplit {
        scenario,
        old_set,
        new_set,
        old_rows,
        new_rows,
        shifted_centers: shifts.unwrap_or_default(),
    })
}

/// Draws one latent offset of norm `domain_shift` per shifted class.
fn latent_shifts(
    data: &LabeledDataset,
    classes: &[usize],
    seed: u64,
) -> Option<BTreeMap<usize, DVector<f64>>> {
    let prov = data.provenance.as_deref()?;
    if classes.is_empty() || prov.spec.domain_shift == 0.0 {
        return None;
    }
    let mut rng = seeded(seed, stream::DOMAIN_SHIFT);
    let mut shifts = BTreeMap::new();
    for &class in classes {
        let mut dir =
            DVector::from_fn(prov.spec.latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        if norm < 1e-12 {
            dir[0] = 1.0;
        } else {
            dir /= norm;
        }
        shifts.insert(class, dir * prov.spec.domain_shift);
    }
    Some(shifts)
}

/// Copies `rows` of `data` into a fresh dataset; rows of classes listed in
/// `shifts` are re-materialized from their latent sample plus the offset.
fn materialize(
    data: &LabeledDataset,
    rows: &[usize],
    shifts: Option<&BTreeMap<usize, DVector<f64>>>,
) -> LabeledDataset {
    let dim = data.input_dim();
    let mut inputs = DMatrix::zeros(rows.len(), dim);
    let mut labels = Vec::with_capacity(rows.len());

    let prov = data.provenance.as_deref();
    let mut latents = prov.map(|p| DMatrix::zeros(rows.len(), p.spec.latent_dim));

    for (i, &row) in rows.iter().enumerate() {
        let label = data.labels[row];
        labels.push(label);
        let shift = shifts.and_then(|s| s.get(&label));
        match (prov, shift) {
            (Some(p), Some(delta)) => {
                let latent = DVector::from_iterator(
                    p.spec.latent_dim,
                    p.latents.row(row).iter().copied(),
                ) + delta;
                let x = p.transform.apply(&latent);
                inputs.row_mut(i).copy_from(&x.transpose());
                if let Some(l) = latents.as_mut() {
                    l.row_mut(i).copy_from(&latent.transpose());
                }
            }
            _ => {
                inputs.row_mut(i).copy_from(&data.inputs.row(row));
                if let (Some(p), Some(l)) = (prov, latents.as_mut()) {
                    l.row_mut(i).copy_from(&p.latents.row(row));
                }
            }
        }
    }

    let class_index = build_class_index(&labels);
    let provenance = match (prov, latents) {
        (Some(p), Some(latents)) => Some(Box::new(Provenance {
            spec: p.spec.clone(),
            centers: p.centers.clone(),
            transform: p.transform.clone(),
            latents,
        })),
        _ => None,
    };
    LabeledDataset {
        inputs,
        labels,
        class_index,
        provenance,
    }
}

// ============================================================================
// Evaluation sets
// ============================================================================

/// Draws a fresh query/gallery pair for `classes` from the generator behind
/// `data`, with the same noise level as training data; the draws are
/// disjoint from the training rows by construction (independent seeds).
/// Classes present in `shifts` are probed at their displaced center, so the
/// evaluation distribution matches the population the split trained on.
pub fn make_eval_set(
    data: &LabeledDataset,
    classes: &[usize],
    shifts: Option<&BTreeMap<usize, DVector<f64>>>,
    queries_per_class: usize,
    gallery_per_class: usize,
    seed: u64,
) -> Result<EvalSet> {
    let prov = data
        .provenance
        .as_deref()
        .ok_or_else(|| Error::MissingProvenance {
            context: "make_eval_set".into(),
        })?;
    if classes.is_empty() {
        return Err(Error::config("classes", "eval class list must not be empty"));
    }
    if queries_per_class == 0 || gallery_per_class == 0 {
        return Err(Error::config(
            "queries_per_class",
            "query and gallery counts must be positive",
        ));
    }
    let mut sorted: Vec<usize> = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &class in &sorted {
        if class >= prov.spec.num_classes {
            return Err(Error::config(
                "classes",
                format!(
                    "class {} outside the generated range 0..{}",
                    class, prov.spec.num_classes
                ),
            ));
        }
    }

    let dim = prov.spec.input_dim;
    let q_total = sorted.len() * queries_per_class;
    let g_total = sorted.len() * gallery_per_class;
    let mut query_inputs = DMatrix::zeros(q_total, dim);
    let mut query_labels = Vec::with_capacity(q_total);
    let mut gallery_inputs = DMatrix::zeros(g_total, dim);
    let mut gallery_labels = Vec::with_capacity(g_total);

    let mut rng = seeded(seed, stream::EVAL);
    let draw = |class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> DVector<f64> {
        let offset = shifts.and_then(|s| s.get(&class));
        let mut latent = DVector::zeros(prov.spec.latent_dim);
        for d in 0..prov.spec.latent_dim {
            let z: f64 = rng.sample(StandardNormal);
            latent[d] = prov.centers[(class, d)]
                + offset.map_or(0.0, |o| o[d])
                + prov.spec.intra_class_noise * z;
        }
        prov.transform.apply(&latent)
    };

    for (ci, &class) in sorted.iter().enumerate() {
        for q in 0..queries_per_class {
            let x = draw(class, &mut rng);
            query_inputs
                .row_mut(ci * queries_per_class + q)
                .copy_from(&x.transpose());
            query_labels.push(class);
        }
        for g in 0..gallery_per_class {
            let x = draw(class, &mut rng);
            gallery_inputs
                .row_mut(ci * gallery_per_class + g)
                .copy_from(&x.transpose());
            gallery_labels.push(class);
        }
    }

    EvalSet::new(query_inputs, query_labels, gallery_inputs, gallery_labels)
}

// ============================================================================
// Tests
// ============================================================================
