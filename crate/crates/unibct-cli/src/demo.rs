//! Standalone prototype refinement over a dumped feature CSV.
//!
//! Reads a `label,f0,...` file (typically `train_old.csv` from a run with
//! `--dump-features`), builds one prototype per class with the requested
//! pooling variant, and reports how far each prototype moved relative to the
//! plain per-class mean. With `refined-avg` the class features serve as both
//! the propagated vertices and the edge source, which is the graph the
//! trainer builds when old and new features coincide.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use nalgebra::{DMatrix, DVector};

use unibct::model::normalize_rows;
use unibct::prototype::PoolOutcome;
use unibct::{
    export_features, import_features, pool_prototype, propagate_closed_form, ClassGraph,
    FeatureMatrix, PoolVariant,
};

#[derive(Args)]
pub struct DemoArgs {
    /// Feature CSV: header `label,f0,...`, one row per sample.
    input: PathBuf,
    /// Aggregation strength, `0 <= lambda < 1`.
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    /// Edge softmax temperature.
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    /// Pooling variant: `refined-avg`, `vanilla-avg`, or `drop-avg`.
    #[arg(long, default_value = "refined-avg")]
    variant: String,
    /// Outlier share for `drop-avg`.
    #[arg(long, default_value_t = 0.10)]
    drop_fraction: f64,
    /// Output prototype CSV (default: `<input stem>_prototypes.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(args: &DemoArgs) -> Result<PoolVariant> {
    Ok(match args.variant.as_str() {
        "refined-avg" => PoolVariant::RefinedAvg,
        "vanilla-avg" => PoolVariant::VanillaAvg,
        "drop-avg" => PoolVariant::DropAvg {
            drop_fraction: args.drop_fraction,
        },
        other => bail!(
            "unknown variant {other:?}; expected refined-avg, vanilla-avg, or drop-avg"
        ),
    })
}

fn rows_of(features: &FeatureMatrix, indices: &[usize]) -> FeatureMatrix {
    DMatrix::from_fn(indices.len(), features.ncols(), |i, j| {
        features[(indices[i], j)]
    })
}

fn unit_mean(vertices: &FeatureMatrix) -> Result<DVector<f64>> {
    Ok(pool_prototype(vertices, &PoolVariant::VanillaAvg)?.prototype)
}

fn pool_class(
    class: usize,
    vertices: &FeatureMatrix,
    variant: &PoolVariant,
    tau: f64,
    lambda: f64,
) -> Result<PoolOutcome> {
    if vertices.nrows() < 2 {
        // A single vertex has no graph and no outliers; every variant
        // reduces to the row itself.
        return Ok(PoolOutcome {
            prototype: vertices.row(0).transpose(),
            drop_fallback: false,
        });
    }
    let outcome = match variant {
        PoolVariant::RefinedAvg => {
            let graph = ClassGraph::build(class, vertices.clone(), vertices.clone(), tau, lambda)?;
            let refined = propagate_closed_form(&graph)?;
            pool_prototype(&refined, variant)?
        }
        _ => pool_prototype(vertices, variant)?,
    };
    Ok(outcome)
}

pub fn cmd_refine_demo(args: DemoArgs) -> Result<()> {
    let variant = parse_variant(&args)?;
    let (mut features, labels) = import_features(&args.input)
        .with_context(|| format!("reading features from {}", args.input.display()))?;
    normalize_rows(&mut features, "refine-demo input")?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(row);
    }

    let dim = features.ncols();
    let mut prototypes = DMatrix::zeros(by_class.len(), dim);
    let mut class_ids = Vec::with_capacity(by_class.len());
    let mut cosine_sum = 0.0;

    println!("class,vertices,drop_fallback,cosine_vs_vanilla");
    for (out_row, (&class, indices)) in by_class.iter().enumerate() {
        let vertices = rows_of(&features, indices);
        let outcome = pool_class(class, &vertices, &variant, args.tau, args.lambda)
            .with_context(|| format!("pooling class {class}"))?;
        let cosine = outcome.prototype.dot(&unit_mean(&vertices)?);
        cosine_sum += cosine;
        println!(
            "{class},{},{},{cosine:.6}",
            vertices.nrows(),
            outcome.drop_fallback
        );
        prototypes.row_mut(out_row).tr_copy_from(&outcome.prototype);
        class_ids.push(class);
    }
    println!(
        "{} classes, mean cosine vs vanilla mean {:.6}",
        class_ids.len(),
        cosine_sum / class_ids.len() as f64
    );

    let out = args.out.unwrap_or_else(|| {
        let stem = args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "features".into());
        args.input.with_file_name(format!("{stem}_prototypes.csv"))
    });
    export_features(&prototypes, &class_ids, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
