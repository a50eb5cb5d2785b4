//! Model checkpoints and feature dumps.
//!
//! Checkpoints are a flat little-endian binary: an 8-byte magic, the
//! activation tag, the init seed, the layer dimensions, then every layer's
//! weight matrix (row-major) and bias vector as raw f64 bits. Feature dumps
//! are CSV with a `label,f0,f1,...` header; floats are printed with Rust's
//! shortest-roundtrip formatting, so a dump-and-load cycle is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Activation, EmbeddingModel, FeatureMatrix, Linear, ModelConfig};

const MODEL_MAGIC: &[u8; 8] = b"UBCM0001";

/// Writes a model checkpoint.
pub fn save_model(model: &EmbeddingModel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MODEL_MAGIC)?;
    let config = model.config();
    let activation_tag: u32 = match config.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    };
    out.write_all(&activation_tag.to_le_bytes())?;
    out.write_all(&config.init_seed.to_le_bytes())?;
    out.write_all(&(config.input_dim as u32).to_le_bytes())?;
    out.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for layer in model.layers() {
        out.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
    }
    for layer in model.layers() {
        for r in 0..layer.weight.nrows() {
            for c in 0..layer.weight.ncols() {
                out.write_all(&layer.weight[(r, c)].to_le_bytes())?;
            }
        }
        for v in layer.bias.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = Cursor {
        bytes: &bytes,
        at: 0,
    };

    let magic = cursor.take(8)?;
    if magic != MODEL_MAGIC {
        return Err(Error::FileFormat(format!(
            "bad checkpoint magic {magic:?}; expected {MODEL_MAGIC:?}"
        )));
    }
    let activation = match cursor.read_u32()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        tag => {
            return Err(Error::FileFormat(format!(
                "unknown activation tag {tag}"
            )))
        }
    };
    let init_seed = cursor.read_u64()?;
    let input_dim = cursor.read_u32()? as usize;
    let n_layers = cursor.read_u32()? as usize;
    if n_layers == 0 {
        return Err(Error::FileFormat("checkpoint has zero layers".into()));
    }
    let mut out_dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        out_dims.push(cursor.read_u32()? as usize);
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut in_dim = input_dim;
    for &out_dim in &out_dims {
        let mut weight = DMatrix::zeros(out_dim, in_dim);
        for r in 0..out_dim {
            for c in 0..in_dim {
                weight[(r, c)] = cursor.read_f64()?;
            }
        }
        let mut bias = DVector::zeros(out_dim);
        for v in bias.iter_mut() {
            *v = cursor.read_f64()?;
        }
        layers.push(Linear { weight, bias });
        in_dim = out_dim;
    }
    if cursor.at != bytes.len() {
        return Err(Error::FileFormat(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - cursor.at
        )));
    }

    let config = ModelConfig {
        input_dim,
        hidden_dims: out_dims[..n_layers - 1].to_vec(),
        embed_dim: out_dims[n_layers - 1],
        activation,
        init_seed,
    };
    EmbeddingModel::from_layers(config, layers)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::FileFormat(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }

    fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }
}

/// Writes labeled feature rows as CSV (`label,f0,f1,...`).
pub fn export_features(features: &FeatureMatrix, labels: &[usize], path: &Path) -> Result<()> {
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "export_features".into(),
            expected: format!("{} labels", features.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "label")?;
    for c in 0..features.ncols() {
        write!(out, ",f{c}")?;
    }
    writeln!(out)?;
    for (r, &label) in labels.iter().enumerate() {
        write!(out, "{label}")?;
        for c in 0..features.ncols() {
            write!(out, ",{}", features[(r, c)])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes genuine and impostor similarity scores as a two-column CSV
/// (`kind,score`), genuine rows first. Scores print with shortest-roundtrip
/// formatting, so downstream histograms see the exact values.
pub fn export_scores(genuine: &[f64], impostor: &[f64], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "kind,score")?;
    for s in genuine {
        writeln!(out, "genuine,{s}")?;
    }
    for s in impostor {
        writeln!(out, "impostor,{s}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV written by [`export_features`].
pub fn import_features(path: &Path) -> Result<(FeatureMatrix, Vec<usize>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::FileFormat("empty feature file".into()))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 || !header.starts_with("label") {
        return Err(Error::FileFormat(format!(
            "unexpected feature header {header:?}"
        )));
    }

    let mut labels = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .expect("split yields at least one field")
            .parse::<usize>()
            .map_err(|e| Error::FileFormat(format!("line {}: bad label: {e}", i + 2)))?;
        labels.push(label);
        let before = values.len();
        for field in fields {
            let v = field
                .parse::<f64>()
                .map_err(|e| Error::FileFormat(format!("line {}: bad value: {e}", i + 2)))?;
            values.push(v);
        }
        if values.len() - before != dim {
            return Err(Error::FileFormat(format!(
                "line {}: expected {dim} values, found {}",
                i + 2,
                values.len() - before
            )));
        }
    }
    if labels.is_empty() {
        return Err(Error::FileFormat("feature file has no rows".into()));
    }
    Ok((
        DMatrix::from_row_slice(labels.len(), dim, &values),
        labels,
    ))
}
