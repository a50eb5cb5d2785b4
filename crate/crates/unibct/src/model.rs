//! MLP encoder with unit-norm outputs and hand-written backprop.
//!
//! The network is `input -> hidden... -> embed` with ReLU or tanh between
//! layers and a final L2 normalization, so every feature row lands on the
//! unit sphere. Backprop is explicit (no autograd): the forward pass caches
//! per-layer activations and `backward` walks them in reverse, including the
//! Jacobian of the normalization step.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

/// Rows are samples, columns are dimensions.
pub type FeatureMatrix = DMatrix<f64>;

/// Nonlinearity between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture and init seed of one encoder.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths, at least one entry.
    pub hidden_dims: Vec<usize>,
    /// Output embedding width, at least 2.
    pub embed_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small encoder used for the "old" model by default.
    pub fn small(input_dim: usize, init_seed: u64) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![32],
            embed_dim: 32,
            activation: Activation::Relu,
            init_seed,
        }
    }

    /// Larger encoder used for the "new" model by default.
    pub fn large(input_dim: usize, init_seed: u64) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::config("hidden_dims", "must not be empty"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("hidden_dims", "widths must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "must be at least 2"));
        }
        Ok(())
    }
}

/// One dense layer, `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Per-layer parameter gradients, same shapes as [`Linear`].
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Gradients for every layer of a model, outermost first.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrad>,
}

impl ModelGrads {
    /// True when any component is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.layers.iter().any(|l| {
            l.weight.iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite())
        })
    }
}

/// Activations captured by [`EmbeddingModel::forward_cached`] for backprop.
pub struct ForwardCache {
    /// `hs[0]` is the input batch, `hs[l]` the post-activation of layer l.
    hs: Vec<DMatrix<f64>>,
    /// Normalized output features.
    features: DMatrix<f64>,
    /// Per-row 1/||z|| of the pre-normalization output.
    inv_norms: Vec<f64>,
}

impl ForwardCache {
    /// The unit-norm features this cache belongs to.
    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }
}

/// The MLP encoder.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    config: ModelConfig,
    layers: Vec<Linear>,
}

impl EmbeddingModel {
    /// Seeded He/Xavier init (by activation), zero biases.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.init_seed, stream::MODEL_INIT);
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embed_dim);

        let gain = match config.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (gain / fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                });
                Linear {
                    weight,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(EmbeddingModel {
            config: config.clone(),
            layers,
        })
    }

    /// Rebuilds a model from explicit layers (checkpoint load path).
    pub fn from_layers(config: ModelConfig, layers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embed_dim);
        if layers.len() + 1 != dims.len() {
            return Err(Error::ShapeMismatch {
                context: "EmbeddingModel::from_layers".into(),
                expected: format!("{} layers", dims.len() - 1),
                got: format!("{}", layers.len()),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.nrows() != dims[i + 1]
                || layer.weight.ncols() != dims[i]
                || layer.bias.len() != dims[i + 1]
            {
                return Err(Error::ShapeMismatch {
                    context: format!("EmbeddingModel::from_layers layer {i}"),
                    expected: format!("{}x{} weight", dims[i + 1], dims[i]),
                    got: format!("{}x{}", layer.weight.nrows(), layer.weight.ncols()),
                });
            }
        }
        Ok(EmbeddingModel { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    /// Embeds a batch; every output row is unit-L2 within 1e-6.
    pub fn forward(&self, inputs: &FeatureMatrix) -> Result<FeatureMatrix> {
        Ok(self.forward_cached(inputs)?.features)
    }

    /// Embeds a batch and keeps the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, inputs: &FeatureMatrix) -> Result<ForwardCache> {
        if inputs.ncols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "EmbeddingModel::forward".into(),
                expected: format!("{} input columns", self.config.input_dim),
                got: format!("{}", inputs.ncols()),
            });
        }
        let n = inputs.nrows();
        let mut hs = Vec::with_capacity(self.layers.len());
        hs.push(inputs.clone());

        for (li, layer) in self.layers.iter().enumerate() {
            let mut a = &hs[li] * layer.weight.transpose();
            for mut row in a.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let last = li + 1 == self.layers.len();
            if !last {
                match self.config.activation {
                    Activation::Relu => a.apply(|v| *v = v.max(0.0)),
                    Activation::Tanh => a.apply(|v| *v = v.tanh()),
                }
            }
            hs.push(a);
        }

        let z = hs.pop().expect("at least one layer");
        let mut features = z;
        let mut inv_norms = Vec::with_capacity(n);
        for (i, mut row) in features.row_iter_mut().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || norm < 1e-12 {
                return Err(Error::numerical(
                    "forward normalization",
                    format!("row {i} has unusable norm {norm:.3e}"),
                ));
            }
            row /= norm;
            inv_norms.push(1.0 / norm);
        }
        Ok(ForwardCache {
            hs,
            features,
            inv_norms,
        })
    }

    /// Backprop: turns `d loss / d features` into parameter gradients.
    ///
    /// `grad_features` must have the shape of `cache.features()`. The
    /// normalization Jacobian is applied first, then the dense layers in
    /// reverse.
    pub fn backward(&self, cache: &ForwardCache, grad_features: &FeatureMatrix) -> ModelGrads {
        let v = &cache.features;
        assert_eq!(
            (grad_features.nrows(), grad_features.ncols()),
            (v.nrows(), v.ncols()),
            "grad_features shape mismatch"
        );

        // d z = (g - v (v . g)) / ||z||
        let mut dz = grad_features.clone();
        for i in 0..dz.nrows() {
            let vi = v.row(i);
            let dot = vi.dot(&grad_features.row(i));
            let inv_norm = cache.inv_norms[i];
            dz.row_mut(i)
                .zip_apply(&vi, |g, vv| *g = (*g - dot * vv) * inv_norm);
        }

        let mut grads = vec![
            LayerGrad {
                weight: DMatrix::zeros(0, 0),
                bias: DVector::zeros(0),
            };
            self.layers.len()
        ];
        let mut d_out = dz; // gradient w.r.t. the layer's (pre-activation) output
        for li in (0..self.layers.len()).rev() {
            let h_in = &cache.hs[li];
            grads[li] = LayerGrad {
                weight: d_out.transpose() * h_in,
                bias: d_out.row_sum().transpose(),
            };
            if li == 0 {
                break;
            }
            let mut d_h = d_out * &self.layers[li].weight;
            // Chain through the activation of the previous layer, using the
            // cached post-activation values.
            let h = &cache.hs[li];
            match self.config.activation {
                Activation::Relu => {
                    d_h.zip_apply(h, |g, hv| {
                        if hv <= 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                Activation::Tanh => {
                    d_h.zip_apply(h, |g, hv| *g *= 1.0 - hv * hv);
                }
            }
            d_out = d_h;
        }
        ModelGrads { layers: grads }
    }

    /// Order-stable hash of all parameters (bit patterns).
    pub fn param_hash(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for layer in &self.layers {
            hash_matrix_into(&layer.weight, &mut hasher);
            for v in layer.bias.iter() {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }
}

/// Order-stable 64-bit content hash of a matrix (shape plus bit patterns).
pub fn matrix_hash(m: &DMatrix<f64>) -> u64 {
    let mut hasher = DefaultHasher::new();
    hash_matrix_into(m, &mut hasher);
    hasher.finish()
}

fn hash_matrix_into(m: &DMatrix<f64>, hasher: &mut DefaultHasher) {
    m.nrows().hash(hasher);
    m.ncols().hash(hasher);
    for v in m.iter() {
        v.to_bits().hash(hasher);
    }
}

/// L2-normalizes every row in place; errors on a near-zero row.
pub fn normalize_rows(m: &mut DMatrix<f64>, context: &str) -> Result<()> {
    for (i, mut row) in m.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm < 1e-8 {
            return Err(Error::NearZeroVector {
                context: format!("{context} row {i}"),
                norm,
            });
        }
        row /= norm;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dims: vec![8, 5],
            embed_dim: 4,
            activation: Activation::Relu,
            init_seed: 3,
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed, 77);
        DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn forward_rows_are_unit_norm() {
        // Wide enough that relu cannot zero a whole row of this batch.
        for activation in [Activation::Relu, Activation::Tanh] {
            let model = EmbeddingModel::new(&ModelConfig {
                hidden_dims: vec![16, 12],
                activation,
                ..config()
            })
            .unwrap();
            let out = model.forward(&random_batch(17, 6, 1)).unwrap();
            for row in out.row_iter() {
                assert!((row.norm() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_weights_nonzero_bias_gives_constant_rows() {
        let cfg = config();
        let mut model = EmbeddingModel::new(&cfg).unwrap();
        for layer in model.layers_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.3);
        }
        let out = model.forward(&random_batch(5, 6, 2)).unwrap();
        let first = out.row(0).clone_owned();
        for row in out.row_iter() {
            assert_eq!(row, first.row(0));
        }
    }

    #[test]
    fn all_zero_parameters_error_on_normalization() {
        let cfg = config();
        let mut model = EmbeddingModel::new(&cfg).unwrap();
        for layer in model.layers_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let err = model.forward(&random_batch(2, 6, 2)).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "got {err:?}");
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = EmbeddingModel::new(&config()).unwrap();
        let b = EmbeddingModel::new(&config()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let c = EmbeddingModel::new(&ModelConfig {
            init_seed: 4,
            ..config()
        })
        .unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let model = EmbeddingModel::new(&config()).unwrap();
        let err = model.forward(&random_batch(3, 5, 1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    /// End-to-end parameter-gradient check through normalization: the loss
    /// is sum(features * targets) so d loss / d features = targets, and the
    /// analytic parameter gradients must match central finite differences.
    #[test]
    fn backward_matches_finite_differences_through_normalization() {
        for activation in [Activation::Relu, Activation::Tanh] {
            let cfg = ModelConfig {
                activation,
                ..config()
            };
            let mut model = EmbeddingModel::new(&cfg).unwrap();
            let x = random_batch(7, 6, 10);
            let targets = random_batch(7, 4, 11);

            let cache = model.forward_cached(&x).unwrap();
            let grads = model.backward(&cache, &targets);

            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for li in 0..model.layers.len() {
                let (rows, cols) = model.layers[li].weight.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        let orig = model.layers[li].weight[(r, c)];
                        model.layers[li].weight[(r, c)] = orig + h;
                        let up = model.forward(&x).unwrap().dot(&targets);
                        model.layers[li].weight[(r, c)] = orig - h;
                        let down = model.forward(&x).unwrap().dot(&targets);
                        model.layers[li].weight[(r, c)] = orig;
                        let fd = (up - down) / (2.0 * h);
                        worst = worst.max((grads.layers[li].weight[(r, c)] - fd).abs());
                    }
                }
                for b in 0..model.layers[li].bias.len() {
                    let orig = model.layers[li].bias[b];
                    model.layers[li].bias[b] = orig + h;
                    let up = model.forward(&x).unwrap().dot(&targets);
                    model.layers[li].bias[b] = orig - h;
                    let down = model.forward(&x).unwrap().dot(&targets);
                    model.layers[li].bias[b] = orig;
                    let fd = (up - down) / (2.0 * h);
                    worst = worst.max((grads.layers[li].bias[b] - fd).abs());
                }
            }
            assert!(
                worst <= 1e-6,
                "{activation:?}: worst |analytic - fd| = {worst:.3e}"
            );
        }
    }

    #[test]
    fn matrix_hash_tracks_content() {
        let a = random_batch(3, 3, 1);
        let mut b = a.clone();
        assert_eq!(matrix_hash(&a), matrix_hash(&b));
        b[(1, 1)] += 1e-12;
        assert_ne!(matrix_hash(&a), matrix_hash(&b));
    }

    /// Re-evaluates one input with explicit scalar loops over the stored
    /// weights and compares against the batched forward pass.
    #[test]
    fn forward_matches_a_straight_line_scalar_evaluation() {
        let model = EmbeddingModel::new(&ModelConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            embed_dim: 2,
            activation: Activation::Tanh,
            init_seed: 11,
        })
        .unwrap();
        let input = [0.3, -1.2, 0.7];

        let mut h: Vec<f64> = input.to_vec();
        for (li, layer) in model.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.weight.nrows()];
            for (o, out) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, hv) in h.iter().enumerate() {
                    acc += layer.weight[(o, i)] * hv;
                }
                *out = if li + 1 == model.layers().len() {
                    acc
                } else {
                    acc.tanh()
                };
            }
            h = next;
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut h {
            *v /= norm;
        }

        let batch = DMatrix::from_row_slice(1, 3, &input);
        let out = model.forward(&batch).unwrap();
        for (j, expected) in h.iter().enumerate() {
            assert!(
                (out[(0, j)] - expected).abs() <= 1e-14,
                "feature {j}: {} vs {expected}",
                out[(0, j)]
            );
        }
    }
}
