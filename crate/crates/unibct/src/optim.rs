//! SGD with classical momentum and L2 weight decay.
//!
//! Update rule, per parameter tensor:
//!
//! ```text
//! v <- momentum * v + (g + weight_decay * w)
//! w <- w - lr * v
//! ```
//!
//! Trainable prototype rows are re-projected onto the unit sphere after
//! every step; frozen prototype matrices reject updates outright.

use nalgebra::DMatrix;

use crate::arcface::PrototypeMatrix;
use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, LayerGrad, ModelGrads};

/// Momentum state for one model (and optionally one prototype matrix).
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    model_velocity: Vec<LayerGrad>,
    proto_velocity: Option<DMatrix<f64>>,
}

impl Sgd {
    /// Zero-initialized velocity buffers matching `model` (and `prototypes`).
    pub fn new(
        model: &EmbeddingModel,
        prototypes: Option<&PrototypeMatrix>,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        let model_velocity = model
            .layers()
            .iter()
            .map(|layer| LayerGrad {
                weight: DMatrix::zeros(layer.weight.nrows(), layer.weight.ncols()),
                bias: nalgebra::DVector::zeros(layer.bias.len()),
            })
            .collect();
        let proto_velocity = prototypes
            .map(|p| DMatrix::zeros(p.matrix().nrows(), p.matrix().ncols()));
        Sgd {
            momentum,
            weight_decay,
            model_velocity,
            proto_velocity,
        }
    }

    /// One momentum step on every model layer.
    pub fn step_model(
        &mut self,
        model: &mut EmbeddingModel,
        grads: &ModelGrads,
        lr: f64,
    ) -> Result<()> {
        if grads.has_non_finite() {
            return Err(Error::numerical("sgd_step", "non-finite model gradient"));
        }
        if grads.layers.len() != self.model_velocity.len() {
            return Err(Error::ShapeMismatch {
                context: "Sgd::step_model".into(),
                expected: format!("{} layer grads", self.model_velocity.len()),
                got: format!("{}", grads.layers.len()),
            });
        }
        for ((layer, vel), grad) in model
            .layers_mut()
            .iter_mut()
            .zip(self.model_velocity.iter_mut())
            .zip(grads.layers.iter())
        {
            vel.weight *= self.momentum;
            vel.weight += &grad.weight;
            let wd = self.weight_decay;
            vel.weight.zip_apply(&layer.weight, |v, w| *v += wd * w);
            layer.weight.zip_apply(&vel.weight, |w, v| *w -= lr * v);

            vel.bias *= self.momentum;
            vel.bias += &grad.bias;
            vel.bias.axpy(self.weight_decay, &layer.bias, 1.0);
            layer.bias.axpy(-lr, &vel.bias, 1.0);
        }
        Ok(())
    }

    /// One momentum step on a trainable prototype matrix, then row renorm.
    pub fn step_prototypes(
        &mut self,
        prototypes: &mut PrototypeMatrix,
        grad: &DMatrix<f64>,
        lr: f64,
    ) -> Result<()> {
        if !prototypes.trainable() {
            return Err(Error::numerical(
                "sgd_step",
                "update attempted on frozen prototypes",
            ));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("sgd_step", "non-finite prototype gradient"));
        }
        let vel = self
            .proto_velocity
            .as_mut()
            .expect("optimizer built without prototype state");
        if vel.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                context: "Sgd::step_prototypes".into(),
                expected: format!("{:?}", vel.shape()),
                got: format!("{:?}", grad.shape()),
            });
        }
        *vel *= self.momentum;
        *vel += grad;
        let wd = self.weight_decay;
        vel.zip_apply(prototypes.matrix(), |v, w| *v += wd * w);
        let rows = prototypes.matrix_mut();
        rows.zip_apply(&*vel, |w, v| *w -= lr * v);
        prototypes.renormalize()
    }
}
