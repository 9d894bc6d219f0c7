use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{init_network, AdamState, Mode, ModelParams, NetworkSpec, NnError, OutputKind};
use crate::losses::{nll_loss, LossError};

/// Layer sizes of the encoder / class classifier / domain classifier trio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub feature_dim: usize,
    pub classifier_hidden: usize,
    pub classes: usize,
}

impl ModelArch {
    pub fn encoder_spec(&self) -> Result<NetworkSpec, NnError> {
        NetworkSpec::with_batchnorm(vec![self.input_dim, self.encoder_hidden, self.feature_dim], OutputKind::Relu)
    }

    pub fn classifier_spec(&self) -> Result<NetworkSpec, NnError> {
        NetworkSpec::with_batchnorm(
            vec![self.feature_dim, self.classifier_hidden, self.classes],
            OutputKind::LogSoftmax,
        )
    }

    pub fn domain_classifier_spec(&self) -> Result<NetworkSpec, NnError> {
        NetworkSpec::with_batchnorm(vec![self.feature_dim, self.classifier_hidden, 2], OutputKind::LogSoftmax)
    }
}

/// Encoder followed by a class classifier. Used for the global model, the
/// client-local models, and (as a difference of two models) for updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: ModelParams,
    pub classifier: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptimizer {
    pub encoder: AdamState,
    pub classifier: AdamState,
}

impl ModelOptimizer {
    pub fn new(model: &Model) -> Self {
        Self { encoder: AdamState::new(&model.encoder), classifier: AdamState::new(&model.classifier) }
    }
}

/// Outcome of one supervised mini-batch step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
}

impl Model {
    pub fn init(arch: &ModelArch, encoder_seed: u64, classifier_seed: u64) -> Result<Self, NnError> {
        Ok(Self {
            encoder: init_network(&arch.encoder_spec()?, encoder_seed),
            classifier: init_network(&arch.classifier_spec()?, classifier_seed),
        })
    }

    pub fn encode(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>, NnError> {
        Ok(self.encoder.forward(x, mode)?.0)
    }

    pub fn log_probs(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>, NnError> {
        let h = self.encoder.forward(x, mode)?.0;
        Ok(self.classifier.forward(h.view(), mode)?.0)
    }

    /// Eval-mode argmax predictions; ties resolve to the lowest class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>, NnError> {
        let lp = self.log_probs(x, Mode::Eval)?;
        Ok(lp.axis_iter(Axis(0)).map(|row| argmax_lowest(row.iter().copied())).collect())
    }

    /// `self - base`, over every tensor including running statistics.
    pub fn delta(&self, base: &Model) -> Result<Model, NnError> {
        self.check_shape(base)?;
        let mut out = self.clone();
        for (o, b) in out.slices_mut().into_iter().zip(base.slices()) {
            for (x, y) in o.iter_mut().zip(b) {
                *x -= y;
            }
        }
        Ok(out)
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &Model, weight: f64) -> Result<(), NnError> {
        self.check_shape(other)?;
        for (o, d) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in o.iter_mut().zip(d) {
                *x += weight * y;
            }
        }
        Ok(())
    }

    /// Same shapes, every tensor zero (running statistics included).
    pub fn zeros_like_model(&self) -> Model {
        Model { encoder: self.encoder.zeros_like(), classifier: self.classifier.zeros_like() }
    }

    pub fn check_shape(&self, other: &Model) -> Result<(), NnError> {
        if self.encoder.same_shape(&other.encoder) && self.classifier.same_shape(&other.classifier) {
            Ok(())
        } else {
            Err(NnError::InvalidSpec("model shapes differ".into()))
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.all_slices();
        v.extend(self.classifier.all_slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.all_slices_mut();
        v.extend(self.classifier.all_slices_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.classifier.is_finite()
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One train-mode NLL step on `(x, labels)`.
    ///
    /// `feature_grad` sees the encoder output of this batch and may return an
    /// extra gradient that is added to `d loss / d features` before the
    /// encoder backward pass.
    pub fn supervised_step<F>(
        &mut self,
        opt: &mut ModelOptimizer,
        x: ArrayView2<f64>,
        labels: &[usize],
        lr: f64,
        feature_grad: F,
    ) -> Result<StepStats, StepError>
    where
        F: FnOnce(&Array2<f64>) -> Result<Option<Array2<f64>>, StepError>,
    {
        let (h, enc_tape) = self.encoder.forward(x, Mode::Train)?;
        let (log_probs, cls_tape) = self.classifier.forward(h.view(), Mode::Train)?;
        let (loss, dlogp) = nll_loss(log_probs.view(), labels)?;
        if !loss.is_finite() {
            return Err(StepError::NonFiniteLoss);
        }
        let cls_grads = self.classifier.backward(&cls_tape, dlogp.view())?;
        let mut dh = cls_grads.input.clone();
        if let Some(extra) = feature_grad(&h)? {
            if extra.dim() != dh.dim() {
                return Err(NnError::Shape { what: "feature gradient rows", expected: dh.nrows(), found: extra.nrows() }
                    .into());
            }
            dh += &extra;
        }
        let enc_grads = self.encoder.backward(&enc_tape, dh.view())?;
        opt.classifier.step(&mut self.classifier, &cls_grads, lr)?;
        opt.encoder.step(&mut self.encoder, &enc_grads, lr)?;
        self.classifier.update_running_stats(&cls_tape);
        self.encoder.update_running_stats(&enc_tape);
        Ok(StepStats { loss })
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("exchange failed: {0}")]
    Exchange(String),
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
