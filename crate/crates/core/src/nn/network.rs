//! Dense feed-forward networks with optional batch normalization.
//!
//! A network is a stack of affine layers. Every hidden layer is
//! `affine -> [batch-norm] -> ReLU`; the last layer is `affine -> output
//! activation`. Forward passes are pure: running statistics are folded in
//! afterwards with [`ModelParams::update_running_stats`].

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Activation applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputKind {
    /// Raw affine output.
    Linear,
    /// Rectified features, used for encoders.
    Relu,
    /// Row-wise log-softmax over the output units.
    LogSoftmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_dims: Vec<usize>,
    batchnorm: Vec<bool>,
    output: OutputKind,
}

impl NetworkSpec {
    /// `batchnorm` has one flag per hidden layer (`layer_dims.len() - 2`).
    pub fn new(layer_dims: Vec<usize>, batchnorm: Vec<bool>, output: OutputKind) -> Result<Self, NnError> {
        if layer_dims.len() < 2 {
            return Err(NnError::InvalidSpec("need at least input and output dims".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidSpec("layer dims must be positive".into()));
        }
        if batchnorm.len() != layer_dims.len() - 2 {
            return Err(NnError::InvalidSpec(format!(
                "expected {} batch-norm flags, got {}",
                layer_dims.len() - 2,
                batchnorm.len()
            )));
        }
        Ok(Self { layer_dims, batchnorm, output })
    }

    /// Every hidden layer batch-normalized.
    pub fn with_batchnorm(layer_dims: Vec<usize>, output: OutputKind) -> Result<Self, NnError> {
        let n = layer_dims.len().saturating_sub(2);
        Self::new(layer_dims, vec![true; n], output)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn batchnorm(&self) -> &[bool] {
        &self.batchnorm
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn has_batchnorm(&self) -> bool {
        self.batchnorm.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: NetworkSpec,
    pub layers: Vec<Dense>,
    /// One slot per hidden layer.
    pub norms: Vec<Option<BatchNorm>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    norm: Option<NormCache>,
    /// Value fed to the activation (post-norm for hidden layers).
    pre_activation: Array2<f64>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    spec: NetworkSpec,
    mode: Mode,
    batch: usize,
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// ReLU on/off pattern of every hidden unit, used by finite-difference
    /// checks to detect kink crossings.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let n = self.layers.len();
        for (i, cache) in self.layers.iter().enumerate() {
            if i + 1 < n || self.spec.output() == OutputKind::Relu {
                out.extend(cache.pre_activation.iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrad {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Gradients of a scalar loss w.r.t. every trainable parameter and the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseGrad>,
    pub norms: Vec<Option<NormGrad>>,
    pub input: Array2<f64>,
}

impl ParamGrads {
    /// Same order as [`ModelParams::trainable_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2 * self.norms.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        for n in self.norms.iter().flatten() {
            out.push(n.scale.as_slice().expect("standard layout"));
            out.push(n.shift.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// He-uniform weights, zero biases, identity batch-norm.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.layer_dims();
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
            Dense { weight, bias: Array1::zeros(fan_out) }
        })
        .collect();
    let norms = spec
        .batchnorm()
        .iter()
        .zip(&dims[1..dims.len() - 1])
        .map(|(&bn, &d)| bn.then(|| BatchNorm::new(d)))
        .collect();
    ModelParams { spec: spec.clone(), layers, norms }
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl ModelParams {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for s in out.all_slices_mut() {
            s.fill(0.0);
        }
        out
    }

    pub fn forward(&self, batch: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, ForwardTape), NnError> {
        let n = batch.nrows();
        if batch.ncols() != self.spec.input_dim() {
            return Err(NnError::Shape {
                what: "input columns",
                expected: self.spec.input_dim(),
                found: batch.ncols(),
            });
        }
        if n == 0 {
            return Err(NnError::EmptyBatch);
        }
        if mode == Mode::Train && n < 2 && self.spec.has_batchnorm() {
            return Err(NnError::BatchTooSmall(n));
        }

        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                let norm = match &self.norms[i] {
                    Some(bn) => {
                        let (mean, var) = match mode {
                            Mode::Train => {
                                let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                                let var = z.var_axis(Axis(0), 0.0);
                                (mean, var)
                            }
                            Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                        };
                        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                        let xhat = (&z - &mean) * &inv_std;
                        z = &xhat * &bn.scale + &bn.shift;
                        Some(NormCache { xhat, inv_std, batch_mean: mean, batch_var: var })
                    }
                    None => None,
                };
                let next = z.mapv(|v| v.max(0.0));
                caches.push(LayerCache { input: act, norm, pre_activation: z });
                act = next;
            } else {
                let out = match self.spec.output() {
                    OutputKind::Linear => z.clone(),
                    OutputKind::Relu => z.mapv(|v| v.max(0.0)),
                    OutputKind::LogSoftmax => log_softmax_rows(&z),
                };
                caches.push(LayerCache { input: act, norm: None, pre_activation: z });
                act = out;
            }
        }
        let tape = ForwardTape { spec: self.spec.clone(), mode, batch: n, layers: caches, output: act.clone() };
        Ok((act, tape))
    }

    /// Gradient of a scalar loss given `d loss / d output`.
    pub fn backward(&self, tape: &ForwardTape, output_grad: ArrayView2<f64>) -> Result<ParamGrads, NnError> {
        if tape.spec != self.spec {
            return Err(NnError::StaleTape("tape built for a different network shape".into()));
        }
        if output_grad.dim() != tape.output.dim() {
            return Err(NnError::StaleTape(format!(
                "output grad {:?} does not match tape output {:?}",
                output_grad.dim(),
                tape.output.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut layer_grads: Vec<Option<DenseGrad>> = vec![None; self.layers.len()];
        let mut norm_grads: Vec<Option<NormGrad>> = vec![None; self.norms.len()];

        // d loss / d (activation output) of the current layer
        let mut upstream = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            let cache = &tape.layers[i];
            let mut dz = if i == last {
                match self.spec.output() {
                    OutputKind::Linear => upstream,
                    OutputKind::Relu => relu_mask(upstream, &cache.pre_activation),
                    OutputKind::LogSoftmax => {
                        // d/dz of log_softmax: g - softmax * rowsum(g)
                        let row_sums = upstream.sum_axis(Axis(1));
                        let mut dz = upstream;
                        Zip::from(dz.rows_mut())
                            .and(tape.output.rows())
                            .and(&row_sums)
                            .for_each(|mut g, lp, &s| {
                                Zip::from(&mut g).and(&lp).for_each(|gi, &l| *gi -= l.exp() * s);
                            });
                        dz
                    }
                }
            } else {
                relu_mask(upstream, &cache.pre_activation)
            };

            if i < last {
                if let (Some(bn), Some(nc)) = (&self.norms[i], &cache.norm) {
                    let dscale = (&dz * &nc.xhat).sum_axis(Axis(0));
                    let dshift = dz.sum_axis(Axis(0));
                    let dxhat = &dz * &bn.scale;
                    dz = match tape.mode {
                        Mode::Train => {
                            let n = tape.batch as f64;
                            let sum_d = dxhat.sum_axis(Axis(0));
                            let sum_dx = (&dxhat * &nc.xhat).sum_axis(Axis(0));
                            let mut d = dxhat * n - &sum_d - &nc.xhat * &sum_dx;
                            d *= &(&nc.inv_std / n);
                            d
                        }
                        Mode::Eval => dxhat * &nc.inv_std,
                    };
                    norm_grads[i] = Some(NormGrad { scale: dscale, shift: dshift });
                }
            }

            let layer = &self.layers[i];
            let dw = cache.input.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layer.weight.t());
            layer_grads[i] = Some(DenseGrad { weight: dw, bias: db });
        }

        Ok(ParamGrads {
            layers: layer_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
            norms: norm_grads,
            input: upstream,
        })
    }

    /// Fold the batch statistics of a train-mode tape into the running estimates.
    pub fn update_running_stats(&mut self, tape: &ForwardTape) {
        if tape.mode != Mode::Train {
            return;
        }
        let n = tape.batch as f64;
        for (bn, cache) in self.norms.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(nc)) = (bn, &cache.norm) {
                let unbiased = &nc.batch_var * (n / (n - 1.0));
                bn.running_mean *= 1.0 - BN_MOMENTUM;
                bn.running_mean.scaled_add(BN_MOMENTUM, &nc.batch_mean);
                bn.running_var *= 1.0 - BN_MOMENTUM;
                bn.running_var.scaled_add(BN_MOMENTUM, &unbiased);
            }
        }
    }

    /// Train-mode forward that also advances the running statistics.
    pub fn forward_train(&mut self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape), NnError> {
        let (out, tape) = self.forward(batch, Mode::Train)?;
        self.update_running_stats(&tape);
        Ok((out, tape))
    }

    /// Weights, biases, batch-norm scales and shifts.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        for n in self.norms.iter_mut().flatten() {
            out.push(n.scale.as_slice_mut().expect("standard layout"));
            out.push(n.shift.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Trainable tensors followed by the running statistics.
    pub fn all_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        let mut stats: Vec<&mut [f64]> = Vec::new();
        for n in self.norms.iter_mut().flatten() {
            out.push(n.scale.as_slice_mut().expect("standard layout"));
            out.push(n.shift.as_slice_mut().expect("standard layout"));
            stats.push(n.running_mean.as_slice_mut().expect("standard layout"));
            stats.push(n.running_var.as_slice_mut().expect("standard layout"));
        }
        out.extend(stats);
        out
    }

    pub fn all_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        for n in self.norms.iter().flatten() {
            out.push(n.scale.as_slice().expect("standard layout"));
            out.push(n.shift.as_slice().expect("standard layout"));
        }
        for n in self.norms.iter().flatten() {
            out.push(n.running_mean.as_slice().expect("standard layout"));
            out.push(n.running_var.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        let mut c = 0;
        for l in &self.layers {
            c += l.weight.len() + l.bias.len();
        }
        for n in self.norms.iter().flatten() {
            c += n.scale.len() + n.shift.len();
        }
        c
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.spec == other.spec
    }

    pub fn is_finite(&self) -> bool {
        self.all_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn relu_mask(mut grad: Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    Zip::from(&mut grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    grad
}
