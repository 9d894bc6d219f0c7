//! Classification NLL, the domain-classifier ("disentangler") loss,
//! multi-kernel MMD, and the alignment ramp `lambda_p`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ForwardTape, Mode, ModelParams, NnError, ParamGrads};

pub const NUM_KERNELS: usize = 5;
pub const BANDWIDTH_STEP: f64 = 2.0;
pub const MIN_BANDWIDTH: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss term: {0}")]
    NonFinite(&'static str),
    #[error("invalid schedule clock: {0}")]
    InvalidClock(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Mean negative log-likelihood and its gradient w.r.t. the log-probabilities.
pub fn nll_loss(log_probs: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>), LossError> {
    let (n, c) = log_probs.dim();
    if labels.len() != n {
        return Err(LossError::Shape { what: "label count", expected: n, found: labels.len() });
    }
    if n == 0 {
        return Err(LossError::Empty("nll batch"));
    }
    let mut grad = Array2::zeros((n, c));
    let mut total = 0.0;
    let w = 1.0 / n as f64;
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(LossError::LabelOutOfRange { row, label, classes: c });
        }
        total -= log_probs[[row, label]];
        grad[[row, label]] = -w;
    }
    Ok((total * w, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// Center kernel set to the median pairwise distance of the pooled features.
    MedianPairwise,
    Fixed,
}

/// Five Gaussian bandwidths, each twice the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: [f64; NUM_KERNELS],
    rule: BandwidthRule,
}

impl KernelBank {
    /// Bank centered on `center`: `center * {1/4, 1/2, 1, 2, 4}`.
    pub fn centered(center: f64) -> Self {
        let c = center.max(MIN_BANDWIDTH);
        let mut bandwidths = [0.0; NUM_KERNELS];
        for (r, bw) in bandwidths.iter_mut().enumerate() {
            *bw = c * BANDWIDTH_STEP.powi(r as i32 - (NUM_KERNELS as i32 / 2));
        }
        Self { bandwidths, rule: BandwidthRule::Fixed }
    }

    pub fn bandwidths(&self) -> &[f64; NUM_KERNELS] {
        &self.bandwidths
    }

    pub fn center(&self) -> f64 {
        self.bandwidths[NUM_KERNELS / 2]
    }

    pub fn rule(&self) -> BandwidthRule {
        self.rule
    }
}

/// Squared Euclidean distances between rows, via the Gram matrix. With
/// `same_set` the diagonal is exactly zero.
fn pairwise_sq_dists(a: ArrayView2<f64>, b: ArrayView2<f64>, same_set: bool) -> Array2<f64> {
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d2 = a.dot(&b.t());
    for ((i, j), v) in d2.indexed_iter_mut() {
        *v = if same_set && i == j { 0.0 } else { (na[i] + nb[j] - 2.0 * *v).max(0.0) };
    }
    d2
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), LossError> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(LossError::Empty("feature set"));
    }
    if a.ncols() != b.ncols() {
        return Err(LossError::Shape { what: "feature width", expected: a.ncols(), found: b.ncols() });
    }
    Ok(())
}

/// Median-heuristic bank over the pooled rows of `a` and `b`.
pub fn kernel_bank_from(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<KernelBank, LossError> {
    check_pair(&a, &b)?;
    let pooled = concatenate(Axis(0), &[a, b]).expect("widths checked");
    let n = pooled.nrows();
    let d2 = pairwise_sq_dists(pooled.view(), pooled.view(), true);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(d2[[i, j]]);
        }
    }
    let m = dists.len();
    let upper = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
    let median = if m % 2 == 1 {
        upper.sqrt()
    } else {
        let lower = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower.sqrt() + upper.sqrt())
    };
    let mut bank = KernelBank::centered(median);
    bank.rule = BandwidthRule::MedianPairwise;
    Ok(bank)
}

/// Biased squared MMD under a sum of Gaussian kernels with the given
/// bandwidths, each weighted by `weight`. Returns the value and the gradient
/// w.r.t. the rows of `a`.
fn mmd_sq_weighted(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bandwidths: &[f64],
    weight: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    check_pair(&a, &b)?;
    let (n, m) = (a.nrows(), b.nrows());
    let inv_two_var: Vec<f64> = bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    // A bank whose bandwidths double at each step needs one exp per pair:
    // halving sigma raises the kernel value to the fourth power.
    let doubling = bandwidths.len() > 1 && bandwidths.windows(2).all(|w| w[1] == BANDWIDTH_STEP * w[0]);
    let kernel_sum = |d2: f64| -> (f64, f64) {
        // (sum_r k_r, sum_r k_r / sigma_r^2)
        let mut k = 0.0;
        let mut dk = 0.0;
        if doubling {
            let mut e = (-d2 * inv_two_var[inv_two_var.len() - 1]).exp();
            for &c in inv_two_var.iter().rev() {
                k += e;
                dk += e * 2.0 * c;
                e = (e * e) * (e * e);
            }
        } else {
            for &c in &inv_two_var {
                let e = (-d2 * c).exp();
                k += e;
                dk += e * 2.0 * c;
            }
        }
        (k, dk)
    };

    let wa = 1.0 / (n * n) as f64;
    let wab = 1.0 / (n * m) as f64;
    let kernels = |d2: Array2<f64>| {
        let mut dk = Array2::zeros(d2.dim());
        let mut k = d2;
        ndarray::Zip::from(&mut k).and(&mut dk).for_each(|kv, dkv| {
            (*kv, *dkv) = kernel_sum(*kv);
        });
        (k, dk)
    };
    let (kaa, dkaa) = kernels(pairwise_sq_dists(a, a, true));
    let (kab, dkab) = kernels(pairwise_sq_dists(a, b, false));
    let kbb = pairwise_sq_dists(b, b, true).mapv(|d| kernel_sum(d).0);
    let (saa, sab, sbb) = (kaa.sum(), kab.sum(), kbb.sum());

    // d/da_i of the within term: both orderings of each pair, -dk (a_i - a_j) each;
    // of the cross term: -2 * -dk (a_i - b_j)
    let caa = dkaa * (-2.0 * wa * weight);
    let cab = dkab * (2.0 * wab * weight);
    let row_weight = caa.sum_axis(Axis(1)) + cab.sum_axis(Axis(1));
    let mut grad = &a * &row_weight.insert_axis(Axis(1));
    grad -= &caa.dot(&a);
    grad -= &cab.dot(&b);
    let value = weight * (saa * wa + sbb / (m * m) as f64 - 2.0 * sab * wab);
    Ok((value, grad))
}

/// Squared MMD under one Gaussian kernel `exp(-d^2 / (2 sigma^2))`.
pub fn mmd_sq(a: ArrayView2<f64>, b: ArrayView2<f64>, sigma: f64) -> Result<(f64, Array2<f64>), LossError> {
    mmd_sq_weighted(a, b, &[sigma], 1.0)
}

/// Mean over the bank of the biased squared MMD, with its gradient w.r.t. `a`.
pub fn mk_mmd_sq(a: ArrayView2<f64>, b: ArrayView2<f64>, bank: &KernelBank) -> Result<(f64, Array2<f64>), LossError> {
    let (v, g) = mmd_sq_weighted(a, b, bank.bandwidths(), 1.0 / NUM_KERNELS as f64)?;
    // rounding can leave tiny negatives on identical sets
    Ok((v.max(0.0), g))
}

#[derive(Debug, Clone)]
pub struct DisentanglerOutput {
    pub loss: f64,
    pub grad_fd: ParamGrads,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    /// Train-mode tape of the domain classifier, for running-stat updates.
    pub tape: ForwardTape,
}

/// `NLL(label_a, f_d(h_a)) + NLL(label_b, f_d(h_b))`, each mean-reduced. Both
/// sets pass through the domain classifier as one train-mode batch.
pub fn domain_pair_loss(
    h_a: ArrayView2<f64>,
    label_a: usize,
    h_b: ArrayView2<f64>,
    label_b: usize,
    f_d: &ModelParams,
) -> Result<DisentanglerOutput, LossError> {
    check_pair(&h_a, &h_b)?;
    if h_a.ncols() != f_d.spec().input_dim() {
        return Err(LossError::Shape { what: "domain classifier input", expected: f_d.spec().input_dim(), found: h_a.ncols() });
    }
    let na = h_a.nrows();
    let joined = concatenate(Axis(0), &[h_a, h_b]).expect("widths checked");
    let (log_probs, tape) = f_d.forward(joined.view(), Mode::Train)?;
    let (la, ga) = nll_loss(log_probs.slice(s![..na, ..]), &vec![label_a; na])?;
    let (lb, gb) = nll_loss(log_probs.slice(s![na.., ..]), &vec![label_b; h_b.nrows()])?;
    let out_grad = concatenate(Axis(0), &[ga.view(), gb.view()]).expect("same width");
    let grads = f_d.backward(&tape, out_grad.view())?;
    let grad_a = grads.input.slice(s![..na, ..]).to_owned();
    let grad_b = grads.input.slice(s![na.., ..]).to_owned();
    Ok(DisentanglerOutput { loss: la + lb, grad_fd: grads, grad_a, grad_b, tape })
}

/// Client features carry domain label 0, server-side target features label 1.
pub fn disentangler_loss(
    h_client: ArrayView2<f64>,
    h_target: ArrayView2<f64>,
    f_d: &ModelParams,
) -> Result<DisentanglerOutput, LossError> {
    domain_pair_loss(h_client, 0, h_target, 1, f_d)
}

/// Position in training: batch `b` of `batches`, round `round` of `rounds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleClock {
    pub batch: usize,
    pub batches: usize,
    pub round: usize,
    pub rounds: usize,
    pub gamma: f64,
}

impl ScheduleClock {
    pub fn new(batch: usize, batches: usize, round: usize, rounds: usize, gamma: f64) -> Result<Self, LossError> {
        if batches == 0 || rounds == 0 {
            return Err(LossError::InvalidClock("batches and rounds must be positive".into()));
        }
        if batch >= batches || round >= rounds {
            return Err(LossError::InvalidClock(format!(
                "batch {batch}/{batches}, round {round}/{rounds} out of range"
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(LossError::InvalidClock(format!("gamma {gamma} must be positive")));
        }
        Ok(Self { batch, batches, round, rounds, gamma })
    }

    pub fn progress(&self) -> f64 {
        (self.batch + self.round * self.batches) as f64 / (self.rounds * self.batches) as f64
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }
}

/// `2 / (1 + exp(-gamma p)) - 1`
pub fn lambda_at(progress: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * progress).exp()) - 1.0
}

pub fn lambda_schedule(clock: &ScheduleClock) -> f64 {
    lambda_at(clock.progress(), clock.gamma)
}

/// `J_cls - lambda (J_dis - J_mmd)`: the encoder ascends the domain loss and
/// descends the MMD.
pub fn combined_local_objective(j_cls: f64, j_dis: f64, j_mmd: f64, lambda: f64) -> Result<f64, LossError> {
    for (v, name) in [(j_cls, "J_cls"), (j_dis, "J_dis"), (j_mmd, "J_mmd"), (lambda, "lambda")] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(j_cls - lambda * (j_dis - j_mmd))
}
