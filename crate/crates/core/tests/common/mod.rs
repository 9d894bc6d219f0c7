//! Central finite-difference oracle shared by the gradient and acceptance tests.
#![allow(dead_code)]

use fedka::losses::{domain_pair_loss, kernel_bank_from, mk_mmd_sq, nll_loss};
use fedka::nn::{init_network, Mode, ModelParams, NetworkSpec, OutputKind, ParamGrads};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU kink even at the smallest step.
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL && self.checked > 0
    }
}

/// Central difference along one coordinate at steps `h` and `2h`, combined by
/// Richardson extrapolation. The closure applies a step and returns the step it
/// actually took (after rounding) with the loss and ReLU pattern. Shrinks `h`
/// when the ReLU pattern changes; returns `None` if it never settles.
fn central<P>(base_pattern: &[bool], mut eval: P) -> Option<f64>
where
    P: FnMut(f64) -> (f64, f64, Vec<bool>),
{
    let mut h = FD_STEP;
    while h >= 1e-7 {
        let (sp, fp, pp) = eval(h);
        let (sm, fm, pm) = eval(-h);
        let (sp2, fp2, pp2) = eval(2.0 * h);
        let (sm2, fm2, pm2) = eval(-2.0 * h);
        if [pp, pm, pp2, pm2].iter().all(|p| p == base_pattern) {
            // the 2h estimate cancels the O(h^2) term with less roundoff than h/2 would
            let d1 = (fp - fm) / (sp - sm);
            let d2 = (fp2 - fm2) / (sp2 - sm2);
            return Some((4.0 * d1 - d2) / 3.0);
        }
        h /= 10.0;
    }
    None
}

fn record(report: &mut FdReport, what: String, analytic: f64, numeric: Option<f64>) {
    match numeric {
        None => report.skipped += 1,
        Some(n) => {
            report.checked += 1;
            let e = rel_err(analytic, n);
            if e > report.worst {
                report.worst = e;
                report.worst_at = format!("{what}: analytic {analytic:e} numeric {n:e}");
            }
        }
    }
}

/// Check every trainable parameter of `params` against `loss`.
pub fn check_params<L>(label: &str, params: &ModelParams, analytic: &ParamGrads, loss: L) -> FdReport
where
    L: Fn(&ModelParams) -> (f64, Vec<bool>),
{
    let mut report = FdReport::default();
    let base_pattern = loss(params).1;
    let grads: Vec<Vec<f64>> = analytic.slices().into_iter().map(|s| s.to_vec()).collect();
    let mut work = params.clone();
    for (t, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let numeric = central(&base_pattern, |h| {
                let orig = work.trainable_slices_mut()[t][i];
                work.trainable_slices_mut()[t][i] = orig + h;
                let step = (orig + h) - orig;
                let (l, p) = loss(&work);
                work.trainable_slices_mut()[t][i] = orig;
                (step, l, p)
            });
            record(&mut report, format!("{label} tensor {t} entry {i}"), a, numeric);
        }
    }
    report
}

/// Check a gradient w.r.t. the entries of a matrix input.
pub fn check_matrix<L>(label: &str, x: &Array2<f64>, analytic: &Array2<f64>, loss: L) -> FdReport
where
    L: Fn(&Array2<f64>) -> (f64, Vec<bool>),
{
    let mut report = FdReport::default();
    let base_pattern = loss(x).1;
    let mut work = x.clone();
    for ((r, c), &a) in analytic.indexed_iter() {
        let numeric = central(&base_pattern, |h| {
            let orig = work[[r, c]];
            work[[r, c]] = orig + h;
            let step = (orig + h) - orig;
            let (l, p) = loss(&work);
            work[[r, c]] = orig;
            (step, l, p)
        });
        record(&mut report, format!("{label} [{r},{c}]"), a, numeric);
    }
    report
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Two or three layers, every width in `2..=max_width`, batch-norm on a coin flip.
pub fn random_spec(rng: &mut ChaCha8Rng, input: usize, output: usize, kind: OutputKind, max_width: usize) -> NetworkSpec {
    let hidden = rng.random_range(1..=2);
    let mut dims = vec![input];
    for _ in 0..hidden {
        dims.push(rng.random_range(2..=max_width));
    }
    dims.push(output);
    let bn = (0..hidden).map(|_| rng.random_bool(0.5)).collect();
    NetworkSpec::new(dims, bn, kind).expect("valid random spec")
}

/// Perturb freshly initialized parameters so batch-norm scales, shifts and
/// biases are not at their special initial values.
pub fn jitter(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for s in params.trainable_slices_mut() {
        for v in s.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

/// One trial: an NLL classifier, a domain classifier under the paired domain
/// loss, and an encoder under MK-MMD, each checked on parameters and inputs.
pub fn gradient_trial(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();

    // classification NLL
    let input = rng.random_range(2..=12);
    let classes = rng.random_range(2..=6);
    let spec = random_spec(&mut rng, input, classes, OutputKind::LogSoftmax, 50);
    let mut net = init_network(&spec, seed);
    jitter(&mut net, &mut rng);
    let batch = rng.random_range(3..=8);
    let x = random_matrix(&mut rng, batch, input, 1.5);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let nll = |p: &ModelParams, x: &Array2<f64>| {
        let (lp, tape) = p.forward(x.view(), Mode::Train).unwrap();
        (nll_loss(lp.view(), &labels).unwrap().0, tape.relu_pattern())
    };
    let (lp, tape) = net.forward(x.view(), Mode::Train).unwrap();
    let (_, dlp) = nll_loss(lp.view(), &labels).unwrap();
    let grads = net.backward(&tape, dlp.view()).unwrap();
    report.merge(check_params("nll params", &net, &grads, |p| nll(p, &x)));
    report.merge(check_matrix("nll input", &x, &grads.input, |xx| nll(&net, xx)));

    // domain-classifier loss on two feature sets
    let width = rng.random_range(2..=12);
    let spec = random_spec(&mut rng, width, 2, OutputKind::LogSoftmax, 50);
    let mut fd = init_network(&spec, seed ^ 0x5eed);
    jitter(&mut fd, &mut rng);
    let (na, nb) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let ha = random_matrix(&mut rng, na, width, 1.0);
    let hb = random_matrix(&mut rng, nb, width, 1.0);
    let dis = |p: &ModelParams, a: &Array2<f64>, b: &Array2<f64>| {
        let out = domain_pair_loss(a.view(), 0, b.view(), 1, p).unwrap();
        (out.loss, out.tape.relu_pattern())
    };
    let out = domain_pair_loss(ha.view(), 0, hb.view(), 1, &fd).unwrap();
    report.merge(check_params("dis params", &fd, &out.grad_fd, |p| dis(p, &ha, &hb)));
    report.merge(check_matrix("dis client features", &ha, &out.grad_a, |a| dis(&fd, a, &hb)));
    report.merge(check_matrix("dis target features", &hb, &out.grad_b, |b| dis(&fd, &ha, b)));

    // MK-MMD through an encoder; the bank is fixed at the unperturbed features
    let input = rng.random_range(2..=10);
    let feat = rng.random_range(2..=10);
    let spec = random_spec(&mut rng, input, feat, OutputKind::Linear, 50);
    let mut enc = init_network(&spec, seed ^ 0xe1c);
    jitter(&mut enc, &mut rng);
    let (nx, nt) = (rng.random_range(3..=8), rng.random_range(2..=8));
    let x = random_matrix(&mut rng, nx, input, 1.5);
    let target = random_matrix(&mut rng, nt, feat, 1.5);
    let (h, tape) = enc.forward(x.view(), Mode::Train).unwrap();
    let bank = kernel_bank_from(h.view(), target.view()).unwrap();
    let (_, gh) = mk_mmd_sq(h.view(), target.view(), &bank).unwrap();
    let grads = enc.backward(&tape, gh.view()).unwrap();
    let mmd = |p: &ModelParams, x: &Array2<f64>| {
        let (h, tape) = p.forward(x.view(), Mode::Train).unwrap();
        (mk_mmd_sq(h.view(), target.view(), &bank).unwrap().0, tape.relu_pattern())
    };
    report.merge(check_params("mmd encoder params", &enc, &grads, |p| mmd(p, &x)));
    report.merge(check_matrix("mmd encoder input", &x, &grads.input, |xx| mmd(&enc, xx)));
    report.merge(check_matrix("mmd features", &h, &gh, |hh| {
        (mk_mmd_sq(hh.view(), target.view(), &bank).unwrap().0, Vec::new())
    }));
    report
}
