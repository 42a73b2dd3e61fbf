//! Central finite-difference verification of the network and loss gradients.
//!
//! Network checks use the scalar `sum_i g_i * P_i` for a random `g`, so every
//! path through the softmax is exercised. A perturbation that moves the pass
//! into a different linear piece (a ReLU flips or a pooling argmax moves) is
//! skipped and counted rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::knowledge::ActivitySet;
use crate::losses::{self, LossConfig, ProbabilityDistribution, SemanticLoss};
use crate::nn::{
    backward, build_network, forward, BackwardOptions, BranchSpec, Mode, NetworkInput, NetworkSpec, Parameters,
    Tensor,
};
use crate::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error for network gradients.
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Maximum accepted relative error for loss gradients.
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Minimum gap between the top two probabilities in loss checks.
pub const ARGMAX_MARGIN: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

impl CheckResult {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            tolerance,
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, coordinate: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || !e.is_finite() {
            self.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = coordinate();
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

/// Runs `trials` random network specs (alternating with and without the
/// infusion input) and every differentiable loss branch.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for t in 0..trials {
        let spec = random_spec(&mut rng, t % 2 == 1);
        let mut r = check_network(&spec, rng.random())?;
        r.name = format!("network[{t}]{}", if spec.infusion { "+infusion" } else { "" });
        results.push(r);
    }
    results.extend(check_losses(rng.random(), 200));
    Ok(GradcheckReport { results })
}

/// A small random valid spec.
pub fn random_spec(rng: &mut impl Rng, infusion: bool) -> NetworkSpec {
    let branch = |rng: &mut dyn rand::RngCore| {
        let blocks = rng.random_range(1..=3);
        let pool = rng.random_range(1..=3);
        let kernels: Vec<usize> = (0..blocks).map(|_| rng.random_range(1..=3)).collect();
        let filters: Vec<usize> = (0..blocks).map(|_| rng.random_range(1..=3)).collect();
        // smallest window that survives the chain, plus slack
        let mut need = 1;
        for (i, &k) in kernels.iter().enumerate().rev() {
            need += k - 1;
            if i > 0 {
                need *= pool;
            }
        }
        BranchSpec {
            channels: rng.random_range(1..=3),
            window: need + rng.random_range(0..4),
            filters,
            kernels,
            pool,
            dense: rng.random_range(1..=4),
        }
    };
    let phone = branch(rng);
    let watch = branch(rng);
    NetworkSpec {
        phone,
        watch,
        context_width: rng.random_range(1..=4),
        context_dense: rng.random_range(1..=3),
        dropout: if rng.random_bool(0.5) { 0.0 } else { 0.3 },
        hidden: rng.random_range(2..=5),
        activities: rng.random_range(2..=4),
        infusion,
    }
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

struct Probe<'a> {
    spec: &'a NetworkSpec,
    phone: Tensor,
    watch: Tensor,
    context: Vec<f64>,
    infusion: Option<Vec<f64>>,
    g: Vec<f64>,
    dropout_seed: u64,
}

impl Probe<'_> {
    /// Scalar objective and piece signature; the dropout mask is fixed by reseeding.
    fn eval(&self, params: &Parameters) -> Result<(f64, u64, crate::nn::Trace)> {
        let input = NetworkInput {
            phone: &self.phone,
            watch: &self.watch,
            context: &self.context,
            infusion: self.infusion.as_deref(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (p, trace) = forward(params, self.spec, &input, Mode::Train, &mut rng)?;
        let value = p.probs().iter().zip(&self.g).map(|(p, g)| p * g).sum();
        Ok((value, trace.piece_signature(), trace))
    }
}

/// Compares analytic and numeric gradients for every parameter and input
/// coordinate of one randomly initialized network.
pub fn check_network(spec: &NetworkSpec, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build_network(spec, rng.random())?;
    let probe = Probe {
        spec,
        phone: random_tensor(&mut rng, vec![spec.phone.channels, spec.phone.window]),
        watch: random_tensor(&mut rng, vec![spec.watch.channels, spec.watch.window]),
        context: (0..spec.context_width).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect(),
        infusion: spec
            .infusion
            .then(|| (0..spec.activities).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect()),
        g: (0..spec.activities).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dropout_seed: rng.random(),
    };
    let (_, base_sig, trace) = probe.eval(&params)?;
    let grads = backward(&params, spec, &trace, &probe.g, BackwardOptions { inputs: true })?;
    let mut result = CheckResult::new("network", NETWORK_TOLERANCE);

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.params.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut work = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for j in 0..analytic[ti].len() {
            let orig = work.named_tensors()[ti].1.data()[j];
            let at = |v: f64, work: &mut Parameters| -> Result<(f64, u64)> {
                work.tensors_mut()[ti].data_mut()[j] = v;
                let (f, s, _) = probe.eval(work)?;
                Ok((f, s))
            };
            let (fp, sp) = at(orig + STEP, &mut work)?;
            let (fm, sm) = at(orig - STEP, &mut work)?;
            work.tensors_mut()[ti].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                result.skipped += 1;
                continue;
            }
            result.record(|| format!("{name}[{j}]"), analytic[ti][j], (fp - fm) / (2.0 * STEP));
        }
    }

    let inputs = grads.inputs.expect("input gradients requested");
    let mut check_input = |label: &str, analytic: &[f64], set: &dyn Fn(&mut Probe, f64, usize) -> f64| -> Result<()> {
        let mut p = probe.clone_inputs();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = set(&mut p, 0.0, j);
            set(&mut p, orig + STEP, j);
            let (fp, sp, _) = p.eval(&params)?;
            set(&mut p, orig - STEP, j);
            let (fm, sm, _) = p.eval(&params)?;
            set(&mut p, orig, j);
            if sp != base_sig || sm != base_sig {
                result.skipped += 1;
                continue;
            }
            result.record(|| format!("input.{label}[{j}]"), a, (fp - fm) / (2.0 * STEP));
        }
        Ok(())
    };
    // each setter stores `v` and returns the previous value
    check_input("phone", inputs.phone.data(), &|p, v, j| swap(&mut p.phone.data_mut()[j], v))?;
    check_input("watch", inputs.watch.data(), &|p, v, j| swap(&mut p.watch.data_mut()[j], v))?;
    check_input("context", &inputs.context, &|p, v, j| swap(&mut p.context[j], v))?;
    if let Some(inf) = &inputs.infusion {
        check_input("infusion", inf, &|p, v, j| swap(&mut p.infusion.as_mut().unwrap()[j], v))?;
    }
    Ok(result)
}

fn swap(slot: &mut f64, v: f64) -> f64 {
    std::mem::replace(slot, v)
}

impl<'a> Probe<'a> {
    fn clone_inputs(&self) -> Probe<'a> {
        Probe {
            spec: self.spec,
            phone: self.phone.clone(),
            watch: self.watch.clone(),
            context: self.context.clone(),
            infusion: self.infusion.clone(),
            g: self.g.clone(),
            dropout_seed: self.dropout_seed,
        }
    }
}

/// Random distribution whose top two entries differ by at least the margin.
fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] >= ARGMAX_MARGIN {
            return p;
        }
    }
}

fn random_set(rng: &mut impl Rng, k: usize) -> ActivitySet {
    ActivitySet::from_mask((0..k).map(|_| rng.random_bool(0.5)).collect())
}

/// Loss gradients with respect to P. Perturbed vectors leave the simplex;
/// the losses are evaluated on them directly.
pub fn check_losses(seed: u64, samples: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<CheckResult> = Vec::new();
    let mut cases: Vec<(String, Box<dyn Fn(&ProbabilityDistribution, usize, &ActivitySet) -> losses::LossValue>)> =
        vec![(
            "cross_entropy".into(),
            Box::new(|p, label, _| losses::cross_entropy(p, label).expect("label in range")),
        )];
    for kind in SemanticLoss::ALL {
        cases.push((format!("semantic[{}]", kind.code()), Box::new(move |p, _, a| kind.evaluate(p, a))));
    }
    cases.push((
        "combined[All, alpha=2]".into(),
        Box::new(|p, label, a| {
            losses::combined_loss(p, label, a, &LossConfig::semantic(SemanticLoss::All, 2.0)).expect("valid")
        }),
    ));
    cases.push((
        "combined[-P1, alpha=7]".into(),
        Box::new(|p, label, a| {
            losses::combined_loss(p, label, a, &LossConfig::semantic(SemanticLoss::MinusProbOne, 7.0)).expect("valid")
        }),
    ));
    for (name, f) in &cases {
        let mut r = CheckResult::new(name.clone(), LOSS_TOLERANCE);
        for _ in 0..samples {
            let k = rng.random_range(2..=6);
            let p = random_distribution(&mut rng, k);
            let label = rng.random_range(0..k);
            let set = random_set(&mut rng, k);
            let base = f(&ProbabilityDistribution::from_softmax(p.clone()), label, &set);
            for j in 0..k {
                let mut hi = p.clone();
                hi[j] += STEP;
                let mut lo = p.clone();
                lo[j] -= STEP;
                let fp = f(&ProbabilityDistribution::from_softmax(hi), label, &set).value;
                let fm = f(&ProbabilityDistribution::from_softmax(lo), label, &set).value;
                r.record(|| format!("P[{j}] (k={k})"), base.gradient[j], (fp - fm) / (2.0 * STEP));
            }
        }
        results.push(r);
    }
    results
}

/// Negative control: a layer `y = tanh(w * x)` whose backward has its sign
/// flipped. The checker must reject it.
pub fn sign_flip_control(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |w: &[f64]| -> f64 { w.iter().zip(&x).zip(&g).map(|((w, x), g)| g * (w * x).tanh()).sum() };
    let wrong: Vec<f64> = w
        .iter()
        .zip(&x)
        .zip(&g)
        .map(|((w, x), g)| -(g * x * (1.0 - (w * x).tanh().powi(2))))
        .collect();
    let mut r = CheckResult::new("fake_layer[sign_flipped]", NETWORK_TOLERANCE);
    for j in 0..w.len() {
        let mut hi = w.clone();
        hi[j] += STEP;
        let mut lo = w.clone();
        lo[j] -= STEP;
        r.record(|| format!("w[{j}]"), wrong[j], (objective(&hi) - objective(&lo)) / (2.0 * STEP));
    }
    r
}
