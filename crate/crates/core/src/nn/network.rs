use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::{NetworkError, Tensor};
use crate::losses::ProbabilityDistribution;

/// One inertial branch: conv blocks, global max pool, dense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub channels: usize,
    /// Window length in samples.
    pub window: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Max-pool size between consecutive conv blocks.
    pub pool: usize,
    pub dense: usize,
}

impl BranchSpec {
    /// Sequence length entering each conv block, plus the final conv output length.
    fn lengths(&self, name: &str) -> Result<Vec<usize>, NetworkError> {
        let fail = |layer: String, message: String| NetworkError::InvalidSpec { layer, message };
        if self.channels == 0 {
            return Err(fail(format!("{name}.input"), "zero channels".into()));
        }
        if self.filters.is_empty() || self.filters.len() != self.kernels.len() {
            return Err(fail(
                format!("{name}.conv"),
                format!("{} filter counts for {} kernels", self.filters.len(), self.kernels.len()),
            ));
        }
        if self.pool == 0 {
            return Err(fail(format!("{name}.pool"), "pool size must be positive".into()));
        }
        if self.filters.contains(&0) || self.kernels.contains(&0) || self.dense == 0 {
            return Err(fail(name.to_string(), "layer widths must be positive".into()));
        }
        let mut lens = Vec::new();
        let mut len = self.window;
        for (i, &k) in self.kernels.iter().enumerate() {
            if i > 0 {
                let pooled = len / self.pool;
                if pooled == 0 {
                    return Err(fail(
                        format!("{name}.pool{i}"),
                        format!("input length {len} shorter than pool size {}", self.pool),
                    ));
                }
                len = pooled;
            }
            if len < k {
                return Err(fail(
                    format!("{name}.conv{}", i + 1),
                    format!("input length {len} shorter than kernel {k}"),
                ));
            }
            lens.push(len);
            len = len + 1 - k;
        }
        lens.push(len);
        Ok(lens)
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut in_ch = self.channels;
        for (&f, &k) in self.filters.iter().zip(&self.kernels) {
            n += f * in_ch * k + f;
            in_ch = f;
        }
        n + in_ch * self.dense + self.dense
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub phone: BranchSpec,
    pub watch: BranchSpec,
    /// Width of the multi-hot context input.
    pub context_width: usize,
    pub context_dense: usize,
    pub dropout: f64,
    pub hidden: usize,
    /// Number of activities `k`.
    pub activities: usize,
    /// Concatenate a `k`-wide consistency vector before dropout.
    #[serde(default)]
    pub infusion: bool,
}

impl NetworkSpec {
    /// The reference architecture: 32/64/96 filters, phone kernels
    /// 24/16/8, watch kernels 16/8/4, pool 4, dense 128, context dense 8,
    /// dropout 0.1, hidden 256.
    pub fn reference(phone_channels: usize, watch_channels: usize, window: usize, context_width: usize, k: usize) -> Self {
        let branch = |channels, kernels: [usize; 3]| BranchSpec {
            channels,
            window,
            filters: vec![32, 64, 96],
            kernels: kernels.to_vec(),
            pool: 4,
            dense: 128,
        };
        NetworkSpec {
            phone: branch(phone_channels, [24, 16, 8]),
            watch: branch(watch_channels, [16, 8, 4]),
            context_width,
            context_dense: 8,
            dropout: 0.1,
            hidden: 256,
            activities: k,
            infusion: false,
        }
    }

    /// Same topology with narrower layers and shorter kernels, sized for
    /// short windows and desk-scale experiments.
    pub fn compact(phone_channels: usize, watch_channels: usize, window: usize, context_width: usize, k: usize) -> Self {
        let branch = |channels, kernels: [usize; 3]| BranchSpec {
            channels,
            window,
            filters: vec![8, 16, 16],
            kernels: kernels.to_vec(),
            pool: 4,
            dense: 32,
        };
        NetworkSpec {
            phone: branch(phone_channels, [5, 4, 2]),
            watch: branch(watch_channels, [4, 3, 2]),
            context_width,
            context_dense: 8,
            dropout: 0.1,
            hidden: 64,
            activities: k,
            infusion: false,
        }
    }

    pub fn with_infusion(mut self, infusion: bool) -> Self {
        self.infusion = infusion;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.phone.lengths("phone")?;
        self.watch.lengths("watch")?;
        let fail = |layer: &str, message: &str| NetworkError::InvalidSpec {
            layer: layer.into(),
            message: message.into(),
        };
        if self.activities < 2 {
            return Err(fail("output", "need at least two activities"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(fail("dropout", "rate must lie in [0, 1)"));
        }
        if self.context_width == 0 || self.context_dense == 0 {
            return Err(fail("context", "context input and dense widths must be positive"));
        }
        if self.hidden == 0 {
            return Err(fail("hidden", "hidden width must be positive"));
        }
        Ok(())
    }

    /// Width of the concatenated feature vector.
    pub fn concat_width(&self) -> usize {
        self.phone.dense + self.watch.dense + self.context_dense + if self.infusion { self.activities } else { 0 }
    }

    pub fn parameter_count(&self) -> usize {
        self.phone.parameter_count()
            + self.watch.parameter_count()
            + self.context_width * self.context_dense
            + self.context_dense
            + self.concat_width() * self.hidden
            + self.hidden
            + self.hidden * self.activities
            + self.activities
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    /// `[filters, channels, kernel]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub convs: Vec<Conv>,
    pub dense: Dense,
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Trainable weights of a [`NetworkSpec`]. Also used for gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameters {
    pub phone: BranchParams,
    pub watch: BranchParams,
    pub context: Dense,
    pub hidden: Dense,
    pub output: Dense,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.phone == other.phone
            && self.watch == other.watch
            && self.context == other.context
            && self.hidden == other.hidden
            && self.output == other.output
    }
}

impl Parameters {
    /// All-zero parameters shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let dense = |n_in: usize, n_out: usize| Dense {
            weight: Tensor::zeros(vec![n_out, n_in]),
            bias: Tensor::zeros(vec![n_out]),
        };
        let branch = |b: &BranchSpec| {
            let mut in_ch = b.channels;
            let convs = b
                .filters
                .iter()
                .zip(&b.kernels)
                .map(|(&f, &k)| {
                    let c = Conv {
                        weight: Tensor::zeros(vec![f, in_ch, k]),
                        bias: Tensor::zeros(vec![f]),
                    };
                    in_ch = f;
                    c
                })
                .collect();
            BranchParams {
                convs,
                dense: dense(in_ch, b.dense),
            }
        };
        Parameters {
            phone: branch(&spec.phone),
            watch: branch(&spec.watch),
            context: dense(spec.context_width, spec.context_dense),
            hidden: dense(spec.concat_width(), spec.hidden),
            output: dense(spec.hidden, spec.activities),
            stamp: fresh_stamp(),
        }
    }

    /// Named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, b) in [("phone", &self.phone), ("watch", &self.watch)] {
            for (i, c) in b.convs.iter().enumerate() {
                out.push((format!("{prefix}.conv{}.weight", i + 1), &c.weight));
                out.push((format!("{prefix}.conv{}.bias", i + 1), &c.bias));
            }
            out.push((format!("{prefix}.dense.weight"), &b.dense.weight));
            out.push((format!("{prefix}.dense.bias"), &b.dense.bias));
        }
        for (name, d) in [("context", &self.context), ("hidden", &self.hidden), ("output", &self.output)] {
            out.push((format!("{name}.weight"), &d.weight));
            out.push((format!("{name}.bias"), &d.bias));
        }
        out
    }

    /// Mutable tensors in the order of [`Parameters::named_tensors`].
    /// Invalidates outstanding traces.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.stamp = fresh_stamp();
        let mut out = Vec::new();
        for b in [&mut self.phone, &mut self.watch] {
            for c in &mut b.convs {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            out.push(&mut b.dense.weight);
            out.push(&mut b.dense.bias);
        }
        for d in [&mut self.context, &mut self.hidden, &mut self.output] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Checks every tensor shape against `spec`.
    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<(), NetworkError> {
        let reference = Parameters::zeros(spec);
        for ((name, t), (_, r)) in self.named_tensors().into_iter().zip(reference.named_tensors()) {
            if t.shape() != r.shape() {
                return Err(NetworkError::Shape {
                    tensor: name,
                    expected: format!("{:?}", r.shape()),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        if self.named_tensors().len() != reference.named_tensors().len() {
            return Err(NetworkError::Shape {
                tensor: "parameters".into(),
                expected: format!("{} tensors", reference.named_tensors().len()),
                got: format!("{} tensors", self.named_tensors().len()),
            });
        }
        Ok(())
    }
}

/// Deterministic fan-in-scaled uniform initialization; biases start at zero.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Parameters, NetworkError> {
    spec.validate()?;
    let mut params = Parameters::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; the trace supports [`backward`].
    Train,
    /// Dropout off; deterministic.
    Infer,
}

/// Inputs of one window.
#[derive(Debug, Clone, Copy)]
pub struct NetworkInput<'a> {
    /// `[channels, window]`
    pub phone: &'a Tensor,
    pub watch: &'a Tensor,
    /// Multi-hot context vector.
    pub context: &'a [f64],
    /// Consistency vector, required iff the spec declares the infusion input.
    pub infusion: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
struct BranchTrace {
    /// Input to each conv block.
    conv_inputs: Vec<Vec<f64>>,
    conv_lens: Vec<usize>,
    /// Pre-activation conv outputs.
    conv_pre: Vec<Vec<f64>>,
    /// Argmax positions of the pool after each conv block except the last.
    pool_arg: Vec<Vec<usize>>,
    global_arg: Vec<usize>,
    dense_in: Vec<f64>,
    dense_pre: Vec<f64>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    mode: Mode,
    stamp: u64,
    phone: BranchTrace,
    watch: BranchTrace,
    context_in: Vec<f64>,
    context_pre: Vec<f64>,
    has_infusion: bool,
    dropout_scale: Vec<f64>,
    hidden_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    output_in: Vec<f64>,
    probs: Vec<f64>,
}

impl Trace {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Per-feature dropout factors (0 or 1/(1-rate)) applied in this pass.
    pub fn dropout_scale(&self) -> &[f64] {
        &self.dropout_scale
    }

    /// Hash of every ReLU sign and pooling argmax. Two passes with equal
    /// signatures lie in the same linear piece of the network.
    pub fn piece_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let signs = |v: &[f64], h: &mut std::collections::hash_map::DefaultHasher| {
            for x in v {
                (*x > 0.0).hash(h);
            }
        };
        for b in [&self.phone, &self.watch] {
            for pre in &b.conv_pre {
                signs(pre, &mut h);
            }
            b.pool_arg.hash(&mut h);
            b.global_arg.hash(&mut h);
            signs(&b.dense_pre, &mut h);
        }
        signs(&self.context_pre, &mut h);
        signs(&self.hidden_pre, &mut h);
        h.finish()
    }
}

fn check_input(name: &str, t: &Tensor, b: &BranchSpec) -> Result<(), NetworkError> {
    if t.shape() != [b.channels, b.window] {
        return Err(NetworkError::Shape {
            tensor: name.into(),
            expected: format!("[{}, {}]", b.channels, b.window),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(())
}

fn branch_forward(p: &BranchParams, b: &BranchSpec, input: &Tensor) -> (Vec<f64>, BranchTrace) {
    let mut x = input.data().to_vec();
    let mut len = b.window;
    let mut ch = b.channels;
    let mut trace = BranchTrace {
        conv_inputs: Vec::new(),
        conv_lens: Vec::new(),
        conv_pre: Vec::new(),
        pool_arg: Vec::new(),
        global_arg: Vec::new(),
        dense_in: Vec::new(),
        dense_pre: Vec::new(),
    };
    let n = p.convs.len();
    for (i, conv) in p.convs.iter().enumerate() {
        let k = b.kernels[i];
        let pre = conv1d_forward(&x, ch, len, conv.weight.data(), conv.bias.data(), k);
        trace.conv_inputs.push(std::mem::take(&mut x));
        trace.conv_lens.push(len);
        let mut act = pre.clone();
        relu_inplace(&mut act);
        trace.conv_pre.push(pre);
        ch = b.filters[i];
        len = len + 1 - k;
        if i + 1 < n {
            let (pooled, arg) = maxpool_forward(&act, ch, len, b.pool);
            trace.pool_arg.push(arg);
            x = pooled;
            len /= b.pool;
        } else {
            x = act;
        }
    }
    let (g, arg) = global_maxpool_forward(&x, ch, len);
    trace.global_arg = arg;
    let pre = dense_forward(&g, p.dense.weight.data(), p.dense.bias.data());
    let mut out = pre.clone();
    relu_inplace(&mut out);
    trace.dense_in = g;
    trace.dense_pre = pre;
    (out, trace)
}

/// Runs the network on one window.
pub fn forward(
    params: &Parameters,
    spec: &NetworkSpec,
    input: &NetworkInput<'_>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(ProbabilityDistribution, Trace), NetworkError> {
    check_input("phone", input.phone, &spec.phone)?;
    check_input("watch", input.watch, &spec.watch)?;
    if input.context.len() != spec.context_width {
        return Err(NetworkError::Shape {
            tensor: "context".into(),
            expected: format!("[{}]", spec.context_width),
            got: format!("[{}]", input.context.len()),
        });
    }
    match (spec.infusion, input.infusion) {
        (true, Some(f)) if f.len() != spec.activities => {
            return Err(NetworkError::Shape {
                tensor: "infusion".into(),
                expected: format!("[{}]", spec.activities),
                got: format!("[{}]", f.len()),
            })
        }
        (true, None) => {
            return Err(NetworkError::Shape {
                tensor: "infusion".into(),
                expected: format!("[{}]", spec.activities),
                got: "none".into(),
            })
        }
        (false, Some(_)) => {
            return Err(NetworkError::Shape {
                tensor: "infusion".into(),
                expected: "none (spec has no infusion input)".into(),
                got: "a vector".into(),
            })
        }
        _ => {}
    }

    let (phone_out, phone) = branch_forward(&params.phone, &spec.phone, input.phone);
    let (watch_out, watch) = branch_forward(&params.watch, &spec.watch, input.watch);
    let context_pre = dense_forward(input.context, params.context.weight.data(), params.context.bias.data());
    let mut context_out = context_pre.clone();
    relu_inplace(&mut context_out);

    let mut concat = Vec::with_capacity(spec.concat_width());
    concat.extend_from_slice(&phone_out);
    concat.extend_from_slice(&watch_out);
    concat.extend_from_slice(&context_out);
    if let Some(f) = input.infusion {
        concat.extend_from_slice(f);
    }

    let dropout_scale: Vec<f64> = match mode {
        Mode::Train if spec.dropout > 0.0 => {
            let keep = 1.0 / (1.0 - spec.dropout);
            (0..concat.len())
                .map(|_| if rng.random::<f64>() < spec.dropout { 0.0 } else { keep })
                .collect()
        }
        _ => vec![1.0; concat.len()],
    };
    let hidden_in: Vec<f64> = concat.iter().zip(&dropout_scale).map(|(x, s)| x * s).collect();
    let hidden_pre = dense_forward(&hidden_in, params.hidden.weight.data(), params.hidden.bias.data());
    let mut output_in = hidden_pre.clone();
    relu_inplace(&mut output_in);
    let logits = dense_forward(&output_in, params.output.weight.data(), params.output.bias.data());
    let probs = softmax(&logits);

    let trace = Trace {
        mode,
        stamp: params.stamp,
        phone,
        watch,
        context_in: input.context.to_vec(),
        context_pre,
        has_infusion: input.infusion.is_some(),
        dropout_scale,
        hidden_in,
        hidden_pre,
        output_in,
        probs: probs.clone(),
    };
    Ok((ProbabilityDistribution::from_softmax(probs), trace))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Also return gradients with respect to the inputs.
    pub inputs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub phone: Tensor,
    pub watch: Tensor,
    pub context: Vec<f64>,
    pub infusion: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Parameters,
    pub inputs: Option<InputGradients>,
}

fn branch_backward(
    p: &BranchParams,
    b: &BranchSpec,
    t: &BranchTrace,
    d_out: &[f64],
    g: &mut BranchParams,
    want_input: bool,
) -> Option<Vec<f64>> {
    let mut d_pre = d_out.to_vec();
    relu_backward(&t.dense_pre, &mut d_pre);
    let mut d_global = vec![0.0; t.dense_in.len()];
    dense_backward(
        &t.dense_in,
        p.dense.weight.data(),
        &d_pre,
        g.dense.weight.data_mut(),
        g.dense.bias.data_mut(),
        Some(&mut d_global),
    );
    let n = p.convs.len();
    let last_len = t.conv_lens[n - 1] + 1 - b.kernels[n - 1];
    let mut d_act = vec![0.0; b.filters[n - 1] * last_len];
    pool_backward(&d_global, &t.global_arg, &mut d_act);

    for i in (0..n).rev() {
        let in_ch = if i == 0 { b.channels } else { b.filters[i - 1] };
        let len = t.conv_lens[i];
        relu_backward(&t.conv_pre[i], &mut d_act);
        let need_input = i > 0 || want_input;
        let mut d_in = if need_input { vec![0.0; in_ch * len] } else { Vec::new() };
        let Conv { weight: gw, bias: gb } = &mut g.convs[i];
        conv1d_backward(
            &t.conv_inputs[i],
            in_ch,
            len,
            p.convs[i].weight.data(),
            b.kernels[i],
            &d_act,
            gw.data_mut(),
            gb.data_mut(),
            need_input.then_some(d_in.as_mut_slice()),
        );
        if i == 0 {
            return want_input.then_some(d_in);
        }
        // d_in is the gradient wrt the pooled output of block i-1
        let prev_len = t.conv_lens[i - 1] + 1 - b.kernels[i - 1];
        let mut d_prev = vec![0.0; in_ch * prev_len];
        pool_backward(&d_in, &t.pool_arg[i - 1], &mut d_prev);
        d_act = d_prev;
    }
    unreachable!("branch has at least one conv block")
}

/// Reverse pass. `d_probs` is the loss gradient with respect to the output
/// probabilities.
pub fn backward(
    params: &Parameters,
    spec: &NetworkSpec,
    trace: &Trace,
    d_probs: &[f64],
    options: BackwardOptions,
) -> Result<Gradients, NetworkError> {
    let mut grads = Parameters::zeros(spec);
    let inputs = backward_into(params, spec, trace, d_probs, options, &mut grads)?;
    Ok(Gradients { params: grads, inputs })
}

/// Like [`backward`] but accumulates parameter gradients into `grads`.
pub fn backward_into(
    params: &Parameters,
    spec: &NetworkSpec,
    trace: &Trace,
    d_probs: &[f64],
    options: BackwardOptions,
    grads: &mut Parameters,
) -> Result<Option<InputGradients>, NetworkError> {
    if trace.mode != Mode::Train {
        return Err(NetworkError::InferenceTrace);
    }
    if trace.stamp != params.stamp {
        return Err(NetworkError::StaleTrace);
    }
    if d_probs.len() != spec.activities {
        return Err(NetworkError::Shape {
            tensor: "output gradient".into(),
            expected: format!("[{}]", spec.activities),
            got: format!("[{}]", d_probs.len()),
        });
    }
    let d_logits = softmax_backward(&trace.probs, d_probs);
    let mut d_output_in = vec![0.0; spec.hidden];
    dense_backward(
        &trace.output_in,
        params.output.weight.data(),
        &d_logits,
        grads.output.weight.data_mut(),
        grads.output.bias.data_mut(),
        Some(&mut d_output_in),
    );
    relu_backward(&trace.hidden_pre, &mut d_output_in);
    let mut d_hidden_in = vec![0.0; trace.hidden_in.len()];
    let (hw, hb) = dense_grads(&mut grads.hidden);
    dense_backward(
        &trace.hidden_in,
        params.hidden.weight.data(),
        &d_output_in,
        hw,
        hb,
        Some(&mut d_hidden_in),
    );
    let d_concat: Vec<f64> = d_hidden_in.iter().zip(&trace.dropout_scale).map(|(g, s)| g * s).collect();

    let (np, nw, nc) = (spec.phone.dense, spec.watch.dense, spec.context_dense);
    let d_phone = &d_concat[..np];
    let d_watch = &d_concat[np..np + nw];
    let d_context_out = &d_concat[np + nw..np + nw + nc];
    let d_infusion = trace.has_infusion.then(|| d_concat[np + nw + nc..].to_vec());

    let phone_in = branch_backward(&params.phone, &spec.phone, &trace.phone, d_phone, &mut grads.phone, options.inputs);
    let watch_in = branch_backward(&params.watch, &spec.watch, &trace.watch, d_watch, &mut grads.watch, options.inputs);

    let mut d_context_pre = d_context_out.to_vec();
    relu_backward(&trace.context_pre, &mut d_context_pre);
    let mut d_context_in = vec![0.0; spec.context_width];
    let (cw, cb) = dense_grads(&mut grads.context);
    dense_backward(
        &trace.context_in,
        params.context.weight.data(),
        &d_context_pre,
        cw,
        cb,
        options.inputs.then_some(d_context_in.as_mut_slice()),
    );

    Ok(options.inputs.then(|| InputGradients {
        phone: Tensor::new(vec![spec.phone.channels, spec.phone.window], phone_in.unwrap_or_default())
            .expect("phone gradient shape"),
        watch: Tensor::new(vec![spec.watch.channels, spec.watch.window], watch_in.unwrap_or_default())
            .expect("watch gradient shape"),
        context: d_context_in,
        infusion: d_infusion,
    }))
}

fn dense_grads(d: &mut Dense) -> (&mut [f64], &mut [f64]) {
    (d.weight.data_mut(), d.bias.data_mut())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(infusion: bool) -> NetworkSpec {
        let branch = |kernels: Vec<usize>| BranchSpec {
            channels: 2,
            window: 12,
            filters: vec![3, 2],
            kernels,
            pool: 2,
            dense: 4,
        };
        NetworkSpec {
            phone: branch(vec![3, 2]),
            watch: branch(vec![2, 2]),
            context_width: 5,
            context_dense: 3,
            dropout: 0.1,
            hidden: 6,
            activities: 3,
            infusion,
        }
    }

    fn inputs(spec: &NetworkSpec, seed: u64) -> (Tensor, Tensor, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |b: &BranchSpec| {
            Tensor::new(
                vec![b.channels, b.window],
                (0..b.channels * b.window).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let phone = t(&spec.phone);
        let watch = t(&spec.watch);
        (phone, watch, vec![1.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 1.0])
    }

    #[test]
    fn reference_parameter_count_matches_closed_form() {
        let spec = NetworkSpec::reference(6, 6, 256, 30, 14);
        let phone = (24 * 6 * 32 + 32) + (16 * 32 * 64 + 64) + (8 * 64 * 96 + 96) + (96 * 128 + 128);
        let watch = (16 * 6 * 32 + 32) + (8 * 32 * 64 + 64) + (4 * 64 * 96 + 96) + (96 * 128 + 128);
        let context = 30 * 8 + 8;
        let trunk = (264 * 256 + 256) + (256 * 14 + 14);
        assert_eq!(spec.parameter_count(), phone + watch + context + trunk);
        assert_eq!(spec.parameter_count(), 227_462);
        assert_eq!(build_network(&spec, 1).unwrap().count(), spec.parameter_count());
        let widened = spec.clone().with_infusion(true);
        assert_eq!(widened.parameter_count() - spec.parameter_count(), 14 * 256);
    }

    #[test]
    fn short_window_names_failing_layer() {
        let spec = NetworkSpec::reference(6, 6, 20, 4, 3);
        match build_network(&spec, 0) {
            Err(NetworkError::InvalidSpec { layer, .. }) => assert_eq!(layer, "phone.conv1"),
            other => panic!("{other:?}"),
        }
        // 100 samples clear the first phone kernel but not the chain
        match NetworkSpec::reference(6, 6, 100, 4, 3).validate() {
            Err(NetworkError::InvalidSpec { layer, .. }) => assert_eq!(layer, "phone.conv3"),
            other => panic!("{other:?}"),
        }
        assert!(NetworkSpec::reference(6, 6, 211, 4, 3).validate().is_ok());
        assert!(NetworkSpec::reference(6, 6, 210, 4, 3).validate().is_err());
    }

    #[test]
    fn invalid_scalars() {
        let mut s = tiny_spec(false);
        s.activities = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(false);
        s.dropout = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny_spec(false);
        let a = build_network(&spec, 42).unwrap();
        let b = build_network(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_network(&spec, 43).unwrap());
        assert!(a.output.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_output_and_inference_determinism() {
        let spec = tiny_spec(true);
        let params = build_network(&spec, 3).unwrap();
        let (phone, watch, ctx, fs) = inputs(&spec, 9);
        let input = NetworkInput {
            phone: &phone,
            watch: &watch,
            context: &ctx,
            infusion: Some(&fs),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p1, _) = forward(&params, &spec, &input, Mode::Infer, &mut rng).unwrap();
        let (p2, _) = forward(&params, &spec, &input, Mode::Infer, &mut rng).unwrap();
        assert_eq!(p1, p2);
        assert!((p1.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p1.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let spec = tiny_spec(false);
        let params = Parameters::zeros(&spec);
        let (phone, watch, ctx, _) = inputs(&spec, 1);
        let input = NetworkInput {
            phone: &phone,
            watch: &watch,
            context: &ctx,
            infusion: None,
        };
        let (p, _) = forward(&params, &spec, &input, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn shape_errors_name_the_tensor() {
        let spec = tiny_spec(false);
        let params = build_network(&spec, 0).unwrap();
        let (phone, watch, ctx, fs) = inputs(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = Tensor::zeros(vec![2, 11]);
        let err = forward(
            &params,
            &spec,
            &NetworkInput { phone: &phone, watch: &bad, context: &ctx, infusion: None },
            Mode::Infer,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::Shape { ref tensor, .. } if tensor == "watch"));
        let err = forward(
            &params,
            &spec,
            &NetworkInput { phone: &phone, watch: &watch, context: &ctx, infusion: Some(&fs) },
            Mode::Infer,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::Shape { ref tensor, .. } if tensor == "infusion"));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let spec = tiny_spec(false);
        let params = build_network(&spec, 5).unwrap();
        let (phone, watch, ctx, _) = inputs(&spec, 2);
        let input = NetworkInput { phone: &phone, watch: &watch, context: &ctx, infusion: None };
        let (_, trace) = forward(&params, &spec, &input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = backward(&params, &spec, &trace, &[0.0; 3], BackwardOptions::default()).unwrap();
        assert!(g.params.named_tensors().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_and_inference_traces_are_rejected() {
        let spec = tiny_spec(false);
        let mut params = build_network(&spec, 5).unwrap();
        let (phone, watch, ctx, _) = inputs(&spec, 2);
        let input = NetworkInput { phone: &phone, watch: &watch, context: &ctx, infusion: None };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, infer) = forward(&params, &spec, &input, Mode::Infer, &mut rng).unwrap();
        assert_eq!(
            backward(&params, &spec, &infer, &[1.0, 0.0, 0.0], BackwardOptions::default()).unwrap_err(),
            NetworkError::InferenceTrace
        );
        let (_, trace) = forward(&params, &spec, &input, Mode::Train, &mut rng).unwrap();
        params.scale(1.0);
        assert_eq!(
            backward(&params, &spec, &trace, &[1.0, 0.0, 0.0], BackwardOptions::default()).unwrap_err(),
            NetworkError::StaleTrace
        );
    }

    #[test]
    fn infusion_gradient_is_reported() {
        let spec = tiny_spec(true);
        let params = build_network(&spec, 8).unwrap();
        let (phone, watch, ctx, fs) = inputs(&spec, 4);
        let input = NetworkInput { phone: &phone, watch: &watch, context: &ctx, infusion: Some(&fs) };
        let (_, trace) = forward(&params, &spec, &input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = backward(&params, &spec, &trace, &[1.0, -0.5, 0.2], BackwardOptions { inputs: true }).unwrap();
        let inf = g.inputs.unwrap().infusion.unwrap();
        assert_eq!(inf.len(), 3);
        assert!(inf.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_rate_and_rescaling() {
        let mut spec = tiny_spec(false);
        spec.dropout = 0.1;
        let params = build_network(&spec, 5).unwrap();
        let (phone, watch, ctx, _) = inputs(&spec, 2);
        let input = NetworkInput { phone: &phone, watch: &watch, context: &ctx, infusion: None };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut zeros, mut total) = (0usize, 0usize);
        while total < 100_000 {
            let (_, trace) = forward(&params, &spec, &input, Mode::Train, &mut rng).unwrap();
            for &s in trace.dropout_scale() {
                total += 1;
                if s == 0.0 {
                    zeros += 1;
                } else {
                    assert!((s - 1.0 / 0.9).abs() < 1e-15);
                }
            }
        }
        let rate = zeros as f64 / total as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
    }
}
