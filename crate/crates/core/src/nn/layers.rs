//! Slice-level kernels for the layers the network uses.
//!
//! Sequences are stored channel-major: `x[c * len + t]`.

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid, stride-1 1-D convolution. `weight` is `[filters][channels][kernel]`.
pub fn conv1d_forward(
    input: &[f64],
    channels: usize,
    len: usize,
    weight: &[f64],
    bias: &[f64],
    kernel: usize,
) -> Vec<f64> {
    let filters = bias.len();
    let out_len = len + 1 - kernel;
    let mut out = vec![0.0; filters * out_len];
    for f in 0..filters {
        let row = &mut out[f * out_len..(f + 1) * out_len];
        row.iter_mut().for_each(|v| *v = bias[f]);
        for c in 0..channels {
            let x = &input[c * len..(c + 1) * len];
            let w = &weight[(f * channels + c) * kernel..(f * channels + c + 1) * kernel];
            for (k, &wk) in w.iter().enumerate() {
                axpy(row, wk, &x[k..k + out_len]);
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    input: &[f64],
    channels: usize,
    len: usize,
    weight: &[f64],
    kernel: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let filters = d_bias.len();
    let out_len = len + 1 - kernel;
    for f in 0..filters {
        let g = &d_out[f * out_len..(f + 1) * out_len];
        d_bias[f] += g.iter().sum::<f64>();
        for c in 0..channels {
            let x = &input[c * len..(c + 1) * len];
            let base = (f * channels + c) * kernel;
            for k in 0..kernel {
                d_weight[base + k] += dot(g, &x[k..k + out_len]);
            }
        }
    }
    if let Some(d_in) = d_input {
        for f in 0..filters {
            let g = &d_out[f * out_len..(f + 1) * out_len];
            for c in 0..channels {
                let base = (f * channels + c) * kernel;
                let dx = &mut d_in[c * len..(c + 1) * len];
                for k in 0..kernel {
                    axpy(&mut dx[k..k + out_len], weight[base + k], g);
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the pre-activation was not positive.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Non-overlapping max pooling (stride = size, trailing remainder dropped).
/// Returns the pooled values and the flat input index of each maximum; ties
/// go to the lowest index.
pub fn maxpool_forward(input: &[f64], channels: usize, len: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / size;
    let mut out = Vec::with_capacity(channels * out_len);
    let mut arg = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        for o in 0..out_len {
            let start = c * len + o * size;
            let mut best = start;
            for i in start + 1..start + size {
                if input[i] > input[best] {
                    best = i;
                }
            }
            out.push(input[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Routes each pooled gradient to its argmax position.
pub fn pool_backward(d_out: &[f64], argmax: &[usize], d_input: &mut [f64]) {
    for (&g, &i) in d_out.iter().zip(argmax) {
        d_input[i] += g;
    }
}

/// Maximum over time per channel (lowest index on ties).
pub fn global_maxpool_forward(input: &[f64], channels: usize, len: usize) -> (Vec<f64>, Vec<usize>) {
    maxpool_forward(input, channels, len, len)
}

/// `y = W x + b`, `weight` is `[out][in]`.
pub fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weight[o * n_in..(o + 1) * n_in], input))
        .collect()
}

pub fn dense_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        if g != 0.0 {
            axpy(&mut d_weight[o * n_in..(o + 1) * n_in], g, input);
        }
    }
    if let Some(d_in) = d_input {
        for (o, &g) in d_out.iter().enumerate() {
            if g != 0.0 {
                axpy(d_in, g, &weight[o * n_in..(o + 1) * n_in]);
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, d_probs);
    probs.iter().zip(d_probs).map(|(&p, &g)| p * (g - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        // 2 channels, len 4, 1 filter, kernel 2
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0];
        let w = [0.5, -1.0, 2.0, 1.0];
        let out = conv1d_forward(&x, 2, 4, &w, &[0.1], 2);
        let expected: Vec<f64> = (0..3)
            .map(|t| 0.1 + 0.5 * x[t] - x[t + 1] + 2.0 * x[4 + t] + x[4 + t + 1])
            .collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let x = [3.0, 3.0, 1.0, 3.0, 0.0, 5.0, 5.0, 5.0];
        let (out, arg) = maxpool_forward(&x, 1, 8, 4);
        assert_eq!(out, vec![3.0, 5.0]);
        assert_eq!(arg, vec![0, 5]);
        let mut d = vec![0.0; 8];
        pool_backward(&[1.0, 2.0], &arg, &mut d);
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_remainder() {
        let (out, _) = maxpool_forward(&[1.0, 2.0, 3.0, 4.0, 9.0], 1, 5, 2);
        assert_eq!(out, vec![2.0, 4.0]);
    }

    #[test]
    fn global_max_tie() {
        let (out, arg) = global_maxpool_forward(&[1.0, 7.0, 7.0, 2.0, 2.0, 2.0], 2, 3);
        assert_eq!(out, vec![7.0, 2.0]);
        assert_eq!(arg, vec![1, 3]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let p = softmax(&[0.0; 5]);
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
    }
}
