//! Elementwise, pooling, dense and loss kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Non-overlapping `k × k` average pooling.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("avgpool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "avgpool2d",
            format!("{h}x{w} not divisible by window {k}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[(y / k) * ow + x / k] += src[y * w + x];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2d_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let planes = input_shape[0] * input_shape[1];
    let scale = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * ow + x / k] * scale;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut dx = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat(g / hw as f64).take(hw));
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// `input [N, D] · weightᵀ [D, K] + bias [K]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = input.dims2("linear")?;
    let (k, wd) = weight.dims2("linear")?;
    if wd != d || bias.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    super::conv::gemm(n, d, k, input.data(), false, weight.data(), true, 1.0, &mut out);
    Tensor::from_parts(vec![n, k], out).ensure_finite("linear")
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let mut dx = vec![0.0; n * d];
    super::conv::gemm(n, k, d, grad_out.data(), false, weight.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; k * d];
    super::conv::gemm(k, n, d, grad_out.data(), true, input.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; k];
    for row in grad_out.data().chunks(k) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (
        Tensor::from_parts(vec![n, d], dx),
        Tensor::from_parts(vec![k, d], dw),
        Tensor::from_parts(vec![k], db),
    )
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &z in row {
            let e = (z - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|p| *p /= total);
    }
    Tensor::from_parts(logits.shape().to_vec(), out).ensure_finite("softmax")
}

pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let k = probs.shape()[1];
    let mut dz = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(grad_out.data().chunks(k)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        dz.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor::from_parts(probs.shape().to_vec(), dz)
}

const DISTRIBUTION_TOL: f64 = 1e-6;

/// Shannon entropy (nats) of each row of a probability matrix, with
/// `0 · ln 0 = 0`.
pub fn entropy(probabilities: &Tensor) -> Result<Tensor> {
    let (_, k) = probabilities.dims2("entropy")?;
    let mut out = Vec::with_capacity(probabilities.shape()[0]);
    for (i, row) in probabilities.data().chunks(k).enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidArgument(format!(
                "entropy: row {i} is not a probability distribution (sum {total})"
            )));
        }
        out.push(-row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>());
    }
    Ok(Tensor::from_parts(vec![out.len()], out))
}

/// Entropy of `softmax(logits)` per row, computed as `lse - Σ p z` so that
/// saturated rows stay finite. Returns `(entropies, probabilities)`.
pub fn softmax_entropy(logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, k) = logits.dims2("softmax_entropy")?;
    let probs = softmax(logits)?;
    let mut out = Vec::with_capacity(logits.shape()[0]);
    for (z, p) in logits.data().chunks(k).zip(probs.data().chunks(k)) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let h: f64 = p
            .iter()
            .zip(z)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &zi)| pi * (lse - zi))
            .sum();
        out.push(h.max(0.0));
    }
    let h = Tensor::from_parts(vec![out.len()], out).ensure_finite("softmax_entropy")?;
    Ok((h, probs))
}

/// `dH_i/dz_ij = p_ij (Σ_k p_ik z_ik − z_ij)`, scaled by the upstream gradient.
pub fn softmax_entropy_backward(logits: &Tensor, probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut dz = Vec::with_capacity(logits.len());
    for ((z, p), &g) in logits
        .data()
        .chunks(k)
        .zip(probs.data().chunks(k))
        .zip(grad_out.data())
    {
        let mean_z: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
        dz.extend(p.iter().zip(z).map(|(pi, zi)| g * pi * (mean_z - zi)));
    }
    Tensor::from_parts(logits.shape().to_vec(), dz)
}

/// Mean cross-entropy of `logits` against integer labels. Returns
/// `(loss, probabilities)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows, {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for (z, &label) in logits.data().chunks(k).zip(labels) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_out: f64) -> Tensor {
    let k = probs.shape()[1];
    let n = labels.len() as f64;
    let mut dz = probs.data().to_vec();
    for (row, &label) in dz.chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= grad_out / n);
    }
    Tensor::from_parts(probs.shape().to_vec(), dz)
}
