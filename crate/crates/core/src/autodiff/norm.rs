//! Batch and group normalization kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Mean and biased variance of a slice set, shifted by the first element so
/// that constant data yields exactly `(value, 0)`.
fn moments<'a>(mut slices: impl Iterator<Item = &'a [f64]> + Clone) -> (f64, f64) {
    let shift = slices.clone().next().and_then(|s| s.first().copied()).unwrap_or(0.0);
    let mut count = 0usize;
    let mut acc = 0.0;
    for s in slices.clone() {
        count += s.len();
        acc += s.iter().map(|x| x - shift).sum::<f64>();
    }
    let mean = shift + acc / count as f64;
    let mut sq = 0.0;
    for s in slices.by_ref() {
        sq += s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    (mean, sq / count as f64)
}

pub fn channel_stats(input: &Tensor) -> Result<ChannelStats> {
    let (n, c, h, w) = input.dims4("channel_stats")?;
    let hw = h * w;
    let data = input.data();
    let (mut mean, mut var) = (Vec::with_capacity(c), Vec::with_capacity(c));
    for ch in 0..c {
        let (m, v) = moments((0..n).map(|s| &data[(s * c + ch) * hw..(s * c + ch + 1) * hw]));
        mean.push(m);
        var.push(v);
    }
    Ok(ChannelStats { mean, var })
}

/// Saved state for the backward pass of batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Statistics came from the batch itself (gradient flows through them).
    pub batch_stats: bool,
}

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "{c} channels but gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Normalizes with `fixed` statistics, or with the batch's own statistics when
/// `fixed` is `None`. Returns the output, the backward payload and the batch
/// statistics that were used (when computed).
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    fixed: Option<&ChannelStats>,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved, Option<ChannelStats>)> {
    let (n, c, h, w) = input.dims4("batchnorm2d")?;
    check_affine("batchnorm2d", c, gamma, beta)?;
    let computed = match fixed {
        Some(s) => {
            if s.mean.len() != c || s.var.len() != c {
                return Err(Error::shape("batchnorm2d", "statistics channel count"));
            }
            None
        }
        None => Some(channel_stats(input)?),
    };
    let stats = fixed.or(computed.as_ref()).expect("stats present");
    let hw = h * w;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let (m, is, ga, be) = (stats.mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let z = (input.data()[i] - m) * is;
                xhat[i] = z;
                out[i] = ga * z + be;
            }
        }
    }
    let out = Tensor::from_parts(input.shape().to_vec(), out).ensure_finite("batchnorm2d")?;
    Ok((
        out,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_stats: fixed.is_none(),
        },
        computed,
    ))
}

pub struct AffineGrads {
    pub input: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

pub fn batch_norm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    saved: &BatchNormSaved,
    need_input: bool,
    need_affine: bool,
) -> Result<AffineGrads> {
    let (n, c, h, w) = grad_out.dims4("batchnorm2d backward")?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * saved.xhat[i];
            }
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![0.0; dy.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let scale = gamma.data()[ch] * saved.inv_std[ch];
                if saved.batch_stats {
                    let (mean_dy, mean_dy_xhat) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    for i in base..base + hw {
                        dx[i] = scale * (dy[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
                    }
                } else {
                    for i in base..base + hw {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }
        Tensor::from_parts(grad_out.shape().to_vec(), dx)
    });
    Ok(AffineGrads {
        input: input.map(|t| t.ensure_finite("batchnorm2d backward")).transpose()?,
        gamma: need_affine.then(|| Tensor::from_parts(vec![c], sum_dy_xhat)),
        beta: need_affine.then(|| Tensor::from_parts(vec![c], sum_dy)),
    })
}

#[derive(Clone, Debug)]
pub struct GroupNormSaved {
    pub groups: usize,
    pub xhat: Vec<f64>,
    /// One entry per (sample, group).
    pub inv_std: Vec<f64>,
}

pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupNormSaved)> {
    let (n, c, h, w) = input.dims4("groupnorm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "groupnorm: {c} channels not divisible into {groups} groups"
        )));
    }
    check_affine("groupnorm", c, gamma, beta)?;
    let hw = h * w;
    let per_group = c / groups;
    let slice = per_group * hw;
    let data = input.data();
    let mut xhat = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let base = (s * c + g * per_group) * hw;
            let (mean, var) = moments(std::iter::once(&data[base..base + slice]));
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in base..base + slice {
                let ch = (i / hw) % c;
                let z = (data[i] - mean) * is;
                xhat[i] = z;
                out[i] = gamma.data()[ch] * z + beta.data()[ch];
            }
        }
    }
    let out = Tensor::from_parts(input.shape().to_vec(), out).ensure_finite("groupnorm")?;
    Ok((out, GroupNormSaved { groups, xhat, inv_std }))
}

pub fn group_norm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    saved: &GroupNormSaved,
    need_input: bool,
    need_affine: bool,
) -> Result<AffineGrads> {
    let (n, c, h, w) = grad_out.dims4("groupnorm backward")?;
    let hw = h * w;
    let per_group = c / saved.groups;
    let slice = per_group * hw;
    let dy = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&g, &z)) in dy.iter().zip(&saved.xhat).enumerate() {
        let ch = (i / hw) % c;
        dgamma[ch] += g * z;
        dbeta[ch] += g;
    }
    let input = need_input.then(|| {
        let mut dx = vec![0.0; dy.len()];
        for s in 0..n {
            for g in 0..saved.groups {
                let base = (s * c + g * per_group) * hw;
                // gradient wrt xhat is dy * gamma[channel]
                let (mut mean_d, mut mean_dz) = (0.0, 0.0);
                for i in base..base + slice {
                    let d = dy[i] * gamma.data()[(i / hw) % c];
                    mean_d += d;
                    mean_dz += d * saved.xhat[i];
                }
                mean_d /= slice as f64;
                mean_dz /= slice as f64;
                let is = saved.inv_std[s * saved.groups + g];
                for i in base..base + slice {
                    let d = dy[i] * gamma.data()[(i / hw) % c];
                    dx[i] = is * (d - mean_d - saved.xhat[i] * mean_dz);
                }
            }
        }
        Tensor::from_parts(grad_out.shape().to_vec(), dx)
    });
    Ok(AffineGrads {
        input: input.map(|t| t.ensure_finite("groupnorm backward")).transpose()?,
        gamma: need_affine.then(|| Tensor::from_parts(vec![c], dgamma)),
        beta: need_affine.then(|| Tensor::from_parts(vec![c], dbeta)),
    })
}
