//! Channel layer norm and batch norm over BCHW tensors.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved normalized activations and inverse standard deviations.
#[derive(Clone, Debug)]
pub struct NormCache<T: Float> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

fn check_affine<T: Float>(op: &'static str, gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "affine shapes {:?}/{:?}, expected [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Normalizes over the channel axis independently at every (batch, site).
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, h, w) = x.dims4("layer_norm")?;
    check_affine("layer_norm", gamma, beta, c)?;
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd_all = Vec::with_capacity(b * hw);
    let mut mean = vec![T::zero(); hw];
    let mut var = vec![T::zero(); hw];
    for bi in 0..b {
        let xb = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        mean.fill(T::zero());
        var.fill(T::zero());
        for plane in xb.chunks_exact(hw) {
            for (m, &v) in mean.iter_mut().zip(plane) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for plane in xb.chunks_exact(hw) {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(plane) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| (s * inv_c + eps).sqrt().recip()).collect();
        for ch in 0..c {
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            let off = (bi * c + ch) * hw;
            for s in 0..hw {
                let n = (x.data()[off + s] - mean[s]) * rstd[s];
                xhat[off + s] = n;
                y[off + s] = n * g + be;
            }
        }
        rstd_all.extend(rstd);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd: rstd_all,
        },
    ))
}

/// Cotangents `(dx, dgamma, dbeta)` of [`layer_norm`].
pub fn layer_norm_backward<T: Float>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = cache.xhat.dims4("layer_norm_backward")?;
    dy.expect_same_shape(&cache.xhat, "layer_norm_backward")?;
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut mean_g = vec![T::zero(); hw];
    let mut mean_gx = vec![T::zero(); hw];
    let xh = cache.xhat.data();
    for bi in 0..b {
        mean_g.fill(T::zero());
        mean_gx.fill(T::zero());
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let g = gamma.data()[ch];
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for s in 0..hw {
                let d = dy.data()[off + s];
                sg += d * xh[off + s];
                sb += d;
                let dn = d * g;
                mean_g[s] += dn;
                mean_gx[s] += dn * xh[off + s];
            }
            dgamma[ch] += sg;
            dbeta[ch] += sb;
        }
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let g = gamma.data()[ch];
            for s in 0..hw {
                let dn = dy.data()[off + s] * g;
                dx[off + s] = cache.rstd[bi * hw + s]
                    * (dn - mean_g[s] * inv_c - xh[off + s] * mean_gx[s] * inv_c);
            }
        }
    }
    Ok((
        Tensor::new(dy.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages tracked by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Number of training-mode updates folded in so far.
    pub updates: u64,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            updates: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T: Float> {
    pub y: Tensor<T>,
    pub cache: NormCache<T>,
    /// Updated running statistics; `Some` only in training mode.
    pub running: Option<RunningStats<T>>,
}

/// Per-channel normalization over batch and spatial axes.
///
/// Training mode normalizes with biased batch statistics and folds the
/// unbiased variance into the running estimate; eval mode uses the running
/// estimate and fails if it has never been updated. A `momentum` of `None`
/// folds batches in as a cumulative average.
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: Mode,
    eps: f64,
    momentum: Option<f64>,
) -> Result<BatchNormOutput<T>> {
    let (b, c, h, w) = x.dims4("batch_norm")?;
    check_affine("batch_norm", gamma, beta, c)?;
    if running.mean.shape() != [c] || running.var.shape() != [c] {
        return Err(Error::shape("batch_norm", "running statistics do not match channels"));
    }
    let hw = h * w;
    let count = b * hw;
    let (mean, var, next) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += x.data()[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let m = s.as_f64() / count as f64;
                let mut q = T::zero();
                let mt = T::of(m);
                for bi in 0..b {
                    for &v in &x.data()[(bi * c + ch) * hw..][..hw] {
                        q += (v - mt) * (v - mt);
                    }
                }
                mean[ch] = m;
                var[ch] = q.as_f64() / count as f64;
            }
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let momentum = momentum.unwrap_or(1.0 / (running.updates + 1) as f64);
            let next = RunningStats {
                mean: Tensor::from_fn(&[c], |i| {
                    T::of((1.0 - momentum) * running.mean.data()[i].as_f64() + momentum * mean[i])
                }),
                var: Tensor::from_fn(&[c], |i| {
                    T::of(
                        (1.0 - momentum) * running.var.data()[i].as_f64()
                            + momentum * var[i] * unbias,
                    )
                }),
                updates: running.updates + 1,
            };
            (mean, var, Some(next))
        }
        Mode::Eval => {
            if running.updates == 0 {
                return Err(Error::UninitializedStats);
            }
            let mean = running.mean.data().iter().map(|v| v.as_f64()).collect();
            let var = running.var.data().iter().map(|v| v.as_f64()).collect();
            (mean, var, None)
        }
    };
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let rstd: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (m, r) = (T::of(mean[ch]), rstd[ch]);
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for s in off..off + hw {
                let n = (x.data()[s] - m) * r;
                xhat[s] = n;
                y[s] = n * g + be;
            }
        }
    }
    Ok(BatchNormOutput {
        y: Tensor::new(x.shape(), y)?,
        cache: NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
        running: next,
    })
}

/// Cotangents `(dx, dgamma, dbeta)` of [`batch_norm`] in the given mode.
pub fn batch_norm_backward<T: Float>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = cache.xhat.dims4("batch_norm_backward")?;
    dy.expect_same_shape(&cache.xhat, "batch_norm_backward")?;
    let hw = h * w;
    let inv_n = T::of(1.0 / (b * hw) as f64);
    let xh = cache.xhat.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for s in off..off + hw {
                sg += dy.data()[s] * xh[s];
                sb += dy.data()[s];
            }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
        let g = gamma.data()[ch];
        let r = cache.rstd[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for s in off..off + hw {
                dx[s] = match mode {
                    // Gradients of the batch mean and variance flow back too.
                    Mode::Train => g * r * (dy.data()[s] - sb * inv_n - xh[s] * sg * inv_n),
                    Mode::Eval => g * r * dy.data()[s],
                };
            }
        }
    }
    Ok((
        Tensor::new(dy.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}
