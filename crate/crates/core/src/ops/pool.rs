use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// Spatial mean per (batch, channel): `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("global_avg_pool")?;
    let inv = T::of(1.0 / (h * w) as f64);
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[b, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Float>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::of(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(dy.len() * hw);
    for &d in dy.data() {
        dx.extend(std::iter::repeat_n(d * inv, hw));
    }
    Tensor::new(x_shape, dx)
}

/// Channel mean (plane 0) and channel max (plane 1) at every site.
pub fn channel_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("channel_pool")?;
    let hw = h * w;
    let inv = T::of(1.0 / c as f64);
    let mut out = vec![T::zero(); b * 2 * hw];
    for bi in 0..b {
        let xb = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        let (mean, max) = out[bi * 2 * hw..(bi + 1) * 2 * hw].split_at_mut(hw);
        max.copy_from_slice(&xb[..hw]);
        mean.copy_from_slice(&xb[..hw]);
        for plane in xb.chunks_exact(hw).skip(1) {
            for s in 0..hw {
                mean[s] += plane[s];
                max[s] = max[s].max(plane[s]);
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
    }
    Tensor::new(&[b, 2, h, w], out)
}

/// Mean gradient spreads evenly; max gradient goes to the first arg-max channel.
pub fn channel_pool_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("channel_pool_backward")?;
    let hw = h * w;
    let inv = T::of(1.0 / c as f64);
    let mut dx = vec![T::zero(); x.len()];
    for bi in 0..b {
        let xb = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        let dmean = &dy.data()[bi * 2 * hw..bi * 2 * hw + hw];
        let dmax = &dy.data()[bi * 2 * hw + hw..(bi + 1) * 2 * hw];
        for s in 0..hw {
            let mut arg = 0;
            for ch in 1..c {
                if xb[ch * hw + s] > xb[arg * hw + s] {
                    arg = ch;
                }
            }
            for ch in 0..c {
                dx[(bi * c + ch) * hw + s] = dmean[s] * inv;
            }
            dx[(bi * c + arg) * hw + s] += dmax[s];
        }
    }
    Tensor::new(x.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_examples() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.0]);
        let c = Tensor::<f64>::full(&[2, 3, 3, 3], 1.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn channel_pool_examples() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(channel_pool(&x).unwrap().data(), &[2.0, 3.0]);
        let single = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| i as f64 - 1.5);
        let p = channel_pool(&single).unwrap();
        assert_eq!(&p.data()[..4], single.data());
        assert_eq!(&p.data()[4..], single.data());
    }

    #[test]
    fn channel_pool_site_loop_oracle() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 3, 4], |i| ((i * 7919) % 97) as f64 / 13.0 - 3.0);
        let p = channel_pool(&x).unwrap();
        for b in 0..2 {
            for s in 0..12 {
                let vals: Vec<f64> = (0..5).map(|c| x.data()[(b * 5 + c) * 12 + s]).collect();
                let mean = vals.iter().sum::<f64>() / 5.0;
                let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                assert!((p.data()[b * 24 + s] - mean).abs() < 1e-12);
                assert_eq!(p.data()[b * 24 + 12 + s], max);
            }
        }
    }
}
