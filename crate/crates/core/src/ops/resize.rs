use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Interpolation taps along one axis: `(i0, i1, weight of i1)`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            // half-pixel centers (align_corners = false), clamped at the low edge
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("bilinear_upsample")?;
    if out_h < h || out_w < w {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("output {out_h}x{out_w} is smaller than input {h}x{w}"),
        ));
    }
    Ok((b, c, h, w))
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_upsample<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = check(x, out_h, out_w)?;
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = vec![T::zero(); b * c * out_h * out_w];
    for (plane, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(out_h * out_w))
    {
        for (oi, &(r0, r1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (oj, &(c0, c1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = plane[r0 * w + c0] * (T::one() - fx) + plane[r0 * w + c1] * fx;
                let bot = plane[r1 * w + c0] * (T::one() - fx) + plane[r1 * w + c1] * fx;
                dst[oi * out_w + oj] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[b, c, out_h, out_w], out)
}

pub fn bilinear_upsample_backward<T: Float>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, out_h, out_w) = dy.dims4("bilinear_upsample_backward")?;
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut dx = vec![T::zero(); b * c * h * w];
    for (src, plane) in dy
        .data()
        .chunks_exact(out_h * out_w)
        .zip(dx.chunks_exact_mut(h * w))
    {
        for (oi, &(r0, r1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (oj, &(c0, c1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = src[oi * out_w + oj];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                plane[r0 * w + c0] += gt * (T::one() - fx);
                plane[r0 * w + c1] += gt * fx;
                plane[r1 * w + c0] += gb * (T::one() - fx);
                plane[r1 * w + c1] += gb * fx;
            }
        }
    }
    Tensor::new(x_shape, dx)
}
