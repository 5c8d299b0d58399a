//! Direct (im2col + GEMM) convolutions and their reverse-mode derivatives.
//!
//! All convolutions are cross-correlations in BCHW layout. Sums are evaluated
//! in a fixed order so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{Float, Tensor};

const NONE: usize = usize::MAX;

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zero,
    Circular,
    Reflect,
}

impl PadMode {
    pub fn name(self) -> &'static str {
        match self {
            PadMode::Zero => "zero",
            PadMode::Circular => "circular",
            PadMode::Reflect => "reflect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(PadMode::Zero),
            "circular" => Some(PadMode::Circular),
            "reflect" => Some(PadMode::Reflect),
            _ => None,
        }
    }

    fn source(self, p: isize, n: usize) -> usize {
        let n_i = n as isize;
        match self {
            PadMode::Zero => {
                if (0..n_i).contains(&p) {
                    p as usize
                } else {
                    NONE
                }
            }
            PadMode::Circular => p.rem_euclid(n_i) as usize,
            PadMode::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n_i - 1);
                let q = p.rem_euclid(period);
                (if q < n_i { q } else { period - q }) as usize
            }
        }
    }
}

pub fn conv_out_extent(
    op: &'static str,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    if n + 2 * pad < k {
        return Err(Error::shape(
            op,
            format!("kernel extent {k} exceeds padded input extent {}", n + 2 * pad),
        ));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// `table[o * k + u]` is the source index read by output `o` through tap `u`.
fn tap_table(out: usize, k: usize, stride: usize, pad: usize, n: usize, mode: PadMode) -> Vec<usize> {
    let mut table = Vec::with_capacity(out * k);
    for o in 0..out {
        for u in 0..k {
            let p = (o * stride + u) as isize - pad as isize;
            table.push(mode.source(p, n));
        }
    }
    table
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn conv<T: Float>(
        op: &'static str,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin, h, w) = x.dims4(op)?;
        let (cout, wcin, kh, kw) = weight.dims4(op)?;
        if wcin != cin {
            return Err(Error::shape(
                op,
                format!("input channels {cin} != weight input channels {wcin}"),
            ));
        }
        let ho = conv_out_extent(op, h, kh, stride, pad)?;
        let wo = conv_out_extent(op, w, kw, stride, pad)?;
        Ok(Geom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn check_bias<T: Float>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.len() != channels || bias.rank() != 1 {
        return Err(Error::shape(
            op,
            format!("bias shape {:?}, expected [{channels}]", bias.shape()),
        ));
    }
    Ok(())
}

fn im2col<T: Float>(x: &[T], g: &Geom, rows: &[usize], cols_t: &[usize], out: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let dst = &mut out[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let r = rows[oi * g.kh + u];
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if r == NONE {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[r * g.w..(r + 1) * g.w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let s = cols_t[oj * g.kw + v];
                        *d = if s == NONE { T::zero() } else { src[s] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &Geom, rows: &[usize], cols_t: &[usize], dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let r = rows[oi * g.kh + u];
                    if r == NONE {
                        continue;
                    }
                    let line = &src[oi * g.wo..(oi + 1) * g.wo];
                    let dst = &mut plane[r * g.w..(r + 1) * g.w];
                    for (oj, &d) in line.iter().enumerate() {
                        let s = cols_t[oj * g.kw + v];
                        if s != NONE {
                            dst[s] += d;
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution with zero padding.
///
/// `weight` is `[out, in, kh, kw]`, `bias` is `[out]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geom::conv("conv2d", x, weight, stride, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * hw_out];
    let rows = tap_table(g.ho, g.kh, stride, padding, g.h, PadMode::Zero);
    let cols_t = tap_table(g.wo, g.kw, stride, padding, g.w, PadMode::Zero);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * hw_out]
    };
    let item_in = g.cin * g.h * g.w;
    for b in 0..g.batch {
        let xb = &x.data()[b * item_in..(b + 1) * item_in];
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &rows, &cols_t, &mut cols);
            &cols
        };
        let yb = &mut out[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        for (o, line) in yb.chunks_exact_mut(hw_out).enumerate() {
            line.fill(bias.data()[o]);
        }
        gemm(
            T::one(),
            MatRef::new(weight.data(), g.cout, g.patch()),
            MatRef::new(patches, g.patch(), hw_out),
            T::one(),
            MatMut::new(yb, g.cout, hw_out),
        );
    }
    Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)
}

/// Cotangents `(dx, dweight, dbias)` of [`conv2d`].
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Geom::conv("conv2d_backward", x, weight, stride, padding)?;
    if dy.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "cotangent shape {:?}, expected {:?}",
                dy.shape(),
                [g.batch, g.cout, g.ho, g.wo]
            ),
        ));
    }
    let hw_out = g.ho * g.wo;
    let item_in = g.cin * g.h * g.w;
    let rows = tap_table(g.ho, g.kh, stride, padding, g.h, PadMode::Zero);
    let cols_t = tap_table(g.wo, g.kw, stride, padding, g.w, PadMode::Zero);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); g.patch() * hw_out];
    let mut dcols = vec![T::zero(); g.patch() * hw_out];
    for b in 0..g.batch {
        let xb = &x.data()[b * item_in..(b + 1) * item_in];
        let dyb = &dy.data()[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        for (o, line) in dyb.chunks_exact(hw_out).enumerate() {
            db[o] += line.iter().copied().sum::<T>();
        }
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &rows, &cols_t, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            MatRef::new(dyb, g.cout, hw_out),
            MatRef::new(patches, g.patch(), hw_out).t(),
            T::one(),
            MatMut::new(&mut dw, g.cout, g.patch()),
        );
        let dxb = &mut dx[b * item_in..(b + 1) * item_in];
        if g.is_pointwise() {
            gemm(
                T::one(),
                MatRef::new(weight.data(), g.cout, g.patch()).t(),
                MatRef::new(dyb, g.cout, hw_out),
                T::zero(),
                MatMut::new(dxb, g.patch(), hw_out),
            );
        } else {
            gemm(
                T::one(),
                MatRef::new(weight.data(), g.cout, g.patch()).t(),
                MatRef::new(dyb, g.cout, hw_out),
                T::zero(),
                MatMut::new(&mut dcols, g.patch(), hw_out),
            );
            col2im(&dcols, &g, &rows, &cols_t, dxb);
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.cout], db)?,
    ))
}

fn depthwise_geom<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    let (batch, c, h, w) = x.dims4(op)?;
    let (wc, one, kh, kw) = weight.dims4(op)?;
    if wc != c || one != 1 {
        return Err(Error::shape(
            op,
            format!(
                "weight shape {:?} must be [{c}, 1, k, k] for {c} input channels",
                weight.shape()
            ),
        ));
    }
    let ho = conv_out_extent(op, h, kh, stride, pad)?;
    let wo = conv_out_extent(op, w, kw, stride, pad)?;
    Ok(Geom {
        batch,
        cin: c,
        h,
        w,
        cout: c,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Per-channel convolution with zero padding. `weight` is `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    depthwise_conv2d_mode(x, weight, bias, stride, padding, PadMode::Zero)
}

pub fn depthwise_conv2d_mode<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Result<Tensor<T>> {
    let g = depthwise_geom("depthwise_conv2d", x, weight, stride, padding)?;
    check_bias("depthwise_conv2d", bias, g.cin)?;
    let rows = tap_table(g.ho, g.kh, stride, padding, g.h, mode);
    let cols_t = tap_table(g.wo, g.kw, stride, padding, g.w, mode);
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.batch * g.cin * plane_out];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xs = &x.data()[(b * g.cin + c) * plane_in..][..plane_in];
            let ys = &mut out[(b * g.cin + c) * plane_out..][..plane_out];
            ys.fill(bias.data()[c]);
            let wc = &weight.data()[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let wv = wc[u * g.kw + v];
                    for oi in 0..g.ho {
                        let r = rows[oi * g.kh + u];
                        if r == NONE {
                            continue;
                        }
                        let src = &xs[r * g.w..(r + 1) * g.w];
                        let dst = &mut ys[oi * g.wo..(oi + 1) * g.wo];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let s = cols_t[oj * g.kw + v];
                            if s != NONE {
                                *d += wv * src[s];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.cin, g.ho, g.wo], out)
}

/// Cotangents `(dx, dweight, dbias)` of [`depthwise_conv2d_mode`].
pub fn depthwise_conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = depthwise_geom("depthwise_conv2d_backward", x, weight, stride, padding)?;
    if dy.shape() != [g.batch, g.cin, g.ho, g.wo] {
        return Err(Error::shape(
            "depthwise_conv2d_backward",
            format!("cotangent shape {:?} does not match output", dy.shape()),
        ));
    }
    let rows = tap_table(g.ho, g.kh, stride, padding, g.h, mode);
    let cols_t = tap_table(g.wo, g.kw, stride, padding, g.w, mode);
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cin];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xs = &x.data()[(b * g.cin + c) * plane_in..][..plane_in];
            let dys = &dy.data()[(b * g.cin + c) * plane_out..][..plane_out];
            let dxs = &mut dx[(b * g.cin + c) * plane_in..][..plane_in];
            db[c] += dys.iter().copied().sum::<T>();
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let widx = c * g.kh * g.kw + u * g.kw + v;
                    let wv = weight.data()[widx];
                    let mut acc = T::zero();
                    for oi in 0..g.ho {
                        let r = rows[oi * g.kh + u];
                        if r == NONE {
                            continue;
                        }
                        let src = &xs[r * g.w..(r + 1) * g.w];
                        let dsrc = &mut dxs[r * g.w..(r + 1) * g.w];
                        let line = &dys[oi * g.wo..(oi + 1) * g.wo];
                        for (oj, &d) in line.iter().enumerate() {
                            let s = cols_t[oj * g.kw + v];
                            if s != NONE {
                                acc += d * src[s];
                                dsrc[s] += wv * d;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.cin], db)?,
    ))
}

fn transposed_geom<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
) -> Result<Geom> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    let (batch, cin, h, w) = x.dims4(op)?;
    let (wcin, cout, kh, kw) = weight.dims4(op)?;
    if wcin != cin {
        return Err(Error::shape(
            op,
            format!("input channels {cin} != weight input channels {wcin}"),
        ));
    }
    Ok(Geom {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad: 0,
        ho: (h - 1) * stride + kh,
        wo: (w - 1) * stride + kw,
    })
}

/// Transposed convolution (fractionally strided), no padding.
///
/// `weight` is `[in, out, kh, kw]`; output extent is `(H - 1) * stride + k`.
pub fn transposed_conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = transposed_geom("transposed_conv2d", x, weight, stride)?;
    if let Some(bias) = bias {
        check_bias("transposed_conv2d", bias, g.cout)?;
    }
    let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
    let kk = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.cout * hw_out];
    let mut cols = vec![T::zero(); g.cout * kk * hw_in];
    for b in 0..g.batch {
        let xb = &x.data()[b * g.cin * hw_in..(b + 1) * g.cin * hw_in];
        gemm(
            T::one(),
            MatRef::new(weight.data(), g.cin, g.cout * kk).t(),
            MatRef::new(xb, g.cin, hw_in),
            T::zero(),
            MatMut::new(&mut cols, g.cout * kk, hw_in),
        );
        let yb = &mut out[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        for o in 0..g.cout {
            let plane = &mut yb[o * hw_out..(o + 1) * hw_out];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let row = &cols[((o * g.kh + u) * g.kw + v) * hw_in..][..hw_in];
                    for i in 0..g.h {
                        let dst = &mut plane[(i * stride + u) * g.wo..][..g.wo];
                        for j in 0..g.w {
                            dst[j * stride + v] += row[i * g.w + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)
}

/// Cotangents `(dx, dweight, dbias)` of [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = transposed_geom("transposed_conv2d_backward", x, weight, stride)?;
    if dy.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!("cotangent shape {:?} does not match output", dy.shape()),
        ));
    }
    let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
    let kk = g.kh * g.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dcols = vec![T::zero(); g.cout * kk * hw_in];
    for b in 0..g.batch {
        let dyb = &dy.data()[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        for o in 0..g.cout {
            let plane = &dyb[o * hw_out..(o + 1) * hw_out];
            db[o] += plane.iter().copied().sum::<T>();
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let row = &mut dcols[((o * g.kh + u) * g.kw + v) * hw_in..][..hw_in];
                    for i in 0..g.h {
                        let src = &plane[(i * stride + u) * g.wo..][..g.wo];
                        for j in 0..g.w {
                            row[i * g.w + j] = src[j * stride + v];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[b * g.cin * hw_in..(b + 1) * g.cin * hw_in];
        gemm(
            T::one(),
            MatRef::new(weight.data(), g.cin, g.cout * kk),
            MatRef::new(&dcols, g.cout * kk, hw_in),
            T::zero(),
            MatMut::new(&mut dx[b * g.cin * hw_in..(b + 1) * g.cin * hw_in], g.cin, hw_in),
        );
        gemm(
            T::one(),
            MatRef::new(xb, g.cin, hw_in),
            MatRef::new(&dcols, g.cout * kk, hw_in).t(),
            T::one(),
            MatMut::new(&mut dw, g.cin, g.cout * kk),
        );
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.cout], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Straight six-loop reference convolution.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4("ref").unwrap();
        let (co, _, kh, kw) = w.dims4("ref").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for bi in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let r = (i * stride + u) as isize - pad as isize;
                                    let s = (j * stride + v) as isize - pad as isize;
                                    if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * kh + u) * kw + v]
                                        * x.data()[((bi * ci + c) * h + r as usize) * wd + s as usize];
                                }
                            }
                        }
                        y.data_mut()[((bi * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stride_two_box_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn stem_output_extent() {
        let x = Tensor::<f32>::zeros(&[1, 3, 224, 224]);
        let w = Tensor::zeros(&[8, 3, 7, 7]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[8]), 4, 3).unwrap();
        assert_eq!(y.shape(), &[1, 8, 56, 56]);
    }

    #[test]
    fn matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 4, 0), (7, 4, 3), (1, 1, 0), (2, 2, 0)] {
            let x = random(&[2, 3, 9, 8], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let y = conv2d(&x, &w, &b, s, p).unwrap();
            assert_close(&y, &conv_reference(&x, &w, &b, s, p), 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[2]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");
    }

    #[test]
    fn depthwise_identity_and_zero_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let mut w = Tensor::zeros(&[2, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        let y = depthwise_conv2d(&x, &w, &Tensor::zeros(&[2]), 1, 1).unwrap();
        assert_close(&y, &x, 0.0);

        w.data_mut()[4] = 0.0;
        let bias = Tensor::new(&[2], vec![0.25, 0.0]).unwrap();
        let y = depthwise_conv2d(&x, &w, &bias, 1, 1).unwrap();
        assert!(y.data()[..25].iter().all(|&v| v == 0.25));
        assert_close(&y.select_batch(&[0]).unwrap(), &y, 0.0);
    }

    #[test]
    fn depthwise_equals_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[2, 1, 7, 7], &mut rng);
        let b = random(&[2], &mut rng);
        let y = depthwise_conv2d(&x, &w, &b, 1, 3).unwrap();
        let mut dense = Tensor::zeros(&[2, 2, 7, 7]);
        for c in 0..2 {
            for t in 0..49 {
                dense.data_mut()[(c * 2 + c) * 49 + t] = w.data()[c * 49 + t];
            }
        }
        assert_close(&y, &conv2d(&x, &dense, &b, 1, 3).unwrap(), 1e-12);
    }

    #[test]
    fn pad_modes_index_sources() {
        assert_eq!(PadMode::Zero.source(-1, 4), NONE);
        assert_eq!(PadMode::Circular.source(-1, 4), 3);
        assert_eq!(PadMode::Circular.source(4, 4), 0);
        assert_eq!(PadMode::Reflect.source(-1, 4), 1);
        assert_eq!(PadMode::Reflect.source(4, 4), 2);
        assert_eq!(PadMode::Reflect.source(-2, 1), 0);
    }

    #[test]
    fn transposed_single_pixel() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = transposed_conv2d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        assert_eq!(transposed_conv2d(&x, &w, None, 2).unwrap().shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn transposed_matches_zero_insertion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s) in &[(2, 2), (3, 2), (3, 1), (4, 3)] {
            let x = random(&[2, 3, 3, 4], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let b = random(&[2], &mut rng);
            let y = transposed_conv2d(&x, &w, Some(&b), s).unwrap();
            // Insert stride-1 zeros, pad by k-1, and correlate with the
            // spatially flipped, in/out-swapped kernel.
            let (n, ci, h, wd) = x.dims4("t").unwrap();
            let (hz, wz) = ((h - 1) * s + 1 + 2 * (k - 1), (wd - 1) * s + 1 + 2 * (k - 1));
            let mut z = Tensor::zeros(&[n, ci, hz, wz]);
            for bi in 0..n {
                for c in 0..ci {
                    for i in 0..h {
                        for j in 0..wd {
                            z.data_mut()[((bi * ci + c) * hz + k - 1 + i * s) * wz + k - 1 + j * s] =
                                x.data()[((bi * ci + c) * h + i) * wd + j];
                        }
                    }
                }
            }
            let mut flipped = Tensor::zeros(&[2, 3, k, k]);
            for c in 0..3 {
                for o in 0..2 {
                    for u in 0..k {
                        for v in 0..k {
                            flipped.data_mut()[((o * 3 + c) * k + u) * k + v] =
                                w.data()[((c * 2 + o) * k + (k - 1 - u)) * k + (k - 1 - v)];
                        }
                    }
                }
            }
            assert_close(&y, &conv_reference(&z, &flipped, &b, 1, 0), 1e-12);
        }
    }

    #[test]
    fn transposed_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, conv^T(y)> when the weight layouts are swapped.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let w = random(&[3, 2, 2, 2], &mut rng);
        let y = random(&[1, 3, 3, 3], &mut rng);
        let cx = conv2d(&x, &w, &Tensor::zeros(&[3]), 2, 0).unwrap();
        // conv weight [out=3, in=2] is exactly the transposed layout [in=3, out=2].
        let ty = transposed_conv2d(&y, &w, None, 2).unwrap();
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
