use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Shape both operands broadcast to, numpy-style over equal ranks.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "broadcast",
            format!("ranks differ: {a:?} vs {b:?}"),
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(
                "broadcast",
                format!("extents {x} and {y} are incompatible in {a:?} vs {b:?}"),
            )),
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Offsets into an operand of `shape` for every element of `out`, row-major.
fn offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape, out);
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut offs = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offs
}

pub fn broadcast_binary<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, "broadcast", f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (oa, ob) = (offsets(a.shape(), &out), offsets(b.shape(), &out));
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(&out, data)
}

/// Sums `x` down to `shape` along broadcast axes.
pub fn sum_to_shape<T: Float>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    if broadcast_shape(shape, x.shape())? != x.shape() {
        return Err(Error::shape(
            "sum_to_shape",
            format!("{shape:?} does not broadcast to {:?}", x.shape()),
        ));
    }
    let mut out = Tensor::zeros(shape);
    for (&o, &v) in offsets(shape, x.shape()).iter().zip(x.data()) {
        out.data_mut()[o] += v;
    }
    Ok(out)
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x * y)
}

/// Cotangents of broadcast `a + b`.
pub fn add_backward<T: Float>(
    a_shape: &[usize],
    b_shape: &[usize],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((sum_to_shape(dy, a_shape)?, sum_to_shape(dy, b_shape)?))
}

/// Cotangents of broadcast `a * b`.
pub fn mul_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = sum_to_shape(&mul(dy, b)?, a.shape())?;
    let db = sum_to_shape(&mul(dy, a)?, b.shape())?;
    Ok((da, db))
}

/// Concatenates BCHW tensors along the channel axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let (b, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("shape {:?} does not match {:?} outside channels", p.shape(), first.shape()),
            ));
        }
        total += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new(&[b, total, h, w], out)
}

/// Splits a channel-concatenated tensor (or its cotangent) back into parts.
pub fn split_channels<T: Float>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (b, c, h, w) = x.dims4("split_channels")?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {sizes:?} do not sum to {c} channels"),
        ));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(b * s * hw)).collect();
    for bi in 0..b {
        let mut start = bi * c * hw;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&x.data()[start..start + s * hw]);
            start += s * hw;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor::new(&[b, s, h, w], data))
        .collect()
}
