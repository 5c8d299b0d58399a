//! Context-addition self-attention, the depthwise feed-forward module and the
//! transformer block built from them.

use crate::error::{Error, Result};
use crate::layers::{Conv2d, DwConv2d, LayerNorm2d};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::ops::activation::{gelu, gelu_backward, softmax_rows};
use crate::ops::conv::PadMode;
use crate::ops::elementwise::{concat_channels, split_channels};
use crate::ops::norm::NormCache;
use crate::params::{Grads, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tensor};

/// Hidden width multiplier of the depthwise feed-forward module.
pub const DFCN_EXPANSION: usize = 4;

/// Row and column factors of a token reduction by `r`: the column factor is
/// the largest divisor of `r` not above `sqrt(r)`, so 8 -> (4, 2), 4 -> (2, 2),
/// 2 -> (2, 1).
pub fn reduction_factors(r: usize) -> (usize, usize) {
    let rc = (1..=r).filter(|d| r % d == 0 && d * d <= r).max().unwrap_or(1);
    (r / rc, rc)
}

/// Folds each `rr x rc` block of sites into the channel axis:
/// `[B, C, H, W] -> [B, C * rr * rc, H / rr, W / rc]`.
pub fn space_to_depth<T: Float>(x: &Tensor<T>, rr: usize, rc: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("spatial_reduce")?;
    for (axis, extent, factor) in [("height", h, rr), ("width", w, rc)] {
        if extent % factor != 0 {
            return Err(Error::Indivisible {
                op: "spatial_reduce",
                axis,
                extent,
                factor,
            });
        }
    }
    let (ho, wo, r) = (h / rr, w / rc, rr * rc);
    let mut out = vec![T::zero(); x.len()];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * r * ho * wo..(bc + 1) * r * ho * wo];
        for i in 0..rr {
            for j in 0..rc {
                let plane = &mut dst[(i * rc + j) * ho * wo..][..ho * wo];
                for y in 0..ho {
                    for xx in 0..wo {
                        plane[y * wo + xx] = src[(y * rr + i) * w + xx * rc + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c * r, ho, wo], out)
}

/// Inverse of [`space_to_depth`] (and therefore also its adjoint).
pub fn depth_to_space<T: Float>(y: &Tensor<T>, rr: usize, rc: usize) -> Result<Tensor<T>> {
    let (b, cr, ho, wo) = y.dims4("depth_to_space")?;
    let r = rr * rc;
    let (c, h, w) = (cr / r, ho * rr, wo * rc);
    let mut out = vec![T::zero(); y.len()];
    for bc in 0..b * c {
        let src = &y.data()[bc * r * ho * wo..(bc + 1) * r * ho * wo];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        for i in 0..rr {
            for j in 0..rc {
                let plane = &src[(i * rc + j) * ho * wo..][..ho * wo];
                for yy in 0..ho {
                    for xx in 0..wo {
                        dst[(yy * rr + i) * w + xx * rc + j] = plane[yy * wo + xx];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Token reduction by `r`: space-to-depth followed by a learned `C * r -> C`
/// linear map. `r == 1` is the identity and carries no parameters.
#[derive(Clone, Copy, Debug)]
pub struct SpatialReduce {
    pub r: usize,
    pub linear: Option<Conv2d>,
}

pub struct SpatialReduceCache<T: Float> {
    folded: Option<Tensor<T>>,
}

impl SpatialReduce {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, r: usize) -> Result<Self> {
        let linear = if r > 1 {
            Some(Conv2d::pointwise(pb, "sr", channels * r, channels)?)
        } else {
            None
        };
        Ok(SpatialReduce { r, linear })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, SpatialReduceCache<T>)> {
        match &self.linear {
            None => Ok((x.clone(), SpatialReduceCache { folded: None })),
            Some(lin) => {
                let (rr, rc) = reduction_factors(self.r);
                let folded = space_to_depth(x, rr, rc)?;
                let y = lin.forward(params, &folded)?;
                Ok((y, SpatialReduceCache { folded: Some(folded) }))
            }
        }
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &SpatialReduceCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match (&self.linear, &cache.folded) {
            (Some(lin), Some(folded)) => {
                let (rr, rc) = reduction_factors(self.r);
                let dfolded = lin.backward(params, folded, dy, grads)?;
                depth_to_space(&dfolded, rr, rc)
            }
            _ => Ok(dy.clone()),
        }
    }
}

/// `softmax(Q K^T / sqrt(d)) V` for token-major `Q: [N, d]`, `K, V: [N', d]`.
pub fn scaled_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = |t: &Tensor<T>| -> Result<(usize, usize)> {
        match *t.shape() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(
                "scaled_attention",
                format!("expected a rank-2 tensor, got {:?}", t.shape()),
            )),
        }
    };
    let ((n, d), (nk, dk), (nv, dv)) = (dims(q)?, dims(k)?, dims(v)?);
    if d != dk || nk != nv {
        return Err(Error::shape(
            "scaled_attention",
            format!("Q {:?}, K {:?}, V {:?} are inconsistent", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut s = vec![T::zero(); n * nk];
    gemm(
        T::one(),
        MatRef::new(q.data(), n, d),
        MatRef::new(k.data(), nk, d).t(),
        T::zero(),
        MatMut::new(&mut s, n, nk),
    );
    softmax_rows(&mut s, nk, T::of(1.0 / (d as f64).sqrt()));
    let mut out = vec![T::zero(); n * dv];
    gemm(
        T::one(),
        MatRef::new(&s, n, nk),
        MatRef::new(v.data(), nv, dv),
        T::zero(),
        MatMut::new(&mut out, n, dv),
    );
    Tensor::new(&[n, dv], out)
}

/// Multi-head attention over channel-major maps.
///
/// `q` is `[B, C, H, W]` (N = H * W queries), `k` and `v` are `[B, C, H', W']`.
/// Returns the head-concatenated output `[B, C, H, W]` and the attention
/// probabilities, `B * heads` row-major `[N, N']` blocks.
pub fn multi_head_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, h, w) = q.dims4("multi_head_attention")?;
    let (kb, kc, kh, kw) = k.dims4("multi_head_attention")?;
    if (kb, kc) != (b, c) || v.shape() != k.shape() {
        return Err(Error::shape(
            "multi_head_attention",
            format!("Q {:?}, K {:?}, V {:?} are inconsistent", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::HeadDivisibility {
            op: "multi_head_attention",
            channels: c,
            heads,
        });
    }
    let (n, nk, d) = (h * w, kh * kw, c / heads);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut probs = vec![T::zero(); b * heads * n * nk];
    let mut out = vec![T::zero(); q.len()];
    for bi in 0..b {
        for m in 0..heads {
            let qm = &q.data()[(bi * c + m * d) * n..][..d * n];
            let km = &k.data()[(bi * c + m * d) * nk..][..d * nk];
            let vm = &v.data()[(bi * c + m * d) * nk..][..d * nk];
            let a = &mut probs[(bi * heads + m) * n * nk..][..n * nk];
            gemm(
                T::one(),
                MatRef::new(qm, d, n).t(),
                MatRef::new(km, d, nk),
                T::zero(),
                MatMut::new(a, n, nk),
            );
            softmax_rows(a, nk, scale);
            gemm(
                T::one(),
                MatRef::new(vm, d, nk),
                MatRef::new(a, n, nk).t(),
                T::zero(),
                MatMut::new(&mut out[(bi * c + m * d) * n..][..d * n], d, n),
            );
        }
    }
    Ok((Tensor::new(q.shape(), out)?, probs))
}

/// Cotangents `(dq, dk, dv)` of [`multi_head_attention`].
pub fn multi_head_attention_backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = q.dims4("multi_head_attention_backward")?;
    let (_, _, kh, kw) = k.dims4("multi_head_attention_backward")?;
    dout.expect_same_shape(q, "multi_head_attention_backward")?;
    let (n, nk, d) = (h * w, kh * kw, c / heads);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); n * nk];
    for bi in 0..b {
        for m in 0..heads {
            let off_q = (bi * c + m * d) * n;
            let off_k = (bi * c + m * d) * nk;
            let qm = &q.data()[off_q..][..d * n];
            let km = &k.data()[off_k..][..d * nk];
            let vm = &v.data()[off_k..][..d * nk];
            let dom = &dout.data()[off_q..][..d * n];
            let a = &probs[(bi * heads + m) * n * nk..][..n * nk];
            // dV = dO A
            gemm(
                T::one(),
                MatRef::new(dom, d, n),
                MatRef::new(a, n, nk),
                T::zero(),
                MatMut::new(&mut dv[off_k..][..d * nk], d, nk),
            );
            // dA = dO^T V, then through the row softmax and the scale
            gemm(
                T::one(),
                MatRef::new(dom, d, n).t(),
                MatRef::new(vm, d, nk),
                T::zero(),
                MatMut::new(&mut ds, n, nk),
            );
            for (drow, arow) in ds.chunks_exact_mut(nk).zip(a.chunks_exact(nk)) {
                let dot: T = drow.iter().zip(arow).map(|(&g, &p)| g * p).sum();
                for (g, &p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            // dQ = K dS^T, dK = Q dS
            gemm(
                T::one(),
                MatRef::new(km, d, nk),
                MatRef::new(&ds, n, nk).t(),
                T::zero(),
                MatMut::new(&mut dq[off_q..][..d * n], d, n),
            );
            gemm(
                T::one(),
                MatRef::new(qm, d, n),
                MatRef::new(&ds, n, nk),
                T::zero(),
                MatMut::new(&mut dk[off_k..][..d * nk], d, nk),
            );
        }
    }
    Ok((
        Tensor::new(q.shape(), dq)?,
        Tensor::new(k.shape(), dk)?,
        Tensor::new(v.shape(), dv)?,
    ))
}

/// Multiply-adds of the score and aggregation products for `n` queries,
/// `n_kv` keys and `channels` total head width.
pub fn attention_macs(n: u64, n_kv: u64, channels: u64) -> u64 {
    2 * n * n_kv * channels
}

/// Key enrichment: `K' = W2(gelu(W1(concat(K, Q)))) + K`.
#[derive(Clone, Copy, Debug)]
pub struct Cap {
    pub w1: Conv2d,
    pub w2: Conv2d,
}

pub struct CapCache<T: Float> {
    kq: Tensor<T>,
    h: Tensor<T>,
    g: Tensor<T>,
}

impl Cap {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mut b = pb.child("cap");
        Ok(Cap {
            w1: Conv2d::pointwise(&mut b, "w1", 2 * channels, channels)?,
            w2: Conv2d::pointwise(&mut b, "w2", channels, channels)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        k: &Tensor<T>,
        q: &Tensor<T>,
    ) -> Result<(Tensor<T>, CapCache<T>)> {
        let kq = concat_channels(&[k, q])?;
        let h = self.w1.forward(params, &kq)?;
        let g = gelu(&h);
        let mut out = self.w2.forward(params, &g)?;
        out.add_assign(k)?;
        Ok((out, CapCache { kq, h, g }))
    }

    /// Returns `(dk, dq)`.
    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &CapCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let dg = self.w2.backward(params, &cache.g, dy, grads)?;
        let dh = gelu_backward(&cache.h, &dg)?;
        let dkq = self.w1.backward(params, &cache.kq, &dh, grads)?;
        let c = dy.shape()[1];
        let mut parts = split_channels(&dkq, &[c, c])?.into_iter();
        let (mut dk, dq) = (parts.next().expect("two parts"), parts.next().expect("two parts"));
        dk.add_assign(dy)?;
        Ok((dk, dq))
    }
}

/// Multi-head attention with key enrichment and key/value token reduction,
/// followed by the output projection and the trailing linear layer.
#[derive(Clone, Copy, Debug)]
pub struct ContextAttention {
    pub channels: usize,
    pub heads: usize,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub cap: Cap,
    pub sr: SpatialReduce,
    pub o: Conv2d,
    pub l: Conv2d,
}

pub struct ContextAttentionCache<T: Float> {
    x: Tensor<T>,
    q: Tensor<T>,
    k_red: Tensor<T>,
    v_red: Tensor<T>,
    cap: CapCache<T>,
    sr_k: SpatialReduceCache<T>,
    sr_v: SpatialReduceCache<T>,
    probs: Vec<T>,
    attended: Tensor<T>,
    projected: Tensor<T>,
}

impl ContextAttention {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        reduction: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::HeadDivisibility {
                op: "context_addition_attention",
                channels,
                heads,
            });
        }
        let mut b = pb.child("attn");
        Ok(ContextAttention {
            channels,
            heads,
            q: Conv2d::pointwise(&mut b, "q", channels, channels)?,
            k: Conv2d::pointwise(&mut b, "k", channels, channels)?,
            v: Conv2d::pointwise(&mut b, "v", channels, channels)?,
            cap: Cap::new(&mut b, channels)?,
            sr: SpatialReduce::new(&mut b, channels, reduction)?,
            o: Conv2d::pointwise(&mut b, "o", channels, channels)?,
            l: Conv2d::pointwise(&mut b, "l", channels, channels)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ContextAttentionCache<T>)> {
        let q = self.q.forward(params, x)?;
        let k = self.k.forward(params, x)?;
        let v = self.v.forward(params, x)?;
        let (k_enriched, cap) = self.cap.forward(params, &k, &q)?;
        let (k_red, sr_k) = self.sr.forward(params, &k_enriched)?;
        let (v_red, sr_v) = self.sr.forward(params, &v)?;
        let (attended, probs) = multi_head_attention(&q, &k_red, &v_red, self.heads)?;
        let projected = self.o.forward(params, &attended)?;
        let y = self.l.forward(params, &projected)?;
        Ok((
            y,
            ContextAttentionCache {
                x: x.clone(),
                q,
                k_red,
                v_red,
                cap,
                sr_k,
                sr_v,
                probs,
                attended,
                projected,
            },
        ))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &ContextAttentionCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dproj = self.l.backward(params, &cache.projected, dy, grads)?;
        let datt = self.o.backward(params, &cache.attended, &dproj, grads)?;
        let (mut dq, dk_red, dv_red) = multi_head_attention_backward(
            &cache.q,
            &cache.k_red,
            &cache.v_red,
            &cache.probs,
            self.heads,
            &datt,
        )?;
        let dk_enriched = self.sr.backward(params, &cache.sr_k, &dk_red, grads)?;
        let dv = self.sr.backward(params, &cache.sr_v, &dv_red, grads)?;
        let (dk, dq_cap) = self.cap.backward(params, &cache.cap, &dk_enriched, grads)?;
        dq.add_assign(&dq_cap)?;
        let mut dx = self.q.backward(params, &cache.x, &dq, grads)?;
        dx.add_assign(&self.k.backward(params, &cache.x, &dk, grads)?)?;
        dx.add_assign(&self.v.backward(params, &cache.x, &dv, grads)?)?;
        Ok(dx)
    }
}

/// Depthwise feed-forward module: `pw2(gelu(dw3(pw1(LN(z + t)))))`.
#[derive(Clone, Copy, Debug)]
pub struct Dfcn {
    pub ln: LayerNorm2d,
    pub pw1: Conv2d,
    pub dw: DwConv2d,
    pub pw2: Conv2d,
}

pub struct DfcnCache<T: Float> {
    ln: NormCache<T>,
    normed: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    g: Tensor<T>,
}

impl Dfcn {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, pad: PadMode) -> Result<Self> {
        let hidden = channels * DFCN_EXPANSION;
        let mut b = pb.child("dfcn");
        Ok(Dfcn {
            ln: LayerNorm2d::new(&mut b, "ln", channels)?,
            pw1: Conv2d::pointwise(&mut b, "pw1", channels, hidden)?,
            dw: DwConv2d::new(&mut b, "dw", hidden, 3, pad)?,
            pw2: Conv2d::pointwise(&mut b, "pw2", hidden, channels)?,
        })
    }

    /// Applies the module to `z + t`, passed already summed.
    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        sum: &Tensor<T>,
    ) -> Result<(Tensor<T>, DfcnCache<T>)> {
        let (normed, ln) = self.ln.forward(params, sum)?;
        let h1 = self.pw1.forward(params, &normed)?;
        let h2 = self.dw.forward(params, &h1)?;
        let g = gelu(&h2);
        let y = self.pw2.forward(params, &g)?;
        Ok((y, DfcnCache { ln, normed, h1, h2, g }))
    }

    /// Cotangent of the summed input (equal for `z` and `t`).
    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &DfcnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dg = self.pw2.backward(params, &cache.g, dy, grads)?;
        let dh2 = gelu_backward(&cache.h2, &dg)?;
        let dh1 = self.dw.backward(params, &cache.h1, &dh2, grads)?;
        let dn = self.pw1.backward(params, &cache.normed, &dh1, grads)?;
        self.ln.backward(params, &cache.ln, &dn, grads)
    }
}

/// Transformer block: `u = attn(t) + t`, output `u + dfcn(u)`.
#[derive(Clone, Copy, Debug)]
pub struct CatBlock {
    pub attn: ContextAttention,
    pub dfcn: Dfcn,
}

pub struct CatBlockCache<T: Float> {
    attn: ContextAttentionCache<T>,
    dfcn: DfcnCache<T>,
}

impl CatBlock {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        reduction: usize,
        pad: PadMode,
    ) -> Result<Self> {
        Ok(CatBlock {
            attn: ContextAttention::new(pb, channels, heads, reduction)?,
            dfcn: Dfcn::new(pb, channels, pad)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        t: &Tensor<T>,
    ) -> Result<(Tensor<T>, CatBlockCache<T>)> {
        let (mut u, attn) = self.attn.forward(params, t)?;
        u.add_assign(t)?;
        let (mut out, dfcn) = self.dfcn.forward(params, &u)?;
        out.add_assign(&u)?;
        Ok((out, CatBlockCache { attn, dfcn }))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &CatBlockCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let mut du = self.dfcn.backward(params, &cache.dfcn, dy, grads)?;
        du.add_assign(dy)?;
        let mut dt = self.attn.backward(params, &cache.attn, &du, grads)?;
        dt.add_assign(&du)?;
        Ok(dt)
    }
}
