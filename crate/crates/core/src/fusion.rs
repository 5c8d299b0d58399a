//! Encoder-side branch fusion (channel attention plus a spatial pathway) and
//! the decoder-side skip gate.

use crate::error::{Error, Result};
use crate::layers::{Conv2d, DwConv2d};
use crate::ops::activation::{gelu, gelu_backward, softmax, softmax_backward};
use crate::ops::conv::PadMode;
use crate::ops::elementwise::{add, mul, sum_to_shape};
use crate::ops::pool::{channel_pool, channel_pool_backward, global_avg_pool, global_avg_pool_backward};
use crate::params::{Grads, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tensor};

/// Transformer/convolution branch fusion producing the stage feature map.
///
/// Channel part: `softmax_c(w1(t) * w2(c)) * gap(t)`.
/// Spatial part: `p1(c) * hproj(channel_pool(c))`, one plane broadcast over channels.
/// Output: `fuse(channel + spatial)`.
#[derive(Clone, Copy, Debug)]
pub struct Cctfa {
    pub w1: Conv2d,
    pub w2: Conv2d,
    pub p1a: Conv2d,
    pub p1b: Conv2d,
    pub hproj: Conv2d,
    pub fuse: Conv2d,
}

pub struct CctfaCache<T: Float> {
    t: Tensor<T>,
    c: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    f: Tensor<T>,
    v: Tensor<T>,
    g1: Tensor<T>,
    g1a: Tensor<T>,
    g: Tensor<T>,
    pooled: Tensor<T>,
    hp: Tensor<T>,
    s: Tensor<T>,
}

/// Channel attention of the fusion module, exposed for direct testing.
pub struct ChannelAttention<T: Float> {
    pub weights: Tensor<T>,
    pub output: Tensor<T>,
}

impl Cctfa {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mid = (channels / 2).max(1);
        let mut b = pb.child("cctfa");
        Ok(Cctfa {
            w1: Conv2d::pointwise(&mut b, "w1", channels, channels)?,
            w2: Conv2d::pointwise(&mut b, "w2", channels, channels)?,
            p1a: Conv2d::new(&mut b, "p1a", channels, mid, 3, 1, 1)?,
            p1b: Conv2d::new(&mut b, "p1b", mid, 1, 3, 1, 1)?,
            hproj: Conv2d::pointwise(&mut b, "hproj", 2, 1)?,
            fuse: Conv2d::pointwise(&mut b, "fuse", channels, channels)?,
        })
    }

    pub fn cross_channel_attention<T: Float>(
        &self,
        params: &ParamStore<T>,
        t: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<ChannelAttention<T>> {
        t.expect_same_shape(c, "cross_channel_attention")?;
        let a = self.w1.forward(params, t)?;
        let b = self.w2.forward(params, c)?;
        let weights = softmax(&a.zip_map(&b, "cross_channel_attention", |x, y| x * y)?, 1)?;
        let output = mul(&weights, &global_avg_pool(t)?)?;
        Ok(ChannelAttention { weights, output })
    }

    /// Single-plane spatial descriptor `[B, 1, H, W]`.
    pub fn spatial_attention<T: Float>(&self, params: &ParamStore<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.p1b.forward(params, &gelu(&self.p1a.forward(params, c)?))?;
        let hp = self.hproj.forward(params, &channel_pool(c)?)?;
        mul(&g, &hp)
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        t: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<(Tensor<T>, CctfaCache<T>)> {
        t.expect_same_shape(c, "cctfa")?;
        let a = self.w1.forward(params, t)?;
        let b = self.w2.forward(params, c)?;
        let f = softmax(&a.zip_map(&b, "cctfa", |x, y| x * y)?, 1)?;
        let v = global_avg_pool(t)?;
        let cca = mul(&f, &v)?;
        let g1 = self.p1a.forward(params, c)?;
        let g1a = gelu(&g1);
        let g = self.p1b.forward(params, &g1a)?;
        let pooled = channel_pool(c)?;
        let hp = self.hproj.forward(params, &pooled)?;
        let sa = mul(&g, &hp)?;
        let s = add(&cca, &sa)?;
        let e = self.fuse.forward(params, &s)?;
        Ok((
            e,
            CctfaCache {
                t: t.clone(),
                c: c.clone(),
                a,
                b,
                f,
                v,
                g1,
                g1a,
                g,
                pooled,
                hp,
                s,
            },
        ))
    }

    /// Returns `(dt, dc)`.
    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &CctfaCache<T>,
        de: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let ds = self.fuse.backward(params, &cache.s, de, grads)?;
        let plane_shape = cache.g.shape().to_vec();
        let dsa = sum_to_shape(&ds, &plane_shape)?;

        // spatial pathway
        let dg = mul(&dsa, &cache.hp)?;
        let dhp = mul(&dsa, &cache.g)?;
        let dpooled = self.hproj.backward(params, &cache.pooled, &dhp, grads)?;
        let mut dc = channel_pool_backward(&cache.c, &dpooled)?;
        let dg1a = self.p1b.backward(params, &cache.g1a, &dg, grads)?;
        let dg1 = gelu_backward(&cache.g1, &dg1a)?;
        dc.add_assign(&self.p1a.backward(params, &cache.c, &dg1, grads)?)?;

        // channel pathway
        let df = mul(&ds, &cache.v)?;
        let dv = sum_to_shape(&mul(&ds, &cache.f)?, cache.v.shape())?;
        let mut dt = global_avg_pool_backward(cache.t.shape(), &dv)?;
        let dlogits = softmax_backward(&cache.f, &df, 1)?;
        let da = mul(&dlogits, &cache.b)?;
        let db = mul(&dlogits, &cache.a)?;
        dt.add_assign(&self.w1.backward(params, &cache.t, &da, grads)?)?;
        dc.add_assign(&self.w2.backward(params, &cache.c, &db, grads)?)?;
        Ok((dt, dc))
    }
}

/// Decoder skip gate: `D = g' * (translate(d) + e)` with
/// `g' = gelu(softmax_sites(gate_e(e) + gate_d(d)))` and
/// `translate(d) = gelu(pw(dw3(d)))`.
#[derive(Clone, Copy, Debug)]
pub struct Safg {
    pub gate_e: Conv2d,
    pub gate_d: Conv2d,
    pub trans_dw: DwConv2d,
    pub trans_pw: Conv2d,
}

pub struct SafgCache<T: Float> {
    e: Tensor<T>,
    d: Tensor<T>,
    sm: Tensor<T>,
    gate: Tensor<T>,
    tr1: Tensor<T>,
    tr2: Tensor<T>,
    mixed: Tensor<T>,
}

impl<T: Float> SafgCache<T> {
    /// The gate plane `g'`, `[B, 1, H, W]`.
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

impl Safg {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mut b = pb.child("safg");
        Ok(Safg {
            gate_e: Conv2d::pointwise(&mut b, "gate_e", channels, 1)?,
            gate_d: Conv2d::pointwise(&mut b, "gate_d", channels, 1)?,
            trans_dw: DwConv2d::new(&mut b, "trans_dw", channels, 3, PadMode::Zero)?,
            trans_pw: Conv2d::pointwise(&mut b, "trans_pw", channels, channels)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        e: &Tensor<T>,
        d: &Tensor<T>,
    ) -> Result<(Tensor<T>, SafgCache<T>)> {
        if e.shape() != d.shape() {
            return Err(Error::shape(
                "safg",
                format!(
                    "skip {:?} and decoder {:?} differ; upsample the decoder features to the skip resolution first",
                    e.shape(),
                    d.shape()
                ),
            ));
        }
        let (b, _, h, w) = e.dims4("safg")?;
        let mut logits = self.gate_e.forward(params, e)?;
        logits.add_assign(&self.gate_d.forward(params, d)?)?;
        let sm = softmax(&logits.into_reshape(&[b, h * w])?, 1)?.into_reshape(&[b, 1, h, w])?;
        let gate = gelu(&sm);
        let tr1 = self.trans_dw.forward(params, d)?;
        let tr2 = self.trans_pw.forward(params, &tr1)?;
        let mut mixed = gelu(&tr2);
        mixed.add_assign(e)?;
        let out = mul(&gate, &mixed)?;
        Ok((
            out,
            SafgCache {
                e: e.clone(),
                d: d.clone(),
                sm,
                gate,
                tr1,
                tr2,
                mixed,
            },
        ))
    }

    /// Returns `(de, dd)`.
    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &SafgCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, _, h, w) = cache.e.dims4("safg_backward")?;
        let dmixed = mul(dy, &cache.gate)?;
        let dgate = sum_to_shape(&mul(dy, &cache.mixed)?, cache.gate.shape())?;
        let dsm = gelu_backward(&cache.sm, &dgate)?;
        let sm_flat = cache.sm.reshape(&[b, h * w])?;
        let dlogits = softmax_backward(&sm_flat, &dsm.into_reshape(&[b, h * w])?, 1)?
            .into_reshape(&[b, 1, h, w])?;
        let mut de = dmixed.clone();
        de.add_assign(&self.gate_e.backward(params, &cache.e, &dlogits, grads)?)?;
        let mut dd = self.gate_d.backward(params, &cache.d, &dlogits, grads)?;
        let dtr2 = gelu_backward(&cache.tr2, &dmixed)?;
        let dtr1 = self.trans_pw.backward(params, &cache.tr1, &dtr2, grads)?;
        dd.add_assign(&self.trans_dw.backward(params, &cache.d, &dtr1, grads)?)?;
        Ok((de, dd))
    }
}
