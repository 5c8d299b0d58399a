//! Convolutional blocks: the ConvNeXt encoder block, the batch-normalized
//! decoder variant, and the patch-merging downsamplers.

use crate::error::{Error, Result};
use crate::layers::{check_divisible, BatchNorm2d, Conv2d, Ctx, DwConv2d, LayerNorm2d};
use crate::ops::activation::{gelu, gelu_backward};
use crate::ops::conv::PadMode;
use crate::ops::norm::{Mode, NormCache};
use crate::params::{Grads, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tensor};

pub const CONVNEXT_EXPANSION: usize = 4;

/// `x + pw_proj(gelu(pw_exp(LN(dw7(x)))))`.
#[derive(Clone, Copy, Debug)]
pub struct ConvNeXtBlock {
    pub dw: DwConv2d,
    pub ln: LayerNorm2d,
    pub pw_exp: Conv2d,
    pub pw_proj: Conv2d,
}

pub struct ConvNeXtCache<T: Float> {
    x: Tensor<T>,
    ln: NormCache<T>,
    normed: Tensor<T>,
    h: Tensor<T>,
    g: Tensor<T>,
}

impl ConvNeXtBlock {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let hidden = channels * CONVNEXT_EXPANSION;
        Ok(ConvNeXtBlock {
            dw: DwConv2d::new(pb, "dw", channels, 7, PadMode::Zero)?,
            ln: LayerNorm2d::new(pb, "ln", channels)?,
            pw_exp: Conv2d::pointwise(pb, "pw_exp", channels, hidden)?,
            pw_proj: Conv2d::pointwise(pb, "pw_proj", hidden, channels)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvNeXtCache<T>)> {
        let d = self.dw.forward(params, x)?;
        let (normed, ln) = self.ln.forward(params, &d)?;
        let h = self.pw_exp.forward(params, &normed)?;
        let g = gelu(&h);
        let mut y = self.pw_proj.forward(params, &g)?;
        y.add_assign(x)?;
        Ok((
            y,
            ConvNeXtCache {
                x: x.clone(),
                ln,
                normed,
                h,
                g,
            },
        ))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &ConvNeXtCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dg = self.pw_proj.backward(params, &cache.g, dy, grads)?;
        let dh = gelu_backward(&cache.h, &dg)?;
        let dn = self.pw_exp.backward(params, &cache.normed, &dh, grads)?;
        let dd = self.ln.backward(params, &cache.ln, &dn, grads)?;
        let mut dx = self.dw.backward(params, &cache.x, &dd, grads)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

/// Decoder block: `r = x + pw_proj(gelu(pw_exp(BN(dw7(x)))))`, then
/// `gelu(r + extra(r))`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGNeXtBlock {
    pub dw: DwConv2d,
    pub bn: BatchNorm2d,
    pub pw_exp: Conv2d,
    pub pw_proj: Conv2d,
    pub extra: Conv2d,
}

pub struct ConvGNeXtCache<T: Float> {
    x: Tensor<T>,
    bn: NormCache<T>,
    mode: Mode,
    normed: Tensor<T>,
    h: Tensor<T>,
    g: Tensor<T>,
    r: Tensor<T>,
    pre: Tensor<T>,
}

impl ConvGNeXtBlock {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let hidden = channels * CONVNEXT_EXPANSION;
        Ok(ConvGNeXtBlock {
            dw: DwConv2d::new(pb, "dw", channels, 7, PadMode::Zero)?,
            bn: BatchNorm2d::new(pb, "bn", channels)?,
            pw_exp: Conv2d::pointwise(pb, "pw_exp", channels, hidden)?,
            pw_proj: Conv2d::pointwise(pb, "pw_proj", hidden, channels)?,
            extra: Conv2d::pointwise(pb, "extra", channels, channels)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvGNeXtCache<T>)> {
        let params = ctx.params;
        let d = self.dw.forward(params, x)?;
        let (normed, bn) = self.bn.forward(ctx, &d)?;
        let h = self.pw_exp.forward(params, &normed)?;
        let g = gelu(&h);
        let mut r = self.pw_proj.forward(params, &g)?;
        r.add_assign(x)?;
        let mut pre = self.extra.forward(params, &r)?;
        pre.add_assign(&r)?;
        let y = gelu(&pre);
        Ok((
            y,
            ConvGNeXtCache {
                x: x.clone(),
                bn,
                mode: ctx.mode,
                normed,
                h,
                g,
                r,
                pre,
            },
        ))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &ConvGNeXtCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dpre = gelu_backward(&cache.pre, dy)?;
        let mut dr = self.extra.backward(params, &cache.r, &dpre, grads)?;
        dr.add_assign(&dpre)?;
        let dg = self.pw_proj.backward(params, &cache.g, &dr, grads)?;
        let dh = gelu_backward(&cache.h, &dg)?;
        let dn = self.pw_exp.backward(params, &cache.normed, &dh, grads)?;
        let dd = self.bn.backward(params, &cache.bn, &dn, cache.mode, grads)?;
        let mut dx = self.dw.backward(params, &cache.x, &dd, grads)?;
        dx.add_assign(&dr)?;
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    /// Stride below kernel size, padding `k / 2`.
    Overlap,
    /// Stride equal to kernel size, no padding.
    NonOverlap,
}

/// Strided convolution followed by layer norm.
#[derive(Clone, Copy, Debug)]
pub struct PatchMerge {
    pub kind: MergeKind,
    pub k: usize,
    pub stride: usize,
    pub conv: Conv2d,
    pub ln: LayerNorm2d,
}

pub struct PatchMergeCache<T: Float> {
    x: Tensor<T>,
    ln: NormCache<T>,
}

impl PatchMerge {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let kind = match stride {
            s if s < k => MergeKind::Overlap,
            s if s == k => MergeKind::NonOverlap,
            _ => {
                return Err(Error::InvalidConfig(vec![format!(
                    "patch merge stride {stride} exceeds kernel {k}"
                )]))
            }
        };
        let pad = if kind == MergeKind::Overlap { k / 2 } else { 0 };
        Ok(PatchMerge {
            kind,
            k,
            stride,
            conv: Conv2d::new(pb, "conv", cin, cout, k, stride, pad)?,
            ln: LayerNorm2d::new(pb, "ln", cout)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, PatchMergeCache<T>)> {
        let (_, _, h, w) = x.dims4("patch_merge")?;
        check_divisible("patch_merge", h, w, self.stride)?;
        let y = self.conv.forward(params, x)?;
        let (out, ln) = self.ln.forward(params, &y)?;
        Ok((out, PatchMergeCache { x: x.clone(), ln }))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &PatchMergeCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dconv = self.ln.backward(params, &cache.ln, dy, grads)?;
        self.conv.backward(params, &cache.x, &dconv, grads)
    }
}
