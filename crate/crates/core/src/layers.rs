//! Parameterized layers. Each holds [`ParamId`]s into a [`ParamStore`] and
//! exposes `forward` plus a `backward` that accumulates parameter gradients
//! and returns the input cotangent.

use crate::error::{Error, Result};
use crate::ops::conv::{
    conv2d, conv2d_backward, depthwise_conv2d_backward, depthwise_conv2d_mode, transposed_conv2d,
    transposed_conv2d_backward, PadMode,
};
use crate::ops::norm::{
    batch_norm, batch_norm_backward, layer_norm, layer_norm_backward, Mode, NormCache,
    RunningStats, BN_EPS, BN_MOMENTUM, LN_EPS,
};
use crate::params::{Grads, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Forward-pass context: parameters, mode, and batch-norm statistics to apply
/// once the pass completes.
pub struct Ctx<'a, T: Float> {
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub stat_updates: Vec<(BatchNorm2d, RunningStats<T>)>,
    /// Running-statistics momentum; `None` for a cumulative average.
    pub bn_momentum: Option<f64>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            params,
            mode,
            stat_updates: Vec::new(),
            bn_momentum: Some(BN_MOMENTUM),
        }
    }

    pub fn p(&self, id: ParamId) -> &'a Tensor<T> {
        self.params.get(id)
    }
}

/// Writes collected running statistics back into the store.
pub fn apply_stat_updates<T: Float>(
    store: &mut ParamStore<T>,
    updates: Vec<(BatchNorm2d, RunningStats<T>)>,
) -> Result<()> {
    for (bn, stats) in updates {
        store.set(bn.running_mean, stats.mean)?;
        store.set(bn.running_var, stats.var)?;
        store.set(bn.updates, Tensor::full(&[1], T::of(stats.updates as f64)))?;
    }
    Ok(())
}

/// Dense convolution with bias. Also serves as the per-site linear layer when `k == 1`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mut b = pb.child(name);
        Ok(Conv2d {
            weight: b.weight("weight", &[cout, cin, k, k])?,
            bias: b.constant("bias", &[cout], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn pointwise<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Self::new(pb, name, cin, cout, 1, 1, 0)
    }

    pub fn forward<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, params.get(self.weight), params.get(self.bias), self.stride, self.padding)
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dw, db) = conv2d_backward(x, params.get(self.weight), dy, self.stride, self.padding)?;
        grads.accumulate(self.weight, &dw)?;
        grads.accumulate(self.bias, &db)?;
        Ok(dx)
    }
}

/// Depthwise convolution with "same" padding `k / 2` and selectable pad mode.
#[derive(Clone, Copy, Debug)]
pub struct DwConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub mode: PadMode,
}

impl DwConv2d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        k: usize,
        mode: PadMode,
    ) -> Result<Self> {
        let mut b = pb.child(name);
        Ok(DwConv2d {
            weight: b.weight("weight", &[channels, 1, k, k])?,
            bias: b.constant("bias", &[channels], 0.0)?,
            k,
            mode,
        })
    }

    pub fn forward<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        depthwise_conv2d_mode(
            x,
            params.get(self.weight),
            params.get(self.bias),
            1,
            self.k / 2,
            self.mode,
        )
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dw, db) =
            depthwise_conv2d_backward(x, params.get(self.weight), dy, 1, self.k / 2, self.mode)?;
        grads.accumulate(self.weight, &dw)?;
        grads.accumulate(self.bias, &db)?;
        Ok(dx)
    }
}

/// Transposed convolution with kernel and stride equal (exact upsampling by `stride`).
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut b = pb.child(name);
        Ok(ConvTranspose2d {
            weight: b.weight("weight", &[cin, cout, stride, stride])?,
            bias: b.constant("bias", &[cout], 0.0)?,
            stride,
        })
    }

    pub fn forward<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        transposed_conv2d(x, params.get(self.weight), Some(params.get(self.bias)), self.stride)
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dw, db) = transposed_conv2d_backward(x, params.get(self.weight), dy, self.stride)?;
        grads.accumulate(self.weight, &dw)?;
        grads.accumulate(self.bias, &db)?;
        Ok(dx)
    }
}

/// Layer norm over channels at each site.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm2d {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = pb.child(name);
        Ok(LayerNorm2d {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, NormCache<T>)> {
        layer_norm(x, params.get(self.gamma), params.get(self.beta), LN_EPS)
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dg, db) = layer_norm_backward(cache, params.get(self.gamma), dy)?;
        grads.accumulate(self.gamma, &dg)?;
        grads.accumulate(self.beta, &db)?;
        Ok(dx)
    }
}

/// Batch norm whose running statistics live in the store as buffers.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub updates: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = pb.child(name);
        let fresh = RunningStats::<T>::new(channels);
        Ok(BatchNorm2d {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
            running_mean: b.buffer("running_mean", fresh.mean)?,
            running_var: b.buffer("running_var", fresh.var)?,
            updates: b.buffer("updates", Tensor::zeros(&[1]))?,
        })
    }

    pub fn running<T: Float>(&self, params: &ParamStore<T>) -> RunningStats<T> {
        RunningStats {
            mean: params.get(self.running_mean).clone(),
            var: params.get(self.running_var).clone(),
            updates: params.get(self.updates).data()[0].as_f64() as u64,
        }
    }

    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, NormCache<T>)> {
        let out = batch_norm(
            x,
            ctx.p(self.gamma),
            ctx.p(self.beta),
            &self.running(ctx.params),
            ctx.mode,
            BN_EPS,
            ctx.bn_momentum,
        )?;
        if let Some(stats) = out.running {
            ctx.stat_updates.push((*self, stats));
        }
        Ok((out.y, out.cache))
    }

    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        mode: Mode,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dg, db) = batch_norm_backward(cache, params.get(self.gamma), dy, mode)?;
        grads.accumulate(self.gamma, &dg)?;
        grads.accumulate(self.beta, &db)?;
        Ok(dx)
    }
}

/// Rejects spatial extents that a stride does not divide.
pub fn check_divisible(op: &'static str, h: usize, w: usize, factor: usize) -> Result<()> {
    for (axis, extent) in [("height", h), ("width", w)] {
        if extent % factor != 0 {
            return Err(Error::Indivisible {
                op,
                axis,
                extent,
                factor,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::params::Init;

    #[test]
    fn batch_norm_records_and_applies_stats() {
        let mut init = Init::<f64>::new(0);
        let bn = BatchNorm2d::new(&mut init.root(), "bn", 1).unwrap();
        let mut store = init.finish();
        let x = Tensor::new(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            assert!(matches!(bn.forward(&mut ctx, &x), Err(Error::UninitializedStats)));
        }
        let mut ctx = Ctx::new(&store, Mode::Train);
        bn.forward(&mut ctx, &x).unwrap();
        let updates = std::mem::take(&mut ctx.stat_updates);
        apply_stat_updates(&mut store, updates).unwrap();
        let stats = bn.running(&store);
        assert_eq!(stats.updates, 1);
        assert!((stats.mean.data()[0] - 0.1).abs() < 1e-12);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        assert!(bn.forward(&mut ctx, &x).is_ok());
    }

    #[test]
    fn divisibility_error_names_axis() {
        let err = check_divisible("patch_merge", 64, 30, 4).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }
}
