//! Uniform reverse-mode interface over the primitive ops.
//!
//! Blocks call the `*_backward` functions directly; this layer exists so every
//! primitive can be driven and checked through one entry point.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_backward};
use crate::ops::activation::{gelu_backward, sigmoid_backward, softmax_backward};
use crate::ops::conv::{
    conv2d_backward, depthwise_conv2d_backward, depthwise_conv2d_mode, transposed_conv2d_backward,
};
use crate::ops::elementwise::{add_backward, mul_backward};
use crate::ops::norm::{batch_norm_backward, layer_norm_backward, BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::ops::pool::{channel_pool_backward, global_avg_pool_backward};
use crate::ops::resize::bilinear_upsample_backward;
use crate::ops::*;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Inputs: x, weight, bias.
    Conv2d { stride: usize, padding: usize },
    /// Inputs: x, weight, bias.
    DepthwiseConv2d { stride: usize, padding: usize, mode: PadMode },
    /// Inputs: x, weight, bias.
    TransposedConv2d { stride: usize },
    /// Inputs: x, gamma, beta.
    LayerNorm { eps: f64 },
    /// Training-mode batch norm from fresh running statistics. Inputs: x, gamma, beta.
    BatchNorm { eps: f64 },
    Gelu,
    Sigmoid,
    Softmax { axis: usize },
    GlobalAvgPool,
    ChannelPool,
    BilinearUpsample { out_h: usize, out_w: usize },
    Matmul,
    /// Channel concatenation of any number of inputs.
    Concat,
    Add,
    Mul,
    Reshape { shape: Vec<usize> },
}

impl Primitive {
    pub const NAMES: [&'static str; 16] = [
        "conv2d",
        "depthwise_conv2d",
        "transposed_conv2d",
        "layer_norm",
        "batch_norm",
        "gelu",
        "sigmoid",
        "softmax",
        "global_avg_pool",
        "channel_pool",
        "bilinear_upsample",
        "matmul",
        "concat",
        "add",
        "mul",
        "reshape",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Primitive::TransposedConv2d { .. } => "transposed_conv2d",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::BatchNorm { .. } => "batch_norm",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax { .. } => "softmax",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::ChannelPool => "channel_pool",
            Primitive::BilinearUpsample { .. } => "bilinear_upsample",
            Primitive::Matmul => "matmul",
            Primitive::Concat => "concat",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Reshape { .. } => "reshape",
        }
    }

    /// Looks a primitive up by name with default attributes: unit stride,
    /// "same" padding for a 3x3 kernel, channel-axis softmax, 2x upsampling,
    /// and flattening for reshape.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "conv2d" => Primitive::Conv2d { stride: 1, padding: 1 },
            "depthwise_conv2d" => Primitive::DepthwiseConv2d {
                stride: 1,
                padding: 1,
                mode: PadMode::Zero,
            },
            "transposed_conv2d" => Primitive::TransposedConv2d { stride: 2 },
            "layer_norm" => Primitive::LayerNorm { eps: LN_EPS },
            "batch_norm" => Primitive::BatchNorm { eps: BN_EPS },
            "gelu" => Primitive::Gelu,
            "sigmoid" => Primitive::Sigmoid,
            "softmax" => Primitive::Softmax { axis: 1 },
            "global_avg_pool" => Primitive::GlobalAvgPool,
            "channel_pool" => Primitive::ChannelPool,
            "bilinear_upsample" => Primitive::BilinearUpsample { out_h: 0, out_w: 0 },
            "matmul" => Primitive::Matmul,
            "concat" => Primitive::Concat,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "reshape" => Primitive::Reshape { shape: Vec::new() },
            other => return Err(Error::UnsupportedPrimitive(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Conv2d { .. }
            | Primitive::DepthwiseConv2d { .. }
            | Primitive::TransposedConv2d { .. }
            | Primitive::LayerNorm { .. }
            | Primitive::BatchNorm { .. } => Some(3),
            Primitive::Matmul | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

pub type Pullback<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>>>;

/// A forward value paired with its pullback.
pub struct Vjp<T: Float> {
    pub output: Tensor<T>,
    pub pullback: Pullback<T>,
}

/// Evaluates `prim` at `inputs` and returns the output with its pullback.
pub fn vjp<T: Float>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<Vjp<T>> {
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(Error::Arity {
                op: prim.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    }
    let owned: Vec<Tensor<T>> = inputs.iter().map(|t| (*t).clone()).collect();
    let (output, pullback): (Tensor<T>, Pullback<T>) = match prim.clone() {
        Primitive::Conv2d { stride, padding } => {
            let y = conv2d(&owned[0], &owned[1], &owned[2], stride, padding)?;
            (
                y,
                Box::new(move |dy| {
                    let (dx, dw, db) = conv2d_backward(&owned[0], &owned[1], dy, stride, padding)?;
                    Ok(vec![dx, dw, db])
                }),
            )
        }
        Primitive::DepthwiseConv2d { stride, padding, mode } => {
            let y = depthwise_conv2d_mode(&owned[0], &owned[1], &owned[2], stride, padding, mode)?;
            (
                y,
                Box::new(move |dy| {
                    let (dx, dw, db) =
                        depthwise_conv2d_backward(&owned[0], &owned[1], dy, stride, padding, mode)?;
                    Ok(vec![dx, dw, db])
                }),
            )
        }
        Primitive::TransposedConv2d { stride } => {
            let y = transposed_conv2d(&owned[0], &owned[1], Some(&owned[2]), stride)?;
            (
                y,
                Box::new(move |dy| {
                    let (dx, dw, db) = transposed_conv2d_backward(&owned[0], &owned[1], dy, stride)?;
                    Ok(vec![dx, dw, db])
                }),
            )
        }
        Primitive::LayerNorm { eps } => {
            let (y, cache) = layer_norm(&owned[0], &owned[1], &owned[2], eps)?;
            let gamma = owned[1].clone();
            (
                y,
                Box::new(move |dy| {
                    let (dx, dg, db) = layer_norm_backward(&cache, &gamma, dy)?;
                    Ok(vec![dx, dg, db])
                }),
            )
        }
        Primitive::BatchNorm { eps } => {
            let c = owned[0].dims4("batch_norm")?.1;
            let out = batch_norm(
                &owned[0],
                &owned[1],
                &owned[2],
                &RunningStats::new(c),
                Mode::Train,
                eps,
                Some(BN_MOMENTUM),
            )?;
            let (cache, gamma) = (out.cache, owned[1].clone());
            (
                out.y,
                Box::new(move |dy| {
                    let (dx, dg, db) = batch_norm_backward(&cache, &gamma, dy, Mode::Train)?;
                    Ok(vec![dx, dg, db])
                }),
            )
        }
        Primitive::Gelu => (
            gelu(&owned[0]),
            Box::new(move |dy| Ok(vec![gelu_backward(&owned[0], dy)?])),
        ),
        Primitive::Sigmoid => {
            let y = sigmoid(&owned[0]);
            let saved = y.clone();
            (y, Box::new(move |dy| Ok(vec![sigmoid_backward(&saved, dy)?])))
        }
        Primitive::Softmax { axis } => {
            let y = softmax(&owned[0], axis)?;
            let saved = y.clone();
            (
                y,
                Box::new(move |dy| Ok(vec![softmax_backward(&saved, dy, axis)?])),
            )
        }
        Primitive::GlobalAvgPool => {
            let shape = owned[0].shape().to_vec();
            (
                global_avg_pool(&owned[0])?,
                Box::new(move |dy| Ok(vec![global_avg_pool_backward(&shape, dy)?])),
            )
        }
        Primitive::ChannelPool => (
            channel_pool(&owned[0])?,
            Box::new(move |dy| Ok(vec![channel_pool_backward(&owned[0], dy)?])),
        ),
        Primitive::BilinearUpsample { out_h, out_w } => {
            let (_, _, h, w) = owned[0].dims4("bilinear_upsample")?;
            let (oh, ow) = if out_h == 0 { (2 * h, 2 * w) } else { (out_h, out_w) };
            let shape = owned[0].shape().to_vec();
            (
                bilinear_upsample(&owned[0], oh, ow)?,
                Box::new(move |dy| Ok(vec![bilinear_upsample_backward(&shape, dy)?])),
            )
        }
        Primitive::Matmul => (
            matmul(&owned[0], &owned[1])?,
            Box::new(move |dy| {
                let (da, db) = matmul_backward(&owned[0], &owned[1], dy)?;
                Ok(vec![da, db])
            }),
        ),
        Primitive::Concat => {
            let refs: Vec<&Tensor<T>> = owned.iter().collect();
            let y = concat_channels(&refs)?;
            let sizes: Vec<usize> = owned.iter().map(|t| t.shape()[1]).collect();
            (y, Box::new(move |dy| split_channels(dy, &sizes)))
        }
        Primitive::Add => {
            let (sa, sb) = (owned[0].shape().to_vec(), owned[1].shape().to_vec());
            (
                add(&owned[0], &owned[1])?,
                Box::new(move |dy| {
                    let (da, db) = add_backward(&sa, &sb, dy)?;
                    Ok(vec![da, db])
                }),
            )
        }
        Primitive::Mul => (
            mul(&owned[0], &owned[1])?,
            Box::new(move |dy| {
                let (da, db) = mul_backward(&owned[0], &owned[1], dy)?;
                Ok(vec![da, db])
            }),
        ),
        Primitive::Reshape { shape } => {
            let target = if shape.is_empty() { vec![owned[0].len()] } else { shape };
            let source = owned[0].shape().to_vec();
            (
                owned[0].reshape(&target)?,
                Box::new(move |dy| Ok(vec![dy.reshape(&source)?])),
            )
        }
    };
    Ok(Vjp { output, pullback })
}

/// Input cotangents of `prim` at `inputs` for the output cotangent `cotangent`.
pub fn vjp_of<T: Float>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    cotangent: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let v = vjp(prim, inputs)?;
    v.output.expect_same_shape(cotangent, "vjp_of")?;
    (v.pullback)(cotangent)
}
