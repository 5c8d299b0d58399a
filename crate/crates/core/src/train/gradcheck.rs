//! Central finite-difference gradient checks.
//!
//! A target maps `(params, inputs)` to an output tensor `y`. The scalar probed
//! is `L = sum(w * y)` for a fixed random `w`, so the analytic side is the
//! pullback of `w`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CatBlock, Dfcn};
use crate::blocks::{ConvGNeXtBlock, ConvNeXtBlock};
use crate::error::{Error, Result};
use crate::fusion::{Cctfa, Safg};
use crate::layers::Ctx;
use crate::model::{Model, ModelConfig};
use crate::ops::norm::Mode;
use crate::params::{Grads, Init, Kind, ParamBuilder, ParamStore};
use crate::train::loss::{dice_loss_value, generalized_dice_loss, DEFAULT_EPS};
use crate::ops::conv::PadMode;
use crate::ops::norm::{BN_EPS, LN_EPS};
use crate::tensor::Tensor;
use crate::vjp::{vjp, vjp_of, Primitive};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor relative to the largest gradient in the target, so
/// tensors whose true gradient vanishes (shift-invariant biases) compare on
/// the target's scale instead of dividing rounding noise by itself.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Half-width of the uniform redraw of model parameters before a check.
pub const MODEL_SCALE: f64 = 0.3;

pub type EvalFn<'a> = Box<dyn Fn(&ParamStore<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'a>;
pub type GradFn<'a> = Box<
    dyn Fn(&ParamStore<f64>, &[Tensor<f64>], &Tensor<f64>) -> Result<(Vec<Tensor<f64>>, Grads<f64>)>
        + 'a,
>;

pub struct Target<'a> {
    pub name: String,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub eval: EvalFn<'a>,
    pub grad: GradFn<'a>,
}

#[derive(Clone, Copy, Debug)]
pub enum Sample {
    /// Every coordinate of every tensor.
    All,
    /// At most this many coordinates per tensor.
    PerTensor(usize),
    /// This many parameter coordinates drawn across all learnable tensors,
    /// compared as one group; inputs use the same per-tensor cap.
    Params(usize),
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// `(tensor name, relative error)` for every checked tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `max|a - n| / max(|a|, |n|, floor)` over the listed coordinates.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let denom = inf_norm(analytic).max(inf_norm(numeric)).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn pick(rng: &mut ChaCha8Rng, len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

enum Coord {
    Input(usize, usize),
    Param(usize, usize),
}

/// Runs the check. Non-finite analytic gradients are reported as an error.
pub fn check(target: &Target<'_>, seed: u64, sample_mode: Sample) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = (target.eval)(&target.store, &target.inputs)?;
    let w = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let (din, dparams) = (target.grad)(&target.store, &target.inputs, &w)?;
    if din.len() != target.inputs.len() {
        return Err(Error::Arity {
            op: "gradcheck",
            expected: target.inputs.len(),
            got: din.len(),
        });
    }
    if din.iter().any(|g| !g.is_finite()) || !dparams.is_finite() {
        return Err(Error::NonFinite(format!("analytic gradient of {}", target.name)));
    }

    let cap = match sample_mode {
        Sample::All => None,
        Sample::PerTensor(k) | Sample::Params(k) => Some(k),
    };
    // groups of (label, coordinates)
    let mut groups: Vec<(String, Vec<Coord>)> = Vec::new();
    for (i, x) in target.inputs.iter().enumerate() {
        let coords = pick(&mut rng, x.len(), cap).into_iter().map(|j| Coord::Input(i, j));
        groups.push((format!("input{i}"), coords.collect()));
    }
    let learnable: Vec<_> = target.store.learnable_ids().collect();
    match sample_mode {
        Sample::Params(k) => {
            let sizes: Vec<usize> = learnable.iter().map(|&id| target.store.get(id).len()).collect();
            let total: usize = sizes.iter().sum();
            let mut flat = pick(&mut rng, total, Some(k));
            flat.sort_unstable();
            let mut coords = Vec::with_capacity(flat.len());
            let (mut slot, mut start) = (0, 0);
            for f in flat {
                while f >= start + sizes[slot] {
                    start += sizes[slot];
                    slot += 1;
                }
                coords.push(Coord::Param(learnable[slot].index(), f - start));
            }
            groups.push(("params".into(), coords));
        }
        _ => {
            for &id in &learnable {
                let len = target.store.get(id).len();
                let coords = pick(&mut rng, len, cap).into_iter().map(|j| Coord::Param(id.index(), j));
                groups.push((target.store.slot(id).name.clone(), coords.collect()));
            }
        }
    }

    let mut store = target.store.clone();
    let mut inputs = target.inputs.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut loss_at = |coord: &Coord, delta: f64| -> Result<f64> {
        let cell = match *coord {
            Coord::Input(i, j) => &mut inputs[i].data_mut()[j],
            Coord::Param(s, j) => &mut store.get_mut(ids[s]).data_mut()[j],
        };
        let orig = *cell;
        *cell = orig + delta;
        let out = (target.eval)(&store, &inputs);
        let cell = match *coord {
            Coord::Input(i, j) => &mut inputs[i].data_mut()[j],
            Coord::Param(s, j) => &mut store.get_mut(ids[s]).data_mut()[j],
        };
        *cell = orig;
        out?.dot(&w)
    };

    let mut pairs: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (label, coords) in &groups {
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for c in coords {
            analytic.push(match *c {
                Coord::Input(i, j) => din[i].data()[j],
                Coord::Param(s, j) => dparams.get(ids[s]).data()[j],
            });
            let (lp, lm) = (loss_at(c, FD_STEP)?, loss_at(c, -FD_STEP)?);
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
        pairs.push((label.clone(), analytic, numeric));
    }
    let scale = pairs
        .iter()
        .map(|(_, a, n)| inf_norm(a).max(inf_norm(n)))
        .fold(0.0, f64::max);
    let per_tensor: Vec<(String, f64)> = pairs
        .iter()
        .map(|(l, a, n)| (l.clone(), rel_err(a, n, SCALE_FLOOR * scale)))
        .collect();
    let max_rel_err = per_tensor.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(CheckResult {
        name: target.name.clone(),
        per_tensor,
        max_rel_err,
    })
}

/// Redraws every learnable tensor uniformly in `[-scale, scale]` (norm gains
/// around 1) so checks run away from the near-zero initialization.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let slot = store.slot(id);
        if slot.kind != Kind::Learnable {
            continue;
        }
        let gain = slot.name.ends_with("gamma");
        for v in store.get_mut(id).data_mut() {
            let r: f64 = rng.gen_range(-scale..scale);
            *v = if gain { 1.0 + r } else { r };
        }
    }
}

/// Check target for one primitive, driven through [`vjp`].
pub fn primitive_target<'a>(prim: Primitive, inputs: Vec<Tensor<f64>>) -> Target<'a> {
    let name = prim.name().to_string();
    let fwd = prim.clone();
    Target {
        name,
        store: ParamStore::new(),
        inputs,
        eval: Box::new(move |_, x| {
            let refs: Vec<&Tensor<f64>> = x.iter().collect();
            Ok(vjp(&fwd, &refs)?.output)
        }),
        grad: Box::new(move |s, x, dy| {
            let refs: Vec<&Tensor<f64>> = x.iter().collect();
            Ok((vjp_of(&prim, &refs, dy)?, Grads::zeros_like(s)))
        }),
    }
}

/// One random instance of every primitive.
pub fn primitive_targets<'a>(seed: u64) -> Vec<Target<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rnd = |s: &[usize]| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0));
    vec![
        primitive_target(
            Primitive::Conv2d { stride: 2, padding: 1 },
            vec![rnd(&[2, 3, 5, 5]), rnd(&[4, 3, 3, 3]), rnd(&[4])],
        ),
        primitive_target(
            Primitive::DepthwiseConv2d { stride: 1, padding: 3, mode: PadMode::Zero },
            vec![rnd(&[2, 3, 6, 5]), rnd(&[3, 1, 7, 7]), rnd(&[3])],
        ),
        primitive_target(
            Primitive::DepthwiseConv2d { stride: 1, padding: 1, mode: PadMode::Circular },
            vec![rnd(&[1, 2, 4, 5]), rnd(&[2, 1, 3, 3]), rnd(&[2])],
        ),
        primitive_target(
            Primitive::DepthwiseConv2d { stride: 1, padding: 1, mode: PadMode::Reflect },
            vec![rnd(&[1, 2, 4, 5]), rnd(&[2, 1, 3, 3]), rnd(&[2])],
        ),
        primitive_target(
            Primitive::TransposedConv2d { stride: 2 },
            vec![rnd(&[2, 3, 3, 2]), rnd(&[3, 2, 2, 2]), rnd(&[2])],
        ),
        primitive_target(
            Primitive::LayerNorm { eps: LN_EPS },
            vec![rnd(&[2, 5, 3, 3]), rnd(&[5]), rnd(&[5])],
        ),
        primitive_target(
            Primitive::BatchNorm { eps: BN_EPS },
            vec![rnd(&[3, 4, 2, 3]), rnd(&[4]), rnd(&[4])],
        ),
        primitive_target(Primitive::Gelu, vec![rnd(&[2, 3, 4, 4]).scale(3.0)]),
        primitive_target(Primitive::Sigmoid, vec![rnd(&[2, 3, 4, 4]).scale(3.0)]),
        primitive_target(Primitive::Softmax { axis: 1 }, vec![rnd(&[2, 5, 3, 3]).scale(2.0)]),
        primitive_target(Primitive::Softmax { axis: 3 }, vec![rnd(&[2, 2, 3, 6]).scale(2.0)]),
        primitive_target(Primitive::GlobalAvgPool, vec![rnd(&[2, 3, 4, 5])]),
        primitive_target(Primitive::ChannelPool, vec![rnd(&[2, 4, 3, 3])]),
        primitive_target(
            Primitive::BilinearUpsample { out_h: 8, out_w: 6 },
            vec![rnd(&[2, 2, 3, 3])],
        ),
        primitive_target(Primitive::Matmul, vec![rnd(&[4, 6]), rnd(&[6, 3])]),
        primitive_target(Primitive::Concat, vec![rnd(&[2, 2, 3, 3]), rnd(&[2, 3, 3, 3])]),
        primitive_target(Primitive::Add, vec![rnd(&[2, 3, 4, 4]), rnd(&[2, 3, 1, 1])]),
        primitive_target(Primitive::Mul, vec![rnd(&[2, 1, 4, 4]), rnd(&[2, 3, 4, 4])]),
        primitive_target(Primitive::Reshape { shape: vec![6, 4] }, vec![rnd(&[2, 3, 4])]),
    ]
}

/// Which family of targets a check run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "primitives" => Some(Scope::Primitives),
            "blocks" => Some(Scope::Blocks),
            "model" => Some(Scope::Model),
            _ => None,
        }
    }

    /// Maximum relative error allowed for this scope.
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Primitives => 1e-6,
            Scope::Blocks => 1e-4,
            Scope::Model => 1e-3,
        }
    }

    pub fn sample(self) -> Sample {
        match self {
            Scope::Primitives => Sample::All,
            Scope::Blocks => Sample::PerTensor(24),
            Scope::Model => Sample::Params(100),
        }
    }

    pub fn targets<'a>(self, seed: u64) -> Result<Vec<Target<'a>>> {
        match self {
            Scope::Primitives => Ok(primitive_targets(seed)),
            Scope::Blocks => block_targets(seed),
            Scope::Model => Ok(vec![model_target(seed)?]),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn built<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> Result<(B, ParamStore<f64>)> {
    let mut init = Init::new(seed);
    let block = f(&mut init.root())?;
    let mut store = init.finish();
    randomize(&mut store, seed ^ 0xb10c, 0.3);
    Ok((block, store))
}

/// One small random instance of every composite block.
pub fn block_targets<'a>(seed: u64) -> Result<Vec<Target<'a>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (cat, store) = built(seed, |pb| CatBlock::new(pb, 8, 2, 2, PadMode::Zero))?;
    out.push(Target {
        name: "cat_block".into(),
        store,
        inputs: vec![uniform(&mut rng, &[1, 8, 8, 8], 1.0)],
        eval: Box::new(move |s, x| Ok(cat.forward(s, &x[0])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = cat.forward(s, &x[0])?;
            let mut g = Grads::zeros_like(s);
            let dx = cat.backward(s, &c, dy, &mut g)?;
            Ok((vec![dx], g))
        }),
    });

    let (dfcn, store) = built(seed + 1, |pb| Dfcn::new(pb, 4, PadMode::Zero))?;
    out.push(Target {
        name: "dfcn".into(),
        store,
        inputs: vec![uniform(&mut rng, &[1, 4, 6, 6], 1.0)],
        eval: Box::new(move |s, x| Ok(dfcn.forward(s, &x[0])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = dfcn.forward(s, &x[0])?;
            let mut g = Grads::zeros_like(s);
            let dx = dfcn.backward(s, &c, dy, &mut g)?;
            Ok((vec![dx], g))
        }),
    });

    let (cnx, store) = built(seed + 2, |pb| ConvNeXtBlock::new(pb, 4))?;
    out.push(Target {
        name: "convnext".into(),
        store,
        inputs: vec![uniform(&mut rng, &[1, 4, 6, 6], 1.0)],
        eval: Box::new(move |s, x| Ok(cnx.forward(s, &x[0])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = cnx.forward(s, &x[0])?;
            let mut g = Grads::zeros_like(s);
            let dx = cnx.backward(s, &c, dy, &mut g)?;
            Ok((vec![dx], g))
        }),
    });

    let (cgn, store) = built(seed + 3, |pb| ConvGNeXtBlock::new(pb, 4))?;
    out.push(Target {
        name: "conv_g_next".into(),
        store,
        inputs: vec![uniform(&mut rng, &[2, 4, 6, 6], 1.0)],
        eval: Box::new(move |s, x| Ok(cgn.forward(&mut Ctx::new(s, Mode::Train), &x[0])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = cgn.forward(&mut Ctx::new(s, Mode::Train), &x[0])?;
            let mut g = Grads::zeros_like(s);
            let dx = cgn.backward(s, &c, dy, &mut g)?;
            Ok((vec![dx], g))
        }),
    });

    let (cctfa, store) = built(seed + 4, |pb| Cctfa::new(pb, 4))?;
    out.push(Target {
        name: "cctfa".into(),
        store,
        inputs: vec![uniform(&mut rng, &[1, 4, 8, 8], 1.0), uniform(&mut rng, &[1, 4, 8, 8], 1.0)],
        eval: Box::new(move |s, x| Ok(cctfa.forward(s, &x[0], &x[1])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = cctfa.forward(s, &x[0], &x[1])?;
            let mut g = Grads::zeros_like(s);
            let (dt, dc) = cctfa.backward(s, &c, dy, &mut g)?;
            Ok((vec![dt, dc], g))
        }),
    });

    let (safg, store) = built(seed + 5, |pb| Safg::new(pb, 4))?;
    out.push(Target {
        name: "safg".into(),
        store,
        inputs: vec![uniform(&mut rng, &[2, 4, 4, 4], 2.0), uniform(&mut rng, &[2, 4, 4, 4], 2.0)],
        eval: Box::new(move |s, x| Ok(safg.forward(s, &x[0], &x[1])?.0)),
        grad: Box::new(move |s, x, dy| {
            let (_, c) = safg.forward(s, &x[0], &x[1])?;
            let mut g = Grads::zeros_like(s);
            let (de, dd) = safg.backward(s, &c, dy, &mut g)?;
            Ok((vec![de, dd], g))
        }),
    });
    Ok(out)
}

/// Dice loss of the tiny network (base width 8, 64×64, batch 2) as a one-element output.
pub fn model_target<'a>(seed: u64) -> Result<Target<'a>> {
    let cfg = ModelConfig::tiny(8, 64);
    let (model, mut store) = Model::build::<f64>(&cfg, seed)?;
    // at the default initialization most parameter gradients sit below finite-difference noise
    randomize(&mut store, seed ^ 0xb10c, MODEL_SCALE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0de1);
    let x = uniform(&mut rng, &[2, 3, 64, 64], 1.0);
    let r = Tensor::from_fn(&[2, 1, 64, 64], |i| {
        let (y, xx) = ((i / 64) % 64, i % 64);
        let (cy, cx) = (20.0 + 20.0 * (i / 4096) as f64, 30.0);
        ((y as f64 - cy).powi(2) + (xx as f64 - cx).powi(2) < 144.0) as u8 as f64
    });
    let (x2, r2) = (x.clone(), r.clone());
    let (m1, m2) = (model.clone(), model);
    Ok(Target {
        name: "model".into(),
        store,
        inputs: vec![],
        eval: Box::new(move |s, _| {
            let (y, _) = m1.forward(&mut Ctx::new(s, Mode::Train), &x)?;
            Ok(Tensor::full(&[1], dice_loss_value(&y, &r, DEFAULT_EPS)?))
        }),
        grad: Box::new(move |s, _, dl| {
            let (y, cache) = m2.forward(&mut Ctx::new(s, Mode::Train), &x2)?;
            let loss = generalized_dice_loss(&y, &r2, DEFAULT_EPS)?;
            let mut g = Grads::zeros_like(s);
            m2.backward(s, &cache, &loss.grad.scale(dl.data()[0]), &mut g)?;
            Ok((vec![], g))
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, matmul_backward};

    fn matmul_target<'a>() -> Target<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rnd = |s: &[usize]| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0));
        Target {
            name: "matmul".into(),
            store: ParamStore::new(),
            inputs: vec![rnd(&[3, 4]), rnd(&[4, 5])],
            eval: Box::new(|_, x| matmul(&x[0], &x[1])),
            grad: Box::new(|s, x, dy| {
                let (a, b) = matmul_backward(&x[0], &x[1], dy)?;
                Ok((vec![a, b], Grads::zeros_like(s)))
            }),
        }
    }

    #[test]
    fn bilinear_map_is_exact() {
        let r = check(&matmul_target(), 0, Sample::All).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut t = matmul_target();
        t.grad = Box::new(|s, x, dy| {
            let (a, b) = matmul_backward(&x[0], &x[1], dy)?;
            Ok((vec![a.scale(1.01), b], Grads::zeros_like(s)))
        });
        assert!(check(&t, 0, Sample::All).unwrap().max_rel_err > 1e-3);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for t in primitive_targets(11) {
            let r = check(&t, 5, Sample::All).unwrap();
            assert!(r.max_rel_err < 1e-6, "{}: {:?}", t.name, r.per_tensor);
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(&[0.0], &[0.0], 0.0), 0.0);
        assert!((rel_err(&[1e-12], &[0.0], 1.0) - 1e-12).abs() < 1e-24);
        assert!((rel_err(&[2.0], &[1.0], 0.0) - 0.5).abs() < 1e-15);
    }
}
