//! The full segmentation network: dual-branch encoder, fused skips, gated
//! decoder and sigmoid head.

use crate::attention::{reduction_factors, CatBlock, CatBlockCache};
use crate::blocks::{ConvGNeXtBlock, ConvGNeXtCache, ConvNeXtBlock, ConvNeXtCache, PatchMerge, PatchMergeCache};
use crate::error::{Error, Result};
use crate::fusion::{Cctfa, CctfaCache, Safg, SafgCache};
use crate::layers::{check_divisible, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx};
use crate::ops::activation::{sigmoid, sigmoid_backward};
use crate::ops::conv::PadMode;
use crate::ops::norm::Mode;
use crate::ops::resize::{bilinear_upsample, bilinear_upsample_backward};
use crate::params::{Grads, Init, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tensor};

pub const STAGES: usize = 4;
/// Total downsampling of the deepest encoder stage.
pub const INPUT_MULTIPLE: usize = 32;
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; STAGES],
    pub cat_blocks: [usize; STAGES],
    pub convnext_blocks: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub reduction: [usize; STAGES],
    pub input_hw: (usize, usize),
    pub out_channels: usize,
    /// Padding of the depthwise conv inside every d-FCN.
    pub dfcn_pad: PadMode,
}

fn widths(c: usize) -> [usize; STAGES] {
    [c, 2 * c, 4 * c, 8 * c]
}

impl ModelConfig {
    pub fn variant_s() -> Self {
        ModelConfig {
            channels: widths(96),
            cat_blocks: [1, 1, 3, 1],
            convnext_blocks: [3, 3, 9, 3],
            heads: [1, 2, 4, 8],
            reduction: [8, 4, 2, 1],
            input_hw: (224, 224),
            out_channels: 1,
            dfcn_pad: PadMode::Zero,
        }
    }

    pub fn variant_l() -> Self {
        ModelConfig {
            channels: widths(128),
            cat_blocks: [2, 2, 6, 2],
            convnext_blocks: [3, 3, 27, 3],
            ..Self::variant_s()
        }
    }

    /// One block per stage in each branch, base width `c`.
    pub fn tiny(c: usize, hw: usize) -> Self {
        ModelConfig {
            channels: widths(c),
            cat_blocks: [1; STAGES],
            convnext_blocks: [1; STAGES],
            input_hw: (hw, hw),
            ..Self::variant_s()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "s" | "S" => Some(Self::variant_s()),
            "l" | "L" => Some(Self::variant_l()),
            "tiny" => Some(Self::tiny(16, 64)),
            _ => None,
        }
    }

    /// Spatial extent of encoder stage `s` (0-based) for an `h × w` input.
    pub fn stage_hw(h: usize, w: usize, s: usize) -> (usize, usize) {
        (h >> (s + 2), w >> (s + 2))
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let c = self.channels[0];
        if c < 2 || c % 2 != 0 {
            errs.push(format!("channels[0] = {c} must be even and at least 2"));
        }
        if self.channels != widths(c) {
            errs.push(format!("channels {:?} must be C*(1,2,4,8), expected {:?}", self.channels, widths(c)));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            errs.push(format!("input_hw {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"));
        }
        if self.out_channels != 1 {
            errs.push(format!("out_channels = {} unsupported, only 1", self.out_channels));
        }
        for s in 0..STAGES {
            let (ch, m, r) = (self.channels[s], self.heads[s], self.reduction[s]);
            if m == 0 || ch % m != 0 {
                errs.push(format!("stage {}: {m} heads do not divide {ch} channels", s + 1));
            }
            if r == 0 {
                errs.push(format!("stage {}: reduction must be positive", s + 1));
                continue;
            }
            let (rr, rc) = reduction_factors(r);
            let (sh, sw) = Self::stage_hw(h, w, s);
            if sh % rr != 0 || sw % rc != 0 {
                errs.push(format!(
                    "stage {}: {sh}x{sw} map not divisible by reduction grid {rr}x{rc}",
                    s + 1
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Flat numeric form used in checkpoint headers.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(24);
        for arr in [self.channels, self.cat_blocks, self.convnext_blocks, self.heads, self.reduction] {
            v.extend(arr.iter().map(|&x| x as f64));
        }
        v.push(self.input_hw.0 as f64);
        v.push(self.input_hw.1 as f64);
        v.push(self.out_channels as f64);
        v.push(match self.dfcn_pad {
            PadMode::Zero => 0.0,
            PadMode::Circular => 1.0,
            PadMode::Reflect => 2.0,
        });
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != 24 || v.iter().any(|x| !(x.is_finite() && *x >= 0.0 && x.fract() == 0.0)) {
            return Err(Error::Format(format!("bad config header of {} values", v.len())));
        }
        let arr = |i: usize| -> [usize; STAGES] { std::array::from_fn(|k| v[i * STAGES + k] as usize) };
        let dfcn_pad = match v[23] as usize {
            0 => PadMode::Zero,
            1 => PadMode::Circular,
            2 => PadMode::Reflect,
            p => return Err(Error::Format(format!("unknown pad code {p}"))),
        };
        let cfg = ModelConfig {
            channels: arr(0),
            cat_blocks: arr(1),
            convnext_blocks: arr(2),
            heads: arr(3),
            reduction: arr(4),
            input_hw: (v[20] as usize, v[21] as usize),
            out_channels: v[22] as usize,
            dfcn_pad,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    cnx_down: PatchMerge,
    cnx: Vec<ConvNeXtBlock>,
    cat_down: PatchMerge,
    cat: Vec<CatBlock>,
    fusion: Cctfa,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    safg: Option<Safg>,
    block: Option<ConvGNeXtBlock>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    encoder: Vec<EncoderStage>,
    /// Deepest stage first.
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

/// Per-stage maps of both encoder branches and their fusion.
pub struct StageMaps<'a, T: Float> {
    pub conv: Vec<&'a Tensor<T>>,
    pub transformer: Vec<&'a Tensor<T>>,
    pub fused: Vec<&'a Tensor<T>>,
}

struct EncoderCache<T: Float> {
    cnx_down: PatchMergeCache<T>,
    cnx: Vec<ConvNeXtCache<T>>,
    cat_down: PatchMergeCache<T>,
    cat: Vec<CatBlockCache<T>>,
    fusion: CctfaCache<T>,
    c: Tensor<T>,
    t: Tensor<T>,
    e: Tensor<T>,
}

struct DecoderCache<T: Float> {
    input: Tensor<T>,
    safg: Option<SafgCache<T>>,
    block: Option<ConvGNeXtCache<T>>,
}

pub struct ModelCache<T: Float> {
    input_shape: Vec<usize>,
    encoder: Vec<EncoderCache<T>>,
    decoder: Vec<DecoderCache<T>>,
    head_in: Tensor<T>,
    logits_shape: Vec<usize>,
    y: Tensor<T>,
}

impl<T: Float> ModelCache<T> {
    pub fn stage_maps(&self) -> StageMaps<'_, T> {
        StageMaps {
            conv: self.encoder.iter().map(|e| &e.c).collect(),
            transformer: self.encoder.iter().map(|e| &e.t).collect(),
            fused: self.encoder.iter().map(|e| &e.e).collect(),
        }
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.y
    }
}

impl Model {
    /// Builds the network and draws its parameters from `seed`.
    pub fn build<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut init = Init::<T>::new(seed);
        let model = Self::build_into(config, &mut init.root())?;
        Ok((model, init.finish()))
    }

    fn build_into<T: Float>(cfg: &ModelConfig, root: &mut ParamBuilder<'_, T>) -> Result<Model> {
        let mut encoder = Vec::with_capacity(STAGES);
        let mut enc = root.child("enc");
        for s in 0..STAGES {
            let ch = cfg.channels[s];
            let cin = if s == 0 { IN_CHANNELS } else { cfg.channels[s - 1] };
            let mut sb = enc.child(&format!("s{}", s + 1));
            let (cnx_k, cat_k, stride) = if s == 0 { (4, 7, 4) } else { (2, 3, 2) };
            let cnx_down = PatchMerge::new(&mut sb.child("cnx_down"), cin, ch, cnx_k, stride)?;
            let cnx = (0..cfg.convnext_blocks[s])
                .map(|i| ConvNeXtBlock::new(&mut sb.child(&format!("cnx{i}")), ch))
                .collect::<Result<Vec<_>>>()?;
            let cat_down = PatchMerge::new(&mut sb.child("cat_down"), cin, ch, cat_k, stride)?;
            let cat = (0..cfg.cat_blocks[s])
                .map(|i| {
                    CatBlock::new(
                        &mut sb.child(&format!("cat{i}")),
                        ch,
                        cfg.heads[s],
                        cfg.reduction[s],
                        cfg.dfcn_pad,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let fusion = Cctfa::new(&mut sb, ch)?;
            encoder.push(EncoderStage {
                cnx_down,
                cnx,
                cat_down,
                cat,
                fusion,
            });
        }
        let mut dec = root.child("dec");
        let mut decoder = Vec::with_capacity(STAGES);
        for s in (0..STAGES).rev() {
            let cin = cfg.channels[s];
            let cout = cin / 2;
            let mut sb = dec.child(&format!("s{}", s + 1));
            let up = ConvTranspose2d::new(&mut sb, "up", cin, cout, 2)?;
            let (safg, block) = if s > 0 {
                (
                    Some(Safg::new(&mut sb, cout)?),
                    Some(ConvGNeXtBlock::new(&mut sb.child("cgn"), cout)?),
                )
            } else {
                (None, None)
            };
            decoder.push(DecoderStage { up, safg, block });
        }
        let head = Conv2d::pointwise(&mut dec, "head", cfg.channels[0] / 2, cfg.out_channels)?;
        Ok(Model {
            config: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn batch_norms(&self) -> Vec<BatchNorm2d> {
        self.decoder.iter().filter_map(|d| d.block.map(|b| b.bn)).collect()
    }

    pub fn count_params<T: Float>(&self, params: &ParamStore<T>) -> usize {
        params.count_learnable()
    }

    /// Learnable scalars in the decoder, prediction head included.
    pub fn decoder_params<T: Float>(&self, params: &ParamStore<T>) -> usize {
        params.count_learnable_with_prefix("dec.")
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let (_, c, h, w) = x.dims4("model")?;
        if c != IN_CHANNELS {
            return Err(Error::shape("model", format!("expected {IN_CHANNELS} input channels, got {c}")));
        }
        check_divisible("model", h, w, INPUT_MULTIPLE)?;
        let params = ctx.params;

        let mut encoder = Vec::with_capacity(STAGES);
        let mut conv_in = x.clone();
        let mut cat_in = x.clone();
        for st in &self.encoder {
            let (mut c, cnx_down) = st.cnx_down.forward(params, &conv_in)?;
            let mut cnx = Vec::with_capacity(st.cnx.len());
            for b in &st.cnx {
                let (y, cache) = b.forward(params, &c)?;
                cnx.push(cache);
                c = y;
            }
            let (mut t, cat_down) = st.cat_down.forward(params, &cat_in)?;
            let mut cat = Vec::with_capacity(st.cat.len());
            for b in &st.cat {
                let (y, cache) = b.forward(params, &t)?;
                cat.push(cache);
                t = y;
            }
            let (e, fusion) = st.fusion.forward(params, &t, &c)?;
            conv_in = c.clone();
            cat_in = e.clone();
            encoder.push(EncoderCache {
                cnx_down,
                cnx,
                cat_down,
                cat,
                fusion,
                c,
                t,
                e,
            });
        }

        let mut decoder = Vec::with_capacity(STAGES);
        let mut d = encoder[STAGES - 1].e.clone();
        for (i, st) in self.decoder.iter().enumerate() {
            let input = d;
            let mut u = st.up.forward(params, &input)?;
            let mut cache = DecoderCache {
                input,
                safg: None,
                block: None,
            };
            if let Some(safg) = &st.safg {
                let skip = &encoder[STAGES - 2 - i].e;
                let (g, sc) = safg.forward(params, skip, &u)?;
                cache.safg = Some(sc);
                u = g;
            }
            if let Some(block) = &st.block {
                let (g, bc) = block.forward(ctx, &u)?;
                cache.block = Some(bc);
                u = g;
            }
            decoder.push(cache);
            d = u;
        }
        let logits = self.head.forward(params, &d)?;
        let logits_shape = logits.shape().to_vec();
        let y = sigmoid(&bilinear_upsample(&logits, h, w)?);
        Ok((
            y.clone(),
            ModelCache {
                input_shape: x.shape().to_vec(),
                encoder,
                decoder,
                head_in: d,
                logits_shape,
                y,
            },
        ))
    }

    /// Eval-mode prediction; batch-norm statistics must be populated.
    pub fn predict<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(params, Mode::Eval);
        Ok(self.forward(&mut ctx, x)?.0)
    }

    /// Accumulates parameter gradients for the output cotangent `dy`, returns the input cotangent.
    pub fn backward<T: Float>(
        &self,
        params: &ParamStore<T>,
        cache: &ModelCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dz = sigmoid_backward(&cache.y, dy)?;
        let dlogits = bilinear_upsample_backward(&cache.logits_shape, &dz)?;
        let mut dd = self.head.backward(params, &cache.head_in, &dlogits, grads)?;

        let mut de: Vec<Option<Tensor<T>>> = (0..STAGES).map(|_| None).collect();
        let add_to = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        for (i, (st, dc)) in self.decoder.iter().zip(&cache.decoder).enumerate().rev() {
            if let (Some(block), Some(bc)) = (&st.block, &dc.block) {
                dd = block.backward(params, bc, &dd, grads)?;
            }
            if let (Some(safg), Some(sc)) = (&st.safg, &dc.safg) {
                let (dskip, du) = safg.backward(params, sc, &dd, grads)?;
                add_to(&mut de[STAGES - 2 - i], dskip)?;
                dd = du;
            }
            dd = st.up.backward(params, &dc.input, &dd, grads)?;
        }
        add_to(&mut de[STAGES - 1], dd)?;

        let mut dx = Tensor::zeros(&cache.input_shape);
        let mut dconv_next: Option<Tensor<T>> = None;
        for s in (0..STAGES).rev() {
            let (st, ec) = (&self.encoder[s], &cache.encoder[s]);
            let de_s = de[s].take().unwrap_or_else(|| Tensor::zeros_like(&ec.e));
            let (mut dt, mut dc) = st.fusion.backward(params, &ec.fusion, &de_s, grads)?;
            if let Some(g) = dconv_next.take() {
                dc.add_assign(&g)?;
            }
            for (b, bc) in st.cat.iter().zip(&ec.cat).rev() {
                dt = b.backward(params, bc, &dt, grads)?;
            }
            let dcat_in = st.cat_down.backward(params, &ec.cat_down, &dt, grads)?;
            for (b, bc) in st.cnx.iter().zip(&ec.cnx).rev() {
                dc = b.backward(params, bc, &dc, grads)?;
            }
            let dconv_in = st.cnx_down.backward(params, &ec.cnx_down, &dc, grads)?;
            if s == 0 {
                dx.add_assign(&dcat_in)?;
                dx.add_assign(&dconv_in)?;
            } else {
                add_to(&mut de[s - 1], dcat_in)?;
                dconv_next = Some(dconv_in);
            }
        }
        Ok(dx)
    }
}
