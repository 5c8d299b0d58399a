//! Synthetic segmentation data: bright ellipses and rectangles over smooth
//! correlated noise, with exact binary masks.

use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;
use crate::tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T: Float> {
    /// `[3, H, W]` on the unit scale.
    pub image: Tensor<T>,
    /// `[1, H, W]`, values 0 or 1.
    pub mask: Tensor<T>,
}

impl<T: Float> SynthSample<T> {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|v| v.as_f64()).sum::<f64>() / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// 1 to 3 labelled shapes anywhere.
    Shapes,
    /// One labelled shape in the top-left quadrant, 1 or 2 unlabelled
    /// look-alikes elsewhere. Only position tells them apart.
    Quadrant,
}

impl SynthTask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shapes" => Some(SynthTask::Shapes),
            "quadrant" => Some(SynthTask::Quadrant),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Ellipse,
    Rect,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    intensity: f64,
    tint: [f64; 3],
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind {
            Kind::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            Kind::Rect => u.abs() <= self.rx && v.abs() <= self.ry,
        }
    }
}

/// Pixel window a shape is placed in.
struct Region {
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
}

fn draw_shape(rng: &mut ChaCha8Rng, region: &Region, rmin: f64, rmax: f64) -> Shape {
    let kind = if rng.gen_bool(0.5) { Kind::Ellipse } else { Kind::Rect };
    let mut ry = rng.gen_range(rmin..rmax);
    let mut rx = rng.gen_range(rmin..rmax);
    // farthest point from the centre under any rotation
    let reach = |ry: f64, rx: f64| match kind {
        Kind::Ellipse => ry.max(rx),
        Kind::Rect => ry.hypot(rx),
    };
    let room = (region.y1 - region.y0).min(region.x1 - region.x0) / 2.0;
    if reach(ry, rx) > room {
        let k = room / reach(ry, rx);
        ry *= k;
        rx *= k;
    }
    let pad = reach(ry, rx);
    let mut pick = |lo: f64, hi: f64| {
        let (a, b) = (lo + pad, hi - pad);
        if a < b {
            rng.gen_range(a..=b)
        } else {
            (lo + hi) / 2.0
        }
    };
    let (cy, cx) = (pick(region.y0, region.y1), pick(region.x0, region.x1));
    let tint_base: f64 = rng.gen_range(0.85..1.0);
    Shape {
        kind,
        cy,
        cx,
        ry,
        rx,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        intensity: rng.gen_range(0.6..0.95),
        tint: [tint_base, rng.gen_range(0.85..1.0), rng.gen_range(0.85..1.0)],
    }
}

fn background(rng: &mut ChaCha8Rng, hw: usize) -> Vec<f64> {
    let mut img = vec![0.0; 3 * hw * hw];
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(1.0..4.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            ]
        })
        .collect();
    let base: f64 = rng.gen_range(0.1..0.25);
    for c in 0..3 {
        let shift = c as f64 * 0.7;
        for y in 0..hw {
            for x in 0..hw {
                let (fy, fx) = (y as f64 / hw as f64, x as f64 / hw as f64);
                let smooth: f64 = waves
                    .iter()
                    .map(|w| w[3] * (std::f64::consts::TAU * (w[0] * fy + w[1] * fx) + w[2] + shift).sin())
                    .sum();
                img[(c * hw + y) * hw + x] = base + smooth + rng.gen_range(-0.04..0.04);
            }
        }
    }
    img
}

fn render<T: Float>(rng: &mut ChaCha8Rng, hw: usize, labelled: &[Shape], decoys: &[Shape]) -> SynthSample<T> {
    let mut img = background(rng, hw);
    let mut mask = vec![0.0; hw * hw];
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..hw {
        for x in 0..hw {
            let centre = (y as f64 + 0.5, x as f64 + 0.5);
            if labelled.iter().any(|s| s.contains(centre.0, centre.1)) {
                mask[y * hw + x] = 1.0;
            }
            for s in labelled.iter().chain(decoys) {
                let mut hits = 0;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let (py, px) = (y as f64 + (i as f64 + 0.5) * sub, x as f64 + (j as f64 + 0.5) * sub);
                        hits += s.contains(py, px) as usize;
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if cover > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[(c * hw + y) * hw + x];
                        *p = (1.0 - cover) * *p + cover * s.intensity * s.tint[c];
                    }
                }
            }
        }
    }
    SynthSample {
        image: Tensor::new(&[3, hw, hw], img.into_iter().map(T::of).collect()).expect("sized"),
        mask: Tensor::new(&[1, hw, hw], mask.into_iter().map(T::of).collect()).expect("sized"),
    }
}

fn sample<T: Float>(rng: &mut ChaCha8Rng, hw: usize, task: SynthTask) -> SynthSample<T> {
    let h = hw as f64;
    let whole = Region {
        y0: 0.0,
        y1: h,
        x0: 0.0,
        x1: h,
    };
    loop {
        let (labelled, decoys): (Vec<Shape>, Vec<Shape>) = match task {
            SynthTask::Shapes => {
                let n = rng.gen_range(1..=3);
                ((0..n).map(|_| draw_shape(rng, &whole, 0.12 * h, 0.28 * h)).collect(), vec![])
            }
            SynthTask::Quadrant => {
                let q = |qy: usize, qx: usize| Region {
                    y0: qy as f64 * h / 2.0,
                    y1: (qy + 1) as f64 * h / 2.0,
                    x0: qx as f64 * h / 2.0,
                    x1: (qx + 1) as f64 * h / 2.0,
                };
                let target = draw_shape(rng, &q(0, 0), 0.1 * h, 0.2 * h);
                let n = rng.gen_range(1..=2);
                let decoys = [(0, 1), (1, 0), (1, 1)]
                    .choose_multiple(rng, n)
                    .map(|&(qy, qx)| draw_shape(rng, &q(qy, qx), 0.1 * h, 0.2 * h))
                    .collect();
                (vec![target], decoys)
            }
        };
        let s = render(rng, hw, &labelled, &decoys);
        let f = s.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            return s;
        }
    }
}

pub fn make_synth_dataset<T: Float>(n: usize, hw: usize, seed: u64) -> Result<Vec<SynthSample<T>>> {
    make_task_dataset(n, hw, seed, SynthTask::Shapes)
}

pub fn make_task_dataset<T: Float>(n: usize, hw: usize, seed: u64, task: SynthTask) -> Result<Vec<SynthSample<T>>> {
    if hw == 0 || hw % INPUT_MULTIPLE != 0 {
        return Err(Error::Indivisible {
            op: "make_synth_dataset",
            axis: "height",
            extent: hw,
            factor: INPUT_MULTIPLE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample(&mut rng, hw, task)).collect())
}

/// Per-image, per-channel shift to zero mean and unit variance.
pub fn standardize<T: Float>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut out = image.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for v in chunk.iter_mut() {
            *v = T::of((v.as_f64() - mean) * inv);
        }
    }
    out
}

/// Deterministic shuffled split into `(train, val)` indices, 75/25.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let n_val = n / 4;
    let val = idx.split_off(n - n_val);
    (idx, val)
}
