//! Timing of the attention kernel against the token reduction ratio.

use crate::attention::{attention_macs, multi_head_attention, reduction_factors, scaled_attention};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub reduction: usize,
    pub tokens: usize,
    pub kv_tokens: usize,
    pub macs: u64,
    pub median_secs: f64,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn side(tokens: usize) -> Result<usize> {
    let s = (tokens as f64).sqrt().round() as usize;
    if s * s != tokens || s == 0 {
        return Err(Error::InvalidConfig(vec![format!("{tokens} tokens do not form a square grid")]));
    }
    Ok(s)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    // one untimed warm-up
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut t))
}

/// Single-head attention of `tokens` queries over keys reduced by each ratio.
pub fn bench_attention(tokens: usize, channels: usize, reductions: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let s = side(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random(&mut rng, &[1, channels, s, s]);
    let mut rows = Vec::with_capacity(reductions.len());
    for &r in reductions {
        if r == 0 {
            return Err(Error::InvalidConfig(vec!["reduction ratio must be positive".into()]));
        }
        let (rr, rc) = reduction_factors(r);
        if s % rr != 0 || s % rc != 0 {
            return Err(Error::Indivisible {
                op: "bench_attention",
                axis: if s % rr != 0 { "height" } else { "width" },
                extent: s,
                factor: if s % rr != 0 { rr } else { rc },
            });
        }
        let k = random(&mut rng, &[1, channels, s / rr, s / rc]);
        let v = random(&mut rng, &[1, channels, s / rr, s / rc]);
        let secs = time_reps(reps, || multi_head_attention(&q, &k, &v, 1).map(|_| ()))?;
        let kv = (s / rr) * (s / rc);
        rows.push(BenchRow {
            reduction: r,
            tokens,
            kv_tokens: kv,
            macs: attention_macs(tokens as u64, kv as u64, channels as u64),
            median_secs: secs,
        });
    }
    Ok(rows)
}

/// Median time of plain token-major `softmax(QK^T / sqrt(d)) V` without reduction.
pub fn bench_standard(tokens: usize, channels: usize, reps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, k, v) = (
        random(&mut rng, &[tokens, channels]),
        random(&mut rng, &[tokens, channels]),
        random(&mut rng, &[tokens, channels]),
    );
    time_reps(reps, || scaled_attention(&q, &k, &v).map(|_| ()))
}

pub fn to_csv(rows: &[BenchRow], standard_secs: Option<f64>) -> String {
    let mut s = String::from("reduction,tokens,kv_tokens,macs,median_secs\n");
    for r in rows {
        s += &format!("{},{},{},{},{:.6}\n", r.reduction, r.tokens, r.kv_tokens, r.macs, r.median_secs);
    }
    if let Some(t) = standard_secs {
        let n = rows.first().map_or(0, |r| r.tokens);
        let macs = rows.iter().find(|r| r.reduction == 1).map_or(0, |r| r.macs);
        s += &format!("standard,{n},{n},{macs},{t:.6}\n");
    }
    s
}
