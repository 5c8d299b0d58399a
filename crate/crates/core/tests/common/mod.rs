#![allow(dead_code)]

use catfa_core::params::{Kind, ParamStore};
use catfa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Zeroes every learnable tensor whose name contains `pattern`.
pub fn zero_params(store: &mut ParamStore<f64>, pattern: &str) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let slot = store.slot(id);
        if slot.kind == Kind::Learnable && slot.name.contains(pattern) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(store.id(name).unwrap()).data().to_vec()
}

pub fn set_param(store: &mut ParamStore<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.id(name).unwrap();
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

/// Token-major view `[N][C]` of one batch item of a BCHW tensor.
pub fn tokens(x: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (c, n) = (s[1], s[2] * s[3]);
    (0..n)
        .map(|t| (0..c).map(|ch| x.data()[(b * c + ch) * n + t]).collect())
        .collect()
}

/// `y = W x + b` per token with `W` stored `[out][in]` row-major.
pub fn linear(xs: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let cout = b.len();
    xs.iter()
        .map(|x| {
            (0..cout)
                .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| w[o * x.len() + i] * v).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Loop-based `softmax(q k^T / sqrt(d)) v` for token-major rows.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(p, vj)| p / z * vj[c]).sum())
                .collect()
        })
        .collect()
}
