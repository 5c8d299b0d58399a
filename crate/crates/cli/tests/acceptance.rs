//! End-to-end acceptance checks, one line per criterion.

use catfa_core::attention::{attention_macs, ContextAttention};
use catfa_core::bench::{bench_attention, bench_standard};
use catfa_core::io::{checkpoint, pgm, tensorfile};
use catfa_core::layers::Ctx;
use catfa_core::metrics::{self, confusion, hausdorff, signed_rank_distribution, wilcoxon_one_tailed, Mask};
use catfa_core::model::{Model, ModelConfig};
use catfa_core::ops::{Mode, PadMode};
use catfa_core::params::{Init, Kind, ParamStore};
use catfa_core::train::gradcheck::{check, randomize, Scope};
use catfa_core::train::loss::{dice_loss_value, generalized_dice_loss, DEFAULT_EPS};
use catfa_core::train::optim::AdamWConfig;
use catfa_core::train::synth::{make_task_dataset, SynthTask};
use catfa_core::train::trainer::{train, TrainConfig};
use catfa_core::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::Instant;

const GRAD_BUDGET_SECS: f64 = 300.0;
const DEGENERACY_TOL: f64 = 1e-8;
const DEGENERACY_INSTANCES: usize = 50;
const BENCH_TOKENS: usize = 4096;
const BENCH_CHANNELS: usize = 32;
const BENCH_REPS: usize = 20;
const BENCH_NOISE: f64 = 0.05;
const PERFECT_LOSS_TOL: f64 = 1e-3;
const MISMATCH_LOSS_TOL: f64 = 1e-3;
const LOSS_GRAD_TOL: f64 = 1e-8;
const METRIC_TOL: f64 = 1e-12;
const METRIC_PAIRS: usize = 1000;
const LEARN_DICE: f64 = 0.95;
const LEARN_BUDGET_SECS: f64 = 1800.0;
const LEARN_SAMPLES: usize = 200;
const LEARN_HW: usize = 64;
const LEARN_EPOCHS: usize = 30;
const LEARN_WIDTH: usize = 16;
const LEARN_LR: f64 = 1e-3;
const LEARN_BATCH: usize = 4;
const SEEDS: [u64; 3] = [0, 1, 2];
const POSITION_EPOCHS: usize = 15;

struct Verdict {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for scope in [Scope::Primitives, Scope::Blocks, Scope::Model] {
        let mut worst = (String::new(), 0.0f64);
        for t in scope.targets(0).expect("targets") {
            let err = check(&t, 0, scope.sample()).map_or(f64::INFINITY, |r| r.max_rel_err);
            if err >= worst.1 {
                worst = (t.name.clone(), err);
            }
        }
        pass &= worst.1 < scope.threshold();
        parts.push(format!("{:?} worst {} {:.1e} < {:.0e}", scope, worst.0, worst.1, scope.threshold()));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRAD_BUDGET_SECS;
    Verdict { pass, detail: format!("{}; {secs:.1}s", parts.join(", ")) }
}

fn standard_mha(store: &ParamStore<f64>, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let p = |n: &str| store.get(store.id(&format!("attn.{n}")).unwrap()).data().to_vec();
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let proj = |w: &[f64], bias: &[f64], rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| (0..c).map(|o| bias[o] + (0..c).map(|i| w[o * c + i] * r[i]).sum::<f64>()).collect())
            .collect()
    };
    let d = c / heads;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let tok: Vec<Vec<f64>> = (0..n).map(|t| (0..c).map(|ch| x.data()[(bi * c + ch) * n + t]).collect()).collect();
        let (q, k, v) = (
            proj(&p("q.weight"), &p("q.bias"), &tok),
            proj(&p("k.weight"), &p("k.bias"), &tok),
            proj(&p("v.weight"), &p("v.bias"), &tok),
        );
        let mut cat = vec![vec![0.0; c]; n];
        for m in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|e| q[i][m * d + e] * k[j][m * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..d {
                    cat[i][m * d + e] = (0..n).map(|j| ex[j] / z * v[j][m * d + e]).sum();
                }
            }
        }
        let o = proj(&p("o.weight"), &p("o.bias"), &cat);
        for (t, row) in o.iter().enumerate() {
            for ch in 0..c {
                out[(bi * c + ch) * n + t] = row[ch];
            }
        }
    }
    out
}

fn attention_degeneracy() -> Verdict {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for inst in 0..DEGENERACY_INSTANCES {
        let heads = [1, 2, 4][inst % 3];
        let c = heads * r.gen_range(1..=4);
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let mut init = Init::<f64>::new(inst as u64);
        let attn = ContextAttention::new(&mut init.root(), c, heads, 1).expect("attention");
        let mut store = init.finish();
        randomize(&mut store, 100 + inst as u64, 0.5);
        for id in store.ids().collect::<Vec<_>>() {
            let slot = store.slot(id);
            if slot.kind != Kind::Learnable {
                continue;
            }
            if slot.name.contains(".cap.") || slot.name == "attn.l.bias" {
                store.get_mut(id).data_mut().fill(0.0);
            } else if slot.name == "attn.l.weight" {
                let t = store.get_mut(id);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = if i / c == i % c { 1.0 } else { 0.0 };
                }
            }
        }
        let x = Tensor::from_fn(&[2, c, h, w], |_| r.gen_range(-1.0..1.0));
        let (y, _) = attn.forward(&store, &x).expect("forward");
        let oracle = standard_mha(&store, &x, heads);
        worst = y.data().iter().zip(&oracle).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Verdict {
        pass: worst < DEGENERACY_TOL,
        detail: format!("{DEGENERACY_INSTANCES} instances, max |diff| {worst:.1e} < {DEGENERACY_TOL:.0e}"),
    }
}

fn complexity() -> Verdict {
    let rs = [1usize, 2, 4, 8];
    let n = BENCH_TOKENS as u64;
    let base = attention_macs(n, n, BENCH_CHANNELS as u64);
    let exact = rs.iter().all(|&r| attention_macs(n, n / r as u64, BENCH_CHANNELS as u64) * r as u64 == base);
    let rows = bench_attention(BENCH_TOKENS, BENCH_CHANNELS, &rs, BENCH_REPS, 0).expect("bench");
    let counted = rows.iter().all(|row| row.macs * row.reduction as u64 == rows[0].macs);
    let times: Vec<f64> = rows.iter().map(|r| r.median_secs).collect();
    let monotone = times.windows(2).all(|w| w[1] <= w[0] * (1.0 + BENCH_NOISE));
    let standard = bench_standard(BENCH_TOKENS, BENCH_CHANNELS, BENCH_REPS, 0).expect("bench");
    Verdict {
        pass: exact && counted && monotone,
        detail: format!(
            "MACs x R constant: {}; median ms at R=1,2,4,8: {}; standard kernel {:.1} ms ({:+.1}% vs R=1)",
            exact && counted,
            times.iter().map(|t| format!("{:.1}", t * 1e3)).collect::<Vec<_>>().join("/"),
            standard * 1e3,
            (times[0] / standard - 1.0) * 100.0
        ),
    }
}

fn shape_contract() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, cfg) in [("S", ModelConfig::variant_s()), ("tiny", ModelConfig::tiny(LEARN_WIDTH, 224))] {
        let (model, store) = Model::build::<f32>(&cfg, 0).expect("build");
        let x = Tensor::<f32>::from_fn(&[1, 3, 224, 224], |i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0);
        let (y, cache) = model.forward(&mut Ctx::new(&store, Mode::Train), &x).expect("forward");
        let maps = cache.stage_maps();
        let c = cfg.channels[0];
        let ok_maps = (0..4).all(|s| {
            let want = [1, c << s, 56 >> s, 56 >> s];
            maps.conv[s].shape() == want && maps.transformer[s].shape() == want
        });
        let ok_out = y.shape() == [1, 1, 224, 224] && y.data().iter().all(|&v| v > 0.0 && v < 1.0);
        pass &= ok_maps && ok_out;
        parts.push(format!("{label}: stage maps {ok_maps}, output {:?} in (0,1) {ok_out}", y.shape()));
    }
    Verdict { pass, detail: parts.join("; ") }
}

fn loss_correctness() -> Verdict {
    let mut r = rng(5);
    let n = 100;
    let gt = Tensor::<f64>::from_fn(&[1, 1, 1, n], |i| (i % 3 == 0) as u8 as f64);
    let perfect = dice_loss_value(&gt, &gt, DEFAULT_EPS).unwrap();
    let mismatch = dice_loss_value(&gt.map(|v| 1.0 - v), &gt, DEFAULT_EPS).unwrap();
    let mut swap_exact = true;
    for _ in 0..200 {
        let p = Tensor::<f64>::from_fn(&[1, 1, 4, 8], |_| r.gen_range(0..=64) as f64 / 64.0);
        let g = Tensor::<f64>::from_fn(&[1, 1, 4, 8], |_| r.gen_bool(0.5) as u8 as f64);
        let a = dice_loss_value(&p, &g, DEFAULT_EPS).unwrap();
        let b = dice_loss_value(&p.map(|v| 1.0 - v), &g.map(|v| 1.0 - v), DEFAULT_EPS).unwrap();
        swap_exact &= a.to_bits() == b.to_bits();
    }
    let p = Tensor::<f64>::from_fn(&[1, 1, 1, n], |_| r.gen_range(0.1..0.9));
    let grad = generalized_dice_loss(&p, &gt, DEFAULT_EPS).unwrap().grad;
    let h = 1e-5;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for i in 0..n {
        let mut hi = p.clone();
        hi.data_mut()[i] += h;
        let mut lo = p.clone();
        lo.data_mut()[i] -= h;
        let fd = (dice_loss_value(&hi, &gt, DEFAULT_EPS).unwrap() - dice_loss_value(&lo, &gt, DEFAULT_EPS).unwrap()) / (2.0 * h);
        diff = diff.max((fd - grad.data()[i]).abs());
        scale = scale.max(grad.data()[i].abs());
    }
    let rel = diff / scale;
    Verdict {
        pass: swap_exact && perfect.abs() < PERFECT_LOSS_TOL && (mismatch - 1.0).abs() < MISMATCH_LOSS_TOL && rel < LOSS_GRAD_TOL,
        detail: format!(
            "swap exact {swap_exact}; perfect {perfect:.2e}; mismatch {mismatch:.6}; gradient rel err {rel:.1e} < {LOSS_GRAD_TOL:.0e}"
        ),
    }
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let p = r.gen_range(0.02..0.9);
    Mask::new(h, w, (0..h * w).map(|_| r.gen_bool(p)).collect()).unwrap()
}

fn brute_hausdorff(a: &Mask, b: &Mask) -> f64 {
    let edge = |m: &Mask| -> Vec<(f64, f64)> {
        let on = |y: isize, x: isize| {
            y >= 0 && x >= 0 && y < m.h as isize && x < m.w as isize && m.data[y as usize * m.w + x as usize]
        };
        let mut v = Vec::new();
        for y in 0..m.h as isize {
            for x in 0..m.w as isize {
                if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let (ea, eb) = (edge(a), edge(b));
    match (ea.is_empty(), eb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((a.h * a.h + a.w * a.w) as f64).sqrt(),
        _ => {}
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|&(y, x)| q.iter().map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt()).fold(f64::MAX, f64::min))
            .fold(0.0f64, f64::max)
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

fn enumerate_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().cloned().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let rank = |v: f64| {
        let less = d.iter().filter(|x| x.abs() < v.abs()).count() as f64;
        let eq = d.iter().filter(|x| x.abs() == v.abs()).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let ranks: Vec<f64> = d.iter().map(|&v| rank(v)).collect();
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let hits = (0..1u32 << n)
        .filter(|s| (0..n).filter(|k| s >> k & 1 == 1).map(|k| ranks[k]).sum::<f64>() >= w - 1e-9)
        .count();
    hits as f64 / (1u64 << n) as f64
}

fn metric_oracles() -> Verdict {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..METRIC_PAIRS {
        let (h, w) = (r.gen_range(1..16), r.gen_range(1..16));
        let (a, b) = (random_mask(&mut r, h, w), random_mask(&mut r, h, w));
        let c = confusion(&a, &b).unwrap();
        let cnt = |x: bool, y: bool| a.data.iter().zip(&b.data).filter(|(p, q)| **p == x && **q == y).count() as f64;
        let (tp, fp, fn_, tn) = (cnt(true, true), cnt(true, false), cnt(false, true), cnt(false, false));
        let ratio = |num: f64, den: f64, empty: f64| if den > 0.0 { num / den } else { empty };
        let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let expect = [
            ratio(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
            ratio(tp, tp + fp + fn_, 1.0),
            ratio(tp, tp + fp, if fn_ > 0.0 { 0.0 } else { 1.0 }),
            ratio(tp, tp + fn_, if fp > 0.0 { 0.0 } else { 1.0 }),
            ratio(tn, tn + fp, if fn_ > 0.0 { 0.0 } else { 1.0 }),
            ratio(tp * tn - fp * fn_, mcc_den, 0.0),
        ];
        let got = [c.dsc(), c.iou(), c.precision(), c.recall(), c.specificity(), c.mcc()];
        for (g, e) in got.iter().zip(expect) {
            worst = worst.max((g - e).abs());
        }
        worst = worst.max((c.dsc() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
    }
    let formulas = worst < METRIC_TOL;
    let mut hd_exact = true;
    for _ in 0..200 {
        let (h, w) = (r.gen_range(1..=32), r.gen_range(1..=32));
        let (a, b) = (random_mask(&mut r, h, w), random_mask(&mut r, h, w));
        hd_exact &= hausdorff(&a, &b).unwrap() == brute_hausdorff(&a, &b);
    }
    let mut wil_exact = true;
    for n in metrics::MIN_N..=metrics::EXACT_MAX_N {
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64 / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64 / 4.0).collect();
            if let Ok(t) = wilcoxon_one_tailed(&a, &b) {
                let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                // ties can leave fewer than MIN_N nonzero differences, which errors instead
                wil_exact &= t.p == enumerate_p(&d);
            }
        }
    }
    let pmf_ok = (1..=metrics::EXACT_MAX_N).all(|n| (signed_rank_distribution(n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    Verdict {
        pass: formulas && hd_exact && wil_exact && pmf_ok,
        detail: format!(
            "{METRIC_PAIRS} pairs max |diff| {worst:.1e} < {METRIC_TOL:.0e}; hausdorff == brute force {hd_exact}; wilcoxon == enumeration {wil_exact}; pmf sums {pmf_ok}"
        ),
    }
}

fn train_run(cfg: &ModelConfig, task: SynthTask, seed: u64, epochs: usize) -> (f64, Model, ParamStore<f32>) {
    let data = make_task_dataset::<f32>(LEARN_SAMPLES, LEARN_HW, seed, task).expect("data");
    let (model, mut store) = Model::build::<f32>(cfg, seed).expect("build");
    let tc = TrainConfig {
        epochs,
        batch: LEARN_BATCH,
        optim: AdamWConfig { lr: LEARN_LR, ..Default::default() },
        seed,
        ..Default::default()
    };
    let h = train(&model, &mut store, &data, &tc).expect("train");
    (h.last().expect("epochs").val_dice, model, store)
}

fn infer_dice(cfg: &ModelConfig, store: &ParamStore<f32>, seed: u64) -> f64 {
    let dir = tempfile::tempdir().expect("tempdir");
    let ck = dir.path().join("m.ctfa");
    checkpoint::save(&ck, cfg, store).expect("save");
    let s = make_task_dataset::<f32>(LEARN_SAMPLES, LEARN_HW, seed, SynthTask::Shapes).expect("data").remove(0);
    let img = dir.path().join("train0.ctfa");
    tensorfile::write(&img, &s.image).expect("write");
    let out = dir.path().join("pred");
    let status = Command::new(env!("CARGO_BIN_EXE_catfa"))
        .args(["infer", "--checkpoint", ck.to_str().unwrap(), "--input", img.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .expect("spawn");
    if !status.success() {
        return f64::NAN;
    }
    let pred = pgm::read_mask(&out.join("train0.pgm")).expect("mask");
    confusion(&pred, &Mask::from_tensor(&s.mask).unwrap()).unwrap().dsc()
}

fn desk_learning() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig::tiny(LEARN_WIDTH, LEARN_HW);
    let mut dice = Vec::new();
    let mut infer = f64::NAN;
    for &seed in &SEEDS {
        let (d, _, store) = train_run(&cfg, SynthTask::Shapes, seed, LEARN_EPOCHS);
        if seed == SEEDS[0] {
            infer = infer_dice(&cfg, &store, seed);
        }
        dice.push(d);
    }
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: mean >= LEARN_DICE && secs <= LEARN_BUDGET_SECS,
        detail: format!(
            "val dice {} mean {mean:.4} >= {LEARN_DICE}; {secs:.0}s; cli infer on a training image dice {infer:.4}",
            dice.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join("/")
        ),
    }
}

fn positional_signal() -> Verdict {
    let mut means = Vec::new();
    for pad in [PadMode::Zero, PadMode::Circular] {
        let mut cfg = ModelConfig::tiny(LEARN_WIDTH, LEARN_HW);
        cfg.dfcn_pad = pad;
        let d: Vec<f64> = SEEDS.iter().map(|&s| train_run(&cfg, SynthTask::Quadrant, s, POSITION_EPOCHS).0).collect();
        means.push((d.iter().sum::<f64>() / d.len() as f64, d));
    }
    let fmt = |d: &[f64]| d.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/");
    Verdict {
        pass: means[0].0 > means[1].0,
        detail: format!(
            "quadrant task, zero {} mean {:.4} vs circular {} mean {:.4}",
            fmt(&means[0].1),
            means[0].0,
            fmt(&means[1].1),
            means[1].0
        ),
    }
}

fn bits_equal<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    let mut x = Vec::new();
    let mut y = Vec::new();
    a.data().iter().for_each(|v| v.write_le(&mut x));
    b.data().iter().for_each(|v| v.write_le(&mut y));
    a.shape() == b.shape() && x == y
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "channels=8\nimage_size=32\nsamples=16\nepochs=2\nbatch=4\nlr=0.002\nseed=7\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let ok = Command::new(env!("CARGO_BIN_EXE_catfa"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status()
            .expect("spawn")
            .success();
        let read = |f: &str| std::fs::read(out.join(f)).unwrap_or_default();
        (ok, read("checkpoint.ctfa"), read("history.csv"))
    };
    let (a, b) = (run("a"), run("b"));
    let same_runs = a.0 && b.0 && !a.1.is_empty() && a.1 == b.1 && a.2 == b.2;
    let mut r = rng(9);
    let mut round_trip = true;
    for rank in 1..=4 {
        for _ in 0..25 {
            let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..7)).collect();
            let t64 = Tensor::<f64>::from_fn(&shape, |_| f64::from_bits(r.gen()));
            let t32 = Tensor::<f32>::from_fn(&shape, |_| f32::from_bits(r.gen()));
            round_trip &= bits_equal(&tensorfile::decode::<f64>(&tensorfile::encode(&t64)).unwrap(), &t64);
            round_trip &= bits_equal(&tensorfile::decode::<f32>(&tensorfile::encode(&t32)).unwrap(), &t32);
        }
    }
    Verdict {
        pass: same_runs && round_trip,
        detail: format!("repeated train runs byte-identical {same_runs}; tensor file round trips bitwise {round_trip}"),
    }
}

fn main() {
    // `cargo test -- --list` and filters pass arguments; there is only one target here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("attention degeneracy", attention_degeneracy),
        ("complexity", complexity),
        ("shape contract", shape_contract),
        ("loss correctness", loss_correctness),
        ("metric oracles", metric_oracles),
        ("desk-scale learning", desk_learning),
        ("positional signal", positional_signal),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        println!("criterion {} {} {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", criteria.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
