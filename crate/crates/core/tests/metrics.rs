mod common;

use catfa_core::metrics::*;
use catfa_core::Error;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
    let mut d = vec![false; h * w];
    for &(y, x) in on {
        d[y * w + x] = true;
    }
    Mask::new(h, w, d).unwrap()
}

fn square(n: usize, y0: usize, side: usize) -> Mask {
    let cells: Vec<_> = (y0..y0 + side).flat_map(|y| (y0..y0 + side).map(move |x| (y, x))).collect();
    mask(n, n, &cells)
}

fn random_mask(r: &mut impl Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| r.gen_bool(p)).collect()).unwrap()
}

// all-pairs oracle over boundary pixels
fn brute_hausdorff(a: &Mask, b: &Mask) -> f64 {
    let edge = |m: &Mask| -> Vec<(f64, f64)> {
        let on = |y: isize, x: isize| {
            y >= 0 && x >= 0 && y < m.h as isize && x < m.w as isize && m.data[y as usize * m.w + x as usize]
        };
        let mut v = vec![];
        for y in 0..m.h as isize {
            for x in 0..m.w as isize {
                let interior = on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1);
                if on(y, x) && !interior {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() && eb.is_empty() {
        return 0.0;
    }
    if ea.is_empty() || eb.is_empty() {
        return ((a.h * a.h + a.w * a.w) as f64).sqrt();
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|&(y, x)| q.iter().map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt()).fold(f64::MAX, f64::min))
            .fold(0.0f64, f64::max)
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

#[test]
fn confusion_examples() {
    let pred = mask(2, 2, &[(0, 0), (0, 1)]);
    let gt = mask(2, 2, &[(0, 0), (1, 0)]);
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
    let c = confusion(&gt, &gt).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let not_gt = Mask::new(2, 2, gt.data.iter().map(|b| !b).collect()).unwrap();
    let c = confusion(&not_gt, &gt).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert!(confusion(&mask(2, 3, &[]), &gt).is_err());
}

#[test]
fn report_examples() {
    let gt = square(12, 3, 5);
    let r = evaluate(&gt, &gt).unwrap();
    assert_eq!(r.values(), [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);

    let c = Confusion { tp: 2, tn: 2, fp: 1, fn_: 1 };
    assert!((c.mcc() - 1.0 / 3.0).abs() < 1e-15);

    let empty = mask(4, 4, &[]);
    let r = evaluate(&empty, &empty).unwrap();
    assert_eq!((r.dsc, r.iou, r.hd), (1.0, 1.0, 0.0));
    assert_eq!(r.mcc, 0.0);
}

#[test]
fn metrics_match_direct_formulas_on_random_pairs() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let (p, q) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        let (a, b) = (random_mask(&mut r, h, w, p), random_mask(&mut r, h, w, q));
        let c = confusion(&a, &b).unwrap();
        let count = |pa: bool, pb: bool| a.data.iter().zip(&b.data).filter(|(x, y)| **x == pa && **y == pb).count() as f64;
        let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        assert_eq!(c.total() as usize, h * w);
        if tp + fp + fn_ > 0.0 {
            assert!((c.dsc() - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
            assert!((c.iou() - tp / (tp + fp + fn_)).abs() < 1e-12);
        }
        if tp + fp > 0.0 {
            assert!((c.precision() - tp / (tp + fp)).abs() < 1e-12);
        }
        if tp + fn_ > 0.0 {
            assert!((c.recall() - tp / (tp + fn_)).abs() < 1e-12);
        }
        if tn + fp > 0.0 {
            assert!((c.specificity() - tn / (tn + fp)).abs() < 1e-12);
        }
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
        assert!((c.mcc() - mcc).abs() < 1e-12);
        assert!((c.dsc() - 2.0 * c.iou() / (1.0 + c.iou())).abs() < 1e-12);
        assert!(c.dsc() >= c.iou());
        for v in [c.dsc(), c.iou(), c.precision(), c.recall(), c.specificity()] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((-1.0..=1.0).contains(&c.mcc()));
    }
}

#[test]
fn hausdorff_examples() {
    let a = square(8, 2, 3);
    assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    let p = mask(10, 10, &[(1, 1)]);
    let q = mask(10, 10, &[(4, 5)]);
    assert_eq!(hausdorff(&p, &q).unwrap(), 5.0);
    let gt = square(16, 3, 10);
    let pred = square(16, 5, 6);
    let hd = hausdorff(&pred, &gt).unwrap();
    assert!((hd - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(hd, brute_hausdorff(&pred, &gt));
    let empty = mask(16, 16, &[]);
    assert_eq!(hausdorff(&empty, &gt).unwrap(), (512f64).sqrt());
    assert_eq!(hausdorff(&empty, &empty).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hausdorff_matches_brute_force(seed in any::<u64>(), h in 1usize..=32, w in 1usize..=32, p in 0.02f64..0.9, q in 0.02f64..0.9) {
        let mut r = rng(seed);
        let (a, b) = (random_mask(&mut r, h, w, p), random_mask(&mut r, h, w, q));
        let hd = hausdorff(&a, &b).unwrap();
        prop_assert_eq!(hd, brute_hausdorff(&a, &b));
        prop_assert_eq!(hd, hausdorff(&b, &a).unwrap());
    }

    #[test]
    fn hausdorff_triangle_inequality(seed in any::<u64>(), h in 2usize..=20, w in 2usize..=20) {
        let mut r = rng(seed);
        let m: Vec<Mask> = (0..3).map(|_| {
            let p = r.gen_range(0.05..0.7);
            let mut m = random_mask(&mut r, h, w, p);
            m.data[0] = true;
            m
        }).collect();
        let d = |i: usize, j: usize| hausdorff(&m[i], &m[j]).unwrap();
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    }

    #[test]
    fn dsc_iou_identity(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let c = Confusion { tp, tn, fp, fn_ };
        prop_assert!((c.dsc() - 2.0 * c.iou() / (1.0 + c.iou())).abs() < 1e-12);
    }
}

// independent oracle: average ranks by counting, then all 2^n sign flips
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
    let mut hits = 0;
    for s in 0..(1u32 << n) {
        let ws: f64 = (0..n).filter(|k| s >> k & 1 == 1).map(|k| ranks[k]).sum();
        if ws >= w - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn wilcoxon_examples() {
    let a = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    assert!(matches!(wilcoxon_one_tailed(&a, &a), Err(Error::UndefinedTest(_))));
    let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.01 * (i + 1) as f64).collect();
    let t = wilcoxon_one_tailed(&a, &b).unwrap();
    assert!(t.exact);
    assert_eq!(t.w, 21.0);
    assert_eq!(t.p, 1.0 / 64.0);
    assert!(wilcoxon_one_tailed(&a[..4], &b[..4]).is_err());
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut r = rng(2);
    for n in 5..=12 {
        for trial in 0..20 {
            // coarse values force ties
            let a: Vec<f64> = (0..n).map(|_| (r.gen_range(0..8) as f64) / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| (r.gen_range(0..8) as f64) / 4.0).collect();
            match wilcoxon_one_tailed(&a, &b) {
                Ok(t) => {
                    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                    assert_eq!(t.p, enumerate_p(&d), "n={n} trial={trial}");
                }
                Err(Error::UndefinedTest(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }
    let a: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    assert_eq!(wilcoxon_one_tailed(&a, &b).unwrap().p, enumerate_p(&d));
}

#[test]
fn signed_rank_distribution_sums_to_one() {
    for n in 1..=EXACT_MAX_N {
        let pmf = signed_rank_distribution(n);
        assert_eq!(pmf.len(), n * (n + 1) / 2 + 1);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn normal_approximation_tracks_exact_tail() {
    let n = 20;
    let pmf = signed_rank_distribution(n);
    let a: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    for flips in [3usize, 6, 9] {
        // negate the `flips` smallest differences
        let b: Vec<f64> = (1..=n).map(|i| if i <= flips { 2.0 * i as f64 } else { 0.0 }).collect();
        let t = wilcoxon_one_tailed(&a, &b).unwrap();
        assert!(!t.exact);
        let exact: f64 = pmf[t.w as usize..].iter().sum();
        assert!((t.p - exact).abs() < 0.01, "{} vs {exact}", t.p);
    }
}
