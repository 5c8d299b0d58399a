use super::Mask;
use crate::error::{Error, Result};

/// Foreground pixels with a 4-neighbour outside the foreground (or outside the image).
pub fn boundary(m: &Mask) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < m.h && (x as usize) < m.w && m.data[y as usize * m.w + x as usize]
    };
    let mut out = vec![false; m.h * m.w];
    for y in 0..m.h as isize {
        for x in 0..m.w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * m.w + x as usize] = true;
            }
        }
    }
    out
}

const INF: f64 = 1e20;

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` site.
fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed(from: &[bool], to_dist: &[f64]) -> f64 {
    from.iter()
        .zip(to_dist)
        .filter(|(&b, _)| b)
        .fold(0.0f64, |m, (_, &d)| m.max(d))
}

/// Symmetric Hausdorff distance between the two boundary sets, in pixels.
///
/// Both masks empty gives 0; exactly one empty gives the image diagonal.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape("hausdorff", format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    match (a.count(), b.count()) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(((a.h * a.h + a.w * a.w) as f64).sqrt()),
        _ => {}
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let da = squared_edt(&ba, a.h, a.w);
    let db = squared_edt(&bb, a.h, a.w);
    Ok(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}
