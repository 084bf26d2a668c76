//! Straight-line reference implementations and fixtures shared by the test
//! targets. Nothing here calls into the library's numeric code.

#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

use cldyn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-padded cross-correlation, `x: [cin, h, w]`, `k: [cout, cin, ks, ks]`.
pub fn conv(x: &Tensor, k: &Tensor, bias: Option<&[f64]>, d: usize) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let half = (ks / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..cin {
                    for i in 0..ks as isize {
                        for j in 0..ks as isize {
                            let sy = y + (i - half) * d as isize;
                            let sx = xx + (j - half) * d as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kv = k.data()[((o * cin + c) * ks + i as usize) * ks + j as usize];
                            acc += kv * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

/// Per-channel convolution, `k: [c, ks, ks]`.
pub fn depthwise(x: &Tensor, k: &Tensor, d: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = k.shape()[1];
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let xc = Tensor::new(vec![1, h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec()).unwrap();
        let kc = Tensor::new(vec![1, 1, ks, ks], k.data()[ch * ks * ks..(ch + 1) * ks * ks].to_vec()).unwrap();
        out.extend(conv(&xc, &kc, None, d));
    }
    out
}

const SX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn stencil(p: &[f64], h: usize, w: usize, s: &[[f64; 3]; 3], replicate: bool, r: usize, c: usize) -> f64 {
    let mut acc = 0.0;
    for (i, row) in s.iter().enumerate() {
        for (j, &k) in row.iter().enumerate() {
            let (y, x) = (r as isize + i as isize - 1, c as isize + j as isize - 1);
            let v = if replicate {
                p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
            } else if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                p[y as usize * w + x as usize]
            };
            acc += k * v;
        }
    }
    acc
}

/// Zero-padded Sobel magnitude `sqrt(gx^2 + gy^2 + eps)` per channel.
pub fn sobel_magnitude(x: &Tensor, eps: f64) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        let p = &x.data()[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let gx = stencil(p, h, w, &SX, false, r, col);
                let gy = stencil(p, h, w, &SY, false, r, col);
                out.push((gx * gx + gy * gy + eps).sqrt());
            }
        }
    }
    out
}

/// Softmax down each column of a `rows x cols` matrix.
pub fn softmax_columns(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for c in 0..cols {
        let mx = (0..rows).map(|r| m[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..rows).map(|r| (m[r * cols + c] - mx).exp()).sum();
        for r in 0..rows {
            out[r * cols + c] = (m[r * cols + c] - mx).exp() / z;
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + eps)
}

/// Mutual information in bits from explicit probability tables.
pub fn mi(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let q = |v: f64| ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
    let n = x.len() as f64;
    let mut joint = std::collections::BTreeMap::new();
    let mut px = std::collections::BTreeMap::new();
    let mut py = std::collections::BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((q(a), q(b))).or_insert(0.0) += 1.0 / n;
        *px.entry(q(a)).or_insert(0.0) += 1.0 / n;
        *py.entry(q(b)).or_insert(0.0) += 1.0 / n;
    }
    joint
        .iter()
        .map(|(&(i, j), &p)| p * (p / (px[&i] * py[&j])).log2())
        .sum()
}

/// Pearson correlation from textbook sums; `None` for a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let cov = sxy - sx * sy / n;
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

pub fn q_cc(f: &[f64], a: &[f64], b: &[f64]) -> f64 {
    0.5 * (pearson(f, a).unwrap_or(0.0) + pearson(f, b).unwrap_or(0.0))
}

/// Edge-preservation score with replicated-border Sobel and the usual sigmoid constants.
pub fn q_abf(f: &[f64], a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let edge = |p: &[f64], r: usize, c: usize| {
        let gx = stencil(p, h, w, &SX, true, r, c);
        let gy = stencil(p, h, w, &SY, true, r, c);
        let g = (gx * gx + gy * gy).sqrt();
        let alpha = if gx.abs() < 1e-12 {
            if gy.abs() < 1e-12 {
                0.0
            } else {
                FRAC_PI_2
            }
        } else {
            (gy / gx).atan()
        };
        (if g < 1e-12 { 0.0 } else { g }, alpha)
    };
    let q = |(gs, as_): (f64, f64), (gf, af): (f64, f64)| {
        let g = if gs == gf {
            1.0
        } else {
            gs.min(gf) / gs.max(gf)
        };
        let al = 1.0 - (as_ - af).abs() / FRAC_PI_2;
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (al - 0.8)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (ef, ea, eb) = (edge(f, r, c), edge(a, r, c), edge(b, r, c));
            num += q(ea, ef) * ea.0 + q(eb, ef) * eb.0;
            den += ea.0 + eb.0;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
