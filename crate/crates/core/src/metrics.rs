//! Fusion quality metrics over (fused, source A, source B) triples.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bins: usize,
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 histogram bins, got {}", self.bins)));
        }
        Ok(())
    }
}

/// A metric value with a flag for inputs where it is defined by convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

fn same_shape(op: &'static str, f: &Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    f.expect_same_shape(op, a)?;
    f.expect_same_shape(op, b)
}

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Mutual information (bits) between two images over uniform bins on `[0, 1]`.
pub fn pairwise_mi(x: &Tensor, y: &Tensor, bins: usize) -> Result<f64> {
    x.expect_same_shape("mutual_information", y)?;
    if bins < 2 {
        return Err(Error::Config("need at least 2 histogram bins".into()));
    }
    let n = x.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (i, j) = (bin(a, bins), bin(b, bins));
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy / ((px[i] as f64 / n) * (py[j] as f64 / n))).log2();
        }
    }
    Ok(mi)
}

/// `MI(F; A) + MI(F; B)`.
pub fn mutual_information(f: &Tensor, a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    same_shape("mutual_information", f, a, b)?;
    Ok(pairwise_mi(f, a, bins)? + pairwise_mi(f, b, bins)?)
}

/// Histogram entropy in bits.
pub fn entropy(x: &Tensor, bins: usize) -> f64 {
    let mut h = vec![0usize; bins];
    for &v in x.data() {
        h[bin(v, bins)] += 1;
    }
    let n = x.len() as f64;
    h.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data())),
        [1, h, w] => Ok((*h, *w, t.data())),
        s => Err(Error::shape("metric", format!("expected a single-channel image, got {s:?}"))),
    }
}

/// Sobel responses with replicated borders, so a constant image has no edges.
pub fn sobel_replicate(d: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |r: isize, c: isize| d[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            // paired differences keep flat regions exactly zero
            gx[i] = (at(r - 1, c + 1) - at(r - 1, c - 1))
                + 2.0 * (at(r, c + 1) - at(r, c - 1))
                + (at(r + 1, c + 1) - at(r + 1, c - 1));
            gy[i] = (at(r + 1, c - 1) - at(r - 1, c - 1))
                + 2.0 * (at(r + 1, c) - at(r - 1, c))
                + (at(r + 1, c + 1) - at(r - 1, c + 1));
        }
    }
    (gx, gy)
}

/// Edge strength and orientation per pixel.
fn edges(t: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w, d) = plane(t)?;
    let (gx, gy) = sobel_replicate(d, h, w);
    let g = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let a = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 {
                if y == 0.0 {
                    0.0
                } else {
                    FRAC_PI_2
                }
            } else {
                (y / x).atan()
            }
        })
        .collect();
    Ok((g, a))
}

fn preservation(gs: f64, gf: f64, a_s: f64, a_f: f64, c: &MetricConfig) -> f64 {
    let rel = if gs > gf {
        gf / gs
    } else if gs < gf {
        gs / gf
    } else {
        1.0
    };
    let orient = 1.0 - (a_s - a_f).abs() / FRAC_PI_2;
    let qg = c.gamma_g / (1.0 + (c.kappa_g * (rel - c.sigma_g)).exp());
    let qa = c.gamma_a / (1.0 + (c.kappa_a * (orient - c.sigma_a)).exp());
    qg * qa
}

/// Edge-preservation measure `Q_AB/F`, weighted by source edge strength.
pub fn q_abf(f: &Tensor, a: &Tensor, b: &Tensor, c: &MetricConfig) -> Result<Flagged> {
    same_shape("q_abf", f, a, b)?;
    let (gf, af) = edges(f)?;
    let (ga, aa) = edges(a)?;
    let (gb, ab) = edges(b)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        num += preservation(ga[i], gf[i], aa[i], af[i], c) * ga[i];
        num += preservation(gb[i], gf[i], ab[i], af[i], c) * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Flagged {
        value: num / den,
        degenerate: false,
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &Tensor, y: &Tensor) -> Result<Option<f64>> {
    x.expect_same_shape("pearson", y)?;
    let constant = |t: &Tensor| t.data().iter().all(|&v| v == t.data()[0]);
    if constant(x) || constant(y) {
        return Ok(None);
    }
    let (mx, my) = (x.mean(), y.mean());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx.sqrt() * syy.sqrt())))
}

/// Mean of `corr(F, A)` and `corr(F, B)`; a zero-variance term counts as 0.
pub fn q_cc(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<Flagged> {
    same_shape("q_cc", f, a, b)?;
    let ra = pearson(f, a)?;
    let rb = pearson(f, b)?;
    Ok(Flagged {
        value: 0.5 * (ra.unwrap_or(0.0) + rb.unwrap_or(0.0)),
        degenerate: ra.is_none() || rb.is_none(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mi: f64,
    pub q_abf: f64,
    pub q_cc: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_mi: f64,
    pub mean_q_abf: f64,
    pub mean_q_cc: f64,
    pub config: MetricConfig,
}

/// One fused image and its two sources.
#[derive(Clone, Debug)]
pub struct Triple {
    pub name: String,
    pub fused: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

pub fn evaluate_triple(t: &Triple, c: &MetricConfig) -> Result<ImageMetrics> {
    let qabf = q_abf(&t.fused, &t.a, &t.b, c)?;
    let qcc = q_cc(&t.fused, &t.a, &t.b)?;
    Ok(ImageMetrics {
        name: t.name.clone(),
        mi: mutual_information(&t.fused, &t.a, &t.b, c.bins)?,
        q_abf: qabf.value,
        q_cc: qcc.value,
        degenerate: qabf.degenerate || qcc.degenerate,
    })
}

/// Per-image metrics in input order plus their means.
pub fn evaluate_suite<'a>(triples: impl IntoIterator<Item = &'a Triple>, c: &MetricConfig) -> Result<MetricReport> {
    c.validate()?;
    let images = triples
        .into_iter()
        .map(|t| evaluate_triple(t, c))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(Error::EmptyInput("metric triples"));
    }
    let n = images.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mean_mi: mean(|m| m.mi),
        mean_q_abf: mean(|m| m.q_abf),
        mean_q_cc: mean(|m| m.q_cc),
        images,
        config: *c,
    })
}

impl MetricReport {
    /// CSV with one row per image and a final `mean` row. The contrast-model
    /// columns `q_cb` and `q_cv` are present but always empty.
    pub fn write_csv<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["image", "mi", "q_abf", "q_cc", "q_cb", "q_cv", "degenerate", "config_hash"])
            .map_err(io)?;
        for m in &self.images {
            w.write_record([
                m.name.as_str(),
                &format!("{:.9}", m.mi),
                &format!("{:.9}", m.q_abf),
                &format!("{:.9}", m.q_cc),
                "",
                "",
                if m.degenerate { "1" } else { "0" },
                config_hash,
            ])
            .map_err(io)?;
        }
        w.write_record([
            "mean",
            &format!("{:.9}", self.mean_mi),
            &format!("{:.9}", self.mean_q_abf),
            &format!("{:.9}", self.mean_q_cc),
            "",
            "",
            "",
            config_hash,
        ])
        .map_err(io)?;
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let width = self.images.iter().map(|m| m.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>8}", "image", "MI", "Q_AB/F", "Q_CC");
        for m in &self.images {
            let flag = if m.degenerate { " *" } else { "" };
            let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}{flag}", m.name, m.mi, m.q_abf, m.q_cc);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            "mean", self.mean_mi, self.mean_q_abf, self.mean_q_cc
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn two_level_images_carry_one_bit_each() {
        let x = img(4, 4, |_, c| if c < 2 { 0.2 } else { 0.8 });
        assert!((mutual_information(&x, &x, &x, 256).unwrap() - 2.0).abs() < 1e-12);
        let flat = Tensor::full(&[1, 4, 4], 0.5);
        assert_eq!(pairwise_mi(&x, &flat, 256).unwrap(), 0.0);
    }

    #[test]
    fn self_information_is_entropy() {
        let x = img(5, 7, |r, c| ((r * 7 + c) % 5) as f64 / 5.0);
        assert!((pairwise_mi(&x, &x, 256).unwrap() - entropy(&x, 256)).abs() < 1e-9);
    }

    #[test]
    fn flat_images_are_degenerate() {
        let z = Tensor::full(&[1, 6, 6], 0.3);
        let q = q_abf(&z, &z, &z, &MetricConfig::default()).unwrap();
        assert!(q.degenerate);
        assert_eq!(q.value, 0.0);
        let c = q_cc(&z, &z, &z).unwrap();
        assert!(c.degenerate);
    }

    #[test]
    fn correlation_pinned_cases() {
        let a = img(4, 4, |r, c| (r * 4 + c) as f64 / 15.0);
        assert!((q_cc(&a, &a, &a).unwrap().value - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(q_cc(&a, &a, &inv).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn empty_suite_is_rejected() {
        assert!(evaluate_suite(&[], &MetricConfig::default()).is_err());
    }
}
