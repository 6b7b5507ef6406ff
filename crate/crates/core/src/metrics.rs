//! Quantitative evaluation: texture similarity score (max normalized cross
//! correlation of a sample patch against every window of the test region),
//! mean structural similarity for inpainting, and the autocorrelation
//! spectrum of a sample chain as a mixing diagnostic.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Scores of one evaluation run with their summary statistics.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            scores,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    /// One tab-separated report row: `texture model metric mean std n`.
    pub fn tsv_row(&self, texture: &str, model: &str, metric: &str) -> String {
        format!(
            "{texture}\t{model}\t{metric}\t{:.6}\t{:.6}\t{}",
            self.mean,
            self.std,
            self.n()
        )
    }
}

pub const REPORT_HEADER: &str = "texture\tmodel\tmetric\tmean\tstd\tn";

/// Normalized cross correlation a.b / (|a| |b|), no mean subtraction.
pub fn ncc<S: Real>(a: &Array2<S>, b: &Array2<S>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "ncc dims {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x * y).as_f64()).sum();
    let na: f64 = a.iter().map(|&x| (x * x).as_f64()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x * x).as_f64()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm patch in ncc".into()));
    }
    Ok(dot / (na * nb))
}

/// Texture similarity score: the `patch`-square center crop of `sample`
/// against every `patch`-square window of the test region (stride 1),
/// keeping the maximum NCC.
pub fn tss<S: Real>(sample: &Array2<S>, test_region: &Array2<S>, patch: usize) -> Result<f64> {
    let (sh, sw) = sample.dim();
    let (th, tw) = test_region.dim();
    if patch > sh || patch > sw || patch > th || patch > tw {
        return Err(Error::dimension(format!(
            "patch {patch} exceeds sample {sh}x{sw} or test region {th}x{tw}"
        )));
    }
    if patch == 0 {
        return Err(Error::dimension("patch must be nonzero"));
    }
    let r0 = (sh - patch) / 2;
    let c0 = (sw - patch) / 2;
    let crop = sample
        .slice(ndarray::s![r0..r0 + patch, c0..c0 + patch])
        .to_owned();
    let crop_norm: f64 = crop.iter().map(|&x| (x * x).as_f64()).sum::<f64>().sqrt();
    if crop_norm == 0.0 {
        return Err(Error::Degenerate("zero-norm sample crop in tss".into()));
    }
    let rows: Vec<usize> = (0..=(th - patch)).collect();
    let best = rows
        .par_iter()
        .map(|&wr| {
            let mut row_best = f64::NEG_INFINITY;
            for wc in 0..=(tw - patch) {
                let mut dot = 0.0;
                let mut norm = 0.0;
                for r in 0..patch {
                    for c in 0..patch {
                        let t = test_region[(wr + r, wc + c)].as_f64();
                        dot += t * crop[(r, c)].as_f64();
                        norm += t * t;
                    }
                }
                if norm > 0.0 {
                    row_best = row_best.max(dot / (norm.sqrt() * crop_norm));
                }
            }
            row_best
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::Degenerate("all test windows have zero norm".into()));
    }
    Ok(best)
}

/// 11x11 Gaussian window, sigma 1.5, normalized to unit sum.
fn ssim_window() -> [[f64; 11]; 11] {
    let mut w = [[0.0; 11]; 11];
    let sigma = 1.5f64;
    let mut total = 0.0;
    for (r, row) in w.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let dy = r as f64 - 5.0;
            let dx = c as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w
}

/// Mean structural similarity over all valid 11x11 windows. Constants
/// K1 = 0.01, K2 = 0.03; the dynamic range is the observed max - min over
/// both images (callers pass denormalized 8-bit-range crops).
pub fn mssim<S: Real>(x: &Array2<S>, y: &Array2<S>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::dimension(format!(
            "mssim dims {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (h, w) = x.dim();
    if h < 11 || w < 11 {
        return Err(Error::dimension("mssim needs at least 11x11 images"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in x.iter().chain(y.iter()) {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let range = (hi - lo).max(1e-12);
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let win = ssim_window();

    let rows: Vec<usize> = (0..=(h - 11)).collect();
    let (total, count) = rows
        .par_iter()
        .map(|&r0| {
            let mut acc = 0.0;
            for c0 in 0..=(w - 11) {
                let (mut mx, mut my) = (0.0, 0.0);
                for r in 0..11 {
                    for c in 0..11 {
                        let wv = win[r][c];
                        mx += wv * x[(r0 + r, c0 + c)].as_f64();
                        my += wv * y[(r0 + r, c0 + c)].as_f64();
                    }
                }
                let (mut vx, mut vy, mut vxy) = (0.0, 0.0, 0.0);
                for r in 0..11 {
                    for c in 0..11 {
                        let wv = win[r][c];
                        let dx = x[(r0 + r, c0 + c)].as_f64() - mx;
                        let dy = y[(r0 + r, c0 + c)].as_f64() - my;
                        vx += wv * dx * dx;
                        vy += wv * dy * dy;
                        vxy += wv * dx * dy;
                    }
                }
                acc += (2.0 * mx * my + c1) * (2.0 * vxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            (acc, (w - 10) as u64)
        })
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(total / count as f64)
}

/// Autocorrelation spectrum of a chain of images:
/// r(tau) = sum_t <x_t - xbar, x_{t+tau} - xbar> / sum_t |x_t - xbar|^2.
pub fn autocorr_spectrum<S: Real>(chain: &[Array2<S>], max_lag: usize) -> Result<Vec<f64>> {
    if chain.len() <= max_lag {
        return Err(Error::config(format!(
            "chain length {} must exceed max_lag {max_lag}",
            chain.len()
        )));
    }
    if chain.is_empty() {
        return Err(Error::config("empty chain"));
    }
    let t = chain.len();
    let dim = chain[0].len();
    let mut mean = vec![0.0f64; dim];
    for img in chain {
        if img.len() != dim {
            return Err(Error::dimension("chain images differ in size"));
        }
        for (m, v) in mean.iter_mut().zip(img.iter()) {
            *m += v.as_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let centered: Vec<Vec<f64>> = chain
        .iter()
        .map(|img| {
            img.iter()
                .zip(mean.iter())
                .map(|(v, m)| v.as_f64() - m)
                .collect()
        })
        .collect();
    let denom: f64 = centered
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if denom <= 1e-20 * scale * t as f64 {
        return Err(Error::Degenerate("constant chain has no autocorrelation".into()));
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let mut num = 0.0;
        for i in 0..(t - lag) {
            num += centered[i]
                .iter()
                .zip(centered[i + lag].iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        out.push(num / denom);
    }
    Ok(out)
}
