//! Image-quality metrics: pixel L1, SSIM, histogram similarity (Grey),
//! a Fréchet feature distance and classifier accuracy.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{ensure, Error, Result};
use crate::glyphdata::{CharId, GlyphImage, Setting, StyleId};
use crate::par::{self, Execution};

fn same_shape(a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    ensure!(
        a.size() == b.size(),
        Validation,
        "image sizes differ: {} vs {}",
        a.size(),
        b.size()
    );
    Ok(())
}

pub fn l1(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .sum();
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over the valid region: `n x n` to `(n-w+1)^2`.
fn filter_valid(x: &[f64], n: usize, k: &[f64]) -> Vec<f64> {
    let w = k.len();
    let m = n - w + 1;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = (0..w).map(|i| k[i] * x[r * n + c + i]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..w).map(|i| k[i] * rows[(r + i) * m + c]).sum();
        }
    }
    out
}

/// Mean local SSIM under a Gaussian window, valid positions only.
pub fn ssim(a: &GlyphImage, b: &GlyphImage, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    ensure!(p.window % 2 == 1, Validation, "SSIM window {} must be odd", p.window);
    let n = a.size();
    ensure!(p.window <= n, Validation, "SSIM window {} exceeds image size {n}", p.window);
    let k = gaussian_kernel(p.window, p.sigma);
    let x: Vec<f64> = a.pixels().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| f64::from(v)).collect();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(s, t)| s * t).collect() };
    let mx = filter_valid(&x, n, &k);
    let my = filter_valid(&y, n, &k);
    let mxx = filter_valid(&prod(&x, &x), n, &k);
    let myy = filter_valid(&prod(&y, &y), n, &k);
    let mxy = filter_valid(&prod(&x, &y), n, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + p.c1) * (2.0 * cxy + p.c2))
            / ((ux * ux + uy * uy + p.c1) * (vx + vy + p.c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn from_counts(counts: Vec<f64>) -> Result<Self> {
        ensure!(counts.len() >= 2, Validation, "histogram needs at least two bins");
        ensure!(
            counts.iter().all(|c| c.is_finite() && *c >= 0.0),
            Validation,
            "histogram counts must be non-negative"
        );
        Ok(Self { counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn cosine(&self, other: &Histogram) -> Result<f64> {
        ensure!(
            self.bins() == other.bins(),
            Validation,
            "histogram bins differ: {} vs {}",
            self.bins(),
            other.bins()
        );
        let dot: f64 = self.counts.iter().zip(&other.counts).map(|(a, b)| a * b).sum();
        let na: f64 = self.counts.iter().map(|a| a * a).sum();
        let nb: f64 = other.counts.iter().map(|b| b * b).sum();
        ensure!(na > 0.0 && nb > 0.0, Validation, "empty histogram");
        Ok(dot / (na.sqrt() * nb.sqrt()))
    }

    fn normalized(&self) -> Self {
        let t = self.total();
        Self {
            counts: self.counts.iter().map(|c| c / t).collect(),
        }
    }
}

/// Bin `b` covers `[b/B, (b+1)/B)`; the last bin also holds 1.0.
pub fn grayscale_histogram(image: &GlyphImage, bins: usize) -> Result<Histogram> {
    ensure!(bins >= 2, Validation, "histogram needs at least two bins, got {bins}");
    let mut counts = vec![0.0; bins];
    for &v in image.pixels() {
        let b = ((f64::from(v) * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    Ok(Histogram { counts })
}

/// Cosine similarity of grayscale histograms; unit-sum normalized first
/// when the pixel counts differ.
pub fn grey(a: &GlyphImage, b: &GlyphImage, bins: usize) -> Result<f64> {
    let ha = grayscale_histogram(a, bins)?;
    let hb = grayscale_histogram(b, bins)?;
    if a.len() == b.len() {
        ha.cosine(&hb)
    } else {
        ha.normalized().cosine(&hb.normalized())
    }
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut sorted: Vec<&Vec<f64>> = set.iter().collect();
    // canonical order makes the statistics independent of input order
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mu = DVector::zeros(d);
    for v in &sorted {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in &sorted {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

pub const FID_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, Validation, "FID needs at least two samples per set");
    let d = a[0].len();
    ensure!(d >= 1, Validation, "empty feature vectors");
    ensure!(
        a.iter().chain(b).all(|v| v.len() == d),
        Validation,
        "feature dimensions disagree"
    );
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let ridge = DMatrix::identity(d, d) * FID_RIDGE;
    let sa = cov_a + &ridge;
    let sb = cov_b + &ridge;
    let root_a = symmetric_sqrt(&sa);
    let cross = symmetric_sqrt(&(&root_a * &sb * &root_a));
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross.trace();
    ensure!(value.is_finite(), Numerical, "non-finite FID");
    Ok(value.max(0.0))
}

pub fn ocr_accuracy(generated: &[&GlyphImage], targets: &[CharId], classifier: &Classifier) -> Result<f64> {
    ensure!(!generated.is_empty(), Validation, "no generated images");
    ensure!(
        generated.len() == targets.len(),
        Validation,
        "{} images but {} target ids",
        generated.len(),
        targets.len()
    );
    for t in targets {
        ensure!(
            classifier.classes().contains(t),
            Validation,
            "classifier has no class for char {t}"
        );
    }
    let pred = classifier.predict(generated)?;
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / targets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub bins: usize,
    pub ssim: SsimParams,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub char_id: CharId,
    pub style_id: StyleId,
    pub l1: f64,
    pub ssim: f64,
    pub grey: f64,
    pub ocr_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_l1: f64,
    pub mean_ssim: f64,
    pub mean_grey: f64,
    pub ocr_accuracy: Option<f64>,
    pub fid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub label: String,
    pub config: MetricsConfig,
    pub classifier_hash: Option<String>,
    pub rows: Vec<PairMetrics>,
    pub aggregate: Aggregate,
}

/// Mean that does not depend on the order of `values`.
pub fn stable_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricsReport {
    /// Aggregates recomputed from rows; FID cannot be derived from rows and
    /// is carried over.
    pub fn recompute_aggregate(&self) -> Aggregate {
        let ocr: Option<Vec<bool>> = self.rows.iter().map(|r| r.ocr_correct).collect();
        Aggregate {
            count: self.rows.len(),
            mean_l1: stable_mean(self.rows.iter().map(|r| r.l1)),
            mean_ssim: stable_mean(self.rows.iter().map(|r| r.ssim)),
            mean_grey: stable_mean(self.rows.iter().map(|r| r.grey)),
            ocr_accuracy: ocr.map(|v| v.iter().filter(|&&c| c).count() as f64 / v.len() as f64),
            fid: self.aggregate.fid,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("char_id,style_id,l1,ssim,grey,ocr_correct\n");
        for r in &self.rows {
            let ocr = match r.ocr_correct {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.char_id, r.style_id, r.l1, r.ssim, r.grey, ocr
            ));
        }
        out
    }
}

/// Metrics over aligned `(generated, target)` pairs. The classifier, when
/// given, supplies OCR correctness and the FID features.
pub fn evaluate(
    generated: &[GlyphImage],
    targets: &[GlyphImage],
    setting: Setting,
    label: &str,
    classifier: Option<&Classifier>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    ensure!(!generated.is_empty(), Validation, "nothing to evaluate");
    ensure!(
        generated.len() == targets.len(),
        Validation,
        "{} generated images for {} targets",
        generated.len(),
        targets.len()
    );
    let pairs: Vec<(&GlyphImage, &GlyphImage)> = generated.iter().zip(targets).collect();
    let predicted = match classifier {
        Some(c) => {
            for t in targets {
                ensure!(
                    c.classes().contains(&t.char_id),
                    Validation,
                    "classifier has no class for char {}",
                    t.char_id
                );
            }
            Some(c.predict(&generated.iter().collect::<Vec<_>>())?)
        }
        None => None,
    };
    let mut rows = par::try_map(Execution::current(), &pairs, |(g, t)| {
        same_shape(g, t)?;
        Ok(PairMetrics {
            char_id: t.char_id,
            style_id: t.style_id,
            l1: l1(g, t)?,
            ssim: ssim(g, t, &cfg.ssim)?,
            grey: grey(g, t, cfg.bins)?,
            ocr_correct: None,
        })
    })?;
    if let Some(pred) = &predicted {
        for (row, p) in rows.iter_mut().zip(pred) {
            row.ocr_correct = Some(*p == row.char_id);
        }
    }
    let fid_value = match classifier {
        Some(c) if generated.len() >= 2 => {
            let fa = c.feature_vectors(&generated.iter().collect::<Vec<_>>())?;
            let fb = c.feature_vectors(&targets.iter().collect::<Vec<_>>())?;
            Some(fid(&fa, &fb)?)
        }
        _ => None,
    };
    let mut report = MetricsReport {
        setting,
        label: label.to_string(),
        config: cfg.clone(),
        classifier_hash: classifier.map(Classifier::hash).transpose()?,
        rows,
        aggregate: Aggregate {
            count: 0,
            mean_l1: 0.0,
            mean_ssim: 0.0,
            mean_grey: 0.0,
            ocr_accuracy: None,
            fid: fid_value,
        },
    };
    report.aggregate = report.recompute_aggregate();
    Ok(report)
}
