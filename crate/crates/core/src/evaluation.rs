//! Image-quality metrics and the evaluation harness.
//!
//! All metrics take `(N, H, W, C)` tensors. PSNR reports `f64::INFINITY`
//! for identical inputs; reports serialise it as `inf`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generator::composite;
use crate::model::{self, Networks, Parameters};
use crate::preprocessing::{build_region_bundle, BundleOptions, HoleSpec, RawSample};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    Ok(())
}

/// `10·log10(max² / MSE)` in dB; `+∞` when the inputs are identical.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(max_value > 0.0) {
        return Err(Error::InvalidArgument(format!("max_value must be positive, got {max_value}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Mean absolute difference.
pub fn l1_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Zero-mean normalised cross-correlation over all elements.
pub fn ncc(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedMetric("NCC of a zero-variance image".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SsimParams {
    /// Odd side of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_value: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_value: 1.0,
        }
    }
}

fn gaussian_1d(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean of the local SSIM map under a Gaussian window (valid region only),
/// averaged over channels and batch.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let (n, h, w, c) = match a.shape() {
        &[n, h, w, c] => (n, h, w, c),
        s => return Err(Error::Shape(format!("SSIM expects NHWC images, got {s:?}"))),
    };
    if p.window == 0 || p.window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("SSIM window must be odd, got {}", p.window)));
    }
    if h < p.window || w < p.window {
        return Err(Error::InvalidArgument(format!(
            "image {h}×{w} is smaller than the {0}×{0} SSIM window",
            p.window
        )));
    }
    let k = gaussian_1d(p.window, p.sigma);
    let c1 = (p.k1 * p.max_value).powi(2);
    let c2 = (p.k2 * p.max_value).powi(2);
    let plane = |t: &Tensor, s: usize, ch: usize| -> Vec<f64> {
        let d = t.data();
        (0..h * w).map(|i| d[(s * h * w + i) * c + ch]).collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        for ch in 0..c {
            let x = plane(a, s, ch);
            let y = plane(b, s, ch);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
            let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Metric settings for a report.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    pub ssim: SsimParams,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("nan")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub label: String,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub label: String,
    pub count: usize,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    /// Per-label means, sorted by label.
    pub aggregates: Vec<LabelSummary>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut groups: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(&r.label).or_default().push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|(label, rs)| {
                let mean = |f: fn(&MetricRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
                LabelSummary {
                    label: label.to_string(),
                    count: rs.len(),
                    psnr: mean(|r| r.psnr),
                    ssim: mean(|r| r.ssim),
                    ncc: mean(|r| r.ncc),
                    l1: mean(|r| r.l1),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, label: &str) -> Option<&LabelSummary> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// Writes `report.csv` (rows), `summary.csv` (aggregates) and
    /// `report.json` (both) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("writing report.csv", e))?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for a in &self.aggregates {
            w.serialize(a)?;
        }
        w.flush().map_err(|e| Error::io("writing summary.csv", e))?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("report.json"), json + "\n").map_err(|e| Error::io("writing report.json", e))
    }
}

/// Scores one output against the reference.
pub fn score(output: &Tensor, reference: &Tensor, opts: &MetricOptions) -> Result<(f64, f64, f64, f64)> {
    Ok((
        psnr(output, reference, opts.ssim.max_value)?,
        ssim(output, reference, &opts.ssim)?,
        ncc(output, reference)?,
        l1_metric(output, reference)?,
    ))
}

/// Anything that completes a holed image.
pub trait Inpainter {
    fn resolution(&self) -> usize;

    /// `(1, H, W, 3)` holed input → `(1, H, W, 3)` completion.
    fn inpaint(&self, x_crop: &Tensor, hole_mask: &Tensor) -> Result<Tensor>;
}

/// A trained network bundle.
pub struct TrainedModel<'a> {
    pub nets: &'a Networks,
    pub params: &'a Parameters,
}

impl Inpainter for TrainedModel<'_> {
    fn resolution(&self) -> usize {
        self.nets.config().resolution
    }

    fn inpaint(&self, x_crop: &Tensor, _hole_mask: &Tensor) -> Result<Tensor> {
        model::inpaint(self.nets, self.params, x_crop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bundle: BundleOptions,
    pub metrics: MetricOptions,
    /// Score `composite(x_rec, x_crop, hole)` instead of the full `x_rec`.
    pub composite: bool,
}

impl EvalOptions {
    pub fn new(resolution: usize) -> Self {
        Self {
            bundle: BundleOptions::new(resolution),
            metrics: MetricOptions::default(),
            composite: false,
        }
    }
}

/// One row per sample × hole spec, sample-major.
pub fn evaluate(model: &dyn Inpainter, samples: &[RawSample], specs: &[HoleSpec], opts: &EvalOptions) -> Result<MetricsReport> {
    if model.resolution() != opts.bundle.resolution {
        return Err(Error::Config(format!(
            "model resolution {} does not match evaluation resolution {}",
            model.resolution(),
            opts.bundle.resolution
        )));
    }
    if specs.is_empty() {
        return Ok(MetricsReport::default());
    }
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len() * specs.len());
    for raw in samples {
        for spec in specs {
            let b = build_region_bundle(raw, spec, &opts.bundle)?;
            let mut out = model.inpaint(&b.x_crop, &b.hole_mask)?;
            if opts.composite {
                out = composite(&out, &b.x_crop, &b.hole_mask)?;
            }
            let (p, s, n, l) = score(&out, &b.x_real, &opts.metrics)?;
            rows.push(MetricRow {
                id: b.id,
                label: b.label,
                psnr: p,
                ssim: s,
                ncc: n,
                l1: l,
            });
        }
    }
    Ok(MetricsReport::from_rows(rows))
}
