//! PSNR / SSIM and dataset-level evaluation reports.
//!
//! Metrics are computed in RGB on [0, 1] floats; model outputs are clamped
//! before scoring. PSNR of an exact match is reported as an infinite
//! sentinel and excluded from averages.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::data::{discover_datasets, Dataset};
use crate::error::{Error, Result};
use crate::types::check_same_shape;

/// 10·log10(peak²/MSE); `None` encodes the infinite sentinel for MSE = 0.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<Option<f64>> {
    check_same_shape(x, y, "psnr")?;
    let diff = (x.to_dtype(DType::F64)? - y.to_dtype(DType::F64)?)?;
    let mse = diff.sqr()?.mean_all()?.to_vec0::<f64>()?;
    if mse == 0.0 {
        return Ok(None);
    }
    Ok(Some(10.0 * (peak * peak / mse).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Normalized 2-D Gaussian window as a flat row-major vector.
pub fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(window * window);
    for y in 0..window {
        for x in 0..window {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

/// Mean local SSIM over valid (fully covered) Gaussian windows, computed per
/// channel and averaged.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    check_same_shape(x, y, "ssim")?;
    let (b, c, h, w) = x.dims4()?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than the {0}x{0} window",
            cfg.window
        )));
    }
    let dev = x.device();
    let kernel = Tensor::from_vec(
        gaussian_window(cfg.window, cfg.sigma),
        (1, 1, cfg.window, cfg.window),
        dev,
    )?;
    let flat = |t: &Tensor| -> Result<Tensor> {
        Ok(t.to_dtype(DType::F64)?.reshape((b * c, 1, h, w))?)
    };
    let xf = flat(x)?;
    let yf = flat(y)?;
    let blur = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&kernel, 0, 1, 1, 1)?) };
    let mu_x = blur(&xf)?;
    let mu_y = blur(&yf)?;
    let sig_x = (blur(&xf.sqr()?)? - mu_x.sqr()?)?;
    let sig_y = (blur(&yf.sqr()?)? - mu_y.sqr()?)?;
    let sig_xy = (blur(&(&xf * &yf)?)? - (&mu_x * &mu_y)?)?;
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let num = (((&mu_x * &mu_y)? * 2.0)? + c1)?.mul(&((sig_xy * 2.0)? + c2)?)?;
    let den = ((mu_x.sqr()? + mu_y.sqr()?)? + c1)?.mul(&((sig_x + sig_y)? + c2)?)?;
    Ok(num.div(&den)?.mean_all()?.to_vec0::<f64>()?)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ImageMetrics {
    pub dataset: String,
    pub name: String,
    /// None = infinite (exact match), excluded from averages.
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub count: usize,
    /// Images with infinite PSNR, excluded from the PSNR mean.
    pub psnr_excluded: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub datasets: Vec<DatasetSummary>,
    pub total_count: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("metric report has no images".into()));
        }
        let mut datasets: Vec<DatasetSummary> = Vec::new();
        let mut order: Vec<String> = Vec::new();
        for row in &rows {
            if !order.contains(&row.dataset) {
                order.push(row.dataset.clone());
            }
        }
        for ds in order {
            let sub: Vec<&ImageMetrics> = rows.iter().filter(|r| r.dataset == ds).collect();
            let finite: Vec<f64> = sub.iter().filter_map(|r| r.psnr).collect();
            datasets.push(DatasetSummary {
                dataset: ds,
                count: sub.len(),
                psnr_excluded: sub.len() - finite.len(),
                mean_psnr: if finite.is_empty() {
                    None
                } else {
                    Some(finite.iter().sum::<f64>() / finite.len() as f64)
                },
                mean_ssim: sub.iter().map(|r| r.ssim).sum::<f64>() / sub.len() as f64,
            });
        }
        let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr).collect();
        Ok(Self {
            total_count: rows.len(),
            mean_psnr: if finite.is_empty() {
                None
            } else {
                Some(finite.iter().sum::<f64>() / finite.len() as f64)
            },
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64,
            rows,
            datasets,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,name,psnr_db,ssim\n");
        for r in &self.rows {
            let p = match r.psnr {
                Some(v) => format!("{v:.6}"),
                None => "inf".to_string(),
            };
            out.push_str(&format!("{},{},{},{:.6}\n", r.dataset, r.name, p, r.ssim));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let fmt_p = |p: Option<f64>| match p {
            Some(v) => format!("{v:.2}"),
            None => "inf".to_string(),
        };
        let mut out = String::from("| Dataset | Images | PSNR (dB) | SSIM |\n|---|---|---|---|\n");
        for d in &self.datasets {
            out.push_str(&format!(
                "| {} | {} | {} | {:.4} |\n",
                d.dataset,
                d.count,
                fmt_p(d.mean_psnr),
                d.mean_ssim
            ));
        }
        out.push_str(&format!(
            "| Average | {} | {} | {:.4} |\n",
            self.total_count,
            fmt_p(self.mean_psnr),
            self.mean_ssim
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_markdown(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}

/// Score a transmission-predicting model over one dataset. The model maps a
/// blended [1,3,H,W] image to its transmission estimate; outputs are clamped
/// to [0,1] before scoring.
pub fn evaluate_dataset<F>(model: F, ds: &Dataset, ssim_cfg: &SsimConfig) -> Result<Vec<ImageMetrics>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let label = ds
        .root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let mut rows = Vec::with_capacity(ds.len());
    for idx in 0..ds.len() {
        let (blended, t_gt) = ds.load_pair(idx, DType::F64, &candle_core::Device::Cpu)?;
        let t_hat = model(&blended)?.clamp(0.0, 1.0)?;
        check_same_shape(&t_hat, &t_gt, "evaluate_dataset prediction")?;
        rows.push(ImageMetrics {
            dataset: label.clone(),
            name: ds.names[idx].clone(),
            psnr: psnr(&t_hat, &t_gt, 1.0)?,
            ssim: ssim(&t_hat, &t_gt, ssim_cfg)?,
        });
    }
    Ok(rows)
}

/// Evaluate over one dataset directory or a directory of datasets; the
/// aggregate rows weight every image equally (count-weighted averages).
pub fn evaluate_directory<F>(model: F, root: &Path, ssim_cfg: &SsimConfig) -> Result<MetricReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let sets = discover_datasets(root)?;
    let mut rows = Vec::new();
    for ds in &sets {
        rows.extend(evaluate_dataset(&model, ds, ssim_cfg)?);
    }
    MetricReport::from_rows(rows)
}
