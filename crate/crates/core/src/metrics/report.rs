//! Upscaler abstraction and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lcs_score, levenshtein_score, normalize_ocr_text, psnr, ssim, MetricsError, OcrEngine};
use crate::cascade::Cascade;
use crate::data::{bicubic_downsample, bicubic_upsample};
use crate::model::DpNet;
use crate::tensor::ImageTensor;

/// Anything that maps an LR image to an image `magnification()` times larger.
pub trait Upscaler: Send + Sync {
    fn label(&self) -> String;
    fn magnification(&self) -> usize;
    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError>;
}

impl Upscaler for Cascade {
    fn label(&self) -> String {
        format!("Cascaded DPNet ({}×)", self.magnification())
    }

    fn magnification(&self) -> usize {
        Cascade::magnification(self)
    }

    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError> {
        self.super_resolve(img, None)
            .map_err(|e| MetricsError::Upscale(e.to_string()))
    }
}

/// A single 2× network.
#[derive(Debug, Clone)]
pub struct StageUpscaler {
    pub net: DpNet,
}

impl Upscaler for StageUpscaler {
    fn label(&self) -> String {
        "DPNet (2×)".into()
    }

    fn magnification(&self) -> usize {
        2
    }

    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError> {
        self.net.forward(img).map_err(|e| MetricsError::Upscale(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BicubicUpscaler {
    pub factor: usize,
}

impl Upscaler for BicubicUpscaler {
    fn label(&self) -> String {
        format!("Bicubic ({}×)", self.factor)
    }

    fn magnification(&self) -> usize {
        self.factor
    }

    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError> {
        bicubic_upsample(img, self.factor).map_err(|e| MetricsError::Upscale(e.to_string()))
    }
}

/// Returns its input; magnification 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityUpscaler;

impl Upscaler for IdentityUpscaler {
    fn label(&self) -> String {
        "Identity".into()
    }

    fn magnification(&self) -> usize {
        1
    }

    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError> {
        Ok(img.clone())
    }
}

/// Applies its parts in order.
pub struct ChainedUpscaler {
    pub parts: Vec<Box<dyn Upscaler>>,
}

impl ChainedUpscaler {
    pub fn new(parts: Vec<Box<dyn Upscaler>>) -> Self {
        Self { parts }
    }
}

impl Upscaler for ChainedUpscaler {
    fn label(&self) -> String {
        self.parts.iter().map(|p| p.label()).collect::<Vec<_>>().join(" + ")
    }

    fn magnification(&self) -> usize {
        self.parts.iter().map(|p| p.magnification()).product()
    }

    fn upscale(&self, img: &ImageTensor) -> Result<ImageTensor, MetricsError> {
        let mut cur = img.clone();
        for p in &self.parts {
            cur = p.upscale(&cur)?;
        }
        Ok(cur)
    }
}

/// A held-out HR image with its optional transcription.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub hr: ImageTensor,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_lcs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_ld: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
}

/// Arithmetic means over items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub s_lcs: Option<f64>,
    pub s_ld: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub items: Vec<ItemMetrics>,
    pub summary: MetricSummary,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn new(method: String, dataset: String, items: Vec<ItemMetrics>) -> Self {
        let with_ocr = !items.is_empty() && items.iter().all(|i| i.s_lcs.is_some());
        let summary = MetricSummary {
            count: items.len(),
            psnr: mean(items.iter().map(|i| i.psnr)),
            ssim: mean(items.iter().map(|i| i.ssim)),
            s_lcs: with_ocr.then(|| mean(items.iter().filter_map(|i| i.s_lcs))),
            s_ld: with_ocr.then(|| mean(items.iter().filter_map(|i| i.s_ld))),
        };
        Self {
            method,
            dataset,
            items,
            summary,
        }
    }

    pub fn has_ocr(&self) -> bool {
        self.summary.s_lcs.is_some()
    }

    /// One JSON object per item.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for item in &self.items {
            s.push_str(&serde_json::to_string(item).expect("item serializes"));
            s.push('\n');
        }
        s
    }

    /// Markdown table with columns PSNR, SSIM and, when OCR ran, S_LCS and S_LD.
    pub fn table(reports: &[&MetricReport]) -> String {
        let ocr = reports.iter().all(|r| r.has_ocr()) && !reports.is_empty();
        let mut s = String::new();
        if ocr {
            s.push_str("| Method | PSNR | SSIM | S_LCS | S_LD |\n|---|---|---|---|---|\n");
        } else {
            s.push_str("| Method | PSNR | SSIM |\n|---|---|---|\n");
        }
        for r in reports {
            let m = &r.summary;
            let _ = write!(s, "| {} | {:.2} | {:.4} |", r.method, m.psnr, m.ssim);
            if ocr {
                let _ = write!(s, " {:.4} | {:.4} |", m.s_lcs.unwrap_or(0.0), m.s_ld.unwrap_or(0.0));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.jsonl`, `<stem>.md` and `<stem>.summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(), MetricsError> {
        let dir = dir.as_ref();
        let put = |name: String, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| MetricsError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        put(format!("{stem}.jsonl"), self.to_jsonl())?;
        put(format!("{stem}.md"), Self::table(&[self]))?;
        let summary = serde_json::json!({
            "method": self.method,
            "dataset": self.dataset,
            "summary": self.summary,
        });
        put(format!("{stem}.summary.json"), serde_json::to_string_pretty(&summary).expect("serializes"))
    }
}

/// Reduces `hr` by `magnification` (a power of two) with repeated 2× bicubic steps.
pub fn degrade(hr: &ImageTensor, magnification: usize) -> Result<ImageTensor, MetricsError> {
    if !magnification.is_power_of_two() {
        return Err(MetricsError::Upscale(format!("magnification {magnification} is not a power of two")));
    }
    let mut cur = hr.clone();
    for _ in 0..magnification.trailing_zeros() {
        cur = bicubic_downsample(&cur).map_err(|e| MetricsError::Upscale(e.to_string()))?;
    }
    Ok(cur)
}

/// Degrades every item by the upscaler's magnification, upscales it back and
/// scores the result against the original. With `ocr`, the upscaled image is
/// also transcribed and compared with the item's label.
pub fn evaluate_sr(
    upscaler: &dyn Upscaler,
    items: &[EvalItem],
    ocr: Option<&dyn OcrEngine>,
    dataset: &str,
) -> Result<MetricReport, MetricsError> {
    if let Some(engine) = ocr {
        if !engine.is_available() {
            return Err(MetricsError::OcrUnavailable(engine.name()));
        }
        if let Some(item) = items.iter().find(|i| i.label.is_none()) {
            return Err(MetricsError::MissingLabel(item.id.clone()));
        }
    }
    let mag = upscaler.magnification();
    let scored: Result<Vec<ItemMetrics>, MetricsError> = items
        .par_iter()
        .map(|item| {
            let lr = degrade(&item.hr, mag)?;
            let sr = upscaler.upscale(&lr)?;
            let mut m = ItemMetrics {
                id: item.id.clone(),
                psnr: psnr(&sr, &item.hr)?,
                ssim: ssim(&sr, &item.hr)?,
                s_lcs: None,
                s_ld: None,
                ocr_text: None,
            };
            if let Some(engine) = ocr {
                let text = normalize_ocr_text(&engine.recognize(&sr)?);
                let target = normalize_ocr_text(item.label.as_deref().unwrap_or_default());
                m.s_lcs = Some(lcs_score(&text, &target));
                m.s_ld = Some(levenshtein_score(&text, &target));
                m.ocr_text = Some(text);
            }
            Ok(m)
        })
        .collect();
    Ok(MetricReport::new(upscaler.label(), dataset.to_string(), scored?))
}
