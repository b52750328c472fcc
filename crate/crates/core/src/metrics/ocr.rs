use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use super::MetricsError;
use crate::data::save_png;
use crate::tensor::ImageTensor;

/// Image in, recognized text out. An empty string means nothing was recognized.
pub trait OcrEngine: Send + Sync {
    fn name(&self) -> String;
    fn is_available(&self) -> bool;
    fn recognize(&self, img: &ImageTensor) -> Result<String, MetricsError>;
}

/// Adapter for the `tesseract` command-line program.
#[derive(Debug, Clone)]
pub struct TesseractCli {
    pub binary: PathBuf,
    pub language: String,
    /// Page segmentation mode passed as `--psm`.
    pub psm: u32,
}

impl Default for TesseractCli {
    fn default() -> Self {
        Self {
            binary: PathBuf::from("tesseract"),
            language: "eng".into(),
            psm: 6,
        }
    }
}

static SCRATCH_ID: AtomicU64 = AtomicU64::new(0);

impl OcrEngine for TesseractCli {
    fn name(&self) -> String {
        format!("tesseract({})", self.binary.display())
    }

    fn is_available(&self) -> bool {
        Command::new(&self.binary)
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    fn recognize(&self, img: &ImageTensor) -> Result<String, MetricsError> {
        if !self.is_available() {
            return Err(MetricsError::OcrUnavailable(self.name()));
        }
        let path = std::env::temp_dir().join(format!(
            "cdpn-ocr-{}-{}.png",
            std::process::id(),
            SCRATCH_ID.fetch_add(1, Ordering::Relaxed)
        ));
        save_png(img, &path).map_err(|e| MetricsError::OcrFailed(e.to_string()))?;
        let out = Command::new(&self.binary)
            .arg(&path)
            .arg("stdout")
            .args(["-l", &self.language, "--psm", &self.psm.to_string()])
            .output();
        let _ = std::fs::remove_file(&path);
        let out = out.map_err(|e| MetricsError::OcrFailed(e.to_string()))?;
        if !out.status.success() {
            return Err(MetricsError::OcrFailed(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}
