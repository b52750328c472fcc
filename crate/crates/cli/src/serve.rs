//! Inference on single images and throughput measurement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cdpn_core::data::{load_png, save_png};
use cdpn_core::tensor::ImageTensor;
use serde::{Deserialize, Serialize};

use crate::pipeline::load_cascade;

/// Written next to every `sr` output as `<output>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrMetadata {
    pub checkpoint: String,
    pub stages: usize,
    pub magnification: usize,
    /// `[height, width]`
    pub input: [usize; 2],
    pub padded: [usize; 2],
    pub output: [usize; 2],
    /// True when padding was added and removed again.
    pub cropped: bool,
}

pub fn default_output(input: &Path) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    input.with_file_name(format!("{stem}_sr.png"))
}

/// Extends `img` to `h×w` by repeating its last row and column.
pub fn pad_replicate(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let (_, ih, iw) = img.shape();
    ImageTensor::from_fn(img.channels(), h, w, |c, y, x| img.at(c, y.min(ih - 1), x.min(iw - 1)))
}

pub fn super_resolve_file(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    stages: Option<usize>,
    align: usize,
) -> Result<SrMetadata> {
    if align == 0 {
        bail!("--align must be at least 1");
    }
    let cascade = load_cascade(checkpoint)?;
    let k = stages.unwrap_or(cascade.len());
    if k > cascade.len() {
        bail!("--stages {k} exceeds the {} stages in {}", cascade.len(), checkpoint.display());
    }
    let img = load_png(input, cascade.image_channels()).with_context(|| format!("reading {}", input.display()))?;
    let (_, h, w) = img.shape();
    let (ph, pw) = (h.div_ceil(align) * align, w.div_ceil(align) * align);
    let padded = if (ph, pw) == (h, w) { img } else { pad_replicate(&img, ph, pw) };
    let mag = 1usize << k;
    let mut sr = cascade.super_resolve(&padded, Some(k))?;
    let cropped = (ph, pw) != (h, w);
    if cropped {
        sr = sr.crop(0, 0, h * mag, w * mag)?;
    }
    save_png(&sr, output).with_context(|| format!("writing {}", output.display()))?;
    let meta = SrMetadata {
        checkpoint: checkpoint.display().to_string(),
        stages: k,
        magnification: mag,
        input: [h, w],
        padded: [ph, pw],
        output: [sr.height(), sr.width()],
        cropped,
    };
    let meta_path = PathBuf::from(format!("{}.json", output.display()));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", meta_path.display()))?;
    Ok(meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub checkpoint: String,
    pub stages: usize,
    pub input: [usize; 2],
    pub output: [usize; 2],
    pub iterations: usize,
    pub seconds: f64,
    pub frames_per_second: f64,
    /// Resident-set high-water mark; only reported on Linux.
    pub peak_memory_mib: Option<f64>,
    pub threads: usize,
}

/// Peak resident memory from `/proc/self/status`.
pub fn peak_memory_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib / 1024.0)
}

pub fn bench(checkpoint: &Path, size: usize, iters: usize) -> Result<BenchReport> {
    if size == 0 || iters == 0 {
        bail!("--size and --iters must be positive");
    }
    let cascade = load_cascade(checkpoint)?;
    let img = ImageTensor::from_fn(cascade.image_channels(), size, size, |c, y, x| {
        ((x * 7 + y * 13 + c * 29) % 64) as f64 / 63.0
    });
    let warm = cascade.super_resolve(&img, None)?;
    let start = Instant::now();
    for _ in 0..iters {
        cascade.super_resolve(&img, None)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        checkpoint: checkpoint.display().to_string(),
        stages: cascade.len(),
        input: [size, size],
        output: [warm.height(), warm.width()],
        iterations: iters,
        seconds,
        frames_per_second: iters as f64 / seconds,
        peak_memory_mib: peak_memory_mib(),
        threads: rayon::current_num_threads(),
    })
}
