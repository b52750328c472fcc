//! Dataset manifests: JSON lines, one header record followed by one record per image.
//! Image paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{synthetic_items, SyntheticSpec};
use super::{load_png, save_png, DataError};
use crate::tensor::ImageTensor;

pub const MIN_MANIFEST_ITEMS: usize = 10;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(DataError::BadFractions(format!("{parts:?} must be finite and nonnegative")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadFractions(format!("{parts:?} must sum to 1")));
        }
        Ok(())
    }
}

/// An image to be placed in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceItem {
    pub path: String,
    pub label: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Header {
        version: u32,
        pyramid_depth: usize,
        patch_size: usize,
        seed: u64,
    },
    Item(ManifestEntry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub pyramid_depth: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

/// A decoded manifest image.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub id: String,
    pub image: ImageTensor,
    pub label: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Splits `items` into train/val/test by a seeded shuffle. Counts are
/// `round(n·train)`, `round(n·val)` and the remainder.
pub fn build_manifest(
    items: Vec<SourceItem>,
    fractions: SplitFractions,
    seed: u64,
    pyramid_depth: usize,
    patch_size: usize,
) -> Result<DatasetManifest, DataError> {
    fractions.validate()?;
    let n = items.len();
    if n < MIN_MANIFEST_ITEMS {
        return Err(DataError::TooFewItems(n));
    }
    let n_train = ((n as f64 * fractions.train).round() as usize).min(n);
    let n_val = ((n as f64 * fractions.val).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut roles = vec![Role::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        roles[i] = if rank < n_train {
            Role::Train
        } else if rank < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        };
    }
    let entries = items
        .into_iter()
        .zip(roles)
        .map(|(it, role)| ManifestEntry {
            path: it.path,
            role,
            label: it.label,
            sha256: it.sha256,
        })
        .collect();
    Ok(DatasetManifest {
        pyramid_depth,
        patch_size,
        seed,
        entries,
        root: PathBuf::new(),
    })
}

/// Builds a manifest over every `*.png` in `dir` (sorted by name). A sibling
/// `<stem>.txt` supplies the item's label.
pub fn build_manifest_from_dir(
    dir: impl AsRef<Path>,
    fractions: SplitFractions,
    seed: u64,
    pyramid_depth: usize,
    patch_size: usize,
) -> Result<DatasetManifest, DataError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut items = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let label_path = p.with_extension("txt");
        let label = if label_path.exists() {
            Some(fs::read_to_string(&label_path).map_err(io_err(&label_path))?.trim().to_string())
        } else {
            None
        };
        items.push(SourceItem {
            path: p.file_name().expect("file name").to_string_lossy().into_owned(),
            label,
            sha256: sha256_hex(&bytes),
        });
    }
    let mut m = build_manifest(items, fractions, seed, pyramid_depth, patch_size)?;
    m.root = dir.to_path_buf();
    Ok(m)
}

/// Renders a synthetic corpus into `dir/images` and writes `dir/manifest.jsonl`.
pub fn generate_synthetic_corpus(
    dir: impl AsRef<Path>,
    spec: &SyntheticSpec,
    fractions: SplitFractions,
    pyramid_depth: usize,
) -> Result<DatasetManifest, DataError> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let rendered = synthetic_items(spec)?;
    let mut items = Vec::with_capacity(rendered.len());
    for (i, (img, text)) in rendered.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        let path = dir.join(&rel);
        save_png(img, &path)?;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        items.push(SourceItem {
            path: rel,
            label: Some(text.clone()),
            sha256: sha256_hex(&bytes),
        });
    }
    let mut m = build_manifest(items, fractions, spec.seed, pyramid_depth, spec.canvas)?;
    m.root = dir.to_path_buf();
    m.save(dir.join("manifest.jsonl"))?;
    Ok(m)
}

impl DatasetManifest {
    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    pub fn entries_with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Record::Header {
            version: MANIFEST_VERSION,
            pyramid_depth: self.pyramid_depth,
            patch_size: self.patch_size,
            seed: self.seed,
        };
        out.push_str(&serde_json::to_string(&header).expect("serializes"));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&Record::Item(e.clone())).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    /// Parses a manifest and checks that every referenced file exists with the
    /// recorded checksum.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| DataError::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            match rec {
                Record::Header {
                    version,
                    pyramid_depth,
                    patch_size,
                    seed,
                } => {
                    if version != MANIFEST_VERSION {
                        return Err(DataError::Manifest(format!("unsupported manifest version {version}")));
                    }
                    header = Some((pyramid_depth, patch_size, seed));
                }
                Record::Item(e) => entries.push(e),
            }
        }
        let (pyramid_depth, patch_size, seed) =
            header.ok_or_else(|| DataError::Manifest(format!("{}: missing header record", path.display())))?;
        let m = Self {
            pyramid_depth,
            patch_size,
            seed,
            entries,
            root,
        };
        for e in &m.entries {
            let p = m.resolve(e);
            let bytes = fs::read(&p).map_err(|_| DataError::MissingFile(p.display().to_string()))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(DataError::ChecksumMismatch(p.display().to_string()));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Decodes every image with the given role, in manifest order.
    pub fn load_role(&self, role: Role, channels: usize) -> Result<Vec<LoadedItem>, DataError> {
        self.entries_with_role(role)
            .map(|e| {
                Ok(LoadedItem {
                    id: e.path.clone(),
                    image: load_png(self.resolve(e), channels)?,
                    label: e.label.clone(),
                })
            })
            .collect()
    }
}
