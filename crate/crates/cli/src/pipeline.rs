//! The stages of a run, shared by the subcommands and the acceptance suite.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cdpn_core::cascade::Cascade;
use cdpn_core::checkpoint::{load_checkpoint, save_checkpoint};
use cdpn_core::data::{
    extract_patches, generate_synthetic_corpus, DatasetManifest, LoadedItem, PyramidDataset, Role,
};
use cdpn_core::losses::{
    hed_side1_from_file, random_conv_extractor, tiny_edge_network, vgg19_from_file, CompositeLoss, EdgeNetwork,
    FeatureExtractor, IdentityExtractor, SobelEdgeNetwork,
};
use cdpn_core::metrics::{
    evaluate_sr, BicubicUpscaler, ChainedUpscaler, EvalItem, MetricReport, OcrEngine, StageUpscaler, TesseractCli,
    Upscaler,
};
use cdpn_core::rng::derive_seed;
use cdpn_core::tensor::ImageTensor;
use cdpn_core::training::{cascade_from_parallel, finetune_cascade, train_parallel, TrainOptions, TrainingLog};

use crate::config::{EdgeKind, ExtractorKind, RunConfig};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";

/// Runs `f` on a pool of `threads` workers (0 = rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot start worker threads")?;
    Ok(pool.install(f))
}

/// The loss networks named by the config. Fails before any output is written
/// when pretrained weights are missing.
pub fn build_loss(cfg: &RunConfig) -> Result<CompositeLoss> {
    let l = &cfg.loss;
    let c = cfg.model.image_channels;
    let extractor: Arc<dyn FeatureExtractor> = match l.extractor {
        ExtractorKind::Vgg19 => Arc::new(vgg19_from_file(&l.vgg19_weights, &l.vgg19_layer).with_context(|| {
            format!(
                "set loss.vgg19_weights or {} to a VGG19 safetensors file, or use extractor = \"random-conv\"",
                crate::config::ENV_VGG19_WEIGHTS
            )
        })?),
        ExtractorKind::RandomConv => Arc::new(random_conv_extractor(c, &l.random_conv_widths, l.random_conv_seed)),
        ExtractorKind::Identity => Arc::new(IdentityExtractor),
    };
    let edge: Arc<dyn EdgeNetwork> = match l.edge_network {
        EdgeKind::Hed => Arc::new(hed_side1_from_file(&l.hed_weights).with_context(|| {
            format!(
                "set loss.hed_weights or {} to a HED safetensors file, or use edge_network = \"sobel\"",
                crate::config::ENV_HED_WEIGHTS
            )
        })?),
        EdgeKind::Sobel => Arc::new(SobelEdgeNetwork {
            gain: l.sobel_gain,
            bias: l.sobel_bias,
        }),
        EdgeKind::Tiny => Arc::new(tiny_edge_network(c, l.tiny_edge_seed)),
    };
    Ok(CompositeLoss::new(l.weights(), extractor, edge)?.with_edge_threshold(l.edge_threshold))
}

/// Renders the synthetic corpus into `<output_dir>/data`.
pub fn generate_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let m = generate_synthetic_corpus(cfg.data_dir(), &cfg.data.synthetic, cfg.data.split, cfg.model.stages)?;
    Ok(m)
}

/// Training pairs, optional validation pairs and held-out evaluation items.
#[derive(Debug)]
pub struct Corpus {
    pub train: PyramidDataset,
    pub val: Option<PyramidDataset>,
    pub test: Vec<EvalItem>,
}

fn patches(cfg: &RunConfig, manifest: &DatasetManifest, items: Vec<LoadedItem>) -> Result<Vec<EvalItem>> {
    let size = match cfg.data.patch_size {
        0 => manifest.patch_size,
        s => s,
    };
    let unit = 1usize << cfg.model.stages;
    let mut out = Vec::new();
    for (i, it) in items.into_iter().enumerate() {
        let (_, h, w) = it.image.shape();
        if size == 0 || (h == size && w == size) {
            if h % unit != 0 || w % unit != 0 {
                bail!("{} is {h}×{w}, not divisible by 2^stages = {unit}; set data.patch_size", it.id);
            }
            out.push(EvalItem {
                id: it.id,
                hr: it.image,
                label: it.label,
            });
            continue;
        }
        let n = cfg.data.patches_per_image;
        let crops = extract_patches(&it.image, size, n, derive_seed(manifest.seed, i as u64))
            .with_context(|| format!("cropping {}", it.id))?;
        for (k, hr) in crops.into_iter().enumerate() {
            out.push(EvalItem {
                id: format!("{}#{k}", it.id),
                hr,
                label: None,
            });
        }
    }
    Ok(out)
}

fn pyramid(items: Vec<EvalItem>, levels: usize) -> Result<PyramidDataset> {
    let images: Vec<ImageTensor> = items.into_iter().map(|i| i.hr).collect();
    Ok(PyramidDataset::from_images(images, levels)?)
}

/// Loads the manifest named by the config and builds the pyramids.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.manifest_path();
    if !path.exists() {
        bail!("no manifest at {}; run `cdpn gen-data` first or set data.manifest", path.display());
    }
    let m = DatasetManifest::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let c = cfg.model.image_channels;
    let levels = cfg.model.stages;
    let train = patches(cfg, &m, m.load_role(Role::Train, c)?)?;
    if train.is_empty() {
        bail!("manifest {} has no training items", path.display());
    }
    let val = patches(cfg, &m, m.load_role(Role::Val, c)?)?;
    let test = patches(cfg, &m, m.load_role(Role::Test, c)?)?;
    Ok(Corpus {
        train: pyramid(train, levels)?,
        val: if val.is_empty() { None } else { Some(pyramid(val, levels)?) },
        test,
    })
}

fn write_log(log: &TrainingLog, path: &Path) -> Result<()> {
    log.write_jsonl(path).with_context(|| format!("writing {}", path.display()))
}

/// Parallel phase. Writes per-stage checkpoints, the log and `parallel.ckpt`.
pub fn train(cfg: &RunConfig, corpus: &Corpus, loss: &CompositeLoss) -> Result<(Cascade, TrainingLog)> {
    let opts = TrainOptions {
        validation: corpus.val.as_ref(),
        checkpoint_dir: Some(cfg.checkpoint_dir()),
        concurrent: cfg.threads != 1,
    };
    let configs = vec![cfg.model.net_config(); cfg.model.stages];
    let (nets, log) = train_parallel(&corpus.train, &configs, &cfg.training, loss, &opts)?;
    let cascade = cascade_from_parallel(nets, &cfg.training)?;
    write_log(&log, &cfg.output_dir.join(TRAIN_LOG))?;
    save_checkpoint(&cascade, cfg.parallel_checkpoint())?;
    Ok((cascade, log))
}

/// Fine-tuning phase. Writes the log and `cascade.ckpt`.
pub fn finetune(
    cfg: &RunConfig,
    cascade: Cascade,
    corpus: &Corpus,
    loss: &CompositeLoss,
) -> Result<(Cascade, TrainingLog)> {
    let opts = TrainOptions {
        validation: corpus.val.as_ref(),
        checkpoint_dir: Some(cfg.checkpoint_dir()),
        concurrent: false,
    };
    let (cascade, log) = finetune_cascade(cascade, &corpus.train, &cfg.training, loss, &opts)?;
    write_log(&log, &cfg.output_dir.join(FINETUNE_LOG))?;
    save_checkpoint(&cascade, cfg.cascade_checkpoint())?;
    Ok((cascade, log))
}

pub fn load_cascade(path: &Path) -> Result<Cascade> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The methods compared by `eval`: bicubic, the first stage followed by
/// bicubic for the remaining factor, and the full cascade.
pub fn comparison_methods(cascade: &Cascade) -> Vec<Box<dyn Upscaler>> {
    let mag = cascade.magnification();
    let mut methods: Vec<Box<dyn Upscaler>> = vec![Box::new(BicubicUpscaler { factor: mag })];
    let first = StageUpscaler {
        net: cascade.stage(0).clone(),
    };
    if mag > 2 {
        methods.push(Box::new(ChainedUpscaler::new(vec![
            Box::new(first),
            Box::new(BicubicUpscaler { factor: mag / 2 }),
        ])));
    }
    methods.push(Box::new(cascade.clone()));
    methods
}

pub const REPORT_STEMS: [&str; 3] = ["bicubic", "hybrid", "cascade"];

/// Scores every comparison method on `items` and writes one report per
/// method plus `comparison.md` into `<output_dir>/eval`.
pub fn evaluate(cfg: &RunConfig, cascade: &Cascade, items: &[EvalItem], ocr: bool) -> Result<Vec<MetricReport>> {
    if items.is_empty() {
        bail!("no evaluation items");
    }
    let engine = TesseractCli {
        binary: cfg.eval.tesseract.clone(),
        language: cfg.eval.ocr_language.clone(),
        psm: cfg.eval.ocr_psm,
    };
    let engine: Option<&dyn OcrEngine> = if ocr { Some(&engine) } else { None };
    let methods = comparison_methods(cascade);
    let stems: Vec<&str> = if methods.len() == 3 {
        REPORT_STEMS.to_vec()
    } else {
        vec!["bicubic", "cascade"]
    };
    let dir = cfg.eval_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut reports = Vec::new();
    for (m, stem) in methods.iter().zip(stems) {
        let r = evaluate_sr(m.as_ref(), items, engine, "test")?;
        r.write(&dir, stem)?;
        reports.push(r);
    }
    let refs: Vec<&MetricReport> = reports.iter().collect();
    let table = MetricReport::table(&refs);
    std::fs::write(dir.join("comparison.md"), &table).context("writing comparison.md")?;
    Ok(reports)
}
