use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdpn_cli::config::RESOLVED_CONFIG;
use cdpn_cli::serve::{BenchReport, SrMetadata};
use cdpn_core::data::{load_png, save_png};
use cdpn_core::tensor::ImageTensor;
use cdpn_core::training::TrainingLog;

fn cdpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdpn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cdpn(args);
    assert!(
        out.status.success(),
        "cdpn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = cdpn(args);
    assert!(!out.status.success(), "cdpn {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config(dir: &Path, out: &Path) -> PathBuf {
    let text = format!(
        r#"output_dir = "{}"
threads = 1

[model]
stages = 2
residual_blocks = 1
feature_channels = 4
head_kernel = 3
trunk_kernel = 3
tail_kernel = 3

[loss]
lambda_edge = 1e-6
extractor = "random-conv"
random_conv_widths = [4]
edge_network = "sobel"

[training]
epochs_parallel = 1
epochs_finetune = 1
batch_size = 4

[data.synthetic]
count = 20
canvas = 32
glyph_px_min = 6.0
glyph_px_max = 8.0
"#,
        out.display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_inference_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), &out);
    let cfg = s(&cfg);

    assert!(ok(&["gen-data", "--config", cfg]).contains("16 train / 2 val / 2 test"));
    assert!(out.join("data/manifest.jsonl").is_file());
    ok(&["train", "--config", cfg]);
    for f in ["train_log.jsonl", "parallel.ckpt", "checkpoints/stage1_best.ckpt", "checkpoints/stage2_last.ckpt", RESOLVED_CONFIG] {
        assert!(out.join(f).is_file(), "{f}");
    }
    ok(&["finetune", "--config", cfg]);
    assert!(out.join("cascade.ckpt").is_file() && out.join("finetune_log.jsonl").is_file());
    let table = ok(&["eval", "--config", cfg]);
    assert!(table.contains("| Method | PSNR | SSIM |"));
    assert!(!table.contains("S_LCS"));
    assert_eq!(std::fs::read_to_string(out.join("eval/comparison.md")).unwrap(), table);
    for stem in ["bicubic", "hybrid", "cascade"] {
        assert!(out.join(format!("eval/{stem}.jsonl")).is_file(), "{stem}");
    }

    let ckpt = out.join("cascade.ckpt");
    let input = dir.path().join("page.png");
    save_png(&ImageTensor::from_fn(1, 32, 32, |_, y, x| ((x + y) % 5) as f64 / 4.0), &input).unwrap();
    ok(&["sr", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    let sr = load_png(dir.path().join("page_sr.png"), 1).unwrap();
    assert_eq!(sr.shape(), (1, 128, 128));

    let one = dir.path().join("one.png");
    ok(&["sr", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&one), "--stages", "1"]);
    assert_eq!(load_png(&one, 1).unwrap().shape(), (1, 64, 64));

    let odd = dir.path().join("odd.png");
    save_png(&ImageTensor::filled(1, 13, 11, 0.3), &odd).unwrap();
    let odd_out = dir.path().join("odd_sr.png");
    ok(&["sr", "--checkpoint", s(&ckpt), "--input", s(&odd), "--output", s(&odd_out), "--align", "4"]);
    let meta: SrMetadata =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("odd_sr.png.json")).unwrap()).unwrap();
    assert_eq!(meta.padded, [16, 12]);
    assert_eq!(meta.output, [52, 44]);
    assert!(meta.cropped);
    assert_eq!(load_png(&odd_out, 1).unwrap().shape(), (1, 52, 44));
    assert!(fails(&["sr", "--checkpoint", s(&ckpt), "--input", s(&input), "--stages", "3"]).contains("exceeds"));

    let bench_json = dir.path().join("bench.json");
    ok(&["bench", "--checkpoint", s(&ckpt), "--size", "16", "--iters", "2", "--output", s(&bench_json)]);
    let report: BenchReport = serde_json::from_str(&std::fs::read_to_string(&bench_json).unwrap()).unwrap();
    assert_eq!(report.output, [64, 64]);
    assert!(report.frames_per_second > 0.0);

    let first = TrainingLog::from_jsonl(&std::fs::read_to_string(out.join("train_log.jsonl")).unwrap()).unwrap();
    ok(&["train", "--config", s(&out.join(RESOLVED_CONFIG))]);
    let again = TrainingLog::from_jsonl(&std::fs::read_to_string(out.join("train_log.jsonl")).unwrap()).unwrap();
    assert_eq!(first.without_timings(), again.without_timings());
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, format!("output_dir = \"{}\"\n[model]\nstages = 0\n", out.display())).unwrap();
    let err = fails(&["gen-data", "--config", s(&path)]);
    assert!(err.contains("model.stages"), "{err}");
    assert!(!out.exists());

    std::fs::write(&path, format!("output_dir = \"{}\"\n[training]\nepochz = 3\n", out.display())).unwrap();
    let err = fails(&["train", "--config", s(&path)]);
    assert!(err.contains("epochz"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_pretrained_weights_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let path = dir.path().join("vgg.toml");
    let missing = dir.path().join("nope.safetensors");
    std::fs::write(
        &path,
        format!(
            "output_dir = \"{}\"\n[loss]\nedge_network = \"sobel\"\nvgg19_weights = \"{}\"\n",
            out.display(),
            missing.display()
        ),
    )
    .unwrap();
    let err = fails(&["train", "--config", s(&path)]);
    assert!(err.contains("CDPN_VGG19_WEIGHTS"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("none.ckpt");
    let img = dir.path().join("none.png");
    assert!(fails(&["sr", "--checkpoint", s(&ckpt), "--input", s(&img)]).contains("does not exist"));
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), &out);
    assert!(fails(&["train", "--config", s(&cfg)]).contains("gen-data"));
    assert!(fails(&["sr", "--checkpoint", s(&ckpt), "--input", s(&img), "--align", "0"]).contains("align"));
}
