//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use cdpn_cli::config::RunConfig;
use cdpn_cli::pipeline::{self, Corpus};
use cdpn_core::cascade::{assemble_cascade, Cascade};
use cdpn_core::checkpoint::{load_checkpoint, save_checkpoint};
use cdpn_core::losses::{
    class_balanced_bce, perceptual_loss, random_conv_extractor, tiny_edge_network, CompositeLoss, EdgeNetwork,
    FeatureExtractor, IdentityExtractor, LossWeights,
};
use cdpn_core::metrics::{degrade, evaluate_sr, lcs_score, levenshtein_score, psnr, ssim, MetricReport};
use cdpn_core::model::{DpNet, DpNetConfig};
use cdpn_core::nn::{pixel_shuffle, pixel_unshuffle};
use cdpn_core::tensor::{ImageTensor, Tensor};
use cdpn_core::training::{cascade_from_parallel, finetune_cascade, train_parallel, TrainOptions, TrainingLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Verdict>) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (mut pass, mut detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if let Some(limit) = limit {
            if took > limit {
                pass = false;
                detail.push_str(&format!("; exceeded {:.0} s budget", limit.as_secs_f64()));
            }
        }
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} [{id}] {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn oracle_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Mean SSIM with every 11×11 Gaussian window summed explicitly.
fn oracle_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let (ch, h, w) = a.shape();
    let mut acc = 0.0;
    for c in 0..ch {
        let mut sum = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        let (u, v) = (a.at(c, y + i, x + j), b.at(c, y + i, x + j));
                        mx += k * u;
                        my += k * v;
                        xx += k * u * u;
                        yy += k * v * v;
                        xy += k * u * v;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        acc += sum / ((h - 10) * (w - 10)) as f64;
    }
    acc / ch as f64
}

/// Memoized recursive definitions over suffixes.
struct StringOracle<'a> {
    a: &'a [char],
    b: &'a [char],
    lcs: HashMap<(usize, usize), usize>,
    edit: HashMap<(usize, usize), usize>,
}

impl<'a> StringOracle<'a> {
    fn new(a: &'a [char], b: &'a [char]) -> Self {
        Self {
            a,
            b,
            lcs: HashMap::new(),
            edit: HashMap::new(),
        }
    }

    fn lcs(&mut self, i: usize, j: usize) -> usize {
        if i == self.a.len() || j == self.b.len() {
            return 0;
        }
        if let Some(v) = self.lcs.get(&(i, j)) {
            return *v;
        }
        let v = if self.a[i] == self.b[j] {
            1 + self.lcs(i + 1, j + 1)
        } else {
            self.lcs(i + 1, j).max(self.lcs(i, j + 1))
        };
        self.lcs.insert((i, j), v);
        v
    }

    fn edit(&mut self, i: usize, j: usize) -> usize {
        if i == self.a.len() {
            return self.b.len() - j;
        }
        if j == self.b.len() {
            return self.a.len() - i;
        }
        if let Some(v) = self.edit.get(&(i, j)) {
            return *v;
        }
        let sub = self.edit(i + 1, j + 1) + usize::from(self.a[i] != self.b[j]);
        let v = sub.min(self.edit(i + 1, j) + 1).min(self.edit(i, j + 1) + 1);
        self.edit.insert((i, j), v);
        v
    }
}

fn oracle_scores(s: &str, t: &str) -> (f64, f64) {
    let (a, b): (Vec<char>, Vec<char>) = (s.chars().collect(), t.chars().collect());
    let m = a.len().max(b.len());
    if m == 0 {
        return (1.0, 1.0);
    }
    let mut o = StringOracle::new(&a, &b);
    (o.lcs(0, 0) as f64 / m as f64, 1.0 - o.edit(0, 0) as f64 / m as f64)
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_psnr: f64 = 0.0;
    let mut worst_ssim: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(11..=24), rng.gen_range(11..=24));
        let a = random_image(&mut rng, c, h, w);
        let mut b = a.clone();
        let amp = rng.gen_range(0.0..0.5);
        b.data_mut().iter_mut().for_each(|v| *v = (*v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0));
        worst_psnr = worst_psnr.max(rel(psnr(&a, &b)?, oracle_psnr(&a, &b)));
        worst_ssim = worst_ssim.max(rel(ssim(&a, &b)?, oracle_ssim(&a, &b)));
    }
    let alphabet: Vec<char> = "abcdeé 1".chars().collect();
    let mut mismatches = 0;
    for _ in 0..100 {
        let word = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(0..40);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let (s, t) = (word(&mut rng), word(&mut rng));
        let (l, d) = oracle_scores(&s, &t);
        if lcs_score(&s, &t) != l || levenshtein_score(&s, &t) != d {
            mismatches += 1;
        }
    }
    let a = ImageTensor::filled(1, 16, 16, 0.5);
    let b = ImageTensor::filled(1, 16, 16, 0.6);
    let db = psnr(&a, &b)?;
    let (kl, kd) = (lcs_score("kitten", "sitting"), levenshtein_score("kitten", "sitting"));
    let worked = rel(db, 20.0) <= 1e-6 && (kl - 4.0 / 7.0).abs() < 1e-15 && (kd - 4.0 / 7.0).abs() < 1e-15;
    verdict(
        worst_psnr <= 1e-6 && worst_ssim <= 1e-6 && mismatches == 0 && worked,
        format!(
            "max rel err PSNR {worst_psnr:.1e}, SSIM {worst_ssim:.1e} (tol 1e-6); string mismatches {mismatches}/100; \
             MSE 0.01 -> {db:.6} dB; kitten/sitting S_LCS {kl:.6}, S_LD {kd:.6} (4/7 = {:.6})",
            4.0 / 7.0
        ),
    )
}

fn brute_shuffle(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let co = c / 4;
    let mut out = vec![f64::NAN; n * c * h * w];
    for b in 0..n {
        for k in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[((b * co + k) * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] =
                                x.at(b, 4 * k + 2 * dy + dx, y, xx);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, co, 2 * h, 2 * w], out).expect("shape")
}

fn pixel_shuffle_map() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut bad = 0;
    for _ in 0..50 {
        let shape = [rng.gen_range(1..3), 4 * rng.gen_range(1..9), rng.gen_range(1..17), rng.gen_range(1..17)];
        let data = (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(shape, data)?;
        let y = pixel_shuffle(&x)?;
        if y.data() != brute_shuffle(&x).data() || pixel_unshuffle(&y)?.data() != x.data() {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{} of 50 random shapes match the index map", 50 - bad))
}

fn loss_formulas() -> Result<Verdict> {
    let img = |d: &[f64]| ImageTensor::new(1, 1, d.len(), d.to_vec());
    let a = class_balanced_bce(&img(&[0.5, 0.5])?, &img(&[1.0, 0.0])?)?;
    let a_ref = -(0.5 * 0.5f64.ln() + 0.5 * 0.5f64.ln());
    let b = class_balanced_bce(&img(&[0.9, 0.1, 0.1, 0.1])?, &img(&[1.0, 0.0, 0.0, 0.0])?)?;
    let b_ref = -(0.75 * 0.9f64.ln() + 0.25 * 3.0 * 0.9f64.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(4..20), rng.gen_range(4..20));
        let x = random_image(&mut rng, c, h, w);
        let y = random_image(&mut rng, c, h, w);
        let ss: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        worst = worst.max((perceptual_loss(&x, &y, &IdentityExtractor)? - ss / (c * h * w) as f64).abs());
    }
    let pass = (a - a_ref).abs() <= 1e-6 && (b - b_ref).abs() <= 1e-6 && (a - 0.6931).abs() < 5e-5 && worst <= 1e-6;
    verdict(
        pass && (b - 0.1580).abs() < 5e-5,
        format!(
            "BCE {a:.7} (hand {a_ref:.7}, ~0.6931), {b:.7} (hand {b_ref:.7}, ~0.1580); \
             identity perceptual max abs err {worst:.1e} (tol 1e-6)"
        ),
    )
}

fn gradient_check() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let fx: Arc<dyn FeatureExtractor> = Arc::new(random_conv_extractor(1, &[4, 4], 5));
    let en: Arc<dyn EdgeNetwork> = Arc::new(tiny_edge_network(1, 6));
    let loss = CompositeLoss::new(LossWeights::new(1.0, 0.5, 0.05), fx, en)?;
    let sr = random_image(&mut rng, 1, 16, 16).to_batch();
    let hr = random_image(&mut rng, 1, 16, 16).to_batch();
    let (_, grad) = loss.evaluate_with_grad(&sr, &hr)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..sr.data().len());
        let mut p = sr.clone();
        p.data_mut()[i] += h;
        let mut m = sr.clone();
        m.data_mut()[i] -= h;
        let fd = (loss.evaluate(&p, &hr)?.total - loss.evaluate(&m, &hr)?.total) / (2.0 * h);
        let g = grad.data()[i];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-8));
    }
    verdict(worst < 1e-3, format!("max relative error {worst:.2e} over 20 coordinates (tol 1e-3)"))
}

fn tiny_config() -> DpNetConfig {
    DpNetConfig {
        residual_blocks: 1,
        feature_channels: 4,
        head_kernel: 3,
        trunk_kernel: 3,
        tail_kernel: 3,
        image_channels: 1,
        upsample_factor: 2,
    }
}

fn freezing(base: &RunConfig) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let mut cfg = base.clone();
    cfg.output_dir = dir.path().to_path_buf();
    pipeline::generate_data(&cfg)?;
    let corpus = pipeline::load_corpus(&cfg)?;
    let loss = pipeline::build_loss(&cfg)?;
    let schedule = cdpn_core::training::TrainingSchedule {
        epochs_parallel: 1,
        epochs_finetune: 1,
        ..cfg.training
    };
    let opts = TrainOptions::default();
    let (nets, _) = train_parallel(&corpus.train, &[tiny_config(), tiny_config()], &schedule, &loss, &opts)?;
    let cascade = cascade_from_parallel(nets, &schedule)?;
    let (tuned, _) = finetune_cascade(cascade.clone(), &corpus.train, &schedule, &loss, &opts)?;
    let kept = tuned.stage(1).same_parameters(cascade.stage(1));
    let moved = !tuned.stage(0).same_parameters(cascade.stage(0));
    verdict(
        kept && moved,
        format!(
            "{} training images; stage 2 bit-identical: {kept}; stage 1 changed: {moved}",
            corpus.train.len()
        ),
    )
}

fn magnification() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let cascade = assemble_cascade((0..3).map(|i| DpNet::new(tiny_config(), 40 + i)).collect::<Result<_, _>>()?)?;
    let mut dims = Vec::new();
    let mut ok = true;
    for (h, w) in [(8, 8), (13, 9), (5, 21)] {
        let img = random_image(&mut rng, 1, h, w);
        for k in 0..=3usize {
            let out = cascade.super_resolve(&img, Some(k))?;
            ok &= out.shape() == (1, h << k, w << k);
            if h == 13 {
                dims.push(format!("{}×{}", out.height(), out.width()));
            }
        }
        ok &= cascade.super_resolve(&img, Some(0))? == img;
        let mut by_hand = img.clone();
        for k in 0..3 {
            by_hand = cascade.stage(k).forward(&by_hand)?;
            ok &= cascade.super_resolve(&img, Some(k + 1))? == by_hand;
        }
    }
    verdict(ok, format!("13×9 -> {} for stages 0..3; compositions bit-exact: {ok}", dims.join(", ")))
}

struct DeskRun {
    _dir: tempfile::TempDir,
    out: std::path::PathBuf,
    train_log: TrainingLog,
    finetune_log: TrainingLog,
    before: MetricReport,
    reports: Vec<MetricReport>,
    cascade: Cascade,
    corpus: Corpus,
}

fn desk_run(base: &RunConfig) -> Result<DeskRun> {
    let dir = tempfile::tempdir()?;
    let mut cfg = base.clone();
    cfg.output_dir = dir.path().join("desk");
    cfg.prepare_output()?;
    pipeline::generate_data(&cfg)?;
    let corpus = pipeline::load_corpus(&cfg)?;
    let loss = pipeline::build_loss(&cfg)?;
    let (train_log, finetune_log, before, reports, cascade) = pipeline::with_threads(cfg.threads, || {
        let (parallel, train_log) = pipeline::train(&cfg, &corpus, &loss)?;
        let before = evaluate_sr(&parallel, &corpus.test, None, "test")?;
        let (cascade, finetune_log) = pipeline::finetune(&cfg, parallel, &corpus, &loss)?;
        let reports = pipeline::evaluate(&cfg, &cascade, &corpus.test, false)?;
        anyhow::Ok((train_log, finetune_log, before, reports, cascade))
    })??;
    Ok(DeskRun {
        out: cfg.output_dir.clone(),
        _dir: dir,
        train_log,
        finetune_log,
        before,
        reports,
        cascade,
        corpus,
    })
}

fn summary<'a>(run: &'a DeskRun, method_index: usize) -> &'a cdpn_core::metrics::MetricSummary {
    &run.reports[method_index].summary
}

fn desk_end_to_end(run: &DeskRun) -> Result<Verdict> {
    ensure!(run.reports.len() == 3, "expected bicubic, hybrid and cascade reports");
    let (bic, casc) = (summary(run, 0), summary(run, 2));
    let pass = casc.psnr >= bic.psnr + 1.0 && casc.ssim > bic.ssim;
    verdict(
        pass,
        format!(
            "{} held-out items at 4×: cascade {:.3} dB / SSIM {:.4} vs bicubic {:.3} dB / SSIM {:.4} \
             (margin {:+.3} dB, need >= +1.0)",
            casc.count,
            casc.psnr,
            casc.ssim,
            bic.psnr,
            bic.ssim,
            casc.psnr - bic.psnr
        ),
    )
}

fn finetune_non_degradation(run: &DeskRun) -> Result<Verdict> {
    let (before, after) = (run.before.summary.psnr, summary(run, 2).psnr);
    verdict(
        after >= before - 0.1,
        format!("held-out PSNR {before:.3} dB after parallel training, {after:.3} dB after fine-tuning (allowed drop 0.1)"),
    )
}

fn ablation(run: &DeskRun) -> Result<Verdict> {
    let (bic, hyb, casc) = (summary(run, 0), summary(run, 1), summary(run, 2));
    let pass = hyb.psnr >= bic.psnr && casc.psnr >= hyb.psnr && casc.psnr >= bic.psnr;
    verdict(
        pass,
        format!(
            "bicubic 4× {:.3} dB <= stage 1 + bicubic 2× {:.3} dB <= cascade 4× {:.3} dB",
            bic.psnr, hyb.psnr, casc.psnr
        ),
    )
}

fn checkpoint_round_trip(run: &DeskRun) -> Result<Verdict> {
    let path = run.out.join("cascade.ckpt");
    let loaded = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let resaved = run.out.join("resaved.ckpt");
    save_checkpoint(&loaded, &resaved)?;
    let again = load_checkpoint(&resaved)?;
    let mut same = 0;
    for item in &run.corpus.test {
        let lr = degrade(&item.hr, run.cascade.magnification())?;
        let want = run.cascade.super_resolve(&lr, None)?;
        if loaded.super_resolve(&lr, None)? == want && again.super_resolve(&lr, None)? == want {
            same += 1;
        }
    }
    let n = run.corpus.test.len();
    verdict(same == n && n > 0, format!("{same} of {n} held-out outputs identical after save/load"))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn reproducibility(a: &DeskRun, b: &DeskRun) -> Result<Verdict> {
    let logs = a.train_log.without_timings() == b.train_log.without_timings()
        && a.finetune_log.without_timings() == b.finetune_log.without_timings();
    let reports = a.reports == b.reports;
    let mut files = true;
    for stem in pipeline::REPORT_STEMS {
        for ext in ["jsonl", "md", "summary.json"] {
            let name = format!("eval/{stem}.{ext}");
            files &= read(&a.out.join(&name))? == read(&b.out.join(&name))?;
        }
    }
    files &= read(&a.out.join("eval/comparison.md"))? == read(&b.out.join("eval/comparison.md"))?;
    verdict(
        logs && reports && files,
        format!(
            "{} log entries; logs equal (timings excluded): {logs}; reports equal: {reports}; report files equal: {files}",
            a.train_log.entries.len() + a.finetune_log.entries.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    let base = match RunConfig::load(DESK_CONFIG) {
        Ok(c) => c,
        Err(e) => {
            println!("FAIL cannot load {DESK_CONFIG}: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let secs = Duration::from_secs;
    suite.run("1", "metric oracles", Some(secs(60)), metric_oracles);
    suite.run("2", "pixel shuffle index map", None, pixel_shuffle_map);
    suite.run("3", "loss formulas", None, loss_formulas);
    suite.run("4", "total-loss gradient", Some(secs(120)), gradient_check);
    suite.run("5", "freezing during fine-tuning", Some(secs(300)), || freezing(&base));
    suite.run("6", "cascade magnification", None, magnification);

    let start = Instant::now();
    let first = desk_run(&base);
    println!("     desk run finished in {:.1} s", start.elapsed().as_secs_f64());
    let first = match first {
        Ok(r) => Some(r),
        Err(e) => {
            println!("     desk run failed: {e:#}");
            None
        }
    };
    let need = |r: &Option<DeskRun>| r.as_ref().context("desk run did not complete").map(|_| ());
    suite.run("7", "desk end-to-end", None, || {
        need(&first)?;
        desk_end_to_end(first.as_ref().unwrap())
    });
    suite.run("7b", "fine-tuning does not degrade", None, || {
        need(&first)?;
        finetune_non_degradation(first.as_ref().unwrap())
    });
    suite.run("8", "ablation ordering", None, || {
        need(&first)?;
        ablation(first.as_ref().unwrap())
    });
    suite.run("9", "checkpoint round trip", None, || {
        need(&first)?;
        checkpoint_round_trip(first.as_ref().unwrap())
    });
    suite.run("10", "reproducibility", None, || {
        need(&first)?;
        let second = desk_run(&base)?;
        reproducibility(first.as_ref().unwrap(), &second)
    });

    if suite.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}
