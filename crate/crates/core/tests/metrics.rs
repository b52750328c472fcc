use std::collections::HashMap;

use cdpn_core::metrics::{
    evaluate_sr, lcs_score, levenshtein_score, psnr, ssim, BicubicUpscaler, EvalItem, IdentityUpscaler, MetricReport,
    MetricsError, OcrEngine, TesseractCli,
};
use cdpn_core::tensor::ImageTensor;

/// Recognizes an image by looking up its first pixel value.
struct LookupOcr(HashMap<u64, String>);

impl OcrEngine for LookupOcr {
    fn name(&self) -> String {
        "lookup".into()
    }

    fn is_available(&self) -> bool {
        true
    }

    fn recognize(&self, img: &ImageTensor) -> Result<String, MetricsError> {
        Ok(self.0.get(&img.data()[0].to_bits()).cloned().unwrap_or_default())
    }
}

fn items() -> Vec<EvalItem> {
    (0..4)
        .map(|i| EvalItem {
            id: format!("item{i}"),
            hr: ImageTensor::from_fn(1, 16, 16, |_, y, x| ((i * 5 + y * 3 + x) % 9) as f64 / 8.0),
            label: Some(["kitten", "sitting", "page one", "  Total  due "][i].to_string()),
        })
        .collect()
}

#[test]
fn worked_values() {
    let a = ImageTensor::filled(1, 4, 4, 0.5);
    let b = ImageTensor::filled(1, 4, 4, 0.6);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert_eq!(lcs_score("kitten", "sitting"), 4.0 / 7.0);
    assert_eq!(levenshtein_score("kitten", "sitting"), 4.0 / 7.0);
    assert_eq!(lcs_score("", ""), 1.0);
    let c = ImageTensor::filled(1, 11, 11, 0.3);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(ssim(&a, &a), Err(MetricsError::TooSmall { .. })));
    assert!(matches!(psnr(&a, &c), Err(MetricsError::Shape(..))));
}

#[test]
fn identity_upscaler_is_perfect() {
    let r = evaluate_sr(&IdentityUpscaler, &items(), None, "ramps").unwrap();
    assert_eq!(r.summary.count, 4);
    assert_eq!(r.summary.psnr, 100.0);
    assert!((r.summary.ssim - 1.0).abs() < 1e-12);
    assert!(!r.has_ocr());
    let table = MetricReport::table(&[&r]);
    assert!(table.contains("PSNR") && !table.contains("S_LCS"));
}

#[test]
fn evaluation_is_deterministic_and_ordered() {
    let up = BicubicUpscaler { factor: 4 };
    let a = evaluate_sr(&up, &items(), None, "ramps").unwrap();
    let b = evaluate_sr(&up, &items(), None, "ramps").unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let ids: Vec<&str> = a.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids, ["item0", "item1", "item2", "item3"]);
}

#[test]
fn ocr_scores_use_normalized_text() {
    let its = items();
    let mut table = HashMap::new();
    let texts = ["kitten", "sittin", "page  one", "Total due"];
    for (it, t) in its.iter().zip(texts) {
        table.insert(it.hr.data()[0].to_bits(), t.to_string());
    }
    let r = evaluate_sr(&IdentityUpscaler, &its, Some(&LookupOcr(table)), "ramps").unwrap();
    assert!(r.has_ocr());
    assert_eq!(r.items[0].s_lcs, Some(1.0));
    assert_eq!(r.items[1].s_ld, Some(1.0 - 1.0 / 7.0));
    assert_eq!(r.items[2].s_lcs, Some(1.0));
    assert_eq!(r.items[3].s_ld, Some(1.0));
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path(), "id").unwrap();
    let md = std::fs::read_to_string(dir.path().join("id.md")).unwrap();
    assert!(md.contains("S_LCS") && md.contains("S_LD"));
    assert_eq!(std::fs::read_to_string(dir.path().join("id.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn ocr_errors_are_reported() {
    let mut its = items();
    its[2].label = None;
    let r = evaluate_sr(&IdentityUpscaler, &its, Some(&LookupOcr(HashMap::new())), "ramps");
    assert!(matches!(r, Err(MetricsError::MissingLabel(id)) if id == "item2"));
    let missing = TesseractCli {
        binary: "/nonexistent/ocr-binary".into(),
        ..Default::default()
    };
    let r = evaluate_sr(&IdentityUpscaler, &items(), Some(&missing), "ramps");
    assert!(matches!(r, Err(MetricsError::OcrUnavailable(_))));
}
