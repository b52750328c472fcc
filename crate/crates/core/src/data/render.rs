//! Synthetic document-text patches drawn with the public-domain 8×8 bitmap font.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, DataError};
use crate::rng::derive_seed;
use crate::tensor::ImageTensor;

const SUPERSAMPLE: usize = 4;
const LINE_SPACING: f64 = 1.25;

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "for", "on", "with", "as", "by", "at", "from", "or", "be", "this",
    "that", "are", "was", "an", "report", "invoice", "total", "date", "page", "letter", "memo", "budget",
    "account", "number", "amount", "office", "review", "meeting", "project", "research", "table", "figure",
    "section", "summary", "results", "method", "data", "sample", "image", "scan", "document", "text", "line",
    "form", "name", "address", "phone", "email", "order", "payment", "due", "received", "approved", "signed",
    "copy", "file", "note", "policy", "contract", "agreement", "client", "company", "market", "sales", "cost",
    "price", "unit", "item", "quantity", "tax", "net", "gross", "annual", "quarter", "month", "week", "day",
    "2019", "2020", "42", "100", "3.5", "No.", "Dr.", "Inc.", "Ltd.", "Mr.", "Ms.", "A-7", "B12", "(see)",
    "Q:", "$250", "10%", "x=4", "Fig.", "Tab.", "vol.", "p.", "ISBN", "ref.", "etc.", "i.e.", "OCR", "Super",
    "Resolution", "Network", "Cascade", "Edge", "Pixel", "Detail",
];

/// Word-wraps `text` into lines of at most `cols` characters.
fn wrap(text: &str, cols: usize) -> Result<Vec<String>, DataError> {
    let mut lines: Vec<String> = Vec::new();
    let mut cur = String::new();
    for word in text.split_whitespace() {
        let wl = word.chars().count();
        if wl > cols {
            return Err(DataError::TextDoesNotFit(format!("word `{word}` is wider than {cols} columns")));
        }
        if cur.is_empty() {
            cur.push_str(word);
        } else if cur.chars().count() + 1 + wl <= cols {
            cur.push(' ');
            cur.push_str(word);
        } else {
            lines.push(std::mem::take(&mut cur));
            cur.push_str(word);
        }
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    Ok(lines)
}

struct Layout {
    margin: f64,
    cols: usize,
    rows: usize,
}

fn layout(glyph_px: f64, canvas: usize) -> Layout {
    let margin = (canvas as f64 / 32.0).max(2.0);
    let avail = canvas as f64 - 2.0 * margin;
    let cols = (avail / glyph_px).floor().max(0.0) as usize;
    // The last line needs only one glyph height, not a full line pitch.
    let rows = if avail < glyph_px {
        0
    } else {
        ((avail - glyph_px) / (glyph_px * LINE_SPACING)).floor() as usize + 1
    };
    Layout { margin, cols, rows }
}

/// Renders `text` as dark glyphs on a light square canvas. Each glyph cell is
/// `glyph_px` pixels square. The seed jitters the text position, ink level and
/// background level. Returns the image and the rendered text with whitespace
/// collapsed.
pub fn render_synthetic_patch(
    text: &str,
    glyph_px: f64,
    canvas: usize,
    seed: u64,
) -> Result<(ImageTensor, String), DataError> {
    if text.trim().is_empty() {
        return Err(DataError::EmptyText);
    }
    if canvas == 0 || canvas % 4 != 0 {
        return Err(DataError::BadCanvas(canvas));
    }
    if !(glyph_px.is_finite() && glyph_px >= 4.0) {
        return Err(DataError::TextDoesNotFit(format!("glyph size {glyph_px} px is below the 4 px minimum")));
    }
    let lay = layout(glyph_px, canvas);
    if lay.cols == 0 {
        return Err(DataError::TextDoesNotFit(format!("{glyph_px} px glyphs do not fit a {canvas} px canvas")));
    }
    let lines = wrap(text, lay.cols)?;
    if lines.len() > lay.rows {
        return Err(DataError::TextDoesNotFit(format!(
            "{} lines needed but only {} fit at {glyph_px} px",
            lines.len(),
            lay.rows
        )));
    }
    let glyphs: Vec<Vec<[u8; 8]>> = lines
        .iter()
        .map(|l| {
            l.chars()
                .map(|ch| BASIC_FONTS.get(ch).ok_or(DataError::UnsupportedChar(ch)))
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widest = glyphs.iter().map(|l| l.len()).max().unwrap_or(0) as f64 * glyph_px;
    let height = (lines.len() - 1) as f64 * glyph_px * LINE_SPACING + glyph_px;
    let avail = canvas as f64 - 2.0 * lay.margin;
    let ox = lay.margin + rng.gen_range(0.0..=(avail - widest).max(0.0));
    let oy = lay.margin + rng.gen_range(0.0..=(avail - height).max(0.0));
    let paper = rng.gen_range(0.92..=1.0);
    let ink = rng.gen_range(0.0..=0.15);

    let pitch = glyph_px * LINE_SPACING;
    let inked = |sy: f64, sx: f64| -> bool {
        let (dy, dx) = (sy - oy, sx - ox);
        if dy < 0.0 || dx < 0.0 {
            return false;
        }
        let line = (dy / pitch) as usize;
        let Some(row) = glyphs.get(line) else {
            return false;
        };
        let gy = ((dy - line as f64 * pitch) / glyph_px * 8.0) as usize;
        let col = (dx / glyph_px) as usize;
        if gy >= 8 || col >= row.len() {
            return false;
        }
        let gx = ((dx - col as f64 * glyph_px) / glyph_px * 8.0) as usize;
        gx < 8 && row[col][gy] & (1 << gx) != 0
    };
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let img = ImageTensor::from_fn(1, canvas, canvas, |_, y, x| {
        let mut hits = 0usize;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) * step;
                let px = x as f64 + (sx as f64 + 0.5) * step;
                hits += usize::from(inked(py, px));
            }
        }
        paper + (ink - paper) * hits as f64 / total
    });
    Ok((img, lines.join(" ")))
}

/// Parameters of a generated corpus of text patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub canvas: usize,
    pub glyph_px_min: f64,
    pub glyph_px_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 200,
            canvas: 128,
            glyph_px_min: 12.0,
            glyph_px_max: 20.0,
            seed: 0,
        }
    }
}

/// Random words filling up to `rows` lines of `cols` characters.
fn random_text(rng: &mut impl Rng, cols: usize, rows: usize) -> String {
    let mut words: Vec<&str> = Vec::new();
    let mut line_len = 0usize;
    let mut line = 1usize;
    for _ in 0..10_000 {
        let w = *WORDS.choose(rng).expect("word list is nonempty");
        let wl = w.chars().count();
        if wl > cols {
            continue;
        }
        let next = if line_len == 0 { wl } else { line_len + 1 + wl };
        if next <= cols {
            line_len = next;
        } else if line < rows {
            line += 1;
            line_len = wl;
        } else {
            break;
        }
        words.push(w);
    }
    words.join(" ")
}

/// Deterministically renders `spec.count` patches, quantized to 8 bits.
/// Item `i` depends only on `(spec, i)`.
pub fn synthetic_items(spec: &SyntheticSpec) -> Result<Vec<(ImageTensor, String)>, DataError> {
    if spec.glyph_px_min > spec.glyph_px_max || spec.glyph_px_min < 4.0 {
        return Err(DataError::TextDoesNotFit(format!(
            "glyph size range [{}, {}] is invalid",
            spec.glyph_px_min, spec.glyph_px_max
        )));
    }
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            let glyph = rng.gen_range(spec.glyph_px_min..=spec.glyph_px_max);
            let lay = layout(glyph, spec.canvas);
            let text = random_text(&mut rng, lay.cols, lay.rows);
            let (img, text) = render_synthetic_patch(&text, glyph, spec.canvas, rng.gen())?;
            Ok((quantize(&img), text))
        })
        .collect()
}
