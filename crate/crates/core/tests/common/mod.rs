//! Reference helpers shared by the integration tests.
#![allow(dead_code)]

use cdpn_core::tensor::ImageTensor;
use rand::Rng;

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Zero-padded "same" convolution written as nested loops.
pub fn naive_conv(x: &[Vec<Vec<f64>>], w: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<Vec<Vec<f64>>> {
    let cin = x.len();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let r = (k / 2) as i64;
    (0..cout)
        .map(|o| {
            (0..h)
                .map(|y| {
                    (0..wd)
                        .map(|xx| {
                            let mut s = b[o];
                            for i in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sy = y as i64 + ky as i64 - r;
                                        let sx = xx as i64 + kx as i64 - r;
                                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                            s += w[((o * cin + i) * k + ky) * k + kx] * x[i][sy as usize][sx as usize];
                                        }
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn planes(img: &ImageTensor) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = img.shape();
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| img.at(ch, y, x)).collect()).collect()).collect()
}

pub fn map3(v: Vec<Vec<Vec<f64>>>, f: impl Fn(f64) -> f64) -> Vec<Vec<Vec<f64>>> {
    v.into_iter()
        .map(|p| p.into_iter().map(|r| r.into_iter().map(&f).collect()).collect())
        .collect()
}

pub fn flat(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flatten().flatten().copied().collect()
}
