//! Six image perturbations at five severity levels.
//!
//! | kind          | severity 1..5                              |
//! |---------------|--------------------------------------------|
//! | gaussian_blur | sigma 0.5, 1, 2, 3, 5 px                   |
//! | white_noise   | additive Gaussian std 2, 6, 10, 16, 24 /255 |
//! | pink_noise    | 1/f noise, same std ladder                 |
//! | block         | 2, 4, 8, 12, 16 random 8x8 blocks          |
//! | brightness    | +10, 20, 30, 40, 50 /255                   |
//! | darkness      | -10, 20, 30, 40, 50 /255                   |
//!
//! Severity 0 returns the image unchanged.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const MAX_SEVERITY: u8 = 5;
const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];
const NOISE_STD: [f64; 5] = [2.0, 6.0, 10.0, 16.0, 24.0];
const BLOCK_COUNT: [usize; 5] = [2, 4, 8, 12, 16];
const BLOCK_SIZE: usize = 8;
const OFFSET: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    GaussianBlur,
    PinkNoise,
    WhiteNoise,
    Block,
    Brightness,
    Darkness,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::GaussianBlur,
        PerturbKind::PinkNoise,
        PerturbKind::WhiteNoise,
        PerturbKind::Block,
        PerturbKind::Brightness,
        PerturbKind::Darkness,
    ];

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::PinkNoise => "pink_noise",
            PerturbKind::WhiteNoise => "white_noise",
            PerturbKind::Block => "block",
            PerturbKind::Brightness => "brightness",
            PerturbKind::Darkness => "darkness",
        })
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// 0 (clean) to 5.
    pub severity: u8,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::InvalidConfig(format!("severity {severity} outside 0..={MAX_SEVERITY}")));
        }
        Ok(PerturbationSpec { kind, severity, seed })
    }

    fn rng(&self) -> Rng {
        rng::indexed_stream(self.seed, rng::STREAM_PERTURB, (self.kind.code() << 8) | u64::from(self.severity))
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(image: &RgbImage, mut f: impl FnMut(u32, u32, usize, f64) -> f64) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let src = image.get_pixel(x, y);
        *px = Rgb([0, 1, 2].map(|c| to_u8(f(x, y, c, f64::from(src[c])))));
    }
    out
}

pub fn perturb(image: &RgbImage, spec: &PerturbationSpec) -> Result<RgbImage> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::InvalidConfig(format!("severity {} outside 0..={MAX_SEVERITY}", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let level = usize::from(spec.severity - 1);
    let mut rng = spec.rng();
    Ok(match spec.kind {
        PerturbKind::GaussianBlur => gaussian_blur(image, BLUR_SIGMA[level]),
        PerturbKind::WhiteNoise => {
            let normal = Normal::new(0.0, NOISE_STD[level]).expect("positive std");
            map_pixels(image, |_, _, _, v| v + normal.sample(&mut rng))
        }
        PerturbKind::PinkNoise => {
            let (w, h) = image.dimensions();
            let fields: Vec<Vec<f64>> = (0..3).map(|_| pink_field(w as usize, h as usize, NOISE_STD[level], &mut rng)).collect();
            map_pixels(image, |x, y, c, v| v + fields[c][(y * w + x) as usize])
        }
        PerturbKind::Block => occlude(image, BLOCK_COUNT[level], &mut rng),
        PerturbKind::Brightness => map_pixels(image, |_, _, _, v| v + OFFSET[level]),
        PerturbKind::Darkness => map_pixels(image, |_, _, _, v| v - OFFSET[level]),
    })
}

fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (w, h) = (image.width() as i64, image.height() as i64);
    let at = |buf: &[f64], x: i64, y: i64, c: usize| buf[((y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) * 3) as usize + c];
    let src: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horiz[((y * w + x) * 3) as usize + c] =
                    kernel.iter().enumerate().map(|(k, wt)| wt * at(&src, x + k as i64 - radius, y, c)).sum();
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                to_u8(kernel.iter().enumerate().map(|(k, wt)| wt * at(&horiz, x, y + k as i64 - radius, c)).sum())
            });
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// Zero-mean noise with amplitude spectrum `1/f`, scaled to `std`.
fn pink_field(w: usize, h: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let mut buf: Vec<Complex<f64>> = (0..w * h).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut buf, w, h, &mut planner, false);
    for y in 0..h {
        for x in 0..w {
            let fx = x.min(w - x) as f64 / w as f64;
            let fy = y.min(h - y) as f64 / h as f64;
            let f = (fx * fx + fy * fy).sqrt();
            buf[y * w + x] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft2(&mut buf, w, h, &mut planner, true);
    let field: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
    if sd == 0.0 {
        return vec![0.0; field.len()];
    }
    field.iter().map(|v| (v - mean) / sd * std).collect()
}

fn fft2(buf: &mut [Complex<f64>], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn occlude(image: &RgbImage, count: usize, rng: &mut Rng) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (bw, bh) = (BLOCK_SIZE.min(w), BLOCK_SIZE.min(h));
    for _ in 0..count {
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let color = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                out.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    out
}
