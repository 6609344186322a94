//! Procedural multi-domain face-swap surrogate.
//!
//! Real images are a shaded face ellipse on a flat background with sensor
//! grain. Fake images paste a second, smoother face into an inner ellipse
//! (every domain shares this blending trace) and then add a domain-specific
//! artifact family and a chroma tint to the pasted region. Families cycle
//! through periodic seams, band-limited noise, local warping and blockiness.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::manifest::{Label, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_real: usize,
    pub n_per_domain: usize,
    pub n_domains: usize,
    pub image_size: usize,
    pub frames_per_video: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub appearance: Appearance,
}

/// Rendering constants. Intensities are in `[0, 1]` pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    /// Sensor grain std of real footage.
    pub grain: f64,
    /// Grain std of the pasted face (before its 3x3 blur).
    pub swap_grain: f64,
    /// Chroma tint length of the pasted region of fakes.
    pub tint: f64,
    /// Largest chroma tint of real faces (random direction).
    pub real_tint: f64,
    /// Scale of the family textures (seams, band noise, warp).
    pub artifact: f64,
    /// Angle of forgery domain 4's tint, in degrees.
    pub held_angle: f64,
    /// Length of forgery domain 4's tint relative to `tint`.
    pub held_scale: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance { grain: 0.035, swap_grain: 0.008, tint: 0.12, real_tint: 0.12, artifact: 1.3, held_angle: 60.0, held_scale: 0.5 }
    }
}

impl SynthSpec {
    pub fn new(n_real: usize, n_per_domain: usize, n_domains: usize, image_size: usize) -> Self {
        SynthSpec {
            n_real,
            n_per_domain,
            n_domains,
            image_size,
            frames_per_video: 1,
            val_fraction: 0.0,
            test_fraction: 0.25,
            appearance: Appearance::default(),
        }
    }

    pub fn from_config(cfg: &crate::config::Config) -> Self {
        SynthSpec {
            n_real: cfg.data.n_real,
            n_per_domain: cfg.data.n_per_domain,
            n_domains: cfg.data.n_domains,
            image_size: cfg.model.backbone.image_size,
            frames_per_video: cfg.data.frames_per_video,
            val_fraction: cfg.data.val_fraction,
            test_fraction: cfg.data.test_fraction,
            appearance: Appearance::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("synthetic images must be at least 8 pixels".into()));
        }
        if self.frames_per_video == 0 {
            return Err(Error::InvalidConfig("data.frames_per_video must be positive".into()));
        }
        if self.n_domains > 0 && self.n_per_domain == 0 {
            return Err(Error::InvalidConfig("data.n_per_domain must be positive".into()));
        }
        Ok(())
    }
}

/// Planar RGB canvas with values nominally in `[0, 1]`.
#[derive(Debug, Clone)]
struct Canvas {
    size: usize,
    data: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas { size, data: vec![[0.0; 3]; size * size] }
    }

    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.size + x]
    }

    fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let max = (self.size - 1) as f64;
        let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.size - 1), (y0 + 1).min(self.size - 1));
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.at(x0, y0)[c] * (1.0 - tx) + self.at(x1, y0)[c] * tx;
            let bottom = self.at(x0, y1)[c] * (1.0 - tx) + self.at(x1, y1)[c] * tx;
            *o = top * (1.0 - ty) + bottom * ty;
        }
        out
    }

    fn box_blur(&self) -> Canvas {
        let s = self.size as isize;
        let mut out = Canvas::new(self.size);
        for y in 0..s {
            for x in 0..s {
                let mut acc = [0.0; 3];
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let px = self.at((x + dx).clamp(0, s - 1) as usize, (y + dy).clamp(0, s - 1) as usize);
                        for c in 0..3 {
                            acc[c] += px[c] / 9.0;
                        }
                    }
                }
                out.data[(y * s + x) as usize] = acc;
            }
        }
        out
    }

    fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.size as u32, self.size as u32);
        for (i, px) in self.data.iter().enumerate() {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % self.size) as u32, (i / self.size) as u32, Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        img
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Soft inside-indicator with a linear ramp of `width` (in radius units).
    fn mask(&self, u: f64, v: f64, width: f64) -> f64 {
        let r = (((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2)).sqrt();
        ((1.0 - r) / width + 0.5).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct Face {
    background: [f64; 3],
    skin: [f64; 3],
    ellipse: Ellipse,
    shading: Vec<(f64, f64, f64, f64)>,
}

const BACKGROUND: [f64; 3] = [0.36, 0.40, 0.44];
const SKIN: [f64; 3] = [0.72, 0.56, 0.47];
fn draw_face(look: &Appearance, real: bool, rng: &mut Rng) -> Face {
    let lum: f64 = rng.random_range(-0.08..0.08);
    let mut background = BACKGROUND;
    for c in &mut background {
        *c += lum * 0.5 + rng.random_range(-0.015..0.015);
    }
    let tone: f64 = rng.random_range(-0.08..0.08);
    let mut skin = SKIN;
    let cast = chroma(rng.random_range(0.0..2.0 * PI));
    let cast_len = if real { look.real_tint } else { 0.0 } * rng.random_range(0.0..1.0f64).sqrt();
    for (c, v) in skin.iter_mut().enumerate() {
        *v += tone + rng.random_range(-0.012..0.012) + cast[c] * cast_len;
    }
    let ellipse = Ellipse {
        cx: 0.5 + rng.random_range(-0.05..0.05),
        cy: 0.5 + rng.random_range(-0.05..0.05),
        rx: rng.random_range(0.30..0.36),
        ry: rng.random_range(0.36..0.42),
    };
    let shading = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    Face { background, skin, ellipse, shading }
}

fn render_face(face: &Face, size: usize, grain: f64, rng: &mut Rng) -> Canvas {
    let noise = Normal::new(0.0, grain.max(1e-12)).expect("positive std");
    let mut canvas = Canvas::new(size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let m = face.ellipse.mask(u, v, 0.15);
            let shade: f64 = face.shading.iter().map(|(fx, fy, ph, a)| a * (2.0 * PI * (fx * u + fy * v) + ph).sin()).sum();
            let mut px = [0.0; 3];
            for c in 0..3 {
                let skin = face.skin[c] + shade;
                px[c] = m * skin + (1.0 - m) * face.background[c] + noise.sample(rng);
            }
            canvas.data[y * size + x] = px;
        }
    }
    canvas
}

/// Unit chroma direction at `angle` (orthogonal to the gray axis).
fn chroma(angle: f64) -> [f64; 3] {
    let e1 = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
    let e2 = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    let (c, s) = (angle.cos(), angle.sin());
    [c * e1[0] + s * e2[0], c * e1[1] + s * e2[1], c * e1[2] + s * e2[2]]
}

/// Tint of forgery domain `domain`. The first three domains sit 120 degrees
/// apart on the chroma circle; the fourth sits at the midpoint of the first
/// two with the matching (shorter) length; later domains are spread between.
pub fn domain_tint(domain: u32, look: &Appearance) -> [f64; 3] {
    let (angle, scale) = match domain {
        0 => return [0.0; 3],
        1 => (0.0, 1.0),
        2 => (2.0 * PI / 3.0, 1.0),
        3 => (4.0 * PI / 3.0, 1.0),
        4 => (look.held_angle.to_radians(), look.held_scale),
        d => (PI / 3.0 + f64::from(d - 4) * 2.0 * PI / 7.0, 0.75),
    };
    let dir = chroma(angle);
    [0, 1, 2].map(|c| dir[c] * look.tint * scale)
}

/// Artifact family of a forgery domain: 0 seams, 1 band noise, 2 warp, 3 blocks.
pub fn domain_family(domain: u32) -> u32 {
    (domain.max(1) - 1) % 4
}

#[derive(Debug, Clone)]
struct Swap {
    source: Face,
    region: Ellipse,
    family: u32,
    tint: [f64; 3],
    phase: f64,
    strength: f64,
}

fn draw_swap(target: &Face, domain: u32, look: &Appearance, rng: &mut Rng) -> Swap {
    let mut source = draw_face(look, false, rng);
    source.ellipse = target.ellipse.clone();
    source.background = target.background;
    let region = Ellipse {
        cx: target.ellipse.cx + rng.random_range(-0.02..0.02),
        cy: target.ellipse.cy + rng.random_range(-0.02..0.02),
        rx: target.ellipse.rx * rng.random_range(0.62..0.72),
        ry: target.ellipse.ry * rng.random_range(0.62..0.72),
    };
    Swap {
        source,
        region,
        family: domain_family(domain),
        tint: domain_tint(domain, look),
        phase: rng.random_range(0.0..2.0 * PI),
        strength: rng.random_range(0.8..1.2),
    }
}

fn render_fake(target: &Face, swap: &Swap, size: usize, look: &Appearance, rng: &mut Rng) -> Canvas {
    let base = render_face(target, size, look.grain, rng);
    let pasted = render_face(&swap.source, size, look.swap_grain, rng).box_blur();
    let strength = swap.strength * look.artifact;
    let s = size as f64;
    let band = band_noise(size, rng);
    let mut out = base.clone();
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let m = swap.region.mask(u, v, 0.12);
            if m == 0.0 {
                continue;
            }
            let mut src = match swap.family {
                2 => {
                    let dx = 0.9 * strength * (2.0 * PI * 2.0 * v + swap.phase).sin();
                    let dy = 0.9 * strength * (2.0 * PI * 2.0 * u + swap.phase).cos();
                    pasted.bilinear(x as f64 + dx * s / 16.0, y as f64 + dy * s / 16.0)
                }
                3 => {
                    let (bx, by) = (x / 4 * 4, y / 4 * 4);
                    let mut acc = [0.0; 3];
                    for yy in by..(by + 4).min(size) {
                        for xx in bx..(bx + 4).min(size) {
                            let p = pasted.at(xx, yy);
                            for c in 0..3 {
                                acc[c] += p[c] / 16.0;
                            }
                        }
                    }
                    acc
                }
                _ => pasted.at(x, y),
            };
            let texture = match swap.family {
                0 => 0.05 * strength * (2.0 * PI * y as f64 / 4.0 + swap.phase).sin(),
                1 => 0.06 * strength * band[y * size + x],
                _ => 0.0,
            };
            let b = base.at(x, y);
            for c in 0..3 {
                src[c] += texture + swap.tint[c];
                out.data[y * size + x][c] = m * src[c] + (1.0 - m) * b[c];
            }
        }
    }
    out
}

/// Zero-mean, unit-std noise with energy between two box-blur scales.
fn band_noise(size: usize, rng: &mut Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| Normal::new(0.0, 1.0).unwrap().sample(rng)).collect();
    let blur = |src: &[f64], r: isize| -> Vec<f64> {
        let s = size as isize;
        let mut out = vec![0.0; src.len()];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += src[((y + dy).clamp(0, s - 1) * s + (x + dx).clamp(0, s - 1)) as usize];
                        n += 1.0;
                    }
                }
                out[(y * s + x) as usize] = acc / n;
            }
        }
        out
    };
    let fine = blur(&white, 1);
    let coarse = blur(&white, 3);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let std = (band.iter().map(|v| v * v).sum::<f64>() / band.len() as f64).sqrt().max(1e-12);
    band.iter().map(|v| v / std).collect()
}

fn split_for(position: usize, groups: usize, spec: &SynthSpec) -> Split {
    let n_test = (spec.test_fraction * groups as f64).round() as usize;
    let n_val = (spec.val_fraction * groups as f64).round() as usize;
    if position < n_test {
        Split::Test
    } else if position < n_test + n_val {
        Split::Val
    } else {
        Split::Train
    }
}

struct GroupJob {
    domain: u32,
    group: usize,
    frames: usize,
    split: Split,
}

fn render_group(job: &GroupJob, spec: &SynthSpec, seed: u64) -> Vec<RgbImage> {
    let key = (u64::from(job.domain) << 32) | job.group as u64;
    let mut rng = rng::indexed_stream(seed, rng::STREAM_SYNTH, key);
    let look = &spec.appearance;
    let face = draw_face(look, job.domain == 0, &mut rng);
    let swap = (job.domain != 0).then(|| draw_swap(&face, job.domain, look, &mut rng));
    (0..job.frames)
        .map(|frame| {
            let mut frame_rng = rng::indexed_stream(seed, rng::STREAM_SYNTH, key ^ ((frame as u64 + 1) << 48));
            let canvas = match &swap {
                Some(s) => render_fake(&face, s, spec.image_size, look, &mut frame_rng),
                None => render_face(&face, spec.image_size, look.grain, &mut frame_rng),
            };
            canvas.to_image()
        })
        .collect()
}

fn plan(spec: &SynthSpec) -> Vec<GroupJob> {
    let mut jobs = Vec::new();
    let classes = std::iter::once((0u32, spec.n_real)).chain((1..=spec.n_domains as u32).map(|d| (d, spec.n_per_domain)));
    for (domain, count) in classes {
        let groups = count.div_ceil(spec.frames_per_video);
        for group in 0..groups {
            let frames = spec.frames_per_video.min(count - group * spec.frames_per_video);
            jobs.push(GroupJob { domain, group, frames, split: split_for(group, groups, spec) });
        }
    }
    jobs
}

fn entries_for(job: &GroupJob) -> Vec<ManifestEntry> {
    (0..job.frames)
        .map(|frame| ManifestEntry {
            path: format!("images/d{}/v{:05}_f{:02}.png", job.domain, job.group, frame),
            label: if job.domain == 0 { Label::Real } else { Label::Fake },
            domain: job.domain,
            group: Some(format!("d{}_v{:05}", job.domain, job.group)),
            split: job.split,
        })
        .collect()
}

/// Renders the dataset in memory, in manifest order.
pub fn render_dataset(spec: &SynthSpec, seed: u64) -> Result<(Vec<ManifestEntry>, Vec<RgbImage>)> {
    spec.validate()?;
    let jobs = plan(spec);
    let images: Vec<Vec<RgbImage>> = jobs.par_iter().map(|job| render_group(job, spec, seed)).collect();
    let entries = jobs.iter().flat_map(entries_for).collect();
    Ok((entries, images.into_iter().flatten().collect()))
}

/// Writes PNG images under `out_dir/images/` and `out_dir/manifest.csv`.
pub fn generate_synthetic_dataset(out_dir: &Path, spec: &SynthSpec, seed: u64) -> Result<Manifest> {
    let (entries, images) = render_dataset(spec, seed)?;
    let domains = std::iter::once(0).chain(1..=spec.n_domains as u32);
    for d in domains {
        let dir = out_dir.join(format!("images/d{d}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    entries.par_iter().zip(&images).try_for_each(|(entry, img)| {
        let path = out_dir.join(&entry.path);
        img.save(&path).map_err(|source| Error::Image { path, source })
    })?;
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.csv")
}
