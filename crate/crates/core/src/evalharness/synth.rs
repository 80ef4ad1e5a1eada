//! Synthetic wildfire-smoke corpus.
//!
//! Each image is a textured sky-over-terrain landscape. Positive images carry
//! a rising smoke plume built from compact `(1 - d^2)^2` puffs, so the
//! ground-truth box (the union of puff supports) contains all plume mass.
//! Cloud banks and fog bands appear on both classes as confusors.
//!
//! Texture noise is integer arithmetic on hashed lattices, and all float work
//! uses only IEEE-exact operations, so a seed yields the same bytes on every
//! platform.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::imaging::{LabeledImage, ManifestRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    /// Share of smoke images in each split, rounded to whole images.
    pub positive_fraction: f64,
    /// Probability that an image contains a cloud bank.
    pub cloud_prob: f64,
    /// Probability that an image contains a fog band.
    pub fog_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            positive_fraction: 0.5,
            cloud_prob: 0.5,
            fog_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    /// Path relative to the corpus root, e.g. `train/00007.png`.
    pub file: String,
    pub labeled: LabeledImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthImage>,
    pub val: Vec<SynthImage>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of image `index` in split `split`; images are independent of each other.
pub fn image_seed(seed: u64, split: u64, index: u64) -> u64 {
    mix(seed ^ mix((split << 40) ^ index))
}

/// 16-bit lattice value.
fn lattice(seed: u64, x: i64, y: i64) -> i64 {
    (mix(seed ^ mix(((x as u64) << 32) ^ (y as u64 & 0xFFFF_FFFF))) >> 48) as i64
}

const ONE: i64 = 1 << 16;

fn smooth(t: i64) -> i64 {
    // 3t^2 - 2t^3 in 16.16 fixed point
    (t * t / ONE) * (3 * ONE - 2 * t) / ONE
}

/// Smoothly interpolated value noise in `[0, 65535]`.
fn value_noise(seed: u64, x: i64, y: i64, cell: i64) -> i64 {
    let (gx, gy) = (x.div_euclid(cell), y.div_euclid(cell));
    let tx = smooth(x.rem_euclid(cell) * ONE / cell);
    let ty = smooth(y.rem_euclid(cell) * ONE / cell);
    let lerp = |a: i64, b: i64, t: i64| a + (b - a) * t / ONE;
    let top = lerp(lattice(seed, gx, gy), lattice(seed, gx + 1, gy), tx);
    let bottom = lerp(lattice(seed, gx, gy + 1), lattice(seed, gx + 1, gy + 1), tx);
    lerp(top, bottom, ty)
}

/// Three-octave fractal noise in `[0, 65535]`.
fn fbm(seed: u64, x: i64, y: i64, cell: i64) -> i64 {
    let mut sum = 0;
    let mut weight = 0;
    let mut amp = 4;
    let mut c = cell;
    for octave in 0..3 {
        sum += amp * value_noise(seed.wrapping_add(octave), x, y, c.max(1));
        weight += amp;
        amp /= 2;
        c /= 2;
    }
    sum / weight
}

/// Ellipse with a compact `(1 - d^2)^2` density profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Puff {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub weight: f64,
}

impl Puff {
    fn density(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let d2 = dx * dx + dy * dy;
        if d2 >= 1.0 {
            0.0
        } else {
            let u = 1.0 - d2;
            self.weight * u * u
        }
    }
}

/// A semi-transparent blob made of puffs.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub puffs: Vec<Puff>,
    pub max_alpha: f64,
    pub color: [f64; 3],
}

impl Blob {
    /// Opacity at a point, zero outside every puff.
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let d: f64 = self.puffs.iter().map(|p| p.density(x, y)).sum();
        self.max_alpha * d.min(1.0)
    }

    /// Union of puff supports clipped to the image.
    pub fn support(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x0 = self.puffs.iter().map(|p| p.cx - p.rx).fold(f64::INFINITY, f64::min).max(0.0);
        let y0 = self.puffs.iter().map(|p| p.cy - p.ry).fold(f64::INFINITY, f64::min).max(0.0);
        let x1 = self.puffs.iter().map(|p| p.cx + p.rx).fold(f64::NEG_INFINITY, f64::max).min(width);
        let y1 = self.puffs.iter().map(|p| p.cy + p.ry).fold(f64::NEG_INFINITY, f64::max).min(height);
        BoundingBox::new(x0, y0, x1, y1).ok()
    }

    fn paint(&self, img: &mut RgbImage) {
        let (w, h) = (img.width() as f64, img.height() as f64);
        let Some(b) = self.support(w, h) else { return };
        let (xs, ys) = (b.x0() as u32, b.y0() as u32);
        let xe = (b.x1().ceil() as u32).min(img.width());
        let ye = (b.y1().ceil() as u32).min(img.height());
        for y in ys..ye {
            for x in xs..xe {
                let a = self.alpha_at(x as f64 + 0.5, y as f64 + 0.5);
                if a > 0.0 {
                    let px = img.get_pixel_mut(x, y);
                    for c in 0..3 {
                        let v = px.0[c] as f64 * (1.0 - a) + self.color[c] * a;
                        px.0[c] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
}

/// Scene description of one image before rasterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    noise_seed: u64,
    horizon: f64,
    ridge_amp: f64,
    sky_top: [f64; 3],
    sky_low: [f64; 3],
    ground: [f64; 3],
    fog: Option<(f64, f64, f64)>,
    pub clouds: Vec<Blob>,
    pub plume: Option<Blob>,
}

impl Scene {
    fn ridge(&self, x: i64) -> f64 {
        let n = value_noise(self.noise_seed ^ 0x5EED, x, 0, 48) as f64 / 65535.0;
        self.horizon + (n - 0.5) * 2.0 * self.ridge_amp
    }

    pub fn generate(rng: &mut ChaCha8Rng, params: &SynthParams, smoke: bool) -> Scene {
        let (w, h) = (params.width as f64, params.height as f64);
        let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], j: f64| c.map(|v| v + rng.random_range(-j..j));
        let mut scene = Scene {
            width: params.width,
            height: params.height,
            noise_seed: rng.random(),
            horizon: rng.random_range(0.35..0.55) * h,
            ridge_amp: rng.random_range(0.02..0.07) * h,
            sky_top: jitter(rng, [95.0, 140.0, 205.0], 20.0),
            sky_low: jitter(rng, [185.0, 200.0, 220.0], 15.0),
            ground: jitter(rng, [80.0, 95.0, 55.0], 20.0),
            fog: None,
            clouds: Vec::new(),
            plume: None,
        };
        if rng.random_bool(params.fog_prob) {
            let center = scene.horizon + rng.random_range(-0.1..0.05) * h;
            scene.fog = Some((center, rng.random_range(0.06..0.15) * h, rng.random_range(0.25..0.5)));
        }
        if rng.random_bool(params.cloud_prob) {
            for _ in 0..rng.random_range(1..3) {
                let cy = rng.random_range(0.05..0.8) * (scene.horizon - 0.05 * h);
                let cx = rng.random_range(0.1..0.9) * w;
                let n = rng.random_range(4..8);
                let span = rng.random_range(0.15..0.35) * w;
                let puffs = (0..n)
                    .map(|k| {
                        let rx = rng.random_range(0.05..0.11) * w;
                        Puff {
                            cx: cx - span / 2.0 + span * k as f64 / (n - 1) as f64,
                            cy: cy + rng.random_range(-0.02..0.02) * h,
                            rx,
                            ry: rx * rng.random_range(0.35..0.6),
                            weight: rng.random_range(0.8..1.4),
                        }
                    })
                    .collect();
                let white = rng.random_range(235.0..252.0);
                scene.clouds.push(Blob {
                    puffs,
                    max_alpha: rng.random_range(0.6..0.9),
                    color: [white, white, white + 3.0],
                });
            }
        }
        if smoke {
            scene.plume = Some(scene.plume_blob(rng));
        }
        scene
    }

    fn plume_blob(&self, rng: &mut ChaCha8Rng) -> Blob {
        let (w, h) = (self.width as f64, self.height as f64);
        let bx = rng.random_range(0.15..0.85) * w;
        let by = self.ridge(bx as i64) + rng.random_range(0.02..0.12) * h;
        let rise = rng.random_range(0.18..0.4) * h;
        let drift = rng.random_range(-0.5..0.5);
        let r0 = rng.random_range(0.03..0.05) * w;
        let aspect = rng.random_range(0.75..1.0);
        let n = 8;
        let puffs = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                let rx = r0 * (1.0 + 1.5 * t);
                Puff {
                    cx: bx + drift * t * rise + rng.random_range(-0.3..0.3) * r0,
                    cy: (by - t * rise).max(rx * aspect + 0.02 * h),
                    rx,
                    ry: rx * aspect,
                    weight: 1.0 - 0.3 * t,
                }
            })
            .collect();
        let grey = rng.random_range(165.0..215.0);
        Blob {
            puffs,
            max_alpha: rng.random_range(0.55..0.85),
            color: [grey + 6.0, grey, grey - 6.0],
        }
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height);
        let h = self.height as f64;
        for x in 0..self.width {
            let ridge = self.ridge(x as i64);
            for y in 0..self.height {
                let yf = y as f64 + 0.5;
                let color = if yf < ridge {
                    let t = (yf / ridge).min(1.0);
                    let n = (fbm(self.noise_seed ^ 0xC0FFEE, x as i64, y as i64, 64) - 32768) as f64 / 65536.0;
                    [0, 1, 2].map(|c| self.sky_top[c] + (self.sky_low[c] - self.sky_top[c]) * t + 12.0 * n)
                } else {
                    let n = (fbm(self.noise_seed, x as i64, y as i64, 24) - 32768) as f64 / 32768.0;
                    let depth = ((yf - ridge) / (h - ridge + 1.0)).min(1.0);
                    [0, 1, 2].map(|c| self.ground[c] * (0.8 + 0.35 * depth) + 38.0 * n)
                };
                img.put_pixel(x, y, Rgb(color.map(|v| v.round().clamp(0.0, 255.0) as u8)));
            }
        }
        if let Some((center, half, strength)) = self.fog {
            for y in 0..self.height {
                let d = ((y as f64 + 0.5 - center) / half).abs();
                if d < 1.0 {
                    let a = strength * (1.0 - d);
                    for x in 0..self.width {
                        let px = img.get_pixel_mut(x, y);
                        for c in 0..3 {
                            px.0[c] = (px.0[c] as f64 * (1.0 - a) + 205.0 * a).round() as u8;
                        }
                    }
                }
            }
        }
        for cloud in &self.clouds {
            cloud.paint(&mut img);
        }
        if let Some(p) = &self.plume {
            p.paint(&mut img);
        }
        img
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.plume
            .iter()
            .filter_map(|p| p.support(self.width as f64, self.height as f64))
            .collect()
    }
}

fn validate(params: &SynthParams, n_train: usize, n_val: usize) -> Result<(), SynthError> {
    let bad = |m: &str| Err(SynthError::Params(m.to_string()));
    if n_train == 0 || n_val == 0 {
        return bad("split sizes must be at least 1");
    }
    if params.width < 32 || params.height < 32 {
        return bad("images must be at least 32x32");
    }
    let unit = |p: f64| (0.0..=1.0).contains(&p);
    if !unit(params.positive_fraction) || !unit(params.cloud_prob) || !unit(params.fog_prob) {
        return bad("fractions and probabilities must lie in [0, 1]");
    }
    Ok(())
}

fn split(seed: u64, tag: u64, name: &str, n: usize, params: &SynthParams) -> Vec<SynthImage> {
    let n_pos = (n as f64 * params.positive_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(image_seed(seed, tag, u64::MAX)));
    labels
        .into_iter()
        .enumerate()
        .map(|(i, smoke)| {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, tag, i as u64));
            let scene = Scene::generate(&mut rng, params, smoke);
            SynthImage {
                file: format!("{name}/{i:05}.png"),
                labeled: LabeledImage {
                    image: scene.render(),
                    boxes: scene.boxes(),
                },
            }
        })
        .collect()
}

/// Deterministic train and validation splits for `seed`.
pub fn synth_corpus(seed: u64, n_train: usize, n_val: usize, params: &SynthParams) -> Result<SynthCorpus, SynthError> {
    validate(params, n_train, n_val)?;
    Ok(SynthCorpus {
        train: split(seed, 0, "train", n_train, params),
        val: split(seed, 1, "val", n_val, params),
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes `train/`, `val/` and the `train.jsonl` and `val.jsonl` manifests.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<(), SynthError> {
    for (name, images) in [("train", &corpus.train), ("val", &corpus.val)] {
        fs::create_dir_all(dir.join(name))?;
        let mut manifest = io::BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
        for img in images.iter() {
            fs::write(dir.join(&img.file), encode_png(&img.labeled.image)?)?;
            let record = ManifestRecord {
                file: img.file.clone(),
                label: img.labeled.is_smoke() as u8,
                boxes: img.labeled.boxes.clone(),
            };
            serde_json::to_writer(&mut manifest, &record).map_err(io::Error::from)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
    }
    Ok(())
}

/// Loads every image listed in a JSONL manifest; file paths are relative to
/// the manifest's directory.
pub fn read_manifest(manifest: &Path) -> Result<Vec<(ManifestRecord, LabeledImage)>, SynthError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let reader = io::BufReader::new(fs::File::open(manifest)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|source| SynthError::Manifest { line: i + 1, source })?;
        let image = image::open(root.join(&record.file))?.to_rgb8();
        let boxes = record.boxes.clone();
        out.push((record, LabeledImage { image, boxes }));
    }
    Ok(out)
}
