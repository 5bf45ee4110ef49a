//! Seeded street-scene-like images with exact vegetation masks.
//!
//! A scene is a sky band, a few facade blocks and a road band, with
//! per-pixel noise. Vegetation patches are saturated greens; distractors
//! are dull gray-greens that a color rule flags but that are not labeled
//! vegetation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub min_patches: u32,
    pub max_patches: u32,
    /// Probability that an image gets gray-green distractors.
    pub distractor_prob: f64,
    /// Uniform per-channel noise amplitude.
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_patches: 1,
            max_patches: 3,
            distractor_prob: 0.0,
            noise: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::validation("synthetic images must be at least 16x16"));
        }
        if self.min_patches > self.max_patches {
            return Err(Error::validation("min_patches exceeds max_patches"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::validation("distractor_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// Axis-aligned footprint of a painted patch, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Patch {
    pub shape: Shape,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Patch {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x < self.x0 || x >= self.x1 || y < self.y0 || y >= self.y1 {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let rx = f64::from(self.x1 - self.x0) / 2.0;
                let ry = f64::from(self.y1 - self.y0) / 2.0;
                let dx = (f64::from(x) + 0.5 - f64::from(self.x0) - rx) / rx;
                let dy = (f64::from(y) + 0.5 - f64::from(self.y0) - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub gvi: f64,
    pub patches: Vec<Patch>,
    pub distractors: Vec<Patch>,
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amp: u8) -> [u8; 3] {
    if amp == 0 {
        return base;
    }
    let a = i16::from(amp);
    base.map(|c| (i16::from(c) + rng.random_range(-a..=a)).clamp(0, 255) as u8)
}

fn random_patch(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Patch {
    let pw = rng.random_range(w / 8..=w / 2);
    let ph = rng.random_range(h / 8..=h / 2);
    let x0 = rng.random_range(0..=w - pw);
    let y0 = rng.random_range(0..=h - ph);
    let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
    Patch { shape, x0, y0, x1: x0 + pw, y1: y0 + ph }
}

fn vegetation_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let r = rng.random_range(20..=70u8);
    let b = rng.random_range(20..=70u8);
    let g = rng.random_range(r.max(b) + 70..=200);
    [r, g, b]
}

fn distractor_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let r = rng.random_range(95..=115u8);
    let b = rng.random_range(95..=115u8);
    let g = r.max(b) + rng.random_range(20..=30u8);
    [r, g, b]
}

/// Image `index` of the stream identified by `seed`. Each index has its
/// own generator stream, so any subset can be regenerated independently.
pub fn generate(cfg: &SynthConfig, seed: u64, index: u64) -> Result<SynthImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (w, h) = (cfg.width, cfg.height);

    let sky_end = rng.random_range(h / 5..=h * 2 / 5);
    let road_start = rng.random_range(h * 3 / 4..=h * 9 / 10);
    let sky = [rng.random_range(150..=200u8), rng.random_range(170..=210u8), rng.random_range(215..=245u8)];
    let road_level = rng.random_range(90..=130u8);
    let road = [road_level, road_level, road_level.saturating_add(4)];

    let mut facades = Vec::new();
    let mut x = 0;
    while x < w {
        let fw = rng.random_range(w / 6..=w / 2).min(w - x);
        let top = rng.random_range(0..=sky_end);
        let r = rng.random_range(120..=210u8);
        let g = r - rng.random_range(5..=40u8).min(r);
        let b = g - rng.random_range(0..=40u8).min(g);
        facades.push((x, x + fw, top, [r, g, b]));
        x += fw;
    }

    let mut img = RgbImage::from_fn(w, h, |_, _| [0, 0, 0])?;
    for y in 0..h {
        for x in 0..w {
            let base = if y >= road_start {
                road
            } else {
                let f = facades.iter().find(|f| x >= f.0 && x < f.1).expect("facades tile the width");
                if y >= f.2 {
                    f.3
                } else {
                    sky
                }
            };
            let px = jitter(&mut rng, base, cfg.noise);
            img.set(x, y, px);
        }
    }

    let mut mask = BinaryMask::new(w, h)?;
    let n_patches = rng.random_range(cfg.min_patches..=cfg.max_patches);
    let mut patches = Vec::new();
    for _ in 0..n_patches {
        let patch = random_patch(&mut rng, w, h);
        let color = vegetation_color(&mut rng);
        paint(&mut img, &patch, color, cfg.noise, &mut rng, |x, y| mask.set(x, y, true));
        patches.push(patch);
    }

    let mut distractors = Vec::new();
    if rng.random_bool(cfg.distractor_prob) {
        for _ in 0..rng.random_range(1..=2) {
            let patch = random_patch(&mut rng, w, h);
            let color = distractor_color(&mut rng);
            paint(&mut img, &patch, color, cfg.noise, &mut rng, |x, y| mask.set(x, y, false));
            distractors.push(patch);
        }
    }

    let gvi = mask.count() as f64 / mask.len() as f64;
    Ok(SynthImage { image: img, mask, gvi, patches, distractors })
}

fn paint(
    img: &mut RgbImage,
    patch: &Patch,
    color: [u8; 3],
    noise: u8,
    rng: &mut ChaCha8Rng,
    mut mark: impl FnMut(u32, u32),
) {
    for y in patch.y0..patch.y1 {
        for x in patch.x0..patch.x1 {
            if patch.contains(x, y) {
                img.set(x, y, jitter(rng, color, noise));
                mark(x, y);
            }
        }
    }
}

/// Images `0..n` of one seed's stream.
pub fn generate_set(cfg: &SynthConfig, seed: u64, n: usize) -> Result<Vec<SynthImage>> {
    (0..n as u64).map(|i| generate(cfg, seed, i)).collect()
}
