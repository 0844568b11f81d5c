//! Synthetic training images and an in-memory corpus with random crops.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

fn random_colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// One procedurally drawn image: a colour gradient with overlapping flat and
/// soft shapes, striped or checkered texture patches and sensor-like noise.
/// Edges are anti-aliased and textures are low-contrast sinusoids.
pub fn synth_image(rng: &mut impl Rng, height: u32, width: u32) -> RgbImage {
    let (h, w) = (height as usize, width as usize);
    let mut px = vec![[0.0f64; 3]; h * w];
    let (c0, c1) = (random_colour(rng), random_colour(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let norm = (h.max(w)) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (0.5 + 0.5 * ((x as f64 * dx + y as f64 * dy) / norm)).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * w + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.gen_range(2..7);
    for _ in 0..shapes {
        let colour = random_colour(rng);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(0.05..0.4) * w as f64;
        let ry = rng.gen_range(0.05..0.4) * h as f64;
        let kind = rng.gen_range(0..4);
        let period = rng.gen_range(6.0..24.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (tc, ts) = (theta.cos(), theta.sin());
        let contrast = rng.gen_range(0.1..0.5);
        let other = random_colour(rng);
        let alt: [f64; 3] = std::array::from_fn(|c| colour[c] + contrast * (other[c] - colour[c]));
        let soft = rng.gen_bool(0.3);
        // Width of the edge ramp in shape-radius units, about 1.5 px.
        let ramp = 1.5 / rx.min(ry);
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = match kind {
                    0 => ux.abs().max(uy.abs()),
                    _ => (ux * ux + uy * uy).sqrt(),
                };
                let alpha = if soft { (1.0 - inside).clamp(0.0, 1.0) } else { ((1.0 - inside) / ramp + 0.5).clamp(0.0, 1.0) };
                if alpha == 0.0 {
                    continue;
                }
                let fill = match kind {
                    2 | 3 => {
                        let phase = |u: f64| 0.5 + 0.5 * (u / period * std::f64::consts::TAU).sin();
                        let t = if kind == 2 {
                            phase(x as f64 * tc + y as f64 * ts)
                        } else {
                            phase(x as f64) * phase(y as f64)
                        };
                        std::array::from_fn(|c| colour[c] * (1.0 - t) + alt[c] * t)
                    }
                    _ => colour,
                };
                let cell = &mut px[y * w + x];
                for c in 0..3 {
                    cell[c] = cell[c] * (1.0 - alpha) + fill[c] * alpha;
                }
            }
        }
    }
    let noise = rng.gen_range(0.0..0.03);
    RgbImage::from_fn(width, height, |x, y| {
        let cell = px[y as usize * w + x as usize];
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = cell[c] + noise * rng.gen_range(-1.0..1.0);
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(out)
    })
}

/// Writes `count` synthetic PNGs named `img_00000.png`... into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("img_{i:05}.png"));
        synth_image(&mut rng, size, size).save_with_format(&path, image::ImageFormat::Png)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Sorted PNG paths in `dir`.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Training images held as 8-bit RGB.
pub struct Corpus {
    images: Vec<RgbImage>,
}

impl Corpus {
    pub fn from_images(images: Vec<RgbImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("empty corpus".into()));
        }
        Ok(Self { images })
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let images = list_pngs(dir)?
            .iter()
            .map(|p| Ok(image::open(p)?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `batch` random `crop x crop` windows with random horizontal flips,
    /// as `[batch, 3, crop, crop]`.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize, crop: usize) -> Result<Tensor> {
        let plane = crop * crop;
        let mut data = vec![0.0; batch * 3 * plane];
        for b in 0..batch {
            let img = &self.images[rng.gen_range(0..self.images.len())];
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w < crop || h < crop {
                return Err(Error::Dimension(format!("corpus image {w}x{h} smaller than crop {crop}")));
            }
            let top = rng.gen_range(0..=h - crop);
            let left = rng.gen_range(0..=w - crop);
            let flip = rng.gen_bool(0.5);
            for y in 0..crop {
                for x in 0..crop {
                    let sx = if flip { left + crop - 1 - x } else { left + x };
                    let p = img.get_pixel(sx as u32, (top + y) as u32).0;
                    for c in 0..3 {
                        data[(b * 3 + c) * plane + y * crop + x] = p[c] as f64 / 255.0;
                    }
                }
            }
        }
        Tensor::new(vec![batch, 3, crop, crop], data)
    }
}

/// Loads every PNG in `dir` as an [`ImageTensor`].
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, ImageTensor)>> {
    list_pngs(dir)?.into_iter().map(|p| ImageTensor::load_png(&p).map(|i| (p, i))).collect()
}
