//! Metrics, rate sweeps and reality-score histograms, with CSV and PNG
//! export.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::disc::Discriminator;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{distortion, PerceptualMetric};
use crate::model::{Model, QualityControl, RealismWeight, PAD_MULTIPLE};
use crate::tensor::pairwise_sum;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
}

/// PSNR in dB on the 0-255 scale.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(distortion(a, b)?))
}

/// Bits per pixel of a stream of `bytes` for an `height x width` image.
pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Dial positions `0, step, ..., levels - 1`; both endpoints always included.
pub fn q_grid(levels: usize, step: f64) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(Error::Domain("no quality levels".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("sweep step {step} must be positive")));
    }
    let top = (levels - 1) as f64;
    let mut out = Vec::new();
    let mut i = 0u64;
    loop {
        let q = i as f64 * step;
        if q >= top - 1e-9 {
            break;
        }
        out.push(q);
        i += 1;
    }
    out.push(top);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q_frac: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub perceptual: f64,
}

/// Compresses and decompresses every image at `qc`, returning mean bpp,
/// PSNR and perceptual distance.
pub fn evaluate_point(
    model: &Model,
    images: &[ImageTensor],
    qc: QualityControl,
    beta: RealismWeight,
    metric: &impl PerceptualMetric,
) -> Result<SweepRow> {
    if images.is_empty() {
        return Err(Error::Config("no evaluation images".into()));
    }
    let codec = Codec::new(model);
    let (mut rates, mut psnrs, mut dists) = (Vec::new(), Vec::new(), Vec::new());
    for img in images {
        let stream = codec.compress(img, qc)?;
        let out = codec.decompress(&stream, beta)?;
        rates.push(bpp(stream.len(), img.height(), img.width()));
        psnrs.push(psnr(img, &out)?);
        dists.push(metric.distance(&out, img)?);
    }
    Ok(SweepRow { q_frac: qc.value(), bpp: mean(&rates), psnr: mean(&psnrs), perceptual: mean(&dists) })
}

/// One row per grid point from [`q_grid`].
pub fn sweep(
    model: &Model,
    images: &[ImageTensor],
    beta: RealismWeight,
    step: f64,
    metric: &impl PerceptualMetric,
) -> Result<Vec<SweepRow>> {
    q_grid(model.levels(), step)?
        .into_iter()
        .map(|q| evaluate_point(model, images, model.quality(q)?, beta, metric))
        .collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!("spearman needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov = pairwise_sum(&rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).collect::<Vec<_>>());
    let vx = pairwise_sum(&rx.iter().map(|a| (a - mx).powi(2)).collect::<Vec<_>>());
    let vy = pairwise_sum(&ry.iter().map(|b| (b - my).powi(2)).collect::<Vec<_>>());
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Domain("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Produces a reconstruction of `x` at integer level `q`.
pub trait Reconstructor {
    fn levels(&self) -> usize;
    fn reconstruct(&self, x: &ImageTensor, q: usize) -> Result<ImageTensor>;
}

/// Model inference at a fixed realism weight.
pub struct ModelReconstructor<'a> {
    pub model: &'a Model,
    pub beta: RealismWeight,
}

impl Reconstructor for ModelReconstructor<'_> {
    fn levels(&self) -> usize {
        self.model.levels()
    }

    fn reconstruct(&self, x: &ImageTensor, q: usize) -> Result<ImageTensor> {
        let qc = QualityControl::new(q, 0.0, self.model.levels())?;
        let padded = x.pad_to_multiple(PAD_MULTIPLE);
        self.model.reconstruct(&padded, qc, self.beta)?.crop(x.height(), x.width())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealityKind {
    /// Score relative to the original image.
    Rgan,
    /// Score relative to the reconstruction one level up.
    Hrrgan,
}

impl std::str::FromStr for RealityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgan" => Ok(Self::Rgan),
            "hrrgan" => Ok(Self::Hrrgan),
            _ => Err(Error::Config(format!("unknown reality kind {s:?}"))),
        }
    }
}

/// A crop with the level it is reconstructed at.
#[derive(Clone, Debug)]
pub struct LevelCrop {
    pub image: ImageTensor,
    pub q: usize,
}

/// `count` random `size x size` crops, each with a uniformly drawn level.
pub fn sample_crops(images: &[ImageTensor], count: usize, size: usize, levels: usize, rng: &mut impl Rng) -> Result<Vec<LevelCrop>> {
    if images.is_empty() || levels == 0 {
        return Err(Error::Config("no images or levels to sample from".into()));
    }
    (0..count)
        .map(|_| {
            let img = &images[rng.gen_range(0..images.len())];
            if img.height() < size || img.width() < size {
                return Err(Error::Dimension(format!("image {}x{} smaller than crop {size}", img.height(), img.width())));
            }
            let top = rng.gen_range(0..=img.height() - size);
            let left = rng.gen_range(0..=img.width() - size);
            Ok(LevelCrop { image: img.crop_at(top, left, size, size)?, q: rng.gen_range(0..levels) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RealitySample {
    pub q: usize,
    pub mse: f64,
    pub score: f64,
}

/// Joint histogram of reconstruction MSE and relative reality score.
#[derive(Clone, Debug, PartialEq)]
pub struct RealityHistogram {
    pub kind: RealityKind,
    pub mse_edges: Vec<f64>,
    pub score_edges: Vec<f64>,
    /// Row-major `[mse bin][score bin]`.
    pub counts: Vec<Vec<usize>>,
    pub samples: Vec<RealitySample>,
    /// Crops dropped because they have no level above them.
    pub excluded: usize,
}

impl RealityHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

fn edges(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Vec<f64> {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() { (0.0, 1.0) } else if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

fn bin_of(v: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Mean patch logit of `x` under the level-`q` discriminator.
fn mean_score(disc: &Discriminator, x: &ImageTensor, q: usize) -> Result<f64> {
    Ok(disc.discriminate(&x.pad_to_multiple(PAD_MULTIPLE), q)?.mean())
}

/// MSE against relative reality score for every crop. Patch maps are
/// reduced to their spatial mean.
pub fn reality_histogram(
    recon: &impl Reconstructor,
    disc: &Discriminator,
    crops: &[LevelCrop],
    kind: RealityKind,
    bins: usize,
) -> Result<RealityHistogram> {
    if bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    let levels = recon.levels();
    let mut samples = Vec::new();
    let mut excluded = 0;
    for crop in crops {
        let q = crop.q;
        if q >= levels {
            return Err(Error::Domain(format!("quality level {q} outside 0..{levels}")));
        }
        if kind == RealityKind::Hrrgan && q + 1 == levels {
            excluded += 1;
            continue;
        }
        let x_hat = recon.reconstruct(&crop.image, q)?;
        let fake = mean_score(disc, &x_hat, q)?;
        let reference = match kind {
            RealityKind::Rgan => mean_score(disc, &crop.image, q)?,
            RealityKind::Hrrgan => mean_score(disc, &recon.reconstruct(&crop.image, q + 1)?, q)?,
        };
        samples.push(RealitySample { q, mse: distortion(&crop.image, &x_hat)?, score: fake - reference });
    }
    let mse_edges = edges(samples.iter().map(|s| s.mse), bins);
    let score_edges = edges(samples.iter().map(|s| s.score), bins);
    let mut counts = vec![vec![0usize; bins]; bins];
    for s in &samples {
        counts[bin_of(s.mse, &mse_edges)][bin_of(s.score, &score_edges)] += 1;
    }
    Ok(RealityHistogram { kind, mse_edges, score_edges, counts, samples, excluded })
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One row per bin: `mse_lo, mse_hi, score_lo, score_hi, count`.
pub fn write_histogram_csv(h: &RealityHistogram, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mse_lo", "mse_hi", "score_lo", "score_hi", "count"])?;
    for (i, row) in h.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            w.write_record([
                h.mse_edges[i].to_string(),
                h.mse_edges[i + 1].to_string(),
                h.score_edges[j].to_string(),
                h.score_edges[j + 1].to_string(),
                c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 30;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

fn axes(img: &mut RgbImage) {
    let black = Rgb([0, 0, 0]);
    let (l, b) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    draw_line(img, (l, b), ((PLOT_W - MARGIN) as i64, b), black);
    draw_line(img, (l, b), (l, MARGIN as i64), black);
}

/// Rate-distortion curve: bpp on x, PSNR on y.
pub fn plot_sweep_png(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    axes(&mut img);
    let xe = edges(rows.iter().map(|r| r.bpp), 1);
    let ye = edges(rows.iter().map(|r| r.psnr), 1);
    let span = |v: f64, e: &[f64]| (v - e[0]) / (e[1] - e[0]);
    let inner_w = (PLOT_W - 2 * MARGIN) as f64;
    let inner_h = (PLOT_H - 2 * MARGIN) as f64;
    let points: Vec<(i64, i64)> = rows
        .iter()
        .map(|r| {
            let x = MARGIN as f64 + span(r.bpp, &xe) * inner_w;
            let y = (PLOT_H - MARGIN) as f64 - span(r.psnr, &ye) * inner_h;
            (x.round() as i64, y.round() as i64)
        })
        .collect();
    let blue = Rgb([30, 80, 200]);
    for w in points.windows(2) {
        draw_line(&mut img, w[0], w[1], blue);
    }
    for &(x, y) in &points {
        for dy in -2..=2 {
            draw_line(&mut img, (x - 2, y + dy), (x + 2, y + dy), Rgb([200, 40, 40]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Heat map with MSE on x and score on y; darker is more samples.
pub fn plot_histogram_png(h: &RealityHistogram, path: impl AsRef<Path>) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let bins = h.counts.len() as u32;
    let most = h.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let cw = (PLOT_W - 2 * MARGIN) / bins.max(1);
    let ch = (PLOT_H - 2 * MARGIN) / bins.max(1);
    for (i, row) in h.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let shade = 255 - (255.0 * c as f64 / most).round() as u8;
            for x in 0..cw {
                for y in 0..ch {
                    img.put_pixel(MARGIN + i as u32 * cw + x, PLOT_H - MARGIN - 1 - (j as u32 * ch + y), Rgb([shade, shade, 255]));
                }
            }
        }
    }
    axes(&mut img);
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
