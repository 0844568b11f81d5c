//! RGB images with values in [0, 1], PNG IO and reflection padding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar RGB image, channel-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size { height, width });
        }
        if data.len() != 3 * height * width {
            return Err(Error::Dimension(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Rounds to the nearest 8-bit level.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Loads a PNG; alpha and grey formats are converted to RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path.as_ref())?.with_guessed_format()?.decode()?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    /// From a `[1, 3, H, W]` tensor; values are clamped to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!("expected [1, 3, h, w], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite pixel values".into()));
        }
        Self::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Pads the bottom and right edges by mirror reflection (edge pixel not
    /// repeated) up to the next multiple of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> ImageTensor {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * ph * pw);
        for c in 0..3 {
            for y in 0..ph {
                let sy = reflect(y, self.height);
                for x in 0..pw {
                    data.push(self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        ImageTensor { height: ph, width: pw, data }
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<ImageTensor> {
        self.crop_at(0, 0, height, width)
    }

    pub fn crop_at(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        ImageTensor { height: self.height, width: self.width, data }
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Stacks equally sized images into `[B, 3, H, W]`.
pub fn batch_tensor(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
    if images.iter().any(|i| i.height != first.height || i.width != first.width) {
        return Err(Error::Dimension("batch images differ in size".into()));
    }
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), 3, first.height, first.width], data)
}
