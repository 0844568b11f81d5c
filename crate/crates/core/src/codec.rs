//! Compressed file format and the compress/decompress pair.
//!
//! Header (17 bytes, integers big-endian): magic `CRDR`, version, height,
//! width (`u16`), quality level, fraction numerator over 256, latent channel
//! count (`u16`), payload length (`u32`). The range-coded payload follows.

use crate::entropy::{default_bounds, escape_decode, escape_encode, CdfTable, QuantizedLatent};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{quantize, Model, QualityControl, RealismWeight, DOWNSAMPLE, PAD_MULTIPLE};

pub const MAGIC: [u8; 4] = *b"CRDR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;
/// File extension of compressed images.
pub const EXTENSION: &str = "crdr";
pub const MAX_SIDE: usize = u16::MAX as usize;
/// Largest padded image the codec will process by default (4096 x 4096).
pub const DEFAULT_MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: u16,
    pub width: u16,
    pub level: u8,
    /// Interpolation fraction numerator; the denominator is 256.
    pub fraction: u8,
    pub channels: u16,
    pub payload_len: u32,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..7].copy_from_slice(&self.height.to_be_bytes());
        b[7..9].copy_from_slice(&self.width.to_be_bytes());
        b[9] = self.level;
        b[10] = self.fraction;
        b[11..13].copy_from_slice(&self.channels.to_be_bytes());
        b[13..17].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("stream of {} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported format version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let h = Self {
            height: u16_at(5),
            width: u16_at(7),
            level: bytes[9],
            fraction: bytes[10],
            channels: u16_at(11),
            payload_len: u32::from_be_bytes([bytes[13], bytes[14], bytes[15], bytes[16]]),
        };
        if h.height == 0 || h.width == 0 {
            return Err(Error::Format("zero image dimension".into()));
        }
        if h.channels == 0 {
            return Err(Error::Format("zero latent channels".into()));
        }
        Ok(h)
    }

    /// Latent grid `(h, w)` of the padded image.
    pub fn latent_dims(&self) -> (usize, usize) {
        (latent_side(self.height as usize), latent_side(self.width as usize))
    }
}

fn latent_side(side: usize) -> usize {
    side.div_ceil(PAD_MULTIPLE) * (PAD_MULTIPLE / DOWNSAMPLE)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        let body = &bytes[HEADER_LEN..];
        let expected = header.payload_len as usize;
        if body.len() < expected {
            return Err(Error::Decode(format!("payload truncated: {} of {expected} bytes", body.len())));
        }
        if body.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes after the payload", body.len() - expected)));
        }
        Ok(Self { header, payload: body.to_vec() })
    }

    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Compress/decompress with a size guard on the padded image.
#[derive(Clone, Copy, Debug)]
pub struct Codec<'a> {
    model: &'a Model,
    max_pixels: usize,
}

impl<'a> Codec<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, max_pixels: DEFAULT_MAX_PIXELS }
    }

    pub fn with_max_pixels(mut self, max_pixels: usize) -> Self {
        self.max_pixels = max_pixels;
        self
    }

    fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let padded = height.div_ceil(PAD_MULTIPLE) * width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE * PAD_MULTIPLE;
        if height == 0 || width == 0 || height > MAX_SIDE || width > MAX_SIDE || padded > self.max_pixels {
            return Err(Error::Size { height, width });
        }
        Ok(())
    }

    fn table(&self) -> Result<CdfTable> {
        let params = self.model.entropy_params()?;
        CdfTable::build_escaped(&params, &default_bounds(&params))
    }

    pub fn compress(&self, x: &ImageTensor, qc: QualityControl) -> Result<Bitstream> {
        let (height, width) = (x.height(), x.width());
        self.check_size(height, width)?;
        // The decoder only sees the byte-quantized fraction, so encode with it too.
        let qc = qc.byte_quantized();
        let padded = x.pad_to_multiple(PAD_MULTIPLE);
        let latent = quantize(&self.model.encode(&padded, qc)?)?;
        let payload = escape_encode(&latent.symbols, &self.table()?, latent.plane())?;
        let header = Header {
            height: height as u16,
            width: width as u16,
            level: qc.level() as u8,
            fraction: qc.fraction_byte(),
            channels: latent.channels as u16,
            payload_len: u32::try_from(payload.len()).map_err(|_| Error::Size { height, width })?,
        };
        Ok(Bitstream { header, payload })
    }

    /// Recovers the quantized latent and quality setting without running
    /// the generator.
    pub fn decode_latent(&self, stream: &Bitstream) -> Result<(QuantizedLatent, QualityControl)> {
        let h = stream.header;
        let levels = self.model.levels();
        if h.level as usize >= levels {
            return Err(Error::Compatibility(format!("stream level {} but the model has {levels} levels", h.level)));
        }
        if h.level as usize + 1 == levels && h.fraction != 0 {
            return Err(Error::Format("fraction set at the top quality level".into()));
        }
        let qc = QualityControl::from_fraction_byte(h.level as usize, h.fraction, levels)?;
        let expected = self.model.config().latent_channels;
        if h.channels as usize != expected {
            return Err(Error::Compatibility(format!("stream has {} latent channels, model has {expected}", h.channels)));
        }
        if stream.payload.len() != h.payload_len as usize {
            return Err(Error::Decode("payload length disagrees with the header".into()));
        }
        self.check_size(h.height as usize, h.width as usize)?;
        let (lh, lw) = h.latent_dims();
        let channels = h.channels as usize;
        let count = channels * lh * lw;
        let table = self.table()?;
        // Every symbol costs at least its channel's cheapest code; a payload
        // too short for that cannot be valid.
        let floor_bits: f64 = (0..channels).map(|c| table.channel(c).min_bits()).sum::<f64>() * (lh * lw) as f64;
        if floor_bits > 8.0 * stream.payload.len() as f64 + 64.0 {
            return Err(Error::Decode("payload too short for the latent size".into()));
        }
        let symbols = escape_decode(&stream.payload, &table, count, lh * lw)?;
        Ok((QuantizedLatent::new(channels, lh, lw, symbols)?, qc))
    }

    pub fn decompress(&self, stream: &Bitstream, beta: RealismWeight) -> Result<ImageTensor> {
        let (latent, qc) = self.decode_latent(stream)?;
        let full = self.model.generate(&latent, qc, beta)?;
        full.crop(stream.header.height as usize, stream.header.width as usize)
    }
}

pub fn compress(x: &ImageTensor, qc: QualityControl, model: &Model) -> Result<Bitstream> {
    Codec::new(model).compress(x, qc)
}

pub fn decompress(stream: &Bitstream, beta: RealismWeight, model: &Model) -> Result<ImageTensor> {
    Codec::new(model).decompress(stream, beta)
}

/// Parses and decodes raw file bytes.
pub fn decompress_bytes(bytes: &[u8], beta: RealismWeight, model: &Model) -> Result<ImageTensor> {
    decompress(&Bitstream::from_bytes(bytes)?, beta, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = Header { height: 0x0102, width: 0x0304, level: 2, fraction: 128, channels: 32, payload_len: 0x0a0b0c0d };
        let b = h.to_bytes();
        assert_eq!(&b[..5], b"CRDR\x01");
        assert_eq!(&b[5..], &[1, 2, 3, 4, 2, 128, 0, 32, 10, 11, 12, 13]);
        assert_eq!(Header::parse(&b).unwrap(), h);
        assert_eq!(h.latent_dims(), (20, 52));
    }

    #[test]
    fn latent_sides_follow_padding() {
        assert_eq!(latent_side(1), 4);
        assert_eq!(latent_side(64), 4);
        assert_eq!(latent_side(65), 8);
        assert_eq!(latent_side(100), 8);
    }
}
