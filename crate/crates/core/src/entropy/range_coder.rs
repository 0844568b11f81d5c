//! Carry-less range coder with a 32-bit state and 16-bit frequencies.
//!
//! Bytes leave the encoder most significant first. The decoder consumes
//! exactly the bytes the encoder produced and finishes with its code register
//! equal to the encoder's final `low`, which lets it reject most corrupted or
//! truncated payloads.
//!
//! [`escape_encode`] codes any `i32` latent against tables from
//! [`CdfTable::build_escaped`]: a symbol at or past a table end is sent as
//! that end followed by its distance from it.

use super::cdf::{CdfTable, ChannelCdf, FREQ_BITS, FREQ_TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// True while the top byte is settled or the range has to be narrowed to
/// keep it from straddling a byte boundary; narrows `range` in the latter case.
fn needs_shift(low: u32, range: &mut u32) -> bool {
    if (low ^ low.wrapping_add(*range)) < TOP {
        true
    } else if *range < BOT {
        *range = low.wrapping_neg() & (BOT - 1);
        true
    } else {
        false
    }
}

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, out: Vec::new() }
    }

    pub fn encode(&mut self, cdf: &ChannelCdf, symbol: i32, channel: usize) -> Result<()> {
        if !cdf.contains(symbol) {
            return Err(Error::SymbolRange { symbol, min: cdf.min(), max: cdf.max(), channel });
        }
        let (cum, freq) = cdf.interval(symbol);
        let r = self.range >> FREQ_BITS;
        self.low = self.low.wrapping_add(cum * r);
        self.range = r * freq;
        while needs_shift(self.low, &mut self.range) {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self { low: 0, range: u32::MAX, code: 0, input, pos: 0 };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("payload truncated after {} bytes", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &ChannelCdf) -> Result<i32> {
        let r = self.range >> FREQ_BITS;
        let count = self.code.wrapping_sub(self.low) / r;
        if count >= FREQ_TOTAL {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let symbol = cdf.lookup(count);
        let (cum, freq) = cdf.interval(symbol);
        self.low = self.low.wrapping_add(cum * r);
        self.range = r * freq;
        while needs_shift(self.low, &mut self.range) {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Checks that the stream ended exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.input.len() {
            return Err(Error::Decode(format!(
                "{} unread payload bytes",
                self.input.len() - self.pos
            )));
        }
        if self.code != self.low {
            return Err(Error::Decode("payload does not terminate cleanly".into()));
        }
        Ok(())
    }
}

fn channel_index(i: usize, plane: usize, channels: usize) -> usize {
    (i / plane.max(1)) % channels
}

/// Range-codes channel-major `symbols`, `plane` consecutive symbols per channel.
pub fn range_encode(symbols: &[i32], table: &CdfTable, plane: usize) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    if table.is_empty() {
        return Err(Error::Parameter("empty cdf table".into()));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let c = channel_index(i, plane, table.len());
        enc.encode(table.channel(c), s, c)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`] for `count` symbols.
pub fn range_decode(bytes: &[u8], table: &CdfTable, count: usize, plane: usize) -> Result<Vec<i32>> {
    if count == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Decode("payload present for an empty latent".into()))
        };
    }
    if table.is_empty() {
        return Err(Error::Parameter("empty cdf table".into()));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        out.push(dec.decode(table.channel(channel_index(i, plane, table.len())))?);
    }
    dec.finish()?;
    Ok(out)
}

/// Unary prefixes longer than this cannot come from an `i32` distance.
const MAX_OVERFLOW_BITS: u32 = 33;

/// Order-0 Exp-Golomb code of `n` over equiprobable bits.
fn encode_overflow(enc: &mut RangeEncoder, bit: &ChannelCdf, n: u64) -> Result<()> {
    let v = n + 1;
    let k = 63 - v.leading_zeros();
    for _ in 0..k {
        enc.encode(bit, 1, 0)?;
    }
    enc.encode(bit, 0, 0)?;
    for j in (0..k).rev() {
        enc.encode(bit, ((v >> j) & 1) as i32, 0)?;
    }
    Ok(())
}

fn decode_overflow(dec: &mut RangeDecoder, bit: &ChannelCdf) -> Result<u64> {
    let mut k = 0;
    while dec.decode(bit)? == 1 {
        k += 1;
        if k > MAX_OVERFLOW_BITS {
            return Err(Error::Decode("escape length out of range".into()));
        }
    }
    let mut v = 1u64;
    for _ in 0..k {
        v = (v << 1) | dec.decode(bit)? as u64;
    }
    Ok(v - 1)
}

/// Range-codes channel-major `symbols` of any value against an escaped table.
pub fn escape_encode(symbols: &[i32], table: &CdfTable, plane: usize) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    if table.is_empty() {
        return Err(Error::Parameter("empty cdf table".into()));
    }
    let bit = ChannelCdf::binary();
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let c = channel_index(i, plane, table.len());
        let cdf = table.channel(c);
        let (lo, hi) = (cdf.min(), cdf.max());
        if s <= lo {
            enc.encode(cdf, lo, c)?;
            encode_overflow(&mut enc, &bit, (lo as i64 - s as i64) as u64)?;
        } else if s >= hi {
            enc.encode(cdf, hi, c)?;
            encode_overflow(&mut enc, &bit, (s as i64 - hi as i64) as u64)?;
        } else {
            enc.encode(cdf, s, c)?;
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`escape_encode`] for `count` symbols.
pub fn escape_decode(bytes: &[u8], table: &CdfTable, count: usize, plane: usize) -> Result<Vec<i32>> {
    if count == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Decode("payload present for an empty latent".into()))
        };
    }
    if table.is_empty() {
        return Err(Error::Parameter("empty cdf table".into()));
    }
    let bit = ChannelCdf::binary();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let cdf = table.channel(channel_index(i, plane, table.len()));
        let s = dec.decode(cdf)?;
        let value = if s == cdf.min() {
            s as i64 - decode_overflow(&mut dec, &bit)? as i64
        } else if s == cdf.max() {
            s as i64 + decode_overflow(&mut dec, &bit)? as i64
        } else {
            s as i64
        };
        out.push(i32::try_from(value).map_err(|_| Error::Decode(format!("escaped symbol {value} out of range")))?);
    }
    dec.finish()?;
    Ok(out)
}
