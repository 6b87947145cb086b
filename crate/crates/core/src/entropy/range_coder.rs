//! 32-bit renormalizing range coder (carry-propagating, byte oriented).
//!
//! The encoder drops the always-zero leading byte and terminates with the
//! shortest tail that pins the final interval; the decoder reads missing
//! tail bytes as zero, at most four of them.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const MAX_PAD: usize = 4;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the sub-interval `[cum, cum + freq)` of `[0, total)`.
    /// `total` must not exceed 2^16 and `freq` must be non-zero.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= 1 << 16);
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Sixteen equiprobable bits.
    pub fn encode_raw16(&mut self, v: u32) {
        self.encode(v & 0xFFFF, 1, 1 << 16);
    }

    pub fn finish(mut self) -> Vec<u8> {
        // pick the value in [low, low + range) with the most trailing zero
        // bytes; those bytes are then implied and not written
        let hi = self.low + self.range as u64;
        let mut zeros = 0;
        for m in (1..=4u32).rev() {
            let mask = (1u64 << (8 * m)) - 1;
            let v = (self.low + mask) & !mask;
            if v < hi {
                self.low = v;
                zeros = m as usize;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        let end = self.out.len() - zeros;
        debug_assert!(self.out[end..].iter().all(|&b| b == 0));
        self.out.truncate(end);
        self.out.remove(0);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    pad: usize,
    code: u32,
    range: u32,
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            pad: 0,
            code: 0,
            range: u32::MAX,
            r: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.data.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else {
            self.pad += 1;
            if self.pad > MAX_PAD {
                return Err(Error::Truncated(format!(
                    "range-coded stream of {} bytes ended early",
                    self.data.len()
                )));
            }
            Ok(0)
        }
    }

    /// Target frequency in `[0, total)`; must be followed by [`Self::consume`].
    pub fn decode_freq(&mut self, total: u32) -> Result<u32> {
        self.r = self.range / total;
        let v = self.code / self.r;
        if v >= total {
            return Err(Error::Corrupt("range decoder out of interval".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.code -= self.r * cum;
        self.range = self.r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_raw16(&mut self) -> Result<u32> {
        let v = self.decode_freq(1 << 16)?;
        self.consume(v, 1)?;
        Ok(v)
    }

    /// Checks that the whole stream was used.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Corrupt(format!(
                "{} unread bytes after the last symbol",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

const ADAPT_INC: u32 = 32;
const ADAPT_LIMIT: u32 = 1 << 16;

/// Adaptive 256-symbol frequency model (increment 32, halve past 2^16).
#[derive(Clone)]
pub struct AdaptiveByteModel {
    freq: [u32; 256],
    total: u32,
}

impl Default for AdaptiveByteModel {
    fn default() -> Self {
        Self {
            freq: [1; 256],
            total: 256,
        }
    }
}

impl AdaptiveByteModel {
    fn update(&mut self, s: usize) {
        self.freq[s] += ADAPT_INC;
        self.total += ADAPT_INC;
        if self.total > ADAPT_LIMIT {
            self.total = 0;
            for f in self.freq.iter_mut() {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, byte: u8) {
        let s = byte as usize;
        let cum: u32 = self.freq[..s].iter().sum();
        enc.encode(cum, self.freq[s], self.total);
        self.update(s);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> Result<u8> {
        let v = dec.decode_freq(self.total)?;
        let mut cum = 0;
        for s in 0..256 {
            if v < cum + self.freq[s] {
                dec.consume(cum, self.freq[s])?;
                self.update(s);
                return Ok(s as u8);
            }
            cum += self.freq[s];
        }
        Err(Error::Corrupt("adaptive model overrun".into()))
    }
}

pub fn encode_bytes_adaptive(bytes: &[u8]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let mut model = AdaptiveByteModel::default();
    for &b in bytes {
        model.encode(&mut enc, b);
    }
    enc.finish()
}

pub fn decode_bytes_adaptive(data: &[u8], count: usize) -> Result<Vec<u8>> {
    let mut dec = RangeDecoder::new(data)?;
    let mut model = AdaptiveByteModel::default();
    let out = (0..count).map(|_| model.decode(&mut dec)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
