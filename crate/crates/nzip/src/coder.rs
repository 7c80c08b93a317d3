//! Byte-oriented range coder with 64-bit state.
//!
//! Probabilities arrive as cumulative counts summing to 2^precision. The
//! encoder narrows [low, low+range) to the symbol's sub-interval, emitting
//! the top byte whenever range drops below 2^56 and patching earlier output
//! on carry. The decoder mirrors the arithmetic exactly, so identical tables
//! produce identical intervals and the round trip is bit-exact.

use crate::entropy::CdfTable;
use crate::error::{NzipError, Result};

const TOP_SHIFT: u32 = 56;
const BOTTOM: u64 = 1u64 << TOP_SHIFT;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Narrows the interval to [cum, cum+freq) / 2^precision of its width.
    pub fn encode(&mut self, cum: u32, freq: u32, precision: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!((cum as u64 + freq as u64) <= 1u64 << precision);
        let r = self.range >> precision;
        let (low, carry) = self.low.overflowing_add(r * cum as u64);
        self.low = low;
        if carry {
            self.propagate_carry();
        }
        self.range = r * freq as u64;
        while self.range < BOTTOM {
            self.out.push((self.low >> TOP_SHIFT) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn propagate_carry(&mut self) {
        // walk back over 0xff bytes, then bump the first non-0xff one; the
        // initial range of 2^64 means a carry can never outrun the output
        for byte in self.out.iter_mut().rev() {
            if *byte == 0xff {
                *byte = 0;
            } else {
                *byte += 1;
                return;
            }
        }
        unreachable!("carry past the start of the stream");
    }

    /// Flushes the minimal suffix that pins the interval: round `low` up to a
    /// multiple of 2^56 (still inside [low, low+range) because range ≥ 2^56
    /// after renormalization) and emit its single meaningful byte.
    pub fn finish(mut self) -> Vec<u8> {
        let mask = BOTTOM - 1;
        let rounded = (self.low.wrapping_add(mask)) & !mask;
        if rounded < self.low {
            // rounding wrapped past 2^64: the final byte is zero with a carry
            self.propagate_carry();
            self.out.push(0);
        } else {
            self.out.push((rounded >> TOP_SHIFT) as u8);
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder::new()
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    low: u64,
    range: u64,
    code: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> RangeDecoder<'a> {
        let mut d = RangeDecoder { data, pos: 0, low: 0, range: u64::MAX, code: 0 };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // reads past the end return zero; whether that mattered is settled by
        // the final position check in `finish`
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the scaled offset of the code point inside the current
    /// interval; the caller locates the symbol whose cumulative span covers it.
    pub fn decode_target(&self, precision: u32) -> u32 {
        let r = self.range >> precision;
        let dv = self.code.wrapping_sub(self.low) / r;
        dv.min((1u64 << precision) - 1) as u32
    }

    /// Consumes the symbol spanning [cum, cum+freq); must match the target
    /// returned by `decode_target`.
    pub fn advance(&mut self, cum: u32, freq: u32, precision: u32) {
        let r = self.range >> precision;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        while self.range < BOTTOM {
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Verifies the stream was consumed exactly: the decoder primes 8 bytes
    /// and the encoder flushes 1, so a clean stop sits 7 reads past the end.
    pub fn finish(self) -> Result<()> {
        if self.pos == self.data.len() + 7 {
            Ok(())
        } else {
            Err(NzipError::Truncated(format!(
                "stream of {} bytes stopped at virtual position {}, expected {}",
                self.data.len(),
                self.pos,
                self.data.len() + 7
            )))
        }
    }
}

/// Encodes `values` (already inside each row's window) with per-element CDFs.
pub fn encode_symbols(values: &[i32], table: &CdfTable) -> Result<Vec<u8>> {
    if values.len() != table.len() {
        return Err(NzipError::Dimension(format!(
            "{} symbols against {} table rows",
            values.len(),
            table.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&v, row) in values.iter().zip(&table.rows) {
        if v < row.lo || v > row.hi() {
            return Err(NzipError::Contract(format!(
                "symbol {v} outside window [{}, {}]",
                row.lo,
                row.hi()
            )));
        }
        let k = (v - row.lo) as usize;
        enc.encode(row.cdf[k], row.cdf[k + 1] - row.cdf[k], table.precision);
    }
    Ok(enc.finish())
}

/// Decodes exactly `table.len()` symbols and checks the stream length.
pub fn decode_symbols(data: &[u8], table: &CdfTable) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(data);
    let mut out = Vec::with_capacity(table.len());
    for row in &table.rows {
        let target = dec.decode_target(table.precision);
        // cdf is strictly increasing with cdf[0]=0, cdf[K]=2^P, so the symbol
        // is the last k with cdf[k] <= target
        let k = row.cdf.partition_point(|&c| c <= target) - 1;
        dec.advance(row.cdf[k], row.cdf[k + 1] - row.cdf[k], table.precision);
        out.push(row.lo + k as i32);
    }
    dec.finish()?;
    Ok(out)
}
