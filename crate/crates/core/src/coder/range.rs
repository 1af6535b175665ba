//! Carry-propagating range coder with 32-bit range and 16-bit frequency
//! tables.
//!
//! The encoder keeps a 64-bit `low` (32 live bits plus a carry bit) and
//! defers the last output byte together with any run of `0xFF` bytes until
//! the carry is resolved. The always-zero leading byte is not emitted.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;
/// Bytes of the final interval kept by [`RangeEncoder::finish`].
const FLUSH_BYTES: u32 = 3;

/// Largest vocabulary a 16-bit frequency table can carry with room to spare.
pub const MAX_VOCAB: usize = 1 << 15;

/// Cumulative frequencies (`V + 1` entries, `cum[0] = 0`, `cum[V] = 2^16`).
/// Each symbol gets `1 + floor(p (2^16 - V))`; the remainder goes to the most
/// probable symbol (lowest index on ties).
pub fn quantize(row: &[f64]) -> Result<Vec<u32>> {
    let v = row.len();
    if !(2..=MAX_VOCAB).contains(&v) {
        return Err(Error::InvalidArgument(format!("cannot quantize a row of {v} symbols")));
    }
    let spare = (FREQ_TOTAL as usize - v) as f64;
    let mut freq: Vec<u32> = row.iter().map(|&p| 1 + (p * spare).floor() as u32).collect();
    let sum: u64 = freq.iter().map(|&f| f as u64).sum();
    if sum > FREQ_TOTAL as u64 {
        return Err(Error::BadProbabilities { pos: usize::MAX, reason: format!("quantized mass {sum} exceeds 2^16") });
    }
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    freq[best] += FREQ_TOTAL - sum as u32;
    let mut cum = Vec::with_capacity(v + 1);
    cum.push(0);
    let mut acc = 0;
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    Ok(cum)
}

#[derive(Debug, Clone)]
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
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
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
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encodes symbol `sym` of the table `cum`.
    pub fn encode(&mut self, cum: &[u32], sym: usize) {
        let (lo, hi) = (cum[sym], cum[sym + 1]);
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * lo as u64;
        self.range = r * (hi - lo);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Emits the shortest prefix of three bytes of the final interval; the
    /// decoder reads zeros past the end.
    pub fn finish(mut self) -> Vec<u8> {
        let unit = 1u64 << (32 - 8 * FLUSH_BYTES);
        self.low = (self.low + unit - 1) & !(unit - 1);
        for _ in 0..=FLUSH_BYTES {
            self.shift_low();
        }
        debug_assert_eq!(self.out.first(), Some(&0));
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self { input, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes read beyond the end of the input so far.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.input.len())
    }

    pub fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let value = self.code / r;
        if value >= FREQ_TOTAL {
            return Err(Error::Bitstream(format!("decoder value {value} outside the frequency table")));
        }
        // last symbol whose cumulative start is <= value
        let sym = cum.partition_point(|&c| c <= value) - 1;
        let (lo, hi) = (cum[sym], cum[sym + 1]);
        self.code -= r * lo;
        self.range = r * (hi - lo);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        Ok(sym)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_quantization_is_exact() {
        let cum = quantize(&vec![1.0 / 128.0; 128]).unwrap();
        assert!(cum.windows(2).all(|w| w[1] - w[0] == 512));
    }

    #[test]
    fn quantization_keeps_every_symbol() {
        let mut row = vec![1e-12; 300];
        row[7] = 1.0 - 299e-12;
        let cum = quantize(&row).unwrap();
        assert_eq!(*cum.last().unwrap(), FREQ_TOTAL);
        assert!(cum.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn round_trip_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let v = rng.random_range(2..300);
            let n = rng.random_range(0..500);
            let mut tables = Vec::new();
            let mut syms = Vec::new();
            let mut enc = RangeEncoder::new();
            for _ in 0..n {
                let mut row: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(4)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                let cum = quantize(&row).unwrap();
                let sym = rng.random_range(0..v);
                enc.encode(&cum, sym);
                tables.push(cum);
                syms.push(sym);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for (cum, &sym) in tables.iter().zip(&syms) {
                assert_eq!(dec.decode(cum).unwrap(), sym, "trial {trial}");
            }
            assert!(dec.overrun() <= 4);
        }
    }

    #[test]
    fn long_carry_runs_survive() {
        // near-certain symbols push long 0xFF runs through the cache
        let mut row = vec![1e-9; 4];
        row[3] = 1.0 - 3e-9;
        let cum = quantize(&row).unwrap();
        let syms: Vec<usize> = (0..5000).map(|i| if i % 997 == 0 { 0 } else { 3 }).collect();
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode(&cum, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &syms {
            assert_eq!(dec.decode(&cum).unwrap(), s);
        }
    }

    #[test]
    fn empty_stream_is_short() {
        assert_eq!(RangeEncoder::new().finish().len(), FLUSH_BYTES as usize);
    }
}
