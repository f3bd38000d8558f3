//! Byte-oriented range coder with carry propagation, 32-bit range and
//! frequency tables that sum to a power of two.

use crate::densities::IntegerPmf;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

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
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
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

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes the interval `[cum, cum + freq)` of a table summing to
    /// `1 << bits`.
    pub fn encode(&mut self, cum: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && (cum as u64 + freq as u64) <= 1 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    /// Codes `n` raw bits of `value`, most significant first.
    pub fn encode_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += self.range as u64;
            }
            self.normalize();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: u32::MAX, input, pos: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // reading past the end yields zeros, matching the flushed tail
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    /// The cumulative frequency the next symbol falls on; follow with
    /// [`RangeDecoder::consume`].
    pub fn peek(&self, bits: u32) -> u32 {
        let r = self.range >> bits;
        (self.code / r).min((1 << bits) - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32, bits: u32) {
        let r = self.range >> bits;
        self.code -= r * cum;
        self.range = r * freq;
        self.normalize();
    }

    pub fn decode_bits(&mut self, n: u32) -> u64 {
        let mut v = 0u64;
        for _ in 0..n {
            self.range >>= 1;
            let bit = if self.code >= self.range {
                self.code -= self.range;
                1
            } else {
                0
            };
            v = (v << 1) | bit;
            self.normalize();
        }
        v
    }

    /// Bytes consumed beyond the end of the input.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.input.len())
    }
}

/// Escaped magnitudes must stay below this.
pub const ESCAPE_LIMIT: u64 = 1 << 40;

/// A PMF with its cumulative table.
pub struct CodingTable<'p> {
    pub pmf: &'p IntegerPmf,
    cum: Vec<u32>,
}

impl<'p> CodingTable<'p> {
    pub fn new(pmf: &'p IntegerPmf) -> Self {
        let mut cum = Vec::with_capacity(pmf.counts.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &c in &pmf.counts {
            acc += c;
            cum.push(acc);
        }
        debug_assert_eq!(acc as u64, pmf.total());
        Self { pmf, cum }
    }

    fn interval(&self, index: usize) -> (u32, u32) {
        (self.cum[index], self.cum[index + 1] - self.cum[index])
    }

    fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Bits spent on the escape payload of `symbol` beyond the escape
/// symbol itself: a side bit plus an order-0 Exp-Golomb magnitude.
pub fn escape_bits(pmf: &IntegerPmf, symbol: i64) -> u64 {
    let d = escape_magnitude(pmf, symbol).1;
    1 + 2 * (64 - (d + 1).leading_zeros() as u64 - 1) + 1
}

fn escape_magnitude(pmf: &IntegerPmf, symbol: i64) -> (bool, u64) {
    if symbol < pmf.lo {
        (false, (pmf.lo - symbol - 1) as u64)
    } else {
        (true, (symbol - pmf.hi - 1) as u64)
    }
}

/// Ideal code length in bits of `symbol` under the quantized table,
/// escape payload included.
pub fn ideal_bits(pmf: &IntegerPmf, symbol: i64) -> f64 {
    match pmf.index_of(symbol) {
        Some(i) => pmf.code_length_bits(i),
        None => pmf.code_length_bits(pmf.escape_index()) + escape_bits(pmf, symbol) as f64,
    }
}

pub fn encode_symbol(enc: &mut RangeEncoder, t: &CodingTable<'_>, symbol: i64) -> Result<()> {
    let bits = t.pmf.precision_bits;
    match t.pmf.index_of(symbol) {
        Some(i) => {
            let (c, f) = t.interval(i);
            enc.encode(c, f, bits);
        }
        None => {
            let (above, d) = escape_magnitude(t.pmf, symbol);
            if d >= ESCAPE_LIMIT {
                return Err(Error::Coder(format!("symbol {symbol} too far outside its support")));
            }
            let (c, f) = t.interval(t.pmf.escape_index());
            enc.encode(c, f, bits);
            enc.encode_bits(above as u64, 1);
            let v = d + 1;
            let n = 64 - v.leading_zeros();
            enc.encode_bits(0, n - 1);
            enc.encode_bits(v, n);
        }
    }
    Ok(())
}

pub fn decode_symbol(dec: &mut RangeDecoder<'_>, t: &CodingTable<'_>) -> Result<i64> {
    let bits = t.pmf.precision_bits;
    let i = t.find(dec.peek(bits));
    let (c, f) = t.interval(i);
    dec.consume(c, f, bits);
    if i != t.pmf.escape_index() {
        return Ok(t.pmf.lo + i as i64);
    }
    let above = dec.decode_bits(1) == 1;
    let mut zeros = 0;
    while dec.decode_bits(1) == 0 {
        zeros += 1;
        if zeros > 40 {
            return Err(Error::Coder("corrupt escape code".into()));
        }
    }
    let v = (1u64 << zeros) | dec.decode_bits(zeros);
    let d = (v - 1) as i64;
    Ok(if above { t.pmf.hi + 1 + d } else { t.pmf.lo - 1 - d })
}

/// Codes `symbols[i]` under `pmfs[i]`.
pub fn range_encode(symbols: &[i64], pmfs: &[&IntegerPmf]) -> Result<Vec<u8>> {
    if symbols.len() != pmfs.len() {
        return Err(Error::contract("one PMF per symbol"));
    }
    let mut enc = RangeEncoder::new();
    for (&s, p) in symbols.iter().zip(pmfs) {
        encode_symbol(&mut enc, &CodingTable::new(p), s)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], pmfs: &[&IntegerPmf]) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = pmfs.iter().map(|p| decode_symbol(&mut dec, &CodingTable::new(p))).collect::<Result<Vec<_>>>()?;
    if dec.overrun() > 4 {
        return Err(Error::Coder("stream truncated".into()));
    }
    Ok(out)
}
