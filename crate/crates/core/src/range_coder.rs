//! Renormalizing integer range coder over 16-bit cumulative frequency tables.
//!
//! The coder keeps a 56-bit window of the interval in a 64-bit register
//! (plus one carry bit) and renormalizes a byte at a time whenever the range
//! drops below 2^48, so the per-symbol truncation loss stays below 2^-32.
//! Carries are resolved with the cache/pending-0xFF scheme used by LZMA.
//! All state is integer; identical inputs give identical bytes everywhere.

use thiserror::Error;

/// Frequency precision: every cdf sums to `TOTAL`.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

const WINDOW_BITS: u32 = 56;
const WINDOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
const RENORM_BELOW: u64 = 1 << (WINDOW_BITS - 8);
/// Bytes the decoder pulls in before the first symbol.
const PRIME_BYTES: usize = (WINDOW_BITS / 8) as usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoderError {
    #[error("symbol {symbol} lies outside the alphabet [{low}, {high}]")]
    SymbolOutOfRange { symbol: i64, low: i64, high: i64 },
    #[error("zero-frequency symbol {index} cannot be coded")]
    ZeroFrequency { index: usize },
    #[error("stream truncated")]
    Truncated,
    #[error("stream corrupt: decoded target outside the cdf")]
    Corrupt,
    #[error("{0} trailing bytes after the last symbol")]
    TrailingBytes(usize),
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("symbol and cdf sequences differ in length ({symbols} vs {cdfs})")]
    LengthMismatch { symbols: usize, cdfs: usize },
}

/// A cumulative distribution over symbol indices `0..num_symbols()`,
/// with `cum(0) == 0`, `cum(num_symbols()) == TOTAL` and non-decreasing cum.
pub trait Cdf {
    fn num_symbols(&self) -> usize;

    fn cum(&self, index: usize) -> u32;

    fn freq(&self, index: usize) -> u32 {
        self.cum(index + 1) - self.cum(index)
    }

    /// Largest index whose interval starts at or below `target`.
    fn find(&self, target: u32) -> usize {
        let (mut lo, mut hi) = (0usize, self.num_symbols());
        // invariant: cum(lo) <= target < cum(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cum(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// An explicit cumulative frequency table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscretizedCdf {
    pub cum: Vec<u32>,
    /// Symbol value of index 0.
    pub alphabet_offset: i32,
}

impl DiscretizedCdf {
    /// Smallest and largest codable symbol.
    pub fn alphabet(&self) -> (i64, i64) {
        let low = self.alphabet_offset as i64;
        (low, low + self.num_symbols() as i64 - 1)
    }

    pub fn index_of(&self, symbol: i32) -> Result<usize, CoderError> {
        let (low, high) = self.alphabet();
        let s = symbol as i64;
        if s < low || s > high {
            return Err(CoderError::SymbolOutOfRange { symbol: s, low, high });
        }
        Ok((s - low) as usize)
    }

    /// A single frequency-1 slot per value: `2^16` equiprobable symbols.
    pub fn uniform_u16() -> UniformU16 {
        UniformU16
    }
}

impl Cdf for DiscretizedCdf {
    fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    fn cum(&self, index: usize) -> u32 {
        self.cum[index]
    }
}

/// The flat distribution over all 16-bit values, used for raw escapes.
#[derive(Debug, Clone, Copy)]
pub struct UniformU16;

impl Cdf for UniformU16 {
    fn num_symbols(&self) -> usize {
        TOTAL as usize
    }

    fn cum(&self, index: usize) -> u32 {
        index as u32
    }

    fn find(&self, target: u32) -> usize {
        target as usize
    }
}

/// Quantizes a pmf to a `TOTAL`-normalized cdf.
///
/// Every symbol receives one unit; the remaining `TOTAL - n` units are split
/// proportionally to the pmf with largest-remainder rounding (ties go to the
/// lower index).
pub fn build_cdf(pmf: &[f64], alphabet_offset: i32) -> Result<DiscretizedCdf, CoderError> {
    let n = pmf.len();
    if n == 0 {
        return Err(CoderError::InvalidPmf("empty pmf".into()));
    }
    if n > TOTAL as usize {
        return Err(CoderError::InvalidPmf(format!("{n} symbols exceed the precision")));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CoderError::InvalidPmf("entries must be finite and non-negative".into()));
    }
    let sum: f64 = pmf.iter().sum();
    if sum <= 0.0 {
        return Err(CoderError::InvalidPmf("all-zero pmf".into()));
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoderError::InvalidPmf(format!("pmf sums to {sum}")));
    }

    let spare = (TOTAL as usize - n) as f64;
    let mut freq = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    let mut assigned = 0u64;
    for (i, p) in pmf.iter().enumerate() {
        let share = p / sum * spare;
        let whole = share.floor();
        freq.push(1 + whole as u32);
        remainders.push((share - whole, i));
        assigned += 1 + whole as u64;
    }
    let mut leftover = TOTAL as u64 - assigned;
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().cycle() {
        if leftover == 0 {
            break;
        }
        freq[i] += 1;
        leftover -= 1;
    }

    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0u32);
    let mut acc = 0u32;
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    Ok(DiscretizedCdf { cum, alphabet_offset })
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    started: bool,
    wrote_symbol: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: WINDOW_MASK,
            cache: 0,
            pending: 1,
            started: false,
            wrote_symbol: false,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `[cum, cum + freq)` out of `TOTAL`.
    pub fn encode_interval(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        self.wrote_symbol = true;
        let r = self.range >> PRECISION_BITS;
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        while self.range < RENORM_BELOW {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode<C: Cdf + ?Sized>(&mut self, cdf: &C, index: usize) -> Result<(), CoderError> {
        let freq = cdf.freq(index);
        if freq == 0 {
            return Err(CoderError::ZeroFrequency { index });
        }
        self.encode_interval(cdf.cum(index), freq);
        Ok(())
    }

    /// Writes a raw 32-bit value as two equiprobable 16-bit symbols.
    pub fn encode_raw_u32(&mut self, value: u32) {
        self.encode_interval(value >> 16, 1);
        self.encode_interval(value & 0xFFFF, 1);
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        let top = ((self.low >> (WINDOW_BITS - 8)) & 0xFF) as u8;
        if carry != 0 || top != 0xFF {
            // The first cached byte is always zero and carries never reach it.
            if self.started {
                self.out.push(self.cache.wrapping_add(carry));
            }
            self.started = true;
            for _ in 1..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = top;
        }
        self.pending += 1;
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    /// Flushes the coder. A coder that never saw a symbol yields no bytes.
    pub fn finish(mut self) -> Vec<u8> {
        if !self.wrote_symbol {
            return Vec::new();
        }
        for _ in 0..=PRIME_BYTES {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u64,
    code: u64,
    r: u64,
}

impl<'a> RangeDecoder<'a> {
    /// Starts decoding. An empty stream is valid only if no symbol is read.
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder { data, pos: 0, range: WINDOW_MASK, code: 0, r: 0 };
        if !data.is_empty() {
            for _ in 0..PRIME_BYTES {
                dec.code = (dec.code << 8) | dec.next_byte()? as u64;
            }
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self.data.get(self.pos).ok_or(CoderError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    /// Position of the next symbol within `[0, TOTAL)`.
    pub fn target(&mut self) -> Result<u32, CoderError> {
        if self.data.is_empty() {
            return Err(CoderError::Truncated);
        }
        self.r = self.range >> PRECISION_BITS;
        let t = self.code / self.r;
        if t >= TOTAL as u64 {
            return Err(CoderError::Corrupt);
        }
        Ok(t as u32)
    }

    /// Consumes the interval found for the last `target()`.
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<(), CoderError> {
        self.code -= self.r * cum as u64;
        self.range = self.r * freq as u64;
        while self.range < RENORM_BELOW {
            self.code = ((self.code << 8) | self.next_byte()? as u64) & WINDOW_MASK;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode<C: Cdf + ?Sized>(&mut self, cdf: &C) -> Result<usize, CoderError> {
        let t = self.target()?;
        let index = cdf.find(t);
        let (cum, freq) = (cdf.cum(index), cdf.freq(index));
        if freq == 0 || t < cum || t >= cum + freq {
            return Err(CoderError::Corrupt);
        }
        self.consume(cum, freq)?;
        Ok(index)
    }

    pub fn decode_raw_u32(&mut self) -> Result<u32, CoderError> {
        let hi = self.decode(&UniformU16)? as u32;
        let lo = self.decode(&UniformU16)? as u32;
        Ok((hi << 16) | lo)
    }

    /// Errors unless every byte of the stream has been consumed.
    pub fn finish(self) -> Result<(), CoderError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(CoderError::TrailingBytes(n)),
        }
    }
}

/// Encodes `symbols[i]` under `cdfs[i]`.
pub fn encode_symbols(symbols: &[i32], cdfs: &[DiscretizedCdf]) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != cdfs.len() {
        return Err(CoderError::LengthMismatch { symbols: symbols.len(), cdfs: cdfs.len() });
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(cdf, cdf.index_of(s)?)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; `cdf_for(i, previous)` supplies the cdf of symbol
/// `i` and may depend on the symbols decoded so far.
pub fn decode_symbols_with<F>(bytes: &[u8], count: usize, mut cdf_for: F) -> Result<Vec<i32>, CoderError>
where
    F: FnMut(usize, &[i32]) -> DiscretizedCdf,
{
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let cdf = cdf_for(i, &out);
        let index = dec.decode(&cdf)?;
        out.push(cdf.alphabet_offset + index as i32);
    }
    dec.finish()?;
    Ok(out)
}

pub fn decode_symbols(bytes: &[u8], cdfs: &[DiscretizedCdf], count: usize) -> Result<Vec<i32>, CoderError> {
    if count > cdfs.len() {
        return Err(CoderError::LengthMismatch { symbols: count, cdfs: cdfs.len() });
    }
    decode_symbols_with(bytes, count, |i, _| cdfs[i].clone())
}

/// Ideal code length in bits of `symbols` under the discretized cdfs.
pub fn ideal_bits(symbols: &[i32], cdfs: &[DiscretizedCdf]) -> Result<f64, CoderError> {
    let mut bits = 0.0;
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        let f = cdf.freq(cdf.index_of(s)?);
        bits -= (f as f64 / TOTAL as f64).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cdf(rng: &mut ChaCha8Rng) -> DiscretizedCdf {
        let n = rng.random_range(1..300usize);
        let skew = rng.random_range(0.1..8.0f64);
        let mut pmf: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powf(skew)).collect();
        if rng.random_bool(0.2) {
            pmf[rng.random_range(0..n)] += 50.0;
        }
        let s: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|p| *p /= s);
        build_cdf(&pmf, rng.random_range(-500..500)).unwrap()
    }

    fn sample(cdf: &DiscretizedCdf, rng: &mut ChaCha8Rng) -> i32 {
        let t = rng.random_range(0..TOTAL);
        cdf.alphabet_offset + cdf.find(t) as i32
    }

    #[test]
    fn build_cdf_examples() {
        assert_eq!(build_cdf(&[1.0], 0).unwrap().cum, vec![0, 65536]);
        assert_eq!(build_cdf(&[0.5, 0.5], 0).unwrap().cum, vec![0, 32768, 65536]);
        let tiny = build_cdf(&[1e-12, 1.0 - 1e-12], 0).unwrap();
        assert!(tiny.freq(0) >= 1);
        assert_eq!(tiny.cum[2], TOTAL);
        assert!(matches!(build_cdf(&[0.0, 0.0], 0), Err(CoderError::InvalidPmf(_))));
        assert!(matches!(build_cdf(&[0.5, 0.4], 0), Err(CoderError::InvalidPmf(_))));
    }

    #[test]
    fn zero_information_source_is_tiny() {
        let cdf = build_cdf(&[1.0], 3).unwrap();
        let symbols = vec![3; 1000];
        let bytes = encode_symbols(&symbols, &vec![cdf.clone(); 1000]).unwrap();
        assert!(bytes.len() <= 8, "{} bytes", bytes.len());
        assert_eq!(decode_symbols(&bytes, &vec![cdf; 1000], 1000).unwrap(), symbols);
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let cdf = build_cdf(&[1.0 / 256.0; 256], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let symbols: Vec<i32> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let cdfs = vec![cdf; symbols.len()];
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        let ratio = bytes.len() as f64 / 1e4;
        assert!((0.99..=1.01).contains(&ratio), "ratio {ratio}");
        assert_eq!(decode_symbols(&bytes, &cdfs, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn empty_stream_decodes_to_nothing() {
        let bytes = encode_symbols(&[], &[]).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(decode_symbols(&bytes, &[], 0).unwrap(), Vec::<i32>::new());
        let cdf = build_cdf(&[0.5, 0.5], 0).unwrap();
        assert_eq!(decode_symbols(&[], &[cdf], 1), Err(CoderError::Truncated));
    }

    #[test]
    fn out_of_alphabet_symbol_is_an_error() {
        let cdf = build_cdf(&[0.25; 4], -2).unwrap();
        assert_eq!(encode_symbols(&[2], &[cdf]), Err(CoderError::SymbolOutOfRange { symbol: 2, low: -2, high: 1 }));
    }

    #[test]
    fn random_round_trip_100k_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let table: Vec<DiscretizedCdf> = (0..64).map(|_| random_cdf(&mut rng)).collect();
        let cdfs: Vec<DiscretizedCdf> = (0..100_000).map(|_| table[rng.random_range(0..table.len())].clone()).collect();
        let symbols: Vec<i32> = cdfs.iter().map(|c| sample(c, &mut rng)).collect();
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        assert_eq!(decode_symbols(&bytes, &cdfs, symbols.len()).unwrap(), symbols);
        let ideal = ideal_bits(&symbols, &cdfs).unwrap();
        assert!((bytes.len() * 8) as f64 <= ideal + 64.0);
    }

    #[test]
    fn truncated_stream_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let cdfs: Vec<DiscretizedCdf> = (0..200).map(|_| random_cdf(&mut rng)).collect();
            let symbols: Vec<i32> = cdfs.iter().map(|c| sample(c, &mut rng)).collect();
            let bytes = encode_symbols(&symbols, &cdfs).unwrap();
            if bytes.is_empty() {
                continue;
            }
            let cut = &bytes[..bytes.len() - 1];
            assert!(decode_symbols(cut, &cdfs, symbols.len()).is_err());
        }
    }

    #[test]
    fn raw_values_round_trip() {
        let values = [0u32, 1, 0xFFFF, 0x1_0000, u32::MAX, 0xDEAD_BEEF];
        let mut enc = RangeEncoder::new();
        for v in values {
            enc.encode_raw_u32(v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for v in values {
            assert_eq!(dec.decode_raw_u32().unwrap(), v);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn autoregressive_decoding_sees_previous_symbols() {
        // The cdf of each symbol is peaked on the previous symbol.
        let peaked = |prev: i32| {
            let mut pmf = vec![0.02; 10];
            pmf[prev.rem_euclid(10) as usize] = 0.82;
            build_cdf(&pmf, 0).unwrap()
        };
        let symbols = [3, 3, 4, 4, 4, 9, 0, 0, 1];
        let mut enc = RangeEncoder::new();
        let mut prev = 0;
        for &s in &symbols {
            let cdf = peaked(prev);
            enc.encode(&cdf, cdf.index_of(s).unwrap()).unwrap();
            prev = s;
        }
        let bytes = enc.finish();
        let out = decode_symbols_with(&bytes, symbols.len(), |_, seen| peaked(*seen.last().unwrap_or(&0))).unwrap();
        assert_eq!(out, symbols);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lossless_and_within_rate_bound(seed in any::<u64>(), len in 0usize..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cdfs: Vec<DiscretizedCdf> = (0..len).map(|_| random_cdf(&mut rng)).collect();
            let symbols: Vec<i32> = cdfs.iter().map(|c| sample(c, &mut rng)).collect();
            let bytes = encode_symbols(&symbols, &cdfs).unwrap();
            prop_assert_eq!(&decode_symbols(&bytes, &cdfs, len).unwrap(), &symbols);
            let ideal = ideal_bits(&symbols, &cdfs).unwrap();
            prop_assert!((bytes.len() * 8) as f64 <= ideal + 64.0);
            prop_assert_eq!(encode_symbols(&symbols, &cdfs).unwrap(), bytes);
        }
    }
}
