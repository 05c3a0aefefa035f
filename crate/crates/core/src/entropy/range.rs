//! Byte-oriented range coder with carry handling, plus the quantized CDF
//! tables and adaptive bit models that drive it.
//!
//! All symbol distributions use a fixed total mass of 2^16. The encoder and
//! decoder perform identical integer arithmetic, so a decode is exact for any
//! table and any symbol sequence: whatever was encoded comes back bit for
//! bit. Streams start with one padding byte emitted by the carry machinery.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Widest explicit symbol range a table will represent; values outside go
/// through the escape slot as raw 32-bit integers.
pub const MAX_EXPLICIT_SYMBOLS: usize = 4096;

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
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Encodes a symbol occupying `[cum, cum+freq)` out of 2^16.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += (r as u64) * (cum as u64);
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
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

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            range: u32::MAX,
            code: 0,
            buf,
            pos: 1, // skip the encoder's initial padding byte
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative slot of the pending symbol; pass to the table to find the
    /// symbol, then call [`Self::consume`] with that symbol's interval.
    pub fn decode_cum(&self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code / r).min(PROB_TOTAL - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Quantized CDF over an explicit integer range plus an escape slot.
///
/// Slot `i` (for `i < explicit_len`) covers value `min_v + i`; the final
/// slot is the escape. Every slot has mass ≥ 1 and the masses sum exactly
/// to 2^16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    pub min_v: i32,
    pub max_v: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from raw (unnormalized, nonnegative) masses for each
    /// value in `min_v..=max_v` plus an escape mass. `masses.len()` must be
    /// `max_v - min_v + 2`, escape last. If the explicit range is wider than
    /// [`MAX_EXPLICIT_SYMBOLS`] it is truncated at the top and the cut mass
    /// folds into the escape.
    pub fn from_masses(min_v: i32, max_v: i32, masses: &[f64]) -> Result<Self> {
        if max_v < min_v {
            return Err(Error::Entropy(format!(
                "empty symbol range {}..={}",
                min_v, max_v
            )));
        }
        let full = (max_v - min_v + 1) as usize;
        if masses.len() != full + 1 {
            return Err(Error::Entropy(format!(
                "expected {} masses, got {}",
                full + 1,
                masses.len()
            )));
        }
        if masses.iter().any(|&m| !m.is_finite() || m < 0.0) {
            return Err(Error::Entropy("mass must be finite and nonnegative".into()));
        }
        let explicit = full.min(MAX_EXPLICIT_SYMBOLS);
        let max_v = min_v + explicit as i32 - 1;
        let mut folded: Vec<f64> = masses[..explicit].to_vec();
        let tail: f64 = masses[explicit..].iter().sum();
        folded.push(tail);

        let n = folded.len();
        let total_raw: f64 = folded.iter().sum();
        let scale = if total_raw > 0.0 {
            PROB_TOTAL as f64 / total_raw
        } else {
            0.0
        };
        let mut q: Vec<u32> = folded
            .iter()
            .map(|&m| ((m * scale).floor() as u32).max(1))
            .collect();
        let mut sum: i64 = q.iter().map(|&v| v as i64).sum();
        // Rebalance to an exact total, preferring the largest slots so the
        // adjustment perturbs probabilities the least.
        while sum > PROB_TOTAL as i64 {
            let (i, _) = q
                .iter()
                .enumerate()
                .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
                .unwrap();
            debug_assert!(q[i] > 1, "cannot shrink table: too many symbols");
            if q[i] <= 1 {
                return Err(Error::Entropy(format!(
                    "symbol range {}..={} too wide for 16-bit mass",
                    min_v, max_v
                )));
            }
            q[i] -= 1;
            sum -= 1;
        }
        if sum < PROB_TOTAL as i64 {
            let (i, _) = q
                .iter()
                .enumerate()
                .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
                .unwrap();
            q[i] += (PROB_TOTAL as i64 - sum) as u32;
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0u32);
        for v in &q {
            cum.push(cum.last().unwrap() + v);
        }
        debug_assert_eq!(*cum.last().unwrap(), PROB_TOTAL);
        Ok(CdfTable { min_v, max_v, cum })
    }

    /// Number of values the table codes without escaping.
    pub fn explicit_len(&self) -> usize {
        self.cum.len() - 2
    }

    fn escape_slot(&self) -> usize {
        self.cum.len() - 2 // index of escape symbol = explicit_len
    }

    fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    pub fn encode_value(&self, enc: &mut RangeEncoder, v: i64) {
        let in_range = v >= self.min_v as i64 && v <= self.max_v as i64;
        if in_range {
            let slot = (v - self.min_v as i64) as usize;
            let (cum, freq) = self.interval(slot);
            enc.encode(cum, freq);
        } else {
            let (cum, freq) = self.interval(self.escape_slot());
            enc.encode(cum, freq);
            // Raw 32-bit offset-binary payload, two uniform 16-bit chunks.
            let u = (v - i32::MIN as i64) as u32;
            enc.encode(u >> 16, 1);
            enc.encode(u & 0xFFFF, 1);
        }
    }

    pub fn decode_value(&self, dec: &mut RangeDecoder) -> i64 {
        let dv = dec.decode_cum();
        // cum is strictly increasing; find the slot containing dv.
        let slot = self.cum.partition_point(|&c| c <= dv) - 1;
        let (cum, freq) = self.interval(slot);
        dec.consume(cum, freq);
        if slot == self.escape_slot() {
            let hi = dec.decode_cum();
            dec.consume(hi, 1);
            let lo = dec.decode_cum();
            dec.consume(lo, 1);
            ((hi << 16) | lo) as i64 + i32::MIN as i64
        } else {
            self.min_v as i64 + slot as i64
        }
    }

    /// Exact code length contribution of `v` in bits under this table
    /// (ignoring the coder's ≤ 2^-16 per-symbol truncation overhead).
    pub fn bits_of(&self, v: i64) -> f64 {
        let in_range = v >= self.min_v as i64 && v <= self.max_v as i64;
        let slot = if in_range {
            (v - self.min_v as i64) as usize
        } else {
            self.escape_slot()
        };
        let (_, freq) = self.interval(slot);
        let mut bits = -(freq as f64 / PROB_TOTAL as f64).log2();
        if !in_range {
            bits += 32.0;
        }
        bits
    }
}

/// Adaptive binary model: counts with halving, 16-bit probability.
#[derive(Debug, Clone)]
pub struct BitModel {
    c0: u32,
    c1: u32,
}

impl Default for BitModel {
    fn default() -> Self {
        BitModel { c0: 1, c1: 1 }
    }
}

impl BitModel {
    fn p1(&self) -> u32 {
        let p = ((self.c1 as u64) << PROB_BITS) / (self.c0 + self.c1) as u64;
        (p as u32).clamp(1, PROB_TOTAL - 1)
    }

    fn update(&mut self, bit: bool) {
        if bit {
            self.c1 += 1;
        } else {
            self.c0 += 1;
        }
        if self.c0 + self.c1 >= 1 << 12 {
            self.c0 = (self.c0 + 1) >> 1;
            self.c1 = (self.c1 + 1) >> 1;
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, bit: bool) {
        let f1 = self.p1();
        if bit {
            enc.encode(PROB_TOTAL - f1, f1);
        } else {
            enc.encode(0, PROB_TOTAL - f1);
        }
        self.update(bit);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> bool {
        let f1 = self.p1();
        let dv = dec.decode_cum();
        let bit = dv >= PROB_TOTAL - f1;
        if bit {
            dec.consume(PROB_TOTAL - f1, f1);
        } else {
            dec.consume(0, PROB_TOTAL - f1);
        }
        self.update(bit);
        bit
    }
}

/// Encodes one bit with a fixed probability `p1` of being 1. `p1` must come
/// from the same deterministic computation on both sides.
pub fn encode_bit_with_p(enc: &mut RangeEncoder, p1: f64, bit: bool) {
    let f1 = ((p1 * PROB_TOTAL as f64).round() as u32).clamp(1, PROB_TOTAL - 1);
    if bit {
        enc.encode(PROB_TOTAL - f1, f1);
    } else {
        enc.encode(0, PROB_TOTAL - f1);
    }
}

pub fn decode_bit_with_p(dec: &mut RangeDecoder, p1: f64) -> bool {
    let f1 = ((p1 * PROB_TOTAL as f64).round() as u32).clamp(1, PROB_TOTAL - 1);
    let bit = dec.decode_cum() >= PROB_TOTAL - f1;
    if bit {
        dec.consume(PROB_TOTAL - f1, f1);
    } else {
        dec.consume(0, PROB_TOTAL - f1);
    }
    bit
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skewed_table_round_trip() {
        let masses = vec![0.7, 0.2, 0.05, 0.04, 0.01];
        let table = CdfTable::from_masses(-2, 1, &masses).unwrap();
        let symbols: Vec<i64> = vec![-2, -2, 0, 1, -1, -2, 1, 0, 0, -2];
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            table.encode_value(&mut enc, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &symbols {
            assert_eq!(table.decode_value(&mut dec), s);
        }
    }

    #[test]
    fn escape_carries_out_of_range_values() {
        let table = CdfTable::from_masses(0, 3, &[1.0, 1.0, 1.0, 1.0, 0.01]).unwrap();
        let symbols: Vec<i64> = vec![2, -77, 3, 1_000_000, 0, i32::MAX as i64, i32::MIN as i64];
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            table.encode_value(&mut enc, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &symbols {
            assert_eq!(table.decode_value(&mut dec), s);
        }
    }

    #[test]
    fn all_mass_one_floor_is_respected() {
        // 4096 explicit symbols + escape with wildly skewed masses: every
        // slot still gets at least mass 1 and the total is exactly 2^16.
        let mut masses = vec![1e-12; 4097];
        masses[0] = 1.0;
        let table = CdfTable::from_masses(0, 4095, &masses).unwrap();
        assert_eq!(*table.cum.last().unwrap(), PROB_TOTAL);
        for w in table.cum.windows(2) {
            assert!(w[1] > w[0]);
        }
        // Even the least likely symbol round-trips.
        let mut enc = RangeEncoder::new();
        for s in [4095i64, 0, 2048, 4095] {
            table.encode_value(&mut enc, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for s in [4095i64, 0, 2048, 4095] {
            assert_eq!(table.decode_value(&mut dec), s);
        }
    }

    #[test]
    fn over_wide_range_truncates_into_escape() {
        let n = MAX_EXPLICIT_SYMBOLS + 100;
        let masses = vec![1.0; n + 1];
        let table = CdfTable::from_masses(0, n as i32 - 1, &masses).unwrap();
        assert_eq!(table.explicit_len(), MAX_EXPLICIT_SYMBOLS);
        assert_eq!(table.max_v, MAX_EXPLICIT_SYMBOLS as i32 - 1);
        // A truncated value survives via escape.
        let mut enc = RangeEncoder::new();
        table.encode_value(&mut enc, n as i64 - 1);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        assert_eq!(table.decode_value(&mut dec), n as i64 - 1);
    }

    #[test]
    fn random_tables_random_symbols_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let lo = rng.gen_range(-50i32..0);
            let hi = rng.gen_range(1i32..80);
            let n = (hi - lo + 1) as usize;
            let masses: Vec<f64> = (0..n + 1).map(|_| rng.gen::<f64>().powi(3)).collect();
            let table = CdfTable::from_masses(lo, hi, &masses).unwrap();
            let symbols: Vec<i64> = (0..2000)
                .map(|_| {
                    if rng.gen_bool(0.02) {
                        rng.gen_range(-1_000_000i64..1_000_000)
                    } else {
                        rng.gen_range(lo as i64..=hi as i64)
                    }
                })
                .collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                table.encode_value(&mut enc, s);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &s in &symbols {
                assert_eq!(table.decode_value(&mut dec), s);
            }
        }
    }

    #[test]
    fn code_length_tracks_information_content() {
        let masses = vec![0.9, 0.1, 0.0001];
        let table = CdfTable::from_masses(0, 1, &masses).unwrap();
        let mut enc = RangeEncoder::new();
        let n = 4000;
        let mut est = 0.0;
        for i in 0..n {
            let s = if i % 10 == 0 { 1 } else { 0 };
            table.encode_value(&mut enc, s);
            est += table.bits_of(s);
        }
        let bytes = enc.finish();
        let actual = bytes.len() as f64 * 8.0;
        assert!((actual - est).abs() < 0.01 * est + 64.0 * 8.0);
    }

    #[test]
    fn adaptive_bit_model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<bool> = (0..5000).map(|_| rng.gen_bool(0.83)).collect();
        let mut enc = RangeEncoder::new();
        let mut m = BitModel::default();
        for &b in &bits {
            m.encode(&mut enc, b);
        }
        let bytes = enc.finish();
        // Skew must compress below 1 bit per symbol.
        assert!((bytes.len() * 8) < bits.len() * 8 / 10 * 9);
        let mut dec = RangeDecoder::new(&bytes);
        let mut m = BitModel::default();
        for &b in &bits {
            assert_eq!(m.decode(&mut dec), b);
        }
    }

    #[test]
    fn fixed_probability_bits_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<(f64, bool)> = (0..3000)
            .map(|_| {
                let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
                (p, rng.gen_bool(p.clamp(0.0, 1.0)))
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &(p, b) in &data {
            encode_bit_with_p(&mut enc, p, b);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &(p, b) in &data {
            assert_eq!(decode_bit_with_p(&mut dec, p), b);
        }
    }

    #[test]
    fn empty_stream_decodes_nothing_gracefully() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert_eq!(bytes.len(), 5);
    }
}
