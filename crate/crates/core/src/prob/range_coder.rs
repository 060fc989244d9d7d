//! Byte-oriented range coder over 16-bit frequency tables.
//!
//! Carry propagation uses a cached byte plus a run of pending 0xFF bytes.
//! The always-zero first output byte is omitted from the stream.

use super::pmf::{QuantizedPmf, PRECISION};
use crate::error::{QarvError, Result};

const TOP: u64 = 1 << 24;
const RANGE_INIT: u64 = 0xFFFF_FFFF;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    started: bool,
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
            range: RANGE_INIT,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: i32, pmf: &QuantizedPmf) -> Result<()> {
        if !pmf.contains(symbol) {
            return Err(QarvError::SymbolOutOfRange {
                symbol,
                min: pmf.n_min(),
                max: pmf.n_max(),
            });
        }
        let (start, freq) = pmf.interval(symbol);
        let r = self.range >> PRECISION;
        self.low += r * start as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            code: 0,
            range: RANGE_INIT,
            bytes,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or(QarvError::CorruptStream)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, pmf: &QuantizedPmf) -> Result<i32> {
        let r = self.range >> PRECISION;
        let target = self.code / r;
        if target >= 1 << PRECISION {
            return Err(QarvError::CorruptStream);
        }
        let symbol = pmf.lookup(target as u32);
        let (start, freq) = pmf.interval(symbol);
        self.code -= r * start as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.code = ((self.code << 8) | self.next_byte()? as u64) & 0xFFFF_FFFF;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encodes `symbols[i]` with `pmfs[i]`.
pub fn rc_encode<'p>(
    symbols: &[i32],
    pmfs: impl IntoIterator<Item = &'p QuantizedPmf>,
) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    let mut pmfs = pmfs.into_iter();
    for &s in symbols {
        let pmf = pmfs
            .next()
            .ok_or_else(|| QarvError::InvalidArgument("fewer PMFs than symbols".into()))?;
        enc.encode(s, pmf)?;
    }
    Ok(enc.finish())
}

/// Decodes one symbol per PMF.
pub fn rc_decode<'p>(
    bytes: &[u8],
    pmfs: impl IntoIterator<Item = &'p QuantizedPmf>,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    pmfs.into_iter().map(|p| dec.decode(p)).collect()
}

/// Σ −log2(freq/total) in bits.
pub fn ideal_bits<'p>(symbols: &[i32], pmfs: impl IntoIterator<Item = &'p QuantizedPmf>) -> f64 {
    symbols.iter().zip(pmfs).map(|(&s, p)| p.bits(s)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::pmf::{pmf_for_sigma, real_pmf, N_MAX, N_MIN};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(pmf: &QuantizedPmf, rng: &mut impl Rng) -> i32 {
        pmf.lookup(rng.random_range(0..1u32 << PRECISION))
    }

    #[test]
    fn empty_sequence() {
        let bytes = rc_encode(&[], std::iter::empty()).unwrap();
        assert_eq!(bytes.len(), 4);
        assert!(rc_decode(&bytes, std::iter::empty()).unwrap().is_empty());
    }

    #[test]
    fn ten_thousand_unit_sigma_symbols() {
        let pmf = pmf_for_sigma(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let symbols: Vec<i32> = (0..10_000).map(|_| sample(&pmf, &mut rng)).collect();
        let pmfs = vec![&pmf; symbols.len()];
        let bytes = rc_encode(&symbols, pmfs.iter().copied()).unwrap();
        assert_eq!(rc_decode(&bytes, pmfs.iter().copied()).unwrap(), symbols);

        let ideal = ideal_bits(&symbols, pmfs.iter().copied());
        // Entropy of the σ=1 discretized Gaussian is about 2.1 bits.
        let entropy: f64 = real_pmf(1.0, N_MIN, N_MAX)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum();
        assert!((ideal / 10_000.0 - entropy).abs() < 0.05);
        assert!((bytes.len() as f64) <= ideal / 8.0 * 1.005 + 32.0);
        assert!(bytes.len() as f64 * 8.0 >= ideal);
    }

    #[test]
    fn out_of_alphabet_symbol_rejected() {
        let pmf = pmf_for_sigma(1.0);
        assert!(matches!(
            rc_encode(&[N_MAX + 1], [&pmf]),
            Err(QarvError::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn truncated_stream_detected() {
        let pmf = pmf_for_sigma(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let symbols: Vec<i32> = (0..2000).map(|_| sample(&pmf, &mut rng)).collect();
        let bytes = rc_encode(&symbols, vec![&pmf; 2000]).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            rc_decode(cut, vec![&pmf; 2000]),
            Err(QarvError::CorruptStream)
        ));
    }

    #[test]
    fn extreme_symbols_round_trip() {
        let tight = pmf_for_sigma(0.01);
        let symbols = [N_MIN, N_MAX, 0, N_MAX, N_MIN, 1, -1];
        let bytes = rc_encode(&symbols, vec![&tight; symbols.len()]).unwrap();
        assert_eq!(
            rc_decode(&bytes, vec![&tight; symbols.len()]).unwrap(),
            symbols
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_with_per_symbol_sigma(seed: u64, len in 0usize..3000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pmfs: Vec<QuantizedPmf> = (0..len)
                .map(|_| pmf_for_sigma(10f64.powf(rng.random_range(-2.0..2.0))))
                .collect();
            let symbols: Vec<i32> = pmfs.iter().map(|p| sample(p, &mut rng)).collect();
            let bytes = rc_encode(&symbols, &pmfs).unwrap();
            prop_assert_eq!(rc_decode(&bytes, &pmfs).unwrap(), symbols.clone());
            let ideal = ideal_bits(&symbols, &pmfs);
            let actual = bytes.len() as f64 * 8.0;
            prop_assert!(actual >= ideal - 1e-9);
            if len >= 1000 {
                prop_assert!(actual - ideal <= 8.0 * 32.0 + 0.005 * ideal);
            }
        }
    }
}
