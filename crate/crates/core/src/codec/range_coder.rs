//! 64-bit carry-less range coder (cache + pending-0xFF carry propagation) over
//! `SymbolModel` frequency tables. Payload layout: `[checksum byte][coded bytes]`.

use super::entropy::{SymbolModel, FREQ_BITS, FREQ_TOTAL};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;

/// Allowance for the checksum byte and flush bytes on top of the summed code lengths.
pub const CODER_OVERHEAD_BITS: f64 = 64.0;

fn checksum_update(h: &mut crc32fast::Hasher, symbol: i32) {
    h.update(&symbol.to_le_bytes());
}

pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
    crc: crc32fast::Hasher,
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
            range: u64::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
            crc: crc32fast::Hasher::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            // the leading cache byte can never receive a carry
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u8;
        if self.low < 0xFF00_0000_0000_0000 || carry != 0 {
            let cache = self.cache;
            self.emit(cache.wrapping_add(carry));
            for _ in 1..self.pending {
                self.emit(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = ((self.low >> 56) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & ((1u128 << 56) - 1)) << 8;
    }

    pub fn encode(&mut self, symbol: i32, model: &SymbolModel) -> Result<()> {
        let (cum, freq) = model.interval(symbol)?;
        let r = self.range >> FREQ_BITS;
        self.low += r as u128 * cum as u128;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        checksum_update(&mut self.crc, symbol);
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let mask = (1u128 << 56) - 1;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        self.shift_low();
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        let mut payload = Vec::with_capacity(self.out.len() + 1);
        payload.push(self.crc.finalize() as u8);
        payload.extend(self.out);
        payload
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    expected: u8,
    crc: crc32fast::Hasher,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> Result<Self> {
        let (&expected, data) = payload
            .split_first()
            .ok_or_else(|| Error::CorruptPayload("empty payload".into()))?;
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
            expected,
            crc: crc32fast::Hasher::new(),
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, model: &SymbolModel) -> Result<i32> {
        let r = self.range >> FREQ_BITS;
        let target = self.code / r;
        if target >= FREQ_TOTAL as u64 {
            return Err(Error::CorruptPayload("code value outside the coding interval".into()));
        }
        let (symbol, cum, freq) = model.lookup(target as u32);
        if freq == 0 {
            return Err(Error::CorruptPayload("decoded a zero-probability symbol".into()));
        }
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u64;
        }
        checksum_update(&mut self.crc, symbol);
        Ok(symbol)
    }

    /// Verify the checksum over everything decoded so far.
    pub fn finish(self) -> Result<()> {
        // the encoder flushes a value within 2^56 of the final interval base
        if self.code >= TOP {
            return Err(Error::CorruptPayload("stream does not end on a flush boundary".into()));
        }
        let got = self.crc.finalize() as u8;
        if got != self.expected {
            return Err(Error::CorruptPayload(format!(
                "checksum mismatch: stored {:#04x}, decoded {got:#04x}",
                self.expected
            )));
        }
        Ok(())
    }
}

pub fn range_encode(symbols: &[i32], model: &SymbolModel) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(s, model)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(payload: &[u8], count: usize, model: &SymbolModel) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload)?;
    let out = (0..count).map(|_| dec.decode(model)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::entropy::{gaussian_model, symbol_bits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(model: &SymbolModel, n: usize, rng: &mut impl Rng) -> Vec<i32> {
        let cdf: Vec<f64> = model
            .pmf()
            .iter()
            .scan(0.0, |a, p| {
                *a += p;
                Some(*a)
            })
            .collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                model.min_symbol() + cdf.partition_point(|&c| c < u).min(cdf.len() - 1) as i32
            })
            .collect()
    }

    #[test]
    fn empty_stream() {
        let m = gaussian_model(1.0).unwrap();
        let bytes = range_encode(&[], &m).unwrap();
        assert!(bytes.len() <= 8, "{}", bytes.len());
        assert!(range_decode(&bytes, 0, &m).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_and_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [0.3, 2.0, 25.0] {
            let m = gaussian_model(scale).unwrap();
            let s = sample(&m, 10_000, &mut rng);
            let bytes = range_encode(&s, &m).unwrap();
            assert_eq!(range_decode(&bytes, s.len(), &m).unwrap(), s);
            let h = symbol_bits(&s, &m).unwrap();
            let measured = 8.0 * bytes.len() as f64;
            assert!(measured <= h + 64.0 + 0.001 * h, "scale {scale}: {measured} vs {h}");
            assert!(bytes.len() as f64 <= (h / 8.0).ceil() + 8.0);
        }
    }

    #[test]
    fn uniform_bytes_cost_one_byte_each() {
        let m = SymbolModel::uniform(0, 256).unwrap();
        let s: Vec<i32> = (0..1000).map(|i| (i * 37 + 11) % 256).collect();
        let bytes = range_encode(&s, &m).unwrap();
        assert!(bytes.len() <= 1000 + 2);
        assert_eq!(range_decode(&bytes, 1000, &m).unwrap(), s);
    }

    #[test]
    fn carries_propagate() {
        // a heavily skewed model drives `low` through long 0xFF runs
        let m = SymbolModel::from_pmf(0, vec![1e-7, 1.0 - 2e-7, 1e-7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s: Vec<i32> = (0..2000)
                .map(|_| if rng.random::<f64>() < 0.001 { 2 } else { 1 })
                .collect();
            let bytes = range_encode(&s, &m).unwrap();
            assert_eq!(range_decode(&bytes, s.len(), &m).unwrap(), s);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = gaussian_model(3.0).unwrap();
        let s = sample(&m, 500, &mut rng);
        let bytes = range_encode(&s, &m).unwrap();
        let (mut detected, mut silent) = (0, 0);
        for _ in 0..2000 {
            let mut bad = bytes.clone();
            let i = rng.random_range(0..bad.len());
            bad[i] ^= rng.random_range(1..=255u8);
            match range_decode(&bad, s.len(), &m) {
                Err(_) => detected += 1,
                Ok(out) if out != s => silent += 1,
                Ok(_) => {}
            }
        }
        // one checksum byte plus the flush check leaves a small residual miss rate
        assert!(silent <= 10, "{silent} silent corruptions");
        assert!(detected >= 1990, "{detected}");
        assert!(range_decode(&[], 0, &m).is_err());
    }

    #[test]
    fn out_of_alphabet_symbol_is_rejected() {
        let m = gaussian_model(1.0).unwrap();
        assert!(matches!(range_encode(&[128], &m), Err(Error::SymbolOutOfRange { .. })));
    }
}
