//! Adaptive binary range coder (LZMA style: 32-bit range, 11-bit probabilities).

use crate::error::{Error, Result};

const PROB_BITS: u32 = 11;
const PROB_ONE: u16 = 1 << PROB_BITS;
const ADAPT_SHIFT: u32 = 5;
const TOP: u32 = 1 << 24;

/// Probability that the next bit is 0, in units of 2⁻¹¹.
#[derive(Debug, Clone, Copy)]
pub struct BitModel(u16);

impl Default for BitModel {
    fn default() -> Self {
        BitModel(PROB_ONE / 2)
    }
}

impl BitModel {
    #[inline]
    fn update(&mut self, bit: bool) {
        if bit {
            self.0 -= self.0 >> ADAPT_SHIFT;
        } else {
            self.0 += (PROB_ONE - self.0) >> ADAPT_SHIFT;
        }
    }
}

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, model: &mut BitModel, bit: bool) {
        let bound = (self.range >> PROB_BITS) * model.0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut pending = self.cache;
            loop {
                self.out.push(pending.wrapping_add(carry));
                pending = 0xFF;
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

pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 {
            return Err(Error::decode("range-coded payload shorter than 5 bytes"));
        }
        if input[0] != 0 {
            return Err(Error::decode("range-coded payload must start with a zero byte"));
        }
        let code = input[1..5].iter().fold(0u32, |acc, &b| (acc << 8) | b as u32);
        Ok(Self { input, pos: 5, range: u32::MAX, code })
    }

    pub fn decode(&mut self, model: &mut BitModel) -> Result<bool> {
        let bound = (self.range >> PROB_BITS) * model.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        model.update(bit);
        while self.range < TOP {
            let byte = *self
                .input
                .get(self.pos)
                .ok_or_else(|| Error::decode("range-coded payload ended early"))?;
            self.pos += 1;
            self.range <<= 8;
            self.code = (self.code << 8) | byte as u32;
        }
        Ok(bit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_skewed_and_fair_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p_one in [0.0, 0.01, 0.3, 0.5, 0.97, 1.0] {
            let bits: Vec<bool> = (0..20_000).map(|_| rng.random_bool(p_one)).collect();
            let mut models = [BitModel::default(); 4];
            let mut enc = Encoder::new();
            for (i, &b) in bits.iter().enumerate() {
                enc.encode(&mut models[i % 4], b);
            }
            let bytes = enc.finish();
            let mut models = [BitModel::default(); 4];
            let mut dec = Decoder::new(&bytes).unwrap();
            for (i, &b) in bits.iter().enumerate() {
                assert_eq!(dec.decode(&mut models[i % 4]).unwrap(), b);
            }
            if p_one == 0.0 {
                assert!(bytes.len() < 100, "constant stream took {} bytes", bytes.len());
            }
        }
    }
}
