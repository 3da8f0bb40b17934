use crate::error::{invalid, Result};

use super::sign_bit;

pub const WORD_BITS: usize = 64;

/// Number of 64-bit words needed for `n_bits` bits.
#[inline]
pub fn words_for(n_bits: usize) -> usize {
    n_bits.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(n_bits: usize) -> u64 {
    match n_bits % WORD_BITS {
        0 => !0,
        r => (1u64 << r) - 1,
    }
}

/// Packed bits in 64-bit words, LSB first, with zeroed padding.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitBuffer {
    n_bits: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitBuffer").field("n_bits", &self.n_bits).field("ones", &self.count_ones()).finish()
    }
}

impl BitBuffer {
    pub fn zeros(n_bits: usize) -> Self {
        Self { n_bits, words: vec![0; words_for(n_bits)] }
    }

    pub fn ones(n_bits: usize) -> Self {
        let mut words = vec![!0u64; words_for(n_bits)];
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(n_bits);
        }
        Self { n_bits, words }
    }

    /// Wraps raw words, rejecting a wrong word count or set padding bits.
    pub fn from_words(n_bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(n_bits) {
            return Err(invalid(format!("{} bits need {} words, got {}", n_bits, words_for(n_bits), words.len())));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(n_bits) != 0 {
                return Err(invalid("padding bits beyond the logical length are set"));
            }
        }
        Ok(Self { n_bits, words })
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut n_bits = 0;
        for bit in bits {
            if n_bits % WORD_BITS == 0 {
                words.push(0);
            }
            if bit {
                *words.last_mut().unwrap() |= 1 << (n_bits % WORD_BITS);
            }
            n_bits += 1;
        }
        Self { n_bits, words }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_bits
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n_bits == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Mutable word access. Callers must keep the padding bits zero.
    #[inline]
    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    #[inline]
    pub fn get(&self, b: usize) -> bool {
        assert!(b < self.n_bits, "bit {b} out of range for {} bits", self.n_bits);
        (self.words[b / WORD_BITS] >> (b % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, b: usize, value: bool) {
        assert!(b < self.n_bits, "bit {b} out of range for {} bits", self.n_bits);
        let mask = 1u64 << (b % WORD_BITS);
        let w = &mut self.words[b / WORD_BITS];
        if value {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bitwise complement over the logical bits; padding stays zero.
    pub fn not(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.n_bits);
        }
        Self { n_bits: self.n_bits, words }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.n_bits).map(move |b| self.get(b))
    }

    /// Decodes to ±1 values.
    pub fn to_pm1(&self) -> Vec<f64> {
        self.iter().map(|b| if b { 1.0 } else { -1.0 }).collect()
    }
}

/// Binarizes `values` with `sign` (0 maps to +1) into a packed buffer.
pub fn pack_signs<T: Copy + Into<f64>>(values: &[T]) -> Result<BitBuffer> {
    let mut out = BitBuffer::zeros(values.len());
    for (chunk, word) in values.chunks(WORD_BITS).zip(out.words.iter_mut()) {
        let mut acc = 0u64;
        for (i, &v) in chunk.iter().enumerate() {
            let v: f64 = v.into();
            if !v.is_finite() {
                return Err(invalid(format!("non-finite value {v} cannot be binarized")));
            }
            acc |= (sign_bit(v) as u64) << i;
        }
        *word = acc;
    }
    Ok(out)
}

/// ±1 dot product of the first `n` bits: `n - 2 * popcount(a ^ b)`.
pub fn dot_pm1(a: &BitBuffer, b: &BitBuffer, n: usize) -> Result<i64> {
    if a.len() < n || b.len() < n {
        return Err(invalid(format!(
            "dot over {n} bits needs both operands that long (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let full = n / WORD_BITS;
    let mut diff = super::popcnt::xor_popcount(&a.words[..full], &b.words[..full]) as i64;
    if n % WORD_BITS != 0 {
        let m = tail_mask(n);
        diff += ((a.words[full] ^ b.words[full]) & m).count_ones() as i64;
    }
    Ok(n as i64 - 2 * diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pack_signs_zero_is_positive() {
        let b = pack_signs(&[0.0, -0.5, 3.0, -1e-9]).unwrap();
        assert_eq!(b.words(), &[0b0101]);
        assert!(b.get(0) && !b.get(1) && b.get(2) && !b.get(3));
    }

    #[test]
    fn pack_signs_negative_zero_is_positive() {
        assert!(pack_signs(&[-0.0f64]).unwrap().get(0));
    }

    #[test]
    fn pack_signs_all_negative() {
        let b = pack_signs(&vec![-1.0f64; 128]).unwrap();
        assert_eq!(b.count_ones(), 0);
        assert_eq!(b.words().len(), 2);
    }

    #[test]
    fn pack_signs_rejects_non_finite() {
        assert!(pack_signs(&[1.0, f64::NAN]).is_err());
        assert!(pack_signs(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn pack_signs_random_matches_per_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = pack_signs(&v).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert_eq!(b.get(i), *x >= 0.0);
        }
        // padding stays clear
        assert_eq!(b.words()[15] >> (1000 % 64), 0);
    }

    #[test]
    fn dot_extremes() {
        let a = BitBuffer::ones(128);
        assert_eq!(dot_pm1(&a, &a, 128).unwrap(), 128);
        assert_eq!(dot_pm1(&a, &a.not(), 128).unwrap(), -128);
    }

    #[test]
    fn dot_random_matches_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = BitBuffer::from_bools((0..257).map(|_| rng.gen::<bool>()));
        let b = BitBuffer::from_bools((0..257).map(|_| rng.gen::<bool>()));
        let expect: f64 = a.to_pm1().iter().zip(b.to_pm1()).map(|(x, y)| x * y).sum();
        assert_eq!(dot_pm1(&a, &b, 257).unwrap() as f64, expect);
        // a shorter window ignores the tail
        let expect_100: f64 = a.to_pm1()[..100].iter().zip(&b.to_pm1()[..100]).map(|(x, y)| x * y).sum();
        assert_eq!(dot_pm1(&a, &b, 100).unwrap() as f64, expect_100);
    }

    #[test]
    fn dot_length_mismatch() {
        let a = BitBuffer::zeros(64);
        let b = BitBuffer::zeros(128);
        assert!(dot_pm1(&a, &b, 128).is_err());
    }

    #[test]
    fn from_words_checks_padding() {
        assert!(BitBuffer::from_words(3, vec![0b1000]).is_err());
        assert!(BitBuffer::from_words(3, vec![0b111]).is_ok());
        assert!(BitBuffer::from_words(65, vec![0]).is_err());
    }

    #[test]
    fn complement_keeps_padding_zero() {
        let b = BitBuffer::zeros(70).not();
        assert_eq!(b.count_ones(), 70);
    }
}
