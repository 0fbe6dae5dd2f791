//! Binary hash codes over {−1,+1} with exact Hamming arithmetic.
//!
//! Codes are bit-packed into 64-bit words, little-endian bit order within
//! each word, `+1 ↦ 1` and `−1 ↦ 0`. Unused high bits of the last word are
//! always zero, so equal codes are byte-equal.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Maximum supported code length in bits.
pub const MAX_BITS: usize = 4096;

/// Magic bytes of the `.phc` code file format.
pub const PHC_MAGIC: &[u8; 4] = b"PHC1";

/// A length-K vector over {−1,+1}, bit-packed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    len: usize,
    words: Vec<u64>,
}

#[inline]
fn words_for(len: usize) -> usize {
    (len + 63) / 64
}

impl HashCode {
    /// Builds a code from ±1 signs.
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        check_len(signs.len())?;
        let mut words = vec![0u64; words_for(signs.len())];
        for (k, &s) in signs.iter().enumerate() {
            match s {
                1 => words[k / 64] |= 1u64 << (k % 64),
                -1 => {}
                other => {
                    return Err(Error::invalid(format!(
                        "sign at position {k} is {other}, expected -1 or +1"
                    )))
                }
            }
        }
        Ok(HashCode { len: signs.len(), words })
    }

    /// Builds a code directly from packed words; trailing bits must be zero.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        check_len(len)?;
        if words.len() != words_for(len) {
            return Err(Error::dimension(format!(
                "expected {} words for {} bits, got {}",
                words_for(len),
                len,
                words.len()
            )));
        }
        let tail = len % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::invalid("nonzero padding bits in last word"));
        }
        Ok(HashCode { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Sign at position `k`, as +1 or −1.
    #[inline]
    pub fn sign(&self, k: usize) -> i8 {
        debug_assert!(k < self.len);
        if self.words[k / 64] >> (k % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Unpacks into a ±1 sign vector.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|k| self.sign(k)).collect()
    }

    /// Elementwise sign flip.
    pub fn negate(&self) -> HashCode {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let tail = self.len % 64;
        if tail != 0 {
            let last = words.len() - 1;
            words[last] &= (1u64 << tail) - 1;
        }
        HashCode { len: self.len, words }
    }

    /// Number of disagreeing positions; equals `(K − inner)/2` exactly.
    pub fn hamming(&self, other: &HashCode) -> Result<u32> {
        self.check_same_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }

    /// Inner product Σ a_k·b_k, via popcount: `K − 2·disagreements`.
    pub fn inner(&self, other: &HashCode) -> Result<i64> {
        let d = self.hamming(other)? as i64;
        Ok(self.len as i64 - 2 * d)
    }

    fn check_same_len(&self, other: &HashCode) -> Result<()> {
        if self.len != other.len {
            return Err(Error::dimension(format!(
                "code lengths differ: {} vs {}",
                self.len, other.len
            )));
        }
        Ok(())
    }
}

fn check_len(len: usize) -> Result<()> {
    if len == 0 || len > MAX_BITS {
        return Err(Error::invalid(format!(
            "code length {len} outside [1, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Quantizes real network outputs to a hash code; `sign(0) = +1`.
pub fn sign_quantize<T: Real>(h: &[T]) -> Result<HashCode> {
    check_len(h.len())?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in quantization input"));
    }
    let mut words = vec![0u64; words_for(h.len())];
    for (k, &v) in h.iter().enumerate() {
        if v >= T::zero() {
            words[k / 64] |= 1u64 << (k % 64);
        }
    }
    Ok(HashCode { len: h.len(), words })
}

/// Writes codes in the `.phc` layout:
/// magic "PHC1" | K: u32 LE | N: u64 LE | N rows of ceil(K/64) u64 LE words.
pub fn write_codes<W: Write>(w: &mut W, codes: &[HashCode]) -> Result<()> {
    let k = match codes.first() {
        Some(c) => c.len(),
        None => return Err(Error::invalid("cannot write empty code table")),
    };
    if codes.iter().any(|c| c.len() != k) {
        return Err(Error::dimension("mixed code lengths in table"));
    }
    w.write_all(PHC_MAGIC)?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(codes.len() as u64).to_le_bytes())?;
    for c in codes {
        for word in &c.words {
            w.write_all(&word.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a `.phc` code table.
pub fn read_codes<R: Read>(r: &mut R) -> Result<Vec<HashCode>> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, 0)?;
    if &magic != PHC_MAGIC {
        return Err(Error::format(0, "bad magic, expected PHC1"));
    }
    let mut buf4 = [0u8; 4];
    read_exact_at(r, &mut buf4, 4)?;
    let k = u32::from_le_bytes(buf4) as usize;
    check_len(k).map_err(|_| Error::format(4, format!("code length {k} outside [1, {MAX_BITS}]")))?;
    let mut buf8 = [0u8; 8];
    read_exact_at(r, &mut buf8, 8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    let nw = words_for(k);
    let mut codes = Vec::with_capacity(n);
    let mut offset = 16u64;
    for _ in 0..n {
        let mut words = Vec::with_capacity(nw);
        for _ in 0..nw {
            read_exact_at(r, &mut buf8, offset)?;
            words.push(u64::from_le_bytes(buf8));
            offset += 8;
        }
        codes.push(
            HashCode::from_words(k, words)
                .map_err(|e| Error::format(offset, e.to_string()))?,
        );
    }
    Ok(codes)
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(offset, "truncated file"))
}
