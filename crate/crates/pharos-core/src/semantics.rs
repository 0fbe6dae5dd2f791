//! Label semantics, pair weighting, and pharos-code generation (PGM).
//!
//! The pharos code for a query is the closed-form minimizer of the weighted
//! double-sum objective ψ over all 2^K codes: the sign of the weighted sum of
//! positive codes minus the weighted sum of negative codes. A brute-force
//! argmin over all codes is provided as an independence check for small K.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::hashcore::HashCode;
use crate::scalar::{real, Real};

/// Magic bytes of the `.phl` label file format.
pub const PHL_MAGIC: &[u8; 4] = b"PHL1";

/// A length-C 0/1 multi-label annotation with at least one active label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("label vector must have positive length"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("label entries must be 0 or 1"));
        }
        if bits.iter().all(|&b| b == 0) {
            return Err(Error::invalid("label vector must have at least one active label"));
        }
        Ok(LabelVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Number of active labels.
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Size of the label intersection.
    pub fn intersection(&self, other: &LabelVector) -> Result<usize> {
        self.check_same_len(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count())
    }

    /// True iff the two label sets share at least one label.
    pub fn shares_label(&self, other: &LabelVector) -> Result<bool> {
        Ok(self.intersection(other)? >= 1)
    }

    fn check_same_len(&self, other: &LabelVector) -> Result<()> {
        if self.bits.len() != other.bits.len() {
            return Err(Error::dimension(format!(
                "label lengths differ: {} vs {}",
                self.bits.len(),
                other.bits.len()
            )));
        }
        Ok(())
    }
}

/// Dice coefficient 2|y∩y′| / (|y|+|y′|), in [0,1].
pub fn dice_similarity<T: Real>(y: &LabelVector, y2: &LabelVector) -> Result<T> {
    let inter = y.intersection(y2)? as f64;
    let denom = (y.popcount() + y2.popcount()) as f64;
    Ok(real(2.0 * inter / denom))
}

/// Whether a pool item is a positive (shares a label) or negative sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Positive,
    Negative,
}

/// Pair weight from a similarity: positives get `s`, negatives `1 − s`.
pub fn pair_weights<T: Real>(s: T, role: Role) -> Result<T> {
    if !(s >= T::zero() && s <= T::one()) {
        return Err(Error::invalid(format!("similarity {s} outside [0,1]")));
    }
    Ok(match role {
        Role::Positive => s,
        Role::Negative => T::one() - s,
    })
}

/// Splits a pool into positive indices (share ≥1 label with the query) and
/// negative indices (share none).
pub fn partition_pool(
    query_label: &LabelVector,
    pool_labels: &[LabelVector],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, label) in pool_labels.iter().enumerate() {
        if query_label.shares_label(label)? {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    Ok((positives, negatives))
}

/// Indexed, weighted positive/negative pools over a shared code table.
#[derive(Debug, Clone)]
pub struct WeightedPool<'a, T: Real> {
    codes: &'a [HashCode],
    positives: Vec<(usize, T)>,
    negatives: Vec<(usize, T)>,
}

impl<'a, T: Real> WeightedPool<'a, T> {
    pub fn new(
        codes: &'a [HashCode],
        positives: Vec<(usize, T)>,
        negatives: Vec<(usize, T)>,
    ) -> Result<Self> {
        if positives.is_empty() && negatives.is_empty() {
            return Err(Error::invalid("pool must contain at least one sample"));
        }
        let k = codes
            .first()
            .map(HashCode::len)
            .ok_or_else(|| Error::invalid("pool code table is empty"))?;
        if codes.iter().any(|c| c.len() != k) {
            return Err(Error::dimension("mixed code lengths in pool table"));
        }
        for &(idx, w) in positives.iter().chain(&negatives) {
            if idx >= codes.len() {
                return Err(Error::invalid(format!(
                    "pool index {idx} out of range for {} codes",
                    codes.len()
                )));
            }
            if !(w >= T::zero()) {
                return Err(Error::invalid("pool weights must be nonnegative"));
            }
        }
        for &(i, _) in &positives {
            if negatives.iter().any(|&(j, _)| j == i) {
                return Err(Error::invalid(format!(
                    "index {i} appears in both positive and negative pools"
                )));
            }
        }
        Ok(WeightedPool { codes, positives, negatives })
    }

    /// Builds a Dice-weighted pool from labels: positives weighted by their
    /// Dice similarity to the query, negatives by one minus it.
    pub fn from_labels(
        codes: &'a [HashCode],
        pool_labels: &[LabelVector],
        query_label: &LabelVector,
    ) -> Result<Self> {
        if codes.len() != pool_labels.len() {
            return Err(Error::dimension(format!(
                "code table has {} rows but label table has {}",
                codes.len(),
                pool_labels.len()
            )));
        }
        let (pos_idx, neg_idx) = partition_pool(query_label, pool_labels)?;
        let mut positives = Vec::with_capacity(pos_idx.len());
        for i in pos_idx {
            let s = dice_similarity::<T>(query_label, &pool_labels[i])?;
            positives.push((i, pair_weights(s, Role::Positive)?));
        }
        let mut negatives = Vec::with_capacity(neg_idx.len());
        for j in neg_idx {
            let s = dice_similarity::<T>(query_label, &pool_labels[j])?;
            negatives.push((j, pair_weights(s, Role::Negative)?));
        }
        WeightedPool::new(codes, positives, negatives)
    }

    pub fn code_len(&self) -> usize {
        self.codes[0].len()
    }

    pub fn n_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn n_negative(&self) -> usize {
        self.negatives.len()
    }

    /// Per-coordinate sums of Eq-style weighted code difference. Each
    /// positive term carries the double-sum repetition factor N_n and each
    /// negative term N_p; when one side is empty the surviving single sum is
    /// used unscaled.
    fn coordinate_sums(&self) -> Vec<T> {
        let k = self.code_len();
        let (pos_factor, neg_factor) = self.double_sum_factors();
        let mut sums = vec![T::zero(); k];
        for &(i, w) in &self.positives {
            let code = &self.codes[i];
            for (c, s) in sums.iter_mut().enumerate() {
                *s += pos_factor * w * real::<T>(code.sign(c) as f64);
            }
        }
        for &(j, w) in &self.negatives {
            let code = &self.codes[j];
            for (c, s) in sums.iter_mut().enumerate() {
                *s -= neg_factor * w * real::<T>(code.sign(c) as f64);
            }
        }
        sums
    }

    fn double_sum_factors(&self) -> (T, T) {
        if self.positives.is_empty() || self.negatives.is_empty() {
            (T::one(), T::one())
        } else {
            (
                real(self.negatives.len() as f64),
                real(self.positives.len() as f64),
            )
        }
    }
}

/// A pharos code together with how it was produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PharosCode {
    pub code: HashCode,
    pub n_positive: usize,
    pub n_negative: usize,
    pub weight_scheme: WeightScheme,
    /// Number of coordinates whose weighted sum was exactly zero and fell
    /// back to the sign(0)=+1 rule.
    pub tie_count: usize,
}

/// How pool weights were assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Dice-coefficient similarity from labels.
    Dice,
    /// Label-free fallback: s_i = 1 for positives, s_j = 0 for negatives.
    Uniform,
}

/// Pharos Generation Method: `b★_k = sign(Σ_i w_i b_ik^(p) − Σ_j w_j b_jk^(n))`
/// with the double-sum repetition factors and sign(0) = +1.
pub fn pgm_pharos<T: Real>(pool: &WeightedPool<'_, T>, scheme: WeightScheme) -> Result<PharosCode> {
    let sums = pool.coordinate_sums();
    let tie_count = sums.iter().filter(|&&s| s == T::zero()).count();
    let code = crate::hashcore::sign_quantize(&sums)?;
    Ok(PharosCode {
        code,
        n_positive: pool.n_positive(),
        n_negative: pool.n_negative(),
        weight_scheme: scheme,
        tie_count,
    })
}

/// The double-sum pharos objective
/// `ψ(b) = ΣᵢΣⱼ [wᵢ D_H(b, bᵢ⁽ᵖ⁾) − wⱼ D_H(b, bⱼ⁽ⁿ⁾)]`,
/// with the empty-side convention documented on [`WeightedPool`].
pub fn psi_objective<T: Real>(b: &HashCode, pool: &WeightedPool<'_, T>) -> Result<T> {
    if b.len() != pool.code_len() {
        return Err(Error::dimension(format!(
            "code length {} does not match pool length {}",
            b.len(),
            pool.code_len()
        )));
    }
    let (pos_factor, neg_factor) = pool.double_sum_factors();
    let mut total = T::zero();
    for &(i, w) in &pool.positives {
        let d = real::<T>(b.hamming(&pool.codes[i])? as f64);
        total += pos_factor * w * d;
    }
    for &(j, w) in &pool.negatives {
        let d = real::<T>(b.hamming(&pool.codes[j])? as f64);
        total -= neg_factor * w * d;
    }
    Ok(total)
}

/// Exhaustive argmin of ψ over all 2^K codes; verification oracle for PGM.
/// Ties break toward the smallest code viewed as an unsigned integer in the
/// packed layout.
pub fn pharos_bruteforce<T: Real>(pool: &WeightedPool<'_, T>) -> Result<HashCode> {
    let k = pool.code_len();
    if k > 16 {
        return Err(Error::invalid(format!(
            "brute-force pharos limited to K ≤ 16, got {k}"
        )));
    }
    let mut best_code = None;
    let mut best_psi = T::infinity();
    for pattern in 0u64..(1u64 << k) {
        let code = HashCode::from_words(k, vec![pattern])?;
        let psi = psi_objective(&code, pool)?;
        if psi < best_psi {
            best_psi = psi;
            best_code = Some(code);
        }
    }
    Ok(best_code.expect("nonempty enumeration"))
}

/// Componentwise majority vote over a set of codes, sign(0) = +1. The P2P /
/// DHTA anchor code; equals PGM over positives only with uniform weights.
pub fn anchor_code(codes: &[HashCode]) -> Result<HashCode> {
    let k = match codes.first() {
        Some(c) => c.len(),
        None => return Err(Error::invalid("anchor code needs at least one input code")),
    };
    let mut sums = vec![0i64; k];
    for code in codes {
        if code.len() != k {
            return Err(Error::dimension("mixed code lengths in anchor input"));
        }
        for (c, s) in sums.iter_mut().enumerate() {
            *s += code.sign(c) as i64;
        }
    }
    let reals: Vec<f64> = sums.iter().map(|&s| s as f64).collect();
    crate::hashcore::sign_quantize(&reals)
}

/// A pool pre-aggregated by distinct label set, so deriving many pharos or
/// anchor codes against the same pool costs O(groups × K) per query rather
/// than O(pool × K). All samples sharing a label set also share their Dice
/// weight against any query, so only the per-group code sums are needed.
#[derive(Debug, Clone)]
pub struct GroupedPool {
    code_len: usize,
    /// (label set, member count, per-coordinate sign sums of the members).
    groups: Vec<(LabelVector, usize, Vec<i64>)>,
}

impl GroupedPool {
    pub fn build(codes: &[HashCode], labels: &[LabelVector]) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::dimension(format!(
                "code table has {} rows but label table has {}",
                codes.len(),
                labels.len()
            )));
        }
        let k = codes
            .first()
            .map(HashCode::len)
            .ok_or_else(|| Error::invalid("pool must contain at least one sample"))?;
        let mut index: std::collections::HashMap<Vec<u8>, usize> =
            std::collections::HashMap::new();
        let mut groups: Vec<(LabelVector, usize, Vec<i64>)> = Vec::new();
        for (code, label) in codes.iter().zip(labels) {
            if code.len() != k {
                return Err(Error::dimension("mixed code lengths in pool table"));
            }
            let g = *index.entry(label.bits().to_vec()).or_insert_with(|| {
                groups.push((label.clone(), 0, vec![0i64; k]));
                groups.len() - 1
            });
            let (_, count, sums) = &mut groups[g];
            *count += 1;
            for (c, s) in sums.iter_mut().enumerate() {
                *s += code.sign(c) as i64;
            }
        }
        Ok(GroupedPool { code_len: k, groups })
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Dice-weighted PGM pharos for one query label. Agrees with
    /// [`pgm_pharos`] over [`WeightedPool::from_labels`] on the same pool,
    /// up to floating-point summation order in the coordinate sums.
    pub fn pharos(&self, query: &LabelVector) -> Result<PharosCode> {
        let k = self.code_len;
        let mut pos = vec![0.0f64; k];
        let mut neg = vec![0.0f64; k];
        let mut n_pos = 0usize;
        let mut n_neg = 0usize;
        for (label, count, sums) in &self.groups {
            let s: f64 = dice_similarity(query, label)?;
            if query.shares_label(label)? {
                n_pos += count;
                let w = pair_weights(s, Role::Positive)?;
                for (c, acc) in pos.iter_mut().enumerate() {
                    *acc += w * sums[c] as f64;
                }
            } else {
                n_neg += count;
                let w = pair_weights(s, Role::Negative)?;
                for (c, acc) in neg.iter_mut().enumerate() {
                    *acc += w * sums[c] as f64;
                }
            }
        }
        // same double-sum convention as WeightedPool::coordinate_sums:
        // positives scaled by N_n, negatives by N_p, unscaled when one
        // side is empty
        let (pos_factor, neg_factor) = if n_pos == 0 || n_neg == 0 {
            (1.0, 1.0)
        } else {
            (n_neg as f64, n_pos as f64)
        };
        let sums: Vec<f64> = (0..k)
            .map(|c| pos_factor * pos[c] - neg_factor * neg[c])
            .collect();
        let tie_count = sums.iter().filter(|&&s| s == 0.0).count();
        let code = crate::hashcore::sign_quantize(&sums)?;
        Ok(PharosCode {
            code,
            n_positive: n_pos,
            n_negative: n_neg,
            weight_scheme: WeightScheme::Dice,
            tie_count,
        })
    }

    /// Majority-vote anchor over the positives; exactly equals
    /// [`anchor_code`] over the same members (integer arithmetic only).
    pub fn anchor(&self, query: &LabelVector) -> Result<HashCode> {
        let k = self.code_len;
        let mut sums = vec![0i64; k];
        let mut n_pos = 0usize;
        for (label, count, group_sums) in &self.groups {
            if query.shares_label(label)? {
                n_pos += count;
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += group_sums[c];
                }
            }
        }
        if n_pos == 0 {
            return Err(Error::invalid(
                "anchor code needs at least one positive pool sample",
            ));
        }
        let reals: Vec<f64> = sums.iter().map(|&s| s as f64).collect();
        crate::hashcore::sign_quantize(&reals)
    }
}

/// Writes labels in the `.phl` layout:
/// magic "PHL1" | C: u32 LE | N: u64 LE | N rows of C bytes (0/1).
pub fn write_labels<W: Write>(w: &mut W, labels: &[LabelVector]) -> Result<()> {
    let c = match labels.first() {
        Some(l) => l.len(),
        None => return Err(Error::invalid("cannot write empty label table")),
    };
    if labels.iter().any(|l| l.len() != c) {
        return Err(Error::dimension("mixed label lengths in table"));
    }
    w.write_all(PHL_MAGIC)?;
    w.write_all(&(c as u32).to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for l in labels {
        w.write_all(l.bits())?;
    }
    Ok(())
}

/// Reads a `.phl` label table.
pub fn read_labels<R: Read>(r: &mut R) -> Result<Vec<LabelVector>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(0, "truncated file"))?;
    if &magic != PHL_MAGIC {
        return Err(Error::format(0, "bad magic, expected PHL1"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| Error::format(4, "truncated file"))?;
    let c = u32::from_le_bytes(buf4) as usize;
    if c == 0 {
        return Err(Error::format(4, "label length must be positive"));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|_| Error::format(8, "truncated file"))?;
    let n = u64::from_le_bytes(buf8) as usize;
    let mut labels = Vec::with_capacity(n);
    let mut offset = 16u64;
    for _ in 0..n {
        let mut row = vec![0u8; c];
        r.read_exact(&mut row)
            .map_err(|_| Error::format(offset, "truncated file"))?;
        labels.push(LabelVector::new(row).map_err(|e| Error::format(offset, e.to_string()))?);
        offset += c as u64;
    }
    Ok(labels)
}
