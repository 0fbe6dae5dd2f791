//! PGD attack engine and the pharos-guided loss family.
//!
//! All variants share one projected-gradient loop over the L∞ ε-ball
//! intersected with [0,1]^D; they differ only in the loss on the network
//! output h and in how the guiding code b★ is chosen.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashcore::{read_codes, sign_quantize, write_codes, HashCode};
use crate::model::HashNet;
use crate::scalar::{real, Real};

/// An exact rational perturbation budget, e.g. `8/255`. Kept as a reduced
/// fraction so manifests can echo it without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget(Ratio<i64>);

impl Budget {
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if den == 0 {
            return Err(Error::config("budget denominator must be nonzero"));
        }
        Ok(Budget(Ratio::new(num, den)))
    }

    pub fn from_u8_scale(num: i64) -> Self {
        Budget(Ratio::new(num, 255))
    }

    pub fn value<T: Real>(&self) -> T {
        real(*self.0.numer() as f64 / *self.0.denom() as f64)
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// Accepts `"8/255"`, integers, and finite decimals (`"0.05"` parses as
    /// the exact fraction 1/20).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((num, den)) = s.split_once('/') {
            let n: i64 = num.trim().parse().map_err(|_| bad_budget(s))?;
            let d: i64 = den.trim().parse().map_err(|_| bad_budget(s))?;
            return Budget::new(n, d);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 12 || frac.chars().any(|c| !c.is_ascii_digit()) {
                return Err(bad_budget(s));
            }
            let negative = int.trim_start().starts_with('-');
            let int_part: i64 = if int.is_empty() || int == "-" {
                0
            } else {
                int.parse().map_err(|_| bad_budget(s))?
            };
            let frac_part: i64 = if frac.is_empty() {
                0
            } else {
                frac.parse().map_err(|_| bad_budget(s))?
            };
            let scale = 10i64.pow(frac.len() as u32);
            let signed_frac = if negative { -frac_part } else { frac_part };
            return Budget::new(int_part * scale + signed_frac, scale);
        }
        let n: i64 = s.parse().map_err(|_| bad_budget(s))?;
        Budget::new(n, 1)
    }
}

fn bad_budget(s: &str) -> Error {
    Error::config(format!("cannot parse budget {s:?}; expected p/q, integer, or decimal"))
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attack loss / targeting variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    /// Masked and weighted pharos-guided loss (the default attack).
    Pga,
    /// Plain code-alignment pharos loss.
    PgaDagger,
    /// Weighted but unmasked ablation variant.
    PgaWeighted,
    /// Push away from the sample's own code.
    Hag,
    /// Pull toward an anchor code (P2P/DHTA style).
    AnchorTargeted,
}

impl AttackMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackMethod::Pga => "pga",
            AttackMethod::PgaDagger => "pga-dagger",
            AttackMethod::PgaWeighted => "pga-weighted",
            AttackMethod::Hag => "hag",
            AttackMethod::AnchorTargeted => "anchor-targeted",
        }
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pga" => Ok(AttackMethod::Pga),
            "pga-dagger" => Ok(AttackMethod::PgaDagger),
            "pga-weighted" => Ok(AttackMethod::PgaWeighted),
            "hag" => Ok(AttackMethod::Hag),
            "anchor-targeted" => Ok(AttackMethod::AnchorTargeted),
            other => Err(Error::config(format!("unknown attack method {other:?}"))),
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// PGD hyperparameters. Defaults: ε = 8/255, η = 1/255, T = 100, t = −0.8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: Budget,
    pub eta: Budget,
    pub steps: usize,
    /// Convergence margin t, constrained to (−1, 0).
    pub margin: f64,
    pub method: AttackMethod,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: Budget::from_u8_scale(8),
            eta: Budget::from_u8_scale(1),
            steps: 100,
            margin: -0.8,
            method: AttackMethod::Pga,
            seed: 42,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let eps: f64 = self.epsilon.value();
        let eta: f64 = self.eta.value();
        if !(eta > 0.0 && eta <= eps) {
            return Err(Error::config(format!(
                "step size {} must satisfy 0 < η ≤ ε = {}",
                self.eta, self.epsilon
            )));
        }
        if !(-1.0 < self.margin && self.margin < 0.0) {
            return Err(Error::config(format!(
                "margin t = {} must lie in (-1, 0)",
                self.margin
            )));
        }
        Ok(())
    }
}

/// The plain alignment loss `L_a = −(1/K)·(b★)ᵀ h`.
pub fn loss_pga_dagger<T: Real>(h: &[T], pharos: &HashCode) -> Result<T> {
    check_dims(h, pharos)?;
    let k = real::<T>(h.len() as f64);
    let dot: T = h
        .iter()
        .enumerate()
        .map(|(i, &v)| v * real::<T>(pharos.sign(i) as f64))
        .sum();
    Ok(-dot / k)
}

/// Per-bit alignment `u = b★ ∘ h`.
pub fn bit_alignment<T: Real>(h: &[T], pharos: &HashCode) -> Result<Vec<T>> {
    check_dims(h, pharos)?;
    Ok(h.iter()
        .enumerate()
        .map(|(i, &v)| v * real::<T>(pharos.sign(i) as f64))
        .collect())
}

/// Adaptive per-bit weights: `ω_k = u_k − 2t` when `u_k > t`, else `−t²`.
pub fn weight_vector<T: Real>(u: &[T], margin: f64) -> Result<Vec<T>> {
    check_margin(margin)?;
    let t = real::<T>(margin);
    Ok(u.iter()
        .map(|&uk| if uk > t { uk - (t + t) } else { -t * t })
        .collect())
}

/// Mask of unconverged bits: `m_k = 1` iff `u_k > t`; also returns
/// `π = Σ m_k`.
pub fn mask_vector<T: Real>(u: &[T], margin: f64) -> Result<(Vec<u8>, usize)> {
    check_margin(margin)?;
    let t = real::<T>(margin);
    let mask: Vec<u8> = u.iter().map(|&uk| u8::from(uk > t)).collect();
    let pi = mask.iter().filter(|&&m| m == 1).count();
    Ok((mask, pi))
}

/// The default PgA loss `L_a = −(1/π)·(m ∘ ω)ᵀ u`, defined as 0 when every
/// bit has converged past the margin (π = 0).
pub fn loss_pga<T: Real>(h: &[T], pharos: &HashCode, margin: f64) -> Result<T> {
    let u = bit_alignment(h, pharos)?;
    let omega = weight_vector(&u, margin)?;
    let (mask, pi) = mask_vector(&u, margin)?;
    if pi == 0 {
        return Ok(T::zero());
    }
    let dot: T = u
        .iter()
        .zip(&omega)
        .zip(&mask)
        .filter(|&(_, &m)| m == 1)
        .map(|((&uk, &wk), _)| wk * uk)
        .sum();
    Ok(-dot / real::<T>(pi as f64))
}

/// The unmasked ablation variant `L_a = −(1/K)·ωᵀu`.
pub fn loss_weighted<T: Real>(h: &[T], pharos: &HashCode, margin: f64) -> Result<T> {
    let u = bit_alignment(h, pharos)?;
    let omega = weight_vector(&u, margin)?;
    let k = real::<T>(h.len() as f64);
    let dot: T = u.iter().zip(&omega).map(|(&uk, &wk)| wk * uk).sum();
    Ok(-dot / k)
}

/// Which of the three loss forms drives the PGD loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Dagger,
    Weighted,
    Masked,
}

impl LossKind {
    fn for_method(method: AttackMethod) -> LossKind {
        match method {
            AttackMethod::Pga => LossKind::Masked,
            AttackMethod::PgaWeighted => LossKind::Weighted,
            AttackMethod::PgaDagger | AttackMethod::Hag | AttackMethod::AnchorTargeted => {
                LossKind::Dagger
            }
        }
    }

    fn loss<T: Real>(&self, h: &[T], pharos: &HashCode, margin: f64) -> Result<T> {
        match self {
            LossKind::Dagger => loss_pga_dagger(h, pharos),
            LossKind::Weighted => loss_weighted(h, pharos, margin),
            LossKind::Masked => loss_pga(h, pharos, margin),
        }
    }

    /// Gradient of the loss with respect to h. ω and m are treated as
    /// constants within a step, so masked coordinates get exactly zero.
    fn gradient<T: Real>(&self, h: &[T], pharos: &HashCode, margin: f64) -> Result<Vec<T>> {
        let k = h.len();
        match self {
            LossKind::Dagger => {
                let scale = -T::one() / real::<T>(k as f64);
                Ok((0..k).map(|i| scale * real::<T>(pharos.sign(i) as f64)).collect())
            }
            LossKind::Weighted => {
                let u = bit_alignment(h, pharos)?;
                let omega = weight_vector(&u, margin)?;
                let scale = -T::one() / real::<T>(k as f64);
                Ok((0..k)
                    .map(|i| scale * omega[i] * real::<T>(pharos.sign(i) as f64))
                    .collect())
            }
            LossKind::Masked => {
                let u = bit_alignment(h, pharos)?;
                let omega = weight_vector(&u, margin)?;
                let (mask, pi) = mask_vector(&u, margin)?;
                if pi == 0 {
                    return Ok(vec![T::zero(); k]);
                }
                let scale = -T::one() / real::<T>(pi as f64);
                Ok((0..k)
                    .map(|i| {
                        if mask[i] == 1 {
                            scale * omega[i] * real::<T>(pharos.sign(i) as f64)
                        } else {
                            T::zero()
                        }
                    })
                    .collect())
            }
        }
    }
}

/// One attacked sample: the perturbed input, the loss trace over the PGD
/// iterations, its final hash code, and the achieved L∞ distance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvResult<T: Real> {
    pub x_adv: Vec<T>,
    pub loss_trace: Vec<T>,
    pub final_code: HashCode,
    pub linf: T,
}

fn rng_for(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample_index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Projected gradient ascent on the configured loss: uniform init inside
/// the ε-ball, T signed-gradient steps (sign(0) = 0), projection into the
/// ε-ball around x intersected with [0,1]^D.
pub fn pgd_attack<T: Real>(
    net: &HashNet<T>,
    x: &[T],
    pharos: &HashCode,
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    pgd_attack_indexed(net, x, pharos, cfg, 0)
}

/// Same as [`pgd_attack`] with an explicit per-sample RNG stream index, so
/// batched attacks are deterministic regardless of worker scheduling.
pub fn pgd_attack_indexed<T: Real>(
    net: &HashNet<T>,
    x: &[T],
    pharos: &HashCode,
    cfg: &AttackConfig,
    sample_index: u64,
) -> Result<AdvResult<T>> {
    cfg.validate()?;
    if x.len() != net.input_dim() {
        return Err(Error::dimension(format!(
            "input has {} components, model expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    if pharos.len() != net.output_dim() {
        return Err(Error::dimension(format!(
            "pharos code length {} does not match model output {}",
            pharos.len(),
            net.output_dim()
        )));
    }
    if x.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::invalid("attack input must lie in [0,1]^D"));
    }

    let eps: T = cfg.epsilon.value();
    let eta: T = cfg.eta.value();
    let eps_f64: f64 = cfg.epsilon.value();
    let kind = LossKind::for_method(cfg.method);

    let mut rng = rng_for(cfg.seed, sample_index);
    let mut x_adv: Vec<T> = x
        .iter()
        .map(|&xi| {
            let r: T = real(rng.gen_range(-eps_f64..=eps_f64));
            clamp01(xi + r)
        })
        .collect();

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut h = net.forward(&x_adv)?;
    trace.push(kind.loss(&h, pharos, cfg.margin)?);

    for _ in 0..cfg.steps {
        let upstream = kind.gradient(&h, pharos, cfg.margin)?;
        let grad = net.input_gradient(&x_adv, &upstream)?;
        for (d, g) in grad.iter().enumerate() {
            // ascent step; sign(0)=0 keeps flat coordinates in place
            let step = if *g > T::zero() {
                eta
            } else if *g < T::zero() {
                -eta
            } else {
                T::zero()
            };
            let lo = clamp01(x[d] - eps);
            let hi = clamp01(x[d] + eps);
            x_adv[d] = (x_adv[d] + step).max(lo).min(hi);
        }
        h = net.forward(&x_adv)?;
        trace.push(kind.loss(&h, pharos, cfg.margin)?);
    }

    let linf = x_adv
        .iter()
        .zip(x)
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max);
    Ok(AdvResult {
        final_code: sign_quantize(&h)?,
        x_adv,
        loss_trace: trace,
        linf,
    })
}

/// HAG-style non-targeted attack: push away from the sample's own code by
/// running the plain alignment loss with `b★ = sign(f(x))`.
pub fn attack_hag<T: Real>(net: &HashNet<T>, x: &[T], cfg: &AttackConfig) -> Result<AdvResult<T>> {
    attack_hag_indexed(net, x, cfg, 0)
}

pub fn attack_hag_indexed<T: Real>(
    net: &HashNet<T>,
    x: &[T],
    cfg: &AttackConfig,
    sample_index: u64,
) -> Result<AdvResult<T>> {
    let own = sign_quantize(&net.forward(x)?)?;
    let cfg = AttackConfig { method: AttackMethod::Hag, ..cfg.clone() };
    pgd_attack_indexed(net, x, &own, &cfg, sample_index)
}

/// Targeted attack toward an anchor code: minimizing D_H(anchor, F(x′)) is
/// maximizing distance from the negated anchor.
pub fn attack_targeted<T: Real>(
    net: &HashNet<T>,
    x: &[T],
    anchor: &HashCode,
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    attack_targeted_indexed(net, x, anchor, cfg, 0)
}

pub fn attack_targeted_indexed<T: Real>(
    net: &HashNet<T>,
    x: &[T],
    anchor: &HashCode,
    cfg: &AttackConfig,
    sample_index: u64,
) -> Result<AdvResult<T>> {
    let cfg = AttackConfig { method: AttackMethod::AnchorTargeted, ..cfg.clone() };
    pgd_attack_indexed(net, x, &anchor.negate(), &cfg, sample_index)
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn check_margin(margin: f64) -> Result<()> {
    if !(-1.0 < margin && margin < 0.0) {
        return Err(Error::config(format!("margin t = {margin} must lie in (-1, 0)")));
    }
    Ok(())
}

fn check_dims<T: Real>(h: &[T], pharos: &HashCode) -> Result<()> {
    if h.len() != pharos.len() {
        return Err(Error::dimension(format!(
            "output has {} components but code has {} bits",
            h.len(),
            pharos.len()
        )));
    }
    Ok(())
}

/// Header of the `.pha` adversarial output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvFileHeader {
    pub n: u64,
    pub d: u64,
    pub epsilon: Budget,
    pub eta: Budget,
    pub steps: usize,
    pub margin: f64,
    pub method: AttackMethod,
    pub seed: u64,
}

/// Writes attacked samples in the `.pha` layout: length-prefixed JSON
/// header | N rows of D f32 LE | N final codes as an embedded `.phc` block.
pub fn write_adversarial<W: Write, T: Real>(
    w: &mut W,
    header: &AdvFileHeader,
    results: &[AdvResult<T>],
) -> Result<()> {
    if results.len() as u64 != header.n {
        return Err(Error::dimension("header N does not match result count"));
    }
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for r in results {
        if r.x_adv.len() as u64 != header.d {
            return Err(Error::dimension("header D does not match sample width"));
        }
        for v in &r.x_adv {
            let f = v.to_f64().unwrap() as f32;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    let codes: Vec<HashCode> = results.iter().map(|r| r.final_code.clone()).collect();
    write_codes(w, &codes)?;
    Ok(())
}

/// Reads a `.pha` file back as (header, rows, codes).
pub fn read_adversarial<R: Read>(r: &mut R) -> Result<(AdvFileHeader, Vec<Vec<f32>>, Vec<HashCode>)> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| Error::format(0, "truncated file"))?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(4, "truncated header"))?;
    let header: AdvFileHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(4, format!("bad header json: {e}")))?;
    let mut rows = Vec::with_capacity(header.n as usize);
    let mut offset = (4 + header_len) as u64;
    for _ in 0..header.n {
        let mut row = Vec::with_capacity(header.d as usize);
        for _ in 0..header.d {
            r.read_exact(&mut buf4)
                .map_err(|_| Error::format(offset, "truncated sample rows"))?;
            row.push(f32::from_le_bytes(buf4));
            offset += 4;
        }
        rows.push(row);
    }
    let codes = read_codes(r)?;
    if codes.len() as u64 != header.n {
        return Err(Error::format(offset, "code count does not match header"));
    }
    Ok((header, rows, codes))
}
