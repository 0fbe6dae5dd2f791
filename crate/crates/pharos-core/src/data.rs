//! Synthetic multi-label dataset generation, deterministic splits, and the
//! `.phf` dataset file format.
//!
//! Each item draws a label set (class on with probability `label_density`,
//! redrawn while empty) and a feature vector built from the mean of its
//! active class prototypes plus Gaussian noise, clamped into [0,1].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::semantics::{read_labels, write_labels, LabelVector};

/// Magic bytes of the `.phf` dataset file format.
pub const PHF_MAGIC: &[u8; 4] = b"PHF1";

/// Generator recipe. The defaults are the toy benchmark recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_db: usize,
    pub n_query: usize,
    pub label_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            classes: 8,
            dim: 64,
            n_train: 2000,
            n_db: 8000,
            n_query: 500,
            label_density: 0.15,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.dim < self.classes {
            return Err(Error::config("feature dim must be at least the class count"));
        }
        if self.n_train == 0 || self.n_db == 0 || self.n_query == 0 {
            return Err(Error::config("split sizes must be positive"));
        }
        if self.n_train > self.n_db {
            return Err(Error::config("train split is drawn from the database split"));
        }
        if !(self.label_density > 0.0 && self.label_density <= 1.0) {
            return Err(Error::config("label density must lie in (0,1]"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise sigma must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Generated dataset: database rows first, then query rows; the train split
/// is a recorded subset of database indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: GenParams,
    /// Row-major (n_db + n_query) × dim features in [0,1].
    pub features: Vec<f32>,
    pub labels: Vec<LabelVector>,
    /// Indices into the database rows.
    pub train_indices: Vec<usize>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.params.dim..(i + 1) * self.params.dim]
    }

    pub fn database_rows(&self) -> std::ops::Range<usize> {
        0..self.params.n_db
    }

    pub fn query_rows(&self) -> std::ops::Range<usize> {
        self.params.n_db..self.params.n_db + self.params.n_query
    }

    /// Features of one split flattened row-major, converted to `T`.
    pub fn split_features<T: crate::scalar::Real>(&self, rows: impl Iterator<Item = usize>) -> Vec<T> {
        let mut out = Vec::new();
        for i in rows {
            out.extend(self.row(i).iter().map(|&v| crate::scalar::real::<T>(v as f64)));
        }
        out
    }

    pub fn split_labels(&self, rows: impl Iterator<Item = usize>) -> Vec<LabelVector> {
        rows.map(|i| self.labels[i].clone()).collect()
    }
}

/// Amplitude of the class signal around the 0.5 offset. Chosen so a small
/// L∞ budget (a few steps of 1/255) is commensurate with the per-coordinate
/// signal and attacks are meaningful at desk scale.
pub const SIGNAL_SCALE: f64 = 0.25;

/// The class prototypes for a recipe: `classes` unit-norm rows of `dim`
/// reals, drawn once from the seed. Regenerable from the params alone.
pub fn class_prototypes(params: &GenParams) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..params.dim).map(|_| gaussian(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Box-Muller standard normal; kept local so generation is bit-stable
/// independent of any distribution crate.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Generates the synthetic dataset; fully determined by `params`.
pub fn gen_synthetic(params: &GenParams) -> Result<Dataset> {
    params.validate()?;
    let prototypes = class_prototypes(params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // burn the prototype draws so item sampling continues the same stream
    for _ in 0..params.classes * params.dim {
        let _ = gaussian(&mut rng);
    }

    let n = params.n_db + params.n_query;
    let d = params.dim;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let bits = loop {
            let bits: Vec<u8> = (0..params.classes)
                .map(|_| u8::from(rng.gen::<f64>() < params.label_density))
                .collect();
            if bits.iter().any(|&b| b == 1) {
                break bits;
            }
        };
        let active: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(c, _)| c)
            .collect();
        let mut mean = vec![0.0f64; d];
        for &c in &active {
            for (m, p) in mean.iter_mut().zip(&prototypes[c]) {
                *m += p;
            }
        }
        mean.iter_mut().for_each(|m| *m /= active.len() as f64);
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            mean.iter_mut().for_each(|m| *m /= norm);
        }
        for m in &mean {
            let v = 0.5 + SIGNAL_SCALE * m + params.noise_sigma * gaussian(&mut rng);
            features.push(v.clamp(0.0, 1.0) as f32);
        }
        labels.push(LabelVector::new(bits)?);
    }

    // train split: partial Fisher-Yates over the database ids
    let mut ids: Vec<usize> = (0..params.n_db).collect();
    for i in 0..params.n_train {
        let j = rng.gen_range(i..params.n_db);
        ids.swap(i, j);
    }
    let mut train_indices = ids[..params.n_train].to_vec();
    train_indices.sort_unstable();

    Ok(Dataset {
        params: params.clone(),
        features,
        labels,
        train_indices,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    n: u64,
    d: u64,
    c: u64,
    params: GenParams,
    train_indices: Vec<usize>,
    /// SHA-256 of the payload (features then labels), hex.
    checksum: String,
}

/// Writes the `.phf` layout: magic | u32 LE header length | JSON header |
/// f32 LE row-major features | labels in the `.phl` layout.
pub fn save_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let mut payload = Vec::with_capacity(ds.features.len() * 4);
    for v in &ds.features {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_labels(&mut payload, &ds.labels)?;
    let checksum = hex_digest(&payload);
    let header = DatasetHeader {
        n: ds.n_rows() as u64,
        d: ds.params.dim as u64,
        c: ds.params.classes as u64,
        params: ds.params.clone(),
        train_indices: ds.train_indices.clone(),
        checksum,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(PHF_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    Ok(())
}

/// Reads and validates a `.phf` file.
pub fn load_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(0, "truncated file"))?;
    if &magic != PHF_MAGIC {
        return Err(Error::format(0, "bad magic, expected PHF1"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| Error::format(4, "truncated file"))?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(8, "truncated header"))?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(8, format!("bad header json: {e}")))?;

    let n = header.n as usize;
    let d = header.d as usize;
    if d != header.params.dim || n != header.params.n_db + header.params.n_query {
        return Err(Error::format(8, "header dims disagree with generator params"));
    }
    let payload_offset = (8 + header_len) as u64;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|_| Error::format(payload_offset, "truncated payload"))?;
    let expected_len = n * d * 4;
    if payload.len() < expected_len {
        return Err(Error::format(
            payload_offset + payload.len() as u64,
            "truncated feature block",
        ));
    }
    if hex_digest(&payload) != header.checksum {
        return Err(Error::format(payload_offset, "payload checksum mismatch"));
    }
    let mut features = Vec::with_capacity(n * d);
    for chunk in payload[..expected_len].chunks_exact(4) {
        features.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let labels = read_labels(&mut &payload[expected_len..]).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset: payload_offset + expected_len as u64 + offset,
            msg,
        },
        other => other,
    })?;
    if labels.len() != n || labels[0].len() != header.c as usize {
        return Err(Error::format(payload_offset, "label block dims disagree with header"));
    }
    Ok(Dataset {
        params: header.params,
        features,
        labels,
        train_indices: header.train_indices,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Exports rows as CSV with columns `f0..f{D-1},l0..l{C-1}`.
pub fn export_csv<W: Write>(w: W, features: &[f32], labels: &[LabelVector], dim: usize) -> Result<()> {
    if features.len() != labels.len() * dim {
        return Err(Error::dimension("features do not match labels × dim"));
    }
    let classes = labels.first().map(|l| l.len()).unwrap_or(0);
    let mut writer = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.extend((0..classes).map(|i| format!("l{i}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
    for (i, label) in labels.iter().enumerate() {
        let mut record: Vec<String> = features[i * dim..(i + 1) * dim]
            .iter()
            .map(|v| v.to_string())
            .collect();
        record.extend(label.bits().iter().map(|b| b.to_string()));
        writer
            .write_record(&record)
            .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Imports a CSV written by [`export_csv`]; returns row-major features and
/// labels.
pub fn import_csv<R: Read>(r: R) -> Result<(Vec<f32>, Vec<LabelVector>, usize)> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader
        .headers()
        .map_err(|e| Error::invalid(format!("csv read: {e}")))?
        .clone();
    let dim = headers.iter().filter(|h| h.starts_with('f')).count();
    let classes = headers.iter().filter(|h| h.starts_with('l')).count();
    if dim == 0 || classes == 0 {
        return Err(Error::invalid("csv must have f* feature and l* label columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::invalid(format!("csv row {row}: {e}")))?;
        if record.len() != dim + classes {
            return Err(Error::invalid(format!(
                "csv row {row} has {} fields, expected {}",
                record.len(),
                dim + classes
            )));
        }
        for field in record.iter().take(dim) {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::invalid(format!("csv row {row}: bad feature {field:?}")))?;
            features.push(v);
        }
        let bits: Vec<u8> = record
            .iter()
            .skip(dim)
            .map(|field| {
                field
                    .parse::<u8>()
                    .map_err(|_| Error::invalid(format!("csv row {row}: bad label {field:?}")))
            })
            .collect::<Result<_>>()?;
        labels.push(LabelVector::new(bits)?);
    }
    Ok((features, labels, dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> GenParams {
        GenParams {
            classes: 4,
            dim: 8,
            n_train: 20,
            n_db: 50,
            n_query: 10,
            label_density: 0.3,
            noise_sigma: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = tiny_params();
        let a = gen_synthetic(&p).unwrap();
        let b = gen_synthetic(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn features_in_unit_interval_labels_nonzero() {
        let ds = gen_synthetic(&tiny_params()).unwrap();
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.labels.iter().all(|l| l.popcount() >= 1));
        assert_eq!(ds.n_rows(), 60);
        assert_eq!(ds.train_indices.len(), 20);
        assert!(ds.train_indices.iter().all(|&i| i < 50));
    }

    #[test]
    fn zero_noise_single_label_items_identical() {
        let p = GenParams { noise_sigma: 0.0, ..tiny_params() };
        let ds = gen_synthetic(&p).unwrap();
        let singles: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| ds.labels[i].popcount() == 1)
            .collect();
        for w in singles.windows(2) {
            let (a, b) = (w[0], w[1]);
            if ds.labels[a] == ds.labels[b] {
                assert_eq!(ds.row(a), ds.row(b));
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(gen_synthetic(&GenParams { classes: 1, ..tiny_params() }).is_err());
        assert!(gen_synthetic(&GenParams { dim: 2, ..tiny_params() }).is_err());
        assert!(gen_synthetic(&GenParams { label_density: 0.0, ..tiny_params() }).is_err());
        assert!(gen_synthetic(&GenParams { n_train: 100, ..tiny_params() }).is_err());
    }

    #[test]
    fn phf_roundtrip_byte_identical() {
        let ds = gen_synthetic(&tiny_params()).unwrap();
        let mut buf = Vec::new();
        save_dataset(&mut buf, &ds).unwrap();
        let back = load_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut buf2 = Vec::new();
        save_dataset(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn phf_truncation_and_corruption() {
        let ds = gen_synthetic(&tiny_params()).unwrap();
        let mut buf = Vec::new();
        save_dataset(&mut buf, &ds).unwrap();

        let mut short = buf.clone();
        short.truncate(buf.len() - 5);
        assert!(matches!(
            load_dataset(&mut short.as_slice()),
            Err(Error::Format { .. })
        ));

        let mut corrupt = buf.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 1;
        assert!(matches!(
            load_dataset(&mut corrupt.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn csv_hand_fixture() {
        let text = "f0,f1,l0,l1\n0.25,0.5,1,0\n0.75,1.0,0,1\n0.1,0.2,1,1\n";
        let (features, labels, dim) = import_csv(text.as_bytes()).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(features, vec![0.25, 0.5, 0.75, 1.0, 0.1, 0.2]);
        assert_eq!(labels[2].bits(), &[1, 1]);

        let mut out = Vec::new();
        export_csv(&mut out, &features, &labels, dim).unwrap();
        let (f2, l2, d2) = import_csv(out.as_slice()).unwrap();
        assert_eq!((f2, l2, d2), (features, labels, dim));
    }

    #[test]
    fn prototypes_are_unit_norm_and_stable() {
        let p = tiny_params();
        let protos = class_prototypes(&p);
        assert_eq!(protos.len(), 4);
        for v in &protos {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(protos, class_prototypes(&p));
    }
}
