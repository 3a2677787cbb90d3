//! On-disk formats: paired embeddings (`SSBP`), checkpoints (`SSCK`),
//! standalone matrices (`SSMX`), and JSON sidecars for ground truth, labels
//! and reports. All binary integers and floats are little-endian. Byte
//! layouts are documented in `docs/formats.md`.
//!
//! Every decoder works on an in-memory byte slice and validates lengths
//! before allocating, so it is safe to feed untrusted input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::{GroundTruth, PairedEmbeddings, SupportSet};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, to_rows, Matrix};
use crate::model::{BatchNormState, SsaeParams, Vector};
use crate::trainer::TrainConfig;

pub const PAIRS_MAGIC: [u8; 4] = *b"SSBP";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const MATRIX_MAGIC: [u8; 4] = *b"SSMX";
pub const FORMAT_VERSION: u32 = 1;
pub const PAIRS_HEADER_LEN: usize = 24;
pub const FLAG_GROUND_TRUTH: u32 = 1;

const GROUND_TRUTH_VERSION: u32 = 1;
const LABELS_VERSION: u32 = 1;
const CHECKPOINT_NORM_TOL: f64 = 1e-4;

/// Serde adapter storing a matrix as a list of rows.
pub mod matrix_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        from_rows(&rows, cols).ok_or_else(|| serde::de::Error::custom("ragged matrix rows"))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedFile {
                what: self.what,
                record: self.pos as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or(Error::TruncatedFile { what: self.what, record: self.pos as u64 })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::schema(
                self.what,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn row_major(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Paired embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairFileHeader {
    pub version: u32,
    pub embed_dim: u32,
    pub num_pairs: u64,
    pub flags: u32,
}

impl PairFileHeader {
    pub fn has_ground_truth(&self) -> bool {
        self.flags & FLAG_GROUND_TRUTH != 0
    }

    fn record_len(&self) -> usize {
        2 * self.embed_dim as usize * 4
    }
}

/// `<stem>.gt.json` next to a pair file.
pub fn sidecar_path(pairs_path: &Path) -> PathBuf {
    pairs_path.with_extension("gt.json")
}

/// `<stem>.labels.json` next to a pair file.
pub fn labels_path(pairs_path: &Path) -> PathBuf {
    pairs_path.with_extension("labels.json")
}

pub fn encode_pairs(pairs: &PairedEmbeddings, flags: u32) -> Result<Vec<u8>> {
    let d = pairs.embed_dim();
    let n = pairs.len();
    if d == 0 || n == 0 {
        return Err(Error::EmptyInput("pair file needs at least one pair of width >= 1"));
    }
    let embed_dim = u32::try_from(d).map_err(|_| Error::InvalidConfig("embedding too wide".into()))?;
    let mut out = Vec::with_capacity(PAIRS_HEADER_LEN + n * 2 * d * 4);
    out.extend_from_slice(&PAIRS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&embed_dim.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for i in 0..n {
        for m in [&pairs.z, &pairs.z_tilde] {
            for j in 0..d {
                out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pair_header(bytes: &[u8]) -> Result<PairFileHeader> {
    let mut r = Reader::new(bytes, "pair header");
    r.magic(PAIRS_MAGIC)?;
    r.version()?;
    let embed_dim = r.u32()?;
    let num_pairs = r.u64()?;
    let flags = r.u32()?;
    if embed_dim == 0 {
        return Err(Error::schema("header.embed_dim", "must be >= 1"));
    }
    if num_pairs == 0 {
        return Err(Error::schema("header.num_pairs", "must be >= 1"));
    }
    Ok(PairFileHeader {
        version: FORMAT_VERSION,
        embed_dim,
        num_pairs,
        flags,
    })
}

pub fn decode_pairs(bytes: &[u8]) -> Result<(PairFileHeader, PairedEmbeddings)> {
    let header = decode_pair_header(bytes)?;
    let body = &bytes[PAIRS_HEADER_LEN..];
    let rec = header.record_len();
    let available = (body.len() / rec) as u64;
    if available < header.num_pairs {
        return Err(Error::TruncatedFile {
            what: "pair records",
            record: available,
        });
    }
    let n = header.num_pairs as usize;
    if body.len() != n * rec {
        return Err(Error::schema(
            "pair records",
            format!("{} trailing bytes", body.len() - n * rec),
        ));
    }
    let d = header.embed_dim as usize;
    let mut z = Matrix::zeros(n, d);
    let mut zt = Matrix::zeros(n, d);
    for (i, record) in body.chunks_exact(rec).enumerate() {
        for (j, c) in record.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64;
            if j < d {
                z[(i, j)] = v;
            } else {
                zt[(i, j - d)] = v;
            }
        }
    }
    let pairs = PairedEmbeddings::new(z, zt)?;
    Ok((header, pairs))
}

pub fn write_pairs(path: &Path, pairs: &PairedEmbeddings, with_ground_truth: bool) -> Result<()> {
    let flags = if with_ground_truth { FLAG_GROUND_TRUTH } else { 0 };
    write_atomic(path, &encode_pairs(pairs, flags)?)
}

/// Reads a pair file; fails with `MissingSidecar` when the header promises
/// a ground-truth sidecar that does not exist.
pub fn read_pairs(path: &Path) -> Result<(PairFileHeader, PairedEmbeddings)> {
    let (header, pairs) = decode_pairs(&read_file(path)?)?;
    if header.has_ground_truth() && !sidecar_path(path).exists() {
        return Err(Error::MissingSidecar(sidecar_path(path)));
    }
    Ok((header, pairs))
}

pub fn read_pair_header(path: &Path) -> Result<PairFileHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(PAIRS_HEADER_LEN);
    std::io::Read::by_ref(&mut f)
        .take(PAIRS_HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode_pair_header(&buf)
}

use std::io::Read as _;

// ---------------------------------------------------------------------------
// Ground truth sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthFile {
    version: u32,
    num_concepts: usize,
    delta_c: Vec<Vec<f64>>,
    supports: Vec<Vec<usize>>,
    mixing: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entangler: Option<Vec<Vec<f64>>>,
}

fn matrix_field(rows: &[Vec<f64>], cols: usize, field: &str) -> Result<Matrix> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::schema(
                format!("{field}[{i}]"),
                format!("row has {} entries, expected {cols}", r.len()),
            ));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::schema(format!("{field}[{i}][{j}]"), "non-finite value"));
        }
    }
    Ok(from_rows(rows, cols).expect("rows checked"))
}

pub fn encode_ground_truth(truth: &GroundTruth) -> Result<Vec<u8>> {
    let file = GroundTruthFile {
        version: GROUND_TRUTH_VERSION,
        num_concepts: truth.num_concepts(),
        delta_c: to_rows(&truth.delta_c),
        supports: truth.supports.iter().map(|s| s.indices().to_vec()).collect(),
        mixing: to_rows(&truth.mixing),
        entangler: truth.entangler.as_ref().map(to_rows),
    };
    Ok(serde_json::to_vec(&file)?)
}

pub fn decode_ground_truth(bytes: &[u8]) -> Result<GroundTruth> {
    let file: GroundTruthFile = serde_json::from_slice(bytes)?;
    if file.version != GROUND_TRUTH_VERSION {
        return Err(Error::VersionMismatch {
            expected: GROUND_TRUTH_VERSION,
            found: file.version,
        });
    }
    let v = file.num_concepts;
    if v == 0 {
        return Err(Error::schema("num_concepts", "must be >= 1"));
    }
    let delta_c = matrix_field(&file.delta_c, v, "delta_c")?;
    let supports = file
        .supports
        .iter()
        .enumerate()
        .map(|(i, s)| SupportSet::new(s.iter().copied()).map_err(|_| Error::schema(format!("supports[{i}]"), "empty support")))
        .collect::<Result<Vec<_>>>()?;
    let mixing = matrix_field(&file.mixing, v, "mixing")?;
    if mixing.nrows() == 0 {
        return Err(Error::schema("mixing", "no rows"));
    }
    let entangler = match &file.entangler {
        Some(rows) => Some(matrix_field(rows, mixing.nrows(), "entangler")?),
        None => None,
    };
    let truth = GroundTruth {
        delta_c,
        supports,
        mixing,
        entangler,
    };
    truth.validate()?;
    Ok(truth)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_atomic(path, &encode_ground_truth(truth)?)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    decode_ground_truth(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Labels sidecar (pairs tagged with the concepts that vary in them)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLabel {
    pub varying: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub version: u32,
    pub concepts: Vec<String>,
    pub pairs: Vec<PairLabel>,
}

impl Labels {
    pub fn new(concepts: Vec<String>, pairs: Vec<PairLabel>) -> Self {
        Self {
            version: LABELS_VERSION,
            concepts,
            pairs,
        }
    }

    /// The single varying concept of each pair, or `None` for multi-concept pairs.
    pub fn single_concept(&self) -> Vec<Option<usize>> {
        self.pairs
            .iter()
            .map(|p| match p.varying.as_slice() {
                [k] => Some(*k),
                _ => None,
            })
            .collect()
    }
}

pub fn decode_labels(bytes: &[u8]) -> Result<Labels> {
    let labels: Labels = serde_json::from_slice(bytes)?;
    if labels.version != LABELS_VERSION {
        return Err(Error::VersionMismatch {
            expected: LABELS_VERSION,
            found: labels.version,
        });
    }
    let c = labels.concepts.len();
    for (i, p) in labels.pairs.iter().enumerate() {
        if let Some(&k) = p.varying.iter().find(|&&k| k >= c) {
            return Err(Error::schema(
                format!("pairs[{i}].varying"),
                format!("concept {k} out of range for {c} concepts"),
            ));
        }
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &Labels) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Labels> {
    decode_labels(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: SsaeParams,
    pub bn: BatchNormState,
    pub lambda: f64,
    pub seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&ck.config)?;
    let d = ck.params.embed_dim();
    let k = ck.params.latent_dim();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    put_f64s(&mut out, row_major(&ck.params.w_e));
    put_f64s(&mut out, ck.params.b_e.iter().copied());
    put_f64s(&mut out, row_major(&ck.params.w_d));
    put_f64s(&mut out, ck.params.b_d.iter().copied());
    out.push(u8::from(ck.bn.enabled));
    put_f64s(&mut out, [ck.bn.momentum]);
    put_f64s(&mut out, ck.bn.running_mean.iter().copied());
    put_f64s(&mut out, ck.bn.running_var.iter().copied());
    put_f64s(&mut out, [ck.lambda]);
    out.extend_from_slice(&ck.seed.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let config_len = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)?;
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    if d == 0 || k == 0 {
        return Err(Error::schema("checkpoint.dims", "embed and latent dims must be >= 1"));
    }
    if config.latent_dim != k {
        return Err(Error::DimensionMismatch(format!(
            "config latent_dim {} vs stored {}",
            config.latent_dim, k
        )));
    }
    // Reject impossible sizes before allocating.
    let dk = d.checked_mul(k).ok_or(Error::TruncatedFile { what: "checkpoint", record: r.pos as u64 })?;
    let needed = dk
        .checked_mul(2)
        .and_then(|x| x.checked_add(3 * k + d + 2))
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(1 + 8));
    if needed.is_none_or(|n| n > r.remaining()) {
        return Err(Error::TruncatedFile {
            what: "checkpoint",
            record: r.pos as u64,
        });
    }
    let w_e = Matrix::from_row_slice(k, d, &r.f64s(dk)?);
    let b_e = Vector::from_vec(r.f64s(k)?);
    let w_d = Matrix::from_row_slice(d, k, &r.f64s(dk)?);
    let b_d = Vector::from_vec(r.f64s(d)?);
    let enabled = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::schema("checkpoint.bn_enabled", format!("invalid flag {other}"))),
    };
    let momentum = r.f64()?;
    let running_mean = r.f64s(k)?;
    let running_var = r.f64s(k)?;
    let lambda = r.f64()?;
    let seed = r.u64()?;
    r.finish()?;

    let params = SsaeParams { w_e, b_e, w_d, b_d };
    if !params.is_finite() || !lambda.is_finite() || !momentum.is_finite() {
        return Err(Error::InvariantViolation("non-finite checkpoint value".into()));
    }
    if running_mean.iter().chain(&running_var).any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite batch-norm statistic".into()));
    }
    let err = params.max_column_norm_error();
    if err > CHECKPOINT_NORM_TOL {
        return Err(Error::InvariantViolation(format!(
            "decoder column norm off by {err:.3e}"
        )));
    }
    if running_var.iter().any(|&v| v < 0.0) {
        return Err(Error::InvariantViolation("negative running variance".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvariantViolation("negative multiplier".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        bn: BatchNormState {
            running_mean,
            running_var,
            momentum,
            enabled,
        },
        lambda,
        seed,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Standalone matrices (exported steering vectors)
// ---------------------------------------------------------------------------

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.len() * 8);
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    put_f64s(&mut out, row_major(m));
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes, "matrix");
    r.magic(MATRIX_MAGIC)?;
    r.version()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or(Error::TruncatedFile { what: "matrix", record: 0 })?;
    let values = r.f64s(n)?;
    r.finish()?;
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// JSON reports
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

/// Kind of artifact, detected from its leading bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Pairs,
    Checkpoint,
    Matrix,
    Json,
}

pub fn sniff(bytes: &[u8]) -> Option<ArtifactKind> {
    match bytes.get(..4) {
        Some(m) if m == PAIRS_MAGIC => Some(ArtifactKind::Pairs),
        Some(m) if m == CHECKPOINT_MAGIC => Some(ArtifactKind::Checkpoint),
        Some(m) if m == MATRIX_MAGIC => Some(ArtifactKind::Matrix),
        _ => bytes
            .iter()
            .find(|b| !b.is_ascii_whitespace())
            .filter(|&&b| b == b'{')
            .map(|_| ArtifactKind::Json),
    }
}
