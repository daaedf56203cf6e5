//! Material records, the on-disk corpus format, channel normalisation,
//! augmentation and a synthetic generator.
//!
//! A corpus directory holds `manifest.json` plus one subdirectory per material
//! with `ar.json` (18 grid entries and optional raw samples) and `tap.f32`
//! (13 little-endian f32 impact speeds, then 13 x 100 f32 samples row-major).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpc::{self, ArCoeffs, AR_ORDER, LSF_CEILING};

pub const GRID_LEN: usize = 18;
pub const N_TAPS: usize = 13;
pub const TAP_LEN: usize = 100;
/// Channels per grid entry: 21 LSFs and the excitation variance.
pub const AR_CHANNELS: usize = AR_ORDER + 1;
pub const AR_DIM: usize = GRID_LEN * AR_CHANNELS;
pub const TAP_DIM: usize = N_TAPS * TAP_LEN;
pub const TAP_RATE_HZ: f64 = 10_000.0;
pub const FORCE_LEVELS: [f64; 6] = [0.2, 0.56, 0.92, 1.28, 1.64, 2.0];
pub const SPEED_LEVELS: [f64; 3] = [20.0, 160.0, 300.0];
pub const EPS_STD: f64 = 1e-8;
pub const EMBED_DIM: usize = 512;
pub const FORMAT_VERSION: u32 = 1;
pub const TAP_MIX_WEIGHTS: (f32, f32) = (0.95, 0.05);
/// Target plus this many donor classes.
pub const TAP_MIX_DONORS: usize = 19;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("format error in record {record}, field {field}: {detail}")]
    Format { record: String, field: String, detail: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("tap mixing needs at least {needed} classes, found {found}")]
    InsufficientClasses { needed: usize, found: usize },
    #[error("corpus is empty")]
    Empty,
}

fn io_err(path: &Path, source: io::Error) -> CorpusError {
    if source.kind() == io::ErrorKind::NotFound {
        CorpusError::NotFound(path.to_path_buf())
    } else {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

fn format_err(record: &str, field: impl Into<String>, detail: impl Into<String>) -> CorpusError {
    CorpusError::Format { record: record.to_string(), field: field.into(), detail: detail.into() }
}

/// The 18 bin centroids; index `6 * s + f` for speed level `s`, force level `f`.
pub fn grid_centroids() -> [(f64, f64); GRID_LEN] {
    let mut out = [(0.0, 0.0); GRID_LEN];
    let mut i = 0;
    for &v in &SPEED_LEVELS {
        for &f in &FORCE_LEVELS {
            out[i] = (f, v);
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArGridEntry {
    pub force: f64,
    pub speed: f64,
    pub lsf: [f64; AR_ORDER],
    pub variance: f64,
}

impl ArGridEntry {
    pub fn validate(&self, record: &str, index: usize) -> Result<(), CorpusError> {
        let field = |what: &str| format!("ar_grid[{index}].{what}");
        if let Err(e) = lpc::validate_lsf(&self.lsf) {
            let detail = e.to_string();
            let at = match e {
                lpc::LpcError::InvalidLsf { index, .. } | lpc::LpcError::NonFiniteInput { index } => {
                    format!("lsf[{index}]")
                }
                _ => "lsf".to_string(),
            };
            return Err(format_err(record, field(&at), detail));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(format_err(record, field("variance"), "must be finite and >= 0"));
        }
        if !self.force.is_finite() || !self.speed.is_finite() {
            return Err(format_err(record, field("force/speed"), "must be finite"));
        }
        Ok(())
    }

    pub fn ar_coeffs(&self) -> ArCoeffs<f64> {
        lpc::lsf_to_ar(&lpc::LsfVector(self.lsf), self.variance)
            .expect("validated entry converts")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArGrid {
    pub entries: Vec<ArGridEntry>,
}

impl ArGrid {
    pub fn validate(&self, record: &str) -> Result<(), CorpusError> {
        if self.entries.len() != GRID_LEN {
            return Err(format_err(
                record,
                "ar_grid",
                format!("expected {GRID_LEN} entries, found {}", self.entries.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            e.validate(record, i)?;
            if !seen.insert((e.force.to_bits(), e.speed.to_bits())) {
                return Err(format_err(record, format!("ar_grid[{i}]"), "duplicate (force, speed)"));
            }
        }
        Ok(())
    }

    /// Flattened 18 x 22 tensor: each row is 21 LSFs then the variance.
    pub fn tensor(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(AR_DIM);
        for e in &self.entries {
            out.extend_from_slice(&e.lsf);
            out.push(e.variance);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapTrace {
    /// mm/s
    pub impact_speed: f32,
    /// m/s^2 at 10 kHz
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapBank {
    pub traces: Vec<TapTrace>,
}

impl TapBank {
    pub fn validate(&self, record: &str) -> Result<(), CorpusError> {
        if self.traces.len() != N_TAPS {
            return Err(format_err(
                record,
                "tap_bank",
                format!("expected {N_TAPS} traces, found {}", self.traces.len()),
            ));
        }
        for (i, t) in self.traces.iter().enumerate() {
            if t.samples.len() != TAP_LEN {
                return Err(format_err(
                    record,
                    format!("tap_bank[{i}].samples"),
                    format!("expected {TAP_LEN} samples, found {}", t.samples.len()),
                ));
            }
            if !t.impact_speed.is_finite() || t.samples.iter().any(|x| !x.is_finite()) {
                return Err(format_err(record, format!("tap_bank[{i}]"), "non-finite value"));
            }
            if i > 0 && !(t.impact_speed > self.traces[i - 1].impact_speed) {
                return Err(format_err(
                    record,
                    format!("tap_bank[{i}].impact_speed"),
                    "impact speeds must be strictly ascending",
                ));
            }
        }
        Ok(())
    }

    pub fn tensor(&self) -> Vec<f64> {
        self.traces.iter().flat_map(|t| t.samples.iter().map(|&x| x as f64)).collect()
    }

    pub fn speeds(&self) -> Vec<f32> {
        self.traces.iter().map(|t| t.impact_speed).collect()
    }

    /// Little-endian f32 speed header followed by the 13 x 100 samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (N_TAPS + TAP_DIM));
        for t in &self.traces {
            out.extend_from_slice(&t.impact_speed.to_le_bytes());
        }
        for t in &self.traces {
            for x in &t.samples {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], record: &str) -> Result<Self, CorpusError> {
        let expected = 4 * (N_TAPS + TAP_DIM);
        if bytes.len() != expected {
            return Err(format_err(
                record,
                "tap.f32",
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let traces = (0..N_TAPS)
            .map(|i| TapTrace {
                impact_speed: vals[i],
                samples: vals[N_TAPS + i * TAP_LEN..N_TAPS + (i + 1) * TAP_LEN].to_vec(),
            })
            .collect();
        Ok(TapBank { traces })
    }
}

/// One recorded (force, speed) sample before binning; source data for AR
/// resampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawArSample {
    pub force: f64,
    pub speed: f64,
    pub lsf: [f64; AR_ORDER],
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CompliantSmooth,
    CompliantRough,
    RigidSmooth,
    RigidRough,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::CompliantSmooth, Family::CompliantRough, Family::RigidSmooth, Family::RigidRough];

    pub fn is_rough(self) -> bool {
        matches!(self, Family::CompliantRough | Family::RigidRough)
    }

    pub fn is_rigid(self) -> bool {
        matches!(self, Family::RigidSmooth | Family::RigidRough)
    }

    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialRecord {
    pub id: String,
    pub ar_grid: ArGrid,
    pub tap_bank: TapBank,
    pub friction_coefficient: f64,
    pub captions: Vec<String>,
    pub class_label: u32,
    pub family: Option<Family>,
    pub raw_samples: Vec<RawArSample>,
}

impl MaterialRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.ar_grid.validate(&self.id)?;
        self.tap_bank.validate(&self.id)?;
        if !(self.friction_coefficient >= 0.0) || !self.friction_coefficient.is_finite() {
            return Err(format_err(&self.id, "friction_coefficient", "must be finite and >= 0"));
        }
        for (i, s) in self.raw_samples.iter().enumerate() {
            let e = ArGridEntry { force: s.force, speed: s.speed, lsf: s.lsf, variance: s.variance };
            e.validate(&self.id, i).map_err(|err| match err {
                CorpusError::Format { record, field, detail } => CorpusError::Format {
                    record,
                    field: field.replace("ar_grid", "raw_samples"),
                    detail,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Parameter ranges the synthetic generator draws from, per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRanges {
    pub family: Family,
    /// cycles per mm of the dominant surface texture
    pub spatial_freq: (f64, f64),
    pub harmonic_radius: (f64, f64),
    /// vibration output power at 1 N and 100 mm/s
    pub base_power: (f64, f64),
    pub tap_freq_hz: (f64, f64),
    pub tap_decay_ms: (f64, f64),
    pub tap_amplitude: (f64, f64),
    pub friction: (f64, f64),
}

pub fn family_ranges() -> Vec<FamilyRanges> {
    Family::ALL
        .iter()
        .map(|&family| {
            let base_power = if family.is_rough() { (2e-3, 6e-3) } else { (1e-4, 4e-4) };
            let spatial_freq = match family {
                Family::RigidRough => (2.6, 3.4),
                Family::CompliantRough => (1.6, 2.2),
                Family::RigidSmooth => (0.15, 0.25),
                Family::CompliantSmooth => (0.05, 0.12),
            };
            let harmonic_radius = match family {
                Family::RigidRough => (0.88, 0.91),
                Family::CompliantRough => (0.83, 0.86),
                Family::RigidSmooth => (0.78, 0.82),
                Family::CompliantSmooth => (0.72, 0.76),
            };
            let (tap_freq_hz, tap_decay_ms, tap_amplitude) = if family.is_rigid() {
                ((350.0, 900.0), (1.5, 3.5), (20.0, 40.0))
            } else {
                ((60.0, 160.0), (6.0, 14.0), (3.0, 8.0))
            };
            let friction = match family {
                Family::RigidSmooth => (0.15, 0.30),
                Family::RigidRough => (0.40, 0.60),
                Family::CompliantSmooth => (0.50, 0.70),
                Family::CompliantRough => (0.70, 0.90),
            };
            FamilyRanges {
                family,
                spatial_freq,
                harmonic_radius,
                base_power,
                tap_freq_hz,
                tap_decay_ms,
                tap_amplitude,
                friction,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub n_materials: usize,
    pub raw_samples_per_bin: usize,
    pub families: Vec<FamilyRanges>,
}

/// Per-channel z-normalisation statistics for the AR (18 x 22) and tap
/// (13 x 100) tensors. Population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub ar_mean: Vec<f64>,
    pub ar_std: Vec<f64>,
    pub ar_constant: Vec<bool>,
    pub tap_mean: Vec<f64>,
    pub tap_std: Vec<f64>,
    pub tap_constant: Vec<bool>,
}

fn channel_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    let mut flag = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        mean.push(m);
        if s < EPS_STD {
            std.push(1.0);
            flag.push(true);
        } else {
            std.push(s);
            flag.push(false);
        }
    }
    (mean, std, flag)
}

fn apply(x: &Array2<f64>, mean: &[f64], std: &[f64], forward: bool) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if forward { (*v - mean[j]) / std[j] } else { *v * std[j] + mean[j] };
        }
    }
    out
}

impl NormStats {
    pub fn fit(ar: &Array2<f64>, tap: &Array2<f64>) -> Result<Self, CorpusError> {
        if ar.nrows() == 0 || tap.nrows() == 0 {
            return Err(CorpusError::Empty);
        }
        let (ar_mean, ar_std, ar_constant) = channel_stats(ar);
        let (tap_mean, tap_std, tap_constant) = channel_stats(tap);
        Ok(NormStats { ar_mean, ar_std, ar_constant, tap_mean, tap_std, tap_constant })
    }

    pub fn normalize_ar(&self, x: &Array2<f64>) -> Array2<f64> {
        apply(x, &self.ar_mean, &self.ar_std, true)
    }

    pub fn denormalize_ar(&self, x: &Array2<f64>) -> Array2<f64> {
        apply(x, &self.ar_mean, &self.ar_std, false)
    }

    pub fn normalize_tap(&self, x: &Array2<f64>) -> Array2<f64> {
        apply(x, &self.tap_mean, &self.tap_std, true)
    }

    pub fn denormalize_tap(&self, x: &Array2<f64>) -> Array2<f64> {
        apply(x, &self.tap_mean, &self.tap_std, false)
    }
}

/// Normalised tensors of a corpus, one row per record.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub ar: Array2<f64>,
    pub tap: Array2<f64>,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub materials: Vec<MaterialRecord>,
    pub generator: Option<GeneratorInfo>,
    pub norm_stats: Option<NormStats>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MaterialRecord> {
        self.materials.iter().find(|m| m.id == id)
    }

    pub fn ar_tensors(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), AR_DIM));
        for (mut row, m) in out.rows_mut().into_iter().zip(&self.materials) {
            row.assign(&ndarray::ArrayView1::from(&m.ar_grid.tensor()));
        }
        out
    }

    pub fn tap_tensors(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), TAP_DIM));
        for (mut row, m) in out.rows_mut().into_iter().zip(&self.materials) {
            row.assign(&ndarray::ArrayView1::from(&m.tap_bank.tensor()));
        }
        out
    }

    pub fn class_count(&self) -> usize {
        self.materials.iter().map(|m| m.class_label).collect::<BTreeSet<_>>().len()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = BTreeSet::new();
        for m in &self.materials {
            m.validate()?;
            if !ids.insert(m.id.as_str()) {
                return Err(format_err(&m.id, "id", "duplicate id"));
            }
        }
        Ok(())
    }
}

/// Fits statistics on the corpus and returns its normalised tensors.
pub fn normalize(corpus: &Corpus) -> Result<Normalized, CorpusError> {
    let ar = corpus.ar_tensors();
    let tap = corpus.tap_tensors();
    let stats = NormStats::fit(&ar, &tap)?;
    Ok(Normalized { ar: stats.normalize_ar(&ar), tap: stats.normalize_tap(&tap), stats })
}

// ---------------------------------------------------------------- disk format

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    class_label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<Family>,
    friction_coefficient: f64,
    captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    grid_centroids: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_stats: Option<NormStats>,
    materials: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArFile {
    entries: Vec<ArGridEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    raw: Vec<RawArSample>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CorpusError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serialisable");
    out.push(b'\n');
    out
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        grid_centroids: grid_centroids().to_vec(),
        generator: corpus.generator.clone(),
        norm_stats: corpus.norm_stats.clone(),
        materials: corpus
            .materials
            .iter()
            .map(|m| ManifestEntry {
                id: m.id.clone(),
                class_label: m.class_label,
                family: m.family,
                friction_coefficient: m.friction_coefficient,
                captions: m.captions.clone(),
            })
            .collect(),
    };
    write_file(&dir.join("manifest.json"), &to_json(&manifest))?;
    for m in &corpus.materials {
        let sub = dir.join(&m.id);
        fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
        let ar = ArFile { entries: m.ar_grid.entries.clone(), raw: m.raw_samples.clone() };
        write_file(&sub.join("ar.json"), &to_json(&ar))?;
        write_file(&sub.join("tap.f32"), &m.tap_bank.to_bytes())?;
    }
    Ok(())
}

/// Loads a corpus directory. A directory without a manifest is an empty corpus.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::NotFound(dir.to_path_buf()));
    }
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(Corpus::default());
    }
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| format_err("manifest", "manifest.json", e.to_string()))?;
    let mut materials = Vec::with_capacity(manifest.materials.len());
    for entry in manifest.materials {
        let sub = dir.join(&entry.id);
        let ar: ArFile = serde_json::from_slice(&read_file(&sub.join("ar.json"))?)
            .map_err(|e| format_err(&entry.id, "ar.json", e.to_string()))?;
        let tap_bank = TapBank::from_bytes(&read_file(&sub.join("tap.f32"))?, &entry.id)?;
        let record = MaterialRecord {
            id: entry.id,
            ar_grid: ArGrid { entries: ar.entries },
            tap_bank,
            friction_coefficient: entry.friction_coefficient,
            captions: entry.captions,
            class_label: entry.class_label,
            family: entry.family,
            raw_samples: ar.raw,
        };
        materials.push(record);
    }
    let corpus = Corpus { materials, generator: manifest.generator, norm_stats: manifest.norm_stats };
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------- embeddings

/// Caption to 512-d unit vector.
pub type EmbeddingTable = BTreeMap<String, Vec<f32>>;

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, CorpusError> {
    let table: EmbeddingTable = serde_json::from_slice(&read_file(path)?)
        .map_err(|e| format_err("embeddings", path.display().to_string(), e.to_string()))?;
    for (text, v) in &table {
        if v.len() != EMBED_DIM {
            return Err(format_err(text, "embedding", format!("expected {EMBED_DIM} values")));
        }
        let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format_err(text, "embedding", format!("norm {norm} is not 1")));
        }
    }
    Ok(table)
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), CorpusError> {
    write_file(path, &serde_json::to_vec(table).expect("serialisable"))
}

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stand-in text embedding: signed feature hashing of lower-cased words into
/// 512 dimensions, L2-normalised. Shared words give correlated vectors.
pub fn hashed_text_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0.0f64; EMBED_DIM];
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
    {
        for salt in 0..4u64 {
            let h = fnv1a(word.as_bytes(), salt);
            let idx = (h % EMBED_DIM as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    // renormalise after the f32 cast so the stored norm is 1 within f32 rounding
    let mut out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let n32 = out.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    out.iter_mut().for_each(|x| *x = (*x as f64 / n32) as f32);
    out
}

pub fn embeddings_for(corpus: &Corpus) -> EmbeddingTable {
    let mut table = EmbeddingTable::new();
    for m in &corpus.materials {
        for c in &m.captions {
            table.entry(c.clone()).or_insert_with(|| hashed_text_embedding(c));
        }
    }
    table
}

// ---------------------------------------------------------------- generator

#[derive(Debug, Clone)]
struct MaterialParams {
    rigid: bool,
    spatial_freq: f64,
    inharmonicity: f64,
    harmonic_radius: f64,
    color_hz: [f64; 4],
    color_radius: [f64; 4],
    base_power: f64,
    force_exp: f64,
    speed_exp: f64,
    real_pole: f64,
    tap_freq_hz: f64,
    tap_decay_ms: f64,
    tap_amplitude: f64,
    tap_chirp: f64,
    friction: f64,
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    r.0 + (r.1 - r.0) * rng.random::<f64>()
}

fn draw_params(rng: &mut ChaCha8Rng, ranges: &FamilyRanges) -> MaterialParams {
    let family = ranges.family;
    let color_r = if family.is_rough() { (0.5, 0.7) } else { (0.3, 0.45) };
    let centres = match family {
        Family::RigidRough => [450.0, 1100.0, 1900.0, 3200.0],
        Family::CompliantRough => [300.0, 700.0, 1400.0, 2300.0],
        Family::RigidSmooth => [600.0, 1500.0, 2800.0, 4200.0],
        Family::CompliantSmooth => [200.0, 500.0, 1000.0, 1800.0],
    };
    let mut color_hz = [0.0; 4];
    let mut color_radius = [0.0; 4];
    for i in 0..4 {
        color_hz[i] = centres[i] * draw(rng, (0.92, 1.08));
        color_radius[i] = draw(rng, color_r);
    }
    MaterialParams {
        rigid: family.is_rigid(),
        spatial_freq: draw(rng, ranges.spatial_freq),
        inharmonicity: draw(rng, (-0.03, 0.03)),
        harmonic_radius: draw(rng, ranges.harmonic_radius),
        color_hz,
        color_radius,
        base_power: draw(rng, ranges.base_power),
        force_exp: draw(rng, (0.3, 0.8)),
        speed_exp: draw(rng, (0.4, 1.0)),
        real_pole: draw(rng, (-0.4, 0.4)),
        tap_freq_hz: draw(rng, ranges.tap_freq_hz),
        tap_decay_ms: draw(rng, ranges.tap_decay_ms),
        tap_amplitude: draw(rng, ranges.tap_amplitude),
        tap_chirp: draw(rng, (0.0, 0.15)),
        friction: draw(rng, ranges.friction),
    }
}

/// AR model of a material at (force N, speed mm/s), as (LSF, variance).
fn material_model(p: &MaterialParams, force: f64, speed: f64) -> ([f64; AR_ORDER], f64) {
    let nyquist = TAP_RATE_HZ / 2.0;
    let f0 = p.spatial_freq * speed.max(1.0);
    // 10 conjugate pairs: 4 texture harmonics, 4 material colour resonances
    // and 2 weak broadband pairs. Keeping poles spread over the band keeps the
    // coefficients well conditioned.
    let mut pairs: Vec<(f64, f64)> = if p.rigid {
        vec![(0.45, 1700.0), (0.4, 3900.0)]
    } else {
        vec![(0.6, 800.0), (0.55, 2600.0)]
    };
    for h in 1..=4 {
        let hf = h as f64;
        let mut freq = hf * f0 * (1.0 + p.inharmonicity * hf);
        let mut radius = p.harmonic_radius - 0.015 * (hf - 1.0) - 0.01 * force;
        if !(freq > 100.0 && freq < 0.9 * nyquist) {
            // harmonic outside the band (or clustered near DC): park a weak
            // pair at a fixed spot instead
            freq = nyquist * (0.52 + 0.06 * hf);
            radius = 0.3;
        }
        pairs.push((radius, freq));
    }
    for i in 0..4 {
        pairs.push((p.color_radius[i] - 0.02 * force, p.color_hz[i]));
    }
    let mut poly = vec![1.0f64];
    let mut mul = |c: &[f64]| {
        let mut next = vec![0.0; poly.len() + c.len() - 1];
        for (i, &x) in poly.iter().enumerate() {
            for (j, &y) in c.iter().enumerate() {
                next[i + j] += x * y;
            }
        }
        poly = next;
    };
    for &(r, freq) in &pairs {
        let th = 2.0 * std::f64::consts::PI * freq / TAP_RATE_HZ;
        mul(&[1.0, -2.0 * r * th.cos(), r * r]);
    }
    mul(&[1.0, -p.real_pole]);
    let mut a = [0.0; AR_ORDER];
    for k in 0..AR_ORDER {
        a[k] = -poly[k + 1];
    }
    let lsf = lpc::ar_to_lsf(&ArCoeffs { a, variance: 0.0 }).expect("generator poles are stable");
    let power = p.base_power * (force / 1.0).powf(p.force_exp) * (speed / 100.0).powf(p.speed_exp);
    let variance = power / process_gain(&a);
    (lsf.0, variance)
}

/// Output power per unit excitation variance, `1 / prod(1 - k_i^2)` over the
/// reflection coefficients.
fn process_gain(a: &[f64; AR_ORDER]) -> f64 {
    let mut c = *a;
    let mut gain = 1.0;
    for m in (0..AR_ORDER).rev() {
        let k = c[m];
        let d = 1.0 - k * k;
        gain /= d;
        let prev = c;
        for i in 0..m {
            c[i] = (prev[i] + k * prev[m - 1 - i]) / d;
        }
    }
    gain
}

/// Impact speeds (mm/s) of generated and decoded tap banks.
pub fn tap_speeds() -> [f32; N_TAPS] {
    std::array::from_fn(|i| 25.0 * (i as f32 + 1.0))
}

fn tap_bank_for(p: &MaterialParams) -> TapBank {
    let traces = (0..N_TAPS)
        .map(|i| {
            let v = tap_speeds()[i] as f64;
            let amp = p.tap_amplitude * v / 100.0;
            let freq = p.tap_freq_hz * (1.0 + p.tap_chirp * v / 325.0);
            let tau = p.tap_decay_ms * 1e-3;
            let samples = (0..TAP_LEN)
                .map(|n| {
                    let t = n as f64 / TAP_RATE_HZ;
                    (amp * (-t / tau).exp() * (2.0 * std::f64::consts::PI * freq * t).sin()) as f32
                })
                .collect();
            TapTrace { impact_speed: v as f32, samples }
        })
        .collect();
    TapBank { traces }
}

const NAME_SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "tas", "vo", "zel", "quin", "bar", "dum", "sil", "nor", "pex", "ra",
    "fen", "gu",
];

fn material_token(rng: &mut ChaCha8Rng, index: usize) -> String {
    let a = NAME_SYLLABLES[rng.random_range(0..NAME_SYLLABLES.len())];
    let b = NAME_SYLLABLES[rng.random_range(0..NAME_SYLLABLES.len())];
    format!("{a}{b}{index}")
}

fn captions_for(family: Family, token: &str, index: usize) -> Vec<String> {
    let (hard, texture, noun) = match family {
        Family::CompliantSmooth => ("soft", "smooth", "foam"),
        Family::CompliantRough => ("squishy", "rough", "fabric"),
        Family::RigidSmooth => ("hard", "smooth", "glass"),
        Family::RigidRough => ("hard", "rough", "stone"),
    };
    let mut out = vec![
        format!("{hard} and {texture} {noun} {token}"),
        format!("a {texture} {noun} surface called {token}"),
        format!("{token} feels {hard} and {texture}"),
    ];
    if index == 0 && family == Family::CompliantSmooth {
        out.push("soft and spongy foam".to_string());
    }
    out
}

/// Deterministic synthetic corpus: material `i` belongs to family `i mod 4`
/// and is its own class. Each grid bin also carries four jittered raw samples
/// for resampling.
pub fn generate_synthetic_corpus(seed: u64, n_materials: usize) -> Corpus {
    const RAW_PER_BIN: usize = 4;
    let ranges = family_ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = grid_centroids();
    let df = FORCE_LEVELS[1] - FORCE_LEVELS[0];
    let dv = SPEED_LEVELS[1] - SPEED_LEVELS[0];
    let mut materials = Vec::with_capacity(n_materials);
    for i in 0..n_materials {
        let family = Family::ALL[i % 4];
        let params = draw_params(&mut rng, &ranges[family.index()]);
        let token = material_token(&mut rng, i);
        let entries = centroids
            .iter()
            .map(|&(force, speed)| {
                let (lsf, variance) = material_model(&params, force, speed);
                ArGridEntry { force, speed, lsf, variance }
            })
            .collect();
        let mut raw_samples = Vec::with_capacity(GRID_LEN * RAW_PER_BIN);
        for &(fc, vc) in &centroids {
            for _ in 0..RAW_PER_BIN {
                let force = (fc + df * rng.random_range(-0.3..0.3)).max(0.05);
                let speed = (vc + dv * rng.random_range(-0.3..0.3)).max(5.0);
                let (lsf, variance) = material_model(&params, force, speed);
                raw_samples.push(RawArSample { force, speed, lsf, variance });
            }
        }
        materials.push(MaterialRecord {
            id: format!("M{i:03}"),
            ar_grid: ArGrid { entries },
            tap_bank: tap_bank_for(&params),
            friction_coefficient: params.friction,
            captions: captions_for(family, &token, i),
            class_label: i as u32,
            family: Some(family),
            raw_samples,
        });
    }
    let mut corpus = Corpus {
        materials,
        generator: Some(GeneratorInfo {
            seed,
            n_materials,
            raw_samples_per_bin: RAW_PER_BIN,
            families: ranges,
        }),
        norm_stats: None,
    };
    if !corpus.is_empty() {
        corpus.norm_stats = normalize(&corpus).ok().map(|n| n.stats);
    }
    corpus
}

// ---------------------------------------------------------------- augmentation

/// `w_target * target + w_donor * donor`, trace by trace (same speed slot).
/// Speeds are the target's.
pub fn mix_tap_banks(target: &TapBank, donor: &TapBank, w_target: f32, w_donor: f32) -> TapBank {
    let traces = target
        .traces
        .iter()
        .zip(&donor.traces)
        .map(|(t, d)| TapTrace {
            impact_speed: t.impact_speed,
            samples: t.samples.iter().zip(&d.samples).map(|(&x, &y)| w_target * x + w_donor * y).collect(),
        })
        .collect();
    TapBank { traces }
}

/// For each material, one mixed bank per donor class: 19 distinct other
/// classes, one donor material drawn from each.
pub fn augment_tap_mix(corpus: &Corpus, seed: u64) -> Result<Vec<Vec<TapBank>>, CorpusError> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, m) in corpus.materials.iter().enumerate() {
        by_class.entry(m.class_label).or_default().push(i);
    }
    if by_class.len() < TAP_MIX_DONORS + 1 {
        return Err(CorpusError::InsufficientClasses {
            needed: TAP_MIX_DONORS + 1,
            found: by_class.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wt, wd) = TAP_MIX_WEIGHTS;
    let mut out = Vec::with_capacity(corpus.len());
    for m in &corpus.materials {
        let mut others: Vec<u32> = by_class.keys().copied().filter(|&c| c != m.class_label).collect();
        others.shuffle(&mut rng);
        let banks = others[..TAP_MIX_DONORS]
            .iter()
            .map(|c| {
                let members = &by_class[c];
                let donor = &corpus.materials[members[rng.random_range(0..members.len())]];
                mix_tap_banks(&m.tap_bank, &donor.tap_bank, wt, wd)
            })
            .collect();
        out.push(banks);
    }
    Ok(out)
}

/// Bin of a raw sample: nearest centroid in min-max normalised (f, v).
pub fn nearest_bin(force: f64, speed: f64) -> usize {
    let (f0, f1) = (FORCE_LEVELS[0], FORCE_LEVELS[FORCE_LEVELS.len() - 1]);
    let (v0, v1) = (SPEED_LEVELS[0], SPEED_LEVELS[SPEED_LEVELS.len() - 1]);
    let norm = |f: f64, v: f64| ((f - f0) / (f1 - f0), (v - v0) / (v1 - v0));
    let q = norm(force, speed);
    let mut best = (f64::INFINITY, 0);
    for (i, &(cf, cv)) in grid_centroids().iter().enumerate() {
        let c = norm(cf, cv);
        let d = (q.0 - c.0).powi(2) + (q.1 - c.1).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// A bin that had no raw samples for a material and borrowed another's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinFallback {
    pub material: String,
    pub bin: usize,
    pub borrowed_from: usize,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub corpus: Corpus,
    pub fallbacks: Vec<BinFallback>,
}

/// `n_augments` resampled grids per material. Each bin draws uniform simplex
/// weights over its member raw samples and blends them (LSF convexly,
/// variance linearly), relabelled at the bin centroid. Materials without raw
/// samples use their grid entries as the only members. Variants keep the
/// source tap bank and class label; `n_augments == 0` returns the input.
pub fn augment_ar_resample(corpus: &Corpus, n_augments: usize, seed: u64) -> Augmented {
    if n_augments == 0 {
        return Augmented { corpus: corpus.clone(), fallbacks: Vec::new() };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = grid_centroids();
    let mut fallbacks = Vec::new();
    let mut materials = Vec::with_capacity(corpus.len() * n_augments);
    for m in &corpus.materials {
        let mut bins: Vec<Vec<([f64; AR_ORDER], f64)>> = vec![Vec::new(); GRID_LEN];
        if m.raw_samples.is_empty() {
            for e in &m.ar_grid.entries {
                bins[nearest_bin(e.force, e.speed)].push((e.lsf, e.variance));
            }
        } else {
            for s in &m.raw_samples {
                bins[nearest_bin(s.force, s.speed)].push((s.lsf, s.variance));
            }
        }
        let mut source = [0usize; GRID_LEN];
        for b in 0..GRID_LEN {
            source[b] = b;
            if bins[b].is_empty() {
                let (cf, cv) = centroids[b];
                let borrowed = (0..GRID_LEN)
                    .filter(|&o| !bins[o].is_empty())
                    .min_by(|&x, &y| {
                        let d = |o: usize| {
                            let (f, v) = centroids[o];
                            ((f - cf) / 1.8).powi(2) + ((v - cv) / 280.0).powi(2)
                        };
                        d(x).partial_cmp(&d(y)).unwrap()
                    })
                    .expect("material has at least one sample");
                source[b] = borrowed;
                fallbacks.push(BinFallback { material: m.id.clone(), bin: b, borrowed_from: borrowed });
            }
        }
        for k in 0..n_augments {
            let entries = (0..GRID_LEN)
                .map(|b| {
                    let members = &bins[source[b]];
                    let w: Vec<f64> = if members.len() == 1 {
                        vec![1.0]
                    } else {
                        let raw: Vec<f64> = (0..members.len()).map(|_| Exp1.sample(&mut rng)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|x| x / s).collect()
                    };
                    let mut lsf = [0.0; AR_ORDER];
                    let mut variance = 0.0;
                    for (wi, (l, v)) in w.iter().zip(members) {
                        for j in 0..AR_ORDER {
                            lsf[j] += wi * l[j];
                        }
                        variance += wi * v;
                    }
                    // rounding can only break order for near-equal members
                    lpc::enforce_min_gap(&mut lsf, lpc::MIN_LSF_GAP);
                    for x in lsf.iter_mut() {
                        *x = x.min(LSF_CEILING);
                    }
                    let (force, speed) = centroids[b];
                    ArGridEntry { force, speed, lsf, variance: variance.max(0.0) }
                })
                .collect();
            materials.push(MaterialRecord {
                id: format!("{}~{k:02}", m.id),
                ar_grid: ArGrid { entries },
                tap_bank: m.tap_bank.clone(),
                friction_coefficient: m.friction_coefficient,
                captions: m.captions.clone(),
                class_label: m.class_label,
                family: m.family,
                raw_samples: Vec::new(),
            });
        }
    }
    let corpus = Corpus { materials, generator: corpus.generator.clone(), norm_stats: None };
    Augmented { corpus, fallbacks }
}

/// Training pairs: AR resampling, and when the corpus has enough classes,
/// variant `k` of a material takes tap bank `k mod 20` where 0 is the original
/// bank and 1..=19 are its donor mixes.
pub fn build_training_pairs(corpus: &Corpus, n_augments: usize, seed: u64) -> Augmented {
    let mut out = augment_ar_resample(corpus, n_augments, seed);
    if n_augments == 0 {
        return out;
    }
    if let Ok(mixes) = augment_tap_mix(corpus, seed ^ 0x7a9) {
        for (mi, banks) in mixes.iter().enumerate() {
            for k in 0..n_augments {
                let slot = k % (TAP_MIX_DONORS + 1);
                if slot > 0 {
                    out.corpus.materials[mi * n_augments + k].tap_bank = banks[slot - 1].clone();
                }
            }
        }
    }
    out.corpus.norm_stats = normalize(&out.corpus).ok().map(|n| n.stats);
    out
}
