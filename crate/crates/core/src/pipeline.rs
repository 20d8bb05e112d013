//! On-disk plumbing shared by the command-line tools: feature caches, run
//! manifests, CSV output with embedded manifest hashes, and `summary.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enhance::EnhanceError;
use crate::features::{
    detect_with, read_feature_cache, write_feature_cache, DetectorKind, DetectorParams,
    FeatureError, FeatureSet,
};
use crate::imgio::{to_grayscale, FrameSequence, ImgError, SequenceMeta};
use crate::matchgeom::{RansacParams, RATIO_TEST};
use crate::metrics::{
    fmf_csv_rows, lms_csv_rows, quality_csv_rows, DecayPoint, FmfRecord, FmfSummary,
    MetricsError, QualitySummary, StabilityProfile, FMF_CSV_HEADER, LMS_CSV_HEADER,
    QUALITY_CSV_HEADER,
};
use crate::synthgen::SynthError;
use crate::par;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad input file {path}: {msg}")]
    BadFile { path: PathBuf, msg: String },
    #[error("{0}")]
    Contract(String),
}

impl PipelineError {
    /// True when the failure came from the filesystem rather than the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            PipelineError::Io { .. } => true,
            PipelineError::Img(e) => e.is_io(),
            PipelineError::Feature(FeatureError::Io { .. }) => true,
            PipelineError::Enhance(EnhanceError::Img(e)) => e.is_io(),
            PipelineError::Synth(SynthError::Img(e)) => e.is_io(),
            _ => false,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Features

pub const FEATURE_DIR: &str = "features";
pub const FEATURE_MANIFEST: &str = "manifest.json";

/// Written next to the `.fbfs` files; a cache is only used when the detector
/// settings match and every source frame still hashes to the recorded value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub detector: String,
    pub params: DetectorParams,
    /// SHA-256 of each source frame file, in frame order.
    pub frame_sha256: Vec<String>,
}

pub fn feature_cache_path(seq: &FrameSequence, index: usize) -> PathBuf {
    seq.directory
        .join(FEATURE_DIR)
        .join(format!("frame_{index:06}.fbfs"))
}

/// Detects and describes every frame of `seq` in memory.
pub fn extract_features(
    seq: &FrameSequence,
    kind: DetectorKind,
    params: &DetectorParams,
) -> Result<Vec<FeatureSet>, PipelineError> {
    params.validate()?;
    par::try_map_range(seq.count, |i| {
        let frame = seq.load(i)?;
        Ok(detect_with(kind, &to_grayscale(&frame), params)?)
    })
}

fn frame_hashes(seq: &FrameSequence) -> Result<Vec<String>, PipelineError> {
    par::try_map_range(seq.count, |i| {
        let path = seq.frame_path(i);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(sha256_hex(&bytes))
    })
}

/// Extracts features and writes them, with a manifest, under `<seq>/features`.
pub fn build_feature_cache(
    seq: &FrameSequence,
    kind: DetectorKind,
    params: &DetectorParams,
) -> Result<Vec<FeatureSet>, PipelineError> {
    let sets = extract_features(seq, kind, params)?;
    let dir = seq.directory.join(FEATURE_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    par::try_map_range(sets.len(), |i| {
        write_feature_cache(&feature_cache_path(seq, i), &sets[i])
    })?;
    let manifest = FeatureManifest {
        detector: kind.name().to_string(),
        params: *params,
        frame_sha256: frame_hashes(seq)?,
    };
    write_json(&dir.join(FEATURE_MANIFEST), &manifest)?;
    Ok(sets)
}

/// Cached features if a valid cache for these settings exists.
pub fn cached_features(
    seq: &FrameSequence,
    kind: DetectorKind,
    params: &DetectorParams,
) -> Result<Option<Vec<FeatureSet>>, PipelineError> {
    let path = seq.directory.join(FEATURE_DIR).join(FEATURE_MANIFEST);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(None);
    };
    let Ok(manifest) = serde_json::from_str::<FeatureManifest>(&text) else {
        return Ok(None);
    };
    if manifest.detector != kind.name()
        || manifest.params != *params
        || manifest.frame_sha256.len() != seq.count
        || manifest.frame_sha256 != frame_hashes(seq)?
    {
        return Ok(None);
    }
    match par::try_map_range(seq.count, |i| read_feature_cache(&feature_cache_path(seq, i), i)) {
        Ok(sets) => Ok(Some(sets)),
        Err(_) => Ok(None),
    }
}

/// Validated cache when present, fresh extraction otherwise. The flag
/// reports whether the cache was used.
pub fn load_features(
    seq: &FrameSequence,
    kind: DetectorKind,
    params: &DetectorParams,
) -> Result<(Vec<FeatureSet>, bool), PipelineError> {
    params.validate()?;
    if let Some(sets) = cached_features(seq, kind, params)? {
        return Ok((sets, true));
    }
    Ok((extract_features(seq, kind, params)?, false))
}

// ---------------------------------------------------------------------------
// Run manifest

/// Everything that determines a run's outputs, plus a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub sequence_id: String,
    pub enhancer: String,
    pub enhancer_params: String,
    pub detector: String,
    pub detector_params: DetectorParams,
    pub ransac_params: RansacParams,
    pub seed: u64,
    /// Matching conventions: ratio-test constant, mutual cross-check, and
    /// the channel features are detected on.
    pub ratio_test: f64,
    pub cross_check: bool,
    pub detection_channel: String,
    pub version: String,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` (0 if unset)
    /// so that repeated runs produce identical bytes.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(
        seq: &FrameSequence,
        kind: DetectorKind,
        detector_params: &DetectorParams,
        ransac_params: &RansacParams,
    ) -> Self {
        RunManifest {
            sequence_id: seq.meta.id.clone(),
            enhancer: seq.meta.enhancer.clone(),
            enhancer_params: seq.meta.enhancer_params.clone(),
            detector: kind.name().to_string(),
            detector_params: *detector_params,
            ransac_params: *ransac_params,
            seed: ransac_params.seed,
            ratio_test: RATIO_TEST,
            cross_check: true,
            detection_channel: "luma".to_string(),
            version: crate::VERSION.to_string(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0),
        }
    }

    /// SHA-256 over the canonical JSON with the timestamp zeroed.
    pub fn hash(&self) -> String {
        let canonical = RunManifest {
            timestamp: 0,
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&canonical).expect("manifest serializes").as_bytes())
    }

    /// Row label used in reports: enhancer name.
    pub fn label(&self) -> &str {
        &self.enhancer
    }
}

// ---------------------------------------------------------------------------
// CSV and JSON output

pub const MANIFEST_COMMENT: &str = "# manifest_sha256=";

/// Writes `# manifest_sha256=<hash>`, the header, then one line per row.
pub fn write_csv(
    path: &Path,
    manifest_hash: &str,
    header: &str,
    rows: &[String],
) -> Result<(), PipelineError> {
    let mut text = format!("{MANIFEST_COMMENT}{manifest_hash}\n{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// The manifest hash on the leading comment line of a CSV written by
/// [`write_csv`], and the parsed records after it.
pub fn read_csv(path: &Path) -> Result<(Option<String>, Vec<csv::StringRecord>), PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(MANIFEST_COMMENT))
        .map(|h| h.trim().to_string());
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let records = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::BadFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok((hash, records))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmsSection {
    pub manifest_sha256: String,
    pub csv: String,
    pub n: usize,
    pub decay: Vec<DecayPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmfSection {
    pub manifest_sha256: String,
    pub csv: String,
    #[serde(flatten)]
    pub summary: FmfSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySection {
    pub manifest_sha256: String,
    pub csv: String,
    pub frames: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub inf_count: usize,
}

impl QualitySection {
    pub fn new(manifest_sha256: &str, csv: &str, q: &QualitySummary) -> Self {
        QualitySection {
            manifest_sha256: manifest_sha256.to_string(),
            csv: csv.to_string(),
            frames: q.per_frame.len(),
            mean_psnr: q.mean_psnr,
            mean_ssim: q.mean_ssim,
            inf_count: q.inf_count,
        }
    }
}

/// `summary.json`: one section per metric run in the directory, plus the
/// manifests they reference, keyed by hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(default)]
    pub manifests: BTreeMap<String, RunManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lms: Option<LmsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fmf: Option<FmfSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualitySection>,
}

impl Summary {
    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(SUMMARY_FILE);
        if !path.is_file() {
            return Ok(Summary::default());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::BadFile {
            path,
            msg: e.to_string(),
        })
    }

    /// Read-modify-write of `<dir>/summary.json`.
    pub fn update(dir: &Path, f: impl FnOnce(&mut Summary)) -> Result<Summary, PipelineError> {
        let mut s = Summary::read(dir)?;
        f(&mut s);
        let live: Vec<&String> = [
            s.lms.as_ref().map(|l| &l.manifest_sha256),
            s.fmf.as_ref().map(|l| &l.manifest_sha256),
        ]
        .into_iter()
        .flatten()
        .collect();
        let keep: Vec<String> = live.into_iter().cloned().collect();
        s.manifests.retain(|k, _| keep.contains(k));
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(SUMMARY_FILE), &s)?;
        Ok(s)
    }
}

/// Provenance of a quality comparison: the two sequences and the toolkit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityManifest {
    pub original: SequenceMeta,
    pub enhanced: SequenceMeta,
    pub version: String,
}

impl QualityManifest {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }
}

/// Writes an LMS CSV at `out` and records it in the sibling summary.
pub fn write_lms_run(
    out: &Path,
    manifest: &RunManifest,
    profiles: &[StabilityProfile],
    n: usize,
    decay: &[DecayPoint],
) -> Result<String, PipelineError> {
    let hash = manifest.hash();
    write_csv(out, &hash, LMS_CSV_HEADER, &lms_csv_rows(profiles))?;
    Summary::update(&output_dir(out), |sum| {
        sum.manifests.insert(hash.clone(), manifest.clone());
        sum.lms = Some(LmsSection {
            manifest_sha256: hash.clone(),
            csv: file_name(out),
            n,
            decay: decay.to_vec(),
        });
    })?;
    Ok(hash)
}

/// Writes an FMF CSV at `out` and records it in the sibling summary.
pub fn write_fmf_run(
    out: &Path,
    manifest: &RunManifest,
    records: &[FmfRecord],
    summary: &FmfSummary,
) -> Result<String, PipelineError> {
    let hash = manifest.hash();
    write_csv(out, &hash, FMF_CSV_HEADER, &fmf_csv_rows(records))?;
    Summary::update(&output_dir(out), |sum| {
        sum.manifests.insert(hash.clone(), manifest.clone());
        sum.fmf = Some(FmfSection {
            manifest_sha256: hash.clone(),
            csv: file_name(out),
            summary: summary.clone(),
        });
    })?;
    Ok(hash)
}

/// Writes a per-frame quality CSV at `out` and records it in the sibling summary.
pub fn write_quality_run(
    out: &Path,
    manifest: &QualityManifest,
    q: &QualitySummary,
) -> Result<String, PipelineError> {
    let hash = manifest.hash();
    write_csv(out, &hash, QUALITY_CSV_HEADER, &quality_csv_rows(q))?;
    Summary::update(&output_dir(out), |sum| {
        sum.quality = Some(QualitySection::new(&hash, &file_name(out), q));
    })?;
    Ok(hash)
}

/// Directory a CSV output lives in, for its sibling `summary.json`.
pub fn output_dir(csv_path: &Path) -> PathBuf {
    match csv_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
