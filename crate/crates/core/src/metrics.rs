//! Matching-stability metrics and classic image-quality scores.
//!
//! Local matching stability (LMS) evaluates every subject frame against the
//! next `n` frames. The furthest matchable frame (FMF) scans forward from each
//! subject until the first rejected pair. Both go through
//! [`evaluate_pair`](crate::matchgeom::evaluate_pair), so the accept decision
//! for a given `(subject, offset)` is identical in the two.
//!
//! Subjects are the frames with at least one successor; the last frame of a
//! sequence has nothing to match against and is not a subject.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::imgio::{self, Frame};
use crate::matchgeom::{evaluate_pair, PairMatchStats, RansacParams};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("frames differ in shape: {0}")]
    DimensionMismatch(String),
    #[error("sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad metric input: {0}")]
    BadInput(String),
}

// ---------------------------------------------------------------------------
// Local matching stability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetStats {
    pub offset: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub inlier_ratio: f64,
    pub mean_reproj_error: f64,
    pub accepted: bool,
}

impl From<(usize, &PairMatchStats)> for OffsetStats {
    fn from((offset, s): (usize, &PairMatchStats)) -> Self {
        OffsetStats {
            offset,
            n_matches: s.n_matches,
            n_inliers: s.n_inliers,
            inlier_ratio: s.inlier_ratio,
            mean_reproj_error: s.mean_reproj_error,
            accepted: s.accepted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityProfile {
    pub subject_frame: usize,
    /// Offsets `1..=min(n, frames remaining)`.
    pub per_offset: Vec<OffsetStats>,
}

/// Mean pair statistics at one offset over all subjects that reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub offset: usize,
    pub n_pairs: usize,
    pub mean_inliers: f64,
    pub mean_inlier_ratio: f64,
    pub mean_reproj_error: f64,
}

fn subject_count(features: &[FeatureSet]) -> usize {
    features.len().saturating_sub(1)
}

pub fn local_stability(
    features: &[FeatureSet],
    n: usize,
    p: &RansacParams,
) -> Result<(Vec<StabilityProfile>, Vec<DecayPoint>), MetricsError> {
    if n == 0 || features.len() < 2 {
        return Err(MetricsError::BadInput(format!(
            "need n >= 1 and >= 2 frames, got n={n} with {} frames",
            features.len()
        )));
    }
    let profiles = par::map_range(subject_count(features), |f| {
        let reach = n.min(features.len() - 1 - f);
        StabilityProfile {
            subject_frame: features[f].frame_index,
            per_offset: (1..=reach)
                .map(|k| (k, &evaluate_pair(&features[f], &features[f + k], p)).into())
                .collect(),
        }
    });
    let decay = decay_curve(&profiles, n);
    Ok((profiles, decay))
}

/// Per-offset means over the profiles, offsets `1..=n` that have any pairs.
pub fn decay_curve(profiles: &[StabilityProfile], n: usize) -> Vec<DecayPoint> {
    (1..=n)
        .filter_map(|k| {
            let at_k: Vec<&OffsetStats> = profiles
                .iter()
                .filter_map(|p| p.per_offset.get(k - 1))
                .collect();
            if at_k.is_empty() {
                return None;
            }
            let m = at_k.len() as f64;
            Some(DecayPoint {
                offset: k,
                n_pairs: at_k.len(),
                mean_inliers: at_k.iter().map(|s| s.n_inliers as f64).sum::<f64>() / m,
                mean_inlier_ratio: at_k.iter().map(|s| s.inlier_ratio).sum::<f64>() / m,
                mean_reproj_error: at_k.iter().map(|s| s.mean_reproj_error).sum::<f64>() / m,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Furthest matchable frame

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmfRecord {
    pub subject_frame: usize,
    /// Last offset of the unbroken run of accepted pairs starting at 1.
    pub fmf: usize,
    /// The scan stopped because it reached the horizon.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmfSummary {
    pub subjects: usize,
    pub horizon: usize,
    /// Mean FMF over all subjects, zeros included.
    pub average: f64,
    /// Subjects whose offset-1 pair already failed.
    pub zero_count: usize,
    pub capped_count: usize,
}

pub fn summarize_fmf(records: &[FmfRecord], horizon: usize) -> FmfSummary {
    let n = records.len();
    FmfSummary {
        subjects: n,
        horizon,
        average: if n == 0 {
            0.0
        } else {
            records.iter().map(|r| r.fmf as f64).sum::<f64>() / n as f64
        },
        zero_count: records.iter().filter(|r| r.fmf == 0).count(),
        capped_count: records.iter().filter(|r| r.capped).count(),
    }
}

/// Scans forward from one subject; returns the record and every evaluated pair.
pub fn fmf_scan(
    features: &[FeatureSet],
    subject: usize,
    p: &RansacParams,
    horizon: usize,
) -> (FmfRecord, Vec<PairMatchStats>) {
    let mut pairs = Vec::new();
    let last = horizon.min(features.len() - 1 - subject);
    let mut fmf = 0;
    for k in 1..=last {
        let s = evaluate_pair(&features[subject], &features[subject + k], p);
        let ok = s.accepted;
        pairs.push(s);
        if !ok {
            break;
        }
        fmf = k;
    }
    (
        FmfRecord {
            subject_frame: features[subject].frame_index,
            fmf,
            capped: fmf == horizon,
        },
        pairs,
    )
}

pub fn furthest_matchable(
    features: &[FeatureSet],
    p: &RansacParams,
    horizon: usize,
) -> Result<(Vec<FmfRecord>, FmfSummary), MetricsError> {
    if horizon == 0 || features.len() < 2 {
        return Err(MetricsError::BadInput(format!(
            "need horizon >= 1 and >= 2 frames, got horizon={horizon} with {} frames",
            features.len()
        )));
    }
    let records = par::map_range(subject_count(features), |f| fmf_scan(features, f, p, horizon).0);
    let summary = summarize_fmf(&records, horizon);
    Ok((records, summary))
}

/// Cumulative accepted-pair count: the value at offset `d` counts the
/// (subject, offset <= d) pairs inside each subject's FMF prefix.
pub fn cumulative_from_fmf(records: &[FmfRecord], max_offset: usize) -> Vec<(usize, usize)> {
    (1..=max_offset)
        .map(|d| (d, records.iter().map(|r| r.fmf.min(d)).sum()))
        .collect()
}

/// Cumulative count of accepted pairs by offset `frame_b - frame_a`.
pub fn cumulative_from_pairs(pairs: &[PairMatchStats], max_offset: usize) -> Vec<(usize, usize)> {
    let mut hist = vec![0usize; max_offset + 1];
    for s in pairs.iter().filter(|s| s.accepted) {
        let d = s.frame_b.saturating_sub(s.frame_a);
        if (1..=max_offset).contains(&d) {
            hist[d] += 1;
        }
    }
    let mut acc = 0;
    (1..=max_offset)
        .map(|d| {
            acc += hist[d];
            (d, acc)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PSNR / SSIM

/// Peak signal-to-noise ratio over all samples; `inf` for identical frames.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sse: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / a.data.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of `src` (w x h).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on luma, 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 255, averaged over window positions fully inside the frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::BadInput(format!(
            "{w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let la: Vec<f64> = imgio::to_grayscale(a).data.iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = imgio::to_grayscale(b).data.iter().map(|&v| v as f64).collect();
    let k = ssim_kernel();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let e_aa = filter_valid(&prod(&la, &la), w, h, &k);
    let e_bb = filter_valid(&prod(&lb, &lb), w, h, &k);
    let e_ab = filter_valid(&prod(&la, &lb), w, h, &k);

    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub frame: usize,
    /// `f64::INFINITY` for identical frames.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitySummary {
    pub per_frame: Vec<QualityScores>,
    /// Mean over finite PSNR values; `None` when every frame was identical.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    /// Frames with infinite PSNR, excluded from `mean_psnr`.
    pub inf_count: usize,
}

pub fn summarize_quality(per_frame: Vec<QualityScores>) -> QualitySummary {
    let finite: Vec<f64> = per_frame.iter().map(|q| q.psnr).filter(|v| v.is_finite()).collect();
    let n = per_frame.len().max(1) as f64;
    QualitySummary {
        mean_psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        mean_ssim: per_frame.iter().map(|q| q.ssim).sum::<f64>() / n,
        inf_count: per_frame.len() - finite.len(),
        per_frame,
    }
}

/// Per-frame PSNR/SSIM of `enhanced` against `original`, plus means.
pub fn sequence_quality(original: &[Frame], enhanced: &[Frame]) -> Result<QualitySummary, MetricsError> {
    if original.len() != enhanced.len() {
        return Err(MetricsError::LengthMismatch(original.len(), enhanced.len()));
    }
    let per_frame = par::try_map_range(original.len(), |i| {
        Ok(QualityScores {
            frame: i,
            psnr: psnr(&original[i], &enhanced[i])?,
            ssim: ssim(&original[i], &enhanced[i])?,
        })
    })?;
    Ok(summarize_quality(per_frame))
}

// ---------------------------------------------------------------------------
// CSV

pub const LMS_CSV_HEADER: &str = "subject,offset,n_inliers,inlier_ratio,mean_reproj_error,accepted";
pub const FMF_CSV_HEADER: &str = "subject,fmf,capped";
pub const QUALITY_CSV_HEADER: &str = "frame,psnr,ssim";

pub fn lms_csv_rows(profiles: &[StabilityProfile]) -> Vec<String> {
    profiles
        .iter()
        .flat_map(|p| {
            p.per_offset.iter().map(move |o| {
                format!(
                    "{},{},{},{:.6},{:.6},{}",
                    p.subject_frame, o.offset, o.n_inliers, o.inlier_ratio, o.mean_reproj_error, o.accepted
                )
            })
        })
        .collect()
}

pub fn fmf_csv_rows(records: &[FmfRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| format!("{},{},{}", r.subject_frame, r.fmf, r.capped))
        .collect()
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn quality_csv_rows(q: &QualitySummary) -> Vec<String> {
    q.per_frame
        .iter()
        .map(|s| format!("{},{},{:.6}", s.frame, format_psnr(s.psnr), s.ssim))
        .collect()
}
