//! Descriptor matching and robust homography fitting.
//!
//! Matches are brute-force nearest neighbours under Hamming distance,
//! filtered by a 0.8 ratio test and a mutual cross-check. Homographies come
//! from the Hartley-normalized DLT, solved through a Jacobi eigen
//! decomposition of the 9x9 normal matrix, wrapped in a seeded RANSAC loop.
//! A pair is accepted when the final refit model keeps enough inliers with a
//! small enough mean reprojection error.

use std::fmt;
use std::ops::Mul;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor, FeatureSet, Keypoint};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeomError {
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("numerical failure: h33 vanished")]
    NumericalFailure,
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("need at least 4 correspondences, got {0}")]
    NotEnoughPoints(usize),
    #[error("source and destination lengths differ")]
    LengthMismatch,
}

pub type Point = [f64; 2];

// ---------------------------------------------------------------------------
// Hamming matching

#[inline(always)]
fn hamming_words(a: &[u64; 4], b: &[u64; 4]) -> u32 {
    (a[0] ^ b[0]).count_ones()
        + (a[1] ^ b[1]).count_ones()
        + (a[2] ^ b[2]).count_ones()
        + (a[3] ^ b[3]).count_ones()
}

/// Number of differing bits, 0..=256.
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    hamming_words(&a.0, &b.0)
}

/// Lowe ratio: a match needs best < RATIO_TEST * second-best, in both
/// directions, and must be mutual.
pub const RATIO_TEST: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: u32,
}

/// Best and second-best distance seen, with the index of the best.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Nearest {
    best: u32,
    second: u32,
    index: usize,
}

const NONE: Nearest = Nearest {
    best: u32::MAX,
    second: u32::MAX,
    index: usize::MAX,
};

impl Nearest {
    #[inline(always)]
    fn offer(&mut self, d: u32, idx: usize) {
        // strict comparison keeps the lowest index on ties
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.index = idx;
        } else if d < self.second {
            self.second = d;
        }
    }

    /// Lowe ratio test at [`RATIO_TEST`], waived for exact matches.
    fn distinct(&self) -> bool {
        self.best == 0 || self.second == u32::MAX || 5 * self.best < 4 * self.second
    }
}

/// Reference scan: one pass, updating row and column neighbours per pair.
fn scan_generic(a: &[Descriptor], b: &[Descriptor], rows: &mut [Nearest], cols: &mut [Nearest]) {
    for (i, da) in a.iter().enumerate() {
        let mut row = NONE;
        for (j, db) in b.iter().enumerate() {
            let d = hamming_words(&da.0, &db.0);
            row.offer(d, j);
            cols[j].offer(d, i);
        }
        rows[i] = row;
    }
}

// The keyed scan packs `distance << KEY_SHIFT | index` into a u32, so "best
// distance, lowest index on ties" is a plain `min`, and tracks the
// second-best distance as `min(second, max(best, d))`. Both are branch-free
// and vectorize.
const KEY_SHIFT: u32 = 23;
const KEY_INDEX_LIMIT: usize = 1 << KEY_SHIFT;
const LANES: usize = 8;

#[inline(always)]
fn key_distance(k: u32) -> u32 {
    k >> KEY_SHIFT
}

/// Distances above 256 only arise from the `u32::MAX` sentinel.
#[inline(always)]
fn unpack(key: u32, second: u32) -> Nearest {
    if key == u32::MAX {
        return NONE;
    }
    Nearest {
        best: key_distance(key),
        second: if second > 256 { u32::MAX } else { second },
        index: (key & (KEY_INDEX_LIMIT as u32 - 1)) as usize,
    }
}

#[inline(always)]
fn scan_keyed(a: &[Descriptor], b: &[Descriptor], rows: &mut [Nearest], cols: &mut [Nearest]) {
    let nb = b.len();
    let mut dist = vec![0u32; nb];
    let mut col_key = vec![u32::MAX; nb];
    let mut col_second = vec![u32::MAX; nb];
    let idx: Vec<u32> = (0..nb as u32).collect();
    // word-sliced copy of `b` so the distance loop vectorizes
    let words: [Vec<u64>; 4] = std::array::from_fn(|w| b.iter().map(|d| d.0[w]).collect());
    for (i, da) in a.iter().enumerate() {
        let q = da.0;
        for (j, d) in dist.iter_mut().enumerate() {
            *d = (q[0] ^ words[0][j]).count_ones()
                + (q[1] ^ words[1][j]).count_ones()
                + (q[2] ^ words[2][j]).count_ones()
                + (q[3] ^ words[3][j]).count_ones();
        }
        let ki = i as u32;
        for ((&d, ck), cs) in dist.iter().zip(col_key.iter_mut()).zip(col_second.iter_mut()) {
            *cs = (*cs).min(key_distance(*ck).max(d));
            *ck = (*ck).min(d << KEY_SHIFT | ki);
        }
        let mut lane_key = [u32::MAX; LANES];
        let mut lane_second = [u32::MAX; LANES];
        let chunks = dist.chunks_exact(LANES);
        let tail = chunks.remainder();
        for (dc, ic) in chunks.zip(idx.chunks_exact(LANES)) {
            for l in 0..LANES {
                lane_second[l] = lane_second[l].min(key_distance(lane_key[l]).max(dc[l]));
                lane_key[l] = lane_key[l].min(dc[l] << KEY_SHIFT | ic[l]);
            }
        }
        let base = nb - tail.len();
        for (t, &d) in tail.iter().enumerate() {
            lane_second[0] = lane_second[0].min(key_distance(lane_key[0]).max(d));
            lane_key[0] = lane_key[0].min(d << KEY_SHIFT | (base + t) as u32);
        }
        let (win, &key) = lane_key.iter().enumerate().min_by_key(|(_, &k)| k).unwrap();
        let mut second = lane_second.iter().copied().min().unwrap();
        for (l, &k) in lane_key.iter().enumerate() {
            if l != win {
                second = second.min(key_distance(k));
            }
        }
        rows[i] = unpack(key, second);
    }
    for (j, c) in cols.iter_mut().enumerate() {
        *c = unpack(col_key[j], col_second[j]);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512bw,popcnt")]
unsafe fn scan_avx512(a: &[Descriptor], b: &[Descriptor], rows: &mut [Nearest], cols: &mut [Nearest]) {
    scan_keyed(a, b, rows, cols)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,popcnt")]
unsafe fn scan_avx2(a: &[Descriptor], b: &[Descriptor], rows: &mut [Nearest], cols: &mut [Nearest]) {
    scan_keyed(a, b, rows, cols)
}

fn scan(a: &[Descriptor], b: &[Descriptor], rows: &mut [Nearest], cols: &mut [Nearest]) {
    if a.len() >= KEY_INDEX_LIMIT || b.len() >= KEY_INDEX_LIMIT {
        return scan_generic(a, b, rows, cols);
    }
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("avx512bw") && has!("popcnt") {
            // SAFETY: the required features were detected at runtime just above.
            unsafe { scan_avx512(a, b, rows, cols) };
            return;
        }
        if has!("avx2") && has!("popcnt") {
            // SAFETY: as above.
            unsafe { scan_avx2(a, b, rows, cols) };
            return;
        }
    }
    scan_keyed(a, b, rows, cols)
}

/// Brute-force mutual nearest neighbours passing the ratio test in both
/// directions, sorted by (distance, index_a, index_b).
pub fn match_descriptors(fa: &FeatureSet, fb: &FeatureSet) -> Vec<Match> {
    let (a, b) = (&fa.descriptors, &fb.descriptors);
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut rows = vec![NONE; a.len()];
    let mut cols = vec![NONE; b.len()];
    scan(a, b, &mut rows, &mut cols);
    let mut out: Vec<Match> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let col = &cols[row.index];
            (col.index == i && row.distinct() && col.distinct()).then_some(Match {
                index_a: i,
                index_b: row.index,
                distance: row.best,
            })
        })
        .collect();
    out.sort_by_key(|m| (m.distance, m.index_a, m.index_b));
    out
}

// ---------------------------------------------------------------------------
// Homography

/// Row-major 3x3 projective transform scaled so `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `theta` radians (image axes, y down) about `(cx, cy)`.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Homography::translation(cx, cy)
            * Homography([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            * Homography::translation(-cx, -cy)
    }

    /// Rescales so that `h33 = 1`.
    pub fn normalized(self) -> Result<Self, GeomError> {
        let m = self.0;
        let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeomError::NumericalFailure);
        }
        let h33 = m[2][2] / norm;
        if h33.abs() < 1e-12 {
            return Err(GeomError::NumericalFailure);
        }
        let s = m[2][2];
        Ok(Homography(m.map(|r| r.map(|v| v / s))))
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = &self.0;
        let det = self.det();
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Homography(adj.map(|r| r.map(|v| v / det))).normalized().ok()
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn project(&self, p: Point) -> Option<Point> {
        let m = &self.0;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    /// `|self - other|_F / |other|_F` after both are normalized.
    pub fn relative_error(&self, other: &Homography) -> f64 {
        let a = self.normalized().map(|h| h.0).unwrap_or(self.0);
        let b = other.normalized().map(|h| h.0).unwrap_or(other.0);
        let num: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().flatten().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    /// Largest displacement between where `self` and `other` send the four
    /// corners of a `w x h` frame.
    /// Distances between where `self` and `other` send the four corners of
    /// a `w x h` frame; infinite where either maps a corner to infinity.
    pub fn corner_distances(&self, other: &Homography, w: f64, h: f64) -> [f64; 4] {
        [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]].map(|c| match (self.project(c), other.project(c)) {
            (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
            _ => f64::INFINITY,
        })
    }

    /// Largest corner displacement.
    pub fn corner_transfer_error(&self, other: &Homography, w: f64, h: f64) -> f64 {
        self.corner_distances(other, w, h).into_iter().fold(0.0, f64::max)
    }

    pub fn mean_corner_transfer_error(&self, other: &Homography, w: f64, h: f64) -> f64 {
        self.corner_distances(other, w, h).iter().sum::<f64>() / 4.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mul for Homography {
    type Output = Homography;
    fn mul(self, rhs: Homography) -> Homography {
        let (a, b) = (&self.0, &rhs.0);
        Homography(std::array::from_fn(|r| {
            std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum())
        }))
    }
}

/// Hartley normalization: centroid to the origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[Point]) -> Result<([[f64; 3]; 3], Vec<Point>), GeomError> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return Err(GeomError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]];
    let normed = pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    Ok((t, normed))
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() / 2.0
}

fn degenerate(pts: &[Point]) -> bool {
    const EPS: f64 = 1e-9;
    if pts.len() == 4 {
        return (0..4).any(|skip| {
            let t: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
            triangle_area(t[0], t[1], t[2]) < EPS
        });
    }
    // all points on one line: the scatter matrix loses rank
    let n = pts.len() as f64;
    let (sxx, syy, sxy) = pts.iter().fold((0.0, 0.0, 0.0), |(a, b, c), p| {
        (a + p[0] * p[0], b + p[1] * p[1], c + p[0] * p[1])
    });
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let smallest = tr / 2.0 - ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
    smallest < EPS
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors as columns of the second matrix.
pub fn jacobi_eigen<const N: usize>(mut a: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..N)
            .flat_map(|p| (0..N).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        let diag: f64 = (0..N).map(|p| a[p][p] * a[p][p]).sum();
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for p in 0..N - 1 {
            for q in p + 1..N {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    (std::array::from_fn(|i| a[i][i]), v)
}

/// Normalized DLT from `src[i] -> dst[i]` correspondences.
pub fn dlt_homography(src: &[Point], dst: &[Point]) -> Result<Homography, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch);
    }
    if src.len() < 4 {
        return Err(GeomError::NotEnoughPoints(src.len()));
    }
    let (ts, ns) = normalizing_transform(src)?;
    let (td, nd) = normalizing_transform(dst)?;
    if degenerate(&ns) || degenerate(&nd) {
        return Err(GeomError::DegenerateConfiguration);
    }

    let mut ata = [[0.0f64; 9]; 9];
    for (s, d) in ns.iter().zip(&nd) {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for i in 0..9 {
            for j in i..9 {
                ata[i][j] += r1[i] * r1[j] + r2[i] * r2[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            ata[i][j] = ata[j][i];
        }
    }
    let (vals, vecs) = jacobi_eigen(ata);
    let k = (0..9).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let hn = Homography(std::array::from_fn(|r| std::array::from_fn(|c| vecs[3 * r + c][k])));

    let td_inv = Homography(td).inverse().ok_or(GeomError::NumericalFailure)?;
    let h = (td_inv * hn * Homography(ts)).normalized()?;
    if !h.is_finite() || h.det().abs() < 1e-300 {
        return Err(GeomError::DegenerateConfiguration);
    }
    Ok(h)
}

/// Distance between `dst` and the projection of `src`.
pub fn reprojection_error(h: &Homography, src: Point, dst: Point) -> Result<f64, GeomError> {
    let p = h.project(src).ok_or(GeomError::PointAtInfinity)?;
    Ok(((p[0] - dst[0]).powi(2) + (p[1] - dst[1]).powi(2)).sqrt())
}

// ---------------------------------------------------------------------------
// RANSAC

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier cut-off on reprojection error, px.
    pub ransac_threshold: f64,
    /// Minimum inliers / matches for acceptance.
    pub min_inlier_ratio: f64,
    /// Maximum mean inlier reprojection error of the final model, px.
    pub max_reproj_error: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_matches: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            ransac_threshold: 10.0,
            min_inlier_ratio: 0.3,
            max_reproj_error: 20.0,
            confidence: 0.995,
            max_iterations: 2000,
            min_matches: 15,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.ransac_threshold > 0.0
            && self.max_reproj_error > 0.0
            && self.min_inlier_ratio > 0.0
            && self.min_inlier_ratio < 1.0
            && self.confidence > 0.0
            && self.confidence < 1.0
            && self.max_iterations > 0
            && self.min_matches >= 4;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid RANSAC parameters: {self:?}"))
        }
    }

    /// Iterations needed to draw one all-inlier sample with `confidence`
    /// given inlier fraction `w`, capped at `max_iterations`.
    pub fn adaptive_iterations(&self, w: f64) -> usize {
        let p_good = w.powi(4);
        if p_good >= 1.0 {
            return 1;
        }
        if p_good <= 0.0 {
            return self.max_iterations;
        }
        let n = ((1.0 - self.confidence).ln() / (1.0 - p_good).ln()).ceil();
        if n.is_finite() {
            (n.max(1.0) as usize).min(self.max_iterations)
        } else {
            self.max_iterations
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooFewMatches,
    LowInlierRatio,
    HighReprojError,
    DegenerateModel,
    None,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::TooFewMatches => "TooFewMatches",
            RejectReason::LowInlierRatio => "LowInlierRatio",
            RejectReason::HighReprojError => "HighReprojError",
            RejectReason::DegenerateModel => "DegenerateModel",
            RejectReason::None => "None",
        })
    }
}

impl std::str::FromStr for RejectReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "TooFewMatches" => RejectReason::TooFewMatches,
            "LowInlierRatio" => RejectReason::LowInlierRatio,
            "HighReprojError" => RejectReason::HighReprojError,
            "DegenerateModel" => RejectReason::DegenerateModel,
            "None" => RejectReason::None,
            other => return Err(format!("unknown reject reason {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMatchStats {
    pub frame_a: usize,
    pub frame_b: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub inlier_ratio: f64,
    /// Mean over inliers; 0 when there are none.
    pub mean_reproj_error: f64,
    pub homography: Option<Homography>,
    pub accepted: bool,
    pub reject_reason: RejectReason,
    /// Positions of the inliers within the match list.
    pub inliers: Vec<usize>,
}

pub const PAIR_CSV_HEADER: &str =
    "frame_a,frame_b,n_matches,n_inliers,inlier_ratio,mean_reproj_error,accepted,reject_reason";

impl PairMatchStats {
    fn rejected(n_matches: usize, reason: RejectReason) -> Self {
        PairMatchStats {
            frame_a: 0,
            frame_b: 0,
            n_matches,
            n_inliers: 0,
            inlier_ratio: 0.0,
            mean_reproj_error: 0.0,
            homography: None,
            accepted: false,
            reject_reason: reason,
            inliers: Vec::new(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{}",
            self.frame_a,
            self.frame_b,
            self.n_matches,
            self.n_inliers,
            self.inlier_ratio,
            self.mean_reproj_error,
            self.accepted,
            self.reject_reason
        )
    }
}

/// Inlier positions and their mean error under `h`.
pub fn consensus(h: &Homography, src: &[Point], dst: &[Point], threshold: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, (&s, &d)) in src.iter().zip(dst).enumerate() {
        if let Ok(e) = reprojection_error(h, s, d) {
            if e < threshold {
                inliers.push(i);
                sum += e;
            }
        }
    }
    let mean = if inliers.is_empty() {
        0.0
    } else {
        sum / inliers.len() as f64
    };
    (inliers, mean)
}

/// Deterministic stream of minimal-sample hypotheses; `None` marks a
/// degenerate draw.
pub struct Hypotheses<'a> {
    src: &'a [Point],
    dst: &'a [Point],
    rng: ChaCha8Rng,
}

impl<'a> Hypotheses<'a> {
    pub fn new(src: &'a [Point], dst: &'a [Point], seed: u64) -> Self {
        Hypotheses {
            src,
            dst,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for Hypotheses<'_> {
    type Item = Option<Homography>;
    fn next(&mut self) -> Option<Self::Item> {
        if self.src.len() < 4 {
            return None;
        }
        let idx = index::sample(&mut self.rng, self.src.len(), 4);
        let s: Vec<Point> = idx.iter().map(|i| self.src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|i| self.dst[i]).collect();
        Some(dlt_homography(&s, &d).ok())
    }
}

/// RANSAC on raw correspondences; see [`ransac_homography`].
pub fn ransac_points(src: &[Point], dst: &[Point], p: &RansacParams) -> PairMatchStats {
    let n = src.len();
    if n < p.min_matches.max(4) {
        return PairMatchStats::rejected(n, RejectReason::TooFewMatches);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut needed = p.max_iterations;
    for (iter, hyp) in Hypotheses::new(src, dst, p.seed).enumerate() {
        if iter >= needed {
            break;
        }
        let Some(h) = hyp else { continue };
        let (inl, mean) = consensus(&h, src, dst, p.ransac_threshold);
        let better = match &best {
            None => !inl.is_empty(),
            Some((b, bm)) => inl.len() > b.len() || (inl.len() == b.len() && mean < *bm),
        };
        if better {
            needed = p.adaptive_iterations(inl.len() as f64 / n as f64);
            best = Some((inl, mean));
        }
    }

    let Some((best_inliers, _)) = best.filter(|(b, _)| b.len() >= 4) else {
        return PairMatchStats::rejected(n, RejectReason::DegenerateModel);
    };
    let s: Vec<Point> = best_inliers.iter().map(|&i| src[i]).collect();
    let d: Vec<Point> = best_inliers.iter().map(|&i| dst[i]).collect();
    let Ok(h) = dlt_homography(&s, &d) else {
        return PairMatchStats::rejected(n, RejectReason::DegenerateModel);
    };
    let (inliers, mean) = consensus(&h, src, dst, p.ransac_threshold);
    let ratio = inliers.len() as f64 / n as f64;
    let reason = if inliers.len() < 4 {
        RejectReason::DegenerateModel
    } else if ratio < p.min_inlier_ratio {
        RejectReason::LowInlierRatio
    } else if mean > p.max_reproj_error {
        RejectReason::HighReprojError
    } else {
        RejectReason::None
    };
    PairMatchStats {
        frame_a: 0,
        frame_b: 0,
        n_matches: n,
        n_inliers: inliers.len(),
        inlier_ratio: ratio,
        mean_reproj_error: mean,
        homography: Some(h),
        accepted: reason == RejectReason::None,
        reject_reason: reason,
        inliers,
    }
}

fn keypoint_xy(k: &Keypoint) -> Point {
    [k.x as f64, k.y as f64]
}

/// Fits a homography from frame-a keypoints to frame-b keypoints through
/// `matches` and applies the acceptance thresholds to the refit model.
pub fn ransac_homography(
    matches: &[Match],
    kpa: &[Keypoint],
    kpb: &[Keypoint],
    p: &RansacParams,
) -> PairMatchStats {
    let src: Vec<Point> = matches.iter().map(|m| keypoint_xy(&kpa[m.index_a])).collect();
    let dst: Vec<Point> = matches.iter().map(|m| keypoint_xy(&kpb[m.index_b])).collect();
    ransac_points(&src, &dst, p)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Per-pair RNG seed; independent of evaluation order.
pub fn pair_seed(global: u64, frame_a: usize, frame_b: usize) -> u64 {
    global ^ (frame_a as u64).wrapping_mul(GOLDEN).wrapping_add(frame_b as u64)
}

/// Match then fit, with the pair's derived seed.
pub fn evaluate_pair(fa: &FeatureSet, fb: &FeatureSet, p: &RansacParams) -> PairMatchStats {
    let matches = match_descriptors(fa, fb);
    let params = RansacParams {
        seed: pair_seed(p.seed, fa.frame_index, fb.frame_index),
        ..*p
    };
    let mut stats = ransac_homography(&matches, &fa.keypoints, &fb.keypoints, &params);
    stats.frame_a = fa.frame_index;
    stats.frame_b = fb.frame_index;
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set_from(descs: &[Descriptor]) -> FeatureSet {
        FeatureSet {
            frame_index: 0,
            keypoints: (0..descs.len()).map(|i| Keypoint::at(i as f32, 0.0)).collect(),
            descriptors: descs.to_vec(),
        }
    }

    fn random_descs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Descriptor> {
        (0..n).map(|_| Descriptor(rng.random())).collect()
    }

    fn flip_bits(d: &Descriptor, rng: &mut ChaCha8Rng, k: usize) -> Descriptor {
        let mut out = *d;
        for i in index::sample(rng, 256, k) {
            out.0[i / 64] ^= 1 << (i % 64);
        }
        out
    }

    #[test]
    fn hamming_basics() {
        let a = Descriptor([0xDEAD_BEEF, 1, 2, 3]);
        assert_eq!(hamming(&a, &a), 0);
        let not_a = Descriptor(a.0.map(|w| !w));
        assert_eq!(hamming(&a, &not_a), 256);
        let mut b = a;
        b.0[2] ^= 1 << 17;
        assert_eq!(hamming(&a, &b), 1);
    }

    #[test]
    fn empty_sets_match_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = set_from(&random_descs(&mut rng, 5));
        assert!(match_descriptors(&FeatureSet::default(), &b).is_empty());
        assert!(match_descriptors(&b, &FeatureSet::default()).is_empty());
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = set_from(&random_descs(&mut rng, 200));
        let m = match_descriptors(&a, &a);
        assert_eq!(m.len(), 200);
        assert!(m.iter().all(|m| m.index_a == m.index_b && m.distance == 0));
    }

    #[test]
    fn planted_pairs_beat_decoys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_descs(&mut rng, 40);
        // b holds the planted partners (5 bits away) shuffled, then decoys
        // that are 120 bits away from their own base descriptor
        let perm = index::sample(&mut rng, 40, 40).into_vec();
        let mut b: Vec<Descriptor> = perm.iter().map(|&i| flip_bits(&base[i], &mut rng, 5)).collect();
        for d in &base {
            b.push(flip_bits(d, &mut rng, 120));
        }
        let m = match_descriptors(&set_from(&base), &set_from(&b));
        assert_eq!(m.len(), 40);
        for x in &m {
            assert_eq!(perm[x.index_b], x.index_a);
            assert_eq!(x.distance, 5);
        }
    }

    #[test]
    fn ratio_test_drops_ambiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_descs(&mut rng, 1);
        // two candidates at distances 10 and 11: 10 >= 0.8 * 11
        let b = vec![flip_bits(&a[0], &mut rng, 10), flip_bits(&a[0], &mut rng, 11)];
        assert!(match_descriptors(&set_from(&a), &set_from(&b)).is_empty());
    }

    fn square() -> Vec<Point> {
        vec![[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]]
    }

    #[test]
    fn dlt_identity_and_translation() {
        let h = dlt_homography(&square(), &square()).unwrap();
        assert!(h.relative_error(&Homography::IDENTITY) < 1e-12);
        let dst: Vec<Point> = square().iter().map(|p| [p[0] + 7.5, p[1] - 3.0]).collect();
        let h = dlt_homography(&square(), &dst).unwrap();
        let t = Homography::translation(7.5, -3.0);
        for r in 0..3 {
            for c in 0..3 {
                assert!((h.0[r][c] - t.0[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dlt_rejects_degenerate() {
        let line: Vec<Point> = (0..4).map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert_eq!(dlt_homography(&line, &square()), Err(GeomError::DegenerateConfiguration));
        let dup = vec![[1.0, 1.0]; 4];
        assert_eq!(dlt_homography(&dup, &square()), Err(GeomError::DegenerateConfiguration));
        let three_on_line = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        assert_eq!(
            dlt_homography(&three_on_line, &square()),
            Err(GeomError::DegenerateConfiguration)
        );
        assert_eq!(dlt_homography(&square()[..3], &square()[..3]), Err(GeomError::NotEnoughPoints(3)));
    }

    #[test]
    fn reprojection_cases() {
        let id = Homography::IDENTITY;
        assert_eq!(reprojection_error(&id, [3.0, 4.0], [3.0, 4.0]), Ok(0.0));
        assert_eq!(reprojection_error(&id, [1.0, 1.0], [4.0, 5.0]), Ok(5.0));
        let t = Homography::translation(3.0, 4.0);
        assert_eq!(reprojection_error(&t, [1.0, 1.0], [4.0, 5.0]), Ok(0.0));
        let at_inf = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]);
        assert_eq!(
            reprojection_error(&at_inf, [-1.0, 0.0], [0.0, 0.0]),
            Err(GeomError::PointAtInfinity)
        );
    }

    #[test]
    fn inverse_round_trip() {
        let h = Homography([[1.1, 0.05, 3.0], [-0.02, 0.95, -7.0], [1e-4, -2e-4, 1.0]]);
        let id = h * h.inverse().unwrap();
        assert!(id.relative_error(&Homography::IDENTITY) < 1e-12);
    }

    #[test]
    fn too_few_matches() {
        let pts: Vec<Point> = (0..14).map(|i| [i as f64, (i * i) as f64]).collect();
        let s = ransac_points(&pts, &pts, &RansacParams::default());
        assert_eq!(s.reject_reason, RejectReason::TooFewMatches);
        assert!(!s.accepted);
    }

    #[test]
    fn noiseless_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Homography([[0.98, 0.03, 12.0], [-0.04, 1.02, -5.0], [2e-5, 1e-5, 1.0]]);
        let src: Vec<Point> = (0..100)
            .map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)])
            .collect();
        let dst: Vec<Point> = src.iter().map(|&p| h.project(p).unwrap()).collect();
        let s = ransac_points(&src, &dst, &RansacParams::default());
        assert!(s.accepted);
        assert_eq!(s.n_inliers, 100);
        assert!(s.mean_reproj_error < 1e-6);
    }

    #[test]
    fn adaptive_bound() {
        let p = RansacParams::default();
        assert_eq!(p.adaptive_iterations(1.0), 1);
        assert_eq!(p.adaptive_iterations(0.0), 2000);
        // log(0.005) / log(1 - 0.5^4) = 82.1
        assert_eq!(p.adaptive_iterations(0.5), 83);
    }

    #[test]
    fn pair_seed_mixes_both_frames() {
        assert_ne!(pair_seed(7, 1, 2), pair_seed(7, 2, 1));
        assert_eq!(pair_seed(7, 0, 0), 7);
    }

    #[test]
    fn csv_row_format() {
        let mut s = PairMatchStats::rejected(12, RejectReason::TooFewMatches);
        s.frame_a = 3;
        s.frame_b = 5;
        assert_eq!(s.csv_row(), "3,5,12,0,0.000000,0.000000,false,TooFewMatches");
        assert_eq!(PAIR_CSV_HEADER.split(',').count(), s.csv_row().split(',').count());
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in any::<[u64; 4]>(), b in any::<[u64; 4]>(), c in any::<[u64; 4]>()) {
            let (a, b, c) = (Descriptor(a), Descriptor(b), Descriptor(c));
            prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
            prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
        }

        #[test]
        fn keyed_scan_equals_reference(seed in any::<u64>(), na in 1usize..40, nb in 1usize..40) {
            // two-bit descriptors force plenty of distance ties
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut small = |n: usize| -> Vec<Descriptor> {
                (0..n).map(|_| Descriptor([rng.random_range(0..4u64), 0, 0, rng.random_range(0..2u64)])).collect()
            };
            let (a, b) = (small(na), small(nb));
            let (mut r1, mut c1) = (vec![NONE; na], vec![NONE; nb]);
            let (mut r2, mut c2) = (vec![NONE; na], vec![NONE; nb]);
            scan_generic(&a, &b, &mut r1, &mut c1);
            scan(&a, &b, &mut r2, &mut c2);
            prop_assert_eq!(r1, r2);
            prop_assert_eq!(c1, c2);
        }

        #[test]
        fn matching_symmetric_under_swap(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_descs(&mut rng, 60);
            let mut b: Vec<Descriptor> = a.iter().take(30).map(|d| flip_bits(d, &mut rng, 20)).collect();
            b.extend(random_descs(&mut rng, 30));
            let (fa, fb) = (set_from(&a), set_from(&b));
            let mut ab: Vec<(usize, usize)> = match_descriptors(&fa, &fb).iter().map(|m| (m.index_a, m.index_b)).collect();
            let mut ba: Vec<(usize, usize)> = match_descriptors(&fb, &fa).iter().map(|m| (m.index_b, m.index_a)).collect();
            ab.sort();
            ba.sort();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn raising_threshold_never_lowers_best_consensus(seed in any::<u64>(), t in 0.5f64..10.0, dt in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = crate::synthgen::random_homography(&mut rng);
            let src: Vec<Point> = (0..60).map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]).collect();
            let dst: Vec<Point> = src.iter().map(|&p| {
                let q = h.project(p).unwrap();
                [q[0] + rng.random_range(-8.0..8.0), q[1] + rng.random_range(-8.0..8.0)]
            }).collect();
            let hyps: Vec<Homography> = Hypotheses::new(&src, &dst, seed).take(50).flatten().collect();
            let best = |thr: f64| hyps.iter().map(|h| consensus(h, &src, &dst, thr).0.len()).max().unwrap_or(0);
            prop_assert!(best(t + dt) >= best(t));
        }

        #[test]
        fn ransac_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src: Vec<Point> = (0..40).map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]).collect();
            let dst: Vec<Point> = (0..40).map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]).collect();
            let p = RansacParams { seed, ..RansacParams::default() };
            prop_assert_eq!(ransac_points(&src, &dst, &p), ransac_points(&src, &dst, &p));
        }
    }

    #[test]
    fn dlt_recovers_random_homographies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let h = crate::synthgen::random_homography(&mut rng);
            let src: Vec<Point> = (0..8)
                .map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)])
                .collect();
            let dst: Vec<Point> = src.iter().map(|&p| h.project(p).unwrap()).collect();
            let est = dlt_homography(&src, &dst).unwrap();
            assert!(est.relative_error(&h) < 1e-6);
        }
    }
}
