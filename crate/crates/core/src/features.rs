//! ORB-style multi-scale keypoints with 256-bit binary descriptors.
//!
//! Recipe: area-averaged scale pyramid, FAST-9 segment test with 3x3
//! non-maximum suppression, Harris retention down to a per-level quota,
//! intensity-centroid orientation, and steered BRIEF comparisons drawn from
//! a frozen pair table (`data/brief_pairs.txt`).

use std::f32::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::GrayFrame;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} too small: level {level} would be {level_w}x{level_h} (< 32)")]
    TooSmall {
        width: usize,
        height: usize,
        level: usize,
        level_w: usize,
        level_h: usize,
    },
    #[error("bad detector parameters: {0}")]
    BadParams(String),
    #[error("{0} detector is not implemented (only orb)")]
    NotImplemented(DetectorKind),
    #[error("bad feature cache {path}: {msg}")]
    BadCache { path: PathBuf, msg: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Level-0 pixel coordinates.
    pub x: f32,
    pub y: f32,
    pub level: u8,
    /// Harris response after retention, FAST score straight out of the detector.
    pub score: f32,
    /// Radians in `[0, 2pi)`.
    pub angle: f32,
}

impl Keypoint {
    pub fn at(x: f32, y: f32) -> Self {
        Keypoint {
            x,
            y,
            level: 0,
            score: 0.0,
            angle: 0.0,
        }
    }
}

/// 256 comparison bits; bit `i` is bit `i % 64` of word `i / 64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (chunk, w) in out.chunks_exact_mut(8).zip(self.0) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let mut w = [0u64; 4];
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            w[i] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        Descriptor(w)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub frame_index: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Feature families the reports know about. Only ORB has an implementation;
/// the rest exist so configs and tables can name them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Orb,
    Sift,
    Brisk,
    Kaze,
    Akaze,
    SuperPoint,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Orb => "ORB",
            DetectorKind::Sift => "SIFT",
            DetectorKind::Brisk => "BRISK",
            DetectorKind::Kaze => "KAZE",
            DetectorKind::Akaze => "AKAZE",
            DetectorKind::SuperPoint => "SuperPoint",
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "orb" => DetectorKind::Orb,
            "sift" => DetectorKind::Sift,
            "brisk" => DetectorKind::Brisk,
            "kaze" => DetectorKind::Kaze,
            "akaze" => DetectorKind::Akaze,
            "superpoint" => DetectorKind::SuperPoint,
            other => return Err(FeatureError::BadParams(format!("unknown detector {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub max_features: usize,
    pub n_levels: usize,
    pub scale_factor: f64,
    pub fast_threshold: u8,
    /// Recorded for BRISK parity; unused by ORB.
    pub brisk_octaves: u32,
    /// Recorded for KAZE/AKAZE parity; unused by ORB.
    pub kaze_threshold: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            max_features: 1000,
            n_levels: 8,
            scale_factor: 1.2,
            fast_threshold: 20,
            brisk_octaves: 4,
            kaze_threshold: 0.001,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.max_features < 8 || self.n_levels < 1 || !(self.scale_factor > 1.0) {
            return Err(FeatureError::BadParams(format!(
                "need max_features >= 8, n_levels >= 1, scale_factor > 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pyramid

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<GrayFrame>,
    /// Level-0 pixels per level-k pixel.
    pub scales: Vec<f64>,
}

fn level_dim(dim: usize, scale: f64) -> usize {
    (dim as f64 / scale + 1e-9).floor() as usize
}

/// Taps `(source index, weight)` averaging `[i*f, (i+1)*f)` for each output `i`.
fn area_taps(out_len: usize, factor: f64) -> Vec<Vec<(usize, f32)>> {
    (0..out_len)
        .map(|i| {
            let lo = i as f64 * factor;
            let hi = lo + factor;
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi {
                let cover = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((j, (cover / factor) as f32));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

fn area_resize(img: &GrayFrame, w: usize, h: usize, factor: f64) -> GrayFrame {
    let tx = area_taps(w, factor);
    let ty = area_taps(h, factor);
    let mut rows = vec![0f32; img.height * w];
    for y in 0..img.height {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        for (x, taps) in tx.iter().enumerate() {
            rows[y * w + x] = taps.iter().map(|&(j, wt)| src[j] as f32 * wt).sum();
        }
    }
    let mut data = vec![0u8; w * h];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..w {
            let v: f32 = taps.iter().map(|&(j, wt)| rows[j * w + x] * wt).sum();
            data[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayFrame {
        width: w,
        height: h,
        data,
        index: img.index,
    }
}

/// Level `k` is `floor(dim / scale_factor^k)`, area-averaged from level 0.
pub fn build_pyramid(
    img: &GrayFrame,
    n_levels: usize,
    scale_factor: f64,
) -> Result<Pyramid, FeatureError> {
    let mut levels = Vec::with_capacity(n_levels);
    let mut scales = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let s = scale_factor.powi(k as i32);
        let (w, h) = (level_dim(img.width, s), level_dim(img.height, s));
        if w.min(h) < 32 {
            return Err(FeatureError::TooSmall {
                width: img.width,
                height: img.height,
                level: k,
                level_w: w,
                level_h: h,
            });
        }
        levels.push(if k == 0 {
            img.clone()
        } else {
            area_resize(img, w, h, s)
        });
        scales.push(s);
    }
    Ok(Pyramid { levels, scales })
}

// ---------------------------------------------------------------------------
// FAST

const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

fn has_arc9(mask: u32) -> bool {
    let mut r = mask | (mask << 16);
    for _ in 0..8 {
        r &= r >> 1;
    }
    r != 0
}

/// Segment-test score at an interior pixel: 0 for non-corners, otherwise the
/// larger of the summed excess `|I - p| - t` over the bright and dark sets.
fn fast_score(img: &GrayFrame, offsets: &[isize; 16], idx: usize, t: i32) -> u32 {
    let p = img.data[idx] as i32;
    let at = |k: usize| img.data[(idx as isize + offsets[k]) as usize] as i32;
    // at least two of the four compass points lie on any 9-arc
    let compass = [at(0), at(4), at(8), at(12)];
    let bright_c = compass.iter().filter(|&&v| v > p + t).count();
    let dark_c = compass.iter().filter(|&&v| v < p - t).count();
    if bright_c < 2 && dark_c < 2 {
        return 0;
    }
    let (mut bright, mut dark) = (0u32, 0u32);
    let (mut sb, mut sd) = (0u32, 0u32);
    for k in 0..16 {
        let v = at(k);
        if v > p + t {
            bright |= 1 << k;
            sb += (v - p - t) as u32;
        } else if v < p - t {
            dark |= 1 << k;
            sd += (p - v - t) as u32;
        }
    }
    let b = if has_arc9(bright) { sb } else { 0 };
    let d = if has_arc9(dark) { sd } else { 0 };
    b.max(d)
}

/// FAST-9 corners with 3x3 non-maximum suppression, in raster order.
///
/// Equal scores are resolved towards the earliest pixel in raster order.
pub fn detect_fast(img: &GrayFrame, threshold: u8) -> Vec<Keypoint> {
    let (w, h) = (img.width, img.height);
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let offsets: [isize; 16] = CIRCLE.map(|(dx, dy)| dy * w as isize + dx);
    let t = threshold as i32;
    let mut scores = vec![0u32; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            scores[y * w + x] = fast_score(img, &offsets, y * w + x, t);
        }
    }
    let mut out = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = scores[y * w + x];
            if s == 0 {
                continue;
            }
            let before = [(-1, -1), (0, -1), (1, -1), (-1, 0)];
            let after = [(1, 0), (-1, 1), (0, 1), (1, 1)];
            let nb = |(dx, dy): (isize, isize)| {
                scores[((y as isize + dy) * w as isize + x as isize + dx) as usize]
            };
            if before.iter().all(|&o| s > nb(o)) && after.iter().all(|&o| s >= nb(o)) {
                out.push(Keypoint {
                    x: x as f32,
                    y: y as f32,
                    level: 0,
                    score: s as f32,
                    angle: 0.0,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Harris retention

const HARRIS_K: f64 = 0.04;

/// Harris response from Sobel gradients summed over a 7x7 window.
pub fn harris_response(img: &GrayFrame, x: isize, y: isize) -> f64 {
    let (mut sxx, mut syy, mut sxy) = (0i64, 0i64, 0i64);
    let px = |x: isize, y: isize| img.get_clamped(x, y) as i64;
    for dy in -3..=3 {
        for dx in -3..=3 {
            let (u, v) = (x + dx, y + dy);
            let gx = px(u + 1, v - 1) + 2 * px(u + 1, v) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2 * px(u - 1, v)
                - px(u - 1, v + 1);
            let gy = px(u - 1, v + 1) + 2 * px(u, v + 1) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2 * px(u, v - 1)
                - px(u + 1, v - 1);
            sxx += gx * gx;
            syy += gy * gy;
            sxy += gx * gy;
        }
    }
    let (a, b, c) = (sxx as f64, syy as f64, sxy as f64);
    a * b - c * c - HARRIS_K * (a + b) * (a + b)
}

/// Scores keypoints by Harris response and keeps the best `n`, ordered by
/// (score desc, y asc, x asc).
pub fn harris_retain(img: &GrayFrame, keypoints: &[Keypoint], n: usize) -> Vec<Keypoint> {
    let mut scored: Vec<(f64, Keypoint)> = keypoints
        .iter()
        .map(|kp| {
            let r = harris_response(img, kp.x.round() as isize, kp.y.round() as isize);
            (r, Keypoint { score: r as f32, ..*kp })
        })
        .collect();
    scored.sort_by(|(ra, a), (rb, b)| {
        rb.total_cmp(ra)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    scored.truncate(n);
    scored.into_iter().map(|(_, kp)| kp).collect()
}

// ---------------------------------------------------------------------------
// Orientation

const PATCH_RADIUS: isize = 15;

fn umax() -> &'static [isize; 16] {
    static UMAX: OnceLock<[isize; 16]> = OnceLock::new();
    UMAX.get_or_init(|| {
        std::array::from_fn(|dy| {
            let dy = dy as isize;
            (0..=PATCH_RADIUS)
                .rev()
                .find(|dx| dx * dx + dy * dy <= PATCH_RADIUS * PATCH_RADIUS)
                .unwrap()
        })
    })
}

/// Intensity-centroid angle over the radius-15 disc, in `[0, 2pi)`.
///
/// A patch whose first moments both vanish has angle 0.
pub fn orientation(img: &GrayFrame, kp: &Keypoint) -> f32 {
    let (cx, cy) = (kp.x.round() as isize, kp.y.round() as isize);
    let (mut m10, mut m01) = (0i64, 0i64);
    let umax = umax();
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        let reach = umax[dy.unsigned_abs()];
        for dx in -reach..=reach {
            let v = img.get_clamped(cx + dx, cy + dy) as i64;
            m10 += dx as i64 * v;
            m01 += dy as i64 * v;
        }
    }
    if m10 == 0 && m01 == 0 {
        return 0.0;
    }
    let mut a = (m01 as f64).atan2(m10 as f64);
    if a < 0.0 {
        a += std::f64::consts::TAU;
    }
    let a = a as f32;
    if a >= TAU {
        0.0
    } else {
        a
    }
}

// ---------------------------------------------------------------------------
// Descriptor

/// Frozen comparison pairs `(x1, y1, x2, y2)` in `[-13, 13]`.
pub fn brief_pairs() -> &'static [[i8; 4]; 256] {
    static PAIRS: OnceLock<[[i8; 4]; 256]> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let rows: Vec<[i8; 4]> = include_str!("../data/brief_pairs.txt")
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let v: Vec<i8> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
                [v[0], v[1], v[2], v[3]]
            })
            .collect();
        rows.try_into().expect("pair table has 256 rows")
    })
}

/// 5x5 box sums with border replication; comparing sums compares means.
#[derive(Debug, Clone)]
pub struct SmoothedImage {
    pub width: usize,
    pub height: usize,
    sums: Vec<u16>,
}

impl SmoothedImage {
    pub fn new(img: &GrayFrame) -> Self {
        let (w, h) = (img.width, img.height);
        let mut rows = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = (-2..=2)
                    .map(|d| img.get_clamped(x as isize + d, y as isize) as u16)
                    .sum();
            }
        }
        let mut sums = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                sums[y * w + x] = (-2..=2isize)
                    .map(|d| rows[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
        SmoothedImage {
            width: w,
            height: h,
            sums,
        }
    }

    #[inline]
    fn at(&self, x: isize, y: isize) -> u16 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.sums[y * self.width + x]
    }
}

/// Steered BRIEF on a pre-smoothed image; `kp` is in that image's coordinates.
pub fn describe_smoothed(img: &SmoothedImage, kp: &Keypoint) -> Descriptor {
    let (cx, cy) = (kp.x.round() as isize, kp.y.round() as isize);
    let (s, c) = (kp.angle as f64).sin_cos();
    let rot = |x: i8, y: i8| {
        let (x, y) = (x as f64, y as f64);
        (
            (x * c - y * s).round() as isize,
            (x * s + y * c).round() as isize,
        )
    };
    let mut d = Descriptor::default();
    for (i, &[x1, y1, x2, y2]) in brief_pairs().iter().enumerate() {
        let (ax, ay) = rot(x1, y1);
        let (bx, by) = rot(x2, y2);
        if img.at(cx + ax, cy + ay) < img.at(cx + bx, cy + by) {
            d.set_bit(i);
        }
    }
    d
}

/// Smooths `img` and describes a single keypoint.
pub fn describe(img: &GrayFrame, kp: &Keypoint) -> Descriptor {
    describe_smoothed(&SmoothedImage::new(img), kp)
}

// ---------------------------------------------------------------------------
// Full extraction

/// Keypoint quota per level, proportional to level area with the rounding
/// remainder assigned to level 0.
pub fn level_quotas(pyr: &Pyramid, max_features: usize) -> Vec<usize> {
    let areas: Vec<usize> = pyr.levels.iter().map(|l| l.width * l.height).collect();
    let total: usize = areas.iter().sum();
    let mut q: Vec<usize> = areas.iter().map(|a| max_features * a / total).collect();
    q[0] += max_features - q.iter().sum::<usize>();
    q
}

pub fn detect_and_describe(
    img: &GrayFrame,
    p: &DetectorParams,
) -> Result<FeatureSet, FeatureError> {
    p.validate()?;
    let pyr = build_pyramid(img, p.n_levels, p.scale_factor)?;
    let quotas = level_quotas(&pyr, p.max_features);
    let mut set = FeatureSet {
        frame_index: img.index,
        ..FeatureSet::default()
    };
    for (k, level) in pyr.levels.iter().enumerate() {
        let corners = detect_fast(level, p.fast_threshold);
        if corners.is_empty() {
            continue;
        }
        let kept = harris_retain(level, &corners, quotas[k]);
        let smooth = SmoothedImage::new(level);
        let scale = pyr.scales[k] as f32;
        for kp in kept {
            let kp = Keypoint {
                angle: orientation(level, &kp),
                ..kp
            };
            set.descriptors.push(describe_smoothed(&smooth, &kp));
            set.keypoints.push(Keypoint {
                x: kp.x * scale,
                y: kp.y * scale,
                level: k as u8,
                ..kp
            });
        }
    }
    Ok(set)
}

/// Dispatches on detector family; everything but ORB is `NotImplemented`.
pub fn detect_with(
    kind: DetectorKind,
    img: &GrayFrame,
    p: &DetectorParams,
) -> Result<FeatureSet, FeatureError> {
    match kind {
        DetectorKind::Orb => detect_and_describe(img, p),
        other => Err(FeatureError::NotImplemented(other)),
    }
}

// ---------------------------------------------------------------------------
// Cache file
//
// "FBFS" | version u8 | count u32 | count x (x, y, angle, score: f32; level: u8;
// descriptor: 32 bytes), all little-endian.

pub const CACHE_MAGIC: &[u8; 4] = b"FBFS";
pub const CACHE_VERSION: u8 = 1;
const RECORD_LEN: usize = 4 * 4 + 1 + 32;

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + set.len() * RECORD_LEN);
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (kp, d) in set.keypoints.iter().zip(&set.descriptors) {
        for v in [kp.x, kp.y, kp.angle, kp.score] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(kp.level);
        out.extend_from_slice(&d.to_bytes());
    }
    out
}

pub fn decode_features(buf: &[u8], frame_index: usize) -> Result<FeatureSet, String> {
    if buf.len() < 9 || &buf[..4] != CACHE_MAGIC {
        return Err("missing FBFS magic".into());
    }
    if buf[4] != CACHE_VERSION {
        return Err(format!("unsupported version {}", buf[4]));
    }
    let count = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let body = &buf[9..];
    if body.len() != count * RECORD_LEN {
        return Err(format!(
            "expected {} record bytes, found {}",
            count * RECORD_LEN,
            body.len()
        ));
    }
    let mut set = FeatureSet {
        frame_index,
        ..FeatureSet::default()
    };
    for rec in body.chunks_exact(RECORD_LEN) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        set.keypoints.push(Keypoint {
            x: f(0),
            y: f(1),
            angle: f(2),
            score: f(3),
            level: rec[16],
        });
        set.descriptors
            .push(Descriptor::from_bytes(rec[17..].try_into().unwrap()));
    }
    Ok(set)
}

pub fn write_feature_cache(path: &Path, set: &FeatureSet) -> Result<(), FeatureError> {
    let io = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_features(set)).map_err(io)
}

pub fn read_feature_cache(path: &Path, frame_index: usize) -> Result<FeatureSet, FeatureError> {
    let buf = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_features(&buf, frame_index).map_err(|msg| FeatureError::BadCache {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn white_square() -> GrayFrame {
        GrayFrame::from_fn(32, 32, |x, y| {
            if (12..20).contains(&x) && (12..20).contains(&y) {
                255
            } else {
                0
            }
        })
    }

    #[test]
    fn pyramid_dimensions() {
        let img = GrayFrame::filled(640, 480, 9);
        let p = build_pyramid(&img, 1, 1.2).unwrap();
        assert_eq!(p.levels.len(), 1);
        assert_eq!(p.levels[0], img);
        let p = build_pyramid(&img, 2, 2.0).unwrap();
        assert_eq!((p.levels[1].width, p.levels[1].height), (320, 240));
        assert!(p.levels[1].data.iter().all(|&v| v == 9));
        let p = build_pyramid(&GrayFrame::filled(100, 100, 0), 4, 1.2).unwrap();
        assert_eq!((p.levels[3].width, p.levels[3].height), (57, 57));
        assert!(matches!(
            build_pyramid(&GrayFrame::filled(100, 100, 0), 8, 1.2),
            Err(FeatureError::TooSmall { level: 7, .. })
        ));
    }

    #[test]
    fn area_average_halving() {
        let img = GrayFrame::from_fn(64, 64, |x, y| ((x / 2 + y / 2) % 2 * 200) as u8);
        let p = build_pyramid(&img, 2, 2.0).unwrap();
        let l1 = &p.levels[1];
        assert_eq!(l1.get(0, 0), 0);
        assert_eq!(l1.get(1, 0), 200);
        // between-pixel averaging on a 2x2 checker
        let img = GrayFrame::from_fn(64, 64, |x, y| ((x + y) % 2 * 200) as u8);
        let l1 = build_pyramid(&img, 2, 2.0).unwrap().levels.remove(1);
        assert!(l1.data.iter().all(|&v| v == 100));
    }

    #[test]
    fn fast_on_constant_and_saturated_threshold() {
        assert!(detect_fast(&GrayFrame::filled(32, 32, 100), 20).is_empty());
        assert!(detect_fast(&white_square(), 255).is_empty());
    }

    #[test]
    fn fast_finds_square_corners() {
        let kps = detect_fast(&white_square(), 20);
        let truth = [(12.0, 12.0), (19.0, 12.0), (12.0, 19.0), (19.0, 19.0)];
        assert_eq!(kps.len(), 4, "{kps:?}");
        for (tx, ty) in truth {
            assert!(
                kps.iter().any(|k| (k.x - tx).abs() <= 1.0 && (k.y - ty).abs() <= 1.0),
                "no corner near ({tx},{ty}): {kps:?}"
            );
        }
    }

    #[test]
    fn harris_keeps_strongest() {
        let img = white_square();
        let kps = detect_fast(&img, 20);
        let all = harris_retain(&img, &kps, 10);
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        let best = harris_retain(&img, &kps, 1);
        let max = kps
            .iter()
            .map(|k| harris_response(&img, k.x as isize, k.y as isize))
            .fold(f64::MIN, f64::max);
        assert_eq!(best[0].score, max as f32);
    }

    #[test]
    fn harris_ties_break_on_y_then_x() {
        let img = GrayFrame::filled(32, 32, 50);
        let kps = [
            Keypoint::at(20.0, 9.0),
            Keypoint::at(5.0, 9.0),
            Keypoint::at(7.0, 3.0),
        ];
        let out = harris_retain(&img, &kps, 3);
        let order: Vec<(f32, f32)> = out.iter().map(|k| (k.x, k.y)).collect();
        assert_eq!(order, vec![(7.0, 3.0), (5.0, 9.0), (20.0, 9.0)]);
    }

    #[test]
    fn orientation_cases() {
        let center = Keypoint::at(20.0, 20.0);
        assert_eq!(orientation(&GrayFrame::filled(41, 41, 80), &center), 0.0);
        let ramp_x = GrayFrame::from_fn(41, 41, |x, _| (x * 5) as u8);
        assert!(orientation(&ramp_x, &center).abs() < 1e-6);
        let ramp_y = GrayFrame::from_fn(41, 41, |_, y| (y * 5) as u8);
        let a = orientation(&ramp_y, &center);
        assert!((a - std::f32::consts::FRAC_PI_2).abs() < 1e-6, "{a}");
        let ramp_neg = GrayFrame::from_fn(41, 41, |_, y| (200 - y * 5) as u8);
        let a = orientation(&ramp_neg, &center);
        assert!((a - 3.0 * std::f32::consts::FRAC_PI_2).abs() < 1e-6, "{a}");
    }

    #[test]
    fn pair_table_is_frozen() {
        let pairs = brief_pairs();
        assert_eq!(pairs[0], [-10, 13, -3, 3]);
        assert!(pairs.iter().flatten().all(|&v| (-13..=13).contains(&v)));
        assert!(pairs.iter().all(|p| (p[0], p[1]) != (p[2], p[3])));
    }

    #[test]
    fn constant_patch_gives_zero_descriptor() {
        let img = GrayFrame::filled(64, 64, 120);
        let mut kp = Keypoint::at(30.0, 30.0);
        kp.angle = 1.0;
        assert_eq!(describe(&img, &kp), Descriptor::default());
    }

    #[test]
    fn detect_on_constant_is_empty() {
        let set = detect_and_describe(&GrayFrame::filled(128, 128, 7), &DetectorParams::default())
            .unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn quotas_sum_to_cap() {
        let pyr = build_pyramid(&GrayFrame::filled(640, 480, 0), 8, 1.2).unwrap();
        let q = level_quotas(&pyr, 1000);
        assert_eq!(q.iter().sum::<usize>(), 1000);
        assert!(q.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn non_orb_detectors_are_named_but_absent() {
        let img = GrayFrame::filled(64, 64, 0);
        let p = DetectorParams::default();
        for k in ["sift", "kaze", "akaze", "brisk", "superpoint"] {
            let kind: DetectorKind = k.parse().unwrap();
            assert!(matches!(
                detect_with(kind, &img, &p),
                Err(FeatureError::NotImplemented(_))
            ));
        }
    }

    #[test]
    fn cache_rejects_garbage() {
        assert!(decode_features(b"FBFX\x01\0\0\0\0", 0).is_err());
        assert!(decode_features(b"FBFS\x01\x01\0\0\0", 0).is_err());
        assert!(decode_features(b"FBFS\x02\0\0\0\0", 0).is_err());
        assert_eq!(decode_features(b"FBFS\x01\0\0\0\0", 3).unwrap().frame_index, 3);
    }

    fn arb_set() -> impl Strategy<Value = FeatureSet> {
        proptest::collection::vec(
            (
                0f32..640.0,
                0f32..480.0,
                0f32..std::f32::consts::TAU,
                any::<f32>(),
                0u8..8,
                any::<[u64; 4]>(),
            ),
            0..20,
        )
        .prop_map(|recs| FeatureSet {
            frame_index: 0,
            keypoints: recs
                .iter()
                .map(|&(x, y, angle, score, level, _)| Keypoint {
                    x,
                    y,
                    level,
                    score,
                    angle,
                })
                .collect(),
            descriptors: recs.iter().map(|r| Descriptor(r.5)).collect(),
        })
    }

    proptest! {
        #[test]
        fn cache_round_trip(set in arb_set()) {
            let back = decode_features(&encode_features(&set), 0).unwrap();
            prop_assert_eq!(encode_features(&back), encode_features(&set));
        }

        #[test]
        fn descriptor_bytes_round_trip(words in any::<[u64; 4]>()) {
            let d = Descriptor(words);
            prop_assert_eq!(Descriptor::from_bytes(&d.to_bytes()), d);
        }
    }
}
