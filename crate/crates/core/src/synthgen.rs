//! Synthetic sequences with known camera motion.
//!
//! A camera looks at a large planar texture. Every frame records the exact
//! homography taking its pixel coordinates to base coordinates (frame 0), so
//! the true transform between any two frames is
//! `h_to_base[b]^-1 * h_to_base[a]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{Frame, FrameSequence, GrayFrame, ImgError, SequenceMeta};
use crate::matchgeom::{Homography, Point};
use crate::par;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad motion: {0}")]
    BadMotion(String),
    #[error("degenerate model: {0}")]
    DegenerateModel(&'static str),
    #[error("texture must be at least 128x128, got {0}x{1}")]
    TextureTooSmall(usize, usize),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error("bad truth file: {0}")]
    Truth(String),
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

// ---------------------------------------------------------------------------
// Texture

/// Lattice-value noise with smoothstep interpolation; one octave.
fn value_noise_octave(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize, out: &mut [f64], amp: f64) {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let inv = 1.0 / cell as f64;
    for y in 0..h {
        let gy = y / cell;
        let ty = smooth((y % cell) as f64 * inv);
        for x in 0..w {
            let gx = x / cell;
            let tx = smooth((x % cell) as f64 * inv);
            let v00 = lattice[gy * gw + gx];
            let v10 = lattice[gy * gw + gx + 1];
            let v01 = lattice[(gy + 1) * gw + gx];
            let v11 = lattice[(gy + 1) * gw + gx + 1];
            let top = v00 + (v10 - v00) * tx;
            let bot = v01 + (v11 - v01) * tx;
            out[y * w + x] += amp * (top + (bot - top) * ty);
        }
    }
}

/// Seeded multi-octave value noise stretched to the full 8-bit range.
pub fn gen_texture(seed: u64, w: usize, h: usize) -> Result<Frame, SynthError> {
    if w < 128 || h < 128 {
        return Err(SynthError::TextureTooSmall(w, h));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; w * h];
    for (cell, amp) in [(64, 1.0), (32, 0.9), (16, 0.8), (8, 0.7), (4, 0.6)] {
        value_noise_octave(&mut rng, w, h, cell, &mut acc, amp);
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = 255.0 / (hi - lo).max(1e-12);
    let data = acc.iter().map(|&v| ((v - lo) * scale).round() as u8).collect();
    Ok(GrayFrame { width: w, height: h, data, index: 0 }.into_frame())
}

// ---------------------------------------------------------------------------
// Motion

/// Per-frame camera motion, applied in the previous frame's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Pixels per frame.
    pub translation: [f64; 2],
    /// Radians per frame about the frame center.
    pub rotation: f64,
    /// Scale per frame about the frame center; 1.0 is none.
    pub scale: f64,
    /// Added to the projective row of every step.
    pub perspective: [f64; 2],
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            translation: [0.0, 0.0],
            rotation: 0.0,
            scale: 1.0,
            perspective: [0.0, 0.0],
        }
    }
}

impl MotionSpec {
    /// Maps frame-k pixel coordinates into frame-(k-1) coordinates.
    pub fn step(&self, width: usize, height: usize) -> Homography {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let s = self.scale;
        let scale = Homography::translation(cx, cy)
            * Homography([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
            * Homography::translation(-cx, -cy);
        let mut h = Homography::translation(self.translation[0], self.translation[1])
            * Homography::rotation_about(self.rotation, cx, cy)
            * scale;
        h.0[2][0] += self.perspective[0];
        h.0[2][1] += self.perspective[1];
        h
    }

    /// Cumulative frame-to-base homographies for `count` frames.
    pub fn cumulative(&self, width: usize, height: usize, count: usize) -> Vec<Homography> {
        let step = self.step(width, height);
        let mut out = Vec::with_capacity(count);
        let mut acc = Homography::IDENTITY;
        for k in 0..count {
            if k > 0 {
                acc = (acc * step).normalized().unwrap_or(acc * step);
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub noise_sigma: f64,
    /// Bright occluding ellipses per frame.
    pub snow_density: usize,
    pub seed: u64,
}

/// The frozen `bench-drift` benchmark: 300 frames of 640x480 drifting
/// 2 px/frame and turning 0.002 rad/frame, noise sigma 5, 20 snow flakes.
pub fn bench_drift(seed: u64) -> (MotionSpec, RenderParams) {
    (
        MotionSpec {
            translation: [2.0, 0.0],
            rotation: 0.002,
            ..MotionSpec::default()
        },
        RenderParams {
            width: 640,
            height: 480,
            count: 300,
            noise_sigma: 5.0,
            snow_density: 20,
            seed,
        },
    )
}

/// Pure horizontal translation, 40 frames of 320x240 at 24 px/frame with
/// noise sigma 3 and no snow. Overlap with the subject shrinks 7.5% per
/// frame, so the furthest matchable offset follows from the geometry.
pub fn bench_translate(seed: u64) -> (MotionSpec, RenderParams) {
    (
        MotionSpec {
            translation: [24.0, 0.0],
            ..MotionSpec::default()
        },
        RenderParams {
            width: 320,
            height: 240,
            count: 40,
            noise_sigma: 3.0,
            snow_density: 0,
            seed,
        },
    )
}

pub const SPEC_NAMES: [&str; 2] = ["bench-drift", "bench-translate"];

/// Looks up a named benchmark spec.
pub fn named_spec(name: &str, seed: u64) -> Option<(MotionSpec, RenderParams)> {
    match name {
        "bench-drift" => Some(bench_drift(seed)),
        "bench-translate" => Some(bench_translate(seed)),
        _ => None,
    }
}

/// Texture is this many times the frame size along each axis.
pub const TEXTURE_OVERSIZE: usize = 4;

// ---------------------------------------------------------------------------
// Sequences

#[derive(Debug, Clone)]
pub struct GroundTruthSequence {
    pub frames: Vec<Frame>,
    pub h_to_base: Vec<Homography>,
    /// Texture pixel = base coordinate + offset.
    pub texture_offset: [f64; 2],
    pub motion: MotionSpec,
    pub render: RenderParams,
}

impl GroundTruthSequence {
    /// True transform from frame `a` pixel coordinates to frame `b`.
    pub fn pair_truth(&self, a: usize, b: usize) -> Homography {
        let inv_b = self.h_to_base[b].inverse().expect("truth homographies are invertible");
        (inv_b * self.h_to_base[a]).normalized().expect("finite truth")
    }
}

fn bilinear(tex: &Frame, x: f64, y: f64) -> f64 {
    let (w, h) = (tex.width as isize, tex.height as isize);
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let (a, b) = (x - x0 as f64, y - y0 as f64);
    let px = |x: isize, y: isize| tex.data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as f64;
    let top = px(x0, y0) + a * (px(x0 + 1, y0) - px(x0, y0));
    let bot = px(x0, y0 + 1) + a * (px(x0 + 1, y0 + 1) - px(x0, y0 + 1));
    top + b * (bot - top)
}

fn frame_corners(w: usize, h: usize) -> [Point; 4] {
    let (w, h) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

/// Renders `render.count` frames of `texture` along `motion`.
pub fn gen_sequence(
    texture: &Frame,
    motion: &MotionSpec,
    render: &RenderParams,
) -> Result<GroundTruthSequence, SynthError> {
    if texture.channels != 1 {
        return Err(SynthError::BadMotion("texture must be single-channel".into()));
    }
    let (w, h) = (render.width, render.height);
    let h_to_base = motion.cumulative(w, h, render.count);

    let mut lo = [f64::MAX; 2];
    let mut hi = [f64::MIN; 2];
    for (k, hk) in h_to_base.iter().enumerate() {
        let det = hk.det().abs();
        if !(0.05..=20.0).contains(&det) {
            return Err(SynthError::BadMotion(format!("frame {k} has |det| {det:.3}")));
        }
        for c in frame_corners(w, h) {
            let p = hk
                .project(c)
                .ok_or_else(|| SynthError::BadMotion(format!("frame {k} corner at infinity")))?;
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
    }
    let tex_size = [texture.width as f64, texture.height as f64];
    let mut offset = [0.0; 2];
    for i in 0..2 {
        let span = hi[i] - lo[i];
        if span > tex_size[i] - 2.0 {
            return Err(SynthError::BadMotion(format!(
                "trajectory spans {span:.0} px but texture is {} px",
                tex_size[i]
            )));
        }
        offset[i] = ((tex_size[i] - 1.0 - span) / 2.0 - lo[i]).round();
    }

    let normal = (render.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, render.noise_sigma).expect("finite sigma"));
    let frames = par::map_range(render.count, |k| {
        let hk = &h_to_base[k];
        let mut data = Vec::with_capacity(w * h);
        let mut rng = ChaCha8Rng::seed_from_u64(render.seed ^ (k as u64 + 1).wrapping_mul(GOLDEN));
        for y in 0..h {
            for x in 0..w {
                let p = hk.project([x as f64, y as f64]).expect("checked above");
                let mut v = bilinear(texture, p[0] + offset[0], p[1] + offset[1]);
                if let Some(n) = &normal {
                    v += n.sample(&mut rng);
                }
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        for _ in 0..render.snow_density {
            draw_flake(&mut data, w, h, &mut rng);
        }
        GrayFrame { width: w, height: h, data, index: k }.into_frame()
    });
    Ok(GroundTruthSequence {
        frames,
        h_to_base,
        texture_offset: offset,
        motion: *motion,
        render: *render,
    })
}

/// One opaque bright ellipse, radii 2-8 px.
fn draw_flake(data: &mut [u8], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let rx: f64 = rng.random_range(2.0..=8.0);
    let ry: f64 = rng.random_range(2.0..=8.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let value: u8 = rng.random_range(200..=255);
    let (s, c) = theta.sin_cos();
    let r = rx.max(ry).ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx.round() as isize + dx, cy.round() as isize + dy);
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let (a, b) = (u * c + v * s, -u * s + v * c);
            if (a / rx).powi(2) + (b / ry).powi(2) <= 1.0 {
                data[y as usize * w + x as usize] = value;
            }
        }
    }
}

/// Adds seeded i.i.d. Gaussian noise to every sample, clamped to 0..=255.
/// Frame `k` draws from its own stream, so the result does not depend on
/// how frames are scheduled.
pub fn add_noise(frames: &[Frame], sigma: f64, seed: u64) -> Vec<Frame> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    par::map(frames, |f| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (f.index as u64 + 1).wrapping_mul(GOLDEN).rotate_left(17));
        let data = f
            .data
            .iter()
            .map(|&v| (v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
            .collect();
        Frame { data, ..f.clone() }
    })
}

/// Renders `render` along `motion` over a fresh texture sized
/// [`TEXTURE_OVERSIZE`] times the frame.
pub fn gen_oversized(motion: &MotionSpec, render: &RenderParams) -> Result<GroundTruthSequence, SynthError> {
    let texture = gen_texture(
        render.seed,
        render.width * TEXTURE_OVERSIZE,
        render.height * TEXTURE_OVERSIZE,
    )?;
    gen_sequence(&texture, motion, render)
}

pub fn bench_drift_sequence(seed: u64) -> Result<GroundTruthSequence, SynthError> {
    let (motion, render) = bench_drift(seed);
    gen_oversized(&motion, &render)
}

// ---------------------------------------------------------------------------
// truth.json

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub noise_sigma: f64,
    pub snow_density: usize,
    pub texture_offset: [f64; 2],
    pub motion: MotionSpec,
    /// Frame-to-base homographies, row-major, 12 significant digits.
    pub h_to_base: Vec<[f64; 9]>,
}

pub const TRUTH_FILE: &str = "truth.json";

fn sig12(v: f64) -> f64 {
    format!("{v:.11e}").parse().unwrap_or(v)
}

impl TruthFile {
    pub fn from_sequence(g: &GroundTruthSequence) -> Self {
        TruthFile {
            seed: g.render.seed,
            width: g.render.width,
            height: g.render.height,
            count: g.render.count,
            noise_sigma: g.render.noise_sigma,
            snow_density: g.render.snow_density,
            texture_offset: g.texture_offset,
            motion: g.motion,
            h_to_base: g
                .h_to_base
                .iter()
                .map(|h| {
                    let f: Vec<f64> = h.0.iter().flatten().map(|&v| sig12(v)).collect();
                    f.try_into().unwrap()
                })
                .collect(),
        }
    }

    pub fn homography(&self, k: usize) -> Homography {
        let m = &self.h_to_base[k];
        Homography([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])
    }
}

/// Writes frames, `sequence.json` and `truth.json` into `dir`.
pub fn write_sequence(
    dir: &Path,
    g: &GroundTruthSequence,
    id: &str,
) -> Result<FrameSequence, SynthError> {
    let meta = SequenceMeta {
        id: id.to_string(),
        ..SequenceMeta::default()
    };
    let seq = FrameSequence::write(dir, &g.frames, &meta)?;
    let path = dir.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&TruthFile::from_sequence(g)).expect("truth serializes");
    fs::write(&path, text + "\n").map_err(|source| ImgError::Io { path, source })?;
    Ok(seq)
}

pub fn read_truth(dir: &Path) -> Result<TruthFile, SynthError> {
    let path = dir.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|source| ImgError::Io { path, source })?;
    serde_json::from_str(&text).map_err(|e| SynthError::Truth(e.to_string()))
}

// ---------------------------------------------------------------------------
// Planted correspondences

/// Random homography with bounded skew and perspective, |det| in [0.1, 10].
pub fn random_homography(rng: &mut impl Rng) -> Homography {
    loop {
        let h = Homography([
            [rng.random_range(0.5..1.5), rng.random_range(-0.3..0.3), rng.random_range(-50.0..50.0)],
            [rng.random_range(-0.3..0.3), rng.random_range(0.5..1.5), rng.random_range(-50.0..50.0)],
            [rng.random_range(-5e-4..5e-4), rng.random_range(-5e-4..5e-4), 1.0],
        ]);
        if (0.1..=10.0).contains(&h.det().abs()) {
            return h;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedMatches {
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
    pub truth: Homography,
    /// `true` where `dst[i]` is `truth(src[i])` plus noise.
    pub planted: Vec<bool>,
}

/// `n_inliers` correspondences through a random homography with Gaussian
/// noise `sigma`, shuffled among `n_outliers` uniform ones, in a 640x480 frame.
pub fn planted_matches(seed: u64, n_inliers: usize, n_outliers: usize, sigma: f64) -> PlantedMatches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_homography(&mut rng);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut rows: Vec<(Point, Point, bool)> = Vec::with_capacity(n_inliers + n_outliers);
    while rows.len() < n_inliers {
        let s = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        let Some(d) = truth.project(s) else { continue };
        let d = [d[0] + normal.sample(&mut rng), d[1] + normal.sample(&mut rng)];
        rows.push((s, d, true));
    }
    for _ in 0..n_outliers {
        let s = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        let d = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        rows.push((s, d, false));
    }
    rows.shuffle(&mut rng);
    PlantedMatches {
        src: rows.iter().map(|r| r.0).collect(),
        dst: rows.iter().map(|r| r.1).collect(),
        truth,
        planted: rows.iter().map(|r| r.2).collect(),
    }
}

// ---------------------------------------------------------------------------
// Overlap

fn clip_polygon(poly: &[Point], inside: impl Fn(Point) -> bool, cut: impl Fn(Point, Point) -> Point) -> Vec<Point> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        match (inside(prev), inside(cur)) {
            (true, true) => out.push(cur),
            (true, false) => out.push(cut(prev, cur)),
            (false, true) => {
                out.push(cut(prev, cur));
                out.push(cur);
            }
            (false, false) => {}
        }
    }
    out
}

fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Fraction of the `w x h` frame covered by the frame warped through `h`.
pub fn overlap_fraction(h: &Homography, w: f64, h_px: f64) -> Result<f64, SynthError> {
    let m = &h.0;
    let corners = [[0.0, 0.0], [w, 0.0], [w, h_px], [0.0, h_px]];
    let mut poly = Vec::with_capacity(4);
    for c in corners {
        let wc = m[2][0] * c[0] + m[2][1] * c[1] + m[2][2];
        if wc <= 1e-12 {
            return Err(SynthError::DegenerateModel("frame corner maps through infinity"));
        }
        poly.push(h.project(c).expect("positive w"));
    }
    let lerp = |a: Point, b: Point, t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    for (axis, bound, keep_below) in [(0, 0.0, false), (0, w, true), (1, 0.0, false), (1, h_px, true)] {
        if poly.is_empty() {
            break;
        }
        poly = clip_polygon(
            &poly,
            |p| if keep_below { p[axis] <= bound } else { p[axis] >= bound },
            |a, b| lerp(a, b, (bound - a[axis]) / (b[axis] - a[axis])),
        );
    }
    if poly.len() < 3 {
        return Ok(0.0);
    }
    Ok((polygon_area(&poly) / (w * h_px)).clamp(0.0, 1.0))
}
