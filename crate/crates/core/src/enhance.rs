//! Classical enhancers used as controlled stimuli.
//!
//! Histogram equalization (global and contrast-limited adaptive), gray-world
//! white balance, and a two-input multi-scale fusion enhancer. Color frames
//! are equalized on luma only: the luma delta is added to every channel so
//! color differences pass through unchanged.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::imgio::{self, Frame, FrameSequence, GrayFrame, ImgError, SequenceMeta};
use crate::par;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("degenerate image: {0}")]
    DegenerateImage(&'static str),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("enhancer {enhancer} needs {needed}-channel frames, got {got}")]
    ChannelMismatch {
        enhancer: &'static str,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Img(#[from] ImgError),
}

// ---------------------------------------------------------------------------
// Histogram equalization

pub type Histogram = [u32; 256];

pub fn histogram(pixels: impl IntoIterator<Item = u8>) -> Histogram {
    let mut h = [0u32; 256];
    for p in pixels {
        h[p as usize] += 1;
    }
    h
}

/// CDF equalization lookup table:
/// `round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`.
///
/// Returns `None` when every sample sits in one bin.
pub fn he_mapping(hist: &Histogram) -> Option<[u8; 256]> {
    let total: u64 = hist.iter().map(|&c| c as u64).sum();
    let cdf_min = hist.iter().copied().find(|&c| c > 0)? as u64;
    let denom = total - cdf_min;
    if denom == 0 {
        return None;
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (v, &c) in hist.iter().enumerate() {
        cdf += c as u64;
        // values below the first occupied bin never occur; pin them to 0
        let num = 255 * cdf.saturating_sub(cdf_min);
        lut[v] = ((2 * num + denom) / (2 * denom)) as u8;
    }
    Some(lut)
}

/// Result of global equalization; `degenerate` marks a constant input that
/// was passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Equalized {
    pub image: GrayFrame,
    pub degenerate: bool,
}

pub fn global_he(img: &GrayFrame) -> Equalized {
    match he_mapping(&histogram(img.data.iter().copied())) {
        Some(lut) => Equalized {
            image: GrayFrame {
                data: img.data.iter().map(|&v| lut[v as usize]).collect(),
                ..img.clone()
            },
            degenerate: false,
        },
        None => Equalized {
            image: img.clone(),
            degenerate: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Maximum bin height as a fraction of the tile pixel count.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 0.01,
        }
    }
}

/// Clips every bin at `limit` and spreads the excess uniformly; the
/// `excess % 256` leftover goes one count each to evenly strided bins.
pub fn clip_histogram(hist: &Histogram, limit: u32) -> Histogram {
    let mut out = *hist;
    let mut excess = 0u64;
    for c in out.iter_mut() {
        if *c > limit {
            excess += (*c - limit) as u64;
            *c = limit;
        }
    }
    if excess == 0 {
        return out;
    }
    let add = (excess / 256) as u32;
    let rem = (excess % 256) as usize;
    for c in out.iter_mut() {
        *c += add;
    }
    if rem > 0 {
        let step = 256 / rem;
        for i in 0..rem {
            out[i * step] += 1;
        }
    }
    out
}

fn tile_bounds(len: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * len / tiles).collect()
}

/// Per-axis interpolation: for every coordinate, the lower/upper tile index
/// and the weight of the upper one. Outside the outermost tile centers the
/// edge tile is replicated.
fn axis_weights(len: usize, bounds: &[usize]) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = bounds
        .windows(2)
        .map(|b| (b[0] + b[1]) as f64 / 2.0 - 0.5)
        .collect();
    let last = centers.len() - 1;
    (0..len)
        .map(|x| {
            let x = x as f64;
            if x <= centers[0] {
                (0, 0, 0.0)
            } else if x >= centers[last] {
                (last, last, 0.0)
            } else {
                let i = centers.partition_point(|&c| c <= x) - 1;
                let a = (x - centers[i]) / (centers[i + 1] - centers[i]);
                (i, i + 1, a)
            }
        })
        .collect()
}

pub fn clahe(img: &GrayFrame, p: &ClaheParams) -> Result<GrayFrame, EnhanceError> {
    if p.tiles_x == 0 || p.tiles_y == 0 || !(p.clip_limit > 0.0) {
        return Err(EnhanceError::BadParams(format!(
            "clahe needs tiles >= 1 and clip_limit > 0, got {}x{} clip {}",
            p.tiles_x, p.tiles_y, p.clip_limit
        )));
    }
    if img.width < p.tiles_x || img.height < p.tiles_y {
        return Err(EnhanceError::BadParams(format!(
            "{}x{} image is smaller than the {}x{} tile grid",
            img.width, img.height, p.tiles_x, p.tiles_y
        )));
    }
    let xb = tile_bounds(img.width, p.tiles_x);
    let yb = tile_bounds(img.height, p.tiles_y);

    let mut luts = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let mut hist = [0u32; 256];
            for y in yb[ty]..yb[ty + 1] {
                for &v in &img.data[y * img.width + xb[tx]..y * img.width + xb[tx + 1]] {
                    hist[v as usize] += 1;
                }
            }
            let identity: [u8; 256] = std::array::from_fn(|v| v as u8);
            // a flat tile has nothing to equalize; clipping would otherwise
            // give it a tile-size dependent mapping
            if hist.iter().filter(|&&c| c > 0).count() < 2 {
                luts.push(identity);
                continue;
            }
            let tile_px = ((xb[tx + 1] - xb[tx]) * (yb[ty + 1] - yb[ty])) as f64;
            let limit = p.clip_limit * tile_px;
            if limit < tile_px {
                hist = clip_histogram(&hist, (limit.floor() as u32).max(1));
            }
            luts.push(he_mapping(&hist).unwrap_or(identity));
        }
    }

    let wx = axis_weights(img.width, &xb);
    let wy = axis_weights(img.height, &yb);
    let lut = |tx: usize, ty: usize| &luts[ty * p.tiles_x + tx];
    let mut data = Vec::with_capacity(img.data.len());
    for (y, &(y0, y1, b)) in wy.iter().enumerate() {
        for (x, &(x0, x1, a)) in wx.iter().enumerate() {
            let v = img.data[y * img.width + x] as usize;
            let top = (1.0 - a) * lut(x0, y0)[v] as f64 + a * lut(x1, y0)[v] as f64;
            let bot = (1.0 - a) * lut(x0, y1)[v] as f64 + a * lut(x1, y1)[v] as f64;
            data.push(((1.0 - b) * top + b * bot).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(GrayFrame { data, ..img.clone() })
}

/// Applies a luma transform to a frame of either channel count.
fn on_luma(
    frame: &Frame,
    f: impl FnOnce(&GrayFrame) -> Result<GrayFrame, EnhanceError>,
) -> Result<Frame, EnhanceError> {
    let luma = imgio::to_grayscale(frame);
    let mapped = f(&luma)?;
    if frame.channels == 1 {
        return Ok(Frame {
            data: mapped.data,
            ..frame.clone()
        });
    }
    let data = frame
        .data
        .chunks_exact(3)
        .zip(&mapped.data)
        .flat_map(|(px, &y_new)| {
            let y_old = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            let delta = y_new as f64 - y_old;
            px.iter()
                .map(move |&c| (c as f64 + delta).round().clamp(0.0, 255.0) as u8)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Frame {
        data,
        ..frame.clone()
    })
}

// ---------------------------------------------------------------------------
// White balance

pub fn gray_world_wb(img: &Frame) -> Result<Frame, EnhanceError> {
    if img.channels != 3 {
        return Err(EnhanceError::ChannelMismatch {
            enhancer: "grayworld",
            needed: 3,
            got: img.channels,
        });
    }
    let mut sums = [0u64; 3];
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            sums[c] += px[c] as u64;
        }
    }
    let n = (img.width * img.height) as f64;
    let means = sums.map(|s| s as f64 / n);
    if means.contains(&0.0) {
        return Err(EnhanceError::DegenerateImage("a channel mean is zero"));
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    let gains = means.map(|m| target / m);
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * gains[i % 3]).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Frame {
        data,
        ..img.clone()
    })
}

// ---------------------------------------------------------------------------
// Multi-scale fusion

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub pyramid_levels: usize,
    pub weight_epsilon: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            pyramid_levels: 5,
            weight_epsilon: 1e-3,
        }
    }
}

impl FusionParams {
    fn validate(&self, width: usize, height: usize) -> Result<(), EnhanceError> {
        if self.pyramid_levels < 2 || !(self.weight_epsilon > 0.0) {
            return Err(EnhanceError::BadParams(format!(
                "fusion needs >= 2 levels and epsilon > 0, got {} / {}",
                self.pyramid_levels, self.weight_epsilon
            )));
        }
        let top = width.min(height) >> (self.pyramid_levels - 1);
        if top < 2 {
            return Err(EnhanceError::BadParams(format!(
                "{width}x{height} too small for {} pyramid levels",
                self.pyramid_levels
            )));
        }
        Ok(())
    }
}

/// Real-valued single-channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Channel `c` of an interleaved frame, as 0..255 reals.
    fn channel(frame: &Frame, c: usize) -> Plane {
        Plane {
            width: frame.width,
            height: frame.height,
            data: frame
                .data
                .iter()
                .skip(c)
                .step_by(frame.channels)
                .map(|&v| v as f64)
                .collect(),
        }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn blur5(p: &Plane) -> Plane {
    let (w, h) = (p.width as isize, p.height as isize);
    let mut tmp = Plane::filled(p.width, p.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            tmp.data[(y * w + x) as usize] =
                (0..5).map(|k| BINOMIAL5[k] * p.at(x + k as isize - 2, y)).sum();
        }
    }
    let mut out = Plane::filled(p.width, p.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            out.data[(y * w + x) as usize] =
                (0..5).map(|k| BINOMIAL5[k] * tmp.at(x, y + k as isize - 2)).sum();
        }
    }
    out
}

fn reduce(p: &Plane) -> Plane {
    let b = blur5(p);
    let (w, h) = (p.width.div_ceil(2), p.height.div_ceil(2));
    let mut out = Plane::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = b.data[2 * y * p.width + 2 * x];
        }
    }
    out
}

/// Bilinear upsampling of a reduced plane back to `width x height`.
fn expand(p: &Plane, width: usize, height: usize) -> Plane {
    let mut out = Plane::filled(width, height, 0.0);
    for y in 0..height {
        let fy = y as f64 / 2.0;
        let y0 = fy.floor() as isize;
        let b = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 / 2.0;
            let x0 = fx.floor() as isize;
            let a = fx - x0 as f64;
            out.data[y * width + x] = (1.0 - b)
                * ((1.0 - a) * p.at(x0, y0) + a * p.at(x0 + 1, y0))
                + b * ((1.0 - a) * p.at(x0, y0 + 1) + a * p.at(x0 + 1, y0 + 1));
        }
    }
    out
}

fn gaussian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let mut pyr = vec![p.clone()];
    for _ in 1..levels {
        let next = reduce(pyr.last().unwrap());
        pyr.push(next);
    }
    pyr
}

fn laplacian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let g = gaussian_pyramid(p, levels);
    let mut lap: Vec<Plane> = g
        .windows(2)
        .map(|w| w[0].zip_map(&expand(&w[1], w[0].width, w[0].height), |a, b| a - b))
        .collect();
    lap.push(g[levels - 1].clone());
    lap
}

fn collapse(lap: &[Plane]) -> Plane {
    let mut acc = lap.last().unwrap().clone();
    for level in lap.iter().rev().skip(1) {
        acc = level.zip_map(&expand(&acc, level.width, level.height), |a, b| a + b);
    }
    acc
}

/// Blends `inputs` with per-pixel `weights` level by level: the Laplacian
/// pyramid of each input is scaled by the Gaussian pyramid of its weight,
/// summed, and collapsed. Weights are expected to sum to one per pixel.
pub fn blend_pyramids(inputs: &[Plane], weights: &[Plane], levels: usize) -> Plane {
    assert_eq!(inputs.len(), weights.len());
    let mut fused: Option<Vec<Plane>> = None;
    for (input, weight) in inputs.iter().zip(weights) {
        let lap = laplacian_pyramid(input, levels);
        let gw = gaussian_pyramid(weight, levels);
        let contrib: Vec<Plane> = lap
            .iter()
            .zip(&gw)
            .map(|(l, g)| l.zip_map(g, |a, b| a * b))
            .collect();
        fused = Some(match fused {
            None => contrib,
            Some(acc) => acc
                .iter()
                .zip(&contrib)
                .map(|(a, c)| a.zip_map(c, |x, y| x + y))
                .collect(),
        });
    }
    collapse(&fused.expect("at least one input"))
}

fn luma_plane(frame: &Frame) -> Plane {
    let g = imgio::to_grayscale(frame);
    Plane {
        width: g.width,
        height: g.height,
        data: g.data.iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

/// Sum of the local-contrast, saliency and well-exposedness maps.
pub fn fusion_weight(frame: &Frame) -> Plane {
    let y = luma_plane(frame);
    let blurred = blur5(&y);
    let (w, h) = (y.width as isize, y.height as isize);
    let mut out = Plane::filled(y.width, y.height, 0.0);
    for yy in 0..h {
        for xx in 0..w {
            let c = y.at(xx, yy);
            let lap = y.at(xx - 1, yy) + y.at(xx + 1, yy) + y.at(xx, yy - 1) + y.at(xx, yy + 1)
                - 4.0 * c;
            let i = (yy * w + xx) as usize;
            let saliency = (c - blurred.data[i]).abs();
            let exposed = (-(c - 0.5).powi(2) / (2.0 * 0.25 * 0.25)).exp();
            out.data[i] = lap.abs() + saliency + exposed;
        }
    }
    out
}

/// Fuses same-shaped frames using their normalized weight maps.
pub fn fuse_inputs(inputs: &[Frame], p: &FusionParams) -> Result<Frame, EnhanceError> {
    let first = inputs
        .first()
        .ok_or_else(|| EnhanceError::BadParams("fusion needs at least one input".into()))?;
    imgio::check_uniform(inputs)?;
    p.validate(first.width, first.height)?;

    let raw: Vec<Plane> = inputs.iter().map(fusion_weight).collect();
    let k = inputs.len() as f64;
    let mut total = Plane::filled(first.width, first.height, 0.0);
    for w in &raw {
        total = total.zip_map(w, |a, b| a + b);
    }
    let weights: Vec<Plane> = raw
        .iter()
        .map(|w| w.zip_map(&total, |wi, t| (wi + p.weight_epsilon) / (t + k * p.weight_epsilon)))
        .collect();

    let channels: Vec<Plane> = (0..first.channels)
        .map(|c| {
            let planes: Vec<Plane> = inputs.iter().map(|f| Plane::channel(f, c)).collect();
            blend_pyramids(&planes, &weights, p.pyramid_levels)
        })
        .collect();
    let mut data = vec![0u8; first.data.len()];
    for (c, plane) in channels.iter().enumerate() {
        for (i, &v) in plane.data.iter().enumerate() {
            data[i * first.channels + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Frame {
        data,
        ..first.clone()
    })
}

/// White-balanced and contrast-boosted inputs fused by their weight maps.
pub fn fusion_enhance(img: &Frame, p: &FusionParams) -> Result<Frame, EnhanceError> {
    if img.channels != 3 {
        return Err(EnhanceError::ChannelMismatch {
            enhancer: "fusion",
            needed: 3,
            got: img.channels,
        });
    }
    p.validate(img.width, img.height)?;
    let balanced = gray_world_wb(img)?;
    let contrast = on_luma(&balanced, |y| clahe(y, &ClaheParams::default()))?;
    fuse_inputs(&[balanced, contrast], p)
}

// ---------------------------------------------------------------------------
// Named enhancers

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Enhancer {
    Identity,
    Ghe,
    Clahe(ClaheParams),
    GrayWorld,
    Fusion(FusionParams),
}

fn parse_param<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, EnhanceError> {
    value
        .trim()
        .parse()
        .map_err(|_| EnhanceError::BadParams(format!("bad value for {key}: {value:?}")))
}

impl Enhancer {
    /// Builds an enhancer from its name and `key=value` parameters.
    ///
    /// Keys are the snake-case parameter field names; `tiles=8x8` and
    /// `clip=0.01` are accepted as shorthands for CLAHE.
    pub fn parse(name: &str, params: &[(String, String)]) -> Result<Self, EnhanceError> {
        let unknown =
            |k: &str| EnhanceError::BadParams(format!("unknown parameter {k:?} for {name}"));
        let mut e = match name {
            "identity" => Enhancer::Identity,
            "ghe" => Enhancer::Ghe,
            "clahe" => Enhancer::Clahe(ClaheParams::default()),
            "grayworld" => Enhancer::GrayWorld,
            "fusion" => Enhancer::Fusion(FusionParams::default()),
            other => {
                return Err(EnhanceError::BadParams(format!(
                    "unknown enhancer {other:?} (identity|ghe|clahe|grayworld|fusion)"
                )))
            }
        };
        for (k, v) in params {
            match (&mut e, k.as_str()) {
                (Enhancer::Clahe(c), "tiles") => {
                    let (x, y) = v
                        .split_once(['x', 'X'])
                        .ok_or_else(|| EnhanceError::BadParams(format!("tiles must be WxH: {v}")))?;
                    c.tiles_x = parse_param(k, x)?;
                    c.tiles_y = parse_param(k, y)?;
                }
                (Enhancer::Clahe(c), "tiles_x") => c.tiles_x = parse_param(k, v)?,
                (Enhancer::Clahe(c), "tiles_y") => c.tiles_y = parse_param(k, v)?,
                (Enhancer::Clahe(c), "clip" | "clip_limit") => c.clip_limit = parse_param(k, v)?,
                (Enhancer::Fusion(f), "levels" | "pyramid_levels") => {
                    f.pyramid_levels = parse_param(k, v)?
                }
                (Enhancer::Fusion(f), "epsilon" | "weight_epsilon") => {
                    f.weight_epsilon = parse_param(k, v)?
                }
                _ => return Err(unknown(k)),
            }
        }
        Ok(e)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Enhancer::Identity => "identity",
            Enhancer::Ghe => "ghe",
            Enhancer::Clahe(_) => "clahe",
            Enhancer::GrayWorld => "grayworld",
            Enhancer::Fusion(_) => "fusion",
        }
    }

    /// Canonical `key=value,...` parameter string.
    pub fn params_string(&self) -> String {
        match self {
            Enhancer::Clahe(c) => format!(
                "tiles_x={},tiles_y={},clip_limit={}",
                c.tiles_x, c.tiles_y, c.clip_limit
            ),
            Enhancer::Fusion(f) => format!(
                "pyramid_levels={},weight_epsilon={}",
                f.pyramid_levels, f.weight_epsilon
            ),
            _ => String::new(),
        }
    }

    pub fn apply(&self, frame: &Frame) -> Result<Frame, EnhanceError> {
        let out = match self {
            Enhancer::Identity => frame.clone(),
            Enhancer::Ghe => on_luma(frame, |y| Ok(global_he(y).image))?,
            Enhancer::Clahe(p) => on_luma(frame, |y| clahe(y, p))?,
            Enhancer::GrayWorld => gray_world_wb(frame)?,
            Enhancer::Fusion(p) => fusion_enhance(frame, p)?,
        };
        Ok(out.with_index(frame.index))
    }
}

impl fmt::Display for Enhancer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params = self.params_string();
        if params.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}({params})", self.name())
        }
    }
}

/// Enhances every frame of `seq` into `out_dir`, keeping indices and names.
pub fn apply_enhancer(
    seq: &FrameSequence,
    enhancer: &Enhancer,
    out_dir: impl AsRef<Path>,
) -> Result<FrameSequence, EnhanceError> {
    let frames = seq.load_all()?;
    let enhanced = par::map(&frames, |f| enhancer.apply(f))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let meta = SequenceMeta {
        enhancer: enhancer.name().to_string(),
        enhancer_params: enhancer.params_string(),
        ..seq.meta.clone()
    };
    Ok(FrameSequence::write(out_dir, &enhanced, &meta)?)
}
