//! Netpbm frame I/O and frame sequences.
//!
//! Frames live on disk as binary P5 (gray) or P6 (RGB) files named
//! `frame_%06d.pgm|ppm`, maxval 255. A sequence directory may carry a
//! `sequence.json` sidecar describing where the frames came from.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad magic: expected P5 or P6")]
    BadMagic,
    #[error("malformed netpbm header: {0}")]
    BadHeader(String),
    #[error("truncated body: expected {expected} bytes, found {found}")]
    TruncatedBody { expected: usize, found: usize },
    #[error("unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("frame {index} is {found}, sequence is {expected}")]
    DimensionMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("no frames found in {0}")]
    EmptySequence(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad sequence metadata {path}: {msg}")]
    Meta { path: PathBuf, msg: String },
}

impl ImgError {
    /// True for failures of the environment rather than of the input contract.
    pub fn is_io(&self) -> bool {
        matches!(self, ImgError::Io { .. } | ImgError::MissingFile(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImgError + '_ {
    move |source| ImgError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An 8-bit raster with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    /// Ordinal position in the owning sequence.
    pub index: usize,
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImgError> {
        if channels != 1 && channels != 3 {
            return Err(ImgError::InvalidFrame(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(ImgError::InvalidFrame("zero dimension".into()));
        }
        if data.len() != width * height * channels {
            return Err(ImgError::InvalidFrame(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
            index: 0,
        })
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    fn describe_dims(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// Single-channel 8-bit image, the input of every detector stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub index: usize,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImgError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImgError::InvalidFrame(format!(
                "gray data length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(GrayFrame {
            width,
            height,
            data,
            index: 0,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayFrame {
            width,
            height,
            data: vec![value; width * height],
            index: 0,
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayFrame {
            width,
            height,
            data,
            index: 0,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with border replication.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn into_frame(self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data,
            index: self.index,
        }
    }
}

/// Rec.601 luma; 1-channel frames are copied unchanged.
pub fn to_grayscale(frame: &Frame) -> GrayFrame {
    let data = match frame.channels {
        1 => frame.data.clone(),
        _ => frame
            .data
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect(),
    };
    GrayFrame {
        width: frame.width,
        height: frame.height,
        data,
        index: frame.index,
    }
}

struct HeaderCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            let c = self.buf[self.pos];
            if c == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImgError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImgError::BadHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImgError::BadHeader(format!("{what} out of range")))
    }
}

/// Decodes a binary P5/P6 image from memory.
pub fn decode_netpbm(buf: &[u8]) -> Result<Frame, ImgError> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(ImgError::BadMagic),
    };
    let mut cur = HeaderCursor { buf, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(ImgError::UnsupportedMaxval(maxval));
    }
    match buf.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ImgError::BadHeader("missing whitespace after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err(ImgError::BadHeader("zero dimension".into()));
    }
    let expected = width * height * channels;
    let body = &buf[cur.pos..];
    if body.len() < expected {
        return Err(ImgError::TruncatedBody {
            expected,
            found: body.len(),
        });
    }
    Frame::new(width, height, channels, body[..expected].to_vec())
}

pub fn encode_netpbm(frame: &Frame) -> Vec<u8> {
    let magic = if frame.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

pub fn load_netpbm(path: impl AsRef<Path>) -> Result<Frame, ImgError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ImgError::MissingFile(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    decode_netpbm(&buf)
}

pub fn save_netpbm(frame: &Frame, path: impl AsRef<Path>) -> Result<(), ImgError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_netpbm(frame)).map_err(io_err(path))
}

/// Provenance sidecar stored as `sequence.json` next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub enhancer: String,
    #[serde(default)]
    pub enhancer_params: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    30.0
}

impl Default for SequenceMeta {
    fn default() -> Self {
        SequenceMeta {
            id: "unnamed".into(),
            enhancer: "identity".into(),
            enhancer_params: String::new(),
            fps: default_fps(),
        }
    }
}

pub const META_FILE: &str = "sequence.json";

/// An on-disk run of frames `frame_000000 .. frame_{count-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub directory: PathBuf,
    /// `frame_%06d.pgm` or `frame_%06d.ppm`.
    pub pattern: String,
    pub count: usize,
    pub fps: f64,
    pub meta: SequenceMeta,
}

pub fn frame_file_name(index: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("frame_{index:06}.{ext}")
}

impl FrameSequence {
    /// Scans `dir` for contiguously numbered frames starting at 0.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ImgError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(ImgError::MissingFile(dir.to_path_buf()));
        }
        let ext = ["pgm", "ppm"]
            .into_iter()
            .find(|e| dir.join(format!("frame_000000.{e}")).is_file())
            .ok_or_else(|| ImgError::EmptySequence(dir.to_path_buf()))?;
        let mut count = 0;
        while dir.join(format!("frame_{count:06}.{ext}")).is_file() {
            count += 1;
        }
        let meta_path = dir.join(META_FILE);
        let meta = if meta_path.is_file() {
            let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            serde_json::from_str(&text).map_err(|e| ImgError::Meta {
                path: meta_path.clone(),
                msg: e.to_string(),
            })?
        } else {
            SequenceMeta {
                id: dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                ..SequenceMeta::default()
            }
        };
        Ok(FrameSequence {
            directory: dir.to_path_buf(),
            pattern: format!("frame_%06d.{ext}"),
            count,
            fps: meta.fps,
            meta,
        })
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        let ext = &self.pattern[self.pattern.len() - 3..];
        self.directory.join(format!("frame_{index:06}.{ext}"))
    }

    pub fn load(&self, index: usize) -> Result<Frame, ImgError> {
        Ok(load_netpbm(self.frame_path(index))?.with_index(index))
    }

    /// Loads every frame and checks they share dimensions.
    pub fn load_all(&self) -> Result<Vec<Frame>, ImgError> {
        let frames = par::try_map_range(self.count, |i| self.load(i))?;
        check_uniform(&frames)?;
        Ok(frames)
    }

    /// Writes `frames` (re-indexed 0..) and the metadata sidecar into `dir`.
    pub fn write(
        dir: impl AsRef<Path>,
        frames: &[Frame],
        meta: &SequenceMeta,
    ) -> Result<Self, ImgError> {
        let dir = dir.as_ref();
        check_uniform(frames)?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        par::try_map_range(frames.len(), |i| {
            save_netpbm(
                &frames[i],
                dir.join(frame_file_name(i, frames[i].channels)),
            )
        })?;
        write_meta(dir, meta)?;
        FrameSequence::open(dir)
    }
}

pub fn write_meta(dir: &Path, meta: &SequenceMeta) -> Result<(), ImgError> {
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Errors unless every frame has the dimensions of the first.
pub fn check_uniform(frames: &[Frame]) -> Result<(), ImgError> {
    let Some(first) = frames.first() else {
        return Ok(());
    };
    for (i, f) in frames.iter().enumerate() {
        if f.dims() != first.dims() {
            return Err(ImgError::DimensionMismatch {
                index: i,
                expected: first.describe_dims(),
                found: f.describe_dims(),
            });
        }
    }
    Ok(())
}
