//! Layered settings: built-in defaults, then `--config` file, then flags.

use std::path::Path;

use fmbench::enhance::{ClaheParams, FusionParams};
use fmbench::features::{DetectorKind, DetectorParams};
use fmbench::matchgeom::RansacParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub detector: DetectorKind,
    pub detector_params: DetectorParams,
    pub ransac: RansacParams,
    pub clahe: ClaheParams,
    pub fusion: FusionParams,
    /// LMS offset horizon.
    pub n: usize,
    /// FMF scan horizon.
    pub horizon: usize,
    // synthetic-sequence overrides; `None` keeps the named spec's value
    pub noise_sigma: Option<f64>,
    pub snow_density: Option<usize>,
    pub count: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            detector: DetectorKind::Orb,
            detector_params: DetectorParams::default(),
            ransac: RansacParams::default(),
            clahe: ClaheParams::default(),
            fusion: FusionParams::default(),
            n: 10,
            horizon: 200,
            noise_sigma: None,
            snow_density: None,
            count: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value for {key}: {value:?}"))
}

impl Settings {
    /// Sets one field by its snake-case name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let d = &mut self.detector_params;
        let r = &mut self.ransac;
        match key {
            "detector" => self.detector = v.parse().map_err(|e| format!("{e}"))?,
            "max_features" => d.max_features = parse(key, v)?,
            "n_levels" => d.n_levels = parse(key, v)?,
            "scale_factor" => d.scale_factor = parse(key, v)?,
            "fast_threshold" => d.fast_threshold = parse(key, v)?,
            "brisk_octaves" => d.brisk_octaves = parse(key, v)?,
            "kaze_threshold" => d.kaze_threshold = parse(key, v)?,
            "ransac_threshold" => r.ransac_threshold = parse(key, v)?,
            "min_inlier_ratio" => r.min_inlier_ratio = parse(key, v)?,
            "max_reproj_error" => r.max_reproj_error = parse(key, v)?,
            "confidence" => r.confidence = parse(key, v)?,
            "max_iterations" => r.max_iterations = parse(key, v)?,
            "min_matches" => r.min_matches = parse(key, v)?,
            "seed" => r.seed = parse(key, v)?,
            "tiles_x" => self.clahe.tiles_x = parse(key, v)?,
            "tiles_y" => self.clahe.tiles_y = parse(key, v)?,
            "clip_limit" => self.clahe.clip_limit = parse(key, v)?,
            "pyramid_levels" => self.fusion.pyramid_levels = parse(key, v)?,
            "weight_epsilon" => self.fusion.weight_epsilon = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = Some(parse(key, v)?),
            "snow_density" => self.snow_density = Some(parse(key, v)?),
            "count" => self.count = Some(parse(key, v)?),
            other => return Err(format!("unknown setting {other:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), String> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", lineno + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        self.apply_config_text(&text).map_err(ConfigError::Bad)
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Bad(String),
}
