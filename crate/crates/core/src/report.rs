//! Multi-run tables and plot data.
//!
//! Tables put enhancers on rows and detectors (or offsets) on columns, flag
//! the best cell of each column with `*`, and render reals at two decimals.
//! Every artifact lists the manifest hashes of the runs it was built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::matchgeom::RATIO_TEST;
use crate::metrics::{cumulative_from_fmf, decay_curve, FmfRecord, OffsetStats, StabilityProfile};
use crate::pipeline::{io_err, read_csv, PipelineError, Summary, MANIFEST_COMMENT};

/// A contributing run, as cited in artifact headers.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRef {
    pub label: String,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmfEntry {
    pub enhancer: String,
    pub detector: String,
    pub average_fmf: f64,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayEntry {
    pub enhancer: String,
    /// Mean inliers at offsets 1, 2, ...
    pub mean_inliers: Vec<f64>,
    pub manifest_sha256: String,
}

/// A labelled grid of optional reals with per-column best flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub sources: Vec<RunRef>,
}

impl Table {
    /// Row index of the maximum in each column; the first row wins ties.
    pub fn best_per_column(&self) -> Vec<Option<usize>> {
        (0..self.columns.len())
            .map(|c| {
                let mut best: Option<(usize, f64)> = None;
                for (r, (_, cells)) in self.rows.iter().enumerate() {
                    if let Some(v) = cells[c] {
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((r, v));
                        }
                    }
                }
                best.map(|(r, _)| r)
            })
            .collect()
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let best = self.best_per_column();
        let mut out = vec![std::iter::once(self.corner.clone())
            .chain(self.columns.iter().cloned())
            .collect::<Vec<_>>()];
        for (r, (label, cells)) in self.rows.iter().enumerate() {
            let mut line = vec![label.clone()];
            for (c, v) in cells.iter().enumerate() {
                line.push(match v {
                    Some(v) if best[c] == Some(r) => format!("{v:.2}*"),
                    Some(v) => format!("{v:.2}"),
                    None => "-".to_string(),
                });
            }
            out.push(line);
        }
        out
    }

    fn source_lines(&self) -> String {
        let mut text = conventions_line();
        for s in &self.sources {
            text.push_str(&format!("{MANIFEST_COMMENT}{} label={}\n", s.manifest_sha256, s.label));
        }
        text
    }

    pub fn to_csv(&self) -> String {
        let mut text = self.source_lines();
        for line in self.cells() {
            text.push_str(&line.join(","));
            text.push('\n');
        }
        text
    }

    /// `|`-delimited columns padded to a common width.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let ncols = cells[0].len();
        let widths: Vec<usize> = (0..ncols)
            .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut text = self.source_lines();
        for line in &cells {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            text.push_str(padded.join(" | ").trim_end());
            text.push('\n');
        }
        text
    }
}

/// Matching conventions shared by every run, stated in each artifact.
pub fn conventions_line() -> String {
    format!("# matching: ratio_test={RATIO_TEST} cross_check=mutual detection_channel=luma\n")
}

fn duplicate(what: &str) -> PipelineError {
    PipelineError::Contract(format!("duplicate run for {what}"))
}

/// Enhancer x detector grid of average FMF.
pub fn fmf_table(runs: &[FmfEntry]) -> Result<Table, PipelineError> {
    if runs.is_empty() {
        return Err(PipelineError::Contract("fmf table needs at least one run".into()));
    }
    let enhancers: BTreeSet<&str> = runs.iter().map(|r| r.enhancer.as_str()).collect();
    let detectors: BTreeSet<&str> = runs.iter().map(|r| r.detector.as_str()).collect();
    let mut grid: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in runs {
        if grid
            .insert((r.enhancer.as_str(), r.detector.as_str()), r.average_fmf)
            .is_some()
        {
            return Err(duplicate(&format!("{} x {}", r.enhancer, r.detector)));
        }
    }
    Ok(Table {
        corner: "enhancer".into(),
        columns: detectors.iter().map(|d| d.to_string()).collect(),
        rows: enhancers
            .iter()
            .map(|e| {
                (
                    e.to_string(),
                    detectors.iter().map(|d| grid.get(&(*e, *d)).copied()).collect(),
                )
            })
            .collect(),
        sources: sorted_sources(runs.iter().map(|r| (format!("{}/{}", r.enhancer, r.detector), &r.manifest_sha256))),
    })
}

/// Mean inliers per offset `1..=max_offset`, one row per enhancer.
pub fn decay_table(runs: &[DecayEntry], max_offset: usize) -> Result<Table, PipelineError> {
    if runs.is_empty() {
        return Err(PipelineError::Contract("decay table needs at least one run".into()));
    }
    let mut rows: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for r in runs {
        let cells = (0..max_offset).map(|k| r.mean_inliers.get(k).copied()).collect();
        if rows.insert(r.enhancer.as_str(), cells).is_some() {
            return Err(duplicate(&r.enhancer));
        }
    }
    Ok(Table {
        corner: "enhancer".into(),
        columns: (1..=max_offset).map(|k| k.to_string()).collect(),
        rows: rows.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        sources: sorted_sources(runs.iter().map(|r| (r.enhancer.clone(), &r.manifest_sha256))),
    })
}

fn sorted_sources<'a>(it: impl Iterator<Item = (String, &'a String)>) -> Vec<RunRef> {
    let mut v: Vec<RunRef> = it
        .map(|(label, h)| RunRef {
            label,
            manifest_sha256: h.clone(),
        })
        .collect();
    v.sort_by(|a, b| a.label.cmp(&b.label));
    v
}

/// Plot series of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRun {
    pub label: String,
    pub manifest_sha256: String,
    /// (offset, mean inliers)
    pub decay: Vec<(usize, f64)>,
    /// (offset, cumulative accepted pairs)
    pub cumulative: Vec<(usize, usize)>,
}

pub const SERIES_FILE: &str = "series.txt";

/// Writes `<label>_decay.dat` and `<label>_cumulative.dat` per run and a
/// `series.txt` listing every series; returns the written paths.
pub fn emit_curves(runs: &[CurveRun], out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut labels = BTreeSet::new();
    let mut written = Vec::new();
    let mut series = conventions_line() + "# label\tcurve\tfile\tmanifest_sha256\n";
    for run in runs {
        if !labels.insert(run.label.as_str()) {
            return Err(duplicate(&run.label));
        }
        let header = format!("{}{MANIFEST_COMMENT}{}\n", conventions_line(), run.manifest_sha256);
        let decay: String = run.decay.iter().map(|(k, v)| format!("{k} {v:.6}\n")).collect();
        let cumulative: String = run.cumulative.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
        for (curve, columns, body) in [
            ("decay", "# offset mean_inliers\n", decay),
            ("cumulative", "# offset accepted_pairs\n", cumulative),
        ] {
            let name = format!("{}_{curve}.dat", run.label);
            let path = out_dir.join(&name);
            fs::write(&path, format!("{header}{columns}{body}")).map_err(io_err(&path))?;
            series.push_str(&format!("{}\t{curve}\t{name}\t{}\n", run.label, run.manifest_sha256));
            written.push(path);
        }
    }
    let path = out_dir.join(SERIES_FILE);
    fs::write(&path, series).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Reading run directories

/// What `report` needs from one run directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub label: String,
    pub detector: String,
    pub lms: Option<(String, Vec<StabilityProfile>, usize)>,
    pub fmf: Option<(String, Vec<FmfRecord>, usize)>,
}

fn bad(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::BadFile {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T, PipelineError> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad(path, format!("bad field {i} in row {:?}", rec)))
}

pub fn read_lms_csv(path: &Path) -> Result<(Option<String>, Vec<StabilityProfile>), PipelineError> {
    let (hash, rows) = read_csv(path)?;
    let mut profiles: Vec<StabilityProfile> = Vec::new();
    for rec in &rows {
        let subject: usize = field(path, rec, 0)?;
        let stats = OffsetStats {
            offset: field(path, rec, 1)?,
            n_matches: 0,
            n_inliers: field(path, rec, 2)?,
            inlier_ratio: field(path, rec, 3)?,
            mean_reproj_error: field(path, rec, 4)?,
            accepted: field(path, rec, 5)?,
        };
        match profiles.last_mut() {
            Some(p) if p.subject_frame == subject => p.per_offset.push(stats),
            _ => profiles.push(StabilityProfile {
                subject_frame: subject,
                per_offset: vec![stats],
            }),
        }
    }
    Ok((hash, profiles))
}

pub fn read_fmf_csv(path: &Path) -> Result<(Option<String>, Vec<FmfRecord>), PipelineError> {
    let (hash, rows) = read_csv(path)?;
    let records = rows
        .iter()
        .map(|rec| {
            Ok(FmfRecord {
                subject_frame: field(path, rec, 0)?,
                fmf: field(path, rec, 1)?,
                capped: field(path, rec, 2)?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok((hash, records))
}

/// Loads the metric CSVs a run directory's `summary.json` points at.
pub fn read_run(dir: &Path) -> Result<RunData, PipelineError> {
    let summary = Summary::read(dir)?;
    let any_hash = summary
        .lms
        .as_ref()
        .map(|s| &s.manifest_sha256)
        .or(summary.fmf.as_ref().map(|s| &s.manifest_sha256))
        .ok_or_else(|| bad(dir, "no lms or fmf results in summary.json"))?;
    let manifest = summary
        .manifests
        .get(any_hash)
        .ok_or_else(|| bad(dir, "summary.json lacks the run manifest"))?;
    let check = |path: &Path, got: Option<String>, want: &str| match got {
        Some(h) if h == want => Ok(()),
        _ => Err(bad(path, "manifest hash does not match summary.json")),
    };
    let lms = match &summary.lms {
        Some(s) => {
            let path = dir.join(&s.csv);
            let (hash, profiles) = read_lms_csv(&path)?;
            check(&path, hash, &s.manifest_sha256)?;
            Some((s.manifest_sha256.clone(), profiles, s.n))
        }
        None => None,
    };
    let fmf = match &summary.fmf {
        Some(s) => {
            let path = dir.join(&s.csv);
            let (hash, records) = read_fmf_csv(&path)?;
            check(&path, hash, &s.manifest_sha256)?;
            Some((s.manifest_sha256.clone(), records, s.summary.horizon))
        }
        None => None,
    };
    Ok(RunData {
        dir: dir.to_path_buf(),
        label: manifest.label().to_string(),
        detector: manifest.detector.clone(),
        lms,
        fmf,
    })
}

/// Offsets shown in the decay table.
pub const DECAY_TABLE_OFFSETS: usize = 10;

/// Builds every table and curve from `runs` into `out_dir`.
pub fn write_report(runs: &[RunData], out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };

    let fmf_entries: Vec<FmfEntry> = runs
        .iter()
        .filter_map(|r| {
            r.fmf.as_ref().map(|(h, records, _)| FmfEntry {
                enhancer: r.label.clone(),
                detector: r.detector.clone(),
                average_fmf: crate::metrics::summarize_fmf(records, 0).average,
                manifest_sha256: h.clone(),
            })
        })
        .collect();
    if !fmf_entries.is_empty() {
        let t = fmf_table(&fmf_entries)?;
        emit("fmf_table.csv", t.to_csv())?;
        emit("fmf_table.txt", t.to_text())?;
    }

    let decay_entries: Vec<DecayEntry> = runs
        .iter()
        .filter_map(|r| {
            r.lms.as_ref().map(|(h, profiles, n)| DecayEntry {
                enhancer: r.label.clone(),
                mean_inliers: decay_curve(profiles, *n).iter().map(|d| d.mean_inliers).collect(),
                manifest_sha256: h.clone(),
            })
        })
        .collect();
    if !decay_entries.is_empty() {
        let t = decay_table(&decay_entries, DECAY_TABLE_OFFSETS)?;
        emit("decay_table.csv", t.to_csv())?;
        emit("decay_table.txt", t.to_text())?;
    }

    let curves: Vec<CurveRun> = runs
        .iter()
        .map(|r| CurveRun {
            label: r.label.clone(),
            manifest_sha256: r
                .fmf
                .as_ref()
                .map(|f| f.0.clone())
                .or(r.lms.as_ref().map(|l| l.0.clone()))
                .unwrap_or_default(),
            decay: r
                .lms
                .as_ref()
                .map(|(_, p, n)| decay_curve(p, *n).iter().map(|d| (d.offset, d.mean_inliers)).collect())
                .unwrap_or_default(),
            cumulative: r
                .fmf
                .as_ref()
                .map(|(_, rec, horizon)| cumulative_from_fmf(rec, *horizon))
                .unwrap_or_default(),
        })
        .collect();
    written.extend(emit_curves(&curves, &out_dir.join("curves"))?);
    Ok(written)
}
