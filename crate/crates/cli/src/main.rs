//! `fmbench`: generate benchmark sequences, enhance them, extract features,
//! and measure local matching stability, furthest matchable frame and image
//! quality.
//!
//! Exit status: 0 on success, 1 when inputs or parameters violate a
//! contract, 2 on filesystem failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmbench::enhance::{apply_enhancer, Enhancer};
use fmbench::imgio::FrameSequence;
use fmbench::metrics::{furthest_matchable, local_stability, sequence_quality};
use fmbench::pipeline::{
    build_feature_cache, load_features, write_fmf_run, write_lms_run, write_quality_run,
    PipelineError, QualityManifest, RunManifest,
};
use fmbench::report::{read_run, write_report};
use fmbench::synthgen::{add_noise, gen_oversized, named_spec, write_sequence, SPEC_NAMES};

use config::{ConfigError, Settings};

#[derive(Parser, Debug)]
#[command(name = "fmbench", version, about = "Frame-matching benchmark toolkit")]
struct Cli {
    /// Worker threads (default: all cores). Never changes any output byte.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of key=value lines overriding defaults; flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic benchmark sequence with ground truth.
    Gen(GenArgs),
    /// Apply a named enhancer to every frame of a sequence.
    Enhance(EnhanceArgs),
    /// Extract and cache features for a sequence.
    Features(FeaturesArgs),
    /// Local matching stability over the next n frames.
    Lms(LmsArgs),
    /// Furthest matchable frame per subject.
    Fmf(FmfArgs),
    /// PSNR/SSIM of an enhanced sequence against its original.
    Quality(QualityArgs),
    /// Tables and plot data from one or more run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Named benchmark spec.
    #[arg(long, default_value = "bench-drift")]
    spec: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    snow_density: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Extra Gaussian noise added to the rendered frames.
    #[arg(long)]
    add_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// identity | ghe | clahe | grayworld | fusion
    #[arg(long)]
    method: String,
    /// CLAHE tile grid, WxH.
    #[arg(long)]
    tiles: Option<String>,
    /// CLAHE clip limit as a fraction of tile pixels.
    #[arg(long)]
    clip: Option<f64>,
    /// Fusion pyramid depth.
    #[arg(long)]
    levels: Option<usize>,
    /// Fusion weight regularizer.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    /// orb (others are recorded for configuration only)
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    max_features: Option<usize>,
    /// Pyramid levels.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    fast_threshold: Option<u8>,
}

#[derive(Args, Debug)]
struct RansacArgs {
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    inlier_ratio: Option<f64>,
    #[arg(long)]
    max_reproj: Option<f64>,
    #[arg(long)]
    min_matches: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args, Debug)]
struct LmsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Offsets evaluated per subject frame.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    ransac: RansacArgs,
}

#[derive(Args, Debug)]
struct FmfArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Largest offset scanned per subject.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    ransac: RansacArgs,
}

#[derive(Args, Debug)]
struct QualityArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    enh: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory holding summary.json and metric CSVs; repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Contract(String),
    Io(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Contract(e.to_string())
        }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}
from_core!(
    fmbench::imgio::ImgError,
    fmbench::enhance::EnhanceError,
    fmbench::features::FeatureError,
    fmbench::metrics::MetricsError,
    fmbench::synthgen::SynthError
);

type Result<T> = std::result::Result<T, Failure>;

fn contract(msg: impl Into<String>) -> Failure {
    Failure::Contract(msg.into())
}

fn overlay(s: &mut Settings, pairs: &[(&str, Option<String>)]) -> Result<()> {
    for (k, v) in pairs {
        if let Some(v) = v {
            s.set(k, v).map_err(contract)?;
        }
    }
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

impl DetectorArgs {
    fn apply(&self, s: &mut Settings) -> Result<()> {
        overlay(
            s,
            &[
                ("detector", self.detector.clone()),
                ("max_features", opt(&self.max_features)),
                ("n_levels", opt(&self.levels)),
                ("scale_factor", opt(&self.scale_factor)),
                ("fast_threshold", opt(&self.fast_threshold)),
            ],
        )
    }
}

impl RansacArgs {
    fn apply(&self, s: &mut Settings) -> Result<()> {
        overlay(
            s,
            &[
                ("ransac_threshold", opt(&self.ransac_threshold)),
                ("min_inlier_ratio", opt(&self.inlier_ratio)),
                ("max_reproj_error", opt(&self.max_reproj)),
                ("min_matches", opt(&self.min_matches)),
                ("max_iterations", opt(&self.max_iterations)),
                ("confidence", opt(&self.confidence)),
                ("seed", opt(&self.seed)),
            ],
        )?;
        s.ransac.validate().map_err(contract)
    }
}

fn open_sequence(dir: &Path) -> Result<FrameSequence> {
    Ok(FrameSequence::open(dir)?)
}

fn run_gen(a: &GenArgs, mut s: Settings) -> Result<()> {
    overlay(
        &mut s,
        &[
            ("seed", opt(&a.seed)),
            ("noise_sigma", opt(&a.noise_sigma)),
            ("snow_density", opt(&a.snow_density)),
            ("count", opt(&a.count)),
        ],
    )?;
    let seed = s.ransac.seed;
    let (motion, mut render) = named_spec(&a.spec, seed).ok_or_else(|| {
        contract(format!("unknown spec {:?} (one of {})", a.spec, SPEC_NAMES.join(", ")))
    })?;
    render.noise_sigma = s.noise_sigma.unwrap_or(render.noise_sigma);
    render.snow_density = s.snow_density.unwrap_or(render.snow_density);
    render.count = s.count.unwrap_or(render.count);
    if render.count < 2 {
        return Err(contract("count must be at least 2"));
    }
    let mut g = gen_oversized(&motion, &render)?;
    let mut id = a.spec.clone();
    if let Some(sigma) = a.add_noise {
        if !(sigma >= 0.0) {
            return Err(contract("--add-noise must be >= 0"));
        }
        g.frames = add_noise(&g.frames, sigma, seed ^ 0xA0D_D0153);
        id = format!("{id}+noise{sigma}");
    }
    let seq = write_sequence(&a.out, &g, &id)?;
    println!("wrote {} frames of {} to {}", seq.count, id, a.out.display());
    Ok(())
}

fn run_enhance(a: &EnhanceArgs, mut s: Settings) -> Result<()> {
    if let Some(t) = &a.tiles {
        let (x, y) = t
            .split_once(['x', 'X'])
            .ok_or_else(|| contract(format!("--tiles must be WxH, got {t:?}")))?;
        overlay(&mut s, &[("tiles_x", Some(x.into())), ("tiles_y", Some(y.into()))])?;
    }
    overlay(
        &mut s,
        &[
            ("clip_limit", opt(&a.clip)),
            ("pyramid_levels", opt(&a.levels)),
            ("weight_epsilon", opt(&a.epsilon)),
        ],
    )?;
    let enhancer = match Enhancer::parse(&a.method, &[])? {
        Enhancer::Clahe(_) => Enhancer::Clahe(s.clahe),
        Enhancer::Fusion(_) => Enhancer::Fusion(s.fusion),
        other => other,
    };
    let seq = open_sequence(&a.input)?;
    let out = apply_enhancer(&seq, &enhancer, &a.out)?;
    println!("{enhancer}: wrote {} frames to {}", out.count, a.out.display());
    Ok(())
}

fn run_features(a: &FeaturesArgs, mut s: Settings) -> Result<()> {
    a.detector.apply(&mut s)?;
    let seq = open_sequence(&a.input)?;
    let sets = build_feature_cache(&seq, s.detector, &s.detector_params)?;
    let total: usize = sets.iter().map(|f| f.len()).sum();
    println!(
        "cached {} frames, {:.1} keypoints/frame",
        sets.len(),
        total as f64 / sets.len().max(1) as f64
    );
    Ok(())
}

fn metric_inputs(
    input: &Path,
    d: &DetectorArgs,
    r: &RansacArgs,
    s: &mut Settings,
) -> Result<(RunManifest, Vec<fmbench::features::FeatureSet>)> {
    d.apply(s)?;
    r.apply(s)?;
    let seq = open_sequence(input)?;
    let (features, cached) = load_features(&seq, s.detector, &s.detector_params)?;
    if !cached {
        eprintln!("no valid feature cache in {}; extracting", input.display());
    }
    Ok((RunManifest::new(&seq, s.detector, &s.detector_params, &s.ransac), features))
}

fn run_lms(a: &LmsArgs, mut s: Settings) -> Result<()> {
    overlay(&mut s, &[("n", opt(&a.n))])?;
    let (manifest, features) = metric_inputs(&a.input, &a.detector, &a.ransac, &mut s)?;
    let (profiles, decay) = local_stability(&features, s.n, &s.ransac)?;
    write_lms_run(&a.out, &manifest, &profiles, s.n, &decay)?;
    for d in &decay {
        println!(
            "offset {:>3}: {:.2} inliers, ratio {:.3}, error {:.3} px",
            d.offset, d.mean_inliers, d.mean_inlier_ratio, d.mean_reproj_error
        );
    }
    Ok(())
}

fn run_fmf(a: &FmfArgs, mut s: Settings) -> Result<()> {
    overlay(&mut s, &[("horizon", opt(&a.horizon))])?;
    let (manifest, features) = metric_inputs(&a.input, &a.detector, &a.ransac, &mut s)?;
    let (records, summary) = furthest_matchable(&features, &s.ransac, s.horizon)?;
    write_fmf_run(&a.out, &manifest, &records, &summary)?;
    println!(
        "average fmf {:.2} over {} subjects ({} zero, {} capped at {})",
        summary.average, summary.subjects, summary.zero_count, summary.capped_count, summary.horizon
    );
    Ok(())
}

fn run_quality(a: &QualityArgs) -> Result<()> {
    let orig = open_sequence(&a.orig)?;
    let enh = open_sequence(&a.enh)?;
    let q = sequence_quality(&orig.load_all()?, &enh.load_all()?)?;
    let manifest = QualityManifest {
        original: orig.meta.clone(),
        enhanced: enh.meta.clone(),
        version: fmbench::VERSION.to_string(),
    };
    write_quality_run(&a.out, &manifest, &q)?;
    match q.mean_psnr {
        Some(p) => println!("mean psnr {p:.4} dB, mean ssim {:.4} ({} identical frames)", q.mean_ssim, q.inf_count),
        None => println!("all frames identical: psnr inf, mean ssim {:.4}", q.mean_ssim),
    }
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| read_run(d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let written = write_report(&runs, &a.out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(contract("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| contract(e.to_string()))?;
    }
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_config_file(path).map_err(|e| match e {
            ConfigError::Io(m) => Failure::Io(m),
            ConfigError::Bad(m) => Failure::Contract(m),
        })?;
    }
    match &cli.command {
        Command::Gen(a) => run_gen(a, settings),
        Command::Enhance(a) => run_enhance(a, settings),
        Command::Features(a) => run_features(a, settings),
        Command::Lms(a) => run_lms(a, settings),
        Command::Fmf(a) => run_fmf(a, settings),
        Command::Quality(a) => run_quality(a),
        Command::Report(a) => run_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Contract(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(2)
        }
    }
}
