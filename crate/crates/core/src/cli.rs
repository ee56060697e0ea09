//! `icportrait` subcommands.
//!
//! Every numeric flag can also come from a `key = value` file passed with
//! `--config`; values given on the command line win. Exit codes: 0 success,
//! 1 runtime or I/O failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::diffusion::{linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::Error;
use crate::inference::{progressive_inference, Denoisers, InferenceConfig, Predictor, DEFAULT_GUIDANCE, DEFAULT_STRENGTH};
use crate::masking::{apply_mask, build_target, sample_mask, PixelMask};
use crate::matching::{
    argmax_flow, cost_volume_with, endpoint_errors, map_data_score, patch_descriptors, validity_from_tensor,
    write_flow_csv, CostVolumeOptions, FeatureGrid, FlowField,
};
use crate::metrics::{sim_stats, stats_csv, EmbeddingSet, StatsRow};
use crate::seeding;
use crate::synthdata::{gen_pairs, PairConfig};
use crate::tensor::{concat_width, read_image, read_tensor, write_netpbm, write_tensor, Tensor};
use crate::toynets::{dataset_loss, sgd_train, toy_dataset, AffineCheckpoint, AffineDenoiser, Denoiser, TargetPullDenoiser};
use crate::warpagg::{aggregate_residual, anneal_weights, warp_nearest, warp_pyramid, AnnealConfig};

#[derive(Parser, Debug)]
#[command(name = "icportrait", version, about = "In-context portrait transfer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random draw of the run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for data-parallel kernels
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// key = value file supplying defaults for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Number of diffusion steps T
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub timesteps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    pub beta_end: f64,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule, Failure> {
        Ok(linear_schedule(self.timesteps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic view pairs with ground-truth flow
    #[command(args_override_self = true)]
    GenPairs(GenPairsArgs),
    /// Sample a keep mask and optionally build the dual condition
    #[command(args_override_self = true)]
    Mask(MaskArgs),
    /// Dense matching between two images
    #[command(name = "match", args_override_self = true)]
    Match(MatchArgs),
    /// Warp profile features onto a lighting image and aggregate them
    #[command(args_override_self = true)]
    Warp(WarpArgs),
    /// Progressive inference with a toy denoiser
    #[command(args_override_self = true)]
    Infer(InferArgs),
    /// Fit the affine toy denoiser by SGD
    #[command(args_override_self = true)]
    TrainToy(TrainToyArgs),
    /// Similarity statistics between result and profile embeddings
    #[command(args_override_self = true)]
    Metrics(MetricsArgs),
    /// Time the cost volume, sequential against parallel
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Export a noise schedule as CSV
    #[command(args_override_self = true)]
    Schedule(ScheduleCmdArgs),
}

#[derive(Args, Debug)]
pub struct GenPairsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Largest yaw difference within a pair, degrees
    #[arg(long, default_value_t = 10.0)]
    pub max_yaw_delta: f64,
    /// Largest absolute yaw of the first view, degrees
    #[arg(long, default_value_t = 30.0)]
    pub max_yaw: f64,
    #[arg(long, default_value_t = 0.3)]
    pub ambient: f64,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fraction of pixels kept
    #[arg(long)]
    pub ratio: f64,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Image to mask; its size overrides --height/--width
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Profile reference, concatenated to the right of the masked image
    #[arg(long, requires = "image")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub fill: f32,
    /// Output path prefix
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub patch: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Search radius; full search when absent
    #[arg(long)]
    pub window: Option<usize>,
    /// Ground-truth level-0 flow tensor [H,W,2]
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Ground-truth visibility tensor [H,W]
    #[arg(long, requires = "gt")]
    pub vis: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WarpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub lighting: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 5)]
    pub patch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Oracle,
    TargetPull,
    Affine,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncondKind {
    /// Predict the noise injected at the start of each pass
    Reconstruct,
    /// Reuse the conditioned model with a null embedding
    Shared,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, value_enum, default_value_t = DenoiserKind::TargetPull)]
    pub denoiser: DenoiserKind,
    #[arg(long, value_enum, default_value_t = UncondKind::Reconstruct)]
    pub uncond: UncondKind,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Directory written by train-toy
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// One strength for every iteration
    #[arg(long, conflicts_with = "strengths")]
    pub strength: Option<f64>,
    /// Comma-separated strength per iteration
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set)]
    pub strengths: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub sampler_steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    pub guidance: f64,
    /// Keep mask file [H,W] or [H,W,1]
    #[arg(long, conflicts_with = "keep_ratio")]
    pub mask: Option<PathBuf>,
    /// Sample a keep mask with this ratio
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Clean latent; a seeded random one of --height x --width x --channels otherwise
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 20.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Result embeddings [N,D]
    #[arg(long)]
    pub results: PathBuf,
    /// Profile embeddings [M,D]
    #[arg(long)]
    pub profiles: PathBuf,
    #[arg(long, default_value = "result")]
    pub method: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated square grid sides
    #[arg(long, value_delimiter = ',', default_value = "32", action = clap::ArgAction::Set)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScheduleCmdArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Parses a `key = value` file; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("config line {}: expected key = value", i + 1));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Splices `--config` entries into the argument list right after the
/// subcommand, so later command-line flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(sub) = args.get(1).and_then(|s| s.to_str()).map(str::to_owned) else {
        return Ok(args);
    };
    let mut rest = Vec::new();
    let mut path = None;
    let mut it = args.iter().skip(2);
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => path = Some(it.next().ok_or("--config needs a path")?.clone()),
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(a.clone()),
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", Path::new(&path).display()))?;
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else { return Ok(args) };
    let mut injected = Vec::new();
    for (key, value) in parse_config(&text)? {
        let arg = sc
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| format!("unknown config key '{key}' for {sub}"))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(format!("config key '{key}' expects true or false")),
            }
        }
    }
    let mut out = vec![args[0].clone(), args[1].clone()];
    out.extend(injected);
    out.extend(rest);
    Ok(out)
}

/// Runs the binary with `args` (including the program name), writing to `out` and `err`.
pub fn run_with(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(m) => {
            let _ = writeln!(err, "error: {m}");
            return 2;
        }
    };
    let cli = match Cli::command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let threads = cli.command.common().threads;
    if threads == 0 {
        let _ = writeln!(err, "error: --threads must be >= 1");
        return 2;
    }
    let result = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => {
            let (result, text) = pool.install(|| {
                let mut buf = Vec::new();
                (dispatch(&cli.command, &mut buf), buf)
            });
            let _ = out.write_all(&text);
            result
        }
        Err(e) => Err(Failure::Runtime(Error::Contract(format!("thread pool: {e}")))),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn run(args: Vec<OsString>) -> i32 {
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenPairs(a) => &a.common,
            Command::Mask(a) => &a.common,
            Command::Match(a) => &a.common,
            Command::Warp(a) => &a.common,
            Command::Infer(a) => &a.common,
            Command::TrainToy(a) => &a.common,
            Command::Metrics(a) => &a.common,
            Command::Bench(a) => &a.common,
            Command::Schedule(a) => &a.common,
        }
    }
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::GenPairs(a) => cmd_gen_pairs(a, out),
        Command::Mask(a) => cmd_mask(a, out),
        Command::Match(a) => cmd_match(a, out),
        Command::Warp(a) => cmd_warp(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::TrainToy(a) => cmd_train_toy(a, out),
        Command::Metrics(a) => cmd_metrics(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Schedule(a) => cmd_schedule(a, out),
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `stem.icmt`, plus `stem.pgm`/`stem.ppm` for 1- and 3-channel images.
fn write_image_outputs(stem: &Path, img: &Tensor) -> Result<(), Failure> {
    write_tensor(suffixed(stem, ".icmt"), img)?;
    match img.hwc()?.2 {
        1 => write_netpbm(suffixed(stem, ".pgm"), img)?,
        3 => write_netpbm(suffixed(stem, ".ppm"), img)?,
        _ => {}
    }
    Ok(())
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) {
    let _ = writeln!(out, "{}", text.as_ref());
}

fn cmd_gen_pairs(a: &GenPairsArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.count == 0 || a.size == 0 {
        return usage("--count and --size must be >= 1");
    }
    let cfg = PairConfig {
        image_size: (a.size, a.size),
        max_yaw_delta_deg: a.max_yaw_delta,
        max_yaw_deg: a.max_yaw,
        ambient: a.ambient,
    };
    let (manifest, rows) = gen_pairs(a.count, a.common.seed, &a.out, &cfg)?;
    say(out, format!("wrote {} pairs", rows.len()));
    say(out, manifest.display().to_string());
    Ok(())
}

fn cmd_mask(a: &MaskArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let image = a.image.as_ref().map(read_image).transpose()?;
    let (h, w) = match (&image, a.height, a.width) {
        (Some(img), _, _) => {
            let (h, w, _) = img.hwc()?;
            (h, w)
        }
        (None, Some(h), Some(w)) => (h, w),
        _ => return usage("give --image or both --height and --width"),
    };
    let mask = sample_mask(h, w, a.ratio, a.common.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    mask.export(&a.out)?;
    say(out, format!("kept {} of {} pixels", mask.keep_count(), h * w));
    if let Some(img) = image {
        let masked = apply_mask(&img, &mask, a.fill)?;
        write_image_outputs(&suffixed(&a.out, "_masked"), &masked)?;
        if let Some(r) = &a.reference {
            let reference = read_image(r)?;
            if reference.dims() != img.dims() {
                return usage(format!("reference {:?} and image {:?} differ in size", reference.dims(), img.dims()));
            }
            write_tensor(suffixed(&a.out, "_cond.icmt"), &concat_width(&masked, &reference)?)?;
            write_tensor(suffixed(&a.out, "_target.icmt"), &build_target(&img, &reference)?)?;
        }
    }
    Ok(())
}

fn check_pyramid_args(patch: usize, levels: usize) -> Result<(), Failure> {
    if patch == 0 || levels == 0 {
        return usage("--patch and --levels must be >= 1");
    }
    Ok(())
}

fn match_flows(src: &crate::matching::FeaturePyramid, tgt: &crate::matching::FeaturePyramid, window: Option<usize>) -> Result<Vec<(FlowField, f64, crate::matching::CostVolume)>, Failure> {
    let opts = CostVolumeOptions { window, parallel: rayon::current_num_threads() > 1 };
    src.levels()
        .iter()
        .zip(tgt.levels())
        .map(|(s, t)| {
            let cv = cost_volume_with(s, t, opts)?;
            let flow = argmax_flow(&cv);
            let score = map_data_score(&cv, &flow)?;
            Ok((flow, score, cv))
        })
        .collect()
}

/// Share of pixels with zero flow among those whose descriptor is not all zeros.
fn textured_zero_fraction(grid: &FeatureGrid, flow: &FlowField) -> f64 {
    let (mut n, mut zero) = (0usize, 0usize);
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            if grid.descriptor(r, c).iter().any(|&v| v != 0.0) {
                n += 1;
                zero += usize::from(flow.offset(r, c) == [0, 0]);
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        zero as f64 / n as f64
    }
}

const EPE_BINS: usize = 10;

fn epe_histogram(errors: &[f64]) -> String {
    let mut counts = [0usize; EPE_BINS + 1];
    for &e in errors {
        counts[(e.floor() as usize).min(EPE_BINS)] += 1;
    }
    let mut s = String::from("epe_lo,epe_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let hi = if i == EPE_BINS { "inf".to_string() } else { (i + 1).to_string() };
        let _ = writeln!(s, "{i},{hi},{c}");
    }
    s
}

fn cmd_match(a: &MatchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    check_pyramid_args(a.patch, a.levels)?;
    let (ia, ib) = (read_image(&a.a)?, read_image(&a.b)?);
    if ia.dims() != ib.dims() {
        return usage(format!("images differ in size: {:?} vs {:?}", ia.dims(), ib.dims()));
    }
    let (fa, fb) = (patch_descriptors(&ia, a.levels, a.patch)?, patch_descriptors(&ib, a.levels, a.patch)?);
    std::fs::create_dir_all(&a.out)?;
    let results = match_flows(&fa, &fb, a.window)?;
    let mut report = String::new();
    for (l, (flow, score, cv)) in results.iter().enumerate() {
        write_tensor(a.out.join(format!("flow_l{l}.icmt")), &flow.to_tensor())?;
        let _ = writeln!(report, "level {l}: {}x{} storage {:?} map_score {score:.6}", flow.height(), flow.width(), cv.storage_dims());
    }
    let (flow0, _, cv0) = &results[0];
    write_flow_csv(a.out.join("flow_l0.csv"), flow0, cv0)?;
    let _ = writeln!(report, "zero_flow_fraction {:.6}", textured_zero_fraction(fa.level(0), flow0));
    if let Some(gt_path) = &a.gt {
        let mut gt = FlowField::from_tensor(&read_tensor(gt_path)?)?;
        if let Some(v) = &a.vis {
            gt = gt.with_validity(validity_from_tensor(&read_tensor(v)?))?;
        }
        let errors = endpoint_errors(flow0, &gt)?;
        std::fs::write(a.out.join("epe_hist.csv"), epe_histogram(&errors))?;
        let n = errors.len().max(1) as f64;
        let within = errors.iter().filter(|&&e| e <= 1.0).count() as f64 / n;
        let mean = errors.iter().sum::<f64>() / n;
        let _ = writeln!(report, "evaluated {} within_1px {within:.6} mean_epe {mean:.6}", errors.len());
    }
    std::fs::write(a.out.join("report.txt"), &report)?;
    let _ = write!(out, "{report}");
    Ok(())
}

fn cmd_warp(a: &WarpArgs, out: &mut dyn Write) -> Result<(), Failure> {
    check_pyramid_args(a.patch, a.levels)?;
    let (profile, lighting) = (read_image(&a.profile)?, read_image(&a.lighting)?);
    if profile.dims() != lighting.dims() {
        return usage(format!("images differ in size: {:?} vs {:?}", profile.dims(), lighting.dims()));
    }
    let weights = anneal_weights(&AnnealConfig { levels: a.levels, alpha: a.alpha, beta: a.beta })?;
    let fp = patch_descriptors(&profile, a.levels, a.patch)?;
    let fl = patch_descriptors(&lighting, a.levels, a.patch)?;
    // lighting pixels look up where they sit in the profile
    let flows: Vec<FlowField> = match_flows(&fl, &fp, a.window)?.into_iter().map(|(f, _, _)| f).collect();
    let warped = warp_pyramid(&fp, &flows)?;
    let agg = aggregate_residual(&fl, &warped, &weights)?;
    std::fs::create_dir_all(&a.out)?;
    let mut wcsv = String::from("level,weight\n");
    for (l, w) in weights.iter().enumerate() {
        let _ = writeln!(wcsv, "{l},{w}");
        write_tensor(a.out.join(format!("warped_l{l}.icmt")), warped.level(l).tensor())?;
        write_tensor(a.out.join(format!("aggregated_l{l}.icmt")), agg.level(l).tensor())?;
    }
    std::fs::write(a.out.join("weights.csv"), &wcsv)?;
    let img = warp_nearest(&FeatureGrid::new(0, profile)?, &flows[0])?;
    write_image_outputs(&a.out.join("warped_profile"), img.tensor())?;
    let _ = write!(out, "{wcsv}");
    Ok(())
}

fn inference_strengths(a: &InferArgs) -> Result<Vec<f64>, Failure> {
    if a.iterations == 0 {
        return usage("--iterations must be >= 1");
    }
    match (&a.strengths, a.strength) {
        (Some(v), _) if v.len() != a.iterations => {
            usage(format!("{} strengths given for {} iterations", v.len(), a.iterations))
        }
        (Some(v), _) => Ok(v.clone()),
        (None, Some(s)) => Ok(vec![s; a.iterations]),
        (None, None) => Ok(vec![DEFAULT_STRENGTH; a.iterations]),
    }
}

fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let strengths = inference_strengths(a)?;
    let sched = a.schedule.build()?;
    let style = read_image(&a.style)?;
    let (h, w, _) = style.hwc()?;
    let target = a.target.as_ref().map(read_image).transpose()?;
    if let Some(t) = &target {
        if t.dims() != style.dims() {
            return usage(format!("target {:?} and style {:?} differ in size", t.dims(), style.dims()));
        }
    }
    let keep_mask = match (&a.mask, a.keep_ratio) {
        (Some(p), _) => Some(PixelMask::from_tensor(&read_image(p)?)?),
        (None, Some(r)) => Some(sample_mask(h, w, r, seeding::derive(a.common.seed, u64::MAX))?),
        (None, None) => None,
    };
    let model: Option<Box<dyn Denoiser>> = match a.denoiser {
        DenoiserKind::Oracle => None,
        DenoiserKind::TargetPull => {
            let Some(t) = &target else { return usage("--denoiser target-pull needs --target") };
            Some(Box::new(TargetPullDenoiser::new(t.clone(), sched.clone())))
        }
        DenoiserKind::Affine => {
            let Some(dir) = &a.checkpoint else { return usage("--denoiser affine needs --checkpoint") };
            Some(Box::new(AffineCheckpoint::load(dir)?.denoiser))
        }
    };
    let cond = model.as_deref().map_or(Predictor::Reconstruct, Predictor::Model);
    let uncond = match a.uncond {
        UncondKind::Reconstruct => Predictor::Reconstruct,
        UncondKind::Shared => cond,
    };
    let cfg = InferenceConfig {
        iterations: a.iterations,
        strengths,
        sampler_steps: a.sampler_steps,
        guidance_scale: a.guidance,
        keep_mask,
        seed: a.common.seed,
        ..InferenceConfig::default()
    };
    cfg.validate()?;
    let reference = target.as_ref().unwrap_or(&style);
    let (result, trace) = progressive_inference(&style, Denoisers { cond, uncond }, &cfg, &sched, Some(reference))?;
    std::fs::create_dir_all(&a.out)?;
    write_image_outputs(&a.out.join("final"), &result)?;
    trace.write_csv(a.out.join("trace.csv"))?;
    for (k, it) in trace.iterations.iter().enumerate() {
        say(out, format!("iteration {k}: start_step {} end_distance {:.9e}", it.start_step, it.end_distance().unwrap_or(f64::NAN)));
    }
    Ok(())
}

fn cmd_train_toy(a: &TrainToyArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let sched = a.schedule.build()?;
    let seed = a.common.seed;
    let z0 = match &a.image {
        Some(p) => read_image(p)?,
        None => {
            if a.height == 0 || a.width == 0 || a.channels == 0 {
                return usage("--height, --width and --channels must be >= 1");
            }
            crate::diffusion::gaussian(&[a.height, a.width, a.channels], seeding::derive(seed, 1))?.map(|v| 0.5 + 0.2 * v)
        }
    };
    if a.samples == 0 {
        return usage("--samples must be >= 1");
    }
    let data = toy_dataset(&z0, a.samples, &sched, seeding::derive(seed, 2))?;
    let init = AffineDenoiser::identity(z0.dims().to_vec())?;
    let before = dataset_loss(&init, &data, &sched)?;
    let trained = sgd_train(&init, &data, a.lr, a.steps, seeding::derive(seed, 3), &sched)?;
    let after = dataset_loss(&trained, &data, &sched)?;
    if !after.is_finite() {
        return Err(Failure::Runtime(Error::Contract(format!("training diverged; lower --lr (was {})", a.lr))));
    }
    AffineCheckpoint { denoiser: trained, lr: a.lr, steps: a.steps, seed }.save(&a.out)?;
    let summary = format!("initial_loss {before:.9e}\nfinal_loss {after:.9e}\n");
    std::fs::write(a.out.join("losses.txt"), &summary)?;
    let _ = write!(out, "{summary}");
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let results = EmbeddingSet::read("results", &a.results)?;
    let profiles = EmbeddingSet::read("profiles", &a.profiles)?;
    let stats = sim_stats(&results, &profiles)?;
    let csv = stats_csv(&[StatsRow { method: a.method.clone(), stats }]);
    if let Some(p) = &a.out {
        std::fs::write(p, &csv)?;
    }
    let _ = write!(out, "{csv}");
    Ok(())
}

pub const BENCH_HEADER: &str = "size,window,threads,storage,seconds,entries_per_sec";

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.channels == 0 {
        return usage("--sizes and --channels must be >= 1");
    }
    let threads = rayon::current_num_threads();
    let mut csv = format!("{BENCH_HEADER}\n");
    for (i, &n) in a.sizes.iter().enumerate() {
        let grid = |k: u64| -> Result<FeatureGrid, Failure> {
            let t = crate::diffusion::gaussian(&[n, n, a.channels], seeding::derive(a.common.seed, 2 * i as u64 + k))?;
            Ok(FeatureGrid::new(0, t)?)
        };
        let (src, tgt) = (grid(1)?, grid(2)?);
        let timed = |parallel: bool| -> Result<(crate::matching::CostVolume, f64), Failure> {
            let t0 = Instant::now();
            let cv = cost_volume_with(&src, &tgt, CostVolumeOptions { window: a.window, parallel })?;
            Ok((cv, t0.elapsed().as_secs_f64()))
        };
        let (seq, ts) = timed(false)?;
        let (par, tp) = timed(true)?;
        if seq.data().iter().zip(par.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Failure::Runtime(Error::Contract(format!("parallel cost volume differs from sequential at {n}x{n}"))));
        }
        let storage = seq.storage_dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let window = a.window.map_or("full".to_string(), |w| w.to_string());
        let entries = seq.data().len() as f64;
        for (th, secs) in [(1, ts), (threads, tp)] {
            let rate = entries / secs.max(1e-9);
            let _ = writeln!(csv, "{n},{window},{th},{storage},{secs:.6},{rate:.1}");
        }
    }
    if let Some(p) = &a.out {
        std::fs::write(p, &csv)?;
    }
    let _ = write!(out, "{csv}");
    say(out, "parallel output bitwise identical to sequential");
    Ok(())
}

fn cmd_schedule(a: &ScheduleCmdArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let csv = a.schedule.build()?.to_csv();
    match &a.out {
        Some(p) => {
            std::fs::write(p, &csv)?;
            say(out, p.display().to_string());
        }
        None => {
            let _ = write!(out, "{csv}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let kv = parse_config("# comment\n\ncount = 8\n max_yaw_delta=5.5 \n").unwrap();
        assert_eq!(kv, vec![("count".into(), "8".into()), ("max-yaw-delta".into(), "5.5".into())]);
        assert!(parse_config("count 8\n").is_err());
        assert!(parse_config(" = 3\n").is_err());
    }

    #[test]
    fn config_expansion_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "count = 8\nseed = 3\n").unwrap();
        let args: Vec<OsString> = ["icportrait", "gen-pairs", "--count", "2", "--config", cfg.to_str().unwrap()]
            .iter()
            .map(OsString::from)
            .collect();
        let expanded = expand_config(args).unwrap();
        let s: Vec<&str> = expanded.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(s, ["icportrait", "gen-pairs", "--count", "8", "--seed", "3", "--count", "2"]);
        std::fs::write(&cfg, "bogus = 1\n").unwrap();
        let args: Vec<OsString> = ["icportrait", "gen-pairs", "--config", cfg.to_str().unwrap()].iter().map(OsString::from).collect();
        assert!(expand_config(args).is_err());
    }

    #[test]
    fn strengths_resolution() {
        let parse = |extra: &[&str]| {
            let mut v = vec!["icportrait", "infer", "--style", "s.ppm", "--out", "o"];
            v.extend_from_slice(extra);
            match Cli::try_parse_from(v).unwrap().command {
                Command::Infer(a) => inference_strengths(&a).map_err(|_| ()),
                _ => unreachable!(),
            }
        };
        assert_eq!(parse(&[]).unwrap(), vec![0.3; 3]);
        assert_eq!(parse(&["--iterations", "2", "--strength", "0.5"]).unwrap(), vec![0.5; 2]);
        assert_eq!(parse(&["--iterations", "2", "--strengths", "0.4,0.2"]).unwrap(), vec![0.4, 0.2]);
        assert!(parse(&["--iterations", "2", "--strengths", "0.3"]).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = epe_histogram(&[0.0, 0.5, 1.0, 1.4, 12.0]);
        let lines: Vec<&str> = h.lines().collect();
        assert_eq!(lines[0], "epe_lo,epe_hi,count");
        assert_eq!(lines[1], "0,1,2");
        assert_eq!(lines[2], "1,2,2");
        assert_eq!(lines[11], "10,inf,1");
    }
}
