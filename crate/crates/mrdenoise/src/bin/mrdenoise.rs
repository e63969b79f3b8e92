//! Command-line front end for the denoising toolkit.
//!
//! Every subcommand is a thin wrapper over one library operation. Progress
//! and timing go to standard error; machine-readable output (JSON/CSV) goes
//! to standard output or to files named by flags.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical
//! or estimation failure. Failures print a single-line JSON object to
//! standard error.
//!
//! Randomness: one root seed (`--seed`, default 42) drives everything.
//! Derived streams are documented where they are used: `addnoise` consumes
//! the root seed directly; `reproduce` draws the noise for the i-th level
//! from stream 10+i and runs the pipelines of the i-th level with stream
//! 100+i; pipelines split further per stage internally.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use mrdenoise::metrics;
use mrdenoise::nlpca::{self, Grouping, NlpcaParams};
use mrdenoise::noise::{
    estimate_background_median, estimate_mad_wavelet, simulate_rician_scalar, NoiseMap,
};
use mrdenoise::phantom::{self, PhantomSpec};
use mrdenoise::pipeline::{self, NoiseSource, PipelineSpec, Token};
use mrdenoise::prinlm::{self, PrinlmParams};
use mrdenoise::tuner::{self, CanonicalObjective, PsoConfig};
use mrdenoise::volume::{load_volume, store_volume, Volume3D};
use mrdenoise::{Error, Result};

/// Environment variable supplying the default worker-thread count.
const THREADS_ENV: &str = "MRDENOISE_THREADS";
/// Documented default root seed; fixed so that command lines copied from
/// the docs reproduce bit-identically.
const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(
    name = "mrdenoise",
    version,
    about = "Volumetric MRI denoising: eigen-shrinkage patch filtering and \
             guided non-local means with Rician bias handling",
    after_help = "Exit codes: 0 ok, 1 usage, 2 data/I/O, 3 numerical.\n\
                  Config file: JSON whose keys mirror the long flags, e.g.\n\
                  {\"seed\":7,\"denoise\":{\"pipeline\":\"dgpd\"}}. Command-line\n\
                  flags take precedence over the config file."
)]
struct Cli {
    /// Root random seed; every random choice derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to $MRDENOISE_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file mirroring the long flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic piecewise-smooth phantom volume
    Phantom(PhantomCmd),
    /// Corrupt a volume with stationary Rician noise
    Addnoise(AddnoiseCmd),
    /// Run a denoising pipeline described by a token string
    Denoise(DenoiseCmd),
    /// Estimate the noise level of a corrupted volume
    EstimateNoise(EstimateNoiseCmd),
    /// PSNR/SSIM/RMSE of a volume against a reference, over the reference ROI
    Evaluate(EvaluateCmd),
    /// Tune filter parameters by particle swarm or threshold grid
    Tune(TuneCmd),
    /// Quality ceiling: non-local means guided by the ground truth
    Limit(LimitCmd),
    /// Re-run a built-in benchmark matrix and emit its CSV
    Reproduce(ReproduceCmd),
}

// ---------------------------------------------------------------------------
// flag blocks (shared between the command line and the JSON config file)

trait MergeOpts {
    /// Fill every unset flag from `fallback` (command line wins).
    fn merge(&mut self, fallback: &Self);
}

macro_rules! merge_fields {
    ($t:ty { $($f:ident),+ $(,)? }) => {
        impl MergeOpts for $t {
            fn merge(&mut self, fallback: &Self) {
                $( if self.$f.is_none() { self.$f = fallback.$f.clone(); } )+
            }
        }
    };
}

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct PhantomOpts {
    /// Volume dimensions, "NX,NY,NZ" or a single edge length [default: 64]
    #[arg(long)]
    dims: Option<String>,
    /// Tissue contrast of the built-in phantom [default: t1]
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// JSON file with a full phantom description (overrides --dims/--profile)
    #[arg(long)]
    spec: Option<PathBuf>,
}
merge_fields!(PhantomOpts { dims, profile, spec });

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct AddnoiseOpts {
    /// Noise level sigma_g in intensity units
    #[arg(long, conflicts_with = "percent")]
    sigma: Option<f64>,
    /// Noise level as a percentage of the intensity peak
    #[arg(long)]
    percent: Option<f64>,
}
merge_fields!(AddnoiseOpts { sigma, percent });

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct DenoiseOpts {
    /// Pipeline tokens: d = patch filter, g = bias correction, p = guided
    /// re-filter of the input, c = surrogate guide (needs --truth)
    /// [default: dgpd]
    #[arg(long)]
    pipeline: Option<String>,
    /// Full pipeline description as JSON (excludes --pipeline/--noise)
    #[arg(long, conflicts_with_all = ["pipeline", "noise"])]
    pipeline_json: Option<PathBuf>,
    /// Noise source: background | mad | nlpca | exact:SIGMA [default: background]
    #[arg(long)]
    noise: Option<String>,
    /// Ground-truth volume; enables per-stage PSNR/SSIM in the report
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the stage report JSON here instead of standard output
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON parameter file applied to every patch-filter (d) stage
    #[arg(long)]
    nlpca: Option<PathBuf>,
    /// JSON parameter file applied to every re-filter (p) stage
    #[arg(long)]
    prinlm: Option<PathBuf>,
}
merge_fields!(DenoiseOpts {
    pipeline,
    pipeline_json,
    noise,
    truth,
    report,
    nlpca,
    prinlm,
});

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct EstimateNoiseOpts {
    /// Estimator: Rayleigh-background median or wavelet MAD [default: background]
    #[arg(long, value_enum)]
    method: Option<EstimatorKind>,
}
merge_fields!(EstimateNoiseOpts { method });

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct EvaluateOpts {
    /// Ground-truth volume (defines the ROI)
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Volume under test
    #[arg(long)]
    test: Option<PathBuf>,
}
merge_fields!(EvaluateOpts { truth, test });

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct TuneOpts {
    /// pso (swarm over all five knobs) or grid (threshold pairs) [default: pso]
    #[arg(long, value_enum)]
    mode: Option<TuneMode>,
    /// Edge length of the reference phantom [default: 32]
    #[arg(long)]
    dims: Option<usize>,
    /// Contrast of the reference phantom [default: t1]
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Clean reference volume (use with --noisy instead of the phantom)
    #[arg(long, requires = "noisy")]
    clean: Option<PathBuf>,
    /// Noisy counterpart of --clean
    #[arg(long, requires = "clean")]
    noisy: Option<PathBuf>,
    /// Swarm size [default: 50]
    #[arg(long)]
    swarm: Option<usize>,
    /// Iteration cap [default: 50]
    #[arg(long)]
    iterations: Option<usize>,
    /// Stall tolerance on the objective [default: 1e-3]
    #[arg(long)]
    tolerance: Option<f64>,
    /// Comma-separated thresholds for grid mode, paired as tau_beta = t
    /// [default: 1.5,2.0,2.46,3.0]
    #[arg(long)]
    grid: Option<String>,
    /// Fixed "d,m,w" for grid mode [default: 3,27,3]
    #[arg(long)]
    base: Option<String>,
    /// Write the result here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}
merge_fields!(TuneOpts {
    mode,
    dims,
    profile,
    clean,
    noisy,
    swarm,
    iterations,
    tolerance,
    grid,
    base,
    output,
});

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct LimitOpts {
    /// Ground-truth volume used as the guide
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Exact noise level sigma_g in intensity units
    #[arg(long, conflicts_with = "percent")]
    sigma: Option<f64>,
    /// Exact noise level as a percentage of the truth's intensity peak
    #[arg(long)]
    percent: Option<f64>,
}
merge_fields!(LimitOpts {
    truth,
    sigma,
    percent,
});

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct ReproduceOpts {
    /// "phantom" or a path to a clean volume to corrupt [default: phantom]
    #[arg(long)]
    data: Option<String>,
    /// Noise levels as percentages of the peak [default: 1,3,5,7,9]
    #[arg(long)]
    levels: Option<String>,
    /// Edge length of the generated phantom [default: 64]
    #[arg(long)]
    dims: Option<usize>,
    /// Write the CSV here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}
merge_fields!(ReproduceOpts {
    data,
    levels,
    dims,
    output,
});

// ---------------------------------------------------------------------------
// subcommands = flag block + positional paths

#[derive(Args, Debug)]
struct PhantomCmd {
    #[command(flatten)]
    opts: PhantomOpts,
    /// Output volume path
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AddnoiseCmd {
    #[command(flatten)]
    opts: AddnoiseOpts,
    /// Clean input volume
    input: PathBuf,
    /// Noisy output volume
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DenoiseCmd {
    #[command(flatten)]
    opts: DenoiseOpts,
    /// Noisy input volume
    input: PathBuf,
    /// Denoised output volume
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateNoiseCmd {
    #[command(flatten)]
    opts: EstimateNoiseOpts,
    /// Noisy input volume
    input: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    #[command(flatten)]
    opts: EvaluateOpts,
}

#[derive(Args, Debug)]
struct TuneCmd {
    #[command(flatten)]
    opts: TuneOpts,
}

#[derive(Args, Debug)]
struct LimitCmd {
    #[command(flatten)]
    opts: LimitOpts,
    /// Noisy input volume
    input: PathBuf,
    /// Output volume (the quality ceiling)
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReproduceCmd {
    /// Which experiment matrix to run
    #[arg(value_enum)]
    table: TableId,
    #[command(flatten)]
    opts: ReproduceOpts,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Profile {
    T1,
    T2,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum EstimatorKind {
    Background,
    Mad,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum TuneMode {
    Pso,
    Grid,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum TableId {
    /// Patch filter with vs. without the median prefilter (PSNR and SSIM)
    Table1,
    /// PSNR of the chains n, d, dd, dg, dgd, dgp, dgpp, dgpd
    Table2,
    /// SSIM of the same chains
    Table3,
    /// The flagship chain vs. the truth-guided quality ceiling
    Table4,
    /// Surrogate-guided chains c, cp, cpd, cpdp
    Table5,
}

/// JSON config file: top-level seed/threads plus one section per subcommand,
/// with keys named after the long flags.
#[derive(Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    phantom: PhantomOpts,
    addnoise: AddnoiseOpts,
    denoise: DenoiseOpts,
    estimate_noise: EstimateNoiseOpts,
    evaluate: EvaluateOpts,
    tune: TuneOpts,
    limit: LimitOpts,
    reproduce: ReproduceOpts,
}

// ---------------------------------------------------------------------------
// entry point and dispatch

fn main() {
    // Restore the default SIGPIPE disposition so that piping CSV/JSON output
    // into a consumer that exits early (`mrdenoise tune | head`) terminates
    // this process quietly instead of panicking on a failed stdout write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::process::exit(run());
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Format { .. } | Error::Io(_) => 2,
        Error::EstimationUnavailable(_) | Error::Numerical(_) => 3,
    }
}

fn report_error(err: &Error) -> i32 {
    let code = exit_code(err);
    let kind = match err {
        Error::InvalidArgument(_) => "usage",
        Error::Format { .. } | Error::Io(_) => "data",
        Error::EstimationUnavailable(_) | Error::Numerical(_) => "numerical",
    };
    eprintln!(
        "{}",
        serde_json::json!({ "error": err.to_string(), "kind": kind, "exit_code": code })
    );
    code
}

fn run() -> i32 {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) if e.use_stderr() => {
            return report_error(&Error::invalid(e.to_string().trim_end().to_owned()));
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return 0;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report_error(&Error::invalid(e.to_string())),
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn dispatch(mut cli: Cli) -> Result<()> {
    let config: FileConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let seed = cli.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let threads = cli.threads.or(config.threads).or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    info!(
        "seed {seed}, {} threads",
        threads
            .map(|n| n.to_string())
            .unwrap_or_else(|| "auto".to_owned())
    );

    match &mut cli.command {
        Command::Phantom(cmd) => {
            cmd.opts.merge(&config.phantom);
            cmd_phantom(cmd, seed)
        }
        Command::Addnoise(cmd) => {
            cmd.opts.merge(&config.addnoise);
            cmd_addnoise(cmd, seed)
        }
        Command::Denoise(cmd) => {
            cmd.opts.merge(&config.denoise);
            cmd_denoise(cmd, seed)
        }
        Command::EstimateNoise(cmd) => {
            cmd.opts.merge(&config.estimate_noise);
            cmd_estimate_noise(cmd)
        }
        Command::Evaluate(cmd) => {
            cmd.opts.merge(&config.evaluate);
            cmd_evaluate(cmd)
        }
        Command::Tune(cmd) => {
            cmd.opts.merge(&config.tune);
            cmd_tune(cmd, seed)
        }
        Command::Limit(cmd) => {
            cmd.opts.merge(&config.limit);
            cmd_limit(cmd)
        }
        Command::Reproduce(cmd) => {
            cmd.opts.merge(&config.reproduce);
            cmd_reproduce(cmd, seed)
        }
    }
}

// ---------------------------------------------------------------------------
// helpers

fn parse_dims(text: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad dimension '{p}' in '{text}'")))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [n] => Ok((*n, *n, *n)),
        [x, y, z] => Ok((*x, *y, *z)),
        _ => Err(Error::invalid("--dims takes one edge or NX,NY,NZ")),
    }
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} value '{p}' in '{text}'")))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::invalid(format!("{what} list is empty")));
    }
    Ok(vals)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{what} {}: {e}", path.display())))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, text)?;
            info!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Documented seed splitting for multi-run commands.
fn derive_seed(root: u64, stream: u64) -> u64 {
    root.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

// ---------------------------------------------------------------------------
// command bodies

fn cmd_phantom(cmd: &PhantomCmd, seed: u64) -> Result<()> {
    let opts = &cmd.opts;
    let spec = match &opts.spec {
        Some(path) => {
            if opts.dims.is_some() || opts.profile.is_some() {
                return Err(Error::invalid("--spec excludes --dims and --profile"));
            }
            read_json::<PhantomSpec>(path, "phantom spec")?
        }
        None => {
            let dims = parse_dims(opts.dims.as_deref().unwrap_or("64"))?;
            match opts.profile.unwrap_or(Profile::T1) {
                Profile::T1 => PhantomSpec::default_t1(dims),
                Profile::T2 => PhantomSpec::default_t2(dims),
            }
        }
    };
    let started = Instant::now();
    let vol = phantom::generate(&spec, seed)?;
    store_volume(&vol, &cmd.output)?;
    info!(
        "phantom {:?} -> {} ({:.2}s)",
        vol.dims(),
        cmd.output.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_addnoise(cmd: &AddnoiseCmd, seed: u64) -> Result<()> {
    let vol = load_volume(&cmd.input)?;
    let sigma = match (cmd.opts.sigma, cmd.opts.percent) {
        (Some(s), None) => s,
        (None, Some(p)) => p / 100.0 * vol.intensity_peak(),
        _ => return Err(Error::invalid("give exactly one of --sigma or --percent")),
    };
    let noisy = simulate_rician_scalar(&vol, sigma, seed)?;
    store_volume(&noisy, &cmd.output)?;
    info!("added sigma_g {sigma:.4} -> {}", cmd.output.display());
    println!("{}", serde_json::json!({ "sigma_g": sigma }));
    Ok(())
}

fn cmd_denoise(cmd: &DenoiseCmd, seed: u64) -> Result<()> {
    let opts = &cmd.opts;
    let mut spec = match &opts.pipeline_json {
        Some(path) => {
            if opts.nlpca.is_some() || opts.prinlm.is_some() {
                return Err(Error::invalid(
                    "--pipeline-json already carries per-stage parameters; \
                     it excludes --nlpca/--prinlm",
                ));
            }
            PipelineSpec::from_json(&fs::read_to_string(path)?)?
        }
        None => {
            let tokens = opts.pipeline.as_deref().unwrap_or("dgpd");
            let source: NoiseSource = opts.noise.as_deref().unwrap_or("background").parse()?;
            PipelineSpec::parse(tokens, source)?
        }
    };
    if let Some(path) = &opts.nlpca {
        let params: NlpcaParams = read_json(path, "patch-filter params")?;
        for stage in spec.stages.iter_mut().filter(|s| s.token == Token::D) {
            stage.nlpca = Some(params);
        }
        spec.validate()?;
    }
    if let Some(path) = &opts.prinlm {
        let params: PrinlmParams = read_json(path, "re-filter params")?;
        for stage in spec.stages.iter_mut().filter(|s| s.token == Token::P) {
            stage.prinlm = Some(params);
        }
        spec.validate()?;
    }

    let noisy = load_volume(&cmd.input)?;
    let truth = opts.truth.as_deref().map(load_volume).transpose()?;
    let started = Instant::now();
    let (out, report) = pipeline::run(&noisy, &spec, truth.as_ref(), seed)?;
    info!(
        "pipeline {} finished in {:.2}s",
        spec.token_string(),
        started.elapsed().as_secs_f64()
    );
    store_volume(&out, &cmd.output)?;
    let json = report.to_json();
    match &opts.report {
        Some(path) => {
            fs::write(path, &json)?;
            info!("report -> {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_estimate_noise(cmd: &EstimateNoiseCmd) -> Result<()> {
    let vol = load_volume(&cmd.input)?;
    let method = cmd.opts.method.unwrap_or(EstimatorKind::Background);
    let (name, sigma) = match method {
        EstimatorKind::Background => ("background", estimate_background_median(&vol, None)?),
        EstimatorKind::Mad => ("mad", estimate_mad_wavelet(&vol)?),
    };
    println!(
        "{}",
        serde_json::json!({ "method": name, "sigma_g": sigma })
    );
    Ok(())
}

fn cmd_evaluate(cmd: &EvaluateCmd) -> Result<()> {
    let truth_path = cmd
        .opts
        .truth
        .as_deref()
        .ok_or_else(|| Error::invalid("--truth is required"))?;
    let test_path = cmd
        .opts
        .test
        .as_deref()
        .ok_or_else(|| Error::invalid("--test is required"))?;
    let truth = load_volume(truth_path)?;
    let test = load_volume(test_path)?;
    let mask = metrics::roi_mask(&truth)?;
    let report = metrics::evaluate(&test, &truth, &mask)?;
    println!("{}", metrics::QualityReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_tune(cmd: &TuneCmd, seed: u64) -> Result<()> {
    let opts = &cmd.opts;
    let objective = match (&opts.clean, &opts.noisy) {
        (Some(clean), Some(noisy)) => {
            CanonicalObjective::from_pair(load_volume(clean)?, load_volume(noisy)?)?
        }
        (None, None) => {
            let edge = opts.dims.unwrap_or(32);
            let dims = (edge, edge, edge);
            let spec = match opts.profile.unwrap_or(Profile::T1) {
                Profile::T1 => PhantomSpec::default_t1(dims),
                Profile::T2 => PhantomSpec::default_t2(dims),
            };
            CanonicalObjective::reference(&spec, seed)?
        }
        _ => return Err(Error::invalid("--clean and --noisy go together")),
    };

    match opts.mode.unwrap_or(TuneMode::Pso) {
        TuneMode::Pso => {
            let cfg = PsoConfig {
                swarm_size: opts.swarm.unwrap_or(50),
                max_iterations: opts.iterations.unwrap_or(50),
                function_tolerance: opts.tolerance.unwrap_or(1e-3),
                seed,
                ..PsoConfig::default()
            };
            let started = Instant::now();
            let result = tuner::pso_optimize(|p| objective.evaluate(p), &cfg)?;
            info!(
                "swarm finished after {} iterations in {:.1}s",
                result.iterations,
                started.elapsed().as_secs_f64()
            );
            write_text(opts.output.as_deref(), &(result.to_json() + "\n"))
        }
        TuneMode::Grid => {
            let values =
                parse_f64_list(opts.grid.as_deref().unwrap_or("1.5,2.0,2.46,3.0"), "grid")?;
            let base_text = opts.base.as_deref().unwrap_or("3,27,3");
            let base = match parse_f64_list(base_text, "base")?.as_slice() {
                [d, m, w] => (*d as usize, *m as usize, *w as usize),
                _ => return Err(Error::invalid("--base is d,m,w")),
            };
            let table = tuner::grid_search(
                |p| objective.evaluate(p),
                base,
                &tuner::diagonal_grid(&values),
            )?;
            write_text(opts.output.as_deref(), &table.to_csv())
        }
    }
}

fn cmd_limit(cmd: &LimitCmd) -> Result<()> {
    let truth_path = cmd
        .opts
        .truth
        .as_deref()
        .ok_or_else(|| Error::invalid("--truth is required"))?;
    let truth = load_volume(truth_path)?;
    let noisy = load_volume(&cmd.input)?;
    let sigma = match (cmd.opts.sigma, cmd.opts.percent) {
        (Some(s), None) => s,
        (None, Some(p)) => p / 100.0 * truth.intensity_peak(),
        _ => return Err(Error::invalid("give exactly one of --sigma or --percent")),
    };
    let map = NoiseMap::constant(noisy.dims(), sigma)?;
    let out = prinlm::theoretical_limit(&truth, &noisy, &map, &PrinlmParams::default())?;
    store_volume(&out, &cmd.output)?;
    let mask = metrics::roi_mask(&truth)?;
    let report = metrics::evaluate(&out, &truth, &mask)?;
    println!("{}", metrics::QualityReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment reproduction

struct TableRow {
    method: String,
    metric: &'static str,
    values: Vec<f64>,
}

fn table_csv(levels: &[f64], rows: &[TableRow]) -> String {
    let mut out = String::from("method,metric");
    for l in levels {
        out.push_str(&format!(",{l}%"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.method, row.metric));
        for v in &row.values {
            out.push_str(&format!(",{v:.4}"));
        }
        out.push('\n');
    }
    out
}

fn quality(test: &Volume3D, truth: &Volume3D) -> Result<(f64, f64)> {
    let mask = metrics::roi_mask(truth)?;
    let r = metrics::evaluate(test, truth, &mask)?;
    Ok((r.psnr, r.ssim))
}

fn cmd_reproduce(cmd: &ReproduceCmd, seed: u64) -> Result<()> {
    let opts = &cmd.opts;
    let data = opts.data.as_deref().unwrap_or("phantom");
    let clean = if data == "phantom" {
        let edge = opts.dims.unwrap_or(64);
        phantom::generate(&PhantomSpec::default_t1((edge, edge, edge)), seed)?
    } else {
        load_volume(Path::new(data))?
    };
    let levels = parse_f64_list(opts.levels.as_deref().unwrap_or("1,3,5,7,9"), "levels")?;
    for &l in &levels {
        if !(l > 0.0) {
            return Err(Error::invalid("noise levels must be positive percentages"));
        }
    }

    // per-level noisy volumes, streams 10+i
    let noisies: Vec<Volume3D> = levels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let sigma = p / 100.0 * clean.intensity_peak();
            simulate_rician_scalar(&clean, sigma, derive_seed(seed, 10 + i as u64))
        })
        .collect::<Result<_>>()?;

    let started = Instant::now();
    let rows = match cmd.table {
        TableId::Table1 => table_median_prefilter(&clean, &levels, &noisies)?,
        TableId::Table2 => table_chains(&clean, &noisies, seed, "psnr")?,
        TableId::Table3 => table_chains(&clean, &noisies, seed, "ssim")?,
        TableId::Table4 => table_limit(&clean, &levels, &noisies, seed)?,
        TableId::Table5 => table_surrogate(&clean, &noisies, seed)?,
    };
    info!(
        "{:?} finished in {:.1}s",
        cmd.table,
        started.elapsed().as_secs_f64()
    );
    write_text(opts.output.as_deref(), &table_csv(&levels, &rows))
}

/// Patch filter with the published similarity parameters, with and without
/// the median prefilter on the ranking volume.
fn table_median_prefilter(
    clean: &Volume3D,
    levels: &[f64],
    noisies: &[Volume3D],
) -> Result<Vec<TableRow>> {
    let params = |median| NlpcaParams {
        d: 3,
        m: 27,
        w: 3,
        tau_beta: 2.46,
        t: 2.46,
        step: 3,
        grouping: Grouping::SimilarToEach,
        median_prefilter: median,
        ..NlpcaParams::default()
    };
    let mut rows = Vec::new();
    for median in [false, true] {
        let mut psnr = Vec::with_capacity(levels.len());
        let mut ssim = Vec::with_capacity(levels.len());
        for noisy in noisies {
            let (out, _) = nlpca::denoise(noisy, &params(median))?;
            let (p, s) = quality(&out, clean)?;
            psnr.push(p);
            ssim.push(s);
        }
        let method = if median { "nlpca-median" } else { "nlpca" };
        rows.push(TableRow {
            method: method.to_owned(),
            metric: "psnr",
            values: psnr,
        });
        rows.push(TableRow {
            method: method.to_owned(),
            metric: "ssim",
            values: ssim,
        });
    }
    Ok(rows)
}

const CHAIN_METHODS: [&str; 7] = ["d", "dd", "dg", "dgd", "dgp", "dgpp", "dgpd"];

/// The chain matrix behind the published PSNR/SSIM tables; row "n" is the
/// uncorrected noisy input.
fn table_chains(
    clean: &Volume3D,
    noisies: &[Volume3D],
    seed: u64,
    metric: &'static str,
) -> Result<Vec<TableRow>> {
    let specs: Vec<PipelineSpec> = CHAIN_METHODS
        .iter()
        .map(|t| PipelineSpec::parse(t, NoiseSource::Background))
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); CHAIN_METHODS.len() + 1];
    for (i, noisy) in noisies.iter().enumerate() {
        let (p, s) = quality(noisy, clean)?;
        columns[0].push(if metric == "psnr" { p } else { s });
        let results =
            pipeline::run_sweep(noisy, &specs, Some(clean), derive_seed(seed, 100 + i as u64))?;
        for (k, (out, _)) in results.iter().enumerate() {
            let (p, s) = quality(out, clean)?;
            columns[k + 1].push(if metric == "psnr" { p } else { s });
        }
    }
    let mut rows = Vec::new();
    rows.push(TableRow {
        method: "n".to_owned(),
        metric,
        values: columns[0].clone(),
    });
    for (k, name) in CHAIN_METHODS.iter().enumerate() {
        rows.push(TableRow {
            method: (*name).to_owned(),
            metric,
            values: columns[k + 1].clone(),
        });
    }
    Ok(rows)
}

/// The flagship chain against the truth-guided ceiling with the exact noise
/// level.
fn table_limit(
    clean: &Volume3D,
    levels: &[f64],
    noisies: &[Volume3D],
    seed: u64,
) -> Result<Vec<TableRow>> {
    let spec = PipelineSpec::parse("dgpd", NoiseSource::Background)?;
    let mut chain = Vec::new();
    let mut limit = Vec::new();
    for (i, (noisy, &p)) in noisies.iter().zip(levels).enumerate() {
        let sigma = p / 100.0 * clean.intensity_peak();
        let (out, _) = pipeline::run(noisy, &spec, None, derive_seed(seed, 100 + i as u64))?;
        chain.push(quality(&out, clean)?.0);
        let map = NoiseMap::constant(noisy.dims(), sigma)?;
        let ceil = prinlm::theoretical_limit(clean, noisy, &map, &PrinlmParams::default())?;
        limit.push(quality(&ceil, clean)?.0);
    }
    Ok(vec![
        TableRow {
            method: "dgpd".to_owned(),
            metric: "psnr",
            values: chain,
        },
        TableRow {
            method: "limit".to_owned(),
            metric: "psnr",
            values: limit,
        },
    ])
}

/// Surrogate-guided chains: the guide is the truth plus Gaussian noise at
/// 1.5% RMSE; p stages re-filter the actual noisy volume.
fn table_surrogate(
    clean: &Volume3D,
    noisies: &[Volume3D],
    seed: u64,
) -> Result<Vec<TableRow>> {
    let methods = ["c", "cp", "cpd", "cpdp"];
    let specs: Vec<PipelineSpec> = methods
        .iter()
        .map(|t| PipelineSpec::parse(t, NoiseSource::Background))
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for (i, noisy) in noisies.iter().enumerate() {
        let results =
            pipeline::run_sweep(noisy, &specs, Some(clean), derive_seed(seed, 100 + i as u64))?;
        for (k, (out, _)) in results.iter().enumerate() {
            columns[k].push(quality(out, clean)?.0);
        }
    }
    Ok(methods
        .iter()
        .zip(columns)
        .map(|(name, values)| TableRow {
            method: (*name).to_owned(),
            metric: "psnr",
            values,
        })
        .collect())
}
