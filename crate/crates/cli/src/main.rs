use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use docpatch::filters::FieldKind;
use docpatch::grid::{AspectMode, GridSpec};
use docpatch::harness::{
    inject_noise, load_image, read_id_list, read_trace, run_batch, write_heatmap, BackendKind, HarnessError, Manifest,
    RunConfig,
};
use docpatch::selection::{run_patch_selection, ExtractionTask, SelectionError};
use docpatch::sweep::{sweep, SweepError};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NO_VALID_PATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "docpatch", version, about = "Extract document fields by confidence-guided patch selection")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one field from one document image.
    Extract(ExtractArgs),
    /// Run every document and field of a manifest and score the answers.
    Batch(BatchArgs),
    /// Sweep patch sizes over a development manifest and pick one.
    Sweep(SweepArgs),
    /// Add seeded brightening noise to an image.
    Noise(NoiseArgs),
    /// Turn a trace file into a per-patch confidence table.
    Heatmap(HeatmapArgs),
}

/// Shared settings. Flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// Run config (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Patch area as a fraction of the page area.
    #[arg(long, value_name = "S")]
    area_fraction: Option<f64>,
    /// square, image-proportional or full-width-strip.
    #[arg(long)]
    aspect_mode: Option<AspectMode>,
    /// Fractional overlap between neighbouring patches.
    #[arg(long)]
    overlap: Option<f64>,
    /// Score the whole page as one patch.
    #[arg(long)]
    vanilla: bool,
    /// remote or mock.
    #[arg(long, value_parser = parse_backend_kind)]
    backend: Option<BackendKind>,
    #[arg(long)]
    backend_url: Option<String>,
    /// Scripted replies for the mock backend (TOML or JSON).
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Concurrent backend requests.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    /// Count end-of-sequence tokens in the confidence score.
    #[arg(long)]
    include_stop_token: bool,
}

#[derive(Args)]
struct ExtractArgs {
    image: PathBuf,
    /// Field name, e.g. latitude or tvd.
    #[arg(short, long)]
    field: String,
    /// Field kind; inferred from the name or config when absent.
    #[arg(long)]
    kind: Option<FieldKind>,
    /// Prompt template name.
    #[arg(long, conflicts_with = "prompt")]
    template: Option<String>,
    /// Literal prompt text.
    #[arg(long)]
    prompt: Option<String>,
    /// Where to write the per-patch trace (default `<image stem>.<field>.trace.json`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    /// Only run the ids listed in this file, one per line.
    #[arg(long)]
    ids_file: Option<PathBuf>,
    /// Predictions file (JSON Lines).
    #[arg(short, long, default_value = "predictions.jsonl")]
    out: PathBuf,
    /// Accuracy report, written when the manifest has ground truth.
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    ids_file: Option<PathBuf>,
    /// Directory for sweep_table.csv, sweep_groups.csv, sweep_points.csv and sweep_report.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Comma-separated candidate area fractions.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<f64>>,
    #[arg(long)]
    plateau_delta: Option<f64>,
    #[arg(long)]
    max_std: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct NoiseArgs {
    input: PathBuf,
    /// Output image; the format follows the extension.
    output: PathBuf,
    /// Standard deviation on the [0, 1] intensity scale.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Trace file written by `extract`.
    #[arg(short, long)]
    trace: PathBuf,
    /// CSV output, `-` for stdout.
    #[arg(short, long, default_value = "-")]
    out: PathBuf,
}

fn parse_backend_kind(s: &str) -> Result<BackendKind, String> {
    match s {
        "remote" => Ok(BackendKind::Remote),
        "mock" => Ok(BackendKind::Mock),
        other => Err(format!("unknown backend `{other}` (expected remote or mock)")),
    }
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Read { .. } | HarnessError::Format { .. } | HarnessError::Sigma(_) => {
                Failure::usage(e)
            }
            _ => Failure::runtime(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Config file, then flags, then validation.
fn resolve(common: &Common) -> Result<(RunConfig, GridSpec), Failure> {
    let mut cfg = load_config(common.config.as_deref())?;
    let b = &mut cfg.backend;
    if let Some(k) = common.backend {
        b.kind = k;
    }
    if let Some(url) = &common.backend_url {
        b.url = Some(url.clone());
    }
    if let Some(p) = &common.mock_script {
        b.mock_script = Some(p.clone());
    }
    if let Some(n) = common.parallelism {
        b.parallelism = n;
    }
    if let Some(n) = common.max_tokens {
        b.max_tokens = n;
    }
    if let Some(t) = common.timeout_secs {
        b.timeout_secs = t;
    }
    if let Some(r) = common.retries {
        b.retries = r;
    }
    if common.include_stop_token {
        b.include_stop_token = true;
    }
    let g = cfg.grid;
    cfg.grid = GridSpec::new(
        common.area_fraction.unwrap_or(g.area_fraction()),
        common.aspect_mode.unwrap_or(g.aspect_mode()),
        common.overlap.unwrap_or(g.overlap()),
    )
    .map_err(Failure::usage)?;
    cfg.validate()?;
    let spec = if common.vanilla {
        GridSpec::whole_image()
    } else {
        cfg.grid
    };
    Ok((cfg, spec))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::runtime)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::runtime)
}

fn load_manifest(path: &Path, ids_file: Option<&Path>) -> Result<Manifest, Failure> {
    let manifest = Manifest::load(path)?;
    match ids_file {
        Some(p) => Ok(manifest.select(&read_id_list(p)?)?),
        None => Ok(manifest),
    }
}

fn extract(args: ExtractArgs) -> Outcome {
    let (cfg, spec) = resolve(&args.common)?;
    if !args.image.is_file() {
        return Err(Failure::usage(anyhow!("image {} does not exist", args.image.display())));
    }
    let prompts = cfg.prompt_library()?;
    let mut task = cfg.task(&prompts, &args.field, args.kind, args.template.as_deref())?;
    if let Some(p) = &args.prompt {
        if p.trim().is_empty() {
            return Err(Failure::usage(anyhow!("--prompt is empty")));
        }
        task = ExtractionTask::new(task.field, p.clone(), task.chain);
    }
    let image = load_image(&args.image)?;
    let backend = cfg.build_backend()?;
    let result = match run_patch_selection(&*backend, &image, &task, &spec, &cfg.engine_settings()) {
        Ok(r) => r,
        Err(e @ SelectionError::Grid(_)) => return Err(Failure::usage(e)),
        Err(e) => return Err(Failure::runtime(e)),
    };

    let trace_path = args.trace.unwrap_or_else(|| {
        let stem = args.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        PathBuf::from(format!("{stem}.{}.trace.json", args.field))
    });
    let mut out = create(&trace_path)?;
    out.write_all(result.to_trace_document(&args.field).to_json().as_bytes())
        .and_then(|_| out.flush())
        .with_context(|| format!("writing {}", trace_path.display()))
        .map_err(Failure::runtime)?;

    match &result.winner {
        Some(w) => {
            println!("{}", w.answer_text);
            log::info!(
                "patch {} of {} won with pc {}",
                w.patch_index,
                result.trace.len(),
                w.pc.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        None => Err(Failure {
            code: EXIT_NO_VALID_PATCH,
            error: anyhow!(
                "{}: all {} patches were filtered (trace: {})",
                result.aborted_reason.as_deref().unwrap_or("no_valid_patch"),
                result.trace.len(),
                trace_path.display()
            ),
        }),
    }
}

fn batch(args: BatchArgs) -> Outcome {
    let (cfg, spec) = resolve(&args.common)?;
    let manifest = load_manifest(&args.manifest, args.ids_file.as_deref())?;
    let prompts = cfg.prompt_library()?;
    manifest.validate(&cfg, &prompts)?;
    let backend = cfg.build_backend()?;
    let outcome = run_batch(&manifest, &cfg, &prompts, &*backend, &spec, &cfg.engine_settings())?;

    let mut out = create(&args.out)?;
    outcome.write_predictions(&mut out)?;
    eprintln!("wrote {} predictions to {}", outcome.predictions.len(), args.out.display());
    if let Some(report) = &outcome.report {
        let mut f = create(&args.report)?;
        f.write_all(report.to_json().as_bytes())
            .and_then(|_| f.flush())
            .map_err(Failure::runtime)?;
        println!(
            "accuracy {:.4} ({}/{})",
            report.overall.accuracy, report.overall.correct, report.overall.total
        );
        for (field, row) in &report.per_field {
            println!("  field {field}: {:.4} ({}/{})", row.accuracy, row.correct, row.total);
        }
        for (group, row) in &report.per_group {
            println!("  group {group}: {:.4} ({}/{})", row.accuracy, row.correct, row.total);
        }
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Outcome {
    let (mut cfg, spec) = resolve(&args.common)?;
    if let Some(c) = &args.candidates {
        cfg.sweep.candidate_fractions = c.clone();
    }
    if let Some(d) = args.plateau_delta {
        cfg.sweep.plateau_delta = d;
    }
    if let Some(m) = args.max_std {
        cfg.sweep.max_std = m;
    }
    cfg.validate()?;
    let manifest = load_manifest(&args.manifest, args.ids_file.as_deref())?;
    let prompts = cfg.prompt_library()?;
    let items = manifest.sweep_items(&cfg, &prompts)?;
    let backend = cfg.build_backend()?;
    let report = match sweep(&items, &cfg.sweep, &spec, &*backend, &cfg.engine_settings()) {
        Ok(r) => r,
        Err(e @ (SweepError::EmptyDevSet | SweepError::Config(_) | SweepError::Grid(_))) => {
            return Err(Failure::usage(e))
        }
        Err(e) => return Err(Failure::runtime(e)),
    };

    let dir = &args.out_dir;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<(), SweepError>| -> Outcome {
        let path = dir.join(name);
        let mut out = create(&path)?;
        f(&mut out)
            .and_then(|_| out.flush().map_err(SweepError::from))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::runtime)
    };
    write("sweep_table.csv", &|w| report.write_table(w))?;
    write("sweep_groups.csv", &|w| report.write_group_table(w))?;
    write("sweep_points.csv", &|w| report.write_points(w))?;
    write("sweep_report.json", &|w| Ok(w.write_all(report.to_json().as_bytes())?))?;
    println!("{}", report.chosen_fraction);
    Ok(())
}

fn noise(args: NoiseArgs) -> Outcome {
    let cfg = load_config(args.config.as_deref())?;
    let sigma = args.sigma.unwrap_or(cfg.noise.sigma);
    let seed = args.seed.unwrap_or(cfg.noise.seed);
    let image = load_image(&args.input)?;
    let noisy = inject_noise(&image, sigma, seed)?;
    noisy
        .save(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))
        .map_err(Failure::runtime)?;
    Ok(())
}

fn heatmap(args: HeatmapArgs) -> Outcome {
    let trace = read_trace(&args.trace)?;
    if args.out.as_os_str() == "-" {
        write_heatmap(&trace, io::stdout().lock())?;
    } else {
        write_heatmap(&trace, create(&args.out)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let outcome = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Batch(a) => batch(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Noise(a) => noise(a),
        Command::Heatmap(a) => heatmap(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
