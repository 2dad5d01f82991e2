//! Subcommands of the `stagediff` binary.
//!
//! Every command reads one experiment manifest. Outputs live under
//! `<output root>/<name>/`:
//!
//! ```text
//! prepared.bin               normalized windows + scaling, keyed by content hash
//! <variant>/model.ckpt       checkpoint (variant = none | no_ci | no_cd | no_stage)
//! <variant>/trace.csv        step, loss, elapsed seconds
//! <variant>/synthetic.csv    generated windows in source units
//! <variant>/synthetic.bin    the same windows, normalized
//! report/                    evaluate output
//! ablation/                  ablate output
//! ```

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use stagediff::checkpoint::Checkpoint;
use stagediff::dataio::{
    self, fit_normalize, load_csv_from_reader, make_windows, read_window_cache, write_window_cache,
    CsvLayout, PreparedData, WindowSet,
};
use stagediff::evalsuite::{run_report, MetricsReport};
use stagediff::manifest::ExperimentManifest;
use stagediff::model::{Ablation, StageDiff, StageDiffConfig, Trainer};
use stagediff::Error;

pub const ENV_DATA_ROOT: &str = "STAGEDIFF_DATA_ROOT";
pub const ENV_OUTPUT_ROOT: &str = "STAGEDIFF_OUTPUT_ROOT";

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const CACHE_FILE: &str = "prepared.bin";
const CHECKPOINT_FILE: &str = "model.ckpt";
const TRACE_FILE: &str = "trace.csv";
const SYNTH_CSV: &str = "synthetic.csv";
const SYNTH_BIN: &str = "synthetic.bin";
/// Bumped whenever the prepared-cache key changes meaning.
const PREPARE_KEY_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "stagediff", version, about = "Train, sample and score a staged time-series diffusion model")]
pub struct Cli {
    /// Experiment manifest (TOML).
    #[arg(short, long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Root seed; overrides the manifest's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Manifest override, e.g. `--set model.stages=4`. Bare
    /// `--model.stages=4` flags are accepted too.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Experiment directory; defaults to `$STAGEDIFF_OUTPUT_ROOT/<name>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Append a UNIX timestamp to the default experiment directory.
    #[arg(long, global = true)]
    pub timestamped: bool,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, scale and window the dataset into the cache.
    Prepare,
    /// Train one variant.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Continue from the variant's checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Multiplier on the step budget.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Sample windows from a trained variant.
    Generate {
        /// Window count; defaults to the number of real windows.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Score synthetic sets against the real windows.
    Evaluate {
        /// `path` or `name=path`; `.bin` caches or long-layout CSV.
        #[arg(long, num_args = 1.., required = true)]
        synthetic: Vec<String>,
        #[arg(long)]
        with_tsne: bool,
    },
    /// Train, sample and score all four variants.
    Ablate {
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        with_tsne: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Print report tables from `report.json` files or their directories.
    Report { paths: Vec<PathBuf> },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_config() {
                EXIT_CONFIG
            } else if e.is_numeric() {
                EXIT_NUMERIC
            } else if e.is_data() {
                EXIT_DATA
            } else {
                EXIT_OTHER
            };
        }
    }
    EXIT_OTHER
}

/// Moves bare `--dotted.key=value` flags into `--set` overrides.
pub fn split_overrides<I, T>(args: I) -> Vec<OsString>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut out = Vec::new();
    for a in args {
        let a: OsString = a.into();
        let rewritten = a.to_str().and_then(|s| {
            let body = s.strip_prefix("--")?;
            let (key, _) = body.split_once('=')?;
            key.contains('.').then(|| body.to_string())
        });
        match rewritten {
            Some(body) => {
                out.push("--set".into());
                out.push(body.into());
            }
            None => out.push(a),
        }
    }
    out
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let cli = match Cli::try_parse_from(split_overrides(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_target(false)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Report { paths } = &cli.command {
        let paths = if paths.is_empty() {
            let ctx = Context::from_cli(&cli)?;
            ["ablation", "report"]
                .iter()
                .map(|d| ctx.out_dir.join(d))
                .filter(|p| p.join("report.json").exists())
                .collect()
        } else {
            paths.clone()
        };
        return print_reports(&paths);
    }
    let ctx = Context::from_cli(&cli)?;
    match cli.command {
        Command::Prepare => {
            let (data, hit) = prepare(&ctx)?;
            println!(
                "{} {} windows of {}×{} ({})",
                if hit { "cached" } else { "prepared" },
                data.windows.len(),
                data.windows.l_ser(),
                data.windows.dim(),
                ctx.cache_path().display()
            );
        }
        Command::Train {
            steps,
            ablation,
            resume,
            budget,
        } => {
            let ckpt = train(&ctx, &TrainOptions { steps, ablation, resume, budget })?;
            println!(
                "trained {} to step {} ({})",
                ckpt.config.ablation,
                ckpt.train_step,
                ctx.variant_dir(ckpt.config.ablation).display()
            );
        }
        Command::Generate { n, ablation } => {
            let out = generate(&ctx, n, ablation.unwrap_or(ctx.manifest.model.ablation))?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { synthetic, with_tsne } => {
            let report = evaluate(&ctx, &synthetic, with_tsne)?;
            print!("{}", report.to_table());
        }
        Command::Ablate {
            budget,
            n,
            with_tsne,
            resume,
        } => {
            let report = ablate(&ctx, budget, n, with_tsne, resume)?;
            print!("{}", report.to_table());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// A resolved manifest plus where its inputs and outputs live.
#[derive(Debug, Clone)]
pub struct Context {
    pub manifest: ExperimentManifest,
    pub manifest_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let path = cli
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("--manifest is required".into()))?;
        let mut manifest = ExperimentManifest::load(path, &cli.overrides)?;
        if let Some(seed) = cli.seed {
            manifest = manifest.with_seed(seed);
        }
        manifest.validate()?;
        let manifest_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let out_dir = match (&cli.out, &manifest.output_dir) {
            (Some(dir), _) | (None, Some(dir)) => dir.clone(),
            (None, None) => {
                let root = std::env::var_os(ENV_OUTPUT_ROOT)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let mut name = manifest.name.clone();
                if cli.timestamped {
                    let secs = SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    name = format!("{name}-{secs}");
                }
                root.join(name)
            }
        };
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        log::info!(
            "resolved manifest ({}):\n{}",
            path.display(),
            manifest.to_toml_string()?
        );
        Ok(Self {
            manifest,
            manifest_dir,
            out_dir,
        })
    }

    /// Dataset path: absolute as given, else under `$STAGEDIFF_DATA_ROOT`,
    /// else next to the manifest.
    pub fn data_path(&self) -> PathBuf {
        let p = &self.manifest.data.path;
        if p.is_absolute() {
            return p.clone();
        }
        match std::env::var_os(ENV_DATA_ROOT) {
            Some(root) => PathBuf::from(root).join(p),
            None => self.manifest_dir.join(p),
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.out_dir.join(CACHE_FILE)
    }

    pub fn variant_dir(&self, ablation: Ablation) -> PathBuf {
        self.out_dir.join(ablation.as_str())
    }

    fn model_config(&self, ablation: Option<Ablation>) -> StageDiffConfig {
        let mut cfg = self.manifest.model.clone();
        if let Some(a) = ablation {
            cfg.ablation = a;
        }
        cfg
    }
}

fn prepare_key(bytes: &[u8], m: &ExperimentManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(PREPARE_KEY_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(&m.data.schema)?);
    h.update((m.model.l_ser as u64).to_le_bytes());
    h.update((m.data.stride as u64).to_le_bytes());
    h.update(bytes);
    Ok(hex::encode(h.finalize()))
}

/// Returns the prepared data and whether it came from the cache.
pub fn prepare(ctx: &Context) -> Result<(PreparedData, bool)> {
    let path = ctx.data_path();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let key = prepare_key(&bytes, &ctx.manifest)?;
    let cache = ctx.cache_path();
    if cache.exists() {
        match read_window_cache(&cache) {
            Ok(data) if data.content_hash == key => {
                log::info!("cache hit {}", cache.display());
                return Ok((data, true));
            }
            Ok(_) => log::info!("dataset or schema changed, rebuilding {}", cache.display()),
            Err(e) => log::warn!("unreadable cache {} ({e}), rebuilding", cache.display()),
        }
    }
    let source = path.display().to_string();
    let raw = load_csv_from_reader(&bytes[..], &source, &ctx.manifest.data.schema)
        .with_context(|| format!("loading {source}"))?;
    if raw.dim() != ctx.manifest.model.dim {
        return Err(Error::Config(format!(
            "model.dim = {} but {source} has {} feature columns",
            ctx.manifest.model.dim,
            raw.dim()
        ))
        .into());
    }
    let (scaled, norm) = fit_normalize(&raw);
    let windows = make_windows(&scaled, ctx.manifest.model.l_ser, ctx.manifest.data.stride)
        .with_context(|| format!("windowing {source}"))?;
    let data = PreparedData {
        content_hash: key,
        feature_names: raw.feature_names.clone(),
        norm,
        windows,
    };
    write_window_cache(&cache, &data)?;
    log::info!(
        "prepared {} windows from {} rows ({} dropped)",
        data.windows.len(),
        raw.len(),
        raw.dropped_rows
    );
    Ok((data, false))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub steps: Option<usize>,
    pub ablation: Option<Ablation>,
    pub resume: bool,
    pub budget: Option<f64>,
}

fn config_guard(expected: &StageDiffConfig, found: &StageDiffConfig, what: &Path) -> Result<()> {
    if expected.arch_hash() == found.arch_hash() {
        return Ok(());
    }
    let diff = found.arch_diff(expected);
    Err(Error::Config(format!(
        "{} was built with a different configuration (checkpoint vs manifest):\n  {}",
        what.display(),
        diff.join("\n  ")
    ))
    .into())
}

pub fn train(ctx: &Context, opts: &TrainOptions) -> Result<Checkpoint> {
    let (data, _) = prepare(ctx)?;
    let mut cfg = ctx.model_config(opts.ablation);
    if let Some(s) = opts.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = opts.budget {
        if !(b >= 0.0 && b.is_finite()) {
            bail!(Error::Config(format!("budget {b} must be a nonnegative number")));
        }
        cfg.train.steps = (cfg.train.steps as f64 * b).round() as usize;
    }
    let dir = ctx.variant_dir(cfg.ablation);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let trace_path = dir.join(TRACE_FILE);

    let resuming = opts.resume && ckpt_path.exists();
    let mut trainer = if resuming {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        config_guard(&cfg, &ckpt.config, &ckpt_path)?;
        log::info!("resuming {} from step {}", cfg.ablation, ckpt.train_step);
        let mut ckpt = ckpt;
        ckpt.config.train = cfg.train.clone();
        Trainer::from_checkpoint(&ckpt)?
    } else {
        Trainer::new(&cfg)?
    };
    trainer.norm = Some(data.norm.clone());
    trainer.feature_names = Some(data.feature_names.clone());

    let mut trace = if resuming && trace_path.exists() {
        trim_trace(&trace_path, trainer.step())?;
        OpenOptions::new().append(true).open(&trace_path)
    } else {
        fs::File::create(&trace_path).and_then(|mut f| {
            writeln!(f, "step,loss,elapsed_secs")?;
            Ok(f)
        })
    }
    .map_err(|e| Error::io(&trace_path, e))?;

    let remaining = cfg.train.steps.saturating_sub(trainer.step());
    let (log_every, save_every) = (cfg.train.log_every, cfg.train.save_every);
    let started = Instant::now();
    log::info!(
        "training {} for {remaining} steps on {} windows ({} parameters)",
        cfg.ablation,
        data.windows.len(),
        trainer.model().params().num_scalars()
    );
    trainer
        .run(&data.windows, remaining, |t, loss| {
            let step = t.step();
            writeln!(trace, "{step},{loss:?},{:.3}", started.elapsed().as_secs_f64())
                .map_err(|e| Error::io(&trace_path, e))?;
            if log_every > 0 && step % log_every == 0 {
                log::info!("[{}] step {step} loss {loss:.6}", cfg.ablation);
            }
            if save_every > 0 && step % save_every == 0 {
                trace.flush().map_err(|e| Error::io(&trace_path, e))?;
                t.checkpoint()?.save(&ckpt_path)?;
            }
            Ok(())
        })
        .with_context(|| format!("training variant {}", cfg.ablation))?;
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&ckpt_path)?;
    Ok(ckpt)
}

/// Drops trace rows logged after the checkpoint being resumed, so an
/// interrupted run does not leave duplicate steps behind.
fn trim_trace(path: &Path, last_step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(i, line)| {
            *i == 0
                || line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|s| s <= last_step)
        })
        .map(|(_, line)| format!("{line}\n"))
        .collect();
    if kept.len() != text.len() {
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Samples `n` windows and writes both the CSV and the normalized cache.
pub fn generate(ctx: &Context, n: Option<usize>, ablation: Ablation) -> Result<PathBuf> {
    let (data, _) = prepare(ctx)?;
    let cfg = ctx.model_config(Some(ablation));
    let dir = ctx.variant_dir(ablation);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&ckpt_path)
        .with_context(|| format!("no usable checkpoint for {ablation}; run `train` first"))?;
    config_guard(&cfg, &ckpt.config, &ckpt_path)?;
    let n = n.unwrap_or(data.windows.len());
    let seed = ctx.manifest.seed;
    let model = StageDiff::from_checkpoint(&ckpt)?;
    log::info!("sampling {n} windows from {ablation} (seed {seed})");
    let synth = model
        .generate(n, seed)
        .with_context(|| format!("sampling from {ablation}"))?;
    let norm = ckpt.norm.clone().unwrap_or_else(|| data.norm.clone());
    let names = ckpt
        .feature_names
        .clone()
        .unwrap_or_else(|| data.feature_names.clone());
    let csv = dir.join(SYNTH_CSV);
    dataio::write_windows_csv(&csv, &norm.denormalize_windows(&synth.windows)?, &names, CsvLayout::Long)?;
    let mut h = Sha256::new();
    h.update(ckpt.encode());
    h.update((n as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    write_window_cache(
        dir.join(SYNTH_BIN),
        &PreparedData {
            content_hash: hex::encode(h.finalize()),
            feature_names: names,
            norm,
            windows: synth,
        },
    )?;
    Ok(csv)
}

/// Loads a synthetic set, normalizing CSV input with the real data's scaling.
pub fn load_synthetic(arg: &str, real: &PreparedData) -> Result<(String, WindowSet)> {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
        None => (None, PathBuf::from(arg)),
    };
    let name = name.unwrap_or_else(|| default_set_name(&path));
    let windows = if path.extension().is_some_and(|e| e == "bin") {
        read_window_cache(&path)?.windows
    } else {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let (set, names) = dataio::read_windows_csv(file, &path.display().to_string())?;
        if names != real.feature_names {
            return Err(Error::Shape(format!(
                "{}: columns {names:?}, real data has {:?}",
                path.display(),
                real.feature_names
            ))
            .into());
        }
        let (n, l, d) = set.windows.dim();
        let flat = set
            .windows
            .into_shape_with_order((n * l, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let scaled = real
            .norm
            .normalize(&flat)?
            .into_shape_with_order((n, l, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        WindowSet::new(scaled, 1)
    };
    Ok((name, windows))
}

/// `<dir>/synthetic.bin` is named after `<dir>`, anything else after its stem.
fn default_set_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("synthetic");
    if stem == "synthetic" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

pub fn evaluate(ctx: &Context, synthetic: &[String], with_tsne: bool) -> Result<MetricsReport> {
    if synthetic.is_empty() {
        bail!(Error::Config("evaluate needs at least one --synthetic set".into()));
    }
    let (real, _) = prepare(ctx)?;
    let sets = synthetic
        .iter()
        .map(|s| load_synthetic(s, &real).with_context(|| format!("loading synthetic set {s}")))
        .collect::<Result<Vec<_>>>()?;
    let report = run_report(&real.windows, &sets, &ctx.manifest.metrics, with_tsne)?;
    report.write(ctx.out_dir.join("report"))?;
    Ok(report)
}

pub fn ablate(
    ctx: &Context,
    budget: Option<f64>,
    n: Option<usize>,
    with_tsne: bool,
    resume: bool,
) -> Result<MetricsReport> {
    let (real, _) = prepare(ctx)?;
    let mut sets = Vec::new();
    for ab in Ablation::ALL {
        let opts = TrainOptions {
            steps: None,
            ablation: Some(ab),
            resume,
            budget,
        };
        train(ctx, &opts).with_context(|| format!("ablation variant {ab}"))?;
        generate(ctx, n, ab).with_context(|| format!("ablation variant {ab}"))?;
        let bin = ctx.variant_dir(ab).join(SYNTH_BIN);
        sets.push((ab.to_string(), read_window_cache(&bin)?.windows));
    }
    let report = run_report(&real.windows, &sets, &ctx.manifest.metrics, with_tsne)?;
    report.write(ctx.out_dir.join("ablation"))?;
    Ok(report)
}

fn print_reports(paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        bail!(Error::Config("no reports found; pass report paths".into()));
    }
    for p in paths {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let report = MetricsReport::from_json(&text)?;
        if paths.len() > 1 {
            println!("== {} ==", file.display());
        }
        print!("{}", report.to_table());
    }
    Ok(())
}
