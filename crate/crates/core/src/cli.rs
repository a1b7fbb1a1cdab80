//! Command-line front end.
//!
//! Every subcommand takes `--config FILE` (TOML). A value comes from the
//! flag if given, else from its `ANYLEVEL_*` environment variable, else
//! from the file, else from the flag's default.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::diffusion::{train, write_loss_curve, Model, TrainStatus, TrainingConfig};
use crate::error::Error;
use crate::eval::{precision_trend, TrendOptions};
use crate::features::build_feature_pyramid;
use crate::imageio::write_png;
use crate::layout::format::{read_layout, write_layout};
use crate::layout::{Layout, ValidationReport};
use crate::sampling::{sample_one, GuidanceConfig, SamplerConfig, SamplerKind};
use crate::scene::{generate_scene, read_shards, scene_seed, write_shards, SceneSpec};
use crate::service::{serve, AppState, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_TREND_GATE: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    TrendGate(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::TrendGate(_) => EXIT_TREND_GATE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
            Failure::TrendGate(m) => write!(f, "trend gate failed: {m}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidLayout(_) | Error::UnknownConcept(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "anylevel", version, about = "Layout-conditioned diffusion at any precision level")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset as checksummed shards.
    Datagen(DatagenArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Sample images for a layout.
    Sample(SampleArgs),
    /// Measure the SS trend across precision levels.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
struct DatagenArgs {
    /// TOML file with defaults for these flags.
    #[arg(long, env = "ANYLEVEL_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Scene specification (TOML or JSON); the built-in toy vocabulary if absent.
    #[arg(long, env = "ANYLEVEL_SPEC")]
    spec: Option<PathBuf>,
    /// Canvas exponent L of the built-in toy vocabulary.
    #[arg(long, env = "ANYLEVEL_CANVAS_EXPONENT", default_value_t = 5)]
    canvas_exponent: u32,
    #[arg(long, env = "ANYLEVEL_COUNT", default_value_t = 5000)]
    count: usize,
    #[arg(long, env = "ANYLEVEL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ANYLEVEL_SHARD_SIZE", default_value_t = 1000)]
    shard_size: usize,
    /// Also write the first N scenes as layout documents under OUT/layouts.
    #[arg(long, env = "ANYLEVEL_LAYOUTS", default_value_t = 0)]
    layouts: usize,
    #[arg(long, env = "ANYLEVEL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// TOML file with defaults for these flags.
    #[arg(long, env = "ANYLEVEL_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset directory written by `datagen`.
    #[arg(long, env = "ANYLEVEL_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "ANYLEVEL_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "ANYLEVEL_SEED", default_value_t = TrainingConfig::default().seed)]
    seed: u64,
    #[arg(long, env = "ANYLEVEL_STEPS", default_value_t = TrainingConfig::default().steps)]
    steps: u64,
    #[arg(long, env = "ANYLEVEL_BATCH_SIZE", default_value_t = TrainingConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, env = "ANYLEVEL_LEARNING_RATE", default_value_t = TrainingConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, env = "ANYLEVEL_LEVEL0_DROPOUT_PROB", default_value_t = TrainingConfig::default().level0_dropout_prob)]
    level0_dropout_prob: f64,
    #[arg(long, env = "ANYLEVEL_TEXT_ONLY_FRACTION", default_value_t = TrainingConfig::default().text_only_fraction)]
    text_only_fraction: f64,
    #[arg(long, env = "ANYLEVEL_ZERO_LEVEL_WEIGHT", default_value_t = TrainingConfig::default().zero_level_weight)]
    zero_level_weight: f64,
    /// Parameter averaging decay; 0 disables it.
    #[arg(long, env = "ANYLEVEL_EMA_DECAY", default_value_t = TrainingConfig::default().ema_decay.unwrap_or(0.0))]
    ema_decay: f64,
    #[arg(long, env = "ANYLEVEL_DIFFUSION_STEPS", default_value_t = TrainingConfig::default().diffusion_steps)]
    diffusion_steps: u32,
    #[arg(long, env = "ANYLEVEL_EMBED_DIM", default_value_t = TrainingConfig::default().embed_dim)]
    embed_dim: usize,
    /// Channels of the three resolution stages.
    #[arg(long, env = "ANYLEVEL_CHANNELS", value_delimiter = ',', default_value = "16,32,32")]
    channels: Vec<usize>,
    #[arg(long, env = "ANYLEVEL_ATTENTION", default_value_t = TrainingConfig::default().attention, action = clap::ArgAction::Set)]
    attention: bool,
    #[arg(long, env = "ANYLEVEL_VALIDATION_SCENES", default_value_t = TrainingConfig::default().validation_scenes)]
    validation_scenes: usize,
    #[arg(long, env = "ANYLEVEL_VALIDATE_EVERY", default_value_t = TrainingConfig::default().validate_every)]
    validate_every: u64,
    #[arg(long, env = "ANYLEVEL_CHECKPOINT_EVERY", default_value_t = TrainingConfig::default().checkpoint_every)]
    checkpoint_every: u64,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    /// TOML file with defaults for these flags.
    #[arg(long, env = "ANYLEVEL_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, env = "ANYLEVEL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Layout document (JSON).
    #[arg(long, env = "ANYLEVEL_LAYOUT")]
    layout: Option<PathBuf>,
    /// Override every region's precision; per-region levels if absent.
    #[arg(long, env = "ANYLEVEL_LEVEL")]
    level: Option<u32>,
    #[arg(long, env = "ANYLEVEL_SCALE", default_value_t = crate::sampling::DEFAULT_GUIDANCE_SCALE)]
    scale: f64,
    /// Levels replaced by the null embedding in the unconditional pass; all if absent.
    #[arg(long, env = "ANYLEVEL_DROP_LEVELS", value_delimiter = ',')]
    drop_levels: Option<Vec<u32>>,
    #[arg(long, env = "ANYLEVEL_STEPS", default_value_t = 50)]
    steps: u32,
    #[arg(long, env = "ANYLEVEL_SAMPLER", default_value = "ddim", value_parser = parse_sampler)]
    #[serde(serialize_with = "sampler_name")]
    sampler: SamplerKind,
    #[arg(long, env = "ANYLEVEL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ANYLEVEL_SAMPLES", default_value_t = 1)]
    samples: usize,
    #[arg(long, env = "ANYLEVEL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// TOML file with defaults for these flags.
    #[arg(long, env = "ANYLEVEL_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, env = "ANYLEVEL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// A layout document or a directory of them, authored at full precision.
    #[arg(long, env = "ANYLEVEL_LAYOUTS")]
    layouts: Option<PathBuf>,
    /// Precision levels to compare; 0 plus every admissible level if absent.
    #[arg(long, env = "ANYLEVEL_LEVELS", value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    /// Sampling seeds shared across levels; SEED..SEED+NUM_SEEDS if absent.
    #[arg(long, env = "ANYLEVEL_SEEDS", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, env = "ANYLEVEL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ANYLEVEL_NUM_SEEDS", default_value_t = 2)]
    num_seeds: u64,
    #[arg(long, env = "ANYLEVEL_SCALE", default_value_t = crate::sampling::DEFAULT_GUIDANCE_SCALE)]
    scale: f64,
    #[arg(long, env = "ANYLEVEL_STEPS", default_value_t = 50)]
    steps: u32,
    #[arg(long, env = "ANYLEVEL_SAMPLER", default_value = "ddim", value_parser = parse_sampler)]
    #[serde(serialize_with = "sampler_name")]
    sampler: SamplerKind,
    /// Smallest SS(last) - SS(first) that passes the trend gate.
    #[arg(long, env = "ANYLEVEL_MIN_GAIN", default_value_t = 0.05)]
    min_gain: f64,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "ANYLEVEL_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(long, env = "ANYLEVEL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    /// TOML file with defaults for these flags.
    #[arg(long, env = "ANYLEVEL_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Checkpoint to load; without one, model endpoints answer 503.
    #[arg(long, env = "ANYLEVEL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "ANYLEVEL_HOST", default_value_t = ServiceConfig::default().host)]
    host: String,
    #[arg(long, env = "ANYLEVEL_PORT", default_value_t = ServiceConfig::default().port)]
    port: u16,
    #[arg(long, env = "ANYLEVEL_WORKERS", default_value_t = ServiceConfig::default().workers)]
    workers: usize,
    /// Seconds a finished job stays retrievable.
    #[arg(long, env = "ANYLEVEL_TTL", default_value_t = ServiceConfig::default().ttl)]
    ttl: u64,
    #[arg(long, env = "ANYLEVEL_QUEUE_CAPACITY", default_value_t = ServiceConfig::default().queue_capacity)]
    queue_capacity: usize,
    #[arg(long, env = "ANYLEVEL_DEFAULT_STEPS", default_value_t = ServiceConfig::default().default_steps)]
    default_steps: u32,
    /// Seeds the seeds drawn for requests that omit one; random if absent.
    #[arg(long, env = "ANYLEVEL_SEED")]
    seed: Option<u64>,
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn sampler_name<S: serde::Serializer>(kind: &SamplerKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match kind {
        SamplerKind::Ancestral => "ancestral",
        SamplerKind::Ddim => "ddim",
    })
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

fn read_config_file(path: Option<&Path>) -> std::result::Result<toml::Table, Failure> {
    let Some(path) = path else { return Ok(toml::Table::new()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>().map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Fills fields not set by flag or environment from the config file.
macro_rules! layer {
    ($args:expr, $m:expr, $file:expr, [$($field:ident),* $(,)?]) => {{
        let known: &[&str] = &[$(stringify!($field)),*];
        if let Some(bad) = $file.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(usage(format!("unknown config key `{bad}`")));
        }
        $(
            if !explicit($m, stringify!($field)) {
                if let Some(v) = $file.get(stringify!($field)) {
                    $args.$field = v
                        .clone()
                        .try_into()
                        .map_err(|e| usage(format!("config key `{}`: {e}", stringify!($field))))?;
                }
            }
        )*
    }};
}

/// Parses `argv` and runs the chosen subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let result = match cli.command {
        Command::Datagen(a) => datagen(a, sub),
        Command::Train(a) => train_cmd(a, sub),
        Command::Sample(a) => sample_cmd(a, sub),
        Command::Eval(a) => eval_cmd(a, sub),
        Command::Serve(a) => serve_cmd(a, sub),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}

fn echo(name: &str, args: &impl Serialize, out: Option<&Path>) -> Outcome {
    let text = toml::to_string(args).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("# effective {name} config\n{text}");
    if let Some(dir) = out {
        let path = dir.join(format!("{name}_config.toml"));
        fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn existing<'a>(value: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    let path = required(value, flag)?;
    if !path.exists() {
        return Err(usage(format!("--{flag} {}: no such file or directory", path.display())));
    }
    Ok(path)
}

fn create_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn report_failure(report: &ValidationReport) -> Failure {
    let lines: Vec<String> = report
        .violations
        .iter()
        .map(|v| match v.region {
            Some(r) => format!("  region {r}: {}", v.message),
            None => format!("  {}", v.message),
        })
        .collect();
    usage(format!("invalid layout:\n{}", lines.join("\n")))
}

fn read_spec(path: &Path) -> std::result::Result<SceneSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let spec: SceneSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

fn datagen(mut a: DatagenArgs, m: &ArgMatches) -> Outcome {
    let file = read_config_file(a.config.as_deref())?;
    layer!(a, m, file, [spec, canvas_exponent, count, seed, shard_size, layouts, out]);
    let out = required(&a.out, "out")?.to_path_buf();
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if a.shard_size == 0 {
        return Err(usage("--shard-size must be positive"));
    }
    if a.layouts > a.count {
        return Err(usage("--layouts cannot exceed --count"));
    }
    let spec = match &a.spec {
        Some(path) => read_spec(path)?,
        None => {
            let spec = SceneSpec::toy(a.canvas_exponent);
            spec.validate()?;
            spec
        }
    };
    create_out(&out)?;
    echo("datagen", &a, Some(&out))?;
    let manifest = write_shards(&out, &spec, a.seed, a.count, a.shard_size)?;
    if a.layouts > 0 {
        let dir = out.join("layouts");
        create_out(&dir)?;
        for i in 0..a.layouts {
            let scene = generate_scene(&spec, scene_seed(a.seed, i))?;
            write_layout(&dir.join(format!("layout_{i:05}.json")), &scene.layout(&spec))?;
        }
    }
    println!("wrote {} scenes to {}", manifest.count, out.display());
    println!("manifest checksum {}", manifest.checksum()?);
    Ok(())
}

fn train_cmd(mut a: TrainArgs, m: &ArgMatches) -> Outcome {
    let file = read_config_file(a.config.as_deref())?;
    layer!(
        a,
        m,
        file,
        [
            data,
            out,
            seed,
            steps,
            batch_size,
            learning_rate,
            level0_dropout_prob,
            text_only_fraction,
            zero_level_weight,
            ema_decay,
            diffusion_steps,
            embed_dim,
            channels,
            attention,
            validation_scenes,
            validate_every,
            checkpoint_every,
        ]
    );
    let data = existing(&a.data, "data")?.to_path_buf();
    let out = required(&a.out, "out")?.to_path_buf();
    let channels: [usize; 3] = a.channels.clone().try_into().map_err(|_| usage("--channels takes exactly three values"))?;
    if !(0.0..1.0).contains(&a.ema_decay) {
        return Err(usage("--ema-decay must lie in [0, 1)"));
    }
    let config = TrainingConfig {
        seed: a.seed,
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        level0_dropout_prob: a.level0_dropout_prob,
        text_only_fraction: a.text_only_fraction,
        zero_level_weight: a.zero_level_weight,
        ema_decay: (a.ema_decay > 0.0).then_some(a.ema_decay),
        diffusion_steps: a.diffusion_steps,
        embed_dim: a.embed_dim,
        channels,
        attention: a.attention,
        validation_scenes: a.validation_scenes,
        validate_every: a.validate_every,
        checkpoint_every: a.checkpoint_every,
    };
    config.validate()?;
    create_out(&out)?;
    echo("train", &a, Some(&out))?;
    let dataset = read_shards(&data)?;
    let ckpt_path = out.join("model.ckpt");
    let outcome = train(&dataset, &config, |c| c.save(&ckpt_path))?;
    outcome.checkpoint.save(&ckpt_path)?;
    let curve_path = out.join("loss_curve.csv");
    let mut f = fs::File::create(&curve_path).map_err(|e| Failure::Runtime(format!("{}: {e}", curve_path.display())))?;
    write_loss_curve(&mut f, &outcome.curve).map_err(|e| Failure::Runtime(e.to_string()))?;
    match outcome.status {
        TrainStatus::Completed => {
            let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
            println!("final loss {last:.6}");
            println!("checkpoint {}", ckpt_path.display());
            Ok(())
        }
        TrainStatus::Diverged { step, loss, initial } => Err(Failure::Runtime(format!(
            "{}; kept the checkpoint from step {} at {}",
            Error::Diverged { step, loss, initial },
            outcome.checkpoint.header.step,
            ckpt_path.display()
        ))),
    }
}

fn load_model(path: &Path) -> std::result::Result<Model, Failure> {
    Model::load(path).map_err(|e| Failure::Runtime(format!("cannot load checkpoint: {e}")))
}

fn sample_cmd(mut a: SampleArgs, m: &ArgMatches) -> Outcome {
    let file = read_config_file(a.config.as_deref())?;
    layer!(a, m, file, [checkpoint, layout, level, scale, drop_levels, steps, sampler, seed, samples, out]);
    let ckpt = existing(&a.checkpoint, "checkpoint")?.to_path_buf();
    let layout_path = existing(&a.layout, "layout")?.to_path_buf();
    let out = required(&a.out, "out")?.to_path_buf();
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let mut layout = read_layout(&layout_path)?;
    let model = load_model(&ckpt)?;
    if let Some(level) = a.level {
        if level != 0 && !model.header.admissible_levels.contains(crate::layout::PrecisionLevel(level)) {
            return Err(usage(format!("--level {level} is not admissible for this checkpoint")));
        }
        layout = layout.at_precision(level);
    }
    let report = model.check_layout(&layout);
    if !report.is_ok() {
        return Err(report_failure(&report));
    }
    let guidance = GuidanceConfig { scale: a.scale, drop_levels: a.drop_levels.clone() };
    guidance.validate(model.canvas_exponent())?;
    let sampler = SamplerConfig { steps: a.steps, kind: a.sampler, seed: a.seed, clip_denoised: true };
    sampler.validate(model.schedule())?;
    create_out(&out)?;
    echo("sample", &a, Some(&out))?;
    let pyramid = build_feature_pyramid(&layout, model.provider())?;
    for k in 0..a.samples {
        let image = sample_one(&model, &pyramid, &guidance, &sampler, k as u64, &mut |_, _| {})?;
        let path = out.join(format!("sample_{k:03}.png"));
        write_png(&path, &image)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn read_layouts(path: &Path) -> std::result::Result<Vec<Layout>, Failure> {
    if path.is_file() {
        return Ok(vec![read_layout(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("{}: no layout documents", path.display())));
    }
    files.iter().map(|f| read_layout(f).map_err(Failure::from)).collect()
}

fn eval_cmd(mut a: EvalArgs, m: &ArgMatches) -> Outcome {
    let file = read_config_file(a.config.as_deref())?;
    layer!(a, m, file, [checkpoint, layouts, levels, seeds, seed, num_seeds, scale, steps, sampler, min_gain, threads, out]);
    let ckpt = existing(&a.checkpoint, "checkpoint")?.to_path_buf();
    let layouts_path = existing(&a.layouts, "layouts")?.to_path_buf();
    let out = required(&a.out, "out")?.to_path_buf();
    let seeds: Vec<u64> = a.seeds.clone().unwrap_or_else(|| (a.seed..a.seed + a.num_seeds).collect());
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let layouts = read_layouts(&layouts_path)?;
    let model = load_model(&ckpt)?;
    let spec = model
        .header
        .scene_spec
        .clone()
        .ok_or_else(|| usage("checkpoint carries no scene specification to score against"))?;
    let levels = a.levels.clone().unwrap_or_else(|| {
        let mut v = vec![0];
        v.extend(model.header.admissible_levels.levels().iter().map(|l| l.value()).filter(|&l| l != 0));
        v
    });
    for (i, layout) in layouts.iter().enumerate() {
        let report = model.check_layout(layout);
        if !report.is_ok() {
            return Err(usage(format!("layout {i}: {}", report_failure(&report))));
        }
    }
    let guidance = GuidanceConfig::with_scale(a.scale);
    guidance.validate(model.canvas_exponent())?;
    let sampler = SamplerConfig { steps: a.steps, kind: a.sampler, seed: 0, clip_denoised: true };
    sampler.validate(model.schedule())?;
    create_out(&out)?;
    echo("eval", &a, Some(&out))?;
    let report = precision_trend(
        &model,
        model.provider(),
        &spec,
        &layouts,
        &levels,
        &seeds,
        &guidance,
        &sampler,
        TrendOptions { threads: a.threads },
    )?;
    let json_path = out.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&report).map_err(Error::from)?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", json_path.display())))?;
    let csv_path = out.join("trend.csv");
    let mut f = fs::File::create(&csv_path).map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
    report.write_csv(&mut f).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("level  mean_ss  mean_fidelity  samples");
    for r in &report.levels {
        println!("{:>5}  {:.4}   {:.4}         {}", r.level, r.mean_ss, r.mean_fidelity, r.samples);
    }
    for p in &report.paired {
        println!("SS({}) - SS({}) = {:+.4}  t = {:.3}  p = {:.3e}", p.upper, p.lower, p.mean_diff, p.t, p.p);
    }
    if let Some(w) = &report.warning {
        println!("warning: {w}");
    }
    println!("report {}", json_path.display());
    if report.holds(a.min_gain) {
        println!("trend holds: strictly increasing, gain {:.4} >= {}", report.gain, a.min_gain);
        Ok(())
    } else {
        Err(Failure::TrendGate(format!(
            "strictly increasing = {}, gain {:.4} (need >= {})",
            report.strictly_increasing, report.gain, a.min_gain
        )))
    }
}

fn serve_cmd(mut a: ServeArgs, m: &ArgMatches) -> Outcome {
    let file = read_config_file(a.config.as_deref())?;
    layer!(a, m, file, [checkpoint, host, port, workers, ttl, queue_capacity, default_steps, seed]);
    if a.workers == 0 || a.queue_capacity == 0 || a.default_steps == 0 {
        return Err(usage("--workers, --queue-capacity and --default-steps must be positive"));
    }
    let model = match &a.checkpoint {
        Some(_) => Some(load_model(existing(&a.checkpoint, "checkpoint")?)?),
        None => {
            log::warn!("no checkpoint given; model endpoints will answer 503");
            None
        }
    };
    echo("serve", &a, None)?;
    let config = ServiceConfig {
        checkpoint: a.checkpoint,
        host: a.host,
        port: a.port,
        workers: a.workers,
        ttl: a.ttl,
        queue_capacity: a.queue_capacity,
        default_steps: a.default_steps,
        seed: a.seed,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(serve(AppState::new(model, config)))?;
    Ok(())
}
