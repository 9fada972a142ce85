//! Command-line entry point.
//!
//! Every subcommand resolves its settings as flag > `--config` file >
//! default and prints the result as `key=value` lines before doing any
//! work. That block is itself a valid config file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::backbone::{ModelConfig, ModelState};
use crate::checkpoint::{self, Checkpoint};
use crate::error::Error;
use crate::interleave::{decode, DecodeMode};
use crate::losses::LossWeights;
use crate::suite::{run_suite, Suite};
use crate::synthworld::{generate_range, read_dataset, write_dataset, EncoderBank, Episode, WorldConfig};
use crate::trainer::{
    eval_options, evaluate, train, EvalReport, LatentTiming, OptimState, SyncSource, TrainConfig, METRICS_HEADER,
};

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "LOMNI_THREADS";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) => e.exit_code(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "latentomni", about = "Interleaved latent reasoning on a synthetic audio-visual world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Greedily decode one episode and print the element dump.
    Decode(DecodeArgs),
    /// Run the gradient and invariant checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Flat key=value file with defaults for any flag below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<String>,
    /// Index of the first episode.
    #[arg(long)]
    start: Option<u64>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    visual_alphabet: Option<u32>,
    #[arg(long)]
    audio_alphabet: Option<u32>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    frame_rate: Option<f64>,
    #[arg(long)]
    feature_dim_visual: Option<usize>,
    #[arg(long)]
    feature_dim_audio: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training set (JSON lines).
    #[arg(long, required_unless_present = "config")]
    data: Option<String>,
    /// Checkpoint written at the end of the run.
    #[arg(long, required_unless_present = "config")]
    out: Option<String>,
    /// Total optimizer steps (sets the schedule).
    #[arg(long)]
    steps: Option<usize>,
    /// Stop once this many steps have been taken.
    #[arg(long)]
    until: Option<usize>,
    /// Restore the original fine-tuning hyperparameters.
    #[arg(long)]
    paper_hparams: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    grad_accumulation: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Integer positions instead of timestamp rotations.
    #[arg(long)]
    no_ospe: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV (default: <out>.metrics.csv).
    #[arg(long)]
    metrics: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<String>,
    /// Held-out set evaluated at the end (and every --eval-every steps).
    #[arg(long)]
    eval_data: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// segment|sequential
    #[arg(long)]
    latent_timing: Option<LatentTiming>,
    /// projected|hidden
    #[arg(long)]
    sync_source: Option<SyncSource>,
    /// Feed anchors instead of the model's own latents during training.
    #[arg(long)]
    anchor_forcing: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    ckpt: Option<String>,
    #[arg(long, required_unless_present = "config")]
    data: Option<String>,
    #[arg(long)]
    latent_timing: Option<LatentTiming>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    ckpt: Option<String>,
    #[arg(long, required_unless_present = "config")]
    data: Option<String>,
    /// Zero-based line of the episode in the dataset.
    #[arg(long, required_unless_present = "config")]
    index: Option<usize>,
    /// CSV of position,region,av_ratio for every generated position.
    #[arg(long)]
    dump_attention: Option<String>,
    /// Sample with this seed instead of decoding greedily.
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    max_text: Option<usize>,
    #[arg(long)]
    latent_timing: Option<LatentTiming>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// all|losses|backbone|ospe
    #[arg(long)]
    suite: Option<String>,
}

/// Resolves settings from flags, a config file and defaults, recording the
/// effective value of each key.
struct Resolver {
    file: BTreeMap<String, String>,
    echo: Vec<(String, String)>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
                })?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Self { file, echo: Vec::new() })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
        }
    }

    fn record(&mut self, key: &str, value: &dyn Display) {
        self.echo.push((key.to_string(), value.to_string()));
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{}", key.replace('_', "-"))))
    }

    /// A switch set on the command line wins; otherwise the file decides.
    fn switch(&mut self, key: &str, flag: bool, default: bool) -> CliResult<bool> {
        let v = flag || self.from_file(key)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    /// Prints the effective configuration; leftover file keys are an error.
    fn finish(self, out: &mut dyn Write) -> CliResult<()> {
        if let Some(k) = self.file.keys().next() {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        let mut text = String::from("# effective configuration\n");
        for (k, v) in &self.echo {
            text.push_str(&format!("{k}={v}\n"));
        }
        write_out(out, &text)
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Run(Error::io("stdout", e)))
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// results to stdout and diagnostics to stderr. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    run_with(args, &mut out)
}

/// Like [`run`] with an explicit output stream.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = init_threads().and_then(|_| dispatch(cli.command, out));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run with --help for usage");
            }
            e.exit_code()
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Decode(a) => decode_cmd(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let d = WorldConfig::default();
    let seed = r.required("seed", a.seed)?;
    let episodes: usize = r.required("episodes", a.episodes)?;
    let path: String = r.required("out", a.out)?;
    let start = r.get("start", a.start, 0)?;
    let cfg = WorldConfig {
        timesteps: r.get("timesteps", a.timesteps, d.timesteps)?,
        visual_alphabet: r.get("visual_alphabet", a.visual_alphabet, d.visual_alphabet)?,
        audio_alphabet: r.get("audio_alphabet", a.audio_alphabet, d.audio_alphabet)?,
        noise_sigma: r.get("noise_sigma", a.noise_sigma, d.noise_sigma)?,
        frame_rate: r.get("frame_rate", a.frame_rate, d.frame_rate)?,
        feature_dim_visual: r.get("feature_dim_visual", a.feature_dim_visual, d.feature_dim_visual)?,
        feature_dim_audio: r.get("feature_dim_audio", a.feature_dim_audio, d.feature_dim_audio)?,
        seed,
    };
    r.finish(out)?;
    cfg.validate()?;
    let eps = generate_range(&cfg, start, episodes)?;
    write_dataset(&eps, Path::new(&path))?;
    write_out(out, &format!("wrote {} episodes to {path}\n", eps.len()))?;
    Ok(0)
}

fn load_data(path: &str) -> CliResult<Vec<Episode>> {
    let eps = read_dataset(Path::new(path))?;
    if eps.is_empty() {
        return Err(Error::Data(format!("{path}: no episodes")).into());
    }
    Ok(eps)
}

/// The model must read the world's vocabulary and feature sizes.
fn check_compat(model: &ModelConfig, world: &WorldConfig) -> CliResult<()> {
    world.vocab().check(model.vocab_size)?;
    if model.feature_dim_visual != world.feature_dim_visual || model.feature_dim_audio != world.feature_dim_audio {
        return Err(Error::Data(format!(
            "model feature dims {}/{} do not match the dataset's {}/{}",
            model.feature_dim_visual, model.feature_dim_audio, world.feature_dim_visual, world.feature_dim_audio
        ))
        .into());
    }
    Ok(())
}

fn print_report(out: &mut dyn Write, label: &str, report: &EvalReport) -> CliResult<()> {
    let json = serde_json::to_string(report).map_err(|e| Error::Format(e.to_string()))?;
    let mut text = format!("{label}{json}\n");
    match (report.av_ratio_latent, report.av_ratio_text) {
        (Some(l), Some(t)) if l > t => text.push_str("av_ratio_direction=latent>text\n"),
        (Some(_), Some(_)) => text.push_str("av_ratio_direction=latent<=text (not the expected direction)\n"),
        _ => {}
    }
    write_out(out, &text)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data: String = r.required("data", a.data)?;
    let ckpt_path: String = r.required("out", a.out)?;
    let resume: Option<String> = r.optional("resume", a.resume)?;
    let resumed = resume.as_deref().map(|p| checkpoint::load(Path::new(p))).transpose()?;

    let dataset = load_data(&data)?;
    let world = dataset[0].config.clone();

    // Resuming takes its defaults from the checkpoint.
    let paper = r.switch("paper_hparams", a.paper_hparams, false)?;
    let mut base = resumed.as_ref().and_then(|c| c.train.clone()).unwrap_or_default();
    if paper {
        base = base.paper_hparams();
    }
    let md = match &resumed {
        Some(c) => c.model.config().clone(),
        None => ModelConfig {
            feature_dim_visual: world.feature_dim_visual,
            feature_dim_audio: world.feature_dim_audio,
            ..ModelConfig::default()
        },
    };
    let cfg = TrainConfig {
        total_steps: r.get("steps", a.steps, base.total_steps)?,
        base_lr: r.get("lr", a.lr, base.base_lr)?,
        warmup_fraction: r.get("warmup_fraction", a.warmup_fraction, base.warmup_fraction)?,
        grad_accumulation: r.get("grad_accumulation", a.grad_accumulation, base.grad_accumulation)?,
        weights: LossWeights {
            lambda1: r.get("lambda1", a.lambda1, base.weights.lambda1)?,
            lambda2: r.get("lambda2", a.lambda2, base.weights.lambda2)?,
        },
        clip_norm: r.get("clip_norm", a.clip_norm, base.clip_norm)?,
        latent_timing: r.get("latent_timing", a.latent_timing, base.latent_timing)?,
        sync_source: r.get("sync_source", a.sync_source, base.sync_source)?,
        anchor_forcing: r.switch("anchor_forcing", a.anchor_forcing, base.anchor_forcing)?,
        eval_every: r.get("eval_every", a.eval_every, base.eval_every)?,
        seed: r.get("seed", a.seed, base.seed)?,
        ..base
    };
    let until = r.get("until", a.until, cfg.total_steps)?;
    let model_cfg = ModelConfig {
        layers: r.get("layers", a.layers, md.layers)?,
        heads: r.get("heads", a.heads, md.heads)?,
        dim: r.get("dim", a.dim, md.dim)?,
        ff_dim: r.get("ff_dim", a.ff_dim, md.ff_dim)?,
        vocab_size: r.get("vocab_size", a.vocab_size, md.vocab_size)?,
        ospe: !r.switch("no_ospe", a.no_ospe, !md.ospe)?,
        ..md
    };
    let metrics_path: String = r.get("metrics", a.metrics, format!("{ckpt_path}.metrics.csv"))?;
    let eval_data: Option<String> = r.optional("eval_data", a.eval_data)?;
    r.finish(out)?;

    cfg.validate()?;
    model_cfg.validate()?;
    check_compat(&model_cfg, &world)?;
    let (mut model, mut optim) = match resumed {
        Some(Checkpoint { model, optim, .. }) => {
            if *model.config() != model_cfg {
                return Err(CliError::Usage("model settings differ from the resumed checkpoint".into()));
            }
            (model, optim)
        }
        None => {
            let model = ModelState::init(model_cfg, cfg.seed)?;
            let optim = OptimState::new(&model);
            (model, optim)
        }
    };
    let held_out = eval_data.as_deref().map(load_data).transpose()?;
    let bank = EncoderBank::new(&world);

    let metrics_file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let started = Instant::now();
    let mut on_step = |step: usize, b: &crate::losses::LossBreakdown, m: &ModelState, _: &OptimState| {
        let done = step + 1;
        if done.is_multiple_of(25) || done == until {
            eprintln!(
                "step {done} total {:.4} text {:.4} latent {:.4} sync {:.4} ({:.0}s)",
                b.total,
                b.text,
                b.latent,
                b.sync,
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(eps) = &held_out {
            if cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every) && done < until {
                let report = evaluate(m, eps, &bank, cfg.budget, cfg.latent_timing)?;
                print_report(out, &format!("eval step={done} "), &report).map_err(|e| match e {
                    CliError::Run(e) => e,
                    CliError::Usage(s) => Error::Contract(s),
                })?;
            }
        }
        Ok(())
    };
    let trace = train(&mut model, &mut optim, &dataset, &bank, &cfg, until, &mut metrics, &mut on_step);
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let trace = trace?;

    checkpoint::save(&model, &optim, Some(&cfg), Path::new(&ckpt_path))?;
    let mut text = format!("trained {} steps (now at step {})\n", trace.len(), optim.step);
    if let Some(b) = trace.last() {
        text.push_str(&format!(
            "final total={} text={} latent={} sync={}\n",
            b.total, b.text, b.latent, b.sync
        ));
    }
    text.push_str(&format!("checkpoint={ckpt_path}\nmetrics={metrics_path}\n"));
    write_out(out, &text)?;
    if let Some(eps) = &held_out {
        let report = evaluate(&model, eps, &bank, cfg.budget, cfg.latent_timing)?;
        print_report(out, "eval ", &report)?;
    }
    Ok(0)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let ckpt_path: String = r.required("ckpt", a.ckpt)?;
    let data: String = r.required("data", a.data)?;
    let ckpt = checkpoint::load(Path::new(&ckpt_path))?;
    let train_cfg = ckpt.train.clone().unwrap_or_default();
    let timing = r.get("latent_timing", a.latent_timing, train_cfg.latent_timing)?;
    r.finish(out)?;

    let eps = load_data(&data)?;
    check_compat(ckpt.model.config(), &eps[0].config)?;
    let bank = EncoderBank::new(&eps[0].config);
    let report = evaluate(&ckpt.model, &eps, &bank, train_cfg.budget, timing)?;
    print_report(out, "", &report)?;
    Ok(0)
}

fn decode_cmd(a: DecodeArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let ckpt_path: String = r.required("ckpt", a.ckpt)?;
    let data: String = r.required("data", a.data)?;
    let index: usize = r.required("index", a.index)?;
    let ckpt = checkpoint::load(Path::new(&ckpt_path))?;
    let train_cfg = ckpt.train.clone().unwrap_or_default();
    let timing = r.get("latent_timing", a.latent_timing, train_cfg.latent_timing)?;
    let max_text = r.get("max_text", a.max_text, 8)?;
    let sample_seed: Option<u64> = r.optional("sample_seed", a.sample_seed)?;
    let dump: Option<String> = r.optional("dump_attention", a.dump_attention)?;
    r.finish(out)?;

    let eps = load_data(&data)?;
    let ep = eps
        .get(index)
        .ok_or_else(|| Error::Data(format!("{data} has {} episodes, index {index} is out of range", eps.len())))?;
    check_compat(ckpt.model.config(), &ep.config)?;
    let bank = EncoderBank::new(&ep.config);
    let mut opts = eval_options(ep, train_cfg.budget, timing);
    opts.max_text = max_text;
    if let Some(seed) = sample_seed {
        opts.mode = DecodeMode::Sampled { seed };
    }
    let decoded = decode(&ckpt.model, &ep.prompt(&bank)?, &opts)?;
    write_out(out, &decoded.sequence.dump())?;
    let verdict = match decoded.sequence.answer_token() {
        Some(t) if t == ep.answer_token() => "correct",
        Some(_) => "wrong",
        None => "missing",
    };
    write_out(out, &format!("# expected {} ({verdict})\n", ep.answer_token()))?;

    if let Some(path) = dump {
        let mut csv = String::from("position,region,av_ratio\n");
        let start = decoded.sequence.prompt.len();
        for (i, (region, ratio)) in decoded.generated_ratios().enumerate() {
            csv.push_str(&format!("{},{},{ratio}\n", start + i, region.tag()));
        }
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let name = r.get("suite", a.suite, "all".to_string())?;
    r.finish(out)?;
    let suite =
        Suite::parse(&name).ok_or_else(|| CliError::Usage(format!("unknown suite `{name}` (all|losses|backbone|ospe)")))?;
    let started = Instant::now();
    let checks = run_suite(suite)?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{c}\n"));
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    text.push_str(&format!(
        "{} checks, {failed} failed, {:.1}s\n",
        checks.len(),
        started.elapsed().as_secs_f64()
    ));
    write_out(out, &text)?;
    Ok(if failed == 0 { 0 } else { 3 })
}
