//! `cae`: train the consistency autoencoder, encode and decode audio, and
//! evaluate reconstructions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cae_core::audio_io::{read_wav, write_wav};
use cae_core::checkpoint::{self, Checkpoint};
use cae_core::codec::{decode_latents, encode_waveform, read_latents, roundtrip, write_latents, DecodeOptions};
use cae_core::config::{Profile, RunConfig};
use cae_core::dataio::{Dataset, DatasetSpec, SourceConfig};
use cae_core::metrics::{evaluate_directories, evaluate_directory};
use cae_core::model::Model;
use cae_core::network::{count_parameters, Params};
use cae_core::training::{resume, train, TrainOptions, TrainState};
use cae_core::Error;

/// Default directory for checkpoints when `--out` / `--checkpoint` are omitted.
const CHECKPOINT_ENV: &str = "CAE_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(name = "cae", version, about = "Consistency autoencoder for audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Encode a WAV file into a latent file.
    Encode(EncodeArgs),
    /// Decode a latent file into a WAV file.
    Decode(DecodeArgs),
    /// Encode and decode a WAV file, printing quality metrics.
    Roundtrip(RoundtripArgs),
    /// Score reconstructions of a directory of WAV files.
    Eval(EvalArgs),
    /// Describe a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML). Without it the `--profile` defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    profile: ProfileArg,
    /// Data directory, optionally `DIR=WEIGHT`. Repeatable; added to the
    /// sources listed in the config.
    #[arg(long = "data")]
    data: Vec<String>,
    /// Output directory [default: $CAE_CHECKPOINT_DIR].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many total iterations.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Convert audio at other sample rates instead of rejecting it.
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Paper,
    Toy,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint file or directory [default: latest in $CAE_CHECKPOINT_DIR].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the raw weights instead of the EMA weights.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct DecodeFlags {
    /// Denoising steps [default: from the checkpoint config].
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed [default: from the checkpoint config].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    decode: DecodeFlags,
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RoundtripArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    decode: DecodeFlags,
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Directory of reference WAV files.
    #[arg(long)]
    ref_dir: PathBuf,
    /// Compare against these files instead of model reconstructions.
    #[arg(long)]
    est_dir: Option<PathBuf>,
    /// Report path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::State(_) => 1,
            Error::NonFinite { .. } | Error::Domain(_) | Error::DegeneratePair(_) | Error::Range { .. } => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn env_dir() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn resolve_checkpoint(arg: &Option<PathBuf>) -> CliResult<PathBuf> {
    let path = match arg.clone().or_else(env_dir) {
        Some(p) => p,
        None => return Err(usage(format!("no checkpoint given; pass --checkpoint or set {CHECKPOINT_ENV}"))),
    };
    if path.is_dir() {
        return checkpoint::latest_in(&path)?
            .ok_or_else(|| Failure { code: 2, message: format!("no checkpoints in {}", path.display()) });
    }
    if !path.exists() {
        return Err(Failure { code: 2, message: format!("checkpoint {} does not exist", path.display()) });
    }
    Ok(path)
}

struct Loaded {
    ckpt: Checkpoint,
    model: Model,
    use_ema: bool,
}

impl Loaded {
    fn open(args: &ModelArgs) -> CliResult<Self> {
        let path = resolve_checkpoint(&args.checkpoint)?;
        let ckpt = checkpoint::load(&path)?;
        let model = Model::from_config(&ckpt.config)?;
        let use_ema = ckpt.config.codec.use_ema && !args.raw;
        log::info!("loaded {} (iteration {})", path.display(), ckpt.k);
        Ok(Self { ckpt, model, use_ema })
    }

    fn params(&self) -> &Params<f32> {
        self.ckpt.inference_params(self.use_ema)
    }

    fn decode_options(&self, flags: &DecodeFlags) -> CliResult<DecodeOptions> {
        let codec = &self.ckpt.config.codec;
        Ok(DecodeOptions::new(
            flags.steps.unwrap_or(codec.n_steps),
            flags.seed.unwrap_or(codec.seed),
            &self.model.schedule,
        )?)
    }
}

fn parse_source(text: &str) -> CliResult<SourceConfig> {
    match text.rsplit_once('=') {
        Some((dir, w)) => {
            let weight = w.parse().map_err(|_| usage(format!("bad weight in --data {text}")))?;
            Ok(SourceConfig { path: dir.into(), weight })
        }
        None => Ok(SourceConfig { path: text.into(), weight: 1.0 }),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::for_profile(match args.profile {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Toy => Profile::Toy,
        }),
    };
    for d in &args.data {
        cfg.data.sources.push(parse_source(d)?);
    }
    cfg.data.resample |= args.resample;
    cfg.validate()?;
    if cfg.data.sources.is_empty() {
        return Err(usage("no data sources; pass --data DIR or list [[data.sources]] in the config"));
    }
    let out = args.out.or_else(env_dir).ok_or_else(|| usage(format!("pass --out or set {CHECKPOINT_ENV}")))?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::from(Error::io(&out, e)))?;

    let model = Model::from_config(&cfg)?;
    let existing = checkpoint::latest_in(&out)?;
    let state = match (args.resume, existing) {
        (true, Some(path)) => {
            let state = resume(checkpoint::load(&path)?, &cfg)?;
            log::info!("resuming from {} at iteration {}", path.display(), state.k);
            state
        }
        (true, None) => return Err(Failure { code: 2, message: format!("nothing to resume in {}", out.display()) }),
        (false, Some(path)) if !args.force => {
            return Err(Failure {
                code: 2,
                message: format!("{} already holds checkpoints ({}); use --resume or --force", out.display(), path.display()),
            })
        }
        (false, _) => {
            let log = out.join("loss.csv");
            if log.exists() {
                std::fs::remove_file(&log).map_err(|e| Failure::from(Error::io(&log, e)))?;
            }
            TrainState::init(&model.network, cfg.training.seed)
        }
    };
    cae_core::fsutil::write_atomic(&out.join("config.toml"), cfg.to_toml_string()?.as_bytes(), true)?;

    let spec = DatasetSpec {
        sources: cfg.data.sources.clone(),
        chunk_len: model.chunk_len(),
        sample_rate: model.sample_rate,
        resample: cfg.data.resample,
        weighting: cfg.data.weighting,
        seed: cfg.training.seed,
    };
    let mut dataset = Dataset::open(spec, Some(&out.join("index")))?;
    log::info!("{} training files, {} skipped", dataset.index.file_count(), dataset.index.skipped.len());
    let opts = TrainOptions { checkpoint_dir: Some(out.clone()), stop_at: args.stop_at, loss_log: Some(out.join("loss.csv")) };
    let total = model.schedule.total_iters;
    let report_every = (total / 100).max(1);
    let state = train(&model, &cfg, state, &mut dataset, &opts, |s| {
        if (s.k + 1) % report_every == 0 {
            log::info!("iteration {}/{total}: loss {:.4e} lr {:.2e} grad norm {:.3e}", s.k + 1, s.loss, s.lr, s.grad_norm);
        }
    })?;
    println!("trained to iteration {}; checkpoints in {}", state.k, out.display());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> CliResult {
    cae_core::fsutil::check_writable(&args.output, args.force)?;
    let loaded = Loaded::open(&args.model)?;
    let w = read_wav(&args.input, Some(loaded.model.sample_rate), args.resample)?;
    let lat = encode_waveform(&loaded.model, loaded.params(), &w)?;
    write_latents(&args.output, &lat, args.force)?;
    println!("{} latent frames of dimension {} written to {}", lat.frames(), lat.d_lat(), args.output.display());
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> CliResult {
    cae_core::fsutil::check_writable(&args.output, args.force)?;
    let loaded = Loaded::open(&args.model)?;
    let lat = read_latents(&args.input)?;
    let w = decode_latents(&loaded.model, loaded.params(), &lat, &loaded.decode_options(&args.decode)?)?;
    write_wav(&args.output, &w, args.force)?;
    println!("{} samples written to {}", w.len(), args.output.display());
    Ok(())
}

fn cmd_roundtrip(args: RoundtripArgs) -> CliResult {
    cae_core::fsutil::check_writable(&args.output, args.force)?;
    let loaded = Loaded::open(&args.model)?;
    let w = read_wav(&args.input, Some(loaded.model.sample_rate), args.resample)?;
    let (out, metrics) = roundtrip(&loaded.model, loaded.params(), &w, &loaded.decode_options(&args.decode)?)?;
    write_wav(&args.output, &out, args.force)?;
    println!("{}", serde_json::json!({ "file": args.input.display().to_string(), "metrics": metrics }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    cae_core::fsutil::check_writable(&args.out, args.force)?;
    let report = match &args.est_dir {
        Some(est) => {
            let stft = if args.model.checkpoint.is_some() || env_dir().is_some() {
                checkpoint::load(&resolve_checkpoint(&args.model.checkpoint)?)?.config.audio.stft()
            } else {
                log::warn!("no checkpoint given; using the default STFT for the spectral distance");
                RunConfig::paper().audio.stft()
            };
            evaluate_directories(&args.ref_dir, est, stft)?
        }
        None => {
            let loaded = Loaded::open(&args.model)?;
            let opts = loaded.decode_options(&args.decode)?;
            let rate = loaded.model.sample_rate;
            evaluate_directory(&args.ref_dir, loaded.model.stft, Some(loaded.ckpt.config_hash.clone()), |w| {
                let w = if w.sample_rate() == rate {
                    w.clone()
                } else if args.resample {
                    cae_core::audio_io::resample_to(w, rate)?
                } else {
                    return Err(Error::Data(format!("{} Hz input, model expects {rate} Hz", w.sample_rate())));
                };
                Ok(roundtrip(&loaded.model, loaded.params(), &w, &opts)?.0)
            })?
        }
    };
    report.write(&args.out, args.force)?;
    let a = &report.aggregate;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "{} files ({} flagged): mean SI-SDR {} dB, mean LSD {} dB; report in {}",
        a.files,
        a.flagged,
        show(a.mean_si_sdr_db),
        show(a.mean_lsd_db),
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CliResult {
    let path = resolve_checkpoint(&args.model.checkpoint)?;
    let ckpt = checkpoint::load(&path)?;
    println!("checkpoint: {}", path.display());
    println!("iteration: {}", ckpt.k);
    println!("parameters: {}", count_parameters(&ckpt.config.model)?);
    println!("ema: {}", if ckpt.ema.is_some() { "present" } else { "absent" });
    println!("optimizer state: {}", if ckpt.opt.is_some() { "present" } else { "absent" });
    println!("config hash: {}", ckpt.config_hash);
    println!("\n{}", ckpt.config.to_toml_string()?);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Roundtrip(a) => cmd_roundtrip(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
