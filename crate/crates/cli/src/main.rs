//! `aidd`: train a token codec and a diffusion score model, corrupt and
//! restore audio, and evaluate restorations.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aidd_core::audio::{read_wav, write_wav, Waveform};
use aidd_core::codec::{decode, encode, train_codebook, CodecSpec};
use aidd_core::inpaint::{inpaint, make_corrupted, GapSpec};
use aidd_core::metrics::{evaluate_protocol, results_csv, SpectralEmbedder};
use aidd_core::net::ScoreNetwork;
use aidd_core::tokens::{export_tokens, import_tokens, TokenSequence};
use aidd_core::train::{make_batches, train_until, MetricsLog, TrainState};
use aidd_core::{Error, ErrorClass, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aidd", version, about = "Discrete-diffusion audio inpainting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run-config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable: `--set model.dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random stream; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap. All stages currently run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a codebook to every WAV file in a directory.
    TrainCodec {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize a WAV file.
    Encode {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct audio from a token stream.
    Decode {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the score model on a corpus of token streams (`*.tok`), or of
    /// WAV files when `--codec` is given.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/state.aidt`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps instead of `train.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Silence evenly spaced gaps and write the matching gap spec.
    Corrupt {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        gap_ms: f64,
        #[arg(long)]
        n_gaps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Gap spec output; defaults to `<out>.gaps.json`.
        #[arg(long)]
        gaps_out: Option<PathBuf>,
    },
    /// Regenerate the gaps of a WAV file.
    Inpaint {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reverse-diffusion steps; overrides `inpaint.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// LSD and Fréchet distance per gap length, as CSV.
    Eval {
        #[arg(long)]
        clean: PathBuf,
        /// Holds `gap_<ms>/<name>.wav` for each gap length.
        #[arg(long)]
        restored: PathBuf,
        /// Comma-separated gap lengths in milliseconds.
        #[arg(long, value_delimiter = ',', required = true)]
        gaps: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolved_config_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn files_with_extension(dir: &Path, ext: &str) -> aidd_core::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_corpus(dir: &Path) -> aidd_core::Result<Vec<Waveform>> {
    let files = files_with_extension(dir, "wav")?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    files.iter().map(read_wav).collect()
}

fn train_corpus(dir: &Path, codec: Option<&Path>) -> aidd_core::Result<Vec<TokenSequence>> {
    match codec {
        Some(c) => {
            let codec = CodecSpec::load(c)?;
            read_corpus(dir)?.iter().map(|w| encode(w, &codec)).collect()
        }
        None => {
            let files = files_with_extension(dir, "tok")?;
            if files.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            files.iter().map(import_tokens).collect()
        }
    }
}

fn run(cli: Cli) -> aidd_core::Result<()> {
    let mut config = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
        config.train.seed = seed;
        config.inpaint.seed = seed;
    }
    if cli.global.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    match cli.command {
        Command::TrainCodec { corpus, out } => {
            let corpus = read_corpus(&corpus)?;
            let codec = train_codebook(&corpus, &config.codec, config.seed)?;
            codec.save(&out)?;
            config.write_resolved(resolved_config_path(&out))?;
            log::info!("codebook of {} entries written to {}", codec.codebook_size(), out.display());
        }
        Command::Encode { wav, codec, out } => {
            let codec = CodecSpec::load(&codec)?;
            let tokens = encode(&read_wav(&wav)?, &codec)?;
            export_tokens(&tokens, &out)?;
            config.write_resolved(resolved_config_path(&out))?;
        }
        Command::Decode { tokens, codec, out } => {
            let codec = CodecSpec::load(&codec)?;
            let w = decode(&import_tokens(&tokens)?, &codec)?;
            write_wav(&out, &w)?;
            config.write_resolved(resolved_config_path(&out))?;
        }
        Command::Train {
            corpus,
            codec,
            out,
            resume,
            steps,
        } => {
            let corpus = train_corpus(&corpus, codec.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let state_path = out.join("state.aidt");
            let checkpoint_path = out.join("checkpoint.aidd");
            let metrics_path = out.join("metrics.csv");
            let mut state = if resume {
                let s = TrainState::load(&state_path)?;
                if *s.net.config() != config.model {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "{} was trained with {:?}, config asks for {:?}",
                        state_path.display(),
                        s.net.config(),
                        config.model
                    )));
                }
                s
            } else {
                TrainState::new(ScoreNetwork::init(config.model, config.seed)?)
            };
            let batches = make_batches(&corpus, &config.train)?;
            config.write_resolved(out.join("resolved.cfg"))?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(&metrics_path)?;
            let mut log = MetricsLog::new(file, !resume)?;
            let until = steps.unwrap_or(config.train.total_steps);
            let save = |s: &TrainState| -> aidd_core::Result<()> {
                s.save(&state_path)?;
                s.net.save(&checkpoint_path)
            };
            let last = train_until(
                &mut state,
                &batches,
                &config.schedule,
                &config.train,
                until,
                Some(&mut log),
                save,
            )?;
            state.save(&state_path)?;
            state.net.save(&checkpoint_path)?;
            if let Some(r) = last {
                log::info!("finished at step {} with loss EMA {:.4}", r.step, r.loss_ema);
            }
        }
        Command::Corrupt {
            wav,
            gap_ms,
            n_gaps,
            out,
            gaps_out,
        } => {
            let w = read_wav(&wav)?;
            let (corrupted, spec) = make_corrupted(&w, gap_ms, n_gaps)?;
            write_wav(&out, &corrupted)?;
            let gaps_path = gaps_out.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".gaps.json");
                PathBuf::from(s)
            });
            spec.save(&gaps_path)?;
            config.write_resolved(resolved_config_path(&out))?;
        }
        Command::Inpaint {
            wav,
            gaps,
            codec,
            checkpoint,
            steps,
            out,
        } => {
            let w = read_wav(&wav)?;
            let spec = GapSpec::load(&gaps)?;
            let codec = CodecSpec::load(&codec)?;
            let net = ScoreNetwork::load(&checkpoint)?;
            if let Some(s) = steps {
                config.inpaint.steps = s;
            }
            let result = inpaint(&w, &spec, &codec, &net, &config.schedule, &config.inpaint)?;
            write_wav(&out, &result.waveform)?;
            config.write_resolved(resolved_config_path(&out))?;
            for g in &result.gaps {
                log::info!("gap {:?}: tokens {:?}", g.samples, g.tokens);
            }
        }
        Command::Eval {
            clean,
            restored,
            gaps,
            out,
        } => {
            let rate = read_corpus(&clean)?[0].sample_rate();
            let embedder = SpectralEmbedder::new(rate);
            let rows = evaluate_protocol(&clean, &restored, &gaps, &embedder, config.metrics)?;
            std::fs::write(&out, results_csv(&rows))?;
            config.write_resolved(resolved_config_path(&out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
