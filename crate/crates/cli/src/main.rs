use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusionkit::dataset::SyntheticSpec;
use fusionkit::model::Head;
use fusionkit::sampling::CapPolicy;
use fusionkit_cli::*;

#[derive(Parser)]
#[command(name = "fusionkit", version, about = "Audio-visual expression recognition pipeline")]
struct Cli {
    /// Worker threads for data loading and per-sample gradients (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug)]
struct Heads(Vec<Head>);

fn parse_head(s: &str) -> Result<Heads, String> {
    if s == "all" {
        return Ok(Heads(Head::ALL.to_vec()));
    }
    s.parse::<Head>().map(|h| Heads(vec![h])).map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug)]
struct SplitSel(Option<fusionkit::dataset::Split>);

fn parse_split_sel(s: &str) -> Result<SplitSel, String> {
    parse_split(s).map(SplitSel)
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        videos: usize,
        #[arg(long, default_value_t = 256)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        val_videos: usize,
    },
    /// Per-class frame counts and ratios.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for stats.json and stats.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate valid windows to CSV.
    Windows {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-mel spectrogram of a WAV file.
    Spectrogram {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the grid as text, one mel band per line.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Train a model and keep the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Per-class cap per epoch: a count or "third-largest".
        #[arg(long, default_value = "third-largest")]
        cap: CapPolicy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Macro-F1 report for one head or all four.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// image, audio, fusion, ensemble or all.
        #[arg(long, default_value = "all", value_parser = parse_head)]
        head: Heads,
        /// train, val or all.
        #[arg(long, default_value = "all", value_parser = parse_split_sel)]
        split: SplitSel,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame predictions as CSV.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ensemble", value_parser = parse_head)]
        head: Heads,
        #[arg(long, default_value = "all", value_parser = parse_split_sel)]
        split: SplitSel,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli, w: &mut dyn Write) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Generate {
            out,
            seed,
            videos,
            frames,
            val_videos,
        } => {
            let spec = SyntheticSpec {
                n_videos: videos,
                frames_per_video: frames,
                val_videos,
                ..SyntheticSpec::default()
            };
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            cmd_generate(&spec, seed, &out, w)?;
        }
        Command::Stats { manifest, out } => {
            cmd_stats(&manifest, out.as_deref(), w)?;
        }
        Command::Windows { manifest, out } => {
            cmd_windows(&manifest, &out, w)?;
        }
        Command::Spectrogram { wav, out, text } => {
            cmd_spectrogram(&wav, &out, text.as_deref(), w)?;
        }
        Command::Train {
            manifest,
            config,
            seed,
            epochs,
            batch_size,
            cap,
            out,
        } => {
            let run = RunConfig {
                manifest,
                config,
                seed,
                epochs,
                batch_size,
                cap,
                out,
            };
            cmd_train(&run, w)?;
        }
        Command::Eval {
            manifest,
            checkpoint,
            config,
            head,
            split,
            out,
        } => {
            let args = EvalArgs {
                checkpoint: &checkpoint,
                config: config.as_deref(),
                manifest: &manifest,
                heads: &head.0,
                split: split.0,
            };
            cmd_eval(&args, out.as_deref(), w)?;
        }
        Command::Predict {
            manifest,
            checkpoint,
            config,
            head,
            split,
            out,
        } => {
            let args = EvalArgs {
                checkpoint: &checkpoint,
                config: config.as_deref(),
                manifest: &manifest,
                heads: &head.0,
                split: split.0,
            };
            cmd_predict(&args, out.as_deref(), w)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    match run(cli, &mut w) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = w.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
