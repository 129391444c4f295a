use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sfwm::harness::cli::{self, Profile, RunConfig, Stage, Task};

#[derive(Parser)]
#[command(name = "sfwm", about = "Audio world model, water and piano lookahead tasks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    task: Option<Task>,
    /// Euler steps for every sampler.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write oracle episodes (water) or étude rolls (piano).
    Synth,
    /// Log-mel spectrograms and normalization (water); MIDI to roll (piano).
    Preprocess {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Train the policy without the predicted-future block.
        #[arg(long)]
        baseline: bool,
    },
    /// Predict from the last context window of a WAV, roll CSV or MIDI file.
    Generate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        windows: usize,
    },
    Eval {
        #[arg(value_enum)]
        task: Task,
    },
    Gradcheck {
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Render a .spec file or CSV grid as PGM.
    Plot {
        input: PathBuf,
        output: PathBuf,
    },
}

fn resolve(g: &Global) -> sfwm::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p, g.profile)?,
        None => RunConfig::for_profile(g.profile),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(t) = g.task {
        cfg.task = t;
    }
    if let Some(n) = g.steps {
        cfg.water.sampler.n_steps = n;
        cfg.piano.sampler.n_steps = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> sfwm::Result<()> {
    let cfg = resolve(&cli.global)?;
    match cli.cmd {
        Cmd::Synth => {
            let e = cli::cmd_synth(&cfg)?;
            println!("synth: {} files in {}", e.outputs.len(), cfg.out.display());
        }
        Cmd::Preprocess { input } => {
            let e = cli::cmd_preprocess(&cfg, input.as_deref())?;
            println!("preprocess: {}", e.metrics);
        }
        Cmd::Train { stage, baseline } => {
            let e = cli::cmd_train(&cfg, stage, baseline)?;
            println!("train {}: {} ({:.1}s)", stage.name(), e.metrics, e.duration_s);
        }
        Cmd::Generate { input, windows } => {
            let e = cli::cmd_generate(&cfg, input.as_deref(), windows)?;
            println!("generate: {}", e.metrics);
        }
        Cmd::Eval { task } => {
            let (_, arms) = cli::cmd_eval(&cfg, task)?;
            for a in arms {
                match a.successes {
                    Some(s) => println!("{}: {s}/{}", a.arm, a.n),
                    None => println!("{}: F1 {:.3} ± {:.3} over {}", a.arm, a.mean, a.sd, a.n),
                }
            }
        }
        Cmd::Gradcheck { fault } => {
            let fault = fault.as_deref().map(cli::parse_primitive).transpose()?;
            let report = cli::cmd_gradcheck(&cfg, fault)?;
            for e in &report.entries {
                println!("{:<16} {:.3e}", e.name, e.max_rel_error);
            }
            println!("gradcheck passed");
        }
        Cmd::Plot { input, output } => cli::cmd_plot(&input, &output)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.cmd {
        Cmd::Synth => "synth",
        Cmd::Preprocess { .. } => "preprocess",
        Cmd::Train { .. } => "train",
        Cmd::Generate { .. } => "generate",
        Cmd::Eval { .. } => "eval",
        Cmd::Gradcheck { .. } => "gradcheck",
        Cmd::Plot { .. } => "plot",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sfwm {name}: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
