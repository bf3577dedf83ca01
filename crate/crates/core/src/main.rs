use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodekd::cli::{self, Command};

/// Neural ODE students distilled from residual teachers, with adversarial
/// robustness evaluation.
#[derive(Parser)]
#[command(name = "nodekd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; may be repeated
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a residual teacher
    TrainTeacher(Common),
    /// Train a Neural ODE student on hard labels only
    TrainPlain(Common),
    /// Train a Neural ODE student from a teacher checkpoint
    Distill(Common),
    /// Sweep white-box attacks over an epsilon grid
    Attack(Common),
    /// Run the paired spirals experiments and write a markdown summary
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// kd-accuracy | kd-robustness | horizon-robustness | all
        #[arg(long)]
        claim: Option<String>,
        /// Number of seeds, counting up from `seed`; verdicts need at least 5
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (command, common, mut extra) = match args.command {
        Cmd::TrainTeacher(c) => (Command::TrainTeacher, c, vec![]),
        Cmd::TrainPlain(c) => (Command::TrainPlain, c, vec![]),
        Cmd::Distill(c) => (Command::Distill, c, vec![]),
        Cmd::Attack(c) => (Command::Attack, c, vec![]),
        Cmd::Reproduce { common, claim, seeds } => {
            let mut e = Vec::new();
            if let Some(c) = claim {
                e.push(format!("reproduce.claim={c}"));
            }
            if let Some(s) = seeds {
                e.push(format!("reproduce.seeds={s}"));
            }
            (Command::Reproduce, common, e)
        }
    };
    let mut overrides = common.set;
    overrides.append(&mut extra);
    let code = cli::run(command, common.config.as_deref(), &overrides);
    ExitCode::from(code as u8)
}
