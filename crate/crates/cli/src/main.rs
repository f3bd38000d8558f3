use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msnic_core::estimators::TestFn;
use msnic_core::harness::{self, Command, ExperimentSpec, RunOutcome};

#[derive(Parser)]
#[command(name = "msnic", version, about = "Multi-sample training and evaluation of hierarchical compression models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; must be new or empty unless --resume.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue the run already in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints and metric logs.
    Train(Common),
    /// Code the evaluation images and report measured rate and distortion.
    EvalRd(Common),
    /// Train and evaluate over a list of lambdas or sample sizes.
    Sweep(Common),
    /// Per-group gradient signal-to-noise ratio.
    Snr(Common),
    /// Check the ordering of the bound estimates.
    BoundsCheck {
        #[command(flatten)]
        common: Common,
        /// Use the scalar reference model and its quadrature evidence.
        #[arg(long)]
        micro: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        l: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
    },
    /// Bjontegaard deltas between two rate-distortion CSVs.
    Bd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Latent variance and coefficient-of-variation statistics.
    Stats(Common),
    /// Score-function versus pathwise gradients under uniform noise.
    DemoGradients {
        #[command(flatten)]
        common: Common,
        /// square, cube or sin.
        #[arg(long, value_parser = parse_fn)]
        f: TestFn,
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
    /// Compare rounding and dithered quantization on one model.
    UqCompare(Common),
    /// Regenerate the oracle fixtures, or check them with --check.
    Fixtures {
        #[arg(long, default_value = "crates/core/fixtures")]
        out: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

fn parse_fn(s: &str) -> Result<TestFn, String> {
    TestFn::parse(s).map_err(|e| e.to_string())
}

fn spec(command: Command, c: Common) -> ExperimentSpec {
    ExperimentSpec {
        command,
        config_path: c.config,
        output_dir: c.out,
        seed: c.seed,
        overrides: c.set,
        resume: c.resume,
    }
}

fn report(out: &RunOutcome) -> ExitCode {
    for l in &out.lines {
        println!("{l}");
    }
    for f in &out.failures {
        eprintln!("error: {f}");
    }
    if let Some(d) = &out.dump {
        eprintln!("diagnostics: {}", d.display());
    }
    ExitCode::from(out.status.code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = harness::run::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let outcome = match cli.command {
        Cmd::Train(c) => harness::run(&spec(Command::Train, c)),
        Cmd::EvalRd(c) => harness::run(&spec(Command::EvalRd, c)),
        Cmd::Sweep(c) => harness::run(&spec(Command::Sweep, c)),
        Cmd::Snr(c) => harness::run(&spec(Command::Snr, c)),
        Cmd::Stats(c) => harness::run(&spec(Command::Stats, c)),
        Cmd::UqCompare(c) => harness::run(&spec(Command::UqCompare, c)),
        Cmd::BoundsCheck { common, micro, k, l, replicates } => {
            harness::run(&spec(Command::BoundsCheck { micro, k, l, replicates }, common))
        }
        Cmd::Bd { common, anchor, test } => harness::run(&spec(Command::Bd { anchor, test }, common)),
        Cmd::DemoGradients { common, f, theta, n } => {
            harness::run(&spec(Command::DemoGradients { f, theta, n }, common))
        }
        Cmd::Fixtures { out, check } => harness::run_fixtures(&out, check),
    };
    report(&outcome)
}
