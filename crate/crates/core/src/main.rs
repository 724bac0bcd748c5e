use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use halludetect::backends::BackendMode;
use halludetect::evaluation::LossKind;
use halludetect::exec::Execution;
use halludetect::pipeline::{cmd_calibrate, cmd_evaluate, cmd_score, PipelineError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "halludetect", version, about = "Score, calibrate and aggregate hallucination detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory for the cache, calibrators and report.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<BackendMode>,
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Comma-separated budgets in LLM calls per example.
    #[arg(long, global = true, value_delimiter = ',')]
    budgets: Option<Vec<u32>>,
    /// Write pass-through calibrators instead of fitting.
    #[arg(long, global = true)]
    no_calibration: bool,
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Score the dataset and write the score cache.
    Score,
    /// Fit per-scorer calibrators on the calibration fold.
    Calibrate,
    /// Fit the multi-score, sweep budgets and write the report.
    Evaluate,
    /// score, calibrate and evaluate in sequence.
    Run,
}

fn parse_mode(s: &str) -> Result<BackendMode, String> {
    s.parse()
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse()
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let path = cli.config.clone().unwrap_or_else(|| PathBuf::from("halludetect.toml"));
    let mut cfg = RunConfig::load(&path)?;
    if let Some(d) = &cli.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.backend.mode = m;
    }
    if let Some(f) = &cli.fixtures {
        cfg.backend.fixtures = Some(f.clone());
    }
    if let Some(b) = &cli.budgets {
        cfg.budget.budgets = b.clone();
    }
    if let Some(l) = cli.loss {
        cfg.budget.loss = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let all = cli.command == Command::Run;
    if all || cli.command == Command::Score {
        let s = cmd_score(&cfg, exec)?;
        for w in &s.warnings {
            eprintln!("warning: {w}");
        }
        for (kind, ok, failed) in &s.coverage {
            println!("{kind}: {ok}/{} scored, {failed} failed", s.examples);
        }
        println!("total LLM calls: {}", s.total_llm_calls);
        println!("wrote {}", s.cache.display());
    }
    if all || cli.command == Command::Calibrate {
        let c = cmd_calibrate(&cfg, cli.no_calibration)?;
        for (kind, n, patches) in &c.fitted {
            println!("{kind}: calibrated on {n} examples, {patches} patches");
        }
        if let Some(g) = c.groups {
            println!("groups: {g}");
        }
        println!("wrote {}", c.dir.display());
    }
    if all || cli.command == Command::Evaluate {
        let r = cmd_evaluate(&cfg, exec)?;
        print!("{}", r.metrics_csv());
        println!("wrote {}", cfg.out.join(halludetect::pipeline::REPORT_DIR).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
