//! `emotcav`: stage-by-stage driver for the TCAV pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O or file format,
//! 3 refused overwrite, 4 missing upstream artifact, 5 numerical failure
//! (divergence, non-finite values, failed validation).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emotcav::config::RunConfig;
use emotcav::pipeline::Pipeline;
use emotcav::validate::{self, ValidateOptions};
use emotcav::Error;

#[derive(Debug, Parser)]
#[command(
    name = "emotcav",
    version,
    about = "Concept activation vector testing for contextual LSTM emotion models"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for CAV training and scoring.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Replace an existing checkpoint.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize or import features and split them into train and test archives.
    Generate,
    /// Train unimodal branches, then the fusion branch.
    Train,
    /// Label concept example sets on the training split.
    BuildConcepts,
    /// Train proposed and random CAV ensembles.
    TrainCavs,
    /// Concepts, CAVs, scores, significance and report from a trained checkpoint.
    Tcav,
    /// Rerun the significance tests on existing scores.
    Significance,
    /// Rewrite report.json, report.csv and the SVG charts.
    Report,
    /// Every stage from generate to report.
    Run,
    /// Print the effective configuration as TOML.
    PrintConfig,
    /// Run the built-in oracle suite.
    Validate {
        /// Skip the two full pipeline runs.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Integrity(_) | Error::Json(_) => 2,
        Error::Overwrite(_) => 3,
        Error::MissingArtifact { .. } => 4,
        Error::Divergence { .. } | Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut config = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(jobs) = g.jobs {
        config.jobs = jobs;
    }
    if let Some(out) = &g.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<bool, Error> {
    let config = load_config(&cli.global)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(true);
    }
    if let Command::Validate {
        quick,
        inject_gradient_fault,
    } = cli.command
    {
        config.validate()?;
        let opts = ValidateOptions {
            seed: config.seed,
            inject_gradient_fault,
            ..ValidateOptions::default()
        };
        let results = if quick {
            validate::quick_checks(&opts)
        } else {
            validate::run_all(&opts, &config, &config.out_dir.join("validate"))
        };
        for r in &results {
            println!("{}", r.line());
        }
        return Ok(results.iter().all(|r| r.passed));
    }
    let p = Pipeline::new(config, cli.global.force)?;
    let out = p.out.display().to_string();
    match cli.command {
        Command::Generate => {
            let (train, test) = p.generate()?;
            println!(
                "wrote {} training and {} test videos to {out}",
                train.n_videos, test.n_videos
            );
        }
        Command::Train => {
            let s = p.train()?;
            println!(
                "trained {} epochs per branch; accuracy train {:.4}, test {:.4}",
                p.config.train.epochs, s.train_accuracy, s.test_accuracy
            );
        }
        Command::BuildConcepts => {
            for c in p.build_concepts()? {
                println!(
                    "{}: {} positive, {} negative",
                    c.name,
                    c.positive_ids.len(),
                    c.negative_ids.len()
                );
            }
        }
        Command::TrainCavs => {
            let (proposed, random) = p.train_cavs()?;
            for e in &proposed {
                println!(
                    "{} at {}: {} CAVs, accuracy {:.3} ± {:.3}",
                    e.concept,
                    e.bottleneck,
                    e.repetitions(),
                    e.accuracy_mean(),
                    e.accuracy_std()
                );
            }
            println!("{} random ensembles", random.len());
        }
        Command::Tcav | Command::Report | Command::Run => {
            let report = match cli.command {
                Command::Tcav => p.tcav()?,
                Command::Run => p.run_all()?,
                _ => p.report()?,
            };
            let significant = report.entries.iter().filter(|e| e.significant).count();
            println!(
                "report {} with {} entries ({significant} significant) in {out}",
                report.run_id,
                report.entries.len()
            );
        }
        Command::Significance => {
            let v = p.significance()?;
            let significant = v.verdicts.iter().filter(|v| v.significant).count();
            println!("{} verdicts, {significant} significant", v.verdicts.len());
        }
        Command::PrintConfig | Command::Validate { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(5),
        Err(e) => {
            eprintln!("emotcav: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
