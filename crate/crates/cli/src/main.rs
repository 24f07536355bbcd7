//! `figqa`: runs the question-synthesis pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use figqa_core::pipeline::{Pipeline, PipelineError, RunConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "figqa", version, about = "Generate and verify multiple-choice questions about scientific figures")]
struct Args {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// prepare, extract, generate, verify, annotate, evaluate, stats, all or replay.
    #[arg(long, value_name = "NAME", default_value = "all", value_parser = parse_stage)]
    stage: Stage,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Caption similarity threshold in (0, 1].
    #[arg(long, value_name = "R")]
    threshold: Option<f64>,
    /// Worker threads.
    #[arg(long, value_name = "N")]
    concurrency: Option<usize>,
    /// Answer model calls from a mock script instead of the network.
    #[arg(long, value_name = "SCRIPT_PATH")]
    mock: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Fail every model call after this many (mock only); simulates a crash.
    #[arg(long, value_name = "N", hide = true, requires = "mock")]
    mock_crash_after: Option<usize>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn build(args: &Args) -> Result<Pipeline, PipelineError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    if let Some(c) = args.concurrency {
        config.concurrency = c;
    }
    if let Some(dir) = &args.output {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    match &args.mock {
        Some(script) => {
            let pipeline = Pipeline::with_mock_script(config, script)?;
            if let Some(mock) = pipeline.mock() {
                mock.crash_after(args.mock_crash_after);
            }
            Ok(pipeline)
        }
        None => Pipeline::new(config, figqa_core::pipeline::BackendChoice::Http),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = build(&args).and_then(|p| p.run(args.stage));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e).context(format!("stage {} failed", args.stage.as_str()));
            log::error!("{err:#}");
            eprintln!("error: {err:#}");
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let a = Args::try_parse_from([
            "figqa", "--config", "c.toml", "--stage", "verify", "--seed", "3", "--threshold", "0.8", "--mock", "m.json",
        ])
        .unwrap();
        assert_eq!(a.stage, Stage::Verify);
        assert_eq!(a.seed, Some(3));
        assert!(Args::try_parse_from(["figqa", "--config", "c", "--stage", "bogus"]).is_err());
        assert!(Args::try_parse_from(["figqa", "--config", "c", "--mock-crash-after", "2"]).is_err());
    }
}
