use std::process::ExitCode;

use clap::Parser;
use metacq_service::cli::{
    self, BankCommand, Cli, Command, TranscriptCommand,
};
use metacq_service::ServiceConfig;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let args = Cli::parse();
    match run(args) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Cli) -> anyhow::Result<i32> {
    let mut out = std::io::stdout().lock();
    match args.command {
        Command::Serve { config } => {
            let config = ServiceConfig::load(config)?;
            tokio::runtime::Runtime::new()?.block_on(metacq_service::serve(config))?;
            Ok(0)
        }
        Command::Bank {
            command: BankCommand::Validate { path },
        } => cli::bank_validate(&path, &mut out),
        Command::Analyze {
            input,
            task,
            format,
        } => cli::analyze(&input, task, format, &mut out),
        Command::Transcript {
            command: TranscriptCommand::Verify { file, key_env },
        } => {
            let key = cli::key_from_env(&key_env)?;
            cli::transcript_verify(&file, &key, &mut out)
        }
    }
}
