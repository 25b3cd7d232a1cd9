use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use metacq_core::analysis::{build_report, ingest_csv};
use metacq_core::transcript::{parse_and_verify, DigestKey};
use metacq_core::QuestionBank;

#[derive(Debug, Parser)]
#[command(name = "metacq", version, about = "Adaptive MCQ tutoring engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Question bank tools.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Summarise a ratings CSV.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        task: Option<u8>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Transcript tools.
    Transcript {
        #[command(subcommand)]
        command: TranscriptCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Validate every question; exits nonzero if any is invalid.
    Validate { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum TranscriptCommand {
    /// Check the digest and replay a transcript file offline.
    Verify {
        file: PathBuf,
        /// Environment variable holding the digest key.
        #[arg(long, default_value = "METACQ_DIGEST_KEY")]
        key_env: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

/// Validates a bank file and prints one line per question. Returns the
/// process exit code.
pub fn bank_validate(path: &std::path::Path, out: &mut dyn Write) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let reports = match QuestionBank::validate_document(&text) {
        Ok(reports) => reports,
        Err(e) => {
            writeln!(out, "error: {e}")?;
            return Ok(1);
        }
    };
    let mut invalid = 0;
    for (id, report) in &reports {
        if report.valid {
            writeln!(out, "{id}: valid")?;
        } else {
            invalid += 1;
            writeln!(out, "{id}: {report}")?;
        }
    }
    // Structural problems such as duplicate ids only show up when loading.
    if invalid == 0 {
        if let Err(e) = QuestionBank::from_json(&text) {
            writeln!(out, "error: {e}")?;
            return Ok(1);
        }
    }
    writeln!(out, "{} question(s), {invalid} invalid", reports.len())?;
    Ok(if invalid == 0 { 0 } else { 1 })
}

pub fn analyze(
    input: &std::path::Path,
    task: Option<u8>,
    format: Format,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let dataset = ingest_csv(input)?;
    let report = build_report(&dataset, task)?;
    match format {
        Format::Text => write!(out, "{}", report.to_text())?,
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
    }
    Ok(0)
}

pub fn transcript_verify(
    file: &std::path::Path,
    key: &DigestKey,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    match parse_and_verify(&bytes, key) {
        Ok(summary) => {
            writeln!(
                out,
                "ok: session {} learner {} chapter {} total {} mastery {}",
                summary.session_id,
                summary.learner_id,
                summary.chapter_id,
                summary.total_marks,
                summary.mastery
            )?;
            Ok(0)
        }
        Err(e) => {
            writeln!(out, "{}: {e}", e.code())?;
            Ok(1)
        }
    }
}

pub fn key_from_env(var: &str) -> anyhow::Result<DigestKey> {
    DigestKey::from_env(var).with_context(|| format!("environment variable {var} is not set"))
}
