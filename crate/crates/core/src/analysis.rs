//! Likert difficulty-rating analysis and policy simulation.
//!
//! Ratings are 1 (very easy) to 5 (very hard). Per task, all ratings of a
//! policy are pooled across questions and participants and summarised by
//! mean, median, mode and mean absolute deviation about the mean. The
//! per-question spread is reported separately as the mean absolute deviation
//! of the per-question mean ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DifficultyLevel, Marks, PolicyKind, MARKS_PER_QUESTION};
use crate::policy::{next_difficulty, PerformanceRecord, PolicyParams};

/// Mean/median gap beyond which a distribution is flagged as skewed.
pub const SKEW_EPSILON: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no ratings to aggregate")]
    Empty,
    #[error("rating {0} outside 1..=5")]
    RatingOutOfRange(i64),
    #[error("task {0} not present in the dataset")]
    UnknownTask(u8),
    #[error("policy {0} missing from input")]
    MissingPolicy(PolicyKind),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub task: u8,
    pub policy: PolicyKind,
    pub question_id: String,
    pub participant_id: String,
    pub rating: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RatingDataset {
    records: Vec<RatingRecord>,
}

impl RatingDataset {
    /// Rejects out-of-range ratings and duplicate
    /// `(task, policy, question, participant)` keys.
    pub fn new(records: Vec<RatingRecord>) -> Result<Self, AnalysisError> {
        let mut seen = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if !(1..=5).contains(&r.rating) {
                return Err(AnalysisError::RatingOutOfRange(i64::from(r.rating)));
            }
            if !seen.insert((r.task, r.policy, &r.question_id, &r.participant_id)) {
                return Err(AnalysisError::Csv {
                    line: i as u64 + 1,
                    message: "duplicate (task, policy, question_id, participant_id)".into(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tasks(&self) -> BTreeSet<u8> {
        self.records.iter().map(|r| r.task).collect()
    }

    pub fn ratings(&self, task: u8, policy: PolicyKind) -> Vec<u8> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.policy == policy)
            .map(|r| r.rating)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub mean: f64,
    pub median: f64,
    pub mode: u8,
    pub mad: f64,
    pub n: usize,
}

pub fn aggregate(ratings: &[u8]) -> Result<AggregateStats, AnalysisError> {
    if ratings.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if let Some(&bad) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(AnalysisError::RatingOutOfRange(i64::from(bad)));
    }
    let n = ratings.len();
    let mean = ratings.iter().map(|&r| f64::from(r)).sum::<f64>() / n as f64;

    let mut sorted = ratings.to_vec();
    sorted.sort_unstable();
    let median = if n % 2 == 1 {
        f64::from(sorted[n / 2])
    } else {
        (f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2])) / 2.0
    };

    let mut counts = [0usize; 6];
    for &r in ratings {
        counts[usize::from(r)] += 1;
    }
    // Strict `>` keeps the smallest value on ties.
    let mut mode = 1u8;
    for value in 2..=5u8 {
        if counts[usize::from(value)] > counts[usize::from(mode)] {
            mode = value;
        }
    }

    let mad = ratings
        .iter()
        .map(|&r| (f64::from(r) - mean).abs())
        .sum::<f64>()
        / n as f64;

    Ok(AggregateStats {
        mean,
        median,
        mode,
        mad,
        n,
    })
}

fn mean_abs_deviation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).abs()).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Skew {
    RightSkew,
    LeftSkew,
    Symmetric,
}

pub fn skew_flag(mean: f64, median: f64) -> Skew {
    if mean > median + SKEW_EPSILON {
        Skew::RightSkew
    } else if mean < median - SKEW_EPSILON {
        Skew::LeftSkew
    } else {
        Skew::Symmetric
    }
}

impl AggregateStats {
    pub fn skew(&self) -> Skew {
        skew_flag(self.mean, self.median)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub policy: PolicyKind,
    pub stats: AggregateStats,
    /// Mean absolute deviation of per-question mean ratings.
    pub question_mean_mad: f64,
    pub skew: Skew,
}

/// One row per policy present in the task, in table order
/// (one-after-one, static, all-in-all).
pub fn policy_task_table(dataset: &RatingDataset, task: u8) -> Result<Vec<PolicyRow>, AnalysisError> {
    if !dataset.tasks().contains(&task) {
        return Err(AnalysisError::UnknownTask(task));
    }
    let mut rows = Vec::new();
    for policy in PolicyKind::TABLE_ORDER {
        let ratings = dataset.ratings(task, policy);
        if ratings.is_empty() {
            continue;
        }
        let stats = aggregate(&ratings)?;
        let mut per_question: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
        for r in dataset
            .records()
            .iter()
            .filter(|r| r.task == task && r.policy == policy)
        {
            let entry = per_question.entry(&r.question_id).or_default();
            entry.0 += u32::from(r.rating);
            entry.1 += 1;
        }
        let question_means: Vec<f64> = per_question
            .values()
            .map(|(sum, n)| f64::from(*sum) / f64::from(*n))
            .collect();
        rows.push(PolicyRow {
            policy,
            skew: stats.skew(),
            stats,
            question_mean_mad: mean_abs_deviation(&question_means),
        });
    }
    Ok(rows)
}

/// Rounds to one decimal place, halves away from zero. Values within 1e-9
/// of a half are treated as exact halves so that 1.85 rounds to 1.9.
pub fn round_1dp(x: f64) -> f64 {
    let scaled = x * 10.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() < 1e-9 {
        if x >= 0.0 {
            floor + 1.0
        } else {
            floor
        }
    } else {
        scaled.round()
    };
    rounded / 10.0
}

/// Per policy, `(m1 + m2) / 2` rounded to one decimal.
pub fn cross_task_means(
    task1: &[(PolicyKind, f64)],
    task2: &[(PolicyKind, f64)],
) -> Result<Vec<(PolicyKind, f64)>, AnalysisError> {
    let lookup = |table: &[(PolicyKind, f64)], policy| {
        table
            .iter()
            .find(|(p, _)| *p == policy)
            .map(|(_, m)| *m)
            .ok_or(AnalysisError::MissingPolicy(policy))
    };
    PolicyKind::TABLE_ORDER
        .into_iter()
        .map(|policy| {
            let m1 = lookup(task1, policy)?;
            let m2 = lookup(task2, policy)?;
            Ok((policy, round_1dp((m1 + m2) / 2.0)))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    task: String,
    policy: String,
    question_id: String,
    participant_id: String,
    rating: String,
}

/// Reads `task,policy,question_id,participant_id,rating` rows.
pub fn ingest_reader<R: io::Read>(reader: R) -> Result<RatingDataset, AnalysisError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| AnalysisError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["task", "policy", "question_id", "participant_id", "rating"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(AnalysisError::Csv {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for result in csv.records() {
        let raw = result.map_err(|e| AnalysisError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = raw.position().map_or(0, |p| p.line());
        let fail = |message: String| AnalysisError::Csv { line, message };
        let row: CsvRow = raw.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        let task: u8 = match row.task.parse() {
            Ok(t @ (1 | 2)) => t,
            _ => return Err(fail(format!("task `{}` is not 1 or 2", row.task))),
        };
        let policy: PolicyKind = row.policy.parse().map_err(|_| {
            fail(format!(
                "policy `{}` is not one-after-one, static or all-in-all",
                row.policy
            ))
        })?;
        let rating: i64 = row
            .rating
            .parse()
            .map_err(|_| fail(format!("rating `{}` is not an integer", row.rating)))?;
        if !(1..=5).contains(&rating) {
            return Err(fail(format!("rating {rating} outside 1..=5")));
        }
        if row.question_id.is_empty() || row.participant_id.is_empty() {
            return Err(fail("empty question_id or participant_id".into()));
        }
        if !seen.insert((task, policy, row.question_id.clone(), row.participant_id.clone())) {
            return Err(fail(format!(
                "duplicate rating for task {task}, {policy}, {}, {}",
                row.question_id, row.participant_id
            )));
        }
        records.push(RatingRecord {
            task,
            policy,
            question_id: row.question_id,
            participant_id: row.participant_id,
            rating: rating as u8,
        });
    }
    Ok(RatingDataset { records })
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<RatingDataset, AnalysisError> {
    ingest_reader(std::fs::File::open(path)?)
}

/// Difficulty trace for a learner who scores full marks exactly when the
/// presented difficulty does not exceed `ability` (1e-9 tolerance).
pub fn simulate_threshold_learner(
    ability: f64,
    policy: PolicyKind,
    params: &PolicyParams,
    n_questions: usize,
) -> Vec<DifficultyLevel> {
    simulate_from(DifficultyLevel::DEFAULT, ability, policy, params, n_questions)
}

/// As [`simulate_threshold_learner`], but the first question is presented at
/// `start` instead of the default.
pub fn simulate_from(
    start: DifficultyLevel,
    ability: f64,
    policy: PolicyKind,
    params: &PolicyParams,
    n_questions: usize,
) -> Vec<DifficultyLevel> {
    let mut trace = Vec::with_capacity(n_questions);
    let mut history: Vec<PerformanceRecord> = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let presented = if i == 0 {
            start
        } else {
            next_difficulty(policy, &history, params)
        };
        let marks = if presented.value() <= ability + 1e-9 {
            MARKS_PER_QUESTION
        } else {
            Marks::ZERO
        };
        history.push(PerformanceRecord::new(i as u32, presented, marks, 0));
        trace.push(presented);
    }
    trace
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskTable {
    pub task: u8,
    pub rows: Vec<PolicyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTaskRow {
    pub policy: PolicyKind,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub tasks: Vec<TaskTable>,
    /// Present when both tasks 1 and 2 cover all three policies.
    pub cross_task: Option<Vec<CrossTaskRow>>,
}

/// Builds the per-task tables, and the cross-task means from the one-decimal
/// task means when both tasks are available.
pub fn build_report(dataset: &RatingDataset, task: Option<u8>) -> Result<AnalysisReport, AnalysisError> {
    let tasks: Vec<u8> = match task {
        Some(t) => vec![t],
        None => dataset.tasks().into_iter().collect(),
    };
    let tables = tasks
        .iter()
        .map(|&t| {
            Ok(TaskTable {
                task: t,
                rows: policy_task_table(dataset, t)?,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;

    let means = |t: u8| -> Option<Vec<(PolicyKind, f64)>> {
        tables
            .iter()
            .find(|tt| tt.task == t)
            .map(|tt| tt.rows.iter().map(|r| (r.policy, round_1dp(r.stats.mean))).collect())
    };
    let cross_task = match (means(1), means(2)) {
        (Some(a), Some(b)) => cross_task_means(&a, &b).ok().map(|rows| {
            rows.into_iter()
                .map(|(policy, mean)| CrossTaskRow { policy, mean })
                .collect()
        }),
        _ => None,
    };
    Ok(AnalysisReport {
        tasks: tables,
        cross_task,
    })
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for table in &self.tasks {
            let _ = writeln!(out, "Task {}", table.task);
            let _ = writeln!(
                out,
                "{:<15} {:>5} {:>6} {:>4} {:>6} {:>6} {:>4}  skew",
                "policy", "mean", "median", "mode", "mad", "q-mad", "n"
            );
            for row in &table.rows {
                let _ = writeln!(
                    out,
                    "{:<15} {:>5.1} {:>6} {:>4} {:>6.2} {:>6.2} {:>4}  {:?}",
                    row.policy.as_str(),
                    round_1dp(row.stats.mean),
                    row.stats.median,
                    row.stats.mode,
                    row.stats.mad,
                    row.question_mean_mad,
                    row.stats.n,
                    row.skew
                );
            }
            out.push('\n');
        }
        if let Some(rows) = &self.cross_task {
            let _ = writeln!(out, "Mean across tasks");
            for row in rows {
                let _ = writeln!(out, "{:<15} {:>5.1}", row.policy.as_str(), row.mean);
            }
        }
        out
    }
}
