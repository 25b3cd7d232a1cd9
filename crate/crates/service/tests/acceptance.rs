//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time budget.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{fixtures, run_session, test_config, Client, Server};
use metacq_core::analysis::{cross_task_means, simulate_from, skew_flag};
use metacq_core::domain::{mastery_from_score, Mcq};
use metacq_core::olm::{replay_log, MemorySink, OlmError, OlmStore};
use metacq_core::policy::all_in_all;
use metacq_core::provider::QuestionSource;
use metacq_core::transcript::{self, DigestKey, TranscriptBody, TranscriptError, TranscriptSummary};
use metacq_core::{
    next_difficulty, validate_mcq, Chapter, DifficultyLevel, Marks, MasteryLevel,
    PerformanceRecord, PolicyKind, PolicyParams, QuestionBank, SessionState, ViolationCode,
};
use metacq_service::cli::{self, Format};
use metacq_service::config::default_chapters;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "cross-task-identity", budget: Duration::from_millis(1), run: cross_task_identity },
        Criterion { name: "ratings-analysis", budget: Duration::from_secs(1), run: ratings_analysis },
        Criterion { name: "scoring-oracle", budget: Duration::from_secs(5), run: scoring_oracle },
        Criterion { name: "policy-suite", budget: Duration::from_secs(10), run: policy_suite },
        Criterion { name: "transcript-integrity", budget: Duration::from_secs(30), run: transcript_integrity },
        Criterion { name: "olm-event-sourcing", budget: Duration::from_secs(30), run: olm_event_sourcing },
        Criterion { name: "mcq-validation", budget: Duration::from_secs(1), run: mcq_validation },
        Criterion { name: "api-contract", budget: Duration::from_secs(10), run: api_contract },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|p| Err(panic_message(p)));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(detail) if elapsed <= c.budget => (true, detail),
            Ok(detail) => (false, format!("over budget {:?}; {detail}", c.budget)),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<22} {:>10.3} ms  {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64() * 1e3,
            detail
        );
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

const REPORTED_TASK1: [(PolicyKind, f64); 3] = [
    (PolicyKind::OneAfterOne, 1.9),
    (PolicyKind::Static, 2.0),
    (PolicyKind::AllInAll, 2.1),
];
const REPORTED_TASK2: [(PolicyKind, f64); 3] = [
    (PolicyKind::OneAfterOne, 1.5),
    (PolicyKind::Static, 1.8),
    (PolicyKind::AllInAll, 1.9),
];

fn cross_task_identity() -> Outcome {
    let got = cross_task_means(&REPORTED_TASK1, &REPORTED_TASK2).map_err(|e| e.to_string())?;
    let want = vec![
        (PolicyKind::OneAfterOne, 1.7),
        (PolicyKind::Static, 1.9),
        (PolicyKind::AllInAll, 2.0),
    ];
    ensure!(got == want, "got {got:?}");
    Ok("(1.7, 1.9, 2.0)".into())
}

// ---- ratings study ----

struct CellOracle {
    mean: f64,
    median: f64,
    mode: u8,
    pooled_mad: f64,
    question_mean_mad: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn oracle_cell(rows: &[(String, u8)]) -> CellOracle {
    let xs: Vec<f64> = rows.iter().map(|(_, r)| f64::from(*r)).collect();
    let m = mean(&xs);
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut mode = 1;
    for v in 1..=5u8 {
        let count = |x: u8| rows.iter().filter(|(_, r)| *r == x).count();
        if count(v) > count(mode) {
            mode = v;
        }
    }
    let pooled_mad = mean(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>());
    let mut by_q: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (q, r) in rows {
        by_q.entry(q).or_default().push(f64::from(*r));
    }
    let qmeans: Vec<f64> = by_q.values().map(|v| mean(v)).collect();
    let qm = mean(&qmeans);
    let question_mean_mad = mean(&qmeans.iter().map(|x| (x - qm).abs()).collect::<Vec<_>>());
    CellOracle { mean: m, median, mode, pooled_mad, question_mean_mad }
}

fn ratings_analysis() -> Outcome {
    let csv = fixtures().join("ratings.csv");
    let mut out = Vec::new();
    let code = cli::analyze(&csv, None, Format::Json, &mut out).map_err(|e| e.to_string())?;
    ensure!(code == 0, "analyze exited {code}");
    let report: Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;

    // Independent reading of the fixture.
    let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let mut cells: BTreeMap<(u8, String), Vec<(String, u8)>> = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        cells
            .entry((f[0].parse().unwrap(), f[1].to_string()))
            .or_default()
            .push((f[2].to_string(), f[4].parse().unwrap()));
    }

    let mut medians_at_one = 0;
    let mut worst_mean_gap: f64 = 0.0;
    let mut worst_qmad: f64 = 0.0;
    let mut worst_pooled: f64 = 0.0;
    let tasks = report["tasks"].as_array().ok_or("no tasks in report")?;
    ensure!(tasks.len() == 2, "expected 2 tasks, got {}", tasks.len());
    for (task, reported) in [(1u8, REPORTED_TASK1), (2, REPORTED_TASK2)] {
        let table = tasks
            .iter()
            .find(|t| t["task"] == task)
            .ok_or(format!("task {task} missing"))?;
        let rows = table["rows"].as_array().ok_or("no rows")?;
        ensure!(rows.len() == 3, "task {task}: {} rows", rows.len());
        for (row, (policy, reported_mean)) in rows.iter().zip(reported) {
            ensure!(row["policy"] == policy.as_str(), "task {task}: row order {}", row["policy"]);
            let o = oracle_cell(&cells[&(task, policy.as_str().to_string())]);
            let stats = &row["stats"];
            let got_mean = stats["mean"].as_f64().unwrap();
            let got_median = stats["median"].as_f64().unwrap();
            let got_qmad = row["question_mean_mad"].as_f64().unwrap();
            let got_mad = stats["mad"].as_f64().unwrap();
            ensure!((got_mean - o.mean).abs() < 1e-9, "task {task} {policy}: mean {got_mean} vs oracle {}", o.mean);
            ensure!((got_median - o.median).abs() < 1e-9, "task {task} {policy}: median");
            ensure!((got_mad - o.pooled_mad).abs() < 1e-9, "task {task} {policy}: mad");
            ensure!((got_qmad - o.question_mean_mad).abs() < 1e-9, "task {task} {policy}: question mad");
            ensure!(stats["mode"] == o.mode, "task {task} {policy}: mode");

            ensure!(
                (got_mean - reported_mean).abs() <= 0.15 + 1e-9,
                "task {task} {policy}: mean {got_mean:.3} vs {reported_mean}"
            );
            ensure!(o.mode == 1, "task {task} {policy}: mode {}", o.mode);
            ensure!(got_qmad <= 0.4 + 0.1 + 1e-9, "task {task} {policy}: MAD {got_qmad:.3}");

            let want_skew = if o.mean - o.median > 0.05 {
                "RightSkew"
            } else if o.median - o.mean > 0.05 {
                "LeftSkew"
            } else {
                "Symmetric"
            };
            ensure!(row["skew"] == want_skew, "task {task} {policy}: skew {} want {want_skew}", row["skew"]);
            ensure!(
                serde_json::to_value(skew_flag(o.mean, o.median)).unwrap() == want_skew,
                "skew_flag disagrees"
            );
            if o.median == 1.0 {
                medians_at_one += 1;
            }
            worst_mean_gap = worst_mean_gap.max((got_mean - reported_mean).abs());
            worst_qmad = worst_qmad.max(got_qmad);
            worst_pooled = worst_pooled.max(got_mad);
        }
    }
    Ok(format!(
        "max |mean-reported| {worst_mean_gap:.3}, max per-question MAD {worst_qmad:.3}, \
         max pooled MAD {worst_pooled:.3}, medians at 1: {medians_at_one}/6"
    ))
}

// ---- scoring ----

struct Fixed(Vec<Mcq>);

impl QuestionSource for Fixed {
    fn provide(
        &self,
        _chapter: &str,
        _target: DifficultyLevel,
        exclude: &BTreeSet<String>,
    ) -> Result<Mcq, metacq_core::provider::ProviderError> {
        self.0
            .iter()
            .find(|m| !exclude.contains(&m.id))
            .cloned()
            .ok_or_else(|| metacq_core::provider::ProviderError::NoCandidates("none".into()))
    }
}

fn fixed_source() -> Fixed {
    Fixed(
        (0..5)
            .map(|i| Mcq {
                id: format!("q{i}"),
                chapter_id: "ch2".into(),
                stem: format!("Question {i}?"),
                options: vec!["Alpha".into(), "Beta".into(), "Gamma".into()],
                correct_index: i % 3,
                hints: vec!["one".into(), "two".into(), "three".into()],
                difficulty: 0.5,
                explanation: None,
            })
            .collect(),
    )
}

fn oracle_level(total: f64) -> MasteryLevel {
    if total >= 9.0 {
        MasteryLevel::Mastered
    } else if total >= 7.0 {
        MasteryLevel::Proficient
    } else if total >= 5.0 {
        MasteryLevel::Qualified
    } else {
        MasteryLevel::NotQualified
    }
}

fn scoring_oracle() -> Outcome {
    let source = fixed_source();
    let chapter = default_chapters().remove(1);
    let mut totals = vec![0.0f64; 1 << 15];
    for combo in 0..(1usize << 15) {
        let mut s = SessionState::start("s", "l", &chapter, PolicyParams::default(), vec![], 0);
        let mut brute = 0.0;
        for q in 0..5 {
            let code = (combo >> (3 * q)) & 7;
            let (hints, correct) = ((code & 3) as u8, code & 4 != 0);
            let right = s.next_question(&source, 0).map_err(|e| e.to_string())?.mcq.correct_index;
            for _ in 0..hints {
                s.request_hint(0).map_err(|e| e.to_string())?;
            }
            let pick = if correct { right } else { (right + 1) % 3 };
            s.submit_answer(pick, 0).map_err(|e| e.to_string())?;
            if correct {
                brute += 2.0 - 0.5 * f64::from(hints);
            }
        }
        let result = s.finalize(0).map_err(|e| e.to_string())?;
        ensure!(result.total_marks.as_f64() == brute, "combo {combo}: {} vs {brute}", result.total_marks);
        ensure!(result.mastery == oracle_level(brute), "combo {combo}: mastery {:?}", result.mastery);
        totals[combo] = brute;
    }
    // Totals never increase when a question takes one more hint.
    for combo in 0..(1usize << 15) {
        for q in 0..5 {
            let h = (combo >> (3 * q)) & 3;
            if h < 3 {
                let more = combo + (1 << (3 * q));
                ensure!(totals[more] <= totals[combo], "penalty not monotone at {combo}");
            }
        }
    }
    let mut prev = MasteryLevel::NotQualified;
    for half in 0..=20u16 {
        let level = mastery_from_score(Marks::from_half_marks(half)).map_err(|e| e.to_string())?;
        ensure!(level >= prev, "mastery drops at {half} half marks");
        ensure!(level == oracle_level(f64::from(half) / 2.0), "threshold at {half} half marks");
        prev = level;
    }
    ensure!(mastery_from_score(Marks::from_half_marks(21)).is_err(), "10.5 accepted");
    Ok("32768 sessions, 21 totals".into())
}

// ---- policies ----

fn random_params(rng: &mut ChaCha8Rng) -> PolicyParams {
    PolicyParams::new(rng.random_range(0.1..=0.3), rng.random_range(0.1..=0.5)).unwrap()
}

fn random_history(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<PerformanceRecord> {
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|i| {
            let d = DifficultyLevel::new(rng.random_range(0.0..=1.0)).unwrap();
            let hints = rng.random_range(0..=3u8);
            let marks = if rng.random_bool(0.5) {
                Marks::from_half_marks(4 - u16::from(hints))
            } else {
                Marks::ZERO
            };
            PerformanceRecord::new(i as u32 % 5, d, marks, hints)
        })
        .collect()
}

fn policy_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    for _ in 0..1000 {
        let h = random_history(&mut rng, 40);
        let p = random_params(&mut rng);
        ensure!(next_difficulty(PolicyKind::Static, &h, &p).value() == 0.5, "static moved");
    }

    for _ in 0..10_000 {
        let h = random_history(&mut rng, 60);
        let p = random_params(&mut rng);
        for kind in [PolicyKind::OneAfterOne, PolicyKind::AllInAll, PolicyKind::Static] {
            let d = next_difficulty(kind, &h, &p).value();
            ensure!(d.is_finite() && (0.0..=1.0).contains(&d), "{kind} gave {d}");
        }
    }
    for p in [PolicyParams::new(0.3, 0.5).unwrap(), PolicyParams::new(0.1, 0.1).unwrap()] {
        for marks in [Marks::ZERO, Marks::from_half_marks(4)] {
            for d in [0.0, 1.0] {
                let h: Vec<_> = (0..20)
                    .map(|i| PerformanceRecord::new(i, DifficultyLevel::new(d).unwrap(), marks, 0))
                    .collect();
                for kind in [PolicyKind::OneAfterOne, PolicyKind::AllInAll] {
                    let v = next_difficulty(kind, &h, &p).value();
                    ensure!((0.0..=1.0).contains(&v), "{kind} extreme gave {v}");
                }
            }
        }
    }

    let tol = 1e-9;
    let mut cases = 0;
    for step in [0.1, 0.2, 0.3] {
        let params = PolicyParams::new(step, 0.3).unwrap();
        for ai in 0..=10 {
            for di in 0..=10 {
                let (a, d0) = (f64::from(ai) / 10.0, f64::from(di) / 10.0);
                let bound = ((d0 - a).abs() / step - tol).ceil() as usize + 1;
                let n = bound + 25;
                // Test-side learner: full marks iff presented <= ability.
                let mut history = Vec::new();
                let mut trace = Vec::new();
                for i in 0..n {
                    let presented = if i == 0 {
                        DifficultyLevel::new(d0).unwrap()
                    } else {
                        next_difficulty(PolicyKind::OneAfterOne, &history, &params)
                    };
                    let marks = if presented.value() <= a + tol {
                        Marks::from_half_marks(4)
                    } else {
                        Marks::ZERO
                    };
                    history.push(PerformanceRecord::new(i as u32, presented, marks, 0));
                    trace.push(presented.value());
                }
                let in_band = |x: f64| (x - a).abs() <= step + tol;
                let entry = trace.iter().position(|&x| in_band(x));
                ensure!(
                    entry.is_some_and(|k| k < bound),
                    "a={a} d0={d0} s={step}: entered at {entry:?}, bound {bound}"
                );
                ensure!(
                    trace[entry.unwrap()..].iter().all(|&x| in_band(x)),
                    "a={a} d0={d0} s={step}: left band"
                );
                let sim = simulate_from(DifficultyLevel::new(d0).unwrap(), a, PolicyKind::OneAfterOne, &params, n);
                ensure!(
                    sim.iter().map(|d| d.value()).collect::<Vec<_>>() == trace,
                    "simulate_from disagrees at a={a} d0={d0} s={step}"
                );
                cases += 1;
            }
        }
    }

    for _ in 0..1000 {
        let mut h = random_history(&mut rng, 50);
        let p = random_params(&mut rng);
        let before = all_in_all(&h, &p);
        h.shuffle(&mut rng);
        ensure!(all_in_all(&h, &p) == before, "all_in_all depends on order");
    }
    Ok(format!("{cases} convergence cases"))
}

// ---- transcripts ----

fn fuzzed_session(rng: &mut ChaCha8Rng, bank: &QuestionBank, chapters: &[Chapter], i: usize) -> SessionState {
    let chapter = &chapters[rng.random_range(0..chapters.len())];
    let params = random_params(rng);
    let history = random_history(rng, 10);
    let t0 = rng.random_range(0..1_000_000_000_000i64);
    let mut s = SessionState::start(
        format!("sess-{i}"),
        format!("learner-{}", rng.random_range(0..50)),
        chapter,
        params,
        history,
        t0,
    );
    let mut t = t0;
    for _ in 0..5 {
        t += rng.random_range(1..60_000);
        let right = s.next_question(bank, t).unwrap().mcq.correct_index;
        for _ in 0..rng.random_range(0..=3) {
            t += 1;
            s.request_hint(t).unwrap();
        }
        let pick = if rng.random_bool(0.6) { right } else { (right + rng.random_range(1..3)) % 3 };
        s.submit_answer(pick, t).unwrap();
    }
    s.finalize(t + 1).unwrap();
    s
}

fn transcript_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let bank = QuestionBank::load(fixtures().join("bank.json")).map_err(|e| e.to_string())?;
    let chapters = default_chapters();
    let key = DigestKey::new(b"acceptance-key".to_vec());
    let mut corpus = Vec::with_capacity(1000);
    for i in 0..1000 {
        let s = fuzzed_session(&mut rng, &bank, &chapters, i);
        let bytes = transcript::serialize(&s, &key).map_err(|e| e.to_string())?;
        let summary = transcript::parse_and_verify(&bytes, &key)
            .map_err(|e| format!("session {i} does not verify: {e}"))?;
        let result = s.result().unwrap();
        ensure!(summary.total_marks == result.total_marks && summary.mastery == result.mastery, "session {i}: final block");
        ensure!(summary.records == s.records(), "session {i}: records");
        ensure!(summary.session_id == s.session_id && summary.learner_id == s.learner_id, "session {i}: ids");

        let mut doc: Value = serde_json::from_slice(&bytes).unwrap();
        doc.as_object_mut().unwrap().remove("digest");
        let body: TranscriptBody = serde_json::from_value(doc).map_err(|e| e.to_string())?;
        ensure!(body.sign(&key) == bytes, "session {i}: re-encoding differs");
        ensure!(transcript::serialize(&s, &key).unwrap() == bytes, "session {i}: not deterministic");
        corpus.push(bytes);
    }

    let mut digest_mismatch = 0;
    let mut malformed = 0;
    for _ in 0..1000 {
        let original = &corpus[rng.random_range(0..corpus.len())];
        let mut bytes = original.clone();
        let pos = rng.random_range(0..bytes.len());
        let old = bytes[pos];
        let mut new = rng.random::<u8>();
        while new == old {
            new = rng.random::<u8>();
        }
        bytes[pos] = new;
        match transcript::parse_and_verify(&bytes, &key) {
            Err(TranscriptError::DigestMismatch) => digest_mismatch += 1,
            Err(TranscriptError::MalformedDocument(_)) => malformed += 1,
            other => {
                return Err(format!(
                    "byte {pos} {old:#04x}->{new:#04x} gave {:?}",
                    other.map(|s| s.session_id)
                ))
            }
        }
    }
    Ok(format!("1000 round trips; mutations: {digest_mismatch} DigestMismatch, {malformed} Malformed"))
}

// ---- OLM ----

#[derive(Debug, Clone)]
enum Op {
    Init(usize),
    Apply(usize, usize),
    Reevaluate(usize, usize),
    DirectSet(usize, usize),
}

fn levels(store: &OlmStore) -> BTreeMap<(String, String), (MasteryLevel, Vec<String>)> {
    store
        .snapshot()
        .iter()
        .flat_map(|(id, m)| {
            m.chapters().map(move |(ch, p)| {
                let sessions = p.attempts().iter().map(|a| a.session_id.clone()).collect();
                ((id.clone(), ch.to_string()), (p.current(), sessions))
            })
        })
        .collect()
}

fn olm_event_sourcing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let chapters = default_chapters();
    let learners = ["l0", "l1", "l2", "l3"];
    let mut total_ops = 0;
    for seq in 0..500 {
        // A pool of verified-shape summaries with distinct timestamps.
        let mut stamps: Vec<i64> = (0..40).map(|i| 1_000 + i * 7).collect();
        stamps.shuffle(&mut rng);
        let pool: Vec<TranscriptSummary> = (0..12)
            .map(|i| {
                let half = rng.random_range(0..=20u16);
                let total = Marks::from_half_marks(half);
                TranscriptSummary {
                    session_id: format!("s{seq}-{i}"),
                    learner_id: learners[rng.random_range(0..learners.len())].to_string(),
                    chapter_id: if rng.random_bool(0.05) {
                        "ch9".to_string()
                    } else {
                        chapters[rng.random_range(0..3)].id.clone()
                    },
                    total_marks: total,
                    mastery: mastery_from_score(total).unwrap(),
                    finalized_at_ms: stamps[i],
                    records: vec![],
                }
            })
            .collect();

        let sink = MemorySink::default();
        let store = OlmStore::new(chapters.clone(), true, Box::new(sink.clone()));
        let mut applied: BTreeSet<usize> = BTreeSet::new();
        let mut flags: BTreeSet<(String, String)> = BTreeSet::new();
        let n_ops = rng.random_range(5..40);
        for _ in 0..n_ops {
            total_ops += 1;
            let op = match rng.random_range(0..10) {
                0..=1 => Op::Init(rng.random_range(0..learners.len())),
                2..=6 => Op::Apply(rng.random_range(0..learners.len()), rng.random_range(0..pool.len())),
                7..=8 => Op::Reevaluate(rng.random_range(0..learners.len()), rng.random_range(0..4)),
                _ => Op::DirectSet(rng.random_range(0..learners.len()), rng.random_range(0..3)),
            };
            let before = store.snapshot();
            let before_levels = levels(&store);
            let now = rng.random_range(0..5_000);
            let ok = match &op {
                Op::Init(l) => store.init_learner(learners[*l], now).is_ok(),
                Op::Apply(l, p) => {
                    let s = &pool[*p];
                    match store.apply_transcript(learners[*l], s, now) {
                        Ok(_) => {
                            if applied.insert(*p) {
                                flags.remove(&(s.learner_id.clone(), s.chapter_id.clone()));
                            } else {
                                ensure!(store.snapshot() == before, "seq {seq}: duplicate apply changed model");
                            }
                            true
                        }
                        Err(_) => false,
                    }
                }
                Op::Reevaluate(l, c) => {
                    let ch = chapters.get(*c).map_or("ch9".to_string(), |c| c.id.clone());
                    let r = store.request_reevaluation(learners[*l], &ch, now);
                    if r.is_ok() {
                        flags.insert((learners[*l].to_string(), ch));
                    }
                    r.is_ok()
                }
                Op::DirectSet(l, c) => {
                    let r = store.direct_set_mastery(learners[*l], &chapters[*c].id, MasteryLevel::Mastered);
                    ensure!(matches!(r, Err(OlmError::Forbidden)), "seq {seq}: direct write allowed");
                    false
                }
            };
            if !ok {
                ensure!(store.snapshot() == before, "seq {seq}: failed {op:?} changed state");
            }
            if !matches!(op, Op::Apply(..)) {
                let after = levels(&store);
                for (k, v) in &after {
                    match before_levels.get(k) {
                        Some(old) => ensure!(old == v, "seq {seq}: {op:?} changed mastery"),
                        None => ensure!(
                            v.0 == MasteryLevel::NotQualified && v.1.is_empty(),
                            "seq {seq}: new learner not fresh"
                        ),
                    }
                }
                ensure!(after.len() >= before_levels.len(), "seq {seq}: {op:?} dropped rows");
            }
        }

        let snapshot = store.snapshot();
        let (replayed, _) = replay_log(sink.lines()).map_err(|e| e.to_string())?;
        ensure!(replayed == snapshot, "seq {seq}: replay differs from memory");
        let reopened = OlmStore::from_log(chapters.clone(), true, sink.lines(), Box::new(MemorySink::default()))
            .map_err(|e| e.to_string())?;
        ensure!(reopened.snapshot() == snapshot, "seq {seq}: from_log differs");

        // Same attempts as applying the de-duplicated set in timestamp order.
        let fresh = OlmStore::new(chapters.clone(), true, Box::new(MemorySink::default()));
        for id in snapshot.keys() {
            fresh.init_learner(id, 0).unwrap();
        }
        let mut ordered: Vec<&TranscriptSummary> = applied.iter().map(|&i| &pool[i]).collect();
        ordered.sort_by_key(|s| s.finalized_at_ms);
        for s in ordered {
            fresh.apply_transcript(&s.learner_id, s, 0).unwrap();
        }
        ensure!(levels(&fresh) == levels(&store), "seq {seq}: order dependence");

        for (id, model) in &snapshot {
            for (ch, progress) in model.chapters() {
                let latest = applied
                    .iter()
                    .map(|&i| &pool[i])
                    .filter(|s| &s.learner_id == id && s.chapter_id == ch)
                    .max_by_key(|s| s.finalized_at_ms);
                let want = latest.map_or(MasteryLevel::NotQualified, |s| s.mastery);
                ensure!(progress.current() == want, "seq {seq}: {id}/{ch} current");
                let want_flag = flags.contains(&(id.clone(), ch.to_string()));
                ensure!(progress.reevaluation_open() == want_flag, "seq {seq}: {id}/{ch} flag");
            }
        }
    }
    Ok(format!("500 sequences, {total_ops} operations"))
}

// ---- MCQ ----

fn base_mcq() -> Mcq {
    Mcq {
        id: "g".into(),
        chapter_id: "ch1".into(),
        stem: "Which principle limits data collection?".into(),
        options: vec!["Data minimisation".into(), "Data maximisation".into(), "Data duplication".into()],
        correct_index: 0,
        hints: vec!["Think small.".into(), "Less is more.".into(), "Only what is needed.".into()],
        difficulty: 0.5,
        explanation: None,
    }
}

fn mcq_validation() -> Outcome {
    ensure!(validate_mcq(&base_mcq()).valid, "control question rejected");
    let with = |f: &dyn Fn(&mut Mcq)| {
        let mut m = base_mcq();
        f(&mut m);
        m
    };
    let forbidden = [
        "None of the above",
        "NONE OF THE ABOVE",
        "None-of-the-Above",
        "none-of-the-above.",
        "All of the above",
        "ALL-OF-THE-ABOVE!",
        "all  of   the above",
        "All-of-the-Above",
    ];
    let mut golden: Vec<(Mcq, ViolationCode)> = vec![
        (with(&|m| m.options.truncate(2)), ViolationCode::OptionCount),
        (with(&|m| m.options.push("Data deletion".into())), ViolationCode::OptionCount),
        (with(&|m| m.options[2] = "data MINIMISATION".into()), ViolationCode::DuplicateOption),
        (with(&|m| m.options[1] = "Data minimisation".into()), ViolationCode::DuplicateOption),
        (with(&|m| m.hints.truncate(2)), ViolationCode::HintCount),
        (with(&|m| m.hints.clear()), ViolationCode::HintCount),
        (with(&|m| m.correct_index = 3), ViolationCode::BadCorrectIndex),
        (with(&|m| m.stem = "  ".into()), ViolationCode::EmptyText),
        (with(&|m| m.difficulty = 1.5), ViolationCode::DifficultyRange),
    ];
    for phrase in forbidden {
        golden.push((with(&|m| m.options[2] = phrase.to_string()), ViolationCode::ForbiddenPhrase));
    }
    ensure!(golden.len() >= 12, "golden suite too small");
    for (m, code) in &golden {
        let report = validate_mcq(m);
        ensure!(!report.valid && report.has(*code), "{:?} not flagged {code:?}: {report}", m.options);
    }

    let text = std::fs::read_to_string(fixtures().join("bank.json")).map_err(|e| e.to_string())?;
    let reports = QuestionBank::validate_document(&text).map_err(|e| e.to_string())?;
    ensure!(reports.iter().all(|(_, r)| r.valid), "shipped bank has invalid questions");
    let bank = QuestionBank::from_json(&text).map_err(|e| e.to_string())?;
    for ch in ["ch1", "ch2", "ch3"] {
        let qs = bank.questions(ch);
        ensure!(qs.len() >= 5, "{ch} has {} questions", qs.len());
        let ds: BTreeSet<u64> = qs.iter().map(|q| (q.difficulty * 100.0).round() as u64).collect();
        let span = qs.iter().map(|q| q.difficulty).fold(0.0, f64::max)
            - qs.iter().map(|q| q.difficulty).fold(1.0, f64::min);
        ensure!(ds.len() >= 4 && span >= 0.5, "{ch} difficulties not spread");
    }
    Ok(format!("{} invalid questions rejected, {} bank questions valid", golden.len(), reports.len()))
}

// ---- API ----

fn api_contract() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(api_script())
}

async fn api_script() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = Server::start(test_config(dir.path())).await;
    let c = Client::new(&server.base);

    let (status, _) = c.post("/learners", json!({ "learner_id": "amy" })).await;
    ensure!(status == 201, "create learner: {status}");
    let (_, chapters) = c.get("/chapters?learner_id=amy").await;
    ensure!(chapters[0]["unlocked"] == true && chapters[1]["unlocked"] == false, "initial gating");

    // Five rounds of question, hint, answer; four right after one hint each.
    let plan = [(1, true), (1, true), (1, false), (1, true), (1, true)];
    let (sid, result) = run_session(&c, "amy", "ch1", plan).await;
    ensure!(result["total_marks"] == 6.0, "total {}", result["total_marks"]);
    ensure!(result["mastery"] == "Qualified", "mastery {}", result["mastery"]);

    let (_, olm) = c.get("/learners/amy/olm").await;
    ensure!(olm["chapters"][0]["current"] == "NotQualified", "OLM changed before upload");

    let (status, _, bytes) = c.download(&format!("/sessions/{sid}/transcript")).await;
    ensure!(status == 200, "download {status}");
    let (status, body) = c.upload("amy", bytes.clone()).await;
    ensure!(status == 200 && body["row"]["current"] == "Qualified", "upload: {body}");
    let mut tampered = bytes.clone();
    let at = tampered.windows(10).position(|w| w == b"\"digest\":\"").ok_or("no digest")? + 10;
    tampered[at] = if tampered[at] == b'0' { b'1' } else { b'0' };
    let (status, body) = c.upload("amy", tampered).await;
    ensure!(status == 400 && body["code"] == "DigestMismatch", "tampered upload: {status} {body}");

    let (_, olm) = c.get("/learners/amy/olm").await;
    ensure!(olm["chapters"][0]["current"] == "Qualified", "OLM not updated");
    ensure!(olm["chapters"][1]["unlocked"] == true, "chapter 2 still locked");

    // Chapter 2 attempt, then a weak chapter 1 redo relocks chapter 2.
    for (chapter, plan) in [("ch2", [(0, true); 5]), ("ch1", [(0, false); 5])] {
        if chapter == "ch1" {
            let (status, row) = c.post_empty("/learners/amy/olm/ch1/reevaluate").await;
            ensure!(status == 200 && row["reevaluation_open"] == true, "reevaluate ch1: {row}");
        }
        let (sid, _) = run_session(&c, "amy", chapter, plan).await;
        let (_, _, bytes) = c.download(&format!("/sessions/{sid}/transcript")).await;
        let (status, body) = c.upload("amy", bytes).await;
        ensure!(status == 200, "upload {chapter}: {body}");
    }
    let (_, olm) = c.get("/learners/amy/olm").await;
    ensure!(olm["chapters"][0]["current"] == "NotQualified", "latest attempt did not win");
    ensure!(olm["chapters"][0]["reevaluation_open"] == false, "flag not cleared");
    ensure!(olm["chapters"][1]["unlocked"] == false, "chapter 2 should relock");
    let (status, body) = c.post("/learners/amy/sessions", json!({ "chapter_id": "ch2" })).await;
    ensure!(status == 409 && body["code"] == "Locked", "locked start: {status} {body}");

    let (status, row) = c.post_empty("/learners/amy/olm/ch2/reevaluate").await;
    ensure!(status == 200 && row["unlocked"] == true, "reevaluate ch2: {row}");
    let (sid, _) = run_session(&c, "amy", "ch2", [(0, true); 5]).await;
    let (_, _, bytes) = c.download(&format!("/sessions/{sid}/transcript")).await;
    let (_, body) = c.upload("amy", bytes).await;
    ensure!(body["row"]["current"] == "Mastered", "redo not recorded: {body}");
    ensure!(body["row"]["history"].as_array().map(Vec::len) == Some(2), "history length");

    let resp = c
        .http
        .put(server.url("/learners/amy/olm/ch1"))
        .json(&json!({ "mastery": "Mastered" }))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    ensure!(resp.status().as_u16() == 403, "direct write: {}", resp.status());

    server.stop().await;
    Ok("full flow over HTTP, no open-question answer keys served".into())
}
