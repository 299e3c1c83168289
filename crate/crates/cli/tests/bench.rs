use std::collections::BTreeSet;
use std::sync::Arc;

use copt_cli::bench::{run_bench, BenchResult, BenchSpec};
use copt_cli::config::CliConfig;
use copt_cli::metrics::MetricsSummary;
use copt_cli::output::{jsonl_lines, read_jsonl, write_csv, write_jsonl, OutputLine};
use copt_cli::tasks::{parse_tasks, Checker, TaskRecord};
use copt_core::backend::{CountingBackend, SessionSource, Shared};
use copt_core::scripted::{QuizBackend, QuizQuestion, QuizSpec};
use copt_core::types::{Decision, Mode, SamplingParams};

/// (weights, path answers, corrected) for the ten hand-scored questions.
fn fixture_spec() -> QuizSpec {
    let third = 1.0 / 3.0;
    let rows: Vec<(Vec<f64>, Vec<u8>, u8)> = vec![
        (vec![1.0], vec![3], 3),
        (vec![1.0], vec![5], 2),
        (vec![0.5, 0.5], vec![4, 7], 7),
        (vec![0.5, 0.5], vec![6, 6], 6),
        (vec![0.9, 0.1], vec![1, 8], 1),
        (vec![0.2, 0.8], vec![0, 9], 0),
        (vec![0.25; 4], vec![1, 2, 3, 4], 2),
        (vec![0.4, 0.3, 0.3], vec![2, 5, 8], 2),
        (vec![third; 3], vec![7, 8, 9], 9),
        (vec![0.7, 0.3], vec![4, 1], 4),
    ];
    QuizSpec {
        questions: rows
            .into_iter()
            .map(|(weights, path_answers, corrected)| QuizQuestion {
                weights,
                path_answers,
                corrected,
                think_len: 2,
            })
            .collect(),
    }
}

fn fixture() -> (QuizBackend, Vec<TaskRecord>) {
    let quiz = QuizBackend::new(fixture_spec()).unwrap();
    let tasks = (0..10)
        .map(|i| TaskRecord {
            id: format!("t{}", i + 1),
            prompt_tokens: Some(vec![quiz.question_token(i).0]),
            prompt: None,
            expected: Some(quiz.spec().questions[i].corrected.to_string()),
            checker: Checker::BoxedMatch,
        })
        .collect();
    (quiz, tasks)
}

fn config() -> CliConfig {
    let mut cfg = CliConfig::default();
    cfg.session.sampling = SamplingParams::greedy();
    cfg.session.tau_r = 0.0;
    cfg.seed = 5;
    cfg
}

fn bench(source: &dyn SessionSource, tasks: &[TaskRecord], cfg: &CliConfig, mode: Mode, tau_a: Vec<f64>) -> BenchResult {
    let spec = BenchSpec {
        mode,
        tau_a_grid: tau_a,
        tau_r_grid: vec![0.0],
        keep_traces: true,
    };
    run_bench(source, "quiz:fixture", None, tasks, Vec::new(), cfg, &spec).unwrap()
}

fn flagged_ids(result: &BenchResult, row: usize) -> BTreeSet<String> {
    result.metrics[row]
        .rows
        .iter()
        .filter(|r| r.decision == Some(Decision::ThinkTriggered))
        .map(|r| r.task_id.clone())
        .collect()
}

fn ids(v: &[u32]) -> BTreeSet<String> {
    v.iter().map(|i| format!("t{i}")).collect()
}

#[test]
fn hand_scored_copt_metrics() {
    let (quiz, tasks) = fixture();
    let source = Shared(Arc::new(quiz));
    let result = bench(&source, &tasks, &config(), Mode::Copt, vec![0.1, 0.3]);
    assert_eq!(result.metrics.len(), 2);

    let loose = &result.metrics[0].summary;
    assert_eq!(flagged_ids(&result, 0), ids(&[3, 7, 8, 9]));
    assert_eq!((loose.flagged, loose.accepted, loose.failed), (4, 6, 0));
    assert_eq!(loose.accuracy, Some(0.8));
    assert_eq!(loose.caught_errors, 3);
    assert_eq!(loose.precision, Some(0.75));
    assert_eq!(loose.safe_acceptance, Some(4.0 / 6.0));
    assert_eq!(loose.corrected_errors, 3);
    assert!((loose.mean_tokens.unwrap() - 6.4).abs() < 1e-12);

    let strict = &result.metrics[1].summary;
    assert_eq!(flagged_ids(&result, 1), ids(&[7]));
    assert_eq!((strict.flagged, strict.accepted), (1, 9));
    assert_eq!(strict.accuracy, Some(0.6));
    assert_eq!(strict.caught_errors, 1);
    assert_eq!(strict.precision, Some(1.0));
    assert_eq!(strict.safe_acceptance, Some(5.0 / 9.0));
    assert_eq!(strict.corrected_errors, 1);
    assert!((strict.mean_tokens.unwrap() - 4.6).abs() < 1e-12);

    for m in &result.metrics {
        let s = &m.summary;
        assert_eq!(s.flagged + s.accepted, s.sessions);
        assert!(s.caught_errors <= s.flagged);
        assert!(s.corrected_errors <= s.caught_errors && s.caught_errors <= s.draft_errors);
    }
}

#[test]
fn cot_mode_is_always_right_and_never_scores() {
    let (quiz, tasks) = fixture();
    let counting = CountingBackend::new(quiz);
    let counts = counting.counts();
    let source = Shared(Arc::new(counting));
    let result = bench(&source, &tasks, &config(), Mode::Cot, vec![0.1, 0.3]);
    assert_eq!(result.metrics.len(), 1, "cot ignores the threshold grid");
    let s = &result.metrics[0].summary;
    assert_eq!(s.accuracy, Some(1.0));
    assert_eq!(s.mean_tokens, Some(6.0));
    assert_eq!((s.flagged, s.accepted), (10, 0));
    assert_eq!((s.precision, s.safe_acceptance), (None, None));
    assert!(result.metrics[0].rows.iter().all(|r| r.kappa_a.is_none() && r.draft_tokens == 0));
    assert!(counts.steps() > 0);
    assert_eq!(counts.teacher(), 0);
}

#[test]
fn stricter_gate_flags_a_subset() {
    let quiz = QuizBackend::new(QuizSpec::random(42, 40)).unwrap();
    let tasks: Vec<TaskRecord> = (0..40)
        .map(|i| TaskRecord {
            id: format!("q{i}"),
            prompt_tokens: Some(vec![quiz.question_token(i).0]),
            prompt: None,
            expected: Some(quiz.expected(i).to_string()),
            checker: Checker::BoxedMatch,
        })
        .collect();
    let mut cfg = config();
    cfg.session.sampling = SamplingParams::ancestral(0);
    let grid = vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.8];
    let result = bench(&Shared(Arc::new(quiz)), &tasks, &cfg, Mode::Copt, grid.clone());
    let sets: Vec<BTreeSet<String>> = (0..grid.len()).map(|i| flagged_ids(&result, i)).collect();
    for pair in sets.windows(2) {
        assert!(pair[1].is_subset(&pair[0]));
    }
    assert!(sets[0].len() > sets[grid.len() - 1].len());
    // the same seed per task at every grid point means identical drafts
    for m in &result.metrics[1..] {
        for (a, b) in m.rows.iter().zip(&result.metrics[0].rows) {
            assert_eq!((a.seed, a.kappa_a, a.draft_tokens), (b.seed, b.kappa_a, b.draft_tokens));
        }
    }
}

#[test]
fn parallelism_does_not_change_results() {
    let (quiz, tasks) = fixture();
    let source = Shared(Arc::new(quiz));
    let mut cfg = config();
    cfg.session.sampling = SamplingParams::ancestral(0);
    cfg.repeat = 3;
    cfg.parallelism = Some(1);
    let serial = bench(&source, &tasks, &cfg, Mode::Copt, vec![0.1, 0.3]);
    cfg.parallelism = Some(8);
    let parallel = bench(&source, &tasks, &cfg, Mode::Copt, vec![0.1, 0.3]);
    assert_eq!(serial.metrics, parallel.metrics);
    assert_eq!(serial.header.seeds, parallel.header.seeds);
    assert_eq!(serial.header.seeds.len(), 30);
}

#[test]
fn outputs_carry_the_header_and_round_trip() {
    let (quiz, tasks) = fixture();
    let result = bench(&Shared(Arc::new(quiz)), &tasks, &config(), Mode::Copt, vec![0.1, 0.3]);

    let mut buf = Vec::new();
    write_jsonl(&result, &mut buf).unwrap();
    let lines = read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(lines, jsonl_lines(&result));
    let OutputLine::Header(header) = &lines[0] else {
        panic!("first line must be the header")
    };
    assert_eq!(header.backend, "quiz(10 questions)");
    assert_eq!(header.config.seed, 5);
    assert_eq!(header.seeds.len(), 10);
    assert!(!header.tool_version.is_empty());
    assert_eq!(lines.iter().filter(|l| matches!(l, OutputLine::Metrics(_))).count(), 2);
    assert_eq!(lines.iter().filter(|l| matches!(l, OutputLine::Task(_))).count(), 20);

    let mut csv_buf = Vec::new();
    write_csv(&result, &mut csv_buf).unwrap();
    let text = String::from_utf8(csv_buf).unwrap();
    assert!(text.lines().take_while(|l| l.starts_with('#')).any(|l| l.contains("quiz:fixture")));
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let rows: Vec<MetricsSummary> = csv::Reader::from_reader(body.as_bytes()).deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows, result.metrics.iter().map(|m| m.summary.clone()).collect::<Vec<_>>());
}

#[test]
fn bad_task_lines_are_reported_and_the_run_continues() {
    let text = concat!(
        "{\"id\":\"a\",\"prompt\":\"Q0? \",\"expected\":\"3\",\"checker\":\"boxed_match\"}\n",
        "{\"id\":\"b\",\"prompt_tokens\":[27],\"checker\":\"exact_match\"}\n",
        "{\"id\":\"c\",\"prompt_tokens\":[28],\"extra\":1}\n",
        "{broken\n",
        "{\"id\":\"d\",\"prompt_tokens\":[9999]}\n",
    );
    let file = parse_tasks(text);
    assert_eq!(file.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3, 4]);
    let quiz = QuizBackend::new(fixture_spec()).unwrap();
    let spec = BenchSpec {
        mode: Mode::Copt,
        tau_a_grid: vec![0.1],
        tau_r_grid: vec![],
        keep_traces: false,
    };
    let result = run_bench(&Shared(Arc::new(quiz)), "quiz:fixture", None, &file.tasks, file.errors.clone(), &config(), &spec).unwrap();
    assert_eq!(result.header.task_errors.len(), 3);
    let rows = &result.metrics[0].rows;
    // a raw-text prompt goes through the backend tokenizer
    assert_eq!(rows[0].correct, Some(true));
    // an out-of-range token fails that task only
    assert!(rows[1].error.is_some());
    assert_eq!(result.metrics[0].summary.failed, 1);
}
