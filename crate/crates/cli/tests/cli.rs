use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;

use histune_cli::compare::{PARTIAL_MARKER, RAW_CSV, STATS_CSV};
use histune_cli::graph::{NodeKind, TemporalGraph, TuningRecordView};
use histune_cli::{cmd_compare, cmd_query, cmd_run, best, CliError, MatrixSpec, Query, RunConfig, TunerKind};

fn small(out: &Path) -> RunConfig {
    RunConfig {
        episodes: 30,
        steps_per_episode: 20,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (headers, rows)
}

#[test]
fn run_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_run(&small(dir.path())).unwrap();
    let (headers, rows) = read_csv(&a.rewards_csv);
    assert_eq!(headers, ["episode", "mean_reward", "gamma", "decision_events"]);
    assert_eq!(rows.len(), 30);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
    }
    let copy = RunConfig::load(&a.config_copy).unwrap();
    assert_eq!(copy.initial_gamma, Some(0.5));
    assert!(a.commit_log.exists());
}

#[test]
fn static_run_keeps_gamma_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        tuner: TunerKind::Static,
        initial_gamma: Some(0.7),
        ..small(dir.path())
    };
    let a = cmd_run(&cfg).unwrap();
    assert!(a.log.gammas().iter().all(|g| *g == 0.7));
    assert_eq!(a.stable_windows, 0);
    assert_eq!(a.best, None);
}

#[test]
fn query_answers_match_the_recorded_history() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_run(&small(dir.path())).unwrap();
    let graph = TemporalGraph::open(&a.commit_log).unwrap();
    let records = TuningRecordView::all(&graph).unwrap();
    assert_eq!(records.len(), a.stable_windows);

    let b = best(&graph).unwrap().expect("some window beats 0");
    let top = records.iter().map(|r| r.r_win).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(b.max_r, top);
    assert_eq!(Some(&b), a.best.as_ref());

    let trajectory = cmd_query(&a.commit_log, &Query::Trajectory).unwrap();
    assert_eq!(trajectory.lines().count(), records.len() + 1);

    let past_end = graph.last_commit().unwrap() + 10;
    assert_eq!(cmd_query(&a.commit_log, &Query::Range { from: past_end, to: past_end + 5 }).unwrap(), "");
    let kinds = cmd_query(&a.commit_log, &Query::Kind(NodeKind::RLAgent)).unwrap();
    assert_eq!(kinds.lines().count(), 1);
}

#[test]
fn corrupt_log_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_run(&small(dir.path())).unwrap();
    let mut bytes = fs::read(&a.commit_log).unwrap();
    let cut = bytes.len() - 3;
    bytes.truncate(cut);
    let broken = dir.path().join("broken.htgl");
    fs::write(&broken, &bytes).unwrap();
    match cmd_query(&broken, &Query::Best) {
        Err(e @ CliError::Input(_)) => {
            assert!(e.to_string().contains("at byte"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected input error, got {other:?}"),
    }
}

fn matrix(out: &Path, kinds: Vec<TunerKind>, seeds: u64, sweep: bool) -> MatrixSpec {
    MatrixSpec {
        base: RunConfig {
            episodes: 24,
            steps_per_episode: 10,
            ..RunConfig::default()
        },
        kinds,
        seeds: (0..seeds).collect(),
        sweep,
        out: out.to_path_buf(),
    }
}

#[test]
fn stats_match_recomputation_from_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_compare(&matrix(dir.path(), TunerKind::ALL.to_vec(), 3, false)).unwrap();
    assert!(r.partial.is_none());
    assert!(!dir.path().join(PARTIAL_MARKER).exists());

    let (_, raw) = read_csv(&dir.path().join(RAW_CSV));
    assert_eq!(raw.len(), 4 * 3 * 24);
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in raw {
        pooled.entry(row[0].clone()).or_default().push(row[3].parse().unwrap());
    }
    let (headers, stats) = read_csv(&dir.path().join(STATS_CSV));
    assert_eq!(headers, ["label", "n", "min", "q1", "median", "q3", "max", "mean"]);
    assert_eq!(stats.len(), 4);
    for row in stats {
        let mut v = pooled[&row[0]].clone();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let expect = [v.len() as f64, v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1], mean];
        for (got, want) in row[1..].iter().zip(expect) {
            let got: f64 = got.parse().unwrap();
            assert!((got - want).abs() < 1e-9, "{}: {got} vs {want}", row[0]);
        }
    }
}

#[test]
fn single_kind_single_seed_is_degenerate_but_valid() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_compare(&matrix(dir.path(), vec![TunerKind::Static], 1, false)).unwrap();
    let s = r.stats["static"];
    assert_eq!(s.n, 24);
    assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
}

#[test]
fn history_sweep_runs_from_every_start() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_compare(&matrix(dir.path(), vec![TunerKind::History], 2, true)).unwrap();
    assert!(r.partial.is_none());
    assert_eq!(r.runs.len(), 18);
    for g in histune_cli::compare::SWEEP {
        let label = format!("history@{g}");
        let run = r.runs_of(&label).next().unwrap();
        assert_eq!(run.log.episodes[0].gamma, g);
    }
}

#[test]
fn failing_sub_run_flags_the_matrix_partial() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = matrix(dir.path(), vec![TunerKind::Static], 1, true);
    // sweep starts below the lower bound are rejected per sub-run
    spec.base.gamma_min = 0.45;
    let r = cmd_compare(&spec).unwrap();
    let msg = r.partial.expect("partial");
    assert!(msg.contains("static@"), "{msg}");
    assert!(dir.path().join(PARTIAL_MARKER).exists());
    assert!(r.runs.len() < 9);
}

fn histune() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_histune"));
    c.env("RUST_LOG", "off");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "episodes = \"many\"\n").unwrap();
    let out = histune().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, "episodes = 12\nsteps_per_episode = 10\n").unwrap();
    let out = histune()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("ok"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = histune()
        .arg("query")
        .arg(dir.path().join("ok").join("history.htgl"))
        .arg("trajectory")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = busy.local_addr().unwrap().to_string();
    let out = histune()
        .args(["run", "--tcp", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("tcp"))
        .env("HISTUNE_BUS_ADDR", &addr)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));

    let partial = dir.path().join("partial.toml");
    fs::write(&partial, "episodes = 12\nsteps_per_episode = 10\ngamma_min = 0.45\n").unwrap();
    let out = histune()
        .args(["compare", "--tuner", "static", "--seeds", "1", "--sweep", "--config"])
        .arg(&partial)
        .arg("--out")
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    let out = histune().arg("query").arg(dir.path().join("missing.htgl")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
