use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use refine_es::checkpoint;
use refine_es::pipeline::{load_records, FailureEntry};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_refine-es"));
    cmd.env_remove("REFINE_ES_SEED").env_remove("RUST_LOG");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{:?}\nstdout:\n{}\nstderr:\n{}", cmd, text(&out.stdout), text(&out.stderr));
    out
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const TINY_PLAN: &str = r#"{
  "task": "point-reach",
  "methods": ["ppo_only", "ppo_then_tdes", "ppo_then_gaussian_es"],
  "total_step_budget": 4000,
  "seeds": [0],
  "eval_episodes": 3,
  "ppo": { "episodes_per_update": 4, "epochs": 2, "hidden_dims": [8] },
  "es": { "pairs": 2 }
}"#;

fn write_plan(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("plan-in.json");
    fs::write(&path, body).unwrap();
    path
}

fn run_tiny(work: &Path) -> PathBuf {
    let plan = write_plan(work, TINY_PLAN);
    let out = work.join("results");
    run_ok(bin().args(["run", "--plan"]).arg(&plan).arg("--out").arg(&out));
    out
}

#[test]
fn malformed_plan_reports_line_number() {
    let work = tempfile::tempdir().unwrap();
    let plan = write_plan(work.path(), "{\n  \"task\": \"point-reach\",\n  \"methods\": [\n}\n");
    let out = bin().args(["run", "--plan"]).arg(&plan).arg("--out").arg(work.path().join("r")).output().unwrap();
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(!work.path().join("r").exists());
}

#[test]
fn unknown_plan_key_is_named() {
    let work = tempfile::tempdir().unwrap();
    let plan = write_plan(work.path(), r#"{"task": "point-reach", "methods": ["ppo_only"], "total_step_budget": 1000, "sigma": 1}"#);
    let out = bin().args(["run", "--plan"]).arg(&plan).arg("--out").arg(work.path().join("r")).output().unwrap();
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("unknown field `sigma`"), "{}", text(&out.stderr));
}

#[test]
fn tiny_plan_populates_results_and_guards_overwrite() {
    let work = tempfile::tempdir().unwrap();
    let out = run_tiny(work.path());
    for f in ["plan.json", "failures.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    for method in ["ppo_only", "ppo_then_tdes", "ppo_then_gaussian_es"] {
        let cell = out.join("runs/point-reach").join(method).join("0");
        for f in ["record.json", "log.csv", "status.json"] {
            assert!(cell.join(f).is_file(), "{method}/{f}");
        }
        let log = fs::read_to_string(cell.join("log.csv")).unwrap();
        assert!(log.starts_with("# refine-es log schema 1\nstage,index,steps,"));
    }
    assert_eq!(load_records(&out).unwrap().len(), 3);

    let plan = work.path().join("plan-in.json");
    let again = bin().args(["run", "--plan"]).arg(&plan).arg("--out").arg(&out).output().unwrap();
    assert!(!again.status.success());
    assert!(text(&again.stderr).contains("--force"), "{}", text(&again.stderr));

    run_ok(bin().args(["run", "--force", "--plan"]).arg(&plan).arg("--out").arg(&out));
    assert_eq!(load_records(&out).unwrap().len(), 3);
}

#[test]
fn force_refuses_directories_without_a_plan() {
    let work = tempfile::tempdir().unwrap();
    let plan = write_plan(work.path(), TINY_PLAN);
    let precious = work.path().join("precious");
    fs::create_dir(&precious).unwrap();
    fs::write(precious.join("notes.txt"), "keep me").unwrap();
    let out = bin().args(["run", "--force", "--plan"]).arg(&plan).arg("--out").arg(&precious).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(fs::read_to_string(precious.join("notes.txt")).unwrap(), "keep me");
}

#[test]
fn seed_env_overrides_plan_seeds() {
    let work = tempfile::tempdir().unwrap();
    let plan = write_plan(work.path(), TINY_PLAN);
    let out = work.path().join("results");
    run_ok(bin().env("REFINE_ES_SEED", "3,5").args(["run", "--plan"]).arg(&plan).arg("--out").arg(&out));
    let seeds: Vec<u64> = load_records(&out).unwrap().iter().filter(|r| r.method.as_str() == "ppo_only").map(|r| r.seed).collect();
    assert_eq!(seeds, vec![3, 5]);
}

#[test]
fn resume_on_complete_directory_is_a_no_op() {
    let work = tempfile::tempdir().unwrap();
    let out = run_tiny(work.path());
    let record = out.join("runs/point-reach/ppo_then_tdes/0/record.json");
    let before = fs::read(&record).unwrap();
    let modified = fs::metadata(&record).unwrap().modified().unwrap();
    run_ok(bin().args(["resume", "--dir"]).arg(&out));
    assert_eq!(fs::read(&record).unwrap(), before);
    assert_eq!(fs::metadata(&record).unwrap().modified().unwrap(), modified);
}

#[test]
fn missing_checkpoint_fails_only_that_cell() {
    let work = tempfile::tempdir().unwrap();
    let out = run_tiny(work.path());
    let cell = out.join("runs/point-reach/ppo_then_tdes/0");
    fs::remove_file(cell.join("record.json")).unwrap();
    fs::remove_file(cell.join("checkpoints/anchor.json")).unwrap();
    let res = bin().args(["resume", "--dir"]).arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(1), "{}", text(&res.stderr));
    let manifest: Vec<FailureEntry> = serde_json::from_slice(&fs::read(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 1);
    assert!(manifest[0].error.contains("missing checkpoint"), "{:?}", manifest[0]);
    let records = load_records(&out).unwrap();
    assert_eq!(records.iter().filter(|r| r.is_completed()).count(), 2);
}

#[test]
fn report_prints_tables_and_writes_plots() {
    let work = tempfile::tempdir().unwrap();
    let out = run_tiny(work.path());
    let runs_before = load_records(&out).unwrap();
    let res = run_ok(bin().args(["report", "--baseline", "ppo_only", "--dir"]).arg(&out));
    let stdout = text(&res.stdout);
    assert!(stdout.contains("IQM"), "{stdout}");
    assert!(stdout.contains("P(improvement vs ppo_only)"), "{stdout}");
    for method in ["ppo_only", "ppo_then_tdes", "ppo_then_gaussian_es"] {
        assert!(stdout.contains(method), "{stdout}");
    }
    let report = out.join("report");
    for f in ["summary.txt", "aggregate.json", "profile.csv", "profile.svg"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let sigma_plot = fs::read_to_string(report.join("plots/point-reach/ppo_then_tdes/sigma.svg")).unwrap();
    assert!(sigma_plot.starts_with("<svg"));
    assert_eq!(load_records(&out).unwrap(), runs_before);
}

#[test]
fn report_on_empty_directory_says_no_runs_found() {
    let work = tempfile::tempdir().unwrap();
    let res = bin().args(["report", "--dir"]).arg(work.path()).output().unwrap();
    assert!(!res.status.success());
    assert!(text(&res.stderr).contains("no runs found"), "{}", text(&res.stderr));
}

const KILL_PLAN: &str = r#"{
  "task": "peg-insert-1d",
  "methods": ["ppo_then_tdes"],
  "total_step_budget": 200000,
  "split": 0.1,
  "seeds": [4],
  "eval_episodes": 5,
  "ppo": { "episodes_per_update": 4, "epochs": 2, "hidden_dims": [16] },
  "es": { "pairs": 2, "sigma_es": 0.01, "alpha": 0.002 }
}"#;

fn wait_for(path: &Path, limit: Duration) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if path.exists() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    false
}

#[test]
fn killed_run_resumes_to_identical_parameters() {
    let work = tempfile::tempdir().unwrap();
    let plan = write_plan(work.path(), KILL_PLAN);
    let reference = work.path().join("reference");
    run_ok(bin().args(["run", "--workers", "1", "--plan"]).arg(&plan).arg("--out").arg(&reference));

    let killed = work.path().join("killed");
    let mut child = bin().args(["run", "--workers", "1", "--plan"]).arg(&plan).arg("--out").arg(&killed).spawn().unwrap();
    let cell = killed.join("runs/peg-insert-1d/ppo_then_tdes/4");
    let started = wait_for(&cell.join("checkpoints/latest.json"), Duration::from_secs(120));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(started, "ES stage never checkpointed");
    assert!(!cell.join("record.json").exists(), "run finished before it could be killed");
    let killed_at = checkpoint::load(&cell.join("checkpoints/latest.json")).unwrap().generation;

    run_ok(bin().args(["resume", "--dir"]).arg(&killed));
    let a = load_records(&reference).unwrap();
    let b = load_records(&killed).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].final_fingerprint, b[0].final_fingerprint);
    assert_eq!(a[0].es_generations, b[0].es_generations);
    assert!(killed_at < a[0].es_generations, "killed at {killed_at} of {}", a[0].es_generations);
    let params = |root: &Path| {
        checkpoint::load(&root.join("runs/peg-insert-1d/ppo_then_tdes/4/checkpoints/latest.json")).unwrap().params.into_vec()
    };
    let (pa, pb) = (params(&reference), params(&killed));
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()) && pa.len() == pb.len());
}
