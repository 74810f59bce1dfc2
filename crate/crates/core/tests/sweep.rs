use refine_es::pipeline::{load_records, sweep, ExperimentPlan, Method, SweepOptions};
use refine_es::report::write_report;
use refine_es::{PpoConfig, TaskId};

fn small_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::new(TaskId::PointReach, Method::ALL.to_vec(), 6_000);
    plan.seeds = vec![0, 1, 2];
    plan.eval_episodes = 4;
    plan.ppo = PpoConfig { episodes_per_update: 4, epochs: 2, hidden_dims: vec![8], ..PpoConfig::default() };
    plan.es.pairs = 2;
    plan
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let plan = small_plan();
    let one = tempfile::tempdir().unwrap();
    let many = tempfile::tempdir().unwrap();
    sweep(&plan, one.path(), &SweepOptions { workers: Some(1), stop_hook: None }).unwrap();
    sweep(&plan, many.path(), &SweepOptions { workers: Some(4), stop_hook: None }).unwrap();
    let (a, b) = (load_records(one.path()).unwrap(), load_records(many.path()).unwrap());
    assert_eq!(a.len(), 9);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.key(), y.key());
        assert_eq!(x.final_fingerprint, y.final_fingerprint);
        assert_eq!(x.final_success_rate, y.final_success_rate);
        assert_eq!(x.ppo_curve, y.ppo_curve);
    }
}

#[test]
fn budgets_are_equal_across_methods_and_respected() {
    let plan = small_plan();
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(&plan, dir.path(), &SweepOptions::default()).unwrap();
    for r in &out.records {
        assert!(r.is_completed(), "{:?}", r.error);
        assert_eq!(r.step_budget, plan.total_step_budget);
        assert!(r.steps_consumed <= plan.total_step_budget, "{} > budget", r.steps_consumed);
        assert_eq!(r.steps_consumed, r.ppo_steps + r.es_steps);
        match r.method {
            Method::PpoOnly => assert_eq!(r.es_steps, 0),
            _ => assert!(r.ppo_steps <= plan.ppo_budget(r.method)),
        }
    }
}

#[test]
fn report_is_read_only_over_runs() {
    let plan = small_plan();
    let dir = tempfile::tempdir().unwrap();
    sweep(&plan, dir.path(), &SweepOptions::default()).unwrap();
    let before = load_records(dir.path()).unwrap();
    let first = write_report(dir.path(), None).unwrap();
    let second = write_report(dir.path(), None).unwrap();
    assert_eq!(first.text, second.text);
    assert_eq!(load_records(dir.path()).unwrap(), before);
    assert!(first.text.contains("ppo_then_tdes"));
}
