mod common;

use std::fs;
use std::path::Path;

use clare::runner::{report, run_experiment, run_in_memory, run_seed, RunRecord};
use clare::scenario::ScenarioKind;
use clare::{OptimConfig, RunConfig, Strategy};

fn quick_config(store_path: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(store_path);
    c.tasks = Some(3);
    c.memory = 60;
    c.seeds = vec![3, 4];
    c.output_dir = out.to_path_buf();
    c.optim = OptimConfig { epochs_per_task: 2, ..Default::default() };
    c
}

fn without_timestamp(path: &Path) -> RunRecord {
    let mut r: RunRecord = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    r.timestamp = 0;
    r
}

#[test]
fn single_task_has_no_forgetting() {
    let store = common::store(4, 10, 5, 8, 1);
    let mut config = RunConfig::new("tiny.cleb");
    config.tasks = Some(1);
    config.memory = 40;
    config.seeds = vec![1];
    config.optim.epochs_per_task = 3;
    let outcome = run_seed(&store, "h", &config, 1).unwrap();
    let r = &outcome.record;
    assert_eq!(r.accuracy_matrix.len(), 1);
    assert_eq!(r.accuracy_matrix[0].len(), 1);
    assert_eq!(r.metrics.avg_global_forgetting, 0.0);
    assert_eq!(r.metrics.avg_task_forgetting, 0.0);
    assert_eq!(r.metrics.last_task_accuracy, r.metrics.average_accuracy);
}

#[test]
fn head_grows_with_the_seen_classes() {
    let store = common::store(10, 6, 2, 8, 2);
    let mut config = RunConfig::new("grow.cleb");
    config.scenario = ScenarioKind::Unrealistic;
    config.tasks = Some(5);
    config.memory = 50;
    config.optim.epochs_per_task = 1;
    let outcome = run_seed(&store, "h", &config, 5).unwrap();
    assert_eq!(outcome.record.seen_classes, vec![2, 4, 6, 8, 10]);
    assert_eq!(outcome.model.num_classes(), 10);
    assert_eq!(outcome.record.accuracy_matrix.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn separable_store_is_learned_in_every_scenario() {
    let store = common::store(10, 40, 20, 32, 3);
    for scenario in [ScenarioKind::Unrealistic, ScenarioKind::SemiRealCL, ScenarioKind::RealCL] {
        let mut config = RunConfig::new("separable.cleb");
        config.scenario = scenario;
        config.tasks = Some(5);
        config.memory = 100;
        config.seeds = vec![1];
        let outcomes = run_in_memory(&store, "h", &config).unwrap();
        let a = outcomes[0].record.metrics.last_task_accuracy;
        assert!(a >= 0.99, "{scenario}: A_K {a}");
    }
}

#[test]
fn experiment_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("syn.cleb");
    common::store(5, 12, 4, 6, 9).save(&store_path).unwrap();

    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut c = quick_config(&store_path, &out);
        c.scenario = ScenarioKind::SemiRealCL;
        c.strategy = Strategy::FineTune;
        c.dump_memory = true;
        c.save_models = true;
        run_experiment(&c).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    for seed in [3, 4] {
        let json = format!("run_seed{seed}.json");
        assert_eq!(without_timestamp(&a.join(&json)), without_timestamp(&b.join(&json)));
        for file in [format!("stream_seed{seed}.toml"), format!("model_seed{seed}.cldn")] {
            assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap(), "{file}");
        }
        let manifest = fs::read_to_string(a.join(format!("stream_seed{seed}.toml"))).unwrap();
        assert_eq!(manifest.matches("after_task").count(), 3);
    }
    assert_eq!(fs::read(a.join("aggregate.csv")).unwrap(), fs::read(b.join("aggregate.csv")).unwrap());

    let record = without_timestamp(&a.join("run_seed3.json"));
    let config = RunConfig::load(a.join("config.toml")).unwrap();
    assert_eq!(record.config_hash, config.hash().unwrap());
    assert_eq!(record.store_hash, clare::runner::hash_bytes(&fs::read(&store_path).unwrap()));
}

#[test]
fn report_has_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("syn.cleb");
    common::store(4, 10, 3, 4, 2).save(&store_path).unwrap();
    let runs = dir.path().join("runs");
    for memory in [20, 40] {
        let mut c = quick_config(&store_path, &runs.join(format!("m{memory}")));
        c.memory = memory;
        run_experiment(&c).unwrap();
    }
    let csv_path = dir.path().join("all.csv");
    let rows = report(&runs, &csv_path).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.aggregate.runs == 2));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 16);
    let memories: Vec<String> = reader.records().map(|r| r.unwrap()[2].to_owned()).collect();
    assert_eq!(memories, ["20", "40"]);
}

#[test]
fn unreadable_store_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick_config(&dir.path().join("missing.cleb"), dir.path());
    assert!(matches!(run_experiment(&c), Err(clare::Error::Io(_))));
}
