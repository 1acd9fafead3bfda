//! Experiment orchestration.
//!
//! For every seed: build the task stream, then for each task update the
//! memory, grow the network to the classes seen so far, train on the memory
//! and evaluate one row of the accuracy matrix. Per-seed records go to JSON,
//! the cross-seed aggregate to CSV. Seeds run in parallel; each seed is
//! single-threaded and fully determined by `(store, config, seed)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynnan::DynNan;
use crate::embedstore::{EmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::memory::{MemoryBuffer, MemoryPolicy};
use crate::metrics::{aggregate_runs, compute_metrics, AccuracyMatrix, AggregateMetrics, MeanStd, Predictions, RunMetrics};
use crate::optim::{train_task, OptimConfig, Strategy};
use crate::scenario::{self, seen_classes, ScenarioKind, StreamManifest, TaskStream};
use crate::seed::{self, Stream};

pub const AGGREGATE_CSV: &str = "aggregate.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store_path: PathBuf,
    /// Name used in reports; defaults to the store's file stem.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_scenario")]
    pub scenario: ScenarioKind,
    /// Number of tasks; defaults by dataset name (see [`default_tasks`]).
    #[serde(default)]
    pub tasks: Option<usize>,
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default)]
    pub policy: MemoryPolicy,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Append memory snapshots after every task to the stream manifests.
    #[serde(default)]
    pub dump_memory: bool,
    /// Write the final model of each seed.
    #[serde(default)]
    pub save_models: bool,
}

fn default_scenario() -> ScenarioKind {
    ScenarioKind::RealCL
}

fn default_memory() -> usize {
    1000
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// 20 tasks for CIFAR-100 and TinyImageNet, 5 otherwise.
pub fn default_tasks(dataset: &str) -> usize {
    let name = dataset.to_ascii_lowercase().replace(['-', '_'], "");
    if name.contains("cifar100") || name.contains("tiny") {
        20
    } else {
        5
    }
}

impl RunConfig {
    pub fn new(store_path: impl Into<PathBuf>) -> Self {
        Self {
            store_path: store_path.into(),
            dataset: None,
            scenario: default_scenario(),
            tasks: None,
            memory: default_memory(),
            policy: MemoryPolicy::default(),
            strategy: Strategy::default(),
            optim: OptimConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output(),
            dump_memory: false,
            save_models: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            self.store_path.file_stem().map_or_else(|| "store".to_owned(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.unwrap_or_else(|| default_tasks(&self.dataset_name()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_count() == 0 {
            return Err(Error::InvalidConfig("tasks must be at least 1".into()));
        }
        if self.memory == 0 {
            return Err(Error::InvalidConfig("memory must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.optim.validate()
    }

    /// SHA-256 of the experiment definition. The output directory and the
    /// audit switches are excluded; the task count is resolved first.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig {
            tasks: Some(self.task_count()),
            dataset: Some(self.dataset_name()),
            output_dir: PathBuf::new(),
            dump_memory: false,
            save_models: false,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoTasks,
    EmptyTask(usize),
    IndexOutOfOrder { position: usize, index: usize },
    UnknownSample { task: usize, sample_id: u32 },
    NotTraining { task: usize, sample_id: u32 },
    DuplicateSample { sample_id: u32, first: usize, second: usize },
    MissingSample(u32),
    SharedClass { class: u16, first: usize, second: usize },
    Unbalanced { sizes: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoTasks => write!(f, "stream has no tasks"),
            Violation::EmptyTask(k) => write!(f, "task {k} is empty"),
            Violation::IndexOutOfOrder { position, index } => {
                write!(f, "task at position {position} carries index {index}")
            }
            Violation::UnknownSample { task, sample_id } => write!(f, "task {task} references unknown sample {sample_id}"),
            Violation::NotTraining { task, sample_id } => {
                write!(f, "task {task} references sample {sample_id} outside the training split")
            }
            Violation::DuplicateSample { sample_id, first, second } => {
                write!(f, "sample in two tasks: {sample_id} in tasks {first} and {second}")
            }
            Violation::MissingSample(id) => write!(f, "training sample {id} belongs to no task"),
            Violation::SharedClass { class, first, second } => {
                write!(f, "class {class} appears in tasks {first} and {second} of a class-incremental stream")
            }
            Violation::Unbalanced { sizes } => write!(f, "unbalanced class groups {sizes:?}"),
        }
    }
}

/// Checks the RealCL invariants for every stream, label-space disjointness
/// for the class-incremental kinds and ±1 class balance for the unrealistic kind.
pub fn validate_stream(stream: &TaskStream, store: &EmbeddingStore) -> Vec<Violation> {
    let mut out = Vec::new();
    if stream.tasks.is_empty() {
        out.push(Violation::NoTasks);
    }
    let mut owner: HashMap<u32, usize> = HashMap::new();
    for (pos, task) in stream.tasks.iter().enumerate() {
        let k = task.index();
        if k != pos + 1 {
            out.push(Violation::IndexOutOfOrder { position: pos + 1, index: k });
        }
        if task.is_empty() {
            out.push(Violation::EmptyTask(k));
        }
        for &id in task.train_ids() {
            match store.get(id) {
                None => out.push(Violation::UnknownSample { task: k, sample_id: id }),
                Some(r) if r.split != Split::Train => out.push(Violation::NotTraining { task: k, sample_id: id }),
                Some(_) => {}
            }
            if let Some(&first) = owner.get(&id) {
                out.push(Violation::DuplicateSample { sample_id: id, first, second: k });
            } else {
                owner.insert(id, k);
            }
        }
    }
    let mut missing: Vec<u32> = store.train().map(|r| r.sample_id).filter(|id| !owner.contains_key(id)).collect();
    missing.sort_unstable();
    out.extend(missing.into_iter().map(Violation::MissingSample));

    if stream.kind.is_class_incremental() {
        let mut class_owner: BTreeMap<u16, usize> = BTreeMap::new();
        for task in &stream.tasks {
            for &c in task.label_space() {
                if let Some(&first) = class_owner.get(&c) {
                    out.push(Violation::SharedClass { class: c, first, second: task.index() });
                } else {
                    class_owner.insert(c, task.index());
                }
            }
        }
    }
    if stream.kind == ScenarioKind::Unrealistic {
        let sizes: Vec<usize> = stream.tasks.iter().map(|t| t.label_space().len()).collect();
        if let (Some(min), Some(max)) = (sizes.iter().min(), sizes.iter().max()) {
            if max - min > 1 {
                out.push(Violation::Unbalanced { sizes });
            }
        }
    }
    out
}

/// Everything one seed produced, as written to `run_seed<seed>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub store_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub scenario: ScenarioKind,
    pub tasks: usize,
    pub memory: usize,
    pub policy: MemoryPolicy,
    pub strategy: Strategy,
    pub optim: OptimConfig,
    pub seen_classes: Vec<usize>,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub metrics: RunMetrics,
    /// Unix seconds; not covered by any hash.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub record: RunRecord,
    pub manifest: StreamManifest,
    pub model: DynNan<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateMetrics,
}

/// Runs one seed of an experiment on an already loaded store.
pub fn run_seed(store: &EmbeddingStore, store_hash: &str, config: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    config.validate()?;
    let k_total = config.task_count();
    let stream = scenario::generate(config.scenario, store, k_total, seed)?;
    let violations = validate_stream(&stream, store);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Data(format!("generated stream is invalid: {}", list.join("; "))));
    }
    let seen = seen_classes(&stream);
    let mut manifest = stream.manifest();
    let manifest_hash = manifest.hash()?;

    let mut buffer = MemoryBuffer::new(config.memory, config.policy)?;
    let mut memory_rng = seed::derived_rng(seed, Stream::Memory, 0);
    let mut matrix = AccuracyMatrix::new(k_total);
    let mut model: Option<DynNan<f32>> = None;

    for task in &stream.tasks {
        let k = task.index();
        buffer.update(task, store, &mut memory_rng)?;
        if config.dump_memory {
            manifest.memory.push(buffer.snapshot());
        }
        let classes: Vec<u16> = seen.after(k).iter().copied().collect();
        let net = match model.as_mut() {
            None => model.insert(DynNan::init(store.dim(), &classes, seed::derive(seed, Stream::Init, 0))?),
            Some(net) => {
                let known: BTreeSet<u16> = net.classes().iter().copied().collect();
                let new: Vec<u16> = classes.iter().copied().filter(|c| !known.contains(c)).collect();
                net.expand(&new, seed::derive(seed, Stream::Expand, k as u64))?;
                net
            }
        };
        let set = buffer.as_training_set(store)?;
        let report = train_task(net, &set, &config.optim, config.strategy, seed, k)?;
        let predictions = Predictions::compute(net, store, seen.after(k))?;
        for earlier in 1..=k {
            matrix.set(k, earlier, predictions.accuracy_on(seen.after(earlier))?)?;
        }
        log::info!(
            "seed {seed} task {k}/{k_total}: {} classes, buffer {}, final loss {:.4}, A_k {:.4}",
            classes.len(),
            buffer.len(),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            matrix.get(k, k).unwrap_or(f64::NAN)
        );
    }

    let metrics = compute_metrics(&matrix)?;
    let record = RunRecord {
        config_hash: config.hash()?,
        store_hash: store_hash.to_owned(),
        manifest_hash,
        seed,
        dataset: config.dataset_name(),
        scenario: config.scenario,
        tasks: k_total,
        memory: config.memory,
        policy: config.policy,
        strategy: config.strategy,
        optim: config.optim.clone(),
        seen_classes: seen.sizes(),
        accuracy_matrix: matrix.to_rows()?,
        metrics,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let model = model.ok_or_else(|| Error::InvalidConfig("stream has no tasks".into()))?;
    Ok(SeedOutcome { record, manifest, model })
}

/// Runs all seeds in memory without touching the filesystem.
pub fn run_in_memory(store: &EmbeddingStore, store_hash: &str, config: &RunConfig) -> Result<Vec<SeedOutcome>> {
    config.validate()?;
    config.seeds.par_iter().map(|&s| run_seed(store, store_hash, config, s)).collect()
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads the store, runs every seed and writes the per-seed JSON records,
/// stream manifests and the aggregate CSV into `config.output_dir`.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let bytes = fs::read(&config.store_path)?;
    let store_hash = hash_bytes(&bytes);
    let store = EmbeddingStore::from_bytes(&bytes)?;
    let outcomes = run_in_memory(&store, &store_hash, config)?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), toml::to_string(config)?)?;
    for o in &outcomes {
        let seed = o.record.seed;
        fs::write(dir.join(format!("run_seed{seed}.json")), record_json(&o.record)?)?;
        fs::write(dir.join(format!("stream_seed{seed}.toml")), o.manifest.to_toml()?)?;
        if config.save_models {
            let mut file = fs::File::create(dir.join(format!("model_seed{seed}.cldn")))?;
            o.model.write_snapshot(&mut file)?;
        }
    }
    let records: Vec<RunRecord> = outcomes.into_iter().map(|o| o.record).collect();
    let rows = aggregate_records(&records)?;
    write_aggregate_csv(&dir.join(AGGREGATE_CSV), &rows)?;
    let aggregate = rows.into_iter().next().expect("one configuration").aggregate;
    Ok(ExperimentReport { records, aggregate })
}

pub fn record_json(record: &RunRecord) -> Result<String> {
    Ok(serde_json::to_string_pretty(record)? + "\n")
}

/// One configuration's aggregate, as one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub config_hash: String,
    pub dataset: String,
    pub scenario: ScenarioKind,
    pub memory: usize,
    pub tasks: usize,
    pub strategy: Strategy,
    pub policy: MemoryPolicy,
    pub aggregate: AggregateMetrics,
}

/// Groups records by configuration hash and aggregates each group.
/// Rows come out sorted by (dataset, scenario, memory, tasks, strategy, policy, hash).
pub fn aggregate_records(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.config_hash).or_default().push(r);
    }
    let mut rows = groups
        .into_values()
        .map(|group| {
            let mut group = group;
            group.sort_by_key(|r| r.seed);
            let first = group[0];
            let metrics: Vec<RunMetrics> = group.iter().map(|r| r.metrics.clone()).collect();
            Ok(AggregateRow {
                config_hash: first.config_hash.clone(),
                dataset: first.dataset.clone(),
                scenario: first.scenario,
                memory: first.memory,
                tasks: first.tasks,
                strategy: first.strategy,
                policy: first.policy,
                aggregate: aggregate_runs(&metrics)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (&a.dataset, a.scenario.as_str(), a.memory, a.tasks, a.strategy.to_string(), a.policy.to_string(), &a.config_hash)
            .cmp(&(&b.dataset, b.scenario.as_str(), b.memory, b.tasks, b.strategy.to_string(), b.policy.to_string(), &b.config_hash))
    });
    Ok(rows)
}

const CSV_HEADER: [&str; 16] = [
    "dataset",
    "scenario",
    "memory",
    "tasks",
    "strategy",
    "policy",
    "runs",
    "last_task_accuracy",
    "last_task_accuracy_std",
    "average_accuracy",
    "average_accuracy_std",
    "avg_global_forgetting",
    "avg_global_forgetting_std",
    "avg_task_forgetting",
    "avg_task_forgetting_std",
    "config_hash",
];

/// Writes aggregate rows; metrics are percentages with two decimals.
pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    let pct = |m: &MeanStd| [format!("{:.2}", 100.0 * m.mean), format!("{:.2}", 100.0 * m.std)];
    for row in rows {
        let a = &row.aggregate;
        let mut fields = vec![
            row.dataset.clone(),
            row.scenario.to_string(),
            row.memory.to_string(),
            row.tasks.to_string(),
            row.strategy.to_string(),
            row.policy.to_string(),
            a.runs.to_string(),
        ];
        for m in [&a.last_task_accuracy, &a.average_accuracy, &a.avg_global_forgetting, &a.avg_task_forgetting] {
            fields.extend(pct(m));
        }
        fields.push(row.config_hash.clone());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every `run_seed*.json` below `dir`, recursively.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                pending.push(path);
            } else if path.extension().is_some_and(|x| x == "json")
                && path.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_seed"))
            {
                out.push(serde_json::from_str(&fs::read_to_string(&path)?)?);
            }
        }
    }
    Ok(out)
}

/// Re-aggregates a directory tree of run records into one CSV.
pub fn report(dir: &Path, csv_path: &Path) -> Result<Vec<AggregateRow>> {
    let records = collect_records(dir)?;
    if records.is_empty() {
        return Err(Error::Aggregation(format!("no run records under {}", dir.display())));
    }
    let rows = aggregate_records(&records)?;
    write_aggregate_csv(csv_path, &rows)?;
    Ok(rows)
}
