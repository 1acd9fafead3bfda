//! Task-stream generation.
//!
//! A stream partitions the training split of a store into `K` tasks. The
//! three generators differ only in how samples are assigned:
//!
//! * [`gen_unrealistic`]: shuffled classes in balanced, disjoint groups.
//! * [`gen_semireal`]: every class goes to a uniformly random task, so groups
//!   are disjoint but unbalanced.
//! * [`gen_realcl`]: samples (not classes) are permuted and cut into chunks,
//!   so classes may recur in several tasks.
//!
//! All three produce valid RealCL streams: each training sample lands in
//! exactly one task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::memory::MemorySnapshot;
use crate::seed::{self, Stream};

/// Whole-assignment redraws in [`gen_semireal`] before it switches to
/// [`surjective_assignment`].
pub const SEMIREAL_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "unreal")]
    Unrealistic,
    #[serde(rename = "semireal")]
    SemiRealCL,
    #[serde(rename = "real")]
    RealCL,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Unrealistic => "unreal",
            ScenarioKind::SemiRealCL => "semireal",
            ScenarioKind::RealCL => "real",
        }
    }

    /// Unrealistic and SemiRealCL streams are class-incremental.
    pub fn is_class_incremental(self) -> bool {
        !matches!(self, ScenarioKind::RealCL)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unreal" | "unrealistic" => Ok(ScenarioKind::Unrealistic),
            "semireal" | "semirealcl" => Ok(ScenarioKind::SemiRealCL),
            "real" | "realcl" => Ok(ScenarioKind::RealCL),
            other => Err(Error::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}

/// One task: its training sample ids and the labels they carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    index: usize,
    train_ids: Vec<u32>,
    label_space: BTreeSet<u16>,
}

impl TaskSpec {
    /// `index` is 1-based. Ids are sorted; the label space is read off the store.
    pub fn new(index: usize, mut train_ids: Vec<u32>, store: &EmbeddingStore) -> Result<Self> {
        train_ids.sort_unstable();
        let label_space = train_ids
            .iter()
            .map(|&id| store.require(id).map(|r| r.label))
            .collect::<Result<_>>()?;
        Ok(Self { index, train_ids, label_space })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn train_ids(&self) -> &[u32] {
        &self.train_ids
    }

    pub fn label_space(&self) -> &BTreeSet<u16> {
        &self.label_space
    }

    pub fn len(&self) -> usize {
        self.train_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStream {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            kind: self.kind,
            tasks_count: self.tasks.len(),
            seed: self.seed,
            tasks: self.tasks.iter().map(|t| t.train_ids.clone()).collect(),
            memory: Vec::new(),
        }
    }
}

/// Cumulative seen-class sets: `seen[k-1]` is the union of the first `k` label spaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeenClasses(pub Vec<BTreeSet<u16>>);

impl SeenClasses {
    /// Seen classes after task `k` (1-based).
    pub fn after(&self, k: usize) -> &BTreeSet<u16> {
        &self.0[k - 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.0.iter().map(BTreeSet::len).collect()
    }
}

pub fn seen_classes(stream: &TaskStream) -> SeenClasses {
    let mut acc = BTreeSet::new();
    SeenClasses(
        stream
            .tasks
            .iter()
            .map(|t| {
                acc.extend(t.label_space.iter().copied());
                acc.clone()
            })
            .collect(),
    )
}

/// Training ids grouped by label, ids ascending within a class.
fn train_by_class(store: &EmbeddingStore) -> BTreeMap<u16, Vec<u32>> {
    let mut out: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for r in store.train() {
        out.entry(r.label).or_default().push(r.sample_id);
    }
    for ids in out.values_mut() {
        ids.sort_unstable();
    }
    out
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("the number of tasks must be at least 1".into()));
    }
    Ok(())
}

fn scenario_rng(seed: u64) -> seed::Rng {
    seed::derived_rng(seed, Stream::Scenario, 0)
}

fn stream_from_groups(
    kind: ScenarioKind,
    seed: u64,
    groups: Vec<Vec<u16>>,
    by_class: &BTreeMap<u16, Vec<u32>>,
    store: &EmbeddingStore,
) -> Result<TaskStream> {
    let tasks = groups
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let ids = classes.iter().flat_map(|c| by_class[c].iter().copied()).collect();
            TaskSpec::new(i + 1, ids, store)
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream { kind, seed, tasks })
}

/// Sizes of `k` near-equal parts of `n`; the first `n % k` parts get one extra.
pub fn balanced_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Balanced class-incremental stream.
pub fn gen_unrealistic(store: &EmbeddingStore, k: usize, seed: u64) -> Result<TaskStream> {
    check_k(k)?;
    let by_class = train_by_class(store);
    let c = by_class.len();
    if c < k {
        return Err(Error::InvalidConfig(format!("{c} classes cannot fill {k} class-disjoint tasks")));
    }
    let mut classes: Vec<u16> = by_class.keys().copied().collect();
    classes.shuffle(&mut scenario_rng(seed));
    let mut rest = classes.as_slice();
    let groups = balanced_sizes(c, k)
        .into_iter()
        .map(|n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect();
    stream_from_groups(ScenarioKind::Unrealistic, seed, groups, &by_class, store)
}

/// Class-incremental stream with a uniformly random class-to-task assignment,
/// redrawn until no task is empty.
///
/// When `C` is close to `K` a valid draw is rare (`K!/K^K` for `C = K`), so
/// after [`SEMIREAL_REDRAWS`] failures the assignment is drawn directly from
/// the same conditional distribution.
pub fn gen_semireal(store: &EmbeddingStore, k: usize, seed: u64) -> Result<TaskStream> {
    check_k(k)?;
    let by_class = train_by_class(store);
    let c = by_class.len();
    if c < k {
        return Err(Error::InvalidConfig(format!("{c} classes cannot fill {k} class-disjoint tasks")));
    }
    let mut rng = scenario_rng(seed);
    let mut assignment = None;
    for _ in 0..SEMIREAL_REDRAWS {
        let draw: Vec<usize> = (0..c).map(|_| rng.random_range(0..k)).collect();
        let mut hit = vec![false; k];
        draw.iter().for_each(|&t| hit[t] = true);
        if hit.iter().all(|&h| h) {
            assignment = Some(draw);
            break;
        }
    }
    let assignment = assignment.unwrap_or_else(|| surjective_assignment(c, k, &mut rng));
    let mut groups = vec![Vec::new(); k];
    for (&class, &task) in by_class.keys().zip(&assignment) {
        groups[task].push(class);
    }
    stream_from_groups(ScenarioKind::SemiRealCL, seed, groups, &by_class, store)
}

/// Task index for each of `c` items, uniform over the assignments into `k`
/// tasks that leave no task empty.
///
/// Items are placed one at a time; an item goes to a still-empty task with
/// probability proportional to the number of ways the remaining items can
/// then cover the remaining empty tasks.
pub fn surjective_assignment(c: usize, k: usize, rng: &mut seed::Rng) -> Vec<usize> {
    assert!(k >= 1 && c >= k, "{c} items cannot cover {k} tasks");
    // ways[r][e]: assignments of r items into k tasks that cover e given tasks,
    // rescaled per row (only ratios within a row are used)
    let mut ways = vec![vec![0.0f64; k + 1]; c + 1];
    ways[0][0] = 1.0;
    for r in 1..=c {
        for e in 0..=k {
            let into_empty = if e > 0 { e as f64 * ways[r - 1][e - 1] } else { 0.0 };
            ways[r][e] = into_empty + (k - e) as f64 * ways[r - 1][e];
        }
        let max = ways[r].iter().copied().fold(0.0, f64::max);
        ways[r].iter_mut().for_each(|w| *w /= max);
    }
    let mut empty: Vec<usize> = (0..k).collect();
    let mut used: Vec<usize> = Vec::with_capacity(k);
    (0..c)
        .map(|i| {
            let rest = c - i - 1;
            let e = empty.len();
            let to_empty = if e > 0 { e as f64 * ways[rest][e - 1] } else { 0.0 };
            let to_used = (k - e) as f64 * ways[rest][e];
            if rng.random::<f64>() * (to_empty + to_used) < to_empty {
                let task = empty.swap_remove(rng.random_range(0..e));
                used.push(task);
                task
            } else {
                used[rng.random_range(0..used.len())]
            }
        })
        .collect()
}

/// Fully random stream: a permutation of the training split cut into near-equal chunks.
pub fn gen_realcl(store: &EmbeddingStore, k: usize, seed: u64) -> Result<TaskStream> {
    check_k(k)?;
    let mut ids: Vec<u32> = store.train().map(|r| r.sample_id).collect();
    if ids.len() < k {
        return Err(Error::InvalidConfig(format!("{} training samples cannot fill {k} tasks", ids.len())));
    }
    ids.sort_unstable();
    ids.shuffle(&mut scenario_rng(seed));
    let mut rest = ids.as_slice();
    let tasks = balanced_sizes(ids.len(), k)
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            TaskSpec::new(i + 1, head.to_vec(), store)
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream { kind: ScenarioKind::RealCL, seed, tasks })
}

pub fn generate(kind: ScenarioKind, store: &EmbeddingStore, k: usize, seed: u64) -> Result<TaskStream> {
    match kind {
        ScenarioKind::Unrealistic => gen_unrealistic(store, k, seed),
        ScenarioKind::SemiRealCL => gen_semireal(store, k, seed),
        ScenarioKind::RealCL => gen_realcl(store, k, seed),
    }
}

/// Serializable description of a stream, optionally with memory snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub kind: ScenarioKind,
    #[serde(rename = "k")]
    pub tasks_count: usize,
    pub seed: u64,
    pub tasks: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory: Vec<MemorySnapshot>,
}

impl StreamManifest {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// SHA-256 over the TOML of the stream part only; memory snapshots do not
    /// change the hash.
    pub fn hash(&self) -> Result<String> {
        let stream_only = StreamManifest { memory: Vec::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(stream_only.to_toml()?.as_bytes())))
    }

    pub fn to_stream(&self, store: &EmbeddingStore) -> Result<TaskStream> {
        if self.tasks.len() != self.tasks_count {
            return Err(Error::Data(format!(
                "manifest declares k = {} but lists {} tasks",
                self.tasks_count,
                self.tasks.len()
            )));
        }
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, ids)| TaskSpec::new(i + 1, ids.clone(), store))
            .collect::<Result<_>>()?;
        Ok(TaskStream { kind: self.kind, seed: self.seed, tasks })
    }
}
