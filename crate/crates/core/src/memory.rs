//! Capacity-bounded rehearsal memory.
//!
//! The buffer is the only training data the learner sees. When a task
//! arrives, the candidates for each class are the entries already held for
//! it plus the task's samples of that class; the buffer is then refilled
//! class by class under balanced quotas (see [`class_quotas`]).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::scenario::TaskSpec;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryPolicy {
    /// Uniform sampling without replacement inside each class.
    #[default]
    Random,
    /// Greedy mean-matching selection inside each class.
    Herding,
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryPolicy::Random => "random",
            MemoryPolicy::Herding => "herding",
        })
    }
}

impl FromStr for MemoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MemoryPolicy::Random),
            "herding" => Ok(MemoryPolicy::Herding),
            other => Err(Error::InvalidConfig(format!("unknown memory policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemoryEntry {
    pub sample_id: u32,
    pub label: u16,
    /// 1-based index of the task the sample arrived with.
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub after_task: usize,
    /// `[task, sample_id, label]`, sorted.
    pub entries: Vec<[u32; 3]>,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    policy: MemoryPolicy,
    entries: Vec<MemoryEntry>,
    tasks_seen: usize,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, policy: MemoryPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("memory capacity must be at least 1".into()));
        }
        Ok(Self { capacity, policy, entries: Vec::new(), tasks_seen: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    /// Entries sorted by (label, sample id).
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks_seen
    }

    /// Number of entries per class.
    pub fn class_counts(&self) -> BTreeMap<u16, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.label).or_default() += 1;
        }
        out
    }

    /// Folds a newly arrived task into the buffer.
    pub fn update(&mut self, task: &TaskSpec, store: &EmbeddingStore, rng: &mut Rng) -> Result<()> {
        let held: HashSet<u32> = self.entries.iter().map(|e| e.sample_id).collect();
        let mut candidates: BTreeMap<u16, Vec<MemoryEntry>> = BTreeMap::new();
        for e in &self.entries {
            candidates.entry(e.label).or_default().push(*e);
        }
        for &id in task.train_ids() {
            let rec = store.require(id)?;
            if held.contains(&id) {
                continue;
            }
            candidates
                .entry(rec.label)
                .or_default()
                .push(MemoryEntry { sample_id: id, label: rec.label, task: task.index() });
        }
        for list in candidates.values_mut() {
            list.sort_by_key(|e| e.sample_id);
        }

        let available: BTreeMap<u16, usize> = candidates.iter().map(|(&c, v)| (c, v.len())).collect();
        let quotas = class_quotas(self.capacity, &available);

        let mut next = Vec::with_capacity(self.capacity);
        for (class, list) in candidates {
            let quota = quotas[&class];
            if quota == list.len() {
                next.extend(list);
                continue;
            }
            let mut chosen: Vec<MemoryEntry> = match self.policy {
                MemoryPolicy::Random => rand::seq::index::sample(rng, list.len(), quota)
                    .into_iter()
                    .map(|i| list[i])
                    .collect(),
                MemoryPolicy::Herding => {
                    let vectors = list
                        .iter()
                        .map(|e| store.require(e.sample_id).map(|r| (e.sample_id, r.vector.as_slice())))
                        .collect::<Result<Vec<_>>>()?;
                    let ids = herding_select(&vectors, quota)?;
                    let by_id: BTreeMap<u32, MemoryEntry> = list.iter().map(|e| (e.sample_id, *e)).collect();
                    ids.into_iter().map(|id| by_id[&id]).collect()
                }
            };
            chosen.sort_by_key(|e| e.sample_id);
            next.extend(chosen);
        }
        self.entries = next;
        self.tasks_seen = self.tasks_seen.max(task.index());
        Ok(())
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let mut entries: Vec<[u32; 3]> = self
            .entries
            .iter()
            .map(|e| [e.task as u32, e.sample_id, u32::from(e.label)])
            .collect();
        entries.sort_unstable();
        MemorySnapshot { after_task: self.tasks_seen, entries }
    }

    /// Materializes the buffer's embeddings, in entry order.
    pub fn as_training_set(&self, store: &EmbeddingStore) -> Result<TrainingSet> {
        let mut set = TrainingSet::with_capacity(store.dim(), self.entries.len());
        for e in &self.entries {
            let rec = store.require(e.sample_id)?;
            if rec.label != e.label {
                return Err(Error::Data(format!(
                    "buffer holds sample {} as class {} but the store says {}",
                    e.sample_id, e.label, rec.label
                )));
            }
            set.push(&rec.vector, rec.label);
        }
        Ok(set)
    }
}

/// Per-class quotas summing to `min(capacity, total available)`.
///
/// Water-filling: an even split `⌊B/n⌋` of the remaining budget `B` over the
/// `n` unresolved classes; classes that cannot fill it are capped at what they
/// have and the slack is split again among the rest. Once every remaining
/// class can take its share, the `B mod n` leftover slots go one each to the
/// classes with the most available samples, ties to the lower class index.
pub fn class_quotas(capacity: usize, available: &BTreeMap<u16, usize>) -> BTreeMap<u16, usize> {
    let mut quotas: BTreeMap<u16, usize> = BTreeMap::new();
    let mut open: Vec<(u16, usize)> = available.iter().map(|(&c, &n)| (c, n)).collect();
    let mut budget = capacity;
    while !open.is_empty() {
        let share = budget / open.len();
        let (short, rest): (Vec<_>, Vec<_>) = open.iter().partition(|&&(_, n)| n <= share);
        if short.is_empty() {
            let extra = budget % open.len();
            let mut order = open.clone();
            order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            for (i, (class, _)) in order.into_iter().enumerate() {
                quotas.insert(class, share + usize::from(i < extra));
            }
            break;
        }
        for (class, n) in short {
            quotas.insert(class, n);
            budget -= n;
        }
        open = rest;
    }
    quotas
}

/// Greedy herding: repeatedly picks the sample that keeps the mean of the
/// selection closest (L2) to the mean of all samples. Returns ids in
/// selection order; exact ties go to the lower sample id.
pub fn herding_select(class_vectors: &[(u32, &[f32])], m: usize) -> Result<Vec<u32>> {
    if m > class_vectors.len() {
        return Err(Error::InvalidQuota { requested: m, available: class_vectors.len() });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let dim = class_vectors[0].1.len();
    let n = class_vectors.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for (_, v) in class_vectors {
        for (acc, x) in mean.iter_mut().zip(v.iter()) {
            *acc += f64::from(*x);
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);

    let mut order: Vec<usize> = (0..class_vectors.len()).collect();
    order.sort_by_key(|&i| class_vectors[i].0);

    let mut taken = vec![false; class_vectors.len()];
    let mut running = vec![0.0f64; dim];
    let mut selected = Vec::with_capacity(m);
    for step in 0..m {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for &i in &order {
            if taken[i] {
                continue;
            }
            let dist: f64 = class_vectors[i]
                .1
                .iter()
                .zip(&running)
                .zip(&mean)
                .map(|((x, s), mu)| {
                    let d = mu - (s + f64::from(*x)) / denom;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("m <= available leaves a candidate");
        taken[pick] = true;
        for (s, x) in running.iter_mut().zip(class_vectors[pick].1) {
            *s += f64::from(*x);
        }
        selected.push(class_vectors[pick].0);
    }
    Ok(selected)
}

/// Row-major feature matrix with labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u16>,
}

impl TrainingSet {
    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self { dim, features: Vec::with_capacity(dim * n), labels: Vec::with_capacity(n) }
    }

    pub fn from_pairs<'a>(dim: usize, pairs: impl IntoIterator<Item = (&'a [f32], u16)>) -> Result<Self> {
        let mut set = Self::with_capacity(dim, 0);
        for (v, label) in pairs {
            if v.len() != dim {
                return Err(Error::Shape { expected: dim, actual: v.len() });
            }
            set.push(v, label);
        }
        Ok(set)
    }

    pub fn push(&mut self, vector: &[f32], label: u16) {
        debug_assert_eq!(vector.len(), self.dim);
        self.features.extend_from_slice(vector);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{generate_synthetic, EmbeddingRecord, Split, SynthSpec};
    use crate::scenario::{gen_realcl, gen_unrealistic};
    use crate::seed;

    fn store(classes: usize, per_class: usize) -> EmbeddingStore {
        generate_synthetic(&SynthSpec {
            num_classes: classes,
            dim: 4,
            train_per_class: per_class,
            test_per_class: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn first_task_fills_evenly() {
        let s = store(5, 100);
        let stream = gen_unrealistic(&s, 1, 0).unwrap();
        let mut buf = MemoryBuffer::new(10, MemoryPolicy::Random).unwrap();
        buf.update(&stream.tasks[0], &s, &mut seed::rng(1)).unwrap();
        assert_eq!(buf.len(), 10);
        assert!(buf.class_counts().values().all(|&n| n == 2));
    }

    #[test]
    fn quota_shrinks_when_new_classes_arrive() {
        let s = store(10, 100);
        let stream = gen_unrealistic(&s, 2, 0).unwrap();
        let mut buf = MemoryBuffer::new(10, MemoryPolicy::Random).unwrap();
        let mut rng = seed::rng(1);
        buf.update(&stream.tasks[0], &s, &mut rng).unwrap();
        assert!(buf.class_counts().values().all(|&n| n == 2));
        buf.update(&stream.tasks[1], &s, &mut rng).unwrap();
        let counts = buf.class_counts();
        assert_eq!(buf.len(), 10);
        assert_eq!(counts.len(), 10);
        assert!(counts.values().all(|&n| n == 1));
    }

    #[test]
    fn recurring_class_mixes_tasks() {
        let s = store(4, 200);
        let stream = gen_realcl(&s, 4, 3).unwrap();
        let mut buf = MemoryBuffer::new(400, MemoryPolicy::Random).unwrap();
        let mut rng = seed::rng(2);
        for t in &stream.tasks {
            buf.update(t, &s, &mut rng).unwrap();
        }
        let tasks_of_class3: std::collections::BTreeSet<usize> =
            buf.entries().iter().filter(|e| e.label == 3).map(|e| e.task).collect();
        assert!(tasks_of_class3.contains(&1));
        assert!(tasks_of_class3.contains(&4));
        for e in buf.entries() {
            assert_eq!(s.get(e.sample_id).unwrap().label, e.label);
        }
    }

    #[test]
    fn quotas_basic() {
        let avail: BTreeMap<u16, usize> = [(0, 100), (1, 100), (2, 100)].into();
        assert_eq!(class_quotas(10, &avail), [(0, 4), (1, 3), (2, 3)].into());
        let avail: BTreeMap<u16, usize> = [(0, 1), (1, 50), (2, 60)].into();
        assert_eq!(class_quotas(10, &avail), [(0, 1), (1, 4), (2, 5)].into());
        let avail: BTreeMap<u16, usize> = [(0, 1), (1, 2)].into();
        assert_eq!(class_quotas(10, &avail), [(0, 1), (1, 2)].into());
    }

    #[test]
    fn herding_all_and_symmetry() {
        let a = [1.0f32, 2.0];
        let b = [-1.0f32, -2.0];
        let c = [0.5f32, 0.0];
        let vs: Vec<(u32, &[f32])> = vec![(9, &a), (4, &b), (6, &c)];
        let all = herding_select(&vs, 3).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![4, 6, 9]);

        let pair: Vec<(u32, &[f32])> = vec![(9, &a), (4, &b)];
        assert_eq!(herding_select(&pair, 1).unwrap(), vec![4]);
        assert!(matches!(herding_select(&pair, 3), Err(Error::InvalidQuota { .. })));
    }

    #[test]
    fn training_set_matches_store() {
        let s = store(3, 10);
        let stream = gen_unrealistic(&s, 1, 0).unwrap();
        let mut buf = MemoryBuffer::new(7, MemoryPolicy::Herding).unwrap();
        assert!(buf.as_training_set(&s).unwrap().is_empty());
        buf.update(&stream.tasks[0], &s, &mut seed::rng(0)).unwrap();
        let set = buf.as_training_set(&s).unwrap();
        assert_eq!(set.len(), 7);
        for (i, e) in buf.entries().iter().enumerate() {
            assert_eq!(set.labels()[i], e.label);
            assert_eq!(set.row(i), s.get(e.sample_id).unwrap().vector.as_slice());
        }
    }

    #[test]
    fn dangling_ids_are_data_errors() {
        let s = store(2, 3);
        let other = EmbeddingStore::new(
            4,
            vec!["x".into()],
            vec![EmbeddingRecord { sample_id: 999, split: Split::Train, label: 0, vector: vec![0.0; 4] }],
        )
        .unwrap();
        let task = TaskSpec::new(1, vec![999], &other).unwrap();
        let mut buf = MemoryBuffer::new(4, MemoryPolicy::Random).unwrap();
        assert!(matches!(buf.update(&task, &s, &mut seed::rng(0)), Err(Error::Data(_))));
    }
}
