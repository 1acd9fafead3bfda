//! Frozen-encoder embeddings and the CLEB-v1 file format.
//!
//! A store is the output of a frozen image encoder: one feature vector per
//! image together with its split, its label and the dataset's class names.
//! Everything downstream (task streams, memory, training, evaluation) works on
//! stores, never on images.
//!
//! # CLEB-v1
//!
//! Little-endian throughout.
//!
//! | offset | type  | field                      |
//! |--------|-------|----------------------------|
//! | 0      | [u8;4]| magic `b"CLEB"`            |
//! | 4      | u32   | version = 1                |
//! | 8      | u32   | dim                        |
//! | 12     | u32   | num_classes                |
//! | 16     | u32   | record count               |
//!
//! followed by `num_classes` names (u16 byte length + UTF-8 bytes) and then
//! `count` records of `u32 sample_id, u8 split, u16 label, dim × f32`.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const MAGIC: [u8; 4] = *b"CLEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(Error::Data(format!("invalid split tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: u32,
    pub split: Split,
    pub label: u16,
    pub vector: Vec<f32>,
}

/// An immutable, validated table of embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    class_names: Vec<String>,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<u32, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.class_names == other.class_names
            && self.records == other.records
    }
}

impl EmbeddingStore {
    /// Builds a store, checking every invariant.
    pub fn new(dim: usize, class_names: Vec<String>, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("dim must be positive".into()));
        }
        if class_names.len() > usize::from(u16::MAX) + 1 {
            return Err(Error::Data(format!("{} classes exceed the u16 label range", class_names.len())));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            if usize::from(r.label) >= class_names.len() {
                return Err(Error::Data(format!(
                    "sample {} has label {} but only {} classes exist",
                    r.sample_id,
                    r.label,
                    class_names.len()
                )));
            }
            if r.vector.len() != dim {
                return Err(Error::Data(format!(
                    "sample {} has {} components, expected {dim}",
                    r.sample_id,
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {} has a non-finite component", r.sample_id)));
            }
            if by_id.insert(r.sample_id, pos).is_some() {
                return Err(Error::Data(format!("duplicate sample id {}", r.sample_id)));
            }
        }
        Ok(Self { dim, class_names, records, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, sample_id: u32) -> Option<&EmbeddingRecord> {
        self.by_id.get(&sample_id).map(|&i| &self.records[i])
    }

    /// Looks up a sample, turning a missing id into a data error.
    pub fn require(&self, sample_id: u32) -> Result<&EmbeddingRecord> {
        self.get(sample_id)
            .ok_or_else(|| Error::Data(format!("sample id {sample_id} is not in the store")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.split(Split::Test)
    }

    /// Writes the store in CLEB-v1 and returns the number of bytes emitted.
    pub fn write_to<W: Write>(&self, sink: &mut W) -> Result<u64> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * (7 + 4 * self.dim));
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&u32_field(self.dim, "dim")?.to_le_bytes());
        buf.extend_from_slice(&u32_field(self.class_names.len(), "num_classes")?.to_le_bytes());
        buf.extend_from_slice(&u32_field(self.records.len(), "record count")?.to_le_bytes());
        for name in &self.class_names {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("class name of {} bytes is too long", name.len())))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for r in &self.records {
            buf.extend_from_slice(&r.sample_id.to_le_bytes());
            buf.push(r.split.to_byte());
            buf.extend_from_slice(&r.label.to_le_bytes());
            for v in &r.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(&buf)?;
        Ok(buf.len() as u64)
    }

    /// Reads a CLEB-v1 store. Trailing bytes after the last record are rejected.
    pub fn read_from<R: Read>(source: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).map_err(|_| Error::Format("file shorter than the magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = cur.u32()? as usize;
        let num_classes = cur.u32()? as usize;
        let count = cur.u32()? as usize;

        let mut class_names = Vec::with_capacity(num_classes.min(1 << 16));
        for _ in 0..num_classes {
            let len = cur.u16()? as usize;
            let raw = cur.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| Error::Data(format!("class name is not UTF-8: {e}")))?;
            class_names.push(name.to_owned());
        }

        let record_len = 7 + 4 * dim;
        let needed = count.saturating_mul(record_len);
        if needed > cur.remaining() {
            return Err(Error::Corrupt(format!(
                "{count} records need {needed} bytes but only {} remain",
                cur.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let sample_id = cur.u32()?;
            let split = Split::from_byte(cur.u8()?)?;
            let label = cur.u16()?;
            let vector = cur
                .take(4 * dim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(EmbeddingRecord { sample_id, split, label, vector });
        }
        if cur.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes after the last record", cur.remaining())));
        }
        Self::new(dim, class_names, records)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<u64> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.write_to(&mut file)?;
        file.flush()?;
        Ok(n)
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!(
                "needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parameters of a synthetic Gaussian-cluster store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mean_radius: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 512,
            train_per_class: 500,
            test_per_class: 100,
            mean_radius: 10.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Generates a store of isotropic Gaussian clusters.
///
/// With `ChaCha8Rng::seed_from_u64(spec.seed)`: first, for each class in
/// order, `dim` standard normals are drawn and scaled to length
/// `mean_radius` (a uniform point on the sphere). Then for each class, its
/// `train_per_class` training samples, and afterwards for each class its
/// `test_per_class` test samples, are drawn as `mean + noise_sigma * N(0, I)`
/// in f64 and rounded to f32. Sample ids count up from 0 in that order;
/// classes are named `class_<i>`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<EmbeddingStore> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidConfig("synthetic counts and dim must be positive".into()));
    }
    if !(spec.mean_radius > 0.0 && spec.noise_sigma > 0.0) {
        return Err(Error::InvalidConfig("mean_radius and noise_sigma must be positive".into()));
    }
    if spec.num_classes > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidConfig("too many classes for u16 labels".into()));
    }
    let mut rng = seed::rng(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            loop {
                let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break v.into_iter().map(|x| x * spec.mean_radius / norm).collect();
                }
            }
        })
        .collect();

    let total = spec.num_classes * (spec.train_per_class + spec.test_per_class);
    let mut records = Vec::with_capacity(total);
    let mut next_id = 0u32;
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let vector = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + spec.noise_sigma * z) as f32
                    })
                    .collect();
                records.push(EmbeddingRecord { sample_id: next_id, split, label: label as u16, vector });
                next_id += 1;
            }
        }
    }
    let names = (0..spec.num_classes).map(|i| format!("class_{i}")).collect();
    EmbeddingStore::new(spec.dim, names, records)
}
