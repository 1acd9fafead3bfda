//! Dynamic Neural Adaptation Network.
//!
//! Three dense layers with ReLU between them. The output layer has one
//! column per class seen so far and grows with [`DynNan::expand`]; columns
//! are ordered by the class map, so the logits are the concatenation of the
//! per-class heads and the prediction is the class of the largest logit.
//!
//! The network is generic over the scalar type. Training uses `f32`; the
//! gradient checks run the same code in `f64`.

use std::collections::HashSet;
use std::fmt::Debug;
use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::NumCast;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::seed::{self, Rng, Stream};

pub const HIDDEN_WIDTH: usize = 1024;

/// Floating-point types the network can run in.
pub trait Scalar: NdFloat + NumCast + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<F: Scalar>(x: f64) -> F {
    <F as NumCast>::from(x).expect("f64 converts to every float type")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `fan_in × fan_out`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    fn uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || cast(rng.random_range(-bound..=bound)));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynNan<F = f32> {
    layers: [Dense<F>; 3],
    classes: Vec<u16>,
}

/// Same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: [Dense<F>; 3],
}

impl<F: Scalar> Gradients<F> {
    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// Activations kept by [`DynNan::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub input: Array2<F>,
    pub hidden1: Array2<F>,
    pub hidden2: Array2<F>,
    pub logits: Array2<F>,
}

/// Per-sample target columns and the mixing weight of the primary target.
///
/// The loss for sample `i` is `λ·CE(primary[i]) + (1−λ)·CE(secondary[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
    pub lambda: f64,
}

impl Targets {
    pub fn plain(columns: Vec<usize>) -> Self {
        Self { secondary: columns.clone(), primary: columns, lambda: 1.0 }
    }

    pub fn mixed(primary: Vec<usize>, secondary: Vec<usize>, lambda: f64) -> Self {
        Self { primary, secondary, lambda }
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }
}

fn relu<F: Scalar>(mut a: Array2<F>) -> Array2<F> {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    a
}

impl<F: Scalar> DynNan<F> {
    /// Reference architecture: `dim → 1024 → 1024 → |classes|`.
    pub fn init(dim: usize, classes: &[u16], seed: u64) -> Result<Self> {
        Self::with_hidden(dim, [HIDDEN_WIDTH, HIDDEN_WIDTH], classes, seed)
    }

    /// Weights uniform in `±1/√fan_in`, drawn layer by layer in row-major
    /// order from `ChaCha8Rng::seed_from_u64(seed)`; biases zero.
    pub fn with_hidden(dim: usize, hidden: [usize; 2], classes: &[u16], seed: u64) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if classes.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one class".into()));
        }
        check_unique(&[], classes)?;
        let mut rng = seed::rng(seed);
        let layers = [
            Dense::uniform(dim, hidden[0], &mut rng),
            Dense::uniform(hidden[0], hidden[1], &mut rng),
            Dense::uniform(hidden[1], classes.len(), &mut rng),
        ];
        Ok(Self { layers, classes: classes.to_vec() })
    }

    /// Builds a model from explicit layers, checking that the shapes chain.
    pub fn from_layers(layers: [Dense<F>; 3], classes: Vec<u16>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape { expected: l.fan_out(), actual: l.bias.len() });
            }
            if i > 0 && l.fan_in() != layers[i - 1].fan_out() {
                return Err(Error::Shape { expected: layers[i - 1].fan_out(), actual: l.fan_in() });
            }
        }
        if layers[2].fan_out() != classes.len() {
            return Err(Error::Shape { expected: classes.len(), actual: layers[2].fan_out() });
        }
        check_unique(&[], &classes)?;
        Ok(Self { layers, classes })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.layers[0].fan_out(), self.layers[1].fan_out()]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Output column → global class id.
    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn column_of(&self, class: u16) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn layers(&self) -> &[Dense<F>; 3] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in the order W1, b1, W2, b2, W3, b3 (row-major).
    pub fn params(&self) -> impl Iterator<Item = &F> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Appends one output column per new class. Existing parameters are not touched.
    pub fn expand(&mut self, new_classes: &[u16], seed: u64) -> Result<()> {
        check_unique(&self.classes, new_classes)?;
        if new_classes.is_empty() {
            return Ok(());
        }
        let head = &self.layers[2];
        let fan_in = head.fan_in();
        let fresh = Dense::<F>::uniform(fan_in, new_classes.len(), &mut seed::derived_rng(seed, Stream::Expand, 0));
        let weight = concatenate(Axis(1), &[head.weight.view(), fresh.weight.view()])
            .expect("row counts agree");
        let bias = concatenate(Axis(0), &[head.bias.view(), fresh.bias.view()]).expect("1-d concat");
        self.layers[2] = Dense { weight, bias };
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }

    /// Re-draws every parameter as [`DynNan::with_hidden`] would, keeping the class map.
    pub fn reinitialize(&mut self, seed: u64) {
        let fresh = Self::with_hidden(self.input_dim(), self.hidden(), &self.classes, seed)
            .expect("current shapes are valid");
        *self = fresh;
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Result<ForwardCache<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), actual: x.ncols() });
        }
        let [l1, l2, l3] = &self.layers;
        let hidden1 = relu(x.dot(&l1.weight) + &l1.bias);
        let hidden2 = relu(hidden1.dot(&l2.weight) + &l2.bias);
        let logits = hidden2.dot(&l3.weight) + &l3.bias;
        Ok(ForwardCache { input: x.to_owned(), hidden1, hidden2, logits })
    }

    pub fn logits(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        Ok(self.forward(x)?.logits)
    }

    /// Mean cross-entropy over the batch plus `weight_decay · ½‖W‖²` over the
    /// weight matrices, and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, F>, targets: &Targets, weight_decay: f64) -> Result<(f64, Gradients<F>)> {
        let n = x.nrows();
        if targets.primary.len() != n || targets.secondary.len() != n {
            return Err(Error::Shape { expected: n, actual: targets.primary.len().min(targets.secondary.len()) });
        }
        if !(0.0..=1.0).contains(&targets.lambda) {
            return Err(Error::Label(format!("mixing weight {} outside [0, 1]", targets.lambda)));
        }
        let c = self.num_classes();
        if let Some(&bad) = targets.primary.iter().chain(&targets.secondary).find(|&&t| t >= c) {
            return Err(Error::Label(format!("target column {bad} but the model has {c} outputs")));
        }
        if n == 0 {
            return Err(Error::Shape { expected: 1, actual: 0 });
        }
        let cache = self.forward(x)?;
        let lambda: F = cast(targets.lambda);
        let rest = F::one() - lambda;
        let inv_n: F = cast(1.0 / n as f64);

        let mut ce = 0.0f64;
        let mut dlogits = cache.logits.clone();
        for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            let log_sum = sum.ln() + max;
            let (a, b) = (targets.primary[i], targets.secondary[i]);
            let logits = cache.logits.row(i);
            let loss_i = lambda * (log_sum - logits[a]) + rest * (log_sum - logits[b]);
            ce += loss_i.to_f64().expect("finite");
            row.mapv_inplace(|p| p / sum);
            row[a] -= lambda;
            row[b] -= rest;
            row.mapv_inplace(|g| g * inv_n);
        }
        ce /= n as f64;

        let wd: F = cast(weight_decay);
        let decay: f64 = self
            .layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w.to_f64().unwrap().powi(2)).sum::<f64>())
            .sum::<f64>()
            * 0.5
            * weight_decay;

        let [l1, l2, l3] = &self.layers;
        let grad3 = dense_grad(&cache.hidden2, &dlogits, &l3.weight, wd);
        let d2 = relu_backward(dlogits.dot(&l3.weight.t()), &cache.hidden2);
        let grad2 = dense_grad(&cache.hidden1, &d2, &l2.weight, wd);
        let d1 = relu_backward(d2.dot(&l2.weight.t()), &cache.hidden1);
        let grad1 = dense_grad(&cache.input, &d1, &l1.weight, wd);

        Ok((ce + decay, Gradients { layers: [grad1, grad2, grad3] }))
    }

    /// `θ ← θ − lr·∇`.
    pub fn sgd_step(&mut self, grads: &Gradients<F>, lr: f64) -> Result<()> {
        for (p, g) in self.layers.iter().zip(&grads.layers) {
            if p.weight.shape() != g.weight.shape() || p.bias.len() != g.bias.len() {
                return Err(Error::Shape { expected: p.weight.len() + p.bias.len(), actual: g.weight.len() + g.bias.len() });
            }
        }
        let step: F = cast(-lr);
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            p.weight.scaled_add(step, &g.weight);
            p.bias.scaled_add(step, &g.bias);
        }
        Ok(())
    }

    /// Predicted global class ids for a batch; ties go to the lowest column.
    pub fn predict_batch(&self, x: ArrayView2<'_, F>) -> Result<Vec<u16>> {
        let logits = self.logits(x)?;
        Ok(logits.rows().into_iter().map(|row| self.classes[argmax(row.iter().copied())]).collect())
    }

    pub fn predict(&self, x: &[F]) -> Result<u16> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.predict_batch(view)?[0])
    }

    /// Gradient buffer of zeros with the model's shapes.
    pub fn zero_grad(&self) -> Gradients<F> {
        Gradients { layers: [self.layers[0].zeros_like(), self.layers[1].zeros_like(), self.layers[2].zeros_like()] }
    }
}

fn dense_grad<F: Scalar>(input: &Array2<F>, upstream: &Array2<F>, weight: &Array2<F>, wd: F) -> Dense<F> {
    let mut w = input.t().dot(upstream);
    if wd != F::zero() {
        w.scaled_add(wd, weight);
    }
    Dense { weight: w, bias: upstream.sum_axis(Axis(0)) }
}

fn relu_backward<F: Scalar>(mut grad: Array2<F>, activated: &Array2<F>) -> Array2<F> {
    ndarray::Zip::from(&mut grad).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
    grad
}

/// Index of the first maximum.
pub fn argmax<F: PartialOrd>(values: impl IntoIterator<Item = F>) -> usize {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if v.partial_cmp(b) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

fn check_unique(existing: &[u16], new: &[u16]) -> Result<()> {
    let mut seen: HashSet<u16> = existing.iter().copied().collect();
    for &c in new {
        if !seen.insert(c) {
            return Err(Error::InvalidExpansion(c));
        }
    }
    Ok(())
}

/// Convex mixing of a batch with a shuffled copy of itself.
///
/// With probability `prob` a weight `λ ~ Beta(strength, strength)` is drawn and
/// every row becomes `λ·x_i + (1−λ)·x_π(i)` with targets `(y_i, y_π(i), λ)`.
/// Otherwise, or for batches of fewer than two rows, the batch passes through
/// with `λ = 1`.
pub fn mix_batch<F: Scalar>(
    batch: Array2<F>,
    columns: Vec<usize>,
    prob: f64,
    strength: f64,
    rng: &mut Rng,
) -> Result<(Array2<F>, Targets)> {
    let n = batch.nrows();
    if columns.len() != n {
        return Err(Error::Shape { expected: n, actual: columns.len() });
    }
    let fire = prob > 0.0 && rng.random::<f64>() < prob;
    if !fire || n < 2 {
        return Ok((batch, Targets::plain(columns)));
    }
    let beta = Beta::new(strength, strength)
        .map_err(|e| Error::InvalidConfig(format!("mixing strength {strength}: {e}")))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok((mix_rows(&batch, &perm, lambda), Targets::mixed(columns.clone(), perm.iter().map(|&j| columns[j]).collect(), lambda)))
}

/// `λ·x_i + (1−λ)·x_partner[i]` row by row.
pub fn mix_rows<F: Scalar>(batch: &Array2<F>, partner: &[usize], lambda: f64) -> Array2<F> {
    let l: F = cast(lambda);
    let r = F::one() - l;
    let mut out = batch.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.zip_mut_with(&batch.row(partner[i]), |a, &b| *a = l * *a + r * b);
    }
    out
}

const SNAPSHOT_MAGIC: [u8; 4] = *b"CLDN";
const SNAPSHOT_VERSION: u32 = 1;

impl DynNan<f32> {
    /// Snapshot layout, little-endian: `"CLDN"`, u32 version = 1, u32 input
    /// width, u32 hidden1, u32 hidden2, u32 class count, one u16 class id per
    /// column, then the f32 blocks W1, b1, W2, b2, W3, b3 (row-major).
    pub fn write_snapshot<W: Write>(&self, sink: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 2 * self.classes.len() + 4 * self.parameter_count());
        buf.extend_from_slice(&SNAPSHOT_MAGIC);
        for v in [SNAPSHOT_VERSION as usize, self.input_dim(), self.hidden()[0], self.hidden()[1], self.num_classes()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in &self.classes {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for p in self.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        sink.write_all(&buf)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(source: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || bytes[..4] != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a model snapshot".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        if word(1) != SNAPSHOT_VERSION as usize {
            return Err(Error::UnsupportedVersion(word(1) as u32));
        }
        let (dim, h1, h2, c) = (word(2), word(3), word(4), word(5));
        let params = dim * h1 + h1 + h1 * h2 + h2 + h2 * c + c;
        let expected = 24 + 2 * c + 4 * params;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!("snapshot has {} bytes, expected {expected}", bytes.len())));
        }
        let classes: Vec<u16> = bytes[24..24 + 2 * c].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        let mut values = bytes[24 + 2 * c..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut dense = |fan_in: usize, fan_out: usize| Dense {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || values.next().unwrap()),
            bias: Array1::from_shape_simple_fn(fan_out, || values.next().unwrap()),
        };
        let layers = [dense(dim, h1), dense(h1, h2), dense(h2, c)];
        let model = Self::from_layers(layers, classes)?;
        if model.params().any(|p| !p.is_finite()) {
            return Err(Error::Data("snapshot contains non-finite parameters".into()));
        }
        Ok(model)
    }

    /// Converts to `f64`, for verification.
    pub fn to_f64(&self) -> DynNan<f64> {
        let conv = |l: &Dense<f32>| Dense { weight: l.weight.mapv(|v| v as f64), bias: l.bias.mapv(|v| v as f64) };
        DynNan { layers: [conv(&self.layers[0]), conv(&self.layers[1]), conv(&self.layers[2])], classes: self.classes.clone() }
    }
}

/// Copies `rows` of a row-major feature buffer into a batch matrix.
pub fn gather_rows(features: &[f32], dim: usize, rows: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&features[r * dim..(r + 1) * dim]));
    }
    out
}

/// First `cols` columns of a logit matrix.
pub fn leading_columns<F: Clone>(logits: &Array2<F>, cols: usize) -> Array2<F> {
    logits.slice(s![.., ..cols]).to_owned()
}
