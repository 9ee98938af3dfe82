//! The prototype-distance classifier.
//!
//! Inputs pass through a stack of affine+ReLU layers and a final affine head
//! into an `m`-dimensional feature space. Each class owns a bank of
//! prototype rows; a sample's distance to a class is the L2 distance to the
//! nearest row, and class probabilities are a softmax over negated distances.
//! Training minimizes cross-entropy on those probabilities, plus the
//! multiplier-weighted drift penalty on prototypes when a stage constraint
//! is active.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::constraint::{bank_distance_grad, penalized_loss, ConstraintState};
use crate::error::{Error, Result};
use crate::numcore::{matmul, matmul_nt, matmul_tn, relu, relu_grad, Matrix, ParamBlock, ParamSet};

/// Floor applied to probabilities before taking logs.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
}

impl Linear {
    /// Uniform(±1/√fan_in) for weights and biases.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = Matrix::from_fn(input, output, |_, _| rng.random_range(-bound..bound));
        let b = Matrix::from_fn(1, output, |_, _| rng.random_range(-bound..bound));
        Self {
            weight: ParamBlock::new(w),
            bias: ParamBlock::new(b),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Dimension {
                op: "linear",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight: ParamBlock::new(weight),
            bias: ParamBlock::new(bias),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.weight.value)?;
        y.add_row_vector(&self.bias.value)?;
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the gradient w.r.t. `input`
    /// when `want_input` is set.
    fn backward(&mut self, input: &Matrix, upstream: &Matrix, want_input: bool) -> Result<Option<Matrix>> {
        let dw = matmul_tn(input, upstream)?;
        self.weight.grad.add_scaled(&dw, 1.0)?;
        self.bias.grad.add_scaled(&upstream.column_sums(), 1.0)?;
        if want_input {
            Ok(Some(matmul_nt(upstream, &self.weight.value)?))
        } else {
            Ok(None)
        }
    }
}

/// Learnable representatives of one class, one prototype per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub class_id: usize,
    pub prototypes: ParamBlock,
    /// Rows inherited from earlier stages; only these are drift-constrained
    /// in dynamic mode.
    pub frozen_rows: usize,
    /// Stage (1-based) in which each row was created.
    pub birth_stage: Vec<usize>,
}

impl PrototypeBank {
    pub fn from_matrix(class_id: usize, prototypes: Matrix) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(Error::Invariant(format!("prototype bank {class_id} is empty")));
        }
        Ok(Self {
            class_id,
            birth_stage: vec![1; prototypes.rows()],
            prototypes: ParamBlock::new(prototypes),
            frozen_rows: 0,
        })
    }

    /// Zero-mean Gaussian rows with standard deviation 1/√m.
    pub fn random<R: Rng + ?Sized>(class_id: usize, rows: usize, dim: usize, stage: usize, rng: &mut R) -> Result<Self> {
        let mut bank = Self::from_matrix(class_id, random_rows(rows, dim, rng))?;
        bank.birth_stage = vec![stage; rows];
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.prototypes.value.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.value.cols()
    }

    pub fn rows(&self) -> &Matrix {
        &self.prototypes.value
    }

    /// Marks every current row as inherited and appends `rows` born in `stage`.
    pub fn grow(&mut self, rows: &Matrix, stage: usize) -> Result<()> {
        if rows.cols() != self.dim() {
            return Err(Error::Dimension {
                op: "grow",
                left: self.rows().shape(),
                right: rows.shape(),
            });
        }
        self.frozen_rows = self.len();
        self.prototypes.append_rows(rows)?;
        self.birth_stage.extend(std::iter::repeat_n(stage, rows.rows()));
        Ok(())
    }
}

pub(crate) fn random_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (dim.max(1) as f64).sqrt()).expect("finite std");
    Matrix::from_fn(rows, dim, |_, _| normal.sample(rng))
}

/// Layer widths and prototype layout for a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub prototypes_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Affine layers, each followed by ReLU.
    pub encoder: Vec<Linear>,
    /// Final affine map into feature space (no activation).
    pub head: Linear,
    /// One bank per class, indexed by class id.
    pub banks: Vec<PrototypeBank>,
}

/// A labelled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Per-sample, per-class nearest-prototype distances with the winning rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub distances: Matrix,
    pub nearest: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub classification: f64,
    /// Drift from the stage snapshot; `None` while no constraint is active.
    pub bank_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Class probabilities, one row per sample.
    pub scores: Matrix,
}

struct ForwardCache {
    /// Input to each encoder layer, then the head input.
    inputs: Vec<Matrix>,
    /// Pre-activation of each encoder layer.
    pre: Vec<Matrix>,
    features: Matrix,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.classes < 2 || spec.prototypes_per_class == 0 || spec.feature_dim == 0 || spec.input_dim == 0 {
            return Err(Error::Config(format!("invalid model spec {spec:?}")));
        }
        let mut encoder = Vec::with_capacity(spec.hidden.len());
        let mut width = spec.input_dim;
        for &h in &spec.hidden {
            encoder.push(Linear::random(width, h, rng));
            width = h;
        }
        let head = Linear::random(width, spec.feature_dim, rng);
        let banks = (0..spec.classes)
            .map(|c| PrototypeBank::random(c, spec.prototypes_per_class, spec.feature_dim, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(encoder, head, banks)
    }

    pub fn from_parts(encoder: Vec<Linear>, head: Linear, banks: Vec<PrototypeBank>) -> Result<Self> {
        let mut width = encoder.first().map_or(head.input_dim(), Linear::input_dim);
        for layer in encoder.iter().chain(std::iter::once(&head)) {
            if layer.input_dim() != width {
                return Err(Error::Dimension {
                    op: "model layers",
                    left: (width, width),
                    right: layer.weight.value.shape(),
                });
            }
            width = layer.output_dim();
        }
        for (i, bank) in banks.iter().enumerate() {
            if bank.class_id != i {
                return Err(Error::Invariant(format!("bank {i} carries class id {}", bank.class_id)));
            }
            if bank.is_empty() {
                return Err(Error::Invariant(format!("prototype bank {i} is empty")));
            }
            if bank.dim() != head.output_dim() {
                return Err(Error::Dimension {
                    op: "prototype bank",
                    left: bank.rows().shape(),
                    right: (1, head.output_dim()),
                });
            }
            if bank.frozen_rows > bank.len() {
                return Err(Error::Invariant(format!("bank {i} has more frozen rows than rows")));
            }
        }
        Ok(Self { encoder, head, banks })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(self.head.input_dim(), Linear::input_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn class_count(&self) -> usize {
        self.banks.len()
    }

    pub fn prototype_rows(&self) -> Vec<Matrix> {
        self.banks.iter().map(|b| b.rows().clone()).collect()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "encode",
                left: x.shape(),
                right: (self.input_dim(), self.feature_dim()),
            });
        }
        let mut inputs = Vec::with_capacity(self.encoder.len() + 1);
        let mut pre = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            let z = layer.forward(&h)?;
            let a = relu(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        let features = self.head.forward(&h)?;
        inputs.push(h);
        Ok(ForwardCache { inputs, pre, features })
    }

    /// Backpropagates a feature-space gradient into encoder and head.
    fn backward(&mut self, cache: &ForwardCache, dfeatures: &Matrix) -> Result<()> {
        let head_input = &cache.inputs[self.encoder.len()];
        let want = !self.encoder.is_empty();
        let mut upstream = self.head.backward(head_input, dfeatures, want)?;
        for i in (0..self.encoder.len()).rev() {
            let dh = upstream.take().expect("gradient flows through every hidden layer");
            let dz = relu_grad(&cache.pre[i], &dh)?;
            upstream = self.encoder[i].backward(&cache.inputs[i], &dz, i > 0)?;
        }
        Ok(())
    }

    /// Nearest-prototype distance of every feature row to every class.
    pub fn distances(&self, features: &Matrix) -> Result<DistanceTable> {
        let classes = self.class_count();
        if features.cols() != self.feature_dim() {
            return Err(Error::Dimension {
                op: "distances",
                left: features.shape(),
                right: (classes, self.feature_dim()),
            });
        }
        let mut distances = Matrix::zeros(features.rows(), classes);
        let mut nearest = vec![0usize; features.rows() * classes];
        let feature_norms: Vec<f64> = features.row_iter().map(|f| f.iter().map(|v| v * v).sum()).collect();
        for (c, bank) in self.banks.iter().enumerate() {
            let rows = bank.rows();
            if rows.rows() == 0 {
                return Err(Error::Invariant("nearest prototype of an empty bank".into()));
            }
            let row_norms: Vec<f64> = rows.row_iter().map(|p| p.iter().map(|v| v * v).sum()).collect();
            let max_row_norm = row_norms.iter().copied().fold(0.0, f64::max);
            let cross = matmul_nt(features, rows)?;
            let mut approx = vec![0.0; rows.rows()];
            for (b, f) in features.row_iter().enumerate() {
                // Expanded-form scores only shortlist rows; the exact distance
                // decides, so the result matches a full scan.
                let mut low = f64::INFINITY;
                for (a, (&x, &n)) in approx.iter_mut().zip(cross.row(b).iter().zip(&row_norms)) {
                    *a = n - 2.0 * x;
                    low = low.min(*a);
                }
                let slack = 1e-9 * (feature_norms[b] + max_row_norm) + f64::MIN_POSITIVE;
                let mut best = f64::INFINITY;
                let mut idx = 0;
                for (r, &a) in approx.iter().enumerate() {
                    if a <= low + slack {
                        let sq = squared_distance(f, rows.row(r));
                        if sq < best {
                            best = sq;
                            idx = r;
                        }
                    }
                }
                distances.set(b, c, best.sqrt());
                nearest[b * classes + c] = idx;
            }
        }
        Ok(DistanceTable { distances, nearest })
    }

    /// Pre-softmax scores, i.e. negated class distances.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let table = self.distances(&encode(x, self)?)?;
        let mut z = table.distances;
        z.data_mut().iter_mut().for_each(|v| *v = -*v);
        Ok(z)
    }

    /// Cross-entropy on `batch`, with gradients scaled by `weight` added to
    /// every parameter. Returns the unweighted loss.
    pub fn accumulate_classification(&mut self, batch: &Batch, weight: f64) -> Result<f64> {
        let classes = self.class_count();
        if batch.labels.len() != batch.inputs.rows() {
            return Err(Error::Dimension {
                op: "batch labels",
                left: batch.inputs.shape(),
                right: (batch.labels.len(), 1),
            });
        }
        if batch.labels.is_empty() {
            return Ok(0.0);
        }
        let cache = self.forward_cached(&batch.inputs)?;
        let table = self.distances(&cache.features)?;
        let mut probs = Matrix::zeros(batch.labels.len(), classes);
        for b in 0..batch.labels.len() {
            probs
                .row_mut(b)
                .copy_from_slice(&class_probabilities(table.distances.row(b)));
        }
        let loss = classification_loss(&probs, &batch.labels)?;
        let n = batch.labels.len() as f64;
        // dL/dd_c = (y_c − p_c) / N
        let mut dd = Matrix::zeros(batch.labels.len(), classes);
        for (b, &y) in batch.labels.iter().enumerate() {
            for c in 0..classes {
                let target = if c == y { 1.0 } else { 0.0 };
                dd.set(b, c, weight * (target - probs.get(b, c)) / n);
            }
        }
        self.backprop_distances(&cache, &table, &dd)?;
        Ok(loss)
    }

    /// Mean squared error between current logits (−d) and `stored`, with
    /// gradients scaled by `weight`. Returns the unweighted loss.
    pub fn accumulate_logit_matching(&mut self, inputs: &Matrix, stored: &Matrix, weight: f64) -> Result<f64> {
        let classes = self.class_count();
        if stored.rows() != inputs.rows() || stored.cols() != classes {
            return Err(Error::Dimension {
                op: "logit matching",
                left: (inputs.rows(), classes),
                right: stored.shape(),
            });
        }
        if inputs.rows() == 0 {
            return Ok(0.0);
        }
        let cache = self.forward_cached(inputs)?;
        let table = self.distances(&cache.features)?;
        let count = (inputs.rows() * classes) as f64;
        let mut loss = 0.0;
        let mut dd = Matrix::zeros(inputs.rows(), classes);
        for b in 0..inputs.rows() {
            for c in 0..classes {
                let diff = -table.distances.get(b, c) - stored.get(b, c);
                loss += diff * diff;
                // d(−d − s)²/dd = −2(−d − s)
                dd.set(b, c, -weight * 2.0 * diff / count);
            }
        }
        self.backprop_distances(&cache, &table, &dd)?;
        Ok(loss / count)
    }

    fn backprop_distances(&mut self, cache: &ForwardCache, table: &DistanceTable, dd: &Matrix) -> Result<()> {
        let classes = self.class_count();
        let m = self.feature_dim();
        let mut dfeat = Matrix::zeros(cache.features.rows(), m);
        for b in 0..cache.features.rows() {
            let f = cache.features.row(b);
            for c in 0..classes {
                let d = table.distances.get(b, c);
                let g = dd.get(b, c);
                if d <= 0.0 || g == 0.0 {
                    continue;
                }
                let r = table.nearest[b * classes + c];
                let coeff = g / d;
                let bank = &mut self.banks[c].prototypes;
                let p = bank.value.row(r).to_vec();
                let df = dfeat.row_mut(b);
                let dp = bank.grad.row_mut(r);
                for j in 0..m {
                    let u = coeff * (f[j] - p[j]);
                    df[j] += u;
                    dp[j] -= u;
                }
            }
        }
        self.backward(cache, &dfeat)
    }

    /// Appends `per_class` fresh rows to every bank, marking existing rows
    /// as inherited.
    pub fn grow_banks<R: Rng + ?Sized>(&mut self, per_class: usize, stage: usize, rng: &mut R) -> Result<()> {
        let m = self.feature_dim();
        for bank in &mut self.banks {
            let rows = random_rows(per_class, m, rng);
            bank.grow(&rows, stage)?;
        }
        Ok(())
    }

    /// Marks every current prototype row as inherited without adding rows.
    pub fn freeze_all_rows(&mut self) {
        for bank in &mut self.banks {
            bank.frozen_rows = bank.len();
        }
    }

    /// Plain-text prototype dump: one prototype per line,
    /// `class_id,stage_of_birth,v_1,…,v_m`.
    pub fn export_prototypes(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# class_id,stage_of_birth,v_1..v_{}", self.feature_dim());
        for bank in &self.banks {
            for (r, row) in bank.rows().row_iter().enumerate() {
                let _ = write!(out, "{},{}", bank.class_id, bank.birth_stage[r]);
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

impl ParamSet for ModelState {
    fn param_blocks(&self) -> Vec<&ParamBlock> {
        let mut v = Vec::new();
        for l in self.encoder.iter().chain(std::iter::once(&self.head)) {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.extend(self.banks.iter().map(|b| &b.prototypes));
        v
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = Vec::new();
        for l in self.encoder.iter_mut().chain(std::iter::once(&mut self.head)) {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.extend(self.banks.iter_mut().map(|b| &mut b.prototypes));
        v
    }
}

/// Squared distance from `f` to the closest row of `rows`, with that row's
/// index (lowest index on ties).
fn nearest_row(f: &[f64], rows: &Matrix) -> Result<(f64, usize)> {
    if rows.rows() == 0 {
        return Err(Error::Invariant("nearest prototype of an empty bank".into()));
    }
    let mut best = f64::INFINITY;
    let mut idx = 0;
    for (r, p) in rows.row_iter().enumerate() {
        let sq = squared_distance(f, p);
        if sq < best {
            best = sq;
            idx = r;
        }
    }
    Ok((best, idx))
}

/// Four interleaved partial sums combined in a fixed order.
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Feature batch `g(h(x))`.
pub fn encode(x: &Matrix, state: &ModelState) -> Result<Matrix> {
    Ok(state.forward_cached(x)?.features)
}

/// L2 distance from `feature` to the nearest row of `bank`, and that row.
pub fn class_distance(feature: &[f64], bank: &PrototypeBank) -> Result<(f64, usize)> {
    if feature.len() != bank.dim() {
        return Err(Error::Dimension {
            op: "class_distance",
            left: (1, feature.len()),
            right: bank.rows().shape(),
        });
    }
    let (sq, idx) = nearest_row(feature, bank.rows())?;
    Ok((sq.sqrt(), idx))
}

/// Softmax over negated distances, shifted by the smallest distance.
///
/// Entries are floored at the smallest positive normal so every class keeps
/// non-zero mass even when its distance gap exceeds the exponent range.
pub fn class_probabilities(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|&d| (min - d).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / sum).max(f64::MIN_POSITIVE))
        .collect()
}

/// Mean negative log-probability of the true class.
pub fn classification_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "classification_loss",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::Invariant(format!("label {y} outside {} classes", probs.cols())));
        }
        total -= probs.get(b, y).max(LOG_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Zeroes all gradients, then fills them for the penalized objective.
///
/// Encoder and head gradients come from the classification loss alone; the
/// prototypes also receive the multiplier-weighted drift gradient, which is
/// the only term that depends on them beyond classification.
pub fn forward_backward(batch: &Batch, state: &mut ModelState, constraint: &ConstraintState) -> Result<LossParts> {
    state.zero_grads();
    let classification = state.accumulate_classification(batch, 1.0)?;
    if !classification.is_finite() {
        return Err(Error::Numeric(format!("classification loss is {classification}")));
    }
    let bank_distance = match constraint.snapshot() {
        Some(snapshot) => {
            let current = state.prototype_rows();
            let (dist, grads) = bank_distance_grad(snapshot, &current, constraint.mode())?;
            if constraint.lambda() != 0.0 {
                for (bank, g) in state.banks.iter_mut().zip(&grads) {
                    bank.prototypes.grad.add_scaled(g, constraint.lambda())?;
                }
            }
            Some(dist)
        }
        None => None,
    };
    let total = match bank_distance {
        Some(d) => penalized_loss(classification, d, constraint),
        None => classification,
    };
    Ok(LossParts {
        total,
        classification,
        bank_distance,
    })
}

/// Nearest-class labels (lowest class id on ties) and class probabilities.
pub fn predict(x: &Matrix, state: &ModelState) -> Result<Prediction> {
    let table = state.distances(&encode(x, state)?)?;
    let classes = state.class_count();
    let mut labels = Vec::with_capacity(x.rows());
    let mut scores = Matrix::zeros(x.rows(), classes);
    for b in 0..x.rows() {
        let d = table.distances.row(b);
        let mut best = 0;
        for c in 1..classes {
            if d[c] < d[best] {
                best = c;
            }
        }
        labels.push(best);
        scores.row_mut(b).copy_from_slice(&class_probabilities(d));
    }
    Ok(Prediction { labels, scores })
}
