//! Accuracy matrices, frame-wise average precision and forgetting.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Batch, ModelState};
use crate::numcore::Matrix;
use crate::streams::domains::{Combination, DomainId};
use crate::streams::rotation::RotatedDigits;
use crate::streams::synth::SequenceSample;
use crate::streams::Task;

/// Class index of highlight frames.
pub const HIGHLIGHT: usize = 1;

const EVAL_CHUNK: usize = 1000;

/// Anything that can write labelled examples into a row buffer.
pub trait ExampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn dim(&self) -> usize;
    /// Writes example `i` into `out` and returns its label.
    fn write(&self, i: usize, out: &mut [f64]) -> usize;
}

impl ExampleSource for RotatedDigits {
    fn len(&self) -> usize {
        RotatedDigits::len(self)
    }
    fn dim(&self) -> usize {
        self.map.pixel_count()
    }
    fn write(&self, i: usize, out: &mut [f64]) -> usize {
        RotatedDigits::write(self, i, out)
    }
}

impl ExampleSource for Task {
    fn len(&self) -> usize {
        self.example_count()
    }
    fn dim(&self) -> usize {
        self.input_dim()
    }
    fn write(&self, i: usize, out: &mut [f64]) -> usize {
        self.write_example(i, out)
    }
}

/// Gathers the listed examples into a batch.
pub fn gather<S: ExampleSource + ?Sized>(source: &S, indices: impl IntoIterator<Item = usize>) -> Batch {
    let dim = source.dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in indices {
        let start = data.len();
        data.resize(start + dim, 0.0);
        labels.push(source.write(i, &mut data[start..]));
    }
    Batch {
        inputs: Matrix::from_vec(labels.len(), dim, data).expect("gathered rows match dim"),
        labels,
    }
}

/// Fraction of examples whose predicted label is correct.
pub fn accuracy<S: ExampleSource + ?Sized>(state: &ModelState, split: &S) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Eval("accuracy on an empty split".into()));
    }
    let mut correct = 0usize;
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let batch = gather(split, start..(start + EVAL_CHUNK).min(split.len()));
        let pred = predict(&batch.inputs, state)?;
        correct += pred.labels.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// `a[t][j]`: accuracy on task `j` after training stage `t` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            entries: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, stage: usize, task: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Eval(format!("accuracy {value} outside [0, 1]")));
        }
        self.entries[stage][task] = Some(value);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.entries[stage][task]
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Eval("accuracy matrix must be square".into()));
        }
        let mut m = Self::new(n);
        for (t, r) in rows.into_iter().enumerate() {
            for (j, v) in r.into_iter().enumerate() {
                if let Some(v) = v {
                    m.set(t, j, v)?;
                }
            }
        }
        Ok(m)
    }
}

/// Mean accuracy over all tasks after the final stage.
pub fn average_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    let t = matrix.tasks();
    if t == 0 {
        return Err(Error::Eval("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for j in 0..t {
        sum += matrix
            .get(t - 1, j)
            .ok_or_else(|| Error::Eval(format!("final row is missing task {}", j + 1)))?;
    }
    Ok(sum / t as f64)
}

/// For each task but the last: best accuracy seen minus the final one.
pub fn forgetting(matrix: &AccuracyMatrix) -> Vec<f64> {
    let t = matrix.tasks();
    if t < 2 {
        return Vec::new();
    }
    (0..t - 1)
        .map(|j| {
            let best = (j..t).filter_map(|s| matrix.get(s, j)).fold(f64::NEG_INFINITY, f64::max);
            match matrix.get(t - 1, j) {
                Some(last) if best.is_finite() => best - last,
                _ => 0.0,
            }
        })
        .collect()
}

/// Area under the precision-recall step curve, ranking by descending score
/// with ties kept in original order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

/// Per-frame highlight probability of every test sequence.
pub fn frame_scores(state: &ModelState, sequences: &[SequenceSample]) -> Result<Vec<Vec<f64>>> {
    sequences.iter().map(|s| score_trace(state, s)).collect()
}

/// Highlight probability of each frame, in frame order.
pub fn score_trace(state: &ModelState, sequence: &SequenceSample) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Ok(Vec::new());
    }
    if state.class_count() <= HIGHLIGHT {
        return Err(Error::Eval("score traces need a highlight class".into()));
    }
    let pred = predict(&sequence.frames, state)?;
    Ok((0..pred.scores.rows()).map(|r| pred.scores.get(r, HIGHLIGHT)).collect())
}

/// AP of every active domain, pooled over all test frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAps {
    pub per_domain: Vec<(DomainId, Option<f64>)>,
}

impl DomainAps {
    /// Mean over domains with at least one positive frame.
    pub fn mean(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_domain.iter().filter_map(|(_, ap)| *ap).collect();
        if defined.is_empty() {
            return Err(Error::Eval("no active domain has a positive test frame".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn get(&self, domain: DomainId) -> Option<f64> {
        self.per_domain.iter().find(|(d, _)| *d == domain).and_then(|(_, ap)| *ap)
    }
}

/// Scores each active domain against its own relabeling of the test frames:
/// frames inside that domain's segments are positive, all others negative.
pub fn domain_aps(scores: &[Vec<f64>], sequences: &[SequenceSample], active: &Combination) -> Result<DomainAps> {
    if scores.len() != sequences.len() {
        return Err(Error::Eval(format!("{} score traces for {} sequences", scores.len(), sequences.len())));
    }
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    let mut per_domain = Vec::with_capacity(active.len());
    for &d in active {
        let labels: Vec<u8> = sequences.iter().flat_map(|s| s.labels_for(d)).collect();
        if labels.len() != pooled.len() {
            return Err(Error::Eval("score trace length differs from its sequence".into()));
        }
        let ap = average_precision(&pooled, &labels);
        if ap.is_none() {
            warn!("domain {d} has no positive test frame; excluded from mAP");
        }
        per_domain.push((d, ap));
    }
    Ok(DomainAps { per_domain })
}

pub fn mean_ap(state: &ModelState, sequences: &[SequenceSample], active: &Combination) -> Result<f64> {
    domain_aps(&frame_scores(state, sequences)?, sequences, active)?.mean()
}

/// λ statistics over one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LambdaSummary {
    pub updates: usize,
    pub initial: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

impl LambdaSummary {
    pub fn from_trajectory(values: &[f64]) -> Self {
        match (values.first(), values.last()) {
            (Some(&initial), Some(&last)) => Self {
                updates: values.len(),
                initial,
                last,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
            _ => Self::default(),
        }
    }
}

/// Outcome of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Accuracy on each task seen so far (classification streams).
    pub task_accuracy: Vec<f64>,
    /// AP per active domain (highlight streams).
    pub domain_ap: Vec<(DomainId, Option<f64>)>,
    /// Mean task accuracy or mean domain AP.
    pub average: f64,
    pub mean_loss: f64,
    pub lambda: LambdaSummary,
    /// Prototype rows per class after the stage.
    pub prototype_counts: Vec<usize>,
    pub wall_seconds: f64,
}
