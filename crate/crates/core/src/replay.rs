//! Fixed-capacity reservoir memory and the replay loss terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelState};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReplayScheme {
    #[default]
    None,
    /// Classification loss on replayed items.
    Er,
    /// Match current logits to those stored at observation time.
    Der,
}

impl std::fmt::Display for ReplayScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplayScheme::None => "none",
            ReplayScheme::Er => "er",
            ReplayScheme::Der => "der",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub input: Vec<f64>,
    pub label: usize,
    /// Negated class distances at observation time.
    pub stored_logits: Option<Vec<f64>>,
    pub source_task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen_count: usize,
}

/// Items drawn from a buffer, in draw order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBatch {
    pub items: Vec<ReplayItem>,
}

impl ReplayBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn inputs(&self) -> Result<Matrix> {
        let dim = self.items[0].input.len();
        let data = self.items.iter().flat_map(|i| i.input.iter().copied()).collect();
        Matrix::from_vec(self.items.len(), dim, data)
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Ok(Batch {
            inputs: self.inputs()?,
            labels: self.items.iter().map(|i| i.label).collect(),
        })
    }

    fn stored_logits(&self, classes: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.items.len(), classes);
        for (r, item) in self.items.iter().enumerate() {
            let z = item
                .stored_logits
                .as_ref()
                .ok_or_else(|| Error::Config("logit matching needs items observed with stored logits".into()))?;
            if z.len() != classes {
                return Err(Error::Config(format!("stored logits have {} classes, model has {classes}", z.len())));
            }
            out.row_mut(r).copy_from_slice(z);
        }
        Ok(out)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen_count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Reservoir sampling: every observed item is retained with probability
    /// `capacity / seen_count`.
    pub fn observe<R: Rng + ?Sized>(&mut self, item: ReplayItem, rng: &mut R) {
        if let Some(slot) = self.reserve(rng) {
            self.place(slot, item);
        }
    }

    /// Counts one observation and returns the slot it should occupy, if any.
    /// Lets callers build the item only when it will be kept.
    pub fn reserve<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<usize> {
        let seen = self.seen_count;
        self.seen_count += 1;
        if self.items.len() < self.capacity {
            Some(self.items.len())
        } else if self.capacity > 0 {
            let j = rng.random_range(0..=seen);
            (j < self.capacity).then_some(j)
        } else {
            None
        }
    }

    /// Stores `item` in a slot returned by [`reserve`](Self::reserve).
    pub fn place(&mut self, slot: usize, item: ReplayItem) {
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
    }

    /// `n` items uniformly with replacement; empty when the buffer is.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ReplayBatch {
        if self.items.is_empty() {
            return ReplayBatch::default();
        }
        ReplayBatch {
            items: (0..n)
                .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
                .collect(),
        }
    }
}

/// Classification loss on a replayed batch, gradients added with unit
/// weight. Empty batches contribute nothing.
pub fn er_loss(state: &mut ModelState, batch: &ReplayBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    state.accumulate_classification(&batch.to_batch()?, 1.0)
}

/// Mean squared error between current logits and the stored ones, gradients
/// added with weight `alpha`.
pub fn der_loss(state: &mut ModelState, batch: &ReplayBatch, alpha: f64) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let stored = batch.stored_logits(state.class_count())?;
    state.accumulate_logit_matching(&batch.inputs()?, &stored, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{class_probabilities, classification_loss, ModelSpec};
    use crate::numcore::ParamSet;
    use crate::rng::{Purpose, SeedTree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(i: usize) -> ReplayItem {
        ReplayItem {
            input: vec![i as f64],
            label: i,
            stored_logits: None,
            source_task: 0,
        }
    }

    fn tiny_model(seed: u64) -> ModelState {
        let spec = ModelSpec {
            input_dim: 3,
            hidden: vec![5],
            feature_dim: 4,
            classes: 3,
            prototypes_per_class: 2,
        };
        ModelState::new(&spec, &mut SeedTree::new(seed).rng(Purpose::ModelInit, 0)).unwrap()
    }

    fn random_items(rng: &mut ChaCha8Rng, n: usize, logits: bool) -> Vec<ReplayItem> {
        (0..n)
            .map(|_| ReplayItem {
                input: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: rng.random_range(0..3),
                stored_logits: logits.then(|| (0..3).map(|_| rng.random_range(-3.0..0.0)).collect()),
                source_task: 1,
            })
            .collect()
    }

    #[test]
    fn short_stream_is_kept_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(10);
        for i in 0..7 {
            b.observe(item(i), &mut rng);
        }
        assert_eq!(b.items().iter().map(|i| i.label).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        assert_eq!(b.seen_count(), 7);
        assert!(ReplayBuffer::new(5).is_empty());
    }

    #[test]
    fn zero_capacity_never_stores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(0);
        for i in 0..50 {
            b.observe(item(i), &mut rng);
        }
        assert!(b.is_empty());
        assert!(b.sample(8, &mut rng).is_empty());
    }

    #[test]
    fn retention_is_uniform() {
        let (cap, n, seeds) = (50, 5000, 2000);
        let mut kept = vec![0u32; n];
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut b = ReplayBuffer::new(cap);
            for i in 0..n {
                b.observe(item(i), &mut rng);
            }
            assert_eq!(b.len(), cap);
            for it in b.items() {
                kept[it.label] += 1;
            }
        }
        let expect = cap as f64 / n as f64;
        // Per-item counts are binomial(2000, 0.01); pooling blocks of 100
        // items keeps the relative noise well under the ±15% band.
        for block in kept.chunks(100) {
            let freq = block.iter().sum::<u32>() as f64 / (block.len() * seeds as usize) as f64;
            assert!((freq / expect - 1.0).abs() < 0.15, "{freq}");
        }
        let total: u32 = kept.iter().sum();
        assert_eq!(total as usize, cap * seeds as usize);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(3);
        b.observe(item(7), &mut rng);
        let s = b.sample(4, &mut rng);
        assert_eq!(s.len(), 4);
        assert!(s.items.iter().all(|i| i.label == 7));
        assert!(b.sample(0, &mut rng).is_empty());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.observe(item(i), &mut rng);
        }
        let mut counts = [0usize; 10];
        for it in b.sample(100_000, &mut rng).items {
            counts[it.label] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((f - 0.1).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn er_loss_matches_per_item_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = tiny_model(3);
        let batch = ReplayBatch {
            items: random_items(&mut rng, 9, false),
        };
        let loss = er_loss(&mut state, &batch).unwrap();
        let mut oracle = 0.0;
        for it in &batch.items {
            let z = state.logits(&Matrix::from_vec(1, 3, it.input.clone()).unwrap()).unwrap();
            let d: Vec<f64> = z.data().iter().map(|v| -v).collect();
            oracle -= class_probabilities(&d)[it.label].ln();
        }
        oracle /= batch.len() as f64;
        assert!((loss - oracle).abs() < 1e-12, "{loss} {oracle}");

        let plain = batch.to_batch().unwrap();
        let probs = {
            let z = state.logits(&plain.inputs).unwrap();
            let mut p = Matrix::zeros(z.rows(), 3);
            for r in 0..z.rows() {
                let d: Vec<f64> = z.row(r).iter().map(|v| -v).collect();
                p.row_mut(r).copy_from_slice(&class_probabilities(&d));
            }
            p
        };
        assert_eq!(loss, classification_loss(&probs, &plain.labels).unwrap());
        assert_eq!(er_loss(&mut state, &ReplayBatch::default()).unwrap(), 0.0);
    }

    #[test]
    fn der_loss_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = tiny_model(4);
        let batch = ReplayBatch {
            items: random_items(&mut rng, 6, true),
        };
        let loss = der_loss(&mut state, &batch, 0.5).unwrap();
        let mut oracle = 0.0;
        for it in &batch.items {
            let z = state.logits(&Matrix::from_vec(1, 3, it.input.clone()).unwrap()).unwrap();
            for (a, b) in z.data().iter().zip(it.stored_logits.as_ref().unwrap()) {
                oracle += (a - b) * (a - b);
            }
        }
        oracle /= 18.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn der_loss_trivial_values() {
        let mut state = tiny_model(5);
        let x = vec![0.1, 0.2, 0.3];
        let z = state.logits(&Matrix::from_vec(1, 3, x.clone()).unwrap()).unwrap();
        let same = ReplayBatch {
            items: vec![ReplayItem {
                input: x.clone(),
                label: 0,
                stored_logits: Some(z.data().to_vec()),
                source_task: 1,
            }],
        };
        assert_eq!(der_loss(&mut state, &same, 0.5).unwrap(), 0.0);
        let shifted = ReplayBatch {
            items: vec![ReplayItem {
                stored_logits: Some(z.data().iter().map(|v| v - 1.0).collect()),
                ..same.items[0].clone()
            }],
        };
        assert!((der_loss(&mut state, &shifted, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let missing = ReplayBatch {
            items: vec![ReplayItem {
                stored_logits: None,
                ..same.items[0].clone()
            }],
        };
        assert!(matches!(der_loss(&mut state, &missing, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn der_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = tiny_model(6);
        let batch = ReplayBatch {
            items: random_items(&mut rng, 5, true),
        };
        state.zero_grads();
        der_loss(&mut state, &batch, 1.0).unwrap();
        let err = crate::numcore::finite_diff_check(
            |s: &ModelState| der_loss(&mut s.clone(), &batch, 1.0),
            &mut state,
            1e-6,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
