//! Synthetic highlight sequences.
//!
//! Each sequence is a run of frame feature vectors at one frame per second.
//! Vanilla frames scatter around a neutral background; frames inside a
//! segment of domain `d` scatter around that domain's signature vector. Every
//! sequence also carries a per-sequence style offset and the appearance
//! offset of the source it was recorded from, so the same domain looks
//! somewhat different from task to task.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::streams::domains::{Combination, DomainId};

/// Half-open frame range `[start, end)` annotated with one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub domain: DomainId,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Unique within a stream.
    pub id: usize,
    pub frames: Matrix,
    /// 1 inside any segment, 0 elsewhere.
    pub frame_labels: Vec<u8>,
    pub segments: Vec<Segment>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frame_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_labels.is_empty()
    }

    /// The set of annotated domains.
    pub fn combination(&self) -> Combination {
        self.segments.iter().map(|s| s.domain).collect()
    }

    /// Per-frame labels positive only inside segments of `domain`.
    pub fn labels_for(&self, domain: DomainId) -> Vec<u8> {
        let mut out = vec![0u8; self.len()];
        for s in self.segments.iter().filter(|s| s.domain == domain) {
            out[s.start..s.end].iter_mut().for_each(|v| *v = 1);
        }
        out
    }
}

/// Shape and appearance parameters of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub feature_dim: usize,
    /// Norm of each domain's signature vector.
    pub signature_scale: f64,
    /// Per-frame isotropic noise.
    pub noise: f64,
    /// Std of the per-sequence offset shared by all its frames.
    pub style: f64,
    /// Norm of the per-source appearance offset.
    pub source_shift: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Upper bound on segments per annotated domain (at least one is drawn).
    pub segments_per_domain: usize,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            signature_scale: 4.0,
            noise: 1.0,
            style: 0.5,
            source_shift: 2.0,
            min_segment: 3,
            max_segment: 120,
            segments_per_domain: 2,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(Error::Config(format!(
                "segment bounds [{}, {}] invalid",
                self.min_segment, self.max_segment
            )));
        }
        if self.segments_per_domain == 0 {
            return Err(Error::Config("segments_per_domain must be positive".into()));
        }
        for (name, v) in [
            ("signature_scale", self.signature_scale),
            ("noise", self.noise),
            ("style", self.style),
            ("source_shift", self.source_shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Frozen appearance model: one signature per domain and one offset per source.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub profile: SynthProfile,
    pub domains: Vec<DomainId>,
    signatures: Matrix,
    sources: Matrix,
}

impl Appearance {
    pub fn new<R: Rng + ?Sized>(profile: SynthProfile, domains: &[DomainId], sources: usize, rng: &mut R) -> Result<Self> {
        profile.validate()?;
        let dim = profile.feature_dim;
        let signatures = scaled_directions(domains.len(), dim, profile.signature_scale, rng);
        let sources = scaled_directions(sources, dim, profile.source_shift, rng);
        Ok(Self {
            profile,
            domains: domains.to_vec(),
            signatures,
            sources,
        })
    }

    pub fn signature(&self, domain: DomainId) -> Option<&[f64]> {
        self.domains
            .iter()
            .position(|&d| d == domain)
            .map(|i| self.signatures.row(i))
    }

    pub fn source_count(&self) -> usize {
        self.sources.rows()
    }
}

fn scaled_directions<R: Rng + ?Sized>(n: usize, dim: usize, scale: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut m = Matrix::from_fn(n, dim, |_, _| normal.sample(rng));
    for r in 0..n {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v *= scale / norm);
    }
    m
}

/// Draws one sequence of `length` frames annotated with exactly the domains
/// of `combination`, recorded from appearance source `source`.
pub fn synth_sequence<R: Rng + ?Sized>(
    id: usize,
    combination: &Combination,
    length: usize,
    source: usize,
    appearance: &Appearance,
    rng: &mut R,
) -> Result<SequenceSample> {
    if combination.is_empty() {
        return Err(Error::Generation("empty domain combination".into()));
    }
    let p = &appearance.profile;
    if source >= appearance.source_count() {
        return Err(Error::Generation(format!("unknown source {source}")));
    }
    for d in combination {
        if appearance.signature(*d).is_none() {
            return Err(Error::Generation(format!("domain {d} has no signature")));
        }
    }

    // How many segments each domain gets, in a random interleaving.
    let mut order: Vec<DomainId> = Vec::new();
    for &d in combination {
        let n = rng.random_range(1..=p.segments_per_domain);
        order.extend(std::iter::repeat_n(d, n));
    }
    let needed = order.len() * p.min_segment;
    if needed > length {
        return Err(Error::Generation(format!(
            "{length} frames cannot hold {} segments of at least {} frames",
            order.len(),
            p.min_segment
        )));
    }
    order.shuffle(rng);

    // Segment lengths, log-uniform so short clips dominate; each capped so
    // the remaining segments still fit.
    let mut lengths = Vec::with_capacity(order.len());
    let mut budget = length;
    for i in 0..order.len() {
        let reserve = (order.len() - i - 1) * p.min_segment;
        let hi = p.max_segment.min(budget - reserve);
        let u: f64 = rng.random_range((p.min_segment as f64).ln()..=((hi + 1) as f64).ln());
        let len = (u.exp().floor() as usize).clamp(p.min_segment, hi);
        lengths.push(len);
        budget -= len;
    }

    // Spread the leftover frames over the gaps before, between and after.
    let free = budget;
    let gaps = order.len() + 1;
    let mut cuts: Vec<usize> = (0..gaps - 1).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut segments = Vec::with_capacity(order.len());
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, (&d, &len)) in order.iter().zip(&lengths).enumerate() {
        pos += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        segments.push(Segment {
            start: pos,
            end: pos + len,
            domain: d,
        });
        pos += len;
    }

    let dim = p.feature_dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let style: Vec<f64> = (0..dim).map(|_| p.style * normal.sample(rng)).collect();
    let shift = appearance.sources.row(source);
    let mut frames = Matrix::zeros(length, dim);
    let mut frame_labels = vec![0u8; length];
    let mut owner: Vec<Option<DomainId>> = vec![None; length];
    for s in &segments {
        for f in s.start..s.end {
            owner[f] = Some(s.domain);
            frame_labels[f] = 1;
        }
    }
    for (f, who) in owner.iter().enumerate() {
        let row = frames.row_mut(f);
        let center = who.and_then(|d| appearance.signature(d));
        for j in 0..dim {
            let base = center.map_or(0.0, |c| c[j]);
            row[j] = base + shift[j] + style[j] + p.noise * normal.sample(rng);
        }
    }
    segments.sort_by_key(|s| s.start);
    Ok(SequenceSample {
        id,
        frames,
        frame_labels,
        segments,
    })
}
