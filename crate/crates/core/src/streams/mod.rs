//! Incremental task streams.
//!
//! Two kinds are supported: rotated-digit streams, where every task is the
//! whole digit training split under one rotation, and highlight streams,
//! where task `t` holds sequences annotated with the domain combinations new
//! to stage `t`.

pub mod domains;
pub mod idx;
pub mod rotation;
pub mod synth;
pub mod text;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree};
use domains::{default_domains, domain_combinations, nonempty_subsets, Combination, DomainLabel};
use rotation::{DigitData, DigitSplit, RotatedDigits};
use synth::{synth_sequence, Appearance, SequenceSample, SynthProfile};

/// Identity of a training sample, used for disjointness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SampleId {
    /// Base item `index` under the rotation of task `task`.
    Digit { task: usize, index: usize },
    Sequence(usize),
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Rotated(RotatedDigits),
    Sequences(Vec<SequenceSample>),
}

#[derive(Debug, Clone)]
pub struct Task {
    /// 1-based stage index.
    pub index: usize,
    pub data: TaskData,
    pub domains: Combination,
    /// `(sequence, frame)` for every training example of a sequence task.
    frames: Vec<(u32, u32)>,
}

impl Task {
    pub fn new(index: usize, data: TaskData, domains: Combination) -> Self {
        let frames = match &data {
            TaskData::Rotated(_) => Vec::new(),
            TaskData::Sequences(seqs) => frame_index(seqs),
        };
        Self {
            index,
            data,
            domains,
            frames,
        }
    }

    /// Number of training examples (images, or frames over all sequences).
    pub fn example_count(&self) -> usize {
        match &self.data {
            TaskData::Rotated(r) => r.len(),
            TaskData::Sequences(_) => self.frames.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.data {
            TaskData::Rotated(r) => r.map.pixel_count(),
            TaskData::Sequences(s) => s.first().map_or(0, |s| s.frames.cols()),
        }
    }

    /// Writes example `i` into `out` and returns its class label.
    pub fn write_example(&self, i: usize, out: &mut [f64]) -> usize {
        match &self.data {
            TaskData::Rotated(r) => r.write(i, out),
            TaskData::Sequences(seqs) => {
                let (s, f) = self.frames[i];
                let seq = &seqs[s as usize];
                out.copy_from_slice(seq.frames.row(f as usize));
                seq.frame_labels[f as usize] as usize
            }
        }
    }

    pub fn sample_ids(&self) -> Vec<SampleId> {
        match &self.data {
            TaskData::Rotated(r) => (0..r.len())
                .map(|index| SampleId::Digit {
                    task: self.index,
                    index,
                })
                .collect(),
            TaskData::Sequences(seqs) => seqs.iter().map(|s| SampleId::Sequence(s.id)).collect(),
        }
    }

    /// Sample owning training example `i`.
    pub fn example_sample(&self, i: usize) -> SampleId {
        match &self.data {
            TaskData::Rotated(_) => SampleId::Digit {
                task: self.index,
                index: i,
            },
            TaskData::Sequences(seqs) => SampleId::Sequence(seqs[self.frames[i].0 as usize].id),
        }
    }

    pub fn angle(&self) -> Option<f64> {
        match &self.data {
            TaskData::Rotated(r) => Some(r.map.angle()),
            TaskData::Sequences(_) => None,
        }
    }
}

fn frame_index(seqs: &[SequenceSample]) -> Vec<(u32, u32)> {
    seqs.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |f| (s as u32, f as u32)))
        .collect()
}

#[derive(Debug, Clone)]
pub enum TestSet {
    /// Each task is evaluated on this split under its own rotation.
    Rotated(Arc<DigitSplit>),
    /// Fixed mixed sequences spanning every domain.
    Sequences(Vec<SequenceSample>),
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub test: TestSet,
    pub domains: Vec<DomainLabel>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn class_count(&self) -> usize {
        match &self.test {
            TestSet::Rotated(_) => 10,
            TestSet::Sequences(_) => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, Task::input_dim)
    }

    /// Test split of task `j` (0-based) of a rotation stream.
    pub fn rotated_test(&self, j: usize) -> Option<RotatedDigits> {
        match (&self.test, &self.tasks.get(j)?.data) {
            (TestSet::Rotated(split), TaskData::Rotated(r)) => Some(RotatedDigits {
                split: split.clone(),
                map: r.map.clone(),
            }),
            _ => None,
        }
    }

    /// Domain set of stage `t` (1-based).
    pub fn active_domains(&self, t: usize) -> &Combination {
        &self.tasks[t - 1].domains
    }

    /// Checks pairwise disjointness of the tasks by sample identity.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for id in t.sample_ids() {
                if !seen.insert(id) {
                    return Err(Error::Invariant(format!("sample {id:?} appears in more than one task")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleScheme {
    /// One angle per task, uniform on `[0, π)`.
    Uniform,
    /// `t·π/T` for `t = 0..T`.
    Even,
}

pub fn task_angles(tasks: usize, scheme: AngleScheme, seeds: &SeedTree) -> Vec<f64> {
    match scheme {
        AngleScheme::Uniform => {
            let mut rng = seeds.rng(Purpose::TaskAngles, 0);
            (0..tasks).map(|_| rng.random_range(0.0..PI)).collect()
        }
        AngleScheme::Even => (0..tasks).map(|t| t as f64 * PI / tasks as f64).collect(),
    }
}

/// `tasks` rotated copies of the full training split; the test split is
/// shared and rotated per task at evaluation time.
pub fn build_rotation_stream(base: &DigitData, tasks: usize, scheme: AngleScheme, seeds: &SeedTree) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(Error::Config("a stream needs at least one task".into()));
    }
    let tasks = task_angles(tasks, scheme, seeds)
        .into_iter()
        .enumerate()
        .map(|(i, angle)| {
            Task::new(
                i + 1,
                TaskData::Rotated(RotatedDigits::new(base.train.clone(), angle)),
                Combination::new(),
            )
        })
        .collect();
    Ok(TaskStream {
        tasks,
        test: TestSet::Rotated(base.test.clone()),
        domains: Vec::new(),
    })
}

/// Layout of a synthetic highlight stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighlightStreamConfig {
    /// Domain names in order of introduction; stage `t` knows the first `t`.
    pub domains: Vec<String>,
    /// Set from the stream's task count.
    #[serde(skip)]
    pub tasks: usize,
    pub sequences_per_task: Vec<usize>,
    pub test_sequences: usize,
    pub sequence_length: usize,
    #[serde(skip)]
    pub profile: SynthProfile,
}

impl Default for HighlightStreamConfig {
    fn default() -> Self {
        Self {
            domains: default_domains().into_iter().map(|d| d.name).collect(),
            tasks: 4,
            sequences_per_task: vec![48, 16, 8, 4],
            test_sequences: 60,
            sequence_length: 300,
            profile: SynthProfile::default(),
        }
    }
}

impl HighlightStreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.tasks == 0 || self.tasks > self.domains.len() {
            return Err(Error::Config(format!(
                "{} tasks need between 1 and {} domains",
                self.tasks,
                self.domains.len()
            )));
        }
        if self.sequences_per_task.len() < self.tasks {
            return Err(Error::Config(format!(
                "sequences_per_task lists {} tasks, stream has {}",
                self.sequences_per_task.len(),
                self.tasks
            )));
        }
        if self.sequences_per_task[..self.tasks].contains(&0) || self.test_sequences == 0 {
            return Err(Error::Config("every task and the test set need at least one sequence".into()));
        }
        let unique: BTreeSet<&String> = self.domains.iter().collect();
        if unique.len() != self.domains.len() {
            return Err(Error::Config("domain names must be unique".into()));
        }
        Ok(())
    }

    pub fn domain_labels(&self) -> Vec<DomainLabel> {
        self.domains
            .iter()
            .enumerate()
            .map(|(i, n)| DomainLabel {
                id: i as u32 + 1,
                name: n.clone(),
            })
            .collect()
    }
}

/// Task `t` holds only sequences whose annotated combination is new to stage
/// `t`; the test set cycles through every combination of all domains.
pub fn build_highlight_stream(config: &HighlightStreamConfig, seeds: &SeedTree) -> Result<TaskStream> {
    config.validate()?;
    let labels = config.domain_labels();
    let all: Vec<u32> = labels.iter().map(|d| d.id).collect();
    let sets: Vec<Combination> = (1..=config.tasks).map(|t| all[..t].iter().copied().collect()).collect();
    let combos = domain_combinations(&sets)?;
    if let Some(t) = combos.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("stage {} introduces no combination", t + 1)));
    }
    let appearance = Appearance::new(
        config.profile.clone(),
        &all[..config.tasks],
        config.tasks,
        &mut seeds.rng(Purpose::Synth, 0),
    )?;

    let mut next_id = 0;
    let mut tasks = Vec::with_capacity(config.tasks);
    for (t, ct) in combos.iter().enumerate() {
        let mut rng = seeds.rng(Purpose::Synth, 1 + t as u64);
        let n = config.sequences_per_task[t];
        let mut seqs = Vec::with_capacity(n);
        for i in 0..n {
            seqs.push(synth_sequence(next_id, &ct[i % ct.len()], config.sequence_length, t, &appearance, &mut rng)?);
            next_id += 1;
        }
        tasks.push(Task::new(t + 1, TaskData::Sequences(seqs), sets[t].clone()));
    }

    let everything = nonempty_subsets(&sets[config.tasks - 1]);
    let mut rng = seeds.rng(Purpose::Synth, 10_000);
    let mut test = Vec::with_capacity(config.test_sequences);
    for i in 0..config.test_sequences {
        let comb = &everything[i % everything.len()];
        test.push(synth_sequence(next_id, comb, config.sequence_length, i % config.tasks, &appearance, &mut rng)?);
        next_id += 1;
    }
    Ok(TaskStream {
        tasks,
        test: TestSet::Sequences(test),
        domains: labels[..config.tasks].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_digits() -> DigitData {
        let split = |n: usize| {
            Arc::new(DigitSplit {
                height: 4,
                width: 4,
                pixels: (0..n * 16).map(|i| (i * 37 % 256) as u8).collect(),
                labels: (0..n).map(|i| (i % 10) as u8).collect(),
            })
        };
        DigitData {
            train: split(12),
            test: split(5),
        }
    }

    #[test]
    fn single_rotation_task() {
        let s = build_rotation_stream(&tiny_digits(), 1, AngleScheme::Uniform, &SeedTree::new(0)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.tasks[0].example_count(), 12);
        let a = s.tasks[0].angle().unwrap();
        assert!((0.0..PI).contains(&a));
    }

    #[test]
    fn rotation_stream_is_deterministic_with_distinct_angles() {
        let data = tiny_digits();
        let a = build_rotation_stream(&data, 20, AngleScheme::Uniform, &SeedTree::new(0)).unwrap();
        let b = build_rotation_stream(&data, 20, AngleScheme::Uniform, &SeedTree::new(0)).unwrap();
        let angles: Vec<f64> = a.tasks.iter().map(|t| t.angle().unwrap()).collect();
        assert_eq!(angles, b.tasks.iter().map(|t| t.angle().unwrap()).collect::<Vec<_>>());
        let mut sorted = angles.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        let mut x = vec![0.0; 16];
        let mut y = vec![0.0; 16];
        for t in 0..20 {
            for i in 0..12 {
                assert_eq!(a.tasks[t].write_example(i, &mut x), b.tasks[t].write_example(i, &mut y));
                assert_eq!(x, y);
            }
        }
        a.check_disjoint().unwrap();
    }

    #[test]
    fn even_angles_are_a_grid() {
        let angles = task_angles(4, AngleScheme::Even, &SeedTree::new(0));
        assert_eq!(angles, vec![0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0]);
    }

    #[test]
    fn highlight_tasks_use_only_their_combinations() {
        let cfg = HighlightStreamConfig::default();
        let s = build_highlight_stream(&cfg, &SeedTree::new(3)).unwrap();
        assert_eq!(s.len(), 4);
        let sets: Vec<Combination> = (1..=4u32).map(|t| (1..=t).collect()).collect();
        let combos = domain_combinations(&sets).unwrap();
        for (t, task) in s.tasks.iter().enumerate() {
            assert_eq!(task.domains, sets[t]);
            let TaskData::Sequences(seqs) = &task.data else { panic!() };
            assert_eq!(seqs.len(), cfg.sequences_per_task[t]);
            for q in seqs {
                assert!(combos[t].contains(&q.combination()));
            }
        }
        let TestSet::Sequences(test) = &s.test else { panic!() };
        let covered: BTreeSet<Combination> = test.iter().map(SequenceSample::combination).collect();
        assert_eq!(covered.len(), 15);
    }

    #[test]
    fn single_task_highlight_stream() {
        let cfg = HighlightStreamConfig {
            tasks: 1,
            ..HighlightStreamConfig::default()
        };
        let s = build_highlight_stream(&cfg, &SeedTree::new(0)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.domains.len(), 1);
    }

    #[test]
    fn highlight_tasks_are_disjoint_across_seeds() {
        for seed in 0..10 {
            let s = build_highlight_stream(&HighlightStreamConfig::default(), &SeedTree::new(seed)).unwrap();
            s.check_disjoint().unwrap();
            let TestSet::Sequences(test) = &s.test else { panic!() };
            let train: BTreeSet<SampleId> = s.tasks.iter().flat_map(Task::sample_ids).collect();
            assert!(test.iter().all(|q| !train.contains(&SampleId::Sequence(q.id))));
        }
    }

    #[test]
    fn highlight_stream_is_deterministic() {
        let cfg = HighlightStreamConfig::default();
        let a = build_highlight_stream(&cfg, &SeedTree::new(5)).unwrap();
        let b = build_highlight_stream(&cfg, &SeedTree::new(5)).unwrap();
        assert_eq!(text::stream_records(&a), text::stream_records(&b));
        let (TestSet::Sequences(x), TestSet::Sequences(y)) = (&a.test, &b.test) else { panic!() };
        assert_eq!(x, y);
    }

    #[test]
    fn invalid_highlight_config() {
        let cfg = HighlightStreamConfig {
            tasks: 5,
            ..HighlightStreamConfig::default()
        };
        assert!(matches!(build_highlight_stream(&cfg, &SeedTree::new(0)), Err(Error::Config(_))));
    }
}
