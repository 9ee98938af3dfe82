//! The staged training loop, bound variants and sweeps.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::constraint::{grow_for_stage, ConstraintState};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, average_accuracy, domain_aps, forgetting, frame_scores, AccuracyMatrix, LambdaSummary, StageReport,
};
use crate::model::{forward_backward, Batch, ModelSpec, ModelState};
use crate::numcore::{sgd_step, Matrix, ParamSet};
use crate::replay::{der_loss, er_loss, ReplayBuffer, ReplayItem, ReplayScheme};
use crate::rng::{Purpose, SeedTree};
use crate::runner::config::{ExperimentConfig, StreamKind, Variant};
use crate::streams::domains::DomainId;
use crate::streams::rotation::DigitData;
use crate::streams::synth::SequenceSample;
use crate::streams::{build_highlight_stream, build_rotation_stream, TaskStream, TestSet};

/// One multiplier update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub stage: usize,
    pub step: usize,
    pub bank_distance: f64,
    /// Multiplier after the update.
    pub lambda: f64,
}

/// Final-stage highlight scores of one test sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub sequence: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    /// Final-row mean accuracy, or the mean of stage mAPs.
    pub average_metric: f64,
    /// Metric of the last stage alone.
    pub final_metric: f64,
    /// Final-stage mean AP over the domains known at stage 1.
    pub stage1_domains_final: Option<f64>,
    pub forgetting: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Column names of the per-stage metric table beyond the fixed ones.
    pub metric_columns: Vec<String>,
    pub stages: Vec<StageReport>,
    pub accuracy: Option<AccuracyMatrix>,
    pub summary: RunSummary,
    pub lambda_trajectory: Vec<LambdaPoint>,
    pub traces: Vec<ScoreTrace>,
    /// Final prototypes in the export format of [`ModelState::export_prototypes`].
    pub prototypes: String,
}

impl RunRecord {
    /// A record with no stages, for a config that has not been run.
    pub fn empty(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.stream.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            metric_columns: Vec::new(),
            stages: Vec::new(),
            accuracy: None,
            summary: RunSummary::default(),
            lambda_trajectory: Vec::new(),
            traces: Vec::new(),
            prototypes: String::new(),
        }
    }
}

/// Builds the task stream described by `config`.
pub fn build_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    let seeds = SeedTree::new(config.stream.seed);
    match config.stream.kind {
        StreamKind::Rotation => {
            let mut data = DigitData::load_dir(&config.stream.data_dir)?;
            if config.stream.train_limit > 0 {
                data.train = data.train.truncated(config.stream.train_limit).into();
            }
            if config.stream.test_limit > 0 {
                data.test = data.test.truncated(config.stream.test_limit).into();
            }
            build_rotation_stream(&data, config.stream.tasks, config.stream.angles, &seeds)
        }
        StreamKind::Highlight => build_highlight_stream(&config.highlight_stream(), &seeds),
    }
}

pub fn model_spec(config: &ExperimentConfig, stream: &TaskStream) -> ModelSpec {
    ModelSpec {
        input_dim: stream.input_dim(),
        hidden: config.model.hidden.clone(),
        feature_dim: config.model.feature_dim,
        classes: stream.class_count(),
        prototypes_per_class: config.model.prototypes_per_class,
    }
}

/// Loads the stream and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let stream = build_stream(config)?;
    run_on_stream(config, &stream)
}

/// Training examples of stage `t` (1-based) as `(task index, example)`
/// pairs: the current task, or every task so far for the upper bound.
pub fn stage_refs(variant: Variant, stream: &TaskStream, t: usize) -> Vec<(usize, usize)> {
    let first = match variant {
        Variant::UpperBound => 0,
        _ => t - 1,
    };
    (first..t.min(stream.len()))
        .flat_map(|j| (0..stream.tasks[j].example_count()).map(move |i| (j, i)))
        .collect()
}

/// Runs every stage of `stream`: optional stage transition, the epoch
/// budget of constrained updates, then evaluation.
pub fn run_on_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunRecord> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Config("stream has no tasks".into()));
    }
    let started = Instant::now();
    let seeds = SeedTree::new(config.stream.seed);
    let variant = config.run.variant;
    let mut state = ModelState::new(&model_spec(config, stream), &mut seeds.rng(Purpose::ModelInit, 0))?;
    // Upper-bound runs never activate the constraint, so its settings are
    // replaced by inert valid ones.
    let mut cstate = match variant {
        Variant::UpperBound => ConstraintState::new(config.model.mode, 0.0, 1.0, 1.0)?,
        _ => ConstraintState::new(
            config.model.mode,
            config.constraint.lambda,
            config.constraint.gamma,
            config.dual_step(),
        )?,
    };
    let mut buffer = ReplayBuffer::new(match config.replay.scheme {
        ReplayScheme::None => 0,
        _ => config.replay.capacity,
    });
    let mut replay_rng = seeds.rng(Purpose::Replay, 0);
    let mut reservoir_rng = seeds.rng(Purpose::Replay, 1);

    let mut record = RunRecord::empty(config);
    record.metric_columns = metric_columns(stream);
    let tasks = stream.len();
    let mut matrix = AccuracyMatrix::new(tasks);
    let dim = stream.input_dim();

    for t in 1..=tasks {
        let stage_start = Instant::now();
        if t > 1 {
            grow_for_stage(
                &mut state,
                config.model.mode,
                config.model.growth_per_class,
                t,
                &mut seeds.rng(Purpose::Growth, t as u64),
            )?;
            if variant == Variant::Gpe {
                cstate.begin_stage(&state, t);
            }
        }

        let refs = stage_refs(variant, stream, t);
        let mut lambdas = Vec::new();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for epoch in 0..config.optim.epochs {
            let lr = config.optim.rate_at(epoch);
            let mut order = refs.clone();
            order.shuffle(&mut seeds.rng(Purpose::Shuffle, ((t as u64) << 32) | epoch as u64));
            for chunk in order.chunks(config.optim.batch_size) {
                let batch = gather_refs(stream, chunk, dim);
                let parts = forward_backward(&batch, &mut state, &cstate)?;
                let replay_loss = match config.replay.scheme {
                    ReplayScheme::None => 0.0,
                    ReplayScheme::Er => er_loss(&mut state, &buffer.sample(config.replay_batch(), &mut replay_rng))?,
                    ReplayScheme::Der => config.replay.alpha
                        * der_loss(
                            &mut state,
                            &buffer.sample(config.replay_batch(), &mut replay_rng),
                            config.replay.alpha,
                        )?,
                };
                let total = parts.total + replay_loss;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at stage {t}, epoch {epoch}, step {steps}: total={total}, \
                         classification={}, bank_distance={:?}, replay={replay_loss}, lambda={}",
                        parts.classification,
                        parts.bank_distance,
                        cstate.lambda()
                    )));
                }
                for block in state.param_blocks_mut() {
                    sgd_step(block, lr)?;
                }
                if let Some(d) = parts.bank_distance {
                    cstate.dual_update(d);
                    lambdas.push(cstate.lambda());
                    record.lambda_trajectory.push(LambdaPoint {
                        stage: t,
                        step: steps,
                        bank_distance: d,
                        lambda: cstate.lambda(),
                    });
                }
                if buffer.capacity() > 0 {
                    observe_batch(&mut buffer, &state, &batch, chunk, config.replay.scheme, &mut reservoir_rng)?;
                }
                loss_sum += total;
                steps += 1;
            }
            debug!("stage {t} epoch {epoch}: lr {lr}, mean loss {}", loss_sum / steps.max(1) as f64);
        }
        if !lambdas.is_empty() {
            info!(
                "stage {t}: lambda {} -> {} over {} updates",
                lambdas[0],
                lambdas[lambdas.len() - 1],
                lambdas.len()
            );
        }

        let mut report = StageReport {
            stage: t,
            task_accuracy: Vec::new(),
            domain_ap: Vec::new(),
            average: 0.0,
            mean_loss: loss_sum / steps.max(1) as f64,
            lambda: LambdaSummary::from_trajectory(&lambdas),
            prototype_counts: state.banks.iter().map(|b| b.len()).collect(),
            wall_seconds: 0.0,
        };
        match &stream.test {
            TestSet::Rotated(_) => {
                for j in 0..t {
                    let split = stream.rotated_test(j).expect("rotation stream has a test split per task");
                    let acc = accuracy(&state, &split)?;
                    matrix.set(t - 1, j, acc)?;
                    report.task_accuracy.push(acc);
                }
                report.average = report.task_accuracy.iter().sum::<f64>() / t as f64;
            }
            TestSet::Sequences(test) => {
                let scores = frame_scores(&state, test)?;
                let aps = domain_aps(&scores, test, stream.active_domains(t))?;
                report.average = aps.mean()?;
                report.domain_ap = aps.per_domain;
                if t == tasks {
                    record.traces = traces(test, &scores, config.run.trace_sequences);
                }
            }
        }
        report.wall_seconds = stage_start.elapsed().as_secs_f64();
        info!(
            "stage {t}/{tasks}: metric {:.4}, mean loss {:.4}, {:.1}s",
            report.average, report.mean_loss, report.wall_seconds
        );
        record.stages.push(report);
    }

    let last = record.stages.last().expect("at least one stage");
    record.summary.final_metric = last.average;
    match &stream.test {
        TestSet::Rotated(_) => {
            record.summary.average_metric = average_accuracy(&matrix)?;
            record.summary.forgetting = forgetting(&matrix);
            record.accuracy = Some(matrix);
        }
        TestSet::Sequences(_) => {
            record.summary.average_metric =
                record.stages.iter().map(|s| s.average).sum::<f64>() / record.stages.len() as f64;
            let first: Vec<DomainId> = stream.active_domains(1).iter().copied().collect();
            let aps: Vec<f64> = last
                .domain_ap
                .iter()
                .filter(|(d, _)| first.contains(d))
                .filter_map(|(_, ap)| *ap)
                .collect();
            if !aps.is_empty() {
                record.summary.stage1_domains_final = Some(aps.iter().sum::<f64>() / aps.len() as f64);
            }
        }
    }
    record.prototypes = state.export_prototypes();
    record.summary.wall_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

fn metric_columns(stream: &TaskStream) -> Vec<String> {
    match &stream.test {
        TestSet::Rotated(_) => (1..=stream.len()).map(|j| format!("task_{j}")).collect(),
        TestSet::Sequences(_) => stream.domains.iter().map(|d| format!("ap_{}", d.name)).collect(),
    }
}

fn gather_refs(stream: &TaskStream, refs: &[(usize, usize)], dim: usize) -> Batch {
    let mut inputs = Matrix::zeros(refs.len(), dim);
    let labels = refs
        .iter()
        .enumerate()
        .map(|(r, &(j, i))| stream.tasks[j].write_example(i, inputs.row_mut(r)))
        .collect();
    Batch { inputs, labels }
}

fn observe_batch<R: rand::Rng + ?Sized>(
    buffer: &mut ReplayBuffer,
    state: &ModelState,
    batch: &Batch,
    refs: &[(usize, usize)],
    scheme: ReplayScheme,
    rng: &mut R,
) -> Result<()> {
    for (r, &(task, _)) in refs.iter().enumerate() {
        let Some(slot) = buffer.reserve(rng) else { continue };
        let input = batch.inputs.row(r).to_vec();
        let stored_logits = match scheme {
            ReplayScheme::Der => Some(state.logits(&Matrix::from_vec(1, input.len(), input.clone())?)?.into_vec()),
            _ => None,
        };
        buffer.place(
            slot,
            ReplayItem {
                input,
                label: batch.labels[r],
                stored_logits,
                source_task: task + 1,
            },
        );
    }
    Ok(())
}

fn traces(test: &[SequenceSample], scores: &[Vec<f64>], n: usize) -> Vec<ScoreTrace> {
    test.iter()
        .zip(scores)
        .take(n)
        .map(|(s, sc)| ScoreTrace {
            sequence: s.id,
            scores: sc.clone(),
            labels: s.frame_labels.clone(),
        })
        .collect()
}

/// One run per value of `axis`, sharing every other setting and the seed.
pub fn run_sweep(base: &ExperimentConfig, axis: &str, values: &[f64]) -> Result<Vec<RunRecord>> {
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.set_numeric(axis, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    let stream = build_stream(base)?;
    configs
        .iter()
        .map(|c| {
            if axis == "tasks" || axis == "seed" {
                run_experiment(c)
            } else {
                run_on_stream(c, &stream)
            }
        })
        .collect()
}
