//! Deterministic discrete-event simulation of an asynchronous rollout/training
//! pipeline.
//!
//! Workers generate groups of trajectories under whatever weights they last
//! received; the trainer consumes `batch_size / group_size` completed groups per
//! update. Old-logit acquisition follows the configured strategy. A single
//! event loop drives everything, so a `(config, task)` pair fixes the output.

mod config;
mod events;
mod trainer;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{partial_interrupt_pass, AcquisitionStrategy, CostReport, DedicatedModel, SnapshotStore};
use crate::error::{Error, Result};
use crate::ewma::EwmaState;
use crate::policy::{logprob_train, mix_seed, EpisodeCursor, PolicyParams, SyntheticTask, Version, VersionedParams};
use crate::ratio::TokenSample;

pub use config::{AdvantageMode, EwmaConfig, LatencyDist, MissingPolicy, SimConfig};
pub use events::{SimEvent, SimEventKind};
pub use trainer::{compute_advantages, StepStats, TokenOutcome, Trainer, ADVANTAGE_DELTA};

use events::EventQueue;

/// Per-update training signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Actor version produced by this update.
    pub version: Version,
    /// Sim time at which the update was applied.
    pub time: f64,
    pub task_success: f64,
    pub mean_reward: f64,
    /// Fraction of batch tokens that passed every mask and the PPO clip (`rho_t`).
    pub mask_fraction: f64,
    pub ppo_clip_fraction: f64,
    pub disc_masked_fraction: f64,
    pub mean_version_gap: f64,
    pub max_version_gap: u64,
    pub tokens: u64,
    pub active_tokens: u64,
    pub dropped_tokens: u64,
    pub multi_version_trajectories: u64,
    pub reset_events: u64,
    pub reset_count: u64,
    pub low_rho_streak: u64,
    pub audit_mismatches: u64,
    pub cost: CostReport,
}

impl StepMetrics {
    /// Copy with the simulated-time and cost fields cleared, for comparing runs
    /// whose schedules differ only in timing.
    pub fn without_timing(&self) -> Self {
        Self {
            time: 0.0,
            cost: CostReport::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    StalenessOverflow,
    SnapshotEvicted,
    MissingOldLogit,
    RunEnd,
}

/// Token conservation: every generated token is consumed once or dropped for a reason.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleAccounting {
    pub generated: u64,
    pub consumed: u64,
    pub dropped: BTreeMap<DropReason, u64>,
}

impl SampleAccounting {
    fn drop_tokens(&mut self, reason: DropReason, n: u64) {
        if n > 0 {
            *self.dropped.entry(reason).or_default() += n;
        }
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn dropped_for(&self, reason: DropReason) -> u64 {
        self.dropped.get(&reason).copied().unwrap_or(0)
    }

    pub fn reconciles(&self) -> bool {
        self.generated == self.consumed + self.dropped_total()
    }
}

/// Versions that generated one consumed trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub group: u64,
    pub trajectory: usize,
    pub versions: Vec<Version>,
}

/// One consumed token with the reference values the trainer used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub step: u64,
    pub group: u64,
    pub trajectory: usize,
    pub position: usize,
    pub rollout_version: Version,
    pub logp_train_old: Option<f64>,
    pub active: bool,
    pub clip_active: bool,
    pub mask_active: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub tokens: Vec<TokenRecord>,
}

/// End-of-run aggregates. "Final" values average the last ten updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub updates: u64,
    pub final_success: f64,
    pub peak_success: f64,
    pub final_mask_fraction: f64,
    pub min_mask_fraction: f64,
    pub mean_mask_fraction: f64,
    pub mean_clip_fraction: f64,
    pub reset_count: u64,
    pub max_observed_gap: u64,
    pub sim_time: f64,
    pub snapshot_evictions: u64,
    pub accounting: SampleAccounting,
    pub cost: CostReport,
}

pub const FINAL_WINDOW: usize = 10;

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl RunSummary {
    pub fn from_metrics(metrics: &[StepMetrics], accounting: SampleAccounting, snapshot_evictions: u64) -> Self {
        let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
        let mut cost = CostReport::default();
        for m in metrics {
            cost += m.cost;
        }
        Self {
            updates: metrics.len() as u64,
            final_success: mean(tail.iter().map(|m| m.task_success)),
            peak_success: metrics.iter().map(|m| m.task_success).fold(0.0, f64::max),
            final_mask_fraction: mean(tail.iter().map(|m| m.mask_fraction)),
            min_mask_fraction: metrics.iter().map(|m| m.mask_fraction).fold(1.0, f64::min),
            mean_mask_fraction: mean(metrics.iter().map(|m| m.mask_fraction)),
            mean_clip_fraction: mean(metrics.iter().map(|m| m.ppo_clip_fraction)),
            reset_count: metrics.last().map_or(0, |m| m.reset_count),
            max_observed_gap: metrics.iter().map(|m| m.max_version_gap).max().unwrap_or(0),
            sim_time: metrics.last().map_or(0.0, |m| m.time),
            snapshot_evictions,
            accounting,
            cost,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: Vec<StepMetrics>,
    pub final_params: VersionedParams,
    pub ewma: Option<EwmaState>,
    pub summary: RunSummary,
    pub trace: Option<SimTrace>,
}

/// Starting actor for a run.
pub fn initial_params(cfg: &SimConfig, task: &SyntheticTask) -> PolicyParams {
    if cfg.init_scale > 0.0 {
        PolicyParams::random(
            task.num_contexts(),
            task.vocab_size(),
            cfg.init_scale,
            mix_seed(&[cfg.seed, 0x1417]),
        )
    } else {
        task.zero_params()
    }
}

/// A completed group waiting for the trainer.
#[derive(Debug, Clone)]
struct CompletedGroup {
    index: u64,
    rewards: Vec<f64>,
    trajectories: Vec<Vec<TokenSample>>,
}

impl CompletedGroup {
    fn min_version(&self) -> Version {
        self.trajectories
            .iter()
            .flatten()
            .map(|s| s.rollout_version)
            .min()
            .unwrap_or(0)
    }

    fn token_count(&self) -> u64 {
        self.trajectories.iter().map(|t| t.len() as u64).sum()
    }
}

/// One rollout job: `group_size` trajectories from one prompt, decoded in lockstep.
///
/// The sampling stream depends only on the run seed, task seed and group
/// index, so the same group is identical whichever worker produces it.
#[derive(Debug, Clone)]
struct GroupJob {
    index: u64,
    rng: ChaCha8Rng,
    cursors: Vec<EpisodeCursor>,
}

impl GroupJob {
    fn new(cfg: &SimConfig, task: &SyntheticTask, index: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, task.config().seed, index]));
        let prompt = rng.random_range(0..task.num_contexts());
        let cursors = (0..cfg.group_size)
            .map(|_| EpisodeCursor::at(prompt, task))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { index, rng, cursors })
    }

    fn decode_step(&mut self, params: &VersionedParams, task: &SyntheticTask, cfg: &SimConfig) -> Result<u64> {
        for c in &mut self.cursors {
            c.step(params, task, &cfg.discrepancy, &mut self.rng)?;
        }
        Ok(self.cursors.len() as u64)
    }

    fn is_done(&self, task: &SyntheticTask) -> bool {
        self.cursors.iter().all(|c| c.is_done(task))
    }

    fn samples_mut(&mut self) -> impl Iterator<Item = &mut TokenSample> {
        self.cursors.iter_mut().flat_map(|c| c.samples.iter_mut())
    }

    fn token_count(&self) -> u64 {
        self.cursors.iter().map(|c| c.samples.len() as u64).sum()
    }

    fn finish(self, cfg: &SimConfig) -> Result<CompletedGroup> {
        let rewards: Vec<f64> = self.cursors.iter().map(EpisodeCursor::reward).collect();
        let adv = compute_advantages(&rewards, cfg.group_size, cfg.advantage)?;
        let trajectories = self
            .cursors
            .into_iter()
            .zip(adv)
            .map(|(c, a)| {
                let mut samples = c.samples;
                for s in &mut samples {
                    s.advantage = a;
                }
                samples
            })
            .collect();
        Ok(CompletedGroup {
            index: self.index,
            rewards,
            trajectories,
        })
    }
}

#[derive(Debug)]
struct Worker {
    weights: Arc<VersionedParams>,
    job: Option<GroupJob>,
    rng: ChaCha8Rng,
    deferred: Option<f64>,
}

#[derive(Debug)]
struct Pending {
    groups: Vec<CompletedGroup>,
    batch: Vec<TokenSample>,
    origin: Vec<(u64, usize)>,
    next: PolicyParams,
    stats: StepStats,
    cost: CostReport,
    dropped: u64,
    audit_mismatches: u64,
}

#[derive(Debug)]
enum TrainerPhase {
    Idle,
    Interrupting,
    Starting,
    Updating(Box<Pending>),
}

/// Flattened batch with `(group, trajectory)` of every token.
fn flatten(groups: &[CompletedGroup]) -> (Vec<TokenSample>, Vec<(u64, usize)>) {
    let mut batch = Vec::new();
    let mut origin = Vec::new();
    for g in groups {
        for (j, t) in g.trajectories.iter().enumerate() {
            batch.extend(t.iter().cloned());
            origin.extend(std::iter::repeat_n((g.index, j), t.len()));
        }
    }
    (batch, origin)
}

fn batch_rewards(task: &SyntheticTask, groups: &[CompletedGroup]) -> (f64, f64) {
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    (
        mean(rewards.iter().map(|&r| task.normalized_success(r))),
        mean(rewards.iter().copied()),
    )
}

fn multi_version_count(groups: &[CompletedGroup]) -> u64 {
    groups
        .iter()
        .flat_map(|g| &g.trajectories)
        .filter(|t| t.windows(2).any(|w| w[0].rollout_version != w[1].rollout_version))
        .count() as u64
}

fn distinct_versions(t: &[TokenSample]) -> Vec<Version> {
    let mut v: Vec<Version> = t.iter().map(|s| s.rollout_version).collect();
    v.sort_unstable();
    v.dedup();
    v
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    task: &'a SyntheticTask,
    queue: EventQueue,
    now: f64,
    trainer: Trainer,
    workers: Vec<Worker>,
    completed: BTreeMap<u64, CompletedGroup>,
    outstanding: usize,
    next_group: u64,
    store: Option<SnapshotStore>,
    dedicated: Option<DedicatedModel>,
    archive: Vec<Arc<VersionedParams>>,
    phase: TrainerPhase,
    paused_at: Option<f64>,
    trainer_rng: ChaCha8Rng,
    carry_cost: CostReport,
    metrics: Vec<StepMetrics>,
    accounting: SampleAccounting,
    trace: Option<SimTrace>,
    finished: bool,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, task: &'a SyntheticTask) -> Result<Self> {
        let trainer = Trainer::new(cfg, initial_params(cfg, task))?;
        let actor = Arc::clone(trainer.actor());
        let workers = (0..cfg.num_workers)
            .map(|i| Worker {
                weights: Arc::clone(&actor),
                job: None,
                rng: ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5741, i as u64])),
                deferred: None,
            })
            .collect();
        let store = match cfg.strategy {
            AcquisitionStrategy::Snapshot => Some(SnapshotStore::new(cfg.max_resident, cfg.cost)?),
            _ => None,
        };
        let dedicated = match cfg.strategy {
            AcquisitionStrategy::DedicatedModel => Some(DedicatedModel::new(cfg.max_version_gap as usize, cfg.dedicated_overlap)),
            _ => None,
        };
        Ok(Self {
            cfg,
            task,
            queue: EventQueue::default(),
            now: 0.0,
            trainer,
            workers,
            completed: BTreeMap::new(),
            outstanding: 0,
            next_group: 0,
            store,
            dedicated,
            archive: vec![actor],
            phase: TrainerPhase::Idle,
            paused_at: None,
            trainer_rng: ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5452])),
            carry_cost: CostReport::default(),
            metrics: Vec::new(),
            accounting: SampleAccounting::default(),
            trace: cfg.trace.then(SimTrace::default),
            finished: false,
        })
    }

    fn record(&mut self, kind: SimEventKind, worker: Option<usize>, group: Option<u64>) {
        let version = self.trainer.version();
        if let Some(t) = self.trace.as_mut() {
            t.events.push(SimEvent {
                time: self.now,
                kind,
                worker,
                group,
                version,
            });
        }
    }

    fn capacity(&self) -> usize {
        self.cfg.max_version_gap as usize * self.cfg.groups_per_batch()
    }

    fn run(mut self) -> Result<SimOutput> {
        let actor = Arc::clone(self.trainer.actor());
        if let Some(store) = self.store.as_mut() {
            self.carry_cost += store.put((*actor).clone())?;
        }
        if let Some(d) = self.dedicated.as_mut() {
            d.sync(0, Arc::new(actor.params.clone()));
        }
        for w in 0..self.workers.len() {
            self.try_start(w)?;
        }
        while !self.finished {
            let ev = self
                .queue
                .pop()
                .ok_or_else(|| Error::Protocol("simulation stalled with an empty event queue".into()))?;
            self.now = ev.time;
            match ev.kind {
                SimEventKind::DecodeStep => self.on_decode(ev.worker.expect("decode event without worker"))?,
                SimEventKind::Interrupt => self.on_interrupt()?,
                SimEventKind::UpdateBegin => self.on_update_begin()?,
                SimEventKind::UpdateEnd => self.on_update_end()?,
                other => unreachable!("{other:?} is never scheduled"),
            }
        }
        let mut left = 0;
        for g in self.completed.values() {
            left += g.token_count();
        }
        for w in &self.workers {
            if let Some(j) = &w.job {
                left += j.token_count();
            }
        }
        self.accounting.drop_tokens(DropReason::RunEnd, left);
        let evictions = self.store.as_ref().map_or(0, SnapshotStore::evictions);
        let summary = RunSummary::from_metrics(&self.metrics, self.accounting, evictions);
        Ok(SimOutput {
            metrics: self.metrics,
            final_params: (**self.trainer.actor()).clone(),
            ewma: self.trainer.ewma().cloned(),
            summary,
            trace: self.trace,
        })
    }

    fn try_start(&mut self, w: usize) -> Result<()> {
        if self.finished || self.paused_at.is_some() || self.workers[w].job.is_some() {
            return Ok(());
        }
        if self.outstanding >= self.capacity() {
            return Ok(());
        }
        let job = GroupJob::new(self.cfg, self.task, self.next_group)?;
        self.next_group += 1;
        self.outstanding += 1;
        let worker = &mut self.workers[w];
        worker.weights = Arc::clone(self.trainer.actor());
        worker.job = Some(job);
        let dt = self.cfg.rollout_latency.sample(&mut worker.rng);
        self.queue.push(self.now + dt, SimEventKind::DecodeStep, Some(w));
        Ok(())
    }

    fn start_idle_workers(&mut self) -> Result<()> {
        for w in 0..self.workers.len() {
            self.try_start(w)?;
        }
        Ok(())
    }

    fn on_decode(&mut self, w: usize) -> Result<()> {
        if self.paused_at.is_some() {
            self.workers[w].deferred = Some(self.now);
            return Ok(());
        }
        let worker = &mut self.workers[w];
        let job = worker.job.as_mut().expect("decode event for an idle worker");
        self.accounting.generated += job.decode_step(&worker.weights, self.task, self.cfg)?;
        if !job.is_done(self.task) {
            let dt = self.cfg.rollout_latency.sample(&mut worker.rng);
            self.queue.push(self.now + dt, SimEventKind::DecodeStep, Some(w));
            return Ok(());
        }
        let job = worker.job.take().expect("job present");
        let group = job.finish(self.cfg)?;
        let index = group.index;
        self.completed.insert(index, group);
        self.record(SimEventKind::RolloutComplete, Some(w), Some(index));
        self.try_start(w)?;
        self.try_train()
    }

    fn try_train(&mut self) -> Result<()> {
        if self.finished || !matches!(self.phase, TrainerPhase::Idle) {
            return Ok(());
        }
        let limit = self.cfg.max_version_gap;
        let next_version = self.trainer.version() + 1;
        let stale: Vec<u64> = self
            .completed
            .values()
            .filter(|g| next_version - g.min_version() > limit)
            .map(|g| g.index)
            .collect();
        for idx in stale {
            let g = self.completed.remove(&idx).expect("stale group present");
            self.accounting.drop_tokens(DropReason::StalenessOverflow, g.token_count());
            self.outstanding -= 1;
        }
        self.start_idle_workers()?;
        if self.completed.len() < self.cfg.groups_per_batch() {
            return Ok(());
        }
        if self.cfg.strategy == AcquisitionStrategy::PartialInterrupt {
            self.phase = TrainerPhase::Interrupting;
            self.queue.push(self.now, SimEventKind::Interrupt, None);
        } else {
            self.phase = TrainerPhase::Starting;
            self.queue.push(self.now, SimEventKind::UpdateBegin, None);
        }
        Ok(())
    }

    fn on_interrupt(&mut self) -> Result<()> {
        self.record(SimEventKind::Interrupt, None, None);
        self.paused_at = Some(self.now);
        let actor = Arc::clone(self.trainer.actor());
        let in_flight = self
            .workers
            .iter_mut()
            .filter_map(|w| w.job.as_mut())
            .flat_map(GroupJob::samples_mut);
        let waiting = self
            .completed
            .values_mut()
            .flat_map(|g| g.trajectories.iter_mut().flatten());
        let report = partial_interrupt_pass(in_flight.chain(waiting), &actor, &self.cfg.cost)?;
        self.carry_cost += report;
        self.queue.push(self.now + report.pause_time, SimEventKind::UpdateBegin, None);
        Ok(())
    }

    /// Handles a token lacking a required `pi_old`; returns whether it is dropped.
    fn missing(&self, s: &TokenSample, evicted: bool) -> Result<DropReason> {
        match (self.cfg.on_missing_old_logit, evicted) {
            (MissingPolicy::Drop, true) => Ok(DropReason::SnapshotEvicted),
            (MissingPolicy::Drop, false) => Ok(DropReason::MissingOldLogit),
            (MissingPolicy::Error, true) => Err(Error::SnapshotEvicted {
                version: s.rollout_version,
            }),
            (MissingPolicy::Error, false) => Err(Error::MissingOldLogit {
                variant: self.cfg.mis.variant,
                version: s.rollout_version,
            }),
        }
    }

    fn on_update_begin(&mut self) -> Result<()> {
        self.record(SimEventKind::UpdateBegin, None, None);
        self.phase = TrainerPhase::Starting;
        let gpb = self.cfg.groups_per_batch();
        let keys: Vec<u64> = self.completed.keys().take(gpb).copied().collect();
        let groups: Vec<CompletedGroup> = keys
            .iter()
            .map(|k| self.completed.remove(k).expect("selected group present"))
            .collect();
        let (mut batch, mut origin) = flatten(&groups);
        let version = self.trainer.version();
        let update_time = self.cfg.update_latency.sample(&mut self.trainer_rng);
        let mut cost = std::mem::take(&mut self.carry_cost);
        let needs_old = self.cfg.mis.variant.needs_train_old();

        // which tokens the strategy can serve, then acquire for those
        let available: Vec<bool> = match self.cfg.strategy {
            AcquisitionStrategy::Snapshot => {
                let store = self.store.as_ref().expect("snapshot store");
                batch.iter().map(|s| store.contains(s.rollout_version)).collect()
            }
            AcquisitionStrategy::DedicatedModel => {
                let held = self.dedicated.as_ref().expect("dedicated model").held_versions();
                batch.iter().map(|s| held.contains(&s.rollout_version)).collect()
            }
            AcquisitionStrategy::PartialInterrupt => {
                if let Some(s) = batch.iter().find(|s| s.logp_train_old.is_none()) {
                    return Err(Error::Protocol(format!(
                        "token from version {} reached the trainer without old logits",
                        s.rollout_version
                    )));
                }
                vec![true; batch.len()]
            }
            AcquisitionStrategy::None => batch.iter().map(|s| s.rollout_version == version).collect(),
        };
        let mut dropped = 0;
        if needs_old && available.iter().any(|a| !a) {
            let evicted = self.cfg.strategy != AcquisitionStrategy::None;
            let mut keep_batch = Vec::with_capacity(batch.len());
            let mut keep_origin = Vec::with_capacity(batch.len());
            for ((s, o), ok) in batch.into_iter().zip(origin).zip(&available) {
                if *ok {
                    keep_batch.push(s);
                    keep_origin.push(o);
                } else {
                    let reason = self.missing(&s, evicted)?;
                    self.accounting.drop_tokens(reason, 1);
                    dropped += 1;
                }
            }
            batch = keep_batch;
            origin = keep_origin;
        }
        let idx: Vec<usize> = match needs_old {
            true => (0..batch.len()).collect(),
            false => (0..batch.len()).filter(|&i| available[i]).collect(),
        };
        let mut subset: Vec<TokenSample> = idx.iter().map(|&i| batch[i].clone()).collect();
        let busy = match self.cfg.strategy {
            AcquisitionStrategy::Snapshot => {
                let r = self.store.as_mut().expect("snapshot store").recover_old_logits(&mut subset)?;
                cost += r;
                r.stage_time + update_time
            }
            AcquisitionStrategy::DedicatedModel => {
                let d = self.dedicated.as_ref().expect("dedicated model");
                let r = d.recover_batch(&mut subset, &self.cfg.cost, update_time)?;
                cost += r;
                r.stage_time
            }
            AcquisitionStrategy::PartialInterrupt => update_time,
            AcquisitionStrategy::None => {
                let actor = Arc::clone(self.trainer.actor());
                for s in &mut subset {
                    s.logp_train_old = Some(logprob_train(&actor.params, s.context, s.token)?);
                }
                update_time
            }
        };
        if self.cfg.strategy != AcquisitionStrategy::PartialInterrupt {
            for (&i, s) in idx.iter().zip(subset) {
                batch[i].logp_train_old = s.logp_train_old;
            }
        }
        cost.update_time = update_time;

        for s in &batch {
            let gap = version + 1 - s.rollout_version;
            if gap > self.cfg.max_version_gap {
                return Err(Error::Protocol(format!(
                    "staleness bound violated: gap {gap} exceeds {}",
                    self.cfg.max_version_gap
                )));
            }
        }
        let mut audit_mismatches = 0;
        if self.cfg.audit {
            for s in &batch {
                if let Some(lp) = s.logp_train_old {
                    let params = &self.archive[s.rollout_version as usize].params;
                    if logprob_train(params, s.context, s.token)?.to_bits() != lp.to_bits() {
                        audit_mismatches += 1;
                    }
                }
            }
        }

        let (next, stats) = self.trainer.compute_step(&batch)?;
        let mut busy = busy;
        if let Some(store) = self.store.as_mut() {
            let r = store.put(VersionedParams::new(version + 1, next.clone()))?;
            busy += r.stage_time;
            cost += r;
        }
        self.phase = TrainerPhase::Updating(Box::new(Pending {
            groups,
            batch,
            origin,
            next,
            stats,
            cost,
            dropped,
            audit_mismatches,
        }));
        self.queue.push(self.now + busy, SimEventKind::UpdateEnd, None);
        Ok(())
    }

    fn on_update_end(&mut self) -> Result<()> {
        let phase = std::mem::replace(&mut self.phase, TrainerPhase::Idle);
        let TrainerPhase::Updating(p) = phase else {
            return Err(Error::Protocol("update_end without a pending update".into()));
        };
        let mut p = *p;
        let step = self.metrics.len() as u64;
        let actor = self.trainer.apply_step(p.next, &mut p.stats)?;
        self.archive.push(Arc::clone(&actor));
        self.accounting.consumed += p.batch.len() as u64;
        self.record(SimEventKind::UpdateEnd, None, None);

        let (task_success, mean_reward) = batch_rewards(self.task, &p.groups);
        let stats = &p.stats;
        self.metrics.push(StepMetrics {
            step,
            version: actor.version,
            time: self.now,
            task_success,
            mean_reward,
            mask_fraction: stats.mask_fraction(),
            ppo_clip_fraction: stats.clip_fraction(),
            disc_masked_fraction: stats.disc_masked_fraction(),
            mean_version_gap: stats.mean_gap(),
            max_version_gap: stats.max_gap,
            tokens: stats.tokens,
            active_tokens: stats.active_tokens,
            dropped_tokens: p.dropped,
            multi_version_trajectories: multi_version_count(&p.groups),
            reset_events: u64::from(stats.reset),
            reset_count: self.trainer.reset_count(),
            low_rho_streak: self.trainer.low_rho_streak(),
            audit_mismatches: p.audit_mismatches,
            cost: p.cost,
        });
        if let Some(t) = self.trace.as_mut() {
            for g in &p.groups {
                for (j, traj) in g.trajectories.iter().enumerate() {
                    t.trajectories.push(TrajectoryRecord {
                        step,
                        group: g.index,
                        trajectory: j,
                        versions: distinct_versions(traj),
                    });
                }
            }
            for ((s, &(group, trajectory)), o) in p.batch.iter().zip(&p.origin).zip(&p.stats.outcomes) {
                t.tokens.push(TokenRecord {
                    step,
                    group,
                    trajectory,
                    position: s.position,
                    rollout_version: s.rollout_version,
                    logp_train_old: s.logp_train_old,
                    active: o.active,
                    clip_active: o.clip_active,
                    mask_active: o.mask_active,
                });
            }
        }

        // weight broadcast
        self.record(SimEventKind::WeightsSync, None, None);
        if let Some(d) = self.dedicated.as_mut() {
            d.sync(actor.version, Arc::new(actor.params.clone()));
        }
        let mut partials = Vec::new();
        for (w, worker) in self.workers.iter_mut().enumerate() {
            match &worker.job {
                None => worker.weights = Arc::clone(&actor),
                Some(job) if self.cfg.partial_rollout => {
                    partials.push((w, job.index));
                    worker.weights = Arc::clone(&actor);
                }
                Some(_) => {}
            }
        }
        for (w, group) in partials {
            self.record(SimEventKind::RolloutPartial, Some(w), Some(group));
        }
        self.outstanding -= p.groups.len();
        if let Some(start) = self.paused_at.take() {
            let shift = self.now - start;
            for (w, worker) in self.workers.iter_mut().enumerate() {
                if let Some(t) = worker.deferred.take() {
                    self.queue.push(t + shift, SimEventKind::DecodeStep, Some(w));
                }
            }
        }
        if self.metrics.len() as u64 >= self.cfg.total_updates {
            self.finished = true;
            return Ok(());
        }
        self.start_idle_workers()?;
        self.try_train()
    }
}

/// Runs the asynchronous pipeline for `cfg.total_updates` trainer steps.
pub fn run_simulation(cfg: &SimConfig, task: &SyntheticTask) -> Result<SimOutput> {
    cfg.validate()?;
    check_task(cfg, task)?;
    Sim::new(cfg, task)?.run()
}

fn check_task(cfg: &SimConfig, task: &SyntheticTask) -> Result<()> {
    let _ = cfg;
    if task.num_contexts() == 0 || task.vocab_size() == 0 {
        return Err(Error::config("task has an empty shape"));
    }
    Ok(())
}

/// Synchronous reference: every batch is generated by the current actor and
/// consumed immediately, with no event loop, costs or timing.
pub fn run_synchronous(cfg: &SimConfig, task: &SyntheticTask) -> Result<SimOutput> {
    cfg.validate()?;
    check_task(cfg, task)?;
    let mut trainer = Trainer::new(cfg, initial_params(cfg, task))?;
    let gpb = cfg.groups_per_batch() as u64;
    let mut metrics = Vec::new();
    let mut accounting = SampleAccounting::default();
    for step in 0..cfg.total_updates {
        let actor = Arc::clone(trainer.actor());
        let mut groups = Vec::with_capacity(gpb as usize);
        for index in step * gpb..(step + 1) * gpb {
            let mut job = GroupJob::new(cfg, task, index)?;
            while !job.is_done(task) {
                accounting.generated += job.decode_step(&actor, task, cfg)?;
            }
            groups.push(job.finish(cfg)?);
        }
        let (mut batch, _) = flatten(&groups);
        for s in &mut batch {
            s.logp_train_old = Some(logprob_train(&actor.params, s.context, s.token)?);
        }
        let (actor, stats) = trainer.step(&batch)?;
        accounting.consumed += batch.len() as u64;
        let (task_success, mean_reward) = batch_rewards(task, &groups);
        metrics.push(StepMetrics {
            step,
            version: actor.version,
            time: 0.0,
            task_success,
            mean_reward,
            mask_fraction: stats.mask_fraction(),
            ppo_clip_fraction: stats.clip_fraction(),
            disc_masked_fraction: stats.disc_masked_fraction(),
            mean_version_gap: stats.mean_gap(),
            max_version_gap: stats.max_gap,
            tokens: stats.tokens,
            active_tokens: stats.active_tokens,
            dropped_tokens: 0,
            multi_version_trajectories: 0,
            reset_events: u64::from(stats.reset),
            reset_count: trainer.reset_count(),
            low_rho_streak: trainer.low_rho_streak(),
            audit_mismatches: 0,
            cost: CostReport::default(),
        });
    }
    let summary = RunSummary::from_metrics(&metrics, accounting, 0);
    Ok(SimOutput {
        metrics,
        final_params: (**trainer.actor()).clone(),
        ewma: trainer.ewma().cloned(),
        summary,
        trace: None,
    })
}
