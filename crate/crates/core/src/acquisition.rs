//! Exact old-logit acquisition: versioned snapshots, a dedicated old-logit model,
//! and the interrupt pass that runs before a version is superseded.
//!
//! All three paths evaluate [`logprob_train`] on the parameters of the rollout
//! version, so for any recoverable token they produce the same bits.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{logprob_train, PolicyParams, Version, VersionedParams};
use crate::ratio::TokenSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionStrategy {
    Snapshot,
    DedicatedModel,
    PartialInterrupt,
    /// No exact recovery; only tokens of the live actor version get `pi_old`.
    #[default]
    None,
}

impl AcquisitionStrategy {
    pub const ALL: [AcquisitionStrategy; 4] = [
        AcquisitionStrategy::Snapshot,
        AcquisitionStrategy::DedicatedModel,
        AcquisitionStrategy::PartialInterrupt,
        AcquisitionStrategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionStrategy::Snapshot => "snapshot",
            AcquisitionStrategy::DedicatedModel => "dedicated_model",
            AcquisitionStrategy::PartialInterrupt => "partial_interrupt",
            AcquisitionStrategy::None => "none",
        }
    }

    /// Prefix used in run names, e.g. `snap1003_1006`.
    pub fn run_prefix(self) -> &'static str {
        match self {
            AcquisitionStrategy::Snapshot => "snap",
            AcquisitionStrategy::DedicatedModel => "ded",
            AcquisitionStrategy::PartialInterrupt => "pint",
            AcquisitionStrategy::None => "none",
        }
    }
}

impl fmt::Display for AcquisitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Simulated-time and storage charges of the acquisition machinery.
///
/// Defaults follow the measured 4B-model snapshot overheads; they are
/// illustrative sim-time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub save_latency: f64,
    pub load_latency: f64,
    pub restore_latency: f64,
    /// Historical forward pass, charged once per version segment of a batch.
    pub forward_latency: f64,
    /// Resource switch for the dedicated model and for the interrupt pass.
    pub switch_latency: f64,
    /// Bytes charged per stored snapshot; `None` uses the real parameter size.
    pub storage_per_snapshot: Option<u64>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            save_latency: 3.95,
            load_latency: 7.11,
            restore_latency: 3.01,
            forward_latency: 45.05,
            switch_latency: 7.0,
            storage_per_snapshot: Some(8_040_000_000),
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            save_latency: 0.0,
            load_latency: 0.0,
            restore_latency: 0.0,
            forward_latency: 0.0,
            switch_latency: 0.0,
            storage_per_snapshot: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("save_latency", self.save_latency),
            ("load_latency", self.load_latency),
            ("restore_latency", self.restore_latency),
            ("forward_latency", self.forward_latency),
            ("switch_latency", self.switch_latency),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Charges accumulated by an acquisition step; summed into step metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CostReport {
    pub save_time: f64,
    pub load_time: f64,
    pub restore_time: f64,
    pub forward_time: f64,
    pub switch_time: f64,
    /// Rollout time lost to the interrupt pass.
    pub pause_time: f64,
    /// Old-logit computation time of the dedicated model.
    pub old_logit_time: f64,
    pub update_time: f64,
    /// Wall time of the acquisition stage including any overlap.
    pub stage_time: f64,
    pub saves: u64,
    pub loads: u64,
    pub version_switches: u64,
    pub forward_passes: u64,
    pub tokens_recovered: u64,
    pub bytes_resident: u64,
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, o: Self) {
        self.save_time += o.save_time;
        self.load_time += o.load_time;
        self.restore_time += o.restore_time;
        self.forward_time += o.forward_time;
        self.switch_time += o.switch_time;
        self.pause_time += o.pause_time;
        self.old_logit_time += o.old_logit_time;
        self.update_time += o.update_time;
        self.stage_time += o.stage_time;
        self.saves += o.saves;
        self.loads += o.loads;
        self.version_switches += o.version_switches;
        self.forward_passes += o.forward_passes;
        self.tokens_recovered += o.tokens_recovered;
        self.bytes_resident = self.bytes_resident.max(o.bytes_resident);
    }
}

/// Sample indices grouped by rollout version, oldest first.
fn group_by_version(samples: &[TokenSample]) -> BTreeMap<Version, Vec<usize>> {
    let mut groups: BTreeMap<Version, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.rollout_version).or_default().push(i);
    }
    groups
}

fn fill_from(params: &PolicyParams, samples: &mut [TokenSample], idx: &[usize]) -> Result<()> {
    for &i in idx {
        let s = &mut samples[i];
        s.logp_train_old = Some(logprob_train(params, s.context, s.token)?);
    }
    Ok(())
}

/// Bounded archive of versioned parameters with oldest-first eviction.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    max_resident: usize,
    entries: BTreeMap<Version, Arc<PolicyParams>>,
    latest: Option<Version>,
    cost: CostModel,
    bytes_stored: u64,
    saves: u64,
    loads: u64,
    evictions: u64,
}

impl SnapshotStore {
    pub fn new(max_resident: usize, cost: CostModel) -> Result<Self> {
        if max_resident == 0 {
            return Err(Error::config("max_resident must be positive"));
        }
        Ok(Self {
            max_resident,
            entries: BTreeMap::new(),
            latest: None,
            cost,
            bytes_stored: 0,
            saves: 0,
            loads: 0,
            evictions: 0,
        })
    }

    pub fn max_resident(&self) -> usize {
        self.max_resident
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resident_versions(&self) -> Vec<Version> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, version: Version) -> bool {
        self.entries.contains_key(&version)
    }

    /// Cumulative bytes written over the store's lifetime.
    pub fn bytes_stored(&self) -> u64 {
        self.bytes_stored
    }

    pub fn saves(&self) -> u64 {
        self.saves
    }

    pub fn loads(&self) -> u64 {
        self.loads
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn snapshot_bytes(&self, params: &PolicyParams) -> u64 {
        self.cost.storage_per_snapshot.unwrap_or_else(|| params.byte_len())
    }

    pub fn bytes_resident(&self) -> u64 {
        self.entries.values().map(|p| self.snapshot_bytes(p)).sum()
    }

    /// Archives `v`, evicting the oldest snapshot when over capacity.
    pub fn put(&mut self, v: VersionedParams) -> Result<CostReport> {
        if let Some(latest) = self.latest {
            if v.version <= latest {
                return Err(Error::Protocol(format!(
                    "snapshot version {} is not newer than {latest}",
                    v.version
                )));
            }
        }
        let bytes = self.snapshot_bytes(&v.params);
        self.entries.insert(v.version, Arc::new(v.params));
        self.latest = Some(v.version);
        while self.entries.len() > self.max_resident {
            self.entries.pop_first();
            self.evictions += 1;
        }
        self.bytes_stored += bytes;
        self.saves += 1;
        Ok(CostReport {
            save_time: self.cost.save_latency,
            stage_time: self.cost.save_latency,
            saves: 1,
            bytes_resident: self.bytes_resident(),
            ..CostReport::default()
        })
    }

    pub fn get(&self, version: Version) -> Result<&Arc<PolicyParams>> {
        match self.entries.get(&version) {
            Some(p) => Ok(p),
            None if self.latest.is_some_and(|l| version <= l) => Err(Error::SnapshotEvicted { version }),
            None => Err(Error::Protocol(format!("version {version} was never archived"))),
        }
    }

    /// Fills `logp_train_old` for every sample from the snapshot of its rollout version.
    ///
    /// Samples are grouped by version so each distinct version costs one
    /// load/restore switch and one forward segment. Nothing is modified when a
    /// version is missing.
    pub fn recover_old_logits(&mut self, samples: &mut [TokenSample]) -> Result<CostReport> {
        let groups = group_by_version(samples);
        for &v in groups.keys() {
            self.get(v)?;
        }
        let mut report = CostReport::default();
        for (v, idx) in &groups {
            let params = Arc::clone(self.get(*v)?);
            fill_from(&params, samples, idx)?;
            self.loads += 1;
            report.loads += 1;
            report.version_switches += 1;
            report.forward_passes += 1;
            report.tokens_recovered += idx.len() as u64;
        }
        let switches = groups.len() as f64;
        report.load_time = switches * self.cost.load_latency;
        report.restore_time = switches * self.cost.restore_latency;
        report.forward_time = switches * self.cost.forward_latency;
        report.stage_time = report.load_time + report.restore_time + report.forward_time;
        report.bytes_resident = self.bytes_resident();
        Ok(report)
    }
}

/// Functional form: archive `v` and return the updated store.
pub fn snapshot_put(mut store: SnapshotStore, v: VersionedParams) -> Result<SnapshotStore> {
    store.put(v)?;
    Ok(store)
}

/// Functional form of [`SnapshotStore::recover_old_logits`].
pub fn recover_old_logits(store: &mut SnapshotStore, samples: &mut [TokenSample]) -> Result<CostReport> {
    store.recover_old_logits(samples)
}

/// Wall time of old-logit computation next to an actor update.
pub fn overlapped_stage_time(old_logit_time: f64, update_time: f64, switch_time: f64, overlap: bool) -> f64 {
    if overlap {
        old_logit_time.max(update_time) + switch_time
    } else {
        old_logit_time + update_time
    }
}

/// Old logits from a separate model pinned at one version.
///
/// Every sample must come from `old_model.version`; multi-version batches are
/// split by the caller.
pub fn dedicated_model_recover(
    old_model: &VersionedParams,
    samples: &mut [TokenSample],
    cost: &CostModel,
    update_time: f64,
    overlap: bool,
) -> Result<CostReport> {
    if let Some(s) = samples.iter().find(|s| s.rollout_version != old_model.version) {
        return Err(Error::Protocol(format!(
            "dedicated old-logit model holds version {} but a sample was generated by version {}",
            old_model.version, s.rollout_version
        )));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    fill_from(&old_model.params, samples, &idx)?;
    let old_logit_time = if samples.is_empty() { 0.0 } else { cost.forward_latency };
    let switch = if overlap { cost.switch_latency } else { 0.0 };
    Ok(CostReport {
        forward_time: old_logit_time,
        old_logit_time,
        update_time,
        switch_time: switch,
        stage_time: overlapped_stage_time(old_logit_time, update_time, switch, overlap),
        forward_passes: u64::from(!samples.is_empty()),
        tokens_recovered: samples.len() as u64,
        ..CostReport::default()
    })
}

/// A dedicated old-logit model that keeps the most recent `capacity` broadcast versions.
#[derive(Debug, Clone)]
pub struct DedicatedModel {
    capacity: usize,
    overlap: bool,
    held: BTreeMap<Version, Arc<PolicyParams>>,
}

impl DedicatedModel {
    pub fn new(capacity: usize, overlap: bool) -> Self {
        Self {
            capacity: capacity.max(1),
            overlap,
            held: BTreeMap::new(),
        }
    }

    /// Receives a weight broadcast.
    pub fn sync(&mut self, version: Version, params: Arc<PolicyParams>) {
        self.held.insert(version, params);
        while self.held.len() > self.capacity {
            self.held.pop_first();
        }
    }

    pub fn held_versions(&self) -> Vec<Version> {
        self.held.keys().copied().collect()
    }

    /// Splits the batch by version and recovers each segment.
    ///
    /// `update_time` is the actor update the computation overlaps with.
    pub fn recover_batch(&self, samples: &mut [TokenSample], cost: &CostModel, update_time: f64) -> Result<CostReport> {
        let groups = group_by_version(samples);
        for &v in groups.keys() {
            if !self.held.contains_key(&v) {
                return Err(Error::SnapshotEvicted { version: v });
            }
        }
        let mut report = CostReport::default();
        for (v, idx) in groups {
            let model = VersionedParams::new(v, (*self.held[&v]).clone());
            let mut segment: Vec<TokenSample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let part = dedicated_model_recover(&model, &mut segment, cost, 0.0, false)?;
            for (&i, s) in idx.iter().zip(segment) {
                samples[i].logp_train_old = s.logp_train_old;
            }
            report.forward_time += part.forward_time;
            report.old_logit_time += part.old_logit_time;
            report.forward_passes += part.forward_passes;
            report.tokens_recovered += part.tokens_recovered;
            report.version_switches += 1;
        }
        let switch = if self.overlap { cost.switch_latency } else { 0.0 };
        report.update_time = update_time;
        report.switch_time = switch;
        report.stage_time = overlapped_stage_time(report.old_logit_time, update_time, switch, self.overlap);
        Ok(report)
    }
}

/// Computes exact old logits for every still-missing token under the resident version.
///
/// Must run before the resident version is replaced: a missing token whose
/// version is older than `resident.version` means the update was already
/// applied, which is a protocol error. Nothing is modified on error.
pub fn partial_interrupt_pass<'a, I>(samples: I, resident: &VersionedParams, cost: &CostModel) -> Result<CostReport>
where
    I: IntoIterator<Item = &'a mut TokenSample>,
{
    let pending: Vec<&mut TokenSample> = samples.into_iter().filter(|s| s.logp_train_old.is_none()).collect();
    if let Some(s) = pending.iter().find(|s| s.rollout_version != resident.version) {
        return Err(Error::Protocol(format!(
            "token from version {} lacks old logits but the resident version is {}; \
             the interrupt pass must run before the update is applied",
            s.rollout_version, resident.version
        )));
    }
    let n = pending.len() as u64;
    for s in pending {
        s.logp_train_old = Some(logprob_train(&resident.params, s.context, s.token)?);
    }
    let forward = if n > 0 { cost.forward_latency } else { 0.0 };
    Ok(CostReport {
        switch_time: cost.switch_latency,
        forward_time: forward,
        pause_time: cost.switch_latency + forward,
        stage_time: cost.switch_latency + forward,
        forward_passes: u64::from(n > 0),
        tokens_recovered: n,
        ..CostReport::default()
    })
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"AMSNAP01";
const SNAPSHOT_HEADER_LEN: usize = 8 + 8 + 4 + 4 + 8 + 4;

/// Encodes a snapshot container.
///
/// Layout, all integers little-endian: magic `AMSNAP01` (8 bytes), version
/// `u64`, num_contexts `u32`, vocab_size `u32`, payload length in values
/// `u64`, CRC-32 of the payload `u32`, then the weights as `f64` LE.
pub fn encode_snapshot(v: &VersionedParams) -> Vec<u8> {
    let weights = v.params.weights();
    let mut payload = Vec::with_capacity(weights.len() * 8);
    for w in weights {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN + payload.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&v.version.to_le_bytes());
    out.extend_from_slice(&(v.params.num_contexts() as u32).to_le_bytes());
    out.extend_from_slice(&(v.params.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<VersionedParams> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: "<snapshot>".into(),
        reason: reason.to_string(),
    };
    if bytes.len() < SNAPSHOT_HEADER_LEN || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(corrupt("missing snapshot header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u64_at(8);
    let nc = u32_at(16) as usize;
    let vs = u32_at(20) as usize;
    let n = u64_at(24) as usize;
    let stored = u32_at(32);
    let payload = &bytes[SNAPSHOT_HEADER_LEN..];
    if payload.len() != n * 8 {
        return Err(corrupt("payload length does not match header"));
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(Error::Checksum {
            what: format!("snapshot v{version}"),
            stored,
            computed,
        });
    }
    let weights = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VersionedParams::new(version, PolicyParams::from_weights(nc, vs, weights)?))
}

pub fn write_snapshot(path: impl AsRef<Path>, v: &VersionedParams) -> Result<()> {
    std::fs::write(path, encode_snapshot(v))?;
    Ok(())
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<VersionedParams> {
    let bytes = std::fs::read(path.as_ref())?;
    decode_snapshot(&bytes).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: path.as_ref().to_path_buf(),
            reason,
        },
        other => other,
    })
}
