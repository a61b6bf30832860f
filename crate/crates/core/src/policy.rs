//! Tabular contextual-softmax policy, the synthetic episodic task, and the
//! training/inference discrepancy model.
//!
//! The policy keeps one logit row per context. Training-side log-probabilities
//! are an exact log-softmax of that row; inference-side log-probabilities add a
//! bounded, reproducible perturbation to the logits before renormalizing, which
//! stands in for numerically different kernels in a separate generation engine.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratio::TokenSample;

pub type ContextId = usize;
pub type TokenId = usize;
pub type Version = u64;

/// Logit table of shape `num_contexts x vocab_size`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    num_contexts: usize,
    vocab_size: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(num_contexts: usize, vocab_size: usize) -> Self {
        Self {
            num_contexts,
            vocab_size,
            weights: vec![0.0; num_contexts * vocab_size],
        }
    }

    pub fn from_weights(num_contexts: usize, vocab_size: usize, weights: Vec<f64>) -> Result<Self> {
        if num_contexts == 0 || vocab_size == 0 {
            return Err(Error::domain("policy shape must be non-empty"));
        }
        if weights.len() != num_contexts * vocab_size {
            return Err(Error::domain(format!(
                "weight vector has length {}, expected {} x {}",
                weights.len(),
                num_contexts,
                vocab_size
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::domain(format!("weight {i} is not finite")));
        }
        Ok(Self {
            num_contexts,
            vocab_size,
            weights,
        })
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(num_contexts: usize, vocab_size: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..num_contexts * vocab_size)
            .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            num_contexts,
            vocab_size,
            weights,
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_contexts, self.vocab_size)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, context: ContextId) -> &[f64] {
        let start = context * self.vocab_size;
        &self.weights[start..start + self.vocab_size]
    }

    /// Size of the parameter payload in bytes.
    pub fn byte_len(&self) -> u64 {
        (self.weights.len() * std::mem::size_of::<f64>()) as u64
    }

    pub(crate) fn check_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_index(&self, context: ContextId, token: TokenId) -> Result<()> {
        if context >= self.num_contexts {
            return Err(Error::domain(format!(
                "context {context} out of range (num_contexts = {})",
                self.num_contexts
            )));
        }
        if token >= self.vocab_size {
            return Err(Error::domain(format!(
                "token {token} out of range (vocab_size = {})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// `self += scale * delta`, elementwise.
    pub fn add_scaled(&mut self, scale: f64, delta: &[f64]) -> Result<()> {
        if delta.len() != self.weights.len() {
            return Err(Error::domain("update vector has the wrong length"));
        }
        for (w, d) in self.weights.iter_mut().zip(delta) {
            *w += scale * d;
        }
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// Parameters tagged with the version id of the update that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedParams {
    pub version: Version,
    pub params: PolicyParams,
}

impl VersionedParams {
    pub fn new(version: Version, params: PolicyParams) -> Self {
        Self { version, params }
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Training-side log-probabilities of every token in `context`.
pub fn log_probs_train(params: &PolicyParams, context: ContextId) -> Result<Vec<f64>> {
    params.check_index(context, 0)?;
    let mut row = params.row(context).to_vec();
    log_softmax_in_place(&mut row);
    Ok(row)
}

/// Training-side log-probability `log pi(token | context)`.
pub fn logprob_train(params: &PolicyParams, context: ContextId, token: TokenId) -> Result<f64> {
    params.check_index(context, token)?;
    Ok(log_probs_train(params, context)?[token])
}

/// Gradient of `log pi(token | context)` with respect to the whole weight vector.
///
/// Only the `context` row is non-zero: `onehot(token) - softmax(row)`.
pub fn grad_logprob(params: &PolicyParams, context: ContextId, token: TokenId) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.weights.len()];
    add_grad_logprob(params, context, token, 1.0, &mut out)?;
    Ok(out)
}

/// `out += scale * grad log pi(token | context)`.
pub(crate) fn add_grad_logprob(
    params: &PolicyParams,
    context: ContextId,
    token: TokenId,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    params.check_index(context, token)?;
    let logp = log_probs_train(params, context)?;
    let start = context * params.vocab_size;
    for (j, lp) in logp.iter().enumerate() {
        let indicator = if j == token { 1.0 } else { 0.0 };
        out[start + j] += scale * (indicator - lp.exp());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyMode {
    /// Perturbation is a hash of `(seed, version, context, token)`.
    #[default]
    DeterministicHash,
    /// Perturbation row drawn from a ChaCha stream keyed by `(seed, version, context)`.
    SeededNoise,
}

/// Distribution of the per-logit perturbation inside `[-magnitude, magnitude]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationShape {
    #[default]
    Uniform,
    /// Mostly near zero with occasional excursions close to the bound (`sign * m * u^4`).
    HeavyTailed,
}

/// Model of the training/inference numerical mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancyModel {
    pub magnitude: f64,
    #[serde(default)]
    pub mode: DiscrepancyMode,
    #[serde(default)]
    pub shape: PerturbationShape,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DiscrepancyModel {
    fn default() -> Self {
        Self::none()
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-sensitive combination of several words into one seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x2545_F491_4F6C_DD1D, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl DiscrepancyModel {
    pub fn none() -> Self {
        Self {
            magnitude: 0.0,
            mode: DiscrepancyMode::DeterministicHash,
            shape: PerturbationShape::Uniform,
            seed: 0,
        }
    }

    pub fn hashed(magnitude: f64, seed: u64) -> Self {
        Self {
            magnitude,
            seed,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(Error::domain("discrepancy magnitude must be finite and >= 0"));
        }
        Ok(())
    }

    fn shape_value(&self, u: f64, v: f64) -> f64 {
        match self.shape {
            PerturbationShape::Uniform => self.magnitude * (2.0 * u - 1.0),
            PerturbationShape::HeavyTailed => {
                let sign = if v < 0.5 { -1.0 } else { 1.0 };
                sign * self.magnitude * u.powi(4)
            }
        }
    }

    /// Perturbations added to the logits of `context` at `version`.
    pub fn perturbation_row(&self, version: Version, context: ContextId, vocab_size: usize) -> Vec<f64> {
        match self.mode {
            DiscrepancyMode::DeterministicHash => (0..vocab_size)
                .map(|token| {
                    let h = mix_seed(&[self.seed, version, context as u64, token as u64]);
                    self.shape_value(unit_from_bits(h), unit_from_bits(splitmix64(h)))
                })
                .collect(),
            DiscrepancyMode::SeededNoise => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, version, context as u64, 0x6e6f697365]));
                (0..vocab_size)
                    .map(|_| {
                        let u = rng.random::<f64>();
                        let v = rng.random::<f64>();
                        self.shape_value(u, v)
                    })
                    .collect()
            }
        }
    }
}

/// Inference-side log-probabilities of every token in `context`.
pub fn log_probs_infer(
    params: &VersionedParams,
    context: ContextId,
    disc: &DiscrepancyModel,
) -> Result<Vec<f64>> {
    if disc.magnitude == 0.0 {
        return log_probs_train(&params.params, context);
    }
    params.params.check_index(context, 0)?;
    let delta = disc.perturbation_row(params.version, context, params.params.vocab_size);
    let mut row: Vec<f64> = params
        .params
        .row(context)
        .iter()
        .zip(&delta)
        .map(|(w, d)| w + d)
        .collect();
    log_softmax_in_place(&mut row);
    Ok(row)
}

/// Inference-side log-probability `log mu(token | context)` for the given version.
pub fn logprob_infer(
    params: &VersionedParams,
    context: ContextId,
    token: TokenId,
    disc: &DiscrepancyModel,
) -> Result<f64> {
    params.params.check_index(context, token)?;
    Ok(log_probs_infer(params, context, disc)?[token])
}

/// Inverse-CDF draw from a log-probability row.
fn draw_token<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardEntry {
    pub context: ContextId,
    pub token: TokenId,
    pub reward: f64,
}

/// On-disk description of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub num_contexts: usize,
    pub vocab_size: usize,
    pub horizon: usize,
    /// Declared bound on `|reward|`; every table entry must respect it.
    pub reward_max: f64,
    #[serde(default)]
    pub seed: u64,
    /// Table entries; unspecified `(context, token)` pairs reward 0.
    #[serde(default)]
    pub rewards: Vec<RewardEntry>,
}

impl Default for TaskConfig {
    /// 8 contexts x 8 tokens, horizon 8. Each context has one target token worth 1
    /// and one near-miss worth 0.25.
    fn default() -> Self {
        let n = 8;
        let mut rewards = Vec::new();
        for c in 0..n {
            rewards.push(RewardEntry {
                context: c,
                token: (3 * c + 1) % n,
                reward: 1.0,
            });
            rewards.push(RewardEntry {
                context: c,
                token: (3 * c + 4) % n,
                reward: 0.25,
            });
        }
        Self {
            num_contexts: n,
            vocab_size: n,
            horizon: 8,
            reward_max: 1.0,
            seed: 0,
            rewards,
        }
    }
}

/// Episodic task over a tabular policy.
///
/// An episode starts in a prompt context drawn uniformly at random. After
/// emitting token `y` the next context is `y mod num_contexts`. The episode
/// reward is the mean of the per-step table entries `R(context_t, token_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    config: TaskConfig,
    table: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.num_contexts == 0 || config.vocab_size == 0 || config.horizon == 0 {
            return Err(Error::config("num_contexts, vocab_size and horizon must be positive"));
        }
        if !(config.reward_max.is_finite() && config.reward_max >= 0.0) {
            return Err(Error::config("reward_max must be finite and non-negative"));
        }
        let mut table = vec![0.0; config.num_contexts * config.vocab_size];
        for e in &config.rewards {
            if e.context >= config.num_contexts || e.token >= config.vocab_size {
                return Err(Error::config(format!(
                    "reward entry ({}, {}) outside the task shape",
                    e.context, e.token
                )));
            }
            if !e.reward.is_finite() || e.reward.abs() > config.reward_max {
                return Err(Error::config(format!(
                    "reward {} at ({}, {}) exceeds reward_max {}",
                    e.reward, e.context, e.token, config.reward_max
                )));
            }
            table[e.context * config.vocab_size + e.token] = e.reward;
        }
        Ok(Self { config, table })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::new(toml::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn num_contexts(&self) -> usize {
        self.config.num_contexts
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn reward(&self, context: ContextId, token: TokenId) -> f64 {
        self.table[context * self.config.vocab_size + token]
    }

    pub fn next_context(&self, token: TokenId) -> ContextId {
        token % self.config.num_contexts
    }

    /// Smallest and largest attainable episode reward.
    pub fn reward_range(&self) -> (f64, f64) {
        let lo = self.table.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Episode reward mapped onto `[0, 1]` by the task's reward range.
    pub fn normalized_success(&self, reward: f64) -> f64 {
        let (lo, hi) = self.reward_range();
        if hi > lo {
            ((reward - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn zero_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.config.num_contexts, self.config.vocab_size)
    }
}

/// One generated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: ContextId,
    pub samples: Vec<TokenSample>,
    pub reward: f64,
}

/// Token-by-token episode generation whose policy version may change between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeCursor {
    pub prompt: ContextId,
    context: ContextId,
    reward_sum: f64,
    pub samples: Vec<TokenSample>,
}

impl EpisodeCursor {
    pub fn start<R: Rng + ?Sized>(task: &SyntheticTask, rng: &mut R) -> Self {
        let prompt = rng.random_range(0..task.num_contexts());
        Self {
            prompt,
            context: prompt,
            reward_sum: 0.0,
            samples: Vec::with_capacity(task.horizon()),
        }
    }

    /// Cursor starting in a given prompt context.
    pub fn at(prompt: ContextId, task: &SyntheticTask) -> Result<Self> {
        if prompt >= task.num_contexts() {
            return Err(Error::domain(format!("prompt {prompt} out of range")));
        }
        Ok(Self {
            prompt,
            context: prompt,
            reward_sum: 0.0,
            samples: Vec::with_capacity(task.horizon()),
        })
    }

    /// Versions that generated this trajectory so far, deduplicated and sorted.
    pub fn versions(&self) -> Vec<Version> {
        let mut v: Vec<Version> = self.samples.iter().map(|s| s.rollout_version).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_done(&self, task: &SyntheticTask) -> bool {
        self.samples.len() >= task.horizon()
    }

    /// Draws the next token from the inference-side distribution of `params`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &VersionedParams,
        task: &SyntheticTask,
        disc: &DiscrepancyModel,
        rng: &mut R,
    ) -> Result<()> {
        if self.is_done(task) {
            return Err(Error::Protocol("episode already reached its horizon".into()));
        }
        let log_probs = log_probs_infer(params, self.context, disc)?;
        let token = draw_token(&log_probs, rng);
        self.samples.push(TokenSample {
            context: self.context,
            token,
            rollout_version: params.version,
            logp_infer_old: log_probs[token],
            logp_train_old: None,
            advantage: 0.0,
            position: self.samples.len(),
        });
        self.reward_sum += task.reward(self.context, token);
        self.context = task.next_context(token);
        Ok(())
    }

    pub fn reward(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.reward_sum / self.samples.len() as f64
        }
    }

    pub fn finish(self) -> Episode {
        let reward = self.reward();
        Episode {
            prompt: self.prompt,
            samples: self.samples,
            reward,
        }
    }
}

/// Generates a full episode under a single policy version.
pub fn sample_episode<R: Rng + ?Sized>(
    params: &VersionedParams,
    task: &SyntheticTask,
    disc: &DiscrepancyModel,
    rng: &mut R,
) -> Result<Episode> {
    let (nc, vs) = params.params.shape();
    if nc != task.num_contexts() || vs != task.vocab_size() {
        return Err(Error::ShapeMismatch {
            expected: (task.num_contexts(), task.vocab_size()),
            actual: (nc, vs),
        });
    }
    disc.validate()?;
    let mut cursor = EpisodeCursor::start(task, rng);
    while !cursor.is_done(task) {
        cursor.step(params, task, disc, rng)?;
    }
    Ok(cursor.finish())
}
