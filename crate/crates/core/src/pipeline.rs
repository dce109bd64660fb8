//! Pretraining, the fine-tuning loop, and the artifacts they produce.
//!
//! One fine-tuning epoch samples `K` trajectories from a frozen snapshot of
//! the parameters, scores them through a bounded producer/worker pipeline,
//! standardizes rewards into advantages, and runs the clipped-surrogate
//! update over shuffled minibatches of recorded transitions. Every random
//! draw comes from a stream keyed by (master seed, purpose, epoch, index), so
//! results do not depend on thread counts or completion order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crossbeam::channel;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{AtomTable, Molecule};
use crate::denoiser::{init_params, Architecture, PolicyParams};
use crate::diffusion::{pretrain_loss_into, pretrain_loss_value, reverse_mean, sample_trajectory, AtomCountHistogram, LatentState, LossWeighting, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, training_hashes, EvalReport};
use crate::policy::{
    adamw_step, recorded_logp, standardize_advantages, standardize_with_running, surrogate_gradient, AdamState, AdamWConfig,
    AdvantageMode, ClipConfig, RunningRewardStats, TransitionRef,
};
use crate::reward::{CompositeConfig, RewardFunction, RewardKind, RewardRecord};
use crate::rng::{mix64, SeedSpec};
use crate::schedule::{NoiseSchedule, ScheduleKind};

const TAG_SPLIT: u64 = 0x5350_4c54;
const TAG_BATCH: u64 = 0x4241_5443;
const TAG_HOLDOUT: u64 = 0x484f_4c44;
const TAG_INIT: u64 = 0x494e_4954;
const TAG_TRAJ: u64 = 0x5452_414a;
const TAG_NATOMS: u64 = 0x4e41_544d;
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_PROBE: u64 = 0x5052_4f42;
const TAG_SAMPLE: u64 = 0x5341_4d50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    /// Stop after this many evaluations without held-out improvement.
    pub patience: usize,
    pub holdout_fraction: f64,
    /// Held-out noise draws per molecule at each evaluation.
    pub holdout_repeats: usize,
    pub weighting: LossWeighting,
    /// Exponential moving average of parameters used for evaluation and output.
    pub ema_decay: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            batch: 64,
            lr: 1e-4,
            weight_decay: 0.0,
            max_iters: 20_000,
            eval_every: 100,
            patience: 10,
            holdout_fraction: 0.1,
            holdout_repeats: 4,
            weighting: LossWeighting::Uniform,
            ema_decay: Some(0.999),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeSettings {
    pub lambda: f64,
    pub eta: f64,
    pub target: f64,
}

impl Default for CompositeSettings {
    fn default() -> Self {
        let d = CompositeConfig::default();
        Self { lambda: d.lambda, eta: d.eta, target: d.target }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Trajectories per epoch `K`.
    pub trajectories: usize,
    pub max_epochs: usize,
    pub epsilon: f64,
    pub inner_epochs: usize,
    /// Transitions per optimizer step.
    pub minibatch: usize,
    pub reward: RewardKind,
    pub composite: CompositeSettings,
    pub external_command: Option<String>,
    /// Penalize disconnected molecules under surrogate force rewards.
    pub penalize_fragments: bool,
    /// Stop once the mean valency reward exceeds this.
    pub valency_threshold: Option<f64>,
    /// Stop once the mean force reward exceeds this.
    pub force_threshold: Option<f64>,
    pub sampler_threads: usize,
    pub reward_workers: usize,
    pub queue_capacity: usize,
    pub master_seed: u64,
    pub schedule: ScheduleKind,
    pub dataset: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub optimizer: AdamWConfig,
    pub advantage: AdvantageMode,
    pub advantage_ema_decay: f64,
    /// Reference trajectories whose states probe the KL drift.
    pub kl_probe_trajectories: usize,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            trajectories: 64,
            max_epochs: 30,
            epsilon: 0.2,
            inner_epochs: 1,
            minibatch: 800,
            reward: RewardKind::Force,
            composite: CompositeSettings::default(),
            external_command: None,
            penalize_fragments: true,
            valency_threshold: Some(0.95),
            force_threshold: Some(-0.25),
            sampler_threads: 1,
            reward_workers: 4,
            queue_capacity: 16,
            master_seed: 0,
            schedule: ScheduleKind::Polynomial,
            dataset: None,
            checkpoint_dir: None,
            optimizer: AdamWConfig::default(),
            advantage: AdvantageMode::Batch,
            advantage_ema_decay: 0.9,
            kl_probe_trajectories: 4,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if self.trajectories < 2 {
            return bad("trajectories (K) must be >= 2");
        }
        if self.sampler_threads < 1 || self.reward_workers < 1 || self.queue_capacity < 1 {
            return bad("worker counts and queue capacity must be >= 1");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if self.minibatch < 1 || self.inner_epochs < 1 {
            return bad("minibatch and inner_epochs must be >= 1");
        }
        if self.kl_probe_trajectories < 1 {
            return bad("kl_probe_trajectories must be >= 1");
        }
        if self.reward == RewardKind::External && self.external_command.is_none() {
            return bad("external reward requires external_command");
        }
        self.composite_config()?;
        Ok(())
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig { epsilon: self.epsilon, inner_epochs: self.inner_epochs, minibatch: self.minibatch }
    }

    pub fn composite_config(&self) -> Result<CompositeConfig> {
        let d = CompositeConfig::default();
        CompositeConfig::new(self.composite.lambda, self.composite.eta, self.composite.target, d.predictor)
    }

    pub fn reward_function(&self, table: &AtomTable) -> Result<RewardFunction> {
        let mut f = RewardFunction::new(self.reward, table.clone());
        f.composite = self.composite_config()?;
        f.external_command = self.external_command.clone();
        f.penalize_fragments = self.penalize_fragments;
        Ok(f)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule)
    }

    /// Digest of every field that influences training results. Paths,
    /// thread counts and the epoch budget are excluded so a run can be
    /// resumed elsewhere, with other parallelism, or extended.
    pub fn digest(&self) -> u64 {
        let mut c = self.clone();
        c.max_epochs = 0;
        c.sampler_threads = 1;
        c.reward_workers = 1;
        c.queue_capacity = 1;
        c.dataset = None;
        c.checkpoint_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        digest_bytes(text.as_bytes())
    }

    fn seed(&self) -> SeedSpec {
        SeedSpec::new(self.master_seed, 0)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> u64 {
    let mut h = mix64(bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(b));
    }
    h
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLPF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub master_seed: u64,
    pub config_digest: u64,
    pub schedule_kind: ScheduleKind,
    pub steps: usize,
    pub params: PolicyParams,
    pub optimizer: Option<AdamState>,
    pub running: Option<RunningRewardStats>,
    pub histogram: AtomCountHistogram,
    /// Sorted graph digests of the training molecules.
    pub training_hashes: Vec<u64>,
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(Error::Checkpoint(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule_kind)
    }

    pub fn training_hash_set(&self) -> HashSet<u64> {
        self.training_hashes.iter().copied().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.schedule_kind.code() as u32).to_le_bytes());
        for v in [self.steps as u64, self.epoch, self.master_seed, self.config_digest] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let arch = self.params.arch();
        for v in [arch.layers, arch.hidden, arch.features, self.params.len()] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.params.flat_view() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match &self.optimizer {
            None => b.push(0),
            Some(s) => {
                b.push(1);
                b.extend_from_slice(&s.step.to_le_bytes());
                b.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
                for v in s.m.iter().chain(&s.v) {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.running {
            None => b.push(0),
            Some(r) => {
                b.push(1);
                b.push(r.initialized as u8);
                for v in [r.decay, r.mean, r.var] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b.extend_from_slice(&(self.histogram.counts.len() as u64).to_le_bytes());
        for c in &self.histogram.counts {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&(self.training_hashes.len() as u64).to_le_bytes());
        for h in &self.training_hashes {
            b.extend_from_slice(&h.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = u8::try_from(r.u32()?).ok().and_then(ScheduleKind::from_code).ok_or_else(|| Error::Checkpoint("unknown schedule kind".into()))?;
        let steps = r.u64()? as usize;
        let epoch = r.u64()?;
        let master_seed = r.u64()?;
        let config_digest = r.u64()?;
        let (layers, hidden, features) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        let arch = Architecture::new(layers, hidden, features);
        let p = r.len(buf.len() / 8)?;
        if p != arch.param_count() {
            return Err(Error::Checkpoint(format!("parameter count {p} does not match architecture ({})", arch.param_count())));
        }
        let params = PolicyParams::from_flat(arch, r.f64s(p)?)?;
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let step = r.u64()?;
                let n = r.len(buf.len() / 16)?;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(AdamState { step, m, v })
            }
        };
        let running = match r.u8()? {
            0 => None,
            _ => {
                let initialized = r.u8()? != 0;
                Some(RunningRewardStats { initialized, decay: r.f64()?, mean: r.f64()?, var: r.f64()? })
            }
        };
        let nh = r.len(buf.len() / 8)?;
        let counts = (0..nh).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let nt = r.len(buf.len() / 8)?;
        let training_hashes = (0..nt).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            epoch,
            master_seed,
            config_digest,
            schedule_kind: kind,
            steps,
            params,
            optimizer,
            running,
            histogram: AtomCountHistogram { counts },
            training_hashes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Parallel sum of per-item gradients in fixed chunks, added in index order.
fn chunked_gradient<T: Sync>(
    items: &[T],
    dim: usize,
    chunk: usize,
    f: impl Fn(&T, &mut [f64]) -> Result<f64> + Sync,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = items
        .par_chunks(chunk)
        .map(|c| {
            let mut g = vec![0.0; dim];
            let mut s = 0.0;
            for it in c {
                s += f(it, &mut g)?;
            }
            Ok((s, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for p in parts {
        let (s, g) = p?;
        total += s;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub iter: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
    pub best_heldout: f64,
}

/// Fit the denoiser to `data` by noise prediction, stopping when the
/// held-out loss has not improved for `patience` evaluations.
pub fn pretrain(cfg: &RunConfig, data: &[Molecule], table: &AtomTable, mut on_eval: impl FnMut(&LossRow)) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    if data.len() < 2 {
        return Err(Error::InsufficientBatch(data.len()));
    }
    let features = table.n_elements();
    if let Some(m) = data.iter().find(|m| m.n_features() != features) {
        return Err(Error::InvalidMolecule(format!("molecule has {} features, table has {features}", m.n_features())));
    }
    let schedule = cfg.schedule()?;
    let seed = cfg.seed();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed.derive(&[TAG_SPLIT]).rng());
    let n_hold = ((data.len() as f64 * pc.holdout_fraction).round() as usize).clamp(1, data.len() - 1);
    let prepared = |idx: &[usize]| idx.iter().map(|&i| data[i].compact().centered()).collect::<Result<Vec<Molecule>>>();
    let holdout = prepared(&order[..n_hold])?;
    let train = prepared(&order[n_hold..])?;

    let mut params = init_params(pc.layers, pc.hidden, features, seed.derive(&[TAG_INIT]));
    let mut ema = params.clone();
    let mut opt = AdamState::new(params.len());
    let adam = AdamWConfig { lr: pc.lr, weight_decay: pc.weight_decay, ..AdamWConfig::default() };
    let dim = params.len();

    let holdout_jobs: Vec<(usize, usize)> = (0..holdout.len()).flat_map(|i| (0..pc.holdout_repeats).map(move |r| (i, r))).collect();
    let heldout_loss = |p: &PolicyParams| -> Result<f64> {
        let losses: Vec<Result<f64>> = holdout_jobs
            .par_iter()
            .map(|&(i, r)| {
                let s = seed.derive(&[TAG_HOLDOUT, i as u64, r as u64]);
                pretrain_loss_value(p, &holdout[i], &schedule, s, pc.weighting)
            })
            .collect();
        let mut t = 0.0;
        for l in losses {
            t += l?;
        }
        Ok(t / holdout_jobs.len() as f64)
    };

    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_params = ema.clone();
    let mut since_best = 0;
    let mut running_train = 0.0;
    let mut running_count = 0;
    for it in 1..=pc.max_iters {
        let mut rng = seed.derive(&[TAG_BATCH, it as u64]).rng();
        let batch: Vec<(usize, SeedSpec)> = (0..pc.batch)
            .map(|b| (rng.gen_range(0..train.len()), seed.derive(&[TAG_BATCH, it as u64, b as u64])))
            .collect();
        let (loss_sum, mut grad) = chunked_gradient(&batch, dim, 8, |(i, s), g| {
            pretrain_loss_into(&params, &train[*i], &schedule, *s, pc.weighting, g)
        })?;
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        adamw_step(params.flat_view_mut(), &grad, &mut opt, &adam)?;
        match pc.ema_decay {
            Some(d) => {
                for (e, p) in ema.flat_view_mut().iter_mut().zip(params.flat_view()) {
                    *e = d * *e + (1.0 - d) * p;
                }
            }
            None => ema.flat_view_mut().copy_from_slice(params.flat_view()),
        }
        running_train += loss_sum / n;
        running_count += 1;
        if it % pc.eval_every == 0 || it == pc.max_iters {
            let h = heldout_loss(&ema)?;
            let row = LossRow { iter: it, train_loss: running_train / running_count as f64, heldout_loss: h };
            on_eval(&row);
            losses.push(row);
            running_train = 0.0;
            running_count = 0;
            if h < best {
                best = h;
                best_params = ema.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= pc.patience {
                    break;
                }
            }
        }
    }
    let mut hashes: Vec<u64> = training_hashes(data, table).into_iter().collect();
    hashes.sort_unstable();
    let checkpoint = Checkpoint {
        epoch: 0,
        master_seed: cfg.master_seed,
        config_digest: cfg.digest(),
        schedule_kind: cfg.schedule,
        steps: cfg.steps,
        params: best_params,
        optimizer: None,
        running: None,
        histogram: AtomCountHistogram::from_molecules(data),
        training_hashes: hashes,
    };
    Ok(PretrainOutcome { checkpoint, losses, best_heldout: best })
}

/// Sizing of the sampling/reward pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub samplers: usize,
    pub workers: usize,
    pub capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { samplers: 1, workers: 4, capacity: 16 }
    }
}

#[derive(Debug)]
pub struct PipelineOutput<T> {
    /// Produced items, index-aligned with `rewards`.
    pub items: Vec<T>,
    pub rewards: Vec<RewardRecord>,
    /// Largest queue length observed by a producer right after a send.
    pub max_queue_len: usize,
}

/// Produce `count` items on sampler threads and score them on reward
/// workers, connected by a bounded queue. Results are keyed by index. A
/// panicking reward evaluation yields a penalty record of kind `fallback`.
pub fn reward_pipeline<T, P, R>(count: usize, produce: P, reward: R, fallback: RewardKind, cfg: PipelineConfig) -> Result<PipelineOutput<T>>
where
    T: Send,
    P: Fn(usize) -> Result<T> + Sync,
    R: Fn(usize, &T) -> RewardRecord + Sync,
{
    if cfg.samplers < 1 || cfg.workers < 1 || cfg.capacity < 1 {
        return Err(Error::Config("pipeline sizes must be >= 1".into()));
    }
    let (work_tx, work_rx) = channel::bounded::<(usize, T)>(cfg.capacity);
    let (done_tx, done_rx) = channel::unbounded::<(usize, Result<(T, RewardRecord)>)>();
    let max_len = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for s in 0..cfg.samplers {
            let work_tx = work_tx.clone();
            let done_tx = done_tx.clone();
            let produce = &produce;
            let max_len = &max_len;
            scope.spawn(move || {
                for id in (s..count).step_by(cfg.samplers) {
                    match produce(id) {
                        Ok(item) => {
                            if work_tx.send((id, item)).is_err() {
                                return;
                            }
                            max_len.fetch_max(work_tx.len(), Ordering::Relaxed);
                        }
                        Err(e) => {
                            let _ = done_tx.send((id, Err(e)));
                        }
                    }
                }
            });
        }
        drop(work_tx);
        for _ in 0..cfg.workers {
            let work_rx = work_rx.clone();
            let done_tx = done_tx.clone();
            let reward = &reward;
            scope.spawn(move || {
                for (id, item) in work_rx.iter() {
                    let rec = catch_unwind(AssertUnwindSafe(|| reward(id, &item))).unwrap_or_else(|_| RewardRecord::penalty(fallback));
                    if done_tx.send((id, Ok((item, rec)))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(done_tx);
    });
    let mut slots: Vec<Option<(T, RewardRecord)>> = (0..count).map(|_| None).collect();
    let mut first_err = None;
    for (id, r) in done_rx.try_iter() {
        match r {
            Ok(v) => slots[id] = Some(v),
            Err(e) => {
                if first_err.as_ref().map_or(true, |(i, _)| id < *i) {
                    first_err = Some((id, e));
                }
            }
        }
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }
    let mut items = Vec::with_capacity(count);
    let mut rewards = Vec::with_capacity(count);
    for s in slots {
        let (t, r) = s.expect("every index produced");
        items.push(t);
        rewards.push(r);
    }
    Ok(PipelineOutput { items, rewards, max_queue_len: max_len.load(Ordering::Relaxed) })
}

/// Reference means on a fixed set of recorded states.
#[derive(Debug, Clone)]
pub struct KlProbes {
    states: Vec<LatentState>,
    ref_means: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
}

impl KlProbes {
    pub fn new(reference: &PolicyParams, states: Vec<LatentState>, schedule: &NoiseSchedule) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("empty KL probe set".into()));
        }
        let computed: Vec<Result<(Vec<f64>, f64)>> = states
            .par_iter()
            .map(|s| {
                let (m, _, _) = reverse_mean(reference, s, schedule)?;
                Ok((m, schedule.transition(s.t, s.t - 1)?.sigma_t_to_r))
            })
            .collect();
        let mut ref_means = Vec::with_capacity(states.len());
        let mut sigmas = Vec::with_capacity(states.len());
        for c in computed {
            let (m, s) = c?;
            ref_means.push(m);
            sigmas.push(s);
        }
        Ok(Self { states, ref_means, sigmas })
    }

    /// All non-terminal states of `n` trajectories sampled from `reference`.
    pub fn from_reference(reference: &PolicyParams, histogram: &AtomCountHistogram, schedule: &NoiseSchedule, n: usize, seed: SeedSpec) -> Result<Self> {
        let trajs: Vec<Result<Trajectory>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = seed.derive(&[TAG_PROBE, i as u64]);
                let atoms = histogram.sample(&mut s.derive(&[TAG_NATOMS]).rng());
                sample_trajectory(reference, atoms, schedule, s)
            })
            .collect();
        let mut states = Vec::new();
        for t in trajs {
            let t = t?;
            states.extend(t.states.into_iter().filter(|s| s.t >= 1));
        }
        Self::new(reference, states, schedule)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn kl(&self, params: &PolicyParams, schedule: &NoiseSchedule) -> Result<f64> {
        let per: Vec<Result<f64>> = (0..self.states.len())
            .into_par_iter()
            .map(|i| {
                let (m, _, _) = reverse_mean(params, &self.states[i], schedule)?;
                Ok(probe_kl(&m, &self.ref_means[i], self.sigmas[i], &self.states[i]))
            })
            .collect();
        let mut total = 0.0;
        for p in per {
            total += p?;
        }
        Ok(total / self.states.len() as f64)
    }
}

fn probe_kl(mu: &[f64], mu_ref: &[f64], sigma: f64, state: &LatentState) -> f64 {
    let w = state.width();
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, &m) in state.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in i * w..(i + 1) * w {
            let d = mu[j] - mu_ref[j];
            s += d * d;
        }
        n += w;
    }
    s / (2.0 * sigma * sigma) / n as f64
}

/// Mean over probe states of `‖μ_θ - μ_ref‖² / (2σ²)` per masked atom-feature.
pub fn kl_to_reference(params: &PolicyParams, reference: &PolicyParams, probes: &[LatentState], schedule: &NoiseSchedule) -> Result<f64> {
    KlProbes::new(reference, probes.to_vec(), schedule)?.kl(params, schedule)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub schema_version: u32,
    pub epoch: u64,
    pub mean_reward: f64,
    pub molecule_stability: f64,
    pub atom_stability: f64,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub kl_to_pretrained: f64,
    pub clip_fraction: f64,
    pub objective: f64,
    pub mean_ratio: f64,
    pub mean_advantage: f64,
    pub reward_std: f64,
    pub penalty_fraction: f64,
    /// Mean force RMSD over non-penalized samples, if any were computed.
    pub mean_rmsd: f64,
    pub rolled_back: bool,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub metrics: EpochMetrics,
    pub rewards: Vec<RewardRecord>,
    /// Fingerprint of the parameters each trajectory was sampled with.
    pub sampler_fingerprints: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Checkpoint,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RewardRow {
    epoch: u64,
    trajectory_id: usize,
    kind: RewardKind,
    value: f64,
    penalty: bool,
    raw_rmsd: Option<f64>,
}

fn trajectory_seed(cfg: &RunConfig, epoch: u64, k: usize) -> SeedSpec {
    cfg.seed().derive(&[TAG_TRAJ, epoch, k as u64])
}

/// Sample `n` molecules from a checkpoint; molecule `i` depends only on `(seed, i)`.
pub fn sample_molecules(ckpt: &Checkpoint, n: usize, seed: SeedSpec) -> Result<Vec<Molecule>> {
    let schedule = ckpt.schedule()?;
    (0..n).into_par_iter().map(|i| sample_one(ckpt, &schedule, seed, i)).collect()
}

pub fn sample_one(ckpt: &Checkpoint, schedule: &NoiseSchedule, seed: SeedSpec, i: usize) -> Result<Molecule> {
    let s = seed.derive(&[TAG_SAMPLE, i as u64]);
    let atoms = ckpt.histogram.sample(&mut s.derive(&[TAG_NATOMS]).rng());
    Ok(sample_trajectory(&ckpt.params, atoms, schedule, s)?.molecule)
}

fn convergence_threshold(cfg: &RunConfig) -> Option<f64> {
    match cfg.reward {
        RewardKind::Valency => cfg.valency_threshold,
        RewardKind::Force | RewardKind::External => cfg.force_threshold,
        RewardKind::Composite => None,
    }
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let exists = append && path.exists();
    let file = fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

/// Keep the header and rows whose `epoch` column is at most `epoch`.
fn truncate_csv_epochs(path: &Path, epoch: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "epoch")
        .ok_or_else(|| Error::Config(format!("{} has no epoch column", path.display())))?;
    let mut keep = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let e: u64 = rec[col].parse().map_err(|_| Error::Config(format!("bad epoch in {}", path.display())))?;
        if e <= epoch {
            keep.push(rec);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&headers)?;
    for r in keep {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Fine-tune `pretrained` under `cfg`, starting at epoch 1.
pub fn run_finetune(cfg: &RunConfig, pretrained: &Checkpoint, table: &AtomTable) -> Result<RunArtifacts> {
    finetune(cfg, pretrained, None, table)
}

/// Continue a run from a checkpoint it wrote.
pub fn resume_finetune(cfg: &RunConfig, pretrained: &Checkpoint, from: &Checkpoint, table: &AtomTable) -> Result<RunArtifacts> {
    finetune(cfg, pretrained, Some(from), table)
}

fn finetune(cfg: &RunConfig, pretrained: &Checkpoint, resume: Option<&Checkpoint>, table: &AtomTable) -> Result<RunArtifacts> {
    cfg.validate()?;
    if pretrained.steps != cfg.steps || pretrained.schedule_kind != cfg.schedule {
        return Err(Error::Config(format!(
            "config schedule ({:?}, T={}) does not match checkpoint ({:?}, T={})",
            cfg.schedule, cfg.steps, pretrained.schedule_kind, pretrained.steps
        )));
    }
    if pretrained.params.arch().features != table.n_elements() {
        return Err(Error::Config("checkpoint feature width does not match the atom table".into()));
    }
    let schedule = cfg.schedule()?;
    let reward_fn = cfg.reward_function(table)?;
    let clip = cfg.clip();
    let digest = cfg.digest();
    let train_hashes = pretrained.training_hash_set();

    let mut params = pretrained.params.clone();
    let mut opt = AdamState::new(params.len());
    let mut running = RunningRewardStats::new(cfg.advantage_ema_decay);
    let mut start_epoch = 0u64;
    if let Some(ck) = resume {
        if ck.config_digest != digest {
            return Err(Error::Config("resume checkpoint was written under a different configuration".into()));
        }
        if ck.params.arch() != params.arch() {
            return Err(Error::Config("resume checkpoint architecture differs from the pretrained one".into()));
        }
        params = ck.params.clone();
        opt = ck.optimizer.clone().unwrap_or_else(|| AdamState::new(params.len()));
        if let Some(r) = ck.running {
            running = r;
        }
        start_epoch = ck.epoch;
    }

    let probes = KlProbes::from_reference(&pretrained.params, &pretrained.histogram, &schedule, cfg.kl_probe_trajectories, cfg.seed())?;

    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
        if resume.is_some() {
            truncate_csv_epochs(&dir.join("metrics.csv"), start_epoch)?;
            truncate_csv_epochs(&dir.join("rewards.csv"), start_epoch)?;
        } else {
            for f in ["metrics.csv", "rewards.csv"] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
    }

    let make_checkpoint = |epoch: u64, params: &PolicyParams, opt: &AdamState, running: &RunningRewardStats| Checkpoint {
        epoch,
        master_seed: cfg.master_seed,
        config_digest: digest,
        schedule_kind: cfg.schedule,
        steps: cfg.steps,
        params: params.clone(),
        optimizer: Some(opt.clone()),
        running: Some(*running),
        histogram: pretrained.histogram.clone(),
        training_hashes: pretrained.training_hashes.clone(),
    };

    let pipeline = PipelineConfig { samplers: cfg.sampler_threads, workers: cfg.reward_workers, capacity: cfg.queue_capacity };
    let mut epochs = Vec::new();
    let mut converged = false;
    for epoch in start_epoch + 1..=cfg.max_epochs as u64 {
        let theta_old = params.clone();
        let snapshot = (params.clone(), opt.clone(), running);
        let out = reward_pipeline(
            cfg.trajectories,
            |k| {
                let s = trajectory_seed(cfg, epoch, k);
                let atoms = pretrained.histogram.sample(&mut s.derive(&[TAG_NATOMS]).rng());
                Ok((sample_trajectory(&theta_old, atoms, &schedule, s)?, theta_old.fingerprint()))
            },
            |_, (traj, _)| reward_fn.evaluate(&traj.molecule),
            cfg.reward,
            pipeline,
        )?;
        let sampler_fingerprints: Vec<u64> = out.items.iter().map(|(_, f)| *f).collect();
        let trajectories: Vec<Trajectory> = out.items.into_iter().map(|(t, _)| t).collect();
        let rewards = out.rewards;
        let values: Vec<f64> = rewards.iter().map(|r| r.value).collect();

        let (advantages, stats) = match cfg.advantage {
            AdvantageMode::Batch => standardize_advantages(&values)?,
            AdvantageMode::Ema => standardize_with_running(&values, &mut running)?,
        };

        let old_logp: Vec<Vec<f64>> = trajectories
            .par_iter()
            .enumerate()
            .map(|(k, tr)| (0..tr.steps()).map(|j| recorded_logp(tr, j, k).map(|l| l.value)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;

        let mut transitions: Vec<TransitionRef> = Vec::with_capacity(cfg.trajectories * cfg.steps);
        for k in 0..trajectories.len() {
            for step in 0..trajectories[k].steps() {
                transitions.push(TransitionRef { trajectory: k, step });
            }
        }

        let mut objective_sum = 0.0;
        let mut ratio_sum = 0.0;
        let mut clipped = 0usize;
        let mut count = 0usize;
        let mut rolled_back = false;
        'update: for inner in 0..clip.inner_epochs {
            let mut order = transitions.clone();
            order.shuffle(&mut cfg.seed().derive(&[TAG_SHUFFLE, epoch, inner as u64]).rng());
            for batch in order.chunks(clip.minibatch) {
                let g = surrogate_gradient(&params, &trajectories, &old_logp, &advantages, batch, &schedule, &clip)?;
                if !g.objective.is_finite() {
                    rolled_back = true;
                    break 'update;
                }
                // ascend the objective
                let descent: Vec<f64> = g.grad.iter().map(|v| -v).collect();
                if adamw_step(params.flat_view_mut(), &descent, &mut opt, &cfg.optimizer).is_err() {
                    rolled_back = true;
                    break 'update;
                }
                objective_sum += g.objective * g.count as f64;
                ratio_sum += g.mean_ratio * g.count as f64;
                clipped += g.clipped;
                count += g.count;
            }
        }
        if rolled_back {
            eprintln!("epoch {epoch}: non-finite objective, rolled back to the epoch-start checkpoint");
            (params, opt, running) = snapshot;
        }

        let molecules: Vec<Molecule> = trajectories.iter().map(|t| t.molecule.clone()).collect();
        let report: EvalReport = evaluate(&molecules, table, &train_hashes)?;
        let kl = probes.kl(&params, &schedule)?;
        let rmsds: Vec<f64> = rewards.iter().filter_map(|r| r.raw_rmsd).collect();
        let n = values.len() as f64;
        let cnt = count.max(1) as f64;
        let metrics = EpochMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch,
            mean_reward: values.iter().sum::<f64>() / n,
            molecule_stability: report.molecule_stability,
            atom_stability: report.atom_stability,
            validity: report.validity,
            uniqueness: report.uniqueness,
            novelty: report.novelty,
            kl_to_pretrained: kl,
            clip_fraction: if rolled_back { 0.0 } else { clipped as f64 / cnt },
            objective: if rolled_back { f64::NAN } else { objective_sum / cnt },
            mean_ratio: if rolled_back { f64::NAN } else { ratio_sum / cnt },
            mean_advantage: advantages.iter().sum::<f64>() / n,
            reward_std: stats.std,
            penalty_fraction: rewards.iter().filter(|r| r.penalty).count() as f64 / n,
            mean_rmsd: if rmsds.is_empty() { f64::NAN } else { rmsds.iter().sum::<f64>() / rmsds.len() as f64 },
            rolled_back,
        };

        if let Some(dir) = &cfg.checkpoint_dir {
            let mut w = csv_writer(&dir.join("metrics.csv"), true)?;
            w.serialize(metrics)?;
            w.flush()?;
            let mut w = csv_writer(&dir.join("rewards.csv"), true)?;
            for (k, r) in rewards.iter().enumerate() {
                w.serialize(RewardRow { epoch, trajectory_id: k, kind: r.kind, value: r.value, penalty: r.penalty, raw_rmsd: r.raw_rmsd })?;
            }
            w.flush()?;
            let ck = make_checkpoint(epoch, &params, &opt, &running);
            ck.save(&checkpoint_path(dir, epoch))?;
            ck.save(&dir.join("latest.ckpt"))?;
        }

        epochs.push(EpochRecord { metrics, rewards, sampler_fingerprints });
        if let Some(th) = convergence_threshold(cfg) {
            if metrics.mean_reward > th {
                converged = true;
                break;
            }
        }
    }
    let last_epoch = epochs.last().map_or(start_epoch, |e| e.metrics.epoch);
    let final_checkpoint = make_checkpoint(last_epoch, &params, &opt, &running);
    Ok(RunArtifacts { epochs, final_checkpoint, converged })
}

/// Write metrics rows as CSV.
pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv_writer(path, false)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv_writer(path, false)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Append a line to a plain-text log.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_kl_one_sigma_offset() {
        let state = LatentState { z: vec![0.0; 7], t: 3, mask: vec![true], features: 4 };
        let sigma = 0.3;
        let mu_ref = vec![0.0; 7];
        let mu: Vec<f64> = vec![sigma; 7];
        assert!((probe_kl(&mu, &mu_ref, sigma, &state) - 0.5).abs() < 1e-15);
        assert_eq!(probe_kl(&mu_ref, &mu_ref, sigma, &state), 0.0);
    }

    #[test]
    fn digest_ignores_parallelism_and_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.reward_workers = 8;
        b.sampler_threads = 3;
        b.max_epochs = 99;
        b.checkpoint_dir = Some("/tmp/x".into());
        assert_eq!(a.digest(), b.digest());
        b.epsilon = 0.3;
        assert_ne!(a.digest(), b.digest());
    }
}
