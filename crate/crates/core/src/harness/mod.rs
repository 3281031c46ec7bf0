//! Experiment orchestration: configuration, the training loop, evaluation,
//! metrics and checkpoints.

pub mod eval;
pub mod gradcheck;
pub mod sequential;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::learnsub::checkpoint::{Blob, Checkpoint, CheckpointError};
use crate::learnsub::{AdamState, LearnError};
use crate::policy::{featurize, ActMode, FeatureVector, FeaturizerConfig, PolicyError, PolicyModel, FEATURE_DIM};
use crate::rng::{derive_seed, derived, seeded, SimRng};
use crate::sampler::{knn_distance, select_task, ReplayBuffer, SamplerConfig, SamplerError, SamplerMode, SamplerModel};
use crate::taskspace::{sample_prior, PriorConfig, Relation, Skill, SkillContext, TaskParam, TaskSpaceError};
use crate::world::{execute_primitive, instantiate, observe, relations, success, Action, WorldConstants, WorldError};

pub use eval::{evaluate_skills, EvalSuite};

/// Version tag written in the first column of every metrics row.
pub const METRICS_SCHEMA: &str = "atr-metrics-v1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Training { iteration: usize, source: Box<HarnessError> },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    TaskSpace(#[from] TaskSpaceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written with config hash {found}, current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("replay mismatch: {0}")]
    Replay(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl From<LearnError> for HarnessError {
    fn from(e: LearnError) -> Self {
        HarnessError::Policy(PolicyError::Learn(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub iterations: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub mode: SamplerMode,
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
    pub world: WorldConstants,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 10_000,
            eval_interval: 1_000,
            eval_episodes: 50,
            batch_size: 128,
            mode: SamplerMode::Atr,
            sampler: SamplerConfig::default(),
            prior: PriorConfig::default(),
            world: WorldConstants::default(),
            checkpoint_interval: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 || self.batch_size == 0 {
            return bad("eval_interval, eval_episodes and batch_size must be positive");
        }
        self.sampler.check().map_err(HarnessError::Config)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Hash of everything that shapes a run. The iteration budget, the
    /// checkpoint cadence and the output directory are excluded so a run
    /// can be resumed with a longer budget or elsewhere.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        c.checkpoint_interval = 0;
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Episodes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub context: SkillContext,
    /// Absent when a target object was not visible; nothing is executed then.
    pub features: Option<Vec<f64>>,
    pub action: Option<Action>,
    pub reward: f64,
    /// Relations of the world after the step.
    pub relations: Vec<Relation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub iteration: u64,
    pub task: TaskParam,
    pub instance_seed: u64,
    /// False when the task could not be instantiated; such episodes carry
    /// reward 0 and no steps.
    pub instantiated: bool,
    pub steps: Vec<StepRecord>,
    /// Mean step reward.
    pub reward: f64,
}

impl Episode {
    /// Environment steps taken, i.e. primitives executed or attempted.
    pub fn env_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Rolls out every skill context of `w` with the learned policies.
pub fn run_episode(
    w: &TaskParam,
    instance_seed: u64,
    policies: &[PolicyModel],
    constants: &WorldConstants,
    rng: &mut SimRng,
) -> Episode {
    let mut ep = Episode {
        iteration: 0,
        task: w.clone(),
        instance_seed,
        instantiated: false,
        steps: Vec::new(),
        reward: 0.0,
    };
    let Ok(mut world) = instantiate(w, &mut seeded(instance_seed), constants) else { return ep };
    ep.instantiated = true;
    for c in &w.contexts {
        let obs = observe(&world, &w.env, rng);
        let policy = &policies[c.skill.index()];
        let mut step = StepRecord { context: *c, features: None, action: None, reward: 0.0, relations: Vec::new() };
        if let Ok(f) = featurize(&obs, c, &policy.featurizer) {
            let a = policy.act(&f, ActMode::Sample, rng);
            let next = execute_primitive(&world, c, &a).unwrap_or_else(|_| world.clone());
            step.reward = if success(c.skill, &world, &next, c) { 1.0 } else { 0.0 };
            step.features = Some(f.to_vec());
            step.action = Some(a);
            world = next;
        }
        step.relations = relations(&world);
        ep.steps.push(step);
    }
    ep.reward = if ep.steps.is_empty() { 0.0 } else { ep.steps.iter().map(|s| s.reward).sum::<f64>() / ep.steps.len() as f64 };
    ep
}

/// Re-executes a logged episode and checks rewards and relations.
pub fn replay_episode(ep: &Episode, constants: &WorldConstants) -> Result<(), HarnessError> {
    let world = instantiate(&ep.task, &mut seeded(ep.instance_seed), constants);
    let mut world = match (world, ep.instantiated) {
        (Ok(w), true) => w,
        (Err(_), false) => return Ok(()),
        (Ok(_), false) => return Err(HarnessError::Replay("logged as uninstantiable but instantiates".into())),
        (Err(e), true) => return Err(HarnessError::Replay(format!("instantiation failed: {e}"))),
    };
    for (k, s) in ep.steps.iter().enumerate() {
        if let Some(a) = &s.action {
            let next = execute_primitive(&world, &s.context, a).unwrap_or_else(|_| world.clone());
            let r = if success(s.context.skill, &world, &next, &s.context) { 1.0 } else { 0.0 };
            if r != s.reward {
                return Err(HarnessError::Replay(format!("step {k}: reward {r}, logged {}", s.reward)));
            }
            world = next;
        }
        if relations(&world) != s.relations {
            return Err(HarnessError::Replay(format!("step {k}: relations differ")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub success: [f64; 4],
    pub value_loss: Option<f64>,
    pub bc_loss: [Option<f64>; 4],
    pub mean_knn: Option<f64>,
    pub success_fraction: f64,
    /// Excluded from the CSV so metrics files are reproducible byte for byte.
    pub wall_clock: f64,
}

impl MetricsRow {
    pub fn csv_header() -> String {
        let mut cols = vec!["schema".to_string(), "iteration".into(), "env_steps".into()];
        cols.extend(Skill::ALL.iter().map(|s| format!("success_{}", s.name().replace('-', "_"))));
        cols.push("value_loss".into());
        cols.extend(Skill::ALL.iter().map(|s| format!("bc_loss_{}", s.name().replace('-', "_"))));
        cols.push("mean_knn".into());
        cols.push("success_fraction".into());
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cols = vec![METRICS_SCHEMA.to_string(), self.iteration.to_string(), self.env_steps.to_string()];
        cols.extend(self.success.iter().map(|v| v.to_string()));
        cols.push(opt(self.value_loss));
        cols.extend(self.bc_loss.iter().map(|v| opt(*v)));
        cols.push(opt(self.mean_knn));
        cols.push(self.success_fraction.to_string());
        cols.join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = MetricsRow::csv_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Interval {
    episodes: usize,
    successes: usize,
    knn_sum: f64,
    knn_count: usize,
    value_sum: f64,
    value_count: usize,
    bc_sum: [f64; 4],
    bc_count: [usize; 4],
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

// ---------------------------------------------------------------------------
// Trainer

const TAG_INIT_SAMPLER: u64 = 1;
const TAG_INIT_POLICY: u64 = 2;
const TAG_CANDIDATES: u64 = 0;
const TAG_SUBSET: u64 = 1;
const TAG_SELECT: u64 = 2;
const TAG_INSTANCE: u64 = 3;
const TAG_ROLLOUT: u64 = 4;
const TAG_VALUE_BATCH: u64 = 5;
const TAG_EVAL: u64 = 6;
const TAG_BC_BATCH: u64 = 8;

/// Generator for one purpose within one iteration. Runs therefore need no
/// generator state to resume.
fn iteration_rng(seed: u64, iteration: usize, tag: u64) -> SimRng {
    derived(seed, ((iteration as u64 + 1) << 8) | tag)
}

pub type Demo = (Vec<f64>, Action);

/// Sinks for per-iteration records.
#[derive(Default)]
pub struct Logs {
    pub selections: Option<Box<dyn Write>>,
    pub episodes: Option<Box<dyn Write>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: ExperimentConfig,
    config_hash: String,
    iteration: usize,
    env_steps: u64,
    buffer: ReplayBuffer<Episode>,
    demos: Vec<ReplayBuffer<Demo>>,
    interval: Interval,
    metrics: Vec<MetricsRow>,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: SamplerModel,
    pub policies: Vec<PolicyModel>,
    pub buffer: ReplayBuffer<Episode>,
    /// Successful (features, action) pairs per skill.
    pub demos: Vec<ReplayBuffer<Demo>>,
    /// Completed iterations.
    pub iteration: usize,
    pub env_steps: u64,
    pub metrics: Vec<MetricsRow>,
    pub suite: EvalSuite,
    interval: Interval,
    started: Instant,
    clock_offset: f64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.check()?;
        let model = SamplerModel::new(&mut derived(config.seed, TAG_INIT_SAMPLER));
        let featurizer = FeaturizerConfig { reach_radius: config.world.reach_radius };
        let policies = Skill::ALL
            .iter()
            .map(|&s| PolicyModel::new(s, featurizer, &mut derived(config.seed, (TAG_INIT_POLICY << 8) | s.index() as u64)))
            .collect();
        let cap = config.sampler.buffer_capacity;
        Ok(Self {
            model,
            policies,
            buffer: ReplayBuffer::new(cap),
            demos: (0..Skill::ALL.len()).map(|_| ReplayBuffer::new(cap)).collect(),
            iteration: 0,
            env_steps: 0,
            metrics: Vec::new(),
            suite: EvalSuite::shipped()?,
            interval: Interval::default(),
            started: Instant::now(),
            clock_offset: 0.0,
            config,
        })
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// One training iteration: select, instantiate, roll out, store, update,
    /// and evaluate at interval boundaries.
    pub fn step(&mut self, logs: &mut Logs) -> Result<(), HarnessError> {
        let it = self.iteration;
        self.step_inner(logs).map_err(|e| HarnessError::Training { iteration: it, source: Box::new(e) })
    }

    fn step_inner(&mut self, logs: &mut Logs) -> Result<(), HarnessError> {
        let it = self.iteration;
        let seed = self.config.seed;
        let scfg = &self.config.sampler;

        let mut rng = iteration_rng(seed, it, TAG_CANDIDATES);
        let mut candidates =
            (0..scfg.candidates).map(|_| sample_prior(&mut rng, &self.config.prior)).collect::<Result<Vec<_>, _>>()?;

        let scoring = self.buffer.len() >= scfg.warmup_len();
        let subset: Vec<Vec<f64>> = if scoring {
            let n = scfg.m.min(self.buffer.len());
            let picked = self.buffer.sample(n, &mut iteration_rng(seed, it, TAG_SUBSET))?;
            picked.into_iter().map(|e| self.model.encode(&e.task)).collect()
        } else {
            Vec::new()
        };
        let mut rng = iteration_rng(seed, it, TAG_SELECT);
        let sel = select_task(&candidates, &self.model, &subset, self.buffer.len(), self.config.mode, scfg, &mut rng)?;
        let knn = if !scoring {
            None
        } else if sel.warmup || self.config.mode == SamplerMode::Uniform {
            Some(knn_distance(&self.model.encode(&candidates[sel.index]), &subset, scfg.k)?)
        } else {
            Some(sel.knn[sel.index])
        };
        if let Some(out) = logs.selections.as_mut() {
            let rec = serde_json::json!({
                "iteration": it,
                "index": sel.index,
                "prior_branch": sel.prior_branch,
                "warmup": sel.warmup,
                "scores": sel.scores,
            });
            writeln!(out, "{rec}")?;
        }

        let w = candidates.swap_remove(sel.index);
        let instance_seed = derive_seed(seed, ((it as u64 + 1) << 8) | TAG_INSTANCE);
        let mut rng = iteration_rng(seed, it, TAG_ROLLOUT);
        let mut ep = run_episode(&w, instance_seed, &self.policies, &self.config.world, &mut rng);
        ep.iteration = it as u64;
        self.env_steps += ep.env_steps() as u64;
        for s in &ep.steps {
            if let (true, Some(f), Some(a)) = (s.reward == 1.0, &s.features, &s.action) {
                self.demos[s.context.skill.index()].push((f.clone(), *a));
            }
        }
        self.interval.episodes += 1;
        self.interval.successes += usize::from(ep.reward == 1.0);
        if let Some(d) = knn {
            self.interval.knn_sum += d;
            self.interval.knn_count += 1;
        }
        if let Some(out) = logs.episodes.as_mut() {
            writeln!(out, "{}", serde_json::to_string(&ep)?)?;
        }
        self.buffer.push(ep);

        let batch = self.config.batch_size;
        if self.buffer.len() >= batch {
            let picked = self.buffer.sample(batch, &mut iteration_rng(seed, it, TAG_VALUE_BATCH))?;
            let data: Vec<(&TaskParam, f64)> = picked.iter().map(|e| (&e.task, e.reward)).collect();
            let loss = self.model.value_update(&data)?;
            self.interval.value_sum += loss;
            self.interval.value_count += 1;
        }
        for k in 0..Skill::ALL.len() {
            let n = self.demos[k].len();
            if n == 0 {
                continue;
            }
            let mut rng = iteration_rng(seed, it, TAG_BC_BATCH + ((k as u64) << 4));
            let picked = self.demos[k].sample(batch.min(n), &mut rng)?;
            let data: Vec<(FeatureVector, Action)> = picked.iter().map(|(f, a)| (to_features(f), *a)).collect();
            let loss = self.policies[k].bc_update(&data)?;
            self.interval.bc_sum[k] += loss;
            self.interval.bc_count[k] += 1;
        }

        self.iteration += 1;
        if self.iteration % self.config.eval_interval == 0 || self.done() {
            self.record_metrics();
        }
        Ok(())
    }

    fn record_metrics(&mut self) {
        let seed = derive_seed(self.config.seed, ((self.iteration as u64) << 8) | TAG_EVAL);
        let success = evaluate_skills(&self.policies, &self.suite, self.config.eval_episodes, seed, &self.config.world);
        let iv = std::mem::take(&mut self.interval);
        let bc = std::array::from_fn(|k| mean(iv.bc_sum[k], iv.bc_count[k]));
        self.metrics.push(MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            success,
            value_loss: mean(iv.value_sum, iv.value_count),
            bc_loss: bc,
            mean_knn: mean(iv.knn_sum, iv.knn_count),
            success_fraction: mean(iv.successes as f64, iv.episodes).unwrap_or(0.0),
            wall_clock: self.clock_offset + self.started.elapsed().as_secs_f64(),
        });
    }

    pub fn run(&mut self, logs: &mut Logs) -> Result<(), HarnessError> {
        while !self.done() {
            self.step(logs)?;
        }
        Ok(())
    }

    // -- checkpoints --------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blobs = vec![Blob {
            name: "sampler".into(),
            arch: self.model.arch(),
            params: self.model.params.values.clone(),
            adam: Some(self.model.adam.clone()),
        }];
        for p in &self.policies {
            blobs.push(Blob {
                name: format!("policy/{}", p.skill.name()),
                arch: p.arch(),
                params: p.params.values.clone(),
                adam: Some(p.adam.clone()),
            });
        }
        let state = TrainerState {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            buffer: self.buffer.clone(),
            demos: self.demos.clone(),
            interval: self.interval.clone(),
            metrics: self.metrics.clone(),
        };
        Checkpoint { blobs, trailer: serde_json::to_vec(&state).expect("trainer state serializes") }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    /// Restores a trainer. `config` must hash like the one the checkpoint
    /// was written with; its iteration budget and output directory win.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: ExperimentConfig) -> Result<Self, HarnessError> {
        let state: TrainerState = serde_json::from_slice(&ckpt.trailer)?;
        let expected = config.hash();
        if state.config_hash != expected || state.config.hash() != expected {
            return Err(HarnessError::ConfigMismatch { expected, found: state.config_hash });
        }
        let mut t = Trainer::new(config)?;
        let restore = |blob: &Blob, params: &mut Vec<f64>, adam: &mut AdamState| -> Result<(), HarnessError> {
            if blob.params.len() != params.len() {
                return Err(CheckpointError::Corrupt(format!("blob `{}` has the wrong length", blob.name)).into());
            }
            *params = blob.params.clone();
            *adam = blob.adam.clone().ok_or_else(|| CheckpointError::Corrupt(format!("blob `{}` lacks optimizer state", blob.name)))?;
            Ok(())
        };
        let b = ckpt.blob("sampler", &t.model.arch())?;
        restore(b, &mut t.model.params.values, &mut t.model.adam)?;
        for p in &mut t.policies {
            let b = ckpt.blob(&format!("policy/{}", p.skill.name()), &p.arch())?;
            restore(b, &mut p.params.values, &mut p.adam)?;
        }
        t.iteration = state.iteration;
        t.env_steps = state.env_steps;
        t.buffer = state.buffer;
        t.demos = state.demos;
        t.interval = state.interval;
        t.clock_offset = state.metrics.last().map_or(0.0, |m| m.wall_clock);
        t.metrics = state.metrics;
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path, config: ExperimentConfig) -> Result<Self, HarnessError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

fn to_features(v: &[f64]) -> FeatureVector {
    let mut f = [0.0; FEATURE_DIM];
    f.copy_from_slice(v);
    f
}

/// Loads learned policies from a checkpoint without validating the config.
pub fn load_policies(path: &Path) -> Result<Vec<PolicyModel>, HarnessError> {
    let ckpt = Checkpoint::load(path)?;
    let state: TrainerState = serde_json::from_slice(&ckpt.trailer)?;
    let featurizer = FeaturizerConfig { reach_radius: state.config.world.reach_radius };
    let mut rng = seeded(0);
    Skill::ALL
        .iter()
        .map(|&s| {
            let mut p = PolicyModel::new(s, featurizer, &mut rng);
            let b = ckpt.blob(&format!("policy/{}", s.name()), &p.arch())?;
            p.params.values = b.params.clone();
            Ok(p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Runs

pub struct TrainingOutcome {
    pub metrics: Vec<MetricsRow>,
    pub trainer: Trainer,
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    seed: u64,
    iterations: usize,
    env_steps: u64,
    final_success: Vec<(String, f64)>,
    mean_final_success: f64,
    wall_clock_seconds: f64,
    config_hash: String,
}

/// Runs (or continues) training. With an output directory, writes the
/// metrics CSV, per-iteration logs, checkpoints and a run summary there.
pub fn run_training(config: ExperimentConfig) -> Result<TrainingOutcome, HarnessError> {
    let trainer = Trainer::new(config)?;
    continue_training(trainer)
}

pub fn continue_training(mut trainer: Trainer) -> Result<TrainingOutcome, HarnessError> {
    let Some(dir) = trainer.config.out_dir.clone() else {
        trainer.run(&mut Logs::default())?;
        return Ok(TrainingOutcome { metrics: trainer.metrics.clone(), trainer });
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), toml::to_string(&trainer.config).map_err(|e| HarnessError::Config(e.to_string()))?)?;
    let resumed = trainer.iteration > 0;
    let open = |name: &str| -> Result<Box<dyn Write>, HarnessError> {
        let f = fs::OpenOptions::new().create(true).append(resumed).write(true).truncate(!resumed).open(dir.join(name))?;
        Ok(Box::new(BufWriter::new(f)))
    };
    let mut logs = Logs { selections: Some(open("selections.jsonl")?), episodes: Some(open("episodes.jsonl")?) };
    let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    let mut timing = BufWriter::new(File::create(dir.join("timing.csv"))?);
    writeln!(csv, "{}", MetricsRow::csv_header())?;
    writeln!(timing, "iteration,wall_clock_seconds")?;
    let mut written = 0;
    let mut flush_rows = |t: &Trainer, csv: &mut BufWriter<File>, timing: &mut BufWriter<File>| -> Result<(), HarnessError> {
        for r in &t.metrics[written..] {
            writeln!(csv, "{}", r.csv_line())?;
            writeln!(timing, "{},{:.3}", r.iteration, r.wall_clock)?;
        }
        written = t.metrics.len();
        csv.flush()?;
        timing.flush()?;
        Ok(())
    };
    flush_rows(&trainer, &mut csv, &mut timing)?;
    let ckpt_path = dir.join("checkpoint.bin");
    while !trainer.done() {
        trainer.step(&mut logs)?;
        flush_rows(&trainer, &mut csv, &mut timing)?;
        let every = trainer.config.checkpoint_interval;
        if every > 0 && trainer.iteration % every == 0 {
            trainer.save_checkpoint(&ckpt_path)?;
        }
    }
    for w in [&mut logs.selections, &mut logs.episodes].into_iter().flatten() {
        w.flush()?;
    }
    trainer.save_checkpoint(&ckpt_path)?;
    let last = trainer.metrics.last();
    let final_success: Vec<(String, f64)> =
        Skill::ALL.iter().map(|s| (s.name().to_string(), last.map_or(0.0, |m| m.success[s.index()]))).collect();
    let summary = Summary {
        mode: trainer.config.mode.name(),
        seed: trainer.config.seed,
        iterations: trainer.iteration,
        env_steps: trainer.env_steps,
        mean_final_success: final_success.iter().map(|(_, v)| v).sum::<f64>() / 4.0,
        final_success,
        wall_clock_seconds: last.map_or(0.0, |m| m.wall_clock),
        config_hash: trainer.config.hash(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainingOutcome { metrics: trainer.metrics.clone(), trainer })
}

/// Reads an episode log written by training and replays every episode.
pub fn replay_log(path: &Path, constants: &WorldConstants) -> Result<usize, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut n = 0;
    for (k, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let ep: Episode = serde_json::from_str(line)?;
        replay_episode(&ep, constants).map_err(|e| HarnessError::Replay(format!("episode {k}: {e}")))?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::{evaluate_actor, OracleActors, RandomActor};
    use crate::policy::INIT_LOG_STD;
    use crate::rng::seeded;

    fn small(seed: u64, mode: SamplerMode) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            iterations: 90,
            eval_interval: 30,
            eval_episodes: 4,
            batch_size: 16,
            mode,
            sampler: SamplerConfig { m: 32, candidates: 8, warmup: 20, ..SamplerConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    fn fingerprint(t: &Trainer) -> Vec<u64> {
        let mut v: Vec<u64> = t.model.params.values.iter().map(|x| x.to_bits()).collect();
        for p in &t.policies {
            v.extend(p.params.values.iter().map(|x| x.to_bits()));
        }
        v
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = run_training(small(5, SamplerMode::Atr)).unwrap();
        let b = run_training(small(5, SamplerMode::Atr)).unwrap();
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(fingerprint(&a.trainer), fingerprint(&b.trainer));
    }

    #[test]
    fn one_environment_step_per_iteration() {
        let mut t = Trainer::new(small(2, SamplerMode::Atr)).unwrap();
        let mut logs = Logs::default();
        while !t.done() {
            let (it, steps, inserted) = (t.iteration, t.env_steps, t.buffer.inserted);
            t.step(&mut logs).unwrap();
            let ep = t.buffer.by_insertion(t.buffer.inserted - 1).unwrap();
            assert_eq!(t.iteration, it + 1);
            assert_eq!(t.buffer.inserted, inserted + 1);
            assert_eq!(ep.env_steps(), usize::from(ep.instantiated));
            assert_eq!(t.env_steps, steps + ep.env_steps() as u64);
        }
    }

    #[test]
    fn evaluation_leaves_training_state_alone() {
        let mut t = Trainer::new(small(4, SamplerMode::Atr)).unwrap();
        let mut logs = Logs::default();
        for _ in 0..40 {
            t.step(&mut logs).unwrap();
        }
        let (len, inserted, before) = (t.buffer.len(), t.buffer.inserted, fingerprint(&t));
        let demos: Vec<u64> = t.demos.iter().map(|d| d.inserted).collect();
        t.record_metrics();
        assert_eq!((t.buffer.len(), t.buffer.inserted), (len, inserted));
        assert_eq!(fingerprint(&t), before);
        assert_eq!(t.demos.iter().map(|d| d.inserted).collect::<Vec<_>>(), demos);
    }

    #[test]
    fn uniform_mode_ignores_the_model() {
        let select = |jitter: f64| {
            let mut t = Trainer::new(small(8, SamplerMode::Uniform)).unwrap();
            t.model.params.values.iter_mut().for_each(|v| *v += jitter);
            let mut out = Vec::new();
            for _ in 0..40 {
                t.step(&mut Logs::default()).unwrap();
                out.push(t.buffer.by_insertion(t.buffer.inserted - 1).unwrap().task.clone());
            }
            out
        };
        assert_eq!(select(0.0), select(0.3));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut t = Trainer::new(small(3, SamplerMode::Atr)).unwrap();
        for _ in 0..45 {
            t.step(&mut Logs::default()).unwrap();
        }
        let bytes = t.to_checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let u = Trainer::from_checkpoint(&ckpt, t.config.clone()).unwrap();
        assert_eq!(u.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let full = run_training(small(6, SamplerMode::Atr)).unwrap();
        let mut t = Trainer::new(small(6, SamplerMode::Atr)).unwrap();
        for _ in 0..50 {
            t.step(&mut Logs::default()).unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&t.to_checkpoint().to_bytes()).unwrap();
        let resumed = Trainer::from_checkpoint(&ckpt, small(6, SamplerMode::Atr)).unwrap();
        let rest = continue_training(resumed).unwrap();
        assert_eq!(metrics_csv(&rest.metrics), metrics_csv(&full.metrics));
        assert_eq!(fingerprint(&rest.trainer), fingerprint(&full.trainer));
    }

    #[test]
    fn checkpoint_rejects_other_config() {
        let t = Trainer::new(small(1, SamplerMode::Atr)).unwrap();
        let ckpt = t.to_checkpoint();
        let err = Trainer::from_checkpoint(&ckpt, small(2, SamplerMode::Atr)).err().unwrap();
        assert!(matches!(err, HarnessError::ConfigMismatch { .. }), "{err}");
        // A longer budget is a continuation, not a different run.
        assert!(Trainer::from_checkpoint(&ckpt, ExperimentConfig { iterations: 500, ..small(1, SamplerMode::Atr) }).is_ok());
    }

    #[test]
    fn logged_episodes_replay() {
        let mut t = Trainer::new(small(9, SamplerMode::Atr)).unwrap();
        let path = std::env::temp_dir().join(format!("atr-replay-{}.jsonl", std::process::id()));
        {
            let mut logs = Logs { selections: None, episodes: Some(Box::new(File::create(&path).unwrap())) };
            for _ in 0..30 {
                t.step(&mut logs).unwrap();
            }
        }
        let c = WorldConstants::default();
        assert_eq!(replay_log(&path, &c).unwrap(), 30);
        let text = fs::read_to_string(&path).unwrap();
        fs::remove_file(&path).unwrap();
        let eps: Vec<Episode> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let mut bad = eps.iter().find(|e| !e.steps.is_empty()).unwrap().clone();
        bad.steps[0].reward = 1.0 - bad.steps[0].reward;
        assert!(matches!(replay_episode(&bad, &c), Err(HarnessError::Replay(_))));
    }

    #[test]
    fn metrics_rows_match_header() {
        let out = run_training(small(1, SamplerMode::Uniform)).unwrap();
        let csv = metrics_csv(&out.metrics);
        let widths: Vec<usize> = csv.lines().map(|l| l.split(',').count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{widths:?}");
        assert!(csv.lines().skip(1).all(|l| l.starts_with(METRICS_SCHEMA)));
        for r in &out.metrics {
            assert!(r.success.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let c = small(11, SamplerMode::DiversityOnly);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("seed = 4\nmode = \"uniform\"\n").unwrap().iterations, 10_000);
        assert!(ExperimentConfig::from_toml("sed = 4\n").is_err());
        assert!(ExperimentConfig::from_toml("iterations = 0\n").is_err());
    }

    #[test]
    fn oracle_solves_the_suite() {
        let suite = EvalSuite::shipped().unwrap();
        assert_eq!(evaluate_actor(&OracleActors, &suite, 50, 0, &WorldConstants::default()), [1.0; 4]);
    }

    #[test]
    fn untrained_policies_act_like_random_actions() {
        // Monte-Carlo baseline: zero-mean Gaussian actions at the initial std.
        let c = WorldConstants::default();
        let suite = EvalSuite::shipped().unwrap();
        let t = Trainer::new(small(0, SamplerMode::Atr)).unwrap();
        let learned = evaluate_skills(&t.policies, &suite, 500, 1, &c);
        let random = evaluate_actor(&RandomActor { std: INIT_LOG_STD.exp() }, &suite, 500, 2, &c);
        for k in 0..4 {
            assert!((learned[k] - random[k]).abs() < 0.06, "{learned:?} vs {random:?}");
        }
    }

    #[test]
    fn episode_without_instance_has_no_steps() {
        let mut w = sample_prior(&mut seeded(1), &PriorConfig::default()).unwrap();
        // A rack larger than the table cannot be placed.
        w.objects[1].size = [3.0, 3.0, 0.2];
        let t = Trainer::new(small(0, SamplerMode::Atr)).unwrap();
        let ep = run_episode(&w, 1, &t.policies, &WorldConstants::default(), &mut seeded(2));
        assert!(!ep.instantiated);
        assert_eq!((ep.env_steps(), ep.reward), (0, 0.0));
    }
}
