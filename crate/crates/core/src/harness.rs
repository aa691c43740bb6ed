//! Experiment orchestration: the four control schemes, per-run file output
//! (metrics CSV, checkpoints, manifest), paired scheme comparisons, the
//! element-count sweep, and deterministic policy evaluation.
//!
//! Every run is a pure function of (config, scheme, seed). Scheme comparisons
//! reuse the same seeds, so each scheme trains against identical user layouts
//! and fading sequences and the differences come from the control degrees of
//! freedom alone.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::env::{EnvConfig, StarEnv};
use crate::nn::{Adam, Mlp};
use crate::ppo::{train, GaussianPolicy, MetricsRow, PpoHyper, TrainResult};
use crate::starris::wrap_phase;
use crate::{derive_seed, Error, RandomStream, Result};

const CHECKPOINT_MAGIC: &str = "STARBEAM-CKPT v1";
const TAG_EVAL: u64 = 9;

/// Which degrees of freedom the agent keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Everything under policy control: movement, orientation, panel, beams.
    Deployment,
    /// Panel stays where it starts; orientation is still an action.
    FixedPosition,
    /// Panel pose fully frozen at its initial position and orientation.
    FixedPositionAndOrientation,
    /// No panel at all: zero cascade, pose frozen; beams only.
    NoRis,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Deployment,
        Scheme::FixedPosition,
        Scheme::FixedPositionAndOrientation,
        Scheme::NoRis,
    ];

    /// Directory-friendly name.
    pub fn slug(&self) -> &'static str {
        match self {
            Scheme::Deployment => "deployment",
            Scheme::FixedPosition => "fixed-position",
            Scheme::FixedPositionAndOrientation => "fixed-pose",
            Scheme::NoRis => "no-ris",
        }
    }

    /// Environment for this scheme: identical to the base except that the
    /// no-panel baseline zeroes the cascade. Observation and action shapes
    /// never change, so every scheme trains the same network architecture.
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        let mut cfg = base.clone();
        cfg.disable_panel = matches!(self, Scheme::NoRis);
        cfg
    }

    /// The mask applied to every executed action under this scheme.
    pub fn mask(&self, cfg: &EnvConfig) -> ActionMask {
        let (pin_movement, pin_orientation) = match self {
            Scheme::Deployment => (false, false),
            Scheme::FixedPosition => (true, false),
            Scheme::FixedPositionAndOrientation | Scheme::NoRis => (true, true),
        };
        ActionMask {
            movement_offset: cfg.movement_offset(),
            pin_movement,
            pin_orientation,
            orientation_raw: wrap_phase(cfg.ris_init_angle) / std::f64::consts::PI,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deployment" => Ok(Scheme::Deployment),
            "fixed-position" => Ok(Scheme::FixedPosition),
            "fixed-pose" => Ok(Scheme::FixedPositionAndOrientation),
            "no-ris" => Ok(Scheme::NoRis),
            other => Err(Error::Config(format!(
                "unknown scheme '{}'; expected deployment, fixed-position, fixed-pose, or no-ris",
                other
            ))),
        }
    }
}

/// Pins masked action entries in place; the vector length never changes.
#[derive(Debug, Clone, Copy)]
pub struct ActionMask {
    movement_offset: usize,
    pin_movement: bool,
    pin_orientation: bool,
    orientation_raw: f64,
}

impl ActionMask {
    pub fn apply(&self, a: &mut [f64]) {
        if self.pin_movement {
            a[self.movement_offset] = 0.0;
            a[self.movement_offset + 1] = 0.0;
        }
        if self.pin_orientation {
            a[self.movement_offset + 2] = self.orientation_raw;
        }
    }
}

/// One experiment: a system, training hyperparameters, a scheme, and the
/// seeds to repeat over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub hyper: PpoHyper,
    pub scheme: Scheme,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Panel sizes for the element sweep; each must be a perfect square.
    pub element_sweep: Vec<usize>,
    /// Episodes per policy evaluation.
    pub eval_episodes: usize,
    /// Write a checkpoint every this many batches (0: only at the end).
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    /// Desk-scale profile: the reduced system with a 2048-step batch over
    /// 2e5 environment steps, five seeds.
    pub fn reduced_profile() -> Self {
        Self {
            env: EnvConfig::reduced_profile(),
            hyper: PpoHyper {
                batch: 2048,
                ..PpoHyper::default()
            },
            scheme: Scheme::Deployment,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
            element_sweep: vec![9, 16, 25],
            eval_episodes: 20,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        for &n in &self.element_sweep {
            let root = (n as f64).sqrt().round() as usize;
            if root * root != n {
                return Err(Error::Config(format!(
                    "element sweep entry {} is not a perfect square",
                    n
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {}", e)))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializable dump of one network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetDump {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub tanh_out: bool,
    pub params: Vec<f64>,
}

impl NetDump {
    pub fn from_mlp(net: &Mlp) -> Self {
        Self {
            input: net.w1.nrows(),
            hidden: net.w1.ncols(),
            output: net.w2.ncols(),
            tanh_out: net.tanh_out,
            params: net.flat(),
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        let mut rng = crate::stream_for(0, &[]);
        let mut net = Mlp::with_hidden(self.input, self.hidden, self.output, self.tanh_out, &mut rng);
        net.assign_flat(&self.params)?;
        net.validate()?;
        Ok(net)
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub env: EnvConfig,
    pub hyper: PpoHyper,
    pub scheme: Scheme,
    pub seed: u64,
    pub batches_done: usize,
    pub env_steps_done: usize,
    pub actor: NetDump,
    pub log_std: Vec<f64>,
    pub critic: NetDump,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub shuffle_rng: RandomStream,
}

impl Checkpoint {
    pub fn policy(&self) -> Result<GaussianPolicy> {
        Ok(GaussianPolicy {
            actor: self.actor.to_mlp()?,
            log_std: self.log_std.clone(),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let body = serde_json::to_string(ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize: {}", e)))?;
    fs::write(path, format!("{}\n{}", CHECKPOINT_MAGIC, body)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (magic, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "version mismatch: got '{}', expected '{}'",
            magic, CHECKPOINT_MAGIC
        )));
    }
    serde_json::from_str(body).map_err(|e| Error::Checkpoint(format!("parse: {}", e)))
}

const METRICS_HEADER: &str =
    "batch,env_steps,mean_episode_reward,actor_loss,critic_loss,clip_fraction,mean_std";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.batch,
            r.env_steps,
            r.mean_episode_reward,
            r.actor_loss,
            r.critic_loss,
            r.clip_fraction,
            r.mean_std
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "{}: unexpected metrics header {:?}",
                path.display(),
                other
            )))
        }
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|e| Error::Config(format!("{}: bad number '{}': {}", path.display(), s, e)))
    };
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Config(format!(
                "{}: expected 7 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        rows.push(MetricsRow {
            batch: fields[0]
                .parse()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
            env_steps: fields[1]
                .parse()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
            mean_episode_reward: parse(fields[2])?,
            actor_loss: parse(fields[3])?,
            critic_loss: parse(fields[4])?,
            clip_fraction: parse(fields[5])?,
            mean_std: parse(fields[6])?,
        });
    }
    Ok(rows)
}

/// Outcome of one (scheme, seed) training run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub scheme: Scheme,
    pub seed: u64,
    pub n_elements: usize,
    pub metrics: Vec<MetricsRow>,
    /// Mean episode reward over the last tenth of the batches, bits/s.
    pub final_mean_reward: f64,
    pub run_dir: PathBuf,
}

/// Mean episode reward over the final tenth of the stream (at least one row).
pub fn final_mean_reward(metrics: &[MetricsRow]) -> f64 {
    let tail = (metrics.len() / 10).max(1).min(metrics.len());
    let rows = &metrics[metrics.len() - tail..];
    rows.iter().map(|r| r.mean_episode_reward).sum::<f64>() / rows.len() as f64
}

/// Trains one (scheme, seed) pair in memory; no files touched.
pub fn train_run(
    base_env: &EnvConfig,
    hyper: &PpoHyper,
    scheme: Scheme,
    seed: u64,
) -> Result<TrainResult> {
    let env_cfg = scheme.env_config(base_env);
    let mask = scheme.mask(&env_cfg);
    let factory_cfg = env_cfg.clone();
    train(
        move |_| StarEnv::new(factory_cfg.clone(), 0),
        move |a: &mut [f64]| mask.apply(a),
        hyper,
        seed,
        |_| Ok(()),
    )
}

fn run_to_files(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    seed: u64,
    run_dir: &Path,
) -> Result<RunRecord> {
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let env_cfg = scheme.env_config(&cfg.env);
    let mask = scheme.mask(&env_cfg);
    let factory_cfg = env_cfg.clone();
    let ckpt_path = run_dir.join("checkpoint.ckpt");

    let manifest = Manifest {
        scheme,
        seed,
        env: env_cfg.clone(),
        hyper: cfg.hyper.clone(),
    };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("serializing manifest: {}", e)))?;
    let manifest_path = run_dir.join("manifest.toml");
    fs::write(&manifest_path, manifest_text).map_err(|e| io_err(&manifest_path, e))?;

    let every = cfg.checkpoint_every;
    let mut last_shuffle: Option<RandomStream> = None;
    let result = train(
        move |_| StarEnv::new(factory_cfg.clone(), 0),
        move |a: &mut [f64]| mask.apply(a),
        &cfg.hyper,
        seed,
        |ev| {
            last_shuffle = Some(ev.shuffle_rng.clone());
            if every > 0 && (ev.row.batch + 1) % every == 0 {
                let ckpt = Checkpoint {
                    env: env_cfg.clone(),
                    hyper: cfg.hyper.clone(),
                    scheme,
                    seed,
                    batches_done: ev.row.batch + 1,
                    env_steps_done: ev.row.env_steps,
                    actor: NetDump::from_mlp(&ev.policy.actor),
                    log_std: ev.policy.log_std.clone(),
                    critic: NetDump::from_mlp(ev.critic),
                    actor_opt: ev.actor_opt.clone(),
                    critic_opt: ev.critic_opt.clone(),
                    shuffle_rng: ev.shuffle_rng.clone(),
                };
                save_checkpoint(&ckpt_path, &ckpt)?;
            }
            Ok(())
        },
    )?;

    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &result.metrics)?;
    let last = result.metrics.last();
    let ckpt = Checkpoint {
        env: env_cfg,
        hyper: cfg.hyper.clone(),
        scheme,
        seed,
        batches_done: result.metrics.len(),
        env_steps_done: last.map(|r| r.env_steps).unwrap_or(0),
        actor: NetDump::from_mlp(&result.policy.actor),
        log_std: result.policy.log_std.clone(),
        critic: NetDump::from_mlp(&result.critic),
        actor_opt: result.actor_opt.clone(),
        critic_opt: result.critic_opt.clone(),
        shuffle_rng: last_shuffle.expect("training always runs at least one batch"),
    };
    save_checkpoint(&ckpt_path, &ckpt)?;

    Ok(RunRecord {
        scheme,
        seed,
        n_elements: cfg.env.n,
        final_mean_reward: final_mean_reward(&result.metrics),
        metrics: result.metrics,
        run_dir: run_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    scheme: Scheme,
    seed: u64,
    env: EnvConfig,
    hyper: PpoHyper,
}

/// Trains the configured scheme once per seed, writing each run's metrics,
/// manifest, and final checkpoint under its own directory.
pub fn run_scheme(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let jobs: Vec<(Scheme, u64)> = cfg.seeds.iter().map(|&s| (cfg.scheme, s)).collect();
    run_jobs(cfg, &jobs)
}

/// Trains all four schemes over the same seeds: the paired comparison.
pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &scheme in &Scheme::ALL {
        for &seed in &cfg.seeds {
            jobs.push((scheme, seed));
        }
    }
    run_jobs(cfg, &jobs)
}

fn run_jobs(cfg: &ExperimentConfig, jobs: &[(Scheme, u64)]) -> Result<Vec<RunRecord>> {
    let run_one = |&(scheme, seed): &(Scheme, u64)| -> Result<RunRecord> {
        let dir = cfg.out_dir.join(format!("{}-seed{}", scheme.slug(), seed));
        run_to_files(cfg, scheme, seed, &dir)
    };
    #[cfg(feature = "parallel")]
    let records: Vec<Result<RunRecord>> = jobs.par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Vec<Result<RunRecord>> = jobs.iter().map(run_one).collect();
    records.into_iter().collect()
}

/// Aggregated element-sweep entry.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub n_elements: usize,
    pub seed: u64,
    pub final_mean_reward: f64,
}

/// One full training per panel size per seed under the configured scheme.
pub fn sweep_elements(cfg: &ExperimentConfig, ns: &[usize]) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let mut shaped = Vec::new();
    for &n in ns {
        let root = (n as f64).sqrt().round() as usize;
        if root * root != n {
            return Err(Error::Config(format!(
                "panel size {} is not a perfect square",
                n
            )));
        }
        let mut sub = cfg.clone();
        sub.env.n = n;
        sub.env.channel.n_x = root;
        sub.env.validate()?;
        shaped.push(sub);
    }
    let jobs: Vec<(usize, u64)> = shaped
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run_one = |&(i, seed): &(usize, u64)| -> Result<SweepRecord> {
        let sub = &shaped[i];
        let dir = cfg
            .out_dir
            .join(format!("n{}-{}-seed{}", sub.env.n, sub.scheme.slug(), seed));
        let record = run_to_files(sub, sub.scheme, seed, &dir)?;
        Ok(SweepRecord {
            n_elements: sub.env.n,
            seed,
            final_mean_reward: record.final_mean_reward,
        })
    };
    #[cfg(feature = "parallel")]
    let records: Vec<Result<SweepRecord>> = jobs.par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Vec<Result<SweepRecord>> = jobs.iter().map(run_one).collect();
    records.into_iter().collect()
}

/// One evaluation step: what each user received and the slot's total.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep {
    pub episode: usize,
    pub t: usize,
    pub rates: Vec<f64>,
    pub reward: f64,
}

/// Rolls out the checkpointed policy deterministically (mean action, scheme
/// mask applied) and records per-slot per-user rates.
pub fn evaluate(ckpt: &Checkpoint, episodes: usize, seed: u64) -> Result<Vec<EvalStep>> {
    if episodes == 0 {
        return Err(Error::Config("need at least one evaluation episode".into()));
    }
    let policy = ckpt.policy()?;
    let mask = ckpt.scheme.mask(&ckpt.env);
    let mut env = StarEnv::new(ckpt.env.clone(), 0)?;
    let mut steps = Vec::with_capacity(episodes * ckpt.env.t);
    for episode in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, &[TAG_EVAL, episode as u64]))?;
        for t in 0..ckpt.env.t {
            let mut action = policy.mean_action(&obs)?;
            mask.apply(&mut action);
            let r = env.step(&action)?;
            steps.push(EvalStep {
                episode,
                t,
                rates: r.info.rates.clone(),
                reward: r.reward,
            });
            obs = r.obs;
        }
    }
    Ok(steps)
}

pub fn write_eval_csv(path: &Path, steps: &[EvalStep]) -> Result<()> {
    let k = steps.first().map(|s| s.rates.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str("episode,t");
    for u in 0..k {
        out.push_str(&format!(",rate_user_{}", u));
    }
    out.push_str(",reward\n");
    for s in steps {
        out.push_str(&format!("{},{}", s.episode, s.t));
        for r in &s.rates {
            out.push_str(&format!(",{}", r));
        }
        out.push_str(&format!(",{}\n", s.reward));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalStep>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    if cols < 3 {
        return Err(Error::Config(format!(
            "{}: malformed header '{}'",
            path.display(),
            header
        )));
    }
    let k = cols - 3;
    let mut steps = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Config(format!(
                "{}: expected {} fields, got {}",
                path.display(),
                cols,
                fields.len()
            )));
        }
        let bad = |e: std::num::ParseFloatError| Error::Config(format!("{}: {}", path.display(), e));
        steps.push(EvalStep {
            episode: fields[0]
                .parse()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
            t: fields[1]
                .parse()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
            rates: fields[2..2 + k]
                .iter()
                .map(|f| f.parse().map_err(bad))
                .collect::<Result<_>>()?,
            reward: fields[cols - 1].parse().map_err(bad)?,
        });
    }
    Ok(steps)
}
