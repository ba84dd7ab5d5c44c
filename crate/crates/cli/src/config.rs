//! Experiment configuration: plain `key = value` text with `[section]`
//! headers or fully dotted keys. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use vstb::agent::{AgentConfig, DeltaMode, HeadKind, RlHyper, SupervisedConfig, TargetKind, TaskConfig, TrainConfig};
use vstb::analysis::ProbeConfig;
use vstb::attention::FeedbackVariant;
use vstb::environment::{CueValidity, DifficultySchedule, Location};
use vstb::model::CoreConfig;
use vstb::vae::{PretrainConfig, Reduction, VaeConfig};
use vstb::{Error, Result};

/// Everything a run needs besides file paths on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// Curriculum settings, used when `task.delta` is the curriculum.
    pub schedule: DifficultySchedule,
    pub vae: VaeConfig,
    pub pretrain: PretrainConfig,
    pub agent: AgentConfig,
    pub rl: RlHyper,
    /// Trials played between update rounds.
    pub wave: usize,
    pub supervised_batch: usize,
    pub supervised_lr: f64,
    pub probe: ProbeConfig,
    pub probe_train_fraction: f64,
    pub seed: u64,
    pub episodes: usize,
    /// Training log path; empty means next to the checkpoint.
    pub train_log: String,
    pub eval_trials: usize,
    pub eval_delta_grid: Vec<f64>,
    /// Trials per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vae = VaeConfig::default();
        let train = TrainConfig::default();
        let sup = SupervisedConfig::default();
        Self {
            task: train.task,
            schedule: DifficultySchedule::default(),
            pretrain: PretrainConfig::default(),
            agent: AgentConfig {
                core: CoreConfig {
                    d_features: vae.hidden,
                    ..CoreConfig::default()
                },
                ..AgentConfig::default()
            },
            vae,
            rl: train.hyper,
            wave: train.wave,
            supervised_batch: sup.batch,
            supervised_lr: sup.lr,
            probe: ProbeConfig::default(),
            probe_train_fraction: 0.8,
            seed: 0,
            episodes: train.episodes,
            train_log: String::new(),
            eval_trials: 100,
            eval_delta_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0],
            eval_batch: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value {v:?} for {key} (true or false)"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::PerSample => "per-sample",
        Reduction::PerElement => "per-element",
    }
}

fn target_name(t: TargetKind) -> &'static str {
    match t {
        TargetKind::Binned => "binned",
        TargetKind::Projected => "projected",
    }
}

impl ExperimentConfig {
    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                section = s
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            c.set(&key, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.rl.validate()?;
        if self.agent.core.d_features != self.vae.hidden {
            return Err(Error::Config("model feature width must equal vae.hidden".into()));
        }
        if !(self.probe_train_fraction > 0.0 && self.probe_train_fraction < 1.0) {
            return Err(Error::Config("probe.train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "environment.validities" => {
                self.task.validities = parse_list::<f64>(key, v)?
                    .into_iter()
                    .map(CueValidity::new)
                    .collect::<Result<_>>()?
            }
            "environment.cue_positions" => self.task.cue_positions = parse_list::<Location>(key, v)?,
            "environment.sigma" => self.task.sigma = parse(key, v)?,
            "environment.delta" => {
                self.task.delta = if v == "curriculum" {
                    DeltaMode::Curriculum(self.schedule)
                } else {
                    DeltaMode::Fixed(parse(key, v)?)
                }
            }
            "environment.k_start" => self.schedule.k_start = parse(key, v)?,
            "environment.k_min" => self.schedule.k_min = parse(key, v)?,
            "environment.shrink" => self.schedule.shrink = parse(key, v)?,
            "environment.threshold" => self.schedule.threshold = parse(key, v)?,
            "environment.window" => self.schedule.window = parse(key, v)?,
            "vae.conv1_channels" => self.vae.conv1_channels = parse(key, v)?,
            "vae.conv2_channels" => self.vae.conv2_channels = parse(key, v)?,
            "vae.hidden" => {
                self.vae.hidden = parse(key, v)?;
                self.agent.core.d_features = self.vae.hidden;
            }
            "vae.d_latent" => self.vae.d_latent = parse(key, v)?,
            "vae.beta" => self.vae.beta = parse(key, v)?,
            "vae.reduction" => {
                self.vae.reduction = match v {
                    "per-sample" => Reduction::PerSample,
                    "per-element" => Reduction::PerElement,
                    _ => return Err(Error::Config(format!("bad value {v:?} for {key}"))),
                }
            }
            "vae.steps" => self.pretrain.steps = parse(key, v)?,
            "vae.batch" => self.pretrain.batch = parse(key, v)?,
            "vae.dataset" => self.pretrain.dataset = parse(key, v)?,
            "vae.lr" => self.pretrain.lr = parse(key, v)?,
            "model.variant" => self.agent.core.variant = v.parse::<FeedbackVariant>()?,
            "model.d_mem" => self.agent.core.d_mem = parse(key, v)?,
            "model.n_time" => self.agent.core.n_time = parse(key, v)?,
            "model.scaled_attention" => self.agent.core.scaled_attention = parse_bool(key, v)?,
            "model.widths" => self.agent.widths = parse_list(key, v)?,
            "model.v_min" => self.agent.support.v_min = parse(key, v)?,
            "model.v_max" => self.agent.support.v_max = parse(key, v)?,
            "model.atoms" => self.agent.support.k = parse(key, v)?,
            "model.head" => self.agent.head = v.parse::<HeadKind>()?,
            "rl.gamma" => self.rl.gamma = parse(key, v)?,
            "rl.eta" => self.rl.eta = parse(key, v)?,
            "rl.beta" => self.rl.beta = parse(key, v)?,
            "rl.lambda_pol" => self.rl.lambda_pol = parse(key, v)?,
            "rl.lambda_ent" => self.rl.lambda_ent = parse(key, v)?,
            "rl.epsilon" => self.rl.epsilon = if v == "auto" { None } else { Some(parse(key, v)?) },
            "rl.target" => {
                self.rl.target = match v {
                    "binned" => TargetKind::Binned,
                    "projected" => TargetKind::Projected,
                    _ => return Err(Error::Config(format!("bad value {v:?} for {key}"))),
                }
            }
            "rl.target_sync" => self.rl.target_sync = parse(key, v)?,
            "rl.lr" => self.rl.lr = parse(key, v)?,
            "rl.max_grad_norm" => self.rl.max_grad_norm = parse(key, v)?,
            "rl.replay_capacity" => self.rl.replay_capacity = parse(key, v)?,
            "rl.batch" => self.rl.batch = parse(key, v)?,
            "rl.updates_per_trial" => self.rl.updates_per_trial = parse(key, v)?,
            "rl.wave" => self.wave = parse(key, v)?,
            "supervised.batch" => self.supervised_batch = parse(key, v)?,
            "supervised.lr" => self.supervised_lr = parse(key, v)?,
            "probe.hidden" => self.probe.hidden = parse_list(key, v)?,
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.batch" => self.probe.batch = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.train_fraction" => self.probe_train_fraction = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.episodes" => self.episodes = parse(key, v)?,
            "run.train_log" => self.train_log = v.to_string(),
            "eval.trials" => self.eval_trials = parse(key, v)?,
            "eval.delta_grid" => self.eval_delta_grid = parse_list(key, v)?,
            "eval.batch" => self.eval_batch = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        // The curriculum carries a copy of the schedule.
        if let DeltaMode::Curriculum(s) = &mut self.task.delta {
            *s = self.schedule;
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        vec![
            ("environment.validities", join(&self.task.validities.iter().map(|v| v.value()).collect::<Vec<_>>())),
            ("environment.cue_positions", join(&self.task.cue_positions)),
            ("environment.sigma", self.task.sigma.to_string()),
            (
                "environment.delta",
                match self.task.delta {
                    DeltaMode::Curriculum(_) => "curriculum".into(),
                    DeltaMode::Fixed(d) => d.to_string(),
                },
            ),
            ("environment.k_start", s.k_start.to_string()),
            ("environment.k_min", s.k_min.to_string()),
            ("environment.shrink", s.shrink.to_string()),
            ("environment.threshold", s.threshold.to_string()),
            ("environment.window", s.window.to_string()),
            ("vae.conv1_channels", self.vae.conv1_channels.to_string()),
            ("vae.conv2_channels", self.vae.conv2_channels.to_string()),
            ("vae.hidden", self.vae.hidden.to_string()),
            ("vae.d_latent", self.vae.d_latent.to_string()),
            ("vae.beta", self.vae.beta.to_string()),
            ("vae.reduction", reduction_name(self.vae.reduction).into()),
            ("vae.steps", self.pretrain.steps.to_string()),
            ("vae.batch", self.pretrain.batch.to_string()),
            ("vae.dataset", self.pretrain.dataset.to_string()),
            ("vae.lr", self.pretrain.lr.to_string()),
            ("model.variant", self.agent.core.variant.to_string()),
            ("model.d_mem", self.agent.core.d_mem.to_string()),
            ("model.n_time", self.agent.core.n_time.to_string()),
            ("model.scaled_attention", self.agent.core.scaled_attention.to_string()),
            ("model.widths", join(&self.agent.widths)),
            ("model.v_min", self.agent.support.v_min.to_string()),
            ("model.v_max", self.agent.support.v_max.to_string()),
            ("model.atoms", self.agent.support.k.to_string()),
            ("model.head", self.agent.head.to_string()),
            ("rl.gamma", self.rl.gamma.to_string()),
            ("rl.eta", self.rl.eta.to_string()),
            ("rl.beta", self.rl.beta.to_string()),
            ("rl.lambda_pol", self.rl.lambda_pol.to_string()),
            ("rl.lambda_ent", self.rl.lambda_ent.to_string()),
            ("rl.epsilon", self.rl.epsilon.map(|e| e.to_string()).unwrap_or_else(|| "auto".into())),
            ("rl.target", target_name(self.rl.target).into()),
            ("rl.target_sync", self.rl.target_sync.to_string()),
            ("rl.lr", self.rl.lr.to_string()),
            ("rl.max_grad_norm", self.rl.max_grad_norm.to_string()),
            ("rl.replay_capacity", self.rl.replay_capacity.to_string()),
            ("rl.batch", self.rl.batch.to_string()),
            ("rl.updates_per_trial", self.rl.updates_per_trial.to_string()),
            ("rl.wave", self.wave.to_string()),
            ("supervised.batch", self.supervised_batch.to_string()),
            ("supervised.lr", self.supervised_lr.to_string()),
            ("probe.hidden", join(&self.probe.hidden)),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.batch", self.probe.batch.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.train_fraction", self.probe_train_fraction.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.episodes", self.episodes.to_string()),
            ("run.train_log", self.train_log.clone()),
            ("eval.trials", self.eval_trials.to_string()),
            ("eval.delta_grid", join(&self.eval_delta_grid)),
            ("eval.batch", self.eval_batch.to_string()),
        ]
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("keys are dotted");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episodes: self.episodes,
            hyper: self.rl,
            task: self.task.clone(),
            wave: self.wave,
        }
    }

    pub fn supervised_config(&self) -> SupervisedConfig {
        SupervisedConfig {
            episodes: self.episodes,
            batch: self.supervised_batch,
            lr: self.supervised_lr,
            task: self.task.clone(),
        }
    }
}
