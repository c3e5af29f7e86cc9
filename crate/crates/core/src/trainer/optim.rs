use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::autograd::{ParamClass, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Adam,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Adam => "adam",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(Algorithm::Sgd),
            "adam" => Ok(Algorithm::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Per-step cosine decay to zero over the whole run.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => f.write_str("constant"),
            Schedule::Cosine => f.write_str("cosine"),
            Schedule::Step { milestones, gamma } => {
                let m: Vec<String> = milestones.iter().map(|m| m.to_string()).collect();
                write!(f, "step:{}:{gamma}", m.join("/"))
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `constant`, `cosine` or `step:<e1>/<e2>/..:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad schedule {s:?} (expected constant, cosine or step:10/20:0.1)"));
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => {
                let rest = s.strip_prefix("step:").ok_or_else(bad)?;
                let (ms, gamma) = rest.split_once(':').ok_or_else(bad)?;
                let milestones = ms.split('/').map(|m| m.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
                let gamma: f64 = gamma.parse().map_err(|_| bad())?;
                if !(gamma > 0.0) || milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(bad());
                }
                Ok(Schedule::Step { milestones, gamma })
            }
        }
    }
}

/// Optimizer, schedule and loop settings. The self-distribution factors
/// share the learning rate of every other parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Clamp latent binary weights to [-1, 1] after each update.
    pub clip_latent: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            epochs: 10,
            batch_size: 64,
            clip_latent: true,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub const KEYS: [&'static str; 12] = [
        "optimizer",
        "lr",
        "momentum",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "schedule",
        "epochs",
        "batch_size",
        "clip_latent",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum and betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        Ok(())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "optimizer" => self.algorithm = value.parse()?,
            "lr" => self.lr = f()?,
            "momentum" => self.momentum = f()?,
            "beta1" => self.beta1 = f()?,
            "beta2" => self.beta2 = f()?,
            "adam_eps" => self.adam_eps = f()?,
            "weight_decay" => self.weight_decay = f()?,
            "schedule" => self.schedule = value.parse()?,
            "epochs" => self.epochs = u()?,
            "batch_size" => self.batch_size = u()?,
            "clip_latent" => {
                self.clip_latent = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown optimizer key {key}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("optimizer", self.algorithm.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("schedule", self.schedule.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip_latent", if self.clip_latent { "on" } else { "off" }.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// One `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = OptimConfig::default();
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.trim().split_once('=')).collect();
        for (k, v) in kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate for global step `step` of `total_steps`, in `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize, total_steps: usize) -> f64 {
        match &self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                self.lr * 0.5 * (1.0 + (PI * t.min(1.0)).cos())
            }
            Schedule::Step { milestones, gamma } => {
                self.lr * gamma.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
        }
    }
}

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub algorithm: Algorithm,
    /// Updates applied so far.
    pub t: u64,
    /// Momentum (SGD) or first moment (Adam).
    pub m: Vec<Vec<f32>>,
    /// Second moment (Adam only, empty for SGD).
    pub v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Optimizer {
            algorithm: cfg.algorithm,
            t: 0,
            m: zeros(),
            v: if cfg.algorithm == Algorithm::Adam { zeros() } else { Vec::new() },
        }
    }

    /// Applies one update with learning rate `lr` from the accumulated
    /// gradients. Without momentum or decay SGD moves each parameter by
    /// exactly `-lr * grad`.
    pub fn step(&mut self, cfg: &OptimConfig, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State(format!("optimizer has {} buffers for {} parameters", self.m.len(), store.len())));
        }
        self.t += 1;
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - (cfg.beta1).powi(self.t as i32) as f32;
        let bc2 = 1.0 - (cfg.beta2).powi(self.t as i32) as f32;
        let mom = cfg.momentum as f32;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.learnable {
                continue;
            }
            let decay = if p.class.decays() { wd } else { 0.0 };
            let m = &mut self.m[i];
            let values = p.value.data_mut();
            let grads = p.grad.data();
            match self.algorithm {
                Algorithm::Sgd => {
                    for ((w, &g), buf) in values.iter_mut().zip(grads).zip(m.iter_mut()) {
                        let g = if decay != 0.0 { g + decay * *w } else { g };
                        let d = if mom != 0.0 {
                            *buf = mom * *buf + g;
                            *buf
                        } else {
                            g
                        };
                        *w -= lr * d;
                    }
                }
                Algorithm::Adam => {
                    let v = &mut self.v[i];
                    for (((w, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = if decay != 0.0 { g + decay * *w } else { g };
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mh = *mi / bc1;
                        let vh = *vi / bc2;
                        *w -= lr * mh / (vh.sqrt() + cfg.adam_eps as f32);
                    }
                }
            }
            if cfg.clip_latent && p.class == ParamClass::LatentWeight {
                for w in values.iter_mut() {
                    *w = w.clamp(-1.0, 1.0);
                }
            }
        }
        Ok(())
    }
}
