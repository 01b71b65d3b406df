use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::{argmax, project_target, q_values_raw, Support};
use super::net::{Architecture, Network};
use super::optim::{clip_grad_norm, Adam};
use super::replay::{ReplayBuffer, Transition};
use super::{act, Featurizer, InputKind};
use crate::datastore::{Sequence, Split};
use crate::env::{Env, StepResult};
use crate::rng;
use crate::{Error, Result};

pub const TRAIN_CONFIG_VERSION: u32 = 1;

/// How rewards inside one decision are discounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountMode {
    /// `gamma` per frame: a decision spanning k+1 frames discounts its own
    /// frames by gamma^i and the future by gamma^(k+1).
    #[default]
    PerFrame,
    /// `gamma` per decision regardless of how many frames it covers.
    PerDecision,
}

/// Training schedule and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    /// Environment steps (decisions).
    pub total_steps: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub target_sync: u64,
    /// Transitions collected before learning starts.
    pub warmup: usize,
    pub batch_size: usize,
    pub learn_every: u64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    /// Global gradient norm cap; 0 disables.
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub discount_mode: DiscountMode,
    pub n_step: usize,
    pub replay_capacity: usize,
    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub hidden: Vec<usize>,
    pub dueling: bool,
    pub input: InputKind,
    pub observe_held: bool,
    /// Write a log row every this many steps.
    pub log_every: u64,
}

impl TrainConfig {
    /// Long schedule: 300k steps, ε 1.0 -> 0.01, target sync 8000, warmup 20000.
    pub fn paper() -> Self {
        TrainConfig {
            version: TRAIN_CONFIG_VERSION,
            seed: 0,
            total_steps: 300_000,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_steps: 300_000,
            target_sync: 8_000,
            warmup: 20_000,
            batch_size: 32,
            learn_every: 4,
            learning_rate: 6.25e-5,
            adam_epsilon: 1.5e-4,
            max_grad_norm: 10.0,
            gamma: 0.95,
            discount_mode: DiscountMode::PerFrame,
            n_step: 3,
            replay_capacity: 100_000,
            atoms: 51,
            v_min: 0.0,
            v_max: 20.0,
            hidden: vec![128, 128],
            dueling: false,
            input: InputKind::Features,
            observe_held: false,
            log_every: 1_000,
        }
    }

    /// 30k-step schedule sized for a laptop CPU.
    pub fn desk() -> Self {
        TrainConfig {
            total_steps: 30_000,
            epsilon_decay_steps: 20_000,
            target_sync: 1_000,
            warmup: 2_000,
            learning_rate: 5e-4,
            log_every: 500,
            ..Self::paper()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(f, m));
        if self.version != TRAIN_CONFIG_VERSION {
            return bad("version", "unsupported config version");
        }
        for (v, f) in [(self.epsilon_start, "epsilon_start"), (self.epsilon_end, "epsilon_end")] {
            if !(0.0..=1.0).contains(&v) {
                return bad(f, "must be in [0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must be in [0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.learn_every == 0 || self.target_sync == 0 || self.log_every == 0 {
            return bad("learn_every", "learn_every, target_sync and log_every must be positive");
        }
        if self.n_step == 0 {
            return bad("n_step", "must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity", "must be positive");
        }
        if self.warmup > self.replay_capacity {
            return bad("warmup", "cannot exceed replay_capacity");
        }
        self.support().validate()?;
        if self.hidden.contains(&0) {
            return bad("hidden", "layer sizes must be positive");
        }
        Ok(())
    }

    pub fn support(&self) -> Support {
        Support {
            atoms: self.atoms,
            v_min: self.v_min,
            v_max: self.v_max,
        }
    }

    /// Linear decay from start to end over `epsilon_decay_steps`, then flat.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let f = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }

    /// (discounted reward of the decision, discount applied after it)
    pub fn discount_step(&self, result: &StepResult) -> (f64, f64) {
        match self.discount_mode {
            DiscountMode::PerDecision => (result.reward, self.gamma),
            DiscountMode::PerFrame => {
                let mut g = 1.0;
                let mut r = 0.0;
                for c in &result.breakdown {
                    r += g * c.ap;
                    g *= self.gamma;
                }
                (r, g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epsilon: f64,
    /// Mean loss over the updates since the previous row.
    pub loss: Option<f64>,
    pub mean_return_last_100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Comment line recording the run's provenance.
    pub header: String,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const COLUMNS: &'static str = "step,epsilon,loss,mean_return_last_100";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.header);
        let _ = writeln!(s, "{}", Self::COLUMNS);
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{},{}",
                r.step,
                r.epsilon,
                opt(r.loss),
                opt(r.mean_return_last_100)
            );
        }
        s
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub featurizer: Featurizer,
    pub support: Support,
    pub log: TrainLog,
    pub episodes: u64,
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// with respect to the logits.
fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (l, m) in logits.iter().zip(target) {
        let logp = l - lse;
        if *m != 0.0 {
            loss -= m * logp;
        }
        grad.push(logp.exp() - m);
    }
    (loss, grad)
}

/// Mean cross-entropy between the online distribution of the taken action
/// and the projected double-Q target, and its exact gradient.
pub fn loss_and_gradient(
    online: &Network,
    target: &Network,
    support: &Support,
    batch: &[&Transition],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let arch = online.architecture();
    let atoms = arch.atoms;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; online.param_count()];
    let mut total = 0.0;
    let mut dlogits = vec![0.0; arch.output_len()];
    for t in batch {
        let m = if t.done {
            project_target(support, t.reward, 0.0, &[], true)
        } else {
            let next_online = online.forward(&t.next_observation);
            let a_star = argmax(&q_values_raw(support, &next_online));
            let next_target = target.forward(&t.next_observation);
            project_target(
                support,
                t.reward,
                t.discount,
                &next_target[a_star * atoms..(a_star + 1) * atoms],
                false,
            )
        };
        let cache = online.forward_cache(&t.observation);
        let row = t.action * atoms..(t.action + 1) * atoms;
        let (loss, g) = cross_entropy(&cache.logits[row.clone()], &m);
        total += loss * scale;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        for (d, g) in dlogits[row].iter_mut().zip(g) {
            *d = g * scale;
        }
        online.backward(&cache, &dlogits, &mut grad);
    }
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            message: format!("non-finite loss {total}"),
        });
    }
    Ok((total, grad))
}

struct Pending {
    observation: Vec<f64>,
    action: usize,
    reward: f64,
    discount: f64,
}

/// n-step transition starting at the front of `pending`.
fn assemble(pending: &VecDeque<Pending>, next_observation: Vec<f64>, done: bool) -> Transition {
    let front = &pending[0];
    let mut reward = 0.0;
    let mut discount = 1.0;
    for p in pending {
        reward += discount * p.reward;
        discount *= p.discount;
    }
    Transition {
        observation: front.observation.clone(),
        action: front.action,
        reward,
        next_observation,
        done,
        discount,
    }
}

/// Train on episodes drawn uniformly (with the config seed) from `sequences`.
pub fn train(env: &Env, sequences: &[&Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let actions = env.config().action_count();
    if actions < 2 {
        return Err(Error::validation("portfolio", "training needs at least two detectors"));
    }
    if sequences.is_empty() {
        return Err(Error::validation("sequences", "no training sequences"));
    }
    let support = cfg.support();
    let featurizer = Featurizer::for_dataset(env.dataset(), cfg.input, actions, cfg.observe_held)?;
    let arch = Architecture {
        input_dim: featurizer.dim(),
        hidden: cfg.hidden.clone(),
        actions,
        atoms: cfg.atoms,
        dueling: cfg.dueling,
    };
    let mut online = Network::init(arch, &mut rng::stream(cfg.seed, "init", 0))?;
    let mut target = online.clone();
    let mut opt = Adam::new(online.param_count(), cfg.learning_rate, cfg.adam_epsilon);
    let mut rng_episode = rng::stream(cfg.seed, "episodes", 0);
    let mut rng_act = rng::stream(cfg.seed, "act", 0);
    let mut rng_replay = rng::stream(cfg.seed, "replay", 0);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);

    let variant = match env.config().split {
        Split::Train => "holdout",
        Split::Test => "fulltrain",
    };
    let header = format!(
        "# variant={variant} split={} detectors={} iou={} seed={} total_steps={}",
        env.config().split.as_str(),
        env.config().detector_ids().join("+"),
        env.config().iou,
        cfg.seed,
        cfg.total_steps
    );
    let mut log = TrainLog {
        header,
        rows: Vec::new(),
    };

    let mut pending: VecDeque<Pending> = VecDeque::with_capacity(cfg.n_step + 1);
    let mut current = None;
    let mut observation = Vec::new();
    let mut episode_return = 0.0;
    let mut returns: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut episodes = 0u64;
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;

    for step in 1..=cfg.total_steps {
        let state = match current.take() {
            Some(s) => s,
            None => {
                let seq = sequences[rng_episode.random_range(0..sequences.len())];
                let s = env.reset(seq)?;
                observation = featurizer.encode(&s)?;
                episode_return = 0.0;
                s
            }
        };
        let epsilon = cfg.epsilon_at(step - 1);
        let action = act(&online, &support, &observation, epsilon, &mut rng_act);
        let result = env.step(&state, action)?;
        let (reward, discount) = cfg.discount_step(&result);
        episode_return += result.reward;
        pending.push_back(Pending {
            observation: std::mem::take(&mut observation),
            action,
            reward,
            discount,
        });
        match result.next {
            Some(next) => {
                observation = featurizer.encode(&next)?;
                if pending.len() == cfg.n_step {
                    replay.push(assemble(&pending, observation.clone(), false));
                    pending.pop_front();
                }
                current = Some(next);
            }
            None => {
                while !pending.is_empty() {
                    replay.push(assemble(&pending, Vec::new(), true));
                    pending.pop_front();
                }
                if returns.len() == 100 {
                    returns.pop_front();
                }
                returns.push_back(episode_return);
                episodes += 1;
            }
        }

        if replay.len() >= cfg.warmup.max(1) && step % cfg.learn_every == 0 {
            let batch = replay.sample(cfg.batch_size, &mut rng_replay);
            let (loss, mut grad) = loss_and_gradient(&online, &target, &support, &batch).map_err(|e| match e {
                Error::Divergence { message, .. } => Error::Divergence { step, message },
                e => e,
            })?;
            let norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("non-finite gradient norm {norm}"),
                });
            }
            opt.step(&mut online.params, &grad);
            if let Some(i) = online.params.iter().position(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    message: format!("parameter {i} became {}", online.params[i]),
                });
            }
            loss_sum += loss;
            loss_count += 1;
        }
        if step % cfg.target_sync == 0 {
            target.params.copy_from_slice(&online.params);
        }
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            log.rows.push(LogRow {
                step,
                epsilon,
                loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
                mean_return_last_100: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    Ok(TrainOutcome {
        network: online,
        featurizer,
        support,
        log,
        episodes,
    })
}
