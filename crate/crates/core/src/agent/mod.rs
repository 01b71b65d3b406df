//! Distributional (C51) Q-learning agent: categorical value distributions,
//! double-Q bootstrap targets, target network, uniform replay and ε-greedy
//! exploration over a small fully connected network.

mod dist;
mod net;
mod optim;
mod replay;
mod train;

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dist::{argmax, double_q_target_action, project_target, q_values, CategoricalDist, Support};
pub use net::{Architecture, ForwardCache, Network};
pub use optim::{clip_grad_norm, Adam};
pub use replay::{ReplayBuffer, Transition};
pub use train::{
    loss_and_gradient, train, DiscountMode, LogRow, TrainConfig, TrainLog, TrainOutcome, TRAIN_CONFIG_VERSION,
};

use crate::datastore::{Dataset, IMAGE_SIDE};
use crate::env::{EnvState, Policy};
use crate::metrics::IouThresholdSpec;
use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

/// Side of the pooled image grid fed to the network in image mode.
pub const POOL_SIDE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// The frame's feature vector as-is.
    #[default]
    Features,
    /// The 84x84 grayscale image average-pooled to 12x12.
    PooledImage,
}

/// Turns an environment state into the network input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Featurizer {
    pub input: InputKind,
    /// Length of the observation part (feature vector length or 144).
    pub observation_dim: usize,
    pub actions: usize,
    /// Append a one-hot of the held prediction's detector (plus "none").
    pub observe_held: bool,
}

/// Average-pool a row-major 84x84 image into 12x12 blocks.
pub fn pool_image(image: &[f64]) -> Vec<f64> {
    let block = IMAGE_SIDE / POOL_SIDE;
    let norm = (block * block) as f64;
    let mut out = vec![0.0; POOL_SIDE * POOL_SIDE];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            out[(r / block) * POOL_SIDE + c / block] += image[r * IMAGE_SIDE + c];
        }
    }
    for v in &mut out {
        *v /= norm;
    }
    out
}

impl Featurizer {
    /// Infer the observation width from the dataset's first frame.
    pub fn for_dataset(dataset: &Dataset, input: InputKind, actions: usize, observe_held: bool) -> Result<Self> {
        let first = dataset
            .sequences
            .iter()
            .find_map(|s| s.frames.first())
            .ok_or_else(|| Error::InvalidInput("dataset has no frames".into()))?;
        let observation_dim = match input {
            InputKind::Features => first
                .observation
                .feature_vector
                .as_ref()
                .map(Vec::len)
                .ok_or_else(|| Error::InvalidInput("frames carry no feature_vector".into()))?,
            InputKind::PooledImage => POOL_SIDE * POOL_SIDE,
        };
        Ok(Featurizer {
            input,
            observation_dim,
            actions,
            observe_held,
        })
    }

    pub fn dim(&self) -> usize {
        self.observation_dim + if self.observe_held { self.actions + 1 } else { 0 }
    }

    pub fn encode(&self, state: &EnvState) -> Result<Vec<f64>> {
        let obs = &state.observation;
        let mut x = match self.input {
            InputKind::Features => obs.feature_vector.clone(),
            InputKind::PooledImage => obs.gray_image.as_deref().map(pool_image),
        }
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "frame {} of `{}` lacks the {:?} observation",
                state.cursor, state.sequence_id, self.input
            ))
        })?;
        if x.len() != self.observation_dim {
            return Err(Error::InvalidInput(format!(
                "observation has {} values, expected {}",
                x.len(),
                self.observation_dim
            )));
        }
        if self.observe_held {
            let mut one_hot = vec![0.0; self.actions + 1];
            one_hot[state.held.map_or(self.actions, |h| h.action)] = 1.0;
            x.extend(one_hot);
        }
        Ok(x)
    }
}

/// Action with the highest expected return; ties go to the lowest index.
pub fn greedy_action(net: &Network, support: &Support, observation: &[f64]) -> usize {
    argmax(&dist::q_values_raw(support, &net.forward(observation)))
}

/// ε-greedy action selection.
pub fn act(net: &Network, support: &Support, observation: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    if u < epsilon {
        rng.random_range(0..net.architecture().actions)
    } else {
        greedy_action(net, support, observation)
    }
}

/// Frozen network acting greedily; cheap to clone across threads.
#[derive(Clone)]
pub struct GreedyPolicy {
    net: Arc<Network>,
    featurizer: Featurizer,
    support: Support,
    name: String,
}

impl GreedyPolicy {
    pub fn new(net: Network, featurizer: Featurizer, support: Support, name: impl Into<String>) -> Self {
        GreedyPolicy {
            net: Arc::new(net),
            featurizer,
            support,
            name: name.into(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

impl Policy for GreedyPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn act(&mut self, state: &EnvState) -> usize {
        // observation shape was checked when the policy was built
        let x = self.featurizer.encode(state).expect("observation matches featurizer");
        greedy_action(&self.net, &self.support, &x)
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters plus everything needed to rebuild the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub featurizer: Featurizer,
    pub support: Support,
    /// Action index -> detector id.
    pub detectors: Vec<String>,
    pub iou: IouThresholdSpec,
    pub seed: u64,
    pub total_steps: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_outcome(
        outcome: &TrainOutcome,
        detectors: Vec<String>,
        iou: IouThresholdSpec,
        config: &TrainConfig,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: outcome.network.architecture().clone(),
            featurizer: outcome.featurizer.clone(),
            support: outcome.support,
            detectors,
            iou,
            seed: config.seed,
            total_steps: config.total_steps,
            params: outcome.network.params.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::validation(
                "checkpoint.version",
                format!("unsupported version {}", ckpt.version),
            ));
        }
        ckpt.check_descriptor(&ckpt.architecture)?;
        Ok(ckpt)
    }

    /// The stored descriptor must match `expected` and the parameter count.
    pub fn check_descriptor(&self, expected: &Architecture) -> Result<()> {
        if &self.architecture != expected {
            return Err(Error::validation(
                "checkpoint.architecture",
                format!(
                    "descriptor {:?} does not match expected {:?}",
                    self.architecture, expected
                ),
            ));
        }
        if self.featurizer.dim() != expected.input_dim || self.featurizer.actions != expected.actions {
            return Err(Error::validation(
                "checkpoint.featurizer",
                "featurizer shape does not match the architecture",
            ));
        }
        if self.support.atoms != expected.atoms {
            return Err(Error::validation("checkpoint.support", "atom count mismatch"));
        }
        if self.detectors.len() != expected.actions {
            return Err(Error::validation("checkpoint.detectors", "detector count mismatch"));
        }
        if self.params.len() != expected.param_count() {
            return Err(Error::validation(
                "checkpoint.params",
                format!(
                    "expected {} parameters, found {}",
                    expected.param_count(),
                    self.params.len()
                ),
            ));
        }
        Ok(())
    }

    /// Rebuild the greedy policy for a dataset whose observations must match
    /// the stored featurizer.
    pub fn policy(&self, dataset: &Dataset) -> Result<GreedyPolicy> {
        let fresh = Featurizer::for_dataset(
            dataset,
            self.featurizer.input,
            self.detectors.len(),
            self.featurizer.observe_held,
        )?;
        if fresh != self.featurizer {
            return Err(Error::validation(
                "checkpoint.featurizer",
                format!(
                    "dataset observations give {:?}, checkpoint expects {:?}",
                    fresh, self.featurizer
                ),
            ));
        }
        let net = Network::from_params(self.architecture.clone(), self.params.clone())?;
        Ok(GreedyPolicy::new(net, self.featurizer.clone(), self.support, "learned"))
    }
}
