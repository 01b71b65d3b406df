//! Categorical return distributions over a fixed atom support.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Evenly spaced atoms `z_i = v_min + i * (v_max - v_min) / (atoms - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Support {
    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for Support {
    fn default() -> Self {
        Support {
            atoms: 51,
            v_min: 0.0,
            v_max: 20.0,
        }
    }
}

impl Support {
    pub fn new(atoms: usize, v_min: f64, v_max: f64) -> Result<Self> {
        let s = Support { atoms, v_min, v_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms < 2 {
            return Err(Error::validation("atoms", "need at least 2 atoms"));
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_max > self.v_min) {
            return Err(Error::validation("v_max", "need finite v_min < v_max"));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        (self.v_max - self.v_min) / (self.atoms - 1) as f64
    }

    pub fn z(&self, i: usize) -> f64 {
        self.v_min + i as f64 * self.delta()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.atoms).map(|i| self.z(i)).collect()
    }
}

/// Per-action probability vectors sharing one support.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    support: Support,
    actions: usize,
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// `probs` is action-major: `probs[a * atoms + i]`.
    pub fn new(support: Support, actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != actions * support.atoms || actions == 0 {
            return Err(Error::InvalidInput(format!(
                "expected {} probabilities for {actions} actions, got {}",
                actions * support.atoms,
                probs.len()
            )));
        }
        for (a, row) in probs.chunks(support.atoms).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "action {a}: probabilities must be >= 0 and sum to 1 (sum {total})"
                )));
            }
        }
        Ok(CategoricalDist {
            support,
            actions,
            probs,
        })
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn action(&self, a: usize) -> &[f64] {
        &self.probs[a * self.support.atoms..(a + 1) * self.support.atoms]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Expected value of each action's distribution.
pub fn q_values(dist: &CategoricalDist) -> Vec<f64> {
    q_values_raw(dist.support(), dist.probs())
}

pub(crate) fn q_values_raw(support: &Support, probs: &[f64]) -> Vec<f64> {
    let z = support.values();
    probs
        .chunks(support.atoms)
        .map(|row| row.iter().zip(&z).map(|(p, z)| p * z).sum())
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Project the distribution of `r + gamma_n * Z` back onto the support.
///
/// Each shifted atom is clamped to `[v_min, v_max]` and its mass split
/// linearly between the two neighbouring atoms. When `done`, all mass sits at
/// `r` and `next` is ignored.
pub fn project_target(support: &Support, r: f64, gamma_n: f64, next: &[f64], done: bool) -> Vec<f64> {
    let mut m = vec![0.0; support.atoms];
    let dz = support.delta();
    let mut place = |tz: f64, p: f64| {
        let tz = tz.clamp(support.v_min, support.v_max);
        let mut b = (tz - support.v_min) / dz;
        // values that land on an atom up to rounding go to that atom alone
        if (b - b.round()).abs() < 1e-9 {
            b = b.round();
        }
        let l = b.floor() as usize;
        let u = (b.ceil() as usize).min(support.atoms - 1);
        if l == u {
            m[l] += p;
        } else {
            m[l] += p * (u as f64 - b);
            m[u] += p * (b - l as f64);
        }
    };
    if done {
        place(r, 1.0);
    } else {
        for (j, p) in next.iter().enumerate() {
            if *p != 0.0 {
                place(r + gamma_n * support.z(j), *p);
            }
        }
    }
    m
}

/// Double-Q bootstrap action: greedy on the online network's Q values. The
/// caller evaluates it with the target network's distribution.
pub fn double_q_target_action(online_next: &CategoricalDist, target_next: &CategoricalDist) -> usize {
    debug_assert_eq!(online_next.actions(), target_next.actions());
    argmax(&q_values(online_next))
}
