//! Fully connected network mapping an observation vector to per-action
//! categorical distributions, with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub actions: usize,
    pub atoms: usize,
    #[serde(default)]
    pub dueling: bool,
}

/// Offsets of one affine layer inside the flat parameter vector. Weights are
/// row-major `out x in`, followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    input: usize,
    output: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.input * self.output
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.input * self.output;
        w..w + self.output
    }

    fn end(&self) -> usize {
        self.offset + (self.input + 1) * self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: Vec<Layer>,
    /// advantage head when dueling
    head: Layer,
    value: Option<Layer>,
    total: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.actions == 0 || self.atoms < 2 {
            return Err(Error::validation(
                "architecture",
                "input_dim and actions must be positive, atoms >= 2",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden", "layer sizes must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut input = self.input_dim;
        let mut hidden = Vec::new();
        for &h in &self.hidden {
            let l = Layer {
                input,
                output: h,
                offset,
            };
            offset = l.end();
            hidden.push(l);
            input = h;
        }
        let head = Layer {
            input,
            output: self.actions * self.atoms,
            offset,
        };
        offset = head.end();
        let value = self.dueling.then(|| {
            let l = Layer {
                input,
                output: self.atoms,
                offset,
            };
            offset = l.end();
            l
        });
        Layout {
            hidden,
            head,
            value,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn output_len(&self) -> usize {
        self.actions * self.atoms
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each hidden layer's post-ReLU activation.
    activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layout: Layout,
    pub params: Vec<f64>,
}

fn affine(params: &[f64], layer: &Layer, x: &[f64], out: &mut Vec<f64>) {
    let w = &params[layer.weights()];
    let b = &params[layer.biases()];
    out.clear();
    out.extend(
        w.chunks_exact(layer.input)
            .zip(b)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()),
    );
}

/// Accumulate `dW += dy x^T`, `db += dy`, and return `dx = W^T dy` if asked.
fn affine_backward(params: &[f64], layer: &Layer, x: &[f64], dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; layer.input] } else { Vec::new() };
    let w = &params[layer.weights()];
    let (gw, gb) = grad[layer.offset..layer.end()].split_at_mut(layer.input * layer.output);
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[o] += d;
        let row = o * layer.input..(o + 1) * layer.input;
        for (g, xi) in gw[row.clone()].iter_mut().zip(x) {
            *g += d * xi;
        }
        if want_dx {
            for (dxi, wi) in dx.iter_mut().zip(&w[row]) {
                *dxi += d * wi;
            }
        }
    }
    dx
}

fn softmax_rows(logits: &[f64], atoms: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(atoms) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for l in row {
            let e = (l - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    out
}

impl Network {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let layers = layout
            .hidden
            .iter()
            .chain(std::iter::once(&layout.head))
            .chain(layout.value.iter());
        for l in layers {
            let bound = 1.0 / (l.input as f64).sqrt();
            for w in &mut params[l.weights()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Network { layout, arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let total = arch.param_count();
        if params.len() != total {
            return Err(Error::validation(
                "params",
                format!("expected {total} parameters, found {}", params.len()),
            ));
        }
        Ok(Network {
            layout: arch.layout(),
            arch,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn forward_cache(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.arch.input_dim);
        let layout = &self.layout;
        let mut activations = Vec::with_capacity(layout.hidden.len() + 1);
        activations.push(x.to_vec());
        let mut buf = Vec::new();
        for l in &layout.hidden {
            affine(&self.params, l, activations.last().expect("input"), &mut buf);
            for v in &mut buf {
                *v = v.max(0.0);
            }
            activations.push(std::mem::take(&mut buf));
        }
        let last = activations.last().expect("input");
        let mut logits = Vec::new();
        affine(&self.params, &layout.head, last, &mut logits);
        if let Some(vl) = &layout.value {
            let mut value = Vec::new();
            affine(&self.params, vl, last, &mut value);
            let n = self.arch.atoms;
            let a = self.arch.actions as f64;
            for i in 0..n {
                let mean = (0..self.arch.actions).map(|k| logits[k * n + i]).sum::<f64>() / a;
                for k in 0..self.arch.actions {
                    logits[k * n + i] += value[i] - mean;
                }
            }
        }
        let probs = softmax_rows(&logits, self.arch.atoms);
        ForwardCache {
            activations,
            logits,
            probs,
        }
    }

    /// Per-action probabilities, action-major.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cache(x).probs
    }

    /// Accumulate the gradient of a scalar loss given `dlogits`
    /// (derivative with respect to the final logits) into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let layout = &self.layout;
        let last = cache.activations.last().expect("input");
        let mut dh = if let Some(vl) = &layout.value {
            let n = self.arch.atoms;
            let a = self.arch.actions;
            let mut dv = vec![0.0; n];
            let mut dadv = dlogits.to_vec();
            for i in 0..n {
                let s: f64 = (0..a).map(|k| dlogits[k * n + i]).sum();
                dv[i] = s;
                for k in 0..a {
                    dadv[k * n + i] -= s / a as f64;
                }
            }
            let mut dh = affine_backward(&self.params, &layout.head, last, &dadv, grad, true);
            let dh2 = affine_backward(&self.params, vl, last, &dv, grad, true);
            for (a, b) in dh.iter_mut().zip(dh2) {
                *a += b;
            }
            dh
        } else {
            affine_backward(&self.params, &layout.head, last, dlogits, grad, true)
        };
        for (li, l) in layout.hidden.iter().enumerate().rev() {
            let out = &cache.activations[li + 1];
            for (d, o) in dh.iter_mut().zip(out) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
            dh = affine_backward(&self.params, l, &cache.activations[li], &dh, grad, li > 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn arch(dueling: bool) -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![6, 5],
            actions: 3,
            atoms: 4,
            dueling,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        // 3*6+6 + 6*5+5 + 5*12+12
        assert_eq!(arch(false).param_count(), 24 + 35 + 72);
        assert_eq!(arch(true).param_count(), 24 + 35 + 72 + 24);
    }

    #[test]
    fn outputs_are_distributions_and_deterministic() {
        for dueling in [false, true] {
            let net = Network::init(arch(dueling), &mut rng::seeded(3)).unwrap();
            let p = net.forward(&[0.1, -0.4, 0.9]);
            assert_eq!(p.len(), 12);
            for row in p.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(p, net.forward(&[0.1, -0.4, 0.9]));
        }
    }

    #[test]
    fn backward_matches_finite_differences_for_linear_probe() {
        // loss = sum_k c_k * logit_k, so dlogits = c
        for dueling in [false, true] {
            let mut net = Network::init(arch(dueling), &mut rng::seeded(11)).unwrap();
            // nonzero biases keep pre-activations away from the ReLU kink
            for (i, p) in net.params.iter_mut().enumerate() {
                *p += 0.1 * (i as f64 * 1.3).cos();
            }
            let x = [0.3, 0.7, -0.2];
            let c: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
            let loss = |n: &Network| {
                n.forward_cache(&x)
                    .logits
                    .iter()
                    .zip(&c)
                    .map(|(l, c)| l * c)
                    .sum::<f64>()
            };
            let mut grad = vec![0.0; net.param_count()];
            net.backward(&net.forward_cache(&x), &c, &mut grad);
            let h = 1e-6;
            for i in 0..net.param_count() {
                let mut p = net.clone();
                p.params[i] += h;
                let mut m = net.clone();
                m.params[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "param {i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn from_params_checks_length() {
        assert!(Network::from_params(arch(false), vec![0.0; 5]).is_err());
    }
}
