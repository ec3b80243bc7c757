//! Fully connected ReLU networks with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Dense {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialization scaled by `gain`, zero bias.
    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Dense {
        let bound = gain * (6.0 / inputs.max(1) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Multilayer perceptron: ReLU after every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations from a forward pass, input first.
#[derive(Clone, Debug)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`. The output layer is scaled by
    /// `output_gain` so that fresh policies start close to uniform.
    pub fn new(sizes: &[usize], output_gain: f64, rng: &mut impl Rng) -> Mlp {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { 2f64.sqrt() / 3f64.sqrt() * 1.0 };
                Dense::init(w[0], w[1], gain, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Mlp {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.activations.pop().unwrap())
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                what: "network input",
                expected: self.input_len(),
                actual: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward_into(activations.last().unwrap(), &mut out);
            if i != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grads: &mut Mlp) {
        let mut delta = grad_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU derivative of the layer below, evaluated on its output.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp::zeros(&self.sizes())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.params_mut().for_each(|p| *p *= factor);
    }

    pub fn norm_sq(&self) -> f64 {
        self.params().map(|p| p * p).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

/// Actor and critic as two separate networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
}

impl PolicyParams {
    pub fn new(obs_len: usize, hidden: &[usize], actions: usize, rng: &mut impl Rng) -> PolicyParams {
        let mut actor_sizes = vec![obs_len];
        actor_sizes.extend_from_slice(hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(actions);
        critic_sizes.push(1);
        PolicyParams {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            critic: Mlp::new(&critic_sizes, 1.0, rng),
        }
    }

    pub fn zeros(obs_len: usize, hidden: &[usize], actions: usize) -> PolicyParams {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(hidden);
        let mut critic = sizes.clone();
        sizes.push(actions);
        critic.push(1);
        PolicyParams {
            actor: Mlp::zeros(&sizes),
            critic: Mlp::zeros(&critic),
        }
    }

    pub fn obs_len(&self) -> usize {
        self.actor.input_len()
    }

    pub fn action_count(&self) -> usize {
        self.actor.output_len()
    }

    /// Action logits and state value.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let logits = self.actor.forward(obs)?;
        let value = self.critic.forward(obs)?[0];
        Ok((logits, value))
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }

    /// Order-sensitive fingerprint of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.actor.params().chain(self.critic.params()) {
            for byte in p.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
