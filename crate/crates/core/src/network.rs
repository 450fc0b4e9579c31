//! Fully-connected ReLU classifier with hand-written reverse-mode gradients.
//!
//! Layer `l` maps `fan_in -> fan_out` as `z_j = Σ_i x_i W[i][j] + b_j`, so each
//! weight matrix is stored row-major with `fan_in` rows. Hidden layers apply
//! ReLU; the final (logit) layer is linear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.len() < 2 {
            return Err(Error::Config(format!(
                "at least two hidden layers are required, got {}",
                self.hidden_dims.len()
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, logit layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { input_dim: 2, hidden_dims: vec![32, 32], num_classes: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: NetworkConfig,
    /// `weights[l][i][j]`: input unit `i` to output unit `j` of layer `l`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Post-ReLU activations, one entry per hidden layer.
    pub per_layer_activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Same layout as the parameters of a [`NetworkState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParameterGradients {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Self {
            weights: state
                .weights
                .iter()
                .map(|w| w.iter().map(|row| vec![0.0; row.len()]).collect())
                .collect(),
            biases: state.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParameterGradients, scale: f64) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            for (row, orow) in w.iter_mut().zip(ow) {
                for (x, y) in row.iter_mut().zip(orow) {
                    *x += scale * y;
                }
            }
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in b.iter_mut().zip(ob) {
                *x += scale * y;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().flatten().chain(self.biases.iter().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

pub fn init_network(cfg: &NetworkConfig) -> Result<NetworkState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (fan_in, fan_out) in cfg.layer_shapes() {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in)
            .map(|_| {
                (0..fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetworkState { config: cfg.clone(), weights, biases })
}

impl NetworkState {
    pub fn num_hidden(&self) -> usize {
        self.config.hidden_dims.len()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Checks that parameter shapes agree with the config and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        check_dim(shapes.len(), self.weights.len())?;
        check_dim(shapes.len(), self.biases.len())?;
        for (l, (fan_in, fan_out)) in shapes.into_iter().enumerate() {
            check_dim(fan_in, self.weights[l].len())?;
            for row in &self.weights[l] {
                check_dim(fan_out, row.len())?;
            }
            check_dim(fan_out, self.biases[l].len())?;
        }
        let finite = self.weights.iter().flatten().flatten().all(|x| x.is_finite())
            && self.biases.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        check_dim(self.config.input_dim, x.len())?;
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for l in 0..=last {
            let mut z = affine(&self.weights[l], &self.biases[l], &cur);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                acts.push(z.clone());
            }
            cur = z;
        }
        Ok(ForwardTrace { input: x.to_vec(), per_layer_activations: acts, logits: cur })
    }

    /// Reverse-mode gradients for one sample.
    ///
    /// `grad_hidden`, when nonempty, has one entry per hidden layer holding
    /// `∂L/∂h_l` contributed directly by the loss (an empty inner vector means
    /// no contribution at that layer).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grad_hidden: &[Vec<f64>],
    ) -> Result<ParameterGradients> {
        let mut grads = ParameterGradients::zeros_like(self);
        self.backward_into(trace, grad_logits, grad_hidden, &mut grads)?;
        Ok(grads)
    }

    /// Like [`NetworkState::backward`] but adds the sample's gradients into `acc`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grad_hidden: &[Vec<f64>],
        acc: &mut ParameterGradients,
    ) -> Result<()> {
        check_dim(self.config.num_classes, grad_logits.len())?;
        check_dim(self.num_hidden(), trace.per_layer_activations.len())?;
        check_dim(self.config.input_dim, trace.input.len())?;
        if !grad_hidden.is_empty() {
            check_dim(self.num_hidden(), grad_hidden.len())?;
            for (g, a) in grad_hidden.iter().zip(&trace.per_layer_activations) {
                if !g.is_empty() {
                    check_dim(a.len(), g.len())?;
                }
            }
        }

        // delta = ∂L/∂z_l for the current layer's pre-activation
        let mut delta = grad_logits.to_vec();
        for l in (0..self.num_layers()).rev() {
            let input = if l == 0 { &trace.input } else { &trace.per_layer_activations[l - 1] };
            for (i, xi) in input.iter().enumerate() {
                if *xi != 0.0 {
                    for (g, d) in acc.weights[l][i].iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
            }
            for (g, d) in acc.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            // ∂L/∂h_{l-1} = W_l δ + injected, then through ReLU
            let h = &trace.per_layer_activations[l - 1];
            let mut upstream: Vec<f64> = self.weights[l]
                .iter()
                .map(|row| row.iter().zip(&delta).map(|(w, d)| w * d).sum())
                .collect();
            if let Some(inj) = grad_hidden.get(l - 1) {
                for (u, g) in upstream.iter_mut().zip(inj) {
                    *u += g;
                }
            }
            for (u, a) in upstream.iter_mut().zip(h) {
                if *a <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = upstream;
        }
        Ok(())
    }

    /// `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &ParameterGradients, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Argument(format!("learning rate must be nonnegative, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::Training("non-finite gradient encountered".into()));
        }
        check_dim(self.weights.len(), grads.weights.len())?;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            check_dim(w.len(), g.len())?;
            for (row, grow) in w.iter_mut().zip(g) {
                check_dim(row.len(), grow.len())?;
                for (x, d) in row.iter_mut().zip(grow) {
                    *x -= lr * d;
                }
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            check_dim(b.len(), g.len())?;
            for (x, d) in b.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
        Ok(())
    }

    /// Mutable view of parameter `index` in the flat order used by
    /// [`ParameterGradients::iter`] (weights layer by layer, then biases).
    pub fn param_mut(&mut self, index: usize) -> Option<&mut f64> {
        let mut idx = index;
        for w in &mut self.weights {
            let n: usize = w.iter().map(Vec::len).sum();
            if idx < n {
                let cols = w[0].len();
                return Some(&mut w[idx / cols][idx % cols]);
            }
            idx -= n;
        }
        for b in &mut self.biases {
            if idx < b.len() {
                return Some(&mut b[idx]);
            }
            idx -= b.len();
        }
        None
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().flatten().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for (xi, row) in x.iter().zip(w) {
        if *xi == 0.0 {
            continue;
        }
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
    z
}
