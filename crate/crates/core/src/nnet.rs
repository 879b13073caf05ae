//! Minimal feed-forward network engine.
//!
//! Dense ReLU networks with deterministic forward evaluation, exact
//! reverse-mode gradients with respect to both parameters and inputs, and
//! Adam updates. Coupling-layer subnetworks and surrogate forward models are
//! both built on this module.
//!
//! All arithmetic is `f64`; weights are row-major `(out_dim, in_dim)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// Activation scheme of a network.
///
/// `Relu` applies ReLU after every layer except the last, which stays
/// identity. `Linear` applies no nonlinearity anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// One dense layer: weights `(out_dim, in_dim)` row-major plus a bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of a feed-forward network.
///
/// `layer_dims` lists the input dimension first and the output dimension
/// last; layer `k` maps `layer_dims[k] -> layer_dims[k+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpParamsJson", into = "MlpParamsJson")]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpParamsJson {
    layer_dims: Vec<usize>,
    layers: Vec<LayerJson>,
    activation: Activation,
}

impl From<MlpParams> for MlpParamsJson {
    fn from(p: MlpParams) -> Self {
        let layers = p
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| LayerJson {
                weights: (0..p.layer_dims[k + 1])
                    .map(|o| l.weights[o * p.layer_dims[k]..(o + 1) * p.layer_dims[k]].to_vec())
                    .collect(),
                bias: l.bias.clone(),
            })
            .collect();
        MlpParamsJson {
            layer_dims: p.layer_dims,
            layers,
            activation: p.activation,
        }
    }
}

impl TryFrom<MlpParamsJson> for MlpParams {
    type Error = Error;

    fn try_from(j: MlpParamsJson) -> Result<Self> {
        let layers = j
            .layers
            .into_iter()
            .map(|l| DenseLayer {
                weights: l.weights.into_iter().flatten().collect(),
                bias: l.bias,
            })
            .collect();
        MlpParams::new(j.layer_dims, layers, j.activation)
    }
}

impl MlpParams {
    /// Builds a network from explicit layers, validating every invariant:
    /// the dims chain, finiteness, and at least one layer.
    pub fn new(
        layer_dims: Vec<usize>,
        layers: Vec<DenseLayer>,
        activation: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "network needs at least one layer (two dims)".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero layer dimension".into()));
        }
        if layers.len() != layer_dims.len() - 1 {
            return Err(Error::Shape(format!(
                "{} layers for {} dims",
                layers.len(),
                layer_dims.len()
            )));
        }
        for (k, l) in layers.iter().enumerate() {
            let (din, dout) = (layer_dims[k], layer_dims[k + 1]);
            if l.weights.len() != din * dout || l.bias.len() != dout {
                return Err(Error::Shape(format!(
                    "layer {k}: expected {dout}x{din} weights and {dout} biases"
                )));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(Self {
            layer_dims,
            layers,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable layer access; shapes must be preserved by the caller.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Applies `f` to every parameter entry, layer by layer in order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            for w in &mut l.weights {
                f(w);
            }
            for b in &mut l.bias {
                f(b);
            }
        }
    }

    fn relu_at(&self, layer: usize) -> bool {
        self.activation == Activation::Relu && layer + 1 < self.layers.len()
    }
}

/// Activation record from [`mlp_forward`]: `acts[0]` is the input, `acts[k+1]`
/// the post-activation output of layer `k`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.acts.len() == params.layer_dims.len()
            && self
                .acts
                .iter()
                .zip(&params.layer_dims)
                .all(|(a, &d)| a.len() == d)
    }
}

/// Per-layer parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<DenseLayer>,
}

impl NetGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(scale, &b.weights, &mut a.weights);
            axpy(scale, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| dot(&l.weights, &l.weights) + dot(&l.bias, &l.bias))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Result of [`mlp_backward`]: parameter gradients plus the gradient with
/// respect to the network input.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub params: NetGrads,
    pub d_input: Vec<f64>,
}

/// Evaluates the network, returning the output and the activation tape
/// needed by [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input length {} vs input dim {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(x.to_vec());
    for (k, layer) in params.layers.iter().enumerate() {
        let din = params.layer_dims[k];
        let dout = params.layer_dims[k + 1];
        let input = acts.last().unwrap();
        let mut out = Vec::with_capacity(dout);
        for o in 0..dout {
            let z = dot(&layer.weights[o * din..(o + 1) * din], input) + layer.bias[o];
            out.push(if params.relu_at(k) { z.max(0.0) } else { z });
        }
        acts.push(out);
    }
    let y = acts.last().unwrap().clone();
    Ok((y, Tape { acts }))
}

/// Exact gradients of `<upstream, mlp_forward(params, x)>` with respect to
/// every parameter and to `x`. The ReLU subgradient at zero is taken as 0.
pub fn mlp_backward(params: &MlpParams, tape: &Tape, upstream: &[f64]) -> Result<GradientBundle> {
    let mut grads = NetGrads::zeros_like(params);
    let d_input = mlp_backward_acc(params, tape, upstream, &mut grads)?;
    Ok(GradientBundle {
        params: grads,
        d_input,
    })
}

/// Same as [`mlp_backward`] but adds the parameter gradients into `acc`
/// instead of allocating. Training loops accumulate over a batch this way.
pub fn mlp_backward_acc(
    params: &MlpParams,
    tape: &Tape,
    upstream: &[f64],
    acc: &mut NetGrads,
) -> Result<Vec<f64>> {
    if !tape.matches(params) {
        return Err(Error::Shape("stale tape for these parameters".into()));
    }
    if upstream.len() != params.output_dim() {
        return Err(Error::Shape(format!(
            "upstream length {} vs output dim {}",
            upstream.len(),
            params.output_dim()
        )));
    }
    if acc.layers.len() != params.layers.len() {
        return Err(Error::Shape("gradient accumulator shape".into()));
    }
    let mut delta = upstream.to_vec();
    for k in (0..params.layers.len()).rev() {
        let din = params.layer_dims[k];
        let layer = &params.layers[k];
        if params.relu_at(k) {
            // acts[k+1] is the post-ReLU output; a zero output means the
            // pre-activation was <= 0, so the subgradient is 0.
            for (d, &a) in delta.iter_mut().zip(&tape.acts[k + 1]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &tape.acts[k];
        let g = &mut acc.layers[k];
        let mut d_input = vec![0.0; din];
        for (o, &dz) in delta.iter().enumerate() {
            let row = o * din;
            axpy(dz, input, &mut g.weights[row..row + din]);
            g.bias[o] += dz;
            axpy(dz, &layer.weights[row..row + din], &mut d_input);
        }
        delta = d_input;
    }
    Ok(delta)
}

/// Tape-free evaluation into a caller-provided buffer, reusing two scratch
/// vectors. The sampling hot path goes through this to avoid the per-call
/// allocations of [`mlp_forward`].
pub fn mlp_eval_into(
    params: &MlpParams,
    x: &[f64],
    scratch_a: &mut Vec<f64>,
    scratch_b: &mut Vec<f64>,
    out: &mut Vec<f64>,
) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape("input length vs input dim".into()));
    }
    scratch_a.clear();
    scratch_a.extend_from_slice(x);
    let last = params.layers.len() - 1;
    for (k, layer) in params.layers.iter().enumerate() {
        let din = params.layer_dims[k];
        let dout = params.layer_dims[k + 1];
        let target = if k == last { &mut *out } else { &mut *scratch_b };
        target.clear();
        for o in 0..dout {
            let z = dot(&layer.weights[o * din..(o + 1) * din], scratch_a) + layer.bias[o];
            target.push(if params.relu_at(k) { z.max(0.0) } else { z });
        }
        if k != last {
            std::mem::swap(scratch_a, scratch_b);
        }
    }
    Ok(())
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<DenseLayer>,
    second_moment: Vec<DenseLayer>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero-moment state with the given learning rate and the usual
    /// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8 defaults.
    pub fn new(params: &MlpParams, learning_rate: f64) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        let zeros = NetGrads::zeros_like(params).layers;
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update with bias correction.
///
/// Rejects non-finite gradients before touching either the parameters or the
/// optimizer state.
pub fn adam_step(params: &mut MlpParams, grads: &NetGrads, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len())
    {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient entries".into()));
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (k, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[k];
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        };
        for i in 0..layer.weights.len() {
            update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
        }
        for i in 0..layer.bias.len() {
            update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
        }
    }
    state.step_count = t;
    Ok(())
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on +-sqrt(6 / fan_in), biases zero.
    HeUniform,
    /// He-uniform everywhere, then the final layer's weights and biases are
    /// zeroed so the network maps everything to 0. Coupling blocks use this
    /// to start as the identity.
    ZeroLastLayer,
}

/// Fresh network with the given dims and initialization scheme.
pub fn init_mlp<R: Rng>(
    layer_dims: &[usize],
    scheme: InitScheme,
    rng: &mut R,
) -> Result<MlpParams> {
    if layer_dims.is_empty() {
        return Err(Error::InvalidArgument("empty layer dims".into()));
    }
    let n_layers = layer_dims.len().saturating_sub(1);
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (din, dout) = (layer_dims[k], layer_dims[k + 1]);
        let zero_this = scheme == InitScheme::ZeroLastLayer && k == n_layers - 1;
        let limit = (6.0 / din as f64).sqrt();
        let weights = (0..din * dout)
            .map(|_| {
                let v: f64 = rng.random_range(-limit..limit);
                if zero_this {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        layers.push(DenseLayer {
            weights,
            bias: vec![0.0; dout],
        });
    }
    MlpParams::new(layer_dims.to_vec(), layers, Activation::Relu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(dims: &[usize], seed: u64) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_mlp(dims, InitScheme::HeUniform, &mut rng).unwrap()
    }

    /// <upstream, forward(x)> as a plain scalar, for finite differences.
    fn scalar_out(params: &MlpParams, x: &[f64], upstream: &[f64]) -> f64 {
        let (y, _) = mlp_forward(params, x).unwrap();
        dot(&y, upstream)
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let layers = vec![
            DenseLayer { weights: vec![0.0; 6], bias: vec![0.0; 3] },
            DenseLayer { weights: vec![0.0; 3], bias: vec![0.0; 1] },
        ];
        let p = MlpParams::new(vec![2, 3, 1], layers, Activation::Relu).unwrap();
        let (y, _) = mlp_forward(&p, &[4.2, -1.0]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn identity_layer() {
        let layers = vec![DenseLayer {
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        }];
        let p = MlpParams::new(vec![2, 2], layers, Activation::Relu).unwrap();
        let (y, _) = mlp_forward(&p, &[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn forward_matches_unrolled_arithmetic() {
        // Independent oracle: the same arithmetic written out by hand.
        let p = net(&[2, 4, 1], 0);
        let x = [0.3, -0.7];
        let (y, _) = mlp_forward(&p, &x).unwrap();

        let l0 = &p.layers()[0];
        let mut hidden = [0.0; 4];
        for o in 0..4 {
            let mut z = l0.bias[o];
            z += l0.weights[o * 2] * x[0];
            z += l0.weights[o * 2 + 1] * x[1];
            hidden[o] = if z > 0.0 { z } else { 0.0 };
        }
        let l1 = &p.layers()[1];
        let mut out = l1.bias[0];
        for i in 0..4 {
            out += l1.weights[i] * hidden[i];
        }
        assert!((y[0] - out).abs() < 1e-12, "{} vs {}", y[0], out);
    }

    #[test]
    fn backward_zero_upstream() {
        let p = net(&[3, 5, 2], 1);
        let (_, tape) = mlp_forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let g = mlp_backward(&p, &tape, &[0.0, 0.0]).unwrap();
        assert!(g.d_input.iter().all(|&v| v == 0.0));
        assert!(g.params.squared_norm() == 0.0);
    }

    #[test]
    fn backward_identity_layer_closed_form() {
        let layers = vec![DenseLayer {
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        }];
        let p = MlpParams::new(vec![2, 2], layers, Activation::Relu).unwrap();
        let x = [0.5, -1.5];
        let u = [2.0, 3.0];
        let (_, tape) = mlp_forward(&p, &x).unwrap();
        let g = mlp_backward(&p, &tape, &u).unwrap();
        assert_eq!(g.d_input, vec![2.0, 3.0]);
        assert_eq!(g.params.layers[0].bias, vec![2.0, 3.0]);
        // dW = u x^T
        let expected = [u[0] * x[0], u[0] * x[1], u[1] * x[0], u[1] * x[1]];
        assert_eq!(g.params.layers[0].weights, expected);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = net(&[3, 8, 2], 7);
        // Nudged inputs keep pre-activations away from ReLU kinks.
        let x = [0.37, -0.61, 0.12];
        let u = [1.3, -0.4];
        let (_, tape) = mlp_forward(&p, &x).unwrap();
        let g = mlp_backward(&p, &tape, &u).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        // Parameter gradients.
        for k in 0..p.layers().len() {
            for idx in 0..p.layers()[k].weights.len() + p.layers()[k].bias.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let bump = |net: &mut MlpParams, delta: f64| {
                    let l = &mut net.layers[k];
                    if idx < l.weights.len() {
                        l.weights[idx] += delta;
                    } else {
                        l.bias[idx - l.weights.len()] += delta;
                    }
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (scalar_out(&plus, &x, &u) - scalar_out(&minus, &x, &u)) / (2.0 * h);
                let an = if idx < g.params.layers[k].weights.len() {
                    g.params.layers[k].weights[idx]
                } else {
                    g.params.layers[k].bias[idx - g.params.layers[k].weights.len()]
                };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        // Input gradients.
        for j in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (scalar_out(&p, &xp, &u) - scalar_out(&p, &xm, &u)) / (2.0 * h);
            let rel = (fd - g.d_input[j]).abs() / fd.abs().max(g.d_input[j].abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let p0 = net(&[2, 3, 1], 3);
        let mut p = p0.clone();
        let mut state = AdamState::new(&p, 0.01).unwrap();
        let g = NetGrads::zeros_like(&p);
        adam_step(&mut p, &g, &mut state).unwrap();
        assert_eq!(p, p0, "zero grads with zero moments must not move params");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_scalar() {
        let layers = vec![DenseLayer { weights: vec![1.0], bias: vec![0.0] }];
        let mut p = MlpParams::new(vec![1, 1], layers, Activation::Relu).unwrap();
        let lr = 0.1;
        let mut state = AdamState::new(&p, lr).unwrap();
        let g = 2.0;
        let mut grads = NetGrads::zeros_like(&p);
        grads.layers[0].weights[0] = g;
        adam_step(&mut p, &grads, &mut state).unwrap();
        let moved = p.layers()[0].weights[0] - 1.0;
        let expected = -lr * g / (g.abs() + state.epsilon * (1.0f64 - state.beta2).sqrt());
        assert!((moved - expected).abs() < 1e-8, "{moved} vs {expected}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = net(&[2, 4, 2], 11);
        let mut p = target.clone();
        p.for_each_param_mut(|v| *v = 0.0);
        let mut state = AdamState::new(&p, 0.05).unwrap();
        let loss = |p: &MlpParams, t: &MlpParams| {
            let mut s = 0.0;
            for (a, b) in p.layers().iter().zip(t.layers()) {
                for (x, y) in a.weights.iter().zip(&b.weights) {
                    s += (x - y) * (x - y);
                }
                for (x, y) in a.bias.iter().zip(&b.bias) {
                    s += (x - y) * (x - y);
                }
            }
            s
        };
        for _ in 0..200 {
            let mut g = NetGrads::zeros_like(&p);
            for (k, (a, b)) in p.layers().iter().zip(target.layers()).enumerate() {
                for i in 0..a.weights.len() {
                    g.layers[k].weights[i] = 2.0 * (a.weights[i] - b.weights[i]);
                }
                for i in 0..a.bias.len() {
                    g.layers[k].bias[i] = 2.0 * (a.bias[i] - b.bias[i]);
                }
            }
            adam_step(&mut p, &g, &mut state).unwrap();
        }
        assert!(loss(&p, &target) < 1e-3, "final loss {}", loss(&p, &target));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let p0 = net(&[2, 2], 5);
        let mut p = p0.clone();
        let mut state = AdamState::new(&p, 0.01).unwrap();
        let mut g = NetGrads::zeros_like(&p);
        g.layers[0].weights[1] = f64::NAN;
        assert!(adam_step(&mut p, &g, &mut state).is_err());
        assert_eq!(p, p0, "state must not mutate on rejection");
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn init_zero_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_mlp(&[3, 8, 2], InitScheme::ZeroLastLayer, &mut rng).unwrap();
        let last = p.layers().last().unwrap();
        assert!(last.weights.iter().all(|&w| w == 0.0));
        assert!(last.bias.iter().all(|&b| b == 0.0));
        // Hidden layer is still random.
        assert!(p.layers()[0].weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = net(&[4, 16, 4], 42);
        let b = net(&[4, 16, 4], 42);
        assert_eq!(a, b);
    }

    #[test]
    fn he_uniform_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = init_mlp(&[100, 100], InitScheme::HeUniform, &mut rng).unwrap();
        let w = &p.layers()[0].weights;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 6.0 / 100.0 / 3.0; // range^2 / 12 with range = 2*sqrt(6/fan_in)
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn shape_and_stale_tape_errors() {
        let p = net(&[2, 3, 1], 0);
        assert!(mlp_forward(&p, &[1.0]).is_err());
        let (_, tape) = mlp_forward(&p, &[1.0, 2.0]).unwrap();
        assert!(mlp_backward(&p, &tape, &[1.0, 2.0]).is_err()); // wrong upstream dim
        let other = net(&[2, 4, 1], 0);
        assert!(mlp_backward(&other, &tape, &[1.0]).is_err()); // stale tape
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_mlp(&[], InitScheme::HeUniform, &mut rng).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = net(&[3, 16, 16, 2], 21);
        let x = [0.2, -0.9, 1.4];
        let (y1, _) = mlp_forward(&p, &x).unwrap();
        let (y2, _) = mlp_forward(&p, &x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let p = net(&[3, 7, 2], 13);
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"activation\":\"relu\""));
        assert!(text.contains("\"layer_dims\":[3,7,2]"));
        let back: MlpParams = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let text = r#"{"layer_dims":[2,1],"layers":[{"weights":[[1.0]],"bias":[0.0]}],"activation":"relu"}"#;
        assert!(serde_json::from_str::<MlpParams>(text).is_err());
    }
}
