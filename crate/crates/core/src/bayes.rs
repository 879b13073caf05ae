//! The probabilistic core: prior box, heteroscedastic Gaussian likelihood,
//! boundary penalty, and the transport-map training loss and loop.
//!
//! The likelihood assumes `y = f(x) + eta` with `eta ~ N(0, b^2 diag(w^2))`.
//! The training loss per reference draw `xi` is
//!
//! ```text
//! (1 / 2b^2) ||(y - f(T(xi))) / w||^2 + L_bd(T(xi)) - log|det dT(xi)|
//! ```
//!
//! which equals the negative posterior log-density plus the log-det term up
//! to an additive constant; the uniform prior's undefined log outside its
//! support is replaced by the linear boundary penalty `L_bd`.
//!
//! Training runs in standardized coordinates: the flow acts on `z` with
//! `x = mid + half * z`, so the boundary check is against `[-1, 1]^d` and the
//! constant log-det of the affine de-standardization drops out of the
//! optimization. Sampling composes the de-standardization.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    flow_backward_acc, flow_forward, flow_map, FlowGradients, FlowModel, FlowScratch,
};
use crate::forward::{ForwardModel, Measurement};
use crate::linalg::Matrix;
use crate::nnet::{adam_step, AdamState};
use crate::samples::{default_names, SampleMeta, SampleSet};

/// Gradient-norm clip applied during INN training (global L2 over all
/// subnet parameters). Guards against early-training exponential blowups.
pub const GRAD_CLIP: f64 = 100.0;

/// Per-coordinate uniform prior support plus the boundary-penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    pub lambda_bd: f64,
}

impl PriorBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, lambda_bd: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Shape("box lo/hi lengths".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("box needs lo < hi per coordinate".into()));
        }
        if !(lambda_bd > 0.0) {
            return Err(Error::InvalidArgument("lambda_bd must be positive".into()));
        }
        Ok(Self { lo, hi, lambda_bd })
    }

    /// The seven-parameter grating box: h, cd, swa, t_t, t_b, t_g, t_s.
    pub fn default_grating() -> Self {
        Self::new(
            vec![85.0, 45.0, 76.0, 2.0, 0.0, 2.0, 0.1],
            vec![100.0, 55.0, 88.0, 4.0, 5.0, 10.0, 3.0],
            10.0,
        )
        .unwrap()
    }

    /// Parameter names matching [`PriorBox::default_grating`].
    pub fn grating_names() -> Vec<String> {
        ["h", "cd", "swa", "t_t", "t_b", "t_g", "t_s"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Closed-box membership (boundary points are in-support).
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    pub fn mid(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    /// `x = mid + half * z`.
    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| 0.5 * (l + h) + 0.5 * (h - l) * v)
            .collect()
    }

    /// Inverse of [`PriorBox::destandardize`].
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| (v - 0.5 * (l + h)) / (0.5 * (h - l)))
            .collect()
    }
}

/// Noise scale and positive weight vector of the likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    b: f64,
    w: Vec<f64>,
}

impl NoiseModel {
    pub fn new(b: f64, w: Vec<f64>) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::InvalidArgument("noise scale b must be > 0".into()));
        }
        if w.is_empty() || !w.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        Ok(Self { b, w })
    }

    /// The measurement-weighted convention: `w = y_meas`, treated as constant.
    pub fn from_measurement(b: f64, m: &Measurement) -> Result<Self> {
        Self::new(b, m.w.clone())
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// Log of the Gaussian sampling density:
/// `-1/2 ||(y - fy)/(b w)||^2 - (n/2) log 2pi - n log b - sum_i log w_i`.
pub fn log_likelihood(noise: &NoiseModel, forward_y: &[f64], y: &[f64]) -> Result<f64> {
    let n = noise.dim();
    if forward_y.len() != n || y.len() != n {
        return Err(Error::Shape("likelihood dims".into()));
    }
    let mut quad = 0.0;
    for i in 0..n {
        let r = (y[i] - forward_y[i]) / (noise.b * noise.w[i]);
        quad += r * r;
    }
    let log_w: f64 = noise.w.iter().map(|v| v.ln()).sum();
    Ok(-0.5 * quad
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        - n as f64 * noise.b.ln()
        - log_w)
}

/// How out-of-box excursions are penalized in the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BoundaryPenalty {
    /// Exact hinge: zero inside the closed box, linear outside.
    Relu,
    /// Smoothed hinge `softplus(beta t) / beta`.
    Softplus { beta: f64 },
}

impl Default for BoundaryPenalty {
    fn default() -> Self {
        Self::Relu
    }
}

fn hinge(t: f64, penalty: BoundaryPenalty) -> f64 {
    match penalty {
        BoundaryPenalty::Relu => t.max(0.0),
        BoundaryPenalty::Softplus { beta } => {
            // Stable softplus: ln(1 + e^(beta t)) / beta.
            let bt = beta * t;
            if bt > 30.0 {
                t
            } else {
                bt.exp().ln_1p() / beta
            }
        }
    }
}

fn hinge_deriv(t: f64, penalty: BoundaryPenalty) -> f64 {
    match penalty {
        BoundaryPenalty::Relu => {
            if t > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        BoundaryPenalty::Softplus { beta } => 1.0 / (1.0 + (-beta * t).exp()),
    }
}

/// Boundary loss `lambda_bd * sum_i (hinge(x_i - hi_i) + hinge(lo_i - x_i))`
/// with the exact ReLU hinge.
pub fn boundary_loss(prior: &PriorBox, x: &[f64]) -> Result<f64> {
    boundary_loss_with(prior, x, BoundaryPenalty::Relu)
}

/// Boundary loss with a selectable hinge.
pub fn boundary_loss_with(prior: &PriorBox, x: &[f64], penalty: BoundaryPenalty) -> Result<f64> {
    if x.len() != prior.dim() {
        return Err(Error::Shape("boundary loss dims".into()));
    }
    let mut acc = 0.0;
    for (&v, (&l, &h)) in x.iter().zip(prior.lo.iter().zip(&prior.hi)) {
        acc += hinge(v - h, penalty) + hinge(l - v, penalty);
    }
    Ok(prior.lambda_bd * acc)
}

fn boundary_grad_into(prior: &PriorBox, x: &[f64], penalty: BoundaryPenalty, out: &mut [f64]) {
    for (o, (&v, (&l, &h))) in out.iter_mut().zip(x.iter().zip(prior.lo.iter().zip(&prior.hi))) {
        *o = prior.lambda_bd * (hinge_deriv(v - h, penalty) - hinge_deriv(l - v, penalty));
    }
}

/// Log of the (unnormalized) uniform prior: 0 inside the closed box,
/// `-inf` outside. MCMC uses this; the INN loss uses [`boundary_loss`].
pub fn log_prior(prior: &PriorBox, x: &[f64]) -> f64 {
    if prior.contains(x) {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// INN training schedule. Defaults mirror the reference setup: 80 epochs of
/// 40 updates with batch size 200, learning rate decade drops every 20 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            updates_per_epoch: 40,
            batch_size: 200,
            lr: 1e-3,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.updates_per_epoch == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::InvalidArgument("training counts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidArgument("lr decay factor must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// One entry of the training loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub update: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes a loss trace as `update,loss,lr` CSV.
pub fn write_trace_csv(trace: &[TracePoint], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["update", "loss", "lr"])?;
    for p in trace {
        w.write_record([p.update.to_string(), format!("{:?}", p.loss), format!("{:?}", p.lr)])?;
    }
    w.flush()?;
    Ok(())
}

fn standardized_box(prior: &PriorBox) -> PriorBox {
    PriorBox::new(
        vec![-1.0; prior.dim()],
        vec![1.0; prior.dim()],
        prior.lambda_bd,
    )
    .unwrap()
}

/// Empirical KL training loss of a batch of reference draws, with gradients
/// for every subnet parameter.
///
/// Each row of `xi_batch` is one reference draw; the loss is the batch mean
/// of `data + boundary - logdet` evaluated in standardized coordinates (the
/// forward model sees de-standardized points). Constant likelihood
/// normalization terms are omitted.
pub fn inn_loss_batch(
    flow: &FlowModel,
    forward_model: &ForwardModel,
    measurement: &Measurement,
    noise: &NoiseModel,
    prior: &PriorBox,
    xi_batch: &Matrix,
    penalty: BoundaryPenalty,
) -> Result<(f64, FlowGradients)> {
    let (loss, grads, _) =
        inn_loss_batch_parts(flow, forward_model, measurement, noise, prior, xi_batch, penalty)?;
    Ok((loss, grads))
}

/// Mean per-term breakdown of the batch loss: (data, boundary, logdet).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub data: f64,
    pub boundary: f64,
    pub log_det: f64,
}

/// As [`inn_loss_batch`], also reporting the per-term means.
pub fn inn_loss_batch_parts(
    flow: &FlowModel,
    forward_model: &ForwardModel,
    measurement: &Measurement,
    noise: &NoiseModel,
    prior: &PriorBox,
    xi_batch: &Matrix,
    penalty: BoundaryPenalty,
) -> Result<(f64, FlowGradients, LossParts)> {
    let d = flow.dim();
    if xi_batch.cols() != d || prior.dim() != d || forward_model.input_dim() != d {
        return Err(Error::Shape("flow/prior/forward dims disagree".into()));
    }
    let n = forward_model.output_dim();
    if measurement.dim() != n || noise.dim() != n {
        return Err(Error::Shape("measurement/noise dims disagree".into()));
    }
    if xi_batch.rows() == 0 {
        return Err(Error::InvalidArgument("empty reference batch".into()));
    }
    let zbox = standardized_box(prior);
    let half = prior.half_width();
    let inv_2b2 = 1.0 / (2.0 * noise.b * noise.b);
    let inv_b2 = 1.0 / (noise.b * noise.b);

    let mut grads = FlowGradients::zeros_like(flow);
    let mut d_out = vec![0.0; d];
    let mut bd_grad = vec![0.0; d];
    let (mut data_sum, mut bd_sum, mut ld_sum) = (0.0, 0.0, 0.0);
    for r in 0..xi_batch.rows() {
        let xi = xi_batch.row(r);
        let eval = flow_forward(flow, xi)?;
        let z = &eval.output;
        let x = prior.destandardize(z);

        let fy = forward_model.eval(&x)?;
        let mut data = 0.0;
        for i in 0..n {
            let ri = (measurement.y[i] - fy[i]) / noise.w[i];
            data += ri * ri;
        }
        data *= inv_2b2;
        if !data.is_finite() {
            return Err(Error::NonFinite("data term of the INN loss".into()));
        }
        let bd = boundary_loss_with(&zbox, z, penalty)?;
        if !bd.is_finite() {
            return Err(Error::NonFinite("boundary term of the INN loss".into()));
        }
        data_sum += data;
        bd_sum += bd;
        ld_sum += eval.log_det;

        // d(data)/d(fy_i) = (fy_i - y_i) / (b^2 w_i^2), then through f and
        // the de-standardization x = mid + half * z.
        let upstream: Vec<f64> = (0..n)
            .map(|i| inv_b2 * (fy[i] - measurement.y[i]) / (noise.w[i] * noise.w[i]))
            .collect();
        let d_x = forward_model.vjp(&x, &upstream)?;
        boundary_grad_into(&zbox, z, penalty, &mut bd_grad);
        for j in 0..d {
            d_out[j] = d_x[j] * half[j] + bd_grad[j];
        }
        flow_backward_acc(flow, &eval, &d_out, -1.0, &mut grads)?;
    }
    let scale = 1.0 / xi_batch.rows() as f64;
    grads.scale(scale);
    let parts = LossParts {
        data: data_sum * scale,
        boundary: bd_sum * scale,
        log_det: ld_sum * scale,
    };
    let loss = parts.data + parts.boundary - parts.log_det;
    if !loss.is_finite() {
        return Err(Error::NonFinite("INN batch loss".into()));
    }
    Ok((loss, grads, parts))
}

/// A trained transport map: the flow in standardized coordinates plus the
/// prior box whose affine map takes flow outputs to parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnPosterior {
    pub flow: FlowModel,
    pub prior: PriorBox,
    pub param_names: Vec<String>,
}

impl InnPosterior {
    pub fn new(flow: FlowModel, prior: PriorBox, param_names: Option<Vec<String>>) -> Result<Self> {
        if flow.dim() != prior.dim() {
            return Err(Error::Shape("flow vs prior dims".into()));
        }
        let names = param_names.unwrap_or_else(|| default_names(prior.dim()));
        if names.len() != prior.dim() {
            return Err(Error::Shape("name count vs dims".into()));
        }
        Ok(Self {
            flow,
            prior,
            param_names: names,
        })
    }

    /// Maps one reference draw to parameter space.
    pub fn map_reference(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let eval = flow_forward(&self.flow, xi)?;
        Ok(self.prior.destandardize(&eval.output))
    }

    /// Draws `count` posterior samples: standard normals through the flow and
    /// the de-standardization.
    pub fn sample(&self, count: usize, seed: u64, config_hash: &str) -> Result<SampleSet> {
        let d = self.prior.dim();
        let mut rng = crate::Rng::seed_from_u64(seed);
        let mut data = Matrix::zeros(0, d);
        let mut scratch = FlowScratch::default();
        let mut xi = vec![0.0; d];
        let mut z = Vec::with_capacity(d);
        let half = self.prior.half_width();
        let mid = self.prior.mid();
        let mut x = vec![0.0; d];
        for _ in 0..count {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            flow_map(&self.flow, &xi, &mut scratch, &mut z)?;
            for j in 0..d {
                x[j] = mid[j] + half[j] * z[j];
            }
            data.push_row(&x)?;
        }
        let meta = SampleMeta::new("inn", seed, config_hash, None, count);
        SampleSet::new(self.param_names.clone(), data, meta)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Outcome of [`train_inn`]: the trained map, the per-update loss trace, and
/// the update index at which training halted on a non-finite loss (if any;
/// the returned flow is then the last finite state).
#[derive(Debug)]
pub struct TrainOutcome {
    pub posterior: InnPosterior,
    pub trace: Vec<TracePoint>,
    pub diverged_at: Option<usize>,
}

/// Trains the flow on the empirical KL loss with fresh standard-normal
/// reference batches, Adam, stepwise learning-rate decay, and gradient-norm
/// clipping at [`GRAD_CLIP`].
pub fn train_inn(
    mut flow: FlowModel,
    forward_model: &ForwardModel,
    measurement: &Measurement,
    noise: &NoiseModel,
    prior: &PriorBox,
    cfg: &TrainConfig,
    penalty: BoundaryPenalty,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = flow.dim();
    let mut rng = crate::Rng::seed_from_u64(cfg.seed);
    let mut adam: Vec<Vec<AdamState>> = flow
        .blocks()
        .iter()
        .map(|b| {
            b.subnets()
                .iter()
                .map(|net| AdamState::new(net, cfg.lr))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace = Vec::with_capacity(cfg.epochs * cfg.updates_per_epoch);
    let mut diverged_at = None;
    'training: for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32);
        for states in adam.iter_mut() {
            for s in states.iter_mut() {
                s.learning_rate = lr;
            }
        }
        for update in 0..cfg.updates_per_epoch {
            let global_update = epoch * cfg.updates_per_epoch + update;
            let mut batch = Matrix::zeros(0, d);
            let mut row = vec![0.0; d];
            for _ in 0..cfg.batch_size {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                batch.push_row(&row)?;
            }
            let (loss, mut grads) = match inn_loss_batch(
                &flow,
                forward_model,
                measurement,
                noise,
                prior,
                &batch,
                penalty,
            ) {
                Ok(ok) => ok,
                Err(Error::NonFinite(_)) => {
                    diverged_at = Some(global_update);
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            let norm = grads.param_norm();
            if !norm.is_finite() {
                diverged_at = Some(global_update);
                break 'training;
            }
            if norm > GRAD_CLIP {
                grads.scale(GRAD_CLIP / norm);
            }
            for (l, block) in flow.blocks_mut().iter_mut().enumerate() {
                let bg = &grads.blocks[l];
                let nets = block.subnets_mut();
                for (i, (net, g)) in nets
                    .into_iter()
                    .zip([&bg.s2, &bg.t2, &bg.s1, &bg.t1])
                    .enumerate()
                {
                    adam_step(net, g, &mut adam[l][i])?;
                }
            }
            trace.push(TracePoint {
                update: global_update,
                loss,
                lr,
            });
        }
    }
    let posterior = InnPosterior::new(flow, prior.clone(), None)?;
    Ok(TrainOutcome {
        posterior,
        trace,
        diverged_at,
    })
}
