//! Affine-invariant ensemble sampler (stretch move) with convergence
//! diagnostics.
//!
//! The ensemble is updated half by half: each walker in one half proposes
//! `Y = X_j + z (X_k - X_j)` against a walker `X_j` drawn from the other,
//! fixed half, with `z` drawn from the density proportional to `1/sqrt(z)` on
//! `[1/a, a]`, accepted with probability `min(1, z^(D-1) exp(logp(Y) -
//! logp(X_k)))`. Updates are serial in walker order, so a fixed seed fixes
//! the entire trajectory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{log_likelihood, log_prior, NoiseModel, PriorBox};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, Measurement};
use crate::linalg::Matrix;
use crate::samples::{SampleMeta, SampleSet};
use crate::stats::mean_std;

/// A log-density over `R^D`, `-inf` outside its support.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Posterior over the forward-model parameters with fixed noise scale.
pub struct PosteriorTarget<'a> {
    pub forward: &'a ForwardModel,
    pub measurement: &'a Measurement,
    pub noise: NoiseModel,
    pub prior: &'a PriorBox,
}

impl LogDensity for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let lp = log_prior(self.prior, x);
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let fy = match self.forward.eval(x) {
            Ok(fy) => fy,
            Err(_) => return f64::NEG_INFINITY,
        };
        match log_likelihood(&self.noise, &fy, &self.measurement.y) {
            Ok(ll) => ll + lp,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Joint log-density over `(x, b)`: the likelihood with `b` read from the
/// last coordinate, a uniform prior on `x` over the box and on `b` over
/// `b_range` (constants dropped consistently). The `-n log b` normalization
/// of the likelihood is retained; it is no longer constant.
pub fn augmented_log_density(
    x_b: &[f64],
    forward: &ForwardModel,
    measurement: &Measurement,
    prior: &PriorBox,
    b_range: (f64, f64),
) -> Result<f64> {
    if x_b.len() != prior.dim() + 1 {
        return Err(Error::Shape("augmented point needs d+1 coordinates".into()));
    }
    let (x, b_tail) = x_b.split_at(prior.dim());
    let b = b_tail[0];
    if b < b_range.0 || b > b_range.1 {
        return Ok(f64::NEG_INFINITY);
    }
    if log_prior(prior, x) == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let fy = forward.eval(x)?;
    let noise = NoiseModel::new(b, measurement.w.clone())?;
    log_likelihood(&noise, &fy, &measurement.y)
}

/// Posterior augmented with the noise scale as an extra coordinate.
pub struct AugmentedPosteriorTarget<'a> {
    pub forward: &'a ForwardModel,
    pub measurement: &'a Measurement,
    pub prior: &'a PriorBox,
    pub b_range: (f64, f64),
}

impl LogDensity for AugmentedPosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.prior.dim() + 1
    }

    fn log_density(&self, x_b: &[f64]) -> f64 {
        augmented_log_density(x_b, self.forward, self.measurement, self.prior, self.b_range)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Walker ensemble state.
#[derive(Debug, Clone)]
pub struct Ensemble {
    walkers: Matrix,
    log_probs: Vec<f64>,
    step_count: usize,
    accepted: u64,
    proposed: u64,
}

impl Ensemble {
    /// Initializes `k` walkers uniformly inside the given box, evaluating
    /// their log-probabilities. Rejects ensembles that violate the stretch
    /// move's preconditions or start without a finite log-probability.
    pub fn init_uniform<T: LogDensity, R: Rng>(
        target: &T,
        k: usize,
        lo: &[f64],
        hi: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        let d = target.dim();
        if lo.len() != d || hi.len() != d {
            return Err(Error::Shape("init box dims vs target dim".into()));
        }
        if k % 2 != 0 || k < 2 * d + 2 {
            return Err(Error::InvalidArgument(format!(
                "need an even walker count >= 2D+2 = {}, got {k}",
                2 * d + 2
            )));
        }
        let mut walkers = Matrix::zeros(0, d);
        let mut log_probs = Vec::with_capacity(k);
        for _ in 0..k {
            let x: Vec<f64> = lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| rng.random_range(l..h))
                .collect();
            let lp = target.log_density(&x);
            if !lp.is_finite() {
                return Err(Error::Degenerate(
                    "walker initialized without finite log-probability".into(),
                ));
            }
            walkers.push_row(&x)?;
            log_probs.push(lp);
        }
        Ok(Self {
            walkers,
            log_probs,
            step_count: 0,
            accepted: 0,
            proposed: 0,
        })
    }

    pub fn walkers(&self) -> &Matrix {
        &self.walkers
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Draws `z` with density proportional to `1/sqrt(z)` on `[1/a, a]`.
pub fn sample_stretch_z<R: Rng>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let s = (a - 1.0) * u + 1.0;
    s * s / a
}

/// Log acceptance ratio of the stretch move.
pub fn stretch_log_accept(z: f64, dim: usize, logp_new: f64, logp_old: f64) -> f64 {
    (dim as f64 - 1.0) * z.ln() + logp_new - logp_old
}

/// One full stretch-move sweep (both half-ensembles).
pub fn stretch_move<T: LogDensity, R: Rng>(
    ensemble: &mut Ensemble,
    target: &T,
    a: f64,
    rng: &mut R,
) -> Result<()> {
    if !(a > 1.0) {
        return Err(Error::InvalidArgument("stretch parameter a must be > 1".into()));
    }
    let k = ensemble.walkers.rows();
    let d = ensemble.walkers.cols();
    let first = ensemble.walkers.row(0).to_vec();
    if (1..k).all(|i| ensemble.walkers.row(i) == first.as_slice()) {
        return Err(Error::Degenerate("all walkers identical".into()));
    }
    let half = k / 2;
    let mut proposal = vec![0.0; d];
    for (lo, hi, other_lo) in [(0, half, half), (half, k, 0)] {
        for idx in lo..hi {
            let j = other_lo + rng.random_range(0..half);
            let z = sample_stretch_z(a, rng);
            {
                let xk = ensemble.walkers.row(idx);
                let xj = ensemble.walkers.row(j);
                for t in 0..d {
                    proposal[t] = xj[t] + z * (xk[t] - xj[t]);
                }
            }
            let lp_new = target.log_density(&proposal);
            let log_accept = stretch_log_accept(z, d, lp_new, ensemble.log_probs[idx]);
            let u: f64 = rng.random();
            ensemble.proposed += 1;
            if u.ln() < log_accept {
                ensemble.walkers.row_mut(idx).copy_from_slice(&proposal);
                ensemble.log_probs[idx] = lp_new;
                ensemble.accepted += 1;
            }
        }
    }
    ensemble.step_count += 1;
    Ok(())
}

/// Sampler schedule. `burn_in` defaults to 20% of the steps when `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub walkers: usize,
    pub steps: usize,
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub stretch_a: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            walkers: 32,
            steps: 10_000,
            burn_in: None,
            thin: 1,
            stretch_a: 2.0,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn effective_burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.steps / 5)
    }
}

/// Post-burn-in ensemble states, kept for diagnostics: `steps` recorded
/// sweeps of `walkers` points in `dim` coordinates.
#[derive(Debug, Clone)]
pub struct ChainHistory {
    steps: usize,
    walkers: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ChainHistory {
    pub fn new(walkers: usize, dim: usize) -> Self {
        Self {
            steps: 0,
            walkers,
            dim,
            data: Vec::new(),
        }
    }

    /// Builds a single-walker history from one plain chain (diagnostics on
    /// arbitrary series).
    pub fn from_single_chain(chain: &[f64]) -> Self {
        Self {
            steps: chain.len(),
            walkers: 1,
            dim: 1,
            data: chain.to_vec(),
        }
    }

    pub fn record(&mut self, walkers: &Matrix) {
        debug_assert_eq!(walkers.rows(), self.walkers);
        debug_assert_eq!(walkers.cols(), self.dim);
        self.data.extend_from_slice(walkers.data());
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn walkers(&self) -> usize {
        self.walkers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, step: usize, walker: usize, coord: usize) -> f64 {
        self.data[(step * self.walkers + walker) * self.dim + coord]
    }

    /// All kept values of one coordinate, flattened in step-major order.
    pub fn flat_coordinate(&self, coord: usize) -> Vec<f64> {
        (0..self.steps * self.walkers)
            .map(|i| self.data[i * self.dim + coord])
            .collect()
    }
}

/// Runs the sampler: init uniform in the box, `steps` sweeps, discard
/// `burn_in`, keep every `thin`-th ensemble state, flatten.
pub fn run_sampler<T: LogDensity, R: Rng>(
    target: &T,
    init_lo: &[f64],
    init_hi: &[f64],
    cfg: &McmcConfig,
    rng: &mut R,
    names: Vec<String>,
    config_hash: &str,
) -> Result<(SampleSet, ChainHistory)> {
    if cfg.steps < cfg.effective_burn_in() {
        return Err(Error::InvalidArgument("steps < burn_in".into()));
    }
    if cfg.thin == 0 {
        return Err(Error::InvalidArgument("thin must be >= 1".into()));
    }
    let mut ensemble = Ensemble::init_uniform(target, cfg.walkers, init_lo, init_hi, rng)?;
    let burn = cfg.effective_burn_in();
    let d = target.dim();
    let mut history = ChainHistory::new(cfg.walkers, d);
    let mut flat = Matrix::zeros(0, d);
    for step in 0..cfg.steps {
        stretch_move(&mut ensemble, target, cfg.stretch_a, rng)?;
        if step >= burn && (step - burn) % cfg.thin == 0 {
            history.record(&ensemble.walkers);
            for k in 0..cfg.walkers {
                flat.push_row(ensemble.walkers.row(k))?;
            }
        }
    }
    let mut meta = SampleMeta::new("mcmc", cfg.seed, config_hash, None, flat.rows());
    meta.acceptance_rate = Some(ensemble.acceptance_rate());
    meta.walkers = Some(cfg.walkers);
    meta.stretch_a = Some(cfg.stretch_a);
    let set = SampleSet::new(names, flat, meta)?;
    Ok((set, history))
}

/// Convergence diagnostics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub acceptance_rate: Option<f64>,
    /// Integrated autocorrelation time per coordinate (Sokal windowing).
    pub iact: Vec<f64>,
    /// Effective sample size per coordinate.
    pub ess: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Integrated autocorrelation time of one coordinate with Sokal's adaptive
/// window: the smallest lag `M` with `M >= c * tau(M)`, `c = 5`.
///
/// The autocovariance is averaged across walkers around the global mean.
/// Returns `(tau, window)`, or `None` for a constant chain.
fn sokal_iact(history: &ChainHistory, coord: usize) -> Option<(f64, usize)> {
    let t_len = history.steps;
    let w = history.walkers;
    if t_len < 2 {
        return None;
    }
    let mut mean = 0.0;
    for t in 0..t_len {
        for k in 0..w {
            mean += history.value(t, k, coord);
        }
    }
    mean /= (t_len * w) as f64;

    let acov = |lag: usize| {
        let mut acc = 0.0;
        for k in 0..w {
            for t in 0..t_len - lag {
                acc += (history.value(t, k, coord) - mean)
                    * (history.value(t + lag, k, coord) - mean);
            }
        }
        acc / ((t_len - lag) * w) as f64
    };
    let c0 = acov(0);
    if c0 <= 0.0 {
        return None;
    }
    let c = 5.0;
    let mut tau = 1.0;
    for lag in 1..t_len {
        tau += 2.0 * acov(lag) / c0;
        if (lag as f64) >= c * tau.max(1e-12) {
            return Some((tau.max(1e-12), lag));
        }
    }
    Some((tau.max(1e-12), t_len - 1))
}

/// Acceptance rate, per-coordinate IACT/ESS, and per-coordinate moments of
/// the kept chain.
pub fn diagnostics(history: &ChainHistory, acceptance_rate: Option<f64>) -> Result<DiagnosticsReport> {
    if history.steps == 0 {
        return Err(Error::InvalidArgument("empty chain".into()));
    }
    let total = (history.steps * history.walkers) as f64;
    let mut report = DiagnosticsReport {
        acceptance_rate,
        iact: Vec::with_capacity(history.dim),
        ess: Vec::with_capacity(history.dim),
        mean: Vec::with_capacity(history.dim),
        std: Vec::with_capacity(history.dim),
        warnings: Vec::new(),
    };
    for j in 0..history.dim {
        let flat = history.flat_coordinate(j);
        let (m, s) = mean_std(&flat);
        report.mean.push(m);
        report.std.push(s);
        match sokal_iact(history, j) {
            Some((tau, window)) => {
                report.iact.push(tau);
                report.ess.push(total / tau);
                if history.steps < 10 * window {
                    report.warnings.push(format!(
                        "coordinate {j}: chain length {} below 10x the autocorrelation window {window}",
                        history.steps
                    ));
                }
            }
            None => {
                report.iact.push(f64::NAN);
                report.ess.push(f64::NAN);
                report.warnings.push(format!("coordinate {j}: degenerate (constant) chain"));
            }
        }
    }
    Ok(report)
}
