//! Forward models `f: R^d -> R^n` with vector-Jacobian products.
//!
//! Three kinds:
//!
//! - `linear`: `f(x) = A x + c`, the analytic benchmark with a conjugate
//!   Gaussian posterior;
//! - `synthetic-curve`: a positive, smooth 7-parameter family over 178
//!   incidence angles, standing in for the fluorescence simulation;
//! - `surrogate-mlp`: a one-hidden-layer ReLU network trained on `(x, y)`
//!   pairs, with inputs standardized to the prior box.
//!
//! Plus surrogate training (L2 loss, Adam, held-out tracking) and noisy
//! measurement synthesis with component-proportional Gaussian noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{
    adam_step, init_mlp, mlp_backward_acc, mlp_forward, AdamState, InitScheme, MlpParams, NetGrads,
};

/// Number of incidence angles in the synthetic curve.
pub const CURVE_ANGLES: usize = 178;

/// Synthetic-curve parameter count.
pub const CURVE_DIM: usize = 7;

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// The fixed angle grid: 178 angles uniform on [0.8, 14.75] degrees.
pub fn default_angle_grid() -> Vec<f64> {
    (0..CURVE_ANGLES)
        .map(|i| 0.8 + (14.75 - 0.8) * i as f64 / (CURVE_ANGLES - 1) as f64)
        .collect()
}

/// A forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ForwardModel {
    /// `f(x) = A x + c`.
    Linear { matrix: Matrix, offset: Vec<f64> },
    /// Smooth positive curve over the angle grid; coordinates are rescaled
    /// from the prior box to [0.2, 1] so every term stays positive on the box.
    SyntheticCurve {
        box_lo: Vec<f64>,
        box_hi: Vec<f64>,
        angles: Vec<f64>,
    },
    /// Trained MLP with input standardization to the prior box.
    SurrogateMlp {
        net: MlpParams,
        box_lo: Vec<f64>,
        box_hi: Vec<f64>,
    },
}

impl ForwardModel {
    pub fn linear(matrix: Matrix, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != matrix.rows() {
            return Err(Error::Shape("offset length vs matrix rows".into()));
        }
        Ok(Self::Linear { matrix, offset })
    }

    pub fn synthetic_curve(box_lo: &[f64], box_hi: &[f64]) -> Result<Self> {
        if box_lo.len() != CURVE_DIM || box_hi.len() != CURVE_DIM {
            return Err(Error::Shape(format!("synthetic curve needs {CURVE_DIM} parameters")));
        }
        if box_lo.iter().zip(box_hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("box needs lo < hi".into()));
        }
        Ok(Self::SyntheticCurve {
            box_lo: box_lo.to_vec(),
            box_hi: box_hi.to_vec(),
            angles: default_angle_grid(),
        })
    }

    pub fn surrogate(net: MlpParams, box_lo: &[f64], box_hi: &[f64]) -> Result<Self> {
        if net.input_dim() != box_lo.len() || box_lo.len() != box_hi.len() {
            return Err(Error::Shape("standardization box vs net input dim".into()));
        }
        Ok(Self::SurrogateMlp {
            net,
            box_lo: box_lo.to_vec(),
            box_hi: box_hi.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Linear { matrix, .. } => matrix.cols(),
            Self::SyntheticCurve { box_lo, .. } => box_lo.len(),
            Self::SurrogateMlp { net, .. } => net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Linear { matrix, .. } => matrix.rows(),
            Self::SyntheticCurve { angles, .. } => angles.len(),
            Self::SurrogateMlp { net, .. } => net.output_dim(),
        }
    }

    /// Deterministic forward evaluation.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} vs model dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        match self {
            Self::Linear { matrix, offset } => {
                let mut y = matrix.matvec(x)?;
                for (v, c) in y.iter_mut().zip(offset) {
                    *v += c;
                }
                Ok(y)
            }
            Self::SyntheticCurve { box_lo, box_hi, angles } => {
                let xt = rescale_unit(x, box_lo, box_hi);
                Ok(angles
                    .iter()
                    .map(|&a| {
                        xt[0] * logistic(10.0 * (a - xt[1]))
                            + xt[2] * (-(a - xt[3]) * (a - xt[3]) / (2.0 * xt[4] * xt[4])).exp()
                            + xt[5]
                            + xt[6] * a / 15.0
                            + 0.05
                    })
                    .collect())
            }
            Self::SurrogateMlp { net, box_lo, box_hi } => {
                let z = standardize(x, box_lo, box_hi);
                Ok(mlp_forward(net, &z)?.0)
            }
        }
    }

    /// Vector-Jacobian product `(df/dx)^T u`, exact for every kind.
    pub fn vjp(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() || upstream.len() != self.output_dim() {
            return Err(Error::Shape("vjp input/upstream dims".into()));
        }
        match self {
            Self::Linear { matrix, .. } => matrix.t_matvec(upstream),
            Self::SyntheticCurve { box_lo, box_hi, angles } => {
                let xt = rescale_unit(x, box_lo, box_hi);
                let mut g = vec![0.0; CURVE_DIM];
                for (&a, &u) in angles.iter().zip(upstream) {
                    let s = logistic(10.0 * (a - xt[1]));
                    let dc = a - xt[3];
                    let gauss = (-dc * dc / (2.0 * xt[4] * xt[4])).exp();
                    g[0] += u * s;
                    g[1] += u * xt[0] * s * (1.0 - s) * (-10.0);
                    g[2] += u * gauss;
                    g[3] += u * xt[2] * gauss * dc / (xt[4] * xt[4]);
                    g[4] += u * xt[2] * gauss * dc * dc / (xt[4] * xt[4] * xt[4]);
                    g[5] += u;
                    g[6] += u * a / 15.0;
                }
                for (gi, (l, h)) in g.iter_mut().zip(box_lo.iter().zip(box_hi)) {
                    *gi *= 0.8 / (h - l);
                }
                Ok(g)
            }
            Self::SurrogateMlp { net, box_lo, box_hi } => {
                let z = standardize(x, box_lo, box_hi);
                let (_, tape) = mlp_forward(net, &z)?;
                let mut acc = NetGrads::zeros_like(net);
                let mut d = mlp_backward_acc(net, &tape, upstream, &mut acc)?;
                for (di, (l, h)) in d.iter_mut().zip(box_lo.iter().zip(box_hi)) {
                    *di *= 2.0 / (h - l);
                }
                Ok(d)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Affine rescale from the box to [0.2, 1] coordinate-wise.
fn rescale_unit(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| 0.2 + 0.8 * (v - l) / (h - l))
        .collect()
}

/// Affine map from the box to [-1, 1] coordinate-wise.
pub fn standardize(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| 2.0 * (v - l) / (h - l) - 1.0)
        .collect()
}

/// A noisy measurement: the data vector `y`, the likelihood weights `w`, and
/// (for synthetic studies) the generating truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub b_true: Option<f64>,
    pub x_true: Option<Vec<f64>>,
}

impl Measurement {
    pub fn new(y: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if y.len() != w.len() {
            return Err(Error::Shape("y and w lengths differ".into()));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("measurement y".into()));
        }
        if !w.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        Ok(Self {
            y,
            w,
            b_true: None,
            x_true: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

/// Synthesizes `y = f(x_true) * (1 + b z)` with iid standard normal `z`,
/// the measurement-weighted convention: `w` is set to the noisy `y` itself.
pub fn synthesize_measurement<R: Rng>(
    model: &ForwardModel,
    x_true: &[f64],
    b: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument("noise scale b must be >= 0".into()));
    }
    let y_true = model.eval(x_true)?;
    if b > 0.0 && y_true.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "relative noise needs strictly positive y_true".into(),
        ));
    }
    let y: Vec<f64> = y_true
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v * (1.0 + b * z)
        })
        .collect();
    let mut m = Measurement::new(y.clone(), y)?;
    m.b_true = Some(b);
    m.x_true = Some(x_true.to_vec());
    Ok(m)
}

/// Training pairs `(x, y)` for surrogate fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairs {
    pub x: Matrix,
    pub y: Matrix,
}

impl TrainingPairs {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Shape("x and y row counts differ".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// CSV with header `x1..xd,y1..yn`, one pair per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.x.cols())
            .map(|i| format!("x{i}"))
            .chain((1..=self.y.cols()).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            w.write_record(
                self.x
                    .row(i)
                    .iter()
                    .chain(self.y.row(i))
                    .map(|v| format!("{v:?}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let d = header.iter().take_while(|h| h.starts_with('x')).count();
        let n = header.len() - d;
        if d == 0 || n == 0 || !header.iter().skip(d).all(|h| h.starts_with('y')) {
            return Err(Error::Config("pairs CSV needs an x1..xd,y1..yn header".into()));
        }
        let mut x = Matrix::zeros(0, d);
        let mut y = Matrix::zeros(0, n);
        for record in r.records() {
            let record = record?;
            let row: Vec<f64> = record
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad float '{s}': {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != d + n {
                return Err(Error::Shape("short row in pairs CSV".into()));
            }
            x.push_row(&row[..d])?;
            y.push_row(&row[d..])?;
        }
        Self::new(x, y)
    }
}

/// Draws `count` inputs uniformly from the box and evaluates the model.
pub fn generate_pairs<R: Rng>(
    model: &ForwardModel,
    lo: &[f64],
    hi: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<TrainingPairs> {
    let d = model.input_dim();
    if lo.len() != d || hi.len() != d {
        return Err(Error::Shape("box dims vs model input dim".into()));
    }
    let mut x = Matrix::zeros(0, d);
    let mut y = Matrix::zeros(0, model.output_dim());
    for _ in 0..count {
        let xi: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| rng.random_range(l..h))
            .collect();
        y.push_row(&model.eval(&xi)?)?;
        x.push_row(&xi)?;
    }
    TrainingPairs::new(x, y)
}

/// Hyperparameters for surrogate training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateTrainConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of pairs held out for validation.
    pub holdout_frac: f64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            width: 256,
            epochs: 60,
            batch_size: 100,
            lr: 2e-3,
            holdout_frac: 0.1,
        }
    }
}

/// Training summary: errors are reported on the held-out split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub init_rmse: f64,
    pub final_rmse: f64,
    pub best_epoch: usize,
    /// sqrt(sum ||pred - y||^2 / sum ||y||^2) on the held-out split.
    pub holdout_rel_l2: f64,
    pub train_count: usize,
    pub holdout_count: usize,
}

fn holdout_errors(net: &MlpParams, pairs: &TrainingPairs, idx: &[usize]) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut ref_sq = 0.0;
    for &i in idx {
        let (pred, _) = mlp_forward(net, pairs.x.row(i))?;
        for (p, t) in pred.iter().zip(pairs.y.row(i)) {
            sq += (p - t) * (p - t);
            ref_sq += t * t;
        }
    }
    let n = (idx.len() * pairs.y.cols()) as f64;
    Ok(((sq / n).sqrt(), (sq / ref_sq).sqrt()))
}

/// Trains a one-hidden-layer ReLU surrogate of the forward map.
///
/// Inputs are standardized to the prior box before entering the net (the box
/// is stored with the returned model). 90/10 seeded train/holdout split;
/// the returned parameters are the ones with the best held-out RMSE seen, so
/// the final error never exceeds the error at initialization.
pub fn train_surrogate<R: Rng>(
    pairs: &TrainingPairs,
    box_lo: &[f64],
    box_hi: &[f64],
    cfg: &SurrogateTrainConfig,
    rng: &mut R,
) -> Result<(ForwardModel, SurrogateReport)> {
    let count = pairs.len();
    if count < 2 {
        return Err(Error::InvalidArgument("need at least 2 training pairs".into()));
    }
    let d = pairs.x.cols();
    let n = pairs.y.cols();
    if box_lo.len() != d || box_hi.len() != d {
        return Err(Error::Shape("box dims vs pair dims".into()));
    }
    let first = pairs.x.row(0);
    if (1..count).all(|i| pairs.x.row(i) == first) {
        return Err(Error::Degenerate("all training inputs identical".into()));
    }

    // Standardize inputs once.
    let mut z = Matrix::zeros(0, d);
    for i in 0..count {
        z.push_row(&standardize(pairs.x.row(i), box_lo, box_hi))?;
    }
    let std_pairs = TrainingPairs::new(z, pairs.y.clone())?;

    let mut indices: Vec<usize> = (0..count).collect();
    shuffle(&mut indices, rng);
    let n_holdout = ((count as f64 * cfg.holdout_frac).round() as usize).clamp(1, count - 1);
    let (holdout_idx, train_idx) = indices.split_at(n_holdout);
    let holdout_idx = holdout_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut net = init_mlp(&[d, cfg.width, n], InitScheme::HeUniform, rng)?;
    let (init_rmse, _) = holdout_errors(&net, &std_pairs, &holdout_idx)?;
    let mut best = net.clone();
    let mut best_rmse = init_rmse;
    let mut best_epoch = 0usize;

    let mut adam = AdamState::new(&net, cfg.lr)?;
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        shuffle(&mut train_idx, rng);
        for chunk in train_idx.chunks(batch) {
            let mut grads = NetGrads::zeros_like(&net);
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let (pred, tape) = mlp_forward(&net, std_pairs.x.row(i))?;
                let upstream: Vec<f64> = pred
                    .iter()
                    .zip(std_pairs.y.row(i))
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                mlp_backward_acc(&net, &tape, &upstream, &mut grads)?;
            }
            adam_step(&mut net, &grads, &mut adam)?;
        }
        let (rmse, _) = holdout_errors(&net, &std_pairs, &holdout_idx)?;
        if rmse < best_rmse {
            best_rmse = rmse;
            best = net.clone();
            best_epoch = epoch + 1;
        }
    }

    let (final_rmse, rel_l2) = holdout_errors(&best, &std_pairs, &holdout_idx)?;
    let report = SurrogateReport {
        init_rmse,
        final_rmse,
        best_epoch,
        holdout_rel_l2: rel_l2,
        train_count: train_idx.len(),
        holdout_count: holdout_idx.len(),
    };
    Ok((ForwardModel::surrogate(best, box_lo, box_hi)?, report))
}

/// Fisher-Yates shuffle driven by the given RNG.
fn shuffle<R: Rng>(idx: &mut [usize], rng: &mut R) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box(d: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; d], vec![1.0; d])
    }

    fn grating_box() -> (Vec<f64>, Vec<f64>) {
        (
            vec![85.0, 45.0, 76.0, 2.0, 0.0, 2.0, 0.1],
            vec![100.0, 55.0, 88.0, 4.0, 5.0, 10.0, 3.0],
        )
    }

    #[test]
    fn linear_identity() {
        let m = ForwardModel::linear(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        assert_eq!(m.eval(&x).unwrap(), x);
    }

    #[test]
    fn linear_vjp_is_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let m = ForwardModel::linear(a, vec![0.0; 3]).unwrap();
        let u = vec![1.0, 0.5, -1.0];
        assert_eq!(m.vjp(&[0.0, 0.0], &u).unwrap(), vec![1.0 + 1.5 - 5.0, 2.0 + 2.0 - 6.0]);
    }

    #[test]
    fn curve_positive_at_center() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let y = m.eval(&center).unwrap();
        assert_eq!(y.len(), CURVE_ANGLES);
        assert!(y.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn curve_positive_over_box() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x: Vec<f64> = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &h)| rng.random_range(l..h))
                .collect();
            let y = m.eval(&x).unwrap();
            assert!(y.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn curve_vjp_matches_finite_differences() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| rng.random_range(l..h))
            .collect();
        let u: Vec<f64> = (0..CURVE_ANGLES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = m.vjp(&x, &u).unwrap();
        for j in 0..CURVE_DIM {
            let h = 1e-5 * (hi[j] - lo[j]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = crate::linalg::dot(&m.eval(&xp).unwrap(), &u);
            let fm = crate::linalg::dot(&m.eval(&xm).unwrap(), &u);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-10);
            assert!(rel < 1e-5, "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn surrogate_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = init_mlp(&[3, 12, 5], InitScheme::HeUniform, &mut rng).unwrap();
        let (lo, hi) = (vec![-2.0, 0.0, 1.0], vec![2.0, 1.0, 4.0]);
        let m = ForwardModel::surrogate(net, &lo, &hi).unwrap();
        let x = vec![0.37, 0.61, 2.13];
        let u = vec![0.5, -1.0, 0.25, 0.8, -0.3];
        let g = m.vjp(&x, &u).unwrap();
        for j in 0..3 {
            let h = 1e-6 * (hi[j] - lo[j]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (crate::linalg::dot(&m.eval(&xp).unwrap(), &u)
                - crate::linalg::dot(&m.eval(&xm).unwrap(), &u))
                / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-10);
            assert!(rel < 1e-5, "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_vjp() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let g = m.vjp(&center, &vec![0.0; CURVE_ANGLES]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surrogate_matches_underlying_mlp_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = init_mlp(&[3, 16, 4], InitScheme::HeUniform, &mut rng).unwrap();
        let (lo, hi) = unit_box(3);
        let m = ForwardModel::surrogate(net.clone(), &lo, &hi).unwrap();
        let x = vec![0.2, -0.4, 0.9];
        let (direct, _) = mlp_forward(&net, &standardize(&x, &lo, &hi)).unwrap();
        assert_eq!(m.eval(&x).unwrap(), direct);
    }

    #[test]
    fn synthesize_noise_free_and_reproducible() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meas = synthesize_measurement(&m, &center, 0.0, &mut rng).unwrap();
        assert_eq!(meas.y, m.eval(&center).unwrap());
        assert_eq!(meas.w, meas.y);

        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = synthesize_measurement(&m, &center, 0.03, &mut r1).unwrap();
        let b = synthesize_measurement(&m, &center, 0.03, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthesized_relative_residuals_match_b() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let y_true = m.eval(&center).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = 0.03;
        let meas = synthesize_measurement(&m, &center, b, &mut rng).unwrap();
        let resid: Vec<f64> = meas
            .y
            .iter()
            .zip(&y_true)
            .map(|(y, t)| y / t - 1.0)
            .collect();
        let (_, std) = crate::stats::mean_std(&resid);
        assert!((std - b).abs() < 0.25 * b, "residual std {std}");
    }

    #[test]
    fn synthesize_rejects_nonpositive_truth() {
        let m = ForwardModel::linear(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_measurement(&m, &[1.0, -1.0], 0.1, &mut rng).is_err());
        assert!(synthesize_measurement(&m, &[1.0, 1.0], -0.5, &mut rng).is_err());
    }

    #[test]
    fn pairs_csv_round_trip() {
        let (lo, hi) = unit_box(2);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let m = ForwardModel::linear(a, vec![0.1, -0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = generate_pairs(&m, &lo, &hi, 5, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        pairs.write_csv(&path).unwrap();
        let back = TrainingPairs::read_csv(&path).unwrap();
        assert_eq!(pairs, back);
    }

    #[test]
    fn train_surrogate_fits_linear_map() {
        let (lo, hi) = unit_box(3);
        let a = Matrix::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.3, 0.8, -1.0]]).unwrap();
        let m = ForwardModel::linear(a, vec![0.5, 1.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs = generate_pairs(&m, &lo, &hi, 2000, &mut rng).unwrap();
        let cfg = SurrogateTrainConfig {
            width: 64,
            epochs: 40,
            batch_size: 50,
            lr: 3e-3,
            holdout_frac: 0.1,
        };
        let (_, report) = train_surrogate(&pairs, &lo, &hi, &cfg, &mut rng).unwrap();
        assert!(
            report.holdout_rel_l2 < 2e-2,
            "relative L2 {}",
            report.holdout_rel_l2
        );
        assert!(report.final_rmse <= report.init_rmse);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (lo, hi) = unit_box(2);
        let a = Matrix::identity(2);
        let m = ForwardModel::linear(a, vec![0.0; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs = generate_pairs(&m, &lo, &hi, 50, &mut rng).unwrap();
        let cfg = SurrogateTrainConfig {
            epochs: 0,
            width: 8,
            ..Default::default()
        };
        // Same rng state twice: the returned net must equal a fresh init.
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let (model, report) = train_surrogate(&pairs, &lo, &hi, &cfg, &mut rng_a).unwrap();
        assert_eq!(report.init_rmse, report.final_rmse);
        assert_eq!(report.best_epoch, 0);
        match model {
            ForwardModel::SurrogateMlp { net, .. } => {
                let mut rng_b = ChaCha8Rng::seed_from_u64(9);
                let mut idx: Vec<usize> = (0..pairs.len()).collect();
                shuffle(&mut idx, &mut rng_b);
                let fresh = init_mlp(&[2, 8, 2], InitScheme::HeUniform, &mut rng_b).unwrap();
                assert_eq!(net, fresh);
            }
            _ => panic!("expected surrogate"),
        }
    }

    #[test]
    fn train_surrogate_rejects_degenerate_data() {
        let (lo, hi) = unit_box(2);
        let x = Matrix::from_rows(&vec![vec![0.1, 0.1]; 10]).unwrap();
        let y = Matrix::from_rows(&vec![vec![1.0]; 10]).unwrap();
        let pairs = TrainingPairs::new(x, y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SurrogateTrainConfig::default();
        assert!(train_surrogate(&pairs, &lo, &hi, &cfg, &mut rng).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let (lo, hi) = grating_box();
        let m = ForwardModel::synthetic_curve(&lo, &hi).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"kind\":\"synthetic-curve\""));
        let back: ForwardModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = init_mlp(&[7, 8, 3], InitScheme::HeUniform, &mut rng).unwrap();
        let s = ForwardModel::surrogate(net, &lo, &hi).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"surrogate-mlp\""));
        assert!(text.contains("\"box_lo\""));
        let back: ForwardModel = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
