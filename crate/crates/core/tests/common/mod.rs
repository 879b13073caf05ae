//! Shared fixtures and oracles for the integration suites.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use invflow_core::bayes::PriorBox;
use invflow_core::forward::{
    generate_pairs, train_surrogate, ForwardModel, Measurement, SurrogateReport,
    SurrogateTrainConfig,
};
use invflow_core::linalg::{inverse, lu_det, Matrix};
use invflow_core::Rng;

/// Prints the per-criterion verdict line for the acceptance log.
#[allow(dead_code)]
pub fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

/// Finite-difference Jacobian of the flow at `xi` (central, step `h`).
#[allow(dead_code)]
pub fn fd_flow_jacobian(model: &invflow_core::FlowModel, xi: &[f64], h: f64) -> Matrix {
    let d = xi.len();
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        let mut xp = xi.to_vec();
        let mut xm = xi.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = invflow_core::flow::flow_forward(model, &xp).unwrap().output;
        let fm = invflow_core::flow::flow_forward(model, &xm).unwrap().output;
        for i in 0..d {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    jac
}

#[allow(dead_code)]
pub fn fd_jacobian_det(model: &invflow_core::FlowModel, xi: &[f64], h: f64) -> f64 {
    lu_det(&fd_flow_jacobian(model, xi, h)).unwrap()
}

/// The analytic linear-Gaussian benchmark: `y = A x + b z`, flat prior on a
/// box that carries >= 99.9% of the Gaussian posterior mass.
#[allow(dead_code)]
pub struct LinearBenchmark {
    pub forward: ForwardModel,
    pub prior: PriorBox,
    pub measurement: Measurement,
    pub b: f64,
    /// Conjugate posterior mean `(A^T A)^{-1} A^T y`.
    pub post_mean: Vec<f64>,
    /// Conjugate posterior standard deviations `b sqrt(diag((A^T A)^{-1}))`.
    pub post_std: Vec<f64>,
    /// Upper bound on the posterior mass outside the box (union bound over
    /// per-coordinate Gaussian marginals).
    pub mass_outside_bound: f64,
}

#[allow(dead_code)]
pub fn linear_benchmark(b: f64, noise_seed: u64) -> LinearBenchmark {
    let a = Matrix::from_rows(&[
        vec![1.0, 0.3, 0.0],
        vec![0.0, 1.0, 0.3],
        vec![0.3, 0.0, 1.0],
        vec![0.5, 0.5, 0.5],
    ])
    .unwrap();
    let d = 3;
    let x_true = vec![0.2, -0.3, 0.1];
    let prior = PriorBox::new(vec![-1.0; d], vec![1.0; d], 10.0).unwrap();
    let forward = ForwardModel::linear(a.clone(), vec![0.0; 4]).unwrap();

    let mut rng = Rng::seed_from_u64(noise_seed);
    let y: Vec<f64> = forward
        .eval(&x_true)
        .unwrap()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + b * z
        })
        .collect();
    let mut measurement = Measurement::new(y.clone(), vec![1.0; 4]).unwrap();
    measurement.b_true = Some(b);
    measurement.x_true = Some(x_true);

    // Conjugate closed form.
    let mut ata = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..4 {
                s += a.get(r, i) * a.get(r, j);
            }
            ata.set(i, j, s);
        }
    }
    let ata_inv = inverse(&ata).unwrap();
    let post_mean = ata_inv.matvec(&a.t_matvec(&y).unwrap()).unwrap();
    let post_std: Vec<f64> = (0..d).map(|i| b * ata_inv.get(i, i).sqrt()).collect();

    use statrs::distribution::{ContinuousCDF, Normal};
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut mass_outside = 0.0;
    for i in 0..d {
        let lo_z = (prior.lo()[i] - post_mean[i]) / post_std[i];
        let hi_z = (prior.hi()[i] - post_mean[i]) / post_std[i];
        mass_outside += std_normal.cdf(lo_z) + (1.0 - std_normal.cdf(hi_z));
    }

    LinearBenchmark {
        forward,
        prior,
        measurement,
        b,
        post_mean,
        post_std,
        mass_outside_bound: mass_outside,
    }
}

/// The synthetic-curve study truth: off-center point at 45% of each range.
#[allow(dead_code)]
pub fn curve_truth(prior: &PriorBox) -> Vec<f64> {
    prior
        .lo()
        .iter()
        .zip(prior.hi())
        .map(|(l, h)| l + 0.45 * (h - l))
        .collect()
}

/// Surrogate of the synthetic curve trained once on 1e4 pairs and shared by
/// the fidelity and speed criteria.
#[allow(dead_code)]
pub fn shared_surrogate() -> &'static (ForwardModel, SurrogateReport) {
    static SURROGATE: OnceLock<(ForwardModel, SurrogateReport)> = OnceLock::new();
    SURROGATE.get_or_init(|| {
        let prior = PriorBox::default_grating();
        let curve = ForwardModel::synthetic_curve(prior.lo(), prior.hi()).unwrap();
        let mut rng = Rng::seed_from_u64(1101);
        let pairs = generate_pairs(&curve, prior.lo(), prior.hi(), 10_000, &mut rng).unwrap();
        let cfg = SurrogateTrainConfig {
            width: 256,
            epochs: 60,
            batch_size: 100,
            lr: 2e-3,
            holdout_frac: 0.1,
        };
        train_surrogate(&pairs, prior.lo(), prior.hi(), &cfg, &mut rng).unwrap()
    })
}
