//! Configuration-driven experiment pipeline.
//!
//! `run_experiment` wires the whole study together for each configured noise
//! level: synthesize a measurement, train the transport map and sample it,
//! run the ensemble sampler, compare the two posteriors, and write every
//! intermediate artifact (stamped with the config hash) into the output
//! directory.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub use config::{
    stage_seed, ExperimentConfig, ForwardSpec, InnConfig, McmcSettings, NoiseConvention, PriorSpec,
    SurrogateSpec,
};

use crate::bayes::{train_inn, write_trace_csv, NoiseModel, PriorBox};
use crate::error::{Error, Result};
use crate::flow::build_flow;
use crate::forward::{synthesize_measurement, ForwardModel, Measurement};
use crate::mcmc::{
    diagnostics, run_sampler, AugmentedPosteriorTarget, DiagnosticsReport, PosteriorTarget,
};
use crate::samples::SampleSet;
use crate::stats::{histogram, two_sample_ks};

/// Moments of one method's posterior sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMoments {
    pub method: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Wall-clock accounting of one experiment run, plus the effective-sample
/// extrapolation used for the speed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    pub inn_train_s: f64,
    pub inn_sample_s: f64,
    pub mcmc_run_s: f64,
    /// Smallest per-coordinate effective sample size of the MCMC run.
    pub mcmc_min_ess: f64,
    /// Extrapolated wall time to produce 2e4 effective MCMC samples.
    pub mcmc_s_per_20k_effective: f64,
    /// `mcmc_s_per_20k_effective / inn_sample_s` (the INN draw count is
    /// `sample_count`, 2e4 by default).
    pub inn_speedup: f64,
}

/// Numeric counterpart of the marginal-comparison figures: per-coordinate
/// moments for both methods, KS distances, and distances to the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub names: Vec<String>,
    pub a: MethodMoments,
    pub b: MethodMoments,
    /// Two-sample KS statistic per coordinate.
    pub ks: Vec<f64>,
    /// `(mean_a - mean_b) / pooled_std` per coordinate.
    pub mean_diff_pooled_std: Vec<f64>,
    /// `|mean - x_true| / std` per coordinate, when the truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_distance_a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_distance_b: Option<Vec<f64>>,
    /// Fraction of method-a samples inside the prior box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_box_frac_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtimes: Option<Runtimes>,
}

/// Per-coordinate empirical moments, exact two-sample KS statistics, and
/// pooled-std mean differences between two sample sets over the same
/// parameters.
pub fn compare(a: &SampleSet, b: &SampleSet) -> Result<ComparisonReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("cannot compare empty sample sets".into()));
    }
    if a.names() != b.names() {
        return Err(Error::Shape("sample sets name different parameters".into()));
    }
    let d = a.dim();
    let mut ks = Vec::with_capacity(d);
    let mut diff = Vec::with_capacity(d);
    let (mean_a, std_a) = a.column_moments();
    let (mean_b, std_b) = b.column_moments();
    for j in 0..d {
        ks.push(two_sample_ks(&a.column(j), &b.column(j))?);
        let pooled = (0.5 * (std_a[j] * std_a[j] + std_b[j] * std_b[j])).sqrt();
        diff.push(if pooled > 0.0 {
            (mean_a[j] - mean_b[j]) / pooled
        } else {
            0.0
        });
    }
    Ok(ComparisonReport {
        names: a.names().to_vec(),
        a: MethodMoments {
            method: a.meta.method.clone(),
            mean: mean_a,
            std: std_a,
        },
        b: MethodMoments {
            method: b.meta.method.clone(),
            mean: mean_b,
            std: std_b,
        },
        ks,
        mean_diff_pooled_std: diff,
        truth_distance_a: None,
        truth_distance_b: None,
        in_box_frac_a: None,
        runtimes: None,
    })
}

/// Histogram table backing the marginal plots: one row per (parameter, bin).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTable {
    pub names: Vec<String>,
    pub edges: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
}

/// Per-coordinate histograms of the draws over the prior-box ranges.
pub fn export_marginals(samples: &SampleSet, prior: &PriorBox, bins: usize) -> Result<MarginalTable> {
    let d = prior.dim();
    if samples.dim() < d {
        return Err(Error::Shape("sample dim vs prior dim".into()));
    }
    let mut edges = Vec::with_capacity(d);
    let mut counts = Vec::with_capacity(d);
    for j in 0..d {
        let (e, c) = histogram(&samples.column(j), prior.lo()[j], prior.hi()[j], bins)?;
        edges.push(e);
        counts.push(c);
    }
    Ok(MarginalTable {
        names: samples.names()[..d].to_vec(),
        edges,
        counts,
    })
}

impl MarginalTable {
    /// CSV rows `param,bin,lo,hi,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["param", "bin", "lo", "hi", "count"])?;
        for (name, (edges, counts)) in self
            .names
            .iter()
            .zip(self.edges.iter().zip(&self.counts))
        {
            for (k, &c) in counts.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    k.to_string(),
                    format!("{:?}", edges[k]),
                    format!("{:?}", edges[k + 1]),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// JSON envelope stamping an artifact with the config hash that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub value: T,
}

/// Writes `value` to `path` with the config hash attached.
pub fn write_stamped<T: Serialize>(path: &Path, config_hash: &str, value: &T) -> Result<()> {
    let stamped = Stamped {
        config_hash: config_hash.to_string(),
        value,
    };
    std::fs::write(path, serde_json::to_string_pretty(&stamped)?)?;
    Ok(())
}

/// Reads a stamped artifact, rejecting it when the hash does not match.
pub fn read_stamped<T: DeserializeOwned>(path: &Path, expected_hash: &str) -> Result<T> {
    let stamped: Stamped<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if stamped.config_hash != expected_hash {
        return Err(Error::HashMismatch {
            expected: expected_hash.to_string(),
            found: stamped.config_hash,
        });
    }
    Ok(stamped.value)
}

/// Exclusive ownership of an output directory for the duration of a run.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One completed noise level of an experiment.
#[derive(Debug)]
pub struct StudyRun {
    pub b: f64,
    pub dir: PathBuf,
    pub report: ComparisonReport,
    pub diagnostics: DiagnosticsReport,
}

/// Builds the measurement for one noise level under the configured
/// convention.
pub fn make_measurement(
    cfg: &ExperimentConfig,
    synthesis_model: &ForwardModel,
    b: f64,
) -> Result<Measurement> {
    let x_true = cfg.truth()?;
    let mut rng = crate::Rng::seed_from_u64(stage_seed(cfg.seed, "measurement"));
    match cfg.noise_convention {
        NoiseConvention::MeasurementWeighted => {
            synthesize_measurement(synthesis_model, &x_true, b, &mut rng)
        }
        NoiseConvention::Unit => {
            let y_true = synthesis_model.eval(&x_true)?;
            let y: Vec<f64> = y_true
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + b * z
                })
                .collect();
            let mut m = Measurement::new(y, vec![1.0; y_true.len()])?;
            m.b_true = Some(b);
            m.x_true = Some(x_true);
            Ok(m)
        }
    }
}

fn in_box_fraction(samples: &SampleSet, prior: &PriorBox) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let inside = (0..samples.len())
        .filter(|&i| prior.contains(&samples.row(i)[..prior.dim()]))
        .count();
    inside as f64 / samples.len() as f64
}

/// Trains the INN for one measurement and samples it, timing both phases.
/// Artifacts: flow JSON, loss trace CSV, samples CSV + sidecar.
pub fn inn_stage(
    cfg: &ExperimentConfig,
    forward: &ForwardModel,
    measurement: &Measurement,
    b: f64,
    dir: &Path,
    hash: &str,
) -> Result<(SampleSet, f64, f64)> {
    let prior = cfg.prior.build()?;
    let noise = NoiseModel::from_measurement(b, measurement)?;
    let mut build_rng = crate::Rng::seed_from_u64(stage_seed(cfg.seed, "flow-build"));
    let flow = build_flow(
        prior.dim(),
        cfg.inn.layers,
        cfg.inn.subnet_width,
        cfg.inn.subnet_depth,
        cfg.inn.clamp_value(),
        &mut build_rng,
    )?;
    let mut train_cfg = cfg.inn.train.clone();
    train_cfg.seed = stage_seed(cfg.seed, "inn-train");

    let t0 = Instant::now();
    let outcome = train_inn(flow, forward, measurement, &noise, &prior, &train_cfg, cfg.inn.boundary)
        .map_err(|e| e.in_stage("train-inn"))?;
    let train_s = t0.elapsed().as_secs_f64();
    if let Some(u) = outcome.diverged_at {
        return Err(Error::NonFinite(format!("INN training diverged at update {u}"))
            .in_stage("train-inn"));
    }
    let mut posterior = outcome.posterior;
    posterior.param_names = cfg.names();
    write_stamped(&dir.join("flow.json"), hash, &posterior)?;
    write_trace_csv(&outcome.trace, &dir.join("inn_trace.csv"))?;

    let t1 = Instant::now();
    let mut set = posterior.sample(cfg.sample_count, stage_seed(cfg.seed, "inn-sample"), hash)?;
    let sample_s = t1.elapsed().as_secs_f64();
    set.meta.b = Some(b);
    set.write_csv(&dir.join("inn_samples.csv"))?;
    set.write_sidecar(&dir.join("inn_samples.json"))?;
    Ok((set, train_s, sample_s))
}

/// Runs the ensemble sampler for one measurement, timing the run.
/// Artifacts: samples CSV + sidecar, diagnostics JSON.
pub fn mcmc_stage(
    cfg: &ExperimentConfig,
    forward: &ForwardModel,
    measurement: &Measurement,
    b: f64,
    dir: &Path,
    hash: &str,
) -> Result<(SampleSet, DiagnosticsReport, f64)> {
    let prior = cfg.prior.build()?;
    let mut mcmc_cfg = cfg.mcmc.config.clone();
    mcmc_cfg.seed = stage_seed(cfg.seed, "mcmc");
    let mut rng = crate::Rng::seed_from_u64(mcmc_cfg.seed);
    let mut names = cfg.names();

    let t0 = Instant::now();
    let (mut set, history) = if cfg.mcmc.augment_b {
        names.push("b".to_string());
        let target = AugmentedPosteriorTarget {
            forward,
            measurement,
            prior: &prior,
            b_range: cfg.mcmc.b_range,
        };
        let mut lo = prior.lo().to_vec();
        let mut hi = prior.hi().to_vec();
        lo.push(cfg.mcmc.b_range.0);
        hi.push(cfg.mcmc.b_range.1);
        run_sampler(&target, &lo, &hi, &mcmc_cfg, &mut rng, names, hash)?
    } else {
        let target = PosteriorTarget {
            forward,
            measurement,
            noise: NoiseModel::from_measurement(b, measurement)?,
            prior: &prior,
        };
        run_sampler(&target, prior.lo(), prior.hi(), &mcmc_cfg, &mut rng, names, hash)?
    };
    let run_s = t0.elapsed().as_secs_f64();
    set.meta.b = Some(b);

    let report = diagnostics(&history, set.meta.acceptance_rate)?;
    set.write_csv(&dir.join("mcmc_samples.csv"))?;
    set.write_sidecar(&dir.join("mcmc_samples.json"))?;
    write_stamped(&dir.join("mcmc_diagnostics.json"), hash, &report)?;
    Ok((set, report, run_s))
}

/// Restricts a sample set to its first `d` columns (drops the augmented `b`
/// column before comparison).
pub fn head_columns(set: &SampleSet, d: usize) -> Result<SampleSet> {
    let mut data = crate::linalg::Matrix::zeros(0, d);
    for i in 0..set.len() {
        data.push_row(&set.row(i)[..d])?;
    }
    SampleSet::new(set.names()[..d].to_vec(), data, set.meta.clone())
}

/// The full pipeline for every configured noise level.
///
/// Any stage failure aborts the run with the stage named; artifacts written
/// before the failure stay on disk for debugging. The output directory is
/// lockfile-owned for the duration.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    config_base: Option<&Path>,
) -> Result<Vec<StudyRun>> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let hash = cfg.hash();
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let prior = cfg.prior.build()?;
    let forward = cfg
        .forward
        .build(&prior, config_base)
        .map_err(|e| e.in_stage("forward-model"))?;
    let synthesis = match &cfg.synthesis {
        Some(spec) => spec
            .build(&prior, config_base)
            .map_err(|e| e.in_stage("synthesis-model"))?,
        None => forward.clone(),
    };

    let x_true = cfg.truth()?;
    let mut runs = Vec::with_capacity(cfg.b_values.len());
    for &b in &cfg.b_values {
        let dir = out.join(format!("b_{b}"));
        std::fs::create_dir_all(&dir)?;

        let measurement =
            make_measurement(cfg, &synthesis, b).map_err(|e| e.in_stage("synthesize"))?;
        write_stamped(&dir.join("measurement.json"), &hash, &measurement)?;

        let (inn_set, train_s, sample_s) =
            inn_stage(cfg, &forward, &measurement, b, &dir, &hash)?;
        let (mcmc_set, diag, mcmc_s) = mcmc_stage(cfg, &forward, &measurement, b, &dir, &hash)
            .map_err(|e| e.in_stage("mcmc"))?;

        let mcmc_params = if cfg.mcmc.augment_b {
            head_columns(&mcmc_set, prior.dim())?
        } else {
            mcmc_set.clone()
        };
        let mut report = compare(&inn_set, &mcmc_params).map_err(|e| e.in_stage("compare"))?;

        let dist = |moments: &MethodMoments| {
            moments
                .mean
                .iter()
                .zip(&moments.std)
                .zip(&x_true)
                .map(|((m, s), t)| if *s > 0.0 { (m - t).abs() / s } else { f64::INFINITY })
                .collect::<Vec<f64>>()
        };
        report.truth_distance_a = Some(dist(&report.a));
        report.truth_distance_b = Some(dist(&report.b));
        report.in_box_frac_a = Some(in_box_fraction(&inn_set, &prior));

        let min_ess = diag
            .ess
            .iter()
            .take(prior.dim())
            .copied()
            .fold(f64::INFINITY, f64::min);
        let per_20k = if min_ess.is_finite() && min_ess > 0.0 {
            mcmc_s * (20_000.0 / min_ess)
        } else {
            f64::INFINITY
        };
        report.runtimes = Some(Runtimes {
            inn_train_s: train_s,
            inn_sample_s: sample_s,
            mcmc_run_s: mcmc_s,
            mcmc_min_ess: min_ess,
            mcmc_s_per_20k_effective: per_20k,
            inn_speedup: per_20k / sample_s,
        });
        write_stamped(&dir.join("report.json"), &hash, &report)?;

        export_marginals(&inn_set, &prior, cfg.marginal_bins)?
            .write_csv(&dir.join("inn_marginals.csv"))?;
        export_marginals(&mcmc_params, &prior, cfg.marginal_bins)?
            .write_csv(&dir.join("mcmc_marginals.csv"))?;

        runs.push(StudyRun {
            b,
            dir,
            report,
            diagnostics: diag,
        });
    }
    Ok(runs)
}
