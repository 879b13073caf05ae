//! `invflow`: config-driven posterior sampling experiments.
//!
//! Subcommands mirror the pipeline stages: synthesize surrogate training
//! data, train the surrogate, run either sampler, compare their posteriors,
//! or run the whole experiment end to end. Every subcommand takes the same
//! `--config` / `--out` pair; `--seed` overrides the config seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use invflow_core::forward::{generate_pairs, train_surrogate, TrainingPairs};
use invflow_core::harness::{
    self, compare, head_columns, make_measurement, stage_seed, write_stamped, DirLock,
    ExperimentConfig,
};
use invflow_core::samples::SampleSet;
use invflow_core::Result;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "INVFLOW_OUT";

#[derive(Parser)]
#[command(name = "invflow", version, about = "Bayesian inversion: transport-map and ensemble-MCMC posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $INVFLOW_OUT or ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (x, y) training pairs from the synthesis model.
    SynthData(Common),
    /// Train a surrogate MLP on out/pairs.csv.
    TrainSurrogate(Common),
    /// Train the transport map and draw posterior samples, per noise level.
    SampleInn(Common),
    /// Run the ensemble sampler, per noise level.
    SampleMcmc(Common),
    /// Compare INN and MCMC samples already present in the output directory.
    Compare(Common),
    /// Full pipeline: synthesize, train, sample both ways, compare, report.
    RunExperiment(Common),
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"))
        })
    }

    fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn config_base(&self) -> Option<PathBuf> {
        self.config.parent().map(Path::to_path_buf)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthData(c) => synth_data(c),
        Command::TrainSurrogate(c) => train_surrogate_cmd(c),
        Command::SampleInn(c) => sample_inn(c),
        Command::SampleMcmc(c) => sample_mcmc(c),
        Command::Compare(c) => compare_cmd(c),
        Command::RunExperiment(c) => run_experiment_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn synth_data(c: &Common) -> Result<()> {
    let cfg = c.load_config()?;
    let out = c.out_dir();
    let _lock = DirLock::acquire(&out)?;
    let prior = cfg.prior.build()?;
    let spec = cfg.synthesis.as_ref().unwrap_or(&cfg.forward);
    let model = spec.build(&prior, c.config_base().as_deref())?;
    let mut rng = invflow_core::Rng::seed_from_u64(stage_seed(cfg.seed, "synth-data"));
    let pairs = generate_pairs(&model, prior.lo(), prior.hi(), cfg.surrogate.pairs, &mut rng)?;
    let path = out.join("pairs.csv");
    pairs.write_csv(&path)?;
    write_stamped(
        &out.join("pairs.json"),
        &cfg.hash(),
        &serde_json::json!({ "count": pairs.len() }),
    )?;
    println!("wrote {} pairs to {}", pairs.len(), path.display());
    Ok(())
}

fn train_surrogate_cmd(c: &Common) -> Result<()> {
    let cfg = c.load_config()?;
    let out = c.out_dir();
    let _lock = DirLock::acquire(&out)?;
    let prior = cfg.prior.build()?;
    let pairs = TrainingPairs::read_csv(&out.join("pairs.csv"))?;
    let mut rng = invflow_core::Rng::seed_from_u64(stage_seed(cfg.seed, "surrogate"));
    let (model, report) = train_surrogate(
        &pairs,
        prior.lo(),
        prior.hi(),
        &cfg.surrogate.train_config(),
        &mut rng,
    )?;
    model.save(&out.join("surrogate.json"))?;
    write_stamped(&out.join("surrogate_report.json"), &cfg.hash(), &report)?;
    println!(
        "surrogate trained on {} pairs: held-out RMSE {:.3e}, relative L2 {:.3e} (best epoch {})",
        pairs.len(),
        report.final_rmse,
        report.holdout_rel_l2,
        report.best_epoch
    );
    Ok(())
}

fn for_each_b(
    c: &Common,
    stage: &str,
    f: impl Fn(&ExperimentConfig, &invflow_core::ForwardModel, &invflow_core::Measurement, f64, &Path, &str) -> Result<()>,
) -> Result<()> {
    let cfg = c.load_config()?;
    let out = c.out_dir();
    let _lock = DirLock::acquire(&out)?;
    let hash = cfg.hash();
    let prior = cfg.prior.build()?;
    let base = c.config_base();
    let forward = cfg.forward.build(&prior, base.as_deref())?;
    let synthesis = match &cfg.synthesis {
        Some(spec) => spec.build(&prior, base.as_deref())?,
        None => forward.clone(),
    };
    for &b in &cfg.b_values {
        let dir = out.join(format!("b_{b}"));
        std::fs::create_dir_all(&dir)?;
        let measurement = make_measurement(&cfg, &synthesis, b)?;
        write_stamped(&dir.join("measurement.json"), &hash, &measurement)?;
        f(&cfg, &forward, &measurement, b, &dir, &hash)?;
        println!("{stage}: b = {b} done ({})", dir.display());
    }
    Ok(())
}

fn sample_inn(c: &Common) -> Result<()> {
    for_each_b(c, "sample-inn", |cfg, fwd, meas, b, dir, hash| {
        let (set, train_s, sample_s) = harness::inn_stage(cfg, fwd, meas, b, dir, hash)?;
        println!(
            "  trained in {train_s:.1}s, sampled {} draws in {sample_s:.3}s",
            set.len()
        );
        Ok(())
    })
}

fn sample_mcmc(c: &Common) -> Result<()> {
    for_each_b(c, "sample-mcmc", |cfg, fwd, meas, b, dir, hash| {
        let (set, diag, run_s) = harness::mcmc_stage(cfg, fwd, meas, b, dir, hash)?;
        let min_ess = diag.ess.iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "  {} samples in {run_s:.1}s, acceptance {:.2}, min ESS {min_ess:.0}",
            set.len(),
            diag.acceptance_rate.unwrap_or(f64::NAN)
        );
        Ok(())
    })
}

fn compare_cmd(c: &Common) -> Result<()> {
    let cfg = c.load_config()?;
    let out = c.out_dir();
    let hash = cfg.hash();
    let prior = cfg.prior.build()?;
    for &b in &cfg.b_values {
        let dir = out.join(format!("b_{b}"));
        let inn = SampleSet::load(
            &dir.join("inn_samples.csv"),
            &dir.join("inn_samples.json"),
            Some(&hash),
        )?;
        let mcmc = SampleSet::load(
            &dir.join("mcmc_samples.csv"),
            &dir.join("mcmc_samples.json"),
            Some(&hash),
        )?;
        let mcmc = if mcmc.dim() > prior.dim() {
            head_columns(&mcmc, prior.dim())?
        } else {
            mcmc
        };
        let report = compare(&inn, &mcmc)?;
        write_stamped(&dir.join("report.json"), &hash, &report)?;
        print_report(b, &report);
    }
    Ok(())
}

fn run_experiment_cmd(c: &Common) -> Result<()> {
    let cfg = c.load_config()?;
    let out = c.out_dir();
    let runs = harness::run_experiment(&cfg, &out, c.config_base().as_deref())?;
    for run in &runs {
        print_report(run.b, &run.report);
        if let Some(rt) = &run.report.runtimes {
            println!(
                "  runtimes: INN train {:.1}s, INN sample {:.3}s, MCMC {:.1}s (min ESS {:.0}, {:.1}s per 2e4 effective, speedup {:.0}x)",
                rt.inn_train_s,
                rt.inn_sample_s,
                rt.mcmc_run_s,
                rt.mcmc_min_ess,
                rt.mcmc_s_per_20k_effective,
                rt.inn_speedup
            );
        }
    }
    println!("artifacts under {}", out.display());
    Ok(())
}

fn print_report(b: f64, report: &harness::ComparisonReport) {
    println!("b = {b}:");
    println!(
        "  {:<8} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "param", "inn mean", "inn std", "mcmc mean", "mcmc std", "KS"
    );
    for (j, name) in report.names.iter().enumerate() {
        println!(
            "  {:<8} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>8.4}",
            name,
            report.a.mean[j],
            report.a.std[j],
            report.b.mean[j],
            report.b.std[j],
            report.ks[j]
        );
    }
}
