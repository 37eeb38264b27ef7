//! Benchmark CLI: complexity computation, design checks, PAC experiments,
//! the Theorem-3 separation preset, and bound reports.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on solver or
//! design-check failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use coda_core::bandit::{make_trivial_class, BanditInstance, NoiseModel, PolicyClass};
use coda_core::design::{
    closed_form_design_value, gridsearch, rho_combinatorial, rho_linear, ContextWeights,
    SolverConfig,
};
use coda_core::harness::{
    build_instance, predicted_bounds, run_experiment, separation_experiment, ExperimentConfig,
    HarnessError, InstanceSpec, LearnerKind,
};

#[derive(Parser)]
#[command(
    name = "coda",
    about = "Instance-optimal PAC best-policy identification benchmarks for contextual bandits",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Instance kind: hard | trivial | linear, or a path to an instance JSON.
    #[arg(long, default_value = "hard")]
    instance: String,
    /// Context count for the hard family.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Reward gap of the hard family.
    #[arg(long, default_value_t = 1.0)]
    gap: f64,
    /// Context count for trivial/linear instances.
    #[arg(long, default_value_t = 3)]
    contexts: usize,
    /// Action count for trivial/linear instances.
    #[arg(long, default_value_t = 2)]
    actions: usize,
    /// Seed of the random reward table for trivial/linear instances.
    #[arg(long, default_value_t = 0)]
    reward_seed: u64,
}

impl InstanceArgs {
    fn to_spec(&self) -> Result<InstanceSpec, String> {
        match self.instance.as_str() {
            "hard" => Ok(InstanceSpec::Hard {
                m: self.m,
                gap: self.gap,
                noise: None,
            }),
            "trivial" => Ok(InstanceSpec::Trivial {
                n_contexts: self.contexts,
                n_actions: self.actions,
                reward_seed: self.reward_seed,
            }),
            "linear" => Ok(InstanceSpec::Linear {
                n_contexts: self.contexts,
                n_actions: self.actions,
                reward_seed: self.reward_seed,
            }),
            path => {
                let path = PathBuf::from(path);
                if path.extension().is_some() {
                    Ok(InstanceSpec::File { path })
                } else {
                    Err(format!(
                        "unknown instance kind '{}' (expected hard | trivial | linear | <file.json>)",
                        self.instance
                    ))
                }
            }
        }
    }
}

/// Either a run count n (seeds 0..n) or an explicit comma-separated list.
fn parse_seeds(raw: &str) -> Result<Vec<u64>, String> {
    if raw.contains(',') {
        raw.split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|e| e.to_string()))
            .collect()
    } else {
        let n: u64 = raw
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| e.to_string())?;
        Ok((0..n).collect())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute the instance-complexity functional and its witness design.
    Rho {
        #[command(flatten)]
        instance: InstanceArgs,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Use the linear functional over the class's feature map.
        #[arg(long, default_value_t = false)]
        linear: bool,
        /// Write the report here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the closed-form dual design value against grid search.
    DesignCheck {
        #[arg(long, default_value_t = 50)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run a PAC experiment from flags or a JSON config file.
    Run {
        /// JSON file with an ExperimentConfig; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        instance: InstanceArgs,
        /// Comma-separated learners: coda, elimination_rage, nonelim_rage,
        /// regret_baseline, per_context_bai.
        #[arg(long)]
        learners: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Run count n (seeds 0..n) or a comma-separated seed list.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        offline_size: Option<usize>,
        #[arg(long, default_value_t = false)]
        strict_constants: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The Theorem-3 separation preset: CODA vs the regret baseline over a
    /// sweep of hard instances.
    Separation {
        /// Comma-separated context counts.
        #[arg(long, default_value = "4,8,16")]
        ms: String,
        #[arg(long, default_value_t = 1.0)]
        gap: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value = "100")]
        seeds: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "separation_out")]
        out: PathBuf,
    },
    /// Print predicted sample-complexity bounds next to the functionals.
    Bounds {
        #[command(flatten)]
        instance: InstanceArgs,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Fast end-to-end sanity sweep.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    if let Some(harness) = err.downcast_ref::<HarnessError>() {
        return match harness {
            HarnessError::Config(_) => 2,
            HarnessError::Algorithm(_) | HarnessError::Design(_) => 3,
            _ => 1,
        };
    }
    if err.downcast_ref::<coda_core::design::DesignError>().is_some()
        || err
            .downcast_ref::<coda_core::algorithms::AlgorithmError>()
            .is_some()
    {
        return 3;
    }
    if err.is::<ConfigFlagError>() {
        return 2;
    }
    1
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigFlagError(String);

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Rho {
            instance,
            epsilon,
            linear,
            out,
        } => {
            let spec = instance.to_spec().map_err(ConfigFlagError)?;
            let (inst, class, tag) = build_instance(&spec)?;
            let cfg = SolverConfig::default();
            let design = if linear {
                rho_linear(&inst, &class, epsilon, &cfg)?
            } else {
                rho_combinatorial(&inst, &class, epsilon, &cfg)?
            };
            let body = serde_json::json!({
                "instance": tag,
                "epsilon": epsilon,
                "functional": if linear { "linear" } else { "combinatorial" },
                "value": design.value,
                "argmax_policy": design.argmax_policy,
                "allocation": design.allocation,
                "converged": design.converged,
                "dual_gap": design.dual_gap,
                "clip_count": design.clip_count,
            });
            let rendered = serde_json::to_string_pretty(&body)?;
            println!("{rendered}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{rendered}\n"))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DesignCheck {
            draws,
            seed,
            tolerance,
        } => {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for trial in 0..draws {
                let n_contexts = rng.gen_range(1..=3usize);
                let n_actions = rng.gen_range(2..=3usize);
                let nu = vec![1.0 / n_contexts as f64; n_contexts];
                let rewards: Vec<f64> = (0..n_contexts * n_actions).map(|_| rng.gen()).collect();
                let inst =
                    BanditInstance::new(nu, n_actions, rewards, NoiseModel::Bernoulli, seed)?;
                let class: PolicyClass = make_trivial_class(&inst)?;
                let pivot = rng.gen_range(0..class.len());
                let k = rng.gen_range(1..=3usize).min(class.len());
                let support: Vec<usize> = (0..k).map(|_| rng.gen_range(0..class.len())).collect();
                let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
                let total: f64 = raw.iter().sum();
                let lambda: Vec<f64> = raw.iter().map(|x| x / total).collect();
                let gamma: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 2.0 + 0.05).collect();
                let contexts = ContextWeights::exact(&inst);
                let closed = closed_form_design_value(
                    &class, &support, &lambda, &gamma, pivot, &contexts, 0.0,
                );
                let grid = gridsearch::min_sum_weighted_norms(
                    &class, &support, &lambda, &gamma, pivot, &contexts, n_actions, 120,
                );
                let diff = (closed - grid).abs() / closed.abs().max(1.0);
                worst = worst.max(diff);
                println!("draw {trial:3}: closed {closed:.8} grid {grid:.8} rel-diff {diff:.2e}");
            }
            println!("worst relative difference: {worst:.3e} (tolerance {tolerance:.1e})");
            if worst <= tolerance {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::Run {
            config,
            instance,
            learners,
            epsilon,
            delta,
            seeds,
            offline_size,
            strict_constants,
            workers,
            out,
        } => {
            let mut cfg: ExperimentConfig = match &config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => ExperimentConfig {
                    instance: instance.to_spec().map_err(ConfigFlagError)?,
                    learners: vec![LearnerKind::Coda],
                    epsilon: 0.1,
                    delta: 0.1,
                    seeds: (0..10).collect(),
                    offline_size: None,
                    strict_constants: false,
                    early_stop: false,
                    oracle_cap: None,
                    max_samples: 1 << 40,
                    workers: None,
                    out_dir: PathBuf::from("experiment_out"),
                },
            };
            if let Some(raw) = learners {
                let mut parsed = Vec::new();
                for name in raw.split(',') {
                    let name = name.trim();
                    parsed.push(
                        LearnerKind::parse(name)
                            .ok_or_else(|| ConfigFlagError(format!("unknown learner '{name}'")))?,
                    );
                }
                cfg.learners = parsed;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(d) = delta {
                cfg.delta = d;
            }
            if let Some(raw) = seeds {
                cfg.seeds = parse_seeds(&raw).map_err(ConfigFlagError)?;
            }
            if let Some(size) = offline_size {
                cfg.offline_size = Some(size);
            }
            if strict_constants {
                cfg.strict_constants = true;
            }
            if let Some(w) = workers {
                cfg.workers = Some(w);
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Separation {
            ms,
            gap,
            epsilon,
            delta,
            seeds,
            workers,
            out,
        } => {
            let ms: Vec<usize> = ms
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| ConfigFlagError(format!("bad --ms: {e}")))?;
            let seeds = parse_seeds(&seeds).map_err(ConfigFlagError)?;
            let summary = separation_experiment(&ms, gap, epsilon, delta, &seeds, workers, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bounds {
            instance,
            epsilon,
            delta,
        } => {
            let spec = instance.to_spec().map_err(ConfigFlagError)?;
            let hard_params = match &spec {
                InstanceSpec::Hard { m, gap, .. } => Some((*m, *gap)),
                _ => None,
            };
            let (inst, class, tag) = build_instance(&spec)?;
            let report = predicted_bounds(&inst, &class, epsilon, delta, hard_params)?;
            let body = serde_json::json!({ "instance": tag, "report": report });
            println!("{}", serde_json::to_string_pretty(&body)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let ok = coda_core::harness::selftest(std::io::stdout())?;
            if ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}
