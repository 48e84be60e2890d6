use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use calib_core::experiments::{export, render_report, reproduces, run_experiment_with, workers_from_env, ExperimentConfig, ExperimentPlan, ExperimentResult, RESULT_FILE};
use calib_core::{EnvKind, FeatureId, Scenario};
use calib_service::{router, AppState, Teacher, TeacherConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calib-lab", version, about = "Calibrated feature experiments and live teaching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run experiments with the simulated teacher and export results.
    Run {
        /// Environment name, or `all`.
        #[arg(long, default_value = "all")]
        env: String,
        /// `all`, `single:<feature>`, or `every` for all scenarios of the environment.
        #[arg(long, default_value = "every")]
        scenario: String,
        /// Number of seeds, starting at `--first-seed`.
        #[arg(long, default_value_t = 6)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// TOML or JSON experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads; defaults to CALIB_LAB_WORKERS or all cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the summary of exported results, optionally re-exporting tables and plots.
    Report {
        dir: PathBuf,
        #[arg(long)]
        reexport: bool,
    },
    /// Re-run seeds of an exported experiment and check they reproduce bit-exactly.
    Verify {
        dir: PathBuf,
        /// Seeds to check; all recorded seeds when omitted.
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Print the default experiment configuration as TOML.
    Config,
    /// Serve live teaching sessions over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        feature: FeatureId,
        #[arg(long, default_value = "sessions")]
        data_dir: PathBuf,
    },
}

fn dir_name(env: EnvKind, scenario: Scenario) -> String {
    format!("{env}_{}", scenario.to_string().replace(':', "_"))
}

fn run(env: &str, scenario: &str, seeds: Vec<u64>, config: Option<&Path>, out: &Path, workers: Option<usize>) -> Result<()> {
    let config = match config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let envs: Vec<EnvKind> = if env == "all" { EnvKind::ALL.to_vec() } else { vec![env.parse()?] };
    let workers = match workers {
        Some(w) => Some(w),
        None => workers_from_env()?,
    };
    for env in envs {
        let scenarios = if scenario == "every" { Scenario::for_env(env) } else { vec![scenario.parse::<Scenario>()?.validate(env)?] };
        for scen in scenarios {
            let plan = ExperimentPlan::new(env, scen, seeds.clone(), config.clone())?;
            let start = Instant::now();
            let result = run_experiment_with(&plan, workers)?;
            let dir = out.join(dir_name(env, scen));
            export(&result, &dir)?;
            println!("{}", render_report(&result));
            println!("wrote {} in {:.1}s\n", dir.display(), start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn load(dir: &Path) -> Result<ExperimentResult> {
    let path = dir.join(RESULT_FILE);
    ExperimentResult::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { env, scenario, seeds, first_seed, config, out, workers } => {
            run(&env, &scenario, (first_seed..first_seed + seeds).collect(), config.as_deref(), &out, workers)
        }
        Command::Report { dir, reexport } => {
            let result = load(&dir)?;
            if reexport {
                export(&result, &dir)?;
            }
            print!("{}", render_report(&result));
            Ok(())
        }
        Command::Verify { dir, seed } => {
            let result = load(&dir)?;
            let seeds = if seed.is_empty() { result.plan.seeds.clone() } else { seed };
            let mut failed = false;
            for s in seeds {
                let ok = reproduces(&result, s)?;
                println!("seed {s}: {}", if ok { "reproduced" } else { "MISMATCH" });
                failed |= !ok;
            }
            if failed {
                bail!("results did not reproduce");
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", toml::to_string_pretty(&ExperimentConfig::default())?);
            Ok(())
        }
        Command::Serve { port, host, env, feature, data_dir } => serve(&host, port, env, feature, &data_dir),
    }
}

fn serve(host: &str, port: u16, env: EnvKind, feature: FeatureId, data_dir: &Path) -> Result<()> {
    let teacher = Teacher::new(TeacherConfig::new(env, feature))?;
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let state = AppState::open(teacher, data_dir)?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("serving {env}/{feature} on http://{addr}, sessions in {}", data_dir.display());
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
