use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distill_core::config::ExperimentConfig;
use distill_core::pipeline::{self, Paths, PlannerKind};
use distill_core::Result;

/// Offline distillation of a diffusion trajectory prior into a one-step
/// driving policy.
#[derive(Debug, Parser)]
#[command(name = "distill", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a scalar config field, e.g. `--set srpo.beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the scored replay buffer from expert demonstrations.
    GenData,
    /// Fit the diffusion prior.
    TrainPrior,
    /// Fit the critic and the advantage-weighted initial policy.
    TrainCritic,
    /// Extract the final policy by score-regularized ascent.
    ExtractPolicy,
    /// Closed-loop evaluation of one planner.
    Eval {
        /// policy, diffusion, expert, awr-init or constant-velocity
        #[arg(long, default_value = "policy")]
        planner: String,
        /// Agents respond to the ego instead of replaying their scripts.
        #[arg(long)]
        reactive: bool,
    },
    /// Latency of the policy against the sampler.
    Bench,
    /// Consolidate eval and bench outputs.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective config.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let paths = Paths::new(&cfg.output_dir);
    match &cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg, &paths)?;
            println!("wrote {} ({} records, {} scenarios skipped)", paths.dataset().display(), ds.len(), ds.skipped);
        }
        Command::TrainPrior => {
            let losses = pipeline::train_prior(&cfg, &paths)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!("wrote {} (final loss {last:.4})", paths.prior().display());
        }
        Command::TrainCritic => {
            pipeline::train_critic(&cfg, &paths)?;
            println!("wrote {} and {}", paths.critic().display(), paths.policy_init().display());
        }
        Command::ExtractPolicy => {
            let log = pipeline::extract_policy(&cfg, &paths)?;
            let mean_q = log.last().map_or(f64::NAN, |d| d.mean_q);
            println!("wrote {} (final batch mean Q {mean_q:.4})", paths.policy().display());
        }
        Command::Eval { planner, reactive } => {
            let kind: PlannerKind = planner.parse()?;
            let suite = pipeline::eval(&cfg, &paths, kind, *reactive)?;
            let s = &suite.summary;
            println!(
                "{kind}: mean composite {:.4}, collision rate {:.3}, {} failures over {} episodes; wrote {}",
                s.mean_composite,
                s.collision_rate,
                s.failures,
                s.episodes,
                paths.eval_csv(kind, *reactive).display()
            );
        }
        Command::Bench => {
            let b = pipeline::bench(&cfg, &paths)?;
            println!(
                "sampler/policy {:.2}x, doubled steps {:.2}x, self ratio {:.2}; wrote {}",
                b.sampler_over_policy,
                b.doubled_steps_factor,
                b.self_ratio,
                paths.bench().display()
            );
        }
        Command::Report => {
            let r = pipeline::report(&cfg, &paths)?;
            print_report(&r);
            println!("wrote {}", paths.report_json().display());
        }
        Command::Run => {
            let r = pipeline::run_all(&cfg, &paths)?;
            print_report(&r);
            println!("wrote {}", paths.report_json().display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml_string()),
    }
    Ok(())
}

fn print_report(r: &pipeline::Report) {
    let d = &r.distillation;
    println!(
        "policy {:.4} ({:.3} collisions), diffusion {:.4} ({:.3}), constant velocity {:.4} ({:.3})",
        d.policy_mean_composite,
        d.policy_collision_rate,
        d.diffusion_mean_composite,
        d.diffusion_collision_rate,
        d.constant_velocity_mean_composite,
        d.constant_velocity_collision_rate
    );
    println!(
        "held-out mean Q: policy {:.4}, initial {:.4}",
        r.objective.policy_mean_q, r.objective.init_mean_q
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
