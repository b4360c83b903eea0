//! `voltgrid` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use voltgrid::attacks::AttackKind;
use voltgrid::env::Scenario;
use voltgrid::eval::{cross_attack_csv, cross_attack_matrix, evaluate, EvalMetrics};
use voltgrid::experiment::ExperimentConfig;
use voltgrid::feeder::Feeder;
use voltgrid::grid::{solve_power_flow, Controls, Injections};
use voltgrid::qnet::QNetwork;
use voltgrid::trainer::{initial_network, stream_rng, streams, train_with, GradientAdversary};

use manifest::RunManifest;

const OUT_ENV: &str = "VOLTGRID_OUT";

#[derive(Parser)]
#[command(name = "voltgrid", version, about = "Volt-var DDQN training, observation attacks and power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent (clean, FGSM- or PGD-hardened) and write its checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Evaluate a checkpoint on the test profiles, optionally under attack.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Agent checkpoint; a freshly initialized network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate clean, FGSM- and PGD-trained agents under every attack.
    Cross {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        fgsm: PathBuf,
        #[arg(long)]
        pgd: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Solve one power flow and print per-bus voltages and losses.
    Powerflow {
        /// Feeder JSON path or `builtin:<name>`.
        #[arg(long, default_value = "builtin:13bus")]
        feeder: String,
        /// Multiplier on every base load.
        #[arg(long, default_value_t = 1.0)]
        load_scale: f64,
        #[arg(long)]
        json: bool,
        /// Also write `solution.json` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training episodes for `train`, evaluation episodes otherwise.
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory (falls back to the config, then $VOLTGRID_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_parser = parse_attack)]
    attack: Option<AttackKind>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_attack(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: voltgrid::Error| e.to_string())
}

/// Failure classified by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, attack } => cmd_train(run, attack),
        Command::Eval {
            run,
            attack,
            checkpoint,
            workers,
        } => cmd_eval(run, attack, checkpoint, workers),
        Command::Cross {
            run,
            attack,
            clean,
            fgsm,
            pgd,
            workers,
        } => cmd_cross(run, attack, [clean, fgsm, pgd], workers),
        Command::Powerflow {
            feeder,
            load_scale,
            json,
            out,
        } => cmd_powerflow(&feeder, load_scale, json, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Experiment config after flag overrides, plus where its outputs go.
struct Resolved {
    config: ExperimentConfig,
    out: PathBuf,
    json: String,
}

fn resolve(run: &RunArgs, attack: &AttackArgs, command: &str) -> Result<Resolved, Failure> {
    let mut config = match &run.config {
        Some(path) => ExperimentConfig::load(path).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = run.seed {
        config.set_seed(seed);
    }
    for cfg in [&mut config.train.attack, &mut config.eval.attack] {
        if let Some(d) = attack.delta {
            cfg.delta = d;
        }
        if let Some(a) = attack.alpha {
            cfg.alpha = a;
        }
        if let Some(k) = attack.steps {
            cfg.steps = k;
        }
    }
    config.validate().map_err(usage)?;
    let out = run
        .out
        .clone()
        .or_else(|| config.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(command));
    let json = config.to_json().map_err(usage)?;
    Ok(Resolved { config, out, json })
}

/// Runs `body` between writing and finalizing the manifest.
fn with_manifest<F>(resolved: &Resolved, command: &str, seed: u64, body: F) -> CmdResult
where
    F: FnOnce(&mut RunManifest) -> CmdResult,
{
    let mut manifest =
        RunManifest::begin(&resolved.out, command, &resolved.json, seed).map_err(Failure::Runtime)?;
    manifest
        .write_file("config.json", resolved.json.as_bytes())
        .map_err(Failure::Runtime)?;
    let result = body(&mut manifest);
    let summary = match &result {
        Ok(()) => Ok(()),
        Err(Failure::Usage(e)) | Err(Failure::Runtime(e)) => Err(anyhow!("{e:#}")),
    };
    manifest.finish(&summary).map_err(Failure::Runtime)?;
    result
}

fn scenario(config: &ExperimentConfig) -> Result<Arc<Scenario>, Failure> {
    config.scenario().map_err(usage)
}

fn load_agent(path: &Path) -> Result<QNetwork, Failure> {
    QNetwork::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(Failure::Usage)
}

fn cmd_train(run: RunArgs, attack: AttackArgs) -> CmdResult {
    let mut resolved = resolve(&run, &attack, "train")?;
    if let Some(kind) = attack.attack {
        resolved.config.train.attack_kind = kind;
    }
    if let Some(n) = run.episodes {
        resolved.config.train.episodes = n;
    }
    resolved.config.validate().map_err(usage)?;
    resolved.json = resolved.config.to_json().map_err(usage)?;
    let config = resolved.config.clone();
    let sc = scenario(&config)?;

    with_manifest(&resolved, "train", config.train.seed, |manifest| {
        let train = &config.train;
        let attack_cfg = train.attack.clone().with_scope(sc.layout().voltage_mask());
        let mut adversary = GradientAdversary::new(
            train.attack_kind,
            attack_cfg,
            stream_rng(train.seed, streams::ATTACK_NOISE),
        );
        let every = config.checkpoint_every;
        let started = Instant::now();
        let out = train_with(train, Arc::clone(&sc), &mut adversary, |episode, net| {
            let done = episode + 1;
            if every > 0 && done % every == 0 {
                manifest
                    .write_file(&format!("checkpoints/episode_{done:05}.json"), net.to_json()?.as_bytes())
                    .map_err(|e| voltgrid::Error::InvalidInput(format!("{e:#}")))?;
            }
            Ok(())
        })
        .map_err(|e| Failure::Runtime(e.into()))?;

        let write = |m: &mut RunManifest, name: &str, bytes: &[u8]| m.write_file(name, bytes).map_err(Failure::Runtime);
        write(manifest, "training_curve.csv", out.log.to_csv().as_bytes())?;
        let agent = out.net.to_json().map_err(|e| Failure::Runtime(e.into()))?;
        write(manifest, "agent.json", agent.as_bytes())?;

        let n = out.log.episodes.len();
        let head = out.log.mean_reward(0..n.min(100));
        let tail = out.log.mean_reward(n.saturating_sub(100)..n);
        println!(
            "trained {} episodes ({} attack, {} attacked) in {:.1}s",
            n,
            train.attack_kind,
            out.log.attacked_episodes(),
            started.elapsed().as_secs_f64()
        );
        println!("mean reward first 100: {head:.4}  last 100: {tail:.4}");
        println!("wrote {}", resolved.out.join("agent.json").display());
        Ok(())
    })
}

fn print_metrics_header() {
    println!(
        "{:<8} {:<8} {:>12} {:>10} {:>11} {:>10} {:>9} {:>10}",
        "train", "attack", "mean_reward", "q_reduct", "violations", "viol/step", "%max_δ", "sw/step"
    );
}

fn print_metrics_row(train: &str, attack: AttackKind, m: &EvalMetrics) {
    println!(
        "{:<8} {:<8} {:>12.4} {:>10.4} {:>11} {:>10.4} {:>9.1} {:>10.4}",
        train,
        attack,
        m.mean_reward,
        m.q_value_reduction,
        m.total_voltage_violations,
        m.violations_per_timestep,
        m.pct_at_max_delta,
        m.switches_per_timestep
    );
}

fn cmd_eval(run: RunArgs, attack: AttackArgs, checkpoint: Option<PathBuf>, workers: Option<usize>) -> CmdResult {
    let mut resolved = resolve(&run, &attack, "eval")?;
    let eval = &mut resolved.config.eval;
    if let Some(kind) = attack.attack {
        eval.attack_kind = kind;
    }
    if let Some(n) = run.episodes {
        eval.episodes = n;
    }
    if let Some(w) = workers {
        eval.workers = w;
    }
    resolved.json = resolved.config.to_json().map_err(usage)?;
    let config = resolved.config.clone();
    let sc = scenario(&config)?;
    let net = match &checkpoint {
        Some(path) => load_agent(path)?,
        None => {
            eprintln!("no --checkpoint given; evaluating a freshly initialized agent");
            initial_network(&config.train, &sc)
        }
    };

    with_manifest(&resolved, "eval", config.eval.seed, |manifest| {
        let report = evaluate(&net, &sc, &config.eval).map_err(|e| match e {
            voltgrid::Error::ShapeMismatch { .. } => usage(e),
            other => Failure::Runtime(other.into()),
        })?;
        let kind = config.eval.attack_kind;
        let metrics = serde_json::to_string_pretty(&report.metrics).map_err(|e| Failure::Runtime(e.into()))?;
        let steps = report.steps_jsonl().map_err(|e| Failure::Runtime(e.into()))?;
        for (name, bytes) in [
            ("metrics.json".to_string(), metrics + "\n"),
            (format!("envelope_{kind}.csv"), report.envelope().to_csv()),
            (format!("steps_{kind}.jsonl"), steps),
        ] {
            manifest.write_file(&name, bytes.as_bytes()).map_err(Failure::Runtime)?;
        }
        print_metrics_header();
        let label = if checkpoint.is_some() { "agent" } else { "fresh" };
        print_metrics_row(label, kind, &report.metrics);
        Ok(())
    })
}

fn cmd_cross(run: RunArgs, attack: AttackArgs, checkpoints: [PathBuf; 3], workers: Option<usize>) -> CmdResult {
    let mut resolved = resolve(&run, &attack, "cross")?;
    if let Some(n) = run.episodes {
        resolved.config.eval.episodes = n;
    }
    if let Some(w) = workers {
        resolved.config.eval.workers = w;
    }
    resolved.json = resolved.config.to_json().map_err(usage)?;
    let config = resolved.config.clone();
    let sc = scenario(&config)?;
    let nets = checkpoints
        .iter()
        .map(|p| load_agent(p))
        .collect::<Result<Vec<_>, _>>()?;
    let agents: Vec<(AttackKind, &QNetwork)> = AttackKind::ALL.into_iter().zip(&nets).collect();

    with_manifest(&resolved, "cross", config.eval.seed, |manifest| {
        let cells = cross_attack_matrix(&agents, &sc, &AttackKind::ALL, &config.eval).map_err(|e| match e {
            voltgrid::Error::ShapeMismatch { .. } | voltgrid::Error::InvalidInput(_) => usage(e),
            other => Failure::Runtime(other.into()),
        })?;
        let json = serde_json::to_string_pretty(&cells).map_err(|e| Failure::Runtime(e.into()))?;
        manifest
            .write_file("cross_attack.csv", cross_attack_csv(&cells).as_bytes())
            .map_err(Failure::Runtime)?;
        manifest
            .write_file("cross_attack.json", (json + "\n").as_bytes())
            .map_err(Failure::Runtime)?;
        print_metrics_header();
        for c in &cells {
            print_metrics_row(&c.train_attack, c.test_attack, &c.metrics);
        }
        Ok(())
    })
}

/// Machine-readable power-flow dump (`powerflow --json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PowerFlowReport {
    feeder: String,
    load_scale: f64,
    solver: String,
    converged: bool,
    iterations: usize,
    max_mismatch: f64,
    mismatch_trace: Vec<f64>,
    v_mag: Vec<f64>,
    v_ang: Vec<f64>,
    p_loss_mw: f64,
}

fn cmd_powerflow(feeder_spec: &str, load_scale: f64, json: bool, out: Option<PathBuf>) -> CmdResult {
    if !(load_scale >= 0.0 && load_scale.is_finite()) {
        return Err(usage(anyhow!("--load-scale must be a non-negative number, got {load_scale}")));
    }
    let feeder = Feeder::load(feeder_spec).map_err(usage)?;
    let net = &feeder.network;
    let solution = solve_power_flow(net, &Injections::from_loads(net, load_scale), &Controls::nominal(net))
        .map_err(|e| Failure::Runtime(e.into()))?;
    let report = PowerFlowReport {
        feeder: feeder_spec.into(),
        load_scale,
        solver: "newton-raphson".into(),
        converged: solution.converged,
        iterations: solution.iterations,
        max_mismatch: solution.max_mismatch,
        mismatch_trace: solution.mismatch_trace.clone(),
        v_mag: solution.v_mag.clone(),
        v_ang: solution.v_ang.clone(),
        p_loss_mw: solution.p_loss,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))? + "\n";

    if let Some(dir) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
        let args = serde_json::json!({"feeder": feeder_spec, "load_scale": load_scale}).to_string();
        let resolved = Resolved { config: ExperimentConfig::default(), out: dir, json: args };
        with_manifest(&resolved, "powerflow", 0, |m| {
            m.write_file("solution.json", text.as_bytes()).map(|_| ()).map_err(Failure::Runtime)
        })?;
    }

    if json {
        print!("{text}");
    } else {
        println!("{:>4} {:>10} {:>12}", "bus", "|U| p.u.", "angle deg");
        for (i, (vm, va)) in report.v_mag.iter().zip(&report.v_ang).enumerate() {
            println!("{:>4} {:>10.6} {:>12.6}", net.buses[i].id, vm, va.to_degrees());
        }
        println!("loss {:.6} MW after {} iterations", report.p_loss_mw, report.iterations);
    }
    if !solution.converged {
        let trace: Vec<String> = solution.mismatch_trace.iter().map(|m| format!("{m:.3e}")).collect();
        return Err(Failure::Runtime(anyhow!(
            "power flow did not converge after {} iterations; mismatch trace: {}",
            solution.iterations,
            trace.join(", ")
        )));
    }
    Ok(())
}
