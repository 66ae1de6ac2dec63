use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use disac_core::estimator::estimate_paths;
use disac_core::fusion::Weighting;
use disac_core::harness::trial::{codebooks_for, evaluate, prepare_trial, receiver_ofdm, run_back_end};
use disac_core::harness::{run_montecarlo, write_csv, Mode, ModeSummary, PathSource};
use disac_core::scene::{generate_ground_truth_paths, random_scene};
use disac_core::waveform::{synthesize_tensor, MeasurementTensor};
use disac_core::{DisacError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "disac", about = "Distributed ISAC simulation and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    Gain,
    Uniform,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scene and write it with one measurement tensor per receiver.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate multipath parameters from a tensor file.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Tensor path stem (`.bin` and `.json` alongside).
        #[arg(long)]
        tensor: PathBuf,
    },
    /// Run a single end-to-end trial and dump every intermediate result.
    E2e {
        #[command(flatten)]
        common: Common,
        #[arg(long = "mode", default_values = ["disac"])]
        modes: Vec<String>,
        #[arg(long, value_enum, default_value = "gain")]
        weighting: WeightArg,
    },
    /// Run repeated trials and write summaries plus a per-entity CSV.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long = "mode", default_values = ["disac"])]
        modes: Vec<String>,
        #[arg(long, value_enum, default_value = "gain")]
        weighting: WeightArg,
        /// Feed exact path parameters instead of estimating them.
        #[arg(long)]
        ground_truth: bool,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl Failure {
    fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        Failure::Stage(format!("{stage}: {e}"))
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| match e {
            DisacError::Io(io) => Failure::Config(format!("{}: {io}", p.display())),
            other => Failure::Config(other.to_string()),
        })?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&common.out).map_err(|e| Failure::stage("output", e))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::stage("output", e))?;
    fs::write(path, text + "\n").map_err(|e| Failure::stage("output", format!("{}: {e}", path.display())))
}

fn parse_modes(modes: &[String], w: WeightArg) -> Result<Vec<(Mode, Weighting)>, Failure> {
    let weights: &[Weighting] = match w {
        WeightArg::Gain => &[Weighting::Gain],
        WeightArg::Uniform => &[Weighting::Uniform],
        WeightArg::Both => &[Weighting::Gain, Weighting::Uniform],
    };
    let mut out = Vec::new();
    for m in modes {
        let mode: Mode = m.parse().map_err(|e| Failure::stage("arguments", e))?;
        out.extend(weights.iter().map(|&w| (mode, w)));
    }
    Ok(out)
}

fn simulate(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let scene = random_scene(&cfg, cfg.seed).map_err(|e| Failure::stage("scene", e))?;
    write_json(&common.out.join("scene.json"), &scene)?;
    let codebooks = codebooks_for(&cfg, &scene).map_err(|e| Failure::stage("waveform", e))?;
    for rx in &scene.receivers {
        let truth = generate_ground_truth_paths(&scene, rx.id).map_err(|e| Failure::stage("scene", e))?;
        write_json(&common.out.join(format!("paths_ue{}.json", rx.id)), &truth)?;
        let tensor = receiver_ofdm(&cfg, &scene, rx.id)
            .and_then(|ofdm| synthesize_tensor(&scene, rx.id, &codebooks, &ofdm, cfg.seed))
            .map_err(|e| Failure::stage("waveform", e))?;
        tensor
            .write_files(&common.out.join(format!("tensor_ue{}", rx.id)))
            .map_err(|e| Failure::stage("output", e))?;
    }
    println!("wrote scene and {} tensors to {}", scene.receivers.len(), common.out.display());
    Ok(())
}

fn estimate(common: &Common, tensor: &Path) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let t = MeasurementTensor::read_files(tensor).map_err(|e| Failure::stage("input", e))?;
    let paths = estimate_paths(&t, cfg.estimator.rank_selection(), &cfg.estimator.options(cfg.seed, 0))
        .map_err(|e| Failure::stage("estimator", e))?;
    write_json(&common.out.join("estimated_paths.json"), &paths)?;
    println!("estimated {} paths", paths.len());
    Ok(())
}

fn e2e(common: &Common, modes: &[String], w: WeightArg) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let modes = parse_modes(modes, w)?;
    let prepared = prepare_trial(&cfg, cfg.seed, PathSource::Estimated).map_err(|f| Failure::Stage(f.to_string()))?;
    write_json(&common.out.join("trial.json"), &prepared)?;
    let mut results = Vec::new();
    for &(mode, weighting) in &modes {
        let tag = match weighting {
            Weighting::Gain => mode.to_string().replace(':', "_"),
            Weighting::Uniform => format!("{}_uniform", mode.to_string().replace(':', "_")),
        };
        if let Ok(back) = run_back_end(&cfg, &prepared, mode, weighting) {
            write_json(&common.out.join(format!("estimate_{tag}.json")), &back)?;
        }
        let r = evaluate(&cfg, &prepared, mode, weighting);
        match &r.failure {
            Some(f) => eprintln!("{mode}: failed at {f}"),
            None => println!(
                "{mode}: {} of {} targets detected, {} false alarms",
                r.detected_targets(),
                r.targets.len(),
                r.false_alarms
            ),
        }
        results.push(r);
    }
    write_json(&common.out.join("trial_result.json"), &results)?;
    Ok(())
}

fn print_summary(s: &ModeSummary) {
    let w = match s.weighting {
        Weighting::Gain => "gain",
        Weighting::Uniform => "uniform",
    };
    println!("[{} / {w}]", s.mode);
    println!("  trials: {} ({} with a failed stage)", s.trials, s.failed_trials);
    let line = |name: &str, d: &Option<disac_core::harness::Distribution>, n: usize, total: usize| match d {
        Some(d) => println!(
            "  {name}: n={n}/{total} median={:.4} p80={:.4} p95={:.4} max={:.4}",
            d.p50, d.p80, d.p95, d.max
        ),
        None => println!("  {name}: n=0/{total}"),
    };
    line("ue position error (m)", &s.ue_position, s.ue_position_count, s.ue_total);
    line(
        "ue timing offset error (s)",
        &s.timing_offset,
        s.timing_offset.as_ref().map_or(0, |d| d.count),
        s.ue_total,
    );
    line("target error (m)", &s.target, s.targets_detected, s.target_total);
    println!("  false alarms: {}", s.false_alarms);
}

fn montecarlo(common: &Common, trials: usize, modes: &[String], w: WeightArg, ground_truth: bool) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    if trials == 0 {
        return Err(Failure::stage("arguments", "--trials must be at least 1"));
    }
    let modes = parse_modes(modes, w)?;
    let source = if ground_truth { PathSource::GroundTruth } else { PathSource::Estimated };
    let report = run_montecarlo(&cfg, trials, &modes, source).map_err(|e| Failure::stage("montecarlo", e))?;
    for s in &report.summaries {
        print_summary(s);
    }
    write_json(&common.out.join("summary.json"), &report.summaries)?;
    let csv_path = common.out.join("results.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Failure::stage("output", e))?;
    write_csv(file, &report.trials).map_err(|e| Failure::stage("output", e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Estimate { common, tensor } => estimate(common, tensor),
        Command::E2e { common, modes, weighting } => e2e(common, modes, *weighting),
        Command::Montecarlo {
            common,
            trials,
            modes,
            weighting,
            ground_truth,
        } => montecarlo(common, *trials, modes, *weighting, *ground_truth),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error in {msg}");
            ExitCode::FAILURE
        }
    }
}
