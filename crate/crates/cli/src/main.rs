//! `nuca`: runs the simulator's named experiments and writes plot-ready
//! artifacts.
//!
//! Exit status: 0 success, 1 a `--check` criterion failed, 2 usage or config
//! error, 3 the run finished without a full result (no leaky placement, or a
//! key left undetermined).

mod error;
mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use nuca_core::experiments::{
    reproduce_all, run_scenario, Scenario, ScenarioParams, ScenarioReport,
};
use nuca_core::io::write_artifacts;
use nuca_core::machine::MachineConfig;
use serde_json::json;

use error::{CliError, EXIT_CHECK_FAILED, EXIT_OK, EXIT_PARTIAL};
use spec::{parse_rates, parse_seeds, ConfigFile, ExperimentSpec};

// Aliases keep clap from treating the parsed lists as repeated flags.
type SeedList = Vec<u64>;
type RateList = Vec<f64>;

#[derive(Debug, Parser)]
#[command(
    name = "nuca",
    version,
    about = "Distance-based LLC side-channel experiments on a simulated tiled mesh"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON file with `machine`, `params`, `seeds` and `output_dir` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive seed range `N..M`.
    #[arg(long, global = true, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Output directory [default: $NUCA_OUT_DIR, else ./results].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Judge the results against the acceptance criteria; exit 1 on failure.
    #[arg(long, global = true)]
    check: bool,
    /// Start from the small parameter set used for smoke and determinism runs.
    #[arg(long, global = true)]
    reduced: bool,

    /// Machine latency noise σ in cycles.
    #[arg(long, global = true)]
    noise: Option<f64>,
    /// Secret bits for toy-attack and covert.
    #[arg(long, global = true)]
    bits: Option<usize>,
    /// Trial budget per key for aes-attack and defense.
    #[arg(long, global = true)]
    trials: Option<u64>,
    /// Number of victim keys.
    #[arg(long, global = true)]
    keys: Option<usize>,
    /// Timed decryptions per trial.
    #[arg(long, global = true)]
    readings: Option<usize>,
    #[arg(long, global = true)]
    training_samples: Option<usize>,
    /// Held-out trials for the voting curve.
    #[arg(long, global = true)]
    heldout: Option<usize>,
    /// Profiling samples per address.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    samples_per_bit: Option<usize>,
    /// Injection rates, `start:stop:step` or a comma list.
    #[arg(long, global = true, value_parser = parse_rates)]
    rates: Option<RateList>,
    /// Criteria ids for reproduce-all, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    only: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Latency profile of a line pool from the corner tile.
    Profile,
    /// Single-bit near/far attack on the toy victim.
    ToyAttack,
    /// Classifier voting curve and last-round key-word recovery.
    AesAttack,
    /// Near/far covert channel.
    Covert,
    /// Padding defense and congestion effects.
    Defense,
    /// Mesh latency against injection rate.
    NocSweep,
    /// Every acceptance criterion at full size; writes report.json.
    ReproduceAll,
}

impl Command {
    fn scenario(self) -> Option<Scenario> {
        Some(match self {
            Command::Profile => Scenario::Profile,
            Command::ToyAttack => Scenario::ToyAttack,
            Command::AesAttack => Scenario::AesAttack,
            Command::Covert => Scenario::Covert,
            Command::Defense => Scenario::Defense,
            Command::NocSweep => Scenario::NocSweep,
            Command::ReproduceAll => return None,
        })
    }
}

fn set_trials(grid: &mut Vec<u64>, trials: u64) {
    grid.retain(|&t| t < trials);
    grid.push(trials);
}

fn apply_overrides(cli: &Cli, machine: &mut MachineConfig, p: &mut ScenarioParams) {
    if let Some(n) = cli.noise {
        machine.noise_stddev = n;
    }
    if let Some(b) = cli.bits {
        p.toy_attack.bits = b;
        p.covert.bits = b;
        p.defense.toy_bits = b;
    }
    for aes in [&mut p.aes_attack, &mut p.defense.aes] {
        if let Some(t) = cli.trials {
            set_trials(&mut aes.grid, t);
        }
        if let Some(k) = cli.keys {
            aes.keys = k;
        }
        if let Some(r) = cli.readings {
            aes.readings = r;
            aes.vote_sizes.retain(|&n| n <= r);
        }
        if let Some(n) = cli.training_samples {
            aes.training_samples = n;
        }
    }
    if let Some(n) = cli.heldout {
        p.aes_attack.heldout_trials = n;
    }
    if let Some(s) = cli.samples {
        for prof in [
            &mut p.profile,
            &mut p.toy_attack.profile,
            &mut p.covert.profile,
            &mut p.defense.profile,
        ] {
            prof.samples = s;
        }
        p.aes_attack.placement_samples = s;
        p.defense.aes.placement_samples = s;
    }
    if let Some(s) = cli.samples_per_bit {
        p.covert.samples_per_bit = s;
    }
    if let Some(r) = &cli.rates {
        p.noc_sweep.rates = r.clone();
    }
}

fn section(p: &ScenarioParams, s: Scenario) -> serde_json::Value {
    let all = serde_json::to_value(p).unwrap_or_default();
    all[s.name().replace('-', "_")].clone()
}

fn undetermined(r: &ScenarioReport) -> bool {
    match r {
        ScenarioReport::AesAttack(a) => a.keys.iter().any(|k| k.recovered == "undetermined"),
        _ => false,
    }
}

fn run_one(s: Scenario, spec: &ExperimentSpec, seed: u64, check: bool) -> Result<u8, CliError> {
    let report = run_scenario(s, &spec.machine, &spec.params, seed)?;
    let dir = spec.output_dir.join(s.name()).join(format!("seed-{seed}"));
    let meta = json!({
        "scenario": s.name(),
        "seed": seed,
        "machine": MachineConfig { rng_seed: seed, ..spec.machine.clone() },
        "params": section(&spec.params, s),
    });
    let paths = write_artifacts(&dir, &report.artifacts()?, &meta)?;
    for p in paths.iter().step_by(2) {
        println!("wrote {}", p.display());
    }
    let mut code = if undetermined(&report) {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    };
    if check {
        // Runtimes are not judged here: reduced or enlarged runs change them.
        for c in report.criteria(0.0) {
            println!("{}", c.line());
            if !c.passed {
                code = EXIT_CHECK_FAILED;
            }
        }
    }
    Ok(code)
}

fn run_reproduce(
    spec: &ExperimentSpec,
    seed: u64,
    only: &[u8],
    check: bool,
) -> Result<u8, CliError> {
    let (report, artifacts) = reproduce_all(&spec.machine, seed, only);
    for c in &report.criteria {
        println!("{}", c.line());
    }
    let dir: &Path = &spec
        .output_dir
        .join("reproduce-all")
        .join(format!("seed-{seed}"));
    let meta = json!({
        "scenario": "reproduce-all",
        "seed": seed,
        "machine": MachineConfig { rng_seed: seed, ..spec.machine.clone() },
        "params": ScenarioParams::default(),
    });
    write_artifacts(dir, &artifacts, &meta)?;
    let generated = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut body =
        serde_json::to_vec_pretty(&json!({ "generated_unix": generated, "report": report }))
            .map_err(nuca_core::Error::from)?;
    body.push(b'\n');
    std::fs::write(dir.join("report.json"), body).map_err(nuca_core::Error::from)?;
    println!("report: {}", dir.join("report.json").display());
    Ok(if check && !report.all_passed() {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let base = if cli.reduced {
        ScenarioParams::reduced()
    } else {
        ScenarioParams::default()
    };
    let seeds = cli.seed.map(|s| vec![s]).or_else(|| cli.seeds.clone());
    let mut spec = ExperimentSpec::resolve(file, base, seeds, cli.out.clone());
    apply_overrides(cli, &mut spec.machine, &mut spec.params);
    spec.machine.validate()?;

    let mut worst = EXIT_OK;
    for &seed in &spec.seeds {
        let code = match cli.command.scenario() {
            Some(s) => run_one(s, &spec, seed, cli.check)?,
            None => run_reproduce(&spec, seed, &cli.only, cli.check)?,
        };
        // A check failure outranks a partial result.
        worst = match (worst, code) {
            (EXIT_CHECK_FAILED, _) | (_, EXIT_CHECK_FAILED) => EXIT_CHECK_FAILED,
            (a, b) => a.max(b),
        };
    }
    Ok(worst)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
