//! Command-line front end: scenario execution with replications, bound
//! tables, artifact verification, and bundled example scenarios.

use crate::analysis::{bound_report, is_soc, network_potential, Allocation, BoundReport};
use crate::env::RewardMatrix;
use crate::sim::{
    run_replications, write_trace_csv, Event, EventKind, MatrixSpec, Metrics, Scenario,
};
use crate::protocol::Variant;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Process exit codes: 0 success, 2 configuration error, 3 I/O error,
/// 4 verification mismatch.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "soc-sim", version, about = "Simulator for decentralized stable channel allocation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario for one or more replications and write JSON results
    Run(RunArgs),
    /// Print the analytical convergence bounds for a configuration
    Bounds(BoundsArgs),
    /// Re-verify stored run artifacts against the reward matrix
    Analyze(AnalyzeArgs),
    /// List bundled scenarios, or dump one as a config file
    Presets(PresetsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario config file (JSON)
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Name of a bundled scenario
    #[arg(long)]
    pub preset: Option<String>,
    /// Independent replications, each with a derived seed
    #[arg(long, default_value_t = 1)]
    pub reps: u64,
    /// Override the scenario seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write a per-slot trace CSV for every replication
    #[arg(long)]
    pub trace: bool,
    /// Potential-series sampling stride in slots (0 = automatic)
    #[arg(long)]
    pub stride: Option<u64>,
    /// Worker threads; defaults to SOC_SIM_WORKERS or 1
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub channels: usize,
    #[arg(long)]
    pub users: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Minimum reward gap; alternative to --matrix
    #[arg(long, conflicts_with = "matrix")]
    pub min_gap: Option<f64>,
    /// Reward matrix JSON file to take the gap from
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Number of entering users (enables the dynamic bounds)
    #[arg(long)]
    pub entries: Option<usize>,
    /// Number of leaving users
    #[arg(long)]
    pub exits: Option<usize>,
    /// Print machine-readable JSON instead of the table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// metrics.json written by `run`
    #[arg(long)]
    pub metrics: PathBuf,
    /// matrix.json written by `run`
    #[arg(long)]
    pub matrix: PathBuf,
    /// Optional trace.csv to cross-check against the metrics
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PresetsArgs {
    /// Print the named scenario as a JSON config
    #[arg(long)]
    pub dump: Option<String>,
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "static-small",
        "static-large",
        "static-heuristic",
        "homogeneous",
        "dynamic-sparse",
        "dynamic-alternating",
        "dynamic-mixed",
    ]
}

/// Bundled scenarios. The dynamic ones are scaled-down churn patterns:
/// entries and exits spaced far enough apart for the network to settle in
/// between.
pub fn preset(name: &str) -> Option<Scenario> {
    let base = Scenario {
        num_channels: 6,
        variant: Variant::Static,
        delta: 0.05,
        horizon: 200_000,
        seed: 1,
        matrix: MatrixSpec::Random {
            num_users: 4,
            gap_floor: 0.1,
        },
        events: Vec::new(),
        potential_stride: 0,
        record_trace: false,
        check_invariants: true,
    };
    let enter = |slot| Event {
        slot,
        kind: EventKind::Enter {
            row: None,
            gap_floor: Some(0.05),
        },
    };
    let leave = |slot, user| Event {
        slot,
        kind: EventKind::LeaveRequest { user },
    };
    Some(match name {
        "static-small" => base,
        "static-large" => Scenario {
            num_channels: 10,
            horizon: 100_000,
            matrix: MatrixSpec::Random {
                num_users: 10,
                gap_floor: 0.05,
            },
            ..base
        },
        "static-heuristic" => Scenario {
            num_channels: 10,
            variant: Variant::StaticHeuristic,
            horizon: 100_000,
            matrix: MatrixSpec::Random {
                num_users: 10,
                gap_floor: 0.05,
            },
            ..base
        },
        "homogeneous" => Scenario {
            num_channels: 8,
            horizon: 100_000,
            matrix: MatrixSpec::Explicit {
                means: vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]; 4],
            },
            ..base
        },
        "dynamic-sparse" => Scenario {
            num_channels: 10,
            variant: Variant::Dynamic,
            horizon: 20_000,
            matrix: MatrixSpec::Random {
                num_users: 1,
                gap_floor: 0.05,
            },
            events: vec![enter(5_000), leave(10_000, 0), enter(15_000)],
            ..base
        },
        "dynamic-alternating" => Scenario {
            num_channels: 10,
            variant: Variant::Dynamic,
            horizon: 20_000,
            matrix: MatrixSpec::Random {
                num_users: 3,
                gap_floor: 0.05,
            },
            events: vec![
                leave(2_000, 0),
                enter(4_000),
                leave(6_000, 1),
                enter(8_000),
                leave(10_000, 2),
                enter(12_000),
                leave(14_000, 3),
                enter(16_000),
            ],
            ..base
        },
        "dynamic-mixed" => Scenario {
            num_channels: 10,
            variant: Variant::Dynamic,
            horizon: 20_000,
            matrix: MatrixSpec::Random {
                num_users: 5,
                gap_floor: 0.05,
            },
            events: vec![
                enter(4_000),
                enter(6_000),
                leave(8_400, 0),
                enter(10_000),
                leave(12_000, 1),
                leave(14_000, 2),
            ],
            ..base
        },
        _ => return None,
    })
}

#[derive(Debug, Serialize)]
struct RepSummary {
    metrics: Metrics,
    bounds: Option<BoundReport>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    reps: u64,
    mean_total_reward: f64,
    se_total_reward: f64,
    mean_total_collisions: f64,
    se_total_collisions: f64,
    mean_final_potential: f64,
    stable_fraction: f64,
    bounds: Option<BoundReport>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Executes a command; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Presets(args) => cmd_presets(args),
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, (i32, String)> {
    let mut scenario = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| (EXIT_CONFIG, format!("bad config {}: {e}", path.display())))?
        }
        (None, Some(name)) => preset(name)
            .ok_or_else(|| (EXIT_CONFIG, format!("unknown preset '{name}'")))?,
        _ => {
            return Err((
                EXIT_CONFIG,
                "exactly one of --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(stride) = args.stride {
        scenario.potential_stride = stride;
    }
    if args.trace {
        scenario.record_trace = true;
    }
    scenario
        .validate()
        .map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    Ok(scenario)
}

fn workers_from(args: &RunArgs) -> usize {
    args.workers
        .or_else(|| {
            std::env::var("SOC_SIM_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1)
}

fn cmd_run(args: RunArgs) -> i32 {
    let scenario = match load_scenario(&args) {
        Ok(s) => s,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return code;
        }
    };
    let workers = workers_from(&args);
    let outputs = match run_replications(&scenario, args.reps.max(1), workers) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return EXIT_IO;
    }
    let mut rewards = Vec::new();
    let mut collisions = Vec::new();
    let mut potentials = Vec::new();
    let mut stable = 0u64;
    let mut first_bounds = None;
    for (r, out) in outputs.iter().enumerate() {
        let dir = args.out.join(format!("rep_{r:03}"));
        if let Err(e) = fs::create_dir_all(&dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return EXIT_IO;
        }
        let n_initial = match &scenario.matrix {
            MatrixSpec::Explicit { means } => means.len(),
            MatrixSpec::Random { num_users, .. } => *num_users,
        };
        let bounds = bound_report(
            out.metrics.num_channels,
            n_initial,
            scenario.delta,
            &out.matrix.gap_stats(),
            None,
            None,
        )
        .ok();
        if r == 0 {
            first_bounds = bounds.clone();
        }
        let summary = RepSummary {
            metrics: out.metrics.clone(),
            bounds,
        };
        let write = |name: &str, text: String| -> Result<(), String> {
            fs::write(dir.join(name), text)
                .map_err(|e| format!("cannot write {}: {e}", dir.join(name).display()))
        };
        let res = write(
            "metrics.json",
            serde_json::to_string_pretty(&summary).unwrap(),
        )
        .and_then(|_| {
            write(
                "matrix.json",
                serde_json::to_string_pretty(&out.matrix).unwrap(),
            )
        })
        .and_then(|_| {
            if let Some(trace) = &out.trace {
                let mut buf = Vec::new();
                write_trace_csv(trace, &mut buf).map_err(|e| e.to_string())?;
                write("trace.csv", String::from_utf8(buf).unwrap())?;
            }
            Ok(())
        });
        if let Err(e) = res {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
        rewards.push(out.metrics.total_reward);
        collisions.push(out.metrics.total_collisions as f64);
        potentials.push(out.metrics.final_potential as f64);
        stable += u64::from(out.metrics.final_in_soc);
    }
    let (mr, ser) = mean_se(&rewards);
    let (mc, sec) = mean_se(&collisions);
    let (mp, _) = mean_se(&potentials);
    let agg = Aggregate {
        reps: outputs.len() as u64,
        mean_total_reward: mr,
        se_total_reward: ser,
        mean_total_collisions: mc,
        se_total_collisions: sec,
        mean_final_potential: mp,
        stable_fraction: stable as f64 / outputs.len() as f64,
        bounds: first_bounds,
    };
    let agg_text = serde_json::to_string_pretty(&agg).unwrap();
    if let Err(e) = fs::write(args.out.join("aggregate.json"), &agg_text) {
        eprintln!("error: cannot write aggregate.json: {e}");
        return EXIT_IO;
    }
    println!("{agg_text}");
    0
}

fn cmd_bounds(args: BoundsArgs) -> i32 {
    let gaps = if let Some(path) = &args.matrix {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return EXIT_IO;
            }
        };
        match serde_json::from_str::<RewardMatrix>(&text) {
            Ok(m) => m.gap_stats(),
            Err(e) => {
                eprintln!("error: bad matrix {}: {e}", path.display());
                return EXIT_CONFIG;
            }
        }
    } else {
        let g = args.min_gap.unwrap_or(0.1);
        crate::env::GapStats {
            per_user_gap: vec![g],
            min_gap: g,
        }
    };
    let report = match bound_report(
        args.channels,
        args.users,
        args.delta,
        &gaps,
        args.entries,
        args.exits,
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
        return 0;
    }
    let s = &report.stat;
    println!("configuration: K = {}, N = {}, delta = {}, min gap = {}",
        report.num_channels, report.num_users, report.delta, report.min_gap);
    println!("hopping phase length          T_rh     = {}", s.t_rh);
    println!("sample-rate constant          M        = {:.3}", s.m);
    println!("ranking-reliability slot      t_M      = {}", s.t_m);
    match s.t_m_quadratic {
        Some(q) => println!("  (quadratic-formula value             {q:.3}; numeric value above is authoritative)"),
        None => println!("  (quadratic formula has negative discriminant; numeric value only)"),
    }
    println!("samples needed at t_M         s_min    = {:.3}", s.s_min_at_t_m);
    println!("slots per potential step      tau      = {}", s.tau);
    println!("ranking-correctness prob      P        = {:.12}", s.p_soc);
    println!("  (ln(1 - P) = {:.3})", s.ln_one_minus_p_soc);
    println!("convergence horizon           T(delta) = {:.1}", s.t_delta);
    if let Some(d) = &report.dynamic {
        println!("dynamic: newcomer settling    T_s      = {}", d.t_s_d);
        println!("dynamic: departure disruption T_l      = {}", d.t_l_d);
        println!("dynamic: newcomer constant    M_nu     = {:.3} (t_M = {})", d.m_nu, d.t_m_nu);
        println!("dynamic: newcomer horizon     T_e      = {:.1}", d.t_e_d);
        println!("dynamic: churn constant       M_d      = {:.3} (t_M = {})", d.m_d, d.t_m_d);
        println!("dynamic: churn step bound     tau_d    = {}", d.tau_d);
        println!("dynamic: churn horizon        T(delta) = {:.1}", d.t_d_delta);
    }
    0
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, (i32, String)> {
    let text = fs::read_to_string(path)
        .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| (EXIT_CONFIG, format!("cannot parse {}: {e}", path.display())))
}

fn cmd_analyze(args: AnalyzeArgs) -> i32 {
    #[derive(serde::Deserialize)]
    struct StoredSummary {
        metrics: Metrics,
    }
    let summary: StoredSummary = match read_json(&args.metrics) {
        Ok(s) => s,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return code;
        }
    };
    let matrix: RewardMatrix = match read_json(&args.matrix) {
        Ok(m) => m,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return code;
        }
    };
    let m = &summary.metrics;
    let mut failures = Vec::new();

    let pairs: Vec<(usize, usize)> = m
        .per_agent
        .iter()
        .filter(|a| !matches!(a.final_phase, crate::protocol::Phase::Departed))
        .filter_map(|a| a.final_reserved.map(|c| (a.user_id, c)))
        .collect();
    match Allocation::new(pairs) {
        Ok(alloc) => {
            match network_potential(&matrix, &alloc) {
                Ok(p) if p == m.final_potential => {}
                Ok(p) => failures.push(format!(
                    "final potential mismatch: stored {}, recomputed {p}",
                    m.final_potential
                )),
                Err(e) => failures.push(format!("potential recomputation failed: {e}")),
            }
            match is_soc(&matrix, &alloc) {
                Ok((stable, _)) if stable == m.final_in_soc => {}
                Ok((stable, _)) => failures.push(format!(
                    "stability mismatch: stored {}, recomputed {stable}",
                    m.final_in_soc
                )),
                Err(e) => failures.push(format!("stability recomputation failed: {e}")),
            }
        }
        Err(e) => failures.push(format!("final allocation not orthogonal: {e}")),
    }

    if matrix.num_channels() != m.num_channels {
        failures.push(format!(
            "channel count mismatch: matrix {}, metrics {}",
            matrix.num_channels(),
            m.num_channels
        ));
    }

    if let Some(trace_path) = &args.trace {
        match fs::read_to_string(trace_path) {
            Ok(text) => {
                let rows = text.lines().count().saturating_sub(1);
                if rows == 0 {
                    failures.push("trace has no data rows".into());
                }
                let mut reward_from_trace = 0.0f64;
                let mut collisions_from_trace = 0u64;
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split(',').collect();
                    if cols.len() != 10 {
                        failures.push(format!("malformed trace row: {line}"));
                        break;
                    }
                    if cols[6] == "true" {
                        collisions_from_trace += 1;
                    }
                    if let Ok(r) = cols[7].parse::<f64>() {
                        reward_from_trace += r;
                    }
                }
                if (reward_from_trace - m.total_reward).abs() > 1e-9 {
                    failures.push(format!(
                        "trace reward sum {reward_from_trace} differs from metrics {}",
                        m.total_reward
                    ));
                }
                if collisions_from_trace != m.total_collisions {
                    failures.push(format!(
                        "trace collision count {collisions_from_trace} differs from metrics {}",
                        m.total_collisions
                    ));
                }
            }
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", trace_path.display());
                return EXIT_IO;
            }
        }
    }

    if failures.is_empty() {
        println!("ok: artifacts are mutually consistent");
        0
    } else {
        for f in &failures {
            eprintln!("mismatch: {f}");
        }
        EXIT_MISMATCH
    }
}

fn cmd_presets(args: PresetsArgs) -> i32 {
    match args.dump {
        Some(name) => match preset(&name) {
            Some(s) => {
                println!("{}", serde_json::to_string_pretty(&s).unwrap());
                0
            }
            None => {
                eprintln!("error: unknown preset '{name}'");
                EXIT_CONFIG
            }
        },
        None => {
            for name in preset_names() {
                let s = preset(name).unwrap();
                let n = match &s.matrix {
                    MatrixSpec::Explicit { means } => means.len(),
                    MatrixSpec::Random { num_users, .. } => *num_users,
                };
                println!(
                    "{name:<20} {:?}, K = {}, N = {}, horizon = {}, events = {}",
                    s.variant,
                    s.num_channels,
                    n,
                    s.horizon,
                    s.events.len()
                );
            }
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_all_validate() {
        for name in preset_names() {
            let s = preset(name).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("no-such").is_none());
    }

    #[test]
    fn mean_se_basics() {
        let (m, se) = mean_se(&[2.0, 4.0, 6.0, 8.0]);
        assert!((m - 5.0).abs() < 1e-12);
        // sample sd = sqrt(20/3), se = sd / 2
        assert!((se - (20.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        let (m1, se1) = mean_se(&[3.5]);
        assert_eq!((m1, se1), (3.5, 0.0));
    }
}
