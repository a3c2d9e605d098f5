use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use osptrade::bic::{choice_value_report, FiniteTypeModel, GridKind};
use osptrade::choice::{check_choice_conditions, constant_mechanism_slack, find_bilateral, verify_bilateral, ProbMethod};
use osptrade::geometry::{check_polarized_menu, Ray};
use osptrade::large_market::{pure_mixture, recover_primal, replica_sweep, solve_dual, DualConfig, SearchConfig};
use osptrade::mechanisms::{
    essential_reduction, load_protocol, myopic_strategies, simulate_mechanism, tabulate, two_ray_protocol,
    verify_osp_bruteforce, verify_osp_structural, TradingProtocol,
};
use osptrade::report::{to_json_string, write_report, RunManifest};
use osptrade::scenario::{cube_corners, load_scenario, Scenario};
use osptrade::{Error, Result};

#[derive(Parser)]
#[command(name = "osptrade", version, about = "Obviously strategy-proof trading mechanisms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, serde::Serialize)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo draws.
    #[arg(long, global = true, default_value_t = 100_000)]
    samples: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value_t = 1e-9)]
    tol: f64,
    /// Directory for report files and the run manifest; stdout otherwise.
    #[arg(long, global = true)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Emit only the CSV table where the subcommand has one.
    #[arg(long, global = true)]
    csv_only: bool,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
enum Grid {
    Corners,
    #[value(name = "corners+center")]
    CornersCenter,
}

#[derive(Subcommand)]
enum Command {
    /// Conditions under which choice can beat the status quo.
    Check { scenario: PathBuf },
    /// Search for and evaluate an improving bilateral trade.
    Bilateral {
        scenario: PathBuf,
        /// Force Monte Carlo probabilities even when exact ones exist.
        #[arg(long)]
        monte_carlo: bool,
    },
    /// Check a protocol (with --scenario) or a bare ray menu for OSP.
    VerifyOsp {
        file: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Monte Carlo cost of a protocol under myopic play.
    Simulate {
        scenario: PathBuf,
        /// Protocol file; the two-ray protocol by default.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Exact BIC benchmark on a finite type grid.
    Bic {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "corners")]
        grid: Grid,
    },
    /// Solve the large-market program by its dual.
    LmSolve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 64)]
        restarts: usize,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
    },
    /// Replica-economy convergence of fixed menus.
    Replica {
        scenario: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long = "N-list", value_delimiter = ',', default_value = "1,2,5,10,25,50")]
        n_list: Vec<usize>,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

struct Output {
    name: &'static str,
    json: Value,
    csv: Option<String>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))
}

fn scenario_at(path: &Path) -> Result<(Scenario, Vec<u8>)> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Validation("input is not UTF-8".into()))?;
    Ok((load_scenario(&text)?, bytes))
}

fn protocol_or_default(path: Option<&Path>, s: &Scenario) -> Result<TradingProtocol> {
    match path {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| Error::Validation("protocol is not UTF-8".into()))?;
            load_protocol(&text, s)
        }
        None => two_ray_protocol(s),
    }
}

#[derive(serde::Deserialize)]
struct BareMenu {
    endpoint: Vec<f64>,
    rays: Vec<Vec<f64>>,
}

fn run(cmd: &Command, c: &Common, workers: usize) -> Result<(Output, Vec<u8>)> {
    match cmd {
        Command::Check { scenario } => {
            let (s, bytes) = scenario_at(scenario)?;
            let diag = check_choice_conditions(&s);
            let slack = constant_mechanism_slack(&s).ok();
            let json = json!({ "diagnostics": diag, "constant_slack": slack });
            Ok((Output { name: "check", json, csv: None }, bytes))
        }
        Command::Bilateral { scenario, monte_carlo } => {
            let (s, bytes) = scenario_at(scenario)?;
            let method = if *monte_carlo { ProbMethod::MonteCarlo } else { ProbMethod::Auto };
            let json = match find_bilateral(&s)? {
                Some(m) => {
                    let r = verify_bilateral(&m, &s, method, c.samples, c.seed)?;
                    json!({ "mechanism": m, "report": r })
                }
                None => json!({ "mechanism": null, "report": null }),
            };
            Ok((Output { name: "bilateral", json, csv: None }, bytes))
        }
        Command::VerifyOsp { file, scenario } => {
            let file_bytes = read(file)?;
            let text = String::from_utf8(file_bytes.clone()).map_err(|_| Error::Validation("input is not UTF-8".into()))?;
            match scenario {
                None => {
                    let menu: BareMenu = serde_json::from_str(&text)?;
                    let rays: Vec<Ray> = menu.rays.iter().map(|k| Ray::new(menu.endpoint.clone(), k.clone())).collect();
                    let report = check_polarized_menu(&rays)?;
                    let json = json!({ "verdict": report.verdict, "failed_clauses": report.failed_clauses(), "report": report });
                    Ok((Output { name: "verify-osp", json, csv: None }, file_bytes))
                }
                Some(sp) => {
                    let (s, _) = scenario_at(sp)?;
                    let p = load_protocol(&text, &s)?;
                    let reduced = essential_reduction(&tabulate(&p, &s)?)?;
                    let structural = verify_osp_structural(&reduced)?;
                    let grids: Vec<Vec<Vec<f64>>> = s.agents.iter().map(|a| cube_corners(&a.pref_lo, &a.pref_hi)).collect();
                    let strategy = myopic_strategies(&reduced);
                    let brute = verify_osp_bruteforce(&reduced, &grids, &strategy)?;
                    let json = json!({ "verdict": structural.ok, "structural": structural, "bruteforce_corners": brute });
                    Ok((Output { name: "verify-osp", json, csv: None }, file_bytes))
                }
            }
        }
        Command::Simulate { scenario, protocol } => {
            let (s, bytes) = scenario_at(scenario)?;
            let p = protocol_or_default(protocol.as_deref(), &s)?;
            let stats = simulate_mechanism(&s, &p, c.samples, c.seed, workers)?;
            Ok((Output { name: "simulate", json: serde_json::to_value(stats)?, csv: None }, bytes))
        }
        Command::Bic { scenario, grid } => {
            let (s, bytes) = scenario_at(scenario)?;
            let kind = match grid {
                Grid::Corners => GridKind::Corners,
                Grid::CornersCenter => GridKind::CornersCenter,
            };
            let model = FiniteTypeModel::from_scenario(&s, kind);
            let (report, sol) = choice_value_report(&s, &model)?;
            let json = json!({ "report": report, "value": sol.value, "binding": sol.binding, "max_violation": sol.max_violation });
            Ok((Output { name: "bic", json, csv: Some(sol.table_csv()) }, bytes))
        }
        Command::LmSolve { scenario, restarts, iterations } => {
            let (s, bytes) = scenario_at(scenario)?;
            let cfg = DualConfig {
                iterations: *iterations,
                search: SearchConfig {
                    restarts: *restarts,
                    samples: c.samples as usize,
                    seed: c.seed,
                    ..SearchConfig::default()
                },
                ..DualConfig::default()
            };
            let d = solve_dual(&s, &cfg)?;
            let r = recover_primal(&d, &s)?;
            let per_agent_menus: Vec<Value> = r
                .menus
                .iter()
                .map(|opts| Value::Array(opts.iter().map(|(m, w)| json!({ "weight": w, "menu": m })).collect()))
                .collect();
            let json = json!({
                "lambda": d.lambda,
                "dual_value": d.value,
                "primal_value": r.objective,
                "gap": r.gap,
                "relative_gap": r.relative_gap,
                "clearing_residual": r.residual,
                "allocation": r.x,
                "per_agent_menus": per_agent_menus,
                "exact_probabilities": d.exact,
                "search_budget_exhausted": d.budget_exhausted,
            });
            Ok((Output { name: "lm-solve", json, csv: None }, bytes))
        }
        Command::Replica { scenario, protocol, n_list, seeds } => {
            let (s, bytes) = scenario_at(scenario)?;
            let p = protocol_or_default(protocol.as_deref(), &s)?;
            let seed_list: Vec<u64> = (0..*seeds).map(|k| c.seed + k).collect();
            let cfg = SearchConfig {
                samples: c.samples as usize,
                seed: c.seed,
                ..SearchConfig::default()
            };
            let sweep = replica_sweep(&s, &pure_mixture(&p.menus), n_list, &seed_list, &cfg)?;
            let csv = sweep.to_csv();
            let json = json!({ "v_inf": sweep.v_inf, "summary": sweep.summary });
            Ok((Output { name: "replica", json, csv: Some(csv) }, bytes))
        }
    }
}

fn config_of(cmd: &Command, c: &Common) -> Value {
    let sub = match cmd {
        Command::Check { .. } => json!({}),
        Command::Bilateral { monte_carlo, .. } => json!({ "monte_carlo": monte_carlo }),
        Command::VerifyOsp { scenario, .. } => json!({ "with_scenario": scenario.is_some() }),
        Command::Simulate { protocol, .. } => json!({ "protocol": protocol }),
        Command::Bic { grid, .. } => json!({ "grid": grid }),
        Command::LmSolve { restarts, iterations, .. } => json!({ "restarts": restarts, "iterations": iterations }),
        Command::Replica { protocol, n_list, seeds, .. } => {
            json!({ "protocol": protocol, "n_list": n_list, "seeds": seeds })
        }
    };
    json!({ "common": c, "subcommand": sub })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = cli.common.clone();
    let workers = c
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    // Only the first call can configure the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    let started = Instant::now();
    match run(&cli.command, &c, workers).and_then(|(out, bytes)| emit(&cli.command, &c, workers, out, &bytes, started)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit(cmd: &Command, c: &Common, workers: usize, out: Output, input: &[u8], started: Instant) -> Result<()> {
    let payload = to_json_string(&out.json)?;
    match &c.out {
        None => {
            match (&out.csv, c.csv_only) {
                (Some(csv), true) => print!("{csv}"),
                _ => print!("{payload}"),
            }
            Ok(())
        }
        Some(dir) => {
            let mut files = Vec::new();
            if !(c.csv_only && out.csv.is_some()) {
                files.push((format!("{}.json", out.name), payload));
            }
            if let Some(csv) = out.csv {
                files.push((format!("{}.csv", out.name), csv));
            }
            let mut manifest = RunManifest::new(out.name, input, c.seed, workers, config_of(cmd, c));
            manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            write_report(dir, &files, &manifest)?;
            Ok(())
        }
    }
}
