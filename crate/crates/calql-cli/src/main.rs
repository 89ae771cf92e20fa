use calql::data::save_dataset_csv;
use calql::harness::{
    build_dataset, emit_plot_data, emit_regret_plot_data, parse_seeds, run_experiment, sweep, write_plot_data, ExperimentConfig,
    HarnessError, RunLog,
};
use calql::theory::{near_optimal_instance, read_regret_csv, regret_decomposition, run_calibrated_fqi, write_regret_csv, FqiConfig, TheoryError};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "calql", about = "Offline-to-online CQL / Cal-QL experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Scripted,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// One seed of a config; writes log.jsonl and the agent checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Several seeds in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `a..b` (inclusive) or a comma list; defaults to the config's run.seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Writes `seed_<n>/log.jsonl` here when given.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generates an offline dataset CSV on a maze.
    GenData {
        /// Layout file, or an inline layout with rows separated by '|'.
        #[arg(long)]
        env: String,
        #[arg(long, value_enum)]
        policy: Policy,
        /// Number of trajectories.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Start each trajectory from a uniformly drawn free cell.
        #[arg(long)]
        uniform_start: bool,
        #[arg(long, default_value = "narrow")]
        composition: String,
    },
    /// Aggregates run logs and regret tables under a directory into plot CSVs.
    PlotData {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrated FQI on a small finite-horizon MDP; prints the regret table.
    Theory {
        /// `near-optimal[:EPS[:EPISODES]]`.
        #[arg(long)]
        mdp: String,
        #[arg(long, value_enum)]
        calibrate: Switch,
        #[arg(long = "K")]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Online episodes per iteration.
        #[arg(long, default_value_t = 1)]
        online: usize,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<TheoryError> for Failure {
    fn from(e: TheoryError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_file(path).map_err(|e| Failure::Config(e.to_string()))
}

fn final_score(log: &RunLog) -> f64 {
    log.records().last().map_or(0.0, |r| r.normalized_score)
}

fn cmd_run(config: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let run = run_experiment(&cfg, seed)?;
    std::fs::create_dir_all(out)?;
    run.log.write(&out.join("log.jsonl"))?;
    run.agent.save(&out.join("agent")).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("seed {seed} hash {} final_score {:.3}", run.log.hash(), final_score(&run.log));
    Ok(())
}

fn cmd_sweep(config: &Path, seeds: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s).map_err(Failure::Config)?,
        None => cfg.seeds.clone(),
    };
    let mut failed = Vec::new();
    for (seed, res) in sweep(&cfg, &seeds) {
        match res {
            Ok(log) => {
                if let Some(dir) = out {
                    let d = dir.join(format!("seed_{seed}"));
                    std::fs::create_dir_all(&d)?;
                    log.write(&d.join("log.jsonl"))?;
                }
                println!("seed {seed} hash {} final_score {:.3}", log.hash(), final_score(&log));
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                failed.push(seed);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} seeds failed", failed.len(), seeds.len())))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    env: &str,
    policy: Policy,
    n: usize,
    out: &Path,
    epsilon: f64,
    seed: u64,
    gamma: f64,
    uniform_start: bool,
    composition: &str,
) -> Result<(), Failure> {
    let layout_line = if !env.contains('|') && Path::new(env).is_file() {
        let p = std::fs::canonicalize(env)?;
        format!("layout_file = {}", p.display())
    } else {
        format!("layout = {env}")
    };
    let policy = match policy {
        Policy::Scripted => "scripted",
        Policy::Random => "random",
    };
    let start = if uniform_start { "uniform" } else { "fixed" };
    let text = format!(
        "[env]\n{layout_line}\n[data]\npolicy = {policy}\nepsilon = {epsilon}\ntrajectories = {n}\nstart = {start}\ncomposition = {composition}\n[agent]\nkind = cql\ngamma = {gamma}\n"
    );
    let cfg = ExperimentConfig::parse(&text, None).map_err(|e| Failure::Config(e.to_string()))?;
    let ds = build_dataset(&cfg, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset_csv(&ds, out).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{} transitions from {} trajectories, success {:.3}", ds.len(), ds.n_trajectories(), ds.success_fraction());
    Ok(())
}

fn collect_files(dir: &Path, ext: &str, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, ext, acc)?;
        } else if p.extension().is_some_and(|x| x == ext) {
            acc.push(p);
        }
    }
    Ok(())
}

fn cmd_plot_data(runs: &Path, out: &Path) -> Result<(), Failure> {
    let mut logs_paths = Vec::new();
    collect_files(runs, "jsonl", &mut logs_paths)?;
    let logs = logs_paths.iter().map(|p| RunLog::read(p)).collect::<Result<Vec<_>, _>>()?;

    let mut csv_paths = Vec::new();
    collect_files(runs, "csv", &mut csv_paths)?;
    let mut regret = Vec::new();
    for p in csv_paths.iter().filter(|p| !p.starts_with(out)) {
        // Other CSVs (datasets, earlier plot output) are skipped.
        if let Ok(rows) = read_regret_csv(std::fs::File::open(p)?) {
            regret.push(rows);
        }
    }
    if logs.is_empty() && regret.is_empty() {
        return Err(Failure::Runtime(format!("no run logs or regret tables under {}", runs.display())));
    }
    if !logs.is_empty() {
        let bundle = emit_plot_data(&logs);
        bundle.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
        write_plot_data(&bundle, out)?;
    }
    if !regret.is_empty() {
        let bundle = emit_regret_plot_data(&regret);
        bundle.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
        write_plot_data(&bundle, &out.join("regret"))?;
    }
    println!("{} run logs, {} regret tables", logs.len(), regret.len());
    Ok(())
}

fn parse_mdp_spec(spec: &str) -> Result<(f64, usize), Failure> {
    let mut parts = spec.split(':');
    if parts.next() != Some("near-optimal") {
        return Err(Failure::Config(format!("unknown mdp spec {spec:?}; expected near-optimal[:EPS[:EPISODES]]")));
    }
    let eps = match parts.next() {
        Some(x) => x.parse::<f64>().map_err(|e| Failure::Config(format!("eps: {e}")))?,
        None => 0.1,
    };
    let episodes = match parts.next() {
        Some(x) => x.parse::<usize>().map_err(|e| Failure::Config(format!("episodes: {e}")))?,
        None => 2,
    };
    if parts.next().is_some() || !(0.0..=1.0).contains(&eps) {
        return Err(Failure::Config(format!("bad mdp spec {spec:?}")));
    }
    Ok((eps, episodes))
}

fn cmd_theory(mdp: &str, calibrate: Switch, k: usize, seed: u64, online: usize, out: Option<&Path>) -> Result<(), Failure> {
    let (eps, episodes) = parse_mdp_spec(mdp)?;
    if k == 0 {
        return Err(Failure::Config("--K must be at least 1".into()));
    }
    let calibrate = matches!(calibrate, Switch::On);
    let inst = near_optimal_instance(seed, eps, episodes)?;
    let cfg = FqiConfig { iterations: k, online_per_iteration: online, calibrate, pessimistic_bound: None, seed };
    let history = run_calibrated_fqi(&inst.mdp, &inst.offline, &inst.reference, &cfg)?;
    let rows = regret_decomposition(&inst.mdp, &history)?;
    write_regret_csv(std::io::stdout().lock(), &rows, calibrate, seed)?;
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_regret_csv(std::fs::File::create(p)?, &rows, calibrate, seed)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { config, seed, out } => cmd_run(config, *seed, out),
        Cmd::Sweep { config, seeds, out } => cmd_sweep(config, seeds.as_deref(), out.as_deref()),
        Cmd::GenData { env, policy, n, out, epsilon, seed, gamma, uniform_start, composition } => {
            cmd_gen_data(env, *policy, *n, out, *epsilon, *seed, *gamma, *uniform_start, composition)
        }
        Cmd::PlotData { runs, out } => cmd_plot_data(runs, out),
        Cmd::Theory { mdp, calibrate, k, seed, online, out } => cmd_theory(mdp, *calibrate, *k, *seed, *online, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
