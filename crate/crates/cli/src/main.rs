use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use odlqr_core::harness::{
    export, export_comparison, load_config, monte_carlo, topology_comparison, ExperimentConfig, MonteCarloResult, NetworkSpec,
    RunOptions, AVG_REGRET,
};

/// Averaged regret reported for T = 20K..60K, in units of 1e-4.
const PUBLISHED_REGRET: [(usize, f64); 5] = [(20_000, 1.424), (30_000, 1.34), (40_000, 1.248), (50_000, 1.201), (60_000, 1.168)];

#[derive(Parser, Debug)]
#[command(name = "odlqr", version, about = "Distributed online LQR experiments with unknown dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo run of one configuration.
    Run(Common),
    /// Net A / Net B / Net C comparison with shared seeds.
    Sweep(Common),
    /// Averaged regret at the published horizons.
    Table1(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; a previous run_meta.json also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Full-scale profile: 50 trials, and all five horizons up to 60000 for table1.
    #[arg(long)]
    full: bool,
    /// Writes per-trial exploration, EXTRA, Dykstra and controller traces.
    #[arg(long)]
    debug_dumps: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Common {
    fn base_config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if self.full {
            c.trials = 50;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.trials {
            c.trials = t;
        }
        if let Some(h) = self.horizon {
            c.horizon = h;
        }
        Ok(c)
    }

    fn options(&self) -> RunOptions {
        RunOptions { debug_dumps: self.debug_dumps, threads: self.threads }
    }
}

fn print_summary(label: &str, r: &MonteCarloResult) {
    println!("{label}: T = {}, trials = {}, T0 = {}, T_s = {:?}", r.config.horizon, r.aggregate.trials, r.derived.t0, r.derived.t_s);
    for m in &r.aggregate.metrics {
        match m.stderr {
            Some(se) => println!("  {:<26} {:>14.6e} ± {:.3e}", m.name, m.mean, se),
            None => println!("  {:<26} {:>14.6e}", m.name, m.mean),
        }
    }
}

fn run(args: &Common) -> Result<()> {
    let cfg = args.base_config()?;
    let start = Instant::now();
    let r = monte_carlo(&cfg, args.options())?;
    export(&r, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    print_summary("run", &r);
    println!("wrote {} in {:.1?}", args.out.display(), start.elapsed());
    Ok(())
}

fn sweep(args: &Common) -> Result<()> {
    let cfg = args.base_config()?;
    let nets = vec![
        ("net_a".to_string(), NetworkSpec::net_a()),
        ("net_b".to_string(), NetworkSpec::net_b()),
        ("net_c".to_string(), NetworkSpec::net_c()),
    ];
    let start = Instant::now();
    let results = topology_comparison(&cfg, &nets, args.options())?;
    export_comparison(&results, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{:<8} {:>10} {:>16} {:>12}", "network", "beta", "avg_regret", "stderr");
    for (label, r) in &results {
        let m = r.aggregate.get(AVG_REGRET).expect("averaged regret is always aggregated");
        println!("{label:<8} {:>10.6} {:>16.6e} {:>12.3e}", r.derived.beta, m.mean, m.stderr.unwrap_or(f64::NAN));
    }
    println!("wrote {} in {:.1?}", args.out.display(), start.elapsed());
    Ok(())
}

fn table1(args: &Common) -> Result<()> {
    let cfg = args.base_config()?;
    let horizons: Vec<usize> = match (args.horizon, args.full) {
        (Some(h), _) => vec![h],
        (None, true) => PUBLISHED_REGRET.iter().map(|(t, _)| *t).collect(),
        (None, false) => vec![PUBLISHED_REGRET[0].0],
    };
    let start = Instant::now();
    let path = args.out.join("table1.csv");
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["horizon", "mean", "stderr", "trials", "published_mean"])?;
    println!("{:>8} {:>16} {:>12} {:>7} {:>12}", "T", "avg_regret", "stderr", "trials", "published");
    for h in horizons {
        let r = monte_carlo(&ExperimentConfig { horizon: h, ..cfg.clone() }, args.options())?;
        export(&r, &args.out.join(format!("T{h}")))?;
        let m = r.aggregate.get(AVG_REGRET).expect("averaged regret is always aggregated");
        let published = PUBLISHED_REGRET.iter().find(|(t, _)| *t == h).map(|(_, v)| v * 1e-4);
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        w.write_record([h.to_string(), format!("{:e}", m.mean), fmt(m.stderr), m.trials.to_string(), fmt(published)])?;
        println!(
            "{h:>8} {:>16.6e} {:>12.3e} {:>7} {:>12}",
            m.mean,
            m.stderr.unwrap_or(f64::NAN),
            m.trials,
            published.map_or("-".into(), |p| format!("{p:.3e}"))
        );
    }
    w.flush()?;
    println!("wrote {} in {:.1?}", args.out.display(), start.elapsed());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Table1(a) => table1(a),
    }
}
