use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use deadline_core::experiment::{
    bundle_for, emit_csv, format_real, parse_config, policies_at_prices, run_sweep, summarize,
    Experiment, FIG3_CONFIG,
};
use deadline_core::net_model::{Route, ValidatedSpec};
use deadline_core::oracle::cross_validate;
use deadline_core::packet_dp::{policy_from_table, solve_value_table, PriceVector, TieRule};
use deadline_core::policies::PolicyKind;
use deadline_core::price_learner::{run_online_iteration, IterationRecord, StepSchedule};
use deadline_core::sim_engine::{metrics_summary, run_with_observer, Simulator};

#[derive(Parser)]
#[command(name = "deadline", version, about = "Deadline-constrained multihop scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults to the bundled `configs/fig3.json`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a node budget, e.g. `--budget s1=50`. Repeatable.
    #[arg(long, value_name = "NODE=VALUE")]
    budget: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Offline,
    Online,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the per-packet DP for one chain route and print the table.
    SolveDp {
        /// Per-hop link reliabilities, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        reliabilities: Vec<f64>,
        /// Per-hop prices at the tail nodes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        prices: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        deadline: usize,
        /// `idle`, `attempt`, or a probability in [0, 1].
        #[arg(long, default_value = "idle")]
        tie: String,
    },
    /// Learn node prices; prints one CSV line per iteration.
    TrainPrices {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Mode::Offline)]
        mode: Mode,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        a0: Option<f64>,
        #[arg(long = "exp")]
        exponent: Option<f64>,
        /// Simulator seed (online mode).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measurement slots per online update.
        #[arg(long, default_value_t = 1000)]
        window: u64,
        /// Unmeasured slots after each online price change; defaults to the
        /// longest deadline.
        #[arg(long)]
        settle: Option<u64>,
        /// Write final prices to this JSON file.
        #[arg(long)]
        prices_out: Option<PathBuf>,
    },
    /// Run one policy and print the metrics as JSON.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "dual")]
        policy: PolicyKind,
        /// Prices JSON for the dual policy; trained from the config if absent.
        #[arg(long)]
        prices: Option<PathBuf>,
        #[arg(long)]
        slots: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write per-slot counts to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the config's capacity sweep and write the result CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare the DP with brute-force enumeration on random instances.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        max_hops: usize,
        #[arg(long, default_value_t = 5)]
        max_deadline: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PricesFile {
    Keyed { prices: Vec<f64> },
    Bare(Vec<f64>),
}

impl PricesFile {
    fn into_vec(self) -> Vec<f64> {
        match self {
            PricesFile::Keyed { prices } | PricesFile::Bare(prices) => prices,
        }
    }
}

fn load_experiment(args: &ConfigArgs) -> Result<Experiment> {
    let text = match &args.config {
        Some(path) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => FIG3_CONFIG.to_string(),
    };
    let mut exp = parse_config(&text).context("invalid config")?;
    for entry in &args.budget {
        let Some((node, value)) = entry.split_once('=') else {
            bail!("--budget expects NODE=VALUE, got `{entry}`");
        };
        let id = exp
            .config
            .network
            .resolve_node(node)
            .with_context(|| format!("unknown node `{node}`"))?;
        let value: f64 = value.parse().with_context(|| format!("bad budget `{value}`"))?;
        exp.spec = exp.spec.with_budget(id, value)?;
        exp.config.network = exp.spec.spec().clone();
    }
    Ok(exp)
}

fn load_prices(path: &Path) -> Result<PriceVector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PricesFile = serde_json::from_str(&text).context("prices file")?;
    Ok(PriceVector::new(file.into_vec())?)
}

fn node_labels(spec: &ValidatedSpec) -> Vec<String> {
    spec.nodes()
        .iter()
        .map(|n| n.name.clone().unwrap_or_else(|| n.id.0.to_string()))
        .collect()
}

fn write_trace(out: &mut impl Write, spec: &ValidatedSpec, trace: &[IterationRecord]) -> Result<()> {
    let labels = node_labels(spec);
    let mut header = vec!["k".to_string()];
    header.extend(labels.iter().map(|l| format!("lambda_{l}")));
    header.extend(labels.iter().map(|l| format!("g_{l}")));
    header.push("dual".into());
    writeln!(out, "{}", header.join(","))?;
    for rec in trace {
        let mut line = vec![rec.k.to_string()];
        line.extend(rec.prices.iter().copied().map(format_real));
        line.extend(rec.gradient.iter().copied().map(format_real));
        line.push(format_real(rec.dual));
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

fn parse_tie(s: &str) -> Result<TieRule> {
    Ok(match s {
        "idle" => TieRule::Idle,
        "attempt" => TieRule::Attempt,
        q => {
            let q: f64 = q.parse().with_context(|| format!("bad tie rule `{q}`"))?;
            if !(0.0..=1.0).contains(&q) {
                bail!("tie probability must be in [0, 1]");
            }
            TieRule::Probability(q)
        }
    })
}

fn solve_dp(reliabilities: &[f64], prices: &[f64], alpha: f64, deadline: usize, tie: &str) -> Result<()> {
    if reliabilities.len() != prices.len() {
        bail!("need one price per hop");
    }
    let route = Route::chain(reliabilities);
    // chain nodes are 0..=L; the destination carries no charge
    let mut lambda = prices.to_vec();
    lambda.push(0.0);
    let vt = solve_value_table(&route, alpha, &PriceVector::new(lambda)?, deadline)?;
    let pt = policy_from_table(&vt, parse_tie(tie)?);
    let mut out = std::io::stdout().lock();
    writeln!(out, "hop,time_to_go,value,phi")?;
    for i in 1..=route.len() + 1 {
        for s in 0..=deadline {
            let phi = if i <= route.len() { pt.phi(i, s) } else { 0.0 };
            writeln!(out, "{i},{s},{},{}", format_real(vt.value(i, s)), format_real(phi))?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_prices(
    cfg: &ConfigArgs,
    mode: Mode,
    iters: Option<usize>,
    a0: Option<f64>,
    exponent: Option<f64>,
    seed: u64,
    window: u64,
    settle: Option<u64>,
    prices_out: Option<&Path>,
) -> Result<()> {
    let exp = load_experiment(cfg)?;
    let spec = &exp.spec;
    let mut training = exp.config.training.clone();
    if let Some(k) = iters {
        training.iters = k;
    }
    if a0.is_some() {
        training.a0 = a0;
    }
    if let Some(e) = exponent {
        training.exponent = e;
    }
    let schedule: StepSchedule = training.schedule(spec);
    let init = PriceVector::zeros(spec.num_nodes());
    let (prices, trace) = match mode {
        Mode::Offline => {
            let outcome = training.train(spec, init)?;
            if let Some(k) = outcome.converged_at {
                eprintln!("converged after {k} iterations");
            }
            (outcome.state.prices, outcome.trace)
        }
        Mode::Online => {
            let tables = policies_at_prices(spec, &init, false)?.0;
            let mut sim = Simulator::new(spec, bundle_for(PolicyKind::Dual, spec, Some(&tables))?, seed)?;
            let settle = settle.unwrap_or(spec.max_deadline() as u64);
            let outcome =
                run_online_iteration(spec, &mut sim, init, window, settle, schedule, training.iters)?;
            (outcome.state.prices, outcome.trace)
        }
    };
    write_trace(&mut std::io::stdout().lock(), spec, &trace)?;
    if let Some(path) = prices_out {
        let body = serde_json::to_string_pretty(&PricesFile::Keyed { prices: prices.lambda })?;
        fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn simulate(
    cfg: &ConfigArgs,
    policy: PolicyKind,
    prices: Option<&Path>,
    slots: Option<u64>,
    seed: u64,
    trace: Option<&Path>,
) -> Result<()> {
    let exp = load_experiment(cfg)?;
    let spec = &exp.spec;
    let tables = match (policy, prices) {
        (PolicyKind::Dual, Some(path)) => Some(policies_at_prices(spec, &load_prices(path)?, true)?.0),
        (PolicyKind::Dual, None) => {
            let init = PriceVector::zeros(spec.num_nodes());
            Some(exp.config.training.train(spec, init)?.policies)
        }
        _ => None,
    };
    let bundle = bundle_for(policy, spec, tables.as_deref())?;
    let slots = slots.unwrap_or(exp.config.slots);

    let mut trace_out = match trace {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
            let mut header = vec!["slot".to_string(), "arrivals".into(), "delivered".into(), "dropped".into()];
            header.extend(node_labels(spec).iter().map(|l| format!("attempts_{l}")));
            w.write_record(&header)?;
            Some(w)
        }
        None => None,
    };
    let mut trace_err = None;
    let metrics = run_with_observer(spec, bundle, slots, seed, |ev| {
        let Some(w) = trace_out.as_mut() else { return };
        let mut rec = vec![
            ev.slot.to_string(),
            ev.arrivals.iter().sum::<u64>().to_string(),
            ev.delivered.iter().sum::<u64>().to_string(),
            ev.dropped.iter().sum::<u64>().to_string(),
        ];
        rec.extend(ev.attempts.iter().map(u64::to_string));
        if let Err(e) = w.write_record(&rec) {
            trace_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e.into());
    }
    if let Some(mut w) = trace_out {
        w.flush()?;
    }
    let report = metrics_summary(&metrics, spec)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(cfg: &ConfigArgs, out: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let exp = load_experiment(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    let rows = pool.install(|| run_sweep(&exp))?;
    let text = emit_csv(&exp.spec, &rows)?;
    match out {
        Some(path) => fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    for s in summarize(&rows) {
        eprintln!(
            "{:>10} {:<6} {:>12.4} ± {:.4}",
            s.sweep_value, s.policy, s.mean, s.std_error
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SolveDp {
            reliabilities,
            prices,
            alpha,
            deadline,
            tie,
        } => solve_dp(&reliabilities, &prices, alpha, deadline, &tie),
        Command::TrainPrices {
            cfg,
            mode,
            iters,
            a0,
            exponent,
            seed,
            window,
            settle,
            prices_out,
        } => train_prices(&cfg, mode, iters, a0, exponent, seed, window, settle, prices_out.as_deref()),
        Command::Simulate {
            cfg,
            policy,
            prices,
            slots,
            seed,
            trace,
        } => simulate(&cfg, policy, prices.as_deref(), slots, seed, trace.as_deref()),
        Command::Sweep { cfg, out, threads } => sweep(&cfg, out.as_deref(), threads),
        Command::OracleCheck {
            instances,
            max_hops,
            max_deadline,
            seed,
        } => {
            let report = cross_validate(instances, max_hops, max_deadline, seed)?;
            println!(
                "instances={} max_discrepancy={:e}",
                report.instances, report.max_discrepancy
            );
            if report.max_discrepancy > 1e-12 {
                bail!("DP and enumeration disagree: worst {:?}", report.worst);
            }
            Ok(())
        }
    }
}
