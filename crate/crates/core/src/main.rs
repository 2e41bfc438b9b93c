use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cloakrule::bench::{self, BenchConfig};
use cloakrule::broker::{self, BrokerClient, BrokerConfig};
use cloakrule::config::Config;
use cloakrule::device::{emission_csv, run_fleet};
use cloakrule::enclave::{group_by_trigger_device, CachePolicy, Mode, TrustedBoundary};
use cloakrule::error::{Error, Result};
use cloakrule::node::{self, EnclaveNode, HubNode};
use cloakrule::rule::{self, DeviceEvent};
use cloakrule::trace::{self, fixture};

#[derive(Parser)]
#[command(name = "cloakrule", version, about = "End-to-end encrypted trigger-action rule engine")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Broker address; overrides the config file and CLOAKRULE_BROKER.
    #[arg(long, global = true)]
    broker: Option<String>,
    /// Boundary mode: plain, trusted-no-enc or full. `bench` also accepts
    /// `all` or a comma-separated list.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one component until interrupted.
    Run {
        component: Component,
        /// Events the fleet emits (fleet only).
        #[arg(long)]
        events: Option<usize>,
        /// Write the fleet's emission log here as CSV.
        #[arg(long)]
        emission_log: Option<PathBuf>,
    },
    /// Validate or provision a ruleset file.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
    /// Per-event latency benchmark across modes and ruleset sizes.
    Bench(BenchArgs),
    /// Access-trace distinguishability analysis.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Broker,
    Enclave,
    Hub,
    Fleet,
}

#[derive(Subcommand)]
enum RulesAction {
    /// Parse and report; never contacts the broker.
    Validate { file: PathBuf },
    /// Encrypt, publish on prov/rules and wait for the count acknowledgement.
    Provision {
        file: PathBuf,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Ruleset sizes.
    #[arg(long, value_delimiter = ',', default_values_t = bench::RULESET_SIZES)]
    rules: Vec<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_DEVICES)]
    devices: usize,
    /// Events per run [default: 2000, or the fleet's count with --e2e].
    #[arg(long)]
    events: Option<usize>,
    /// Cache capacity.
    #[arg(long, default_value_t = cloakrule::enclave::DEFAULT_CAPACITY)]
    cache: usize,
    #[arg(long, default_value = "lru")]
    policy: String,
    /// Boundary crossing cost in microseconds.
    #[arg(long, default_value_t = 2)]
    transition_us: u64,
    /// Parallel workers (events of one device stay on one worker).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run modes one after another instead of alternating per event.
    #[arg(long)]
    sequential: bool,
    /// Measure execution and network delay through a local broker for this
    /// ruleset, using the fleet from --config, instead of the sweep.
    #[arg(long, value_name = "RULESET")]
    e2e: Option<PathBuf>,
    /// Directory for bench.csv (delay.csv with --e2e).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Built-in fixture. Ignored when --set is given.
    #[arg(long, default_value = "table2")]
    fixture: String,
    /// Number of seeded runs of the fixture.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Ruleset for custom event sets.
    #[arg(long, requires = "sets")]
    rules: Option<PathBuf>,
    /// Custom event set as NAME=FILE (a JSON array of events); repeatable.
    #[arg(long = "set", value_name = "NAME=FILE")]
    sets: Vec<String>,
    /// Scores below this are flagged as indistinguishable.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Directory for the score matrices and trace dumps.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mode_is_list = matches!(cli.command, Command::Bench(_));
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env();
    if let Some(b) = &cli.broker {
        cfg.broker = b.clone();
    }
    if let Some(m) = cli.mode.as_ref().filter(|_| !mode_is_list) {
        cfg.mode = m.parse()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn shutdown_flag() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || f.store(true, Ordering::SeqCst))
        .map_err(|e| Error::Config(format!("cannot install signal handler: {e}")))?;
    Ok(flag)
}

fn wait_until(flag: &AtomicBool, mut done: impl FnMut() -> bool) {
    while !flag.load(Ordering::SeqCst) && !done() {
        thread::sleep(Duration::from_millis(100));
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Run {
            component,
            events,
            emission_log,
        } => run_component(&cfg, component, events, emission_log.as_deref()),
        Command::Rules { action } => rules_cmd(&cfg, action),
        Command::Bench(args) => match args.e2e.clone() {
            Some(ruleset) => delay_cmd(&cfg, cli.mode.as_deref(), &ruleset, args),
            None => bench_cmd(cli.mode.as_deref(), cli.seed, args),
        },
        Command::Trace(args) => trace_cmd(&cfg, cli.mode.is_some(), cli.seed, args),
    }
}

fn run_component(
    cfg: &Config,
    component: Component,
    events: Option<usize>,
    emission_log: Option<&Path>,
) -> Result<()> {
    match component {
        Component::Broker => {
            let stop = shutdown_flag()?;
            let mut handle = broker::bind(&cfg.broker, BrokerConfig::default())?;
            println!("broker listening on {}", handle.local_addr());
            wait_until(&stop, || false);
            handle.shutdown();
        }
        Component::Enclave => {
            let stop = shutdown_flag()?;
            let mut node = EnclaveNode::start(cfg)?;
            println!("enclave {} running in {} mode", cfg.enclave_id, cfg.mode);
            wait_until(&stop, || node.is_finished());
            node.stop();
            let c = node.boundary.counters();
            println!(
                "handled {} events, {} authentication failures",
                c.events, c.auth_failures
            );
        }
        Component::Hub => {
            let stop = shutdown_flag()?;
            let hub = Arc::new(node::hub_from_config(cfg)?);
            let ks = if cfg.mode == Mode::Full {
                Some(Arc::new(node::key_server_from_config(cfg)?))
            } else {
                None
            };
            let mut hub_node = HubNode::start(&cfg.broker, &cfg.enclave_id, hub.clone(), ks)?;
            println!("hub running for {} actuator(s)", hub.actuator_devices().len());
            wait_until(&stop, || false);
            hub_node.stop();
            for d in hub.actuator_devices() {
                if let Some(s) = hub.actuator(&d) {
                    println!("{d}: {}", serde_json::to_string(&s.attributes).unwrap_or_default());
                }
            }
            let c = hub.counters();
            println!("applied {} command(s), rejected {}", c.applied, c.rejected);
        }
        Component::Fleet => {
            let hub = Arc::new(node::hub_from_config(cfg)?);
            let n = events.unwrap_or(cfg.fleet.events);
            let log = run_fleet(&cfg.fleet.devices, n, &cfg.broker, hub, cfg.seed)?;
            let csv = emission_csv(&log);
            match emission_log {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            eprintln!("emitted {} event(s)", log.len());
        }
    }
    Ok(())
}

fn rules_cmd(cfg: &Config, action: RulesAction) -> Result<()> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    };
    match action {
        RulesAction::Validate { file } => {
            let rules = rule::parse_ruleset(&read(&file)?)?;
            println!(
                "{}: valid, {} rules over {} devices",
                file.display(),
                rules.len(),
                group_by_trigger_device(&rules).len()
            );
        }
        RulesAction::Provision { file, timeout_ms } => {
            let rules = rule::parse_ruleset(&read(&file)?)?;
            let key = if cfg.mode == Mode::Full {
                Some(cfg.ruleset_key()?)
            } else {
                None
            };
            let payloads = node::ruleset_payloads(cfg.mode, &rules, key.as_ref())?;
            let client = BrokerClient::connect(&cfg.broker)?;
            let report =
                node::provision_via_broker(&client, &payloads, Duration::from_millis(timeout_ms))?;
            println!("provisioned {} devices / {} rules", report.devices, report.rules);
        }
    }
    Ok(())
}

fn bench_cmd(modes: Option<&str>, seed: Option<u64>, args: BenchArgs) -> Result<()> {
    let modes: Vec<Mode> = match modes {
        None | Some("all") => Mode::ALL.to_vec(),
        Some(list) => list.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
    };
    let base = BenchConfig {
        mode: modes[0],
        ruleset_size: 0,
        devices: args.devices,
        events: args.events.unwrap_or(bench::DEFAULT_EVENTS),
        cache_capacity: args.cache,
        cache_policy: args.policy.parse::<CachePolicy>()?,
        seed: seed.unwrap_or(1),
        transition_cost: Duration::from_micros(args.transition_us),
        warmup: true,
        workers: args.workers,
    };
    let mut results = Vec::new();
    for &size in &args.rules {
        let cfg = BenchConfig {
            ruleset_size: size,
            ..base.clone()
        };
        if args.sequential || args.workers > 1 {
            for &m in &modes {
                results.push(bench::run_bench(&BenchConfig { mode: m, ..cfg.clone() })?);
            }
        } else {
            results.extend(bench::run_interleaved(&cfg, &modes)?);
        }
        for r in results.iter().filter(|r| r.ruleset_size == size) {
            eprintln!(
                "{:>16} {:>6} rules: mean {:.3} us, hit rate {:.4}",
                r.mode.name(),
                size,
                r.mean_us,
                r.hit_rate
            );
        }
    }
    let (csv, table) = bench::emit_report(&results);
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("bench.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    println!("\nmean per-event latency (us)\n{table}");
    Ok(())
}

fn delay_cmd(cfg: &Config, modes: Option<&str>, ruleset: &Path, args: BenchArgs) -> Result<()> {
    let modes: Vec<Mode> = match modes {
        None => vec![cfg.mode],
        Some("all") => Mode::ALL.to_vec(),
        Some(list) => list.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
    };
    let text = std::fs::read(ruleset).map_err(|e| Error::Config(format!("{}: {e}", ruleset.display())))?;
    let rules = rule::parse_ruleset(&text)?;
    let events = args.events.unwrap_or(cfg.fleet.events);
    let mut csv = String::from("mode,events,fired,commands,exec_mean_us,network_mean_us,e2e_mean_us\n");
    for mode in modes {
        let mut c = cfg.clone();
        c.mode = mode;
        let r = node::measure_delays(&c, &rules, events, Duration::from_secs(5))?;
        eprintln!(
            "{:>16}: {} events, {} fired, execution {:.1} us, network {:.1} us, end-to-end {:.1} us",
            r.mode, r.events, r.fired, r.exec_mean_us, r.network_mean_us, r.e2e_mean_us
        );
        csv.push_str(&format!(
            "{},{},{},{},{:.3},{:.3},{:.3}\n",
            r.mode, r.events, r.fired, r.commands, r.exec_mean_us, r.network_mean_us, r.e2e_mean_us
        ));
    }
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("delay.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn read_event_set(spec: &str) -> Result<(String, Vec<DeviceEvent>)> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects NAME=FILE, got `{spec}`")))?;
    let text = std::fs::read(path).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    let raw: Vec<serde_json::Value> =
        serde_json::from_slice(&text).map_err(|e| Error::Syntax(format!("{path}: {e}")))?;
    let events = raw
        .iter()
        .map(|v| rule::parse_event(v.to_string().as_bytes()))
        .collect::<Result<_>>()?;
    Ok((name.to_string(), events))
}

fn trace_cmd(cfg: &Config, mode_flag: bool, seed: Option<u64>, args: TraceArgs) -> Result<()> {
    let mode = if mode_flag { cfg.mode } else { Mode::Full };
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    if !args.sets.is_empty() {
        let rules_path = args.rules.as_ref().expect("clap enforces --rules");
        let rules = rule::parse_ruleset(&std::fs::read(rules_path)?)?;
        let sets = args
            .sets
            .iter()
            .map(|s| read_event_set(s))
            .collect::<Result<Vec<_>>>()?;
        let mut devices: Vec<_> = rules
            .iter()
            .flat_map(|r| r.conditions.iter().map(|c| c.device.clone()).chain(r.actions.iter().map(|a| a.device.clone())))
            .chain(sets.iter().flat_map(|(_, e)| e.iter().map(|e| e.device.clone())))
            .collect();
        devices.sort();
        devices.dedup();
        let keys: std::collections::BTreeMap<_, _> = devices
            .iter()
            .map(|d| {
                let k = cloakrule::envelope::SymmetricKey::generate(d.as_str(), &mut rand::rngs::OsRng);
                (d.clone(), k)
            })
            .collect();
        let ruleset_key = cloakrule::envelope::SymmetricKey::generate(
            cloakrule::attestation::RULESET_KEY_ID,
            &mut rand::rngs::OsRng,
        );
        let bcfg = BenchConfig {
            mode,
            transition_cost: Duration::ZERO,
            ..Default::default()
        };
        let prepared = sets
            .iter()
            .map(|(n, ev)| {
                Ok((
                    n.clone(),
                    bench::prepare_events(mode, ev, &keys)?
                        .into_iter()
                        .map(|p| (p.topic, p.payload))
                        .collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let matrix = trace::distinguishability_report(
            &prepared,
            || {
                let b: TrustedBoundary = bench::provisioned_boundary(&bcfg, &rules, &keys, &ruleset_key)?;
                b.enable_tracing();
                Ok(b)
            },
            args.threshold,
        )?;
        report_matrix(&matrix, args.out.as_deref(), "matrix.csv")?;
        return Ok(());
    }
    if args.fixture != "table2" {
        return Err(Error::Config(format!("unknown fixture `{}`", args.fixture)));
    }
    let first = seed.unwrap_or(1);
    let mut lowest = 0;
    for s in first..first + args.runs {
        let m = fixture::table2_scores(s, mode, args.threshold)?;
        if fixture::near_pair_is_lowest(&m) {
            lowest += 1;
        }
        if args.runs == 1 {
            report_matrix(&m, args.out.as_deref(), "table2.csv")?;
        } else if let Some(dir) = &args.out {
            std::fs::write(dir.join(format!("table2_seed{s}.csv")), m.to_csv())?;
        }
    }
    println!(
        "KL(S1||S2) lowest in {lowest}/{} run(s)",
        args.runs
    );
    Ok(())
}

fn report_matrix(m: &trace::ScoreMatrix, out: Option<&Path>, name: &str) -> Result<()> {
    let csv = m.to_csv();
    match out {
        Some(dir) => std::fs::write(dir.join(name), &csv)?,
        None => print!("{csv}"),
    }
    for (i, j) in m.flagged() {
        println!(
            "flagged: {} vs {} scores {:.6} (< {})",
            m.names[i], m.names[j], m.scores[i][j], m.threshold
        );
    }
    Ok(())
}
