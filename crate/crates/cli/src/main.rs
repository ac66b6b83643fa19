use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pathguard::fixtures::{self, Vulnerability};
use pathguard::guard::{protect, review_and_approve, run_detection, train, AlarmDetail, Bundle, GuardConfig, Guarded, OverheadReport};
use pathguard::vm::tx::{parse_transactions, parse_word, TxRecord};
use pathguard::vm::{assemble, ContractProgram, Transaction, WorldState, MAX_CODE_SIZE};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pathguard", version, about = "Path-based intrusion detection for GuardVM contracts")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble one contract source into a program file.
    Asm {
        src: PathBuf,
        #[arg(short)]
        o: PathBuf,
    },
    /// Combine program files into a bundle, or export a built-in fixture.
    Bundle {
        programs: Vec<PathBuf>,
        /// Contracts to protect (names).
        #[arg(long, value_delimiter = ',')]
        protect: Vec<String>,
        /// Export the named fixture instead, with training and test streams
        /// written next to the bundle.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        len: usize,
        #[arg(short)]
        o: PathBuf,
    },
    /// Print path and context counts of every protected function.
    Analyze {
        bundle: PathBuf,
        #[arg(long, conflicts_with = "dump_callgraph")]
        dump_cfg: bool,
        #[arg(long)]
        dump_callgraph: bool,
    },
    /// Profile normal transactions into a path-set snapshot.
    Train {
        bundle: PathBuf,
        txs: PathBuf,
        #[arg(short)]
        o: PathBuf,
    },
    /// Instrument the protected contracts with a snapshot.
    Protect {
        bundle: PathBuf,
        snapshot: PathBuf,
        #[arg(short)]
        o: PathBuf,
    },
    /// Run transactions against a guarded bundle.
    Run {
        guarded: PathBuf,
        txs: PathBuf,
        #[arg(long)]
        alarms: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Where to save the post-run world for `approve`.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Transaction indices that are known attacks (excluded from the
        /// false-alarm count).
        #[arg(long, value_delimiter = ',')]
        attacks: Vec<usize>,
    },
    /// Approve the paths of one alarm after replaying it in a fork.
    Approve {
        world: PathBuf,
        alarm_log: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        admin: String,
    },
    /// Cold-start run with empty path sets, approving every alarm.
    SimulateFalseAlarms { bundle: PathBuf, txs: PathBuf },
}

/// A guarded bundle with the world state after a run.
#[derive(serde::Serialize, serde::Deserialize)]
struct GuardedWorld {
    guarded: Guarded,
    world: WorldState,
}

/// One line of the alarm log.
#[derive(serde::Serialize, serde::Deserialize)]
struct AlarmLine {
    alarm: AlarmDetail,
    tx: TxRecord,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| pathguard::Error::Json(format!("{}: {e}", path.display())).into())
}

fn save<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    for item in items {
        writeln!(f, "{}", serde_json::to_string(&item)?)?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<GuardConfig> {
    match path {
        Some(p) => Ok(GuardConfig::from_json(&read(p)?)?),
        None => Ok(GuardConfig::default()),
    }
}

fn load_bundle(path: &Path, config: &GuardConfig) -> Result<Bundle> {
    let b: Bundle = load(path)?;
    Ok(b.with_boundary(config)?)
}

fn load_txs(path: &Path, bundle: &Bundle, config: &GuardConfig) -> Result<Vec<Transaction>> {
    let world = bundle.deploy(&config.gas)?;
    Ok(parse_transactions(&read(path)?, &world)?)
}

/// Inserts the configured width into a header that does not set one.
fn apply_width(src: &str, width: Option<u32>) -> String {
    match width {
        Some(w) if !src.contains("width=") => src.replacen('{', &format!("width={w} {{"), 1),
        _ => src.to_string(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Asm { src, o } => {
            let p = assemble(&apply_width(&read(&src)?, config.width))?;
            if p.byte_size() > MAX_CODE_SIZE {
                bail!(pathguard::Error::SizeLimitExceeded { size: p.byte_size(), limit: MAX_CODE_SIZE });
            }
            save(&o, &p)?;
            println!("{}: {} functions, {} bytes", p.name, p.functions.len(), p.byte_size());
        }
        Command::Bundle { programs, protect, fixture, seed, len, o } => match fixture {
            Some(name) => {
                let kind = Vulnerability::from_name(&name).with_context(|| format!("unknown fixture `{name}`"))?;
                let s = fixtures::scenario(kind, seed, len);
                save(&o, &s.bundle)?;
                let world = s.bundle.deploy(&config.gas)?;
                let stem = o.with_extension("");
                let train_path = stem.with_extension("train.jsonl");
                let test_path = stem.with_extension("test.jsonl");
                write_jsonl(&train_path, s.training.iter().map(|t| t.to_record(&world)))?;
                write_jsonl(&test_path, s.test.iter().map(|t| t.to_record(&world)))?;
                println!("{}", json!({ "bundle": o, "training": train_path, "test": test_path, "attacks": s.attacks }));
            }
            None => {
                if programs.is_empty() {
                    bail!(pathguard::Error::InvalidProgram("no programs given".into()));
                }
                let ps = programs.iter().map(|p| load::<ContractProgram>(p)).collect::<Result<Vec<_>>>()?;
                for p in &ps {
                    p.validate()?;
                }
                let names: Vec<&str> = protect.iter().map(String::as_str).collect();
                let b = Bundle::new(ps, &names).with_boundary(&config)?;
                for n in &b.boundary {
                    if b.address(n).is_none() {
                        bail!(pathguard::Error::InvalidProgram(format!("unknown contract `{n}` in --protect")));
                    }
                }
                save(&o, &b)?;
            }
        },
        Command::Analyze { bundle, dump_cfg, dump_callgraph } => {
            let b = load_bundle(&bundle, &config)?;
            let index = b.index()?;
            if dump_callgraph {
                println!("{}", serde_json::to_string_pretty(&index.call_graph.to_json())?);
            } else if dump_cfg {
                let cfgs: Vec<_> = index
                    .functions
                    .values()
                    .map(|f| json!({ "contract": f.contract, "function": f.name, "cfg": f.analyzed.cfg.to_json() }))
                    .collect();
                println!("{}", serde_json::to_string_pretty(&cfgs)?);
            } else {
                println!("{:<16} {:<20} {:>6} {:>10} {:>8} {:>12}", "contract", "function", "blocks", "paths", "ctxs", "index space");
                for f in index.functions.values() {
                    let flag = if f.analyzed.irreducible { "  (irreducible)" } else { "" };
                    println!(
                        "{:<16} {:<20} {:>6} {:>10} {:>8} {:>12}{flag}",
                        f.contract,
                        f.name,
                        f.analyzed.cfg.block_count(),
                        f.num_paths(),
                        f.num_ccs,
                        f.index_space()
                    );
                }
            }
        }
        Command::Train { bundle, txs, o } => {
            let b = load_bundle(&bundle, &config)?;
            let txs = load_txs(&txs, &b, &config)?;
            let snap = train(&b, &txs, &config)?;
            fs::write(&o, snap.to_json()).with_context(|| format!("writing {}", o.display()))?;
            let paths: usize = snap.functions.iter().map(|f| f.safe.len()).sum();
            println!("trained on {} transactions: {paths} safe paths", txs.len());
        }
        Command::Protect { bundle, snapshot, o } => {
            let b = load_bundle(&bundle, &config)?;
            let snap = pathguard::pathset::PathSetSnapshot::from_json(&read(&snapshot)?)?;
            let g = protect(&b, &snap, &config)?;
            for (name, ip) in &g.instrumented {
                println!("{name}: {} -> {} bytes ({:.1}%)", ip.original_size, ip.instrumented_size, ip.deployment_overhead());
            }
            save(&o, &g)?;
        }
        Command::Run { guarded, txs, alarms, report, world, attacks } => {
            let g: Guarded = load(&guarded)?;
            let txs = load_txs(&txs, &g.bundle, &config)?;
            let run = run_detection(&g, &txs, &config.gas)?;
            let shadow = &run.deployment.shadow;
            let log = run.alarm_log().into_iter().map(|a| {
                let tx = txs[a.tx_index].to_record(shadow);
                AlarmLine { alarm: a, tx }
            });
            write_jsonl(&alarms, log)?;
            let rep = OverheadReport::build(&g, &run, &attacks);
            save(&report, &rep)?;
            if let Some(w) = world {
                save(&w, &GuardedWorld { guarded: g.clone(), world: run.deployment.world.clone() })?;
            }
            let reverted = run.outcomes.iter().filter(|o| o.status == pathguard::vm::TxStatus::GuardReverted).count();
            println!(
                "{} transactions, {reverted} guard-reverted, {} alarms; deploy overhead {:.2}%, runtime overhead {:.2}%",
                txs.len(),
                run.alarm_log().len(),
                rep.avg_deploy_overhead_pct,
                rep.avg_runtime_overhead_pct
            );
        }
        Command::Approve { world, alarm_log, index, admin } => {
            let mut gw: GuardedWorld = load(&world)?;
            let text = read(&alarm_log)?;
            let line = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .nth(index)
                .ok_or_else(|| pathguard::Error::InvalidTransaction(format!("alarm log has no entry {index}")))?;
            let entry: AlarmLine = serde_json::from_str(line).map_err(|e| pathguard::Error::Json(e.to_string()))?;
            let admin = parse_word(&admin)?;
            let tx = Transaction::from_record(&entry.tx, &gw.world)?;
            let a = review_and_approve(&gw.guarded, &mut gw.world, &tx, admin, &config.gas)?;
            save(&world, &gw)?;
            println!("{}", serde_json::to_string_pretty(&a)?);
        }
        Command::SimulateFalseAlarms { bundle, txs } => {
            let b = load_bundle(&bundle, &config)?;
            let txs = load_txs(&txs, &b, &config)?;
            let rep = pathguard::guard::false_alarm_simulation(&b, &txs, &config)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use pathguard::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::SizeLimitExceeded { .. }) => 3,
        Some(E::TrainingTxFailed { .. }) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
