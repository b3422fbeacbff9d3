use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vaipho::crypto::validate_public_key;
use vaipho::keygraph::{augment_at, graph_to_key, key_to_graph, permute_rows, Permutation6, KEY_BITS};
use vaipho::netsim::simulate;
use vaipho::scenario::Scenario;
use vaipho::time::SimTime;
use vaipho::trace;
use vaipho::NodeId;

#[derive(Parser)]
#[command(name = "vaipho", version, about = "Vehicular ad-hoc protocol simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its trace.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace destination; stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Stop time in seconds; defaults to the scenario duration.
        #[arg(long)]
        until: Option<SimTime>,
    },
    /// Print the matrices of one commitment built by hand.
    ZkpDemo {
        #[arg(long)]
        key: u16,
        /// 1-based key positions to flip, e.g. 4,5,8.
        #[arg(long, value_delimiter = ',')]
        flips: Vec<usize>,
        /// Row permutation, e.g. 6,5,3,4,2,1.
        #[arg(long, value_delimiter = ',')]
        perm: Vec<u8>,
    },
    /// Replay a scenario to a time and list one node's event tables.
    Events {
        scenario: PathBuf,
        #[arg(long)]
        node: u32,
        #[arg(long)]
        at: SimTime,
        #[arg(long)]
        seed: Option<u64>,
        /// Only live free-parking events, nearest first.
        #[arg(long)]
        parking: bool,
    },
    /// Check a trace file offline.
    VerifyTrace { trace: PathBuf },
}

fn spaced(bits: &str) -> String {
    bits.chars().map(String::from).collect::<Vec<_>>().join(" ")
}

fn print_matrix(title: &str, rows: &[String]) {
    println!("{title}");
    for r in rows {
        println!("{}", spaced(r));
    }
}

fn key_bits(key: u16) -> String {
    format!("{key:0width$b}", width = KEY_BITS)
}

fn zkp_demo(key: u16, flips: &[usize], perm: &[u8]) -> Result<(), String> {
    if !validate_public_key(key) {
        return Err(format!("invalid key {key}: not a Hamiltonian 6-cycle"));
    }
    let perm = match perm {
        [] => Permutation6::IDENTITY,
        p => {
            let arr: [u8; 6] = p.try_into().map_err(|_| "permutation needs 6 entries".to_string())?;
            Permutation6::from_one_based(arr).map_err(|e| e.to_string())?
        }
    };
    let start = key_to_graph(key);
    let transformed = augment_at(&start, flips).map_err(|e| e.to_string())?;
    println!("key: {key}");
    println!("key bits: {}", spaced(&key_bits(key)));
    print_matrix("starting graph:", &start.rows_text());
    println!("transformed key: {}", spaced(&key_bits(graph_to_key(&transformed))));
    print_matrix("transformed graph:", &transformed.rows_text());
    println!("permutation: {perm}");
    print_matrix("isomorphic graph:", &permute_rows(&transformed, &perm).rows_text());
    Ok(())
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn run(path: &Path, seed: Option<u64>, out: Option<&Path>, until: Option<SimTime>) -> Result<ExitCode, ExitCode> {
    let scenario = load(path)?;
    let sim = simulate(&scenario, seed.unwrap_or(scenario.seed), until);
    let text = sim.trace.render();
    match out {
        Some(p) => fs::write(p, &text).map_err(|e| {
            eprintln!("{}: {e}", p.display());
            ExitCode::from(2)
        })?,
        None => print!("{text}"),
    }
    let mut violations: Vec<String> = trace::verify(&text).iter().map(ToString::to_string).collect();
    if !sim.accounting.reconciles() {
        violations.push(format!("delivery accounting does not reconcile: {:?}", sim.accounting));
    }
    for v in &violations {
        eprintln!("violation: {v}");
    }
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn events(path: &Path, node: u32, at: SimTime, seed: Option<u64>, parking: bool) -> Result<ExitCode, ExitCode> {
    let scenario = load(path)?;
    let id = NodeId(node);
    if !scenario.node_ids().contains(&id) {
        eprintln!("unknown node {node}");
        return Err(ExitCode::from(2));
    }
    if at > scenario.duration {
        eprintln!("time {at} is outside the scenario (0.000..={})", scenario.duration);
        return Err(ExitCode::from(2));
    }
    let sim = simulate(&scenario, seed.unwrap_or(scenario.seed), Some(at));
    let n = sim.node(id).expect("checked above");
    if parking {
        let here = n.position(at).unwrap_or_else(|| n.track.position(at));
        for ev in n.agg.confirmed.query_parking(at, here) {
            println!("{}", ev.dump_line());
        }
        return Ok(ExitCode::SUCCESS);
    }
    println!("# confirmed");
    for ev in n.agg.confirmed.live(at) {
        println!("{}", ev.dump_line());
    }
    println!("# possible");
    for e in n.agg.possible.iter().filter(|e| e.event.is_live(at)) {
        println!("{}", e.event.dump_line());
    }
    if let Some(p) = n.parked.find_parked() {
        println!("# parked");
        println!("x={:.3} y={:.3} at={}", p.position.x, p.position.y, p.stored_at);
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_trace(path: &Path) -> Result<ExitCode, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(2)
    })?;
    let violations = trace::verify(&text);
    if violations.is_empty() {
        println!("ok");
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{v}");
    }
    Ok(ExitCode::from(1))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            trace,
            until,
        } => run(scenario, *seed, trace.as_deref(), *until),
        Cmd::ZkpDemo { key, flips, perm } => zkp_demo(*key, flips, perm).map(|_| ExitCode::SUCCESS).map_err(|e| {
            eprintln!("{e}");
            ExitCode::from(2)
        }),
        Cmd::Events {
            scenario,
            node,
            at,
            seed,
            parking,
        } => events(scenario, *node, *at, *seed, *parking),
        Cmd::VerifyTrace { trace } => verify_trace(trace),
    };
    result.unwrap_or_else(|code| code)
}
