//! Command-line driver: parses a litmus file, runs the requested check, and
//! prints a human summary plus an optional JSON report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sblab_core::litmus::{self, MachineSel};
use sblab_core::report::{self, Command as RunCommand, Report, RunOpts, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "sblab",
    about = "Run litmus tests on a store-buffer machine and a sequentially consistent machine, \
             check the ownership discipline, and compare the two"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Litmus file
    file: PathBuf,
    /// Depth bound in global steps
    #[arg(long, default_value_t = 200)]
    max_depth: u32,
    /// Abort exploration beyond this many states
    #[arg(long, default_value_t = 2_000_000)]
    state_cap: usize,
    /// Parallel exploration workers (results are worker-count independent)
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Shuffle exploration order for stress runs (default: deterministic)
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here
    #[arg(long)]
    json: Option<PathBuf>,
    /// Include state snapshots in witness traces
    #[arg(long)]
    trace: bool,
    /// Record wall-clock timing in the report (makes reports non-reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Enumerate final outcomes of one machine
    Outcomes {
        #[command(flatten)]
        common: CommonArgs,
        /// Which machine to run: sb or vm
        #[arg(long, default_value = "sb")]
        machine: String,
    },
    /// Check the safety judgment on every reachable SC state
    CheckSafety {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare outcome sets of the two machines
    CheckSc {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check the step-by-step simulation between the machines
    CheckSim {
        #[command(flatten)]
        common: CommonArgs,
        /// Cap on the SC path length matching one store-buffer step
        #[arg(long)]
        match_bound: Option<u32>,
    },
    /// Check the machine invariant on every reachable store-buffer state
    CheckInv {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run every check
    All {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn to_opts(common: &CommonArgs, machine: Option<MachineSel>, match_bound: Option<u32>) -> RunOpts {
    RunOpts {
        machine,
        max_depth: common.max_depth,
        state_cap: common.state_cap,
        workers: common.workers,
        seed: common.seed,
        match_bound,
        trace: common.trace,
        timing: common.timing,
    }
}

fn summarize(report: &Report) {
    println!("litmus   : {}", report.litmus);
    println!("command  : {}", report.command);
    let verdict = |name: &str, v: &Option<report::Verdict>| {
        if let Some(v) = v {
            println!("{name:9}: {}", format!("{v:?}").to_lowercase());
        }
    };
    verdict("safety", &report.verdicts.safety);
    verdict("sc", &report.verdicts.sc);
    verdict("invariant", &report.verdicts.invariants);
    verdict("simulation", &report.verdicts.simulation);
    for (label, section) in [
        ("sb", &report.outcomes.sb),
        ("vm", &report.outcomes.vm),
    ] {
        if let Some(entries) = section {
            println!("outcomes ({label}):");
            for e in entries {
                let vals: Vec<String> = e.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("  {{{}}}  x{}", vals.join(", "), e.terminal_states);
            }
        }
    }
    for e in &report.expectations {
        println!(
            "expectation [{}]: {}",
            e.clause,
            format!("{:?}", e.status).to_lowercase()
        );
    }
    for w in &report.witnesses {
        println!("witness ({}): {}", w.kind, w.detail);
        if !w.trace.is_empty() {
            let steps: Vec<String> = w
                .trace
                .iter()
                .map(|s| format!("P{}:{}", s.thread, s.rule))
                .collect();
            println!("  {}", steps.join(" -> "));
        }
    }
    if let Some(err) = &report.error {
        println!("error    : {err}");
    }
    println!("exit     : {}", report.exit_code);
}

fn run(cli: Cli) -> Result<Report, String> {
    let (common, cmd, machine, match_bound) = match &cli.command {
        Cmd::Outcomes { common, machine } => {
            let sel = match machine.as_str() {
                "sb" => MachineSel::Sb,
                "vm" => MachineSel::Vm,
                other => return Err(format!("unknown machine '{other}' (use sb or vm)")),
            };
            (common, RunCommand::Outcomes, Some(sel), None)
        }
        Cmd::CheckSafety { common } => (common, RunCommand::CheckSafety, None, None),
        Cmd::CheckSc { common } => (common, RunCommand::CheckSc, None, None),
        Cmd::CheckSim {
            common,
            match_bound,
        } => (common, RunCommand::CheckSim, None, *match_bound),
        Cmd::CheckInv { common } => (common, RunCommand::CheckInv, None, None),
        Cmd::All { common } => (common, RunCommand::All, None, None),
    };

    let src = std::fs::read_to_string(&common.file)
        .map_err(|e| format!("cannot read {}: {e}", common.file.display()))?;
    let stem = common
        .file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "litmus".into());
    let file = litmus::parse(&src, &stem).map_err(|e| e.to_string())?;

    let opts = to_opts(common, machine, match_bound);
    let report = report::run(&file, cmd, &opts);

    if let Some(path) = &common.json {
        std::fs::write(path, report.to_json())
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            summarize(&report);
            ExitCode::from(report.exit_code as u8)
        }
        Err(msg) => {
            eprintln!("sblab: {msg}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
