//! Browser bindings: run a litmus source against either machine and return
//! the JSON report. The page in `www/` drives these three operations.

use wasm_bindgen::prelude::*;

use sblab_core::litmus::{self, MachineSel};
use sblab_core::report::{self, Command, RunOpts};

fn opts(machine: Option<MachineSel>, max_depth: u32, state_cap: usize) -> RunOpts {
    RunOpts {
        machine,
        max_depth,
        state_cap,
        workers: 1,
        seed: None,
        match_bound: None,
        trace: false,
        timing: false,
    }
}

fn run(src: &str, command: Command, machine: Option<MachineSel>, max_depth: u32) -> String {
    match litmus::parse(src, "playground") {
        Ok(file) => {
            let report = report::run(&file, command, &opts(machine, max_depth, 500_000));
            report.to_json()
        }
        Err(e) => serde_json::json!({
            "schema_version": report::SCHEMA_VERSION,
            "error": e.to_string(),
            "exit_code": report::EXIT_USAGE,
        })
        .to_string(),
    }
}

/// Outcome histogram of one machine ("sb" or "vm").
#[wasm_bindgen]
pub fn outcomes(src: &str, machine: &str, max_depth: u32) -> String {
    let sel = if machine == "vm" {
        MachineSel::Vm
    } else {
        MachineSel::Sb
    };
    run(src, Command::Outcomes, Some(sel), max_depth)
}

/// Safety of the access discipline over all reachable SC states.
#[wasm_bindgen]
pub fn check_safety(src: &str, max_depth: u32) -> String {
    run(src, Command::CheckSafety, None, max_depth)
}

/// Outcome-set comparison between the two machines.
#[wasm_bindgen]
pub fn check_sc(src: &str, max_depth: u32) -> String {
    run(src, Command::CheckSc, None, max_depth)
}

/// Bundled example litmus tests as a JSON list of {name, source}.
#[wasm_bindgen]
pub fn presets() -> String {
    let items: Vec<serde_json::Value> = PRESETS
        .iter()
        .map(|(name, src)| serde_json::json!({ "name": name, "source": src }))
        .collect();
    serde_json::Value::Array(items).to_string()
}

const PRESETS: &[(&str, &str)] = &[
    (
        "store-buffering (naive)",
        include_str!("../../../litmus/sb_naive.litmus"),
    ),
    (
        "store-buffering (fenced)",
        include_str!("../../../litmus/sb_fenced.litmus"),
    ),
    (
        "store-buffering (cas)",
        include_str!("../../../litmus/sb_cas.litmus"),
    ),
    (
        "message passing (ownership)",
        include_str!("../../../litmus/mp_ownership.litmus"),
    ),
    (
        "spinlock counter",
        include_str!("../../../litmus/spinlock_counter.litmus"),
    ),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_parse_errors_as_json() {
        let out = check_safety("mem {", 10);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["exit_code"], 3);
    }

    #[test]
    fn presets_are_valid_json_and_parse() {
        let v: serde_json::Value = serde_json::from_str(&presets()).unwrap();
        let arr = v.as_array().unwrap();
        assert!(arr.len() >= 5);
        for item in arr {
            let src = item["source"].as_str().unwrap();
            litmus::parse(src, "preset").unwrap();
        }
    }
}
