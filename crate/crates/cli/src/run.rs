//! `vaultlab run`: one scenario, best attacker play, full trace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vaultlab::covenant::Mechanism;
use vaultlab::orchestrator::Holding;
use vaultlab::threat::{best_scheduled, OutcomeClass};

use crate::{write, CliError, Expectation, ScenarioConfig};

/// Summary written to `outcome.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub name: String,
    pub scenario: Option<String>,
    pub mechanism: Mechanism,
    pub seed: u64,
    pub strategy: String,
    pub class: OutcomeClass,
    pub attacker_gain: u64,
    pub owner_retained: u64,
    pub frozen: u64,
    pub fees: u64,
    pub initial: u64,
    pub balanced: bool,
    pub privacy_lost: bool,
    pub detected: bool,
    pub processes: Vec<ProcessSummary>,
    pub partitions: Vec<BTreeMap<Holding, u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSummary {
    pub process: String,
    pub tick: u64,
    pub completed: bool,
}

pub fn execute(cfg: &ScenarioConfig) -> Result<(OutcomeRecord, String, String), CliError> {
    cfg.validate()?;
    let sim_cfg = cfg.resolved_sim()?;
    let (outcome, sim) = best_scheduled(&sim_cfg, &cfg.schedule()?)?;
    let acc = sim.accounting();
    let record = OutcomeRecord {
        name: cfg.name.clone(),
        scenario: cfg.scenario.clone(),
        mechanism: cfg.mechanism,
        seed: cfg.seed,
        strategy: outcome.strategy.clone(),
        class: outcome.class,
        attacker_gain: outcome.attacker_gain,
        owner_retained: outcome.owner_retained,
        frozen: outcome.frozen,
        fees: outcome.fees,
        initial: outcome.initial,
        balanced: outcome.balanced(),
        privacy_lost: outcome.privacy_lost,
        detected: outcome.detected,
        processes: sim
            .traces
            .iter()
            .map(|t| ProcessSummary { process: t.process.clone(), tick: t.tick, completed: t.is_completed() })
            .collect(),
        partitions: acc.partitions.into_iter().map(|p| p.holdings).collect(),
    };
    Ok((record, sim.report(), sim.chain.event_log()))
}

pub fn check(record: &OutcomeRecord, expect: &Expectation) -> Result<(), CliError> {
    let mut diffs = Vec::new();
    let mut cmp = |field: &str, want: Option<String>, got: String| {
        if let Some(want) = want.filter(|w| *w != got) {
            diffs.push(format!("{field} expected {want}, got {got}"));
        }
    };
    cmp("class", expect.class.map(|c| c.to_string()), record.class.to_string());
    cmp("attacker_gain", expect.attacker_gain.map(|v| v.to_string()), record.attacker_gain.to_string());
    cmp("owner_retained", expect.owner_retained.map(|v| v.to_string()), record.owner_retained.to_string());
    cmp("frozen", expect.frozen.map(|v| v.to_string()), record.frozen.to_string());
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(diffs.join("; ")))
    }
}

/// Runs `cfg`, writes `trace.log`, `outcome.json` and `events.log` into
/// `out`, then checks the expectation (`golden` wins over the embedded one).
pub fn cmd_run(cfg: &ScenarioConfig, out: &Path, golden: Option<&Expectation>) -> Result<OutcomeRecord, CliError> {
    let (record, trace, events) = execute(cfg)?;
    write(out, "trace.log", &trace)?;
    write(out, "events.log", &events)?;
    let mut json = serde_json::to_string_pretty(&record).expect("record serializes");
    json.push('\n');
    write(out, "outcome.json", &json)?;
    if let Some(expect) = golden.or(cfg.expect.as_ref()) {
        check(&record, expect)?;
    }
    Ok(record)
}
