//! Scenario configuration files.

use serde::{Deserialize, Serialize};
use vaultlab::covenant::Mechanism;
use vaultlab::fleet::WalletTopology;
use vaultlab::orchestrator::{Feerates, SimConfig, UnvaultPolicy};
use vaultlab::threat::{scenario, CompromiseEvent, OutcomeClass, ScenarioId, ThreatError};
use vaultlab::watchtower::Variant;

use crate::CliError;

pub const SCHEMA: &str = "vaultlab.scenario/1";

/// Expected result of a run. Extra keys are ignored, so a previous
/// `outcome.json` works as a golden file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Expectation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<OutcomeClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacker_gain: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owner_retained: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub schema: String,
    pub name: String,
    /// Numbered threat scenario (`C1`..`C8`, `L1`..`L10`) applied at index 0.
    pub scenario: Option<String>,
    pub topology: WalletTopology,
    pub policy: UnvaultPolicy,
    pub mechanism: Mechanism,
    pub revault_layers: usize,
    /// Vault amounts in satoshi, one per partition.
    pub funds: Vec<u64>,
    pub fee_wallet_funds: u64,
    pub seed: u64,
    pub feerates: Feerates,
    pub watchtower_variant: Variant,
    pub confirm_depth: u32,
    pub penny_test: bool,
    pub unvault_start: Option<u64>,
    pub unvault_count: Option<usize>,
    pub freeze_on_recovery_compromise: bool,
    pub owner_suspects_recovery: bool,
    pub forced_full_recovery_at: Option<u64>,
    pub dead_watchtowers: Vec<usize>,
    pub horizon: Option<u64>,
    pub compromise_schedule: Vec<CompromiseEvent>,
    pub expect: Option<Expectation>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::from_sim("", &SimConfig::default())
    }
}

impl ScenarioConfig {
    pub fn from_sim(name: &str, c: &SimConfig) -> Self {
        ScenarioConfig {
            schema: SCHEMA.into(),
            name: name.into(),
            scenario: None,
            topology: c.topology.clone(),
            policy: c.policy,
            mechanism: c.mechanism,
            revault_layers: c.revault_layers,
            funds: c.partitions.clone(),
            fee_wallet_funds: c.fee_wallet_funds,
            seed: c.seed,
            feerates: c.feerates,
            watchtower_variant: c.watchtower_variant,
            confirm_depth: c.confirm_depth,
            penny_test: c.penny_test,
            unvault_start: c.unvault_start,
            unvault_count: c.unvault_count,
            freeze_on_recovery_compromise: c.freeze_on_recovery_compromise,
            owner_suspects_recovery: c.owner_suspects_recovery,
            forced_full_recovery_at: c.forced_full_recovery_at,
            dead_watchtowers: c.dead_watchtowers.clone(),
            horizon: c.horizon,
            compromise_schedule: Vec::new(),
            expect: None,
        }
    }

    /// Parses JSON, rejecting unknown keys at any depth. Errors carry the
    /// dotted path of the offending field.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut unknown = Vec::new();
        let mut de = serde_json::Deserializer::from_str(text);
        let mut track = |path: serde_ignored::Path<'_>| unknown.push(path.to_string());
        let ignoring = serde_ignored::Deserializer::new(&mut de, &mut track);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(ignoring).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config { field, reason: e.into_inner().to_string() }
        })?;
        de.end().map_err(|e| CliError::Config { field: ".".into(), reason: e.to_string() })?;
        if let Some(field) = unknown.into_iter().next() {
            return Err(CliError::Config { field, reason: "unknown field".into() });
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn scenario_id(&self) -> Result<Option<ScenarioId>, CliError> {
        self.scenario
            .as_deref()
            .map(|s| s.parse::<ScenarioId>().map_err(|e| CliError::Config { field: "scenario".into(), reason: e.to_string() }))
            .transpose()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            topology: self.topology.clone(),
            policy: self.policy,
            mechanism: self.mechanism,
            revault_layers: self.revault_layers,
            partitions: self.funds.clone(),
            fee_wallet_funds: self.fee_wallet_funds,
            seed: self.seed,
            feerates: self.feerates,
            watchtower_variant: self.watchtower_variant,
            confirm_depth: self.confirm_depth,
            penny_test: self.penny_test,
            unvault_start: self.unvault_start,
            unvault_count: self.unvault_count,
            freeze_on_recovery_compromise: self.freeze_on_recovery_compromise,
            owner_suspects_recovery: self.owner_suspects_recovery,
            forced_full_recovery_at: self.forced_full_recovery_at,
            dead_watchtowers: self.dead_watchtowers.clone(),
            horizon: self.horizon,
        }
    }

    /// Simulator config with the named scenario's environment applied.
    pub fn resolved_sim(&self) -> Result<SimConfig, CliError> {
        let mut cfg = self.sim_config();
        if let Some(id) = self.scenario_id()? {
            if let Some(at) = scenario(id, &cfg.topology).forced_recovery_at {
                cfg.forced_full_recovery_at = Some(at);
            }
        }
        Ok(cfg)
    }

    /// Compromise schedule with the named scenario's set prepended at index 0.
    pub fn schedule(&self) -> Result<Vec<CompromiseEvent>, CliError> {
        let mut events = Vec::new();
        if let Some(id) = self.scenario_id()? {
            events.push(CompromiseEvent { event_index: 0, delta: scenario(id, &self.topology).compromise });
        }
        events.extend(self.compromise_schedule.iter().cloned());
        Ok(events)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA {
            return Err(CliError::Config { field: "schema".into(), reason: format!("expected `{SCHEMA}`, found `{}`", self.schema) });
        }
        self.scenario_id()?;
        let sim = self.sim_config();
        sim.validate().map_err(|e| match e {
            vaultlab::orchestrator::SimError::Config { field, reason } => {
                let field = if field == "partitions" { "funds".into() } else { field };
                CliError::Config { field, reason }
            }
            other => CliError::Config { field: ".".into(), reason: other.to_string() },
        })?;
        for (i, ev) in self.compromise_schedule.iter().enumerate() {
            if let Err(ThreatError::Compromise { field, value, max }) = ev.delta.validate(&self.topology) {
                return Err(CliError::Config {
                    field: format!("compromise_schedule[{i}].delta.{field}"),
                    reason: format!("{value} exceeds the topology maximum {max}"),
                });
            }
        }
        Ok(())
    }
}

/// Scenario configs shipped with the binary.
pub const BUNDLED: &[(&str, &str)] = &[
    ("L2-active-compromise", include_str!("../scenarios/L2-active-compromise.json")),
    ("honest-vault-unvault", include_str!("../scenarios/honest-vault-unvault.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
