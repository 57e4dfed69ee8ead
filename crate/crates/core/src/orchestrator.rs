//! Custody processes run as deterministic state machines: set-up, external
//! payment, vaulting, un-vaulting, recovery, device rotation and the health
//! check, all driven by one tick scheduler over the simulated chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainState, Rejection, Visibility};
use crate::covenant::{
    build_ctv_plan, build_p2rw_tx, build_revault_tx, build_vault_tx, path_witness,
    Activation, CovenantPair, CtvParams, CtvPlan, Mechanism, MultisigSpec, SpendPath, VaultLayer,
    VaultTemplate,
};
use crate::fleet::{
    human_check, possession_commitment, ActStore, CheckResult, ChannelState, Fleet, FleetError, WalletRole,
    WalletTopology, WalletType,
};
use crate::script::{eval_script, ExecContext, Script};
use crate::txkit::{
    compute_txid, sha256d, sighash_digest, sign_input, tagged_hash, verify_raw, Hash256, OutPoint, PublicKey,
    SighashMode, Transaction, TxInput, TxOutput, PAST_LOCKTIME, TX_VERSION,
};
use crate::watchtower::{
    authorization_payload, registration_payload, Action, Alert, AlertKind, AuthMessage, Consistency, Variant,
    WatchtowerNode,
};

pub const COIN: u64 = 100_000_000;
/// Size of the first leg of a penny-tested external payment.
pub const PENNY: u64 = 10_000;
const MAX_ROUNDS: usize = 16;
const SETTLE_TICKS: u64 = 120;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u32,
    pub actor: String,
    pub action: String,
    pub result: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceStatus {
    Completed,
    Aborted(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessTrace {
    pub process: String,
    pub tick: u64,
    pub steps: Vec<TraceStep>,
    pub status: TraceStatus,
}

impl ProcessTrace {
    pub fn new(process: impl Into<String>, tick: u64) -> Self {
        ProcessTrace { process: process.into(), tick, steps: Vec::new(), status: TraceStatus::Completed }
    }

    pub fn step(&mut self, step: u32, actor: impl Into<String>, action: impl Into<String>, result: impl Into<String>) {
        self.steps.push(TraceStep { step, actor: actor.into(), action: action.into(), result: result.into() });
    }

    /// First abort wins.
    pub fn abort(&mut self, reason: impl Into<String>) {
        if self.status == TraceStatus::Completed {
            self.status = TraceStatus::Aborted(reason.into());
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == TraceStatus::Completed
    }

    pub fn abort_reason(&self) -> Option<&str> {
        match &self.status {
            TraceStatus::Aborted(r) => Some(r),
            TraceStatus::Completed => None,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("== {} @{}\n", self.process, self.tick);
        for st in &self.steps {
            let _ = writeln!(s, "{:>2} {} | {} | {}", st.step, st.actor, st.action, st.result);
        }
        let _ = match &self.status {
            TraceStatus::Completed => writeln!(s, "-> completed"),
            TraceStatus::Aborted(r) => writeln!(s, "-> aborted: {r}"),
        };
        s
    }
}

/// Action prefix used by vaulting traces to tag the partition a step belongs to.
fn scoped(partition: usize, action: &str) -> String {
    format!("[p{partition}] {action}")
}

/// Order violations in a vaulting trace: per partition, step numbers must not
/// go backwards and the deposit broadcast must follow every deletion.
pub fn audit_vaulting_order(trace: &ProcessTrace) -> Vec<String> {
    let mut by_partition: BTreeMap<String, Vec<&TraceStep>> = BTreeMap::new();
    for st in &trace.steps {
        if let Some(end) = st.action.find("] ") {
            by_partition.entry(st.action[..=end].to_string()).or_default().push(st);
        }
    }
    let mut issues = Vec::new();
    for (scope, steps) in by_partition {
        let mut last = 0;
        for st in &steps {
            if st.step < last {
                issues.push(format!("{scope} step {} after step {last}", st.step));
            }
            last = last.max(st.step);
        }
        let broadcast = steps.iter().position(|s| s.action.ends_with("broadcast deposit"));
        let last_delete = steps.iter().rposition(|s| s.action.contains("delete"));
        if let (Some(b), Some(d)) = (broadcast, last_delete) {
            if b < d {
                issues.push(format!("{scope} deposit broadcast before deletions completed"));
            }
        }
    }
    issues
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnvaultPolicy {
    pub max_funds_in_flight: u64,
    pub min_blocks_between_unvaults: u64,
    pub max_unvaults_in_flight: usize,
}

impl Default for UnvaultPolicy {
    fn default() -> Self {
        UnvaultPolicy { max_funds_in_flight: u64::MAX, min_blocks_between_unvaults: 0, max_unvaults_in_flight: 1 }
    }
}

/// Feerates in sat/byte. `recovery` defaults to one above the best attacker
/// priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Feerates {
    pub owner: u64,
    pub attacker: u64,
    pub bribe: u64,
    pub recovery: Option<u64>,
}

impl Default for Feerates {
    fn default() -> Self {
        Feerates { owner: 10, attacker: 5, bribe: 20, recovery: None }
    }
}

impl Feerates {
    pub fn recovery(&self) -> u64 {
        self.recovery.unwrap_or_else(|| self.owner.max(self.attacker + self.bribe) + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub topology: WalletTopology,
    pub policy: UnvaultPolicy,
    pub mechanism: Mechanism,
    pub revault_layers: usize,
    /// Vault output amounts, one per partition.
    pub partitions: Vec<u64>,
    pub fee_wallet_funds: u64,
    pub seed: u64,
    pub feerates: Feerates,
    pub watchtower_variant: Variant,
    pub confirm_depth: u32,
    pub penny_test: bool,
    /// First tick at which the owner starts un-vaulting. Default `T + 3`.
    pub unvault_start: Option<u64>,
    /// How many partitions the owner un-vaults. Default all.
    pub unvault_count: Option<usize>,
    pub freeze_on_recovery_compromise: bool,
    pub owner_suspects_recovery: bool,
    /// Tick at which an outside event forces a full recovery.
    pub forced_full_recovery_at: Option<u64>,
    pub dead_watchtowers: Vec<usize>,
    pub horizon: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topology: WalletTopology::default(),
            policy: UnvaultPolicy::default(),
            mechanism: Mechanism::DeletedKey,
            revault_layers: 1,
            partitions: vec![COIN, 2 * COIN, 3 * COIN],
            fee_wallet_funds: COIN / 10,
            seed: 7,
            feerates: Feerates::default(),
            watchtower_variant: Variant::Responder,
            confirm_depth: 1,
            penny_test: false,
            unvault_start: None,
            unvault_count: None,
            freeze_on_recovery_compromise: true,
            owner_suspects_recovery: false,
            forced_full_recovery_at: None,
            dead_watchtowers: Vec::new(),
            horizon: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("set-up aborted: {0}")]
    Setup(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, reason: &str| Err(SimError::Config { field: field.into(), reason: reason.into() });
        if let Err(FleetError::Topology { field, reason }) = self.topology.validate() {
            return Err(SimError::Config { field: format!("topology.{field}"), reason });
        }
        if self.partitions.is_empty() || self.partitions.contains(&0) {
            return bad("partitions", "need at least one non-zero partition");
        }
        if self.revault_layers == 0 || self.revault_layers > 2 {
            return bad("revault_layers", "supported values are 1 and 2");
        }
        if self.revault_layers > 1 && self.mechanism == Mechanism::Ctv {
            return bad("mechanism", "re-vaulting layers require deleted-key covenants");
        }
        if self.confirm_depth == 0 {
            return bad("confirm_depth", "must be at least 1");
        }
        if self.feerates.owner == 0 {
            return bad("feerates.owner", "must be positive");
        }
        if self.policy.max_unvaults_in_flight == 0 {
            return bad("policy.max_unvaults_in_flight", "must be at least 1");
        }
        if self.dead_watchtowers.iter().any(|&i| i >= self.topology.watchtower_w) {
            return bad("dead_watchtowers", "index beyond watchtower count");
        }
        Ok(())
    }

    pub fn unvault_start(&self) -> u64 {
        self.unvault_start.unwrap_or(self.topology.timelock_t as u64 + 3)
    }

    pub fn horizon(&self) -> u64 {
        self.horizon.unwrap_or_else(|| {
            let t = self.topology.timelock_t as u64;
            let per = t + 2 + self.policy.min_blocks_between_unvaults;
            self.unvault_start() + self.partitions.len() as u64 * per + t + 10
        })
    }
}

/// Who ends up holding a script's funds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Holding {
    Active,
    Recovery,
    Fee,
    Payee,
    Deposit,
    Vault,
    Attacker,
    Unknown,
}

#[derive(Clone, Debug)]
struct OwnedScript {
    holding: Holding,
    index: u32,
    spec: Option<MultisigSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaultState {
    Active,
    Unvaulting,
    Paid,
    Recovered,
    Revaulted,
    Frozen,
    Rotated,
}

#[derive(Clone, Debug)]
pub struct VaultRecord {
    pub partition: usize,
    pub pair: CovenantPair,
    pub deposit_tx: Transaction,
    pub layer2: Vec<CovenantPair>,
    pub ctv: Option<CtvPlan>,
    pub active_index: u32,
    pub state: VaultState,
    pub rotate: bool,
}

impl VaultRecord {
    pub fn deposit_txid(&self) -> Hash256 {
        self.pair.deposit_outpoint.txid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryKind {
    UnauthorizedUnvault(usize),
    ActiveWalletCompromise,
    Full,
    /// Pushes first-layer vaults into the next layer instead.
    Revault,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VaultingOptions {
    /// Broadcast the deposit right after building it (protocol-order violation).
    pub misorder: bool,
    /// Number of deleting devices whose notification never arrives.
    pub withheld_notifications: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SetupOptions {
    /// The computer interface shows a different address than the HM derived.
    pub tamper_address: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthEntry {
    pub component: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub entries: Vec<HealthEntry>,
    /// Chain verdicts for the submitted proof-of-reserves transactions.
    pub reserve_rejections: Vec<String>,
    pub chain_unchanged: bool,
}

impl HealthReport {
    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn failures(&self) -> Vec<&HealthEntry> {
        self.entries.iter().filter(|e| !e.ok).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionFate {
    pub partition: usize,
    pub owner: u64,
    pub attacker: u64,
    pub frozen: u64,
    pub holdings: BTreeMap<Holding, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub initial: u64,
    pub owner: u64,
    pub attacker: u64,
    pub frozen: u64,
    pub fees: u64,
    pub partitions: Vec<PartitionFate>,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.owner + self.attacker + self.frozen + self.fees == self.initial
    }
}

/// Adversary hook called in every reaction round of every tick.
pub trait Adversary {
    fn act(&mut self, sim: &mut Custody);
}

/// No adversary.
pub struct Honest;

impl Adversary for Honest {
    fn act(&mut self, _sim: &mut Custody) {}
}

#[derive(Clone, Debug)]
struct InFlight {
    vault: usize,
    vault_txid: Hash256,
    amount: u64,
    payment: Option<Hash256>,
    intended: Script,
    failed: bool,
    rotate: bool,
}

#[derive(Clone, Debug, Default)]
struct Owner {
    authorized: BTreeSet<Hash256>,
    in_flight: Vec<InFlight>,
    last_start: Option<u64>,
    started: usize,
    breach_at: Option<u64>,
    breach_handled: bool,
    forced_done: bool,
    recovery_compromised: bool,
    halted: bool,
    recovered_all: bool,
    known: BTreeSet<Hash256>,
    handled_alerts: BTreeSet<(AlertKind, Hash256)>,
    swept: BTreeSet<OutPoint>,
    rate_blocked: BTreeSet<usize>,
}

struct Job {
    tx: Transaction,
    keyset: usize,
    script: Script,
    amount: u64,
    mode: SighashMode,
    path: Option<SpendPath>,
    layered: bool,
    sigs: BTreeMap<PublicKey, Vec<u8>>,
}

/// Funding source for a new vault deposit.
#[derive(Clone, Copy, Debug)]
enum Funding {
    /// Select active-wallet coins for this vault output amount.
    Amount(u64),
    /// Move this whole active-wallet output into the vault.
    Sweep(OutPoint),
}

type EphSet = Vec<(String, String, PublicKey)>;

/// The owner's whole custody deployment plus the simulated world around it.
pub struct Custody {
    pub cfg: SimConfig,
    pub chain: ChainState,
    pub fleet: Fleet,
    pub avt_store: ActStore,
    pub p2rw_store: ActStore,
    pub towers: Vec<WatchtowerNode>,
    tower_keys: Vec<[u8; 32]>,
    event_cursor: usize,
    pub vaults: Vec<VaultRecord>,
    pub traces: Vec<ProcessTrace>,
    /// Alerts delivered to the owner.
    pub alerts: Vec<Alert>,
    inbox: Vec<Alert>,
    owner: Owner,
    pub human_channels: ChannelState,
    /// Destination the (possibly compromised) computer interface presents.
    pub tampered_destination: Option<Script>,
    /// Compromised towers whose actions the adversary suppresses.
    pub silenced: BTreeSet<usize>,
    pub suppressed: usize,
    owned: BTreeMap<Vec<u8>, OwnedScript>,
    pub payee: Script,
    pub attacker_script: Script,
    active_index: u32,
    recovery_index: u32,
    pub tick: u64,
    rng: ChaCha20Rng,
    roots: BTreeMap<OutPoint, usize>,
    /// Auditor copy of every stored covenant transaction.
    reference: BTreeMap<(String, Hash256), Transaction>,
    vaulted_partitions: usize,
}

fn single_key_script(tag: &str, seed: u64) -> Script {
    let secret = tagged_hash(tag, &[&seed.to_le_bytes()]);
    let kp = crate::txkit::KeyPair::from_secret(tag, secret.0);
    MultisigSpec::new(1, vec![kp.public]).expect("1-of-1").script()
}

/// Address string of a script as shown to operators.
pub fn address_of(script: &Script) -> String {
    sha256d(&script.encode()).to_hex()
}

fn dummy_spec(threshold: usize, count: usize) -> MultisigSpec {
    MultisigSpec::new(threshold, (0..count).map(|i| PublicKey([i as u8 + 1; 32])).collect()).expect("valid")
}

impl Custody {
    /// Validates the config, builds every component and runs set-up.
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        let mut sim = Custody::assemble(cfg)?;
        let trace = sim.run_setup(&SetupOptions::default());
        if let Some(reason) = trace.abort_reason() {
            return Err(SimError::Setup(reason.to_string()));
        }
        Ok(sim)
    }

    /// Set-up, funding and vaulting of every configured partition, with the
    /// deposits mined.
    pub fn launch(cfg: SimConfig) -> Result<Self, SimError> {
        let mut sim = Custody::new(cfg)?;
        sim.vault_all();
        Ok(sim)
    }

    /// Components only; `run_setup` has not happened yet.
    pub fn assemble(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let fleet = Fleet::new(cfg.topology.clone(), cfg.seed).map_err(|e| SimError::Config {
            field: "topology".into(),
            reason: e.to_string(),
        })?;
        let rng = ChaCha20Rng::from_seed(tagged_hash("vaultlab/custody", &[&cfg.seed.to_le_bytes()]).0);
        let holders = fleet.members(WalletRole::VaultWallet);
        let p2rw_holders = (0..cfg.topology.p2rw_storage_s).map(|i| format!("p2rw-store/{i}"));
        Ok(Custody {
            chain: ChainState::with_bribe_bonus(cfg.feerates.bribe),
            avt_store: ActStore::new("avt", holders),
            p2rw_store: ActStore::new("p2rw", p2rw_holders),
            towers: Vec::new(),
            tower_keys: Vec::new(),
            event_cursor: 0,
            vaults: Vec::new(),
            traces: Vec::new(),
            alerts: Vec::new(),
            inbox: Vec::new(),
            owner: Owner::default(),
            human_channels: ChannelState::default(),
            tampered_destination: None,
            silenced: BTreeSet::new(),
            suppressed: 0,
            owned: BTreeMap::new(),
            payee: single_key_script("vaultlab/payee", cfg.seed),
            attacker_script: single_key_script("vaultlab/attacker", cfg.seed),
            active_index: 0,
            recovery_index: 0,
            tick: 0,
            rng,
            roots: BTreeMap::new(),
            reference: BTreeMap::new(),
            vaulted_partitions: 0,
            fleet,
            cfg,
        })
    }

    fn record(&mut self, trace: ProcessTrace) -> ProcessTrace {
        self.traces.push(trace.clone());
        trace
    }

    fn register(&mut self, script: &Script, holding: Holding, index: u32, spec: Option<MultisigSpec>) {
        self.owned.entry(script.encode()).or_insert(OwnedScript { holding, index, spec });
    }

    /// Current address of a key-tree wallet, registered as owned.
    fn wallet(&mut self, role: WalletRole) -> MultisigSpec {
        let (index, holding) = match role {
            WalletRole::Active => (self.active_index, Holding::Active),
            WalletRole::Recovery => (self.recovery_index, Holding::Recovery),
            WalletRole::Fee => (0, Holding::Fee),
            WalletRole::VaultWallet => unreachable!("vault wallet has no key tree"),
        };
        let spec = self.fleet.wallet_spec(role, index).expect("exported window covers current index");
        self.register(&spec.script(), holding, index, Some(spec.clone()));
        spec
    }

    pub fn classify(&self, script: &Script) -> Holding {
        if *script == self.attacker_script {
            return Holding::Attacker;
        }
        if *script == self.payee {
            return Holding::Payee;
        }
        self.owned.get(&script.encode()).map_or(Holding::Unknown, |o| o.holding)
    }

    pub fn active_index(&self) -> u32 {
        self.active_index
    }

    pub fn recovery_index(&self) -> u32 {
        self.recovery_index
    }

    // ---------------------------------------------------------------- set-up

    pub fn run_setup(&mut self, opts: &SetupOptions) -> ProcessTrace {
        let mut trace = ProcessTrace::new("setup", self.tick);
        let ids: Vec<String> = self.fleet.hms().map(|h| h.hm_id.clone()).collect();
        let w = self.cfg.topology.watchtower_w;
        let peers = ids.len() + w - 1;
        for id in &ids {
            if self.fleet.hm(id).is_some_and(|h| h.failed) {
                trace.step(1, id, "establish pairwise channels", "device failure");
                trace.abort("device");
                return self.record(trace);
            }
            trace.step(1, id, "establish pairwise channels", format!("{peers} peers"));
        }
        for id in &ids {
            let hm = self.fleet.hm(id).expect("listed");
            if hm.role != WalletRole::VaultWallet {
                trace.step(2, id, "generate key tree", format!("{} paths", hm.path_records().len()));
            }
        }
        let active = self.wallet(WalletRole::Active);
        let recovery = self.wallet(WalletRole::Recovery);
        let fee = self.wallet(WalletRole::Fee);
        let addr = |s: &MultisigSpec| address_of(&s.script());
        let sets = [
            (WalletRole::Active, vec![addr(&active), addr(&recovery)]),
            (WalletRole::Recovery, vec![addr(&recovery)]),
            (WalletRole::VaultWallet, vec![addr(&active), addr(&recovery)]),
            (WalletRole::Fee, vec![addr(&fee)]),
        ];
        for (role, addresses) in sets {
            for id in self.fleet.members(role) {
                for a in &addresses {
                    let presented = if opts.tamper_address { address_of(&self.attacker_script) } else { a.clone() };
                    if human_check(&self.human_channels, a.as_bytes(), presented.as_bytes()) == CheckResult::Fail {
                        trace.step(3, &id, "human check of address", "mismatch");
                        trace.abort("human-check");
                        return self.record(trace);
                    }
                    self.fleet.hm_mut(&id).expect("member").stored_addresses.insert(presented);
                }
                trace.step(3, &id, "store address set", format!("{} addresses", addresses.len()));
            }
        }
        let consistent = [WalletRole::Active, WalletRole::VaultWallet].iter().all(|r| {
            let sets: BTreeSet<_> =
                self.fleet.members(*r).iter().map(|id| self.fleet.hm(id).expect("m").stored_addresses.clone()).collect();
            sets.len() <= 1
        });
        trace.step(3, "computer interface", "compare address sets", if consistent { "consistent" } else { "inconsistent" });
        for i in 0..w {
            let mut key = [0u8; 32];
            self.rng.fill_bytes(&mut key);
            let mut node = WatchtowerNode::new(format!("watchtower/{i}"), self.cfg.watchtower_variant, key);
            if self.cfg.owner_suspects_recovery {
                node.variant = Variant::Notification;
            }
            if self.cfg.dead_watchtowers.contains(&i) {
                node.alive = false;
            }
            trace.step(4, &node.node_id, "share authentication key", if node.alive { "ok" } else { "down" });
            self.towers.push(node);
            self.tower_keys.push(key);
        }
        if self.cfg.fee_wallet_funds > 0 {
            let op = self.chain.fund(fee.script(), self.cfg.fee_wallet_funds);
            trace.step(5, "fee wallet", "receive fee funds", op.to_string());
        }
        self.record(trace)
    }

    // ------------------------------------------------------ external payment

    pub fn run_external_payment(&mut self, amount: u64, penny_test: bool) -> (Vec<OutPoint>, ProcessTrace) {
        let mut trace = ProcessTrace::new("external-payment", self.tick);
        let spec = self.wallet(WalletRole::Active);
        let script = spec.script();
        let address = address_of(&script);
        let presented = self.tampered_destination.as_ref().map_or_else(|| address.clone(), address_of);
        if human_check(&self.human_channels, address.as_bytes(), presented.as_bytes()) == CheckResult::Fail {
            trace.step(1, "active wallet", "human check of receiving address", "mismatch");
            trace.abort("human-check");
            return (Vec::new(), self.record(trace));
        }
        trace.step(1, "active wallet", "human check of receiving address", "pass");
        let mut outs = Vec::new();
        if penny_test && amount > PENNY {
            let op = self.chain.fund(script.clone(), PENNY);
            trace.step(2, "payer", "penny test payment", op.to_string());
            outs.push(op);
            let op = self.chain.fund(script, amount - PENNY);
            trace.step(3, "payer", "remaining payment", op.to_string());
            outs.push(op);
        } else {
            let op = self.chain.fund(script, amount);
            trace.step(2, "payer", "payment", op.to_string());
            outs.push(op);
        }
        (outs, self.record(trace))
    }

    // -------------------------------------------------------------- vaulting

    fn layered(&self) -> bool {
        self.cfg.revault_layers > 1
    }

    fn revault_feerates(&self) -> [u64; 3] {
        let r = self.cfg.feerates.recovery();
        [self.cfg.feerates.owner, r, 2 * r]
    }

    fn draft_vault_fee(&self, layered: bool) -> u64 {
        let topo = &self.cfg.topology;
        let active = dummy_spec(topo.active.threshold, topo.active.count);
        let path = dummy_spec(topo.vault.threshold, topo.vault.count);
        let tmpl = VaultTemplate {
            timelock: topo.timelock_t,
            active,
            recovery_path: path,
            deposit_outpoint: OutPoint::new(Hash256::ZERO, 0),
            deposit_amount: 1,
            amount: 1,
            fee: 0,
            change_script: None,
            layered,
        };
        self.cfg.feerates.owner * build_vault_tx(&tmpl).expect("draft").vsize()
    }

    fn draft_p2rw_fee(&self) -> u64 {
        let topo = &self.cfg.topology;
        let rec = dummy_spec(topo.recovery.threshold, topo.recovery.count);
        self.cfg.feerates.recovery() * build_p2rw_tx(Hash256::ZERO, 1, &rec, 0).vsize()
    }

    fn draft_ctv(&self, deposit_amount: u64) -> CtvParams {
        let topo = &self.cfg.topology;
        CtvParams {
            timelock: topo.timelock_t,
            active: dummy_spec(topo.active.threshold, topo.active.count),
            recovery_wallet: dummy_spec(topo.recovery.threshold, topo.recovery.count),
            deposit_amount,
            vault_fee: 0,
            p2rw_fee: 0,
        }
    }

    /// (vault fee, p2rw fee) for the configured mechanism.
    fn covenant_fees(&self) -> (u64, u64) {
        match self.cfg.mechanism {
            Mechanism::DeletedKey => (self.draft_vault_fee(self.layered()), self.draft_p2rw_fee()),
            Mechanism::Ctv => {
                let plan = build_ctv_plan(&self.draft_ctv(1), Hash256::ZERO).expect("draft");
                (
                    self.cfg.feerates.owner * plan.vault_node().template.vsize(),
                    self.cfg.feerates.recovery() * plan.p2rw_node().template.vsize(),
                )
            }
        }
    }

    fn draft_deposit_script(&self) -> Script {
        match self.cfg.mechanism {
            Mechanism::DeletedKey => dummy_spec(self.cfg.topology.vault.threshold, self.cfg.topology.vault.count).script(),
            Mechanism::Ctv => crate::covenant::ctv_commit_script(&Hash256::ZERO, &Hash256::ZERO),
        }
    }

    fn deposit_fee(&self, inputs: usize, change: bool) -> u64 {
        let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
        for i in 0..inputs {
            tx.inputs.push(TxInput { outpoint: OutPoint::new(Hash256::ZERO, i as u32), sequence: 0 });
        }
        tx.outputs.push(TxOutput { amount: 0, script: self.draft_deposit_script() });
        if change {
            tx.outputs.push(TxOutput { amount: 0, script: dummy_spec(self.cfg.topology.active.threshold, self.cfg.topology.active.count).script() });
        }
        self.cfg.feerates.owner * tx.vsize()
    }

    /// External payment that exactly funds one vault of `amount`.
    pub fn funding_needed(&self, amount: u64, inputs: usize) -> u64 {
        amount + self.covenant_fees().0 + self.deposit_fee(inputs, false)
    }

    /// Confirmed active-wallet outputs nobody is spending, oldest address first.
    fn spendable_active(&self) -> Vec<(OutPoint, u64, u32)> {
        let mut coins: Vec<(OutPoint, u64, u32)> = self
            .chain
            .utxos()
            .iter()
            .filter_map(|(op, u)| {
                let o = self.owned.get(&u.script.encode())?;
                (o.holding == Holding::Active && self.chain.spender_of(op).is_none()).then_some((*op, u.amount, o.index))
            })
            .collect();
        coins.sort_by_key(|(op, _, index)| (*index, *op));
        coins
    }

    /// Selects inputs and builds the unsigned deposit: the smallest coin that
    /// covers the target on its own, else oldest-first accumulation.
    /// `script_for` receives the deposit amount.
    fn build_deposit(
        &mut self,
        funding: Funding,
        vault_fee: u64,
        script_for: &mut dyn FnMut(&mut Self, u64) -> Result<Script, String>,
    ) -> Result<(Transaction, u64), String> {
        let (inputs, deposit_amount, change) = match funding {
            Funding::Sweep(op) => {
                let u = self.chain.utxo(&op).ok_or("funding output missing")?.amount;
                let fee = self.deposit_fee(1, false);
                (vec![op], u.checked_sub(fee).ok_or("funding output below fee")?, 0)
            }
            Funding::Amount(amount) => {
                let target = amount + vault_fee;
                let mut coins = self.spendable_active();
                let fee_one = self.deposit_fee(1, false);
                if let Some(pos) = coins
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.1 >= target + fee_one)
                    .min_by_key(|(i, c)| (c.1, *i))
                    .map(|(i, _)| i)
                {
                    let coin = coins.remove(pos);
                    coins.insert(0, coin);
                }
                let mut picked = Vec::new();
                let mut sum = 0;
                let mut done = None;
                for (op, value, _) in coins {
                    picked.push(op);
                    sum += value;
                    let fee0 = self.deposit_fee(picked.len(), false);
                    if sum >= target + fee0 {
                        let fee1 = self.deposit_fee(picked.len(), true);
                        let change = if sum > target + fee1 { sum - target - fee1 } else { 0 };
                        done = Some(change);
                        break;
                    }
                }
                let change = done.ok_or("insufficient active-wallet funds")?;
                (picked, target, change)
            }
        };
        let script = script_for(self, deposit_amount)?;
        let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
        for op in inputs {
            tx.inputs.push(TxInput { outpoint: op, sequence: 0 });
        }
        tx.outputs.push(TxOutput { amount: deposit_amount, script });
        if change > 0 {
            let spec = self.wallet(WalletRole::Active);
            tx.outputs.push(TxOutput { amount: change, script: spec.script() });
        }
        Ok((tx, deposit_amount))
    }

    /// Active-wallet signatures on every input of `tx`.
    fn sign_owned_inputs(&mut self, tx: &mut Transaction) -> Result<(), String> {
        for i in 0..tx.inputs.len() {
            let op = tx.inputs[i].outpoint;
            let prev = self.chain.utxo(&op).ok_or("input missing")?.clone();
            let owned = self.owned.get(&prev.script.encode()).cloned().ok_or("input not owned")?;
            let spec = owned.spec.ok_or("input has no multisig spec")?;
            let role = match owned.holding {
                Holding::Active => WalletRole::Active,
                Holding::Recovery => WalletRole::Recovery,
                Holding::Fee => WalletRole::Fee,
                _ => return Err("input not held by a key-tree wallet".into()),
            };
            let sigs = self
                .fleet
                .sign_for_spec(role, owned.index, &spec, tx, i, SighashMode::All, &prev.script, prev.amount)
                .map_err(|e| e.to_string())?;
            tx.set_witness(i, sigs);
        }
        Ok(())
    }

    fn broadcast(&mut self, tx: Transaction) -> Result<Hash256, Rejection> {
        let txid = self.chain.submit(tx, Visibility::Public)?;
        self.owner.known.insert(txid);
        Ok(txid)
    }

    fn finish_deposit(&mut self, partition: usize, deposit: &mut Transaction, trace: &mut ProcessTrace, step: u32) -> Result<Hash256, String> {
        let intended = deposit.serialize_base();
        if human_check(&self.human_channels, &intended, &intended) == CheckResult::Fail {
            trace.step(step, "active wallet", scoped(partition, "human check of final signature"), "mismatch");
            return Err("human-check".into());
        }
        self.sign_owned_inputs(deposit)?;
        trace.step(step, "active wallet", scoped(partition, "sign deposit"), "human check pass");
        let txid = self.broadcast(deposit.clone()).map_err(|e| e.reason().to_string())?;
        trace.step(step, "active wallet", scoped(partition, "broadcast deposit"), txid.to_string());
        Ok(txid)
    }

    /// Runs the nine vaulting steps for every amount.
    pub fn run_vaulting(&mut self, partitions: &[u64], opts: &VaultingOptions) -> (Vec<usize>, ProcessTrace) {
        let mut trace = ProcessTrace::new("vaulting", self.tick);
        let mut ids = Vec::new();
        for &amount in partitions {
            let partition = self.vaulted_partitions;
            match self.vault_partition(partition, Funding::Amount(amount), opts, &mut trace) {
                Ok(id) => {
                    self.vaulted_partitions += 1;
                    ids.push(id);
                }
                Err(reason) => {
                    trace.abort(reason);
                    break;
                }
            }
        }
        (ids, self.record(trace))
    }

    /// Funds and vaults every configured partition and mines the deposits.
    pub fn vault_all(&mut self) -> ProcessTrace {
        let inputs = if self.cfg.penny_test { 2 } else { 1 };
        for amount in self.cfg.partitions.clone() {
            let needed = self.funding_needed(amount, inputs);
            self.run_external_payment(needed, self.cfg.penny_test);
        }
        let partitions = self.cfg.partitions.clone();
        let (_, trace) = self.run_vaulting(&partitions, &VaultingOptions::default());
        self.mine();
        trace
    }

    fn vault_partition(&mut self, partition: usize, funding: Funding, opts: &VaultingOptions, trace: &mut ProcessTrace) -> Result<usize, String> {
        match self.cfg.mechanism {
            Mechanism::DeletedKey => self.vault_deleted_key(partition, funding, opts, trace),
            Mechanism::Ctv => self.vault_ctv(partition, funding, opts, trace),
        }
    }

    fn gen_eph_set(&mut self, partition: usize, members: &[String], trace: &mut ProcessTrace, label: &str) -> Result<EphSet, String> {
        let mut set = Vec::new();
        for id in members {
            let (key_id, pk) = self.fleet.gen_ephemeral(id).map_err(|_| "device".to_string())?;
            trace.step(1, id, scoped(partition, &format!("generate {label} ephemeral key")), &key_id);
            set.push((id.clone(), key_id, pk));
        }
        Ok(set)
    }

    fn sign_jobs(&mut self, jobs: &mut [Job], sets: &[EphSet], pos: usize) -> Result<(), String> {
        for job in jobs.iter_mut() {
            let (hm, key_id, pk) = &sets[job.keyset][pos];
            let sig = self
                .fleet
                .hm(hm)
                .ok_or("device missing")?
                .sign_input_ephemeral(key_id, &job.tx, 0, job.mode, &job.script, job.amount)
                .map_err(|e| e.to_string())?;
            job.sigs.insert(*pk, sig);
        }
        self.fleet.log_access(&sets[0][pos].0, "sign covenant transactions");
        Ok(())
    }

    fn store_copy(&mut self, holder: &str, tx: &Transaction) {
        let txid = compute_txid(tx).expect("well formed");
        self.avt_store.store(holder, txid, tx).expect("holder exists");
        self.reference.insert((self.avt_store.label.clone(), txid), tx.clone());
    }

    fn store_p2rw(&mut self, vault_txid: Hash256, tx: &Transaction) {
        for h in self.p2rw_store.holder_ids() {
            self.p2rw_store.store(&h, vault_txid, tx).expect("holder exists");
        }
        self.reference.insert((self.p2rw_store.label.clone(), vault_txid), tx.clone());
    }

    fn vault_deleted_key(&mut self, partition: usize, funding: Funding, opts: &VaultingOptions, trace: &mut ProcessTrace) -> Result<usize, String> {
        let topo = self.cfg.topology.clone();
        let p = topo.vault.threshold;
        let layered = self.layered();
        let members = self.fleet.members(WalletRole::VaultWallet);
        if let Some(dead) = members.iter().find(|id| self.fleet.hm(id).is_some_and(|h| h.failed)) {
            trace.step(1, dead, scoped(partition, "generate ephemeral key"), "device failure");
            return Err("device".into());
        }
        let mut sets = vec![self.gen_eph_set(partition, &members, trace, "layer-1")?];
        if layered {
            sets.push(self.gen_eph_set(partition, &members, trace, "layer-2")?);
        }
        let specs: Vec<MultisigSpec> = sets
            .iter()
            .map(|s| MultisigSpec::new(p, s.iter().map(|e| e.2).collect()).expect("p <= t"))
            .collect();
        let deposit_script = specs[0].script();
        trace.step(2, "vault wallet", scoped(partition, "construct p-of-t deposit address"), address_of(&deposit_script));

        let active = self.wallet(WalletRole::Active);
        let recovery = self.wallet(WalletRole::Recovery);
        let (vault_fee, p2rw_fee) = (self.draft_vault_fee(layered), self.draft_p2rw_fee());
        let ds = deposit_script.clone();
        let (mut deposit, deposit_amount) = self.build_deposit(funding, vault_fee, &mut |_, _| Ok(ds.clone()))?;
        let deposit_txid = compute_txid(&deposit).map_err(|e| e.to_string())?;
        trace.step(3, "active wallet", scoped(partition, "build deposit, unbroadcast"), deposit_txid.to_string());
        if opts.misorder {
            self.finish_deposit(partition, &mut deposit, trace, 3)?;
        }

        let amount = deposit_amount - vault_fee;
        let template = VaultTemplate {
            timelock: topo.timelock_t,
            active: active.clone(),
            recovery_path: specs[0].clone(),
            deposit_outpoint: OutPoint::new(deposit_txid, 0),
            deposit_amount,
            amount,
            fee: vault_fee,
            change_script: None,
            layered,
        };
        let vault_out_script = template.vault_output_script();
        let avt = build_vault_tx(&template).map_err(|e| e.to_string())?;
        let vault_txid = compute_txid(&avt).map_err(|e| e.to_string())?;
        let p2rw = build_p2rw_tx(vault_txid, amount, &recovery, p2rw_fee);
        let job = |tx: Transaction, keyset: usize, script: &Script, amount: u64, mode, path, layered| Job {
            tx,
            keyset,
            script: script.clone(),
            amount,
            mode,
            path,
            layered,
            sigs: BTreeMap::new(),
        };
        let mut jobs = vec![
            job(avt, 0, &deposit_script, deposit_amount, SighashMode::All, None, false),
            job(p2rw, 0, &vault_out_script, amount, SighashMode::AllAnyoneCanPay, Some(SpendPath::Recovery), layered),
        ];
        if layered {
            let l2_deposit_script = specs[1].script();
            let l2_vault_fee = self.draft_vault_fee(false);
            let revault_size = build_revault_tx(VaultLayer { index: 0, total: 2 }, vault_txid, amount, &l2_deposit_script, 0)
                .map_err(|e| e.to_string())?
                .vsize();
            for rate in self.revault_feerates() {
                let revault = build_revault_tx(VaultLayer { index: 0, total: 2 }, vault_txid, amount, &l2_deposit_script, rate * revault_size)
                    .map_err(|e| e.to_string())?;
                let revault_txid = compute_txid(&revault).map_err(|e| e.to_string())?;
                let l2_deposit_amount = revault.outputs[0].amount;
                let l2 = VaultTemplate {
                    timelock: topo.timelock_t,
                    active: active.clone(),
                    recovery_path: specs[1].clone(),
                    deposit_outpoint: OutPoint::new(revault_txid, 0),
                    deposit_amount: l2_deposit_amount,
                    amount: l2_deposit_amount.saturating_sub(l2_vault_fee),
                    fee: l2_vault_fee,
                    change_script: None,
                    layered: false,
                };
                let l2_script = l2.vault_output_script();
                let l2_avt = build_vault_tx(&l2).map_err(|e| e.to_string())?;
                let l2_txid = compute_txid(&l2_avt).map_err(|e| e.to_string())?;
                let l2_p2rw = build_p2rw_tx(l2_txid, l2.amount, &recovery, p2rw_fee);
                jobs.push(job(revault, 0, &vault_out_script, amount, SighashMode::All, Some(SpendPath::Revault), true));
                jobs.push(job(l2_avt, 1, &l2_deposit_script, l2_deposit_amount, SighashMode::All, None, false));
                jobs.push(job(l2_p2rw, 1, &l2_script, l2.amount, SighashMode::AllAnyoneCanPay, Some(SpendPath::Recovery), false));
            }
        }
        trace.step(4, "computer interface", scoped(partition, "construct unsigned covenant transactions"), format!("{} transactions", jobs.len()));

        for pos in 0..p - 1 {
            self.sign_jobs(&mut jobs, &sets, pos)?;
            trace.step(5, &members[pos], scoped(partition, "sign covenant transactions"), "partial");
        }

        let mut activation = Activation::new(topo.required_deletions());
        let mut withheld = opts.withheld_notifications;
        let delete_all = |sim: &mut Self, pos: usize, trace: &mut ProcessTrace, step: u32, activation: &mut Activation, withheld: &mut usize| -> Result<(), String> {
            let id = sets[0][pos].0.clone();
            for set in &sets {
                let receipt = sim.fleet.delete_key(&id, &set[pos].1).map_err(|e| e.to_string())?;
                trace.step(step, &id, scoped(partition, "delete ephemeral key"), &receipt.key_id);
            }
            if *withheld > 0 {
                *withheld -= 1;
                trace.step(step, &id, scoped(partition, "notify deletion"), "lost");
            } else {
                activation.record_deletion(&id);
                trace.step(step, &id, scoped(partition, "notify deletion"), "received");
            }
            Ok(())
        };
        for pos in p - 1..members.len() {
            self.sign_jobs(&mut jobs, &sets, pos)?;
            for j in jobs.iter_mut() {
                let arranged = specs[j.keyset].arrange(&j.sigs).ok_or("threshold not reached")?;
                let witness = match j.path {
                    None => arranged,
                    Some(path) => path_witness(arranged, path, j.layered),
                };
                j.tx.set_witness(0, witness);
            }
            let valid = jobs.iter().all(|j| eval_script(&j.script, &ExecContext::new(&j.tx, 0, 0, j.amount)).is_ok());
            trace.step(6, &members[pos], scoped(partition, "sign and validate covenant transactions"), if valid { "valid" } else { "invalid" });
            if !valid {
                return Err("validation".into());
            }
            for j in &jobs {
                if j.mode == SighashMode::All {
                    let tx = j.tx.clone();
                    self.store_copy(&members[pos], &tx);
                }
            }
            trace.step(6, &members[pos], scoped(partition, "store covenant transactions"), "stored");
            delete_all(self, pos, trace, 6, &mut activation, &mut withheld)?;
        }
        for pos in 0..p - 1 {
            if self.avt_store.copies(&vault_txid) < topo.avt_storage_r {
                for j in &jobs {
                    if j.mode == SighashMode::All {
                        let tx = j.tx.clone();
                        self.store_copy(&members[pos], &tx);
                    }
                }
                trace.step(7, &members[pos], scoped(partition, "top up storage"), format!("{} copies", self.avt_store.copies(&vault_txid)));
            }
            delete_all(self, pos, trace, 7, &mut activation, &mut withheld)?;
        }
        for j in &jobs {
            if j.mode == SighashMode::AllAnyoneCanPay {
                let vt = j.tx.inputs[0].outpoint.txid;
                self.store_p2rw(vt, &j.tx);
            }
        }
        trace.step(7, "p2rw storage", scoped(partition, "store P2RW copies"), format!("{} holders", self.p2rw_store.holder_ids().len()));
        if activation.deletions.len() < activation.required_deletions {
            trace.step(7, "computer interface", scoped(partition, "count deletion notifications"), format!("{} of {}", activation.deletions.len(), activation.required_deletions));
            return Err("activation".into());
        }

        let mut txs = jobs.into_iter().map(|j| j.tx);
        let avt = txs.next().expect("avt");
        let p2rw = txs.next().expect("p2rw");
        let rest: Vec<Transaction> = txs.collect();
        let mut revaults = Vec::new();
        let mut layer2 = Vec::new();
        for chunk in rest.chunks(3) {
            let (revault, l2_avt, l2_p2rw) = (&chunk[0], &chunk[1], &chunk[2]);
            revaults.push(revault.clone());
            let l2_txid = compute_txid(l2_avt).expect("well formed");
            layer2.push(CovenantPair {
                partition,
                layer: 1,
                mechanism: Mechanism::DeletedKey,
                deposit_script: specs[1].script(),
                deposit_outpoint: l2_avt.inputs[0].outpoint,
                deposit_amount: revault.outputs[0].amount,
                avt: l2_avt.clone(),
                vault_txid: l2_txid,
                vault_script: l2_avt.outputs[0].script.clone(),
                vault_amount: l2_avt.outputs[0].amount,
                p2rw: l2_p2rw.clone(),
                recovery_script: recovery.script(),
                revaults: Vec::new(),
                layered: false,
                activation: activation.clone(),
            });
        }
        let pair = CovenantPair {
            partition,
            layer: 0,
            mechanism: Mechanism::DeletedKey,
            deposit_script,
            deposit_outpoint: OutPoint::new(deposit_txid, 0),
            deposit_amount,
            avt,
            vault_txid,
            vault_script: vault_out_script,
            vault_amount: amount,
            p2rw,
            recovery_script: recovery.script(),
            revaults,
            layered,
            activation,
        };
        self.complete_vault(partition, pair, layer2, None, deposit, opts, trace)
    }

    fn vault_ctv(&mut self, partition: usize, funding: Funding, opts: &VaultingOptions, trace: &mut ProcessTrace) -> Result<usize, String> {
        let mut salt = [0u8; 32];
        self.rng.fill_bytes(&mut salt);
        let salt = Hash256(salt);
        let active = self.wallet(WalletRole::Active);
        let recovery = self.wallet(WalletRole::Recovery);
        let (vault_fee, p2rw_fee) = self.covenant_fees();
        let timelock = self.cfg.topology.timelock_t;
        let params = |deposit_amount| CtvParams {
            timelock,
            active: active.clone(),
            recovery_wallet: recovery.clone(),
            deposit_amount,
            vault_fee,
            p2rw_fee,
        };
        let mut plan_slot = None;
        let (mut deposit, deposit_amount) = {
            let mut make = |_: &mut Self, amount: u64| {
                let plan = build_ctv_plan(&params(amount), salt).map_err(|e| e.to_string())?;
                let script = plan.deposit_script();
                plan_slot = Some(plan);
                Ok(script)
            };
            self.build_deposit(funding, vault_fee, &mut make)?
        };
        let plan = plan_slot.expect("planned");
        trace.step(1, "computer interface", scoped(partition, "plan vault and P2RW templates"), plan.entropy_salt.short());
        trace.step(2, "computer interface", scoped(partition, "deposit address commits to vault template"), address_of(&plan.deposit_script()));
        let deposit_txid = compute_txid(&deposit).map_err(|e| e.to_string())?;
        trace.step(3, "active wallet", scoped(partition, "build deposit, unbroadcast"), deposit_txid.to_string());
        if opts.misorder {
            self.finish_deposit(partition, &mut deposit, trace, 3)?;
        }
        let deposit_outpoint = OutPoint::new(deposit_txid, 0);
        let avt = plan.vault_tx(deposit_outpoint);
        let vault_txid = compute_txid(&avt).map_err(|e| e.to_string())?;
        let p2rw = plan.p2rw_tx(vault_txid);
        trace.step(4, "computer interface", scoped(partition, "instantiate templates"), vault_txid.to_string());
        for holder in self.avt_store.holder_ids().into_iter().take(self.cfg.topology.avt_storage_r) {
            self.store_copy(&holder, &avt);
            trace.step(6, &holder, scoped(partition, "store vault template"), "stored");
        }
        self.store_p2rw(vault_txid, &p2rw);
        trace.step(7, "p2rw storage", scoped(partition, "store P2RW copies"), format!("{} holders", self.p2rw_store.holder_ids().len()));
        let pair = CovenantPair {
            partition,
            layer: 0,
            mechanism: Mechanism::Ctv,
            deposit_script: plan.deposit_script(),
            deposit_outpoint,
            deposit_amount,
            vault_script: plan.vault_script().clone(),
            vault_amount: avt.outputs[0].amount,
            avt,
            vault_txid,
            p2rw,
            recovery_script: recovery.script(),
            revaults: Vec::new(),
            layered: false,
            activation: Activation::new(0),
        };
        self.complete_vault(partition, pair, Vec::new(), Some(plan), deposit, opts, trace)
    }

    #[allow(clippy::too_many_arguments)]
    fn complete_vault(
        &mut self,
        partition: usize,
        pair: CovenantPair,
        layer2: Vec<CovenantPair>,
        ctv: Option<CtvPlan>,
        mut deposit: Transaction,
        opts: &VaultingOptions,
        trace: &mut ProcessTrace,
    ) -> Result<usize, String> {
        let mut watch = vec![(pair.vault_txid, pair.deposit_outpoint, pair.vault_amount, pair.p2rw.clone(), pair.revaults.last().cloned())];
        for l2 in &layer2 {
            watch.push((l2.vault_txid, l2.deposit_outpoint, l2.vault_amount, l2.p2rw.clone(), None));
        }
        for i in 0..self.towers.len() {
            for (txid, deposit_op, amount, p2rw, revault) in &watch {
                let msg = AuthMessage::new(&self.tower_keys[i], registration_payload(txid, deposit_op, *amount));
                let height = self.chain.height();
                let result = self.towers[i].register_watch(&msg, *txid, *deposit_op, *amount, Some(p2rw.clone()), revault.clone(), height);
                let node = self.towers[i].node_id.clone();
                trace.step(8, node, scoped(partition, "register vault txid"), match result {
                    Ok(_) => "registered".to_string(),
                    Err(e) => e.to_string(),
                });
            }
        }
        let deposit_txid = pair.deposit_outpoint.txid;
        if !opts.misorder {
            self.finish_deposit(partition, &mut deposit, trace, 9)?;
        }
        self.owner.known.extend([deposit_txid, pair.vault_txid, pair.p2rw_txid()]);
        self.owner.known.extend(pair.revaults.iter().map(|t| compute_txid(t).expect("well formed")));
        for l2 in &layer2 {
            self.owner.known.extend([l2.vault_txid, l2.p2rw_txid()]);
            self.register(&l2.deposit_script, Holding::Deposit, 0, None);
            self.register(&l2.vault_script, Holding::Vault, 0, None);
        }
        self.register(&pair.deposit_script, Holding::Deposit, 0, None);
        self.register(&pair.vault_script, Holding::Vault, 0, None);
        self.roots.insert(pair.deposit_outpoint, partition);
        self.vaults.push(VaultRecord {
            partition,
            pair,
            deposit_tx: deposit,
            layer2,
            ctv,
            active_index: self.active_index,
            state: VaultState::Active,
            rotate: false,
        });
        Ok(self.vaults.len() - 1)
    }

    // ------------------------------------------------------------ scheduler

    pub fn mine(&mut self) -> Vec<Hash256> {
        let mined = self.chain.mine_block();
        let depth = self.cfg.confirm_depth;
        for v in &mut self.vaults {
            let conf = self.chain.confirmations(&v.pair.deposit_outpoint.txid).unwrap_or(0);
            if conf >= depth {
                v.pair.activation.deposit_confirmed = true;
                for l2 in &mut v.layer2 {
                    l2.activation.deposit_confirmed = true;
                }
            }
        }
        mined
    }

    fn activity(&self) -> (usize, usize, usize, usize) {
        (self.chain.events().len(), self.alerts.len(), self.traces.len(), self.inbox.len())
    }

    /// One block interval: actors react until quiet, then a block is mined.
    pub fn step(&mut self, adversary: &mut dyn Adversary) {
        self.tick += 1;
        self.fleet.clock = self.tick;
        for _ in 0..MAX_ROUNDS {
            let before = self.activity();
            adversary.act(self);
            self.owner_step();
            self.tower_step();
            self.owner_inbox();
            if self.activity() == before {
                break;
            }
        }
        self.mine();
    }

    fn settled(&self) -> bool {
        self.chain.mempool().next().is_none() && self.owner.in_flight.is_empty() && self.owner.breach_at.is_none_or(|_| self.owner.breach_handled)
    }

    /// Runs to the horizon and then until the mempool drains.
    pub fn run(&mut self, adversary: &mut dyn Adversary) {
        let horizon = self.cfg.horizon();
        while self.tick < horizon || (!self.settled() && self.tick < horizon + SETTLE_TICKS) {
            self.step(adversary);
        }
    }

    // ----------------------------------------------------------- watchtowers

    fn tower_step(&mut self) {
        let events: Vec<_> = self.chain.events()[self.event_cursor..].to_vec();
        self.event_cursor = self.chain.events().len();
        for ev in &events {
            for i in 0..self.towers.len() {
                let actions = self.towers[i].observe(ev, &self.chain);
                let muted = self.towers[i].compromised && self.silenced.contains(&i);
                for action in actions {
                    if muted {
                        self.suppressed += 1;
                        continue;
                    }
                    match action {
                        Action::Alert(alert) => {
                            if self.towers[i].reachable() {
                                self.inbox.push(alert);
                            }
                        }
                        Action::BroadcastP2rw(vault_txid) => {
                            if let Some(tx) = self.towers[i].stored_p2rw.get(&vault_txid).cloned() {
                                if let Ok(txid) = self.broadcast(tx) {
                                    self.towers[i].broadcasts.push(txid);
                                }
                            }
                        }
                        Action::BroadcastRevault(vault_txid) => {
                            if let Some(tx) = self.towers[i].stored_revault.get(&vault_txid).cloned() {
                                if let Ok(txid) = self.broadcast(tx) {
                                    self.towers[i].broadcasts.push(txid);
                                    if let Some(v) = self.vaults.iter_mut().find(|v| v.pair.vault_txid == vault_txid) {
                                        v.state = VaultState::Revaulted;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// A compromised node, or an adversary sitting on every channel of a
    /// node, sends the owner an alert of its choosing.
    pub fn inject_alert(&mut self, node: usize, kind: AlertKind, txid: Hash256) -> bool {
        let Some(t) = self.towers.get(node) else { return false };
        let mitm = t.channels.iter().all(|c| c.compromised);
        if !(t.compromised && t.alive) && !mitm {
            return false;
        }
        self.inbox.push(Alert { height: self.chain.height(), node_id: t.node_id.clone(), kind, txid });
        true
    }

    // ----------------------------------------------------------------- owner

    fn visible_spender(&self, op: &OutPoint) -> Option<Hash256> {
        self.chain.confirmed_spender_of(op).or_else(|| {
            self.chain.public_mempool().find(|e| e.tx.inputs.iter().any(|i| i.outpoint == *op)).map(|e| e.txid)
        })
    }

    fn vault_by_txid(&self, txid: &Hash256) -> Option<usize> {
        self.vaults.iter().position(|v| v.pair.vault_txid == *txid)
    }

    fn owner_step(&mut self) {
        if let Some(at) = self.cfg.forced_full_recovery_at {
            if self.tick >= at && !self.owner.forced_done {
                self.owner.forced_done = true;
                self.run_recovery(RecoveryKind::Full);
            }
        }
        if let Some(at) = self.owner.breach_at {
            if self.tick >= at && !self.owner.breach_handled {
                self.owner.breach_handled = true;
                self.run_recovery(RecoveryKind::ActiveWalletCompromise);
            }
        }
        self.monitor_recovery_outputs();
        self.progress_unvaults();
        self.maybe_start_unvault();
    }

    fn note(&mut self, process: &str, action: &str, result: String) {
        let mut t = ProcessTrace::new(process, self.tick);
        t.step(1, "owner", action, result);
        self.record(t);
    }

    fn recovery_outputs(&self) -> Vec<(usize, OutPoint)> {
        let mut outs = Vec::new();
        for (i, v) in self.vaults.iter().enumerate() {
            outs.push((i, OutPoint::new(v.pair.p2rw_txid(), 0)));
            for l2 in &v.layer2 {
                outs.push((i, OutPoint::new(l2.p2rw_txid(), 0)));
            }
        }
        outs
    }

    fn monitor_recovery_outputs(&mut self) {
        for (i, op) in self.recovery_outputs() {
            if self.chain.observed_tx(&op.txid).is_none() {
                continue;
            }
            if self.vaults[i].state == VaultState::Unvaulting {
                self.vaults[i].state = VaultState::Recovered;
                self.owner.in_flight.retain(|f| f.vault != i);
                self.note("monitor", "vault pushed to recovery wallet", op.txid.to_string());
            }
            let foreign = self.visible_spender(&op).filter(|s| !self.owner.known.contains(s));
            if let Some(spender) = foreign {
                if !self.owner.recovery_compromised {
                    self.on_recovery_compromise(spender);
                }
            }
        }
        if self.owner.recovery_compromised {
            self.race_recovery_outputs();
        }
    }

    fn on_recovery_compromise(&mut self, evidence: Hash256) {
        self.owner.recovery_compromised = true;
        let mut t = ProcessTrace::new("recovery-compromise", self.tick);
        t.step(1, "owner", "recovery output spent by unknown transaction", evidence.to_string());
        if self.cfg.freeze_on_recovery_compromise {
            for v in self.vaults.iter_mut().filter(|v| v.state == VaultState::Active) {
                v.state = VaultState::Frozen;
                t.step(2, "owner", "keep AVT private and freeze", v.pair.vault_txid.to_string());
            }
        }
        self.record(t);
    }

    /// Competing spends of recovery outputs to a fresh active address.
    fn race_recovery_outputs(&mut self) {
        for (_, op) in self.recovery_outputs() {
            if self.owner.swept.contains(&op) || self.chain.confirmed_spender_of(&op).is_some() {
                continue;
            }
            let prev = if let Some(u) = self.chain.utxo(&op) {
                TxOutput { amount: u.amount, script: u.script.clone() }
            } else if let Some(parent) = self.chain.observed_tx(&op.txid) {
                parent.outputs[0].clone()
            } else {
                continue;
            };
            if self.chain.spender_of(&op).is_some() && self.visible_spender(&op).is_none_or(|s| self.owner.known.contains(&s)) {
                continue;
            }
            let Some(owned) = self.owned.get(&prev.script.encode()).cloned() else { continue };
            let Some(spec) = owned.spec else { continue };
            self.owner.swept.insert(op);
            let dest = self.wallet(WalletRole::Active);
            let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
            tx.inputs.push(TxInput { outpoint: op, sequence: 0 });
            tx.outputs.push(TxOutput { amount: 0, script: dest.script() });
            let fee = self.cfg.feerates.owner * tx.vsize();
            tx.outputs[0].amount = prev.amount.saturating_sub(fee);
            let Ok(sigs) = self.fleet.sign_for_spec(WalletRole::Recovery, owned.index, &spec, &tx, 0, SighashMode::All, &prev.script, prev.amount) else {
                continue;
            };
            tx.set_witness(0, sigs);
            let result = self.broadcast(tx);
            self.note("race", "sweep recovery output", match result {
                Ok(txid) => txid.to_string(),
                Err(e) => e.reason().to_string(),
            });
        }
    }

    fn progress_unvaults(&mut self) {
        let timelock = self.cfg.topology.timelock_t;
        let mut i = 0;
        while i < self.owner.in_flight.len() {
            let f = self.owner.in_flight[i].clone();
            let vault_out = OutPoint::new(f.vault_txid, 0);
            match f.payment {
                None => {
                    if let Some(spender) = self.visible_spender(&vault_out) {
                        let v = &self.vaults[f.vault];
                        let known = self.owner.known.contains(&spender);
                        if known {
                            if spender == v.pair.p2rw_txid() {
                                self.vaults[f.vault].state = VaultState::Recovered;
                            } else {
                                self.vaults[f.vault].state = VaultState::Revaulted;
                            }
                            self.note("unvault", "vault output left the timelock path", spender.to_string());
                        } else {
                            self.note("unvault", "vault output spent by unknown transaction", spender.to_string());
                            self.owner.breach_at.get_or_insert(self.tick);
                        }
                        self.owner.in_flight.remove(i);
                        continue;
                    }
                    if f.failed || self.chain.confirmations(&f.vault_txid).unwrap_or(0) < timelock {
                        i += 1;
                        continue;
                    }
                    match self.pay_out(&f) {
                        Ok(txid) => self.owner.in_flight[i].payment = Some(txid),
                        Err(Rejection::CsvPremature(_)) => {}
                        Err(e) => {
                            self.note("unvault", "payment failed", e.reason().to_string());
                            self.owner.in_flight[i].failed = true;
                            self.owner.breach_at.get_or_insert(self.tick + 1);
                        }
                    }
                    i += 1;
                }
                Some(pay) => {
                    if self.chain.is_confirmed(&pay) {
                        self.vaults[f.vault].state = VaultState::Paid;
                        self.owner.in_flight.remove(i);
                        let tx = self.chain.confirmed_tx(&pay).expect("confirmed").tx.clone();
                        if tx.outputs[0].script != f.intended {
                            self.owner.halted = true;
                            self.note("unvault", "payee reports missing payment; payments halted", pay.to_string());
                        } else if f.rotate {
                            self.revault_rotated(f.vault, OutPoint::new(pay, 0));
                        }
                        continue;
                    }
                    if !self.chain.in_mempool(&pay) {
                        self.note("unvault", "payment evicted", pay.to_string());
                        self.owner.in_flight[i].failed = true;
                        self.owner.in_flight[i].payment = None;
                        self.owner.breach_at.get_or_insert(self.tick + 1);
                    }
                    i += 1;
                }
            }
        }
    }

    /// Timelocked active-wallet spend of an un-vaulted output.
    fn pay_out(&mut self, f: &InFlight) -> Result<Hash256, Rejection> {
        let v = self.vaults[f.vault].clone();
        let presented = self.tampered_destination.clone().unwrap_or_else(|| f.intended.clone());
        let dest = match human_check(&self.human_channels, &f.intended.encode(), &presented.encode()) {
            CheckResult::Pass => presented,
            CheckResult::Fail => {
                self.note("unvault", "human check caught altered destination", "payment uses intended address".into());
                f.intended.clone()
            }
        };
        let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
        tx.inputs.push(TxInput { outpoint: OutPoint::new(f.vault_txid, 0), sequence: self.cfg.topology.timelock_t });
        tx.outputs.push(TxOutput { amount: 0, script: dest });
        let fee = self.cfg.feerates.owner * tx.vsize();
        tx.outputs[0].amount = f.amount.saturating_sub(fee);
        let active = crate::covenant::parse_vault_script(&v.pair.vault_script).expect("vault script").active;
        let sigs = self
            .fleet
            .sign_for_spec(WalletRole::Active, v.active_index, &active, &tx, 0, SighashMode::All, &v.pair.vault_script, f.amount)
            .map_err(|e| Rejection::Malformed(e.to_string()))?;
        tx.set_witness(0, path_witness(sigs, SpendPath::Active, v.pair.layered));
        self.broadcast(tx)
    }

    fn maybe_start_unvault(&mut self) {
        let o = &self.owner;
        if o.recovered_all || o.halted || o.recovery_compromised || o.breach_at.is_some() || self.tick < self.cfg.unvault_start() {
            return;
        }
        if o.in_flight.len() >= self.cfg.policy.max_unvaults_in_flight {
            return;
        }
        if o.last_start.is_some_and(|l| self.tick < l + self.cfg.policy.min_blocks_between_unvaults) {
            return;
        }
        let budget = self.cfg.unvault_count.unwrap_or(usize::MAX);
        let eligible = |v: &VaultRecord, i: usize| {
            v.state == VaultState::Active && v.pair.activation.is_active() && !o.rate_blocked.contains(&i)
        };
        let next = self
            .vaults
            .iter()
            .enumerate()
            .find(|(i, v)| v.rotate && eligible(v, *i))
            .or_else(|| if o.started < budget { self.vaults.iter().enumerate().find(|(i, v)| eligible(v, *i)) } else { None })
            .map(|(i, _)| i);
        if let Some(i) = next {
            let trace = self.run_unvault(i, true);
            if trace.abort_reason() == Some("rate") {
                self.owner.rate_blocked.insert(i);
            }
        }
    }

    /// Un-vaults vault `index`: fetch the AVT, pre-notify responders when
    /// `notify`, broadcast. The payment follows once the timelock expires.
    pub fn run_unvault(&mut self, index: usize, notify: bool) -> ProcessTrace {
        let mut trace = ProcessTrace::new("unvault", self.tick);
        let v = self.vaults[index].clone();
        let txid = v.pair.vault_txid;
        let in_flight: u64 = self.owner.in_flight.iter().map(|f| f.amount).sum();
        let policy = self.cfg.policy;
        if in_flight.saturating_add(v.pair.vault_amount) > policy.max_funds_in_flight {
            trace.step(0, "owner", "check un-vault policy", format!("{} in flight + {} > {}", in_flight, v.pair.vault_amount, policy.max_funds_in_flight));
            trace.abort("rate");
            return self.record(trace);
        }
        if self.owner.last_start.is_some_and(|l| self.tick < l + policy.min_blocks_between_unvaults) {
            trace.step(0, "owner", "check un-vault policy", "spacing");
            trace.abort("rate");
            return self.record(trace);
        }
        trace.step(0, "owner", "check un-vault policy", "ok");
        let avt = match self.avt_store.fetch(&txid, Some(&txid)) {
            Ok(tx) => tx,
            Err(e) => {
                trace.step(1, "vault wallet", "fetch AVT", e.to_string());
                trace.abort("lost");
                return self.record(trace);
            }
        };
        trace.step(1, "vault wallet", "fetch AVT", txid.to_string());
        self.owner.authorized.insert(txid);
        if notify && self.cfg.watchtower_variant == Variant::Responder {
            for i in 0..self.towers.len() {
                let msg = AuthMessage::new(&self.tower_keys[i], authorization_payload(&txid));
                let r = self.towers[i].authorize_unvault(&msg, txid);
                trace.step(2, &self.towers[i].node_id, "pre-notify un-vault", r.map_or_else(|e| e.to_string(), |_| "ok".into()));
            }
        }
        if self.chain.observed_tx(&txid).is_some() || self.chain.in_mempool(&txid) || self.chain.is_confirmed(&txid) {
            trace.step(3, "owner", "broadcast AVT", "already broadcast by someone else");
            trace.abort("already-unvaulted");
            let trace = self.record(trace);
            self.handle_unauthorized(txid);
            return trace;
        }
        match self.broadcast(avt) {
            Ok(_) => {
                trace.step(3, "owner", "broadcast AVT", txid.to_string());
                self.vaults[index].state = VaultState::Unvaulting;
                self.owner.last_start = Some(self.tick);
                if !v.rotate {
                    self.owner.started += 1;
                }
                let intended = if v.rotate { self.wallet(WalletRole::Active).script() } else { self.payee.clone() };
                self.owner.in_flight.push(InFlight {
                    vault: index,
                    vault_txid: txid,
                    amount: v.pair.vault_amount,
                    payment: None,
                    intended,
                    failed: false,
                    rotate: v.rotate,
                });
            }
            Err(e) => {
                trace.step(3, "owner", "broadcast AVT", e.reason());
                trace.abort(e.reason());
            }
        }
        self.record(trace)
    }

    fn owner_inbox(&mut self) {
        let alerts = std::mem::take(&mut self.inbox);
        for alert in alerts {
            self.alerts.push(alert.clone());
            if !self.owner.handled_alerts.insert((alert.kind, alert.txid)) {
                continue;
            }
            match alert.kind {
                AlertKind::Unvault => {
                    if !self.owner.authorized.contains(&alert.txid) {
                        self.handle_unauthorized(alert.txid);
                    }
                }
                AlertKind::DepositSpend => {
                    self.note("alert", "deposit spent outside covenant", alert.txid.to_string());
                    self.run_recovery(RecoveryKind::Full);
                }
                AlertKind::RateExceeded | AlertKind::MissingP2rw => {
                    self.note("alert", alert.kind.label(), alert.txid.to_string());
                }
            }
        }
    }

    fn handle_unauthorized(&mut self, txid: Hash256) {
        if self.owner.recovered_all {
            return;
        }
        let layer2_owner = self.vaults.iter().position(|v| v.layer2.iter().any(|l| l.vault_txid == txid));
        if let Some(i) = layer2_owner {
            self.run_recovery(RecoveryKind::UnauthorizedUnvault(i));
            return;
        }
        if self.layered() {
            self.run_recovery(RecoveryKind::Revault);
            return;
        }
        if self.owner.recovery_compromised || self.cfg.owner_suspects_recovery {
            // Keep P2RWs private; take the timelocked path to a fresh address.
            if let Some(i) = self.vault_by_txid(&txid) {
                if matches!(self.vaults[i].state, VaultState::Active | VaultState::Frozen) {
                    self.vaults[i].state = VaultState::Unvaulting;
                    let intended = self.wallet(WalletRole::Active).script();
                    let amount = self.vaults[i].pair.vault_amount;
                    self.owner.in_flight.push(InFlight {
                        vault: i,
                        vault_txid: txid,
                        amount,
                        payment: None,
                        intended,
                        failed: false,
                        rotate: false,
                    });
                    self.note("alert", "unauthorized un-vault; waiting out the timelock", txid.to_string());
                }
            }
            return;
        }
        self.run_recovery(RecoveryKind::Full);
    }

    /// Pushes vault outputs to the recovery wallet (or the next layer).
    pub fn run_recovery(&mut self, kind: RecoveryKind) -> ProcessTrace {
        let mut trace = ProcessTrace::new(format!("recovery:{kind:?}"), self.tick);
        if self.owner.recovery_compromised && kind != RecoveryKind::Revault {
            trace.step(1, "owner", "recovery wallet known compromised", "P2RWs kept private");
            trace.abort("recovery-compromised");
            return self.record(trace);
        }
        let targets: Vec<usize> = match kind {
            RecoveryKind::UnauthorizedUnvault(i) => vec![i],
            _ => (0..self.vaults.len())
                .filter(|&i| matches!(self.vaults[i].state, VaultState::Active | VaultState::Unvaulting))
                .collect(),
        };
        if targets.is_empty() {
            trace.step(1, "owner", "select vaults", "nothing to recover");
            return self.record(trace);
        }
        let mut lost = false;
        for i in targets {
            let v = self.vaults[i].clone();
            let (vault_txid, p2rw_key) = match kind {
                RecoveryKind::UnauthorizedUnvault(_) => {
                    match v.layer2.iter().find(|l| self.chain.observed_tx(&l.vault_txid).is_some()) {
                        Some(l) => (l.vault_txid, l.vault_txid),
                        None => (v.pair.vault_txid, v.pair.vault_txid),
                    }
                }
                _ => (v.pair.vault_txid, v.pair.vault_txid),
            };
            if self.chain.observed_tx(&vault_txid).is_none() && !self.chain.in_mempool(&vault_txid) {
                match self.avt_store.fetch(&vault_txid, Some(&vault_txid)) {
                    Ok(avt) => {
                        let r = self.broadcast(avt);
                        trace.step(1, "owner", "broadcast AVT", r.map_or_else(|e| e.reason().to_string(), |t| t.to_string()));
                    }
                    Err(e) => {
                        trace.step(1, "owner", "fetch AVT", e.to_string());
                        continue;
                    }
                }
            }
            let vault_out = OutPoint::new(vault_txid, 0);
            if let Some(s) = self.visible_spender(&vault_out) {
                if self.owner.known.contains(&s) {
                    trace.step(2, "owner", "vault output already pushed", s.to_string());
                    self.vaults[i].state = if s == v.pair.p2rw_txid() { VaultState::Recovered } else { self.vaults[i].state };
                    self.owner.in_flight.retain(|f| f.vault != i);
                    continue;
                }
            }
            if kind == RecoveryKind::Revault {
                let Some(revault) = v.pair.revaults.last() else { continue };
                let rid = compute_txid(revault).expect("well formed");
                let tx = self.avt_store.fetch(&rid, Some(&rid)).unwrap_or_else(|_| revault.clone());
                let r = self.broadcast(tx);
                trace.step(2, "owner", "broadcast re-vault", r.map_or_else(|e| e.reason().to_string(), |t| t.to_string()));
                self.vaults[i].state = VaultState::Revaulted;
                self.owner.in_flight.retain(|f| f.vault != i);
                continue;
            }
            match self.p2rw_store.fetch(&p2rw_key, None) {
                Ok(p2rw) => {
                    let r = self.broadcast(p2rw);
                    trace.step(2, "owner", "broadcast P2RW", r.map_or_else(|e| e.reason().to_string(), |t| t.to_string()));
                    self.vaults[i].state = VaultState::Recovered;
                    self.owner.in_flight.retain(|f| f.vault != i);
                }
                Err(e) => {
                    trace.step(2, "owner", "fetch P2RW", e.to_string());
                    lost = true;
                }
            }
        }
        if matches!(kind, RecoveryKind::Full | RecoveryKind::ActiveWalletCompromise) {
            self.owner.recovered_all = true;
            trace.step(3, "owner", "transfer control to recovery wallet", "recovery HMs take the active role");
            trace.step(4, "owner", "instantiate fresh recovery wallet before reuse", "scheduled");
        }
        if lost {
            trace.abort("p2rw-lost");
        }
        self.record(trace)
    }

    // -------------------------------------------------------------- rotation

    pub fn run_device_rotation(&mut self, failed_hm: &str) -> ProcessTrace {
        let mut trace = ProcessTrace::new("device-rotation", self.tick);
        let Some(role) = self.fleet.hm(failed_hm).map(|h| h.role) else {
            trace.step(1, failed_hm, "identify device", "unknown");
            return self.record(trace);
        };
        trace.step(1, failed_hm, "detect failure", role.label());
        let _ = self.fleet.fail(failed_hm);
        let new_id = self.fleet.replace(failed_hm).expect("known device");
        trace.step(2, &new_id, "provision replacement", "fresh seed");
        match role {
            WalletRole::Active => {
                self.active_index += 1;
                let spec = self.wallet(WalletRole::Active);
                trace.step(3, "active wallet", "new address set", address_of(&spec.script()));
                trace.step(4, "active wallet", "spending preference", "old outputs first");
            }
            WalletRole::Recovery => {
                self.recovery_index += 1;
                let spec = self.wallet(WalletRole::Recovery);
                trace.step(3, "computer interface", "recovery address from stored public keys", address_of(&spec.script()));
                let mut queued = 0;
                for v in self.vaults.iter_mut().filter(|v| v.state == VaultState::Active) {
                    v.rotate = true;
                    queued += 1;
                }
                trace.step(4, "owner", "queue rate-limited re-vaulting", format!("{queued} vaults"));
            }
            WalletRole::VaultWallet => {
                if let Some(h) = self.avt_store.holder_ids().into_iter().find(|h| h == failed_hm) {
                    let _ = self.avt_store.fail(&h);
                }
                trace.step(3, "vault wallet", "future vaults use new p-of-t addresses", &new_id);
            }
            WalletRole::Fee => {
                trace.step(3, "fee wallet", "new address set", "index 0 of replacement");
            }
        }
        self.record(trace)
    }

    fn revault_rotated(&mut self, index: usize, funds: OutPoint) {
        let partition = self.vaults[index].partition;
        let mut trace = ProcessTrace::new("rotation-revault", self.tick);
        match self.vault_partition(partition, Funding::Sweep(funds), &VaultingOptions::default(), &mut trace) {
            Ok(_) => self.vaults[index].state = VaultState::Rotated,
            Err(reason) => trace.abort(reason),
        }
        self.record(trace);
    }

    // ---------------------------------------------------------- health check

    pub fn run_health_check(&mut self) -> HealthReport {
        let before = self.chain.clone();
        let mut entries = Vec::new();
        let mut rejections = Vec::new();
        for role in [WalletRole::Active, WalletRole::Recovery, WalletRole::Fee] {
            let wallet = WalletType::for_role(role).expect("key-tree role");
            let Ok(spec) = self.fleet.wallet_spec(role, 0) else { continue };
            let script = spec.script();
            for (pos, id) in self.fleet.members(role).into_iter().enumerate() {
                let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
                let nowhere = tagged_hash("vaultlab/proof-of-reserves", &[id.as_bytes(), &self.tick.to_le_bytes()]);
                tx.inputs.push(TxInput { outpoint: OutPoint::new(nowhere, u32::MAX), sequence: 0 });
                tx.outputs.push(TxOutput { amount: 0, script: script.clone() });
                let key = match self.fleet.hm_mut(&id).map(|h| h.derive_key(wallet, 0)) {
                    Some(Ok(k)) => k,
                    _ => {
                        entries.push(HealthEntry { component: id.clone(), ok: false, detail: "device unavailable".into() });
                        continue;
                    }
                };
                let sig = sign_input(&tx, 0, &key, SighashMode::All, &script, 0).expect("valid index");
                let digest = sighash_digest(&tx, 0, SighashMode::All, &script, 0).expect("valid index");
                let verified = spec.keys.get(pos).is_some_and(|pk| verify_raw(pk, &digest, &sig[..64]));
                tx.set_witness(0, vec![sig]);
                let verdict = match self.chain.submit(tx, Visibility::Public) {
                    Ok(_) => "accepted".to_string(),
                    Err(e) => e.reason().to_string(),
                };
                rejections.push(format!("{id} {verdict}"));
                let ok = verified && verdict == "missing-input";
                entries.push(HealthEntry {
                    component: id.clone(),
                    ok,
                    detail: format!("proof of reserves signature {}, chain {verdict}", if verified { "verifies" } else { "invalid" }),
                });
            }
        }
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let nonce = Hash256(nonce);
        for store in [&self.avt_store, &self.p2rw_store] {
            for holder in store.holder_ids() {
                let h = store.holder(&holder).expect("listed");
                if h.failed {
                    entries.push(HealthEntry { component: holder.clone(), ok: false, detail: "device failed".into() });
                    continue;
                }
                let mut bad = Vec::new();
                let keys: Vec<Hash256> = h.items().map(|(k, _)| *k).collect();
                for key in &keys {
                    let answer = store.commitment(&holder, key, &nonce);
                    let expected = self.reference.get(&(store.label.clone(), *key)).map(|tx| possession_commitment(&nonce, &tx.serialize()));
                    if answer.is_none() || answer != expected {
                        bad.push(key.short());
                    }
                }
                entries.push(HealthEntry {
                    component: format!("{}:{holder}", store.label),
                    ok: bad.is_empty(),
                    detail: if bad.is_empty() { format!("{} commitments match", keys.len()) } else { format!("mismatch {}", bad.join(",")) },
                });
            }
        }
        let expected_txids: BTreeSet<Hash256> = self
            .vaults
            .iter()
            .flat_map(|v| std::iter::once(v.pair.vault_txid).chain(v.layer2.iter().map(|l| l.vault_txid)))
            .collect();
        let expected_p2rw: BTreeSet<Hash256> = self
            .vaults
            .iter()
            .flat_map(|v| std::iter::once(v.pair.p2rw_txid()).chain(v.layer2.iter().map(|l| l.p2rw_txid())))
            .collect();
        for t in &self.towers {
            let (ok, detail) = match t.consistency_check(&expected_txids, &expected_p2rw) {
                Consistency::Ok => (true, "consistent, heartbeat ok".to_string()),
                Consistency::Mismatch(d) => (false, d.join("; ")),
                Consistency::Unreachable => (false, "no heartbeat".to_string()),
            };
            entries.push(HealthEntry { component: t.node_id.clone(), ok, detail });
        }
        HealthReport { entries, reserve_rejections: rejections, chain_unchanged: self.chain == before }
    }

    // ------------------------------------------------------------ accounting

    /// Partition of every output derived from a vault deposit.
    fn lineage(&self) -> BTreeMap<OutPoint, usize> {
        let mut part = self.roots.clone();
        for block in self.chain.blocks() {
            for txid in &block.txids {
                let c = self.chain.confirmed_tx(txid).expect("mined");
                if let Some(p) = c.tx.inputs.iter().find_map(|i| part.get(&i.outpoint).copied()) {
                    for vout in 0..c.tx.outputs.len() {
                        part.entry(OutPoint::new(*txid, vout as u32)).or_insert(p);
                    }
                }
            }
        }
        part
    }

    pub fn accounting(&self) -> Accounting {
        let lineage = self.lineage();
        let frozen_partitions: BTreeSet<usize> =
            self.vaults.iter().filter(|v| v.state == VaultState::Frozen).map(|v| v.partition).collect();
        let mut acc = Accounting {
            initial: self.chain.total_deposited(),
            fees: self.chain.fees_collected(),
            partitions: (0..self.vaulted_partitions).map(|p| PartitionFate { partition: p, ..Default::default() }).collect(),
            ..Default::default()
        };
        for (op, u) in self.chain.utxos().iter().filter(|(_, u)| u.amount > 0) {
            let holding = self.classify(&u.script);
            let partition = lineage.get(op).copied();
            let frozen = matches!(holding, Holding::Deposit | Holding::Vault) && partition.is_some_and(|p| frozen_partitions.contains(&p));
            match (holding, frozen) {
                (_, true) => acc.frozen += u.amount,
                (Holding::Attacker, _) => acc.attacker += u.amount,
                _ => acc.owner += u.amount,
            }
            if let Some(fate) = partition.and_then(|p| acc.partitions.get_mut(p)) {
                *fate.holdings.entry(holding).or_default() += u.amount;
                match (holding, frozen) {
                    (_, true) => fate.frozen += u.amount,
                    (Holding::Attacker, _) => fate.attacker += u.amount,
                    _ => fate.owner += u.amount,
                }
            }
        }
        acc
    }

    /// Line-oriented report: traces, alerts, chain events, accounting.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for t in &self.traces {
            s.push_str(&t.render());
        }
        s.push_str("== alerts\n");
        for a in &self.alerts {
            let _ = writeln!(s, "{a}");
        }
        s.push_str("== chain\n");
        s.push_str(&self.chain.event_log());
        let acc = self.accounting();
        let _ = writeln!(
            s,
            "== accounting\ninitial {} owner {} attacker {} frozen {} fees {}",
            acc.initial, acc.owner, acc.attacker, acc.frozen, acc.fees
        );
        for p in &acc.partitions {
            let _ = writeln!(s, "partition {} owner {} attacker {} frozen {}", p.partition, p.owner, p.attacker, p.frozen);
        }
        s
    }

    pub fn recovery_compromise_detected(&self) -> bool {
        self.owner.recovery_compromised
    }

    pub fn payments_halted(&self) -> bool {
        self.owner.halted
    }

    pub fn full_recovery_done(&self) -> bool {
        self.owner.recovered_all
    }

    /// Vault outputs currently between AVT broadcast and payment.
    pub fn in_flight(&self) -> Vec<usize> {
        self.owner.in_flight.iter().map(|f| f.vault).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig { partitions: vec![COIN, 2 * COIN], ..SimConfig::default() }
    }

    #[test]
    fn every_partition_funds_its_own_vault() {
        for k in 2..=5 {
            for mechanism in [Mechanism::DeletedKey, Mechanism::Ctv] {
                let mut cfg = SimConfig { mechanism, ..SimConfig::default() };
                cfg.topology.active.count = k;
                let mut sim = Custody::new(cfg.clone()).unwrap();
                sim.vault_all();
                assert_eq!(sim.vaults.len(), cfg.partitions.len(), "k={k} {mechanism:?}\n{}", sim.report());
                let mut amounts: Vec<u64> = sim.vaults.iter().map(|v| v.pair.vault_amount).collect();
                amounts.sort_unstable();
                assert_eq!(amounts, cfg.partitions, "k={k} {mechanism:?}");
            }
        }
    }

    #[test]
    fn honest_run_pays_every_partition() {
        let mut sim = Custody::launch(small()).unwrap();
        assert!(sim.traces.iter().all(|t| t.is_completed()), "{}", sim.report());
        sim.run(&mut Honest);
        assert!(sim.vaults.iter().all(|v| v.state == VaultState::Paid), "{}", sim.report());
        let acc = sim.accounting();
        assert!(acc.balanced());
        assert_eq!(acc.attacker, 0);
        assert_eq!(acc.frozen, 0);
        assert!(sim.chain.check_conservation());
        assert!(sim.chain.audit_timelocks().is_empty());
    }

    #[test]
    fn ctv_run_matches_deleted_key_outcome() {
        let mut a = Custody::launch(small()).unwrap();
        let mut b = Custody::launch(SimConfig { mechanism: Mechanism::Ctv, ..small() }).unwrap();
        a.run(&mut Honest);
        b.run(&mut Honest);
        assert!(b.vaults.iter().all(|v| v.state == VaultState::Paid), "{}", b.report());
        assert_eq!(b.fleet.accesses_to(WalletRole::VaultWallet), 0);
        let holdings = |s: &Custody| s.accounting().partitions.iter().map(|p| p.holdings.keys().copied().collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(holdings(&a), holdings(&b));
    }

    #[test]
    fn vaulting_order_is_audited() {
        let mut sim = Custody::new(small()).unwrap();
        let need = sim.funding_needed(COIN, 1);
        sim.run_external_payment(need, false);
        let (_, good) = sim.run_vaulting(&[COIN], &VaultingOptions::default());
        assert!(good.is_completed());
        assert!(audit_vaulting_order(&good).is_empty());
        sim.run_external_payment(need, false);
        let (_, bad) = sim.run_vaulting(&[COIN], &VaultingOptions { misorder: true, ..Default::default() });
        assert!(!audit_vaulting_order(&bad).is_empty());
    }

    #[test]
    fn withheld_notifications_block_activation() {
        let mut sim = Custody::new(small()).unwrap();
        let need = sim.funding_needed(COIN, 1);
        sim.run_external_payment(need, false);
        let (ids, trace) = sim.run_vaulting(&[COIN], &VaultingOptions { withheld_notifications: 3, ..Default::default() });
        assert!(ids.is_empty());
        assert_eq!(trace.abort_reason(), Some("activation"));
        assert!(!trace.steps.iter().any(|s| s.action.ends_with("broadcast deposit")));
        assert!(sim.chain.mempool().next().is_none());
    }

    #[test]
    fn failed_vault_device_aborts_before_keys() {
        let mut sim = Custody::new(small()).unwrap();
        sim.fleet.fail("vault/1").unwrap();
        let need = sim.funding_needed(COIN, 1);
        sim.run_external_payment(need, false);
        let (_, trace) = sim.run_vaulting(&[COIN], &VaultingOptions::default());
        assert_eq!(trace.abort_reason(), Some("device"));
    }

    #[test]
    fn tampered_address_fails_setup() {
        let mut sim = Custody::assemble(small()).unwrap();
        let trace = sim.run_setup(&SetupOptions { tamper_address: true });
        assert_eq!(trace.abort_reason(), Some("human-check"));
    }

    #[test]
    fn health_check_is_clean_and_non_destructive() {
        let mut sim = Custody::launch(small()).unwrap();
        let report = sim.run_health_check();
        assert!(report.all_ok(), "{:?}", report.failures());
        assert!(report.chain_unchanged);
        assert!(report.reserve_rejections.iter().all(|r| r.ends_with("missing-input")));
        let holder = sim.avt_store.holder_ids()[0].clone();
        let key = sim.vaults[0].pair.vault_txid;
        sim.avt_store.corrupt(&holder, &key, 3).unwrap();
        let report = sim.run_health_check();
        assert_eq!(report.failures().len(), 1);
        assert!(report.failures()[0].component.contains(&holder));
    }

    #[test]
    fn layered_vaults_revault_on_unauthorized_unvault() {
        let mut sim = Custody::launch(SimConfig { revault_layers: 2, unvault_start: Some(1000), ..small() }).unwrap();
        let avt = sim.vaults[0].pair.avt.clone();
        sim.chain.submit(avt, Visibility::Public).unwrap();
        sim.run(&mut Honest);
        assert!(sim.vaults.iter().all(|v| v.state == VaultState::Revaulted), "{}", sim.report());
        let acc = sim.accounting();
        assert!(acc.partitions.iter().all(|p| p.holdings.contains_key(&Holding::Deposit)));
    }

    #[test]
    fn unauthorized_unvault_triggers_full_recovery() {
        let mut sim = Custody::launch(SimConfig { unvault_start: Some(1000), ..small() }).unwrap();
        let avt = sim.vaults[1].pair.avt.clone();
        sim.chain.submit(avt, Visibility::Public).unwrap();
        sim.run(&mut Honest);
        assert!(sim.vaults.iter().all(|v| v.state == VaultState::Recovered), "{}", sim.report());
        assert!(sim.accounting().partitions.iter().all(|p| p.holdings.keys().eq([&Holding::Recovery])));
    }

    #[test]
    fn rate_policy_aborts_oversized_unvault() {
        let policy = UnvaultPolicy { max_funds_in_flight: COIN + COIN / 2, ..Default::default() };
        let mut sim = Custody::launch(SimConfig { policy, unvault_start: Some(1000), ..small() }).unwrap();
        let trace = sim.run_unvault(1, true);
        assert_eq!(trace.abort_reason(), Some("rate"));
        assert!(sim.chain.mempool().next().is_none());
    }

    #[test]
    fn recovery_device_rotation_revaults_without_touching_survivors() {
        let mut sim = Custody::launch(small()).unwrap();
        let survivors = |s: &Custody| s.fleet.access_log().iter().filter(|a| a.hm_id == "recovery/0" || a.hm_id == "recovery/2").count();
        let before = survivors(&sim);
        let trace = sim.run_device_rotation("recovery/1");
        assert!(trace.is_completed());
        sim.run(&mut Honest);
        assert_eq!(survivors(&sim), before);
        assert_eq!(sim.recovery_index(), 1);
        let rotated = sim.vaults.iter().filter(|v| v.state == VaultState::Rotated).count();
        assert_eq!(rotated, 2, "{}", sim.report());
        let fresh = &sim.vaults[2];
        assert_eq!(fresh.pair.recovery_script, sim.fleet.wallet_spec(WalletRole::Recovery, 1).unwrap().script());
        assert!(sim.accounting().balanced());
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = SimConfig { revault_layers: 2, mechanism: Mechanism::Ctv, ..SimConfig::default() };
        match bad.validate() {
            Err(SimError::Config { field, .. }) => assert_eq!(field, "mechanism"),
            other => panic!("{other:?}"),
        }
        let bad = SimConfig { partitions: vec![], ..SimConfig::default() };
        assert!(matches!(bad.validate(), Err(SimError::Config { field, .. }) if field == "partitions"));
    }
}
