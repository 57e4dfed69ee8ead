//! Adversary model: compromise sets, attacker strategies played against the
//! honest orchestrator, outcome classification, the exhaustive tolerance
//! oracle and fee races.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainState, Visibility};
use crate::covenant::{parse_multisig, parse_vault_script, path_witness, MultisigSpec, SpendPath};
use crate::fleet::{human_check, ActStore, AdversaryKnowledge, ChannelState, CheckResult, Fleet, WalletRole, WalletTopology};
use crate::orchestrator::{Adversary, Custody, SimConfig, SimError, VaultState, COIN};
use crate::script::{eval_script, ExecContext, Op, Script};
use crate::txkit::{
    compute_txid, sign_input, tagged_hash, Hash256, KeyPair, OutPoint, SighashMode, Transaction, TxInput, TxOutput,
    PAST_LOCKTIME, TX_VERSION,
};
use crate::watchtower::{AlertKind, Variant};

/// Largest device count the tolerance oracle enumerates.
pub const ORACLE_BOUND: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThreatError {
    #[error("`{field}` = {value} exceeds the brute-force bound {bound}")]
    Bound { field: String, value: usize, bound: usize },
    #[error("compromise `{field}` = {value} exceeds the topology maximum {max}")]
    Compromise { field: String, value: usize, max: usize },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Functionalities the adversary controls. Key counts are numbers of
/// devices of that wallet whose keys leaked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompromiseSet {
    pub recovery_keys: usize,
    pub active_keys: usize,
    /// Vault wallet devices compromised before they delete their keys.
    pub ephemeral_keys: usize,
    pub avt_storage: bool,
    pub p2rw_storage: bool,
    pub watchtower_nodes: usize,
    /// Channel ids such as `watchtower/0/oob`.
    pub channels: BTreeSet<String>,
    pub fee_keys: usize,
    /// Both human-check channels (in-band and out-of-band).
    pub human_check_oob: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    Recovery,
    Active,
    Ephemeral,
    AvtStorage,
    P2rwStorage,
    FakeAlerts,
    Silence,
    Fee,
    HumanCheck,
}

impl CompromiseSet {
    pub fn validate(&self, topo: &WalletTopology) -> Result<(), ThreatError> {
        let checks = [
            ("recovery_keys", self.recovery_keys, topo.recovery.count),
            ("active_keys", self.active_keys, topo.active.count),
            ("ephemeral_keys", self.ephemeral_keys, topo.vault.count),
            ("watchtower_nodes", self.watchtower_nodes, topo.watchtower_w),
            ("fee_keys", self.fee_keys, topo.fee.count),
        ];
        for (field, value, max) in checks {
            if value > max {
                return Err(ThreatError::Compromise { field: field.into(), value, max });
            }
        }
        Ok(())
    }

    pub fn union(&self, other: &CompromiseSet) -> CompromiseSet {
        CompromiseSet {
            recovery_keys: self.recovery_keys.max(other.recovery_keys),
            active_keys: self.active_keys.max(other.active_keys),
            ephemeral_keys: self.ephemeral_keys.max(other.ephemeral_keys),
            avt_storage: self.avt_storage || other.avt_storage,
            p2rw_storage: self.p2rw_storage || other.p2rw_storage,
            watchtower_nodes: self.watchtower_nodes.max(other.watchtower_nodes),
            channels: self.channels.union(&other.channels).cloned().collect(),
            fee_keys: self.fee_keys.max(other.fee_keys),
            human_check_oob: self.human_check_oob || other.human_check_oob,
        }
    }

    pub fn is_subset_of(&self, other: &CompromiseSet) -> bool {
        self.union(other) == *other
    }

    fn tower_mitm(&self, i: usize) -> bool {
        ["in-band", "oob"].iter().all(|c| self.channels.contains(&format!("watchtower/{i}/{c}")))
    }

    /// What the compromised functionalities let an attacker do.
    pub fn capabilities(&self, cfg: &SimConfig) -> BTreeSet<Capability> {
        let topo = &cfg.topology;
        let mut caps = BTreeSet::new();
        let mut add = |cond: bool, c| {
            if cond {
                caps.insert(c);
            }
        };
        add(self.recovery_keys >= topo.recovery.threshold, Capability::Recovery);
        add(self.active_keys >= topo.active.threshold, Capability::Active);
        add(self.ephemeral_keys >= topo.vault.threshold, Capability::Ephemeral);
        add(self.avt_storage, Capability::AvtStorage);
        let responder = cfg.watchtower_variant == Variant::Responder && !cfg.owner_suspects_recovery;
        add(self.p2rw_storage || (responder && self.watchtower_nodes > 0), Capability::P2rwStorage);
        let w = topo.watchtower_w;
        add((0..w).any(|i| i < self.watchtower_nodes || self.tower_mitm(i)), Capability::FakeAlerts);
        let silent = |i: usize| i < self.watchtower_nodes || (!responder && self.tower_mitm(i));
        add(w > 0 && (0..w).all(silent), Capability::Silence);
        add(self.fee_keys >= topo.fee.threshold, Capability::Fee);
        add(self.human_check_oob, Capability::HumanCheck);
        caps
    }

    /// The adversary learns something about the deployment.
    pub fn privacy_lost(&self) -> bool {
        self.avt_storage || self.p2rw_storage || self.watchtower_nodes > 0
    }

    fn apply_before_vaulting(&self, sim: &mut Custody) {
        let roles = [
            (WalletRole::Recovery, self.recovery_keys),
            (WalletRole::Active, self.active_keys),
            (WalletRole::VaultWallet, self.ephemeral_keys),
            (WalletRole::Fee, self.fee_keys),
        ];
        for (role, count) in roles {
            for id in sim.fleet.members(role).into_iter().take(count) {
                sim.fleet.compromise(&id).expect("member");
            }
        }
        if self.human_check_oob {
            sim.human_channels = ChannelState { in_band_compromised: true, oob_compromised: true };
        }
    }

    fn apply_after_vaulting(&self, sim: &mut Custody) {
        if self.avt_storage {
            let holder = sim.avt_store.holder_ids()[0].clone();
            for tx in sim.avt_store.compromise(&holder).expect("holder") {
                sim.fleet.adversary.learn_tx(tx);
            }
        }
        if self.p2rw_storage {
            let holder = sim.p2rw_store.holder_ids()[0].clone();
            for tx in sim.p2rw_store.compromise(&holder).expect("holder") {
                sim.fleet.adversary.learn_tx(tx);
            }
        }
        for i in 0..self.watchtower_nodes.min(sim.towers.len()) {
            sim.towers[i].compromised = true;
            let leaked: Vec<Transaction> = sim.towers[i].stored_p2rw.values().cloned().collect();
            for tx in leaked {
                sim.fleet.adversary.learn_tx(tx);
            }
        }
        for t in &mut sim.towers {
            for c in &mut t.channels {
                if self.channels.contains(&c.channel_id) {
                    c.compromised = true;
                    sim.fleet.adversary.learn_channel(c.channel_id.clone());
                }
            }
        }
    }
}

/// Which owner un-vault an attacker strikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    First,
    /// The n-th un-vault the attacker observes (zero based).
    Nth(usize),
    /// The largest partition, known from stolen covenant transactions.
    Largest,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    /// Broadcast every known AVT at the first opportunity.
    pub broadcast_avts: Option<Visibility>,
    /// Broadcast every known P2RW right after the AVTs.
    pub broadcast_p2rws: bool,
    pub silence: bool,
    pub fake_alert: bool,
    /// Push any observed un-vault to recovery with a stolen P2RW.
    pub grief: bool,
    /// Race a stolen P2RW plus theft against this un-vault.
    pub race_p2rw: Option<Target>,
    /// Timelocked active-wallet theft of these un-vaults.
    pub active_theft: Option<Target>,
    /// Broadcast the remaining AVTs once a theft is public.
    pub flood_after_theft: bool,
    /// Spend any plain multisig output the adversary can sign.
    pub sweep: bool,
    pub theft_visibility: Visibility,
    pub redirect_payments: bool,
}

impl Default for Plan {
    fn default() -> Self {
        Plan {
            broadcast_avts: None,
            broadcast_p2rws: false,
            silence: false,
            fake_alert: false,
            grief: false,
            race_p2rw: None,
            active_theft: None,
            flood_after_theft: false,
            sweep: false,
            theft_visibility: Visibility::MinerPrivate,
            redirect_payments: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub requires: BTreeSet<Capability>,
    pub plan: Plan,
}

fn strategy(name: &str, requires: &[Capability], plan: Plan) -> Strategy {
    Strategy { name: name.into(), requires: requires.iter().copied().collect(), plan }
}

/// Every strategy the engine knows. Timing without stolen covenant
/// transactions comes from the seed.
pub fn strategies(cfg: &SimConfig) -> Vec<Strategy> {
    use Capability::*;
    let blind = Target::Nth((cfg.seed % cfg.partitions.len() as u64) as usize);
    let public = Some(Visibility::Public);
    let sweep = Plan { sweep: true, ..Plan::default() };
    vec![
        strategy("passive", &[], Plan::default()),
        strategy("avt-flood", &[AvtStorage], Plan { broadcast_avts: public, ..Plan::default() }),
        strategy("avt-flood-silenced", &[AvtStorage, Silence], Plan { broadcast_avts: public, silence: true, ..Plan::default() }),
        strategy("p2rw-grief", &[P2rwStorage], Plan { grief: true, ..Plan::default() }),
        strategy("p2rw-grief-silenced", &[P2rwStorage, Silence], Plan { grief: true, silence: true, ..Plan::default() }),
        strategy("fake-alert", &[FakeAlerts], Plan { fake_alert: true, ..Plan::default() }),
        strategy("fake-alert-grief", &[FakeAlerts, P2rwStorage], Plan { fake_alert: true, grief: true, ..Plan::default() }),
        strategy("recovery-wait", &[Recovery], sweep.clone()),
        strategy("recovery-p2rw-first", &[Recovery, P2rwStorage], Plan { race_p2rw: Some(Target::First), ..sweep.clone() }),
        strategy("recovery-p2rw-largest", &[Recovery, P2rwStorage], Plan { race_p2rw: Some(Target::Largest), ..sweep.clone() }),
        strategy("recovery-avt-flood", &[Recovery, AvtStorage], Plan { broadcast_avts: public, ..sweep.clone() }),
        strategy(
            "recovery-total",
            &[Recovery, AvtStorage, P2rwStorage],
            Plan { broadcast_avts: Some(Visibility::MinerPrivate), broadcast_p2rws: true, ..sweep.clone() },
        ),
        strategy(
            "recovery-total-public",
            &[Recovery, AvtStorage, P2rwStorage],
            Plan { broadcast_avts: public, broadcast_p2rws: true, theft_visibility: Visibility::Public, ..sweep.clone() },
        ),
        strategy("recovery-fake-alert", &[Recovery, FakeAlerts], Plan { fake_alert: true, ..sweep.clone() }),
        strategy("active-wait", &[Active], Plan { active_theft: Some(blind), ..sweep.clone() }),
        strategy("active-wait-silenced", &[Active, Silence], Plan { active_theft: Some(blind), silence: true, ..sweep.clone() }),
        strategy(
            "active-largest-flood",
            &[Active, AvtStorage],
            Plan { active_theft: Some(Target::Largest), flood_after_theft: true, ..sweep.clone() },
        ),
        strategy(
            "active-avt-silenced",
            &[Active, AvtStorage, Silence],
            Plan { broadcast_avts: public, silence: true, active_theft: Some(Target::All), ..sweep.clone() },
        ),
        strategy("deposit-sweep", &[Ephemeral], sweep.clone()),
        strategy("redirect-payments", &[HumanCheck], Plan { redirect_payments: true, ..Plan::default() }),
        strategy("fee-sweep", &[Fee], sweep),
    ]
}

fn is_p2rw(tx: &Transaction) -> bool {
    let acp = SighashMode::AllAnyoneCanPay.to_byte();
    tx.inputs.len() == 1
        && tx.witnesses.first().is_some_and(|w| w.iter().any(|item| item.len() == 65 && item[64] == acp))
}

fn is_vault_tx(tx: &Transaction) -> bool {
    tx.outputs.first().is_some_and(|o| parse_vault_script(&o.script).is_some())
}

/// Signs with whatever keys the adversary holds for `spec`.
fn adversary_sign(
    adv: &AdversaryKnowledge,
    spec: &MultisigSpec,
    tx: &Transaction,
    mode: SighashMode,
    script: &Script,
    amount: u64,
) -> Option<Vec<Vec<u8>>> {
    let keys: Vec<&KeyPair> = adv.keys_for(spec).into_iter().take(spec.threshold).collect();
    if keys.len() < spec.threshold {
        return None;
    }
    let sigs: BTreeMap<_, _> =
        keys.iter().map(|k| (k.public, sign_input(tx, 0, k, mode, script, amount).expect("input 0"))).collect();
    spec.arrange(&sigs)
}

/// Adversary driving one strategy.
pub struct Attacker {
    pub plan: Plan,
    started: bool,
    unvaults: Vec<(Hash256, u64)>,
    done: BTreeSet<Hash256>,
    thefts: Vec<Hash256>,
    flooded: bool,
    swept: BTreeSet<OutPoint>,
}

impl Attacker {
    pub fn new(plan: Plan) -> Self {
        Attacker {
            plan,
            started: false,
            unvaults: Vec::new(),
            done: BTreeSet::new(),
            thefts: Vec::new(),
            flooded: false,
            swept: BTreeSet::new(),
        }
    }

    fn submit(&mut self, sim: &mut Custody, tx: Transaction, vis: Visibility) -> Option<Hash256> {
        sim.chain.submit(tx, vis).ok()
    }

    fn known(sim: &Custody, pick: fn(&Transaction) -> bool) -> Vec<Transaction> {
        sim.fleet.adversary.transactions().filter(|t| pick(t)).cloned().collect()
    }

    fn largest_known(sim: &Custody) -> Option<Hash256> {
        let adv = &sim.fleet.adversary;
        adv.transactions()
            .filter_map(|t| {
                if is_vault_tx(t) {
                    Some((t.outputs[0].amount, compute_txid(t).ok()?))
                } else if is_p2rw(t) {
                    Some((t.outputs[0].amount, t.inputs[0].outpoint.txid))
                } else {
                    None
                }
            })
            .max()
            .map(|(_, txid)| txid)
    }

    fn start(&mut self, sim: &mut Custody) {
        self.started = true;
        if self.plan.silence {
            sim.silenced = (0..sim.towers.len()).collect();
        }
        if self.plan.redirect_payments {
            sim.tampered_destination = Some(sim.attacker_script.clone());
        }
        if self.plan.fake_alert {
            let fake = tagged_hash("vaultlab/fake-unvault", &[&sim.tick.to_le_bytes()]);
            for i in 0..sim.towers.len() {
                if sim.inject_alert(i, AlertKind::Unvault, fake) {
                    break;
                }
            }
        }
        if let Some(vis) = self.plan.broadcast_avts {
            for tx in Attacker::known(sim, is_vault_tx) {
                self.submit(sim, tx, vis);
            }
        }
        if self.plan.broadcast_p2rws {
            for tx in Attacker::known(sim, is_p2rw) {
                self.submit(sim, tx, self.plan.theft_visibility);
            }
        }
    }

    fn observe(&mut self, sim: &Custody) {
        let confirmed = sim.chain.blocks().iter().flat_map(|b| b.txids.iter().copied());
        let public: Vec<Hash256> = sim.chain.public_mempool().map(|e| e.txid).collect();
        for txid in confirmed.chain(public) {
            if self.unvaults.iter().any(|(t, _)| *t == txid) {
                continue;
            }
            if let Some(tx) = sim.chain.observed_tx(&txid) {
                if is_vault_tx(tx) {
                    self.unvaults.push((txid, tx.outputs[0].amount));
                }
            }
        }
    }

    fn targets(&self, sim: &Custody, target: Target) -> Vec<Hash256> {
        match target {
            Target::First => self.unvaults.first().map(|u| u.0).into_iter().collect(),
            Target::Nth(n) => self.unvaults.get(n).map(|u| u.0).into_iter().collect(),
            Target::All => self.unvaults.iter().map(|u| u.0).collect(),
            Target::Largest => match Attacker::largest_known(sim) {
                Some(t) => self.unvaults.iter().filter(|u| u.0 == t).map(|u| u.0).collect(),
                None => self.unvaults.first().map(|u| u.0).into_iter().collect(),
            },
        }
    }

    fn p2rw_for(sim: &Custody, vault_txid: &Hash256) -> Option<Transaction> {
        sim.fleet.adversary.transactions().find(|t| is_p2rw(t) && t.inputs[0].outpoint.txid == *vault_txid).cloned()
    }

    fn theft_fee(&self, sim: &Custody, tx: &Transaction) -> u64 {
        match self.plan.theft_visibility {
            Visibility::MinerPrivate => 0,
            Visibility::Public => sim.cfg.feerates.attacker * tx.vsize(),
        }
    }

    fn steal_active(&mut self, sim: &mut Custody, target: Target) {
        for txid in self.targets(sim, target) {
            if self.done.contains(&txid) {
                continue;
            }
            let op = OutPoint::new(txid, 0);
            if sim.chain.confirmed_spender_of(&op).is_some() {
                continue;
            }
            let Some(prev) = sim.chain.utxo(&op).cloned() else { continue };
            let Some(branches) = parse_vault_script(&prev.script) else { continue };
            if sim.chain.confirmations(&txid).unwrap_or(0) < branches.timelock {
                continue;
            }
            let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
            tx.inputs.push(TxInput { outpoint: op, sequence: branches.timelock });
            tx.outputs.push(TxOutput { amount: prev.amount, script: sim.attacker_script.clone() });
            tx.outputs[0].amount = prev.amount.saturating_sub(self.theft_fee(sim, &tx));
            let Some(sigs) = adversary_sign(&sim.fleet.adversary, &branches.active, &tx, SighashMode::All, &prev.script, prev.amount)
            else {
                continue;
            };
            tx.set_witness(0, path_witness(sigs, SpendPath::Active, branches.layered));
            if let Some(theft) = self.submit(sim, tx, self.plan.theft_visibility) {
                self.done.insert(txid);
                self.thefts.push(theft);
            }
        }
    }

    fn race(&mut self, sim: &mut Custody, target: Target) {
        for txid in self.targets(sim, target) {
            if self.done.contains(&txid) {
                continue;
            }
            if let Some(p2rw) = Attacker::p2rw_for(sim, &txid) {
                if self.submit(sim, p2rw, self.plan.theft_visibility).is_some() {
                    self.done.insert(txid);
                }
            }
        }
    }

    fn grief(&mut self, sim: &mut Custody) {
        let unvaults: Vec<Hash256> = self.unvaults.iter().map(|u| u.0).collect();
        for txid in unvaults {
            if self.done.contains(&txid) || sim.chain.spender_of(&OutPoint::new(txid, 0)).is_some() {
                continue;
            }
            if let Some(p2rw) = Attacker::p2rw_for(sim, &txid) {
                if self.submit(sim, p2rw, Visibility::Public).is_some() {
                    self.done.insert(txid);
                }
            }
        }
    }

    fn flood(&mut self, sim: &mut Custody) {
        if self.flooded {
            return;
        }
        let public = self.thefts.iter().any(|t| sim.chain.observed_tx(t).is_some());
        if public {
            self.flooded = true;
            for tx in Attacker::known(sim, is_vault_tx) {
                self.submit(sim, tx, Visibility::Public);
            }
        }
    }

    fn sweep(&mut self, sim: &mut Custody) {
        let mut candidates: Vec<(OutPoint, TxOutput)> =
            sim.chain.utxos().iter().map(|(op, u)| (*op, TxOutput { amount: u.amount, script: u.script.clone() })).collect();
        for e in sim.chain.mempool() {
            for (i, o) in e.tx.outputs.iter().enumerate() {
                candidates.push((OutPoint::new(e.txid, i as u32), o.clone()));
            }
        }
        for (op, out) in candidates {
            if out.amount == 0 || self.swept.contains(&op) || sim.chain.spender_of(&op).is_some() {
                continue;
            }
            if out.script == sim.attacker_script {
                continue;
            }
            let Some(spec) = parse_multisig(&out.script) else { continue };
            if !sim.fleet.adversary.can_sign(&spec) {
                continue;
            }
            let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
            tx.inputs.push(TxInput { outpoint: op, sequence: 0 });
            tx.outputs.push(TxOutput { amount: out.amount, script: sim.attacker_script.clone() });
            tx.outputs[0].amount = out.amount.saturating_sub(self.theft_fee(sim, &tx));
            let Some(sigs) = adversary_sign(&sim.fleet.adversary, &spec, &tx, SighashMode::All, &out.script, out.amount) else {
                continue;
            };
            tx.set_witness(0, sigs);
            if let Some(theft) = self.submit(sim, tx, self.plan.theft_visibility) {
                self.swept.insert(op);
                self.thefts.push(theft);
            }
        }
    }
}

impl Adversary for Attacker {
    fn act(&mut self, sim: &mut Custody) {
        if !self.started {
            self.start(sim);
        }
        self.observe(sim);
        if self.plan.grief {
            self.grief(sim);
        }
        if let Some(t) = self.plan.race_p2rw {
            self.race(sim, t);
        }
        if let Some(t) = self.plan.active_theft {
            self.steal_active(sim, t);
        }
        if self.plan.flood_after_theft {
            self.flood(sim);
        }
        if self.plan.sweep {
            self.sweep(sim);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeClass {
    NoLoss,
    LimitedLoss,
    Catastrophic,
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeClass::NoLoss => "NoLoss",
            OutcomeClass::LimitedLoss => "LimitedLoss",
            OutcomeClass::Catastrophic => "Catastrophic",
        })
    }
}

impl FromStr for OutcomeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NoLoss" => Ok(OutcomeClass::NoLoss),
            "LimitedLoss" => Ok(OutcomeClass::LimitedLoss),
            "Catastrophic" => Ok(OutcomeClass::Catastrophic),
            other => Err(format!("unknown outcome class `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub strategy: String,
    pub class: OutcomeClass,
    pub attacker_gain: u64,
    pub owner_retained: u64,
    pub frozen: u64,
    pub fees: u64,
    pub initial: u64,
    pub privacy_lost: bool,
    /// Largest single partition and the in-flight cap, for the loss bound.
    pub max_partition: u64,
    pub detected: bool,
    /// Full line-oriented report of the run.
    pub narrative: String,
}

impl ScenarioOutcome {
    pub fn loss(&self) -> u64 {
        self.attacker_gain + self.frozen
    }

    pub fn balanced(&self) -> bool {
        self.attacker_gain + self.owner_retained + self.frozen + self.fees == self.initial
    }

    fn rank(&self) -> (OutcomeClass, u64, u64) {
        (self.class, self.loss(), self.attacker_gain)
    }
}

/// A compromise taking effect at tick `event_index`. Index 0 applies during
/// set-up, before any vault exists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompromiseEvent {
    pub event_index: u64,
    pub delta: CompromiseSet,
}

/// Union of every delta in a schedule.
pub fn cumulative(schedule: &[CompromiseEvent]) -> CompromiseSet {
    schedule.iter().fold(CompromiseSet::default(), |acc, e| acc.union(&e.delta))
}

struct Scheduled {
    attacker: Attacker,
    pending: Vec<CompromiseEvent>,
}

impl Adversary for Scheduled {
    fn act(&mut self, sim: &mut Custody) {
        let now = sim.tick;
        let (due, rest): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|e| e.event_index <= now);
        self.pending = rest;
        for e in due {
            e.delta.apply_before_vaulting(sim);
            e.delta.apply_after_vaulting(sim);
        }
        self.attacker.act(sim);
    }
}

/// Plays one strategy against the honest owner.
pub fn run_strategy(cfg: &SimConfig, set: &CompromiseSet, strategy: &Strategy) -> Result<(ScenarioOutcome, Custody), ThreatError> {
    run_scheduled(cfg, &[CompromiseEvent { event_index: 0, delta: set.clone() }], strategy)
}

/// Plays one strategy while compromises land according to `schedule`.
pub fn run_scheduled(cfg: &SimConfig, schedule: &[CompromiseEvent], strategy: &Strategy) -> Result<(ScenarioOutcome, Custody), ThreatError> {
    let total = cumulative(schedule);
    total.validate(&cfg.topology)?;
    let initial = schedule.iter().filter(|e| e.event_index == 0).fold(CompromiseSet::default(), |acc, e| acc.union(&e.delta));
    let later: Vec<CompromiseEvent> = schedule.iter().filter(|e| e.event_index > 0).cloned().collect();
    let mut sim = Custody::new(cfg.clone())?;
    initial.apply_before_vaulting(&mut sim);
    sim.vault_all();
    initial.apply_after_vaulting(&mut sim);
    let mut adversary = Scheduled { attacker: Attacker::new(strategy.plan.clone()), pending: later };
    sim.run(&mut adversary);
    let acc = sim.accounting();
    let loss = acc.attacker + acc.frozen;
    let class = if loss == 0 {
        OutcomeClass::NoLoss
    } else if !acc.partitions.is_empty() && acc.partitions.iter().all(|p| p.owner == 0) {
        OutcomeClass::Catastrophic
    } else {
        OutcomeClass::LimitedLoss
    };
    let detected = sim.full_recovery_done()
        || sim.recovery_compromise_detected()
        || sim.payments_halted()
        || sim.vaults.iter().any(|v| matches!(v.state, VaultState::Recovered | VaultState::Revaulted));
    let outcome = ScenarioOutcome {
        scenario: String::new(),
        strategy: strategy.name.clone(),
        class,
        attacker_gain: acc.attacker,
        owner_retained: acc.owner,
        frozen: acc.frozen,
        fees: acc.fees,
        initial: acc.initial,
        privacy_lost: total.privacy_lost(),
        max_partition: sim.vaults.iter().map(|v| v.pair.vault_amount).max().unwrap_or(0),
        detected,
        narrative: sim.report(),
    };
    Ok((outcome, sim))
}

/// Best play over every strategy the compromise enables, ranked by outcome
/// class, then loss, then attacker gain. Earlier strategies win ties.
pub fn best_play(cfg: &SimConfig, set: &CompromiseSet) -> Result<ScenarioOutcome, ThreatError> {
    best_scheduled(cfg, &[CompromiseEvent { event_index: 0, delta: set.clone() }]).map(|(o, _)| o)
}

/// Best play under a compromise schedule, with the winning run's state.
pub fn best_scheduled(cfg: &SimConfig, schedule: &[CompromiseEvent]) -> Result<(ScenarioOutcome, Custody), ThreatError> {
    let caps = cumulative(schedule).capabilities(cfg);
    let mut best: Option<(ScenarioOutcome, Custody)> = None;
    for s in strategies(cfg).iter().filter(|s| s.requires.is_subset(&caps)) {
        let run = run_scheduled(cfg, schedule, s)?;
        if best.as_ref().is_none_or(|(b, _)| run.0.rank() > b.rank()) {
            best = Some(run);
        }
    }
    Ok(best.expect("passive strategy always applies"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    Catastrophic(u8),
    Limited(u8),
}

impl ScenarioId {
    pub fn all() -> Vec<ScenarioId> {
        (1..=8).map(ScenarioId::Catastrophic).chain((1..=10).map(ScenarioId::Limited)).collect()
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioId::Catastrophic(n) => write!(f, "C{n}"),
            ScenarioId::Limited(n) => write!(f, "L{n}"),
        }
    }
}

impl FromStr for ScenarioId {
    type Err = ThreatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ThreatError::UnknownScenario(s.to_string());
        let (kind, n) = s.split_at(1.min(s.len()));
        let n: u8 = n.parse().map_err(|_| bad())?;
        match (kind, n) {
            ("C", 1..=8) => Ok(ScenarioId::Catastrophic(n)),
            ("L", 1..=10) => Ok(ScenarioId::Limited(n)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub title: &'static str,
    pub compromise: CompromiseSet,
    pub expected: OutcomeClass,
    /// Tick at which an unrelated event forces a full recovery.
    pub forced_recovery_at: Option<u64>,
}

pub fn scenario(id: ScenarioId, topo: &WalletTopology) -> Scenario {
    let rec = topo.recovery.threshold;
    let act = topo.active.threshold;
    let eph = topo.vault.threshold;
    let w = topo.watchtower_w;
    let set = |f: &dyn Fn(&mut CompromiseSet)| {
        let mut s = CompromiseSet::default();
        f(&mut s);
        s
    };
    use OutcomeClass::*;
    let (title, compromise, expected, forced) = match id {
        ScenarioId::Catastrophic(1) => ("recovery wallet", set(&|s| s.recovery_keys = rec), Catastrophic, Some(2)),
        ScenarioId::Catastrophic(2) => (
            "recovery wallet + P2RW storage",
            set(&|s| {
                s.recovery_keys = rec;
                s.p2rw_storage = true
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Catastrophic(3) => (
            "recovery wallet + AVT storage",
            set(&|s| {
                s.recovery_keys = rec;
                s.avt_storage = true
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Catastrophic(4) => (
            "recovery wallet + AVT + P2RW storage",
            set(&|s| {
                s.recovery_keys = rec;
                s.avt_storage = true;
                s.p2rw_storage = true
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Catastrophic(5) => (
            "recovery wallet + watchtower",
            set(&|s| {
                s.recovery_keys = rec;
                s.watchtower_nodes = w
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Catastrophic(6) => (
            "active wallet + AVT storage + watchtower",
            set(&|s| {
                s.active_keys = act;
                s.avt_storage = true;
                s.watchtower_nodes = w
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Catastrophic(7) => ("ephemeral vault keys", set(&|s| s.ephemeral_keys = eph), Catastrophic, None),
        ScenarioId::Catastrophic(8) => (
            "ephemeral vault keys + watchtower",
            set(&|s| {
                s.ephemeral_keys = eph;
                s.watchtower_nodes = w
            }),
            Catastrophic,
            None,
        ),
        ScenarioId::Limited(1) => ("AVT storage", set(&|s| s.avt_storage = true), NoLoss, None),
        ScenarioId::Limited(2) => ("active wallet", set(&|s| s.active_keys = act), LimitedLoss, None),
        ScenarioId::Limited(3) => (
            "active wallet + watchtower",
            set(&|s| {
                s.active_keys = act;
                s.watchtower_nodes = w
            }),
            LimitedLoss,
            None,
        ),
        ScenarioId::Limited(4) => (
            "active wallet + AVT storage",
            set(&|s| {
                s.active_keys = act;
                s.avt_storage = true
            }),
            LimitedLoss,
            None,
        ),
        ScenarioId::Limited(5) => (
            "watchtower + AVT storage",
            set(&|s| {
                s.watchtower_nodes = w;
                s.avt_storage = true
            }),
            NoLoss,
            None,
        ),
        ScenarioId::Limited(6) => ("P2RW storage", set(&|s| s.p2rw_storage = true), NoLoss, None),
        ScenarioId::Limited(7) => ("watchtower", set(&|s| s.watchtower_nodes = w), NoLoss, None),
        ScenarioId::Limited(8) => (
            "watchtower + P2RW storage",
            set(&|s| {
                s.watchtower_nodes = w;
                s.p2rw_storage = true
            }),
            NoLoss,
            None,
        ),
        ScenarioId::Limited(9) => ("human-check channels", set(&|s| s.human_check_oob = true), LimitedLoss, None),
        ScenarioId::Limited(10) => ("fee wallet", set(&|s| s.fee_keys = topo.fee.threshold), LimitedLoss, None),
        other => unreachable!("no scenario {other}"),
    };
    Scenario { id, title, compromise, expected, forced_recovery_at: forced }
}

/// Runs a numbered scenario with the attacker's best play.
pub fn run_scenario(id: ScenarioId, base: &SimConfig) -> Result<ScenarioOutcome, ThreatError> {
    let sc = scenario(id, &base.topology);
    let mut cfg = base.clone();
    if sc.forced_recovery_at.is_some() {
        cfg.forced_full_recovery_at = sc.forced_recovery_at;
    }
    let mut outcome = best_play(&cfg, &sc.compromise)?;
    outcome.scenario = id.to_string();
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub scenario: String,
    pub title: String,
    pub expected: OutcomeClass,
    pub class: OutcomeClass,
    pub attacker_gain: u64,
    pub frozen: u64,
    pub strategy: String,
}

impl MatrixRow {
    pub fn matches(&self) -> bool {
        self.expected == self.class
    }
}

/// Every scenario under `cfg`; runs in parallel, ordered by scenario id.
pub fn outcome_matrix(cfg: &SimConfig) -> Result<Vec<MatrixRow>, ThreatError> {
    let ids = ScenarioId::all();
    let results: Vec<Result<MatrixRow, ThreatError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ids
            .iter()
            .map(|&id| {
                scope.spawn(move || {
                    let sc = scenario(id, &cfg.topology);
                    let o = run_scenario(id, cfg)?;
                    Ok(MatrixRow {
                        scenario: id.to_string(),
                        title: sc.title.to_string(),
                        expected: sc.expected,
                        class: o.class,
                        attacker_gain: o.attacker_gain,
                        frozen: o.frozen,
                        strategy: o.strategy,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread")).collect()
    });
    results.into_iter().collect()
}

/// One cell of the device grid: best play when the named devices (one
/// each) are compromised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCell {
    pub devices: Vec<String>,
    pub class: OutcomeClass,
    pub attacker_gain: u64,
    pub frozen: u64,
    pub strategy: String,
}

const SINGLE_DEVICES: [&str; 7] = ["recovery", "active", "vault", "avt-storage", "p2rw-storage", "watchtower", "fee"];

fn single_device(name: &str, set: &mut CompromiseSet) {
    match name {
        "recovery" => set.recovery_keys += 1,
        "active" => set.active_keys += 1,
        "vault" => set.ephemeral_keys += 1,
        "avt-storage" => set.avt_storage = true,
        "p2rw-storage" => set.p2rw_storage = true,
        "watchtower" => set.watchtower_nodes += 1,
        "fee" => set.fee_keys += 1,
        other => unreachable!("device {other}"),
    }
}

/// Every single device and every pair of devices from distinct
/// functionalities. Without redundancy most pairs are catastrophic.
pub fn device_matrix(cfg: &SimConfig) -> Result<Vec<DeviceCell>, ThreatError> {
    let mut combos: Vec<Vec<&str>> = SINGLE_DEVICES.iter().map(|d| vec![*d]).collect();
    for (i, a) in SINGLE_DEVICES.iter().enumerate() {
        combos.extend(SINGLE_DEVICES[i + 1..].iter().map(|b| vec![*a, *b]));
    }
    let results: Vec<Result<DeviceCell, ThreatError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = combos
            .iter()
            .map(|combo| {
                scope.spawn(move || {
                    let mut set = CompromiseSet::default();
                    for d in combo {
                        single_device(d, &mut set);
                    }
                    let o = best_play(cfg, &set)?;
                    Ok(DeviceCell {
                        devices: combo.iter().map(|d| d.to_string()).collect(),
                        class: o.class,
                        attacker_gain: o.attacker_gain,
                        frozen: o.frozen,
                        strategy: o.strategy,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("device thread")).collect()
    });
    results.into_iter().collect()
}

pub fn render_devices(cells: &[DeviceCell]) -> String {
    let mut s = format!("{:<28} {:<13} {:>14} {:>14} strategy\n", "compromised", "class", "attacker_gain", "frozen");
    for c in cells {
        let _ = writeln!(s, "{:<28} {:<13} {:>14} {:>14} {}", c.devices.join("+"), c.class.to_string(), c.attacker_gain, c.frozen, c.strategy);
    }
    s
}

pub fn render_matrix(rows: &[MatrixRow]) -> String {
    let mut s = format!("{:<4} {:<42} {:<13} {:<13} {:>14} {:>14} {:<24} flag\n", "id", "compromise", "expected", "class", "attacker_gain", "frozen", "strategy");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<4} {:<42} {:<13} {:<13} {:>14} {:>14} {:<24} {}",
            r.scenario,
            r.title,
            r.expected.to_string(),
            r.class.to_string(),
            r.attacker_gain,
            r.frozen,
            r.strategy,
            if r.matches() { "ok" } else { "DIVERGES" }
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    Owner,
    Attacker,
}

/// Two spends of one output, the owner's public and the attacker's public or
/// handed to a miner with `bribe`. Decided by chain-sim priority rules.
pub fn race(owner_feerate: u64, attacker_feerate: u64, attacker_private: bool, bribe: u64) -> Winner {
    let key = KeyPair::from_secret("race", tagged_hash("vaultlab/race", &[]).0);
    let spec = MultisigSpec::new(1, vec![key.public]).expect("1-of-1");
    let mut chain = ChainState::with_bribe_bonus(bribe);
    let amount = COIN;
    let funded = chain.fund(spec.script(), amount);
    let spend = |feerate: u64, tag: i64| {
        let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
        tx.inputs.push(TxInput { outpoint: funded, sequence: 0 });
        tx.outputs.push(TxOutput { amount, script: Script::new(vec![Op::Num(tag)]) });
        tx.outputs[0].amount = amount - feerate * tx.vsize();
        let sig = sign_input(&tx, 0, &key, SighashMode::All, &spec.script(), amount).expect("input 0");
        tx.set_witness(0, vec![sig]);
        tx
    };
    let owner = spend(owner_feerate, 1);
    let attacker = spend(attacker_feerate, 2);
    let owner_txid = compute_txid(&owner).expect("well formed");
    let vis = if attacker_private { Visibility::MinerPrivate } else { Visibility::Public };
    let _ = chain.submit(owner, Visibility::Public);
    let _ = chain.submit(attacker, vis);
    chain.mine_block();
    if chain.is_confirmed(&owner_txid) {
        Winner::Owner
    } else {
        Winner::Attacker
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToleranceRow {
    pub functionality: String,
    pub devices: usize,
    /// Devices that may be lost while the honest flow still completes.
    pub loss_tolerance: usize,
    /// Devices whose keys may leak without enabling a forged spend.
    pub leak_tolerance: Option<usize>,
    /// Devices whose contents may be stolen without leaking them.
    pub theft_tolerance: Option<usize>,
    pub cases: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToleranceTable {
    pub rows: Vec<ToleranceRow>,
}

impl ToleranceTable {
    pub fn row(&self, functionality: &str) -> Option<&ToleranceRow> {
        self.rows.iter().find(|r| r.functionality == functionality)
    }

    pub fn cases(&self) -> usize {
        self.rows.iter().map(|r| r.cases).sum()
    }

    pub fn render(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let mut s = format!("{:<18} {:>7} {:>5} {:>5} {:>6} {:>6}\n", "functionality", "devices", "loss", "leak", "theft", "cases");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>7} {:>5} {:>5} {:>6} {:>6}",
                r.functionality,
                r.devices,
                r.loss_tolerance,
                opt(r.leak_tolerance),
                opt(r.theft_tolerance),
                r.cases
            );
        }
        s
    }
}

/// Largest k such that every subset of at most k devices passes `ok`.
fn tolerated(devices: usize, mut ok: impl FnMut(&[usize]) -> bool) -> (usize, usize) {
    let mut min_fail = devices + 1;
    let cases = 1usize << devices;
    for mask in 0..cases {
        let subset: Vec<usize> = (0..devices).filter(|i| mask & (1 << i) != 0).collect();
        if subset.len() < min_fail && !ok(&subset) {
            min_fail = subset.len();
        }
    }
    (min_fail - 1, cases)
}

fn dummy_spend(script: &Script, amount: u64) -> Transaction {
    let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    tx.inputs.push(TxInput { outpoint: OutPoint::new(tagged_hash("vaultlab/oracle", &[&script.encode()]), 0), sequence: 0 });
    tx.outputs.push(TxOutput { amount, script: Script::new(vec![Op::Num(1)]) });
    tx
}

fn wallet_row(topo: &WalletTopology, role: WalletRole, name: &str, seed: u64) -> Result<ToleranceRow, ThreatError> {
    let fresh = || Fleet::new(topo.clone(), seed).expect("validated topology");
    let members = fresh().members(role);
    let (loss, c1) = tolerated(members.len(), |lost| {
        let mut fleet = fresh();
        for &i in lost {
            fleet.fail(&members[i]).expect("member");
        }
        let spec = fleet.wallet_spec(role, 0).expect("exported");
        let script = spec.script();
        let mut tx = dummy_spend(&script, 1);
        match fleet.sign_for_spec(role, 0, &spec, &tx, 0, SighashMode::All, &script, 1) {
            Ok(sigs) => {
                tx.set_witness(0, sigs);
                eval_script(&script, &ExecContext::new(&tx, 0, 1, 1)).is_ok()
            }
            Err(_) => false,
        }
    });
    let (leak, c2) = tolerated(members.len(), |leaked| {
        let mut fleet = fresh();
        for &i in leaked {
            fleet.compromise(&members[i]).expect("member");
        }
        let spec = fleet.wallet_spec(role, 0).expect("exported");
        !fleet.adversary.can_sign(&spec)
    });
    Ok(ToleranceRow {
        functionality: name.into(),
        devices: members.len(),
        loss_tolerance: loss,
        leak_tolerance: Some(leak),
        theft_tolerance: None,
        cases: c1 + c2,
    })
}

fn storage_row(name: &str, devices: usize) -> ToleranceRow {
    let tx = dummy_spend(&Script::new(vec![Op::Num(1)]), 7);
    let key = compute_txid(&tx).expect("well formed");
    let fresh = || {
        let mut store = ActStore::new(name, (0..devices).map(|i| format!("{name}/{i}")));
        for h in store.holder_ids() {
            store.store(&h, key, &tx).expect("holder");
        }
        store
    };
    let (loss, c1) = tolerated(devices, |lost| {
        let mut store = fresh();
        for &i in lost {
            store.fail(&format!("{name}/{i}")).expect("holder");
        }
        store.fetch(&key, Some(&key)).is_ok()
    });
    let (theft, c2) = tolerated(devices, |stolen| {
        let mut store = fresh();
        let mut adv = AdversaryKnowledge::default();
        for &i in stolen {
            for t in store.compromise(&format!("{name}/{i}")).expect("holder") {
                adv.learn_tx(t);
            }
        }
        adv.tx(&key).is_none()
    });
    ToleranceRow {
        functionality: name.into(),
        devices,
        loss_tolerance: loss,
        leak_tolerance: None,
        theft_tolerance: Some(theft),
        cases: c1 + c2,
    }
}

fn watchtower_row(base: &SimConfig) -> Result<ToleranceRow, ThreatError> {
    let w = base.topology.watchtower_w;
    let mut err = None;
    let (loss, cases) = tolerated(w, |dead| {
        let cfg = SimConfig {
            partitions: vec![COIN],
            unvault_start: Some(1000),
            horizon: Some(base.topology.timelock_t as u64 + 4),
            dead_watchtowers: dead.to_vec(),
            ..base.clone()
        };
        let mut sim = match Custody::launch(cfg) {
            Ok(s) => s,
            Err(e) => {
                err = Some(e);
                return false;
            }
        };
        let avt = sim.vaults[0].pair.avt.clone();
        let _ = sim.chain.submit(avt, Visibility::Public);
        sim.run(&mut crate::orchestrator::Honest);
        sim.vaults[0].state == VaultState::Recovered && !sim.alerts.is_empty()
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(ToleranceRow { functionality: "watchtower".into(), devices: w, loss_tolerance: loss, leak_tolerance: None, theft_tolerance: None, cases })
}

fn human_check_row() -> ToleranceRow {
    let (loss, cases) = tolerated(2, |compromised| {
        let state = ChannelState { in_band_compromised: compromised.contains(&0), oob_compromised: compromised.contains(&1) };
        human_check(&state, b"intended", b"tampered") == CheckResult::Fail
    });
    ToleranceRow { functionality: "human-check".into(), devices: 2, loss_tolerance: loss, leak_tolerance: None, theft_tolerance: None, cases }
}

fn vault_keys_row(topo: &WalletTopology, seed: u64) -> ToleranceRow {
    let fresh = || Fleet::new(topo.clone(), seed).expect("validated topology");
    let members = fresh().members(WalletRole::VaultWallet);
    let keygen = |fleet: &mut Fleet| -> Option<MultisigSpec> {
        let keys: Option<Vec<_>> = members.iter().map(|id| fleet.gen_ephemeral(id).ok().map(|(_, pk)| pk)).collect();
        MultisigSpec::new(topo.vault.threshold, keys?).ok()
    };
    let (loss, c1) = tolerated(members.len(), |lost| {
        let mut fleet = fresh();
        for &i in lost {
            fleet.fail(&members[i]).expect("member");
        }
        keygen(&mut fleet).is_some()
    });
    let (leak, c2) = tolerated(members.len(), |leaked| {
        let mut fleet = fresh();
        for &i in leaked {
            fleet.compromise(&members[i]).expect("member");
        }
        keygen(&mut fleet).is_some_and(|spec| !fleet.adversary.can_sign(&spec))
    });
    ToleranceRow {
        functionality: "vault-keys".into(),
        devices: members.len(),
        loss_tolerance: loss,
        leak_tolerance: Some(leak),
        theft_tolerance: None,
        cases: c1 + c2,
    }
}

/// Exhaustive subset enumeration of failures and leaks per functionality.
pub fn tolerance_oracle(cfg: &SimConfig) -> Result<ToleranceTable, ThreatError> {
    cfg.validate()?;
    let topo = &cfg.topology;
    let counts = [
        ("topology.active.count", topo.active.count),
        ("topology.recovery.count", topo.recovery.count),
        ("topology.vault.count", topo.vault.count),
        ("topology.fee.count", topo.fee.count),
        ("topology.avt_storage_r", topo.avt_storage_r),
        ("topology.p2rw_storage_s", topo.p2rw_storage_s),
        ("topology.watchtower_w", topo.watchtower_w),
    ];
    for (field, value) in counts {
        if value > ORACLE_BOUND {
            return Err(ThreatError::Bound { field: field.into(), value, bound: ORACLE_BOUND });
        }
    }
    let rows = vec![
        wallet_row(topo, WalletRole::Recovery, "recovery-wallet", cfg.seed)?,
        wallet_row(topo, WalletRole::Active, "active-wallet", cfg.seed)?,
        wallet_row(topo, WalletRole::Fee, "fee-wallet", cfg.seed)?,
        vault_keys_row(topo, cfg.seed),
        storage_row("avt-storage", topo.avt_storage_r),
        storage_row("p2rw-storage", topo.p2rw_storage_s),
        watchtower_row(cfg)?,
        human_check_row(),
    ];
    Ok(ToleranceTable { rows })
}
