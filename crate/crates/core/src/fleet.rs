//! Simulated hardware modules (HMs): key trees, ephemeral vault-wallet keys
//! with secure deletion, redundant storage of signed covenant transactions,
//! the human check, and what an adversary learns from compromising them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covenant::MultisigSpec;
use crate::script::Script;
use crate::txkit::{
    compute_txid, sighash_digest, tagged_hash, Hash256, KeyPair, PublicKey, SighashMode, Signature, Transaction,
    TxError,
};

/// Public keys pre-exported per wallet HM during set-up, so new addresses can
/// be built without touching the device again.
pub const ADDRESS_WINDOW: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FleetError {
    #[error("policy: {0}")]
    Policy(String),
    #[error("device failure: {0}")]
    DeviceFailure(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{available} usable signers for a {threshold}-of-n wallet")]
    Threshold { threshold: usize, available: usize },
    #[error("invalid topology field `{field}`: {reason}")]
    Topology { field: &'static str, reason: String },
    #[error(transparent)]
    Tx(#[from] TxError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: usize,
    pub count: usize,
}

impl Threshold {
    pub const fn new(threshold: usize, count: usize) -> Self {
        Threshold { threshold, count }
    }
}

/// Every threshold and redundancy parameter of a deployment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalletTopology {
    /// (j, k)
    pub active: Threshold,
    /// (m, n)
    pub recovery: Threshold,
    /// (p, t)
    pub vault: Threshold,
    /// (a, b)
    pub fee: Threshold,
    pub avt_storage_r: usize,
    pub p2rw_storage_s: usize,
    pub watchtower_w: usize,
    pub timelock_t: u32,
}

impl Default for WalletTopology {
    fn default() -> Self {
        WalletTopology {
            active: Threshold::new(2, 3),
            recovery: Threshold::new(2, 3),
            vault: Threshold::new(2, 3),
            fee: Threshold::new(2, 3),
            avt_storage_r: 3,
            p2rw_storage_s: 2,
            watchtower_w: 2,
            timelock_t: 6,
        }
    }
}

impl WalletTopology {
    /// 1-of-1 everywhere, single storage copies and a single watchtower node.
    pub fn minimal(timelock_t: u32) -> Self {
        let one = Threshold::new(1, 1);
        WalletTopology {
            active: one,
            recovery: one,
            vault: one,
            fee: one,
            avt_storage_r: 1,
            p2rw_storage_s: 1,
            watchtower_w: 1,
            timelock_t,
        }
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let pairs = [
            ("active", self.active),
            ("recovery", self.recovery),
            ("vault", self.vault),
            ("fee", self.fee),
        ];
        for (field, t) in pairs {
            if t.threshold == 0 || t.count == 0 {
                return Err(FleetError::Topology { field, reason: "threshold and count must be at least 1".into() });
            }
            if t.threshold > t.count {
                return Err(FleetError::Topology {
                    field,
                    reason: format!("threshold {} exceeds count {}", t.threshold, t.count),
                });
            }
        }
        let min_r = self.required_deletions();
        if self.avt_storage_r < min_r || self.avt_storage_r > self.vault.count {
            return Err(FleetError::Topology {
                field: "avt_storage_r",
                reason: format!("must lie in {}..={} (t-p+1 ..= t)", min_r, self.vault.count),
            });
        }
        if self.p2rw_storage_s == 0 {
            return Err(FleetError::Topology { field: "p2rw_storage_s", reason: "must be at least 1".into() });
        }
        if self.watchtower_w == 0 {
            return Err(FleetError::Topology { field: "watchtower_w", reason: "must be at least 1".into() });
        }
        Ok(())
    }

    /// Deletions needed before a covenant may activate: t - p + 1.
    pub fn required_deletions(&self) -> usize {
        self.vault.count - self.vault.threshold + 1
    }

    pub fn count_of(&self, role: WalletRole) -> usize {
        match role {
            WalletRole::Active => self.active.count,
            WalletRole::Recovery => self.recovery.count,
            WalletRole::VaultWallet => self.vault.count,
            WalletRole::Fee => self.fee.count,
        }
    }

    pub fn threshold_of(&self, role: WalletRole) -> usize {
        match role {
            WalletRole::Active => self.active.threshold,
            WalletRole::Recovery => self.recovery.threshold,
            WalletRole::VaultWallet => self.vault.threshold,
            WalletRole::Fee => self.fee.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalletRole {
    Active,
    Recovery,
    VaultWallet,
    Fee,
}

impl WalletRole {
    pub const ALL: [WalletRole; 4] = [WalletRole::Active, WalletRole::Recovery, WalletRole::VaultWallet, WalletRole::Fee];

    pub fn label(self) -> &'static str {
        match self {
            WalletRole::Active => "active",
            WalletRole::Recovery => "recovery",
            WalletRole::VaultWallet => "vault",
            WalletRole::Fee => "fee",
        }
    }
}

impl fmt::Display for WalletRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Hierarchical wallet types. The vault wallet is deliberately absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalletType {
    Active,
    Recovery,
    Fee,
}

impl WalletType {
    pub fn label(self) -> &'static str {
        match self {
            WalletType::Active => "active",
            WalletType::Recovery => "recovery",
            WalletType::Fee => "fee",
        }
    }

    pub fn for_role(role: WalletRole) -> Option<WalletType> {
        match role {
            WalletRole::Active => Some(WalletType::Active),
            WalletRole::Recovery => Some(WalletType::Recovery),
            WalletRole::Fee => Some(WalletType::Fee),
            WalletRole::VaultWallet => None,
        }
    }
}

pub fn derivation_path(wallet: WalletType, index: u32) -> String {
    format!("m/vault custody/{}/{}", wallet.label(), index)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionReceipt {
    pub hm_id: String,
    pub key_id: String,
    pub event: u64,
    /// False when the device was already compromised. Honest parties cannot
    /// see this flag; it exists for post-hoc audits.
    pub effective: bool,
}

#[derive(Clone, Debug)]
struct EphemeralKey {
    public: PublicKey,
    key: Option<KeyPair>,
}

#[derive(Clone, Debug)]
pub struct HardwareModule {
    pub hm_id: String,
    pub role: WalletRole,
    seed: [u8; 32],
    path_records: BTreeSet<String>,
    ephemeral: BTreeMap<String, EphemeralKey>,
    eph_rng: ChaCha20Rng,
    eph_counter: u64,
    pub stored_addresses: BTreeSet<String>,
    pub receipts: Vec<DeletionReceipt>,
    pub compromised_at: Option<u64>,
    pub failed: bool,
}

impl HardwareModule {
    pub fn new(hm_id: impl Into<String>, role: WalletRole, seed: [u8; 32]) -> Self {
        let hm_id = hm_id.into();
        let eph_seed = tagged_hash("vaultlab/hm-entropy", &[&seed]);
        HardwareModule {
            hm_id,
            role,
            seed,
            path_records: BTreeSet::new(),
            ephemeral: BTreeMap::new(),
            eph_rng: ChaCha20Rng::from_seed(eph_seed.0),
            eph_counter: 0,
            stored_addresses: BTreeSet::new(),
            receipts: Vec::new(),
            compromised_at: None,
            failed: false,
        }
    }

    fn ensure_alive(&self) -> Result<(), FleetError> {
        if self.failed {
            Err(FleetError::DeviceFailure(self.hm_id.clone()))
        } else {
            Ok(())
        }
    }

    /// Deterministic child key at `m/vault custody/<type>/<index>`.
    pub fn derive_key(&mut self, wallet: WalletType, index: u32) -> Result<KeyPair, FleetError> {
        if self.role == WalletRole::VaultWallet {
            return Err(FleetError::Policy(format!("{} holds no hierarchical key tree", self.hm_id)));
        }
        self.ensure_alive()?;
        let path = derivation_path(wallet, index);
        self.path_records.insert(path.clone());
        Ok(self.key_at(&path))
    }

    fn key_at(&self, path: &str) -> KeyPair {
        let secret = tagged_hash("vaultlab/derive", &[&self.seed, path.as_bytes()]);
        KeyPair::from_secret(format!("{}/{}", self.hm_id, path), secret.0)
    }

    pub fn path_records(&self) -> &BTreeSet<String> {
        &self.path_records
    }

    /// Fresh random key outside the key tree; no path is recorded.
    pub fn gen_ephemeral(&mut self) -> Result<(String, PublicKey), FleetError> {
        if self.role != WalletRole::VaultWallet {
            return Err(FleetError::Policy(format!("{} is not a vault-wallet device", self.hm_id)));
        }
        self.ensure_alive()?;
        let mut secret = [0u8; 32];
        self.eph_rng.fill_bytes(&mut secret);
        self.eph_counter += 1;
        let key_id = format!("{}/ephemeral/{}", self.hm_id, self.eph_counter);
        let key = KeyPair::from_secret(key_id.clone(), secret);
        let public = key.public;
        self.ephemeral.insert(key_id.clone(), EphemeralKey { public, key: Some(key) });
        Ok((key_id, public))
    }

    pub fn ephemeral_public(&self, key_id: &str) -> Option<PublicKey> {
        self.ephemeral.get(key_id).map(|e| e.public)
    }

    pub fn is_live(&self, key_id: &str) -> bool {
        self.ephemeral.get(key_id).is_some_and(|e| e.key.is_some())
    }

    pub fn sign_ephemeral(&self, key_id: &str, digest: &Hash256) -> Result<Signature, FleetError> {
        self.ensure_alive()?;
        let entry = self.ephemeral.get(key_id).ok_or_else(|| FleetError::NotFound(key_id.to_string()))?;
        let key = entry.key.as_ref().ok_or_else(|| TxError::KeyDeleted(key_id.to_string()))?;
        Ok(key.sign(digest))
    }

    /// Witness signature item (`sig || sighash byte`) from an ephemeral key.
    pub fn sign_input_ephemeral(
        &self,
        key_id: &str,
        tx: &Transaction,
        index: usize,
        mode: SighashMode,
        spent_script: &Script,
        spent_amount: u64,
    ) -> Result<Vec<u8>, FleetError> {
        let digest = sighash_digest(tx, index, mode, spent_script, spent_amount)?;
        let mut item = self.sign_ephemeral(key_id, &digest)?.bytes.to_vec();
        item.push(mode.to_byte());
        Ok(item)
    }

    pub fn delete_key(&mut self, key_id: &str, event: u64) -> Result<DeletionReceipt, FleetError> {
        let entry = self.ephemeral.get_mut(key_id).ok_or_else(|| FleetError::NotFound(key_id.to_string()))?;
        if entry.key.take().is_none() {
            return Err(FleetError::NotFound(format!("{key_id} (already deleted)")));
        }
        let receipt = DeletionReceipt {
            hm_id: self.hm_id.clone(),
            key_id: key_id.to_string(),
            event,
            effective: self.compromised_at.is_none_or(|c| c > event),
        };
        self.receipts.push(receipt.clone());
        Ok(receipt)
    }

    fn live_ephemeral_keys(&self) -> impl Iterator<Item = &KeyPair> {
        self.ephemeral.values().filter_map(|e| e.key.as_ref())
    }

    pub fn live_ephemeral_count(&self) -> usize {
        self.live_ephemeral_keys().count()
    }
}

/// Everything an adversary has learned. Only grows.
#[derive(Clone, Debug, Default)]
pub struct AdversaryKnowledge {
    keys: BTreeMap<String, KeyPair>,
    transactions: BTreeMap<Hash256, Transaction>,
    addresses: BTreeSet<String>,
    channels: BTreeSet<String>,
}

impl AdversaryKnowledge {
    pub fn learn_key(&mut self, key: KeyPair) {
        self.keys.entry(key.key_id.clone()).or_insert(key);
    }

    pub fn learn_tx(&mut self, tx: Transaction) {
        if let Ok(txid) = compute_txid(&tx) {
            self.transactions.entry(txid).or_insert(tx);
        }
    }

    pub fn learn_address(&mut self, address: impl Into<String>) {
        self.addresses.insert(address.into());
    }

    pub fn learn_channel(&mut self, channel: impl Into<String>) {
        self.channels.insert(channel.into());
    }

    pub fn key_for(&self, public: &PublicKey) -> Option<&KeyPair> {
        self.keys.values().find(|k| k.public == *public)
    }

    pub fn has_key_id(&self, key_id: &str) -> bool {
        self.keys.contains_key(key_id)
    }

    /// Known keys among `spec`, in key order.
    pub fn keys_for(&self, spec: &MultisigSpec) -> Vec<&KeyPair> {
        spec.keys.iter().filter_map(|pk| self.key_for(pk)).collect()
    }

    pub fn can_sign(&self, spec: &MultisigSpec) -> bool {
        self.keys_for(spec).len() >= spec.threshold
    }

    pub fn tx(&self, txid: &Hash256) -> Option<&Transaction> {
        self.transactions.get(txid)
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.transactions.values()
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn transaction_count(&self) -> usize {
        self.transactions.len()
    }

    pub fn addresses(&self) -> &BTreeSet<String> {
        &self.addresses
    }

    pub fn channels(&self) -> &BTreeSet<String> {
        &self.channels
    }

    /// Size vector used to check monotonic growth.
    pub fn footprint(&self) -> (usize, usize, usize, usize) {
        (self.keys.len(), self.transactions.len(), self.addresses.len(), self.channels.len())
    }

    pub fn is_empty(&self) -> bool {
        self.footprint() == (0, 0, 0, 0)
    }
}

/// One entry of the device access log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub event: u64,
    pub hm_id: String,
    pub action: String,
}

/// All HMs of a deployment plus the adversary's view of them.
#[derive(Clone, Debug)]
pub struct Fleet {
    pub topology: WalletTopology,
    hms: BTreeMap<String, HardwareModule>,
    /// Public keys exported by each HM for indices below `ADDRESS_WINDOW`.
    exported: BTreeMap<String, Vec<PublicKey>>,
    replacements: u32,
    seed: [u8; 32],
    pub adversary: AdversaryKnowledge,
    pub clock: u64,
    access_log: Vec<Access>,
}

pub fn hm_id(role: WalletRole, index: usize) -> String {
    format!("{}/{}", role.label(), index)
}

impl Fleet {
    pub fn new(topology: WalletTopology, seed: u64) -> Result<Self, FleetError> {
        topology.validate()?;
        let seed = tagged_hash("vaultlab/fleet", &[&seed.to_le_bytes()]).0;
        let mut fleet = Fleet {
            topology,
            hms: BTreeMap::new(),
            exported: BTreeMap::new(),
            replacements: 0,
            seed,
            adversary: AdversaryKnowledge::default(),
            clock: 0,
            access_log: Vec::new(),
        };
        for role in WalletRole::ALL {
            for i in 0..fleet.topology.count_of(role) {
                fleet.add_hm(hm_id(role, i), role);
            }
        }
        Ok(fleet)
    }

    fn add_hm(&mut self, id: String, role: WalletRole) {
        let hm_seed = tagged_hash("vaultlab/hm-seed", &[&self.seed, id.as_bytes()]).0;
        let mut hm = HardwareModule::new(id.clone(), role, hm_seed);
        if let Some(wallet) = WalletType::for_role(role) {
            let keys = (0..ADDRESS_WINDOW).map(|i| hm.derive_key(wallet, i).expect("fresh device").public).collect();
            self.exported.insert(id.clone(), keys);
        }
        self.hms.insert(id, hm);
    }

    pub fn hm(&self, id: &str) -> Option<&HardwareModule> {
        self.hms.get(id)
    }

    pub fn hm_mut(&mut self, id: &str) -> Option<&mut HardwareModule> {
        self.hms.get_mut(id)
    }

    pub fn hms(&self) -> impl Iterator<Item = &HardwareModule> {
        self.hms.values()
    }

    /// Device ids currently serving `role`, in index order.
    pub fn members(&self, role: WalletRole) -> Vec<String> {
        self.hms.values().filter(|h| h.role == role && !h.hm_id.contains("retired")).map(|h| h.hm_id.clone()).collect()
    }

    pub fn access_log(&self) -> &[Access] {
        &self.access_log
    }

    pub fn log_access(&mut self, hm_id: &str, action: impl Into<String>) {
        self.access_log.push(Access { event: self.clock, hm_id: hm_id.to_string(), action: action.into() });
    }

    pub fn accesses_to(&self, role: WalletRole) -> usize {
        self.access_log.iter().filter(|a| self.hms.get(&a.hm_id).is_some_and(|h| h.role == role)).count()
    }

    /// Multisig address for `role` at `index`, built from exported public keys.
    pub fn wallet_spec(&self, role: WalletRole, index: u32) -> Result<MultisigSpec, FleetError> {
        let wallet = WalletType::for_role(role).ok_or_else(|| FleetError::Policy("vault wallet has no addresses".into()))?;
        let keys = self
            .members(role)
            .iter()
            .map(|id| self.exported_key(id, index).ok_or_else(|| FleetError::NotFound(format!("{id} {}", derivation_path(wallet, index)))))
            .collect::<Result<Vec<_>, _>>()?;
        MultisigSpec::new(self.topology.threshold_of(role), keys)
            .map_err(|e| FleetError::Policy(e.to_string()))
    }

    fn exported_key(&self, id: &str, index: u32) -> Option<PublicKey> {
        self.exported.get(id).and_then(|v| v.get(index as usize)).copied()
    }

    /// Signs one input with the first `threshold` usable devices of `role`.
    #[allow(clippy::too_many_arguments)]
    pub fn sign_multisig(
        &mut self,
        role: WalletRole,
        index: u32,
        tx: &Transaction,
        input: usize,
        mode: SighashMode,
        spent_script: &Script,
        spent_amount: u64,
    ) -> Result<Vec<Vec<u8>>, FleetError> {
        let wallet = WalletType::for_role(role).ok_or_else(|| FleetError::Policy("vault wallet has no key tree".into()))?;
        let threshold = self.topology.threshold_of(role);
        let usable: Vec<String> = self.members(role).into_iter().filter(|id| !self.hms[id].failed).collect();
        if usable.len() < threshold {
            return Err(FleetError::Threshold { threshold, available: usable.len() });
        }
        let mut sigs = Vec::new();
        for id in usable.into_iter().take(threshold) {
            let key = self.hms.get_mut(&id).expect("member").derive_key(wallet, index)?;
            sigs.push(crate::txkit::sign_input(tx, input, &key, mode, spent_script, spent_amount)?);
            self.log_access(&id, format!("sign {}", derivation_path(wallet, index)));
        }
        Ok(sigs)
    }

    /// Signs for an existing `spec` with whichever usable `role` devices hold
    /// one of its keys at `index`. Signatures come back in key order.
    #[allow(clippy::too_many_arguments)]
    pub fn sign_for_spec(
        &mut self,
        role: WalletRole,
        index: u32,
        spec: &MultisigSpec,
        tx: &Transaction,
        input: usize,
        mode: SighashMode,
        spent_script: &Script,
        spent_amount: u64,
    ) -> Result<Vec<Vec<u8>>, FleetError> {
        let wallet = WalletType::for_role(role).ok_or_else(|| FleetError::Policy("vault wallet has no key tree".into()))?;
        let holders: Vec<String> = self
            .members(role)
            .into_iter()
            .filter(|id| !self.hms[id].failed && self.exported_key(id, index).is_some_and(|k| spec.keys.contains(&k)))
            .take(spec.threshold)
            .collect();
        if holders.len() < spec.threshold {
            return Err(FleetError::Threshold { threshold: spec.threshold, available: holders.len() });
        }
        let mut sigs = BTreeMap::new();
        for id in holders {
            let key = self.hms.get_mut(&id).expect("member").derive_key(wallet, index)?;
            sigs.insert(key.public, crate::txkit::sign_input(tx, input, &key, mode, spent_script, spent_amount)?);
            self.log_access(&id, format!("sign {}", derivation_path(wallet, index)));
        }
        spec.arrange(&sigs).ok_or(FleetError::Threshold { threshold: spec.threshold, available: sigs.len() })
    }

    pub fn gen_ephemeral(&mut self, id: &str) -> Result<(String, PublicKey), FleetError> {
        let hm = self.hms.get_mut(id).ok_or_else(|| FleetError::NotFound(id.to_string()))?;
        let (key_id, public) = hm.gen_ephemeral()?;
        if hm.compromised_at.is_some() {
            let leaked = hm.ephemeral[&key_id].key.clone().expect("just generated");
            self.adversary.learn_key(leaked);
        }
        self.log_access(id, "generate ephemeral key");
        Ok((key_id, public))
    }

    pub fn delete_key(&mut self, id: &str, key_id: &str) -> Result<DeletionReceipt, FleetError> {
        let event = self.clock;
        let hm = self.hms.get_mut(id).ok_or_else(|| FleetError::NotFound(id.to_string()))?;
        let receipt = hm.delete_key(key_id, event)?;
        self.log_access(id, format!("delete {key_id}"));
        Ok(receipt)
    }

    /// Marks a device compromised now. The adversary learns its key tree
    /// window, live ephemeral keys and stored addresses; later keys leak as
    /// they are created.
    pub fn compromise(&mut self, id: &str) -> Result<(), FleetError> {
        let now = self.clock;
        let hm = self.hms.get_mut(id).ok_or_else(|| FleetError::NotFound(id.to_string()))?;
        if hm.compromised_at.is_none() {
            hm.compromised_at = Some(now);
        }
        let hm = &self.hms[id];
        let mut leaked: Vec<KeyPair> = hm.live_ephemeral_keys().cloned().collect();
        if let Some(wallet) = WalletType::for_role(hm.role) {
            leaked.extend((0..ADDRESS_WINDOW).map(|i| hm.key_at(&derivation_path(wallet, i))));
        }
        let addresses: Vec<String> = hm.stored_addresses.iter().cloned().collect();
        for key in leaked {
            self.adversary.learn_key(key);
        }
        for a in addresses {
            self.adversary.learn_address(a);
        }
        Ok(())
    }

    pub fn fail(&mut self, id: &str) -> Result<(), FleetError> {
        let hm = self.hms.get_mut(id).ok_or_else(|| FleetError::NotFound(id.to_string()))?;
        hm.failed = true;
        Ok(())
    }

    /// Replaces a failed device with a fresh one in the same role. The old
    /// device is retired. Returns the new device id.
    pub fn replace(&mut self, id: &str) -> Result<String, FleetError> {
        let old = self.hms.remove(id).ok_or_else(|| FleetError::NotFound(id.to_string()))?;
        let role = old.role;
        self.replacements += 1;
        let retired = format!("retired/{}/{}", self.replacements, id);
        let mut old = old;
        old.hm_id = retired.clone();
        self.hms.insert(retired.clone(), old);
        if let Some(keys) = self.exported.remove(id) {
            self.exported.insert(retired, keys);
        }
        // The replacement keeps the slot id but gets a fresh seed.
        let slot = format!("{id}#{}", self.replacements);
        let hm_seed = tagged_hash("vaultlab/hm-seed", &[&self.seed, slot.as_bytes()]).0;
        let mut hm = HardwareModule::new(id.to_string(), role, hm_seed);
        if let Some(wallet) = WalletType::for_role(role) {
            let keys = (0..ADDRESS_WINDOW).map(|i| hm.derive_key(wallet, i).expect("fresh device").public).collect();
            self.exported.insert(id.to_string(), keys);
        }
        self.hms.insert(id.to_string(), hm);
        self.log_access(id, "provision replacement");
        Ok(id.to_string())
    }

    /// Compromised devices that were compromised before they deleted `key_id`.
    pub fn leaked_before_deletion(&self, key_id: &str) -> bool {
        self.adversary.has_key_id(key_id)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("all holders of {0} have failed")]
    Lost(Hash256),
    #[error("no holder stores {0}")]
    Unknown(Hash256),
    #[error("unknown holder {0}")]
    NoHolder(String),
}

#[derive(Clone, Debug, Default)]
pub struct Holder {
    pub failed: bool,
    pub compromised: bool,
    items: BTreeMap<Hash256, Vec<u8>>,
}

impl Holder {
    pub fn items(&self) -> impl Iterator<Item = (&Hash256, &Vec<u8>)> {
        self.items.iter()
    }
}

/// Redundant storage for one class of signed covenant transactions, keyed
/// by the vault txid each one belongs to.
#[derive(Clone, Debug, Default)]
pub struct ActStore {
    pub label: String,
    holders: BTreeMap<String, Holder>,
}

impl ActStore {
    pub fn new(label: impl Into<String>, holders: impl IntoIterator<Item = String>) -> Self {
        ActStore { label: label.into(), holders: holders.into_iter().map(|h| (h, Holder::default())).collect() }
    }

    pub fn holder_ids(&self) -> Vec<String> {
        self.holders.keys().cloned().collect()
    }

    pub fn holder(&self, id: &str) -> Option<&Holder> {
        self.holders.get(id)
    }

    pub fn add_holder(&mut self, id: impl Into<String>) {
        self.holders.entry(id.into()).or_default();
    }

    pub fn store(&mut self, holder: &str, key: Hash256, tx: &Transaction) -> Result<(), StorageError> {
        let h = self.holders.get_mut(holder).ok_or_else(|| StorageError::NoHolder(holder.to_string()))?;
        h.items.insert(key, tx.serialize());
        Ok(())
    }

    pub fn holds(&self, holder: &str, key: &Hash256) -> bool {
        self.holders.get(holder).is_some_and(|h| h.items.contains_key(key))
    }

    /// Number of un-failed holders storing `key`.
    pub fn copies(&self, key: &Hash256) -> usize {
        self.holders.values().filter(|h| !h.failed && h.items.contains_key(key)).count()
    }

    pub fn keys(&self) -> BTreeSet<Hash256> {
        self.holders.values().flat_map(|h| h.items.keys().copied()).collect()
    }

    /// First intact copy from an un-failed holder.
    pub fn fetch(&self, key: &Hash256, expected_txid: Option<&Hash256>) -> Result<Transaction, StorageError> {
        let mut seen = false;
        for h in self.holders.values() {
            let Some(bytes) = h.items.get(key) else { continue };
            seen = true;
            if h.failed {
                continue;
            }
            let Ok(tx) = Transaction::parse(bytes) else { continue };
            if expected_txid.is_none_or(|e| compute_txid(&tx).ok().as_ref() == Some(e)) {
                return Ok(tx);
            }
        }
        if seen {
            Err(StorageError::Lost(*key))
        } else {
            Err(StorageError::Unknown(*key))
        }
    }

    pub fn fail(&mut self, holder: &str) -> Result<(), StorageError> {
        let h = self.holders.get_mut(holder).ok_or_else(|| StorageError::NoHolder(holder.to_string()))?;
        h.failed = true;
        Ok(())
    }

    /// Marks a holder compromised and returns everything it stores.
    pub fn compromise(&mut self, holder: &str) -> Result<Vec<Transaction>, StorageError> {
        let h = self.holders.get_mut(holder).ok_or_else(|| StorageError::NoHolder(holder.to_string()))?;
        h.compromised = true;
        Ok(h.items.values().filter_map(|b| Transaction::parse(b).ok()).collect())
    }

    pub fn is_compromised(&self) -> bool {
        self.holders.values().any(|h| h.compromised)
    }

    /// Flips one bit of a stored copy.
    pub fn corrupt(&mut self, holder: &str, key: &Hash256, bit: usize) -> Result<(), StorageError> {
        let h = self.holders.get_mut(holder).ok_or_else(|| StorageError::NoHolder(holder.to_string()))?;
        let bytes = h.items.get_mut(key).ok_or(StorageError::Unknown(*key))?;
        let bit = bit % (bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        Ok(())
    }

    /// Hash-commitment answer to a possession challenge.
    pub fn commitment(&self, holder: &str, key: &Hash256, nonce: &Hash256) -> Option<Hash256> {
        let h = self.holders.get(holder)?;
        if h.failed {
            return None;
        }
        h.items.get(key).map(|bytes| possession_commitment(nonce, bytes))
    }
}

pub fn possession_commitment(nonce: &Hash256, bytes: &[u8]) -> Hash256 {
    tagged_hash("vaultlab/possession", &[&nonce.0, bytes])
}

/// Compromise flags of the two channels between an HM and its operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelState {
    pub in_band_compromised: bool,
    pub oob_compromised: bool,
}

impl ChannelState {
    pub fn both_compromised(&self) -> bool {
        self.in_band_compromised && self.oob_compromised
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckResult {
    Pass,
    Fail,
}

/// The operator compares what the HM shows with what was intended. An
/// attacker holding both channels can make a tampered payload look right.
pub fn human_check(channels: &ChannelState, intended: &[u8], presented: &[u8]) -> CheckResult {
    if intended == presented || channels.both_compromised() {
        CheckResult::Pass
    } else {
        CheckResult::Fail
    }
}
