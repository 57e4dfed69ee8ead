//! Watchtower nodes in notification and responder variants.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainEvent, ChainState, EventKind};
use crate::txkit::{compute_txid, tagged_hash, Hash256, OutPoint, Transaction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Notification,
    #[default]
    Responder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertKind {
    /// A watched vault transaction appeared.
    Unvault,
    /// A watched deposit output was spent by something other than its vault transaction.
    DepositSpend,
    /// Un-vaulted volume within the window exceeds the cap.
    RateExceeded,
    /// A responder lacks the P2RW for a registered vault.
    MissingP2rw,
}

impl AlertKind {
    pub fn label(self) -> &'static str {
        match self {
            AlertKind::Unvault => "unvault",
            AlertKind::DepositSpend => "deposit-spend",
            AlertKind::RateExceeded => "rate-exceeded",
            AlertKind::MissingP2rw => "missing-p2rw",
        }
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub height: u64,
    pub node_id: String,
    pub kind: AlertKind,
    pub txid: Hash256,
}

impl fmt::Display for Alert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.height, self.node_id, self.kind, self.txid)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Alert(Alert),
    /// Broadcast the stored P2RW for this vault txid.
    BroadcastP2rw(Hash256),
    /// Broadcast the stored re-vault transaction for this vault txid.
    BroadcastRevault(Hash256),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WatchError {
    #[error("message failed authentication")]
    Unauthenticated,
    #[error("node {0} is down")]
    Down(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Consistency {
    Ok,
    Mismatch(Vec<String>),
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub channel_id: String,
    pub compromised: bool,
}

/// Owner-to-node message authenticated with the key shared at set-up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthMessage {
    pub payload: Vec<u8>,
    pub tag: Hash256,
}

impl AuthMessage {
    pub fn new(key: &[u8; 32], payload: Vec<u8>) -> Self {
        let tag = auth_tag(key, &payload);
        AuthMessage { payload, tag }
    }
}

fn auth_tag(key: &[u8; 32], payload: &[u8]) -> Hash256 {
    tagged_hash("vaultlab/channel-auth", &[key, payload])
}

/// Registration payload: vault txid, deposit outpoint, vault amount.
pub fn registration_payload(vault_txid: &Hash256, deposit: &OutPoint, amount: u64) -> Vec<u8> {
    let mut p = b"watch".to_vec();
    p.extend_from_slice(&vault_txid.0);
    p.extend_from_slice(&deposit.txid.0);
    p.extend_from_slice(&deposit.vout.to_le_bytes());
    p.extend_from_slice(&amount.to_le_bytes());
    p
}

pub fn authorization_payload(vault_txid: &Hash256) -> Vec<u8> {
    let mut p = b"unvault".to_vec();
    p.extend_from_slice(&vault_txid.0);
    p
}

#[derive(Clone, Debug)]
pub struct WatchtowerNode {
    pub node_id: String,
    pub variant: Variant,
    auth_key: [u8; 32],
    pub watched_txids: BTreeMap<Hash256, u64>,
    pub watched_outpoints: BTreeMap<OutPoint, Hash256>,
    pub stored_p2rw: BTreeMap<Hash256, Transaction>,
    pub stored_revault: BTreeMap<Hash256, Transaction>,
    pub channels: Vec<Channel>,
    pub alive: bool,
    pub compromised: bool,
    pub authorized_unvaults: BTreeSet<Hash256>,
    /// Volume cap over `rate_window` blocks.
    pub rate_cap: u64,
    pub rate_window: u64,
    recent_unvaults: VecDeque<(u64, u64)>,
    handled: BTreeSet<(AlertKind, Hash256)>,
    /// Every txid this node has seen; tracks what it could leak.
    pub seen: BTreeSet<Hash256>,
    pub broadcasts: Vec<Hash256>,
}

impl WatchtowerNode {
    pub fn new(node_id: impl Into<String>, variant: Variant, auth_key: [u8; 32]) -> Self {
        let node_id = node_id.into();
        let channels = ["in-band", "oob"]
            .iter()
            .map(|c| Channel { channel_id: format!("{node_id}/{c}"), compromised: false })
            .collect();
        WatchtowerNode {
            node_id,
            variant,
            auth_key,
            watched_txids: BTreeMap::new(),
            watched_outpoints: BTreeMap::new(),
            stored_p2rw: BTreeMap::new(),
            stored_revault: BTreeMap::new(),
            channels,
            alive: true,
            compromised: false,
            authorized_unvaults: BTreeSet::new(),
            rate_cap: u64::MAX,
            rate_window: 1,
            recent_unvaults: VecDeque::new(),
            handled: BTreeSet::new(),
            seen: BTreeSet::new(),
            broadcasts: Vec::new(),
        }
    }

    fn authenticate(&self, msg: &AuthMessage) -> Result<(), WatchError> {
        if !self.alive {
            return Err(WatchError::Down(self.node_id.clone()));
        }
        if auth_tag(&self.auth_key, &msg.payload) != msg.tag {
            return Err(WatchError::Unauthenticated);
        }
        Ok(())
    }

    /// True when at least one channel to the owner is intact.
    pub fn reachable(&self) -> bool {
        self.alive && self.channels.iter().any(|c| !c.compromised)
    }

    /// Registers a vault. Returns warnings (a responder without its P2RW).
    #[allow(clippy::too_many_arguments)]
    pub fn register_watch(
        &mut self,
        msg: &AuthMessage,
        vault_txid: Hash256,
        deposit: OutPoint,
        amount: u64,
        p2rw: Option<Transaction>,
        revault: Option<Transaction>,
        height: u64,
    ) -> Result<Vec<Alert>, WatchError> {
        self.authenticate(msg)?;
        if msg.payload != registration_payload(&vault_txid, &deposit, amount) {
            return Err(WatchError::Unauthenticated);
        }
        self.watched_txids.insert(vault_txid, amount);
        self.watched_outpoints.insert(deposit, vault_txid);
        self.seen.insert(vault_txid);
        let mut warnings = Vec::new();
        if self.variant == Variant::Responder {
            match p2rw {
                Some(tx) => {
                    if let Ok(id) = compute_txid(&tx) {
                        self.seen.insert(id);
                    }
                    self.stored_p2rw.insert(vault_txid, tx);
                }
                None => warnings.push(Alert {
                    height,
                    node_id: self.node_id.clone(),
                    kind: AlertKind::MissingP2rw,
                    txid: vault_txid,
                }),
            }
            if let Some(tx) = revault {
                self.stored_revault.insert(vault_txid, tx);
            }
        }
        Ok(warnings)
    }

    pub fn authorize_unvault(&mut self, msg: &AuthMessage, vault_txid: Hash256) -> Result<(), WatchError> {
        self.authenticate(msg)?;
        if msg.payload != authorization_payload(&vault_txid) {
            return Err(WatchError::Unauthenticated);
        }
        self.authorized_unvaults.insert(vault_txid);
        Ok(())
    }

    fn alert(&mut self, height: u64, kind: AlertKind, txid: Hash256) -> Option<Action> {
        self.handled.insert((kind, txid)).then(|| {
            Action::Alert(Alert { height, node_id: self.node_id.clone(), kind, txid })
        })
    }

    /// Reacts to one chain event. Only transactions the chain actually
    /// accepted are considered, so a fabricated un-vault cannot trigger a
    /// response.
    pub fn observe(&mut self, event: &ChainEvent, chain: &ChainState) -> Vec<Action> {
        let mut actions = Vec::new();
        if !self.alive || !matches!(event.kind, EventKind::Mempool | EventKind::Mined) {
            return actions;
        }
        let Some(tx) = chain.observed_tx(&event.txid) else {
            return actions;
        };
        let txid = event.txid;
        if let Some(&amount) = self.watched_txids.get(&txid) {
            self.seen.insert(txid);
            if self.handled.contains(&(AlertKind::Unvault, txid)) {
                return actions;
            }
            actions.extend(self.alert(event.height, AlertKind::Unvault, txid));
            while self.recent_unvaults.front().is_some_and(|(h, _)| h + self.rate_window <= event.height) {
                self.recent_unvaults.pop_front();
            }
            self.recent_unvaults.push_back((event.height, amount));
            let volume: u64 = self.recent_unvaults.iter().map(|(_, a)| a).sum();
            if volume > self.rate_cap {
                let once = self.handled.insert((AlertKind::RateExceeded, txid));
                if once {
                    actions.push(Action::Alert(Alert {
                        height: event.height,
                        node_id: self.node_id.clone(),
                        kind: AlertKind::RateExceeded,
                        txid,
                    }));
                }
            }
            if self.variant == Variant::Responder && !self.authorized_unvaults.contains(&txid) {
                if self.stored_revault.contains_key(&txid) {
                    actions.push(Action::BroadcastRevault(txid));
                } else if self.stored_p2rw.contains_key(&txid) {
                    actions.push(Action::BroadcastP2rw(txid));
                }
            }
            return actions;
        }
        let spends_deposit = tx.inputs.iter().any(|i| self.watched_outpoints.contains_key(&i.outpoint));
        if spends_deposit {
            self.seen.insert(txid);
            actions.extend(self.alert(event.height, AlertKind::DepositSpend, txid));
        }
        actions
    }

    pub fn consistency_check(&self, expected_txids: &BTreeSet<Hash256>, expected_p2rw: &BTreeSet<Hash256>) -> Consistency {
        if !self.reachable() {
            return Consistency::Unreachable;
        }
        let mut details = Vec::new();
        let watched: BTreeSet<Hash256> = self.watched_txids.keys().copied().collect();
        for missing in expected_txids.difference(&watched) {
            details.push(format!("not watching {missing}"));
        }
        for extra in watched.difference(expected_txids) {
            details.push(format!("unexpected watch {extra}"));
        }
        if self.variant == Variant::Responder {
            let held: BTreeSet<Hash256> =
                self.stored_p2rw.values().filter_map(|t| compute_txid(t).ok()).collect();
            for missing in expected_p2rw.difference(&held) {
                details.push(format!("missing p2rw {missing}"));
            }
        }
        if details.is_empty() {
            Consistency::Ok
        } else {
            Consistency::Mismatch(details)
        }
    }

    /// Drops a stored P2RW (fault injection).
    pub fn forget_p2rw(&mut self, vault_txid: &Hash256) -> Option<Transaction> {
        self.stored_p2rw.remove(vault_txid)
    }
}
