//! Single-process chain and mempool.
//!
//! Blocks are produced only when [`ChainState::mine_block`] is called. The
//! mempool accepts unconfirmed dependency chains, resolves conflicts by
//! priority (feerate, plus the miner bribe for private transactions), and
//! breaks exact ties by the lexicographically smaller txid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::script::{eval_script, ExecContext, Script, ScriptError};
use crate::txkit::{compute_txid, Hash256, OutPoint, Transaction, TxInput, TxOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    /// Relayed; watchtowers see it in the mempool.
    Public,
    /// Handed directly to a miner; only observable once mined.
    MinerPrivate,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("duplicate")]
    Duplicate,
    #[error("missing-input {0}")]
    MissingInput(OutPoint),
    #[error("csv-premature on input {0}")]
    CsvPremature(usize),
    #[error("script failure on input {input}: {error}")]
    Script { input: usize, error: ScriptError },
    #[error("negative fee")]
    NegativeFee,
    #[error("conflict with {0}")]
    Conflict(Hash256),
}

impl Rejection {
    pub fn reason(&self) -> &'static str {
        match self {
            Rejection::Malformed(_) => "malformed",
            Rejection::Duplicate => "duplicate",
            Rejection::MissingInput(_) => "missing-input",
            Rejection::CsvPremature(_) => "csv-premature",
            Rejection::Script { .. } => "script",
            Rejection::NegativeFee => "negative-fee",
            Rejection::Conflict(_) => "conflict",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("unknown txid {0}")]
pub struct NotFound(pub Hash256);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utxo {
    pub amount: u64,
    pub script: Script,
    pub created_height: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MempoolEntry {
    pub tx: Transaction,
    pub txid: Hash256,
    pub fee: u64,
    pub feerate: u64,
    pub visibility: Visibility,
    pub priority: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfirmedTx {
    pub tx: Transaction,
    pub height: u64,
    pub fee: u64,
    /// Funding transactions bypass validation and never spend real outputs.
    pub funding: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub txids: Vec<Hash256>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Deposit,
    Mempool,
    Replaced,
    Mined,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Deposit => "deposit",
            EventKind::Mempool => "mempool",
            EventKind::Replaced => "replaced",
            EventKind::Mined => "mined",
        })
    }
}

/// One line of the chain event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEvent {
    pub height: u64,
    pub kind: EventKind,
    pub txid: Hash256,
}

impl fmt::Display for ChainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.height, self.kind, self.txid)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ChainState {
    height: u64,
    blocks: Vec<Block>,
    utxos: BTreeMap<OutPoint, Utxo>,
    confirmed: BTreeMap<Hash256, ConfirmedTx>,
    confirmed_spends: BTreeMap<OutPoint, Hash256>,
    mempool: BTreeMap<Hash256, MempoolEntry>,
    mempool_spends: BTreeMap<OutPoint, Hash256>,
    events: Vec<ChainEvent>,
    total_deposited: u64,
    fees_collected: u64,
    funding_counter: u32,
    bribe_bonus: u64,
}

impl ChainState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_bribe_bonus(bribe_bonus: u64) -> Self {
        ChainState { bribe_bonus, ..Self::default() }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn bribe_bonus(&self) -> u64 {
        self.bribe_bonus
    }

    pub fn set_bribe_bonus(&mut self, bonus: u64) {
        self.bribe_bonus = bonus;
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn events(&self) -> &[ChainEvent] {
        &self.events
    }

    pub fn utxos(&self) -> &BTreeMap<OutPoint, Utxo> {
        &self.utxos
    }

    pub fn utxo(&self, outpoint: &OutPoint) -> Option<&Utxo> {
        self.utxos.get(outpoint)
    }

    pub fn total_deposited(&self) -> u64 {
        self.total_deposited
    }

    pub fn fees_collected(&self) -> u64 {
        self.fees_collected
    }

    pub fn mempool(&self) -> impl Iterator<Item = &MempoolEntry> {
        self.mempool.values()
    }

    pub fn in_mempool(&self, txid: &Hash256) -> bool {
        self.mempool.contains_key(txid)
    }

    pub fn is_confirmed(&self, txid: &Hash256) -> bool {
        self.confirmed.contains_key(txid)
    }

    pub fn confirmed_tx(&self, txid: &Hash256) -> Option<&ConfirmedTx> {
        self.confirmed.get(txid)
    }

    pub fn confirmed_txs(&self) -> impl Iterator<Item = (&Hash256, &ConfirmedTx)> {
        self.confirmed.iter()
    }

    /// A transaction as an outside observer can see it: mined, or relayed.
    pub fn observed_tx(&self, txid: &Hash256) -> Option<&Transaction> {
        if let Some(c) = self.confirmed.get(txid) {
            return Some(&c.tx);
        }
        self.mempool.get(txid).filter(|e| e.visibility == Visibility::Public).map(|e| &e.tx)
    }

    /// Relayed mempool entries only.
    pub fn public_mempool(&self) -> impl Iterator<Item = &MempoolEntry> {
        self.mempool.values().filter(|e| e.visibility == Visibility::Public)
    }

    /// Txid spending `outpoint` on chain or in the mempool.
    pub fn spender_of(&self, outpoint: &OutPoint) -> Option<Hash256> {
        self.confirmed_spends.get(outpoint).or_else(|| self.mempool_spends.get(outpoint)).copied()
    }

    pub fn confirmed_spender_of(&self, outpoint: &OutPoint) -> Option<Hash256> {
        self.confirmed_spends.get(outpoint).copied()
    }

    /// `height - mined_height + 1` for mined transactions, 0 for mempool.
    pub fn confirmations(&self, txid: &Hash256) -> Result<u32, NotFound> {
        if let Some(c) = self.confirmed.get(txid) {
            return Ok((self.height - c.height + 1) as u32);
        }
        if self.mempool.contains_key(txid) {
            return Ok(0);
        }
        Err(NotFound(*txid))
    }

    /// Credits `amount` to `script` out of thin air, confirmed at the current
    /// height. All value in the simulation enters through here.
    pub fn fund(&mut self, script: Script, amount: u64) -> OutPoint {
        let mut tx = Transaction::new(1, 0);
        tx.inputs.push(TxInput { outpoint: OutPoint::new(Hash256::ZERO, self.funding_counter), sequence: 0 });
        tx.outputs.push(TxOutput { amount, script: script.clone() });
        self.funding_counter += 1;
        let txid = compute_txid(&tx).expect("funding tx is well formed");
        let outpoint = OutPoint::new(txid, 0);
        self.utxos.insert(outpoint, Utxo { amount, script, created_height: self.height });
        self.confirmed.insert(txid, ConfirmedTx { tx, height: self.height, fee: 0, funding: true });
        self.total_deposited += amount;
        self.events.push(ChainEvent { height: self.height, kind: EventKind::Deposit, txid });
        outpoint
    }

    /// Output `outpoint` as currently spendable: from the UTXO set, or from an
    /// unconfirmed mempool parent (0 confirmations).
    fn resolve(&self, outpoint: &OutPoint) -> Option<(TxOutput, u32)> {
        if let Some(u) = self.utxos.get(outpoint) {
            let conf = (self.height - u.created_height + 1) as u32;
            return Some((TxOutput { amount: u.amount, script: u.script.clone() }, conf));
        }
        let parent = self.mempool.get(&outpoint.txid)?;
        let out = parent.tx.outputs.get(outpoint.vout as usize)?;
        Some((out.clone(), 0))
    }

    /// Validates `tx` against the current chain + mempool without changing state.
    /// Returns `(txid, fee, conflicting mempool txids)`.
    pub fn check(&self, tx: &Transaction) -> Result<(Hash256, u64, BTreeSet<Hash256>), Rejection> {
        let txid = compute_txid(tx).map_err(|e| Rejection::Malformed(e.to_string()))?;
        if self.confirmed.contains_key(&txid) || self.mempool.contains_key(&txid) {
            return Err(Rejection::Duplicate);
        }
        let mut seen = BTreeSet::new();
        let mut input_total: u64 = 0;
        let mut conflicts = BTreeSet::new();
        for (i, input) in tx.inputs.iter().enumerate() {
            if !seen.insert(input.outpoint) {
                return Err(Rejection::Malformed("duplicate input".into()));
            }
            let (prev, conf) = self.resolve(&input.outpoint).ok_or(Rejection::MissingInput(input.outpoint))?;
            let ctx = ExecContext::new(tx, i, conf, prev.amount);
            match eval_script(&prev.script, &ctx) {
                Ok(()) => {}
                Err(ScriptError::Csv { .. }) => return Err(Rejection::CsvPremature(i)),
                Err(error) => return Err(Rejection::Script { input: i, error }),
            }
            input_total += prev.amount;
            if let Some(spender) = self.mempool_spends.get(&input.outpoint) {
                conflicts.insert(*spender);
            }
        }
        let fee = input_total.checked_sub(tx.output_total()).ok_or(Rejection::NegativeFee)?;
        Ok((txid, fee, conflicts))
    }

    pub fn priority_of(&self, fee: u64, vsize: u64, visibility: Visibility) -> (u64, u64) {
        let feerate = fee / vsize.max(1);
        let bonus = if visibility == Visibility::MinerPrivate { self.bribe_bonus } else { 0 };
        (feerate, feerate + bonus)
    }

    pub fn submit(&mut self, tx: Transaction, visibility: Visibility) -> Result<Hash256, Rejection> {
        let (txid, fee, conflicts) = self.check(&tx)?;
        let (feerate, priority) = self.priority_of(fee, tx.vsize(), visibility);
        let mut doomed = BTreeSet::new();
        for c in &conflicts {
            let other = &self.mempool[c];
            // Higher priority wins; equal priority goes to the smaller txid.
            let wins = priority > other.priority || (priority == other.priority && txid < other.txid);
            if !wins {
                return Err(Rejection::Conflict(*c));
            }
            self.collect_descendants(*c, &mut doomed);
        }
        if tx.inputs.iter().any(|i| doomed.contains(&i.outpoint.txid)) {
            return Err(Rejection::Conflict(*conflicts.iter().next().expect("non-empty")));
        }
        for d in &doomed {
            self.remove_from_mempool(d);
            self.events.push(ChainEvent { height: self.height, kind: EventKind::Replaced, txid: *d });
        }
        for input in &tx.inputs {
            self.mempool_spends.insert(input.outpoint, txid);
        }
        if visibility == Visibility::Public {
            self.events.push(ChainEvent { height: self.height, kind: EventKind::Mempool, txid });
        }
        self.mempool.insert(txid, MempoolEntry { tx, txid, fee, feerate, visibility, priority });
        Ok(txid)
    }

    fn collect_descendants(&self, root: Hash256, out: &mut BTreeSet<Hash256>) {
        if !out.insert(root) {
            return;
        }
        let entry = &self.mempool[&root];
        for vout in 0..entry.tx.outputs.len() as u32 {
            if let Some(child) = self.mempool_spends.get(&OutPoint::new(root, vout)) {
                self.collect_descendants(*child, out);
            }
        }
    }

    fn remove_from_mempool(&mut self, txid: &Hash256) -> Option<MempoolEntry> {
        let entry = self.mempool.remove(txid)?;
        for input in &entry.tx.inputs {
            if self.mempool_spends.get(&input.outpoint) == Some(txid) {
                self.mempool_spends.remove(&input.outpoint);
            }
        }
        Some(entry)
    }

    /// Mines every mempool transaction, highest priority first, parents before
    /// children. Returns the txids in block order.
    pub fn mine_block(&mut self) -> Vec<Hash256> {
        self.height += 1;
        let mut order: Vec<(u64, Hash256)> = self.mempool.values().map(|e| (e.priority, e.txid)).collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut included: Vec<Hash256> = Vec::with_capacity(order.len());
        let mut done = BTreeSet::new();
        while done.len() < order.len() {
            let before = done.len();
            for (_, txid) in &order {
                if done.contains(txid) {
                    continue;
                }
                let entry = &self.mempool[txid];
                let ready = entry
                    .tx
                    .inputs
                    .iter()
                    .all(|i| !self.mempool.contains_key(&i.outpoint.txid) || done.contains(&i.outpoint.txid));
                if ready {
                    done.insert(*txid);
                    included.push(*txid);
                    // Restart so a newly unblocked high-priority child is not
                    // overtaken by lower-priority siblings.
                    break;
                }
            }
            assert!(done.len() > before, "mempool contains a dependency cycle");
        }
        for txid in &included {
            let entry = self.remove_from_mempool(txid).expect("selected from mempool");
            for input in &entry.tx.inputs {
                self.utxos.remove(&input.outpoint).expect("validated input");
                self.confirmed_spends.insert(input.outpoint, *txid);
            }
            for (vout, out) in entry.tx.outputs.iter().enumerate() {
                self.utxos.insert(
                    OutPoint::new(*txid, vout as u32),
                    Utxo { amount: out.amount, script: out.script.clone(), created_height: self.height },
                );
            }
            self.fees_collected += entry.fee;
            self.confirmed.insert(*txid, ConfirmedTx { tx: entry.tx, height: self.height, fee: entry.fee, funding: false });
            self.events.push(ChainEvent { height: self.height, kind: EventKind::Mined, txid: *txid });
        }
        self.blocks.push(Block { height: self.height, txids: included.clone() });
        included
    }

    /// Sum of UTXOs plus collected fees equals everything ever funded.
    pub fn check_conservation(&self) -> bool {
        let held: u64 = self.utxos.values().map(|u| u.amount).sum();
        held + self.fees_collected == self.total_deposited
    }

    /// Re-validates every mined input at the confirmation depth it had when
    /// its block was assembled. Returns the offending `(txid, input)` pairs.
    pub fn audit_timelocks(&self) -> Vec<(Hash256, usize)> {
        let mut bad = Vec::new();
        for (txid, c) in &self.confirmed {
            if c.funding {
                continue;
            }
            for (i, input) in c.tx.inputs.iter().enumerate() {
                let Some(parent) = self.confirmed.get(&input.outpoint.txid) else {
                    bad.push((*txid, i));
                    continue;
                };
                let out = &parent.tx.outputs[input.outpoint.vout as usize];
                // Submitted at height c.height - 1 at the latest; a parent
                // mined in the same block had 0 confirmations.
                let conf = (c.height - parent.height) as u32;
                if eval_script(&out.script, &ExecContext::new(&c.tx, i, conf, out.amount)).is_err() {
                    bad.push((*txid, i));
                }
            }
        }
        bad
    }

    /// Event log, one line per event.
    pub fn event_log(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::Op;

    fn anyone() -> Script {
        Script::new(vec![Op::Num(1)])
    }

    fn spend(outpoint: OutPoint, amount: u64, tag: i64) -> Transaction {
        let mut tx = Transaction::new(2, 0);
        tx.inputs.push(TxInput { outpoint, sequence: 0 });
        tx.outputs.push(TxOutput { amount, script: Script::new(vec![Op::Num(tag), Op::Drop, Op::Num(1)]) });
        tx
    }

    #[test]
    fn empty_block_advances_height() {
        let mut chain = ChainState::new();
        assert!(chain.mine_block().is_empty());
        assert_eq!(chain.height(), 1);
        assert_eq!(chain.blocks().len(), 1);
    }

    #[test]
    fn confirmations_count_from_one() {
        let mut chain = ChainState::new();
        let op = chain.fund(anyone(), 1000);
        let txid = chain.submit(spend(op, 900, 20), Visibility::Public).unwrap();
        assert_eq!(chain.confirmations(&txid), Ok(0));
        chain.mine_block();
        assert_eq!(chain.confirmations(&txid), Ok(1));
        for _ in 0..5 {
            chain.mine_block();
        }
        assert_eq!(chain.confirmations(&txid), Ok(6));
        assert_eq!(chain.confirmations(&Hash256([9; 32])), Err(NotFound(Hash256([9; 32]))));
    }

    #[test]
    fn missing_input_and_negative_fee() {
        let mut chain = ChainState::new();
        let op = chain.fund(anyone(), 1000);
        let bogus = OutPoint::new(Hash256([5; 32]), 0);
        assert_eq!(chain.submit(spend(bogus, 1, 20), Visibility::Public).unwrap_err().reason(), "missing-input");
        assert_eq!(chain.submit(spend(op, 1001, 20), Visibility::Public).unwrap_err().reason(), "negative-fee");
    }

    #[test]
    fn unconfirmed_chains_are_accepted_and_mined_together() {
        let mut chain = ChainState::new();
        let op = chain.fund(anyone(), 10_000);
        let parent = chain.submit(spend(op, 9_000, 20), Visibility::Public).unwrap();
        let child = chain.submit(spend(OutPoint::new(parent, 0), 1_000, 21), Visibility::Public).unwrap();
        let block = chain.mine_block();
        assert_eq!(block, vec![parent, child]);
        assert!(chain.check_conservation());
    }

    #[test]
    fn higher_priority_replaces_regardless_of_order() {
        for order in [[0usize, 1], [1, 0]] {
            let mut chain = ChainState::new();
            let op = chain.fund(anyone(), 100_000);
            let vsize = spend(op, 0, 30).vsize();
            let low = spend(op, 100_000 - 2 * vsize, 30);
            let high = spend(op, 100_000 - 5 * vsize, 31);
            let txs = [low, high.clone()];
            for i in order {
                let _ = chain.submit(txs[i].clone(), Visibility::Public);
            }
            let ids: Vec<_> = chain.mempool().map(|e| e.txid).collect();
            assert_eq!(ids, vec![high.txid().unwrap()]);
        }
    }

    #[test]
    fn private_bribe_beats_public_feerate() {
        let mut chain = ChainState::with_bribe_bonus(5);
        let op = chain.fund(anyone(), 100_000);
        let owner = spend(op, 100_000 - 3 * spend(op, 0, 40).vsize(), 40);
        let attacker = spend(op, 100_000, 41);
        chain.submit(owner, Visibility::Public).unwrap();
        let theft = chain.submit(attacker, Visibility::MinerPrivate).unwrap();
        assert!(chain.public_mempool().next().is_none());
        assert_eq!(chain.mine_block(), vec![theft]);
    }
}
