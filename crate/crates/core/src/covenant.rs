//! Builders for deposit, vault, push-to-recovery-wallet (P2RW) and re-vault
//! transactions, for both the deleted-key mechanism and template-hash (CTV)
//! covenants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::script::{ctv_hash, Op, Script};
use crate::txkit::{
    compute_txid, sign_input, tagged_hash, Hash256, KeyPair, OutPoint, PublicKey, SighashMode, Transaction, TxError,
    TxInput, TxOutput, PAST_LOCKTIME, TX_VERSION,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CovenantError {
    #[error("deposit of {available} cannot fund {needed}")]
    Underfunded { needed: u64, available: u64 },
    #[error("invalid threshold {threshold}-of-{count}")]
    Threshold { threshold: usize, count: usize },
    #[error("layer error: {0}")]
    Layer(String),
    #[error(transparent)]
    Tx(#[from] TxError),
}

/// A `threshold`-of-`keys.len()` bare multisig.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultisigSpec {
    pub threshold: usize,
    pub keys: Vec<PublicKey>,
}

impl MultisigSpec {
    pub fn new(threshold: usize, keys: Vec<PublicKey>) -> Result<Self, CovenantError> {
        if threshold == 0 || threshold > keys.len() {
            return Err(CovenantError::Threshold { threshold, count: keys.len() });
        }
        Ok(MultisigSpec { threshold, keys })
    }

    fn push_ops(&self, ops: &mut Vec<Op>) {
        ops.push(Op::Num(self.threshold as i64));
        ops.extend(self.keys.iter().map(|k| Op::Push(k.0.to_vec())));
        ops.push(Op::Num(self.keys.len() as i64));
        ops.push(Op::CheckMultisig);
    }

    /// `m <pk1> ... <pkn> n OP_CHECKMULTISIG`
    pub fn script(&self) -> Script {
        let mut ops = Vec::new();
        self.push_ops(&mut ops);
        Script::new(ops)
    }

    /// Orders signatures by key position and keeps the first `threshold`.
    /// Returns `None` when fewer than `threshold` keys signed.
    pub fn arrange(&self, sigs: &BTreeMap<PublicKey, Vec<u8>>) -> Option<Vec<Vec<u8>>> {
        let ordered: Vec<Vec<u8>> =
            self.keys.iter().filter_map(|k| sigs.get(k).cloned()).take(self.threshold).collect();
        (ordered.len() == self.threshold).then_some(ordered)
    }
}

/// Two-path vault locking script:
///
/// ```text
/// OP_IF T OP_CHECKSEQUENCEVERIFY OP_DROP j <active..k> k OP_CHECKMULTISIG
/// OP_ELSE p <recovery path..t> t OP_CHECKMULTISIG OP_ENDIF
/// ```
pub fn vault_script(timelock: u32, active: &MultisigSpec, recovery_path: &MultisigSpec) -> Script {
    let mut ops = vec![Op::If];
    push_timelocked(&mut ops, timelock, active);
    ops.push(Op::Else);
    recovery_path.push_ops(&mut ops);
    ops.push(Op::EndIf);
    Script::new(ops)
}

/// Three-path first-layer vault: timelocked active spend, P2RW, or re-vault
/// into the next layer. Both covenant paths use the vault-wallet keys.
pub fn layered_vault_script(timelock: u32, active: &MultisigSpec, covenant_keys: &MultisigSpec) -> Script {
    let mut ops = vec![Op::If];
    push_timelocked(&mut ops, timelock, active);
    ops.push(Op::Else);
    ops.push(Op::If);
    covenant_keys.push_ops(&mut ops);
    ops.push(Op::Else);
    covenant_keys.push_ops(&mut ops);
    ops.push(Op::EndIf);
    ops.push(Op::EndIf);
    Script::new(ops)
}

fn push_timelocked(ops: &mut Vec<Op>, timelock: u32, active: &MultisigSpec) {
    ops.push(Op::Num(timelock as i64));
    ops.push(Op::CheckSequenceVerify);
    ops.push(Op::Drop);
    active.push_ops(ops);
}

/// `OP_IF <Hash(x)> OP_ELSE <Hash(x')> OP_ENDIF OP_CTV`
pub fn ctv_commit_script(plain: &Hash256, with_fee: &Hash256) -> Script {
    Script::new(ctv_commit_ops(plain, with_fee))
}

fn ctv_commit_ops(plain: &Hash256, with_fee: &Hash256) -> Vec<Op> {
    vec![
        Op::If,
        Op::Push(plain.0.to_vec()),
        Op::Else,
        Op::Push(with_fee.0.to_vec()),
        Op::EndIf,
        Op::CheckTemplateVerify,
    ]
}

/// Vault output under template covenants: timelocked active spend, or an
/// immediate spend matching the planned P2RW (with or without fee input).
pub fn ctv_vault_script(timelock: u32, active: &MultisigSpec, p2rw: &Hash256, p2rw_fee: &Hash256) -> Script {
    let mut ops = vec![Op::If];
    push_timelocked(&mut ops, timelock, active);
    ops.push(Op::Else);
    ops.extend(ctv_commit_ops(p2rw, p2rw_fee));
    ops.push(Op::EndIf);
    Script::new(ops)
}

/// Recognizes a bare `m <keys> n OP_CHECKMULTISIG` script.
pub fn parse_multisig(script: &Script) -> Option<MultisigSpec> {
    parse_multisig_ops(&script.ops)
}

fn parse_multisig_ops(ops: &[Op]) -> Option<MultisigSpec> {
    let (Op::Num(m), rest) = ops.split_first()? else { return None };
    let (Op::CheckMultisig, rest) = rest.split_last()? else { return None };
    let (Op::Num(n), keys) = rest.split_last()? else { return None };
    if *n as usize != keys.len() {
        return None;
    }
    let keys = keys
        .iter()
        .map(|op| match op {
            Op::Push(b) if b.len() == 32 => Some(PublicKey(b.as_slice().try_into().ok()?)),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    MultisigSpec::new(usize::try_from(*m).ok()?, keys).ok()
}

/// Branches of a vault output script as seen by an outside observer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaultBranches {
    pub timelock: u32,
    pub active: MultisigSpec,
    /// Key-based covenant path; `None` for template-hash vaults.
    pub covenant: Option<MultisigSpec>,
    pub layered: bool,
}

/// Recognizes two-path, three-path and template-hash vault scripts.
pub fn parse_vault_script(script: &Script) -> Option<VaultBranches> {
    let ops = &script.ops;
    if ops.len() < 7 || ops[0] != Op::If || ops[2] != Op::CheckSequenceVerify || ops[3] != Op::Drop {
        return None;
    }
    let Op::Num(t) = ops[1] else { return None };
    let else_at = ops.iter().position(|o| *o == Op::Else)?;
    let active = parse_multisig_ops(&ops[4..else_at])?;
    let tail = &ops[else_at + 1..];
    let timelock = u32::try_from(t).ok()?;
    if tail.last() != Some(&Op::EndIf) {
        return None;
    }
    let body = &tail[..tail.len() - 1];
    if let Some(covenant) = parse_multisig_ops(body) {
        return Some(VaultBranches { timelock, active, covenant: Some(covenant), layered: false });
    }
    if body.first() == Some(&Op::If) && body.last() == Some(&Op::EndIf) {
        let inner = &body[1..body.len() - 1];
        let mid = inner.iter().position(|o| *o == Op::Else)?;
        let a = parse_multisig_ops(&inner[..mid])?;
        let b = parse_multisig_ops(&inner[mid + 1..])?;
        return (a == b).then_some(VaultBranches { timelock, active, covenant: Some(a), layered: true });
    }
    if body.last() == Some(&Op::CheckTemplateVerify) {
        return Some(VaultBranches { timelock, active, covenant: None, layered: false });
    }
    None
}

/// Which branch of a vault output a spend takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpendPath {
    /// Timelocked active-wallet branch.
    Active,
    /// Immediate push to the recovery wallet.
    Recovery,
    /// Immediate push into the next vault layer (first layer only).
    Revault,
}

/// Witness stack for spending a vault output along `path`. `layered` selects
/// the three-path selector encoding.
pub fn path_witness(mut sigs: Vec<Vec<u8>>, path: SpendPath, layered: bool) -> Vec<Vec<u8>> {
    let t = vec![1u8];
    let f = Vec::new();
    match (path, layered) {
        (SpendPath::Active, _) => sigs.push(t),
        (SpendPath::Recovery, false) => sigs.push(f),
        (SpendPath::Recovery, true) => sigs.extend([t, f]),
        (SpendPath::Revault, _) => sigs.extend([f.clone(), f]),
    }
    sigs
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultTemplate {
    pub timelock: u32,
    pub active: MultisigSpec,
    /// Transitional p-of-t address of ephemeral vault-wallet keys.
    pub recovery_path: MultisigSpec,
    pub deposit_outpoint: OutPoint,
    pub deposit_amount: u64,
    /// Value locked in the vault output.
    pub amount: u64,
    pub fee: u64,
    pub change_script: Option<Script>,
    /// Adds the re-vault path (first layer of a multi-layer configuration).
    pub layered: bool,
}

impl VaultTemplate {
    pub fn vault_output_script(&self) -> Script {
        if self.layered {
            layered_vault_script(self.timelock, &self.active, &self.recovery_path)
        } else {
            vault_script(self.timelock, &self.active, &self.recovery_path)
        }
    }

    /// Deposit output is locked to the same transitional p-of-t keys.
    pub fn deposit_script(&self) -> Script {
        self.recovery_path.script()
    }
}

/// Unsigned vault transaction: one deposit input, the vault output, and an
/// optional change output.
pub fn build_vault_tx(template: &VaultTemplate) -> Result<Transaction, CovenantError> {
    let needed = template.amount + template.fee;
    if template.deposit_amount < needed {
        return Err(CovenantError::Underfunded { needed, available: template.deposit_amount });
    }
    let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    tx.inputs.push(TxInput { outpoint: template.deposit_outpoint, sequence: 0 });
    tx.outputs.push(TxOutput { amount: template.amount, script: template.vault_output_script() });
    let change = template.deposit_amount - needed;
    if let (Some(script), true) = (&template.change_script, change > 0) {
        tx.outputs.push(TxOutput { amount: change, script: script.clone() });
    }
    Ok(tx)
}

/// Unsigned P2RW: spends vault output 0 via the recovery branch into the
/// recovery wallet's m-of-n script. Signed ALL|ANYONECANPAY so fee inputs can
/// be appended afterwards.
pub fn build_p2rw_tx(vault_txid: Hash256, vault_amount: u64, recovery_wallet: &MultisigSpec, fee: u64) -> Transaction {
    let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    tx.inputs.push(TxInput { outpoint: OutPoint::new(vault_txid, 0), sequence: 0 });
    tx.outputs.push(TxOutput { amount: vault_amount.saturating_sub(fee), script: recovery_wallet.script() });
    tx
}

/// Position of a vault layer in a re-vaulting chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultLayer {
    pub index: usize,
    pub total: usize,
}

impl VaultLayer {
    pub fn is_final(&self) -> bool {
        self.index + 1 >= self.total
    }
}

/// Unsigned re-vault transaction moving a layer's vault output into the next
/// layer's deposit script.
pub fn build_revault_tx(
    layer: VaultLayer,
    vault_txid: Hash256,
    vault_amount: u64,
    next_deposit_script: &Script,
    fee: u64,
) -> Result<Transaction, CovenantError> {
    if layer.is_final() {
        return Err(CovenantError::Layer(format!(
            "layer {} of {} is final and has no re-vault path",
            layer.index + 1,
            layer.total
        )));
    }
    let amount = vault_amount
        .checked_sub(fee)
        .ok_or(CovenantError::Underfunded { needed: fee, available: vault_amount })?;
    let mut tx = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    tx.inputs.push(TxInput { outpoint: OutPoint::new(vault_txid, 0), sequence: 0 });
    tx.outputs.push(TxOutput { amount, script: next_deposit_script.clone() });
    Ok(tx)
}

/// One re-vault transaction per fee tier, identical apart from the fee.
pub fn build_revault_variants(
    layer: VaultLayer,
    vault_txid: Hash256,
    vault_amount: u64,
    next_deposit_script: &Script,
    fees: &[u64],
) -> Result<Vec<Transaction>, CovenantError> {
    fees.iter().map(|fee| build_revault_tx(layer, vault_txid, vault_amount, next_deposit_script, *fee)).collect()
}

/// Collects signatures for one input from each of `keys`.
pub fn collect_signatures(
    tx: &Transaction,
    index: usize,
    keys: &[&KeyPair],
    mode: SighashMode,
    spent_script: &Script,
    spent_amount: u64,
) -> Result<BTreeMap<PublicKey, Vec<u8>>, TxError> {
    keys.iter().map(|k| Ok((k.public, sign_input(tx, index, k, mode, spent_script, spent_amount)?))).collect()
}

/// Appends a fee input from a multisig fee UTXO and signs it with `keys`.
/// The existing inputs keep their ALL|ANYONECANPAY signatures.
pub fn append_fee_input(
    tx: &mut Transaction,
    fee_outpoint: OutPoint,
    fee_spec: &MultisigSpec,
    fee_amount: u64,
    keys: &[&KeyPair],
) -> Result<(), CovenantError> {
    tx.inputs.push(TxInput { outpoint: fee_outpoint, sequence: 0 });
    let index = tx.inputs.len() - 1;
    let script = fee_spec.script();
    let sigs = collect_signatures(tx, index, keys, SighashMode::All, &script, fee_amount)?;
    let arranged = fee_spec
        .arrange(&sigs)
        .ok_or(CovenantError::Threshold { threshold: fee_spec.threshold, count: sigs.len() })?;
    tx.set_witness(index, arranged);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    #[default]
    DeletedKey,
    Ctv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationState {
    Pending,
    Active,
}

/// Deletion tally and deposit confirmation for one covenant pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub required_deletions: usize,
    pub deletions: BTreeSet<String>,
    pub deposit_confirmed: bool,
}

impl Activation {
    pub fn new(required_deletions: usize) -> Self {
        Activation { required_deletions, deletions: BTreeSet::new(), deposit_confirmed: false }
    }

    pub fn record_deletion(&mut self, hm_id: &str) {
        self.deletions.insert(hm_id.to_string());
    }

    pub fn state(&self) -> ActivationState {
        if self.deposit_confirmed && self.deletions.len() >= self.required_deletions {
            ActivationState::Active
        } else {
            ActivationState::Pending
        }
    }

    pub fn is_active(&self) -> bool {
        self.state() == ActivationState::Active
    }
}

/// A vault transaction and its P2RW, plus the scripts needed to spend them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovenantPair {
    pub partition: usize,
    pub layer: usize,
    pub mechanism: Mechanism,
    pub deposit_script: Script,
    pub deposit_outpoint: OutPoint,
    pub deposit_amount: u64,
    pub avt: Transaction,
    pub vault_txid: Hash256,
    pub vault_script: Script,
    pub vault_amount: u64,
    pub p2rw: Transaction,
    pub recovery_script: Script,
    /// Fee-tiered re-vault transactions (first layer of a layered setup).
    pub revaults: Vec<Transaction>,
    pub layered: bool,
    pub activation: Activation,
}

impl CovenantPair {
    pub fn vault_outpoint(&self) -> OutPoint {
        OutPoint::new(self.vault_txid, 0)
    }

    pub fn p2rw_txid(&self) -> Hash256 {
        compute_txid(&self.p2rw).expect("p2rw is well formed")
    }

    /// Auditor-facing JSON summary.
    pub fn export(&self) -> serde_json::Value {
        serde_json::json!({
            "partition": self.partition,
            "layer": self.layer,
            "mechanism": self.mechanism,
            "vault_txid": self.vault_txid,
            "p2rw_txid": self.p2rw_txid(),
            "deposit_outpoint": self.deposit_outpoint.to_string(),
            "deposit_script": self.deposit_script.to_string(),
            "vault_script": self.vault_script.to_string(),
            "recovery_script": self.recovery_script.to_string(),
            "vault_amount": self.vault_amount,
            "revault_txids": self.revaults.iter().map(|t| compute_txid(t).expect("well formed")).collect::<Vec<_>>(),
            "active": self.activation.is_active(),
            "deletions": self.activation.deletions,
        })
    }
}

/// One planned transaction and its fee-input variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtvNode {
    pub name: String,
    /// Parent node index and output this template spends.
    pub parent: Option<(usize, u32)>,
    pub template: Transaction,
    pub fee_variant: Transaction,
    pub hash: Hash256,
    pub fee_hash: Hash256,
}

/// Planned template tree for a template-hash vault: vault then P2RW.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtvPlan {
    pub entropy_salt: Hash256,
    pub timelock: u32,
    pub deposit_amount: u64,
    pub nodes: Vec<CtvNode>,
}

/// Parameters of a template-hash vault plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtvParams {
    pub timelock: u32,
    pub active: MultisigSpec,
    pub recovery_wallet: MultisigSpec,
    pub deposit_amount: u64,
    pub vault_fee: u64,
    pub p2rw_fee: u64,
}

/// Placeholder spent by planned templates; the template hash does not commit
/// to outpoints, so any real outpoint may be substituted.
const PLANNED_OUTPOINT: OutPoint = OutPoint { txid: Hash256::ZERO, vout: 0 };

fn entropy_output(salt: &Hash256, node: &str) -> TxOutput {
    let tag = tagged_hash("vaultlab/ctv-entropy", &[&salt.0, node.as_bytes()]);
    TxOutput { amount: 0, script: Script::new(vec![Op::Return, Op::Push(tag.0.to_vec())]) }
}

fn with_fee_slot(template: &Transaction) -> Transaction {
    let mut tx = template.clone();
    tx.inputs.push(TxInput { outpoint: PLANNED_OUTPOINT, sequence: 0 });
    tx
}

pub fn build_ctv_plan(params: &CtvParams, entropy_salt: Hash256) -> Result<CtvPlan, CovenantError> {
    let vault_amount = params
        .deposit_amount
        .checked_sub(params.vault_fee)
        .ok_or(CovenantError::Underfunded { needed: params.vault_fee, available: params.deposit_amount })?;
    let recovery_amount = vault_amount
        .checked_sub(params.p2rw_fee)
        .ok_or(CovenantError::Underfunded { needed: params.p2rw_fee, available: vault_amount })?;

    let mut p2rw = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    p2rw.inputs.push(TxInput { outpoint: PLANNED_OUTPOINT, sequence: 0 });
    p2rw.outputs.push(TxOutput { amount: recovery_amount, script: params.recovery_wallet.script() });
    p2rw.outputs.push(entropy_output(&entropy_salt, "p2rw"));
    let p2rw_fee = with_fee_slot(&p2rw);
    let (p2rw_hash, p2rw_fee_hash) = (ctv_hash(&p2rw, 0), ctv_hash(&p2rw_fee, 0));

    let mut vault = Transaction::new(TX_VERSION, PAST_LOCKTIME);
    vault.inputs.push(TxInput { outpoint: PLANNED_OUTPOINT, sequence: 0 });
    vault.outputs.push(TxOutput {
        amount: vault_amount,
        script: ctv_vault_script(params.timelock, &params.active, &p2rw_hash, &p2rw_fee_hash),
    });
    vault.outputs.push(entropy_output(&entropy_salt, "vault"));
    let vault_fee = with_fee_slot(&vault);

    Ok(CtvPlan {
        entropy_salt,
        timelock: params.timelock,
        deposit_amount: params.deposit_amount,
        nodes: vec![
            CtvNode {
                name: "vault".into(),
                parent: None,
                hash: ctv_hash(&vault, 0),
                fee_hash: ctv_hash(&vault_fee, 0),
                template: vault,
                fee_variant: vault_fee,
            },
            CtvNode {
                name: "p2rw".into(),
                parent: Some((0, 0)),
                hash: p2rw_hash,
                fee_hash: p2rw_fee_hash,
                template: p2rw,
                fee_variant: p2rw_fee,
            },
        ],
    })
}

impl CtvPlan {
    pub fn vault_node(&self) -> &CtvNode {
        &self.nodes[0]
    }

    pub fn p2rw_node(&self) -> &CtvNode {
        &self.nodes[1]
    }

    /// Vault transaction spending `deposit`, plain variant, with its selector witness.
    pub fn vault_tx(&self, deposit: OutPoint) -> Transaction {
        let mut tx = self.vault_node().template.clone();
        tx.inputs[0].outpoint = deposit;
        tx.set_witness(0, vec![vec![1]]);
        tx
    }

    /// P2RW spending vault output `vault:0`, plain variant.
    pub fn p2rw_tx(&self, vault_txid: Hash256) -> Transaction {
        let mut tx = self.p2rw_node().template.clone();
        tx.inputs[0].outpoint = OutPoint::new(vault_txid, 0);
        tx.set_witness(0, vec![vec![1], Vec::new()]);
        tx
    }

    /// Fee-variant P2RW; the caller appends and signs the fee input at index 1.
    pub fn p2rw_fee_tx(&self, vault_txid: Hash256) -> Transaction {
        let mut tx = self.p2rw_node().fee_variant.clone();
        tx.inputs[0].outpoint = OutPoint::new(vault_txid, 0);
        tx.inputs.pop();
        tx.set_witness(0, vec![Vec::new(), Vec::new()]);
        tx
    }

    /// Fee-variant vault transaction; the caller appends the fee input.
    pub fn vault_fee_tx(&self, deposit: OutPoint) -> Transaction {
        let mut tx = self.vault_node().fee_variant.clone();
        tx.inputs[0].outpoint = deposit;
        tx.inputs.pop();
        tx.set_witness(0, vec![Vec::new()]);
        tx
    }

    pub fn deposit_script(&self) -> Script {
        ctv_deposit_script(self)
    }

    pub fn vault_script(&self) -> &Script {
        &self.vault_node().template.outputs[0].script
    }

    pub fn export(&self) -> serde_json::Value {
        serde_json::json!({
            "entropy_salt": self.entropy_salt,
            "timelock": self.timelock,
            "deposit_amount": self.deposit_amount,
            "deposit_script": self.deposit_script().to_string(),
            "nodes": self.nodes.iter().map(|n| serde_json::json!({
                "name": n.name,
                "parent": n.parent,
                "hash": n.hash,
                "fee_hash": n.fee_hash,
                "outputs": n.template.outputs.iter().map(|o| serde_json::json!({
                    "amount": o.amount,
                    "script": o.script.to_string(),
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Deposit output committing to the vault template or its fee variant.
pub fn ctv_deposit_script(plan: &CtvPlan) -> Script {
    let node = plan.vault_node();
    ctv_commit_script(&node.hash, &node.fee_hash)
}
