//! Transactions, canonical serialization, txid and sighash digests, and the
//! signature scheme used by every signer in the simulator.
//!
//! Serialization layout (all integers little-endian):
//!
//! ```text
//! version:u32 | n_in:u32 | n_in * (txid:[u8;32] vout:u32 sequence:u32)
//!             | n_out:u32 | n_out * (amount:u64 script_len:u32 script)
//!             | locktime:u32
//! ```
//!
//! Witnesses are serialized after the base encoding (`n_items:u32` followed by
//! `len:u32 bytes` per item, one block per input) and never enter the txid.

use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::script::Script;

/// Relative-locktime capable transaction version.
pub const TX_VERSION: u32 = 2;

/// Locktime used by every covenant transaction: a height in the past, so the
/// absolute lock is never active.
pub const PAST_LOCKTIME: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxError {
    #[error("transaction is not well formed: {0}")]
    WellFormedness(&'static str),
    #[error("input index {index} out of range ({len} inputs)")]
    Index { index: usize, len: usize },
    #[error("key {0} has been deleted")]
    KeyDeleted(String),
    #[error("decode error: {0}")]
    Decode(String),
}

/// 32-byte hash. Displayed as plain hex in byte order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, TxError> {
        let bytes = hex::decode(s).map_err(|e| TxError::Decode(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| TxError::Decode("expected 32 bytes".into()))?;
        Ok(Hash256(arr))
    }

    /// Short prefix used in log lines and key identifiers.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({})", self.to_hex())
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash256 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash256 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash256::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Single SHA-256 over a domain tag and the given parts.
pub fn tagged_hash(tag: &str, parts: &[&[u8]]) -> Hash256 {
    let mut h = Sha256::new();
    h.update((tag.len() as u32).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p);
    }
    Hash256(h.finalize().into())
}

pub fn sha256d(data: &[u8]) -> Hash256 {
    let first = Sha256::digest(data);
    Hash256(Sha256::digest(first).into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: Hash256,
    pub vout: u32,
}

impl OutPoint {
    pub fn new(txid: Hash256, vout: u32) -> Self {
        OutPoint { txid, vout }
    }
}

impl fmt::Display for OutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid, self.vout)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInput {
    pub outpoint: OutPoint,
    /// Relative lock in raw blocks.
    pub sequence: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutput {
    pub amount: u64,
    pub script: Script,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub version: u32,
    pub locktime: u32,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    /// One stack per input; missing trailing entries are treated as empty.
    pub witnesses: Vec<Vec<Vec<u8>>>,
}

impl Transaction {
    pub fn new(version: u32, locktime: u32) -> Self {
        Transaction {
            version,
            locktime,
            inputs: Vec::new(),
            outputs: Vec::new(),
            witnesses: Vec::new(),
        }
    }

    pub fn check_well_formed(&self) -> Result<(), TxError> {
        if self.inputs.is_empty() {
            return Err(TxError::WellFormedness("zero inputs"));
        }
        if self.outputs.is_empty() {
            return Err(TxError::WellFormedness("zero outputs"));
        }
        if self.witnesses.len() > self.inputs.len() {
            return Err(TxError::WellFormedness("more witnesses than inputs"));
        }
        Ok(())
    }

    pub fn witness(&self, index: usize) -> &[Vec<u8>] {
        self.witnesses.get(index).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn set_witness(&mut self, index: usize, stack: Vec<Vec<u8>>) {
        if self.witnesses.len() <= index {
            self.witnesses.resize(index + 1, Vec::new());
        }
        self.witnesses[index] = stack;
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.amount).sum()
    }

    /// Base serialization, the part committed to by the txid.
    pub fn serialize_base(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.inputs.len() * 40 + self.outputs.len() * 80);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.inputs.len() as u32).to_le_bytes());
        for input in &self.inputs {
            out.extend_from_slice(&input.outpoint.txid.0);
            out.extend_from_slice(&input.outpoint.vout.to_le_bytes());
            out.extend_from_slice(&input.sequence.to_le_bytes());
        }
        out.extend_from_slice(&(self.outputs.len() as u32).to_le_bytes());
        for output in &self.outputs {
            write_output(&mut out, output);
        }
        out.extend_from_slice(&self.locktime.to_le_bytes());
        out
    }

    /// Base serialization followed by one witness block per input.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = self.serialize_base();
        for i in 0..self.inputs.len() {
            let stack = self.witness(i);
            out.extend_from_slice(&(stack.len() as u32).to_le_bytes());
            for item in stack {
                out.extend_from_slice(&(item.len() as u32).to_le_bytes());
                out.extend_from_slice(item);
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, TxError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.u32()?;
        let n_in = r.u32()? as usize;
        let mut inputs = Vec::with_capacity(n_in.min(1024));
        for _ in 0..n_in {
            let txid = Hash256(r.array()?);
            let vout = r.u32()?;
            let sequence = r.u32()?;
            inputs.push(TxInput { outpoint: OutPoint { txid, vout }, sequence });
        }
        let n_out = r.u32()? as usize;
        let mut outputs = Vec::with_capacity(n_out.min(1024));
        for _ in 0..n_out {
            let amount = r.u64()?;
            let len = r.u32()? as usize;
            let script = Script::decode(r.take(len)?).map_err(|e| TxError::Decode(e.to_string()))?;
            outputs.push(TxOutput { amount, script });
        }
        let locktime = r.u32()?;
        let mut witnesses = Vec::new();
        if r.pos < bytes.len() {
            for _ in 0..inputs.len() {
                let n = r.u32()? as usize;
                let mut stack = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    stack.push(r.take(len)?.to_vec());
                }
                witnesses.push(stack);
            }
            while witnesses.last().is_some_and(Vec::is_empty) {
                witnesses.pop();
            }
        }
        if r.pos != bytes.len() {
            return Err(TxError::Decode("trailing bytes".into()));
        }
        Ok(Transaction { version, locktime, inputs, outputs, witnesses })
    }

    /// Size of the base serialization; the unit for feerates.
    pub fn vsize(&self) -> u64 {
        self.serialize_base().len() as u64
    }

    pub fn txid(&self) -> Result<Hash256, TxError> {
        compute_txid(self)
    }
}

fn write_output(out: &mut Vec<u8>, output: &TxOutput) {
    let script = output.script.encode();
    out.extend_from_slice(&output.amount.to_le_bytes());
    out.extend_from_slice(&(script.len() as u32).to_le_bytes());
    out.extend_from_slice(&script);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TxError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TxError::Decode("unexpected end of input".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], TxError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32, TxError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, TxError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Double SHA-256 of the witness-free serialization.
pub fn compute_txid(tx: &Transaction) -> Result<Hash256, TxError> {
    tx.check_well_formed()?;
    Ok(sha256d(&tx.serialize_base()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SighashMode {
    All,
    AllAnyoneCanPay,
}

impl SighashMode {
    pub fn to_byte(self) -> u8 {
        match self {
            SighashMode::All => 0x01,
            SighashMode::AllAnyoneCanPay => 0x81,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(SighashMode::All),
            0x81 => Some(SighashMode::AllAnyoneCanPay),
            _ => None,
        }
    }
}

/// Digest signed by an input. `ALL` commits to every input; `ALL|ANYONECANPAY`
/// commits only to the signing input, so further inputs may be appended.
pub fn sighash_digest(
    tx: &Transaction,
    input_index: usize,
    mode: SighashMode,
    spent_script: &Script,
    spent_amount: u64,
) -> Result<Hash256, TxError> {
    let len = tx.inputs.len();
    if input_index >= len {
        return Err(TxError::Index { index: input_index, len });
    }
    let mut buf = Vec::new();
    buf.push(mode.to_byte());
    buf.extend_from_slice(&tx.version.to_le_bytes());
    buf.extend_from_slice(&tx.locktime.to_le_bytes());
    let push_input = |buf: &mut Vec<u8>, input: &TxInput| {
        buf.extend_from_slice(&input.outpoint.txid.0);
        buf.extend_from_slice(&input.outpoint.vout.to_le_bytes());
        buf.extend_from_slice(&input.sequence.to_le_bytes());
    };
    match mode {
        SighashMode::All => {
            buf.extend_from_slice(&(len as u32).to_le_bytes());
            for input in &tx.inputs {
                push_input(&mut buf, input);
            }
            buf.extend_from_slice(&(input_index as u32).to_le_bytes());
        }
        SighashMode::AllAnyoneCanPay => push_input(&mut buf, &tx.inputs[input_index]),
    }
    buf.extend_from_slice(&(tx.outputs.len() as u32).to_le_bytes());
    for output in &tx.outputs {
        write_output(&mut buf, output);
    }
    let script = spent_script.encode();
    buf.extend_from_slice(&(script.len() as u32).to_le_bytes());
    buf.extend_from_slice(&script);
    buf.extend_from_slice(&spent_amount.to_le_bytes());
    Ok(tagged_hash("vaultlab/sighash", &[&buf]))
}

/// 32-byte public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..6]))
    }
}

/// Signing key with its public half and an opaque identifier.
#[derive(Clone)]
pub struct KeyPair {
    pub key_id: String,
    secret: [u8; 32],
    signing: SigningKey,
    pub public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("key_id", &self.key_id).field("public", &self.public).finish()
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.key_id == other.key_id && self.secret == other.secret
    }
}
impl Eq for KeyPair {}

impl KeyPair {
    pub fn from_secret(key_id: impl Into<String>, secret: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&secret);
        let public = PublicKey(signing.verifying_key().to_bytes());
        KeyPair { key_id: key_id.into(), secret, signing, public }
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }

    pub fn sign(&self, digest: &Hash256) -> Signature {
        Signature { public: self.public, digest: *digest, bytes: self.signing.sign(&digest.0).to_bytes() }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub public: PublicKey,
    pub digest: Hash256,
    pub bytes: [u8; 64],
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({:?}, {})", self.public, hex::encode(&self.bytes[..6]))
    }
}

pub fn verify(public: &PublicKey, digest: &Hash256, sig: &Signature) -> bool {
    if sig.public != *public || sig.digest != *digest {
        return false;
    }
    verify_raw(public, digest, &sig.bytes)
}

/// Verifies a bare 64-byte signature as carried in a witness.
pub fn verify_raw(public: &PublicKey, digest: &Hash256, sig: &[u8]) -> bool {
    let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    vk.verify(&digest.0, &sig).is_ok()
}

/// Signs input `index` and returns the witness item `signature || sighash byte`.
pub fn sign_input(
    tx: &Transaction,
    index: usize,
    key: &KeyPair,
    mode: SighashMode,
    spent_script: &Script,
    spent_amount: u64,
) -> Result<Vec<u8>, TxError> {
    let digest = sighash_digest(tx, index, mode, spent_script, spent_amount)?;
    let sig = key.sign(&digest);
    let mut item = sig.bytes.to_vec();
    item.push(mode.to_byte());
    Ok(item)
}

/// One record of the golden-vector file: `serialized_hex, txid_hex`.
pub fn golden_line(tx: &Transaction) -> Result<String, TxError> {
    Ok(format!("{}, {}", hex::encode(tx.serialize()), compute_txid(tx)?))
}

pub fn parse_golden_line(line: &str) -> Result<(Transaction, Hash256), TxError> {
    let (tx_hex, txid_hex) = line
        .split_once(',')
        .ok_or_else(|| TxError::Decode("expected `serialized_hex, txid_hex`".into()))?;
    let bytes = hex::decode(tx_hex.trim()).map_err(|e| TxError::Decode(e.to_string()))?;
    Ok((Transaction::parse(&bytes)?, Hash256::from_hex(txid_hex.trim())?))
}
