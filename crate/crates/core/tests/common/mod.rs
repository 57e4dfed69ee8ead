#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use vaultlab::script::{Op, Script};
use vaultlab::txkit::{Hash256, OutPoint, Transaction, TxInput, TxOutput};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_bytes(rng: &mut impl RngCore, max: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max);
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

pub fn random_hash(rng: &mut impl RngCore) -> Hash256 {
    let mut h = [0u8; 32];
    rng.fill_bytes(&mut h);
    Hash256(h)
}

pub fn random_script(rng: &mut impl RngCore) -> Script {
    let n = rng.gen_range(0..6);
    let ops = (0..n)
        .map(|_| match rng.gen_range(0..6) {
            0 => Op::Num(rng.gen_range(-5..200)),
            1 => Op::Push(random_bytes(rng, 40)),
            2 => Op::Drop,
            3 => Op::CheckMultisig,
            4 => Op::CheckSequenceVerify,
            _ => Op::Return,
        })
        .collect();
    Script::new(ops)
}

/// Random well-formed transaction with random witnesses on every input.
pub fn random_tx(rng: &mut impl RngCore) -> Transaction {
    let mut tx = Transaction::new(rng.gen_range(1..4), rng.gen());
    for _ in 0..rng.gen_range(1..5) {
        tx.inputs.push(TxInput { outpoint: OutPoint::new(random_hash(rng), rng.gen_range(0..4)), sequence: rng.gen() });
    }
    for _ in 0..rng.gen_range(1..5) {
        tx.outputs.push(TxOutput { amount: rng.gen_range(0..1u64 << 40), script: random_script(rng) });
    }
    for i in 0..tx.inputs.len() {
        let items = rng.gen_range(1..4);
        tx.set_witness(i, (0..items).map(|_| random_bytes(rng, 70)).collect());
    }
    tx
}

/// Template hash written out from the field layout, independent of the
/// library implementation.
pub fn reference_ctv_hash(tx: &Transaction, index: u32) -> [u8; 32] {
    let sequences: Vec<u8> = tx.inputs.iter().flat_map(|i| i.sequence.to_le_bytes()).collect();
    let mut outputs = Vec::new();
    for o in &tx.outputs {
        let script = o.script.encode();
        outputs.extend(o.amount.to_le_bytes());
        outputs.extend((script.len() as u32).to_le_bytes());
        outputs.extend(script);
    }
    let tag = b"vaultlab/ctv";
    let mut pre = Vec::new();
    pre.extend((tag.len() as u32).to_le_bytes());
    pre.extend(tag);
    pre.extend(tx.version.to_le_bytes());
    pre.extend(tx.locktime.to_le_bytes());
    pre.extend((tx.inputs.len() as u32).to_le_bytes());
    pre.extend(Sha256::digest(&sequences));
    pre.extend((tx.outputs.len() as u32).to_le_bytes());
    pre.extend(Sha256::digest(&outputs));
    pre.extend(index.to_le_bytes());
    Sha256::digest(&pre).into()
}

/// Bitcoin-style txid: double SHA-256 over the witness-free encoding.
pub fn reference_txid(tx: &Transaction) -> [u8; 32] {
    let mut b = Vec::new();
    b.extend(tx.version.to_le_bytes());
    b.extend((tx.inputs.len() as u32).to_le_bytes());
    for i in &tx.inputs {
        b.extend(i.outpoint.txid.0);
        b.extend(i.outpoint.vout.to_le_bytes());
        b.extend(i.sequence.to_le_bytes());
    }
    b.extend((tx.outputs.len() as u32).to_le_bytes());
    for o in &tx.outputs {
        let s = o.script.encode();
        b.extend(o.amount.to_le_bytes());
        b.extend((s.len() as u32).to_le_bytes());
        b.extend(s);
    }
    b.extend(tx.locktime.to_le_bytes());
    Sha256::digest(Sha256::digest(&b)).into()
}
