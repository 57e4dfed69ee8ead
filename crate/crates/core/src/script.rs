//! A small script interpreter covering the opcodes used by vault, recovery and
//! template-commitment locking scripts.
//!
//! Scripts are executed directly as witness scripts: the witness stack supplies
//! signatures and branch selectors, the locking script is the program. Text
//! form is whitespace separated: `OP_*` mnemonics, decimal numbers and `<hex>`
//! pushes, e.g. `2 <pk1> <pk2> <pk3> 3 OP_CHECKMULTISIG`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::txkit::{sighash_digest, tagged_hash, verify_raw, Hash256, PublicKey, SighashMode, Transaction};

/// Maximum keys accepted by CHECKMULTISIG.
pub const MAX_MULTISIG_KEYS: i64 = 20;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    If,
    Else,
    EndIf,
    Drop,
    CheckSequenceVerify,
    CheckMultisig,
    CheckTemplateVerify,
    /// Marks an output as a provably unspendable data carrier.
    Return,
    Num(i64),
    Push(Vec<u8>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("malformed script: {0}")]
    Malformed(String),
    #[error("stack: {0}")]
    Stack(&'static str),
    #[error("relative timelock not satisfied (need {needed}, sequence {sequence}, confirmations {confirmations})")]
    Csv { needed: i64, sequence: u32, confirmations: u32 },
    #[error("multisig verification failed")]
    Multisig,
    #[error("template hash mismatch")]
    Ctv,
    #[error("script finished with a false result")]
    EvalFalse,
    #[error("script finished with {0} stack items")]
    CleanStack(usize),
    #[error("OP_RETURN executed")]
    OpReturn,
}

impl ScriptError {
    /// Short reason tag used in chain rejections and logs.
    pub fn reason(&self) -> &'static str {
        match self {
            ScriptError::Malformed(_) => "malformed",
            ScriptError::Stack(_) => "stack",
            ScriptError::Csv { .. } => "csv",
            ScriptError::Multisig => "multisig",
            ScriptError::Ctv => "ctv",
            ScriptError::EvalFalse => "false",
            ScriptError::CleanStack(_) => "cleanstack",
            ScriptError::OpReturn => "op-return",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Script {
    pub ops: Vec<Op>,
}

impl Script {
    pub fn new(ops: Vec<Op>) -> Self {
        Script { ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn is_unspendable(&self) -> bool {
        self.ops.first() == Some(&Op::Return)
    }

    /// IF/ELSE/ENDIF nesting check.
    pub fn check_balanced(&self) -> Result<(), ScriptError> {
        let mut depth = 0usize;
        let mut seen_else: Vec<bool> = Vec::new();
        for op in &self.ops {
            match op {
                Op::If => {
                    depth += 1;
                    seen_else.push(false);
                }
                Op::Else => match seen_else.last_mut() {
                    Some(seen) if !*seen => *seen = true,
                    Some(_) => return Err(ScriptError::Malformed("duplicate OP_ELSE".into())),
                    None => return Err(ScriptError::Malformed("OP_ELSE outside OP_IF".into())),
                },
                Op::EndIf => {
                    if depth == 0 {
                        return Err(ScriptError::Malformed("OP_ENDIF without OP_IF".into()));
                    }
                    depth -= 1;
                    seen_else.pop();
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(ScriptError::Malformed("unterminated OP_IF".into()));
        }
        Ok(())
    }

    /// Binary encoding used inside transactions.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::If => out.push(0x63),
                Op::Else => out.push(0x67),
                Op::EndIf => out.push(0x68),
                Op::Drop => out.push(0x75),
                Op::Return => out.push(0x6a),
                Op::CheckMultisig => out.push(0xae),
                Op::CheckSequenceVerify => out.push(0xb2),
                Op::CheckTemplateVerify => out.push(0xb3),
                Op::Num(0) => out.push(0x00),
                Op::Num(n @ 1..=16) => out.push(0x50 + *n as u8),
                Op::Num(n) => {
                    out.push(0xf0);
                    out.extend_from_slice(&n.to_le_bytes());
                }
                Op::Push(data) => {
                    out.push(0x4d);
                    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                    out.extend_from_slice(data);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ScriptError> {
        let mut ops = Vec::new();
        let mut i = 0;
        let take = |i: &mut usize, n: usize| -> Result<&[u8], ScriptError> {
            let end = i.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| ScriptError::Malformed("truncated script".into()))?;
            let s = &bytes[*i..end];
            *i = end;
            Ok(s)
        };
        while i < bytes.len() {
            let code = bytes[i];
            i += 1;
            let op = match code {
                0x63 => Op::If,
                0x67 => Op::Else,
                0x68 => Op::EndIf,
                0x75 => Op::Drop,
                0x6a => Op::Return,
                0xae => Op::CheckMultisig,
                0xb2 => Op::CheckSequenceVerify,
                0xb3 => Op::CheckTemplateVerify,
                0x00 => Op::Num(0),
                0x51..=0x60 => Op::Num((code - 0x50) as i64),
                0xf0 => {
                    let n = i64::from_le_bytes(take(&mut i, 8)?.try_into().expect("8 bytes"));
                    if (0..=16).contains(&n) {
                        return Err(ScriptError::Malformed("non-canonical small number".into()));
                    }
                    Op::Num(n)
                }
                0x4d => {
                    let len = u32::from_le_bytes(take(&mut i, 4)?.try_into().expect("4 bytes")) as usize;
                    Op::Push(take(&mut i, len)?.to_vec())
                }
                other => return Err(ScriptError::Malformed(format!("unknown opcode 0x{other:02x}"))),
            };
            ops.push(op);
        }
        Ok(Script { ops })
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match op {
                Op::If => f.write_str("OP_IF")?,
                Op::Else => f.write_str("OP_ELSE")?,
                Op::EndIf => f.write_str("OP_ENDIF")?,
                Op::Drop => f.write_str("OP_DROP")?,
                Op::Return => f.write_str("OP_RETURN")?,
                Op::CheckSequenceVerify => f.write_str("OP_CHECKSEQUENCEVERIFY")?,
                Op::CheckMultisig => f.write_str("OP_CHECKMULTISIG")?,
                Op::CheckTemplateVerify => f.write_str("OP_CTV")?,
                Op::Num(n) => write!(f, "{n}")?,
                Op::Push(data) => write!(f, "<{}>", hex::encode(data))?,
            }
        }
        Ok(())
    }
}

impl FromStr for Script {
    type Err = ScriptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut ops = Vec::new();
        for tok in s.split_whitespace() {
            let op = match tok {
                "OP_IF" => Op::If,
                "OP_ELSE" => Op::Else,
                "OP_ENDIF" => Op::EndIf,
                "OP_DROP" => Op::Drop,
                "OP_RETURN" => Op::Return,
                "OP_CHECKSEQUENCEVERIFY" | "OP_CSV" => Op::CheckSequenceVerify,
                "OP_CHECKMULTISIG" => Op::CheckMultisig,
                "OP_CHECKTEMPLATEVERIFY" | "OP_CTV" => Op::CheckTemplateVerify,
                "OP_FALSE" => Op::Num(0),
                "OP_TRUE" => Op::Num(1),
                t if t.starts_with('<') && t.ends_with('>') && t.len() >= 2 => {
                    let data = hex::decode(&t[1..t.len() - 1])
                        .map_err(|e| ScriptError::Malformed(format!("bad push {t}: {e}")))?;
                    Op::Push(data)
                }
                t if t.starts_with("OP_") => {
                    let n: i64 = t[3..]
                        .parse()
                        .ok()
                        .filter(|n| (0..=16).contains(n))
                        .ok_or_else(|| ScriptError::Malformed(format!("unknown mnemonic {t}")))?;
                    Op::Num(n)
                }
                t => Op::Num(t.parse().map_err(|_| ScriptError::Malformed(format!("unknown token {t}")))?),
            };
            ops.push(op);
        }
        Ok(Script { ops })
    }
}

impl Serialize for Script {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Script {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Minimal little-endian sign-magnitude number encoding.
pub fn encode_num(n: i64) -> Vec<u8> {
    if n == 0 {
        return Vec::new();
    }
    let neg = n < 0;
    let mut abs = n.unsigned_abs();
    let mut out = Vec::new();
    while abs > 0 {
        out.push((abs & 0xff) as u8);
        abs >>= 8;
    }
    if out.last().is_some_and(|b| b & 0x80 != 0) {
        out.push(if neg { 0x80 } else { 0x00 });
    } else if neg {
        *out.last_mut().expect("non-empty") |= 0x80;
    }
    out
}

pub fn decode_num(bytes: &[u8]) -> Result<i64, ScriptError> {
    if bytes.len() > 8 {
        return Err(ScriptError::Stack("number too long"));
    }
    if bytes.is_empty() {
        return Ok(0);
    }
    let last = bytes[bytes.len() - 1];
    if last & 0x7f == 0 && (bytes.len() == 1 || bytes[bytes.len() - 2] & 0x80 == 0) {
        return Err(ScriptError::Stack("non-minimal number"));
    }
    let mut v: i64 = 0;
    for (i, b) in bytes.iter().enumerate() {
        let b = if i == bytes.len() - 1 { b & 0x7f } else { *b };
        v |= (b as i64) << (8 * i);
    }
    Ok(if last & 0x80 != 0 { -v } else { v })
}

fn cast_bool(bytes: &[u8]) -> bool {
    for (i, b) in bytes.iter().enumerate() {
        if *b != 0 {
            return !(i == bytes.len() - 1 && *b == 0x80);
        }
    }
    false
}

/// Evaluation environment for one input.
#[derive(Clone, Debug)]
pub struct ExecContext<'a> {
    pub spending_tx: &'a Transaction,
    pub input_index: usize,
    /// Blocks since the transaction that created the spent output was mined;
    /// 0 while it is unconfirmed.
    pub confirmations: u32,
    pub spent_amount: u64,
    pub witness_stack: Vec<Vec<u8>>,
}

impl<'a> ExecContext<'a> {
    pub fn new(spending_tx: &'a Transaction, input_index: usize, confirmations: u32, spent_amount: u64) -> Self {
        let witness_stack = spending_tx.witness(input_index).to_vec();
        ExecContext { spending_tx, input_index, confirmations, spent_amount, witness_stack }
    }
}

/// Runs `script` against the witness stack in `ctx`. `Ok(())` is Accept.
pub fn eval_script(script: &Script, ctx: &ExecContext<'_>) -> Result<(), ScriptError> {
    script.check_balanced()?;
    if ctx.input_index >= ctx.spending_tx.inputs.len() {
        return Err(ScriptError::Stack("input index out of range"));
    }
    let mut stack: Vec<Vec<u8>> = ctx.witness_stack.clone();
    let mut exec: Vec<bool> = Vec::new();

    for op in &script.ops {
        let executing = exec.iter().all(|b| *b);
        match op {
            Op::If => {
                let branch = if executing {
                    let top = stack.pop().ok_or(ScriptError::Stack("OP_IF on empty stack"))?;
                    // Selectors must be minimal: empty or exactly 0x01.
                    match top.as_slice() {
                        [] => false,
                        [1] => true,
                        _ => return Err(ScriptError::Stack("non-minimal OP_IF argument")),
                    }
                } else {
                    false
                };
                exec.push(branch);
                continue;
            }
            Op::Else => {
                let last = exec.last_mut().ok_or_else(|| ScriptError::Malformed("OP_ELSE".into()))?;
                *last = !*last;
                continue;
            }
            Op::EndIf => {
                exec.pop();
                continue;
            }
            _ if !executing => continue,
            Op::Num(n) => stack.push(encode_num(*n)),
            Op::Push(data) => stack.push(data.clone()),
            Op::Drop => {
                stack.pop().ok_or(ScriptError::Stack("OP_DROP on empty stack"))?;
            }
            Op::Return => return Err(ScriptError::OpReturn),
            Op::CheckSequenceVerify => {
                let top = stack.last().ok_or(ScriptError::Stack("OP_CHECKSEQUENCEVERIFY on empty stack"))?;
                let needed = decode_num(top)?;
                if needed < 0 {
                    return Err(ScriptError::Stack("negative relative lock"));
                }
                let sequence = ctx.spending_tx.inputs[ctx.input_index].sequence;
                let ok = ctx.spending_tx.version >= 2
                    && sequence as i64 >= needed
                    && ctx.confirmations as i64 >= needed;
                if !ok {
                    return Err(ScriptError::Csv { needed, sequence, confirmations: ctx.confirmations });
                }
            }
            Op::CheckMultisig => {
                let ok = check_multisig(&mut stack, script, ctx)?;
                if !ok {
                    return Err(ScriptError::Multisig);
                }
                stack.push(vec![1]);
            }
            Op::CheckTemplateVerify => {
                let top = stack.last().ok_or(ScriptError::Stack("OP_CTV on empty stack"))?;
                if top.len() != 32 {
                    return Err(ScriptError::Stack("OP_CTV argument must be 32 bytes"));
                }
                if top.as_slice() != ctv_hash(ctx.spending_tx, ctx.input_index).0 {
                    return Err(ScriptError::Ctv);
                }
            }
        }
    }

    match stack.len() {
        1 if cast_bool(&stack[0]) => Ok(()),
        1 => Err(ScriptError::EvalFalse),
        0 => Err(ScriptError::EvalFalse),
        n => Err(ScriptError::CleanStack(n)),
    }
}

/// Pops `n`, `n` keys, `m` and `m` signatures. Signatures must appear in key
/// order; each is a 64-byte signature followed by a sighash byte.
fn check_multisig(stack: &mut Vec<Vec<u8>>, script: &Script, ctx: &ExecContext<'_>) -> Result<bool, ScriptError> {
    let mut pop = |what: &'static str| stack.pop().ok_or(ScriptError::Stack(what));
    let n = decode_num(&pop("missing key count")?)?;
    if !(0..=MAX_MULTISIG_KEYS).contains(&n) {
        return Err(ScriptError::Stack("key count out of range"));
    }
    let mut keys = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let k = pop("missing public key")?;
        let arr: [u8; 32] = k.try_into().map_err(|_| ScriptError::Stack("public key must be 32 bytes"))?;
        keys.push(PublicKey(arr));
    }
    keys.reverse();
    let m = decode_num(&pop("missing threshold")?)?;
    if !(0..=n).contains(&m) {
        return Err(ScriptError::Stack("threshold out of range"));
    }
    let mut sigs = Vec::with_capacity(m as usize);
    for _ in 0..m {
        sigs.push(pop("missing signature")?);
    }
    sigs.reverse();

    let mut key_iter = keys.iter();
    'sigs: for sig in &sigs {
        let (mode_byte, raw) = match sig.split_last() {
            Some((b, raw)) if raw.len() == 64 => (*b, raw),
            _ => return Err(ScriptError::Stack("signature must be 65 bytes")),
        };
        let mode = SighashMode::from_byte(mode_byte).ok_or(ScriptError::Stack("unknown sighash byte"))?;
        let digest = sighash_digest(ctx.spending_tx, ctx.input_index, mode, script, ctx.spent_amount)
            .map_err(|_| ScriptError::Stack("input index out of range"))?;
        for key in key_iter.by_ref() {
            if verify_raw(key, &digest, raw) {
                continue 'sigs;
            }
        }
        return Ok(false);
    }
    Ok(true)
}

/// Template hash over version, locktime, input count, sequences, output count,
/// outputs and the executing input index. Witnesses are never committed; the
/// transaction model carries no scriptSigs, so the optional scriptSig hash is
/// always absent.
pub fn ctv_hash(tx: &Transaction, input_index: usize) -> Hash256 {
    let mut seq = Sha256::new();
    for input in &tx.inputs {
        seq.update(input.sequence.to_le_bytes());
    }
    let seq: [u8; 32] = seq.finalize().into();
    let mut outs = Sha256::new();
    for output in &tx.outputs {
        let script = output.script.encode();
        outs.update(output.amount.to_le_bytes());
        outs.update((script.len() as u32).to_le_bytes());
        outs.update(&script);
    }
    let outs: [u8; 32] = outs.finalize().into();
    tagged_hash(
        "vaultlab/ctv",
        &[
            &tx.version.to_le_bytes(),
            &tx.locktime.to_le_bytes(),
            &(tx.inputs.len() as u32).to_le_bytes(),
            &seq,
            &(tx.outputs.len() as u32).to_le_bytes(),
            &outs,
            &(input_index as u32).to_le_bytes(),
        ],
    )
}

/// Accept iff the template hash of the spending input equals `commitment`.
pub fn eval_ctv(commitment: &Hash256, ctx: &ExecContext<'_>) -> Result<(), ScriptError> {
    if ctv_hash(ctx.spending_tx, ctx.input_index) == *commitment {
        Ok(())
    } else {
        Err(ScriptError::Ctv)
    }
}
