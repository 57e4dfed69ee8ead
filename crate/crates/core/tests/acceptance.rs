//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use vaultlab::chain::Visibility;
use vaultlab::covenant::{
    append_fee_input, parse_vault_script, path_witness, Activation, ActivationState, Mechanism, MultisigSpec, SpendPath,
};
use vaultlab::fleet::{Threshold, WalletRole};
use vaultlab::orchestrator::{
    Accounting, Custody, Feerates, Holding, Honest, SimConfig, VaultState, VaultingOptions, COIN,
};
use vaultlab::script::{ctv_hash, eval_script, ExecContext, Op, Script};
use vaultlab::threat::{
    best_play, outcome_matrix, run_scenario, run_strategy, scenario, strategies, tolerance_oracle, Attacker,
    CompromiseSet, OutcomeClass, Plan, ScenarioId, ScenarioOutcome,
};
use vaultlab::txkit::{compute_txid, sign_input, KeyPair, OutPoint, SighashMode, Transaction, TxInput, TxOutput};
use vaultlab::watchtower::Variant;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn keys(r: &mut impl RngCore, tag: &str, n: usize) -> Vec<KeyPair> {
    (0..n)
        .map(|i| {
            let mut s = [0u8; 32];
            r.fill_bytes(&mut s);
            KeyPair::from_secret(format!("{tag}/{i}"), s)
        })
        .collect()
}

fn class_of(acc: &Accounting) -> OutcomeClass {
    if acc.attacker + acc.frozen == 0 {
        OutcomeClass::NoLoss
    } else if acc.partitions.iter().all(|p| p.owner == 0) {
        OutcomeClass::Catastrophic
    } else {
        OutcomeClass::LimitedLoss
    }
}

fn replay(cfg: &SimConfig, set: &CompromiseSet, best: &ScenarioOutcome) -> Result<(ScenarioOutcome, Custody), String> {
    let s = strategies(cfg).into_iter().find(|s| s.name == best.strategy).ok_or("strategy vanished")?;
    run_strategy(cfg, set, &s).map_err(err)
}

fn quiet(cfg: SimConfig) -> SimConfig {
    let t = cfg.topology.timelock_t as u64;
    SimConfig { unvault_start: Some(100_000), horizon: Some(t + 12), ..cfg }
}

// 1 ---------------------------------------------------------------------------

fn tolerance_table() -> Verdict {
    let cfg = SimConfig::default();
    let t = &cfg.topology;
    ensure!(
        t.active == Threshold::new(2, 3)
            && t.recovery == Threshold::new(2, 3)
            && t.vault == Threshold::new(2, 3)
            && t.fee == Threshold::new(2, 3)
            && (t.avt_storage_r, t.p2rw_storage_s, t.watchtower_w) == (3, 2, 2),
        "default topology is not the reference one"
    );
    let table = tolerance_oracle(&cfg).map_err(err)?;
    let (m, n) = (t.recovery.threshold, t.recovery.count);
    let (j, k) = (t.active.threshold, t.active.count);
    let (a, b) = (t.fee.threshold, t.fee.count);
    let expected = [
        ("recovery-wallet", n - m, Some(m - 1), None),
        ("active-wallet", k - j, Some(j - 1), None),
        ("fee-wallet", b - a, Some(a - 1), None),
        ("avt-storage", t.avt_storage_r - 1, None, Some(0)),
        ("p2rw-storage", t.p2rw_storage_s - 1, None, Some(0)),
        ("watchtower", t.watchtower_w - 1, None, None),
    ];
    for (name, loss, leak, theft) in expected {
        let row = table.row(name).ok_or_else(|| format!("no row {name}"))?;
        ensure!(row.loss_tolerance == loss, "{name}: loss tolerance {} != {loss}", row.loss_tolerance);
        ensure!(row.leak_tolerance == leak, "{name}: leak tolerance {:?} != {leak:?}", row.leak_tolerance);
        ensure!(row.theft_tolerance == theft, "{name}: theft tolerance {:?} != {theft:?}", row.theft_tolerance);
    }
    ensure!(table.cases() <= 1 << 12, "{} cases exceed 2^12", table.cases());
    Ok(format!("{} functionalities, {} enumerated cases", table.rows.len(), table.cases()))
}

// 2 ---------------------------------------------------------------------------

fn scenario_matrix() -> Verdict {
    let cfg = SimConfig::default();
    let rows = outcome_matrix(&cfg).map_err(err)?;
    ensure!(rows.len() == 18, "{} scenario rows", rows.len());
    let diverging: Vec<_> = rows.iter().filter(|r| !r.matches()).map(|r| format!("{}={}", r.scenario, r.class)).collect();
    ensure!(diverging.is_empty(), "diverging rows {diverging:?}");

    let l2 = scenario(ScenarioId::Limited(2), &cfg.topology);
    let best = best_play(&cfg, &l2.compromise).map_err(err)?;
    let (o, sim) = replay(&cfg, &l2.compromise, &best)?;
    let acc = sim.accounting();
    let hit: Vec<_> = acc.partitions.iter().filter(|p| p.attacker > 0).collect();
    ensure!(hit.len() == 1, "L2 touched {} partitions", hit.len());
    let vault = sim.vaults.iter().find(|v| v.partition == hit[0].partition).ok_or("partition without vault")?;
    ensure!(
        o.attacker_gain == vault.pair.vault_amount,
        "L2 gain {} != in-flight partition {}",
        o.attacker_gain,
        vault.pair.vault_amount
    );
    ensure!(o.attacker_gain <= cfg.policy.max_funds_in_flight, "L2 gain above the in-flight cap");

    let f = cfg.feerates;
    ensure!(f.owner < f.attacker + f.bribe, "default owner feerate is not below attacker priority");
    let mut c4_gains = Vec::new();
    for recovery in [None, Some(f.owner)] {
        let c = SimConfig { feerates: Feerates { recovery, ..f }, ..cfg.clone() };
        let sc = scenario(ScenarioId::Catastrophic(4), &c.topology);
        let best = best_play(&c, &sc.compromise).map_err(err)?;
        let (o, sim) = replay(&c, &sc.compromise, &best)?;
        ensure!(o.class == OutcomeClass::Catastrophic, "C4 with recovery feerate {recovery:?} is {}", o.class);
        let acc = sim.accounting();
        ensure!(acc.partitions.iter().all(|p| p.owner == 0), "C4 leaves the owner vaulted funds");
        c4_gains.push(o.loss());
    }

    let l3 = run_scenario(ScenarioId::Limited(3), &cfg).map_err(err)?;
    ensure!(l3.class == o.class, "L3 {} differs from L2 {}", l3.class, o.class);
    Ok(format!(
        "18/18 classes match; L2 gain {} = in-flight partition; C4 loss {:?}; L3 = L2 = {}",
        o.attacker_gain, c4_gains, l3.class
    ))
}

// 3 ---------------------------------------------------------------------------

fn active_spend(sim: &mut Custody, vault: usize, sequence: u32, dest: Script) -> Result<Transaction, String> {
    let v = sim.vaults[vault].clone();
    let active = parse_vault_script(&v.pair.vault_script).ok_or("vault script")?.active;
    let mut tx = Transaction::new(2, 0);
    tx.inputs.push(TxInput { outpoint: v.pair.vault_outpoint(), sequence });
    tx.outputs.push(TxOutput { amount: v.pair.vault_amount - 2_000, script: dest });
    let sigs = sim
        .fleet
        .sign_for_spec(WalletRole::Active, v.active_index, &active, &tx, 0, SighashMode::All, &v.pair.vault_script, v.pair.vault_amount)
        .map_err(err)?;
    tx.set_witness(0, path_witness(sigs, SpendPath::Active, v.pair.layered));
    Ok(tx)
}

fn mutate_outputs(r: &mut impl RngCore, tx: &mut Transaction) {
    let i = r.gen_range(0..tx.outputs.len());
    match r.gen_range(0..6) {
        0 => tx.outputs[i].amount += r.gen_range(1..1_000),
        1 => tx.outputs[i].amount = tx.outputs[i].amount.wrapping_sub(r.gen_range(1..1_000)),
        2 => {
            let old = tx.outputs[i].script.clone();
            while tx.outputs[i].script == old {
                tx.outputs[i].script = common::random_script(r);
            }
        }
        3 => tx.outputs.push(TxOutput { amount: r.gen_range(0..1_000), script: common::random_script(r) }),
        4 => tx.version ^= 1 << r.gen_range(0..8),
        _ => tx.inputs[0].sequence ^= 1 << r.gen_range(0..16),
    }
}

fn covenant_soundness() -> Verdict {
    let mut sim = Custody::launch(quiet(SimConfig::default())).map_err(err)?;
    let mut r = common::rng(3);
    let outsiders = keys(&mut r, "outsider", 4);
    let attempts = 10_000;
    let mut accepted = 0usize;
    for vi in 0..sim.vaults.len() {
        let v = sim.vaults[vi].clone();
        let (script, amount) = (v.pair.vault_script.clone(), v.pair.vault_amount);
        let branches = parse_vault_script(&script).ok_or("vault script")?;
        let t = branches.timelock;
        let (j, p) = (branches.active.threshold, branches.covenant.as_ref().ok_or("no covenant keys")?.threshold);
        let p2rw = sim.p2rw_store.fetch(&v.pair.vault_txid, Some(&v.pair.p2rw_txid())).map_err(err)?;
        let mut pool = Vec::new();
        for _ in 0..16 {
            let seq = r.gen_range(0..2 * t + 2);
            let dest = common::random_script(&mut r);
            pool.push((active_spend(&mut sim, vi, seq, dest)?, seq));
        }
        for i in 0..attempts {
            let conf = r.gen_range(0..2 * t + 3);
            let kind = r.gen_range(0..10);
            let mut sub = 0;
            let (tx, legit) = match kind {
                0 => (p2rw.clone(), true),
                1 => {
                    let mut tx = p2rw.clone();
                    for _ in 0..r.gen_range(1..3) {
                        tx.inputs.push(TxInput { outpoint: OutPoint::new(common::random_hash(&mut r), 0), sequence: 0 });
                        let n = tx.inputs.len() - 1;
                        tx.set_witness(n, vec![common::random_bytes(&mut r, 65)]);
                    }
                    (tx, true)
                }
                2 => {
                    let mut tx = p2rw.clone();
                    mutate_outputs(&mut r, &mut tx);
                    (tx, false)
                }
                3 => {
                    let (tx, seq) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    (tx, seq >= t && conf >= t)
                }
                4 => {
                    let (mut tx, _) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    let mut w = tx.witness(0).to_vec();
                    sub = r.gen_range(0..5);
                    match sub {
                        0 => *w.last_mut().expect("selector") = Vec::new(),
                        1 => {
                            w.pop();
                        }
                        2 => {
                            w.remove(0);
                        }
                        3 if j > 1 => w.swap(0, 1),
                        3 => w.insert(0, w[0].clone()),
                        _ => mutate_outputs(&mut r, &mut tx),
                    }
                    tx.set_witness(0, w);
                    (tx, false)
                }
                5 | 6 => {
                    let (mut tx, _) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    tx.inputs[0].sequence = t + r.gen_range(0..4);
                    let (n, path, sig_script) = if kind == 5 { (j, SpendPath::Active, &script) } else { (p, SpendPath::Recovery, &script) };
                    let signers: Vec<&KeyPair> = outsiders.choose_multiple(&mut r, n.min(outsiders.len())).collect();
                    let mode = if r.gen() { SighashMode::All } else { SighashMode::AllAnyoneCanPay };
                    let sigs = signers.iter().map(|k| sign_input(&tx, 0, k, mode, sig_script, amount).expect("input 0")).collect();
                    tx.set_witness(0, path_witness(sigs, path, false));
                    (tx, false)
                }
                7 => {
                    let (mut tx, _) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    let k = outsiders.choose(&mut r).expect("outsiders");
                    let mut w = tx.witness(0).to_vec();
                    let slot = r.gen_range(0..j);
                    w[slot] = sign_input(&tx, 0, k, SighashMode::All, &script, amount).expect("input 0");
                    tx.set_witness(0, w);
                    (tx, false)
                }
                8 => {
                    let (mut tx, _) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    let items = r.gen_range(0..6);
                    let w = (0..items)
                        .map(|_| match r.gen_range(0..4) {
                            0 => vec![1],
                            1 => Vec::new(),
                            2 => {
                                let mut s = vec![0u8; 65];
                                r.fill_bytes(&mut s);
                                s[64] = 1;
                                s
                            }
                            _ => common::random_bytes(&mut r, 40),
                        })
                        .collect();
                    tx.set_witness(0, w);
                    (tx, false)
                }
                _ => {
                    let (mut tx, _) = pool.choose(&mut r).cloned().ok_or("empty pool")?;
                    let mut w = p2rw.witness(0).to_vec();
                    *w.last_mut().expect("selector") = vec![1];
                    tx.set_witness(0, w);
                    (tx, false)
                }
            };
            let res = eval_script(&script, &ExecContext::new(&tx, 0, conf, amount));
            ensure!(res.is_ok() == legit, "vault {vi} attempt {i} kind {kind}.{sub} conf {conf}: {res:?}, legitimate {legit}");
            accepted += usize::from(legit);
        }
    }

    let mut boundary = Vec::new();
    for t in [1u32, 2, 6, 144] {
        let mut cfg = SimConfig { partitions: vec![COIN], ..SimConfig::default() };
        cfg.topology.timelock_t = t;
        let mut sim = Custody::launch(quiet(cfg)).map_err(err)?;
        let v = sim.vaults[0].clone();
        let payee = sim.payee.clone();
        let spend = active_spend(&mut sim, 0, t, payee)?;
        sim.chain.submit(v.pair.avt.clone(), Visibility::Public).map_err(|e| e.reason().to_string())?;
        while sim.chain.confirmations(&v.pair.vault_txid).map_err(|e| format!("{e:?}"))? < t - 1 {
            sim.chain.mine_block();
        }
        let eval = |c| eval_script(&v.pair.vault_script, &ExecContext::new(&spend, 0, c, v.pair.vault_amount)).is_ok();
        ensure!(sim.chain.check(&spend).is_err() && !eval(t - 1), "T={t}: spend accepted at T-1");
        sim.chain.mine_block();
        ensure!(sim.chain.confirmations(&v.pair.vault_txid) == Ok(t), "T={t}: confirmation count drifted");
        ensure!(sim.chain.check(&spend).is_ok() && eval(t), "T={t}: spend rejected at T");
        boundary.push(t);
    }
    Ok(format!(
        "{} vaults x {attempts} fuzzed spends, {accepted} legitimate accepts, all others rejected; T-1/T boundary holds for T in {boundary:?}",
        sim.vaults.len()
    ))
}

// 4 ---------------------------------------------------------------------------

fn non_malleability() -> Verdict {
    let mut rejected = 0;
    for i in 0..100u64 {
        let mut r = common::rng(10_000 + i);
        let mut cfg = SimConfig { seed: i, partitions: vec![r.gen_range(COIN / 100..5 * COIN)], ..SimConfig::default() };
        cfg.topology.timelock_t = r.gen_range(1..60);
        cfg.topology.vault = Threshold::new(r.gen_range(1..=3), 3);
        cfg.topology.recovery = Threshold::new(r.gen_range(1..=3), 3);
        cfg.topology.active = Threshold::new(r.gen_range(1..=3), 3);
        let mut sim = Custody::launch(quiet(cfg)).map_err(err)?;
        let v = sim.vaults[0].clone();
        let p2rw = sim.p2rw_store.fetch(&v.pair.vault_txid, Some(&v.pair.p2rw_txid())).map_err(err)?;
        let mut mutated = v.pair.avt.clone();
        let mut w = mutated.witness(0).to_vec();
        match r.gen_range(0..4) {
            0 => w.iter_mut().for_each(|item| {
                if let Some(b) = item.first_mut() {
                    *b ^= 0x80;
                }
            }),
            1 => w.reverse(),
            2 => w.push(common::random_bytes(&mut r, 70)),
            _ => w = (0..r.gen_range(0..4)).map(|_| common::random_bytes(&mut r, 70)).collect(),
        }
        if w == mutated.witness(0) {
            w.push(vec![0xff]);
        }
        mutated.set_witness(0, w);
        ensure!(compute_txid(&mutated).map_err(err)? == v.pair.vault_txid, "template {i}: witness mutation moved the txid");
        ensure!(p2rw.inputs[0].outpoint == OutPoint::new(compute_txid(&mutated).map_err(err)?, 0), "template {i}: P2RW detached");
        if sim.chain.check(&mutated).is_err() {
            rejected += 1;
        }
        sim.chain.submit(v.pair.avt.clone(), Visibility::Public).map_err(|e| e.reason().to_string())?;
        sim.chain.mine_block();
        ensure!(sim.chain.check(&p2rw).is_ok(), "template {i}: stored P2RW rejected: {:?}", sim.chain.check(&p2rw).err());
        let txid = sim.chain.submit(p2rw, Visibility::Public).map_err(|e| e.reason().to_string())?;
        sim.chain.mine_block();
        ensure!(sim.chain.is_confirmed(&txid), "template {i}: P2RW not mined");
    }
    Ok(format!("100 templates: txid stable under witness mutation, P2RW valid and mined; {rejected} mutated AVTs rejected by chain"))
}

// 5 ---------------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn activation_threshold() -> Verdict {
    let cfg = SimConfig { partitions: vec![COIN], ..SimConfig::default() };
    let topo = &cfg.topology;
    let (p, t) = (topo.vault.threshold, topo.vault.count);
    ensure!((p, t) == (2, 3), "vault wallet is not 2-of-3");
    let need = t - p + 1;
    ensure!(topo.required_deletions() == need, "required deletions {} != t-p+1", topo.required_deletions());

    let mut a = Activation::new(need);
    a.deposit_confirmed = true;
    a.record_deletion("vault/0");
    a.record_deletion("vault/0");
    ensure!(a.state() == ActivationState::Pending, "one device counted twice");
    a.record_deletion("vault/1");
    ensure!(a.state() == ActivationState::Active, "two deletions and a confirmed deposit stay pending");
    a.deposit_confirmed = false;
    ensure!(a.state() == ActivationState::Pending, "unconfirmed deposit activated");

    for (withheld, expect) in [(t - need, true), (t - need + 1, false)] {
        let mut sim = Custody::new(cfg.clone()).map_err(err)?;
        let amount = sim.funding_needed(COIN, 1);
        sim.run_external_payment(amount, false);
        let (ids, trace) = sim.run_vaulting(&[COIN], &VaultingOptions { withheld_notifications: withheld, ..Default::default() });
        ensure!(!ids.is_empty() == expect, "{} deletion notices: vaulting {:?}", t - withheld, trace.status);
        if expect {
            let pending = sim.vaults[ids[0]].pair.activation.clone();
            ensure!(pending.deletions.len() == need && !pending.is_active(), "active before the deposit confirmed: {pending:?}");
            sim.mine();
            let act = &sim.vaults[ids[0]].pair.activation;
            ensure!(act.is_active(), "confirmed deposit left activation pending: {act:?}");
        }
    }

    let members = Custody::new(cfg.clone()).map_err(err)?.fleet.members(WalletRole::VaultWallet);
    let mut cases = 0;
    for order in permutations(t) {
        for before in 0..=t {
            let mut sim = Custody::new(quiet(cfg.clone())).map_err(err)?;
            for &i in &order[..before] {
                sim.fleet.compromise(&members[i]).map_err(err)?;
            }
            sim.vault_all();
            for &i in &order[before..] {
                sim.fleet.compromise(&members[i]).map_err(err)?;
            }
            ensure!(sim.vaults.len() == 1, "vaulting failed for order {order:?}");
            let covenant = parse_vault_script(&sim.vaults[0].pair.vault_script).ok_or("vault script")?.covenant.ok_or("no covenant keys")?;
            let leaked = sim.fleet.adversary.keys_for(&covenant).len();
            ensure!(leaked == before, "order {order:?} cut {before}: adversary holds {leaked} keys");
            sim.run(&mut Attacker::new(Plan { sweep: true, ..Plan::default() }));
            let gain = sim.accounting().attacker;
            ensure!((gain > 0) == (leaked >= p), "order {order:?} cut {before}: {leaked} keys, gain {gain}");
            cases += 1;
        }
    }
    Ok(format!("{need} deletions + confirmed deposit activate; theft iff leaked keys >= {p} over {cases} orderings"))
}

// 6 ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct RaceCase {
    w: usize,
    dead: Vec<usize>,
    channels: Vec<(usize, usize)>,
    variant: Variant,
    timelock: u32,
    attacker: u64,
}

fn race_cases() -> Vec<RaceCase> {
    let mut cases = Vec::new();
    for w in 1..=3usize {
        for dead_mask in 0..(1u32 << w) - 1 {
            let dead: Vec<usize> = (0..w).filter(|i| dead_mask & (1 << i) != 0).collect();
            let live: Vec<usize> = (0..w).filter(|i| !dead.contains(i)).collect();
            for pattern in 0..3usize.pow(live.len() as u32) {
                let channels: Vec<(usize, usize)> = live
                    .iter()
                    .enumerate()
                    .filter_map(|(pos, &node)| match pattern / 3usize.pow(pos as u32) % 3 {
                        0 => None,
                        c => Some((node, c - 1)),
                    })
                    .collect();
                for variant in [Variant::Responder, Variant::Notification] {
                    for timelock in [2u32, 6] {
                        for attacker in [5u64, 40] {
                            cases.push(RaceCase { w, dead: dead.clone(), channels: channels.clone(), variant, timelock, attacker });
                        }
                    }
                }
            }
        }
    }
    cases
}

fn run_race(case: &RaceCase) -> Result<(), String> {
    let mut cfg = SimConfig { partitions: vec![COIN], dead_watchtowers: case.dead.clone(), watchtower_variant: case.variant, ..SimConfig::default() };
    cfg.topology.watchtower_w = case.w;
    cfg.topology.timelock_t = case.timelock;
    cfg.feerates.attacker = case.attacker;
    ensure!(cfg.feerates.recovery() > cfg.feerates.attacker, "{case:?}: recovery feerate not above attacker");
    let mut sim = Custody::launch(quiet(cfg)).map_err(err)?;
    for &(node, channel) in &case.channels {
        sim.towers[node].channels[channel].compromised = true;
    }
    let v = sim.vaults[0].clone();
    sim.chain.submit(v.pair.avt.clone(), Visibility::Public).map_err(|e| e.reason().to_string())?;
    sim.run(&mut Honest);
    let spender = sim.chain.confirmed_spender_of(&v.pair.vault_outpoint()).ok_or_else(|| format!("{case:?}: vault output unspent"))?;
    let spend = sim.chain.confirmed_tx(&spender).ok_or("spender not confirmed")?;
    let avt_height = sim.chain.confirmed_tx(&v.pair.vault_txid).ok_or("AVT not confirmed")?.height;
    ensure!(sim.classify(&spend.tx.outputs[0].script) == Holding::Recovery, "{case:?}: vault output not pushed to recovery");
    ensure!(
        spend.height - avt_height < case.timelock as u64,
        "{case:?}: P2RW mined {} blocks after the AVT",
        spend.height - avt_height
    );
    Ok(())
}

fn watchtower_race() -> Verdict {
    let cases = race_cases();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get());
    let failures: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(cases.len().div_ceil(threads))
            .map(|chunk| s.spawn(move || chunk.iter().filter_map(|c| run_race(c).err()).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("race thread")).collect()
    });
    ensure!(failures.is_empty(), "{} of {} cases failed, first: {}", failures.len(), cases.len(), failures[0]);

    let base = SimConfig::default();
    let w = base.topology.watchtower_w;
    let reference = outcome_matrix(&base).map_err(err)?;
    let mut subsets = 0;
    for mask in 0..1u32 << w {
        if mask.count_ones() as usize != w - 1 {
            continue;
        }
        let dead: Vec<usize> = (0..w).filter(|i| mask & (1 << i) != 0).collect();
        let rows = outcome_matrix(&SimConfig { dead_watchtowers: dead.clone(), ..base.clone() }).map_err(err)?;
        for (a, b) in reference.iter().zip(&rows) {
            ensure!(a.class == b.class, "{} with dead nodes {dead:?}: {} -> {}", a.scenario, a.class, b.class);
        }
        subsets += 1;
    }
    Ok(format!("{} race configurations recover before T; {subsets} dead-node subsets of size W-1 keep all 18 classes", cases.len()))
}

// 7 ---------------------------------------------------------------------------

fn lifecycle(mechanism: Mechanism, recover: bool) -> Result<(OutcomeClass, Vec<Vec<Holding>>, Vec<u64>), String> {
    let mut cfg = SimConfig { mechanism, partitions: vec![COIN, 2 * COIN, 3 * COIN], ..SimConfig::default() };
    if recover {
        cfg = quiet(cfg);
    }
    let mut sim = Custody::launch(cfg).map_err(err)?;
    if recover {
        let avt = sim.vaults[1].pair.avt.clone();
        sim.chain.submit(avt, Visibility::Public).map_err(|e| e.reason().to_string())?;
    }
    sim.run(&mut Honest);
    let want = if recover { VaultState::Recovered } else { VaultState::Paid };
    ensure!(sim.vaults.iter().all(|v| v.state == want), "{mechanism:?}: {}", sim.report());
    let acc = sim.accounting();
    ensure!(acc.balanced(), "{mechanism:?}: accounting unbalanced");
    let holdings = acc.partitions.iter().map(|p| p.holdings.keys().copied().collect()).collect();
    let owner = acc.partitions.iter().map(|p| p.owner).collect();
    Ok((class_of(&acc), holdings, owner))
}

fn ctv_equivalence() -> Verdict {
    let mut max_gap = 0u64;
    for recover in [false, true] {
        let (ca, ha, oa) = lifecycle(Mechanism::DeletedKey, recover)?;
        let (cb, hb, ob) = lifecycle(Mechanism::Ctv, recover)?;
        ensure!(ca == cb, "classes differ: {ca} vs {cb}");
        ensure!(ha == hb, "fund distribution differs: {ha:?} vs {hb:?}");
        max_gap = max_gap.max(oa.iter().zip(&ob).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0));
    }

    let mut sim = Custody::launch(quiet(SimConfig { mechanism: Mechanism::Ctv, partitions: vec![COIN], ..SimConfig::default() })).map_err(err)?;
    let v = sim.vaults[0].clone();
    let plan = v.ctv.clone().ok_or("no template plan")?;
    let mut r = common::rng(7);
    let fee_keys = keys(&mut r, "fee", 2);
    let fee_spec = MultisigSpec::new(2, fee_keys.iter().map(|k| k.public).collect()).map_err(err)?;
    let fee_amount = 100_000;
    let fee_out = sim.chain.fund(fee_spec.script(), fee_amount);
    let mut x = plan.p2rw_fee_tx(v.pair.vault_txid);
    append_fee_input(&mut x, fee_out, &fee_spec, fee_amount, &fee_keys.iter().collect::<Vec<_>>()).map_err(err)?;
    let vault_script = plan.vault_script().clone();
    let eval = |tx: &Transaction| eval_script(&vault_script, &ExecContext::new(tx, 0, 0, v.pair.vault_amount)).is_ok();
    ensure!(eval(&x), "fee variant with appended fee input rejected");
    let mut plain = plan.p2rw_tx(v.pair.vault_txid);
    ensure!(eval(&plain), "plain template rejected");
    plain.inputs.push(TxInput { outpoint: fee_out, sequence: 0 });
    ensure!(!eval(&plain), "plain template accepted an extra input");
    let mut mutations = 0;
    for i in 0..x.outputs.len() {
        for m in 0..3 {
            let mut y = x.clone();
            match m {
                0 => y.outputs[i].amount += 1,
                1 => y.outputs[i].amount ^= 1 << 20,
                _ => y.outputs[i].script = Script::new(vec![Op::Num(i as i64 + 2)]),
            }
            ensure!(!eval(&y), "output {i} mutation {m} accepted");
            mutations += 1;
        }
    }
    let mut y = x.clone();
    y.outputs.push(TxOutput { amount: 1, script: Script::new(vec![Op::Num(1)]) });
    ensure!(!eval(&y), "extra output accepted");
    let mut y = x.clone();
    y.outputs.pop();
    ensure!(!eval(&y), "dropped output accepted");
    mutations += 2;

    sim.chain.submit(v.pair.avt.clone(), Visibility::Public).map_err(|e| e.reason().to_string())?;
    sim.chain.mine_block();
    let txid = sim.chain.submit(x, Visibility::Public).map_err(|e| e.reason().to_string())?;
    sim.chain.mine_block();
    ensure!(sim.chain.is_confirmed(&txid), "fee variant not mined");

    for i in 0..1_000 {
        let tx = common::random_tx(&mut r);
        let idx = r.gen_range(0..tx.inputs.len());
        ensure!(ctv_hash(&tx, idx).0 == common::reference_ctv_hash(&tx, idx as u32), "hash mismatch on random tx {i}");
    }
    Ok(format!(
        "same class and holdings for honest and recovery lifecycles (largest fee-only gap {max_gap} sat); fee variant accepted and mined, {mutations} output mutations rejected; 1000 template hashes match the reference"
    ))
}

// 8 ---------------------------------------------------------------------------

fn revaulting() -> Verdict {
    let layered = SimConfig { revault_layers: 2, partitions: vec![COIN, 2 * COIN], ..SimConfig::default() };

    let mut sim = Custody::launch(layered.clone()).map_err(err)?;
    ensure!(sim.vaults.iter().all(|v| v.pair.layered && !v.layer2.is_empty()), "layer two missing");
    sim.run(&mut Honest);
    ensure!(sim.vaults.iter().all(|v| v.state == VaultState::Paid), "timelocked path: {}", sim.report());

    let mut sim = Custody::launch(quiet(layered.clone())).map_err(err)?;
    let v = sim.vaults[0].clone();
    let p2rw = sim.p2rw_store.fetch(&v.pair.vault_txid, Some(&v.pair.p2rw_txid())).map_err(err)?;
    sim.chain.submit(v.pair.avt.clone(), Visibility::Public).map_err(|e| e.reason().to_string())?;
    sim.chain.mine_block();
    let txid = sim.chain.submit(p2rw, Visibility::Public).map_err(|e| e.reason().to_string())?;
    sim.chain.mine_block();
    ensure!(sim.chain.is_confirmed(&txid), "layer-one P2RW not mined");
    let spent = sim.chain.confirmed_tx(&txid).ok_or("P2RW")?;
    ensure!(sim.classify(&spent.tx.outputs[0].script) == Holding::Recovery, "P2RW does not pay the recovery wallet");

    let mut sim = Custody::new(quiet(layered.clone())).map_err(err)?;
    sim.vault_all();
    let recovery_before = sim.fleet.accesses_to(WalletRole::Recovery);
    let holder = sim.avt_store.holder_ids()[0].clone();
    for tx in sim.avt_store.compromise(&holder).map_err(err)? {
        sim.fleet.adversary.learn_tx(tx);
    }
    sim.run(&mut Attacker::new(Plan { broadcast_avts: Some(Visibility::Public), ..Plan::default() }));
    ensure!(sim.vaults.iter().all(|v| v.state == VaultState::Revaulted), "re-vault path: {}", sim.report());
    let acc = sim.accounting();
    ensure!(class_of(&acc) == OutcomeClass::NoLoss, "AVT flood costs the owner");
    ensure!(sim.fleet.accesses_to(WalletRole::Recovery) == recovery_before, "recovery devices were accessed");

    let set = CompromiseSet { avt_storage: true, ..Default::default() };
    let best = best_play(&layered, &set).map_err(err)?;
    ensure!(best.class == OutcomeClass::NoLoss, "best play against layer-one AVT storage: {} via {}", best.class, best.strategy);
    Ok("timelocked, P2RW and re-vault paths all succeed; AVT-storage compromise ends NoLoss with no recovery-device access".into())
}

// 9 ---------------------------------------------------------------------------

fn conservation_and_determinism() -> Verdict {
    let base = SimConfig::default();
    let mut runs = 0;
    for id in ScenarioId::all() {
        let sc = scenario(id, &base.topology);
        let cfg = SimConfig { forced_full_recovery_at: sc.forced_recovery_at, ..base.clone() };
        let caps = sc.compromise.capabilities(&cfg);
        for s in strategies(&cfg).into_iter().filter(|s| s.requires.is_subset(&caps)) {
            let (o, sim) = run_strategy(&cfg, &sc.compromise, &s).map_err(err)?;
            ensure!(o.balanced() && sim.accounting().balanced(), "{id}/{}: owner+attacker+frozen+fees != initial", s.name);
            ensure!(sim.chain.check_conservation(), "{id}/{}: chain conservation broken", s.name);
            ensure!(sim.chain.audit_timelocks().is_empty(), "{id}/{}: timelock violation", s.name);
            runs += 1;
        }
    }
    for cfg in [
        SimConfig { mechanism: Mechanism::Ctv, ..base.clone() },
        SimConfig { revault_layers: 2, ..base.clone() },
    ] {
        let mut sim = Custody::launch(cfg).map_err(err)?;
        sim.run(&mut Honest);
        ensure!(sim.accounting().balanced() && sim.chain.check_conservation(), "honest run unbalanced");
        runs += 1;
    }
    let mut reports = BTreeMap::new();
    for id in ScenarioId::all() {
        let a = run_scenario(id, &base).map_err(err)?;
        let b = run_scenario(id, &base).map_err(err)?;
        ensure!(a.narrative == b.narrative && a == b, "{id}: reports differ between identical runs");
        reports.insert(id.to_string(), a.narrative.len());
    }
    Ok(format!("{runs} runs conserve value; {} scenario reports byte-identical on rerun", reports.len()))
}

// 10 --------------------------------------------------------------------------

fn health_check() -> Verdict {
    let mut sim = Custody::launch(quiet(SimConfig::default())).map_err(err)?;
    let before = sim.chain.clone();
    let report = sim.run_health_check();
    ensure!(report.all_ok(), "clean system flagged: {:?}", report.failures());
    let reserve: Vec<_> = report.entries.iter().filter(|e| e.detail.starts_with("proof of reserves")).collect();
    let devices = [WalletRole::Active, WalletRole::Recovery, WalletRole::Fee].iter().map(|r| sim.fleet.members(*r).len()).sum::<usize>();
    ensure!(reserve.len() == devices, "{} reserve proofs for {devices} devices", reserve.len());
    ensure!(reserve.iter().all(|e| e.detail.contains("verifies")), "a reserve proof does not verify");
    ensure!(
        report.reserve_rejections.len() == devices && report.reserve_rejections.iter().all(|r| r.ends_with("missing-input")),
        "reserve proofs not rejected: {:?}",
        report.reserve_rejections
    );

    let mut r = common::rng(10);
    let mut flips = 0;
    for holder in sim.avt_store.holder_ids() {
        let items: Vec<_> = sim.avt_store.holder(&holder).ok_or("holder")?.items().map(|(k, v)| (*k, v.len())).collect();
        for (key, len) in items {
            let bit = r.gen_range(0..len * 8);
            sim.avt_store.corrupt(&holder, &key, bit).map_err(err)?;
            let report = sim.run_health_check();
            let failures = report.failures();
            ensure!(
                failures.len() == 1 && failures[0].component.ends_with(&holder) && failures[0].detail.contains(&key.short()),
                "bit {bit} of {key} at {holder}: {failures:?}"
            );
            sim.avt_store.corrupt(&holder, &key, bit).map_err(err)?;
            flips += 1;
        }
    }
    let report = sim.run_health_check();
    ensure!(report.all_ok() && report.chain_unchanged, "restored system not clean");
    ensure!(sim.chain == before, "health checks changed chain state");
    Ok(format!("{} reserve proofs verify and are rejected; {flips} single-bit flips detected; chain unchanged", reserve.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("tolerance table", tolerance_table),
        ("scenario matrix", scenario_matrix),
        ("covenant soundness", covenant_soundness),
        ("non-malleability", non_malleability),
        ("activation threshold", activation_threshold),
        ("watchtower race", watchtower_race),
        ("template-hash equivalence", ctv_equivalence),
        ("re-vaulting", revaulting),
        ("conservation and determinism", conservation_and_determinism),
        ("health check", health_check),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let started = Instant::now();
    let results: Vec<(Verdict, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                let f = *f;
                s.spawn(move || {
                    let t = Instant::now();
                    let v = std::panic::catch_unwind(f).unwrap_or_else(|p| {
                        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
                    });
                    (v, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion thread")).collect()
    });
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for (i, ((name, _), (verdict, secs))) in criteria.iter().zip(&results).enumerate() {
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "criterion {:>2} {tag} [{secs:5.1}s] {name}: {detail}", i + 1);
    }
    let _ = writeln!(out, "acceptance: {}/{} passed in {:.1}s", criteria.len() - failed, criteria.len(), started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
