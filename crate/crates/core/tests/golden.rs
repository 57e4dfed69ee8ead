mod common;

use vaultlab::orchestrator::{Custody, Honest, SimConfig, COIN};
use vaultlab::txkit::{compute_txid, golden_line, parse_golden_line};

const VECTORS: &str = include_str!("data/golden_vectors.txt");

#[test]
fn vectors_parse_and_hash() {
    let mut n = 0;
    for line in VECTORS.lines().filter(|l| !l.trim().is_empty()) {
        let (tx, txid) = parse_golden_line(line).unwrap();
        assert_eq!(compute_txid(&tx).unwrap(), txid);
        assert_eq!(common::reference_txid(&tx), txid.0);
        assert_eq!(golden_line(&tx).unwrap(), line);
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn honest_run_reproduces_vectors() {
    let mut sim = Custody::launch(SimConfig { partitions: vec![COIN, 2 * COIN], ..SimConfig::default() }).unwrap();
    sim.run(&mut Honest);
    let mut lines = Vec::new();
    for b in sim.chain.blocks() {
        for txid in &b.txids {
            lines.push(golden_line(&sim.chain.confirmed_tx(txid).unwrap().tx).unwrap());
        }
    }
    lines.extend(sim.vaults.iter().map(|v| golden_line(&v.pair.p2rw).unwrap()));
    assert_eq!(lines, VECTORS.lines().collect::<Vec<_>>());
}

#[test]
fn malformed_lines_are_rejected() {
    let line = VECTORS.lines().next().unwrap();
    let (hex, txid) = line.split_once(", ").unwrap();
    assert!(parse_golden_line(&format!("{}, {txid}", &hex[..hex.len() - 2])).is_err());
    assert!(parse_golden_line(hex).is_err());
    let (tx, wrong) = parse_golden_line(&format!("{hex}, {}", "00".repeat(32))).unwrap();
    assert_ne!(compute_txid(&tx).unwrap(), wrong);
}
