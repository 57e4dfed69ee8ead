use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use vaultlab::fleet::WalletTopology;
use vaultlab::threat::{CompromiseEvent, CompromiseSet, OutcomeClass};
use vaultlab_cli::config::{BUNDLED, SCHEMA};
use vaultlab_cli::run::{execute, OutcomeRecord};
use vaultlab_cli::ScenarioConfig;

fn vaultlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaultlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("VAULTLAB_OUT")
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn outcome(dir: &Path) -> OutcomeRecord {
    serde_json::from_slice(&read(dir, "outcome.json")).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_l2_is_limited_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = vaultlab(&["run", "L2-active-compromise"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = outcome(dir.path());
    assert_eq!(r.class, OutcomeClass::LimitedLoss);
    assert!(r.balanced);
    assert!(!read(dir.path(), "trace.log").is_empty());
    assert!(!read(dir.path(), "events.log").is_empty());
}

#[test]
fn same_seed_gives_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = vaultlab(&["run", "L2-active-compromise", "--seed", "99"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["trace.log", "outcome.json", "events.log"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(vaultlab(&["run", "L2-active-compromise", "--seed", "100"], c.path()).status.success());
    assert_ne!(read(a.path(), "events.log"), read(c.path(), "events.log"), "seed must reach the run");
}

#[test]
fn ctv_matches_deleted_key_on_honest_lifecycle() {
    let dk = tempfile::tempdir().unwrap();
    let ctv = tempfile::tempdir().unwrap();
    assert!(vaultlab(&["run", "honest-vault-unvault", "--mechanism", "deleted-key"], dk.path()).status.success());
    assert!(vaultlab(&["run", "honest-vault-unvault", "--mechanism", "ctv"], ctv.path()).status.success());
    let (a, b) = (outcome(dk.path()), outcome(ctv.path()));
    assert_eq!(a.class, b.class);
    assert_eq!(a.class, OutcomeClass::NoLoss);
    assert_eq!(a.initial - a.fees, a.owner_retained);
    assert_eq!(b.initial - b.fees, b.owner_retained);
    let kinds = |r: &OutcomeRecord| r.partitions.iter().map(|p| p.keys().copied().collect::<BTreeSet<_>>()).collect::<Vec<_>>();
    assert_eq!(kinds(&a), kinds(&b));
}

#[test]
fn config_round_trips() {
    let mut configs: Vec<ScenarioConfig> = BUNDLED.iter().map(|(_, t)| ScenarioConfig::parse(t).unwrap()).collect();
    let mut scheduled = ScenarioConfig { name: "scheduled".into(), ..Default::default() };
    scheduled.compromise_schedule = vec![
        CompromiseEvent { event_index: 0, delta: CompromiseSet { watchtower_nodes: 1, ..Default::default() } },
        CompromiseEvent { event_index: 12, delta: CompromiseSet { active_keys: 2, channels: ["watchtower/0/oob".to_string()].into(), ..Default::default() } },
    ];
    scheduled.feerates.recovery = Some(77);
    configs.push(scheduled);
    configs.push(ScenarioConfig::from_sim("minimal", &vaultlab::orchestrator::SimConfig { topology: WalletTopology::minimal(3), ..Default::default() }));
    for cfg in configs {
        let once = cfg.to_json();
        let back = ScenarioConfig::parse(&once).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), once);
    }
}

#[test]
fn schedule_at_index_zero_equals_named_scenario() {
    let named = ScenarioConfig::parse(vaultlab_cli::config::bundled("L2-active-compromise").unwrap()).unwrap();
    let mut explicit = ScenarioConfig { scenario: None, expect: None, ..named.clone() };
    explicit.compromise_schedule =
        vec![CompromiseEvent { event_index: 0, delta: CompromiseSet { active_keys: named.topology.active.threshold, ..Default::default() } }];
    let (a, _, ea) = execute(&named).unwrap();
    let (b, _, eb) = execute(&explicit).unwrap();
    assert_eq!((a.class, a.attacker_gain, a.owner_retained), (b.class, b.attacker_gain, b.owner_retained));
    assert_eq!(ea, eb);
}

#[test]
fn late_compromise_is_applied_mid_run() {
    let mut cfg = ScenarioConfig { schema: SCHEMA.into(), name: "late".into(), ..Default::default() };
    let start = cfg.sim_config().unvault_start();
    cfg.compromise_schedule =
        vec![CompromiseEvent { event_index: start + 1, delta: CompromiseSet { active_keys: cfg.topology.active.threshold, ..Default::default() } }];
    let (late, ..) = execute(&cfg).unwrap();
    assert!(late.balanced);
    let (honest, ..) = execute(&ScenarioConfig { compromise_schedule: Vec::new(), ..cfg.clone() }).unwrap();
    assert_eq!(honest.class, OutcomeClass::NoLoss);
    assert_ne!(late.strategy, "passive", "active-key strategies become available");
    assert!(late.attacker_gain <= cfg.funds.iter().copied().max().unwrap());
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"schema":"vaultlab.scenario/1","topology":{"active":{"threshold":4,"count":3}}}"#, "topology.active"),
        (r#"{"schema":"vaultlab.scenario/1","funds":[]}"#, "funds"),
        (r#"{"schema":"vaultlab.scenario/1","feerates":{"owner":"high"}}"#, "feerates.owner"),
        (r#"{"schema":"vaultlab.scenario/1","watchtower_varient":"responder"}"#, "watchtower_varient"),
        (r#"{"schema":"vaultlab.scenario/2"}"#, "schema"),
        (r#"{"schema":"vaultlab.scenario/1","scenario":"L11"}"#, "scenario"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.json"));
        std::fs::write(&path, text).unwrap();
        let o = vaultlab(&["run", path.to_str().unwrap()], &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(stderr(&o).contains(&format!("`{field}`")), "{text}: {}", stderr(&o));
    }
}

#[test]
fn expectation_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let golden = dir.path().join("golden.json");
    std::fs::write(&golden, r#"{"class":"NoLoss"}"#).unwrap();
    let o = vaultlab(&["run", "L2-active-compromise", "--expect", golden.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("class expected NoLoss, got LimitedLoss"));

    // A previous outcome.json works as a golden file.
    let first = dir.path().join("first");
    assert!(vaultlab(&["run", "L2-active-compromise"], &first).status.success());
    let again = vaultlab(&["run", "L2-active-compromise", "--expect", first.join("outcome.json").to_str().unwrap()], &dir.path().join("b"));
    assert!(again.status.success(), "{}", stderr(&again));
    let reseeded = vaultlab(&["run", "honest-vault-unvault", "--expect", first.join("outcome.json").to_str().unwrap()], &dir.path().join("c"));
    assert_eq!(reseeded.status.code(), Some(2));
}

#[test]
fn vaultlab_out_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from-env");
    let flag_out = dir.path().join("from-flag");
    let o = Command::new(env!("CARGO_BIN_EXE_vaultlab"))
        .args(["run", "honest-vault-unvault", "--out"])
        .arg(&flag_out)
        .env("VAULTLAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("outcome.json").exists());
    assert!(!flag_out.exists());
}

#[derive(serde::Deserialize)]
struct Cell {
    point: Option<String>,
    rows: Vec<vaultlab::threat::MatrixRow>,
    devices: Vec<vaultlab::threat::DeviceCell>,
}

fn matrix(config: &ScenarioConfig, extra: &[&str]) -> (Output, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, config.to_json()).unwrap();
    let mut args = vec!["matrix", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = dir.path().join("out");
    let o = vaultlab(&args, &out);
    (o, dir)
}

fn cells(dir: &tempfile::TempDir) -> Vec<Cell> {
    serde_json::from_slice(&read(&dir.path().join("out"), "matrix.json")).unwrap()
}

#[test]
fn default_matrix_matches_every_scenario() {
    let (o, dir) = matrix(&ScenarioConfig::default(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells = cells(&dir);
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].rows.len(), 18);
    assert!(cells[0].rows.iter().all(|r| r.matches()));
    let out = dir.path().join("out");
    assert!(String::from_utf8(read(&out, "tolerance.txt")).unwrap().lines().count() > 8);
    assert!(String::from_utf8(read(&out, "matrix.txt")).unwrap().contains("divergences 0"));
}

#[test]
fn sweeping_k_leaves_l2_loss_unchanged() {
    let cfg = ScenarioConfig::default();
    let (o, dir) = matrix(&cfg, &["--sweep", "k=2..4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells = cells(&dir);
    assert_eq!(cells.iter().map(|c| c.point.clone().unwrap()).collect::<Vec<_>>(), ["k=2", "k=3", "k=4"]);
    let gains: Vec<u64> = cells.iter().map(|c| c.rows.iter().find(|r| r.scenario == "L2").unwrap().attacker_gain).collect();
    assert!(gains.windows(2).all(|w| w[0] == w[1]), "{gains:?}");
    let in_flight = cfg.funds.iter().copied().max().unwrap().min(cfg.policy.max_funds_in_flight);
    assert!(gains[0] > 0 && gains[0] <= in_flight, "{gains:?}");
}

#[test]
fn one_of_one_topology_is_mostly_catastrophic() {
    let catastrophic = |c: &Cell| {
        c.rows.iter().filter(|r| r.class == OutcomeClass::Catastrophic).count()
            + c.devices.iter().filter(|d| d.class == OutcomeClass::Catastrophic).count()
    };
    let base = vaultlab::orchestrator::SimConfig { topology: WalletTopology::minimal(6), ..Default::default() };
    let (o, dir) = matrix(&ScenarioConfig::from_sim("minimal", &base), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bare = &cells(&dir)[0];
    let (d, default_dir) = matrix(&ScenarioConfig::default(), &[]);
    assert!(d.status.success());
    let redundant = &cells(&default_dir)[0];
    assert!(redundant.devices.iter().all(|c| c.class == OutcomeClass::NoLoss));
    assert!(bare.devices.iter().any(|c| c.devices.len() == 1 && c.class == OutcomeClass::Catastrophic));
    assert!(catastrophic(bare) > catastrophic(redundant) + 4, "{} vs {}", catastrophic(bare), catastrophic(redundant));
}

#[test]
fn matrix_bound_exceeded_exits_1() {
    let mut cfg = ScenarioConfig::default();
    cfg.topology.active.count = 6;
    let (o, _dir) = matrix(&cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bound"), "{}", stderr(&o));
    let (o, _dir) = matrix(&ScenarioConfig::default(), &["--sweep", "t=2..5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
