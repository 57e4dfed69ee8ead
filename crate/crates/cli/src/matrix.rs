//! `vaultlab matrix`: every numbered scenario plus the tolerance table,
//! optionally swept over one topology parameter.

use std::fmt::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vaultlab::orchestrator::SimConfig;
use vaultlab::threat::{device_matrix, outcome_matrix, render_devices, render_matrix, tolerance_oracle, DeviceCell, MatrixRow, ToleranceTable};

use crate::{write, CliError};

/// `field=lo..hi`, inclusive. Fields use the topology's single-letter names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sweep {
    pub field: String,
    pub lo: u64,
    pub hi: u64,
}

pub const SWEEP_FIELDS: &[&str] = &["j", "k", "m", "n", "p", "t", "a", "b", "R", "S", "W", "T"];

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (field, range) = s.split_once('=').ok_or("expected field=lo..hi")?;
        if !SWEEP_FIELDS.contains(&field) {
            return Err(format!("unknown sweep field `{field}`, expected one of {}", SWEEP_FIELDS.join(",")));
        }
        let (lo, hi) = range.split_once("..").ok_or("expected lo..hi")?;
        let lo: u64 = lo.parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
        let hi: u64 = hi.parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
        if lo > hi {
            return Err(format!("empty range {lo}..{hi}"));
        }
        Ok(Sweep { field: field.into(), lo, hi })
    }
}

impl Sweep {
    pub fn apply(&self, cfg: &SimConfig, value: u64) -> SimConfig {
        let mut c = cfg.clone();
        let t = &mut c.topology;
        let v = value as usize;
        match self.field.as_str() {
            "j" => t.active.threshold = v,
            "k" => t.active.count = v,
            "m" => t.recovery.threshold = v,
            "n" => t.recovery.count = v,
            "p" => t.vault.threshold = v,
            "t" => t.vault.count = v,
            "a" => t.fee.threshold = v,
            "b" => t.fee.count = v,
            "R" => t.avt_storage_r = v,
            "S" => t.p2rw_storage_s = v,
            "W" => t.watchtower_w = v,
            "T" => t.timelock_t = value as u32,
            other => unreachable!("sweep field {other}"),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCell {
    /// `field=value` when sweeping.
    pub point: Option<String>,
    pub rows: Vec<MatrixRow>,
    /// Single-device and paired compromises.
    pub devices: Vec<DeviceCell>,
    pub tolerance: ToleranceTable,
}

impl MatrixCell {
    pub fn divergences(&self) -> usize {
        self.rows.iter().filter(|r| !r.matches()).count()
    }
}

fn cell(cfg: &SimConfig, point: Option<String>) -> Result<MatrixCell, CliError> {
    let field_prefix = |field: String| match &point {
        Some(p) => format!("{field} (sweep {p})"),
        None => field,
    };
    cfg.validate().map_err(|e| match e {
        vaultlab::orchestrator::SimError::Config { field, reason } => CliError::Config { field: field_prefix(field), reason },
        other => CliError::Config { field: ".".into(), reason: other.to_string() },
    })?;
    let tolerance = tolerance_oracle(cfg)?;
    let rows = outcome_matrix(cfg)?;
    let devices = device_matrix(cfg)?;
    Ok(MatrixCell { point, rows, devices, tolerance })
}

pub fn build(cfg: &SimConfig, sweep: Option<&Sweep>) -> Result<Vec<MatrixCell>, CliError> {
    match sweep {
        None => Ok(vec![cell(cfg, None)?]),
        Some(s) => (s.lo..=s.hi).map(|v| cell(&s.apply(cfg, v), Some(format!("{}={v}", s.field)))).collect(),
    }
}

/// Writes `matrix.txt`, `tolerance.txt` and `matrix.json`.
pub fn cmd_matrix(cfg: &SimConfig, sweep: Option<&Sweep>, out: &Path) -> Result<Vec<MatrixCell>, CliError> {
    let cells = build(cfg, sweep)?;
    let mut matrix = String::new();
    let mut tolerance = String::new();
    for c in &cells {
        if let Some(p) = &c.point {
            let _ = writeln!(matrix, "## {p}");
            let _ = writeln!(tolerance, "## {p}");
        }
        matrix.push_str(&render_matrix(&c.rows));
        let _ = writeln!(matrix, "divergences {}\n", c.divergences());
        matrix.push_str(&render_devices(&c.devices));
        matrix.push('\n');
        tolerance.push_str(&c.tolerance.render());
    }
    write(out, "matrix.txt", &matrix)?;
    write(out, "tolerance.txt", &tolerance)?;
    let mut json = serde_json::to_string_pretty(&cells).expect("matrix serializes");
    json.push('\n');
    write(out, "matrix.json", &json)?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parses() {
        assert_eq!("k=2..4".parse::<Sweep>(), Ok(Sweep { field: "k".into(), lo: 2, hi: 4 }));
        assert!("q=1..2".parse::<Sweep>().is_err());
        assert!("k=4..2".parse::<Sweep>().is_err());
        assert!("k=2".parse::<Sweep>().is_err());
    }

    #[test]
    fn sweep_sets_the_named_parameter() {
        let base = SimConfig::default();
        let s: Sweep = "T=9..9".parse().unwrap();
        assert_eq!(s.apply(&base, 9).topology.timelock_t, 9);
        let s: Sweep = "R=2..2".parse().unwrap();
        assert_eq!(s.apply(&base, 2).topology.avt_storage_r, 2);
    }
}
