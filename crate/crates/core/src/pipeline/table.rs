use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::csv_reader;

/// Allowed gap between a reported distance and `lp / lp_vanilla`.
pub const TABLE_TOLERANCE: f64 = 1e-3;

/// One reported benchmark row. The reference row is named `vanilla` and its
/// `ud` may be left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub lp: f64,
    pub ud: Option<f64>,
    /// Marked as the smallest distance in the source table.
    #[serde(default)]
    pub bold: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowCheck {
    pub method: String,
    pub reported: f64,
    pub recomputed: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableVerdict {
    pub rows: Vec<RowCheck>,
    /// Method with the smallest recomputed distance.
    pub min_method: String,
    pub bold_method: Option<String>,
}

impl TableVerdict {
    pub fn arithmetic_ok(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn bold_ok(&self) -> bool {
        self.bold_method.as_deref() == Some(self.min_method.as_str())
    }

    pub fn pass(&self) -> bool {
        self.arithmetic_ok() && self.bold_ok()
    }

    pub fn failures(&self) -> Vec<&RowCheck> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }
}

impl fmt::Display for TableVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} reported {:.3} recomputed {:.4} delta {:+.4} {}",
                r.method,
                r.reported,
                r.recomputed,
                r.delta,
                if r.pass { "ok" } else { "MISMATCH" }
            )?;
        }
        write!(
            f,
            "smallest distance: {} (marked: {}) {}",
            self.min_method,
            self.bold_method.as_deref().unwrap_or("none"),
            if self.bold_ok() { "ok" } else { "MISMATCH" }
        )
    }
}

/// Checks `ud == lp / lp_vanilla` within [`TABLE_TOLERANCE`] for every
/// non-reference row and that the marked row has the smallest distance.
pub fn table_check(rows: &[TableRow]) -> Result<TableVerdict> {
    let vanilla = rows
        .iter()
        .find(|r| r.method.eq_ignore_ascii_case("vanilla"))
        .ok_or_else(|| Error::invalid("table has no vanilla row"))?;
    if !(vanilla.lp > 0.0) {
        return Err(Error::Undefined("vanilla average is not positive".into()));
    }
    let mut checks = Vec::new();
    for r in rows.iter().filter(|r| !std::ptr::eq(*r, vanilla)) {
        let reported =
            r.ud.ok_or_else(|| Error::invalid(format!("row {} has no distance", r.method)))?;
        let recomputed = r.lp / vanilla.lp;
        let delta = reported - recomputed;
        checks.push(RowCheck {
            method: r.method.clone(),
            reported,
            recomputed,
            delta,
            pass: delta.abs() <= TABLE_TOLERANCE,
        });
    }
    let min_method = checks
        .iter()
        .min_by(|a, b| a.recomputed.total_cmp(&b.recomputed))
        .map(|c| c.method.clone())
        .ok_or_else(|| Error::invalid("table has no method rows"))?;
    let bold_method = rows.iter().find(|r| r.bold).map(|r| r.method.clone());
    Ok(TableVerdict {
        rows: checks,
        min_method,
        bold_method,
    })
}

/// Reads a `method,lp,ud,bold` CSV.
pub fn read_table(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv_reader(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: TableRow = rec.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}
