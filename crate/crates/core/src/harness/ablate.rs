use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_with, write_eval, write_file, DataProvider, ModelSpec, Predictor, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Stat};
use crate::models::VariantName;

/// One row of a comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    /// Zero-field baseline on pre-aligned inputs.
    Affine,
    Variant(VariantName),
}

impl AblationRow {
    /// Position in the published row order.
    pub fn order(&self) -> usize {
        match self {
            AblationRow::Affine => 0,
            AblationRow::Variant(v) => 1 + v.row_index(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationRow::Affine => "affine",
            AblationRow::Variant(v) => v.as_str(),
        }
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("affine") {
            Ok(AblationRow::Affine)
        } else {
            Ok(AblationRow::Variant(s.parse()?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<usize>,
    /// Hash of the training pair sequence (absent for the baseline).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_pair_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_pair_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<RowResult>,
    /// Every successful run saw the same training and evaluation pairs.
    pub pairs_consistent: bool,
}

/// Table cells for re-rendering.
pub type TableRow = RowResult;

fn run_row(row: AblationRow, cfg: &RunConfig, provider: &DataProvider, dir: &Path) -> Result<RowResult> {
    let (pred, params, train_hash) = match row {
        AblationRow::Affine => (Predictor::Identity, None, None),
        AblationRow::Variant(v) => {
            let cfg = RunConfig { model: ModelSpec { variant: v, config: None, ..cfg.model.clone() }, ..cfg.clone() };
            let out = train_with(&cfg, provider, Some(dir))?;
            let n = out.model.count_parameters();
            (Predictor::Model(Box::new(out.model)), Some(n), Some(out.pair_hash))
        }
    };
    let eval = evaluate(&pred, provider, cfg.eval_pairs, cfg.seed, !cfg.deterministic)?;
    write_eval(dir, &eval)?;
    Ok(RowResult {
        row: row.label().to_string(),
        ok: true,
        error: None,
        parameters: params,
        train_pair_hash: train_hash,
        eval_pair_hash: Some(eval.pair_hash),
        report: Some(eval.report),
    })
}

/// Train and evaluate each row under the same data order and seeds, then
/// write `table.csv`, `table.md` and `ablation.json` to the output directory.
/// A failed row is recorded and the table is still written.
pub fn ablate(rows: &[AblationRow], cfg: &RunConfig) -> Result<AblationResult> {
    if rows.is_empty() {
        return Err(Error::config("ablation needs at least one row"));
    }
    cfg.validate()?;
    let mut rows = rows.to_vec();
    rows.sort_by_key(AblationRow::order);
    rows.dedup();
    let provider = DataProvider::from_config(cfg)?;
    let root = cfg.resolved_output_dir();
    let mut results = Vec::new();
    for row in rows {
        log::info!("ablation row {}", row.label());
        let dir = root.join(row.label());
        let r = run_row(row, cfg, &provider, &dir).unwrap_or_else(|e| {
            log::error!("row {} failed: {e}", row.label());
            RowResult {
                row: row.label().to_string(),
                ok: false,
                error: Some(e.to_string()),
                parameters: None,
                train_pair_hash: None,
                eval_pair_hash: None,
                report: None,
            }
        });
        results.push(r);
    }
    let consistent = |f: fn(&RowResult) -> &Option<String>| {
        let mut hs = results.iter().filter_map(|r| f(r).as_ref());
        hs.next().is_none_or(|h0| hs.all(|h| h == h0))
    };
    let pairs_consistent = consistent(|r| &r.train_pair_hash) && consistent(|r| &r.eval_pair_hash);
    let result = AblationResult { rows: results, pairs_consistent };
    write_tables(&root, &result)?;
    Ok(result)
}

/// Write the ablation record and both table renderings.
pub fn write_tables(dir: &Path, result: &AblationResult) -> Result<()> {
    write_file(&dir.join("ablation.json"), &serde_json::to_vec_pretty(result)?)?;
    let (csv, md) = render_table(&result.rows);
    write_file(&dir.join("table.csv"), csv.as_bytes())?;
    write_file(&dir.join("table.md"), md.as_bytes())
}

/// Rows of a previously written `ablation.json`.
pub fn load_table_rows(path: &Path) -> Result<Vec<TableRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let r: AblationResult = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(r.rows)
}

const COLUMNS: [&str; 4] = ["DSC", "HD90", "SDlogJ(x10^2)", "NDV(%)"];

fn cells(r: &MetricsReport) -> [Stat; 4] {
    let dsc = Stat { mean: r.dsc.mean * 100.0, sd: r.dsc.sd * 100.0 };
    [dsc, r.hd90, r.sdlogj, r.ndv_pct]
}

/// Indices of the best two learned rows in column `c`; the baseline row
/// never takes a mark.
fn top_two(rows: &[RowResult], c: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.row != "affine")
        .filter_map(|(i, r)| r.report.as_ref().map(|rep| (i, cells(rep)[c].mean)))
        .filter(|(_, v)| v.is_finite())
        .collect();
    let higher_better = c == 0;
    scored.sort_by(|a, b| {
        let o = a.1.total_cmp(&b.1);
        if higher_better { o.reverse() } else { o }
    });
    scored.into_iter().take(2).map(|(i, _)| i).collect()
}

/// CSV (plain numbers) and Markdown (top two per column in bold).
pub fn render_table(rows: &[RowResult]) -> (String, String) {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| r.row.parse::<AblationRow>().map(|a| a.order()).unwrap_or(usize::MAX));
    let mut csv = String::from("method,status");
    for c in COLUMNS {
        csv.push_str(&format!(",{c}_mean,{c}_sd"));
    }
    csv.push('\n');
    let mut md = format!("| Method | {} |\n|---|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    let marks: Vec<Vec<usize>> = (0..COLUMNS.len()).map(|c| top_two(&rows, c)).collect();
    for (i, r) in rows.iter().enumerate() {
        match r.report.as_ref().filter(|_| r.ok) {
            Some(rep) => {
                let vals = cells(rep);
                csv.push_str(&format!("{},ok", r.row));
                md.push_str(&format!("| {} |", r.row));
                for (c, s) in vals.iter().enumerate() {
                    csv.push_str(&format!(",{},{}", s.mean, s.sd));
                    let cell = format!("{:.2}±{:.2}", s.mean, s.sd);
                    if marks[c].contains(&i) {
                        md.push_str(&format!(" **{cell}** |"));
                    } else {
                        md.push_str(&format!(" {cell} |"));
                    }
                }
            }
            None => {
                csv.push_str(&format!("{},failed{}", r.row, ",,".repeat(COLUMNS.len())));
                md.push_str(&format!("| {} |{}", r.row, " failed |".repeat(COLUMNS.len())));
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    (csv, md)
}
