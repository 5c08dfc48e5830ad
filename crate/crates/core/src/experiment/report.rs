//! Comparison table and bar chart: framework summaries next to
//! user-supplied literature numbers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_summary, ExperimentSummary};
use crate::diagnostics::svg::{write_bar_chart, Bar};
use crate::error::{Error, Result};

pub const FRAMEWORK_GROUP: &str = "framework";
pub const LITERATURE_GROUP: &str = "literature";

/// One table row; `std` and `n_runs` are empty for literature rows that
/// give a single number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub group: String,
    pub macro_iou_fg: f64,
    pub std: Option<f64>,
    pub n_runs: Option<usize>,
    pub fingerprint: Option<String>,
}

impl ReportRow {
    pub fn from_summary(s: &ExperimentSummary) -> Self {
        Self {
            label: format!("{} {} {} {}", s.backbone, s.adapt, s.regime, s.sampling),
            group: FRAMEWORK_GROUP.into(),
            macro_iou_fg: s.macro_iou_fg.mean,
            std: Some(s.macro_iou_fg.std),
            n_runs: Some(s.macro_iou_fg.n),
            fingerprint: Some(s.fingerprint.clone()),
        }
    }
}

#[derive(Deserialize)]
struct LiteratureRow {
    label: String,
    iou_fg: f64,
    #[serde(default)]
    std: Option<f64>,
}

/// Literature CSV with header `label,iou_fg[,std]`.
pub fn read_literature(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_path(path)?;
    rdr.deserialize::<LiteratureRow>()
        .map(|row| {
            let row = row?;
            if !row.iou_fg.is_finite() {
                return Err(Error::Integrity(format!("{}: non-finite value for {}", path.display(), row.label)));
            }
            Ok(ReportRow {
                label: row.label,
                group: LITERATURE_GROUP.into(),
                macro_iou_fg: row.iou_fg,
                std: row.std,
                n_runs: None,
                fingerprint: None,
            })
        })
        .collect()
}

pub fn write_table(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Write `out_csv` and a bar chart beside it (same stem, `.svg`). Summary
/// rows come first, in the order given.
pub fn report(summaries: &[PathBuf], literature: Option<&Path>, out_csv: &Path) -> Result<Vec<ReportRow>> {
    if summaries.is_empty() {
        return Err(Error::Config("report needs at least one summary".into()));
    }
    let mut rows = summaries
        .iter()
        .map(|p| read_summary(p).map(|s| ReportRow::from_summary(&s)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(lit) = literature {
        rows.extend(read_literature(lit)?);
    }
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_table(out_csv, &rows)?;
    let bars: Vec<Bar> = rows
        .iter()
        .map(|r| Bar { label: r.label.clone(), group: r.group.clone(), value: r.macro_iou_fg, err: r.std })
        .collect();
    write_bar_chart(&out_csv.with_extension("svg"), &bars, "Foreground IoU", "IoU_fg")?;
    Ok(rows)
}
