use std::path::{Path, PathBuf};

use super::{EvalError, IdentificationReport};
use crate::dataio::{read_file, write_file};

/// Fixed CSV column order.
pub const REPORT_COLUMNS: [&str; 7] = [
    "protocol",
    "P",
    "G",
    "rank1",
    "far_target",
    "threshold",
    "lapse_bucket",
];

/// One row per protocol and condition (`closed_set:baseline`,
/// `open_set:fam`, ...), then one `lapse:<condition>` row per bucket.
pub fn report_csv(reports: &[IdentificationReport]) -> Result<Vec<u8>, EvalError> {
    let err = |e: csv::Error| EvalError::Report(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(err)?;
    for r in reports {
        let (p, g) = (r.probes.to_string(), r.gallery.to_string());
        w.write_record([
            format!("closed_set:{}", r.condition),
            p.clone(),
            g.clone(),
            r.closed_set_rank1.to_string(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(err)?;
        if let Some(open) = r.open_set_rank1_at_far {
            w.write_record([
                format!("open_set:{}", r.condition),
                p.clone(),
                g.clone(),
                open.to_string(),
                r.far_target.map(|f| f.to_string()).unwrap_or_default(),
                r.threshold.map(|t| t.to_string()).unwrap_or_default(),
                String::new(),
            ])
            .map_err(err)?;
        }
    }
    for r in reports {
        for l in &r.per_lapse {
            w.write_record([
                format!("lapse:{}", r.condition),
                l.probes.to_string(),
                r.gallery.to_string(),
                l.rank1.to_string(),
                String::new(),
                String::new(),
                l.bucket.clone(),
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| EvalError::Report(e.to_string()))
}

pub fn report_json(reports: &[IdentificationReport]) -> Result<Vec<u8>, EvalError> {
    let mut out =
        serde_json::to_vec_pretty(reports).map_err(|e| EvalError::Report(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_report_json(path: &Path) -> Result<Vec<IdentificationReport>, EvalError> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| EvalError::Report(e.to_string()))
}

/// Writes `<stem>.csv` and `<stem>.json`, returning both paths.
pub fn emit_report(
    reports: &[IdentificationReport],
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf), EvalError> {
    for r in reports {
        let rates = [Some(r.closed_set_rank1), r.open_set_rank1_at_far]
            .into_iter()
            .flatten()
            .chain(r.per_lapse.iter().map(|l| l.rank1));
        for v in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvalError::Report(format!("rate {v} outside [0,1]")));
            }
        }
        if r.probes == 0 || r.gallery == 0 {
            return Err(EvalError::Report("report counts must be positive".into()));
        }
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_file(&csv_path, &report_csv(reports)?)?;
    write_file(&json_path, &report_json(reports)?)?;
    Ok((csv_path, json_path))
}
