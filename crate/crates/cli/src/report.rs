//! Evaluation CSVs and the merged comparison table.
//!
//! An evaluation CSV starts with one `#` line holding the invocation, then
//! the header `policy,portfolio,ap_0.7,ap_0.5,ap_0.5:0.95,decisions,frames`
//! followed by one `usage_<detector>` column (percent of decisions) per
//! dataset detector.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use buffet_core::baselines::{usage_report, Evaluation};

use crate::{CliError, Result};

pub const AP_COLUMNS: [&str; 3] = ["ap_0.7", "ap_0.5", "ap_0.5:0.95"];
const FIXED_COLUMNS: [&str; 7] = [
    "policy",
    "portfolio",
    AP_COLUMNS[0],
    AP_COLUMNS[1],
    AP_COLUMNS[2],
    "decisions",
    "frames",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub policy: String,
    /// Detector ids joined with `+`.
    pub portfolio: String,
    /// Mean per-frame AP at 0.7, 0.5 and 0.5:0.95.
    pub ap: [f64; 3],
    pub decisions: usize,
    pub frames: usize,
    /// Percent of decisions per dataset detector.
    pub usage: Vec<f64>,
}

impl ReportRow {
    /// `evaluation` must use the report column specs; usage is mapped from
    /// the env's action order onto `all_ids`.
    pub fn from_evaluation(evaluation: &Evaluation, portfolio: &str, env_ids: &[String], all_ids: &[String]) -> Self {
        let pct = usage_report(evaluation);
        let usage = all_ids
            .iter()
            .map(|id| env_ids.iter().position(|e| e == id).map_or(0.0, |a| pct[a]))
            .collect();
        ReportRow {
            policy: evaluation.policy.clone(),
            portfolio: portfolio.to_string(),
            ap: [evaluation.mean_ap[0], evaluation.mean_ap[1], evaluation.mean_ap[2]],
            decisions: evaluation.decisions,
            frames: evaluation.frames,
            usage,
        }
    }

    fn portfolio_set(&self) -> BTreeSet<&str> {
        self.portfolio.split('+').filter(|s| !s.is_empty()).collect()
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.policy.clone(),
            self.portfolio.clone(),
            format!("{:.6}", self.ap[0]),
            format!("{:.6}", self.ap[1]),
            format!("{:.6}", self.ap[2]),
            self.decisions.to_string(),
            self.frames.to_string(),
        ];
        r.extend(self.usage.iter().map(|u| format!("{u:.2}")));
        r
    }
}

fn header(detectors: &[String]) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(detectors.iter().map(|d| format!("usage_{d}")))
        .collect()
}

fn csv_err(context: &str) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        context: context.to_string(),
        source,
    }
}

fn write_records(comment: &str, head: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&head).map_err(csv_err("writing csv"))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err("writing csv"))?;
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8");
    Ok(format!("# {comment}\n{body}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Command line that reproduces the report (paths elided).
    pub invocation: String,
    /// Dataset detector ids, in usage column order.
    pub detectors: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        write_records(
            &self.invocation,
            header(&self.detectors),
            self.rows.iter().map(ReportRow::record),
        )
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let invocation = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .unwrap_or_default()
            .to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let head: Vec<String> = rdr
            .headers()
            .map_err(csv_err(source))?
            .iter()
            .map(String::from)
            .collect();
        if head.len() < FIXED_COLUMNS.len() || head[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(CliError::Usage(format!(
                "{source}: not an evaluation CSV (header {head:?})"
            )));
        }
        let detectors: Vec<String> = head[FIXED_COLUMNS.len()..]
            .iter()
            .map(|c| {
                c.strip_prefix("usage_")
                    .map(String::from)
                    .ok_or_else(|| CliError::Usage(format!("{source}: unexpected column `{c}`")))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err(source))?;
            let bad = |what: &str| CliError::Usage(format!("{source}: row {}: bad {what}", i + 1));
            let num = |j: usize| {
                rec.get(j)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| bad(&head[j]))
            };
            let int = |j: usize| {
                rec.get(j)
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| bad(&head[j]))
            };
            rows.push(ReportRow {
                policy: rec.get(0).ok_or_else(|| bad("policy"))?.to_string(),
                portfolio: rec.get(1).ok_or_else(|| bad("portfolio"))?.to_string(),
                ap: [num(2)?, num(3)?, num(4)?],
                decisions: int(5)?,
                frames: int(6)?,
                usage: (FIXED_COLUMNS.len()..head.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(EvalReport {
            invocation,
            detectors,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_table(&self) -> String {
        let best = vec![[false; 3]; self.rows.len()];
        render(&self.detectors, &self.rows, &best)
    }
}

/// Merged rows with the best value of each AP column flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub detectors: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// `best[r][c]`: row `r` attains the maximum of AP column `c`.
    pub best: Vec<[bool; 3]>,
}

/// Merge reports in input order. A non-empty `portfolio` keeps rows
/// evaluated on exactly that detector set plus `fixed:` rows of its members.
pub fn merge_reports(reports: &[EvalReport], portfolio: &[String]) -> Result<ReportTable> {
    let Some(first) = reports.first() else {
        return Err(CliError::Usage("no reports to merge".into()));
    };
    for r in reports {
        if r.detectors != first.detectors {
            return Err(CliError::Usage(format!(
                "reports cover different detectors: {:?} vs {:?}",
                first.detectors, r.detectors
            )));
        }
    }
    let wanted: BTreeSet<&str> = portfolio.iter().map(String::as_str).collect();
    let keep = |row: &ReportRow| {
        if wanted.is_empty() {
            return true;
        }
        match row.policy.strip_prefix("fixed:") {
            Some(id) => wanted.contains(id),
            None => row.portfolio_set() == wanted,
        }
    };
    let rows: Vec<ReportRow> = reports
        .iter()
        .flat_map(|r| r.rows.iter())
        .filter(|r| keep(r))
        .cloned()
        .collect();
    let mut best = vec![[false; 3]; rows.len()];
    for c in 0..3 {
        let max = rows.iter().map(|r| r.ap[c]).fold(f64::NEG_INFINITY, f64::max);
        for (b, r) in best.iter_mut().zip(&rows) {
            b[c] = r.ap[c] == max;
        }
    }
    Ok(ReportTable {
        detectors: first.detectors.clone(),
        rows,
        best,
    })
}

impl ReportTable {
    /// Evaluation columns plus `best`, the `;`-joined AP columns where the
    /// row is the maximum.
    pub fn to_csv(&self) -> Result<String> {
        let mut head = header(&self.detectors);
        head.push("best".into());
        let rows = self.rows.iter().zip(&self.best).map(|(r, b)| {
            let mut rec = r.record();
            rec.push(
                AP_COLUMNS
                    .iter()
                    .zip(b)
                    .filter(|(_, f)| **f)
                    .map(|(c, _)| *c)
                    .collect::<Vec<_>>()
                    .join(";"),
            );
            rec
        });
        write_records("buffet report", head, rows)
    }

    pub fn to_table(&self) -> String {
        render(&self.detectors, &self.rows, &self.best)
    }
}

/// Fixed-width text rendering; `*` marks the best value of a column.
fn render(detectors: &[String], rows: &[ReportRow], best: &[[bool; 3]]) -> String {
    let mut head: Vec<String> = vec!["policy".into(), "portfolio".into()];
    head.extend(AP_COLUMNS.iter().map(|s| s.to_string()));
    head.extend(detectors.iter().map(|d| format!("%{d}")));
    let cells: Vec<Vec<String>> = rows
        .iter()
        .zip(best)
        .map(|(r, b)| {
            let mut c = vec![r.policy.clone(), r.portfolio.clone()];
            c.extend((0..3).map(|i| format!("{:.4}{}", r.ap[i], if b[i] { "*" } else { "" })));
            c.extend(r.usage.iter().map(|u| format!("{u:.1}")));
            c
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|i| {
            cells
                .iter()
                .map(|c| c[i].len())
                .chain([head[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in std::iter::once(&head).chain(&cells) {
        let parts: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str, portfolio: &str, ap: [f64; 3]) -> ReportRow {
        ReportRow {
            policy: policy.into(),
            portfolio: portfolio.into(),
            ap,
            decisions: 10,
            frames: 20,
            usage: vec![50.0, 50.0],
        }
    }

    fn report(rows: Vec<ReportRow>) -> EvalReport {
        EvalReport {
            invocation: "buffet eval --iou 0.5".into(),
            detectors: vec!["a".into(), "b".into()],
            rows,
        }
    }

    #[test]
    fn csv_round_trip() {
        let r = report(vec![row("fixed:a", "a+b", [0.5, 0.25, 0.125])]);
        let text = r.to_csv().unwrap();
        assert!(text.starts_with(
            "# buffet eval --iou 0.5\npolicy,portfolio,ap_0.7,ap_0.5,ap_0.5:0.95,decisions,frames,usage_a,usage_b\n"
        ));
        assert_eq!(EvalReport::parse(&text, "t").unwrap(), r);
    }

    #[test]
    fn best_flags_are_column_argmax() {
        let reports = vec![
            report(vec![row("fixed:a", "a+b", [0.5, 0.6, 0.3])]),
            report(vec![row("learned", "a+b", [0.4, 0.7, 0.3])]),
        ];
        let t = merge_reports(&reports, &[]).unwrap();
        assert_eq!(t.best, vec![[true, false, true], [false, true, true]]);
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[2], "fixed:a,a+b,0.500000,0.600000,0.300000,10,20,50.00,50.00,ap_0.7;ap_0.5:0.95");
        assert_eq!(lines[3], "learned,a+b,0.400000,0.700000,0.300000,10,20,50.00,50.00,ap_0.5;ap_0.5:0.95");
    }

    #[test]
    fn portfolio_filter() {
        let reports = vec![report(vec![
            row("fixed:a", "a+b+c", [0.1; 3]),
            row("fixed:c", "a+b+c", [0.1; 3]),
            row("random", "a+b+c", [0.1; 3]),
            row("random", "b+a", [0.1; 3]),
            row("learned", "a+b", [0.1; 3]),
        ])];
        let t = merge_reports(&reports, &["a".into(), "b".into()]).unwrap();
        let names: Vec<(&str, &str)> = t
            .rows
            .iter()
            .map(|r| (r.policy.as_str(), r.portfolio.as_str()))
            .collect();
        assert_eq!(names, vec![("fixed:a", "a+b+c"), ("random", "b+a"), ("learned", "a+b")]);
    }

    #[test]
    fn mismatched_detectors_rejected() {
        let mut other = report(vec![]);
        other.detectors = vec!["x".into()];
        assert!(merge_reports(&[report(vec![]), other], &[]).is_err());
    }
}
