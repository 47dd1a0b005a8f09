//! Plain-text and CSV renderings of evaluation reports.

use cvr_core::eval::EvalReport;

const COLUMNS: [&str; 10] = [
    "report",
    "mode",
    "queries",
    "acc",
    "mnr",
    "state_acc",
    "ident_acc",
    "exact",
    "ident_consistent",
    "ident_inconsistent",
];

struct Row {
    name: String,
    mode: String,
    queries: String,
    metrics: [f64; 7],
}

fn metrics(r: &EvalReport) -> [f64; 7] {
    [
        r.acc,
        r.mnr,
        r.state_acc,
        r.ident_acc,
        r.breakdown.exact,
        r.breakdown.ident_consistent_state_misaligned,
        r.breakdown.ident_inconsistent,
    ]
}

/// One row per report, plus an unweighted macro-average when there is more
/// than one.
fn rows(reports: &[(String, &EvalReport)]) -> Vec<Row> {
    let mut out: Vec<Row> = reports
        .iter()
        .map(|(name, r)| Row {
            name: name.clone(),
            mode: r.mode.clone(),
            queries: r.n_queries.to_string(),
            metrics: metrics(r),
        })
        .collect();
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let mut mean = [0.0; 7];
        for (_, r) in reports {
            for (m, x) in mean.iter_mut().zip(metrics(r)) {
                *m += x / n;
            }
        }
        out.push(Row {
            name: "macro-average".into(),
            mode: "-".into(),
            queries: reports.iter().map(|(_, r)| r.n_queries).sum::<usize>().to_string(),
            metrics: mean,
        });
    }
    out
}

fn cells(row: &Row, pct: bool) -> Vec<String> {
    let mut c = vec![row.name.clone(), row.mode.clone(), row.queries.clone()];
    for (i, m) in row.metrics.iter().enumerate() {
        c.push(match (pct, i) {
            (true, 1) => format!("{m:.3}"),
            (true, _) => format!("{:.2}", 100.0 * m),
            (false, _) => m.to_string(),
        });
    }
    c
}

/// Aligned table; rates in percent, mean rank as is.
pub fn table(reports: &[(String, &EvalReport)]) -> String {
    let body: Vec<Vec<String>> = rows(reports).iter().map(|r| cells(r, true)).collect();
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: Vec<&str>| {
        let parts: Vec<String> = cols
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(COLUMNS.to_vec());
    s.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in &body {
        s.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    s
}

/// Plot-ready CSV with raw fractions.
pub fn csv(reports: &[(String, &EvalReport)]) -> String {
    let mut s = COLUMNS.join(",") + "\n";
    for row in rows(reports) {
        s.push_str(&cells(&row, false).join(","));
        s.push('\n');
    }
    s
}
