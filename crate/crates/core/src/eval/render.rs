use super::{cell_key, EvaluationReport, ReferenceCell, CELL_ORDER};
use crate::classifiers::ClassifierFamily;
use crate::dataset::DomainId;

/// Placeholder for a missing cell.
pub const DASH: &str = "n/a";

fn header(out: &mut String) {
    let m = DomainId::Matek19.display_name();
    let a = DomainId::Acevedo20.display_name();
    out.push_str(&format!("| Trained on | {m} | | {a} | | Average(%) |\n"));
    out.push_str("|---|---|---|---|---|---|\n");
    out.push_str(&format!("| Tested on | {m}(%) | {a}(%) | {m}(%) | {a}(%) | |\n"));
}

fn cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.2}±{s:.1}"),
        None => format!("{mean:.2}"),
    }
}

/// Markdown table in the published layout, followed by the reference rows.
pub fn render_markdown(report: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str("## Accuracy (mean±std over folds)\n\n");
    header(&mut out);
    if report.classifiers.is_empty() {
        out.push_str(&format!("| (no results) | {DASH} | {DASH} | {DASH} | {DASH} | {DASH} |\n"));
    }
    for family in &report.classifiers {
        let name = family
            .parse::<ClassifierFamily>()
            .map(|f| f.display_name().to_string())
            .unwrap_or_else(|_| family.clone());
        let cells: Vec<String> = CELL_ORDER
            .iter()
            .map(|(a, b)| {
                report
                    .cells
                    .get(family)
                    .and_then(|c| c.get(&cell_key(*a, *b)))
                    .map(|c| cell(c.mean, Some(c.std)))
                    .unwrap_or_else(|| DASH.to_string())
            })
            .collect();
        let avg = report
            .average
            .get(family)
            .copied()
            .flatten()
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| DASH.to_string());
        out.push_str(&format!("| {name} | {} | {avg} |\n", cells.join(" | ")));
    }
    if report.incomplete {
        out.push_str("\n**Incomplete:** some cells are missing.\n");
    }
    if let Some(k) = report.metadata.k {
        out.push_str(&format!("\n± is the population std over {k} folds.\n"));
    }
    out.push_str("\n## Reference (published full-scale results)\n\n");
    header(&mut out);
    for r in &report.reference {
        let cells: Vec<String> = r.cells.iter().map(|c: &ReferenceCell| cell(c.mean, c.std)).collect();
        out.push_str(&format!("| {} | {} | {:.2} |\n", r.name, cells.join(" | "), r.average));
    }
    out
}

/// `(report.json text, report.md text)`.
pub fn render_report(report: &EvaluationReport) -> (String, String) {
    let mut r = report.clone();
    r.refresh();
    (r.to_json(), render_markdown(&r))
}
