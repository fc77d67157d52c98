use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCell {
    pub mean: f64,
    pub std: Option<f64>,
}

/// Published full-scale accuracies (percent), cells in [`super::CELL_ORDER`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub name: String,
    pub cells: Vec<ReferenceCell>,
    pub average: f64,
}

fn row(name: &str, cells: [(f64, Option<f64>); 4], average: f64) -> ReferenceRow {
    ReferenceRow {
        name: name.to_string(),
        cells: cells.iter().map(|&(mean, std)| ReferenceCell { mean, std }).collect(),
        average,
    }
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        row("ResNext", [(96.10, None), (8.10, None), (7.30, Some(3.1)), (85.70, Some(2.4))], 49.30),
        row(
            "AE-CFE-RF",
            [(83.70, Some(0.5)), (21.90, Some(0.4)), (45.10, Some(0.5)), (65.20, Some(0.5))],
            53.98,
        ),
        row(
            "BC-SAM-RF",
            [(89.03, Some(0.4)), (24.07, Some(0.4)), (51.94, Some(0.8)), (70.41, Some(1.0))],
            58.86,
        ),
        row(
            "BC-SAM-SVM(poly)",
            [(90.95, Some(0.4)), (24.77, Some(0.6)), (50.67, Some(0.4)), (72.99, Some(0.4))],
            59.85,
        ),
        row(
            "BC-SAM-XGBoost",
            [(91.41, Some(0.5)), (36.84, Some(1.0)), (49.22, Some(1.0)), (74.52, Some(0.7))],
            63.00,
        ),
        row(
            "BC-SAM-SVM(rbf)",
            [(92.51, Some(0.4)), (47.50, Some(0.6)), (34.53, Some(1.3)), (78.27, Some(0.5))],
            63.20,
        ),
        row(
            "BC-SAM-ANN",
            [(92.28, Some(0.3)), (41.21, Some(1.0)), (42.93, Some(2.4)), (77.74, Some(0.9))],
            63.54,
        ),
    ]
}
