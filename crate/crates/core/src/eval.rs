//! Average precision, the inverse coefficient of variation, experiment
//! matrices, and recomputation of published summary columns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggmodel::AggregationModel;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::LabeledImage;

/// Summary-column tolerance for two-decimal published values.
pub const PUBLISHED_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApScore {
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Non-interpolated AP, `sum_n (R_n - R_{n-1}) P_n`, evaluated at every
/// distinct score threshold. Samples with equal scores enter together.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<ApScore> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("average precision needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ApScore { value: ap, n_pos, n_neg })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    IncludeAll,
    ExcludeTrainColumn,
}

impl CovMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CovMode::IncludeAll => "include_all",
            CovMode::ExcludeTrainColumn => "exclude_train_column",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovSummary {
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std: f64,
    pub inv_cov: f64,
    pub mode: CovMode,
    pub n_values: usize,
}

/// Mean / population std / `mean / std` over AP values (percent).
pub fn cov_summary(values: &[f64], mode: CovMode, train_index: Option<usize>) -> Result<CovSummary> {
    let kept: Vec<f64> = match (mode, train_index) {
        (CovMode::IncludeAll, None) => values.to_vec(),
        (CovMode::IncludeAll, Some(_)) => return Err(invalid("train_index only applies to exclude_train_column")),
        (CovMode::ExcludeTrainColumn, None) => return Err(invalid("exclude_train_column requires train_index")),
        (CovMode::ExcludeTrainColumn, Some(t)) => {
            if t >= values.len() {
                return Err(invalid(format!("train_index {t} out of range")));
            }
            values.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, &v)| v).collect()
        }
    };
    if kept.len() < 2 {
        return Err(invalid("CoV summary needs at least two values"));
    }
    if kept.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite AP value"));
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let std = (kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateVariance("all AP values equal; CoV^-1 undefined".into()));
    }
    Ok(CovSummary { mean, std, inv_cov: mean / std, mode, n_values: kept.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    /// AP in percent, absent when the cell failed.
    pub ap: Option<f64>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// AP grid, rows are training sources and columns test sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<MatrixCell>>,
}

impl ExperimentMatrix {
    pub fn from_values(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != cols.len()) {
            return Err(invalid("matrix values are not rows x cols"));
        }
        let cells = values
            .into_iter()
            .map(|r| r.into_iter().map(|ap| MatrixCell { ap: Some(ap), provenance, error: None }).collect())
            .collect();
        let m = Self { rows, cols, cells };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.rows.len() || self.cells.iter().any(|r| r.len() != self.cols.len()) {
            return Err(invalid("matrix is not rectangular"));
        }
        for c in self.cells.iter().flatten() {
            if let Some(v) = c.ap {
                if !(0.0..=100.0).contains(&v) {
                    return Err(invalid(format!("AP {v} outside [0, 100]")));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row][col].ap
    }

    /// All values of a row; errors if any cell of the row failed.
    pub fn row_values(&self, row: usize) -> Result<Vec<f64>> {
        self.cells[row]
            .iter()
            .enumerate()
            .map(|(j, c)| c.ap.ok_or_else(|| invalid(format!("cell ({}, {}) has no value", self.rows[row], self.cols[j]))))
            .collect()
    }

    /// Column whose label equals the row label, if any.
    pub fn diagonal_col(&self, row: usize) -> Option<usize> {
        self.cols.iter().position(|c| *c == self.rows[row])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train\\test");
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.cells) {
            s.push_str(r);
            for c in row {
                match c.ap {
                    Some(v) => {
                        let _ = write!(s, ",{v:.4}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Fill a matrix from a per-cell scoring function returning `(scores, labels)`.
/// Failures are recorded in the cell instead of aborting the whole matrix.
pub fn matrix_from_scores(
    rows: Vec<String>,
    cols: Vec<String>,
    mut score: impl FnMut(usize, usize) -> Result<(Vec<f64>, Vec<u8>)>,
) -> ExperimentMatrix {
    let cells = (0..rows.len())
        .map(|i| {
            (0..cols.len())
                .map(|j| match score(i, j).and_then(|(s, l)| average_precision(&s, &l)) {
                    Ok(ap) => MatrixCell { ap: Some(100.0 * ap.value), provenance: Provenance::Measured, error: None },
                    Err(e) => MatrixCell { ap: None, provenance: Provenance::Measured, error: Some(e.to_string()) },
                })
                .collect()
        })
        .collect();
    ExperimentMatrix { rows, cols, cells }
}

/// Fake logits of `model` over a labelled set (monotone in the probability).
pub fn score_dataset<T: Scalar>(model: &AggregationModel<T>, data: &[LabeledImage<T>]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for item in data {
        scores.push(model.infer(&item.image)?.logit.as_f64());
        labels.push(item.label);
    }
    Ok((scores, labels))
}

/// AP (percent) of every model on every test set.
pub fn cross_matrix<T: Scalar>(
    models: &[(String, &AggregationModel<T>)],
    datasets: &[(String, &[LabeledImage<T>])],
) -> ExperimentMatrix {
    matrix_from_scores(
        models.iter().map(|m| m.0.clone()).collect(),
        datasets.iter().map(|d| d.0.clone()).collect(),
        |i, j| score_dataset(models[i].1, datasets[j].1),
    )
}

/// CoV summary of every matrix row; the train column is the one whose
/// label matches the row.
pub fn rank_matrix(matrix: &ExperimentMatrix, mode: CovMode) -> Result<Vec<(String, CovSummary)>> {
    let mut out = Vec::with_capacity(matrix.rows.len());
    for i in 0..matrix.rows.len() {
        let values = matrix.row_values(i)?;
        let train = match mode {
            CovMode::IncludeAll => None,
            CovMode::ExcludeTrainColumn => Some(
                matrix
                    .diagonal_col(i)
                    .ok_or_else(|| invalid(format!("no test column matches train source {}", matrix.rows[i])))?,
            ),
        };
        out.push((matrix.rows[i].clone(), cov_summary(&values, mode, train)?));
    }
    out.sort_by(|a, b| b.1.inv_cov.total_cmp(&a.1.inv_cov).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// CoV summary of every row of a published table, ranked like
/// [`rank_matrix`]; the excluded column is the table's own train column.
pub fn rank_fixture_table(table: &FixtureTable, mode: CovMode) -> Result<Vec<(String, CovSummary)>> {
    let train = match (mode, table.train_column) {
        (CovMode::IncludeAll, _) => None,
        (CovMode::ExcludeTrainColumn, Some(t)) => Some(t),
        (CovMode::ExcludeTrainColumn, None) => {
            return Err(invalid(format!("table {} has no single train column", table.id)))
        }
    };
    let mut out = Vec::with_capacity(table.matrix.rows.len());
    for (i, name) in table.matrix.rows.iter().enumerate() {
        out.push((name.clone(), cov_summary(&table.matrix.row_values(i)?, mode, train)?));
    }
    out.sort_by(|a, b| b.1.inv_cov.total_cmp(&a.1.inv_cov).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Ranking as CSV, one row per train source.
pub fn ranking_csv(rows: &[(String, CovSummary)]) -> String {
    let mut s = String::from("rank,train_source,mode,mean,std,inv_cov,n_values\n");
    for (k, (name, c)) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{}",
            k + 1,
            csv_field(name),
            c.mode.as_str(),
            c.mean,
            c.std,
            c.inv_cov,
            c.n_values
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedSummary {
    pub mean: f64,
    pub std: f64,
    pub inv_cov: f64,
}

/// One published table: the AP grid plus its printed summary columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    pub id: String,
    pub title: String,
    /// Index of the column drawn from the training distribution.
    #[serde(default)]
    pub train_column: Option<usize>,
    pub matrix: ExperimentMatrix,
    pub published: Vec<PublishedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedTables {
    pub tables: Vec<FixtureTable>,
}

const EMBEDDED_FIXTURE: &str = include_str!("../../../fixtures/paper_tables.json");

impl PublishedTables {
    pub fn embedded() -> Self {
        Self::from_json(EMBEDDED_FIXTURE).expect("embedded fixture parses")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: PublishedTables = serde_json::from_str(s)?;
        for table in &t.tables {
            table.matrix.validate()?;
            if table.published.len() != table.matrix.rows.len() {
                return Err(invalid(format!("table {} has a published row count mismatch", table.id)));
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCheck {
    pub mode: CovMode,
    pub summary: CovSummary,
    pub matches: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRowReport {
    pub table: String,
    pub model: String,
    pub published: PublishedSummary,
    pub checks: Vec<ModeCheck>,
}

impl SummaryRowReport {
    pub fn check(&self, mode: CovMode) -> Option<&ModeCheck> {
        self.checks.iter().find(|c| c.mode == mode)
    }

    pub fn reproducing_modes(&self) -> Vec<CovMode> {
        self.checks.iter().filter(|c| c.matches).map(|c| c.mode).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub tolerance: f64,
    pub rows: Vec<SummaryRowReport>,
}

pub fn matches_published(s: &CovSummary, p: &PublishedSummary, tolerance: f64) -> bool {
    let ok = |a: f64, b: f64| (a - b).abs() <= tolerance + 1e-9;
    ok(s.mean, p.mean) && ok(s.std, p.std) && ok(s.inv_cov, p.inv_cov)
}

/// Recompute every summary row under both aggregation modes.
pub fn reproduce_paper_summaries(fixture: &PublishedTables) -> Result<ReproductionReport> {
    let mut rows = Vec::new();
    for table in &fixture.tables {
        for (i, model) in table.matrix.rows.iter().enumerate() {
            let values = table.matrix.row_values(i)?;
            let published = table.published[i];
            let mut checks = vec![];
            let include = cov_summary(&values, CovMode::IncludeAll, None)?;
            checks.push(ModeCheck {
                mode: CovMode::IncludeAll,
                matches: matches_published(&include, &published, PUBLISHED_TOLERANCE),
                summary: include,
            });
            if let Some(t) = table.train_column {
                let exclude = cov_summary(&values, CovMode::ExcludeTrainColumn, Some(t))?;
                checks.push(ModeCheck {
                    mode: CovMode::ExcludeTrainColumn,
                    matches: matches_published(&exclude, &published, PUBLISHED_TOLERANCE),
                    summary: exclude,
                });
            }
            rows.push(SummaryRowReport { table: table.id.clone(), model: model.clone(), published, checks });
        }
    }
    Ok(ReproductionReport { tolerance: PUBLISHED_TOLERANCE, rows })
}

impl ReproductionReport {
    pub fn row(&self, table: &str, model: &str) -> Option<&SummaryRowReport> {
        self.rows.iter().find(|r| r.table == table && r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "table,model,published_mean,published_std,published_inv_cov,mode,mean,std,inv_cov,n_values,matches\n",
        );
        for r in &self.rows {
            for c in &r.checks {
                let _ = writeln!(
                    s,
                    "{},{},{:.2},{:.2},{:.2},{},{:.4},{:.4},{:.4},{},{}",
                    r.table,
                    csv_field(&r.model),
                    r.published.mean,
                    r.published.std,
                    r.published.inv_cov,
                    c.mode.as_str(),
                    c.summary.mean,
                    c.summary.std,
                    c.summary.inv_cov,
                    c.summary.n_values,
                    c.matches
                );
            }
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
