//! Independent two-sample t-tests between methods.

use std::fmt::Write as _;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Two-tailed significance threshold.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Per-subject values of one metric for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub method: String,
    pub metric: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(method: &str, metric: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Data(format!(
                "{method}/{metric}: a t-test needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{method}/{metric}: non-finite value {v}")));
        }
        Ok(SampleSet {
            method: method.to_string(),
            metric: metric.to_string(),
            values,
        })
    }

    /// Collects `(method, metric)` from a report in row order.
    pub fn from_report(report: &MetricReport, method: &str, metric: &str) -> Result<Self> {
        SampleSet::new(method, metric, report.values(method, metric))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (self.values.len() - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VarianceModel {
    /// Student's test with pooled variance.
    #[default]
    Pooled,
    /// Welch's test with Satterthwaite degrees of freedom.
    Welch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTest {
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both samples had zero variance, so `t` is not a finite statistic.
    pub degenerate: bool,
}

impl TTest {
    pub fn significant(&self) -> bool {
        self.p < SIGNIFICANCE_LEVEL
    }

    pub const CSV_HEADER: &'static str = "metric,method_a,method_b,t,df,p,significant";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.metric,
            self.method_a,
            self.method_b,
            self.t,
            self.df,
            self.p,
            self.significant()
        )
    }
}

/// Two-tailed p-value of `t` under Student's t with `df` degrees of freedom.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

pub fn ttest_independent(a: &SampleSet, b: &SampleSet, model: VarianceModel) -> TTest {
    let (na, nb) = (a.values.len() as f64, b.values.len() as f64);
    let (va, vb) = (a.variance(), b.variance());
    let diff = a.mean() - b.mean();
    let (se2, df) = match model {
        VarianceModel::Pooled => {
            let df = na + nb - 2.0;
            let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp * (1.0 / na + 1.0 / nb), df)
        }
        VarianceModel::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let denom = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
            let df = if denom > 0.0 { se2 * se2 / denom } else { na + nb - 2.0 };
            (se2, df)
        }
    };
    let (t, p, degenerate) = if se2 > 0.0 {
        let t = diff / se2.sqrt();
        (t, two_tailed_p(t, df), false)
    } else if diff == 0.0 {
        (0.0, 1.0, true)
    } else {
        (diff.signum() * f64::INFINITY, 0.0, true)
    };
    TTest {
        metric: a.metric.clone(),
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        t,
        df,
        p,
        degenerate,
    }
}

pub fn tests_to_csv(tests: &[TTest]) -> String {
    let mut s = String::from(TTest::CSV_HEADER);
    s.push('\n');
    for t in tests {
        let _ = writeln!(s, "{}", t.csv_row());
    }
    s
}

/// Appends rows to `path`, writing the header first if the file is new or empty.
pub fn append_csv(path: &std::path::Path, tests: &[TTest]) -> Result<()> {
    use std::io::Write;
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(TTest::CSV_HEADER);
        text.push('\n');
    }
    for t in tests {
        let _ = writeln!(text, "{}", t.csv_row());
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
