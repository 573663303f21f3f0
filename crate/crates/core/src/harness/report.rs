use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = [
    "experiment",
    "config_digest",
    "seed",
    "kappa",
    "metric",
    "value",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub config_digest: String,
    pub seed: u64,
    /// κ value or key kind label (`raw`, `orthogonal`, `-`).
    pub kappa: String,
    pub metric: String,
    pub value: f64,
}

/// Experiment results, one metric per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn push(
        &mut self,
        experiment: &str,
        digest: &str,
        seed: u64,
        kappa: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) {
        self.rows.push(ReportRow {
            experiment: experiment.into(),
            config_digest: digest.into(),
            seed,
            kappa: kappa.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    /// Values of `metric`, in row order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// The value of `metric` for one `(seed, kappa)` point.
    pub fn value(&self, metric: &str, seed: u64, kappa: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.seed == seed && r.kappa == kappa)
            .map(|r| r.value)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.experiment.as_str(),
                r.config_digest.as_str(),
                &r.seed.to_string(),
                r.kappa.as_str(),
                r.metric.as_str(),
                &r.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::InvalidArgument(format!(
                "unexpected csv header {header:?}"
            )));
        }
        let mut report = ExperimentReport::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Config {
                line: i + 2,
                message: format!("bad {what}"),
            };
            report.rows.push(ReportRow {
                experiment: rec[0].to_string(),
                config_digest: rec[1].to_string(),
                seed: rec[2].parse().map_err(|_| bad("seed"))?,
                kappa: rec[3].to_string(),
                metric: rec[4].to_string(),
                value: rec[5].parse().map_err(|_| bad("value"))?,
            });
        }
        Ok(report)
    }
}

/// Writes the report as CSV to `path`.
pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report.write_csv(std::fs::File::create(path)?)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    ExperimentReport::read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_fixed() {
        let r = ExperimentReport::default();
        assert_eq!(
            r.to_csv_string(),
            "experiment,config_digest,seed,kappa,metric,value\n"
        );
    }

    #[test]
    fn special_values_survive() {
        let mut r = ExperimentReport::default();
        r.push("k", "d", 0, "raw", "final_loss", f64::INFINITY);
        r.push("k", "d", 0, "raw", "x", f64::NAN);
        let back = ExperimentReport::read_csv(r.to_csv_string().as_bytes()).unwrap();
        assert_eq!(back.rows[0].value, f64::INFINITY);
        assert!(back.rows[1].value.is_nan());
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(ExperimentReport::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(
            ("[a-z_]{1,8}", "[0-9a-f]{16}", any::<u64>(), "[a-z0-9.,\" ]{0,6}", "[a-z_.0-9]{1,10}", any::<f64>().prop_filter("finite", |v| v.is_finite())),
            0..20,
        )) {
            let mut r = ExperimentReport::default();
            for (e, d, s, k, m, v) in rows {
                r.push(&e, &d, s, k, m, v);
            }
            let back = ExperimentReport::read_csv(r.to_csv_string().as_bytes()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
