//! CSV rows for job summaries.

use std::io::Write;

use decoupled_mr::JobSummary;

pub const HEADER: [&str; 14] = [
    "engine",
    "workers",
    "corpus_bytes",
    "task_size",
    "chunk_size",
    "skew",
    "checkpoint",
    "rep",
    "t_map_s",
    "t_reduce_s",
    "t_combine_s",
    "t_total_s",
    "peak_mem_bytes",
    "result_digest",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub engine: String,
    pub workers: usize,
    pub corpus_bytes: u64,
    pub task_size: u64,
    pub chunk_size: u64,
    pub skew: String,
    pub checkpoint: bool,
    /// Repetition index, or `mean` / `sd` / `aborted`.
    pub rep: String,
    pub t_map: f64,
    pub t_reduce: f64,
    pub t_combine: f64,
    pub t_total: f64,
    pub peak_mem: Option<u64>,
    pub digest: String,
}

impl Row {
    pub fn from_summary(s: &JobSummary, rep: usize) -> Row {
        Row {
            engine: s.engine.to_string(),
            workers: s.num_workers,
            corpus_bytes: s.corpus_bytes,
            task_size: s.task_size,
            chunk_size: s.chunk_size,
            skew: s.skew.clone(),
            checkpoint: s.checkpoint,
            rep: rep.to_string(),
            t_map: s.t_map,
            t_reduce: s.t_reduce,
            t_combine: s.t_combine,
            t_total: s.t_total,
            peak_mem: s.peak_mem_bytes,
            digest: s.result_digest.clone(),
        }
    }

    /// Marks a repetition that did not finish; timing cells are left empty.
    pub fn aborted(template: &Row, rep: usize) -> Row {
        Row {
            rep: "aborted".into(),
            t_map: f64::NAN,
            t_reduce: f64::NAN,
            t_combine: f64::NAN,
            t_total: f64::NAN,
            peak_mem: None,
            digest: format!("rep {rep}"),
            ..template.clone()
        }
    }

    pub fn fields(&self) -> Vec<String> {
        let secs = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        vec![
            self.engine.clone(),
            self.workers.to_string(),
            self.corpus_bytes.to_string(),
            self.task_size.to_string(),
            self.chunk_size.to_string(),
            self.skew.clone(),
            self.checkpoint.to_string(),
            self.rep.clone(),
            secs(self.t_map),
            secs(self.t_reduce),
            secs(self.t_combine),
            secs(self.t_total),
            self.peak_mem.map(|m| m.to_string()).unwrap_or_default(),
            self.digest.clone(),
        ]
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and standard-deviation rows over repetitions; none for a single rep.
pub fn aggregate(rows: &[Row]) -> Option<(Row, Row)> {
    if rows.len() < 2 {
        return None;
    }
    let col = |f: fn(&Row) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let cols = [
        col(|r| r.t_map),
        col(|r| r.t_reduce),
        col(|r| r.t_combine),
        col(|r| r.t_total),
    ];
    let digest = if rows.iter().all(|r| r.digest == rows[0].digest) {
        rows[0].digest.clone()
    } else {
        "mixed".into()
    };
    let peaks: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.peak_mem)
        .map(|m| m as f64)
        .collect();
    let make = |rep: &str, f: fn(&[f64]) -> f64| Row {
        rep: rep.into(),
        t_map: f(&cols[0]),
        t_reduce: f(&cols[1]),
        t_combine: f(&cols[2]),
        t_total: f(&cols[3]),
        peak_mem: (!peaks.is_empty()).then(|| f(&peaks).round() as u64),
        digest: digest.clone(),
        ..rows[0].clone()
    };
    Some((make("mean", mean), make("sd", std_dev)))
}

/// CSV writer that always starts with [`HEADER`].
pub struct Report<W: Write> {
    w: csv::Writer<W>,
}

impl<W: Write> Report<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        Ok(Report { w })
    }

    pub fn push(&mut self, row: &Row) -> csv::Result<()> {
        self.w.write_record(row.fields())?;
        self.w.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.w
            .into_inner()
            .unwrap_or_else(|e| panic!("flushing report: {}", e.error()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, total: f64) -> Row {
        Row {
            engine: "1s".into(),
            workers: 4,
            corpus_bytes: 100,
            task_size: 10,
            chunk_size: 5,
            skew: "none".into(),
            checkpoint: false,
            rep: rep.to_string(),
            t_map: total / 2.0,
            t_reduce: 0.0,
            t_combine: 0.0,
            t_total: total,
            peak_mem: Some(1000),
            digest: "abc".into(),
        }
    }

    #[test]
    fn stats() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.138_089_935).abs() < 1e-6);
        assert_eq!(std_dev(&[5.0]), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn aggregate_rows() {
        assert!(aggregate(&[row(0, 1.0)]).is_none());
        let (m, sd) = aggregate(&[row(0, 1.0), row(1, 3.0)]).unwrap();
        assert_eq!(
            (m.rep.as_str(), m.t_total, m.digest.as_str()),
            ("mean", 2.0, "abc")
        );
        assert!((sd.t_total - std::f64::consts::SQRT_2).abs() < 1e-12);
        let mut odd = row(2, 1.0);
        odd.digest = "zzz".into();
        assert_eq!(aggregate(&[row(0, 1.0), odd]).unwrap().0.digest, "mixed");
    }

    #[test]
    fn csv_layout() {
        let mut r = Report::new(Vec::new()).unwrap();
        r.push(&row(0, 1.5)).unwrap();
        r.push(&Row::aborted(&row(0, 0.0), 1)).unwrap();
        let text = String::from_utf8(r.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HEADER.join(","));
        assert_eq!(
            lines[1],
            "1s,4,100,10,5,none,false,0,0.750000,0.000000,0.000000,1.500000,1000,abc"
        );
        assert_eq!(lines[2], "1s,4,100,10,5,none,false,aborted,,,,,,rep 1");
        assert!(lines.iter().all(|l| l.split(',').count() == HEADER.len()));
    }
}
