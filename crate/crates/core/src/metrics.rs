//! Accuracy bookkeeping, per-method summaries and CSV emission.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::client::Method;
use crate::error::{Error, Result};
use crate::server::RoundRecord;

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "method",
    "seed",
    "val_acc",
    "best_acc",
    "s2c_floats",
    "c2s_floats",
    "labelmap_version",
];

pub const SUMMARY_HEADER: [&str; 8] = [
    "method",
    "E",
    "half_mean",
    "half_std",
    "final_mean",
    "final_std",
    "acc_at_x",
    "comm_total_floats",
];

const DIGEST_PREFIX: &str = "# digest=";

/// Every round of one (method, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub method: Method,
    pub seed: u64,
    pub digest: String,
    pub records: Vec<RoundRecord>,
}

impl RunHistory {
    pub fn new(method: Method, seed: u64, digest: impl Into<String>) -> Self {
        Self {
            method,
            seed,
            digest: digest.into(),
            records: Vec::new(),
        }
    }

    /// Appends a round; rounds must arrive as 1, 2, 3, ...
    pub fn push(&mut self, record: RoundRecord) -> Result<()> {
        let expected = self.records.len() + 1;
        if record.round != expected {
            return Err(Error::RoundOutOfRange {
                round: record.round,
                len: self.records.len(),
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn accuracies(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.val_acc)
    }

    pub fn comm_total_floats(&self) -> u64 {
        self.records
            .iter()
            .map(|r| r.s2c_floats + r.c2s_floats)
            .sum()
    }
}

/// Best validation accuracy over rounds `1..=t`.
pub fn best_acc_until(history: &RunHistory, t: usize) -> Result<f64> {
    if t == 0 || t > history.len() {
        return Err(Error::RoundOutOfRange {
            round: t,
            len: history.len(),
        });
    }
    Ok(history
        .accuracies()
        .take(t)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// First round whose accuracy reaches `x`.
pub fn acc_at_x(history: &RunHistory, x: f64) -> Option<usize> {
    history
        .records
        .iter()
        .find(|r| r.val_acc >= x)
        .map(|r| r.round)
}

/// Mean of the running best accuracy. With `reset_on_shift` the running best
/// starts over whenever the label map changes, so slow recovery is not hidden
/// behind pre-shift accuracy.
pub fn concept_shift_score(history: &RunHistory, reset_on_shift: bool) -> Result<f64> {
    let first = history.records.first().ok_or(Error::EmptyDataset(
        "concept shift score needs at least one round",
    ))?;
    let mut version = first.labelmap_version;
    let mut best = f64::NEG_INFINITY;
    let mut total = 0.0;
    for r in &history.records {
        if reset_on_shift && r.labelmap_version != version {
            best = f64::NEG_INFINITY;
        }
        version = r.labelmap_version;
        best = best.max(r.val_acc);
        total += best;
    }
    Ok(total / history.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n - 1) standard deviation; `None` below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Median with `None` ordered above every number; `None` if the median
/// itself falls in the unreached part.
pub fn median_rounds(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| x.map_or(f64::INFINITY, |r| r as f64))
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub epochs: usize,
    pub half_mean: f64,
    pub half_std: Option<f64>,
    pub final_mean: f64,
    pub final_std: Option<f64>,
    /// Median rounds to the target accuracy over seeds.
    pub acc_at_x: Option<f64>,
    /// Mean over seeds of the run's total S2C + C2S floats.
    pub comm_total_floats: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub digest: String,
    pub rows: Vec<SummaryRow>,
}

/// Per-method summary over seeds. Inputs are sorted before reduction so the
/// result does not depend on the order runs are listed in.
pub fn summarize(runs: &[RunHistory], epochs: usize, acc_target: f64) -> Result<SummaryTable> {
    let digest = match runs.first() {
        Some(r) => r.digest.clone(),
        None => return Ok(SummaryTable::default()),
    };
    if let Some(other) = runs.iter().find(|r| r.digest != digest) {
        return Err(Error::MixedDigest(digest, other.digest.clone()));
    }
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut group: Vec<&RunHistory> = runs.iter().filter(|r| r.method == method).collect();
        if group.is_empty() {
            continue;
        }
        group.sort_by_key(|r| r.seed);
        let mut half = Vec::new();
        let mut fin = Vec::new();
        let mut reach = Vec::new();
        let mut comm = Vec::new();
        for r in &group {
            let t = r.len();
            half.push(best_acc_until(r, (t / 2).max(1))?);
            fin.push(best_acc_until(r, t)?);
            reach.push(acc_at_x(r, acc_target));
            comm.push(r.comm_total_floats() as f64);
        }
        for v in [&mut half, &mut fin, &mut comm] {
            v.sort_by(f64::total_cmp);
        }
        rows.push(SummaryRow {
            method,
            epochs,
            half_mean: mean(&half),
            half_std: sample_std(&half),
            final_mean: mean(&fin),
            final_std: sample_std(&fin),
            acc_at_x: median_rounds(&reach),
            comm_total_floats: mean(&comm),
        });
    }
    Ok(SummaryTable { digest, rows })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt_f)
}

fn open_writer(path: &Path, digest: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{DIGEST_PREFIX}{digest}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

pub fn write_metrics_csv(history: &RunHistory, path: &Path) -> Result<()> {
    let mut w = open_writer(path, &history.digest)?;
    w.write_record(METRICS_HEADER)
        .map_err(|e| csv_err(path, e))?;
    let mut best = f64::NEG_INFINITY;
    for r in &history.records {
        best = best.max(r.val_acc);
        w.write_record([
            r.round.to_string(),
            history.method.name().to_string(),
            history.seed.to_string(),
            fmt_f(r.val_acc),
            fmt_f(best),
            r.s2c_floats.to_string(),
            r.c2s_floats.to_string(),
            r.labelmap_version.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(table: &SummaryTable, path: &Path) -> Result<()> {
    let mut w = open_writer(path, &table.digest)?;
    w.write_record(SUMMARY_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        w.write_record([
            r.method.name().to_string(),
            r.epochs.to_string(),
            fmt_f(r.half_mean),
            fmt_opt(r.half_std),
            fmt_f(r.final_mean),
            fmt_opt(r.final_std),
            fmt_opt(r.acc_at_x),
            fmt_f(r.comm_total_floats),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the leading digest comment and returns a reader over the rest.
fn open_reader(path: &Path, header: &[&str]) -> Result<(String, csv::Reader<BufReader<File>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufReader::new(file);
    let mut first = String::new();
    buf.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let digest = first
        .trim_end()
        .strip_prefix(DIGEST_PREFIX)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing digest line".into(),
        })?
        .to_string();
    let mut reader = csv::Reader::from_reader(buf);
    let got = reader.headers().map_err(|e| csv_err(path, e))?;
    if !got.iter().eq(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            message: format!("expected header {}", header.join(",")),
        });
    }
    Ok((digest, reader))
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    // +1 for the digest line that precedes what the csv reader sees.
    let line = rec.position().map_or(0, |p| p.line() + 1);
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing column {i}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {raw:?} in column {i}"),
    })
}

fn opt_field(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    if rec.get(i) == Some("NA") {
        Ok(None)
    } else {
        field(path, rec, i).map(Some)
    }
}

/// Parses a metrics CSV back into a history. Participant lists are not
/// stored in the CSV and come back empty.
pub fn read_metrics_csv(path: &Path) -> Result<RunHistory> {
    let (digest, mut reader) = open_reader(path, &METRICS_HEADER)?;
    let mut history: Option<RunHistory> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let method: Method = field(path, &rec, 1)?;
        let seed: u64 = field(path, &rec, 2)?;
        let h = history.get_or_insert_with(|| RunHistory::new(method, seed, digest.clone()));
        h.push(RoundRecord {
            round: field(path, &rec, 0)?,
            val_acc: field(path, &rec, 3)?,
            s2c_floats: field(path, &rec, 5)?,
            c2s_floats: field(path, &rec, 6)?,
            participants: Vec::new(),
            dropped: Vec::new(),
            labelmap_version: field(path, &rec, 7)?,
        })?;
    }
    history.ok_or(Error::EmptyDataset("metrics file has no rounds"))
}

pub fn read_summary_csv(path: &Path) -> Result<SummaryTable> {
    let (digest, mut reader) = open_reader(path, &SUMMARY_HEADER)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(SummaryRow {
            method: field(path, &rec, 0)?,
            epochs: field(path, &rec, 1)?,
            half_mean: field(path, &rec, 2)?,
            half_std: opt_field(path, &rec, 3)?,
            final_mean: field(path, &rec, 4)?,
            final_std: opt_field(path, &rec, 5)?,
            acc_at_x: opt_field(path, &rec, 6)?,
            comm_total_floats: field(path, &rec, 7)?,
        });
    }
    Ok(SummaryTable { digest, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist(accs: &[f64]) -> RunHistory {
        hist_versions(accs, &vec![0; accs.len()])
    }

    fn hist_versions(accs: &[f64], versions: &[u64]) -> RunHistory {
        let mut h = RunHistory::new(Method::FedAvg, 0, "abc");
        for (i, (&a, &v)) in accs.iter().zip(versions).enumerate() {
            h.push(RoundRecord {
                round: i + 1,
                val_acc: a,
                s2c_floats: 10,
                c2s_floats: 5,
                participants: vec![],
                dropped: vec![],
                labelmap_version: v,
            })
            .unwrap();
        }
        h
    }

    #[test]
    fn best_acc_examples() {
        let h = hist(&[0.3, 0.5, 0.4]);
        assert_eq!(best_acc_until(&h, 3).unwrap(), 0.5);
        assert_eq!(best_acc_until(&h, 1).unwrap(), 0.3);
        assert!(best_acc_until(&h, 4).is_err());
        assert!(best_acc_until(&h, 0).is_err());
        let mono = hist(&[0.1, 0.2, 0.3]);
        assert_eq!(best_acc_until(&mono, 2).unwrap(), 0.2);
    }

    #[test]
    fn rounds_must_be_consecutive() {
        let mut h = hist(&[0.1]);
        let mut r = h.records[0].clone();
        r.round = 3;
        assert!(h.push(r).is_err());
    }

    #[test]
    fn acc_at_x_examples() {
        assert_eq!(acc_at_x(&hist(&[0.1, 0.45]), 0.4), Some(2));
        assert_eq!(acc_at_x(&hist(&[0.1, 0.45]), 0.9), None);
    }

    #[test]
    fn brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..30);
            let accs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let h = hist(&accs);
            let mut prev = f64::NEG_INFINITY;
            for t in 1..=n {
                let mut m = f64::NEG_INFINITY;
                for a in &accs[..t] {
                    if *a > m {
                        m = *a;
                    }
                }
                let b = best_acc_until(&h, t).unwrap();
                assert_eq!(b, m);
                assert!(b >= prev);
                prev = b;
            }
            let x: f64 = rng.random();
            let mut scan = None;
            for (i, a) in accs.iter().enumerate() {
                if *a >= x {
                    scan = Some(i + 1);
                    break;
                }
            }
            assert_eq!(acc_at_x(&h, x), scan);
        }
    }

    proptest! {
        #[test]
        fn acc_at_x_is_antitone(
            accs in proptest::collection::vec(0.0f64..1.0, 1..40),
            x1 in 0.0f64..1.0,
            x2 in 0.0f64..1.0,
        ) {
            let h = hist(&accs);
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            let key = |r: Option<usize>| r.unwrap_or(usize::MAX);
            prop_assert!(key(acc_at_x(&h, hi)) >= key(acc_at_x(&h, lo)));
        }
    }

    #[test]
    fn concept_score_examples() {
        let h = hist(&[0.2, 0.6, 0.4]);
        let expected = (0.2 + 0.6 + 0.6) / 3.0;
        assert!((concept_shift_score(&h, true).unwrap() - expected).abs() < 1e-15);

        let c = hist(&[0.7; 5]);
        assert!((concept_shift_score(&c, true).unwrap() - 0.7).abs() < 1e-15);

        // Shift lands at round 4.
        let accs = [0.2, 0.5, 0.6, 0.1, 0.3, 0.25];
        let h = hist_versions(&accs, &[0, 0, 0, 1, 1, 1]);
        let prefix_max_reset = [0.2, 0.5, 0.6, 0.1, 0.3, 0.3];
        let expected: f64 = prefix_max_reset.iter().sum::<f64>() / 6.0;
        assert!((concept_shift_score(&h, true).unwrap() - expected).abs() < 1e-15);
        let prefix_max = [0.2, 0.5, 0.6, 0.6, 0.6, 0.6];
        let expected: f64 = prefix_max.iter().sum::<f64>() / 6.0;
        assert!((concept_shift_score(&h, false).unwrap() - expected).abs() < 1e-15);

        assert!(concept_shift_score(&RunHistory::new(Method::FedAvg, 0, ""), true).is_err());
    }

    fn with(method: Method, seed: u64, accs: &[f64]) -> RunHistory {
        let mut h = hist(accs);
        h.method = method;
        h.seed = seed;
        h
    }

    #[test]
    fn summary_arithmetic() {
        let runs = vec![
            with(Method::FedAvg, 0, &[0.1, 0.4]),
            with(Method::FedAvg, 1, &[0.2, 0.6]),
        ];
        let t = summarize(&runs, 8, 0.5).unwrap();
        let r = &t.rows[0];
        assert_eq!(r.epochs, 8);
        assert!((r.final_mean - 0.5).abs() < 1e-15);
        assert!((r.final_std.unwrap() - 0.1414213562373095).abs() < 1e-12);
        assert!((r.half_mean - 0.15).abs() < 1e-15);
        assert_eq!(r.acc_at_x, None);
        assert_eq!(r.comm_total_floats, 30.0);

        let same = vec![
            with(Method::FedFor, 0, &[0.3, 0.5]),
            with(Method::FedFor, 1, &[0.3, 0.5]),
        ];
        let t = summarize(&same, 1, 0.4).unwrap();
        assert_eq!(t.rows[0].final_std, Some(0.0));
        assert_eq!(t.rows[0].acc_at_x, Some(2.0));

        let single = summarize(&[with(Method::FedFor, 0, &[0.3])], 1, 0.4).unwrap();
        assert_eq!(single.rows[0].final_std, None);
    }

    #[test]
    fn summary_matches_two_pass_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let runs: Vec<RunHistory> = (0..3)
            .map(|s| {
                let accs: Vec<f64> = (0..10).map(|_| rng.random()).collect();
                with(Method::FedProx, s, &accs)
            })
            .collect();
        let finals: Vec<f64> = runs
            .iter()
            .map(|r| r.accuracies().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = finals.iter().sum::<f64>() / 3.0;
        let var = finals.iter().map(|f| (f - m).powi(2)).sum::<f64>() / 2.0;
        let t = summarize(&runs, 1, 0.5).unwrap();
        assert!((t.rows[0].final_mean - m).abs() < 1e-12);
        assert!((t.rows[0].final_std.unwrap() - var.sqrt()).abs() < 1e-12);

        let mut reversed = runs.clone();
        reversed.reverse();
        assert_eq!(summarize(&reversed, 1, 0.5).unwrap(), t);
    }

    #[test]
    fn mixed_digests_rejected() {
        let mut b = with(Method::FedAvg, 1, &[0.1]);
        b.digest = "other".into();
        let runs = vec![with(Method::FedAvg, 0, &[0.1]), b];
        assert!(matches!(
            summarize(&runs, 1, 0.5),
            Err(Error::MixedDigest(..))
        ));
    }

    #[test]
    fn median_rounds_treats_unreached_as_largest() {
        assert_eq!(median_rounds(&[Some(3), None, Some(5)]), Some(5.0));
        assert_eq!(median_rounds(&[None, None, Some(5)]), None);
        assert_eq!(median_rounds(&[Some(2), Some(4)]), Some(3.0));
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let accs: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let h = hist_versions(&accs, &[0, 0, 1, 1, 1, 2, 2]);
        let p = dir.path().join("m.csv");
        write_metrics_csv(&h, &p).unwrap();
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back, h);

        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# digest=abc");
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));

        let runs: Vec<RunHistory> = (0..3).map(|s| with(Method::FedFor, s, &accs)).collect();
        let mut t = summarize(&runs, 4, 0.3).unwrap();
        t.rows.push(SummaryRow {
            method: Method::FedCurv,
            epochs: 4,
            half_mean: 0.1,
            half_std: None,
            final_mean: 1.0 / 3.0,
            final_std: None,
            acc_at_x: None,
            comm_total_floats: 12.0,
        });
        let p = dir.path().join("s.csv");
        write_summary_csv(&t, &p).unwrap();
        assert_eq!(read_summary_csv(&p).unwrap(), t);
    }

    #[test]
    fn empty_summary_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = SummaryTable {
            digest: "d".into(),
            rows: vec![],
        };
        write_summary_csv(&t, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec![SUMMARY_HEADER.join(",")]);
        assert_eq!(read_summary_csv(&p).unwrap(), t);
    }

    #[test]
    fn io_errors_carry_path() {
        let p = Path::new("/nonexistent/dir/m.csv");
        let err = write_metrics_csv(&hist(&[0.1]), p).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/m.csv"));
    }
}
