//! Metric rows, nearest-rank percentiles and CSV I/O.

use std::io::{Read, Write};

pub const CSV_HEADER: [&str; 10] = [
    "scenario",
    "baseline",
    "clients",
    "payload",
    "p50_ns",
    "p99_ns",
    "p999_ns",
    "throughput_per_s",
    "wire_ops",
    "mem_bytes",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub baseline: String,
    pub clients: u64,
    pub payload: u64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub p999_ns: u64,
    pub throughput_per_s: f64,
    pub wire_ops: u64,
    pub mem_bytes: u64,
}

/// Nearest-rank percentile: the smallest sample with at least `p` percent
/// of the samples at or below it. `samples` need not be sorted.
pub fn percentile(samples: &[u64], p: f64) -> u64 {
    assert!(!samples.is_empty(), "percentile of an empty sample set");
    assert!(p > 0.0 && p <= 100.0, "percentile out of range: {p}");
    let mut s = samples.to_vec();
    s.sort_unstable();
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

impl MetricRow {
    /// Row with percentiles filled from `samples` and zero for the rest
    /// (all zero when there are no samples).
    pub fn from_samples(scenario: &str, baseline: &str, clients: u64, payload: u64, samples: &[u64]) -> Self {
        let pct = |p| if samples.is_empty() { 0 } else { percentile(samples, p) };
        Self {
            scenario: scenario.to_string(),
            baseline: baseline.to_string(),
            clients,
            payload,
            p50_ns: pct(50.0),
            p99_ns: pct(99.0),
            p999_ns: pct(99.9),
            throughput_per_s: 0.0,
            wire_ops: 0,
            mem_bytes: 0,
        }
    }

    fn record(&self) -> [String; 10] {
        [
            self.scenario.clone(),
            self.baseline.clone(),
            self.clients.to_string(),
            self.payload.to_string(),
            self.p50_ns.to_string(),
            self.p99_ns.to_string(),
            self.p999_ns.to_string(),
            format!("{:.3}", self.throughput_per_s),
            self.wire_ops.to_string(),
            self.mem_bytes.to_string(),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[MetricRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("row {row}: bad `{field}` value {value:?}")]
    Field {
        row: usize,
        field: &'static str,
        value: String,
    },
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricRow>, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CsvError::Header(header));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let int = |idx: usize| -> Result<u64, CsvError> {
            rec[idx].parse().map_err(|_| CsvError::Field {
                row: i + 1,
                field: CSV_HEADER[idx],
                value: rec[idx].to_string(),
            })
        };
        rows.push(MetricRow {
            scenario: rec[0].to_string(),
            baseline: rec[1].to_string(),
            clients: int(2)?,
            payload: int(3)?,
            p50_ns: int(4)?,
            p99_ns: int(5)?,
            p999_ns: int(6)?,
            throughput_per_s: rec[7].parse().map_err(|_| CsvError::Field {
                row: i + 1,
                field: CSV_HEADER[7],
                value: rec[7].to_string(),
            })?,
            wire_ops: int(8)?,
            mem_bytes: int(9)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_examples() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&s, 50.0), 50);
        assert_eq!(percentile(&s, 99.0), 99);
        assert_eq!(percentile(&s, 99.9), 100);
        assert_eq!(percentile(&[7], 50.0), 7);
        assert_eq!(percentile(&[3, 1, 2], 50.0), 2);
    }

    #[test]
    fn header_is_exact() {
        let csv = to_csv_string(&[]);
        assert_eq!(
            csv,
            "scenario,baseline,clients,payload,p50_ns,p99_ns,p999_ns,throughput_per_s,wire_ops,mem_bytes\n"
        );
    }

    proptest! {
        #[test]
        fn percentile_is_a_sample_with_enough_mass(
            s in prop::collection::vec(0u64..1000, 1..200),
            p in 1u32..=1000,
        ) {
            let p = p as f64 / 10.0;
            let v = percentile(&s, p);
            prop_assert!(s.contains(&v));
            let at_or_below = s.iter().filter(|x| **x <= v).count() as f64;
            let below = s.iter().filter(|x| **x < v).count() as f64;
            prop_assert!(at_or_below >= p / 100.0 * s.len() as f64 - 1e-9);
            prop_assert!(below < p / 100.0 * s.len() as f64);
        }

        #[test]
        fn csv_round_trip(n in 0usize..5, seed in any::<u64>()) {
            let rows: Vec<_> = (0..n as u64)
                .map(|i| MetricRow {
                    scenario: format!("s{i}"),
                    baseline: "krcore".into(),
                    clients: i,
                    payload: seed % 100,
                    p50_ns: seed % 7,
                    p99_ns: seed % 11,
                    p999_ns: seed % 13,
                    throughput_per_s: (seed % 1000) as f64 + 0.5,
                    wire_ops: i * 3,
                    mem_bytes: seed >> 20,
                })
                .collect();
            let back = read_csv(to_csv_string(&rows).as_bytes()).unwrap();
            prop_assert_eq!(back, rows);
        }
    }
}
