//! Acceptance criteria. Scenario-based checks read their numbers back from
//! the CSV the scenario produced; property checks run the conformance suites.

use std::fmt;

use vqp_core::batch;
use vqp_core::conformance::{equivalence, messaging, safety};
use vqp_core::nic::WcStatus;
use vqp_core::vplane::VqpError;

use crate::config::{Baseline, Scenario, ScenarioConfig};
use crate::metrics::{read_csv, to_csv_string, MetricRow};
use crate::scenarios::{self, krcore_model_bytes, VQP_STATE_BYTES};

pub const CRITERIA: u32 = 13;
/// Preset every ratio check runs under.
pub const PRESET: &str = "fig3b";

#[derive(Clone, Debug)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "[{v}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

/// All criteria, in id order. Independent criteria run on the batch pool.
pub fn run_all() -> Vec<Check> {
    batch::map((1..=CRITERIA).collect(), run)
}

/// Runs one criterion; a panic inside it counts as a failure.
pub fn run(id: u32) -> Check {
    let name = id.checked_sub(1).and_then(|i| NAMES.get(i as usize)).copied().unwrap_or("unknown");
    let r = std::panic::catch_unwind(|| evaluate(id)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { id, name, pass, detail }
}

const NAMES: [&str; CRITERIA as usize] = [
    "cold/warm qconnect READs",
    "single-connect latency",
    "full mesh 240 workers",
    "memory model at 5000 connections",
    "shared QP safety",
    "dispatch totality, FIFO, slot conservation",
    "oracle equivalence",
    "transfer transparency",
    "zero-copy threshold",
    "MR lease boundary",
    "sync READ latency and MR miss",
    "DC pool sweep",
    "load spike startup",
];

fn evaluate(id: u32) -> Result<(bool, String), String> {
    match id {
        1 => connect_reads(),
        2 => single_connect(),
        3 => full_mesh(),
        4 => memory(),
        5 => safety_check(),
        6 => dispatch(),
        7 => oracle(),
        8 => transparency(),
        9 => zero_copy(),
        10 => lease(),
        11 => data_path(),
        12 => pool_sweep(),
        13 => load_spike(),
        _ => Err(format!("no criterion {id}")),
    }
}

/// True when `x` is within relative tolerance `tol` of `target`.
pub fn within(x: f64, target: f64, tol: f64) -> bool {
    ((x - target) / target).abs() <= tol
}

fn config(s: Scenario, b: Baseline) -> ScenarioConfig {
    ScenarioConfig::new(s, b, PRESET).expect("built-in preset")
}

/// Runs a scenario and returns its rows as read back from CSV.
fn csv_rows(cfg: &ScenarioConfig) -> Result<Vec<MetricRow>, String> {
    let rows = scenarios::run(cfg).map_err(|e| e.to_string())?;
    read_csv(to_csv_string(&rows).as_bytes()).map_err(|e| e.to_string())
}

fn run_csv(s: Scenario, b: Baseline) -> Result<Vec<MetricRow>, String> {
    csv_rows(&config(s, b))
}

fn find<'a>(rows: &'a [MetricRow], label: &str) -> Result<&'a MetricRow, String> {
    rows.iter()
        .find(|r| r.baseline == label)
        .ok_or_else(|| format!("no `{label}` row"))
}

fn connect_reads() -> Result<(bool, String), String> {
    let rows = run_csv(Scenario::SingleConnect, Baseline::Krcore)?;
    let (cold, warm) = (find(&rows, "krcore")?.wire_ops, find(&rows, "krcore-warm")?.wire_ops);
    Ok((cold == 2 && warm == 0, format!("cold {cold} wire ops, warm {warm}")))
}

fn single_connect() -> Result<(bool, String), String> {
    let t = |b| -> Result<f64, String> {
        let rows = run_csv(Scenario::SingleConnect, b)?;
        Ok(find(&rows, b.name())?.p50_ns as f64)
    };
    let (k, v, l) = (t(Baseline::Krcore)?, t(Baseline::Verbs)?, t(Baseline::Lite)?);
    let pass = within(k, 5_400.0, 0.10)
        && within(v, 15.7e6, 0.10)
        && within(l, 2.0e6, 0.10)
        && within(v / k, 2900.0, 0.10)
        && within(l / k, 370.0, 0.10);
    Ok((
        pass,
        format!(
            "krcore {:.2}us, verbs {:.2}ms, lite {:.2}ms; verbs/krcore {:.0}X (2900X +-10%), lite/krcore {:.0}X (370X +-10%)",
            k / 1e3,
            v / 1e6,
            l / 1e6,
            v / k,
            l / k
        ),
    ))
}

fn full_mesh() -> Result<(bool, String), String> {
    // per-worker finish times: p999 of 240 samples is the last worker
    let total = |b| -> Result<f64, String> {
        let rows = run_csv(Scenario::FullMesh, b)?;
        Ok(find(&rows, b.name())?.p999_ns as f64)
    };
    let (k, v, l) = (total(Baseline::Krcore)?, total(Baseline::Verbs)?, total(Baseline::Lite)?);
    let reduction = 1.0 - k / v;
    let pass = k <= 100_000.0
        && within(v, 2.7e9, 0.10)
        && within(l, 2.3e9, 0.10)
        && reduction >= 0.99
        && l / k >= 25.0;
    Ok((
        pass,
        format!(
            "krcore {:.1}us (<=100us), verbs {:.3}s, lite {:.3}s, reduction vs verbs {:.4}%, lite/krcore {:.0}X",
            k / 1e3,
            v / 1e9,
            l / 1e9,
            reduction * 100.0,
            l / k
        ),
    ))
}

fn memory() -> Result<(bool, String), String> {
    let k = run_csv(Scenario::MemoryModel, Baseline::Krcore)?;
    let l = run_csv(Scenario::MemoryModel, Baseline::Lite)?;
    let at = |rows: &[MetricRow], n| -> Result<f64, String> {
        rows.iter()
            .find(|r| r.clients == n)
            .map(|r| r.mem_bytes as f64)
            .ok_or_else(|| format!("no row for {n} connections"))
    };
    let (km, lm) = (at(&k, 5000)?, at(&l, 5000)?);
    let base = krcore_model_bytes(&config(Scenario::MemoryModel, Baseline::Krcore).cost, 0);
    // flat apart from the per-VQP record
    let flat = k.iter().all(|r| r.mem_bytes == base + VQP_STATE_BYTES * r.clients);
    let pass = within(lm, 780e6, 0.05) && within(km, 6.3e6, 0.05) && flat;
    Ok((
        pass,
        format!(
            "lite {:.1}MB (780MB +-5%), krcore {:.2}MB (6.3MB +-5%), krcore = fixed + 12B*N: {flat}",
            lm / 1e6,
            km / 1e6
        ),
    ))
}

fn safety_check() -> Result<(bool, String), String> {
    let r = safety::safety_suite(10_000)?;
    Ok((
        r.cases == 10_000 && r.raw_errs >= 1,
        format!("{} cases, shared QP never in ERR; raw QP reached ERR in {}", r.cases, r.raw_errs),
    ))
}

fn dispatch() -> Result<(bool, String), String> {
    let r = safety::dispatch_suite(1_000)?;
    Ok((r.cases == 1_000, format!("{} cases of well-formed lists over one shared QP", r.cases)))
}

fn oracle() -> Result<(bool, String), String> {
    let n = equivalence::equivalence_suite(1_000)?;
    Ok((n == 1_000, format!("{n} streams identical to the raw-verbs oracle")))
}

fn transparency() -> Result<(bool, String), String> {
    let (n, mid) = equivalence::transparency_suite(1_000)?;
    Ok((
        n == 1_000 && mid > 0,
        format!("{n} streams identical across a transfer ({mid} swapped mid-stream)"),
    ))
}

fn zero_copy() -> Result<(bool, String), String> {
    let threshold = vqp_core::CostModel::default().kernel_buf_bytes as u32;
    let mut pass = true;
    let mut parts = Vec::new();
    for (len, want) in [(200, (1, 0)), (threshold, (1, 0)), (threshold + 1, (1, 1))] {
        let (got, sends, reads, st) = messaging::one_message(len);
        let intact = st == WcStatus::Ok && got == (0..len).map(|i| (i % 251) as u8).collect::<Vec<_>>();
        pass &= intact && (sends, reads) == want;
        parts.push(format!("{len}B: {sends} send + {reads} READ"));
    }
    Ok((pass, parts.join(", ")))
}

fn lease() -> Result<(bool, String), String> {
    let (early, late) = messaging::lease_probe();
    let pass = early.is_ok() && matches!(late, Err(VqpError::Rejected { .. }));
    Ok((pass, format!("lease-1ns: {early:?}, lease+1ns: {}", late.map_or_else(|e| e.to_string(), |_| "accepted".into()))))
}

fn data_path() -> Result<(bool, String), String> {
    let k = run_csv(Scenario::DataPath, Baseline::Krcore)?;
    let v = run_csv(Scenario::DataPath, Baseline::Verbs)?;
    let verbs = find(&v, "verbs")?.p50_ns as f64;
    let rc = find(&k, "krcore-rc")?;
    let dc = find(&k, "krcore-dc")?.p50_ns as f64;
    let miss = find(&k, "krcore-rc/first")?.p50_ns as f64 - rc.p50_ns as f64;
    // every request after the first is at the steady latency
    let only_first = rc.p999_ns == rc.p50_ns;
    let pass = within(verbs, 2_150.0, 0.05)
        && within(rc.p50_ns as f64, 3_150.0, 0.05)
        && within(dc, 3_240.0, 0.05)
        && within(miss, 4_500.0, 0.10)
        && only_first;
    Ok((
        pass,
        format!(
            "verbs {:.2}us, krcore-rc {:.2}us, krcore-dc {:.2}us (+-5%); MR miss +{:.2}us (4.5us +-10%), first request only: {only_first}",
            verbs / 1e3,
            rc.p50_ns as f64 / 1e3,
            dc / 1e3,
            miss / 1e3
        ),
    ))
}

fn pool_sweep() -> Result<(bool, String), String> {
    let rows = run_csv(Scenario::PoolSweep, Baseline::Krcore)?;
    let rc = find(&rows, "krcore-rc")?.p50_ns as f64;
    let dc: Vec<u64> = (1..=8)
        .map(|p| find(&rows, &format!("krcore-dc-p{p}")).map(|r| r.p50_ns))
        .collect::<Result<_, _>>()?;
    let ratio = dc[0] as f64 / rc;
    let monotone = dc.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        within(ratio, 1.32, 0.15) && monotone,
        format!(
            "pool=1 DC/RC {ratio:.3} (1.32 +-15%); DC pool 1..8 {:?}us non-increasing: {monotone}",
            dc.iter().map(|d| (*d as f64 / 1e3 * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    ))
}

fn load_spike() -> Result<(bool, String), String> {
    let cfgs: Vec<ScenarioConfig> = [Baseline::Krcore, Baseline::Krcore, Baseline::Verbs, Baseline::Lite]
        .into_iter()
        .map(|b| config(Scenario::LoadSpike, b))
        .collect();
    let out: Vec<Result<String, String>> = batch::map(cfgs, |c| {
        let rows = scenarios::run(&c).map_err(|e| e.to_string())?;
        Ok(to_csv_string(&rows))
    });
    let csv: Vec<String> = out.into_iter().collect::<Result<_, _>>()?;
    let startup = |text: &str, b: Baseline| -> Result<f64, String> {
        let rows = read_csv(text.as_bytes()).map_err(|e| e.to_string())?;
        Ok(find(&rows, &format!("{}/startup", b.name()))?.p999_ns as f64)
    };
    let k = startup(&csv[0], Baseline::Krcore)?;
    let v = startup(&csv[2], Baseline::Verbs)?;
    let l = startup(&csv[3], Baseline::Lite)?;
    let same = csv[0] == csv[1];
    let (kv, kl) = (k / v * 100.0, k / l * 100.0);
    let pass = (kv - 17.0).abs() <= 5.0 && (kl - 24.0).abs() <= 5.0 && same;
    Ok((
        pass,
        format!(
            "krcore startup {:.0}ms = {kv:.1}% of verbs ({:.0}ms, 17% +-5), {kl:.1}% of lite ({:.0}ms, 24% +-5); identical CSV across runs: {same}",
            k / 1e6,
            v / 1e6,
            l / 1e6
        ),
    ))
}
