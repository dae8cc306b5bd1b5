//! Closed-form per-node QP memory at N connections.

use vqp_core::CostModel;

use crate::config::{Baseline, ScenarioConfig};
use crate::metrics::MetricRow;

/// DC QPs a fully populated node keeps: the sub-pool size times the CPU count.
pub const MODEL_DC_QPS: u64 = 48;

/// Per-VQP kernel state (id, physical QP index, completion counter).
pub const VQP_STATE_BYTES: u64 = 12;

/// One RC QP per connection.
pub fn lite_model_bytes(cost: &CostModel, n: u64) -> u64 {
    n * cost.rc_qp_mem_bytes
}

/// A fixed DC pool plus a small per-VQP record.
pub fn krcore_model_bytes(cost: &CostModel, n: u64) -> u64 {
    MODEL_DC_QPS * cost.dc_qp_mem_bytes + VQP_STATE_BYTES * n
}

/// Connection counts swept, capped at `max`.
pub fn sweep_points(max: u64) -> Vec<u64> {
    let mut pts: Vec<u64> = [0, 1, 10, 100, 500]
        .into_iter()
        .chain((1..=10).map(|k| k * 1000))
        .filter(|n| *n <= max)
        .collect();
    if pts.last() != Some(&max) {
        pts.push(max);
    }
    pts
}

pub fn memory_model(cfg: &ScenarioConfig) -> Vec<MetricRow> {
    let bytes = |n| match cfg.baseline {
        Baseline::Krcore => krcore_model_bytes(&cfg.cost, n),
        // verbs holds one RC QP per connection just like LITE
        Baseline::Verbs | Baseline::Lite => lite_model_bytes(&cfg.cost, n),
    };
    sweep_points(cfg.clients)
        .into_iter()
        .map(|n| MetricRow {
            mem_bytes: bytes(n),
            ..MetricRow::from_samples(cfg.scenario.name(), cfg.baseline.name(), n, cfg.payload, &[])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_thousand_connections() {
        let c = CostModel::default();
        assert_eq!(lite_model_bytes(&c, 5000), 5000 * 162_816);
        assert_eq!(krcore_model_bytes(&c, 5000), 48 * 130_000 + 60_000);
    }

    #[test]
    fn sweep_ends_at_max() {
        assert_eq!(sweep_points(5000).last(), Some(&5000));
        assert_eq!(sweep_points(42), vec![0, 1, 10, 42]);
        assert_eq!(sweep_points(0), vec![0]);
    }
}
