//! Cost model and key=value configuration.
//!
//! Every field of [`CostModel`] is a config key. Durations accept an optional
//! `ns`/`us`/`ms`/`s` suffix and are stored as integer nanoseconds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::simcore::Nanos;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

/// All timing, sizing and policy constants of the simulated cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    // fabric
    pub wire_latency_ns: Nanos,
    /// One-way latency between any node and the meta server.
    pub meta_latency_ns: Nanos,
    /// Kernel round trip per data-path request; each crossing pays half.
    pub syscall_overhead_ns: Nanos,
    /// One control-path kernel crossing (vqp_create, qconnect, qbind).
    pub ctrl_syscall_ns: Nanos,
    pub event_budget: u64,

    // rnic control path
    pub init_ns: Nanos,
    pub create_qp_ns: Nanos,
    pub configure_qp_ns: Nanos,
    pub handshake_ns: Nanos,
    pub register_mr_ns: Nanos,
    pub qp_budget: usize,

    // rnic data path
    pub dc_reconnect_ns: Nanos,
    pub dc_op_extra_ns: Nanos,
    pub data_op_base_ns: Nanos,
    /// Wire transfer cost in picoseconds per byte (config key `per_byte_ns`, decimal).
    pub per_byte_ps: u64,
    /// Per-request occupancy of a NIC's processing pipeline (both ends).
    pub nic_op_ns: Nanos,
    /// In-kernel memory copy cost in picoseconds per byte.
    pub copy_ps_per_byte: u64,

    // memory model
    pub rc_qp_mem_bytes: u64,
    pub dc_qp_mem_bytes: u64,
    pub sq_entry_bytes: u64,
    pub cq_entry_bytes: u64,
    pub dct_meta_bytes: u64,

    // meta server
    pub meta_entry_bytes: u64,
    pub meta_read_bytes: u64,
    pub lookup_round_trips: u32,
    pub rpc_service_ns: Nanos,

    // virtualization layer
    pub dc_pool_size: usize,
    pub cpus_per_node: usize,
    pub lease_ns: Nanos,
    pub kernel_buf_bytes: u64,
    pub kernel_backlog: usize,
    pub transfer_ack_timeout_ns: Nanos,
    pub sq_depth: u32,
    pub cq_depth: u32,
    pub rq_depth: u32,

    // background promoter
    pub bgd_window_ns: Nanos,
    pub bgd_threshold: u64,
    pub bgd_rc_capacity: usize,
    pub bgd_retry_base_ns: Nanos,
    pub bgd_retry_cap_ns: Nanos,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            wire_latency_ns: 1_000,
            meta_latency_ns: 1_000,
            syscall_overhead_ns: 1_000,
            ctrl_syscall_ns: 450,
            event_budget: 50_000_000,

            init_ns: 13_700_000,
            create_qp_ns: 413_000,
            configure_qp_ns: 1_210_200,
            handshake_ns: 376_800,
            register_mr_ns: 1_400,
            qp_budget: 65_536,

            dc_reconnect_ns: 1_000,
            dc_op_extra_ns: 90,
            data_op_base_ns: 117,
            per_byte_ps: 80,
            nic_op_ns: 16,
            copy_ps_per_byte: 100,

            // 292 * 448 + 257 * 64 = 147,264 raw; +15,552 driver rounding = 159KiB
            rc_qp_mem_bytes: 162_816,
            // 48 * 130,000 + 5000 * 12 ~= 6.3MB
            dc_qp_mem_bytes: 130_000,
            sq_entry_bytes: 448,
            cq_entry_bytes: 64,
            dct_meta_bytes: 12,

            meta_entry_bytes: 17,
            meta_read_bytes: 1_024,
            lookup_round_trips: 2,
            rpc_service_ns: 380,

            dc_pool_size: 8,
            cpus_per_node: 24,
            lease_ns: 1_000_000_000,
            kernel_buf_bytes: 16 * 1024,
            kernel_backlog: 64,
            transfer_ack_timeout_ns: 1_000_000,
            sq_depth: 292,
            cq_depth: 257,
            rq_depth: 256,

            bgd_window_ns: 1_000_000_000,
            bgd_threshold: 64,
            bgd_rc_capacity: 16,
            bgd_retry_base_ns: 1_000_000,
            bgd_retry_cap_ns: 1_000_000_000,
        }
    }
}

/// Names of the built-in presets with a one-line description each.
pub const PRESETS: &[(&str, &str)] = &[
    ("default", "round-number defaults; dc reconnect 1us"),
    (
        "fig3b",
        "control-path split read off the published breakdown (approximate), data-path calibrated to the reported 1-client latencies",
    ),
];

impl CostModel {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "default" => Ok(Self::default()),
            "fig3b" => Ok(Self {
                // calibrated: pool=1 DC batch vs RC batch ~1.32
                dc_reconnect_ns: 1_420,
                ..Self::default()
            }),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Total user-space verbs control path for one connection.
    pub fn verbs_control_path_ns(&self) -> Nanos {
        self.init_ns + self.create_qp_ns + self.configure_qp_ns + self.handshake_ns
    }

    /// Kernel-pool (LITE-style) control path: no driver init.
    pub fn lite_control_path_ns(&self) -> Nanos {
        self.create_qp_ns + self.configure_qp_ns + self.handshake_ns
    }

    pub fn syscall_half_ns(&self) -> Nanos {
        self.syscall_overhead_ns / 2
    }

    /// Wire serialization time for `bytes`, rounded up to whole nanoseconds.
    pub fn transfer_ns(&self, bytes: u64) -> Nanos {
        (bytes * self.per_byte_ps).div_ceil(1_000)
    }

    pub fn copy_ns(&self, bytes: u64) -> Nanos {
        (bytes * self.copy_ps_per_byte).div_ceil(1_000)
    }

    /// Latency of one uncontended one-sided op over a path with one-way latency `wire`.
    pub fn one_sided_latency_ns(&self, wire: Nanos, bytes: u64) -> Nanos {
        2 * self.nic_op_ns + 2 * wire + self.data_op_base_ns + self.transfer_ns(bytes)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(base: &str, text: &str) -> Result<Self, ConfigError> {
        let mut m = Self::preset(base)?;
        m.apply_text(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive: [(&str, u64); 20] = [
            ("wire_latency_ns", self.wire_latency_ns),
            ("meta_latency_ns", self.meta_latency_ns),
            ("syscall_overhead_ns", self.syscall_overhead_ns),
            ("create_qp_ns", self.create_qp_ns),
            ("configure_qp_ns", self.configure_qp_ns),
            ("handshake_ns", self.handshake_ns),
            ("dc_reconnect_ns", self.dc_reconnect_ns),
            ("data_op_base_ns", self.data_op_base_ns),
            ("per_byte_ns", self.per_byte_ps),
            ("nic_op_ns", self.nic_op_ns),
            ("rc_qp_mem_bytes", self.rc_qp_mem_bytes),
            ("dc_qp_mem_bytes", self.dc_qp_mem_bytes),
            ("sq_entry_bytes", self.sq_entry_bytes),
            ("cq_entry_bytes", self.cq_entry_bytes),
            ("lease_ns", self.lease_ns),
            ("dc_pool_size", self.dc_pool_size as u64),
            ("cpus_per_node", self.cpus_per_node as u64),
            ("sq_depth", self.sq_depth as u64),
            ("cq_depth", self.cq_depth as u64),
            ("lookup_round_trips", self.lookup_round_trips as u64),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::BadValue {
                    key: k.to_string(),
                    value: "0".into(),
                    reason: "must be strictly positive".into(),
                });
            }
        }
        Ok(())
    }

    /// Renders every key in `key = value` form (loadable by [`CostModel::apply_text`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        macro_rules! put {
            ($($key:literal => $val:expr),* $(,)?) => { $( m.insert($key, $val.to_string()); )* };
        }
        put! {
            "wire_latency_ns" => self.wire_latency_ns,
            "meta_latency_ns" => self.meta_latency_ns,
            "syscall_overhead_ns" => self.syscall_overhead_ns,
            "ctrl_syscall_ns" => self.ctrl_syscall_ns,
            "event_budget" => self.event_budget,
            "init_ns" => self.init_ns,
            "create_qp_ns" => self.create_qp_ns,
            "configure_qp_ns" => self.configure_qp_ns,
            "handshake_ns" => self.handshake_ns,
            "register_mr_ns" => self.register_mr_ns,
            "qp_budget" => self.qp_budget,
            "dc_reconnect_ns" => self.dc_reconnect_ns,
            "dc_op_extra_ns" => self.dc_op_extra_ns,
            "data_op_base_ns" => self.data_op_base_ns,
            "per_byte_ns" => format_ps(self.per_byte_ps),
            "nic_op_ns" => self.nic_op_ns,
            "copy_ns_per_byte" => format_ps(self.copy_ps_per_byte),
            "rc_qp_mem_bytes" => self.rc_qp_mem_bytes,
            "dc_qp_mem_bytes" => self.dc_qp_mem_bytes,
            "sq_entry_bytes" => self.sq_entry_bytes,
            "cq_entry_bytes" => self.cq_entry_bytes,
            "dct_meta_bytes" => self.dct_meta_bytes,
            "meta_entry_bytes" => self.meta_entry_bytes,
            "meta_read_bytes" => self.meta_read_bytes,
            "lookup_round_trips" => self.lookup_round_trips,
            "rpc_service_ns" => self.rpc_service_ns,
            "dc_pool_size" => self.dc_pool_size,
            "cpus_per_node" => self.cpus_per_node,
            "lease_ns" => self.lease_ns,
            "kernel_buf_bytes" => self.kernel_buf_bytes,
            "kernel_backlog" => self.kernel_backlog,
            "transfer_ack_timeout_ns" => self.transfer_ack_timeout_ns,
            "sq_depth" => self.sq_depth,
            "cq_depth" => self.cq_depth,
            "rq_depth" => self.rq_depth,
            "bgd.window_ns" => self.bgd_window_ns,
            "bgd.threshold" => self.bgd_threshold,
            "bgd.rc_capacity" => self.bgd_rc_capacity,
            "bgd.retry_base_ns" => self.bgd_retry_base_ns,
            "bgd.retry_cap_ns" => self.bgd_retry_cap_ns,
        }
        m
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let dur = |v: &str| parse_duration(key, v);
        let int = |v: &str| parse_int(key, v);
        match key {
            "wire_latency_ns" => self.wire_latency_ns = dur(value)?,
            "meta_latency_ns" => self.meta_latency_ns = dur(value)?,
            "syscall_overhead_ns" => self.syscall_overhead_ns = dur(value)?,
            "ctrl_syscall_ns" => self.ctrl_syscall_ns = dur(value)?,
            "event_budget" => self.event_budget = int(value)?,
            "init_ns" => self.init_ns = dur(value)?,
            "create_qp_ns" => self.create_qp_ns = dur(value)?,
            "configure_qp_ns" => self.configure_qp_ns = dur(value)?,
            "handshake_ns" => self.handshake_ns = dur(value)?,
            "register_mr_ns" => self.register_mr_ns = dur(value)?,
            "qp_budget" => self.qp_budget = int(value)? as usize,
            "dc_reconnect_ns" => self.dc_reconnect_ns = dur(value)?,
            "dc_op_extra_ns" => self.dc_op_extra_ns = dur(value)?,
            "data_op_base_ns" => self.data_op_base_ns = dur(value)?,
            "per_byte_ns" => self.per_byte_ps = parse_ps(key, value)?,
            "nic_op_ns" => self.nic_op_ns = dur(value)?,
            "copy_ns_per_byte" => self.copy_ps_per_byte = parse_ps(key, value)?,
            "rc_qp_mem_bytes" => self.rc_qp_mem_bytes = int(value)?,
            "dc_qp_mem_bytes" => self.dc_qp_mem_bytes = int(value)?,
            "sq_entry_bytes" => self.sq_entry_bytes = int(value)?,
            "cq_entry_bytes" => self.cq_entry_bytes = int(value)?,
            "dct_meta_bytes" => self.dct_meta_bytes = int(value)?,
            "meta_entry_bytes" => self.meta_entry_bytes = int(value)?,
            "meta_read_bytes" => self.meta_read_bytes = int(value)?,
            "lookup_round_trips" => self.lookup_round_trips = int(value)? as u32,
            "rpc_service_ns" => self.rpc_service_ns = dur(value)?,
            "dc_pool_size" => self.dc_pool_size = int(value)? as usize,
            "cpus_per_node" => self.cpus_per_node = int(value)? as usize,
            "lease_ns" => self.lease_ns = dur(value)?,
            "kernel_buf_bytes" => self.kernel_buf_bytes = int(value)?,
            "kernel_backlog" => self.kernel_backlog = int(value)? as usize,
            "transfer_ack_timeout_ns" => self.transfer_ack_timeout_ns = dur(value)?,
            "sq_depth" => self.sq_depth = int(value)? as u32,
            "cq_depth" => self.cq_depth = int(value)? as u32,
            "rq_depth" => self.rq_depth = int(value)? as u32,
            "bgd.window_ns" => self.bgd_window_ns = dur(value)?,
            "bgd.threshold" => self.bgd_threshold = int(value)?,
            "bgd.rc_capacity" => self.bgd_rc_capacity = int(value)? as usize,
            "bgd.retry_base_ns" => self.bgd_retry_base_ns = dur(value)?,
            "bgd.retry_cap_ns" => self.bgd_retry_cap_ns = dur(value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_int(key: &str, value: &str) -> Result<u64, ConfigError> {
    value
        .replace('_', "")
        .parse::<u64>()
        .map_err(|e| bad(key, value, e.to_string()))
}

/// Parses `413us`, `1.4us`, `15.7ms`, `2s` or a bare nanosecond count.
pub fn parse_duration(key: &str, value: &str) -> Result<Nanos, ConfigError> {
    let v = value.trim().replace('_', "");
    let (num, scale) = if let Some(n) = v.strip_suffix("ns") {
        (n, 1u64)
    } else if let Some(n) = v.strip_suffix("us") {
        (n, 1_000)
    } else if let Some(n) = v.strip_suffix("ms") {
        (n, 1_000_000)
    } else if let Some(n) = v.strip_suffix('s') {
        (n, 1_000_000_000)
    } else {
        (v.as_str(), 1)
    };
    scaled_decimal(num.trim(), scale).ok_or_else(|| bad(key, value, "not a duration"))
}

fn parse_ps(key: &str, value: &str) -> Result<u64, ConfigError> {
    scaled_decimal(value.trim(), 1_000).ok_or_else(|| bad(key, value, "not a decimal number"))
}

/// Exact decimal-to-integer scaling (no floating point). Rejects sub-unit remainders.
fn scaled_decimal(num: &str, scale: u64) -> Option<u64> {
    let (int, frac) = match num.split_once('.') {
        Some((i, f)) => (i, f),
        None => (num, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    let int_v: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let mut total = int_v.checked_mul(scale)?;
    let mut place = scale;
    for ch in frac.chars() {
        let d = ch.to_digit(10)? as u64;
        if place % 10 != 0 {
            if d != 0 {
                return None;
            }
            continue;
        }
        place /= 10;
        total = total.checked_add(d * place)?;
    }
    Some(total)
}

fn format_ps(ps: u64) -> String {
    format!("{}.{:03}", ps / 1000, ps % 1000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_parse_exactly() {
        assert_eq!(parse_duration("k", "413us"), Ok(413_000));
        assert_eq!(parse_duration("k", "15.7ms"), Ok(15_700_000));
        assert_eq!(parse_duration("k", "1.4us"), Ok(1_400));
        assert_eq!(parse_duration("k", "2s"), Ok(2_000_000_000));
        assert_eq!(parse_duration("k", "1_000"), Ok(1_000));
        assert!(parse_duration("k", "1.0005ns").is_err());
        assert!(parse_duration("k", "fast").is_err());
    }

    #[test]
    fn per_byte_is_fractional() {
        let mut m = CostModel::default();
        m.set("per_byte_ns", "0.08").unwrap();
        assert_eq!(m.per_byte_ps, 80);
        assert_eq!(m.transfer_ns(8), 1);
        assert_eq!(m.transfer_ns(262_144), 20_972);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut m = CostModel::default();
        assert_eq!(
            m.apply_text("bogus = 3"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
    }

    #[test]
    fn text_round_trips() {
        let m = CostModel::preset("fig3b").unwrap();
        let back = CostModel::from_text("default", &m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn comments_and_blank_lines() {
        let m = CostModel::from_text(
            "default",
            "# cost file\n\ncreate_qp_ns = 400us # override\nbgd.threshold=10\n",
        )
        .unwrap();
        assert_eq!(m.create_qp_ns, 400_000);
        assert_eq!(m.bgd_threshold, 10);
    }

    #[test]
    fn zero_latency_rejected() {
        assert!(CostModel::from_text("default", "wire_latency_ns = 0").is_err());
    }

    #[test]
    fn handshake_share_of_verbs_path() {
        let m = CostModel::preset("fig3b").unwrap();
        assert_eq!(m.verbs_control_path_ns(), 15_700_000);
        assert_eq!(m.lite_control_path_ns(), 2_000_000);
        // 2.4% exactly
        assert_eq!(m.handshake_ns * 1000, m.verbs_control_path_ns() * 24);
    }

    #[test]
    fn rc_qp_memory_is_159k() {
        let m = CostModel::default();
        let raw = 292 * m.sq_entry_bytes + 257 * m.cq_entry_bytes;
        assert_eq!(raw, 147_264);
        assert_eq!(m.rc_qp_mem_bytes, 159 * 1024);
    }

    #[test]
    fn one_sided_8b_read_is_2150() {
        let m = CostModel::default();
        assert_eq!(m.one_sided_latency_ns(m.wire_latency_ns, 8), 2_150);
    }
}
