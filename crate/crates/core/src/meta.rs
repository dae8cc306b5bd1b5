//! Meta server state: DCT metadata of every bound endpoint plus the ValidMR
//! store. Lookups are priced by the caller as one-sided READs (no server CPU);
//! the RPC baseline goes through a single simulated worker.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::addr::{Gid, NodeId};
use crate::nic::{DctTarget, Perms};
use crate::simcore::Nanos;

/// Serialized value size: 4B dct_num + 8B dct_key.
pub const DCT_META_BYTES: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetaError {
    #[error("no metadata for {0:?}")]
    NotFound(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MrEntry {
    pub base: u64,
    pub length: u64,
    pub perms: Perms,
    /// Cleared immediately on deregistration; the entry itself lingers for one lease.
    pub valid: bool,
    pub deregistered_at: Option<Nanos>,
}

impl MrEntry {
    pub fn allows(&self, addr: u64, len: u64, write: bool) -> bool {
        self.valid
            && addr >= self.base
            && addr
                .checked_add(len)
                .is_some_and(|end| end <= self.base + self.length)
            && if write { self.perms.write } else { self.perms.read }
    }
}

#[derive(Clone, Debug)]
pub struct MetaServerState {
    pub entries: BTreeMap<NodeId, DctTarget>,
    pub mr_entries: BTreeMap<(Gid, u32), MrEntry>,
    pub lookup_round_trips: u32,
    pub entry_bytes: u64,
    /// Requests served by the server CPU (RPC baseline only).
    pub cpu_events: u64,
}

impl MetaServerState {
    pub fn new(lookup_round_trips: u32, entry_bytes: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            mr_entries: BTreeMap::new(),
            lookup_round_trips,
            entry_bytes,
            cpu_events: 0,
        }
    }

    pub fn broadcast_meta(&mut self, node: NodeId, target: DctTarget) {
        self.entries.insert(node, target);
    }

    /// Owner declared down: its metadata and MRs go away.
    pub fn remove_node(&mut self, gid: Gid) {
        self.entries.retain(|k, _| k.gid != gid);
        self.mr_entries.retain(|k, _| k.0 != gid);
    }

    pub fn lookup(&self, node: NodeId) -> Result<DctTarget, MetaError> {
        self.entries.get(&node).copied().ok_or(MetaError::NotFound(node))
    }

    pub fn store_bytes(&self) -> u64 {
        self.entries.len() as u64 * self.entry_bytes
    }

    pub fn record_mr(&mut self, gid: Gid, rkey: u32, base: u64, length: u64, perms: Perms) {
        self.mr_entries.insert(
            (gid, rkey),
            MrEntry {
                base,
                length,
                perms,
                valid: true,
                deregistered_at: None,
            },
        );
    }

    pub fn invalidate_mr(&mut self, gid: Gid, rkey: u32, now: Nanos) {
        if let Some(e) = self.mr_entries.get_mut(&(gid, rkey)) {
            e.valid = false;
            e.deregistered_at = Some(now);
        }
    }

    pub fn forget_mr(&mut self, gid: Gid, rkey: u32) {
        self.mr_entries.remove(&(gid, rkey));
    }

    pub fn mr(&self, gid: Gid, rkey: u32) -> Option<MrEntry> {
        self.mr_entries.get(&(gid, rkey)).copied()
    }

    /// CSV dump: gid, port, dct_num, dct_key.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("gid,port,dct_num,dct_key\n");
        for (k, t) in &self.entries {
            let _ = writeln!(out, "{},{},{},{:#x}", k.gid, k.port, t.dct_num, t.dct_key);
        }
        out
    }
}

/// Single-worker RPC server used by the comparison baseline.
#[derive(Clone, Debug, Default)]
pub struct RpcWorker {
    busy_until: Nanos,
}

impl RpcWorker {
    /// Request arriving at `arrival` finishes service at the returned time.
    pub fn serve(&mut self, arrival: Nanos, service_ns: Nanos) -> Nanos {
        let start = arrival.max(self.busy_until);
        self.busy_until = start + service_ns;
        self.busy_until
    }
}

/// 12-byte wire form of DCT metadata.
pub fn encode_dct_meta(t: &DctTarget) -> [u8; DCT_META_BYTES] {
    let mut b = [0u8; DCT_META_BYTES];
    b[..4].copy_from_slice(&t.dct_num.to_le_bytes());
    b[4..].copy_from_slice(&t.dct_key.to_le_bytes());
    b
}

pub fn decode_dct_meta(owner: Gid, b: &[u8; DCT_META_BYTES]) -> DctTarget {
    DctTarget {
        dct_num: u32::from_le_bytes(b[..4].try_into().expect("4 bytes")),
        dct_key: u64::from_le_bytes(b[4..].try_into().expect("8 bytes")),
        owner,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(n: u32) -> DctTarget {
        DctTarget {
            dct_num: n,
            dct_key: 0x1000 + n as u64,
            owner: Gid::for_node(n),
        }
    }

    #[test]
    fn ten_nodes_ten_entries() {
        let mut m = MetaServerState::new(2, 17);
        for n in 0..10 {
            m.broadcast_meta(NodeId::new(Gid::for_node(n), 0), target(n));
        }
        assert_eq!(m.entries.len(), 10);
    }

    #[test]
    fn thousand_nodes_about_17kb() {
        let mut m = MetaServerState::new(2, 17);
        for n in 0..1000 {
            m.broadcast_meta(NodeId::new(Gid::for_node(n), 0), target(n));
        }
        assert_eq!(m.store_bytes(), 17_000);
    }

    #[test]
    fn rebroadcast_is_idempotent() {
        let mut m = MetaServerState::new(2, 17);
        let k = NodeId::new(Gid::for_node(1), 3);
        m.broadcast_meta(k, target(1));
        m.broadcast_meta(k, target(1));
        assert_eq!(m.store_bytes(), 17);
    }

    #[test]
    fn unknown_lookup_not_found() {
        let m = MetaServerState::new(2, 17);
        let k = NodeId::new(Gid::for_node(9), 0);
        assert_eq!(m.lookup(k), Err(MetaError::NotFound(k)));
    }

    #[test]
    fn mr_bounds() {
        let mut m = MetaServerState::new(2, 17);
        let g = Gid::for_node(1);
        m.record_mr(g, 5, 100, 50, Perms::RW);
        let e = m.mr(g, 5).unwrap();
        assert!(e.allows(100, 50, false));
        assert!(!e.allows(100, 51, false));
        m.invalidate_mr(g, 5, 7);
        assert!(!m.mr(g, 5).unwrap().allows(100, 1, false));
    }

    #[test]
    fn rpc_worker_queues() {
        let mut w = RpcWorker::default();
        // two requests arriving together: the second waits one service time
        assert_eq!(w.serve(1000, 380), 1380);
        assert_eq!(w.serve(1000, 380), 1760);
        assert_eq!(w.serve(5000, 380), 5380);
    }

    #[test]
    fn dct_meta_round_trip() {
        let t = target(77);
        assert_eq!(decode_dct_meta(t.owner, &encode_dct_meta(&t)), t);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mut m = MetaServerState::new(2, 17);
        m.broadcast_meta(NodeId::new(Gid::for_node(1), 2), target(1));
        let csv = m.dump_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "gid,port,dct_num,dct_key");
        assert!(lines[1].ends_with(",2,1,0x1001"));
    }
}
