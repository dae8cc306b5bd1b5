//! Background traffic sampling: promote busy peers to RC QPs and reclaim
//! idle ones by LRU. The promotion and reclaim procedures themselves run as
//! simulated tasks in [`crate::vplane::transfer`]; this module holds the policy.

use std::collections::{HashMap, HashSet};

use crate::addr::Gid;
use crate::config::CostModel;
use crate::nic::Qpn;
use crate::simcore::Nanos;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrafficSample {
    pub window: u64,
    pub count: u32,
}

#[derive(Clone, Debug)]
pub struct Bgd {
    pub enabled: bool,
    pub window_ns: Nanos,
    pub threshold: u32,
    pub rc_capacity: usize,
    pub retry_base_ns: Nanos,
    pub retry_cap_ns: Nanos,
    samples: HashMap<(usize, Gid), TrafficSample>,
    /// Peers with a promotion scheduled, running, or done (cleared on reclaim).
    promoted: HashSet<(usize, Gid)>,
}

/// A reclaim candidate as seen by the LRU policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcCandidate {
    pub qpn: Qpn,
    pub last_use: Nanos,
    pub busy: bool,
}

impl Bgd {
    pub fn new(cost: &CostModel) -> Self {
        Self {
            enabled: true,
            window_ns: cost.bgd_window_ns,
            threshold: cost.bgd_threshold as u32,
            rc_capacity: cost.bgd_rc_capacity,
            retry_base_ns: cost.bgd_retry_base_ns,
            retry_cap_ns: cost.bgd_retry_cap_ns,
            samples: HashMap::new(),
            promoted: HashSet::new(),
        }
    }

    /// Counts one request; true when this request crosses the threshold and
    /// a promotion should be scheduled.
    pub fn record(&mut self, cpu: usize, peer: Gid, now: Nanos) -> bool {
        if !self.enabled {
            return false;
        }
        let window = now / self.window_ns;
        let s = self.samples.entry((cpu, peer)).or_insert(TrafficSample { window, count: 0 });
        if s.window != window {
            *s = TrafficSample { window, count: 0 };
        }
        s.count += 1;
        if s.count >= self.threshold && !self.promoted.contains(&(cpu, peer)) {
            self.promoted.insert((cpu, peer));
            return true;
        }
        false
    }

    pub fn sample(&self, cpu: usize, peer: Gid, now: Nanos) -> u32 {
        match self.samples.get(&(cpu, peer)) {
            Some(s) if s.window == now / self.window_ns => s.count,
            _ => 0,
        }
    }

    pub fn is_promoted(&self, cpu: usize, peer: Gid) -> bool {
        self.promoted.contains(&(cpu, peer))
    }

    /// Marks a peer as promoted without sampling (peer side of a promotion).
    pub fn mark_promoted(&mut self, cpu: usize, peer: Gid) {
        self.promoted.insert((cpu, peer));
    }

    /// Allows the peer to be promoted again.
    pub fn forget(&mut self, cpu: usize, peer: Gid) {
        self.promoted.remove(&(cpu, peer));
        self.samples.remove(&(cpu, peer));
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Nanos {
        let f = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        self.retry_base_ns.saturating_mul(f).min(self.retry_cap_ns)
    }

    /// Least recently used idle candidate, if the pool exceeds capacity.
    pub fn lru_victim(&self, candidates: &[RcCandidate]) -> Option<Qpn> {
        if candidates.len() <= self.rc_capacity {
            return None;
        }
        candidates
            .iter()
            .filter(|c| !c.busy)
            .min_by_key(|c| (c.last_use, c.qpn))
            .map(|c| c.qpn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::NS_PER_S;

    fn bgd() -> Bgd {
        Bgd::new(&CostModel::default())
    }

    #[test]
    fn below_threshold_no_promotion() {
        let mut b = bgd();
        let p = Gid::for_node(2);
        assert!((0..63).all(|i| !b.record(0, p, i)));
        assert!(!b.is_promoted(0, p));
    }

    #[test]
    fn threshold_request_promotes_once() {
        let mut b = bgd();
        let p = Gid::for_node(2);
        let fired: Vec<bool> = (0..200).map(|i| b.record(0, p, i)).collect();
        assert_eq!(fired.iter().filter(|f| **f).count(), 1);
        assert!(fired[63]);
    }

    #[test]
    fn counter_resets_at_window_boundary() {
        let mut b = bgd();
        let p = Gid::for_node(2);
        for i in 0..63 {
            b.record(0, p, i);
        }
        assert_eq!(b.sample(0, p, 100), 63);
        assert!(!b.record(0, p, NS_PER_S));
        assert_eq!(b.sample(0, p, NS_PER_S), 1);
    }

    #[test]
    fn cpus_sample_independently() {
        let mut b = bgd();
        let p = Gid::for_node(2);
        for i in 0..63 {
            b.record(0, p, i);
            b.record(1, p, i);
        }
        assert!(b.record(0, p, 100));
        assert!(b.record(1, p, 100));
    }

    #[test]
    fn reclaimed_peer_can_be_promoted_again() {
        let mut b = bgd();
        let p = Gid::for_node(2);
        (0..64).for_each(|i| {
            b.record(0, p, i);
        });
        b.forget(0, p);
        let again: Vec<bool> = (0..64).map(|i| b.record(0, p, 100 + i)).collect();
        assert!(again[63]);
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let b = bgd();
        assert_eq!(b.backoff(0), 1_000_000);
        assert_eq!(b.backoff(1), 2_000_000);
        assert_eq!(b.backoff(9), 512_000_000);
        assert_eq!(b.backoff(10), 1_000_000_000);
        assert_eq!(b.backoff(80), 1_000_000_000);
    }

    #[test]
    fn lru_picks_oldest_idle_only_over_capacity() {
        let b = bgd();
        let mk = |i: u32, busy| RcCandidate {
            qpn: Qpn(i),
            last_use: 1000 - i as u64,
            busy,
        };
        let sixteen: Vec<_> = (0..16).map(|i| mk(i, false)).collect();
        assert_eq!(b.lru_victim(&sixteen), None);
        let mut seventeen: Vec<_> = (0..17).map(|i| mk(i, false)).collect();
        assert_eq!(b.lru_victim(&seventeen), Some(Qpn(16)));
        seventeen[16].busy = true;
        assert_eq!(b.lru_victim(&seventeen), Some(Qpn(15)));
    }
}
