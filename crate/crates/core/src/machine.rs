//! One-chiplet machine model: quadrant-tree topology, per-cluster local
//! memory ledger, DMA event contract, and exact traffic counters.
//!
//! Counters update when a transfer is issued; `dma_wait` only gates data
//! visibility. Word totals are therefore order-independent. Sync messages
//! (epoch-counter increments) are counted separately and never enter any
//! word counter.

use crate::tensor::Precision;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MachineError {
    #[error("cluster id {0} out of range (clusters = {1})")]
    ClusterOutOfRange(usize, usize),
    #[error("source and destination cluster are the same: {0}")]
    SameCluster(usize),
    #[error("self transfer on cluster {0}")]
    SelfTransfer(usize),
    #[error("zero-word transfer")]
    ZeroWords,
    #[error("destination buffer not allocated on cluster {cluster}: need {need} bytes, ledger holds {held}")]
    BufferNotAllocated {
        cluster: usize,
        need: usize,
        held: usize,
    },
    #[error("unknown transfer ticket {0}")]
    UnknownTicket(u64),
    #[error("ticket {0} already waited")]
    DoubleWait(u64),
    #[error("local memory overflow on cluster {cluster}: {current} + {requested} > {capacity} bytes")]
    LocalMemoryOverflow {
        cluster: usize,
        current: usize,
        requested: usize,
        capacity: usize,
    },
    #[error("free of {requested} bytes exceeds {current} allocated on cluster {cluster}")]
    FreeUnderflow {
        cluster: usize,
        current: usize,
        requested: usize,
    },
    #[error("{0} transfer tickets never waited")]
    TicketLeak(usize),
    #[error("ledger not empty at end of run: {0} bytes still allocated")]
    LedgerNonZero(usize),
    #[error("invalid machine configuration: {0}")]
    InvalidConfiguration(String),
}

/// One value per supported precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerPrecision {
    pub single: u64,
    pub double: u64,
}

impl PerPrecision {
    pub fn get(&self, p: Precision) -> u64 {
        match p {
            Precision::Single => self.single,
            Precision::Double => self.double,
        }
    }
}

/// Chiplet topology and per-cluster budgets.
///
/// Defaults model one chiplet: 128 clusters in a 4/4/4/2 quadrant tree,
/// 128 KiB local memory per cluster of which 32 KiB are reserved for
/// double buffers. The FPU does one double-precision MAC or two
/// single-precision MACs per cycle; the configurable off-chip rate
/// defaults to one 512-bit transfer per cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineConfig {
    pub clusters: usize,
    pub clusters_per_l1_quad: usize,
    pub l1_quads_per_l2_quad: usize,
    pub l2_quads_per_l3_quad: usize,
    pub l3_quads_per_chiplet: usize,
    pub local_mem_bytes: usize,
    pub reserved_buffer_bytes: usize,
    pub macs_per_cluster_per_cycle: PerPrecision,
    pub offchip_words_per_cycle: PerPrecision,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            clusters: 128,
            clusters_per_l1_quad: 4,
            l1_quads_per_l2_quad: 4,
            l2_quads_per_l3_quad: 4,
            l3_quads_per_chiplet: 2,
            local_mem_bytes: 128 * 1024,
            reserved_buffer_bytes: 32 * 1024,
            macs_per_cluster_per_cycle: PerPrecision {
                single: 16,
                double: 8,
            },
            offchip_words_per_cycle: PerPrecision {
                single: 16,
                double: 8,
            },
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), MachineError> {
        let product = self.clusters_per_l1_quad
            * self.l1_quads_per_l2_quad
            * self.l2_quads_per_l3_quad
            * self.l3_quads_per_chiplet;
        if self.clusters == 0 || self.clusters != product {
            return Err(MachineError::InvalidConfiguration(format!(
                "clusters = {} must equal the quadrant arity product {}",
                self.clusters, product
            )));
        }
        if self.reserved_buffer_bytes >= self.local_mem_bytes {
            return Err(MachineError::InvalidConfiguration(format!(
                "reserved_buffer_bytes {} must be below local_mem_bytes {}",
                self.reserved_buffer_bytes, self.local_mem_bytes
            )));
        }
        Ok(())
    }

    pub fn clusters_per_l2_quad(&self) -> usize {
        self.clusters_per_l1_quad * self.l1_quads_per_l2_quad
    }

    pub fn clusters_per_l3_quad(&self) -> usize {
        self.clusters_per_l2_quad() * self.l2_quads_per_l3_quad
    }

    /// Machine balance in MAC/word for the given precision:
    /// chiplet MAC/cycle divided by off-chip words/cycle.
    pub fn machine_balance(&self, p: Precision) -> (u64, u64) {
        (
            self.clusters as u64 * self.macs_per_cluster_per_cycle.get(p),
            self.offchip_words_per_cycle.get(p),
        )
    }
}

/// Cluster index in `[0, clusters)`. Numbering starts at 0 in the first L1
/// quadrant of the first L2 quadrant of the first L3 quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterId(pub usize);

impl ClusterId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shallowest network that connects two distinct clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetworkLevel {
    L1,
    L2,
    L3,
    CrossL3,
}

/// Words moved between clusters, split by network level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterClusterWords {
    pub l1: u64,
    pub l2: u64,
    pub l3: u64,
    pub cross_l3: u64,
}

impl InterClusterWords {
    pub fn total(&self) -> u64 {
        self.l1 + self.l2 + self.l3 + self.cross_l3
    }

    pub fn get(&self, level: NetworkLevel) -> u64 {
        match level {
            NetworkLevel::L1 => self.l1,
            NetworkLevel::L2 => self.l2,
            NetworkLevel::L3 => self.l3,
            NetworkLevel::CrossL3 => self.cross_l3,
        }
    }

    pub fn add(&mut self, level: NetworkLevel, words: u64) {
        match level {
            NetworkLevel::L1 => self.l1 += words,
            NetworkLevel::L2 => self.l2 += words,
            NetworkLevel::L3 => self.l3 += words,
            NetworkLevel::CrossL3 => self.cross_l3 += words,
        }
    }
}

/// Exact integer counters of one schedule run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub macs: u64,
    pub flops: u64,
    pub offchip_load_words: u64,
    pub offchip_store_words: u64,
    pub inter_cluster_words: InterClusterWords,
    pub sync_messages: u64,
    pub peak_local_mem_bytes: usize,
    pub active_clusters: usize,
}

/// Source of a DMA load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaSource {
    MainMemory,
    Cluster(ClusterId),
}

/// Handle of an issued, not-yet-waited transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferTicket(u64);

#[derive(Debug, Default)]
struct ClusterMem {
    current_bytes: usize,
    peak_bytes: usize,
}

/// Counter and ledger state machine for one run.
#[derive(Debug)]
pub struct Machine {
    cfg: MachineConfig,
    macs: u64,
    offchip_load_words: u64,
    offchip_store_words: u64,
    inter_cluster_words: InterClusterWords,
    sync_messages: u64,
    active_clusters: usize,
    mem: Vec<ClusterMem>,
    next_ticket: u64,
    outstanding: u64,
    waited_set: std::collections::HashSet<u64>,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Result<Self, MachineError> {
        cfg.validate()?;
        let clusters = cfg.clusters;
        Ok(Self {
            cfg,
            macs: 0,
            offchip_load_words: 0,
            offchip_store_words: 0,
            inter_cluster_words: InterClusterWords::default(),
            sync_messages: 0,
            active_clusters: 0,
            mem: (0..clusters).map(|_| ClusterMem::default()).collect(),
            next_ticket: 0,
            outstanding: 0,
            waited_set: std::collections::HashSet::new(),
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    fn check_cluster(&self, c: ClusterId) -> Result<(), MachineError> {
        if c.0 >= self.cfg.clusters {
            Err(MachineError::ClusterOutOfRange(c.0, self.cfg.clusters))
        } else {
            Ok(())
        }
    }

    /// Shallowest quadrant containing both clusters.
    pub fn network_level(&self, a: ClusterId, b: ClusterId) -> Result<NetworkLevel, MachineError> {
        self.check_cluster(a)?;
        self.check_cluster(b)?;
        if a == b {
            return Err(MachineError::SameCluster(a.0));
        }
        let l1 = self.cfg.clusters_per_l1_quad;
        let l2 = self.cfg.clusters_per_l2_quad();
        let l3 = self.cfg.clusters_per_l3_quad();
        Ok(if a.0 / l1 == b.0 / l1 {
            NetworkLevel::L1
        } else if a.0 / l2 == b.0 / l2 {
            NetworkLevel::L2
        } else if a.0 / l3 == b.0 / l3 {
            NetworkLevel::L3
        } else {
            NetworkLevel::CrossL3
        })
    }

    fn issue_ticket(&mut self) -> TransferTicket {
        let t = TransferTicket(self.next_ticket);
        self.next_ticket += 1;
        self.outstanding += 1;
        t
    }

    fn require_buffer(
        &self,
        cluster: ClusterId,
        words: u64,
        precision: Precision,
    ) -> Result<(), MachineError> {
        let need = words as usize * precision.word_bytes();
        let held = self.mem[cluster.0].current_bytes;
        if need > held {
            return Err(MachineError::BufferNotAllocated {
                cluster: cluster.0,
                need,
                held,
            });
        }
        Ok(())
    }

    /// Issue an asynchronous load into `dst_cluster`. Counters update now;
    /// the destination buffer is only readable after `dma_wait`.
    pub fn dma_load(
        &mut self,
        dst_cluster: ClusterId,
        source: DmaSource,
        words: u64,
        precision: Precision,
    ) -> Result<TransferTicket, MachineError> {
        self.check_cluster(dst_cluster)?;
        if words == 0 {
            return Err(MachineError::ZeroWords);
        }
        if let DmaSource::Cluster(src) = source {
            self.check_cluster(src)?;
            if src == dst_cluster {
                return Err(MachineError::SelfTransfer(src.0));
            }
        }
        self.require_buffer(dst_cluster, words, precision)?;
        match source {
            DmaSource::MainMemory => {
                self.offchip_load_words += words;
            }
            DmaSource::Cluster(src) => {
                let level = self.network_level(dst_cluster, src)?;
                self.inter_cluster_words.add(level, words);
            }
        }
        Ok(self.issue_ticket())
    }

    /// Issue an asynchronous store of `words` from `src_cluster` to main memory.
    pub fn dma_store(
        &mut self,
        src_cluster: ClusterId,
        words: u64,
        precision: Precision,
    ) -> Result<TransferTicket, MachineError> {
        self.check_cluster(src_cluster)?;
        if words == 0 {
            return Err(MachineError::ZeroWords);
        }
        self.require_buffer(src_cluster, words, precision)?;
        self.offchip_store_words += words;
        Ok(self.issue_ticket())
    }

    /// Block until the transfer is complete. Each ticket must be waited
    /// exactly once; the data of a load is only defined after this returns.
    pub fn dma_wait(&mut self, ticket: TransferTicket) -> Result<(), MachineError> {
        if ticket.0 >= self.next_ticket {
            return Err(MachineError::UnknownTicket(ticket.0));
        }
        if self.is_waited(ticket.0) {
            return Err(MachineError::DoubleWait(ticket.0));
        }
        self.mark_waited(ticket.0);
        self.outstanding -= 1;
        Ok(())
    }

    fn is_waited(&self, id: u64) -> bool {
        self.waited_set.contains(&id)
    }

    fn mark_waited(&mut self, id: u64) {
        self.waited_set.insert(id);
    }

    /// Atomic increment to the epoch counter of `dst`, sent by `src`.
    /// Counted separately from all word counters.
    pub fn sync_increment(&mut self, dst: ClusterId, src: ClusterId) -> Result<(), MachineError> {
        self.check_cluster(dst)?;
        self.check_cluster(src)?;
        if dst == src {
            return Err(MachineError::SameCluster(dst.0));
        }
        self.sync_messages += 1;
        Ok(())
    }

    /// Reserve `bytes` of local memory on `cluster`. An overflow is a
    /// per-run failure signalling the configuration does not fit.
    pub fn alloc(&mut self, cluster: ClusterId, bytes: usize) -> Result<(), MachineError> {
        self.check_cluster(cluster)?;
        let m = &mut self.mem[cluster.0];
        if m.current_bytes + bytes > self.cfg.local_mem_bytes {
            return Err(MachineError::LocalMemoryOverflow {
                cluster: cluster.0,
                current: m.current_bytes,
                requested: bytes,
                capacity: self.cfg.local_mem_bytes,
            });
        }
        m.current_bytes += bytes;
        m.peak_bytes = m.peak_bytes.max(m.current_bytes);
        Ok(())
    }

    pub fn free(&mut self, cluster: ClusterId, bytes: usize) -> Result<(), MachineError> {
        self.check_cluster(cluster)?;
        let m = &mut self.mem[cluster.0];
        if bytes > m.current_bytes {
            return Err(MachineError::FreeUnderflow {
                cluster: cluster.0,
                current: m.current_bytes,
                requested: bytes,
            });
        }
        m.current_bytes -= bytes;
        Ok(())
    }

    pub fn add_macs(&mut self, macs: u64) {
        self.macs += macs;
    }

    pub fn set_active_clusters(&mut self, n: usize) {
        self.active_clusters = n;
    }

    pub fn allocated_bytes(&self, cluster: ClusterId) -> usize {
        self.mem[cluster.0].current_bytes
    }

    pub fn total_allocated_bytes(&self) -> usize {
        self.mem.iter().map(|m| m.current_bytes).sum()
    }

    pub fn outstanding_tickets(&self) -> u64 {
        self.outstanding
    }

    pub fn peak_local_mem_bytes(&self) -> usize {
        self.mem.iter().map(|m| m.peak_bytes).max().unwrap_or(0)
    }

    /// Finish the run: every ticket must have been waited and the ledger
    /// must be back at zero.
    pub fn into_report(self) -> Result<TrafficReport, MachineError> {
        if self.outstanding != 0 {
            return Err(MachineError::TicketLeak(self.outstanding as usize));
        }
        let leftover = self.total_allocated_bytes();
        if leftover != 0 {
            return Err(MachineError::LedgerNonZero(leftover));
        }
        Ok(TrafficReport {
            macs: self.macs,
            flops: 2 * self.macs,
            offchip_load_words: self.offchip_load_words,
            offchip_store_words: self.offchip_store_words,
            inter_cluster_words: self.inter_cluster_words,
            sync_messages: self.sync_messages,
            peak_local_mem_bytes: self.peak_local_mem_bytes(),
            active_clusters: self.active_clusters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine() -> Machine {
        Machine::new(MachineConfig::default()).unwrap()
    }

    #[test]
    fn network_level_tree() {
        let m = machine();
        assert_eq!(m.network_level(ClusterId(0), ClusterId(1)).unwrap(), NetworkLevel::L1);
        assert_eq!(m.network_level(ClusterId(0), ClusterId(4)).unwrap(), NetworkLevel::L2);
        assert_eq!(m.network_level(ClusterId(0), ClusterId(16)).unwrap(), NetworkLevel::L3);
        assert_eq!(m.network_level(ClusterId(0), ClusterId(64)).unwrap(), NetworkLevel::CrossL3);
        assert!(matches!(
            m.network_level(ClusterId(5), ClusterId(5)),
            Err(MachineError::SameCluster(5))
        ));
    }

    #[test]
    fn network_level_quadrant_sizes() {
        // exactly 4 / 16 / 64 clusters share an L1 / L2 / L3 quadrant
        let m = machine();
        for (level, expect) in [
            (NetworkLevel::L1, 4usize),
            (NetworkLevel::L2, 16),
            (NetworkLevel::L3, 64),
        ] {
            let share = (0..128)
                .filter(|&b| {
                    b == 0 || m.network_level(ClusterId(0), ClusterId(b)).unwrap() <= level
                })
                .count();
            assert_eq!(share, expect, "{level:?}");
        }
    }

    #[test]
    fn dma_load_counters_at_issue() {
        let mut m = machine();
        m.alloc(ClusterId(0), 1024 * 8).unwrap();
        let t = m
            .dma_load(ClusterId(0), DmaSource::MainMemory, 1024, Precision::Double)
            .unwrap();
        assert_eq!(m.offchip_load_words, 1024);
        let t2 = m
            .dma_load(ClusterId(0), DmaSource::Cluster(ClusterId(1)), 1024, Precision::Double)
            .unwrap();
        assert_eq!(m.inter_cluster_words.l1, 1024);
        m.dma_wait(t).unwrap();
        m.dma_wait(t2).unwrap();
        assert!(matches!(m.dma_wait(t), Err(MachineError::DoubleWait(_))));
        assert!(matches!(
            m.dma_load(ClusterId(0), DmaSource::MainMemory, 0, Precision::Double),
            Err(MachineError::ZeroWords)
        ));
        assert!(matches!(
            m.dma_load(ClusterId(2), DmaSource::Cluster(ClusterId(2)), 4, Precision::Double),
            Err(MachineError::SelfTransfer(2))
        ));
        m.free(ClusterId(0), 1024 * 8).unwrap();
        let r = m.into_report().unwrap();
        assert_eq!(r.flops, 0);
        assert_eq!(r.offchip_load_words, 1024);
    }

    #[test]
    fn dma_store_additivity_and_buffer_check() {
        let mut m = machine();
        assert!(matches!(
            m.dma_store(ClusterId(0), 1024, Precision::Double),
            Err(MachineError::BufferNotAllocated { .. })
        ));
        m.alloc(ClusterId(0), 512 * 8).unwrap();
        let a = m.dma_store(ClusterId(0), 512, Precision::Double).unwrap();
        let b = m.dma_store(ClusterId(0), 512, Precision::Double).unwrap();
        assert_eq!(m.offchip_store_words, 1024);
        m.dma_wait(a).unwrap();
        m.dma_wait(b).unwrap();
    }

    #[test]
    fn ticket_leak_detected() {
        let mut m = machine();
        m.alloc(ClusterId(0), 64).unwrap();
        let _t = m.dma_store(ClusterId(0), 8, Precision::Double).unwrap();
        m.free(ClusterId(0), 64).unwrap();
        assert!(matches!(m.into_report(), Err(MachineError::TicketLeak(1))));
    }

    #[test]
    fn ledger_alloc_free_peak() {
        let mut m = machine();
        // 2057 double words fit easily
        m.alloc(ClusterId(3), 2057 * 8).unwrap();
        assert_eq!(m.peak_local_mem_bytes(), 16456);
        m.free(ClusterId(3), 2057 * 8).unwrap();
        assert_eq!(m.allocated_bytes(ClusterId(3)), 0);
        assert_eq!(m.peak_local_mem_bytes(), 16456);
        // 132689 double words are too much for 128 KiB
        assert!(matches!(
            m.alloc(ClusterId(3), 132_689 * 8),
            Err(MachineError::LocalMemoryOverflow { .. })
        ));
        // alloc 0 is a no-op
        m.alloc(ClusterId(7), 0).unwrap();
        assert_eq!(m.allocated_bytes(ClusterId(7)), 0);
    }

    #[test]
    fn sync_increment_counted_separately() {
        let mut m = machine();
        m.sync_increment(ClusterId(1), ClusterId(0)).unwrap();
        assert_eq!(m.sync_messages, 1);
        assert_eq!(m.offchip_load_words, 0);
        assert_eq!(m.inter_cluster_words.total(), 0);
        assert!(matches!(
            m.sync_increment(ClusterId(2), ClusterId(2)),
            Err(MachineError::SameCluster(2))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MachineConfig::default();
        cfg.clusters = 100;
        assert!(Machine::new(cfg).is_err());
        let mut cfg = MachineConfig::default();
        cfg.reserved_buffer_bytes = cfg.local_mem_bytes;
        assert!(Machine::new(cfg).is_err());
        let mut cfg = MachineConfig::default();
        cfg.clusters = 16;
        cfg.l2_quads_per_l3_quad = 1;
        cfg.l3_quads_per_chiplet = 1;
        assert!(Machine::new(cfg).is_ok());
    }
}
