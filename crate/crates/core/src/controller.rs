//! Memory-controller model: the Open Monitor File Table, the metadata
//! processing module that identifies monitored requests, the monitor module
//! that commits log records through a small monitor cache, and the
//! counter-mode-encryption traffic that shapes baseline costs.
//!
//! The controller is a deterministic state machine advanced one event at a
//! time; it holds no interior parallelism and its state can be snapshotted and
//! compared between runs.

use std::collections::HashSet;

use serde::Serialize;

use crate::addr::{align_down, MemoryRequest, MonitorFlag, OpKind, TaggedPhysAddr, BLOCK_SIZE, PAGE_SIZE};
use crate::cache::CacheModel;
use crate::error::{Error, Result};
use crate::logstore::{LogStore, MonitorRecord};

pub const OMFT_ENTRIES: usize = 512;
pub const OMFT_ENTRY_BYTES: usize = 17;

/// One controller-resident descriptor of an active (process, file) monitor
/// combination.
///
/// Packed dump layout, 17 bytes little-endian: flags byte (bit 0 valid,
/// bits 1..=2 monitor flag), inode (4 B), uid (4 B), gid (4 B, bit 31 zero),
/// pid (2 B), directory id (2 B).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OmftEntry {
    pub valid: bool,
    pub inode: u32,
    pub uid: u32,
    pub gid: u32,
    pub flag: MonitorFlag,
    pub pid: u16,
    pub dir_id: u16,
}

impl OmftEntry {
    pub const INVALID: OmftEntry = OmftEntry {
        valid: false,
        inode: 0,
        uid: 0,
        gid: 0,
        flag: MonitorFlag::NoMonitor,
        pid: 0,
        dir_id: 0,
    };

    pub fn pack(&self) -> [u8; OMFT_ENTRY_BYTES] {
        let mut out = [0u8; OMFT_ENTRY_BYTES];
        out[0] = (self.valid as u8) | (self.flag.bits() << 1);
        out[1..5].copy_from_slice(&self.inode.to_le_bytes());
        out[5..9].copy_from_slice(&self.uid.to_le_bytes());
        out[9..13].copy_from_slice(&(self.gid & 0x7FFF_FFFF).to_le_bytes());
        out[13..15].copy_from_slice(&self.pid.to_le_bytes());
        out[15..17].copy_from_slice(&self.dir_id.to_le_bytes());
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != OMFT_ENTRY_BYTES {
            return Err(Error::Codec(format!(
                "OMFT entry must be {OMFT_ENTRY_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(OmftEntry {
            valid: bytes[0] & 1 != 0,
            flag: MonitorFlag::from_bits((bytes[0] >> 1) & 0b11).unwrap(),
            inode: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
            uid: u32::from_le_bytes(bytes[5..9].try_into().unwrap()),
            gid: u32::from_le_bytes(bytes[9..13].try_into().unwrap()),
            pid: u16::from_le_bytes(bytes[13..15].try_into().unwrap()),
            dir_id: u16::from_le_bytes(bytes[15..17].try_into().unwrap()),
        })
    }
}

/// Direct-mapped table of 512 entries; slot 0 is permanently invalid because
/// monitor index 0 means "not monitored".
pub struct Omft {
    entries: Vec<OmftEntry>,
}

impl Omft {
    pub fn new() -> Self {
        Omft {
            entries: vec![OmftEntry::INVALID; OMFT_ENTRIES],
        }
    }

    pub fn install(&mut self, index: u16, mut entry: OmftEntry) -> Result<()> {
        if index == 0 || index as usize >= OMFT_ENTRIES {
            return Err(Error::invalid(format!("OMFT index {index} out of range")));
        }
        entry.valid = true;
        self.entries[index as usize] = entry;
        Ok(())
    }

    pub fn evict(&mut self, index: u16) {
        if index != 0 && (index as usize) < OMFT_ENTRIES {
            self.entries[index as usize] = OmftEntry::INVALID;
        }
    }

    /// Valid entry at `index`, or None for slot 0, invalid slots, and
    /// out-of-range indices.
    pub fn get(&self, index: u16) -> Option<&OmftEntry> {
        self.entries
            .get(index as usize)
            .filter(|e| e.valid && index != 0)
    }

    /// Bit-exact dump: 512 consecutive 17-byte little-endian entries.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(OMFT_ENTRIES * OMFT_ENTRY_BYTES);
        for e in &self.entries {
            out.extend_from_slice(&e.pack());
        }
        out
    }
}

impl Default for Omft {
    fn default() -> Self {
        Self::new()
    }
}

/// A request the metadata processing module identified as monitored, headed
/// for the monitor module; carries the OMFT line snapshot.
#[derive(Clone, Copy, Debug)]
pub struct PreMonitorRequest {
    pub addr: TaggedPhysAddr,
    pub op: OpKind,
    pub snapshot: OmftEntry,
    pub logical_time: u64,
}

/// Memory-traffic tallies for one run; all fields are monotone during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TrafficCounters {
    pub data_reads: u64,
    pub data_writes: u64,
    pub counter_reads: u64,
    pub counter_writes: u64,
    pub monitor_reads: u64,
    pub monitor_writes: u64,
    pub mc_hits: u64,
    pub mc_misses: u64,
    pub cc_hits: u64,
    pub cc_misses: u64,
}

/// Drops that fall outside the normal monitored/unmonitored split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Tagged requests whose OMFT slot was invalid.
    pub invalid_slot_drops: u64,
    /// Tagged requests whose OMFT slot held a different pid (stale metabits
    /// after slot reuse).
    pub pid_mismatch_drops: u64,
}

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub counter_cache_bytes: u64,
    pub counter_cache_ways: usize,
    pub monitor_cache_bytes: u64,
    pub monitor_cache_ways: usize,
    /// Data bytes covered by one 64 B counter block.
    pub counter_page_bytes: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            counter_cache_bytes: 128 * 1024,
            counter_cache_ways: 8,
            monitor_cache_bytes: 64 * 1024,
            monitor_cache_ways: 8,
            counter_page_bytes: PAGE_SIZE,
        }
    }
}

pub struct MemController {
    omft: Omft,
    counter_cache: CacheModel,
    monitor_cache: CacheModel,
    counter_page_bytes: u64,
    pub counters: TrafficCounters,
    pub diags: Diagnostics,
    commits: u64,
}

impl MemController {
    pub fn new(cfg: &ControllerConfig) -> Self {
        MemController {
            omft: Omft::new(),
            counter_cache: CacheModel::new(cfg.counter_cache_bytes, cfg.counter_cache_ways, BLOCK_SIZE),
            monitor_cache: CacheModel::new(cfg.monitor_cache_bytes, cfg.monitor_cache_ways, BLOCK_SIZE),
            counter_page_bytes: cfg.counter_page_bytes,
            counters: TrafficCounters::default(),
            diags: Diagnostics::default(),
            commits: 0,
        }
    }

    pub fn omft_install(&mut self, index: u16, entry: OmftEntry) -> Result<()> {
        self.omft.install(index, entry)
    }

    pub fn omft_evict(&mut self, index: u16) {
        self.omft.evict(index)
    }

    pub fn omft(&self) -> &Omft {
        &self.omft
    }

    pub fn dump_omft(&self) -> Vec<u8> {
        self.omft.dump()
    }

    /// Counter fetch for one encrypted access: probes the counter cache at the
    /// covering counter block; a miss reads the counter from memory, a write
    /// dirties it so the incremented counter is written back on eviction or at
    /// the end-of-run flush.
    pub fn counter_fetch(&mut self, device_address: u64, op: OpKind) {
        let counter_block = (device_address / self.counter_page_bytes) * BLOCK_SIZE;
        let res = self.counter_cache.access(counter_block, op.is_write());
        if res.hit {
            self.counters.cc_hits += 1;
        } else {
            self.counters.cc_misses += 1;
            self.counters.counter_reads += 1;
        }
        if res.evicted_dirty {
            self.counters.counter_writes += 1;
        }
    }

    /// Monitor phase 1: charges the data access and its counter fetch, then
    /// identifies whether the request is monitored. Requests tagged with a
    /// stale or invalid slot are treated as unmonitored.
    pub fn mpm_process(&mut self, req: &MemoryRequest) -> Option<PreMonitorRequest> {
        match req.op {
            OpKind::Read => self.counters.data_reads += 1,
            OpKind::Write => self.counters.data_writes += 1,
        }
        self.counter_fetch(req.addr.trim(), req.op);

        let index = req.addr.monitor_index();
        if index == 0 {
            return None;
        }
        let entry = match self.omft.get(index) {
            Some(e) => *e,
            None => {
                self.diags.invalid_slot_drops += 1;
                return None;
            }
        };
        if entry.pid != req.pid {
            self.diags.pid_mismatch_drops += 1;
            return None;
        }
        if !entry.flag.matches(req.op) {
            return None;
        }
        Some(PreMonitorRequest {
            addr: req.addr,
            op: req.op,
            snapshot: entry,
            logical_time: req.logical_time,
        })
    }

    /// Monitor phase 2: read-before-write of the log line. A monitor-cache
    /// miss costs one log-block read plus the counter fetch for the log
    /// address (log lines are counter-encrypted too); the assembled record is
    /// then written through.
    pub fn mm_commit(&mut self, pre: &PreMonitorRequest, store: &mut LogStore) -> Result<MonitorRecord> {
        let log_addr = store.next_log_address(pre.addr.trim())?;
        let res = self.monitor_cache.access(align_down(log_addr, BLOCK_SIZE), false);
        if res.hit {
            self.counters.mc_hits += 1;
        } else {
            self.counters.mc_misses += 1;
            self.counters.monitor_reads += 1;
            self.counter_fetch(log_addr, OpKind::Write);
        }
        let record = MonitorRecord {
            block_address: pre.addr.trim(),
            uid: pre.snapshot.uid,
            gid: pre.snapshot.gid,
            op: pre.op,
            timestamp: pre.logical_time,
            inode: pre.snapshot.inode,
            dir_id: pre.snapshot.dir_id,
            pid: pre.snapshot.pid,
        };
        store.append(record)?;
        self.counters.monitor_writes += 1;
        self.commits += 1;
        Ok(record)
    }

    /// Writes back counters still dirty in the counter cache. Call once at the
    /// end of a run so deferred counter increments reach the write tally.
    pub fn flush_counters(&mut self) {
        self.counters.counter_writes += self.counter_cache.drain_dirty();
        self.counters.cc_hits = self.counter_cache.hits();
        self.counters.cc_misses = self.counter_cache.misses();
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }
}

/// One line of the instrumented run journal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JournalEntry {
    /// A data request completed at this logical time.
    Data { time: u64 },
    /// A monitor record was committed for the data request at `trigger_time`.
    Monitor { trigger_time: u64 },
}

/// True iff every monitor commit sits strictly after its leading data request
/// and commits are mutually ordered by logical time.
pub fn ordering_check(journal: &[JournalEntry]) -> bool {
    let mut completed: HashSet<u64> = HashSet::new();
    let mut last_commit = 0u64;
    for entry in journal {
        match entry {
            JournalEntry::Data { time } => {
                completed.insert(*time);
            }
            JournalEntry::Monitor { trigger_time } => {
                if !completed.contains(trigger_time) {
                    return false;
                }
                if *trigger_time <= last_commit {
                    return false;
                }
                last_commit = *trigger_time;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::StorageConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(pid: u16, flag: MonitorFlag) -> OmftEntry {
        OmftEntry {
            valid: true,
            inode: 9,
            uid: 1000,
            gid: 100,
            flag,
            pid,
            dir_id: 0,
        }
    }

    fn req(index: u16, op: OpKind, pid: u16, time: u64) -> MemoryRequest {
        MemoryRequest {
            addr: TaggedPhysAddr::encode(0x4000, index).unwrap(),
            op,
            pid,
            logical_time: time,
        }
    }

    #[test]
    fn omft_install_lookup_evict() {
        let mut t = Omft::new();
        let e = entry(12, MonitorFlag::ReadWrite);
        t.install(7, e).unwrap();
        assert_eq!(t.get(7), Some(&e));
        assert!(t.install(0, e).is_err());
        assert!(t.install(512, e).is_err());

        // newest install wins
        let e2 = entry(13, MonitorFlag::WriteOnly);
        t.install(7, e2).unwrap();
        assert_eq!(t.get(7), Some(&e2));

        t.evict(7);
        assert!(t.get(7).is_none());
        t.evict(7); // no-op
        t.evict(0); // no-op
        assert!(t.get(0).is_none());
    }

    #[test]
    fn omft_dump_is_512_by_17() {
        let mut t = Omft::new();
        let e = entry(3, MonitorFlag::ReadOnly);
        t.install(1, e).unwrap();
        let dump = t.dump();
        assert_eq!(dump.len(), OMFT_ENTRIES * OMFT_ENTRY_BYTES);
        // slot 0 all zero, slot 1 round-trips
        assert!(dump[..OMFT_ENTRY_BYTES].iter().all(|&b| b == 0));
        let back = OmftEntry::unpack(&dump[OMFT_ENTRY_BYTES..2 * OMFT_ENTRY_BYTES]).unwrap();
        assert_eq!(back, OmftEntry { valid: true, ..e });
    }

    #[test]
    fn omft_entry_pack_layout() {
        let e = OmftEntry {
            valid: true,
            inode: 0x0102_0304,
            uid: 0x0A0B_0C0D,
            gid: 0x7FFF_FFFF,
            flag: MonitorFlag::WriteOnly,
            pid: 0x1122,
            dir_id: 0x3344,
        };
        let b = e.pack();
        assert_eq!(b[0], 0b101); // valid bit + flag 10 shifted left
        assert_eq!(&b[1..5], &[0x04, 0x03, 0x02, 0x01]);
        assert_eq!(&b[5..9], &[0x0D, 0x0C, 0x0B, 0x0A]);
        assert_eq!(&b[9..13], &[0xFF, 0xFF, 0xFF, 0x7F]);
        assert_eq!(&b[13..15], &[0x22, 0x11]);
        assert_eq!(&b[15..17], &[0x44, 0x33]);
        assert_eq!(OmftEntry::unpack(&b).unwrap(), e);
    }

    #[test]
    fn mpm_matches_flag_against_op() {
        let mut c = MemController::new(&ControllerConfig::default());
        c.omft_install(7, entry(12, MonitorFlag::WriteOnly)).unwrap();

        let pre = c.mpm_process(&req(7, OpKind::Write, 12, 1));
        assert!(pre.is_some());
        assert_eq!(pre.unwrap().snapshot.inode, 9);

        assert!(c.mpm_process(&req(7, OpKind::Read, 12, 2)).is_none());
        assert!(c.mpm_process(&req(0, OpKind::Write, 12, 3)).is_none());
        assert_eq!(c.counters.data_writes, 2);
        assert_eq!(c.counters.data_reads, 1);
    }

    #[test]
    fn mpm_drops_invalid_and_stale_slots() {
        let mut c = MemController::new(&ControllerConfig::default());
        assert!(c.mpm_process(&req(5, OpKind::Write, 12, 1)).is_none());
        assert_eq!(c.diags.invalid_slot_drops, 1);

        c.omft_install(5, entry(12, MonitorFlag::ReadWrite)).unwrap();
        assert!(c.mpm_process(&req(5, OpKind::Write, 99, 2)).is_none());
        assert_eq!(c.diags.pid_mismatch_drops, 1);
    }

    #[test]
    fn counter_fetch_cold_hit_and_writeback() {
        let mut c = MemController::new(&ControllerConfig::default());
        c.counter_fetch(0x1000, OpKind::Read);
        assert_eq!(c.counters.cc_misses, 1);
        assert_eq!(c.counters.counter_reads, 1);
        c.counter_fetch(0x1040, OpKind::Read); // same 4 KiB page
        assert_eq!(c.counters.cc_hits, 1);

        c.counter_fetch(0x2000, OpKind::Write);
        assert_eq!(c.counters.counter_writes, 0);
        c.flush_counters();
        assert_eq!(c.counters.counter_writes, 1);
    }

    #[test]
    fn mm_commit_read_before_write_with_cache() {
        let mut c = MemController::new(&ControllerConfig::default());
        let mut store = LogStore::new(&StorageConfig::fixed(), None).unwrap();
        c.omft_install(7, entry(12, MonitorFlag::ReadWrite)).unwrap();

        let pre = c.mpm_process(&req(7, OpKind::Write, 12, 1)).unwrap();
        let rec = c.mm_commit(&pre, &mut store).unwrap();
        assert_eq!(c.counters.monitor_reads, 1);
        assert_eq!(c.counters.monitor_writes, 1);
        assert_eq!(rec.block_address, 0x4000);
        assert_eq!(rec.uid, 1000);
        assert_eq!(rec.gid, 100);
        assert_eq!(rec.inode, 9);
        assert_eq!(rec.pid, 12);
        assert_eq!(rec.timestamp, 1);
        assert_eq!(rec.op, OpKind::Write);

        // second commit to the same resident log block skips the read
        let pre2 = c.mpm_process(&req(7, OpKind::Write, 12, 2)).unwrap();
        c.mm_commit(&pre2, &mut store).unwrap();
        assert_eq!(c.counters.monitor_reads, 1);
        assert_eq!(c.counters.monitor_writes, 2);
        assert_eq!(c.counters.mc_hits + c.counters.mc_misses, c.commits());
        assert_eq!(c.counters.monitor_reads, c.counters.mc_misses);
    }

    #[test]
    fn ordering_check_accepts_valid_and_rejects_reordered() {
        use JournalEntry::*;
        assert!(ordering_check(&[
            Data { time: 1 },
            Monitor { trigger_time: 1 },
            Data { time: 2 },
            Data { time: 3 },
            Monitor { trigger_time: 3 },
        ]));
        // commit before its data request
        assert!(!ordering_check(&[
            Monitor { trigger_time: 1 },
            Data { time: 1 },
        ]));
        // commits out of mutual order
        assert!(!ordering_check(&[
            Data { time: 1 },
            Data { time: 2 },
            Monitor { trigger_time: 2 },
            Monitor { trigger_time: 1 },
        ]));
    }

    #[test]
    fn ordering_check_large_random_run() {
        use JournalEntry::*;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut journal = Vec::new();
        let mut time = 0u64;
        for _ in 0..100_000 {
            time += 1;
            journal.push(Data { time });
            if rng.gen_bool(0.3) {
                journal.push(Monitor { trigger_time: time });
            }
        }
        // exhaustive position check: every commit follows its data entry
        let mut seen = std::collections::HashSet::new();
        for e in &journal {
            match e {
                Data { time } => {
                    seen.insert(*time);
                }
                Monitor { trigger_time } => assert!(seen.contains(trigger_time)),
            }
        }
        assert!(ordering_check(&journal));
    }
}
