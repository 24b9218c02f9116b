//! Monitor-log storage: the 32-byte record codec, the fixed-location and
//! global circular-buffer backends, the 50%-fill backup trigger, and the FOXL
//! audit-log file format.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::addr::{OpKind, BLOCK_SIZE};
use crate::error::{Error, Result};

/// Size of one encoded monitor record.
pub const RECORD_SIZE: usize = 32;
/// Log bytes reserved per 64 B data block under the fixed-location scheme.
pub const BYTES_PER_DATA_BLOCK: u64 = 32;
/// Inode-field bit marking a record as a kernel mmap/exit note rather than a
/// memory access.
pub const META_INODE_FLAG: u32 = 1 << 31;

pub const FOXL_MAGIC: [u8; 4] = *b"FOXL";
pub const FOXL_VERSION: u8 = 1;

const GIB: u64 = 1 << 30;
/// Default simulated memory capacity.
pub const MEMORY_BYTES: u64 = 16 * GIB;

/// One audit-log line.
///
/// Encoded little-endian as: block address (8 B), uid (4 B), gid with the
/// operation bit packed into bit 31 (4 B), timestamp (8 B), inode (4 B),
/// directory id (2 B), pid (2 B) — 32 bytes total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MonitorRecord {
    pub block_address: u64,
    pub uid: u32,
    /// 31-bit group id; bit 31 of the packed word carries `op`.
    pub gid: u32,
    pub op: OpKind,
    pub timestamp: u64,
    pub inode: u32,
    pub dir_id: u16,
    pub pid: u16,
}

impl MonitorRecord {
    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        debug_assert!(self.gid < 1 << 31);
        let mut out = [0u8; RECORD_SIZE];
        out[0..8].copy_from_slice(&self.block_address.to_le_bytes());
        out[8..12].copy_from_slice(&self.uid.to_le_bytes());
        let packed = (self.gid & 0x7FFF_FFFF) | ((self.op.is_write() as u32) << 31);
        out[12..16].copy_from_slice(&packed.to_le_bytes());
        out[16..24].copy_from_slice(&self.timestamp.to_le_bytes());
        out[24..28].copy_from_slice(&self.inode.to_le_bytes());
        out[28..30].copy_from_slice(&self.dir_id.to_le_bytes());
        out[30..32].copy_from_slice(&self.pid.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RECORD_SIZE {
            return Err(Error::Codec(format!(
                "record must be {RECORD_SIZE} bytes, got {}",
                bytes.len()
            )));
        }
        let le64 = |r: std::ops::Range<usize>| u64::from_le_bytes(bytes[r].try_into().unwrap());
        let le32 = |r: std::ops::Range<usize>| u32::from_le_bytes(bytes[r].try_into().unwrap());
        let le16 = |r: std::ops::Range<usize>| u16::from_le_bytes(bytes[r].try_into().unwrap());
        let packed = le32(12..16);
        Ok(MonitorRecord {
            block_address: le64(0..8),
            uid: le32(8..12),
            gid: packed & 0x7FFF_FFFF,
            op: if packed >> 31 != 0 {
                OpKind::Write
            } else {
                OpKind::Read
            },
            timestamp: le64(16..24),
            inode: le32(24..28),
            dir_id: le16(28..30),
            pid: le16(30..32),
        })
    }

    /// Kernel-side note that a monitored pair overflowed the map tables at
    /// mmap time. Block address 0 plus the inode flag bit distinguish it from
    /// access records.
    pub fn mmap_meta(pid: u16, inode: u32, uid: u32, gid: u32, dir_id: u16, time: u64) -> Self {
        MonitorRecord {
            block_address: 0,
            uid,
            gid,
            op: OpKind::Write,
            timestamp: time,
            inode: inode | META_INODE_FLAG,
            dir_id,
            pid,
        }
    }

    /// Kernel-side note that a process with backup-table entries exited.
    pub fn exit_meta(pid: u16, time: u64) -> Self {
        MonitorRecord {
            block_address: 0,
            uid: 0,
            gid: 0,
            op: OpKind::Write,
            timestamp: time,
            inode: META_INODE_FLAG,
            dir_id: 0,
            pid,
        }
    }

    pub fn is_meta(&self) -> bool {
        self.inode & META_INODE_FLAG != 0
    }

    /// For a meta record, the inode of the mmapped file; 0 for exit notes.
    pub fn meta_inode(&self) -> u32 {
        self.inode & !META_INODE_FLAG
    }
}

/// Which log backend a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    /// Per-64B-block reserved slot after usable memory; keeps the last access
    /// to each location only.
    Fixed,
    /// Shared mod-indexed ring sized at 1/20 of memory with a backup trigger.
    Circular,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StorageConfig {
    pub kind: StorageKind,
    /// Data addresses the fixed scheme maps; also the span the default ring
    /// capacity is derived from.
    pub data_region: Range<u64>,
    /// Log slots live after usable memory, starting here.
    pub log_region_base: u64,
    /// Bytes reserved for fixed-location slots.
    pub log_region_len: u64,
    /// Ring capacity in records.
    pub capacity_records: u64,
    /// Fraction of the ring that triggers a backup flush.
    pub backup_threshold: f64,
}

impl StorageConfig {
    pub fn fixed() -> Self {
        StorageConfig {
            kind: StorageKind::Fixed,
            ..Self::circular()
        }
    }

    pub fn circular() -> Self {
        StorageConfig {
            kind: StorageKind::Circular,
            data_region: 0..MEMORY_BYTES,
            log_region_base: MEMORY_BYTES,
            // 32 log bytes per 64 data bytes
            log_region_len: MEMORY_BYTES / 2,
            capacity_records: default_capacity_records(MEMORY_BYTES),
            backup_threshold: 0.5,
        }
    }
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self::circular()
    }
}

/// Ring capacity when 1/20 of the memory space holds 32-byte records.
pub fn default_capacity_records(memory_bytes: u64) -> u64 {
    (memory_bytes / 20) / RECORD_SIZE as u64
}

struct FixedLog {
    data_region: Range<u64>,
    base: u64,
    len: u64,
    slots: BTreeMap<u64, MonitorRecord>,
}

impl FixedLog {
    /// Log slot address for a data access; injective per 64 B data block.
    fn log_address(&self, device_address: u64) -> Result<u64> {
        if !self.data_region.contains(&device_address) {
            return Err(Error::invalid(format!(
                "address {device_address:#x} outside data region"
            )));
        }
        let block = (device_address - self.data_region.start) / BLOCK_SIZE;
        let addr = self.base + block * BYTES_PER_DATA_BLOCK;
        if addr + BYTES_PER_DATA_BLOCK > self.base + self.len {
            return Err(Error::ResourceExhausted(format!(
                "fixed log region cannot hold slot for block {block}"
            )));
        }
        Ok(addr)
    }
}

struct CircularLog {
    capacity: u64,
    base: u64,
    /// Next index to write.
    head: u64,
    total_appends: u64,
    appends_since_backup: u64,
    backup_every: u64,
    /// Slot-indexed storage, grown lazily up to `capacity`.
    records: Vec<MonitorRecord>,
}

impl CircularLog {
    fn append(&mut self, record: MonitorRecord) -> u64 {
        let index = self.head;
        if (index as usize) < self.records.len() {
            self.records[index as usize] = record;
        } else {
            self.records.push(record);
        }
        self.head = (self.head + 1) % self.capacity;
        self.total_appends += 1;
        self.appends_since_backup += 1;
        index
    }

    /// Live records, oldest first.
    fn live(&self) -> Vec<MonitorRecord> {
        if self.total_appends <= self.capacity {
            self.records.clone()
        } else {
            let head = self.head as usize;
            let mut out = Vec::with_capacity(self.records.len());
            out.extend_from_slice(&self.records[head..]);
            out.extend_from_slice(&self.records[..head]);
            out
        }
    }
}

/// A backup flush of the ring's live records to the external sink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackupEvent {
    pub records_flushed: u64,
    pub total_appends: u64,
}

enum Backend {
    Fixed(FixedLog),
    Circular(CircularLog),
}

/// Result of appending one record.
pub struct AppendOutcome {
    pub log_address: u64,
    pub backup: Option<BackupEvent>,
}

/// Single-writer monitor-log store; readers work on snapshots or the sink.
pub struct LogStore {
    backend: Backend,
    sink_records: Vec<MonitorRecord>,
    sink_path: Option<PathBuf>,
    sink_header_written: bool,
    backups_triggered: u64,
    meta_records: Vec<MonitorRecord>,
}

impl LogStore {
    pub fn new(cfg: &StorageConfig, sink_path: Option<PathBuf>) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.backup_threshold) {
            return Err(Error::Config(format!(
                "backup threshold {} outside [0, 1]",
                cfg.backup_threshold
            )));
        }
        let backend = match cfg.kind {
            StorageKind::Fixed => Backend::Fixed(FixedLog {
                data_region: cfg.data_region.clone(),
                base: cfg.log_region_base,
                len: cfg.log_region_len,
                slots: BTreeMap::new(),
            }),
            StorageKind::Circular => {
                if cfg.capacity_records == 0 {
                    return Err(Error::Config("ring capacity must be >= 1".into()));
                }
                let backup_every =
                    ((cfg.backup_threshold * cfg.capacity_records as f64).ceil() as u64).max(1);
                Backend::Circular(CircularLog {
                    capacity: cfg.capacity_records,
                    base: cfg.log_region_base,
                    head: 0,
                    total_appends: 0,
                    appends_since_backup: 0,
                    backup_every,
                    records: Vec::new(),
                })
            }
        };
        Ok(LogStore {
            backend,
            sink_records: Vec::new(),
            sink_path,
            sink_header_written: false,
            backups_triggered: 0,
            meta_records: Vec::new(),
        })
    }

    /// Device address the next record for `device_address` will occupy.
    pub fn next_log_address(&self, device_address: u64) -> Result<u64> {
        match &self.backend {
            Backend::Fixed(f) => f.log_address(device_address),
            Backend::Circular(c) => Ok(c.base + c.head * RECORD_SIZE as u64),
        }
    }

    /// Stores one record and, on the ring backend, fires the backup trigger
    /// when due.
    pub fn append(&mut self, record: MonitorRecord) -> Result<AppendOutcome> {
        match &mut self.backend {
            Backend::Fixed(f) => {
                let addr = f.log_address(record.block_address)?;
                f.slots.insert(addr, record);
                Ok(AppendOutcome {
                    log_address: addr,
                    backup: None,
                })
            }
            Backend::Circular(c) => {
                let addr = c.base + c.head * RECORD_SIZE as u64;
                c.append(record);
                let backup = self.maybe_trigger_backup()?;
                Ok(AppendOutcome {
                    log_address: addr,
                    backup,
                })
            }
        }
    }

    /// Kernel mmap/exit notes go to the ring; the fixed scheme has no shared
    /// buffer to hold them and drops them.
    pub fn append_meta(&mut self, record: MonitorRecord) -> Result<()> {
        if let Backend::Circular(_) = self.backend {
            self.meta_records.push(record);
            self.append(record)?;
        }
        Ok(())
    }

    /// Flushes all live records to the sink once the since-last-backup count
    /// reaches the threshold. The buffer itself is untouched.
    pub fn maybe_trigger_backup(&mut self) -> Result<Option<BackupEvent>> {
        let due = match &self.backend {
            Backend::Circular(c) => c.appends_since_backup >= c.backup_every,
            Backend::Fixed(_) => false,
        };
        if !due {
            return Ok(None);
        }
        let Backend::Circular(c) = &mut self.backend else {
            unreachable!()
        };
        let live = c.live();
        // Write the sink file first so an I/O failure leaves counters intact.
        if let Some(path) = &self.sink_path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut buf = Vec::with_capacity(live.len() * RECORD_SIZE + 5);
            if !self.sink_header_written {
                buf.extend_from_slice(&FOXL_MAGIC);
                buf.push(FOXL_VERSION);
            }
            for r in &live {
                buf.extend_from_slice(&r.encode());
            }
            file.write_all(&buf)?;
            self.sink_header_written = true;
        }
        let event = BackupEvent {
            records_flushed: live.len() as u64,
            total_appends: c.total_appends,
        };
        self.sink_records.extend_from_slice(&live);
        c.appends_since_backup = 0;
        self.backups_triggered += 1;
        Ok(Some(event))
    }

    /// Records currently retained by the backend. Ring: oldest-first window;
    /// fixed: slots in address order.
    pub fn live_records(&self) -> Vec<MonitorRecord> {
        match &self.backend {
            Backend::Fixed(f) => f.slots.values().copied().collect(),
            Backend::Circular(c) => c.live(),
        }
    }

    pub fn sink_records(&self) -> &[MonitorRecord] {
        &self.sink_records
    }

    pub fn meta_records(&self) -> &[MonitorRecord] {
        &self.meta_records
    }

    pub fn backups_triggered(&self) -> u64 {
        self.backups_triggered
    }

    pub fn total_appends(&self) -> u64 {
        match &self.backend {
            Backend::Fixed(f) => f.slots.len() as u64,
            Backend::Circular(c) => c.total_appends,
        }
    }

    /// Union of sink and live records with flush duplicates dropped, ordered
    /// by timestamp. When nothing was overwritten this equals every record
    /// ever appended.
    pub fn rebuild(&self) -> Vec<MonitorRecord> {
        let mut all: Vec<MonitorRecord> = self
            .sink_records
            .iter()
            .chain(self.live_records().iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all.sort_by_key(|r| r.timestamp);
        all
    }
}

pub fn encode_foxl(records: &[MonitorRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + records.len() * RECORD_SIZE);
    out.extend_from_slice(&FOXL_MAGIC);
    out.push(FOXL_VERSION);
    for r in records {
        out.extend_from_slice(&r.encode());
    }
    out
}

pub fn decode_foxl(bytes: &[u8]) -> Result<Vec<MonitorRecord>> {
    if bytes.len() < 5 || bytes[0..4] != FOXL_MAGIC {
        return Err(Error::Codec("missing FOXL magic".into()));
    }
    if bytes[4] != FOXL_VERSION {
        return Err(Error::Codec(format!("unsupported version {}", bytes[4])));
    }
    let body = &bytes[5..];
    if body.len() % RECORD_SIZE != 0 {
        return Err(Error::Codec(format!(
            "truncated record: {} trailing bytes",
            body.len() % RECORD_SIZE
        )));
    }
    body.chunks_exact(RECORD_SIZE).map(MonitorRecord::decode).collect()
}

/// Writes a FOXL file atomically (temp file in the same directory, then rename).
pub fn write_foxl(path: &Path, records: &[MonitorRecord]) -> Result<()> {
    let bytes = encode_foxl(records);
    let tmp = path.with_extension("foxl.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_foxl(path: &Path) -> Result<Vec<MonitorRecord>> {
    decode_foxl(&std::fs::read(path)?)
}
