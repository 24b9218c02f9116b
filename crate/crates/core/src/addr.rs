//! Physical-address encoding that carries a monitor index from the page-fault
//! handler to the memory controller, plus the request vocabulary shared by the
//! rest of the simulator.
//!
//! A tagged address packs a 9-bit monitor index (the "metabits") into bits
//! 48..=56 of a 64-bit physical address, leaving the 48-bit device address in
//! the low bits. Index 0 means "not monitored"; indices 1..=511 name slots of
//! the hardware monitor table. Trimming the metabits recovers the device
//! address, so two processes tagged with different indices still reach the same
//! memory cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated page size in bytes.
pub const PAGE_SIZE: u64 = 4096;
/// Memory bus transfer granularity in bytes.
pub const BLOCK_SIZE: u64 = 64;

/// Width of the monitor-index field in bits.
pub const METABITS_WIDTH: u32 = 9;
/// Lowest bit position of the monitor-index field.
pub const METABITS_SHIFT: u32 = 48;
/// Largest encodable monitor index; index 0 is the "unmonitored" sentinel.
pub const MAX_MONITOR_INDEX: u16 = (1 << METABITS_WIDTH) - 1;
/// Mask selecting the 48-bit device-address field.
pub const DEVICE_MASK: u64 = (1 << METABITS_SHIFT) - 1;

/// A 64-bit physical address carrying a monitor index in bits 48..=56.
///
/// Bits 57..=63 are always zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaggedPhysAddr(u64);

impl TaggedPhysAddr {
    /// Packs a device address and a monitor index into a tagged address.
    ///
    /// Index 0 yields a value numerically equal to the device address.
    pub fn encode(device_address: u64, index: u16) -> Result<Self> {
        if device_address > DEVICE_MASK {
            return Err(Error::invalid(format!(
                "device address {device_address:#x} wider than 48 bits"
            )));
        }
        if index > MAX_MONITOR_INDEX {
            return Err(Error::invalid(format!(
                "monitor index {index} exceeds {MAX_MONITOR_INDEX}"
            )));
        }
        Ok(TaggedPhysAddr(
            device_address | (u64::from(index) << METABITS_SHIFT),
        ))
    }

    /// Reinterprets a raw 64-bit value as a tagged address.
    pub fn from_raw(raw: u64) -> Result<Self> {
        if raw >> (METABITS_SHIFT + METABITS_WIDTH) != 0 {
            return Err(Error::invalid(format!(
                "address {raw:#x} sets bits above bit 56"
            )));
        }
        Ok(TaggedPhysAddr(raw))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Returns the 9-bit monitor index; 0 signals "unmonitored".
    pub fn monitor_index(self) -> u16 {
        ((self.0 >> METABITS_SHIFT) & u64::from(MAX_MONITOR_INDEX)) as u16
    }

    /// Trims the metabits off, returning the 48-bit device address.
    pub fn trim(self) -> u64 {
        self.0 & DEVICE_MASK
    }

    pub fn is_monitored(self) -> bool {
        self.monitor_index() != 0
    }
}

/// Memory operation kind; writes map to the 1-bit action field of the record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Write,
}

impl OpKind {
    pub fn is_write(self) -> bool {
        matches!(self, OpKind::Write)
    }
}

/// Per-file monitoring policy, two bits: read bit and write bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorFlag {
    NoMonitor = 0b00,
    ReadOnly = 0b01,
    WriteOnly = 0b10,
    ReadWrite = 0b11,
}

impl MonitorFlag {
    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            0b00 => Some(MonitorFlag::NoMonitor),
            0b01 => Some(MonitorFlag::ReadOnly),
            0b10 => Some(MonitorFlag::WriteOnly),
            0b11 => Some(MonitorFlag::ReadWrite),
            _ => None,
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }

    /// True iff the flag's read bit covers a read, or its write bit a write.
    pub fn matches(self, op: OpKind) -> bool {
        match op {
            OpKind::Read => self.bits() & 0b01 != 0,
            OpKind::Write => self.bits() & 0b10 != 0,
        }
    }

    /// Drops the read bit, restricting the policy to write monitoring.
    pub fn write_only(self) -> MonitorFlag {
        MonitorFlag::from_bits(self.bits() & 0b10).unwrap()
    }
}

/// One read/write event as delivered to the memory controller.
///
/// `logical_time` is a global event counter, not wall-clock time; it strictly
/// increases across the requests a run delivers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryRequest {
    pub addr: TaggedPhysAddr,
    pub op: OpKind,
    pub pid: u16,
    pub logical_time: u64,
}

pub fn align_down(value: u64, align: u64) -> u64 {
    value & !(align - 1)
}

pub fn align_up(value: u64, align: u64) -> u64 {
    (value + align - 1) & !(align - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: build the expected raw value with plain integer
    // arithmetic instead of shifts and masks.
    fn oracle(device: u64, index: u16) -> u64 {
        device + u64::from(index) * 2u64.pow(48)
    }

    #[test]
    fn encode_zero_index_is_identity() {
        let a = TaggedPhysAddr::encode(0x1000, 0).unwrap();
        assert_eq!(a.raw(), 0x0000_0000_0000_1000);
    }

    #[test]
    fn encode_matches_bit_oracle() {
        let a = TaggedPhysAddr::encode(0x1000, 5).unwrap();
        assert_eq!(a.raw(), 0x0005_0000_0000_1000);
        assert_eq!(a.raw(), oracle(0x1000, 5));

        let b = TaggedPhysAddr::encode(0xFFFF_FFFF_FFFF, 511).unwrap();
        assert_eq!(b.raw(), 0x01FF_FFFF_FFFF_FFFF);
        assert_eq!(b.raw(), oracle(0xFFFF_FFFF_FFFF, 511));
    }

    #[test]
    fn encode_rejects_wide_inputs() {
        assert!(TaggedPhysAddr::encode(1 << 48, 0).is_err());
        assert!(TaggedPhysAddr::encode(0x1000, 512).is_err());
    }

    #[test]
    fn extract_and_trim() {
        let a = TaggedPhysAddr::from_raw(0x0000_0000_0000_1000).unwrap();
        assert_eq!(a.monitor_index(), 0);
        assert_eq!(a.trim(), 0x1000);

        let b = TaggedPhysAddr::from_raw(0x0005_0000_0000_1000).unwrap();
        assert_eq!(b.monitor_index(), 5);
        assert_eq!(b.trim(), 0x1000);
    }

    #[test]
    fn from_raw_rejects_high_bits() {
        assert!(TaggedPhysAddr::from_raw(1 << 57).is_err());
        assert!(TaggedPhysAddr::from_raw(u64::MAX).is_err());
    }

    #[test]
    fn flag_matching() {
        assert!(MonitorFlag::ReadOnly.matches(OpKind::Read));
        assert!(!MonitorFlag::ReadOnly.matches(OpKind::Write));
        assert!(MonitorFlag::WriteOnly.matches(OpKind::Write));
        assert!(!MonitorFlag::WriteOnly.matches(OpKind::Read));
        assert!(MonitorFlag::ReadWrite.matches(OpKind::Read));
        assert!(MonitorFlag::ReadWrite.matches(OpKind::Write));
        assert!(!MonitorFlag::NoMonitor.matches(OpKind::Read));
        assert!(!MonitorFlag::NoMonitor.matches(OpKind::Write));
    }

    #[test]
    fn write_only_mask() {
        assert_eq!(MonitorFlag::ReadWrite.write_only(), MonitorFlag::WriteOnly);
        assert_eq!(MonitorFlag::ReadOnly.write_only(), MonitorFlag::NoMonitor);
        assert_eq!(MonitorFlag::WriteOnly.write_only(), MonitorFlag::WriteOnly);
    }

    proptest! {
        #[test]
        fn roundtrip(device in 0..=DEVICE_MASK, index in 0u16..=MAX_MONITOR_INDEX) {
            let a = TaggedPhysAddr::encode(device, index).unwrap();
            prop_assert_eq!(a.monitor_index(), index);
            prop_assert_eq!(a.trim(), device);
            prop_assert_eq!(a.raw(), oracle(device, index));
            // encode never sets bits above bit 56
            prop_assert_eq!(a.raw() >> 57, 0);
        }

        #[test]
        fn aliasing(device in 0..=DEVICE_MASK, i in 1u16..=511, j in 1u16..=511) {
            prop_assume!(i != j);
            let a = TaggedPhysAddr::encode(device, i).unwrap();
            let b = TaggedPhysAddr::encode(device, j).unwrap();
            prop_assert_ne!(a.raw(), b.raw());
            prop_assert_eq!(a.trim(), b.trim());
        }
    }
}
