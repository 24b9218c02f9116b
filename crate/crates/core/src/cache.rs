//! Set-associative LRU cache model used for the memory counter cache and the
//! monitor cache. Tracks hit/miss counts and dirty-block write-backs; no data
//! is stored, only tags.

#[derive(Clone, Copy, Default)]
struct Line {
    tag: u64,
    valid: bool,
    dirty: bool,
    stamp: u64,
}

/// Outcome of a single cache probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub hit: bool,
    /// A dirty block was evicted to make room for the fill.
    pub evicted_dirty: bool,
}

pub struct CacheModel {
    sets: Vec<Vec<Line>>,
    ways: usize,
    block_bytes: u64,
    tick: u64,
    hits: u64,
    misses: u64,
}

impl CacheModel {
    pub fn new(capacity_bytes: u64, ways: usize, block_bytes: u64) -> Self {
        assert!(ways > 0 && block_bytes > 0);
        let lines = (capacity_bytes / block_bytes).max(ways as u64) as usize;
        let num_sets = (lines / ways).max(1);
        CacheModel {
            sets: vec![vec![Line::default(); ways]; num_sets],
            ways,
            block_bytes,
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    /// Probes the block containing `addr`; fills on miss, evicting LRU.
    /// `write` marks the resident block dirty.
    pub fn access(&mut self, addr: u64, write: bool) -> AccessResult {
        self.tick += 1;
        let block = addr / self.block_bytes;
        let set_idx = (block % self.sets.len() as u64) as usize;
        let tag = block / self.sets.len() as u64;
        let set = &mut self.sets[set_idx];

        for line in set.iter_mut() {
            if line.valid && line.tag == tag {
                line.stamp = self.tick;
                line.dirty |= write;
                self.hits += 1;
                return AccessResult {
                    hit: true,
                    evicted_dirty: false,
                };
            }
        }

        self.misses += 1;
        let mut victim = 0;
        let mut oldest = u64::MAX;
        for (i, line) in set.iter().enumerate() {
            if !line.valid {
                victim = i;
                oldest = 0;
                break;
            }
            if line.stamp < oldest {
                oldest = line.stamp;
                victim = i;
            }
        }
        let evicted_dirty = set[victim].valid && set[victim].dirty;
        set[victim] = Line {
            tag,
            valid: true,
            dirty: write,
            stamp: self.tick,
        };
        AccessResult { hit: false, evicted_dirty }
    }

    /// Writes back every dirty resident block and returns how many there were.
    pub fn drain_dirty(&mut self) -> u64 {
        let mut count = 0;
        for set in &mut self.sets {
            for line in set.iter_mut() {
                if line.valid && line.dirty {
                    count += 1;
                    line.dirty = false;
                }
            }
        }
        count
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn occupancy(&self) -> usize {
        self.sets
            .iter()
            .map(|s| s.iter().filter(|l| l.valid).count())
            .sum()
    }

    pub fn capacity_lines(&self) -> usize {
        self.sets.len() * self.ways
    }

    /// True iff the LRU stamps of each set's resident lines are all distinct,
    /// i.e. the recency order is a permutation of the resident blocks.
    pub fn lru_is_permutation(&self) -> bool {
        self.sets.iter().all(|set| {
            let mut stamps: Vec<u64> = set.iter().filter(|l| l.valid).map(|l| l.stamp).collect();
            stamps.sort_unstable();
            stamps.windows(2).all(|w| w[0] != w[1])
        })
    }
}
