//! Best-fit-with-coalescing caching allocator over native device regions.
//!
//! The pool retains freed blocks instead of returning them to the device:
//! malloc searches the inactive set for the smallest sufficient block, splits
//! it when strictly larger, and falls back to a fresh native region; free is
//! lazy and merges adjacent inactive blocks exhaustively.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::units::round_up;
use crate::vm::{Device, RegionId, VmError};

pub const DEFAULT_QUANTUM: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BfcConfig {
    /// Request sizes round up to this quantum.
    pub quantum: u64,
}

impl Default for BfcConfig {
    fn default() -> Self {
        Self {
            quantum: DEFAULT_QUANTUM,
        }
    }
}

/// Opaque handle to an active block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BfcHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BfcError {
    #[error("request size must be positive")]
    InvalidSize,
    #[error("out of memory after freeing inactive regions")]
    OutOfMemory,
    #[error("handle does not name an active block")]
    DoubleFree,
    #[error("active blocks remain")]
    ActiveBlocksRemain,
    #[error(transparent)]
    Vm(#[from] VmError),
}

#[derive(Debug, Clone, Copy)]
struct Block {
    region: RegionId,
    offset: u64,
    size: u64,
    active: bool,
    /// Creation order; ties among equal-size best fits go to the earliest.
    seq: u64,
}

#[derive(Debug, Default)]
struct Region {
    size: u64,
    /// Blocks tiling the region, keyed by offset. Neighbor links are the
    /// adjacent entries.
    by_offset: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfcStats {
    pub active_bytes: u64,
    pub reserved_bytes: u64,
    /// Inactive block sizes -> count.
    pub inactive_histogram: BTreeMap<u64, u64>,
}

#[derive(Debug)]
pub struct BfcPool {
    config: BfcConfig,
    blocks: HashMap<u64, Block>,
    regions: HashMap<RegionId, Region>,
    /// Inactive blocks ordered by (size, creation seq).
    inactive: BTreeSet<(u64, u64, u64)>,
    active_bytes: u64,
    reserved_bytes: u64,
    next_block: u64,
    next_seq: u64,
}

impl BfcPool {
    pub fn new(config: BfcConfig) -> Self {
        assert!(config.quantum > 0, "quantum must be positive");
        Self {
            config,
            blocks: HashMap::new(),
            regions: HashMap::new(),
            inactive: BTreeSet::new(),
            active_bytes: 0,
            reserved_bytes: 0,
            next_block: 0,
            next_seq: 0,
        }
    }

    pub fn active_bytes(&self) -> u64 {
        self.active_bytes
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_bytes
    }

    pub fn block_size(&self, handle: BfcHandle) -> Option<u64> {
        self.blocks.get(&handle.0).map(|b| b.size)
    }

    fn fresh_block_id(&mut self) -> u64 {
        let id = self.next_block;
        self.next_block += 1;
        id
    }

    fn fresh_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// Allocates a block of `size` rounded up to the quantum. Reuses the
    /// smallest sufficient inactive block (splitting when strictly larger);
    /// otherwise allocates a fresh native region of exactly the rounded size.
    /// On device OOM, frees all fully-inactive regions and retries once.
    pub fn malloc(&mut self, dev: &mut Device, size: u64) -> Result<BfcHandle, BfcError> {
        if size == 0 {
            return Err(BfcError::InvalidSize);
        }
        let rounded = round_up(size, self.config.quantum);

        let fit = self
            .inactive
            .range((rounded, 0, 0)..)
            .next()
            .copied();
        if let Some(key @ (fit_size, _, block_id)) = fit {
            self.inactive.remove(&key);
            if fit_size > rounded {
                self.split_front(block_id, rounded);
            }
            let block = self.blocks.get_mut(&block_id).expect("inactive block is live");
            block.active = true;
            self.active_bytes += rounded;
            return Ok(BfcHandle(block_id));
        }

        let region = match dev.native_alloc(rounded) {
            Ok(region) => region,
            Err(VmError::PhysicalOom { .. }) => {
                self.flush_inactive_regions(dev);
                match dev.native_alloc(rounded) {
                    Ok(region) => region,
                    Err(VmError::PhysicalOom { .. }) => return Err(BfcError::OutOfMemory),
                    Err(e) => return Err(e.into()),
                }
            }
            Err(e) => return Err(e.into()),
        };
        let block_id = self.fresh_block_id();
        let seq = self.fresh_seq();
        self.blocks.insert(
            block_id,
            Block {
                region,
                offset: 0,
                size: rounded,
                active: true,
                seq,
            },
        );
        let mut by_offset = BTreeMap::new();
        by_offset.insert(0, block_id);
        self.regions.insert(
            region,
            Region {
                size: rounded,
                by_offset,
            },
        );
        self.active_bytes += rounded;
        self.reserved_bytes += rounded;
        Ok(BfcHandle(block_id))
    }

    /// Shrinks `block_id` to `front_size` and inserts the remainder as a new
    /// inactive neighbor.
    fn split_front(&mut self, block_id: u64, front_size: u64) {
        let (region, offset, size) = {
            let b = &self.blocks[&block_id];
            (b.region, b.offset, b.size)
        };
        debug_assert!(front_size < size);
        let back_id = self.fresh_block_id();
        let back_seq = self.fresh_seq();
        let back = Block {
            region,
            offset: offset + front_size,
            size: size - front_size,
            active: false,
            seq: back_seq,
        };
        self.blocks.insert(back_id, back);
        self.regions
            .get_mut(&region)
            .expect("block region is live")
            .by_offset
            .insert(back.offset, back_id);
        self.inactive.insert((back.size, back_seq, back_id));
        let front = self.blocks.get_mut(&block_id).expect("splitting live block");
        front.size = front_size;
        front.seq = self.next_seq;
        self.next_seq += 1;
    }

    /// Lazy free: deactivates the block and merges it with adjacent inactive
    /// neighbors. No native free is issued.
    pub fn free(&mut self, handle: BfcHandle) -> Result<(), BfcError> {
        let block = match self.blocks.get_mut(&handle.0) {
            Some(b) if b.active => b,
            _ => return Err(BfcError::DoubleFree),
        };
        block.active = false;
        let (region, mut start, mut size) = (block.region, block.offset, block.size);
        self.active_bytes -= size;

        let mut absorbed = vec![handle.0];
        {
            let by_offset = &self.regions[&region].by_offset;
            if let Some((_, &left_id)) = by_offset.range(..start).next_back() {
                let left = self.blocks[&left_id];
                if !left.active {
                    debug_assert_eq!(left.offset + left.size, start);
                    start = left.offset;
                    size += left.size;
                    absorbed.push(left_id);
                    self.inactive.remove(&(left.size, left.seq, left_id));
                }
            }
            let self_end = self.blocks[&handle.0].offset + self.blocks[&handle.0].size;
            if let Some(&right_id) = by_offset.get(&self_end) {
                let right = self.blocks[&right_id];
                if !right.active {
                    size += right.size;
                    absorbed.push(right_id);
                    self.inactive.remove(&(right.size, right.seq, right_id));
                }
            }
        }

        if absorbed.len() == 1 {
            let seq = self.blocks[&handle.0].seq;
            self.inactive.insert((size, seq, handle.0));
            return Ok(());
        }
        let region_entry = self.regions.get_mut(&region).expect("region is live");
        for id in &absorbed {
            let offset = self.blocks[id].offset;
            region_entry.by_offset.remove(&offset);
            self.blocks.remove(id);
        }
        let merged_id = self.fresh_block_id();
        let merged_seq = self.fresh_seq();
        self.blocks.insert(
            merged_id,
            Block {
                region,
                offset: start,
                size,
                active: false,
                seq: merged_seq,
            },
        );
        self.regions
            .get_mut(&region)
            .expect("region is live")
            .by_offset
            .insert(start, merged_id);
        self.inactive.insert((size, merged_seq, merged_id));
        Ok(())
    }

    /// Frees every region whose single block is inactive (the cache-flush
    /// fallback). Returns the bytes returned to the device.
    pub fn flush_inactive_regions(&mut self, dev: &mut Device) -> u64 {
        let mut victims: Vec<RegionId> = self
            .regions
            .iter()
            .filter(|(_, r)| {
                r.by_offset.len() == 1
                    && !self.blocks[r.by_offset.values().next().unwrap()].active
            })
            .map(|(&id, _)| id)
            .collect();
        victims.sort_unstable();
        let mut freed = 0;
        for region_id in victims {
            let region = self.regions.remove(&region_id).expect("collected above");
            let block_id = *region.by_offset.values().next().unwrap();
            let block = self.blocks.remove(&block_id).expect("region block is live");
            self.inactive.remove(&(block.size, block.seq, block_id));
            dev.native_free(region_id).expect("region was allocated");
            self.reserved_bytes -= region.size;
            freed += region.size;
        }
        freed
    }

    /// Returns every region to the device and zeroes the counters. Fails if
    /// any block is still active.
    pub fn reset(&mut self, dev: &mut Device) -> Result<(), BfcError> {
        if self.active_bytes > 0 || self.blocks.values().any(|b| b.active) {
            return Err(BfcError::ActiveBlocksRemain);
        }
        let mut regions: Vec<RegionId> = self.regions.keys().copied().collect();
        regions.sort_unstable();
        for region in regions {
            dev.native_free(region).expect("region was allocated");
        }
        self.regions.clear();
        self.blocks.clear();
        self.inactive.clear();
        self.active_bytes = 0;
        self.reserved_bytes = 0;
        Ok(())
    }

    pub fn stats(&self) -> BfcStats {
        let mut inactive_histogram = BTreeMap::new();
        for &(size, _, _) in &self.inactive {
            *inactive_histogram.entry(size).or_default() += 1;
        }
        BfcStats {
            active_bytes: self.active_bytes,
            reserved_bytes: self.reserved_bytes,
            inactive_histogram,
        }
    }

    /// Structural audit: exact tiling per region, exhaustive coalescing, the
    /// inactive set mirroring the inactive blocks, and counter consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen_blocks = 0usize;
        for (region_id, region) in &self.regions {
            let mut cursor = 0u64;
            let mut prev_inactive = false;
            for (&offset, block_id) in &region.by_offset {
                let block = self
                    .blocks
                    .get(block_id)
                    .ok_or_else(|| format!("region {region_id:?} references a dead block"))?;
                if block.offset != offset || block.region != *region_id {
                    return Err(format!("block {block_id} disagrees with its region index"));
                }
                if offset != cursor {
                    return Err(format!(
                        "region {region_id:?} has a gap or overlap at offset {offset}"
                    ));
                }
                cursor += block.size;
                if !block.active && prev_inactive {
                    return Err(format!(
                        "adjacent inactive blocks in region {region_id:?} at offset {offset}"
                    ));
                }
                prev_inactive = !block.active;
                seen_blocks += 1;
            }
            if cursor != region.size {
                return Err(format!("region {region_id:?} is not tiled to its full size"));
            }
        }
        if seen_blocks != self.blocks.len() {
            return Err("blocks exist outside any region".into());
        }
        let mut active = 0u64;
        let mut inactive_count = 0usize;
        for (id, block) in &self.blocks {
            if block.active {
                active += block.size;
                if self.inactive.contains(&(block.size, block.seq, *id)) {
                    return Err(format!("active block {id} is in the inactive set"));
                }
            } else {
                inactive_count += 1;
                if !self.inactive.contains(&(block.size, block.seq, *id)) {
                    return Err(format!("inactive block {id} missing from the inactive set"));
                }
            }
        }
        if inactive_count != self.inactive.len() {
            return Err("inactive set contains stale entries".into());
        }
        if active != self.active_bytes {
            return Err(format!(
                "active_bytes drift: counted {active}, stored {}",
                self.active_bytes
            ));
        }
        let reserved: u64 = self.regions.values().map(|r| r.size).sum();
        if reserved != self.reserved_bytes {
            return Err(format!(
                "reserved_bytes drift: counted {reserved}, stored {}",
                self.reserved_bytes
            ));
        }
        if self.active_bytes > self.reserved_bytes {
            return Err("active exceeds reserved".into());
        }
        Ok(())
    }
}
