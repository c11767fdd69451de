//! Virtual-memory-stitching allocator: primitive blocks (pBlocks) own device
//! chunks exclusively, stitched blocks (sBlocks) alias the chunks of two or
//! more pBlocks behind one contiguous virtual range. Both pools are kept
//! sorted by size, descending.
//!
//! Allocation walks four states: exact match (S1), single larger block with a
//! split (S2), greedy multi-block stitch (S3), and new physical memory for
//! the shortfall (S4); an unservable request reports OOM (S5). Deallocation
//! only flips assignment state; physical chunks stay under their pBlocks for
//! the lifetime of the allocator. Inactive sBlocks are LRU-evicted once their
//! total exceeds the stitched-pool capacity.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bfc::{BfcConfig, BfcError, BfcHandle, BfcPool};
use crate::units::{is_aligned, round_up, MIB};
use crate::vm::{ChunkId, Device, DeviceConfig, Mapping, VmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PBlockId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SBlockId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HandleId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmlakeConfig {
    /// Blocks below this size are not offered to the stitch accumulation and
    /// splits never leave a remainder smaller than it.
    pub fragmentation_limit: u64,
    /// LRU eviction starts once inactive stitched bytes exceed this.
    pub spool_capacity: u64,
    /// Requests below this go to the embedded splitting pool.
    pub small_alloc_threshold: u64,
}

impl GmlakeConfig {
    pub fn for_device(device: &DeviceConfig) -> Self {
        Self {
            fragmentation_limit: 128 * MIB,
            spool_capacity: device.capacity_bytes,
            small_alloc_threshold: device.chunk_size,
        }
    }

    fn validate(&self, chunk_size: u64) -> Result<(), GmError> {
        if self.fragmentation_limit < chunk_size {
            return Err(GmError::InvalidConfig(
                "fragmentation_limit must be at least one chunk".into(),
            ));
        }
        if self.spool_capacity == 0 {
            return Err(GmError::InvalidConfig(
                "spool_capacity must be positive".into(),
            ));
        }
        if self.small_alloc_threshold == 0 || self.small_alloc_threshold > chunk_size {
            return Err(GmError::InvalidConfig(
                "small_alloc_threshold must be in (0, chunk_size]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GmError {
    #[error("invalid allocator config: {0}")]
    InvalidConfig(String),
    #[error("request size must be positive")]
    InvalidSize,
    #[error("size {0} is not valid here (zero, unaligned, or out of block bounds)")]
    Misaligned(u64),
    #[error("block is active")]
    ActiveBlock,
    #[error("unknown block")]
    UnknownBlock,
    #[error("a stitch needs at least two members")]
    TooFewMembers,
    #[error("duplicate stitch member")]
    DuplicateMember,
    #[error("stitch member of {size} bytes is below the fragmentation limit {limit}")]
    MemberBelowLimit { size: u64, limit: u64 },
    #[error("stitch member is active")]
    MemberActive,
    #[error("handle does not name a live tensor")]
    DoubleFree,
    #[error("out of memory")]
    OutOfMemory,
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("small pool: {0}")]
    SmallPool(#[from] BfcError),
}

/// BestFit outcome, in strategy order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BestFitState {
    /// A block of exactly the requested size exists.
    ExactMatch,
    /// One inactive pBlock strictly larger than the request.
    SingleBlock,
    /// Several inactive pBlocks whose sizes cover the request.
    MultipleBlocks,
    /// The inactive pBlocks cannot cover the request.
    Insufficient,
}

impl BestFitState {
    pub fn code(self) -> u8 {
        match self {
            BestFitState::ExactMatch => 1,
            BestFitState::SingleBlock => 2,
            BestFitState::MultipleBlocks => 3,
            BestFitState::Insufficient => 4,
        }
    }
}

/// A pool block named by a BestFit candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef {
    P(PBlockId),
    S(SBlockId),
}

/// What a tensor handle is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundBlock {
    PBlock(PBlockId),
    SBlock(SBlockId),
    Small(BfcHandle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHandle {
    pub id: HandleId,
    pub bound: BoundBlock,
    pub requested_size: u64,
    pub rounded_size: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounters {
    pub s1: u64,
    pub s2: u64,
    pub s3: u64,
    pub s4: u64,
    pub s5: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmStats {
    pub active_bytes: u64,
    pub reserved_bytes: u64,
    pub peak_active_bytes: u64,
    pub peak_reserved_bytes: u64,
    pub ppool_histogram: BTreeMap<u64, u64>,
    pub spool_histogram: BTreeMap<u64, u64>,
    pub counters: StateCounters,
}

#[derive(Debug)]
struct PBlock {
    mapping: Mapping,
    size: u64,
    directly_assigned: bool,
    creation_seq: u64,
    last_use_seq: u64,
}

#[derive(Debug)]
struct SBlock {
    mapping: Mapping,
    members: Vec<PBlockId>,
    size: u64,
    directly_assigned: bool,
    creation_seq: u64,
    last_use_seq: u64,
}

/// Single-threaded allocator instance over one device.
#[derive(Debug)]
pub struct GmlakeAllocator {
    config: GmlakeConfig,
    chunk_size: u64,
    pblocks: HashMap<PBlockId, PBlock>,
    sblocks: HashMap<SBlockId, SBlock>,
    /// (size descending, creation order) over pBlocks.
    ppool: BTreeSet<(Reverse<u64>, u64, PBlockId)>,
    /// (size descending, creation order) over sBlocks.
    spool: BTreeSet<(Reverse<u64>, u64, SBlockId)>,
    /// The inactive subsets of the pools, kept in lockstep with derived
    /// activity so the BestFit scan never recomputes it per block.
    inactive_ppool: BTreeSet<(Reverse<u64>, u64, PBlockId)>,
    inactive_spool: BTreeSet<(Reverse<u64>, u64, SBlockId)>,
    /// pBlock -> sBlocks containing it.
    member_index: HashMap<PBlockId, BTreeSet<SBlockId>>,
    handles: HashMap<HandleId, TensorHandle>,
    small: BfcPool,
    next_block: u64,
    next_seq: u64,
    next_handle: u64,
    /// Bytes bound to live handles on the stitched path.
    active_bytes: u64,
    /// Physical bytes held by pBlocks (chunk-backed, aliasing not counted).
    reserved_bytes: u64,
    peak_active: u64,
    peak_reserved: u64,
    counters: StateCounters,
}

impl GmlakeAllocator {
    pub fn new(config: GmlakeConfig, device: &DeviceConfig) -> Result<Self, GmError> {
        device.validate()?;
        config.validate(device.chunk_size)?;
        Ok(Self {
            config,
            chunk_size: device.chunk_size,
            pblocks: HashMap::new(),
            sblocks: HashMap::new(),
            ppool: BTreeSet::new(),
            spool: BTreeSet::new(),
            inactive_ppool: BTreeSet::new(),
            inactive_spool: BTreeSet::new(),
            member_index: HashMap::new(),
            handles: HashMap::new(),
            small: BfcPool::new(BfcConfig::default()),
            next_block: 0,
            next_seq: 0,
            next_handle: 0,
            active_bytes: 0,
            reserved_bytes: 0,
            peak_active: 0,
            peak_reserved: 0,
            counters: StateCounters::default(),
        })
    }

    pub fn config(&self) -> GmlakeConfig {
        self.config
    }

    fn fresh_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// pBlock activity: directly assigned, or a member of a directly assigned
    /// sBlock.
    pub fn is_pblock_active(&self, id: PBlockId) -> bool {
        let Some(p) = self.pblocks.get(&id) else {
            return false;
        };
        if p.directly_assigned {
            return true;
        }
        self.member_index
            .get(&id)
            .is_some_and(|set| set.iter().any(|sid| self.sblocks[sid].directly_assigned))
    }

    /// sBlock activity: any member pBlock is active.
    pub fn is_sblock_active(&self, id: SBlockId) -> bool {
        let Some(s) = self.sblocks.get(&id) else {
            return false;
        };
        s.directly_assigned || s.members.iter().any(|m| self.is_pblock_active(*m))
    }

    pub fn pblock_size(&self, id: PBlockId) -> Option<u64> {
        self.pblocks.get(&id).map(|p| p.size)
    }

    pub fn pblock_chunks(&self, id: PBlockId) -> Option<&[ChunkId]> {
        self.pblocks.get(&id).map(|p| p.mapping.chunks.as_slice())
    }

    pub fn pblock_last_use_seq(&self, id: PBlockId) -> Option<u64> {
        self.pblocks.get(&id).map(|p| p.last_use_seq)
    }

    pub fn sblock_size(&self, id: SBlockId) -> Option<u64> {
        self.sblocks.get(&id).map(|s| s.size)
    }

    pub fn sblock_members(&self, id: SBlockId) -> Option<&[PBlockId]> {
        self.sblocks.get(&id).map(|s| s.members.as_slice())
    }

    /// pPool sizes in pool order (descending).
    pub fn ppool_sizes(&self) -> Vec<u64> {
        self.ppool.iter().map(|&(Reverse(size), _, _)| size).collect()
    }

    /// sPool sizes in pool order (descending).
    pub fn spool_sizes(&self) -> Vec<u64> {
        self.spool.iter().map(|&(Reverse(size), _, _)| size).collect()
    }

    /// Total size of inactive pBlocks of at least `min_size`.
    pub fn inactive_pblock_bytes(&self, min_size: u64) -> u64 {
        self.inactive_ppool
            .iter()
            .map(|&(Reverse(size), _, _)| size)
            .filter(|&size| size >= min_size)
            .sum()
    }

    fn insert_pblock(&mut self, id: PBlockId, block: PBlock) {
        self.ppool.insert((Reverse(block.size), block.creation_seq, id));
        self.pblocks.insert(id, block);
        self.sync_activity(&[id], &[]);
    }

    fn remove_pblock(&mut self, id: PBlockId) -> PBlock {
        let block = self.pblocks.remove(&id).expect("pblock is live");
        let key = (Reverse(block.size), block.creation_seq, id);
        self.ppool.remove(&key);
        self.inactive_ppool.remove(&key);
        block
    }

    /// Recomputes derived activity for the given blocks and fixes their
    /// membership in the inactive indexes. Callers pass everything whose
    /// activity an assignment flip or structural change can reach.
    fn sync_activity(&mut self, pblocks: &[PBlockId], sblocks: &[SBlockId]) {
        for &id in pblocks {
            let Some(p) = self.pblocks.get(&id) else { continue };
            let key = (Reverse(p.size), p.creation_seq, id);
            if self.is_pblock_active(id) {
                self.inactive_ppool.remove(&key);
            } else {
                self.inactive_ppool.insert(key);
            }
        }
        for &id in sblocks {
            let Some(s) = self.sblocks.get(&id) else { continue };
            let key = (Reverse(s.size), s.creation_seq, id);
            if self.is_sblock_active(id) {
                self.inactive_spool.remove(&key);
            } else {
                self.inactive_spool.insert(key);
            }
        }
    }

    /// Everything whose derived activity can change when `id`'s assignment
    /// flips: the members and every sBlock sharing one of them.
    fn activity_neighborhood(&self, id: SBlockId) -> (Vec<PBlockId>, Vec<SBlockId>) {
        let members = self.sblocks[&id].members.clone();
        let mut affected: BTreeSet<SBlockId> = BTreeSet::from([id]);
        for m in &members {
            if let Some(set) = self.member_index.get(m) {
                affected.extend(set.iter().copied());
            }
        }
        (members, affected.into_iter().collect())
    }

    /// Allocates a fresh pBlock of `size` bytes: the only path that creates
    /// physical chunks and grows reserved memory. All-or-nothing on OOM.
    pub fn alloc_pblock(&mut self, dev: &mut Device, size: u64) -> Result<PBlockId, GmError> {
        if size == 0 || !is_aligned(size, self.chunk_size) {
            return Err(GmError::Misaligned(size));
        }
        if size > dev.free_capacity() {
            return Err(GmError::OutOfMemory);
        }
        let range = dev.reserve_address(size)?;
        let chunks = dev.create_chunks(size / self.chunk_size)?;
        let ids: Vec<ChunkId> = chunks.iter().map(|c| c.id).collect();
        let mapping = dev.map(range, &ids)?;
        let id = PBlockId(self.next_block);
        self.next_block += 1;
        let creation_seq = self.fresh_seq();
        self.insert_pblock(
            id,
            PBlock {
                mapping,
                size,
                directly_assigned: false,
                creation_seq,
                last_use_seq: 0,
            },
        );
        self.reserved_bytes += size;
        self.touch_peaks();
        Ok(id)
    }

    /// Splits an inactive pBlock at `front_size` into two new pBlocks with
    /// fresh virtual ranges remapped over the partitioned chunk list. The
    /// original pBlock leaves the pool and any sBlock referencing it is
    /// invalidated. No chunks are created or destroyed.
    pub fn split(
        &mut self,
        dev: &mut Device,
        id: PBlockId,
        front_size: u64,
    ) -> Result<(PBlockId, PBlockId), GmError> {
        let size = self.pblock_size(id).ok_or(GmError::UnknownBlock)?;
        if self.is_pblock_active(id) {
            return Err(GmError::ActiveBlock);
        }
        if front_size < self.chunk_size
            || front_size >= size
            || !is_aligned(front_size, self.chunk_size)
        {
            return Err(GmError::Misaligned(front_size));
        }
        let dependents: Vec<SBlockId> = self
            .member_index
            .get(&id)
            .map(|set| set.iter().copied().collect())
            .unwrap_or_default();
        for sid in dependents {
            self.evict_sblock(dev, sid, false);
        }
        let old = self.remove_pblock(id);
        let split_at = (front_size / self.chunk_size) as usize;
        let front_chunks = old.mapping.chunks[..split_at].to_vec();
        let back_chunks = old.mapping.chunks[split_at..].to_vec();

        let front_range = dev.reserve_address(front_size)?;
        let front_mapping = dev.map(front_range, &front_chunks)?;
        let back_range = dev.reserve_address(size - front_size)?;
        let back_mapping = dev.map(back_range, &back_chunks)?;
        dev.unmap_release(&old.mapping, false)?;

        let front_id = PBlockId(self.next_block);
        let back_id = PBlockId(self.next_block + 1);
        self.next_block += 2;
        let front_seq = self.fresh_seq();
        let back_seq = self.fresh_seq();
        self.insert_pblock(
            front_id,
            PBlock {
                mapping: front_mapping,
                size: front_size,
                directly_assigned: false,
                creation_seq: front_seq,
                last_use_seq: 0,
            },
        );
        self.insert_pblock(
            back_id,
            PBlock {
                mapping: back_mapping,
                size: size - front_size,
                directly_assigned: false,
                creation_seq: back_seq,
                last_use_seq: 0,
            },
        );
        Ok((front_id, back_id))
    }

    /// Stitches two or more inactive pBlocks into an sBlock. Enforces the
    /// fragmentation-limit floor on members; the allocation strategy uses an
    /// internal variant for freshly split fronts.
    pub fn stitch(&mut self, dev: &mut Device, members: &[PBlockId]) -> Result<SBlockId, GmError> {
        for &m in members {
            let size = self.pblock_size(m).ok_or(GmError::UnknownBlock)?;
            if size < self.config.fragmentation_limit {
                return Err(GmError::MemberBelowLimit {
                    size,
                    limit: self.config.fragmentation_limit,
                });
            }
        }
        self.stitch_unchecked(dev, members)
    }

    /// Stitch without the member-size floor. Reserves one range over the
    /// concatenated chunk lists; never creates chunks.
    fn stitch_unchecked(
        &mut self,
        dev: &mut Device,
        members: &[PBlockId],
    ) -> Result<SBlockId, GmError> {
        if members.len() < 2 {
            return Err(GmError::TooFewMembers);
        }
        let mut seen = BTreeSet::new();
        for &m in members {
            if !self.pblocks.contains_key(&m) {
                return Err(GmError::UnknownBlock);
            }
            if !seen.insert(m) {
                return Err(GmError::DuplicateMember);
            }
            if self.is_pblock_active(m) {
                return Err(GmError::MemberActive);
            }
        }
        let total: u64 = members.iter().map(|m| self.pblocks[m].size).sum();
        let all_chunks: Vec<ChunkId> = members
            .iter()
            .flat_map(|m| self.pblocks[m].mapping.chunks.iter().copied())
            .collect();
        let range = dev.reserve_address(total)?;
        let mapping = dev.map(range, &all_chunks)?;
        let id = SBlockId(self.next_block);
        self.next_block += 1;
        let creation_seq = self.fresh_seq();
        for &m in members {
            self.member_index.entry(m).or_default().insert(id);
        }
        self.spool.insert((Reverse(total), creation_seq, id));
        self.sblocks.insert(
            id,
            SBlock {
                mapping,
                members: members.to_vec(),
                size: total,
                directly_assigned: false,
                creation_seq,
                last_use_seq: creation_seq,
            },
        );
        self.sync_activity(&[], &[id]);
        Ok(id)
    }

    fn evict_sblock(&mut self, dev: &mut Device, id: SBlockId, reset_tape: bool) {
        let s = self.sblocks.remove(&id).expect("sblock is live");
        let key = (Reverse(s.size), s.creation_seq, id);
        self.spool.remove(&key);
        self.inactive_spool.remove(&key);
        for m in &s.members {
            if let Some(set) = self.member_index.get_mut(m) {
                set.remove(&id);
                if set.is_empty() {
                    self.member_index.remove(m);
                }
            }
            if reset_tape {
                if let Some(p) = self.pblocks.get_mut(m) {
                    p.last_use_seq = 0;
                }
            }
        }
        dev.unmap_release(&s.mapping, false)
            .expect("sblock mapping is live");
    }

    /// BestFit over the current inactive pools with the configured
    /// stitch-member floor.
    pub fn best_fit(&self, size: u64) -> (BestFitState, Vec<BlockRef>) {
        // Exact hits resolve directly against the size bucket; this is what
        // the full scan would return, without walking the pools.
        if let Some(block) = self.exact_inactive(size) {
            return (BestFitState::ExactMatch, vec![block]);
        }
        let inactive_s: Vec<(u64, SBlockId)> = self
            .inactive_spool
            .iter()
            .map(|&(Reverse(size), _, id)| (size, id))
            .collect();
        let inactive_p: Vec<(u64, PBlockId)> = self
            .inactive_ppool
            .iter()
            .map(|&(Reverse(size), _, id)| (size, id))
            .collect();
        best_fit_scan(
            size,
            &inactive_s,
            &inactive_p,
            self.config.fragmentation_limit,
        )
    }

    /// First inactive block of exactly `size`, sBlocks before pBlocks,
    /// creation order within a bucket — the same block the linear exact scan
    /// selects.
    fn exact_inactive(&self, size: u64) -> Option<BlockRef> {
        let s_lo = (Reverse(size), 0u64, SBlockId(0));
        let s_hi = (Reverse(size), u64::MAX, SBlockId(u64::MAX));
        if let Some(&(_, _, id)) = self.inactive_spool.range(s_lo..=s_hi).next() {
            return Some(BlockRef::S(id));
        }
        let p_lo = (Reverse(size), 0u64, PBlockId(0));
        let p_hi = (Reverse(size), u64::MAX, PBlockId(u64::MAX));
        if let Some(&(_, _, id)) = self.inactive_ppool.range(p_lo..=p_hi).next() {
            return Some(BlockRef::P(id));
        }
        None
    }

    /// Allocates a tensor. Requests under the small threshold go to the
    /// embedded splitting pool; everything else rounds up to chunk alignment
    /// and runs the BestFit strategy.
    pub fn malloc(&mut self, dev: &mut Device, size: u64) -> Result<TensorHandle, GmError> {
        if size == 0 {
            return Err(GmError::InvalidSize);
        }
        if size < self.config.small_alloc_threshold {
            return self.malloc_small(dev, size);
        }
        let rounded = round_up(size, self.chunk_size);
        // Amortized sPool capacity enforcement.
        self.stitch_free(dev);

        let (state, candidates) = self.best_fit(rounded);
        let bound = match state {
            BestFitState::ExactMatch => {
                self.counters.s1 += 1;
                match candidates[0] {
                    BlockRef::S(sid) => BoundBlock::SBlock(sid),
                    BlockRef::P(pid) => BoundBlock::PBlock(pid),
                }
            }
            BestFitState::SingleBlock => {
                let BlockRef::P(pid) = candidates[0] else {
                    unreachable!("single-block candidates are pBlocks");
                };
                let psize = self.pblocks[&pid].size;
                self.counters.s2 += 1;
                if psize - rounded < self.config.fragmentation_limit {
                    // Remainder would be a fragment: hand out the whole block.
                    BoundBlock::PBlock(pid)
                } else {
                    let (front, back) = self.split(dev, pid, rounded)?;
                    self.stitch_unchecked(dev, &[front, back])?;
                    BoundBlock::PBlock(front)
                }
            }
            BestFitState::MultipleBlocks => {
                self.counters.s3 += 1;
                let mut members: Vec<PBlockId> = candidates
                    .iter()
                    .map(|c| match c {
                        BlockRef::P(pid) => *pid,
                        BlockRef::S(_) => unreachable!("stitch candidates are pBlocks"),
                    })
                    .collect();
                let total: u64 = members.iter().map(|m| self.pblocks[m].size).sum();
                if total > rounded {
                    let last = *members.last().expect("state 3 has candidates");
                    let last_size = self.pblocks[&last].size;
                    let need_last = rounded - (total - last_size);
                    if last_size - need_last >= self.config.fragmentation_limit {
                        let (front, _back) = self.split(dev, last, need_last)?;
                        *members.last_mut().expect("non-empty") = front;
                    }
                    // Otherwise keep the whole last block; the stitched size
                    // overshoots by less than the fragmentation limit.
                }
                BoundBlock::SBlock(self.stitch_unchecked(dev, &members)?)
            }
            BestFitState::Insufficient => {
                let members: Vec<PBlockId> = candidates
                    .iter()
                    .map(|c| match c {
                        BlockRef::P(pid) => *pid,
                        BlockRef::S(_) => unreachable!("stitch candidates are pBlocks"),
                    })
                    .collect();
                let total: u64 = members.iter().map(|m| self.pblocks[m].size).sum();
                let shortfall = rounded - total;
                let new_block = match self.alloc_pblock(dev, shortfall) {
                    Ok(id) => id,
                    Err(GmError::OutOfMemory) => {
                        // Last resort: drop every inactive sBlock, flush the
                        // small pool's idle regions, retry once.
                        self.stitch_free_to(dev, 0);
                        self.small.flush_inactive_regions(dev);
                        match self.alloc_pblock(dev, shortfall) {
                            Ok(id) => id,
                            Err(GmError::OutOfMemory) => {
                                self.counters.s5 += 1;
                                return Err(GmError::OutOfMemory);
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    Err(e) => return Err(e),
                };
                self.counters.s4 += 1;
                if members.is_empty() {
                    BoundBlock::PBlock(new_block)
                } else {
                    let mut all = members;
                    all.push(new_block);
                    BoundBlock::SBlock(self.stitch_unchecked(dev, &all)?)
                }
            }
        };
        Ok(self.assign(bound, size, rounded))
    }

    fn malloc_small(&mut self, dev: &mut Device, size: u64) -> Result<TensorHandle, GmError> {
        let handle = match self.small.malloc(dev, size) {
            Ok(h) => h,
            Err(BfcError::OutOfMemory) => {
                self.counters.s5 += 1;
                return Err(GmError::OutOfMemory);
            }
            Err(e) => return Err(e.into()),
        };
        let rounded = self.small.block_size(handle).expect("freshly allocated");
        Ok(self.assign(BoundBlock::Small(handle), size, rounded))
    }

    fn bound_size(&self, bound: BoundBlock) -> u64 {
        match bound {
            BoundBlock::PBlock(id) => self.pblocks[&id].size,
            BoundBlock::SBlock(id) => self.sblocks[&id].size,
            BoundBlock::Small(h) => self.small.block_size(h).expect("small block is live"),
        }
    }

    fn assign(&mut self, bound: BoundBlock, requested: u64, rounded: u64) -> TensorHandle {
        let seq = self.fresh_seq();
        match bound {
            BoundBlock::PBlock(id) => {
                let p = self.pblocks.get_mut(&id).expect("assigning live pblock");
                debug_assert!(!p.directly_assigned);
                p.directly_assigned = true;
                p.last_use_seq = seq;
                let affected: Vec<SBlockId> = self
                    .member_index
                    .get(&id)
                    .map(|set| set.iter().copied().collect())
                    .unwrap_or_default();
                self.sync_activity(&[id], &affected);
            }
            BoundBlock::SBlock(id) => {
                let s = self.sblocks.get_mut(&id).expect("assigning live sblock");
                debug_assert!(!s.directly_assigned);
                s.directly_assigned = true;
                s.last_use_seq = seq;
                let (members, affected) = self.activity_neighborhood(id);
                self.sync_activity(&members, &affected);
            }
            BoundBlock::Small(_) => {}
        }
        if !matches!(bound, BoundBlock::Small(_)) {
            self.active_bytes += self.bound_size(bound);
        }
        let id = HandleId(self.next_handle);
        self.next_handle += 1;
        let handle = TensorHandle {
            id,
            bound,
            requested_size: requested,
            rounded_size: rounded,
        };
        self.handles.insert(id, handle);
        self.touch_peaks();
        handle
    }

    /// Releases a tensor: clears the bound block's assignment. No physical
    /// memory moves; derived activity of related blocks follows automatically.
    pub fn free(&mut self, handle: TensorHandle) -> Result<(), GmError> {
        let stored = self.handles.remove(&handle.id).ok_or(GmError::DoubleFree)?;
        match stored.bound {
            BoundBlock::PBlock(id) => {
                self.active_bytes -= self.pblocks[&id].size;
                self.pblocks
                    .get_mut(&id)
                    .expect("bound pblock is live")
                    .directly_assigned = false;
                let affected: Vec<SBlockId> = self
                    .member_index
                    .get(&id)
                    .map(|set| set.iter().copied().collect())
                    .unwrap_or_default();
                self.sync_activity(&[id], &affected);
            }
            BoundBlock::SBlock(id) => {
                self.active_bytes -= self.sblocks[&id].size;
                self.sblocks
                    .get_mut(&id)
                    .expect("bound sblock is live")
                    .directly_assigned = false;
                let (members, affected) = self.activity_neighborhood(id);
                self.sync_activity(&members, &affected);
            }
            BoundBlock::Small(h) => {
                self.small.free(h)?;
            }
        }
        Ok(())
    }

    /// Evicts least-recently-used inactive sBlocks until their total size is
    /// within the configured sPool capacity. Returns the eviction count.
    /// Member pBlocks survive; reserved memory never changes.
    pub fn stitch_free(&mut self, dev: &mut Device) -> u64 {
        self.stitch_free_to(dev, self.config.spool_capacity)
    }

    fn stitch_free_to(&mut self, dev: &mut Device, capacity: u64) -> u64 {
        let mut evicted = 0;
        loop {
            let mut total = 0u64;
            let mut victim: Option<(u64, SBlockId)> = None;
            for &(Reverse(size), _, id) in &self.inactive_spool {
                total += size;
                let last_use = self.sblocks[&id].last_use_seq;
                if victim.map_or(true, |(best, _)| last_use < best) {
                    victim = Some((last_use, id));
                }
            }
            if total <= capacity {
                break;
            }
            let Some((_, id)) = victim else { break };
            self.evict_sblock(dev, id, true);
            evicted += 1;
        }
        evicted
    }

    fn total_active(&self) -> u64 {
        self.active_bytes + self.small.active_bytes()
    }

    fn total_reserved(&self) -> u64 {
        self.reserved_bytes + self.small.reserved_bytes()
    }

    fn touch_peaks(&mut self) {
        self.peak_active = self.peak_active.max(self.total_active());
        self.peak_reserved = self.peak_reserved.max(self.total_reserved());
    }

    pub fn active_bytes(&self) -> u64 {
        self.total_active()
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.total_reserved()
    }

    pub fn stats(&self) -> GmStats {
        let mut ppool_histogram = BTreeMap::new();
        for &(Reverse(size), _, _) in &self.ppool {
            *ppool_histogram.entry(size).or_default() += 1;
        }
        let mut spool_histogram = BTreeMap::new();
        for &(Reverse(size), _, _) in &self.spool {
            *spool_histogram.entry(size).or_default() += 1;
        }
        GmStats {
            active_bytes: self.total_active(),
            reserved_bytes: self.total_reserved(),
            peak_active_bytes: self.peak_active,
            peak_reserved_bytes: self.peak_reserved,
            ppool_histogram,
            spool_histogram,
            counters: self.counters,
        }
    }

    /// Structural audit of every allocator invariant: chunk exclusivity,
    /// pPool partition of the device's chunks, sPool referential integrity,
    /// pool sortedness, handle exactness, and counter consistency.
    pub fn check_invariants(&self, dev: &Device) -> Result<(), String> {
        dev.audit()?;
        self.small.check_invariants()?;

        if self.ppool.len() != self.pblocks.len() {
            return Err("pPool and pBlock map disagree".into());
        }
        for &(Reverse(size), seq, id) in &self.ppool {
            let p = self
                .pblocks
                .get(&id)
                .ok_or_else(|| format!("pPool entry {id:?} has no block"))?;
            if p.size != size || p.creation_seq != seq {
                return Err(format!("pPool key for {id:?} is stale"));
            }
            if p.size != p.mapping.chunks.len() as u64 * self.chunk_size
                || p.size != p.mapping.range.length
            {
                return Err(format!("pBlock {id:?} size disagrees with its mapping"));
            }
        }
        if self.spool.len() != self.sblocks.len() {
            return Err("sPool and sBlock map disagree".into());
        }
        for &(Reverse(size), seq, id) in &self.spool {
            let s = self
                .sblocks
                .get(&id)
                .ok_or_else(|| format!("sPool entry {id:?} has no block"))?;
            if s.size != size || s.creation_seq != seq {
                return Err(format!("sPool key for {id:?} is stale"));
            }
            let member_total: u64 = s
                .members
                .iter()
                .map(|m| self.pblocks.get(m).map(|p| p.size).unwrap_or(0))
                .sum();
            if member_total != s.size {
                return Err(format!("sBlock {id:?} size disagrees with its members"));
            }
            let expected: Vec<ChunkId> = s
                .members
                .iter()
                .filter_map(|m| self.pblocks.get(m))
                .flat_map(|p| p.mapping.chunks.iter().copied())
                .collect();
            if expected != s.mapping.chunks {
                return Err(format!("sBlock {id:?} chunks disagree with its members"));
            }
            for m in &s.members {
                if !self.pblocks.contains_key(m) {
                    return Err(format!("sBlock {id:?} references dead pBlock {m:?}"));
                }
                if !self
                    .member_index
                    .get(m)
                    .is_some_and(|set| set.contains(&id))
                {
                    return Err(format!("member index missing {m:?} -> {id:?}"));
                }
            }
        }
        for (m, set) in &self.member_index {
            for sid in set {
                if !self
                    .sblocks
                    .get(sid)
                    .is_some_and(|s| s.members.contains(m))
                {
                    return Err(format!("member index has stale edge {m:?} -> {sid:?}"));
                }
            }
        }

        // pPool partition: pBlock chunk lists are disjoint and cover exactly
        // the device's live chunks.
        let mut owned: Vec<ChunkId> = Vec::new();
        for p in self.pblocks.values() {
            owned.extend(p.mapping.chunks.iter().copied());
        }
        owned.sort_unstable();
        if owned.windows(2).any(|w| w[0] == w[1]) {
            return Err("a chunk belongs to two pBlocks".into());
        }
        if owned != dev.live_chunk_ids() {
            return Err("pBlock chunks do not partition the device's live chunks".into());
        }

        // Chunk exclusivity under assignment.
        let mut assigned_chunks: BTreeSet<ChunkId> = BTreeSet::new();
        let mut claim = |chunks: &[ChunkId]| -> Result<(), String> {
            for c in chunks {
                if !assigned_chunks.insert(*c) {
                    return Err(format!("chunk {c:?} reachable from two assigned blocks"));
                }
            }
            Ok(())
        };
        for (id, p) in &self.pblocks {
            if p.directly_assigned {
                claim(&p.mapping.chunks).map_err(|e| format!("pBlock {id:?}: {e}"))?;
            }
        }
        for (id, s) in &self.sblocks {
            if s.directly_assigned {
                claim(&s.mapping.chunks).map_err(|e| format!("sBlock {id:?}: {e}"))?;
            }
        }

        // Sortedness (descending) is structural in the key; verify anyway.
        let psizes = self.ppool_sizes();
        if psizes.windows(2).any(|w| w[0] < w[1]) {
            return Err("pPool is not sorted descending".into());
        }
        let ssizes = self.spool_sizes();
        if ssizes.windows(2).any(|w| w[0] < w[1]) {
            return Err("sPool is not sorted descending".into());
        }

        // Handles: bound blocks live, assigned, and exact within the
        // unsplit-remainder allowance.
        let mut vmm_active = 0u64;
        for (id, h) in &self.handles {
            match h.bound {
                BoundBlock::PBlock(p) => {
                    let block = self
                        .pblocks
                        .get(&p)
                        .ok_or_else(|| format!("handle {id:?} bound to dead pBlock"))?;
                    if !block.directly_assigned {
                        return Err(format!("handle {id:?} bound to unassigned pBlock"));
                    }
                    vmm_active += block.size;
                    if block.size < h.rounded_size
                        || block.size - h.rounded_size >= self.config.fragmentation_limit
                    {
                        return Err(format!("handle {id:?} violates exactness"));
                    }
                }
                BoundBlock::SBlock(s) => {
                    let block = self
                        .sblocks
                        .get(&s)
                        .ok_or_else(|| format!("handle {id:?} bound to dead sBlock"))?;
                    if !block.directly_assigned {
                        return Err(format!("handle {id:?} bound to unassigned sBlock"));
                    }
                    vmm_active += block.size;
                    if block.size < h.rounded_size
                        || block.size - h.rounded_size >= self.config.fragmentation_limit
                    {
                        return Err(format!("handle {id:?} violates exactness"));
                    }
                }
                BoundBlock::Small(b) => {
                    let size = self
                        .small
                        .block_size(b)
                        .ok_or_else(|| format!("handle {id:?} bound to dead small block"))?;
                    if size != h.rounded_size {
                        return Err(format!("small handle {id:?} violates exactness"));
                    }
                }
            }
        }
        if vmm_active != self.active_bytes {
            return Err(format!(
                "active_bytes drift: counted {vmm_active}, stored {}",
                self.active_bytes
            ));
        }
        let pblock_total: u64 = self.pblocks.values().map(|p| p.size).sum();
        if pblock_total != self.reserved_bytes {
            return Err(format!(
                "reserved_bytes drift: counted {pblock_total}, stored {}",
                self.reserved_bytes
            ));
        }
        if self.total_active() > self.total_reserved() {
            return Err("active exceeds reserved".into());
        }
        Ok(())
    }
}

/// The BestFit scan over descending-size inactive pools.
///
/// Exact matches consider sBlocks then pBlocks; the candidate walk considers
/// pBlocks only: each block at least `request` bytes replaces the candidate
/// (leaving the smallest sufficient one), then smaller blocks accumulate
/// greedily while the running total is short. Blocks below
/// `min_stitch_member` never join the accumulation (pass 0 to disable).
pub fn best_fit_scan(
    request: u64,
    inactive_sblocks: &[(u64, SBlockId)],
    inactive_pblocks: &[(u64, PBlockId)],
    min_stitch_member: u64,
) -> (BestFitState, Vec<BlockRef>) {
    debug_assert!(inactive_sblocks.windows(2).all(|w| w[0].0 >= w[1].0));
    debug_assert!(inactive_pblocks.windows(2).all(|w| w[0].0 >= w[1].0));
    for &(size, id) in inactive_sblocks {
        if size == request {
            return (BestFitState::ExactMatch, vec![BlockRef::S(id)]);
        }
    }
    for &(size, id) in inactive_pblocks {
        if size == request {
            return (BestFitState::ExactMatch, vec![BlockRef::P(id)]);
        }
    }
    let mut candidates: Vec<BlockRef> = Vec::new();
    let mut accumulated = 0u64;
    for &(size, id) in inactive_pblocks {
        if size >= request {
            candidates = vec![BlockRef::P(id)];
            accumulated = size;
        } else if accumulated >= request {
            break;
        } else if size >= min_stitch_member {
            candidates.push(BlockRef::P(id));
            accumulated += size;
        }
    }
    if candidates.len() == 1 && accumulated > request {
        (BestFitState::SingleBlock, candidates)
    } else if accumulated >= request {
        (BestFitState::MultipleBlocks, candidates)
    } else {
        (BestFitState::Insufficient, candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GIB;
    use proptest::prelude::*;

    const CHUNK: u64 = 2 * MIB;

    fn setup(capacity: u64, frag_limit: u64) -> (Device, GmlakeAllocator) {
        let device = DeviceConfig::new(capacity, CHUNK).unwrap();
        let config = GmlakeConfig {
            fragmentation_limit: frag_limit,
            ..GmlakeConfig::for_device(&device)
        };
        let dev = Device::new(device).unwrap();
        let alloc = GmlakeAllocator::new(config, &device).unwrap();
        (dev, alloc)
    }

    #[test]
    fn alloc_pblock_builds_chunks_and_sorts_descending() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let p = gm.alloc_pblock(&mut dev, 6 * MIB).unwrap();
        assert_eq!(gm.pblock_chunks(p).unwrap().len(), 3);
        assert_eq!(gm.ppool_sizes(), vec![6 * MIB]);

        gm.alloc_pblock(&mut dev, 10 * MIB).unwrap();
        assert_eq!(gm.ppool_sizes(), vec![10 * MIB, 6 * MIB]);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn alloc_pblock_oom_is_atomic() {
        let (mut dev, mut gm) = setup(8 * MIB, CHUNK);
        gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let cost = dev.accumulated_cost();
        assert_eq!(
            gm.alloc_pblock(&mut dev, 6 * MIB),
            Err(GmError::OutOfMemory)
        );
        assert_eq!(gm.ppool_sizes(), vec![4 * MIB]);
        assert_eq!(dev.accumulated_cost(), cost);
    }

    #[test]
    fn split_partitions_the_chunk_list() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let p = gm.alloc_pblock(&mut dev, 512 * MIB).unwrap();
        let original = gm.pblock_chunks(p).unwrap().to_vec();
        let (front, back) = gm.split(&mut dev, p, 300 * MIB).unwrap();
        assert_eq!(gm.pblock_size(front), Some(300 * MIB));
        assert_eq!(gm.pblock_size(back), Some(212 * MIB));
        assert_eq!(gm.pblock_chunks(front).unwrap(), &original[..150]);
        assert_eq!(gm.pblock_chunks(back).unwrap(), &original[150..]);
        assert_eq!(gm.pblock_size(p), None);
        assert_eq!(dev.live_chunk_bytes(), 512 * MIB);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn split_rejects_degenerate_partitions() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let p = gm.alloc_pblock(&mut dev, 8 * MIB).unwrap();
        assert!(matches!(
            gm.split(&mut dev, p, 0),
            Err(GmError::Misaligned(_))
        ));
        assert!(matches!(
            gm.split(&mut dev, p, 8 * MIB),
            Err(GmError::Misaligned(_))
        ));
        assert!(matches!(
            gm.split(&mut dev, p, 3 * MIB),
            Err(GmError::Misaligned(_))
        ));
    }

    #[test]
    fn split_rejects_active_blocks() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        gm.alloc_pblock(&mut dev, 8 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 8 * MIB).unwrap(); // exact match
        let BoundBlock::PBlock(p) = handle.bound else {
            panic!("expected a pBlock binding");
        };
        assert_eq!(gm.split(&mut dev, p, 4 * MIB), Err(GmError::ActiveBlock));
    }

    #[test]
    fn split_invalidates_referencing_sblocks() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let a = gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let b = gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let s = gm.stitch(&mut dev, &[a, b]).unwrap();
        assert_eq!(gm.spool_sizes(), vec![8 * MIB]);
        gm.split(&mut dev, a, 2 * MIB).unwrap();
        assert_eq!(gm.sblock_size(s), None);
        assert!(gm.spool_sizes().is_empty());
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn stitch_aliases_without_new_chunks() {
        let (mut dev, mut gm) = setup(4 * GIB, 128 * MIB);
        let a = gm.alloc_pblock(&mut dev, GIB).unwrap();
        let b = gm.alloc_pblock(&mut dev, 2 * GIB).unwrap();
        let live_before = dev.live_chunk_bytes();
        let reserved_before = gm.reserved_bytes();
        let s = gm.stitch(&mut dev, &[a, b]).unwrap();
        assert_eq!(gm.sblock_size(s), Some(3 * GIB));
        assert_eq!(dev.live_chunk_bytes(), live_before);
        assert_eq!(gm.reserved_bytes(), reserved_before);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn stitch_validates_members() {
        let (mut dev, mut gm) = setup(GIB, 128 * MIB);
        let a = gm.alloc_pblock(&mut dev, 256 * MIB).unwrap();
        assert_eq!(gm.stitch(&mut dev, &[a]), Err(GmError::TooFewMembers));

        let small = gm.alloc_pblock(&mut dev, 64 * MIB).unwrap();
        assert_eq!(
            gm.stitch(&mut dev, &[a, small]),
            Err(GmError::MemberBelowLimit {
                size: 64 * MIB,
                limit: 128 * MIB
            })
        );

        let b = gm.alloc_pblock(&mut dev, 128 * MIB).unwrap();
        assert_eq!(gm.stitch(&mut dev, &[a, a]), Err(GmError::DuplicateMember));

        let handle = gm.malloc(&mut dev, 128 * MIB).unwrap(); // takes b exactly
        assert_eq!(handle.bound, BoundBlock::PBlock(b));
        assert_eq!(gm.stitch(&mut dev, &[a, b]), Err(GmError::MemberActive));
    }

    #[test]
    fn best_fit_scan_walks_the_four_states() {
        // sizes in chunk units: sPool {300}, pPool {400, 200}
        let sblocks = [(300 * CHUNK, SBlockId(10))];
        let pblocks = [(400 * CHUNK, PBlockId(0)), (200 * CHUNK, PBlockId(1))];

        let (state, candidates) = best_fit_scan(300 * CHUNK, &sblocks, &pblocks, 0);
        assert_eq!(state, BestFitState::ExactMatch);
        assert_eq!(candidates, vec![BlockRef::S(SBlockId(10))]);

        // no exact match: the smallest single block that is large enough
        let (state, candidates) = best_fit_scan(300 * CHUNK, &[], &pblocks, 0);
        assert_eq!(state, BestFitState::SingleBlock);
        assert_eq!(candidates, vec![BlockRef::P(PBlockId(0))]);

        // greedy accumulation covers the request
        let (state, candidates) = best_fit_scan(500 * CHUNK, &[], &pblocks, 0);
        assert_eq!(state, BestFitState::MultipleBlocks);
        assert_eq!(candidates, vec![BlockRef::P(PBlockId(0)), BlockRef::P(PBlockId(1))]);

        // insufficient: the partial list is still returned
        let (state, candidates) = best_fit_scan(700 * CHUNK, &[], &pblocks, 0);
        assert_eq!(state, BestFitState::Insufficient);
        assert_eq!(candidates, vec![BlockRef::P(PBlockId(0)), BlockRef::P(PBlockId(1))]);
    }

    #[test]
    fn best_fit_on_live_pools_prefers_exact_sblock() {
        let (mut dev, mut gm) = setup(8 * GIB, CHUNK);
        let a = gm.alloc_pblock(&mut dev, 150 * CHUNK).unwrap();
        let b = gm.alloc_pblock(&mut dev, 150 * CHUNK).unwrap();
        let s = gm.stitch(&mut dev, &[a, b]).unwrap();
        let c = gm.alloc_pblock(&mut dev, 400 * CHUNK).unwrap();
        let d = gm.alloc_pblock(&mut dev, 200 * CHUNK).unwrap();

        // exact stitched match wins over the pBlock scan
        let (state, candidates) = gm.best_fit(300 * CHUNK);
        assert_eq!(state, BestFitState::ExactMatch);
        assert_eq!(candidates, vec![BlockRef::S(s)]);

        // 350 has no exact match anywhere; 400 is the smallest cover
        let (state, candidates) = gm.best_fit(350 * CHUNK);
        assert_eq!(state, BestFitState::SingleBlock);
        assert_eq!(candidates, vec![BlockRef::P(c)]);

        // 500 needs the top two blocks
        let (state, candidates) = gm.best_fit(500 * CHUNK);
        assert_eq!(state, BestFitState::MultipleBlocks);
        assert_eq!(candidates, vec![BlockRef::P(c), BlockRef::P(d)]);

        // 1500 exceeds everything inactive (400+200+150+150)
        let (state, candidates) = gm.best_fit(1500 * CHUNK);
        assert_eq!(state, BestFitState::Insufficient);
        assert_eq!(
            candidates,
            vec![BlockRef::P(c), BlockRef::P(d), BlockRef::P(a), BlockRef::P(b)]
        );
    }

    #[test]
    fn best_fit_floor_skips_small_blocks_in_accumulation() {
        let (mut dev, mut gm) = setup(GIB, 8 * MIB);
        gm.alloc_pblock(&mut dev, 6 * MIB).unwrap(); // below the 8 MiB floor
        gm.alloc_pblock(&mut dev, 10 * MIB).unwrap();
        let (state, candidates) = gm.best_fit(14 * MIB);
        // the 6 MiB block may not join the stitch, so the pool cannot cover 14
        assert_eq!(state, BestFitState::Insufficient);
        assert_eq!(candidates.len(), 1);
    }

    #[test]
    fn malloc_small_requests_use_the_embedded_pool() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let handle = gm.malloc(&mut dev, MIB).unwrap();
        assert!(matches!(handle.bound, BoundBlock::Small(_)));
        assert!(gm.ppool_sizes().is_empty());
        assert!(gm.spool_sizes().is_empty());
        assert_eq!(gm.stats().active_bytes, MIB);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_on_fresh_pool_is_s4_without_stitch() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let handle = gm.malloc(&mut dev, 6 * MIB).unwrap();
        assert!(matches!(handle.bound, BoundBlock::PBlock(_)));
        assert_eq!(handle.rounded_size, 6 * MIB);
        assert!(gm.spool_sizes().is_empty());
        let stats = gm.stats();
        assert_eq!(stats.counters.s4, 1);
        assert_eq!(stats.active_bytes, 6 * MIB);
        assert_eq!(stats.reserved_bytes, 6 * MIB);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s2_splits_and_seeds_a_companion_sblock() {
        let (mut dev, mut gm) = setup(2 * GIB, 128 * MIB);
        gm.alloc_pblock(&mut dev, 512 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 300 * MIB).unwrap();
        let stats = gm.stats();
        assert_eq!(stats.counters.s2, 1);
        let BoundBlock::PBlock(front) = handle.bound else {
            panic!("S2 assigns the split front");
        };
        assert_eq!(gm.pblock_size(front), Some(300 * MIB));
        assert_eq!(gm.ppool_sizes(), vec![300 * MIB, 212 * MIB]);
        // companion stitch spans the original block and is active while the
        // front is assigned
        assert_eq!(gm.spool_sizes(), vec![512 * MIB]);
        gm.check_invariants(&dev).unwrap();

        // free, then an exact repeat of the original size reuses the companion
        gm.free(handle).unwrap();
        let again = gm.malloc(&mut dev, 512 * MIB).unwrap();
        assert!(matches!(again.bound, BoundBlock::SBlock(_)));
        assert_eq!(gm.stats().counters.s1, 1);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s2_hands_out_whole_block_when_remainder_would_fragment() {
        let (mut dev, mut gm) = setup(2 * GIB, 128 * MIB);
        gm.alloc_pblock(&mut dev, 130 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 10 * MIB).unwrap();
        let BoundBlock::PBlock(p) = handle.bound else {
            panic!("unsplit assignment is a pBlock");
        };
        // 120 MiB remainder < 128 MiB limit: no split, no companion stitch
        assert_eq!(gm.pblock_size(p), Some(130 * MIB));
        assert!(gm.spool_sizes().is_empty());
        assert_eq!(gm.stats().active_bytes, 130 * MIB);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s3_stitches_exact_cover() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 6 * MIB).unwrap();
        assert!(matches!(handle.bound, BoundBlock::SBlock(_)));
        let stats = gm.stats();
        assert_eq!(stats.counters.s3, 1);
        assert_eq!(stats.reserved_bytes, 6 * MIB); // no new physical memory
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s3_splits_the_overshooting_tail() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        gm.alloc_pblock(&mut dev, 6 * MIB).unwrap();
        gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 8 * MIB).unwrap();
        let BoundBlock::SBlock(s) = handle.bound else {
            panic!("S3 assigns a stitch");
        };
        assert_eq!(gm.sblock_size(s), Some(8 * MIB));
        // the 4 MiB tail split at 2 MiB leaves a 2 MiB remainder in the pool
        assert_eq!(gm.ppool_sizes(), vec![6 * MIB, 2 * MIB, 2 * MIB]);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s3_keeps_overshoot_below_the_limit_unsplit() {
        let (mut dev, mut gm) = setup(GIB, 8 * MIB);
        gm.alloc_pblock(&mut dev, 8 * MIB).unwrap();
        gm.alloc_pblock(&mut dev, 10 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 12 * MIB).unwrap();
        let BoundBlock::SBlock(s) = handle.bound else {
            panic!("S3 assigns a stitch");
        };
        // need 2 MiB of the 8 MiB tail; the 6 MiB remainder is under the
        // limit, so the whole block joins and the stitch overshoots
        assert_eq!(gm.sblock_size(s), Some(18 * MIB));
        assert!(gm.sblock_size(s).unwrap() - handle.rounded_size < 8 * MIB);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_s4_allocates_only_the_shortfall() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let reserved_before = gm.reserved_bytes();
        let handle = gm.malloc(&mut dev, 10 * MIB).unwrap();
        assert!(matches!(handle.bound, BoundBlock::SBlock(_)));
        assert_eq!(gm.reserved_bytes(), reserved_before + 4 * MIB);
        assert_eq!(gm.stats().counters.s4, 1);
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn malloc_reports_oom_after_the_fallback_chain() {
        let (mut dev, mut gm) = setup(8 * MIB, CHUNK);
        let h = gm.malloc(&mut dev, 8 * MIB).unwrap();
        assert_eq!(gm.malloc(&mut dev, 4 * MIB), Err(GmError::OutOfMemory));
        assert_eq!(gm.stats().counters.s5, 1);
        gm.check_invariants(&dev).unwrap();
        // freeing makes the capacity reusable without new physical memory
        gm.free(h).unwrap();
        let again = gm.malloc(&mut dev, 8 * MIB).unwrap();
        assert!(matches!(again.bound, BoundBlock::PBlock(_)));
        assert_eq!(gm.stats().counters.s1, 1);
    }

    #[test]
    fn free_cascades_through_derived_activity() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let handle = gm.malloc(&mut dev, 6 * MIB).unwrap();
        let BoundBlock::SBlock(s) = handle.bound else {
            panic!("expected stitch");
        };
        let members = gm.sblock_members(s).unwrap().to_vec();
        assert!(members.iter().all(|&m| gm.is_pblock_active(m)));
        assert!(gm.is_sblock_active(s));

        gm.free(handle).unwrap();
        assert!(members.iter().all(|&m| !gm.is_pblock_active(m)));
        assert!(!gm.is_sblock_active(s));

        // exact repeat returns the very same sBlock
        let again = gm.malloc(&mut dev, 6 * MIB).unwrap();
        assert_eq!(again.bound, BoundBlock::SBlock(s));
        assert_eq!(gm.stats().counters.s1, 1);
    }

    #[test]
    fn double_free_is_rejected() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let handle = gm.malloc(&mut dev, 4 * MIB).unwrap();
        gm.free(handle).unwrap();
        assert_eq!(gm.free(handle), Err(GmError::DoubleFree));
    }

    #[test]
    fn stitch_free_evicts_lru_first() {
        let device = DeviceConfig::new(GIB, CHUNK).unwrap();
        let config = GmlakeConfig {
            fragmentation_limit: CHUNK,
            spool_capacity: 6 * MIB,
            small_alloc_threshold: CHUNK,
        };
        let mut dev = Device::new(device).unwrap();
        let mut gm = GmlakeAllocator::new(config, &device).unwrap();
        let a = gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let b = gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let c = gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let d = gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        let old = gm.stitch(&mut dev, &[a, b]).unwrap();
        let newer = gm.stitch(&mut dev, &[c, d]).unwrap();

        // Both inactive at 12 MiB total against a 6 MiB cap: evicting the
        // older one suffices.
        let reserved = gm.reserved_bytes();
        let chunks = dev.live_chunk_bytes();
        assert_eq!(gm.stitch_free(&mut dev), 1);
        assert_eq!(gm.sblock_size(old), None);
        assert!(gm.sblock_size(newer).is_some());
        assert_eq!(gm.reserved_bytes(), reserved);
        assert_eq!(dev.live_chunk_bytes(), chunks);
        // pattern tape: evicted members' use sequence is reset
        assert_eq!(gm.pblock_last_use_seq(a), Some(0));
        gm.check_invariants(&dev).unwrap();
    }

    #[test]
    fn stitch_free_is_a_noop_under_capacity() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let a = gm.alloc_pblock(&mut dev, 2 * MIB).unwrap();
        let b = gm.alloc_pblock(&mut dev, 4 * MIB).unwrap();
        gm.stitch(&mut dev, &[a, b]).unwrap();
        assert_eq!(gm.stitch_free(&mut dev), 0);
        assert_eq!(gm.spool_sizes(), vec![6 * MIB]);
    }

    #[test]
    fn stats_track_lazy_retention() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        let fresh = gm.stats();
        assert_eq!(fresh.active_bytes, 0);
        assert_eq!(fresh.reserved_bytes, 0);
        assert_eq!(fresh.counters, StateCounters::default());

        let handle = gm.malloc(&mut dev, 6 * MIB).unwrap();
        let stats = gm.stats();
        assert_eq!(stats.active_bytes, 6 * MIB);
        assert_eq!(stats.reserved_bytes, 6 * MIB);
        assert_eq!(stats.counters.s4, 1);

        gm.free(handle).unwrap();
        let stats = gm.stats();
        assert_eq!(stats.active_bytes, 0);
        assert_eq!(stats.reserved_bytes, 6 * MIB);
        assert_eq!(stats.peak_active_bytes, 6 * MIB);
    }

    #[test]
    fn zero_size_requests_are_rejected() {
        let (mut dev, mut gm) = setup(GIB, CHUNK);
        assert_eq!(gm.malloc(&mut dev, 0), Err(GmError::InvalidSize));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        /// Random malloc/free interleavings uphold every structural
        /// invariant, OOM included.
        #[test]
        fn random_sequences_uphold_invariants(
            ops in proptest::collection::vec((0u8..4, 1u64..40), 1..60),
        ) {
            let device = DeviceConfig::new(128 * MIB, CHUNK).unwrap();
            let config = GmlakeConfig {
                fragmentation_limit: 8 * MIB,
                spool_capacity: 64 * MIB,
                small_alloc_threshold: CHUNK,
            };
            let mut dev = Device::new(device).unwrap();
            let mut gm = GmlakeAllocator::new(config, &device).unwrap();
            let mut live: Vec<TensorHandle> = Vec::new();
            for (kind, value) in ops {
                match kind {
                    0 => {
                        // small-path sizes
                        if let Ok(h) = gm.malloc(&mut dev, value * 17 * 1024) {
                            live.push(h);
                        }
                    }
                    1 | 2 => {
                        if let Ok(h) = gm.malloc(&mut dev, value * 1536 * 1024) {
                            live.push(h);
                        }
                    }
                    _ => {
                        if !live.is_empty() {
                            let h = live.swap_remove((value as usize) % live.len());
                            gm.free(h).unwrap();
                        }
                    }
                }
                gm.check_invariants(&dev).unwrap();
            }
        }
    }
}
