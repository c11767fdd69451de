//! Chunk-granular device memory model with a low-level virtual-memory API
//! (reserve / create / map / unmap+release) plus a native malloc/free path,
//! and normalized cost accounting.
//!
//! Costs are expressed in units of one native malloc. The per-call cost table
//! is anchored at three chunk sizes (2 MiB, 128 MiB, 1024 MiB); other chunk
//! sizes use log-log interpolation. Set-up and tear-down charges accumulate in
//! separate counters so experiments can exclude tear-down.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::units::{is_aligned, GIB, MIB};

/// Identifier of a physical chunk. Never reused within one device instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub u64);

/// Identifier of a native (malloc-style) region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u64);

/// A reserved span of virtual address space. Bases are a monotone 64-bit
/// ordinal and are never reused, so live ranges are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualRange {
    pub base: u64,
    pub length: u64,
}

impl VirtualRange {
    pub fn end(&self) -> u64 {
        self.base + self.length
    }
}

/// Descriptor of one live physical chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhysicalChunk {
    pub id: ChunkId,
    pub size: u64,
}

/// A live virtual-to-physical mapping. Chunk order defines the layout of the
/// range. The same chunk may appear in several live mappings: aliasing is
/// legal at this layer, exclusivity is the allocator's job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mapping {
    pub range: VirtualRange,
    pub chunks: Vec<ChunkId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub capacity_bytes: u64,
    pub chunk_size: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            capacity_bytes: 80 * GIB,
            chunk_size: 2 * MIB,
        }
    }
}

impl DeviceConfig {
    pub fn new(capacity_bytes: u64, chunk_size: u64) -> Result<Self, VmError> {
        let config = Self {
            capacity_bytes,
            chunk_size,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), VmError> {
        if self.chunk_size < 2 * MIB || !self.chunk_size.is_power_of_two() {
            return Err(VmError::InvalidConfig(
                "chunk_size must be a power of two >= 2 MiB".into(),
            ));
        }
        if self.capacity_bytes == 0 || !is_aligned(self.capacity_bytes, self.chunk_size) {
            return Err(VmError::InvalidConfig(
                "capacity_bytes must be a positive multiple of chunk_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VmApi {
    Reserve,
    Create,
    Map,
    SetAccess,
    NativeMalloc,
    NativeFree,
}

/// Normalized cost table. `Reserve` is charged once per reservation; `Create`,
/// `Map` and `SetAccess` are charged per chunk; the native calls are the 1.0
/// baseline.
///
/// The per-chunk anchors are the measured totals of a 2 GiB allocation divided
/// by its chunk count (1024, 16 and 2 chunks at the three anchor sizes).
#[derive(Debug, Clone)]
pub struct CostModel {
    anchor_sizes: [u64; 3],
    reserve: [f64; 3],
    create: [f64; 3],
    map: [f64; 3],
    set_access: [f64; 3],
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            anchor_sizes: [2 * MIB, 128 * MIB, 1024 * MIB],
            reserve: [0.003, 0.003, 0.002],
            create: [18.1 / 1024.0, 0.89 / 16.0, 0.79 / 2.0],
            map: [0.70 / 1024.0, 0.01 / 16.0, 0.002 / 2.0],
            set_access: [96.8 / 1024.0, 8.2 / 16.0, 0.7 / 2.0],
        }
    }
}

impl CostModel {
    /// Cost of one call of `api` at the given chunk size, in native-malloc
    /// units.
    pub fn cost(&self, api: VmApi, chunk_size: u64) -> f64 {
        match api {
            VmApi::NativeMalloc | VmApi::NativeFree => 1.0,
            VmApi::Reserve => self.interpolate(&self.reserve, chunk_size),
            VmApi::Create => self.interpolate(&self.create, chunk_size),
            VmApi::Map => self.interpolate(&self.map, chunk_size),
            VmApi::SetAccess => self.interpolate(&self.set_access, chunk_size),
        }
    }

    fn interpolate(&self, row: &[f64; 3], chunk_size: u64) -> f64 {
        if let Some(i) = self.anchor_sizes.iter().position(|&s| s == chunk_size) {
            return row[i];
        }
        // Log-log interpolation between anchors; the outer segments
        // extrapolate (chunk sizes below 2 MiB are rejected by DeviceConfig).
        let seg = if chunk_size < self.anchor_sizes[1] { 0 } else { 1 };
        let (s0, s1) = (self.anchor_sizes[seg] as f64, self.anchor_sizes[seg + 1] as f64);
        let (c0, c1) = (row[seg], row[seg + 1]);
        let t = ((chunk_size as f64).ln() - s0.ln()) / (s1.ln() - s0.ln());
        (c0.ln() + t * (c1.ln() - c0.ln())).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("length {0} is zero or not chunk-aligned")]
    InvalidLength(u64),
    #[error("chunk count must be positive")]
    InvalidCount,
    #[error("physical OOM: requested {requested} bytes, {available} available")]
    PhysicalOom { requested: u64, available: u64 },
    #[error("mapping size mismatch: range holds {expected} bytes, chunks total {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("range at base {0} is already mapped")]
    AlreadyMapped(u64),
    #[error("no live range at base {0} with the given length")]
    UnknownRange(u64),
    #[error("unknown or destroyed chunk {0:?}")]
    UnknownChunk(ChunkId),
    #[error("mapping is not live")]
    NotLive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RangeState {
    Reserved,
    Mapped,
}

/// Simulated device: physical chunks, native regions, virtual ranges and
/// mappings, with running cost counters. Single-threaded state machine.
#[derive(Debug)]
pub struct Device {
    config: DeviceConfig,
    cost_model: CostModel,
    next_chunk: u64,
    next_region: u64,
    next_va: u64,
    /// Live chunk -> number of live mappings referencing it.
    chunks: HashMap<ChunkId, u32>,
    /// Live range base -> (length, state). BTreeMap keeps the audit scan simple.
    ranges: BTreeMap<u64, (u64, RangeState)>,
    /// Live mapping, keyed by range base (bases are never reused).
    mappings: HashMap<u64, Vec<ChunkId>>,
    native: HashMap<RegionId, u64>,
    native_bytes: u64,
    setup_cost: f64,
    teardown_cost: f64,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Self, VmError> {
        config.validate()?;
        Ok(Self {
            config,
            cost_model: CostModel::default(),
            next_chunk: 0,
            next_region: 0,
            next_va: 0,
            chunks: HashMap::new(),
            ranges: BTreeMap::new(),
            mappings: HashMap::new(),
            native: HashMap::new(),
            native_bytes: 0,
            setup_cost: 0.0,
            teardown_cost: 0.0,
        })
    }

    pub fn config(&self) -> DeviceConfig {
        self.config
    }

    pub fn chunk_size(&self) -> u64 {
        self.config.chunk_size
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity_bytes
    }

    pub fn live_chunk_count(&self) -> u64 {
        self.chunks.len() as u64
    }

    pub fn live_chunk_bytes(&self) -> u64 {
        self.live_chunk_count() * self.config.chunk_size
    }

    pub fn native_bytes(&self) -> u64 {
        self.native_bytes
    }

    /// Capacity not held by chunks or native regions.
    pub fn free_capacity(&self) -> u64 {
        self.config.capacity_bytes - self.live_chunk_bytes() - self.native_bytes
    }

    /// Running total of every charge since device creation (set-up plus
    /// tear-down). Monotone non-decreasing.
    pub fn accumulated_cost(&self) -> f64 {
        self.setup_cost + self.teardown_cost
    }

    pub fn setup_cost(&self) -> f64 {
        self.setup_cost
    }

    pub fn teardown_cost(&self) -> f64 {
        self.teardown_cost
    }

    fn charge_setup(&mut self, api: VmApi, calls: u64) {
        self.setup_cost += self.cost_model.cost(api, self.config.chunk_size) * calls as f64;
    }

    fn charge_teardown(&mut self, api: VmApi, calls: u64) {
        self.teardown_cost += self.cost_model.cost(api, self.config.chunk_size) * calls as f64;
    }

    /// Reserves a fresh virtual range. Address space is modeled as
    /// inexhaustible; bases are handed out by a monotone cursor.
    pub fn reserve_address(&mut self, length: u64) -> Result<VirtualRange, VmError> {
        if length == 0 || !is_aligned(length, self.config.chunk_size) {
            return Err(VmError::InvalidLength(length));
        }
        let base = self.next_va;
        self.next_va += length;
        self.ranges.insert(base, (length, RangeState::Reserved));
        self.charge_setup(VmApi::Reserve, 1);
        Ok(VirtualRange { base, length })
    }

    /// Creates `count` fresh physical chunks. All-or-nothing: on OOM no chunk
    /// is created and nothing is charged.
    pub fn create_chunks(&mut self, count: u64) -> Result<Vec<PhysicalChunk>, VmError> {
        if count == 0 {
            return Err(VmError::InvalidCount);
        }
        let requested = count * self.config.chunk_size;
        let available = self.free_capacity();
        if requested > available {
            return Err(VmError::PhysicalOom {
                requested,
                available,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = ChunkId(self.next_chunk);
            self.next_chunk += 1;
            self.chunks.insert(id, 0);
            out.push(PhysicalChunk {
                id,
                size: self.config.chunk_size,
            });
        }
        self.charge_setup(VmApi::Create, count);
        Ok(out)
    }

    /// Maps `chunks`, in order, onto a reserved and currently unmapped range.
    pub fn map(&mut self, range: VirtualRange, chunks: &[ChunkId]) -> Result<Mapping, VmError> {
        let actual = chunks.len() as u64 * self.config.chunk_size;
        if actual != range.length {
            return Err(VmError::SizeMismatch {
                expected: range.length,
                actual,
            });
        }
        match self.ranges.get(&range.base) {
            Some(&(length, _)) if length != range.length => {
                return Err(VmError::UnknownRange(range.base))
            }
            Some(&(_, RangeState::Mapped)) => return Err(VmError::AlreadyMapped(range.base)),
            Some(&(_, RangeState::Reserved)) => {}
            None => return Err(VmError::UnknownRange(range.base)),
        }
        for id in chunks {
            if !self.chunks.contains_key(id) {
                return Err(VmError::UnknownChunk(*id));
            }
        }
        for id in chunks {
            *self.chunks.get_mut(id).expect("checked above") += 1;
        }
        self.ranges
            .insert(range.base, (range.length, RangeState::Mapped));
        self.mappings.insert(range.base, chunks.to_vec());
        let per_chunk = chunks.len() as u64;
        self.charge_setup(VmApi::Map, per_chunk);
        self.charge_setup(VmApi::SetAccess, per_chunk);
        Ok(Mapping {
            range,
            chunks: chunks.to_vec(),
        })
    }

    /// Removes a live mapping and frees its address range. With
    /// `release_chunks`, every chunk whose live-mapping count dropped to zero
    /// is destroyed and its capacity returned. Tear-down charges mirror the
    /// set-up APIs: unmap = map cost per chunk, release = create cost per
    /// destroyed chunk, address free = reserve cost.
    pub fn unmap_release(
        &mut self,
        mapping: &Mapping,
        release_chunks: bool,
    ) -> Result<(), VmError> {
        let chunks = self.mappings.remove(&mapping.range.base).ok_or(VmError::NotLive)?;
        self.ranges.remove(&mapping.range.base);
        self.charge_teardown(VmApi::Map, chunks.len() as u64);
        self.charge_teardown(VmApi::Reserve, 1);
        let mut destroyed = 0u64;
        for id in &chunks {
            let count = self.chunks.get_mut(id).expect("mapped chunk is live");
            *count -= 1;
            if release_chunks && *count == 0 {
                self.chunks.remove(id);
                destroyed += 1;
            }
        }
        if destroyed > 0 {
            self.charge_teardown(VmApi::Create, destroyed);
        }
        Ok(())
    }

    /// Allocates a byte-granular native region, charging one baseline unit.
    pub fn native_alloc(&mut self, size: u64) -> Result<RegionId, VmError> {
        if size == 0 {
            return Err(VmError::InvalidLength(0));
        }
        let available = self.free_capacity();
        if size > available {
            return Err(VmError::PhysicalOom {
                requested: size,
                available,
            });
        }
        let id = RegionId(self.next_region);
        self.next_region += 1;
        self.native.insert(id, size);
        self.native_bytes += size;
        self.charge_setup(VmApi::NativeMalloc, 1);
        Ok(id)
    }

    /// Frees a native region, returning its size.
    pub fn native_free(&mut self, region: RegionId) -> Result<u64, VmError> {
        let size = self.native.remove(&region).ok_or(VmError::NotLive)?;
        self.native_bytes -= size;
        self.charge_teardown(VmApi::NativeFree, 1);
        Ok(size)
    }

    /// Live chunk ids, sorted. For allocator-level partition audits.
    pub fn live_chunk_ids(&self) -> Vec<ChunkId> {
        let mut ids: Vec<ChunkId> = self.chunks.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Number of live mappings referencing `chunk`, if it is live.
    pub fn chunk_map_count(&self, chunk: ChunkId) -> Option<u32> {
        self.chunks.get(&chunk).copied()
    }

    /// Internal consistency scan: range disjointness, capacity conservation,
    /// mapping reference counts.
    pub fn audit(&self) -> Result<(), String> {
        let mut prev_end = 0u64;
        for (&base, &(length, _)) in &self.ranges {
            if base < prev_end {
                return Err(format!("live ranges overlap at base {base}"));
            }
            prev_end = base + length;
        }
        if self.live_chunk_bytes() + self.native_bytes > self.config.capacity_bytes {
            return Err("live memory exceeds capacity".into());
        }
        let mut counts: HashMap<ChunkId, u32> = HashMap::new();
        for (base, chunks) in &self.mappings {
            match self.ranges.get(base) {
                Some(&(length, RangeState::Mapped))
                    if length == chunks.len() as u64 * self.config.chunk_size => {}
                _ => return Err(format!("mapping at base {base} has no matching live range")),
            }
            for id in chunks {
                *counts.entry(*id).or_default() += 1;
            }
        }
        for (id, &count) in &self.chunks {
            if counts.get(id).copied().unwrap_or(0) != count {
                return Err(format!("stale mapping count for chunk {id:?}"));
            }
        }
        for id in counts.keys() {
            if !self.chunks.contains_key(id) {
                return Err(format!("mapping references destroyed chunk {id:?}"));
            }
        }
        Ok(())
    }
}
