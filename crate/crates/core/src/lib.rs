//! Trace-driven GPU memory allocator simulation.
//!
//! Three allocators run over a simulated chunk-granular device:
//!
//! - `native`: every request goes straight to the device (the 1.0-cost
//!   baseline, fully utilized by construction);
//! - `bfc`: a best-fit-with-coalescing caching pool that splits blocks and
//!   lazily retains freed memory;
//! - `gmlake`: a virtual-memory-stitching allocator whose stitched blocks
//!   make non-contiguous physical chunks look contiguous, trading mapping
//!   cost for fragmentation.
//!
//! [`trace`] defines the JSON-Lines workload format and synthetic generators,
//! [`replay`] drives a full trace through an allocator, and [`metrics`] turns
//! the observations into utilization / fragmentation reports.

pub mod bfc;
pub mod gmlake;
pub mod metrics;
pub mod replay;
pub mod trace;
pub mod units;
pub mod vm;

pub use bfc::{BfcConfig, BfcError, BfcHandle, BfcPool, BfcStats};
pub use gmlake::{
    best_fit_scan, BestFitState, BlockRef, BoundBlock, GmError, GmStats, GmlakeAllocator,
    GmlakeConfig, PBlockId, SBlockId, StateCounters, TensorHandle,
};
pub use metrics::{
    mem_reduction_ratio, utilization, MetricsError, ReplayObservation, ReplayReport,
    TimelinePoint,
};
pub use replay::{replay, AllocatorMode, ReplayConfig, ReplayError, ReplayOutcome};
pub use trace::{
    gen_irregular, gen_periodic, generate, parse_trace, preset_params, read_trace_file,
    trace_stats, write_trace, write_trace_file, GeneratorParams, Irregularity, SizeDistribution,
    TraceError, TraceEvent, TraceOp, TracePattern, TraceStats,
};
pub use units::{format_bytes, parse_bytes, GIB, KIB, MIB};
pub use vm::{
    ChunkId, CostModel, Device, DeviceConfig, Mapping, PhysicalChunk, RegionId, VirtualRange,
    VmApi, VmError,
};
