//! Allocation traces: the JSON-Lines on-disk format, validation, synthetic
//! workload generators, and summary statistics.
//!
//! A trace is a sequence of malloc/free events. The periodic generator mimics
//! regular training iterations (identical forward mallocs, LIFO frees); the
//! irregular generator layers short-lived extra allocations, free/re-malloc
//! pairs at shifted sizes, and a partially shuffled free order on top of the
//! same skeleton. Both are deterministic per seed.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{GIB, MIB};

/// Sizes from the generators are clamped to this window.
pub const SIZE_FLOOR: u64 = 2 * MIB;
pub const SIZE_CEILING: u64 = 2 * GIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Malloc { size: u64 },
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub id: u64,
    pub op: TraceOp,
}

impl TraceEvent {
    pub fn malloc(seq: u64, id: u64, size: u64) -> Self {
        Self {
            seq,
            id,
            op: TraceOp::Malloc { size },
        }
    }

    pub fn free(seq: u64, id: u64) -> Self {
        Self {
            seq,
            id,
            op: TraceOp::Free,
        }
    }
}

/// Wire form: one object per line, exactly these fields, `size` on malloc
/// only. Unknown fields are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    seq: u64,
    op: RawOp,
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawOp {
    Malloc,
    Free,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: free of id {id} which is not currently live")]
    UnbalancedFree { line: usize, id: u64 },
    #[error("line {line}: malloc of id {id} which is already live")]
    DuplicateId { line: usize, id: u64 },
    #[error("invalid generator params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parses and validates a JSON-Lines trace. Blank lines are skipped; any
/// malformed line is rejected with its line number.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    let mut live: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut last_seq: Option<u64> = None;
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEvent = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if last_seq.is_some_and(|prev| raw.seq <= prev) {
            return Err(TraceError::Parse {
                line: line_no,
                message: format!("seq {} is not strictly increasing", raw.seq),
            });
        }
        last_seq = Some(raw.seq);
        let op = match (raw.op, raw.size) {
            (RawOp::Malloc, Some(size)) if size > 0 => {
                if !live.insert(raw.id) {
                    return Err(TraceError::DuplicateId {
                        line: line_no,
                        id: raw.id,
                    });
                }
                TraceOp::Malloc { size }
            }
            (RawOp::Malloc, Some(_)) => {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: "malloc size must be positive".into(),
                })
            }
            (RawOp::Malloc, None) => {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: "malloc requires a size".into(),
                })
            }
            (RawOp::Free, None) => {
                if !live.remove(&raw.id) {
                    return Err(TraceError::UnbalancedFree {
                        line: line_no,
                        id: raw.id,
                    });
                }
                TraceOp::Free
            }
            (RawOp::Free, Some(_)) => {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: "free must not carry a size".into(),
                })
            }
        };
        events.push(TraceEvent {
            seq: raw.seq,
            id: raw.id,
            op,
        });
    }
    Ok(events)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    parse_trace(BufReader::new(File::open(path)?))
}

pub fn write_trace<W: Write>(mut writer: W, events: &[TraceEvent]) -> io::Result<()> {
    for event in events {
        let raw = match event.op {
            TraceOp::Malloc { size } => RawEvent {
                seq: event.seq,
                op: RawOp::Malloc,
                id: event.id,
                size: Some(size),
            },
            TraceOp::Free => RawEvent {
                seq: event.seq,
                op: RawOp::Free,
                id: event.id,
                size: None,
            },
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, events: &[TraceEvent]) -> io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_trace(&mut writer, events)?;
    writer.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeDistribution {
    pub mean_bytes: u64,
    /// Log-normal shape; 0 degenerates to constant sizes.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Irregularity {
    /// Fraction of extra short-lived mallocs per iteration.
    pub extra_alloc_fraction: f64,
    /// Fraction of base allocations that get a mid-life free/re-malloc pair,
    /// and the amount of free-order shuffling.
    pub interleave_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    pub iterations: u32,
    pub allocs_per_iteration: u32,
    pub size_distribution: SizeDistribution,
    pub irregularity: Irregularity,
    pub seed: u64,
}

impl GeneratorParams {
    fn validate(&self) -> Result<(), TraceError> {
        if self.iterations == 0 || self.allocs_per_iteration == 0 {
            return Err(TraceError::InvalidParams("counts must be positive".into()));
        }
        if self.size_distribution.mean_bytes == 0 {
            return Err(TraceError::InvalidParams("mean size must be positive".into()));
        }
        if !(self.size_distribution.sigma >= 0.0) {
            return Err(TraceError::InvalidParams("sigma must be >= 0".into()));
        }
        let irr = self.irregularity;
        for f in [irr.extra_alloc_fraction, irr.interleave_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(TraceError::InvalidParams("fractions must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn clamp_size(size: f64) -> u64 {
    if !size.is_finite() || size >= SIZE_CEILING as f64 {
        return SIZE_CEILING;
    }
    (size as u64).clamp(SIZE_FLOOR, SIZE_CEILING)
}

fn draw_size(rng: &mut ChaCha8Rng, dist: &SizeDistribution) -> u64 {
    if dist.sigma == 0.0 {
        return clamp_size(dist.mean_bytes as f64);
    }
    // Parameterized so the untruncated mean equals mean_bytes.
    let mu = (dist.mean_bytes as f64).ln() - dist.sigma * dist.sigma / 2.0;
    let log_normal = LogNormal::new(mu, dist.sigma).expect("sigma validated");
    clamp_size(log_normal.sample(rng))
}

/// One iteration's worth of events, before seq/ids are finalized.
#[derive(Debug, Clone, Copy)]
enum PlannedEvent {
    Malloc { id: u64, size: u64 },
    Free { id: u64 },
}

fn iteration_skeleton(sizes: &[u64]) -> Vec<PlannedEvent> {
    let n = sizes.len() as u64;
    let mut events = Vec::with_capacity(sizes.len() * 2);
    for (i, &size) in sizes.iter().enumerate() {
        events.push(PlannedEvent::Malloc { id: i as u64, size });
    }
    for id in (0..n).rev() {
        events.push(PlannedEvent::Free { id });
    }
    events
}

fn finalize(iterations: Vec<Vec<PlannedEvent>>) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    let mut seq = 0u64;
    for iteration in iterations {
        for planned in iteration {
            events.push(match planned {
                PlannedEvent::Malloc { id, size } => TraceEvent::malloc(seq, id, size),
                PlannedEvent::Free { id } => TraceEvent::free(seq, id),
            });
            seq += 1;
        }
    }
    events
}

/// Periodic workload: per iteration, a forward phase of mallocs followed by a
/// backward phase freeing them in LIFO order. Iterations are identical in
/// (op, id, size); only the global seq advances.
pub fn gen_periodic(params: &GeneratorParams) -> Result<Vec<TraceEvent>, TraceError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sizes: Vec<u64> = (0..params.allocs_per_iteration)
        .map(|_| draw_size(&mut rng, &params.size_distribution))
        .collect();
    let skeleton = iteration_skeleton(&sizes);
    Ok(finalize(vec![skeleton; params.iterations as usize]))
}

/// Irregular workload: the periodic skeleton plus, per iteration,
/// (a) a partially shuffled free order, (b) extra short-lived mallocs
/// interleaved mid-phase, and (c) free/re-malloc pairs of existing ids at
/// shifted sizes. With both fractions at zero the output equals
/// `gen_periodic`.
pub fn gen_irregular(params: &GeneratorParams) -> Result<Vec<TraceEvent>, TraceError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sizes: Vec<u64> = (0..params.allocs_per_iteration)
        .map(|_| draw_size(&mut rng, &params.size_distribution))
        .collect();
    let n = sizes.len();
    let extra_count = (params.irregularity.extra_alloc_fraction * n as f64).floor() as usize;
    let pair_count = (params.irregularity.interleave_fraction * n as f64).floor() as usize;
    let shuffle_count = pair_count;

    let mut iterations = Vec::with_capacity(params.iterations as usize);
    for _ in 0..params.iterations {
        let mut events = iteration_skeleton(&sizes);

        // (a) partially shuffle the backward phase while it is still a pure
        // suffix of frees.
        for _ in 0..shuffle_count {
            let i = n + rng.random_range(0..n);
            let j = n + rng.random_range(0..n);
            events.swap(i, j);
        }

        // (b) extra short-lived allocations inside the forward phase.
        for extra in 0..extra_count {
            let id = (n + extra) as u64;
            let size = draw_size(&mut rng, &params.size_distribution);
            let at = rng.random_range(0..=n);
            events.insert(at, PlannedEvent::Malloc { id, size });
            let free_at = rng.random_range(at + 1..=(at + 10).min(events.len()));
            events.insert(free_at, PlannedEvent::Free { id });
        }

        // (c) free/re-malloc pairs of existing ids at shifted sizes.
        for _ in 0..pair_count {
            let target = rng.random_range(0..n) as u64;
            let last_malloc = events
                .iter()
                .rposition(
                    |e| matches!(e, PlannedEvent::Malloc { id, .. } if *id == target),
                )
                .expect("skeleton mallocs every id");
            let next_free = events[last_malloc..]
                .iter()
                .position(|e| matches!(e, PlannedEvent::Free { id } if *id == target))
                .map(|offset| last_malloc + offset)
                .expect("every id is freed after its malloc");
            let base_size = match events[last_malloc] {
                PlannedEvent::Malloc { size, .. } => size,
                PlannedEvent::Free { .. } => unreachable!(),
            };
            let factor = rng.random_range(0.75..1.25);
            let shifted = clamp_size(base_size as f64 * factor);
            let at = rng.random_range(last_malloc + 1..=next_free);
            events.insert(at, PlannedEvent::Malloc { id: target, size: shifted });
            events.insert(at, PlannedEvent::Free { id: target });
        }

        iterations.push(events);
    }
    Ok(finalize(iterations))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStats {
    pub alloc_count: u64,
    pub mean_size: f64,
    pub peak_live_bytes: u64,
}

/// Single-pass statistics over a valid trace.
pub fn trace_stats(events: &[TraceEvent]) -> TraceStats {
    let mut alloc_count = 0u64;
    let mut total_size = 0u128;
    let mut live: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    let mut live_bytes = 0u64;
    let mut peak_live_bytes = 0u64;
    for event in events {
        match event.op {
            TraceOp::Malloc { size } => {
                alloc_count += 1;
                total_size += size as u128;
                live.insert(event.id, size);
                live_bytes += size;
                peak_live_bytes = peak_live_bytes.max(live_bytes);
            }
            TraceOp::Free => {
                if let Some(size) = live.remove(&event.id) {
                    live_bytes -= size;
                }
            }
        }
    }
    TraceStats {
        alloc_count,
        mean_size: if alloc_count == 0 {
            0.0
        } else {
            total_size as f64 / alloc_count as f64
        },
        peak_live_bytes,
    }
}

/// The trace pattern a generator preset is rendered with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracePattern {
    Periodic,
    Irregular,
}

impl std::str::FromStr for TracePattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(TracePattern::Periodic),
            "irregular" => Ok(TracePattern::Irregular),
            other => Err(format!("unknown pattern {other:?} (periodic|irregular)")),
        }
    }
}

pub fn generate(pattern: TracePattern, params: &GeneratorParams) -> Result<Vec<TraceEvent>, TraceError> {
    match pattern {
        TracePattern::Periodic => gen_periodic(params),
        TracePattern::Irregular => gen_irregular(params),
    }
}

/// Desk-scale presets: counts scaled 1:100 from production footprints, means
/// preserved.
pub fn preset_params(name: &str, seed: u64) -> Option<GeneratorParams> {
    match name {
        "regular-desk" => Some(GeneratorParams {
            iterations: 10,
            allocs_per_iteration: 460,
            size_distribution: SizeDistribution {
                mean_bytes: 93_000_000,
                sigma: 0.5,
            },
            irregularity: Irregularity::default(),
            seed,
        }),
        // 460 base + 162 extra + 138 re-malloc pairs = 760 mallocs/iteration
        "irregular-desk" => Some(GeneratorParams {
            iterations: 10,
            allocs_per_iteration: 460,
            size_distribution: SizeDistribution {
                mean_bytes: 85_000_000,
                sigma: 0.5,
            },
            irregularity: Irregularity {
                extra_alloc_fraction: 0.3522,
                interleave_fraction: 0.30,
            },
            seed,
        }),
        _ => None,
    }
}
