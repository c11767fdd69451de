//! Trace replay harness: drives one allocator mode over an event list and
//! produces a report plus a per-step timeline. A replay stops at the first
//! OOM with peaks recorded up to the failure point.

use std::collections::HashMap;

use thiserror::Error;

use crate::bfc::{BfcConfig, BfcError, BfcHandle, BfcPool};
use crate::gmlake::{GmError, GmlakeAllocator, GmlakeConfig, GmStats, TensorHandle};
use crate::metrics::{MetricsError, ReplayObservation, ReplayReport, TimelinePoint};
use crate::trace::{TraceEvent, TraceOp};
use crate::vm::{Device, DeviceConfig, RegionId, VmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocatorMode {
    Native,
    Bfc,
    Gmlake,
}

impl AllocatorMode {
    pub const ALL: [AllocatorMode; 3] =
        [AllocatorMode::Native, AllocatorMode::Bfc, AllocatorMode::Gmlake];

    pub fn name(&self) -> &'static str {
        match self {
            AllocatorMode::Native => "native",
            AllocatorMode::Bfc => "bfc",
            AllocatorMode::Gmlake => "gmlake",
        }
    }
}

impl std::str::FromStr for AllocatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(AllocatorMode::Native),
            "bfc" => Ok(AllocatorMode::Bfc),
            "gmlake" => Ok(AllocatorMode::Gmlake),
            other => Err(format!("unknown allocator {other:?} (native|bfc|gmlake)")),
        }
    }
}

impl std::fmt::Display for AllocatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub device: DeviceConfig,
    pub gmlake: GmlakeConfig,
    pub bfc_quantum: u64,
}

impl ReplayConfig {
    pub fn new(device: DeviceConfig) -> Self {
        Self {
            device,
            gmlake: GmlakeConfig::for_device(&device),
            bfc_quantum: BfcConfig::default().quantum,
        }
    }
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self::new(DeviceConfig::default())
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("event {seq}: malloc of id {id} which is already live")]
    DuplicateId { seq: u64, id: u64 },
    #[error("event {seq}: free of id {id} which is not live")]
    UnknownId { seq: u64, id: u64 },
    #[error("allocator fault at event {seq}: {message}")]
    Allocator { seq: u64, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Gmlake(#[from] GmError),
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub report: ReplayReport,
    pub timeline: Vec<TimelinePoint>,
    /// Seq of the malloc that hit OOM, when the replay stopped early.
    pub oom_at_seq: Option<u64>,
    pub gm_stats: Option<GmStats>,
}

enum Sim {
    Native {
        dev: Device,
        live: HashMap<u64, (RegionId, u64)>,
        active: u64,
    },
    Bfc {
        dev: Device,
        pool: BfcPool,
        live: HashMap<u64, BfcHandle>,
    },
    Gmlake {
        dev: Device,
        alloc: GmlakeAllocator,
        live: HashMap<u64, TensorHandle>,
    },
}

enum MallocOutcome {
    Done,
    Oom,
}

impl Sim {
    fn new(mode: AllocatorMode, config: &ReplayConfig) -> Result<Self, ReplayError> {
        let dev = Device::new(config.device)?;
        Ok(match mode {
            AllocatorMode::Native => Sim::Native {
                dev,
                live: HashMap::new(),
                active: 0,
            },
            AllocatorMode::Bfc => Sim::Bfc {
                dev,
                pool: BfcPool::new(BfcConfig {
                    quantum: config.bfc_quantum,
                }),
                live: HashMap::new(),
            },
            AllocatorMode::Gmlake => Sim::Gmlake {
                alloc: GmlakeAllocator::new(config.gmlake, &config.device)?,
                dev,
                live: HashMap::new(),
            },
        })
    }

    fn contains(&self, id: u64) -> bool {
        match self {
            Sim::Native { live, .. } => live.contains_key(&id),
            Sim::Bfc { live, .. } => live.contains_key(&id),
            Sim::Gmlake { live, .. } => live.contains_key(&id),
        }
    }

    fn malloc(&mut self, seq: u64, id: u64, size: u64) -> Result<MallocOutcome, ReplayError> {
        let fault = |e: String| ReplayError::Allocator { seq, message: e };
        match self {
            Sim::Native { dev, live, active } => match dev.native_alloc(size) {
                Ok(region) => {
                    live.insert(id, (region, size));
                    *active += size;
                    Ok(MallocOutcome::Done)
                }
                Err(VmError::PhysicalOom { .. }) => Ok(MallocOutcome::Oom),
                Err(e) => Err(fault(e.to_string())),
            },
            Sim::Bfc { dev, pool, live } => match pool.malloc(dev, size) {
                Ok(handle) => {
                    live.insert(id, handle);
                    Ok(MallocOutcome::Done)
                }
                Err(BfcError::OutOfMemory) => Ok(MallocOutcome::Oom),
                Err(e) => Err(fault(e.to_string())),
            },
            Sim::Gmlake { dev, alloc, live } => match alloc.malloc(dev, size) {
                Ok(handle) => {
                    live.insert(id, handle);
                    Ok(MallocOutcome::Done)
                }
                Err(GmError::OutOfMemory) => Ok(MallocOutcome::Oom),
                Err(e) => Err(fault(e.to_string())),
            },
        }
    }

    fn free(&mut self, seq: u64, id: u64) -> Result<(), ReplayError> {
        let fault = |e: String| ReplayError::Allocator { seq, message: e };
        match self {
            Sim::Native { dev, live, active } => {
                let (region, size) = live.remove(&id).expect("checked live");
                dev.native_free(region).map_err(|e| fault(e.to_string()))?;
                *active -= size;
            }
            Sim::Bfc { pool, live, .. } => {
                let handle = live.remove(&id).expect("checked live");
                pool.free(handle).map_err(|e| fault(e.to_string()))?;
            }
            Sim::Gmlake { alloc, live, .. } => {
                let handle = live.remove(&id).expect("checked live");
                alloc.free(handle).map_err(|e| fault(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn active_bytes(&self) -> u64 {
        match self {
            Sim::Native { active, .. } => *active,
            Sim::Bfc { pool, .. } => pool.active_bytes(),
            Sim::Gmlake { alloc, .. } => alloc.active_bytes(),
        }
    }

    fn reserved_bytes(&self) -> u64 {
        match self {
            // the native path reserves exactly what is live
            Sim::Native { active, .. } => *active,
            Sim::Bfc { pool, .. } => pool.reserved_bytes(),
            Sim::Gmlake { alloc, .. } => alloc.reserved_bytes(),
        }
    }

    fn accumulated_cost(&self) -> f64 {
        match self {
            Sim::Native { dev, .. } | Sim::Bfc { dev, .. } | Sim::Gmlake { dev, .. } => {
                dev.accumulated_cost()
            }
        }
    }

    fn gm_stats(&self) -> Option<GmStats> {
        match self {
            Sim::Gmlake { alloc, .. } => Some(alloc.stats()),
            _ => None,
        }
    }
}

/// Replays `events` under `mode`, recording one timeline step per event.
pub fn replay(
    events: &[TraceEvent],
    mode: AllocatorMode,
    config: &ReplayConfig,
) -> Result<ReplayOutcome, ReplayError> {
    let mut sim = Sim::new(mode, config)?;
    let mut observation = ReplayObservation::new();
    let mut oom_at_seq = None;
    for event in events {
        match event.op {
            TraceOp::Malloc { size } => {
                if sim.contains(event.id) {
                    return Err(ReplayError::DuplicateId {
                        seq: event.seq,
                        id: event.id,
                    });
                }
                match sim.malloc(event.seq, event.id, size)? {
                    MallocOutcome::Done => {}
                    MallocOutcome::Oom => {
                        observation.record_step(
                            event.seq,
                            sim.active_bytes(),
                            sim.reserved_bytes(),
                        )?;
                        oom_at_seq = Some(event.seq);
                        break;
                    }
                }
            }
            TraceOp::Free => {
                if !sim.contains(event.id) {
                    return Err(ReplayError::UnknownId {
                        seq: event.seq,
                        id: event.id,
                    });
                }
                sim.free(event.seq, event.id)?;
            }
        }
        observation.record_step(event.seq, sim.active_bytes(), sim.reserved_bytes())?;
    }
    let report = observation.finalize(
        sim.accumulated_cost(),
        oom_at_seq.is_some(),
        sim.gm_stats().map(|s| s.counters),
    )?;
    Ok(ReplayOutcome {
        report,
        timeline: observation.into_steps(),
        oom_at_seq,
        gm_stats: sim.gm_stats(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{gen_periodic, GeneratorParams, Irregularity, SizeDistribution};
    use crate::units::{GIB, MIB};

    fn small_config(capacity: u64, frag_limit: u64) -> ReplayConfig {
        let device = DeviceConfig::new(capacity, 2 * MIB).unwrap();
        let mut config = ReplayConfig::new(device);
        config.gmlake.fragmentation_limit = frag_limit;
        config
    }

    fn simple_trace() -> Vec<TraceEvent> {
        let params = GeneratorParams {
            iterations: 2,
            allocs_per_iteration: 4,
            size_distribution: SizeDistribution {
                mean_bytes: 64 * MIB,
                sigma: 0.3,
            },
            irregularity: Irregularity::default(),
            seed: 3,
        };
        gen_periodic(&params).unwrap()
    }

    #[test]
    fn native_replay_is_fully_utilized_and_charges_two_per_pair() {
        let events = simple_trace();
        let config = ReplayConfig::new(DeviceConfig::default());
        let outcome = replay(&events, AllocatorMode::Native, &config).unwrap();
        assert!(!outcome.report.oom);
        assert_eq!(outcome.report.utilization_ratio, 1.0);
        assert_eq!(outcome.report.fragmentation_ratio, 0.0);
        let allocs = events
            .iter()
            .filter(|e| matches!(e.op, TraceOp::Malloc { .. }))
            .count() as f64;
        assert_eq!(outcome.report.simulated_cost, 2.0 * allocs);
        assert_eq!(outcome.timeline.len(), events.len());
    }

    #[test]
    fn replays_are_deterministic() {
        let events = simple_trace();
        let config = ReplayConfig::new(DeviceConfig::default());
        for mode in AllocatorMode::ALL {
            let a = replay(&events, mode, &config).unwrap();
            let b = replay(&events, mode, &config).unwrap();
            assert_eq!(a.report, b.report, "{mode}");
            assert_eq!(a.timeline, b.timeline, "{mode}");
        }
    }

    #[test]
    fn oom_stops_the_replay_with_peaks_up_to_failure() {
        let events = vec![
            TraceEvent::malloc(0, 1, 6 * MIB),
            TraceEvent::malloc(1, 2, 6 * MIB),
            TraceEvent::free(2, 1),
            TraceEvent::free(3, 2),
        ];
        let config = small_config(8 * MIB, 2 * MIB);
        let outcome = replay(&events, AllocatorMode::Native, &config).unwrap();
        assert!(outcome.report.oom);
        assert_eq!(outcome.oom_at_seq, Some(1));
        assert_eq!(outcome.report.peak_active, 6 * MIB);
        assert_eq!(outcome.timeline.len(), 2);
    }

    #[test]
    fn gmlake_report_carries_state_counters() {
        let events = simple_trace();
        let config = ReplayConfig::new(DeviceConfig::default());
        let outcome = replay(&events, AllocatorMode::Gmlake, &config).unwrap();
        let counters = outcome.report.state_counters.expect("gmlake counters");
        assert!(counters.s4 > 0);
        assert!(outcome.gm_stats.is_some());
    }

    #[test]
    fn malformed_replays_are_rejected() {
        let config = ReplayConfig::new(DeviceConfig::default());
        let double = vec![
            TraceEvent::malloc(0, 1, MIB),
            TraceEvent::malloc(1, 1, MIB),
        ];
        assert!(matches!(
            replay(&double, AllocatorMode::Native, &config),
            Err(ReplayError::DuplicateId { seq: 1, id: 1 })
        ));
        let unknown = vec![TraceEvent::free(0, 7)];
        assert!(matches!(
            replay(&unknown, AllocatorMode::Bfc, &config),
            Err(ReplayError::UnknownId { seq: 0, id: 7 })
        ));
    }

    #[test]
    fn gmlake_never_reserves_much_beyond_bfc_on_shared_traces() {
        let events = simple_trace();
        let config = small_config(GIB, 32 * MIB);
        let bfc = replay(&events, AllocatorMode::Bfc, &config).unwrap();
        let gm = replay(&events, AllocatorMode::Gmlake, &config).unwrap();
        assert!(!bfc.report.oom && !gm.report.oom);
        assert!(
            gm.report.peak_reserved
                <= bfc.report.peak_reserved + config.gmlake.fragmentation_limit
        );
    }
}
