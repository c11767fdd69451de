//! Experiment driver: generates traces, replays them under an allocator
//! mode, and compares modes on one trace.
//!
//! Exit codes: 0 success, 1 usage/parse/config errors, 2 replay hit OOM.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use gmsim_core::metrics::write_timeline_csv;
use gmsim_core::{
    format_bytes, generate, mem_reduction_ratio, parse_bytes, preset_params, read_trace_file,
    replay, trace_stats, write_trace_file, AllocatorMode, DeviceConfig, GeneratorParams,
    ReplayConfig, ReplayReport, TracePattern,
};

const EXIT_USAGE: u8 = 1;
const EXIT_OOM: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gmsim",
    about = "Trace-driven GPU memory allocator simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic allocation trace from a preset.
    Gen(GenArgs),
    /// Replay a trace under one allocator mode.
    Replay(ReplayArgs),
    /// Replay a trace under several modes and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// periodic | irregular
    #[arg(long)]
    pattern: TracePattern,
    /// regular-desk | irregular-desk, optionally with a :nN partition
    /// modifier (sizes divided by N, one trace file per partition)
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DeviceArgs {
    /// Device capacity (suffixes: KiB/MiB/GiB)
    #[arg(long, value_parser = parse_bytes_flag, default_value = "80GiB")]
    capacity: u64,
    /// Physical chunk size
    #[arg(long, value_parser = parse_bytes_flag, default_value = "2MiB")]
    chunk_size: u64,
    /// Minimal fragmentation limit for splits and stitch members
    #[arg(long, value_parser = parse_bytes_flag, default_value = "128MiB")]
    frag_limit: u64,
    /// Stitched-pool capacity before LRU eviction (defaults to the device
    /// capacity)
    #[arg(long, value_parser = parse_bytes_flag)]
    spool_capacity: Option<u64>,
}

impl DeviceArgs {
    fn replay_config(&self) -> Result<ReplayConfig> {
        let device = DeviceConfig::new(self.capacity, self.chunk_size)?;
        let mut config = ReplayConfig::new(device);
        config.gmlake.fragmentation_limit = self.frag_limit;
        if let Some(spool) = self.spool_capacity {
            config.gmlake.spool_capacity = spool;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    /// native | bfc | gmlake
    #[arg(long)]
    allocator: AllocatorMode,
    #[command(flatten)]
    device: DeviceArgs,
    /// Write the report JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-step timeline CSV here
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated list of modes
    #[arg(long, value_delimiter = ',', required = true)]
    allocators: Vec<AllocatorMode>,
    #[command(flatten)]
    device: DeviceArgs,
    /// Comparison CSV path
    #[arg(long)]
    out: PathBuf,
}

fn parse_bytes_flag(s: &str) -> Result<u64, String> {
    parse_bytes(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

/// `NAME` or `NAME:nN` for N scale-out partitions.
fn resolve_preset(preset: &str, seed: u64) -> Result<(GeneratorParams, u32)> {
    let (name, partitions) = match preset.split_once(":n") {
        Some((name, n)) => {
            let n: u32 = n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| anyhow!("invalid partition count in preset {preset:?}"))?;
            (name, n)
        }
        None => (preset, 1),
    };
    let params = preset_params(name, seed)
        .ok_or_else(|| anyhow!("unknown preset {name:?} (regular-desk|irregular-desk)"))?;
    Ok((params, partitions))
}

fn partition_path(out: &Path, partition: u32) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let extension = out.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    out.with_file_name(format!("{stem}.part{partition}.{extension}"))
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let (mut params, partitions) = resolve_preset(&args.preset, args.seed)?;
    if partitions > 1 {
        // ZeRO-style proxy: each of N GPUs sees 1/N of every tensor.
        params.size_distribution.mean_bytes =
            (params.size_distribution.mean_bytes / partitions as u64).max(1);
    }
    for partition in 0..partitions {
        let mut partition_params = params;
        partition_params.seed = params.seed + partition as u64;
        let events = generate(args.pattern, &partition_params)?;
        let path = if partitions == 1 {
            args.out.clone()
        } else {
            partition_path(&args.out, partition)
        };
        write_trace_file(&path, &events)
            .with_context(|| format!("writing {}", path.display()))?;
        let stats = trace_stats(&events);
        println!(
            "wrote {}: {} events, {} allocs, mean size {}, peak live {}",
            path.display(),
            events.len(),
            stats.alloc_count,
            format_bytes(stats.mean_size as u64),
            format_bytes(stats.peak_live_bytes),
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(args: ReplayArgs) -> Result<ExitCode> {
    let events = read_trace_file(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))?;
    let config = args.device.replay_config()?;
    let outcome = replay(&events, args.allocator, &config)?;

    if let Some(path) = &args.report {
        let mut file = BufWriter::new(
            File::create(path).with_context(|| format!("writing {}", path.display()))?,
        );
        file.write_all(outcome.report.to_json().as_bytes())?;
        file.flush()?;
    }
    if let Some(path) = &args.timeline {
        let mut file = BufWriter::new(
            File::create(path).with_context(|| format!("writing {}", path.display()))?,
        );
        write_timeline_csv(&mut file, &outcome.timeline)?;
        file.flush()?;
    }
    print_report(args.allocator, &outcome.report);
    if outcome.report.oom {
        eprintln!(
            "replay hit OOM at seq {}",
            outcome.oom_at_seq.expect("oom seq is set")
        );
        return Ok(ExitCode::from(EXIT_OOM));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(mode: AllocatorMode, report: &ReplayReport) {
    println!(
        "{mode}: peak_active={} peak_reserved={} utilization={:.4} fragmentation={:.4} cost={:.3} oom={}",
        format_bytes(report.peak_active),
        format_bytes(report.peak_reserved),
        report.utilization_ratio,
        report.fragmentation_ratio,
        report.simulated_cost,
        report.oom,
    );
    if let Some(counters) = &report.state_counters {
        println!(
            "  states: s1={} s2={} s3={} s4={} s5={}",
            counters.s1, counters.s2, counters.s3, counters.s4, counters.s5
        );
    }
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode> {
    if args.allocators.len() < 2 {
        bail!("compare needs at least two allocators");
    }
    let events = read_trace_file(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))?;
    let config = args.device.replay_config()?;

    let mut rows: Vec<(AllocatorMode, Result<ReplayReport, String>)> = Vec::new();
    for &mode in &args.allocators {
        let result = replay(&events, mode, &config)
            .map(|outcome| outcome.report)
            .map_err(|e| e.to_string());
        rows.push((mode, result));
    }

    let mut csv = BufWriter::new(
        File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?,
    );
    writeln!(
        csv,
        "allocator,status,peak_active_bytes,peak_reserved_bytes,utilization_ratio,fragmentation_ratio,simulated_cost"
    )?;
    println!(
        "{:<8} {:>7} {:>14} {:>14} {:>12} {:>14} {:>12}",
        "mode", "status", "peak_active", "peak_reserved", "utilization", "fragmentation", "cost"
    );
    for (mode, result) in &rows {
        match result {
            Ok(report) => {
                let status = if report.oom { "oom" } else { "ok" };
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    mode,
                    status,
                    report.peak_active,
                    report.peak_reserved,
                    report.utilization_ratio,
                    report.fragmentation_ratio,
                    report.simulated_cost
                )?;
                println!(
                    "{:<8} {:>7} {:>14} {:>14} {:>12.4} {:>14.4} {:>12.3}",
                    mode.to_string(),
                    status,
                    format_bytes(report.peak_active),
                    format_bytes(report.peak_reserved),
                    report.utilization_ratio,
                    report.fragmentation_ratio,
                    report.simulated_cost
                );
            }
            Err(message) => {
                writeln!(csv, "{mode},error,,,,,")?;
                println!("{:<8} {:>7} {message}", mode.to_string(), "error");
            }
        }
    }
    csv.flush()?;

    let completed = |mode: AllocatorMode| {
        rows.iter()
            .find(|(m, _)| *m == mode)
            .and_then(|(_, r)| r.as_ref().ok())
            .filter(|report| !report.oom)
    };
    match (completed(AllocatorMode::Bfc), completed(AllocatorMode::Gmlake)) {
        (Some(bfc), Some(gm)) => {
            let ratio = mem_reduction_ratio(&[bfc.peak_reserved], &[gm.peak_reserved])?;
            println!("mem_reduction_ratio (gmlake vs bfc): {ratio:.4}");
        }
        _ => {
            if args.allocators.contains(&AllocatorMode::Bfc)
                && args.allocators.contains(&AllocatorMode::Gmlake)
            {
                println!("mem_reduction_ratio (gmlake vs bfc): n/a");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
