//! Deterministic whole-cluster simulation.
//!
//! One seeded run drives a primary/backup cluster of [`Replica`] machines
//! through a client workload while a fault schedule crashes machines, rolls
//! disks back, and interferes with links. Every application-visible
//! invocation and response lands in a history that the crash-consistency
//! checker judges afterwards, so the protocol is never its own referee.
//! On top of the history check the run audits three runtime invariants:
//! acknowledged flagged writes must actually sit on f backups, they must
//! survive recovery unless overwritten, and resynced members must end up
//! page-for-page identical with the new primary.
//!
//! Everything is discrete-event and single-threaded: same seed, same bytes
//! out. "Time" is microseconds on a virtual clock.

mod sim;

use crate::model::{self, Budget, CrashVerdict, Event};
use crate::replica::Mutation;
use crate::transport::FaultSchedule;

pub use sim::World;

/// Exit meanings, also used by the command-line front end.
pub const EXIT_CONSISTENT: i32 = 0;
pub const EXIT_INCONSISTENT: i32 = 1;
pub const EXIT_HALT_DETECTED: i32 = 2;
pub const EXIT_RECOVERY_ABORT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Round-robin over the address space.
    Seq,
    /// Uniform random blocks.
    Rand,
    /// Most traffic on a few hot blocks; exercises the conflict gate.
    Contended,
}

impl std::str::FromStr for Workload {
    type Err = String;
    fn from_str(s: &str) -> Result<Workload, String> {
        match s {
            "seq" => Ok(Workload::Seq),
            "rand" => Ok(Workload::Rand),
            "contended" => Ok(Workload::Contended),
            other => Err(format!("unknown workload {other:?}")),
        }
    }
}

impl std::fmt::Display for Workload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Workload::Seq => "seq",
            Workload::Rand => "rand",
            Workload::Contended => "contended",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Cluster size; must satisfy f+1 <= nodes <= 2f+1.
    pub nodes: u32,
    pub f: u32,
    pub blocks: u64,
    pub block_size: u32,
    /// Integrity tree layers kept on disk (0 = all leaves stay in memory).
    pub merkle_disk_layers: u32,
    pub threads: u32,
    /// Total client operations to issue across all threads.
    pub ops: u64,
    /// Every k-th write carries a flush flag; 0 disables flagged writes.
    pub fsync_every: u64,
    pub workload: Workload,
    pub seed: u64,
    /// One-way link latency floor; jitter of up to a quarter is added.
    pub link_delay_us: u64,
    /// Disk completion latency floor, same jitter rule.
    pub disk_delay_us: u64,
    pub faults: FaultSchedule,
    pub mutation: Mutation,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            nodes: 3,
            f: 1,
            blocks: 64,
            block_size: 4096,
            merkle_disk_layers: 0,
            threads: 4,
            ops: 200,
            fsync_every: 4,
            workload: Workload::Rand,
            seed: 1,
            link_delay_us: 200,
            disk_delay_us: 100,
            faults: FaultSchedule::default(),
            mutation: Mutation::None,
        }
    }
}

impl RunConfig {
    /// Cheap shape validation so a bad CLI invocation fails before the
    /// simulation panics somewhere deep.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes < self.f + 1 || self.nodes > 2 * self.f + 1 {
            return Err(format!(
                "nodes={} outside [f+1, 2f+1] for f={}",
                self.nodes, self.f
            ));
        }
        if self.blocks == 0 {
            return Err("blocks must be positive".into());
        }
        if self.block_size < 64 {
            return Err("block size below 64 bytes leaves no room for framing".into());
        }
        if self.merkle_disk_layers > 0 && self.block_size != 4096 {
            return Err("on-disk tree layers require 4096-byte blocks".into());
        }
        if self.threads == 0 {
            return Err("at least one client thread".into());
        }
        Ok(())
    }
}

/// Aggregate counters for one run. Everything lands in the report; the
/// acceptance suite also asserts on the fields directly.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunStats {
    pub ops_issued: u64,
    pub writes_completed: u64,
    pub reads_completed: u64,
    pub flagged_completed: u64,
    pub machine_crashes: u64,
    pub recovery_rounds: u64,
    pub recoveries_finished: u64,
    pub recovery_retries: u64,
    pub eras: u64,
    pub halts: u64,
    pub first_halt: Option<String>,
    pub terminal_abort: Option<String>,
    /// Sync-durability probe reads issued after recoveries and how many
    /// came back with the wrong value.
    pub probe_reads: u64,
    pub probe_failures: u64,
    /// Replication audits run at flagged-write completions: the write must
    /// truly sit on at least f backups, acks notwithstanding.
    pub membership_audits: u64,
    pub membership_violations: u64,
    /// Page-for-page comparisons of resynced members against the primary.
    pub resync_equality_checks: u64,
    pub resync_equality_violations: u64,
    pub pages_pulled: u64,
    pub pages_checked: u64,
    pub hash_bytes: u64,
    pub page_bytes: u64,
    /// Frame-level noise observed by replicas over the whole run.
    pub bad_frames: u64,
    pub stale_ballot: u64,
    pub future_ballot: u64,
    pub duplicate_index: u64,
    /// Completion latency extremes, microseconds.
    pub unflagged_write_max_us: u64,
    pub unflagged_write_mean_us: u64,
    pub flagged_write_min_us: u64,
    pub flagged_write_mean_us: u64,
    pub internal_error: Option<String>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub history: Vec<Event>,
    pub trace_text: String,
    pub report_text: String,
    pub stats: RunStats,
    pub verdict: Option<CrashVerdict>,
    pub exit: i32,
}

/// Execute one seeded run end to end: simulate, record, check, report.
pub fn run(cfg: RunConfig) -> RunOutput {
    cfg.validate().expect("caller validates the configuration");
    let mut world = World::new(cfg);
    world.drive();
    finish(world)
}

fn finish(world: World) -> RunOutput {
    let (cfg, history, mut stats) = world.into_results();

    let mut verdict = None;
    if stats.internal_error.is_none() {
        if let Err(m) = model::validate(&history) {
            stats.internal_error = Some(format!("malformed history: {m:?}"));
        } else {
            let mut budget = Budget::with_limit(200_000_000);
            match model::is_crash_consistent(&history, &mut budget) {
                Ok(v) => verdict = Some(v),
                Err(e) => stats.internal_error = Some(format!("checker: {e:?}")),
            }
        }
    }

    let audits_clean = stats.probe_failures == 0
        && stats.membership_violations == 0
        && stats.resync_equality_violations == 0;
    let exit = if stats.internal_error.is_some() {
        EXIT_INTERNAL
    } else if !verdict.as_ref().is_some_and(CrashVerdict::is_consistent) || !audits_clean {
        EXIT_INCONSISTENT
    } else if stats.terminal_abort.is_some() {
        EXIT_RECOVERY_ABORT
    } else if stats.halts > 0 && cfg.f == 0 {
        EXIT_HALT_DETECTED
    } else {
        EXIT_CONSISTENT
    };

    let trace_text = model::trace::format_trace(&history);
    let report_text = render_report(&cfg, &stats, verdict.as_ref(), exit);
    RunOutput {
        history,
        trace_text,
        report_text,
        stats,
        verdict,
        exit,
    }
}

fn render_report(
    cfg: &RunConfig,
    s: &RunStats,
    verdict: Option<&CrashVerdict>,
    exit: i32,
) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("seed", cfg.seed.to_string());
    kv("nodes", cfg.nodes.to_string());
    kv("f", cfg.f.to_string());
    kv("blocks", cfg.blocks.to_string());
    kv("block_size", cfg.block_size.to_string());
    kv("merkle_disk_layers", cfg.merkle_disk_layers.to_string());
    kv("threads", cfg.threads.to_string());
    kv("workload", cfg.workload.to_string());
    kv("fsync_every", cfg.fsync_every.to_string());
    kv("mutation", format!("{:?}", cfg.mutation));
    kv("ops_issued", s.ops_issued.to_string());
    kv("writes_completed", s.writes_completed.to_string());
    kv("reads_completed", s.reads_completed.to_string());
    kv("flagged_completed", s.flagged_completed.to_string());
    kv("machine_crashes", s.machine_crashes.to_string());
    kv("eras", s.eras.to_string());
    kv("recovery_rounds", s.recovery_rounds.to_string());
    kv("recoveries_finished", s.recoveries_finished.to_string());
    kv("recovery_retries", s.recovery_retries.to_string());
    kv("halts", s.halts.to_string());
    kv(
        "first_halt",
        s.first_halt.clone().unwrap_or_else(|| "none".into()),
    );
    kv(
        "terminal_abort",
        s.terminal_abort.clone().unwrap_or_else(|| "none".into()),
    );
    kv("probe_reads", s.probe_reads.to_string());
    kv("probe_failures", s.probe_failures.to_string());
    kv("membership_audits", s.membership_audits.to_string());
    kv("membership_violations", s.membership_violations.to_string());
    kv("resync_equality_checks", s.resync_equality_checks.to_string());
    kv(
        "resync_equality_violations",
        s.resync_equality_violations.to_string(),
    );
    kv("pages_pulled", s.pages_pulled.to_string());
    kv("pages_checked", s.pages_checked.to_string());
    kv("hash_bytes", s.hash_bytes.to_string());
    kv("page_bytes", s.page_bytes.to_string());
    kv("bad_frames", s.bad_frames.to_string());
    kv("stale_ballot", s.stale_ballot.to_string());
    kv("future_ballot", s.future_ballot.to_string());
    kv("duplicate_index", s.duplicate_index.to_string());
    kv("unflagged_write_max_us", s.unflagged_write_max_us.to_string());
    kv(
        "unflagged_write_mean_us",
        s.unflagged_write_mean_us.to_string(),
    );
    kv("flagged_write_min_us", s.flagged_write_min_us.to_string());
    kv("flagged_write_mean_us", s.flagged_write_mean_us.to_string());
    kv(
        "verdict",
        match verdict {
            Some(v) if v.is_consistent() => "consistent".into(),
            Some(CrashVerdict::Inconsistent(i)) => format!("inconsistent: {}", i.narrative),
            Some(_) => unreachable!(),
            None => "unchecked".into(),
        },
    );
    kv(
        "internal_error",
        s.internal_error.clone().unwrap_or_else(|| "none".into()),
    );
    kv("exit", exit.to_string());
    out
}
