//! Process-level fault injection: a supervisor runs the training as a
//! separate worker process and kills it abruptly (SIGKILL, no cleanup),
//! either at random instants (crash-test) or whenever a spot-market
//! trace prices the instance out (spot-sim). Communication is only via
//! the heap file and exit codes.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use pmtrain_core::SplitMix64;

use crate::losslog;
use crate::trainer::TrainArgs;

/// Consecutive kills without iteration progress before the supervisor
/// gives up on the worker.
const STALL_LIMIT: u32 = 10;

fn worker_command(args: &TrainArgs) -> Result<Command> {
    let exe = std::env::current_exe().context("locating own binary")?;
    let mut cmd = Command::new(exe);
    cmd.arg("train")
        .arg("--heap").arg(&args.heap)
        .arg("--config").arg(&args.config)
        .arg("--seed").arg(args.seed.to_string())
        .arg("--mirror-freq").arg(args.mirror_freq.to_string())
        .arg("--loss-log").arg(&args.loss_log);
    if let Some(k) = &args.key {
        cmd.arg("--key").arg(k);
    }
    if let Some(n) = args.max_iter {
        cmd.arg("--max-iter").arg(n.to_string());
    }
    if let Some(img) = &args.images {
        cmd.arg("--images").arg(img);
        cmd.arg("--format").arg(match args.format {
            pmtrain_core::data::DataFormat::Idx => "idx",
            pmtrain_core::data::DataFormat::Csv => "csv",
        });
    }
    if let Some(lbl) = &args.labels {
        cmd.arg("--labels").arg(lbl);
    }
    if args.no_restore {
        cmd.arg("--no-restore");
    }
    if args.no_replay {
        cmd.arg("--no-replay");
    }
    cmd.stdout(Stdio::null()).stderr(Stdio::inherit());
    Ok(cmd)
}

/// Read the committed iteration counter straight from the heap file
/// without opening a handle (no recovery side effects). Only meaningful
/// while no worker is running.
pub fn peek_iter(heap: &Path) -> Option<u64> {
    let raw = std::fs::read(heap).ok()?;
    if raw.len() < 4096 || &raw[0..8] != b"PLINIUSH" {
        return None;
    }
    let root = u64::from_le_bytes(raw[48..56].try_into().ok()?) as usize;
    if root == 0 {
        return None;
    }
    // Root entries are file-absolute; iter is the model node's 2nd field.
    let at = root + 8;
    raw.get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// Sleep up to `dur`, returning early (with the exit status) if the
/// child finishes first.
fn sleep_or_exit(child: &mut Child, dur: Duration) -> Result<Option<std::process::ExitStatus>> {
    let deadline = Instant::now() + dur;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn wait_for_completion(child: &mut Child) -> Result<()> {
    let status = child.wait()?;
    if !status.success() {
        bail!("worker failed with {status}");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CrashTestArgs {
    pub train: TrainArgs,
    pub kill_min_ms: u64,
    pub kill_max_ms: u64,
    pub crashes: u32,
}

#[derive(Debug)]
pub struct CrashTestReport {
    pub crashes_delivered: u32,
    pub final_iter: u64,
    pub total_rows: u64,
    /// Exact-replay mode only: stitched loss log equals the oracle's.
    pub matches_oracle: Option<bool>,
}

/// Run the kill/restart campaign: spawn the worker, kill it at a random
/// instant in [kill_min_ms, kill_max_ms], restart, repeat `crashes`
/// times, then let it finish. In exact-replay mode an uninterrupted
/// oracle run (same seed, fresh heap) is computed first and the stitched
/// loss log must match it bit for bit.
pub fn crash_test(args: &CrashTestArgs) -> Result<CrashTestReport> {
    let train = &args.train;
    let max_iter = target_iterations(train)?;

    // Uninterrupted oracle, in-process, on a scratch heap.
    let oracle_rows = if train.no_restore {
        None
    } else {
        let dir = tempfile::tempdir()?;
        let heap_bytes = std::fs::metadata(&train.heap).map(|m| m.len()).unwrap_or(1 << 24);
        let mut oracle = train.clone();
        oracle.heap = dir.path().join("oracle.pm");
        oracle.loss_log = dir.path().join("oracle-loss.csv");
        pmtrain_core::Heap::create(&oracle.heap, heap_bytes / 2)?;
        crate::trainer::run_train(&oracle)?;
        Some(losslog::read_rows(&oracle.loss_log))
    };

    let mut rng = SplitMix64::new(train.seed ^ 0x6b69_6c6c);
    let mut delivered = 0u32;
    let mut stalled = 0u32;
    let mut last_peek = peek_iter(&train.heap);
    while delivered < args.crashes {
        let mut child = worker_command(train)?.spawn()?;
        let delay = rng.range_f64(args.kill_min_ms as f64, args.kill_max_ms as f64);
        match sleep_or_exit(&mut child, Duration::from_millis(delay as u64))? {
            Some(status) => {
                // Finished before the kill landed.
                if !status.success() {
                    bail!("worker failed with {status}");
                }
                break;
            }
            None => {
                child.kill()?;
                child.wait()?;
                delivered += 1;
                let now = peek_iter(&train.heap);
                if now == last_peek {
                    stalled += 1;
                    if stalled >= STALL_LIMIT {
                        bail!("no training progress after {STALL_LIMIT} consecutive kills");
                    }
                } else {
                    stalled = 0;
                    last_peek = now;
                }
            }
        }
    }
    // Final uninterrupted run to completion.
    let final_iter = loop {
        let mut child = worker_command(train)?.spawn()?;
        wait_for_completion(&mut child)?;
        let it = peek_iter(&train.heap).unwrap_or(0);
        if train.no_restore || it >= max_iter {
            break it;
        }
    };

    let rows = losslog::read_rows(&train.loss_log);
    let matches_oracle = oracle_rows.map(|oracle| oracle == rows);
    Ok(CrashTestReport {
        crashes_delivered: delivered,
        final_iter,
        total_rows: rows.len() as u64,
        matches_oracle,
    })
}

fn target_iterations(train: &TrainArgs) -> Result<u64> {
    Ok(match train.max_iter {
        Some(n) => n,
        None => crate::trainer::load_config(&train.config)?.max_iter as u64,
    })
}

// ----------------------------------------------------------------------
// spot-instance simulation
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpotArgs {
    pub train: TrainArgs,
    pub trace: PathBuf,
    pub max_bid: f64,
    pub step_ms: u64,
    pub state_log: PathBuf,
}

#[derive(Debug)]
pub struct SpotReport {
    pub steps: usize,
    pub interruptions: u32,
    pub states: Vec<u8>,
    pub final_iter: u64,
}

#[derive(Debug, Clone)]
pub struct TracePoint {
    pub timestamp: String,
    pub epoch: i64,
    pub price: f64,
}

/// Trace CSV: header `timestamp,price`; timestamps ISO-8601 or integer
/// epoch seconds, strictly increasing; prices positive.
pub fn parse_trace(path: &Path) -> Result<Vec<TracePoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("trace {}", path.display()))?;
    let mut points: Vec<TracePoint> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("timestamp,price")) {
            continue;
        }
        let (ts, price) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected timestamp,price", path.display(), i + 1))?;
        let ts = ts.trim();
        let epoch = match ts.parse::<i64>() {
            Ok(e) => e,
            Err(_) => chrono::DateTime::parse_from_rfc3339(ts)
                .with_context(|| format!("{}:{}: bad timestamp '{ts}'", path.display(), i + 1))?
                .timestamp(),
        };
        let price: f64 = price
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad price", path.display(), i + 1))?;
        if price <= 0.0 {
            bail!("{}:{}: price must be positive", path.display(), i + 1);
        }
        if let Some(prev) = points.last() {
            if epoch <= prev.epoch {
                bail!("{}:{}: timestamps must be strictly increasing", path.display(), i + 1);
            }
        }
        points.push(TracePoint { timestamp: ts.to_string(), epoch, price });
    }
    if points.is_empty() {
        bail!("trace {} is empty", path.display());
    }
    Ok(points)
}

/// Walk the trace: the worker runs while `max_bid > market_price` and is
/// killed otherwise; each trace interval is compressed to `step_ms` of
/// wall time. After the trace, a still-unfinished job is allowed to run
/// to completion. Emits the state curve CSV.
pub fn spot_sim(args: &SpotArgs) -> Result<SpotReport> {
    let trace = parse_trace(&args.trace)?;
    let train = &args.train;
    let max_iter = target_iterations(train)?;

    let mut state_log = std::fs::File::create(&args.state_log)?;
    use std::io::Write;
    writeln!(state_log, "timestamp,state")?;

    let mut worker: Option<Child> = None;
    let mut states = Vec::with_capacity(trace.len());
    let mut interruptions = 0u32;
    let mut done = false;

    for point in &trace {
        let run = args.max_bid > point.price;
        states.push(run as u8);
        writeln!(state_log, "{},{}", point.timestamp, run as u8)?;
        if let Some(last_two) = states.len().checked_sub(2) {
            if states[last_two] == 1 && states[last_two + 1] == 0 {
                interruptions += 1;
            }
        }
        if run {
            if worker.is_none() && !done {
                worker = Some(worker_command(train)?.spawn()?);
            }
            if let Some(child) = worker.as_mut() {
                if let Some(status) = sleep_or_exit(child, Duration::from_millis(args.step_ms))? {
                    if !status.success() {
                        bail!("worker failed with {status}");
                    }
                    worker = None;
                    done = true;
                }
            } else {
                std::thread::sleep(Duration::from_millis(args.step_ms));
            }
        } else {
            if let Some(mut child) = worker.take() {
                child.kill()?;
                child.wait()?;
            }
            std::thread::sleep(Duration::from_millis(args.step_ms));
        }
    }
    state_log.flush()?;

    // Trace exhausted: let an unfinished job run out.
    if let Some(mut child) = worker.take() {
        wait_for_completion(&mut child)?;
        done = true;
    }
    while !done {
        let mut child = worker_command(train)?.spawn()?;
        wait_for_completion(&mut child)?;
        let it = peek_iter(&train.heap).unwrap_or(0);
        if train.no_restore || it >= max_iter {
            done = true;
        }
    }

    Ok(SpotReport {
        steps: trace.len(),
        interruptions,
        states,
        final_iter: peek_iter(&train.heap).unwrap_or(0),
    })
}
