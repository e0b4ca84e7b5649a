//! `pmtrain`: crash-resilient encrypted model training on an emulated
//! persistent heap, plus the experiment harness around it.
//!
//! Exit codes: 0 success, 2 envelope integrity failure, 3 restart
//! requested (iteration budget reached; rerun to continue), 4 usage
//! error, 1 anything else.

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use pmtrain_cli::bench::{self, MirrorBenchArgs, SpsArgs};
use pmtrain_cli::supervise::{self, CrashTestArgs, SpotArgs};
use pmtrain_cli::trainer::{self, InferArgs, RestartRequested, TrainArgs};
use pmtrain_cli::{gen, keyfile, report};

use pmtrain_core::data::DataFormat;
use pmtrain_core::envelope::CryptoError;
use pmtrain_core::{Heap, Key128};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Idx,
    Csv,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> DataFormat {
        match f {
            FormatArg::Idx => DataFormat::Idx,
            FormatArg::Csv => DataFormat::Csv,
        }
    }
}

#[derive(Parser)]
#[command(name = "pmtrain", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    heap: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// 16-byte raw key file; PMTRAIN_KEY_HEX is used when absent.
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overrides max_iter from the config.
    #[arg(long)]
    max_iter: Option<u64>,
    /// Iterations between replica syncs.
    #[arg(long, default_value_t = 1)]
    mirror_freq: u64,
    #[arg(long)]
    loss_log: PathBuf,
    /// Load this dataset into the heap first if it holds none.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
    format: FormatArg,
    /// Disable mirroring: every run restarts from scratch.
    #[arg(long)]
    no_restore: bool,
    /// Restore parameters but reseed the batch sampler on resume.
    #[arg(long)]
    no_replay: bool,
    /// Stop (exit 3) after this many iterations in one run.
    #[arg(long)]
    iter_budget: Option<u64>,
}

impl From<TrainFlags> for TrainArgs {
    fn from(f: TrainFlags) -> TrainArgs {
        TrainArgs {
            heap: f.heap,
            config: f.config,
            key: f.key,
            seed: f.seed,
            max_iter: f.max_iter,
            mirror_freq: f.mirror_freq.max(1),
            loss_log: f.loss_log,
            images: f.images,
            labels: f.labels,
            format: f.format.into(),
            no_restore: f.no_restore,
            no_replay: f.no_replay,
            iter_budget: f.iter_budget,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Create an empty heap file.
    Init {
        #[arg(long)]
        heap: PathBuf,
        /// Region size in bytes; the file is header + two regions.
        #[arg(long)]
        size: u64,
    },
    /// Encrypt a dataset into the heap's persistent matrix.
    LoadData {
        #[arg(long)]
        heap: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
        format: FormatArg,
        /// Label/class count of the dataset.
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Train, resuming from the encrypted replica when one exists.
    Train(TrainFlags),
    /// Restore the replica and classify a test set.
    Infer {
        #[arg(long)]
        heap: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        test_images: PathBuf,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
        format: FormatArg,
    },
    /// Swaps-per-second benchmark over durable transactions.
    BenchSps {
        #[arg(long)]
        heap: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        array_len: u64,
        /// Comma-separated swaps-per-transaction list.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2u64, 8, 64, 512, 2048])]
        txn_sizes: Vec<u64>,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replica sync/restore timing vs. a flat-file checkpoint baseline.
    BenchMirror {
        /// Conv-layer counts to sweep, e.g. 1,2,4,8,12.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 4, 8, 12])]
        layers: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Scratch directory for heaps and checkpoints.
        #[arg(long, default_value = "bench-work")]
        workdir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        runs: u32,
    },
    /// Kill/restart campaign against the training worker.
    CrashTest {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value_t = 300)]
        kill_min_ms: u64,
        #[arg(long, default_value_t = 900)]
        kill_max_ms: u64,
        /// Number of kills before the final uninterrupted run.
        #[arg(long, default_value_t = 9)]
        crashes: u32,
    },
    /// Replay a spot-price trace, killing the worker when outbid.
    SpotSim {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0.0955)]
        max_bid: f64,
        /// Wall milliseconds per trace step.
        #[arg(long, default_value_t = 200)]
        step_ms: u64,
        #[arg(long)]
        state_log: PathBuf,
    },
    /// Write a synthetic dataset CSV.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = GenKind::Blobs)]
        kind: GenKind,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        /// Feature count for blobs; image side for patterns.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate a random 16-byte key file.
    GenKey {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenKind {
    Blobs,
    Patterns,
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Init { heap, size } => {
            Heap::create(&heap, size)?;
            println!("created heap {} (region {} bytes)", heap.display(), size);
        }
        Cmd::LoadData { heap, images, labels, key, format, classes } => {
            let key = keyfile::load_key(key.as_deref())?;
            let src = pmtrain_core::data::DatasetSource {
                images,
                labels,
                format: format.into(),
                classes,
            };
            let ds = pmtrain_core::data::Dataset::load(&src)?;
            let mut h = Heap::open(&heap)?;
            let dm = pmtrain_core::data::load_to_pm(&mut h, &ds, &key, pmtrain_core::data::LOAD_TXN_ROWS)?;
            println!("loaded {} rows x {} features / {} classes", dm.rows, dm.cols, dm.classes);
        }
        Cmd::Train(flags) => {
            let args: TrainArgs = flags.into();
            let out = trainer::run_train(&args)?;
            match out.final_loss {
                Some(loss) => println!("trained to iteration {} (loss {loss})", out.final_iter),
                None => println!("nothing to do: snapshot already at iteration {}", out.final_iter),
            }
        }
        Cmd::Infer { heap, config, key, test_images, test_labels, format } => {
            let acc = trainer::run_infer(&InferArgs {
                heap,
                config,
                key,
                test_images,
                test_labels,
                format: format.into(),
            })?;
            println!("accuracy={acc}");
        }
        Cmd::BenchSps { heap, array_len, txn_sizes, seconds, seed, out } => {
            let rep = bench::run_sps(&SpsArgs { heap, array_len, txn_sizes, seconds, seed, out: out.clone() })?;
            rep.emit(out.as_deref())?;
        }
        Cmd::BenchMirror { layers, out, key, workdir, seed, runs } => {
            let rep = bench::run_mirror_bench(&MirrorBenchArgs { layers, out: out.clone(), key, workdir, seed, runs })?;
            rep.emit(out.as_deref())?;
        }
        Cmd::CrashTest { train, kill_min_ms, kill_max_ms, crashes } => {
            let args = CrashTestArgs { train: train.into(), kill_min_ms, kill_max_ms, crashes };
            let rep = supervise::crash_test(&args)?;
            println!(
                "crashes={} final_iter={} loss_rows={}{}",
                rep.crashes_delivered,
                rep.final_iter,
                rep.total_rows,
                match rep.matches_oracle {
                    Some(true) => " loss_log=identical_to_oracle",
                    Some(false) => " loss_log=DIVERGED",
                    None => "",
                }
            );
            if rep.matches_oracle == Some(false) {
                anyhow::bail!("stitched loss log diverged from the uninterrupted oracle");
            }
        }
        Cmd::SpotSim { train, trace, max_bid, step_ms, state_log } => {
            let rep = supervise::spot_sim(&SpotArgs {
                train: train.into(),
                trace,
                max_bid,
                step_ms,
                state_log,
            })?;
            println!(
                "steps={} interruptions={} final_iter={}",
                rep.steps, rep.interruptions, rep.final_iter
            );
        }
        Cmd::GenData { out, kind, rows, dim, classes, noise, seed } => {
            let csv = match kind {
                GenKind::Blobs => gen::blobs_csv(rows, dim, classes, noise, seed),
                GenKind::Patterns => gen::patterns_csv(rows, dim, classes, noise, seed),
            };
            std::fs::write(&out, csv)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Cmd::GenKey { out } => {
            Key128::generate()?.to_file(&out)?;
            println!("wrote key to {}", out.display());
        }
    }
    let _ = report::CSV_HEADER; // shared schema constant
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(CryptoError::Integrity) = cause.downcast_ref::<CryptoError>() {
            return 2;
        }
        if cause.downcast_ref::<RestartRequested>().is_some() {
            return 3;
        }
    }
    1
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output still exits 0.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(4);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(err) = run(cli.cmd) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
