//! Benchmarks: transactional swap throughput on a persistent integer
//! array, and replica sync/restore timing against a flat-file
//! checkpoint baseline that shares the same envelope-per-buffer layout,
//! so the comparison isolates the storage path.

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pmtrain_core::envelope::{self, Envelope};
use pmtrain_core::heap::ROOT_SPS_ARRAY;
use pmtrain_core::mirror;
use pmtrain_core::nn::{parse_config, Model};
use pmtrain_core::{Heap, Key128, PmRef, SplitMix64};

use crate::report::Report;

// ----------------------------------------------------------------------
// swaps-per-second benchmark
// ----------------------------------------------------------------------

/// Persistent array layout at root slot 2: `len u64 ‖ len × i64`.
pub fn sps_init(h: &mut Heap, len: u64) -> Result<PmRef> {
    if h.root(ROOT_SPS_ARRAY)?.is_some() {
        bail!("heap already holds a benchmark array");
    }
    h.begin_txn()?;
    let node = h.alloc(8 + len * 8)?;
    h.txn_store(&node.slice(0, 8), &len.to_le_bytes())?;
    let mut bytes = Vec::with_capacity((len * 8) as usize);
    for v in 0..len {
        bytes.extend_from_slice(&(v as i64).to_le_bytes());
    }
    h.txn_store(&node.slice(8, len * 8), &bytes)?;
    h.set_root(ROOT_SPS_ARRAY, Some(node.offset))?;
    h.end_txn()?;
    Ok(node)
}

pub fn sps_open(h: &Heap) -> Result<PmRef> {
    let off = h.root(ROOT_SPS_ARRAY)?.context("no benchmark array in this heap")?;
    let len = h.read_u64(off)?;
    Ok(PmRef::new(off, 8 + len * 8))
}

fn slot(node: &PmRef, i: u64) -> PmRef {
    node.slice(8 + i * 8, 8)
}

/// One transaction of `swaps` random pair swaps.
pub fn sps_txn(h: &mut Heap, node: &PmRef, swaps: u64, rng: &mut SplitMix64) -> Result<()> {
    let len = (node.len - 8) / 8;
    h.begin_txn()?;
    for _ in 0..swaps {
        let i = rng.next_u64() % len;
        let j = rng.next_u64() % len;
        let a = h.raw_read(&slot(node, i))?;
        let b = h.raw_read(&slot(node, j))?;
        h.txn_store(&slot(node, i), &b)?;
        h.txn_store(&slot(node, j), &a)?;
    }
    h.end_txn()?;
    Ok(())
}

/// The array must always hold a permutation of 0..len at transaction
/// boundaries and after recovery.
pub fn sps_is_permutation(h: &Heap, node: &PmRef) -> Result<bool> {
    let len = (node.len - 8) / 8;
    let raw = h.raw_read(&node.slice(8, len * 8))?;
    let mut values: Vec<i64> = raw
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    values.sort_unstable();
    Ok(values.iter().enumerate().all(|(i, &v)| v == i as i64))
}

pub struct SpsArgs {
    pub heap: PathBuf,
    pub array_len: u64,
    pub txn_sizes: Vec<u64>,
    pub seconds: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn run_sps(args: &SpsArgs) -> Result<Report> {
    let mut h = if args.heap.exists() {
        Heap::open(&args.heap)?
    } else {
        let bytes = 8 + args.array_len * 8;
        Heap::create(&args.heap, (2 * bytes).max(4096).next_power_of_two())?
    };
    let node = match h.root(ROOT_SPS_ARRAY)? {
        Some(_) => sps_open(&h)?,
        None => sps_init(&mut h, args.array_len)?,
    };
    let mut rng = SplitMix64::new(args.seed);
    let mut report = Report::default();
    let array_bytes = args.array_len * 8;

    for &swaps in &args.txn_sizes {
        let fences_before = h.stats().fences;
        let txns_before = h.stats().txns_committed;
        let start = Instant::now();
        let mut done = 0u64;
        while start.elapsed().as_secs_f64() < args.seconds {
            sps_txn(&mut h, &node, swaps, &mut rng)?;
            done += swaps;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let txns = h.stats().txns_committed - txns_before;
        let fences = h.stats().fences - fences_before;
        report.push("sps", array_bytes, &format!("txn_{swaps}"), done as f64 / elapsed, "swaps_per_sec", args.seed);
        report.push("sps", array_bytes, &format!("txn_{swaps}_fences_per_txn"), fences as f64 / txns as f64, "fences", args.seed);
        if !sps_is_permutation(&h, &node)? {
            bail!("array is no longer a permutation after txn size {swaps}");
        }
    }
    Ok(report)
}

// ----------------------------------------------------------------------
// replica sync vs. flat-file checkpoint
// ----------------------------------------------------------------------

/// Config with `layers` convolutional layers whose parameter volume
/// grows monotonically with the layer count: a 3×3 stem, a maxpool,
/// then 1×1 conv blocks (spatial size constant), and a conv classifier.
pub fn bench_model_config(layers: u64) -> String {
    assert!(layers >= 1);
    let mut cfg = String::from("[net]\nchannels=1\nheight=28\nwidth=28\nbatch=16\nlearning_rate=0.1\n");
    cfg.push_str("[convolutional]\nfilters=96\nsize=3\nstride=1\nactivation=leaky\n");
    cfg.push_str("[maxpool]\nsize=2\nstride=2\n");
    for _ in 1..layers {
        cfg.push_str("[convolutional]\nfilters=96\nsize=1\nstride=1\nactivation=leaky\n");
    }
    cfg.push_str("[convolutional]\nfilters=10\nsize=13\nstride=1\nactivation=linear\n[softmax]\n");
    cfg
}

/// Flat checkpoint file: `iter u64 ‖ cursor u64 ‖ count u64 ‖ count ×
/// { len u64, envelope bytes }`, written with a data sync for file-level
/// durability.
pub fn checkpoint_save(path: &Path, m: &Model<f32>, iter: u64, cursor: u64, key: &Key128) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    let mut sealed: Vec<Vec<u8>> = Vec::new();
    for layer in m.layers() {
        if let Some(p) = layer.params.as_ref() {
            for buf in p.buffers() {
                let mut plain = Vec::with_capacity(buf.len() * 4);
                for v in buf {
                    plain.extend_from_slice(&v.to_le_bytes());
                }
                sealed.push(envelope::encrypt(key, &plain)?.to_bytes());
            }
        }
    }
    let encrypt = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&iter.to_le_bytes())?;
    f.write_all(&cursor.to_le_bytes())?;
    f.write_all(&(sealed.len() as u64).to_le_bytes())?;
    for env in &sealed {
        f.write_all(&(env.len() as u64).to_le_bytes())?;
        f.write_all(env)?;
    }
    f.flush()?;
    f.sync_all()?;
    Ok((encrypt, t1.elapsed().as_secs_f64()))
}

pub fn checkpoint_restore(path: &Path, m: &mut Model<f32>, key: &Key128) -> Result<(u64, u64, f64, f64)> {
    let t0 = Instant::now();
    let raw = std::fs::read(path)?;
    let read = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let iter = u64::from_le_bytes(raw[0..8].try_into().unwrap());
    let cursor = u64::from_le_bytes(raw[8..16].try_into().unwrap());
    let count = u64::from_le_bytes(raw[16..24].try_into().unwrap());
    let mut at = 24usize;
    let mut envs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u64::from_le_bytes(raw[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        envs.push(Envelope::from_bytes(&raw[at..at + len])?);
        at += len;
    }
    let mut it = envs.iter();
    for layer in m.layers_mut() {
        if let Some(p) = layer.params.as_mut() {
            for buf in p.buffers_mut() {
                let plain = envelope::decrypt(key, it.next().context("checkpoint too short")?)?;
                for (v, c) in buf.iter_mut().zip(plain.chunks_exact(4)) {
                    *v = f32::from_le_bytes(c.try_into().unwrap());
                }
            }
        }
    }
    Ok((iter, cursor, read, t1.elapsed().as_secs_f64()))
}

pub struct MirrorBenchArgs {
    pub layers: Vec<u64>,
    pub out: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub workdir: PathBuf,
    pub seed: u64,
    pub runs: u32,
}

pub fn run_mirror_bench(args: &MirrorBenchArgs) -> Result<Report> {
    let key = match args.key.as_deref() {
        Some(p) => Key128::from_file(p)?,
        None => Key128::generate()?,
    };
    std::fs::create_dir_all(&args.workdir)?;
    let mut report = Report::default();

    for &layers in &args.layers {
        let cfg = parse_config(&bench_model_config(layers))?;
        let mut m: Model<f32> = Model::build(&cfg, args.seed)?;
        let size = m.param_bytes() as u64;
        let heap_path = args.workdir.join(format!("bench-{layers}.pm"));
        let _ = std::fs::remove_file(&heap_path);
        let region = (4 * size + (1 << 20)).next_power_of_two();
        let mut h = Heap::create(&heap_path, region)?;
        let pm = mirror::alloc_mirror_model(&mut h, &m, &key, args.seed)?;
        let ckpt_path = args.workdir.join(format!("bench-{layers}.ckpt"));

        for run in 0..args.runs {
            let rep = mirror::mirror_out(&mut h, &pm, &m, run as u64, 0, &key)?;
            report.push("mirror_save", size, "encrypt", rep.encrypt.as_secs_f64(), "s", args.seed);
            report.push("mirror_save", size, "write", rep.write.as_secs_f64(), "s", args.seed);
            report.push("mirror_save", size, "total", (rep.encrypt + rep.write).as_secs_f64(), "s", args.seed);

            let (state, rep) = mirror::mirror_in(&h, &pm, &mut m, &key)?;
            debug_assert_eq!(state.iter, run as u64);
            report.push("mirror_restore", size, "read", rep.read.as_secs_f64(), "s", args.seed);
            report.push("mirror_restore", size, "decrypt", rep.decrypt.as_secs_f64(), "s", args.seed);
            report.push("mirror_restore", size, "total", (rep.read + rep.decrypt).as_secs_f64(), "s", args.seed);

            let (encrypt, write) = checkpoint_save(&ckpt_path, &m, run as u64, 0, &key)?;
            report.push("ssd_save", size, "encrypt", encrypt, "s", args.seed);
            report.push("ssd_save", size, "write", write, "s", args.seed);
            report.push("ssd_save", size, "total", encrypt + write, "s", args.seed);

            let (_, _, read, decrypt) = checkpoint_restore(&ckpt_path, &mut m, &key)?;
            report.push("ssd_restore", size, "read", read, "s", args.seed);
            report.push("ssd_restore", size, "decrypt", decrypt, "s", args.seed);
            report.push("ssd_restore", size, "total", read + decrypt, "s", args.seed);
        }
        let _ = std::fs::remove_file(&heap_path);
        let _ = std::fs::remove_file(&ckpt_path);
    }
    Ok(report)
}
