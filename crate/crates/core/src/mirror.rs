//! Encrypted persistent replica of a model, synchronized per training
//! iteration.
//!
//! The replica is a linked list of persistent layer nodes, one per model
//! layer, each holding one envelope slot per parameter buffer (five for
//! convolutional and connected layers, zero otherwise). Envelope slots
//! are allocated once, sized ciphertext = plaintext + 28, and overwritten
//! in place on every sync. The list head plus the iteration counter and
//! the RNG cursor live in a 32-byte model node referenced from root
//! slot 0; snapshot writes cover all of it in a single transaction, so a
//! crash yields either the previous complete snapshot or the new one.
//!
//! Node serialization (little-endian), references file-absolute, 0 = null:
//!
//! - model node: `numL u64 ‖ iter u64 ‖ rng_cursor u64 ‖ head u64`
//! - layer node: `buffer_count u64 ‖ buffer_count × { plaintext_len u64,
//!   env_offset u64, env_len u64 } ‖ next u64`

use std::time::{Duration, Instant};
use thiserror::Error;

use crate::envelope::{self, CryptoError, Envelope, Key128, ENVELOPE_OVERHEAD};
use crate::heap::{Heap, HeapError, PmRef, ROOT_MODEL};
use crate::nn::{Model, PARAM_BUFFERS};

const MODEL_NODE_LEN: u64 = 32;

#[derive(Debug, Error)]
pub enum MirrorError {
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("model/replica shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("a persistent model already exists in this heap")]
    AlreadyExists,
    #[error("no persistent model in this heap")]
    Missing,
    #[error("corrupt persistent model structure: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, MirrorError>;

/// One envelope slot of a persistent layer.
#[derive(Debug, Clone, Copy)]
pub struct BufSlot {
    pub plain_len: u64,
    pub env: PmRef,
}

#[derive(Debug, Clone)]
pub struct PmLayer {
    pub node: PmRef,
    pub buffers: Vec<BufSlot>,
}

/// Volatile index of the persistent replica structure.
#[derive(Debug, Clone)]
pub struct PmModel {
    pub node: PmRef,
    pub layers: Vec<PmLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MirrorState {
    /// Last completed training iteration.
    pub iter: u64,
    /// Persisted sampling-RNG state as of that iteration.
    pub rng_cursor: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MirrorOutReport {
    pub encrypt: Duration,
    pub write: Duration,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MirrorInReport {
    pub read: Duration,
    pub decrypt: Duration,
}

pub fn mirror_exists(h: &Heap) -> bool {
    matches!(h.root(ROOT_MODEL), Ok(Some(_)))
}

fn enc_ref(h: &Heap, offset: u64) -> u64 {
    h.main_offset() + offset
}

fn dec_ref(h: &Heap, raw: u64) -> Result<Option<u64>> {
    if raw == 0 {
        return Ok(None);
    }
    if raw < h.main_offset() || raw >= h.main_offset() + h.region_size() {
        return Err(MirrorError::Corrupt(format!(
            "reference {raw:#x} outside main region"
        )));
    }
    Ok(Some(raw - h.main_offset()))
}

fn buffer_bytes(buf: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.len() * 4);
    for v in buf {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32(raw: &[u8], into: &mut [f32]) -> Result<()> {
    if raw.len() != into.len() * 4 {
        return Err(MirrorError::ShapeMismatch(format!(
            "{} plaintext bytes for a buffer of {} values",
            raw.len(),
            into.len()
        )));
    }
    for (v, c) in into.iter_mut().zip(raw.chunks_exact(4)) {
        *v = f32::from_le_bytes(c.try_into().unwrap());
    }
    Ok(())
}

/// Allocate the replica for `m` and store the initial snapshot
/// (encrypted parameters, iter = 0, the given RNG cursor), all in one
/// transaction: a crash during allocation recovers to "no model".
pub fn alloc_mirror_model(
    h: &mut Heap,
    m: &Model<f32>,
    key: &Key128,
    rng_cursor: u64,
) -> Result<PmModel> {
    if mirror_exists(h) {
        return Err(MirrorError::AlreadyExists);
    }
    h.begin_txn()?;
    let pm = build_replica(h, m, key, rng_cursor)?;
    h.end_txn()?;
    Ok(pm)
}

fn build_replica(h: &mut Heap, m: &Model<f32>, key: &Key128, rng_cursor: u64) -> Result<PmModel> {
    let node = h.alloc(MODEL_NODE_LEN)?;
    let mut layers = Vec::with_capacity(m.num_layers());
    for layer in m.layers() {
        let count = layer.param_buffer_count() as u64;
        let lnode = h.alloc(8 + count * 24 + 8)?;
        let mut buffers = Vec::with_capacity(count as usize);
        if let Some(params) = layer.params.as_ref() {
            for buf in params.buffers() {
                let plain_len = (buf.len() * 4) as u64;
                let env = h.alloc(plain_len + ENVELOPE_OVERHEAD as u64)?;
                buffers.push(BufSlot { plain_len, env });
            }
        }
        layers.push(PmLayer {
            node: lnode,
            buffers,
        });
    }

    for (i, (pml, layer)) in layers.iter().zip(m.layers()).enumerate() {
        let next = layers
            .get(i + 1)
            .map(|l| enc_ref(h, l.node.offset))
            .unwrap_or(0);
        let mut bytes = Vec::with_capacity(pml.node.len as usize);
        bytes.extend_from_slice(&(pml.buffers.len() as u64).to_le_bytes());
        for slot in &pml.buffers {
            bytes.extend_from_slice(&slot.plain_len.to_le_bytes());
            bytes.extend_from_slice(&enc_ref(h, slot.env.offset).to_le_bytes());
            bytes.extend_from_slice(&slot.env.len.to_le_bytes());
        }
        bytes.extend_from_slice(&next.to_le_bytes());
        h.txn_store(&pml.node, &bytes)?;

        if let Some(params) = layer.params.as_ref() {
            for (slot, buf) in pml.buffers.iter().zip(params.buffers()) {
                let env = envelope::encrypt(key, &buffer_bytes(buf))?;
                h.txn_store(&slot.env, &env.to_bytes())?;
            }
        }
    }

    let head = layers
        .first()
        .map(|l| enc_ref(h, l.node.offset))
        .unwrap_or(0);
    let mut bytes = Vec::with_capacity(MODEL_NODE_LEN as usize);
    bytes.extend_from_slice(&(m.num_layers() as u64).to_le_bytes());
    bytes.extend_from_slice(&0u64.to_le_bytes()); // iter
    bytes.extend_from_slice(&rng_cursor.to_le_bytes());
    bytes.extend_from_slice(&head.to_le_bytes());
    h.txn_store(&node, &bytes)?;
    h.set_root(ROOT_MODEL, Some(node.offset))?;

    Ok(PmModel { node, layers })
}

/// Walk the persistent structure from root slot 0.
pub fn open_mirror(h: &Heap) -> Result<PmModel> {
    let root = h.root(ROOT_MODEL)?.ok_or(MirrorError::Missing)?;
    let node = PmRef::new(root, MODEL_NODE_LEN);
    let raw = h.raw_read(&node)?;
    let num_layers = u64::from_le_bytes(raw[0..8].try_into().unwrap());
    let head = u64::from_le_bytes(raw[24..32].try_into().unwrap());
    if num_layers > h.region_size() / 16 {
        return Err(MirrorError::Corrupt(format!(
            "implausible layer count {num_layers}"
        )));
    }

    let mut layers = Vec::with_capacity(num_layers as usize);
    let mut next = dec_ref(h, head)?;
    while let Some(at) = next {
        let count = h.read_u64(at)?;
        if count as usize > PARAM_BUFFERS {
            return Err(MirrorError::Corrupt(format!(
                "layer claims {count} buffers"
            )));
        }
        let node_len = 8 + count * 24 + 8;
        let lnode = PmRef::new(at, node_len);
        let raw = h.raw_read(&lnode)?;
        let mut buffers = Vec::with_capacity(count as usize);
        for b in 0..count as usize {
            let base = 8 + b * 24;
            let plain_len = u64::from_le_bytes(raw[base..base + 8].try_into().unwrap());
            let env_abs = u64::from_le_bytes(raw[base + 8..base + 16].try_into().unwrap());
            let env_len = u64::from_le_bytes(raw[base + 16..base + 24].try_into().unwrap());
            let env_off = dec_ref(h, env_abs)?
                .ok_or_else(|| MirrorError::Corrupt("null envelope reference".into()))?;
            if env_len != plain_len + ENVELOPE_OVERHEAD as u64 {
                return Err(MirrorError::Corrupt(format!(
                    "envelope size {env_len} does not match plaintext {plain_len} + 28"
                )));
            }
            buffers.push(BufSlot {
                plain_len,
                env: PmRef::new(env_off, env_len),
            });
        }
        let next_abs = u64::from_le_bytes(raw[(8 + count as usize * 24)..].try_into().unwrap());
        layers.push(PmLayer {
            node: lnode,
            buffers,
        });
        if layers.len() as u64 > num_layers {
            return Err(MirrorError::Corrupt(
                "layer list longer than declared".into(),
            ));
        }
        next = dec_ref(h, next_abs)?;
    }
    if layers.len() as u64 != num_layers {
        return Err(MirrorError::Corrupt(format!(
            "layer list has {} nodes, declared {num_layers}",
            layers.len()
        )));
    }
    Ok(PmModel { node, layers })
}

/// Iteration counter and RNG cursor of the committed snapshot.
pub fn read_state(h: &Heap, pm: &PmModel) -> Result<MirrorState> {
    let raw = h.raw_read(&pm.node)?;
    Ok(MirrorState {
        iter: u64::from_le_bytes(raw[8..16].try_into().unwrap()),
        rng_cursor: u64::from_le_bytes(raw[16..24].try_into().unwrap()),
    })
}

fn check_shapes(pm: &PmModel, m: &Model<f32>) -> Result<()> {
    if pm.layers.len() != m.num_layers() {
        return Err(MirrorError::ShapeMismatch(format!(
            "replica has {} layers, model has {}",
            pm.layers.len(),
            m.num_layers()
        )));
    }
    for (i, (pml, layer)) in pm.layers.iter().zip(m.layers()).enumerate() {
        if pml.buffers.len() != layer.param_buffer_count() {
            return Err(MirrorError::ShapeMismatch(format!(
                "layer {i}: replica {} buffers, model {}",
                pml.buffers.len(),
                layer.param_buffer_count()
            )));
        }
        if let Some(params) = layer.params.as_ref() {
            for (b, (slot, buf)) in pml.buffers.iter().zip(params.buffers()).enumerate() {
                if slot.plain_len != (buf.len() * 4) as u64 {
                    return Err(MirrorError::ShapeMismatch(format!(
                        "layer {i} buffer {b}: replica holds {} plaintext bytes, model buffer is {}",
                        slot.plain_len,
                        buf.len() * 4
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Encrypt every parameter buffer with fresh IVs and store the snapshot —
/// parameters, iteration counter, RNG cursor — in one transaction.
pub fn mirror_out(
    h: &mut Heap,
    pm: &PmModel,
    m: &Model<f32>,
    iter: u64,
    rng_cursor: u64,
    key: &Key128,
) -> Result<MirrorOutReport> {
    check_shapes(pm, m)?;

    let t0 = Instant::now();
    let mut sealed: Vec<Vec<u8>> = Vec::new();
    for layer in m.layers() {
        if let Some(params) = layer.params.as_ref() {
            for buf in params.buffers() {
                sealed.push(envelope::encrypt(key, &buffer_bytes(buf))?.to_bytes());
            }
        }
    }
    let encrypt = t0.elapsed();

    let t1 = Instant::now();
    h.begin_txn()?;
    let mut it = sealed.iter();
    for pml in &pm.layers {
        for slot in &pml.buffers {
            let bytes = it.next().expect("shape checked");
            h.txn_store(&slot.env, bytes)?;
        }
    }
    h.txn_store(&pm.node.slice(8, 8), &iter.to_le_bytes())?;
    h.txn_store(&pm.node.slice(16, 8), &rng_cursor.to_le_bytes())?;
    h.end_txn()?;
    let write = t1.elapsed();

    Ok(MirrorOutReport { encrypt, write })
}

/// Decrypt the snapshot into `m` and return its iteration counter and
/// RNG cursor. A tampered envelope fails with an integrity error and
/// leaves no partial plaintext in the affected buffer.
pub fn mirror_in(
    h: &Heap,
    pm: &PmModel,
    m: &mut Model<f32>,
    key: &Key128,
) -> Result<(MirrorState, MirrorInReport)> {
    check_shapes(pm, m)?;

    let t0 = Instant::now();
    let mut raws: Vec<Vec<u8>> = Vec::new();
    for pml in &pm.layers {
        for slot in &pml.buffers {
            raws.push(h.raw_read(&slot.env)?);
        }
    }
    let read = t0.elapsed();

    let t1 = Instant::now();
    let mut it = raws.into_iter();
    for layer in m.layers_mut() {
        if let Some(params) = layer.params.as_mut() {
            for buf in params.buffers_mut() {
                let env = Envelope::from_bytes(&it.next().expect("shape checked"))?;
                let plain = envelope::decrypt(key, &env)?;
                bytes_to_f32(&plain, buf)?;
            }
        }
    }
    let decrypt = t1.elapsed();

    Ok((read_state(h, pm)?, MirrorInReport { read, decrypt }))
}

/// Exact PM metadata overhead of the replica: 28 bytes per envelope.
pub fn metadata_overhead(pm: &PmModel) -> u64 {
    pm.layers
        .iter()
        .flat_map(|l| l.buffers.iter())
        .map(|s| s.env.len - s.plain_len)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parse_config;
    use tempfile::TempDir;

    const CFG: &str = "[net]\nchannels=1\nheight=6\nwidth=6\n\
                       [convolutional]\nfilters=2\nsize=3\nstride=1\nactivation=leaky\n\
                       [maxpool]\nsize=2\nstride=2\n\
                       [connected]\noutput=3\nactivation=linear\n[softmax]";

    fn setup(dir: &TempDir) -> (Heap, Model<f32>, Key128) {
        let h = Heap::create(&dir.path().join("h.pm"), 1 << 20).unwrap();
        let cfg = parse_config(CFG).unwrap();
        let m = Model::build(&cfg, 42).unwrap();
        let key = Key128::generate().unwrap();
        (h, m, key)
    }

    fn param_bits(m: &Model<f32>) -> Vec<u32> {
        m.layers()
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| {
                p.buffers()
                    .into_iter()
                    .flatten()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn structure_maps_layers_to_nodes() {
        let dir = TempDir::new().unwrap();
        let (mut h, m, key) = setup(&dir);
        assert!(!mirror_exists(&h));
        let pm = alloc_mirror_model(&mut h, &m, &key, 7).unwrap();
        assert!(mirror_exists(&h));
        let counts: Vec<usize> = pm.layers.iter().map(|l| l.buffers.len()).collect();
        assert_eq!(counts, vec![5, 0, 5, 0]);
        assert_eq!(
            read_state(&h, &pm).unwrap(),
            MirrorState {
                iter: 0,
                rng_cursor: 7
            }
        );
    }

    #[test]
    fn double_allocation_rejected() {
        let dir = TempDir::new().unwrap();
        let (mut h, m, key) = setup(&dir);
        alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        assert!(matches!(
            alloc_mirror_model(&mut h, &m, &key, 0),
            Err(MirrorError::AlreadyExists)
        ));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let (mut h, mut m, key) = setup(&dir);
        let pm = alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        for layer in m.layers_mut() {
            if let Some(p) = layer.params.as_mut() {
                for buf in p.buffers_mut() {
                    for v in buf.iter_mut() {
                        *v += 0.125;
                    }
                }
            }
        }
        let want = param_bits(&m);
        mirror_out(&mut h, &pm, &m, 7, 99, &key).unwrap();
        for layer in m.layers_mut() {
            if let Some(p) = layer.params.as_mut() {
                for buf in p.buffers_mut() {
                    buf.iter_mut().for_each(|v| *v = -1.0);
                }
            }
        }
        let (state, _) = mirror_in(&h, &pm, &mut m, &key).unwrap();
        assert_eq!(
            state,
            MirrorState {
                iter: 7,
                rng_cursor: 99
            }
        );
        assert_eq!(want, param_bits(&m));
    }

    #[test]
    fn reopened_heap_restores_replica_index() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("h.pm");
        let cfg = parse_config(CFG).unwrap();
        let key = Key128::generate().unwrap();
        let snapshot: Vec<u32>;
        {
            let mut h = Heap::create(&p, 1 << 20).unwrap();
            let m: Model<f32> = Model::build(&cfg, 42).unwrap();
            alloc_mirror_model(&mut h, &m, &key, 5).unwrap();
            snapshot = param_bits(&m);
        }
        let h = Heap::open(&p).unwrap();
        let pm = open_mirror(&h).unwrap();
        let mut m: Model<f32> = Model::build(&cfg, 1).unwrap();
        let (state, _) = mirror_in(&h, &pm, &mut m, &key).unwrap();
        assert_eq!(
            state,
            MirrorState {
                iter: 0,
                rng_cursor: 5
            }
        );
        assert_eq!(snapshot, param_bits(&m));
    }

    #[test]
    fn wrong_key_is_integrity_error() {
        let dir = TempDir::new().unwrap();
        let (mut h, mut m, key) = setup(&dir);
        let pm = alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        let other = Key128::generate().unwrap();
        assert!(matches!(
            mirror_in(&h, &pm, &mut m, &other),
            Err(MirrorError::Crypto(CryptoError::Integrity))
        ));
    }

    #[test]
    fn tampered_heap_bytes_are_detected() {
        let dir = TempDir::new().unwrap();
        let (mut h, mut m, key) = setup(&dir);
        let pm = alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        let env = pm.layers[0].buffers[0].env;
        let mut raw = h.raw_read(&env).unwrap();
        raw[40] ^= 0x80;
        h.begin_txn().unwrap();
        h.txn_store(&env, &raw).unwrap();
        h.end_txn().unwrap();
        assert!(matches!(
            mirror_in(&h, &pm, &mut m, &key),
            Err(MirrorError::Crypto(CryptoError::Integrity))
        ));
    }

    #[test]
    fn metadata_overhead_is_140_per_parameterized_layer() {
        let dir = TempDir::new().unwrap();
        let (mut h, m, key) = setup(&dir);
        let pm = alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        assert_eq!(m.param_layer_count(), 2);
        assert_eq!(metadata_overhead(&pm), 2 * 140);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = TempDir::new().unwrap();
        let (mut h, m, key) = setup(&dir);
        let pm = alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
        let other_cfg = parse_config(
            "[net]\nchannels=1\nheight=6\nwidth=6\n\
             [convolutional]\nfilters=3\nsize=3\nstride=1\nactivation=leaky\n\
             [maxpool]\nsize=2\nstride=2\n\
             [connected]\noutput=3\nactivation=linear\n[softmax]",
        )
        .unwrap();
        let wrong: Model<f32> = Model::build(&other_cfg, 1).unwrap();
        assert!(matches!(
            mirror_out(&mut h, &pm, &wrong, 1, 1, &key),
            Err(MirrorError::ShapeMismatch(_))
        ));
        let _ = m;
    }

    #[test]
    fn crash_during_allocation_recovers_to_null_root() {
        let dir = TempDir::new().unwrap();
        let cfg = parse_config(CFG).unwrap();
        let key = Key128::generate().unwrap();

        let total = {
            let p = dir.path().join("probe.pm");
            let mut h = Heap::create_with_line_size(&p, 1 << 20, 16).unwrap();
            let m: Model<f32> = Model::build(&cfg, 42).unwrap();
            let before = h.micro_ops();
            alloc_mirror_model(&mut h, &m, &key, 0).unwrap();
            h.micro_ops() - before
        };

        // Crash at a spread of points; full image enumeration is
        // exponential in dirty lines, so sample adversaries per point.
        for k in (0..total).step_by(7) {
            let pk = dir.path().join(format!("h-{k}.pm"));
            let mut h = Heap::create_with_line_size(&pk, 1 << 20, 16).unwrap();
            let m: Model<f32> = Model::build(&cfg, 42).unwrap();
            h.crash_after(k);
            let _ = alloc_mirror_model(&mut h, &m, &key, 0);
            for (i, adv) in [
                crate::heap::Adversary::DropAll,
                crate::heap::Adversary::PersistAll,
                crate::heap::Adversary::Seeded(k),
            ]
            .into_iter()
            .enumerate()
            {
                let img = dir.path().join(format!("img-{k}-{i}.pm"));
                h.write_crash_image(&img, &adv).unwrap();
                let rec = Heap::open_with_line_size(&img, 16).unwrap();
                // Exactly pre- or post-state: either the whole structure
                // committed (root set, list walkable) or nothing did.
                if mirror_exists(&rec) {
                    let pm = open_mirror(&rec).unwrap();
                    assert_eq!(read_state(&rec, &pm).unwrap().iter, 0);
                } else {
                    assert_eq!(rec.alloc_head(), 0, "crash at {k} leaked allocations");
                }
            }
        }
    }
}
