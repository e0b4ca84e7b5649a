//! Encrypted, byte-addressable training data in the persistent heap.
//!
//! A dataset is transformed once into a persistent matrix: one envelope
//! per row holding `features ‖ one-hot label` as little-endian f32, so a
//! training batch decrypts exactly the rows it samples. Loading runs in
//! batches of rows, one transaction each, with a progress record in root
//! slot 7; a crash mid-load resumes from the last committed batch without
//! duplicating rows. Root slot 1 is set only by the final transaction,
//! after which the progress record is cleared.
//!
//! Head node: `rows u64 ‖ cols u64 ‖ classes u64 ‖ rows × { env_offset
//! u64, env_len u64 }`. Progress node: `rows u64 ‖ cols u64 ‖ classes
//! u64 ‖ head u64 ‖ rows_done u64`. References file-absolute, 0 = null.
//!
//! Source files are IDX (big-endian magic 0x803 for u8 images, 0x801 for
//! u8 labels; pixels normalized to [0,1] by /255) or CSV rows
//! `label,v0,v1,...` whose values are taken as already-normalized floats.

use std::cell::Cell;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::envelope::{self, CryptoError, Envelope, Key128, ENVELOPE_OVERHEAD};
use crate::heap::{Heap, HeapError, PmRef, ROOT_DATA, ROOT_DATA_PROGRESS};
use crate::nn::Batch;
use crate::rng::SplitMix64;

const PROGRESS_NODE_LEN: u64 = 40;
/// Rows per loading transaction.
pub const LOAD_TXN_ROWS: usize = 1024;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("i/o reading dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error("persistent data already loaded")]
    AlreadyLoaded,
    #[error("no persistent data in this heap")]
    Missing,
    #[error("corrupt persistent matrix: {0}")]
    Corrupt(String),
    #[error("partial load does not match this dataset: {0}")]
    ResumeMismatch(String),
    #[error("batch size {0} exceeds {1} rows")]
    BatchTooLarge(usize, u64),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Csv,
}

/// Where training data comes from; labels path is unused for CSV.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    pub format: DataFormat,
    pub classes: usize,
}

/// Parsed, normalized dataset in volatile memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    /// rows × cols, already in [0,1].
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn load(src: &DatasetSource) -> Result<Dataset> {
        match src.format {
            DataFormat::Idx => {
                let labels = src
                    .labels
                    .as_ref()
                    .ok_or_else(|| DataError::Parse("IDX datasets need a labels file".into()))?;
                load_idx(&src.images, labels, src.classes)
            }
            DataFormat::Csv => load_csv(&src.images, src.classes),
        }
    }

    /// Plaintext for one row: features ‖ one-hot label, f32 little-endian.
    pub fn row_plaintext(&self, row: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.row_plain_len());
        for v in &self.features[row * self.cols..(row + 1) * self.cols] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let label = self.labels[row] as usize;
        for c in 0..self.classes {
            let v: f32 = if c == label { 1.0 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn row_plain_len(&self) -> usize {
        4 * (self.cols + self.classes)
    }
}

fn read_be_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// IDX image + label pair (MNIST layout).
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(images)?);
    if read_be_u32(&mut f)? != 0x0000_0803 {
        return Err(DataError::Parse(format!(
            "{}: bad image magic",
            images.display()
        )));
    }
    let rows = read_be_u32(&mut f)? as usize;
    let h = read_be_u32(&mut f)? as usize;
    let w = read_be_u32(&mut f)? as usize;
    let cols = h * w;
    let mut pixels = vec![0u8; rows * cols];
    f.read_exact(&mut pixels)?;

    let mut f = std::io::BufReader::new(std::fs::File::open(labels)?);
    if read_be_u32(&mut f)? != 0x0000_0801 {
        return Err(DataError::Parse(format!(
            "{}: bad label magic",
            labels.display()
        )));
    }
    let n_labels = read_be_u32(&mut f)? as usize;
    if n_labels != rows {
        return Err(DataError::Parse(format!(
            "{rows} images but {n_labels} labels"
        )));
    }
    let mut lab = vec![0u8; rows];
    f.read_exact(&mut lab)?;
    if let Some(&bad) = lab.iter().find(|&&l| l as usize >= classes) {
        return Err(DataError::Parse(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset {
        rows,
        cols,
        classes,
        features,
        labels: lab,
    })
}

/// CSV rows `label,v0,v1,...`; the column count is fixed by the first row.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut cols = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let label: u8 =
            parts.next().unwrap().trim().parse().map_err(|_| {
                DataError::Parse(format!("{}:{}: bad label", path.display(), i + 1))
            })?;
        if label as usize >= classes {
            return Err(DataError::Parse(format!(
                "{}:{}: label {label} out of range for {classes} classes",
                path.display(),
                i + 1
            )));
        }
        let row: Vec<f32> = parts
            .map(|p| p.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DataError::Parse(format!("{}:{}: bad value", path.display(), i + 1)))?;
        if cols == 0 {
            cols = row.len();
            if cols == 0 {
                return Err(DataError::Parse("rows need at least one feature".into()));
            }
        } else if row.len() != cols {
            return Err(DataError::Parse(format!(
                "{}:{}: {} values, expected {cols}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        features.extend_from_slice(&row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::Parse("empty dataset".into()));
    }
    Ok(Dataset {
        rows: labels.len(),
        cols,
        classes,
        features,
        labels,
    })
}

/// Volatile index of the persistent matrix.
#[derive(Debug)]
pub struct PmMatrix {
    pub head: PmRef,
    pub rows: u64,
    pub cols: u64,
    pub classes: u64,
    row_refs: Vec<PmRef>,
    /// Envelope reads performed through this index; instrumentation.
    reads: Cell<u64>,
}

impl PmMatrix {
    pub fn envelope_reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn row_ref(&self, row: usize) -> PmRef {
        self.row_refs[row]
    }
}

pub fn pm_data_exists(h: &Heap) -> bool {
    matches!(h.root(ROOT_DATA), Ok(Some(_)))
}

fn enc_ref(h: &Heap, offset: u64) -> u64 {
    h.main_offset() + offset
}

fn dec_ref(h: &Heap, raw: u64) -> Result<u64> {
    if raw == 0 || raw < h.main_offset() || raw >= h.main_offset() + h.region_size() {
        return Err(DataError::Corrupt(format!("bad reference {raw:#x}")));
    }
    Ok(raw - h.main_offset())
}

fn head_node_len(rows: u64) -> u64 {
    24 + rows * 16
}

/// Encrypt `ds` into the heap, `txn_rows` rows per transaction. Resumes
/// a previous interrupted load of the same-shaped dataset; errors if the
/// heap already holds a completed matrix.
pub fn load_to_pm(h: &mut Heap, ds: &Dataset, key: &Key128, txn_rows: usize) -> Result<PmMatrix> {
    if pm_data_exists(h) {
        return Err(DataError::AlreadyLoaded);
    }
    assert!(txn_rows > 0);
    let plain_len = ds.row_plain_len() as u64;
    let env_len = plain_len + ENVELOPE_OVERHEAD as u64;

    // Resume or start: the progress node pins geometry and rows committed.
    let (head, progress, start_row) = match h.root(ROOT_DATA_PROGRESS)? {
        Some(off) => {
            let progress = PmRef::new(off, PROGRESS_NODE_LEN);
            let raw = h.raw_read(&progress)?;
            let rows = u64::from_le_bytes(raw[0..8].try_into().unwrap());
            let cols = u64::from_le_bytes(raw[8..16].try_into().unwrap());
            let classes = u64::from_le_bytes(raw[16..24].try_into().unwrap());
            let head_abs = u64::from_le_bytes(raw[24..32].try_into().unwrap());
            let done = u64::from_le_bytes(raw[32..40].try_into().unwrap());
            if (rows, cols, classes) != (ds.rows as u64, ds.cols as u64, ds.classes as u64) {
                return Err(DataError::ResumeMismatch(format!(
                    "heap holds a partial {rows}x{cols}/{classes} load, dataset is {}x{}/{}",
                    ds.rows, ds.cols, ds.classes
                )));
            }
            let head = PmRef::new(dec_ref(h, head_abs)?, head_node_len(rows));
            (head, progress, done as usize)
        }
        None => {
            h.begin_txn()?;
            let head = h.alloc(head_node_len(ds.rows as u64))?;
            let mut meta = Vec::with_capacity(24);
            meta.extend_from_slice(&(ds.rows as u64).to_le_bytes());
            meta.extend_from_slice(&(ds.cols as u64).to_le_bytes());
            meta.extend_from_slice(&(ds.classes as u64).to_le_bytes());
            h.txn_store(&head.slice(0, 24), &meta)?;
            let progress = h.alloc(PROGRESS_NODE_LEN)?;
            let mut prog = meta.clone();
            prog.extend_from_slice(&enc_ref(h, head.offset).to_le_bytes());
            prog.extend_from_slice(&0u64.to_le_bytes());
            h.txn_store(&progress, &prog)?;
            h.set_root(ROOT_DATA_PROGRESS, Some(progress.offset))?;
            h.end_txn()?;
            (head, progress, 0)
        }
    };

    let mut row = start_row;
    while row < ds.rows {
        let end = (row + txn_rows).min(ds.rows);
        h.begin_txn()?;
        for r in row..end {
            let env = h.alloc(env_len)?;
            let sealed = envelope::encrypt(key, &ds.row_plaintext(r))?;
            h.txn_store(&env, &sealed.to_bytes())?;
            let mut entry = Vec::with_capacity(16);
            entry.extend_from_slice(&enc_ref(h, env.offset).to_le_bytes());
            entry.extend_from_slice(&env_len.to_le_bytes());
            h.txn_store(&head.slice(24 + r as u64 * 16, 16), &entry)?;
        }
        h.txn_store(&progress.slice(32, 8), &(end as u64).to_le_bytes())?;
        h.end_txn()?;
        row = end;
    }

    h.begin_txn()?;
    h.set_root(ROOT_DATA, Some(head.offset))?;
    h.set_root(ROOT_DATA_PROGRESS, None)?;
    h.end_txn()?;

    open_pm_data(h)
}

/// Walk the persistent matrix from root slot 1.
pub fn open_pm_data(h: &Heap) -> Result<PmMatrix> {
    let off = h.root(ROOT_DATA)?.ok_or(DataError::Missing)?;
    let meta = h.raw_read(&PmRef::new(off, 24))?;
    let rows = u64::from_le_bytes(meta[0..8].try_into().unwrap());
    let cols = u64::from_le_bytes(meta[8..16].try_into().unwrap());
    let classes = u64::from_le_bytes(meta[16..24].try_into().unwrap());
    if rows == 0 || cols == 0 || classes == 0 || rows.saturating_mul(16) > h.region_size() {
        return Err(DataError::Corrupt(format!(
            "matrix head {rows}x{cols}/{classes}"
        )));
    }
    let head = PmRef::new(off, head_node_len(rows));
    let table = h.raw_read(&head)?;
    let plain_len = 4 * (cols + classes);
    let mut row_refs = Vec::with_capacity(rows as usize);
    for r in 0..rows as usize {
        let base = 24 + r * 16;
        let env_abs = u64::from_le_bytes(table[base..base + 8].try_into().unwrap());
        let env_len = u64::from_le_bytes(table[base + 8..base + 16].try_into().unwrap());
        if env_len != plain_len + ENVELOPE_OVERHEAD as u64 {
            return Err(DataError::Corrupt(format!(
                "row {r}: envelope {env_len} bytes, expected {}",
                plain_len + ENVELOPE_OVERHEAD as u64
            )));
        }
        row_refs.push(PmRef::new(dec_ref(h, env_abs)?, env_len));
    }
    Ok(PmMatrix {
        head,
        rows,
        cols,
        classes,
        row_refs,
        reads: Cell::new(0),
    })
}

/// Decrypt one row into (features, label one-hot).
fn decrypt_row(h: &Heap, dm: &PmMatrix, key: &Key128, row: usize) -> Result<Vec<f32>> {
    let raw = h.raw_read(&dm.row_refs[row])?;
    dm.reads.set(dm.reads.get() + 1);
    let env = Envelope::from_bytes(&raw)?;
    let plain = envelope::decrypt(key, &env)?;
    Ok(plain
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Sample `batch_size` rows uniformly with replacement via `rng`,
/// decrypt them, and split back into inputs and labels.
pub fn decrypt_batch(
    h: &Heap,
    dm: &PmMatrix,
    key: &Key128,
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<Batch<f32>> {
    if batch_size as u64 > dm.rows {
        return Err(DataError::BatchTooLarge(batch_size, dm.rows));
    }
    let cols = dm.cols as usize;
    let classes = dm.classes as usize;
    let mut inputs = Vec::with_capacity(batch_size * cols);
    let mut labels = Vec::with_capacity(batch_size * classes);
    for _ in 0..batch_size {
        let row = rng.index(dm.rows as usize);
        let values = decrypt_row(h, dm, key, row)?;
        inputs.extend_from_slice(&values[..cols]);
        labels.extend_from_slice(&values[cols..]);
    }
    Batch::new(inputs, labels, batch_size, cols, classes)
        .map_err(|e| DataError::Corrupt(e.to_string()))
}

/// Decrypt every row in order; test and inference support.
pub fn decrypt_all(h: &Heap, dm: &PmMatrix, key: &Key128) -> Result<(Vec<f32>, Vec<u8>)> {
    let cols = dm.cols as usize;
    let mut features = Vec::with_capacity(dm.rows as usize * cols);
    let mut labels = Vec::with_capacity(dm.rows as usize);
    for r in 0..dm.rows as usize {
        let values = decrypt_row(h, dm, key, r)?;
        features.extend_from_slice(&values[..cols]);
        let onehot = &values[cols..];
        let label = onehot
            .iter()
            .position(|&v| v == 1.0)
            .ok_or_else(|| DataError::Corrupt(format!("row {r}: no one-hot label")))?;
        labels.push(label as u8);
    }
    Ok((features, labels))
}
