//! Byte-addressable persistent memory emulated over a memory-mapped file.
//!
//! The file is split into a 4 KiB header and two equal regions, `main` and
//! `back`. All stores land in the mapping immediately (so a killed process
//! leaves the file holding the full volatile view), while a cache-line
//! granular crash model tracks which lines would actually be durable after
//! a power failure: a line is durable once it has been flushed and a fence
//! has retired. Crash images are generated adversarially — any dirty line
//! may persist early (cache eviction) and any flushed-but-unfenced line may
//! be dropped.
//!
//! File layout (little-endian):
//!
//! | bytes    | field                                  |
//! |----------|----------------------------------------|
//! | 0–7      | magic `PLINIUSH`                       |
//! | 8–11     | version = 1                            |
//! | 12       | state flag (0 idle, 1 mutating, 2 copying) |
//! | 13–15    | padding                                |
//! | 16–23    | region size                            |
//! | 24–31    | main offset (4096-aligned)             |
//! | 32–39    | back offset = main offset + region size |
//! | 40–47    | allocation head                        |
//! | 48–111   | root table, 8 × 8-byte refs, 0 = null  |
//! | 128–199  | committed snapshot of bytes 40–111     |
//!
//! Bytes 40–111 are the mutable header fields; they participate in the
//! transaction protocol exactly like main-region data, with the snapshot
//! at 128 playing the role of their back copy. Root-table entries and
//! other persisted references hold file-absolute offsets so that 0 can
//! mean null even though the first allocation sits at main offset 0.

use memmap2::MmapMut;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const HEAP_MAGIC: [u8; 8] = *b"PLINIUSH";
pub const HEAP_VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 4096;
pub const MIN_REGION_SIZE: u64 = 4096;
pub const ROOT_SLOTS: usize = 8;
pub const DEFAULT_LINE_SIZE: u64 = 64;

pub(crate) const OFF_STATE: u64 = 12;
pub(crate) const OFF_ALLOC_HEAD: u64 = 40;
pub(crate) const OFF_ROOTS: u64 = 48;
/// Mutable header fields covered by the transaction protocol.
pub(crate) const META_OFF: u64 = 40;
pub(crate) const META_LEN: u64 = 72;
/// Committed twin of the mutable header fields.
pub(crate) const META_SHADOW_OFF: u64 = 128;

/// Root-table slot conventions.
pub const ROOT_MODEL: usize = 0;
pub const ROOT_DATA: usize = 1;
pub const ROOT_SPS_ARRAY: usize = 2;
pub const ROOT_DATA_PROGRESS: usize = 7;

#[derive(Debug, Error)]
pub enum HeapError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("refusing to create heap over existing non-empty file {0}")]
    FileExists(PathBuf),
    #[error("region size {0} below minimum {MIN_REGION_SIZE}")]
    RegionTooSmall(u64),
    #[error("bad magic: not a heap file")]
    BadMagic,
    #[error("unsupported heap version {0}")]
    BadVersion(u32),
    #[error("corrupt state flag {0}")]
    CorruptState(u8),
    #[error("corrupt header geometry")]
    CorruptGeometry,
    #[error("heap file truncated: {got} bytes, header demands {want}")]
    Truncated { got: u64, want: u64 },
    #[error("out of persistent memory: need {need} bytes, {avail} available")]
    OutOfMemory { need: u64, avail: u64 },
    #[error("reference out of bounds: offset {offset} len {len}, region size {region}")]
    OutOfBounds { offset: u64, len: u64, region: u64 },
    #[error("operation requires an open transaction")]
    NoTransaction,
    #[error("transaction already open")]
    NestedTransaction,
    #[error("injected crash")]
    InjectedCrash,
    #[error("heap handle is poisoned by an injected crash")]
    Poisoned,
    #[error("root slot {0} out of range")]
    BadRootSlot(usize),
}

pub type Result<T> = std::result::Result<T, HeapError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeapState {
    Idle = 0,
    Mutating = 1,
    Copying = 2,
}

impl HeapState {
    fn from_byte(b: u8) -> Result<HeapState> {
        match b {
            0 => Ok(HeapState::Idle),
            1 => Ok(HeapState::Mutating),
            2 => Ok(HeapState::Copying),
            other => Err(HeapError::CorruptState(other)),
        }
    }
}

/// Reference to an allocated span of the main region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmRef {
    /// Byte offset relative to the start of the main region.
    pub offset: u64,
    pub len: u64,
}

impl PmRef {
    pub fn new(offset: u64, len: u64) -> PmRef {
        PmRef { offset, len }
    }

    /// Sub-span of this reference.
    pub fn slice(&self, at: u64, len: u64) -> PmRef {
        debug_assert!(at + len <= self.len);
        PmRef {
            offset: self.offset + at,
            len,
        }
    }
}

/// How a crash image resolves each dirty cache line.
#[derive(Debug, Clone)]
pub enum Adversary {
    /// Drop everything unfenced: the image is the state at the last fence.
    DropAll,
    /// Persist everything: the image is the current volatile view.
    PersistAll,
    /// Deterministic pseudo-random pick per line.
    Seeded(u64),
    /// Mixed-radix index into the exhaustive enumeration,
    /// 0 ..= crash_image_count()-1.
    Pick(u128),
}

/// Per-line dirt tracking. `durable` is the content at the last fence;
/// `flushed` is the snapshot captured by an unfenced flush; `pending`
/// marks a store since the last flush of this line.
struct LineState {
    durable: Box<[u8]>,
    flushed: Option<Box<[u8]>>,
    pending: bool,
}

impl LineState {
    /// Possible durable contents of this line at a crash, oldest first.
    /// The current volatile content is always a candidate (eviction).
    fn candidate_count(&self) -> u32 {
        // durable + optional intermediate flushed snapshot + volatile
        if self.flushed.is_some() && self.pending {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeapStats {
    pub stores: u64,
    pub flushes: u64,
    pub fences: u64,
    pub txns_committed: u64,
    pub bytes_stored: u64,
}

pub(crate) struct TxnLog {
    /// Coalesced modified ranges of the main region, start → len.
    pub ranges: BTreeMap<u64, u64>,
    /// True when the mutable header fields were touched.
    pub meta_dirty: bool,
}

impl TxnLog {
    pub(crate) fn new() -> TxnLog {
        TxnLog {
            ranges: BTreeMap::new(),
            meta_dirty: false,
        }
    }

    /// Insert a range, merging everything it overlaps or abuts.
    pub fn log(&mut self, mut start: u64, len: u64) {
        let mut end = start + len;
        // Absorb the previous range if it reaches `start`.
        if let Some((&s, &l)) = self.ranges.range(..=start).next_back() {
            if s + l >= start {
                start = s;
                end = end.max(s + l);
                self.ranges.remove(&s);
            }
        }
        // Absorb following ranges swallowed by [start, end).
        loop {
            let next = self.ranges.range(start..=end).next().map(|(&s, &l)| (s, l));
            match next {
                Some((s, l)) => {
                    end = end.max(s + l);
                    self.ranges.remove(&s);
                }
                None => break,
            }
        }
        self.ranges.insert(start, end - start);
    }

    pub fn entry_count(&self) -> usize {
        self.ranges.len()
    }
}

pub struct Heap {
    map: MmapMut,
    path: PathBuf,
    file_len: u64,
    pub(crate) region_size: u64,
    pub(crate) main_offset: u64,
    pub(crate) back_offset: u64,
    line_size: u64,
    /// Dirty-line tracking keyed by line index over the whole file.
    dirty: BTreeMap<u64, LineState>,
    pub(crate) txn: Option<TxnLog>,
    /// Volatile caches of the mutable header fields.
    pub(crate) alloc_head: u64,
    roots: [u64; ROOT_SLOTS],
    stats: HeapStats,
    /// Crash injection: error out of the micro-op with this ordinal.
    crash_at: Option<u64>,
    micro_ops: u64,
    poisoned: bool,
}

impl Heap {
    // ------------------------------------------------------------------
    // lifecycle
    // ------------------------------------------------------------------

    /// Create a fresh heap file: header written, main and back zero-filled
    /// and identical, state idle. The file is grown to its full size.
    pub fn create(path: &Path, region_size: u64) -> Result<Heap> {
        Heap::create_with_line_size(path, region_size, DEFAULT_LINE_SIZE)
    }

    pub fn create_with_line_size(path: &Path, region_size: u64, line_size: u64) -> Result<Heap> {
        if region_size < MIN_REGION_SIZE {
            return Err(HeapError::RegionTooSmall(region_size));
        }
        assert!(line_size.is_power_of_two() && line_size >= 8);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .open(path)?;
        if file.metadata()?.len() != 0 {
            return Err(HeapError::FileExists(path.to_path_buf()));
        }
        let main_offset = HEADER_SIZE;
        let back_offset = main_offset + region_size;
        let file_len = back_offset + region_size;
        file.set_len(file_len)?;
        let mut map = unsafe { MmapMut::map_mut(&file)? };
        map[0..8].copy_from_slice(&HEAP_MAGIC);
        map[8..12].copy_from_slice(&HEAP_VERSION.to_le_bytes());
        map[OFF_STATE as usize] = HeapState::Idle as u8;
        map[16..24].copy_from_slice(&region_size.to_le_bytes());
        map[24..32].copy_from_slice(&main_offset.to_le_bytes());
        map[32..40].copy_from_slice(&back_offset.to_le_bytes());
        // alloc head, roots and their committed twin start zeroed.
        map.flush()?;
        Ok(Heap {
            map,
            path: path.to_path_buf(),
            file_len,
            region_size,
            main_offset,
            back_offset,
            line_size,
            dirty: BTreeMap::new(),
            txn: None,
            alloc_head: 0,
            roots: [0; ROOT_SLOTS],
            stats: HeapStats::default(),
            crash_at: None,
            micro_ops: 0,
            poisoned: false,
        })
    }

    /// Open an existing heap and run crash recovery. Returns with the
    /// state flag idle.
    pub fn open(path: &Path) -> Result<Heap> {
        Heap::open_with_line_size(path, DEFAULT_LINE_SIZE)
    }

    pub fn open_with_line_size(path: &Path, line_size: u64) -> Result<Heap> {
        let mut h = Heap::open_no_recover(path, line_size)?;
        h.recover()?;
        Ok(h)
    }

    /// Open without recovering; the caller must run `recover` before any
    /// transaction. Used by tests that crash-inject during recovery.
    pub fn open_no_recover(path: &Path, line_size: u64) -> Result<Heap> {
        assert!(line_size.is_power_of_two() && line_size >= 8);
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_SIZE {
            return Err(HeapError::Truncated {
                got: file_len,
                want: HEADER_SIZE,
            });
        }
        let map = unsafe { MmapMut::map_mut(&file)? };
        if map[0..8] != HEAP_MAGIC {
            return Err(HeapError::BadMagic);
        }
        let version = u32::from_le_bytes(map[8..12].try_into().unwrap());
        if version != HEAP_VERSION {
            return Err(HeapError::BadVersion(version));
        }
        HeapState::from_byte(map[OFF_STATE as usize])?;
        let region_size = u64::from_le_bytes(map[16..24].try_into().unwrap());
        let main_offset = u64::from_le_bytes(map[24..32].try_into().unwrap());
        let back_offset = u64::from_le_bytes(map[32..40].try_into().unwrap());
        if main_offset < HEADER_SIZE
            || main_offset % 4096 != 0
            || back_offset != main_offset + region_size
            || region_size < MIN_REGION_SIZE
        {
            return Err(HeapError::CorruptGeometry);
        }
        let want = back_offset + region_size;
        if file_len < want {
            return Err(HeapError::Truncated {
                got: file_len,
                want,
            });
        }
        let mut h = Heap {
            map,
            path: path.to_path_buf(),
            file_len,
            region_size,
            main_offset,
            back_offset,
            line_size,
            dirty: BTreeMap::new(),
            txn: None,
            alloc_head: 0,
            roots: [0; ROOT_SLOTS],
            stats: HeapStats::default(),
            crash_at: None,
            micro_ops: 0,
            poisoned: false,
        };
        h.reload_meta_cache();
        Ok(h)
    }

    pub(crate) fn reload_meta_cache(&mut self) {
        let a = OFF_ALLOC_HEAD as usize;
        self.alloc_head = u64::from_le_bytes(self.map[a..a + 8].try_into().unwrap());
        for slot in 0..ROOT_SLOTS {
            let at = OFF_ROOTS as usize + slot * 8;
            self.roots[slot] = u64::from_le_bytes(self.map[at..at + 8].try_into().unwrap());
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn region_size(&self) -> u64 {
        self.region_size
    }

    pub fn main_offset(&self) -> u64 {
        self.main_offset
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn state(&self) -> HeapState {
        HeapState::from_byte(self.map[OFF_STATE as usize]).expect("validated on open")
    }

    pub fn stats(&self) -> HeapStats {
        self.stats
    }

    pub(crate) fn bump_txn_count(&mut self) {
        self.stats.txns_committed += 1;
    }

    pub fn alloc_head(&self) -> u64 {
        self.alloc_head
    }

    pub fn in_txn(&self) -> bool {
        self.txn.is_some()
    }

    /// Coalesced entry count of the open transaction's range log.
    pub fn txn_log_entries(&self) -> usize {
        self.txn.as_ref().map(|t| t.entry_count()).unwrap_or(0)
    }

    /// Arrange for the micro-op with ordinal `nth` (counted from now, over
    /// stores, flushes and fences) to fail with `InjectedCrash`, leaving
    /// the handle poisoned at exactly that point.
    pub fn crash_after(&mut self, nth: u64) {
        self.crash_at = Some(self.micro_ops + nth);
    }

    pub fn clear_crash_injection(&mut self) {
        self.crash_at = None;
    }

    pub fn micro_ops(&self) -> u64 {
        self.micro_ops
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    fn tick(&mut self) -> Result<()> {
        if self.poisoned {
            return Err(HeapError::Poisoned);
        }
        if self.crash_at == Some(self.micro_ops) {
            self.poisoned = true;
            return Err(HeapError::InjectedCrash);
        }
        self.micro_ops += 1;
        Ok(())
    }

    // ------------------------------------------------------------------
    // raw store / load with line tracking
    // ------------------------------------------------------------------

    fn line_span(&self, file_off: u64, len: u64) -> std::ops::Range<u64> {
        let first = file_off / self.line_size;
        let last = (file_off + len + self.line_size - 1) / self.line_size;
        first..last
    }

    fn line_bytes(&self, line: u64) -> &[u8] {
        let start = line * self.line_size;
        let end = (start + self.line_size).min(self.file_len);
        &self.map[start as usize..end as usize]
    }

    /// Low-level tracked store at an absolute file offset.
    pub(crate) fn store_at(&mut self, file_off: u64, bytes: &[u8]) -> Result<()> {
        self.tick()?;
        debug_assert!(file_off + bytes.len() as u64 <= self.file_len);
        for line in self.line_span(file_off, bytes.len() as u64) {
            if !self.dirty.contains_key(&line) {
                let snapshot: Box<[u8]> = self.line_bytes(line).into();
                self.dirty.insert(
                    line,
                    LineState {
                        durable: snapshot,
                        flushed: None,
                        pending: false,
                    },
                );
            }
            self.dirty.get_mut(&line).unwrap().pending = true;
        }
        self.map[file_off as usize..file_off as usize + bytes.len()].copy_from_slice(bytes);
        self.stats.stores += 1;
        self.stats.bytes_stored += bytes.len() as u64;
        Ok(())
    }

    /// Move every pending line overlapping the span into the
    /// flushed-unfenced set, capturing its current content.
    pub(crate) fn flush_at(&mut self, file_off: u64, len: u64) -> Result<()> {
        self.tick()?;
        for line in self.line_span(file_off, len) {
            let content: Option<Box<[u8]>> =
                if self.dirty.get(&line).map(|st| st.pending).unwrap_or(false) {
                    Some(self.line_bytes(line).into())
                } else {
                    None
                };
            if let Some(content) = content {
                let st = self.dirty.get_mut(&line).unwrap();
                st.flushed = Some(content);
                st.pending = false;
            }
        }
        self.stats.flushes += 1;
        Ok(())
    }

    /// Persistence fence: every flushed-unfenced line becomes durable.
    pub fn fence(&mut self) -> Result<()> {
        self.tick()?;
        let lines: Vec<u64> = self.dirty.keys().copied().collect();
        for line in lines {
            let st = self.dirty.get_mut(&line).unwrap();
            if let Some(content) = st.flushed.take() {
                if st.pending {
                    st.durable = content;
                } else {
                    self.dirty.remove(&line);
                }
            }
        }
        self.stats.fences += 1;
        Ok(())
    }

    fn check_bounds(&self, r: &PmRef) -> Result<()> {
        if r.offset + r.len > self.region_size {
            return Err(HeapError::OutOfBounds {
                offset: r.offset,
                len: r.len,
                region: self.region_size,
            });
        }
        Ok(())
    }

    /// Unlogged store into the main region. This is the internal path —
    /// transactional code must go through `txn_store`, which also logs
    /// and flushes the range.
    pub fn raw_store(&mut self, r: &PmRef, bytes: &[u8]) -> Result<()> {
        self.check_bounds(r)?;
        assert_eq!(r.len as usize, bytes.len());
        self.store_at(self.main_offset + r.offset, bytes)
    }

    /// Current volatile-view contents of the span.
    pub fn raw_read(&self, r: &PmRef) -> Result<Vec<u8>> {
        self.check_bounds(r)?;
        let at = (self.main_offset + r.offset) as usize;
        Ok(self.map[at..at + r.len as usize].to_vec())
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let raw = self.raw_read(&PmRef::new(offset, 8))?;
        Ok(u64::from_le_bytes(raw.try_into().unwrap()))
    }

    pub fn flush_range(&mut self, r: &PmRef) -> Result<()> {
        self.check_bounds(r)?;
        self.flush_at(self.main_offset + r.offset, r.len)
    }

    /// Direct view of the back region; diagnostics and tests.
    pub fn read_back(&self, offset: u64, len: u64) -> &[u8] {
        let at = (self.back_offset + offset) as usize;
        &self.map[at..at + len as usize]
    }

    /// Direct view of the main region; diagnostics and tests.
    pub fn read_main(&self, offset: u64, len: u64) -> &[u8] {
        let at = (self.main_offset + offset) as usize;
        &self.map[at..at + len as usize]
    }

    // ------------------------------------------------------------------
    // allocation and roots
    // ------------------------------------------------------------------

    /// Bump-allocate inside the current transaction. The returned span is
    /// 8-byte aligned; the advance of the allocation head commits or rolls
    /// back with the transaction.
    pub fn alloc(&mut self, len: u64) -> Result<PmRef> {
        if self.txn.is_none() {
            return Err(HeapError::NoTransaction);
        }
        assert!(len > 0, "zero-length allocation");
        let padded = (len + 7) & !7;
        if self.alloc_head + padded > self.region_size {
            return Err(HeapError::OutOfMemory {
                need: padded,
                avail: self.region_size - self.alloc_head,
            });
        }
        let offset = self.alloc_head;
        let new_head = self.alloc_head + padded;
        self.store_meta_u64(OFF_ALLOC_HEAD, new_head)?;
        self.alloc_head = new_head;
        Ok(PmRef::new(offset, len))
    }

    /// Read a root slot as a main-region offset, `None` when null.
    pub fn root(&self, slot: usize) -> Result<Option<u64>> {
        if slot >= ROOT_SLOTS {
            return Err(HeapError::BadRootSlot(slot));
        }
        let abs = self.roots[slot];
        Ok(if abs == 0 {
            None
        } else {
            Some(abs - self.main_offset)
        })
    }

    /// Set a root slot inside the current transaction. Stored values are
    /// file-absolute so 0 remains an unambiguous null.
    pub fn set_root(&mut self, slot: usize, target: Option<u64>) -> Result<()> {
        if slot >= ROOT_SLOTS {
            return Err(HeapError::BadRootSlot(slot));
        }
        if self.txn.is_none() {
            return Err(HeapError::NoTransaction);
        }
        let abs = match target {
            Some(offset) => {
                debug_assert!(offset < self.region_size);
                self.main_offset + offset
            }
            None => 0,
        };
        self.store_meta_u64(OFF_ROOTS + slot as u64 * 8, abs)?;
        self.roots[slot] = abs;
        Ok(())
    }

    /// Tracked store into the mutable header fields, logged so the commit
    /// phase copies them into their shadow.
    fn store_meta_u64(&mut self, file_off: u64, value: u64) -> Result<()> {
        debug_assert!(file_off >= META_OFF && file_off + 8 <= META_OFF + META_LEN);
        self.store_at(file_off, &value.to_le_bytes())?;
        self.flush_at(file_off, 8)?;
        if let Some(txn) = self.txn.as_mut() {
            txn.meta_dirty = true;
        }
        Ok(())
    }

    /// Write the state flag and flush its line. Fencing is the caller's
    /// responsibility — the commit protocol is explicit about when the
    /// flag may become durable.
    pub(crate) fn store_state(&mut self, s: HeapState) -> Result<()> {
        self.store_at(OFF_STATE, &[s as u8])?;
        self.flush_at(OFF_STATE, 1)?;
        Ok(())
    }

    /// Copy a span of main into back (or the reverse), as tracked stores
    /// with flushes. Only differing line-sized chunks are written, which
    /// keeps recovery cheap on large heaps.
    pub(crate) fn copy_between_regions(
        &mut self,
        to_back: bool,
        offset: u64,
        len: u64,
    ) -> Result<()> {
        let (src_base, dst_base) = if to_back {
            (self.main_offset, self.back_offset)
        } else {
            (self.back_offset, self.main_offset)
        };
        let mut at = offset;
        let end = offset + len;
        while at < end {
            // Scan forward to the next differing chunk.
            let chunk = self.line_size.max(4096).min(end - at);
            let src = &self.map[(src_base + at) as usize..(src_base + at + chunk) as usize];
            let dst = &self.map[(dst_base + at) as usize..(dst_base + at + chunk) as usize];
            if src != dst {
                let bytes = src.to_vec();
                self.store_at(dst_base + at, &bytes)?;
                self.flush_at(dst_base + at, chunk)?;
            }
            at += chunk;
        }
        Ok(())
    }

    /// Copy the mutable header fields into their committed shadow
    /// (`to_shadow`) or restore them from it.
    pub(crate) fn copy_meta(&mut self, to_shadow: bool) -> Result<()> {
        let (src, dst) = if to_shadow {
            (META_OFF, META_SHADOW_OFF)
        } else {
            (META_SHADOW_OFF, META_OFF)
        };
        let bytes = self.map[src as usize..(src + META_LEN) as usize].to_vec();
        self.store_at(dst, &bytes)?;
        self.flush_at(dst, META_LEN)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // crash images
    // ------------------------------------------------------------------

    /// Number of distinct crash images reachable from the current dirt.
    pub fn crash_image_count(&self) -> u128 {
        self.dirty
            .values()
            .map(|st| st.candidate_count() as u128)
            .product()
    }

    /// Materialize the crash image selected by the adversary as a byte
    /// buffer (a complete heap file). The handle is unaffected.
    pub fn crash_image_bytes(&self, adversary: &Adversary) -> Vec<u8> {
        let mut image = self.map.to_vec();
        let mut pick_state = match adversary {
            Adversary::Seeded(seed) => Some(crate::rng::SplitMix64::new(*seed)),
            _ => None,
        };
        let mut radix_rest = match adversary {
            Adversary::Pick(i) => {
                debug_assert!(*i < self.crash_image_count().max(1));
                Some(*i)
            }
            _ => None,
        };
        for (line, st) in &self.dirty {
            let n = st.candidate_count();
            let choice = match adversary {
                Adversary::DropAll => 0,
                Adversary::PersistAll => n - 1,
                Adversary::Seeded(_) => {
                    let r = pick_state.as_mut().unwrap().next_u64();
                    (r % n as u64) as u32
                }
                Adversary::Pick(_) => {
                    let rest = radix_rest.as_mut().unwrap();
                    let c = (*rest % n as u128) as u32;
                    *rest /= n as u128;
                    c
                }
            };
            let start = (line * self.line_size) as usize;
            let end = ((line + 1) * self.line_size).min(self.file_len) as usize;
            match (choice, &st.flushed, st.pending) {
                (0, _, _) => image[start..end].copy_from_slice(&st.durable),
                (1, Some(f), true) => image[start..end].copy_from_slice(f),
                // Last candidate: keep the volatile content already in `image`.
                _ => {}
            }
        }
        image
    }

    /// Write the selected crash image to a new heap file.
    pub fn write_crash_image(&self, path: &Path, adversary: &Adversary) -> Result<()> {
        std::fs::write(path, self.crash_image_bytes(adversary))?;
        Ok(())
    }

    /// All reachable crash images. Panics if the enumeration would exceed
    /// `limit` images; fixtures are expected to stay small.
    pub fn enumerate_crash_images(&self, limit: u128) -> Vec<Vec<u8>> {
        let n = self.crash_image_count();
        assert!(n <= limit, "crash enumeration too large: {n} images");
        (0..n)
            .map(|i| self.crash_image_bytes(&Adversary::Pick(i)))
            .collect()
    }

    /// Snapshot of the full volatile view; test support.
    pub fn volatile_bytes(&self) -> Vec<u8> {
        self.map.to_vec()
    }
}

impl Drop for Heap {
    fn drop(&mut self) {
        // The mapping is shared, so the OS already owns every store; this
        // only hurries writeback along.
        let _ = self.map.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn heap_path(dir: &TempDir, name: &str) -> PathBuf {
        dir.path().join(name)
    }

    #[test]
    fn create_fresh_heap() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let h = Heap::create(&p, 1 << 20).unwrap();
        assert_eq!(h.state(), HeapState::Idle);
        assert_eq!(h.alloc_head(), 0);
        assert_eq!(h.root(0).unwrap(), None);
    }

    #[test]
    fn create_over_existing_file_fails() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        std::fs::write(&p, b"junk").unwrap();
        assert!(matches!(
            Heap::create(&p, 1 << 20),
            Err(HeapError::FileExists(_))
        ));
    }

    #[test]
    fn create_rejects_small_region() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        assert!(matches!(
            Heap::create(&p, 100),
            Err(HeapError::RegionTooSmall(100))
        ));
    }

    #[test]
    fn twin_regions_initialized_identically() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let h = Heap::create(&p, 8192).unwrap();
        assert_eq!(h.read_main(0, 8192), h.read_back(0, 8192));
        assert!(h.read_back(0, 8192).iter().all(|&b| b == 0));
    }

    #[test]
    fn open_rejects_bad_magic_and_truncation() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        Heap::create(&p, 4096).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw[0] = b'X';
        std::fs::write(&p, &raw).unwrap();
        assert!(matches!(Heap::open(&p), Err(HeapError::BadMagic)));

        raw[0] = b'P';
        std::fs::write(&p, &raw[..raw.len() - 100]).unwrap();
        assert!(matches!(Heap::open(&p), Err(HeapError::Truncated { .. })));
    }

    #[test]
    fn header_round_trips_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        {
            Heap::create(&p, 8192).unwrap();
        }
        let before = std::fs::read(&p).unwrap()[..HEADER_SIZE as usize].to_vec();
        {
            Heap::open(&p).unwrap();
        }
        let after = std::fs::read(&p).unwrap()[..HEADER_SIZE as usize].to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn store_then_read_back_same_bytes() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create(&p, 8192).unwrap();
        let r = PmRef::new(100, 5);
        h.raw_store(&r, b"hello").unwrap();
        assert_eq!(h.raw_read(&r).unwrap(), b"hello");
    }

    #[test]
    fn read_of_never_written_region_is_zero() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let h = Heap::create(&p, 8192).unwrap();
        assert_eq!(h.raw_read(&PmRef::new(4000, 64)).unwrap(), vec![0u8; 64]);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create(&p, 4096).unwrap();
        assert!(matches!(
            h.raw_store(&PmRef::new(4090, 10), &[0; 10]),
            Err(HeapError::OutOfBounds { .. })
        ));
        assert!(h.raw_read(&PmRef::new(4096, 1)).is_err());
    }

    #[test]
    fn fenced_flush_is_durable() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        let r = PmRef::new(0, 4);
        h.raw_store(&r, b"data").unwrap();
        h.flush_range(&r).unwrap();
        h.fence().unwrap();
        let img = h.crash_image_bytes(&Adversary::DropAll);
        assert_eq!(
            &img[HEADER_SIZE as usize..HEADER_SIZE as usize + 4],
            b"data"
        );
    }

    #[test]
    fn unfenced_store_may_or_may_not_persist() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        let r = PmRef::new(0, 4);
        h.raw_store(&r, b"data").unwrap();
        let dropped = h.crash_image_bytes(&Adversary::DropAll);
        let kept = h.crash_image_bytes(&Adversary::PersistAll);
        let at = HEADER_SIZE as usize;
        assert_eq!(&dropped[at..at + 4], &[0u8; 4]);
        assert_eq!(&kept[at..at + 4], b"data");
    }

    #[test]
    fn two_dirty_lines_enumerate_four_images() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        h.raw_store(&PmRef::new(0, 4), b"aaaa").unwrap();
        h.raw_store(&PmRef::new(64, 4), b"bbbb").unwrap();
        assert_eq!(h.crash_image_count(), 4);
        let images = h.enumerate_crash_images(16);
        assert_eq!(images.len(), 4);
        let distinct: std::collections::HashSet<Vec<u8>> = images.into_iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn fence_with_empty_flush_set_is_noop() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create(&p, 4096).unwrap();
        let before = h.crash_image_bytes(&Adversary::DropAll);
        h.fence().unwrap();
        let after = h.crash_image_bytes(&Adversary::DropAll);
        assert_eq!(before, after);
    }

    #[test]
    fn double_flush_and_double_fence_are_idempotent() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        let r = PmRef::new(32, 8);
        h.raw_store(&r, b"12345678").unwrap();
        h.flush_range(&r).unwrap();
        h.flush_range(&r).unwrap();
        h.fence().unwrap();
        h.fence().unwrap();
        let img = h.crash_image_bytes(&Adversary::DropAll);
        let at = (HEADER_SIZE + 32) as usize;
        assert_eq!(&img[at..at + 8], b"12345678");
        assert_eq!(h.crash_image_count(), 1);
    }

    #[test]
    fn store_flush_store_exposes_intermediate_state() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        let r = PmRef::new(0, 4);
        h.raw_store(&r, b"old!").unwrap();
        h.flush_range(&r).unwrap();
        h.raw_store(&r, b"new!").unwrap();
        // zero (durable), "old!" (flushed), "new!" (volatile)
        assert_eq!(h.crash_image_count(), 3);
        let at = HEADER_SIZE as usize;
        let contents: Vec<Vec<u8>> = h
            .enumerate_crash_images(8)
            .into_iter()
            .map(|img| img[at..at + 4].to_vec())
            .collect();
        assert!(contents.contains(&b"\0\0\0\0".to_vec()));
        assert!(contents.contains(&b"old!".to_vec()));
        assert!(contents.contains(&b"new!".to_vec()));
    }

    #[test]
    fn crash_images_are_line_granular_hybrids() {
        // Every enumerated image must equal either the durable or the
        // volatile content on each line — nothing else ever appears.
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        let durable_view = h.volatile_bytes();
        for i in 0..4u64 {
            let r = PmRef::new(i * 24, 8);
            h.raw_store(&r, &[0xA0 + i as u8; 8]).unwrap();
        }
        let volatile_view = h.volatile_bytes();
        for img in h.enumerate_crash_images(1 << 12) {
            for line in 0..(img.len() as u64 + 15) / 16 {
                let s = (line * 16) as usize;
                let e = (s + 16).min(img.len());
                let got = &img[s..e];
                assert!(
                    got == &durable_view[s..e] || got == &volatile_view[s..e],
                    "line {line} is neither durable nor volatile content"
                );
            }
        }
    }

    #[test]
    fn alloc_requires_transaction() {
        let dir = TempDir::new().unwrap();
        let p = heap_path(&dir, "h.pm");
        let mut h = Heap::create(&p, 4096).unwrap();
        assert!(matches!(h.alloc(100), Err(HeapError::NoTransaction)));
    }

    #[test]
    fn txn_log_coalesces() {
        let mut log = TxnLog::new();
        log.log(0, 10);
        log.log(10, 5); // adjacent
        assert_eq!(log.entry_count(), 1);
        log.log(100, 8);
        assert_eq!(log.entry_count(), 2);
        log.log(5, 120); // swallows both
        assert_eq!(log.entry_count(), 1);
        assert_eq!(log.ranges.get(&0), Some(&125));
        log.log(200, 4);
        log.log(198, 2); // abuts from below
        assert_eq!(log.ranges.get(&198), Some(&6));
    }
}
