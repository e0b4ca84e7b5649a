//! Durable transactions over the twin main/back regions.
//!
//! The commit protocol spends exactly four persistence fences per
//! transaction, independent of how much it stored:
//!
//! 1. `begin`: state → mutating, flush, fence.
//! 2. `end`: fence — every store-interposed flush becomes durable.
//! 3. `end`: state → copying, flush, fence. This is the commit point.
//! 4. `end`: copy every logged range main → back (and the mutable header
//!    fields into their shadow) with flushes, then fence. Only afterwards
//!    is the flag set back to idle, with an unfenced flush: if the idle
//!    flag persists at all, the back copy it vouches for is already
//!    durable, and if it does not, recovery simply re-copies.
//!
//! Recovery after a crash costs one additional fence. The range log is
//! volatile and lost with the crash, so recovery restores whole regions:
//! mutating → back wins, copying → main wins.

use crate::heap::{Heap, HeapError, HeapState, PmRef, Result, TxnLog, META_LEN};

impl Heap {
    /// Open a transaction. State flag is mutating and durable on return.
    pub fn begin_txn(&mut self) -> Result<()> {
        if self.txn.is_some() {
            return Err(HeapError::NestedTransaction);
        }
        self.store_state(HeapState::Mutating)?;
        self.fence()?; // fence 1
        self.txn = Some(TxnLog::new());
        Ok(())
    }

    /// Transactional store: write to main, log the range, flush the
    /// affected lines. No fence — that is end_txn's job.
    pub fn txn_store(&mut self, r: &PmRef, bytes: &[u8]) -> Result<()> {
        if self.txn.is_none() {
            return Err(HeapError::NoTransaction);
        }
        self.raw_store(r, bytes)?;
        self.flush_range(r)?;
        self.txn.as_mut().unwrap().log(r.offset, r.len);
        Ok(())
    }

    pub fn txn_store_u64(&mut self, offset: u64, value: u64) -> Result<()> {
        self.txn_store(&PmRef::new(offset, 8), &value.to_le_bytes())
    }

    /// Commit: after return every crash image recovers to the
    /// post-transaction state.
    pub fn end_txn(&mut self) -> Result<()> {
        let log = self.txn.take().ok_or(HeapError::NoTransaction)?;
        let commit = (|| -> Result<()> {
            self.fence()?; // fence 2: interposed flushes durable
            self.store_state(HeapState::Copying)?;
            self.fence()?; // fence 3: commit point
            for (&start, &len) in &log.ranges {
                self.copy_between_regions(true, start, len)?;
            }
            if log.meta_dirty {
                self.copy_meta(true)?;
            }
            self.fence()?; // fence 4: back copy durable
            self.store_state(HeapState::Idle)?;
            Ok(())
        })();
        if commit.is_err() {
            // Injected crash mid-commit: the handle is poisoned; the log
            // stays dropped because recovery never consults it.
            return commit;
        }
        self.bump_txn_count();
        Ok(())
    }

    /// Crash recovery. Idempotent; no-op on an idle heap.
    pub fn recover(&mut self) -> Result<()> {
        if self.txn.is_some() {
            return Err(HeapError::NestedTransaction);
        }
        match self.state() {
            HeapState::Idle => {}
            HeapState::Mutating => {
                // The interrupted transaction never committed: restore
                // main (and the header fields) from their snapshots.
                self.copy_between_regions(false, 0, self.region_size)?;
                self.copy_meta(false)?;
                self.fence()?;
                self.store_state(HeapState::Idle)?;
            }
            HeapState::Copying => {
                // Commit point passed: finish propagating main into back.
                self.copy_between_regions(true, 0, self.region_size)?;
                self.copy_meta(true)?;
                self.fence()?;
                self.store_state(HeapState::Idle)?;
            }
        }
        self.reload_meta_cache();
        if self.alloc_head > self.region_size {
            return Err(HeapError::CorruptGeometry);
        }
        let _ = META_LEN; // layout constant shared with heap.rs
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::{Adversary, HEADER_SIZE};
    use std::path::PathBuf;
    use tempfile::TempDir;

    fn path(dir: &TempDir, name: &str) -> PathBuf {
        dir.path().join(name)
    }

    /// Write image bytes to a file and open it (recovery included).
    fn open_image(dir: &TempDir, image: &[u8], n: usize) -> Heap {
        let p = dir.path().join(format!("img-{n}.pm"));
        std::fs::write(&p, image).unwrap();
        Heap::open_with_line_size(&p, 16).unwrap()
    }

    #[test]
    fn begin_sets_durable_mutating_flag() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create_with_line_size(&path(&dir, "h.pm"), 4096, 16).unwrap();
        h.begin_txn().unwrap();
        assert_eq!(h.state(), HeapState::Mutating);
        let img = h.crash_image_bytes(&Adversary::DropAll);
        assert_eq!(img[12], HeapState::Mutating as u8);
    }

    #[test]
    fn nested_begin_fails() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        h.begin_txn().unwrap();
        assert!(matches!(h.begin_txn(), Err(HeapError::NestedTransaction)));
    }

    #[test]
    fn store_outside_txn_fails() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        assert!(matches!(
            h.txn_store(&PmRef::new(0, 1), &[1]),
            Err(HeapError::NoTransaction)
        ));
        assert!(matches!(h.end_txn(), Err(HeapError::NoTransaction)));
    }

    #[test]
    fn txn_store_visible_in_volatile_view() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        h.begin_txn().unwrap();
        let r = PmRef::new(10, 3);
        h.txn_store(&r, b"abc").unwrap();
        assert_eq!(h.raw_read(&r).unwrap(), b"abc");
    }

    #[test]
    fn adjacent_stores_coalesce_in_log() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        h.begin_txn().unwrap();
        h.txn_store(&PmRef::new(0, 8), &[1; 8]).unwrap();
        h.txn_store(&PmRef::new(8, 8), &[2; 8]).unwrap();
        assert_eq!(h.txn_log_entries(), 1);
    }

    #[test]
    fn exactly_four_fences_per_commit_regardless_of_stores() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 1 << 16).unwrap();
        for stores in [0usize, 1, 17, 300] {
            let before = h.stats().fences;
            h.begin_txn().unwrap();
            for i in 0..stores {
                h.txn_store(&PmRef::new(i as u64 * 8, 8), &(i as u64).to_le_bytes())
                    .unwrap();
            }
            h.end_txn().unwrap();
            assert_eq!(h.stats().fences - before, 4, "stores={stores}");
        }
    }

    #[test]
    fn committed_data_survives_any_crash() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create_with_line_size(&path(&dir, "h.pm"), 4096, 16).unwrap();
        h.begin_txn().unwrap();
        h.txn_store(&PmRef::new(0, 4), b"keep").unwrap();
        h.end_txn().unwrap();
        // After end_txn even the drop-everything adversary sees the data.
        let img = h.crash_image_bytes(&Adversary::DropAll);
        let recovered = open_image(&dir, &img, 0);
        assert_eq!(recovered.raw_read(&PmRef::new(0, 4)).unwrap(), b"keep");
    }

    #[test]
    fn crash_right_after_begin_recovers_pre_state() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create_with_line_size(&path(&dir, "h.pm"), 4096, 16).unwrap();
        h.begin_txn().unwrap();
        h.txn_store(&PmRef::new(0, 4), b"lost").unwrap();
        for (n, img) in h.enumerate_crash_images(1 << 10).into_iter().enumerate() {
            let rec = open_image(&dir, &img, n);
            assert_eq!(rec.state(), HeapState::Idle);
            assert_eq!(rec.raw_read(&PmRef::new(0, 4)).unwrap(), vec![0; 4]);
        }
    }

    #[test]
    fn recover_on_idle_heap_changes_nothing() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        {
            let mut h = Heap::create(&p, 4096).unwrap();
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 2), b"ok").unwrap();
            h.end_txn().unwrap();
        }
        let before = std::fs::read(&p).unwrap();
        {
            Heap::open(&p).unwrap();
        }
        let after = std::fs::read(&p).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn mutating_image_restores_back_into_main() {
        // Hand-built fixture: two differing lines, flag forced to mutating.
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        let old = *b"old-snapshot-val";
        {
            let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 16), &old).unwrap();
            h.end_txn().unwrap();
            // Second transaction mutates main, then "crashes" before commit.
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 16), b"mutated-in-place")
                .unwrap();
            let img = h.crash_image_bytes(&Adversary::PersistAll);
            std::fs::write(path(&dir, "crash.pm"), img).unwrap();
        }
        let rec = Heap::open_with_line_size(&path(&dir, "crash.pm"), 16).unwrap();
        assert_eq!(rec.state(), HeapState::Idle);
        assert_eq!(rec.raw_read(&PmRef::new(0, 16)).unwrap(), old);
        assert_eq!(rec.read_main(0, 16), rec.read_back(0, 16));
    }

    #[test]
    fn copying_image_finishes_propagation_to_back() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        h.begin_txn().unwrap();
        h.txn_store(&PmRef::new(0, 16), b"committed-bytes!")
            .unwrap();
        // Crash at the first micro-op after the commit point: enumerate
        // the protocol and stop right after fence 3.
        let clean_start = h.micro_ops();
        h.end_txn().unwrap();
        let _total = h.micro_ops() - clean_start;

        // Re-run the same shape of transaction on a fresh heap, crashing
        // just after the copying flag is fenced (fence2, flag store,
        // flag flush, fence3 = 4 micro-ops into end_txn).
        let p2 = path(&dir, "h2.pm");
        let mut h2 = Heap::create_with_line_size(&p2, 4096, 16).unwrap();
        h2.begin_txn().unwrap();
        h2.txn_store(&PmRef::new(0, 16), b"committed-bytes!")
            .unwrap();
        h2.crash_after(4);
        assert!(matches!(h2.end_txn(), Err(HeapError::InjectedCrash)));
        let img = h2.crash_image_bytes(&Adversary::PersistAll);
        assert_eq!(img[12], HeapState::Copying as u8);
        let rec = open_image(&dir, &img, 1);
        assert_eq!(rec.state(), HeapState::Idle);
        assert_eq!(
            rec.raw_read(&PmRef::new(0, 16)).unwrap(),
            b"committed-bytes!"
        );
        assert_eq!(rec.read_main(0, 16), rec.read_back(0, 16));
    }

    #[test]
    fn recover_twice_equals_recover_once() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        h.begin_txn().unwrap();
        h.txn_store(&PmRef::new(0, 8), b"unfenced").unwrap();
        let img = h.crash_image_bytes(&Adversary::PersistAll);
        let p2 = path(&dir, "img.pm");
        std::fs::write(&p2, img).unwrap();
        let mut rec = Heap::open_with_line_size(&p2, 16).unwrap();
        let once = rec.volatile_bytes();
        rec.recover().unwrap();
        assert_eq!(rec.volatile_bytes(), once);
    }

    #[test]
    fn corrupt_state_flag_is_rejected() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        Heap::create(&p, 4096).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw[12] = 9;
        std::fs::write(&p, &raw).unwrap();
        assert!(matches!(Heap::open(&p), Err(HeapError::CorruptState(9))));
    }

    #[test]
    fn alloc_positions_are_eight_byte_aligned_bumps() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        h.begin_txn().unwrap();
        let a = h.alloc(100).unwrap();
        let b = h.alloc(100).unwrap();
        assert_eq!(a.offset, 0);
        assert_eq!(b.offset, 104);
        h.end_txn().unwrap();
        assert_eq!(h.alloc_head(), 208);
    }

    #[test]
    fn alloc_beyond_region_is_out_of_memory() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        h.begin_txn().unwrap();
        assert!(matches!(h.alloc(5000), Err(HeapError::OutOfMemory { .. })));
    }

    #[test]
    fn alloc_rolls_back_with_crashed_transaction() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        h.begin_txn().unwrap();
        h.alloc(64).unwrap();
        h.end_txn().unwrap();
        assert_eq!(h.alloc_head(), 64);

        h.begin_txn().unwrap();
        h.alloc(64).unwrap();
        assert_eq!(h.alloc_head(), 128);
        for (n, img) in h.enumerate_crash_images(1 << 14).into_iter().enumerate() {
            let rec = open_image(&dir, &img, n);
            assert_eq!(rec.alloc_head(), 64, "image {n}");
        }
    }

    #[test]
    fn roots_commit_and_roll_back_atomically() {
        let dir = TempDir::new().unwrap();
        let p = path(&dir, "h.pm");
        let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
        h.begin_txn().unwrap();
        let obj = h.alloc(16).unwrap();
        h.txn_store(&obj, &[7u8; 16]).unwrap();
        h.set_root(0, Some(obj.offset)).unwrap();
        // Not yet committed: every crash image recovers to a null root.
        for (n, img) in h.enumerate_crash_images(1 << 14).into_iter().enumerate() {
            let rec = open_image(&dir, &img, n);
            assert_eq!(rec.root(0).unwrap(), None, "image {n}");
        }
        h.end_txn().unwrap();
        for (n, img) in h.enumerate_crash_images(1 << 14).into_iter().enumerate() {
            let rec = open_image(&dir, &img, 1000 + n);
            assert_eq!(rec.root(0).unwrap(), Some(obj.offset));
        }
    }

    #[test]
    fn empty_transaction_cycles_back_to_idle() {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&path(&dir, "h.pm"), 4096).unwrap();
        let before_main = h.read_main(0, 4096).to_vec();
        h.begin_txn().unwrap();
        h.end_txn().unwrap();
        assert_eq!(h.state(), HeapState::Idle);
        assert_eq!(h.read_main(0, 4096), &before_main[..]);
        assert_eq!(h.read_main(0, 4096), h.read_back(0, 4096));
    }

    /// Exhaustive crash-point × adversary sweep: for a transaction of
    /// three stores on a small fixture, every reachable crash image must
    /// recover to exactly the pre- or post-transaction contents.
    #[test]
    fn atomicity_under_exhaustive_crash_enumeration() {
        let dir = TempDir::new().unwrap();
        let pre: Vec<u8> = (0..48).map(|i| (i % 251) as u8).collect();
        let post: Vec<u8> = (0..48).map(|i| (255 - i % 251) as u8).collect();

        // crash_at is relative to the start of the second transaction;
        // None runs to completion and reports how many micro-ops it took.
        let run = |crash_at: Option<u64>| -> (Heap, u64) {
            let p = dir.path().join(format!("fx-{:?}.pm", crash_at));
            let _ = std::fs::remove_file(&p);
            let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 48), &pre).unwrap();
            h.end_txn().unwrap();
            let txn_start = h.micro_ops();
            if let Some(k) = crash_at {
                h.crash_after(k);
            }
            let r = (|| -> crate::heap::Result<()> {
                h.begin_txn()?;
                h.txn_store(&PmRef::new(0, 16), &post[0..16])?;
                h.txn_store(&PmRef::new(16, 16), &post[16..32])?;
                h.txn_store(&PmRef::new(32, 16), &post[32..48])?;
                h.end_txn()
            })();
            if crash_at.is_none() {
                r.unwrap();
            }
            let ops = h.micro_ops() - txn_start;
            (h, ops)
        };

        let (_, txn_ops) = run(None);
        let mut images_checked = 0u64;
        let mut widest = 0u128;
        for k in 0..txn_ops {
            let (h, _) = run(Some(k));
            widest = widest.max(h.crash_image_count());
            for (n, img) in h.enumerate_crash_images(1 << 16).into_iter().enumerate() {
                let rec = open_image(&dir, &img, n);
                let main = rec.raw_read(&PmRef::new(0, 48)).unwrap();
                assert!(
                    main == pre || main == post,
                    "crash at op {k}, image {n}: mixed state"
                );
                images_checked += 1;
            }
        }
        // At the peak all three stored lines are independently undecided.
        assert!(widest >= 8, "peak enumeration width {widest}");
        assert!(images_checked >= txn_ops, "checked {images_checked}");
    }

    /// A committed transaction must survive a crash during the *next*
    /// transaction, even when the first crash hit inside end_txn's
    /// copy-to-back window.
    #[test]
    fn committed_state_survives_crash_after_crash() {
        let dir = TempDir::new().unwrap();
        let v1 = [0x11u8; 16];
        let v2 = [0x22u8; 16];

        // Find how many micro-ops end_txn takes for this shape.
        let probe = {
            let p = dir.path().join("probe.pm");
            let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 16), &v1).unwrap();
            let before = h.micro_ops();
            h.end_txn().unwrap();
            h.micro_ops() - before
        };

        for k in 0..probe {
            let p = dir.path().join(format!("h-{k}.pm"));
            let mut h = Heap::create_with_line_size(&p, 4096, 16).unwrap();
            h.begin_txn().unwrap();
            h.txn_store(&PmRef::new(0, 16), &v1).unwrap();
            h.crash_after(k);
            let crashed_in_commit = h.end_txn().is_err();
            for (n, img) in h.enumerate_crash_images(1 << 16).into_iter().enumerate() {
                let ip = dir.path().join(format!("img-{k}-{n}.pm"));
                std::fs::write(&ip, &img).unwrap();
                let mut rec = Heap::open_with_line_size(&ip, 16).unwrap();
                let after_first = rec.raw_read(&PmRef::new(0, 16)).unwrap();
                // Run a second transaction and crash it immediately after
                // its first store: recovery must land on a committed state.
                rec.begin_txn().unwrap();
                rec.txn_store(&PmRef::new(0, 16), &v2).unwrap();
                let img2 = rec.crash_image_bytes(&Adversary::PersistAll);
                let ip2 = dir.path().join(format!("img2-{k}-{n}.pm"));
                std::fs::write(&ip2, img2).unwrap();
                let rec2 = Heap::open_with_line_size(&ip2, 16).unwrap();
                let final_main = rec2.raw_read(&PmRef::new(0, 16)).unwrap();
                assert_eq!(
                    final_main, after_first,
                    "crash_at={k} image={n} crashed_in_commit={crashed_in_commit}: \
                     second crash rolled back past the recovered state"
                );
            }
        }
    }
}
