//! Property tests for the envelope and heap invariants.

use proptest::prelude::*;
use tempfile::TempDir;

use pmtrain_core::envelope::{decrypt, encrypt, Envelope, Key128, ENVELOPE_OVERHEAD};
use pmtrain_core::heap::{Adversary, Heap, PmRef};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// decrypt ∘ encrypt is the identity for plaintext lengths 0..4096.
    #[test]
    fn envelope_round_trip(data in prop::collection::vec(any::<u8>(), 0..4096)) {
        let key = Key128::generate().unwrap();
        let env = encrypt(&key, &data).unwrap();
        prop_assert_eq!(env.stored_len(), data.len() + ENVELOPE_OVERHEAD);
        prop_assert_eq!(decrypt(&key, &env).unwrap(), data);
    }

    /// Envelope byte serialization round-trips.
    #[test]
    fn envelope_bytes_round_trip(data in prop::collection::vec(any::<u8>(), 0..512)) {
        let key = Key128::generate().unwrap();
        let env = encrypt(&key, &data).unwrap();
        let back = Envelope::from_bytes(&env.to_bytes()).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(decrypt(&key, &back).unwrap(), data);
    }

    /// Bump allocation never hands out overlapping spans.
    #[test]
    fn allocations_never_overlap(sizes in prop::collection::vec(1u64..200, 1..40)) {
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create(&dir.path().join("h.pm"), 1 << 16).unwrap();
        h.begin_txn().unwrap();
        let mut spans: Vec<(u64, u64)> = Vec::new();
        for len in sizes {
            let r = h.alloc(len).unwrap();
            for &(o, l) in &spans {
                prop_assert!(r.offset + r.len <= o || o + l <= r.offset,
                    "{:?} overlaps ({o}, {l})", r);
            }
            prop_assert_eq!(r.offset % 8, 0);
            spans.push((r.offset, r.len));
        }
        h.end_txn().unwrap();
    }

    /// Under any sequence of stores, flushes and fences, every crash
    /// image is a line-granular hybrid of reachable line states. The
    /// oracle is an independent shadow model: per line, the durable
    /// content, an unfenced flushed snapshot, and the volatile view are
    /// the only contents a power cut may leave behind — a store that was
    /// overwritten in cache before any flush can never surface.
    #[test]
    fn crash_images_are_reachable_hybrids(
        ops in prop::collection::vec((0u64..16, any::<u8>(), 0u8..4), 1..60),
        pick in any::<u64>(),
    ) {
        use std::collections::HashMap;

        let line = 16usize;
        let dir = TempDir::new().unwrap();
        let mut h = Heap::create_with_line_size(&dir.path().join("h.pm"), 4096, line as u64).unwrap();

        struct ShadowLine {
            durable: Vec<u8>,
            flushed: Option<Vec<u8>>,
            pending: bool,
        }
        let mut shadow: HashMap<usize, ShadowLine> = HashMap::new();
        let base = pmtrain_core::heap::HEADER_SIZE as usize;
        let line_of = |offset: u64| (base + offset as usize) / line;

        for (slot, byte, kind) in ops {
            let r = PmRef::new(slot * 24, 8);
            match kind {
                0 | 1 => {
                    let volatile_before = h.volatile_bytes();
                    h.raw_store(&r, &[byte; 8]).unwrap();
                    for l in line_of(r.offset)..=line_of(r.offset + r.len - 1) {
                        shadow.entry(l).or_insert_with(|| ShadowLine {
                            durable: volatile_before[l * line..(l + 1) * line].to_vec(),
                            flushed: None,
                            pending: false,
                        }).pending = true;
                    }
                }
                2 => {
                    h.flush_range(&r).unwrap();
                    let volatile = h.volatile_bytes();
                    for l in line_of(r.offset)..=line_of(r.offset + r.len - 1) {
                        if let Some(st) = shadow.get_mut(&l) {
                            if st.pending {
                                st.flushed = Some(volatile[l * line..(l + 1) * line].to_vec());
                                st.pending = false;
                            }
                        }
                    }
                }
                _ => {
                    h.fence().unwrap();
                    shadow.retain(|_, st| {
                        if let Some(f) = st.flushed.take() {
                            if st.pending {
                                st.durable = f;
                                true
                            } else {
                                false
                            }
                        } else {
                            true
                        }
                    });
                }
            }
        }

        let volatile = h.volatile_bytes();
        let image = h.crash_image_bytes(&Adversary::Seeded(pick));
        for l in 0..image.len() / line {
            let s = l * line;
            let got = &image[s..s + line];
            let vol = &volatile[s..s + line];
            match shadow.get(&l) {
                None => prop_assert_eq!(got, vol, "clean line {} changed", l),
                Some(st) => {
                    let ok = got == &st.durable[..]
                        || st.flushed.as_deref().is_some_and(|f| got == f)
                        || got == vol;
                    prop_assert!(ok, "line {} shows bytes that were never reachable", l);
                }
            }
        }
    }
}

/// Ciphertext of a 4 KiB all-zeros plaintext looks high-entropy
/// (empirical per-byte entropy above 7.5 bits). A sanity check, not a
/// security proof.
#[test]
fn ciphertext_entropy_smoke_check() {
    let key = Key128::generate().unwrap();
    let env = encrypt(&key, &[0u8; 4096]).unwrap();
    let mut counts = [0usize; 256];
    for &b in &env.ciphertext {
        counts[b as usize] += 1;
    }
    let n = env.ciphertext.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    assert!(entropy > 7.5, "per-byte entropy {entropy:.3} bits");
}

/// Key bytes never end up in the heap file, under a workload that
/// encrypts and stores with that key, across crash images too.
#[test]
fn key_bytes_never_reach_the_heap() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("h.pm");
    let mut h = Heap::create(&p, 1 << 16).unwrap();
    let key = Key128::generate().unwrap();

    h.begin_txn().unwrap();
    for i in 0..16 {
        let env = encrypt(&key, format!("payload number {i}").as_bytes()).unwrap();
        let r = h.alloc(env.stored_len() as u64).unwrap();
        h.txn_store(&r, &env.to_bytes()).unwrap();
    }
    h.end_txn().unwrap();

    let needle = key.bytes();
    for image in [
        h.volatile_bytes(),
        h.crash_image_bytes(&Adversary::DropAll),
        h.crash_image_bytes(&Adversary::Seeded(1)),
    ] {
        assert!(
            !image.windows(needle.len()).any(|w| w == needle),
            "key bytes found in a heap image"
        );
    }
}
