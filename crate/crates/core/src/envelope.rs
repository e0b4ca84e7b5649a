//! Authenticated encryption for every confidential payload that crosses
//! into the persistent heap. An envelope is the only form such bytes may
//! take on the persistent side: a fresh random 12-byte IV, the 16-byte
//! GCM tag, and a length-preserving ciphertext, serialized iv ‖ mac ‖ ct.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

/// Bytes of metadata added per encrypted buffer: 12 IV + 16 MAC.
pub const ENVELOPE_OVERHEAD: usize = IV_LEN + MAC_LEN;
pub const IV_LEN: usize = 12;
pub const MAC_LEN: usize = 16;
pub const KEY_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CryptoError {
    /// MAC verification failed: the envelope was tampered with or the key
    /// is wrong. No plaintext is produced.
    #[error("envelope integrity check failed")]
    Integrity,
    #[error("envelope too short: {0} bytes, need at least {ENVELOPE_OVERHEAD}")]
    Truncated(usize),
    #[error("key material must be exactly {KEY_LEN} bytes, got {0}")]
    BadKeyLength(usize),
    #[error("entropy source failed: {0}")]
    Entropy(String),
    #[error("reading key: {0}")]
    Io(#[from] std::io::Error),
}

/// 128-bit AES key. Key bytes are never written into a heap file; the
/// scan-based tests assert this.
#[derive(Clone)]
pub struct Key128 {
    bytes: [u8; KEY_LEN],
}

impl Key128 {
    /// Fresh uniformly random key from the OS entropy source.
    pub fn generate() -> Result<Key128, CryptoError> {
        let mut bytes = [0u8; KEY_LEN];
        OsRng
            .try_fill_bytes(&mut bytes)
            .map_err(|e| CryptoError::Entropy(e.to_string()))?;
        Ok(Key128 { bytes })
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Key128, CryptoError> {
        if raw.len() != KEY_LEN {
            return Err(CryptoError::BadKeyLength(raw.len()));
        }
        let mut bytes = [0u8; KEY_LEN];
        bytes.copy_from_slice(raw);
        Ok(Key128 { bytes })
    }

    /// Key file format: exactly 16 raw bytes.
    pub fn from_file(path: &std::path::Path) -> Result<Key128, CryptoError> {
        Key128::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_file(&self, path: &std::path::Path) -> Result<(), CryptoError> {
        std::fs::write(path, self.bytes)?;
        Ok(())
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }
}

impl std::fmt::Debug for Key128 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Key128(..)")
    }
}

/// Encrypted container: iv ‖ mac ‖ ciphertext, 28 bytes larger than the
/// plaintext it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub iv: [u8; IV_LEN],
    pub mac: [u8; MAC_LEN],
    pub ciphertext: Vec<u8>,
}

impl Envelope {
    pub fn stored_len(&self) -> usize {
        ENVELOPE_OVERHEAD + self.ciphertext.len()
    }

    pub fn plaintext_len(&self) -> usize {
        self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.stored_len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.mac);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Envelope, CryptoError> {
        if raw.len() < ENVELOPE_OVERHEAD {
            return Err(CryptoError::Truncated(raw.len()));
        }
        let mut iv = [0u8; IV_LEN];
        iv.copy_from_slice(&raw[..IV_LEN]);
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&raw[IV_LEN..ENVELOPE_OVERHEAD]);
        Ok(Envelope {
            iv,
            mac,
            ciphertext: raw[ENVELOPE_OVERHEAD..].to_vec(),
        })
    }
}

/// AES-128-GCM with a fresh random IV per call. The MAC covers the
/// ciphertext only; no additional authenticated data is bound.
pub fn encrypt(key: &Key128, plaintext: &[u8]) -> Result<Envelope, CryptoError> {
    let mut iv = [0u8; IV_LEN];
    OsRng
        .try_fill_bytes(&mut iv)
        .map_err(|e| CryptoError::Entropy(e.to_string()))?;
    encrypt_with_iv(key, plaintext, iv)
}

fn encrypt_with_iv(
    key: &Key128,
    plaintext: &[u8],
    iv: [u8; IV_LEN],
) -> Result<Envelope, CryptoError> {
    let cipher = Aes128Gcm::new_from_slice(&key.bytes).expect("16-byte key");
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(&iv),
            Payload {
                msg: plaintext,
                aad: &[],
            },
        )
        .expect("GCM encryption is infallible for in-memory buffers");
    // aes-gcm appends the tag; our layout keeps it separate.
    let (ct, tag) = sealed.split_at(sealed.len() - MAC_LEN);
    let mut mac = [0u8; MAC_LEN];
    mac.copy_from_slice(tag);
    Ok(Envelope {
        iv,
        mac,
        ciphertext: ct.to_vec(),
    })
}

/// Returns the plaintext iff the MAC verifies under `key` and the IV;
/// a tampered envelope or wrong key yields `CryptoError::Integrity` and
/// no partial output.
pub fn decrypt(key: &Key128, env: &Envelope) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes128Gcm::new_from_slice(&key.bytes).expect("16-byte key");
    let mut sealed = Vec::with_capacity(env.ciphertext.len() + MAC_LEN);
    sealed.extend_from_slice(&env.ciphertext);
    sealed.extend_from_slice(&env.mac);
    cipher
        .decrypt(
            Nonce::from_slice(&env.iv),
            Payload {
                msg: &sealed,
                aad: &[],
            },
        )
        .map_err(|_| CryptoError::Integrity)
}

/// PM metadata cost of `buffer_count` encrypted buffers: 28 bytes each.
pub fn envelope_overhead(buffer_count: usize) -> usize {
    ENVELOPE_OVERHEAD * buffer_count
}
