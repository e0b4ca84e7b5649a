//! Key provisioning: a 16-raw-byte key file, or a hex string in the
//! `PMTRAIN_KEY_HEX` environment variable when no file is given.

use anyhow::{bail, Context, Result};
use pmtrain_core::Key128;
use std::path::Path;

pub const KEY_ENV: &str = "PMTRAIN_KEY_HEX";

pub fn load_key(path: Option<&Path>) -> Result<Key128> {
    if let Some(p) = path {
        return Key128::from_file(p).with_context(|| format!("key file {}", p.display()));
    }
    match std::env::var(KEY_ENV) {
        Ok(hex) => {
            let bytes = parse_hex(hex.trim())?;
            Ok(Key128::from_bytes(&bytes)?)
        }
        Err(_) => bail!("no key: pass --key FILE or set {KEY_ENV}"),
    }
}

pub fn parse_hex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        bail!("hex string has odd length");
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).context("bad hex digit"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_parsing() {
        assert_eq!(parse_hex("00ff10").unwrap(), vec![0, 255, 16]);
        assert!(parse_hex("abc").is_err());
        assert!(parse_hex("zz").is_err());
    }
}
