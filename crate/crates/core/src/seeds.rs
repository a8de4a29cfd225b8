//! Fan-out of a single master seed into independent per-use seeds.
//!
//! `derive_seed(master, label, index)` is the first eight bytes (little
//! endian) of `SHA-256(master_le || label || 0x00 || index_le)`. The label is
//! the subcommand or stage name, the index the position of the consumer
//! (config number, candidate number, ...).

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
