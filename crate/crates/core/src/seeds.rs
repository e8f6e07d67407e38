//! Deterministic seed fan-out.
//!
//! Every random stream in the simulator is seeded through [`derive`], so a
//! run is fully reproducible from the three seeds in its config:
//!
//! * `master`  → `("init", 0)` model initialization,
//!               `("client", id)` per-client SGD shuffles.
//! * `data`    → `("dirichlet", attempt)` partition draws,
//!               `("split", client)` per-client train/test splits.
//! * `sampling`→ `("round", k)` per-round client sampling.
//!
//! The derivation is SHA-256 over `(base, tag, index)`, so streams with
//! different tags or indices are statistically independent.

use sha2::{Digest, Sha256};

pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}
