//! Content digests recorded in every artifact.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest over several byte strings, each length-prefixed so that
/// boundaries are unambiguous.
pub fn sha256_parts<I, B>(parts: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// 64-bit seed derived from a domain tag and integer inputs.
pub fn derive_seed(tag: &str, inputs: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for v in inputs {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn parts_are_boundary_sensitive() {
        assert_ne!(sha256_parts(["ab", "c"]), sha256_parts(["a", "bc"]));
        assert_ne!(derive_seed("x", &[1, 2]), derive_seed("x", &[2, 1]));
        assert_eq!(derive_seed("x", &[1, 2]), derive_seed("x", &[1, 2]));
    }
}
