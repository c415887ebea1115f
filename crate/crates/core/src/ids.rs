//! Fixed-width identifiers and the keyed hashes built on them.

use std::fmt;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use siphasher::sip::SipHasher24;
use siphasher::sip128::{Hasher128, SipHasher24 as SipHasher128};

macro_rules! hash32 {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub const ZERO: Self = Self([0u8; 32]);

            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                self.0.iter().map(|b| format!("{b:02x}")).collect()
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                if s.len() != 64 {
                    return None;
                }
                let mut out = [0u8; 32];
                for (i, byte) in out.iter_mut().enumerate() {
                    *byte = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
                }
                Some(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
            }
        }
    };
}

hash32!(TxId);
hash32!(BlockHash);

/// Index of a consensus node, `0..n`.
pub type NodeId = usize;

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// SipHash-2-4 of `data` keyed by a single 64-bit salt.
pub fn keyed_hash64(salt: u64, data: &[u8]) -> u64 {
    let mut h = SipHasher24::new_with_keys(salt, salt.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15);
    h.write(data);
    h.finish()
}

/// Two independent 64-bit lanes of a salted SipHash-128.
pub fn keyed_hash128(salt: u64, data: &[u8]) -> (u64, u64) {
    let mut h = SipHasher128::new_with_keys(salt, !salt);
    h.write(data);
    let out = h.finish128();
    (out.h1, out.h2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let id = TxId(sha256(&[b"abc"]));
        assert_eq!(TxId::from_hex(&id.to_hex()), Some(id));
        assert_eq!(TxId::from_hex("zz"), None);
    }

    #[test]
    fn keyed_hash_depends_on_salt() {
        assert_ne!(keyed_hash64(1, b"x"), keyed_hash64(2, b"x"));
        assert_eq!(keyed_hash64(7, b"x"), keyed_hash64(7, b"x"));
    }
}
