//! Hashing, key derivation and section ciphers shared by the loader,
//! the protection passes and the attack toolkit.

use aes::cipher::{KeyIvInit, StreamCipher};
use sha1::Sha1;
use sha2::{Digest, Sha256};

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;

/// Hash algorithm used for trigger digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HashAlg {
    Sha1,
    Sha256,
}

/// Truncated trigger digest: first 4 bytes, little-endian, of
/// `alg(salt || le32(v))`.
pub fn trigger_hash(v: u32, salt: &[u8], alg: HashAlg) -> u32 {
    let mut buf = Vec::with_capacity(salt.len() + 4);
    buf.extend_from_slice(salt);
    buf.extend_from_slice(&v.to_le_bytes());
    let digest: [u8; 4] = match alg {
        HashAlg::Sha1 => {
            let d = Sha1::digest(&buf);
            [d[0], d[1], d[2], d[3]]
        }
        HashAlg::Sha256 => {
            let d = Sha256::digest(&buf);
            [d[0], d[1], d[2], d[3]]
        }
    };
    u32::from_le_bytes(digest)
}

pub fn sha256_digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// First 4 bytes, little-endian, of the SHA-256 of `bytes`.
pub fn digest32(bytes: &[u8]) -> u32 {
    let d = Sha256::digest(bytes);
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

/// Derives the AES-128 key for an encrypted payload section from the
/// 32-bit constant guarding it: first 16 bytes of SHA-256(le32(v)).
pub fn payload_key(v: u32) -> [u8; 16] {
    let d = Sha256::digest(v.to_le_bytes());
    let mut key = [0u8; 16];
    key.copy_from_slice(&d[..16]);
    key
}

/// AES-128-CTR with a zero nonce. Encryption and decryption are the
/// same operation.
pub fn aes_ctr_xcrypt(key: &[u8; 16], data: &[u8]) -> Vec<u8> {
    let mut out = data.to_vec();
    let mut cipher = Aes128Ctr::new(key.into(), &[0u8; 16].into());
    cipher.apply_keystream(&mut out);
    out
}

/// Repeating-key XOR with a 16-byte key. Self-inverse.
pub fn xor_crypt(key: &[u8; 16], data: &[u8]) -> Vec<u8> {
    data.iter()
        .enumerate()
        .map(|(i, b)| b ^ key[i % 16])
        .collect()
}

/// Checksum combine mode. `Fixed` treats each fold byte as unsigned,
/// `Buggy` sign-extends it before the shifted addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChecksumMode {
    Fixed,
    Buggy,
}

/// Folds `bytes` into four XOR accumulator lanes (`acc[i % 4] ^= byte[i]`)
/// and combines them as `acc[0] + acc[1]<<8 + acc[2]<<16 + acc[3]<<24`.
pub fn checksum32(bytes: &[u8], mode: ChecksumMode) -> u32 {
    let mut acc = [0u8; 4];
    for (i, b) in bytes.iter().enumerate() {
        acc[i % 4] ^= b;
    }
    match mode {
        ChecksumMode::Fixed => u32::from_le_bytes(acc),
        ChecksumMode::Buggy => {
            let mut sum = 0u32;
            for (j, &lane) in acc.iter().enumerate() {
                let se = lane as i8 as i32 as u32;
                sum = sum.wrapping_add(se.wrapping_shl(8 * j as u32));
            }
            sum
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_hash_is_deterministic() {
        assert_eq!(
            trigger_hash(12345, b"salt", HashAlg::Sha256),
            trigger_hash(12345, b"salt", HashAlg::Sha256)
        );
    }

    #[test]
    fn trigger_hash_unsalted_collides_on_equal_values() {
        // Two sites with the same constant and no salt share a digest.
        assert_eq!(
            trigger_hash(0xFFFF_FFFF, b"", HashAlg::Sha1),
            trigger_hash(0xFFFF_FFFF, b"", HashAlg::Sha1)
        );
    }

    #[test]
    fn trigger_hash_sha1_regression_values() {
        // Frozen from an independent SHA-1 implementation.
        assert_eq!(trigger_hash((-1i32) as u32, b"", HashAlg::Sha1), 0x2465_bed9);
        assert_eq!(trigger_hash(7, b"", HashAlg::Sha1), 0xc76f_082f);
        assert_eq!(trigger_hash(42, b"salt", HashAlg::Sha256), 0xe620_e1dc);
    }

    #[test]
    fn aes_ctr_matches_reference() {
        // Frozen from an independent AES-CTR implementation.
        let key = payload_key(7);
        let ct = aes_ctr_xcrypt(&key, b"hello world 1234 and more bytes!");
        assert_eq!(
            ct,
            [
                0x83, 0x79, 0x62, 0x73, 0xea, 0x7f, 0x69, 0x4d, 0xcc, 0x2c, 0xc0, 0x1f, 0x85,
                0x19, 0xa7, 0x5f, 0xff, 0x4b, 0xed, 0x64, 0x23, 0x34, 0xd4, 0x40, 0xc5, 0x23,
                0x59, 0x38, 0x40, 0x58, 0x11, 0xe9
            ]
        );
        assert_eq!(aes_ctr_xcrypt(&key, &ct), b"hello world 1234 and more bytes!");
    }

    #[test]
    fn xor_crypt_round_trips() {
        let key = [7u8; 16];
        let data = b"some native code bytes".to_vec();
        assert_eq!(xor_crypt(&key, &xor_crypt(&key, &data)), data);
    }

    #[test]
    fn checksum_empty_is_zero() {
        assert_eq!(checksum32(&[], ChecksumMode::Fixed), 0);
        assert_eq!(checksum32(&[], ChecksumMode::Buggy), 0);
    }

    #[test]
    fn checksum_single_low_byte() {
        let bytes = [0x01, 0x00, 0x00, 0x00];
        assert_eq!(checksum32(&bytes, ChecksumMode::Fixed), 1);
        assert_eq!(checksum32(&bytes, ChecksumMode::Buggy), 1);
    }

    #[test]
    fn checksum_sign_extension_divergence() {
        // Derived by hand from acc = [0x80, 0, 0, 0].
        let bytes = [0x80, 0x00, 0x00, 0x00];
        assert_eq!(checksum32(&bytes, ChecksumMode::Fixed), 0x0000_0080);
        assert_eq!(checksum32(&bytes, ChecksumMode::Buggy), 0xFFFF_FF80);
    }
}
