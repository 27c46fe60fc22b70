//! The miniature signed app package: named sections, a manifest of
//! SHA-256 digests, and an Ed25519 signature over the canonical
//! serialization. See `docs/bundle-format.md` for the wire layout.

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use thiserror::Error;

use crate::crypto::{checksum32, sha256_digest, ChecksumMode};

pub const MAGIC: &[u8; 4] = b"RPKG";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum SectionKind {
    Code,
    Native,
    Resource,
    Meta,
}

impl SectionKind {
    fn to_byte(self) -> u8 {
        match self {
            SectionKind::Code => 0,
            SectionKind::Native => 1,
            SectionKind::Resource => 2,
            SectionKind::Meta => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SectionKind::Code),
            1 => Some(SectionKind::Native),
            2 => Some(SectionKind::Resource),
            3 => Some(SectionKind::Meta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn new(name: impl Into<String>, kind: SectionKind, bytes: Vec<u8>) -> Self {
        Section { name: name.into(), kind, bytes }
    }
}

/// Digest table over section bytes, the stand-in for a signed manifest
/// file. Keys are exactly the bundle's section names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: BTreeMap<String, [u8; 32]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureBlock {
    pub signer_public_key: [u8; 32],
    pub signature: [u8; 64],
}

/// Ed25519 pair derived deterministically from a 32-byte seed.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        KeyPair { signing: SigningKey::from_bytes(seed) }
    }

    /// Convenience seed expansion for CLI `--key-seed N`.
    pub fn from_seed_u64(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        Self::from_seed(&sha256_digest(&bytes))
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub format_version: u16,
    pub sections: Vec<Section>,
    pub manifest: Manifest,
    pub signature: Option<SignatureBlock>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("truncated bundle at offset {0}")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("invalid section kind {0}")]
    BadKind(u8),
    #[error("invalid utf-8 in name")]
    BadName,
    #[error("duplicate section name {0:?}")]
    DuplicateSection(String),
    #[error("trailing bytes after bundle")]
    TrailingBytes,
    #[error("unknown section {0:?}")]
    UnknownSection(String),
    #[error("checksum prefix {count} exceeds section length {len}")]
    PrefixTooLong { count: usize, len: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("no signature")]
    NoSignature,
    #[error("bad signature")]
    BadSignature,
    #[error("digest mismatch in section {0:?}")]
    DigestMismatch(String),
}

impl Bundle {
    pub fn new(sections: Vec<Section>) -> Self {
        Bundle {
            format_version: FORMAT_VERSION,
            sections,
            manifest: Manifest::default(),
            signature: None,
        }
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn section_mut(&mut self, name: &str) -> Option<&mut Section> {
        self.sections.iter_mut().find(|s| s.name == name)
    }

    pub fn remove_section(&mut self, name: &str) {
        self.sections.retain(|s| s.name != name);
    }

    /// Replaces or appends a section, keeping names unique.
    pub fn put_section(&mut self, section: Section) {
        if let Some(existing) = self.section_mut(&section.name) {
            *existing = section;
        } else {
            self.sections.push(section);
        }
    }

    fn serialize_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.kind.to_byte());
            out.extend_from_slice(&(s.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.bytes);
        }
        out.extend_from_slice(&(self.manifest.entries.len() as u32).to_le_bytes());
        for (name, digest) in &self.manifest.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(digest);
        }
    }

    /// Canonical byte encoding. `deserialize(serialize(b)) == b` for
    /// every valid bundle; section order is significant.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.serialize_body(&mut out);
        match &self.signature {
            None => out.push(0),
            Some(sig) => {
                out.push(1);
                out.extend_from_slice(&sig.signer_public_key);
                out.extend_from_slice(&sig.signature);
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Bundle, BundleError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BundleError::BadMagic);
        }
        let format_version = r.u16()?;
        let n_sections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections.min(1024));
        for _ in 0..n_sections {
            let name = r.name()?;
            let kind =
                SectionKind::from_byte(r.u8()?).ok_or(BundleError::BadKind(bytes[r.pos - 1]))?;
            let len = r.u32()? as usize;
            let data = r.take(len)?.to_vec();
            if sections.iter().any(|s: &Section| s.name == name) {
                return Err(BundleError::DuplicateSection(name));
            }
            sections.push(Section { name, kind, bytes: data });
        }
        let n_entries = r.u32()? as usize;
        let mut manifest = Manifest::default();
        for _ in 0..n_entries {
            let name = r.name()?;
            let mut digest = [0u8; 32];
            digest.copy_from_slice(r.take(32)?);
            manifest.entries.insert(name, digest);
        }
        let signature = match r.u8()? {
            0 => None,
            _ => {
                let mut key = [0u8; 32];
                key.copy_from_slice(r.take(32)?);
                let mut sig = [0u8; 64];
                sig.copy_from_slice(r.take(64)?);
                Some(SignatureBlock { signer_public_key: key, signature: sig })
            }
        };
        if r.pos != bytes.len() {
            return Err(BundleError::TrailingBytes);
        }
        Ok(Bundle { format_version, sections, manifest, signature })
    }

    /// The signature covers the manifest, not the raw section bytes;
    /// section tampering therefore surfaces as a digest mismatch while
    /// the signature itself stays valid.
    fn signed_message(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.manifest.entries.len() as u32).to_le_bytes());
        for (name, digest) in &self.manifest.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(digest);
        }
        out
    }

    /// Recomputes the manifest from the current sections and attaches a
    /// signature over it.
    pub fn sign(&self, key: &KeyPair) -> Bundle {
        let mut signed = self.clone();
        signed.manifest.entries = signed
            .sections
            .iter()
            .map(|s| (s.name.clone(), sha256_digest(&s.bytes)))
            .collect();
        let message = signed.signed_message();
        signed.signature = Some(SignatureBlock {
            signer_public_key: key.public_key(),
            signature: key.sign(&message),
        });
        signed
    }

    /// True iff the signature is present and valid and every manifest
    /// digest matches the current section bytes.
    pub fn verify(&self) -> Result<(), VerifyError> {
        let sig = self.signature.as_ref().ok_or(VerifyError::NoSignature)?;
        let key =
            VerifyingKey::from_bytes(&sig.signer_public_key).map_err(|_| VerifyError::BadSignature)?;
        let message = self.signed_message();
        key.verify(&message, &Signature::from_bytes(&sig.signature))
            .map_err(|_| VerifyError::BadSignature)?;
        for s in &self.sections {
            match self.manifest.entries.get(&s.name) {
                Some(digest) if *digest == sha256_digest(&s.bytes) => {}
                _ => return Err(VerifyError::DigestMismatch(s.name.clone())),
            }
        }
        for name in self.manifest.entries.keys() {
            if self.section(name).is_none() {
                return Err(VerifyError::DigestMismatch(name.clone()));
            }
        }
        Ok(())
    }

    /// XOR-fold checksum over the first `count` bytes of a section.
    pub fn section_prefix_checksum32(
        &self,
        name: &str,
        count: usize,
        mode: ChecksumMode,
    ) -> Result<u32, BundleError> {
        let section = self
            .section(name)
            .ok_or_else(|| BundleError::UnknownSection(name.to_string()))?;
        if count > section.bytes.len() {
            return Err(BundleError::PrefixTooLong { count, len: section.bytes.len() });
        }
        Ok(checksum32(&section.bytes[..count], mode))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.pos + n > self.bytes.len() {
            return Err(BundleError::Truncated(self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, BundleError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| BundleError::BadName)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev_key() -> KeyPair {
        KeyPair::from_seed(&[1u8; 32])
    }

    fn sample_bundle() -> Bundle {
        Bundle::new(vec![
            Section::new("code", SectionKind::Code, vec![1, 2, 3, 4]),
            Section::new("res0", SectionKind::Resource, vec![9, 9]),
        ])
    }

    #[test]
    fn empty_bundle_round_trips() {
        let b = Bundle::new(vec![]);
        let bytes = b.serialize();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Bundle::deserialize(&bytes).unwrap(), b);
    }

    #[test]
    fn single_section_round_trips() {
        let b = Bundle::new(vec![Section::new("code", SectionKind::Code, vec![0xAB; 17])]);
        assert_eq!(Bundle::deserialize(&b.serialize()).unwrap(), b);
    }

    #[test]
    fn section_order_is_significant() {
        let a = Bundle::new(vec![
            Section::new("a", SectionKind::Resource, vec![1]),
            Section::new("b", SectionKind::Resource, vec![2]),
        ]);
        let b = Bundle::new(vec![
            Section::new("b", SectionKind::Resource, vec![2]),
            Section::new("a", SectionKind::Resource, vec![1]),
        ]);
        assert_ne!(a.serialize(), b.serialize());
    }

    #[test]
    fn sign_then_verify() {
        let signed = sample_bundle().sign(&dev_key());
        assert_eq!(signed.verify(), Ok(()));
    }

    #[test]
    fn unsigned_bundle_fails_with_no_signature() {
        assert_eq!(sample_bundle().verify(), Err(VerifyError::NoSignature));
    }

    #[test]
    fn section_flip_breaks_verification() {
        let mut signed = sample_bundle().sign(&dev_key());
        signed.section_mut("res0").unwrap().bytes[0] ^= 1;
        assert_eq!(
            signed.verify(),
            Err(VerifyError::DigestMismatch("res0".into()))
        );
    }

    #[test]
    fn attacker_resign_verifies_under_different_key() {
        let dev = dev_key();
        let attacker = KeyPair::from_seed(&[2u8; 32]);
        let signed = sample_bundle().sign(&dev);
        let mut modified = signed.clone();
        modified.put_section(Section::new("payload", SectionKind::Resource, vec![0xEE]));
        let resigned = modified.sign(&attacker);
        assert_eq!(resigned.verify(), Ok(()));
        assert_ne!(
            resigned.signature.unwrap().signer_public_key,
            dev.public_key()
        );
    }

    #[test]
    fn prefix_checksum_errors() {
        let b = sample_bundle();
        assert!(matches!(
            b.section_prefix_checksum32("nope", 0, ChecksumMode::Fixed),
            Err(BundleError::UnknownSection(_))
        ));
        assert!(matches!(
            b.section_prefix_checksum32("code", 100, ChecksumMode::Fixed),
            Err(BundleError::PrefixTooLong { .. })
        ));
        assert_eq!(
            b.section_prefix_checksum32("code", 0, ChecksumMode::Buggy),
            Ok(0)
        );
    }

    #[test]
    fn truncated_bundle_is_rejected() {
        let bytes = sample_bundle().serialize();
        assert!(Bundle::deserialize(&bytes[..bytes.len() - 3]).is_err());
    }
}
