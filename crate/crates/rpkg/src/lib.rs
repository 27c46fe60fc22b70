//! A desk-scale laboratory for studying anti-repackaging protections:
//! a miniature signed bundle format, a toy register VM, six protection
//! passes, the attacks that defeat them, and an evaluation harness.

pub mod attack;
pub mod bundle;
pub mod harness;
pub mod crypto;
pub mod protect;
pub mod vm;
