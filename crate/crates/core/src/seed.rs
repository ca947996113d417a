//! Splitting one root seed into independent per-subsystem streams.
//!
//! `derive_seed(root, stream, index)` runs splitmix64 over the root mixed
//! with the stream tag and then the index, so any (stream, index) pair can be
//! regenerated without replaying the others.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Sampling = 3,
    Eval = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}
