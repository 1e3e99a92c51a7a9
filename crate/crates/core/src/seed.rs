//! Sub-seed derivation. Every random stream in a run is keyed by
//! `(stream, round, client)`, so the schedule that executes clients cannot
//! change which numbers they draw.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    Sampling = 4,
    LocalTraining = 5,
}

/// `seed ⊕ hash(stream, round, client)`.
pub fn derive_seed(seed: u64, stream: Stream, round: usize, client: usize) -> u64 {
    seed ^ mix64(mix64(mix64(stream as u64) ^ round as u64) ^ client as u64)
}
