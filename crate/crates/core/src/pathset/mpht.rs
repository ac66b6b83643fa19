//! Minimal perfect hash tables built with hash-and-displace (CHD).
//!
//! All arithmetic mirrors what the generated check code computes on a
//! `W`-bit machine, so a table built here answers identically in the VM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::word::{Width, Word};

pub const DEFAULT_LAMBDA: u32 = 4;
pub const DEFAULT_SEED: u64 = 0x5eed_c0de_0000_0001;
pub const MAX_SEEDS: u32 = 16;
/// Displacements are searched below this bound (and below `n`).
pub const DISPLACEMENT_LIMIT: u64 = 1 << 16;

pub const MIX_ADD: u64 = 0x9e37_79b9_7f4a_7c15;
pub const MIX_MUL1: u64 = 0xbf58_476d_1ce4_e5b9;
pub const MIX_MUL2: u64 = 0x94d0_49bb_1331_11eb;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(MIX_ADD);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL2);
    z ^ (z >> 31)
}

/// Shift amounts of the mix scaled to the word width.
pub fn mix_shifts(width: Width) -> [u32; 3] {
    let w = width.bits();
    [30 * w / 64, 27 * w / 64, 31 * w / 64]
}

/// splitmix64 on a `W`-bit word: constants truncated, shifts scaled.
/// Equals [`splitmix64`] at `W = 64`.
pub fn mix(width: Width, x: Word) -> Word {
    let mask = width.mask();
    let [s1, s2, s3] = mix_shifts(width);
    let mut z = x.wrapping_add(MIX_ADD & mask) & mask;
    z = (z ^ (z >> s1)).wrapping_mul(MIX_MUL1 & mask) & mask;
    z = (z ^ (z >> s2)).wrapping_mul(MIX_MUL2 & mask) & mask;
    z ^ (z >> s3)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MphtSpec {
    pub width: Width,
    pub seed: u64,
    pub lambda: u32,
    pub n: u64,
    pub m: u64,
    /// `(d0, d1)` per bucket.
    pub displacements: Vec<(u64, u64)>,
    /// Stored keys by position.
    pub slots: Vec<Word>,
}

/// Bit offsets of the `f1` and `f2` fields inside the hash.
pub fn field_shifts(width: Width) -> (u32, u32) {
    (width.bits() / 3, 2 * width.bits() / 3)
}

/// Hash fields `(g, f1, f2)` of a key.
pub fn fields(width: Width, seed: u64, n: u64, m: u64, key: Word) -> (u64, u64, u64) {
    let h = mix(width, (key ^ seed) & width.mask());
    let (s1, s2) = field_shifts(width);
    (h % m, (h >> s1) % n, (h >> s2) % n)
}

/// `(f1 + d0*f2 + d1) mod n`, the sum wrapping at `W` bits like the VM.
pub fn position(width: Width, n: u64, f1: u64, f2: u64, d0: u64, d1: u64) -> u64 {
    let t = width.add(f1, width.mul(d0, f2).0).0;
    width.add(t, d1).0 % n
}

impl MphtSpec {
    pub fn bucket_count(n: u64, lambda: u32) -> u64 {
        n.div_ceil(lambda as u64).max(1)
    }

    /// Seed actually used for hashing (truncated to the word).
    pub fn word_seed(&self) -> Word {
        self.seed & self.width.mask()
    }

    pub fn position_of(&self, key: Word) -> u64 {
        let (g, f1, f2) = fields(self.width, self.word_seed(), self.n, self.m, key);
        let (d0, d1) = self.displacements[g as usize];
        position(self.width, self.n, f1, f2, d0, d1)
    }

    pub fn contains(&self, key: Word) -> bool {
        if self.n == 0 {
            return false;
        }
        self.slots[self.position_of(key) as usize] == key
    }

    /// Data cells: `(d0, d1)` as two 8-byte cells per bucket, then one cell
    /// per slot. Returns `(bytes, slots_offset_within_blob)`.
    pub fn encode(&self) -> (Vec<u8>, usize) {
        let mut out = Vec::with_capacity(16 * self.m as usize + 8 * self.n as usize);
        for (d0, d1) in &self.displacements {
            out.extend_from_slice(&d0.to_be_bytes());
            out.extend_from_slice(&d1.to_be_bytes());
        }
        let slots_at = out.len();
        for s in &self.slots {
            out.extend_from_slice(&s.to_be_bytes());
        }
        (out, slots_at)
    }
}

/// Builds a table over distinct `keys`. Deterministic in `(keys, lambda, seed)`.
pub fn build_mpht(keys: &[Word], lambda: u32, seed: u64, width: Width) -> Result<MphtSpec> {
    let mut keys = keys.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let n = keys.len() as u64;
    if n == 0 {
        return Err(Error::Unsupported("perfect hash over an empty set".into()));
    }
    let m = MphtSpec::bucket_count(n, lambda);
    let mut seed = seed;
    for _ in 0..MAX_SEEDS {
        if let Some(spec) = try_build(&keys, n, m, lambda, seed, width) {
            return Ok(spec);
        }
        seed = splitmix64(seed);
    }
    Err(Error::ConstructionFailed { tries: MAX_SEEDS })
}

fn try_build(keys: &[Word], n: u64, m: u64, lambda: u32, seed: u64, width: Width) -> Option<MphtSpec> {
    let ws = seed & width.mask();
    let mut buckets: Vec<Vec<(u64, u64, Word)>> = vec![Vec::new(); m as usize];
    for &k in keys {
        let (g, f1, f2) = fields(width, ws, n, m, k);
        buckets[g as usize].push((f1, f2, k));
    }
    let mut order: Vec<usize> = (0..m as usize).collect();
    order.sort_by_key(|&b| (std::cmp::Reverse(buckets[b].len()), b));
    let mut taken = vec![false; n as usize];
    let mut slots = vec![0 as Word; n as usize];
    let mut displacements = vec![(0u64, 0u64); m as usize];
    let limit = n.min(DISPLACEMENT_LIMIT);
    let mut pos = Vec::new();
    for b in order {
        let items = &buckets[b];
        if items.is_empty() {
            continue;
        }
        let mut found = None;
        'search: for d0 in 0..limit {
            for d1 in 0..limit {
                pos.clear();
                for &(f1, f2, _) in items {
                    let p = position(width, n, f1, f2, d0, d1);
                    if taken[p as usize] || pos.contains(&p) {
                        break;
                    }
                    pos.push(p);
                }
                if pos.len() == items.len() {
                    found = Some((d0, d1));
                    break 'search;
                }
            }
        }
        let (d0, d1) = found?;
        displacements[b] = (d0, d1);
        for (&p, &(_, _, k)) in pos.iter().zip(items) {
            taken[p as usize] = true;
            slots[p as usize] = k;
        }
    }
    Some(MphtSpec { width, seed, lambda, n, m, displacements, slots })
}
