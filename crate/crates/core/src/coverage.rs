//! Edge coverage in the AFL style: a 64 KiB map of saturating hit counters,
//! coarse hit-count buckets, and a campaign-wide virgin map for novelty.

pub const MAP_SIZE: usize = 1 << 16;

/// Raw edge hit counters for one execution.
///
/// Besides the counters the map keeps the list of indices touched since the
/// last reset, so reset and bucketing cost scales with the edges hit rather
/// than with `MAP_SIZE`.
#[derive(Clone)]
pub struct CoverageMap {
    counts: Box<[u8]>,
    prev_location: u16,
    touched: Vec<u16>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for CoverageMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoverageMap")
            .field("edges", &self.touched.len())
            .field("prev_location", &self.prev_location)
            .finish()
    }
}

impl PartialEq for CoverageMap {
    fn eq(&self, other: &Self) -> bool {
        self.prev_location == other.prev_location && self.counts == other.counts
    }
}

impl Eq for CoverageMap {}

impl CoverageMap {
    pub fn new() -> Self {
        Self { counts: vec![0u8; MAP_SIZE].into_boxed_slice(), prev_location: 0, touched: Vec::new() }
    }

    pub fn reset(&mut self) {
        for &idx in &self.touched {
            self.counts[idx as usize] = 0;
        }
        self.touched.clear();
        self.prev_location = 0;
    }

    #[inline]
    pub fn record_edge(&mut self, location_id: u16) {
        let idx = (location_id ^ self.prev_location) as usize;
        let slot = &mut self.counts[idx];
        if *slot == 0 {
            self.touched.push(idx as u16);
        }
        *slot = slot.saturating_add(1);
        self.prev_location = location_id >> 1;
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    pub fn prev_location(&self) -> u16 {
        self.prev_location
    }

    /// Indices with a nonzero counter, in first-hit order.
    pub fn touched(&self) -> &[u16] {
        &self.touched
    }

    /// Number of edges hit; equals the popcount of the bucketed map since
    /// every bucket mask is one-hot.
    pub fn edge_count(&self) -> usize {
        self.touched.len()
    }

    /// Sparse bucketed view: `(index, bucket mask)` sorted by index.
    pub fn bucketed(&self) -> Vec<(u16, u8)> {
        let mut out: Vec<(u16, u8)> =
            self.touched.iter().map(|&i| (i, bucket(self.counts[i as usize]))).collect();
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }

    /// Stable 64-bit hash of the bucketed map (FNV-1a over nonzero entries in
    /// index order).
    pub fn fingerprint(&self) -> u64 {
        fingerprint_sparse(&self.bucketed())
    }
}

const BUCKETS: [u8; 256] = {
    let mut table = [0u8; 256];
    let mut i = 1;
    while i < 256 {
        table[i] = match i {
            1 => 1,
            2 => 2,
            3 => 4,
            4..=7 => 8,
            8..=15 => 16,
            16..=31 => 32,
            32..=127 => 64,
            _ => 128,
        };
        i += 1;
    }
    table
};

#[inline]
pub fn bucket(count: u8) -> u8 {
    BUCKETS[count as usize]
}

/// Maps every raw counter to its one-hot bucket mask.
pub fn classify_counts(counts: &[u8]) -> Vec<u8> {
    counts.iter().map(|&c| bucket(c)).collect()
}

/// Fingerprint of a dense bucketed array; agrees with
/// [`CoverageMap::fingerprint`] for the same execution.
pub fn fingerprint_dense(bucketed: &[u8]) -> u64 {
    let sparse: Vec<(u16, u8)> = bucketed
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .map(|(i, &b)| (i as u16, b))
        .collect();
    fingerprint_sparse(&sparse)
}

fn fingerprint_sparse(entries: &[(u16, u8)]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &(idx, mask) in entries {
        for b in idx.to_le_bytes().into_iter().chain([mask]) {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Novelty {
    Nothing,
    NewBucket,
    NewEdge,
}

impl Novelty {
    pub fn is_new(self) -> bool {
        self != Novelty::Nothing
    }
}

/// Every bucket bit observed so far in the campaign. Bits are only ever set.
#[derive(Clone)]
pub struct VirginMap {
    seen: Box<[u8]>,
    bits_set: u64,
}

impl Default for VirginMap {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for VirginMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirginMap").field("bits_set", &self.bits_set).finish()
    }
}

impl VirginMap {
    pub fn new() -> Self {
        Self { seen: vec![0u8; MAP_SIZE].into_boxed_slice(), bits_set: 0 }
    }

    pub fn seen(&self) -> &[u8] {
        &self.seen
    }

    /// Total number of bucket bits accumulated.
    pub fn popcount(&self) -> u64 {
        self.bits_set
    }

    #[inline]
    fn merge_one(&mut self, idx: usize, mask: u8, result: &mut Novelty) {
        let old = self.seen[idx];
        let fresh = mask & !old;
        if fresh == 0 {
            return;
        }
        *result = (*result).max(if old == 0 { Novelty::NewEdge } else { Novelty::NewBucket });
        self.seen[idx] = old | fresh;
        self.bits_set += fresh.count_ones() as u64;
    }

    /// Compares a dense bucketed array against the virgin map and folds in
    /// any unseen bits.
    pub fn has_new_bits(&mut self, bucketed: &[u8]) -> Novelty {
        let mut result = Novelty::Nothing;
        for (idx, &mask) in bucketed.iter().enumerate().take(MAP_SIZE) {
            if mask != 0 {
                self.merge_one(idx, mask, &mut result);
            }
        }
        result
    }

    /// Same as [`VirginMap::has_new_bits`] on `classify_counts(map.counts())`,
    /// visiting only the touched indices.
    pub fn update_from(&mut self, map: &CoverageMap) -> Novelty {
        let mut result = Novelty::Nothing;
        for &idx in map.touched() {
            let idx = idx as usize;
            self.merge_one(idx, bucket(map.counts[idx]), &mut result);
        }
        result
    }

    /// Checks novelty without modifying the map.
    pub fn peek(&self, map: &CoverageMap) -> Novelty {
        let mut scratch = Novelty::Nothing;
        for &idx in map.touched() {
            let idx = idx as usize;
            let mask = bucket(map.counts[idx]);
            let old = self.seen[idx];
            if mask & !old != 0 {
                scratch = scratch.max(if old == 0 { Novelty::NewEdge } else { Novelty::NewBucket });
            }
        }
        scratch
    }
}
