//! Page-level near-duplicate detection.
//!
//! Pages are shingled into character n-grams, each shingle is hashed to 64
//! bits (FNV-1a with a splitmix64 finalizer), and a signature keeps the
//! minimum of `k` affine permutations `(a·x + b) mod (2^61 − 1)` whose
//! coefficients come from a ChaCha8 stream seeded with `seed`. Everything is
//! portable across machines: the same text, `n`, `k` and `seed` give the same
//! signature.
//!
//! Candidate pairs come from LSH banding (`bands × rows = k`) and are kept
//! only when the estimated Jaccard reaches the threshold. Kept pairs are
//! merged transitively into clusters.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::script::nfc;
use crate::types::PageRef;

const MERSENNE_61: u64 = (1 << 61) - 1;

/// `(a * x + b) mod (2^61 - 1)` for `a, b, x < 2^61 - 1`, without division.
fn affine_mod_m61(a: u64, x: u64, b: u64) -> u64 {
    let m = u128::from(MERSENNE_61);
    let v = u128::from(a) * u128::from(x) + u128::from(b);
    let v = (v & m) + (v >> 61);
    let v = ((v & m) + (v >> 61)) as u64;
    if v >= MERSENNE_61 {
        v - MERSENNE_61
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DedupError {
    #[error("cannot shingle empty text{}", .0.as_ref().map(|p| format!(" (page {p})")).unwrap_or_default())]
    EmptyText(Option<PageRef>),
    #[error("shingle length must be at least 2, got {0}")]
    InvalidShingleLength(usize),
    #[error("cannot sign an empty shingle set")]
    EmptyShingleSet,
    #[error("signature length must be at least 1")]
    InvalidPermutationCount,
    #[error("signatures differ in length or seed ({0} vs {1})")]
    IncompatibleSignatures(String, String),
    #[error("bands × rows = {bands} × {rows} does not equal k = {k}")]
    InvalidBanding { bands: usize, rows: usize, k: usize },
    #[error("jaccard threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("page {0} appears more than once")]
    DuplicatePage(PageRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShingleSet {
    /// Sorted, distinct shingle hashes.
    pub hashes: Vec<u64>,
    pub n: usize,
}

impl ShingleSet {
    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupCluster {
    pub cluster_id: usize,
    pub members: Vec<PageRef>,
    pub representative: PageRef,
}

impl DupCluster {
    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupParams {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub bands: usize,
    pub rows: usize,
    pub jaccard_threshold: f64,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            n: 5,
            k: 256,
            seed: 42,
            bands: 32,
            rows: 8,
            jaccard_threshold: 0.8,
        }
    }
}

impl DedupParams {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.n < 2 {
            return Err(DedupError::InvalidShingleLength(self.n));
        }
        if self.k == 0 {
            return Err(DedupError::InvalidPermutationCount);
        }
        if self.bands * self.rows != self.k {
            return Err(DedupError::InvalidBanding {
                bands: self.bands,
                rows: self.rows,
                k: self.k,
            });
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(DedupError::InvalidThreshold(self.jaccard_threshold));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of a byte string.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(h)
}

/// Text as it is shingled: NFC with whitespace runs collapsed and trimmed.
pub fn canonical_text(text: &str) -> String {
    nfc(text).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hash every distinct character n-gram of `text`. Text shorter than `n`
/// becomes one whole-text shingle.
pub fn shingle(text: &str, n: usize) -> Result<ShingleSet, DedupError> {
    if n < 2 {
        return Err(DedupError::InvalidShingleLength(n));
    }
    let text = canonical_text(text);
    if text.is_empty() {
        return Err(DedupError::EmptyText(None));
    }
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let chars = bounds.len() - 1;
    let mut hashes: Vec<u64> = if chars < n {
        vec![hash_bytes(text.as_bytes())]
    } else {
        (0..=chars - n)
            .map(|i| hash_bytes(&text.as_bytes()[bounds[i]..bounds[i + n]]))
            .collect()
    };
    hashes.sort_unstable();
    hashes.dedup();
    Ok(ShingleSet { hashes, n })
}

/// The `k` affine permutations derived from `seed`.
#[derive(Debug, Clone)]
pub struct PermutationFamily {
    coefficients: Vec<(u64, u64)>,
    seed: u64,
}

impl PermutationFamily {
    pub fn new(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coefficients = (0..k)
            .map(|_| {
                (
                    rng.random_range(1..MERSENNE_61),
                    rng.random_range(0..MERSENNE_61),
                )
            })
            .collect();
        Self { coefficients, seed }
    }

    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    pub fn sign(&self, shingles: &ShingleSet) -> Result<MinHashSignature, DedupError> {
        if shingles.is_empty() {
            return Err(DedupError::EmptyShingleSet);
        }
        if self.coefficients.is_empty() {
            return Err(DedupError::InvalidPermutationCount);
        }
        let mut values = vec![u64::MAX; self.coefficients.len()];
        for &h in &shingles.hashes {
            let x = h % MERSENNE_61;
            for (slot, &(a, b)) in values.iter_mut().zip(&self.coefficients) {
                let v = affine_mod_m61(a, x, b);
                if v < *slot {
                    *slot = v;
                }
            }
        }
        Ok(MinHashSignature {
            values,
            k: self.coefficients.len(),
            seed: self.seed,
        })
    }
}

pub fn minhash_signature(
    shingles: &ShingleSet,
    k: usize,
    seed: u64,
) -> Result<MinHashSignature, DedupError> {
    if k == 0 {
        return Err(DedupError::InvalidPermutationCount);
    }
    PermutationFamily::new(k, seed).sign(shingles)
}

/// Fraction of signature positions that agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    if a.k != b.k || a.seed != b.seed || a.values.len() != b.values.len() || a.k == 0 {
        return Err(DedupError::IncompatibleSignatures(
            format!("k={} seed={}", a.k, a.seed),
            format!("k={} seed={}", b.k, b.seed),
        ));
    }
    let matches = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.k as f64)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller root wins, so roots do not depend on merge order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Cluster pages into near-duplicate groups. Clusters partition the input,
/// are sorted by representative (the smallest page ref in the cluster) and
/// numbered in that order.
pub fn find_duplicates(
    pages: &[(PageRef, String)],
    params: &DedupParams,
) -> Result<Vec<DupCluster>, DedupError> {
    params.validate()?;
    let mut order: Vec<usize> = (0..pages.len()).collect();
    order.sort_by(|&a, &b| pages[a].0.cmp(&pages[b].0));
    for w in order.windows(2) {
        if pages[w[0]].0 == pages[w[1]].0 {
            return Err(DedupError::DuplicatePage(pages[w[0]].0.clone()));
        }
    }
    let sorted: Vec<&(PageRef, String)> = order.iter().map(|&i| &pages[i]).collect();

    let family = PermutationFamily::new(params.k, params.seed);
    let signatures = sorted
        .par_iter()
        .map(|(page_ref, text)| {
            let shingles = shingle(text, params.n).map_err(|e| match e {
                DedupError::EmptyText(_) => DedupError::EmptyText(Some(page_ref.clone())),
                other => other,
            })?;
            family.sign(&shingles)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for band in 0..params.bands {
        let range = band * params.rows..(band + 1) * params.rows;
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (idx, sig) in signatures.iter().enumerate() {
            buckets.entry(&sig.values[range.clone()]).or_default().push(idx);
        }
        for members in buckets.values() {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    candidates.insert((a.min(b), a.max(b)));
                }
            }
        }
    }

    let mut sets = DisjointSet::new(sorted.len());
    for &(a, b) in &candidates {
        if estimate_jaccard(&signatures[a], &signatures[b])? >= params.jaccard_threshold {
            sets.union(a, b);
        }
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); sorted.len()];
    for idx in 0..sorted.len() {
        let root = sets.find(idx);
        groups[root].push(idx);
    }
    // Roots are the minimum index of each group and indices follow page-ref
    // order, so iterating roots in order yields clusters sorted by representative.
    Ok(groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .enumerate()
        .map(|(cluster_id, members)| {
            let members: Vec<PageRef> = members.iter().map(|&i| sorted[i].0.clone()).collect();
            DupCluster {
                cluster_id,
                representative: members[0].clone(),
                members,
            }
        })
        .collect())
}

/// Pages that are not the representative of their cluster.
pub fn redundant_pages(clusters: &[DupCluster]) -> BTreeSet<PageRef> {
    clusters
        .iter()
        .flat_map(|c| c.members.iter().filter(|m| **m != c.representative).cloned())
        .collect()
}
