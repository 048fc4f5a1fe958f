//! Signed-random-projection hash tables over the weight rows of a layer.
//!
//! Every table owns a [`SrpHasher`] with `K` Gaussian hyperplanes; a vector's
//! code sets bit `j` when its projection onto hyperplane `j` is strictly
//! positive. Neuron `i` is stored in the bucket its weight row hashes to, so a
//! query with an input `x` retrieves neurons whose weights point in a similar
//! direction, which are the ones with large `w_i . x`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autotune::AutotunePlan;
use crate::error::{Error, Result};
use crate::sparse::SparseVector;

const INDEX_MAGIC: &[u8; 4] = b"BLTI";
const INDEX_VERSION: u32 = 1;

/// Largest `K` for which bucket arrays are materialized.
pub const MAX_INDEX_K: u32 = 24;

#[inline]
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct SrpHasher {
    k_bits: u32,
    input_dim: usize,
    seed: u64,
    // Column-major: the K projection coefficients of input coordinate `c`
    // live at `[c * K, (c + 1) * K)`.
    projections: Vec<f64>,
}

impl SrpHasher {
    pub fn new(k_bits: u32, input_dim: usize, seed: u64) -> Self {
        assert!((1..=32).contains(&k_bits), "K must lie in 1..=32");
        assert!(input_dim > 0, "input dim must be positive");
        let k = k_bits as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Draw projection rows one at a time so the stream order is the
        // natural `K x input_dim` row-major order.
        let mut projections = vec![0.0; k * input_dim];
        for j in 0..k {
            for c in 0..input_dim {
                projections[c * k + j] = rng.sample(StandardNormal);
            }
        }
        Self {
            k_bits,
            input_dim,
            seed,
            projections,
        }
    }

    /// Hasher with caller-supplied projection rows (`rows[j]` is hyperplane `j`).
    pub fn with_projections(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if !(1..=32).contains(&k) {
            return Err(Error::InvalidArgument(format!("need 1..=32 projections, got {k}")));
        }
        let input_dim = rows[0].len();
        if input_dim == 0 || rows.iter().any(|r| r.len() != input_dim) {
            return Err(Error::InvalidArgument("projection rows must share a positive length".into()));
        }
        let mut projections = vec![0.0; k * input_dim];
        for (j, row) in rows.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                projections[c * k + j] = p;
            }
        }
        Ok(Self {
            k_bits: k as u32,
            input_dim,
            seed: 0,
            projections,
        })
    }

    pub fn k_bits(&self) -> u32 {
        self.k_bits
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Coefficient of hyperplane `bit` on input coordinate `coord`.
    pub fn projection(&self, bit: usize, coord: usize) -> f64 {
        self.projections[coord * self.k_bits as usize + bit]
    }

    #[inline]
    fn finish(acc: &[f64]) -> u32 {
        let mut code = 0u32;
        for (j, &a) in acc.iter().enumerate() {
            if a > 0.0 {
                code |= 1 << j;
            }
        }
        code
    }

    /// Code of a sparse vector, touching only its stored entries.
    pub fn hash(&self, v: &SparseVector) -> Result<u32> {
        if v.dim() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: v.dim(),
            });
        }
        Ok(self.hash_sparse_unchecked(v.indices(), v.values()))
    }

    /// Code of a dense vector. Agrees bit for bit with [`SrpHasher::hash`] on
    /// the sparsified vector since both accumulate in ascending coordinate order.
    pub fn hash_dense(&self, x: &[f64]) -> Result<u32> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.hash_dense_unchecked(x))
    }

    #[inline]
    pub(crate) fn hash_sparse_unchecked(&self, indices: &[u32], values: &[f64]) -> u32 {
        let k = self.k_bits as usize;
        let mut acc = [0.0f64; 32];
        let acc = &mut acc[..k];
        for (&c, &x) in indices.iter().zip(values) {
            if x == 0.0 {
                continue;
            }
            let col = &self.projections[c as usize * k..(c as usize + 1) * k];
            for (a, &p) in acc.iter_mut().zip(col) {
                *a += x * p;
            }
        }
        Self::finish(acc)
    }

    #[inline]
    pub(crate) fn hash_dense_unchecked(&self, x: &[f64]) -> u32 {
        let k = self.k_bits as usize;
        let mut acc = [0.0f64; 32];
        let acc = &mut acc[..k];
        for (col, &xc) in self.projections.chunks_exact(k).zip(x) {
            if xc == 0.0 {
                continue;
            }
            for (a, &p) in acc.iter_mut().zip(col) {
                *a += xc * p;
            }
        }
        Self::finish(acc)
    }
}

/// One table of `2^K` buckets, each holding at most `cap` neuron ids.
#[derive(Debug, Clone)]
pub struct HashTable {
    hasher: SrpHasher,
    buckets: Vec<Vec<u32>>,
    // Insert attempts per bucket since the last (re)build; drives the reservoir.
    seen: Vec<u32>,
    cap: u32,
    rng: ChaCha8Rng,
}

impl HashTable {
    fn new(hasher: SrpHasher, cap: u32) -> Self {
        let n = 1usize << hasher.k_bits;
        let rng = Self::overflow_rng(hasher.seed);
        Self {
            hasher,
            buckets: vec![Vec::new(); n],
            seen: vec![0; n],
            cap,
            rng,
        }
    }

    fn overflow_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5bd1_e995))
    }

    fn clear(&mut self) {
        for b in &mut self.buckets {
            b.clear();
        }
        self.seen.fill(0);
        self.rng = Self::overflow_rng(self.hasher.seed);
    }

    pub fn hasher(&self) -> &SrpHasher {
        &self.hasher
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn bucket(&self, code: u32) -> &[u32] {
        &self.buckets[code as usize]
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    /// Adds `id` to a bucket. Once the bucket is full, the `n`-th insert
    /// attempt replaces a uniformly chosen slot with probability `cap / n`, so
    /// the bucket stays a uniform sample of everything hashed into it.
    pub(crate) fn insert(&mut self, code: u32, id: u32) {
        let b = code as usize;
        let bucket = &mut self.buckets[b];
        if bucket.contains(&id) {
            return;
        }
        self.seen[b] = self.seen[b].saturating_add(1);
        if bucket.len() < self.cap as usize {
            bucket.push(id);
        } else {
            let slot = self.rng.random_range(0..self.seen[b]);
            if slot < self.cap {
                bucket[slot as usize] = id;
            }
        }
    }

    /// Adds `id` to a bucket, evicting a uniformly chosen entry if it is full.
    pub(crate) fn insert_evicting(&mut self, code: u32, id: u32) {
        let b = code as usize;
        let bucket = &mut self.buckets[b];
        if bucket.contains(&id) {
            return;
        }
        self.seen[b] = self.seen[b].saturating_add(1);
        if bucket.len() < self.cap as usize {
            bucket.push(id);
        } else {
            let slot = self.rng.random_range(0..self.cap);
            bucket[slot as usize] = id;
        }
    }

    /// Mean size of the nonempty buckets.
    pub fn mean_nonempty_occupancy(&self) -> f64 {
        let (n, total) = self
            .buckets
            .iter()
            .filter(|b| !b.is_empty())
            .fold((0usize, 0usize), |(n, t), b| (n + 1, t + b.len()));
        if n == 0 {
            0.0
        } else {
            total as f64 / n as f64
        }
    }

    pub fn max_occupancy(&self) -> usize {
        self.buckets.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn total_entries(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }
}

/// Reusable per-worker buffers for [`NeuronIndex::query_with`].
#[derive(Debug, Default, Clone)]
pub struct QueryScratch {
    counts: Vec<u32>,
    touched: Vec<u32>,
}

impl QueryScratch {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Neurons returned by a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    /// Ids retrieved from buckets, ascending.
    pub sampled: Vec<u32>,
    /// Fallback ids added to reach the minimum count, ascending.
    pub padded: Vec<u32>,
    /// The bucket code selected in each table.
    pub codes: Vec<u32>,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.sampled.len() + self.padded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All returned ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.len());
        ids.extend_from_slice(&self.sampled);
        ids.extend_from_slice(&self.padded);
        ids.sort_unstable();
        ids
    }
}

/// Upper bound on the number of ids a query returns, as a multiple of `min_count`.
pub const QUERY_BUDGET_FACTOR: usize = 4;

#[derive(Debug, Clone)]
pub struct NeuronIndex {
    tables: Vec<HashTable>,
    num_neurons: usize,
    input_dim: usize,
    k_bits: u32,
    cap: u32,
}

fn table_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<u64> = Vec::with_capacity(n);
    while seeds.len() < n {
        let s: u64 = rng.random();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

fn check_weights(weights: &[f64], d: usize, d_prev: usize) -> Result<()> {
    if d == 0 || d_prev == 0 {
        return Err(Error::InvalidArgument("index needs at least one neuron and one input".into()));
    }
    if weights.len() != d * d_prev {
        return Err(Error::Dimension {
            expected: d * d_prev,
            got: weights.len(),
        });
    }
    Ok(())
}

impl NeuronIndex {
    /// Hashes every row of the row-major `d x d_prev` matrix `weights` into
    /// `L` fresh tables. Table seeds are derived from `seed`.
    pub fn build(weights: &[f64], plan: &AutotunePlan, seed: u64) -> Result<Self> {
        let d = plan.layer_dim;
        let d_prev = plan.prev_dim;
        check_weights(weights, d, d_prev)?;
        if plan.k_bits == 0 || plan.k_bits > MAX_INDEX_K {
            return Err(Error::InvalidArgument(format!(
                "K = {} outside the supported range 1..={MAX_INDEX_K}",
                plan.k_bits
            )));
        }
        if plan.num_tables == 0 || plan.bucket_cap == 0 {
            return Err(Error::InvalidArgument("L and R must be at least 1".into()));
        }
        if d > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many neurons".into()));
        }
        let seeds = table_seeds(seed, plan.num_tables as usize);
        let tables = seeds
            .into_par_iter()
            .map(|s| HashTable::new(SrpHasher::new(plan.k_bits, d_prev, s), plan.bucket_cap))
            .collect();
        let mut ix = Self {
            tables,
            num_neurons: d,
            input_dim: d_prev,
            k_bits: plan.k_bits,
            cap: plan.bucket_cap,
        };
        ix.fill(weights);
        Ok(ix)
    }

    fn fill(&mut self, weights: &[f64]) {
        let d_prev = self.input_dim;
        self.tables.par_iter_mut().for_each(|t| {
            for (id, row) in weights.chunks_exact(d_prev).enumerate() {
                let code = t.hasher.hash_dense_unchecked(row);
                t.insert(code, id as u32);
            }
        });
    }

    /// Re-hashes all rows with the existing hashers. Buckets (including any
    /// inserted labels) are discarded first.
    pub fn rebuild(&mut self, weights: &[f64]) -> Result<()> {
        check_weights(weights, self.num_neurons, self.input_dim)?;
        self.tables.par_iter_mut().for_each(HashTable::clear);
        self.fill(weights);
        Ok(())
    }

    pub fn tables(&self) -> &[HashTable] {
        &self.tables
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.num_neurons
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn k_bits(&self) -> u32 {
        self.k_bits
    }

    pub fn bucket_cap(&self) -> u32 {
        self.cap
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.tables.iter().map(|t| t.hasher.seed).collect()
    }

    fn check_input(&self, input: &SparseVector) -> Result<()> {
        if input.dim() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: input.dim(),
            });
        }
        Ok(())
    }

    /// Bucket code of `input` in every table.
    pub fn codes(&self, input: &SparseVector) -> Result<Vec<u32>> {
        self.check_input(input)?;
        Ok(self.codes_unchecked(input))
    }

    fn codes_unchecked(&self, input: &SparseVector) -> Vec<u32> {
        self.tables
            .iter()
            .map(|t| t.hasher.hash_sparse_unchecked(input.indices(), input.values()))
            .collect()
    }

    /// Deduplicated union of the selected buckets of the first `num_tables`
    /// tables, ascending, without truncation or padding.
    pub fn candidates(&self, input: &SparseVector, num_tables: usize) -> Result<Vec<u32>> {
        self.check_input(input)?;
        let mut ids: Vec<u32> = self
            .tables
            .iter()
            .take(num_tables)
            .flat_map(|t| {
                let code = t.hasher.hash_sparse_unchecked(input.indices(), input.values());
                t.bucket(code).iter().copied()
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }

    pub fn query(&self, input: &SparseVector, min_count: usize) -> Result<QueryResult> {
        self.query_with(input, min_count, &mut QueryScratch::new())
    }

    /// Union of the buckets `input` hashes to, one per table.
    ///
    /// Fewer than `min_count` ids are topped up round-robin from a position
    /// derived from the codes. More than `4 * min_count` ids are cut down to
    /// the ones found in the most tables, ties going to the smaller id.
    pub fn query_with(
        &self,
        input: &SparseVector,
        min_count: usize,
        scratch: &mut QueryScratch,
    ) -> Result<QueryResult> {
        self.check_input(input)?;
        let d = self.num_neurons;
        if min_count == 0 || min_count > d {
            return Err(Error::InvalidArgument(format!(
                "min_count must lie in 1..={d}, got {min_count}"
            )));
        }
        let codes = self.codes_unchecked(input);
        Ok(self.collect(codes, min_count, scratch))
    }

    fn collect(&self, codes: Vec<u32>, min_count: usize, scratch: &mut QueryScratch) -> QueryResult {
        let d = self.num_neurons;
        if scratch.counts.len() != d {
            scratch.counts.clear();
            scratch.counts.resize(d, 0);
        }
        scratch.touched.clear();
        let counts = &mut scratch.counts;
        let touched = &mut scratch.touched;
        for (t, &code) in self.tables.iter().zip(&codes) {
            for &id in t.bucket(code) {
                let c = &mut counts[id as usize];
                if *c == 0 {
                    touched.push(id);
                }
                *c += 1;
            }
        }

        let budget = QUERY_BUDGET_FACTOR * min_count;
        let mut sampled: Vec<u32> = if touched.len() > budget {
            let by_rank = |a: &u32, b: &u32| {
                counts[*b as usize]
                    .cmp(&counts[*a as usize])
                    .then(a.cmp(b))
            };
            touched.select_nth_unstable_by(budget - 1, by_rank);
            touched[..budget].to_vec()
        } else {
            touched.clone()
        };
        sampled.sort_unstable();

        let mut padded = Vec::new();
        if touched.len() < min_count {
            let mut h = 0u64;
            for &c in &codes {
                h = splitmix64(h ^ c as u64);
            }
            let mut id = (h % d as u64) as usize;
            while sampled.len() + padded.len() < min_count {
                if counts[id] == 0 {
                    padded.push(id as u32);
                }
                id += 1;
                if id == d {
                    id = 0;
                }
            }
            padded.sort_unstable();
        }

        for &id in touched.iter() {
            counts[id as usize] = 0;
        }
        QueryResult {
            sampled,
            padded,
            codes,
        }
    }

    /// Adds each label to the selected bucket of every table. A full bucket
    /// gives up a uniformly chosen entry, so the label always lands.
    pub fn insert_labels(&mut self, labels: &[u32], selected_codes: &[u32]) -> Result<()> {
        if selected_codes.len() != self.tables.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} codes, got {}",
                self.tables.len(),
                selected_codes.len()
            )));
        }
        let n_buckets = 1u64 << self.k_bits;
        if let Some(&bad) = selected_codes.iter().find(|&&c| c as u64 >= n_buckets) {
            return Err(Error::InvalidArgument(format!("code {bad} out of range for K = {}", self.k_bits)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_neurons) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} neurons",
                self.num_neurons
            )));
        }
        for (t, &code) in self.tables.iter_mut().zip(selected_codes) {
            for &label in labels {
                t.insert_evicting(code, label);
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        for v in [
            INDEX_VERSION,
            self.k_bits,
            self.tables.len() as u32,
            self.cap,
            self.num_neurons as u32,
            self.input_dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.tables {
            w.write_all(&t.hasher.seed.to_le_bytes())?;
        }
        for t in &self.tables {
            let nonempty = t.buckets.iter().filter(|b| !b.is_empty()).count() as u32;
            w.write_all(&nonempty.to_le_bytes())?;
            for (code, b) in t.buckets.iter().enumerate().filter(|(_, b)| !b.is_empty()) {
                w.write_all(&(code as u32).to_le_bytes())?;
                w.write_all(&(b.len() as u32).to_le_bytes())?;
                for &id in b {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let k_bits = read_u32(r)?;
        let num_tables = read_u32(r)? as usize;
        let cap = read_u32(r)?;
        let d = read_u32(r)? as usize;
        let d_prev = read_u32(r)? as usize;
        if !(1..=MAX_INDEX_K).contains(&k_bits) || num_tables == 0 || cap == 0 || d == 0 || d_prev == 0 {
            return Err(Error::Format("invalid index header".into()));
        }
        let mut seeds = Vec::with_capacity(num_tables);
        for _ in 0..num_tables {
            seeds.push(read_u64(r)?);
        }
        let mut tables = Vec::with_capacity(num_tables);
        for seed in seeds {
            let mut t = HashTable::new(SrpHasher::new(k_bits, d_prev, seed), cap);
            let nonempty = read_u32(r)? as usize;
            for _ in 0..nonempty {
                let code = read_u32(r)? as usize;
                let count = read_u32(r)? as usize;
                if code >= t.buckets.len() || count > cap as usize {
                    return Err(Error::Format(format!("bad bucket record (code {code}, count {count})")));
                }
                let mut ids = Vec::with_capacity(count);
                for _ in 0..count {
                    let id = read_u32(r)?;
                    if id as usize >= d || ids.contains(&id) {
                        return Err(Error::Format(format!("bad neuron id {id} in bucket {code}")));
                    }
                    ids.push(id);
                }
                t.seen[code] = count as u32;
                t.buckets[code] = ids;
            }
            tables.push(t);
        }
        Ok(Self {
            tables,
            num_neurons: d,
            input_dim: d_prev,
            k_bits,
            cap,
        })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::sparsify;

    fn plan(d: usize, d_prev: usize, k: u32, l: u32, r: u32) -> AutotunePlan {
        AutotunePlan::manual(k, l, r, d, d_prev, 0.1).unwrap()
    }

    fn random_rows(d: usize, d_prev: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d * d_prev).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn assert_caps(ix: &NeuronIndex) {
        for t in ix.tables() {
            assert!(t.max_occupancy() <= ix.bucket_cap() as usize);
            for code in 0..t.num_buckets() as u32 {
                let mut b = t.bucket(code).to_vec();
                b.sort_unstable();
                b.dedup();
                assert_eq!(b.len(), t.bucket(code).len(), "duplicate id in bucket");
            }
        }
    }

    #[test]
    fn hash_with_axis_projections() {
        let h = SrpHasher::with_projections(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = SparseVector::new(2, vec![0], vec![2.0]).unwrap();
        assert_eq!(h.hash(&v).unwrap(), 0b01);
        assert_eq!(h.hash(&SparseVector::zeros(2)).unwrap(), 0);
        let v = SparseVector::new(2, vec![0, 1], vec![-1.0, 3.0]).unwrap();
        assert_eq!(h.hash(&v).unwrap(), 0b10);
    }

    #[test]
    fn hash_of_basis_vector_is_column_sign_pattern() {
        let h = SrpHasher::new(3, 5, 42);
        let e0 = SparseVector::new(5, vec![0], vec![1.0]).unwrap();
        // Recompute the projection rows straight from the seeded stream.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let expected = (0..3).fold(0u32, |acc, j| acc | (((rows[j][0] > 0.0) as u32) << j));
        assert_eq!(h.hash(&e0).unwrap(), expected);
        for j in 0..3 {
            for c in 0..5 {
                assert_eq!(h.projection(j, c), rows[j][c]);
            }
        }
    }

    #[test]
    fn hash_rejects_wrong_dim() {
        let h = SrpHasher::new(4, 8, 1);
        assert!(matches!(
            h.hash(&SparseVector::zeros(7)),
            Err(Error::Dimension { expected: 8, got: 7 })
        ));
        assert!(h.hash_dense(&[0.0; 9]).is_err());
    }

    #[test]
    fn sparse_and_dense_hash_agree() {
        let h = SrpHasher::new(16, 40, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: Vec<f64> = (0..40)
                .map(|_| if rng.random_bool(0.3) { rng.sample(StandardNormal) } else { 0.0 })
                .collect();
            assert_eq!(h.hash(&sparsify(&x)).unwrap(), h.hash_dense(&x).unwrap());
        }
    }

    #[test]
    fn hasher_is_deterministic() {
        let a = SrpHasher::new(8, 10, 77);
        let b = SrpHasher::new(8, 10, 77);
        assert_eq!(a.projections, b.projections);
        assert_ne!(a.projections, SrpHasher::new(8, 10, 78).projections);
    }

    #[test]
    fn single_neuron_index() {
        let ix = NeuronIndex::build(&[0.3, -1.2, 0.5], &plan(1, 3, 4, 3, 2), 5).unwrap();
        for t in ix.tables() {
            let occupied: Vec<_> = (0..16).filter(|&c| !t.bucket(c).is_empty()).collect();
            assert_eq!(occupied.len(), 1);
            assert_eq!(t.bucket(occupied[0]), &[0]);
        }
        let x = SparseVector::new(3, vec![1], vec![4.0]).unwrap();
        assert_eq!(ix.query(&x, 1).unwrap().ids(), vec![0]);
    }

    #[test]
    fn identical_rows_share_a_bucket() {
        let row = [0.5, -0.25, 1.0];
        let weights: Vec<f64> = row.iter().copied().cycle().take(12).collect();
        let ix = NeuronIndex::build(&weights, &plan(4, 3, 3, 2, 8), 1).unwrap();
        for t in ix.tables() {
            let mut b = t.bucket(t.hasher().hash_dense(&row).unwrap()).to_vec();
            b.sort_unstable();
            assert_eq!(b, vec![0, 1, 2, 3]);
        }
        let capped = NeuronIndex::build(&weights, &plan(4, 3, 3, 2, 3), 1).unwrap();
        for t in capped.tables() {
            assert_eq!(t.bucket(t.hasher().hash_dense(&row).unwrap()).len(), 3);
        }
        assert_caps(&capped);
    }

    #[test]
    fn occupancy_near_expected() {
        let (d, d_prev) = (1000, 32);
        let ix = NeuronIndex::build(&random_rows(d, d_prev, 11), &plan(d, d_prev, 4, 8, 2000), 2).unwrap();
        let expected = d as f64 / 16.0;
        for t in ix.tables() {
            let mean = t.mean_nonempty_occupancy();
            assert!((mean - expected).abs() <= 0.35 * expected, "mean occupancy {mean}");
            assert_eq!(t.total_entries(), d);
        }
    }

    #[test]
    fn query_union_of_two_tables() {
        let mut ix = NeuronIndex::build(&[0.0; 8], &plan(4, 2, 2, 2, 4), 3).unwrap();
        for t in &mut ix.tables {
            t.clear();
        }
        let x = SparseVector::new(2, vec![0], vec![1.0]).unwrap();
        let codes = ix.codes(&x).unwrap();
        ix.tables[0].insert(codes[0], 1);
        ix.tables[0].insert(codes[0], 2);
        ix.tables[1].insert(codes[1], 2);
        ix.tables[1].insert(codes[1], 3);
        let res = ix.query(&x, 3).unwrap();
        assert_eq!(res.ids(), vec![1, 2, 3]);
        assert!(res.padded.is_empty());
        assert_eq!(res.codes, codes);
    }

    #[test]
    fn query_pads_and_truncates() {
        let mut ix = NeuronIndex::build(&[0.0; 40], &plan(20, 2, 2, 3, 20), 3).unwrap();
        for t in &mut ix.tables {
            t.clear();
        }
        let x = SparseVector::new(2, vec![1], vec![1.0]).unwrap();
        let codes = ix.codes(&x).unwrap();
        ix.tables[0].insert(codes[0], 4);

        let res = ix.query(&x, 5).unwrap();
        assert_eq!(res.sampled, vec![4]);
        assert_eq!(res.padded.len(), 4);
        assert!(!res.padded.contains(&4));
        assert_eq!(res.ids().len(), 5);
        // Deterministic padding.
        assert_eq!(ix.query(&x, 5).unwrap(), res);

        // Twelve candidates, budget 4 * 2 = 8: the multiplicity-3 and -2 ids
        // come first, then the smallest singletons.
        for id in 0..12 {
            ix.tables[0].insert(codes[0], id);
        }
        for id in [10, 11] {
            ix.tables[1].insert(codes[1], id);
            ix.tables[2].insert(codes[2], id);
        }
        ix.tables[1].insert(codes[1], 9);
        let res = ix.query(&x, 2).unwrap();
        assert_eq!(res.sampled, vec![0, 1, 2, 3, 4, 9, 10, 11]);
        assert!(res.padded.is_empty());
    }

    #[test]
    fn query_rejects_bad_min_count() {
        let ix = NeuronIndex::build(&random_rows(10, 4, 1), &plan(10, 4, 2, 2, 10), 1).unwrap();
        let x = SparseVector::zeros(4);
        assert!(ix.query(&x, 0).is_err());
        assert!(ix.query(&x, 11).is_err());
        assert!(ix.query(&SparseVector::zeros(5), 1).is_err());
    }

    #[test]
    fn query_returns_own_row_more_often() {
        let (d, d_prev) = (100, 24);
        let mut hits_self = 0;
        let mut hits_other = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w: Vec<f64> = (0..d * d_prev).map(|_| rng.sample(StandardNormal)).collect();
            for row in w.chunks_exact_mut(d_prev) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= n);
            }
            let ix = NeuronIndex::build(&w, &plan(d, d_prev, 6, 4, 10), seed).unwrap();
            let x = sparsify(&w[5 * d_prev..6 * d_prev]);
            let ids = ix.query(&x, 1).unwrap().ids();
            hits_self += ids.contains(&5) as u32;
            hits_other += ids.contains(&42) as u32;
        }
        assert!(hits_self > hits_other, "self {hits_self} other {hits_other}");
    }

    #[test]
    fn more_tables_never_shrink_candidates() {
        let (d, d_prev) = (300, 16);
        let ix = NeuronIndex::build(&random_rows(d, d_prev, 8), &plan(d, d_prev, 5, 10, 30), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let x: Vec<f64> = (0..d_prev).map(|_| rng.sample(StandardNormal)).collect();
            let x = sparsify(&x);
            let mut prev = Vec::new();
            for l in 1..=10 {
                let cur = ix.candidates(&x, l).unwrap();
                assert!(prev.iter().all(|id| cur.binary_search(id).is_ok()));
                prev = cur;
            }
        }
    }

    #[test]
    fn insert_labels_behaviour() {
        let (d, d_prev) = (50, 8);
        let mut ix = NeuronIndex::build(&random_rows(d, d_prev, 2), &plan(d, d_prev, 3, 2, 100), 6).unwrap();
        let code = (0..8u32).find(|&c| !ix.tables[0].bucket(c).contains(&7)).unwrap();
        let codes = vec![code, code];
        let before: Vec<usize> = ix.tables.iter().map(|t| t.bucket(code).len()).collect();
        ix.insert_labels(&[7], &codes).unwrap();
        assert!(ix.tables[0].bucket(code).contains(&7));
        let after: Vec<usize> = ix.tables.iter().map(|t| t.bucket(code).len()).collect();
        ix.insert_labels(&[7], &codes).unwrap();
        let again: Vec<usize> = ix.tables.iter().map(|t| t.bucket(code).len()).collect();
        assert_eq!(after, again);
        assert!(after[0] == before[0] + 1);

        assert!(ix.insert_labels(&[7], &[code]).is_err());
        assert!(ix.insert_labels(&[7], &[8, 0]).is_err());
        assert!(ix.insert_labels(&[50], &codes).is_err());
    }

    #[test]
    fn full_bucket_keeps_cap() {
        let weights = vec![1.0; 20 * 2];
        let mut ix = NeuronIndex::build(&weights, &plan(20, 2, 2, 1, 4), 6).unwrap();
        let code = ix.tables[0].hasher().hash_dense(&[1.0, 1.0]).unwrap();
        assert_eq!(ix.tables[0].bucket(code).len(), 4);
        for label in 0..20 {
            ix.insert_labels(&[label], &[code]).unwrap();
            assert_eq!(ix.tables[0].bucket(code).len(), 4);
        }
        assert_caps(&ix);
    }

    #[test]
    fn rebuild_is_deterministic_and_drops_labels() {
        let (d, d_prev) = (200, 12);
        let w = random_rows(d, d_prev, 5);
        let p = plan(d, d_prev, 4, 6, 15);
        let built = NeuronIndex::build(&w, &p, 10).unwrap();
        let mut ix = built.clone();
        let codes = vec![3; 6];
        ix.insert_labels(&[1, 2, 3], &codes).unwrap();
        ix.rebuild(&w).unwrap();
        for (a, b) in ix.tables().iter().zip(built.tables()) {
            assert_eq!(a.buckets, b.buckets);
        }
        assert_eq!(ix.seeds(), built.seeds());

        ix.rebuild(&vec![0.0; d * d_prev]).unwrap();
        for t in ix.tables() {
            assert_eq!(t.bucket(0).len(), 15);
            assert_eq!(t.total_entries(), 15);
        }
        assert_caps(&ix);
    }

    #[test]
    fn equal_seeds_equal_indexes() {
        let w = random_rows(120, 10, 3);
        let p = plan(120, 10, 5, 7, 6);
        let a = NeuronIndex::build(&w, &p, 42).unwrap();
        let b = NeuronIndex::build(&w, &p, 42).unwrap();
        for (x, y) in a.tables().iter().zip(b.tables()) {
            assert_eq!(x.buckets, y.buckets);
        }
        let seeds = a.seeds();
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
    }

    #[test]
    fn serialization_round_trip() {
        let w = random_rows(90, 6, 4);
        let mut ix = NeuronIndex::build(&w, &plan(90, 6, 4, 3, 9), 8).unwrap();
        ix.insert_labels(&[5, 80], &[1, 2, 3]).unwrap();
        let mut bytes = Vec::new();
        ix.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"BLTI");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = NeuronIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.seeds(), ix.seeds());
        for (a, b) in back.tables().iter().zip(ix.tables()) {
            assert_eq!(a.buckets, b.buckets);
            assert_eq!(a.hasher.projections, b.hasher.projections);
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);

        bytes[0] = b'X';
        assert!(matches!(NeuronIndex::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
