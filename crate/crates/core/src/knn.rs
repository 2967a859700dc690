//! Top-N cosine search over a normalized embedding matrix.
//!
//! Scores are raw dot products, which equal cosine similarity on unit
//! vectors. Results are ordered by descending score with ties broken by
//! ascending row index, so every search is fully deterministic.
//!
//! The optional IVF mode partitions rows with a seeded, fixed-iteration
//! spherical k-means and scans only the lists whose centroids are closest to
//! the query. Probing every list scans every row, so the result then matches
//! exact mode entry for entry.

use std::cmp::Ordering;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{l2_norm, EmbeddingMatrix, MIN_ROW_NORM};

pub const KMEANS_ITERATIONS: usize = 25;
pub const QUERY_NORM_TOLERANCE: f64 = 1e-3;

pub const IVF_MAGIC: [u8; 4] = *b"XMIV";
pub const IVF_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum IndexMode {
    #[default]
    Exact,
    Ivf { num_lists: usize, seed: u64 },
}

/// How many inverted lists an IVF search scans. Ignored in exact mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Probes {
    #[default]
    All,
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub entries: Vec<Hit>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|h| h.row)
    }
}

/// Dot product accumulated left to right in `f32`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending score, then ascending row.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.row.cmp(&b.row))
}

fn top_n(mut hits: Vec<Hit>, n: usize) -> Vec<Hit> {
    if n == 0 {
        return Vec::new();
    }
    if hits.len() > n {
        hits.select_nth_unstable_by(n - 1, hit_order);
        hits.truncate(n);
    }
    hits.sort_unstable_by(hit_order);
    hits
}

/// Inverted lists and their centroids, as persisted in the sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfLayout {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<usize>>,
}

impl IvfLayout {
    pub fn num_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    pub fn list(&self, list: usize) -> &[usize] {
        &self.lists[list]
    }

    pub fn train(matrix: &EmbeddingMatrix, num_lists: usize, seed: u64) -> Result<Self> {
        let count = matrix.count();
        if count == 0 {
            return Err(Error::EmptyMatrix);
        }
        if num_lists == 0 {
            return Err(Error::InvalidConfig("num_lists must be >= 1".into()));
        }
        let k = num_lists.min(count);
        let dim = matrix.dim();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = rand::seq::index::sample(&mut rng, count, k);
        let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
        for row in init.iter() {
            centroids.extend_from_slice(matrix.row(row));
        }

        let mut assignment = vec![0usize; count];
        let mut sums = vec![0f64; k * dim];
        let mut sizes = vec![0usize; k];
        for _ in 0..KMEANS_ITERATIONS {
            assign(matrix, &centroids, dim, &mut assignment);
            sums.iter_mut().for_each(|s| *s = 0.0);
            sizes.iter_mut().for_each(|s| *s = 0);
            for (row, &c) in matrix.rows().zip(&assignment) {
                sizes[c] += 1;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                    *s += x as f64;
                }
            }
            for c in 0..k {
                if sizes[c] == 0 {
                    continue;
                }
                let sum = &sums[c * dim..(c + 1) * dim];
                let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < MIN_ROW_NORM {
                    continue;
                }
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(sum) {
                    *dst = (s / norm) as f32;
                }
            }
        }
        assign(matrix, &centroids, dim, &mut assignment);

        let mut lists = vec![Vec::new(); k];
        for (row, &c) in assignment.iter().enumerate() {
            lists[c].push(row);
        }
        Ok(Self {
            dim,
            centroids,
            lists,
        })
    }

    /// Lists ordered by centroid similarity to `query`, ties by list index.
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut hits: Vec<Hit> = (0..self.num_lists())
            .map(|l| Hit {
                row: l,
                score: dot(query, self.centroid(l)),
            })
            .collect();
        hits.sort_unstable_by(hit_order);
        hits.into_iter().map(|h| h.row).collect()
    }

    fn check_against(&self, matrix: &EmbeddingMatrix) -> Result<()> {
        if self.dim != matrix.dim() {
            return Err(Error::DimMismatch {
                expected: matrix.dim(),
                found: self.dim,
            });
        }
        let mut seen = vec![false; matrix.count()];
        for list in &self.lists {
            for &row in list {
                match seen.get_mut(row) {
                    Some(s) if !*s => *s = true,
                    Some(_) => {
                        return Err(Error::MalformedIndex(format!("row {row} listed twice")))
                    }
                    None => {
                        return Err(Error::MalformedIndex(format!(
                            "row {row} out of range for {} rows",
                            matrix.count()
                        )))
                    }
                }
            }
        }
        if let Some(row) = seen.iter().position(|s| !s) {
            return Err(Error::MalformedIndex(format!(
                "row {row} missing from lists"
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&IVF_MAGIC)?;
        w.write_all(&IVF_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_lists() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.centroids {
            w.write_all(&x.to_le_bytes())?;
        }
        for list in &self.lists {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &row in list {
                w.write_all(&(row as u64).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a sidecar image. Structural checks only; row coverage is
    /// verified when the layout is attached to a matrix.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != IVF_MAGIC {
            return Err(Error::MalformedIndex("bad magic".into()));
        }
        let version = r.u32()?;
        if version != IVF_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "XMIV",
                version,
            });
        }
        let num_lists = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if num_lists == 0 || dim == 0 {
            return Err(Error::MalformedIndex(
                "num_lists and dim must be >= 1".into(),
            ));
        }
        let n_floats = num_lists
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::MalformedIndex("centroid block truncated".into()))?;
        let centroids = r
            .take(n_floats * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect::<Vec<_>>();
        if centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::MalformedIndex("non-finite centroid".into()));
        }
        let mut lists = Vec::with_capacity(num_lists);
        for _ in 0..num_lists {
            let len = r.u64()?;
            if len > (r.remaining() / 8) as u64 {
                return Err(Error::MalformedIndex("list truncated".into()));
            }
            let list = (0..len)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            lists.push(list);
        }
        if r.remaining() != 0 {
            return Err(Error::MalformedIndex(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self {
            dim,
            centroids,
            lists,
        })
    }
}

fn assign(matrix: &EmbeddingMatrix, centroids: &[f32], dim: usize, out: &mut [usize]) {
    for (row, slot) in matrix.rows().zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_score = f32::NEG_INFINITY;
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let s = dot(row, centroid);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        *slot = best;
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::MalformedIndex("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Immutable search structure over a borrowed, normalized matrix.
#[derive(Debug, Clone)]
pub struct Index<'a> {
    matrix: &'a EmbeddingMatrix,
    ivf: Option<IvfLayout>,
}

impl<'a> Index<'a> {
    pub fn build(matrix: &'a EmbeddingMatrix, mode: IndexMode) -> Result<Self> {
        Self::check_matrix(matrix)?;
        let ivf = match mode {
            IndexMode::Exact => None,
            IndexMode::Ivf { num_lists, seed } => Some(IvfLayout::train(matrix, num_lists, seed)?),
        };
        Ok(Self { matrix, ivf })
    }

    /// Attaches a previously persisted IVF layout to its matrix.
    pub fn with_layout(matrix: &'a EmbeddingMatrix, layout: IvfLayout) -> Result<Self> {
        Self::check_matrix(matrix)?;
        layout.check_against(matrix)?;
        Ok(Self {
            matrix,
            ivf: Some(layout),
        })
    }

    fn check_matrix(matrix: &EmbeddingMatrix) -> Result<()> {
        if matrix.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if !matrix.space().normalized {
            return Err(Error::UnnormalizedSpace(matrix.space().name.clone()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &'a EmbeddingMatrix {
        self.matrix
    }

    pub fn layout(&self) -> Option<&IvfLayout> {
        self.ivf.as_ref()
    }

    pub fn len(&self) -> usize {
        self.matrix.count()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn search(&self, query: &[f32], n: usize, probes: Probes) -> Result<SearchResult> {
        check_query(query, self.matrix.dim())?;
        let hits: Vec<Hit> = match &self.ivf {
            None => self
                .matrix
                .rows()
                .enumerate()
                .map(|(row, v)| Hit {
                    row,
                    score: dot(query, v),
                })
                .collect(),
            Some(ivf) => {
                let p = match probes {
                    Probes::All => ivf.num_lists(),
                    Probes::Count(p) => p.clamp(1, ivf.num_lists()),
                };
                ivf.probe_order(query)
                    .into_iter()
                    .take(p)
                    .flat_map(|l| ivf.list(l).iter().copied())
                    .map(|row| Hit {
                        row,
                        score: dot(query, self.matrix.row(row)),
                    })
                    .collect()
            }
        };
        Ok(SearchResult {
            entries: top_n(hits, n),
        })
    }
}

pub fn check_query(query: &[f32], dim: usize) -> Result<()> {
    if query.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            found: query.len(),
        });
    }
    let norm = l2_norm(query);
    if !norm.is_finite() || (norm - 1.0).abs() > QUERY_NORM_TOLERANCE {
        return Err(Error::UnnormalizedQuery { norm });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingSpace;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut impl Rng, count: usize, dim: usize) -> EmbeddingMatrix {
        let data = (0..count * dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        EmbeddingMatrix::new(EmbeddingSpace::new("m", dim, true).unwrap(), data).unwrap()
    }

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        crate::store::normalize_row(&mut v).unwrap();
        v
    }

    fn brute_force(m: &EmbeddingMatrix, q: &[f32], n: usize) -> Vec<(usize, f32)> {
        let mut all: Vec<(usize, f32)> = (0..m.count())
            .map(|i| {
                let mut s = 0f32;
                for (a, b) in q.iter().zip(m.row(i)) {
                    s += a * b;
                }
                (i, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }

    fn pairs(r: &SearchResult) -> Vec<(usize, f32)> {
        r.entries.iter().map(|h| (h.row, h.score)).collect()
    }

    #[test]
    fn singleton_index_always_returns_its_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 1, 8);
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        for _ in 0..5 {
            let q = random_unit(&mut rng, 8);
            assert_eq!(
                idx.search(&q, 3, Probes::All)
                    .unwrap()
                    .rows()
                    .collect::<Vec<_>>(),
                [0]
            );
        }
    }

    #[test]
    fn ivf_clamps_num_lists_to_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(&mut rng, 4, 8);
        let idx = Index::build(
            &m,
            IndexMode::Ivf {
                num_lists: 5,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(idx.layout().unwrap().num_lists(), 4);
    }

    #[test]
    fn exact_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 1000, 32);
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        for _ in 0..100 {
            let q = random_unit(&mut rng, 32);
            assert_eq!(
                pairs(&idx.search(&q, 10, Probes::All).unwrap()),
                brute_force(&m, &q, 10)
            );
        }
    }

    #[test]
    fn self_match_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(&mut rng, 50, 16);
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        let r = idx.search(m.row(17), 1, Probes::All).unwrap();
        assert_eq!(r.entries[0].row, 17);
        assert!((r.entries[0].score - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn orthonormal_basis_scores() {
        let sp = EmbeddingSpace::new("b", 4, true).unwrap();
        let m = EmbeddingMatrix::from_rows(
            sp,
            &[
                [1f32, 0., 0., 0.],
                [0., 1., 0., 0.],
                [0., 0., 1., 0.],
                [0., 0., 0., 1.],
            ],
        )
        .unwrap();
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let r = idx.search(&[h, h, 0., 0.], 2, Probes::All).unwrap();
        assert_eq!(r.rows().collect::<Vec<_>>(), [0, 1]);
        for e in &r.entries {
            assert!((e.score - 0.70710677).abs() < 1e-6);
        }
    }

    #[test]
    fn n_larger_than_count_returns_everything_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 7, 4);
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        let q = random_unit(&mut rng, 4);
        let r = idx.search(&q, 100, Probes::All).unwrap();
        assert_eq!(pairs(&r), brute_force(&m, &q, 7));
    }

    #[test]
    fn ties_break_by_row() {
        let sp = EmbeddingSpace::new("t", 2, true).unwrap();
        let m =
            EmbeddingMatrix::from_rows(sp, &[[0f32, 1.], [1., 0.], [0., 1.], [1., 0.]]).unwrap();
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        let r = idx.search(&[1., 0.], 4, Probes::All).unwrap();
        assert_eq!(r.rows().collect::<Vec<_>>(), [1, 3, 0, 2]);
    }

    #[test]
    fn build_and_query_errors() {
        let sp = EmbeddingSpace::new("e", 2, true).unwrap();
        let empty = EmbeddingMatrix::new(sp, vec![]).unwrap();
        assert!(matches!(
            Index::build(&empty, IndexMode::Exact),
            Err(Error::EmptyMatrix)
        ));
        let raw = EmbeddingMatrix::new(EmbeddingSpace::new("r", 2, false).unwrap(), vec![3., 4.])
            .unwrap();
        assert!(matches!(
            Index::build(&raw, IndexMode::Exact),
            Err(Error::UnnormalizedSpace(_))
        ));

        let m = EmbeddingMatrix::new(EmbeddingSpace::new("ok", 2, true).unwrap(), vec![1., 0.])
            .unwrap();
        let idx = Index::build(&m, IndexMode::Exact).unwrap();
        assert!(matches!(
            idx.search(&[1., 0., 0.], 1, Probes::All),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            idx.search(&[2., 0.], 1, Probes::All),
            Err(Error::UnnormalizedQuery { .. })
        ));
        assert!(matches!(
            idx.search(&[f32::NAN, 0.], 1, Probes::All),
            Err(Error::UnnormalizedQuery { .. })
        ));
    }

    #[test]
    fn ivf_full_probe_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_matrix(&mut rng, 2000, 16);
        let exact = Index::build(&m, IndexMode::Exact).unwrap();
        let ivf = Index::build(
            &m,
            IndexMode::Ivf {
                num_lists: 20,
                seed: 9,
            },
        )
        .unwrap();
        for _ in 0..20 {
            let q = random_unit(&mut rng, 16);
            assert_eq!(
                exact.search(&q, 50, Probes::All).unwrap(),
                ivf.search(&q, 50, Probes::All).unwrap()
            );
        }
    }

    #[test]
    fn ivf_recall_is_monotone_in_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_matrix(&mut rng, 3000, 16);
        let exact = Index::build(&m, IndexMode::Exact).unwrap();
        let ivf = Index::build(
            &m,
            IndexMode::Ivf {
                num_lists: 12,
                seed: 1,
            },
        )
        .unwrap();
        for _ in 0..10 {
            let q = random_unit(&mut rng, 16);
            let truth: std::collections::HashSet<usize> =
                exact.search(&q, 30, Probes::All).unwrap().rows().collect();
            let mut last = 0.0;
            for p in 1..=12 {
                let got = ivf.search(&q, 30, Probes::Count(p)).unwrap();
                let recall = got.rows().filter(|r| truth.contains(r)).count() as f64 / 30.0;
                assert!(recall >= last, "recall dropped at probes={p}");
                last = recall;
            }
            assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn ivf_build_is_deterministic_and_persists() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_matrix(&mut rng, 500, 8);
        let a = IvfLayout::train(&m, 7, 42).unwrap();
        let b = IvfLayout::train(&m, 7, 42).unwrap();
        assert_eq!(a, b);
        let bytes = a.encode();
        assert_eq!(bytes, b.encode());
        let back = IvfLayout::decode(&bytes).unwrap();
        assert_eq!(back, a);
        assert!(Index::with_layout(&m, back).is_ok());
    }

    #[test]
    fn decode_rejects_inconsistent_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_matrix(&mut rng, 20, 4);
        let good = IvfLayout::train(&m, 3, 0).unwrap().encode();

        assert!(IvfLayout::decode(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(IvfLayout::decode(&trailing).is_err());
        let mut magic = good.clone();
        magic[0] = b'Y';
        assert!(IvfLayout::decode(&magic).is_err());

        let other = random_matrix(&mut rng, 21, 4);
        let layout = IvfLayout::decode(&good).unwrap();
        assert!(matches!(
            Index::with_layout(&other, layout.clone()),
            Err(Error::MalformedIndex(_))
        ));
        let wide = random_matrix(&mut rng, 20, 5);
        assert!(matches!(
            Index::with_layout(&wide, layout),
            Err(Error::DimMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn exact_search_equals_full_scan(
            seed in any::<u64>(),
            count in 1usize..300,
            dim in 1usize..16,
            n in 1usize..50,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, count, dim);
            let idx = Index::build(&m, IndexMode::Exact).unwrap();
            let q = random_unit(&mut rng, dim);
            let r = idx.search(&q, n, Probes::All).unwrap();
            prop_assert_eq!(pairs(&r), brute_force(&m, &q, n));
            let again = idx.search(&q, n, Probes::All).unwrap();
            prop_assert_eq!(r, again);
        }
    }
}
