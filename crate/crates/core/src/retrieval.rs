//! Two-stage cross-modal caption retrieval.
//!
//! The coarse stage gathers `n_candidates` corpus records by image-image
//! similarity. The fine stage rescores only those candidates by the
//! similarity between the query image and each candidate's caption, in the
//! co-embedding space of the fine-retrieval encoder, and keeps the best
//! `k_captions`. The indirect variant skips the fine stage and keeps the
//! first `k_captions` of the image ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{check_query, dot, Index, Probes, SearchResult};
use crate::store::Corpus;

pub const DEFAULT_N_CANDIDATES: usize = 128;
pub const DEFAULT_K_CAPTIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub n_candidates: usize,
    pub k_captions: usize,
    /// Image embeddings used for the coarse stage.
    pub coarse_space: String,
    /// Caption embeddings in the fine-retrieval encoder's space.
    pub fine_space: String,
    /// Query images embedded by the fine-retrieval encoder.
    pub query_fine_space: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_candidates: DEFAULT_N_CANDIDATES,
            k_captions: DEFAULT_K_CAPTIONS,
            coarse_space: "coarse".into(),
            fine_space: "fine".into(),
            query_fine_space: "query_fine".into(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.k_captions == 0 {
            return Err(Error::InvalidConfig("n and k must be positive".into()));
        }
        if self.k_captions > self.n_candidates {
            return Err(Error::KExceedsN {
                k: self.k_captions,
                n: self.n_candidates,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCaption {
    pub record_id: u64,
    #[serde(skip)]
    pub row: usize,
    pub caption: String,
    pub score: f32,
}

/// The captions retrieved for one query, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCaptions {
    pub entries: Vec<RetrievedCaption>,
}

impl RetrievedCaptions {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.row)
    }

    pub fn record_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.record_id)
    }

    /// The first `k` entries.
    pub fn prefix(&self, k: usize) -> RetrievedCaptions {
        RetrievedCaptions {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
        }
    }
}

/// A corpus paired with the index over its coarse-space image embeddings.
#[derive(Debug, Clone)]
pub struct Retriever<'a> {
    corpus: &'a Corpus,
    index: &'a Index<'a>,
    probes: Probes,
}

impl<'a> Retriever<'a> {
    pub fn new(corpus: &'a Corpus, index: &'a Index<'a>, config: &RetrievalConfig) -> Result<Self> {
        let coarse = corpus.matrix(&config.coarse_space)?;
        if !std::ptr::eq(coarse, index.matrix()) && coarse != index.matrix() {
            return Err(Error::InvalidConfig(format!(
                "index was not built over the corpus {:?} matrix",
                config.coarse_space
            )));
        }
        Ok(Self {
            corpus,
            index,
            probes: Probes::All,
        })
    }

    pub fn with_probes(mut self, probes: Probes) -> Self {
        self.probes = probes;
        self
    }

    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    /// Coarse stage: top-N records by image-image cosine similarity.
    pub fn coarse_retrieve(
        &self,
        query_image: &[f32],
        config: &RetrievalConfig,
    ) -> Result<SearchResult> {
        self.index
            .search(query_image, config.n_candidates, self.probes)
    }

    /// Fine stage: rescore `candidates` by their caption embeddings and keep the
    /// best `k_captions`.
    pub fn fine_retrieve(
        &self,
        query_image_fine: &[f32],
        candidates: &SearchResult,
        config: &RetrievalConfig,
    ) -> Result<RetrievedCaptions> {
        let mut ranked = self.fine_rank(query_image_fine, candidates, config)?;
        ranked.entries.truncate(config.k_captions);
        Ok(ranked)
    }

    /// Every candidate ordered by caption score. Any top-K fine retrieval
    /// over the same candidates is a prefix of this ranking.
    pub fn fine_rank(
        &self,
        query_image_fine: &[f32],
        candidates: &SearchResult,
        config: &RetrievalConfig,
    ) -> Result<RetrievedCaptions> {
        let captions = self.corpus.matrix(&config.fine_space)?;
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        check_query(query_image_fine, captions.dim())?;
        let mut entries: Vec<RetrievedCaption> = candidates
            .rows()
            .map(|row| {
                let rec = self.corpus.record(row);
                RetrievedCaption {
                    record_id: rec.id,
                    row,
                    caption: rec.caption.clone(),
                    score: dot(query_image_fine, captions.row(row)),
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.record_id.cmp(&b.record_id))
        });
        Ok(RetrievedCaptions { entries })
    }

    /// Both stages for one query.
    pub fn retrieve(
        &self,
        query_image: &[f32],
        query_image_fine: &[f32],
        config: &RetrievalConfig,
    ) -> Result<RetrievedCaptions> {
        let candidates = self.coarse_retrieve(query_image, config)?;
        self.fine_retrieve(query_image_fine, &candidates, config)
    }

    /// Ablation baseline: the captions of the top-K images, with image scores.
    pub fn indirect_retrieve(
        &self,
        query_image: &[f32],
        config: &RetrievalConfig,
    ) -> Result<RetrievedCaptions> {
        let candidates = self.coarse_retrieve(query_image, config)?;
        Ok(self.captions_of(&candidates, config.k_captions))
    }

    /// Captions of the first `k` hits, keeping the hit order and scores.
    pub fn captions_of(&self, hits: &SearchResult, k: usize) -> RetrievedCaptions {
        RetrievedCaptions {
            entries: hits
                .entries
                .iter()
                .take(k)
                .map(|h| {
                    let rec = self.corpus.record(h.row);
                    RetrievedCaption {
                        record_id: rec.id,
                        row: h.row,
                        caption: rec.caption.clone(),
                        score: h.score,
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::IndexMode;
    use crate::store::{EmbeddingMatrix, EmbeddingSpace};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sp(name: &str, dim: usize) -> EmbeddingSpace {
        EmbeddingSpace::new(name, dim, true).unwrap()
    }

    fn cfg(n: usize, k: usize) -> RetrievalConfig {
        RetrievalConfig {
            n_candidates: n,
            k_captions: k,
            coarse_space: "img".into(),
            fine_space: "txt".into(),
            query_fine_space: "qfine".into(),
        }
    }

    /// Image 1 is closer to the query than image 2, but caption 2 is closer
    /// than caption 1:
    ///   q_img . img1 = 0.8 > q_img . img2 = 0.6
    ///   q_fine . txt1 = 0.6 < q_fine . txt2 = 0.8
    fn divergent_corpus() -> Corpus {
        let img = EmbeddingMatrix::from_rows(sp("img", 2), &[[0.8f32, 0.6], [0.6, 0.8]]).unwrap();
        let txt = EmbeddingMatrix::from_rows(sp("txt", 2), &[[0.6f32, 0.8], [0.8, 0.6]]).unwrap();
        Corpus::new(
            vec![(1, "caption-1".into()), (2, "caption-2".into())],
            [img, txt],
        )
        .unwrap()
    }

    const Q_IMG: [f32; 2] = [1.0, 0.0];
    const Q_FINE: [f32; 2] = [1.0, 0.0];

    #[test]
    fn coarse_returns_both_records_in_image_order() {
        let corpus = divergent_corpus();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let r = Retriever::new(&corpus, &index, &cfg(2, 1)).unwrap();
        let hits = r.coarse_retrieve(&Q_IMG, &cfg(2, 1)).unwrap();
        assert_eq!(hits.rows().collect::<Vec<_>>(), [0, 1]);
        let hits = r.coarse_retrieve(&Q_IMG, &cfg(50, 1)).unwrap();
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn fine_and_indirect_diverge_on_constructed_corpus() {
        let corpus = divergent_corpus();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(2, 1);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        let direct = r.retrieve(&Q_IMG, &Q_FINE, &c).unwrap();
        let indirect = r.indirect_retrieve(&Q_IMG, &c).unwrap();
        assert_eq!(direct.entries[0].caption, "caption-2");
        assert!((direct.entries[0].score - 0.8).abs() < 1e-6);
        assert_eq!(indirect.entries[0].caption, "caption-1");
        assert!((indirect.entries[0].score - 0.8).abs() < 1e-6);
    }

    #[test]
    fn identical_captions_tie_break_by_record_id() {
        let img = EmbeddingMatrix::from_rows(sp("img", 2), &[[1f32, 0.], [0.9, 0.1], [0.5, 0.5]])
            .unwrap();
        let txt = EmbeddingMatrix::from_rows(sp("txt", 2), &[[0f32, 1.]; 3]).unwrap();
        let corpus = Corpus::new(
            vec![(30, "c".into()), (10, "a".into()), (20, "b".into())],
            [img, txt],
        )
        .unwrap();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(3, 2);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        let got = r.retrieve(&Q_IMG, &Q_FINE, &c).unwrap();
        assert_eq!(got.record_ids().collect::<Vec<_>>(), [10, 20]);
    }

    #[test]
    fn k_equal_n_reorders_all_candidates() {
        let corpus = divergent_corpus();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(2, 2);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        let got = r.retrieve(&Q_IMG, &Q_FINE, &c).unwrap();
        assert_eq!(got.record_ids().collect::<Vec<_>>(), [2, 1]);
        let indirect = r.indirect_retrieve(&Q_IMG, &c).unwrap();
        assert_eq!(indirect.record_ids().collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn single_record_corpus() {
        let img = EmbeddingMatrix::from_rows(sp("img", 2), &[[1f32, 0.]]).unwrap();
        let txt = EmbeddingMatrix::from_rows(sp("txt", 2), &[[1f32, 0.]]).unwrap();
        let corpus = Corpus::new(vec![(7, "only".into())], [img, txt]).unwrap();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(128, 16);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        assert_eq!(
            r.indirect_retrieve(&Q_IMG, &c).unwrap().entries[0].caption,
            "only"
        );
        assert_eq!(r.retrieve(&Q_IMG, &Q_FINE, &c).unwrap().len(), 1);
    }

    #[test]
    fn fine_stage_errors() {
        let img = EmbeddingMatrix::from_rows(sp("img", 2), &[[1f32, 0.]]).unwrap();
        let corpus = Corpus::new(vec![(7, "only".into())], [img]).unwrap();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(4, 2);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        let hits = r.coarse_retrieve(&Q_IMG, &c).unwrap();
        assert!(matches!(
            r.fine_retrieve(&Q_FINE, &hits, &c),
            Err(Error::MissingSpace(_))
        ));

        let corpus = divergent_corpus();
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        assert!(matches!(
            r.fine_retrieve(&Q_FINE, &SearchResult::default(), &c),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn config_rejects_k_above_n() {
        assert!(matches!(
            cfg(4, 5).validate(),
            Err(Error::KExceedsN { k: 5, n: 4 })
        ));
        assert!(cfg(4, 4).validate().is_ok());
        assert_eq!(RetrievalConfig::default().n_candidates, 128);
        assert_eq!(RetrievalConfig::default().k_captions, 16);
    }

    fn random_corpus(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Corpus {
        let mut mk = |name: &str| {
            let data = (0..count * dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            EmbeddingMatrix::new(sp(name, dim), data).unwrap()
        };
        let img = mk("img");
        let txt = mk("txt");
        let entries = (0..count)
            .map(|i| (i as u64 * 3 + 1, format!("c{i}")))
            .collect();
        Corpus::new(entries, [img, txt]).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        crate::store::normalize_row(&mut v).unwrap();
        v
    }

    #[test]
    fn coarse_matches_brute_force_top_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let corpus = random_corpus(&mut rng, 1000, 16);
        let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
        let c = cfg(128, 16);
        let r = Retriever::new(&corpus, &index, &c).unwrap();
        let q = unit(&mut rng, 16);
        let got: Vec<usize> = r.coarse_retrieve(&q, &c).unwrap().rows().collect();
        let img = corpus.matrix("img").unwrap();
        let mut oracle: Vec<(usize, f32)> = (0..1000)
            .map(|i| {
                (
                    i,
                    q.iter().zip(img.row(i)).fold(0f32, |s, (a, b)| s + a * b),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(
            got,
            oracle.iter().take(128).map(|p| p.0).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn fine_is_a_sorted_subset_of_coarse(seed in any::<u64>(), n in 1usize..40, k in 1usize..40) {
            let k = k.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corpus = random_corpus(&mut rng, 60, 6);
            let index = Index::build(corpus.matrix("img").unwrap(), IndexMode::Exact).unwrap();
            let c = cfg(n, k);
            let r = Retriever::new(&corpus, &index, &c).unwrap();
            let (q, qf) = (unit(&mut rng, 6), unit(&mut rng, 6));
            let coarse = r.coarse_retrieve(&q, &c).unwrap();
            let fine = r.fine_retrieve(&qf, &coarse, &c).unwrap();
            prop_assert_eq!(fine.len(), k.min(coarse.len()));
            let coarse_ids: Vec<u64> = coarse.rows().map(|row| corpus.record(row).id).collect();
            for e in &fine.entries {
                prop_assert!(coarse_ids.contains(&e.record_id));
                let txt = corpus.matrix("txt").unwrap().row(e.row);
                prop_assert_eq!(e.score, dot(&qf, txt));
            }
            for w in fine.entries.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].record_id < w[1].record_id));
            }
            let full = r.fine_rank(&qf, &coarse, &c).unwrap();
            prop_assert_eq!(&full.prefix(k), &fine);
            prop_assert_eq!(&r.fine_retrieve(&qf, &coarse, &c).unwrap(), &fine);
        }
    }
}
