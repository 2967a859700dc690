//! Batch evaluation, parameter sweeps, ablations and confidence analyses.
//!
//! A run shuffles the test set with a seeded RNG, then streams it through
//! the pipeline with a fresh [`EnsembleState`]; the order of the stream is
//! the only source of randomness. Work that does not depend on the order,
//! on K or on the ensemble mode (coarse retrieval, the full fine ranking of
//! the N candidates, image-modal predictions) is computed once per query in
//! [`Pipeline::prepare`] and reused.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleMode, EnsembleState};
use crate::error::{Error, Result};
use crate::inference::{
    image_modal_probability, text_modal_probability, InferenceConfig, Prediction,
};
use crate::retrieval::{RetrievalConfig, RetrievedCaptions, Retriever};
use crate::store::{ClassSet, QuerySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Coarse image retrieval followed by caption fine-retrieval.
    #[default]
    Direct,
    /// Captions of the top-K coarse image hits.
    Indirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub retrieval: RetrievalConfig,
    pub retrieval_mode: RetrievalMode,
    pub inference: InferenceConfig,
    pub ensemble_mode: EnsembleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub query_id: u64,
    pub true_label: u32,
    pub img_pred: usize,
    pub txt_pred: usize,
    pub ens_pred: usize,
    pub alpha_img: f64,
    pub alpha_txt: f64,
    pub adj_img: f64,
    pub adj_txt: f64,
    pub h_img: f64,
    pub h_txt: f64,
}

impl SampleLog {
    pub fn img_correct(&self) -> bool {
        self.img_pred == self.true_label as usize
    }

    pub fn txt_correct(&self) -> bool {
        self.txt_pred == self.true_label as usize
    }

    pub fn ens_correct(&self) -> bool {
        self.ens_pred == self.true_label as usize
    }
}

/// Top-1 accuracies in percent, rounded to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracies {
    pub img_acc: f64,
    pub txt_acc: f64,
    pub ens_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(flatten)]
    pub acc: Accuracies,
}

impl Summary {
    pub fn from_samples(samples: &[SampleLog]) -> Self {
        let pct = |hits: usize| {
            if samples.is_empty() {
                0.0
            } else {
                round2(100.0 * hits as f64 / samples.len() as f64)
            }
        };
        Self {
            count: samples.len(),
            acc: Accuracies {
                img_acc: pct(samples.iter().filter(|s| s.img_correct()).count()),
                txt_acc: pct(samples.iter().filter(|s| s.txt_correct()).count()),
                ens_acc: pct(samples.iter().filter(|s| s.ens_correct()).count()),
            },
        }
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with denominator `n`.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub config: RunConfig,
    pub seed: u64,
    pub summary: Summary,
    pub samples: Vec<SampleLog>,
}

/// Per-seed accuracies with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Summary>,
    pub mean: Accuracies,
    pub std: Accuracies,
    pub std_kind: String,
}

impl SeedSummary {
    pub fn from_runs(runs: &[EvalRun]) -> Self {
        let pick = |f: fn(&Accuracies) -> f64| -> Vec<f64> {
            runs.iter().map(|r| f(&r.summary.acc)).collect()
        };
        let (img, txt, ens) = (
            pick(|a| a.img_acc),
            pick(|a| a.txt_acc),
            pick(|a| a.ens_acc),
        );
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            per_seed: runs.iter().map(|r| r.summary).collect(),
            mean: Accuracies {
                img_acc: mean(&img),
                txt_acc: mean(&txt),
                ens_acc: mean(&ens),
            },
            std: Accuracies {
                img_acc: population_std(&img),
                txt_acc: population_std(&txt),
                ens_acc: population_std(&ens),
            },
            std_kind: "population".into(),
        }
    }
}

impl fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10}",
            "seed", "img-only", "txt-only", "ensemble"
        )?;
        for (seed, s) in self.seeds.iter().zip(&self.per_seed) {
            writeln!(
                f,
                "{:<10} {:>10.2} {:>10.2} {:>10.2}",
                seed, s.acc.img_acc, s.acc.txt_acc, s.acc.ens_acc
            )?;
        }
        let pm = |m: f64, s: f64| format!("{m:.2}±{s:.2}");
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10}",
            "mean",
            pm(self.mean.img_acc, self.std.img_acc),
            pm(self.mean.txt_acc, self.std.txt_acc),
            pm(self.mean.ens_acc, self.std.ens_acc)
        )?;
        write!(
            f,
            "(std: {} over {} seeds)",
            self.std_kind,
            self.seeds.len()
        )
    }
}

/// One row of a K or N sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub summary: SeedSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>16} {:>16} {:>16}",
            self.parameter, "img-only", "txt-only", "ensemble"
        )?;
        for row in &self.rows {
            let (m, s) = (row.summary.mean, row.summary.std);
            writeln!(
                f,
                "{:<8} {:>16} {:>16} {:>16}",
                row.value,
                format!("{:.2}±{:.2}", m.img_acc, s.img_acc),
                format!("{:.2}±{:.2}", m.txt_acc, s.txt_acc),
                format!("{:.2}±{:.2}", m.ens_acc, s.ens_acc),
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub k: usize,
    pub mean_h_img: f64,
    pub mean_h_txt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub rows: Vec<EntropyRow>,
}

impl fmt::Display for EntropyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>10} {:>10}", "K", "H(P_img)", "H(P_txt)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:>10.4} {:>10.4}",
                r.k, r.mean_h_img, r.mean_h_txt
            )?;
        }
        Ok(())
    }
}

/// Correctness pattern of (image, text, ensemble) predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Image right, text wrong, ensemble right.
    ImageOnly,
    /// Image wrong, text right, ensemble right.
    TextOnly,
    /// Both wrong, ensemble right.
    Neither,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::ImageOnly, Case::TextOnly, Case::Neither];

    pub fn of(s: &SampleLog) -> Option<Case> {
        match (s.img_correct(), s.txt_correct(), s.ens_correct()) {
            (true, false, true) => Some(Case::ImageOnly),
            (false, true, true) => Some(Case::TextOnly),
            (false, false, true) => Some(Case::Neither),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Case::ImageOnly => "(1) img✓ txt✗ ens✓",
            Case::TextOnly => "(2) img✗ txt✓ ens✓",
            Case::Neither => "(3) img✗ txt✗ ens✓",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: Case,
    pub samples: usize,
    /// Samples with `adj_txt == 0`, left out of the ratio mean.
    pub zero_txt_excluded: usize,
    /// Mean of `adj_img / adj_txt`; `None` when every sample was excluded.
    pub mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub rows: Vec<CaseRow>,
}

impl CaseReport {
    pub fn row(&self, case: Case) -> Option<&CaseRow> {
        self.rows.iter().find(|r| r.case == case)
    }
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>8} {:>10} {:>12}",
            "case", "samples", "excluded", "adj_img/adj_txt"
        )?;
        for r in &self.rows {
            let ratio = r
                .mean_ratio
                .map_or_else(|| "-".to_string(), |m| format!("{m:.2}"));
            writeln!(
                f,
                "{:<22} {:>8} {:>10} {:>12}",
                r.case.label(),
                r.samples,
                r.zero_txt_excluded,
                ratio
            )?;
        }
        Ok(())
    }
}

pub fn analyze_cases(run: &EvalRun) -> CaseReport {
    analyze_case_samples(&run.samples)
}

pub fn analyze_case_samples(samples: &[SampleLog]) -> CaseReport {
    let rows = Case::ALL
        .iter()
        .filter_map(|&case| {
            let members: Vec<&SampleLog> = samples
                .iter()
                .filter(|s| Case::of(s) == Some(case))
                .collect();
            if members.is_empty() {
                return None;
            }
            let ratios: Vec<f64> = members
                .iter()
                .filter(|s| s.adj_txt != 0.0)
                .map(|s| s.adj_img / s.adj_txt)
                .collect();
            Some(CaseRow {
                case,
                samples: members.len(),
                zero_txt_excluded: members.len() - ratios.len(),
                mean_ratio: (!ratios.is_empty()).then(|| mean(&ratios)),
            })
        })
        .collect();
    CaseReport { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub summary: SeedSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub title: String,
    pub rows: Vec<AblationRow>,
    /// Retrieval ablation only: queries whose two caption sets differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub differing_queries: Option<usize>,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        writeln!(
            f,
            "{:<14} {:>16} {:>16} {:>16}",
            "variant", "img-only", "txt-only", "ensemble"
        )?;
        for row in &self.rows {
            let (m, s) = (row.summary.mean, row.summary.std);
            writeln!(
                f,
                "{:<14} {:>16} {:>16} {:>16}",
                row.name,
                format!("{:.2}±{:.2}", m.img_acc, s.img_acc),
                format!("{:.2}±{:.2}", m.txt_acc, s.txt_acc),
                format!("{:.2}±{:.2}", m.ens_acc, s.ens_acc),
            )?;
        }
        if let Some(d) = self.differing_queries {
            writeln!(f, "queries with differing caption sets: {d}")?;
        }
        Ok(())
    }
}

/// One element of a labelled prediction stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub query_id: u64,
    pub label: u32,
    pub p_img: Prediction,
    pub p_txt: Prediction,
}

/// Streams `samples` in the given order through a fresh ensemble state.
pub fn run_stream<'s>(
    samples: impl IntoIterator<Item = &'s StreamSample>,
    mode: EnsembleMode,
) -> Result<Vec<SampleLog>> {
    let mut state = EnsembleState::new();
    samples
        .into_iter()
        .map(|s| {
            let out = state.step(&s.p_img, &s.p_txt, mode)?;
            Ok(SampleLog {
                query_id: s.query_id,
                true_label: s.label,
                img_pred: s.p_img.argmax(),
                txt_pred: s.p_txt.argmax(),
                ens_pred: out.predicted_class,
                alpha_img: s.p_img.confidence,
                alpha_txt: s.p_txt.confidence,
                adj_img: out.adj_img,
                adj_txt: out.adj_txt,
                h_img: s.p_img.entropy,
                h_txt: s.p_txt.entropy,
            })
        })
        .collect()
}

/// Permutation of `0..n` determined by `seed`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Order-independent per-query results for a fixed N and retrieval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub p_img: Prediction,
    /// Direct mode: every coarse candidate ordered by caption score.
    /// Indirect mode: the coarse hits in image order.
    pub ranking: RetrievedCaptions,
}

/// Retrieval, inference and ensembling wired together over one corpus.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    retriever: Retriever<'a>,
    classes: &'a ClassSet,
    retrieval: RetrievalConfig,
    inference: InferenceConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        retriever: Retriever<'a>,
        classes: &'a ClassSet,
        retrieval: RetrievalConfig,
        inference: InferenceConfig,
    ) -> Result<Self> {
        retrieval.validate()?;
        inference.validate()?;
        let corpus = retriever.corpus();
        let class_emb = classes.embeddings(&inference.space)?;
        let caption_emb = corpus.matrix(&inference.space)?;
        if class_emb.dim() != caption_emb.dim() {
            return Err(Error::DimMismatch {
                expected: class_emb.dim(),
                found: caption_emb.dim(),
            });
        }
        corpus.matrix(&retrieval.fine_space)?;
        Ok(Self {
            retriever,
            classes,
            retrieval,
            inference,
        })
    }

    pub fn retrieval_config(&self) -> &RetrievalConfig {
        &self.retrieval
    }

    pub fn inference_config(&self) -> &InferenceConfig {
        &self.inference
    }

    pub fn classes(&self) -> &ClassSet {
        self.classes
    }

    pub fn retriever(&self) -> &Retriever<'a> {
        &self.retriever
    }

    fn config_with(&self, n: usize, k: usize) -> RetrievalConfig {
        RetrievalConfig {
            n_candidates: n,
            k_captions: k,
            ..self.retrieval.clone()
        }
    }

    fn run_config(
        &self,
        n: usize,
        k: usize,
        rmode: RetrievalMode,
        emode: EnsembleMode,
    ) -> RunConfig {
        RunConfig {
            retrieval: self.config_with(n, k),
            retrieval_mode: rmode,
            inference: self.inference.clone(),
            ensemble_mode: emode,
        }
    }

    /// Retrieved captions for query `i` with the pipeline's own N and K.
    pub fn retrieve(
        &self,
        test: &QuerySet,
        i: usize,
        rmode: RetrievalMode,
    ) -> Result<RetrievedCaptions> {
        let prepared = self.prepare_one(test, i, self.retrieval.n_candidates, rmode)?;
        Ok(prepared.ranking.prefix(self.retrieval.k_captions))
    }

    pub fn prepare_one(
        &self,
        test: &QuerySet,
        i: usize,
        n: usize,
        rmode: RetrievalMode,
    ) -> Result<PreparedQuery> {
        let config = self.config_with(n, n);
        let query = test.embedding(&config.coarse_space, i)?;
        let candidates = self.retriever.coarse_retrieve(query, &config)?;
        let ranking = match rmode {
            RetrievalMode::Direct => {
                let query_fine = test.embedding(&config.query_fine_space, i)?;
                self.retriever.fine_rank(query_fine, &candidates, &config)?
            }
            RetrievalMode::Indirect => self.retriever.captions_of(&candidates, n),
        };
        let p_img = image_modal_probability(
            test.embedding(&self.inference.space, i)?,
            self.classes,
            &self.inference,
        )?;
        Ok(PreparedQuery { p_img, ranking })
    }

    pub fn prepare(
        &self,
        test: &QuerySet,
        n: usize,
        rmode: RetrievalMode,
    ) -> Result<Vec<PreparedQuery>> {
        if n == 0 {
            return Err(Error::InvalidConfig("n must be positive".into()));
        }
        (0..test.len())
            .into_par_iter()
            .map(|i| self.prepare_one(test, i, n, rmode))
            .collect()
    }

    pub fn text_prediction(&self, captions: &RetrievedCaptions) -> Result<Prediction> {
        let emb = self.retriever.corpus().matrix(&self.inference.space)?;
        let rows: Vec<&[f32]> = captions.rows().map(|r| emb.row(r)).collect();
        text_modal_probability(&rows, self.classes, &self.inference)
    }

    fn stream(
        &self,
        test: &QuerySet,
        prepared: &[PreparedQuery],
        k: usize,
    ) -> Result<Vec<StreamSample>> {
        let labels = labels(test, self.classes.len())?;
        prepared
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(StreamSample {
                    query_id: test.ids()[i],
                    label: labels[i],
                    p_img: p.p_img.clone(),
                    p_txt: self.text_prediction(&p.ranking.prefix(k))?,
                })
            })
            .collect()
    }

    fn runs_over_seeds(
        &self,
        stream: &[StreamSample],
        config: &RunConfig,
        seeds: &[u64],
    ) -> Result<Vec<EvalRun>> {
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        seeds
            .par_iter()
            .map(|&seed| {
                let order = shuffled_order(stream.len(), seed);
                let samples = run_stream(order.iter().map(|&i| &stream[i]), config.ensemble_mode)?;
                Ok(EvalRun {
                    config: config.clone(),
                    seed,
                    summary: Summary::from_samples(&samples),
                    samples,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, test: &QuerySet, mode: EnsembleMode, seed: u64) -> Result<EvalRun> {
        Ok(self
            .evaluate_with(test, mode, RetrievalMode::Direct, &[seed])?
            .pop()
            .expect("one run per seed"))
    }

    pub fn evaluate_with(
        &self,
        test: &QuerySet,
        mode: EnsembleMode,
        rmode: RetrievalMode,
        seeds: &[u64],
    ) -> Result<Vec<EvalRun>> {
        check_test_set(test, self.classes.len())?;
        let (n, k) = (self.retrieval.n_candidates, self.retrieval.k_captions);
        let prepared = self.prepare(test, n, rmode)?;
        let stream = self.stream(test, &prepared, k)?;
        self.runs_over_seeds(&stream, &self.run_config(n, k, rmode, mode), seeds)
    }

    pub fn evaluate_seeds(
        &self,
        test: &QuerySet,
        mode: EnsembleMode,
        seeds: &[u64],
    ) -> Result<SeedSummary> {
        let runs = self.evaluate_with(test, mode, RetrievalMode::Direct, seeds)?;
        Ok(SeedSummary::from_runs(&runs))
    }

    /// One row per K, sharing a single coarse retrieval and fine ranking per query.
    pub fn sweep_k(
        &self,
        test: &QuerySet,
        ks: &[usize],
        mode: EnsembleMode,
        seeds: &[u64],
    ) -> Result<SweepReport> {
        check_test_set(test, self.classes.len())?;
        let n = self.retrieval.n_candidates;
        check_ks(ks, n)?;
        let prepared = self.prepare(test, n, RetrievalMode::Direct)?;
        let rows = ks
            .iter()
            .map(|&k| {
                let stream = self.stream(test, &prepared, k)?;
                let config = self.run_config(n, k, RetrievalMode::Direct, mode);
                let runs = self.runs_over_seeds(&stream, &config, seeds)?;
                Ok(SweepRow {
                    value: k,
                    summary: SeedSummary::from_runs(&runs),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SweepReport {
            parameter: "K".into(),
            rows,
        })
    }

    pub fn sweep_n(
        &self,
        test: &QuerySet,
        ns: &[usize],
        mode: EnsembleMode,
        seeds: &[u64],
    ) -> Result<SweepReport> {
        check_test_set(test, self.classes.len())?;
        let k = self.retrieval.k_captions;
        if ns.is_empty() {
            return Err(Error::InvalidConfig("empty N list".into()));
        }
        for &n in ns {
            if n == 0 {
                return Err(Error::InvalidConfig("n must be positive".into()));
            }
            if k > n {
                return Err(Error::KExceedsN { k, n });
            }
        }
        let rows = ns
            .iter()
            .map(|&n| {
                let prepared = self.prepare(test, n, RetrievalMode::Direct)?;
                let stream = self.stream(test, &prepared, k)?;
                let config = self.run_config(n, k, RetrievalMode::Direct, mode);
                let runs = self.runs_over_seeds(&stream, &config, seeds)?;
                Ok(SweepRow {
                    value: n,
                    summary: SeedSummary::from_runs(&runs),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SweepReport {
            parameter: "N".into(),
            rows,
        })
    }

    /// Mean entropy of each modality for each K. Entropies do not depend on
    /// the stream order, so no seed is involved.
    pub fn analyze_entropy(&self, test: &QuerySet, ks: &[usize]) -> Result<EntropyReport> {
        if test.is_empty() {
            return Err(Error::InvalidConfig("test set is empty".into()));
        }
        let n = self.retrieval.n_candidates;
        check_ks(ks, n)?;
        let prepared = self.prepare(test, n, RetrievalMode::Direct)?;
        let h_img: Vec<f64> = prepared.iter().map(|p| p.p_img.entropy).collect();
        let rows = ks
            .iter()
            .map(|&k| {
                let h_txt = prepared
                    .par_iter()
                    .map(|p| Ok(self.text_prediction(&p.ranking.prefix(k))?.entropy))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(EntropyRow {
                    k,
                    mean_h_img: mean(&h_img),
                    mean_h_txt: mean(&h_txt),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EntropyReport { rows })
    }

    /// Raw confidences vs min-max adjusted confidences as ensemble weights.
    pub fn ablate_adjustment(&self, test: &QuerySet, seeds: &[u64]) -> Result<AblationReport> {
        check_test_set(test, self.classes.len())?;
        let (n, k) = (self.retrieval.n_candidates, self.retrieval.k_captions);
        let prepared = self.prepare(test, n, RetrievalMode::Direct)?;
        let stream = self.stream(test, &prepared, k)?;
        let rows = [
            ("raw", EnsembleMode::Raw),
            ("adjusted", EnsembleMode::Modal),
        ]
        .into_iter()
        .map(|(name, mode)| {
            let config = self.run_config(n, k, RetrievalMode::Direct, mode);
            let runs = self.runs_over_seeds(&stream, &config, seeds)?;
            Ok(AblationRow {
                name: name.into(),
                summary: SeedSummary::from_runs(&runs),
            })
        })
        .collect::<Result<_>>()?;
        Ok(AblationReport {
            title: "confidence adjustment".into(),
            rows,
            differing_queries: None,
        })
    }

    /// Direct (fine-retrieved) vs indirect (image-ranked) captions.
    pub fn ablate_retrieval(
        &self,
        test: &QuerySet,
        mode: EnsembleMode,
        seeds: &[u64],
    ) -> Result<AblationReport> {
        check_test_set(test, self.classes.len())?;
        let (n, k) = (self.retrieval.n_candidates, self.retrieval.k_captions);
        let mut rows = Vec::with_capacity(2);
        let mut sets = Vec::with_capacity(2);
        for (name, rmode) in [
            ("direct", RetrievalMode::Direct),
            ("indirect", RetrievalMode::Indirect),
        ] {
            let prepared = self.prepare(test, n, rmode)?;
            let stream = self.stream(test, &prepared, k)?;
            let runs = self.runs_over_seeds(&stream, &self.run_config(n, k, rmode, mode), seeds)?;
            rows.push(AblationRow {
                name: name.into(),
                summary: SeedSummary::from_runs(&runs),
            });
            sets.push(
                prepared
                    .iter()
                    .map(|p| {
                        let mut ids: Vec<u64> = p.ranking.prefix(k).record_ids().collect();
                        ids.sort_unstable();
                        ids
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let differing = sets[0].iter().zip(&sets[1]).filter(|(a, b)| a != b).count();
        Ok(AblationReport {
            title: "text retrieval".into(),
            rows,
            differing_queries: Some(differing),
        })
    }
}

fn check_ks(ks: &[usize], n: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::InvalidConfig("empty K list".into()));
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if k > n {
            return Err(Error::KExceedsN { k, n });
        }
    }
    Ok(())
}

fn check_test_set(test: &QuerySet, classes: usize) -> Result<()> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    labels(test, classes).map(|_| ())
}

fn labels(test: &QuerySet, classes: usize) -> Result<&[u32]> {
    let labels = test.labels().ok_or(Error::MissingLabels)?;
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(probs: &[f64]) -> Prediction {
        Prediction::from_probs(probs.to_vec())
    }

    fn sample(id: u64, label: u32, img: &[f64], txt: &[f64]) -> StreamSample {
        StreamSample {
            query_id: id,
            label,
            p_img: p(img),
            p_txt: p(txt),
        }
    }

    const U: [f64; 4] = [0.25; 4];
    const E0: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
    const E1: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
    const E2: [f64; 4] = [0.0, 0.0, 1.0, 0.0];
    const E3: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

    /// Confidences over four classes (nats, `1 - H / ln 4`):
    ///   uniform -> 0, one-hot -> 1, (1/2, 1/2, 0, 0) -> 1/2,
    ///   (1/2, 1/4, 1/4, 0) -> 1/4.
    /// The first two samples pin both ranges to [0, 1], after which every
    /// adjusted confidence equals the raw one.
    fn scripted_case_stream() -> Vec<StreamSample> {
        vec![
            sample(1, 0, &U, &U),
            sample(2, 1, &E1, &E1),
            // case 1: adj (1, 1/4), ratio 4
            sample(3, 2, &E2, &[0.5, 0.25, 0.25, 0.0]),
            // case 1: adj (1/2, 1/4), p_ens ties classes 0 and 1 -> 0, ratio 2
            sample(4, 0, &[0.5, 0.5, 0.0, 0.0], &[0.25, 0.25, 0.5, 0.0]),
            // case 2: adj (1/4, 1), ratio 1/4
            sample(5, 3, &[0.5, 0.25, 0.25, 0.0], &E3),
            // case 2: adj (1/2, 1), ratio 1/2
            sample(6, 1, &[0.0, 0.0, 0.5, 0.5], &E1),
            // case 3: equal entropies, ratio 1
            sample(7, 0, &[0.4, 0.6, 0.0, 0.0], &[0.4, 0.0, 0.6, 0.0]),
            // case 1 with adj_txt = 0: excluded from the ratio mean
            sample(8, 1, &E1, &U),
            // image and text both right: no case
            sample(9, 0, &E0, &E0),
        ]
    }

    #[test]
    fn scripted_stream_matches_hand_trace() {
        let logs = run_stream(&scripted_case_stream(), EnsembleMode::Modal).unwrap();
        let adj: Vec<(f64, f64)> = logs.iter().map(|l| (l.adj_img, l.adj_txt)).collect();
        let expect = [
            (1.0, 1.0),
            (1.0, 1.0),
            (1.0, 0.25),
            (0.5, 0.25),
            (0.25, 1.0),
            (0.5, 1.0),
        ];
        for (got, want) in adj.iter().zip(expect) {
            assert!(
                (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12,
                "{got:?} vs {want:?}"
            );
        }
        assert_eq!(logs[7].adj_txt, 0.0);
        assert_eq!(
            logs.iter().map(|l| l.ens_pred).collect::<Vec<_>>(),
            [0, 1, 2, 0, 3, 1, 0, 1, 0]
        );

        let report = analyze_case_samples(&logs);
        let c1 = report.row(Case::ImageOnly).unwrap();
        assert_eq!((c1.samples, c1.zero_txt_excluded), (3, 1));
        assert!((c1.mean_ratio.unwrap() - 3.0).abs() < 1e-9);
        let c2 = report.row(Case::TextOnly).unwrap();
        assert_eq!(c2.samples, 2);
        assert!((c2.mean_ratio.unwrap() - 0.375).abs() < 1e-9);
        let c3 = report.row(Case::Neither).unwrap();
        assert_eq!(c3.mean_ratio, Some(1.0));
    }

    #[test]
    fn ratio_two_stream() {
        // After pinning, a case-1 sample with adj (1/2, 1/4) has ratio 2.
        let stream = vec![
            sample(1, 0, &U, &U),
            sample(2, 1, &E1, &E1),
            sample(3, 0, &[0.5, 0.5, 0.0, 0.0], &[0.25, 0.25, 0.5, 0.0]),
        ];
        let logs = run_stream(&stream, EnsembleMode::Modal).unwrap();
        let report = analyze_case_samples(&logs);
        assert_eq!(report.rows.len(), 1);
        assert!((report.row(Case::ImageOnly).unwrap().mean_ratio.unwrap() - 2.0).abs() < 1e-9);
        assert!(report.row(Case::Neither).is_none());
    }

    #[test]
    fn raw_and_adjusted_weights_diverge() {
        // t1: img uniform (alpha 0), txt one-hot on 2 (alpha 1), label 2.
        //     Both modes predict 2.
        // t2: img (1/2,1/4,1/4,0) alpha 1/4, txt (0,1/2,1/2,0) alpha 1/2, label 0.
        //     raw: 1/4*img + 1/2*txt = (1/8, 5/16, 5/16, 0) -> 1.
        //     adjusted: img range [0,1/4] -> 1, txt range [1/2,1] -> 0,
        //     so p_ens = img -> 0.
        let stream = vec![
            sample(1, 2, &U, &E2),
            sample(2, 0, &[0.5, 0.25, 0.25, 0.0], &[0.0, 0.5, 0.5, 0.0]),
        ];
        let raw = run_stream(&stream, EnsembleMode::Raw).unwrap();
        let adj = run_stream(&stream, EnsembleMode::Modal).unwrap();
        assert_eq!(raw.iter().map(|l| l.ens_pred).collect::<Vec<_>>(), [2, 1]);
        assert_eq!(adj.iter().map(|l| l.ens_pred).collect::<Vec<_>>(), [2, 0]);
        assert!((raw[1].adj_img - 0.25).abs() < 1e-12 && (raw[1].adj_txt - 0.5).abs() < 1e-12);
        assert!((adj[1].adj_img - 1.0).abs() < 1e-12 && adj[1].adj_txt.abs() < 1e-12);
        assert_eq!(Summary::from_samples(&raw).acc.ens_acc, 50.0);
        assert_eq!(Summary::from_samples(&adj).acc.ens_acc, 100.0);
    }

    #[test]
    fn population_std_of_three() {
        let xs = [70.0, 72.0, 74.0];
        assert!((population_std(&xs) - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(population_std(&[5.0]), 0.0);
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(shuffled_order(50, 3), shuffled_order(50, 3));
        assert_ne!(shuffled_order(50, 3), shuffled_order(50, 4));
        let mut o = shuffled_order(50, 9);
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_equal_ratio_cases() {
        let logs = run_stream(
            &[sample(1, 1, &[0.4, 0.6], &[0.4, 0.6])],
            EnsembleMode::Modal,
        )
        .unwrap();
        assert!(analyze_case_samples(&logs).rows.is_empty());
        let logs = run_stream(
            &[sample(1, 0, &[0.4, 0.6], &[0.4, 0.6])],
            EnsembleMode::Modal,
        )
        .unwrap();
        assert!(analyze_case_samples(&logs).rows.is_empty());
    }
}
