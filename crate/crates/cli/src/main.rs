//! `crossret`: build indices, retrieve captions, classify and evaluate.
//!
//! Exit codes: 0 ok, 2 input error, 64 usage error, 70 internal error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crossret_core::config::IndexKind;
use crossret_core::eval::{analyze_cases, SeedSummary};
use crossret_core::knn::IvfLayout;
use crossret_core::{
    ClassSet, Corpus, EmbeddingMatrix, EngineConfig, EnsembleMode, EnsembleState, Error, Index,
    Pipeline, QuerySet, RetrievalMode, Retriever,
};

const EXIT_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_INTERNAL: u8 = 70;

#[derive(Parser, Debug)]
#[command(
    name = "crossret",
    version,
    about = "Retrieval-augmented zero-shot classification"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Values given here override the config file.
#[derive(Args, Debug)]
struct Common {
    /// Engine config file (TOML).
    #[arg(long, global = true, default_value = "engine.toml")]
    config: PathBuf,
    /// Coarse candidates per query.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Captions kept per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Softmax logit scale.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Ensemble weighting: modal, equal or raw.
    #[arg(long, global = true)]
    mode: Option<EnsembleMode>,
    /// Comma-separated shuffle seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Use the captions of the top-K coarse image hits.
    #[arg(long, global = true)]
    indirect: bool,
    /// Write data here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit JSON instead of a text table.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and persist the coarse IVF index (no-op for exact indices).
    BuildIndex {
        /// Overwrite an existing index file.
        #[arg(long)]
        force: bool,
    },
    /// Dump retrieved captions as JSONL, one line per query.
    Retrieve,
    /// Classify queries in file order, one JSONL line per query.
    Infer {
        /// Ensemble state snapshot to resume from and save to.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Accuracy over shuffled streams, or a K / N sweep.
    Eval {
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep_n")]
        sweep_k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_n: Option<Vec<usize>>,
    },
    /// Confidence analyses and ablations.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Mean modality entropies per K.
    Entropy {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        ks: Vec<usize>,
    },
    /// Adjusted-confidence ratios for samples only the ensemble gets right.
    Cases,
    /// Raw vs min-max adjusted ensemble weights.
    Adjustment,
    /// Direct vs indirect caption retrieval.
    RetrievalAblation,
}

/// Errors in how the command was invoked rather than in its inputs.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// A closed downstream pipe (`crossret retrieve | head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>()
            .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if e.downcast_ref::<Error>().is_some() {
        EXIT_INPUT
    } else {
        EXIT_INTERNAL
    }
}

fn load_config(common: &Common) -> Result<EngineConfig> {
    let mut config = EngineConfig::load(&common.config)?;
    if let Some(n) = common.n {
        config.retrieval.n = n;
    }
    if let Some(k) = common.k {
        config.retrieval.k = k;
    }
    if let Some(t) = common.temperature {
        config.inference.temperature = t;
    }
    if let Some(m) = common.mode {
        config.ensemble.mode = m;
    }
    if let Some(s) = &common.seeds {
        config.eval.seeds = s.clone();
    }
    config.validate()?;
    Ok(config)
}

fn retrieval_mode(common: &Common) -> RetrievalMode {
    if common.indirect {
        RetrievalMode::Indirect
    } else {
        RetrievalMode::Direct
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let config = load_config(common)?;
    match cli.command {
        Command::BuildIndex { force } => build_index(&config, common, force),
        Command::Retrieve => {
            let corpus = config.load_corpus()?;
            let queries = config.load_queries()?;
            let coarse = corpus.matrix(&config.retrieval.coarse_space)?;
            let index = open_index(&config, coarse)?;
            let retriever = Retriever::new(&corpus, &index, &config.retrieval_config())?
                .with_probes(config.index.probes());
            retrieve(&config, common, &retriever, &queries)
        }
        command => {
            let corpus = config.load_corpus()?;
            let queries = config.load_queries()?;
            let classes = config.load_classes()?;
            let coarse = corpus.matrix(&config.retrieval.coarse_space)?;
            let index = open_index(&config, coarse)?;
            let pipeline = pipeline(&config, &corpus, &index, &classes)?;
            match command {
                Command::Infer { state } => {
                    infer(&config, common, &pipeline, &queries, state.as_deref())
                }
                Command::Eval { sweep_k, sweep_n } => {
                    eval(&config, common, &pipeline, &queries, sweep_k, sweep_n)
                }
                Command::Analyze { what } => analyze(&config, common, &pipeline, &queries, what),
                Command::BuildIndex { .. } | Command::Retrieve => unreachable!(),
            }
        }
    }
}

fn pipeline<'a>(
    config: &EngineConfig,
    corpus: &'a Corpus,
    index: &'a Index<'a>,
    classes: &'a ClassSet,
) -> Result<Pipeline<'a>> {
    let retrieval = config.retrieval_config();
    let retriever = Retriever::new(corpus, index, &retrieval)?.with_probes(config.index.probes());
    Ok(Pipeline::new(
        retriever,
        classes,
        retrieval,
        config.inference_config(),
    )?)
}

/// Loads the persisted IVF layout when there is one, else builds in memory.
fn open_index<'a>(config: &EngineConfig, matrix: &'a EmbeddingMatrix) -> Result<Index<'a>> {
    if config.index.mode == IndexKind::Ivf {
        if let Some(path) = config.index.path.as_deref().filter(|p| p.exists()) {
            let bytes = std::fs::read(path).map_err(|e| Error::IoFailure {
                path: path.to_owned(),
                source: e,
            })?;
            let layout = IvfLayout::decode(&bytes)?;
            let expected = config.index.num_lists.min(matrix.count());
            if layout.num_lists() != expected {
                return Err(Error::MalformedIndex(format!(
                    "{} has {} lists, config asks for {expected}; rebuild with --force",
                    path.display(),
                    layout.num_lists()
                ))
                .into());
            }
            return Ok(Index::with_layout(matrix, layout)?);
        }
    }
    Ok(Index::build(matrix, config.index.index_mode())?)
}

fn build_index(config: &EngineConfig, common: &Common, force: bool) -> Result<()> {
    if config.index.mode == IndexKind::Exact {
        eprintln!("exact index: nothing to persist");
        return Ok(());
    }
    let path = common
        .out
        .clone()
        .or_else(|| config.index.path.clone())
        .ok_or_else(|| UsageError("IVF index needs [index] path or --out".into()))?;
    if path.exists() && !force {
        eprintln!(
            "{} exists; skipping (use --force to rebuild)",
            path.display()
        );
        return Ok(());
    }
    let corpus = config.load_corpus()?;
    let matrix = corpus.matrix(&config.retrieval.coarse_space)?;
    let layout = IvfLayout::train(matrix, config.index.num_lists, config.index.seed)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, layout.encode()).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
    eprintln!(
        "wrote {} ({} lists over {} rows)",
        path.display(),
        layout.num_lists(),
        matrix.count()
    );
    Ok(())
}

fn output(common: &Common) -> Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| {
            Error::IoFailure {
                path: path.clone(),
                source: e,
            }
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    id: u64,
    caption: &'a str,
    score: f32,
}

#[derive(Serialize)]
struct RetrieveLine<'a> {
    query_id: u64,
    captions: Vec<CaptionLine<'a>>,
}

fn retrieve(
    config: &EngineConfig,
    common: &Common,
    retriever: &Retriever,
    queries: &QuerySet,
) -> Result<()> {
    let cfg = config.retrieval_config();
    let mut out = output(common)?;
    for (i, &query_id) in queries.ids().iter().enumerate() {
        let image = queries.embedding(&cfg.coarse_space, i)?;
        let captions = match retrieval_mode(common) {
            RetrievalMode::Direct => {
                retriever.retrieve(image, queries.embedding(&cfg.query_fine_space, i)?, &cfg)?
            }
            RetrievalMode::Indirect => retriever.indirect_retrieve(image, &cfg)?,
        };
        let line = RetrieveLine {
            query_id,
            captions: captions
                .entries
                .iter()
                .map(|c| CaptionLine {
                    id: c.record_id,
                    caption: &c.caption,
                    score: c.score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct InferLine<'a> {
    query_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_label: Option<u32>,
    predicted_class: usize,
    predicted_label: &'a str,
    img_pred: usize,
    txt_pred: usize,
    alpha_img: f64,
    alpha_txt: f64,
    adj_img: f64,
    adj_txt: f64,
    p_img: &'a [f64],
    p_txt: &'a [f64],
    p_ens: &'a [f64],
}

fn infer(
    config: &EngineConfig,
    common: &Common,
    pipeline: &Pipeline,
    queries: &QuerySet,
    state_path: Option<&Path>,
) -> Result<()> {
    let mut state = match state_path.filter(|p| p.exists()) {
        Some(p) => EnsembleState::from_json(&std::fs::read_to_string(p).map_err(|e| {
            Error::IoFailure {
                path: p.to_owned(),
                source: e,
            }
        })?)?,
        None => EnsembleState::new(),
    };
    let prepared = pipeline.prepare(queries, config.retrieval.n, retrieval_mode(common))?;
    let mut out = output(common)?;
    let labels = pipeline.classes().labels();
    for (i, p) in prepared.iter().enumerate() {
        let p_txt = pipeline.text_prediction(&p.ranking.prefix(config.retrieval.k))?;
        let ens = state.step(&p.p_img, &p_txt, config.ensemble.mode)?;
        let line = InferLine {
            query_id: queries.ids()[i],
            true_label: queries.labels().map(|l| l[i]),
            predicted_class: ens.predicted_class,
            predicted_label: &labels[ens.predicted_class],
            img_pred: p.p_img.argmax(),
            txt_pred: p_txt.argmax(),
            alpha_img: p.p_img.confidence,
            alpha_txt: p_txt.confidence,
            adj_img: ens.adj_img,
            adj_txt: ens.adj_txt,
            p_img: &p.p_img.probs,
            p_txt: &p_txt.probs,
            p_ens: &ens.p_ens,
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    out.flush()?;
    if let Some(path) = state_path {
        std::fs::write(path, state.to_json()).map_err(|e| Error::IoFailure {
            path: path.to_owned(),
            source: e,
        })?;
    }
    Ok(())
}

fn emit<T: Serialize + std::fmt::Display>(common: &Common, report: &T) -> Result<()> {
    let mut out = output(common)?;
    if common.json {
        serde_json::to_writer_pretty(&mut out, report)?;
        writeln!(out)?;
    } else {
        writeln!(out, "{}", report.to_string().trim_end())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    runs: Vec<crossret_core::EvalRun>,
    aggregate: SeedSummary,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(run) = self.runs.first() {
            let c = &run.config;
            writeln!(
                f,
                "N={} K={} temperature={} mode={} retrieval={:?}",
                c.retrieval.n_candidates,
                c.retrieval.k_captions,
                c.inference.temperature,
                c.ensemble_mode,
                c.retrieval_mode
            )?;
        }
        write!(f, "{}", self.aggregate)
    }
}

fn eval(
    config: &EngineConfig,
    common: &Common,
    pipeline: &Pipeline,
    queries: &QuerySet,
    sweep_k: Option<Vec<usize>>,
    sweep_n: Option<Vec<usize>>,
) -> Result<()> {
    let (mode, seeds) = (config.ensemble.mode, &config.eval.seeds);
    if (sweep_k.is_some() || sweep_n.is_some()) && common.indirect {
        return Err(UsageError("--indirect cannot be combined with a sweep".into()).into());
    }
    if let Some(ks) = sweep_k {
        return emit(common, &pipeline.sweep_k(queries, &ks, mode, seeds)?);
    }
    if let Some(ns) = sweep_n {
        return emit(common, &pipeline.sweep_n(queries, &ns, mode, seeds)?);
    }
    let runs = pipeline.evaluate_with(queries, mode, retrieval_mode(common), seeds)?;
    let aggregate = SeedSummary::from_runs(&runs);
    emit(common, &EvalReport { runs, aggregate })
}

fn analyze(
    config: &EngineConfig,
    common: &Common,
    pipeline: &Pipeline,
    queries: &QuerySet,
    what: Analysis,
) -> Result<()> {
    let (mode, seeds) = (config.ensemble.mode, &config.eval.seeds);
    match what {
        Analysis::Entropy { ks } => emit(common, &pipeline.analyze_entropy(queries, &ks)?),
        Analysis::Cases => {
            let run = pipeline
                .evaluate_with(queries, mode, retrieval_mode(common), &seeds[..1])?
                .remove(0);
            emit(common, &analyze_cases(&run))
        }
        Analysis::Adjustment => emit(common, &pipeline.ablate_adjustment(queries, seeds)?),
        Analysis::RetrievalAblation => {
            emit(common, &pipeline.ablate_retrieval(queries, mode, seeds)?)
        }
    }
}
