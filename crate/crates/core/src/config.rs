//! Engine configuration file (TOML).
//!
//! ```toml
//! [[space]]
//! name = "coarse"
//! dim = 512
//!
//! [corpus]
//! metadata = "corpus.jsonl"
//! [corpus.matrices]
//! coarse = "corpus.coarse.xmeb"
//!
//! [classes]
//! path = "classes.json"
//!
//! [retrieval]
//! n = 128
//! k = 16
//! ```
//!
//! Relative paths are resolved against the directory of the config file by
//! [`EngineConfig::load`]; [`EngineConfig::parse`] leaves them untouched.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleMode;
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, DEFAULT_TEMPERATURE};
use crate::knn::{IndexMode, Probes};
use crate::retrieval::{RetrievalConfig, DEFAULT_K_CAPTIONS, DEFAULT_N_CANDIDATES};
use crate::store::{load_corpus, load_queries, ClassSet, Corpus, EmbeddingSpace, QuerySet};

pub const DEFAULT_NUM_LISTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(rename = "space")]
    pub spaces: Vec<EmbeddingSpace>,
    pub corpus: DataFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<DataFiles>,
    pub classes: ClassesSection,
    #[serde(default)]
    pub index: IndexSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// A metadata JSONL file plus one embedding matrix per space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub metadata: PathBuf,
    pub matrices: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassesSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Exact,
    Ivf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexSection {
    pub mode: IndexKind,
    pub num_lists: usize,
    pub seed: u64,
    /// Sidecar file for the IVF layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Lists scanned per query; all lists when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            mode: IndexKind::Exact,
            num_lists: DEFAULT_NUM_LISTS,
            seed: 0,
            path: None,
            probes: None,
        }
    }
}

impl IndexSection {
    pub fn index_mode(&self) -> IndexMode {
        match self.mode {
            IndexKind::Exact => IndexMode::Exact,
            IndexKind::Ivf => IndexMode::Ivf {
                num_lists: self.num_lists,
                seed: self.seed,
            },
        }
    }

    pub fn probes(&self) -> Probes {
        self.probes.map_or(Probes::All, Probes::Count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub n: usize,
    pub k: usize,
    pub coarse_space: String,
    pub fine_space: String,
    pub query_fine_space: String,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let d = RetrievalConfig::default();
        Self {
            n: DEFAULT_N_CANDIDATES,
            k: DEFAULT_K_CAPTIONS,
            coarse_space: d.coarse_space,
            fine_space: d.fine_space,
            query_fine_space: d.query_fine_space,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub space: String,
    pub temperature: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            space: InferenceConfig::default().space,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub mode: EnsembleMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seeds: vec![0] }
    }
}

impl EngineConfig {
    /// Parses and validates; paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or_else(|| Path::new("")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let mut files: Vec<&mut DataFiles> = vec![&mut self.corpus];
        files.extend(self.queries.as_mut());
        for f in files {
            fix(&mut f.metadata);
            f.matrices.values_mut().for_each(fix);
        }
        fix(&mut self.classes.path);
        if let Some(p) = self.index.path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.spaces.is_empty() {
            return bad("no [[space]] declared".into());
        }
        let mut names = HashSet::new();
        for s in &self.spaces {
            if s.dim == 0 {
                return bad(format!("space {:?} has dim 0", s.name));
            }
            if !names.insert(s.name.as_str()) {
                return bad(format!("space {:?} declared twice", s.name));
            }
        }
        let mut files = vec![("corpus", &self.corpus)];
        files.extend(self.queries.as_ref().map(|q| ("queries", q)));
        for (what, f) in files {
            if let Some(name) = f.matrices.keys().find(|n| !names.contains(n.as_str())) {
                return bad(format!("{what} matrix for undeclared space {name:?}"));
            }
        }
        let r = &self.retrieval;
        for name in [&r.coarse_space, &r.fine_space, &self.inference.space] {
            if !self.corpus.matrices.contains_key(name) {
                return bad(format!("corpus has no matrix for space {name:?}"));
            }
        }
        if let Some(q) = &self.queries {
            for name in [&r.coarse_space, &r.query_fine_space, &self.inference.space] {
                if !q.matrices.contains_key(name) {
                    return bad(format!("queries have no matrix for space {name:?}"));
                }
            }
        }
        if !names.contains(r.query_fine_space.as_str()) {
            return bad(format!("undeclared space {:?}", r.query_fine_space));
        }
        let dim = |n: &str| self.space(n).map(|s| s.dim);
        if dim(&r.fine_space) != dim(&r.query_fine_space) {
            return bad(format!(
                "spaces {:?} and {:?} must share a dimension",
                r.fine_space, r.query_fine_space
            ));
        }
        self.retrieval_config().validate()?;
        self.inference_config().validate()?;
        if self.index.mode == IndexKind::Ivf && self.index.num_lists == 0 {
            return bad("index.num_lists must be positive".into());
        }
        if self.index.probes == Some(0) {
            return bad("index.probes must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds is empty".into());
        }
        Ok(())
    }

    pub fn space(&self, name: &str) -> Option<&EmbeddingSpace> {
        self.spaces.iter().find(|s| s.name == name)
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        let r = &self.retrieval;
        RetrievalConfig {
            n_candidates: r.n,
            k_captions: r.k,
            coarse_space: r.coarse_space.clone(),
            fine_space: r.fine_space.clone(),
            query_fine_space: r.query_fine_space.clone(),
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            space: self.inference.space.clone(),
            temperature: self.inference.temperature,
        }
    }

    fn matrix_paths(&self, files: &DataFiles) -> Result<Vec<(EmbeddingSpace, PathBuf)>> {
        files
            .matrices
            .iter()
            .map(|(name, path)| {
                let space = self
                    .space(name)
                    .ok_or_else(|| Error::MissingSpace(name.clone()))?;
                Ok((space.clone(), path.clone()))
            })
            .collect()
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        load_corpus(&self.matrix_paths(&self.corpus)?, &self.corpus.metadata)
    }

    pub fn load_queries(&self) -> Result<QuerySet> {
        let q = self
            .queries
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no [queries] section".into()))?;
        load_queries(&self.matrix_paths(q)?, &q.metadata)
    }

    pub fn load_classes(&self) -> Result<ClassSet> {
        ClassSet::load(&self.classes.path, &self.spaces)
    }
}
