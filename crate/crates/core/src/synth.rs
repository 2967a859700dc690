//! Seeded synthetic corpora for tests, benchmarks and demos.
//!
//! Each class owns a random prototype direction in every space. An image or
//! caption embedding is its class prototype plus isotropic Gaussian noise,
//! renormalized. Captions may describe a different class than their image
//! (`caption_flip`), which is what makes direct and indirect retrieval
//! disagree.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ClassesSection, DataFiles, EngineConfig};
use crate::error::{Error, Result};
use crate::store::{
    normalize_row, save_matrix, write_metadata, ClassSet, ClassSetFile, Corpus, EmbeddingMatrix,
    EmbeddingSpace, MetadataLine, QuerySet,
};

pub const COARSE: &str = "coarse";
pub const FINE: &str = "fine";
pub const QUERY_FINE: &str = "query_fine";
pub const INFERENCE: &str = "inference";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub corpus_size: usize,
    pub queries: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub inference_dim: usize,
    /// Noise scale on image embeddings (corpus and queries).
    pub image_noise: f32,
    /// Noise scale on caption embeddings.
    pub text_noise: f32,
    /// Probability that a caption describes a random class.
    pub caption_flip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            corpus_size: 2000,
            queries: 200,
            coarse_dim: 16,
            fine_dim: 24,
            inference_dim: 32,
            image_noise: 0.35,
            text_noise: 0.3,
            caption_flip: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spaces: Vec<EmbeddingSpace>,
    pub corpus: Corpus,
    /// Class of each corpus image, by row.
    pub corpus_labels: Vec<u32>,
    pub queries: QuerySet,
    pub classes: ClassSet,
}

struct Prototypes {
    space: EmbeddingSpace,
    rows: Vec<Vec<f32>>,
}

impl Prototypes {
    fn new(rng: &mut ChaCha8Rng, space: EmbeddingSpace, classes: usize) -> Self {
        let rows = (0..classes)
            .map(|_| noisy(rng, &vec![0.0; space.dim], 1.0))
            .collect();
        Self { space, rows }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, class: usize, noise: f32) -> Vec<f32> {
        noisy(rng, &self.rows[class], noise)
    }
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f32], scale: f32) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = center
            .iter()
            .map(|c| c + scale * rng.sample::<f32, _>(StandardNormal))
            .collect();
        if normalize_row(&mut v).is_some() {
            return v;
        }
    }
}

fn matrix(space: &EmbeddingSpace, rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(space.clone(), rows.concat())
}

impl SynthSpec {
    pub fn spaces(&self) -> Result<Vec<EmbeddingSpace>> {
        Ok(vec![
            EmbeddingSpace::new(COARSE, self.coarse_dim, true)?,
            EmbeddingSpace::new(FINE, self.fine_dim, true)?,
            EmbeddingSpace::new(QUERY_FINE, self.fine_dim, true)?,
            EmbeddingSpace::new(INFERENCE, self.inference_dim, true)?,
        ])
    }

    pub fn class_name(class: usize) -> String {
        format!("class_{class}")
    }

    pub fn generate(&self) -> Result<SynthData> {
        if self.classes < 2 {
            return Err(Error::TooFewClasses(self.classes));
        }
        if self.corpus_size == 0 {
            return Err(Error::EmptyMatrix);
        }
        let spaces = self.spaces()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let c = self.classes;
        let coarse = Prototypes::new(&mut rng, spaces[0].clone(), c);
        let fine = Prototypes::new(&mut rng, spaces[1].clone(), c);
        let inference = Prototypes::new(&mut rng, spaces[3].clone(), c);

        let class_rows: Vec<Vec<f32>> =
            (0..c).map(|k| inference.sample(&mut rng, k, 0.1)).collect();
        let classes = ClassSet::new(
            (0..c).map(Self::class_name).collect(),
            [matrix(&inference.space, class_rows)?],
        )?;

        let mut corpus_labels = Vec::with_capacity(self.corpus_size);
        let mut entries = Vec::with_capacity(self.corpus_size);
        let (mut img, mut cap_fine, mut cap_inf) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.corpus_size {
            let class = rng.random_range(0..c);
            let described = if rng.random_bool(self.caption_flip) {
                rng.random_range(0..c)
            } else {
                class
            };
            corpus_labels.push(class as u32);
            entries.push((
                i as u64 + 1,
                format!("a picture of {}", Self::class_name(described)),
            ));
            img.push(coarse.sample(&mut rng, class, self.image_noise));
            cap_fine.push(fine.sample(&mut rng, described, self.text_noise));
            cap_inf.push(inference.sample(&mut rng, described, self.text_noise));
        }
        let corpus = Corpus::new(
            entries,
            [
                matrix(&coarse.space, img)?,
                matrix(&fine.space, cap_fine)?,
                matrix(&inference.space, cap_inf)?,
            ],
        )?;

        let mut labels = Vec::with_capacity(self.queries);
        let (mut q_coarse, mut q_fine, mut q_inf) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.queries {
            let class = rng.random_range(0..c);
            labels.push(class as u32);
            q_coarse.push(coarse.sample(&mut rng, class, self.image_noise));
            q_fine.push(fine.sample(&mut rng, class, self.image_noise));
            q_inf.push(inference.sample(&mut rng, class, self.image_noise));
        }
        let queries = if self.queries == 0 {
            QuerySet::new(Vec::new(), Some(Vec::new()), [])?
        } else {
            QuerySet::new(
                (0..self.queries as u64).map(|i| 10_000_000 + i).collect(),
                Some(labels),
                [
                    matrix(&coarse.space, q_coarse)?,
                    matrix(&spaces[2], q_fine)?,
                    matrix(&inference.space, q_inf)?,
                ],
            )?
        };

        Ok(SynthData {
            spaces,
            corpus,
            corpus_labels,
            queries,
            classes,
        })
    }
}

impl SynthData {
    /// Writes matrices, metadata, the class set and `engine.toml` into `dir`
    /// and returns the config path. Config paths are relative to `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let save = |m: &EmbeddingMatrix, file: &str| {
            save_matrix(m, &dir.join(file)).map(|_| PathBuf::from(file))
        };

        let mut corpus_files = DataFiles {
            metadata: "corpus.jsonl".into(),
            matrices: Default::default(),
        };
        for name in [COARSE, FINE, INFERENCE] {
            let file = save(self.corpus.matrix(name)?, &format!("corpus.{name}.xmeb"))?;
            corpus_files.matrices.insert(name.into(), file);
        }
        let lines: Vec<MetadataLine> = self
            .corpus
            .records()
            .iter()
            .map(|r| MetadataLine {
                id: r.id,
                caption: Some(r.caption.clone()),
                label: None,
            })
            .collect();
        write_jsonl(&dir.join(&corpus_files.metadata), &lines)?;

        let mut query_files = DataFiles {
            metadata: "queries.jsonl".into(),
            matrices: Default::default(),
        };
        if !self.queries.is_empty() {
            for name in [COARSE, QUERY_FINE, INFERENCE] {
                let file = save(self.queries.matrix(name)?, &format!("queries.{name}.xmeb"))?;
                query_files.matrices.insert(name.into(), file);
            }
        }
        let labels = self.queries.labels().unwrap_or(&[]);
        let lines: Vec<MetadataLine> = self
            .queries
            .ids()
            .iter()
            .zip(labels)
            .map(|(&id, &label)| MetadataLine {
                id,
                caption: None,
                label: Some(label),
            })
            .collect();
        write_jsonl(&dir.join(&query_files.metadata), &lines)?;

        let class_file = ClassSetFile {
            labels: self.classes.labels().to_vec(),
            embeddings: [(INFERENCE.to_string(), format!("classes.{INFERENCE}.xmeb"))]
                .into_iter()
                .collect(),
        };
        save(
            self.classes.embeddings(INFERENCE)?,
            &format!("classes.{INFERENCE}.xmeb"),
        )?;
        let class_path = dir.join("classes.json");
        std::fs::write(&class_path, serde_json::to_string_pretty(&class_file)?)
            .map_err(|e| Error::io(&class_path, e))?;

        let config = EngineConfig {
            spaces: self.spaces.clone(),
            corpus: corpus_files,
            queries: (!self.queries.is_empty()).then_some(query_files),
            classes: ClassesSection {
                path: "classes.json".into(),
            },
            index: Default::default(),
            retrieval: Default::default(),
            inference: Default::default(),
            ensemble: Default::default(),
            eval: Default::default(),
        };
        config.validate()?;
        let config_path = dir.join("engine.toml");
        std::fs::write(&config_path, config.render()?).map_err(|e| Error::io(&config_path, e))?;
        Ok(config_path)
    }
}

fn write_jsonl(path: &Path, lines: &[MetadataLine]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metadata(lines, BufWriter::new(file))
}
