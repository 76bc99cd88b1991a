//! Self-training cleaning loop.
//!
//! Every iteration asks the embedding provider (the current teacher) for
//! fresh features, re-cleans the *original* raw corpus with them, and then
//! runs inter-class cleaning on the result. Duplicate and test-overlap removal
//! run once, after the final iteration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{intra_class_clean_with, DbscanParams};
use crate::corpus::{normalize_row, unit_similarity, Corpus, EmbeddingStore, IdentityFolder};
use crate::dedup::{remove_duplicates, remove_test_overlap, DUPLICATE_THRESHOLD, OVERLAP_THRESHOLD};
use crate::error::{CurateError, Result};
use crate::merge::{
    apply_inter_class, compute_centers, folder_center, plan_inter_class, CenterIndex,
    InterClassThresholds, MergePlan, DELETE_LOWER_BOUND, MERGE_THRESHOLD,
};
pub use crate::stats::{Histogram, StageStats, HISTOGRAM_BINS};

/// Source of per-iteration embeddings. Iterations are numbered from 1.
///
/// The returned store must have one unit row per row of `corpus.store()`,
/// aligned by embedding index, with the same dimension every iteration.
pub trait EmbeddingProvider: Sync {
    fn provide(&self, iteration: usize, corpus: &Corpus) -> Result<EmbeddingStore>;
}

/// Hands back the corpus's own embeddings every iteration.
#[derive(Clone, Copy, Debug, Default)]
pub struct StoredEmbeddings;

impl EmbeddingProvider for StoredEmbeddings {
    fn provide(&self, _iteration: usize, corpus: &Corpus) -> Result<EmbeddingStore> {
        Ok(corpus.store().clone())
    }
}

/// Reads one embedding file per iteration.
#[derive(Clone, Debug)]
pub struct EmbeddingFiles {
    pub paths: Vec<PathBuf>,
}

impl EmbeddingProvider for EmbeddingFiles {
    fn provide(&self, iteration: usize, _corpus: &Corpus) -> Result<EmbeddingStore> {
        let path = self.paths.get(iteration - 1).ok_or_else(|| {
            CurateError::InvalidParameter(format!(
                "no embedding file configured for iteration {iteration}"
            ))
        })?;
        EmbeddingStore::load(path)
    }
}

/// Simulated teacher: the stored embeddings plus Gaussian noise whose scale
/// shrinks from one iteration to the next.
///
/// With `rank > 0` the noise lives in a fixed random `rank`-dimensional
/// subspace shared by all faces, like nuisance factors (pose, lighting) a
/// weak model fails to factor out; `rank == 0` gives isotropic noise. Noise
/// for a row is seeded from its content, so identical inputs stay identical.
#[derive(Clone, Debug)]
pub struct NoisyTeacher {
    /// Expected noise norm per iteration.
    pub scales: Vec<f32>,
    pub rank: usize,
    pub seed: u64,
}

pub const DEFAULT_TEACHER_SCALES: [f32; 3] = [1.2, 0.8, 0.4];
pub const DEFAULT_TEACHER_RANK: usize = 8;

impl NoisyTeacher {
    pub fn new(scales: Vec<f32>, rank: usize, seed: u64) -> Self {
        NoisyTeacher { scales, rank, seed }
    }

    /// Three iterations of shrinking low-rank noise.
    pub fn shrinking(seed: u64) -> Self {
        NoisyTeacher::new(DEFAULT_TEACHER_SCALES.to_vec(), DEFAULT_TEACHER_RANK, seed)
    }

    fn basis(&self, dim: usize) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e75_6973_616e_6365);
        (0..self.rank)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }
}

fn fnv1a(seed: u64, iteration: usize, row: &[f32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(iteration as u64).to_le_bytes());
    for x in row {
        eat(&x.to_le_bytes());
    }
    h
}

impl EmbeddingProvider for NoisyTeacher {
    fn provide(&self, iteration: usize, corpus: &Corpus) -> Result<EmbeddingStore> {
        let scale = *self.scales.get(iteration - 1).ok_or_else(|| {
            CurateError::InvalidParameter(format!(
                "noisy teacher has {} scales, iteration {iteration} requested",
                self.scales.len()
            ))
        })?;
        let store = corpus.store();
        let dim = store.dim();
        let basis = self.basis(dim);
        let rows: Vec<Vec<f32>> = (0..store.row_count())
            .into_par_iter()
            .map(|r| {
                let src = store.row(r);
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, iteration, src));
                let mut out = src.to_vec();
                if basis.is_empty() {
                    let s = scale / (dim as f32).sqrt();
                    for x in out.iter_mut() {
                        *x += s * rng.sample::<f32, _>(StandardNormal);
                    }
                } else {
                    let s = scale / (basis.len() as f32).sqrt();
                    for b in &basis {
                        let z = s * rng.sample::<f32, _>(StandardNormal);
                        for (x, &y) in out.iter_mut().zip(b) {
                            *x += z * y;
                        }
                    }
                }
                let _ = normalize_row(&mut out);
                out
            })
            .collect();
        EmbeddingStore::from_rows(dim, rows.concat())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CastConfig {
    pub iterations: usize,
    /// DBSCAN similarity `1 - epsilon` per iteration.
    pub similarity_schedule: Vec<f32>,
    pub min_pts: usize,
    pub merge_threshold: f32,
    pub delete_lower: f32,
    pub dedup_threshold: f32,
    pub overlap_threshold: f32,
    /// Folders sampled for the per-stage similarity histograms.
    pub histogram_sample_folders: usize,
    pub histogram_seed: u64,
}

impl Default for CastConfig {
    fn default() -> Self {
        CastConfig {
            iterations: 3,
            similarity_schedule: vec![0.5, 0.55, 0.6],
            min_pts: 3,
            merge_threshold: MERGE_THRESHOLD,
            delete_lower: DELETE_LOWER_BOUND,
            dedup_threshold: DUPLICATE_THRESHOLD,
            overlap_threshold: OVERLAP_THRESHOLD,
            histogram_sample_folders: 100_000,
            histogram_seed: 0,
        }
    }
}

impl CastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CurateError::InvalidParameter(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.similarity_schedule.len() < self.iterations {
            return bad(format!(
                "similarity_schedule has {} entries for {} iterations",
                self.similarity_schedule.len(),
                self.iterations
            ));
        }
        if self.similarity_schedule.windows(2).any(|w| w[1] < w[0]) {
            return bad("similarity_schedule must be non-decreasing".into());
        }
        if self.delete_lower > self.merge_threshold {
            return bad("delete_lower must not exceed merge_threshold".into());
        }
        for &s in &self.similarity_schedule {
            DbscanParams::from_similarity(s, self.min_pts)?;
        }
        Ok(())
    }

    pub fn dbscan_params(&self, iteration: usize) -> Result<DbscanParams> {
        DbscanParams::from_similarity(self.similarity_schedule[iteration - 1], self.min_pts)
    }

    pub fn inter_class_thresholds(&self) -> InterClassThresholds {
        InterClassThresholds {
            merge: self.merge_threshold,
            delete_lower: self.delete_lower,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CastConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CurateError::Config {
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let num = |v: &str| -> Result<f32> {
                v.parse().map_err(|_| err(format!("{key}: invalid number {v:?}")))
            };
            let int = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| err(format!("{key}: invalid integer {v:?}")))
            };
            match key {
                "iterations" => cfg.iterations = int(value)? as usize,
                "similarity_schedule" => {
                    cfg.similarity_schedule =
                        value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?
                }
                "min_pts" => cfg.min_pts = int(value)? as usize,
                "merge_threshold" => cfg.merge_threshold = num(value)?,
                "delete_lower" => cfg.delete_lower = num(value)?,
                "dedup_threshold" => cfg.dedup_threshold = num(value)?,
                "overlap_threshold" => cfg.overlap_threshold = num(value)?,
                "histogram_sample_folders" => cfg.histogram_sample_folders = int(value)? as usize,
                "histogram_seed" => cfg.histogram_seed = int(value)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CurateError::io(path, e))?;
        CastConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let schedule: Vec<String> = self.similarity_schedule.iter().map(f32::to_string).collect();
        format!(
            "iterations = {}\nsimilarity_schedule = {}\nmin_pts = {}\nmerge_threshold = {}\n\
             delete_lower = {}\ndedup_threshold = {}\noverlap_threshold = {}\n\
             histogram_sample_folders = {}\nhistogram_seed = {}\n",
            self.iterations,
            schedule.join(","),
            self.min_pts,
            self.merge_threshold,
            self.delete_lower,
            self.dedup_threshold,
            self.overlap_threshold,
            self.histogram_sample_folders,
            self.histogram_seed,
        )
    }
}

/// Intra-folder pair histogram and folder-center pair histogram over a
/// seeded sample of folders.
pub fn similarity_distributions(
    corpus: &Corpus,
    sample_folders: usize,
    seed: u64,
) -> Result<(Histogram, Histogram)> {
    let folders: Vec<&IdentityFolder> = corpus.folders().collect();
    if sample_folders > folders.len() {
        return Err(CurateError::InvalidParameter(format!(
            "cannot sample {sample_folders} of {} folders",
            folders.len()
        )));
    }
    let sampled: Vec<&IdentityFolder> = if sample_folders == folders.len() {
        folders
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, folders.len(), sample_folders).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| folders[i]).collect()
    };

    let intra_parts = sampled
        .par_iter()
        .map(|f| {
            let rows = corpus.folder_embeddings(f)?;
            let mut h = Histogram::default();
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    h.add(unit_similarity(rows[i], rows[j]));
                }
            }
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut intra = Histogram::default();
    for h in &intra_parts {
        intra.merge(h);
    }

    let centers: Vec<Vec<f32>> = sampled
        .iter()
        .filter_map(|f| folder_center(corpus, f).ok())
        .collect();
    let inter_parts: Vec<Histogram> = (0..centers.len())
        .into_par_iter()
        .map(|i| {
            let mut h = Histogram::default();
            for j in (i + 1)..centers.len() {
                h.add(unit_similarity(&centers[i], &centers[j]));
            }
            h
        })
        .collect();
    let mut inter = Histogram::default();
    for h in &inter_parts {
        inter.merge(h);
    }
    Ok((intra, inter))
}

#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub iteration: usize,
    pub intra: Corpus,
    pub inter: Corpus,
    pub plan: MergePlan,
}

#[derive(Clone, Debug)]
pub struct CastOutcome {
    /// Final corpus, carrying the last iteration's embeddings.
    pub corpus: Corpus,
    pub stages: Vec<StageStats>,
    pub iterations: Vec<IterationOutput>,
}

impl CastOutcome {
    /// The final folders over another corpus's embeddings (typically the raw
    /// input), compacted to the surviving rows.
    pub fn cleaned_over(&self, raw: &Corpus) -> Result<Corpus> {
        Ok(raw.with_folders(self.corpus.folders().cloned())?.compact())
    }
}

fn attach_histograms(stats: &mut StageStats, corpus: &Corpus, config: &CastConfig) -> Result<()> {
    let sample = config.histogram_sample_folders.min(corpus.identity_count());
    let (intra, inter) = similarity_distributions(corpus, sample, config.histogram_seed)?;
    stats.intra_similarity_histogram = Some(intra);
    stats.inter_similarity_histogram = Some(inter);
    Ok(())
}

pub fn run_cast(
    raw: &Corpus,
    provider: &dyn EmbeddingProvider,
    config: &CastConfig,
    exclusion: Option<&CenterIndex>,
) -> Result<CastOutcome> {
    config.validate()?;
    let counts = |c: &Corpus| (c.identity_count(), c.face_count());
    let mut stages = Vec::new();
    let mut iterations = Vec::new();
    let mut dim = None;

    for i in 1..=config.iterations {
        let store = provider
            .provide(i, raw)
            .map_err(|e| CurateError::Provider {
                iteration: i,
                source: Box::new(e),
            })?;
        if *dim.get_or_insert(store.dim()) != store.dim() {
            return Err(CurateError::Provider {
                iteration: i,
                source: Box::new(CurateError::Dimension {
                    expected: dim.unwrap(),
                    actual: store.dim(),
                }),
            });
        }
        let teacher_view = raw.with_store(Arc::new(store)).map_err(|e| CurateError::Provider {
            iteration: i,
            source: Box::new(e),
        })?;

        if i == 1 {
            let mut input = StageStats::new("input", counts(raw), counts(raw));
            attach_histograms(&mut input, &teacher_view, config)?;
            stages.push(input);
        }

        let params = config.dbscan_params(i)?;
        let (intra, mut intra_stats) =
            intra_class_clean_with(&teacher_view, &params, &format!("iteration-{i}/intra-class"))?;
        attach_histograms(&mut intra_stats, &intra, config)?;
        stages.push(intra_stats);

        let plan = plan_inter_class(&compute_centers(&intra)?, config.inter_class_thresholds());
        let (inter, mut inter_stats) = apply_inter_class(&intra, &plan)?;
        inter_stats.stage_name = format!("iteration-{i}/inter-class");
        attach_histograms(&mut inter_stats, &inter, config)?;
        stages.push(inter_stats);

        iterations.push(IterationOutput {
            iteration: i,
            intra,
            inter,
            plan,
        });
    }

    let last = &iterations.last().expect("at least one iteration").inter;
    let (deduped, mut dedup_stats) = remove_duplicates(last, config.dedup_threshold)?;
    attach_histograms(&mut dedup_stats, &deduped, config)?;
    stages.push(dedup_stats);

    let empty = CenterIndex::empty(deduped.dim());
    let (final_corpus, mut overlap_stats) =
        remove_test_overlap(&deduped, exclusion.unwrap_or(&empty), config.overlap_threshold)?;
    attach_histograms(&mut overlap_stats, &final_corpus, config)?;
    stages.push(overlap_stats);

    Ok(CastOutcome {
        corpus: final_corpus,
        stages,
        iterations,
    })
}
