//! Seeded generator of noisy identity-labeled corpora with per-face ground
//! truth, used to score the cleaning pipeline.
//!
//! Each person gets a prototype direction on the unit sphere. Genuine faces
//! are the prototype plus tangent-space Gaussian noise, renormalized, which
//! behaves like a von Mises-Fisher cluster. Corruptions mirror what web
//! crawls produce: unrelated faces in a folder, faces of another person under
//! the wrong label, one person split across two folders, byte-identical
//! copies, and folders of people who also appear in an evaluation set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    dot, AttributeSet, Corpus, EmbeddingStore, FaceId, FaceRecord, Gender, IdentityId, Race,
    Scenario,
};
use crate::error::{CurateError, Result};
use crate::merge::CenterIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_identities: usize,
    /// Inclusive range of genuine face slots per folder.
    pub faces_per_identity_range: (usize, usize),
    pub dim: usize,
    /// Expected norm of the tangent noise added to a prototype.
    pub intra_spread: f32,
    pub outlier_fraction: f64,
    /// Outliers are placed at a similarity to the folder prototype drawn
    /// uniformly from `[0, outlier_max_similarity]`.
    pub outlier_max_similarity: f32,
    pub label_flip_fraction: f64,
    pub duplicate_identity_fraction: f64,
    pub exact_duplicate_fraction: f64,
    pub planted_test_identities: usize,
    pub min_separation_degrees: f64,
    pub masked_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_identities: 1000,
            faces_per_identity_range: (10, 24),
            dim: 512,
            intra_spread: 0.6,
            outlier_fraction: 0.20,
            outlier_max_similarity: 0.6,
            label_flip_fraction: 0.05,
            duplicate_identity_fraction: 0.05,
            exact_duplicate_fraction: 0.02,
            planted_test_identities: 10,
            min_separation_degrees: 60.0,
            masked_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CurateError::InvalidParameter(m));
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("label_flip_fraction", self.label_flip_fraction),
            ("duplicate_identity_fraction", self.duplicate_identity_fraction),
            ("exact_duplicate_fraction", self.exact_duplicate_fraction),
            ("masked_fraction", self.masked_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.outlier_fraction + self.label_flip_fraction > 1.0 {
            return bad("outlier_fraction + label_flip_fraction exceeds 1".into());
        }
        let (lo, hi) = self.faces_per_identity_range;
        if lo == 0 || lo > hi {
            return bad(format!("faces_per_identity_range ({lo}, {hi}) is empty"));
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if self.n_identities == 0 || self.planted_test_identities > self.n_identities {
            return bad("need at least one identity and no more test identities than identities".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_max_similarity) || self.intra_spread < 0.0 {
            return bad("outlier_max_similarity must be in [0, 1] and intra_spread >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaceClass {
    Clean,
    Outlier,
    Flipped,
    /// Genuine face of a person whose faces were split off into a second folder.
    DuplicateIdentity,
    ExactDuplicate,
    TestOverlap,
}

impl FaceClass {
    pub const ALL: [FaceClass; 6] = [
        FaceClass::Clean,
        FaceClass::Outlier,
        FaceClass::Flipped,
        FaceClass::DuplicateIdentity,
        FaceClass::ExactDuplicate,
        FaceClass::TestOverlap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaceClass::Clean => "clean",
            FaceClass::Outlier => "outlier",
            FaceClass::Flipped => "flipped",
            FaceClass::DuplicateIdentity => "duplicate-identity",
            FaceClass::ExactDuplicate => "exact-duplicate",
            FaceClass::TestOverlap => "test-overlap",
        }
    }

    /// Faces a perfect cleaner keeps.
    pub fn is_clean(self) -> bool {
        matches!(self, FaceClass::Clean | FaceClass::DuplicateIdentity)
    }
}

impl fmt::Display for FaceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaceClass {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self> {
        FaceClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CurateError::format("face class", format!("unknown class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub classes: BTreeMap<FaceId, FaceClass>,
    /// Folder each face was generated into.
    pub source_folder: BTreeMap<FaceId, IdentityId>,
    /// Pairs of folders holding the same person.
    pub split_pairs: Vec<(IdentityId, IdentityId)>,
    pub test_identities: Vec<IdentityId>,
    /// Prototypes of the planted test identities.
    pub exclusion: CenterIndex,
}

impl GroundTruth {
    /// TSV `face_id<TAB>class`, ascending face id.
    pub fn write_tsv(&self, writer: &mut impl Write) -> std::io::Result<()> {
        for (id, class) in &self.classes {
            writeln!(writer, "{id}\t{class}")?;
        }
        Ok(())
    }

    pub fn class_counts(&self) -> BTreeMap<FaceClass, usize> {
        let mut counts = BTreeMap::new();
        for &c in self.classes.values() {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }
}

struct Builder {
    rng: ChaCha8Rng,
    dim: usize,
    store: EmbeddingStore,
    records: Vec<FaceRecord>,
    classes: BTreeMap<FaceId, FaceClass>,
    source: BTreeMap<FaceId, IdentityId>,
    next_face: FaceId,
}

impl Builder {
    fn gaussian(&mut self, scale: f32) -> Vec<f32> {
        (0..self.dim)
            .map(|_| scale * self.rng.sample::<f32, _>(StandardNormal))
            .collect()
    }

    fn random_unit(&mut self) -> Vec<f32> {
        loop {
            let v = self.gaussian(1.0);
            let n = dot(&v, &v).sqrt();
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// Unit vector orthogonal to `p`.
    fn random_orthogonal(&mut self, p: &[f32]) -> Vec<f32> {
        loop {
            let mut v = self.random_unit();
            let d = dot(&v, p);
            for (x, &y) in v.iter_mut().zip(p) {
                *x -= d * y;
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-3 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn genuine(&mut self, prototype: &[f32], spread: f32) -> Vec<f32> {
        let mut g = self.gaussian(spread / (self.dim as f32).sqrt());
        let d = dot(&g, prototype);
        for (x, &p) in g.iter_mut().zip(prototype) {
            *x += p - d * p;
        }
        g
    }

    fn outlier(&mut self, prototype: &[f32], max_similarity: f32) -> Vec<f32> {
        let a = self.rng.random_range(0.0..=max_similarity);
        let r = self.random_orthogonal(prototype);
        let b = (1.0 - a * a).sqrt();
        prototype.iter().zip(&r).map(|(&p, &q)| a * p + b * q).collect()
    }

    fn push(
        &mut self,
        identity: IdentityId,
        row: &[f32],
        class: FaceClass,
        attributes: AttributeSet,
    ) -> Result<()> {
        let index = self.store.push_row(row)?;
        let face_id = self.next_face;
        self.next_face += 1;
        self.records.push(FaceRecord {
            face_id,
            identity_id: identity,
            embedding_index: index,
            attributes,
        });
        self.classes.insert(face_id, class);
        self.source.insert(face_id, identity);
        Ok(())
    }
}

struct Person {
    prototype: Vec<f32>,
    race: Race,
    gender: Gender,
    base_age: u32,
}

fn draw_prototypes(b: &mut Builder, n: usize, min_separation_degrees: f64) -> Result<Vec<Vec<f32>>> {
    const MAX_ATTEMPTS: usize = 1000;
    let max_cos = min_separation_degrees.to_radians().cos() as f32;
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let candidate = b.random_unit();
            if out.iter().all(|p| dot(p, &candidate) < max_cos) {
                out.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CurateError::Generation(format!(
                "could not place prototype {} of {n} at {min_separation_degrees} degrees separation in {} dimensions",
                k + 1,
                b.dim
            )));
        }
    }
    Ok(out)
}

pub fn generate(spec: &SynthSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
        store: EmbeddingStore::new(spec.dim)?,
        records: Vec::new(),
        classes: BTreeMap::new(),
        source: BTreeMap::new(),
        next_face: 1,
    };

    let prototypes = draw_prototypes(&mut b, spec.n_identities, spec.min_separation_degrees)?;
    let races = [Race::Caucasian, Race::EastAsian, Race::African];
    let people: Vec<Person> = prototypes
        .into_iter()
        .map(|prototype| Person {
            prototype,
            race: races[b.rng.random_range(0..races.len())],
            gender: if b.rng.random_bool(0.5) { Gender::Male } else { Gender::Female },
            base_age: b.rng.random_range(18..=60),
        })
        .collect();

    // Person k lives in folder k + 1. The first `planted_test_identities`
    // people also appear in the evaluation set.
    let n = spec.n_identities;
    let n_test = spec.planted_test_identities;
    let mut order: Vec<usize> = (n_test..n).collect();
    order.shuffle(&mut b.rng);
    let n_split = ((n - n_test) as f64 * spec.duplicate_identity_fraction).round() as usize;
    let split: BTreeSet<usize> = order[..n_split.min(order.len())].iter().copied().collect();

    let mut split_pairs = Vec::new();
    let mut folders: Vec<(IdentityId, usize, FaceClass)> = Vec::new();
    for k in 0..n {
        let id = k as IdentityId + 1;
        if k < n_test {
            folders.push((id, k, FaceClass::TestOverlap));
        } else {
            folders.push((id, k, FaceClass::Clean));
        }
    }
    for (s, &k) in split.iter().enumerate() {
        let second = (n + s) as IdentityId + 1;
        split_pairs.push((k as IdentityId + 1, second));
        folders.push((second, k, FaceClass::DuplicateIdentity));
    }

    let (lo, hi) = spec.faces_per_identity_range;
    for (folder_id, person, genuine_class) in folders {
        let size = b.rng.random_range(lo..=hi);
        let corruptible = genuine_class != FaceClass::TestOverlap;
        for _ in 0..size {
            let u: f64 = b.rng.random();
            let (class, source_person) = if corruptible && u < spec.outlier_fraction {
                (FaceClass::Outlier, person)
            } else if corruptible && u < spec.outlier_fraction + spec.label_flip_fraction && n - n_test > 1 {
                let mut other = b.rng.random_range(n_test..n);
                while other == person {
                    other = b.rng.random_range(n_test..n);
                }
                (FaceClass::Flipped, other)
            } else {
                (genuine_class, person)
            };
            let src = &people[source_person];
            let row = match class {
                FaceClass::Outlier => b.outlier(&src.prototype.clone(), spec.outlier_max_similarity),
                _ => b.genuine(&src.prototype.clone(), spec.intra_spread),
            };
            let attributes = AttributeSet {
                age_years: Some(src.base_age + b.rng.random_range(0..=25)),
                race: Some(src.race),
                gender: Some(src.gender),
                scenario: Some(if b.rng.random_bool(0.5) {
                    Scenario::Controlled
                } else {
                    Scenario::Wild
                }),
                masked: b.rng.random_bool(spec.masked_fraction),
            };
            b.push(folder_id, &row, class, attributes.clone())?;
            if class.is_clean() && b.rng.random_bool(spec.exact_duplicate_fraction) {
                let copy = b.store.row(b.store.row_count() - 1).to_vec();
                b.push(folder_id, &copy, FaceClass::ExactDuplicate, attributes)?;
            }
        }
    }

    let exclusion = CenterIndex::from_rows(
        spec.dim,
        (0..n_test)
            .map(|k| (k as IdentityId + 1, people[k].prototype.clone()))
            .collect(),
    )?;
    let truth = GroundTruth {
        classes: b.classes,
        source_folder: b.source,
        split_pairs,
        test_identities: (1..=n_test as IdentityId).collect(),
        exclusion,
    };
    let corpus = Corpus::new(b.records, b.store)?;
    Ok((corpus, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub generated: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningScore {
    /// Clean faces retained over faces retained.
    pub precision: f64,
    /// Clean faces retained over clean faces generated.
    pub recall: f64,
    pub per_class: BTreeMap<FaceClass, ClassScore>,
    /// Fraction of split-identity folder pairs that ended up in one folder.
    pub split_pairs_unified: f64,
    pub test_identities_removed: usize,
}

impl CleaningScore {
    pub fn retained_noise(&self) -> usize {
        self.per_class
            .iter()
            .filter(|(c, _)| !c.is_clean())
            .map(|(_, s)| s.retained)
            .sum()
    }
}

pub fn score_cleaning(result: &Corpus, truth: &GroundTruth) -> Result<CleaningScore> {
    let mut per_class: BTreeMap<FaceClass, ClassScore> = FaceClass::ALL
        .iter()
        .map(|&c| (c, ClassScore { generated: 0, retained: 0 }))
        .collect();
    for class in truth.classes.values() {
        per_class.get_mut(class).unwrap().generated += 1;
    }
    // Source folders present in each output folder.
    let mut sources: BTreeMap<IdentityId, BTreeSet<IdentityId>> = BTreeMap::new();
    for face in result.faces() {
        let class = truth.classes.get(&face.face_id).ok_or_else(|| {
            CurateError::Consistency(format!("face {} is not in the ground truth", face.face_id))
        })?;
        per_class.get_mut(class).unwrap().retained += 1;
        sources
            .entry(face.identity_id)
            .or_default()
            .insert(truth.source_folder[&face.face_id]);
    }

    let retained: usize = per_class.values().map(|s| s.retained).sum();
    let clean_retained: usize = per_class
        .iter()
        .filter(|(c, _)| c.is_clean())
        .map(|(_, s)| s.retained)
        .sum();
    let clean_generated: usize = per_class
        .iter()
        .filter(|(c, _)| c.is_clean())
        .map(|(_, s)| s.generated)
        .sum();
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };

    let unified = truth
        .split_pairs
        .iter()
        .filter(|(a, b)| sources.values().any(|s| s.contains(a) && s.contains(b)))
        .count();
    let surviving_sources: BTreeSet<IdentityId> = sources.values().flatten().copied().collect();
    let test_removed = truth
        .test_identities
        .iter()
        .filter(|id| !surviving_sources.contains(id))
        .count();

    Ok(CleaningScore {
        precision: ratio(clean_retained, retained),
        recall: ratio(clean_retained, clean_generated),
        per_class,
        split_pairs_unified: ratio(unified, truth.split_pairs.len()),
        test_identities_removed: test_removed,
    })
}
