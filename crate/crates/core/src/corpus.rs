//! Identity-labeled face corpus: records, folders, the binary embedding store
//! and the manifest/embedding file formats.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! offset 0   magic  b"EMB1"
//! offset 4   u32    dim
//! offset 8   u64    row_count
//! offset 16  f32 x dim x row_count, row-major
//! ```
//!
//! The manifest is UTF-8 TSV with LF endings. The first line is
//! `#MANIFEST1<TAB>dim=<dim>`; every following line is one face:
//! `face_id, identity_id, embedding_index, age, race, gender, scenario, masked`.
//! An empty field means the attribute is absent; `masked` is `0` or `1`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};

pub type FaceId = u64;
pub type IdentityId = u64;

pub const DEFAULT_DIM: usize = 512;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_HEADER_LEN: usize = 16;
pub const MANIFEST_MAGIC: &str = "#MANIFEST1";

/// Allowed deviation of a stored row's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Rows closer than this to unit norm are stored untouched on ingest, which
/// keeps load/write round trips bit-exact.
const RENORMALIZE_SLACK: f64 = 1e-5;

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = CurateError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(CurateError::format(
                        stringify!($name),
                        format!("unknown value {other:?}"),
                    )),
                }
            }
        }
    };
}

attribute_enum!(Race {
    Caucasian => "Caucasian",
    EastAsian => "EastAsian",
    African => "African",
    Other => "Other",
});

attribute_enum!(Gender {
    Male => "Male",
    Female => "Female",
});

attribute_enum!(Scenario {
    Controlled => "Controlled",
    Wild => "Wild",
});

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub age_years: Option<u32>,
    pub race: Option<Race>,
    pub gender: Option<Gender>,
    pub scenario: Option<Scenario>,
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: FaceId,
    pub identity_id: IdentityId,
    pub embedding_index: usize,
    pub attributes: AttributeSet,
}

impl FaceRecord {
    pub fn new(face_id: FaceId, identity_id: IdentityId, embedding_index: usize) -> Self {
        FaceRecord {
            face_id,
            identity_id,
            embedding_index,
            attributes: AttributeSet::default(),
        }
    }
}

/// Dense row-major matrix of unit-norm f32 embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CurateError::InvalidParameter(
                "embedding dimension must be positive".into(),
            ));
        }
        Ok(EmbeddingStore {
            dim,
            data: Vec::new(),
        })
    }

    /// Builds a store from raw row-major values, normalizing every row.
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut store = EmbeddingStore::new(dim)?;
        if !data.len().is_multiple_of(dim) {
            return Err(CurateError::Dimension {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        store.data = data;
        for row in 0..store.row_count() {
            let start = row * dim;
            normalize_row(&mut store.data[start..start + dim])
                .map_err(|_| CurateError::ZeroVector { row })?;
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let start = index * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Normalizes and appends a row, returning its index.
    pub fn push_row(&mut self, row: &[f32]) -> Result<usize> {
        if row.len() != self.dim {
            return Err(CurateError::Dimension {
                expected: self.dim,
                actual: row.len(),
            });
        }
        let index = self.row_count();
        let start = self.data.len();
        self.data.extend_from_slice(row);
        if normalize_row(&mut self.data[start..]).is_err() {
            self.data.truncate(start);
            return Err(CurateError::ZeroVector { row: index });
        }
        Ok(index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.row_count() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "embedding header";
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(CurateError::format(ctx, "file shorter than 16-byte header"));
        }
        if &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(CurateError::format(ctx, "bad magic, expected EMB1"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if dim == 0 {
            return Err(CurateError::format(ctx, "dimension is zero"));
        }
        let body = &bytes[EMBEDDING_HEADER_LEN..];
        let expected = (rows as u128) * (dim as u128) * 4;
        if body.len() as u128 != expected {
            return Err(CurateError::Consistency(format!(
                "header declares {rows} rows of dim {dim} ({expected} bytes) but body holds {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingStore::from_rows(dim, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CurateError::io(path, e))?;
        EmbeddingStore::from_bytes(&bytes).map_err(|e| match e {
            CurateError::Format { context, message } => CurateError::Format {
                context: format!("{} ({context})", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CurateError::io(path, e))
    }
}

/// Scales `row` to unit L2 norm unless it is already within slack of 1.
pub(crate) fn normalize_row(row: &mut [f32]) -> std::result::Result<(), ()> {
    let norm = row
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(());
    }
    if (norm - 1.0).abs() > RENORMALIZE_SLACK {
        for x in row.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    Ok(())
}

/// Plain dot product with a fixed 8-lane accumulation order.
///
/// Every similarity in the crate goes through this kernel, so the pairwise
/// routines and the one-off [`cosine_similarity`] agree bit for bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Similarity of two unit vectors, clamped to [-1, 1].
#[inline]
pub fn unit_similarity(a: &[f32], b: &[f32]) -> f32 {
    dot(a, b).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(CurateError::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(unit_similarity(a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityFolder {
    pub identity_id: IdentityId,
    /// Ascending face ids.
    pub member_face_ids: Vec<FaceId>,
    /// Derived data; not persisted in the manifest.
    pub center: Option<Vec<f32>>,
}

impl IdentityFolder {
    pub fn new(identity_id: IdentityId, mut member_face_ids: Vec<FaceId>) -> Self {
        member_face_ids.sort_unstable();
        IdentityFolder {
            identity_id,
            member_face_ids,
            center: None,
        }
    }

    pub fn len(&self) -> usize {
        self.member_face_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_face_ids.is_empty()
    }
}

/// Immutable corpus. Filtering stages build new corpora sharing the store.
#[derive(Clone, Debug)]
pub struct Corpus {
    folders: BTreeMap<IdentityId, IdentityFolder>,
    faces: BTreeMap<FaceId, FaceRecord>,
    store: Arc<EmbeddingStore>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.folders == other.folders
            && self.faces == other.faces
            && (Arc::ptr_eq(&self.store, &other.store) || self.store == other.store)
    }
}

impl Corpus {
    pub fn empty(dim: usize) -> Result<Self> {
        Ok(Corpus {
            folders: BTreeMap::new(),
            faces: BTreeMap::new(),
            store: Arc::new(EmbeddingStore::new(dim)?),
        })
    }

    /// Builds a corpus from face records, grouping folders by identity id.
    pub fn new(records: Vec<FaceRecord>, store: impl Into<Arc<EmbeddingStore>>) -> Result<Self> {
        let store = store.into();
        let mut faces = BTreeMap::new();
        let mut members: BTreeMap<IdentityId, Vec<FaceId>> = BTreeMap::new();
        for rec in records {
            if rec.embedding_index >= store.row_count() {
                return Err(CurateError::Consistency(format!(
                    "face {} references embedding row {} but the store has {} rows",
                    rec.face_id,
                    rec.embedding_index,
                    store.row_count()
                )));
            }
            members.entry(rec.identity_id).or_default().push(rec.face_id);
            if let Some(prev) = faces.insert(rec.face_id, rec) {
                return Err(CurateError::Consistency(format!(
                    "duplicate face id {}",
                    prev.face_id
                )));
            }
        }
        let folders = members
            .into_iter()
            .map(|(id, m)| (id, IdentityFolder::new(id, m)))
            .collect();
        Ok(Corpus {
            folders,
            faces,
            store,
        })
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn shared_store(&self) -> Arc<EmbeddingStore> {
        Arc::clone(&self.store)
    }

    pub fn folders(&self) -> impl ExactSizeIterator<Item = &IdentityFolder> + '_ {
        self.folders.values()
    }

    pub fn folder(&self, id: IdentityId) -> Option<&IdentityFolder> {
        self.folders.get(&id)
    }

    pub fn identity_ids(&self) -> impl Iterator<Item = IdentityId> + '_ {
        self.folders.keys().copied()
    }

    pub fn faces(&self) -> impl ExactSizeIterator<Item = &FaceRecord> + '_ {
        self.faces.values()
    }

    pub fn face(&self, id: FaceId) -> Option<&FaceRecord> {
        self.faces.get(&id)
    }

    pub fn identity_count(&self) -> usize {
        self.folders.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn embedding(&self, face_id: FaceId) -> Result<&[f32]> {
        let rec = self
            .faces
            .get(&face_id)
            .ok_or(CurateError::UnknownFace(face_id))?;
        Ok(self.store.row(rec.embedding_index))
    }

    /// Embeddings of a folder's members, in member order.
    pub fn folder_embeddings(&self, folder: &IdentityFolder) -> Result<Vec<&[f32]>> {
        folder
            .member_face_ids
            .iter()
            .map(|&id| self.embedding(id))
            .collect()
    }

    /// Builds a new corpus over the same store from a set of folders.
    ///
    /// Faces take the identity id of the folder that lists them; faces not
    /// listed by any folder are dropped.
    pub fn with_folders(&self, folders: impl IntoIterator<Item = IdentityFolder>) -> Result<Self> {
        let mut out_folders = BTreeMap::new();
        let mut out_faces = BTreeMap::new();
        for mut folder in folders {
            if folder.member_face_ids.is_empty() {
                return Err(CurateError::Consistency(format!(
                    "folder {} has no members",
                    folder.identity_id
                )));
            }
            folder.member_face_ids.sort_unstable();
            for &fid in &folder.member_face_ids {
                let mut rec = self
                    .faces
                    .get(&fid)
                    .cloned()
                    .ok_or(CurateError::UnknownFace(fid))?;
                rec.identity_id = folder.identity_id;
                if out_faces.insert(fid, rec).is_some() {
                    return Err(CurateError::Consistency(format!(
                        "face {fid} listed by more than one folder"
                    )));
                }
            }
            let id = folder.identity_id;
            if out_folders.insert(id, folder).is_some() {
                return Err(CurateError::Consistency(format!(
                    "identity {id} appears twice"
                )));
            }
        }
        Ok(Corpus {
            folders: out_folders,
            faces: out_faces,
            store: Arc::clone(&self.store),
        })
    }

    /// Same faces and folders with a replacement embedding store whose rows
    /// align with this corpus's embedding indices.
    pub fn with_store(&self, store: impl Into<Arc<EmbeddingStore>>) -> Result<Self> {
        let store = store.into();
        if store.row_count() != self.store.row_count() {
            return Err(CurateError::Consistency(format!(
                "replacement store has {} rows, corpus store has {}",
                store.row_count(),
                self.store.row_count()
            )));
        }
        Ok(Corpus {
            folders: self.folders.clone(),
            faces: self.faces.clone(),
            store,
        })
    }

    /// Copies referenced rows into a fresh store, reindexed by ascending
    /// face id.
    pub fn compact(&self) -> Corpus {
        let dim = self.dim();
        let mut data = Vec::with_capacity(self.faces.len() * dim);
        let mut faces = BTreeMap::new();
        for (i, (fid, rec)) in self.faces.iter().enumerate() {
            data.extend_from_slice(self.store.row(rec.embedding_index));
            let mut rec = rec.clone();
            rec.embedding_index = i;
            faces.insert(*fid, rec);
        }
        Corpus {
            folders: self.folders.clone(),
            faces,
            store: Arc::new(EmbeddingStore { dim, data }),
        }
    }

    pub fn write_manifest(&self, writer: &mut impl Write) -> std::io::Result<()> {
        writeln!(writer, "{MANIFEST_MAGIC}\tdim={}", self.dim())?;
        for rec in self.faces.values() {
            let a = &rec.attributes;
            writeln!(
                writer,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                rec.face_id,
                rec.identity_id,
                rec.embedding_index,
                a.age_years.map(|v| v.to_string()).unwrap_or_default(),
                a.race.map(Race::as_str).unwrap_or_default(),
                a.gender.map(Gender::as_str).unwrap_or_default(),
                a.scenario.map(Scenario::as_str).unwrap_or_default(),
                u8::from(a.masked),
            )?;
        }
        Ok(())
    }
}

fn parse_optional<T: FromStr>(field: &str, ctx: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| CurateError::format(ctx, format!("invalid value {field:?}")))
}

fn parse_required<T: FromStr>(field: &str, name: &str, ctx: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| CurateError::format(ctx, format!("invalid {name} {field:?}")))
}

/// Parses manifest text into the declared dimension and face records.
pub fn parse_manifest(reader: impl BufRead, origin: &str) -> Result<(usize, Vec<FaceRecord>)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| CurateError::io(origin, e))?,
        None => return Err(CurateError::format(origin, "empty manifest")),
    };
    let dim = header
        .strip_prefix(MANIFEST_MAGIC)
        .and_then(|rest| rest.strip_prefix("\tdim="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| {
            CurateError::format(origin, format!("bad header {header:?}, expected \"{MANIFEST_MAGIC}\\tdim=<n>\""))
        })?;

    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| CurateError::io(origin, e))?;
        let ctx = format!("{origin}:{}", n + 2);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(CurateError::format(
                ctx,
                format!("expected 8 tab-separated fields, found {}", fields.len()),
            ));
        }
        let masked = match fields[7] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CurateError::format(ctx, format!("masked must be 0 or 1, got {other:?}")))
            }
        };
        records.push(FaceRecord {
            face_id: parse_required(fields[0], "face_id", &ctx)?,
            identity_id: parse_required(fields[1], "identity_id", &ctx)?,
            embedding_index: parse_required(fields[2], "embedding_index", &ctx)?,
            attributes: AttributeSet {
                age_years: parse_optional(fields[3], &ctx)?,
                race: parse_optional(fields[4], &ctx)?,
                gender: parse_optional(fields[5], &ctx)?,
                scenario: parse_optional(fields[6], &ctx)?,
                masked,
            },
        });
    }
    Ok((dim, records))
}

pub fn load_corpus(manifest_path: &Path, embeddings_path: &Path) -> Result<Corpus> {
    let file = File::open(manifest_path).map_err(|e| CurateError::io(manifest_path, e))?;
    let origin = manifest_path.display().to_string();
    let (dim, records) = parse_manifest(BufReader::new(file), &origin)?;
    let store = EmbeddingStore::load(embeddings_path)?;
    if store.dim() != dim {
        return Err(CurateError::Consistency(format!(
            "manifest {} declares dim {dim} but {} has dim {}",
            manifest_path.display(),
            embeddings_path.display(),
            store.dim()
        )));
    }
    Corpus::new(records, store)
}

pub fn write_corpus(corpus: &Corpus, manifest_path: &Path, embeddings_path: &Path) -> Result<()> {
    let file = File::create(manifest_path).map_err(|e| CurateError::io(manifest_path, e))?;
    let mut writer = BufWriter::new(file);
    corpus
        .write_manifest(&mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| CurateError::io(manifest_path, e))?;
    corpus.store().save(embeddings_path)
}
