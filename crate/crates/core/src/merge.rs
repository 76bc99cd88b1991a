//! Inter-class cleaning over folder feature centers.
//!
//! A plan is built once from the pre-stage centers. Applying it first unifies
//! every merge edge with union-find (the merged folder keeps the lowest
//! identity id of its component), then walks delete edges in plan order
//! between the surviving merged folders, deleting the one with fewer faces
//! (higher identity id on ties).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, IdentityFolder, IdentityId};
use crate::error::{CurateError, Result};
use crate::pairwise::pairs_above;
use crate::stats::StageStats;
use crate::unionfind::DisjointSet;

pub const MERGE_THRESHOLD: f32 = 0.7;
pub const DELETE_LOWER_BOUND: f32 = 0.5;

/// Unit feature centers, one row per identity, in ascending identity order.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterIndex {
    dim: usize,
    identity_ids: Vec<IdentityId>,
    centers: Vec<f32>,
    /// Folders whose members average to zero; they are left out of the index.
    pub degenerate: Vec<IdentityId>,
}

impl CenterIndex {
    pub fn empty(dim: usize) -> Self {
        CenterIndex {
            dim,
            identity_ids: Vec::new(),
            centers: Vec::new(),
            degenerate: Vec::new(),
        }
    }

    /// Builds an index from already-unit rows.
    pub fn from_rows(dim: usize, rows: Vec<(IdentityId, Vec<f32>)>) -> Result<Self> {
        let mut index = CenterIndex::empty(dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(CurateError::Dimension {
                    expected: dim,
                    actual: row.len(),
                });
            }
            index.identity_ids.push(id);
            index.centers.extend_from_slice(&row);
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_ids.is_empty()
    }

    pub fn identity_ids(&self) -> &[IdentityId] {
        &self.identity_ids
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<&[f32]> {
        self.centers.chunks_exact(self.dim).collect()
    }
}

/// Renormalized mean of a folder's embeddings, summed in ascending face id
/// order.
pub fn folder_center(corpus: &Corpus, folder: &IdentityFolder) -> Result<Vec<f32>> {
    let dim = corpus.dim();
    let mut sum = vec![0.0f64; dim];
    for &fid in &folder.member_face_ids {
        for (acc, &x) in sum.iter_mut().zip(corpus.embedding(fid)?) {
            *acc += f64::from(x);
        }
    }
    let n = folder.len() as f64;
    for v in sum.iter_mut() {
        *v /= n;
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(CurateError::DegenerateCenter(folder.identity_id));
    }
    Ok(sum.iter().map(|v| (v / norm) as f32).collect())
}

pub fn compute_centers(corpus: &Corpus) -> Result<CenterIndex> {
    let folders: Vec<&IdentityFolder> = corpus.folders().collect();
    let centers: Vec<Result<Vec<f32>>> = folders
        .par_iter()
        .map(|f| folder_center(corpus, f))
        .collect();
    let mut index = CenterIndex::empty(corpus.dim());
    for (folder, center) in folders.iter().zip(centers) {
        match center {
            Ok(c) => {
                index.identity_ids.push(folder.identity_id);
                index.centers.extend_from_slice(&c);
            }
            Err(CurateError::DegenerateCenter(id)) => index.degenerate.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok(index)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterClassThresholds {
    /// Merge iff similarity is strictly above this.
    pub merge: f32,
    /// Delete the smaller folder iff `delete_lower < similarity <= merge`.
    pub delete_lower: f32,
}

impl Default for InterClassThresholds {
    fn default() -> Self {
        InterClassThresholds {
            merge: MERGE_THRESHOLD,
            delete_lower: DELETE_LOWER_BOUND,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Merge,
    Delete,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Merge => "merge",
            EdgeKind::Delete => "delete",
        }
    }
}

/// Pair of identities with `id_a < id_b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEdge {
    pub id_a: IdentityId,
    pub id_b: IdentityId,
    pub similarity: f32,
}

impl PlanEdge {
    fn new(x: IdentityId, y: IdentityId, similarity: f32) -> Self {
        PlanEdge {
            id_a: x.min(y),
            id_b: x.max(y),
            similarity,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub merge_edges: Vec<PlanEdge>,
    pub delete_edges: Vec<PlanEdge>,
}

fn sort_edges(edges: &mut [PlanEdge]) {
    edges.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then(x.id_a.cmp(&y.id_a))
            .then(x.id_b.cmp(&y.id_b))
    });
}

impl MergePlan {
    pub fn is_empty(&self) -> bool {
        self.merge_edges.is_empty() && self.delete_edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeKind, &PlanEdge)> {
        self.merge_edges
            .iter()
            .map(|e| (EdgeKind::Merge, e))
            .chain(self.delete_edges.iter().map(|e| (EdgeKind::Delete, e)))
    }

    /// Audit format: one edge per line, `kind<TAB>id_a<TAB>id_b<TAB>similarity`.
    pub fn write_audit(&self, writer: &mut impl Write) -> std::io::Result<()> {
        for (kind, e) in self.edges() {
            writeln!(
                writer,
                "{}\t{}\t{}\t{}",
                kind.as_str(),
                e.id_a,
                e.id_b,
                e.similarity
            )?;
        }
        Ok(())
    }

    pub fn read_audit(reader: impl BufRead) -> Result<Self> {
        let mut plan = MergePlan::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CurateError::io("merge audit", e))?;
            let ctx = format!("merge audit line {}", n + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(CurateError::format(ctx, "expected 4 fields"));
            }
            let bad = |what: &str| CurateError::format(ctx.clone(), format!("invalid {what}"));
            let edge = PlanEdge::new(
                f[1].parse().map_err(|_| bad("id_a"))?,
                f[2].parse().map_err(|_| bad("id_b"))?,
                f[3].parse().map_err(|_| bad("similarity"))?,
            );
            match f[0] {
                "merge" => plan.merge_edges.push(edge),
                "delete" => plan.delete_edges.push(edge),
                _ => return Err(bad("edge kind")),
            }
        }
        Ok(plan)
    }
}

pub fn plan_inter_class(index: &CenterIndex, thresholds: InterClassThresholds) -> MergePlan {
    let rows = index.rows();
    let ids = index.identity_ids();
    let mut plan = MergePlan::default();
    for (i, j, s) in pairs_above(&rows, thresholds.delete_lower) {
        let edge = PlanEdge::new(ids[i], ids[j], s);
        if s > thresholds.merge {
            plan.merge_edges.push(edge);
        } else {
            plan.delete_edges.push(edge);
        }
    }
    sort_edges(&mut plan.merge_edges);
    sort_edges(&mut plan.delete_edges);
    plan
}

pub fn apply_inter_class(corpus: &Corpus, plan: &MergePlan) -> Result<(Corpus, StageStats)> {
    let ids: Vec<IdentityId> = corpus.identity_ids().collect();
    let position = |id: IdentityId| {
        ids.binary_search(&id).map_err(|_| {
            CurateError::Consistency(format!("merge plan names unknown identity {id}"))
        })
    };

    let mut components = DisjointSet::new(ids.len());
    for e in &plan.merge_edges {
        components.union(position(e.id_a)?, position(e.id_b)?);
    }

    // Representative per component: the lowest identity id. Positions are in
    // ascending id order, so the first visit of a root is its lowest id.
    let mut rep_of_root: BTreeMap<usize, IdentityId> = BTreeMap::new();
    let mut rep = Vec::with_capacity(ids.len());
    for (pos, &id) in ids.iter().enumerate() {
        let root = components.find(pos);
        rep.push(*rep_of_root.entry(root).or_insert(id));
    }

    let mut members: BTreeMap<IdentityId, Vec<u64>> = BTreeMap::new();
    for (pos, folder) in corpus.folders().enumerate() {
        members
            .entry(rep[pos])
            .or_default()
            .extend_from_slice(&folder.member_face_ids);
    }

    let mut deleted = BTreeSet::new();
    for e in &plan.delete_edges {
        let (ra, rb) = (rep[position(e.id_a)?], rep[position(e.id_b)?]);
        if ra == rb || deleted.contains(&ra) || deleted.contains(&rb) {
            continue;
        }
        let (na, nb) = (members[&ra].len(), members[&rb].len());
        let victim = if na < nb || (na == nb && ra > rb) { ra } else { rb };
        deleted.insert(victim);
    }

    let folders = members
        .into_iter()
        .filter(|(id, _)| !deleted.contains(id))
        .map(|(id, m)| IdentityFolder::new(id, m));
    let cleaned = corpus.with_folders(folders)?;
    let stats = StageStats::new(
        "inter-class",
        (corpus.identity_count(), corpus.face_count()),
        (cleaned.identity_count(), cleaned.face_count()),
    );
    Ok((cleaned, stats))
}

/// Center computation, planning and application in one call.
pub fn inter_class_clean(
    corpus: &Corpus,
    thresholds: InterClassThresholds,
) -> Result<(Corpus, StageStats, MergePlan)> {
    let index = compute_centers(corpus)?;
    let plan = plan_inter_class(&index, thresholds);
    let (cleaned, stats) = apply_inter_class(corpus, &plan)?;
    Ok((cleaned, stats, plan))
}
