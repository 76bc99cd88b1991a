//! Intra-class cleaning: DBSCAN on cosine distance inside each identity
//! folder, keeping only the dominant cluster.
//!
//! Labeling is independent of visiting order. Core points are those with at
//! least `min_pts` points (themselves included) within `epsilon`; clusters
//! are connected components of core points; a border point joins the cluster
//! of its lowest-face-id core neighbor. Cluster labels are numbered by the
//! lowest face id among each cluster's core points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, IdentityFolder};
use crate::error::{CurateError, Result};
use crate::pairwise::similarity_matrix;
use crate::stats::StageStats;
use crate::unionfind::DisjointSet;

pub const NOISE: i32 = -1;

/// Smallest cluster that survives intra-class cleaning.
pub const MIN_RESERVED_CLUSTER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Cosine-distance radius, `1 - similarity`.
    pub epsilon: f32,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn new(epsilon: f32, min_pts: usize) -> Result<Self> {
        if !(0.0..=2.0).contains(&epsilon) {
            return Err(CurateError::InvalidParameter(format!(
                "epsilon {epsilon} outside [0, 2]"
            )));
        }
        if min_pts == 0 {
            return Err(CurateError::InvalidParameter("min_pts must be >= 1".into()));
        }
        Ok(DbscanParams { epsilon, min_pts })
    }

    pub fn from_similarity(similarity: f32, min_pts: usize) -> Result<Self> {
        DbscanParams::new(1.0 - similarity, min_pts)
    }

    #[inline]
    pub fn is_neighbor(&self, similarity: f32) -> bool {
        1.0 - similarity <= self.epsilon
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    /// One label per folder member, `NOISE` or `0..cluster_count`.
    pub labels: Vec<i32>,
}

impl ClusterLabeling {
    pub fn cluster_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count()];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn members(&self, label: i32) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == label)
            .map(|(i, _)| i)
    }
}

/// DBSCAN over rows ordered by ascending face id.
pub fn dbscan_rows(rows: &[&[f32]], params: DbscanParams) -> ClusterLabeling {
    let m = rows.len();
    let sims = similarity_matrix(rows);
    let neighbor = |i: usize, j: usize| i != j && params.is_neighbor(sims[i * m + j]);

    let core: Vec<bool> = (0..m)
        .map(|i| 1 + (0..m).filter(|&j| neighbor(i, j)).count() >= params.min_pts)
        .collect();

    let mut components = DisjointSet::new(m);
    for i in 0..m {
        if !core[i] {
            continue;
        }
        for (j, &is_core) in core.iter().enumerate().skip(i + 1) {
            if is_core && neighbor(i, j) {
                components.union(i, j);
            }
        }
    }

    let mut labels = vec![NOISE; m];
    let mut root_label = vec![NOISE; m];
    let mut next = 0;
    for i in 0..m {
        if core[i] {
            let root = components.find(i);
            if root_label[root] == NOISE {
                root_label[root] = next;
                next += 1;
            }
            labels[i] = root_label[root];
        }
    }
    for i in 0..m {
        if !core[i] {
            if let Some(j) = (0..m).find(|&j| core[j] && neighbor(i, j)) {
                labels[i] = labels[j];
            }
        }
    }
    ClusterLabeling { labels }
}

pub fn dbscan_folder(
    folder: &IdentityFolder,
    corpus: &Corpus,
    params: DbscanParams,
) -> Result<ClusterLabeling> {
    let rows = corpus.folder_embeddings(folder)?;
    Ok(dbscan_rows(&rows, params))
}

fn mean_similarity_to_centroid(rows: &[&[f32]]) -> f64 {
    let dim = rows[0].len();
    let mut mean = vec![0.0f64; dim];
    for row in rows {
        for (acc, &x) in mean.iter_mut().zip(row.iter()) {
            *acc += f64::from(x);
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    rows.iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&x, &c)| f64::from(x) * c / norm)
                .sum::<f64>()
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Restricts a folder to its largest cluster, or drops it when that cluster
/// has fewer than three faces.
///
/// Equal-size clusters are ranked by mean member-to-centroid similarity, then
/// by lowest member face id.
pub fn reserve_largest_cluster(
    folder: &IdentityFolder,
    labeling: &ClusterLabeling,
    corpus: &Corpus,
) -> Result<Option<IdentityFolder>> {
    if labeling.labels.len() != folder.len() {
        return Err(CurateError::Consistency(format!(
            "labeling has {} entries for folder {} with {} members",
            labeling.labels.len(),
            folder.identity_id,
            folder.len()
        )));
    }
    let sizes = labeling.cluster_sizes();
    let Some(&largest) = sizes.iter().max() else {
        return Ok(None);
    };
    if largest < MIN_RESERVED_CLUSTER {
        return Ok(None);
    }
    let tied: Vec<i32> = (0..sizes.len())
        .filter(|&l| sizes[l] == largest)
        .map(|l| l as i32)
        .collect();

    let chosen = if tied.len() == 1 {
        tied[0]
    } else {
        let mut best: Option<(f64, u64, i32)> = None;
        for &label in &tied {
            let ids: Vec<u64> = labeling
                .members(label)
                .map(|i| folder.member_face_ids[i])
                .collect();
            let rows = ids
                .iter()
                .map(|&id| corpus.embedding(id))
                .collect::<Result<Vec<_>>>()?;
            let tightness = mean_similarity_to_centroid(&rows);
            let min_id = ids[0];
            let better = match best {
                None => true,
                Some((t, id, _)) => tightness > t || (tightness == t && min_id < id),
            };
            if better {
                best = Some((tightness, min_id, label));
            }
        }
        best.unwrap().2
    };

    let members = labeling
        .members(chosen)
        .map(|i| folder.member_face_ids[i])
        .collect();
    Ok(Some(IdentityFolder::new(folder.identity_id, members)))
}

/// Pluggable per-folder cleaning strategy.
pub trait FolderCleaner: Sync {
    fn clean_folder(&self, folder: &IdentityFolder, corpus: &Corpus)
        -> Result<Option<IdentityFolder>>;
}

impl FolderCleaner for DbscanParams {
    fn clean_folder(
        &self,
        folder: &IdentityFolder,
        corpus: &Corpus,
    ) -> Result<Option<IdentityFolder>> {
        let labeling = dbscan_folder(folder, corpus, *self)?;
        reserve_largest_cluster(folder, &labeling, corpus)
    }
}

pub fn intra_class_clean_with(
    corpus: &Corpus,
    cleaner: &dyn FolderCleaner,
    stage_name: &str,
) -> Result<(Corpus, StageStats)> {
    let folders: Vec<&IdentityFolder> = corpus.folders().collect();
    let kept = folders
        .par_iter()
        .map(|f| cleaner.clean_folder(f, corpus))
        .collect::<Result<Vec<_>>>()?;
    let cleaned = corpus.with_folders(kept.into_iter().flatten())?;
    let stats = StageStats::new(
        stage_name,
        (corpus.identity_count(), corpus.face_count()),
        (cleaned.identity_count(), cleaned.face_count()),
    );
    Ok((cleaned, stats))
}

pub fn intra_class_clean(corpus: &Corpus, params: DbscanParams) -> Result<(Corpus, StageStats)> {
    intra_class_clean_with(corpus, &params, "intra-class")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingStore, FaceRecord};

    fn corpus_from(vectors: &[Vec<f32>]) -> Corpus {
        let dim = vectors[0].len();
        let mut store = EmbeddingStore::new(dim).unwrap();
        let records = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| FaceRecord::new(i as u64, 1, store.push_row(v).unwrap()))
            .collect();
        Corpus::new(records, store).unwrap()
    }

    fn axis(dim: usize, k: usize, wobble: f32, j: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v[(k + 1 + j) % dim] += wobble;
        v
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let c = corpus_from(&vec![axis(8, 0, 0.0, 0); 3]);
        let p = DbscanParams::from_similarity(0.5, 3).unwrap();
        let l = dbscan_folder(c.folder(1).unwrap(), &c, p).unwrap();
        assert_eq!(l.labels, vec![0, 0, 0]);
    }

    #[test]
    fn two_faces_are_noise_at_min_pts_three() {
        let c = corpus_from(&vec![axis(8, 0, 0.0, 0); 2]);
        let p = DbscanParams::from_similarity(0.5, 3).unwrap();
        let l = dbscan_folder(c.folder(1).unwrap(), &c, p).unwrap();
        assert_eq!(l.labels, vec![NOISE, NOISE]);
        assert_eq!(reserve_largest_cluster(c.folder(1).unwrap(), &l, &c).unwrap(), None);
    }

    #[test]
    fn largest_cluster_is_reserved() {
        let mut vs: Vec<Vec<f32>> = (0..6).map(|j| axis(32, 0, 0.2, j)).collect();
        vs.extend((0..4).map(|j| axis(32, 16, 0.2, j)));
        let c = corpus_from(&vs);
        let folder = c.folder(1).unwrap();
        let p = DbscanParams::from_similarity(0.5, 3).unwrap();
        let l = dbscan_folder(folder, &c, p).unwrap();
        assert_eq!(l.cluster_sizes(), vec![6, 4]);
        let kept = reserve_largest_cluster(folder, &l, &c).unwrap().unwrap();
        assert_eq!(kept.member_face_ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn size_two_cluster_is_dropped() {
        let folder = IdentityFolder::new(1, vec![0, 1, 2]);
        let c = corpus_from(&vec![axis(8, 0, 0.0, 0); 3]);
        let l = ClusterLabeling {
            labels: vec![0, 0, NOISE],
        };
        assert_eq!(reserve_largest_cluster(&folder, &l, &c).unwrap(), None);
    }

    #[test]
    fn tie_prefers_tighter_cluster() {
        // Cluster on axis 0 is loose, cluster on axis 16 is exact copies.
        let mut vs: Vec<Vec<f32>> = (0..3).map(|j| axis(32, 0, 0.3, j)).collect();
        vs.extend(vec![axis(32, 16, 0.0, 0); 3]);
        let c = corpus_from(&vs);
        let folder = c.folder(1).unwrap();
        let p = DbscanParams::from_similarity(0.5, 3).unwrap();
        let l = dbscan_folder(folder, &c, p).unwrap();
        assert_eq!(l.cluster_sizes(), vec![3, 3]);
        let kept = reserve_largest_cluster(folder, &l, &c).unwrap().unwrap();
        assert_eq!(kept.member_face_ids, vec![3, 4, 5]);
    }

    #[test]
    fn border_point_goes_to_lowest_core() {
        // Two tight quadruples and a bridge point that reaches one core of
        // each side but has too few neighbors to be core itself.
        let at = |t: f32| vec![t.cos(), t.sin(), 0.0, 0.0];
        let angles = [0.0f32, 0.05, 0.1, 0.15, 0.55, 0.95, 1.0, 1.05, 1.1];
        let vs: Vec<Vec<f32>> = angles.iter().map(|&t| at(t)).collect();
        let c = corpus_from(&vs);
        let p = DbscanParams::new(1.0 - 0.42f32.cos(), 4).unwrap();
        let l = dbscan_folder(c.folder(1).unwrap(), &c, p).unwrap();
        assert_eq!(l.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(DbscanParams::new(2.5, 3).is_err());
        assert!(DbscanParams::new(0.5, 0).is_err());
    }
}
