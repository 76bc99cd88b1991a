//! Final passes after self-training: near-duplicate face removal inside each
//! folder, and removal of folders that overlap an evaluation exclusion set.

use rayon::prelude::*;

use crate::corpus::{Corpus, IdentityFolder};
use crate::error::{CurateError, Result};
use crate::merge::{compute_centers, CenterIndex};
use crate::pairwise::{max_similarity, similarity_matrix};
use crate::stats::StageStats;

pub const DUPLICATE_THRESHOLD: f32 = 0.95;
pub const OVERLAP_THRESHOLD: f32 = 0.7;

/// Greedy within-folder dedup: violating pairs are visited by descending
/// similarity and the larger face id of a still-intact pair is dropped.
pub fn dedup_folder(folder: &IdentityFolder, corpus: &Corpus, threshold: f32) -> Result<IdentityFolder> {
    let rows = corpus.folder_embeddings(folder)?;
    let m = rows.len();
    let sims = similarity_matrix(&rows);
    let mut violating: Vec<(f32, usize, usize)> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let s = sims[i * m + j];
            if s > threshold {
                violating.push((s, i, j));
            }
        }
    }
    violating.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut alive = vec![true; m];
    for (_, i, j) in violating {
        // Members are sorted, so j holds the larger face id.
        if alive[i] && alive[j] {
            alive[j] = false;
        }
    }
    let members = folder
        .member_face_ids
        .iter()
        .zip(&alive)
        .filter(|(_, &keep)| keep)
        .map(|(&id, _)| id)
        .collect();
    Ok(IdentityFolder::new(folder.identity_id, members))
}

pub fn remove_duplicates(corpus: &Corpus, threshold: f32) -> Result<(Corpus, StageStats)> {
    let folders: Vec<&IdentityFolder> = corpus.folders().collect();
    let deduped = folders
        .par_iter()
        .map(|f| dedup_folder(f, corpus, threshold))
        .collect::<Result<Vec<_>>>()?;
    let cleaned = corpus.with_folders(deduped)?;
    let stats = StageStats::new(
        "remove-duplicates",
        (corpus.identity_count(), corpus.face_count()),
        (cleaned.identity_count(), cleaned.face_count()),
    );
    Ok((cleaned, stats))
}

/// Drops every folder whose center is more similar than `threshold` to any
/// exclusion center. Folders with a degenerate center are kept.
pub fn remove_test_overlap(
    corpus: &Corpus,
    exclusion: &CenterIndex,
    threshold: f32,
) -> Result<(Corpus, StageStats)> {
    if exclusion.dim() != corpus.dim() {
        return Err(CurateError::Dimension {
            expected: corpus.dim(),
            actual: exclusion.dim(),
        });
    }
    let centers = compute_centers(corpus)?;
    let best = max_similarity(&centers.rows(), &exclusion.rows());
    let overlapping: Vec<u64> = centers
        .identity_ids()
        .iter()
        .zip(best)
        .filter(|(_, s)| s.is_some_and(|s| s > threshold))
        .map(|(&id, _)| id)
        .collect();
    let kept = corpus
        .folders()
        .filter(|f| overlapping.binary_search(&f.identity_id).is_err())
        .cloned();
    let cleaned = corpus.with_folders(kept)?;
    let stats = StageStats::new(
        "remove-test-overlap",
        (corpus.identity_count(), corpus.face_count()),
        (cleaned.identity_count(), cleaned.face_count()),
    );
    Ok((cleaned, stats))
}
