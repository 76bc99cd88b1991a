//! Exact blocked pairwise similarity over unit embeddings.
//!
//! Work is split into row blocks processed in parallel; each block's output
//! is collected in order, so results do not depend on the worker count.

use rayon::prelude::*;

use crate::corpus::unit_similarity;

pub const BLOCK: usize = 64;

/// Dense symmetric m x m similarity matrix, row-major.
pub fn similarity_matrix(rows: &[&[f32]]) -> Vec<f32> {
    let m = rows.len();
    let mut out = vec![0.0f32; m * m];
    for ib in (0..m).step_by(BLOCK) {
        let iend = (ib + BLOCK).min(m);
        for jb in (ib..m).step_by(BLOCK) {
            let jend = (jb + BLOCK).min(m);
            for i in ib..iend {
                for j in jb.max(i)..jend {
                    let s = unit_similarity(rows[i], rows[j]);
                    out[i * m + j] = s;
                    out[j * m + i] = s;
                }
            }
        }
    }
    out
}

/// Every unordered pair `(i, j)`, `i < j`, with similarity strictly above
/// `threshold`, in lexicographic order.
pub fn pairs_above(rows: &[&[f32]], threshold: f32) -> Vec<(usize, usize, f32)> {
    let m = rows.len();
    let starts: Vec<usize> = (0..m).step_by(BLOCK).collect();
    starts
        .par_iter()
        .map(|&ib| {
            let iend = (ib + BLOCK).min(m);
            let mut found = Vec::new();
            for i in ib..iend {
                for (j, row) in rows.iter().enumerate().skip(i + 1) {
                    let s = unit_similarity(rows[i], row);
                    if s > threshold {
                        found.push((i, j, s));
                    }
                }
            }
            found
        })
        .flatten_iter()
        .collect()
}

/// Pairs `(q, r)` between two sets with similarity strictly above
/// `threshold`, ordered by query then reference index.
pub fn cross_pairs_above(
    queries: &[&[f32]],
    references: &[&[f32]],
    threshold: f32,
) -> Vec<(usize, usize, f32)> {
    let starts: Vec<usize> = (0..queries.len()).step_by(BLOCK).collect();
    starts
        .par_iter()
        .map(|&qb| {
            let qend = (qb + BLOCK).min(queries.len());
            let mut found = Vec::new();
            for (q, query) in queries.iter().enumerate().take(qend).skip(qb) {
                for (r, reference) in references.iter().enumerate() {
                    let s = unit_similarity(query, reference);
                    if s > threshold {
                        found.push((q, r, s));
                    }
                }
            }
            found
        })
        .flatten_iter()
        .collect()
}

/// Highest similarity from each query to any reference, `None` when the
/// reference set is empty.
pub fn max_similarity(queries: &[&[f32]], references: &[&[f32]]) -> Vec<Option<f32>> {
    queries
        .par_iter()
        .map(|q| {
            references
                .iter()
                .map(|r| unit_similarity(q, r))
                .max_by(f32::total_cmp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    #[test]
    fn blocked_outputs_match_direct_loops() {
        let rows = random_rows(150, 20, 3);
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let mat = similarity_matrix(&refs);
        let pairs = pairs_above(&refs, 0.1);
        let mut expected = Vec::new();
        for i in 0..refs.len() {
            for j in 0..refs.len() {
                let s = unit_similarity(refs[i], refs[j]);
                assert_eq!(mat[i * refs.len() + j], s);
                if i < j && s > 0.1 {
                    expected.push((i, j, s));
                }
            }
        }
        assert_eq!(pairs, expected);

        let cross = cross_pairs_above(&refs[..70], &refs[70..], 0.1);
        let direct: Vec<_> = (0..70)
            .flat_map(|q| (0..80).map(move |r| (q, r)))
            .filter_map(|(q, r)| {
                let s = unit_similarity(refs[q], refs[70 + r]);
                (s > 0.1).then_some((q, r, s))
            })
            .collect();
        assert_eq!(cross, direct);
    }
}
