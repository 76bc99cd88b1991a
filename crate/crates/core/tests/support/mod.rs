//! Reference implementations and generators shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use facecurate::cluster::DbscanParams;
use facecurate::corpus::unit_similarity;
use facecurate::fruits::ScoreSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Textbook queue-based DBSCAN. Border points reachable from several
/// clusters go to the cluster of their lowest-index core neighbor.
/// Returns each cluster as a sorted index list, clusters sorted, plus noise.
pub fn reference_dbscan(rows: &[Vec<f32>], params: DbscanParams) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = rows.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || params.is_neighbor(unit_similarity(&rows[i], &rows[j])))
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut cluster_of: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    for start in 0..n {
        if !is_core[start] || cluster_of[start].is_some() {
            continue;
        }
        let id = clusters;
        clusters += 1;
        cluster_of[start] = Some(id);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if is_core[q] && cluster_of[q].is_none() {
                    cluster_of[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
    }
    let mut noise = Vec::new();
    for i in 0..n {
        if is_core[i] {
            continue;
        }
        match neighbors[i].iter().find(|&&j| is_core[j]) {
            Some(&j) => cluster_of[i] = cluster_of[j],
            None => noise.push(i),
        }
    }
    let mut out = vec![Vec::new(); clusters];
    for (i, c) in cluster_of.iter().enumerate() {
        if let Some(c) = c {
            out[*c].push(i);
        }
    }
    out.sort();
    (out, noise)
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A folder of up to `max_faces` unit rows: a few tight blobs plus scatter.
pub fn random_folder(rng: &mut ChaCha8Rng, max_faces: usize, dim: usize) -> Vec<Vec<f32>> {
    let n = rng.random_range(1..=max_faces);
    let blobs: Vec<(Vec<f32>, f32)> = (0..rng.random_range(1..=4))
        .map(|_| {
            let c = unit((0..dim).map(|_| rng.sample(StandardNormal)).collect());
            (c, rng.random_range(0.2f32..1.2))
        })
        .collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                return unit((0..dim).map(|_| rng.sample(StandardNormal)).collect());
            }
            let (c, spread) = &blobs[rng.random_range(0..blobs.len())];
            let s = spread / (dim as f32).sqrt();
            unit(c.iter().map(|&x| x + s * rng.sample::<f32, _>(StandardNormal)).collect())
        })
        .collect()
}

/// FNMR at the smallest threshold, over every candidate that can change
/// either rate, whose FMR does not exceed the target. `None` when no finite
/// threshold qualifies.
pub fn sweep_fnmr(scores: &ScoreSet, target_fmr: f64) -> Option<(f64, f64)> {
    let mut candidates: Vec<f64> = scores
        .impostor
        .iter()
        .chain(&scores.genuine)
        .flat_map(|&s| [s, s.next_up()])
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let n = scores.impostor.len() as f64;
    for &t in &candidates {
        let matches = scores.impostor.iter().filter(|&&s| s >= t).count();
        if matches as f64 / n <= target_fmr {
            let misses = scores.genuine.iter().filter(|&&g| g < t).count();
            return Some((misses as f64 / scores.genuine.len() as f64, t));
        }
    }
    None
}

/// Genuine and impostor scores, optionally quantized to force ties.
pub fn random_scores(rng: &mut ChaCha8Rng, max_total: usize) -> ScoreSet {
    // Log-uniform sizes keep the quadratic oracles quick while still reaching
    // the maximum. At least two impostors.
    let total = (2f64 * (max_total as f64 / 2.0).powf(rng.random::<f64>())).round() as usize;
    let total = total.clamp(3, max_total);
    let n_gen = rng.random_range(1..total - 1);
    let quantum = [0.0, 0.01, 0.1][rng.random_range(0..3)];
    let shift: f64 = rng.random_range(0.0..2.0);
    let mut draw = |mean: f64| {
        let s: f64 = mean + rng.sample::<f64, _>(StandardNormal) * 0.5;
        if quantum > 0.0 {
            (s / quantum).round() * quantum
        } else {
            s
        }
    };
    let genuine = (0..n_gen).map(|_| draw(shift)).collect();
    let impostor = (0..total - n_gen).map(|_| draw(0.0)).collect();
    ScoreSet::new(genuine, impostor).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Folders of faces around random prototypes, with random attributes.
/// Prototypes are drawn from `n_folders / 2 + 1` anchors so some folders
/// share a person and the inter-class bands are populated.
pub fn clustered_corpus(rng: &mut ChaCha8Rng, n_folders: usize, dim: usize) -> facecurate::Corpus {
    use facecurate::corpus::{Gender, Race, Scenario};
    use facecurate::{AttributeSet, EmbeddingStore, FaceRecord};

    let anchors: Vec<Vec<f32>> = (0..n_folders / 2 + 1)
        .map(|_| unit((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let mut store = EmbeddingStore::new(dim).unwrap();
    let mut records = Vec::new();
    let mut face_id = 1;
    for folder in 0..n_folders {
        let anchor = &anchors[rng.random_range(0..anchors.len())];
        let drift = rng.random_range(0.0f32..1.0) / (dim as f32).sqrt();
        let proto = unit(anchor.iter().map(|&x| x + drift * rng.sample::<f32, _>(StandardNormal)).collect());
        for _ in 0..rng.random_range(1..=12) {
            let spread = rng.random_range(0.05f32..1.5) / (dim as f32).sqrt();
            let v = unit(proto.iter().map(|&x| x + spread * rng.sample::<f32, _>(StandardNormal)).collect());
            let mut rec = FaceRecord::new(face_id, folder as u64 + 1, store.push_row(&v).unwrap());
            rec.attributes = AttributeSet {
                age_years: rng.random_bool(0.9).then(|| rng.random_range(5..80)),
                race: Some(Race::ALL[rng.random_range(0..Race::ALL.len())]),
                gender: Some(Gender::ALL[rng.random_range(0..2)]),
                scenario: Some(Scenario::ALL[rng.random_range(0..2)]),
                masked: rng.random_bool(0.2),
            };
            records.push(rec);
            face_id += 1;
        }
    }
    facecurate::Corpus::new(records, store).unwrap()
}

/// Exhaustive post-conditions of a cleaning run. Returns the first
/// violation found.
pub fn check_pipeline_invariants(
    raw: &facecurate::Corpus,
    outcome: &facecurate::CastOutcome,
    exclusion: Option<&facecurate::merge::CenterIndex>,
    config: &facecurate::CastConfig,
) -> Result<(), String> {
    use facecurate::cluster::dbscan_folder;
    use facecurate::merge::compute_centers;

    let last = outcome.iterations.last().ok_or("no iterations")?;
    for it in &outcome.iterations {
        // Intra-class output: each folder is one DBSCAN cluster, of at
        // least three faces, of the same raw folder under that iteration's
        // teacher embeddings.
        let teacher = raw.with_store(it.intra.shared_store()).unwrap();
        let params = config.dbscan_params(it.iteration).unwrap();
        for folder in it.intra.folders() {
            if folder.len() < 3 {
                return Err(format!("iteration {}: folder {} has {} faces", it.iteration, folder.identity_id, folder.len()));
            }
            let source = teacher.folder(folder.identity_id).ok_or("intra folder has no source")?;
            let labels = dbscan_folder(source, &teacher, params).unwrap();
            let is_cluster = (0..labels.cluster_count() as i32).any(|l| {
                labels.members(l).map(|i| source.member_face_ids[i]).eq(folder.member_face_ids.iter().copied())
            });
            if !is_cluster {
                return Err(format!("iteration {}: folder {} is not one cluster", it.iteration, folder.identity_id));
            }
        }

        // Merge conservation: every intra folder survives whole inside one
        // output folder, or is dropped whole.
        let mut accounted = 0;
        for folder in it.intra.folders() {
            let owners: BTreeSet<Option<u64>> = folder
                .member_face_ids
                .iter()
                .map(|f| it.inter.face(*f).map(|r| r.identity_id))
                .collect();
            if owners.len() != 1 {
                return Err(format!("iteration {}: folder {} split by merging", it.iteration, folder.identity_id));
            }
            if owners.contains(&None) {
                accounted += folder.len();
            }
        }
        if it.inter.face_count() + accounted != it.intra.face_count() {
            return Err(format!("iteration {}: face count not conserved by merging", it.iteration));
        }
    }

    // Final folders: subsets of the last inter-class folders.
    for folder in outcome.corpus.folders() {
        let source = last.inter.folder(folder.identity_id).ok_or("final folder has no source")?;
        if !folder.member_face_ids.iter().all(|f| source.member_face_ids.binary_search(f).is_ok()) {
            return Err(format!("final folder {} gained faces", folder.identity_id));
        }
        let rows = outcome.corpus.folder_embeddings(folder).unwrap();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let s = unit_similarity(rows[i], rows[j]);
                if s > config.dedup_threshold {
                    return Err(format!("folder {} keeps a pair at {s}", folder.identity_id));
                }
            }
        }
    }
    if let Some(excl) = exclusion {
        let centers = compute_centers(&outcome.corpus).unwrap();
        for i in 0..centers.len() {
            for j in 0..excl.len() {
                let s = unit_similarity(centers.center(i), excl.center(j));
                if s > config.overlap_threshold {
                    return Err(format!("folder {} is {s} from exclusion {}", centers.identity_ids()[i], excl.identity_ids()[j]));
                }
            }
        }
    }
    Ok(())
}
