mod support;

use std::collections::{BTreeMap, BTreeSet};

use facecurate::cluster::{intra_class_clean, DbscanParams};
use facecurate::corpus::{cosine_similarity, unit_similarity};
use facecurate::dedup::remove_duplicates;
use facecurate::fruits::{build_protocol, fnmr_at_fmr, ScoreSet, Slice};
use facecurate::merge::{inter_class_clean, InterClassThresholds};
use facecurate::pairwise::pairs_above;
use facecurate::unionfind::DisjointSet;
use facecurate::{load_corpus, write_corpus, Histogram};
use proptest::prelude::*;
use support::{clustered_corpus, rng};

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        ..ProptestConfig::default()
    })]

    #[test]
    fn cosine_is_symmetric_and_bounded((a, b) in (1usize..40).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))) {
        let ab = cosine_similarity(&a, &b).unwrap();
        let ba = cosine_similarity(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn corpus_survives_write_and_load(seed in any::<u64>(), folders in 1usize..12, dim in 1usize..20) {
        let corpus = clustered_corpus(&mut rng(seed), folders, dim);
        let dir = tempfile::tempdir().unwrap();
        let (m, e) = (dir.path().join("c.tsv"), dir.path().join("c.emb"));
        write_corpus(&corpus, &m, &e).unwrap();
        let back = load_corpus(&m, &e).unwrap();
        prop_assert_eq!(back.store().as_slice(), corpus.store().as_slice());
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn fnmr_never_rises_when_target_relaxes(seed in any::<u64>()) {
        let scores = support::random_scores(&mut rng(seed), 3000);
        let mut last = f64::INFINITY;
        for target in [1e-3, 1e-2, 5e-2, 0.1, 0.3, 0.6] {
            if let Ok(op) = fnmr_at_fmr(&scores, target) {
                prop_assert!(op.fnmr <= last);
                last = op.fnmr;
            }
        }
    }

    #[test]
    fn fnmr_ignores_positive_affine_maps(
        gen in prop::collection::vec(-512i32..512, 1..300),
        imp in prop::collection::vec(-512i32..512, 100..600),
        scale_exp in -3i32..4,
        shift in -64i32..64,
    ) {
        // Scores on a dyadic grid with power-of-two scales and grid shifts
        // map exactly, so ties and order are preserved bit for bit.
        let grid = |v: &[i32]| v.iter().map(|&x| f64::from(x) / 64.0).collect::<Vec<_>>();
        let scale = 2f64.powi(scale_exp);
        let map = |v: Vec<f64>| v.into_iter().map(|x| x * scale + f64::from(shift)).collect();
        let base = ScoreSet::new(grid(&gen), grid(&imp)).unwrap();
        let moved = ScoreSet::new(map(base.genuine.clone()), map(base.impostor.clone())).unwrap();
        let a = fnmr_at_fmr(&base, 0.01).unwrap();
        let b = fnmr_at_fmr(&moved, 0.01).unwrap();
        prop_assert_eq!(a.fnmr, b.fnmr);
        prop_assert_eq!(a.fmr, b.fmr);
    }

    #[test]
    fn protocols_are_valid_and_seeded(seed in any::<u64>(), cap in 1usize..400) {
        let corpus = clustered_corpus(&mut rng(seed), 10, 4);
        for slice in Slice::defaults() {
            let p = build_protocol(&corpus, slice, cap, seed).unwrap();
            p.validate(&corpus).unwrap();
            prop_assert!(p.impostor_pairs.len() <= cap);
            prop_assert_eq!(&p, &build_protocol(&corpus, slice, cap, seed).unwrap());
            for &(a, b) in p.genuine_pairs.iter().chain(&p.impostor_pairs) {
                let (fa, fb) = (corpus.face(a).unwrap(), corpus.face(b).unwrap());
                prop_assert!(slice.pair_matches(&fa.attributes, &fb.attributes));
            }
        }
    }

    #[test]
    fn disjoint_set_matches_naive_components(n in 1usize..40, edges in prop::collection::vec((0usize..40, 0usize..40), 0..60)) {
        let edges: Vec<_> = edges.into_iter().filter(|&(a, b)| a < n && b < n).collect();
        let mut ds = DisjointSet::new(n);
        for &(a, b) in &edges {
            ds.union(a, b);
        }
        // Naive: relabel until no edge joins two labels.
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for &(a, b) in &edges {
                let m = label[a].min(label[b]);
                if label[a] != m || label[b] != m {
                    label[a] = m;
                    label[b] = m;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(ds.find(i) == ds.find(j), label[i] == label[j]);
            }
        }
    }

    #[test]
    fn blocked_pairs_match_direct_scan(seed in any::<u64>(), n in 0usize..150, thr in -0.5f32..0.9) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| support::random_folder(&mut r, 1, 6).remove(0)).collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let s = unit_similarity(&rows[i], &rows[j]);
                if s > thr {
                    want.push((i, j, s));
                }
            }
        }
        prop_assert_eq!(pairs_above(&refs, thr), want);
    }

    #[test]
    fn histogram_overlap_is_symmetric_and_bounded(a in prop::collection::vec(-1.0f32..=1.0, 1..200), b in prop::collection::vec(-1.0f32..=1.0, 1..200)) {
        let (mut ha, mut hb) = (Histogram::default(), Histogram::default());
        a.iter().for_each(|&s| ha.add(s));
        b.iter().for_each(|&s| hb.add(s));
        prop_assert_eq!(ha.total(), a.len() as u64);
        let o = ha.overlap(&hb);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&o));
        prop_assert!((o - hb.overlap(&ha)).abs() < 1e-12);
        prop_assert!((ha.overlap(&ha) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn intra_class_output_is_dense_and_shrinking(seed in any::<u64>(), sim in 0.3f32..0.7) {
        let corpus = clustered_corpus(&mut rng(seed), 15, 8);
        let params = DbscanParams::from_similarity(sim, 3).unwrap();
        let (out, stats) = intra_class_clean(&corpus, params).unwrap();
        prop_assert!(stats.is_shrinking());
        for folder in out.folders() {
            prop_assert!(folder.len() >= 3);
            let before: BTreeSet<_> = corpus.folder(folder.identity_id).unwrap().member_face_ids.iter().collect();
            prop_assert!(folder.member_face_ids.iter().all(|f| before.contains(f)));
            // The kept faces are exactly one cluster of the source folder.
            let source = corpus.folder(folder.identity_id).unwrap();
            let labeling = facecurate::cluster::dbscan_folder(source, &corpus, params).unwrap();
            let clusters: Vec<Vec<u64>> = (0..labeling.cluster_count() as i32)
                .map(|l| labeling.members(l).map(|i| source.member_face_ids[i]).collect())
                .collect();
            prop_assert!(clusters.contains(&folder.member_face_ids));
        }
    }

    #[test]
    fn inter_class_conserves_folders(seed in any::<u64>()) {
        let corpus = clustered_corpus(&mut rng(seed), 20, 6);
        let (out, stats, plan) = inter_class_clean(&corpus, InterClassThresholds::default()).unwrap();
        prop_assert!(stats.is_shrinking());
        let source: BTreeMap<u64, u64> = corpus.faces().map(|f| (f.face_id, f.identity_id)).collect();
        let mut dropped = 0;
        let mut kept_sources = BTreeSet::new();
        for folder in out.folders() {
            for f in &folder.member_face_ids {
                kept_sources.insert(source[f]);
            }
        }
        for folder in corpus.folders() {
            let survivors = folder.member_face_ids.iter().filter(|f| out.face(**f).is_some()).count();
            // A source folder moves whole or not at all.
            prop_assert!(survivors == 0 || survivors == folder.len());
            if survivors == 0 {
                dropped += folder.len();
            }
        }
        prop_assert_eq!(out.face_count() + dropped, corpus.face_count());
        // Merge edges end up inside one folder unless the merged folder was deleted.
        for e in &plan.merge_edges {
            if kept_sources.contains(&e.id_a) && kept_sources.contains(&e.id_b) {
                let fa = corpus.folder(e.id_a).unwrap().member_face_ids[0];
                let fb = corpus.folder(e.id_b).unwrap().member_face_ids[0];
                prop_assert_eq!(out.face(fa).unwrap().identity_id, out.face(fb).unwrap().identity_id);
            }
        }
    }

    #[test]
    fn dedup_leaves_no_violating_pair(seed in any::<u64>(), thr in 0.5f32..0.99) {
        let corpus = clustered_corpus(&mut rng(seed), 10, 4);
        let (out, _) = remove_duplicates(&corpus, thr).unwrap();
        for folder in out.folders() {
            let rows = out.folder_embeddings(folder).unwrap();
            prop_assert!(pairs_above(&rows, thr).is_empty());
        }
        prop_assert_eq!(out.identity_count(), corpus.identity_count());
    }
}
