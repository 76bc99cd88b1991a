//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use facecurate::cast::{run_cast, CastConfig, NoisyTeacher};
use facecurate::cluster::{dbscan_rows, DbscanParams, NOISE};
use facecurate::error::CurateError;
use facecurate::fruits::{
    fairness_metrics, fnmr_at_fmr, format_fixed, measure_latency, LatencyPolicy, Matcher, Pair,
    TimeBudget, Track,
};
use facecurate::synth::{generate, score_cleaning, SynthSpec};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tsv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn fairness_golden() -> Check {
    let mut groups: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for r in tsv_rows(&fixture("reference_group_fnmrs.tsv")) {
        groups
            .entry((r[0].clone(), r[1].clone()))
            .or_default()
            .insert(r[2].clone(), r[3].parse().unwrap());
    }
    let mut values = 0;
    for r in tsv_rows(&fixture("reference_fairness_summary.tsv")) {
        let g = &groups[&(r[0].clone(), r[1].clone())];
        let m = fairness_metrics(g).map_err(|e| e.to_string())?;
        // Independent recomputation: population variance about the mean.
        let v: Vec<f64> = g.values().copied().collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
        let ser = v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min);
        for (name, got, oracle, printed, places) in [
            ("avg", m.avg, mean, &r[2], 4),
            ("std", m.std, std, &r[3], 4),
            ("ser", m.ser, ser, &r[4], 2),
        ] {
            ensure((got - oracle).abs() < 1e-12, || format!("{} {} {name}: {got} vs oracle {oracle}", r[0], r[1]))?;
            ensure(&format_fixed(got, places) == printed, || {
                format!("{} {} {name}: {} printed as {printed}", r[0], r[1], format_fixed(got, places))
            })?;
            values += 1;
        }
    }
    ensure(values == 18, || format!("{values} values checked"))?;
    Ok(format!("{values} reference Avg/STD/SER values reproduced"))
}

fn threshold_oracle() -> Check {
    let mut rng = support::rng(2024);
    let mut largest = 0;
    for set in 0..200 {
        let scores = support::random_scores(&mut rng, 10_000);
        largest = largest.max(scores.genuine.len() + scores.impostor.len());
        let n = scores.impostor.len() as f64;
        let targets: Vec<f64> = [0.5, 1e-1, 1e-2, 1e-3].into_iter().filter(|t| t * n >= 1.0).collect();
        let target = targets[rng.random_range(0..targets.len())];
        let op = fnmr_at_fmr(&scores, target).map_err(|e| e.to_string())?;
        let (fnmr, threshold) = support::sweep_fnmr(&scores, target).unwrap();
        ensure(op.fnmr == fnmr && op.threshold == threshold, || {
            format!("set {set}: ({}, {}) vs oracle ({fnmr}, {threshold})", op.fnmr, op.threshold)
        })?;
    }
    Ok(format!("200 score sets match the exhaustive sweep exactly (largest {largest} scores)"))
}

fn dbscan_oracle() -> Check {
    let mut rng = support::rng(99);
    for folder in 0..100 {
        let rows = support::random_folder(&mut rng, 200, 32);
        let eps = rng.random_range(0.3f32..=0.6);
        let params = DbscanParams::new(eps, 3).unwrap();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let labels = dbscan_rows(&refs, params).labels;
        let mut clusters: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        let mut noise = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == NOISE {
                noise.push(i);
            } else {
                clusters.entry(l).or_default().push(i);
            }
        }
        let mut got: Vec<Vec<usize>> = clusters.into_values().collect();
        got.sort();
        let want = support::reference_dbscan(&rows, params);
        ensure((got.clone(), noise.clone()) == want, || format!("folder {folder} (eps {eps}) differs"))?;
    }
    Ok("100 seeded folders partitioned identically to the reference".into())
}

struct Pipeline {
    raw: facecurate::Corpus,
    truth: facecurate::synth::GroundTruth,
    outcome: facecurate::CastOutcome,
    config: CastConfig,
    elapsed: Duration,
}

fn default_pipeline() -> Pipeline {
    let start = Instant::now();
    let (raw, truth) = generate(&SynthSpec::default()).unwrap();
    let config = CastConfig::default();
    let outcome = run_cast(&raw, &NoisyTeacher::shrinking(0), &config, Some(&truth.exclusion)).unwrap();
    Pipeline { raw, truth, outcome, config, elapsed: start.elapsed() }
}

fn synthetic_recovery(p: &Pipeline) -> Check {
    let spec = SynthSpec::default();
    ensure(
        spec.n_identities == 1000
            && spec.outlier_fraction == 0.20
            && spec.label_flip_fraction == 0.05
            && spec.duplicate_identity_fraction == 0.05
            && spec.planted_test_identities == 10,
        || "default SynthSpec drifted".into(),
    )?;
    ensure(p.config.similarity_schedule == [0.5, 0.55, 0.6], || "schedule drifted".into())?;
    ensure(
        (p.config.merge_threshold, p.config.delete_lower, p.config.dedup_threshold, p.config.overlap_threshold)
            == (0.7, 0.5, 0.95, 0.7),
        || "thresholds drifted".into(),
    )?;
    let score = score_cleaning(&p.outcome.cleaned_over(&p.raw).unwrap(), &p.truth).unwrap();
    ensure(score.precision >= 0.90, || format!("precision {:.4}", score.precision))?;
    ensure(score.split_pairs_unified >= 0.80, || format!("splits unified {:.3}", score.split_pairs_unified))?;
    ensure(score.test_identities_removed == 10, || format!("{} test identities removed", score.test_identities_removed))?;
    for s in &p.outcome.stages {
        ensure(s.is_shrinking(), || format!("stage {} grew", s.stage_name))?;
    }
    // Across stages of the final pass, counts never grow.
    let last = p.outcome.stages.iter().rev().take(3).collect::<Vec<_>>();
    ensure(
        last.windows(2).all(|w| w[0].faces_before >= w[0].faces_after && w[1].faces_after == w[0].faces_before),
        || "final stages do not chain".into(),
    )?;
    ensure(p.elapsed < Duration::from_secs(300), || format!("took {:?}", p.elapsed))?;
    Ok(format!(
        "precision {:.4}, recall {:.4}, splits unified {:.3}, test identities removed {}/10, {:.1}s",
        score.precision,
        score.recall,
        score.split_pairs_unified,
        score.test_identities_removed,
        p.elapsed.as_secs_f64()
    ))
}

fn iteration_trend(p: &Pipeline) -> Check {
    let noise: Vec<usize> = p
        .outcome
        .iterations
        .iter()
        .map(|it| score_cleaning(&it.inter, &p.truth).unwrap().retained_noise())
        .collect();
    ensure(noise[2] < noise[0], || format!("retained noise per iteration {noise:?}"))?;
    let overlaps: Vec<f64> = p
        .outcome
        .stages
        .iter()
        .filter(|s| s.stage_name.ends_with("/inter-class"))
        .map(|s| s.overlap().unwrap())
        .collect();
    ensure(overlaps.len() == 3, || format!("{} iteration stages", overlaps.len()))?;
    ensure(overlaps.windows(2).all(|w| w[1] < w[0]), || format!("overlap per iteration {overlaps:?}"))?;
    Ok(format!("retained noise {noise:?}, intra/inter overlap {:?}", overlaps.iter().map(|o| format!("{o:.4}")).collect::<Vec<_>>()))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_facecurate")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

type Tree = Vec<(String, Vec<u8>)>;

fn tree(dir: &Path) -> Tree {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Check {
    let start = Instant::now();
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n).to_str().unwrap().to_string();
    cli(&["gen-synth", "--seed", "11", "--out", &p("g")])?;
    fs::write(t.path().join("protocol.cfg"), "target_fmr = 1e-4\nimpostor_cap = 200000\nseed = 5\n").unwrap();
    let mut reference: Option<(Tree, Tree)> = None;
    let mut runs = 0;
    for workers in ["1", "4", "16", "4"] {
        let (c, e) = (p(&format!("clean{runs}")), p(&format!("eval{runs}")));
        cli(&[
            "--workers", workers, "clean", "--manifest", &p("g/corpus.tsv"), "--embeddings", &p("g/corpus.emb"),
            "--provider", "noisy:2", "--exclusion-manifest", &p("g/exclusion.tsv"),
            "--exclusion-embeddings", &p("g/exclusion.emb"), "--out", &c,
        ])?;
        cli(&[
            "--workers", workers, "evaluate", "--manifest", &format!("{c}/cleaned.tsv"),
            "--embeddings", &format!("{c}/cleaned.emb"), "--protocol", &p("protocol.cfg"), "--out", &e,
        ])?;
        let got = (tree(Path::new(&c)), tree(Path::new(&e)));
        match &reference {
            None => reference = Some(got),
            Some(r) => ensure(r == &got, || format!("outputs differ with {workers} workers"))?,
        }
        runs += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    let files = reference.map(|(a, b)| a.len() + b.len()).unwrap_or(0);
    Ok(format!("{files} output files byte-identical over {runs} runs with 1/4/16 workers, {:.1}s", elapsed.as_secs_f64()))
}

fn invariant_suite(p: &Pipeline) -> Check {
    let start = Instant::now();
    support::check_pipeline_invariants(&p.raw, &p.outcome, Some(&p.truth.exclusion), &p.config)?;
    for seed in 1..4 {
        let spec = SynthSpec { n_identities: 200, seed, ..SynthSpec::default() };
        let (raw, truth) = generate(&spec).unwrap();
        let outcome = run_cast(&raw, &NoisyTeacher::shrinking(seed), &p.config, Some(&truth.exclusion)).unwrap();
        support::check_pipeline_invariants(&raw, &outcome, Some(&truth.exclusion), &p.config)
            .map_err(|e| format!("seed {seed}: {e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("dedup, overlap, single-cluster and conservation scans clean on 4 corpora, {:.1}s", elapsed.as_secs_f64()))
}

/// Sleeps until a fixed delay has elapsed since the call started.
struct SleepMatcher {
    delay: Duration,
    batch_size: usize,
}

impl Matcher for SleepMatcher {
    fn set_batch_size(&mut self, batch_size: usize) {
        self.batch_size = batch_size;
    }

    fn score_pairs(&mut self, pairs: &[Pair]) -> facecurate::Result<Vec<f64>> {
        let start = Instant::now();
        while let Some(left) = self.delay.checked_sub(start.elapsed()) {
            std::thread::sleep(left);
        }
        Ok(vec![0.5; pairs.len()])
    }
}

fn latency_harness() -> Check {
    let mut medians = Vec::new();
    for (ms, flip, expect_pass) in [(97u64, false, true), (200, false, false), (97, true, true)] {
        let mut m = SleepMatcher { delay: Duration::from_millis(ms), batch_size: 0 };
        let r = measure_latency(&mut m, &[(1, 2), (3, 4)], TimeBudget::new(Track::Fruits100, flip), LatencyPolicy::default())
            .map_err(|e| e.to_string())?;
        ensure(r.pass == expect_pass, || format!("{ms} ms matcher: median {:.2} ms, pass {}", r.median_ms, r.pass))?;
        ensure((r.median_ms - ms as f64).abs() <= 0.1 * r.budget_ms, || {
            format!("{ms} ms matcher measured at {:.2} ms", r.median_ms)
        })?;
        ensure(m.batch_size == if flip { 2 } else { 1 }, || format!("batch size {}", m.batch_size))?;
        medians.push(format!("{ms} ms{} -> {:.1} ms {}", if flip { " (flip, batch 2)" } else { "" }, r.median_ms, if r.pass { "PASS" } else { "FAIL" }));
    }
    let err = measure_latency(
        &mut SleepMatcher { delay: Duration::from_millis(1100), batch_size: 0 },
        &[(1, 2)],
        TimeBudget::new(Track::Fruits100, false),
        LatencyPolicy { warmup: 0, timed: 1, timeout_factor: 10.0 },
    );
    ensure(matches!(err, Err(CurateError::Matcher(_))), || "timeout not reported".into())?;
    Ok(medians.join("; "))
}

fn run(id: u32, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
        Err(why) => println!("FAIL criterion {id} ({name}): {why} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    // Test-harness flags such as --nocapture are accepted and ignored.
    let mut ok = true;
    ok &= run(1, "fairness golden values", fairness_golden);
    ok &= run(2, "threshold metric oracle", threshold_oracle);
    ok &= run(3, "DBSCAN oracle equivalence", dbscan_oracle);
    let pipeline = panic::catch_unwind(default_pipeline).ok();
    let missing = || Err::<String, String>("default pipeline run failed".into());
    ok &= run(4, "synthetic recovery", || pipeline.as_ref().map_or_else(missing, synthetic_recovery));
    ok &= run(5, "iteration trend", || pipeline.as_ref().map_or_else(missing, iteration_trend));
    ok &= run(6, "determinism", determinism);
    ok &= run(7, "invariant suite", || pipeline.as_ref().map_or_else(missing, invariant_suite));
    ok &= run(8, "latency harness", latency_harness);
    if !ok {
        std::process::exit(1);
    }
}
