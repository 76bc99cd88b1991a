//! 1:1 verification evaluation under an inference-time budget.
//!
//! Pair protocols are sliced by face attributes. Accuracy is FNMR at a fixed
//! FMR, where a genuine comparison fails when it scores strictly below the
//! threshold and an impostor comparison matches when it scores at or above
//! it. Fairness across demographic groups is summarized by the skewed error
//! ratio (highest over lowest group FNMR) and the population standard
//! deviation of group FNMRs. Latency is the median wall-clock time per pair
//! on a single worker.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    unit_similarity, AttributeSet, Corpus, FaceId, FaceRecord, Gender, IdentityId, Race, Scenario,
};
use crate::error::{CurateError, Result};

pub type Pair = (FaceId, FaceId);

// ---------------------------------------------------------------------------
// Protocols

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Slice {
    All,
    /// Both faces' ages differ by at least this many years.
    CrossAge(u32),
    Controlled,
    Wild,
    /// One Controlled and one Wild face.
    CrossScene,
    ControlledMasked,
    WildMasked,
    AllMasked,
    Race(Race),
    Gender(Gender),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Required {
    Nothing,
    Age,
    Scenario,
    Race,
    Gender,
}

impl Slice {
    pub fn defaults() -> Vec<Slice> {
        let mut slices = vec![
            Slice::All,
            Slice::CrossAge(10),
            Slice::CrossAge(20),
            Slice::Controlled,
            Slice::Wild,
            Slice::CrossScene,
            Slice::ControlledMasked,
            Slice::WildMasked,
            Slice::AllMasked,
        ];
        slices.extend(FAIRNESS_RACES.iter().map(|&r| Slice::Race(r)));
        slices.extend(Gender::ALL.iter().map(|&g| Slice::Gender(g)));
        slices
    }

    pub fn is_masked(self) -> bool {
        matches!(self, Slice::ControlledMasked | Slice::WildMasked | Slice::AllMasked)
    }

    fn required(self) -> Required {
        match self {
            Slice::All | Slice::AllMasked => Required::Nothing,
            Slice::CrossAge(_) => Required::Age,
            Slice::Controlled
            | Slice::Wild
            | Slice::CrossScene
            | Slice::ControlledMasked
            | Slice::WildMasked => Required::Scenario,
            Slice::Race(_) => Required::Race,
            Slice::Gender(_) => Required::Gender,
        }
    }

    fn has_required(self, a: &AttributeSet) -> bool {
        match self.required() {
            Required::Nothing => true,
            Required::Age => a.age_years.is_some(),
            Required::Scenario => a.scenario.is_some(),
            Required::Race => a.race.is_some(),
            Required::Gender => a.gender.is_some(),
        }
    }

    /// Whether a face can take part in any pair of this slice.
    pub fn face_eligible(self, a: &AttributeSet) -> bool {
        if !self.has_required(a) {
            return false;
        }
        match self {
            Slice::All | Slice::CrossAge(_) | Slice::CrossScene => !a.masked,
            Slice::Controlled => !a.masked && a.scenario == Some(Scenario::Controlled),
            Slice::Wild => !a.masked && a.scenario == Some(Scenario::Wild),
            Slice::Race(r) => !a.masked && a.race == Some(r),
            Slice::Gender(g) => !a.masked && a.gender == Some(g),
            Slice::AllMasked => true,
            Slice::ControlledMasked => a.masked || a.scenario == Some(Scenario::Controlled),
            Slice::WildMasked => a.masked || a.scenario == Some(Scenario::Wild),
        }
    }

    pub fn pair_matches(self, a: &AttributeSet, b: &AttributeSet) -> bool {
        if !self.face_eligible(a) || !self.face_eligible(b) {
            return false;
        }
        match self {
            Slice::CrossAge(years) => {
                let (x, y) = (a.age_years.unwrap(), b.age_years.unwrap());
                x.abs_diff(y) >= years
            }
            Slice::CrossScene => a.scenario != b.scenario,
            // Exactly one masked face; the unmasked one carries the scenario.
            Slice::AllMasked => a.masked != b.masked,
            Slice::ControlledMasked | Slice::WildMasked => {
                a.masked != b.masked && {
                    let plain = if a.masked { b } else { a };
                    let want = if self == Slice::ControlledMasked {
                        Scenario::Controlled
                    } else {
                        Scenario::Wild
                    };
                    plain.scenario == Some(want)
                }
            }
            _ => true,
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slice::All => f.write_str("All"),
            Slice::CrossAge(y) => write!(f, "Cross-age-{y}"),
            Slice::Controlled => f.write_str("Controlled"),
            Slice::Wild => f.write_str("Wild"),
            Slice::CrossScene => f.write_str("Cross-scene"),
            Slice::ControlledMasked => f.write_str("Controlled-Masked"),
            Slice::WildMasked => f.write_str("Wild-Masked"),
            Slice::AllMasked => f.write_str("All-Masked"),
            Slice::Race(r) => write!(f, "Race-{r}"),
            Slice::Gender(g) => write!(f, "Gender-{g}"),
        }
    }
}

impl FromStr for Slice {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self> {
        let slice = match s {
            "All" => Slice::All,
            "Controlled" => Slice::Controlled,
            "Wild" => Slice::Wild,
            "Cross-scene" => Slice::CrossScene,
            "Controlled-Masked" => Slice::ControlledMasked,
            "Wild-Masked" => Slice::WildMasked,
            "All-Masked" => Slice::AllMasked,
            _ => {
                if let Some(y) = s.strip_prefix("Cross-age-") {
                    Slice::CrossAge(y.parse().map_err(|_| {
                        CurateError::Protocol(format!("bad age span in slice {s:?}"))
                    })?)
                } else if let Some(r) = s.strip_prefix("Race-") {
                    Slice::Race(r.parse()?)
                } else if let Some(g) = s.strip_prefix("Gender-") {
                    Slice::Gender(g.parse()?)
                } else {
                    return Err(CurateError::Protocol(format!("unknown slice {s:?}")));
                }
            }
        };
        Ok(slice)
    }
}

impl From<Slice> for String {
    fn from(s: Slice) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Slice {
    type Error = CurateError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Races reported in the fairness block.
pub const FAIRNESS_RACES: [Race; 3] = [Race::Caucasian, Race::EastAsian, Race::African];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProtocol {
    pub slice_name: String,
    /// Pairs are `(smaller id, larger id)`, sorted.
    pub genuine_pairs: Vec<Pair>,
    pub impostor_pairs: Vec<Pair>,
}

pub const DEFAULT_IMPOSTOR_CAP: usize = 10_000_000;

fn ordered(a: FaceId, b: FaceId) -> Pair {
    (a.min(b), a.max(b))
}

pub fn build_protocol(corpus: &Corpus, slice: Slice, impostor_cap: usize, seed: u64) -> Result<PairProtocol> {
    if corpus.faces().len() > 0 && !corpus.faces().any(|f| slice.has_required(&f.attributes)) {
        return Err(CurateError::Protocol(format!(
            "slice {slice} needs an attribute no face in the corpus carries"
        )));
    }

    let mut genuine = Vec::new();
    for folder in corpus.folders() {
        let members: Vec<&FaceRecord> = folder
            .member_face_ids
            .iter()
            .map(|id| corpus.face(*id).expect("folder members resolve"))
            .filter(|f| slice.face_eligible(&f.attributes))
            .collect();
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                if slice.pair_matches(&a.attributes, &b.attributes) {
                    genuine.push(ordered(a.face_id, b.face_id));
                }
            }
        }
    }
    genuine.sort_unstable();

    let eligible: Vec<&FaceRecord> = corpus
        .faces()
        .filter(|f| slice.face_eligible(&f.attributes))
        .collect();
    let n = eligible.len();
    let mut per_identity: BTreeMap<IdentityId, usize> = BTreeMap::new();
    for f in &eligible {
        *per_identity.entry(f.identity_id).or_default() += 1;
    }
    let choose2 = |k: usize| k * k.saturating_sub(1) / 2;
    let cross_identity = choose2(n) - per_identity.values().map(|&k| choose2(k)).sum::<usize>();

    let mut impostor = Vec::new();
    if cross_identity <= impostor_cap {
        for (i, a) in eligible.iter().enumerate() {
            for b in &eligible[i + 1..] {
                if a.identity_id != b.identity_id && slice.pair_matches(&a.attributes, &b.attributes) {
                    impostor.push(ordered(a.face_id, b.face_id));
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen: HashSet<Pair> = HashSet::with_capacity(impostor_cap);
        let max_draws = impostor_cap.saturating_mul(50);
        let mut draws = 0usize;
        while seen.len() < impostor_cap && draws < max_draws {
            draws += 1;
            let a = eligible[rng.random_range(0..n)];
            let b = eligible[rng.random_range(0..n)];
            if a.identity_id != b.identity_id && slice.pair_matches(&a.attributes, &b.attributes) {
                seen.insert(ordered(a.face_id, b.face_id));
            }
        }
        impostor = seen.into_iter().collect();
    }
    impostor.sort_unstable();

    Ok(PairProtocol {
        slice_name: slice.to_string(),
        genuine_pairs: genuine,
        impostor_pairs: impostor,
    })
}

impl PairProtocol {
    /// Exhaustive check of the pair invariants against a corpus.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let identity = |id: FaceId| corpus.face(id).map(|f| f.identity_id).ok_or(CurateError::UnknownFace(id));
        let mut seen = BTreeSet::new();
        for (genuine, pairs) in [(true, &self.genuine_pairs), (false, &self.impostor_pairs)] {
            for &(a, b) in pairs {
                if a == b {
                    return Err(CurateError::Protocol(format!("self pair ({a}, {b})")));
                }
                if (identity(a)? == identity(b)?) != genuine {
                    return Err(CurateError::Protocol(format!(
                        "pair ({a}, {b}) mislabeled as {}",
                        if genuine { "genuine" } else { "impostor" }
                    )));
                }
                if !seen.insert(ordered(a, b)) {
                    return Err(CurateError::Protocol(format!("pair ({a}, {b}) repeated")));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scores and threshold metrics

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(CurateError::InvalidParameter("scores must be finite".into()));
        }
        Ok(ScoreSet { genuine, impostor })
    }
}

/// Scores every protocol pair by embedding similarity.
pub fn score_with_embeddings(corpus: &Corpus, protocol: &PairProtocol) -> Result<ScoreSet> {
    let score = |pairs: &[Pair]| -> Result<Vec<f64>> {
        pairs
            .par_chunks(4096)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&(a, b)| Ok(f64::from(unit_similarity(corpus.embedding(a)?, corpus.embedding(b)?))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()
            .map(|parts| parts.concat())
    };
    ScoreSet::new(score(&protocol.genuine_pairs)?, score(&protocol.impostor_pairs)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fnmr: f64,
    pub threshold: f64,
    /// FMR actually reached at the threshold.
    pub fmr: f64,
}

/// Largest impostor count `k` with `k / n <= target`.
fn allowed_false_matches(n: usize, target_fmr: f64) -> usize {
    let nf = n as f64;
    let mut k = ((target_fmr * nf).floor() as usize).min(n);
    while k < n && ((k + 1) as f64) / nf <= target_fmr {
        k += 1;
    }
    while k > 0 && (k as f64) / nf > target_fmr {
        k -= 1;
    }
    k
}

/// FNMR at the lowest threshold whose FMR does not exceed `target_fmr`.
///
/// The threshold sits just above the highest impostor score that has to be
/// rejected, so it is the smallest representable value meeting the target.
pub fn fnmr_at_fmr(scores: &ScoreSet, target_fmr: f64) -> Result<OperatingPoint> {
    if !(target_fmr > 0.0 && target_fmr < 1.0) {
        return Err(CurateError::InvalidParameter(format!(
            "target FMR {target_fmr} outside (0, 1)"
        )));
    }
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(CurateError::InvalidParameter(
            "need at least one genuine and one impostor score".into(),
        ));
    }
    let n = scores.impostor.len();
    let allowed = allowed_false_matches(n, target_fmr);
    if allowed == 0 {
        return Err(CurateError::InsufficientPairs {
            available: n,
            required: (1.0 / target_fmr).ceil() as usize,
            target_fmr,
        });
    }
    let mut impostor = scores.impostor.clone();
    impostor.sort_unstable_by(|a, b| b.total_cmp(a));
    // allowed < n because target_fmr < 1.
    let threshold = impostor[allowed].next_up();
    let false_matches = impostor.partition_point(|&s| s >= threshold);
    let misses = scores.genuine.iter().filter(|&&g| g < threshold).count();
    Ok(OperatingPoint {
        fnmr: misses as f64 / scores.genuine.len() as f64,
        threshold,
        fmr: false_matches as f64 / n as f64,
    })
}

// ---------------------------------------------------------------------------
// Fairness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub groups: BTreeMap<String, f64>,
    pub avg: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Skewed error ratio, highest over lowest group error.
    pub ser: f64,
}

pub fn fairness_metrics(group_fnmrs: &BTreeMap<String, f64>) -> Result<GroupMetrics> {
    if group_fnmrs.len() < 2 {
        return Err(CurateError::InvalidParameter(format!(
            "fairness needs at least two groups, got {}",
            group_fnmrs.len()
        )));
    }
    let n = group_fnmrs.len() as f64;
    let values: Vec<f64> = group_fnmrs.values().copied().collect();
    let avg = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n).sqrt();
    let (min_group, min) = group_fnmrs
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(g, v)| (g.clone(), *v))
        .unwrap();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min <= 0.0 {
        return Err(CurateError::SerUndefined { group: min_group });
    }
    Ok(GroupMetrics {
        groups: group_fnmrs.clone(),
        avg,
        std,
        ser: max / min,
    })
}

/// Fixed-point text of `x` at `places` decimals, rounding decimal ties away
/// from zero. Guard digits absorb binary representation error, so a mean
/// such as `0.13015` prints as `0.1302`.
pub fn format_fixed(x: f64, places: usize) -> String {
    const GUARD: usize = 6;
    let text = format!("{:.*}", places + GUARD, x.abs());
    let digits: String = text.chars().filter(char::is_ascii_digit).collect();
    let Ok(scaled) = digits.parse::<u128>() else {
        return format!("{x:.places$}");
    };
    let unit = 10u128.pow(GUARD as u32);
    let rounded = (scaled + unit / 2) / unit;
    let scale = 10u128.pow(places as u32);
    let sign = if x < 0.0 && rounded != 0 { "-" } else { "" };
    if places == 0 {
        format!("{sign}{rounded}")
    } else {
        format!("{sign}{}.{:0places$}", rounded / scale, rounded % scale)
    }
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Track {
    #[serde(rename = "FRUITS-100")]
    Fruits100,
    #[serde(rename = "FRUITS-500")]
    Fruits500,
    #[serde(rename = "FRUITS-1000")]
    Fruits1000,
}

impl Track {
    pub fn budget_ms(self) -> f64 {
        match self {
            Track::Fruits100 => 100.0,
            Track::Fruits500 => 500.0,
            Track::Fruits1000 => 1000.0,
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FRUITS-{}", self.budget_ms() as u32)
    }
}

impl FromStr for Track {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FRUITS-100" | "100" => Ok(Track::Fruits100),
            "FRUITS-500" | "500" => Ok(Track::Fruits500),
            "FRUITS-1000" | "1000" => Ok(Track::Fruits1000),
            _ => Err(CurateError::InvalidParameter(format!("unknown track {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBudget {
    pub track: Track,
    /// Flip-test evaluation: each face is embedded together with its mirror
    /// image in a batch of two.
    pub flip: bool,
}

impl TimeBudget {
    pub fn new(track: Track, flip: bool) -> Self {
        TimeBudget { track, flip }
    }

    pub fn budget_ms(&self) -> f64 {
        self.track.budget_ms()
    }

    pub fn batch_size(&self) -> usize {
        if self.flip {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyPolicy {
    pub warmup: usize,
    pub timed: usize,
    /// An invocation slower than this multiple of the budget is a failure.
    pub timeout_factor: f64,
}

impl Default for LatencyPolicy {
    fn default() -> Self {
        LatencyPolicy {
            warmup: 5,
            timed: 30,
            timeout_factor: 10.0,
        }
    }
}

/// A face matcher that decides image pairs end to end.
pub trait Matcher {
    /// Batch size the matcher should use when embedding a face.
    fn set_batch_size(&mut self, _batch_size: usize) {}

    /// Wall-clock limit for one invocation; matchers that can enforce it
    /// should abort past it.
    fn set_timeout(&mut self, _timeout: Option<Duration>) {}

    /// One similarity per pair, in order.
    fn score_pairs(&mut self, pairs: &[Pair]) -> Result<Vec<f64>>;
}

/// Cosine similarity of stored embeddings.
pub struct EmbeddingMatcher<'a> {
    pub corpus: &'a Corpus,
}

impl Matcher for EmbeddingMatcher<'_> {
    fn score_pairs(&mut self, pairs: &[Pair]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(a, b)| {
                Ok(f64::from(unit_similarity(
                    self.corpus.embedding(a)?,
                    self.corpus.embedding(b)?,
                )))
            })
            .collect()
    }
}

/// External matcher process.
///
/// Each probe batch is written to a pair-list file (`face_id_a<TAB>face_id_b`
/// per line, LF-terminated); the program is run as `program [args..] <file>`
/// with `FRUITS_BATCH_SIZE` set and must print one decimal similarity per
/// line on stdout.
pub struct ProcessMatcher {
    pub program: PathBuf,
    pub args: Vec<String>,
    batch_size: usize,
    timeout: Option<Duration>,
    scratch: tempfile::TempDir,
}

impl ProcessMatcher {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Result<Self> {
        let scratch = tempfile::tempdir().map_err(|e| CurateError::io(std::env::temp_dir(), e))?;
        Ok(ProcessMatcher {
            program: program.into(),
            args,
            batch_size: 1,
            timeout: None,
            scratch,
        })
    }
}

pub fn write_pair_list(pairs: &[Pair]) -> String {
    let mut out = String::with_capacity(pairs.len() * 16);
    for (a, b) in pairs {
        let _ = writeln!(out, "{a}\t{b}");
    }
    out
}

pub fn parse_scores(text: &str, expected: usize) -> Result<Vec<f64>> {
    let scores = text
        .lines()
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|s| s.is_finite())
                .ok_or_else(|| CurateError::Matcher(format!("unparseable score line {l:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if scores.len() != expected {
        return Err(CurateError::Matcher(format!(
            "matcher returned {} scores for {expected} pairs",
            scores.len()
        )));
    }
    Ok(scores)
}

impl Matcher for ProcessMatcher {
    fn set_batch_size(&mut self, batch_size: usize) {
        self.batch_size = batch_size;
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    fn score_pairs(&mut self, pairs: &[Pair]) -> Result<Vec<f64>> {
        let list = self.scratch.path().join("pairs.tsv");
        fs::write(&list, write_pair_list(pairs)).map_err(|e| CurateError::io(&list, e))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&list)
            .env("FRUITS_BATCH_SIZE", self.batch_size.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| CurateError::Matcher(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            stdout.read_to_string(&mut buf).map(|_| buf)
        });
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child
                .try_wait()
                .map_err(|e| CurateError::Matcher(e.to_string()))?
            {
                break status;
            }
            if self.timeout.is_some_and(|t| start.elapsed() > t) {
                let _ = child.kill();
                let _ = child.wait();
                return Err(CurateError::Matcher(format!(
                    "{} exceeded {:?}",
                    self.program.display(),
                    self.timeout.unwrap()
                )));
            }
            std::thread::sleep(Duration::from_micros(200));
        };
        let text = reader
            .join()
            .map_err(|_| CurateError::Matcher("stdout reader panicked".into()))?
            .map_err(|e| CurateError::Matcher(e.to_string()))?;
        if !status.success() {
            return Err(CurateError::Matcher(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        parse_scores(&text, pairs.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub track: Track,
    pub budget_ms: f64,
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub median_ms: f64,
    pub pass: bool,
}

/// Restricts the calling thread to the CPU it is running on and restores
/// the previous mask on drop.
struct SingleCorePin {
    #[cfg(target_os = "linux")]
    previous: Option<libc::cpu_set_t>,
}

impl SingleCorePin {
    #[cfg(target_os = "linux")]
    fn pin() -> Self {
        // SAFETY: plain libc calls on the current thread with stack-owned sets.
        unsafe {
            let mut previous: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut previous) != 0 {
                return SingleCorePin { previous: None };
            }
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return SingleCorePin { previous: None };
            }
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return SingleCorePin { previous: None };
            }
            SingleCorePin {
                previous: Some(previous),
            }
        }
    }

    #[cfg(not(target_os = "linux"))]
    fn pin() -> Self {
        SingleCorePin {}
    }
}

impl Drop for SingleCorePin {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        if let Some(previous) = self.previous.take() {
            // SAFETY: restores a mask previously read for this thread.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &previous);
            }
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Times one pair per invocation on the calling thread, pinned to a single
/// core. Warmup runs are discarded.
pub fn measure_latency(
    matcher: &mut dyn Matcher,
    probe_pairs: &[Pair],
    budget: TimeBudget,
    policy: LatencyPolicy,
) -> Result<LatencyReport> {
    if probe_pairs.is_empty() || policy.timed == 0 {
        return Err(CurateError::InvalidParameter(
            "latency measurement needs probe pairs and at least one timed run".into(),
        ));
    }
    let limit_ms = budget.budget_ms() * policy.timeout_factor;
    matcher.set_batch_size(budget.batch_size());
    matcher.set_timeout(Some(Duration::from_secs_f64(limit_ms / 1000.0)));

    let _pin = SingleCorePin::pin();
    let mut samples = Vec::with_capacity(policy.timed);
    for run in 0..policy.warmup + policy.timed {
        let pair = probe_pairs[run % probe_pairs.len()];
        let start = Instant::now();
        let scores = matcher.score_pairs(std::slice::from_ref(&pair))?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1000.0;
        if scores.len() != 1 {
            return Err(CurateError::Matcher(format!(
                "expected one score, got {}",
                scores.len()
            )));
        }
        if elapsed_ms > limit_ms {
            return Err(CurateError::Matcher(format!(
                "invocation took {elapsed_ms:.1} ms, over {limit_ms:.0} ms"
            )));
        }
        if run >= policy.warmup {
            samples.push(elapsed_ms);
        }
    }
    let median_ms = median(&mut samples);
    Ok(LatencyReport {
        track: budget.track,
        budget_ms: budget.budget_ms(),
        batch_size: budget.batch_size(),
        warmup_runs: policy.warmup,
        timed_runs: policy.timed,
        median_ms,
        pass: median_ms <= budget.budget_ms(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub slices: Vec<Slice>,
    pub target_fmr: f64,
    pub impostor_cap: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            slices: Slice::defaults(),
            target_fmr: 1e-5,
            impostor_cap: DEFAULT_IMPOSTOR_CAP,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    /// `key = value` lines: `slices` (comma list), `target_fmr`,
    /// `impostor_cap`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ProtocolConfig::default();
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
            match key {
                "slices" => {
                    cfg.slices = value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_>>()?
                }
                "target_fmr" => {
                    cfg.target_fmr = value
                        .parse()
                        .map_err(|_| err(format!("invalid target_fmr {value:?}")))?
                }
                "impostor_cap" => {
                    cfg.impostor_cap = value
                        .parse()
                        .map_err(|_| err(format!("invalid impostor_cap {value:?}")))?
                }
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| err(format!("invalid seed {value:?}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CurateError::io(path, e))?;
        ProtocolConfig::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub slice: String,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operating_point: Option<OperatingPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessBlock {
    pub attribute: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<GroupMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FairnessBlock {
    pub fn from_groups(attribute: &str, groups: &BTreeMap<String, f64>) -> Self {
        match fairness_metrics(groups) {
            Ok(m) => FairnessBlock {
                attribute: attribute.into(),
                metrics: Some(m),
                error: None,
            },
            Err(e) => FairnessBlock {
                attribute: attribute.into(),
                metrics: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn render(&self) -> String {
        match (&self.metrics, &self.error) {
            (Some(m), _) => {
                let groups: Vec<String> = m
                    .groups
                    .iter()
                    .map(|(g, v)| format!("{g}={}", format_fixed(*v, 4)))
                    .collect();
                format!(
                    "fairness ({}): {}  avg={} std={} ser={}",
                    self.attribute,
                    groups.join(" "),
                    format_fixed(m.avg, 4),
                    format_fixed(m.std, 4),
                    format_fixed(m.ser, 2)
                )
            }
            (None, Some(e)) => format!("fairness ({}): {e}", self.attribute),
            (None, None) => format!("fairness ({}): no groups", self.attribute),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub target_fmr: f64,
    pub slices: Vec<SliceResult>,
    pub fairness: Vec<FairnessBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

impl EvaluationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>10} {:>12} {:>14} {:>12}",
            "slice",
            "genuine",
            "impostor",
            format!("FNMR@{:.0e}", self.target_fmr),
            "threshold"
        );
        for s in &self.slices {
            match (&s.operating_point, &s.error) {
                (Some(op), _) => {
                    let _ = writeln!(
                        out,
                        "{:<20} {:>10} {:>12} {:>14.4} {:>12.6}",
                        s.slice, s.genuine_pairs, s.impostor_pairs, op.fnmr, op.threshold
                    );
                }
                (None, e) => {
                    let _ = writeln!(
                        out,
                        "{:<20} {:>10} {:>12}   {}",
                        s.slice,
                        s.genuine_pairs,
                        s.impostor_pairs,
                        e.as_deref().unwrap_or("n/a")
                    );
                }
            }
        }
        for f in &self.fairness {
            let _ = writeln!(out, "{}", f.render());
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                out,
                "latency {}: median {:.1} ms over {} runs (batch {}), budget {} ms: {}",
                l.track,
                l.median_ms,
                l.timed_runs,
                l.batch_size,
                l.budget_ms,
                if l.pass { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

/// Builds every configured slice, scores it with `scorer`, and summarizes
/// race and gender fairness from the per-group slices.
pub fn evaluate(
    corpus: &Corpus,
    config: &ProtocolConfig,
    scorer: &mut dyn FnMut(&PairProtocol) -> Result<ScoreSet>,
) -> Result<EvaluationReport> {
    let mut slices = Vec::new();
    let mut race_groups = BTreeMap::new();
    let mut gender_groups = BTreeMap::new();
    for &slice in &config.slices {
        let protocol = build_protocol(corpus, slice, config.impostor_cap, config.seed)?;
        let mut result = SliceResult {
            slice: protocol.slice_name.clone(),
            genuine_pairs: protocol.genuine_pairs.len(),
            impostor_pairs: protocol.impostor_pairs.len(),
            operating_point: None,
            error: None,
        };
        let outcome = scorer(&protocol).and_then(|scores| fnmr_at_fmr(&scores, config.target_fmr));
        match outcome {
            Ok(op) => {
                match slice {
                    Slice::Race(r) => {
                        race_groups.insert(r.to_string(), op.fnmr);
                    }
                    Slice::Gender(g) => {
                        gender_groups.insert(g.to_string(), op.fnmr);
                    }
                    _ => {}
                }
                result.operating_point = Some(op);
            }
            Err(e @ CurateError::Matcher(_)) => return Err(e),
            Err(e) => result.error = Some(e.to_string()),
        }
        slices.push(result);
    }
    let mut fairness = Vec::new();
    if config.slices.iter().any(|s| matches!(s, Slice::Race(_))) {
        fairness.push(FairnessBlock::from_groups("race", &race_groups));
    }
    if config.slices.iter().any(|s| matches!(s, Slice::Gender(_))) {
        fairness.push(FairnessBlock::from_groups("gender", &gender_groups));
    }
    Ok(EvaluationReport {
        target_fmr: config.target_fmr,
        slices,
        fairness,
        latency: None,
    })
}

/// Parses `[dataset<TAB>]attribute<TAB>group<TAB>fnmr` lines into groups
/// keyed by `"dataset attribute"` (or just the attribute).
pub fn parse_group_fnmrs(text: &str) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let ctx = format!("group fnmr line {}", n + 1);
        if !(3..=4).contains(&f.len()) {
            return Err(CurateError::format(ctx, "expected [dataset,] attribute, group, fnmr"));
        }
        let k = f.len();
        let v: f64 = f[k - 1]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CurateError::format(ctx, format!("invalid fnmr {:?}", f[k - 1])))?;
        out.entry(f[..k - 2].join(" "))
            .or_default()
            .insert(f[k - 2].to_string(), v);
    }
    Ok(out)
}
