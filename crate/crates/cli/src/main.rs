use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use facecurate::cast::{
    run_cast, similarity_distributions, CastConfig, EmbeddingFiles, EmbeddingProvider,
    NoisyTeacher, StoredEmbeddings,
};
use facecurate::dedup::{remove_duplicates, DUPLICATE_THRESHOLD};
use facecurate::fruits::{
    evaluate, measure_latency, parse_group_fnmrs, score_with_embeddings, EmbeddingMatcher,
    FairnessBlock, LatencyPolicy, Matcher, ProcessMatcher, ProtocolConfig, ScoreSet, TimeBudget,
    Track,
};
use facecurate::merge::{compute_centers, CenterIndex};
use facecurate::synth::{generate, SynthSpec};
use facecurate::{load_corpus, write_corpus, Corpus, CurateError, Histogram, StageStats};

#[derive(Parser)]
#[command(name = "facecurate", version, about = "Face corpus cleaning and verification evaluation")]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the iterative cleaning pipeline.
    Clean(CleanArgs),
    /// Build verification protocols and report FNMR, fairness and latency.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic noisy corpus with ground truth.
    GenSynth(GenSynthArgs),
    /// Remove near-duplicate faces within folders.
    Dedup(DedupArgs),
    /// Intra/inter similarity histograms of a corpus.
    Stats(StatsArgs),
    /// Fairness metrics from per-group FNMRs.
    Fairness(FairnessArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Face manifest (TSV).
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding file.
    #[arg(long)]
    embeddings: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        load_corpus(&self.manifest, &self.embeddings).context("loading corpus")
    }
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Pipeline configuration (`key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding source per iteration: `stored`, `noisy:SEED`, or
    /// `files:PATH,PATH,...`.
    #[arg(long, default_value = "stored")]
    provider: String,
    /// Exclusion set as a corpus whose folder centers are matched against.
    #[arg(long, requires = "exclusion_embeddings")]
    exclusion_manifest: Option<PathBuf>,
    #[arg(long, requires = "exclusion_manifest")]
    exclusion_embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Protocol configuration (`key = value` lines).
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// External matcher program; stored embeddings are used when omitted.
    #[arg(long)]
    matcher: Option<PathBuf>,
    /// Extra arguments passed to the matcher before the pair-list path.
    #[arg(long = "matcher-arg", allow_hyphen_values = true)]
    matcher_args: Vec<String>,
    /// Latency track, e.g. FRUITS-100.
    #[arg(long)]
    track: Option<Track>,
    /// Flip-test evaluation (batch size 2 per face).
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DedupArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = DUPLICATE_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Folders to sample; all when omitted.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FairnessArgs {
    /// TSV `[dataset<TAB>]attribute<TAB>group<TAB>fnmr`.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn save_corpus(corpus: &Corpus, dir: &Path, stem: &str) -> Result<()> {
    write_corpus(corpus, &dir.join(format!("{stem}.tsv")), &dir.join(format!("{stem}.emb")))
        .with_context(|| format!("writing {stem} corpus"))
}

fn write_histograms<'a>(path: &Path, stages: impl IntoIterator<Item = &'a StageStats>) -> Result<()> {
    let stages: Vec<&StageStats> = stages.into_iter().collect();
    write_file(path, |w| {
        writeln!(w, "stage,kind,bin,lower,upper,count")?;
        for s in stages {
            for (kind, h) in [
                ("intra", &s.intra_similarity_histogram),
                ("inter", &s.inter_similarity_histogram),
            ] {
                let Some(h) = h else { continue };
                for (bin, count) in h.counts.iter().enumerate() {
                    let (lo, hi) = Histogram::bin_edges(bin);
                    writeln!(w, "{},{kind},{bin},{lo:.2},{hi:.2},{count}", s.stage_name)?;
                }
            }
        }
        Ok(())
    })
}

fn write_stage_lines(path: &Path, stages: &[StageStats]) -> Result<()> {
    write_file(path, |w| {
        for s in stages {
            serde_json::to_writer(&mut *w, s)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

fn parse_provider(spec: &str) -> Result<Box<dyn EmbeddingProvider>> {
    let bad = || CurateError::InvalidParameter(format!("unknown provider {spec:?}"));
    let provider: Box<dyn EmbeddingProvider> = match spec.split_once(':') {
        None if spec == "stored" => Box::new(StoredEmbeddings),
        None if spec == "noisy" => Box::new(NoisyTeacher::shrinking(0)),
        Some(("noisy", seed)) => Box::new(NoisyTeacher::shrinking(seed.parse().map_err(|_| bad())?)),
        Some(("files", list)) => Box::new(EmbeddingFiles {
            paths: list.split(',').map(PathBuf::from).collect(),
        }),
        _ => return Err(bad().into()),
    };
    Ok(provider)
}

fn clean(args: &CleanArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => CastConfig::load(p).context("reading config")?,
        None => CastConfig::default(),
    };
    let raw = args.corpus.load()?;
    let provider = parse_provider(&args.provider).context("provider")?;
    let exclusion = match (&args.exclusion_manifest, &args.exclusion_embeddings) {
        (Some(m), Some(e)) => {
            let c = load_corpus(m, e).context("loading exclusion set")?;
            Some(compute_centers(&c).context("exclusion centers")?)
        }
        _ => None,
    };
    let outcome = run_cast(&raw, provider.as_ref(), &config, exclusion.as_ref()).context("cleaning")?;
    let cleaned = outcome.cleaned_over(&raw)?;

    create_dir(&args.out)?;
    save_corpus(&cleaned, &args.out, "cleaned")?;
    write_stage_lines(&args.out.join("stages.jsonl"), &outcome.stages)?;
    write_histograms(&args.out.join("histograms.csv"), &outcome.stages)?;
    for it in &outcome.iterations {
        let path = args.out.join(format!("merge_plan_iter{}.tsv", it.iteration));
        write_file(&path, |w| it.plan.write_audit(w))?;
    }
    for s in &outcome.stages {
        println!(
            "{:<28} identities {:>8} -> {:<8} faces {:>10} -> {}",
            s.stage_name, s.identities_before, s.identities_after, s.faces_before, s.faces_after
        );
    }
    Ok(())
}

fn eval(args: &EvaluateArgs) -> Result<()> {
    let protocol = match &args.protocol {
        Some(p) => ProtocolConfig::load(p).context("reading protocol")?,
        None => ProtocolConfig::default(),
    };
    let corpus = args.corpus.load()?;
    let mut process = match &args.matcher {
        Some(p) => Some(ProcessMatcher::new(p, args.matcher_args.clone())?),
        None => None,
    };

    let mut report = {
        let mut scorer = |pp: &facecurate::fruits::PairProtocol| -> facecurate::Result<ScoreSet> {
            match process.as_mut() {
                Some(m) => ScoreSet::new(m.score_pairs(&pp.genuine_pairs)?, m.score_pairs(&pp.impostor_pairs)?),
                None => score_with_embeddings(&corpus, pp),
            }
        };
        evaluate(&corpus, &protocol, &mut scorer).context("evaluation")?
    };

    if let Some(track) = args.track {
        let probes = facecurate::fruits::build_protocol(
            &corpus,
            facecurate::fruits::Slice::All,
            LatencyPolicy::default().timed,
            protocol.seed,
        )
        .context("latency probes")?;
        let pairs: Vec<_> = probes.genuine_pairs.iter().chain(&probes.impostor_pairs).copied().collect();
        let budget = TimeBudget::new(track, args.flip);
        let mut embedded = EmbeddingMatcher { corpus: &corpus };
        let matcher: &mut dyn Matcher = match process.as_mut() {
            Some(m) => m,
            None => &mut embedded,
        };
        report.latency = Some(
            measure_latency(matcher, &pairs, budget, LatencyPolicy::default()).context("latency")?,
        );
    }

    create_dir(&args.out)?;
    let table = report.to_table();
    write_file(&args.out.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })?;
    write_file(&args.out.join("report.txt"), |w| w.write_all(table.as_bytes()))?;
    print!("{table}");
    Ok(())
}

fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        seed: args.seed,
        ..SynthSpec::default()
    };
    if let Some(n) = args.identities {
        spec.n_identities = n;
        spec.planted_test_identities = spec.planted_test_identities.min(n);
    }
    if let Some(d) = args.dim {
        spec.dim = d;
    }
    let (corpus, truth) = generate(&spec).context("generating corpus")?;
    create_dir(&args.out)?;
    save_corpus(&corpus, &args.out, "corpus")?;
    write_file(&args.out.join("truth.tsv"), |w| truth.write_tsv(w))?;
    save_corpus(&exclusion_corpus(&truth.exclusion)?, &args.out, "exclusion")?;
    println!(
        "{} identities, {} faces written to {}",
        corpus.identity_count(),
        corpus.face_count(),
        args.out.display()
    );
    Ok(())
}

/// One face per exclusion center, face id equal to the identity id.
fn exclusion_corpus(index: &CenterIndex) -> Result<Corpus> {
    let mut store = facecurate::EmbeddingStore::new(index.dim())?;
    let mut records = Vec::with_capacity(index.len());
    for (i, &id) in index.identity_ids().iter().enumerate() {
        records.push(facecurate::FaceRecord::new(id, id, store.push_row(index.center(i))?));
    }
    Ok(Corpus::new(records, store)?)
}

fn dedup(args: &DedupArgs) -> Result<()> {
    let corpus = args.corpus.load()?;
    let (out, stats) = remove_duplicates(&corpus, args.threshold).context("dedup")?;
    create_dir(&args.out)?;
    save_corpus(&out.compact(), &args.out, "deduped")?;
    write_stage_lines(&args.out.join("stages.jsonl"), std::slice::from_ref(&stats))?;
    println!("faces {} -> {}", stats.faces_before, stats.faces_after);
    Ok(())
}

fn stats(args: &StatsArgs) -> Result<()> {
    let corpus = args.corpus.load()?;
    let sample = args.sample.unwrap_or(corpus.identity_count());
    let (intra, inter) = similarity_distributions(&corpus, sample, args.seed).context("stats")?;
    let mut s = StageStats::new(
        "corpus",
        (corpus.identity_count(), corpus.face_count()),
        (corpus.identity_count(), corpus.face_count()),
    );
    s.intra_similarity_histogram = Some(intra);
    s.inter_similarity_histogram = Some(inter);
    create_dir(&args.out)?;
    write_histograms(&args.out.join("histograms.csv"), [&s])?;
    println!(
        "identities {} faces {} intra pairs {} inter pairs {} overlap {:.4}",
        corpus.identity_count(),
        corpus.face_count(),
        s.intra_similarity_histogram.as_ref().unwrap().total(),
        s.inter_similarity_histogram.as_ref().unwrap().total(),
        s.overlap().unwrap()
    );
    Ok(())
}

fn fairness(args: &FairnessArgs) -> Result<()> {
    let text = fs::read_to_string(&args.groups)
        .map_err(|e| CurateError::Io {
            path: args.groups.clone(),
            source: e,
        })
        .context("reading groups")?;
    let blocks: Vec<FairnessBlock> = parse_group_fnmrs(&text)?
        .iter()
        .map(|(name, groups)| FairnessBlock::from_groups(name, groups))
        .collect();
    let mut table = String::new();
    for b in &blocks {
        table.push_str(&b.render());
        table.push('\n');
    }
    print!("{table}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("fairness.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &blocks)?;
            writeln!(w)
        })?;
        write_file(&dir.join("fairness.txt"), |w| w.write_all(table.as_bytes()))?;
    }
    if let Some(err) = blocks.iter().find_map(|b| b.error.as_ref()) {
        anyhow::bail!(CurateError::InvalidParameter(err.clone()));
    }
    Ok(())
}

/// The error chain joined by ": ", skipping causes already spelled out by
/// the message that wraps them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<CurateError>()) {
        Some(e) if e.is_data_error() => 3,
        Some(_) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start workers: {e}");
            return ExitCode::from(1);
        }
    };
    let (name, result) = pool.install(|| match &cli.command {
        Cmd::Clean(a) => ("clean", clean(a)),
        Cmd::Evaluate(a) => ("evaluate", eval(a)),
        Cmd::GenSynth(a) => ("gen-synth", gen_synth(a)),
        Cmd::Dedup(a) => ("dedup", dedup(a)),
        Cmd::Stats(a) => ("stats", stats(a)),
        Cmd::Fairness(a) => ("fairness", fairness(a)),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
