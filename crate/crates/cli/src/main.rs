use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use narrative_core::export::{self, ExportKind};
use narrative_core::matching::{
    precision_sample, read_sample_csv, score_precision, sweep_thresholds, write_sample_csv,
    MatchError, SWEEP_THRESHOLDS,
};
use narrative_core::pipeline::{artifact, Config, Pipeline, PipelineError, ProviderConfig, Stage, StageOutcome};
use narrative_core::synth::{narrative_fixture, NarrativeSpec};
use narrative_core::text::{fmt6, sig6};
use narrative_core::topics::{coherence, diversity, intra_cluster_similarity, TopicsError};
use narrative_core::HashProvider;

const DEFAULT_CONFIG: &str = "narrative.conf";
const SAMPLE_SHEET: &str = "precision_sample.csv";

#[derive(Parser)]
#[command(name = "narrative", version, about = "Sentence-level narrative clustering and spread analytics")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the matching config keys.
#[derive(Args)]
struct Overrides {
    /// Config file (`key = value` per line)
    #[arg(long, global = true, default_value = DEFAULT_CONFIG)]
    config: PathBuf,
    /// Global seed; every stage derives its own seed from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Similarity threshold for matching (config default 0.6)
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Smallest cluster HDBSCAN may report (config default 10)
    #[arg(long, global = true)]
    min_cluster_size: Option<usize>,
    /// UMAP neighborhood size (config default 15)
    #[arg(long, global = true)]
    n_neighbors: Option<usize>,
    /// Reduced dimensionality (config default 5)
    #[arg(long, global = true)]
    dims: Option<usize>,
    /// Artifact directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split articles into sentences and filter comments
    Ingest,
    /// Embed sentences and comments
    Embed,
    /// UMAP reduction of sentence embeddings
    Reduce,
    /// HDBSCAN over the reduced coordinates
    Cluster,
    /// c-TF-IDF keywords and sample sentences per topic
    Keywords,
    /// Print topic quality metrics as JSON
    Evaluate,
    /// Match comments to topic centroids
    Match,
    /// Mapped fraction of comments per threshold, as CSV
    Sweep {
        /// Comma-separated thresholds
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Print the per-topic origin report
    Origin,
    /// Print the domain spread graph in DOT
    Graph,
    /// Print the per-domain test results as CSV
    Stats,
    /// Write a labeling sheet of matched comments
    PrecisionSample {
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 10)]
        random_k: usize,
        /// Sheet path (default: precision_sample.csv in the artifact directory)
        #[arg(long)]
        sheet: Option<PathBuf>,
    },
    /// Score a labeled sheet
    PrecisionScore {
        #[arg(long)]
        labels: PathBuf,
    },
    /// Write one artifact in a deterministic format
    Export {
        /// topics | matches | origin | graph | stats
        #[arg(long)]
        what: String,
        /// json | csv | dot
        #[arg(long)]
        format: String,
        /// Destination file; stdout when omitted
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run every stage, skipping those whose inputs are unchanged
    Run,
    /// Write a synthetic corpus and a config that runs on it
    Synth {
        /// Directory for articles.jsonl, comments.jsonl and narrative.conf
        dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        families: usize,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<MatchError> for Failure {
    fn from(e: MatchError) -> Self {
        let code = if matches!(e, MatchError::Io(_)) { 4 } else { 3 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TopicsError> for Failure {
    fn from(e: TopicsError) -> Self {
        Failure {
            code: 3,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 4,
            message: e.to_string(),
        }
    }
}

fn load_config(o: &Overrides) -> Result<Config, PipelineError> {
    let mut cfg = Config::load(&o.config)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(t) = o.threshold {
        cfg.threshold = t;
    }
    if let Some(m) = o.min_cluster_size {
        cfg.hdbscan.min_cluster_size = m;
    }
    if let Some(k) = o.n_neighbors {
        cfg.umap.n_neighbors = k;
    }
    if let Some(d) = o.dims {
        cfg.umap.n_components = d;
    }
    if let Some(out) = &o.out {
        // relative to the working directory, not the config file
        cfg.out_dir = std::env::current_dir()?.join(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_one(p: &mut Pipeline, stage: Stage) -> Result<(), Failure> {
    let outcome = p.run_stage(stage)?;
    let word = match outcome {
        StageOutcome::Ran => "ran",
        StageOutcome::Skipped => "skipped",
    };
    eprintln!("{}: {word}", stage.name());
    Ok(())
}

fn print_artifact(p: &Pipeline, name: &str) -> Result<(), Failure> {
    let path = p.cfg.out(name);
    let text = fs::read_to_string(&path).map_err(|_| PipelineError::ArtifactMissing(path))?;
    print!("{text}");
    Ok(())
}

fn evaluate(p: &Pipeline) -> Result<(), Failure> {
    let model = p.load_model()?;
    let x = p.load_sentence_embeddings()?;
    let mut out = serde_json::Map::new();
    out.insert("topics".into(), model.n_topics().into());
    out.insert("outliers".into(), model.outlier_ids.len().into());
    out.insert("diversity".into(), sig6(diversity(&model)).into());
    let intra = intra_cluster_similarity(&model, &x)?;
    out.insert("intra_cluster_similarity".into(), sig6(intra).into());
    // keywords can only be embedded by a provider that accepts arbitrary text
    let coh = match p.cfg.provider {
        ProviderConfig::Hash { dim, seed } => {
            let c = coherence(&model, &HashProvider::new(dim, seed))?;
            serde_json::Value::from(sig6(c))
        }
        ProviderConfig::File { .. } => serde_json::Value::Null,
    };
    out.insert("coherence".into(), coh);
    println!("{}", serde_json::to_string_pretty(&out).expect("metrics serialize"));
    Ok(())
}

fn sweep(p: &Pipeline, thresholds: Option<Vec<f64>>) -> Result<(), Failure> {
    let thresholds = thresholds.unwrap_or_else(|| SWEEP_THRESHOLDS.to_vec());
    if let Some(t) = thresholds.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
        return Err(PipelineError::ConfigInvalid(format!("threshold {t} outside [-1, 1]")).into());
    }
    let model = p.load_model()?;
    let (comments, emb) = p.load_comments()?;
    println!("threshold,mapped_fraction");
    for (t, frac) in sweep_thresholds(&comments, &emb, &model, &thresholds)? {
        println!("{},{}", fmt6(t), fmt6(frac));
    }
    Ok(())
}

fn sample(p: &Pipeline, top_k: usize, random_k: usize, sheet: Option<PathBuf>) -> Result<(), Failure> {
    let report = p.load_match_report()?;
    let (comments, _) = p.load_comments()?;
    let rows = precision_sample(&report, &comments, top_k, random_k, p.cfg.stage_seed("precision"));
    if rows.is_empty() {
        return Err(MatchError::NoMatches.into());
    }
    let path = sheet.unwrap_or_else(|| p.cfg.out(SAMPLE_SHEET));
    write_sample_csv(&rows, &path)?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn score(p: &Pipeline, labels: &Path) -> Result<(), Failure> {
    if !labels.exists() {
        return Err(PipelineError::MissingInput(labels.to_path_buf()).into());
    }
    let rows = read_sample_csv(labels)?;
    let known: Option<BTreeSet<usize>> = p.load_model().ok().map(|m| m.cluster_members.keys().copied().collect());
    let s = score_precision(&rows, known.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&s).expect("score serializes"));
    Ok(())
}

fn synth(dir: &Path, families: usize) -> Result<(), Failure> {
    if families == 0 {
        return Err(PipelineError::ConfigInvalid("families must be at least 1".into()).into());
    }
    fs::create_dir_all(dir)?;
    let spec = NarrativeSpec {
        families,
        ..NarrativeSpec::default()
    };
    let fx = narrative_fixture(&spec);
    fx.write_files(dir)?;
    let conf = format!(
        "# synthetic corpus with {families} planted narratives\n\
         articles = articles.jsonl\n\
         comments = comments.jsonl\n\
         out_dir = out\n\
         seed = {}\n",
        spec.seed
    );
    fs::write(dir.join(DEFAULT_CONFIG), conf)?;
    eprintln!(
        "wrote {} articles and {} comments to {}",
        fx.articles.len(),
        fx.comments.len(),
        dir.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Command::Synth { dir, families } = &cli.command {
        return synth(dir, *families);
    }
    let cfg = load_config(&cli.overrides)?;
    info!("config {} -> {}", cli.overrides.config.display(), cfg.out("").display());
    let mut p = Pipeline::new(cfg)?;
    match cli.command {
        Command::Ingest => run_one(&mut p, Stage::Ingest),
        Command::Embed => run_one(&mut p, Stage::Embed),
        Command::Reduce => run_one(&mut p, Stage::Reduce),
        Command::Cluster => run_one(&mut p, Stage::Cluster),
        Command::Keywords => run_one(&mut p, Stage::Keywords),
        Command::Match => {
            if p.cfg.comments.is_none() {
                return Err(PipelineError::ConfigInvalid("matching needs `comments` in the config".into()).into());
            }
            run_one(&mut p, Stage::Match)
        }
        Command::Evaluate => evaluate(&p),
        Command::Sweep { thresholds } => sweep(&p, thresholds),
        Command::Origin => {
            run_one(&mut p, Stage::Analytics)?;
            print_artifact(&p, artifact::ORIGIN)
        }
        Command::Graph => {
            run_one(&mut p, Stage::Analytics)?;
            print_artifact(&p, artifact::GRAPH)
        }
        Command::Stats => {
            run_one(&mut p, Stage::Analytics)?;
            print_artifact(&p, artifact::STATS)
        }
        Command::PrecisionSample { top_k, random_k, sheet } => sample(&p, top_k, random_k, sheet),
        Command::PrecisionScore { labels } => score(&p, &labels),
        Command::Export { what, format, dest } => {
            let kind = ExportKind::parse(&what)?;
            let bytes = export::render(kind, &format, &p.cfg.out(""))?;
            match dest {
                Some(d) => fs::write(d, bytes)?,
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&bytes)?;
                }
            }
            Ok(())
        }
        Command::Run => {
            for (stage, outcome) in p.run_all()? {
                eprintln!("{}: {}", stage.name(), if outcome == StageOutcome::Ran { "ran" } else { "skipped" });
            }
            Ok(())
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
