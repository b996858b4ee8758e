//! `mvret`: generate corpora, build indexes, search, train the mapping
//! network, evaluate runs and inspect artifacts.
//!
//! Exit status is 0 on success, 2 for usage or validation errors and 1 for
//! runtime failures such as unreadable files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mvret::index::{decode_postings, default_centroids, default_nprobe, IndexManifest, INDEX_FILE};
use mvret::metrics::{evaluate, parse_answers, MatchPolicy};
use mvret::pipeline::{join_run_answers, mean_top1, parse_run, run_retrieval, write_run};
use mvret::store::corpus::parse_doc_meta;
use mvret::store::format::{KIND_NETWORK, KIND_POSTINGS, KIND_TOKENS, MAGIC};
use mvret::store::{
    decode_embeddings, decode_network, encode_network, generate_aligned_pairs, generate_synthetic,
    write_atomic, AlignedPairs, Corpus, CorpusManifest, ManifestKind, SynthSpec, MANIFEST_FILE,
};
use mvret::train::{train_alignment, TrainConfig};
use mvret::{
    compose_document, CentroidIndex, ComposeOptions, DocumentRecord, ExactIndex, Index,
    MappingNetwork,
};

#[derive(Parser)]
#[command(
    name = "mvret",
    version,
    about = "Multi-modal late-interaction retrieval engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Centroid,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus or aligned pair set from a TOML spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compose document tokens and build an exact or centroid index.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        mode: Mode,
        /// Number of centroids; defaults to ceil(sqrt(total tokens)).
        #[arg(long)]
        centroids: Option<usize>,
        /// Default probe width stored in the index; defaults to max(1, C/8).
        #[arg(long)]
        nprobe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an index with the queries of a corpus directory and write a run file.
    Search {
        #[arg(long)]
        index: PathBuf,
        /// Corpus directory holding the queries.
        #[arg(long)]
        queries: PathBuf,
        /// Mapping-network checkpoint; required when queries carry image features.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Centroid probes per query token; defaults to the value stored in the index.
        #[arg(long)]
        nprobe: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mapping network on aligned pairs.
    TrainAlign {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score a run file against an answers file.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Document texts for PRRecall: a corpus or index directory, or a docs JSONL file.
        #[arg(long)]
        docs: Option<PathBuf>,
        /// `substring` or `word`.
        #[arg(long = "match", default_value = "substring")]
        policy: String,
    },
    /// Describe a binary file, a corpus, pair or index directory, or a run file.
    Inspect { path: PathBuf },
}

/// A problem with the command's inputs rather than with the environment.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mvret::Error>() {
            return if matches!(e, mvret::Error::Io(_)) {
                1
            } else {
                2
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { spec, out } => gen_synth(&spec, &out),
        Command::BuildIndex {
            corpus,
            mode,
            centroids,
            nprobe,
            seed,
            out,
        } => build_index(&corpus, mode, centroids, nprobe, seed, &out),
        Command::Search {
            index,
            queries,
            net,
            k,
            nprobe,
            out,
        } => search(&index, &queries, net.as_deref(), k, nprobe, &out),
        Command::TrainAlign {
            pairs,
            config,
            out,
            curve,
        } => train_align(&pairs, &config, &out, curve),
        Command::Eval {
            run,
            answers,
            ks,
            out,
            docs,
            policy,
        } => eval(&run, &answers, &ks, &out, docs.as_deref(), &policy),
        Command::Inspect { path } => inspect(&path),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn gen_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::parse(&read_text(spec)?)?;
    let m = match spec {
        SynthSpec::Corpus(s) => generate_synthetic(&s)?.save(out)?,
        SynthSpec::Pairs(s) => generate_aligned_pairs(&s)?.save(out)?,
    };
    println!(
        "wrote {} documents and {} queries to {}",
        m.doc_count,
        m.query_count,
        out.display()
    );
    Ok(())
}

fn build_index(
    corpus_dir: &Path,
    mode: Mode,
    centroids: Option<usize>,
    nprobe: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let corpus = Corpus::load(corpus_dir)
        .with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    if corpus.docs.is_empty() {
        return Err(usage("corpus has no documents"));
    }
    let m = &corpus.manifest;
    let net = match (m.multimodal_docs, &corpus.net) {
        (true, Some(net)) => Some(net),
        (true, None) => return Err(usage("multimodal corpus lists no mapping network")),
        (false, _) => None,
    };
    let docs = corpus
        .docs
        .iter()
        .map(|d| {
            let tokens = compose_document(d, net, m.multimodal_docs, m.normalize_rows)?;
            if tokens.dim() != m.d_l {
                return Err(mvret::Error::DimMismatch {
                    context: "document tokens vs manifest d_l",
                    expected: m.d_l,
                    found: tokens.dim(),
                });
            }
            Ok(DocumentRecord {
                tokens,
                ..d.clone()
            })
        })
        .collect::<mvret::Result<Vec<_>>>()?;
    let tokens: usize = docs.iter().map(|d| d.tokens.rows()).sum();
    let index = match mode {
        Mode::Exact => {
            if centroids.is_some() || nprobe.is_some() {
                return Err(usage(
                    "--centroids and --nprobe apply to --mode centroid only",
                ));
            }
            Index::Exact(ExactIndex::new(docs)?)
        }
        Mode::Centroid => {
            let c = centroids.unwrap_or_else(|| default_centroids(tokens));
            let built = CentroidIndex::build(docs, c, seed)?;
            let probe = nprobe.unwrap_or_else(|| default_nprobe(c));
            Index::Centroid(built.with_nprobe(probe)?)
        }
    };
    let saved = index.save(out)?;
    let mut line = format!(
        "indexed {} documents, {} tokens, mode {}",
        saved.doc_count,
        saved.token_count,
        match mode {
            Mode::Exact => "exact",
            Mode::Centroid => "centroid",
        }
    );
    if let (Some(c), Some(n)) = (saved.n_centroids, saved.nprobe) {
        line.push_str(&format!(", centroids {c}, nprobe {n}"));
    }
    println!("{line}, build time {:.3}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn check_net(net: &MappingNetwork, m: &CorpusManifest) -> Result<()> {
    if net.d_v != m.d_v || net.d_l != m.d_l || net.n_vt != m.n_vt {
        return Err(usage(format!(
            "network shape (d_v {}, d_l {}, n_vt {}) does not match the manifest (d_v {}, d_l {}, n_vt {})",
            net.d_v, net.d_l, net.n_vt, m.d_v, m.d_l, m.n_vt
        )));
    }
    Ok(())
}

fn read_network(path: &Path) -> Result<MappingNetwork> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_network(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn search(
    index_dir: &Path,
    queries_dir: &Path,
    net_path: Option<&Path>,
    k: usize,
    nprobe: Option<usize>,
    out: &Path,
) -> Result<()> {
    let index =
        Index::load(index_dir).with_context(|| format!("loading index {}", index_dir.display()))?;
    if nprobe.is_some() && matches!(index, Index::Exact(_)) {
        return Err(usage("--nprobe applies to centroid indexes only"));
    }
    let corpus = Corpus::load(queries_dir)
        .with_context(|| format!("loading queries {}", queries_dir.display()))?;
    if corpus.queries.is_empty() {
        return Err(usage("the queries directory holds no queries"));
    }
    let visual = corpus.queries.iter().any(|q| q.global_feature.is_some());
    let net = match net_path {
        Some(p) => Some(read_network(p)?),
        None if visual => return Err(usage("queries carry image features; pass --net")),
        None => None,
    };
    if let Some(n) = &net {
        check_net(n, &corpus.manifest)?;
    }
    let opts = ComposeOptions {
        n_roi: corpus.manifest.n_roi,
        normalize_rows: corpus.manifest.normalize_rows,
    };
    let results = run_retrieval(&corpus.queries, &index, net.as_ref(), opts, k, nprobe)?;
    write_atomic(out, write_run(&results)?.as_bytes())?;
    match mean_top1(&results) {
        Some(m) => println!(
            "searched {} queries, mean top-1 score {m:.6}",
            results.len()
        ),
        None => println!("searched {} queries, no documents retrieved", results.len()),
    }
    Ok(())
}

fn train_align(pairs_dir: &Path, config: &Path, out: &Path, curve: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::parse(&read_text(config)?)?;
    let pairs = AlignedPairs::load(pairs_dir)
        .with_context(|| format!("loading pairs {}", pairs_dir.display()))?;
    let m = &pairs.manifest;
    let report = train_alignment(
        &pairs.features,
        &pairs.docs,
        &cfg,
        m.n_vt,
        m.normalize_rows,
        None,
    )?;
    write_atomic(out, &encode_network(&report.net)?)?;
    let curve = curve.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_atomic(&curve, report.loss_curve_csv().as_bytes())?;
    let last = report
        .losses
        .last()
        .map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!(
        "trained {} steps, final batch loss {last}",
        report.losses.len()
    );
    match report.final_recall() {
        Some(r) => println!("held-out Recall@1 {r:.4}"),
        None => println!("held-out Recall@1 n/a (holdout = 0)"),
    }
    Ok(())
}

/// Document texts keyed by id, from a corpus or index directory or a JSONL file.
fn load_doc_texts(path: &Path) -> Result<HashMap<String, String>> {
    let jsonl = if path.is_dir() {
        if path.join(MANIFEST_FILE).is_file() {
            let m = CorpusManifest::load(path)?;
            let rel = m
                .files
                .doc_meta
                .ok_or_else(|| usage(format!("{} lists no document texts", path.display())))?;
            path.join(rel)
        } else if path.join(INDEX_FILE).is_file() {
            path.join("docs.jsonl")
        } else {
            return Err(usage(format!(
                "{} is neither a corpus nor an index directory",
                path.display()
            )));
        }
    } else {
        path.to_path_buf()
    };
    let meta = parse_doc_meta(&read_text(&jsonl)?)?;
    Ok(meta
        .into_iter()
        .map(|d| (d.doc_id, d.text.unwrap_or_default()))
        .collect())
}

fn eval(
    run_path: &Path,
    answers_path: &Path,
    ks: &[usize],
    out: &Path,
    docs: Option<&Path>,
    policy: &str,
) -> Result<()> {
    let policy: MatchPolicy = policy.parse()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks must list positive integers"));
    }
    let results = parse_run(&read_text(run_path)?)
        .with_context(|| format!("parsing {}", run_path.display()))?;
    let answers = parse_answers(&read_text(answers_path)?)
        .with_context(|| format!("parsing {}", answers_path.display()))?;
    let records = join_run_answers(&results, &answers)?;
    if records.is_empty() {
        return Err(usage("the run file has no questions"));
    }
    let texts = docs.map(load_doc_texts).transpose()?;
    let report = evaluate(&records, texts.as_ref(), ks, policy)?;
    write_atomic(out, report.to_json().as_bytes())?;
    print!("{}", report.summary());
    if texts.is_none() {
        println!("PRRecall not computed (pass --docs)");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        if path.join(MANIFEST_FILE).is_file() {
            let m = CorpusManifest::load(path)?;
            print!("{}", m.to_toml());
            match m.kind {
                ManifestKind::Corpus => {
                    let c = Corpus::load(path)?;
                    let tokens: usize = c.docs.iter().map(|d| d.tokens.rows()).sum();
                    println!(
                        "# valid corpus: {} documents, {} tokens, {} queries, {} gold pairs, {} answer entries",
                        c.docs.len(),
                        tokens,
                        c.queries.len(),
                        c.gold.len(),
                        c.answers.len()
                    );
                }
                ManifestKind::Pairs => {
                    let p = AlignedPairs::load(path)?;
                    println!("# valid pair set: {} pairs", p.len());
                }
            }
            return Ok(());
        }
        if path.join(INDEX_FILE).is_file() {
            let m = IndexManifest::parse(&read_text(&path.join(INDEX_FILE))?)?;
            print!("{}", toml::to_string(&m)?);
            Index::load(path)?;
            println!("# valid index");
            return Ok(());
        }
        return Err(usage(format!(
            "{} has neither {MANIFEST_FILE} nor {INDEX_FILE}",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() >= 12 && bytes[..4] == MAGIC {
        let kind = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
        match kind {
            KIND_TOKENS => {
                let mats = decode_embeddings(&bytes)?;
                let rows: Vec<usize> = mats.iter().map(|m| m.rows()).collect();
                println!("token matrices: {}", mats.len());
                println!("width: {}", mats[0].dim());
                println!(
                    "rows: total {}, min {}, max {}",
                    rows.iter().sum::<usize>(),
                    rows.iter().min().unwrap_or(&0),
                    rows.iter().max().unwrap_or(&0)
                );
                println!(
                    "labels: {}",
                    if mats[0].labels().is_some() {
                        "yes"
                    } else {
                        "no"
                    }
                );
                let unit = mats.iter().all(|m| m.rows_are_unit_norm());
                println!("unit-norm rows: {}", if unit { "yes" } else { "no" });
            }
            KIND_NETWORK => {
                let n = decode_network(&bytes)?;
                println!(
                    "mapping network: d_v {}, hidden {}, n_vt {}, d_l {}",
                    n.d_v, n.hidden, n.n_vt, n.d_l
                );
                println!("parameters: {}", n.param_count());
            }
            KIND_POSTINGS => {
                let (postings, n_docs) = decode_postings(&bytes)?;
                let sizes: Vec<usize> = postings.iter().map(Vec::len).collect();
                println!(
                    "postings: {} centroids over {n_docs} documents",
                    postings.len()
                );
                println!(
                    "entries: total {}, min {}, max {}",
                    sizes.iter().sum::<usize>(),
                    sizes.iter().min().unwrap_or(&0),
                    sizes.iter().max().unwrap_or(&0)
                );
            }
            other => return Err(usage(format!("unknown section kind {other}"))),
        }
        return Ok(());
    }
    let text =
        String::from_utf8(bytes).map_err(|_| usage("not an FLMR file and not UTF-8 text"))?;
    let results =
        parse_run(&text).map_err(|e| usage(format!("not an FLMR file or run file: {e}")))?;
    let depth = results.iter().map(|r| r.k()).max().unwrap_or(0);
    println!(
        "run file: {} queries, up to {depth} documents each",
        results.len()
    );
    if let Some(m) = mean_top1(&results) {
        println!("mean top-1 score: {m:.6}");
    }
    Ok(())
}
