use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use enclip_core::evalkit::{synth_fixture, write_fixture, ApDenominator, SynthSpec};
use enclip_core::corpus::ingest_text;
use enclip_core::{write_store, Comparator, ModelSet, RankedResult};
use enclip_service::{handle_eval, handle_search, router, AppState, EvalRequest, HttpEncoder, SearchRequest};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "enclip", version, about = "Ensemble search over multiple embedding checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a text embedding file into a binary store.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        epoch: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        stores: StoreArgs,
        #[arg(long, env = "ENCLIP_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "ENCLIP_ENCODER_URL")]
        encoder_url: Option<String>,
        #[arg(long, env = "ENCLIP_IMAGES_DIR")]
        images_dir: Option<PathBuf>,
    },
    /// Run one query and print the ranked items.
    Query(QueryArgs),
    /// Evaluate the ensemble and every checkpoint on a query set.
    Eval(EvalArgs),
    /// Write a synthetic multi-checkpoint fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        items: usize,
        #[arg(long, default_value_t = 20)]
        groups: usize,
        #[arg(long, default_value_t = 5)]
        models: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        queries_per_group: usize,
    },
}

#[derive(Debug, Args)]
struct StoreArgs {
    /// Directory of .encb stores, or a single store file.
    #[arg(long, env = "ENCLIP_STORES")]
    stores: PathBuf,
}

impl StoreArgs {
    fn open(&self) -> Result<ModelSet> {
        let set = if self.stores.is_dir() {
            ModelSet::open_dir(&self.stores)
        } else {
            ModelSet::open(std::slice::from_ref(&self.stores))
        };
        set.with_context(|| format!("loading stores from {}", self.stores.display()))
    }
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long, default_value_t = 20)]
    topk: usize,
    #[arg(long, default_value_t = 4)]
    k_min: usize,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Comparator::default())]
    comparator: Comparator,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long, conflicts_with = "qvec_file", required_unless_present = "qvec_file")]
    text: Option<String>,
    /// JSON map of model id to vector, a query record, or a jsonl query file.
    #[arg(long)]
    qvec_file: Option<PathBuf>,
    /// Record to pick when --qvec-file holds several queries.
    #[arg(long, requires = "qvec_file")]
    query_id: Option<String>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[command(flatten)]
    rank: RankArgs,
    #[arg(long, env = "ENCLIP_ENCODER_URL")]
    encoder_url: Option<String>,
    /// Include projection and clustering diagnostics in --json output.
    #[arg(long)]
    diagnostics: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = ApDenominator::default())]
    denominator: ApDenominator,
    /// Ensemble list length; defaults to max(10, k).
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    rank: RankArgs,
    #[arg(long, env = "ENCLIP_ENCODER_URL")]
    encoder_url: Option<String>,
    #[arg(long)]
    json: bool,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest {
            input,
            model_id,
            epoch,
            out,
        } => {
            let matrix = ingest_text(&input, model_id.as_deref(), epoch)
                .with_context(|| format!("ingesting {}", input.display()))?;
            write_store(&matrix, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "wrote {} vectors of dim {} for {} (epoch {}) to {}",
                matrix.len(),
                matrix.dim(),
                matrix.model_id(),
                matrix.epoch(),
                out.display()
            );
            Ok(())
        }
        Command::Serve {
            stores,
            port,
            host,
            encoder_url,
            images_dir,
        } => {
            let set = stores.open()?;
            runtime()?.block_on(serve(set, &host, port, encoder_url, images_dir))
        }
        Command::Query(args) => query(args),
        Command::Eval(args) => eval(args),
        Command::Synth {
            out,
            seed,
            items,
            groups,
            models,
            dim,
            queries_per_group,
        } => {
            let spec = SynthSpec {
                items,
                groups,
                models,
                dim,
                queries_per_group,
                ..SynthSpec::default()
            };
            let fixture = synth_fixture(seed, &spec)?;
            write_fixture(&fixture, &out)?;
            eprintln!(
                "wrote {} stores, {} queries to {}",
                fixture.stores.len(),
                fixture.queries.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn serve(
    set: ModelSet,
    host: &str,
    port: u16,
    encoder_url: Option<String>,
    images_dir: Option<PathBuf>,
) -> Result<()> {
    tracing::info!(
        z = set.z(),
        dim = set.dim(),
        corpus_size = set.corpus_size(),
        encoder = encoder_url.as_deref().unwrap_or("none"),
        "store loaded"
    );
    let state = AppState::new(set, encoder_url.map(HttpEncoder::new), images_dir);
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .with_context(|| format!("binding {host}:{port}"))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn read_qvec_file(path: &Path, query_id: Option<&str>) -> Result<BTreeMap<String, Vec<f32>>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let from_value = |v: serde_json::Value| -> Result<BTreeMap<String, Vec<f32>>> {
        let v = match v {
            serde_json::Value::Object(mut obj) if obj.contains_key("vectors") => obj.remove("vectors").unwrap_or_default(),
            other => other,
        };
        serde_json::from_value(v).map_err(|e| anyhow!("{}: not a map of model id to vector: {e}", path.display()))
    };
    if let (Ok(v), None) = (serde_json::from_str::<serde_json::Value>(&raw), query_id) {
        return from_value(v);
    }
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        records.push(v);
    }
    let record = match query_id {
        Some(id) => records
            .into_iter()
            .find(|r| r.get("query_id").and_then(|q| q.as_str()) == Some(id))
            .ok_or_else(|| anyhow!("{}: no query with id {id:?}", path.display()))?,
        None if records.len() == 1 => records.pop().unwrap_or_default(),
        None => bail!("{} holds {} queries; pick one with --query-id", path.display(), records.len()),
    };
    from_value(record)
}

fn render_table(result: &RankedResult) -> String {
    let width = result.items.iter().map(|i| i.item_id.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<width$}  {:>9}  {:>14}", "rank", "item_id", "frequency", "weighted_score");
    for (rank, item) in result.items.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>9}  {:>14.4}",
            rank + 1,
            item.item_id,
            item.frequency,
            item.weighted_score
        );
    }
    out
}

fn query(args: QueryArgs) -> Result<()> {
    let set = args.stores.open()?;
    let query_vectors = args
        .qvec_file
        .as_deref()
        .map(|p| read_qvec_file(p, args.query_id.as_deref()))
        .transpose()?;
    let req = SearchRequest {
        text: args.text,
        query_vectors,
        top_k_per_model: args.rank.topk,
        n: args.n,
        k_min: args.rank.k_min,
        k_max: args.rank.k_max,
        seed: args.rank.seed,
        comparator: args.rank.comparator,
        include_diagnostics: args.diagnostics,
    };
    let encoder = args.encoder_url.map(HttpEncoder::new);
    let result = runtime()?.block_on(handle_search(Arc::new(set), encoder.as_ref(), req))?;
    if result.short {
        eprintln!("note: only {} distinct candidates for n = {}", result.items.len(), args.n);
    }
    let mut stdout = std::io::stdout().lock();
    if args.json {
        serde_json::to_writer_pretty(&mut stdout, &result)?;
        writeln!(stdout)?;
    } else {
        stdout.write_all(render_table(&result).as_bytes())?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let set = args.stores.open()?;
    let req = EvalRequest {
        queries: args.queries,
        qrels: args.qrels,
        k: args.k,
        denominator: args.denominator,
        comparator: args.rank.comparator,
        top_k_per_model: args.rank.topk,
        n: args.n,
        k_min: args.rank.k_min,
        k_max: args.rank.k_max,
        seed: args.rank.seed,
    };
    let encoder = args.encoder_url.map(HttpEncoder::new);
    let report = runtime()?.block_on(handle_eval(Arc::new(set), req, encoder.as_ref(), Arc::new(|_, _| {})))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut stdout = std::io::stdout().lock();
    if args.json {
        serde_json::to_writer_pretty(&mut stdout, &report)?;
        writeln!(stdout)?;
    } else {
        stdout.write_all(report.table().as_bytes())?;
    }
    Ok(())
}
