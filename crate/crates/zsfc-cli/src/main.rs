//! `zsfc` — the complementary-item pipeline as a command line.
//!
//! Subcommands cover the full loop: `synth` writes a synthetic world,
//! `sample` mines a training dataset from interaction logs, `train`
//! produces a checkpoint, `eval`/`ablate`/`bench` measure it, and
//! `recommend` ranks complements for a single item ad hoc.
//!
//! All randomness flows from `--seed` through named sub-streams, so any
//! pipeline invocation is bit-reproducible given the same seed and
//! `--threads 1` (training is reproducible at any thread count).
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors. Machine-readable output: `--json` switches stdout to JSON.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::json;

use zsfc::eval::{
    bench_rank, evaluate, run_ablation, AblationEntry, CfModel, EvalReport, ModelRecommender,
};
use zsfc::model::checkpoint;
use zsfc::sampler::{
    build_cooccurrence, build_dataset, corpus_end, load_interactions, read_dataset,
    split_by_time, write_dataset, EventKind, SamplerConfig, TrainingExample, UserHistory,
};
use zsfc::synth::{generate_histories, generate_world, write_world, WorldConfig};
use zsfc::training::{train, TrainConfig};
use zsfc::{load_catalog, Catalog, ItemId, ModelVariant};

#[derive(Parser)]
#[command(name = "zsfc", version, about = "Complementary-item recommendation pipeline")]
struct Cli {
    /// Master seed; every random stream in every stage derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = one per core). `--threads 1` is the
    /// single-threaded reference mode.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Print reports as JSON instead of human-readable tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: catalog, hierarchy, negative pairs,
    /// and an interaction log with planted complementary structure.
    Synth(SynthArgs),
    /// Mine (context, base, target) examples from an interaction log.
    Sample(SampleArgs),
    /// Train a model on a mined dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score a held-out dataset with a checkpoint or the co-occurrence
    /// baseline.
    Eval(EvalArgs),
    /// Train and evaluate every model variant under identical settings.
    Ablate(AblateArgs),
    /// Measure full-catalog ranking latency for a checkpoint.
    Bench(BenchArgs),
    /// Rank complementary items for one base item.
    Recommend(RecommendArgs),
}

/// The three catalog input files, shared by every data-driven subcommand.
#[derive(Args)]
struct CatalogArgs {
    /// Catalog TSV: `item_key <TAB> category_key [<TAB> f1,f2,…]`.
    #[arg(long)]
    catalog: PathBuf,
    /// Hierarchy TSV: `category_key <TAB> parent_key_or_ROOT`.
    #[arg(long)]
    hierarchy: PathBuf,
    /// Negative category pairs TSV: `category_key <TAB> category_key`.
    #[arg(long)]
    negative_pairs: PathBuf,
}

impl CatalogArgs {
    fn load(&self) -> Result<Catalog> {
        Ok(load_catalog(&self.catalog, &self.hierarchy, &self.negative_pairs)?)
    }
}

/// Training hyperparameters, shared by `train` and `ablate`.
#[derive(Args)]
struct HyperArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Sampled negatives per example (at most catalog size − 2).
    #[arg(long, default_value_t = 2048)]
    negatives: usize,
    #[arg(long, default_value_t = 5e-4)]
    learning_rate: f64,
}

impl HyperArgs {
    fn config(&self, variant: ModelVariant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            dim: self.dim,
            epochs: self.epochs,
            batch_size: self.batch_size,
            negatives: self.negatives,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving catalog.tsv, hierarchy.tsv,
    /// negative_pairs.tsv, and interactions.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 40)]
    categories: usize,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    /// Base clicks per user; purchases add more events on top.
    #[arg(long, default_value_t = 20)]
    events_per_user: usize,
    /// Length of the generated log in days.
    #[arg(long, default_value_t = 9)]
    days: u32,
    /// Fraction of purchases that follow a planted complement.
    #[arg(long, default_value_t = 0.8)]
    affinity: f64,
    /// Image feature dimension.
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    /// Number of category pairs excluded from the complementary relation.
    #[arg(long, default_value_t = 20)]
    negative_pairs: usize,
}

#[derive(Args)]
#[command(group = ArgGroup::new("outputs")
    .required(true)
    .multiple(true)
    .args(["out", "train_out", "test_out"]))]
struct SampleArgs {
    /// Interaction log TSV:
    /// `user <TAB> unix_seconds <TAB> click|order <TAB> item_key`.
    #[arg(long)]
    interactions: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Write the full dataset here (JSONL).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every example before the log's final calendar day here.
    #[arg(long)]
    train_out: Option<PathBuf>,
    /// Write the final-day examples here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Click-context cap per example.
    #[arg(long, default_value_t = 15)]
    max_clicks: usize,
    /// Order-context cap per example.
    #[arg(long, default_value_t = 5)]
    max_orders: usize,
    #[arg(long, default_value_t = 9)]
    click_window_days: i64,
    #[arg(long, default_value_t = 90)]
    order_window_days: i64,
    /// Candidate window after each base click, in seconds.
    #[arg(long, default_value_t = 3600)]
    lookahead_secs: i64,
    /// How soon the target must be bought, in seconds.
    #[arg(long, default_value_t = 86400)]
    purchase_horizon_secs: i64,
    /// Keep only targets among the base's top-N co-occurring items.
    #[arg(long, default_value_t = 200)]
    top_n: usize,
}

impl SampleArgs {
    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            max_clicks: self.max_clicks,
            max_orders: self.max_orders,
            click_window_secs: self.click_window_days * 86_400,
            order_window_secs: self.order_window_days * 86_400,
            lookahead_secs: self.lookahead_secs,
            purchase_horizon_secs: self.purchase_horizon_secs,
            top_n: self.top_n,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSONL from `sample`).
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Model variant: stamp, stamp-orders, stamp-category, stamp-image,
    /// or zsfc.
    #[arg(long, default_value = "zsfc")]
    variant: ModelVariant,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
#[command(group = ArgGroup::new("scorer").required(true).args(["checkpoint", "cf"]))]
struct EvalArgs {
    /// Held-out dataset (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Evaluate this model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate the co-occurrence baseline instead of a model.
    #[arg(long, requires = "interactions")]
    cf: bool,
    /// Interaction log backing the baseline's co-occurrence matrix.
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Recommendation list length.
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    /// Also write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    train_dataset: PathBuf,
    /// Held-out dataset (JSONL).
    #[arg(long)]
    test_dataset: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Also write the ablation table here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint to serve.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Dataset (JSONL) supplying ranking requests, first `--requests`
    /// examples.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    /// Ranked-list length per request.
    #[arg(short, long, default_value_t = 80)]
    k: usize,
    /// Also write the latency report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    /// Base item key to find complements for.
    #[arg(long)]
    base: String,
    /// Interaction log (TSV) supplying the session context.
    #[arg(long)]
    user_log: Option<PathBuf>,
    /// User id to read from --user-log when it holds several users.
    #[arg(long)]
    user: Option<u64>,
    #[command(flatten)]
    catalog: CatalogArgs,
    /// Model checkpoint to serve.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Recommendation list length.
    #[arg(short, long, default_value_t = 5)]
    k: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version are successful exits; bad usage is not.
            use clap::error::ErrorKind;
            let ok = matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = err.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    if cli.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
        if let Err(err) = pool {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => run_synth(cli, args),
        Command::Sample(args) => run_sample(cli, args),
        Command::Train(args) => run_train(cli, args),
        Command::Eval(args) => run_eval(cli, args),
        Command::Ablate(args) => run_ablate(cli, args),
        Command::Bench(args) => run_bench(cli, args),
        Command::Recommend(args) => run_recommend(cli, args),
    }
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let config = WorldConfig {
        n_items: args.items,
        n_categories: args.categories,
        n_users: args.users,
        events_per_user: args.events_per_user,
        days: args.days,
        affinity: args.affinity,
        feature_dim: args.feature_dim,
        negative_pairs: args.negative_pairs,
        seed: cli.seed,
    };
    let world = generate_world(&config)?;
    let histories = generate_histories(&world, &config);
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_world(&world, &histories, &args.out_dir)?;
    let events: usize = histories.iter().map(|h| h.events.len()).sum();
    if cli.json {
        println!(
            "{}",
            json!({
                "dir": args.out_dir,
                "items": config.n_items,
                "categories": config.n_categories,
                "users": config.n_users,
                "events": events,
            })
        );
    } else {
        println!(
            "wrote {} items / {} categories / {} users / {events} events to {}",
            config.n_items,
            config.n_categories,
            config.n_users,
            args.out_dir.display()
        );
    }
    Ok(())
}

fn run_sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let histories = load_interactions(&args.interactions, &catalog)?;
    let config = args.sampler_config();
    let (examples, _matrix) = build_dataset(&histories, &catalog, &config);
    if let Some(path) = &args.out {
        write_dataset(path, &examples)?;
    }
    let mut split_sizes = None;
    if args.train_out.is_some() || args.test_out.is_some() {
        let end = corpus_end(&histories)
            .ok_or_else(|| anyhow!("{}: no events to split", args.interactions.display()))?;
        let (train_set, test_set) = split_by_time(examples.clone(), end);
        if let Some(path) = &args.train_out {
            write_dataset(path, &train_set)?;
        }
        if let Some(path) = &args.test_out {
            write_dataset(path, &test_set)?;
        }
        split_sizes = Some((train_set.len(), test_set.len()));
    }
    if cli.json {
        println!(
            "{}",
            json!({
                "users": histories.len(),
                "examples": examples.len(),
                "train_examples": split_sizes.map(|s| s.0),
                "test_examples": split_sizes.map(|s| s.1),
            })
        );
    } else {
        print!("mined {} examples from {} users", examples.len(), histories.len());
        if let Some((train, test)) = split_sizes {
            print!(" (split: {train} train / {test} test)");
        }
        println!();
    }
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let dataset = read_dataset(&args.dataset)?;
    let config = args.hyper.config(args.variant, cli.seed);
    let json = cli.json;
    let mut final_loss = None;
    let params = train::<f32>(&dataset, &catalog, &config, |stats| {
        if json {
            println!("{}", serde_json::to_string(stats).expect("epoch stats serialize"));
        } else {
            println!(
                "epoch {}/{}  loss {:.6}  ({} examples)",
                stats.epoch + 1,
                config.epochs,
                stats.mean_loss,
                stats.examples
            );
        }
        final_loss = Some(stats.mean_loss);
    })?;
    checkpoint::save(&params, &args.out)?;
    if json {
        println!(
            "{}",
            json!({
                "checkpoint": args.out,
                "variant": args.variant,
                "final_loss": final_loss,
            })
        );
    } else {
        println!("wrote {} checkpoint to {}", args.variant, args.out.display());
    }
    Ok(())
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let testset = read_dataset(&args.dataset)?;
    let (label, report) = if let Some(ckpt) = &args.checkpoint {
        let params = checkpoint::load(ckpt)?;
        let recommender = ModelRecommender::new(&params, &catalog)?;
        (params.variant.name(), evaluate(&recommender, &testset, args.k)?)
    } else {
        let interactions = args.interactions.as_ref().expect("clap enforces --interactions");
        let histories = load_interactions(interactions, &catalog)?;
        let matrix = build_cooccurrence(&histories, catalog.len());
        let cf = CfModel::new(&catalog, &matrix)?;
        ("cf", evaluate(&cf, &testset, args.k)?)
    };
    if let Some(path) = &args.out {
        write_json(path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    if cli.json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!("model            {label}");
        print_report(&report);
    }
    Ok(())
}

fn run_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let train_set = read_dataset(&args.train_dataset)?;
    let test_set = read_dataset(&args.test_dataset)?;
    // The harness swaps the variant in itself; any placeholder works.
    let config = args.hyper.config(ModelVariant::Zsfc, cli.seed);
    let entries = run_ablation(&train_set, &test_set, &catalog, &config, args.k)?;
    if let Some(path) = &args.out {
        write_json(path, serde_json::to_string_pretty(&entries).expect("entries serialize"))?;
    }
    if cli.json {
        println!("{}", serde_json::to_string(&entries).expect("entries serialize"));
    } else {
        print_ablation(&entries, args.k);
    }
    Ok(())
}

fn run_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let params = checkpoint::load(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let requests = &dataset[..dataset.len().min(args.requests)];
    let run = bench_rank(&params, &catalog, requests, args.k)?;
    if let Some(path) = &args.out {
        write_json(path, serde_json::to_string_pretty(&run.report).expect("report serializes"))?;
    }
    if cli.json {
        println!("{}", serde_json::to_string(&run.report).expect("report serializes"));
    } else {
        let r = &run.report;
        println!("{} requests over {} items, top {}", r.requests, r.catalog_size, r.k);
        println!("p50  {:>9.3} ms", r.p50_ms);
        println!("p99  {:>9.3} ms", r.p99_ms);
        println!("mean {:>9.3} ms", r.mean_ms);
    }
    Ok(())
}

fn run_recommend(cli: &Cli, args: &RecommendArgs) -> Result<()> {
    let catalog = args.catalog.load()?;
    let params = checkpoint::load(&args.checkpoint)?;
    let base = catalog
        .resolve(&args.base)
        .ok_or_else(|| anyhow!("unknown item key `{}`", args.base))?;
    let (user, clicks, orders) = match &args.user_log {
        Some(path) => session_context(path, &catalog, args.user)?,
        None => (0, vec![], vec![]),
    };
    // Only the context and base matter for serving; the target field is
    // a training-time label and never read here.
    let request = TrainingExample {
        user,
        base,
        target: base,
        base_time: 0,
        clicks,
        orders,
        ordered_within_day: false,
    };
    let recommender = ModelRecommender::new(&params, &catalog)?;
    let ranked = recommender.rank(&request, args.k, true)?;
    if cli.json {
        let rows: Vec<_> = ranked
            .iter()
            .enumerate()
            .map(|(i, (item, score))| {
                json!({
                    "rank": i + 1,
                    "item": catalog.key(*item).expect("ranked ids are valid"),
                    "category": category_key(&catalog, *item),
                    "score": score,
                })
            })
            .collect();
        println!("{}", serde_json::to_string(&rows).expect("rows serialize"));
    } else {
        println!("complements of {} (top {}):", args.base, args.k);
        for (i, (item, score)) in ranked.iter().enumerate() {
            println!(
                "{:>3}. {:<24} {:<16} {score:.6}",
                i + 1,
                catalog.key(*item).expect("ranked ids are valid"),
                category_key(&catalog, *item),
            );
        }
    }
    Ok(())
}

/// Most recent clicks and orders of one user in `path`, oldest first,
/// capped and windowed exactly like the training sampler.
fn session_context(
    path: &PathBuf,
    catalog: &Catalog,
    user: Option<u64>,
) -> Result<(u64, Vec<ItemId>, Vec<ItemId>)> {
    let histories = load_interactions(path, catalog)?;
    let history: &UserHistory = match user {
        Some(id) => histories
            .iter()
            .find(|h| h.user == id)
            .ok_or_else(|| anyhow!("user {id} not present in {}", path.display()))?,
        None => match histories.len() {
            1 => &histories[0],
            n => bail!("{} holds {n} users; pick one with --user", path.display()),
        },
    };
    let now = history
        .events
        .last()
        .map(|e| e.timestamp + 1)
        .unwrap_or_default();
    let config = SamplerConfig::default();
    let recent = |kind: EventKind, window: i64, cap: usize| -> Vec<ItemId> {
        let hits: Vec<ItemId> = history
            .events
            .iter()
            .filter(|e| e.kind == kind && e.timestamp >= now - window && e.timestamp < now)
            .map(|e| e.item)
            .collect();
        hits[hits.len().saturating_sub(cap)..].to_vec()
    };
    Ok((
        history.user,
        recent(EventKind::Click, config.click_window_secs, config.max_clicks),
        recent(EventKind::Order, config.order_window_secs, config.max_orders),
    ))
}

fn category_key<'c>(catalog: &'c Catalog, item: ItemId) -> &'c str {
    catalog
        .category_of(item)
        .ok()
        .and_then(|c| catalog.hierarchy.key(c))
        .unwrap_or("?")
}

fn print_report(report: &EvalReport) {
    println!("examples         {}", report.n_total);
    println!("recall@{:<8} {:.4}", report.k, report.recall_at_k);
    match report.order_recall_at_k {
        Some(r) => println!(
            "order-recall@{:<2} {:.4}  ({} ordered examples)",
            report.k, r, report.n_ordered
        ),
        None => println!("order-recall@{:<2} —       (no ordered examples)", report.k),
    }
}

fn print_ablation(entries: &[AblationEntry], k: usize) {
    println!(
        "{:<16} {:>10} {:>16} {:>12}",
        "variant",
        format!("recall@{k}"),
        format!("order-recall@{k}"),
        "final-loss"
    );
    for entry in entries {
        let order = entry
            .report
            .order_recall_at_k
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "—".into());
        let loss = entry
            .final_train_loss
            .map(|l| format!("{l:.4}"))
            .unwrap_or_else(|| "—".into());
        println!(
            "{:<16} {:>10.4} {:>16} {:>12}",
            entry.variant.name(),
            entry.report.recall_at_k,
            order,
            loss
        );
    }
}

fn write_json(path: &PathBuf, body: String) -> Result<()> {
    fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))
}
