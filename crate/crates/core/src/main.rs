use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbcf::optimizer::GridPoint;
use cbcf::pipeline::{reproduce_tables, run_pipeline, ExperimentConfig, RunBundle, Target};
use cbcf::{Error, Result};

/// Cluster-gated collaborative filtering experiments.
#[derive(Debug, Parser)]
#[command(name = "cbcf", version, propagate_version = true)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the ratings file and report counts and sparsity.
    Ingest(RunArgs),
    /// Write the train/test split.
    Split(RunArgs),
    /// Build the similarity matrices.
    Similarity(RunArgs),
    /// Predict every test pair.
    Predict(RunArgs),
    /// Cluster users and write the validity report.
    Cluster(RunArgs),
    /// Score fixed thresholds (alpha/beta/gamma and/or threshold).
    Evaluate(RunArgs),
    /// Search the threshold grid for the proposed and baseline rules.
    Sweep(RunArgs),
    /// Run all experiment families and write the comparison tables.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Extra override as key=value (dotted path or leaf name).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(flatten)]
    fields: FieldOverrides,
}

/// One flag per config field; values are parsed as the field's type.
#[derive(Debug, Args, Default)]
struct FieldOverrides {
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// random_holdout or cold_start_mask.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    /// e.g. "[20, 30]".
    #[arg(long)]
    test_user_rating_range: Option<String>,
    /// e.g. "[3, 20]".
    #[arg(long)]
    retained_ratings_range: Option<String>,
    /// item_based or user_based.
    #[arg(long)]
    method: Option<String>,
    /// Neighborhood size.
    #[arg(long = "k")]
    k: Option<String>,
    /// spectral, fcm, or none.
    #[arg(long)]
    algorithm: Option<String>,
    /// Number of clusters.
    #[arg(long = "c")]
    c: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    kmeans_restarts: Option<String>,
    #[arg(long)]
    kmeans_max_iters: Option<String>,
    #[arg(long)]
    fuzzy_degree: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    delta_pref: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// f1, recall, or precision.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    precision_floor: Option<String>,
    #[arg(long)]
    recall_floor: Option<String>,
    #[arg(long)]
    grid_min: Option<String>,
    #[arg(long)]
    grid_max: Option<String>,
    #[arg(long)]
    grid_step: Option<String>,
    /// e.g. "[0.745, 0.72]".
    #[arg(long)]
    precision_levels: Option<String>,
    /// Tune on part of each user's test pairs, score on this held-out fraction.
    #[arg(long)]
    tuning_holdout: Option<String>,
}

impl FieldOverrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let text = [
            ("name", &self.name),
            ("dataset", &self.dataset),
            ("out", &self.out),
            ("cache", &self.cache),
            ("mode", &self.mode),
            ("test_fraction", &self.test_fraction),
            ("test_user_rating_range", &self.test_user_rating_range),
            ("retained_ratings_range", &self.retained_ratings_range),
            ("method", &self.method),
            ("k", &self.k),
            ("algorithm", &self.algorithm),
            ("c", &self.c),
            ("sigma", &self.sigma),
            ("kmeans_restarts", &self.kmeans_restarts),
            ("kmeans_max_iters", &self.kmeans_max_iters),
            ("fuzzy_degree", &self.fuzzy_degree),
            ("epsilon", &self.epsilon),
            ("max_iters", &self.max_iters),
            ("delta_pref", &self.delta_pref),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("threshold", &self.threshold),
            ("objective", &self.objective),
            ("precision_floor", &self.precision_floor),
            ("recall_floor", &self.recall_floor),
            ("grid_min", &self.grid_min),
            ("grid_max", &self.grid_max),
            ("grid_step", &self.grid_step),
            ("precision_levels", &self.precision_levels),
            ("tuning_holdout", &self.tuning_holdout),
        ];
        let mut out: Vec<(String, String)> =
            text.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        // paths and names are strings even when they look like numbers
        for (k, v) in out.iter_mut() {
            if matches!(k.as_str(), "name" | "dataset" | "out" | "cache") {
                *v = toml::Value::String(v.clone()).to_string();
            }
        }
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(j) = self.jobs {
            out.push(("jobs".into(), j.to_string()));
        }
        out
    }
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.fields.pairs();
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_overrides(&overrides),
        }
    }
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    /// Take dataset, seed, out and cache from this file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn describe(label: &str, p: Option<&GridPoint>) {
    match p {
        Some(p) => println!(
            "{label:<9} gamma={:<4} alpha={:<4} beta={:<4} precision={:.4} recall={:.4} f1={:.4}",
            p.gamma, p.alpha, p.beta, p.precision, p.recall, p.f1
        ),
        None => println!("{label:<9} no feasible point"),
    }
}

fn print_bundle(target: Target, b: &RunBundle) {
    if let Some(i) = &b.ingest {
        println!(
            "ratings={} users={} items={} sparsity={:.4} duplicates={}",
            i.ratings, i.users, i.items, i.sparsity, i.duplicates
        );
    }
    if let Some((test, train_only)) = b.split_users {
        if test > 0 {
            println!("cold-start test users={test} training-only users={train_only}");
        }
    }
    for (name, r) in &b.reports {
        println!(
            "{name:<9} tp={} fp={} fn={} tn={} precision={:.4} recall={:.4} f1={:.4}",
            r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn, r.precision, r.recall, r.f1
        );
    }
    if let Some(s) = &b.summary {
        describe("baseline", s.baseline.as_ref());
        if b.sweep.is_some() {
            describe("proposed", s.proposed.as_ref());
        }
        if let Some(h) = &s.held_out {
            for (label, r) in [("held-out baseline", &h.baseline), ("held-out proposed", &h.proposed)] {
                if let Some(r) = r {
                    println!("{label}: precision={:.4} recall={:.4} f1={:.4}", r.precision, r.recall, r.f1);
                }
            }
        }
    }
    let hits = b.stages.iter().filter(|s| s.cache_hit).count();
    println!("{}: done, {} cache hits, outputs in {}", target.as_str(), hits, b.out.display());
}

fn run(cli: Cli) -> Result<()> {
    let target = match &cli.command {
        Command::Ingest(_) => Target::Ingest,
        Command::Split(_) => Target::Split,
        Command::Similarity(_) => Target::Similarity,
        Command::Predict(_) => Target::Predict,
        Command::Cluster(_) => Target::Cluster,
        Command::Evaluate(_) => Target::Evaluate,
        Command::Sweep(_) => Target::Sweep,
        Command::Reproduce(args) => return reproduce(args),
    };
    let (Command::Ingest(args)
    | Command::Split(args)
    | Command::Similarity(args)
    | Command::Predict(args)
    | Command::Cluster(args)
    | Command::Evaluate(args)
    | Command::Sweep(args)) = &cli.command
    else {
        unreachable!("reproduce handled above")
    };
    let cfg = args.load()?;
    let bundle = run_pipeline(&cfg, target)?;
    print_bundle(target, &bundle);
    Ok(())
}

fn reproduce(args: &ReproduceArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => Some(ExperimentConfig::load(path, &[])?),
        None => None,
    };
    let dataset = args
        .dataset
        .clone()
        .or_else(|| base.as_ref().map(|c| c.dataset.clone()))
        .ok_or_else(|| Error::Config("reproduce needs --dataset or --config".into()))?;
    if !dataset.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", dataset.display())));
    }
    let seed = args.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0);
    let out = args
        .out
        .clone()
        .or_else(|| base.as_ref().map(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out/reproduce"));
    let cache = args.cache.clone().or_else(|| base.as_ref().and_then(|c| c.cache.clone()));
    let go = || reproduce_tables(&dataset, seed, &out, cache.as_deref());
    let repro = match args.jobs {
        Some(0) => return Err(Error::Config("jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(go)?,
        None => go()?,
    };
    for f in &repro.families {
        println!("{}", f.name);
        describe("  baseline", f.baseline.as_ref());
        describe("  proposed", f.proposed.as_ref());
        if f.test_users > 0 {
            println!("  test users={} training-only users={}", f.test_users, f.training_only_users);
        }
    }
    println!("tables written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
