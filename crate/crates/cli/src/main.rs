//! `redist-smc` command-line tool.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use redist_smc::calibrate::calibrate;
use redist_smc::config::RunConfig;
use redist_smc::constraint::{plan_from_map, Constraint, ConstraintRegistry};
use redist_smc::enumerate::{enumerate_partitions, reweight_reference, ReferenceSet, DEFAULT_CAP};
use redist_smc::io::{
    ensemble_stats, read_ensemble, summarize, write_ensemble, write_stats_csv, Quantiles,
    RunManifest,
};
use redist_smc::metrics::{
    district_shares, gerrymandering_index, grouped_deviations, normalized_weights, pairwise_vi,
    plan_stats, rank_means, rank_medians, PlanStats,
};
use redist_smc::sampler::{registry, SampleRun};
use redist_smc::smc::{KSchedule, Truncation};
use redist_smc::ust::tree_sampler;
use redist_smc::{Graph, Labeling, Plan};

#[derive(Parser, Debug)]
#[command(name = "redist-smc", version, about = "Sample redistricting plans")]
struct Cli {
    /// Worker threads; all cores when omitted. Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a weighted ensemble with sequential Monte Carlo.
    Sample(RunArgs),
    /// Run merge-split Markov chains.
    Mcmc(McmcArgs),
    /// List every balanced connected plan of a small graph.
    Enumerate(EnumerateArgs),
    /// Compare an ensemble with an enumerated reference set.
    Calibrate(CalibrateArgs),
    /// Summary tables for an ensemble and comparison plans.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Graph JSON (`nodes` and `edges`).
    #[arg(long)]
    graph: PathBuf,
    /// Run configuration, JSON or TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    districts: Option<usize>,
    #[arg(long)]
    pop_tol: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `auto`, `auto(THRESHOLD,TREES)` or a comma separated list per stage.
    #[arg(long)]
    k: Option<KSchedule>,
    /// `none`, a fixed cap, or `S^a/c`.
    #[arg(long)]
    trunc: Option<Truncation>,
    /// Administrative level, coarsest first; repeat for nested levels.
    #[arg(long = "admin-level")]
    admin_level: Vec<String>,
    /// Resample once more by the final weights.
    #[arg(long)]
    final_resample: bool,
    /// Node attributes holding the two vote counts, `A,B`.
    #[arg(long)]
    votes: Option<String>,
}

#[derive(Args, Debug)]
struct McmcArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Eligible cut edges per proposal; all tree edges when omitted.
    #[arg(long = "mcmc-k")]
    mcmc_k: Option<usize>,
}

#[derive(Args, Debug)]
struct EnumerateArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    districts: usize,
    #[arg(long)]
    pop_tol: f64,
    #[arg(long = "admin-level")]
    admin_level: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: u64,
    /// Reference set NDJSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Ensemble NDJSON from `sample` or `mcmc`.
    #[arg(long)]
    ensemble: PathBuf,
    /// Reference set NDJSON from `enumerate`.
    #[arg(long)]
    reference: PathBuf,
    /// Run configuration supplying rho, levels and constraints.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long = "admin-level")]
    admin_level: Vec<String>,
    /// `rem`, `dev` or `log_tau`.
    #[arg(long, default_value = "rem")]
    statistic: String,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    ensemble: PathBuf,
    /// Comparison plan, JSON object of node id to 1-based district.
    #[arg(long)]
    plan: Vec<PathBuf>,
    #[arg(long = "admin-level")]
    admin_level: Vec<String>,
    /// Node attributes holding the two vote counts, `A,B`.
    #[arg(long)]
    votes: Option<String>,
    /// Rank groups for grouped deviations, e.g. `1-3,4-6`.
    #[arg(long)]
    groups: Option<String>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Missing input files exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let missing = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
            || matches!(
                e.downcast_ref::<redist_smc::Error>(),
                Some(redist_smc::Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound
            )
    });
    if missing {
        2
    } else {
        1
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use redist_smc::Error as E;
    for e in err.chain() {
        if let Some(e) = e.downcast_ref::<E>() {
            return match e {
                E::DuplicateNode(_)
                | E::UnknownNode(_)
                | E::SelfLoop(_)
                | E::InvalidPopulation { .. }
                | E::Disconnected
                | E::MissingUnit { .. }
                | E::NotNested { .. }
                | E::DisconnectedUnit { .. } => "invalid_graph",
                E::InvalidPlan(_) => "invalid_plan",
                E::InvalidParameter(_) => "invalid_parameter",
                E::InfeasibleBounds { .. } => "infeasible_bounds",
                E::StageStarved { .. } => "stage_starved",
                E::DegenerateWeights(_) => "degenerate_weights",
                E::CapExceeded(_) | E::TooManyNodes(_) => "enumeration_limit",
                E::EmptySupport(_) => "empty_support",
                E::UnknownStrategy { .. } | E::Config(_) => "config",
                E::Io(_) => "io",
                E::Json(_) => "json",
            };
        }
        if e.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "other"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = json!({"error": error_kind(&err), "message": format!("{err:#}")});
            eprintln!("{record}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
    }
    match cli.command {
        Command::Sample(args) => cmd_run("sample", "smc", &args, |_| {}, cli.threads),
        Command::Mcmc(args) => cmd_run(
            "mcmc",
            "merge-split",
            &args.run,
            |c| {
                if let Some(v) = args.iterations {
                    c.iterations = v;
                }
                if let Some(v) = args.burn_in {
                    c.burn_in = v;
                }
                if let Some(v) = args.thin {
                    c.thin = v;
                }
                if let Some(v) = args.chains {
                    c.chains = v;
                }
                if args.mcmc_k.is_some() {
                    c.mcmc_k = args.mcmc_k;
                }
            },
            cli.threads,
        ),
        Command::Enumerate(args) => with_pool(cli.threads, || cmd_enumerate(&args)),
        Command::Calibrate(args) => with_pool(cli.threads, || cmd_calibrate(&args)),
        Command::Analyze(args) => with_pool(cli.threads, || cmd_analyze(&args)),
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .context("building thread pool")?
            .install(f),
    }
}

fn load_graph(path: &Path) -> Result<Graph> {
    let file = File::open(path).with_context(|| format!("opening graph {}", path.display()))?;
    Graph::from_reader(BufReader::new(file)).with_context(|| format!("reading graph {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
    }
}

fn labeling_for(graph: &Graph, levels: &[String]) -> Result<Option<Arc<Labeling>>> {
    if levels.is_empty() {
        return Ok(None);
    }
    Ok(Some(Arc::new(Labeling::from_graph(graph, levels)?)))
}

fn parse_votes(votes: Option<&str>) -> Result<Option<(String, String)>> {
    let Some(v) = votes else { return Ok(None) };
    match v.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(Some((a.trim().into(), b.trim().into()))),
        _ => bail!("--votes expects two attribute names `A,B`, got `{v}`"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_run(
    command: &str,
    sampler: &str,
    args: &RunArgs,
    extra: impl FnOnce(&mut RunConfig),
    threads: Option<usize>,
) -> Result<()> {
    let started = Instant::now();
    let graph = load_graph(&args.graph)?;
    let mut config = load_config(args.config.as_deref())?;
    if args.config.is_none() {
        config.sampler = sampler.into();
    }
    if config.sampler != sampler {
        bail!("config selects sampler `{}` but `{command}` runs `{sampler}`", config.sampler);
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                config.$field = v;
            }
        )*};
    }
    set!(seed, particles, districts, pop_tol, rho, alpha, k);
    if let Some(t) = args.trunc {
        config.truncation = t;
    }
    if !args.admin_level.is_empty() {
        config.levels = args.admin_level.clone();
    }
    if args.final_resample {
        config.final_resample = true;
    }
    if threads.is_some() {
        config.threads = threads;
    }
    extra(&mut config);

    let labeling = labeling_for(&graph, &config.levels)?;
    let constraint = ConstraintRegistry::default().build(&config.constraint, &graph)?;
    let trees = tree_sampler(config.tree_sampler_name(), labeling.clone())?;
    let votes = parse_votes(args.votes.as_deref())?;

    let run = with_pool(threads, || {
        Ok(registry()
            .get(&config.sampler)?
            .run(&graph, &config, &constraint, trees.as_ref())?)
    })?;
    let stats = with_pool(threads, || {
        Ok(ensemble_stats(
            &graph,
            &run.plans,
            labeling.as_deref(),
            votes.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        )?)
    })?;
    let summary = summarize(&run.plans, &run.log_weights, &stats)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ensemble_path = args.out.join("ensemble.ndjson");
    let stats_path = args.out.join("stats.csv");
    let summary_path = args.out.join("summary.json");
    let manifest_path = args.out.join("manifest.json");

    let mut w = create(&ensemble_path)?;
    write_ensemble(&graph, &run, &mut w)?;
    w.flush()?;
    let mut w = create(&stats_path)?;
    write_stats_csv(&stats, &run.log_weights, &mut w)?;
    w.flush()?;
    write_json(&summary_path, &summary)?;

    let mut manifest = RunManifest::new(command, &config);
    manifest.inputs.insert("graph".into(), args.graph.display().to_string());
    if let Some(c) = &args.config {
        manifest.inputs.insert("config".into(), c.display().to_string());
    }
    for (k, p) in [
        ("ensemble", &ensemble_path),
        ("stats", &stats_path),
        ("summary", &summary_path),
    ] {
        manifest.outputs.insert(k.into(), p.display().to_string());
    }
    manifest.diagnostics = run.diagnostics.clone();
    manifest.seconds = started.elapsed().as_secs_f64();
    write_json(&manifest_path, &manifest)?;

    log::info!(
        "{} plans, {} unique, ESS {:.1}, {:.2}s",
        summary.plans,
        summary.unique_plans,
        summary.ess,
        manifest.seconds
    );
    println!(
        "{}",
        json!({"plans": summary.plans, "unique_plans": summary.unique_plans, "ess": summary.ess, "out": args.out})
    );
    Ok(())
}

fn cmd_enumerate(args: &EnumerateArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let mut refset = enumerate_partitions(&graph, args.districts, args.pop_tol, args.cap)?;
    if let Some(labeling) = labeling_for(&graph, &args.admin_level)? {
        refset.annotate(&graph, &labeling);
    }
    let mut w = create(&args.out)?;
    refset.write_ndjson(&graph, &mut w)?;
    w.flush()?;
    println!("{}", json!({"plans": refset.len(), "out": args.out}));
    Ok(())
}

fn read_run(graph: &Graph, path: &Path, districts: Option<usize>) -> Result<SampleRun> {
    let file = File::open(path).with_context(|| format!("opening ensemble {}", path.display()))?;
    read_ensemble(graph, BufReader::new(file), districts)
        .with_context(|| format!("reading ensemble {}", path.display()))
}

fn statistic_of(name: &str, s: &PlanStats) -> Result<f64> {
    Ok(match name {
        "rem" => s.rem,
        "dev" => s.dev,
        "log_tau" => s.log_tau,
        other => match other.strip_prefix("spl_").and_then(|l| s.spl.get(l)) {
            Some(v) => *v as f64,
            None => bail!("unknown statistic `{other}`; use rem, dev, log_tau or spl_LEVEL"),
        },
    })
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let file = File::open(&args.reference)
        .with_context(|| format!("opening reference set {}", args.reference.display()))?;
    let refset = ReferenceSet::read_ndjson(&graph, BufReader::new(file))?;
    let run = read_run(&graph, &args.ensemble, Some(refset.districts))?;

    let config = load_config(args.config.as_deref())?;
    let rho = args.rho.unwrap_or(config.rho);
    let levels = if args.admin_level.is_empty() {
        config.levels.clone()
    } else {
        args.admin_level.clone()
    };
    let labeling = labeling_for(&graph, &levels)?;
    let constraint: Constraint = ConstraintRegistry::default().build(&config.constraint, &graph)?;
    let target = reweight_reference(&refset, &graph, rho, &constraint, labeling.as_deref())?;

    let ref_stats: Vec<PlanStats> = refset
        .plans
        .iter()
        .map(|p| PlanStats {
            dev: p.dev,
            rem: p.rem,
            spl: p.spl.clone(),
            log_tau: p.log_tau,
            shares: None,
        })
        .collect();
    let sample_stats = ensemble_stats(&graph, &run.plans, labeling.as_deref(), None)?;
    let ref_values = ref_stats
        .iter()
        .map(|s| statistic_of(&args.statistic, s))
        .collect::<Result<Vec<_>>>()?;
    let sample_values = sample_stats
        .iter()
        .map(|s| statistic_of(&args.statistic, s))
        .collect::<Result<Vec<_>>>()?;
    let report = calibrate(
        &refset,
        &target,
        &run.plans,
        &run.log_weights,
        &args.statistic,
        &ref_values,
        &sample_values,
        args.bins,
        args.seed,
    )?;
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if report.flagged {
        log::warn!(
            "TV {:.4} exceeds band {:.4} or mass {:.4} fell outside the reference set",
            report.tv,
            report.tv_band,
            report.outside_mass
        );
    }
    Ok(())
}

fn parse_groups(spec: &str) -> Result<Vec<Vec<usize>>> {
    spec.split(',')
        .map(|g| {
            let g = g.trim();
            let (a, b) = g.split_once('-').unwrap_or((g, g));
            let a: usize = a.trim().parse().with_context(|| format!("bad group `{g}`"))?;
            let b: usize = b.trim().parse().with_context(|| format!("bad group `{g}`"))?;
            if a == 0 || b < a {
                bail!("group `{g}` must be a 1-based rank range");
            }
            Ok((a - 1..b).collect())
        })
        .collect()
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let run = read_run(&graph, &args.ensemble, None)?;
    let labeling = labeling_for(&graph, &args.admin_level)?;
    let votes = parse_votes(args.votes.as_deref())?;
    let votes_ref = votes.as_ref().map(|(a, b)| (a.as_str(), b.as_str()));
    let stats = ensemble_stats(&graph, &run.plans, labeling.as_deref(), votes_ref)?;
    let summary = summarize(&run.plans, &run.log_weights, &stats)?;
    let weights = normalized_weights(&run.log_weights);

    let vi = pairwise_vi(&graph, &run.plans);
    let mut report = json!({
        "summary": summary,
        "pairwise_vi": Quantiles::of(&vi, &vec![1.0; vi.len()]),
    });

    let shares: Option<Vec<Vec<f64>>> = stats.iter().map(|s| s.shares.clone()).collect();
    let (means, medians) = match &shares {
        Some(sh) => (
            Some(rank_means(sh, Some(&weights))?),
            Some(rank_medians(sh, Some(&weights))?),
        ),
        None => (None, None),
    };
    if let (Some(m), Some(md)) = (&means, &medians) {
        report["rank_means"] = json!(m);
        report["rank_medians"] = json!(md);
    }
    let groups = args.groups.as_deref().map(parse_groups).transpose()?;

    let mut compared = BTreeMap::new();
    for path in &args.plan {
        let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?;
        let map = value
            .as_object()
            .with_context(|| format!("plan {} must be a JSON object", path.display()))?;
        let plan: Plan = plan_from_map(&graph, map)?;
        let s = plan_stats(&graph, &plan, labeling.as_deref(), votes_ref)?;
        let rank = |x: f64, col: &dyn Fn(&PlanStats) -> f64| -> f64 {
            stats
                .iter()
                .zip(&weights)
                .filter(|(t, _)| col(t) <= x)
                .map(|(_, w)| w)
                .sum()
        };
        let mut entry = json!({
            "stats": s,
            "rem_quantile": rank(s.rem, &|t| t.rem),
        });
        if let (Some((a, b)), Some(m), Some(md)) = (votes_ref, &means, &medians) {
            let sh = district_shares(&graph, &plan, a, b)?;
            entry["gerrymandering_index"] = json!(gerrymandering_index(&sh, m));
            if let Some(g) = &groups {
                entry["grouped_deviations"] = json!(grouped_deviations(&sh, md, g)?);
            }
        }
        compared.insert(path.display().to_string(), entry);
    }
    if !compared.is_empty() {
        report["plans"] = json!(compared);
    }
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
