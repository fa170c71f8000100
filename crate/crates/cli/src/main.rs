//! `semi-ope` — command-line front end.
//!
//! Subcommands:
//! - `gen-data`   sample behavior datasets from a named environment;
//! - `annotate`   attach simulated counterfactual annotations to datasets;
//! - `evaluate`   run one estimator on a dataset and print a JSON report;
//! - `experiment` run a TOML-configured experiment and write CSV tables;
//! - `env-info`   print exact policy values, Q-tables and policy sets.
//!
//! Every command that writes files also writes `manifest.json` listing the
//! files with their SHA-256 hashes. Exit codes: 0 success, 2 configuration or
//! schema error, 3 support violation, 4 I/O error, 1 anything else.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semi_ope::annotation::{
    annotate, assign_weights, augmented_policy, average_weights, correct_bias, fit_approximate_mdp,
    impute_missing, read_annotated_jsonl, write_annotated_jsonl, AnnotatedTrajectory, AnnotationSource,
    AnnotationSpec, Availability, Pooling, WeightScheme,
};
use semi_ope::environments::{
    eps_greedy, generate_datasets, make_bandit, make_one_state_bandit, make_sepsis_mdp, make_tree_mdp,
    optimal_policy, perturbed_policy_set, BanditSpec, SepsisConfig,
};
use semi_ope::estimators::{
    cis_estimate, cpdis_estimate, cstar_is_estimate, cstar_pdis_estimate, is_estimate, naive_unweighted_estimate,
    naive_weighted_estimate, pdis_estimate, weighted_variant, EstimateReport, Normalization, Provenance,
};
use semi_ope::experiments::{environment_fingerprint, run_experiment, sha256_hex, ExperimentConfig, RunManifest};
use semi_ope::mdp_core::{
    exact_policy_value, horizon_q_values, read_trajectories_jsonl, write_trajectories_jsonl, Policy, TabularMDP,
    Trajectory,
};
use semi_ope::rng::StreamKey;
use semi_ope::{OpeError, Result};

const ENV_FILE: &str = "environment.json";
const BEHAVIOR_FILE: &str = "behavior_policy.json";
const EVAL_FILE: &str = "eval_policy.json";

#[derive(Parser, Debug)]
#[command(name = "semi-ope", version, about = "Semi-offline policy evaluation with counterfactual annotations")]
struct Cli {
    /// Master seed (overrides the seed of an experiment config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Never changes output bytes.
    #[arg(long, global = true, env = "SEMI_OPE_JOBS")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample behavior datasets (JSON lines, one file per dataset).
    GenData(GenDataArgs),
    /// Add simulated counterfactual annotations to dataset files.
    Annotate(AnnotateArgs),
    /// Run one estimator and print an estimate report as JSON.
    Evaluate(EvaluateArgs),
    /// Run an experiment described by a TOML config and write CSV tables.
    Experiment(ExperimentArgs),
    /// Print exact values, Q-tables and policy sets of an environment.
    EnvInfo(EnvInfoArgs),
}

/// Environment selection shared by the commands that build one.
#[derive(Args, Debug, Clone)]
struct EnvArgs {
    /// Environment id: two-state-bandit, one-state-bandit, tree, sepsis.
    #[arg(long)]
    env: Option<String>,
    /// Serialized environment (as written by `gen-data`); overrides `--env`.
    #[arg(long)]
    env_file: Option<PathBuf>,
    /// Reward noise std of the bandits.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Reward means of the one-state bandit, or leaf rewards of the tree.
    #[arg(long, value_delimiter = ',')]
    rewards: Option<Vec<f64>>,
    /// Bandit spec file (TOML or JSON) replacing the built-in two-state bandit.
    #[arg(long)]
    bandit_config: Option<PathBuf>,
    /// Tree depth.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Tree branching factor.
    #[arg(long, default_value_t = 2)]
    branching: usize,
    /// Sepsis simulator config (TOML or JSON); built-in default otherwise.
    #[arg(long)]
    sepsis_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Number of datasets.
    #[arg(long, default_value_t = 1)]
    datasets: usize,
    /// Episodes per dataset.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Behavior policy (see `policy specs` in the README).
    #[arg(long)]
    behavior: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    QEval,
    QBehavior,
    RewardMean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Pooled,
    PerStep,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => Pooling::Pooled,
            PoolingArg::PerStep => Pooling::PerStep,
        }
    }
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    /// Dataset file or directory of `gen-data` output.
    #[arg(long)]
    input: PathBuf,
    /// Environment file (default: `environment.json` next to the input).
    #[arg(long)]
    env_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    source: SourceArg,
    /// Std of additive Gaussian annotation noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Probability that each counterfactual slot is annotated.
    #[arg(long, default_value_t = 1.0)]
    availability: f64,
    /// Fill missing annotations with the mean of observed ones.
    #[arg(long)]
    impute: bool,
    #[arg(long, value_enum, default_value = "pooled")]
    pooling: PoolingArg,
    /// Shift annotations by the model-based estimate of `Q^{π_b} − Q^{π_e}`.
    #[arg(long)]
    bias_correct: bool,
    /// Evaluation policy (required for `q-eval` and `--bias-correct`).
    #[arg(long)]
    eval_policy: Option<String>,
    /// Behavior policy (default: `behavior_policy.json` next to the input).
    #[arg(long)]
    behavior_policy: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Is,
    Wis,
    Pdis,
    Pdwis,
    Cis,
    Cpdis,
    Cwis,
    CstarIs,
    CstarPdis,
    NaiveUnweighted,
    NaiveWeighted,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset file (plain or annotated JSON lines).
    #[arg(long)]
    input: PathBuf,
    /// Environment file (default: `environment.json` next to the input).
    #[arg(long)]
    env_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    /// Evaluation policy (default: `eval_policy.json` next to the input).
    #[arg(long)]
    eval_policy: Option<String>,
    /// Behavior policy (default: `behavior_policy.json` next to the input).
    #[arg(long)]
    behavior_policy: Option<String>,
    /// Weight scheme of the C-IS family: `equal-split`, `factual-only`, or a
    /// JSON object such as `{"kind":"constant","weights":[0.1,0.9]}`.
    #[arg(long, default_value = "equal-split")]
    weights: String,
    /// Pooling of the average weights behind the augmented behavior policy.
    #[arg(long, value_enum, default_value = "pooled")]
    pooling: PoolingArg,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct EnvInfoArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Policies to report (repeatable; default: behavior default and optimal).
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Include horizon Q-tables.
    #[arg(long)]
    q: bool,
    /// Include the perturbed evaluation-policy set.
    #[arg(long)]
    policy_set: bool,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,300,400")]
    flip_counts: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    policies_per_flip_count: u64,
    #[arg(long, default_value_t = 0)]
    policy_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &OpeError) -> u8 {
    match e {
        OpeError::DimensionMismatch(_)
        | OpeError::InvalidProbability(_)
        | OpeError::InvalidConfig(_)
        | OpeError::Json(_)
        | OpeError::Toml(_) => 2,
        OpeError::SupportViolation { .. } | OpeError::InfiniteDivergence { .. } => 3,
        OpeError::Io(_) | OpeError::Csv(_) => 4,
        OpeError::MissingAnnotation { .. } | OpeError::EmptyInput(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| OpeError::InvalidConfig(format!("cannot build worker pool: {e}")))?;
    let out_dir = cli.out_dir.clone();
    let seed = cli.seed;
    pool.install(|| match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, seed.unwrap_or(0), out_dir),
        Command::Annotate(a) => cmd_annotate(&a, seed.unwrap_or(0), out_dir),
        Command::Evaluate(a) => cmd_evaluate(&a, seed.unwrap_or(0), out_dir),
        Command::Experiment(a) => cmd_experiment(&a, seed, out_dir),
        Command::EnvInfo(a) => cmd_env_info(&a),
    })
}

// ── Environments and policies ───────────────────────────────────────────

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        OpeError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn build_env(args: &EnvArgs) -> Result<TabularMDP> {
    if let Some(path) = &args.env_file {
        return TabularMDP::from_json(&read_text(path)?);
    }
    let name = args
        .env
        .as_deref()
        .ok_or_else(|| OpeError::InvalidConfig("one of --env or --env-file is required".into()))?;
    match name {
        "two-state-bandit" => {
            let spec = match &args.bandit_config {
                Some(path) => {
                    let text = read_text(path)?;
                    if is_json(path) {
                        serde_json::from_str::<BanditSpec>(&text)?
                    } else {
                        toml::from_str::<BanditSpec>(&text)?
                    }
                }
                None => BanditSpec::two_state_table(args.sigma),
            };
            make_bandit(&spec)
        }
        "one-state-bandit" => {
            let r = args.rewards.clone().unwrap_or_else(|| vec![1.0, 2.0]);
            if r.len() != 2 {
                return Err(OpeError::InvalidConfig("--rewards needs two values for one-state-bandit".into()));
            }
            make_one_state_bandit(r[0], r[1], args.sigma, args.sigma)
        }
        "tree" => {
            let n_leaves = args.branching.pow(args.depth as u32);
            let leaves = args
                .rewards
                .clone()
                .unwrap_or_else(|| (0..n_leaves).map(|i| i as f64).collect());
            make_tree_mdp(args.depth, args.branching, &leaves)
        }
        "sepsis" => {
            let cfg = match &args.sepsis_config {
                Some(path) => {
                    let text = read_text(path)?;
                    if is_json(path) {
                        SepsisConfig::from_json(&text)?
                    } else {
                        SepsisConfig::from_toml(&text)?
                    }
                }
                None => SepsisConfig::default(),
            };
            make_sepsis_mdp(&cfg)
        }
        other => Err(OpeError::InvalidConfig(format!(
            "unknown environment id `{other}` (expected two-state-bandit, one-state-bandit, tree, sepsis)"
        ))),
    }
}

/// Resolve a policy spec against an MDP:
/// `uniform`, `optimal`, `eps-greedy:<ε>` (around the optimal policy),
/// `action:<k>`, an inline JSON row list (a single row is broadcast to every
/// state), or the path of a policy JSON file.
fn resolve_policy(spec: &str, mdp: &TabularMDP) -> Result<Policy> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let spec = spec.trim();
    let policy = if spec == "uniform" {
        Policy::uniform_rows(ns, &vec![1.0 / na as f64; na])?
    } else if spec == "optimal" {
        optimal_policy(mdp)
    } else if let Some(eps) = spec.strip_prefix("eps-greedy:") {
        let eps: f64 = eps
            .parse()
            .map_err(|_| OpeError::InvalidConfig(format!("bad epsilon in policy spec `{spec}`")))?;
        eps_greedy(&optimal_policy(mdp), eps)?
    } else if let Some(k) = spec.strip_prefix("action:") {
        let k: usize = k
            .parse()
            .map_err(|_| OpeError::InvalidConfig(format!("bad action in policy spec `{spec}`")))?;
        Policy::deterministic(&vec![k; ns], na)?
    } else if spec.starts_with('[') {
        let rows: Vec<Vec<f64>> = serde_json::from_str(spec)?;
        if rows.len() == 1 {
            Policy::uniform_rows(ns, &rows[0])?
        } else {
            Policy::new(rows)?
        }
    } else {
        Policy::from_json(&read_text(Path::new(spec))?)?
    };
    if policy.num_states() != ns || policy.num_actions() != na {
        return Err(OpeError::DimensionMismatch(format!(
            "policy `{spec}` is {}x{}, environment is {ns}x{na}",
            policy.num_states(),
            policy.num_actions()
        )));
    }
    Ok(policy)
}

fn default_behavior_spec(args: &EnvArgs) -> &'static str {
    match args.env.as_deref() {
        Some("sepsis") => "eps-greedy:0.1",
        _ => "uniform",
    }
}

/// Directory holding the environment and policy files of an input path.
fn input_dir(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.to_path_buf()
    } else {
        input.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn load_env_for(input: &Path, env_file: &Option<PathBuf>) -> Result<TabularMDP> {
    let path = env_file.clone().unwrap_or_else(|| input_dir(input).join(ENV_FILE));
    TabularMDP::from_json(&read_text(&path)?)
}

/// An explicit spec, or the named default file next to the input.
fn policy_or_default(spec: &Option<String>, input: &Path, file: &str, mdp: &TabularMDP) -> Result<Option<Policy>> {
    match spec {
        Some(s) => resolve_policy(s, mdp).map(Some),
        None => {
            let path = input_dir(input).join(file);
            if path.exists() {
                Policy::from_json(&read_text(&path)?).map(Some)
            } else {
                Ok(None)
            }
        }
    }
}

fn out_dir_or_default(out_dir: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out_dir.unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

// ── gen-data ────────────────────────────────────────────────────────────

fn cmd_gen_data(args: &GenDataArgs, seed: u64, out_dir: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    if args.datasets == 0 || args.episodes == 0 {
        return Err(OpeError::InvalidConfig("--datasets and --episodes must be positive".into()));
    }
    let mdp = build_env(&args.env)?;
    let behavior_spec = args
        .behavior
        .clone()
        .unwrap_or_else(|| default_behavior_spec(&args.env).to_string());
    let behavior = resolve_policy(&behavior_spec, &mdp)?;
    let datasets = generate_datasets(&mdp, &behavior, args.datasets, args.episodes, seed)?;
    let gen_ms = elapsed_ms(start);

    let dir = out_dir_or_default(out_dir)?;
    let config = serde_json::json!({
        "env": args.env.env,
        "env_file": args.env.env_file,
        "datasets": args.datasets,
        "episodes": args.episodes,
        "behavior": behavior_spec,
    });
    let mut manifest = RunManifest::new("gen-data", config, seed, environment_fingerprint(&mdp)?);
    manifest.write_file(&dir, ENV_FILE, mdp.to_json()?.as_bytes())?;
    manifest.write_file(&dir, BEHAVIOR_FILE, behavior.to_json()?.as_bytes())?;
    let width = (args.datasets - 1).to_string().len().max(3);
    for (i, data) in datasets.iter().enumerate() {
        let mut buf = Vec::new();
        write_trajectories_jsonl(&mut buf, data)?;
        manifest.write_file(&dir, &format!("dataset_{i:0width$}.jsonl"), &buf)?;
    }
    manifest.timings_ms.insert("generate".into(), gen_ms);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&dir)?;
    eprintln!("wrote {} dataset(s) to {}", args.datasets, dir.display());
    Ok(())
}

// ── annotate ────────────────────────────────────────────────────────────

/// Dataset files of an input path (a file, or every `*.jsonl` of a directory
/// in name order).
fn dataset_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            return Err(OpeError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: no such file", input.display()),
            )));
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(OpeError::EmptyInput(format!("no .jsonl files in {}", input.display())));
    }
    Ok(files)
}

/// Read plain trajectories, or the base trajectories of an annotated file.
fn read_trajectories_any(path: &Path) -> Result<Vec<Trajectory>> {
    match read_trajectories_jsonl(BufReader::new(fs::File::open(path)?)) {
        Ok(t) => Ok(t),
        Err(_) => Ok(read_annotated_jsonl(BufReader::new(fs::File::open(path)?))?
            .into_iter()
            .map(|a| a.base().clone())
            .collect()),
    }
}

/// Read annotated trajectories; plain trajectory files load with every slot
/// unavailable.
fn read_annotated_any(path: &Path, num_actions: usize) -> Result<Vec<AnnotatedTrajectory>> {
    match read_annotated_jsonl(BufReader::new(fs::File::open(path)?)) {
        Ok(a) => Ok(a),
        Err(first) => match read_trajectories_jsonl(BufReader::new(fs::File::open(path)?)) {
            Ok(t) => Ok(t
                .into_iter()
                .map(|tr| AnnotatedTrajectory::unannotated(tr, num_actions))
                .collect()),
            Err(_) => Err(first),
        },
    }
}

fn cmd_annotate(args: &AnnotateArgs, seed: u64, out_dir: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let mdp = load_env_for(&args.input, &args.env_file)?;
    let behavior = policy_or_default(&args.behavior_policy, &args.input, BEHAVIOR_FILE, &mdp)?;
    let eval = match &args.eval_policy {
        Some(s) => Some(resolve_policy(s, &mdp)?),
        None => None,
    };
    let source = match args.source {
        SourceArg::QEval => AnnotationSource::QEval,
        SourceArg::QBehavior => AnnotationSource::QBehavior,
        SourceArg::RewardMean => AnnotationSource::RewardMean,
    };
    if source == AnnotationSource::QEval && eval.is_none() {
        return Err(OpeError::InvalidConfig("--source q-eval requires --eval-policy".into()));
    }
    if source == AnnotationSource::QBehavior && behavior.is_none() {
        return Err(OpeError::InvalidConfig(
            "--source q-behavior requires --behavior-policy or a behavior_policy.json next to the input".into(),
        ));
    }
    if args.bias_correct && (eval.is_none() || behavior.is_none()) {
        return Err(OpeError::InvalidConfig(
            "--bias-correct requires both the evaluation and the behavior policy".into(),
        ));
    }
    let availability = if args.availability == 1.0 {
        Availability::All
    } else {
        Availability::Fraction(args.availability)
    };
    let files = dataset_files(&args.input)?;
    let dir = out_dir_or_default(out_dir)?;
    let config = serde_json::json!({
        "input": args.input,
        "source": source,
        "noise": args.noise,
        "availability": args.availability,
        "impute": args.impute,
        "pooling": Pooling::from(args.pooling),
        "bias_correct": args.bias_correct,
        "eval_policy": args.eval_policy,
        "behavior_policy": args.behavior_policy,
    });
    let mut manifest = RunManifest::new("annotate", config, seed, environment_fingerprint(&mdp)?);
    manifest.write_file(&dir, ENV_FILE, mdp.to_json()?.as_bytes())?;
    if let Some(b) = &behavior {
        manifest.write_file(&dir, BEHAVIOR_FILE, b.to_json()?.as_bytes())?;
    }
    if let Some(e) = &eval {
        manifest.write_file(&dir, EVAL_FILE, e.to_json()?.as_bytes())?;
    }
    let key = StreamKey::root(seed).tag("annotate");
    for (i, path) in files.iter().enumerate() {
        let data = read_trajectories_any(path)?;
        let spec = AnnotationSpec {
            source,
            noise_std: args.noise,
            availability: availability.clone(),
            seed: key.at(i as u64).value(),
        };
        let mut ann = annotate(&data, &mdp, eval.as_ref(), behavior.as_ref(), &spec)?;
        if args.bias_correct {
            let (pi_b, pi_e) = (behavior.as_ref().unwrap(), eval.as_ref().unwrap());
            let mhat = fit_approximate_mdp(&data, mdp.num_states(), mdp.num_actions(), mdp.horizon(), mdp.discount())?;
            ann = correct_bias(&ann, &mhat, pi_b, pi_e)?;
        }
        if args.impute {
            ann = impute_missing(&ann, args.pooling.into());
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        let mut buf = Vec::new();
        write_annotated_jsonl(&mut buf, &ann)?;
        manifest.write_file(&dir, &format!("{stem}.annotated.jsonl"), &buf)?;
    }
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&dir)?;
    eprintln!("annotated {} file(s) into {}", files.len(), dir.display());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

fn parse_weight_scheme(text: &str) -> Result<WeightScheme> {
    match text.trim() {
        "equal-split" => Ok(WeightScheme::EqualSplit),
        "factual-only" => Ok(WeightScheme::FactualOnly),
        other => Ok(serde_json::from_str(other)?),
    }
}

fn cmd_evaluate(args: &EvaluateArgs, seed: u64, out_dir: Option<PathBuf>) -> Result<()> {
    let mdp = load_env_for(&args.input, &args.env_file)?;
    let gamma = mdp.discount();
    let pi_e = policy_or_default(&args.eval_policy, &args.input, EVAL_FILE, &mdp)?
        .ok_or_else(|| OpeError::InvalidConfig("--eval-policy is required".into()))?;
    let pi_b = policy_or_default(&args.behavior_policy, &args.input, BEHAVIOR_FILE, &mdp)?;
    let need_pi_b = || {
        pi_b.as_ref()
            .ok_or_else(|| OpeError::InvalidConfig("this estimator requires --behavior-policy".into()))
    };
    let annotated = read_annotated_any(&args.input, mdp.num_actions())?;
    let plain = || -> Vec<Trajectory> { annotated.iter().map(|a| a.base().clone()).collect() };
    let counterfactual = |annotated: Vec<AnnotatedTrajectory>| -> Result<EstimateReport> {
        let scheme = parse_weight_scheme(&args.weights)?;
        let wd = assign_weights(annotated, &scheme)?;
        let wbar = average_weights(&wd, mdp.num_states(), args.pooling.into(), mdp.horizon())?;
        let pi_bplus = augmented_policy(&wbar, need_pi_b()?)?;
        match args.estimator {
            EstimatorArg::Cis => cis_estimate(&wd, &pi_e, &pi_bplus),
            EstimatorArg::Cpdis => cpdis_estimate(&wd, &pi_e, &pi_bplus, gamma),
            _ => {
                let rep = cpdis_estimate(&wd, &pi_e, &pi_bplus, gamma)?;
                let mut w = weighted_variant(&rep, Normalization::Trajectory)?;
                w.estimator = "cwis".into();
                Ok(w)
            }
        }
    };
    let mut report = match args.estimator {
        EstimatorArg::Is => is_estimate(&plain(), &pi_e, need_pi_b()?)?,
        EstimatorArg::Wis => {
            let mut w = weighted_variant(&is_estimate(&plain(), &pi_e, need_pi_b()?)?, Normalization::Trajectory)?;
            w.estimator = "wis".into();
            w
        }
        EstimatorArg::Pdis => pdis_estimate(&plain(), &pi_e, need_pi_b()?, gamma)?,
        EstimatorArg::Pdwis => {
            let mut w =
                weighted_variant(&pdis_estimate(&plain(), &pi_e, need_pi_b()?, gamma)?, Normalization::PerStep)?;
            w.estimator = "pdwis".into();
            w
        }
        EstimatorArg::Cis | EstimatorArg::Cpdis | EstimatorArg::Cwis => counterfactual(annotated)?,
        EstimatorArg::CstarIs => cstar_is_estimate(&annotated, &pi_e)?,
        EstimatorArg::CstarPdis => cstar_pdis_estimate(&annotated, &pi_e, gamma)?,
        EstimatorArg::NaiveUnweighted => naive_unweighted_estimate(&annotated, &pi_e, need_pi_b()?, gamma)?,
        EstimatorArg::NaiveWeighted => naive_weighted_estimate(&annotated, None, &pi_e, need_pi_b()?, gamma)?,
    };
    let config_echo = serde_json::json!({
        "input": args.input,
        "estimator": format!("{:?}", args.estimator),
        "eval_policy": args.eval_policy,
        "behavior_policy": args.behavior_policy,
        "weights": args.weights,
    });
    report.provenance = Some(Provenance {
        config_hash: sha256_hex(config_echo.to_string().as_bytes()),
        seed,
    });
    let json = serde_json::to_string_pretty(&report)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}")?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(&dir)?;
        let mut manifest = RunManifest::new("evaluate", config_echo, seed, environment_fingerprint(&mdp)?);
        manifest.write_file(&dir, "estimate.json", json.as_bytes())?;
        manifest.save(&dir)?;
    }
    Ok(())
}

// ── experiment ──────────────────────────────────────────────────────────

fn cmd_experiment(args: &ExperimentArgs, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::from_toml(&read_text(&args.config)?)?;
    if let Some(s) = seed {
        cfg.set_master_seed(s);
    }
    let output = run_experiment(&cfg)?;
    let run_ms = elapsed_ms(start);
    let dir = out_dir_or_default(out_dir)?;
    let mut manifest = RunManifest::new(
        &format!("experiment:{}", cfg.kind()),
        serde_json::to_value(&cfg)?,
        cfg.master_seed(),
        output.environment_fingerprint.clone(),
    );
    for table in &output.tables {
        manifest.write_file(&dir, &table.name, &table.to_bytes()?)?;
    }
    manifest.timings_ms.insert("run".into(), run_ms);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&dir)?;
    eprintln!("wrote {} table(s) to {}", output.tables.len(), dir.display());
    Ok(())
}

// ── env-info ────────────────────────────────────────────────────────────

fn cmd_env_info(args: &EnvInfoArgs) -> Result<()> {
    let mdp = build_env(&args.env)?;
    let specs: Vec<String> = if args.policies.is_empty() {
        vec![default_behavior_spec(&args.env).to_string(), "optimal".to_string()]
    } else {
        args.policies.clone()
    };
    let mut policies = Vec::new();
    for spec in &specs {
        let pi = resolve_policy(spec, &mdp)?;
        let mut entry = serde_json::json!({
            "spec": spec,
            "value": exact_policy_value(&mdp, &pi)?,
        });
        if args.q {
            entry["q"] = serde_json::to_value(horizon_q_values(&mdp, &pi)?.to_nested())?;
        }
        policies.push(entry);
    }
    let mut info = serde_json::json!({
        "num_states": mdp.num_states(),
        "num_actions": mdp.num_actions(),
        "horizon": mdp.horizon(),
        "discount": mdp.discount(),
        "environment_fingerprint": environment_fingerprint(&mdp)?,
        "policies": policies,
    });
    if args.policy_set {
        let set = perturbed_policy_set(
            &optimal_policy(&mdp),
            &args.flip_counts,
            args.policies_per_flip_count,
            StreamKey::root(args.policy_seed).tag("policies"),
        )?;
        let mut entries = Vec::new();
        for lp in &set.policies {
            entries.push(serde_json::json!({
                "label": lp.label,
                "flip_count": lp.flip_count,
                "seed": lp.seed,
                "value": exact_policy_value(&mdp, &lp.policy)?,
            }));
        }
        info["policy_set"] = serde_json::Value::Array(entries);
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&info)?)?;
    Ok(())
}
