//! Experiment harness: metrics, bandit tables, weight and missingness
//! heatmaps, the sepsis evaluation suite, and CSV + manifest output.
//!
//! Every runner is a pure function of its configuration. Randomness is drawn
//! from [`StreamKey`]s derived from `(master_seed, purpose, coordinates)`,
//! parallel work is split over independent coordinates (repetitions,
//! datasets), and results are collected in index order, so outputs are
//! byte-identical for any number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{
    annotate_with, annotate_with_q, assign_weights, augmented_policy, average_weights,
    correct_bias_with_q, fit_approximate_mdp, impute_missing, AnnotatedTrajectory, AnnotationSource,
    AnnotationSpec, Availability, AvgWeightTable, Pooling, WeightScheme,
};
use crate::environments::{
    eps_greedy, generate_dataset, make_bandit, make_sepsis_mdp, optimal_policy, perturbed_policy_set,
    BanditSpec, SepsisConfig,
};
use crate::error::{OpeError, Result};
use crate::estimators::theory::theory_cis;
use crate::estimators::{
    cpdis_estimate, cstar_is_estimate, cstar_pdis_estimate, is_estimate, naive_unweighted_estimate,
    naive_weighted_estimate, pdis_estimate, weighted_variant, EstimateReport, Normalization,
};
use crate::mdp_core::{
    exact_policy_value, horizon_q_values, policy_kl, state_occupancy, Policy, QTable, TabularMDP,
};
use crate::numeric::{mean, std_dev, CompensatedSum};
use crate::rng::StreamKey;
use crate::FORMAT_VERSION;

// ── Configuration ───────────────────────────────────────────────────────

/// A policy pair of a bandit table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCell {
    #[serde(default)]
    pub label: Option<String>,
    /// `behavior[s]` is the action distribution in state `s`.
    pub behavior: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

/// Estimators available in bandit tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditEstimator {
    Is,
    NaiveUnweighted,
    CstarIs,
}

impl BanditEstimator {
    pub fn id(self) -> &'static str {
        match self {
            BanditEstimator::Is => "is",
            BanditEstimator::NaiveUnweighted => "naive_unweighted",
            BanditEstimator::CstarIs => "cstar_is",
        }
    }
}

fn default_bandit_estimators() -> Vec<BanditEstimator> {
    vec![
        BanditEstimator::Is,
        BanditEstimator::NaiveUnweighted,
        BanditEstimator::CstarIs,
    ]
}

/// Bandit table: (bias, std, RMSE) per policy cell and estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditTableConfig {
    pub seed: u64,
    pub bandit: BanditSpec,
    pub cells: Vec<PolicyCell>,
    /// Standard deviation of annotation noise around `R̄`.
    pub annotation_noise_std: f64,
    /// `annotation_availability[s][ã]`: probability that `ã` is annotated in `s`.
    pub annotation_availability: Vec<Vec<f64>>,
    /// Number of independent datasets.
    pub repetitions: usize,
    /// Samples per dataset.
    pub samples: usize,
    #[serde(default = "default_bandit_estimators")]
    pub estimators: Vec<BanditEstimator>,
}

/// How weights are swept in a weight heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightGrid {
    /// Constant weights: `W(·|a0) = [x, 1 − x]`, `W(·|a1) = [1 − y, y]` for
    /// every `(x, y)` in `axis × axis` (`x`, `y` are the factual shares).
    Constant { axis: Vec<f64> },
    /// Random factual share `U[center ± width/2]` for every width.
    RandomUniform { center: f64, widths: Vec<f64> },
}

/// C-IS variability across weighting schemes on a two-action bandit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeatmapConfig {
    pub seed: u64,
    pub bandit: BanditSpec,
    pub behavior: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    /// Standard deviation of annotation noise (`σ_G`).
    pub annotation_noise_std: f64,
    pub grid: WeightGrid,
    pub samples_per_cell: usize,
}

/// C-IS variability across per-action annotation availability, with and
/// without imputation, on a two-action bandit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessHeatmapConfig {
    pub seed: u64,
    pub bandit: BanditSpec,
    pub behavior: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub annotation_noise_std: f64,
    /// Availability probabilities of the annotation for action 0 (first
    /// grid coordinate) and action 1 (second coordinate).
    pub axis: Vec<f64>,
    pub samples_per_cell: usize,
    #[serde(default)]
    pub imputation: Pooling,
}

fn default_eps() -> f64 {
    0.1
}
fn default_flip_counts() -> Vec<usize> {
    vec![50, 100, 200, 300, 400]
}
fn default_policies_per_count() -> u64 {
    5
}
fn default_datasets() -> usize {
    50
}
fn default_episodes() -> usize {
    1000
}
fn default_noise_stds() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.5, 1.0]
}
fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.5, 0.8, 1.0]
}
fn default_low_availability() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

/// Sepsis evaluation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepsisSuiteConfig {
    pub seed: u64,
    /// Simulator parameters; the shipped defaults when absent.
    #[serde(default)]
    pub simulator: Option<SepsisConfig>,
    #[serde(default = "default_eps")]
    pub behavior_epsilon: f64,
    #[serde(default = "default_flip_counts")]
    pub flip_counts: Vec<usize>,
    #[serde(default = "default_policies_per_count")]
    pub policies_per_flip_count: u64,
    /// Seed of the evaluation-policy perturbations.
    #[serde(default)]
    pub policy_seed: u64,
    #[serde(default = "default_datasets")]
    pub datasets: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_noise_stds")]
    pub noise_stds: Vec<f64>,
    #[serde(default = "default_fractions")]
    pub availability_fractions: Vec<f64>,
    /// Availability used for the noise sweep under missingness.
    #[serde(default = "default_low_availability")]
    pub low_availability: f64,
    #[serde(default)]
    pub imputation: Pooling,
    /// Run the noise / availability sweeps in addition to the main table.
    #[serde(default = "default_true")]
    pub sweeps: bool,
}

impl SepsisSuiteConfig {
    /// Default suite with the given master seed.
    pub fn with_seed(seed: u64) -> Self {
        SepsisSuiteConfig {
            seed,
            simulator: None,
            behavior_epsilon: default_eps(),
            flip_counts: default_flip_counts(),
            policies_per_flip_count: default_policies_per_count(),
            policy_seed: 0,
            datasets: default_datasets(),
            episodes: default_episodes(),
            noise_stds: default_noise_stds(),
            availability_fractions: default_fractions(),
            low_availability: default_low_availability(),
            imputation: Pooling::Pooled,
            sweeps: true,
        }
    }
}

/// Any experiment, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    BanditTable(BanditTableConfig),
    WeightHeatmap(WeightHeatmapConfig),
    MissingnessHeatmap(MissingnessHeatmapConfig),
    SepsisSuite(SepsisSuiteConfig),
}

impl ExperimentConfig {
    /// Parse and validate a TOML document.
    ///
    /// The `kind` key is dispatched by hand so that deserialization errors
    /// of the concrete config keep their field path and line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let kind = match table.remove("kind") {
            Some(toml::Value::String(k)) => k,
            Some(_) => return Err(OpeError::InvalidConfig("`kind` must be a string".into())),
            None => return Err(OpeError::InvalidConfig("missing `kind`".into())),
        };
        let body = toml::to_string(&table).map_err(|e| OpeError::InvalidConfig(e.to_string()))?;
        let parse_err = |e: toml::de::Error| OpeError::InvalidConfig(format!("{kind}: {e}"));
        let cfg = match kind.as_str() {
            "bandit_table" => ExperimentConfig::BanditTable(toml::from_str(&body).map_err(parse_err)?),
            "weight_heatmap" => ExperimentConfig::WeightHeatmap(toml::from_str(&body).map_err(parse_err)?),
            "missingness_heatmap" => ExperimentConfig::MissingnessHeatmap(toml::from_str(&body).map_err(parse_err)?),
            "sepsis_suite" => ExperimentConfig::SepsisSuite(toml::from_str(&body).map_err(parse_err)?),
            other => return Err(OpeError::InvalidConfig(format!("unknown experiment kind `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::BanditTable(_) => "bandit_table",
            ExperimentConfig::WeightHeatmap(_) => "weight_heatmap",
            ExperimentConfig::MissingnessHeatmap(_) => "missingness_heatmap",
            ExperimentConfig::SepsisSuite(_) => "sepsis_suite",
        }
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            ExperimentConfig::BanditTable(c) => c.seed,
            ExperimentConfig::WeightHeatmap(c) => c.seed,
            ExperimentConfig::MissingnessHeatmap(c) => c.seed,
            ExperimentConfig::SepsisSuite(c) => c.seed,
        }
    }

    /// Replace the master seed.
    pub fn set_master_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::BanditTable(c) => c.seed = seed,
            ExperimentConfig::WeightHeatmap(c) => c.seed = seed,
            ExperimentConfig::MissingnessHeatmap(c) => c.seed = seed,
            ExperimentConfig::SepsisSuite(c) => c.seed = seed,
        }
    }

    /// Check references and sweep axes.
    pub fn validate(&self) -> Result<()> {
        let nonempty = |ok: bool, field: &str| {
            if ok {
                Ok(())
            } else {
                Err(OpeError::InvalidConfig(format!("{field} must be nonempty / positive")))
            }
        };
        match self {
            ExperimentConfig::BanditTable(c) => {
                nonempty(!c.cells.is_empty(), "cells")?;
                nonempty(c.repetitions > 0 && c.samples > 0, "repetitions, samples")?;
                nonempty(!c.estimators.is_empty(), "estimators")?;
                let mdp = make_bandit(&c.bandit)?;
                check_prob_table("annotation_availability", &c.annotation_availability, &mdp)?;
                for cell in &c.cells {
                    Policy::new(cell.behavior.clone())?;
                    Policy::new(cell.target.clone())?;
                }
                check_noise(c.annotation_noise_std)
            }
            ExperimentConfig::WeightHeatmap(c) => {
                let mdp = make_bandit(&c.bandit)?;
                check_binary(&mdp)?;
                Policy::new(c.behavior.clone())?;
                Policy::new(c.target.clone())?;
                nonempty(c.samples_per_cell > 1, "samples_per_cell")?;
                match &c.grid {
                    WeightGrid::Constant { axis } => {
                        nonempty(!axis.is_empty(), "grid.axis")?;
                        check_unit("grid.axis", axis)?;
                    }
                    WeightGrid::RandomUniform { center, widths } => {
                        nonempty(!widths.is_empty(), "grid.widths")?;
                        for w in widths {
                            if !(*w >= 0.0) || center - w / 2.0 < 0.0 || center + w / 2.0 > 1.0 {
                                return Err(OpeError::InvalidConfig(format!(
                                    "grid.widths: width {w} around center {center} leaves [0, 1]"
                                )));
                            }
                        }
                    }
                }
                check_noise(c.annotation_noise_std)
            }
            ExperimentConfig::MissingnessHeatmap(c) => {
                let mdp = make_bandit(&c.bandit)?;
                check_binary(&mdp)?;
                Policy::new(c.behavior.clone())?;
                Policy::new(c.target.clone())?;
                nonempty(!c.axis.is_empty(), "axis")?;
                check_unit("axis", &c.axis)?;
                nonempty(c.samples_per_cell > 1, "samples_per_cell")?;
                check_noise(c.annotation_noise_std)
            }
            ExperimentConfig::SepsisSuite(c) => {
                if let Some(sim) = &c.simulator {
                    sim.validate()?;
                }
                nonempty(c.datasets > 0 && c.episodes > 0, "datasets, episodes")?;
                nonempty(!c.noise_stds.is_empty(), "noise_stds")?;
                nonempty(!c.availability_fractions.is_empty(), "availability_fractions")?;
                check_unit("availability_fractions", &c.availability_fractions)?;
                check_unit("low_availability", &[c.low_availability])?;
                check_unit("behavior_epsilon", &[c.behavior_epsilon])?;
                for &s in &c.noise_stds {
                    check_noise(s)?;
                }
                Ok(())
            }
        }
    }
}

fn check_noise(s: f64) -> Result<()> {
    if s >= 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(OpeError::InvalidConfig(format!("annotation noise std {s} must be >= 0")))
    }
}

fn check_unit(field: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| (0.0..=1.0).contains(x)) {
        Ok(())
    } else {
        Err(OpeError::InvalidConfig(format!("{field}: values must lie in [0, 1]")))
    }
}

fn check_binary(mdp: &TabularMDP) -> Result<()> {
    if mdp.num_actions() == 2 {
        Ok(())
    } else {
        Err(OpeError::InvalidConfig("heatmaps need a two-action bandit".into()))
    }
}

fn check_prob_table(field: &str, t: &[Vec<f64>], mdp: &TabularMDP) -> Result<()> {
    if t.len() != mdp.num_states() || t.iter().any(|r| r.len() != mdp.num_actions()) {
        return Err(OpeError::InvalidConfig(format!(
            "{field} must be a {}x{} table",
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    check_unit(field, &t.iter().flatten().copied().collect::<Vec<_>>())
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Bias / std / RMSE of one policy's estimates across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub true_value: f64,
    pub bias: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    /// `√mean((v̂ − v)²)`; equals `√(bias² + std²)`.
    pub rmse: f64,
}

/// Metrics of one estimator over a policy set and repeated seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_policy: Vec<PolicyMetrics>,
    /// RMSE over policies, one per seed.
    pub rmse_per_seed: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub spearman_per_seed: Vec<f64>,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    pub accuracy_per_seed: Vec<f64>,
    pub fpr_per_seed: Vec<f64>,
    pub fnr_per_seed: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub fpr_mean: f64,
    pub fpr_std: f64,
    pub fnr_mean: f64,
    pub fnr_std: f64,
    /// `raw[seed][policy]`.
    pub raw: Vec<Vec<f64>>,
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks); 0 when
/// either side has no rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Metrics from `estimates[seed][policy]`, true values per policy and the
/// behavior value `v_b` (the classification threshold).
///
/// Classification predicts "π_e at least as good as π_b" iff `v̂ ≥ v_b`;
/// FPR = FP / actual negatives and FNR = FN / actual positives (`NaN` when
/// the class is empty).
pub fn compute_metrics(estimates: &[Vec<f64>], true_values: &[f64], v_b: f64) -> Result<MetricsReport> {
    if estimates.is_empty() || true_values.is_empty() {
        return Err(OpeError::EmptyInput("metrics need at least one seed and one policy".into()));
    }
    let np = true_values.len();
    if estimates.iter().any(|r| r.len() != np) {
        return Err(OpeError::DimensionMismatch("one estimate per policy per seed".into()));
    }
    let per_policy = (0..np)
        .map(|p| {
            let col: Vec<f64> = estimates.iter().map(|r| r[p]).collect();
            let v = true_values[p];
            let m = mean(&col);
            let sq: Vec<f64> = col.iter().map(|x| (x - v) * (x - v)).collect();
            PolicyMetrics {
                true_value: v,
                bias: m - v,
                std: std_dev(&col),
                rmse: mean(&sq).sqrt(),
            }
        })
        .collect();
    let mut rmse_per_seed = Vec::with_capacity(estimates.len());
    let mut spearman_per_seed = Vec::with_capacity(estimates.len());
    let mut acc = Vec::with_capacity(estimates.len());
    let mut fpr = Vec::with_capacity(estimates.len());
    let mut fnr = Vec::with_capacity(estimates.len());
    for row in estimates {
        let sq: Vec<f64> = row.iter().zip(true_values).map(|(x, v)| (x - v) * (x - v)).collect();
        rmse_per_seed.push(mean(&sq).sqrt());
        spearman_per_seed.push(if np >= 2 { spearman(row, true_values) } else { f64::NAN });
        let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for (x, v) in row.iter().zip(true_values) {
            match (*x >= v_b, *v >= v_b) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
            }
        }
        acc.push((tp + tn) as f64 / np as f64);
        fpr.push(if fp + tn > 0 { fp as f64 / (fp + tn) as f64 } else { f64::NAN });
        fnr.push(if fneg + tp > 0 { fneg as f64 / (fneg + tp) as f64 } else { f64::NAN });
    }
    Ok(MetricsReport {
        per_policy,
        rmse_mean: mean(&rmse_per_seed),
        rmse_std: std_dev(&rmse_per_seed),
        spearman_mean: mean(&spearman_per_seed),
        spearman_std: std_dev(&spearman_per_seed),
        accuracy_mean: mean(&acc),
        accuracy_std: std_dev(&acc),
        fpr_mean: mean(&fpr),
        fpr_std: std_dev(&fpr),
        fnr_mean: mean(&fnr),
        fnr_std: std_dev(&fnr),
        rmse_per_seed,
        spearman_per_seed,
        accuracy_per_seed: acc,
        fpr_per_seed: fpr,
        fnr_per_seed: fnr,
        raw: estimates.to_vec(),
    })
}

// ── CSV tables and manifest ─────────────────────────────────────────────

/// A CSV table ready to be written.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    /// File name (e.g. `bandit_table.csv`).
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new(name: &str, header: &[&str]) -> Self {
        CsvTable {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Serialized bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| OpeError::Io(std::io::Error::other(e.to_string())))
    }

    /// Index of a column.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Deterministic float formatting for CSV cells (shortest round-trip form).
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One emitted file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Run manifest written next to every set of outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub environment_fingerprint: String,
    pub files: Vec<ManifestFile>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, master_seed: u64, fingerprint: String) -> Self {
        RunManifest {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            master_seed,
            environment_fingerprint: fingerprint,
            files: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    /// Write `bytes` to `dir/name` and record its hash.
    pub fn write_file(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(ManifestFile {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    /// Write `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Check that every listed file exists under `dir` with the recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<bool> {
        for f in &self.files {
            let bytes = fs::read(dir.join(&f.path))?;
            if sha256_hex(&bytes) != f.sha256 || bytes.len() as u64 != f.bytes {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// SHA-256 of an MDP's JSON document.
pub fn environment_fingerprint(mdp: &TabularMDP) -> Result<String> {
    Ok(sha256_hex(mdp.to_json()?.as_bytes()))
}

// ── Shared helpers ──────────────────────────────────────────────────────

/// Mean and population std of a pooled sample.
fn pooled_moments(xs: &[f64]) -> (f64, f64) {
    (mean(xs), std_dev(xs))
}

/// Delta-method standard error of a sample standard deviation:
/// `√(m4 − s⁴) / (2 s √n)` with central moments `m2 = s²`, `m4`.
pub fn std_standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let mut m2 = CompensatedSum::new();
    let mut m4 = CompensatedSum::new();
    for x in xs {
        let d2 = (x - m) * (x - m);
        m2.add(d2);
        m4.add(d2 * d2);
    }
    let (m2, m4) = (m2.total() / n, m4.total() / n);
    if m2 == 0.0 {
        return 0.0;
    }
    ((m4 - m2 * m2).max(0.0)).sqrt() / (2.0 * m2.sqrt() * n.sqrt())
}

fn log10_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.log10()
    } else {
        f64::NEG_INFINITY
    }
}

// ── Bandit table ────────────────────────────────────────────────────────

/// One row of a bandit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditTableRow {
    pub cell: usize,
    pub label: String,
    pub estimator: String,
    pub true_value: f64,
    /// Single-sample scale.
    pub bias: f64,
    pub std: f64,
    pub rmse: f64,
    /// Standard error of an `samples`-sample dataset estimate (`std/√N`).
    pub dataset_se: f64,
    /// Number of pooled per-sample terms.
    pub terms: usize,
}

/// Result of [`run_bandit_table`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditTableResult {
    pub rows: Vec<BanditTableRow>,
}

impl BanditTableResult {
    /// Row for `(cell, estimator)`.
    pub fn get(&self, cell: usize, estimator: &str) -> Option<&BanditTableRow> {
        self.rows.iter().find(|r| r.cell == cell && r.estimator == estimator)
    }

    pub fn to_tables(&self) -> Vec<CsvTable> {
        let mut t = CsvTable::new(
            "bandit_table.csv",
            &["cell", "label", "estimator", "true_value", "bias", "std", "rmse", "dataset_se", "terms"],
        );
        for r in &self.rows {
            t.rows.push(vec![
                r.cell.to_string(),
                r.label.clone(),
                r.estimator.clone(),
                fmt_f64(r.true_value),
                fmt_f64(r.bias),
                fmt_f64(r.std),
                fmt_f64(r.rmse),
                fmt_f64(r.dataset_se),
                r.terms.to_string(),
            ]);
        }
        vec![t]
    }
}

fn policy_label(p: &[Vec<f64>]) -> String {
    let rows: Vec<String> = p
        .iter()
        .map(|r| format!("[{}]", r.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")))
        .collect();
    rows.join(";")
}

/// Bias, std and RMSE at single-sample scale: per-sample terms are pooled
/// over `repetitions` datasets of `samples` samples (the naive estimator
/// pools its per-element terms over the augmented union).
pub fn run_bandit_table(cfg: &BanditTableConfig) -> Result<BanditTableResult> {
    ExperimentConfig::BanditTable(cfg.clone()).validate()?;
    let mdp = make_bandit(&cfg.bandit)?;
    let root = StreamKey::root(cfg.seed).tag("bandit_table");
    let mut rows = Vec::new();
    for (c, cell) in cfg.cells.iter().enumerate() {
        let pi_b = Policy::new(cell.behavior.clone())?;
        let pi_e = Policy::new(cell.target.clone())?;
        let v = exact_policy_value(&mdp, &pi_e)?;
        let per_rep: Vec<Vec<Vec<f64>>> = (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| -> Result<Vec<Vec<f64>>> {
                let key = root.at_all(&[c as u64, r as u64]);
                let data = generate_dataset(&mdp, &pi_b, cfg.samples, key.tag("data"));
                let spec = AnnotationSpec {
                    source: AnnotationSource::RewardMean,
                    noise_std: cfg.annotation_noise_std,
                    availability: Availability::PerPair(cfg.annotation_availability.clone()),
                    seed: key.tag("annotations").value(),
                };
                let ann = annotate_with(&data, mdp.num_actions(), |_, s, a| mdp.reward_mean(s, a), &spec)?;
                cfg.estimators
                    .iter()
                    .map(|e| {
                        Ok(match e {
                            BanditEstimator::Is => is_estimate(&data, &pi_e, &pi_b)?,
                            BanditEstimator::NaiveUnweighted => {
                                naive_unweighted_estimate(&ann, &pi_e, &pi_b, 1.0)?
                            }
                            BanditEstimator::CstarIs => cstar_is_estimate(&ann, &pi_e)?,
                        }
                        .per_trajectory_estimates)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (k, e) in cfg.estimators.iter().enumerate() {
            let pooled: Vec<f64> = per_rep.iter().flat_map(|r| r[k].iter().copied()).collect();
            let (m, s) = pooled_moments(&pooled);
            let bias = m - v;
            rows.push(BanditTableRow {
                cell: c,
                label: cell.label.clone().unwrap_or_else(|| {
                    format!("{} -> {}", policy_label(&cell.behavior), policy_label(&cell.target))
                }),
                estimator: e.id().to_string(),
                true_value: v,
                bias,
                std: s,
                rmse: (bias * bias + s * s).sqrt(),
                dataset_se: s / (cfg.samples as f64).sqrt(),
                terms: pooled.len(),
            });
        }
    }
    Ok(BanditTableResult { rows })
}

// ── Weight heatmap ──────────────────────────────────────────────────────

/// One cell of a weight heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHeatmapCell {
    /// Factual share for action 0 (constant grid) or the width (random grid).
    pub x: f64,
    /// Factual share for action 1 (constant grid; `NaN` for the random grid).
    pub y: f64,
    pub mean: f64,
    pub bias: f64,
    /// Single-sample standard deviation of C-IS.
    pub std: f64,
    pub log10_std: f64,
    /// Standard error of the mean.
    pub se: f64,
    /// Standard error of `std`.
    pub std_se: f64,
    /// `|bias| > 4·SE`.
    pub biased: bool,
    /// Closed-form single-sample std from the weight moments.
    pub theory_std: f64,
    pub equal_weights: bool,
    pub factual_only: bool,
}

/// Result of [`run_weight_heatmap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHeatmapResult {
    pub true_value: f64,
    pub cells: Vec<WeightHeatmapCell>,
}

impl WeightHeatmapResult {
    pub fn cell(&self, x: f64, y: f64) -> Option<&WeightHeatmapCell> {
        self.cells
            .iter()
            .find(|c| (c.x - x).abs() < 1e-12 && ((c.y - y).abs() < 1e-12 || (c.y.is_nan() && y.is_nan())))
    }

    pub fn to_tables(&self) -> Vec<CsvTable> {
        let mut t = CsvTable::new(
            "weight_heatmap.csv",
            &[
                "x", "y", "mean", "bias", "std", "log10_std", "se", "std_se", "biased", "theory_std", "equal_weights",
                "factual_only",
            ],
        );
        for c in &self.cells {
            t.rows.push(vec![
                fmt_f64(c.x),
                fmt_f64(c.y),
                fmt_f64(c.mean),
                fmt_f64(c.bias),
                fmt_f64(c.std),
                fmt_f64(c.log10_std),
                fmt_f64(c.se),
                fmt_f64(c.std_se),
                c.biased.to_string(),
                fmt_f64(c.theory_std),
                c.equal_weights.to_string(),
                c.factual_only.to_string(),
            ]);
        }
        vec![t]
    }
}

fn weight_cell_stats(
    mdp: &TabularMDP,
    pi_e: &Policy,
    pi_b: &Policy,
    ann: &[AnnotatedTrajectory],
    scheme: &WeightScheme,
) -> Result<(f64, f64, f64, f64)> {
    let wd = assign_weights(ann.to_vec(), scheme)?;
    let wbar = average_weights(&wd, mdp.num_states(), Pooling::Pooled, 1)?;
    let pbp = augmented_policy(&wbar, pi_b)?;
    let rep = crate::estimators::cis_estimate(&wd, pi_e, &pbp)?;
    let xs = &rep.per_trajectory_estimates;
    let (m, s) = pooled_moments(xs);
    Ok((m, s, s / (rep.n as f64).sqrt(), std_standard_error(xs)))
}

/// C-IS standard deviation over a grid of weighting schemes. Every cell
/// reuses the same samples and annotations (common random numbers), with
/// `π_b+` computed from the cell's average weights.
pub fn run_weight_heatmap(cfg: &WeightHeatmapConfig) -> Result<WeightHeatmapResult> {
    ExperimentConfig::WeightHeatmap(cfg.clone()).validate()?;
    let mdp = make_bandit(&cfg.bandit)?;
    let pi_b = Policy::new(cfg.behavior.clone())?;
    let pi_e = Policy::new(cfg.target.clone())?;
    let v = exact_policy_value(&mdp, &pi_e)?;
    let key = StreamKey::root(cfg.seed).tag("weight_heatmap");
    let data = generate_dataset(&mdp, &pi_b, cfg.samples_per_cell, key.tag("data"));
    let spec = AnnotationSpec {
        source: AnnotationSource::RewardMean,
        noise_std: cfg.annotation_noise_std,
        availability: Availability::All,
        seed: key.tag("annotations").value(),
    };
    let ann = annotate_with(&data, 2, |_, s, a| mdp.reward_mean(s, a), &spec)?;
    let na = mdp.num_actions();
    let ns = mdp.num_states();
    let delta_sigma: Vec<f64> = mdp
        .reward_std_table()
        .iter()
        .map(|s| cfg.annotation_noise_std.powi(2) - s * s)
        .collect();
    let zero_bias = vec![0.0; ns * na];
    let cells_spec: Vec<(f64, f64, WeightScheme, Vec<Vec<(f64, Vec<f64>)>>)> = match &cfg.grid {
        WeightGrid::Constant { axis } => axis
            .iter()
            .flat_map(|&x| axis.iter().map(move |&y| (x, y)))
            .map(|(x, y)| {
                let rows = vec![vec![x, 1.0 - x], vec![1.0 - y, y]];
                let dists = (0..ns)
                    .flat_map(|_| rows.iter().map(|r| vec![(1.0, r.clone())]))
                    .collect();
                (x, y, WeightScheme::ByFactual { weights: rows }, dists)
            })
            .collect(),
        WeightGrid::RandomUniform { center, widths } => widths
            .iter()
            .map(|&w| {
                let scheme = WeightScheme::RandomUniform {
                    center: *center,
                    width: w,
                    seed: key.tag("weights").value(),
                };
                // Uniform factual share: mean c, variance w²/12, perfectly
                // anti-correlated with the annotation weight. A symmetric
                // two-point law at c ± w/√12 has the same first two moments.
                let h = w / 12f64.sqrt();
                let dists = (0..ns)
                    .flat_map(|_| {
                        (0..na).map(move |a| {
                            let vec_for = |share: f64| {
                                let mut v = vec![1.0 - share; 2];
                                v[a] = share;
                                v
                            };
                            vec![(0.5, vec_for(center - h)), (0.5, vec_for(center + h))]
                        })
                    })
                    .collect();
                (w, f64::NAN, scheme, dists)
            })
            .collect(),
    };
    let cells = cells_spec
        .par_iter()
        .map(|(x, y, scheme, dists)| -> Result<WeightHeatmapCell> {
            let (m, s, se, std_se) = weight_cell_stats(&mdp, &pi_e, &pi_b, &ann, scheme)?;
            let pop = AvgWeightTable::from_distributions(ns, na, dists)?;
            let theory = theory_cis(&mdp, &pi_e, &pi_b, &pop, &zero_bias, &delta_sigma)?;
            let bias = m - v;
            let (equal, factual) = match cfg.grid {
                WeightGrid::Constant { .. } => (*x == 0.5 && *y == 0.5, *x == 1.0 && *y == 1.0),
                WeightGrid::RandomUniform { .. } => (false, false),
            };
            Ok(WeightHeatmapCell {
                x: *x,
                y: *y,
                mean: m,
                bias,
                std: s,
                log10_std: log10_or_neg_inf(s),
                se,
                std_se,
                biased: bias.abs() > 4.0 * se,
                theory_std: theory.std(),
                equal_weights: equal,
                factual_only: factual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightHeatmapResult { true_value: v, cells })
}

// ── Missingness heatmap ─────────────────────────────────────────────────

/// One cell of the missingness heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessCell {
    /// Availability of annotations for action 0.
    pub p0: f64,
    /// Availability of annotations for action 1.
    pub p1: f64,
    pub bias_unimputed: f64,
    pub std_unimputed: f64,
    pub bias_imputed: f64,
    pub std_imputed: f64,
    /// Standard errors of the means.
    pub se_unimputed: f64,
    pub se_imputed: f64,
    /// Standard errors of the standard deviations.
    pub std_se_unimputed: f64,
    pub std_se_imputed: f64,
}

/// Result of [`run_missingness_heatmap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessHeatmapResult {
    pub true_value: f64,
    pub cells: Vec<MissingnessCell>,
}

impl MissingnessHeatmapResult {
    pub fn to_tables(&self) -> Vec<CsvTable> {
        let mut t = CsvTable::new(
            "missingness_heatmap.csv",
            &[
                "p0",
                "p1",
                "bias_unimputed",
                "std_unimputed",
                "log10_std_unimputed",
                "bias_imputed",
                "std_imputed",
                "log10_std_imputed",
                "se_unimputed",
                "se_imputed",
                "std_se_unimputed",
                "std_se_imputed",
            ],
        );
        for c in &self.cells {
            t.rows.push(vec![
                fmt_f64(c.p0),
                fmt_f64(c.p1),
                fmt_f64(c.bias_unimputed),
                fmt_f64(c.std_unimputed),
                fmt_f64(log10_or_neg_inf(c.std_unimputed)),
                fmt_f64(c.bias_imputed),
                fmt_f64(c.std_imputed),
                fmt_f64(log10_or_neg_inf(c.std_imputed)),
                fmt_f64(c.se_unimputed),
                fmt_f64(c.se_imputed),
                fmt_f64(c.std_se_unimputed),
                fmt_f64(c.std_se_imputed),
            ]);
        }
        vec![t]
    }
}

/// C-IS with equal split over available annotations, for per-action
/// availability probabilities `(p0, p1)` on a grid, with and without
/// imputation. All cells share samples, noise draws and the availability
/// uniforms, so masks are nested across the grid.
pub fn run_missingness_heatmap(cfg: &MissingnessHeatmapConfig) -> Result<MissingnessHeatmapResult> {
    ExperimentConfig::MissingnessHeatmap(cfg.clone()).validate()?;
    let mdp = make_bandit(&cfg.bandit)?;
    let pi_b = Policy::new(cfg.behavior.clone())?;
    let pi_e = Policy::new(cfg.target.clone())?;
    let v = exact_policy_value(&mdp, &pi_e)?;
    let key = StreamKey::root(cfg.seed).tag("missingness_heatmap");
    let data = generate_dataset(&mdp, &pi_b, cfg.samples_per_cell, key.tag("data"));
    let grid: Vec<(f64, f64)> = cfg
        .axis
        .iter()
        .flat_map(|&p0| cfg.axis.iter().map(move |&p1| (p0, p1)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(p0, p1)| -> Result<MissingnessCell> {
            let spec = AnnotationSpec {
                source: AnnotationSource::RewardMean,
                noise_std: cfg.annotation_noise_std,
                availability: Availability::PerPair(vec![vec![p0, p1]; mdp.num_states()]),
                seed: key.tag("annotations").value(),
            };
            let ann = annotate_with(&data, 2, |_, s, a| mdp.reward_mean(s, a), &spec)?;
            let run = |a: Vec<AnnotatedTrajectory>| -> Result<(f64, f64, f64, f64)> {
                let wd = assign_weights(a, &WeightScheme::EqualSplit)?;
                let wbar = average_weights(&wd, mdp.num_states(), Pooling::Pooled, 1)?;
                let pbp = augmented_policy(&wbar, &pi_b)?;
                let rep = crate::estimators::cis_estimate(&wd, &pi_e, &pbp)?;
                let xs = &rep.per_trajectory_estimates;
                let (m, s) = pooled_moments(xs);
                Ok((m - v, s, s / (rep.n as f64).sqrt(), std_standard_error(xs)))
            };
            let imputed = impute_missing(&ann, cfg.imputation);
            let (bu, su, seu, sseu) = run(ann)?;
            let (bi, si, sei, ssei) = run(imputed)?;
            Ok(MissingnessCell {
                p0,
                p1,
                bias_unimputed: bu,
                std_unimputed: su,
                bias_imputed: bi,
                std_imputed: si,
                se_unimputed: seu,
                se_imputed: sei,
                std_se_unimputed: sseu,
                std_se_imputed: ssei,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MissingnessHeatmapResult { true_value: v, cells })
}

// ── Sepsis suite ────────────────────────────────────────────────────────

/// Estimator ids of the sepsis main table, in output order.
pub const SEPSIS_ESTIMATORS: [&str; 12] = [
    "pdis",
    "pdwis",
    "naive_unweighted",
    "naive_unweighted_wis",
    "naive_weighted",
    "naive_weighted_wis",
    "cstar_pdis_qe",
    "cstar_pdis_qe_wis",
    "cstar_pdis_qb",
    "cstar_pdis_qb_wis",
    "cstar_pdis_corrected",
    "cstar_pdis_corrected_wis",
];

/// An evaluation policy with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitePolicy {
    pub label: String,
    pub flip_count: usize,
    pub true_value: f64,
    /// KL(π_e ‖ π_b) weighted by the time-averaged occupancy of π_b.
    pub kl: f64,
}

/// Metrics of one main-table estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEstimatorResult {
    pub estimator: String,
    pub metrics: MetricsReport,
    /// `ess[dataset][policy]`.
    pub ess: Vec<Vec<f64>>,
    pub ess_mean: f64,
    pub ess_std: f64,
}

/// RMSE-over-policies per dataset at each point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub name: String,
    pub points: Vec<f64>,
    /// `rmse[point][dataset]`.
    pub rmse: Vec<Vec<f64>>,
}

impl SweepCurve {
    pub fn mean_at(&self, i: usize) -> f64 {
        mean(&self.rmse[i])
    }
    pub fn std_at(&self, i: usize) -> f64 {
        std_dev(&self.rmse[i])
    }
}

/// Result of [`run_sepsis_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepsisSuiteResult {
    pub behavior_value: f64,
    pub policies: Vec<SuitePolicy>,
    pub estimators: Vec<SuiteEstimatorResult>,
    pub sweeps: Vec<SweepCurve>,
}

impl SepsisSuiteResult {
    pub fn estimator(&self, id: &str) -> Option<&SuiteEstimatorResult> {
        self.estimators.iter().find(|e| e.estimator == id)
    }
    pub fn sweep(&self, name: &str) -> Option<&SweepCurve> {
        self.sweeps.iter().find(|s| s.name == name)
    }

    pub fn to_tables(&self) -> Vec<CsvTable> {
        let mut main = CsvTable::new(
            "sepsis_table.csv",
            &[
                "estimator",
                "rmse_mean",
                "rmse_std",
                "ess_mean",
                "ess_std",
                "spearman_mean",
                "spearman_std",
                "accuracy_mean",
                "accuracy_std",
                "fpr_mean",
                "fpr_std",
                "fnr_mean",
                "fnr_std",
            ],
        );
        for e in &self.estimators {
            let m = &e.metrics;
            main.rows.push(vec![
                e.estimator.clone(),
                fmt_f64(m.rmse_mean),
                fmt_f64(m.rmse_std),
                fmt_f64(e.ess_mean),
                fmt_f64(e.ess_std),
                fmt_f64(m.spearman_mean),
                fmt_f64(m.spearman_std),
                fmt_f64(m.accuracy_mean),
                fmt_f64(m.accuracy_std),
                fmt_f64(m.fpr_mean),
                fmt_f64(m.fpr_std),
                fmt_f64(m.fnr_mean),
                fmt_f64(m.fnr_std),
            ]);
        }
        let mut pol = CsvTable::new(
            "sepsis_policies.csv",
            &["policy", "label", "flip_count", "true_value", "kl", "better_than_behavior"],
        );
        for (i, p) in self.policies.iter().enumerate() {
            pol.rows.push(vec![
                i.to_string(),
                p.label.clone(),
                p.flip_count.to_string(),
                fmt_f64(p.true_value),
                fmt_f64(p.kl),
                (p.true_value >= self.behavior_value).to_string(),
            ]);
        }
        let mut per = CsvTable::new(
            "sepsis_per_policy.csv",
            &["estimator", "policy", "label", "kl", "true_value", "bias", "std", "rmse"],
        );
        for e in &self.estimators {
            for (i, (pm, p)) in e.metrics.per_policy.iter().zip(&self.policies).enumerate() {
                per.rows.push(vec![
                    e.estimator.clone(),
                    i.to_string(),
                    p.label.clone(),
                    fmt_f64(p.kl),
                    fmt_f64(pm.true_value),
                    fmt_f64(pm.bias),
                    fmt_f64(pm.std),
                    fmt_f64(pm.rmse),
                ]);
            }
        }
        let mut raw = CsvTable::new(
            "sepsis_estimates.csv",
            &["estimator", "dataset", "policy", "estimate", "ess"],
        );
        for e in &self.estimators {
            for (d, row) in e.metrics.raw.iter().enumerate() {
                for (p, x) in row.iter().enumerate() {
                    raw.rows.push(vec![
                        e.estimator.clone(),
                        d.to_string(),
                        p.to_string(),
                        fmt_f64(*x),
                        fmt_f64(e.ess[d][p]),
                    ]);
                }
            }
        }
        let mut sweeps = CsvTable::new(
            "sepsis_sweeps.csv",
            &["sweep", "point", "rmse_mean", "rmse_std"],
        );
        for s in &self.sweeps {
            for (i, &x) in s.points.iter().enumerate() {
                sweeps.rows.push(vec![
                    s.name.clone(),
                    fmt_f64(x),
                    fmt_f64(s.mean_at(i)),
                    fmt_f64(s.std_at(i)),
                ]);
            }
        }
        vec![main, pol, per, raw, sweeps]
    }
}

/// Everything the suite needs that does not depend on the dataset.
struct SuiteSetup {
    mdp: TabularMDP,
    behavior: Policy,
    policies: Vec<Policy>,
    q_eval: Vec<QTable>,
    q_behavior: QTable,
}

/// Per-dataset results: `main[estimator][policy]`, `ess[estimator][policy]`,
/// `sweeps[sweep][point]` (RMSE over policies).
struct DatasetOutcome {
    main: Vec<Vec<f64>>,
    ess: Vec<Vec<f64>>,
    sweeps: Vec<Vec<f64>>,
}

fn rmse_over(estimates: &[f64], truths: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for (x, v) in estimates.iter().zip(truths) {
        acc.add((x - v) * (x - v));
    }
    (acc.total() / truths.len() as f64).sqrt()
}

fn equal_split_cpdis(ann: Vec<AnnotatedTrajectory>, setup: &SuiteSetup, pi_e: &Policy) -> Result<EstimateReport> {
    let wd = assign_weights(ann, &WeightScheme::EqualSplit)?;
    let wbar = average_weights(&wd, setup.mdp.num_states(), Pooling::Pooled, 1)?;
    let pbp = augmented_policy(&wbar, &setup.behavior)?;
    cpdis_estimate(&wd, pi_e, &pbp, setup.mdp.discount())
}

fn sweep_names(cfg: &SepsisSuiteConfig) -> Vec<(String, Vec<f64>)> {
    if !cfg.sweeps {
        return Vec::new();
    }
    vec![
        ("noise_cstar_pdis".into(), cfg.noise_stds.clone()),
        ("availability_unimputed".into(), cfg.availability_fractions.clone()),
        ("availability_imputed".into(), cfg.availability_fractions.clone()),
        ("low_availability_noise_unimputed".into(), cfg.noise_stds.clone()),
        ("low_availability_noise_imputed".into(), cfg.noise_stds.clone()),
    ]
}

fn run_sepsis_dataset(
    cfg: &SepsisSuiteConfig,
    setup: &SuiteSetup,
    truths: &[f64],
    d: usize,
) -> Result<DatasetOutcome> {
    let mdp = &setup.mdp;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.discount();
    let root = StreamKey::root(cfg.seed);
    let data = generate_dataset(mdp, &setup.behavior, cfg.episodes, root.tag("datasets").at(d as u64));
    let mhat = fit_approximate_mdp(&data, ns, na, mdp.horizon(), gamma)?;
    let qb_hat = horizon_q_values(&mhat.mdp, &setup.behavior)?;
    let ideal = AnnotationSpec::ideal(AnnotationSource::QEval);
    let ann_qb = annotate_with_q(&data, &setup.q_behavior, &ideal)?;
    let np = setup.policies.len();
    let ne = SEPSIS_ESTIMATORS.len();
    let mut main = vec![vec![0.0; np]; ne];
    let mut ess = vec![vec![0.0; np]; ne];
    let sweeps_def = sweep_names(cfg);
    // sweep_est[sweep][point][policy]
    let mut sweep_est: Vec<Vec<Vec<f64>>> =
        sweeps_def.iter().map(|(_, pts)| vec![vec![0.0; np]; pts.len()]).collect();

    for (p, pi_e) in setup.policies.iter().enumerate() {
        let q_e = &setup.q_eval[p];
        let mut put = |k: usize, rep: &EstimateReport| {
            main[k][p] = rep.value;
            ess[k][p] = rep.ess;
        };
        let pdis = pdis_estimate(&data, pi_e, &setup.behavior, gamma)?;
        put(0, &pdis);
        put(1, &weighted_variant(&pdis, Normalization::PerStep)?);
        let ann_qe = annotate_with_q(&data, q_e, &ideal)?;
        let nu = naive_unweighted_estimate(&ann_qe, pi_e, &setup.behavior, gamma)?;
        put(2, &nu);
        put(3, &weighted_variant(&nu, Normalization::Trajectory)?);
        let nw = naive_weighted_estimate(&ann_qe, None, pi_e, &setup.behavior, gamma)?;
        put(4, &nw);
        put(5, &weighted_variant(&nw, Normalization::Trajectory)?);
        let cs_qe = cstar_pdis_estimate(&ann_qe, pi_e, gamma)?;
        put(6, &cs_qe);
        put(7, &weighted_variant(&cs_qe, Normalization::Trajectory)?);
        let cs_qb = cstar_pdis_estimate(&ann_qb, pi_e, gamma)?;
        put(8, &cs_qb);
        put(9, &weighted_variant(&cs_qb, Normalization::Trajectory)?);
        let qe_hat = horizon_q_values(&mhat.mdp, pi_e)?;
        let corrected = correct_bias_with_q(&ann_qb, &mhat, &qb_hat, &qe_hat)?;
        let cs_c = cstar_pdis_estimate(&corrected, pi_e, gamma)?;
        put(10, &cs_c);
        put(11, &weighted_variant(&cs_c, Normalization::Trajectory)?);

        if cfg.sweeps {
            let seed_for = |purpose: &str| root.tag(purpose).at_all(&[d as u64, p as u64]).value();
            let noise_seed = seed_for("noise_sweep");
            for (i, &sigma) in cfg.noise_stds.iter().enumerate() {
                let spec = AnnotationSpec {
                    source: AnnotationSource::QEval,
                    noise_std: sigma,
                    availability: Availability::All,
                    seed: noise_seed,
                };
                let ann = annotate_with_q(&data, q_e, &spec)?;
                sweep_est[0][i][p] = cstar_pdis_estimate(&ann, pi_e, gamma)?.value;
            }
            let avail_seed = seed_for("availability_sweep");
            for (i, &f) in cfg.availability_fractions.iter().enumerate() {
                let spec = AnnotationSpec {
                    source: AnnotationSource::QEval,
                    noise_std: 0.0,
                    availability: Availability::Fraction(f),
                    seed: avail_seed,
                };
                let ann = annotate_with_q(&data, q_e, &spec)?;
                let imputed = impute_missing(&ann, cfg.imputation);
                sweep_est[1][i][p] = equal_split_cpdis(ann, setup, pi_e)?.value;
                sweep_est[2][i][p] = equal_split_cpdis(imputed, setup, pi_e)?.value;
            }
            let low_seed = seed_for("low_availability_sweep");
            for (i, &sigma) in cfg.noise_stds.iter().enumerate() {
                let spec = AnnotationSpec {
                    source: AnnotationSource::QEval,
                    noise_std: sigma,
                    availability: Availability::Fraction(cfg.low_availability),
                    seed: low_seed,
                };
                let ann = annotate_with_q(&data, q_e, &spec)?;
                let imputed = impute_missing(&ann, cfg.imputation);
                sweep_est[3][i][p] = equal_split_cpdis(ann, setup, pi_e)?.value;
                sweep_est[4][i][p] = equal_split_cpdis(imputed, setup, pi_e)?.value;
            }
        }
    }
    let sweeps = sweep_est
        .iter()
        .map(|pts| pts.iter().map(|est| rmse_over(est, truths)).collect())
        .collect();
    Ok(DatasetOutcome { main, ess, sweeps })
}

/// The sepsis suite: behavior ε-greedy around the optimal policy, the
/// perturbed evaluation-policy set, `datasets × episodes` behavior data, the
/// main estimator table, and (optionally) noise / availability sweeps.
/// Datasets are processed in parallel; dataset `d` and its annotations draw
/// only from streams keyed by `d`.
pub fn run_sepsis_suite(cfg: &SepsisSuiteConfig) -> Result<SepsisSuiteResult> {
    ExperimentConfig::SepsisSuite(cfg.clone()).validate()?;
    let sim = cfg.simulator.clone().unwrap_or_default();
    let mdp = make_sepsis_mdp(&sim)?;
    let opt = optimal_policy(&mdp);
    let behavior = eps_greedy(&opt, cfg.behavior_epsilon)?;
    let set = perturbed_policy_set(
        &opt,
        &cfg.flip_counts,
        cfg.policies_per_flip_count,
        StreamKey::root(cfg.policy_seed).tag("policies"),
    )?;
    let behavior_value = exact_policy_value(&mdp, &behavior)?;
    let occupancy = state_occupancy(&mdp, &behavior)?.time_averaged();
    let mut policies = Vec::with_capacity(set.len());
    let mut q_eval = Vec::with_capacity(set.len());
    for lp in &set.policies {
        let q = horizon_q_values(&mdp, &lp.policy)?;
        policies.push(SuitePolicy {
            label: lp.label.clone(),
            flip_count: lp.flip_count,
            true_value: crate::mdp_core::value_from_q(&mdp, &q),
            kl: policy_kl(&lp.policy, &behavior, &occupancy)?,
        });
        q_eval.push(q);
    }
    let setup = SuiteSetup {
        q_behavior: horizon_q_values(&mdp, &behavior)?,
        policies: set.policies.iter().map(|lp| lp.policy.clone()).collect(),
        mdp,
        behavior,
        q_eval,
    };
    let truths: Vec<f64> = policies.iter().map(|p| p.true_value).collect();
    let outcomes = (0..cfg.datasets)
        .into_par_iter()
        .map(|d| run_sepsis_dataset(cfg, &setup, &truths, d))
        .collect::<Result<Vec<_>>>()?;

    let mut estimators = Vec::with_capacity(SEPSIS_ESTIMATORS.len());
    for (k, id) in SEPSIS_ESTIMATORS.iter().enumerate() {
        let table: Vec<Vec<f64>> = outcomes.iter().map(|o| o.main[k].clone()).collect();
        let ess: Vec<Vec<f64>> = outcomes.iter().map(|o| o.ess[k].clone()).collect();
        let ess_runs: Vec<f64> = ess.iter().map(|r| mean(r)).collect();
        estimators.push(SuiteEstimatorResult {
            estimator: id.to_string(),
            metrics: compute_metrics(&table, &truths, behavior_value)?,
            ess_mean: mean(&ess_runs),
            ess_std: std_dev(&ess_runs),
            ess,
        });
    }
    let sweeps = sweep_names(cfg)
        .into_iter()
        .enumerate()
        .map(|(j, (name, points))| SweepCurve {
            rmse: (0..points.len())
                .map(|i| outcomes.iter().map(|o| o.sweeps[j][i]).collect())
                .collect(),
            name,
            points,
        })
        .collect();
    Ok(SepsisSuiteResult {
        behavior_value,
        policies,
        estimators,
        sweeps,
    })
}

// ── Dispatch ────────────────────────────────────────────────────────────

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub tables: Vec<CsvTable>,
    pub environment_fingerprint: String,
}

/// Run any experiment and render its CSV tables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg {
        ExperimentConfig::BanditTable(c) => Ok(ExperimentOutput {
            tables: run_bandit_table(c)?.to_tables(),
            environment_fingerprint: environment_fingerprint(&make_bandit(&c.bandit)?)?,
        }),
        ExperimentConfig::WeightHeatmap(c) => Ok(ExperimentOutput {
            tables: run_weight_heatmap(c)?.to_tables(),
            environment_fingerprint: environment_fingerprint(&make_bandit(&c.bandit)?)?,
        }),
        ExperimentConfig::MissingnessHeatmap(c) => Ok(ExperimentOutput {
            tables: run_missingness_heatmap(c)?.to_tables(),
            environment_fingerprint: environment_fingerprint(&make_bandit(&c.bandit)?)?,
        }),
        ExperimentConfig::SepsisSuite(c) => {
            let mdp = make_sepsis_mdp(&c.simulator.clone().unwrap_or_default())?;
            Ok(ExperimentOutput {
                tables: run_sepsis_suite(c)?.to_tables(),
                environment_fingerprint: environment_fingerprint(&mdp)?,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&truth, &truth), 1.0);
        assert!((spearman(&[1.0, 2.0, 4.0, 3.0], &truth) - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0, 1.0], &truth), 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn metrics_identity_and_shift() {
        let truth = vec![0.1, 0.5, 0.3];
        let exact = compute_metrics(&[truth.clone(), truth.clone()], &truth, 0.3).unwrap();
        assert_eq!(exact.rmse_mean, 0.0);
        assert_eq!(exact.spearman_mean, 1.0);
        assert_eq!(exact.accuracy_mean, 1.0);
        let shifted: Vec<f64> = truth.iter().map(|x| x + 0.25).collect();
        let m = compute_metrics(&[shifted], &truth, 0.3).unwrap();
        assert_eq!(m.spearman_mean, 1.0);
        for pm in &m.per_policy {
            assert!((pm.bias - 0.25).abs() < 1e-12);
            assert!((pm.rmse * pm.rmse - pm.bias * pm.bias - pm.std * pm.std).abs() < 1e-12);
        }
    }

    #[test]
    fn config_parses_with_kind_tag() {
        let text = r#"
kind = "sepsis_suite"
seed = 3
datasets = 2
episodes = 10
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.kind(), "sepsis_suite");
        assert_eq!(cfg.master_seed(), 3);
        let bad = "kind = \"sepsis_suite\"\nseed = 1\nbogus = 2\n";
        assert!(ExperimentConfig::from_toml(bad).is_err());
    }
}
