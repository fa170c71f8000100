//! Value estimators for off-policy evaluation.
//!
//! Baselines: [`is_estimate`], [`pdis_estimate`] and the self-normalized
//! [`weighted_variant`] (PDWIS / WIS / C-WIS). Counterfactual-augmented
//! family: [`cis_estimate`], [`cstar_is_estimate`], [`cpdis_estimate`],
//! [`cstar_pdis_estimate`]. Intentionally biased augmentation baselines:
//! [`naive_unweighted_estimate`], [`naive_weighted_estimate`]. Diagnostics:
//! [`rho_plus`] and [`effective_sample_size`]. Closed-form bias and
//! variance calculators for bandits live in [`theory`].
//!
//! Ratio conventions, shared by every estimator:
//!
//! - a term whose weight or target probability is zero contributes nothing,
//!   even when the behavior probability is zero (`0/0 := 0`);
//! - a term with positive weight and target probability but zero behavior
//!   probability is an [`OpeError::SupportViolation`];
//! - weighted ratio terms are evaluated as `(w · π_e · x) / π_b`, so that
//!   factual-only weighting reproduces the unweighted estimators bit for bit.

pub mod theory;

use serde::{Deserialize, Serialize};

use crate::annotation::{
    assign_weights, augmented_policy, average_weights, AnnotatedTrajectory, AugmentedPolicy, Pooling,
    WeightScheme, WeightedDataset,
};
use crate::error::{OpeError, Result};
use crate::mdp_core::{check_dataset_dims, Policy, Trajectory};
use crate::numeric::CompensatedSum;

/// Seed and configuration provenance attached by front ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Per-step pieces kept by the per-decision baselines so that a per-step
/// self-normalized variant can be formed afterwards.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepTerms {
    /// `ρ_{1:t}` for every step of every trajectory.
    pub cumulative_ratios: Vec<Vec<f64>>,
    /// `γ^t · r_t` (0-based `t`) for every step of every trajectory.
    pub discounted_rewards: Vec<Vec<f64>>,
}

/// Output of an estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    /// Mean of `per_trajectory_estimates`.
    pub value: f64,
    pub per_trajectory_estimates: Vec<f64>,
    /// Trajectory-level ratio (`ρ_{1:T}` or `Π_t ρ+_W,t`).
    pub per_trajectory_weights: Vec<f64>,
    /// `(Σω)²/Σω²` of `per_trajectory_weights` (0 when every weight is 0).
    pub ess: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip)]
    pub step_terms: Option<StepTerms>,
}

impl EstimateReport {
    fn from_parts(
        estimator: &str,
        estimates: Vec<f64>,
        weights: Vec<f64>,
        step_terms: Option<StepTerms>,
    ) -> Result<Self> {
        if estimates.is_empty() {
            return Err(OpeError::EmptyInput("dataset is empty".into()));
        }
        let value = compensated_mean(&estimates);
        let ess = effective_sample_size(&weights).unwrap_or(0.0);
        Ok(EstimateReport {
            estimator: estimator.to_string(),
            value,
            n: estimates.len(),
            per_trajectory_estimates: estimates,
            per_trajectory_weights: weights,
            ess,
            provenance: None,
            step_terms,
        })
    }
}

fn compensated_mean(xs: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.total() / xs.len() as f64
}

/// One weighted ratio term `(w · π_e · x) / π_b`, or `None` when it
/// vanishes by the `0/0 := 0` convention.
#[inline]
fn ratio_term(
    w: f64,
    pe: f64,
    x: f64,
    pb: f64,
    trajectory: usize,
    step: usize,
    state: usize,
    action: usize,
) -> Result<Option<f64>> {
    if w == 0.0 || pe == 0.0 {
        return Ok(None);
    }
    if pb == 0.0 {
        return Err(OpeError::SupportViolation {
            trajectory,
            step,
            state,
            action,
        });
    }
    Ok(Some((w * pe * x) / pb))
}

fn check_policies(pi_e: &Policy, num_states: usize, num_actions: usize) -> Result<()> {
    if pi_e.num_states() != num_states || pi_e.num_actions() != num_actions {
        return Err(OpeError::DimensionMismatch(format!(
            "policy is {}x{}, expected {num_states}x{num_actions}",
            pi_e.num_states(),
            pi_e.num_actions()
        )));
    }
    Ok(())
}

fn check_single_step(lengths: impl Iterator<Item = usize>, name: &str) -> Result<()> {
    for (i, len) in lengths.enumerate() {
        if len > 1 {
            return Err(OpeError::InvalidConfig(format!(
                "{name} needs single-step (bandit) data; trajectory {i} has {len} steps"
            )));
        }
    }
    Ok(())
}

// ── IS / PDIS ───────────────────────────────────────────────────────────

/// Importance sampling for bandit data: per sample `ρ · r`.
pub fn is_estimate(dataset: &[Trajectory], pi_e: &Policy, pi_b: &Policy) -> Result<EstimateReport> {
    check_single_step(dataset.iter().map(|t| t.len()), "IS")?;
    let mut rep = pdis_estimate(dataset, pi_e, pi_b, 1.0)?;
    rep.estimator = "is".into();
    Ok(rep)
}

/// Per-decision importance sampling by the backward recursion
/// `v ← ρ_t (r_t + γ v)`, evaluated as `(π_e · (r_t + γ v)) / π_b`.
pub fn pdis_estimate(
    dataset: &[Trajectory],
    pi_e: &Policy,
    pi_b: &Policy,
    discount: f64,
) -> Result<EstimateReport> {
    let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
    check_policies(pi_e, ns, na)?;
    check_dataset_dims(dataset, ns, na)?;
    let mut estimates = Vec::with_capacity(dataset.len());
    let mut weights = Vec::with_capacity(dataset.len());
    let mut terms = StepTerms::default();
    for (i, tr) in dataset.iter().enumerate() {
        let mut v = 0.0;
        for (t, st) in tr.steps.iter().enumerate().rev() {
            let x = st.reward + discount * v;
            let pe = pi_e.prob(st.state, st.action);
            let pb = pi_b.prob(st.state, st.action);
            v = ratio_term(1.0, pe, x, pb, i, t, st.state, st.action)?.unwrap_or(0.0);
        }
        let mut cum = 1.0;
        let mut gamma_t = 1.0;
        let mut ratios = Vec::with_capacity(tr.len());
        let mut rewards = Vec::with_capacity(tr.len());
        for st in &tr.steps {
            let pe = pi_e.prob(st.state, st.action);
            cum *= if pe == 0.0 { 0.0 } else { pe / pi_b.prob(st.state, st.action) };
            ratios.push(cum);
            rewards.push(gamma_t * st.reward);
            gamma_t *= discount;
        }
        estimates.push(v);
        weights.push(cum);
        terms.cumulative_ratios.push(ratios);
        terms.discounted_rewards.push(rewards);
    }
    EstimateReport::from_parts("pdis", estimates, weights, Some(terms))
}

/// Closed form `Σ_t ρ_{1:t} γ^t r_t` (0-based `t`) of a single trajectory;
/// equals the recursion up to floating-point reassociation.
pub fn pdis_closed_form(tr: &Trajectory, pi_e: &Policy, pi_b: &Policy, discount: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut cum = 1.0;
    let mut gamma_t = 1.0;
    for (t, st) in tr.steps.iter().enumerate() {
        let pe = pi_e.prob(st.state, st.action);
        let pb = pi_b.prob(st.state, st.action);
        if pe == 0.0 {
            return Ok(acc);
        }
        if pb == 0.0 {
            return Err(OpeError::SupportViolation {
                trajectory: 0,
                step: t,
                state: st.state,
                action: st.action,
            });
        }
        cum *= pe / pb;
        acc += cum * gamma_t * st.reward;
        gamma_t *= discount;
    }
    Ok(acc)
}

/// Granularity of self-normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide each step's weighted reward sum by the empirical mean of
    /// `ρ_{1:t}` (needs per-step terms; PDWIS).
    PerStep,
    /// Divide by the empirical mean of the trajectory-level ratio
    /// (`ρ_{1:T}`, or `Π ρ+_W` for the counterfactual family; WIS / C-WIS).
    Trajectory,
}

/// Self-normalized version of an estimate.
///
/// Per-step normalization pads trajectories that ended early with zero
/// reward and a frozen cumulative ratio, and skips steps at which every
/// cumulative ratio is zero (their numerator is zero as well). The returned
/// per-trajectory estimates are rescaled so that their mean is the value.
pub fn weighted_variant(report: &EstimateReport, normalization: Normalization) -> Result<EstimateReport> {
    let n = report.n as f64;
    let (estimates, suffix) = match normalization {
        Normalization::Trajectory => {
            let denom = compensated_mean(&report.per_trajectory_weights);
            if !(denom > 0.0) {
                return Err(OpeError::InvalidProbability(
                    "self-normalization with an all-zero normalizer".into(),
                ));
            }
            (
                report.per_trajectory_estimates.iter().map(|&x| x / denom).collect::<Vec<_>>(),
                "wis",
            )
        }
        Normalization::PerStep => {
            let terms = report.step_terms.as_ref().ok_or_else(|| {
                OpeError::InvalidConfig(format!(
                    "estimator {} has no per-step terms for per-step normalization",
                    report.estimator
                ))
            })?;
            let horizon = terms.cumulative_ratios.iter().map(Vec::len).max().unwrap_or(0);
            let mut denoms = vec![0.0; horizon];
            for t in 0..horizon {
                let mut acc = CompensatedSum::new();
                for r in &terms.cumulative_ratios {
                    acc.add(match r.get(t) {
                        Some(&x) => x,
                        None => r.last().copied().unwrap_or(1.0),
                    });
                }
                denoms[t] = acc.total() / n;
            }
            if horizon == 0 || !(denoms[0] > 0.0) {
                return Err(OpeError::InvalidProbability(
                    "self-normalization with an all-zero normalizer".into(),
                ));
            }
            let est = terms
                .cumulative_ratios
                .iter()
                .zip(&terms.discounted_rewards)
                .map(|(ratios, rewards)| {
                    let mut v = 0.0;
                    for t in 0..ratios.len() {
                        if denoms[t] > 0.0 {
                            v += ratios[t] * rewards[t] / denoms[t];
                        }
                    }
                    v
                })
                .collect();
            (est, "wis")
        }
    };
    let mut out = EstimateReport::from_parts(
        &format!("{}_{suffix}", report.estimator),
        estimates,
        report.per_trajectory_weights.clone(),
        None,
    )?;
    out.ess = report.ess;
    out.provenance = report.provenance.clone();
    Ok(out)
}

// ── Counterfactual-augmented family ─────────────────────────────────────

fn check_weighted(wd: &WeightedDataset, pi_e: &Policy, pi_bplus: &AugmentedPolicy) -> Result<()> {
    let (ns, na) = (pi_bplus.num_states(), pi_bplus.num_actions());
    check_policies(pi_e, ns, na)?;
    if wd.weights.len() != wd.trajectories.len() {
        return Err(OpeError::DimensionMismatch("one weight table per trajectory".into()));
    }
    for (i, tr) in wd.trajectories.iter().enumerate() {
        if tr.num_actions() != na || wd.weights[i].len() != tr.len() * na {
            return Err(OpeError::DimensionMismatch(format!("trajectory {i} weight shape")));
        }
        for st in tr.steps() {
            if st.state >= ns || st.action >= na {
                return Err(OpeError::DimensionMismatch(format!(
                    "trajectory {i}: (s={}, a={}) outside {ns}x{na}",
                    st.state, st.action
                )));
            }
        }
    }
    Ok(())
}

/// C-IS for bandit data: per sample `w^a ρ^a r + Σ_{ã≠a} w^ã ρ^ã g^ã` with
/// ratios against `π_b+`.
pub fn cis_estimate(wd: &WeightedDataset, pi_e: &Policy, pi_bplus: &AugmentedPolicy) -> Result<EstimateReport> {
    check_single_step(wd.trajectories.iter().map(|t| t.len()), "C-IS")?;
    let mut rep = cpdis_estimate(wd, pi_e, pi_bplus, 1.0)?;
    rep.estimator = "cis".into();
    Ok(rep)
}

/// C-PDIS by the backward recursion
/// `v ← w^{a_t} ρ^{a_t}(r_t + γ v) + Σ_{ã≠a_t} w^ã ρ^ã g_t^ã`, ratios
/// against `π_b+` at step `t`. The trajectory weight is `Π_t ρ+_W,t`.
pub fn cpdis_estimate(
    wd: &WeightedDataset,
    pi_e: &Policy,
    pi_bplus: &AugmentedPolicy,
    discount: f64,
) -> Result<EstimateReport> {
    check_weighted(wd, pi_e, pi_bplus)?;
    let mut estimates = Vec::with_capacity(wd.len());
    let mut traj_weights = Vec::with_capacity(wd.len());
    for (i, tr) in wd.trajectories.iter().enumerate() {
        let mut v = 0.0;
        let mut rho_prod = 1.0;
        for t in (0..tr.len()).rev() {
            let st = tr.steps()[t];
            let s = st.state;
            let w = wd.step_weights(i, t);
            let x = st.reward + discount * v;
            let mut next = 0.0;
            let mut rho = 0.0;
            if let Some(term) = ratio_term(
                w[st.action],
                pi_e.prob(s, st.action),
                x,
                pi_bplus.prob(t, s, st.action),
                i,
                t,
                s,
                st.action,
            )? {
                next = term;
                rho = (w[st.action] * pi_e.prob(s, st.action)) / pi_bplus.prob(t, s, st.action);
            }
            for slot in tr.step_annotations(t) {
                let wa = w[slot.action];
                if wa == 0.0 {
                    continue;
                }
                let g = slot.value.ok_or(OpeError::MissingAnnotation {
                    trajectory: i,
                    step: t,
                    action: slot.action,
                })?;
                let pe = pi_e.prob(s, slot.action);
                let pb = pi_bplus.prob(t, s, slot.action);
                if let Some(term) = ratio_term(wa, pe, g, pb, i, t, s, slot.action)? {
                    next += term;
                    rho += (wa * pe) / pb;
                }
            }
            v = next;
            rho_prod *= rho;
        }
        estimates.push(v);
        traj_weights.push(rho_prod);
    }
    EstimateReport::from_parts("cpdis", estimates, traj_weights, None)
}

/// C*-IS for bandit data: per sample `π_e(a|s) r + Σ_{ã≠a} π_e(ã|s) g^ã`.
pub fn cstar_is_estimate(annotated: &[AnnotatedTrajectory], pi_e: &Policy) -> Result<EstimateReport> {
    check_single_step(annotated.iter().map(|t| t.len()), "C*-IS")?;
    let mut rep = cstar_pdis_estimate(annotated, pi_e, 1.0)?;
    rep.estimator = "cstar_is".into();
    Ok(rep)
}

/// C*-PDIS by the recursion
/// `v ← π_e(a_t|s_t)(r_t + γ v) + Σ_{ã≠a_t} π_e(ã|s_t) g_t^ã`.
/// Every annotation of an action with positive target probability must be
/// available. Augmented ratios are identically 1, so the ESS equals `n`.
pub fn cstar_pdis_estimate(
    annotated: &[AnnotatedTrajectory],
    pi_e: &Policy,
    discount: f64,
) -> Result<EstimateReport> {
    let mut estimates = Vec::with_capacity(annotated.len());
    for (i, tr) in annotated.iter().enumerate() {
        check_policies(pi_e, pi_e.num_states(), tr.num_actions())?;
        let mut v = 0.0;
        for t in (0..tr.len()).rev() {
            let st = tr.steps()[t];
            if st.state >= pi_e.num_states() || st.action >= pi_e.num_actions() {
                return Err(OpeError::DimensionMismatch(format!(
                    "trajectory {i} step {t}: (s={}, a={})",
                    st.state, st.action
                )));
            }
            let row = pi_e.row(st.state);
            let mut next = row[st.action] * (st.reward + discount * v);
            for slot in tr.step_annotations(t) {
                let pe = row[slot.action];
                if pe == 0.0 {
                    continue;
                }
                let g = slot.value.ok_or(OpeError::MissingAnnotation {
                    trajectory: i,
                    step: t,
                    action: slot.action,
                })?;
                next += pe * g;
            }
            v = next;
        }
        estimates.push(v);
    }
    let weights = vec![1.0; estimates.len()];
    EstimateReport::from_parts("cstar_pdis", estimates, weights, None)
}

/// Augmented importance ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct RhoPlus {
    /// `ρ+_W,t = Σ_a w_t^a π_e(a|s_t)/π_b+(a|s_t)` per step.
    pub per_step: Vec<Vec<f64>>,
    /// Product over steps.
    pub per_trajectory: Vec<f64>,
}

/// Per-step and per-trajectory augmented ratios `ρ+_W`.
pub fn rho_plus(wd: &WeightedDataset, pi_e: &Policy, pi_bplus: &AugmentedPolicy) -> Result<RhoPlus> {
    check_weighted(wd, pi_e, pi_bplus)?;
    let mut per_step = Vec::with_capacity(wd.len());
    let mut per_trajectory = Vec::with_capacity(wd.len());
    for (i, tr) in wd.trajectories.iter().enumerate() {
        let mut steps = Vec::with_capacity(tr.len());
        let mut prod = 1.0;
        for (t, st) in tr.steps().iter().enumerate() {
            let w = wd.step_weights(i, t);
            let mut rho = 0.0;
            for (a, &wa) in w.iter().enumerate() {
                let pe = pi_e.prob(st.state, a);
                if let Some(r) = ratio_term(wa, pe, 1.0, pi_bplus.prob(t, st.state, a), i, t, st.state, a)? {
                    rho += r;
                }
            }
            prod *= rho;
            steps.push(rho);
        }
        per_step.push(steps);
        per_trajectory.push(prod);
    }
    Ok(RhoPlus {
        per_step,
        per_trajectory,
    })
}

/// Effective sample size `(Σω)² / Σω²`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(OpeError::InvalidProbability("ESS weights must be finite and nonnegative".into()));
    }
    let mut s1 = CompensatedSum::new();
    let mut s2 = CompensatedSum::new();
    for &w in weights {
        s1.add(w);
        s2.add(w * w);
    }
    if !(s2.total() > 0.0) {
        return Err(OpeError::EmptyInput("ESS of all-zero weights".into()));
    }
    let ess = s1.total() * s1.total() / s2.total();
    Ok(ess.min(weights.len() as f64))
}

// ── Naive augmentation baselines ────────────────────────────────────────

fn equal_split_augmented(annotated: &[AnnotatedTrajectory], pi_b: &Policy) -> Result<AugmentedPolicy> {
    let wd = assign_weights(annotated.to_vec(), &WeightScheme::EqualSplit)?;
    let wbar = average_weights(&wd, pi_b.num_states(), Pooling::Pooled, 1)?;
    augmented_policy(&wbar, pi_b)
}

/// Naive unweighted augmentation: every available annotation `g_t^ã`
/// becomes a synthetic trajectory (the factual prefix up to `t − 1`, then
/// action `ã` with reward `g_t^ã`), and PDIS runs over the union of real and
/// synthetic trajectories with ratios against the equal-split `π_b+`.
/// Per-element estimates are listed trajectory by trajectory (the real
/// trajectory first, then its synthetic ones in step/action order).
pub fn naive_unweighted_estimate(
    annotated: &[AnnotatedTrajectory],
    pi_e: &Policy,
    pi_b: &Policy,
    discount: f64,
) -> Result<EstimateReport> {
    if annotated.is_empty() {
        return Err(OpeError::EmptyInput("dataset is empty".into()));
    }
    let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
    check_policies(pi_e, ns, na)?;
    for tr in annotated {
        check_dataset_dims(std::slice::from_ref(tr.base()), ns, na)?;
    }
    let pbp = equal_split_augmented(annotated, pi_b)?;
    let mut estimates = Vec::new();
    let mut weights = Vec::new();
    for (i, tr) in annotated.iter().enumerate() {
        // Real trajectory.
        let mut v = 0.0;
        for t in (0..tr.len()).rev() {
            let st = tr.steps()[t];
            let x = st.reward + discount * v;
            v = ratio_term(
                1.0,
                pi_e.prob(st.state, st.action),
                x,
                pbp.prob(t, st.state, st.action),
                i,
                t,
                st.state,
                st.action,
            )?
            .unwrap_or(0.0);
        }
        let mut real_rho = 1.0;
        for (t, st) in tr.steps().iter().enumerate() {
            real_rho *= ratio_term(1.0, pi_e.prob(st.state, st.action), 1.0, pbp.prob(t, st.state, st.action), i, t, st.state, st.action)?
                .unwrap_or(0.0);
        }
        estimates.push(v);
        weights.push(real_rho);
        // Synthetic trajectories, forward over the prefix.
        let mut prefix_rho = 1.0;
        let mut prefix_value = 0.0;
        let mut gamma_t = 1.0;
        for (t, st) in tr.steps().iter().enumerate() {
            for slot in tr.step_annotations(t) {
                if let Some(g) = slot.value {
                    let rho_a = ratio_term(
                        1.0,
                        pi_e.prob(st.state, slot.action),
                        1.0,
                        pbp.prob(t, st.state, slot.action),
                        i,
                        t,
                        st.state,
                        slot.action,
                    )?
                    .unwrap_or(0.0);
                    let rho = prefix_rho * rho_a;
                    estimates.push(prefix_value + rho * gamma_t * g);
                    weights.push(rho);
                }
            }
            let rho_f = ratio_term(
                1.0,
                pi_e.prob(st.state, st.action),
                1.0,
                pbp.prob(t, st.state, st.action),
                i,
                t,
                st.state,
                st.action,
            )?
            .unwrap_or(0.0);
            prefix_rho *= rho_f;
            prefix_value += prefix_rho * gamma_t * st.reward;
            gamma_t *= discount;
        }
    }
    EstimateReport::from_parts("naive_unweighted", estimates, weights, None)
}

/// Naive trajectory-level weighting. Per trajectory,
/// `(1 − Σ w) ρ_{1:T} Σ_t γ^t r_t + Σ_t Σ_ã w_t^ã ρ_{1:t−1} ρ_t^ã (Σ_{t'<t} γ^{t'} r_{t'} + γ^t g_t^ã)`.
///
/// `weights[i]` lists one weight per annotation slot of trajectory `i`
/// (step-major, `num_actions − 1` per step, zero on unavailable slots) and
/// must sum to at most 1; by default every available annotation gets
/// `1/(1 + K_i)` with `K_i` the number of available annotations. Ratios use
/// the augmented policy of the per-step weight vectors (`w` on each
/// annotation, the remainder of the step on the factual action).
pub fn naive_weighted_estimate(
    annotated: &[AnnotatedTrajectory],
    weights: Option<&[Vec<f64>]>,
    pi_e: &Policy,
    pi_b: &Policy,
    discount: f64,
) -> Result<EstimateReport> {
    if annotated.is_empty() {
        return Err(OpeError::EmptyInput("dataset is empty".into()));
    }
    let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
    check_policies(pi_e, ns, na)?;
    let k = na - 1;
    let slot_weights: Vec<Vec<f64>> = match weights {
        Some(ws) => {
            if ws.len() != annotated.len() {
                return Err(OpeError::DimensionMismatch("one weight list per trajectory".into()));
            }
            ws.to_vec()
        }
        None => annotated
            .iter()
            .map(|tr| {
                let share = 1.0 / (1 + tr.num_available()) as f64;
                (0..tr.len())
                    .flat_map(|t| tr.step_annotations(t).iter().map(move |x| if x.available() { share } else { 0.0 }))
                    .collect()
            })
            .collect(),
    };
    // Per-step weight vectors for the augmented behavior policy.
    let mut step_weights = Vec::with_capacity(annotated.len());
    for (i, (tr, sw)) in annotated.iter().zip(&slot_weights).enumerate() {
        check_dataset_dims(std::slice::from_ref(tr.base()), ns, na)?;
        if sw.len() != tr.len() * k {
            return Err(OpeError::DimensionMismatch(format!("weight list of trajectory {i}")));
        }
        let total: f64 = sw.iter().sum();
        if sw.iter().any(|&w| !(w >= 0.0)) || total > 1.0 + 1e-12 {
            return Err(OpeError::InvalidProbability(format!(
                "trajectory {i}: naive weights must be nonnegative and sum to at most 1 (sum {total})"
            )));
        }
        let mut w = vec![0.0; tr.len() * na];
        for t in 0..tr.len() {
            let mut cf = 0.0;
            for (j, slot) in tr.step_annotations(t).iter().enumerate() {
                let x = sw[t * k + j];
                if x > 0.0 && !slot.available() {
                    return Err(OpeError::MissingAnnotation {
                        trajectory: i,
                        step: t,
                        action: slot.action,
                    });
                }
                w[t * na + slot.action] = x;
                cf += x;
            }
            w[t * na + tr.steps()[t].action] = 1.0 - cf;
        }
        step_weights.push(w);
    }
    let wd = WeightedDataset {
        trajectories: annotated.to_vec(),
        weights: step_weights,
    };
    let wbar = average_weights(&wd, ns, Pooling::Pooled, 1)?;
    let pbp = augmented_policy(&wbar, pi_b)?;

    let mut estimates = Vec::with_capacity(annotated.len());
    let mut traj_weights = Vec::with_capacity(annotated.len());
    for (i, (tr, sw)) in annotated.iter().zip(&slot_weights).enumerate() {
        let mut prefix_rho = 1.0;
        let mut prefix_value = 0.0;
        let mut gamma_t = 1.0;
        let mut cf_total = CompensatedSum::new();
        let mut w_total = 0.0;
        for (t, st) in tr.steps().iter().enumerate() {
            for (j, slot) in tr.step_annotations(t).iter().enumerate() {
                let w = sw[t * k + j];
                w_total += w;
                if w == 0.0 {
                    continue;
                }
                let g = slot.value.expect("checked above");
                let rho_a = ratio_term(
                    1.0,
                    pi_e.prob(st.state, slot.action),
                    1.0,
                    pbp.prob(t, st.state, slot.action),
                    i,
                    t,
                    st.state,
                    slot.action,
                )?
                .unwrap_or(0.0);
                cf_total.add(w * prefix_rho * rho_a * (prefix_value + gamma_t * g));
            }
            let rho_f = ratio_term(
                1.0,
                pi_e.prob(st.state, st.action),
                1.0,
                pbp.prob(t, st.state, st.action),
                i,
                t,
                st.state,
                st.action,
            )?
            .unwrap_or(0.0);
            prefix_rho *= rho_f;
            prefix_value += gamma_t * st.reward;
            gamma_t *= discount;
        }
        let factual_share = 1.0 - w_total;
        let factual = if factual_share == 0.0 {
            0.0
        } else {
            factual_share * prefix_rho * prefix_value
        };
        estimates.push(factual + cf_total.total());
        traj_weights.push(prefix_rho);
    }
    EstimateReport::from_parts("naive_weighted", estimates, traj_weights, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Annotation;
    use crate::mdp_core::Step;

    fn bandit_sample(s: usize, a: usize, r: f64) -> Trajectory {
        Trajectory {
            steps: vec![Step { state: s, action: a, reward: r }],
            final_state: Some(s),
        }
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&[1.0; 7]).unwrap(), 7.0);
        assert_eq!(effective_sample_size(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((effective_sample_size(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-15);
        assert!(effective_sample_size(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn is_on_policy_is_sample_mean() {
        let pi = Policy::new(vec![vec![0.3, 0.7]]).unwrap();
        let data = vec![bandit_sample(0, 0, 1.0), bandit_sample(0, 1, 3.0)];
        let rep = is_estimate(&data, &pi, &pi).unwrap();
        assert!((rep.value - 2.0).abs() < 1e-15);
        assert_eq!(rep.ess, 2.0);
    }

    #[test]
    fn is_reports_support_violation() {
        let pi_b = Policy::new(vec![vec![1.0, 0.0]]).unwrap();
        let pi_e = Policy::new(vec![vec![0.0, 1.0]]).unwrap();
        let data = vec![bandit_sample(0, 1, 1.0)];
        assert!(is_estimate(&data, &pi_e, &pi_b).unwrap_err().is_support_violation());
        // Unobserved unsupported actions are fine.
        let data = vec![bandit_sample(0, 0, 1.0)];
        assert_eq!(is_estimate(&data, &pi_e, &pi_b).unwrap().value, 0.0);
    }

    #[test]
    fn weighted_variant_single_trajectory_returns_its_return() {
        let pi_b = Policy::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let pi_e = Policy::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let tr = Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 1.0 },
                Step { state: 1, action: 1, reward: 2.0 },
            ],
            final_state: Some(0),
        };
        let rep = pdis_estimate(&[tr], &pi_e, &pi_b, 1.0).unwrap();
        let w = weighted_variant(&rep, Normalization::PerStep).unwrap();
        assert!((w.value - 3.0).abs() < 1e-12);
        let w = weighted_variant(&rep, Normalization::Trajectory).unwrap();
        assert!((w.value - rep.value / rep.per_trajectory_weights[0]).abs() < 1e-12);
    }

    #[test]
    fn cstar_deterministic_rewards_equal_expected_reward() {
        let pi_e = Policy::new(vec![vec![0.25, 0.75]]).unwrap();
        let tr = AnnotatedTrajectory::new(
            bandit_sample(0, 0, 1.0),
            2,
            vec![vec![Annotation { action: 1, value: Some(2.0) }]],
        )
        .unwrap();
        let rep = cstar_is_estimate(&[tr], &pi_e).unwrap();
        assert_eq!(rep.value, 0.25 + 1.5);
        assert_eq!(rep.ess, 1.0);
    }
}
