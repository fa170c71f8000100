//! Counterfactual annotations and everything derived from them.
//!
//! - [`annotate`] simulates annotations `g_t^ã` from a Q-function (or the
//!   reward means of a bandit) with optional Gaussian noise and
//!   reproducible availability masks.
//! - [`assign_weights`] turns annotated data into a [`WeightedDataset`] whose
//!   per-step weight vectors sum to one over the factual action and the
//!   available annotations.
//! - [`average_weights`] and [`augmented_policy`] compute the average weight
//!   table `W̄(ã|s,a)` and the augmented behavior policy
//!   `π_b+(a|s) = Σ_ǎ W̄(a|s,ǎ) π_b(ǎ|s)`.
//! - [`fit_approximate_mdp`] and [`correct_bias`] shift annotations sourced
//!   from the behavior policy's Q-function towards the evaluation policy's,
//!   using an empirical model of the MDP.
//! - [`impute_missing`] fills unavailable annotations with the mean of the
//!   observed annotations for the same state–action pair.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::mdp_core::{horizon_q_values, MdpTables, Policy, QTable, Step, TabularMDP, Trajectory};
use crate::numeric::CompensatedSum;
use crate::rng::StreamKey;
use crate::FORMAT_VERSION;

// ── Annotation specification ────────────────────────────────────────────

/// Where simulated annotation values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    /// `Q_t^{π_e}(s, ã)` of the evaluation policy (ideal annotations).
    QEval,
    /// `Q_t^{π_b}(s, ã)` of the behavior policy (biased for `π_e ≠ π_b`).
    QBehavior,
    /// Reward mean `R̄(s, ã)` (bandits).
    RewardMean,
}

/// Which counterfactual slots receive an annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    /// Every counterfactual slot is annotated.
    All,
    /// Each slot is annotated independently with probability `p`.
    Fraction(f64),
    /// Slot `(s, ã)` is annotated with probability `table[s][ã]`; a 0/1
    /// table is a deterministic mask.
    PerPair(Vec<Vec<f64>>),
}

impl Availability {
    fn probability(&self, s: usize, a: usize) -> f64 {
        match self {
            Availability::All => 1.0,
            Availability::Fraction(p) => *p,
            Availability::PerPair(t) => t.get(s).and_then(|r| r.get(a)).copied().unwrap_or(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        match self {
            Availability::All => Ok(()),
            Availability::Fraction(p) if ok(*p) => Ok(()),
            Availability::PerPair(t) if t.iter().flatten().all(|&p| ok(p)) => Ok(()),
            _ => Err(OpeError::InvalidConfig("availability probabilities must lie in [0, 1]".into())),
        }
    }
}

/// Full description of a simulated annotation source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSpec {
    pub source: AnnotationSource,
    /// Standard deviation `σ_G` of additive Gaussian noise.
    pub noise_std: f64,
    pub availability: Availability,
    /// Seed for availability draws and noise.
    pub seed: u64,
}

impl AnnotationSpec {
    /// Noise-free, fully available annotations from `source`.
    pub fn ideal(source: AnnotationSource) -> Self {
        AnnotationSpec {
            source,
            noise_std: 0.0,
            availability: Availability::All,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(OpeError::InvalidConfig("noise_std must be finite and >= 0".into()));
        }
        self.availability.validate()
    }
}

// ── Annotated trajectories ──────────────────────────────────────────────

/// One counterfactual slot: the untaken action and its value if available.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub action: usize,
    /// Annotated value; `None` when the annotation is unavailable.
    pub value: Option<f64>,
}

impl Annotation {
    pub fn available(&self) -> bool {
        self.value.is_some()
    }
}

/// A trajectory with one annotation slot for every untaken action at every
/// step (slots at step `t` are the actions `≠ a_t` in increasing order).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedTrajectory {
    base: Trajectory,
    num_actions: usize,
    slots: Vec<Annotation>,
}

impl AnnotatedTrajectory {
    /// Build from per-step slot lists; each step must list every untaken
    /// action exactly once.
    pub fn new(base: Trajectory, num_actions: usize, per_step: Vec<Vec<Annotation>>) -> Result<Self> {
        if per_step.len() != base.steps.len() {
            return Err(OpeError::DimensionMismatch("one annotation list per step".into()));
        }
        let mut slots = Vec::with_capacity(base.steps.len() * num_actions.saturating_sub(1));
        for (t, (st, list)) in base.steps.iter().zip(per_step).enumerate() {
            let mut list = list;
            list.sort_by_key(|x| x.action);
            let expected: Vec<usize> = (0..num_actions).filter(|&a| a != st.action).collect();
            let got: Vec<usize> = list.iter().map(|x| x.action).collect();
            if expected != got {
                return Err(OpeError::DimensionMismatch(format!(
                    "step {t}: annotation actions {got:?}, expected {expected:?}"
                )));
            }
            slots.extend(list);
        }
        Ok(AnnotatedTrajectory {
            base,
            num_actions,
            slots,
        })
    }

    /// All slots unavailable.
    pub fn unannotated(base: Trajectory, num_actions: usize) -> Self {
        let slots = base
            .steps
            .iter()
            .flat_map(|st| {
                (0..num_actions)
                    .filter(move |&a| a != st.action)
                    .map(|a| Annotation { action: a, value: None })
            })
            .collect();
        AnnotatedTrajectory {
            base,
            num_actions,
            slots,
        }
    }

    pub fn base(&self) -> &Trajectory {
        &self.base
    }
    pub fn steps(&self) -> &[Step] {
        &self.base.steps
    }
    pub fn len(&self) -> usize {
        self.base.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.base.steps.is_empty()
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Slots of step `t`.
    #[inline]
    pub fn step_annotations(&self, t: usize) -> &[Annotation] {
        let k = self.num_actions - 1;
        &self.slots[t * k..(t + 1) * k]
    }

    fn step_annotations_mut(&mut self, t: usize) -> &mut [Annotation] {
        let k = self.num_actions - 1;
        &mut self.slots[t * k..(t + 1) * k]
    }

    /// Annotated value for action `a` at step `t` (`None` for the factual
    /// action or an unavailable slot).
    #[inline]
    pub fn value(&self, t: usize, a: usize) -> Option<f64> {
        let factual = self.base.steps[t].action;
        if a == factual {
            return None;
        }
        let idx = if a < factual { a } else { a - 1 };
        self.step_annotations(t)[idx].value
    }

    /// Number of available annotations over the whole trajectory.
    pub fn num_available(&self) -> usize {
        self.slots.iter().filter(|x| x.available()).count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedStepRecord {
    state: usize,
    action: usize,
    reward: f64,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    action: usize,
    available: bool,
    value: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedLine {
    format_version: u32,
    num_actions: usize,
    steps: Vec<AnnotatedStepRecord>,
    #[serde(default)]
    final_state: Option<usize>,
}

/// Write annotated trajectories as JSON lines; every step carries an
/// `annotations` array of `{action, available, value}` records.
pub fn write_annotated_jsonl<W: Write>(mut out: W, data: &[AnnotatedTrajectory]) -> Result<()> {
    for tr in data {
        let steps = tr
            .steps()
            .iter()
            .enumerate()
            .map(|(t, st)| AnnotatedStepRecord {
                state: st.state,
                action: st.action,
                reward: st.reward,
                annotations: tr
                    .step_annotations(t)
                    .iter()
                    .map(|x| AnnotationRecord {
                        action: x.action,
                        available: x.available(),
                        value: x.value,
                    })
                    .collect(),
            })
            .collect();
        let line = AnnotatedLine {
            format_version: FORMAT_VERSION,
            num_actions: tr.num_actions,
            steps,
            final_state: tr.base.final_state,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read annotated trajectories written by [`write_annotated_jsonl`].
pub fn read_annotated_jsonl<R: BufRead>(input: R) -> Result<Vec<AnnotatedTrajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotatedLine = serde_json::from_str(&line)?;
        if parsed.format_version != FORMAT_VERSION {
            return Err(OpeError::InvalidConfig(format!(
                "unsupported format_version {}",
                parsed.format_version
            )));
        }
        let mut steps = Vec::with_capacity(parsed.steps.len());
        let mut per_step = Vec::with_capacity(parsed.steps.len());
        for rec in parsed.steps {
            steps.push(Step {
                state: rec.state,
                action: rec.action,
                reward: rec.reward,
            });
            let mut list = Vec::with_capacity(rec.annotations.len());
            for a in rec.annotations {
                if a.available != a.value.is_some() {
                    return Err(OpeError::InvalidConfig(
                        "annotation value must be present exactly when available".into(),
                    ));
                }
                list.push(Annotation {
                    action: a.action,
                    value: a.value,
                });
            }
            per_step.push(list);
        }
        out.push(AnnotatedTrajectory::new(
            Trajectory {
                steps,
                final_state: parsed.final_state,
            },
            parsed.num_actions,
            per_step,
        )?);
    }
    Ok(out)
}

// ── Simulated annotation ────────────────────────────────────────────────

/// Annotate with values from `value(t, s, ã)`.
///
/// Availability of slot `(i, t, ã)` is decided by the counter-based uniform
/// `StreamKey::root(seed).tag("availability").at_all([i, t, ã])`, so masks are
/// reproducible, independent of iteration order, and nested across
/// availability fractions. Noise for trajectory `i` comes from the stream
/// `tag("noise").at(i)`, drawn for every slot (available or not) so the noise
/// on a slot does not depend on the mask.
pub fn annotate_with<F>(
    dataset: &[Trajectory],
    num_actions: usize,
    value: F,
    spec: &AnnotationSpec,
) -> Result<Vec<AnnotatedTrajectory>>
where
    F: Fn(usize, usize, usize) -> f64,
{
    spec.validate()?;
    if num_actions == 0 {
        return Err(OpeError::DimensionMismatch("num_actions must be positive".into()));
    }
    let root = StreamKey::root(spec.seed);
    let avail_key = root.tag("availability");
    let noise_key = root.tag("noise");
    let mut out = Vec::with_capacity(dataset.len());
    for (i, tr) in dataset.iter().enumerate() {
        let mut noise_rng = (spec.noise_std > 0.0).then(|| noise_key.at(i as u64).rng());
        let mut slots = Vec::with_capacity(tr.steps.len() * (num_actions - 1));
        for (t, st) in tr.steps.iter().enumerate() {
            if st.action >= num_actions {
                return Err(OpeError::DimensionMismatch(format!(
                    "trajectory {i} step {t}: action {} >= {num_actions}",
                    st.action
                )));
            }
            for a in (0..num_actions).filter(|&a| a != st.action) {
                let z: f64 = match noise_rng.as_mut() {
                    Some(r) => r.sample(StandardNormal),
                    None => 0.0,
                };
                let p = spec.availability.probability(st.state, a);
                let available = p >= 1.0
                    || (p > 0.0 && avail_key.at_all(&[i as u64, t as u64, a as u64]).uniform() < p);
                let v = if available {
                    let mean = value(t, st.state, a);
                    Some(if spec.noise_std > 0.0 {
                        mean + spec.noise_std * z
                    } else {
                        mean
                    })
                } else {
                    None
                };
                slots.push(Annotation { action: a, value: v });
            }
        }
        out.push(AnnotatedTrajectory {
            base: tr.clone(),
            num_actions,
            slots,
        });
    }
    Ok(out)
}

/// Annotate from a precomputed horizon Q-table.
pub fn annotate_with_q(
    dataset: &[Trajectory],
    q: &QTable,
    spec: &AnnotationSpec,
) -> Result<Vec<AnnotatedTrajectory>> {
    for tr in dataset {
        if tr.steps.len() > q.horizon() {
            return Err(OpeError::DimensionMismatch("trajectory longer than Q horizon".into()));
        }
        if tr.steps.iter().any(|st| st.state >= q.num_states()) {
            return Err(OpeError::DimensionMismatch("state outside Q table".into()));
        }
    }
    annotate_with(dataset, q.num_actions(), |t, s, a| q.q(t, s, a), spec)
}

/// Annotate a dataset according to `spec`.
///
/// `q_eval` needs `target_policy`, `q_behavior` needs `behavior_policy`.
pub fn annotate(
    dataset: &[Trajectory],
    mdp: &TabularMDP,
    target_policy: Option<&Policy>,
    behavior_policy: Option<&Policy>,
    spec: &AnnotationSpec,
) -> Result<Vec<AnnotatedTrajectory>> {
    match spec.source {
        AnnotationSource::RewardMean => {
            crate::mdp_core::check_dataset_dims(dataset, mdp.num_states(), mdp.num_actions())?;
            annotate_with(dataset, mdp.num_actions(), |_, s, a| mdp.reward_mean(s, a), spec)
        }
        AnnotationSource::QEval => {
            let pi = target_policy.ok_or_else(|| {
                OpeError::InvalidConfig("source q_eval requires an evaluation policy".into())
            })?;
            annotate_with_q(dataset, &horizon_q_values(mdp, pi)?, spec)
        }
        AnnotationSource::QBehavior => {
            let pi = behavior_policy.ok_or_else(|| {
                OpeError::InvalidConfig("source q_behavior requires a behavior policy".into())
            })?;
            annotate_with_q(dataset, &horizon_q_values(mdp, pi)?, spec)
        }
    }
}

// ── Weights ─────────────────────────────────────────────────────────────

/// Per-sample weighting schemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightScheme {
    /// `1/|available set|` to the factual action and every available annotation.
    EqualSplit,
    /// A fixed vector over actions, renormalized over the available set.
    Constant { weights: Vec<f64> },
    /// A fixed vector per factual action (`weights[a]` when `a` was taken),
    /// renormalized over the available set.
    ByFactual { weights: Vec<Vec<f64>> },
    /// Factual share `u ~ U[center − width/2, center + width/2]`, the rest
    /// split equally among available annotations (factual 1 if none).
    RandomUniform { center: f64, width: f64, seed: u64 },
    /// Weight 1 on the factual action.
    FactualOnly,
}

/// Annotated trajectories with a weight vector over actions at every step.
#[derive(Clone, Debug)]
pub struct WeightedDataset {
    pub trajectories: Vec<AnnotatedTrajectory>,
    /// `weights[i][t * num_actions + a]`.
    pub weights: Vec<Vec<f64>>,
}

impl WeightedDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
    /// Weight vector of trajectory `i` at step `t`.
    #[inline]
    pub fn step_weights(&self, i: usize, t: usize) -> &[f64] {
        let na = self.trajectories[i].num_actions;
        &self.weights[i][t * na..(t + 1) * na]
    }

    /// Check the weight invariants: nonnegative, summing to one, and zero on
    /// unavailable annotations.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.trajectories.len() {
            return Err(OpeError::DimensionMismatch("one weight table per trajectory".into()));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            let na = tr.num_actions;
            if self.weights[i].len() != tr.len() * na {
                return Err(OpeError::DimensionMismatch(format!("weights of trajectory {i}")));
            }
            for t in 0..tr.len() {
                let w = self.step_weights(i, t);
                let total: f64 = w.iter().sum();
                if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(OpeError::InvalidProbability(format!(
                        "weights at trajectory {i}, step {t} are {w:?}"
                    )));
                }
                let factual = tr.steps()[t].action;
                for (a, &x) in w.iter().enumerate() {
                    if a != factual && x != 0.0 && tr.value(t, a).is_none() {
                        return Err(OpeError::InvalidProbability(format!(
                            "nonzero weight on unavailable annotation (trajectory {i}, step {t}, action {a})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn renormalize_over_available(
    raw: &[f64],
    factual: usize,
    available: &[bool],
    out: &mut [f64],
) -> Result<()> {
    let mut total = 0.0;
    for (a, &w) in raw.iter().enumerate() {
        if w < 0.0 {
            return Err(OpeError::InvalidConfig("weights must be nonnegative".into()));
        }
        if a == factual || available[a] {
            total += w;
        }
    }
    if !(total > 0.0) {
        return Err(OpeError::InvalidConfig(
            "constant weight vector has zero mass on the available set".into(),
        ));
    }
    for (a, o) in out.iter_mut().enumerate() {
        *o = if a == factual || available[a] { raw[a] / total } else { 0.0 };
    }
    Ok(())
}

/// Assign per-step weights according to `scheme`.
pub fn assign_weights(annotated: Vec<AnnotatedTrajectory>, scheme: &WeightScheme) -> Result<WeightedDataset> {
    let mut weights = Vec::with_capacity(annotated.len());
    let random_key = match scheme {
        WeightScheme::RandomUniform { center, width, seed } => {
            let lo = center - width / 2.0;
            let hi = center + width / 2.0;
            if !(width >= &0.0) || lo < 0.0 || hi > 1.0 {
                return Err(OpeError::InvalidConfig(format!(
                    "random_uniform range [{lo}, {hi}] must lie inside [0, 1]"
                )));
            }
            Some(StreamKey::root(*seed).tag("weights"))
        }
        _ => None,
    };
    for (i, tr) in annotated.iter().enumerate() {
        let na = tr.num_actions;
        let mut w = vec![0.0; tr.len() * na];
        let mut available = vec![false; na];
        for t in 0..tr.len() {
            let factual = tr.steps()[t].action;
            for (a, av) in available.iter_mut().enumerate() {
                *av = a != factual && tr.value(t, a).is_some();
            }
            let n_avail = available.iter().filter(|&&x| x).count();
            let out = &mut w[t * na..(t + 1) * na];
            match scheme {
                WeightScheme::EqualSplit => {
                    let share = 1.0 / (n_avail + 1) as f64;
                    for (a, o) in out.iter_mut().enumerate() {
                        *o = if a == factual || available[a] { share } else { 0.0 };
                    }
                }
                WeightScheme::FactualOnly => out[factual] = 1.0,
                WeightScheme::Constant { weights } => {
                    if weights.len() != na {
                        return Err(OpeError::DimensionMismatch("constant weight length".into()));
                    }
                    renormalize_over_available(weights, factual, &available, out)?;
                }
                WeightScheme::ByFactual { weights } => {
                    let row = weights.get(factual).filter(|r| r.len() == na).ok_or_else(|| {
                        OpeError::DimensionMismatch("by_factual weight table shape".into())
                    })?;
                    renormalize_over_available(row, factual, &available, out)?;
                }
                WeightScheme::RandomUniform { center, width, .. } => {
                    if n_avail == 0 {
                        out[factual] = 1.0;
                    } else {
                        let key = random_key.expect("key set for random scheme");
                        let u = key.at_all(&[i as u64, t as u64]).uniform();
                        let share = center - width / 2.0 + width * u;
                        let rest = (1.0 - share) / n_avail as f64;
                        for (a, o) in out.iter_mut().enumerate() {
                            *o = if a == factual {
                                share
                            } else if available[a] {
                                rest
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
        weights.push(w);
    }
    Ok(WeightedDataset {
        trajectories: annotated,
        weights,
    })
}

// ── Average weights and the augmented behavior policy ───────────────────

/// Whether weight statistics are pooled over time steps or kept per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Pooled,
    PerStep,
}

/// Moments of the weight vectors observed for each factual pair `(s, a)`:
/// mean `W̄(ã|s,a)`, variance `σ_W²(ã|s,a)` and covariance
/// `Cov(W(a_i|s,a), W(a_j|s,a))` (population moments), plus counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AvgWeightTable {
    num_states: usize,
    num_actions: usize,
    slices: usize,
    counts: Vec<u64>,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl AvgWeightTable {
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    /// Number of time slices (1 when pooled).
    pub fn slices(&self) -> usize {
        self.slices
    }
    #[inline]
    fn slice(&self, t: usize) -> usize {
        if self.slices == 1 {
            0
        } else {
            t.min(self.slices - 1)
        }
    }
    #[inline]
    fn pair(&self, t: usize, s: usize, a: usize) -> usize {
        (self.slice(t) * self.num_states + s) * self.num_actions + a
    }
    /// Occurrences of factual pair `(s, a)` (at step `t` when per-step).
    pub fn count(&self, t: usize, s: usize, a: usize) -> u64 {
        self.counts[self.pair(t, s, a)]
    }
    /// `W̄(ã|s,a)`; `NaN` when the pair was never observed.
    #[inline]
    pub fn mean(&self, t: usize, s: usize, a: usize, a_tilde: usize) -> f64 {
        self.mean[self.pair(t, s, a) * self.num_actions + a_tilde]
    }
    /// `σ_W²(ã|s,a)`.
    pub fn var(&self, t: usize, s: usize, a: usize, a_tilde: usize) -> f64 {
        self.cov(t, s, a, a_tilde, a_tilde)
    }
    /// `Cov(W(a_i|s,a), W(a_j|s,a))`.
    pub fn cov(&self, t: usize, s: usize, a: usize, i: usize, j: usize) -> f64 {
        let na = self.num_actions;
        self.cov[(self.pair(t, s, a) * na + i) * na + j]
    }

    /// Population moments of explicit discrete weight distributions:
    /// `dists[s * num_actions + a]` lists `(probability, weight vector)`
    /// outcomes for factual pair `(s, a)`; an empty list marks the pair as
    /// unobserved.
    pub fn from_distributions(
        num_states: usize,
        num_actions: usize,
        dists: &[Vec<(f64, Vec<f64>)>],
    ) -> Result<Self> {
        if dists.len() != num_states * num_actions {
            return Err(OpeError::DimensionMismatch("one distribution per (s, a)".into()));
        }
        let na = num_actions;
        let mut counts = vec![0; num_states * na];
        let mut mean = vec![f64::NAN; num_states * na * na];
        let mut cov = vec![f64::NAN; num_states * na * na * na];
        for (p_idx, dist) in dists.iter().enumerate() {
            if dist.is_empty() {
                continue;
            }
            let total: f64 = dist.iter().map(|(p, _)| p).sum();
            if (total - 1.0).abs() > 1e-9 || dist.iter().any(|(p, w)| *p < 0.0 || w.len() != na) {
                return Err(OpeError::InvalidProbability(format!(
                    "weight distribution for pair {p_idx}"
                )));
            }
            counts[p_idx] = 1;
            for k in 0..na {
                mean[p_idx * na + k] = dist.iter().map(|(p, w)| p * w[k]).sum();
            }
            for i in 0..na {
                for j in 0..na {
                    let (mi, mj) = (mean[p_idx * na + i], mean[p_idx * na + j]);
                    cov[(p_idx * na + i) * na + j] =
                        dist.iter().map(|(p, w)| p * (w[i] - mi) * (w[j] - mj)).sum();
                }
            }
        }
        Ok(AvgWeightTable {
            num_states,
            num_actions,
            slices: 1,
            counts,
            mean,
            cov,
        })
    }
}

/// Empirical weight moments per factual pair `(s, a)`, pooled over time
/// steps or per step. `horizon` is only used for per-step pooling.
pub fn average_weights(
    wd: &WeightedDataset,
    num_states: usize,
    pooling: Pooling,
    horizon: usize,
) -> Result<AvgWeightTable> {
    if wd.is_empty() {
        return Err(OpeError::EmptyInput("weighted dataset is empty".into()));
    }
    let na = wd.trajectories[0].num_actions;
    let slices = match pooling {
        Pooling::Pooled => 1,
        Pooling::PerStep => horizon.max(1),
    };
    let n_pairs = slices * num_states * na;
    let slice_of = |t: usize| if slices == 1 { 0 } else { t.min(slices - 1) };
    let mut counts = vec![0u64; n_pairs];
    let mut sums = vec![CompensatedSum::new(); n_pairs * na];
    for (i, tr) in wd.trajectories.iter().enumerate() {
        if tr.num_actions != na {
            return Err(OpeError::DimensionMismatch("mixed action counts".into()));
        }
        for (t, st) in tr.steps().iter().enumerate() {
            if st.state >= num_states {
                return Err(OpeError::DimensionMismatch(format!("state {} >= {num_states}", st.state)));
            }
            let p = (slice_of(t) * num_states + st.state) * na + st.action;
            counts[p] += 1;
            for (k, &w) in wd.step_weights(i, t).iter().enumerate() {
                sums[p * na + k].add(w);
            }
        }
    }
    let mut mean = vec![f64::NAN; n_pairs * na];
    for p in 0..n_pairs {
        if counts[p] > 0 {
            for k in 0..na {
                mean[p * na + k] = sums[p * na + k].total() / counts[p] as f64;
            }
        }
    }
    let mut cov_sums = vec![CompensatedSum::new(); n_pairs * na * na];
    for (i, tr) in wd.trajectories.iter().enumerate() {
        for (t, st) in tr.steps().iter().enumerate() {
            let p = (slice_of(t) * num_states + st.state) * na + st.action;
            let w = wd.step_weights(i, t);
            for a_i in 0..na {
                let di = w[a_i] - mean[p * na + a_i];
                for a_j in 0..na {
                    let dj = w[a_j] - mean[p * na + a_j];
                    cov_sums[(p * na + a_i) * na + a_j].add(di * dj);
                }
            }
        }
    }
    let cov = cov_sums
        .iter()
        .enumerate()
        .map(|(idx, acc)| {
            let c = counts[idx / (na * na)];
            if c == 0 {
                f64::NAN
            } else {
                acc.total() / c as f64
            }
        })
        .collect();
    Ok(AvgWeightTable {
        num_states,
        num_actions: na,
        slices,
        counts,
        mean,
        cov,
    })
}

/// The augmented behavior policy `π_b+` (per time slice when the weight
/// table is per-step).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPolicy {
    num_states: usize,
    num_actions: usize,
    slices: usize,
    probs: Vec<f64>,
}

impl AugmentedPolicy {
    /// `π_b+ = π_b` (factual-only weighting).
    pub fn from_policy(pi_b: &Policy) -> Self {
        AugmentedPolicy {
            num_states: pi_b.num_states(),
            num_actions: pi_b.num_actions(),
            slices: 1,
            probs: pi_b.table().to_vec(),
        }
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
    /// `π_b+(a|s)` at step `t`.
    #[inline]
    pub fn prob(&self, t: usize, s: usize, a: usize) -> f64 {
        let slice = if self.slices == 1 { 0 } else { t.min(self.slices - 1) };
        self.probs[(slice * self.num_states + s) * self.num_actions + a]
    }
    /// Row `π_b+(·|s)` at step `t`.
    pub fn row(&self, t: usize, s: usize) -> &[f64] {
        let slice = if self.slices == 1 { 0 } else { t.min(self.slices - 1) };
        let start = (slice * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }
    /// The first slice as an ordinary policy.
    pub fn to_policy(&self) -> Result<Policy> {
        Policy::from_flat(
            self.num_states,
            self.num_actions,
            self.probs[..self.num_states * self.num_actions].to_vec(),
        )
    }
}

/// Def.-1 augmented behavior policy
/// `π_b+(a|s) = W̄(a|s,a) π_b(a|s) + Σ_{ǎ≠a} W̄(a|s,ǎ) π_b(ǎ|s)`.
///
/// A factual pair that never occurs in the data contributes as if it were
/// weighted factual-only (`W̄(·|s,ǎ) = e_ǎ`), so states without data copy π_b.
pub fn augmented_policy(wbar: &AvgWeightTable, pi_b: &Policy) -> Result<AugmentedPolicy> {
    if wbar.num_states != pi_b.num_states() || wbar.num_actions != pi_b.num_actions() {
        return Err(OpeError::DimensionMismatch("weight table vs behavior policy".into()));
    }
    let (ns, na) = (wbar.num_states, wbar.num_actions);
    let mut probs = vec![0.0; wbar.slices * ns * na];
    for slice in 0..wbar.slices {
        for s in 0..ns {
            for a in 0..na {
                let mut acc = CompensatedSum::new();
                for a_b in 0..na {
                    let pb = pi_b.prob(s, a_b);
                    if pb == 0.0 {
                        continue;
                    }
                    let pair = (slice * ns + s) * na + a_b;
                    let w = if wbar.counts[pair] == 0 {
                        if a == a_b {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        wbar.mean[pair * na + a]
                    };
                    if w != 0.0 {
                        acc.add(w * pb);
                    }
                }
                probs[(slice * ns + s) * na + a] = acc.total();
            }
        }
    }
    Ok(AugmentedPolicy {
        num_states: ns,
        num_actions: na,
        slices: wbar.slices,
        probs,
    })
}

// ── Approximate model and bias correction ───────────────────────────────

/// Empirical MDP fitted from trajectories.
#[derive(Clone, Debug)]
pub struct ApproxMDP {
    /// Model with `p̂` and `r̂`; unsupported pairs self-loop with reward 0.
    pub mdp: TabularMDP,
    /// Whether `(s, a)` was observed (`s * num_actions + a`).
    pub supported: Vec<bool>,
    /// Visit counts per `(s, a)`.
    pub counts: Vec<u64>,
}

impl ApproxMDP {
    pub fn is_supported(&self, s: usize, a: usize) -> bool {
        self.supported[s * self.mdp.num_actions() + a]
    }
    /// Fraction of state–action pairs with data.
    pub fn supported_fraction(&self) -> f64 {
        self.supported.iter().filter(|&&x| x).count() as f64 / self.supported.len() as f64
    }
}

/// Fit `p̂(s'|s,a)` and `r̂(s,a)` from empirical counts and means. The next
/// state of the last step is the trajectory's recorded `final_state`; the
/// initial distribution is the empirical first-state distribution.
pub fn fit_approximate_mdp(
    dataset: &[Trajectory],
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    discount: f64,
) -> Result<ApproxMDP> {
    if dataset.is_empty() {
        return Err(OpeError::EmptyInput("cannot fit a model to an empty dataset".into()));
    }
    crate::mdp_core::check_dataset_dims(dataset, num_states, num_actions)?;
    let n_pairs = num_states * num_actions;
    let mut counts = vec![0u64; n_pairs];
    let mut reward_sums = vec![CompensatedSum::new(); n_pairs];
    let mut next_counts: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); n_pairs];
    let mut first_counts = vec![0u64; num_states];
    let mut n_first = 0u64;
    for tr in dataset {
        if let Some(first) = tr.steps.first() {
            first_counts[first.state] += 1;
            n_first += 1;
        }
        for (t, st) in tr.steps.iter().enumerate() {
            let p = st.state * num_actions + st.action;
            counts[p] += 1;
            reward_sums[p].add(st.reward);
            let next = if t + 1 < tr.steps.len() {
                Some(tr.steps[t + 1].state)
            } else {
                tr.final_state
            };
            if let Some(s2) = next {
                if s2 >= num_states {
                    return Err(OpeError::DimensionMismatch(format!("final state {s2}")));
                }
                *next_counts[p].entry(s2).or_insert(0) += 1;
            }
        }
    }
    let mut transitions = Vec::with_capacity(n_pairs);
    let mut reward_mean = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let s = p / num_actions;
        let total: u64 = next_counts[p].values().sum();
        if counts[p] == 0 || total == 0 {
            transitions.push(vec![(s, 1.0)]);
        } else {
            transitions.push(
                next_counts[p]
                    .iter()
                    .map(|(&s2, &c)| (s2, c as f64 / total as f64))
                    .collect(),
            );
        }
        reward_mean.push(if counts[p] == 0 {
            0.0
        } else {
            reward_sums[p].total() / counts[p] as f64
        });
    }
    let initial_dist = if n_first == 0 {
        vec![1.0 / num_states as f64; num_states]
    } else {
        first_counts.iter().map(|&c| c as f64 / n_first as f64).collect()
    };
    let mdp = TabularMDP::new(MdpTables {
        num_states,
        num_actions,
        transitions,
        reward_mean,
        reward_std: vec![0.0; n_pairs],
        initial_dist,
        discount,
        horizon,
        terminal_states: vec![],
    })?;
    Ok(ApproxMDP {
        mdp,
        supported: counts.iter().map(|&c| c > 0).collect(),
        counts,
    })
}

/// Replace each available annotation at a supported `(s, ã)` by
/// `g − (Q̂^{π_b}_t(s,ã) − Q̂^{π_e}_t(s,ã))`; unsupported pairs pass through.
pub fn correct_bias_with_q(
    annotated: &[AnnotatedTrajectory],
    mhat: &ApproxMDP,
    q_b_hat: &QTable,
    q_e_hat: &QTable,
) -> Result<Vec<AnnotatedTrajectory>> {
    let mut out = annotated.to_vec();
    for tr in &mut out {
        if tr.len() > q_b_hat.horizon() || tr.len() > q_e_hat.horizon() {
            return Err(OpeError::DimensionMismatch(
                "trajectory longer than the model horizon".into(),
            ));
        }
        for t in 0..tr.len() {
            let s = tr.base.steps[t].state;
            for slot in tr.step_annotations_mut(t) {
                if let Some(g) = slot.value {
                    if mhat.is_supported(s, slot.action) {
                        let eps = q_b_hat.q(t, s, slot.action) - q_e_hat.q(t, s, slot.action);
                        slot.value = Some(g - eps);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bias-correct annotations sourced from `Q^{π_b}` using the approximate model.
pub fn correct_bias(
    annotated: &[AnnotatedTrajectory],
    mhat: &ApproxMDP,
    pi_b: &Policy,
    pi_e: &Policy,
) -> Result<Vec<AnnotatedTrajectory>> {
    let qb = horizon_q_values(&mhat.mdp, pi_b)?;
    let qe = horizon_q_values(&mhat.mdp, pi_e)?;
    correct_bias_with_q(annotated, mhat, &qb, &qe)
}

// ── Imputation ──────────────────────────────────────────────────────────

/// Fill every unavailable slot `(t, s, ã)` with the mean of the observed
/// annotations for `(s, ã)` (pooled over trajectories and, unless `pooling`
/// is per-step, over time steps). Slots without support stay missing.
/// Idempotent.
pub fn impute_missing(annotated: &[AnnotatedTrajectory], pooling: Pooling) -> Vec<AnnotatedTrajectory> {
    let key_of = |t: usize, s: usize, a: usize| match pooling {
        Pooling::Pooled => (0, s, a),
        Pooling::PerStep => (t, s, a),
    };
    let mut stats: HashMap<(usize, usize, usize), (CompensatedSum, u64)> = HashMap::new();
    for tr in annotated {
        for t in 0..tr.len() {
            let s = tr.base.steps[t].state;
            for slot in tr.step_annotations(t) {
                if let Some(g) = slot.value {
                    let e = stats.entry(key_of(t, s, slot.action)).or_default();
                    e.0.add(g);
                    e.1 += 1;
                }
            }
        }
    }
    let mut out = annotated.to_vec();
    for tr in &mut out {
        for t in 0..tr.len() {
            let s = tr.base.steps[t].state;
            for slot in tr.step_annotations_mut(t) {
                if slot.value.is_none() {
                    if let Some((sum, n)) = stats.get(&key_of(t, s, slot.action)) {
                        slot.value = Some(sum.total() / *n as f64);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(steps: &[(usize, usize, f64)]) -> Trajectory {
        Trajectory {
            steps: steps
                .iter()
                .map(|&(state, action, reward)| Step { state, action, reward })
                .collect(),
            final_state: None,
        }
    }

    #[test]
    fn equal_split_and_factual_only() {
        let a = AnnotatedTrajectory::new(
            traj(&[(0, 0, 1.0), (1, 1, 0.0)]),
            2,
            vec![
                vec![Annotation { action: 1, value: Some(2.0) }],
                vec![Annotation { action: 0, value: None }],
            ],
        )
        .unwrap();
        let wd = assign_weights(vec![a.clone()], &WeightScheme::EqualSplit).unwrap();
        wd.validate().unwrap();
        assert_eq!(wd.step_weights(0, 0), &[0.5, 0.5]);
        assert_eq!(wd.step_weights(0, 1), &[0.0, 1.0]);
        let wd = assign_weights(vec![a.clone()], &WeightScheme::FactualOnly).unwrap();
        assert_eq!(wd.step_weights(0, 0), &[1.0, 0.0]);
        let wd = assign_weights(
            vec![a],
            &WeightScheme::Constant {
                weights: vec![0.2, 0.6],
            },
        )
        .unwrap();
        assert!((wd.step_weights(0, 0)[0] - 0.25).abs() < 1e-15);
        assert_eq!(wd.step_weights(0, 1), &[0.0, 1.0]);
    }

    #[test]
    fn average_weights_worked_example() {
        // Two samples for the same (s, a=0) with weights [0.8,0.2] and [1,0].
        let t1 = AnnotatedTrajectory::new(
            traj(&[(0, 0, 1.0)]),
            2,
            vec![vec![Annotation { action: 1, value: Some(0.0) }]],
        )
        .unwrap();
        let t2 = AnnotatedTrajectory::unannotated(traj(&[(0, 0, 1.0)]), 2);
        let wd = WeightedDataset {
            trajectories: vec![t1, t2],
            weights: vec![vec![0.8, 0.2], vec![1.0, 0.0]],
        };
        wd.validate().unwrap();
        let wbar = average_weights(&wd, 1, Pooling::Pooled, 1).unwrap();
        assert!((wbar.mean(0, 0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((wbar.mean(0, 0, 0, 1) - 0.1).abs() < 1e-15);
        assert!((wbar.var(0, 0, 0, 1) - 0.01).abs() < 1e-15);
        assert!((wbar.cov(0, 0, 0, 0, 1) + 0.01).abs() < 1e-15);
        assert_eq!(wbar.count(0, 0, 1), 0);
        // With π_b = [α, 1-α] the augmented policy is [(1+α)/2, (1-α)/2]
        // when action 1 carries weight [0,1]-style factual-only default.
        let alpha = 0.8;
        let pi_b = Policy::new(vec![vec![1.0, 0.0]]).unwrap();
        let aug = augmented_policy(&wbar, &pi_b).unwrap();
        assert!((aug.prob(0, 0, 0) - 0.9).abs() < 1e-15);
        let _ = alpha;
    }

    #[test]
    fn imputation_fills_and_is_idempotent() {
        let t1 = AnnotatedTrajectory::new(
            traj(&[(0, 0, 1.0)]),
            2,
            vec![vec![Annotation { action: 1, value: Some(3.0) }]],
        )
        .unwrap();
        let t2 = AnnotatedTrajectory::unannotated(traj(&[(0, 0, 1.0), (5, 1, 0.0)]), 2);
        let once = impute_missing(&[t1.clone(), t2], Pooling::Pooled);
        assert_eq!(once[1].value(0, 1), Some(3.0));
        assert_eq!(once[1].value(1, 0), None);
        let twice = impute_missing(&once, Pooling::Pooled);
        assert_eq!(once, twice);
        let unchanged = impute_missing(&[t1.clone()], Pooling::Pooled);
        assert_eq!(unchanged, vec![t1]);
    }

    #[test]
    fn annotated_jsonl_round_trip() {
        let t1 = AnnotatedTrajectory::new(
            traj(&[(0, 0, 1.0), (1, 1, -0.5)]),
            3,
            vec![
                vec![
                    Annotation { action: 1, value: Some(2.5) },
                    Annotation { action: 2, value: None },
                ],
                vec![
                    Annotation { action: 0, value: None },
                    Annotation { action: 2, value: Some(-1.0) },
                ],
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_annotated_jsonl(&mut buf, &[t1.clone()]).unwrap();
        let back = read_annotated_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![t1]);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"available\":false"));
        assert!(text.contains("\"annotations\""));
    }
}
