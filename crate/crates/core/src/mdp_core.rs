//! Tabular finite-horizon MDPs, policies and trajectories, with exact
//! dynamic programming and trajectory sampling.
//!
//! Conventions:
//!
//! - States and actions are dense indices `0..num_states`, `0..num_actions`.
//! - Time steps are 0-based in code: step `t ∈ 0..horizon` corresponds to the
//!   1-based step `t + 1` in the usual notation.
//! - Reward-to-go is discounted *relative to the current step*:
//!   `Q_t(s,a) = R̄(s,a) + γ Σ_{s'} p(s'|s,a) V_{t+1}(s')`, `V_horizon ≡ 0`.
//! - Transitions are stored sparsely (sorted `(next_state, prob)` rows) and
//!   serialized densely.
//! - Terminal states self-loop with probability one and pay zero reward.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::numeric::CompensatedSum;
use crate::FORMAT_VERSION;

/// Tolerance used for every "sums to one" invariant.
pub const PROB_TOL: f64 = 1e-9;

// ── MDP ─────────────────────────────────────────────────────────────────

/// Raw tables from which a [`TabularMDP`] is validated and built.
///
/// Flat tables are indexed `s * num_actions + a`.
#[derive(Clone, Debug)]
pub struct MdpTables {
    pub num_states: usize,
    pub num_actions: usize,
    /// Sparse transition rows, one per `(s, a)`: `(next_state, probability)`.
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub reward_mean: Vec<f64>,
    pub reward_std: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
    pub horizon: usize,
    pub terminal_states: Vec<usize>,
}

/// A finite-horizon tabular MDP `(S, A, P, R̄, σ_R, d1, γ, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMDP {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    reward_mean: Vec<f64>,
    reward_std: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
    horizon: usize,
    terminal: Vec<bool>,
}

impl TabularMDP {
    /// Validate and build an MDP from raw tables.
    ///
    /// Duplicate entries in a transition row are merged and zero entries
    /// dropped; rows are stored sorted by next state.
    pub fn new(tables: MdpTables) -> Result<Self> {
        let MdpTables {
            num_states,
            num_actions,
            transitions,
            reward_mean,
            reward_std,
            initial_dist,
            discount,
            horizon,
            terminal_states,
        } = tables;
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(OpeError::DimensionMismatch(
                "num_states, num_actions and horizon must be positive".into(),
            ));
        }
        let n_pairs = num_states * num_actions;
        for (name, len) in [
            ("transitions", transitions.len()),
            ("reward_mean", reward_mean.len()),
            ("reward_std", reward_std.len()),
        ] {
            if len != n_pairs {
                return Err(OpeError::DimensionMismatch(format!(
                    "{name} has {len} rows, expected {n_pairs}"
                )));
            }
        }
        if initial_dist.len() != num_states {
            return Err(OpeError::DimensionMismatch(format!(
                "initial_dist has length {}, expected {num_states}",
                initial_dist.len()
            )));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(OpeError::InvalidConfig(format!(
                "discount {discount} outside [0, 1]"
            )));
        }
        check_distribution(&initial_dist, "initial_dist")?;
        if let Some(i) = reward_std.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(OpeError::InvalidConfig(format!(
                "reward_std[{i}] = {} must be finite and nonnegative",
                reward_std[i]
            )));
        }
        if let Some(i) = reward_mean.iter().position(|x| !x.is_finite()) {
            return Err(OpeError::InvalidConfig(format!(
                "reward_mean[{i}] is not finite"
            )));
        }
        let mut rows = Vec::with_capacity(n_pairs);
        for (idx, row) in transitions.into_iter().enumerate() {
            let mut row = row;
            row.sort_by_key(|&(s, _)| s);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (s2, p) in row {
                if s2 >= num_states {
                    return Err(OpeError::DimensionMismatch(format!(
                        "transition row {idx} points to state {s2} >= {num_states}"
                    )));
                }
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(OpeError::InvalidProbability(format!(
                        "transition row {idx} has entry {p}"
                    )));
                }
                if p == 0.0 {
                    continue;
                }
                match merged.last_mut() {
                    Some(last) if last.0 == s2 => last.1 += p,
                    _ => merged.push((s2, p)),
                }
            }
            let total: f64 = merged.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(OpeError::InvalidProbability(format!(
                    "transition row for (s={}, a={}) sums to {total}",
                    idx / num_actions,
                    idx % num_actions
                )));
            }
            rows.push(merged);
        }
        let mut terminal = vec![false; num_states];
        for &s in &terminal_states {
            if s >= num_states {
                return Err(OpeError::DimensionMismatch(format!(
                    "terminal state {s} >= {num_states}"
                )));
            }
            for a in 0..num_actions {
                let idx = s * num_actions + a;
                if rows[idx].len() != 1 || rows[idx][0].0 != s {
                    return Err(OpeError::InvalidConfig(format!(
                        "terminal state {s} must self-loop with probability 1 under action {a}"
                    )));
                }
                if reward_mean[idx] != 0.0 || reward_std[idx] != 0.0 {
                    return Err(OpeError::InvalidConfig(format!(
                        "terminal state {s} must pay zero reward under action {a}"
                    )));
                }
            }
            terminal[s] = true;
        }
        Ok(TabularMDP {
            num_states,
            num_actions,
            transitions: rows,
            reward_mean,
            reward_std,
            initial_dist,
            discount,
            horizon,
            terminal,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
    /// Sparse transition row `p(·|s,a)`, sorted by next state.
    pub fn transition_row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.num_actions + a]
    }
    /// Dense lookup `p(s'|s,a)`.
    pub fn transition_prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        let row = self.transition_row(s, a);
        row.binary_search_by_key(&s2, |&(x, _)| x)
            .map(|i| row[i].1)
            .unwrap_or(0.0)
    }
    pub fn reward_mean(&self, s: usize, a: usize) -> f64 {
        self.reward_mean[s * self.num_actions + a]
    }
    pub fn reward_std(&self, s: usize, a: usize) -> f64 {
        self.reward_std[s * self.num_actions + a]
    }
    /// Flat reward-mean table indexed `s * num_actions + a`.
    pub fn reward_mean_table(&self) -> &[f64] {
        &self.reward_mean
    }
    /// Flat reward-std table indexed `s * num_actions + a`.
    pub fn reward_std_table(&self) -> &[f64] {
        &self.reward_std
    }
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }
    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.num_states).filter(|&s| self.terminal[s]).collect()
    }

    /// Copy of this MDP with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(OpeError::InvalidConfig("horizon must be positive".into()));
        }
        let mut m = self.clone();
        m.horizon = horizon;
        Ok(m)
    }

    /// Copy of this MDP with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        if initial_dist.len() != self.num_states {
            return Err(OpeError::DimensionMismatch("initial_dist length".into()));
        }
        check_distribution(&initial_dist, "initial_dist")?;
        let mut m = self.clone();
        m.initial_dist = initial_dist;
        Ok(m)
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(OpeError::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Serializable dense document.
    pub fn to_document(&self) -> MdpDocument {
        let sa = self.num_actions;
        let transition = (0..self.num_states)
            .map(|s| {
                (0..sa)
                    .map(|a| {
                        let mut dense = vec![0.0; self.num_states];
                        for &(s2, p) in self.transition_row(s, a) {
                            dense[s2] = p;
                        }
                        dense
                    })
                    .collect()
            })
            .collect();
        let table = |flat: &[f64]| -> Vec<Vec<f64>> { flat.chunks(sa).map(<[f64]>::to_vec).collect() };
        MdpDocument {
            format_version: FORMAT_VERSION,
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            discount: self.discount,
            transition,
            reward_mean: table(&self.reward_mean),
            reward_std: table(&self.reward_std),
            initial_dist: self.initial_dist.clone(),
            terminal_states: self.terminal_states(),
        }
    }

    /// Build from a dense document, validating every invariant.
    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        check_format_version(doc.format_version)?;
        let (ns, na) = (doc.num_states, doc.num_actions);
        if doc.transition.len() != ns || doc.reward_mean.len() != ns || doc.reward_std.len() != ns {
            return Err(OpeError::DimensionMismatch("MDP document row counts".into()));
        }
        let mut transitions = Vec::with_capacity(ns * na);
        for (s, per_action) in doc.transition.iter().enumerate() {
            if per_action.len() != na {
                return Err(OpeError::DimensionMismatch(format!("transition[{s}] action count")));
            }
            for (a, dense) in per_action.iter().enumerate() {
                if dense.len() != ns {
                    return Err(OpeError::DimensionMismatch(format!(
                        "transition[{s}][{a}] has length {}",
                        dense.len()
                    )));
                }
                transitions.push(
                    dense
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p != 0.0)
                        .map(|(s2, &p)| (s2, p))
                        .collect(),
                );
            }
        }
        let flatten = |t: &[Vec<f64>], name: &str| -> Result<Vec<f64>> {
            if t.iter().any(|r| r.len() != na) {
                return Err(OpeError::DimensionMismatch(format!("{name} action count")));
            }
            Ok(t.iter().flatten().copied().collect())
        };
        TabularMDP::new(MdpTables {
            num_states: ns,
            num_actions: na,
            transitions,
            reward_mean: flatten(&doc.reward_mean, "reward_mean")?,
            reward_std: flatten(&doc.reward_std, "reward_std")?,
            initial_dist: doc.initial_dist,
            discount: doc.discount,
            horizon: doc.horizon,
            terminal_states: doc.terminal_states,
        })
    }

    /// Canonical JSON bytes of the dense document (used for fingerprints).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    /// Parse the dense JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Dense, versioned JSON representation of a [`TabularMDP`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub format_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward_mean[s][a]`.
    pub reward_mean: Vec<Vec<f64>>,
    /// `reward_std[s][a]`.
    pub reward_std: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub terminal_states: Vec<usize>,
}

fn check_format_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(OpeError::InvalidConfig(format!(
            "unsupported format_version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(OpeError::InvalidProbability(format!(
            "{name}[{i}] = {} is negative or not finite",
            p[i]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(OpeError::InvalidProbability(format!("{name} sums to {total}")));
    }
    Ok(())
}

// ── Policies ────────────────────────────────────────────────────────────

/// A stationary stochastic policy `π(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// Build from per-state rows; every row must be a distribution.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(OpeError::DimensionMismatch("policy must be nonempty".into()));
        }
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(OpeError::DimensionMismatch("ragged policy rows".into()));
        }
        Self::from_flat(num_states, num_actions, rows.into_iter().flatten().collect())
    }

    /// Build from a flat table indexed `s * num_actions + a`.
    pub fn from_flat(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_states == 0 || num_actions == 0 {
            return Err(OpeError::DimensionMismatch("policy table size".into()));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Policy {
            num_states,
            num_actions,
            probs,
        })
    }

    /// Same row for every state.
    pub fn uniform_rows(num_states: usize, row: &[f64]) -> Result<Self> {
        Self::from_flat(
            num_states,
            row.len(),
            (0..num_states).flat_map(|_| row.iter().copied()).collect(),
        )
    }

    /// Deterministic policy from one action per state.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(OpeError::DimensionMismatch(format!(
                    "action {a} >= {num_actions} at state {s}"
                )));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::from_flat(actions.len(), num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }
    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }
    /// Flat table indexed `s * num_actions + a`.
    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// The chosen action per state if every row is one-hot.
    pub fn deterministic_actions(&self) -> Option<Vec<usize>> {
        (0..self.num_states)
            .map(|s| {
                let row = self.row(s);
                let a = row.iter().position(|&p| p == 1.0)?;
                row.iter()
                    .enumerate()
                    .all(|(b, &p)| b == a || p == 0.0)
                    .then_some(a)
            })
            .collect()
    }

    /// Draw an action for state `s`.
    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s).iter().copied().enumerate(), rng)
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            format_version: FORMAT_VERSION,
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs: self.probs.chunks(self.num_actions).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_document(doc: PolicyDocument) -> Result<Self> {
        check_format_version(doc.format_version)?;
        if doc.probs.len() != doc.num_states || doc.probs.iter().any(|r| r.len() != doc.num_actions) {
            return Err(OpeError::DimensionMismatch("policy document dimensions".into()));
        }
        Self::new(doc.probs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Dense, versioned JSON representation of a [`Policy`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub format_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    /// `probs[s][a]`.
    pub probs: Vec<Vec<f64>>,
}

/// Inverse-CDF draw from `(index, probability)` pairs.
///
/// Falls back to the last positive-probability index when rounding leaves
/// the uniform draw above the cumulative total.
pub(crate) fn sample_categorical<R, I>(items: I, rng: &mut R) -> usize
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = (usize, f64)>,
{
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in items {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

// ── Trajectories ────────────────────────────────────────────────────────

/// One decision step `(s_t, a_t, r_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// An episode: its steps, plus the state reached after the last step
/// (a terminal state, or the state at which the horizon cut the episode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    #[serde(default)]
    pub final_state: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    /// Discounted return `Σ_t γ^t r_t` (0-based `t`).
    pub fn discounted_return(&self, discount: f64) -> f64 {
        let mut acc = CompensatedSum::new();
        let mut g = 1.0;
        for st in &self.steps {
            acc.add(g * st.reward);
            g *= discount;
        }
        acc.total()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    format_version: u32,
    steps: Vec<Step>,
    #[serde(default)]
    final_state: Option<usize>,
}

/// Write trajectories as JSON lines (one versioned object per line).
pub fn write_trajectories_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for tr in trajectories {
        let line = TrajectoryLine {
            format_version: FORMAT_VERSION,
            steps: tr.steps.clone(),
            final_state: tr.final_state,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read trajectories written by [`write_trajectories_jsonl`].
pub fn read_trajectories_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line)?;
        check_format_version(parsed.format_version)?;
        out.push(Trajectory {
            steps: parsed.steps,
            final_state: parsed.final_state,
        });
    }
    Ok(out)
}

/// Check that every state/action index in a dataset fits the given sizes.
pub fn check_dataset_dims(
    dataset: &[Trajectory],
    num_states: usize,
    num_actions: usize,
) -> Result<()> {
    for (i, tr) in dataset.iter().enumerate() {
        for (t, st) in tr.steps.iter().enumerate() {
            if st.state >= num_states || st.action >= num_actions {
                return Err(OpeError::DimensionMismatch(format!(
                    "trajectory {i} step {t}: (s={}, a={}) outside {num_states}x{num_actions}",
                    st.state, st.action
                )));
            }
        }
    }
    Ok(())
}

// ── Exact dynamic programming ───────────────────────────────────────────

/// Horizon-indexed action values `Q_t(s,a)` and state values `V_t(s)` of a
/// policy, for 0-based steps `t ∈ 0..horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl QTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    /// `Q_t(s,a)`; for `t >= horizon` the reward-to-go is zero.
    #[inline]
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        self.q[(t * self.num_states + s) * self.num_actions + a]
    }
    /// `V_t(s) = Σ_a π(a|s) Q_t(s,a)`; zero for `t >= horizon`.
    #[inline]
    pub fn v(&self, t: usize, s: usize) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        self.v[t * self.num_states + s]
    }
    /// Row `Q_t(s, ·)`.
    pub fn q_row(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.num_states + s) * self.num_actions;
        &self.q[start..start + self.num_actions]
    }
    /// Nested `[t][s][a]` copy for serialization.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.horizon)
            .map(|t| (0..self.num_states).map(|s| self.q_row(t, s).to_vec()).collect())
            .collect()
    }
}

/// `V(s') = Σ_a π(a|s') q(s',a)` for one time slice.
fn policy_values(q_slice: &[f64], policy: &Policy) -> Vec<f64> {
    let na = policy.num_actions();
    q_slice
        .chunks(na)
        .enumerate()
        .map(|(s, row)| {
            let mut acc = CompensatedSum::new();
            for (a, &qa) in row.iter().enumerate() {
                let p = policy.prob(s, a);
                if p != 0.0 {
                    acc.add(p * qa);
                }
            }
            acc.total()
        })
        .collect()
}

/// One Bellman backup `R̄ + γ P V_next` over all `(s,a)`.
fn bellman_backup(mdp: &TabularMDP, v_next: Option<&[f64]>) -> Vec<f64> {
    let na = mdp.num_actions;
    let mut out = Vec::with_capacity(mdp.num_states * na);
    for idx in 0..mdp.num_states * na {
        let r = mdp.reward_mean[idx];
        match v_next {
            None => out.push(r),
            Some(v) => {
                let mut acc = CompensatedSum::new();
                for &(s2, p) in &mdp.transitions[idx] {
                    acc.add(p * v[s2]);
                }
                out.push(r + mdp.discount * acc.total());
            }
        }
    }
    out
}

/// Backward recursion for `Q_t` and `V_t` of `policy` (relative discounting).
///
/// At the last step `Q` equals the reward-mean table exactly.
pub fn horizon_q_values(mdp: &TabularMDP, policy: &Policy) -> Result<QTable> {
    mdp.check_policy(policy)?;
    let (h, ns, na) = (mdp.horizon, mdp.num_states, mdp.num_actions);
    let mut q = vec![0.0; h * ns * na];
    let mut v = vec![0.0; h * ns];
    for t in (0..h).rev() {
        let slice = if t + 1 == h {
            bellman_backup(mdp, None)
        } else {
            bellman_backup(mdp, Some(&v[(t + 1) * ns..(t + 2) * ns]))
        };
        let vt = policy_values(&slice, policy);
        q[t * ns * na..(t + 1) * ns * na].copy_from_slice(&slice);
        v[t * ns..(t + 1) * ns].copy_from_slice(&vt);
    }
    Ok(QTable {
        horizon: h,
        num_states: ns,
        num_actions: na,
        q,
        v,
    })
}

/// Exact value `v(π) = Σ_s d1(s) V_0(s)` by backward DP.
pub fn exact_policy_value(mdp: &TabularMDP, policy: &Policy) -> Result<f64> {
    let qt = horizon_q_values(mdp, policy)?;
    Ok(value_from_q(mdp, &qt))
}

/// `Σ_s d1(s) V_0(s)` for a precomputed table.
pub fn value_from_q(mdp: &TabularMDP, qt: &QTable) -> f64 {
    let mut acc = CompensatedSum::new();
    for (s, &d) in mdp.initial_dist.iter().enumerate() {
        if d != 0.0 {
            acc.add(d * qt.v(0, s));
        }
    }
    acc.total()
}

/// Optimal action values by repeated Bellman optimality backups.
///
/// Iterates until the largest change falls below `1e-12` or `horizon`
/// backups have been applied, whichever happens first; the result is the
/// optimal first-step `Q` of the finite-horizon problem (or its stationary
/// limit when the recursion converges earlier).
pub fn optimal_q(mdp: &TabularMDP) -> Vec<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut q = bellman_backup(mdp, None);
    for _ in 1..mdp.horizon {
        let v: Vec<f64> = q
            .chunks(na)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let next = bellman_backup(mdp, Some(&v));
        let delta = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta < 1e-12 {
            break;
        }
    }
    debug_assert_eq!(q.len(), ns * na);
    q
}

/// Lowest-index argmax, treating values within `1e-12` of the maximum as ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&x| x >= best - 1e-12).unwrap_or(0)
}

// ── Occupancy and divergence ────────────────────────────────────────────

/// Per-step state distributions `d_t(s)` for 0-based `t ∈ 0..horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    horizon: usize,
    num_states: usize,
    dist: Vec<f64>,
}

impl OccupancyTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    /// Distribution at step `t`.
    pub fn slice(&self, t: usize) -> &[f64] {
        &self.dist[t * self.num_states..(t + 1) * self.num_states]
    }
    /// Average of the per-step distributions.
    pub fn time_averaged(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.num_states];
        for t in 0..self.horizon {
            for (a, &d) in avg.iter_mut().zip(self.slice(t)) {
                *a += d;
            }
        }
        avg.iter_mut().for_each(|a| *a /= self.horizon as f64);
        avg
    }
}

/// Forward recursion `d_{t+1}(s') = Σ_{s,a} d_t(s) π(a|s) p(s'|s,a)`.
pub fn state_occupancy(mdp: &TabularMDP, policy: &Policy) -> Result<OccupancyTable> {
    mdp.check_policy(policy)?;
    let (h, ns, na) = (mdp.horizon, mdp.num_states, mdp.num_actions);
    let mut dist = vec![0.0; h * ns];
    dist[..ns].copy_from_slice(&mdp.initial_dist);
    for t in 1..h {
        let (prev, rest) = dist.split_at_mut(t * ns);
        let prev = &prev[(t - 1) * ns..];
        let next = &mut rest[..ns];
        for s in 0..ns {
            let d = prev[s];
            if d == 0.0 {
                continue;
            }
            for a in 0..na {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(s2, p) in mdp.transition_row(s, a) {
                    next[s2] += d * pa * p;
                }
            }
        }
    }
    Ok(OccupancyTable {
        horizon: h,
        num_states: ns,
        dist,
    })
}

/// State-weighted KL divergence `Σ_s w(s) Σ_a π_e(a|s) ln(π_e(a|s)/π_b(a|s))`.
///
/// Terms with `π_e(a|s) = 0` contribute zero. If `π_e(a|s) > 0 = π_b(a|s)`
/// at a state with positive weight the divergence is infinite and
/// [`OpeError::InfiniteDivergence`] is returned.
pub fn policy_kl(pi_e: &Policy, pi_b: &Policy, state_weights: &[f64]) -> Result<f64> {
    if pi_e.num_states() != pi_b.num_states()
        || pi_e.num_actions() != pi_b.num_actions()
        || state_weights.len() != pi_e.num_states()
    {
        return Err(OpeError::DimensionMismatch("policy_kl inputs".into()));
    }
    let mut acc = CompensatedSum::new();
    for (s, &w) in state_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for a in 0..pi_e.num_actions() {
            let pe = pi_e.prob(s, a);
            if pe == 0.0 {
                continue;
            }
            let pb = pi_b.prob(s, a);
            if pb == 0.0 {
                return Err(OpeError::InfiniteDivergence { state: s, action: a });
            }
            acc.add(w * pe * (pe / pb).ln());
        }
    }
    Ok(acc.total())
}

// ── Sampling ────────────────────────────────────────────────────────────

/// Sample one episode: `s_1 ~ d1`, `a_t ~ π(s_t)`, `r_t ~ N(R̄, σ_R)`,
/// `s_{t+1} ~ p(·|s_t,a_t)`; stops on entering a terminal state or at the
/// horizon.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMDP,
    policy: &Policy,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    Ok(sample_trajectory_unchecked(mdp, policy, rng))
}

pub(crate) fn sample_trajectory_unchecked<R: Rng + ?Sized>(
    mdp: &TabularMDP,
    policy: &Policy,
    rng: &mut R,
) -> Trajectory {
    let mut s = sample_categorical(mdp.initial_dist.iter().copied().enumerate(), rng);
    let mut steps = Vec::new();
    for _ in 0..mdp.horizon {
        if mdp.terminal[s] {
            break;
        }
        let a = policy.sample_action(s, rng);
        let idx = s * mdp.num_actions + a;
        let sd = mdp.reward_std[idx];
        let reward = if sd == 0.0 {
            mdp.reward_mean[idx]
        } else {
            let z: f64 = rng.sample(StandardNormal);
            mdp.reward_mean[idx] + sd * z
        };
        steps.push(Step {
            state: s,
            action: a,
            reward,
        });
        s = sample_categorical(mdp.transitions[idx].iter().copied(), rng);
    }
    Trajectory {
        steps,
        final_state: Some(s),
    }
}
