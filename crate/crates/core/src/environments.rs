//! Experimental environments and policy families.
//!
//! - Contextual bandits (`make_bandit`, `make_two_state_bandit`,
//!   `make_one_state_bandit`): horizon-1 MDPs whose states self-loop.
//! - A deterministic tree MDP with rewards on the transitions into leaves.
//! - A sepsis-inspired tabular simulator with a binary vasopressor action,
//!   whose shift probabilities come from a [`SepsisConfig`] document.
//! - Policy constructors: optimal (value iteration), ε-greedy, and random
//!   perturbations of a deterministic policy.
//! - Reproducible dataset generation keyed by `(master_seed, dataset index)`.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::mdp_core::{
    argmax_lowest, optimal_q, sample_trajectory_unchecked, MdpTables, Policy, TabularMDP,
    Trajectory,
};
use crate::rng::StreamKey;

// ── Bandits ─────────────────────────────────────────────────────────────

/// Reward tables and context distribution of a contextual bandit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditSpec {
    /// `reward_means[s][a]`.
    pub reward_means: Vec<Vec<f64>>,
    /// `reward_stds[s][a]`, nonnegative.
    pub reward_stds: Vec<Vec<f64>>,
    /// Probability of each state (context).
    pub state_probs: Vec<f64>,
}

impl BanditSpec {
    /// The two-state bandit used for the main bandit table:
    /// `R̄(s1,·) = [1, 2]`, `R̄(s2,·) = [1, 1]`, common `σ`, equal state odds.
    pub fn two_state_table(sigma: f64) -> Self {
        BanditSpec {
            reward_means: vec![vec![1.0, 2.0], vec![1.0, 1.0]],
            reward_stds: vec![vec![sigma; 2]; 2],
            state_probs: vec![0.5, 0.5],
        }
    }
}

/// Horizon-1 MDP from a bandit spec of any size (states self-loop).
pub fn make_bandit(spec: &BanditSpec) -> Result<TabularMDP> {
    let ns = spec.state_probs.len();
    let na = spec.reward_means.first().map_or(0, Vec::len);
    if ns == 0 || na == 0 || spec.reward_means.len() != ns || spec.reward_stds.len() != ns {
        return Err(OpeError::DimensionMismatch("bandit spec row counts".into()));
    }
    if spec
        .reward_means
        .iter()
        .chain(&spec.reward_stds)
        .any(|r| r.len() != na)
    {
        return Err(OpeError::DimensionMismatch("bandit spec action counts".into()));
    }
    TabularMDP::new(MdpTables {
        num_states: ns,
        num_actions: na,
        transitions: (0..ns).flat_map(|s| (0..na).map(move |_| vec![(s, 1.0)])).collect(),
        reward_mean: spec.reward_means.iter().flatten().copied().collect(),
        reward_std: spec.reward_stds.iter().flatten().copied().collect(),
        initial_dist: spec.state_probs.clone(),
        discount: 1.0,
        horizon: 1,
        terminal_states: vec![],
    })
}

/// Two-state, two-action bandit.
pub fn make_two_state_bandit(spec: &BanditSpec) -> Result<TabularMDP> {
    if spec.state_probs.len() != 2 || spec.reward_means.iter().any(|r| r.len() != 2) {
        return Err(OpeError::DimensionMismatch(
            "two-state bandit needs 2 states and 2 actions".into(),
        ));
    }
    make_bandit(spec)
}

/// One-state, two-action bandit with arm means `(r0, r1)` and stds `(s0, s1)`.
pub fn make_one_state_bandit(r0: f64, r1: f64, s0: f64, s1: f64) -> Result<TabularMDP> {
    if !(s0 >= 0.0 && s1 >= 0.0) {
        return Err(OpeError::InvalidConfig(format!(
            "reward stds must be nonnegative, got ({s0}, {s1})"
        )));
    }
    make_bandit(&BanditSpec {
        reward_means: vec![vec![r0, r1]],
        reward_stds: vec![vec![s0, s1]],
        state_probs: vec![1.0],
    })
}

// ── Tree MDP ────────────────────────────────────────────────────────────

/// Number of nodes of a complete `branching`-ary tree of the given depth.
pub fn tree_node_count(depth: usize, branching: usize) -> usize {
    (0..=depth).map(|d| branching.pow(d as u32)).sum()
}

/// Deterministic tree MDP of `depth` decision steps.
///
/// Nodes are numbered breadth-first (root 0, children of `i` are
/// `b·i + 1 ..= b·i + b`); the leaves are the last `b^depth` nodes and one
/// extra absorbing sink follows them. Action `a` at an internal node moves to
/// child `a`; rewards are paid only on the transition from a depth-`depth−1`
/// node into a leaf, with `terminal_rewards` listed in leaf order.
pub fn make_tree_mdp(depth: usize, branching: usize, terminal_rewards: &[f64]) -> Result<TabularMDP> {
    if depth == 0 || branching == 0 {
        return Err(OpeError::InvalidConfig("depth and branching must be positive".into()));
    }
    let n_leaves = branching.pow(depth as u32);
    if terminal_rewards.len() != n_leaves {
        return Err(OpeError::DimensionMismatch(format!(
            "expected {n_leaves} terminal rewards, got {}",
            terminal_rewards.len()
        )));
    }
    let n_nodes = tree_node_count(depth, branching);
    let first_leaf = n_nodes - n_leaves;
    let first_pre_leaf = first_leaf - branching.pow(depth as u32 - 1);
    let sink = n_nodes;
    let ns = n_nodes + 1;
    let mut transitions = Vec::with_capacity(ns * branching);
    let mut reward_mean = Vec::with_capacity(ns * branching);
    for s in 0..ns {
        for a in 0..branching {
            if s < first_leaf {
                let child = branching * s + a + 1;
                transitions.push(vec![(child, 1.0)]);
                reward_mean.push(if s >= first_pre_leaf {
                    terminal_rewards[child - first_leaf]
                } else {
                    0.0
                });
            } else {
                transitions.push(vec![(sink, 1.0)]);
                reward_mean.push(0.0);
            }
        }
    }
    let mut initial_dist = vec![0.0; ns];
    initial_dist[0] = 1.0;
    TabularMDP::new(MdpTables {
        num_states: ns,
        num_actions: branching,
        transitions,
        reward_mean,
        reward_std: vec![0.0; ns * branching],
        initial_dist,
        discount: 1.0,
        horizon: depth,
        terminal_states: vec![sink],
    })
}

// ── Sepsis simulator ────────────────────────────────────────────────────

/// Number of encoded (non-absorbing) sepsis states.
pub const SEPSIS_ENCODED_STATES: usize = 1440;
/// Absorbing state entered on discharge.
pub const SEPSIS_DISCHARGED: usize = SEPSIS_ENCODED_STATES;
/// Absorbing state entered on death.
pub const SEPSIS_DEAD: usize = SEPSIS_ENCODED_STATES + 1;
/// Level cardinalities of (heart rate, blood pressure, oxygen, glucose).
pub const SEPSIS_VITAL_LEVELS: [usize; 4] = [3, 3, 2, 5];
/// Index of the normal level of each vital.
pub const SEPSIS_NORMAL_LEVELS: [usize; 4] = [1, 1, 1, 2];
/// Shipped default configuration document.
pub const SEPSIS_DEFAULT_TOML: &str = include_str!("../../../configs/sepsis_default.toml");

/// Probabilities indexed `[non-diabetic, diabetic]`.
pub type ByDiabetes = [f64; 2];

/// Per-vital shift probabilities.
///
/// A "fluctuation" with probability `p` moves a vital one level down with
/// probability `p` and one level up with probability `p` (a move beyond the
/// range leaves the level unchanged). Vitals under active treatment do not
/// fluctuate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepsisTransitionRules {
    /// Heart-rate fluctuation probability.
    pub hr_fluctuation: f64,
    /// Oxygen fluctuation probability.
    pub o2_fluctuation: f64,
    /// Blood-pressure fluctuation probability when vasopressors are off and
    /// were off at the previous step.
    pub bp_fluctuation: f64,
    /// Glucose fluctuation probability (non-diabetic, diabetic).
    pub glucose_fluctuation: ByDiabetes,
    /// Probability that vasopressors raise blood pressure by one level.
    pub vaso_bp_raise: ByDiabetes,
    /// Probability that vasopressors raise glucose by one level.
    pub vaso_glucose_raise: ByDiabetes,
    /// Probability that stopping vasopressors drops blood pressure one level.
    pub vaso_withdrawal_bp_drop: ByDiabetes,
}

/// Configuration of the sepsis simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepsisConfig {
    /// Level counts of (heart rate, blood pressure, oxygen, glucose);
    /// must equal `[3, 3, 2, 5]`.
    pub vital_level_counts: [usize; 4],
    /// Probability that a patient is diabetic.
    pub diabetes_prevalence: f64,
    /// Episode truncation length (the MDP horizon).
    pub max_length: usize,
    /// Discount factor.
    pub discount: f64,
    /// Initial vitals are drawn uniformly among combinations whose number
    /// of abnormal vitals lies in `[min, max]`; treatments start off.
    pub initial_abnormal_range: [usize; 2],
    pub transition_rules: SepsisTransitionRules,
}

impl Default for SepsisConfig {
    fn default() -> Self {
        SepsisConfig::from_toml(SEPSIS_DEFAULT_TOML).expect("shipped sepsis config is valid")
    }
}

impl SepsisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SepsisConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SepsisConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check ranges and structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.vital_level_counts != SEPSIS_VITAL_LEVELS {
            return Err(OpeError::InvalidConfig(format!(
                "vital_level_counts must be {SEPSIS_VITAL_LEVELS:?} (1440 encoded states)"
            )));
        }
        let encoded: usize = self.vital_level_counts.iter().product::<usize>() * 16;
        if encoded != SEPSIS_ENCODED_STATES {
            return Err(OpeError::InvalidConfig("encoded state count must be 1440".into()));
        }
        if self.max_length == 0 {
            return Err(OpeError::InvalidConfig("max_length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(OpeError::InvalidConfig("discount outside [0, 1]".into()));
        }
        let [lo, hi] = self.initial_abnormal_range;
        if lo > hi || hi > 2 {
            return Err(OpeError::InvalidConfig(
                "initial_abnormal_range must satisfy min <= max <= 2".into(),
            ));
        }
        let r = &self.transition_rules;
        let mut probs = vec![
            ("diabetes_prevalence", self.diabetes_prevalence),
            ("hr_fluctuation", 2.0 * r.hr_fluctuation),
            ("o2_fluctuation", 2.0 * r.o2_fluctuation),
            ("bp_fluctuation", 2.0 * r.bp_fluctuation),
        ];
        for d in 0..2 {
            probs.push(("glucose_fluctuation", 2.0 * r.glucose_fluctuation[d]));
            probs.push(("vaso_bp_raise", r.vaso_bp_raise[d]));
            probs.push(("vaso_glucose_raise", r.vaso_glucose_raise[d]));
            probs.push(("vaso_withdrawal_bp_drop", r.vaso_withdrawal_bp_drop[d]));
        }
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(OpeError::InvalidConfig(format!(
                    "{name} out of range (fluctuations must be <= 0.5)"
                )));
            }
        }
        Ok(())
    }
}

/// Decoded sepsis state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SepsisState {
    pub hr: usize,
    pub bp: usize,
    pub o2: usize,
    pub glucose: usize,
    pub diabetic: bool,
    pub abx: bool,
    pub vaso: bool,
    pub vent: bool,
}

impl SepsisState {
    /// Mixed-radix index with digit order (hr, bp, o2, glucose, diabetes,
    /// abx, vaso, vent), heart rate most significant.
    pub fn encode(&self) -> usize {
        let digits = [
            (self.hr, 3),
            (self.bp, 3),
            (self.o2, 2),
            (self.glucose, 5),
            (usize::from(self.diabetic), 2),
            (usize::from(self.abx), 2),
            (usize::from(self.vaso), 2),
            (usize::from(self.vent), 2),
        ];
        digits.iter().fold(0, |acc, &(d, radix)| acc * radix + d)
    }

    /// Inverse of [`SepsisState::encode`] for indices below 1440.
    pub fn decode(index: usize) -> Option<Self> {
        if index >= SEPSIS_ENCODED_STATES {
            return None;
        }
        let mut x = index;
        let mut take = |radix: usize| {
            let d = x % radix;
            x /= radix;
            d
        };
        let vent = take(2) == 1;
        let vaso = take(2) == 1;
        let abx = take(2) == 1;
        let diabetic = take(2) == 1;
        let glucose = take(5);
        let o2 = take(2);
        let bp = take(3);
        let hr = take(3);
        Some(SepsisState {
            hr,
            bp,
            o2,
            glucose,
            diabetic,
            abx,
            vaso,
            vent,
        })
    }

    fn vitals(&self) -> [usize; 4] {
        [self.hr, self.bp, self.o2, self.glucose]
    }

    /// Number of vitals away from their normal level.
    pub fn num_abnormal(&self) -> usize {
        self.vitals()
            .iter()
            .zip(SEPSIS_NORMAL_LEVELS)
            .filter(|(&v, n)| v != *n)
            .count()
    }
}

/// `(level, probability)` outcomes of a symmetric ±1 fluctuation.
fn fluctuate(level: usize, max_level: usize, p: f64) -> Vec<(usize, f64)> {
    let mut out = vec![(level, 1.0 - 2.0 * p)];
    let down = if level > 0 { level - 1 } else { level };
    let up = if level + 1 < max_level { level + 1 } else { level };
    out.push((down, p));
    out.push((up, p));
    merge_outcomes(out)
}

/// Move up one level with probability `p` (capped at the top).
fn raise(level: usize, max_level: usize, p: f64) -> Vec<(usize, f64)> {
    let up = if level + 1 < max_level { level + 1 } else { level };
    merge_outcomes(vec![(level, 1.0 - p), (up, p)])
}

/// Move down one level with probability `p` (floored at zero).
fn lower(level: usize, p: f64) -> Vec<(usize, f64)> {
    let down = level.saturating_sub(1);
    merge_outcomes(vec![(level, 1.0 - p), (down, p)])
}

fn merge_outcomes(mut v: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    v.sort_by_key(|&(l, _)| l);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(v.len());
    for (l, p) in v {
        if p == 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.0 == l => last.1 += p,
            _ => out.push((l, p)),
        }
    }
    out
}

/// Next-state distribution of a non-terminating step.
fn sepsis_step(cfg: &SepsisConfig, st: &SepsisState, vaso_on: bool) -> Vec<(usize, f64)> {
    let r = &cfg.transition_rules;
    let d = usize::from(st.diabetic);
    let hr = fluctuate(st.hr, 3, r.hr_fluctuation);
    let o2 = fluctuate(st.o2, 2, r.o2_fluctuation);
    let bp = if vaso_on {
        raise(st.bp, 3, r.vaso_bp_raise[d])
    } else if st.vaso {
        lower(st.bp, r.vaso_withdrawal_bp_drop[d])
    } else {
        fluctuate(st.bp, 3, r.bp_fluctuation)
    };
    let glucose = if vaso_on && r.vaso_glucose_raise[d] > 0.0 {
        raise(st.glucose, 5, r.vaso_glucose_raise[d])
    } else {
        fluctuate(st.glucose, 5, r.glucose_fluctuation[d])
    };
    let mut row = Vec::with_capacity(hr.len() * bp.len() * o2.len() * glucose.len());
    for &(h, ph) in &hr {
        for &(b, pb) in &bp {
            for &(o, po) in &o2 {
                for &(g, pg) in &glucose {
                    let next = SepsisState {
                        hr: h,
                        bp: b,
                        o2: o,
                        glucose: g,
                        diabetic: st.diabetic,
                        abx: false,
                        vaso: vaso_on,
                        vent: false,
                    };
                    row.push((next.encode(), ph * pb * po * pg));
                }
            }
        }
    }
    row
}

/// Build the tabular sepsis MDP.
///
/// Actions: `0` = vasopressor off, `1` = on. In an encoded state with three or
/// more abnormal vitals every action pays −1 and moves to [`SEPSIS_DEAD`]; in a
/// state with all vitals normal, action "off" pays +1 and moves to
/// [`SEPSIS_DISCHARGED`]. Otherwise the reward is 0 and vitals evolve
/// according to the configured shift probabilities. Antibiotic and
/// ventilation bits are kept in the encoding but are always off after the
/// first transition. Episodes that survive `max_length` steps are truncated
/// with zero terminal reward.
pub fn make_sepsis_mdp(cfg: &SepsisConfig) -> Result<TabularMDP> {
    cfg.validate()?;
    let ns = SEPSIS_ENCODED_STATES + 2;
    let na = 2;
    let mut transitions = Vec::with_capacity(ns * na);
    let mut reward_mean = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let st = SepsisState::decode(s);
        for a in 0..na {
            match st {
                None => {
                    transitions.push(vec![(s, 1.0)]);
                    reward_mean.push(0.0);
                }
                Some(st) if st.num_abnormal() >= 3 => {
                    transitions.push(vec![(SEPSIS_DEAD, 1.0)]);
                    reward_mean.push(-1.0);
                }
                Some(st) if st.num_abnormal() == 0 && a == 0 => {
                    transitions.push(vec![(SEPSIS_DISCHARGED, 1.0)]);
                    reward_mean.push(1.0);
                }
                Some(st) => {
                    transitions.push(sepsis_step(cfg, &st, a == 1));
                    reward_mean.push(0.0);
                }
            }
        }
    }
    let mut initial_dist = vec![0.0; ns];
    let [lo, hi] = cfg.initial_abnormal_range;
    for diabetic in [false, true] {
        let p_d = if diabetic {
            cfg.diabetes_prevalence
        } else {
            1.0 - cfg.diabetes_prevalence
        };
        let eligible: Vec<usize> = (0..SEPSIS_ENCODED_STATES)
            .filter_map(SepsisState::decode)
            .filter(|st| {
                st.diabetic == diabetic
                    && !st.abx
                    && !st.vaso
                    && !st.vent
                    && (lo..=hi).contains(&st.num_abnormal())
            })
            .map(|st| st.encode())
            .collect();
        for &s in &eligible {
            initial_dist[s] += p_d / eligible.len() as f64;
        }
    }
    TabularMDP::new(MdpTables {
        num_states: ns,
        num_actions: na,
        transitions,
        reward_mean,
        reward_std: vec![0.0; ns * na],
        initial_dist,
        discount: cfg.discount,
        horizon: cfg.max_length,
        terminal_states: vec![SEPSIS_DISCHARGED, SEPSIS_DEAD],
    })
}

// ── Policy families ─────────────────────────────────────────────────────

/// Deterministic greedy policy from optimal action values (ties to the
/// lowest action index); see [`optimal_q`] for the backup schedule.
pub fn optimal_policy(mdp: &TabularMDP) -> Policy {
    let q = optimal_q(mdp);
    let actions: Vec<usize> = q.chunks(mdp.num_actions()).map(argmax_lowest).collect();
    Policy::deterministic(&actions, mdp.num_actions()).expect("argmax actions are in range")
}

/// ε-greedy softening: `1 − ε + ε/|A|` on the base action, `ε/|A|` elsewhere.
pub fn eps_greedy(base: &Policy, eps: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(OpeError::InvalidConfig(format!("eps {eps} outside [0, 1]")));
    }
    let actions = base
        .deterministic_actions()
        .ok_or_else(|| OpeError::InvalidConfig("eps_greedy needs a deterministic base".into()))?;
    let na = base.num_actions();
    let off = eps / na as f64;
    let on = 1.0 - off * (na - 1) as f64;
    let probs = actions
        .iter()
        .flat_map(|&a_star| (0..na).map(move |a| if a == a_star { on } else { off }))
        .collect();
    Policy::from_flat(base.num_states(), na, probs)
}

/// Deterministic policy that disagrees with `optimal` in exactly
/// `flip_count` uniformly chosen states (binary actions flip; otherwise a
/// uniformly chosen non-optimal action).
pub fn perturb_policy<R: Rng + ?Sized>(
    optimal: &Policy,
    flip_count: usize,
    rng: &mut R,
) -> Result<Policy> {
    let mut actions = optimal
        .deterministic_actions()
        .ok_or_else(|| OpeError::InvalidConfig("perturb_policy needs a deterministic base".into()))?;
    let ns = optimal.num_states();
    let na = optimal.num_actions();
    if flip_count > ns {
        return Err(OpeError::InvalidConfig(format!(
            "flip_count {flip_count} exceeds {ns} states"
        )));
    }
    if na < 2 && flip_count > 0 {
        return Err(OpeError::InvalidConfig("cannot flip with a single action".into()));
    }
    let mut chosen = sample_indices(rng, ns, flip_count).into_vec();
    chosen.sort_unstable();
    for s in chosen {
        let a = actions[s];
        actions[s] = if na == 2 {
            1 - a
        } else {
            let k = rng.random_range(0..na - 1);
            if k >= a {
                k + 1
            } else {
                k
            }
        };
    }
    Policy::deterministic(&actions, na)
}

/// A policy with provenance metadata.
#[derive(Clone, Debug)]
pub struct LabeledPolicy {
    pub label: String,
    pub policy: Policy,
    /// Number of states where the policy disagrees with the base policy.
    pub flip_count: usize,
    /// Perturbation seed index (`None` for the unperturbed base policy).
    pub seed: Option<u64>,
}

/// Labeled collection of evaluation policies.
#[derive(Clone, Debug)]
pub struct PolicySet {
    pub policies: Vec<LabeledPolicy>,
}

impl PolicySet {
    pub fn len(&self) -> usize {
        self.policies.len()
    }
    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

/// The base policy followed by `seeds` perturbations for every flip count.
///
/// Perturbation `(count, j)` draws from the stream `key.tag("perturb").at_all([count, j])`.
pub fn perturbed_policy_set(
    optimal: &Policy,
    flip_counts: &[usize],
    seeds: u64,
    key: StreamKey,
) -> Result<PolicySet> {
    let mut policies = vec![LabeledPolicy {
        label: "optimal".into(),
        policy: optimal.clone(),
        flip_count: 0,
        seed: None,
    }];
    for &count in flip_counts {
        for j in 0..seeds {
            let mut rng = key.tag("perturb").at_all(&[count as u64, j]).rng();
            policies.push(LabeledPolicy {
                label: format!("flip{count}_seed{j}"),
                policy: perturb_policy(optimal, count, &mut rng)?,
                flip_count: count,
                seed: Some(j),
            });
        }
    }
    Ok(PolicySet { policies })
}

// ── Dataset generation ──────────────────────────────────────────────────

/// `n_datasets` datasets of `n_episodes` episodes each. Dataset `i` is drawn
/// from the stream `StreamKey::root(master_seed).tag("datasets").at(i)`, so
/// the output does not depend on scheduling or thread count.
pub fn generate_datasets(
    mdp: &TabularMDP,
    behavior: &Policy,
    n_datasets: usize,
    n_episodes: usize,
    master_seed: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    if behavior.num_states() != mdp.num_states() || behavior.num_actions() != mdp.num_actions() {
        return Err(OpeError::DimensionMismatch("behavior policy vs MDP".into()));
    }
    let key = StreamKey::root(master_seed).tag("datasets");
    Ok((0..n_datasets)
        .into_par_iter()
        .map(|i| generate_dataset(mdp, behavior, n_episodes, key.at(i as u64)))
        .collect())
}

/// One dataset from an explicit stream key.
pub fn generate_dataset(
    mdp: &TabularMDP,
    behavior: &Policy,
    n_episodes: usize,
    key: StreamKey,
) -> Vec<Trajectory> {
    let mut rng = key.rng();
    (0..n_episodes)
        .map(|_| sample_trajectory_unchecked(mdp, behavior, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp_core::exact_policy_value;

    #[test]
    fn sepsis_encoding_round_trips() {
        for s in 0..SEPSIS_ENCODED_STATES {
            assert_eq!(SepsisState::decode(s).unwrap().encode(), s);
        }
        let st = SepsisState::decode(0).unwrap();
        assert_eq!(st.hr, 0);
        let top = SepsisState {
            hr: 1,
            bp: 0,
            o2: 0,
            glucose: 0,
            diabetic: false,
            abx: false,
            vaso: false,
            vent: false,
        };
        assert_eq!(top.encode(), 480);
    }

    #[test]
    fn tree_dimensions() {
        let m = make_tree_mdp(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(m.num_states(), 16);
        assert_eq!(m.horizon(), 3);
        // Path 1,0,1 ends at leaf index 5 (binary 101).
        let mut acts = vec![0usize; 16];
        acts[0] = 1;
        acts[2] = 0;
        acts[5] = 1;
        let pi = Policy::deterministic(&acts, 2).unwrap();
        assert_eq!(exact_policy_value(&m, &pi).unwrap(), 6.0);
        let m1 = make_tree_mdp(1, 3, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m1.num_states(), 5);
        assert!(make_tree_mdp(2, 2, &[1.0]).is_err());
    }

    #[test]
    fn eps_greedy_rows() {
        let base = Policy::deterministic(&[0, 1], 2).unwrap();
        let p = eps_greedy(&base, 0.1).unwrap();
        assert_eq!(p.row(0), &[0.95, 0.05]);
        assert_eq!(p.row(1), &[0.05, 0.95]);
        assert_eq!(eps_greedy(&base, 0.0).unwrap(), base);
        let u = eps_greedy(&base, 1.0).unwrap();
        assert_eq!(u.row(0), &[0.5, 0.5]);
        assert!(eps_greedy(&p, 0.1).is_err());
    }

    #[test]
    fn perturbation_flips_exact_count() {
        let base = Policy::deterministic(&[0, 1, 0, 1, 1, 0], 2).unwrap();
        let mut rng = StreamKey::root(5).rng();
        for k in 0..=6 {
            let p = perturb_policy(&base, k, &mut rng).unwrap();
            let a = p.deterministic_actions().unwrap();
            let b = base.deterministic_actions().unwrap();
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), k);
        }
        assert!(perturb_policy(&base, 7, &mut rng).is_err());
        let three = Policy::deterministic(&[0, 1, 2], 3).unwrap();
        let p = perturb_policy(&three, 3, &mut rng).unwrap();
        let a = p.deterministic_actions().unwrap();
        assert!(a.iter().zip([0, 1, 2]).all(|(x, y)| *x != y));
    }
}
