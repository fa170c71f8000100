//! Closed-form bias and variance of single-sample bandit estimators.
//!
//! Notation: `d1` is the state distribution, `R̄`/`σ_R²` the reward mean and
//! variance, `ε_G(s,a)` the annotation bias (annotation mean minus `R̄`),
//! `Δ_σ(s,a)` the annotation variance excess (`σ_G² = σ_R² + Δ_σ`), `W̄`,
//! `σ_W²`, `Cov_W` the moments of the weight distribution given the factual
//! pair, and `ρ+(ã|s) = π_e(ã|s)/π_b+(ã|s)`.
//!
//! All variances are exact decompositions by the law of total variance:
//! with `X` the per-sample estimate,
//! `V[X] = V_s[E[X|s]] + E_s V_a[E[X|s,a]] + E_s E_a V[X|s,a]`. Under common
//! support and perfect annotations `E[X|s] = V^{π_e}(s)`; in general the
//! first term uses the actual conditional mean, so the total stays exact
//! when assumptions fail.

use serde::{Deserialize, Serialize};

use crate::annotation::{augmented_policy, AvgWeightTable};
use crate::error::{OpeError, Result};
use crate::mdp_core::{Policy, TabularMDP};
use crate::numeric::CompensatedSum;

/// Bias, variance and labeled variance terms (which sum to the variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub bias: f64,
    pub variance: f64,
    pub term_breakdown: Vec<(String, f64)>,
}

impl TheoryReport {
    fn from_terms(bias: f64, terms: Vec<(&str, f64)>) -> Self {
        let mut acc = CompensatedSum::new();
        for (_, x) in &terms {
            acc.add(*x);
        }
        TheoryReport {
            bias,
            variance: acc.total(),
            term_breakdown: terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Value of a labeled term.
    pub fn term(&self, label: &str) -> Option<f64> {
        self.term_breakdown.iter().find(|(k, _)| k == label).map(|(_, v)| *v)
    }

    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

fn check_bandit(mdp: &TabularMDP, pi_e: &Policy, pi_b: &Policy) -> Result<()> {
    if mdp.horizon() != 1 {
        return Err(OpeError::InvalidConfig("theory calculators need a bandit (horizon 1)".into()));
    }
    for p in [pi_e, pi_b] {
        if p.num_states() != mdp.num_states() || p.num_actions() != mdp.num_actions() {
            return Err(OpeError::DimensionMismatch("policy shape vs bandit".into()));
        }
    }
    Ok(())
}

fn check_table(name: &str, table: &[f64], mdp: &TabularMDP) -> Result<()> {
    if table.len() != mdp.num_states() * mdp.num_actions() {
        return Err(OpeError::DimensionMismatch(format!(
            "{name} must have one entry per (s, a)"
        )));
    }
    Ok(())
}

/// Variance of `f(s)` under `d1`.
fn state_variance(d1: &[f64], f: &[f64]) -> f64 {
    let mean: f64 = d1.iter().zip(f).map(|(d, x)| d * x).sum();
    d1.iter().zip(f).map(|(d, x)| d * (x - mean) * (x - mean)).sum()
}

/// `V^{π_e}(s) = Σ_a π_e(a|s) R̄(s,a)`.
fn target_values(mdp: &TabularMDP, pi_e: &Policy) -> Vec<f64> {
    (0..mdp.num_states())
        .map(|s| (0..mdp.num_actions()).map(|a| pi_e.prob(s, a) * mdp.reward_mean(s, a)).sum())
        .collect()
}

/// IS: bias `E_{d1}[−Σ_{a: π_b(a|s)=0} π_e(a|s) R̄(s,a)]` and the three-term
/// variance `V_s[E[ρr|s]] + E_s V_{π_b}[ρ R̄] + E_s E_{π_b}[ρ² σ_R²]`.
pub fn theory_is(mdp: &TabularMDP, pi_e: &Policy, pi_b: &Policy) -> Result<TheoryReport> {
    check_bandit(mdp, pi_e, pi_b)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let d1 = mdp.initial_dist();
    let mut cond_mean = vec![0.0; ns];
    let mut bias = 0.0;
    let mut t2 = 0.0;
    let mut t3 = 0.0;
    for s in 0..ns {
        let mut m = 0.0;
        let mut m2 = 0.0;
        let mut noise = 0.0;
        for a in 0..na {
            let (pe, pb) = (pi_e.prob(s, a), pi_b.prob(s, a));
            let r = mdp.reward_mean(s, a);
            if pb == 0.0 {
                bias -= d1[s] * pe * r;
                continue;
            }
            let rho = pe / pb;
            m += pb * rho * r;
            m2 += pb * (rho * r) * (rho * r);
            noise += pb * rho * rho * mdp.reward_std(s, a).powi(2);
        }
        cond_mean[s] = m;
        t2 += d1[s] * (m2 - m * m).max(0.0);
        t3 += d1[s] * noise;
    }
    let t1 = state_variance(d1, &cond_mean);
    Ok(TheoryReport::from_terms(
        bias,
        vec![
            ("state_variance", t1),
            ("behavior_variance", t2),
            ("reward_noise", t3),
        ],
    ))
}

/// C-IS: combined bias
/// `E_{d1}[−Σ_{ã ∉ supp π_b+} π_e R̄ + Σ_{ã ∈ supp π_b+} π_e ε_G δ_W]`
/// with `δ_W(s,ã) = 1 − W̄(ã|s,ã)π_b(ã|s)/π_b+(ã|s)`, and the eight-term
/// variance
///
/// 1. `V_s[E[X|s]]`
/// 2. `E_s V_{a∼π_b}[Σ_ã ρ+ W̄ μ]`
/// 3. `E_s E_a Σ_ã ρ+² W̄² σ_R²`
/// 4. `E_s E_a Σ_{ã≠a} ρ+² W̄² Δ_σ`
/// 5. `E_s E_a Σ_ã ρ+² μ² σ_W²`
/// 6. `E_s E_a Σ_ã ρ+² σ_R² σ_W²`
/// 7. `E_s E_a C(s,a)`, `C = 2 Σ_{i<j} ρ+_i ρ+_j μ_i μ_j Cov_W(i,j)`
/// 8. `E_s E_a Σ_{ã≠a} ρ+² Δ_σ σ_W²`
///
/// where `μ(s,a,ã)` is the mean of the value multiplying the ratio: `R̄` for
/// the factual action and the annotation mean `R̄ + ε_G` otherwise (with
/// perfect annotations this is the textbook `R̄` everywhere). Factual pairs
/// without weight data count as factual-only.
pub fn theory_cis(
    mdp: &TabularMDP,
    pi_e: &Policy,
    pi_b: &Policy,
    wbar: &AvgWeightTable,
    annotation_bias: &[f64],
    delta_sigma: &[f64],
) -> Result<TheoryReport> {
    check_bandit(mdp, pi_e, pi_b)?;
    check_table("annotation_bias", annotation_bias, mdp)?;
    check_table("delta_sigma", delta_sigma, mdp)?;
    let pbp = augmented_policy(wbar, pi_b)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let d1 = mdp.initial_dist();
    let idx = |s: usize, a: usize| s * na + a;
    let observed = |s: usize, a: usize| wbar.count(0, s, a) > 0;
    let w_mean = |s: usize, a: usize, x: usize| {
        if observed(s, a) {
            wbar.mean(0, s, a, x)
        } else if a == x {
            1.0
        } else {
            0.0
        }
    };
    let w_cov = |s: usize, a: usize, i: usize, j: usize| {
        if observed(s, a) {
            wbar.cov(0, s, a, i, j)
        } else {
            0.0
        }
    };

    let mut bias = 0.0;
    let mut cond_mean = vec![0.0; ns];
    let mut t = [0.0f64; 8];
    for s in 0..ns {
        let rho: Vec<f64> = (0..na)
            .map(|x| {
                let p = pbp.prob(0, s, x);
                if p > 0.0 {
                    pi_e.prob(s, x) / p
                } else {
                    0.0
                }
            })
            .collect();
        for x in 0..na {
            let (pe, p_plus) = (pi_e.prob(s, x), pbp.prob(0, s, x));
            if pe == 0.0 {
                continue;
            }
            if p_plus == 0.0 {
                bias -= d1[s] * pe * mdp.reward_mean(s, x);
            } else {
                let delta_w = 1.0 - w_mean(s, x, x) * pi_b.prob(s, x) / p_plus;
                bias += d1[s] * pe * annotation_bias[idx(s, x)] * delta_w;
            }
        }
        let mut m = 0.0;
        let mut m2 = 0.0;
        let mut local = [0.0f64; 8];
        for a in 0..na {
            let pb = pi_b.prob(s, a);
            if pb == 0.0 {
                continue;
            }
            let mu = |x: usize| {
                if x == a {
                    mdp.reward_mean(s, x)
                } else {
                    mdp.reward_mean(s, x) + annotation_bias[idx(s, x)]
                }
            };
            let mut e = 0.0;
            let mut covterm = 0.0;
            for x in 0..na {
                let (wm, wv) = (w_mean(s, a, x), w_cov(s, a, x, x));
                let r2 = rho[x] * rho[x];
                let sr2 = mdp.reward_std(s, x).powi(2);
                e += rho[x] * wm * mu(x);
                local[2] += pb * r2 * wm * wm * sr2;
                local[4] += pb * r2 * mu(x) * mu(x) * wv;
                local[5] += pb * r2 * sr2 * wv;
                if x != a {
                    local[3] += pb * r2 * wm * wm * delta_sigma[idx(s, x)];
                    local[7] += pb * r2 * delta_sigma[idx(s, x)] * wv;
                }
                for y in (x + 1)..na {
                    covterm += 2.0 * rho[x] * rho[y] * mu(x) * mu(y) * w_cov(s, a, x, y);
                }
            }
            local[6] += pb * covterm;
            m += pb * e;
            m2 += pb * e * e;
        }
        cond_mean[s] = m;
        t[1] += d1[s] * (m2 - m * m).max(0.0);
        for k in 2..8 {
            t[k] += d1[s] * local[k];
        }
    }
    t[0] = state_variance(d1, &cond_mean);
    Ok(TheoryReport::from_terms(
        bias,
        vec![
            ("state_variance", t[0]),
            ("behavior_variance", t[1]),
            ("reward_noise", t[2]),
            ("annotation_noise_excess", t[3]),
            ("weight_variance_mean", t[4]),
            ("weight_variance_noise", t[5]),
            ("weight_covariance", t[6]),
            ("weight_variance_noise_excess", t[7]),
        ],
    ))
}

/// C*-IS with fully available, unbiased annotations:
/// `V_s[V^{π_e}] + E_s Σ_ã π_e(ã|s)² σ_R²(s,ã) + E_s Σ_ã (1 − π_b(ã|s)) π_e(ã|s)² Δ_σ(s,ã)`.
///
/// The middle term equals `E_s E_{a∼π_b}[π_b ρ² σ_R²]` under common support.
/// The last term is the expected annotation-noise excess: action `ã` is
/// answered by an annotation exactly when it is not the factual action,
/// which happens with probability `1 − π_b(ã|s)`.
pub fn theory_cstar_is(
    mdp: &TabularMDP,
    pi_e: &Policy,
    pi_b: &Policy,
    delta_sigma: &[f64],
) -> Result<TheoryReport> {
    check_bandit(mdp, pi_e, pi_b)?;
    check_table("delta_sigma", delta_sigma, mdp)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let d1 = mdp.initial_dist();
    let mut t2 = 0.0;
    let mut t3 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let pe = pi_e.prob(s, a);
            t2 += d1[s] * pe * pe * mdp.reward_std(s, a).powi(2);
            t3 += d1[s] * (1.0 - pi_b.prob(s, a)) * pe * pe * delta_sigma[s * na + a];
        }
    }
    let t1 = state_variance(d1, &target_values(mdp, pi_e));
    Ok(TheoryReport::from_terms(
        0.0,
        vec![
            ("state_variance", t1),
            ("reward_noise", t2),
            ("annotation_noise_excess", t3),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{make_one_state_bandit, make_two_state_bandit, BanditSpec};

    #[test]
    fn one_state_bandit_is_bias_and_variance() {
        let mdp = make_one_state_bandit(1.0, 2.0, 0.5, 0.5).unwrap();
        let pi_b = Policy::new(vec![vec![1.0, 0.0]]).unwrap();
        let pi_e = Policy::new(vec![vec![0.0, 1.0]]).unwrap();
        let rep = theory_is(&mdp, &pi_e, &pi_b).unwrap();
        assert_eq!(rep.bias, -2.0);
        assert_eq!(rep.variance, 0.0);
    }

    #[test]
    fn two_state_bandit_cells() {
        let mdp = make_two_state_bandit(&BanditSpec::two_state_table(0.5)).unwrap();
        // Action 0 is always taken in the second state.
        let half = Policy::new(vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let down = Policy::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let up = Policy::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let rep = theory_is(&mdp, &down, &half).unwrap();
        let expected = (0.25 * 4.0 * (4.0 + 0.25) + 0.5 * (1.0 + 0.25) - 2.25_f64).sqrt();
        assert!((rep.std() - expected).abs() < 1e-12);
        assert!((rep.std() - 1.62).abs() < 0.005);
        let cs = theory_cstar_is(&mdp, &down, &up, &[0.0; 4]).unwrap();
        assert!((cs.std() - 0.5_f64.sqrt()).abs() < 1e-12);
    }
}
