//! Shared fixtures and independent oracles for the integration tests.
//!
//! The oracles compute expectations by exhaustive enumeration of the
//! (state, action, weight-outcome) law and never call the closed-form
//! calculators they are compared against.

#![allow(dead_code)]

use rand::Rng;
use semi_ope::annotation::{
    annotate_with, assign_weights, augmented_policy, AnnotatedTrajectory, Annotation, AnnotationSpec,
    AugmentedPolicy, Availability, AvgWeightTable, WeightScheme,
};
use semi_ope::environments::{generate_dataset, make_bandit, BanditSpec};
use semi_ope::estimators::{cis_estimate, is_estimate};
use semi_ope::mdp_core::{Policy, QTable, Step, TabularMDP, Trajectory};
use semi_ope::numeric::{mean, std_dev};
use semi_ope::rng::StreamKey;

/// Weight law of one factual pair: `(probability, weight vector)` outcomes.
pub type WeightLaw = Vec<(f64, Vec<f64>)>;

// ── Two-sample didactic fixture ─────────────────────────────────────────

/// Two states drawn with equal odds, reward +1 in `s1` and 0 in `s2`
/// whatever the action, behavior always takes action 0, target takes
/// action 1 in `s1` and action 0 in `s2`. The dataset holds `(s1, 0, +1)`
/// with an annotation of +1 for action 1, and `(s2, 0, 0)` without one.
pub struct DidacticFixture {
    pub mdp: TabularMDP,
    pub pi_b: Policy,
    pub pi_e: Policy,
    pub data: Vec<AnnotatedTrajectory>,
}

pub fn didactic_fixture() -> DidacticFixture {
    let mdp = make_bandit(&BanditSpec {
        reward_means: vec![vec![1.0, 1.0], vec![0.0, 0.0]],
        reward_stds: vec![vec![0.0; 2]; 2],
        state_probs: vec![0.5, 0.5],
    })
    .unwrap();
    let pi_b = Policy::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let pi_e = Policy::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let sample = |state: usize, reward: f64, annotation: Option<f64>| {
        AnnotatedTrajectory::new(
            Trajectory {
                steps: vec![Step {
                    state,
                    action: 0,
                    reward,
                }],
                final_state: Some(state),
            },
            2,
            vec![vec![Annotation {
                action: 1,
                value: annotation,
            }]],
        )
        .unwrap()
    };
    DidacticFixture {
        mdp,
        pi_b,
        pi_e,
        data: vec![sample(0, 1.0, Some(1.0)), sample(1, 0.0, None)],
    }
}

// ── Random bandits ──────────────────────────────────────────────────────

/// A random policy row: each entry is zeroed with probability `zero_prob`
/// (at least one entry survives) and survivors get at least `floor` mass.
pub fn random_row<R: Rng>(rng: &mut R, na: usize, zero_prob: f64, floor: f64) -> Vec<f64> {
    loop {
        let keep: Vec<bool> = (0..na).map(|_| rng.random::<f64>() >= zero_prob).collect();
        let k = keep.iter().filter(|&&b| b).count();
        if k == 0 || floor * k as f64 > 1.0 {
            continue;
        }
        let raw: Vec<f64> = keep.iter().map(|&b| if b { rng.random::<f64>() } else { 0.0 }).collect();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let spare = 1.0 - floor * k as f64;
        let row: Vec<f64> = raw
            .iter()
            .zip(&keep)
            .map(|(&r, &b)| if b { floor + spare * r / total } else { 0.0 })
            .collect();
        let s: f64 = row.iter().sum();
        return row.iter().map(|x| x / s).collect();
    }
}

pub struct RandomBandit {
    pub spec: BanditSpec,
    pub mdp: TabularMDP,
    pub pi_b: Policy,
    pub pi_e: Policy,
}

/// Bandit with 1–3 states and 2–3 actions, reward means in
/// `[r_lo, r_hi]`, reward stds in `[0.1, 1]`, and random policies whose
/// entries are zero with probability `zero_prob` (floored at 0.15 mass).
pub fn random_bandit(key: StreamKey, zero_prob: f64, r_lo: f64, r_hi: f64) -> RandomBandit {
    let mut rng = key.rng();
    let ns = rng.random_range(1..=3usize);
    let na = rng.random_range(2..=3usize);
    let spec = BanditSpec {
        reward_means: (0..ns)
            .map(|_| (0..na).map(|_| rng.random_range(r_lo..=r_hi)).collect())
            .collect(),
        reward_stds: (0..ns)
            .map(|_| (0..na).map(|_| rng.random_range(0.1..=1.0)).collect())
            .collect(),
        state_probs: random_row(&mut rng, ns, 0.0, 0.2),
    };
    let pi_b = Policy::new((0..ns).map(|_| random_row(&mut rng, na, zero_prob, 0.15)).collect()).unwrap();
    let pi_e = Policy::new((0..ns).map(|_| random_row(&mut rng, na, zero_prob, 0.0)).collect()).unwrap();
    RandomBandit {
        mdp: make_bandit(&spec).unwrap(),
        spec,
        pi_b,
        pi_e,
    }
}

/// Factual-indexed raw weight rows (`rows[a]`, all entries positive) and
/// per-pair availability probabilities `avail[s][ã]` drawn from
/// `{0, U(0,1), 1}`.
pub struct WeightSetting {
    pub rows: Vec<Vec<f64>>,
    pub avail: Vec<Vec<f64>>,
}

pub fn random_weight_setting<R: Rng>(rng: &mut R, ns: usize, na: usize) -> WeightSetting {
    WeightSetting {
        rows: (0..na)
            .map(|_| (0..na).map(|_| rng.random_range(0.05..=1.0)).collect())
            .collect(),
        avail: (0..ns)
            .map(|_| {
                (0..na)
                    .map(|_| match rng.random_range(0..3u32) {
                        0 => 0.0,
                        1 => 1.0,
                        _ => rng.random::<f64>(),
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Exact weight law of factual pair `(s, a)` under `ByFactual { rows }`
/// with independent per-slot availability: every subset of annotated
/// counterfactual actions, with the row renormalized over the factual
/// action and that subset.
pub fn weight_law(ws: &WeightSetting, s: usize, a: usize, na: usize) -> WeightLaw {
    let others: Vec<usize> = (0..na).filter(|&x| x != a).collect();
    let mut law = Vec::new();
    for mask in 0..(1u32 << others.len()) {
        let mut p = 1.0;
        let mut included = vec![false; na];
        included[a] = true;
        for (k, &x) in others.iter().enumerate() {
            let q = ws.avail[s][x];
            if mask & (1 << k) != 0 {
                p *= q;
                included[x] = true;
            } else {
                p *= 1.0 - q;
            }
        }
        if p == 0.0 {
            continue;
        }
        let total: f64 = (0..na).filter(|&x| included[x]).map(|x| ws.rows[a][x]).sum();
        let w = (0..na)
            .map(|x| if included[x] { ws.rows[a][x] / total } else { 0.0 })
            .collect();
        law.push((p, w));
    }
    law
}

/// Laws for every `(s, a)`; pairs the behavior policy never takes stay
/// empty (unobserved).
pub fn weight_laws(ws: &WeightSetting, pi_b: &Policy) -> Vec<WeightLaw> {
    let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
    let mut laws = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            laws.push(if pi_b.prob(s, a) > 0.0 {
                weight_law(ws, s, a, na)
            } else {
                Vec::new()
            });
        }
    }
    laws
}

/// Population augmented behavior policy of a weight law.
pub fn population_bplus(laws: &[WeightLaw], pi_b: &Policy) -> (AvgWeightTable, AugmentedPolicy) {
    let wbar = AvgWeightTable::from_distributions(pi_b.num_states(), pi_b.num_actions(), laws).unwrap();
    let bplus = augmented_policy(&wbar, pi_b).unwrap();
    (wbar, bplus)
}

// ── Enumeration oracles ─────────────────────────────────────────────────

/// Exact `(mean, variance)` of the single-sample IS estimate.
pub fn exact_is_moments(mdp: &TabularMDP, pi_e: &Policy, pi_b: &Policy) -> (f64, f64) {
    let d1 = mdp.initial_dist();
    let (mut m1, mut m2) = (0.0, 0.0);
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let pb = pi_b.prob(s, a);
            if pb == 0.0 {
                continue;
            }
            let rho = pi_e.prob(s, a) / pb;
            let (r, sd) = (mdp.reward_mean(s, a), mdp.reward_std(s, a));
            m1 += d1[s] * pb * rho * r;
            m2 += d1[s] * pb * rho * rho * (r * r + sd * sd);
        }
    }
    (m1, m2 - m1 * m1)
}

/// Exact `(mean, variance)` of the single-sample C-IS estimate when the
/// annotation of `(s, ã)` has mean `R̄(s,ã) + eps_g[s·|A|+ã]` and std
/// `sigma_g`, and weights follow `laws`.
pub fn exact_cis_moments(
    mdp: &TabularMDP,
    pi_e: &Policy,
    pi_b: &Policy,
    laws: &[WeightLaw],
    eps_g: &[f64],
    sigma_g: f64,
) -> (f64, f64) {
    let (_, bplus) = population_bplus(laws, pi_b);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let d1 = mdp.initial_dist();
    let (mut m1, mut m2) = (0.0, 0.0);
    for s in 0..ns {
        for a in 0..na {
            let pb = pi_b.prob(s, a);
            if pb == 0.0 {
                continue;
            }
            for (p, w) in &laws[s * na + a] {
                let (mut cm, mut cv) = (0.0, 0.0);
                for x in 0..na {
                    let pe = pi_e.prob(s, x);
                    if w[x] == 0.0 || pe == 0.0 {
                        continue;
                    }
                    let rho = pe / bplus.prob(0, s, x);
                    let (mu, var) = if x == a {
                        (mdp.reward_mean(s, x), mdp.reward_std(s, x).powi(2))
                    } else {
                        (mdp.reward_mean(s, x) + eps_g[s * na + x], sigma_g * sigma_g)
                    };
                    cm += rho * w[x] * mu;
                    cv += (rho * w[x]).powi(2) * var;
                }
                m1 += d1[s] * pb * p * cm;
                m2 += d1[s] * pb * p * (cm * cm + cv);
            }
        }
    }
    (m1, m2 - m1 * m1)
}

/// `v(π_e)` of a bandit.
pub fn bandit_value(mdp: &TabularMDP, pi_e: &Policy) -> f64 {
    let d1 = mdp.initial_dist();
    (0..mdp.num_states())
        .map(|s| d1[s] * (0..mdp.num_actions()).map(|a| pi_e.prob(s, a) * mdp.reward_mean(s, a)).sum::<f64>())
        .sum()
}

// ── Monte Carlo through the library pipeline ────────────────────────────

/// Sample mean and std of per-sample estimates over `chunks × chunk` draws.
pub struct McMoments {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
}

fn moments(samples: Vec<f64>) -> McMoments {
    McMoments {
        mean: mean(&samples),
        std: std_dev(&samples),
        samples,
    }
}

/// IS per-sample estimates on fresh behavior data.
pub fn mc_is(rb: &RandomBandit, key: StreamKey, chunks: usize, chunk: usize) -> McMoments {
    let mut all = Vec::with_capacity(chunks * chunk);
    for c in 0..chunks {
        let data = generate_dataset(&rb.mdp, &rb.pi_b, chunk, key.at(c as u64));
        all.extend(is_estimate(&data, &rb.pi_e, &rb.pi_b).unwrap().per_trajectory_estimates);
    }
    moments(all)
}

/// C-IS per-sample estimates: annotations `R̄ + ε_G` with noise `sigma_g`
/// and per-pair availability, factual-indexed weights, and the population
/// augmented behavior policy.
pub fn mc_cis(
    rb: &RandomBandit,
    ws: &WeightSetting,
    eps_g: &[f64],
    sigma_g: f64,
    key: StreamKey,
    chunks: usize,
    chunk: usize,
) -> McMoments {
    let na = rb.mdp.num_actions();
    let laws = weight_laws(ws, &rb.pi_b);
    let (_, bplus) = population_bplus(&laws, &rb.pi_b);
    let scheme = WeightScheme::ByFactual {
        weights: ws.rows.clone(),
    };
    let mut all = Vec::with_capacity(chunks * chunk);
    for c in 0..chunks {
        let ck = key.at(c as u64);
        let data = generate_dataset(&rb.mdp, &rb.pi_b, chunk, ck.tag("data"));
        let spec = AnnotationSpec {
            source: semi_ope::annotation::AnnotationSource::RewardMean,
            noise_std: sigma_g,
            availability: Availability::PerPair(ws.avail.clone()),
            seed: ck.tag("annotations").value(),
        };
        let ann = annotate_with(&data, na, |_, s, x| rb.mdp.reward_mean(s, x) + eps_g[s * na + x], &spec).unwrap();
        let wd = assign_weights(ann, &scheme).unwrap();
        all.extend(cis_estimate(&wd, &rb.pi_e, &bplus).unwrap().per_trajectory_estimates);
    }
    moments(all)
}

// ── Tree enumeration ────────────────────────────────────────────────────

/// Two-point weight law per factual pair: factual share `c ± h` with equal
/// odds, the rest on the other action (two actions).
pub fn two_point_laws(ns: usize, c: f64, h: f64) -> Vec<WeightLaw> {
    let mut laws = Vec::with_capacity(ns * 2);
    for _ in 0..ns {
        for a in 0..2 {
            let vec_for = |share: f64| {
                let mut v = vec![1.0 - share; 2];
                v[a] = share;
                v
            };
            laws.push(vec![(0.5, vec_for(c - h)), (0.5, vec_for(c + h))]);
        }
    }
    laws
}

/// Every behavior trajectory and weight outcome of a deterministic tree,
/// with its probability, annotated with exact target Q-values.
pub fn enumerate_tree(
    mdp: &TabularMDP,
    pi_b: &Policy,
    q: &QTable,
    laws: &[WeightLaw],
) -> Vec<(f64, AnnotatedTrajectory, Vec<f64>)> {
    fn go(
        mdp: &TabularMDP,
        pi_b: &Policy,
        q: &QTable,
        laws: &[WeightLaw],
        s: usize,
        prefix: (f64, Vec<Step>, Vec<Vec<Annotation>>, Vec<f64>),
        out: &mut Vec<(f64, AnnotatedTrajectory, Vec<f64>)>,
    ) {
        let (p, steps, ann, w) = prefix;
        let t = steps.len();
        if t == mdp.horizon() {
            let tr = AnnotatedTrajectory::new(
                Trajectory {
                    steps,
                    final_state: Some(s),
                },
                2,
                ann,
            )
            .unwrap();
            out.push((p, tr, w));
            return;
        }
        for a in 0..2 {
            let pb = pi_b.prob(s, a);
            if pb == 0.0 {
                continue;
            }
            let next = mdp.transition_row(s, a)[0].0;
            for (pw, wv) in &laws[s * 2 + a] {
                let mut steps = steps.clone();
                steps.push(Step {
                    state: s,
                    action: a,
                    reward: mdp.reward_mean(s, a),
                });
                let mut ann = ann.clone();
                ann.push(vec![Annotation {
                    action: 1 - a,
                    value: Some(q.q(t, s, 1 - a)),
                }]);
                let mut w = w.clone();
                w.extend_from_slice(wv);
                go(mdp, pi_b, q, laws, next, (p * pb * pw, steps, ann, w), out);
            }
        }
    }
    let mut out = Vec::new();
    go(mdp, pi_b, q, laws, 0, (1.0, Vec::new(), Vec::new(), Vec::new()), &mut out);
    out
}

// ── Random C-IS instances ───────────────────────────────────────────────

/// Random instance for the C-IS calculators: weights, annotation bias and
/// annotation noise.
pub struct CisInstance {
    pub rb: RandomBandit,
    pub ws: WeightSetting,
    pub eps_g: Vec<f64>,
    pub sigma_g: f64,
}

pub fn cis_instance(key: StreamKey, zero_prob: f64) -> CisInstance {
    let rb = random_bandit(key.tag("bandit"), zero_prob, -1.0, 2.0);
    let (ns, na) = (rb.mdp.num_states(), rb.mdp.num_actions());
    let mut rng = key.tag("extras").rng();
    let ws = random_weight_setting(&mut rng, ns, na);
    let biased = rng.random::<bool>();
    let eps_g = (0..ns * na)
        .map(|_| if biased { rng.random_range(-0.5..=0.5) } else { 0.0 })
        .collect();
    let sigma_g = rng.random_range(0.0..=1.0);
    CisInstance { rb, ws, eps_g, sigma_g }
}

pub fn delta_sigma(inst: &CisInstance) -> Vec<f64> {
    inst.rb
        .mdp
        .reward_std_table()
        .iter()
        .map(|s| inst.sigma_g * inst.sigma_g - s * s)
        .collect()
}
