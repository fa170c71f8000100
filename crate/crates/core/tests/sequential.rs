//! Sequential estimators: enumeration on the tree MDP, reductions between
//! estimators, and Monte Carlo on the sepsis simulator.

mod support;

use semi_ope::annotation::{
    annotate_with_q, assign_weights, augmented_policy, AnnotationSource, AnnotationSpec, AvgWeightTable,
    WeightScheme, WeightedDataset,
};
use semi_ope::environments::{
    eps_greedy, generate_dataset, make_sepsis_mdp, make_tree_mdp, optimal_policy, perturbed_policy_set, SepsisConfig,
};
use semi_ope::estimators::{
    cis_estimate, cpdis_estimate, cstar_pdis_estimate, naive_weighted_estimate, pdis_estimate,
};
use semi_ope::mdp_core::{exact_policy_value, horizon_q_values, Policy, TabularMDP};
use semi_ope::numeric::{mean, standard_error};
use semi_ope::rng::StreamKey;
use support::*;

#[test]
fn cpdis_is_unbiased_on_the_tree_by_enumeration() {
    let root = StreamKey::root(51).tag("tree_enumeration");
    for i in 0..50u64 {
        let mut rng = root.at(i).rng();
        let leaves: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, -1.0..=2.0)).collect();
        let mdp = make_tree_mdp(3, 2, &leaves).unwrap();
        let ns = mdp.num_states();
        // Behavior rows may be deterministic: the annotations supply the
        // missing support.
        let pi_b = Policy::new((0..ns).map(|_| random_row(&mut rng, 2, 0.3, 0.2)).collect()).unwrap();
        let pi_e = Policy::new((0..ns).map(|_| random_row(&mut rng, 2, 0.3, 0.0)).collect()).unwrap();
        let q = horizon_q_values(&mdp, &pi_e).unwrap();
        let c = rand::Rng::random_range(&mut rng, 0.3..=0.7);
        let h = rand::Rng::random_range(&mut rng, 0.0..=0.25);
        let laws = two_point_laws(ns, c, h);
        let wbar = AvgWeightTable::from_distributions(ns, 2, &laws).unwrap();
        let bplus = augmented_policy(&wbar, &pi_b).unwrap();
        let v = exact_policy_value(&mdp, &pi_e).unwrap();

        let outcomes = enumerate_tree(&mdp, &pi_b, &q, &laws);
        let total_p: f64 = outcomes.iter().map(|o| o.0).sum();
        assert!((total_p - 1.0).abs() < 1e-12);
        let mut e_cpdis = 0.0;
        let mut e_cstar = 0.0;
        for (p, tr, w) in outcomes {
            let wd = WeightedDataset {
                trajectories: vec![tr.clone()],
                weights: vec![w],
            };
            e_cpdis += p * cpdis_estimate(&wd, &pi_e, &bplus, 1.0).unwrap().value;
            e_cstar += p * cstar_pdis_estimate(&[tr], &pi_e, 1.0).unwrap().value;
        }
        assert!((e_cpdis - v).abs() < 1e-9, "tree {i}: C-PDIS {e_cpdis} vs {v}");
        assert!((e_cstar - v).abs() < 1e-9, "tree {i}: C*-PDIS {e_cstar} vs {v}");
    }
}

fn sepsis_setup() -> (TabularMDP, Policy, Vec<Policy>) {
    let mdp = make_sepsis_mdp(&SepsisConfig::default()).unwrap();
    let opt = optimal_policy(&mdp);
    let behavior = eps_greedy(&opt, 0.1).unwrap();
    let set = perturbed_policy_set(&opt, &[50, 100, 200, 300, 400], 5, StreamKey::root(0).tag("policies")).unwrap();
    (mdp, behavior, set.policies.into_iter().map(|p| p.policy).collect())
}

#[test]
fn estimator_reductions_on_sepsis_data() {
    let (mdp, pi_b, policies) = sepsis_setup();
    let data = generate_dataset(&mdp, &pi_b, 300, StreamKey::root(52).tag("data"));
    for pi_e in policies.iter().step_by(5) {
        let q = horizon_q_values(&mdp, pi_e).unwrap();
        let ann = annotate_with_q(&data, &q, &AnnotationSpec::ideal(AnnotationSource::QEval)).unwrap();
        let pdis = pdis_estimate(&data, pi_e, &pi_b, 1.0).unwrap();

        // Factual-only weights collapse C-PDIS to PDIS.
        let wd = assign_weights(ann.clone(), &WeightScheme::FactualOnly).unwrap();
        let w = semi_ope::annotation::average_weights(&wd, mdp.num_states(), Default::default(), mdp.horizon())
            .unwrap();
        let bplus = augmented_policy(&w, &pi_b).unwrap();
        let c = cpdis_estimate(&wd, pi_e, &bplus, 1.0).unwrap();
        for (x, y) in c.per_trajectory_estimates.iter().zip(&pdis.per_trajectory_estimates) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }

        // Zero annotation weights collapse naive weighted to PDIS.
        let zero: Vec<Vec<f64>> = ann.iter().map(|t| vec![0.0; t.len()]).collect();
        let nw = naive_weighted_estimate(&ann, Some(&zero), pi_e, &pi_b, 1.0).unwrap();
        assert!((nw.value - pdis.value).abs() < 1e-9 * (1.0 + pdis.value.abs()));

        // Equal split over two fully annotated actions with the
        // population augmented policy is C*-PDIS.
        let laws = two_point_laws(mdp.num_states(), 0.5, 0.0);
        let wbar = AvgWeightTable::from_distributions(mdp.num_states(), 2, &laws).unwrap();
        let bplus = augmented_policy(&wbar, &pi_b).unwrap();
        let wd = assign_weights(ann.clone(), &WeightScheme::EqualSplit).unwrap();
        let c = cpdis_estimate(&wd, pi_e, &bplus, 1.0).unwrap();
        let cs = cstar_pdis_estimate(&ann, pi_e, 1.0).unwrap();
        for (x, y) in c.per_trajectory_estimates.iter().zip(&cs.per_trajectory_estimates) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
        assert_eq!(cs.ess, data.len() as f64);
    }
}

#[test]
fn cis_equals_cpdis_on_bandit_data() {
    let rb = random_bandit(StreamKey::root(53), 0.0, -1.0, 2.0);
    let data = generate_dataset(&rb.mdp, &rb.pi_b, 500, StreamKey::root(53).tag("data"));
    let spec = AnnotationSpec {
        noise_std: 0.3,
        seed: 9,
        ..AnnotationSpec::ideal(AnnotationSource::RewardMean)
    };
    let ann = semi_ope::annotation::annotate(&data, &rb.mdp, None, None, &spec).unwrap();
    let wd = assign_weights(ann, &WeightScheme::EqualSplit).unwrap();
    let w = semi_ope::annotation::average_weights(&wd, rb.mdp.num_states(), Default::default(), 1).unwrap();
    let bplus = augmented_policy(&w, &rb.pi_b).unwrap();
    let a = cis_estimate(&wd, &rb.pi_e, &bplus).unwrap();
    let b = cpdis_estimate(&wd, &rb.pi_e, &bplus, 1.0).unwrap();
    assert_eq!(a.per_trajectory_estimates, b.per_trajectory_estimates);
}

#[test]
fn cpdis_and_cstar_pdis_are_unbiased_on_sepsis_monte_carlo() {
    let (mdp, pi_b, policies) = sepsis_setup();
    let ns = mdp.num_states();
    // Factual share ~ U[0.3, 0.7]; the population average is 0.5.
    let laws = two_point_laws(ns, 0.5, 0.2 / 12f64.sqrt());
    let wbar = AvgWeightTable::from_distributions(ns, 2, &laws).unwrap();
    let bplus = augmented_policy(&wbar, &pi_b).unwrap();
    let data = generate_dataset(&mdp, &pi_b, 4000, StreamKey::root(54).tag("data"));
    let scheme = WeightScheme::RandomUniform {
        center: 0.5,
        width: 0.4,
        seed: 54,
    };
    for (k, pi_e) in policies.iter().enumerate().step_by(5) {
        let v = exact_policy_value(&mdp, pi_e).unwrap();
        let q = horizon_q_values(&mdp, pi_e).unwrap();
        let ann = annotate_with_q(&data, &q, &AnnotationSpec::ideal(AnnotationSource::QEval)).unwrap();
        let cs = cstar_pdis_estimate(&ann, pi_e, 1.0).unwrap();
        let se = standard_error(&cs.per_trajectory_estimates);
        assert!((cs.value - v).abs() <= 4.0 * se + 1e-12, "policy {k}: C*-PDIS {} vs {v}", cs.value);
        let wd = assign_weights(ann, &scheme).unwrap();
        let c = cpdis_estimate(&wd, pi_e, &bplus, 1.0).unwrap();
        let se = standard_error(&c.per_trajectory_estimates);
        let m = mean(&c.per_trajectory_estimates);
        assert!((m - v).abs() <= 4.0 * se, "policy {k}: C-PDIS {m} vs {v} (se {se})");
    }
}
