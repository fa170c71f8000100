//! Closed-form calculators and estimators against enumeration oracles.

mod support;

use semi_ope::annotation::{assign_weights, augmented_policy, average_weights, Pooling, WeightScheme};
use semi_ope::estimators::theory::{theory_cis, theory_cstar_is, theory_is};
use semi_ope::estimators::{cis_estimate, naive_unweighted_estimate, rho_plus};
use semi_ope::experiments::std_standard_error;
use semi_ope::numeric::{mean, standard_error};
use semi_ope::rng::StreamKey;
use support::*;

#[test]
fn didactic_fixture_naive_is_two_thirds_and_cis_is_one_half() {
    let fx = didactic_fixture();
    let naive = naive_unweighted_estimate(&fx.data, &fx.pi_e, &fx.pi_b, 1.0).unwrap();
    assert_eq!(naive.value, 2.0 / 3.0);
    for alpha in [0.1, 0.5, 0.9] {
        let scheme = WeightScheme::Constant {
            weights: vec![alpha, 1.0 - alpha],
        };
        let wd = assign_weights(fx.data.clone(), &scheme).unwrap();
        let wbar = average_weights(&wd, 2, Pooling::Pooled, 1).unwrap();
        let bplus = augmented_policy(&wbar, &fx.pi_b).unwrap();
        assert_eq!(bplus.row(0, 0), &[alpha, 1.0 - alpha]);
        assert_eq!(bplus.row(0, 1), &[1.0, 0.0]);
        let rep = cis_estimate(&wd, &fx.pi_e, &bplus).unwrap();
        assert_eq!(rep.value, 0.5, "alpha = {alpha}");
    }
}

#[test]
fn theory_matches_enumeration_on_random_bandits() {
    let root = StreamKey::root(41).tag("theory_vs_enumeration");
    for i in 0..200u64 {
        let inst = cis_instance(root.at(i), 0.3);
        let rb = &inst.rb;
        let v = bandit_value(&rb.mdp, &rb.pi_e);

        let th = theory_is(&rb.mdp, &rb.pi_e, &rb.pi_b).unwrap();
        let (m, var) = exact_is_moments(&rb.mdp, &rb.pi_e, &rb.pi_b);
        assert!((th.bias - (m - v)).abs() < 1e-9, "IS bias, instance {i}");
        assert!((th.variance - var).abs() < 1e-9, "IS variance, instance {i}");

        let laws = weight_laws(&inst.ws, &rb.pi_b);
        let (wbar, _) = population_bplus(&laws, &rb.pi_b);
        let th = theory_cis(&rb.mdp, &rb.pi_e, &rb.pi_b, &wbar, &inst.eps_g, &delta_sigma(&inst)).unwrap();
        let (m, var) = exact_cis_moments(&rb.mdp, &rb.pi_e, &rb.pi_b, &laws, &inst.eps_g, inst.sigma_g);
        assert!((th.bias - (m - v)).abs() < 1e-9, "C-IS bias, instance {i}: {} vs {}", th.bias, m - v);
        assert!(
            (th.variance - var).abs() < 1e-9,
            "C-IS variance, instance {i}: {} vs {var}",
            th.variance
        );
    }
}

#[test]
fn theory_variance_matches_monte_carlo() {
    let root = StreamKey::root(42).tag("theory_vs_mc");
    for i in 0..8u64 {
        let inst = cis_instance(root.at(i), 0.3);
        let rb = &inst.rb;
        let th = theory_is(&rb.mdp, &rb.pi_e, &rb.pi_b).unwrap();
        let mc = mc_is(rb, root.at(i).tag("is"), 4, 50_000);
        let se = 2.0 * mc.std * std_standard_error(&mc.samples);
        assert!(
            (mc.std.powi(2) - th.variance).abs() <= 5.0 * se + 1e-12,
            "IS instance {i}: mc {} theory {}",
            mc.std.powi(2),
            th.variance
        );

        let laws = weight_laws(&inst.ws, &rb.pi_b);
        let (wbar, _) = population_bplus(&laws, &rb.pi_b);
        let th = theory_cis(&rb.mdp, &rb.pi_e, &rb.pi_b, &wbar, &inst.eps_g, &delta_sigma(&inst)).unwrap();
        let mc = mc_cis(rb, &inst.ws, &inst.eps_g, inst.sigma_g, root.at(i).tag("cis"), 4, 50_000);
        let se = 2.0 * mc.std * std_standard_error(&mc.samples);
        assert!(
            (mc.std.powi(2) - th.variance).abs() <= 5.0 * se + 1e-12,
            "C-IS instance {i}: mc {} theory {}",
            mc.std.powi(2),
            th.variance
        );
        let v = bandit_value(&rb.mdp, &rb.pi_e);
        assert!(
            (mc.mean - v - th.bias).abs() <= 5.0 * standard_error(&mc.samples),
            "C-IS bias, instance {i}"
        );
    }
}

#[test]
fn annotations_of_unsupported_actions_reduce_bias() {
    let root = StreamKey::root(43).tag("bias_reduction");
    let mut checked = 0;
    for i in 0..2000u64 {
        let rb = random_bandit(root.at(i), 0.4, 0.0, 2.0);
        let (ns, na) = (rb.mdp.num_states(), rb.mdp.num_actions());
        let mut rng = root.at(i).tag("weights").rng();
        let ws = random_weight_setting(&mut rng, ns, na);
        let laws = weight_laws(&ws, &rb.pi_b);
        let (wbar, bplus) = population_bplus(&laws, &rb.pi_b);
        let qualifies = (0..ns).any(|s| {
            (0..na).any(|a| {
                rb.pi_b.prob(s, a) == 0.0
                    && bplus.prob(0, s, a) > 0.0
                    && rb.pi_e.prob(s, a) > 0.0
                    && rb.mdp.reward_mean(s, a) > 0.0
            })
        });
        if !qualifies {
            continue;
        }
        checked += 1;
        let zeros = vec![0.0; ns * na];
        let is = theory_is(&rb.mdp, &rb.pi_e, &rb.pi_b).unwrap();
        let cis = theory_cis(&rb.mdp, &rb.pi_e, &rb.pi_b, &wbar, &zeros, &zeros).unwrap();
        assert!(cis.bias.abs() < is.bias.abs(), "instance {i}: {} vs {}", cis.bias, is.bias);
    }
    assert!(checked >= 100, "only {checked} qualifying instances");
}

#[test]
fn cstar_variance_never_exceeds_is_variance_with_full_support() {
    let root = StreamKey::root(44).tag("cstar_vs_is");
    for i in 0..1000u64 {
        let rb = random_bandit(root.at(i), 0.0, -1.0, 2.0);
        let zeros = vec![0.0; rb.mdp.num_states() * rb.mdp.num_actions()];
        let is = theory_is(&rb.mdp, &rb.pi_e, &rb.pi_b).unwrap();
        let cs = theory_cstar_is(&rb.mdp, &rb.pi_e, &rb.pi_b, &zeros).unwrap();
        assert!(cs.variance <= is.variance, "instance {i}");
        if is.term("behavior_variance").unwrap() > 0.0 {
            assert!(cs.variance < is.variance, "instance {i} should be strict");
        }
    }
}

#[test]
fn augmented_ratio_has_unit_mean() {
    let root = StreamKey::root(45).tag("rho_plus");
    for i in 0..5u64 {
        let rb = random_bandit(root.at(i).tag("bandit"), 0.3, -1.0, 2.0);
        let (ns, na) = (rb.mdp.num_states(), rb.mdp.num_actions());
        let mut rng = root.at(i).tag("weights").rng();
        // Full availability of every target action keeps the augmented
        // behavior policy supportive of the target.
        let mut ws = random_weight_setting(&mut rng, ns, na);
        for row in &mut ws.avail {
            for p in row.iter_mut() {
                *p = p.max(0.5);
            }
        }
        let laws = weight_laws(&ws, &rb.pi_b);
        let (_, bplus) = population_bplus(&laws, &rb.pi_b);
        let data = semi_ope::environments::generate_dataset(&rb.mdp, &rb.pi_b, 20_000, root.at(i).tag("data"));
        let spec = semi_ope::annotation::AnnotationSpec {
            source: semi_ope::annotation::AnnotationSource::RewardMean,
            noise_std: 0.0,
            availability: semi_ope::annotation::Availability::PerPair(ws.avail.clone()),
            seed: root.at(i).tag("ann").value(),
        };
        let ann = semi_ope::annotation::annotate_with(&data, na, |_, s, a| rb.mdp.reward_mean(s, a), &spec).unwrap();
        let wd = assign_weights(ann, &WeightScheme::ByFactual { weights: ws.rows.clone() }).unwrap();
        let rp = rho_plus(&wd, &rb.pi_e, &bplus).unwrap();
        let m = mean(&rp.per_trajectory);
        assert!((m - 1.0).abs() <= 4.0 * standard_error(&rp.per_trajectory), "instance {i}: {m}");
    }
}
