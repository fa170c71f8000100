//! Serialization round trips, shipped configs, manifests and the weight
//! heatmap's agreement with its closed form.

use std::io::BufReader;
use std::path::PathBuf;

use semi_ope::annotation::{annotate, read_annotated_jsonl, write_annotated_jsonl, AnnotationSource, AnnotationSpec};
use semi_ope::annotation::Availability;
use semi_ope::environments::{eps_greedy, generate_datasets, make_sepsis_mdp, optimal_policy, SepsisConfig};
use semi_ope::estimators::{pdis_estimate, EstimateReport};
use semi_ope::experiments::{
    compute_metrics, run_weight_heatmap, ExperimentConfig, RunManifest, WeightGrid, WeightHeatmapConfig,
};
use semi_ope::mdp_core::{read_trajectories_jsonl, write_trajectories_jsonl, Policy, TabularMDP};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn trajectory_files_round_trip_byte_for_byte() {
    let mdp = make_sepsis_mdp(&SepsisConfig::default()).unwrap();
    let pi_b = eps_greedy(&optimal_policy(&mdp), 0.1).unwrap();
    let data = generate_datasets(&mdp, &pi_b, 2, 200, 7).unwrap();
    for d in &data {
        let mut first = Vec::new();
        write_trajectories_jsonl(&mut first, d).unwrap();
        let back = read_trajectories_jsonl(BufReader::new(&first[..])).unwrap();
        assert_eq!(&back, d);
        let mut second = Vec::new();
        write_trajectories_jsonl(&mut second, &back).unwrap();
        assert_eq!(first, second);
    }
    // Same seed, same bytes.
    let again = generate_datasets(&mdp, &pi_b, 2, 200, 7).unwrap();
    assert_eq!(again, data);
}

#[test]
fn annotated_files_round_trip_byte_for_byte() {
    let mdp = make_sepsis_mdp(&SepsisConfig::default()).unwrap();
    let opt = optimal_policy(&mdp);
    let pi_b = eps_greedy(&opt, 0.1).unwrap();
    let data = generate_datasets(&mdp, &pi_b, 1, 100, 3).unwrap().remove(0);
    let spec = AnnotationSpec {
        source: AnnotationSource::QBehavior,
        noise_std: 0.2,
        availability: Availability::Fraction(0.5),
        seed: 11,
    };
    let ann = annotate(&data, &mdp, None, Some(&pi_b), &spec).unwrap();
    let mut first = Vec::new();
    write_annotated_jsonl(&mut first, &ann).unwrap();
    let back = read_annotated_jsonl(BufReader::new(&first[..])).unwrap();
    assert_eq!(back, ann);
    let mut second = Vec::new();
    write_annotated_jsonl(&mut second, &back).unwrap();
    assert_eq!(first, second);
}

#[test]
fn environment_policy_and_report_documents_round_trip() {
    let mdp = make_sepsis_mdp(&SepsisConfig::default()).unwrap();
    let text = mdp.to_json().unwrap();
    let back = TabularMDP::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);

    let pi = eps_greedy(&optimal_policy(&mdp), 0.1).unwrap();
    let back = Policy::from_json(&pi.to_json().unwrap()).unwrap();
    assert_eq!(back, pi);

    let data = generate_datasets(&mdp, &pi, 1, 50, 1).unwrap().remove(0);
    let rep = pdis_estimate(&data, &pi, &pi, 1.0).unwrap();
    let json = serde_json::to_string(&rep).unwrap();
    let back: EstimateReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.value, rep.value);
    assert_eq!(back.per_trajectory_estimates, rep.per_trajectory_estimates);
    assert_eq!(back.ess, rep.ess);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut kinds = Vec::new();
    for name in ["table1", "table2", "table4", "fig5a", "fig5e", "fig6"] {
        let text = std::fs::read_to_string(configs_dir().join(format!("{name}.toml"))).unwrap();
        let cfg = ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        kinds.push(cfg.kind());
        let json = serde_json::to_value(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }
    assert_eq!(
        kinds,
        ["bandit_table", "sepsis_suite", "bandit_table", "weight_heatmap", "weight_heatmap", "missingness_heatmap"]
    );
    let sepsis = std::fs::read_to_string(configs_dir().join("sepsis_default.toml")).unwrap();
    assert_eq!(SepsisConfig::from_toml(&sepsis).unwrap(), SepsisConfig::default());
}

#[test]
fn config_errors_name_the_offending_field() {
    let bad = "kind = \"bandit_table\"\nseed = 1\nrepetitions = \"many\"\n";
    let err = ExperimentConfig::from_toml(bad).unwrap_err().to_string();
    assert!(err.contains("repetitions"), "{err}");
    let unknown = "kind = \"no_such_experiment\"\n";
    assert!(ExperimentConfig::from_toml(unknown).is_err());
}

#[test]
fn manifest_lists_and_verifies_every_file() {
    let dir = std::env::temp_dir().join(format!("semi-ope-manifest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut m = RunManifest::new("test", serde_json::json!({"a": 1}), 5, "fp".into());
    m.write_file(&dir, "a.csv", b"x,y\n1,2\n").unwrap();
    m.write_file(&dir, "b.csv", b"z\n3\n").unwrap();
    m.save(&dir).unwrap();
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let loaded: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(loaded.files.len(), 2);
    assert!(loaded.verify(&dir).unwrap());
    std::fs::write(dir.join("b.csv"), b"tampered").unwrap();
    assert!(!loaded.verify(&dir).unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn metrics_of_perfect_and_shifted_estimates() {
    let truth = vec![0.1, 0.4, 0.2, 0.9];
    let perfect = vec![truth.clone(), truth.clone()];
    let r = compute_metrics(&perfect, &truth, 0.3).unwrap();
    assert_eq!(r.rmse_mean, 0.0);
    assert_eq!(r.spearman_mean, 1.0);
    assert_eq!(r.accuracy_mean, 1.0);
    let shifted: Vec<Vec<f64>> = vec![truth.iter().map(|v| v + 0.5).collect()];
    let r = compute_metrics(&shifted, &truth, 0.3).unwrap();
    assert!((r.rmse_mean - 0.5).abs() < 1e-12);
    assert_eq!(r.spearman_mean, 1.0);
    // Everything is now above the threshold: both low-value policies are
    // false positives.
    assert_eq!(r.fpr_mean, 1.0);
    assert_eq!(r.fnr_mean, 0.0);
}

#[test]
fn random_weight_heatmap_matches_its_closed_form() {
    let cfg = WeightHeatmapConfig {
        seed: 61,
        bandit: semi_ope::environments::BanditSpec {
            reward_means: vec![vec![1.0, 2.0]],
            reward_stds: vec![vec![1.0, 1.0]],
            state_probs: vec![1.0],
        },
        behavior: vec![vec![0.1, 0.9]],
        target: vec![vec![0.8, 0.2]],
        annotation_noise_std: 1.0,
        grid: WeightGrid::RandomUniform {
            center: 0.5,
            widths: vec![0.0, 0.4, 1.0],
        },
        samples_per_cell: 200_000,
    };
    let res = run_weight_heatmap(&cfg).unwrap();
    for c in &res.cells {
        assert!(
            (c.std - c.theory_std).abs() <= 4.0 * c.std_se,
            "width {}: mc {} theory {} (se {})",
            c.x,
            c.std,
            c.theory_std,
            c.std_se
        );
        assert!(c.bias.abs() <= 4.0 * c.se, "width {}: bias {}", c.x, c.bias);
    }
}
