use std::fs;
use std::path::Path;

use rnpc_core::harness::{
    eval_stage, gen_data_stage, learn_circuit_stage, partition_stage, read_results, report, run,
    train_stage, AttackGrid, ExperimentConfig,
};
use rnpc_core::recognizer::TrainConfig;
use rnpc_core::Error;

fn small(out: &Path, bounds: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        n_train: 1500,
        n_test: 120,
        train: TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        },
        attack: AttackGrid {
            bounds,
            steps: 20,
            ..AttackGrid::default()
        },
        out: out.to_path_buf(),
        seed: 42,
        ..ExperimentConfig::default()
    }
}

#[test]
fn null_attack_leaves_accuracy_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&small(dir.path(), vec![0.0])).unwrap();
    // three modes, three single-attribute sets
    assert_eq!(o.rows.len(), 3 * 3);
    for r in &o.rows {
        assert_eq!(r.adv_acc, r.benign_acc, "{}", r.mode);
        assert_eq!(r.mean_tv, 0.0);
        assert!(r.queries_ok);
    }
    assert!(o.bounds_ok());
}

#[test]
fn staged_commands_reproduce_the_all_in_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&dir.path().join("run"), vec![0.0, 0.05, 0.11]);
    let whole = run(&cfg).unwrap();
    let again = run(&ExperimentConfig {
        out: dir.path().join("again"),
        ..cfg.clone()
    })
    .unwrap();
    let read = |d: &Path| fs::read_to_string(d.join("results.csv")).unwrap();
    assert_eq!(read(&whole.out_dir), read(&again.out_dir));

    let staged = dir.path().join("staged");
    let cfg_staged = ExperimentConfig {
        out: staged.clone(),
        ..cfg
    };
    gen_data_stage(&cfg_staged, &staged).unwrap();
    train_stage(&staged).unwrap();
    learn_circuit_stage(&staged).unwrap();
    partition_stage(&staged).unwrap();
    eval_stage(&staged).unwrap();
    assert_eq!(read(&whole.out_dir), read(&staged));

    // adversarial accuracy does not climb with the bound beyond stochastic slack
    let rows = read_results(&read(&staged)).unwrap();
    let mut modes: Vec<String> = rows.iter().map(|r| r.mode.clone()).collect();
    modes.sort();
    modes.dedup();
    assert_eq!(modes.len(), 3);
    for mode in &modes {
        let mut by_bound: Vec<(f64, f64)> = Vec::new();
        for b in [0.0, 0.05, 0.11] {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| &r.mode == mode && r.bound == b)
                .map(|r| r.adv_acc)
                .collect();
            by_bound.push((b, v.iter().sum::<f64>() / v.len() as f64));
        }
        assert!(
            by_bound.windows(2).all(|w| w[1].1 <= w[0].1 + 0.02),
            "{mode}: {by_bound:?}"
        );
    }

    // one polyline per mode with a point per bound
    let svg = fs::read_to_string(staged.join("adv_acc_plain_linf.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .collect();
    assert_eq!(lines.len(), 3);
    for l in lines {
        assert_eq!(l.attribute("points").unwrap().split_whitespace().count(), 3);
    }
    assert!(staged.join("report.md").is_file());
    assert!(staged.join("attack_count.csv").is_file());
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        train_stage(dir.path()),
        Err(Error::MissingArtifacts(_))
    ));
    assert!(matches!(
        eval_stage(dir.path()),
        Err(Error::MissingArtifacts(_))
    ));
    assert!(matches!(
        report(dir.path()),
        Err(Error::MissingArtifacts(_))
    ));
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = small(Path::new("out"), vec![0.0, 0.03]);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    let partial = ExperimentConfig::from_json(r#"{"preset": "celeba-like", "seed": 7}"#).unwrap();
    assert_eq!(partial.preset, "celeba-like");
    assert_eq!(partial.n_train, ExperimentConfig::default().n_train);
    let bad = ExperimentConfig {
        modes: Vec::new(),
        ..ExperimentConfig::default()
    };
    assert!(bad.validate().is_err());
}
