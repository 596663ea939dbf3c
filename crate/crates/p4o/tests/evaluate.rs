mod common;

use common::tiny;
use p4o::checkpoint::Checkpoint;
use p4o::commands::{self, CHECKPOINT_FILE};
use p4o::config::EnvName;
use p4o::metrics::{read_metrics, METRICS_FILE};
use p4o_core::Variant;

fn trained(dir: &std::path::Path, batches: u64) -> p4o::RunConfig {
    let mut cfg = tiny(dir);
    cfg.batches = batches;
    commands::train(&cfg, false).unwrap();
    cfg
}

#[test]
fn uniform_policy_scores_chance_on_the_t_maze() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 0);
    let path = dir.path().join(CHECKPOINT_FILE);
    let mut ck = Checkpoint::read(&path).unwrap();
    for a in ck.snapshot.params.iter_mut().filter(|a| a.name.starts_with("heads.actor.")) {
        a.values.iter_mut().for_each(|v| *v = 0.0);
    }
    ck.write(&path).unwrap();
    let report = commands::eval(&path, false, 400).unwrap();
    assert_eq!(report.scores.len(), 400);
    assert!(report.scores.iter().all(|&s| s == 1.0 || s == -1.0));
    // Each episode pays ±1 with probability 1/2, so σ of the mean is 1/√400.
    let sigma = 1.0 / 400f64.sqrt();
    assert!(report.mean.abs() < 3.0 * sigma, "mean {}", report.mean);
    assert_eq!((report.min, report.max), (-1.0, 1.0));
}

#[test]
fn evaluation_is_reproducible_and_reports_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 4);
    let path = dir.path().join(CHECKPOINT_FILE);
    let greedy = commands::eval(&path, true, 30).unwrap();
    assert_eq!(greedy, commands::eval(&path, true, 30).unwrap());
    let sampled = commands::eval(&path, false, 30).unwrap();
    assert!(greedy.deterministic && !sampled.deterministic);
    for r in [&greedy, &sampled] {
        assert_eq!(r.scores.len(), 30);
        assert!(r.min <= r.mean && r.mean <= r.max);
    }
    println!("greedy mean {} vs sampled mean {}", greedy.mean, sampled.mean);
    assert!(commands::eval(&path, true, 0).is_err());
}

#[test]
fn greedy_play_on_a_deterministic_environment_repeats_its_score() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.env = EnvName::External;
    cfg.external_command = format!("{} stub-env --actions 3 --shape 1 16 16 --episode-len 6 --constant", common::bin());
    cfg.batches = 1;
    commands::train(&cfg, false).unwrap();
    let report = commands::eval(&dir.path().join(CHECKPOINT_FILE), true, 5).unwrap();
    assert_eq!(report.scores, vec![6.0; 5]);
}

#[test]
fn eval_rejects_a_checkpoint_that_does_not_fit_its_config() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 0);
    let path = dir.path().join(CHECKPOINT_FILE);
    let mut ck = Checkpoint::read(&path).unwrap();
    ck.config.belief_dim = 7;
    ck.write(&path).unwrap();
    assert!(commands::eval(&path, true, 2).is_err());
}

#[test]
fn diagnosis_histograms_cover_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 2);
    let report = commands::diagnose(&dir.path().join(CHECKPOINT_FILE), 20).unwrap();
    assert!(report.samples > 0);
    for h in [&report.latent_hist, &report.prediction_hist, &report.error_hist] {
        assert_eq!(h.iter().sum::<usize>(), report.samples * report.dim);
    }
    assert_eq!(report.reference_r_squared, 0.89);
    assert!(report.r_squared.is_some());
}

#[test]
fn baseline_agents_have_no_prediction_r_squared() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.variant = Variant::LstmPpo1024;
    cfg.baseline_hidden = 16;
    cfg.batches = 1;
    commands::train(&cfg, false).unwrap();
    let report = commands::diagnose(&dir.path().join(CHECKPOINT_FILE), 10).unwrap();
    assert_eq!(report.r_squared, None);
}

#[test]
fn comparing_a_configuration_with_itself_shows_no_difference() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("unused"));
    cfg.batches = 4;
    let report = commands::compare(&cfg, &cfg, 2, dir.path()).unwrap();
    assert_eq!(report.difference, 0.0);
    assert_eq!(report.final_a, report.final_b);
    assert_eq!(report.curve_a, report.curve_b);
    assert_eq!(report.welch.t, 0.0);
    assert_eq!(report.seeds, vec![0, 1]);
    let per_seed = read_metrics(&dir.path().join("a/seed-1").join(METRICS_FILE)).unwrap();
    assert_eq!(per_seed.len(), 4);
    assert!(commands::compare(&cfg, &cfg, 1, dir.path()).is_err());
}
