use p4o_core::diagnostics::{collect_latents, histogram, r_squared, HIST_BINS, REFERENCE_R2};
use p4o_core::envs::{BuiltinEnv, EnvSpec, VecEnv};
use p4o_core::session::{EpisodeTracker, Session};
use p4o_core::{Agent, AgentConfig, Rng, Variant};

fn catch_spec() -> EnvSpec {
    EnvSpec { kind: BuiltinEnv::PixelCatch { size: 16, pellets: 2 }, frame_stack: 4, sticky_p: 0.25, sign_rewards: false }
}

fn config() -> AgentConfig {
    let mut cfg = AgentConfig::toy();
    cfg.num_envs = 2;
    cfg.batch_steps = 10;
    cfg.minibatches = 2;
    cfg.epochs = 2;
    cfg
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let spec = catch_spec();
    let mut straight = Session::<f64>::new(config(), &spec, 3).unwrap();
    let reports: Vec<_> = (0..4).map(|_| straight.run_batch().unwrap()).collect();

    let mut first = Session::<f64>::new(config(), &spec, 3).unwrap();
    for _ in 0..2 {
        first.run_batch().unwrap();
    }
    let snap = first.snapshot().unwrap();
    let json = serde_json::to_string(&snap).unwrap();
    let snap = serde_json::from_str(&json).unwrap();
    let mut resumed = Session::<f64>::new(config(), &spec, 999).unwrap();
    resumed.restore(&snap).unwrap();
    for report in &reports[2..] {
        assert_eq!(&resumed.run_batch().unwrap(), report);
    }
    assert!(resumed.agent.params.values_equal(&straight.agent.params));
    assert_eq!(resumed.tracker, straight.tracker);
}

#[test]
fn sessions_reject_mismatched_frames() {
    let mut cfg = config();
    cfg.encoder.input_shape = [1, 16, 16];
    assert!(Session::<f64>::new(cfg, &catch_spec(), 0).is_err());
}

#[test]
fn ablation_reports_prediction_loss_without_training_on_it() {
    let mut cfg = config();
    cfg.variant = Variant::P4oNoPp;
    let mut s = Session::<f64>::new(cfg, &catch_spec(), 4).unwrap();
    let r = s.run_batch().unwrap();
    assert!(r.losses.prediction > 0.0);
    let without = r.losses.actor + 0.5 * r.losses.critic + 0.02 * r.losses.entropy;
    assert!((r.losses.total - without).abs() < 1e-12);
}

#[test]
fn rolling_statistics_use_the_last_hundred_episodes() {
    let mut t = EpisodeTracker::default();
    assert_eq!(t.rolling_mean(), None);
    t.scores = (0..150).map(|i| i as f64).collect();
    assert_eq!(t.rolling_mean(), Some(99.5));
    let sd = (100.0f64 * 101.0 / 12.0).sqrt();
    assert!((t.rolling_stderr().unwrap() - sd / 10.0).abs() < 1e-12);
}

#[test]
fn r_squared_analytic_cases() {
    let mut rng = Rng::new(1);
    let x: Vec<f64> = (0..300).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    assert!((r_squared(&x, &x, 3).unwrap() - 1.0).abs() < 1e-12);
    let mut means = [0.0; 3];
    for row in x.chunks(3) {
        for j in 0..3 {
            means[j] += row[j] / 100.0;
        }
    }
    let mean_pred: Vec<f64> = (0..300).map(|i| means[i % 3]).collect();
    assert!(r_squared(&mean_pred, &x, 3).unwrap().abs() < 1e-12);
    assert_eq!(r_squared(&[0.2; 6], &[0.5; 6], 2), None);
}

#[test]
fn latent_report_bins_every_sample() {
    let mut cfg = config();
    cfg.num_envs = 3;
    let spec = catch_spec();
    let envs = (0..3).map(|_| spec.build().unwrap()).collect();
    let mut envs = VecEnv::new(envs, 5).unwrap();
    let agent = Agent::<f64>::new(cfg, 3, 5).unwrap();
    let samples = collect_latents(&agent, &mut envs, 40, &mut Rng::new(6), false).unwrap();
    let report = samples.report();
    let n = samples.latents.len();
    assert_eq!(report.samples * report.dim, n);
    assert_eq!(report.dim, 32);
    assert_eq!(report.bins.len(), HIST_BINS + 1);
    for h in [&report.latent_hist, &report.prediction_hist, &report.error_hist] {
        assert_eq!(h.iter().sum::<usize>(), n);
    }
    assert_eq!(report.reference_r_squared, REFERENCE_R2);
    assert!(report.r_squared.is_some());

    let values: Vec<f64> = (0..1000).map(|i| (i as f64 / 250.0) - 2.0).collect();
    assert_eq!(histogram(&values, 7, -1.0, 1.0).iter().sum::<usize>(), 1000);
}
