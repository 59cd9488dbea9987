use d2d_core::dynamics::{anonymize, simulate_pooled, Behavior};
use d2d_core::inference::{hdi, summarize};
use d2d_core::model::{Dataset, ModelSpec, Observation, Posterior, Regime};
use d2d_core::network::CostSequence;
use d2d_core::sampler::{nuts_sample, Diagnostics, SamplerConfig};

fn costs(days: usize) -> CostSequence {
    let rows = (0..days)
        .map(|t| {
            vec![
                10.0 + (t % 3) as f64,
                11.0 + 0.5 * (t % 4) as f64,
                12.0 - 0.4 * (t % 5) as f64,
            ]
        })
        .collect();
    CostSequence::new(1, rows).unwrap()
}

fn sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 400,
        draws: 600,
        seed,
        ..SamplerConfig::default()
    }
}

fn fit(obs: Observation, costs: &CostSequence, seed: u64) -> d2d_core::sampler::PosteriorDraws {
    let regime = Regime::from_parts(false, matches!(obs, Observation::Counts(_)));
    let post = Posterior::new(
        Dataset::single(costs.clone(), obs, vec![0.0; 3]),
        ModelSpec::new(regime),
    )
    .unwrap();
    nuts_sample(&post, &sampler(seed)).unwrap()
}

#[test]
fn pooled_fit_covers_truth_and_converges() {
    let c = costs(40);
    let truth = Behavior::new(0.35, 0.6, 0.12).unwrap();
    let traj = simulate_pooled(&truth, &[0.0; 3], &c, 15, 21).unwrap();
    let draws = fit(Observation::Trajectory(traj), &c, 5);
    let diag = Diagnostics::compute(&draws);
    assert!(diag.max_rhat().unwrap() < 1.05);
    for (name, value) in [("eta", truth.eta), ("theta", truth.theta), ("rho", truth.rho)] {
        let band = hdi(&draws.column_by_name(name).unwrap(), 0.99).unwrap();
        assert!(
            band.lower <= value && value <= band.upper,
            "{name}: {value} outside {band:?}"
        );
    }
}

#[test]
fn counts_and_trajectories_give_the_same_pooled_posterior() {
    let c = costs(30);
    let truth = Behavior::new(0.3, 0.5, 0.1).unwrap();
    let traj = simulate_pooled(&truth, &[0.0; 3], &c, 12, 3).unwrap();
    let counts = anonymize(&traj);
    let a = summarize(&fit(Observation::Trajectory(traj), &c, 1), 0.9).unwrap();
    let b = summarize(&fit(Observation::Counts(counts), &c, 2), 0.9).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        let width = x.hdi_upper - x.hdi_lower;
        assert!(
            (x.mean - y.mean).abs() < 0.15 * width,
            "{}: {} vs {}",
            x.name,
            x.mean,
            y.mean
        );
        let ratio = width / (y.hdi_upper - y.hdi_lower);
        assert!((0.8..1.25).contains(&ratio), "{}: width ratio {ratio}", x.name);
    }
}

#[test]
fn same_seed_same_draws() {
    let c = costs(15);
    let truth = Behavior::new(0.3, 0.5, 0.1).unwrap();
    let traj = simulate_pooled(&truth, &[0.0; 3], &c, 5, 8).unwrap();
    let cfg = SamplerConfig {
        chains: 2,
        warmup: 100,
        draws: 100,
        seed: 4,
        ..SamplerConfig::default()
    };
    let post = Posterior::new(
        Dataset::single(c.clone(), Observation::Trajectory(traj), vec![0.0; 3]),
        ModelSpec::new(Regime::from_parts(false, false)),
    )
    .unwrap();
    assert_eq!(nuts_sample(&post, &cfg).unwrap(), nuts_sample(&post, &cfg).unwrap());
}
