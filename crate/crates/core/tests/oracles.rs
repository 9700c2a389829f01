use nalgebra::DMatrix;
use rand::SeedableRng;
use unifilt::augenkf::{self, AugmentedEnsemble, EnkfOptions};
use unifilt::diffusion::{reverse_sde_sample, Damping, LikelihoodTerm, NoiseSchedule, ScoreModel};
use unifilt::direct_filter::{perturb, resample, weigh, ExplorationNoise, ParameterCloud, ParameterLikelihood};
use unifilt::ensf::{analysis_step, predict_ensemble, AnalysisConfig};
use unifilt::models::linear_gaussian::kalman_filter;
use unifilt::models::LinearGaussianConfig;
use unifilt::rng::fill_standard_normal;
use unifilt::united::{self, UnitedFilterConfig};
use unifilt::{SeedTree, SimRng, StateEnsemble};

fn scalar_ensemble(mean: f64, var: f64, count: usize, rng: &mut SimRng) -> StateEnsemble {
    let mut z = vec![0.0; count];
    fill_standard_normal(rng, &mut z);
    let pts: Vec<Vec<f64>> = z.iter().map(|v| vec![mean + var.sqrt() * v]).collect();
    StateEnsemble::from_samples(&pts).unwrap()
}

/// The damped posterior score is not the exact Bayesian update: even with the
/// analytic prior score the sampler lands near mean 0.352 and variance 0.019,
/// so this comparison with the Kalman posterior fails.
#[test]
#[ignore = "the damped posterior score is biased against the exact Kalman update"]
fn ensf_single_step_matches_kalman() {
    let cfg = LinearGaussianConfig::default();
    let obs = cfg.observation().unwrap();
    let y = [0.45];
    let (kal_mean, kal_var) = cfg.kalman(&y)[0];
    let j = 2000;
    let analysis = AnalysisConfig::default();
    for seed in 0..3 {
        let mut rng = SimRng::seed_from_u64(seed);
        let prior = scalar_ensemble(cfg.init_mean, cfg.init_var, j, &mut rng);
        let predicted = predict_ensemble(&prior, &[cfg.a], &cfg.dynamics(), &mut rng).unwrap();
        let (post, mean) = analysis_step(&predicted, &y, &obs, &analysis, &mut rng).unwrap();
        let var = post.variance()[0];
        let se = (kal_var / j as f64).sqrt();
        assert!((mean[0] - kal_mean).abs() < 3.0 * se, "seed {seed}: mean {} vs {kal_mean}", mean[0]);
        assert!((var / kal_var - 1.0).abs() < 0.2, "seed {seed}: variance {var} vs {kal_var}");
    }
}

struct GaussianPrior {
    mean: f64,
    var: f64,
    y: f64,
    obs_var: f64,
}

impl LikelihoodTerm for GaussianPrior {
    fn dim(&self) -> usize {
        1
    }

    fn gradient(&self, z: &[f64], out: &mut [f64]) {
        out[0] = (self.y - z[0]) / self.obs_var;
    }

    fn curvature(&self, _z: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / self.obs_var;
    }
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        1
    }

    fn prior_scores(&self, z: &DMatrix<f64>, t: f64, _rng: &mut SimRng) -> unifilt::Result<DMatrix<f64>> {
        let (a, b) = (NoiseSchedule::alpha(t), NoiseSchedule::beta(t));
        let v = a * a * self.var + b * b;
        Ok(z.map(|x| -(x - a * self.mean) / v))
    }

    fn likelihood(&self) -> Option<(&dyn LikelihoodTerm, Damping)> {
        Some((self, Damping::linear()))
    }
}

#[test]
fn ensf_matches_the_exact_score_sampler() {
    let cfg = LinearGaussianConfig::default();
    let obs = cfg.observation().unwrap();
    let y = [0.45];
    let forecast_var = cfg.a * cfg.a * cfg.init_var + cfg.model_var;
    let exact = GaussianPrior {
        mean: cfg.a * cfg.init_mean,
        var: forecast_var,
        y: y[0],
        obs_var: cfg.obs_var,
    };
    let schedule = NoiseSchedule::default();
    let reference = reverse_sde_sample(&exact, &schedule, 200_000, &mut SimRng::seed_from_u64(1)).unwrap();
    let (ref_mean, ref_var) = (reference.mean()[0], reference.variance()[0]);
    let j = 2000;
    for seed in 0..3 {
        let mut rng = SimRng::seed_from_u64(seed);
        let prior = scalar_ensemble(cfg.init_mean, cfg.init_var, j, &mut rng);
        let predicted = predict_ensemble(&prior, &[cfg.a], &cfg.dynamics(), &mut rng).unwrap();
        let (post, mean) = analysis_step(&predicted, &y, &obs, &AnalysisConfig::default(), &mut rng).unwrap();
        // the forecast ensemble's own sampling error enters through its mean and spread
        let se = (forecast_var / j as f64).sqrt() + (ref_var / j as f64).sqrt();
        assert!((mean[0] - ref_mean).abs() < 3.0 * se, "seed {seed}: mean {} vs {ref_mean}", mean[0]);
        let var = post.variance()[0];
        assert!((var / ref_var - 1.0).abs() < 0.15, "seed {seed}: variance {var} vs {ref_var}");
    }
}

#[test]
fn augenkf_single_step_matches_kalman() {
    let cfg = LinearGaussianConfig::default();
    let obs = cfg.observation().unwrap();
    let y = [0.45];
    let (kal_mean, kal_var) = cfg.kalman(&y)[0];
    let n = 100_000;
    let mut rng = SimRng::seed_from_u64(4);
    let states = scalar_ensemble(cfg.init_mean, cfg.init_var, n, &mut rng);
    let cloud = ParameterCloud::point(&[cfg.a], n).unwrap();
    let ens = AugmentedEnsemble::stack(&states, &cloud).unwrap();
    let f = augenkf::forecast(&ens, &cfg.dynamics(), &ExplorationNoise::zero(1), &mut rng).unwrap();
    let out = augenkf::analysis(&f, &y, &obs, &EnkfOptions::default(), &mut rng).unwrap();
    let block = out.ensemble.state_block();
    let mean = block.mean();
    let var = block.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - kal_mean).abs() < 0.02 * kal_mean.abs(), "mean {mean} vs {kal_mean}");
    assert!((var / kal_var - 1.0).abs() < 0.02, "variance {var} vs {kal_var}");
    assert!(out.ensemble.param_block().iter().all(|&p| p == cfg.a));
}

/// `X' = gamma X + sigma xi` observed exactly; the parameter is `gamma`.
fn gamma_x_truth(gamma: f64, sigma: f64, steps: usize, seed: u64) -> Vec<f64> {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut xi = vec![0.0; steps];
    fill_standard_normal(&mut rng, &mut xi);
    let mut x = vec![1.0];
    for e in xi {
        let last = *x.last().unwrap();
        x.push(gamma * last + sigma * e);
    }
    x
}

#[test]
fn direct_filter_identifies_the_growth_rate() {
    let model = LinearGaussianConfig {
        model_var: 0.01,
        ..Default::default()
    }
    .dynamics();
    let likelihood = ParameterLikelihood::from_model(&model).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let truth = gamma_x_truth(0.9, 0.1, 50, seed);
        let tree = SeedTree::new(100 + seed);
        let mut cloud = ParameterCloud::gaussian(&[0.5], &[0.3], 400, &mut tree.stream("init", &[])).unwrap();
        let noise = ExplorationNoise::diagonal(&[0.05], 0.95).unwrap();
        for n in 1..=50 {
            let n64 = n as u64;
            let perturbed = perturb(&cloud, &noise.decayed(n - 1), &mut tree.stream("perturb", &[n64])).unwrap();
            let w = weigh(
                &perturbed,
                &truth[n - 1..n],
                &truth[n..n + 1],
                &model,
                &likelihood,
                &mut tree.stream("weigh", &[n64]),
            )
            .unwrap();
            cloud = resample(&perturbed, &w.values, &mut tree.stream("resample", &[n64])).unwrap();
        }
        let est = cloud.estimate()[0];
        if (est - 0.9).abs() < 0.05 * 0.9 {
            hits += 1;
        }
    }
    assert!(hits >= 8, "{hits} of 10 seeds within 5%");
}

/// Full United Filter on the same scalar problem with the state observed
/// through noise; about two minutes per seed on one core.
#[test]
#[ignore = "long-running; run with --ignored"]
fn united_filter_identifies_the_growth_rate() {
    let cfg = LinearGaussianConfig {
        model_var: 0.01,
        obs_var: 0.01,
        init_mean: 1.0,
        init_var: 0.0,
        ..Default::default()
    };
    let model = cfg.dynamics();
    let obs = std::sync::Arc::new(cfg.observation().unwrap());
    let mut hits = 0;
    for seed in 0..10 {
        let truth = unifilt::models::simulate(&model, &[0.9], vec![1.0], 50, &SeedTree::new(seed), true, |_| {
            Ok(obs.clone() as std::sync::Arc<dyn unifilt::Observation>)
        })
        .unwrap();
        let mut rng = SimRng::seed_from_u64(1000 + seed);
        let ens = scalar_ensemble(1.0, 0.01, 1000, &mut rng);
        let cloud = ParameterCloud::gaussian(&[0.5], &[0.3], 400, &mut rng).unwrap();
        let ucfg = UnitedFilterConfig::new(1000, ExplorationNoise::diagonal(&[0.05], 0.95).unwrap(), seed);
        let rec = united::run(&model, &truth.measurements, ens, cloud, &ucfg).unwrap();
        let est = rec.parameters().last().unwrap()[0];
        if (est - 0.9).abs() < 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 8, "{hits} of 10 seeds within 0.05");
}

#[test]
fn kalman_reference_is_exact_for_a_two_step_hand_case() {
    // a = 1, q = 0, r = 1, p0 = 1: p1 = 1/2, p2 = 1/3 and the mean is the running average
    let out = kalman_filter(1.0, 0.0, 1.0, 0.0, 1.0, &[3.0, 6.0]);
    assert!((out[0].0 - 1.5).abs() < 1e-15 && (out[0].1 - 0.5).abs() < 1e-15);
    assert!((out[1].0 - 3.0).abs() < 1e-15 && (out[1].1 - 1.0 / 3.0).abs() < 1e-15);
}
