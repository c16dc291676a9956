use std::sync::Arc;

use hbiuq::calib::{build_single_level_target, validate_posterior, PriorSpec, SurrogateForward, ThetaSource};
use hbiuq::covest::{estimate_cov, propagate_bc_uncertainty, regularize_cov};
use hbiuq::sampler::{diagnose, read_chains_csv, sample, write_chains_csv, NutsConfig};
use hbiuq::surrogate::{build_surrogate, holdout_mae, simulate_design, Backend, SurrogateSettings};
use hbiuq::synthsim::{case_spec, synthesize_observations, BcUncertainty, NoiseModel, TransientKind};
use hbiuq::{doe, CovMode, Split, Surrogate, SyntheticSimulator};

fn small_settings() -> SurrogateSettings {
    let mut s = SurrogateSettings::default();
    s.mlp.max_epochs = 300;
    s.validation_size = 20;
    s
}

#[test]
fn surrogate_survives_a_json_round_trip() {
    let spec = case_spec("C", TransientKind::PowerIncrease).unwrap();
    for backend in [Backend::Mlp, Backend::GpPca] {
        let s = build_surrogate(&SyntheticSimulator, &spec, backend, 40, &small_settings(), 3).unwrap();
        let back: Surrogate = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        let theta = [1.1, 2.0, 0.7, 3.3];
        assert_eq!(s.predict(&theta).unwrap(), back.predict(&theta).unwrap(), "{}", backend.name());
    }
}

#[test]
fn calibration_workflow_recovers_the_generating_case() {
    let sim = SyntheticSimulator;
    let spec = case_spec("A", TransientKind::PowerIncrease).unwrap();
    let theta_star = [1.2, 1.0, 1.5, 1.0];

    let surrogate = build_surrogate(&sim, &spec, Backend::Mlp, 150, &small_settings(), 11).unwrap();
    let test = simulate_design(&sim, &spec, &doe::uniform_sample(30, &[(0.0, 5.0); 4], 12).unwrap().points).unwrap();
    assert!(holdout_mae(&surrogate, &test).unwrap() < 0.02);

    let ensemble = propagate_bc_uncertainty(&sim, &spec, &BcUncertainty::pointwise_all(0.01, 0.9), 50, &[1.0; 4], 13).unwrap();
    let noise = NoiseModel::Iid { sd: 0.01 };
    let sigma = estimate_cov(&ensemble) + noise.covariance(3, spec.n_times);
    let cov = regularize_cov(&sigma, ensemble.default_nugget()).unwrap();
    let obs = synthesize_observations(&sim, &spec, &theta_star, noise, 14).unwrap().with_covariance(cov).unwrap();

    let surrogate = Arc::new(surrogate);
    let priors = PriorSpec::uniform(4, 0.0, 5.0).unwrap();
    let target = build_single_level_target(surrogate.clone(), &obs, CovMode::Full, &priors).unwrap();
    let cfg = NutsConfig { chains: 2, warmup: 300, draws: 300, seed: 15, ..NutsConfig::default() };
    let chains = sample(&target, &cfg).unwrap();

    let mut buf = Vec::new();
    write_chains_csv(&chains, &mut buf).unwrap();
    let back = read_chains_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), chains.len());
    assert_eq!(back[0].draws, chains[0].draws);

    let d = diagnose(&chains).unwrap();
    for (name, truth) in [("P1", theta_star[0]), ("P3", theta_star[2])] {
        let p = d.parameter(name).unwrap();
        assert!(p.q025 <= truth && truth <= p.q975, "{name} [{}, {}]", p.q025, p.q975);
    }

    let draws: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.draws.iter().step_by(10).cloned()).collect();
    let forward = SurrogateForward { surrogates: [(spec.id.clone(), surrogate)].into_iter().collect() };
    let report = validate_posterior(
        &ThetaSource::Draws { draws },
        Some(&ThetaSource::Point { theta: vec![3.0; 4] }),
        &[(obs, Split::Train)],
        &forward,
        50,
        16,
    )
    .unwrap();
    let train = report.split(Split::Train).unwrap();
    assert!(train.posterior.mae < train.prior.unwrap().mae);
    assert!(report.split(Split::Test).is_none());
}
