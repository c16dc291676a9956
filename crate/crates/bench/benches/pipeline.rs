use criterion::{black_box, criterion_group, criterion_main, Criterion};

use hbiuq::gp::GpFitConfig;
use hbiuq::sampler::{nuts_sample, NutsConfig};
use hbiuq::surrogate::{train_gp_pca, SurrogateSettings};
use hbiuq::synthsim::{case_spec, TransientKind};
use hbiuq::{MlpModel, PcaModel, Simulator, SyntheticSimulator};
use hbiuq_bench::{training_set, StdNormal};

fn simulate(c: &mut Criterion) {
    let spec = case_spec("B", TransientKind::PowerIncrease).unwrap();
    c.bench_function("simulate_flat", |b| {
        b.iter(|| SyntheticSimulator.simulate_flat(black_box(&[1.0, 1.0, 1.0, 1.0]), &spec).unwrap())
    });
}

fn pca(c: &mut Criterion) {
    let data = training_set(200, 1).unwrap();
    c.bench_function("pca_fit_200x120", |b| b.iter(|| PcaModel::fit_samples(black_box(&data.outputs)).unwrap()));
}

fn gp_pca(c: &mut Criterion) {
    let data = training_set(100, 2).unwrap();
    let mut g = c.benchmark_group("slow");
    g.sample_size(10);
    g.bench_function("gp_pca_fit_100", |b| b.iter(|| train_gp_pca(&data, 0.999, &GpFitConfig::default()).unwrap()));
    g.finish();
}

fn mlp(c: &mut Criterion) {
    let train = training_set(200, 3).unwrap();
    let valid = training_set(40, 4).unwrap();
    let model = MlpModel::new(&[4, 32, 32, 120], 5).unwrap();
    let mut cfg = SurrogateSettings::default().mlp;
    cfg.max_epochs = 10;
    cfg.early_stop_patience = 10;
    let mut g = c.benchmark_group("slow");
    g.sample_size(10);
    g.bench_function("mlp_train_10_epochs", |b| b.iter(|| model.train(&train, &valid, &cfg).unwrap()));
    g.finish();
}

fn nuts(c: &mut Criterion) {
    let target = StdNormal { dim: 4 };
    let cfg = NutsConfig { chains: 1, warmup: 200, draws: 200, seed: 6, ..NutsConfig::default() };
    c.bench_function("nuts_std_normal_4d", |b| b.iter(|| nuts_sample(&target, &cfg).unwrap()));
}

criterion_group!(benches, simulate, pca, gp_pca, mlp, nuts);
criterion_main!(benches);
