use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rtlasso::selection::default_robust_penalties;
use rtlasso::solver::lambda_max;
use rtlasso::{lasso_fit, robust_lasso_fit, LassoProblem, RobustLassoProblem, SolverSettings};
use rtlasso_bench::standardized_target;

fn lasso(c: &mut Criterion) {
    let data = standardized_target(0.1, 7);
    let (x, y) = (data.design().view(), data.response().view());
    let top = lambda_max(x, y, None);
    let settings = SolverSettings::default();
    let mut group = c.benchmark_group("lasso_fit");
    for frac in [0.5, 0.1, 0.02] {
        group.bench_with_input(BenchmarkId::from_parameter(frac), &frac, |b, &frac| {
            b.iter(|| lasso_fit(&LassoProblem::new(x, y, frac * top), &settings).unwrap());
        });
    }
    group.finish();
}

fn robust(c: &mut Criterion) {
    let mut group = c.benchmark_group("robust_lasso_fit");
    let settings = SolverSettings::default();
    for r in [0.1, 0.3, 0.5] {
        let data = standardized_target(r, 7);
        let (lb, le) = default_robust_penalties(0.1, data.n_obs(), data.n_features());
        group.bench_with_input(BenchmarkId::from_parameter(r), &data, |b, data| {
            b.iter(|| {
                robust_lasso_fit(
                    &RobustLassoProblem::new(data.design().view(), data.response().view(), lb, le),
                    &settings,
                )
                .unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, lasso, robust);
criterion_main!(benches);
