use criterion::{criterion_group, criterion_main, Criterion};

use rtlasso::edsl::AnchorPolicy;
use rtlasso::selection::ShiftPenalties;
use rtlasso::{
    edsl_aggregate, estimate_shifts, run_rtl, EdslConfig, PipelineConfig, SolverSettings,
};
use rtlasso_bench::{instance, standardized_sources, standardized_target};

fn aggregation(c: &mut Criterion) {
    let sources = standardized_sources(3);
    let selected: Vec<usize> = (0..sources.len()).collect();
    let config = EdslConfig {
        noise_scale: 0.1,
        anchor_policy: AnchorPolicy::First,
        ..Default::default()
    };
    let settings = SolverSettings::default();
    c.bench_function("edsl_aggregate/5_sources", |b| {
        b.iter(|| edsl_aggregate(&sources, &selected, &config, &settings, None).unwrap());
    });
}

fn shifts(c: &mut Criterion) {
    let target = standardized_target(0.1, 3);
    let sources = standardized_sources(3);
    let record = rtlasso::StandardizationRecord::identity(target.n_features());
    let settings = SolverSettings::default();
    c.bench_function("estimate_shifts/5_sources", |b| {
        b.iter(|| {
            estimate_shifts(
                &target,
                &sources,
                0.1,
                &ShiftPenalties::default(),
                &record,
                &settings,
            )
            .unwrap()
        });
    });
}

fn full_run(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_rtl");
    group.sample_size(10);
    for r in [0.1, 0.5] {
        let inst = instance(r, 3);
        let config = PipelineConfig::default();
        group.bench_function(format!("r={r}"), |b| {
            b.iter(|| run_rtl(&inst.target, &inst.sources, &config).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, aggregation, shifts, full_run);
criterion_main!(benches);
