//! Fixtures shared by the benchmarks.

use rtlasso::simulation::{generate, SimDesign, SimInstance};
use rtlasso::{prepare_panel, LabeledDataset, PipelineConfig};

/// Default-sized instance at corruption fraction `r`.
pub fn instance(r: f64, seed: u64) -> SimInstance {
    generate(&SimDesign {
        corruption_fraction: r,
        seed,
        ..Default::default()
    })
    .expect("default design is valid")
}

/// Target of `instance(r, seed)` with columns standardized the way the
/// pipeline does it.
pub fn standardized_target(r: f64, seed: u64) -> LabeledDataset {
    let inst = instance(r, seed);
    prepare_panel(&inst.target, &[], &PipelineConfig::default())
        .expect("valid panel")
        .target
}

/// Standardized sources of `instance(0.1, seed)`.
pub fn standardized_sources(seed: u64) -> Vec<LabeledDataset> {
    let inst = instance(0.1, seed);
    prepare_panel(&inst.target, &inst.sources, &PipelineConfig::default())
        .expect("valid panel")
        .sources
}
