//! `bench`: a corruption grid crossed with methods, one CSV row per cell.
//!
//! Progress lives in `bench_manifest.json` next to the CSV and is rewritten
//! after every cell. A rerun with the same spec skips completed cells.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rtlasso::simulation::{
    sweep_cell, thread_pool, BenchmarkCell, Method, SimDesign, SweepOptions, CSV_HEADER,
};
use rtlasso::PipelineConfig;

use crate::error::CliError;
use crate::{log, read_config, write_text, Common};

pub const MANIFEST: &str = "bench_manifest.json";
pub const TABLE: &str = "bench.csv";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Base design; its corruption fraction is replaced by each grid value.
    pub design: SimDesign,
    pub corruption_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub pipeline: PipelineConfig,
    pub sign_gamma: Option<f64>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            design: SimDesign::default(),
            corruption_grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            methods: vec![Method::Lasso, Method::Rlasso, Method::Rtl],
            reps: 50,
            pipeline: PipelineConfig::default(),
            sign_gamma: None,
        }
    }
}

impl BenchSpec {
    fn designs(&self) -> Vec<SimDesign> {
        self.corruption_grid
            .iter()
            .map(|&r| SimDesign {
                corruption_fraction: r,
                ..self.design.clone()
            })
            .collect()
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.reps == 0 {
            return Err(CliError::Config("reps must be >= 1".into()));
        }
        if self.corruption_grid.is_empty() || self.methods.is_empty() {
            return Err(CliError::Config(
                "corruption_grid and methods must be nonempty".into(),
            ));
        }
        for d in self.designs() {
            d.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.pipeline.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub design_index: usize,
    pub corruption_fraction: f64,
    pub method: Method,
    pub completed: bool,
    pub row: Option<String>,
    pub failed_reps: usize,
    /// Distinct failure reasons, at most a handful.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub spec: BenchSpec,
    pub design_seed: u64,
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    fn fresh(spec: &BenchSpec) -> Self {
        let cells = spec
            .designs()
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                spec.methods.iter().map(move |&m| CellRecord {
                    design_index: i,
                    corruption_fraction: d.corruption_fraction,
                    method: m,
                    completed: false,
                    row: None,
                    failed_reps: 0,
                    errors: Vec::new(),
                })
            })
            .collect();
        Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
            design_seed: spec.design.seed,
            cells,
        }
    }

    fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            if let Some(row) = &c.row {
                out.push_str(row);
                out.push('\n');
            }
        }
        out
    }
}

fn save(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).expect("serializable") + "\n";
    let tmp = format!("{MANIFEST}.tmp");
    write_text(dir, &tmp, &text)?;
    let to = dir.join(MANIFEST);
    fs::rename(dir.join(&tmp), &to).map_err(CliError::io(&to))
}

fn load(dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

fn record(cell: &BenchmarkCell) -> CellRecord {
    let mut errors: Vec<String> = Vec::new();
    for e in cell.outcomes.iter().filter_map(|o| o.error.as_ref()) {
        if errors.len() < 5 && !errors.contains(e) {
            errors.push(e.clone());
        }
    }
    CellRecord {
        design_index: cell.key.design_index,
        corruption_fraction: cell.design.corruption_fraction,
        method: cell.key.method,
        completed: true,
        row: Some(cell.csv_row()),
        failed_reps: cell.reps - cell.completed,
        errors,
    }
}

pub fn cmd_bench(common: &Common) -> Result<(), CliError> {
    let mut spec: BenchSpec = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        spec.design.seed = seed;
    }
    if !common.method.is_empty() {
        spec.methods = common
            .method
            .iter()
            .map(|m| m.parse())
            .collect::<Result<_, _>>()
            .map_err(CliError::Config)?;
    }
    spec.validate()?;
    let out = &common.out;

    let mut manifest = match load(out) {
        Some(m) if m.spec == spec && m.manifest_version == MANIFEST_VERSION => {
            let done = m.cells.iter().filter(|c| c.completed).count();
            log(
                common,
                format!(
                    "resuming: {done} of {} cells already complete",
                    m.cells.len()
                ),
            );
            m
        }
        _ => Manifest::fresh(&spec),
    };
    save(out, &manifest)?;

    let designs = spec.designs();
    let options = SweepOptions {
        reps: spec.reps,
        jobs: common.jobs,
        pipeline: spec.pipeline.clone(),
        sign_gamma: spec.sign_gamma,
    };
    let pool = thread_pool(common.jobs).map_err(|e| CliError::Config(e.to_string()))?;
    for k in 0..manifest.cells.len() {
        if manifest.cells[k].completed {
            continue;
        }
        let (i, method) = (manifest.cells[k].design_index, manifest.cells[k].method);
        let cell = pool.install(|| sweep_cell(i, &designs[i], method, &options));
        log(
            common,
            format!(
                "r={} {}: mean SER {:.2} dB over {}/{} reps",
                designs[i].corruption_fraction, method, cell.mean_ser_db, cell.completed, cell.reps
            ),
        );
        manifest.cells[k] = record(&cell);
        save(out, &manifest)?;
    }
    let path = write_text(out, TABLE, &manifest.csv())?;
    log(common, format!("wrote {}", path.display()));
    Ok(())
}
