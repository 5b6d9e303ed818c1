//! The experiment suite: method comparisons, ablations, storage accounting
//! and the spectral diagnostic, written as one results directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! results.csv        experiment,method,ipc,seed,auroc,auprc,wall_ms
//! summary.json       per-cell mean/std, failures, storage and spectra
//! storage.json
//! spectrum_{sgd,bezier,linear}.csv
//! cells/<experiment>__<method>__ipc<ipc>/{trace.csv,synthetic.btmd}
//! ```
//!
//! A failing cell is recorded in `summary.json` and the rest still run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_synthetic, generate_benchmark, summarize, Dataset, MetricReport, MetricSummary, SplitDataset};
use crate::condense::{condense, random_subset, CondenseConfig, CondenseMethod, CondenseSupervision, InitMode};
use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::geometry::{spectral_comparison, SpectralComparison};
use crate::model::Mlp;
use crate::surrogate::{fit_surrogates, BezierSurrogate};
use crate::teacher::{storage_report, train_teachers, StorageReport, Trajectory};

/// Method label of the random-subset baseline.
pub const RANDOM_METHOD: &str = "random";

/// Data, teachers and fitted surrogates shared by every cell.
#[derive(Debug, Clone)]
pub struct SuiteInputs {
    pub split: SplitDataset,
    pub teachers: Vec<Trajectory>,
    pub surrogates: Vec<BezierSurrogate>,
}

/// Generates the benchmark, trains the teachers and fits their surrogates.
pub fn prepare_inputs(cfg: &RunConfig) -> Result<SuiteInputs> {
    let split = generate_benchmark(&cfg.benchmark())?;
    let teachers = train_teachers(
        &split.train,
        &cfg.teacher_config(cfg.stage_seed(Stage::Teacher)),
        &cfg.model_config(),
        cfg.teacher.count,
    )?;
    let mlp = Mlp::new(cfg.student_model_config())?;
    let surrogates = fit_surrogates(
        &teachers,
        &split.train,
        &mlp,
        cfg.surrogate.batch_size,
        &cfg.control_point_options(cfg.stage_seed(Stage::Surrogate)),
    )?
    .into_iter()
    .map(|f| f.surrogate)
    .collect();
    Ok(SuiteInputs {
        split,
        teachers,
        surrogates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub experiment: String,
    /// A condensation method name or [`RANDOM_METHOD`].
    pub method: String,
    pub ipc: usize,
    pub condense: CondenseConfig,
}

impl CellSpec {
    pub fn key(&self) -> String {
        format!("{}__{}__ipc{}", self.experiment, self.method, self.ipc)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub spec: CellSpec,
    pub reports: Vec<MetricReport>,
    /// Condensation plus evaluation time of the whole cell.
    pub wall_ms: u128,
    pub error: Option<String>,
    pub trace_csv: Option<String>,
    pub synthetic: Option<Dataset>,
}

/// The method grid followed by the inner-step, initialisation and
/// segment-length ablations of BTM.
pub fn suite_cells(cfg: &RunConfig) -> Result<Vec<CellSpec>> {
    let base = cfg.condense_config();
    let s = &cfg.suite;
    let mut cells = Vec::new();
    for method in &s.methods {
        let m = if method == RANDOM_METHOD {
            base.method
        } else {
            method.parse::<CondenseMethod>()?
        };
        for &ipc in &s.ipcs {
            cells.push(CellSpec {
                experiment: "methods".into(),
                method: method.clone(),
                ipc,
                condense: CondenseConfig { method: m, ipc, ..base },
            });
        }
    }
    let btm = CondenseConfig {
        method: CondenseMethod::Btm,
        ipc: s.ablation_ipc,
        ..base
    };
    let abl = |experiment: String, condense: CondenseConfig| CellSpec {
        experiment,
        method: CondenseMethod::Btm.name().into(),
        ipc: s.ablation_ipc,
        condense,
    };
    for &n in &s.inner_steps {
        cells.push(abl(format!("inner-steps-{n}"), CondenseConfig { inner_steps: Some(n), ..btm }));
    }
    for &mode in &s.init_modes {
        let name = match mode {
            InitMode::Real => "real",
            InitMode::RandomGaussian => "random-gaussian",
        };
        cells.push(abl(format!("init-{name}"), CondenseConfig { init_mode: mode, ..btm }));
    }
    for &dt in &s.segment_lengths {
        cells.push(abl(format!("segment-length-{dt}"), CondenseConfig { segment_length: dt, ..btm }));
    }
    for c in &cells {
        c.condense.validate()?;
    }
    Ok(cells)
}

/// Condenses (or draws the random subset) and evaluates one cell.
/// Errors are captured in the result.
pub fn run_cell(inputs: &SuiteInputs, cfg: &RunConfig, spec: &CellSpec) -> CellResult {
    let start = Instant::now();
    let mut trace_csv = None;
    let outcome = (|| -> Result<(Dataset, Vec<MetricReport>)> {
        let split = &inputs.split;
        let model = cfg.student_model_config();
        let synthetic = if spec.method == RANDOM_METHOD {
            random_subset(&split.train, spec.ipc, spec.condense.seed)?
        } else {
            let supervision = match spec.condense.method {
                CondenseMethod::Mtt => CondenseSupervision::Trajectories(&inputs.teachers),
                CondenseMethod::Btm | CondenseMethod::Linear => {
                    CondenseSupervision::Surrogates(&inputs.surrogates)
                }
            };
            match condense(&split.train, &split.val, supervision, &model, &spec.condense) {
                Ok(out) => {
                    trace_csv = Some(out.trace.to_csv());
                    out.synthetic.to_dataset()
                }
                Err(e) => {
                    trace_csv = Some(e.trace.to_csv());
                    return Err(e.error);
                }
            }
        };
        let reports = evaluate_synthetic(&synthetic, &split.test, &model, &cfg.eval_config(), &cfg.eval_seeds())?;
        Ok((synthetic, reports))
    })();
    let wall_ms = start.elapsed().as_millis();
    match outcome {
        Ok((synthetic, reports)) => CellResult {
            spec: spec.clone(),
            reports,
            wall_ms,
            error: None,
            trace_csv,
            synthetic: Some(synthetic),
        },
        Err(e) => CellResult {
            spec: spec.clone(),
            reports: Vec::new(),
            wall_ms,
            error: Some(e.to_string()),
            trace_csv,
            synthetic: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub experiment: String,
    pub method: String,
    pub ipc: usize,
    pub wall_ms: u128,
    pub metrics: Option<MetricSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub failed_cells: usize,
    pub storage: StorageReport,
    pub spectral: Option<SpectralComparison>,
    pub spectral_error: Option<String>,
}

fn results_csv(results: &[CellResult]) -> String {
    let mut out = String::from("experiment,method,ipc,seed,auroc,auprc,wall_ms\n");
    for c in results {
        for r in &c.reports {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.spec.experiment, c.spec.method, c.spec.ipc, r.seed, r.auroc, r.auprc, c.wall_ms
            );
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("json encoding: {e}")))
}

/// Runs every cell of `cfg.suite` and writes the results under `out_dir`.
/// Returns an error only when the shared inputs cannot be built or outputs
/// cannot be written.
pub fn run_experiment_suite(cfg: &RunConfig, out_dir: &Path) -> Result<SuiteSummary> {
    let cells = suite_cells(cfg)?;
    let inputs = prepare_inputs(cfg)?;
    fs::create_dir_all(out_dir.join("cells")).map_err(|e| Error::io(out_dir, e))?;

    let results: Vec<CellResult> = cells.par_iter().map(|c| run_cell(&inputs, cfg, c)).collect();
    for r in &results {
        let dir = out_dir.join("cells").join(r.spec.key());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Some(t) = &r.trace_csv {
            write(&dir.join("trace.csv"), t)?;
        }
        if let Some(s) = &r.synthetic {
            s.save(&dir.join("synthetic.btmd"))?;
        }
    }
    write(&out_dir.join("results.csv"), &results_csv(&results))?;

    let p = cfg.student_model_config().param_count();
    let storage = storage_report(inputs.teachers.len(), cfg.teacher.epochs, p);
    write(&out_dir.join("storage.json"), &json(&storage)?)?;

    let (spectral, spectral_error) = match spectral_comparison(
        &inputs.teachers,
        &inputs.surrogates,
        cfg.suite.spectral_segments,
        cfg.stage_seed(Stage::Spectrum),
    ) {
        Ok(s) => {
            write(&out_dir.join("spectrum_sgd.csv"), &s.sgd.to_csv())?;
            write(&out_dir.join("spectrum_bezier.csv"), &s.bezier.to_csv())?;
            write(&out_dir.join("spectrum_linear.csv"), &s.linear.to_csv())?;
            (Some(s), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };

    let summary = SuiteSummary {
        seed: cfg.seed,
        failed_cells: results.iter().filter(|r| r.error.is_some()).count(),
        cells: results
            .iter()
            .map(|r| CellSummary {
                experiment: r.spec.experiment.clone(),
                method: r.spec.method.clone(),
                ipc: r.spec.ipc,
                wall_ms: r.wall_ms,
                metrics: r.error.is_none().then(|| summarize(&r.reports)),
                error: r.error.clone(),
            })
            .collect(),
        storage,
        spectral,
        spectral_error,
    };
    write(&out_dir.join("summary.json"), &json(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let text = r#"
seed = 11
[data]
n = 400
d = 4
prevalence = 0.2
[model]
hidden_units = 4
[teacher]
epochs = 8
batch_size = 64
count = 2
[surrogate]
max_iters = 5
[condense]
max_iters = 3
eval_every = 0
selection_seeds = 1
expert_epochs = 2
[condense.selection_eval]
lr = 0.05
momentum = 0.9
epochs = 3
batch_size = 32
[eval]
epochs = 3
seeds = 2
[suite]
ipcs = [3]
inner_steps = [2]
init_modes = ["real"]
segment_lengths = [0.3]
spectral_segments = 2
"#;
        RunConfig::parse(text, Path::new(".")).unwrap()
    }

    #[test]
    fn cell_grid_cardinality() {
        let mut cfg = tiny();
        cfg.suite.ipcs = vec![10, 50];
        cfg.suite.inner_steps = vec![10, 20, 30, 40];
        cfg.suite.init_modes = vec![InitMode::Real, InitMode::RandomGaussian];
        cfg.suite.segment_lengths = vec![0.1, 0.2, 0.3, 0.4];
        let cells = suite_cells(&cfg).unwrap();
        assert_eq!(cells.iter().filter(|c| c.experiment == "methods").count(), 8);
        assert_eq!(cells.len(), 8 + 4 + 2 + 4);
        let mut keys: Vec<String> = cells.iter().map(CellSpec::key).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), cells.len());
    }

    #[test]
    fn suite_writes_results_and_isolates_failures() {
        let mut cfg = tiny();
        // an 8-epoch teacher cannot host a 9-epoch expert segment
        cfg.condense.expert_epochs = 9;
        let dir = std::env::temp_dir().join(format!("btm-suite-{}", std::process::id()));
        let summary = run_experiment_suite(&cfg, &dir).unwrap();
        let mtt = summary.cells.iter().find(|c| c.method == "mtt").unwrap();
        assert!(mtt.error.is_some());
        assert_eq!(summary.failed_cells, 1);
        let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
        let ok_cells = summary.cells.len() - 1;
        assert_eq!(csv.lines().count(), 1 + 2 * ok_cells);
        assert!(dir.join("summary.json").exists());
        assert!(dir.join("spectrum_bezier.csv").exists());
        assert_eq!(summary.storage.epochs, 8);
        fs::remove_dir_all(&dir).unwrap();
    }
}
