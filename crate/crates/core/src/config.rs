//! The run configuration: one TOML file drives every pipeline stage.
//!
//! The top-level `seed` is mandatory. Each stage draws its own seed from it
//! with [`RunConfig::stage_seed`], so stages can be rerun independently.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::condense::{CondenseConfig, CondenseMethod, InitMode};
use crate::error::{Error, Result};
use crate::eval::{BenchmarkSpec, EvalConfig};
use crate::model::MlpConfig;
use crate::rng::derive_seed;
use crate::surrogate::{ControlPointOptions, PathQuadrature};
use crate::teacher::TeacherConfig;

/// Independent seed streams, one per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 1,
    Teacher = 2,
    Surrogate = 3,
    Spectrum = 4,
    Condense = 5,
    Eval = 6,
    Verify = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub d: usize,
    pub prevalence: f64,
    pub overlap: f64,
    pub nonlinearity: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let b = BenchmarkSpec::default();
        DataSection {
            n: b.n,
            d: b.d,
            prevalence: b.prevalence,
            overlap: b.overlap,
            nonlinearity: b.nonlinearity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_units: usize,
    /// Applied during teacher training only.
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_units: 32,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of teacher trajectories `M`.
    pub count: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        TeacherSection {
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            count: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub lr: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Uniform `t` samples per iteration.
    pub samples: usize,
    /// Mini-batch size per `t` sample.
    pub batch_size: usize,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let o = ControlPointOptions::default();
        let samples = match o.quadrature {
            PathQuadrature::MonteCarlo { samples } => samples,
            PathQuadrature::GaussLegendre { nodes } => nodes,
        };
        SurrogateSection {
            lr: o.lr,
            tol: o.tol,
            max_iters: o.max_iters,
            samples,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fresh initialisations per evaluated dataset.
    pub seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            lr: e.lr,
            momentum: e.momentum,
            epochs: e.epochs,
            batch_size: e.batch_size,
            seeds: 10,
        }
    }
}

/// Sizes of the certificate runs in `verify-theory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub displacement_surrogates: usize,
    pub displacement_dim: usize,
    pub displacement_segments: usize,
    /// Surrogates stacked into one matrix for the combined rank check.
    pub combined_surrogates: usize,
    pub chord_surrogates: usize,
    pub chord_dim: usize,
    pub projection_trials: usize,
    pub projection_input_dim: usize,
    pub projection_hidden_units: usize,
    pub projection_inner_steps: usize,
    pub rank_matrices: usize,
    pub rank_rows: usize,
    pub rank_cols: usize,
    pub rank_values: Vec<usize>,
    pub rank_trials: usize,
    pub fidelity_teachers: usize,
    pub fidelity_epochs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            displacement_surrogates: 20,
            displacement_dim: 500,
            displacement_segments: 50,
            combined_surrogates: 10,
            chord_surrogates: 10,
            chord_dim: 200,
            projection_trials: 100,
            projection_input_dim: 10,
            projection_hidden_units: 8,
            projection_inner_steps: 10,
            rank_matrices: 20,
            rank_rows: 200,
            rank_cols: 40,
            rank_values: vec![1, 5, 10],
            rank_trials: 1000,
            fidelity_teachers: 10,
            fidelity_epochs: 30,
        }
    }
}

/// What `run-suite` runs. `random` in `methods` is the random-subset baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub methods: Vec<String>,
    pub ipcs: Vec<usize>,
    /// `ipc` used by the ablations.
    pub ablation_ipc: usize,
    pub inner_steps: Vec<usize>,
    pub init_modes: Vec<InitMode>,
    pub segment_lengths: Vec<f64>,
    /// Segments per trajectory in the spectral diagnostic.
    pub spectral_segments: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection {
            methods: ["btm", "linear", "mtt", "random"].map(String::from).to_vec(),
            ipcs: vec![10, 50],
            ablation_ipc: 10,
            inner_steps: vec![10, 20, 30, 40],
            init_modes: vec![InitMode::Real, InitMode::RandomGaussian],
            segment_lengths: vec![0.1, 0.2, 0.3, 0.4],
            spectral_segments: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub condense: CondenseConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub suite: SuiteSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.benchmark().validate().map_err(cfg_err)?;
        self.model_config().validate().map_err(cfg_err)?;
        self.teacher_config(0).validate().map_err(cfg_err)?;
        if self.teacher.count == 0 || self.teacher.epochs == 0 {
            return Err(Error::Config("teacher.count and teacher.epochs must be >= 1".into()));
        }
        if !(self.surrogate.lr > 0.0) || self.surrogate.samples == 0 || self.surrogate.batch_size == 0 {
            return Err(Error::Config(
                "surrogate.lr must be > 0, samples and batch_size >= 1".into(),
            ));
        }
        self.condense.validate().map_err(cfg_err)?;
        self.eval_config().validate().map_err(cfg_err)?;
        if self.eval.seeds == 0 {
            return Err(Error::Config("eval.seeds must be >= 1".into()));
        }
        for m in &self.suite.methods {
            if m != "random" {
                m.parse::<CondenseMethod>()?;
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage as u64)
    }

    /// `path` resolved against the config directory unless absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(self.out_dir.as_deref().unwrap_or(Path::new("out")))
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            n: self.data.n,
            d: self.data.d,
            prevalence: self.data.prevalence,
            overlap: self.data.overlap,
            nonlinearity: self.data.nonlinearity,
            seed: self.stage_seed(Stage::Data),
        }
    }

    pub fn model_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.data.d,
            hidden_units: self.model.hidden_units,
            dropout_rate: self.model.dropout_rate,
        }
    }

    /// Evaluation and condensation use the same architecture without dropout.
    pub fn student_model_config(&self) -> MlpConfig {
        MlpConfig {
            dropout_rate: 0.0,
            ..self.model_config()
        }
    }

    pub fn teacher_config(&self, seed: u64) -> TeacherConfig {
        TeacherConfig {
            lr: self.teacher.lr,
            momentum: self.teacher.momentum,
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            seed,
        }
    }

    pub fn control_point_options(&self, seed: u64) -> ControlPointOptions {
        ControlPointOptions {
            lr: self.surrogate.lr,
            tol: self.surrogate.tol,
            max_iters: self.surrogate.max_iters,
            quadrature: PathQuadrature::MonteCarlo {
                samples: self.surrogate.samples,
            },
            seed,
        }
    }

    pub fn condense_config(&self) -> CondenseConfig {
        CondenseConfig {
            seed: self.stage_seed(Stage::Condense),
            ..self.condense
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            lr: self.eval.lr,
            momentum: self.eval.momentum,
            epochs: self.eval.epochs,
            batch_size: self.eval.batch_size,
        }
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        let base = self.stage_seed(Stage::Eval);
        (0..self.eval.seeds as u64).map(|k| derive_seed(base, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let cfg = RunConfig::parse("seed = 3\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.teacher.epochs, 100);
        assert_eq!(cfg.out_dir(), PathBuf::from("/tmp/x/out"));
        assert_eq!(cfg.condense_config().seed, cfg.stage_seed(Stage::Condense));
        assert_eq!(cfg.eval_seeds().len(), 10);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(
            RunConfig::parse("[teacher]\nepochs = 3\n", Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "seed = 1\nbogus = 2\n",
            "seed = 1\n[teacher]\nlearning_rate = 0.1\n",
            "seed = 1\n[condense]\nseed = 4\n",
            "seed = 1\n[nonsense]\n",
        ] {
            assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "seed = 1\n[data]\nprevalence = 0.9\n",
            "seed = 1\n[teacher]\nlr = -1.0\n",
            "seed = 1\n[condense]\nsegment_length = 1.5\n",
            "seed = 1\n[suite]\nmethods = [\"sgd\"]\n",
        ] {
            assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn sections_map_to_module_configs() {
        let text = r#"
seed = 9
out_dir = "/abs/out"
[data]
n = 500
d = 6
[model]
hidden_units = 4
[condense]
method = "linear"
ipc = 5
inner_steps = 12
[condense.selection_eval]
lr = 0.1
momentum = 0.0
epochs = 7
batch_size = 8
"#;
        let cfg = RunConfig::parse(text, Path::new("rel")).unwrap();
        assert_eq!(cfg.out_dir(), PathBuf::from("/abs/out"));
        assert_eq!(cfg.model_config().param_count(), 4 * 6 + 2 * 4 + 1);
        let c = cfg.condense_config();
        assert_eq!(c.method, CondenseMethod::Linear);
        assert_eq!(c.inner_steps(), 12);
        assert_eq!(c.selection_eval.epochs, 7);
        assert_eq!(cfg.benchmark().n, 500);
    }
}
