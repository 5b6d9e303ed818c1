use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::metrics::MetricReport;
use crate::error::{check_dim, Error, Result};
use crate::linalg::all_finite;
use crate::model::{Mlp, MlpConfig, Params};
use crate::rng::derive_seed;
use crate::teacher::run_sgd;

const EVAL_INIT_STREAM: u64 = 0xE7A1;

/// Training settings for models fitted from scratch on (synthetic) data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 100,
            batch_size: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::invalid(
                "eval config needs lr > 0, momentum in [0, 1), batch_size >= 1",
            ));
        }
        Ok(())
    }
}

/// Fresh initialisation from `seed`, then SGD on `data`.
pub fn train_from_scratch(
    data: &Dataset,
    model_cfg: &MlpConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Params> {
    cfg.validate()?;
    check_dim(model_cfg.input_dim, data.dim())?;
    let mlp = Mlp::new(*model_cfg)?;
    let init = model_cfg.init_params(derive_seed(seed, EVAL_INIT_STREAM));
    run_sgd(
        &mlp,
        data,
        cfg.lr,
        cfg.momentum,
        cfg.epochs,
        cfg.batch_size,
        init,
        seed,
        |_, _| {},
    )
}

/// Scores `test` with the model at `theta`. Non-finite scores count as a
/// diverged run.
pub fn evaluate_params(mlp: &Mlp, theta: &[f64], test: &Dataset, seed: u64) -> Result<MetricReport> {
    let scores = mlp.logits(theta, test.x())?;
    if !all_finite(&scores) {
        return Ok(MetricReport::diverged(seed, test.y()));
    }
    MetricReport::from_scores(&scores, test.y(), seed)
}

/// Trains one fresh model per seed on `train` and scores it on `test`.
/// Runs whose training diverges are flagged in their report, never retried.
pub fn evaluate_synthetic(
    train: &Dataset,
    test: &Dataset,
    model_cfg: &MlpConfig,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<Vec<MetricReport>> {
    if seeds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one seed"));
    }
    let mlp = Mlp::new(*model_cfg)?;
    seeds
        .par_iter()
        .map(|&seed| match train_from_scratch(train, model_cfg, cfg, seed) {
            Ok(theta) => evaluate_params(&mlp, &theta, test, seed),
            Err(Error::TrainingDiverged { .. }) => Ok(MetricReport::diverged(seed, test.y())),
            Err(e) => Err(e),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_benchmark, BenchmarkSpec};

    #[test]
    fn separable_benchmark_is_learned() {
        let split = generate_benchmark(&BenchmarkSpec {
            n: 1000,
            d: 5,
            prevalence: 0.5,
            overlap: 0.0,
            nonlinearity: true,
            seed: 2,
        })
        .unwrap();
        let mc = MlpConfig::new(5, 16);
        let cfg = EvalConfig {
            batch_size: 64,
            epochs: 60,
            ..EvalConfig::default()
        };
        let reports = evaluate_synthetic(&split.train, &split.test, &mc, &cfg, &[0, 1]).unwrap();
        for r in &reports {
            assert!(!r.diverged);
            assert!(r.auroc >= 0.99, "auroc {}", r.auroc);
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let split = generate_benchmark(&BenchmarkSpec {
            n: 200,
            prevalence: 0.5,
            ..BenchmarkSpec::default()
        })
        .unwrap();
        let mc = MlpConfig::new(split.train.dim(), 4);
        let cfg = EvalConfig {
            lr: 1e300,
            ..EvalConfig::default()
        };
        let reports = evaluate_synthetic(&split.train, &split.test, &mc, &cfg, &[3]).unwrap();
        assert!(reports[0].diverged);
        assert!(reports[0].auprc.is_nan());
        assert!(evaluate_synthetic(&split.train, &split.test, &mc, &cfg, &[]).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let split = generate_benchmark(&BenchmarkSpec {
            n: 300,
            prevalence: 0.2,
            ..BenchmarkSpec::default()
        })
        .unwrap();
        let mc = MlpConfig::new(split.train.dim(), 8);
        let cfg = EvalConfig {
            epochs: 5,
            ..EvalConfig::default()
        };
        let a = evaluate_synthetic(&split.train, &split.test, &mc, &cfg, &[1, 2]).unwrap();
        let b = evaluate_synthetic(&split.train, &split.test, &mc, &cfg, &[1, 2]).unwrap();
        assert_eq!(a, b);
    }
}
