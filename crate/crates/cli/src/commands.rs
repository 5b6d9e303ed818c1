//! Subcommand bodies. Stage outputs live at fixed paths under the output
//! directory, so each stage reads exactly what the previous one wrote.

use std::fs;
use std::path::{Path, PathBuf};

use btm_core::certify;
use btm_core::condense::{self, CondenseMethod, CondenseSupervision, SyntheticDataset};
use btm_core::config::{RunConfig, Stage};
use btm_core::eval::{self, suite, summarize, Dataset, MetricReport};
use btm_core::geometry::spectral_comparison;
use btm_core::surrogate::{self, BezierSurrogate};
use btm_core::teacher::{self, storage_report};
use btm_core::{Error, Mlp, Result, Trajectory};
use serde::Serialize;

use crate::manifest::Manifest;
use crate::{Common, Outcome};

const TRAIN: &str = "data/train.btmd";
const VAL: &str = "data/val.btmd";
const TEST: &str = "data/test.btmd";
const TEACHERS: &str = "teachers";
const SURROGATES: &str = "surrogates";

pub struct Context {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub config_path: PathBuf,
    pub out: PathBuf,
}

impl Context {
    pub fn new(command: &'static str, common: &Common) -> Result<Self> {
        // an unreadable config file is a configuration error too
        let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(m) = &common.method {
            cfg.condense.method = m.parse()?;
        }
        if let Some(ipc) = common.ipc {
            cfg.condense.ipc = ipc;
        }
        cfg.validate()?;
        let out = match &common.out {
            Some(dir) => dir.clone(),
            None => cfg.out_dir(),
        };
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok(Context {
            command,
            cfg,
            config_path: common.config.clone(),
            out,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<()> {
        let dir = self.path(rel);
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir, source: e })
    }

    fn write(&self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        fs::write(&path, contents).map_err(|e| Error::Io { path, source: e })
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::InvalidInput(format!("json encoding: {e}")))?;
        self.write(rel, &text)
    }

    fn finish(&self, files: &[String]) -> Result<Outcome> {
        let mut manifest = Manifest::load_or_default(&self.out)?;
        manifest.record(&self.out, self.command, self.cfg.seed, &self.config_path, files)?;
        manifest.save(&self.out)?;
        Ok(Outcome::Ok)
    }

    fn load_data(&self, rel: &str) -> Result<Dataset> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(missing(&path, "gen-data"));
        }
        Dataset::load(&path)
    }

    fn load_teachers(&self) -> Result<Vec<Trajectory>> {
        let files = self.stage_files(TEACHERS, "btmt", "train-teachers")?;
        files.iter().map(|p| Trajectory::load(p)).collect()
    }

    fn load_surrogates(&self) -> Result<Vec<BezierSurrogate>> {
        let files = self.stage_files(SURROGATES, "btmb", "fit-surrogates")?;
        files.iter().map(|p| BezierSurrogate::load(p)).collect()
    }

    /// Sorted files with extension `ext` in the stage directory `rel`.
    fn stage_files(&self, rel: &str, ext: &str, producer: &str) -> Result<Vec<PathBuf>> {
        let dir = self.path(rel);
        let entries = fs::read_dir(&dir).map_err(|_| missing(&dir, producer))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(missing(&dir, producer));
        }
        Ok(files)
    }

    fn mlp(&self) -> Result<Mlp> {
        Mlp::new(self.cfg.student_model_config())
    }

    fn run_dir(&self) -> String {
        format!("condense/{}_ipc{}", self.cfg.condense.method, self.cfg.condense.ipc)
    }
}

fn missing(path: &Path, producer: &str) -> Error {
    Error::InvalidInput(format!("{} not found; run `{producer}` first", path.display()))
}

pub fn gen_data(ctx: &Context) -> Result<Outcome> {
    let split = eval::generate_benchmark(&ctx.cfg.benchmark())?;
    ctx.mkdir("data")?;
    for (rel, d) in [(TRAIN, &split.train), (VAL, &split.val), (TEST, &split.test)] {
        d.save(&ctx.path(rel))?;
        println!("{rel}: {} rows, {} positive", d.len(), d.n_pos());
    }
    let info = serde_json::json!({
        "spec": ctx.cfg.benchmark(),
        "prevalence": split.prevalence,
        "rows": [split.train.len(), split.val.len(), split.test.len()],
    });
    ctx.write_json("data/info.json", &info)?;
    ctx.finish(&[TRAIN, VAL, TEST, "data/info.json"].map(String::from))
}

pub fn train_teachers(ctx: &Context) -> Result<Outcome> {
    let train = ctx.load_data(TRAIN)?;
    let cfg = &ctx.cfg;
    let trajs = teacher::train_teachers(
        &train,
        &cfg.teacher_config(cfg.stage_seed(Stage::Teacher)),
        &cfg.model_config(),
        cfg.teacher.count,
    )?;
    ctx.mkdir(TEACHERS)?;
    let mut files = Vec::new();
    for (m, t) in trajs.iter().enumerate() {
        let rel = format!("{TEACHERS}/teacher_{m:03}.btmt");
        t.save(&ctx.path(&rel))?;
        println!(
            "{rel}: T = {}, final train loss {:.5}",
            t.epochs(),
            t.final_train_loss.unwrap_or(f64::NAN)
        );
        files.push(rel);
    }
    ctx.finish(&files)
}

#[derive(Serialize)]
struct FitRecord {
    teacher: usize,
    start_path_loss: f64,
    end_path_loss: f64,
    iterations: usize,
    final_grad_norm: f64,
    accepted: bool,
    kappa: f64,
}

pub fn fit_surrogates(ctx: &Context) -> Result<Outcome> {
    let train = ctx.load_data(TRAIN)?;
    let teachers = ctx.load_teachers()?;
    let cfg = &ctx.cfg;
    let fits = surrogate::fit_surrogates(
        &teachers,
        &train,
        &ctx.mlp()?,
        cfg.surrogate.batch_size,
        &cfg.control_point_options(cfg.stage_seed(Stage::Surrogate)),
    )?;
    ctx.mkdir(SURROGATES)?;
    let mut files = Vec::new();
    let mut records = Vec::new();
    for (m, f) in fits.iter().enumerate() {
        let rel = format!("{SURROGATES}/surrogate_{m:03}.btmb");
        f.surrogate.save(&ctx.path(&rel))?;
        println!(
            "{rel}: path loss {:.5} -> {:.5} ({} iterations{})",
            f.start_path_loss,
            f.end_path_loss,
            f.iterations,
            if f.accepted { "" } else { ", kept midpoint" }
        );
        files.push(rel);
        records.push(FitRecord {
            teacher: m,
            start_path_loss: f.start_path_loss,
            end_path_loss: f.end_path_loss,
            iterations: f.iterations,
            final_grad_norm: f.final_grad_norm,
            accepted: f.accepted,
            kappa: f.surrogate.kappa(),
        });
    }
    let rel = format!("{SURROGATES}/fits.json");
    ctx.write_json(&rel, &records)?;
    files.push(rel);
    ctx.finish(&files)
}

pub fn diagnose_spectrum(ctx: &Context) -> Result<Outcome> {
    let teachers = ctx.load_teachers()?;
    let surrs = ctx.load_surrogates()?;
    let cmp = spectral_comparison(
        &teachers,
        &surrs,
        ctx.cfg.suite.spectral_segments,
        ctx.cfg.stage_seed(Stage::Spectrum),
    )?;
    ctx.mkdir("spectrum")?;
    let mut files = Vec::new();
    for (name, rep) in [("sgd", &cmp.sgd), ("bezier", &cmp.bezier), ("linear", &cmp.linear)] {
        let rel = format!("spectrum/{name}.csv");
        ctx.write(&rel, &rep.to_csv())?;
        files.push(rel);
        println!(
            "{name:<7} effective rank 90/95/99: {}/{}/{}, numerical rank {}",
            rep.effective_rank_90, rep.effective_rank_95, rep.effective_rank_99, rep.numerical_rank
        );
    }
    ctx.write_json("spectrum/summary.json", &cmp)?;
    files.push("spectrum/summary.json".into());
    ctx.finish(&files)
}

pub fn condense(ctx: &Context) -> Result<Outcome> {
    let train = ctx.load_data(TRAIN)?;
    let val = ctx.load_data(VAL)?;
    let cfg = ctx.cfg.condense_config();
    let teachers;
    let surrs;
    let supervision = match cfg.method {
        CondenseMethod::Mtt => {
            teachers = ctx.load_teachers()?;
            CondenseSupervision::Trajectories(&teachers)
        }
        CondenseMethod::Btm | CondenseMethod::Linear => {
            surrs = ctx.load_surrogates()?;
            CondenseSupervision::Surrogates(&surrs)
        }
    };
    let dir = ctx.run_dir();
    ctx.mkdir(&dir)?;
    let trace_rel = format!("{dir}/trace.csv");
    let model = ctx.cfg.student_model_config();
    let out = match condense::condense(&train, &val, supervision, &model, &cfg) {
        Ok(out) => out,
        Err(e) => {
            // keep the partial trace for diagnosis
            ctx.write(&trace_rel, &e.trace.to_csv())?;
            return Err(e.error);
        }
    };
    ctx.write(&trace_rel, &out.trace.to_csv())?;
    let best = format!("{dir}/synthetic.btmd");
    let last = format!("{dir}/final.btmd");
    out.synthetic.save(&ctx.path(&best))?;
    out.final_synthetic.save(&ctx.path(&last))?;
    let summary = serde_json::json!({
        "method": cfg.method.name(),
        "ipc": cfg.ipc,
        "iterations": out.trace.records.len(),
        "best_iter": out.trace.best_iter,
        "best_val_auprc": out.trace.best_val_auprc,
        "student_lr": out.student_lr,
        "final_loss": out.trace.records.last().map(|r| r.loss),
    });
    let sum_rel = format!("{dir}/summary.json");
    ctx.write_json(&sum_rel, &summary)?;
    println!(
        "{}: {} iterations, best validation AUPRC {} at iteration {}",
        best,
        out.trace.records.len(),
        out.trace.best_val_auprc.map_or("n/a".into(), |v| format!("{v:.4}")),
        out.trace.best_iter
    );
    ctx.finish(&[trace_rel, best, last, sum_rel])
}

fn metric_rows(label: &str, reports: &[MetricReport], out: &mut String) {
    for r in reports {
        out.push_str(&format!("{label},{},{},{},{}\n", r.seed, r.auroc, r.auprc, r.diverged));
    }
}

pub fn evaluate(ctx: &Context) -> Result<Outcome> {
    let train = ctx.load_data(TRAIN)?;
    let test = ctx.load_data(TEST)?;
    let dir = ctx.run_dir();
    let synth_path = ctx.path(&format!("{dir}/synthetic.btmd"));
    if !synth_path.exists() {
        return Err(missing(&synth_path, "condense"));
    }
    let synth = SyntheticDataset::load(&synth_path)?.to_dataset();
    let cfg = &ctx.cfg;
    let model = cfg.student_model_config();
    let eval_cfg = cfg.eval_config();
    let seeds = cfg.eval_seeds();
    let method = cfg.condense.method.name();
    let random = condense::random_subset(&train, cfg.condense.ipc, cfg.condense_config().seed)?;
    let rows = [
        (method, eval::evaluate_synthetic(&synth, &test, &model, &eval_cfg, &seeds)?),
        (suite::RANDOM_METHOD, eval::evaluate_synthetic(&random, &test, &model, &eval_cfg, &seeds)?),
    ];
    let mut csv = String::from("method,seed,auroc,auprc,diverged\n");
    let mut summaries = serde_json::Map::new();
    for (label, reports) in &rows {
        metric_rows(label, reports, &mut csv);
        let s = summarize(reports);
        println!(
            "{label:<7} AUPRC {:.4} +- {:.4}, AUROC {:.4} +- {:.4} ({} runs, {} diverged)",
            s.auprc_mean, s.auprc_std, s.auroc_mean, s.auroc_std, s.runs, s.diverged
        );
        summaries.insert(label.to_string(), serde_json::to_value(s).unwrap_or_default());
    }
    ctx.mkdir("eval")?;
    let base = format!("eval/{}_ipc{}", method, cfg.condense.ipc);
    ctx.write(&format!("{base}.csv"), &csv)?;
    ctx.write_json(&format!("{base}.json"), &summaries)?;
    ctx.finish(&[format!("{base}.csv"), format!("{base}.json")])
}

pub fn verify_theory(ctx: &Context) -> Result<Outcome> {
    let certs = certify::run_all(&ctx.cfg);
    for c in &certs {
        println!("{}", c.line());
    }
    ctx.write_json("certificates.json", &certs)?;
    ctx.finish(&["certificates.json".to_string()])?;
    if certs.iter().all(|c| c.passed) {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::ChecksFailed)
    }
}

pub fn report_storage(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let rep = storage_report(
        cfg.teacher.count,
        cfg.teacher.epochs,
        cfg.model_config().param_count(),
    );
    println!("{rep}");
    ctx.write_json("storage.json", &rep)?;
    ctx.finish(&["storage.json".to_string()])
}

pub fn run_suite(ctx: &Context) -> Result<Outcome> {
    let dir = ctx.path("suite");
    let summary = suite::run_experiment_suite(&ctx.cfg, &dir)?;
    for c in &summary.cells {
        match (&c.metrics, &c.error) {
            (Some(m), _) => println!(
                "{:<22} {:<7} ipc {:<4} AUPRC {:.4} +- {:.4}",
                c.experiment, c.method, c.ipc, m.auprc_mean, m.auprc_std
            ),
            (None, Some(e)) => println!("{:<22} {:<7} ipc {:<4} failed: {e}", c.experiment, c.method, c.ipc),
            (None, None) => {}
        }
    }
    let mut files = Vec::new();
    collect_files(&dir, &ctx.out, &mut files)?;
    files.sort();
    ctx.finish(&files)?;
    if summary.failed_cells > 0 {
        Ok(Outcome::ChecksFailed)
    } else {
        Ok(Outcome::Ok)
    }
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, root, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
