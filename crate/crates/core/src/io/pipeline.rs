//! End-to-end runs driven by a resolved [`RunConfig`].
//!
//! Each run writes its resolved config to `<primary output>.run.cfg` (for
//! `synth`, `<out>/run.cfg`) before doing any work, then its outputs. Training
//! runs also write `<out_model>.trace.csv`, including when training diverges.
//!
//! Seeds: the config's `seed` is the root of every random stream; components
//! draw from fixed forks of it (data, init, training, pair sampling,
//! evaluation), so a run is reproduced exactly by its config.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::conversion::{knn_convert, sinkvc_convert, ConversionMethod, ConversionReport, FeatureMatrix};
use crate::error::{Error, Result};
use crate::flow::{fm_apply, fm_pipeline, fm_train_traced, FlowConfig, OdeMethod, PlanPairs};
use crate::metrics::{frechet_distance, theorem1_check, w2_squared_empirical, Theorem1Report, W2Mode};
use crate::neural_ot::{not_train, xnot_train, NotCheckpoint, NotConfig, NotTrace};
use crate::numerics::{Activation, Rng};
use crate::ot::{cost_matrix, sinkhorn, uniform_marginal, CostKind, SinkhornConfig};

use super::dataset_spec::DatasetSpec;
use super::feature_file::{read_features, write_features, Dtype};
use super::model_file::ModelFile;
use super::run_config::RunConfig;
use super::synth::{generate, write_bundle, SynthTask};
use super::write_atomic;

/// Files written by a run and a JSON summary for stdout.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Where a run's resolved config goes, if it has file outputs.
pub fn config_path(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    Ok(match cfg.command()? {
        "convert" => Some(with_suffix(Path::new(&cfg.require::<String>("out")?), ".run.cfg")),
        "train-fm" | "train-not" => Some(with_suffix(Path::new(&cfg.require::<String>("out_model")?), ".run.cfg")),
        "synth" => Some(Path::new(&cfg.require::<String>("out")?).join("run.cfg")),
        "eval" => cfg.get("report").map(|r| with_suffix(Path::new(r), ".run.cfg")),
        _ => None,
    })
}

/// Path of the loss trace written by a training run.
pub fn trace_path(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(with_suffix(Path::new(&cfg.require::<String>("out_model")?), ".trace.csv"))
}

/// Resolves `cfg`, records the resolved config, and runs the command.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let cfg = cfg.resolve()?;
    let mut outputs = Vec::new();
    if let Some(path) = config_path(&cfg)? {
        if cfg.command()? == "synth" {
            std::fs::create_dir_all(path.parent().expect("synth config lives in the output dir"))?;
        }
        write_atomic(&path, cfg.to_text().as_bytes())?;
        outputs.push(path);
    }
    let mut outcome = match cfg.command()? {
        "convert" => run_convert(&cfg)?,
        "train-fm" => run_train_fm(&cfg)?,
        "train-not" => run_train_not(&cfg)?,
        "eval" => run_eval(&cfg)?,
        "synth" => run_synth(&cfg)?,
        other => return Err(Error::Validation(format!("unknown command `{other}`"))),
    };
    outputs.append(&mut outcome.outputs);
    Ok(RunOutcome { outputs, summary: outcome.summary })
}

fn path_key(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.require::<String>(key)?))
}

pub fn sinkhorn_config(cfg: &RunConfig) -> Result<SinkhornConfig> {
    let sc = SinkhornConfig {
        epsilon: cfg.require("epsilon")?,
        tolerance: cfg.require("sinkhorn_tolerance")?,
        max_iterations: cfg.require("sinkhorn_max_iterations")?,
        log_domain: true,
    };
    sc.validate()?;
    Ok(sc)
}

pub fn flow_config(cfg: &RunConfig) -> Result<FlowConfig> {
    let fc = FlowConfig {
        hidden_dims: cfg.require_list("hidden_dims")?,
        activation: cfg.require::<String>("activation")?.parse::<Activation>()?,
        batch_size: cfg.require("batch_size")?,
        iterations: cfg.require("iterations")?,
        learning_rate: cfg.require("learning_rate")?,
        ode_steps: cfg.require("ode_steps")?,
        ode_method: cfg.require::<String>("ode_method")?.parse::<OdeMethod>()?,
    };
    fc.validate()?;
    Ok(fc)
}

pub fn not_config(cfg: &RunConfig) -> Result<NotConfig> {
    let extremal: bool = cfg.require("extremal")?;
    let w = match cfg.optional::<f64>("w")? {
        Some(w) if !extremal && w != 1.0 => {
            return Err(Error::Validation(format!("w = {w} only applies with extremal = true")));
        }
        Some(w) => w,
        None if extremal => NotConfig::extremal_default().w,
        None => 1.0,
    };
    let nc = NotConfig {
        inner_steps: cfg.require("inner_steps")?,
        batch_size: cfg.require("batch_size")?,
        map_lr: cfg.require("map_lr")?,
        potential_lr: cfg.require("potential_lr")?,
        weight_decay: cfg.require("weight_decay")?,
        outer_iterations: cfg.require("outer_iterations")?,
        extremal,
        w,
        hidden_dims: cfg.require_list("hidden_dims")?,
        activation: cfg.require::<String>("activation")?.parse::<Activation>()?,
        log_every: cfg.require("log_every")?,
        eval_samples: cfg.require("eval_samples")?,
    };
    nc.validate()?;
    Ok(nc)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn run_convert(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = read_features(&path_key(cfg, "source")?)?;
    let reference = read_features(&path_key(cfg, "reference")?)?;
    let method: ConversionMethod = cfg.require::<String>("method")?.parse()?;
    let k: usize = cfg.require("k")?;
    let (converted, report) = match method {
        ConversionMethod::Sinkvc => sinkvc_convert(&source, &reference, &sinkhorn_config(cfg)?, k)?,
        ConversionMethod::Knn => knn_convert(&source, &reference, k)?,
        ConversionMethod::Fmvc => convert_fmvc(cfg, &source, &reference)?,
    };
    let out = path_key(cfg, "out")?;
    let dtype: Dtype = cfg.require::<String>("dtype")?.parse()?;
    write_features(&out, &converted, dtype)?;
    let mut outputs = vec![out];
    if let Some(report_path) = cfg.get("report") {
        let p = PathBuf::from(report_path);
        write_json(&p, &report)?;
        outputs.push(p);
    }
    Ok(RunOutcome { outputs, summary: serde_json::to_value(&report)? })
}

fn convert_fmvc(cfg: &RunConfig, source: &FeatureMatrix, reference: &FeatureMatrix) -> Result<(FeatureMatrix, ConversionReport)> {
    let flow_cfg = flow_config(cfg)?;
    match cfg.get("model") {
        Some(model) => {
            let field = ModelFile::load(Path::new(model))?.into_velocity_field()?;
            if field.dim() != source.dim() {
                return Err(Error::Validation(format!(
                    "model has dim {} but source frames have dim {}",
                    field.dim(),
                    source.dim()
                )));
            }
            let frames = fm_apply(&field, &source.frames, &flow_cfg)?;
            // no plan behind a stored field: report the mean ½‖x − φ(x)‖² displacement
            let n = source.len().max(1) as f64;
            let cost = frames
                .row_iter()
                .zip(source.frames.row_iter())
                .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                .sum::<f64>()
                / n;
            let out = FeatureMatrix { frames, frame_rate_hint: source.frame_rate_hint, tag: source.tag.clone() };
            Ok((out, ConversionReport { plan_stats: None, mean_transport_cost: cost, method: ConversionMethod::Fmvc, k: 0 }))
        }
        None => {
            let cost: CostKind = cfg.require::<String>("cost")?.parse()?;
            let rng = Rng::new(cfg.require("seed")?);
            let (_, out, report) = fm_pipeline(source, reference, &sinkhorn_config(cfg)?, &flow_cfg, cost, &rng)?;
            Ok((out, report))
        }
    }
}

fn write_loss_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l:e}\n"));
    }
    write_atomic(path, text.as_bytes())
}

fn run_train_fm(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = read_features(&path_key(cfg, "source")?)?;
    let reference = read_features(&path_key(cfg, "reference")?)?;
    if source.dim() != reference.dim() || source.is_empty() || reference.is_empty() {
        return Err(Error::Validation(format!(
            "source ({}×{}) and reference ({}×{}) must be nonempty with equal dims",
            source.len(),
            source.dim(),
            reference.len(),
            reference.dim()
        )));
    }
    let flow_cfg = flow_config(cfg)?;
    let cost: CostKind = cfg.require::<String>("cost")?.parse()?;
    let c = cost_matrix(&source.frames, &reference.frames, cost)?;
    let plan = sinkhorn(&c, &uniform_marginal(source.len()), &uniform_marginal(reference.len()), &sinkhorn_config(cfg)?)?;
    let pairs = PlanPairs::new(&plan, &source.frames, &reference.frames)?;
    let rng = Rng::new(cfg.require("seed")?);
    let mut losses = Vec::new();
    let trained = fm_train_traced(&pairs, &flow_cfg, &rng, &mut losses);
    let trace = trace_path(cfg)?;
    write_loss_trace(&trace, &losses)?;
    let field = trained?;
    let model_path = path_key(cfg, "out_model")?;
    ModelFile::from_velocity_field(&field, cfg.to_text()).save(&model_path)?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    let summary = serde_json::json!({
        "iterations": losses.len(),
        "final_loss": losses.last().copied(),
        "mean_loss_last_10": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        "plan_converged": plan.converged,
        "plan_marginal_error": plan.marginal_error,
    });
    Ok(RunOutcome { outputs: vec![model_path, trace], summary })
}

fn write_not_trace(path: &Path, checkpoints_path: &Path, trace: &NotTrace) -> Result<()> {
    let mut text = String::from("iteration,map_objective,potential_objective\n");
    for r in &trace.rows {
        text.push_str(&format!("{},{:e},{:e}\n", r.iteration, r.map_objective, r.potential_objective));
    }
    write_atomic(path, text.as_bytes())?;
    let mut text = String::from("iteration,condition,w2_squared,baseline_w2_squared,frechet_distance,theorem1_holds\n");
    for c in &trace.checkpoints {
        text.push_str(&format!(
            "{},{},{:e},{:e},{:e},{}\n",
            c.iteration, c.condition, c.w2_squared, c.baseline_w2_squared, c.frechet_distance, c.theorem1_holds
        ));
    }
    write_atomic(checkpoints_path, text.as_bytes())
}

fn run_train_not(cfg: &RunConfig) -> Result<RunOutcome> {
    let dataset = DatasetSpec::load_dataset(&path_key(cfg, "dataset_spec")?)?;
    let not_cfg = not_config(cfg)?;
    let rng = Rng::new(cfg.require("seed")?);
    let mut trace = NotTrace::default();
    let trained = if not_cfg.extremal {
        xnot_train(&dataset, &not_cfg, &rng, &mut trace)
    } else {
        not_train(&dataset, &not_cfg, &rng, &mut trace)
    };
    let trace_file = trace_path(cfg)?;
    let checkpoints_file = with_suffix(&path_key(cfg, "out_model")?, ".checkpoints.csv");
    write_not_trace(&trace_file, &checkpoints_file, &trace)?;
    let pair = trained?;
    let model_path = path_key(cfg, "out_model")?;
    ModelFile::from_not_pair(&pair, cfg.to_text()).save(&model_path)?;
    let last: Vec<&NotCheckpoint> = trace.final_checkpoints();
    let summary = serde_json::json!({
        "outer_iterations": trace.rows.len(),
        "extremal": not_cfg.extremal,
        "w": not_cfg.w,
        "final_checkpoints": last,
    });
    Ok(RunOutcome { outputs: vec![model_path, trace_file, checkpoints_file], summary })
}

/// `eval` output; absent fields were not requested.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_a: usize,
    pub n_b: usize,
    pub w2_mode: W2Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2_squared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frechet_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem1: Option<Theorem1Report>,
    pub notes: Vec<String>,
}

pub fn evaluate(a: &FeatureMatrix, b: &FeatureMatrix, metrics: &[String], mode: Option<W2Mode>) -> Result<EvalReport> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!("a has dim {} but b has dim {}", a.dim(), b.dim())));
    }
    let mode = mode.unwrap_or_else(|| W2Mode::auto(a.len(), b.len()));
    let mut report = EvalReport {
        n_a: a.len(),
        n_b: b.len(),
        w2_mode: mode,
        w2_squared: None,
        frechet_distance: None,
        theorem1: None,
        notes: vec!["features used as-is (identity feature extractor)".into()],
    };
    for m in metrics {
        match m.as_str() {
            "w2" => {
                report.w2_squared = Some(2.0 * w2_squared_empirical(&a.frames, &b.frames, mode)?);
                report.notes.push("w2_squared is in the unit-cost convention ‖x − y‖²; halve it for ½‖x − y‖²".into());
            }
            "fd" => report.frechet_distance = Some(frechet_distance(&a.frames, &b.frames)?),
            "theorem1" => report.theorem1 = Some(theorem1_check(&a.frames, &b.frames, mode)?),
            other => return Err(Error::Validation(format!("unknown metric `{other}` (expected w2, fd or theorem1)"))),
        }
    }
    if mode == W2Mode::Sinkhorn && metrics.iter().any(|m| m != "fd") {
        report.notes.push("sinkhorn mode reports the cost of a feasible entropic plan, an upper bound on W2²".into());
    }
    Ok(report)
}

fn run_eval(cfg: &RunConfig) -> Result<RunOutcome> {
    let a = read_features(&path_key(cfg, "a")?)?;
    let b = read_features(&path_key(cfg, "b")?)?;
    let metrics: Vec<String> = cfg.require_list("metrics")?;
    let mode = match cfg.require::<String>("w2_mode")?.as_str() {
        "auto" => None,
        other => Some(other.parse::<W2Mode>()?),
    };
    let report = evaluate(&a, &b, &metrics, mode)?;
    let mut outputs = Vec::new();
    if let Some(p) = cfg.get("report") {
        let p = PathBuf::from(p);
        write_json(&p, &report)?;
        outputs.push(p);
    }
    Ok(RunOutcome { outputs, summary: serde_json::to_value(&report)? })
}

fn run_synth(cfg: &RunConfig) -> Result<RunOutcome> {
    let task: SynthTask = cfg.require::<String>("task")?.parse()?;
    let bundle = generate(task, cfg.require("n")?, cfg.require("dim")?, cfg.require("seed")?)?;
    let dir = path_key(cfg, "out")?;
    let outputs = write_bundle(&dir, &bundle)?;
    let files: Vec<String> = bundle.files.iter().map(|(n, _)| n.clone()).collect();
    let summary = serde_json::json!({ "task": task, "files": files, "truth": "truth.json", "dataset_spec": "dataset.json" });
    Ok(RunOutcome { outputs, summary })
}
