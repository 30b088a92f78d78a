//! Dataset materialization, single runs and sweeps, and their output files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fscil_core::data::{generate_synthetic_dataset, read_dataset, write_dataset};
use fscil_core::encoder::{backbone_digest, encoder_digest, write_checkpoint, EncoderModel};
use fscil_core::trainer::{
    derive_seed, run_experiment_with_backbone, PhaseTimings, STREAM_BACKBONE, STREAM_DATA, STREAM_PLAN,
};
use fscil_core::{
    build_session_plan, cumulative_test_set, LabeledSample, ParameterCount, Precision, Scalar, SessionPlan,
    StepRecord, UpdateTarget,
};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session: usize,
    /// Classes known to the classifier after this session.
    pub classes: usize,
    pub test_samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub s_base: f64,
    pub s_last: f64,
    pub s_avg: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    #[serde(flatten)]
    pub counts: ParameterCount,
    pub total: usize,
}

/// Contents of `results.json`. Everything except `timing` is a pure function
/// of the configuration and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub config: ExperimentConfig,
    pub sessions: Vec<SessionRow>,
    pub metrics: Metrics,
    pub parameters: ParameterBreakdown,
    /// Accuracy of the gradient-trained head on the base training set,
    /// before prototype replacement.
    pub base_train_accuracy: f64,
    pub encoder_digest: String,
    pub backbone_digest: String,
    pub timing: PhaseTimings,
}

/// Swept configuration field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    #[value(name = "adapted_blocks")]
    AdaptedBlocks,
    #[value(name = "update_target")]
    UpdateTarget,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::AdaptedBlocks => "adapted_blocks",
            SweepAxis::UpdateTarget => "update_target",
        }
    }

    /// Base config with the axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::AdaptedBlocks => {
                cfg.encoder.adapted_blocks = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("adapted_blocks value `{value}` is not an integer")))?;
            }
            SweepAxis::UpdateTarget => {
                cfg.encoder.update_target = UpdateTarget::parse(value).ok_or_else(|| {
                    CliError::Config(format!(
                        "update_target value `{value}` is not one of attention_qkv, mlp"
                    ))
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads or synthesizes the configured dataset at precision `T`.
pub fn load_dataset<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<LabeledSample<T>>, CliError> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let params = cfg.data.synthetic.as_ref().expect("validated config");
            // Generated in double precision so both precisions see the same images.
            let data = generate_synthetic_dataset::<f64>(
                params,
                cfg.encoder.image_size,
                cfg.encoder.channels,
                derive_seed(cfg.seed, STREAM_DATA),
            )?;
            Ok(data.iter().map(LabeledSample::cast).collect())
        }
        DataSource::File => {
            let path = cfg.data.path.as_ref().expect("validated config");
            // Payloads may be stored at either width.
            match read_dataset::<T>(path) {
                Ok(d) => Ok(d),
                Err(fscil_core::Error::Format(_)) if T::BYTES == 4 => {
                    Ok(read_dataset::<f64>(path)?.iter().map(LabeledSample::cast).collect())
                }
                Err(fscil_core::Error::Format(_)) => {
                    Ok(read_dataset::<f32>(path)?.iter().map(LabeledSample::cast).collect())
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

pub fn build_plan<T: Scalar>(cfg: &ExperimentConfig, data: &[LabeledSample<T>]) -> Result<SessionPlan<T>, CliError> {
    let p = &cfg.protocol;
    Ok(build_session_plan(
        data,
        p.base_class_count,
        p.ways,
        p.shots,
        p.sessions,
        derive_seed(cfg.seed, STREAM_PLAN),
    )?)
}

/// `generate`: writes the synthetic dataset to `out` as `dataset.bin` plus
/// `manifest.csv`. Returns the number of samples.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<usize, CliError> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(CliError::Config("generate needs data.source = \"synthetic\"".into()));
    }
    match cfg.trainer.precision {
        Precision::Double => {
            let data = load_dataset::<f64>(cfg)?;
            write_dataset(out, &data)?;
            Ok(data.len())
        }
        Precision::Single => {
            let data = load_dataset::<f32>(cfg)?;
            write_dataset(out, &data)?;
            Ok(data.len())
        }
    }
}

/// `run`: the full pipeline, writing every output file into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<ResultsDocument, CliError> {
    match cfg.trainer.precision {
        Precision::Double => run_typed::<f64>(cfg, out),
        Precision::Single => run_typed::<f32>(cfg, out),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<ResultsDocument, CliError> {
    let data = load_dataset::<T>(cfg)?;
    let plan = build_plan(cfg, &data)?;
    run_planned(cfg, &plan, out)
}

/// Runs one configuration on an existing plan.
pub fn run_planned<T: Scalar>(
    cfg: &ExperimentConfig,
    plan: &SessionPlan<T>,
    out: &Path,
) -> Result<ResultsDocument, CliError> {
    std::fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let mut log_err: Option<std::io::Error> = None;
    let mut sink = |r: &StepRecord| {
        if log_err.is_none() {
            let line = serde_json::to_string(r).expect("step record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_err = Some(e);
            }
        }
    };
    let encoder = EncoderModel::<T>::new(cfg.encoder.clone(), derive_seed(cfg.seed, STREAM_BACKBONE))?;
    let outcome = run_experiment_with_backbone(plan, encoder, &cfg.trainer, &mut sink)?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;

    let mut sessions = Vec::with_capacity(plan.sessions.len());
    let mut classes = 0;
    for (t, acc) in outcome.report.per_session_accuracy.iter().enumerate() {
        classes += plan.sessions[t].class_ids.len();
        sessions.push(SessionRow {
            session: t,
            classes,
            test_samples: cumulative_test_set(plan, t)?.len(),
            accuracy: *acc,
        });
    }
    let r = &outcome.report;
    let doc = ResultsDocument {
        config: cfg.clone(),
        sessions,
        metrics: Metrics {
            s_base: r.s_base,
            s_last: r.s_last,
            s_avg: r.s_avg,
            pd: r.pd,
        },
        parameters: ParameterBreakdown {
            counts: outcome.parameter_count,
            total: outcome.parameter_count.total(),
        },
        base_train_accuracy: outcome.base_train_accuracy,
        encoder_digest: encoder_digest(&outcome.encoder),
        backbone_digest: backbone_digest(&outcome.encoder),
        timing: outcome.timings.clone(),
    };

    write_json(&out.join("results.json"), &doc)?;
    write_json(&out.join("plan.json"), &plan.summary())?;
    write_sessions_csv(&out.join("sessions.csv"), &doc.sessions)?;
    let mut f = BufWriter::new(File::create(out.join("encoder.ckpt"))?);
    write_checkpoint(&outcome.encoder, &mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(out.join("classifier.ckpt"))?);
    outcome.classifier.write_to(&mut f)?;
    f.flush()?;
    Ok(doc)
}

/// One row of `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub value: String,
    pub s_base: String,
    pub s_last: String,
    pub s_avg: String,
    pub pd: String,
    pub delta_params: usize,
}

/// `sweep`: one run per value on a shared dataset and plan, each in
/// `out/<axis>=<value>`, plus `out/comparison.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
) -> Result<Vec<(PathBuf, ResultsDocument)>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    match cfg.trainer.precision {
        Precision::Double => sweep_typed::<f64>(cfg, axis, values, &configs, out),
        Precision::Single => sweep_typed::<f32>(cfg, axis, values, &configs, out),
    }
}

fn sweep_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    configs: &[ExperimentConfig],
    out: &Path,
) -> Result<Vec<(PathBuf, ResultsDocument)>, CliError> {
    let data = load_dataset::<T>(cfg)?;
    let plan = build_plan(cfg, &data)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("plan.json"), &plan.summary())?;
    let mut docs = Vec::new();
    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(configs) {
        let dir = out.join(format!("{}={value}", axis.as_str()));
        log::info!("sweep {}={value} -> {}", axis.as_str(), dir.display());
        let doc = run_planned(c, &plan, &dir)?;
        rows.push(ComparisonRow {
            value: value.clone(),
            s_base: pct(doc.metrics.s_base),
            s_last: pct(doc.metrics.s_last),
            s_avg: pct(doc.metrics.s_avg),
            pd: pct(doc.metrics.pd),
            delta_params: doc.parameters.counts.delta_params,
        });
        docs.push((dir, doc));
    }
    let mut w = csv::Writer::from_path(out.join("comparison.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(docs)
}

/// Fraction as a percentage with two decimals.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_sessions_csv(path: &Path, rows: &[SessionRow]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Row {
        session: usize,
        classes: usize,
        test_samples: usize,
        accuracy_pct: String,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(Row {
            session: r.session,
            classes: r.classes,
            test_samples: r.test_samples,
            accuracy_pct: pct(r.accuracy),
        })
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a results document, ignoring nothing.
pub fn read_results(path: &Path) -> Result<ResultsDocument, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))
}

/// `results.json` text without the wall-clock section, for comparing runs.
pub fn results_without_timing(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(map) = v.as_object_mut() {
        map.remove("timing");
    }
    Ok(serde_json::to_string_pretty(&v).expect("value serializes"))
}
