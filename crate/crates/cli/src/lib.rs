//! Batch experiment runner: single runs, one-axis sweeps, ablations and the
//! cross-modality spectrum probe. Each command writes CSV files into an
//! output directory.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use log::info;
use specfed_core::checkpoint;
use specfed_core::federation::{self, ExperimentConfig, ExperimentResult, FederationError, RetrievalMode};
use specfed_core::fusion::{FusionConfig, FusionMode, PromptMode};
use specfed_core::spectral::{magnitude_spectrum, spectrum_distances};
use specfed_core::synthdata::{self, DataError};
use thiserror::Error;

pub use config::{Config, SweepAxis};
use output::fmt_f64;

pub const DEFAULT_OUT_DIR: &str = "specfed-out";
pub const OUT_ENV: &str = "SPECFED_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<FederationError> for CliError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Config(_) | FederationError::Data(DataError::Config(_)) => CliError::Config {
                key: "<config>".into(),
                message: e.to_string(),
            },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct Options {
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: PathBuf,
}

/// `--out` wins over the environment, which wins over `output.dir`.
pub fn output_dir(flag: Option<PathBuf>, env: Option<PathBuf>, config: &Config) -> PathBuf {
    flag.or(env)
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Client-mean of every `(task, metric)` over the final round.
pub fn final_values(result: &ExperimentResult) -> Vec<(String, String, f64)> {
    result
        .reports
        .last()
        .map(|r| output::summarize(r).into_iter().map(|(t, m, mean, _)| (t, m, mean)).collect())
        .unwrap_or_default()
}

pub fn run_config(experiment: &ExperimentConfig, workers: usize) -> Result<ExperimentResult, CliError> {
    let result = federation::run_experiment(experiment, workers)?;
    for r in &result.reports {
        info!("round {} participants {:?} bank {}", r.round, r.participants, r.bank_size);
    }
    Ok(result)
}

/// Runs the configured federation and writes `rounds.csv`, `summary.csv`,
/// `curves.svg` and `checkpoint.bin`.
pub fn run(config: &Config, opts: &Options) -> Result<ExperimentResult, CliError> {
    let experiment = config.experiment(opts.seed);
    create_dir(&opts.out)?;
    let result = run_config(&experiment, opts.workers)?;

    let rows = result.reports.iter().flat_map(|r| {
        r.records.iter().map(|x| {
            vec![
                x.round.to_string(),
                x.client_id.to_string(),
                x.task.clone(),
                x.metric.clone(),
                fmt_f64(x.value),
            ]
        })
    });
    output::write_csv(&opts.out.join("rounds.csv"), &output::ROUNDS_HEADER, rows)?;

    let summary = result.reports.last().map(output::summarize).unwrap_or_default();
    output::write_csv(
        &opts.out.join("summary.csv"),
        &output::SUMMARY_HEADER,
        summary.into_iter().map(|(t, m, mean, std)| vec![t, m, fmt_f64(mean), fmt_f64(std)]),
    )?;

    if config.output.svg {
        let path = opts.out.join("curves.svg");
        std::fs::write(&path, output::curves_svg(&result.reports)).map_err(|e| CliError::io(&path, e))?;
    }
    if config.output.checkpoint {
        let path = opts.out.join("checkpoint.bin");
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        checkpoint::save_federation(std::io::BufWriter::new(file), &result.federation)
            .map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))?;
    }
    Ok(result)
}

pub fn apply_axis(experiment: &mut ExperimentConfig, axis: SweepAxis, value: f64) {
    match axis {
        SweepAxis::Lambda => experiment.federation.lambda = value,
        SweepAxis::TopK => experiment.federation.top_k = value as usize,
    }
}

fn axis_label(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::Lambda => fmt_f64(value),
        SweepAxis::TopK => (value as usize).to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: String,
    pub task: String,
    pub metric: String,
    pub final_value: f64,
}

/// One experiment per value on the shared seed; writes `sweep.csv`.
pub fn sweep(config: &Config, axis: SweepAxis, values: &[f64], opts: &Options) -> Result<Vec<SweepRow>, CliError> {
    config::validate_sweep_values(axis, values, "values")?;
    if values.is_empty() {
        return Err(CliError::Config {
            key: "values".into(),
            message: "at least one sweep value is required".into(),
        });
    }
    create_dir(&opts.out)?;
    let mut rows = Vec::new();
    for &v in values {
        let mut experiment = config.experiment(opts.seed);
        apply_axis(&mut experiment, axis, v);
        info!("sweep {}={}", axis.name(), axis_label(axis, v));
        let result = run_config(&experiment, opts.workers)?;
        rows.extend(final_values(&result).into_iter().map(|(task, metric, final_value)| SweepRow {
            axis_value: axis_label(axis, v),
            task,
            metric,
            final_value,
        }));
    }
    output::write_csv(
        &opts.out.join("sweep.csv"),
        &output::SWEEP_HEADER,
        rows.iter().map(|r| vec![r.axis_value.clone(), r.task.clone(), r.metric.clone(), fmt_f64(r.final_value)]),
    )?;
    Ok(rows)
}

/// Pipeline variants. The first five make up the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Mean of the whole bank instead of top-k retrieval.
    WithoutGskr,
    /// FiLM modulation instead of cross-attention.
    WithoutEca,
    /// Projection layer instead of prefix/suffix prompting.
    WithoutPsp,
    /// Alignment weight zero.
    WithoutSpalign,
    /// No fusion, identity prompt and no alignment: plain FedAvg.
    FedAvg,
}

pub const ABLATION_VARIANTS: [Variant; 5] = [
    Variant::Full,
    Variant::WithoutGskr,
    Variant::WithoutEca,
    Variant::WithoutPsp,
    Variant::WithoutSpalign,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutGskr => "wo_gskr",
            Variant::WithoutEca => "wo_eca",
            Variant::WithoutPsp => "wo_psp",
            Variant::WithoutSpalign => "wo_spalign",
            Variant::FedAvg => "fedavg",
        }
    }

    pub fn apply(self, experiment: &mut ExperimentConfig) {
        let f = &mut experiment.federation;
        let fusion = &mut experiment.model.fusion;
        match self {
            Variant::Full => {}
            Variant::WithoutGskr => f.retrieval = RetrievalMode::BankMean,
            Variant::WithoutEca => fusion.mode = FusionMode::Film,
            Variant::WithoutPsp => fusion.prompt = PromptMode::Projection,
            Variant::WithoutSpalign => f.lambda = 0.0,
            Variant::FedAvg => {
                *fusion = FusionConfig::identity();
                f.lambda = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub task: String,
    pub metric: String,
    pub final_value: f64,
}

/// Full pipeline plus the four single-component ablations; writes
/// `ablation.csv`.
pub fn ablate(config: &Config, opts: &Options) -> Result<Vec<AblationRow>, CliError> {
    create_dir(&opts.out)?;
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut experiment = config.experiment(opts.seed);
        variant.apply(&mut experiment);
        info!("ablation variant {}", variant.name());
        let result = run_config(&experiment, opts.workers)?;
        rows.extend(final_values(&result).into_iter().map(|(task, metric, final_value)| AblationRow {
            variant: variant.name(),
            task,
            metric,
            final_value,
        }));
    }
    output::write_csv(
        &opts.out.join("ablation.csv"),
        &output::ABLATION_HEADER,
        rows.iter().map(|r| vec![r.variant.to_string(), r.task.clone(), r.metric.clone(), fmt_f64(r.final_value)]),
    )?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub pair_id: usize,
    pub modality_a: usize,
    pub modality_b: usize,
    pub full_distance: f64,
    pub lowpass_distance: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub rows: Vec<ProbeRow>,
    /// Mean ratio over the cross-modality pairs, if any.
    pub mean_ratio: Option<f64>,
}

/// Renders scene pairs under two modalities and compares their spectra;
/// writes `spectrum.csv` and, if enabled, `spectra/pair_NNNN_{a,b}.pgm`.
pub fn spectrum_probe(config: &Config, opts: &Options) -> Result<ProbeOutcome, CliError> {
    let probe = &config.probe;
    let seed = opts.seed.unwrap_or(config.federation.seed);
    create_dir(&opts.out)?;
    let image_dir = opts.out.join("spectra");
    if probe.images && probe.pairs > 0 {
        create_dir(&image_dir)?;
    }
    let mut rows = Vec::with_capacity(probe.pairs);
    for id in 0..probe.pairs {
        let pair = synthdata::probe_pair(&config.data, seed, id as u64, probe.include_same)
            .map_err(|e| CliError::Runtime(format!("probe pair {id}: {e}")))?;
        let (full, low) = spectrum_distances(&pair.a.image, &pair.b.image, probe.cutoff)
            .map_err(|e| CliError::Runtime(format!("probe pair {id}: {e}")))?;
        if probe.images {
            output::write_spectrum_pgm(&image_dir.join(format!("pair_{id:04}_a.pgm")), &magnitude_spectrum(&pair.a.image))?;
            output::write_spectrum_pgm(&image_dir.join(format!("pair_{id:04}_b.pgm")), &magnitude_spectrum(&pair.b.image))?;
        }
        rows.push(ProbeRow {
            pair_id: id,
            modality_a: pair.a.modality,
            modality_b: pair.b.modality,
            full_distance: full,
            lowpass_distance: low,
            ratio: if full == 0.0 { 0.0 } else { low / full },
        });
    }
    output::write_csv(
        &opts.out.join("spectrum.csv"),
        &output::SPECTRUM_HEADER,
        rows.iter().map(|r| {
            vec![
                r.pair_id.to_string(),
                r.modality_a.to_string(),
                r.modality_b.to_string(),
                fmt_f64(r.full_distance),
                fmt_f64(r.lowpass_distance),
                fmt_f64(r.ratio),
            ]
        }),
    )?;
    let cross: Vec<f64> = rows.iter().filter(|r| r.modality_a != r.modality_b).map(|r| r.ratio).collect();
    let mean_ratio = (!cross.is_empty()).then(|| cross.iter().sum::<f64>() / cross.len() as f64);
    Ok(ProbeOutcome { rows, mean_ratio })
}
