//! The `drw` command line: key generation, batch watermarking, detection,
//! simulation, sweeps and mAP evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use drw_core::detect::{detect_watermark, mean_average_precision, read_probe_file, write_probe_file, average_precision};
use drw_core::io::{read_json_lines, to_json_lines, to_json_string, write_atomic, PredictionLine, WatermarkedLine};
use drw_core::sim::{format_sweep_table, run_experiment_detailed, sweep_parameter, ExperimentConfig, ModelRole, SweepParameter};
use drw_core::spectral::{lomb_scargle, FrequencyGrid, GridSpec};
use drw_core::watermark::{respond, sampling_stream, Answer, ProbabilityVector};
use drw_core::{DetectionParams, KeyFile, KeyParams, OutputMode, RankingTrial, WatermarkConfig, WatermarkKey};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TOO_FEW_PROBES: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "drw", version, about = "Keyed output watermarking and spectral watermark detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a watermark key with its serving configuration.
    Keygen(KeygenArgs),
    /// Watermark a file of prediction records.
    Watermark(WatermarkArgs),
    /// Probe records against a key and write a detection report.
    Detect(DetectArgs),
    /// Run a distillation experiment on the simulator.
    Simulate(SimulateArgs),
    /// Rerun an experiment over a list of parameter values.
    Sweep(SweepArgs),
    /// Mean average precision of ranking trials.
    EvalMap(EvalMapArgs),
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub freq: f64,
    #[arg(long)]
    pub target_class: usize,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WatermarkArgs {
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub mode: OutputMode,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the hard-label sampling stream; record i uses sequence i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub fmax: f64,
    #[arg(long)]
    pub threshold: f64,
    #[arg(long)]
    pub report: PathBuf,
    /// Selection ratio, when the key file does not carry one.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = GridSpec::default().start)]
    pub grid_start: f64,
    #[arg(long, default_value_t = GridSpec::default().stop)]
    pub grid_stop: f64,
    #[arg(long, default_value_t = GridSpec::default().step)]
    pub grid_step: f64,
    /// Also write the spectrum as two columns (frequency, power).
    #[arg(long)]
    pub spectrum: Option<PathBuf>,
    /// Include the probe series in the report.
    #[arg(long)]
    pub echo_series: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the key, one probe file per suspect and a manifest here.
    #[arg(long)]
    pub emit_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub param: SweepParameter,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Full per-value results as one document.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    /// A document holding an array of ranking trials.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    TooFewProbes(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::TooFewProbes(_) => EXIT_TOO_FEW_PROBES,
        }
    }
}

fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(message) => {
            if !message.is_empty() {
                println!("{message}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Keygen(a) => keygen(a),
        Command::Watermark(a) => watermark(a),
        Command::Detect(a) => detect(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::EvalMap(a) => eval_map(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(data(path.display()))
}

fn keygen(a: &KeygenArgs) -> Result<String, CliError> {
    let params = KeyParams {
        classes: a.classes,
        vocab_size: a.vocab,
        dim: a.dim,
        frequency: a.freq,
        target_class: a.target_class,
    };
    let key = WatermarkKey::generate(&params, a.seed).map_err(data("keygen"))?;
    let cfg = WatermarkConfig::new(a.eps, a.tau, OutputMode::Soft).map_err(data("keygen"))?;
    KeyFile::with_config(key, &cfg).save(&a.out).map_err(data(a.out.display()))?;
    Ok(format!("wrote key to {}", a.out.display()))
}

fn load_key_config(path: &Path, mode: OutputMode, tau: Option<f64>) -> Result<(WatermarkKey, WatermarkConfig), CliError> {
    let file = KeyFile::load(path).map_err(data(path.display()))?;
    let cfg = match (file.config(mode), tau) {
        (Some(cfg), None) => cfg.map_err(data(path.display()))?,
        (stored, Some(tau)) => {
            let eps = match stored {
                Some(Ok(c)) => c.epsilon(),
                _ => 0.0,
            };
            WatermarkConfig::new(eps, tau, mode).map_err(data("--tau"))?
        }
        (None, None) => {
            return Err(CliError::Data(format!(
                "{}: key file has no epsilon/tau serving configuration",
                path.display()
            )))
        }
    };
    Ok((file.key, cfg))
}

fn watermark(a: &WatermarkArgs) -> Result<String, CliError> {
    let (key, cfg) = load_key_config(&a.key, a.mode, None)?;
    let lines: Vec<PredictionLine> = read_json_lines(&a.input).map_err(data(a.input.display()))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let context = format!("{} line {}", a.input.display(), i + 1);
        let p = ProbabilityVector::new(line.probs.clone()).map_err(data(&context))?;
        let x = usize::try_from(line.x).unwrap_or(usize::MAX);
        let mut rng = sampling_stream(a.seed, i as u64);
        let o = respond(&key, &cfg, x, &p, &mut rng).map_err(data(&context))?;
        out.push(match o.answer {
            Answer::Soft(y) => WatermarkedLine::Soft {
                x: line.x,
                probs: y.into_inner(),
                selected: o.selected,
            },
            Answer::Hard(c) => WatermarkedLine::Hard {
                x: line.x,
                label: c as u64,
                selected: o.selected,
            },
        });
    }
    write_text(&a.out, &to_json_lines(&out))?;
    Ok(format!("watermarked {} records", out.len()))
}

fn detect(a: &DetectArgs) -> Result<String, CliError> {
    let (key, cfg) = load_key_config(&a.key, OutputMode::Soft, a.tau)?;
    let records = read_probe_file(&a.probe).map_err(data(a.probe.display()))?;
    let grid = FrequencyGrid::linear(a.grid_start, a.grid_stop, a.grid_step).map_err(data("grid"))?;
    let params = DetectionParams {
        grid,
        delta: a.delta,
        f_max: a.fmax,
        threshold: a.threshold,
        echo_series: a.echo_series || a.spectrum.is_some(),
    };
    let mut report = detect_watermark(&key, &cfg, &records, &params).map_err(data("detect"))?;
    if let Some(path) = &a.spectrum {
        let text = match &report.series {
            Some(series) => lomb_scargle(series, &params.grid).to_columns(),
            None => String::from("# frequency power\n"),
        };
        write_text(path, &text)?;
        if !a.echo_series {
            report.series = None;
        }
    }
    report.save(&a.report).map_err(data(a.report.display()))?;
    if report.too_few_probes() {
        return Err(CliError::TooFewProbes(format!(
            "only {} selected probes; report written with a negative decision",
            report.n_probes_used
        )));
    }
    Ok(format!(
        "p_snr {} decision {}",
        report.snr.p_snr,
        if report.is_positive() { "positive" } else { "negative" }
    ))
}

fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(data(path.display()))?;
    serde_json::from_str(&text).map_err(data(path.display()))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    role: ModelRole,
    mode: OutputMode,
    index: usize,
    p_snr: f64,
    n_probes_used: usize,
}

#[derive(Serialize)]
struct Manifest {
    key: String,
    grid: GridSpec,
    delta: f64,
    f_max: f64,
    threshold: f64,
    probes: Vec<ManifestEntry>,
}

fn mode_name(mode: OutputMode) -> &'static str {
    match mode {
        OutputMode::Soft => "soft",
        OutputMode::Hard => "hard",
    }
}

fn simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let cfg = read_config(&a.config)?;
    let run = run_experiment_detailed(&cfg).map_err(data("simulate"))?;
    let mut text = to_json_string(&run.result);
    text.push('\n');
    write_text(&a.out, &text)?;

    if let Some(dir) = &a.emit_dir {
        fs::create_dir_all(dir.join("probes")).map_err(data(dir.display()))?;
        let serving = cfg.watermark_config(OutputMode::Soft).map_err(data("simulate"))?;
        let key_path = dir.join("key.drw");
        KeyFile::with_config(run.analogs[0].key.clone(), &serving)
            .save(&key_path)
            .map_err(data(key_path.display()))?;
        let mut entries = Vec::new();
        for model in run.models.iter().filter(|m| m.analog == 0) {
            let role = match model.role {
                ModelRole::Positive => "positive",
                ModelRole::UnwatermarkedNegative => "unwatermarked",
                ModelRole::TrueLabelNegative => "true_label",
            };
            let name = if model.role == ModelRole::TrueLabelNegative {
                format!("probes/{role}_{}.jsonl", model.index)
            } else {
                format!("probes/{role}_{}_{}.jsonl", mode_name(model.mode), model.index)
            };
            let path = dir.join(&name);
            write_probe_file(&path, &model.records).map_err(data(path.display()))?;
            entries.push(ManifestEntry {
                file: name,
                role: model.role,
                mode: model.mode,
                index: model.index,
                p_snr: model.report.snr.p_snr,
                n_probes_used: model.report.n_probes_used,
            });
        }
        let manifest = Manifest {
            key: "key.drw".into(),
            grid: cfg.grid,
            delta: cfg.delta,
            f_max: cfg.f_max,
            threshold: cfg.threshold,
            probes: entries,
        };
        let mut text = to_json_string(&manifest);
        text.push('\n');
        write_text(&dir.join("manifest.json"), &text)?;
    }

    let summary: Vec<String> = [OutputMode::Soft, OutputMode::Hard]
        .into_iter()
        .filter_map(|m| run.result.mode(m).map(|r| format!("{} mAP {} mean positive p_snr {:.3}", mode_name(m), r.map, r.mean_positive_snr)))
        .collect();
    Ok(summary.join("\n"))
}

fn sweep(a: &SweepArgs) -> Result<String, CliError> {
    let cfg = read_config(&a.config)?;
    let rows = sweep_parameter(&cfg, a.param, &a.values).map_err(data("sweep"))?;
    let table = format_sweep_table(a.param, &rows);
    write_text(&a.out, &table)?;
    if let Some(path) = &a.json {
        let mut text = to_json_string(&rows);
        text.push('\n');
        write_text(path, &text)?;
    }
    Ok(table.trim_end().to_string())
}

#[derive(Serialize)]
struct MapReport {
    map: f64,
    trials: usize,
    average_precision: Vec<f64>,
}

fn eval_map(a: &EvalMapArgs) -> Result<String, CliError> {
    let text = fs::read_to_string(&a.input).map_err(data(a.input.display()))?;
    let trials: Vec<RankingTrial> = serde_json::from_str(&text).map_err(data(a.input.display()))?;
    let map = mean_average_precision(&trials).map_err(data("eval-map"))?;
    if let Some(path) = &a.out {
        let per_trial = trials
            .iter()
            .map(average_precision)
            .collect::<Result<Vec<_>, _>>()
            .map_err(data("eval-map"))?;
        let mut text = to_json_string(&MapReport {
            map,
            trials: trials.len(),
            average_precision: per_trial,
        });
        text.push('\n');
        write_text(path, &text)?;
    }
    Ok(format!("mAP {map}"))
}
