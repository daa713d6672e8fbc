//! The `cfx` command line.
//!
//! Failures print one JSON line on stderr, e.g.
//! `{"error":"validation","code":2,"message":"..."}`, and exit with the code:
//! 2 for invalid input, 3 for file system problems, 4 for model transport.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use cfx_core::artifact::{read_run, write_run};
use cfx_core::cohort::{CohortError, FilterClause};
use cfx_core::engine::{self, EngineError, RunArtifact, RunOptions, RunRequest};
use cfx_core::evaluate::{sample_indices, FidelityReport};
use cfx_core::gateway::{Gateway, GatewayError, ModelSpec, PredictRequest};
use cfx_core::io::{write_dataset, DataError, Dataset};
use cfx_core::synth::{self, IntensityBands, SynthError, SyntheticConfig};
use cfx_core::{ModelError, SegmentSelection, SubjectRecord};

#[derive(Debug, Parser)]
#[command(name = "cfx", version, about = "Segment recombination counterfactuals for cardiac image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Gen(GenArgs),
    /// Classify every subject and store labels in the demographics table.
    Predict(PredictArgs),
    /// Recombine targets with sources and classify the results.
    Recombine(RecombineArgs),
    /// Print per-selection counterfactual counts of one or more runs.
    Summarize(SummarizeArgs),
    /// Re-segment a random sample of recombined images and report Dice.
    EvalSeg(EvalSegArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Skip pixel noise.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `synthetic`, `cmd:<shell command>` or `http:<url>`.
    #[arg(long, default_value = "synthetic")]
    pub model: String,
    /// Seconds to wait for an external model response.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct RecombineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// File with one target id per line.
    #[arg(long)]
    pub targets: PathBuf,
    /// File with one source id per line.
    #[arg(long)]
    pub sources: PathBuf,
    /// `all` or comma-separated segment names; every nonempty subset is run.
    #[arg(long)]
    pub segments: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub store_volumes: bool,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Run directory; repeat to pool several runs.
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    /// Restrict to sources matching `VAR=LO:HI` or `VAR=a,b`.
    #[arg(long)]
    pub by: Option<String>,
    /// Dataset to read demographics from, instead of the one recorded in the run.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub sample: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = cfx_server::DATASET_ENV)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory for completed runs; they are reloaded on restart.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value = "synthetic")]
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Model,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Validation => 2,
            Self::Io => 3,
            Self::Model => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Validation => "validation",
            Self::Io => "io",
            Self::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    /// The single stderr line for this error.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "code": self.kind.exit_code(),
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Io { .. } | DataError::AlreadyExists(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let kind = match e {
            GatewayError::Config(_) => ErrorKind::Validation,
            _ => ErrorKind::Model,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Gateway(g) => g.into(),
            other => Self::validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::validation(e.to_string())
            }
        }
    )*};
}
validation_from!(SynthError, ModelError, CohortError);

/// Parses arguments, runs the command and returns the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::validation(first.trim_start_matches("error: "));
            eprintln!("{}", err.line());
            return err.kind.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.exit_code()
        }
    }
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => gen(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Recombine(a) => recombine(a, out),
        Command::Summarize(a) => summarize(a, out),
        Command::EvalSeg(a) => eval_seg(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(format!("stdout: {e}")))
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(format!("{}: {e}", p.display()))),
        None => emit(out, text),
    }
}

fn refuse_existing(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        return Err(DataError::AlreadyExists(path.to_path_buf()).into());
    }
    Ok(())
}

pub fn gen(a: &GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    refuse_existing(&a.out)?;
    let mut config = SyntheticConfig::new(a.subjects, a.seed).with_frames(a.frames);
    config.size = a.size;
    if a.noiseless {
        config = config.noiseless();
    }
    let data = synth::generate(&config)?;
    let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = a.out.with_file_name(format!(".{name}.partial{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    let written = write_dataset(&tmp, &data, Some(a.seed))
        .and_then(|_| fs::rename(&tmp, &a.out).map_err(|e| DataError::Io { path: a.out.clone(), source: e }));
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.into());
    }
    let ds = Dataset::load(&a.out)?;
    emit(
        out,
        &format!("wrote {} subjects to {} digest {}\n", ds.records.len(), a.out.display(), ds.digest),
    )
}

fn gateway_for(dataset: &Dataset, m: &ModelArgs) -> Result<Gateway, CliError> {
    let mut spec: ModelSpec = m.model.parse()?;
    if let ModelSpec::External(cfg) = &mut spec {
        if let Some(t) = m.timeout {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::validation(format!("timeout must be positive, got {t}")));
            }
            cfg.timeout = Duration::from_secs_f64(t);
        }
        if let Some(b) = m.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
    }
    Ok(Gateway::from_spec(&spec, dataset.manifest.synthetic.as_ref())?)
}

pub fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = Dataset::load(&a.dataset)?;
    let gateway = gateway_for(&ds, &a.model)?;
    let requests: Vec<PredictRequest<'_>> = ds
        .subjects
        .iter()
        .map(|s| PredictRequest::new(s.volume(), Some(s.segmap())))
        .collect();
    let predictions = gateway.predict_many(&requests)?;
    let records: Vec<SubjectRecord> = ds
        .records
        .iter()
        .zip(&predictions)
        .map(|(r, p)| SubjectRecord {
            predicted_label: p.label,
            probability: p.probability,
            ..r.clone()
        })
        .collect();
    ds.save_records(&records)?;
    let positives = predictions.iter().filter(|p| p.label == 1).count();
    emit(
        out,
        &format!(
            "predicted {} subjects with {}: {} label 1, {} label 0\n",
            records.len(),
            gateway.model_id(),
            positives,
            records.len() - positives
        ),
    )
}

/// Reads one id per line, skipping blanks and `#` comments.
pub fn read_ids(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if ids.is_empty() {
        return Err(CliError::validation(format!("{}: no ids", path.display())));
    }
    Ok(ids)
}

/// Builds the run exactly as `cfx recombine` does, without writing it.
pub fn recombine_artifact(a: &RecombineArgs, dataset: &Dataset) -> Result<RunArtifact, CliError> {
    let request = RunRequest {
        targets: read_ids(&a.targets)?,
        sources: read_ids(&a.sources)?,
        selections: SegmentSelection::parse_list(&a.segments, dataset.schema())?.subsets(),
    };
    let gateway = gateway_for(dataset, &a.model)?;
    let options = RunOptions {
        jobs: a.jobs,
        store_volumes: a.store_volumes,
        created_at: None,
    };
    Ok(engine::run(dataset, &gateway, &request, &options)?)
}

pub fn recombine(a: &RecombineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    refuse_existing(&a.out)?;
    let ds = Dataset::load(&a.dataset)?;
    let artifact = recombine_artifact(a, &ds)?;
    write_run(&artifact, &a.out)?;
    emit(
        out,
        &format!(
            "run {}: {} results, {} counterfactuals, {} skipped, written to {}\n",
            artifact.run_id,
            artifact.results.len(),
            artifact.results.iter().filter(|r| r.is_counterfactual).count(),
            artifact.skipped(),
            a.out.display()
        ),
    )
}

fn dataset_for(run: &RunArtifact, run_dir: &Path, explicit: Option<&Path>) -> Result<Dataset, CliError> {
    let path = match (explicit, &run.dataset) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(CliError::validation(format!(
                "{}: run records no dataset; pass --dataset",
                run_dir.display()
            )))
        }
    };
    let ds = Dataset::load(&path)?;
    if ds.digest != run.dataset_digest {
        return Err(CliError::validation(format!(
            "dataset {} (digest {}) is not the one run {} used (digest {})",
            path.display(),
            ds.digest,
            run.run_id,
            run.dataset_digest
        )));
    }
    Ok(ds)
}

/// Summary CSV as `cfx summarize` prints it.
pub fn summary_text(a: &SummarizeArgs) -> Result<String, CliError> {
    let clause = a
        .by
        .as_deref()
        .map(|b| b.parse::<FilterClause>())
        .transpose()?;
    let mut parts = Vec::new();
    for dir in &a.run {
        let run = read_run(dir)?;
        let rows = match &clause {
            None => engine::summarize(&run),
            Some(c) => {
                let ds = dataset_for(&run, dir, a.dataset.as_deref())?;
                engine::subgroup_summarize(&run, &ds.manifest.variables, c, |id| ds.record(id).cloned())?
            }
        };
        parts.push(rows);
    }
    Ok(engine::summary_csv(&engine::merge_summaries(&parts)))
}

pub fn summarize(a: &SummarizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = summary_text(a)?;
    write_or_print(a.out.as_deref(), &text, out)
}

/// Aggregated fidelity report as `cfx eval-seg` computes it.
pub fn fidelity_report(a: &EvalSegArgs) -> Result<FidelityReport, CliError> {
    if a.sample == 0 {
        return Err(CliError::validation("--sample must be >= 1"));
    }
    let run = read_run(&a.run)?;
    let ds = dataset_for(&run, &a.run, a.dataset.as_deref())?;
    let bands = ds
        .manifest
        .synthetic
        .as_ref()
        .map(|c| c.bands)
        .unwrap_or_else(IntensityBands::default);
    let idx = sample_indices(run.results.len(), a.sample, a.seed);
    let reports = engine::fidelity_sample(&ds, &run, &idx, |v| synth::synthetic_segmenter(v, &bands))?;
    FidelityReport::aggregate(&reports).ok_or_else(|| CliError::validation("run has no results"))
}

pub fn eval_seg(a: &EvalSegArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = fidelity_report(a)?;
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf)
        .map_err(|e| CliError::io(e.to_string()))?;
    write_or_print(a.out.as_deref(), &String::from_utf8(buf).expect("utf8 csv"), out)
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    cfx_server::serve(cfx_server::ServerConfig {
        dataset: a.dataset.clone(),
        port: a.port,
        model: a.model.clone(),
        jobs: a.jobs,
        runs_dir: a.runs.clone(),
        cors_origin: a.cors_origin.clone(),
    })
    .map_err(|e| {
        if e.is::<DataError>() {
            CliError::from(*e.downcast::<DataError>().expect("checked"))
        } else if e.is::<GatewayError>() {
            CliError::from(*e.downcast::<GatewayError>().expect("checked"))
        } else {
            CliError::io(e.to_string())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(ErrorKind::Validation.exit_code(), 2);
        assert_eq!(ErrorKind::Io.exit_code(), 3);
        assert_eq!(ErrorKind::Model.exit_code(), 4);
    }

    #[test]
    fn error_line_is_single_json_object() {
        let e = CliError::validation("bad\ninput");
        let line = e.line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["error"], "validation");
    }

    #[test]
    fn gateway_errors_map_to_model_code() {
        let e: CliError = GatewayError::Timeout { id: "x".into() }.into();
        assert_eq!(e.kind, ErrorKind::Model);
        let e: CliError = EngineError::Gateway(GatewayError::Config("c".into())).into();
        assert_eq!(e.kind, ErrorKind::Validation);
        let e: CliError = EngineError::UnknownIds(vec!["a".into()]).into();
        assert_eq!(e.kind, ErrorKind::Validation);
    }

    #[test]
    fn bad_arguments_exit_two() {
        assert_eq!(main_from(["cfx", "gen", "--subjects", "x"]), 2);
        assert_eq!(main_from(["cfx", "frobnicate"]), 2);
    }

    #[test]
    fn parses_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        fs::write(&p, "# targets\ns01\n\n  s02 \n").unwrap();
        assert_eq!(read_ids(&p).unwrap(), vec!["s01", "s02"]);
        fs::write(&p, "\n# none\n").unwrap();
        assert_eq!(read_ids(&p).unwrap_err().kind, ErrorKind::Validation);
        assert_eq!(read_ids(&dir.path().join("missing")).unwrap_err().kind, ErrorKind::Io);
    }
}
