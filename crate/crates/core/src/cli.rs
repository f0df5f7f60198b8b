//! Command-line front end: `train`, `eval`, `diagnose` and `synth`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, LabelTable, SynthConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::metrics;
use crate::pipeline::{self, Classifier, Mode, PipelineConfig, StageId};
use crate::tensor::{ParamStore, Tensor};
use crate::{checkpoint, DEFAULT_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_COLLAPSE: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "ncre", version, about = "Non-contrastive relation extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model (staged or joint) and write checkpoints plus a test report.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on a labelled TSV.
    Eval(EvalArgs),
    /// Print anisotropy and effective rank of a checkpoint's representations.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic labelled corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value config file; flags and --set override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train on a generated corpus instead of --data.
    #[arg(long)]
    pub synth: bool,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub vocab_per_class: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Momentum decay of the target network.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Drop stop-gradient and the predictor and set delta to 0.
    #[arg(long)]
    pub ablate: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Stage-3 (or joint) directory, or the checkpoint file inside it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to labels.txt of the run directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Any stage directory, or the checkpoint file inside it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().num_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab_per_class)]
    pub vocab_per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().overlap)]
    pub overlap: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Also write the label table.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::Parse { .. }
        | Error::UnknownLabels { .. }
        | Error::LabelTable(_)
        | Error::EmptyInput(_)
        | Error::EmptyPairing => EXIT_DATA,
        Error::Collapse { .. } | Error::DegenerateVector { .. } => EXIT_COLLAPSE,
        Error::Checkpoint(_) | Error::Dimension { .. } => EXIT_CHECKPOINT,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Synth(a) => synth(a),
    }
}

/// Config file, then flags, then `--set` overrides.
pub fn build_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &a.labels {
        cfg.labels = Some(v.clone());
    }
    if let Some(v) = &a.out {
        cfg.out = v.clone();
    }
    cfg.synth |= a.synth;
    let s = &mut cfg.synth_config;
    s.num_classes = a.classes.unwrap_or(s.num_classes);
    s.per_class = a.per_class.unwrap_or(s.per_class);
    s.vocab_per_class = a.vocab_per_class.unwrap_or(s.vocab_per_class);
    s.overlap = a.overlap.unwrap_or(s.overlap);
    let p = &mut cfg.pipeline;
    p.seed = a.seed.unwrap_or(p.seed);
    p.mode = a.mode.unwrap_or(p.mode);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.lambda = a.lambda.unwrap_or(p.lambda);
    p.byol.delta = a.delta.unwrap_or(p.byol.delta);
    if a.ablate {
        p.byol = p.byol.ablated();
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_of(name: &str) -> Option<StageId> {
    [StageId::FineTune, StageId::NonContrastive, StageId::Classify, StageId::Joint]
        .into_iter()
        .find(|s| s.dir_name() == name)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    let (table, split) = cfg.load_data()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let run_file = cfg.out.join("run.txt");
    std::fs::write(&run_file, cfg.to_text()).map_err(|e| Error::io(&run_file, e))?;
    let result = match cfg.pipeline.mode {
        Mode::Staged => pipeline::run_pipeline::<f64>(&split, &table, &cfg.pipeline, Some(&cfg.out)),
        Mode::Joint => pipeline::run_joint::<f64>(&split, &table, &cfg.pipeline, Some(&cfg.out)),
    };
    let output = match result {
        Ok(o) => o,
        Err(Error::Collapse {
            stage,
            history_csv,
            source,
        }) => {
            let dir = stage_of(&stage).map_or_else(|| cfg.out.join(&stage), |s| pipeline::stage_dir(&cfg.out, s));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(pipeline::HISTORY_FILE);
            std::fs::write(&path, &history_csv).map_err(|e| Error::io(&path, e))?;
            eprintln!("partial history written to {}", path.display());
            return Err(Error::Collapse {
                stage,
                history_csv,
                source,
            });
        }
        Err(e) => return Err(e),
    };
    for stage in &output.stages {
        if let Some(last) = stage.history.last() {
            println!(
                "{}: epochs={} loss={:.6} anisotropy={:.4} effective_rank={:.3}",
                stage.stage.dir_name(),
                stage.history.len(),
                last.mean_loss,
                last.anisotropy,
                last.effective_rank
            );
        }
    }
    println!("macro_f1={:.4}", output.report.macro_f1);
    println!("report written to {}", cfg.out.join(pipeline::REPORT_FILE).display());
    Ok(())
}

/// Checkpoint file and the directory holding its `config.txt`.
fn resolve_checkpoint(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(pipeline::CHECKPOINT_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

struct Loaded {
    store: ParamStore<f64>,
    cfg: PipelineConfig,
    table: LabelTable,
}

fn load_checkpoint(path: &Path, labels: Option<&Path>) -> Result<Loaded> {
    let (file, dir) = resolve_checkpoint(path);
    let store = checkpoint::load::<f64>(&file)?;
    let snap_path = dir.join(pipeline::SNAPSHOT_FILE);
    let snap = std::fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
    let cfg = PipelineConfig::from_snapshot(&snap)?;
    let run_labels = dir.parent().map(|p| p.join(pipeline::LABELS_FILE));
    let table = match (labels, run_labels) {
        (Some(p), _) => LabelTable::load(p)?,
        (None, Some(p)) if p.is_file() => LabelTable::load(&p)?,
        _ => LabelTable::default(),
    };
    Ok(Loaded { store, cfg, table })
}

fn eval(a: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint, a.labels.as_deref())?;
    let samples = data::load_tsv(&a.data, &loaded.table)?;
    let clf = Classifier::from_checkpoint(&loaded.store, &loaded.cfg, loaded.table.len())?;
    let report = clf.evaluate(&samples, &loaded.table, &loaded.cfg.tokenizer)?;
    match &a.out {
        Some(p) => metrics::emit_report(&report, p)?,
        None => print!("{}", report.to_tsv()),
    }
    Ok(())
}

fn representations(loaded: &Loaded, tokens: &[Vec<usize>]) -> Result<Tensor<f64>> {
    if loaded.store.iter().any(|p| p.name.starts_with("online.")) {
        let pair = pipeline::load_pair(&loaded.store, &loaded.cfg)?;
        pipeline::represent_all(&pair, tokens, 256)
    } else {
        let enc = Encoder::bind(&loaded.store, "encoder", loaded.cfg.tokenizer.vocab_size, loaded.cfg.encoder)?;
        enc.encode_batch(&loaded.store, tokens)
    }
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint, a.labels.as_deref())?;
    let samples = data::load_tsv(&a.data, &loaded.table)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("diagnostic set"));
    }
    let tokens = pipeline::tokenize_all(&samples, &loaded.cfg.tokenizer);
    let reps = representations(&loaded, &tokens)?;
    let seed = loaded.cfg.seed;
    let snap = metrics::diagnose(&reps, seed)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.predicate).collect();
    let cross = metrics::cross_class_anisotropy(&reps, &labels, seed)?;
    println!("samples={}", samples.len());
    println!("anisotropy={:.6}", snap.anisotropy);
    println!("cross_class_anisotropy={:.6}", cross);
    println!("effective_rank={:.6}", snap.effective_rank);
    println!("collapsed={}", snap.collapsed);
    let top: Vec<String> = snap.singular_values.iter().take(10).map(|s| format!("{s:.6e}")).collect();
    println!("singular_values={}", top.join(","));
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        per_class: a.per_class,
        vocab_per_class: a.vocab_per_class,
        overlap: a.overlap,
        seed: a.seed,
    };
    let table = LabelTable::first_n(cfg.num_classes)?;
    let samples = data::synth_generate(&cfg)?;
    data::write_tsv(&a.out, &samples, &table)?;
    if let Some(p) = &a.labels_out {
        std::fs::write(p, table.to_text()).map_err(|e| Error::io(p, e))?;
    }
    println!("wrote {} sentences to {}", samples.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("ncre").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_then_set_overrides() {
        let Command::Train(a) = parse(&["train", "--synth", "--batch-size", "16", "--set", "batch_size=8", "--seed", "3"])
        else {
            panic!("expected train")
        };
        let cfg = build_config(&a).unwrap();
        assert_eq!(cfg.pipeline.batch_size, 8);
        assert_eq!(cfg.pipeline.seed, 3);
        assert!(cfg.synth);
    }

    #[test]
    fn ablate_flag_disables_the_asymmetry() {
        let Command::Train(a) = parse(&["train", "--synth", "--ablate"]) else {
            panic!("expected train")
        };
        let b = build_config(&a).unwrap().pipeline.byol;
        assert!(!b.stop_gradient && !b.use_predictor);
        assert_eq!(b.delta, 0.0);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::EmptyPairing), EXIT_DATA);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_CHECKPOINT);
        let collapse = Error::Collapse {
            stage: "stage2".into(),
            history_csv: String::new(),
            source: Box::new(Error::DegenerateVector { context: "t", norm: 0.0 }),
        };
        assert_eq!(exit_code(&collapse), EXIT_COLLAPSE);
        assert_eq!(main_with_args(["ncre", "train", "--bogus"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["ncre", "train"]), EXIT_CONFIG);
    }
}
